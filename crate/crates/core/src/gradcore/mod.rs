//! Differentiable models, per-example and subset gradients, gradient
//! bundles, subsampling masks and checkpoints.
//!
//! Per-example gradients are taken through the full-batch forward pass:
//! batch-norm statistics come from the whole batch, and example `i`'s
//! gradient is the derivative of its own loss term. This keeps them exactly
//! additive: `sum_i g_i = B * batch_gradient`.

mod bundle;
pub mod checkpoint;
mod grads;
mod mask;
mod model;

pub use bundle::{GradientBundle, Reduction};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use grads::{
    batch_gradient, check_partition, grad_of_sum, per_example_gradients, subset_gradients,
};
pub use mask::{flatten_subsample, make_subsample_mask, mask_count, SubsampleMask};
pub use model::{Architecture, Layer, LossKind, ModelHandle, ParamVars, BN_EPS};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, LabeledBatch, SyntheticSpec, Targets};
    use autodiff::Tensor;

    fn scalar_model(w: f64) -> ModelHandle {
        let mut m = ModelHandle::new(
            Architecture::Linear {
                inputs: 1,
                outputs: 1,
                bias: false,
            },
            0,
        )
        .unwrap();
        m.param_mut("fc.weight").unwrap().data_mut()[0] = w;
        m
    }

    fn scalar_batch(xs: &[f64], ys: &[f64]) -> LabeledBatch {
        LabeledBatch::new(
            Tensor::new(vec![xs.len(), 1], xs.to_vec()),
            Targets::Values(ys.to_vec()),
        )
        .unwrap()
    }

    fn toy_batch(b: usize, seed: u64) -> (ModelHandle, LabeledBatch) {
        let ds = synthetic(&SyntheticSpec {
            n: b,
            seed,
            ..Default::default()
        })
        .unwrap();
        let model = ModelHandle::new(Architecture::toy_cnn(8, 8, 10), seed).unwrap();
        let idx: Vec<usize> = (0..b).collect();
        (model, ds.batch(&idx))
    }

    #[test]
    fn scalar_model_gradients_by_hand() {
        let m = scalar_model(1.0);
        let batch = scalar_batch(&[1.0, 2.0], &[0.0, 0.0]);
        // d/dw (wx - y)^2 = 2x(wx - y): 2 and 8
        let g = batch_gradient(&m, &batch, LossKind::SquaredError).unwrap();
        assert_eq!(g.get("fc.weight").unwrap().data(), &[5.0]);
        assert_eq!(g.reduction(), Reduction::BatchMean);
        let per = per_example_gradients(&m, &batch, LossKind::SquaredError).unwrap();
        assert_eq!(per[0].get("fc.weight").unwrap().data(), &[2.0]);
        assert_eq!(per[1].get("fc.weight").unwrap().data(), &[8.0]);
        let (nul, rec) = subset_gradients(&m, &batch, &[0], &[1], LossKind::SquaredError).unwrap();
        assert_eq!(nul.get("fc.weight").unwrap().data(), &[2.0]);
        assert_eq!(rec.get("fc.weight").unwrap().data(), &[8.0]);
    }

    #[test]
    fn zero_inputs_give_zero_gradient() {
        let m = ModelHandle::new(
            Architecture::Linear {
                inputs: 4,
                outputs: 3,
                bias: false,
            },
            1,
        )
        .unwrap();
        let batch =
            LabeledBatch::new(Tensor::zeros(vec![2, 4]), Targets::Classes(vec![0, 2])).unwrap();
        let g = batch_gradient(&m, &batch, LossKind::CrossEntropy).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn per_example_sum_matches_batch_with_batchnorm() {
        let (model, batch) = toy_batch(6, 3);
        let g = batch_gradient(&model, &batch, LossKind::CrossEntropy).unwrap();
        let per = per_example_gradients(&model, &batch, LossKind::CrossEntropy).unwrap();
        let mut sum = GradientBundle::zeros_like(&model, Reduction::BatchMean);
        for p in &per {
            sum.axpy(1.0 / 6.0, p).unwrap();
        }
        let scale = g.flatten().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(sum.max_abs_diff(&g) <= 1e-10 * scale.max(1.0));
    }

    #[test]
    fn identical_examples_give_identical_bundles() {
        let ds = synthetic(&SyntheticSpec {
            n: 1,
            ..Default::default()
        })
        .unwrap();
        let batch = ds.batch(&[0, 0, 0]);
        let model = ModelHandle::new(Architecture::toy_cnn(8, 8, 10), 0).unwrap();
        let per = per_example_gradients(&model, &batch, LossKind::CrossEntropy).unwrap();
        let scale = per[0].norm();
        assert!(per[0].max_abs_diff(&per[1]) <= 1e-12 * scale);
        assert!(per[1].max_abs_diff(&per[2]) <= 1e-12 * scale);
    }

    #[test]
    fn without_batchnorm_examples_are_independent() {
        let m = ModelHandle::new(
            Architecture::Linear {
                inputs: 3,
                outputs: 4,
                bias: true,
            },
            2,
        )
        .unwrap();
        let x = Tensor::new(
            vec![3, 3],
            vec![0.1, -0.4, 0.9, 1.2, 0.3, -0.7, 0.0, 0.5, 0.5],
        );
        let batch = LabeledBatch::new(x, Targets::Classes(vec![1, 3, 0])).unwrap();
        let per = per_example_gradients(&m, &batch, LossKind::CrossEntropy).unwrap();
        for (i, p) in per.iter().enumerate() {
            let single = batch_gradient(&m, &batch.select(&[i]), LossKind::CrossEntropy).unwrap();
            assert!(p.max_abs_diff(&single) < 1e-14);
        }
    }

    #[test]
    fn subset_gradients_partition_rules() {
        let (model, batch) = toy_batch(4, 5);
        let (nul, rec) =
            subset_gradients(&model, &batch, &[], &[0, 1, 2, 3], LossKind::CrossEntropy).unwrap();
        assert!(nul.flatten().iter().all(|&v| v == 0.0));
        let g = batch_gradient(&model, &batch, LossKind::CrossEntropy).unwrap();
        assert!(rec.max_abs_diff(&g.scaled(4.0)) < 1e-12);

        let (nul, rec) =
            subset_gradients(&model, &batch, &[0, 2], &[1, 3], LossKind::CrossEntropy).unwrap();
        let sum = nul.add(&rec).unwrap();
        assert!(sum.max_abs_diff(&g.scaled(4.0)) < 1e-12);

        let err = subset_gradients(&model, &batch, &[0, 1], &[1, 2, 3], LossKind::CrossEntropy)
            .unwrap_err();
        assert!(matches!(err, crate::Error::InvalidPartition(_)));
        let err =
            subset_gradients(&model, &batch, &[0], &[1, 2], LossKind::CrossEntropy).unwrap_err();
        assert!(matches!(err, crate::Error::InvalidPartition(_)));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let model = ModelHandle::new(Architecture::toy_cnn(8, 8, 10), 0).unwrap();
        let batch = LabeledBatch::new(
            Tensor::zeros(vec![2, 4, 4, 3]),
            Targets::Classes(vec![0, 1]),
        )
        .unwrap();
        assert!(matches!(
            batch_gradient(&model, &batch, LossKind::CrossEntropy),
            Err(crate::Error::InputShape { .. })
        ));
        let empty = LabeledBatch::from_images(&[], vec![]).unwrap();
        assert!(matches!(
            per_example_gradients(&model, &empty, LossKind::CrossEntropy),
            Err(crate::Error::EmptyBatch)
        ));
    }

    #[test]
    fn linear_layer_names_are_conv_and_dense_weights() {
        let model = ModelHandle::new(Architecture::toy_cnn(8, 8, 10), 0).unwrap();
        assert_eq!(
            model.linear_layer_names(),
            &["conv1.weight", "conv2.weight", "fc.weight"]
        );
        let names: Vec<&str> = model.param_names().collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }

    #[test]
    fn mask_cardinality_and_seeding() {
        let model = ModelHandle::new(Architecture::toy_cnn(8, 8, 10), 0).unwrap();
        let full = make_subsample_mask(&model, 1.0, 1, 7).unwrap();
        assert_eq!(full.len(), model.num_params());
        for (name, idx) in full.indices() {
            assert_eq!(idx.len(), model.param(name).unwrap().len());
        }
        let m = ModelHandle::new(
            Architecture::Linear {
                inputs: 10,
                outputs: 10,
                bias: false,
            },
            0,
        )
        .unwrap();
        let mask = make_subsample_mask(&m, 0.001, 8, 0).unwrap();
        assert_eq!(mask.indices()["fc.weight"].len(), 8);

        let a = make_subsample_mask(&model, 0.1, 4, 1).unwrap();
        let b = make_subsample_mask(&model, 0.1, 4, 1).unwrap();
        let c = make_subsample_mask(&model, 0.1, 4, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.indices(), c.indices());
        for idx in a.indices().values() {
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
        assert!(make_subsample_mask(&model, 0.0, 4, 1).is_err());
        assert!(make_subsample_mask(&model, 1.5, 4, 1).is_err());
    }

    #[test]
    fn flatten_subsample_basics() {
        let (model, batch) = toy_batch(3, 0);
        let mask = make_subsample_mask(&model, 0.2, 3, 0).unwrap();
        let zero = GradientBundle::zeros_like(&model, Reduction::BatchMean);
        assert!(flatten_subsample(&zero, &mask)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let per = per_example_gradients(&model, &batch, LossKind::CrossEntropy).unwrap();
        let combo = per[0].scaled(2.5).add(&per[1].scaled(-0.75)).unwrap();
        let lhs = flatten_subsample(&combo, &mask).unwrap();
        let f0 = flatten_subsample(&per[0], &mask).unwrap();
        let f1 = flatten_subsample(&per[1], &mask).unwrap();
        for (l, (a, b)) in lhs.iter().zip(f0.iter().zip(&f1)) {
            let r = 2.5 * a - 0.75 * b;
            assert!((l - r).abs() <= 1e-7 * l.abs().max(r.abs()).max(1e-12));
        }
        let other = ModelHandle::new(
            Architecture::Linear {
                inputs: 2,
                outputs: 2,
                bias: false,
            },
            0,
        )
        .unwrap();
        let wrong = GradientBundle::zeros_like(&other, Reduction::BatchMean);
        assert!(matches!(
            flatten_subsample(&wrong, &mask),
            Err(crate::Error::MaskMismatch(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let model = ModelHandle::new(Architecture::toy_cnn(8, 8, 10), 11).unwrap();
        let mask = make_subsample_mask(&model, 0.1, 2, 3).unwrap();
        let stem = dir.path().join("model");
        save_checkpoint(&stem, &model, Some(&mask), Some("abc")).unwrap();
        let (back, manifest) = load_checkpoint(&stem).unwrap();
        assert_eq!(back, model);
        assert_eq!(manifest.mask.as_ref(), Some(&mask));
        assert_eq!(manifest.config_hash.as_deref(), Some("abc"));

        let (archive, _) = checkpoint::checkpoint_paths(&stem);
        let mut bytes = std::fs::read(&archive).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&archive, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&stem),
            Err(crate::Error::Format { .. })
        ));
    }
}
