//! The secret-disaggregation attack: joint training of the shared weights
//! and a secret linear decoder, and mounting on observed updates.

mod artifact;
pub mod augment;
mod decoder;
mod losses;
mod schedule;
mod train;

pub use artifact::{
    calibrate_output_range, estimate_clip_factors, median_clip_factors, mount, mount_dp,
    mount_input, AttackArtifact,
};
pub use augment::{batch_augment, data_augment, AugmentConfig, BatchAugmentOutcome, TargetCount};
pub use decoder::{DecoderParams, DecoderVars};
pub use losses::{loss_nul, loss_rec, surrogate_nul, total_loss, RecNorm};
pub use schedule::{alpha_at, AlphaSchedule};
pub use train::{attack_losses, train, Adam, CurveRow, TrainConfig};

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::augment::{flip_horizontal, rotate_quarter};
    use super::*;
    use crate::data::{synthetic, Image, SyntheticSpec};
    use crate::fedsim::AggregateUpdate;
    use crate::gradcore::{
        make_subsample_mask, Architecture, GradientBundle, ModelHandle, Reduction, SubsampleMask,
    };
    use crate::property::{measure, select_threshold_values, Extreme, Measurement};

    /// A two-entry parameter space (`fc.weight`, 1x2) with the full mask.
    fn plane() -> (ModelHandle, SubsampleMask) {
        let model = ModelHandle::new(
            Architecture::Linear {
                inputs: 2,
                outputs: 1,
                bias: false,
            },
            0,
        )
        .unwrap();
        let mask = make_subsample_mask(&model, 1.0, 1, 0).unwrap();
        (model, mask)
    }

    fn vec2(a: f64, b: f64) -> GradientBundle {
        let mut m = BTreeMap::new();
        m.insert("fc.weight".to_string(), Tensor::new(vec![1, 2], vec![a, b]));
        GradientBundle::new(m, Reduction::SubsetSum)
    }

    fn fused(m: [f64; 4], b: [f64; 2]) -> DecoderParams {
        DecoderParams::from_fused(
            Tensor::new(vec![2, 2], m.to_vec()),
            Tensor::new(vec![2], b.to_vec()),
            [1, 1, 2],
        )
        .unwrap()
    }

    const IDENTITY: [f64; 4] = [1.0, 0.0, 0.0, 1.0];

    #[test]
    fn alpha_schedule_examples() {
        assert_eq!(alpha_at(0.0, &AlphaSchedule::standard(10, 16)), 0.25);
        assert_eq!(alpha_at(10.0, &AlphaSchedule::standard(10, 128)), 128.0);
        assert_eq!(alpha_at(5.0, &AlphaSchedule::standard(10, 16)), 2.0);
        // clamped outside [0, K]
        assert_eq!(alpha_at(-3.0, &AlphaSchedule::standard(10, 16)), 0.25);
        assert_eq!(alpha_at(12.0, &AlphaSchedule::standard(10, 16)), 16.0);
    }

    #[test]
    fn nul_loss_examples() {
        let (_, mask) = plane();
        let zero = fused([0.0; 4], [0.0; 2]);
        assert_eq!(loss_nul(&zero, &[vec2(3.0, 4.0)], &mask).unwrap(), 0.0);
        // null space of [[1, 1], [1, 1]]
        let ones = fused([1.0; 4], [0.0; 2]);
        assert_eq!(loss_nul(&ones, &[vec2(2.0, -2.0)], &mask).unwrap(), 0.0);
        assert_eq!(
            loss_nul(&fused(IDENTITY, [0.0; 2]), &[vec2(3.0, 4.0)], &mask).unwrap(),
            25.0
        );
        assert!(matches!(
            loss_nul(
                &DecoderParams::fused(3, [1, 1, 2], 0).unwrap(),
                &[vec2(1.0, 1.0)],
                &mask
            ),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn surrogate_examples() {
        let (_, mask) = plane();
        let id = fused(IDENTITY, [9.0; 2]);
        let g = vec2(1.0, 2.0);
        assert_eq!(surrogate_nul(&id, Some((&g, &g)), &mask).unwrap(), 10.0);
        assert_eq!(
            surrogate_nul(&fused([0.0; 4], [0.0; 2]), Some((&g, &g)), &mask).unwrap(),
            0.0
        );
        // mean of [1, 0] and [-1, 0] is 0; sampled j = 0
        let mean = vec2(1.0, 0.0).add(&vec2(-1.0, 0.0)).unwrap().scaled(0.5);
        assert_eq!(
            surrogate_nul(&id, Some((&mean, &vec2(1.0, 0.0))), &mask).unwrap(),
            1.0
        );
        assert_eq!(surrogate_nul(&id, None, &mask).unwrap(), 0.0);
    }

    #[test]
    fn rec_loss_examples() {
        let (_, mask) = plane();
        let dec = fused([1.0, 2.0, 3.0, 4.0], [0.5, -1.0]);
        let g = vec2(1.0, -1.0);
        // M v + b = [1 - 2 + 0.5, 3 - 4 - 1] = [-0.5, -2]
        let exact = Image::new(1, 1, 2, vec![-0.5, -2.0]).unwrap();
        assert_eq!(loss_rec(&dec, &g, &exact, &mask, RecNorm::L2).unwrap(), 0.0);
        let x = Image::new(1, 1, 2, vec![0.5, 0.0]).unwrap();
        assert_eq!(
            loss_rec(&dec, &g, &x, &mask, RecNorm::L2).unwrap(),
            1.0 + 4.0
        );
        assert_eq!(
            loss_rec(&dec, &g, &x, &mask, RecNorm::L1).unwrap(),
            1.0 + 2.0
        );
        let zero_out = dec.decode(&[0.0, 0.0]).unwrap();
        assert_eq!(zero_out.data(), &[0.5, -1.0]);
        let wrong = Image::new(1, 1, 3, vec![0.0; 3]).unwrap();
        assert!(loss_rec(&dec, &g, &wrong, &mask, RecNorm::L2).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(3.0, 7.0, 0.0), 3.0);
        assert_eq!(total_loss(1.0, 2.0, 0.5), 2.0);
    }

    #[test]
    fn decoder_is_linear_without_bias_in_d() {
        let dec = DecoderParams::fused(5, [1, 2, 2], 3).unwrap();
        let (u, v) = ([1.0, -2.0, 0.5, 3.0, 0.0], [0.25, 1.0, -1.0, 2.0, 4.0]);
        let w: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        let (du, dv, dw) = (
            dec.project(&u).unwrap(),
            dec.project(&v).unwrap(),
            dec.project(&w).unwrap(),
        );
        for k in 0..dw.len() {
            assert!((dw[k] - (2.0 * du[k] - 3.0 * dv[k])).abs() < 1e-12);
        }
        assert!(dec.project(&[0.0; 5]).unwrap().iter().all(|&x| x == 0.0));
        assert!(dec.is_fused() && dec.n_d() == dec.n_r());
        let unfused = DecoderParams::unfused(5, 3, [1, 2, 2], 3).unwrap();
        assert_eq!((unfused.n_sub(), unfused.n_d(), unfused.n_r()), (5, 3, 4));
    }

    fn toy_artifact(epochs: usize) -> AttackArtifact {
        let ds = synthetic(&SyntheticSpec {
            n: 64,
            height: 4,
            width: 4,
            classes: 3,
            ..Default::default()
        })
        .unwrap();
        let arch = Architecture::ToyCnn {
            height: 4,
            width: 4,
            channels: 3,
            conv1: 2,
            conv2: 2,
            classes: 3,
        };
        let model = ModelHandle::new(arch, 1).unwrap();
        let cfg = TrainConfig {
            epochs,
            steps_per_epoch: 3,
            accumulation: 2,
            batch_size: 4,
            ..Default::default()
        };
        train(&model, &ds, &cfg).unwrap()
    }

    #[test]
    fn zero_epochs_keep_the_initialization() {
        let art = toy_artifact(0);
        let cfg = art.config();
        let init = ModelHandle::new(art.model().architecture().clone(), 1).unwrap();
        assert_eq!(art.model().params(), init.params());
        let fresh = DecoderParams::fused(art.mask().len(), [4, 4, 3], cfg.decoder_seed).unwrap();
        assert_eq!(art.decoder(), &fresh);
        assert!(art.curve().is_empty());
    }

    #[test]
    fn training_is_deterministic_and_moves_parameters() {
        let (a, b) = (toy_artifact(2), toy_artifact(2));
        assert_eq!(a, b);
        assert_eq!(a.curve().len(), 2 * 3 * 2);
        assert_ne!(a.model().params(), toy_artifact(0).model().params());
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path(), Some("abc")).unwrap();
        let loaded = AttackArtifact::load(dir.path()).unwrap();
        assert_eq!(loaded.model(), a.model());
        assert_eq!(loaded.decoder(), a.decoder());
        assert_eq!(
            AttackArtifact::config_hash(dir.path()).unwrap().as_deref(),
            Some("abc")
        );
    }

    #[test]
    fn training_rejects_bad_configs() {
        let ds = synthetic(&SyntheticSpec {
            n: 8,
            ..Default::default()
        })
        .unwrap();
        let model = ModelHandle::new(Architecture::toy_cnn(8, 8, 10), 0).unwrap();
        let bad = TrainConfig {
            accumulation: 0,
            ..Default::default()
        };
        assert!(matches!(
            train(&model, &ds, &bad),
            Err(crate::Error::Config { .. })
        ));
        let big = TrainConfig {
            batch_size: 16,
            ..Default::default()
        };
        assert!(train(&model, &ds, &big).is_err());
        let other = ModelHandle::new(Architecture::toy_cnn(4, 4, 10), 0).unwrap();
        assert!(matches!(
            train(&other, &ds, &TrainConfig::default()),
            Err(crate::Error::InputShape { .. })
        ));
    }

    #[test]
    fn mount_is_fused_affine_map_of_the_summed_gradient() {
        let art = toy_artifact(1);
        let ds = synthetic(&SyntheticSpec {
            n: 16,
            height: 4,
            width: 4,
            classes: 3,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let batch = ds.batch(&[0, 1, 2, 3]);
        let g = crate::gradcore::batch_gradient(
            art.model(),
            &batch,
            crate::gradcore::LossKind::CrossEntropy,
        )
        .unwrap();
        let update = AggregateUpdate::new(g.clone(), vec![4]).unwrap();
        let rec = mount(&art, &update).unwrap();
        assert_eq!(rec, mount(&art, &update).unwrap());
        let v = crate::gradcore::flatten_subsample(&g.scaled(4.0), art.mask()).unwrap();
        assert_eq!(rec, art.decoder().decode(&v).unwrap());

        let zero = AggregateUpdate::new(g.scaled(0.0), vec![4]).unwrap();
        assert_eq!(
            mount(&art, &zero).unwrap().data(),
            art.decoder().r_bias().data()
        );

        let ones: BTreeMap<String, f64> = g.entries().keys().map(|k| (k.clone(), 1.0)).collect();
        assert_eq!(mount_dp(&art, &update, &ones).unwrap(), rec);

        let wrong = ModelHandle::new(Architecture::toy_cnn(8, 8, 10), 0).unwrap();
        let foreign = GradientBundle::zeros_like(&wrong, Reduction::BatchMean);
        let update = AggregateUpdate::new(foreign, vec![4]).unwrap();
        assert!(matches!(
            mount(&art, &update),
            Err(crate::Error::Architecture(_))
        ));
    }

    #[test]
    fn clip_factor_examples() {
        let norms = |v: &[f64]| BTreeMap::from([("w".to_string(), v.to_vec())]);
        assert!((median_clip_factors(&norms(&[10.0; 5]), 3.0)["w"] - 0.3).abs() < 1e-15);
        assert_eq!(median_clip_factors(&norms(&[0.5, 3.0, 2.0]), 3.0)["w"], 1.0);
        assert_eq!(
            median_clip_factors(&norms(&[1.0, 2.0, 30.0]), 3.0)["w"],
            1.0
        );
    }

    #[test]
    fn calibration_examples() {
        let im = |v: f64| Image::filled(2, 2, 3, v);
        assert_eq!(
            calibrate_output_range(&[im(0.2), im(1.0)], 1.0).unwrap(),
            1.0
        );
        assert_eq!(
            calibrate_output_range(&[im(2.0), im(1.6)], 1.0).unwrap(),
            0.5
        );
        let mut outlier = vec![im(0.5); 9];
        outlier.push(im(10.0));
        assert_eq!(calibrate_output_range(&outlier, 1.0).unwrap(), 0.1);
        assert_eq!(calibrate_output_range(&outlier, 0.9).unwrap(), 1.0);
        assert!(calibrate_output_range(&[], 1.0).is_err());
    }

    fn noise_images(n: usize, seed: u64) -> Vec<Image> {
        let ds = synthetic(&SyntheticSpec {
            n,
            seed,
            ..Default::default()
        })
        .unwrap();
        ds.images().to_vec()
    }

    #[test]
    fn augmentation_identity_involution_and_range() {
        let imgs = noise_images(8, 2);
        assert_eq!(data_augment(&imgs, &AugmentConfig::none(), 4), imgs);
        for im in &imgs {
            assert_eq!(&flip_horizontal(&flip_horizontal(im)), im);
            assert_eq!(&rotate_quarter(im, 4), im);
        }
        let out = data_augment(&imgs, &AugmentConfig::default(), 4);
        assert_eq!(out, data_augment(&imgs, &AugmentConfig::default(), 4));
        assert!(out
            .iter()
            .flat_map(|im| im.data())
            .all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn batch_augment_reaches_the_target_count() {
        let m = Measurement::Brightness;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = synthetic(&SyntheticSpec {
            n: 256,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        for target in [TargetCount::ExactlyOne, TargetCount::ExactlyZero] {
            let imgs = ds.sample_batch(16, &mut rng).unwrap().images().unwrap();
            let out = batch_augment(&imgs, 1.5, target, &m, Extreme::Max, 50).unwrap();
            assert!(out.accepted);
            let vals: Vec<f64> = out
                .images
                .iter()
                .map(|im| measure(im, &m).unwrap())
                .collect();
            assert_eq!(
                select_threshold_values(&vals, 1.5, Extreme::Max, true)
                    .i_rec
                    .len(),
                target.count()
            );
            // a satisfied batch is a fixed point
            let again = batch_augment(&out.images, 1.5, target, &m, Extreme::Max, 50).unwrap();
            assert_eq!((again.iterations, &again.images), (0, &out.images));
        }
        let flat = vec![Image::filled(2, 2, 3, 0.5); 4];
        let out = batch_augment(&flat, 1.0, TargetCount::ExactlyOne, &m, Extreme::Max, 3).unwrap();
        assert!(out.iterations <= 3);
    }

    #[test]
    fn adam_first_step_moves_by_the_learning_rate() {
        let mut adam = Adam::new(0.1);
        let mut p = Tensor::new(vec![3], vec![1.0, 1.0, 1.0]);
        adam.tick();
        adam.apply("p", &mut p, &Tensor::new(vec![3], vec![2.0, -0.5, 0.0]));
        let expect = [0.9, 1.1, 1.0];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_learning_rate_endpoints() {
        let cfg = TrainConfig {
            epochs: 2,
            steps_per_epoch: 5,
            learning_rate: 1.0,
            lr_final_fraction: 0.1,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 1.0);
        assert!((cfg.lr_at(9) - 0.1).abs() < 1e-12);
        assert!(cfg.lr_at(4) < 1.0 && cfg.lr_at(4) > 0.1);
        assert_eq!(TrainConfig::default().lr_at(123), 1e-4);
    }
}
