use std::collections::BTreeMap;

use autodiff::Tensor;
use proptest::prelude::*;
use seerlab::data::{synthetic, Image, SyntheticSpec};
use seerlab::detect::{dsnr, Snr};
use seerlab::evalkit::{psnr, psnr_top, rec_rate};
use seerlab::fedsim::{
    aggregate, clip_per_layer, dirichlet_partition, dp_transform, sample_client_indices, DpConfig,
};
use seerlab::gradcore::{Architecture, GradientBundle, LossKind, ModelHandle, Reduction};
use seerlab::property::{order_stat_cdfs_from_values, select_local_values, Cdf, Extreme};
use seerlab::seer::DecoderParams;

fn bundle(a: &[f64], b: &[f64]) -> GradientBundle {
    let mut m = BTreeMap::new();
    m.insert("a".to_string(), Tensor::new(vec![a.len()], a.to_vec()));
    m.insert("b".to_string(), Tensor::new(vec![b.len()], b.to_vec()));
    GradientBundle::new(m, Reduction::BatchMean)
}

fn close(x: &[f64], y: &[f64], rel: f64) -> bool {
    let scale = x.iter().chain(y).fold(1e-300f64, |m, v| m.max(v.abs()));
    x.iter().zip(y).all(|(a, b)| (a - b).abs() <= rel * scale)
}

fn image(values: &[f64]) -> Image {
    Image::new(1, values.len() / 3, 3, values.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregation_is_linear(
        g1 in prop::collection::vec(-10.0f64..10.0, 7),
        g2 in prop::collection::vec(-10.0f64..10.0, 7),
        n1 in 1usize..50,
        n2 in 1usize..50,
        s in -5.0f64..5.0,
    ) {
        let (b1, b2) = (bundle(&g1[..3], &g1[3..]), bundle(&g2[..3], &g2[3..]));
        let base = aggregate(&[(b1.clone(), n1), (b2.clone(), n2)]).unwrap();
        let scaled = aggregate(&[(b1.scaled(s), n1), (b2.scaled(s), n2)]).unwrap();
        prop_assert!(close(&scaled.gradient().flatten(), &base.gradient().scaled(s).flatten(), 1e-7));
        let sum = aggregate(&[(b1.add(&b2).unwrap(), n1), (b2.add(&b1).unwrap(), n2)]).unwrap();
        let parts = aggregate(&[(b1.clone(), n1), (b2.clone(), n2)]).unwrap().gradient()
            .add(aggregate(&[(b2, n1), (b1, n2)]).unwrap().gradient()).unwrap();
        prop_assert!(close(&sum.gradient().flatten(), &parts.flatten(), 1e-7));
    }

    #[test]
    fn clipping_bounds_every_layer(
        g in prop::collection::vec(-100.0f64..100.0, 7),
        clip in 0.01f64..20.0,
    ) {
        let b = bundle(&g[..3], &g[3..]);
        let c = clip_per_layer(&b, clip);
        for name in ["a", "b"] {
            prop_assert!(c.layer_norm(name).unwrap() <= clip + 1e-6);
            let before = b.layer_norm(name).unwrap();
            if before <= clip {
                prop_assert_eq!(c.get(name), b.get(name));
            }
        }
        let dp = DpConfig { clip, sigma: 0.0, seed: 0 };
        let out = dp_transform(std::slice::from_ref(&b), &dp).unwrap();
        prop_assert!(close(&out.flatten(), &c.flatten(), 1e-12));
    }

    #[test]
    fn dominance_grows_with_the_dominant_share(
        values in prop::collection::vec(0.01f64..10.0, 2..12),
        k in 1.0f64..100.0,
        pick in any::<prop::sample::Index>(),
    ) {
        let top = values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let mut up = values.clone();
        up[top] *= k;
        prop_assert!(Snr::dominance(&up) >= Snr::dominance(&values));
        let i = pick.index(values.len());
        let mut huge = values.clone();
        huge[i] *= 1e9;
        let rest: f64 = values.iter().sum::<f64>() - values[i];
        prop_assert!(Snr::dominance(&huge).value() >= 0.999 * huge[i] / rest);
        let mut rev = values.clone();
        rev.reverse();
        let (r, v) = (Snr::dominance(&rev).value(), Snr::dominance(&values).value());
        prop_assert!((r - v).abs() <= 1e-12 * v);
    }

    #[test]
    fn local_selection_ignores_affine_rescaling(
        values in prop::collection::vec(-100.0f64..100.0, 2..32),
        a in 0.1f64..10.0,
        c in -100.0f64..100.0,
    ) {
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-6));
        let moved: Vec<f64> = values.iter().map(|v| a * v + c).collect();
        for extreme in [Extreme::Max, Extreme::Min] {
            let sel = select_local_values(&values, extreme).unwrap();
            prop_assert_eq!(sel.i_rec.len(), 1);
            prop_assert_eq!(&sel, &select_local_values(&moved, extreme).unwrap());
        }
    }

    #[test]
    fn second_order_statistic_cdf_dominates(
        values in prop::collection::vec(-5.0f64..5.0, 8..64),
        b in 2usize..8,
        seed in any::<u64>(),
        normalize in any::<bool>(),
    ) {
        let (phi1, phi2) = order_stat_cdfs_from_values(&values, b, 200, seed, normalize).unwrap();
        let (lo, hi) = (phi1.support().0.min(phi2.support().0) - 1.0, phi1.support().1.max(phi2.support().1) + 1.0);
        for k in 0..=400 {
            let x = lo + (hi - lo) * k as f64 / 400.0;
            prop_assert!(phi2.cdf(x) >= phi1.cdf(x) - 1e-12);
        }
    }

    #[test]
    fn psnr_is_symmetric_and_permutation_invariant(
        pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..20),
        shift in 0usize..60,
    ) {
        let a: Vec<f64> = pairs.iter().flat_map(|p| [p.0, p.0 * 0.5, 1.0 - p.0]).collect();
        let b: Vec<f64> = pairs.iter().flat_map(|p| [p.1, p.1 * 0.5, 1.0 - p.1]).collect();
        let p = psnr(&image(&a), &image(&b), 1.0).unwrap();
        prop_assert_eq!(p, psnr(&image(&b), &image(&a), 1.0).unwrap());
        let r = shift % a.len();
        let (mut ra, mut rb) = (a.clone(), b.clone());
        ra.rotate_left(r);
        rb.rotate_left(r);
        let q = psnr(&image(&ra), &image(&rb), 1.0).unwrap();
        prop_assert!(p == q || (p - q).abs() <= 1e-9 * p.abs());
    }

    #[test]
    fn rec_rate_is_nonincreasing_in_the_threshold(
        psnrs in prop::collection::vec(0.0f64..60.0, 1..50),
        t1 in 0.0f64..60.0,
        dt in 0.0f64..30.0,
    ) {
        prop_assert!(rec_rate(&psnrs, t1 + dt).unwrap() <= rec_rate(&psnrs, t1).unwrap());
    }

    #[test]
    fn top_mean_is_nonincreasing_in_the_fraction(
        psnrs in prop::collection::vec(0.0f64..150.0, 1..50),
        f1 in 0.01f64..1.0,
        f2 in 0.01f64..1.0,
    ) {
        let (lo, hi) = (f1.min(f2), f1.max(f2));
        prop_assert!(psnr_top(&psnrs, lo).unwrap().0 >= psnr_top(&psnrs, hi).unwrap().0 - 1e-9);
    }

    #[test]
    fn decoder_projection_is_linear(
        u in prop::collection::vec(-10.0f64..10.0, 12),
        v in prop::collection::vec(-10.0f64..10.0, 12),
        s in -3.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let dec = DecoderParams::fused(12, [2, 2, 3], seed).unwrap();
        let w: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + s * b).collect();
        let (du, dv) = (dec.project(&u).unwrap(), dec.project(&v).unwrap());
        let expect: Vec<f64> = du.iter().zip(&dv).map(|(a, b)| a + s * b).collect();
        prop_assert!(close(&dec.project(&w).unwrap(), &expect, 1e-7));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dsnr_ignores_batch_order(seed in 0u64..1000, rot in 1usize..8) {
        let ds = synthetic(&SyntheticSpec { n: 64, seed, ..Default::default() }).unwrap();
        let model = ModelHandle::new(Architecture::toy_cnn(8, 8, 10), seed).unwrap();
        let idx: Vec<usize> = (0..8).map(|k| (k * 7 + seed as usize) % 64).collect();
        let mut perm = idx.clone();
        perm.rotate_left(rot);
        perm.swap(0, 5);
        let a = dsnr(&model, &ds.batch(&idx), LossKind::CrossEntropy).unwrap();
        let b = dsnr(&model, &ds.batch(&perm), LossKind::CrossEntropy).unwrap();
        for (name, v) in &a.per_layer_dsnr {
            let w = b.per_layer_dsnr[name];
            prop_assert!((v.value() - w.value()).abs() <= 1e-9 * v.value().abs());
        }
        prop_assert!(a.dsnr.value() > 0.0);
    }
}

#[test]
fn dirichlet_partition_with_large_alpha_is_near_uniform() {
    let labels: Vec<usize> = (0..10_000).map(|i| i % 10).collect();
    let clients = 10;
    let mut mean_hist = vec![vec![0.0; 10]; clients];
    for seed in 0..20 {
        let parts = dirichlet_partition(&labels, clients, 100.0, seed).unwrap();
        let mut seen: Vec<usize> = parts.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10_000).collect::<Vec<_>>());
        for (c, part) in parts.iter().enumerate() {
            let mut hist = vec![0.0; 10];
            for &i in part {
                hist[labels[i]] += 1.0 / part.len() as f64;
            }
            assert!((hist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (m, h) in mean_hist[c].iter_mut().zip(hist) {
                *m += h / 20.0;
            }
        }
    }
    for hist in &mean_hist {
        for &p in hist {
            assert!((p - 0.1).abs() <= 0.2 * 0.1, "class share {p}");
        }
    }
}

#[test]
fn single_draws_are_uniform_over_the_partition() {
    let part: Vec<usize> = (100..120).collect();
    let n = 10_000;
    let mut counts = BTreeMap::new();
    for seed in 0..n as u64 {
        let idx = sample_client_indices(std::slice::from_ref(&part), 1, seed).unwrap();
        *counts.entry(idx[0][0]).or_insert(0usize) += 1;
    }
    let p = 1.0 / part.len() as f64;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    assert_eq!(counts.len(), part.len());
    for (&i, &c) in &counts {
        assert!(part.contains(&i));
        assert!(
            (c as f64 - n as f64 * p).abs() <= 3.0 * sigma,
            "index {i} drawn {c} times"
        );
    }
}

#[test]
fn dp_noise_has_the_configured_scale() {
    let zero = bundle(&[0.0; 3], &[0.0; 4]);
    let (clip, sigma) = (2.0, 0.01);
    let reps = 10_000;
    let mut samples = Vec::with_capacity(reps * 7);
    for seed in 0..reps as u64 {
        let out =
            dp_transform(std::slice::from_ref(&zero), &DpConfig { clip, sigma, seed }).unwrap();
        samples.extend(out.flatten());
    }
    let std_target = clip * sigma;
    for k in 0..7 {
        let xs: Vec<f64> = samples.iter().skip(k).step_by(7).copied().collect();
        let mean = xs.iter().sum::<f64>() / reps as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        assert!(
            mean.abs() <= 4.0 * std_target / (reps as f64).sqrt(),
            "entry {k} mean {mean}"
        );
        assert!((sd / std_target - 1.0).abs() <= 0.05, "entry {k} std {sd}");
    }
}
