mod common;

use common::*;
use hgad_core::numerics::{Graph, Tensor};
use hgad_core::prior::{HierarchicalPrior, Stage};

#[test]
fn single_class_reduces_to_standard_normal_flow_loss() {
    for seed in 0..10 {
        let mut toy = Toy::new(1, 1, 4, 7, seed);
        toy.prior.mu = Tensor::zeros(1, 4);
        toy.prior.psi = Tensor::zeros(1, 1);
        let (z, ld) = toy.latents();
        let rows = toy.labels.len();
        let plain: f64 = (0..rows)
            .map(|r| half_log_2pi(4) + 0.5 * z.row(r).iter().map(|v| v * v).sum::<f64>() - ld[r])
            .sum::<f64>()
            / rows as f64;
        let lg = loss_value(&toy, LossKind::G);
        assert!((lg - plain).abs() <= 1e-7, "seed {seed}: {lg} vs {plain}");
        assert_eq!(loss_value(&toy, LossKind::Mi), 0.0);
        assert_eq!(loss_value(&toy, LossKind::E), 0.0);
    }
}

#[test]
fn logsoftmax_form_equals_general_mutual_information_form() {
    for seed in 0..100 {
        let toy = Toy::new(4, 2, 4, 8, 1000 + seed);
        let practical = loss_value(&toy, LossKind::Mi);
        let general = mi_general_form(&toy);
        assert!((practical - general).abs() <= 1e-6, "seed {seed}: {practical} vs {general}");
    }
}

#[test]
fn mixture_nll_matches_raw_density() {
    for seed in 0..20 {
        let toy = Toy::new(3, 2, 4, 6, 200 + seed);
        let (lg, naive) = (loss_value(&toy, LossKind::G), lg_naive(&toy));
        assert!((lg - naive).abs() <= 1e-6, "seed {seed}: {lg} vs {naive}");
    }
}

#[test]
fn intra_nll_matches_raw_density() {
    for seed in 0..20 {
        let toy = Toy::new(2, 3, 4, 6, 300 + seed);
        let (lin, naive) = (loss_value(&toy, LossKind::In), lin_naive(&toy));
        assert!((lin - naive).abs() <= 1e-6, "seed {seed}: {lin} vs {naive}");
    }
}

#[test]
fn sample_logp_matches_raw_density() {
    for seed in 0..20 {
        let toy = Toy::new(3, 3, 4, 9, 400 + seed);
        let (z, ld) = toy.latents();
        let stats = toy.prior.sample_stats(&z, &ld, &toy.labels).unwrap();
        let naive = intra_log_density_naive(&toy, &z);
        for ((s, n), d) in stats.iter().zip(&naive).zip(&ld) {
            assert!((s.logp - (n + d)).abs() <= 1e-6);
            assert!(s.neg_entropy <= 0.0);
        }
    }
}

#[test]
fn entropy_within_zero_and_ln_classes() {
    for seed in 0..50 {
        let classes = 2 + (seed as usize % 4);
        let toy = Toy::new(classes, 2, 4, 8, 500 + seed);
        let le = loss_value(&toy, LossKind::E);
        assert!((0.0..=(classes as f64).ln()).contains(&le), "{le}");
    }
}

#[test]
fn full_total_is_hand_sum_bit_exact() {
    let toy = Toy::new(3, 3, 4, 6, 11);
    let mut g = Graph::new();
    let bf = toy.flow.bind(&mut g);
    let bp = toy.prior.bind(&mut g);
    let x = g.constant(toy.x.clone());
    let pos = g.constant(toy.pos.clone());
    let (z, ld) = toy.flow.forward(&mut g, &bf, x, Some(pos)).unwrap();
    let b = toy.prior.prepare(&mut g, &bp, z, ld, &toy.labels).unwrap();
    let l = toy.prior.total_loss(&mut g, &bp, &b, 1.0, 100.0, Stage::Full).unwrap();
    assert_eq!(l.total, ((1.0 * l.l_g + 100.0 * l.l_mi) + l.l_e) + l.l_in);
    let w = toy.prior.total_loss(&mut g, &bp, &b, 1.0, 0.0, Stage::Warmup).unwrap();
    assert_eq!(w.total, w.l_g);
}

#[test]
fn far_centers_stay_finite() {
    for d in [1.0, 10.0, 100.0] {
        for v in far_center_losses::<f32>(d, 1) {
            assert!(v.is_finite(), "f32 distance {d}: {v}");
        }
    }
    for d in [100.0, 1e3, 1e4] {
        for v in far_center_losses::<f64>(d, 1) {
            assert!(v.is_finite(), "f64 distance {d}: {v}");
        }
    }
}

#[test]
fn shifted_logsumexp_at_large_magnitude() {
    let x = Tensor::from_rows(1, 2, vec![-1e4, -1e4 + 1.0]);
    let want = -1e4 + (1.0f64 + 1.0f64.exp()).ln();
    assert!((row_logsumexp(&x)[0] - want).abs() <= 1e-9);
    let x32 = Tensor::<f32>::from_rows(1, 2, vec![1e4, 1e4]);
    assert!(row_logsumexp(&x32)[0].is_finite());
}

#[test]
fn fresh_prior_has_uniform_weights() {
    let p = HierarchicalPrior::<f64>::init(5, 10, 3, 0).unwrap();
    for c in p.class_log_weights() {
        assert!((c + 5f64.ln()).abs() < 1e-15);
    }
}
