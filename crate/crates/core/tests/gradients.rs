use quase::gradcheck::reference::Arr;
use quase::gradcheck::{check_op, composite_suite, model_suite, op_suite, GradReport};
use quase::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: std::ops::Range<u64> = 0..5;

fn assert_below(reports: &[GradReport], tol: f64, seed: u64) {
    for r in reports {
        assert!(
            r.max_rel_error < tol,
            "seed {seed}: {} rel err {:.3e} at {} (tolerance {tol:e})",
            r.name,
            r.max_rel_error,
            r.worst_at
        );
        assert!(r.forward_gap < 1e-5, "seed {seed}: {} forward gap {:.3e}", r.name, r.forward_gap);
        assert!(r.checked > 0, "{} checked nothing", r.name);
    }
}

#[test]
fn every_op_matches_the_f64_oracle() {
    for seed in SEEDS {
        assert_below(&op_suite(seed).unwrap(), 1e-3, seed);
    }
}

#[test]
fn composite_layers() {
    for seed in SEEDS {
        let reports = composite_suite(seed).unwrap();
        let (exact, heads): (Vec<_>, Vec<_>) = reports
            .into_iter()
            .partition(|r| ["transformer_block", "bidaf_attention", "batch_span_loss"].contains(&r.name.as_str()));
        assert_eq!(exact.len(), 3);
        assert_below(&exact, 1e-3, seed);
        assert_below(&heads, 1e-2, seed);
    }
}

#[test]
fn full_models_at_width_eight() {
    for seed in SEEDS {
        let reports = model_suite(seed).unwrap();
        assert_eq!(reports.len(), 6);
        assert_below(&reports, 1e-2, seed);
    }
}

#[test]
fn checker_flags_a_wrong_gradient() {
    // sigmoid's backward compared against tanh's values
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[6], 1.0, &mut rng);
    let r = check_op("wrong", &|x| Ok(x[0].sigmoid()), &|x: &[Arr]| Ok(x[0].tanh()), &[x], 0).unwrap();
    assert!(r.max_rel_error > 0.1, "{r:?}");
    assert!(r.forward_gap > 0.1);
}
