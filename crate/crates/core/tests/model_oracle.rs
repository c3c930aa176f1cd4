mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sslchrono::ndgrad::Tensor;
use sslchrono::transformer::{positive_probabilities, predict, HeadKind};

use support::gradcheck::{check_model_gradients, oracle_config, oracle_params, oracle_windows, spread_params, toy_config};
use support::oracle;

fn compare_forward(head_kind: HeadKind, n_heads: usize, seed: u64) -> f64 {
    let mut cfg = toy_config(head_kind);
    cfg.n_heads = n_heads;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = spread_params(cfg.clone(), &mut rng);
    let n = 3 * cfg.seq_len * cfg.n_channels;
    let windows: Tensor<f64> = Tensor::new(&[3, cfg.seq_len, cfg.n_channels], (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
    let expected = oracle::forward(&oracle_config(&cfg), &oracle_params(&params), &oracle_windows(&windows));

    // The engine runs in storage precision here.
    let out = predict(&params.cast::<f32>(), &windows.cast::<f32>()).unwrap();
    let got: Vec<f64> = out.data().iter().map(|&x| x as f64).collect();
    let want: Vec<f64> = expected.outputs.iter().flatten().copied().collect();
    assert_eq!(got.len(), want.len());
    got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

#[test]
fn toy_forward_matches_oracle() {
    for seed in 0..4 {
        for kind in [HeadKind::Regression, HeadKind::Classification] {
            for heads in [1, 2] {
                let gap = compare_forward(kind, heads, seed);
                assert!(gap < 1e-4, "seed {seed} {kind:?} heads {heads}: {gap}");
            }
        }
    }
}

#[test]
fn classification_probabilities_are_distributions() {
    let cfg = toy_config(HeadKind::Classification);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = spread_params(cfg.clone(), &mut rng).cast::<f32>();
    let n = 16 * cfg.seq_len * cfg.n_channels;
    let windows = Tensor::new(&[16, cfg.seq_len, cfg.n_channels], (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
    let logits = predict(&params, &windows).unwrap();
    for (row, p) in logits.data().chunks(2).zip(positive_probabilities(&logits)) {
        let (a, b) = (row[0] as f64, row[1] as f64);
        let q = (a - a.max(b)).exp() / ((a - a.max(b)).exp() + (b - a.max(b)).exp());
        assert!(p >= 0.0 && q >= 0.0);
        assert!((p + q - 1.0).abs() < 1e-6);
    }
}

#[test]
fn model_gradients_match_finite_differences() {
    for kind in [HeadKind::Regression, HeadKind::Classification] {
        let report = check_model_gradients(kind, 17, 4, 100);
        assert_eq!(report.checked, 100);
        assert!(report.forward_gap < 1e-10, "{kind:?} forward gap {}", report.forward_gap);
        assert!(
            report.max_relative_error < 1e-4,
            "{kind:?}: max relative error {} ({} skipped)",
            report.max_relative_error,
            report.skipped
        );
    }
}
