//! Finite-difference gradient check of the full model against the
//! straight-line oracle.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sslchrono::ndgrad::{Mode, Tape, Tensor};
use sslchrono::transformer::{forward, HeadKind, ModelConfig, ModelParams, Trainable};

use super::oracle::{self, OracleConfig, OracleParams};

pub const STEP: f64 = 1e-3;

pub struct GradCheck {
    pub max_relative_error: f64,
    /// Largest gap between the engine loss and the oracle loss.
    pub forward_gap: f64,
    pub checked: usize,
    pub skipped: usize,
}

pub fn toy_config(head_kind: HeadKind) -> ModelConfig {
    ModelConfig {
        n_blocks: 2,
        d_model: 8,
        n_heads: 1,
        seq_len: 10,
        n_channels: 6,
        dropout_p: 0.1,
        head_kind,
        residual: true,
    }
}

pub fn oracle_config(cfg: &ModelConfig) -> OracleConfig {
    OracleConfig {
        n_blocks: cfg.n_blocks,
        d_model: cfg.d_model,
        n_heads: cfg.n_heads,
        seq_len: cfg.seq_len,
        n_channels: cfg.n_channels,
        residual: cfg.residual,
        outputs: cfg.head_kind.outputs(),
    }
}

pub fn oracle_params(params: &ModelParams<f64>) -> OracleParams {
    params
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.tensor.data().to_vec()))
        .collect()
}

pub fn oracle_windows(windows: &Tensor<f64>) -> Vec<Vec<Vec<f64>>> {
    let s = windows.shape();
    windows
        .data()
        .chunks(s[1] * s[2])
        .map(|w| w.chunks(s[2]).map(|r| r.to_vec()).collect())
        .collect()
}

/// Toy parameters spread well beyond the init scale so every path carries
/// gradient signal.
pub fn spread_params(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> ModelParams<f64> {
    let mut params = ModelParams::init(cfg, rng).unwrap().cast::<f64>();
    for p in params.params_mut() {
        for x in p.tensor.data_mut() {
            *x += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    params
}

enum Targets {
    Values(Vec<f64>),
    Labels(Vec<u8>),
}

fn oracle_loss(cfg: &OracleConfig, p: &OracleParams, windows: &[Vec<Vec<f64>>], targets: &Targets) -> (f64, Vec<bool>) {
    let out = oracle::forward(cfg, p, windows);
    let loss = match targets {
        Targets::Values(t) => oracle::mse(&out.outputs, t),
        Targets::Labels(l) => oracle::cross_entropy(&out.outputs, l),
    };
    (loss, out.relu_signs)
}

/// Compares analytic gradients of the loss for `head_kind` against central
/// differences on `samples` randomly chosen scalar parameters.
pub fn check_model_gradients(head_kind: HeadKind, seed: u64, batch: usize, samples: usize) -> GradCheck {
    let cfg = toy_config(head_kind);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = spread_params(cfg.clone(), &mut rng);
    let n = batch * cfg.seq_len * cfg.n_channels;
    let windows = Tensor::new(
        &[batch, cfg.seq_len, cfg.n_channels],
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap();
    let targets = match head_kind {
        HeadKind::Regression => Targets::Values((0..batch).map(|_| rng.sample(StandardNormal)).collect()),
        HeadKind::Classification => Targets::Labels((0..batch).map(|i| (i % 2) as u8).collect()),
    };

    let mut tape = Tape::<f64>::new();
    let bound = params.bind(&mut tape, Trainable::All).unwrap();
    let input = tape.constant(windows.clone()).unwrap();
    let out = forward(&mut tape, &bound, &cfg, input, Mode::Eval, &mut rng).unwrap();
    let loss = match &targets {
        Targets::Values(t) => tape.mse_loss(out, &Tensor::new(&[batch], t.clone()).unwrap()).unwrap(),
        Targets::Labels(l) => tape.cross_entropy_loss(out, l).unwrap(),
    };
    let engine_loss = tape.value(loss).data()[0];
    tape.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> = bound.vars().iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let ocfg = oracle_config(&cfg);
    let owin = oracle_windows(&windows);
    let mut op = oracle_params(&params);
    let (base_loss, base_signs) = oracle_loss(&ocfg, &op, &owin, &targets);

    let names: Vec<String> = params.params().iter().map(|p| p.name.clone()).collect();
    let offsets: Vec<usize> = params
        .params()
        .iter()
        .scan(0, |acc, p| {
            let start = *acc;
            *acc += p.tensor.numel();
            Some(start)
        })
        .collect();
    let total = params.num_scalars();

    let mut report = GradCheck {
        max_relative_error: 0.0,
        forward_gap: (engine_loss - base_loss).abs(),
        checked: 0,
        skipped: 0,
    };
    for flat in sample(&mut rng, total, total) {
        if report.checked == samples {
            break;
        }
        let which = offsets.partition_point(|&o| o <= flat) - 1;
        let idx = flat - offsets[which];
        let name = &names[which];
        let original = op[name][idx];
        op.get_mut(name).unwrap()[idx] = original + STEP;
        let (plus, plus_signs) = oracle_loss(&ocfg, &op, &owin, &targets);
        op.get_mut(name).unwrap()[idx] = original - STEP;
        let (minus, minus_signs) = oracle_loss(&ocfg, &op, &owin, &targets);
        op.get_mut(name).unwrap()[idx] = original;
        if plus_signs != base_signs || minus_signs != base_signs {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * STEP);
        let err = oracle::relative_error(grads[which][idx], numeric);
        report.max_relative_error = report.max_relative_error.max(err);
        report.checked += 1;
    }
    report
}
