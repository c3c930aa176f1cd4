//! Straight-line double-precision reimplementation of the model forward pass
//! and losses, written with plain loops and no shared code with the engine.
//! Used as an independent oracle for forward values and finite differences.

#![allow(dead_code)]

use std::collections::HashMap;

pub struct OracleConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub n_channels: usize,
    pub residual: bool,
    pub outputs: usize,
}

/// Parameters by name as flat row-major `f64` buffers.
pub type OracleParams = HashMap<String, Vec<f64>>;

pub struct OracleOutput {
    /// `[batch, outputs]` head outputs.
    pub outputs: Vec<Vec<f64>>,
    /// Sign of every relu input, in evaluation order.
    pub relu_signs: Vec<bool>,
}

fn dense(x: &[Vec<f64>], w: &[f64], b: &[f64], out_dim: usize) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..out_dim)
                .map(|j| {
                    let mut acc = b[j];
                    for (i, &xi) in row.iter().enumerate() {
                        acc += xi * w[i * out_dim + j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn layer_norm(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = (var + eps).sqrt();
    row.iter()
        .enumerate()
        .map(|(i, x)| gamma[i] * (x - mean) / sd + beta[i])
        .collect()
}

/// Causal attention for one sequence and one head.
fn attend(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dk = q[0].len() as f64;
    let t = q.len();
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let scores: Vec<f64> = (0..=i)
            .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut row = vec![0.0; v[0].len()];
        for j in 0..=i {
            for (r, vv) in row.iter_mut().zip(&v[j]) {
                *r += exps[j] / total * vv;
            }
        }
        out.push(row);
    }
    out
}

/// Evaluation-mode forward for `windows[b][t][c]`.
pub fn forward(cfg: &OracleConfig, p: &OracleParams, windows: &[Vec<Vec<f64>>]) -> OracleOutput {
    let d = cfg.d_model;
    let hd = d / cfg.n_heads;
    let mut relu_signs = Vec::new();
    let mut outputs = Vec::new();
    for window in windows {
        let mut x = dense(window, &p["input_projection.weight"], &p["input_projection.bias"], d);
        let pos = &p["position_embeddings"];
        for (t, row) in x.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += pos[t * d + j];
            }
        }
        for b in 0..cfg.n_blocks {
            let name = |s: &str| format!("blocks.{b}.attention.{s}");
            let q = dense(&x, &p[&name("query.weight")], &p[&name("query.bias")], d);
            let k = dense(&x, &p[&name("key.weight")], &p[&name("key.bias")], d);
            let v = dense(&x, &p[&name("value.weight")], &p[&name("value.bias")], d);
            let mut ctx = vec![vec![0.0; d]; x.len()];
            for h in 0..cfg.n_heads {
                let slice = |m: &[Vec<f64>]| -> Vec<Vec<f64>> {
                    m.iter().map(|r| r[h * hd..(h + 1) * hd].to_vec()).collect()
                };
                let att = attend(&slice(&q), &slice(&k), &slice(&v));
                for (t, row) in att.iter().enumerate() {
                    ctx[t][h * hd..(h + 1) * hd].copy_from_slice(row);
                }
            }
            let o = dense(&ctx, &p[&name("output.weight")], &p[&name("output.bias")], d);
            let gamma = &p[&format!("blocks.{b}.norm.gamma")];
            let beta = &p[&format!("blocks.{b}.norm.beta")];
            x = x
                .iter()
                .zip(&o)
                .map(|(xr, or)| {
                    let pre: Vec<f64> = xr
                        .iter()
                        .zip(or)
                        .map(|(a, b)| if cfg.residual { a + b } else { *b })
                        .collect();
                    relu_signs.extend(pre.iter().map(|&v| v > 0.0));
                    let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
                    layer_norm(&act, gamma, beta, 1e-5)
                })
                .collect();
        }
        let last = x.last().unwrap().clone();
        let out = dense(&[last], &p["head.weight"], &p["head.bias"], cfg.outputs);
        outputs.push(out.into_iter().next().unwrap());
    }
    OracleOutput { outputs, relu_signs }
}

pub fn mse(outputs: &[Vec<f64>], targets: &[f64]) -> f64 {
    outputs
        .iter()
        .zip(targets)
        .map(|(o, t)| (o[0] - t) * (o[0] - t))
        .sum::<f64>()
        / targets.len() as f64
}

pub fn cross_entropy(outputs: &[Vec<f64>], labels: &[u8]) -> f64 {
    outputs
        .iter()
        .zip(labels)
        .map(|(o, &l)| {
            let z = o[0].exp() + o[1].exp();
            -(o[l as usize].exp() / z).ln()
        })
        .sum::<f64>()
        / labels.len() as f64
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

/// `|a - b| / max(|a|, |b|, 1e-3)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}
