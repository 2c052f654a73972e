//! Randomized gradient checks for every differentiable op.

use rand::Rng;

use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::graph::{Conv2dSpec, Graph, Var};
use crate::rng::{stream_indexed, StreamRng};
use crate::tensor::Tensor;

/// Worst relative error seen for one op over all of its random instances.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

type Case = (Tensor, Box<dyn Fn(&mut Graph, Var) -> Result<Var>>);

/// `Σ y ⊙ r` for a fixed random `r`, so every output component carries a
/// distinct non-trivial weight.
fn project(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
    let r = g.input(r.clone());
    let m = g.mul(y, r)?;
    g.sum(m)
}

fn dim(rng: &mut StreamRng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn away_from_zero(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

fn cases(op: &'static str, rng: &mut StreamRng) -> Vec<Case> {
    let mut out: Vec<Case> = Vec::new();
    match op {
        "matmul" => {
            let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
            let a = Tensor::randn(&[m, k], rng);
            let b = Tensor::randn(&[k, n], rng);
            let r = Tensor::randn(&[m, n], rng);
            let (b2, r2) = (b.clone(), r.clone());
            out.push((
                a.clone(),
                Box::new(move |g, x| {
                    let b = g.input(b2.clone());
                    let y = g.matmul(x, b)?;
                    project(g, y, &r2)
                }),
            ));
            out.push((
                b,
                Box::new(move |g, x| {
                    let a = g.input(a.clone());
                    let y = g.matmul(a, x)?;
                    project(g, y, &r)
                }),
            ));
        }
        "batch_matmul" => {
            let trans_b = rng.random_bool(0.5);
            let (bs, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            let a = Tensor::randn(&[bs, m, k], rng);
            let b = if trans_b {
                Tensor::randn(&[bs, n, k], rng)
            } else {
                Tensor::randn(&[bs, k, n], rng)
            };
            let r = Tensor::randn(&[bs, m, n], rng);
            let (b2, r2) = (b.clone(), r.clone());
            out.push((
                a.clone(),
                Box::new(move |g, x| {
                    let b = g.input(b2.clone());
                    let y = g.batch_matmul(x, b, trans_b)?;
                    project(g, y, &r2)
                }),
            ));
            out.push((
                b,
                Box::new(move |g, x| {
                    let a = g.input(a.clone());
                    let y = g.batch_matmul(a, x, trans_b)?;
                    project(g, y, &r)
                }),
            ));
        }
        "conv2d" => {
            let depthwise = rng.random_bool(0.3);
            let stride = dim(rng, 1, 2);
            let k = if rng.random_bool(0.7) { 3 } else { 1 };
            let spec = if rng.random_bool(0.7) {
                Conv2dSpec::same(k, stride)
            } else {
                Conv2dSpec::valid(stride)
            };
            let (n, cin, h, w) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 3, 6), dim(rng, 3, 6));
            let (cout, spec) = if depthwise {
                (cin, spec.with_groups(cin))
            } else {
                (dim(rng, 1, 3), spec)
            };
            let x = Tensor::randn(&[n, cin, h, w], rng);
            let wt = Tensor::randn(&[cout, cin / spec.groups, k, k], rng);
            let ho = (h + 2 * spec.pad - k) / stride + 1;
            let wo = (w + 2 * spec.pad - k) / stride + 1;
            let r = Tensor::randn(&[n, cout, ho, wo], rng);
            let (w2, r2) = (wt.clone(), r.clone());
            out.push((
                x.clone(),
                Box::new(move |g, v| {
                    let w = g.input(w2.clone());
                    let y = g.conv2d(v, w, spec)?;
                    project(g, y, &r2)
                }),
            ));
            out.push((
                wt,
                Box::new(move |g, v| {
                    let x = g.input(x.clone());
                    let y = g.conv2d(x, v, spec)?;
                    project(g, y, &r)
                }),
            ));
        }
        "add" | "sub" | "mul" => {
            let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
            let a = Tensor::randn(&shape, rng);
            let b = Tensor::randn(&shape, rng);
            let r = Tensor::randn(&shape, rng);
            for (first, other) in [(a.clone(), b.clone()), (b, a)] {
                let r = r.clone();
                out.push((
                    first,
                    Box::new(move |g, x| {
                        let o = g.input(other.clone());
                        let y = match op {
                            "add" => g.add(x, o)?,
                            "sub" => g.sub(o, x)?,
                            _ => g.mul(x, o)?,
                        };
                        project(g, y, &r)
                    }),
                ));
            }
        }
        "add_broadcast" | "mul_broadcast" => {
            let full = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
            let small: Vec<usize> = full.iter().map(|&d| if rng.random_bool(0.5) { 1 } else { d }).collect();
            let a = Tensor::randn(&full, rng);
            let b = Tensor::randn(&small, rng);
            let r = Tensor::randn(&full, rng);
            let (b2, r2) = (b.clone(), r.clone());
            let f = move |g: &mut Graph, x: Var, y: Var| {
                if op == "add_broadcast" {
                    g.add_broadcast(x, y)
                } else {
                    g.mul_broadcast(x, y)
                }
            };
            out.push((
                a.clone(),
                Box::new(move |g, x| {
                    let b = g.input(b2.clone());
                    let y = f(g, x, b)?;
                    project(g, y, &r2)
                }),
            ));
            out.push((
                b,
                Box::new(move |g, x| {
                    let a = g.input(a.clone());
                    let y = f(g, a, x)?;
                    project(g, y, &r)
                }),
            ));
        }
        "scale" | "relu" | "silu" | "softmax" | "mean" | "sum" => {
            let shape = [dim(rng, 1, 3), dim(rng, 2, 5)];
            let x = away_from_zero(Tensor::randn(&shape, rng));
            let r = Tensor::randn(&shape, rng);
            let s: f64 = rng.random_range(-2.0..2.0);
            out.push((
                x,
                Box::new(move |g, x| match op {
                    "scale" => {
                        let y = g.scale(x, s)?;
                        project(g, y, &r)
                    }
                    "relu" => {
                        let y = g.relu(x)?;
                        project(g, y, &r)
                    }
                    "silu" => {
                        let y = g.silu(x)?;
                        project(g, y, &r)
                    }
                    "softmax" => {
                        let y = g.softmax(x)?;
                        project(g, y, &r)
                    }
                    "mean" => {
                        let y = g.mul(x, x)?;
                        g.mean(y)
                    }
                    _ => {
                        let y = g.mul(x, x)?;
                        g.sum(y)
                    }
                }),
            ));
        }
        "layer_norm" => {
            let (rows, d) = (dim(rng, 1, 3), dim(rng, 3, 6));
            let x = Tensor::randn(&[rows, d], rng);
            let gain = Tensor::uniform(&[d], 0.5, 1.5, rng);
            let bias = Tensor::randn(&[d], rng);
            let r = Tensor::randn(&[rows, d], rng);
            for which in 0..3 {
                let (x, gain, bias, r) = (x.clone(), gain.clone(), bias.clone(), r.clone());
                let input = [x.clone(), gain.clone(), bias.clone()][which].clone();
                out.push((
                    input,
                    Box::new(move |g, v| {
                        let mut vars = [None, None, None];
                        vars[which] = Some(v);
                        let xs = vars[0].unwrap_or_else(|| g.input(x.clone()));
                        let gs = vars[1].unwrap_or_else(|| g.input(gain.clone()));
                        let bs = vars[2].unwrap_or_else(|| g.input(bias.clone()));
                        let y = g.layer_norm(xs, gs, bs, 1e-5)?;
                        project(g, y, &r)
                    }),
                ));
            }
        }
        "embedding" => {
            let (v, d, n) = (dim(rng, 2, 5), dim(rng, 1, 4), dim(rng, 1, 6));
            let table = Tensor::randn(&[v, d], rng);
            let ids: Vec<Option<usize>> = (0..n)
                .map(|_| {
                    if rng.random_bool(0.2) {
                        None
                    } else {
                        Some(rng.random_range(0..v))
                    }
                })
                .collect();
            let r = Tensor::randn(&[n, d], rng);
            out.push((
                table,
                Box::new(move |g, t| {
                    let y = g.embedding(t, &ids)?;
                    project(g, y, &r)
                }),
            ));
        }
        "mse_loss" => {
            let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
            let p = Tensor::randn(&shape, rng);
            let t = Tensor::randn(&shape, rng);
            out.push((p, Box::new(move |g, x| g.mse_loss(x, &t))));
        }
        "cross_entropy" => {
            let (n, c) = (dim(rng, 1, 5), dim(rng, 2, 6));
            let logits = Tensor::randn(&[n, c], rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            out.push((logits, Box::new(move |g, x| g.cross_entropy(x, &labels))));
        }
        "reshape" | "permute" => {
            let shape = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
            let x = Tensor::randn(&shape, rng);
            let perm = [2, 0, 1];
            let out_shape = if op == "reshape" {
                vec![shape[0] * shape[1], shape[2]]
            } else {
                perm.iter().map(|&p| shape[p]).collect()
            };
            let r = Tensor::randn(&out_shape, rng);
            out.push((
                x,
                Box::new(move |g, x| {
                    let y = if op == "reshape" {
                        g.reshape(x, &out_shape)?
                    } else {
                        g.permute(x, &perm)?
                    };
                    project(g, y, &r)
                }),
            ));
        }
        "upsample2x" | "global_avg_pool" | "subsample_pad" => {
            let shape = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 2, 5), dim(rng, 2, 5)];
            let x = Tensor::randn(&shape, rng);
            let extra = dim(rng, 0, 2);
            let out_shape = match op {
                "upsample2x" => vec![shape[0], shape[1], 2 * shape[2], 2 * shape[3]],
                "global_avg_pool" => vec![shape[0], shape[1]],
                _ => vec![shape[0], shape[1] + extra, shape[2].div_ceil(2), shape[3].div_ceil(2)],
            };
            let r = Tensor::randn(&out_shape, rng);
            out.push((
                x,
                Box::new(move |g, x| {
                    let y = match op {
                        "upsample2x" => g.upsample2x(x)?,
                        "global_avg_pool" => g.global_avg_pool(x)?,
                        _ => g.subsample_pad(x, shape[1] + extra)?,
                    };
                    project(g, y, &r)
                }),
            ));
        }
        "concat" => {
            let axis = dim(rng, 0, 2);
            let mut sa = vec![dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
            let mut sb = sa.clone();
            sb[axis] = dim(rng, 1, 3);
            let a = Tensor::randn(&sa, rng);
            let b = Tensor::randn(&sb, rng);
            sa[axis] += sb[axis];
            let r = Tensor::randn(&sa, rng);
            let (b2, r2) = (b.clone(), r.clone());
            out.push((
                a.clone(),
                Box::new(move |g, x| {
                    let b = g.input(b2.clone());
                    let y = g.concat(x, b, axis)?;
                    project(g, y, &r2)
                }),
            ));
            out.push((
                b,
                Box::new(move |g, x| {
                    let a = g.input(a.clone());
                    let y = g.concat(a, x, axis)?;
                    project(g, y, &r)
                }),
            ));
        }
        other => panic!("no gradient cases for op `{other}`"),
    }
    out
}

/// Every op with a backward rule.
pub const OPS: &[&str] = &[
    "matmul",
    "batch_matmul",
    "conv2d",
    "add",
    "sub",
    "mul",
    "add_broadcast",
    "mul_broadcast",
    "scale",
    "relu",
    "silu",
    "layer_norm",
    "softmax",
    "embedding",
    "mean",
    "sum",
    "mse_loss",
    "cross_entropy",
    "reshape",
    "permute",
    "upsample2x",
    "concat",
    "global_avg_pool",
    "subsample_pad",
];

/// Run `instances` random gradient checks for every op in [`OPS`].
pub fn op_gradient_suite(instances: usize, seed: u64, h: f64) -> Result<Vec<OpCheck>> {
    let mut report = Vec::new();
    for (oi, &op) in OPS.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = stream_indexed(seed, "gradcheck", &[oi as u64, i as u64]);
            for (input, f) in cases(op, &mut rng) {
                worst = worst.max(grad_check(f, &input, h)?);
            }
        }
        report.push(OpCheck {
            op,
            instances,
            max_rel_err: worst,
        });
    }
    Ok(report)
}

/// Gradient check of a single-head self-attention block (q/k/v/output
/// projections over `tokens × dim`) followed by a mean, with respect to the
/// token matrix.
pub fn attention_block_check(tokens: usize, dim: usize, seed: u64, h: f64) -> Result<f64> {
    let mut rng = stream_indexed(seed, "attention-check", &[tokens as u64, dim as u64]);
    let scale = 1.0 / (dim as f64).sqrt();
    let mk = |rng: &mut StreamRng| {
        let mut t = Tensor::randn(&[dim, dim], rng);
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
        t
    };
    let (wq, wk, wv, wo) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
    let gain = Tensor::uniform(&[dim], 0.5, 1.5, &mut rng);
    let bias = Tensor::randn(&[dim], &mut rng);
    let r = Tensor::randn(&[tokens, dim], &mut rng);
    let x = Tensor::randn(&[tokens, dim], &mut rng);
    grad_check(
        |g, x| {
            let gn = g.input(gain.clone());
            let bn = g.input(bias.clone());
            let h = g.layer_norm(x, gn, bn, 1e-5)?;
            let [q, k, v, o] = [&wq, &wk, &wv, &wo].map(|w| g.input(w.clone()));
            let q = g.matmul(h, q)?;
            let k = g.matmul(h, k)?;
            let v = g.matmul(h, v)?;
            let q = g.reshape(q, &[1, tokens, dim])?;
            let k = g.reshape(k, &[1, tokens, dim])?;
            let v = g.reshape(v, &[1, tokens, dim])?;
            let a = g.attention(q, k, v)?;
            let a = g.reshape(a, &[tokens, dim])?;
            let a = g.matmul(a, o)?;
            let y = g.add(x, a)?;
            let rv = g.input(r.clone());
            let y = g.mul(y, rv)?;
            g.mean(y)
        },
        &x,
        h,
    )
}
