//! Finite-difference checks: every differentiable tape operation against a
//! central-difference oracle recomputed in f64.

use conceptseg::{Tape, Tensor, Var};
use conceptseg_oracle::ops as oref;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;
const INSTANCES: usize = 8;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_data(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Compare tape gradients of a weighted-sum readout against central
/// differences of the equivalent f64 forward.
fn fd_check(
    inputs: &[(Vec<usize>, Vec<f64>)],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
    eval: impl Fn(&[Vec<f64>]) -> Vec<f64>,
    rng: &mut ChaCha8Rng,
    label: &str,
) {
    let raw: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let out_len = eval(&raw).len();
    let weights: Vec<f64> = if out_len == 1 {
        vec![1.0]
    } else {
        (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let readout = |data: &[Vec<f64>]| -> f64 {
        eval(data).iter().zip(&weights).map(|(o, w)| o * w).sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(shape, data)| tape.leaf(Tensor::new(shape.clone(), to_f32(data)).unwrap(), true))
        .collect();
    let out = build(&mut tape, &vars);
    let w = tape.constant(
        Tensor::new(tape.value(out).shape().to_vec(), to_f32(&weights)).unwrap(),
    );
    let weighted = tape.mul(out, w).unwrap();
    let loss = tape.sum_all(weighted).unwrap();
    let grads = tape.backward(loss).unwrap();

    for (vi, (_, data)) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[vi])
            .unwrap_or_else(|| panic!("{label}: missing gradient for input {vi}"));
        for ci in 0..data.len() {
            let mut bumped = raw.clone();
            bumped[vi][ci] = data[ci] + H;
            let plus = readout(&bumped);
            bumped[vi][ci] = data[ci] - H;
            let minus = readout(&bumped);
            let fd = (plus - minus) / (2.0 * H);
            let a = analytic.data()[ci] as f64;
            let err = conceptseg_oracle::rel_err(a, fd, 1e-3);
            assert!(
                err < TOL,
                "{label}: input {vi} coord {ci}: analytic {a} vs fd {fd} (rel {err})"
            );
        }
    }
}

fn dims(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=8)
}

#[test]
fn grad_add_sub_mul() {
    let mut r = rng(10);
    for i in 0..INSTANCES {
        let (m, n) = (dims(&mut r), dims(&mut r));
        let a = (vec![m, n], rand_data(&mut r, m * n));
        let b = (vec![m, n], rand_data(&mut r, m * n));
        let case = i % 3;
        fd_check(
            &[a, b],
            |t, v| match case {
                0 => t.add(v[0], v[1]).unwrap(),
                1 => t.sub(v[0], v[1]).unwrap(),
                _ => t.mul(v[0], v[1]).unwrap(),
            },
            |d| {
                d[0].iter()
                    .zip(&d[1])
                    .map(|(x, y)| match case {
                        0 => x + y,
                        1 => x - y,
                        _ => x * y,
                    })
                    .collect()
            },
            &mut r,
            "add/sub/mul",
        );
    }
}

#[test]
fn grad_scale_exp_gelu_sum() {
    let mut r = rng(11);
    for i in 0..INSTANCES {
        let n = dims(&mut r) * dims(&mut r);
        let c = r.gen_range(-1.5..1.5f64);
        let x = (vec![n], rand_data(&mut r, n));
        let case = i % 3;
        fd_check(
            &[x],
            |t, v| match case {
                0 => t.scale(v[0], c as f32).unwrap(),
                1 => t.exp(v[0]).unwrap(),
                _ => t.gelu(v[0]).unwrap(),
            },
            |d| {
                d[0].iter()
                    .map(|&x| match case {
                        0 => c * x,
                        1 => x.exp(),
                        _ => oref::gelu(x),
                    })
                    .collect()
            },
            &mut r,
            "scale/exp/gelu",
        );
    }
}

#[test]
fn grad_mul_scalar_var() {
    let mut r = rng(12);
    for _ in 0..INSTANCES {
        let n = dims(&mut r);
        let a = (vec![n], rand_data(&mut r, n));
        let s = (vec![1], rand_data(&mut r, 1));
        fd_check(
            &[a, s],
            |t, v| t.mul_scalar_var(v[0], v[1]).unwrap(),
            |d| d[0].iter().map(|x| x * d[1][0]).collect(),
            &mut r,
            "mul_scalar_var",
        );
    }
}

#[test]
fn grad_matmul_transpose() {
    let mut r = rng(13);
    for i in 0..INSTANCES {
        let (m, k, n) = (dims(&mut r), dims(&mut r), dims(&mut r));
        let a = (vec![m, k], rand_data(&mut r, m * k));
        if i % 2 == 0 {
            let b = (vec![k, n], rand_data(&mut r, k * n));
            fd_check(
                &[a, b],
                |t, v| t.matmul(v[0], v[1]).unwrap(),
                |d| oref::matmul(&d[0], &d[1], m, k, n),
                &mut r,
                "matmul",
            );
        } else {
            fd_check(
                &[a],
                |t, v| t.transpose(v[0]).unwrap(),
                |d| oref::transpose(&d[0], m, k),
                &mut r,
                "transpose",
            );
        }
    }
}

#[test]
fn grad_softmax_axes_and_temperatures() {
    let mut r = rng(14);
    for tau in [0.1f64, 1.0, 10.0] {
        for _ in 0..INSTANCES {
            let (m, n) = (dims(&mut r), dims(&mut r));
            let x = (vec![m, n], rand_data(&mut r, m * n));
            let axis = r.gen_range(0..2usize);
            fd_check(
                &[x],
                |t, v| t.softmax(v[0], axis, tau as f32).unwrap(),
                |d| {
                    if axis == 1 {
                        oref::softmax_rows(&d[0], m, n, tau)
                    } else {
                        let t = oref::transpose(&d[0], m, n);
                        oref::transpose(&oref::softmax_rows(&t, n, m, tau), n, m)
                    }
                },
                &mut r,
                "softmax",
            );
        }
    }
}

#[test]
fn grad_l2_normalize_rows() {
    let mut r = rng(15);
    for _ in 0..INSTANCES {
        let (m, n) = (dims(&mut r), dims(&mut r));
        // Keep rows away from the epsilon floor where the op is not smooth.
        let data: Vec<f64> = (0..m * n)
            .map(|_| {
                let v: f64 = r.gen_range(-2.0..2.0);
                v + v.signum() * 0.3
            })
            .collect();
        fd_check(
            &[(vec![m, n], data)],
            |t, v| t.l2_normalize_rows(v[0]).unwrap(),
            |d| oref::l2_normalize_rows(&d[0], m, n, 1e-12),
            &mut r,
            "l2_normalize_rows",
        );
    }
}

#[test]
fn grad_gather_mean_scatter() {
    let mut r = rng(16);
    for i in 0..INSTANCES {
        let (m, n) = (dims(&mut r).max(2), dims(&mut r));
        let x = (vec![m, n], rand_data(&mut r, m * n));
        match i % 3 {
            0 => {
                let idx: Vec<usize> = (0..dims(&mut r)).map(|_| r.gen_range(0..m)).collect();
                let idx2 = idx.clone();
                fd_check(
                    &[x],
                    |t, v| t.gather_rows(v[0], &idx).unwrap(),
                    |d| {
                        let mut out = Vec::new();
                        for &i in &idx2 {
                            out.extend_from_slice(&d[0][i * n..(i + 1) * n]);
                        }
                        out
                    },
                    &mut r,
                    "gather_rows",
                );
            }
            1 => {
                let count = r.gen_range(1..=m);
                let mut idx: Vec<usize> = (0..m).collect();
                for i in (1..m).rev() {
                    idx.swap(i, r.gen_range(0..=i));
                }
                idx.truncate(count);
                let idx2 = idx.clone();
                fd_check(
                    &[x],
                    |t, v| t.mean_rows(v[0], &idx).unwrap(),
                    |d| {
                        let mut out = vec![0.0; n];
                        for &i in &idx2 {
                            for j in 0..n {
                                out[j] += d[0][i * n + j];
                            }
                        }
                        out.iter().map(|v| v / idx2.len() as f64).collect()
                    },
                    &mut r,
                    "mean_rows",
                );
            }
            _ => {
                let k = r.gen_range(1..=m);
                let mut idx: Vec<usize> = (0..m).map(|j| j % k).collect();
                for i in (1..m).rev() {
                    idx.swap(i, r.gen_range(0..=i));
                }
                let idx2 = idx.clone();
                fd_check(
                    &[x],
                    |t, v| t.scatter_add_rows(v[0], &idx, k).unwrap(),
                    |d| {
                        let mut out = vec![0.0; k * n];
                        for (j, &b) in idx2.iter().enumerate() {
                            for c in 0..n {
                                out[b * n + c] += d[0][j * n + c];
                            }
                        }
                        out
                    },
                    &mut r,
                    "scatter_add_rows",
                );
            }
        }
    }
}

#[test]
fn grad_concat_slice_broadcast() {
    let mut r = rng(17);
    for i in 0..INSTANCES {
        let (m, n) = (dims(&mut r), dims(&mut r).max(2));
        match i % 4 {
            0 => {
                let a = (vec![m, n], rand_data(&mut r, m * n));
                let b = (vec![n], rand_data(&mut r, n));
                fd_check(
                    &[a, b],
                    |t, v| t.concat_rows(&[v[0], v[1]]).unwrap(),
                    |d| {
                        let mut out = d[0].clone();
                        out.extend_from_slice(&d[1]);
                        out
                    },
                    &mut r,
                    "concat_rows",
                );
            }
            1 => {
                let a = (vec![m, n], rand_data(&mut r, m * n));
                let b = (vec![m, 3], rand_data(&mut r, m * 3));
                fd_check(
                    &[a, b],
                    |t, v| t.concat_cols(&[v[0], v[1]]).unwrap(),
                    |d| {
                        let mut out = Vec::new();
                        for i in 0..m {
                            out.extend_from_slice(&d[0][i * n..(i + 1) * n]);
                            out.extend_from_slice(&d[1][i * 3..(i + 1) * 3]);
                        }
                        out
                    },
                    &mut r,
                    "concat_cols",
                );
            }
            2 => {
                let a = (vec![m, n], rand_data(&mut r, m * n));
                let from = r.gen_range(0..n - 1);
                let to = r.gen_range(from + 1..=n);
                fd_check(
                    &[a],
                    |t, v| t.slice_cols(v[0], from, to).unwrap(),
                    |d| {
                        let mut out = Vec::new();
                        for i in 0..m {
                            out.extend_from_slice(&d[0][i * n + from..i * n + to]);
                        }
                        out
                    },
                    &mut r,
                    "slice_cols",
                );
            }
            _ => {
                let a = (vec![m, n], rand_data(&mut r, m * n));
                let b = (vec![n], rand_data(&mut r, n));
                fd_check(
                    &[a, b],
                    |t, v| t.add_row_broadcast(v[0], v[1]).unwrap(),
                    |d| {
                        let mut out = d[0].clone();
                        for i in 0..m {
                            for j in 0..n {
                                out[i * n + j] += d[1][j];
                            }
                        }
                        out
                    },
                    &mut r,
                    "add_row_broadcast",
                );
            }
        }
    }
}

#[test]
fn grad_layer_norm() {
    let mut r = rng(18);
    for _ in 0..INSTANCES {
        let (m, n) = (dims(&mut r), dims(&mut r).max(2));
        let x = (vec![m, n], rand_data(&mut r, m * n));
        let gamma = (vec![n], rand_data(&mut r, n));
        let beta = (vec![n], rand_data(&mut r, n));
        fd_check(
            &[x, gamma, beta],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
            |d| oref::layer_norm(&d[0], &d[1], &d[2], m, n, 1e-5),
            &mut r,
            "layer_norm",
        );
    }
}

#[test]
fn grad_cross_entropy() {
    let mut r = rng(19);
    for _ in 0..INSTANCES {
        let (m, n) = (dims(&mut r), dims(&mut r).max(2));
        let logits = (vec![m, n], rand_data(&mut r, m * n));
        let targets: Vec<usize> = (0..m).map(|_| r.gen_range(0..n)).collect();
        let t2 = targets.clone();
        fd_check(
            &[logits],
            |t, v| t.cross_entropy_from_logits(v[0], &targets).unwrap(),
            |d| vec![oref::cross_entropy_from_logits(&d[0], &t2, m, n)],
            &mut r,
            "cross_entropy",
        );
    }
}

#[test]
fn grad_attention_causal_and_full() {
    let mut r = rng(20);
    for i in 0..INSTANCES {
        let n = dims(&mut r);
        let heads = if i % 2 == 0 { 1 } else { 2 };
        let d = heads * 2 * r.gen_range(1..=2usize);
        let causal = i % 3 != 0;
        let q = (vec![n, d], rand_data(&mut r, n * d));
        let k = (vec![n, d], rand_data(&mut r, n * d));
        let v = (vec![n, d], rand_data(&mut r, n * d));
        fd_check(
            &[q, k, v],
            |t, vs| t.attention(vs[0], vs[1], vs[2], heads, causal).unwrap(),
            |dd| oref::attention(&dd[0], &dd[1], &dd[2], n, d, heads, causal),
            &mut r,
            "attention",
        );
    }
}

#[test]
fn grad_causal_mask_softmax() {
    let mut r = rng(21);
    for _ in 0..INSTANCES {
        let n = dims(&mut r);
        let x = (vec![n, n], rand_data(&mut r, n * n));
        fd_check(
            &[x],
            |t, v| {
                let masked = t.causal_mask(v[0]).unwrap();
                t.softmax(masked, 1, 1.0).unwrap()
            },
            |d| {
                let mut out = vec![0.0; n * n];
                for i in 0..n {
                    let mut lane: Vec<f64> = d[0][i * n..i * n + i + 1].to_vec();
                    lane = oref::softmax_lane(&lane, 1.0);
                    out[i * n..i * n + i + 1].copy_from_slice(&lane);
                }
                out
            },
            &mut r,
            "causal_mask+softmax",
        );
    }
}
