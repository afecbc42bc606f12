//! Elementary f64 reference operations: matmul, softmax, normalization,
//! layer norm, GELU, cross-entropy, attention, and the batch losses.

/// Triple-loop matrix product: a is m×k, b is k×n, result m×n.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Softmax of a single lane with temperature and max-subtraction.
pub fn softmax_lane(x: &[f64], temperature: f64) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| ((v - m) / temperature).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
}

/// Row-wise softmax of an m×n matrix.
pub fn softmax_rows(x: &[f64], m: usize, n: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = softmax_lane(&x[i * n..(i + 1) * n], temperature);
        out[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    out
}

pub fn l2_normalize_rows(x: &[f64], m: usize, n: usize, eps: f64) -> Vec<f64> {
    let mut out = x.to_vec();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    out
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], m: usize, n: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..n {
            out[i * n + j] = (row[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    out
}

/// tanh-approximation GELU, matching the implementation under test.
pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Mean negative log-softmax of target entries, probabilities clamped at 1e-12.
pub fn cross_entropy_from_logits(logits: &[f64], targets: &[usize], m: usize, n: usize) -> f64 {
    assert_eq!(targets.len(), m);
    let p = softmax_rows(logits, m, n, 1.0);
    let mut acc = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        acc -= p[i * n + t].max(1e-12).ln();
    }
    acc / m as f64
}

/// Multi-head scaled-dot-product attention over one sequence, optional causal mask.
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    dim: usize,
    heads: usize,
    causal: bool,
) -> Vec<f64> {
    assert_eq!(dim % heads, 0);
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; n * dim];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..n {
            let mut scores = vec![f64::NEG_INFINITY; n];
            let limit = if causal { i + 1 } else { n };
            for j in 0..limit {
                let mut s = 0.0;
                for d in 0..hd {
                    s += q[i * dim + off + d] * k[j * dim + off + d];
                }
                scores[j] = s * scale;
            }
            // Softmax over the visible prefix; -inf entries contribute zero.
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for x in w.iter_mut() {
                *x /= z;
            }
            for j in 0..limit {
                for d in 0..hd {
                    out[i * dim + off + d] += w[j] * v[j * dim + off + d];
                }
            }
        }
    }
    out
}

/// Symmetric InfoNCE over a b×b similarity matrix: mean of the row-wise and
/// column-wise cross-entropies of the diagonal.
pub fn symmetric_infonce(sim: &[f64], b: usize) -> f64 {
    let targets: Vec<usize> = (0..b).collect();
    let row = cross_entropy_from_logits(sim, &targets, b, b);
    let col = cross_entropy_from_logits(&transpose(sim, b, b), &targets, b, b);
    0.5 * (row + col)
}

/// Concept-level loss: row-normalize both matrices, softmax over the k class
/// rows, mean negative log-probability of each row's own class.
pub fn concept_loss(c_v: &[f64], h: &[f64], q: &[usize], b_tilde: usize, k: usize, d: usize) -> f64 {
    let cn = l2_normalize_rows(c_v, b_tilde, d, 1e-12);
    let hn = l2_normalize_rows(h, k, d, 1e-12);
    let logits = matmul(&cn, &transpose(&hn, k, d), b_tilde, d, k);
    cross_entropy_from_logits(&logits, q, b_tilde, k)
}

/// Classifier-weight scatter in f32, matching the summation order of the
/// implementation (ascending row index), for bit-exact comparison.
pub fn scatter_add_rows_f32(x: &[f32], q: &[usize], b_tilde: usize, k: usize, d: usize) -> Vec<f32> {
    let mut h = vec![0.0f32; k * d];
    for i in 0..k {
        for j in 0..b_tilde {
            if q[j] == i {
                for c in 0..d {
                    h[i * d + c] += x[j * d + c];
                }
            }
        }
    }
    h
}
