//! Full f64 re-implementation of the model forward pass and training
//! objective, used to finite-difference the analytic gradients.
//!
//! Parameters are plain `Vec<f64>` fields so tests can perturb single
//! coordinates directly.

use crate::ops;

#[derive(Clone)]
pub struct BlockParams {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Clone)]
pub struct TextModel {
    pub vocab: usize,
    pub context: usize,
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;

fn linear(x: &[f64], w: &[f64], b: &[f64], m: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut out = ops::matmul(x, w, m, d_in, d_out);
    for i in 0..m {
        for j in 0..d_out {
            out[i * d_out + j] += b[j];
        }
    }
    out
}

impl TextModel {
    /// Dense representation: n×dim rows after the final layer norm.
    pub fn encode(&self, tokens: &[usize]) -> Vec<f64> {
        let n = tokens.len();
        let d = self.dim;
        let mut x = vec![0.0; n * d];
        for (i, &t) in tokens.iter().enumerate() {
            for j in 0..d {
                x[i * d + j] = self.tok_emb[t * d + j] + self.pos_emb[i * d + j];
            }
        }
        for blk in &self.blocks {
            let h = ops::layer_norm(&x, &blk.ln1_g, &blk.ln1_b, n, d, LN_EPS);
            let q = linear(&h, &blk.wq, &blk.bq, n, d, d);
            let k = linear(&h, &blk.wk, &blk.bk, n, d, d);
            let v = linear(&h, &blk.wv, &blk.bv, n, d, d);
            let a = ops::attention(&q, &k, &v, n, d, self.heads, true);
            let o = linear(&a, &blk.wo, &blk.bo, n, d, d);
            for i in 0..n * d {
                x[i] += o[i];
            }
            let h2 = ops::layer_norm(&x, &blk.ln2_g, &blk.ln2_b, n, d, LN_EPS);
            let mut m1 = linear(&h2, &blk.w1, &blk.b1, n, d, self.hidden);
            for v in m1.iter_mut() {
                *v = ops::gelu(*v);
            }
            let m2 = linear(&m1, &blk.w2, &blk.b2, n, self.hidden, d);
            for i in 0..n * d {
                x[i] += m2[i];
            }
        }
        ops::layer_norm(&x, &self.lnf_g, &self.lnf_b, n, d, LN_EPS)
    }
}

/// One caption in the micro-batch: token ids, the index of the global
/// ([EOS]) row, and the token-index set of each concept.
#[derive(Clone)]
pub struct CaptionSpec {
    pub tokens: Vec<usize>,
    pub eos: usize,
    pub concept_spans: Vec<Vec<usize>>,
}

/// Everything the total objective depends on besides the text model.
#[derive(Clone)]
pub struct PipelineSpec {
    pub captions: Vec<CaptionSpec>,
    /// Per pair: frozen dense visual rows, n_v×d_v.
    pub vision_dense: Vec<Vec<f64>>,
    /// Per pair: frozen global visual vector, d_v.
    pub vision_global: Vec<Vec<f64>>,
    pub n_v: usize,
    pub d_v: usize,
    /// Dense concept class ids, one per concept in caption order.
    pub q: Vec<usize>,
    pub k: usize,
    pub lambda: f64,
    pub tau: f64,
}

/// Text-to-vision projection: weight stored d_t×d_v (row-major, applied as
/// x·W + b), plus the log-scale applied to the global similarities.
#[derive(Clone)]
pub struct ProjParams {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub logit_scale: f64,
}

/// Total objective on a micro-batch, recomputed from scratch in f64.
pub fn total_loss(model: &TextModel, proj: &ProjParams, spec: &PipelineSpec) -> f64 {
    let d_t = model.dim;
    let d_v = spec.d_v;
    let b = spec.captions.len();

    let mut text_globals = vec![0.0; b * d_t];
    let mut concept_t: Vec<Vec<f64>> = Vec::new();
    let mut concept_v: Vec<Vec<f64>> = Vec::new();

    for (pair, cap) in spec.captions.iter().enumerate() {
        let dense = model.encode(&cap.tokens);
        text_globals[pair * d_t..(pair + 1) * d_t]
            .copy_from_slice(&dense[cap.eos * d_t..(cap.eos + 1) * d_t]);
        for span in &cap.concept_spans {
            let mut c_t = vec![0.0; d_t];
            for &i in span {
                for j in 0..d_t {
                    c_t[j] += dense[i * d_t + j];
                }
            }
            for v in c_t.iter_mut() {
                *v /= span.len() as f64;
            }
            let c_proj = linear(&c_t, &proj.w, &proj.b, 1, d_t, d_v);
            let zv = &spec.vision_dense[pair];
            let mut sims = vec![0.0; spec.n_v];
            for p in 0..spec.n_v {
                let mut s = 0.0;
                for j in 0..d_v {
                    s += zv[p * d_v + j] * c_proj[j];
                }
                sims[p] = s;
            }
            let w = ops::softmax_lane(&sims, spec.tau);
            let mut c_v = vec![0.0; d_v];
            for p in 0..spec.n_v {
                for j in 0..d_v {
                    c_v[j] += zv[p * d_v + j] * w[p];
                }
            }
            concept_t.push(c_t);
            concept_v.push(c_v);
        }
    }

    // Global consistency: normalized similarities scaled by exp(logit_scale).
    let proj_globals = linear(&text_globals, &proj.w, &proj.b, b, d_t, d_v);
    let tn = ops::l2_normalize_rows(&proj_globals, b, d_v, 1e-12);
    let mut vg = vec![0.0; b * d_v];
    for i in 0..b {
        vg[i * d_v..(i + 1) * d_v].copy_from_slice(&spec.vision_global[i]);
    }
    let vn = ops::l2_normalize_rows(&vg, b, d_v, 1e-12);
    let mut sim = ops::matmul(&tn, &ops::transpose(&vn, b, d_v), b, d_v, b);
    let scale = proj.logit_scale.exp();
    for v in sim.iter_mut() {
        *v *= scale;
    }
    let loss_g = ops::symmetric_infonce(&sim, b);

    let b_tilde = concept_t.len();
    if b_tilde == 0 || spec.lambda == 0.0 {
        return loss_g;
    }

    // Concept-level consistency.
    let mut proj_rows = vec![0.0; b_tilde * d_v];
    for (i, c_t) in concept_t.iter().enumerate() {
        let r = linear(c_t, &proj.w, &proj.b, 1, d_t, d_v);
        proj_rows[i * d_v..(i + 1) * d_v].copy_from_slice(&r);
    }
    let mut h = vec![0.0; spec.k * d_v];
    for j in 0..b_tilde {
        for c in 0..d_v {
            h[spec.q[j] * d_v + c] += proj_rows[j * d_v + c];
        }
    }
    let mut cv = vec![0.0; b_tilde * d_v];
    for (i, c_v) in concept_v.iter().enumerate() {
        cv[i * d_v..(i + 1) * d_v].copy_from_slice(c_v);
    }
    let loss_l = ops::concept_loss(&cv, &h, &spec.q, b_tilde, spec.k, d_v);

    loss_g + spec.lambda * loss_l
}
