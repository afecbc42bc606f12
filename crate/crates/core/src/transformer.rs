//! Pre-LN transformer blocks shared by the trainable text encoder and the
//! frozen tiny ViT.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::rng::sample_normal;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f32 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Copy, Clone, Debug)]
pub struct BlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f32> = (0..numel).map(|_| (sample_normal(rng) * std) as f32).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl BlockParams {
    /// Weights ~ N(0, 0.02), zero biases, identity layer norms.
    pub fn init(rng: &mut ChaCha8Rng, dim: usize, hidden: usize) -> Self {
        BlockParams {
            ln1_g: Tensor::new(vec![dim], vec![1.0; dim]).unwrap(),
            ln1_b: Tensor::zeros(vec![dim]),
            wq: normal_tensor(rng, vec![dim, dim], INIT_STD),
            bq: Tensor::zeros(vec![dim]),
            wk: normal_tensor(rng, vec![dim, dim], INIT_STD),
            bk: Tensor::zeros(vec![dim]),
            wv: normal_tensor(rng, vec![dim, dim], INIT_STD),
            bv: Tensor::zeros(vec![dim]),
            wo: normal_tensor(rng, vec![dim, dim], INIT_STD),
            bo: Tensor::zeros(vec![dim]),
            ln2_g: Tensor::new(vec![dim], vec![1.0; dim]).unwrap(),
            ln2_b: Tensor::zeros(vec![dim]),
            w1: normal_tensor(rng, vec![dim, hidden], INIT_STD),
            b1: Tensor::zeros(vec![hidden]),
            w2: normal_tensor(rng, vec![hidden, dim], INIT_STD),
            b2: Tensor::zeros(vec![dim]),
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> BlockVars {
        BlockVars {
            ln1_g: tape.leaf(self.ln1_g.clone(), trainable),
            ln1_b: tape.leaf(self.ln1_b.clone(), trainable),
            wq: tape.leaf(self.wq.clone(), trainable),
            bq: tape.leaf(self.bq.clone(), trainable),
            wk: tape.leaf(self.wk.clone(), trainable),
            bk: tape.leaf(self.bk.clone(), trainable),
            wv: tape.leaf(self.wv.clone(), trainable),
            bv: tape.leaf(self.bv.clone(), trainable),
            wo: tape.leaf(self.wo.clone(), trainable),
            bo: tape.leaf(self.bo.clone(), trainable),
            ln2_g: tape.leaf(self.ln2_g.clone(), trainable),
            ln2_b: tape.leaf(self.ln2_b.clone(), trainable),
            w1: tape.leaf(self.w1.clone(), trainable),
            b1: tape.leaf(self.b1.clone(), trainable),
            w2: tape.leaf(self.w2.clone(), trainable),
            b2: tape.leaf(self.b2.clone(), trainable),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor)) {
        for (name, t) in self.named() {
            f(format!("{prefix}.{name}"), t);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        let fields: [(&str, &mut Tensor); 16] = [
            ("ln1.g", &mut self.ln1_g),
            ("ln1.b", &mut self.ln1_b),
            ("attn.wq", &mut self.wq),
            ("attn.bq", &mut self.bq),
            ("attn.wk", &mut self.wk),
            ("attn.bk", &mut self.bk),
            ("attn.wv", &mut self.wv),
            ("attn.bv", &mut self.bv),
            ("attn.wo", &mut self.wo),
            ("attn.bo", &mut self.bo),
            ("ln2.g", &mut self.ln2_g),
            ("ln2.b", &mut self.ln2_b),
            ("mlp.w1", &mut self.w1),
            ("mlp.b1", &mut self.b1),
            ("mlp.w2", &mut self.w2),
            ("mlp.b2", &mut self.b2),
        ];
        for (name, t) in fields {
            f(format!("{prefix}.{name}"), t);
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1.g", &self.ln1_g),
            ("ln1.b", &self.ln1_b),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln2.g", &self.ln2_g),
            ("ln2.b", &self.ln2_b),
            ("mlp.w1", &self.w1),
            ("mlp.b1", &self.b1),
            ("mlp.w2", &self.w2),
            ("mlp.b2", &self.b2),
        ]
    }

    /// Vars of this block in `visit` order, for gradient collection.
    pub fn var_list(vars: &BlockVars) -> [Var; 16] {
        [
            vars.ln1_g, vars.ln1_b, vars.wq, vars.bq, vars.wk, vars.bk, vars.wv, vars.bv,
            vars.wo, vars.bo, vars.ln2_g, vars.ln2_b, vars.w1, vars.b1, vars.w2, vars.b2,
        ]
    }
}

/// x + attn(LN1(x)), then + mlp(LN2(x)).
pub fn forward_block(
    tape: &mut Tape,
    vars: &BlockVars,
    x: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let h = tape.layer_norm(x, vars.ln1_g, vars.ln1_b, LN_EPS)?;
    let q = tape.linear(h, vars.wq, vars.bq)?;
    let k = tape.linear(h, vars.wk, vars.bk)?;
    let v = tape.linear(h, vars.wv, vars.bv)?;
    let attn = tape.attention(q, k, v, heads, causal)?;
    let proj = tape.linear(attn, vars.wo, vars.bo)?;
    let x = tape.add(x, proj)?;
    let h2 = tape.layer_norm(x, vars.ln2_g, vars.ln2_b, LN_EPS)?;
    let m1 = tape.linear(h2, vars.w1, vars.b1)?;
    let act = tape.gelu(m1)?;
    let m2 = tape.linear(act, vars.w2, vars.b2)?;
    tape.add(x, m2)
}
