//! The alignment core: cross-modal concept pairs and the training
//! objective. Text concepts are mean-pooled token spans projected into the
//! visual space; visual concepts are retrieved from the frozen dense
//! features by temperature-softmax similarity pooling. The loss couples a
//! CLIP-style symmetric InfoNCE over global representations with a
//! concept-level cross-entropy against a batch-built cosine classifier.

use crate::autodiff::{Tape, Var};
use crate::encoders::TextRepr;
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::tensor::Tensor;
use crate::text::TokenizedCaption;
use crate::transformer::normal_tensor;
use std::collections::HashMap;

/// Maps pooled text concepts into the visual space: c̃ = c·W + b.
/// The weight is stored input-major (d_t × d_v).
#[derive(Clone, Debug)]
pub struct TextToVisionProjection {
    pub weight: Tensor,
    pub bias: Tensor,
    pub use_bias: bool,
}

#[derive(Copy, Clone, Debug)]
pub struct ProjectionVars {
    pub weight: Var,
    pub bias: Var,
    pub use_bias: bool,
}

impl TextToVisionProjection {
    pub fn init(d_t: usize, d_v: usize, use_bias: bool, seed: u64) -> Self {
        let mut rng = derive_rng(seed, 0x70726f6a);
        TextToVisionProjection {
            weight: normal_tensor(&mut rng, vec![d_t, d_v], 0.02),
            bias: Tensor::zeros(vec![d_v]),
            use_bias,
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut weight = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            weight.data_mut()[i * d + i] = 1.0;
        }
        TextToVisionProjection {
            weight,
            bias: Tensor::zeros(vec![d]),
            use_bias: true,
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ProjectionVars {
        ProjectionVars {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable && self.use_bias),
            use_bias: self.use_bias,
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor)) {
        f("proj.w".into(), &self.weight);
        if self.use_bias {
            f("proj.b".into(), &self.bias);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        f("proj.w".into(), &mut self.weight);
        if self.use_bias {
            f("proj.b".into(), &mut self.bias);
        }
    }
}

/// Loss hyperparameters. The logit scale is stored as a log value and
/// clamped so its exponential stays within (0, exp(logit_scale_max)].
#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub lambda: f32,
    pub tau: f32,
    pub logit_scale_init: f32,
    pub logit_scale_max: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.05,
            tau: 0.1,
            logit_scale_init: (1.0f32 / 0.07).ln(),
            logit_scale_max: 100.0f32.ln(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Param(format!("tau must be positive, got {}", self.tau)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Param(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

pub fn clamp_logit_scale(logit_scale: &mut Tensor, max_log: f32) {
    let v = &mut logit_scale.data_mut()[0];
    if *v > max_log {
        *v = max_log;
    }
}

/// Mean of the dense text rows selected by a concept's token-index set.
pub fn text_concept_repr(tape: &mut Tape, z_t: Var, s_l: &[usize]) -> Result<Var> {
    if s_l.is_empty() {
        return Err(Error::Contract(
            "text_concept_repr requires a non-empty token-index set".into(),
        ));
    }
    tape.mean_rows(z_t, s_l)
}

/// Project a single text concept vector into the visual space.
pub fn project_text(tape: &mut Tape, proj: &ProjectionVars, c_t: Var) -> Result<Var> {
    let d_t = tape.value(c_t).numel();
    let row = tape.reshape(c_t, vec![1, d_t])?;
    let projected = project_rows(tape, proj, row)?;
    let d_v = tape.value(projected).shape()[1];
    tape.reshape(projected, vec![d_v])
}

/// Project a matrix of concept rows.
pub fn project_rows(tape: &mut Tape, proj: &ProjectionVars, rows: Var) -> Result<Var> {
    let product = tape.matmul(rows, proj.weight)?;
    if proj.use_bias {
        tape.add_row_broadcast(product, proj.bias)
    } else {
        Ok(product)
    }
}

/// Similarity-pooled visual concept: softmax over patches of
/// (z_v · c̃ / τ), then the convex combination of patch rows.
pub fn pool_visual_concept(tape: &mut Tape, z_v: Var, c_proj: Var, tau: f32) -> Result<Var> {
    let (_, d_v) = tape.value(z_v).dims2()?;
    let query = tape.reshape(c_proj, vec![d_v, 1])?;
    let sims = tape.matmul(z_v, query)?;
    let weights = tape.softmax(sims, 0, tau)?;
    let zt = tape.transpose(z_v)?;
    let pooled = tape.matmul(zt, weights)?;
    tape.reshape(pooled, vec![d_v])
}

/// Symmetric InfoNCE over the batch global representations. Rows of
/// `vision_globals` and `text_globals` must come from the same pairs.
/// Both sides are l2-normalized and scaled by exp(logit_scale).
pub fn global_loss(
    tape: &mut Tape,
    proj: &ProjectionVars,
    text_globals: Var,
    vision_globals: Var,
    logit_scale: Var,
) -> Result<Var> {
    let (b, _) = tape.value(text_globals).dims2()?;
    let (bv, _) = tape.value(vision_globals).dims2()?;
    if b != bv {
        return Err(Error::shape(
            "global_loss",
            tape.value(text_globals).shape(),
            tape.value(vision_globals).shape(),
        ));
    }
    let projected = project_rows(tape, proj, text_globals)?;
    let tn = tape.l2_normalize_rows(projected)?;
    let vn = tape.l2_normalize_rows(vision_globals)?;
    let vt = tape.transpose(vn)?;
    let sims = tape.matmul(tn, vt)?;
    let scale = tape.exp(logit_scale)?;
    let sims = tape.mul_scalar_var(sims, scale)?;
    let targets: Vec<usize> = (0..b).collect();
    let text_to_vision = tape.cross_entropy_from_logits(sims, &targets)?;
    let sims_t = tape.transpose(sims)?;
    let vision_to_text = tape.cross_entropy_from_logits(sims_t, &targets)?;
    let sum = tape.add(text_to_vision, vision_to_text)?;
    tape.scale(sum, 0.5)
}

/// One image-caption pair ready for concept assembly: the frozen dense
/// visual rows and the caption's dense text representation.
pub struct PairRepr<'a> {
    pub vision_dense: Var,
    pub text: TextRepr,
    pub caption: &'a TokenizedCaption,
}

/// Aligned concept rows for one batch. Row order is pair order, then
/// concept order within each caption.
pub struct ConceptBatch {
    /// Raw text concept rows, b̃ × d_t.
    pub c_t: Var,
    /// Projected text concept rows g(C_t), b̃ × d_v.
    pub c_t_proj: Var,
    /// Pooled visual concept rows, b̃ × d_v.
    pub c_v: Var,
    /// Dense class index per row, values in [0, k).
    pub q: Vec<usize>,
    /// Number of unique concepts in the batch.
    pub k: usize,
    /// (pair index, concept bank id) per row.
    pub provenance: Vec<(usize, usize)>,
}

impl ConceptBatch {
    pub fn b_tilde(&self) -> usize {
        self.q.len()
    }
}

/// Build the cross-modal concept batch. Returns `None` when no caption in
/// the batch contributes a concept (the caller then trains on the global
/// objective alone).
pub fn assemble_concept_batch(
    tape: &mut Tape,
    pairs: &[PairRepr<'_>],
    proj: &ProjectionVars,
    tau: f32,
) -> Result<Option<ConceptBatch>> {
    let mut c_t_rows = Vec::new();
    let mut provenance = Vec::new();
    let mut pooled_sources = Vec::new();
    for (pair_index, pair) in pairs.iter().enumerate() {
        for concept in &pair.caption.concepts {
            let c_t = text_concept_repr(tape, pair.text.dense, &concept.token_indices)?;
            c_t_rows.push(c_t);
            provenance.push((pair_index, concept.concept_id));
            pooled_sources.push(pair.vision_dense);
        }
    }
    if c_t_rows.is_empty() {
        return Ok(None);
    }
    let c_t = tape.concat_rows(&c_t_rows)?;
    let c_t_proj = project_rows(tape, proj, c_t)?;
    let mut c_v_rows = Vec::with_capacity(c_t_rows.len());
    for (row, &z_v) in pooled_sources.iter().enumerate() {
        let query_row = tape.gather_rows(c_t_proj, &[row])?;
        let d_v = tape.value(query_row).shape()[1];
        let query = tape.reshape(query_row, vec![d_v])?;
        c_v_rows.push(pool_visual_concept(tape, z_v, query, tau)?);
    }
    let c_v = tape.concat_rows(&c_v_rows)?;

    // Dense re-indexing of bank ids in first-appearance order.
    let mut dense_index: HashMap<usize, usize> = HashMap::new();
    let mut q = Vec::with_capacity(provenance.len());
    for &(_, bank_id) in &provenance {
        let next = dense_index.len();
        let idx = *dense_index.entry(bank_id).or_insert(next);
        q.push(idx);
    }
    let k = dense_index.len();
    Ok(Some(ConceptBatch {
        c_t,
        c_t_proj,
        c_v,
        q,
        k,
        provenance,
    }))
}

/// Classifier weights: row i is the sum of the projected text concepts
/// assigned to class i.
pub fn build_classifier(tape: &mut Tape, batch: &ConceptBatch) -> Result<Var> {
    tape.scatter_add_rows(batch.c_t_proj, &batch.q, batch.k)
}

/// Concept-level consistency: cosine logits of pooled visual concepts
/// against the classifier rows, cross-entropy on each row's class.
pub fn concept_loss(tape: &mut Tape, batch: &ConceptBatch, classifier: Var) -> Result<Var> {
    let cn = tape.l2_normalize_rows(batch.c_v)?;
    let hn = tape.l2_normalize_rows(classifier)?;
    let ht = tape.transpose(hn)?;
    let logits = tape.matmul(cn, ht)?;
    tape.cross_entropy_from_logits(logits, &batch.q)
}

/// Weighted sum of the two objectives. With λ = 0 or no concepts the
/// global loss is returned unchanged, so the concept branch never enters
/// the gradient.
pub fn total_loss(tape: &mut Tape, loss_g: Var, loss_l: Option<Var>, lambda: f32) -> Result<Var> {
    match loss_l {
        Some(l) if lambda > 0.0 => {
            let weighted = tape.scale(l, lambda)?;
            tape.add(loss_g, weighted)
        }
        _ => Ok(loss_g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_rows(tape: &mut Tape, rows: &[&[f32]]) -> Var {
        tape.constant(Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap())
    }

    fn identity_proj(tape: &mut Tape, d: usize) -> ProjectionVars {
        TextToVisionProjection::identity(d).register(tape, false)
    }

    #[test]
    fn concept_repr_single_index_is_row() {
        let mut tape = Tape::new();
        let z = constant_rows(&mut tape, &[&[1., 2.], &[3., 4.], &[5., 6.]]);
        let c = text_concept_repr(&mut tape, z, &[2]).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 6.0]);
        assert!(text_concept_repr(&mut tape, z, &[]).is_err());
    }

    #[test]
    fn concept_repr_matches_loop_mean() {
        let mut tape = Tape::new();
        let data: Vec<Vec<f32>> = (0..6).map(|i| vec![i as f32 * 0.7, 1.0 - i as f32 * 0.3, 0.1]).collect();
        let refs: Vec<&[f32]> = data.iter().map(|r| r.as_slice()).collect();
        let z = constant_rows(&mut tape, &refs);
        let idx = [0usize, 2, 5];
        let c = text_concept_repr(&mut tape, z, &idx).unwrap();
        for j in 0..3 {
            let expect: f32 = idx.iter().map(|&i| data[i][j]).sum::<f32>() / 3.0;
            assert!((tape.value(c).data()[j] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn projection_identity_and_bias() {
        let mut tape = Tape::new();
        let proj = identity_proj(&mut tape, 3);
        let c = tape.constant(Tensor::from_vec(vec![0.5, -1.0, 2.0]));
        let out = project_text(&mut tape, &proj, c).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, -1.0, 2.0]);

        let with_bias = TextToVisionProjection {
            weight: Tensor::zeros(vec![3, 3]),
            bias: Tensor::from_vec(vec![1.0, 2.0, 3.0]),
            use_bias: true,
        };
        let vars = with_bias.register(&mut tape, false);
        let zero = tape.constant(Tensor::from_vec(vec![0.0; 3]));
        let out = project_text(&mut tape, &vars, zero).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn pooling_single_patch_is_that_patch() {
        let mut tape = Tape::new();
        let z_v = constant_rows(&mut tape, &[&[0.3, -0.7, 1.1]]);
        let q = tape.constant(Tensor::from_vec(vec![5.0, 5.0, 5.0]));
        for tau in [1e-3_f32, 1.0, 1e6] {
            let pooled = pool_visual_concept(&mut tape, z_v, q, tau).unwrap();
            let d = tape.value(pooled).data();
            assert!((d[0] - 0.3).abs() < 1e-6 && (d[1] + 0.7).abs() < 1e-6 && (d[2] - 1.1).abs() < 1e-6);
        }
    }

    #[test]
    fn pooling_high_temperature_approaches_mean() {
        let mut tape = Tape::new();
        let z_v = constant_rows(&mut tape, &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[-1.0, 0.5]]);
        let q = tape.constant(Tensor::from_vec(vec![0.9, -0.4]));
        let pooled = pool_visual_concept(&mut tape, z_v, q, 1e6).unwrap();
        let mean = [0.25f32, 0.625];
        for (a, e) in tape.value(pooled).data().iter().zip(mean) {
            assert!((a - e).abs() < 1e-4, "{a} vs {e}");
        }
    }

    #[test]
    fn pooling_sharp_temperature_picks_argmax_patch() {
        let mut tape = Tape::new();
        let z_v = constant_rows(
            &mut tape,
            &[&[0.1, 0.1, 0.0], &[2.0, 1.5, 0.3], &[-0.5, 0.2, 0.1]],
        );
        let q = tape.constant(Tensor::from_vec(vec![1.0, 1.0, 0.0]));
        let pooled = pool_visual_concept(&mut tape, z_v, q, 1e-3).unwrap();
        let got = tape.value(pooled).data();
        let best = [2.0f32, 1.5, 0.3];
        let dot: f32 = got.iter().zip(best).map(|(a, b)| a * b).sum();
        let na: f32 = got.iter().map(|v| v * v).sum::<f32>().sqrt();
        let nb: f32 = best.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!(dot / (na * nb) > 0.999);
    }

    #[test]
    fn global_loss_single_pair_is_zero() {
        let mut tape = Tape::new();
        let proj = identity_proj(&mut tape, 2);
        let t = constant_rows(&mut tape, &[&[0.6, 0.8]]);
        let v = constant_rows(&mut tape, &[&[1.0, 0.0]]);
        let ls = tape.constant(Tensor::scalar(0.0));
        let loss = global_loss(&mut tape, &proj, t, v, ls).unwrap();
        assert!(tape.value(loss).data()[0].abs() < 1e-6);
    }

    #[test]
    fn global_loss_separable_limit_vanishes() {
        let mut tape = Tape::new();
        let proj = identity_proj(&mut tape, 2);
        let t = constant_rows(&mut tape, &[&[1.0, 0.0], &[-1.0, 0.0]]);
        let v = constant_rows(&mut tape, &[&[1.0, 0.0], &[-1.0, 0.0]]);
        // exp(logit_scale) = e^4 ≈ 55: diagonal dominates, loss → 0.
        let ls = tape.constant(Tensor::scalar(4.0));
        let loss = global_loss(&mut tape, &proj, t, v, ls).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-6);
    }

    #[test]
    fn classifier_scatter_cases() {
        let mut tape = Tape::new();
        let rows = constant_rows(&mut tape, &[&[1., 0.], &[0., 1.], &[2., 2.]]);
        // All distinct: h is a copy of the rows.
        let batch = ConceptBatch {
            c_t: rows,
            c_t_proj: rows,
            c_v: rows,
            q: vec![0, 1, 2],
            k: 3,
            provenance: vec![],
        };
        let h = build_classifier(&mut tape, &batch).unwrap();
        assert_eq!(tape.value(h).data(), tape.value(rows).data());
        // Single class: column sums.
        let batch1 = ConceptBatch { q: vec![0, 0, 0], k: 1, ..batch };
        let h1 = build_classifier(&mut tape, &batch1).unwrap();
        assert_eq!(tape.value(h1).data(), &[3.0, 3.0]);
    }

    #[test]
    fn concept_loss_single_class_is_zero() {
        let mut tape = Tape::new();
        let c_v = constant_rows(&mut tape, &[&[0.2, 0.9], &[0.5, 0.1]]);
        let batch = ConceptBatch {
            c_t: c_v,
            c_t_proj: c_v,
            c_v,
            q: vec![0, 0],
            k: 1,
            provenance: vec![],
        };
        let h = build_classifier(&mut tape, &batch).unwrap();
        let loss = concept_loss(&mut tape, &batch, h).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-6);
    }

    #[test]
    fn concept_loss_orthogonal_analytic() {
        let mut tape = Tape::new();
        let c_v = constant_rows(&mut tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let h = constant_rows(&mut tape, &[&[2.0, 0.0], &[0.0, 0.5]]);
        let batch = ConceptBatch {
            c_t: c_v,
            c_t_proj: c_v,
            c_v,
            q: vec![0, 1],
            k: 2,
            provenance: vec![],
        };
        let loss = concept_loss(&mut tape, &batch, h).unwrap();
        let expected = -(1.0f64.exp() / (1.0f64.exp() + 1.0)).ln();
        assert!((tape.value(loss).data()[0] as f64 - expected).abs() < 1e-5);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::new();
        let lg = tape.constant(Tensor::scalar(2.0));
        let ll = tape.constant(Tensor::scalar(10.0));
        let tot = total_loss(&mut tape, lg, Some(ll), 0.05).unwrap();
        assert!((tape.value(tot).data()[0] - 2.5).abs() < 1e-6);
        let tot0 = total_loss(&mut tape, lg, Some(ll), 0.0).unwrap();
        assert_eq!(tot0, lg);
        let tot_none = total_loss(&mut tape, lg, None, 0.5).unwrap();
        assert_eq!(tot_none, lg);
    }
}
