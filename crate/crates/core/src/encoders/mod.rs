//! Modality encoders: the trainable causal text transformer and the frozen
//! vision feature providers.

pub mod vision;

pub use vision::{
    handcrafted_features, HandcraftedFeaturizer, PrecomputedFeatures, TinyVit, TinyVitConfig,
    VisionProvider, VisionRepr,
};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::tensor::Tensor;
use crate::text::TokenizedCaption;
use crate::transformer::{forward_block, normal_tensor, BlockParams, BlockVars, LN_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextEncoderConfig {
    pub vocab: usize,
    pub context: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
}

impl TextEncoderConfig {
    pub fn hidden(&self) -> usize {
        4 * self.dim
    }

    pub fn desk(vocab: usize) -> Self {
        TextEncoderConfig {
            vocab,
            context: 64,
            dim: 32,
            heads: 4,
            layers: 2,
        }
    }
}

/// CLIP-style causal text transformer at configurable scale: token and
/// learned positional embeddings, pre-LN blocks, final layer norm. The
/// global representation is the dense row at the [EOS] position.
#[derive(Clone, Debug)]
pub struct TextEncoderParams {
    pub config: TextEncoderConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
}

#[derive(Clone, Debug)]
pub struct TextEncoderVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BlockVars>,
    pub lnf_g: Var,
    pub lnf_b: Var,
}

/// Dense and global text representations on the tape.
#[derive(Clone, Copy, Debug)]
pub struct TextRepr {
    pub dense: Var,
    pub global: Var,
    pub eos_index: usize,
}

impl TextEncoderParams {
    pub fn init(config: TextEncoderConfig, seed: u64) -> Self {
        let mut rng = derive_rng(seed, 0x7465_7874);
        TextEncoderParams {
            config,
            tok_emb: normal_tensor(&mut rng, vec![config.vocab, config.dim], 0.02),
            pos_emb: normal_tensor(&mut rng, vec![config.context, config.dim], 0.02),
            blocks: (0..config.layers)
                .map(|_| BlockParams::init(&mut rng, config.dim, config.hidden()))
                .collect(),
            lnf_g: Tensor::new(vec![config.dim], vec![1.0; config.dim]).unwrap(),
            lnf_b: Tensor::zeros(vec![config.dim]),
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> TextEncoderVars {
        TextEncoderVars {
            tok_emb: tape.leaf(self.tok_emb.clone(), trainable),
            pos_emb: tape.leaf(self.pos_emb.clone(), trainable),
            blocks: self.blocks.iter().map(|b| b.register(tape, trainable)).collect(),
            lnf_g: tape.leaf(self.lnf_g.clone(), trainable),
            lnf_b: tape.leaf(self.lnf_b.clone(), trainable),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor)) {
        f("text.tok_emb".into(), &self.tok_emb);
        f("text.pos_emb".into(), &self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("text.block{i}"), f);
        }
        f("text.lnf.g".into(), &self.lnf_g);
        f("text.lnf.b".into(), &self.lnf_b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        f("text.tok_emb".into(), &mut self.tok_emb);
        f("text.pos_emb".into(), &mut self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("text.block{i}"), f);
        }
        f("text.lnf.g".into(), &mut self.lnf_g);
        f("text.lnf.b".into(), &mut self.lnf_b);
    }

    /// Vars in `visit` order.
    pub fn var_list(vars: &TextEncoderVars) -> Vec<Var> {
        let mut out = vec![vars.tok_emb, vars.pos_emb];
        for b in &vars.blocks {
            out.extend(BlockParams::var_list(b));
        }
        out.push(vars.lnf_g);
        out.push(vars.lnf_b);
        out
    }
}

/// Run the text encoder over a tokenized caption already registered on the
/// tape via `vars`. The caption must fit the context (truncate first).
pub fn encode_text(
    tape: &mut Tape,
    config: &TextEncoderConfig,
    vars: &TextEncoderVars,
    caption: &TokenizedCaption,
) -> Result<TextRepr> {
    let n = caption.len();
    if n == 0 {
        return Err(Error::Contract("cannot encode an empty caption".into()));
    }
    if n > config.context {
        return Err(Error::Contract(format!(
            "caption length {n} exceeds context {}; truncate first",
            config.context
        )));
    }
    let ids: Vec<usize> = caption.token_ids.iter().map(|&t| t as usize).collect();
    if let Some(&bad) = ids.iter().find(|&&t| t >= config.vocab) {
        return Err(Error::Contract(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab
        )));
    }
    let tok = tape.embedding_lookup(vars.tok_emb, &ids)?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = tape.gather_rows(vars.pos_emb, &positions)?;
    let mut x = tape.add(tok, pos)?;
    for block in &vars.blocks {
        x = forward_block(tape, block, x, config.heads, true)?;
    }
    let dense = tape.layer_norm(x, vars.lnf_g, vars.lnf_b, LN_EPS)?;
    let eos_index = caption.eos_index();
    let global_row = tape.gather_rows(dense, &[eos_index])?;
    let global = tape.reshape(global_row, vec![config.dim])?;
    Ok(TextRepr {
        dense,
        global,
        eos_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{tokenize, BpeVocab};

    fn setup() -> (TextEncoderConfig, TextEncoderParams, BpeVocab) {
        let vocab = BpeVocab::train(&["a red circle above a blue square".into()], 10).unwrap();
        let config = TextEncoderConfig {
            vocab: vocab.len(),
            context: 16,
            dim: 8,
            heads: 2,
            layers: 2,
        };
        let params = TextEncoderParams::init(config, 3);
        (config, params, vocab)
    }

    #[test]
    fn identical_captions_identical_outputs() {
        let (config, params, vocab) = setup();
        let tc = tokenize(&vocab, "a red circle");
        let run = || {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, false);
            let repr = encode_text(&mut tape, &config, &vars, &tc).unwrap();
            tape.value(repr.dense).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn global_is_dense_row_at_eos() {
        let (config, params, vocab) = setup();
        let tc = tokenize(&vocab, "");
        assert_eq!(tc.len(), 2);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let repr = encode_text(&mut tape, &config, &vars, &tc).unwrap();
        assert_eq!(repr.eos_index, 1);
        let dense = tape.value(repr.dense);
        let global = tape.value(repr.global);
        assert_eq!(&dense.data()[config.dim..2 * config.dim], global.data());
    }

    #[test]
    fn causality_earlier_rows_unaffected_by_later_tokens() {
        let (config, params, _) = setup();
        // Character-level vocab so both captions have identical length and
        // differ at exactly one token position.
        let vocab = BpeVocab::train(&["a red circle above a blue square".into()], 0).unwrap();
        let a = tokenize(&vocab, "a red cube");
        let b = tokenize(&vocab, "a red curb");
        assert_eq!(a.len(), b.len());
        // First differing token index.
        let j = a
            .token_ids
            .iter()
            .zip(&b.token_ids)
            .position(|(x, y)| x != y)
            .unwrap();
        let encode = |tc: &TokenizedCaption| {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, false);
            let repr = encode_text(&mut tape, &config, &vars, tc).unwrap();
            tape.value(repr.dense).data().to_vec()
        };
        let da = encode(&a);
        let db = encode(&b);
        assert_eq!(&da[..j * config.dim], &db[..j * config.dim]);
        assert_ne!(&da[j * config.dim..], &db[j * config.dim..]);
    }

    #[test]
    fn caption_longer_than_context_rejected_until_truncated() {
        let (config, params, vocab) = setup();
        let long = "a red circle above a blue square a red circle above a blue square";
        let mut tc = tokenize(&vocab, long);
        assert!(tc.len() > config.context);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        assert!(encode_text(&mut tape, &config, &vars, &tc).is_err());
        assert!(tc.truncate_to_context(config.context));
        let repr = encode_text(&mut tape, &config, &vars, &tc).unwrap();
        assert_eq!(tape.value(repr.dense).shape()[0], config.context);
    }
}
