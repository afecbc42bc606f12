//! Mini-batch training: AdamW with decoupled weight decay, linear-warmup
//! cosine learning-rate schedule, bit-exact checkpointing, and JSON Lines
//! step metrics.

use crate::align::{
    assemble_concept_batch, build_classifier, clamp_logit_scale, concept_loss, global_loss,
    total_loss, LossConfig, PairRepr, TextToVisionProjection,
};
use crate::autodiff::Tape;
use crate::checkpoint::{self, f32_bits_to_u32, u32_to_f32_bits};
use crate::encoders::{encode_text, TextEncoderConfig, TextEncoderParams, VisionProvider};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::tensor::Tensor;
use crate::text::TokenizedCaption;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base peak learning rate; the effective peak is scaled by
    /// batch_size / 256.
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    /// Global-norm gradient clip; 0 disables.
    pub clip_grad_norm: f32,
    pub seed: u64,
    pub loss: LossConfig,
    /// Checkpoint every n steps; 0 = only at the end.
    pub checkpoint_every: usize,
    /// Skip concept assembly entirely (pure global objective).
    pub skip_concepts: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 256,
            peak_lr: 2e-3,
            warmup_frac: 0.1,
            weight_decay: 0.2,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-6,
            clip_grad_norm: 0.0,
            seed: 0,
            loss: LossConfig::default(),
            checkpoint_every: 0,
            skip_concepts: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Param(format!(
                "warmup fraction must be in [0,1), got {}",
                self.warmup_frac
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch size must be >= 1".into()));
        }
        if self.peak_lr <= 0.0 {
            return Err(Error::Param("peak learning rate must be positive".into()));
        }
        self.loss.validate()
    }

    pub fn effective_peak_lr(&self) -> f64 {
        self.peak_lr * self.batch_size as f64 / 256.0
    }
}

/// Linear ramp 0 → peak over the warmup steps, then cosine decay to 0.
pub fn lr_at(config: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    debug_assert!(step <= total_steps);
    let peak = config.effective_peak_lr();
    let warmup = (config.warmup_frac * total_steps as f64).round() as usize;
    if warmup > 0 && step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return peak;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Everything that changes during training. Round-trips through the
/// checkpoint format bit-exactly, including optimizer moments and the RNG.
pub struct TrainState {
    pub step: usize,
    pub text: TextEncoderParams,
    pub proj: TextToVisionProjection,
    /// Log of the similarity scale, clamped so exp stays ≤ exp(max).
    pub logit_scale: Tensor,
    /// (name, first moment, second moment) in canonical parameter order.
    pub moments: Vec<(String, Tensor, Tensor)>,
    pub rng: ChaCha8Rng,
    pub d_v: usize,
}

impl TrainState {
    pub fn new(
        text_config: TextEncoderConfig,
        d_v: usize,
        use_proj_bias: bool,
        loss: &LossConfig,
        seed: u64,
    ) -> Self {
        let text = TextEncoderParams::init(text_config, seed);
        let proj = TextToVisionProjection::init(text_config.dim, d_v, use_proj_bias, seed);
        let logit_scale = Tensor::from_vec(vec![loss.logit_scale_init]);
        let mut moments = Vec::new();
        {
            let mut register = |name: String, t: &Tensor| {
                moments.push((
                    name,
                    Tensor::zeros(t.shape().to_vec()),
                    Tensor::zeros(t.shape().to_vec()),
                ));
            };
            text.visit(&mut register);
            proj.visit(&mut register);
            register("logit_scale".into(), &logit_scale);
        }
        TrainState {
            step: 0,
            text,
            proj,
            logit_scale,
            moments,
            rng: ChaCha8Rng::seed_from_u64(seed),
            d_v,
        }
    }

    /// Visit every trainable tensor in canonical (moment-table) order.
    pub fn visit_params(&self, f: &mut impl FnMut(String, &Tensor)) {
        self.text.visit(f);
        self.proj.visit(f);
        f("logit_scale".into(), &self.logit_scale);
    }

    fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        self.text.visit_mut(f);
        self.proj.visit_mut(f);
        f("logit_scale".into(), &mut self.logit_scale);
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }
}

/// One training example, caption already tokenized (and concept-annotated)
/// against the run's vocabulary and bank.
#[derive(Clone, Debug)]
pub struct TrainScene {
    pub id: String,
    pub image: Image,
    pub caption: TokenizedCaption,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss_g: f64,
    pub loss_l: f64,
    pub loss_tot: f64,
    pub b_tilde: usize,
    pub k: usize,
    pub ms_vision: f64,
    pub ms_text: f64,
    pub ms_concepts: f64,
    pub ms_losses: f64,
    pub ms_update: f64,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// One optimization step over a batch of image-caption pairs.
pub fn train_step(
    state: &mut TrainState,
    provider: &VisionProvider,
    items: &[&TrainScene],
    config: &TrainConfig,
    total_steps: usize,
) -> Result<StepMetrics> {
    if items.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }

    let t_vision = Instant::now();
    let reprs: Vec<_> = items
        .iter()
        .map(|s| provider.encode(&s.image, Some(&s.id)))
        .collect::<Result<Vec<_>>>()?;
    let ms_vision = ms_since(t_vision);

    let mut tape = Tape::new();
    let text_vars = state.text.register(&mut tape, true);
    let proj_vars = state.proj.register(&mut tape, true);
    let logit_var = tape.leaf(state.logit_scale.clone(), true);

    let t_text = Instant::now();
    let text_reprs: Vec<_> = items
        .iter()
        .map(|s| encode_text(&mut tape, &state.text.config, &text_vars, &s.caption))
        .collect::<Result<Vec<_>>>()?;
    let ms_text = ms_since(t_text);

    let t_concepts = Instant::now();
    let vision_dense: Vec<_> = reprs
        .iter()
        .map(|r| tape.constant(r.dense.clone()))
        .collect();
    let pairs: Vec<PairRepr> = items
        .iter()
        .enumerate()
        .map(|(i, s)| PairRepr {
            vision_dense: vision_dense[i],
            text: text_reprs[i],
            caption: &s.caption,
        })
        .collect();
    let concept_batch = if config.skip_concepts {
        None
    } else {
        assemble_concept_batch(&mut tape, &pairs, &proj_vars, config.loss.tau)?
    };
    let ms_concepts = ms_since(t_concepts);

    let t_losses = Instant::now();
    let text_globals: Vec<_> = text_reprs.iter().map(|r| r.global).collect();
    let text_globals = tape.concat_rows(&text_globals)?;
    let vision_globals = {
        let rows: Vec<f32> = reprs.iter().flat_map(|r| r.global.data().to_vec()).collect();
        let t = Tensor::new(vec![items.len(), state.d_v], rows)?;
        tape.constant(t)
    };
    let loss_g = global_loss(&mut tape, &proj_vars, text_globals, vision_globals, logit_var)?;
    let (loss_l, b_tilde, k) = match &concept_batch {
        Some(batch) => {
            let h = build_classifier(&mut tape, batch)?;
            let l = concept_loss(&mut tape, batch, h)?;
            (Some(l), batch.b_tilde(), batch.k)
        }
        None => (None, 0, 0),
    };
    let loss_tot = total_loss(&mut tape, loss_g, loss_l, config.loss.lambda)?;
    let ms_losses = ms_since(t_losses);

    let loss_g_v = tape.value(loss_g).data()[0] as f64;
    let loss_l_v = loss_l.map(|l| tape.value(l).data()[0] as f64).unwrap_or(0.0);
    let loss_tot_v = tape.value(loss_tot).data()[0] as f64;
    if !loss_tot_v.is_finite() || !loss_g_v.is_finite() || !loss_l_v.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            batch_ids: items.iter().map(|s| s.id.clone()).collect(),
        });
    }

    let t_update = Instant::now();
    let grads = tape.backward(loss_tot)?;
    let mut param_vars = TextEncoderParams::var_list(&text_vars);
    param_vars.push(proj_vars.weight);
    if proj_vars.use_bias {
        param_vars.push(proj_vars.bias);
    }
    param_vars.push(logit_var);

    let mut grad_tensors: Vec<Option<Tensor>> =
        param_vars.iter().map(|&v| grads.get(v).cloned()).collect();

    if config.clip_grad_norm > 0.0 {
        let mut sq = 0.0f64;
        for g in grad_tensors.iter().flatten() {
            sq += g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        }
        let norm = sq.sqrt();
        if norm > config.clip_grad_norm as f64 {
            let scale = (config.clip_grad_norm as f64 / norm) as f32;
            for g in grad_tensors.iter_mut().flatten() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }
    }

    let lr = lr_at(config, state.step, total_steps);
    let bias1 = 1.0 - (config.beta1 as f64).powi(state.step as i32 + 1);
    let bias2 = 1.0 - (config.beta2 as f64).powi(state.step as i32 + 1);
    let weight_decay = config.weight_decay;
    let (b1, b2, eps) = (config.beta1, config.beta2, config.adam_eps);

    let mut moments = std::mem::take(&mut state.moments);
    let mut idx = 0usize;
    let mut update_err: Option<Error> = None;
    state.visit_params_mut(&mut |name, p| {
        if update_err.is_some() {
            return;
        }
        let (mname, m, v) = &mut moments[idx];
        if *mname != name {
            update_err = Some(Error::Contract(format!(
                "optimizer state order mismatch: {mname} vs {name}"
            )));
            return;
        }
        let zero;
        let g = match &grad_tensors[idx] {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(p.shape().to_vec());
                &zero
            }
        };
        // Decoupled weight decay on rank >= 2 tensors only (matrices and
        // embeddings), never on biases, gains, or the logit scale.
        let wd = if p.rank() >= 2 { weight_decay } else { 0.0 };
        let (md, vd, pd, gd) = (m.data_mut(), v.data_mut(), p.data_mut(), g.data());
        for i in 0..pd.len() {
            md[i] = b1 * md[i] + (1.0 - b1) * gd[i];
            vd[i] = b2 * vd[i] + (1.0 - b2) * gd[i] * gd[i];
            let m_hat = md[i] as f64 / bias1;
            let v_hat = vd[i] as f64 / bias2;
            let delta = m_hat / (v_hat.sqrt() + eps as f64) + (wd * pd[i]) as f64;
            pd[i] -= (lr * delta) as f32;
        }
        idx += 1;
    });
    state.moments = moments;
    if let Some(e) = update_err {
        return Err(e);
    }
    clamp_logit_scale(&mut state.logit_scale, config.loss.logit_scale_max);
    state.step += 1;
    let ms_update = ms_since(t_update);

    Ok(StepMetrics {
        step: state.step - 1,
        lr,
        loss_g: loss_g_v,
        loss_l: loss_l_v,
        loss_tot: loss_tot_v,
        b_tilde,
        k,
        ms_vision,
        ms_text,
        ms_concepts,
        ms_losses,
        ms_update,
    })
}

pub fn total_steps(config: &TrainConfig, num_scenes: usize) -> usize {
    let per_epoch = num_scenes.div_ceil(config.batch_size);
    config.epochs * per_epoch
}

/// Full training run: shuffled epochs, per-step metrics to the sink,
/// checkpoints at the configured cadence and at the end.
pub fn run_training(
    state: &mut TrainState,
    provider: &VisionProvider,
    scenes: &[TrainScene],
    config: &TrainConfig,
    mut metrics_sink: Option<&mut dyn Write>,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<StepMetrics>> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::Param("no training scenes".into()));
    }
    // Schedule horizon: steps planned in this run, offset by any steps a
    // resumed state has already taken.
    let total = state.step + total_steps(config, scenes.len());
    let mut all_metrics = Vec::new();
    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        for i in (1..order.len()).rev() {
            let j = state.rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            let items: Vec<&TrainScene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let metrics = train_step(state, provider, &items, config, total)?;
            if let Some(sink) = metrics_sink.as_deref_mut() {
                serde_json::to_writer(&mut *sink, &metrics)
                    .map_err(|e| Error::Format(format!("metrics serialization: {e}")))?;
                sink.write_all(b"\n")?;
            }
            if let Some(dir) = checkpoint_dir {
                if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                    save_checkpoint(state, &dir.join(format!("checkpoint_{:06}.szck", state.step)))?;
                }
            }
            all_metrics.push(metrics);
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(state, &dir.join("checkpoint_final.szck"))?;
    }
    Ok(all_metrics)
}

// ---- checkpointing ----

fn rng_to_tensor(rng: &ChaCha8Rng) -> Tensor {
    let mut words: Vec<u32> = Vec::with_capacity(14);
    for chunk in rng.get_seed().chunks(4) {
        words.push(u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let pos: u128 = rng.get_word_pos();
    for i in 0..4 {
        words.push((pos >> (32 * i)) as u32);
    }
    let stream = rng.get_stream();
    words.push(stream as u32);
    words.push((stream >> 32) as u32);
    Tensor::from_vec(words.into_iter().map(u32_to_f32_bits).collect())
}

fn rng_from_tensor(t: &Tensor) -> Result<ChaCha8Rng> {
    if t.numel() != 14 {
        return Err(Error::Format("bad RNG state length".into()));
    }
    let words: Vec<u32> = t.data().iter().map(|&v| f32_bits_to_u32(v)).collect();
    let mut seed = [0u8; 32];
    for (i, w) in words[..8].iter().enumerate() {
        seed[i * 4..(i + 1) * 4].copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    let mut pos: u128 = 0;
    for i in 0..4 {
        pos |= (words[8 + i] as u128) << (32 * i);
    }
    let stream = words[12] as u64 | ((words[13] as u64) << 32);
    rng.set_stream(stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

/// Serialize the full state: parameters, optimizer moments, step counter,
/// RNG words, and the architecture echo needed to rebuild it.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    state.visit_params(&mut |name, t| tensors.push((name, t.clone())));
    for (name, m, v) in &state.moments {
        tensors.push((format!("opt.m.{name}"), m.clone()));
        tensors.push((format!("opt.v.{name}"), v.clone()));
    }
    tensors.push((
        "__step".into(),
        Tensor::from_vec(vec![u32_to_f32_bits(state.step as u32)]),
    ));
    tensors.push(("__rng".into(), rng_to_tensor(&state.rng)));
    let cfg = state.text.config;
    let arch = [
        cfg.vocab,
        cfg.context,
        cfg.dim,
        cfg.heads,
        cfg.layers,
        state.d_v,
        state.proj.use_bias as usize,
    ];
    tensors.push((
        "__arch".into(),
        Tensor::from_vec(arch.iter().map(|&v| v as f32).collect()),
    ));
    checkpoint::write_tensors(path, &tensors)
}

/// Rebuild a state from a checkpoint. Every expected tensor must be
/// present with the exact recorded shape.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let table = checkpoint::read_tensors(path)?;
    let lookup = |name: &str| -> Result<&Tensor> {
        table
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name:?}")))
    };
    let arch = lookup("__arch")?;
    if arch.numel() != 7 {
        return Err(Error::Format("bad architecture record".into()));
    }
    let a: Vec<usize> = arch.data().iter().map(|&v| v as usize).collect();
    let text_config = TextEncoderConfig {
        vocab: a[0],
        context: a[1],
        dim: a[2],
        heads: a[3],
        layers: a[4],
    };
    let d_v = a[5];
    let use_bias = a[6] != 0;
    let mut state = TrainState::new(text_config, d_v, use_bias, &LossConfig::default(), 0);
    let mut fill_err: Option<Error> = None;
    state.visit_params_mut(&mut |name, t| {
        if fill_err.is_some() {
            return;
        }
        match table.iter().find(|(n, _)| *n == name) {
            Some((_, loaded)) if loaded.shape() == t.shape() => *t = loaded.clone(),
            Some((_, loaded)) => {
                fill_err = Some(Error::Shape {
                    op: "load_checkpoint",
                    lhs: loaded.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            None => fill_err = Some(Error::Format(format!("checkpoint missing tensor {name:?}"))),
        }
    });
    if let Some(e) = fill_err {
        return Err(e);
    }
    let mut moments = std::mem::take(&mut state.moments);
    for (name, m, v) in moments.iter_mut() {
        let lm = lookup(&format!("opt.m.{name}"))?;
        let lv = lookup(&format!("opt.v.{name}"))?;
        if lm.shape() != m.shape() || lv.shape() != v.shape() {
            return Err(Error::Shape {
                op: "load_checkpoint",
                lhs: lm.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        *m = lm.clone();
        *v = lv.clone();
    }
    state.moments = moments;
    state.step = f32_bits_to_u32(lookup("__step")?.data()[0]) as usize;
    state.rng = rng_from_tensor(lookup("__rng")?)?;
    Ok(state)
}
