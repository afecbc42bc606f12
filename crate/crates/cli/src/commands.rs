//! Subcommand implementations.

use crate::config::RunConfig;
use conceptseg::align::LossConfig;
use conceptseg::defaults;
use conceptseg::encoders::{
    HandcraftedFeaturizer, PrecomputedFeatures, TextEncoderConfig, TinyVit, TinyVitConfig,
    VisionProvider,
};
use conceptseg::error::{Error, Result};
use conceptseg::eval::{
    apply_background, classify, embed_classes, map_gt_foreground, map_gt_with_background,
    segment, sweep_theta, ClassEmbeddings, MiouAccumulator, SegmentParams,
};
use conceptseg::img::{Image, Mask};
use conceptseg::synth::{self, LoadedScene, SceneSpec};
use conceptseg::text::{extract_concepts, BpeVocab, ConceptBank, ExtractOptions, PosLexicon};
use conceptseg::train::{self, TrainConfig, TrainScene, TrainState};
use conceptseg::viz;
use serde_json::json;
use std::path::{Path, PathBuf};

fn require_dir(config: &RunConfig, key: &str) -> Result<PathBuf> {
    config
        .optional(key)
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config(format!("--{key} is required for this command")))
}

fn build_provider(config: &RunConfig) -> Result<VisionProvider> {
    match config.str("provider") {
        "handcrafted" => Ok(VisionProvider::Handcrafted(HandcraftedFeaturizer::new(
            config.usize("patch_size")?,
            config.usize("d_v")?,
        )?)),
        "tinyvit" => {
            let path = PathBuf::from(
                config
                    .optional("vit_path")
                    .ok_or_else(|| Error::Config("tinyvit provider needs --vit_path".into()))?,
            );
            if !path.exists() {
                if config.bool("vit_init")? {
                    let vit = TinyVit::init(
                        TinyVitConfig {
                            patch_size: config.usize("patch_size")?,
                            dim: config.usize("d_v")?,
                            heads: 4,
                            layers: 2,
                            max_patches: 1024,
                        },
                        config.u64("seed")?,
                    );
                    vit.save(&path)?;
                } else {
                    return Err(Error::NotFound(format!(
                        "ViT weight file {} (pass --vit_init true to create it)",
                        path.display()
                    )));
                }
            }
            Ok(VisionProvider::TinyVit(TinyVit::load(&path)?))
        }
        "precomputed" => {
            let path = PathBuf::from(config.optional("features_path").ok_or_else(|| {
                Error::Config("precomputed provider needs --features_path".into())
            })?);
            Ok(VisionProvider::Precomputed(PrecomputedFeatures::load(&path)?))
        }
        other => Err(Error::Config(format!(
            "unknown provider {other:?} (expected handcrafted|tinyvit|precomputed)"
        ))),
    }
}

fn load_bank(config: &RunConfig, data: Option<&Path>) -> Result<ConceptBank> {
    if let Some(path) = config.optional("bank") {
        return ConceptBank::load(Path::new(path));
    }
    if let Some(dir) = data {
        let p = dir.join("bank.txt");
        if p.exists() {
            return ConceptBank::load(&p);
        }
    }
    Ok(defaults::bank_easy())
}

fn load_lexicon(config: &RunConfig, data: Option<&Path>) -> Result<PosLexicon> {
    if let Some(path) = config.optional("lexicon") {
        return PosLexicon::load(Path::new(path));
    }
    if let Some(dir) = data {
        let p = dir.join("lexicon.txt");
        if p.exists() {
            return PosLexicon::load(&p);
        }
    }
    Ok(defaults::lexicon_easy())
}

fn load_templates(config: &RunConfig) -> Result<Vec<String>> {
    match config.str("templates") {
        "desk" => Ok(defaults::templates_desk()),
        "full" => Ok(defaults::templates_full()),
        path => defaults::parse_templates(&std::fs::read_to_string(path)?),
    }
}

fn scene_spec(config: &RunConfig) -> Result<SceneSpec> {
    let mut spec = match config.str("mode") {
        "easy" => SceneSpec::easy(config.u64("seed")?),
        "hard" => SceneSpec::hard(config.u64("seed")?),
        other => {
            return Err(Error::Config(format!(
                "unknown mode {other:?} (expected easy|hard)"
            )))
        }
    };
    let size = config.usize("img_size")?;
    spec.width = size;
    spec.height = size;
    spec.min_objects = config.usize("min_objects")?;
    spec.max_objects = config.usize("max_objects")?;
    spec.validate()?;
    Ok(spec)
}

fn provider_digest(provider: &VisionProvider) -> u64 {
    // FNV-1a over the weight bytes; handcrafted providers have no state.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    };
    if let VisionProvider::TinyVit(vit) = provider {
        vit.visit(&mut |_, t| {
            for v in t.data() {
                eat(&v.to_le_bytes());
            }
        });
    }
    h
}

pub fn cmd_synth(config: &RunConfig) -> Result<serde_json::Value> {
    let out = require_dir(config, "out")?;
    let spec = scene_spec(config)?;
    let (n_train, n_val, n_test) = (
        config.usize("n_train")?,
        config.usize("n_val")?,
        config.usize("n_test")?,
    );
    let entries = synth::generate_dataset(&spec, n_train, n_val, n_test, &out)?;
    std::fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(&config.echo()).unwrap(),
    )?;
    let mut features_written = serde_json::Value::Null;
    if let Some(fpath) = config.optional("features_out") {
        let provider = build_provider(config)?;
        if matches!(provider, VisionProvider::Precomputed(_)) {
            return Err(Error::Config(
                "features_out needs a computing provider (handcrafted or tinyvit)".into(),
            ));
        }
        let mut store: Option<PrecomputedFeatures> = None;
        for entry in &entries {
            let image = Image::load_ppm(&out.join(&entry.image_path))?;
            let repr = provider.encode(&image, Some(&entry.id))?;
            let (n_v, d_v) = repr.dense.dims2()?;
            let s = store.get_or_insert_with(|| PrecomputedFeatures::new(n_v, d_v));
            s.insert(&entry.id, &repr)?;
        }
        if let Some(s) = store {
            s.save(Path::new(fpath))?;
            features_written = json!(fpath);
        }
    }
    Ok(json!({
        "command": "synth",
        "out": out.display().to_string(),
        "scenes": entries.len(),
        "classes": spec.class_names(),
        "features_out": features_written,
        "config": config.echo(),
    }))
}

/// Shared train-scene preparation: tokenize, extract concepts, truncate.
fn prepare_scenes(
    scenes: Vec<LoadedScene>,
    vocab: &BpeVocab,
    lexicon: &PosLexicon,
    bank: &ConceptBank,
    context: usize,
    fold_plural: bool,
) -> (Vec<TrainScene>, usize) {
    let mut truncated = 0usize;
    let opts = ExtractOptions { fold_plural };
    let prepared = scenes
        .into_iter()
        .map(|s| {
            let mut caption = extract_concepts(vocab, lexicon, bank, &s.entry.caption, opts);
            if caption.truncate_to_context(context) {
                truncated += 1;
            }
            TrainScene {
                id: s.entry.id,
                image: s.image,
                caption,
            }
        })
        .collect();
    (prepared, truncated)
}

pub fn cmd_train(config: &RunConfig) -> Result<serde_json::Value> {
    let data = require_dir(config, "data")?;
    let out = require_dir(config, "out")?;
    std::fs::create_dir_all(&out)?;
    let scenes = synth::load_split(&data, "train")?;
    if scenes.is_empty() {
        return Err(Error::Input(format!("no train split in {}", data.display())));
    }
    let bank = load_bank(config, Some(&data))?;
    let lexicon = load_lexicon(config, Some(&data))?;
    let captions: Vec<String> = scenes.iter().map(|s| s.entry.caption.clone()).collect();
    let vocab = BpeVocab::train(&captions, config.usize("vocab_merges")?)?;
    vocab.save(&out.join("vocab.szbpe"))?;

    let provider = build_provider(config)?;
    let digest_before = provider_digest(&provider);
    let context = config.usize("context")?;
    let (train_scenes, truncated) = prepare_scenes(
        scenes,
        &vocab,
        &lexicon,
        &bank,
        context,
        config.bool("plural_fold")?,
    );
    let text_config = TextEncoderConfig {
        vocab: vocab.len(),
        context,
        dim: config.usize("d_t")?,
        heads: config.usize("text_heads")?,
        layers: config.usize("text_layers")?,
    };
    let loss = LossConfig {
        lambda: config.f32("lambda")?,
        tau: config.f32("tau")?,
        logit_scale_init: config.f32("logit_init")?,
        logit_scale_max: config.f32("logit_max")?,
    };
    let seed = config.u64("seed")?;
    let mut state = TrainState::new(
        text_config,
        provider.d_v(),
        config.bool("proj_bias")?,
        &loss,
        seed,
    );
    let train_config = TrainConfig {
        epochs: config.usize("epochs")?,
        batch_size: config.usize("batch")?,
        peak_lr: config.f64("lr")?,
        warmup_frac: config.f64("warmup_frac")?,
        weight_decay: config.f32("weight_decay")?,
        beta1: config.f32("beta1")?,
        beta2: config.f32("beta2")?,
        adam_eps: config.f32("adam_eps")?,
        clip_grad_norm: config.f32("clip_grad")?,
        seed,
        loss,
        checkpoint_every: config.usize("checkpoint_every")?,
        skip_concepts: false,
    };
    let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(out.join("metrics.jsonl"))?);
    let metrics = train::run_training(
        &mut state,
        &provider,
        &train_scenes,
        &train_config,
        Some(&mut metrics_file),
        Some(&out),
    )?;
    drop(metrics_file);
    if provider_digest(&provider) != digest_before {
        return Err(Error::Contract("frozen vision provider changed during training".into()));
    }
    std::fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(&config.echo()).unwrap(),
    )?;
    let first = metrics.first();
    let last = metrics.last();
    Ok(json!({
        "command": "train",
        "out": out.display().to_string(),
        "steps": metrics.len(),
        "parameters": state.num_parameters(),
        "truncated_captions": truncated,
        "first_loss": first.map(|m| m.loss_tot),
        "final_loss": last.map(|m| m.loss_tot),
        "checkpoint": out.join("checkpoint_final.szck").display().to_string(),
        "vocab": out.join("vocab.szbpe").display().to_string(),
        "frozen_provider_check": "ok",
        "config": config.echo(),
    }))
}

struct EvalSetup {
    provider: VisionProvider,
    embeds: ClassEmbeddings,
    class_names: Vec<String>,
}

fn eval_setup(config: &RunConfig, data: &Path) -> Result<EvalSetup> {
    let checkpoint = config
        .optional("checkpoint")
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    let vocab_path = config
        .optional("vocab")
        .ok_or_else(|| Error::Config("--vocab is required".into()))?;
    let state = train::load_checkpoint(Path::new(checkpoint))?;
    let vocab = BpeVocab::load(Path::new(vocab_path))?;
    let provider = build_provider(config)?;
    if provider.d_v() != state.d_v {
        return Err(Error::Config(format!(
            "provider d_v {} does not match checkpoint d_v {}",
            provider.d_v(),
            state.d_v
        )));
    }
    let class_names = synth::read_class_names(data)?;
    let templates = load_templates(config)?;
    let embeds = embed_classes(&state.text, &state.proj, &vocab, &class_names, &templates)?;
    Ok(EvalSetup {
        provider,
        embeds,
        class_names,
    })
}

fn segment_params(config: &RunConfig) -> Result<SegmentParams> {
    Ok(SegmentParams {
        shorter_side: config.usize("shorter_side")?,
        window: config.usize("window")?,
        stride: config.usize("stride")?,
    })
}

/// Class-id color for overlays.
fn class_color(c: usize) -> [u8; 3] {
    let h = conceptseg::rng::pixel_hash(0x636f_6c6f, c as u64, 17);
    [
        (96 + (h & 0x7f)) as u8,
        (96 + ((h >> 8) & 0x7f)) as u8,
        (96 + ((h >> 16) & 0x7f)) as u8,
    ]
}

fn write_overlay(path: &Path, image: &Image, labels: &Mask, background_id: u8) -> Result<()> {
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let label = labels.get(x, y);
            if label == background_id {
                continue;
            }
            let base = image.get(x, y);
            let tint = class_color(label as usize);
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                rgb[c] = ((base[c] as u16 + tint[c] as u16) / 2) as u8;
            }
            out.set(x, y, rgb);
        }
    }
    out.save_ppm(path)
}

pub fn cmd_eval_seg(config: &RunConfig) -> Result<serde_json::Value> {
    let data = require_dir(config, "data")?;
    let split = config.str("split").to_string();
    let scenes = synth::load_split(&data, &split)?;
    if scenes.is_empty() {
        return Err(Error::Input(format!("no {split} split in {}", data.display())));
    }
    let with_background = config.bool("with_background")?;
    let oracle_mode = config.bool("oracle")?;
    let class_names = synth::read_class_names(&data)?;

    // Oracle mode scores the ground truth against itself: a plumbing
    // check that the metric and label mapping yield exactly 1.0.
    if oracle_mode {
        let mut acc = MiouAccumulator::new(&class_names);
        for scene in &scenes {
            let pred = map_gt_foreground(&scene.mask);
            acc.add(&pred, &map_gt_foreground(&scene.mask), Some(255))?;
        }
        let report = acc.report();
        return Ok(json!({
            "command": "eval-seg",
            "mode": "oracle",
            "split": split,
            "miou": report.miou,
            "per_class": report.per_class,
            "config": config.echo(),
        }));
    }

    let setup = eval_setup(config, &data)?;
    let params = segment_params(config)?;
    let labels_out = config.optional("labels_out").map(PathBuf::from);
    if let Some(dir) = &labels_out {
        std::fs::create_dir_all(dir)?;
    }
    let overlays = config.bool("overlays")?;

    // Resolve theta: explicit value, or a sweep on the validation split.
    let mut theta: Option<f32> = match config.optional("theta") {
        Some(t) => Some(t.parse().map_err(|_| Error::Config(format!("bad theta {t:?}")))?),
        None => None,
    };
    let mut theta_curve = Vec::new();
    if with_background && config.bool("theta_sweep")? {
        let val_scenes = synth::load_split(&data, "val")?;
        if val_scenes.is_empty() {
            return Err(Error::Input("theta sweep needs a val split".into()));
        }
        let mut results = Vec::new();
        let mut gts = Vec::new();
        for scene in &val_scenes {
            results.push(segment(
                &setup.provider,
                &setup.embeds,
                &scene.image,
                Some(&scene.entry.id),
                &params,
            )?);
            gts.push(&scene.mask);
        }
        let grid: Vec<f32> = (0..20).map(|i| i as f32 * 0.05).collect();
        let (best, curve) = sweep_theta(&results, &gts, &grid)?;
        theta = Some(best);
        theta_curve = curve
            .into_iter()
            .map(|(t, m)| json!({"theta": t, "miou": m}))
            .collect();
    }
    if with_background && theta.is_none() {
        return Err(Error::Config(
            "--with_background needs --theta or --theta_sweep true".into(),
        ));
    }

    let mut names = setup.class_names.clone();
    if with_background {
        names.push("background".into());
    }
    let mut acc = MiouAccumulator::new(&names);
    for scene in &scenes {
        let result = segment(
            &setup.provider,
            &setup.embeds,
            &scene.image,
            Some(&scene.entry.id),
            &params,
        )?;
        let (final_result, gt_mapped, ignore) = if with_background {
            let thresholded = apply_background(&result, theta.unwrap())?;
            let gt = map_gt_with_background(&scene.mask, result.background_id());
            (thresholded, gt, None)
        } else {
            (result, map_gt_foreground(&scene.mask), Some(255u8))
        };
        acc.add(&final_result.labels, &gt_mapped, ignore)?;
        if let Some(dir) = &labels_out {
            final_result
                .labels
                .save_pgm(&dir.join(format!("{}_pred.pgm", scene.entry.id)))?;
            if overlays {
                write_overlay(
                    &dir.join(format!("{}_overlay.ppm", scene.entry.id)),
                    &scene.image,
                    &final_result.labels,
                    final_result.background_id(),
                )?;
            }
        }
    }
    let report = acc.report();
    let out = json!({
        "command": "eval-seg",
        "split": split,
        "images": scenes.len(),
        "with_background": with_background,
        "theta": theta,
        "theta_curve": theta_curve,
        "miou": report.miou,
        "per_class": report.per_class,
        "pixels": report.pixel_total,
        "pixels_ignored": report.pixel_ignored,
        "truncation_warnings": setup.embeds.truncation_warnings,
        "config": config.echo(),
    });
    if let Some(dir) = config.optional("out") {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            Path::new(dir).join("eval_seg.json"),
            serde_json::to_string_pretty(&out).unwrap(),
        )?;
    }
    Ok(out)
}

pub fn cmd_eval_cls(config: &RunConfig) -> Result<serde_json::Value> {
    let data = require_dir(config, "data")?;
    let split = config.str("split").to_string();
    let scenes = synth::load_split(&data, &split)?;
    if scenes.is_empty() {
        return Err(Error::Input(format!("no {split} split in {}", data.display())));
    }
    let setup = eval_setup(config, &data)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut skipped_multi_object = 0usize;
    let mut per_class: std::collections::BTreeMap<String, (usize, usize)> = Default::default();
    for scene in &scenes {
        let mut present: Vec<u8> = scene.mask.data.iter().copied().filter(|&v| v > 0).collect();
        present.sort_unstable();
        present.dedup();
        if present.len() != 1 {
            skipped_multi_object += 1;
            continue;
        }
        let gt = (present[0] - 1) as usize;
        let (pred, _scores) = classify(
            &setup.provider,
            &setup.embeds,
            &scene.image,
            Some(&scene.entry.id),
        )?;
        let entry = per_class.entry(setup.class_names[gt].clone()).or_insert((0, 0));
        entry.1 += 1;
        if pred == gt {
            correct += 1;
            entry.0 += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(Error::Input(
            "no single-object scenes in the split; classification needs max_objects 1".into(),
        ));
    }
    let per_class_accuracy: std::collections::BTreeMap<String, f64> = per_class
        .into_iter()
        .map(|(k, (c, n))| (k, c as f64 / n as f64))
        .collect();
    let out = json!({
        "command": "eval-cls",
        "split": split,
        "accuracy": correct as f64 / total as f64,
        "correct": correct,
        "total": total,
        "skipped_multi_object": skipped_multi_object,
        "per_class_accuracy": per_class_accuracy,
        "config": config.echo(),
    });
    if let Some(dir) = config.optional("out") {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            Path::new(dir).join("eval_cls.json"),
            serde_json::to_string_pretty(&out).unwrap(),
        )?;
    }
    Ok(out)
}

pub fn cmd_concepts(config: &RunConfig) -> Result<serde_json::Value> {
    let vocab_path = config
        .optional("vocab")
        .ok_or_else(|| Error::Config("--vocab is required".into()))?;
    let captions_path = config
        .optional("captions")
        .ok_or_else(|| Error::Config("--captions is required".into()))?;
    let vocab = BpeVocab::load(Path::new(vocab_path))?;
    let data = config.optional("data").map(PathBuf::from);
    let bank = load_bank(config, data.as_deref())?;
    let lexicon = load_lexicon(config, data.as_deref())?;
    let opts = ExtractOptions {
        fold_plural: config.bool("plural_fold")?,
    };
    let text = std::fs::read_to_string(captions_path)?;
    let mut lines = String::new();
    for caption in text.lines() {
        if caption.trim().is_empty() {
            continue;
        }
        let tc = extract_concepts(&vocab, &lexicon, &bank, caption, opts);
        let concepts: Vec<serde_json::Value> = tc
            .concepts
            .iter()
            .map(|c| {
                json!({
                    "id": c.concept_id,
                    "concept": c.concept,
                    "s_l": c.token_indices,
                    "char_start": c.char_range.0,
                    "char_end": c.char_range.1,
                })
            })
            .collect();
        let record = json!({"caption": caption, "concepts": concepts});
        lines.push_str(&serde_json::to_string(&record).unwrap());
        lines.push('\n');
    }
    match config.optional("concepts_out") {
        Some(path) => {
            std::fs::write(path, &lines)?;
        }
        None => print!("{lines}"),
    }
    Ok(json!({
        "command": "concepts",
        "captions": text.lines().filter(|l| !l.trim().is_empty()).count(),
        "out": config.optional("concepts_out"),
        "config": config.echo(),
    }))
}

pub fn cmd_visualize(config: &RunConfig) -> Result<serde_json::Value> {
    let out = require_dir(config, "out")?;
    std::fs::create_dir_all(&out)?;
    let provider = build_provider(config)?;
    let resolutions: Vec<usize> = config
        .str("resolutions")
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad resolution {s:?}")))
        })
        .collect::<Result<_>>()?;
    if resolutions.is_empty() {
        return Err(Error::Config("no resolutions".into()));
    }

    // Inputs: explicit image paths, or the first scenes of a dataset split.
    let mut inputs: Vec<(String, Image)> = Vec::new();
    if let Some(list) = config.optional("images") {
        for path in list.split(',') {
            let p = Path::new(path.trim());
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            inputs.push((id, Image::load_ppm(p)?));
        }
    } else {
        let data = require_dir(config, "data")?;
        let split = config.str("split");
        let count = config.usize("visualize_count")?;
        for scene in synth::load_split(&data, split)?.into_iter().take(count) {
            inputs.push((scene.entry.id, scene.image));
        }
    }
    if inputs.is_empty() {
        return Err(Error::Input("nothing to visualize".into()));
    }

    let mut written = Vec::new();
    for (id, image) in &inputs {
        let orig_path = out.join(format!("{id}_orig.ppm"));
        image.save_ppm(&orig_path)?;
        written.push(orig_path.display().to_string());
        for &r in &resolutions {
            let scaled = if r == 1 {
                image.clone()
            } else {
                image.resize_bilinear(image.width * r, image.height * r)
            };
            let repr = provider.encode(&scaled, Some(id))?;
            let (projection, _vars) = viz::pca3(&repr.dense)?;
            let grid_img = viz::projection_to_rgb(&projection, repr.grid)?;
            // Upscale each grid cell back to patch size for viewing.
            let factor = (scaled.width / repr.grid.1).max(1);
            let big = viz::upscale_nearest(&grid_img, factor);
            let path = out.join(format!("{id}_pca_x{r}.ppm"));
            big.save_ppm(&path)?;
            written.push(path.display().to_string());
        }
    }
    std::fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(&config.echo()).unwrap(),
    )?;
    Ok(json!({
        "command": "visualize",
        "images": inputs.len(),
        "resolutions": resolutions,
        "written": written,
        "config": config.echo(),
    }))
}
