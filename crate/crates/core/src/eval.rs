//! Zero-shot evaluation: template-averaged class embeddings, sliding-window
//! dense segmentation with bilinear score upsampling, background
//! thresholding, mIoU, and global-representation classification.

use crate::align::TextToVisionProjection;
use crate::autodiff::Tape;
use crate::encoders::{encode_text, TextEncoderParams, VisionProvider};
use crate::error::{Error, Result};
use crate::img::{Image, Mask};
use crate::text::{tokenize, BpeVocab};
use serde::Serialize;
use std::collections::BTreeMap;

/// Unit-norm class embeddings in the visual space, one row per class name.
#[derive(Clone, Debug)]
pub struct ClassEmbeddings {
    pub names: Vec<String>,
    /// C × d_v, rows l2-normalized.
    pub matrix: Vec<Vec<f32>>,
    pub templates: Vec<String>,
    /// Captions that had to be truncated to the context length.
    pub truncation_warnings: usize,
}

/// Encode every class name through every filled template, average the
/// projected global representations, and l2-normalize.
pub fn embed_classes(
    text: &TextEncoderParams,
    proj: &TextToVisionProjection,
    vocab: &BpeVocab,
    names: &[String],
    templates: &[String],
) -> Result<ClassEmbeddings> {
    if names.is_empty() {
        return Err(Error::Param("no class names".into()));
    }
    if templates.is_empty() {
        return Err(Error::Param("no templates".into()));
    }
    let mut tape = Tape::new();
    let vars = text.register(&mut tape, false);
    let proj_vars = proj.register(&mut tape, false);
    let d_v = proj.bias.numel();
    let mut matrix = Vec::with_capacity(names.len());
    let mut truncation_warnings = 0usize;
    for name in names {
        let mut acc = vec![0.0f64; d_v];
        for template in templates {
            let filled = template.replace("{}", name);
            let mut tc = tokenize(vocab, &filled);
            if tc.truncate_to_context(text.config.context) {
                truncation_warnings += 1;
            }
            let repr = encode_text(&mut tape, &text.config, &vars, &tc)?;
            let projected = crate::align::project_text(&mut tape, &proj_vars, repr.global)?;
            for (a, &v) in acc.iter_mut().zip(tape.value(projected).data()) {
                *a += v as f64;
            }
        }
        let inv = 1.0 / templates.len() as f64;
        let norm = acc
            .iter()
            .map(|&v| (v * inv) * (v * inv))
            .sum::<f64>()
            .sqrt()
            .max(1e-12);
        matrix.push(acc.iter().map(|&v| ((v * inv) / norm) as f32).collect());
    }
    Ok(ClassEmbeddings {
        names: names.to_vec(),
        matrix,
        templates: templates.to_vec(),
        truncation_warnings,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct SegmentParams {
    pub shorter_side: usize,
    pub window: usize,
    pub stride: usize,
}

/// Per-pixel class labels plus the winning cosine score per pixel.
#[derive(Clone, Debug)]
pub struct SegmentationResult {
    pub labels: Mask,
    pub scores: Vec<f32>,
    pub classes: Vec<String>,
    pub theta: Option<f32>,
}

impl SegmentationResult {
    pub fn background_id(&self) -> u8 {
        self.classes.len() as u8
    }
}

fn window_starts(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        let clamped = pos.min(extent - window);
        if out.last() != Some(&clamped) {
            out.push(clamped);
        }
        if pos + window >= extent {
            break;
        }
        pos += stride;
    }
    out
}

/// Zero-shot segmentation: resize so the shorter side matches, slide a
/// window (the final window clamps to the border), score every patch
/// against the class embeddings, average overlapping windows, then
/// bilinearly upsample the per-class patch scores to the original
/// resolution and take the per-pixel argmax.
pub fn segment(
    provider: &VisionProvider,
    class_embeds: &ClassEmbeddings,
    image: &Image,
    id: Option<&str>,
    params: &SegmentParams,
) -> Result<SegmentationResult> {
    let num_classes = class_embeds.names.len();
    let d_v = provider.d_v();

    // Resize keeping aspect, shorter side pinned, then round the longer
    // side up to a patch multiple so windows align to the patch grid.
    let patch = provider.patch_size().unwrap_or(0);
    if patch > 0 && image.width.min(image.height) < patch {
        return Err(Error::Input(format!(
            "image {}x{} smaller than one {patch}px patch",
            image.width, image.height
        )));
    }
    let (rw, rh) = resized_dims(image.width, image.height, params.shorter_side, patch.max(1))?;
    let resized = if (rw, rh) == (image.width, image.height) {
        image.clone()
    } else {
        image.resize_bilinear(rw, rh)
    };
    if params.window > rw || params.window > rh {
        return Err(Error::Param(format!(
            "window {} exceeds resized image {rw}x{rh}",
            params.window
        )));
    }
    if params.stride == 0 || params.stride > params.window {
        return Err(Error::Param(format!(
            "stride {} must be in 1..=window {}",
            params.stride, params.window
        )));
    }
    if patch > 0 && (params.window % patch != 0 || params.stride % patch != 0) {
        return Err(Error::Param(format!(
            "window {} and stride {} must be multiples of the patch size {patch}",
            params.window, params.stride
        )));
    }

    let single_window = params.window == rw && params.window == rh;
    // Patch grid of the resized image. For the precomputed provider the
    // grid comes from the stored features (whole image, single window).
    let (grid_h, grid_w, eff_patch) = if patch > 0 {
        (rh / patch, rw / patch, patch)
    } else {
        if !single_window || (rw, rh) != (image.width, image.height) {
            return Err(Error::Param(
                "precomputed features support only whole-image single-window inference".into(),
            ));
        }
        let probe = provider.encode(&resized, id)?;
        (probe.grid.0, probe.grid.1, rw / probe.grid.1)
    };

    let mut acc = vec![0.0f64; grid_h * grid_w * num_classes];
    let mut counts = vec![0.0f64; grid_h * grid_w];
    for &wy in &window_starts(rh, params.window, params.stride) {
        for &wx in &window_starts(rw, params.window, params.stride) {
            let crop;
            let view = if single_window {
                &resized
            } else {
                crop = resized.crop(wx, wy, params.window, params.window)?;
                &crop
            };
            let window_id = if single_window { id } else { None };
            let repr = provider.encode(view, window_id)?;
            let (wp_rows, wp_cols) = repr.grid;
            let dense = repr.dense.data();
            for pr in 0..wp_rows {
                for pc in 0..wp_cols {
                    let row = &dense[(pr * wp_cols + pc) * d_v..(pr * wp_cols + pc + 1) * d_v];
                    let norm = row
                        .iter()
                        .map(|&v| (v as f64) * (v as f64))
                        .sum::<f64>()
                        .sqrt()
                        .max(1e-12);
                    let gy = wy / eff_patch + pr;
                    let gx = wx / eff_patch + pc;
                    let base = (gy * grid_w + gx) * num_classes;
                    for (c, emb) in class_embeds.matrix.iter().enumerate() {
                        let dot: f64 = row
                            .iter()
                            .zip(emb)
                            .map(|(&a, &b)| a as f64 * b as f64)
                            .sum();
                        acc[base + c] += dot / norm;
                    }
                    counts[gy * grid_w + gx] += 1.0;
                }
            }
        }
    }
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let n = counts[gy * grid_w + gx];
            debug_assert!(n > 0.0, "window coverage left a hole at ({gy},{gx})");
            for c in 0..num_classes {
                acc[(gy * grid_w + gx) * num_classes + c] /= n;
            }
        }
    }

    // Upsample each class score map to the original resolution, then argmax.
    let (h, w) = (image.height, image.width);
    let mut labels = Mask::new(w, h);
    let mut scores = vec![f32::NEG_INFINITY; w * h];
    let mut best = vec![0u8; w * h];
    for c in 0..num_classes {
        for y in 0..h {
            let py = grid_coord(y, h, rh, eff_patch, grid_h);
            for x in 0..w {
                let px = grid_coord(x, w, rw, eff_patch, grid_w);
                let v = bilinear_grid(&acc, grid_h, grid_w, num_classes, c, py, px) as f32;
                let i = y * w + x;
                if v > scores[i] {
                    scores[i] = v;
                    best[i] = c as u8;
                }
            }
        }
    }
    labels.data.copy_from_slice(&best);
    Ok(SegmentationResult {
        labels,
        scores,
        classes: class_embeds.names.clone(),
        theta: None,
    })
}

fn resized_dims(w: usize, h: usize, shorter: usize, patch: usize) -> Result<(usize, usize)> {
    if w == 0 || h == 0 {
        return Err(Error::Input("empty image".into()));
    }
    let round_up = |v: usize| v.div_ceil(patch) * patch;
    let (rw, rh) = if w <= h {
        let rw = shorter;
        let rh = ((h as f64) * shorter as f64 / w as f64).round() as usize;
        (rw, rh.max(shorter))
    } else {
        let rh = shorter;
        let rw = ((w as f64) * shorter as f64 / h as f64).round() as usize;
        (rw.max(shorter), rh)
    };
    Ok((round_up(rw), round_up(rh)))
}

/// Continuous patch-grid coordinate for an original-image pixel center.
fn grid_coord(v: usize, orig: usize, resized: usize, patch: usize, grid: usize) -> f64 {
    let in_resized = (v as f64 + 0.5) * resized as f64 / orig as f64;
    (in_resized / patch as f64 - 0.5).clamp(0.0, grid as f64 - 1.0)
}

fn bilinear_grid(
    acc: &[f64],
    grid_h: usize,
    grid_w: usize,
    stride: usize,
    c: usize,
    py: f64,
    px: f64,
) -> f64 {
    let y0 = py.floor() as usize;
    let x0 = px.floor() as usize;
    let y1 = (y0 + 1).min(grid_h - 1);
    let x1 = (x0 + 1).min(grid_w - 1);
    let wy = py - y0 as f64;
    let wx = px - x0 as f64;
    let at = |gy: usize, gx: usize| acc[(gy * grid_w + gx) * stride + c];
    at(y0, x0) * (1.0 - wy) * (1.0 - wx)
        + at(y0, x1) * (1.0 - wy) * wx
        + at(y1, x0) * wy * (1.0 - wx)
        + at(y1, x1) * wy * wx
}

/// Relabel pixels whose winning score falls below θ to the background id
/// (= number of foreground classes).
pub fn apply_background(result: &SegmentationResult, theta: f32) -> Result<SegmentationResult> {
    if !(-1.0..=1.0).contains(&theta) {
        return Err(Error::Param(format!("theta must be in [-1, 1], got {theta}")));
    }
    let mut out = result.clone();
    let bg = result.background_id();
    for (label, &score) in out.labels.data.iter_mut().zip(&result.scores) {
        if score < theta {
            *label = bg;
        }
    }
    out.theta = Some(theta);
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct MiouReport {
    /// IoU per class, only for classes present in prediction or ground truth.
    pub per_class: BTreeMap<String, f64>,
    pub miou: f64,
    pub pixel_total: usize,
    pub pixel_ignored: usize,
}

/// Running intersection/union counts, accumulated over many images for a
/// dataset-level mIoU.
#[derive(Clone, Debug)]
pub struct MiouAccumulator {
    class_names: Vec<String>,
    inter: Vec<usize>,
    pred_count: Vec<usize>,
    gt_count: Vec<usize>,
    pixel_total: usize,
    pixel_ignored: usize,
}

impl MiouAccumulator {
    pub fn new(class_names: &[String]) -> Self {
        let n = class_names.len();
        MiouAccumulator {
            class_names: class_names.to_vec(),
            inter: vec![0; n],
            pred_count: vec![0; n],
            gt_count: vec![0; n],
            pixel_total: 0,
            pixel_ignored: 0,
        }
    }

    pub fn add(&mut self, pred: &Mask, gt: &Mask, ignore_value: Option<u8>) -> Result<()> {
        if pred.width != gt.width || pred.height != gt.height {
            return Err(Error::Input(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.width, pred.height, gt.width, gt.height
            )));
        }
        let num_classes = self.class_names.len();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            self.pixel_total += 1;
            if Some(g) == ignore_value {
                self.pixel_ignored += 1;
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if g >= num_classes {
                return Err(Error::Input(format!("ground-truth label {g} out of range")));
            }
            if p >= num_classes {
                return Err(Error::Input(format!("predicted label {p} out of range")));
            }
            self.pred_count[p] += 1;
            self.gt_count[g] += 1;
            if p == g {
                self.inter[p] += 1;
            }
        }
        Ok(())
    }

    /// Per-class IoU over classes with nonzero union, and their mean.
    pub fn report(&self) -> MiouReport {
        let mut per_class = BTreeMap::new();
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in 0..self.class_names.len() {
            let union = self.pred_count[c] + self.gt_count[c] - self.inter[c];
            if union == 0 {
                continue;
            }
            let iou = self.inter[c] as f64 / union as f64;
            per_class.insert(self.class_names[c].clone(), iou);
            sum += iou;
            n += 1;
        }
        MiouReport {
            per_class,
            miou: if n > 0 { sum / n as f64 } else { 0.0 },
            pixel_total: self.pixel_total,
            pixel_ignored: self.pixel_ignored,
        }
    }
}

/// Intersection-over-union on matching label spaces. Pixels whose ground
/// truth equals `ignore_value` are excluded; classes absent from both maps
/// are excluded from the mean.
pub fn miou(
    pred: &Mask,
    gt: &Mask,
    class_names: &[String],
    ignore_value: Option<u8>,
) -> Result<MiouReport> {
    let mut acc = MiouAccumulator::new(class_names);
    acc.add(pred, gt, ignore_value)?;
    Ok(acc.report())
}

/// Classify by dotting the l2-normalized global representation with the
/// class embeddings.
pub fn classify(
    provider: &VisionProvider,
    class_embeds: &ClassEmbeddings,
    image: &Image,
    id: Option<&str>,
) -> Result<(usize, Vec<f32>)> {
    let repr = provider.encode(image, id)?;
    let g = repr.global.data();
    let norm = g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt().max(1e-12);
    let scores: Vec<f32> = class_embeds
        .matrix
        .iter()
        .map(|emb| {
            (g.iter().zip(emb).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / norm) as f32
        })
        .collect();
    let best = scores
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    Ok((best, scores))
}

/// Sweep θ over a grid and report (θ, with-background mIoU) per value,
/// plus the argmax. `results` are foreground segmentations of the images
/// whose ground-truth masks are `gts` (0 = background, else class + 1).
pub fn sweep_theta(
    results: &[SegmentationResult],
    gts: &[&Mask],
    thetas: &[f32],
) -> Result<(f32, Vec<(f32, f64)>)> {
    if results.is_empty() || results.len() != gts.len() {
        return Err(Error::Param("theta sweep needs matching result/mask lists".into()));
    }
    let mut curve = Vec::with_capacity(thetas.len());
    let mut best = (thetas[0], f64::NEG_INFINITY);
    for &theta in thetas {
        let mut total = 0.0;
        for (res, gt) in results.iter().zip(gts) {
            let with_bg = apply_background(res, theta)?;
            let report = with_background_miou(&with_bg, gt)?;
            total += report.miou;
        }
        let mean = total / results.len() as f64;
        curve.push((theta, mean));
        if mean > best.1 {
            best = (theta, mean);
        }
    }
    Ok((best.0, curve))
}

/// Dataset masks use 0 for background and class + 1 for objects. Map to
/// the foreground eval space: class ids 0.., background to the 255 ignore
/// value.
pub fn map_gt_foreground(gt: &Mask) -> Mask {
    let mut out = gt.clone();
    for v in out.data.iter_mut() {
        *v = v.wrapping_sub(1);
    }
    out
}

/// Map a dataset mask to the with-background eval space: class ids 0..,
/// background mapped to `bg_id` (= number of foreground classes).
pub fn map_gt_with_background(gt: &Mask, bg_id: u8) -> Mask {
    let mut out = gt.clone();
    for v in out.data.iter_mut() {
        *v = if *v == 0 { bg_id } else { *v - 1 };
    }
    out
}

/// mIoU including the background class. Ground truth uses 0 for
/// background; predictions use the background id from `apply_background`.
pub fn with_background_miou(result: &SegmentationResult, gt: &Mask) -> Result<MiouReport> {
    let mut names = result.classes.clone();
    names.push("background".into());
    let gt_mapped = map_gt_with_background(gt, result.background_id());
    miou(&result.labels, &gt_mapped, &names, None)
}

/// Foreground-only mIoU: background ground-truth pixels are ignored.
pub fn foreground_miou(result: &SegmentationResult, gt: &Mask) -> Result<MiouReport> {
    miou(&result.labels, &map_gt_foreground(gt), &result.classes, Some(255))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::HandcraftedFeaturizer;

    fn dummy_embeddings(c: usize, d: usize) -> ClassEmbeddings {
        let mut matrix = Vec::new();
        for i in 0..c {
            let mut row = vec![0.0f32; d];
            row[i % d] = 1.0;
            matrix.push(row);
        }
        ClassEmbeddings {
            names: (0..c).map(|i| format!("class{i}")).collect(),
            matrix,
            templates: vec!["a photo of a {}.".into()],
            truncation_warnings: 0,
        }
    }

    fn provider() -> VisionProvider {
        VisionProvider::Handcrafted(HandcraftedFeaturizer::new(8, 12).unwrap())
    }

    fn test_image(w: usize, h: usize) -> Image {
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, [(x * 7 % 256) as u8, (y * 11 % 256) as u8, ((x + y) % 256) as u8]);
            }
        }
        img
    }

    #[test]
    fn window_starts_cover_everything() {
        for (extent, window, stride) in [(64, 64, 32), (96, 64, 32), (100, 48, 16), (64, 64, 64)] {
            let starts = window_starts(extent, window, stride);
            let mut covered = vec![false; extent];
            for &s in &starts {
                for c in covered.iter_mut().skip(s).take(window) {
                    *c = true;
                }
                assert!(s + window <= extent);
            }
            assert!(covered.iter().all(|&c| c), "{extent},{window},{stride}");
        }
    }

    #[test]
    fn single_class_label_map_is_constant_zero() {
        let embeds = dummy_embeddings(1, 12);
        let img = test_image(64, 64);
        let params = SegmentParams { shorter_side: 64, window: 64, stride: 32 };
        let res = segment(&provider(), &embeds, &img, None, &params).unwrap();
        assert!(res.labels.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn one_window_image_invariant_to_stride() {
        let embeds = dummy_embeddings(3, 12);
        let img = test_image(64, 64);
        let mut outputs = Vec::new();
        for stride in [8, 16, 24, 32, 64] {
            let params = SegmentParams { shorter_side: 64, window: 64, stride };
            let res = segment(&provider(), &embeds, &img, None, &params).unwrap();
            outputs.push((res.labels.data.clone(), res.scores.clone()));
        }
        for o in &outputs[1..] {
            assert_eq!(o.0, outputs[0].0);
            assert_eq!(o.1, outputs[0].1);
        }
    }

    #[test]
    fn overlapping_windows_average_consistently() {
        let embeds = dummy_embeddings(3, 12);
        let img = test_image(96, 64);
        let params = SegmentParams { shorter_side: 64, window: 64, stride: 32 };
        let res = segment(&provider(), &embeds, &img, None, &params).unwrap();
        assert_eq!(res.labels.data.len(), 96 * 64);
        assert!(res.scores.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn background_threshold_monotone() {
        let embeds = dummy_embeddings(3, 12);
        let img = test_image(64, 64);
        let params = SegmentParams { shorter_side: 64, window: 64, stride: 32 };
        let res = segment(&provider(), &embeds, &img, None, &params).unwrap();
        let none = apply_background(&res, -1.0).unwrap();
        assert_eq!(none.labels.data, res.labels.data, "theta = -1 relabels nothing");
        let mut last = 0usize;
        for theta in [-1.0, -0.5, 0.0, 0.3, 0.6, 0.9, 1.0] {
            let out = apply_background(&res, theta).unwrap();
            let bg = out.labels.data.iter().filter(|&&v| v == out.background_id()).count();
            assert!(bg >= last, "background count must be monotone in theta");
            last = bg;
        }
        assert!(apply_background(&res, 1.5).is_err());
    }

    #[test]
    fn miou_identities() {
        let names: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
        let mut a = Mask::new(8, 8);
        for (i, v) in a.data.iter_mut().enumerate() {
            *v = (i % 4) as u8;
        }
        let report = miou(&a, &a, &names, None).unwrap();
        assert!((report.miou - 1.0).abs() < 1e-12);
        // Fully disjoint predictions.
        let mut b = a.clone();
        for v in b.data.iter_mut() {
            *v = (*v + 1) % 4;
        }
        let report = miou(&b, &a, &names, None).unwrap();
        assert_eq!(report.miou, 0.0);
    }

    #[test]
    fn miou_half_overlap_analytic() {
        let names = vec!["x".to_string(), "y".to_string()];
        // 4x4: gt has class 0 in left half, pred shifts it by one column:
        // per-pixel overlap 4 of gt 8 and pred 8 -> IoU = 4/12 = 1/3.
        let mut gt = Mask::new(4, 4);
        let mut pred = Mask::new(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                gt.set(x, y, if x < 2 { 0 } else { 1 });
                pred.set(x, y, if (1..3).contains(&x) { 0 } else { 1 });
            }
        }
        let report = miou(&pred, &gt, &names, None).unwrap();
        assert!((report.per_class["x"] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn miou_shape_mismatch() {
        let names = vec!["x".to_string()];
        assert!(miou(&Mask::new(2, 2), &Mask::new(3, 2), &names, None).is_err());
    }

    #[test]
    fn classify_single_class_and_determinism() {
        let embeds = dummy_embeddings(1, 12);
        let img = test_image(64, 64);
        let (c, scores) = classify(&provider(), &embeds, &img, None).unwrap();
        assert_eq!(c, 0);
        assert_eq!(scores.len(), 1);
        let (c2, scores2) = classify(&provider(), &embeds, &img, None).unwrap();
        assert_eq!(c, c2);
        assert_eq!(scores, scores2);
    }

    #[test]
    fn degenerate_image_rejected() {
        let embeds = dummy_embeddings(2, 12);
        let img = test_image(4, 4);
        let params = SegmentParams { shorter_side: 4, window: 4, stride: 4 };
        assert!(segment(&provider(), &embeds, &img, None, &params).is_err());
    }
}
