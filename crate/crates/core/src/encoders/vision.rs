//! Frozen vision feature providers. Three interchangeable backends produce
//! the dense patch-grid representation and a global vector: a deterministic
//! handcrafted featurizer (default), a tiny frozen ViT loaded from a weight
//! file, and memory-resident precomputed features keyed by image id.
//! None of them ever receives gradients.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::img::Image;
use crate::rng::derive_rng;
use crate::tensor::Tensor;
use crate::transformer::{forward_block, normal_tensor, BlockParams, LN_EPS};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

/// Dense per-patch features in grid order plus a global summary vector.
/// Row `r·cols + c` corresponds to image patch (r, c).
#[derive(Clone, Debug)]
pub struct VisionRepr {
    pub dense: Tensor,
    pub global: Tensor,
    pub grid: (usize, usize),
    pub patch_size: usize,
}

#[derive(Clone, Debug)]
pub enum VisionProvider {
    Handcrafted(HandcraftedFeaturizer),
    TinyVit(TinyVit),
    Precomputed(PrecomputedFeatures),
}

impl VisionProvider {
    pub fn d_v(&self) -> usize {
        match self {
            VisionProvider::Handcrafted(h) => h.d_v,
            VisionProvider::TinyVit(v) => v.config.dim,
            VisionProvider::Precomputed(p) => p.d_v,
        }
    }

    pub fn patch_size(&self) -> Option<usize> {
        match self {
            VisionProvider::Handcrafted(h) => Some(h.patch_size),
            VisionProvider::TinyVit(v) => Some(v.config.patch_size),
            VisionProvider::Precomputed(_) => None,
        }
    }

    /// Encode an image. The id is required (and the pixels ignored) by the
    /// precomputed backend.
    pub fn encode(&self, image: &Image, id: Option<&str>) -> Result<VisionRepr> {
        match self {
            VisionProvider::Handcrafted(h) => handcrafted_features(image, h.patch_size, h.d_v),
            VisionProvider::TinyVit(v) => v.encode(image),
            VisionProvider::Precomputed(p) => {
                let id = id.ok_or_else(|| {
                    Error::NotFound("precomputed features require an image id".into())
                })?;
                p.lookup(id)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HandcraftedFeaturizer {
    pub patch_size: usize,
    pub d_v: usize,
}

impl HandcraftedFeaturizer {
    pub fn new(patch_size: usize, d_v: usize) -> Result<Self> {
        if d_v < 12 {
            return Err(Error::Param(format!(
                "handcrafted features need d_v >= 12, got {d_v}"
            )));
        }
        if patch_size == 0 {
            return Err(Error::Param("patch_size must be positive".into()));
        }
        Ok(HandcraftedFeaturizer { patch_size, d_v })
    }
}

/// Per patch: mean RGB (3), RGB standard deviation (3), normalized grid
/// position (2), 4-bin edge-orientation histogram from within-patch
/// gradients (4), zero-padded to d_v. Global is the column mean of the
/// dense rows.
pub fn handcrafted_features(image: &Image, patch_size: usize, d_v: usize) -> Result<VisionRepr> {
    if d_v < 12 {
        return Err(Error::Param(format!(
            "handcrafted features need d_v >= 12, got {d_v}"
        )));
    }
    if patch_size == 0 || image.width % patch_size != 0 || image.height % patch_size != 0 {
        return Err(Error::Shape {
            op: "handcrafted_features",
            lhs: vec![image.width, image.height],
            rhs: vec![patch_size],
        });
    }
    let rows = image.height / patch_size;
    let cols = image.width / patch_size;
    let n_v = rows * cols;
    let mut dense = vec![0.0f32; n_v * d_v];
    for pr in 0..rows {
        for pc in 0..cols {
            let row = &mut dense[(pr * cols + pc) * d_v..(pr * cols + pc) * d_v + d_v];
            patch_descriptor(image, pc * patch_size, pr * patch_size, patch_size, pr, pc, rows, cols, row);
        }
    }
    let mut global = vec![0.0f32; d_v];
    for j in 0..d_v {
        let mut acc = 0.0f64;
        for p in 0..n_v {
            acc += dense[p * d_v + j] as f64;
        }
        global[j] = (acc / n_v as f64) as f32;
    }
    Ok(VisionRepr {
        dense: Tensor::new(vec![n_v, d_v], dense)?,
        global: Tensor::new(vec![d_v], global)?,
        grid: (rows, cols),
        patch_size,
    })
}

#[allow(clippy::too_many_arguments)]
fn patch_descriptor(
    image: &Image,
    x0: usize,
    y0: usize,
    p: usize,
    pr: usize,
    pc: usize,
    rows: usize,
    cols: usize,
    out: &mut [f32],
) {
    let area = (p * p) as f64;
    let mut sum = [0.0f64; 3];
    let mut sum_sq = [0.0f64; 3];
    for y in y0..y0 + p {
        for x in x0..x0 + p {
            let rgb = image.get(x, y);
            for c in 0..3 {
                let v = rgb[c] as f64 / 255.0;
                sum[c] += v;
                sum_sq[c] += v * v;
            }
        }
    }
    for c in 0..3 {
        let mean = sum[c] / area;
        out[c] = mean as f32;
        out[3 + c] = (sum_sq[c] / area - mean * mean).max(0.0).sqrt() as f32;
    }
    out[6] = (pr as f64 + 0.5) as f32 / rows as f32;
    out[7] = (pc as f64 + 0.5) as f32 / cols as f32;

    // Edge-orientation histogram over within-patch central differences;
    // clamping at the patch border keeps each descriptor local to its patch.
    let gray = |x: usize, y: usize| -> f64 {
        let rgb = image.get(x, y);
        (rgb[0] as f64 + rgb[1] as f64 + rgb[2] as f64) / (3.0 * 255.0)
    };
    let mut hist = [0.0f64; 4];
    for y in y0..y0 + p {
        for x in x0..x0 + p {
            let xl = x.max(x0 + 1) - 1;
            let xr = (x + 1).min(x0 + p - 1);
            let yu = y.max(y0 + 1) - 1;
            let yd = (y + 1).min(y0 + p - 1);
            let gx = gray(xr, y) - gray(xl, y);
            let gy = gray(x, yd) - gray(x, yu);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag > 1e-12 {
                let mut angle = gy.atan2(gx);
                if angle < 0.0 {
                    angle += std::f64::consts::PI;
                }
                if angle >= std::f64::consts::PI {
                    angle -= std::f64::consts::PI;
                }
                let bin = ((angle / std::f64::consts::PI) * 4.0) as usize;
                hist[bin.min(3)] += mag;
            }
        }
    }
    // Normalize by the patch side rather than the area: edge mass scales
    // with boundary length, keeping shape cues on par with the color dims.
    for (i, h) in hist.iter().enumerate() {
        out[8 + i] = (h / p as f64) as f32;
    }
    for v in out.iter_mut().skip(12) {
        *v = 0.0;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TinyVitConfig {
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_patches: usize,
}

impl TinyVitConfig {
    pub fn desk() -> Self {
        TinyVitConfig {
            patch_size: 8,
            dim: 32,
            heads: 4,
            layers: 2,
            max_patches: 64,
        }
    }
}

/// A small frozen vision transformer: linear patch embedding, learned
/// positions, a [CLS] token, bidirectional blocks. Weights come from a
/// file and never change.
#[derive(Clone, Debug)]
pub struct TinyVit {
    pub config: TinyVitConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
}

impl TinyVit {
    pub fn init(config: TinyVitConfig, seed: u64) -> Self {
        let mut rng = derive_rng(seed, 0x7669_7369);
        let pdim = config.patch_size * config.patch_size * 3;
        TinyVit {
            config,
            patch_w: normal_tensor(&mut rng, vec![pdim, config.dim], 0.02),
            patch_b: Tensor::zeros(vec![config.dim]),
            cls: normal_tensor(&mut rng, vec![config.dim], 0.02),
            pos_emb: normal_tensor(&mut rng, vec![1 + config.max_patches, config.dim], 0.02),
            blocks: (0..config.layers)
                .map(|_| BlockParams::init(&mut rng, config.dim, 4 * config.dim))
                .collect(),
            lnf_g: Tensor::new(vec![config.dim], vec![1.0; config.dim]).unwrap(),
            lnf_b: Tensor::zeros(vec![config.dim]),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor)) {
        f("vit.patch_w".into(), &self.patch_w);
        f("vit.patch_b".into(), &self.patch_b);
        f("vit.cls".into(), &self.cls);
        f("vit.pos_emb".into(), &self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("vit.block{i}"), f);
        }
        f("vit.lnf.g".into(), &self.lnf_g);
        f("vit.lnf.b".into(), &self.lnf_b);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        f("vit.patch_w".into(), &mut self.patch_w);
        f("vit.patch_b".into(), &mut self.patch_b);
        f("vit.cls".into(), &mut self.cls);
        f("vit.pos_emb".into(), &mut self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("vit.block{i}"), f);
        }
        f("vit.lnf.g".into(), &mut self.lnf_g);
        f("vit.lnf.b".into(), &mut self.lnf_b);
    }

    /// Forward pass on a throwaway tape with frozen leaves; dense rows are
    /// the patch tokens, global is the [CLS] row.
    pub fn encode(&self, image: &Image) -> Result<VisionRepr> {
        let p = self.config.patch_size;
        if p == 0 || image.width % p != 0 || image.height % p != 0 {
            return Err(Error::Shape {
                op: "tiny_vit_encode",
                lhs: vec![image.width, image.height],
                rhs: vec![p],
            });
        }
        let rows = image.height / p;
        let cols = image.width / p;
        let n_v = rows * cols;
        if n_v > self.config.max_patches {
            return Err(Error::Input(format!(
                "{n_v} patches exceed the positional table ({})",
                self.config.max_patches
            )));
        }
        let pdim = p * p * 3;
        let mut patches = vec![0.0f32; n_v * pdim];
        for pr in 0..rows {
            for pc in 0..cols {
                let base = (pr * cols + pc) * pdim;
                let mut k = 0;
                for y in pr * p..(pr + 1) * p {
                    for x in pc * p..(pc + 1) * p {
                        let rgb = image.get(x, y);
                        for c in 0..3 {
                            patches[base + k] = rgb[c] as f32 / 255.0;
                            k += 1;
                        }
                    }
                }
            }
        }
        let mut tape = Tape::new();
        let patches = tape.constant(Tensor::new(vec![n_v, pdim], patches)?);
        let w = tape.constant(self.patch_w.clone());
        let b = tape.constant(self.patch_b.clone());
        let embedded = tape.linear(patches, w, b)?;
        let cls = tape.constant(self.cls.clone().reshaped(vec![1, self.config.dim])?);
        let mut x = tape.concat_rows(&[cls, embedded])?;
        let pos_tensor = tape.constant(self.pos_emb.clone());
        let positions: Vec<usize> = (0..=n_v).collect();
        let pos = tape.gather_rows(pos_tensor, &positions)?;
        x = tape.add(x, pos)?;
        let blocks: Vec<_> = self.blocks.iter().map(|blk| blk.register(&mut tape, false)).collect();
        for blk in &blocks {
            x = forward_block(&mut tape, blk, x, self.config.heads, false)?;
        }
        let g = tape.constant(self.lnf_g.clone());
        let bta = tape.constant(self.lnf_b.clone());
        let normed = tape.layer_norm(x, g, bta, LN_EPS)?;
        let all = tape.value(normed);
        let d = self.config.dim;
        let global = Tensor::new(vec![d], all.data()[..d].to_vec())?;
        let dense = Tensor::new(vec![n_v, d], all.data()[d..].to_vec())?;
        Ok(VisionRepr {
            dense,
            global,
            grid: (rows, cols),
            patch_size: p,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        self.visit(&mut |name, t| tensors.push((name, t.clone())));
        let meta = [
            ("vit.meta.patch_size", self.config.patch_size),
            ("vit.meta.dim", self.config.dim),
            ("vit.meta.heads", self.config.heads),
            ("vit.meta.layers", self.config.layers),
            ("vit.meta.max_patches", self.config.max_patches),
        ];
        for (name, v) in meta {
            tensors.push((name.to_string(), Tensor::scalar(v as f32)));
        }
        crate::checkpoint::write_tensors(path, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let table = crate::checkpoint::read_tensors(path)?;
        let get_meta = |name: &str| -> Result<usize> {
            table
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data()[0] as usize)
                .ok_or_else(|| Error::Format(format!("missing {name}")))
        };
        let config = TinyVitConfig {
            patch_size: get_meta("vit.meta.patch_size")?,
            dim: get_meta("vit.meta.dim")?,
            heads: get_meta("vit.meta.heads")?,
            layers: get_meta("vit.meta.layers")?,
            max_patches: get_meta("vit.meta.max_patches")?,
        };
        let mut vit = TinyVit::init(config, 0);
        let map: HashMap<String, Tensor> = table.into_iter().collect();
        let mut missing = Vec::new();
        vit.visit_mut(&mut |name, t| match map.get(&name) {
            Some(loaded) if loaded.shape() == t.shape() => *t = loaded.clone(),
            Some(loaded) => missing.push(format!(
                "{name}: shape {:?} vs expected {:?}",
                loaded.shape(),
                t.shape()
            )),
            None => missing.push(format!("{name}: missing")),
        });
        if !missing.is_empty() {
            return Err(Error::Format(format!("bad ViT weight file: {}", missing.join("; "))));
        }
        Ok(vit)
    }
}

const FEATURE_MAGIC: &[u8; 4] = b"SZSF";
const FEATURE_VERSION: u32 = 1;

/// Features loaded from an `SZSF` file, keyed by image id.
#[derive(Clone, Debug)]
pub struct PrecomputedFeatures {
    pub n_v: usize,
    pub d_v: usize,
    map: HashMap<String, (Tensor, Tensor)>,
    order: Vec<String>,
}

impl PrecomputedFeatures {
    pub fn new(n_v: usize, d_v: usize) -> Self {
        PrecomputedFeatures {
            n_v,
            d_v,
            map: HashMap::new(),
            order: Vec::new(),
        }
    }

    pub fn insert(&mut self, id: &str, repr: &VisionRepr) -> Result<()> {
        let (n, d) = repr.dense.dims2()?;
        if n != self.n_v || d != self.d_v {
            return Err(Error::Shape {
                op: "precomputed_insert",
                lhs: vec![n, d],
                rhs: vec![self.n_v, self.d_v],
            });
        }
        if self.map.insert(id.to_string(), (repr.dense.clone(), repr.global.clone())).is_none() {
            self.order.push(id.to_string());
        }
        Ok(())
    }

    pub fn lookup(&self, id: &str) -> Result<VisionRepr> {
        let (dense, global) = self
            .map
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("no features for image id {id:?}")))?;
        let side = (self.n_v as f64).sqrt() as usize;
        let grid = if side * side == self.n_v {
            (side, side)
        } else {
            (1, self.n_v)
        };
        Ok(VisionRepr {
            dense: dense.clone(),
            global: global.clone(),
            grid,
            patch_size: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Binary layout: magic, u32 version, u32 count, u32 n_v, u32 d_v, then
    /// per item: u32 id length, id bytes, n_v·d_v dense f32 LE, d_v global
    /// f32 LE.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(FEATURE_MAGIC)?;
        f.write_all(&FEATURE_VERSION.to_le_bytes())?;
        f.write_all(&(self.order.len() as u32).to_le_bytes())?;
        f.write_all(&(self.n_v as u32).to_le_bytes())?;
        f.write_all(&(self.d_v as u32).to_le_bytes())?;
        for id in &self.order {
            let (dense, global) = &self.map[id];
            f.write_all(&(id.len() as u32).to_le_bytes())?;
            f.write_all(id.as_bytes())?;
            for &v in dense.data() {
                f.write_all(&v.to_le_bytes())?;
            }
            for &v in global.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != FEATURE_MAGIC {
            return Err(Error::Format(format!("bad feature-file magic {magic:?}")));
        }
        let version = read_u32(&mut f)?;
        if version != FEATURE_VERSION {
            return Err(Error::Version {
                expected: FEATURE_VERSION,
                found: version,
            });
        }
        let count = read_u32(&mut f)? as usize;
        let n_v = read_u32(&mut f)? as usize;
        let d_v = read_u32(&mut f)? as usize;
        let mut out = PrecomputedFeatures::new(n_v, d_v);
        for _ in 0..count {
            let id_len = read_u32(&mut f)? as usize;
            let mut id_bytes = vec![0u8; id_len];
            f.read_exact(&mut id_bytes)?;
            let id = String::from_utf8(id_bytes)
                .map_err(|_| Error::Format("non-utf8 image id".into()))?;
            let dense = read_f32s(&mut f, n_v * d_v)?;
            let global = read_f32s(&mut f, d_v)?;
            out.map.insert(
                id.clone(),
                (
                    Tensor::new(vec![n_v, d_v], dense)?,
                    Tensor::new(vec![d_v], global)?,
                ),
            );
            out.order.push(id);
        }
        Ok(out)
    }
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    f.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32s(f: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    f.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_image(w: usize, h: usize, v: u8) -> Image {
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, [v, v, v]);
            }
        }
        img
    }

    #[test]
    fn uniform_image_rows_identical_in_color_dims() {
        let img = gray_image(32, 32, 128);
        let repr = handcrafted_features(&img, 8, 16).unwrap();
        let (n, d) = repr.dense.dims2().unwrap();
        assert_eq!((n, d), (16, 16));
        let first = &repr.dense.data()[..6];
        for p in 1..n {
            assert_eq!(&repr.dense.data()[p * d..p * d + 6], first);
        }
    }

    #[test]
    fn solid_color_patch_descriptor() {
        let mut img = Image::new(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                img.set(x, y, [255, 0, 0]);
            }
        }
        let repr = handcrafted_features(&img, 8, 12).unwrap();
        let d = repr.dense.data();
        assert!((d[0] - 1.0).abs() < 1e-6);
        assert_eq!(&d[1..6], &[0.0; 5]);
        assert_eq!(&d[8..12], &[0.0; 4]);
    }

    #[test]
    fn global_is_column_mean() {
        let mut img = Image::new(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                img.set(x, y, [(x * 15) as u8, (y * 15) as u8, 77]);
            }
        }
        let repr = handcrafted_features(&img, 8, 12).unwrap();
        let (n, d) = repr.dense.dims2().unwrap();
        for j in 0..d {
            let mean: f64 = (0..n).map(|p| repr.dense.data()[p * d + j] as f64).sum::<f64>() / n as f64;
            assert!((repr.global.data()[j] as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn same_color_different_position_differs_only_in_position_dims() {
        let mut img = gray_image(32, 32, 0);
        for y in 0..8 {
            for x in 0..8 {
                img.set(x, y, [10, 200, 30]);
                img.set(x + 24, y + 24, [10, 200, 30]);
            }
        }
        let repr = handcrafted_features(&img, 8, 14).unwrap();
        let d = 14;
        let a = &repr.dense.data()[0..d];
        let b = &repr.dense.data()[15 * d..16 * d];
        assert_eq!(&a[..6], &b[..6]);
        assert_ne!(&a[6..8], &b[6..8]);
        assert_eq!(&a[8..], &b[8..]);
    }

    #[test]
    fn painting_one_patch_changes_exactly_one_row() {
        let base = gray_image(32, 32, 100);
        let mut painted = base.clone();
        for y in 8..16 {
            for x in 16..24 {
                painted.set(x, y, [200, 10, 10]);
            }
        }
        let a = handcrafted_features(&base, 8, 16).unwrap();
        let b = handcrafted_features(&painted, 8, 16).unwrap();
        let (n, d) = a.dense.dims2().unwrap();
        let mut changed = Vec::new();
        for p in 0..n {
            if a.dense.data()[p * d..(p + 1) * d] != b.dense.data()[p * d..(p + 1) * d] {
                changed.push(p);
            }
        }
        assert_eq!(changed, vec![1 * 4 + 2]);
    }

    #[test]
    fn indivisible_dimensions_error() {
        let img = gray_image(30, 32, 10);
        assert!(handcrafted_features(&img, 8, 16).is_err());
    }

    #[test]
    fn d_v_too_small_is_param_error() {
        let img = gray_image(16, 16, 10);
        assert!(matches!(
            handcrafted_features(&img, 8, 11),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn tiny_vit_deterministic_and_shaped() {
        let vit = TinyVit::init(TinyVitConfig::desk(), 9);
        let img = gray_image(64, 64, 90);
        let a = vit.encode(&img).unwrap();
        let b = vit.encode(&img).unwrap();
        assert_eq!(a.dense.data(), b.dense.data());
        assert_eq!(a.grid, (8, 8));
        assert_eq!(a.global.shape(), &[32]);
    }

    #[test]
    fn precomputed_round_trip_and_lookup_error() {
        let img = gray_image(16, 16, 50);
        let repr = handcrafted_features(&img, 8, 12).unwrap();
        let mut pre = PrecomputedFeatures::new(4, 12);
        pre.insert("scene_a", &repr).unwrap();
        let dir = std::env::temp_dir().join("conceptseg_szsf_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("features.szsf");
        pre.save(&path).unwrap();
        let loaded = PrecomputedFeatures::load(&path).unwrap();
        let back = loaded.lookup("scene_a").unwrap();
        assert_eq!(back.dense.data(), repr.dense.data());
        assert_eq!(back.global.data(), repr.global.data());
        assert!(loaded.lookup("scene_b").is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
