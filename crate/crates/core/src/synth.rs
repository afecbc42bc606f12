//! Deterministic synthetic corpus: colored shapes on textured gray
//! backgrounds, pixel-exact class masks, and templated captions. Plays the
//! role of the image-caption training set and the segmentation benchmark.

use crate::defaults;
use crate::error::{Error, Result};
use crate::img::{Image, Mask};
use crate::rng::{derive_rng, pixel_hash};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];

    pub fn word(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    /// Hard-edged membership test relative to a center and half-extent.
    fn contains(&self, dx: i64, dy: i64, h: i64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= h * h,
            ShapeKind::Square => dx.abs() <= h && dy.abs() <= h,
            ShapeKind::Triangle => {
                // Upward triangle: width grows linearly from apex to base.
                if dy < -h || dy > h {
                    return false;
                }
                let halfwidth = (dy + h) / 2;
                dx.abs() <= halfwidth
            }
            ShapeKind::Cross => {
                let arm = (h / 3).max(1);
                (dx.abs() <= arm && dy.abs() <= h) || (dy.abs() <= arm && dx.abs() <= h)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [u8; 3],
}

fn color(name: &str, rgb: [u8; 3]) -> NamedColor {
    NamedColor {
        name: name.to_string(),
        rgb,
    }
}

/// One renderable class. With a fixed color the class is the
/// color-shape pair ("red circle"); without, the shape word alone and the
/// object color is a sampled distractor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneClass {
    pub shape: ShapeKind,
    pub color: Option<NamedColor>,
}

impl SceneClass {
    pub fn concept(&self) -> String {
        match &self.color {
            Some(c) => format!("{} {}", c.name, self.shape.word()),
            None => self.shape.word().to_string(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<SceneClass>,
    /// Distractor palette for classes without a fixed color.
    pub palette: Vec<NamedColor>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Shape extent in pixels, inclusive.
    pub size_range: (usize, usize),
    pub background_grays: Vec<u8>,
    pub noise_amplitude: i16,
    pub seed: u64,
}

fn default_palette() -> Vec<NamedColor> {
    vec![
        color("red", [220, 40, 40]),
        color("blue", [40, 70, 220]),
        color("green", [40, 180, 70]),
        color("yellow", [230, 220, 50]),
        color("purple", [160, 60, 200]),
        color("teal", [40, 190, 190]),
        color("pink", [240, 130, 190]),
    ]
}

impl SceneSpec {
    /// Four shape classes; colors are free-floating distractor adjectives.
    pub fn easy(seed: u64) -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            classes: ShapeKind::ALL
                .iter()
                .map(|&shape| SceneClass { shape, color: None })
                .collect(),
            palette: default_palette(),
            min_objects: 1,
            max_objects: 3,
            size_range: (12, 24),
            background_grays: vec![96, 128, 160, 192],
            noise_amplitude: 4,
            seed,
        }
    }

    /// Eight color-shape classes; the color word is part of the concept.
    pub fn hard(seed: u64) -> Self {
        let red = color("red", [220, 40, 40]);
        let blue = color("blue", [40, 70, 220]);
        let green = color("green", [40, 180, 70]);
        let yellow = color("yellow", [230, 220, 50]);
        let pairs = [
            (ShapeKind::Circle, red.clone()),
            (ShapeKind::Circle, blue.clone()),
            (ShapeKind::Square, green.clone()),
            (ShapeKind::Square, yellow.clone()),
            (ShapeKind::Triangle, red),
            (ShapeKind::Triangle, blue),
            (ShapeKind::Cross, green),
            (ShapeKind::Cross, yellow),
        ];
        SceneSpec {
            width: 64,
            height: 64,
            classes: pairs
                .into_iter()
                .map(|(shape, c)| SceneClass {
                    shape,
                    color: Some(c),
                })
                .collect(),
            palette: default_palette(),
            min_objects: 1,
            max_objects: 2,
            size_range: (12, 24),
            background_grays: vec![96, 128, 160, 192],
            noise_amplitude: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Param("scene spec has no classes".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Param("bad objects-per-scene range".into()));
        }
        if self.size_range.0 > self.size_range.1 {
            return Err(Error::Param("bad size range".into()));
        }
        if self.size_range.1 + 4 >= self.width.min(self.height) {
            return Err(Error::Param(format!(
                "objects up to {} px cannot be placed on a {}x{} canvas",
                self.size_range.1, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Class names in id order (mask value = index + 1).
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.concept()).collect()
    }

    /// The bundled bank/lexicon pair matching this spec's concept mode.
    pub fn is_compound_mode(&self) -> bool {
        self.classes.iter().any(|c| c.color.is_some())
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
    pub caption: String,
}

struct Placed {
    class_id: usize,
    shape: ShapeKind,
    rgb: [u8; 3],
    color_word: Option<String>,
    size_word: Option<&'static str>,
    cx: i64,
    cy: i64,
    h: i64,
}

/// Deterministic scene for (spec.seed, index).
pub fn generate_scene(spec: &SceneSpec, index: u64, id: &str) -> Result<Scene> {
    spec.validate()?;
    let mut rng = derive_rng(spec.seed, index);
    let noise_seed = pixel_hash(spec.seed, index, 0x6e6f6973);

    let target = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<Placed> = Vec::new();
    for _ in 0..target {
        let class_id = rng.gen_range(0..spec.classes.len());
        let class = &spec.classes[class_id];
        let size = rng.gen_range(spec.size_range.0..=spec.size_range.1);
        let h = (size / 2) as i64;
        // Fixed-color classes always name their color (it is part of the
        // concept); distractor colors are mentioned only half the time so
        // captions cannot lean on color alone.
        let (name, rgb) = match &class.color {
            Some(c) => (Some(c.name.clone()), c.rgb),
            None => {
                let c = &spec.palette[rng.gen_range(0..spec.palette.len())];
                let mention: bool = rng.gen_bool(0.5);
                (mention.then(|| c.name.clone()), c.rgb)
            }
        };
        let size_word = if size >= 20 {
            Some("big")
        } else if size <= 15 {
            Some("small")
        } else {
            None
        };
        let mut ok = false;
        for _try in 0..100 {
            let cx = rng.gen_range(h + 1..spec.width as i64 - h - 1);
            let cy = rng.gen_range(h + 1..spec.height as i64 - h - 1);
            let margin = 2;
            let clear = placed.iter().all(|p| {
                (cx - p.cx).abs() > h + p.h + margin || (cy - p.cy).abs() > h + p.h + margin
            });
            if clear {
                placed.push(Placed {
                    class_id,
                    shape: class.shape,
                    rgb,
                    color_word: name.clone(),
                    size_word,
                    cx,
                    cy,
                    h,
                });
                ok = true;
                break;
            }
        }
        if !ok {
            // Placement saturated; render fewer objects.
            break;
        }
    }
    if placed.is_empty() {
        return Err(Error::Param(
            "could not place any object; spec too crowded".into(),
        ));
    }

    // Background with low-amplitude deterministic noise, then hard shapes.
    let gray = spec.background_grays[rng.gen_range(0..spec.background_grays.len())];
    let mut image = Image::new(spec.width, spec.height);
    let mut mask = Mask::new(spec.width, spec.height);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let n = (pixel_hash(noise_seed, x as u64, y as u64) % (2 * spec.noise_amplitude as u64 + 1))
                as i16
                - spec.noise_amplitude;
            let v = (gray as i16 + n).clamp(0, 255) as u8;
            image.set(x, y, [v, v, v]);
        }
    }
    for p in &placed {
        for y in (p.cy - p.h).max(0)..=(p.cy + p.h).min(spec.height as i64 - 1) {
            for x in (p.cx - p.h).max(0)..=(p.cx + p.h).min(spec.width as i64 - 1) {
                if p.shape.contains(x - p.cx, y - p.cy, p.h) {
                    image.set(x as usize, y as usize, p.rgb);
                    mask.set(x as usize, y as usize, (p.class_id + 1) as u8);
                }
            }
        }
    }

    // Caption: prefix + object phrases joined by a single connective.
    let prefixes = ["a photo of ", "a picture of ", "the scene shows ", ""];
    let joiners = [" and ", " next to ", " above "];
    let prefix = prefixes[rng.gen_range(0..prefixes.len())];
    let joiner = joiners[rng.gen_range(0..joiners.len())];
    let phrases: Vec<String> = placed
        .iter()
        .map(|p| {
            let mut s = String::from("a ");
            if let Some(sz) = p.size_word {
                s.push_str(sz);
                s.push(' ');
            }
            if let Some(color) = &p.color_word {
                s.push_str(color);
                s.push(' ');
            }
            s.push_str(p.shape.word());
            s
        })
        .collect();
    let caption = format!("{prefix}{}", phrases.join(joiner));

    Ok(Scene {
        id: id.to_string(),
        image,
        mask,
        caption,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    pub caption: String,
    pub split: String,
}

/// Write a full dataset: PPM images, PGM masks, a JSON Lines manifest,
/// `classes.txt`, and the bank/lexicon the captions were generated under.
pub fn generate_dataset(
    spec: &SceneSpec,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;
    let mut entries = Vec::new();
    let mut manifest = String::new();
    let total = n_train + n_val + n_test;
    for index in 0..total {
        let split = if index < n_train {
            "train"
        } else if index < n_train + n_val {
            "val"
        } else {
            "test"
        };
        let id = format!("{split}_{index:06}");
        let scene = generate_scene(spec, index as u64, &id)?;
        let image_path = format!("images/{id}.ppm");
        let mask_path = format!("masks/{id}.pgm");
        scene.image.save_ppm(&out_dir.join(&image_path))?;
        scene.mask.save_pgm(&out_dir.join(&mask_path))?;
        let entry = ManifestEntry {
            id,
            image_path,
            mask_path,
            caption: scene.caption,
            split: split.to_string(),
        };
        manifest.push_str(&serde_json::to_string(&entry).expect("manifest serializes"));
        manifest.push('\n');
        entries.push(entry);
    }
    std::fs::write(out_dir.join("manifest.jsonl"), manifest)?;
    std::fs::write(
        out_dir.join("classes.txt"),
        spec.class_names().join("\n") + "\n",
    )?;
    let (bank, lexicon) = if spec.is_compound_mode() {
        (defaults::BANK_HARD, defaults::LEXICON_HARD)
    } else {
        (defaults::BANK_EASY, defaults::LEXICON_EASY)
    };
    std::fs::write(out_dir.join("bank.txt"), bank)?;
    std::fs::write(out_dir.join("lexicon.txt"), lexicon)?;
    std::fs::write(
        out_dir.join("spec.json"),
        serde_json::to_string_pretty(spec).expect("spec serializes"),
    )?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(dir.join("manifest.jsonl"))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub entry: ManifestEntry,
    pub image: Image,
    pub mask: Mask,
}

pub fn load_split(dir: &Path, split: &str) -> Result<Vec<LoadedScene>> {
    let mut out = Vec::new();
    for entry in read_manifest(dir)? {
        if entry.split != split {
            continue;
        }
        let image = Image::load_ppm(&dir.join(&entry.image_path))?;
        let mask = Mask::load_pgm(&dir.join(&entry.mask_path))?;
        out.push(LoadedScene { entry, image, mask });
    }
    Ok(out)
}

pub fn read_class_names(dir: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(dir.join("classes.txt"))?;
    Ok(text.lines().map(|l| l.to_string()).filter(|l| !l.is_empty()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{extract_concepts, ExtractOptions};

    #[test]
    fn single_object_scene_shape() {
        let mut spec = SceneSpec::easy(5);
        spec.max_objects = 1;
        let scene = generate_scene(&spec, 0, "s0").unwrap();
        let mut values: Vec<u8> = scene.mask.data.clone();
        values.sort_unstable();
        values.dedup();
        assert_eq!(values.len(), 2, "background plus exactly one class");
        let bank = crate::defaults::bank_easy();
        let lex = crate::defaults::lexicon_easy();
        let vocab = crate::text::BpeVocab::train(&[scene.caption.clone()], 0).unwrap();
        let tc = extract_concepts(&vocab, &lex, &bank, &scene.caption, ExtractOptions::default());
        assert_eq!(tc.concepts.len(), 1);
    }

    #[test]
    fn deterministic_scene_generation() {
        let spec = SceneSpec::easy(42);
        let a = generate_scene(&spec, 7, "x").unwrap();
        let b = generate_scene(&spec, 7, "x").unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.caption, b.caption);
        let c = generate_scene(&spec, 8, "y").unwrap();
        assert_ne!(a.image.data, c.image.data);
    }

    #[test]
    fn oversized_objects_rejected() {
        let mut spec = SceneSpec::easy(1);
        spec.size_range = (70, 80);
        assert!(generate_scene(&spec, 0, "s").is_err());
    }

    #[test]
    fn caption_concepts_match_mask_classes() {
        for mode in [false, true] {
            let spec = if mode { SceneSpec::hard(11) } else { SceneSpec::easy(11) };
            let (bank, lex) = if mode {
                (crate::defaults::bank_hard(), crate::defaults::lexicon_hard())
            } else {
                (crate::defaults::bank_easy(), crate::defaults::lexicon_easy())
            };
            let names = spec.class_names();
            let captions: Vec<String> = (0..200)
                .map(|i| generate_scene(&spec, i, "s").unwrap().caption)
                .collect();
            let vocab = crate::text::BpeVocab::train(&captions, 60).unwrap();
            for i in 0..200u64 {
                let scene = generate_scene(&spec, i, "s").unwrap();
                let tc = extract_concepts(&vocab, &lex, &bank, &scene.caption, ExtractOptions::default());
                let extracted: std::collections::BTreeSet<String> =
                    tc.concepts.iter().map(|c| c.concept.clone()).collect();
                let rendered: std::collections::BTreeSet<String> = scene
                    .mask
                    .data
                    .iter()
                    .filter(|&&v| v > 0)
                    .map(|&v| names[(v - 1) as usize].clone())
                    .collect();
                assert_eq!(extracted, rendered, "scene {i} caption {:?}", scene.caption);
            }
        }
    }
}
