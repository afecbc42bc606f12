//! Flat key=value run configuration. Every key has a default, can be set
//! in a config file (`key = value` lines, `#` comments), and can be
//! overridden by a `--key value` flag of the same name. Unknown keys are
//! rejected; the fully-resolved map is echoed into every output artifact.

use conceptseg::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

/// (key, default, help)
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("seed", "0", "master RNG seed"),
    ("out", "", "output directory"),
    ("data", "", "dataset directory (manifest.jsonl etc.)"),
    ("split", "test", "dataset split for evaluation"),
    ("provider", "handcrafted", "vision provider: handcrafted|tinyvit|precomputed"),
    ("vit_path", "", "tiny frozen ViT weight file"),
    ("vit_init", "false", "create the ViT weight file from the seed if missing"),
    ("features_path", "", "precomputed feature file (SZSF)"),
    ("patch_size", "8", "vision patch size in pixels"),
    ("d_v", "32", "vision feature dimension"),
    ("d_t", "32", "text embedding dimension"),
    ("text_layers", "2", "text transformer blocks"),
    ("text_heads", "4", "text attention heads"),
    ("context", "64", "text context length"),
    ("vocab_merges", "160", "BPE merges when training the tokenizer"),
    ("epochs", "5", "training epochs"),
    ("batch", "256", "global batch size"),
    ("lr", "0.002", "peak learning rate (scaled by batch/256)"),
    ("warmup_frac", "0.1", "fraction of steps for linear warmup"),
    ("weight_decay", "0.2", "decoupled weight decay"),
    ("beta1", "0.9", "Adam beta1"),
    ("beta2", "0.98", "Adam beta2"),
    ("adam_eps", "1e-6", "Adam epsilon"),
    ("clip_grad", "0", "global-norm gradient clip (0 = off)"),
    ("lambda", "0.05", "concept loss weight"),
    ("tau", "0.1", "similarity pooling temperature"),
    ("logit_init", "2.6592600", "initial log logit scale"),
    ("logit_max", "4.6051702", "maximum log logit scale"),
    ("proj_bias", "true", "text-to-vision projection bias"),
    ("checkpoint_every", "0", "checkpoint cadence in steps (0 = end only)"),
    ("shorter_side", "64", "inference resize target for the shorter side"),
    ("window", "64", "sliding window size"),
    ("stride", "32", "sliding window stride"),
    ("theta", "", "background threshold in [-1,1] (empty = off)"),
    ("theta_sweep", "false", "sweep theta on the val split first"),
    ("with_background", "false", "report with-background mIoU"),
    ("templates", "desk", "prompt templates: desk|full|<path>"),
    ("bank", "", "concept bank file (default: dataset bank.txt)"),
    ("lexicon", "", "POS lexicon file (default: dataset lexicon.txt)"),
    ("plural_fold", "false", "fold plural concepts onto singular bank entries"),
    ("mode", "easy", "synthetic corpus mode: easy|hard"),
    ("img_size", "64", "synthetic scene size"),
    ("min_objects", "1", "minimum objects per scene"),
    ("max_objects", "3", "maximum objects per scene"),
    ("n_train", "2000", "training scenes"),
    ("n_val", "200", "validation scenes"),
    ("n_test", "200", "test scenes"),
    ("checkpoint", "", "checkpoint file for evaluation"),
    ("vocab", "", "tokenizer vocabulary file"),
    ("features_out", "", "write an SZSF feature file during synth"),
    ("overlays", "false", "write per-image overlays during eval-seg"),
    ("labels_out", "", "directory for predicted label maps"),
    ("captions", "", "caption file for the concepts command"),
    ("concepts_out", "", "output JSONL for the concepts command (empty = stdout)"),
    ("images", "", "comma-separated image paths for visualize"),
    ("visualize_count", "4", "scenes to visualize when reading a dataset"),
    ("resolutions", "1,2,4", "inference scale factors for visualize"),
    ("oracle", "false", "eval-seg sanity mode: score ground truth as prediction"),
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: SCHEMA
                .iter()
                .map(|(k, d, _)| (k.to_string(), d.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        if !self.values.contains_key(&key) {
            return Err(Error::Config(format!("unknown configuration key {key:?}")));
        }
        self.values.insert(key, value.to_string());
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key = value", lineno + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("schema key {key} missing"))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.str(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key}: expected an integer, got {:?}", self.str(key))))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.str(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key}: expected an integer, got {:?}", self.str(key))))
    }

    pub fn f32(&self, key: &str) -> Result<f32> {
        self.str(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key}: expected a number, got {:?}", self.str(key))))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.str(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key}: expected a number, got {:?}", self.str(key))))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.str(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::Config(format!("{key}: expected a boolean, got {other:?}"))),
        }
    }

    pub fn optional(&self, key: &str) -> Option<&str> {
        let v = self.str(key);
        if v.is_empty() {
            None
        } else {
            Some(v)
        }
    }

    /// Fully-resolved configuration for echoing into output artifacts.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.values
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect(),
        )
    }

    pub fn usage() -> String {
        let mut s = String::from("configuration keys (set in --config files or as --<key> <value>):\n");
        for (k, d, help) in SCHEMA {
            s.push_str(&format!("  --{k:<18} {help} [default: {d:?}]\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let mut c = RunConfig::default();
        assert_eq!(c.usize("batch").unwrap(), 256);
        c.set("batch", "64").unwrap();
        assert_eq!(c.usize("batch").unwrap(), 64);
        c.set("shorter-side", "448").unwrap();
        assert_eq!(c.usize("shorter_side").unwrap(), 448);
        assert!(c.set("no_such_key", "1").is_err());
    }

    #[test]
    fn echo_is_sorted_and_complete() {
        let c = RunConfig::default();
        let echo = c.echo();
        let obj = echo.as_object().unwrap();
        assert_eq!(obj.len(), SCHEMA.len());
        let keys: Vec<_> = obj.keys().collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# run\nbatch = 32\nlambda = 0.1  # weight\n").unwrap();
        let mut c = RunConfig::default();
        c.load_file(&path).unwrap();
        assert_eq!(c.usize("batch").unwrap(), 32);
        assert_eq!(c.f32("lambda").unwrap(), 0.1);
        std::fs::write(&path, "bogus_key = 1\n").unwrap();
        assert!(RunConfig::default().load_file(&path).is_err());
    }
}
