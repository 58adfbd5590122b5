//! Flat `key = value` run configuration over a closed schema.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{DatError, Result};
use crate::pipeline::SamplerSettings;
use crate::synth::SynthSpec;
use crate::trainer::TrainConfig;

/// Every accepted key with a one-line description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed of data synthesis and training"),
    ("num_classes", "downstream classes C"),
    ("n_per_class", "labeled samples per class"),
    ("bank_size", "pre-training bank records m"),
    ("image_dim", "raw image dimension"),
    ("feat_dim", "embedding dimension d"),
    ("class_sep", "distance between orthogonal class prototypes"),
    ("rho_in", "fraction of bank records from downstream classes"),
    ("p_weak", "probability a caption is swapped for a distractor's"),
    ("noise_sigma", "per-coordinate image noise"),
    ("num_distractors", "out-of-distribution prototypes"),
    ("frozen_seed", "seed of the frozen image/text projections"),
    ("modality_gap", "text-tower perturbation relative to the image tower"),
    ("num_templates", "text templates averaged per class"),
    ("template_jitter", "noise applied to templates after the first"),
    ("holdout_per_class", "held-out evaluation samples per class"),
    ("stage1_multiplier", "Label Bank size as a multiple of n"),
    ("stage2_keep", "fraction of the Label Bank kept by stage 2"),
    ("chunk_rows", "bank rows scored per similarity block"),
    ("memory_budget_bytes", "working-memory budget of the sampler"),
    ("batch_size", "labeled samples B per step"),
    ("mu", "unlabeled samples per labeled sample"),
    ("t_thresh", "pseudo-label confidence threshold"),
    ("epochs", "training epochs"),
    ("lr", "SGD learning rate"),
    ("momentum", "SGD momentum"),
    ("hidden_dim", "encoder hidden width"),
    ("warm_start", "initialize the encoder from the frozen projection"),
    ("tau", "contrastive temperature"),
    ("eta", "weight of the pseudo-label loss"),
    ("lambda", "weight of the contrastive loss"),
    ("anchor_reduction", "contrastive reduction over anchors: sum or mean"),
    ("sigma_weak", "Gaussian noise of weak views"),
    ("sigma_strong", "Gaussian noise of strong views"),
    ("mask_frac", "fraction of coordinates zeroed in strong views"),
    ("output_dir", "directory for generated files and run outputs"),
    ("bank", "DATB bank path (empty: <output_dir>/bank.datb)"),
    ("dataset", "DATD labeled set (empty: <output_dir>/dataset.datd)"),
    ("holdout", "DATD evaluation set (empty: <output_dir>/holdout.datd)"),
    ("selection", "sample CSV (empty: <output_dir>/selection.csv)"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub sampler: SamplerSettings,
    pub holdout_per_class: usize,
    pub output_dir: PathBuf,
    pub bank: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub holdout: Option<PathBuf>,
    pub selection: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthSpec::default(),
            train: TrainConfig::default(),
            sampler: SamplerSettings::default(),
            holdout_per_class: 100,
            output_dir: PathBuf::from("dat-out"),
            bank: None,
            dataset: None,
            holdout: None,
            selection: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DatError::Config(format!("{key}: cannot parse {value:?}")))
}

fn path_value(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let s = &mut self.synth;
        let t = &mut self.train;
        match key {
            "seed" => {
                s.seed = parse(key, v)?;
                t.seed = s.seed;
            }
            "num_classes" => s.num_classes = parse(key, v)?,
            "n_per_class" => s.n_per_class = parse(key, v)?,
            "bank_size" => s.bank_size = parse(key, v)?,
            "image_dim" => s.image_dim = parse(key, v)?,
            "feat_dim" => s.feat_dim = parse(key, v)?,
            "class_sep" => s.class_sep = parse(key, v)?,
            "rho_in" => s.rho_in = parse(key, v)?,
            "p_weak" => s.p_weak = parse(key, v)?,
            "noise_sigma" => s.noise_sigma = parse(key, v)?,
            "num_distractors" => s.num_distractors = parse(key, v)?,
            "frozen_seed" => s.frozen_seed = parse(key, v)?,
            "modality_gap" => s.modality_gap = parse(key, v)?,
            "num_templates" => s.num_templates = parse(key, v)?,
            "template_jitter" => s.template_jitter = parse(key, v)?,
            "holdout_per_class" => self.holdout_per_class = parse(key, v)?,
            "stage1_multiplier" => self.sampler.stage1_multiplier = parse(key, v)?,
            "stage2_keep" => self.sampler.stage2_keep = parse(key, v)?,
            "chunk_rows" => self.sampler.plan.chunk_rows = parse(key, v)?,
            "memory_budget_bytes" => self.sampler.plan.memory_budget_bytes = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "mu" => t.mu = parse(key, v)?,
            "t_thresh" => t.t_thresh = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "momentum" => t.momentum = parse(key, v)?,
            "hidden_dim" => t.hidden_dim = parse(key, v)?,
            "warm_start" => t.warm_start = parse(key, v)?,
            "tau" => t.loss.tau = parse(key, v)?,
            "eta" => t.loss.eta = parse(key, v)?,
            "lambda" => t.loss.lambda = parse(key, v)?,
            "anchor_reduction" => t.loss.anchor_reduction = v.parse()?,
            "sigma_weak" => t.augment.sigma_weak = parse(key, v)?,
            "sigma_strong" => t.augment.sigma_strong = parse(key, v)?,
            "mask_frac" => t.augment.mask_frac = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "bank" => self.bank = opt_path(v),
            "dataset" => self.dataset = opt_path(v),
            "holdout" => self.holdout = opt_path(v),
            "selection" => self.selection = opt_path(v),
            other => return Err(DatError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = &self.synth;
        let t = &self.train;
        Some(match key {
            "seed" => s.seed.to_string(),
            "num_classes" => s.num_classes.to_string(),
            "n_per_class" => s.n_per_class.to_string(),
            "bank_size" => s.bank_size.to_string(),
            "image_dim" => s.image_dim.to_string(),
            "feat_dim" => s.feat_dim.to_string(),
            "class_sep" => s.class_sep.to_string(),
            "rho_in" => s.rho_in.to_string(),
            "p_weak" => s.p_weak.to_string(),
            "noise_sigma" => s.noise_sigma.to_string(),
            "num_distractors" => s.num_distractors.to_string(),
            "frozen_seed" => s.frozen_seed.to_string(),
            "modality_gap" => s.modality_gap.to_string(),
            "num_templates" => s.num_templates.to_string(),
            "template_jitter" => s.template_jitter.to_string(),
            "holdout_per_class" => self.holdout_per_class.to_string(),
            "stage1_multiplier" => self.sampler.stage1_multiplier.to_string(),
            "stage2_keep" => self.sampler.stage2_keep.to_string(),
            "chunk_rows" => self.sampler.plan.chunk_rows.to_string(),
            "memory_budget_bytes" => self.sampler.plan.memory_budget_bytes.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "mu" => t.mu.to_string(),
            "t_thresh" => t.t_thresh.to_string(),
            "epochs" => t.epochs.to_string(),
            "lr" => t.lr.to_string(),
            "momentum" => t.momentum.to_string(),
            "hidden_dim" => t.hidden_dim.to_string(),
            "warm_start" => t.warm_start.to_string(),
            "tau" => t.loss.tau.to_string(),
            "eta" => t.loss.eta.to_string(),
            "lambda" => t.loss.lambda.to_string(),
            "anchor_reduction" => t.loss.anchor_reduction.as_str().to_string(),
            "sigma_weak" => t.augment.sigma_weak.to_string(),
            "sigma_strong" => t.augment.sigma_strong.to_string(),
            "mask_frac" => t.augment.mask_frac.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "bank" => path_value(&self.bank),
            "dataset" => path_value(&self.dataset),
            "holdout" => path_value(&self.holdout),
            "selection" => path_value(&self.selection),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment. A key given twice
    /// in one text is an error.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| DatError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(DatError::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            seen.push(key);
            self.set(key, value)
                .map_err(|e| DatError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DatError::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies `key=value` overrides such as those given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| DatError::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.sampler.plan.validate()?;
        if !(self.sampler.stage1_multiplier > 0.0) || !(self.sampler.stage2_keep > 0.0) {
            return Err(DatError::Config("stage1_multiplier and stage2_keep must be > 0".into()));
        }
        if self.holdout_per_class == 0 {
            return Err(DatError::Config("holdout_per_class must be >= 1".into()));
        }
        Ok(())
    }

    /// Every effective key, one per line, re-loadable with [`RunConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (key, _) in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).unwrap_or_default());
        }
        s
    }

    /// The same run with every input path made explicit, so a copy written
    /// elsewhere still reads the same files. The held-out path is pinned only
    /// when it was given or exists.
    pub fn pinned(&self) -> RunConfig {
        let mut out = self.clone();
        out.bank = Some(self.bank_path());
        out.dataset = Some(self.dataset_path());
        out.selection = Some(self.selection_path());
        if self.holdout.is_some() || self.holdout_path().exists() {
            out.holdout = Some(self.holdout_path());
        }
        out
    }

    /// Writes `dir/resolved-config` with pinned paths.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| DatError::io(dir, e))?;
        let path = dir.join("resolved-config");
        fs::write(&path, self.pinned().to_text()).map_err(|e| DatError::io(&path, e))?;
        Ok(path)
    }

    pub fn bank_path(&self) -> PathBuf {
        self.bank.clone().unwrap_or_else(|| self.output_dir.join("bank.datb"))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.output_dir.join("dataset.datd"))
    }

    pub fn holdout_path(&self) -> PathBuf {
        self.holdout.clone().unwrap_or_else(|| self.output_dir.join("holdout.datd"))
    }

    pub fn selection_path(&self) -> PathBuf {
        self.selection.clone().unwrap_or_else(|| self.output_dir.join("selection.csv"))
    }
}

/// `key  default  description` lines for `--help`.
pub fn keys_help() -> String {
    let cfg = RunConfig::default();
    let mut s = String::from("Configuration keys (file `key = value`, or --set key=value):\n");
    for (key, desc) in KEYS {
        let default = cfg.get(key).unwrap_or_default();
        let default = if default.is_empty() { "\"\"".to_string() } else { default };
        let _ = writeln!(s, "  {key:<20} {default:<12} {desc}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let cfg = RunConfig::default();
        for (key, _) in KEYS {
            let v = cfg.get(key).unwrap_or_else(|| panic!("{key} has no getter"));
            let mut other = RunConfig::default();
            other.set(key, &v).unwrap();
            assert_eq!(other, cfg, "{key}");
        }
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn resolved_text_reproduces_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["lr=0.0123456789", "anchor_reduction=mean", "seed=7", "bank=/tmp/b.datb"])
            .unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train.seed, 7);
        assert_eq!(back.synth.seed, 7);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::from_text("learning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
        assert!(RunConfig::from_text("lr 0.1").is_err());
        assert!(RunConfig::from_text("lr = 0.1\nlr = 0.2").is_err());
        assert!(RunConfig::from_text("mu = -1").is_err());
    }

    #[test]
    fn comments_and_blanks() {
        let cfg = RunConfig::from_text("# run\n\nmu = 2  # ratio\n").unwrap();
        assert_eq!(cfg.train.mu, 2);
    }

    #[test]
    fn help_lists_every_key() {
        let h = keys_help();
        for (key, _) in KEYS {
            assert!(h.contains(key), "{key}");
        }
    }
}
