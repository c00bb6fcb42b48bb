//! Resolved run settings: defaults, then a `key = value` file, then flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use concnn::ensemble::{BranchWeights, VoteMode};
use concnn::evaluation::Split;
use concnn::model::{BranchConfig, TrainConfig};

use crate::ValidationError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub seed: u64,
    /// Worker threads; 0 lets the runtime choose.
    pub threads: usize,
    pub branch: BranchConfig,
    pub train: TrainConfig,
    pub weights: BranchWeights,
    pub folds: usize,
    pub split: Split,
    pub vote: VoteMode,
    pub synth_classes: usize,
    pub synth_sections: usize,
    pub synth_size: usize,
    pub synth_angles: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            out: None,
            models: None,
            seed: 0,
            threads: 0,
            branch: BranchConfig::default(),
            train: TrainConfig::default(),
            weights: BranchWeights::default(),
            folds: 5,
            split: Split::Section,
            vote: VoteMode::Concat108,
            synth_classes: 4,
            synth_sections: 5,
            synth_size: 448,
            synth_angles: vec![0.0],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ValidationError> {
    value
        .parse()
        .map_err(|_| ValidationError(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr, const N: usize>(key: &str, value: &str) -> Result<[T; N], ValidationError> {
    let items = value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect::<Result<Vec<T>, _>>()?;
    let n = items.len();
    items
        .try_into()
        .map_err(|_| ValidationError(format!("{key}: expected {N} comma-separated values, got {n}")))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ValidationError> {
        let value = value.trim();
        match key.trim() {
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "models" => self.models = Some(PathBuf::from(value)),
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "patch_size" => self.branch.patch_size = parse(key, value)?,
            "padding" => self.branch.conv_padding = parse(key, value)?,
            "channel_widths" => self.branch.channel_widths = parse_list(key, value)?,
            "fc_widths" => self.branch.fc_widths = parse_list(key, value)?,
            "num_classes" => self.branch.num_classes = parse(key, value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "iterations" => self.train.max_iterations = parse(key, value)?,
            "max_grad_norm" => self.train.max_grad_norm = parse(key, value)?,
            "weights" => self.weights = value.parse().map_err(|e| ValidationError(format!("weights: {e}")))?,
            "folds" => self.folds = parse(key, value)?,
            "split" => self.split = value.parse().map_err(|e| ValidationError(format!("split: {e}")))?,
            "vote" => self.vote = value.parse().map_err(|e| ValidationError(format!("vote: {e}")))?,
            "synth_classes" => self.synth_classes = parse(key, value)?,
            "synth_sections" => self.synth_sections = parse(key, value)?,
            "synth_size" => self.synth_size = parse(key, value)?,
            "synth_angles" => {
                self.synth_angles = value
                    .split(',')
                    .map(|a| parse(key, a.trim()))
                    .collect::<Result<_, _>>()?
            }
            other => return Err(ValidationError(format!("unknown setting {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of a config file.
    pub fn load_file(&mut self, path: &Path) -> Result<(), ValidationError> {
        let text = fs::read_to_string(path).map_err(|e| ValidationError(format!("{}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ValidationError(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
            self.set(k, v)
                .map_err(|e| ValidationError(format!("{}:{}: {}", path.display(), i + 1, e.0)))?;
        }
        Ok(())
    }

    /// Every setting, in the form [`Self::load_file`] reads.
    pub fn render(&self) -> String {
        let mut out = String::from("# resolved concnn configuration\n");
        for (k, v) in [
            ("manifest", &self.manifest),
            ("out", &self.out),
            ("models", &self.models),
        ] {
            if let Some(p) = v {
                let _ = writeln!(out, "{k} = {}", p.display());
            }
        }
        let b = &self.branch;
        let t = &self.train;
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "threads = {}", self.threads);
        let _ = writeln!(out, "patch_size = {}", b.patch_size);
        let _ = writeln!(out, "padding = {}", b.conv_padding);
        let _ = writeln!(out, "channel_widths = {}", join(&b.channel_widths));
        let _ = writeln!(out, "fc_widths = {}", join(&b.fc_widths));
        let _ = writeln!(out, "num_classes = {}", b.num_classes);
        let _ = writeln!(out, "learning_rate = {}", t.learning_rate);
        let _ = writeln!(out, "batch_size = {}", t.batch_size);
        let _ = writeln!(out, "iterations = {}", t.max_iterations);
        let _ = writeln!(out, "max_grad_norm = {}", t.max_grad_norm);
        let _ = writeln!(out, "weights = {}", self.weights);
        let _ = writeln!(out, "folds = {}", self.folds);
        let _ = writeln!(out, "split = {}", self.split);
        let _ = writeln!(out, "vote = {}", self.vote);
        let _ = writeln!(out, "synth_classes = {}", self.synth_classes);
        let _ = writeln!(out, "synth_sections = {}", self.synth_sections);
        let _ = writeln!(out, "synth_size = {}", self.synth_size);
        let _ = writeln!(out, "synth_angles = {}", join(&self.synth_angles));
        out
    }

    pub fn require_manifest(&self) -> Result<&Path, ValidationError> {
        self.manifest
            .as_deref()
            .ok_or_else(|| ValidationError("--manifest is required".into()))
    }

    pub fn require_out(&self) -> Result<&Path, ValidationError> {
        self.out
            .as_deref()
            .ok_or_else(|| ValidationError("--out is required".into()))
    }
}
