//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use mvcf_core::data::{DatasetKind, SyntheticSpec};
use mvcf_core::flows::{FlowConfig, TraceMode};
use mvcf_core::model::{KlEstimator, ModalitySpec, ModelConfig, Variant};
use mvcf_core::nn::AdamConfig;
use mvcf_core::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid value for `{key}`: {reason}")]
    Field { key: String, reason: String },
    #[error("{path}:{line}: {reason}")]
    Syntax { path: String, line: usize, reason: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn field(key: &str, reason: impl std::fmt::Display) -> ConfigError {
    ConfigError::Field {
        key: key.to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub variant: Variant,
    pub epochs: usize,
    pub anneal_epochs: usize,
    /// `None` picks 16 for synthetic data and 64 otherwise.
    pub latent_dim: Option<usize>,
    pub flow_steps: usize,
    pub flow_hidden: Vec<usize>,
    pub trace: TraceMode,
    pub hutchinson_probes: usize,
    pub baseline_kl: KlEstimator,
    pub encoder_hidden: usize,
    pub head_hidden: usize,
    pub decoder_hidden: usize,
    /// Reconstruction weight per modality name; unlisted modalities get 1.
    pub lambda: Vec<(String, f64)>,
    pub seed: u64,
    pub out: PathBuf,
    pub lr: f64,
    pub batch_size: usize,
    pub eval_samples: usize,
    pub matched_fraction: f64,
    pub synth: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Synth,
            data_dir: None,
            train_limit: None,
            variant: Variant::Cnf,
            epochs: 20,
            anneal_epochs: 5,
            latent_dim: None,
            flow_steps: FlowConfig::default().num_steps,
            flow_hidden: vec![256, 256],
            trace: TraceMode::Exact,
            hutchinson_probes: 1,
            baseline_kl: KlEstimator::Analytic,
            encoder_hidden: 512,
            head_hidden: 128,
            decoder_hidden: 512,
            lambda: vec![("image".into(), 1.0), ("label".into(), 50.0)],
            seed: 0,
            out: PathBuf::from("run"),
            lr: AdamConfig::default().lr,
            batch_size: 64,
            eval_samples: 1,
            matched_fraction: 1.0,
            synth: SyntheticSpec::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| field(key, format!("{value:?}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "dataset" => self.dataset = parse(key, value)?,
            "data_dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "train_limit" => self.train_limit = if value.is_empty() { None } else { Some(parse(key, value)?) },
            "variant" => self.variant = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "anneal_epochs" => self.anneal_epochs = parse(key, value)?,
            "latent_dim" => self.latent_dim = if value == "auto" { None } else { Some(parse(key, value)?) },
            "flow_steps" => self.flow_steps = parse(key, value)?,
            "flow_hidden" => self.flow_hidden = parse_list(key, value)?,
            "trace" => self.trace = parse(key, value)?,
            "hutchinson_probes" => self.hutchinson_probes = parse(key, value)?,
            "baseline_kl" => self.baseline_kl = parse(key, value)?,
            "encoder_hidden" => self.encoder_hidden = parse(key, value)?,
            "head_hidden" => self.head_hidden = parse(key, value)?,
            "decoder_hidden" => self.decoder_hidden = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "eval_samples" => self.eval_samples = parse(key, value)?,
            "matched_fraction" => self.matched_fraction = parse(key, value)?,
            "classes" => self.synth.num_classes = parse(key, value)?,
            "pattern_dim" => self.synth.pattern_dim = parse(key, value)?,
            "flip_noise" => self.synth.flip_noise = parse(key, value)?,
            "samples_per_class" => self.synth.samples_per_class = parse(key, value)?,
            _ => match key.strip_prefix("lambda.") {
                Some(name) if !name.is_empty() => {
                    let v: f64 = parse(key, value)?;
                    match self.lambda.iter_mut().find(|(n, _)| n == name) {
                        Some(slot) => slot.1 = v,
                        None => self.lambda.push((name.to_string(), v)),
                    }
                }
                _ => return Err(field(key, "unknown key")),
            },
        }
        Ok(())
    }

    /// `name=value` form used by the `--lambda` flag.
    pub fn set_lambda(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (name, value) = spec.split_once('=').ok_or_else(|| field("lambda", format!("{spec:?} is not name=value")))?;
        self.set(&format!("lambda.{}", name.trim()), value)
    }

    /// Apply a whole `key = value` document; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: origin.to_string(),
                line: i + 1,
                reason: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut c = Self::default();
        c.apply_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    /// Every setting, one per line, in a form [`Self::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("dataset = {}", self.dataset),
            format!("data_dir = {}", self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            format!("train_limit = {}", self.train_limit.map(|l| l.to_string()).unwrap_or_default()),
            format!("variant = {}", self.variant),
            format!("epochs = {}", self.epochs),
            format!("anneal_epochs = {}", self.anneal_epochs),
            format!("latent_dim = {}", self.latent_dim.map_or("auto".to_string(), |d| d.to_string())),
            format!("flow_steps = {}", self.flow_steps),
            format!("flow_hidden = {}", join(&self.flow_hidden)),
            format!("trace = {}", self.trace),
            format!("hutchinson_probes = {}", self.hutchinson_probes),
            format!("baseline_kl = {}", self.baseline_kl),
            format!("encoder_hidden = {}", self.encoder_hidden),
            format!("head_hidden = {}", self.head_hidden),
            format!("decoder_hidden = {}", self.decoder_hidden),
            format!("seed = {}", self.seed),
            format!("out = {}", self.out.display()),
            format!("lr = {}", self.lr),
            format!("batch_size = {}", self.batch_size),
            format!("eval_samples = {}", self.eval_samples),
            format!("matched_fraction = {}", self.matched_fraction),
            format!("classes = {}", self.synth.num_classes),
            format!("pattern_dim = {}", self.synth.pattern_dim),
            format!("flip_noise = {}", self.synth.flip_noise),
            format!("samples_per_class = {}", self.synth.samples_per_class),
        ];
        lines.extend(self.lambda.iter().map(|(n, v)| format!("lambda.{n} = {v}")));
        lines.join("\n") + "\n"
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("epochs", self.epochs),
            ("anneal_epochs", self.anneal_epochs),
            ("flow_steps", self.flow_steps),
            ("hutchinson_probes", self.hutchinson_probes),
            ("encoder_hidden", self.encoder_hidden),
            ("head_hidden", self.head_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("batch_size", self.batch_size),
            ("eval_samples", self.eval_samples),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(field(k, "must be at least 1"));
        }
        if self.anneal_epochs > self.epochs {
            return Err(field("anneal_epochs", format!("{} exceeds epochs = {}", self.anneal_epochs, self.epochs)));
        }
        if self.latent_dim == Some(0) {
            return Err(field("latent_dim", "must be at least 1"));
        }
        if self.flow_hidden.contains(&0) {
            return Err(field("flow_hidden", "widths must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(field("lr", format!("{} must be positive", self.lr)));
        }
        if !(self.matched_fraction > 0.0 && self.matched_fraction <= 1.0) {
            return Err(field("matched_fraction", format!("{} outside (0, 1]", self.matched_fraction)));
        }
        if let Some((n, v)) = self.lambda.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(field(&format!("lambda.{n}"), format!("{v} must be positive")));
        }
        if self.train_limit == Some(0) {
            return Err(field("train_limit", "must be at least 1"));
        }
        match self.dataset {
            DatasetKind::Synth => self.synth.validate().map_err(|e| field("dataset", e))?,
            kind => match &self.data_dir {
                None => return Err(field("data_dir", format!("required for dataset {kind}"))),
                Some(d) if !d.is_dir() => return Err(field("data_dir", format!("{} is not a directory", d.display()))),
                Some(_) => {}
            },
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim.unwrap_or(match self.dataset {
            DatasetKind::Synth => 16,
            _ => 64,
        })
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            num_steps: self.flow_steps,
            trace_mode: self.trace,
            hutchinson_probes: self.hutchinson_probes,
            ..FlowConfig::default()
        }
    }

    /// Model layout for modalities of the given `(name, dim, image shape)`.
    pub fn model_config(&self, modalities: &[(String, usize, Option<(usize, usize)>)]) -> ModelConfig {
        let specs = modalities
            .iter()
            .map(|(name, dim, shape)| {
                let s = ModalitySpec::new(name.clone(), *dim).with_widths(self.encoder_hidden, self.head_hidden, self.decoder_hidden);
                match shape {
                    Some((h, w)) => s.with_image_shape(*h, *w),
                    None => s,
                }
            })
            .collect();
        let mut c = ModelConfig::new(specs, self.latent_dim(), self.variant);
        c.flow = self.flow_config();
        c.flow_hidden = self.flow_hidden.clone();
        c.baseline_kl = self.baseline_kl;
        c
    }

    /// Per-modality weights in model order.
    pub fn lambdas(&self, names: &[String]) -> Result<Vec<f64>, ConfigError> {
        if let Some((n, _)) = self.lambda.iter().find(|(n, _)| !names.contains(n)) {
            return Err(field(&format!("lambda.{n}"), format!("no modality named {n:?} (have {names:?})")));
        }
        Ok(names
            .iter()
            .map(|n| self.lambda.iter().find(|(m, _)| m == n).map_or(1.0, |(_, v)| *v))
            .collect())
    }

    pub fn train_config(&self, names: &[String]) -> Result<TrainConfig, ConfigError> {
        let mut t = TrainConfig::new(self.lambdas(names)?, self.epochs, self.anneal_epochs).map_err(|e| field("anneal_epochs", e))?;
        t.adam.lr = self.lr;
        t.batch_size = self.batch_size;
        t.seed = self.seed;
        t.eval_samples = self.eval_samples;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("variant = baseline\nflow_hidden = 8,4 # narrow\nlambda.label = 20\nlr = 0.0005\n", "inline")
            .unwrap();
        assert_eq!(c.variant, Variant::Baseline);
        assert_eq!(c.flow_hidden, vec![8, 4]);
        assert_eq!(c.lambdas(&["image".into(), "label".into()]).unwrap(), vec![1.0, 20.0]);
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text(), "snapshot").unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn field_level_errors() {
        let mut c = RunConfig::default();
        let e = c.set("epochs", "ten").unwrap_err().to_string();
        assert!(e.contains("`epochs`"), "{e}");
        assert!(c.set("colour", "blue").unwrap_err().to_string().contains("unknown key"));
        let e = c.apply_text("seed 3", "cfg").unwrap_err().to_string();
        assert!(e.starts_with("cfg:1:"), "{e}");
        c.anneal_epochs = 30;
        assert!(c.validate().unwrap_err().to_string().contains("anneal_epochs"));
        let mut c = RunConfig::default();
        c.set("dataset", "mnist").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("data_dir"));
        let c = RunConfig::default();
        assert!(c.lambdas(&["a".into()]).is_err());
    }
}
