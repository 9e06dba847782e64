use std::path::{Path, PathBuf};

use irl_core::eval::{DecodeOptions, DEFAULT_BEAM};
use irl_core::features::FeatureConfig;
use irl_core::losses::{SchemeKind, TrainScheme};
use irl_core::seq2seq::ModelConfig;
use irl_core::synthcorpus::{CorpusConfig, Vocab};
use irl_core::training::{TrainConfig, SCALE_GRID};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything one invocation needs. Loaded from a TOML file, then
/// overridden by command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root for run directories. Falls back to `IRL_OUT_DIR`, then `runs`.
    pub out_dir: Option<PathBuf>,
    /// A corpus written by `synth`.
    pub corpus_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub corpus: CorpusConfig,
    pub features: FeatureConfig,
    pub model: ModelSection,
    pub scheme: SchemeSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub search: SearchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: None,
            corpus_dir: None,
            seeds: vec![1, 2, 3],
            corpus: CorpusConfig::default(),
            features: FeatureConfig::default(),
            model: ModelSection::default(),
            scheme: SchemeSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            search: SearchSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub enc_blstm_layers: usize,
    pub enc_lstm_layers: usize,
    pub dec_lstm_layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: 32,
            enc_blstm_layers: 2,
            enc_lstm_layers: 2,
            dec_lstm_layers: 4,
        }
    }
}

/// Scheme kind plus optional weight overrides; unset weights take the
/// kind's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeSection {
    pub kind: SchemeKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aux_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

impl Default for SchemeSection {
    fn default() -> Self {
        Self {
            kind: SchemeKind::Baseline,
            alpha: None,
            gamma: None,
            lambda: None,
            aux_weight: None,
            beta: None,
        }
    }
}

impl SchemeSection {
    pub fn resolve(&self, kind: SchemeKind) -> TrainScheme {
        let mut s = TrainScheme::new(kind);
        if let Some(v) = self.alpha {
            s.alpha = v;
        }
        if let Some(v) = self.gamma {
            s.gamma = v;
        }
        if let Some(v) = self.lambda {
            s.lambda = v;
        }
        if let Some(v) = self.aux_weight {
            s.aux_weight = v;
        }
        if let Some(v) = self.beta {
            s.beta = v;
        }
        s
    }
}

/// Training options. `clip_norm = 0` disables clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub distance_pairs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            max_epochs: t.max_epochs,
            patience: t.patience,
            batch_size: t.batch_size,
            clip_norm: t.clip_norm.unwrap_or(0.0),
            distance_pairs: t.distance_pairs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub beam: usize,
    pub max_len: usize,
    pub eval_seed: u64,
    pub analysis_pairs: usize,
    pub analysis_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            beam: DEFAULT_BEAM,
            max_len: 30,
            eval_seed: 7,
            analysis_pairs: 50,
            analysis_seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub grid: Vec<f64>,
    pub full_cross: bool,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            grid: SCALE_GRID.to_vec(),
            full_cross: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Path(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn out_root(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            max_epochs: t.max_epochs,
            patience: t.patience,
            batch_size: t.batch_size,
            clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
            distance_pairs: t.distance_pairs,
            max_decode_len: self.eval.max_len,
        }
    }

    pub fn model_config(&self, vocab: Vocab, num_coeffs: usize) -> ModelConfig {
        ModelConfig {
            hidden: self.model.hidden,
            enc_blstm_layers: self.model.enc_blstm_layers,
            enc_lstm_layers: self.model.enc_lstm_layers,
            dec_lstm_layers: self.model.dec_lstm_layers,
            vocab,
            num_coeffs,
        }
    }

    pub fn decode(&self) -> DecodeOptions {
        DecodeOptions {
            width: self.eval.beam,
            max_len: self.eval.max_len,
        }
    }

    /// The corpus directory, which must exist.
    pub fn corpus_path(&self) -> Result<&Path, CliError> {
        let p = self
            .corpus_dir
            .as_deref()
            .ok_or_else(|| CliError::Path("no corpus directory given (--corpus or corpus_dir)".into()))?;
        if !p.join("manifest.tsv").is_file() {
            return Err(CliError::Path(format!("{}: not a corpus directory", p.display())));
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        if self.model.hidden == 0 {
            return Err(CliError::Config("model.hidden must be positive".into()));
        }
        if self.eval.beam == 0 || self.eval.max_len == 0 {
            return Err(CliError::Config("eval.beam and eval.max_len must be positive".into()));
        }
        if self.search.grid.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(CliError::Config("search.grid values must be finite and non-negative".into()));
        }
        if let Some(p) = &self.corpus_dir {
            if !p.exists() {
                return Err(CliError::Path(format!("{}: does not exist", p.display())));
            }
        }
        self.corpus.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.scheme
            .resolve(self.scheme.kind)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_round_trip() {
        let mut c = RunConfig::default();
        c.out_dir = Some("out".into());
        c.seeds = vec![4];
        c.scheme.kind = SchemeKind::IrlC;
        c.scheme.gamma = Some(0.1);
        c.train.clip_norm = 0.0;
        c.features.pre_emphasis = 0.95;
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train_config().clip_norm, None);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c: RunConfig = toml::from_str("seeds = [9]\n[scheme]\nkind = \"irl-e\"\nlambda = 1.0\n").unwrap();
        let s = c.scheme.resolve(c.scheme.kind);
        assert_eq!(s.kind, SchemeKind::IrlE);
        assert_eq!((s.gamma, s.lambda), (0.01, 1.0));
        assert_eq!(c.model, ModelSection::default());
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = [1]\n").is_err());
    }

    #[test]
    fn missing_corpus_dir_is_path_error() {
        let c = RunConfig {
            corpus_dir: Some("/nonexistent/irl-corpus".into()),
            ..RunConfig::default()
        };
        assert!(matches!(c.validate(), Err(CliError::Path(_))));
    }
}
