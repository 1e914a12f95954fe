//! Declarative run configuration with preset inheritance.
//!
//! A config file is JSON. Its `preset` key ("toy" or "paper") selects a
//! complete base config; remaining keys override individual values via a
//! deep merge (objects merge, scalars and arrays replace). Unknown keys are
//! rejected with their full key path. The "paper" preset records the
//! reference hyperparameters verbatim for documentation fidelity; it is far
//! too large to train at desk scale.

use crate::corpus::CorpusSpec;
use crate::labels::{EMOTIONS, INTENSITIES};
use crate::tokenizer::Tokenizer;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Json(String),
    #[error("unknown config key: {path}")]
    UnknownKey { path: String },
    #[error("config key {path}: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { path: path.to_string(), message: message.into() }
}

/// Label domains spelled out in the config so data and model tables cannot
/// drift; must match the built-in domains exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelsConfig {
    pub emotions: Vec<String>,
    pub intensities: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Number of encoder blocks; one layered state is exposed per block.
    pub layers: usize,
    pub d_enc: usize,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EqFormerConfig {
    pub num_query_tokens: usize,
    pub query_dim: usize,
    pub num_qformer_blocks: usize,
    /// Head count shared by TLTR and Q-former attention.
    pub tltr_heads: usize,
    /// Must equal lm.dim; the projection feeds the language model.
    pub projection_out_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PloraConfig {
    pub rank: usize,
    /// Constant multiplier on the adapter path (the reference setup fixes
    /// this to 4.0 at rank 8).
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcousticConfig {
    pub mel_bins: usize,
    pub width: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub variance_hidden: usize,
    pub emotion_table: usize,
    pub intensity_table: usize,
    pub speaker_table: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    pub val_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub stage1: StageTrainConfig,
    pub pretrain: StageTrainConfig,
    pub stage2: StageTrainConfig,
    pub stage3: StageTrainConfig,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PloraMode {
    /// Separate adapters routed by modality (the full model).
    Multiple,
    /// One shared adapter applied to every position.
    SingleLora,
    /// Adapters disabled; the frozen base only.
    None,
}

impl PloraMode {
    pub fn from_str(s: &str) -> Option<PloraMode> {
        match s {
            "multiple" => Some(PloraMode::Multiple),
            "single_lora" => Some(PloraMode::SingleLora),
            "none" => Some(PloraMode::None),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub use_tltr: bool,
    pub use_qformer: bool,
    pub plora_mode: String,
    pub skip_stage1: bool,
    pub skip_pretrain: bool,
}

impl AblationConfig {
    pub fn mode(&self) -> PloraMode {
        PloraMode::from_str(&self.plora_mode).expect("validated plora_mode")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Default artifact root; the JELLY_LAB_HOME environment variable
    /// overrides it.
    pub lab_home: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub labels: LabelsConfig,
    pub corpus: CorpusSpec,
    pub encoder: EncoderConfig,
    pub eqformer: EqFormerConfig,
    pub lm: LmConfig,
    pub plora: PloraConfig,
    pub acoustic: AcousticConfig,
    pub train: TrainSection,
    pub ablation: AblationConfig,
    pub paths: PathsConfig,
}

fn default_labels() -> LabelsConfig {
    LabelsConfig {
        emotions: EMOTIONS.iter().map(|e| e.as_str().to_string()).collect(),
        intensities: INTENSITIES.iter().map(|i| i.as_str().to_string()).collect(),
    }
}

fn default_ablation() -> AblationConfig {
    AblationConfig {
        use_tltr: true,
        use_qformer: true,
        plora_mode: "multiple".into(),
        skip_stage1: false,
        skip_pretrain: false,
    }
}

pub fn toy_config() -> RunConfig {
    let stage = |steps: usize, batch_size: usize, peak_lr: f64| StageTrainConfig {
        steps,
        batch_size,
        peak_lr,
        min_lr: peak_lr / 10.0,
        warmup_steps: 50,
        weight_decay: 0.05,
        beta1: 0.9,
        beta2: 0.999,
        clip_norm: 1.0,
        val_every: 100,
    };
    RunConfig {
        preset: "toy".into(),
        seed: 7,
        labels: default_labels(),
        corpus: CorpusSpec::default(),
        encoder: EncoderConfig { layers: 6, d_enc: 32, heads: 4 },
        eqformer: EqFormerConfig {
            num_query_tokens: 8,
            query_dim: 64,
            num_qformer_blocks: 2,
            tltr_heads: 4,
            projection_out_dim: 64,
        },
        lm: LmConfig {
            dim: 64,
            blocks: 4,
            heads: 4,
            vocab_size: Tokenizer::new().vocab_size(),
            max_positions: 512,
        },
        plora: PloraConfig { rank: 8, scale: 4.0 },
        acoustic: AcousticConfig {
            mel_bins: 80,
            width: 64,
            heads: 4,
            enc_blocks: 2,
            dec_blocks: 2,
            variance_hidden: 64,
            emotion_table: 7,
            intensity_table: 3,
            speaker_table: 2,
        },
        train: TrainSection {
            stage1: stage(2000, 8, 2e-3),
            pretrain: stage(1000, 8, 2e-3),
            stage2: stage(1000, 8, 1e-3),
            stage3: StageTrainConfig { beta2: 0.98, ..stage(2000, 4, 1e-3) },
        },
        ablation: default_ablation(),
        paths: PathsConfig { lab_home: "jelly-lab".into() },
    }
}

/// Reference hyperparameters, kept verbatim: a 32-layer encoder at width
/// 1280, 25 query tokens at 768, a 4096-wide LM, rank-8 adapters scaled by
/// 4.0, the 180k/30k/275k schedule with 3k warmup from 3e-5 to 1e-5, and
/// 80 mel bins.
pub fn paper_config() -> RunConfig {
    let stage = |steps: usize, beta2: f64| StageTrainConfig {
        steps,
        batch_size: 8,
        peak_lr: 3e-5,
        min_lr: 1e-5,
        warmup_steps: 3000,
        weight_decay: 0.05,
        beta1: 0.9,
        beta2,
        clip_norm: 1.0,
        val_every: 100,
    };
    RunConfig {
        preset: "paper".into(),
        encoder: EncoderConfig { layers: 32, d_enc: 1280, heads: 8 },
        eqformer: EqFormerConfig {
            num_query_tokens: 25,
            query_dim: 768,
            num_qformer_blocks: 2,
            tltr_heads: 8,
            projection_out_dim: 4096,
        },
        lm: LmConfig { dim: 4096, blocks: 32, heads: 32, vocab_size: 32000, max_positions: 4096 },
        plora: PloraConfig { rank: 8, scale: 4.0 },
        acoustic: AcousticConfig {
            mel_bins: 80,
            width: 256,
            heads: 8,
            enc_blocks: 4,
            dec_blocks: 4,
            variance_hidden: 256,
            emotion_table: 7,
            intensity_table: 3,
            speaker_table: 2,
        },
        train: TrainSection {
            stage1: stage(180_000, 0.999),
            pretrain: stage(30_000, 0.999),
            stage2: stage(30_000, 0.999),
            stage3: stage(275_000, 0.98),
        },
        ..toy_config()
    }
}

pub fn preset(name: &str) -> Option<RunConfig> {
    match name {
        "toy" => Some(toy_config()),
        "paper" => Some(paper_config()),
        _ => None,
    }
}

fn merge_into(base: &mut Value, user: &Value, path: &str) -> Result<(), ConfigError> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (key, uv) in u {
                let child = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                match b.get_mut(key) {
                    Some(bv) => merge_into(bv, uv, &child)?,
                    None => return Err(ConfigError::UnknownKey { path: child }),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// Parses config text over its preset base. Unknown keys and invalid values
/// are reported with full key paths.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let user: Value = serde_json::from_str(text).map_err(|e| ConfigError::Json(e.to_string()))?;
    let Value::Object(ref obj) = user else {
        return Err(ConfigError::Json("top level must be an object".into()));
    };
    let preset_name = match obj.get("preset") {
        None => "toy",
        Some(Value::String(s)) => s.as_str(),
        Some(other) => return Err(invalid("preset", format!("expected a string, got {other}"))),
    };
    let base = preset(preset_name)
        .ok_or_else(|| invalid("preset", format!("unknown preset {preset_name:?} (expected \"toy\" or \"paper\")")))?;
    let mut merged = serde_json::to_value(&base).expect("config serializes");
    merge_into(&mut merged, &user, "")?;
    let config: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        ConfigError::Invalid { path: e.path().to_string(), message: e.inner().to_string() }
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
    parse_config(&text)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if preset(&self.preset).is_none() {
            return Err(invalid("preset", format!("unknown preset {:?}", self.preset)));
        }
        let canon = default_labels();
        if self.labels.emotions != canon.emotions {
            return Err(invalid(
                "labels.emotions",
                format!("must list the 7 built-in emotions in order {:?}", canon.emotions),
            ));
        }
        if self.labels.intensities != canon.intensities {
            return Err(invalid(
                "labels.intensities",
                format!("must list the 3 built-in intensities in order {:?}", canon.intensities),
            ));
        }
        self.corpus.validate().map_err(|e| invalid("corpus", e.to_string()))?;

        if self.encoder.layers < 2 {
            return Err(invalid("encoder.layers", "need at least 2 encoder blocks"));
        }
        if self.encoder.d_enc == 0 || self.encoder.d_enc % self.encoder.heads != 0 {
            return Err(invalid(
                "encoder.d_enc",
                format!("{} not divisible by encoder.heads {}", self.encoder.d_enc, self.encoder.heads),
            ));
        }
        if self.eqformer.num_query_tokens < 1 {
            return Err(invalid("eqformer.num_query_tokens", "need at least 1 query token"));
        }
        if self.eqformer.query_dim == 0 || self.eqformer.query_dim % self.eqformer.tltr_heads != 0 {
            return Err(invalid(
                "eqformer.query_dim",
                format!("{} not divisible by eqformer.tltr_heads {}", self.eqformer.query_dim, self.eqformer.tltr_heads),
            ));
        }
        if self.encoder.d_enc % self.eqformer.tltr_heads != 0 {
            return Err(invalid(
                "eqformer.tltr_heads",
                format!("{} must divide encoder.d_enc {}", self.eqformer.tltr_heads, self.encoder.d_enc),
            ));
        }
        if self.eqformer.num_qformer_blocks < 1 {
            return Err(invalid("eqformer.num_qformer_blocks", "need at least 1 block"));
        }
        if self.eqformer.projection_out_dim != self.lm.dim {
            return Err(invalid(
                "eqformer.projection_out_dim",
                format!("{} must equal lm.dim {}", self.eqformer.projection_out_dim, self.lm.dim),
            ));
        }
        if self.lm.dim == 0 || self.lm.dim % self.lm.heads != 0 {
            return Err(invalid(
                "lm.dim",
                format!("{} not divisible by lm.heads {}", self.lm.dim, self.lm.heads),
            ));
        }
        if self.lm.blocks < 1 {
            return Err(invalid("lm.blocks", "need at least 1 block"));
        }
        let vocab = Tokenizer::new().vocab_size();
        if self.lm.vocab_size < vocab {
            return Err(invalid(
                "lm.vocab_size",
                format!("{} smaller than the built-in vocabulary ({vocab})", self.lm.vocab_size),
            ));
        }
        if self.lm.max_positions < 64 {
            return Err(invalid("lm.max_positions", "need at least 64 positions"));
        }
        if self.plora.rank < 1 {
            return Err(invalid("plora.rank", "rank must be positive"));
        }
        if !(self.plora.scale.is_finite() && self.plora.scale > 0.0) {
            return Err(invalid("plora.scale", "scale must be positive and finite"));
        }
        if self.acoustic.mel_bins < 1 {
            return Err(invalid("acoustic.mel_bins", "need at least 1 mel bin"));
        }
        if self.acoustic.width == 0 || self.acoustic.width % self.acoustic.heads != 0 {
            return Err(invalid(
                "acoustic.width",
                format!("{} not divisible by acoustic.heads {}", self.acoustic.width, self.acoustic.heads),
            ));
        }
        if self.acoustic.emotion_table != EMOTIONS.len() {
            return Err(invalid(
                "acoustic.emotion_table",
                format!("must match the {} emotion labels", EMOTIONS.len()),
            ));
        }
        if self.acoustic.intensity_table != INTENSITIES.len() {
            return Err(invalid(
                "acoustic.intensity_table",
                format!("must match the {} intensity labels", INTENSITIES.len()),
            ));
        }
        if self.acoustic.speaker_table < 2 {
            return Err(invalid("acoustic.speaker_table", "corpus dialogues use 2 speakers"));
        }
        if self.acoustic.variance_hidden == 0 {
            return Err(invalid("acoustic.variance_hidden", "must be positive"));
        }
        for (name, s) in [
            ("stage1", &self.train.stage1),
            ("pretrain", &self.train.pretrain),
            ("stage2", &self.train.stage2),
            ("stage3", &self.train.stage3),
        ] {
            let p = |field: &str| format!("train.{name}.{field}");
            if s.steps == 0 {
                return Err(invalid(&p("steps"), "must be positive"));
            }
            if s.batch_size == 0 {
                return Err(invalid(&p("batch_size"), "must be positive"));
            }
            if s.warmup_steps >= s.steps {
                return Err(invalid(
                    &p("warmup_steps"),
                    format!("warmup {} must be below total steps {}", s.warmup_steps, s.steps),
                ));
            }
            if !(s.peak_lr.is_finite() && s.peak_lr > 0.0) {
                return Err(invalid(&p("peak_lr"), "must be positive and finite"));
            }
            if !(s.min_lr.is_finite() && s.min_lr >= 0.0 && s.min_lr <= s.peak_lr) {
                return Err(invalid(&p("min_lr"), "must lie in [0, peak_lr]"));
            }
            for (f, v) in [("beta1", s.beta1), ("beta2", s.beta2)] {
                if !(v.is_finite() && (0.0..1.0).contains(&v)) {
                    return Err(invalid(&p(f), "must lie in [0, 1)"));
                }
            }
            if !(s.weight_decay.is_finite() && s.weight_decay >= 0.0) {
                return Err(invalid(&p("weight_decay"), "must be nonnegative"));
            }
            if !(s.clip_norm.is_finite() && s.clip_norm > 0.0) {
                return Err(invalid(&p("clip_norm"), "must be positive"));
            }
            if s.val_every == 0 {
                return Err(invalid(&p("val_every"), "must be positive"));
            }
        }
        if PloraMode::from_str(&self.ablation.plora_mode).is_none() {
            return Err(invalid(
                "ablation.plora_mode",
                format!("{:?} is not one of \"multiple\", \"single_lora\", \"none\"", self.ablation.plora_mode),
            ));
        }
        if self.paths.lab_home.is_empty() {
            return Err(invalid("paths.lab_home", "must not be empty"));
        }
        Ok(())
    }

    /// Artifact root: the JELLY_LAB_HOME environment variable wins over the
    /// config value.
    pub fn lab_home(&self) -> std::path::PathBuf {
        match std::env::var("JELLY_LAB_HOME") {
            Ok(v) if !v.is_empty() => v.into(),
            _ => self.paths.lab_home.clone().into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        toy_config().validate().unwrap();
        paper_config().validate().unwrap();
    }

    #[test]
    fn paper_preset_pins_reference_hyperparameters() {
        let c = paper_config();
        assert_eq!(c.encoder.layers, 32);
        assert_eq!(c.encoder.d_enc, 1280);
        assert_eq!(c.eqformer.num_query_tokens, 25);
        assert_eq!(c.eqformer.query_dim, 768);
        assert_eq!(c.lm.dim, 4096);
        assert_eq!(c.plora.rank, 8);
        assert_eq!(c.plora.scale, 4.0);
        assert_eq!(c.acoustic.mel_bins, 80);
        assert_eq!(c.train.stage1.steps, 180_000);
        assert_eq!(c.train.stage2.steps, 30_000);
        assert_eq!(c.train.stage3.steps, 275_000);
        assert_eq!(c.train.stage1.peak_lr, 3e-5);
        assert_eq!(c.train.stage1.min_lr, 1e-5);
        assert_eq!(c.train.stage1.warmup_steps, 3000);
        assert_eq!(c.train.stage1.weight_decay, 0.05);
        assert_eq!(c.train.stage1.beta2, 0.999);
        assert_eq!(c.train.stage3.beta2, 0.98);
    }

    #[test]
    fn overrides_merge_over_the_preset() {
        let c = parse_config(r#"{"preset": "toy", "train": {"stage2": {"steps": 500}}, "seed": 11}"#).unwrap();
        assert_eq!(c.train.stage2.steps, 500);
        assert_eq!(c.seed, 11);
        assert_eq!(c.train.stage1.steps, toy_config().train.stage1.steps);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        match parse_config(r#"{"trian": {}}"#) {
            Err(ConfigError::UnknownKey { path }) => assert_eq!(path, "trian"),
            other => panic!("expected unknown key, got {other:?}"),
        }
        match parse_config(r#"{"train": {"stage2": {"lr": 0.1}}}"#) {
            Err(ConfigError::UnknownKey { path }) => assert_eq!(path, "train.stage2.lr"),
            other => panic!("expected unknown key, got {other:?}"),
        }
    }

    #[test]
    fn type_errors_carry_the_key_path() {
        match parse_config(r#"{"train": {"stage2": {"steps": "many"}}}"#) {
            Err(ConfigError::Invalid { path, .. }) => assert_eq!(path, "train.stage2.steps"),
            other => panic!("expected invalid value, got {other:?}"),
        }
    }

    #[test]
    fn bad_emotion_list_names_the_key() {
        match parse_config(r#"{"labels": {"emotions": ["happy", "bored"]}}"#) {
            Err(ConfigError::Invalid { path, .. }) => assert_eq!(path, "labels.emotions"),
            other => panic!("expected invalid labels, got {other:?}"),
        }
    }

    #[test]
    fn warmup_must_stay_below_total_steps() {
        match parse_config(r#"{"train": {"stage1": {"steps": 40, "warmup_steps": 40}}}"#) {
            Err(ConfigError::Invalid { path, .. }) => assert_eq!(path, "train.stage1.warmup_steps"),
            other => panic!("expected invalid warmup, got {other:?}"),
        }
    }

    #[test]
    fn bad_plora_mode_names_the_key() {
        match parse_config(r#"{"ablation": {"plora_mode": "both"}}"#) {
            Err(ConfigError::Invalid { path, .. }) => assert_eq!(path, "ablation.plora_mode"),
            other => panic!("expected invalid mode, got {other:?}"),
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = toy_config();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(parse_config(&text).unwrap(), c);
    }

    #[test]
    fn unknown_preset_is_rejected() {
        assert!(matches!(
            parse_config(r#"{"preset": "huge"}"#),
            Err(ConfigError::Invalid { .. })
        ));
    }
}
