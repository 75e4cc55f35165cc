//! Run configuration in a flat `key = value` text format.
//!
//! Blank lines and lines starting with `#` are ignored. Every key of
//! [`RunConfig`] may appear at most once; unknown keys are rejected. The
//! rendered form lists every key in declaration order and parses back to an
//! identical value.

use std::fmt::Write as _;
use std::path::Path;

use mta_core::alignment::{AlignmentConfig, Objective};
use mta_core::captioning::{LmConfig, QFormerConfig};
use mta_core::metrics::IouKind;
use mta_core::model::{LossOptions, LossWeights, ModelConfig};
use mta_core::perception::PerceptionConfig;
use mta_core::scenegen::{SceneConfig, Vocabulary};
use mta_core::train::{LrSchedule, TrainOptions};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// A value that round-trips through its text form.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(u64, usize, f64, bool);

impl ConfigValue for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for Objective {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: mta_core::Error| e.to_string())
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

impl ConfigValue for IouKind {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bev" => Ok(IouKind::Bev),
            "volume" => Ok(IouKind::Volume),
            _ => Err(format!("expected bev or volume, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        match self {
            IouKind::Bev => "bev".into(),
            IouKind::Volume => "volume".into(),
        }
    }
}

/// Learning-rate schedule family; step counts are filled in at train time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    Constant,
    Cosine,
}

impl ConfigValue for ScheduleKind {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            _ => Err(format!("expected constant or cosine, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        match self {
            Self::Constant => "constant".into(),
            Self::Cosine => "cosine".into(),
        }
    }
}

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr, )*) => {
        /// Everything a run depends on. Serialized verbatim into each run
        /// directory as `config.txt`.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            /// Keys in rendering order.
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field) ),*];

            /// One-line description per key, for `--help`.
            pub const HELP: &'static [&'static str] = &[$( concat!($($doc, )* "") ),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value).map_err(|e| {
                            HarnessError::Config(format!("{key} = {value:?}: {e}"))
                        })?;
                    } )*
                    _ => return Err(HarnessError::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( stringify!($field) => Some(self.$field.render()), )*
                    _ => None,
                }
            }
        }
    };
}

run_config! {
    /// Run name, also the run directory name.
    name: String = "run".into(),
    /// Dataset file; empty means generate from the dataset keys below.
    dataset: String = String::new(),
    /// Scenes generated when no dataset file is given.
    scenes: usize = 200,
    data_seed: u64 = 2024,
    /// Share of scenes in the training split.
    train_fraction: f64 = 0.8,
    split_seed: u64 = 2024,
    min_objects: usize = 2,
    max_objects: usize = 8,
    /// Object centers are drawn inside this half-extent, meters.
    placement_extent: f64 = 30.0,
    d_model: usize = 64,
    queries: usize = 32,
    decoder_layers: usize = 2,
    heads: usize = 4,
    ffn_dim: usize = 128,
    qformer_blocks: usize = 8,
    /// Query-transformer layer whose states the text alignment reads.
    bla_layer: usize = 4,
    lm_dim: usize = 128,
    lm_layers: usize = 2,
    lm_heads: usize = 4,
    lm_ffn: usize = 256,
    max_len: usize = 24,
    /// Queries captioned at inference.
    caption_queries: usize = 8,
    /// Instruction text placed before each caption.
    prompt: String = "describe the object .".into(),
    alpha: f64 = 10.0,
    beta: f64 = 1.0,
    lambda_bla: f64 = 1.0,
    lambda_dca: f64 = 0.01,
    bla_objective: Objective = Objective::Mse,
    dca_objective: Objective = Objective::Clip,
    /// Prompt bank rows.
    prompts: usize = 16,
    /// Prompt bank and text embedding width.
    prompt_dim: usize = 64,
    tau: f64 = 0.07,
    /// Recompute the text-alignment prefix from detached detector states.
    bla_detach_d0: bool = false,
    text_seed: u64 = mta_core::alignment::TEXT_ENCODER_SEED,
    lr: f64 = 2e-4,
    schedule: ScheduleKind = ScheduleKind::Constant,
    /// Warmup steps of the cosine schedule.
    warmup: u64 = 0,
    epochs: u64 = 10,
    batch_scenes: usize = 4,
    seed: u64 = 0,
    finite_check: bool = true,
    /// Box overlap used by the dense captioning score.
    iou: IouKind = IouKind::Bev,
    /// Parent directory of run directories.
    output: String = "runs".into(),
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(HarnessError::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        Self::parse(&text)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    /// SHA-256 of the rendered text.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.render().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad(format!("run name {:?} is not a plain directory name", self.name));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie strictly between 0 and 1".into());
        }
        if self.bla_layer == 0 || self.bla_layer > self.qformer_blocks {
            return bad(format!("bla_layer must lie in 1..={}", self.qformer_blocks));
        }
        if self.epochs == 0 || self.scenes == 0 {
            return bad("epochs and scenes must be positive".into());
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects".into());
        }
        self.loss_weights().validate()?;
        self.scene_config().validate()?;
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            lambda_bla: self.lambda_bla,
            lambda_dca: self.lambda_dca,
        }
    }

    /// Whether the model carries alignment heads.
    pub fn uses_alignment(&self) -> bool {
        self.lambda_bla > 0.0 || self.lambda_dca > 0.0
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            placement_extent: self.placement_extent,
            ..SceneConfig::default()
        }
    }

    pub fn model_config(&self, vocab: &Vocabulary) -> Result<ModelConfig> {
        Ok(ModelConfig {
            perception: PerceptionConfig {
                d_model: self.d_model,
                queries: self.queries,
                decoder_layers: self.decoder_layers,
                heads: self.heads,
                ffn_dim: self.ffn_dim,
                range: self.scene_config().range,
                ..PerceptionConfig::default()
            },
            qformer: QFormerConfig {
                blocks: self.qformer_blocks,
                bla_layer: self.bla_layer,
                d_model: self.d_model,
                heads: self.heads,
                ffn_dim: self.ffn_dim,
            },
            lm: LmConfig {
                d_model: self.lm_dim,
                layers: self.lm_layers,
                heads: self.lm_heads,
                ffn_dim: self.lm_ffn,
                max_len: self.max_len,
                ..LmConfig::new(vocab.len())
            },
            alignment: AlignmentConfig {
                prompts: self.prompts,
                dim: self.prompt_dim,
                tau: self.tau,
                bla_objective: self.bla_objective,
                dca_objective: self.dca_objective,
                ..AlignmentConfig::default()
            },
            prompt: vocab.tokenize(&self.prompt)?,
            caption_queries: self.caption_queries,
            text_seed: self.text_seed,
        })
    }

    /// Optimizer options for a run of `steps_per_epoch` steps per epoch.
    pub fn train_options(&self, steps_per_epoch: usize) -> TrainOptions {
        let schedule = match self.schedule {
            ScheduleKind::Constant => LrSchedule::Constant,
            ScheduleKind::Cosine => LrSchedule::Cosine {
                warmup: self.warmup,
                total: self.epochs * steps_per_epoch as u64,
            },
        };
        TrainOptions {
            loss: LossOptions {
                weights: self.loss_weights(),
                bla_detach_d0: self.bla_detach_d0,
                ..LossOptions::default()
            },
            lr: self.lr,
            schedule,
            batch_scenes: self.batch_scenes,
            finite_check: self.finite_check,
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_round_trips() {
        let mut c = RunConfig::default();
        c.set("lr", "0.00123").unwrap();
        c.set("dca_objective", "cosine").unwrap();
        c.set("prompt", "describe the object .").unwrap();
        let back = RunConfig::parse(&c.render()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(RunConfig::KEYS.len(), RunConfig::HELP.len());
    }

    #[test]
    fn rejects_bad_input() {
        for text in ["nonsense = 1", "lr = fast", "lr", "lr = 1\nlr = 2", "bla_layer = 9", "alpha = -1"] {
            let e = RunConfig::parse(text).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let c = RunConfig::parse("# a comment\n\nseed = 7\n").unwrap();
        assert_eq!(c.seed, 7);
    }
}
