//! Run configuration shared by training, evaluation and generation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::caption::{CaptionModelKind, ToyCaptionConfig};
use crate::decoding::{Family, SelfAttnVariant};
use crate::denoise::{DenoiseConfig, RegressionVariant};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Denoise,
    Caption,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Denoise => "denoise",
            Task::Caption => "caption",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "denoise" => Ok(Task::Denoise),
            "caption" => Ok(Task::Caption),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding `train.jsonl` and `test.jsonl`.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Directory for CSV outputs.
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub model: Family,
    /// Defaults to `none` for baselines, `hidden` for middle-out de-noising
    /// and `dual` for middle-out captioning.
    pub self_attention: Option<SelfAttnVariant>,
    /// Baseline captioner fed the middle-word embedding on every step.
    pub oracle_word: bool,
    /// Overrides the seed of the task section.
    pub seed: u64,
    pub denoise: DenoiseConfig,
    pub caption: ToyCaptionConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Denoise,
            model: Family::MiddleOut,
            self_attention: None,
            oracle_word: false,
            seed: 0,
            denoise: DenoiseConfig::default(),
            caption: ToyCaptionConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, Error> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run configs always serialize")
    }

    pub fn validate(&self) -> Result<(), Error> {
        match self.task {
            Task::Denoise => {
                self.denoise_config().validate()?;
                if self.oracle_word {
                    return Err(Error::Config("oracle_word applies to captioning only".into()));
                }
                self.regression_variant().map(|_| ())
            }
            Task::Caption => {
                self.caption_config().validate()?;
                if self.oracle_word && self.model == Family::MiddleOut {
                    return Err(Error::Config("oracle_word applies to the baseline only".into()));
                }
                Ok(())
            }
        }
    }

    pub fn variant(&self) -> SelfAttnVariant {
        self.self_attention.unwrap_or(match (self.model, self.task) {
            (Family::Baseline, _) => SelfAttnVariant::None,
            (Family::MiddleOut, Task::Denoise) => SelfAttnVariant::HiddenOnly,
            (Family::MiddleOut, Task::Caption) => SelfAttnVariant::Dual,
        })
    }

    pub fn denoise_config(&self) -> DenoiseConfig {
        DenoiseConfig { seed: self.seed, ..self.denoise.clone() }
    }

    pub fn caption_config(&self) -> ToyCaptionConfig {
        ToyCaptionConfig { seed: self.seed, ..self.caption.clone() }
    }

    /// Scalar decoders have no token embeddings, so only `none` and `hidden` apply.
    pub fn regression_variant(&self) -> Result<RegressionVariant, Error> {
        let self_attention = match self.variant() {
            SelfAttnVariant::None => false,
            SelfAttnVariant::HiddenOnly => true,
            other => {
                return Err(Error::Config(format!(
                    "self_attention {:?} needs token embeddings; de-noising supports none or hidden",
                    other.as_str()
                )))
            }
        };
        Ok(RegressionVariant { family: self.model, self_attention })
    }

    pub fn caption_kind(&self) -> CaptionModelKind {
        CaptionModelKind { family: self.model, variant: self.variant(), oracle_word: self.oracle_word }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_json(r#"{"task": "denoise", "learning_rate": 0.1}"#).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
        let err = RunConfig::from_json(r#"{"denoise": {"stepz": 3}}"#).unwrap_err().to_string();
        assert!(err.contains("stepz"), "{err}");
    }

    #[test]
    fn variants_follow_the_task() {
        let mut c = RunConfig::from_json(r#"{"task": "denoise", "model": "middleout"}"#).unwrap();
        assert_eq!(c.regression_variant().unwrap(), RegressionVariant { family: Family::MiddleOut, self_attention: true });
        c.self_attention = Some(SelfAttnVariant::Dual);
        assert!(c.validate().is_err());
        let c = RunConfig::from_json(r#"{"task": "caption", "model": "middleout", "seed": 4}"#).unwrap();
        assert_eq!(c.caption_kind(), CaptionModelKind::MIDDLE_OUT);
        assert_eq!(c.caption_config().seed, 4);
        let c = RunConfig::from_json(r#"{"task": "caption", "model": "baseline", "oracle_word": true}"#).unwrap();
        assert_eq!(c.caption_kind(), CaptionModelKind::ORACLE_BASELINE);
        assert!(RunConfig::from_json(r#"{"task": "caption", "model": "middleout", "oracle_word": true}"#).is_err());
    }

    #[test]
    fn section_defaults_match_the_experiments() {
        let c = RunConfig::default();
        assert_eq!((c.denoise.train_count, c.denoise.test_count, c.denoise.lstm_size, c.denoise.steps), (1000, 100, 100, 20000));
        assert_eq!(c.denoise.lr, 1e-4);
        assert_eq!((c.caption.frames, c.caption.train_count, c.caption.test_count, c.caption.epochs), (8, 2000, 200, 15));
        assert_eq!((c.caption.lstm_size, c.caption.embed_size, c.caption.batch_size, c.caption.beam_size), (128, 64, 32, 8));
        assert_eq!(c.caption.feature_noise, 0.3);
    }
}
