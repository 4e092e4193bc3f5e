//! Experiment configuration: a TOML file of partial overrides layered over
//! preset defaults, with CLI flags layered over both (CLI > file > preset).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::ChannelKind;
use crate::game::{Condition, GameConfig, SplitSelector};
use crate::stimuli::DatasetSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("count spec {spec:?} not understood; use \"uniform:N\" or a per-class list")]
    BadCounts { spec: String },

    #[error("count list has {found} entries for {expected} classes")]
    CountLengthMismatch { expected: usize, found: usize },
}

/// Per-class image counts, either `"uniform:N"` or an explicit list aligned
/// with the class list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CountSpec {
    List(Vec<usize>),
    Named(String),
}

impl CountSpec {
    pub fn resolve(&self, n_classes: usize) -> Result<Vec<usize>, ConfigError> {
        match self {
            CountSpec::List(v) => {
                if v.len() != n_classes {
                    return Err(ConfigError::CountLengthMismatch {
                        expected: n_classes,
                        found: v.len(),
                    });
                }
                Ok(v.clone())
            }
            CountSpec::Named(s) => {
                let n = s
                    .strip_prefix("uniform:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| ConfigError::BadCounts { spec: s.clone() })?;
                Ok(vec![n; n_classes])
            }
        }
    }
}

/// Partial [`GameConfig`]: every present field overrides the preset value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GamePatch {
    pub channel: Option<ChannelKind>,
    pub condition: Option<Condition>,
    pub classes: Option<Vec<u32>>,
    pub candidates: Option<usize>,
    pub vocab: Option<usize>,
    pub max_len: Option<usize>,
    pub variable_length: Option<bool>,
    pub strokes: Option<usize>,
    pub thickness: Option<f64>,
    pub margin: Option<f64>,
    pub lambda: Option<f64>,
    pub tau_start: Option<f64>,
    pub tau_end: Option<f64>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
    pub steps_per_epoch: Option<usize>,
    pub eval_episodes: Option<usize>,
    pub eval_split: Option<SplitSelector>,
    pub early_stop_acc: Option<f64>,
}

macro_rules! patch_field {
    ($self:ident, $cfg:ident, $($f:ident),+) => {
        $(if let Some(v) = &$self.$f { $cfg.$f = v.clone(); })+
    };
}

impl GamePatch {
    pub fn apply(&self, cfg: &mut GameConfig) {
        patch_field!(
            self, cfg, channel, condition, classes, candidates, vocab, max_len,
            variable_length, strokes, thickness, margin, lambda, tau_start, tau_end,
            lr, batch, epochs, steps_per_epoch, eval_episodes, eval_split
        );
        if let Some(v) = self.early_stop_acc {
            cfg.early_stop_acc = Some(v);
        }
    }
}

/// Partial [`DatasetSpec`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPatch {
    pub classes: Option<Vec<u32>>,
    pub counts: Option<CountSpec>,
    pub canvas_side: Option<usize>,
    pub area_range: Option<(f64, f64)>,
    pub train_fraction: Option<f64>,
    pub seed: Option<u64>,
}

impl DataPatch {
    /// Apply to a full spec. Classes are patched before counts so a
    /// `"uniform:N"` count spec resolves against the final class list.
    pub fn apply(&self, spec: &mut DatasetSpec) -> Result<(), ConfigError> {
        if let Some(v) = &self.classes {
            spec.classes = v.clone();
        }
        if let Some(c) = &self.counts {
            spec.counts = c.resolve(spec.classes.len())?;
        } else if spec.counts.len() != spec.classes.len() {
            // A class override without a count override keeps the per-class
            // count of the first preset class.
            let per = spec.counts.first().copied().unwrap_or(0);
            spec.counts = vec![per; spec.classes.len()];
        }
        patch_field!(self, spec, canvas_side, area_range, train_fraction, seed);
        Ok(())
    }

    /// Subset of the patch that must stay consistent across every dataset an
    /// experiment touches (training and out-of-distribution evaluation
    /// alike): resolution and ink-area band.
    pub fn shared_only(&self) -> DataPatch {
        DataPatch {
            canvas_side: self.canvas_side,
            area_range: self.area_range,
            ..DataPatch::default()
        }
    }
}

/// One experiment TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentFile {
    pub preset: Option<String>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub dump_sketches: Option<PathBuf>,
    pub game: GamePatch,
    pub dataset: DataPatch,
}

impl ExperimentFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_with_partial_sections() {
        let text = r#"
            preset = "fig3-length-reg"
            seeds = [0, 1]

            [game]
            epochs = 10
            lambda = 0.05
            channel = "discrete"

            [dataset]
            counts = "uniform:12"
            canvas_side = 32
        "#;
        let f: ExperimentFile = toml::from_str(text).unwrap();
        assert_eq!(f.preset.as_deref(), Some("fig3-length-reg"));
        assert_eq!(f.seeds, Some(vec![0, 1]));
        assert_eq!(f.game.epochs, Some(10));
        assert_eq!(f.game.lambda, Some(0.05));
        assert_eq!(f.game.channel, Some(ChannelKind::Discrete));
        assert_eq!(f.dataset.canvas_side, Some(32));

        let mut cfg = GameConfig::default_discrete();
        f.game.apply(&mut cfg);
        assert_eq!(cfg.epochs, 10);
        assert_eq!(cfg.lambda, 0.05);
        assert_eq!(cfg.vocab, 3, "unpatched fields keep preset values");
    }

    #[test]
    fn count_specs_resolve() {
        assert_eq!(CountSpec::Named("uniform:140".into()).resolve(5).unwrap(), vec![140; 5]);
        assert_eq!(
            CountSpec::List(vec![20, 40, 60, 80, 140]).resolve(5).unwrap(),
            vec![20, 40, 60, 80, 140]
        );
        assert!(matches!(
            CountSpec::List(vec![1, 2]).resolve(5),
            Err(ConfigError::CountLengthMismatch { expected: 5, found: 2 })
        ));
        assert!(matches!(
            CountSpec::Named("all:9".into()).resolve(5),
            Err(ConfigError::BadCounts { .. })
        ));
    }

    #[test]
    fn list_counts_parse_from_toml() {
        let f: ExperimentFile =
            toml::from_str("[dataset]\ncounts = [20, 40, 60, 80, 140]\n").unwrap();
        assert_eq!(f.dataset.counts, Some(CountSpec::List(vec![20, 40, 60, 80, 140])));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(toml::from_str::<ExperimentFile>("[game]\nvocabulary = 3\n").is_err());
    }
}
