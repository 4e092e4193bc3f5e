//! The registered experiment presets, one per reproduced figure or table.
//!
//! Every preset expands to a list of cells (one trained run per cell per
//! seed). Desk-scale defaults: canvas 64, 140 images per class (skewed
//! profiles keep the published ratios), 60 epochs.

use serde::{Deserialize, Serialize};

use crate::agents::ChannelKind;
use crate::game::{Condition, GameConfig, SplitSelector};
use crate::stimuli::DatasetSpec;

/// Extra evaluation pass run after a cell finishes training, e.g. a
/// zero-shot test set containing a class never trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub name: String,
    /// Class pool episodes draw from.
    pub classes: Vec<u32>,
    /// Candidate count; may exceed the training candidate count.
    pub candidates: usize,
    /// Dataset to evaluate on; `None` reuses the training dataset.
    pub dataset: Option<DatasetSpec>,
    pub episodes: usize,
    pub condition: Condition,
    pub split: SplitSelector,
    /// Class absent from training whose handling this eval probes.
    pub novel_class: Option<u32>,
}

/// One trained run specification (before the seed is fixed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub name: String,
    pub game: GameConfig,
    pub dataset: DatasetSpec,
    pub evals: Vec<EvalSpec>,
}

/// A named experiment: cells × seeds.
#[derive(Clone, Debug)]
pub struct Preset {
    pub name: &'static str,
    pub about: &'static str,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellSpec>,
}

pub const PRESET_NAMES: [&str; 8] = [
    "fig2-same-diff",
    "fig3-length-reg",
    "fig4-frequency",
    "fig5-extrapolation",
    "fig5-interpolation",
    "table1-vocab-sweep",
    "figA3-dissimilarity",
    "figA4-sketch-zeroshot",
];

fn base_dataset() -> DatasetSpec {
    DatasetSpec {
        classes: vec![1, 2, 3, 4, 5],
        counts: vec![140; 5],
        canvas_side: 64,
        area_range: (0.05, 0.10),
        train_fraction: 0.8,
        seed: 1,
    }
}

/// Evaluation-only dataset for zero-shot tests: training classes plus one
/// novel class, fresh instances. Episodes read it through the `All`
/// selector, so the train fraction never partitions anything.
fn ood_dataset(novel: u32) -> DatasetSpec {
    let mut classes = vec![1, 2, 3, 4, 5];
    if !classes.contains(&novel) {
        classes.push(novel);
        classes.sort_unstable();
    }
    let n = classes.len();
    DatasetSpec {
        classes,
        counts: vec![40; n],
        canvas_side: 64,
        area_range: (0.05, 0.10),
        train_fraction: 1.0,
        seed: 2,
    }
}

fn ood_eval(novel: u32, episodes: usize) -> EvalSpec {
    let data = ood_dataset(novel);
    EvalSpec {
        name: format!("ood+{novel}"),
        classes: data.classes.clone(),
        candidates: data.classes.len().min(6),
        dataset: Some(data),
        episodes,
        condition: Condition::Diff,
        split: SplitSelector::All,
        novel_class: Some(novel),
    }
}

/// Novel numerosities probed when extrapolating beyond a 1-5 training range.
pub const EXTRAPOLATION_CLASSES: [u32; 5] = [6, 7, 8, 10, 15];

fn cell(name: &str, game: GameConfig, dataset: DatasetSpec) -> CellSpec {
    CellSpec { name: name.to_string(), game, dataset, evals: Vec::new() }
}

/// Build a preset by name.
pub fn build(name: &str) -> Option<Preset> {
    let seeds = vec![0, 1, 2];
    let preset = match name {
        "fig2-same-diff" => {
            // Same vs Diff learning curves for both channels.
            let mut cells = Vec::new();
            for (ch, chname) in [(ChannelKind::Discrete, "discrete"), (ChannelKind::Sketch, "sketch")] {
                for (cond, cname) in [(Condition::Same, "same"), (Condition::Diff, "diff")] {
                    let mut g = match ch {
                        ChannelKind::Discrete => GameConfig::default_discrete(),
                        ChannelKind::Sketch => GameConfig::default_sketch(),
                    };
                    g.condition = cond;
                    cells.push(cell(&format!("{chname}-{cname}"), g, base_dataset()));
                }
            }
            Preset {
                name: "fig2-same-diff",
                about: "Accuracy and code entropy, identical vs different target instances.",
                seeds,
                cells,
            }
        }
        "fig3-length-reg" => {
            let mut cells = Vec::new();
            for lambda in [0.0, 0.005, 0.05] {
                let mut g = GameConfig::default_discrete();
                g.lambda = lambda;
                g.variable_length = true;
                cells.push(cell(&format!("lambda-{lambda}"), g, base_dataset()));
            }
            Preset {
                name: "fig3-length-reg",
                about: "Variable-length messages under a length penalty sweep.",
                seeds,
                cells,
            }
        }
        "fig4-frequency" => {
            let profiles: [(&str, Vec<usize>); 3] = [
                ("uniform", vec![140; 5]),
                ("increase", vec![20, 40, 60, 80, 140]),
                ("decrease", vec![140, 80, 60, 40, 20]),
            ];
            let mut cells = Vec::new();
            for (pname, counts) in profiles {
                let g = GameConfig::default_discrete();
                let mut d = base_dataset();
                d.counts = counts;
                cells.push(cell(pname, g, d));
            }
            Preset {
                name: "fig4-frequency",
                about: "Skewed per-class sample frequencies: uniform, increasing, decreasing.",
                seeds,
                cells,
            }
        }
        "fig5-extrapolation" => {
            let mut c = cell("discrete-diff", GameConfig::default_discrete(), base_dataset());
            c.evals = EXTRAPOLATION_CLASSES.iter().map(|&n| ood_eval(n, 200)).collect();
            Preset {
                name: "fig5-extrapolation",
                about: "Zero-shot tests on train + one higher numerosity per test set.",
                seeds,
                cells: vec![c],
            }
        }
        "fig5-interpolation" => {
            let mut g = GameConfig::default_discrete();
            g.classes = vec![1, 2, 4, 5];
            g.candidates = 4;
            let mut c = cell("hole-3", g, base_dataset());
            c.evals = vec![EvalSpec {
                name: "hole-3".into(),
                classes: vec![1, 2, 3, 4, 5],
                candidates: 5,
                dataset: None,
                episodes: 200,
                condition: Condition::Diff,
                split: SplitSelector::Test,
                novel_class: Some(3),
            }];
            Preset {
                name: "fig5-interpolation",
                about: "Withhold numerosity 3 during training, test on the full range.",
                seeds,
                cells: vec![c],
            }
        }
        "table1-vocab-sweep" => {
            let mut cells = Vec::new();
            for vocab in [3usize, 5, 10, 100] {
                let mut g = GameConfig::default_discrete();
                g.vocab = vocab;
                g.max_len = 5;
                g.variable_length = false;
                g.lambda = 0.0;
                cells.push(cell(&format!("v{vocab}"), g, base_dataset()));
            }
            Preset {
                name: "table1-vocab-sweep",
                about: "Fixed-length messages across vocabulary sizes 3, 5, 10, 100.",
                seeds,
                cells,
            }
        }
        "figA3-dissimilarity" => {
            let mut cells = Vec::new();
            for (cond, cname) in [(Condition::Same, "same"), (Condition::Diff, "diff")] {
                for strokes in [1usize, 5] {
                    let mut g = GameConfig::default_sketch();
                    g.condition = cond;
                    g.strokes = strokes;
                    cells.push(cell(&format!("sketch-{cname}-k{strokes}"), g, base_dataset()));
                }
            }
            Preset {
                name: "figA3-dissimilarity",
                about: "Per-class sketch dissimilarity for 1- and 5-line sketches.",
                seeds,
                cells,
            }
        }
        "figA4-sketch-zeroshot" => {
            let mut c = cell("sketch-diff", GameConfig::default_sketch(), base_dataset());
            c.evals = EXTRAPOLATION_CLASSES.iter().map(|&n| ood_eval(n, 200)).collect();
            Preset {
                name: "figA4-sketch-zeroshot",
                about: "Sketch-channel zero-shot tests on unseen numerosities.",
                seeds,
                cells: vec![c],
            }
        }
        _ => return None,
    };
    Some(preset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_name_builds() {
        for name in PRESET_NAMES {
            let p = build(name).unwrap_or_else(|| panic!("preset {name} missing"));
            assert_eq!(p.name, name);
            assert!(!p.cells.is_empty());
            assert!(!p.seeds.is_empty());
            for c in &p.cells {
                assert_eq!(c.dataset.classes.len(), c.dataset.counts.len());
                assert!(c.game.candidates <= c.game.classes.len());
            }
        }
        assert!(build("fig9-unknown").is_none());
    }

    #[test]
    fn vocab_sweep_disables_termination() {
        let p = build("table1-vocab-sweep").unwrap();
        assert_eq!(p.cells.len(), 4);
        for c in &p.cells {
            assert!(!c.game.variable_length);
            assert_eq!(c.game.max_len, 5);
        }
        assert_eq!(p.cells[3].game.vocab, 100);
    }

    #[test]
    fn extrapolation_sets_pair_train_with_one_novel() {
        let p = build("fig5-extrapolation").unwrap();
        let evals = &p.cells[0].evals;
        assert_eq!(evals.len(), EXTRAPOLATION_CLASSES.len());
        for (ev, &n) in evals.iter().zip(&EXTRAPOLATION_CLASSES) {
            assert_eq!(ev.novel_class, Some(n));
            let d = ev.dataset.as_ref().unwrap();
            assert!(d.classes.contains(&n));
            assert_eq!(d.classes.len(), 6);
            assert_ne!(d.seed, base_dataset().seed, "zero-shot instances must be fresh draws");
        }
    }

    #[test]
    fn frequency_profiles_preserve_published_ratios() {
        let p = build("fig4-frequency").unwrap();
        let by_name: std::collections::BTreeMap<_, _> =
            p.cells.iter().map(|c| (c.name.as_str(), &c.dataset.counts)).collect();
        assert_eq!(by_name["uniform"], &vec![140; 5]);
        assert_eq!(by_name["increase"], &vec![20, 40, 60, 80, 140]);
        assert_eq!(by_name["decrease"], &vec![140, 80, 60, 40, 20]);
    }
}
