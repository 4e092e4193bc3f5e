//! Experiment execution: expands a preset into cells × seeds, runs each
//! cell in a worker pool with dataset and run caching, and aggregates the
//! per-cell artifacts into experiment-level CSVs, summaries, and plots.
//!
//! Cell directory layout under `<out>/<preset>/<cell>/seed<k>/`:
//! `config.json`, `metrics.csv`, `transcript.jsonl`, `checkpoint.bin`,
//! `mapping_matrix.csv` (discrete) or `sketches.csv` + `dissimilarity.csv`
//! (sketch), and `summary.json` written last as the completion marker. A
//! rerun whose `config.json` matches an existing completed run reuses it.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{Agents, ChannelKind, Message, StrokeSet};
use crate::game::{
    self, Condition, EpisodeRecord, EvalOptions, GameError, Transcript,
};
use crate::metrics::{self, KeyedRecord, MetricsError};
use crate::raster::Raster;
use crate::stimuli::{Dataset, DatasetSpec, StimulusError};

use super::config::{ConfigError, DataPatch, GamePatch};
use super::plot;
use super::presets::{self, CellSpec, Preset};

#[derive(Debug, Error)]
pub enum ExpError {
    #[error("unknown preset {name:?}; known: {}", presets::PRESET_NAMES.join(", "))]
    UnknownPreset { name: String },

    #[error("no metrics found at {path}")]
    MissingMetrics { path: PathBuf },

    #[error("cell {cell:?} seed {seed}: {source}")]
    Cell { cell: String, seed: u64, source: Box<ExpError> },

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Game(#[from] GameError),

    #[error(transparent)]
    Stimulus(#[from] StimulusError),

    #[error(transparent)]
    Metrics(#[from] MetricsError),

    #[error(transparent)]
    Plot(#[from] super::plot::PlotError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialisation: {0}")]
    Json(#[from] serde_json::Error),
}

/// A fully resolved experiment request.
#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub preset: String,
    /// Overrides the preset's seed list when set.
    pub seeds: Option<Vec<u64>>,
    pub game: GamePatch,
    pub dataset: DataPatch,
    pub out: PathBuf,
    pub workers: usize,
    pub dump_sketches: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn new(preset: &str, out: &Path) -> Self {
        Self {
            preset: preset.to_string(),
            seeds: None,
            game: GamePatch::default(),
            dataset: DataPatch::default(),
            out: out.to_path_buf(),
            workers: 1,
            dump_sketches: None,
        }
    }
}

// ---- persisted summaries ------------------------------------------------------

/// Sketch-channel analyses of the final evaluation epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SketchSummary {
    pub cluster_purity: f64,
    pub cluster_cond_entropy: f64,
    pub span_correlation: f64,
    pub span_degenerate: bool,
}

/// One extra evaluation pass (e.g. a zero-shot test set).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub name: String,
    pub episodes: usize,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub novel_class: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub novel_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

/// Serialisable mirror of one generalisation-report entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenEntry {
    pub novel_class: u32,
    pub in_dist_accuracy: f64,
    pub novel_accuracy: f64,
    pub ceiling_key: Option<String>,
    pub ceiling_reuse_fraction: f64,
    pub ceiling_reuse: bool,
}

/// Everything recorded about one finished cell run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub seed: u64,
    pub channel: ChannelKind,
    pub condition: Condition,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub final_accuracy: f64,
    pub final_cond_entropy: f64,
    pub final_mean_len: f64,
    /// Distinct eval message keys in the final epoch (discrete only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distinct_messages: Option<usize>,
    pub wall_seconds: f64,
    pub dataset_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sketch: Option<SketchSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evals: Vec<EvalSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub generalisation: Vec<GenEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

// ---- dataset cache ------------------------------------------------------------

/// Datasets keyed by spec content hash. Specs are persisted under
/// `<out>/datasets/<hash-prefix>/spec.json`, so identical specs from
/// different presets share one directory; images are regenerated on demand
/// (generation is deterministic in the spec).
pub struct DatasetCache {
    dir: PathBuf,
    map: Mutex<BTreeMap<String, Arc<Dataset>>>,
}

impl DatasetCache {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir, map: Mutex::new(BTreeMap::new()) }
    }

    pub fn get(&self, spec: &DatasetSpec) -> Result<Arc<Dataset>, ExpError> {
        let hash = spec.content_hash();
        if let Some(d) = self.map.lock().unwrap().get(&hash) {
            return Ok(d.clone());
        }
        let data = Arc::new(Dataset::build(spec)?);
        let ddir = self.dir.join(&hash[..16]);
        std::fs::create_dir_all(&ddir)?;
        let spec_path = ddir.join("spec.json");
        if !spec_path.exists() {
            std::fs::write(&spec_path, serde_json::to_vec_pretty(spec)?)?;
        }
        Ok(self
            .map
            .lock()
            .unwrap()
            .entry(hash)
            .or_insert(data)
            .clone())
    }
}

// ---- the runner ---------------------------------------------------------------

/// Run every cell × seed of the named preset and aggregate the results.
/// Returns the experiment directory.
pub fn run_preset(spec: &ExperimentSpec) -> Result<PathBuf, ExpError> {
    let preset = presets::build(&spec.preset)
        .ok_or_else(|| ExpError::UnknownPreset { name: spec.preset.clone() })?;
    let seeds = spec.seeds.clone().unwrap_or_else(|| preset.seeds.clone());
    assert!(!seeds.is_empty(), "seed list must be non-empty");

    let mut cells = preset.cells.clone();
    for c in &mut cells {
        spec.game.apply(&mut c.game);
        spec.dataset.apply(&mut c.dataset)?;
        let shared = spec.dataset.shared_only();
        for ev in &mut c.evals {
            if let Some(d) = &mut ev.dataset {
                shared.apply(d)?;
            }
            if let Some(n) = spec.game.eval_episodes {
                ev.episodes = n;
            }
        }
    }

    let exp_dir = spec.out.join(preset.name);
    std::fs::create_dir_all(&exp_dir)?;
    let datasets = DatasetCache::new(spec.out.join("datasets"));

    let jobs: Mutex<VecDeque<(CellSpec, u64)>> = Mutex::new(
        cells
            .iter()
            .flat_map(|c| seeds.iter().map(move |&s| (c.clone(), s)))
            .collect(),
    );
    let results: Mutex<Vec<Result<CellSummary, (String, u64, ExpError)>>> =
        Mutex::new(Vec::new());

    let workers = spec.workers.max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = jobs.lock().unwrap().pop_front();
                let Some((cell, seed)) = job else { break };
                let outcome = run_cell(&cell, seed, &datasets, &exp_dir, spec.dump_sketches.as_deref())
                    .map_err(|e| (cell.name.clone(), seed, e));
                results.lock().unwrap().push(outcome);
            });
        }
    });

    let mut summaries = Vec::new();
    for r in results.into_inner().unwrap() {
        match r {
            Ok(s) => summaries.push(s),
            Err((cell, seed, source)) => {
                return Err(ExpError::Cell { cell, seed, source: Box::new(source) })
            }
        }
    }
    summaries.sort_by(|a, b| (&a.cell, a.seed).cmp(&(&b.cell, b.seed)));

    aggregate(&exp_dir, &preset, &cells, &seeds, &summaries)?;
    plot::render_plots(&exp_dir)?;
    Ok(exp_dir)
}

/// Load an existing run if its recorded configuration matches; otherwise
/// train from scratch and persist everything.
fn run_cell(
    cell: &CellSpec,
    seed: u64,
    datasets: &DatasetCache,
    exp_dir: &Path,
    dump_sketches: Option<&Path>,
) -> Result<CellSummary, ExpError> {
    let run_dir = exp_dir.join(&cell.name).join(format!("seed{seed}"));
    let mut cfg = cell.game.clone();
    cfg.seed = seed;

    let config_doc = serde_json::to_vec_pretty(&serde_json::json!({
        "cell": cell.name,
        "seed": seed,
        "game": cfg,
        "dataset": cell.dataset,
        "evals": cell.evals,
    }))?;
    let summary_path = run_dir.join("summary.json");
    let config_path = run_dir.join("config.json");
    if summary_path.exists() && config_path.exists() {
        if std::fs::read(&config_path)? == config_doc {
            let cached: CellSummary = serde_json::from_slice(&std::fs::read(&summary_path)?)?;
            return Ok(cached);
        }
    }
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(&config_path, &config_doc)?;

    let t0 = Instant::now();
    let data = datasets.get(&cell.dataset)?;
    let (agents, result) = game::train(&cfg, &data, Some(&run_dir))?;
    let last = result.epochs.last().expect("at least one epoch");
    let final_epoch = last.epoch;
    let final_records: Vec<&EpisodeRecord> = result
        .transcript
        .records
        .iter()
        .filter(|r| r.epoch == final_epoch)
        .collect();

    let mut notes = Vec::new();
    let mut distinct_messages = None;
    let mut sketch_summary = None;

    match cfg.channel {
        ChannelKind::Discrete => {
            let mut table = metrics::CodeTable::new();
            for r in &final_records {
                if let Some(t) = &r.tokens {
                    table.add(r.sender_n, Message::new(t.clone(), cfg.variable_length).key());
                }
            }
            if !table.is_empty() {
                let mm = table.mapping_matrix()?;
                std::fs::write(run_dir.join("mapping_matrix.csv"), mm.to_csv_string())?;
                let distinct = table.message_counts().len();
                distinct_messages = Some(distinct);
                if distinct < cfg.classes.len().saturating_sub(1) {
                    notes.push(format!(
                        "only {distinct} distinct eval messages for {} classes",
                        cfg.classes.len()
                    ));
                }
            }
        }
        ChannelKind::Sketch => {
            sketch_summary = Some(analyse_sketches(
                &final_records,
                &cfg.classes,
                &agents,
                seed,
                &run_dir,
            )?);
            if let Some(dir) = dump_sketches {
                dump_class_sketches(&final_records, &agents, &cell.name, seed, dir)?;
            }
        }
    }

    // Extra evaluation passes (zero-shot sets and the like).
    let mut eval_summaries = Vec::new();
    let mut gen_sets: Vec<(u32, Vec<KeyedRecord>)> = Vec::new();
    for (idx, ev) in cell.evals.iter().enumerate() {
        let edata = match &ev.dataset {
            None => data.clone(),
            Some(d) => match datasets.get(d) {
                Ok(d) => d,
                Err(ExpError::Stimulus(StimulusError::InfeasibleConstraint { n, side, .. })) => {
                    let why = format!("dataset infeasible: {n} dots do not fit a {side}px canvas");
                    notes.push(format!("eval {} skipped: {why}", ev.name));
                    eval_summaries.push(EvalSummary {
                        name: ev.name.clone(),
                        episodes: 0,
                        accuracy: 0.0,
                        novel_class: ev.novel_class,
                        novel_accuracy: None,
                        skipped: Some(why),
                    });
                    continue;
                }
                Err(e) => return Err(e),
            },
        };
        let transcript = game::evaluate(
            &agents,
            &edata,
            &EvalOptions {
                classes: ev.classes.clone(),
                candidates: ev.candidates.min(ev.classes.len()),
                condition: ev.condition,
                split: ev.split,
                episodes: ev.episodes,
                epoch: final_epoch + 1,
                seed: seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(0xE7A1 + idx as u64),
            },
        )?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(
            run_dir.join(format!("eval_{}.jsonl", ev.name)),
        )?);
        transcript.append_jsonl(&mut w)?;
        use std::io::Write as _;
        w.flush()?;

        let accuracy = transcript.accuracy().unwrap_or(0.0);
        let novel_accuracy = match ev.novel_class {
            Some(n) => {
                let recs: Vec<(u32, bool)> =
                    transcript.records.iter().map(|r| (r.sender_n, r.correct)).collect();
                metrics::accuracy(&recs, Some(&[n])).ok()
            }
            None => None,
        };
        eval_summaries.push(EvalSummary {
            name: ev.name.clone(),
            episodes: transcript.records.len(),
            accuracy,
            novel_class: ev.novel_class,
            novel_accuracy,
            skipped: None,
        });
        if let Some(novel) = ev.novel_class {
            let keyed = keyed_records(&transcript, &cfg, &agents, seed)?;
            if keyed.iter().any(|(n, _, _)| *n == novel) {
                gen_sets.push((novel, keyed));
            } else {
                notes.push(format!(
                    "eval {}: no episodes drew the novel class; excluded from the generalisation report",
                    ev.name
                ));
            }
        }
    }

    let generalisation = if gen_sets.is_empty() {
        Vec::new()
    } else {
        metrics::generalisation_report(&cfg.classes, &gen_sets)?
            .entries
            .into_iter()
            .map(|e| GenEntry {
                novel_class: e.novel_class,
                in_dist_accuracy: e.in_dist_accuracy,
                novel_accuracy: e.novel_accuracy,
                ceiling_key: e.ceiling_key,
                ceiling_reuse_fraction: e.ceiling_reuse_fraction,
                ceiling_reuse: e.ceiling_reuse,
            })
            .collect()
    };

    let summary = CellSummary {
        cell: cell.name.clone(),
        seed,
        channel: cfg.channel,
        condition: cfg.condition,
        epochs_run: result.epochs.len(),
        stopped_early: result.stopped_early,
        final_accuracy: last.accuracy,
        final_cond_entropy: last.cond_entropy,
        final_mean_len: last.mean_len,
        distinct_messages,
        wall_seconds: t0.elapsed().as_secs_f64(),
        dataset_hash: cell.dataset.content_hash()[..16].to_string(),
        sketch: sketch_summary,
        evals: eval_summaries,
        generalisation,
        notes,
    };
    // summary.json is the completion marker, so it lands last via a rename.
    let tmp = run_dir.join("summary.json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(&summary)?)?;
    std::fs::rename(&tmp, &summary_path)?;
    Ok(summary)
}

/// Message (or cluster) keys for every record of a transcript, for the
/// generalisation report.
fn keyed_records(
    transcript: &Transcript,
    cfg: &game::GameConfig,
    agents: &Agents<f32>,
    seed: u64,
) -> Result<Vec<KeyedRecord>, ExpError> {
    match cfg.channel {
        ChannelKind::Discrete => Ok(transcript
            .records
            .iter()
            .map(|r| {
                let key = r
                    .tokens
                    .as_ref()
                    .map(|t| Message::new(t.clone(), cfg.variable_length).key())
                    .unwrap_or_default();
                (r.sender_n, key, r.correct)
            })
            .collect()),
        ChannelKind::Sketch => {
            // One clustering over the whole eval set, so novel-class keys are
            // directly comparable with trained-class keys.
            let canvases: Vec<Raster> = transcript
                .records
                .iter()
                .map(|r| {
                    agents
                        .rasterize(&StrokeSet { coords: r.strokes.clone().unwrap_or_default() })
                        .canvas
                })
                .collect();
            let refs: Vec<&Raster> = canvases.iter().collect();
            let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed.wrapping_add(0xC1_57));
            let model = metrics::cluster_sketches(&refs, cfg.classes.len(), &mut rng)?;
            Ok(transcript
                .records
                .iter()
                .zip(&model.assignments)
                .map(|(r, &a)| (r.sender_n, format!("c{a}"), r.correct))
                .collect())
        }
    }
}

/// Final-epoch sketch analyses: persisted stroke table, k-means cluster
/// quality, numerosity-vs-extent correlation, per-class dissimilarity.
fn analyse_sketches(
    final_records: &[&EpisodeRecord],
    classes: &[u32],
    agents: &Agents<f32>,
    seed: u64,
    run_dir: &Path,
) -> Result<SketchSummary, ExpError> {
    let with_strokes: Vec<(&EpisodeRecord, &Vec<[f64; 4]>)> = final_records
        .iter()
        .filter_map(|r| r.strokes.as_ref().map(|s| (*r, s)))
        .collect();

    // sketches.csv: class then x1,y1,x2,y2 per stroke, one row per episode.
    let strokes_per = with_strokes.first().map(|(_, s)| s.len()).unwrap_or(0);
    let mut csv = String::from("class");
    for k in 0..strokes_per {
        csv.push_str(&format!(",x1_{k},y1_{k},x2_{k},y2_{k}"));
    }
    csv.push('\n');
    for (r, strokes) in &with_strokes {
        csv.push_str(&r.sender_n.to_string());
        for s in strokes.iter() {
            csv.push_str(&format!(",{},{},{},{}", s[0], s[1], s[2], s[3]));
        }
        csv.push('\n');
    }
    std::fs::write(run_dir.join("sketches.csv"), csv)?;

    let canvases: Vec<Raster> = with_strokes
        .iter()
        .map(|(_, s)| agents.rasterize(&StrokeSet { coords: (*s).clone() }).canvas)
        .collect();
    let labels: Vec<u32> = with_strokes.iter().map(|(r, _)| r.sender_n).collect();

    let refs: Vec<&Raster> = canvases.iter().collect();
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed.wrapping_add(0x5C_A7));
    let model = metrics::cluster_sketches(&refs, classes.len(), &mut rng)?;
    let cluster_purity = metrics::purity(&model.assignments, &labels, model.k);
    let mut table = metrics::CodeTable::new();
    for (l, a) in labels.iter().zip(&model.assignments) {
        table.add(*l, format!("c{a}"));
    }
    let cluster_cond_entropy = table.conditional_entropy()?;

    let spans: Vec<f64> = with_strokes
        .iter()
        .map(|(_, s)| metrics::stroke_bbox_diag(&StrokeSet { coords: (*s).clone() }))
        .collect();
    let ns: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let corr = metrics::pearson(&ns, &spans);

    let mut groups: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
    for (canvas, &label) in canvases.iter().zip(&labels) {
        groups.entry(label).or_default().push(metrics::sketch_point(canvas, 16));
    }
    let dissim = metrics::pairwise_dissimilarity(&groups)?;
    std::fs::write(run_dir.join("dissimilarity.csv"), dissim.to_csv_string())?;

    Ok(SketchSummary {
        cluster_purity,
        cluster_cond_entropy,
        span_correlation: corr.r,
        span_degenerate: corr.degenerate,
    })
}

/// `--dump-sketches`: one rendered PNG per class (first final-epoch eval
/// sketch of that class).
fn dump_class_sketches(
    final_records: &[&EpisodeRecord],
    agents: &Agents<f32>,
    cell: &str,
    seed: u64,
    dir: &Path,
) -> Result<(), ExpError> {
    std::fs::create_dir_all(dir)?;
    let mut seen: BTreeMap<u32, &Vec<[f64; 4]>> = BTreeMap::new();
    for r in final_records {
        if let Some(s) = &r.strokes {
            seen.entry(r.sender_n).or_insert(s);
        }
    }
    for (class, strokes) in seen {
        let sk = agents.rasterize(&StrokeSet { coords: strokes.clone() });
        let side = sk.canvas.side();
        let mut img = image::GrayImage::new(side as u32, side as u32);
        for (i, px) in sk.canvas.data().iter().enumerate() {
            let v = (px.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel((i % side) as u32, (i / side) as u32, image::Luma([v]));
        }
        img.save(dir.join(format!("{cell}-seed{seed}-class{class}.png")))
            .map_err(|e| ExpError::Io(std::io::Error::other(e)))?;
    }
    Ok(())
}

// ---- aggregation --------------------------------------------------------------

/// Across-seed aggregate for one cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellAggregate {
    pub cell: String,
    pub seeds: Vec<u64>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub cond_entropy_mean: f64,
    pub cond_entropy_std: f64,
    pub mean_len_mean: f64,
    pub mean_len_std: f64,
}

/// Top-level experiment summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub preset: String,
    pub about: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellAggregate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vocab_table: Vec<(usize, f64, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub generalisation: Vec<GenAggregate>,
    pub runs: Vec<CellSummary>,
}

/// Across-seed aggregate of one zero-shot test set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenAggregate {
    pub novel_class: u32,
    pub novel_accuracy_mean: f64,
    pub ceiling_reuse_fraction_mean: f64,
    /// True when a majority of seeds reuse the top trained class's code.
    pub ceiling_reuse_majority: bool,
    pub seeds_counted: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn aggregate(
    exp_dir: &Path,
    preset: &Preset,
    cells: &[CellSpec],
    seeds: &[u64],
    summaries: &[CellSummary],
) -> Result<(), ExpError> {
    // curves.csv concatenates every run's persisted metrics.csv.
    let mut curves = String::from("cell,seed,epoch,accuracy,cond_entropy,mean_len\n");
    for c in cells {
        for &s in seeds {
            let path = exp_dir.join(&c.name).join(format!("seed{s}")).join("metrics.csv");
            if !path.exists() {
                return Err(ExpError::MissingMetrics { path });
            }
            for row in game::read_metrics_csv(&path)? {
                curves.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    c.name, s, row.epoch, row.accuracy, row.cond_entropy, row.mean_len
                ));
            }
        }
    }
    std::fs::write(exp_dir.join("curves.csv"), curves)?;

    let mut aggregates = Vec::new();
    for c in cells {
        let of_cell: Vec<&CellSummary> =
            summaries.iter().filter(|s| s.cell == c.name).collect();
        let accs: Vec<f64> = of_cell.iter().map(|s| s.final_accuracy).collect();
        let ents: Vec<f64> = of_cell.iter().map(|s| s.final_cond_entropy).collect();
        let lens: Vec<f64> = of_cell.iter().map(|s| s.final_mean_len).collect();
        let (am, asd) = mean_std(&accs);
        let (em, esd) = mean_std(&ents);
        let (lm, lsd) = mean_std(&lens);
        aggregates.push(CellAggregate {
            cell: c.name.clone(),
            seeds: of_cell.iter().map(|s| s.seed).collect(),
            accuracy_mean: am,
            accuracy_std: asd,
            cond_entropy_mean: em,
            cond_entropy_std: esd,
            mean_len_mean: lm,
            mean_len_std: lsd,
        });
    }

    let mut notes = Vec::new();
    same_vs_diff_notes(exp_dir, cells, &mut notes)?;
    frequency_notes(&aggregates, &mut notes);

    // Vocabulary sweep table: cells named v<N>.
    let mut vocab_table = Vec::new();
    for a in &aggregates {
        if let Some(v) = a.cell.strip_prefix('v').and_then(|v| v.parse::<usize>().ok()) {
            vocab_table.push((v, a.accuracy_mean, a.cond_entropy_mean));
        }
    }
    vocab_table.sort_unstable_by_key(|r| r.0);
    if !vocab_table.is_empty() {
        let mut t = String::from("vocab,accuracy,cond_entropy\n");
        for (v, a, e) in &vocab_table {
            t.push_str(&format!("{v},{a},{e}\n"));
        }
        std::fs::write(exp_dir.join("vocab_table.csv"), t)?;
    }

    // Zero-shot aggregate across seeds.
    let mut by_novel: BTreeMap<u32, Vec<&GenEntry>> = BTreeMap::new();
    for s in summaries {
        for g in &s.generalisation {
            by_novel.entry(g.novel_class).or_default().push(g);
        }
    }
    let generalisation: Vec<GenAggregate> = by_novel
        .into_iter()
        .map(|(novel, entries)| {
            let (nam, _) = mean_std(&entries.iter().map(|e| e.novel_accuracy).collect::<Vec<_>>());
            let (rm, _) = mean_std(
                &entries.iter().map(|e| e.ceiling_reuse_fraction).collect::<Vec<_>>(),
            );
            let reused = entries.iter().filter(|e| e.ceiling_reuse).count();
            GenAggregate {
                novel_class: novel,
                novel_accuracy_mean: nam,
                ceiling_reuse_fraction_mean: rm,
                ceiling_reuse_majority: 2 * reused > entries.len(),
                seeds_counted: entries.len(),
            }
        })
        .collect();

    let summary = ExperimentSummary {
        preset: preset.name.to_string(),
        about: preset.about.to_string(),
        seeds: seeds.to_vec(),
        cells: aggregates,
        notes,
        vocab_table,
        generalisation,
        runs: summaries.to_vec(),
    };
    std::fs::write(exp_dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(())
}

/// Monitored (not asserted): Same-condition accuracy should dominate Diff
/// at every epoch; violations become summary notes.
fn same_vs_diff_notes(
    exp_dir: &Path,
    cells: &[CellSpec],
    notes: &mut Vec<String>,
) -> Result<(), ExpError> {
    for c in cells {
        let Some(stem) = c.name.strip_suffix("-same") else { continue };
        let diff_name = format!("{stem}-diff");
        if !cells.iter().any(|c2| c2.name == diff_name) {
            continue;
        }
        let mean_curve = |name: &str| -> Result<BTreeMap<usize, (f64, usize)>, ExpError> {
            let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            let cell_dir = exp_dir.join(name);
            for entry in std::fs::read_dir(&cell_dir)? {
                let p = entry?.path().join("metrics.csv");
                if !p.exists() {
                    continue;
                }
                for row in game::read_metrics_csv(&p)? {
                    let e = acc.entry(row.epoch).or_insert((0.0, 0));
                    e.0 += row.accuracy;
                    e.1 += 1;
                }
            }
            Ok(acc)
        };
        let same = mean_curve(&c.name)?;
        let diff = mean_curve(&diff_name)?;
        let mut violations = Vec::new();
        for (epoch, (sum_s, n_s)) in &same {
            if let Some((sum_d, n_d)) = diff.get(epoch) {
                let ms = sum_s / *n_s as f64;
                let md = sum_d / *n_d as f64;
                if md > ms + 1e-9 {
                    violations.push(*epoch);
                }
            }
        }
        if !violations.is_empty() {
            notes.push(format!(
                "{}: diff accuracy exceeds same at epochs {:?}",
                stem, violations
            ));
        }
    }
    Ok(())
}

/// Frequency-skew comparison: flag the lowest-accuracy profile and the
/// direction of the gap.
fn frequency_notes(aggregates: &[CellAggregate], notes: &mut Vec<String>) {
    let find = |name: &str| aggregates.iter().find(|a| a.cell == name);
    let (Some(u), Some(inc), Some(dec)) = (find("uniform"), find("increase"), find("decrease"))
    else {
        return;
    };
    let mut rows = [
        ("uniform", u.accuracy_mean),
        ("increase", inc.accuracy_mean),
        ("decrease", dec.accuracy_mean),
    ];
    rows.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let (lowest, lo) = rows[0];
    let (_, hi) = rows[2];
    notes.push(format!(
        "lowest accuracy profile: {lowest} ({lo:.3}); spread {:.3}",
        hi - lo
    ));
    if dec.accuracy_mean < u.accuracy_mean && dec.accuracy_mean < inc.accuracy_mean {
        notes.push(
            "decrease profile (fewest high-numerosity samples) trails, as published".into(),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::SplitSelector;

    fn tiny_spec(preset: &str, out: &Path) -> ExperimentSpec {
        let mut spec = ExperimentSpec::new(preset, out);
        spec.seeds = Some(vec![0]);
        spec.game = GamePatch {
            epochs: Some(1),
            steps_per_epoch: Some(1),
            batch: Some(2),
            eval_episodes: Some(12),
            eval_split: Some(SplitSelector::Test),
            ..GamePatch::default()
        };
        spec.dataset = DataPatch {
            // Diff-condition eval needs at least two test instances per class.
            counts: Some(super::super::config::CountSpec::Named("uniform:10".into())),
            canvas_side: Some(32),
            area_range: Some((0.05, 0.30)),
            ..DataPatch::default()
        };
        spec.workers = 1;
        spec
    }

    #[test]
    fn unknown_preset_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec::new("fig0-nothing", tmp.path());
        match run_preset(&spec) {
            Err(ExpError::UnknownPreset { name }) => assert_eq!(name, "fig0-nothing"),
            other => panic!("expected UnknownPreset, got {other:?}"),
        }
    }

    #[test]
    fn tiny_vocab_sweep_runs_and_aggregates() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = tiny_spec("table1-vocab-sweep", tmp.path());
        let exp_dir = run_preset(&spec).unwrap();
        assert!(exp_dir.join("curves.csv").exists());
        assert!(exp_dir.join("summary.json").exists());
        assert!(exp_dir.join("vocab_table.csv").exists());
        for v in [3, 5, 10, 100] {
            let run = exp_dir.join(format!("v{v}")).join("seed0");
            assert!(run.join("metrics.csv").exists());
            assert!(run.join("transcript.jsonl").exists());
            assert!(run.join("checkpoint.bin").exists());
            assert!(run.join("summary.json").exists());
            assert!(run.join("mapping_matrix.csv").exists());
        }
        let summary: ExperimentSummary =
            serde_json::from_slice(&std::fs::read(exp_dir.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary.vocab_table.len(), 4);
        assert_eq!(summary.runs.len(), 4);

        // Second invocation reuses completed runs (summary identical).
        let again = run_preset(&spec).unwrap();
        let summary2: ExperimentSummary =
            serde_json::from_slice(&std::fs::read(again.join("summary.json")).unwrap()).unwrap();
        assert_eq!(
            serde_json::to_string(&summary.runs).unwrap(),
            serde_json::to_string(&summary2.runs).unwrap(),
            "cached reruns must reproduce run summaries exactly"
        );
    }

    #[test]
    fn tiny_sketch_cell_produces_sketch_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let dump = tmp.path().join("sketchdump");
        let mut spec = tiny_spec("figA4-sketch-zeroshot", tmp.path());
        spec.dump_sketches = Some(dump.clone());
        // Zero-shot sets at canvas 32 are partly infeasible; that must be
        // recorded, not fatal.
        let exp_dir = run_preset(&spec).unwrap();
        let run = exp_dir.join("sketch-diff").join("seed0");
        assert!(run.join("sketches.csv").exists());
        assert!(run.join("dissimilarity.csv").exists());
        let summary: CellSummary =
            serde_json::from_slice(&std::fs::read(run.join("summary.json")).unwrap()).unwrap();
        assert!(summary.sketch.is_some());
        assert!(!summary.evals.is_empty());
        let infeasible: Vec<_> =
            summary.evals.iter().filter(|e| e.skipped.is_some()).collect();
        assert!(
            !infeasible.is_empty(),
            "15 dots at 5% min ink cannot fit a 32px canvas; expected a skip note"
        );
        assert!(dump.read_dir().unwrap().next().is_some(), "sketch dump should not be empty");
    }
}
