//! Referential-game episode assembly, the multi-class hinge loss with
//! length regularisation, and the training/evaluation loops.
//!
//! One episode: the sender sees a target image and emits a message over the
//! configured channel; the receiver scores `C` candidate images (one per
//! distinct numerosity, order shuffled) and the argmax is its pick. The
//! `Same` condition puts the sender's exact image among the candidates; the
//! `Diff` condition uses a different instance of the same numerosity.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use diffcore::graph::{Binding, Graph, NodeId};
use diffcore::{Adam, AdamConfig, DiffError, GradBuffer, Real, Tensor};

use crate::agents::{AgentConfig, AgentError, Agents, ChannelKind, Message, StrokeSet};
use crate::metrics::{self, CodeTable};
use crate::stimuli::{Dataset, StimulusError};

#[derive(Debug, Error)]
pub enum GameError {
    #[error("need {need} distinct classes for an episode, have {have}")]
    InsufficientClasses { need: usize, have: usize },

    #[error("class {class} has {have} usable instances ({split} split), need {need}")]
    InsufficientInstances { class: u32, split: &'static str, have: usize, need: usize },

    #[error("class {class} not present in the dataset")]
    MissingClass { class: u32 },

    #[error("score index {index} out of range for {len} scores")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("training diverged at epoch {epoch}: non-finite loss; last good checkpoint retained")]
    DivergenceDetected { epoch: usize },

    #[error(transparent)]
    Agent(#[from] AgentError),

    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error(transparent)]
    Stimulus(#[from] StimulusError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("record serialisation: {0}")]
    Json(#[from] serde_json::Error),
}

/// Whether the receiver's correct candidate is the sender's exact image or
/// a different instance of the same numerosity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Same,
    Diff,
}

/// Which part of a dataset episodes draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSelector {
    Train,
    Test,
    All,
}

impl SplitSelector {
    fn name(self) -> &'static str {
        match self {
            SplitSelector::Train => "train",
            SplitSelector::Test => "test",
            SplitSelector::All => "all",
        }
    }
}

/// Everything one training run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameConfig {
    pub channel: ChannelKind,
    pub condition: Condition,
    /// Numerosity classes episodes are drawn from during training.
    pub classes: Vec<u32>,
    /// Candidate count `C` per episode.
    pub candidates: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub variable_length: bool,
    pub strokes: usize,
    pub thickness: f64,
    /// Hinge margin.
    pub margin: f64,
    /// Length-regularisation coefficient λ (discrete, variable-length only).
    pub lambda: f64,
    /// Straight-through temperature, annealed linearly across epochs.
    pub tau_start: f64,
    pub tau_end: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Eval-mode episodes per epoch (held-out metrics).
    pub eval_episodes: usize,
    /// Split used for the per-epoch evaluation.
    pub eval_split: SplitSelector,
    /// Stop once eval accuracy reaches this level, if set.
    pub early_stop_acc: Option<f64>,
    pub seed: u64,
}

impl GameConfig {
    pub fn default_discrete() -> Self {
        Self {
            channel: ChannelKind::Discrete,
            condition: Condition::Diff,
            classes: vec![1, 2, 3, 4, 5],
            candidates: 5,
            vocab: 3,
            max_len: 5,
            variable_length: true,
            strokes: 5,
            thickness: 1.5 / 64.0,
            margin: 1.0,
            lambda: 0.005,
            tau_start: 2.0,
            tau_end: 0.5,
            lr: 1e-3,
            batch: 32,
            epochs: 60,
            steps_per_epoch: 25,
            eval_episodes: 200,
            eval_split: SplitSelector::Test,
            early_stop_acc: None,
            seed: 0,
        }
    }

    pub fn default_sketch() -> Self {
        Self { channel: ChannelKind::Sketch, lambda: 0.0, ..Self::default_discrete() }
    }

    pub fn agent_config(&self, canvas_side: usize) -> AgentConfig {
        let mut a = AgentConfig::default_for(self.channel);
        a.canvas_side = canvas_side;
        a.vocab = self.vocab;
        a.max_len = self.max_len;
        a.variable_length = self.variable_length;
        a.strokes = self.strokes;
        a.thickness = self.thickness;
        a
    }

    fn validate(&self, data: &Dataset) -> Result<(), GameError> {
        if self.candidates < 2 || self.candidates > self.classes.len() {
            return Err(GameError::InsufficientClasses {
                need: self.candidates.max(2),
                have: self.classes.len(),
            });
        }
        for &c in &self.classes {
            if data.class(c).is_none() {
                return Err(GameError::MissingClass { class: c });
            }
        }
        assert!(self.lambda >= 0.0, "lambda must be non-negative");
        assert!(self.margin > 0.0, "margin must be positive");
        assert!(self.batch >= 1 && self.epochs >= 1 && self.steps_per_epoch >= 1);
        Ok(())
    }
}

// ---- episode assembly ---------------------------------------------------------

/// A fully specified episode: image references (class, index into the
/// class's image list) rather than pixels, so embedding caches can key on
/// them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub condition: Condition,
    pub sender_ref: (u32, usize),
    pub candidate_refs: Vec<(u32, usize)>,
    pub target_index: usize,
}

fn split_range(data: &Dataset, class: u32, split: SplitSelector) -> Result<(usize, usize), GameError> {
    let cs = data.class(class).ok_or(GameError::MissingClass { class })?;
    let (base, len) = match split {
        SplitSelector::Train => (0, cs.train),
        SplitSelector::Test => (cs.train, cs.images.len() - cs.train),
        SplitSelector::All => (0, cs.images.len()),
    };
    Ok((base, len))
}

/// Draw one episode. The rng consumption order is fixed: target class,
/// sender instance, distractor classes (without replacement), candidate
/// instances in list order, then the candidate shuffle.
pub fn assemble_episode(
    data: &Dataset,
    classes: &[u32],
    candidates: usize,
    condition: Condition,
    split: SplitSelector,
    rng: &mut ChaCha8Rng,
) -> Result<Episode, GameError> {
    if classes.len() < candidates || candidates < 2 {
        return Err(GameError::InsufficientClasses { need: candidates.max(2), have: classes.len() });
    }
    let target_class = classes[rng.random_range(0..classes.len())];
    let (base, len) = split_range(data, target_class, split)?;
    let min_needed = match condition {
        Condition::Same => 1,
        Condition::Diff => 2,
    };
    if len < min_needed {
        return Err(GameError::InsufficientInstances {
            class: target_class,
            split: split.name(),
            have: len,
            need: min_needed,
        });
    }
    let sender_rel = rng.random_range(0..len);
    let sender_ref = (target_class, base + sender_rel);

    // Distractor classes drawn without replacement.
    let mut rest: Vec<u32> = classes.iter().copied().filter(|&c| c != target_class).collect();
    let mut chosen = vec![target_class];
    for _ in 0..candidates - 1 {
        let i = rng.random_range(0..rest.len());
        chosen.push(rest.swap_remove(i));
    }

    // One instance per candidate class; in Diff the correct candidate must
    // be a different instance than the sender's.
    let mut refs: Vec<(u32, usize)> = Vec::with_capacity(candidates);
    for (pos, &c) in chosen.iter().enumerate() {
        let (cb, cl) = split_range(data, c, split)?;
        if cl == 0 {
            return Err(GameError::InsufficientInstances {
                class: c,
                split: split.name(),
                have: 0,
                need: 1,
            });
        }
        let idx = if pos == 0 {
            match condition {
                Condition::Same => sender_rel,
                Condition::Diff => {
                    let mut j = rng.random_range(0..cl - 1);
                    if j >= sender_rel {
                        j += 1;
                    }
                    j
                }
            }
        } else {
            rng.random_range(0..cl)
        };
        refs.push((c, cb + idx));
    }

    // Uniform candidate order via Fisher-Yates.
    for i in (1..refs.len()).rev() {
        let j = rng.random_range(0..=i);
        refs.swap(i, j);
    }
    let target_index = refs.iter().position(|&(c, _)| c == target_class).unwrap();
    Ok(Episode { condition, sender_ref, candidate_refs: refs, target_index })
}

// ---- losses -------------------------------------------------------------------

/// Multi-class hinge: `Σ_{j≠target} max(0, margin − s_target + s_j)`.
pub fn hinge_loss(scores: &[f64], target: usize, margin: f64) -> Result<f64, GameError> {
    if target >= scores.len() {
        return Err(GameError::IndexOutOfRange { index: target, len: scores.len() });
    }
    let st = scores[target];
    Ok(scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target)
        .map(|(_, &s)| (margin - st + s).max(0.0))
        .sum())
}

/// Length penalty added to an episode's loss: `λ · effective_len`.
pub fn length_penalty(m: &Message, lambda: f64) -> f64 {
    lambda * m.effective_len as f64
}

fn hinge_node<R: Real>(
    g: &mut Graph<R>,
    scores: &[NodeId],
    target: usize,
    margin: R,
) -> NodeId {
    let st = scores[target];
    let mut acc: Option<NodeId> = None;
    for (j, &s) in scores.iter().enumerate() {
        if j == target {
            continue;
        }
        let d = g.sub(s, st);
        let shifted = g.add_scalar(d, margin);
        let h = g.relu(shifted);
        acc = Some(match acc {
            None => h,
            Some(a) => g.add(a, h),
        });
    }
    acc.unwrap_or_else(|| g.input(Tensor::scalar(R::ZERO)))
}

// ---- transcripts --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

/// One evaluated episode, as persisted to the transcript JSONL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub sender_n: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<u16>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strokes: Option<Vec<[f64; 4]>>,
    pub predicted_n: u32,
    pub correct: bool,
    pub eff_len: usize,
}

/// Append-only episode log for one run (or one evaluation call).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transcript {
    pub records: Vec<EpisodeRecord>,
}

impl Transcript {
    pub fn accuracy(&self) -> Result<f64, metrics::MetricsError> {
        let recs: Vec<(u32, bool)> = self.records.iter().map(|r| (r.sender_n, r.correct)).collect();
        metrics::accuracy(&recs, None)
    }

    pub fn mean_eff_len(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.eff_len as f64).sum::<f64>() / self.records.len() as f64
    }

    /// (numerosity, message key) table for discrete-channel records.
    pub fn code_table(&self, variable_length: bool) -> CodeTable {
        let mut t = CodeTable::new();
        for r in &self.records {
            if let Some(tokens) = &r.tokens {
                t.add(r.sender_n, Message::new(tokens.clone(), variable_length).key());
            }
        }
        t
    }

    pub fn append_jsonl(&self, w: &mut impl std::io::Write) -> Result<(), GameError> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

// ---- evaluation ---------------------------------------------------------------

/// Parameters of one evaluation pass.
#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub classes: Vec<u32>,
    pub candidates: usize,
    pub condition: Condition,
    pub split: SplitSelector,
    pub episodes: usize,
    /// Stamped into every record.
    pub epoch: usize,
    pub seed: u64,
}

/// Deterministic eval-mode pass: argmax decoding, no parameter updates.
///
/// Embeddings (and rendered sketches) are computed once per distinct image
/// and cached for the pass, since parameters are frozen.
pub fn evaluate(
    agents: &Agents<f32>,
    data: &Dataset,
    opts: &EvalOptions,
) -> Result<Transcript, GameError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut embed_cache: BTreeMap<(u32, usize), Vec<f32>> = BTreeMap::new();
    let mut sketch_cache: BTreeMap<(u32, usize), (StrokeSet, Vec<f32>)> = BTreeMap::new();
    let mut records = Vec::with_capacity(opts.episodes);

    for _ in 0..opts.episodes {
        let ep = assemble_episode(
            data,
            &opts.classes,
            opts.candidates,
            opts.condition,
            opts.split,
            &mut rng,
        )?;
        let mut fetch_embed = |key: (u32, usize)| -> Result<Vec<f32>, GameError> {
            if let Some(e) = embed_cache.get(&key) {
                return Ok(e.clone());
            }
            let img = &data.class(key.0).unwrap().images[key.1];
            let e = agents.encode(&img.canvas)?;
            embed_cache.insert(key, e.clone());
            Ok(e)
        };
        let cand_embeds: Vec<Vec<f32>> = ep
            .candidate_refs
            .iter()
            .map(|&r| fetch_embed(r))
            .collect::<Result<_, _>>()?;
        let sender_embed = fetch_embed(ep.sender_ref)?;

        let (scores, tokens, strokes, eff_len) = match agents.cfg.channel {
            ChannelKind::Discrete => {
                let msg = agents.send_discrete(&sender_embed)?;
                let scores = agents.receive_discrete(&msg.tokens, &cand_embeds)?;
                let eff = msg.effective_len;
                (scores, Some(msg.tokens), None, eff)
            }
            ChannelKind::Sketch => {
                let (strokes, semb) = match sketch_cache.get(&ep.sender_ref) {
                    Some(v) => v.clone(),
                    None => {
                        let strokes = agents.send_sketch(&sender_embed)?;
                        let sk = agents.rasterize(&strokes);
                        let semb = agents.encode(&sk.canvas)?;
                        sketch_cache.insert(ep.sender_ref, (strokes.clone(), semb.clone()));
                        (strokes, semb)
                    }
                };
                let scores = agents.score_embeddings(&semb, &cand_embeds)?;
                let k = strokes.coords.len();
                (scores, None, Some(strokes.coords.clone()), k)
            }
        };

        // Argmax pick; ties go to the lowest index.
        let mut pick = 0usize;
        for i in 1..scores.len() {
            if scores[i] > scores[pick] {
                pick = i;
            }
        }
        let predicted_n = ep.candidate_refs[pick].0;
        records.push(EpisodeRecord {
            epoch: opts.epoch,
            phase: Phase::Eval,
            sender_n: ep.sender_ref.0,
            tokens,
            strokes,
            predicted_n,
            correct: pick == ep.target_index,
            eff_len,
        });
    }
    Ok(Transcript { records })
}

// ---- training -----------------------------------------------------------------

/// Per-epoch metrics row, exactly the persisted CSV columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub accuracy: f64,
    pub cond_entropy: f64,
    pub mean_len: f64,
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub epochs: Vec<EpochMetrics>,
    pub transcript: Transcript,
    pub stopped_early: bool,
    pub mean_train_loss: Vec<f64>,
}

impl TrainResult {
    pub fn final_metrics(&self) -> &EpochMetrics {
        self.epochs.last().expect("at least one epoch")
    }
}

/// Conditional entropy of one epoch's eval records. Discrete messages key
/// on their effective prefix; sketches are discretised by k-means (k =
/// class count) on that epoch's rendered sketches.
fn epoch_cond_entropy(
    epoch_records: &[EpisodeRecord],
    cfg: &GameConfig,
    agents: &Agents<f32>,
    seed: u64,
) -> f64 {
    match cfg.channel {
        ChannelKind::Discrete => {
            let t = Transcript { records: epoch_records.to_vec() };
            t.code_table(cfg.variable_length)
                .conditional_entropy()
                .unwrap_or(0.0)
        }
        ChannelKind::Sketch => {
            let canvases: Vec<crate::raster::Raster> = epoch_records
                .iter()
                .filter_map(|r| r.strokes.as_ref())
                .map(|coords| {
                    agents
                        .rasterize(&StrokeSet { coords: coords.clone() })
                        .canvas
                })
                .collect();
            let refs: Vec<&crate::raster::Raster> = canvases.iter().collect();
            let k = cfg.classes.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match metrics::cluster_sketches(&refs, k, &mut rng) {
                Ok(model) => {
                    let mut table = CodeTable::new();
                    for (r, &a) in epoch_records.iter().zip(&model.assignments) {
                        table.add(r.sender_n, format!("c{a}"));
                    }
                    table.conditional_entropy().unwrap_or(0.0)
                }
                Err(_) => 0.0,
            }
        }
    }
}

/// Build one training episode's loss graph and return the loss node.
fn episode_loss<R: Real>(
    agents: &Agents<R>,
    data: &Dataset,
    ep: &Episode,
    cfg: &GameConfig,
    tau: R,
    g: &mut Graph<R>,
    bind: &mut Binding,
    rng_gumbel: &mut ChaCha8Rng,
) -> Result<NodeId, GameError> {
    // Encode each distinct image once; the Same condition then shares the
    // sender's encode with the matching candidate automatically.
    let mut encoded: BTreeMap<(u32, usize), NodeId> = BTreeMap::new();
    let mut encode = |g: &mut Graph<R>,
                      bind: &mut Binding,
                      key: (u32, usize)|
     -> Result<NodeId, GameError> {
        if let Some(&n) = encoded.get(&key) {
            return Ok(n);
        }
        let img = &data.class(key.0).unwrap().images[key.1];
        let x = agents.image_input(g, &img.canvas)?;
        let e = agents.encode_node(g, bind, x);
        encoded.insert(key, e);
        Ok(e)
    };

    let cand_nodes: Vec<NodeId> = ep
        .candidate_refs
        .iter()
        .map(|&r| encode(g, bind, r))
        .collect::<Result<_, _>>()?;
    let sender_e = encode(g, bind, ep.sender_ref)?;

    let margin = R::from_f64(cfg.margin);
    let loss = match cfg.channel {
        ChannelKind::Discrete => {
            let rollout = agents.sender_rollout(g, bind, sender_e, Some((tau, rng_gumbel)))?;
            let scores =
                agents.receiver_scores(g, bind, &rollout.onehot_nodes, &rollout.tokens, &cand_nodes)?;
            let mut loss = hinge_node(g, &scores, ep.target_index, margin);
            if cfg.lambda > 0.0 {
                if let Some(el) = rollout.expected_len {
                    let pen = g.mul_scalar(el, R::from_f64(cfg.lambda));
                    loss = g.add(loss, pen);
                }
            }
            loss
        }
        ChannelKind::Sketch => {
            let coords = agents.sketch_coords_node(g, bind, sender_e)?;
            let sk_input = agents.sketch_input_node(g, coords);
            let msg_e = agents.encode_node(g, bind, sk_input);
            let gain = R::from_f64(agents.score_gain());
            let msg_unit = g.normalize(msg_e, R::ONE);
            let scores: Vec<NodeId> = cand_nodes
                .iter()
                .map(|&c| {
                    let cu = g.normalize(c, R::ONE);
                    let d = g.dot(msg_unit, cu);
                    g.mul_scalar(d, gain)
                })
                .collect();
            hinge_node(g, &scores, ep.target_index, margin)
        }
    };
    Ok(loss)
}

/// Run the full training loop; returns the trained agents and per-epoch
/// metrics. With `out_dir` set, persists `checkpoint.bin`, `metrics.csv`,
/// and `transcript.jsonl` (eval records for every epoch).
///
/// On a non-finite loss the last epoch-end parameters are restored and
/// saved before the divergence error is returned.
pub fn train(
    cfg: &GameConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
) -> Result<(Agents<f32>, TrainResult), GameError> {
    cfg.validate(data)?;
    let acfg = cfg.agent_config(data.spec.canvas_side);
    let mut agents: Agents<f32> = Agents::new(acfg, cfg.seed);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &agents.params);
    let mut grads = GradBuffer::zeros_like(&agents.params);

    let mut rng_episode = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x45_50_49_53));
    let mut rng_gumbel = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x47_55_4D_42));

    let mut snapshot = agents.params.clone();
    let mut epochs_out: Vec<EpochMetrics> = Vec::new();
    let mut losses_out: Vec<f64> = Vec::new();
    let mut transcript = Transcript::default();
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let frac = if cfg.epochs > 1 { epoch as f64 / (cfg.epochs - 1) as f64 } else { 0.0 };
        let tau = (cfg.tau_start + (cfg.tau_end - cfg.tau_start) * frac) as f32;

        let mut epoch_loss = 0.0f64;
        for _ in 0..cfg.steps_per_epoch {
            grads.zero();
            let mut batch_loss = 0.0f64;
            for _ in 0..cfg.batch {
                let ep = assemble_episode(
                    data,
                    &cfg.classes,
                    cfg.candidates,
                    cfg.condition,
                    SplitSelector::Train,
                    &mut rng_episode,
                )?;
                let mut g: Graph<f32> = Graph::new();
                let mut bind = Binding::new(&agents.params);
                let loss =
                    episode_loss(&agents, data, &ep, cfg, tau, &mut g, &mut bind, &mut rng_gumbel)?;
                let lv = g.value(loss).item() as f64;
                if let Err(DiffError::NonFiniteValue { .. }) = g.backward(loss) {
                    agents.params = snapshot;
                    if let Some(dir) = out_dir {
                        std::fs::create_dir_all(dir)?;
                        agents.save(&dir.join("checkpoint.bin"))?;
                        write_metrics_csv(&epochs_out, &dir.join("metrics.csv"))?;
                    }
                    return Err(GameError::DivergenceDetected { epoch });
                }
                bind.accumulate_grads(&g, &mut grads);
                batch_loss += lv;
            }
            grads.scale(1.0 / cfg.batch as f32);
            adam.step(&mut agents.params, &grads);
            epoch_loss += batch_loss / cfg.batch as f64;
        }
        epoch_loss /= cfg.steps_per_epoch as f64;
        losses_out.push(epoch_loss);

        // Held-out evaluation on frozen parameters.
        let eval_seed = cfg
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(epoch as u64 + 1);
        let eval = evaluate(
            &agents,
            data,
            &EvalOptions {
                classes: cfg.classes.clone(),
                candidates: cfg.candidates,
                condition: cfg.condition,
                split: cfg.eval_split,
                episodes: cfg.eval_episodes,
                epoch,
                seed: eval_seed,
            },
        )?;
        let accuracy = eval.accuracy().unwrap_or(0.0);
        let cond_entropy =
            epoch_cond_entropy(&eval.records, cfg, &agents, eval_seed.wrapping_add(1));
        let mean_len = eval.mean_eff_len();
        transcript.records.extend(eval.records);
        epochs_out.push(EpochMetrics { epoch, accuracy, cond_entropy, mean_len });

        snapshot = agents.params.clone();
        if let Some(thr) = cfg.early_stop_acc {
            if accuracy >= thr {
                stopped_early = true;
                break;
            }
        }
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        agents.save(&dir.join("checkpoint.bin"))?;
        write_metrics_csv(&epochs_out, &dir.join("metrics.csv"))?;
        let mut w = BufWriter::new(File::create(dir.join("transcript.jsonl"))?);
        transcript.append_jsonl(&mut w)?;
        w.flush()?;
    }

    Ok((
        agents,
        TrainResult {
            epochs: epochs_out,
            transcript,
            stopped_early,
            mean_train_loss: losses_out,
        },
    ))
}

/// Write per-epoch metrics with the fixed column set
/// `epoch,accuracy,cond_entropy,mean_len`.
pub fn write_metrics_csv(rows: &[EpochMetrics], path: &Path) -> Result<(), GameError> {
    let mut out = String::from("epoch,accuracy,cond_entropy,mean_len\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.accuracy, r.cond_entropy, r.mean_len
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read back a metrics CSV written by [`write_metrics_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>, GameError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(io_of_csv)?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<EpochMetrics>() {
        rows.push(rec.map_err(io_of_csv)?);
    }
    Ok(rows)
}

fn io_of_csv(e: csv::Error) -> GameError {
    GameError::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::effective_len;
    use crate::stimuli::DatasetSpec;

    fn tiny_dataset(counts: usize, side: usize) -> Dataset {
        let spec = DatasetSpec {
            classes: vec![1, 2, 3, 4, 5],
            counts: vec![counts; 5],
            canvas_side: side,
            area_range: (0.05, 0.30),
            train_fraction: 0.75,
            seed: 1,
        };
        Dataset::build(&spec).unwrap()
    }

    #[test]
    fn hinge_matches_worked_examples() {
        assert_eq!(hinge_loss(&[5.0, 0.0, 0.0, 0.0, 0.0], 0, 1.0).unwrap(), 0.0);
        assert_eq!(hinge_loss(&[0.0, 0.0], 0, 1.0).unwrap(), 1.0);
        let v = hinge_loss(&[0.5, 1.0, -0.2], 0, 1.0).unwrap();
        assert!((v - 1.8).abs() < 1e-12, "got {v}");
        assert!(matches!(
            hinge_loss(&[0.0], 3, 1.0),
            Err(GameError::IndexOutOfRange { index: 3, len: 1 })
        ));
    }

    #[test]
    fn length_penalty_examples() {
        let m = Message::new(vec![2, 1, 1, 2, 1], true);
        assert_eq!(length_penalty(&m, 0.0), 0.0);
        assert!((length_penalty(&m, 0.005) - 0.025).abs() < 1e-12);
        let short = Message::new(vec![2, 0, 1, 1, 1], true);
        assert!((length_penalty(&short, 0.005) - 0.005).abs() < 1e-12);
    }

    #[test]
    fn episodes_have_distinct_classes_and_correct_target() {
        let data = tiny_dataset(8, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..50 {
            let cond = if i % 2 == 0 { Condition::Same } else { Condition::Diff };
            let ep = assemble_episode(&data, &[1, 2, 3, 4, 5], 5, cond, SplitSelector::Train, &mut rng)
                .unwrap();
            let mut classes: Vec<u32> = ep.candidate_refs.iter().map(|r| r.0).collect();
            assert_eq!(ep.candidate_refs[ep.target_index].0, ep.sender_ref.0);
            classes.sort_unstable();
            classes.dedup();
            assert_eq!(classes.len(), 5, "duplicate candidate class");
            match cond {
                Condition::Same => {
                    assert_eq!(ep.candidate_refs[ep.target_index], ep.sender_ref);
                }
                Condition::Diff => {
                    assert_ne!(ep.candidate_refs[ep.target_index].1, ep.sender_ref.1);
                }
            }
        }
    }

    #[test]
    fn episode_assembly_is_deterministic() {
        let data = tiny_dataset(6, 32);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10)
                .map(|_| {
                    assemble_episode(&data, &[1, 2, 3, 4, 5], 5, Condition::Diff, SplitSelector::All, &mut rng)
                        .unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn subset_candidates_draw_without_replacement() {
        let data = tiny_dataset(4, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // C=3 of 5 classes: all candidate classes distinct, target included.
        for _ in 0..30 {
            let ep = assemble_episode(&data, &[1, 2, 3, 4, 5], 3, Condition::Same, SplitSelector::All, &mut rng)
                .unwrap();
            assert_eq!(ep.candidate_refs.len(), 3);
            let mut cs: Vec<u32> = ep.candidate_refs.iter().map(|r| r.0).collect();
            cs.sort_unstable();
            cs.dedup();
            assert_eq!(cs.len(), 3);
        }
    }

    #[test]
    fn insufficient_classes_and_instances_error() {
        let data = tiny_dataset(4, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            assemble_episode(&data, &[1, 2, 3], 5, Condition::Same, SplitSelector::All, &mut rng),
            Err(GameError::InsufficientClasses { need: 5, have: 3 })
        ));
        // count=4, train_fraction=0.75 → 3 train / 1 test; Diff needs 2 in-split.
        let mut saw_error = false;
        for _ in 0..20 {
            match assemble_episode(&data, &[1, 2, 3, 4, 5], 5, Condition::Diff, SplitSelector::Test, &mut rng) {
                Err(GameError::InsufficientInstances { need: 2, have: 1, .. }) => {
                    saw_error = true;
                    break;
                }
                Err(e) => panic!("unexpected error {e:?}"),
                Ok(_) => panic!("Diff with single-instance split should fail"),
            }
        }
        assert!(saw_error);
    }

    #[test]
    fn every_parameter_receives_gradient_after_one_step() {
        // One training step = one accumulated batch. A single episode can
        // structurally skip e.g. the receiver's hidden-to-hidden weight
        // (message terminated at position 0 → one LSTM step from a zero
        // state), so the property is checked on the batch gradient.
        for channel in [ChannelKind::Discrete, ChannelKind::Sketch] {
            let data = tiny_dataset(4, 32);
            let mut cfg = GameConfig::default_discrete();
            cfg.channel = channel;
            cfg.seed = 11;
            let acfg = cfg.agent_config(32);
            let agents: Agents<f32> = Agents::new(acfg, cfg.seed);
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let mut rng_g = ChaCha8Rng::seed_from_u64(22);
            let mut grads = GradBuffer::zeros_like(&agents.params);
            let mut total_loss = 0.0f32;
            for _ in 0..8 {
                let ep = assemble_episode(&data, &[1, 2, 3, 4, 5], 5, Condition::Diff, SplitSelector::Train, &mut rng)
                    .unwrap();
                let mut g: Graph<f32> = Graph::new();
                let mut bind = Binding::new(&agents.params);
                let loss =
                    episode_loss(&agents, &data, &ep, &cfg, 1.0, &mut g, &mut bind, &mut rng_g)
                        .unwrap();
                total_loss += g.value(loss).item();
                g.backward(loss).unwrap();
                bind.accumulate_grads(&g, &mut grads);
            }
            assert!(total_loss > 0.0, "untrained batch loss should be positive");
            for (pid, buf) in grads.iter() {
                let nonzero = buf.iter().any(|&v| v != 0.0);
                assert!(
                    nonzero,
                    "{channel:?}: parameter {} received no gradient",
                    agents.params.name(pid)
                );
            }
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let data = tiny_dataset(4, 32);
        let cfg = GameConfig::default_discrete();
        let agents: Agents<f32> = Agents::new(cfg.agent_config(32), 5);
        let opts = EvalOptions {
            classes: vec![1, 2, 3, 4, 5],
            candidates: 5,
            condition: Condition::Same,
            split: SplitSelector::All,
            episodes: 40,
            epoch: 0,
            seed: 77,
        };
        let a = evaluate(&agents, &data, &opts).unwrap();
        let b = evaluate(&agents, &data, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 40);
    }

    #[test]
    fn tiny_training_run_produces_artifacts_deterministically() {
        let data = tiny_dataset(4, 32);
        let mut cfg = GameConfig::default_discrete();
        cfg.epochs = 2;
        cfg.steps_per_epoch = 2;
        cfg.batch = 2;
        cfg.eval_episodes = 20;
        cfg.eval_split = SplitSelector::Test;
        cfg.condition = Condition::Same;
        cfg.seed = 3;

        let run = |dir: &Path| {
            let (_, result) = train(&cfg, &data, Some(dir)).unwrap();
            assert_eq!(result.epochs.len(), 2);
            std::fs::read(dir.join("metrics.csv")).unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = run(d1.path());
        let m2 = run(d2.path());
        assert_eq!(m1, m2, "metrics CSV must be bit-identical across reruns");
        assert!(d1.path().join("checkpoint.bin").exists());
        assert!(d1.path().join("transcript.jsonl").exists());
        let rows = read_metrics_csv(&d1.path().join("metrics.csv")).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));

        // The checkpoint round-trips into agents that reproduce eval output.
        let acfg = cfg.agent_config(32);
        let restored: Agents<f32> = Agents::load(acfg, &d1.path().join("checkpoint.bin")).unwrap();
        let opts = EvalOptions {
            classes: cfg.classes.clone(),
            candidates: 5,
            condition: Condition::Same,
            split: SplitSelector::Test,
            episodes: 10,
            epoch: 0,
            seed: 1234,
        };
        let t = evaluate(&restored, &data, &opts).unwrap();
        assert_eq!(t.records.len(), 10);
    }

    #[test]
    fn effective_len_is_consistent_between_message_and_helper() {
        let m = Message::new(vec![1, 2, 0, 2], true);
        assert_eq!(m.effective_len, effective_len(&m.tokens, true));
    }
}
