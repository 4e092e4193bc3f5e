//! The two neural agents and their shared visual encoder.
//!
//! One [`Agents`] value owns a single parameter set containing exactly one
//! encoder block — sender and receiver both read stimuli through it — plus
//! the channel-specific modules: an LSTM sender/receiver pair for the
//! discrete token channel, or a stroke-emitting sender for the sketch
//! channel (whose "receiver" is the encoder itself scoring the rendered
//! sketch against candidates).
//!
//! Every public operation has an evaluation form that builds a private
//! forward-only graph (deterministic, no sampling noise) and a graph form
//! used by the trainer to assemble one differentiable episode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::rc::Rc;
use thiserror::Error;

use diffcore::graph::{Binding, CustomOp, Graph, NodeId, OpCtx};
use diffcore::nn::{Affine, Conv2d, Embedding, LstmCell, VectorParam};
use diffcore::{checkpoint, DiffError, ParamSet, Real, Tensor};

use crate::raster::Raster;

/// Token index that terminates a variable-length message.
pub const TERMINATOR: u16 = 0;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("shape mismatch: expected {expected:?}, got {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },

    #[error("token {token} out of range for vocabulary {vocab}")]
    InvalidToken { token: u16, vocab: usize },

    #[error("no candidates to score")]
    EmptyCandidates,

    #[error("operation requires the {expected} channel")]
    WrongChannel { expected: &'static str },

    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Which signalling medium the agents are built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Discrete,
    Sketch,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub channel: ChannelKind,
    /// Stimulus side length; must be divisible by 8 (three stride-2 pools).
    pub canvas_side: usize,
    /// Shared embedding dimensionality `d`.
    pub embed_dim: usize,
    /// LSTM hidden width for sender and receiver.
    pub hidden_dim: usize,
    /// Token embedding width.
    pub token_embed_dim: usize,
    /// Vocabulary size `V`; token 0 is the terminator in variable-length mode.
    pub vocab: usize,
    /// Maximum message length `L`.
    pub max_len: usize,
    /// Variable-length messages (terminator active) vs always-`L` messages.
    pub variable_length: bool,
    /// Number of line segments a sketch may use.
    pub strokes: usize,
    /// Stroke thickness as a fraction of the canvas side (Gaussian sigma).
    pub thickness: f64,
}

impl AgentConfig {
    /// Canonical architecture for a channel; game-level knobs (vocabulary,
    /// length, stroke count) keep their defaults until overridden.
    pub fn default_for(channel: ChannelKind) -> Self {
        Self {
            channel,
            canvas_side: 64,
            embed_dim: 64,
            hidden_dim: 64,
            token_embed_dim: 16,
            vocab: 3,
            max_len: 5,
            variable_length: true,
            strokes: 5,
            thickness: 1.5 / 64.0,
        }
    }

    fn validate(&self) {
        assert!(self.canvas_side % 8 == 0 && self.canvas_side >= 16, "canvas side {} must be a multiple of 8 and at least 16", self.canvas_side);
        assert!(self.embed_dim > 0 && self.hidden_dim > 0 && self.token_embed_dim > 0);
        match self.channel {
            ChannelKind::Discrete => {
                assert!(self.vocab >= 2, "discrete channel needs at least 2 tokens");
                assert!(self.max_len >= 1, "messages need at least one position");
            }
            ChannelKind::Sketch => {
                assert!(self.strokes >= 1, "sketches need at least one stroke");
                assert!(self.thickness > 0.0, "stroke thickness must be positive");
            }
        }
    }
}

/// A discrete message: the full emitted token sequence plus its effective
/// length (position of the first terminator, or all of it).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub tokens: Vec<u16>,
    pub effective_len: usize,
    pub variable_length: bool,
}

/// Effective length under terminator semantics: index of the first
/// terminator token, or the full length if none (or fixed-length mode).
pub fn effective_len(tokens: &[u16], variable_length: bool) -> usize {
    if !variable_length {
        return tokens.len();
    }
    tokens.iter().position(|&t| t == TERMINATOR).unwrap_or(tokens.len())
}

impl Message {
    pub fn new(tokens: Vec<u16>, variable_length: bool) -> Self {
        let effective_len = effective_len(&tokens, variable_length);
        Self { tokens, effective_len, variable_length }
    }

    /// Canonical content key: the tokens that carry meaning, comma-joined.
    /// Post-terminator content never reaches the key.
    pub fn key(&self) -> String {
        let upto = if self.variable_length { self.effective_len } else { self.tokens.len() };
        self.tokens[..upto]
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Line segments in normalized coordinates: each stroke is
/// `(x1, y1, x2, y2)` with every component in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrokeSet {
    pub coords: Vec<[f64; 4]>,
}

/// A rendered sketch together with its generating strokes.
#[derive(Clone, Debug)]
pub struct Sketch {
    pub canvas: Raster,
    pub strokes: StrokeSet,
}

// ---- differentiable stroke rendering ---------------------------------------

/// Renders `k` line segments onto a `side x side` canvas with soft Gaussian
/// falloff: `pixel = 1 - max_k exp(-d_k^2 / (2 sigma^2))` where `d_k` is the
/// distance from the pixel centre to segment `k`.
///
/// Gradients flow to the nearest segment per pixel (argmin stored at
/// forward time). The point-to-segment projection parameter is treated as
/// constant in backward, which is exact: in the interior the distance is
/// stationary in the projection, and at clamped ends the projection is
/// locally constant.
pub struct LineRasterOp {
    pub side: usize,
    pub sigma_px: f64,
}

impl LineRasterOp {
    /// Squared distance from point `(px, py)` to segment `k` of `coords`
    /// (pixel units), plus the projection parameter and foot point.
    fn seg_d2<R: Real>(coords: &[R], k: usize, side: f64, px: f64, py: f64) -> (f64, f64, f64, f64) {
        let ax = coords[4 * k].to_f64() * side;
        let ay = coords[4 * k + 1].to_f64() * side;
        let bx = coords[4 * k + 2].to_f64() * side;
        let by = coords[4 * k + 3].to_f64() * side;
        let (ex, ey) = (bx - ax, by - ay);
        let ee = ex * ex + ey * ey;
        let t = if ee < 1e-12 {
            0.0
        } else {
            (((px - ax) * ex + (py - ay) * ey) / ee).clamp(0.0, 1.0)
        };
        let (cx, cy) = (ax + t * ex, ay + t * ey);
        let (dx, dy) = (cx - px, cy - py);
        (dx * dx + dy * dy, t, dx, dy)
    }
}

impl<R: Real> CustomOp<R> for LineRasterOp {
    fn name(&self) -> &'static str {
        "line_raster"
    }

    fn forward(&self, inputs: &[&Tensor<R>]) -> (Tensor<R>, OpCtx<R>) {
        assert_eq!(inputs.len(), 1, "line_raster takes one coords tensor");
        let coords = inputs[0];
        assert!(coords.len() % 4 == 0, "coords length must be a multiple of 4");
        let k = coords.len() / 4;
        assert!(k >= 1, "at least one stroke");
        let side = self.side;
        let sidef = side as f64;
        let inv2s2 = 1.0 / (2.0 * self.sigma_px * self.sigma_px);
        let cd = coords.data();
        let mut out = vec![R::ZERO; side * side];
        let mut argmin = vec![0u32; side * side];
        for iy in 0..side {
            let py = iy as f64 + 0.5;
            for ix in 0..side {
                let px = ix as f64 + 0.5;
                let mut best = f64::INFINITY;
                let mut bestk = 0u32;
                for kk in 0..k {
                    let (d2, _, _, _) = Self::seg_d2(cd, kk, sidef, px, py);
                    if d2 < best {
                        best = d2;
                        bestk = kk as u32;
                    }
                }
                out[iy * side + ix] = R::from_f64(1.0 - (-best * inv2s2).exp());
                argmin[iy * side + ix] = bestk;
            }
        }
        (
            Tensor::new(vec![side, side], out),
            OpCtx { u32s: argmin, reals: Vec::new() },
        )
    }

    fn backward(
        &self,
        slot: usize,
        inputs: &[&Tensor<R>],
        _output: &Tensor<R>,
        ctx: &OpCtx<R>,
        grad_out: &[R],
        grad_in: &mut [R],
    ) {
        assert_eq!(slot, 0);
        let coords = inputs[0];
        let cd = coords.data();
        let side = self.side;
        let sidef = side as f64;
        let inv2s2 = 1.0 / (2.0 * self.sigma_px * self.sigma_px);
        for iy in 0..side {
            let py = iy as f64 + 0.5;
            for ix in 0..side {
                let go = grad_out[iy * side + ix].to_f64();
                if go == 0.0 {
                    continue;
                }
                let px = ix as f64 + 0.5;
                let kk = ctx.u32s[iy * side + ix] as usize;
                let (d2, t, dx, dy) = Self::seg_d2(cd, kk, sidef, px, py);
                // pixel = 1 - exp(-d2 / (2 sigma^2))
                let dpix_dd2 = (-d2 * inv2s2).exp() * inv2s2;
                let scale = go * dpix_dd2;
                // d(d2)/da = 2 (c - p)(1 - t), d(d2)/db = 2 (c - p) t,
                // then chain through the normalized->pixel scaling.
                let ga = 2.0 * (1.0 - t) * scale * sidef;
                let gb = 2.0 * t * scale * sidef;
                grad_in[4 * kk] += R::from_f64(ga * dx);
                grad_in[4 * kk + 1] += R::from_f64(ga * dy);
                grad_in[4 * kk + 2] += R::from_f64(gb * dx);
                grad_in[4 * kk + 3] += R::from_f64(gb * dy);
            }
        }
    }
}

/// Render a stroke set at the given resolution (evaluation path; no graph).
pub fn rasterize_strokes(strokes: &StrokeSet, side: usize, thickness: f64) -> Sketch {
    let op = LineRasterOp { side, sigma_px: thickness * side as f64 };
    let flat: Vec<f32> = strokes.coords.iter().flat_map(|c| c.iter().map(|&v| v as f32)).collect();
    let t = Tensor::<f32>::from_vec(flat);
    let (out, _) = CustomOp::<f32>::forward(&op, &[&t]);
    Sketch {
        canvas: Raster::from_data(side, out.into_data()),
        strokes: strokes.clone(),
    }
}

// ---- encoder ----------------------------------------------------------------

/// Three conv blocks (16, 32, 64 channels, 3x3 kernels, relu, 2x2 max pool)
/// and an affine head onto a tanh-bounded `d`-dimensional embedding.
struct Encoder {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    head: Affine,
    side: usize,
}

impl Encoder {
    fn new<R: Real>(ps: &mut ParamSet<R>, cfg: &AgentConfig, rng: &mut ChaCha8Rng) -> Self {
        let side = cfg.canvas_side;
        let conv1 = Conv2d::new(ps, "encoder.conv1", 16, 1, 3, 1, rng);
        let conv2 = Conv2d::new(ps, "encoder.conv2", 32, 16, 3, 1, rng);
        let conv3 = Conv2d::new(ps, "encoder.conv3", 64, 32, 3, 1, rng);
        let spatial = side / 8;
        let head = Affine::new(ps, "encoder.head", 64 * spatial * spatial, cfg.embed_dim, rng);
        Self { conv1, conv2, conv3, head, side }
    }

    /// `x` is `[1, side, side]` ink strength (1 = ink, 0 = paper).
    fn apply<R: Real>(
        &self,
        g: &mut Graph<R>,
        bind: &mut Binding,
        ps: &ParamSet<R>,
        x: NodeId,
    ) -> NodeId {
        let c1 = self.conv1.apply(g, bind, ps, x);
        let r1 = g.relu(c1);
        let p1 = g.max_pool2(r1);
        let c2 = self.conv2.apply(g, bind, ps, p1);
        let r2 = g.relu(c2);
        let p2 = g.max_pool2(r2);
        let c3 = self.conv3.apply(g, bind, ps, p2);
        let r3 = g.relu(c3);
        let p3 = g.max_pool2(r3);
        let spatial = self.side / 8;
        let flat = g.reshape(p3, vec![64 * spatial * spatial]);
        let h = self.head.apply(g, bind, ps, flat);
        g.tanh(h)
    }
}

// ---- discrete channel --------------------------------------------------------

struct DiscreteSender {
    h0: Affine,
    c0: Affine,
    sos: VectorParam,
    embed: Embedding,
    lstm: LstmCell,
    out: Affine,
}

impl DiscreteSender {
    fn new<R: Real>(ps: &mut ParamSet<R>, cfg: &AgentConfig, rng: &mut ChaCha8Rng) -> Self {
        let h0 = Affine::new(ps, "sender.h0", cfg.embed_dim, cfg.hidden_dim, rng);
        let c0 = Affine::new(ps, "sender.c0", cfg.embed_dim, cfg.hidden_dim, rng);
        let sos = VectorParam::new(ps, "sender.sos", cfg.token_embed_dim, rng);
        let embed = Embedding::new(ps, "sender.embed", cfg.vocab, cfg.token_embed_dim, rng);
        let lstm = LstmCell::new(ps, "sender.lstm", cfg.token_embed_dim, cfg.hidden_dim, rng);
        let out = Affine::new(ps, "sender.out", cfg.hidden_dim, cfg.vocab, rng);
        Self { h0, c0, sos, embed, lstm, out }
    }
}

struct DiscreteReceiver {
    embed: Embedding,
    lstm: LstmCell,
    head: Affine,
}

impl DiscreteReceiver {
    fn new<R: Real>(ps: &mut ParamSet<R>, cfg: &AgentConfig, rng: &mut ChaCha8Rng) -> Self {
        let embed = Embedding::new(ps, "receiver.embed", cfg.vocab, cfg.token_embed_dim, rng);
        let lstm = LstmCell::new(ps, "receiver.lstm", cfg.token_embed_dim, cfg.hidden_dim, rng);
        let head = Affine::new(ps, "receiver.head", cfg.hidden_dim, cfg.embed_dim, rng);
        Self { embed, lstm, head }
    }
}

// ---- sketch channel ----------------------------------------------------------

struct SketchSender {
    hidden: Affine,
    out: Affine,
}

impl SketchSender {
    fn new<R: Real>(ps: &mut ParamSet<R>, cfg: &AgentConfig, rng: &mut ChaCha8Rng) -> Self {
        let hidden = Affine::new(ps, "sketcher.hidden", cfg.embed_dim, cfg.hidden_dim, rng);
        let out = Affine::new(ps, "sketcher.out", cfg.hidden_dim, 4 * cfg.strokes, rng);
        Self { hidden, out }
    }
}

// ---- the agent pair ----------------------------------------------------------

/// Result of unrolling the sender on one episode graph.
pub struct SenderRollout {
    /// Hard tokens emitted at every position (all `max_len` of them).
    pub tokens: Vec<u16>,
    /// Per-position one-hot nodes (straight-through samples in training,
    /// constants in evaluation). Inputs for the receiver.
    pub onehot_nodes: Vec<NodeId>,
    /// Per-position logit nodes.
    pub logit_nodes: Vec<NodeId>,
    /// Differentiable expected effective length (train + variable-length).
    pub expected_len: Option<NodeId>,
    /// Hard effective length under terminator semantics.
    pub effective_len: usize,
}

/// Sender and receiver sharing one parameter set and one encoder.
pub struct Agents<R: Real> {
    pub cfg: AgentConfig,
    pub params: ParamSet<R>,
    encoder: Encoder,
    discrete: Option<(DiscreteSender, DiscreteReceiver)>,
    sketcher: Option<SketchSender>,
}

impl<R: Real> Agents<R> {
    /// Fresh agents with deterministically initialised weights.
    pub fn new(cfg: AgentConfig, seed: u64) -> Self {
        cfg.validate();
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&mut ps, &cfg, &mut rng);
        let (discrete, sketcher) = match cfg.channel {
            ChannelKind::Discrete => {
                let s = DiscreteSender::new(&mut ps, &cfg, &mut rng);
                let r = DiscreteReceiver::new(&mut ps, &cfg, &mut rng);
                (Some((s, r)), None)
            }
            ChannelKind::Sketch => (None, Some(SketchSender::new(&mut ps, &cfg, &mut rng))),
        };
        Self { cfg, params: ps, encoder, discrete, sketcher }
    }

    /// Write weights to a checkpoint file.
    pub fn save(&self, path: &Path) -> Result<(), DiffError> {
        checkpoint::save(&self.params, path)
    }

    /// Rebuild agents from a config and a checkpoint produced by [`Agents::save`].
    pub fn load(cfg: AgentConfig, path: &Path) -> Result<Self, DiffError> {
        let mut agents = Self::new(cfg, 0);
        checkpoint::load_into(&mut agents.params, path)?;
        Ok(agents)
    }

    fn discrete_ref(&self) -> Result<&(DiscreteSender, DiscreteReceiver), AgentError> {
        self.discrete.as_ref().ok_or(AgentError::WrongChannel { expected: "discrete" })
    }

    fn sketcher_ref(&self) -> Result<&SketchSender, AgentError> {
        self.sketcher.as_ref().ok_or(AgentError::WrongChannel { expected: "sketch" })
    }

    // ---- graph-building pieces (training path) -----------------------------

    /// Constant image input node in ink-strength convention.
    pub fn image_input(&self, g: &mut Graph<R>, raster: &Raster) -> Result<NodeId, AgentError> {
        let side = self.cfg.canvas_side;
        if raster.side() != side {
            return Err(AgentError::ShapeMismatch {
                expected: vec![side, side],
                found: vec![raster.side(), raster.side()],
            });
        }
        let data: Vec<R> = raster.data().iter().map(|&v| R::from_f64((1.0 - v) as f64)).collect();
        Ok(g.input(Tensor::new(vec![1, side, side], data)))
    }

    /// Encode an image node to the shared embedding.
    pub fn encode_node(
        &self,
        g: &mut Graph<R>,
        bind: &mut Binding,
        x: NodeId,
    ) -> NodeId {
        self.encoder.apply(g, bind, &self.params, x)
    }

    /// Unroll the sender LSTM for `max_len` steps from an embedding node.
    ///
    /// `sample` carries the straight-through temperature and RNG during
    /// training; `None` means deterministic argmax decoding.
    pub fn sender_rollout(
        &self,
        g: &mut Graph<R>,
        bind: &mut Binding,
        e: NodeId,
        sample: Option<(R, &mut ChaCha8Rng)>,
    ) -> Result<SenderRollout, AgentError> {
        let (sender, _) = self.discrete_ref()?;
        let ps = &self.params;
        let (tau_rng, train) = match sample {
            Some((tau, rng)) => (Some((tau, rng)), true),
            None => (None, false),
        };
        let h_pre = sender.h0.apply(g, bind, ps, e);
        let mut h = g.tanh(h_pre);
        let c_pre = sender.c0.apply(g, bind, ps, e);
        let mut c = g.tanh(c_pre);
        let mut x = sender.sos.node(g, bind, ps);

        let mut tokens = Vec::with_capacity(self.cfg.max_len);
        let mut onehot_nodes = Vec::with_capacity(self.cfg.max_len);
        let mut logit_nodes = Vec::with_capacity(self.cfg.max_len);
        // Survival products for the expected-length relaxation.
        let mut survival: Option<NodeId> = None;
        let mut expected_terms: Vec<NodeId> = Vec::new();
        let mut tau_rng = tau_rng;

        for _ in 0..self.cfg.max_len {
            let (h1, c1) = sender.lstm.apply(g, bind, ps, x, h, c);
            h = h1;
            c = c1;
            let logits = sender.out.apply(g, bind, ps, h);
            logit_nodes.push(logits);

            let onehot = if let Some((tau, rng)) = tau_rng.as_mut() {
                g.st_sample(logits, *tau, *rng)
            } else {
                let ld = g.value(logits).data();
                let mut best = 0usize;
                for i in 1..ld.len() {
                    if ld[i] > ld[best] {
                        best = i;
                    }
                }
                let mut oh = vec![R::ZERO; self.cfg.vocab];
                oh[best] = R::ONE;
                g.input(Tensor::from_vec(oh))
            };
            let token = if train {
                g.hard_index(onehot) as u16
            } else {
                let v = g.value(onehot).data();
                v.iter().position(|&x| x == R::ONE).unwrap() as u16
            };
            tokens.push(token);
            onehot_nodes.push(onehot);

            if train && self.cfg.variable_length {
                // P(not terminated at this position) = 1 - softmax(logits)[0].
                let probs = g.softmax(logits);
                let p_term = g.index(probs, TERMINATOR as usize);
                let neg = g.mul_scalar(p_term, -R::ONE);
                let p_cont = g.add_scalar(neg, R::ONE);
                let surv = match survival {
                    None => p_cont,
                    Some(prev) => g.mul(prev, p_cont),
                };
                expected_terms.push(surv);
                survival = Some(surv);
            }

            x = sender.embed.apply(g, bind, ps, onehot);
        }

        let expected_len = if expected_terms.is_empty() {
            None
        } else {
            let mut acc = expected_terms[0];
            for &t in &expected_terms[1..] {
                acc = g.add(acc, t);
            }
            Some(acc)
        };
        let eff = effective_len(&tokens, self.cfg.variable_length);
        Ok(SenderRollout {
            tokens,
            onehot_nodes,
            logit_nodes,
            expected_len,
            effective_len: eff,
        })
    }

    /// Run the receiver over the message prefix (up to and including the
    /// terminator) and score each candidate embedding node.
    pub fn receiver_scores(
        &self,
        g: &mut Graph<R>,
        bind: &mut Binding,
        onehot_nodes: &[NodeId],
        tokens: &[u16],
        candidates: &[NodeId],
    ) -> Result<Vec<NodeId>, AgentError> {
        let (_, receiver) = self.discrete_ref()?;
        if candidates.is_empty() {
            return Err(AgentError::EmptyCandidates);
        }
        let ps = &self.params;
        let read_len = if self.cfg.variable_length {
            let eff = effective_len(tokens, true);
            (eff + 1).min(tokens.len())
        } else {
            tokens.len()
        };
        let (mut h, mut c) = receiver.lstm.zero_state(g);
        for &oh in &onehot_nodes[..read_len] {
            let x = receiver.embed.apply(g, bind, ps, oh);
            let (h1, c1) = receiver.lstm.apply(g, bind, ps, x, h, c);
            h = h1;
            c = c1;
        }
        let head = receiver.head.apply(g, bind, ps, h);
        let msg = g.tanh(head);
        let gain = R::from_f64(self.score_gain());
        let msg_unit = g.normalize(msg, R::ONE);
        let mut scores = Vec::with_capacity(candidates.len());
        for &cand in candidates {
            let cand_unit = g.normalize(cand, R::ONE);
            let d = g.dot(msg_unit, cand_unit);
            scores.push(g.mul_scalar(d, gain));
        }
        Ok(scores)
    }

    /// Stroke coordinate node (`[4k]`, sigmoid-bounded) from an embedding node.
    pub fn sketch_coords_node(
        &self,
        g: &mut Graph<R>,
        bind: &mut Binding,
        e: NodeId,
    ) -> Result<NodeId, AgentError> {
        let sk = self.sketcher_ref()?;
        let ps = &self.params;
        let h_pre = sk.hidden.apply(g, bind, ps, e);
        let h = g.tanh(h_pre);
        let out = sk.out.apply(g, bind, ps, h);
        Ok(g.sigmoid(out))
    }

    /// Render stroke coordinates and convert to an encoder input node
    /// (`[1, side, side]` ink strength), all differentiably.
    pub fn sketch_input_node(&self, g: &mut Graph<R>, coords: NodeId) -> NodeId {
        let side = self.cfg.canvas_side;
        let op = Rc::new(LineRasterOp { side, sigma_px: self.cfg.thickness * side as f64 });
        let raster = g.custom(op, &[coords]);
        // Raster is paper-white 1 / ink 0; the encoder wants ink strength.
        let neg = g.mul_scalar(raster, -R::ONE);
        let ink = g.add_scalar(neg, R::ONE);
        g.reshape(ink, vec![1, side, side])
    }

    // ---- evaluation API ----------------------------------------------------

    /// Encode a stimulus (or rendered sketch) to its embedding.
    pub fn encode(&self, raster: &Raster) -> Result<Vec<R>, AgentError> {
        let mut g: Graph<R> = Graph::new();
        let mut bind = Binding::new(&self.params);
        let x = self.image_input(&mut g, raster)?;
        let e = self.encode_node(&mut g, &mut bind, x);
        Ok(g.value(e).data().to_vec())
    }

    /// Deterministically decode a message from an embedding.
    pub fn send_discrete(&self, embedding: &[R]) -> Result<Message, AgentError> {
        self.check_embedding(embedding)?;
        let mut g: Graph<R> = Graph::new();
        let mut bind = Binding::new(&self.params);
        let e = g.input(Tensor::from_vec(embedding.to_vec()));
        let rollout = self.sender_rollout(&mut g, &mut bind, e, None)?;
        Ok(Message::new(rollout.tokens, self.cfg.variable_length))
    }

    /// Score candidate embeddings against a received token sequence.
    pub fn receive_discrete(
        &self,
        tokens: &[u16],
        candidates: &[Vec<R>],
    ) -> Result<Vec<R>, AgentError> {
        self.discrete_ref()?;
        if candidates.is_empty() {
            return Err(AgentError::EmptyCandidates);
        }
        for &t in tokens {
            if t as usize >= self.cfg.vocab {
                return Err(AgentError::InvalidToken { token: t, vocab: self.cfg.vocab });
            }
        }
        for c in candidates {
            self.check_embedding(c)?;
        }
        let mut g: Graph<R> = Graph::new();
        let mut bind = Binding::new(&self.params);
        let onehot_nodes: Vec<NodeId> = tokens
            .iter()
            .map(|&t| {
                let mut oh = vec![R::ZERO; self.cfg.vocab];
                oh[t as usize] = R::ONE;
                g.input(Tensor::from_vec(oh))
            })
            .collect();
        let cand_nodes: Vec<NodeId> = candidates
            .iter()
            .map(|c| g.input(Tensor::from_vec(c.clone())))
            .collect();
        let scores = self.receiver_scores(&mut g, &mut bind, &onehot_nodes, tokens, &cand_nodes)?;
        Ok(scores.iter().map(|&s| g.value(s).item()).collect())
    }

    /// Deterministically emit stroke coordinates from an embedding.
    pub fn send_sketch(&self, embedding: &[R]) -> Result<StrokeSet, AgentError> {
        self.check_embedding(embedding)?;
        let mut g: Graph<R> = Graph::new();
        let mut bind = Binding::new(&self.params);
        let e = g.input(Tensor::from_vec(embedding.to_vec()));
        let coords = self.sketch_coords_node(&mut g, &mut bind, e)?;
        let cd = g.value(coords).data();
        let strokes = cd
            .chunks_exact(4)
            .map(|c| [c[0].to_f64(), c[1].to_f64(), c[2].to_f64(), c[3].to_f64()])
            .collect();
        Ok(StrokeSet { coords: strokes })
    }

    /// Render a stroke set at this configuration's resolution.
    pub fn rasterize(&self, strokes: &StrokeSet) -> Sketch {
        rasterize_strokes(strokes, self.cfg.canvas_side, self.cfg.thickness)
    }

    /// Score candidates against a rendered sketch: encode it with the shared
    /// encoder and compare embeddings with [`Self::score_embeddings`].
    pub fn receive_sketch(
        &self,
        sketch: &Raster,
        candidates: &[Vec<R>],
    ) -> Result<Vec<R>, AgentError> {
        for c in candidates {
            self.check_embedding(c)?;
        }
        let e = self.encode(sketch)?;
        self.score_embeddings(&e, candidates)
    }

    /// Gain applied to cosine similarities so score differences live on the
    /// scale of the hinge margin even for modest angular separations.
    pub fn score_gain(&self) -> f64 {
        (self.cfg.embed_dim as f64).sqrt()
    }

    /// Score a candidate embedding list against a message-side embedding
    /// (gain-scaled cosine similarity), shared by both channels' evaluation
    /// paths. Mirrors the in-graph scoring used during training, including
    /// the epsilon that keeps the zero vector finite.
    pub fn score_embeddings(&self, probe: &[R], candidates: &[Vec<R>]) -> Result<Vec<R>, AgentError> {
        if candidates.is_empty() {
            return Err(AgentError::EmptyCandidates);
        }
        self.check_embedding(probe)?;
        let eps = R::from_f64(1e-12);
        let gain = R::from_f64(self.score_gain());
        let inv_norm = |v: &[R]| {
            let mut ss = R::ZERO;
            for &x in v {
                ss += x * x;
            }
            R::ONE / (ss + eps).sqrt()
        };
        let rp = inv_norm(probe);
        Ok(candidates
            .iter()
            .map(|c| {
                let mut acc = R::ZERO;
                for (a, b) in probe.iter().zip(c) {
                    acc += *a * *b;
                }
                acc * rp * inv_norm(c) * gain
            })
            .collect())
    }

    fn check_embedding(&self, e: &[R]) -> Result<(), AgentError> {
        if e.len() != self.cfg.embed_dim {
            return Err(AgentError::ShapeMismatch {
                expected: vec![self.cfg.embed_dim],
                found: vec![e.len()],
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stimuli::generate_dot_image;
    use rand::SeedableRng;

    fn test_cfg(channel: ChannelKind) -> AgentConfig {
        let mut cfg = AgentConfig::default_for(channel);
        cfg.canvas_side = 32;
        cfg
    }

    fn stimulus(side: usize, n: u32, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Wide ink band so small test canvases stay feasible at n = 5.
        generate_dot_image(n, side, (0.05, 0.30), &mut rng).unwrap().canvas
    }

    #[test]
    fn encode_is_deterministic_and_sized() {
        let agents: Agents<f32> = Agents::new(test_cfg(ChannelKind::Discrete), 1);
        let img = stimulus(32, 3, 5);
        let e1 = agents.encode(&img).unwrap();
        let e2 = agents.encode(&img).unwrap();
        assert_eq!(e1.len(), 64);
        assert_eq!(e1, e2);
        assert!(e1.iter().all(|v| v.abs() <= 1.0), "embedding is tanh-bounded");
    }

    #[test]
    fn encode_rejects_wrong_canvas() {
        let agents: Agents<f32> = Agents::new(test_cfg(ChannelKind::Discrete), 1);
        let img = stimulus(64, 2, 6);
        match agents.encode(&img) {
            Err(AgentError::ShapeMismatch { expected, found }) => {
                assert_eq!(expected, vec![32, 32]);
                assert_eq!(found, vec![64, 64]);
            }
            other => panic!("expected ShapeMismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn send_discrete_is_deterministic_with_valid_tokens() {
        let agents: Agents<f32> = Agents::new(test_cfg(ChannelKind::Discrete), 2);
        let e = agents.encode(&stimulus(32, 4, 7)).unwrap();
        let m1 = agents.send_discrete(&e).unwrap();
        let m2 = agents.send_discrete(&e).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.tokens.len(), agents.cfg.max_len);
        assert!(m1.tokens.iter().all(|&t| (t as usize) < agents.cfg.vocab));
    }

    #[test]
    fn receiver_scores_permute_with_candidates() {
        let agents: Agents<f32> = Agents::new(test_cfg(ChannelKind::Discrete), 3);
        let cands: Vec<Vec<f32>> = (1..=4)
            .map(|n| agents.encode(&stimulus(32, n, 20 + n as u64)).unwrap())
            .collect();
        let tokens = vec![1u16, 2, 1, 0, 2];
        let base = agents.receive_discrete(&tokens, &cands).unwrap();
        let permuted: Vec<Vec<f32>> = vec![cands[2].clone(), cands[0].clone(), cands[3].clone(), cands[1].clone()];
        let scores_p = agents.receive_discrete(&tokens, &permuted).unwrap();
        assert_eq!(scores_p[0], base[2]);
        assert_eq!(scores_p[1], base[0]);
        assert_eq!(scores_p[2], base[3]);
        assert_eq!(scores_p[3], base[1]);
    }

    #[test]
    fn receiver_ignores_post_terminator_content() {
        let agents: Agents<f32> = Agents::new(test_cfg(ChannelKind::Discrete), 4);
        let cands: Vec<Vec<f32>> = (1..=3)
            .map(|n| agents.encode(&stimulus(32, n, 40 + n as u64)).unwrap())
            .collect();
        let a = agents.receive_discrete(&[2, 0, 1, 1, 2], &cands).unwrap();
        let b = agents.receive_discrete(&[2, 0, 2, 2, 1], &cands).unwrap();
        // Bit-identical, not approximately equal.
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_token_is_rejected() {
        let agents: Agents<f32> = Agents::new(test_cfg(ChannelKind::Discrete), 4);
        let cands = vec![agents.encode(&stimulus(32, 1, 50)).unwrap()];
        match agents.receive_discrete(&[7], &cands) {
            Err(AgentError::InvalidToken { token: 7, vocab: 3 }) => {}
            other => panic!("expected InvalidToken, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn sketch_sender_coords_are_bounded() {
        let agents: Agents<f32> = Agents::new(test_cfg(ChannelKind::Sketch), 5);
        let e = agents.encode(&stimulus(32, 5, 60)).unwrap();
        let strokes = agents.send_sketch(&e).unwrap();
        assert_eq!(strokes.coords.len(), agents.cfg.strokes);
        for c in &strokes.coords {
            for &v in c {
                assert!((0.0..=1.0).contains(&v), "coordinate {v} outside [0,1]");
            }
        }
        let sk = agents.rasterize(&strokes);
        assert_eq!(sk.canvas.side(), 32);
        assert!(sk.canvas.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn wrong_channel_is_reported() {
        let agents: Agents<f32> = Agents::new(test_cfg(ChannelKind::Sketch), 6);
        let e = agents.encode(&stimulus(32, 2, 70)).unwrap();
        match agents.send_discrete(&e) {
            Err(AgentError::WrongChannel { expected: "discrete" }) => {}
            other => panic!("expected WrongChannel, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn horizontal_line_renders_symmetrically() {
        // A centred horizontal stroke: the rendered column profile must be
        // symmetric about the stroke row, and darkest on it.
        let strokes = StrokeSet { coords: vec![[0.2, 0.5, 0.8, 0.5]] };
        let sk = rasterize_strokes(&strokes, 32, 1.5 / 32.0);
        let c = &sk.canvas;
        let mid = 16usize; // stroke y = 16.0 sits between rows 15 and 16
        for dy in 1..6 {
            let above = c.get(16, mid - dy);
            let below = c.get(16, mid + dy - 1);
            assert!((above - below).abs() < 1e-6, "asymmetry at dy={dy}");
        }
        assert!(c.get(16, mid) < c.get(16, mid + 5));
    }

    #[test]
    fn degenerate_stroke_renders_radially_symmetric_dot() {
        let strokes = StrokeSet { coords: vec![[0.5, 0.5, 0.5, 0.5]] };
        let sk = rasterize_strokes(&strokes, 32, 1.5 / 32.0);
        let c = &sk.canvas;
        // Centre (16, 16) in pixel units; sample symmetric offsets.
        let v1 = c.get(16 + 3, 16);
        let v2 = c.get(16 - 4, 16); // pixel centres at +3.5 and -3.5 from 16.0
        let v3 = c.get(16, 16 + 3);
        let v4 = c.get(16, 16 - 4);
        assert!((v1 - v2).abs() < 1e-6);
        assert!((v1 - v3).abs() < 1e-6);
        assert!((v3 - v4).abs() < 1e-6);
    }

    #[test]
    fn message_key_stops_at_terminator() {
        let m = Message::new(vec![2, 1, 0, 2, 1], true);
        assert_eq!(m.effective_len, 2);
        assert_eq!(m.key(), "2,1");
        let fixed = Message::new(vec![2, 1, 0, 2, 1], false);
        assert_eq!(fixed.effective_len, 5);
        assert_eq!(fixed.key(), "2,1,0,2,1");
        let empty = Message::new(vec![0, 1, 2], true);
        assert_eq!(empty.effective_len, 0);
        assert_eq!(empty.key(), "");
    }
}
