//! Layer structs. A layer owns [`ParamId`]s into a shared [`ParamSet`] and
//! knows how to apply itself to graph nodes; it holds no tensors of its own,
//! so the same layer can be replayed across many episode graphs.

use rand::Rng;

use crate::graph::{Binding, Graph, NodeId};
use crate::params::{ParamId, ParamSet};
use crate::real::Real;
use crate::tensor::Tensor;

/// Uniform(-bound, bound) init used by all layers; `bound = 1/sqrt(fan_in)`.
fn uniform_init<R: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<R> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product::<usize>();
    let data: Vec<R> = (0..n)
        .map(|_| R::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::new(shape, data)
}

/// Fully connected layer `y = W x + b`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Affine {
    pub fn new<R: Real>(
        ps: &mut ParamSet<R>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), uniform_init(vec![out_dim, in_dim], in_dim, rng));
        let b = ps.add(format!("{name}.b"), uniform_init(vec![out_dim], in_dim, rng));
        Self { w, b, in_dim, out_dim }
    }

    pub fn apply<R: Real>(
        &self,
        g: &mut Graph<R>,
        bind: &mut Binding,
        ps: &ParamSet<R>,
        x: NodeId,
    ) -> NodeId {
        let w = bind.node(g, ps, self.w);
        let b = bind.node(g, ps, self.b);
        let wx = g.matvec(w, x);
        g.add(wx, b)
    }
}

/// 2-D convolution layer (stride 1, square kernel, zero padding) with a
/// per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Real>(
        ps: &mut ParamSet<R>,
        name: &str,
        out_c: usize,
        in_c: usize,
        k: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        let w = ps.add(format!("{name}.w"), uniform_init(vec![out_c, in_c, k, k], fan_in, rng));
        let b = ps.add(format!("{name}.b"), uniform_init(vec![out_c], fan_in, rng));
        Self { w, b, pad }
    }

    pub fn apply<R: Real>(
        &self,
        g: &mut Graph<R>,
        bind: &mut Binding,
        ps: &ParamSet<R>,
        x: NodeId,
    ) -> NodeId {
        let w = bind.node(g, ps, self.w);
        let b = bind.node(g, ps, self.b);
        let y = g.conv2d(w, x, self.pad);
        g.bias_chan(y, b)
    }
}

/// Gated recurrent cell (LSTM form: input/forget/cell/output gates packed
/// into one `[4h]` pre-activation).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new<R: Real>(
        ps: &mut ParamSet<R>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let wx = ps.add(
            format!("{name}.wx"),
            uniform_init(vec![4 * hidden_dim, input_dim], hidden_dim, rng),
        );
        let wh = ps.add(
            format!("{name}.wh"),
            uniform_init(vec![4 * hidden_dim, hidden_dim], hidden_dim, rng),
        );
        // Forget-gate bias starts at +1 so early training does not erase state.
        let mut bias = uniform_init::<R>(vec![4 * hidden_dim], hidden_dim, rng);
        for v in bias.data_mut()[hidden_dim..2 * hidden_dim].iter_mut() {
            *v += R::ONE;
        }
        let b = ps.add(format!("{name}.b"), bias);
        Self { wx, wh, b, input_dim, hidden_dim }
    }

    /// One step: `(x, h, c) -> (h', c')`. Gate order is i, f, g, o.
    pub fn apply<R: Real>(
        &self,
        g: &mut Graph<R>,
        bind: &mut Binding,
        ps: &ParamSet<R>,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> (NodeId, NodeId) {
        let hd = self.hidden_dim;
        let wx = bind.node(g, ps, self.wx);
        let wh = bind.node(g, ps, self.wh);
        let b = bind.node(g, ps, self.b);
        let zx = g.matvec(wx, x);
        let zh = g.matvec(wh, h);
        let zs = g.add(zx, zh);
        let z = g.add(zs, b);
        let i_pre = g.slice(z, 0, hd);
        let f_pre = g.slice(z, hd, hd);
        let g_pre = g.slice(z, 2 * hd, hd);
        let o_pre = g.slice(z, 3 * hd, hd);
        let i = g.sigmoid(i_pre);
        let f = g.sigmoid(f_pre);
        let cand = g.tanh(g_pre);
        let o = g.sigmoid(o_pre);
        let fc = g.mul(f, c);
        let ig = g.mul(i, cand);
        let c_new = g.add(fc, ig);
        let c_act = g.tanh(c_new);
        let h_new = g.mul(o, c_act);
        (h_new, c_new)
    }

    /// Zero initial state as constant graph inputs.
    pub fn zero_state<R: Real>(&self, g: &mut Graph<R>) -> (NodeId, NodeId) {
        let h = g.input(Tensor::zeros(vec![self.hidden_dim]));
        let c = g.input(Tensor::zeros(vec![self.hidden_dim]));
        (h, c)
    }
}

/// A free vector parameter (start-of-sequence embeddings and the like).
#[derive(Clone, Debug)]
pub struct VectorParam {
    pub id: ParamId,
    pub dim: usize,
}

impl VectorParam {
    pub fn new<R: Real>(
        ps: &mut ParamSet<R>,
        name: &str,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let id = ps.add(name, uniform_init(vec![dim], dim, rng));
        Self { id, dim }
    }

    pub fn node<R: Real>(&self, g: &mut Graph<R>, bind: &mut Binding, ps: &ParamSet<R>) -> NodeId {
        bind.node(g, ps, self.id)
    }
}

/// Token embedding table stored as `[dim, vocab]` so a one-hot column select
/// is a matvec (keeping gradients flowing into both table and one-hot).
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Real>(
        ps: &mut ParamSet<R>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let table = ps.add(format!("{name}.table"), uniform_init(vec![dim, vocab], vocab, rng));
        Self { table, vocab, dim }
    }

    /// Embed a one-hot (or relaxed) token vector of length `vocab`.
    pub fn apply<R: Real>(
        &self,
        g: &mut Graph<R>,
        bind: &mut Binding,
        ps: &ParamSet<R>,
        onehot: NodeId,
    ) -> NodeId {
        let t = bind.node(g, ps, self.table);
        g.matvec(t, onehot)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_shapes_and_determinism() {
        let mut ps_a: ParamSet<f64> = ParamSet::new();
        let mut ps_b: ParamSet<f64> = ParamSet::new();
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let la = Affine::new(&mut ps_a, "aff", 4, 2, &mut r1);
        let lb = Affine::new(&mut ps_b, "aff", 4, 2, &mut r2);
        assert_eq!(ps_a.get(la.w).shape(), &[2, 4]);
        assert_eq!(ps_a.get(la.b).shape(), &[2]);
        assert_eq!(ps_a.get(la.w).data(), ps_b.get(lb.w).data());
        assert_eq!(ps_a.get(la.b).data(), ps_b.get(lb.b).data());
    }

    #[test]
    fn lstm_cell_step_changes_state() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::new(&mut ps, "cell", 3, 5, &mut rng);
        let mut g: Graph<f64> = Graph::new();
        let mut bind = Binding::new(&ps);
        let x = g.input(Tensor::from_vec(vec![1.0, -1.0, 0.5]));
        let (h0, c0) = cell.zero_state(&mut g);
        let (h1, c1) = cell.apply(&mut g, &mut bind, &ps, x, h0, c0);
        assert_eq!(g.value(h1).len(), 5);
        assert!(g.value(h1).iter().any(|&v| v != 0.0));
        assert!(g.value(c1).iter().any(|&v| v != 0.0));
    }
}
