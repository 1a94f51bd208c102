use crate::autodiff::{AttentionDims, Graph, NodeId, ParamId, ParamStore, SeededRng, Tensor};
use crate::error::Result;
use crate::routing::INIT_STD;

/// Affine map `x·W + b` with `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{name}.w"), Tensor::randn([d_in, d_out], INIT_STD, rng))?,
            b: store.add(format!("{name}.b"), Tensor::zeros([d_out]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full([d], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([d]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
    pub d_head: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        d_head: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, rng)?,
            n_heads,
            d_head,
        })
    }

    /// `queries` is `[batch·q_len × d_model]`, `keys` is `[batch·k_len × d_model]`;
    /// `allowed` masks `[batch × q_len × k_len]`. `drop` is an optional keep mask
    /// over attention weights, already scaled by `1 / (1 − rate)`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: NodeId,
        keys: NodeId,
        batch: usize,
        q_len: usize,
        k_len: usize,
        allowed: &[bool],
        drop: Option<Vec<f64>>,
    ) -> Result<NodeId> {
        let q = self.q.forward(g, store, queries)?;
        let k = self.k.forward(g, store, keys)?;
        let v = self.v.forward(g, store, keys)?;
        let dims = AttentionDims {
            batch,
            heads: self.n_heads,
            q_len,
            k_len,
            d_head: self.d_head,
        };
        let ctx = g.attention(q, k, v, dims, allowed, drop)?;
        self.out.forward(g, store, ctx)
    }
}

/// Fixed sinusoidal position table `[seq_len × d_model]`:
/// `sin(pos / 10000^(2i/d))` at even columns, `cos` at odd ones.
pub fn sinusoidal_positions(seq_len: usize, d_model: usize) -> Tensor {
    let mut t = Tensor::zeros([seq_len, d_model]);
    let data = t.data_mut();
    for pos in 0..seq_len {
        for i in 0..d_model {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            data[pos * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}
