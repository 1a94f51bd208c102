use rand::Rng;

use super::attention::{sinusoidal_positions, LayerNorm, Linear, MultiHeadAttention};
use super::{ExpertConfig, ModelConfig};
use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, SeededRng, Tensor};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::routing::{ExpertLayer, LayerChoice, TelemetryFragment, Units};

/// Expert selection for a whole forward pass.
#[derive(Clone, Copy)]
pub enum Routing<'a> {
    /// Each layer's own policy (gates, or random draws for `SwitchRandom`).
    Learned,
    /// One expert per layer for every unit, indexed by expert-layer position.
    PerLayer(&'a [usize]),
    /// Expert for `(layer, batch row, position)`.
    Dispatch(&'a dyn Fn(usize, usize, usize) -> usize),
    /// Every expert on every unit, outputs averaged.
    Ensemble,
}

/// Per-pass state threaded through the encoder and decoder.
pub struct ForwardCtx<'a> {
    pub routing: Routing<'a>,
    /// Enables dropout.
    pub train: bool,
    pub rng: Option<&'a mut SeededRng>,
    pub fragments: Vec<TelemetryFragment>,
    /// Balancing losses emitted by gated top-1 layers.
    pub aux: Vec<NodeId>,
    /// FLOPs spent inside expert layers, gates included.
    pub expert_flops: u64,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval(routing: Routing<'a>) -> Self {
        Self {
            routing,
            train: false,
            rng: None,
            fragments: Vec::new(),
            aux: Vec::new(),
            expert_flops: 0,
        }
    }

    pub fn with_rng(routing: Routing<'a>, train: bool, rng: &'a mut SeededRng) -> Self {
        Self {
            routing,
            train,
            rng: Some(rng),
            fragments: Vec::new(),
            aux: Vec::new(),
            expert_flops: 0,
        }
    }

    fn dropout_mask(&mut self, len: usize, rate: f64) -> Result<Option<Vec<f64>>> {
        if !self.train || rate == 0.0 {
            return Ok(None);
        }
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::InvalidArgument("dropout in training mode needs an rng".into()))?;
        let keep = 1.0 / (1.0 - rate);
        Ok(Some(
            (0..len)
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                .collect(),
        ))
    }

    fn choice_for(&self, layer: usize, batch: usize, seq: usize) -> Result<LayerChoice> {
        Ok(match self.routing {
            Routing::Learned => LayerChoice::Learned,
            Routing::PerLayer(per_layer) => LayerChoice::Single(*per_layer.get(layer).ok_or_else(
                || Error::Routing(format!("no expert given for layer {layer}")),
            )?),
            Routing::Dispatch(f) => {
                let assign: Vec<usize> = (0..batch * seq).map(|r| f(layer, r / seq, r % seq)).collect();
                if assign.iter().all(|&e| e == assign[0]) {
                    LayerChoice::Single(assign[0])
                } else {
                    LayerChoice::PerUnit(assign)
                }
            }
            Routing::Ensemble => LayerChoice::All,
        })
    }
}

/// A `[batch × len]` grid of token ids with its pad mask.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid<'a> {
    pub ids: &'a [usize],
    pub batch: usize,
    pub len: usize,
    /// `true` at padded positions.
    pub pad: &'a [bool],
}

impl<'a> TokenGrid<'a> {
    pub fn source(b: &'a Batch) -> Self {
        Self {
            ids: &b.source,
            batch: b.batch_size,
            len: b.src_len,
            pad: &b.src_pad,
        }
    }

    pub fn target_in(b: &'a Batch) -> Self {
        Self {
            ids: &b.target_in,
            batch: b.batch_size,
            len: b.tgt_len,
            pad: &b.tgt_pad,
        }
    }

    fn units(&self) -> Units<'a> {
        Units {
            batch: self.batch,
            seq: self.len,
            pad: self.pad,
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: ExpertLayer,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: ExpertLayer,
}

/// Pre-norm encoder–decoder transformer whose FFN sublayers are expert layers.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub experts: ExpertConfig,
    pub store: ParamStore,
    src_embed: ParamId,
    tgt_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    enc_norm: LayerNorm,
    dec_norm: LayerNorm,
    output: Linear,
}

impl Model {
    /// Builds a model with freshly initialized parameters drawn from `seed`.
    pub fn new(config: ModelConfig, experts: ExpertConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        experts.validate()?;
        let mut rng = SeededRng::derived(seed, &[0x1417]);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let embed_std = 1.0 / (d as f64).sqrt();
        let src_embed = store.add(
            "embed.src",
            Tensor::randn([config.vocab_src, d], embed_std, &mut rng),
        )?;
        let tgt_embed = store.add(
            "embed.tgt",
            Tensor::randn([config.vocab_tgt, d], embed_std, &mut rng),
        )?;
        let mha = |store: &mut ParamStore, name: String, rng: &mut SeededRng| {
            MultiHeadAttention::new(store, &name, d, config.n_heads, config.d_head, rng)
        };
        let ffn = |store: &mut ParamStore, index: usize, rng: &mut SeededRng| {
            ExpertLayer::new(store, index, experts.mode, experts.n_experts, d, config.d_ff, rng)
        };
        let mut encoder = Vec::with_capacity(config.n_enc_layers);
        for l in 0..config.n_enc_layers {
            encoder.push(EncoderLayer {
                norm_attn: LayerNorm::new(&mut store, &format!("enc{l}.norm_attn"), d)?,
                attn: mha(&mut store, format!("enc{l}.attn"), &mut rng)?,
                norm_ffn: LayerNorm::new(&mut store, &format!("enc{l}.norm_ffn"), d)?,
                ffn: ffn(&mut store, l, &mut rng)?,
            });
        }
        let mut decoder = Vec::with_capacity(config.n_dec_layers);
        for l in 0..config.n_dec_layers {
            decoder.push(DecoderLayer {
                norm_self: LayerNorm::new(&mut store, &format!("dec{l}.norm_self"), d)?,
                self_attn: mha(&mut store, format!("dec{l}.self_attn"), &mut rng)?,
                norm_cross: LayerNorm::new(&mut store, &format!("dec{l}.norm_cross"), d)?,
                cross_attn: mha(&mut store, format!("dec{l}.cross_attn"), &mut rng)?,
                norm_ffn: LayerNorm::new(&mut store, &format!("dec{l}.norm_ffn"), d)?,
                ffn: ffn(&mut store, config.n_enc_layers + l, &mut rng)?,
            });
        }
        let enc_norm = LayerNorm::new(&mut store, "enc.norm", d)?;
        let dec_norm = LayerNorm::new(&mut store, "dec.norm", d)?;
        let output = Linear::new(&mut store, "output", d, config.vocab_tgt, &mut rng)?;
        Ok(Self {
            config,
            experts,
            store,
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            enc_norm,
            dec_norm,
            output,
        })
    }

    /// Number of expert layers, encoder first.
    pub fn n_layers(&self) -> usize {
        self.encoder.len() + self.decoder.len()
    }

    pub fn n_experts(&self) -> usize {
        self.experts.n_experts
    }

    pub fn expert_layer(&self, index: usize) -> &ExpertLayer {
        if index < self.encoder.len() {
            &self.encoder[index].ffn
        } else {
            &self.decoder[index - self.encoder.len()].ffn
        }
    }

    fn check_tokens(&self, grid: &TokenGrid<'_>, vocab: usize) -> Result<()> {
        if grid.len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: grid.len,
                max: self.config.max_seq_len,
            });
        }
        if grid.ids.len() != grid.batch * grid.len || grid.pad.len() != grid.ids.len() {
            return Err(Error::Shape {
                op: "token grid",
                lhs: vec![grid.ids.len(), grid.pad.len()],
                rhs: vec![grid.batch, grid.len],
            });
        }
        if let Some(&id) = grid.ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::InvalidToken { id, vocab });
        }
        Ok(())
    }

    fn embed(
        &self,
        g: &mut Graph,
        table: ParamId,
        grid: &TokenGrid<'_>,
    ) -> Result<NodeId> {
        let d = self.config.d_model;
        let t = g.param(&self.store, table);
        let x = g.gather_rows(t, grid.ids)?;
        let x = g.scale(x, (d as f64).sqrt());
        let pe = sinusoidal_positions(grid.len, d);
        let tiled: Vec<f64> = (0..grid.batch).flat_map(|_| pe.data().iter().copied()).collect();
        let pe = g.constant(Tensor::new([grid.batch * grid.len, d], tiled)?);
        g.add(x, pe)
    }

    fn residual_dropout(&self, g: &mut Graph, x: NodeId, ctx: &mut ForwardCtx<'_>) -> Result<NodeId> {
        match ctx.dropout_mask(g.value(x).numel(), self.config.dropout)? {
            Some(mask) => g.mul_const(x, mask),
            None => Ok(x),
        }
    }

    fn attn_dropout(&self, ctx: &mut ForwardCtx<'_>, batch: usize, q: usize, k: usize) -> Result<Option<Vec<f64>>> {
        ctx.dropout_mask(batch * self.config.n_heads * q * k, self.config.dropout)
    }

    fn expert_sublayer(
        &self,
        g: &mut Graph,
        layer: &ExpertLayer,
        x: NodeId,
        grid: &TokenGrid<'_>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<NodeId> {
        let before = g.flops();
        let choice = ctx.choice_for(layer.index, grid.batch, grid.len)?;
        let out = layer.forward(g, &self.store, x, grid.units(), choice, ctx.rng.as_deref_mut())?;
        ctx.expert_flops += g.flops() - before;
        ctx.fragments.extend(out.fragment);
        ctx.aux.extend(out.aux);
        self.residual_dropout(g, out.output, ctx)
    }

    /// Encoder output after the final layer norm, `[batch·len × d_model]`.
    pub fn encode(&self, g: &mut Graph, src: &TokenGrid<'_>, ctx: &mut ForwardCtx<'_>) -> Result<NodeId> {
        self.check_tokens(src, self.config.vocab_src)?;
        let (b, s) = (src.batch, src.len);
        let allowed: Vec<bool> = (0..b * s * s)
            .map(|i| !src.pad[(i / (s * s)) * s + i % s])
            .collect();
        let mut x = self.embed(g, self.src_embed, src)?;
        for layer in &self.encoder {
            let h = layer.norm_attn.forward(g, &self.store, x)?;
            let drop = self.attn_dropout(ctx, b, s, s)?;
            let a = layer.attn.forward(g, &self.store, h, h, b, s, s, &allowed, drop)?;
            x = g.add(x, a)?;
            let h = layer.norm_ffn.forward(g, &self.store, x)?;
            let f = self.expert_sublayer(g, &layer.ffn, h, src, ctx)?;
            x = g.add(x, f)?;
        }
        self.enc_norm.forward(g, &self.store, x)
    }

    /// Target-vocabulary logits `[batch·tgt_len × vocab_tgt]`.
    pub fn decode(
        &self,
        g: &mut Graph,
        memory: NodeId,
        src_pad: &[bool],
        tgt: &TokenGrid<'_>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<NodeId> {
        self.check_tokens(tgt, self.config.vocab_tgt)?;
        let (b, t) = (tgt.batch, tgt.len);
        if !src_pad.len().is_multiple_of(b) || g.value(memory).rows() != src_pad.len() {
            return Err(Error::Shape {
                op: "decode memory",
                lhs: g.shape(memory).to_vec(),
                rhs: vec![src_pad.len()],
            });
        }
        let s = src_pad.len() / b;
        let self_allowed: Vec<bool> = (0..b * t * t)
            .map(|i| {
                let (row, j) = (i / t, i % t);
                let (bi, qi) = (row / t, row % t);
                j <= qi && !tgt.pad[bi * t + j]
            })
            .collect();
        let cross_allowed: Vec<bool> = (0..b * t * s)
            .map(|i| !src_pad[(i / (t * s)) * s + i % s])
            .collect();
        let mut x = self.embed(g, self.tgt_embed, tgt)?;
        for layer in &self.decoder {
            let h = layer.norm_self.forward(g, &self.store, x)?;
            let drop = self.attn_dropout(ctx, b, t, t)?;
            let a = layer.self_attn.forward(g, &self.store, h, h, b, t, t, &self_allowed, drop)?;
            x = g.add(x, a)?;
            let h = layer.norm_cross.forward(g, &self.store, x)?;
            let drop = self.attn_dropout(ctx, b, t, s)?;
            let a = layer
                .cross_attn
                .forward(g, &self.store, h, memory, b, t, s, &cross_allowed, drop)?;
            x = g.add(x, a)?;
            let h = layer.norm_ffn.forward(g, &self.store, x)?;
            let f = self.expert_sublayer(g, &layer.ffn, h, tgt, ctx)?;
            x = g.add(x, f)?;
        }
        let x = self.dec_norm.forward(g, &self.store, x)?;
        self.output.forward(g, &self.store, x)
    }

    /// Teacher-forced logits for a batch.
    pub fn forward(&self, g: &mut Graph, batch: &Batch, ctx: &mut ForwardCtx<'_>) -> Result<NodeId> {
        let memory = self.encode(g, &TokenGrid::source(batch), ctx)?;
        self.decode(g, memory, &batch.src_pad, &TokenGrid::target_in(batch), ctx)
    }
}
