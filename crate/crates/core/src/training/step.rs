use serde::{Deserialize, Serialize};

use super::config::{Objective, TrainingConfig};
use crate::autodiff::{Graph, NodeId, ParamStore, SeededRng};
use crate::data::{Batch, PAD};
use crate::error::{Error, Result};
use crate::routing::{thor_select, ExpertChoice, SelectCount, TelemetryFragment};
use crate::transformer::{ForwardCtx, Model, Routing, RoutingMode};

/// Scalar loss terms of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub ce1: f64,
    pub ce2: f64,
    /// Symmetric KL between the two passes; zero for objectives without it.
    pub cr: f64,
    /// Mean load-balancing loss over gated top-1 layers, zero if there are none.
    pub aux: f64,
    pub total: f64,
    pub lr: f64,
}

/// A built but not yet differentiated loss graph.
pub struct StepLoss {
    pub graph: Graph,
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    /// Routing decisions made by the forward passes.
    pub fragments: Vec<TelemetryFragment>,
    /// Experts used by each pass when the step sampled them.
    pub choice: Option<ExpertChoice>,
}

impl StepLoss {
    /// Backpropagates the total and moves parameter gradients into `store`.
    pub fn backward(mut self, store: &mut ParamStore) -> Result<LossBreakdown> {
        self.graph.backward(self.total)?;
        self.graph.flush_param_grads(store);
        Ok(self.breakdown)
    }
}

fn ce(g: &mut Graph, logits: NodeId, batch: &Batch, smoothing: f64) -> Result<NodeId> {
    g.cross_entropy(logits, &batch.target_out, Some(PAD), smoothing)
}

/// `½(KL(p₁‖p₂) + KL(p₂‖p₁))` over non-pad target rows.
pub fn symmetric_kl(g: &mut Graph, logits1: NodeId, logits2: NodeId, batch: &Batch) -> Result<NodeId> {
    let mask: Vec<bool> = batch.target_out.iter().map(|&y| y != PAD).collect();
    let p1 = g.softmax(logits1, 1)?;
    let p2 = g.softmax(logits2, 1)?;
    let a = g.kl_divergence(p1, p2, Some(&mask))?;
    let b = g.kl_divergence(p2, p1, Some(&mask))?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

fn require_stochastic(model: &Model) -> Result<()> {
    if model.experts.mode != RoutingMode::Thor {
        return Err(Error::Routing(format!(
            "stochastic-expert objectives need gate-free layers, model uses {:?}",
            model.experts.mode
        )));
    }
    Ok(())
}

fn two_pass(
    g: &mut Graph,
    model: &Model,
    batch: &Batch,
    choice: &ExpertChoice,
    rng: &mut SeededRng,
) -> Result<(NodeId, NodeId, Vec<TelemetryFragment>)> {
    let mut fragments = Vec::new();
    let mut logits = [None, None];
    for (slot, out) in logits.iter_mut().enumerate() {
        let experts = choice.slot(slot);
        let mut ctx = ForwardCtx::with_rng(Routing::PerLayer(&experts), true, rng);
        *out = Some(model.forward(g, batch, &mut ctx)?);
        fragments.extend(ctx.fragments);
    }
    Ok((logits[0].unwrap(), logits[1].unwrap(), fragments))
}

/// The full stochastic-expert objective: `ce₁ + ce₂ + α·cr` over one sampled
/// expert pair per layer. `forced` overrides the sampled pair.
pub fn thor_step(
    model: &Model,
    batch: &Batch,
    alpha: f64,
    smoothing: f64,
    rng: &mut SeededRng,
    forced: Option<&ExpertChoice>,
) -> Result<StepLoss> {
    ablation_step(model, batch, Objective::ThorFull, alpha, smoothing, rng, forced)
}

/// The stochastic-expert objective with terms removed according to `variant`.
pub fn ablation_step(
    model: &Model,
    batch: &Batch,
    variant: Objective,
    alpha: f64,
    smoothing: f64,
    rng: &mut SeededRng,
    forced: Option<&ExpertChoice>,
) -> Result<StepLoss> {
    if !variant.is_stochastic() {
        return Err(Error::InvalidArgument(format!(
            "`{}` is not a stochastic-expert objective",
            variant.name()
        )));
    }
    require_stochastic(model)?;
    let count = if variant == Objective::Ce1Only {
        SelectCount::One
    } else {
        SelectCount::Pair
    };
    let choice = match forced {
        Some(c) => c.clone(),
        None => thor_select(rng, model.n_layers(), model.n_experts(), count),
    };
    let mut g = Graph::new();
    let mut b = LossBreakdown::default();
    if variant == Objective::Ce1Only {
        let experts = choice.slot(0);
        let mut ctx = ForwardCtx::with_rng(Routing::PerLayer(&experts), true, rng);
        let logits = model.forward(&mut g, batch, &mut ctx)?;
        let fragments = ctx.fragments;
        let total = ce(&mut g, logits, batch, smoothing)?;
        b.ce1 = g.value(total).item();
        b.total = b.ce1;
        return Ok(StepLoss {
            graph: g,
            total,
            breakdown: b,
            fragments,
            choice: Some(choice),
        });
    }

    let (l1, l2, fragments) = two_pass(&mut g, model, batch, &choice, rng)?;
    let ce1 = ce(&mut g, l1, batch, smoothing)?;
    b.ce1 = g.value(ce1).item();
    let mut total = ce1;
    if matches!(variant, Objective::ThorFull | Objective::Ce1Ce2) {
        let ce2 = ce(&mut g, l2, batch, smoothing)?;
        b.ce2 = g.value(ce2).item();
        total = g.add(total, ce2)?;
    }
    if variant.has_cr() {
        let cr = symmetric_kl(&mut g, l1, l2, batch)?;
        b.cr = g.value(cr).item();
        if alpha != 0.0 {
            let weighted = g.scale(cr, alpha);
            total = g.add(total, weighted)?;
        }
    }
    b.total = g.value(total).item();
    Ok(StepLoss {
        graph: g,
        total,
        breakdown: b,
        fragments,
        choice: Some(choice),
    })
}

/// Single forward pass with each layer's own routing. With `aux_coefficient`
/// set, adds that multiple of the mean load-balancing loss.
pub fn baseline_step(
    model: &Model,
    batch: &Batch,
    smoothing: f64,
    aux_coefficient: Option<f64>,
    rng: &mut SeededRng,
) -> Result<StepLoss> {
    let mut g = Graph::new();
    let mut ctx = ForwardCtx::with_rng(Routing::Learned, true, rng);
    let logits = model.forward(&mut g, batch, &mut ctx)?;
    let (fragments, aux_terms) = (ctx.fragments, ctx.aux);
    let ce1 = ce(&mut g, logits, batch, smoothing)?;
    let mut b = LossBreakdown {
        ce1: g.value(ce1).item(),
        ..LossBreakdown::default()
    };
    let mut total = ce1;
    if !aux_terms.is_empty() {
        let mut sum = aux_terms[0];
        for &t in &aux_terms[1..] {
            sum = g.add(sum, t)?;
        }
        let aux = g.scale(sum, 1.0 / aux_terms.len() as f64);
        b.aux = g.value(aux).item();
        if let Some(c) = aux_coefficient.filter(|&c| c != 0.0) {
            let weighted = g.scale(aux, c);
            total = g.add(total, weighted)?;
        }
    }
    b.total = g.value(total).item();
    Ok(StepLoss {
        graph: g,
        total,
        breakdown: b,
        fragments,
        choice: None,
    })
}

/// Builds the loss of `config.objective` for one batch.
pub fn objective_step(
    model: &Model,
    batch: &Batch,
    config: &TrainingConfig,
    rng: &mut SeededRng,
) -> Result<StepLoss> {
    let smoothing = config.label_smoothing;
    match config.objective {
        Objective::BaselineCe => baseline_step(model, batch, smoothing, None, rng),
        Objective::SwitchCePlusAux => {
            baseline_step(model, batch, smoothing, Some(config.aux_coefficient), rng)
        }
        variant => ablation_step(model, batch, variant, config.alpha, smoothing, rng, None),
    }
}
