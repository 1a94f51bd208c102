use rand::Rng;

use super::TelemetryFragment;
use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, SeededRng, Tensor};
use crate::error::{Error, Result};
use crate::transformer::RoutingMode;

/// Standard deviation for projection weights.
pub const INIT_STD: f64 = 0.02;

/// Two-layer ReLU feed-forward network: `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct ExpertFfn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ExpertFfn {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            w1: store.add(
                format!("{prefix}.w1"),
                Tensor::randn([d_model, d_ff], INIT_STD, rng),
            )?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros([d_ff]))?,
            w2: store.add(
                format!("{prefix}.w2"),
                Tensor::randn([d_ff, d_model], INIT_STD, rng),
            )?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros([d_model]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let y = g.matmul(h, w2)?;
        g.add_row(y, b2)
    }
}

/// Row layout of the units an expert layer routes: `batch` sequences of `seq` positions.
#[derive(Clone, Copy, Debug)]
pub struct Units<'a> {
    pub batch: usize,
    pub seq: usize,
    /// `true` at padded positions, `[batch × seq]`.
    pub pad: &'a [bool],
}

impl Units<'_> {
    pub fn len(&self) -> usize {
        self.batch * self.seq
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn valid_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&r| !self.pad[r]).collect()
    }
}

/// Expert selection imposed on one layer for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerChoice {
    /// The layer's own policy: its gate, or uniform draws for `SwitchRandom`.
    Learned,
    /// Every unit goes to this expert.
    Single(usize),
    /// Expert per unit row.
    PerUnit(Vec<usize>),
    /// All experts evaluate every unit and their outputs are averaged.
    All,
}

#[derive(Clone, Debug)]
pub struct ExpertOutput {
    pub output: NodeId,
    /// Assignments and confidences of learned or random routing.
    pub fragment: Option<TelemetryFragment>,
    /// Load-balancing loss for gated top-1 routing.
    pub aux: Option<NodeId>,
}

/// `N` parallel expert FFNs and the routing that feeds them.
#[derive(Clone, Debug)]
pub struct ExpertLayer {
    /// Position among all expert layers, encoder first.
    pub index: usize,
    pub mode: RoutingMode,
    pub experts: Vec<ExpertFfn>,
    /// `N × d_model` gate weight, present only for gated modes.
    pub gate: Option<ParamId>,
}

/// Row-wise `softmax(x · W_gᵀ)`.
pub fn gate_scores(g: &mut Graph, x: NodeId, w_gate: NodeId) -> Result<NodeId> {
    let logits = g.matmul_t(x, w_gate)?;
    g.softmax(logits, 1)
}

/// Indices of the `k` largest values, ties to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Sums `p_i(x)·E_i(x)` over the `k` experts with the largest gate values per row.
///
/// With `k = N` every expert sees every row; otherwise each expert only
/// evaluates the rows that selected it.
pub fn combine_top_k(
    g: &mut Graph,
    store: &ParamStore,
    experts: &[ExpertFfn],
    x: NodeId,
    gates: NodeId,
    k: usize,
) -> Result<NodeId> {
    let n_experts = experts.len();
    if k == 0 || k > n_experts {
        return Err(Error::Routing(format!(
            "top-k needs 1 <= k <= {n_experts}, got {k}"
        )));
    }
    if g.value(gates).cols() != n_experts {
        return Err(Error::Shape {
            op: "combine_top_k",
            lhs: g.shape(gates).to_vec(),
            rhs: vec![n_experts],
        });
    }
    let rows = g.value(x).rows();
    let mut out = None;
    if k == n_experts {
        for (i, expert) in experts.iter().enumerate() {
            let y = expert.forward(g, store, x)?;
            let p = g.gather_elems(gates, &vec![i; rows])?;
            let term = g.scale_rows(y, p)?;
            out = Some(match out {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
    } else {
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_experts];
        for r in 0..rows {
            for i in top_k_indices(g.value(gates).row(r), k) {
                members[i].push(r);
            }
        }
        for (i, rows_i) in members.iter().enumerate() {
            if rows_i.is_empty() {
                continue;
            }
            let term = expert_rows(g, store, &experts[i], x, rows_i, rows, Some((gates, i)))?;
            out = Some(match out {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
    }
    Ok(out.expect("at least one expert is active"))
}

/// Runs `expert` on `rows` of `x`, optionally scaled by gate column `i`, and
/// scatters the result back into a `[total × d]` tensor.
fn expert_rows(
    g: &mut Graph,
    store: &ParamStore,
    expert: &ExpertFfn,
    x: NodeId,
    rows: &[usize],
    total: usize,
    scale: Option<(NodeId, usize)>,
) -> Result<NodeId> {
    let xi = g.gather_rows(x, rows)?;
    let mut yi = expert.forward(g, store, xi)?;
    if let Some((gates, i)) = scale {
        let gi = g.gather_rows(gates, rows)?;
        let pi = g.gather_elems(gi, &vec![i; rows.len()])?;
        yi = g.scale_rows(yi, pi)?;
    }
    g.scatter_rows(yi, rows, total)
}

/// `N · Σ_i f_i · P_i`, where `f_i` is the fraction of rows assigned to expert `i`
/// and `P_i` the mean gate probability of expert `i`. Gradients flow through `P` only.
pub fn load_balancing_loss(g: &mut Graph, assignments: &[usize], gates: NodeId) -> Result<NodeId> {
    let (rows, n) = (g.value(gates).rows(), g.value(gates).cols());
    if assignments.len() != rows || rows == 0 {
        return Err(Error::Shape {
            op: "load_balancing_loss",
            lhs: g.shape(gates).to_vec(),
            rhs: vec![assignments.len()],
        });
    }
    let mut frac = vec![0.0; n];
    for &a in assignments {
        if a >= n {
            return Err(Error::Routing(format!("assignment {a} out of range for {n} experts")));
        }
        frac[a] += 1.0 / rows as f64;
    }
    let averager = g.constant(Tensor::full([1, rows], 1.0 / rows as f64));
    let mean_gate = g.matmul(averager, gates)?;
    let weighted = g.mul_const(mean_gate, frac.iter().map(|f| f * n as f64).collect())?;
    Ok(g.sum(weighted))
}

impl ExpertLayer {
    pub fn new(
        store: &mut ParamStore,
        index: usize,
        mode: RoutingMode,
        n_experts: usize,
        d_model: usize,
        d_ff: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let prefix = format!("layer{index}.ffn");
        let experts = (0..n_experts)
            .map(|e| ExpertFfn::new(store, &format!("{prefix}.expert{e}"), d_model, d_ff, rng))
            .collect::<Result<Vec<_>>>()?;
        let gate = if mode.has_gate() {
            Some(store.add(
                format!("{prefix}.gate"),
                Tensor::randn([n_experts, d_model], INIT_STD, rng),
            )?)
        } else {
            None
        };
        Ok(Self {
            index,
            mode,
            experts,
            gate,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Gate probabilities `[units × N]`; fails for gateless modes.
    pub fn gate_scores(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gate = self.gate.ok_or_else(|| {
            Error::Routing(format!("{:?} layer has no gate parameters", self.mode))
        })?;
        let w = g.param(store, gate);
        gate_scores(g, x, w)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        units: Units<'_>,
        choice: LayerChoice,
        rng: Option<&mut SeededRng>,
    ) -> Result<ExpertOutput> {
        let n = self.n_experts();
        let total = units.len();
        if g.value(x).rows() != total || units.pad.len() != total {
            return Err(Error::Shape {
                op: "expert layer",
                lhs: g.shape(x).to_vec(),
                rhs: vec![units.batch, units.seq],
            });
        }
        let plain = |output| ExpertOutput {
            output,
            fragment: None,
            aux: None,
        };
        match choice {
            LayerChoice::Single(e) => {
                self.check_expert(e)?;
                let output = self.experts[e].forward(g, store, x)?;
                let assign = vec![e; units.valid_rows().len()];
                Ok(self.with_fragment(output, assign))
            }
            LayerChoice::PerUnit(assign) => {
                if assign.len() != total {
                    return Err(Error::Routing(format!(
                        "{} assignments for {total} units",
                        assign.len()
                    )));
                }
                for &e in &assign {
                    self.check_expert(e)?;
                }
                let output = self.dispatch(g, store, x, &assign, None)?;
                let valid: Vec<usize> = units.valid_rows().iter().map(|&r| assign[r]).collect();
                Ok(self.with_fragment(output, valid))
            }
            LayerChoice::All => {
                let mut acc = None;
                for expert in &self.experts {
                    let y = expert.forward(g, store, x)?;
                    acc = Some(match acc {
                        None => y,
                        Some(a) => g.add(a, y)?,
                    });
                }
                let sum = acc.expect("at least one expert");
                let out = if n == 1 { sum } else { g.scale(sum, 1.0 / n as f64) };
                Ok(plain(out))
            }
            LayerChoice::Learned => self.forward_learned(g, store, x, units, rng),
        }
    }

    /// Output of an explicit (gate-free) choice, with its loads recorded.
    fn with_fragment(&self, output: NodeId, assignments: Vec<usize>) -> ExpertOutput {
        ExpertOutput {
            output,
            fragment: (!assignments.is_empty()).then(|| TelemetryFragment {
                layer: self.index,
                n_experts: self.n_experts(),
                assignments,
                confidences: None,
            }),
            aux: None,
        }
    }

    fn check_expert(&self, e: usize) -> Result<()> {
        if e >= self.n_experts() {
            return Err(Error::Routing(format!(
                "expert {e} out of range for {} experts",
                self.n_experts()
            )));
        }
        Ok(())
    }

    /// Per-unit top-1 dispatch; with `gates`, outputs are scaled by the chosen gate value.
    fn dispatch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        assign: &[usize],
        gates: Option<NodeId>,
    ) -> Result<NodeId> {
        let total = assign.len();
        if gates.is_none() && assign.iter().all(|&e| e == assign[0]) {
            return self.experts[assign[0]].forward(g, store, x);
        }
        let mut acc = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..total).filter(|&r| assign[r] == e).collect();
            if rows.is_empty() {
                continue;
            }
            let term = expert_rows(g, store, expert, x, &rows, total, gates.map(|gt| (gt, e)))?;
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
        Ok(acc.expect("every unit has an expert"))
    }

    fn forward_learned(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        units: Units<'_>,
        rng: Option<&mut SeededRng>,
    ) -> Result<ExpertOutput> {
        let n = self.n_experts();
        let total = units.len();
        let valid = units.valid_rows();
        match self.mode {
            RoutingMode::Thor => {
                if n != 1 {
                    return Err(Error::Routing(
                        "stochastic-expert layers need an explicit expert choice".into(),
                    ));
                }
                Ok(ExpertOutput {
                    output: self.experts[0].forward(g, store, x)?,
                    fragment: None,
                    aux: None,
                })
            }
            RoutingMode::SwitchRandom => {
                let rng = rng.ok_or_else(|| {
                    Error::Routing("random routing requires a random generator".into())
                })?;
                let assign: Vec<usize> = (0..total).map(|_| rng.gen_range(0..n)).collect();
                let output = self.dispatch(g, store, x, &assign, None)?;
                Ok(ExpertOutput {
                    output,
                    fragment: Some(TelemetryFragment {
                        layer: self.index,
                        n_experts: n,
                        assignments: valid.iter().map(|&r| assign[r]).collect(),
                        confidences: None,
                    }),
                    aux: None,
                })
            }
            RoutingMode::GatedTopK { k } => {
                let gates = self.gate_scores(g, store, x)?;
                let output = combine_top_k(g, store, &self.experts, x, gates, k)?;
                let top1: Vec<usize> = (0..total)
                    .map(|r| top_k_indices(g.value(gates).row(r), 1)[0])
                    .collect();
                let fragment = self.fragment(g, gates, &top1, &valid);
                let aux = if k == 1 && !valid.is_empty() {
                    Some(self.valid_balancing_loss(g, gates, &top1, &valid)?)
                } else {
                    None
                };
                Ok(ExpertOutput {
                    output,
                    fragment: Some(fragment),
                    aux,
                })
            }
            RoutingMode::SwitchToken | RoutingMode::SwitchSentence => {
                let gates = if self.mode == RoutingMode::SwitchToken {
                    self.gate_scores(g, store, x)?
                } else {
                    let sentence_gates = self.sentence_gates(g, store, x, units)?;
                    let owner: Vec<usize> = (0..total).map(|r| r / units.seq).collect();
                    g.gather_rows(sentence_gates, &owner)?
                };
                let assign: Vec<usize> = (0..total)
                    .map(|r| top_k_indices(g.value(gates).row(r), 1)[0])
                    .collect();
                let output = self.dispatch(g, store, x, &assign, Some(gates))?;
                let fragment = self.fragment(g, gates, &assign, &valid);
                let aux = if valid.is_empty() {
                    None
                } else {
                    Some(self.valid_balancing_loss(g, gates, &assign, &valid)?)
                };
                Ok(ExpertOutput {
                    output,
                    fragment: Some(fragment),
                    aux,
                })
            }
        }
    }

    /// Gate probabilities of each sentence's mean non-pad token representation, `[batch × N]`.
    fn sentence_gates(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        units: Units<'_>,
    ) -> Result<NodeId> {
        let mut avg = vec![0.0; units.batch * units.len()];
        for b in 0..units.batch {
            let rows: Vec<usize> = (b * units.seq..(b + 1) * units.seq)
                .filter(|&r| !units.pad[r])
                .collect();
            for &r in &rows {
                avg[b * units.len() + r] = 1.0 / rows.len() as f64;
            }
        }
        let averager = g.constant(Tensor::new([units.batch, units.len()], avg)?);
        let means = g.matmul(averager, x)?;
        self.gate_scores(g, store, means)
    }

    fn fragment(
        &self,
        g: &Graph,
        gates: NodeId,
        assign: &[usize],
        valid: &[usize],
    ) -> TelemetryFragment {
        let gv = g.value(gates);
        TelemetryFragment {
            layer: self.index,
            n_experts: self.n_experts(),
            assignments: valid.iter().map(|&r| assign[r]).collect(),
            confidences: Some(valid.iter().map(|&r| gv.row(r)[assign[r]]).collect()),
        }
    }

    fn valid_balancing_loss(
        &self,
        g: &mut Graph,
        gates: NodeId,
        assign: &[usize],
        valid: &[usize],
    ) -> Result<NodeId> {
        let valid_gates = g.gather_rows(gates, valid)?;
        let valid_assign: Vec<usize> = valid.iter().map(|&r| assign[r]).collect();
        load_balancing_loss(g, &valid_assign, valid_gates)
    }
}
