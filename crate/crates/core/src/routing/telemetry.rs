use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Routing decisions of one expert layer in one forward pass, non-pad units only.
#[derive(Clone, Debug, PartialEq)]
pub struct TelemetryFragment {
    pub layer: usize,
    pub n_experts: usize,
    pub assignments: Vec<usize>,
    /// Gate value of the chosen expert per unit; `None` for gateless routing.
    pub confidences: Option<Vec<f64>>,
}

/// Per-expert load and mean routing confidence of one layer over an interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingTelemetry {
    pub step: u64,
    pub layer: usize,
    pub loads: Vec<f64>,
    /// Mean gate value over the units assigned to each expert; `None` when
    /// the expert received nothing or the routing has no gate.
    pub confidences: Vec<Option<f64>>,
}

impl RoutingTelemetry {
    pub fn max_load(&self) -> f64 {
        self.loads.iter().copied().fold(0.0, f64::max)
    }
}

/// Aggregates the fragments of a single layer collected over an interval.
pub fn record_telemetry(step: u64, fragments: &[&TelemetryFragment]) -> Result<RoutingTelemetry> {
    let first = fragments
        .first()
        .ok_or_else(|| Error::InvalidArgument("no routing fragments in interval".into()))?;
    let (layer, n) = (first.layer, first.n_experts);
    if fragments.iter().any(|f| f.layer != layer || f.n_experts != n) {
        return Err(Error::InvalidArgument(
            "fragments from different layers cannot be aggregated".into(),
        ));
    }
    let mut counts = vec![0usize; n];
    let mut conf_sum = vec![0.0; n];
    let gated = fragments.iter().all(|f| f.confidences.is_some());
    for f in fragments {
        for (u, &e) in f.assignments.iter().enumerate() {
            counts[e] += 1;
            if let Some(c) = &f.confidences {
                conf_sum[e] += c[u];
            }
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("no routed units in interval".into()));
    }
    Ok(RoutingTelemetry {
        step,
        layer,
        loads: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        confidences: counts
            .iter()
            .zip(&conf_sum)
            .map(|(&c, &s)| (gated && c > 0).then(|| s / c as f64))
            .collect(),
    })
}

/// Groups fragments by layer and aggregates each group, ordered by layer.
pub fn record_all_layers(step: u64, fragments: &[TelemetryFragment]) -> Result<Vec<RoutingTelemetry>> {
    let mut layers: Vec<usize> = fragments.iter().map(|f| f.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    layers
        .into_iter()
        .map(|l| {
            let group: Vec<&TelemetryFragment> = fragments.iter().filter(|f| f.layer == l).collect();
            record_telemetry(step, &group)
        })
        .collect()
}
