#![allow(dead_code)]

use thor::autodiff::{Graph, NodeId, ParamStore};
use thor::data::{generate_dataset, Batch, Example, SyntheticTaskSpec, TaskKind};
use thor::transformer::{ExpertConfig, Model, ModelConfig, RoutingMode};
use thor::Result;

pub fn model_config(d_model: usize, layers: usize, vocab: usize, dropout: f64) -> ModelConfig {
    ModelConfig {
        d_model,
        n_heads: 2,
        d_head: d_model / 2,
        d_ff: 2 * d_model,
        n_enc_layers: layers,
        n_dec_layers: layers,
        vocab_src: vocab,
        vocab_tgt: vocab,
        dropout,
        max_seq_len: 12,
    }
}

pub fn model(cfg: ModelConfig, n: usize, mode: RoutingMode, seed: u64) -> Model {
    Model::new(cfg, ExpertConfig { n_experts: n, mode }, seed).unwrap()
}

pub fn examples(kind: TaskKind, vocab: usize, count: usize, seed: u64) -> Vec<Example> {
    generate_dataset(&SyntheticTaskSpec {
        kind,
        vocab_size: vocab,
        min_len: 2,
        max_len: 6,
        train_size: count,
        valid_size: 0,
        test_size: 0,
        seed,
        permutation: None,
        reorder_window: 2,
    })
    .unwrap()
    .train
}

pub fn batch(examples: &[Example]) -> Batch {
    let idx: Vec<usize> = (0..examples.len()).collect();
    Batch::from_split(examples, &idx).unwrap()
}

/// Copies every parameter of `src` whose name exists in `dst`.
pub fn copy_shared_params(src: &Model, dst: &mut Model) {
    for (_, p) in src.store.iter() {
        if let Some(id) = dst.store.id_of(&p.name) {
            dst.store.get_mut(id).value = p.value.clone();
        }
    }
}

/// Compares backprop gradients of every stored parameter with central
/// differences on up to `per_tensor` entries each; returns the norm-wise
/// relative error over all sampled entries.
pub fn param_gradient_error<F>(store: &mut ParamStore, per_tensor: usize, step: f64, loss: F) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let l = loss(&mut g, store).unwrap();
    g.backward(l).unwrap();
    g.flush_param_grads(store);
    let ids: Vec<_> = store.ids().collect();
    let (mut diff, mut norm_a, mut norm_n) = (0.0f64, 0.0f64, 0.0f64);
    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let l = loss(&mut g, store).unwrap();
        g.value(l).item()
    };
    for id in ids {
        let n = store.get(id).value.numel();
        let analytic: Vec<f64> = match &store.get(id).grad {
            Some(gr) => gr.data().to_vec(),
            None => vec![0.0; n],
        };
        let stride = (n / per_tensor).max(1);
        for i in (0..n).step_by(stride).take(per_tensor) {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + step;
            let up = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig - step;
            let down = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            diff += (numeric - analytic[i]).powi(2);
            norm_a += analytic[i].powi(2);
            norm_n += numeric.powi(2);
        }
    }
    let denom = norm_a.sqrt().max(norm_n.sqrt());
    if denom < 1e-8 {
        diff.sqrt()
    } else {
        diff.sqrt() / denom
    }
}
