//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fmt::Write as _;
use std::fs;
use std::time::Instant;

use common::{model, model_config, param_gradient_error};
use thor::autodiff::{check_gradients, AttentionDims, Graph, NodeId, ParamStore, SeededRng, Tensor};
use thor::data::{bleu, generate_dataset, Batch, TaskKind, PAD};
use thor::harness::{presets, train, train_in_memory, Checkpoint, RunConfig, METRICS_FILE};
use thor::inference::{corpus_flops, evaluate, DecodeConfig, InferenceMode};
use thor::routing::{ExpertChoice, ExpertFfn, ExpertLayer, LayerChoice, RoutingTelemetry, Units};
use thor::training::{prediction_variance, symmetric_kl, thor_step, Objective, Trainer};
use thor::transformer::{ForwardCtx, Model, Routing, RoutingMode};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const FD_STEP: f64 = 1e-5;

struct Verdict {
    id: usize,
    pass: bool,
    detail: String,
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("  .. {}", msg.as_ref());
}

fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn fmt_list(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.2}")).collect();
    format!("[{}]", parts.join(", "))
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut SeededRng::new(seed))
}

// ---- 1: gradients -----------------------------------------------------------

type OpCase = (
    &'static str,
    Vec<Tensor>,
    Box<dyn Fn(&mut Graph, &[NodeId]) -> thor::Result<NodeId>>,
);

/// Every differentiable op on randomized inputs with a feature width of 8.
fn op_cases(seed: u64) -> Vec<OpCase> {
    let s = seed * 100;
    let x = randn(&[3, 8], s + 1);
    let y = randn(&[3, 8], s + 2);
    let w = randn(&[8, 5], s + 3);
    let wt = randn(&[5, 8], s + 4);
    let vec8 = randn(&[8], s + 5);
    let gain = randn(&[8], s + 6);
    let col = randn(&[3, 1], s + 7);
    let table = randn(&[6, 8], s + 8);
    let weights = randn(&[3, 8], s + 9).data().to_vec();
    let weights5 = randn(&[3, 5], s + 10).data().to_vec();
    let targets: Vec<usize> = (0..3)
        .map(|i| if i == 1 { PAD } else { 1 + (seed as usize + 3 * i) % 7 })
        .collect();
    let dims = AttentionDims {
        batch: 1,
        heads: 2,
        q_len: 3,
        k_len: 3,
        d_head: 4,
    };
    let allowed: Vec<bool> = (0..9).map(|i| i % 3 <= i / 3).collect();
    let drop: Vec<f64> = (0..18).map(|i| if i % 4 == 0 { 0.0 } else { 1.0 / 0.75 }).collect();
    let wsum = move |g: &mut Graph, n: NodeId, w: &Vec<f64>| -> thor::Result<NodeId> {
        let m = g.mul_const(n, w.clone())?;
        Ok(g.sum(m))
    };
    let (w1, w2, w3, w4, w5, w6, w7, w8) = (
        weights.clone(),
        weights.clone(),
        weights.clone(),
        weights.clone(),
        weights.clone(),
        weights.clone(),
        weights.clone(),
        weights.clone(),
    );
    let (w9, w10, w11) = (weights.clone(), weights.clone(), weights.clone());
    let w5a = weights5.clone();
    let w5b = weights5;
    vec![
        ("matmul", vec![x.clone(), w.clone()], Box::new(move |g, v| {
            let o = g.matmul(v[0], v[1])?;
            wsum(g, o, &w5a)
        })),
        ("matmul_t", vec![x.clone(), wt.clone()], Box::new(move |g, v| {
            let o = g.matmul_t(v[0], v[1])?;
            wsum(g, o, &w5b)
        })),
        ("add", vec![x.clone(), y.clone()], Box::new(move |g, v| {
            let o = g.add(v[0], v[1])?;
            wsum(g, o, &w1)
        })),
        ("sub", vec![x.clone(), y.clone()], Box::new(move |g, v| {
            let o = g.sub(v[0], v[1])?;
            wsum(g, o, &w2)
        })),
        ("mul", vec![x.clone(), y.clone()], Box::new(|g, v| {
            let o = g.mul(v[0], v[1])?;
            Ok(g.sum(o))
        })),
        ("scale", vec![x.clone()], Box::new(move |g, v| {
            let o = g.scale(v[0], -1.7);
            wsum(g, o, &w3)
        })),
        ("mul_const", vec![x.clone()], Box::new(move |g, v| {
            let o = g.mul_const(v[0], w4.clone())?;
            let o = g.mul(o, o)?;
            Ok(g.mean(o))
        })),
        ("relu", vec![x.clone()], Box::new(move |g, v| {
            let o = g.relu(v[0]);
            wsum(g, o, &w5)
        })),
        ("add_row", vec![x.clone(), vec8.clone()], Box::new(|g, v| {
            let o = g.add_row(v[0], v[1])?;
            let o = g.mul(o, o)?;
            Ok(g.sum(o))
        })),
        ("scale_rows", vec![x.clone(), col.clone()], Box::new(move |g, v| {
            let o = g.scale_rows(v[0], v[1])?;
            wsum(g, o, &w6)
        })),
        ("softmax_rows", vec![x.clone()], Box::new(move |g, v| {
            let o = g.softmax(v[0], 1)?;
            wsum(g, o, &w7)
        })),
        ("softmax_cols", vec![x.clone()], Box::new(move |g, v| {
            let o = g.softmax(v[0], 0)?;
            wsum(g, o, &w8)
        })),
        ("layer_norm", vec![x.clone(), gain.clone(), vec8.clone()], Box::new(move |g, v| {
            let o = g.layer_norm(v[0], v[1], v[2])?;
            wsum(g, o, &w9)
        })),
        ("gather_rows", vec![table.clone()], Box::new(move |g, v| {
            let o = g.gather_rows(v[0], &[5, 0, 5])?;
            wsum(g, o, &w10)
        })),
        ("scatter_rows", vec![x.clone()], Box::new(|g, v| {
            let o = g.scatter_rows(v[0], &[4, 0, 2], 6)?;
            let o = g.mul(o, o)?;
            Ok(g.sum(o))
        })),
        ("gather_elems", vec![x.clone()], Box::new(|g, v| {
            let o = g.gather_elems(v[0], &[7, 0, 3])?;
            let o = g.mul(o, o)?;
            Ok(g.sum(o))
        })),
        ("attention", vec![x.clone(), y.clone(), randn(&[3, 8], s + 12)], Box::new(move |g, v| {
            let o = g.attention(v[0], v[1], v[2], dims, &allowed, Some(drop.clone()))?;
            wsum(g, o, &w11)
        })),
        ("cross_entropy", vec![x.clone()], Box::new(move |g, v| {
            g.cross_entropy(v[0], &targets, Some(PAD), 0.1)
        })),
        ("kl_divergence", vec![x.clone(), y.clone()], Box::new(|g, v| {
            let p = g.softmax(v[0], 1)?;
            let q = g.softmax(v[1], 1)?;
            g.kl_divergence(p, q, Some(&[true, false, true]))
        })),
    ]
}

fn criterion_gradients() -> Verdict {
    let start = Instant::now();
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..5 {
        for (name, inputs, f) in op_cases(seed) {
            let err = check_gradients(&inputs, FD_STEP, |g, ids| f(g, ids))
                .map(|r| r.max_rel_error())
                .unwrap_or(f64::INFINITY);
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(entry) => entry.1 = entry.1.max(err),
                None => worst.push((name, err)),
            }
        }
    }
    let mut model_errs = Vec::new();
    for seed in 0..3 {
        let (full, thor) = model_gradient_errors(seed);
        model_errs.push(full);
        model_errs.push(thor);
    }
    let op_max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let model_max = model_errs.iter().copied().fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let failing: Vec<&str> = worst.iter().filter(|w| w.1.is_nan() || w.1 >= 1e-4).map(|w| w.0).collect();
    Verdict {
        id: 1,
        pass: op_max < 1e-4 && model_max < 1e-4 && secs < 60.0,
        detail: format!(
            "{} ops x 5 instances, max rel err {op_max:.2e}{}; 2-layer encoder-decoder (CE and two-pass consistency loss) max rel err {model_max:.2e}; {secs:.1} s",
            worst.len(),
            if failing.is_empty() { String::new() } else { format!(" (failing: {})", failing.join(", ")) },
        ),
    }
}

/// Relative gradient errors of a 2-layer d_model=8 model under a plain
/// cross-entropy loss and under the two-pass consistency objective.
fn model_gradient_errors(seed: u64) -> (f64, f64) {
    let mut m = model(model_config(8, 2, 11, 0.0), 2, RoutingMode::Thor, seed);
    let mut rng = SeededRng::new(seed + 50);
    for id in m.store.ids().collect::<Vec<_>>() {
        let p = m.store.get_mut(id);
        let noise = Tensor::randn(p.value.shape().to_vec(), 0.3, &mut rng);
        for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let ex = common::examples(TaskKind::CipherTranslation, 11, 3, seed + 60);
    let b = common::batch(&ex);
    let shape = m.clone();
    let full = param_gradient_error(&mut m.store, 4, FD_STEP, |g, store: &ParamStore| {
        let mut view = shape.clone();
        view.store = store.clone();
        let mut ctx = ForwardCtx::eval(Routing::PerLayer(&[0, 1, 1, 0]));
        let logits = view.forward(g, &b, &mut ctx)?;
        g.cross_entropy(logits, &b.target_out, Some(PAD), 0.1)
    });
    let thor = param_gradient_error(&mut m.store, 4, FD_STEP, |g, store: &ParamStore| {
        let mut view = shape.clone();
        view.store = store.clone();
        let mut c1 = ForwardCtx::eval(Routing::PerLayer(&[0, 1, 1, 0]));
        let l1 = view.forward(g, &b, &mut c1)?;
        let mut c2 = ForwardCtx::eval(Routing::PerLayer(&[1, 0, 0, 1]));
        let l2 = view.forward(g, &b, &mut c2)?;
        let ce1 = g.cross_entropy(l1, &b.target_out, Some(PAD), 0.1)?;
        let ce2 = g.cross_entropy(l2, &b.target_out, Some(PAD), 0.1)?;
        let cr = symmetric_kl(g, l1, l2, &b)?;
        let cr = g.scale(cr, 5.0);
        let s = g.add(ce1, ce2)?;
        g.add(s, cr)
    });
    (full, thor)
}

// ---- 2: degeneracy ------------------------------------------------------------

fn layer_output(store: &ParamStore, layer: &ExpertLayer, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let pad = vec![false; x.rows()];
    let units = Units {
        batch: 1,
        seq: x.rows(),
        pad: &pad,
    };
    let out = layer
        .forward(&mut g, store, xn, units, LayerChoice::Learned, None)
        .unwrap();
    g.value(out.output).clone()
}

fn ffn_output(store: &ParamStore, ffn: &ExpertFfn, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let y = ffn.forward(&mut g, store, xn).unwrap();
    g.value(y).clone()
}

fn criterion_degeneracy() -> Verdict {
    let mut bit_equal = 0;
    let mut mixture_err: f64 = 0.0;
    let trials = 20;
    for seed in 0..trials {
        let x = randn(&[7, 8], 1000 + seed);
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let one = ExpertLayer::new(&mut store, 0, RoutingMode::GatedTopK { k: 1 }, 1, 8, 16, &mut rng)
            .unwrap();
        if layer_output(&store, &one, &x) == ffn_output(&store, &one.experts[0], &x) {
            bit_equal += 1;
        }
        let mut store = ParamStore::new();
        let two = ExpertLayer::new(&mut store, 0, RoutingMode::GatedTopK { k: 2 }, 2, 8, 16, &mut rng)
            .unwrap();
        let gate = two.gate.unwrap();
        store.get_mut(gate).value = Tensor::zeros([2, 8]);
        let mixed = layer_output(&store, &two, &x);
        let a = ffn_output(&store, &two.experts[0], &x);
        let b = ffn_output(&store, &two.experts[1], &x);
        for ((m, p), q) in mixed.data().iter().zip(a.data()).zip(b.data()) {
            mixture_err = mixture_err.max((m - (0.5 * p + 0.5 * q)).abs());
        }
    }
    Verdict {
        id: 2,
        pass: bit_equal == trials && mixture_err <= 1e-12,
        detail: format!(
            "K=N=1 bit-equal to the plain FFN in {bit_equal}/{trials} random instances; K=N=2 zero-gate max deviation from 0.5/0.5 mixture {mixture_err:.1e}"
        ),
    }
}

// ---- 3: objective algebra --------------------------------------------------------

#[derive(Default)]
struct Composition {
    steps: usize,
    max_err: f64,
    min_cr: f64,
}

impl Composition {
    fn absorb(&mut self, alpha: f64, losses: &[thor::training::LossBreakdown]) {
        if self.steps == 0 {
            self.min_cr = f64::INFINITY;
        }
        for d in losses {
            self.steps += 1;
            self.max_err = self.max_err.max((d.total - (d.ce1 + d.ce2 + alpha * d.cr)).abs());
            self.min_cr = self.min_cr.min(d.cr);
        }
    }
}

fn criterion_composition(comp: &Composition, cipher: &RunConfig) -> Verdict {
    let mut config = cipher.model.clone();
    config.dropout = 0.0;
    let mut worst_cr: f64 = 0.0;
    let data = generate_dataset(&cipher.task).unwrap();
    for seed in 0..5u64 {
        let m = Model::new(config.clone(), cipher.experts.clone(), seed).unwrap();
        let idx: Vec<usize> = (0..16).map(|i| (i + 16 * seed as usize) % data.train.len()).collect();
        let b = Batch::from_split(&data.train, &idx).unwrap();
        let layers = m.n_layers();
        let pick: Vec<usize> = (0..layers).map(|l| (l + seed as usize) % m.n_experts()).collect();
        let choice = ExpertChoice::identical_pair(&pick);
        let loss = thor_step(&m, &b, 5.0, 0.1, &mut SeededRng::new(seed), Some(&choice)).unwrap();
        worst_cr = worst_cr.max(loss.breakdown.cr);
    }
    Verdict {
        id: 3,
        pass: comp.max_err <= 1e-9 && comp.min_cr >= -1e-9 && worst_cr <= 1e-12,
        detail: format!(
            "{} logged training steps: max |total - (ce1 + ce2 + alpha*cr)| {:.1e}, min cr {:.2e}; forced identical pair max cr {worst_cr:.1e}",
            comp.steps, comp.max_err, comp.min_cr
        ),
    }
}

// ---- 4: FLOPs --------------------------------------------------------------------

fn criterion_flops() -> Verdict {
    let mut rows = Vec::new();
    let mut dispatch = Vec::new();
    let mut ratio_ok = true;
    let mut modes_agree = true;
    for n in [1usize, 2, 4, 8] {
        let cfg = presets::find(&format!("thor-experts-{n}")).unwrap().config;
        let m = Model::new(cfg.model.clone(), cfg.experts.clone(), 1).unwrap();
        let data = generate_dataset(&cfg.task).unwrap();
        let (ds, ds_e) = corpus_flops(&m, &data.valid, InferenceMode::DispatchSentence, 0).unwrap();
        let (dt, dt_e) = corpus_flops(&m, &data.valid, InferenceMode::DispatchToken, 7).unwrap();
        let (_, en_e) = corpus_flops(&m, &data.valid, InferenceMode::Ensemble, 0).unwrap();
        ratio_ok &= en_e == n as u64 * ds_e;
        modes_agree &= ds == dt && ds_e == dt_e;
        dispatch.push(ds);
        rows.push(format!("N={n}: dispatch {ds}, ensemble expert {en_e} = {}x", en_e / ds_e.max(1)));
    }
    let invariant = dispatch.iter().all(|&f| f == dispatch[0]);
    Verdict {
        id: 4,
        pass: invariant && ratio_ok && modes_agree,
        detail: rows.join("; "),
    }
}

// ---- 5: routing ------------------------------------------------------------------

fn layer_series(records: &[RoutingTelemetry]) -> Vec<Vec<&RoutingTelemetry>> {
    let mut layers: Vec<usize> = records.iter().map(|r| r.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    layers
        .into_iter()
        .map(|l| records.iter().filter(|r| r.layer == l).collect())
        .collect()
}

/// Some layer keeps a max load of at least 0.55 in every interval of the final quarter.
fn sustained_imbalance(records: &[RoutingTelemetry]) -> (bool, f64) {
    let mut best_floor: f64 = 0.0;
    for series in layer_series(records) {
        let tail = &series[series.len() - series.len().div_ceil(4)..];
        let floor = tail.iter().map(|r| r.max_load()).fold(f64::INFINITY, f64::min);
        best_floor = best_floor.max(floor);
    }
    (best_floor >= 0.55, best_floor)
}

/// `|load₀ − load₁|` averaged over layers and the final tenth of intervals.
fn final_gap(records: &[RoutingTelemetry]) -> f64 {
    let series = layer_series(records);
    let mut total = 0.0;
    for s in &series {
        let tail = &s[s.len() - s.len().div_ceil(10)..];
        total += tail.iter().map(|r| (r.loads[0] - r.loads[1]).abs()).sum::<f64>() / tail.len() as f64;
    }
    total / series.len() as f64
}

fn criterion_routing() -> Verdict {
    let start = Instant::now();
    let mut sustained = 0;
    let mut floors = Vec::new();
    let mut reduced = 0;
    let mut gaps = Vec::new();
    for seed in SEEDS {
        let mut plain = presets::find("switch-no-balance").unwrap().config;
        plain.training.seed = seed;
        let plain_out = train_in_memory(&plain).unwrap();
        let (ok, floor) = sustained_imbalance(&plain_out.telemetry);
        sustained += ok as usize;
        floors.push(floor);
        let mut balanced = presets::find("switch-with-balance").unwrap().config;
        balanced.training.seed = seed;
        let balanced_out = train_in_memory(&balanced).unwrap();
        let (gp, gb) = (final_gap(&plain_out.telemetry), final_gap(&balanced_out.telemetry));
        reduced += (gb < gp) as usize;
        gaps.push((gp, gb));
        progress(format!(
            "switch seed {seed}: unbalanced max-load floor {floor:.3}, final gap {gp:.3} -> {gb:.3} with balancing"
        ));
    }

    let cfg = presets::find("switch-random").unwrap().config;
    let data = generate_dataset(&cfg.task).unwrap();
    let m = Model::new(cfg.model.clone(), cfg.experts.clone(), cfg.training.seed).unwrap();
    let mut trainer = Trainer::new(m, cfg.training.clone(), data.train).unwrap();
    let layers = trainer.model.n_layers();
    let mut counts = vec![[0usize; 2]; layers];
    while counts.iter().any(|c| c[0] + c[1] < 100_000) {
        let record = trainer.train_step().unwrap();
        for f in record.fragments {
            for e in f.assignments {
                counts[f.layer][e] += 1;
            }
        }
    }
    let mut dev: f64 = 0.0;
    for c in &counts {
        let total = (c[0] + c[1]) as f64;
        dev = dev.max((c[0] as f64 / total - 0.5).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let gap_text: Vec<String> = gaps.iter().map(|(p, b)| format!("{p:.3}->{b:.3}")).collect();
    Verdict {
        id: 5,
        pass: sustained >= 3 && reduced >= 4 && dev <= 0.02 && secs <= 1800.0,
        detail: format!(
            "(a) sustained max load >= 0.55 in {sustained}/5 seeds, floors {}; (b) balancing narrows final load gap in {reduced}/5 seeds {}; (c) random routing max deviation {dev:.4} over >= 1e5 tokens/layer ({} steps); {secs:.0} s",
            fmt_list(&floors),
            gap_text.join(" "),
            trainer.step
        ),
    }
}

// ---- 6-9: trained cipher runs ----------------------------------------------------------

struct CipherRun {
    bleu: f64,
    model: Model,
}

fn cipher_run(base: &RunConfig, objective: Objective, alpha: f64, seed: u64, comp: &mut Composition) -> CipherRun {
    let start = Instant::now();
    let mut c = base.clone();
    c.training.objective = objective;
    c.training.alpha = alpha;
    c.training.seed = seed;
    let out = train_in_memory(&c).unwrap();
    comp.absorb(alpha, &out.losses);
    let bleu = out.final_validation().unwrap().bleu;
    progress(format!(
        "{} alpha {alpha} seed {seed}: validation BLEU {bleu:.2} ({:.0} s)",
        objective.name(),
        start.elapsed().as_secs_f64()
    ));
    CipherRun {
        bleu,
        model: out.trainer.model,
    }
}

fn criterion_ablation(thor: &[f64], ce1_cr: &[f64], ce1_ce2: &[f64]) -> Verdict {
    let (t, c, e) = (median(thor), median(ce1_cr), median(ce1_ce2));
    Verdict {
        id: 6,
        pass: t >= c && c >= e && t - e >= 0.5,
        detail: format!(
            "median BLEU THOR_full {t:.2} {}, CE1_CR {c:.2} {}, CE1_CE2 {e:.2} {}; THOR - CE1_CE2 = {:+.2}",
            fmt_list(thor),
            fmt_list(ce1_cr),
            fmt_list(ce1_ce2),
            t - e
        ),
    }
}

fn criterion_inference_modes(model: &Model, base: &RunConfig) -> Verdict {
    let data = generate_dataset(&base.task).unwrap();
    let run = |mode, seed| {
        let cfg = DecodeConfig {
            mode,
            seed,
            ..base.decode.clone()
        };
        evaluate(model, &data.valid, &cfg).unwrap().bleu
    };
    let ensemble = run(InferenceMode::Ensemble, 0);
    let ds: Vec<f64> = SEEDS.iter().map(|&s| run(InferenceMode::DispatchSentence, s)).collect();
    let dt: Vec<f64> = SEEDS.iter().map(|&s| run(InferenceMode::DispatchToken, s)).collect();
    let (ms, mt) = (median(&ds), median(&dt));
    Verdict {
        id: 7,
        pass: ensemble >= ms && (ms - mt).abs() <= 0.5,
        detail: format!(
            "ensemble {ensemble:.2} vs median dispatch(s) {ms:.2} {}; median dispatch(t) {mt:.2} {}; |s - t| = {:.2}",
            fmt_list(&ds),
            fmt_list(&dt),
            (ms - mt).abs()
        ),
    }
}

fn criterion_variance(thor: &[&Model], no_cr: &[&Model], base: &RunConfig) -> Verdict {
    let data = generate_dataset(&base.task).unwrap();
    let seeds: Vec<u64> = (0..20).collect();
    let cfg = DecodeConfig {
        mode: InferenceMode::DispatchSentence,
        ..base.decode.clone()
    };
    let var = |models: &[&Model]| -> Vec<f64> {
        models
            .iter()
            .map(|m| prediction_variance(m, &data.valid, &cfg, &seeds).unwrap().variance)
            .collect()
    };
    let (vt, vn) = (var(thor), var(no_cr));
    let (mt, mn) = (median(&vt), median(&vn));
    Verdict {
        id: 8,
        pass: mt < mn,
        detail: format!(
            "median BLEU variance over 20 dispatch seeds: THOR {mt:.3} {} vs no-CR {mn:.3} {}",
            fmt_list(&vt),
            fmt_list(&vn)
        ),
    }
}

fn criterion_alpha(rows: &[(f64, Vec<f64>)]) -> Verdict {
    let medians: Vec<(f64, f64)> = rows.iter().map(|(a, b)| (*a, median(b))).collect();
    let zero = medians.iter().find(|(a, _)| *a == 0.0).unwrap().1;
    let upper: Vec<f64> = medians.iter().filter(|(a, _)| *a >= 2.0).map(|m| m.1).collect();
    let range = upper.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - upper.iter().copied().fold(f64::INFINITY, f64::min);
    let best = medians.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
    let gap = best - zero;
    let mut table = String::new();
    for ((a, b), (_, runs)) in medians.iter().zip(rows) {
        let _ = write!(table, "alpha {a}: {b:.2} {}; ", fmt_list(runs));
    }
    Verdict {
        id: 9,
        pass: range < gap,
        detail: format!("{table}range over alpha >= 2 is {range:.2}, gap best - alpha 0 is {gap:.2}"),
    }
}

// ---- 10: harness -------------------------------------------------------------------

fn criterion_harness() -> Verdict {
    let hyp: Vec<Vec<&str>> = vec!["a b c d e".split(' ').collect()];
    let refs: Vec<Vec<&str>> = vec!["a b c d f".split(' ').collect()];
    let score = bleu(&hyp, &refs).unwrap();
    let bleu_ok = (score - 66.87).abs() <= 0.01;

    let root = tempfile::tempdir().unwrap();
    let mut cfg = presets::find("thor-tiny-cipher").unwrap().config;
    cfg.training.total_steps = 60;
    cfg.validate_interval = 30;
    cfg.telemetry_interval = 10;
    cfg.task.valid_size = 20;
    cfg.run_dir = root.path().join("full");
    let full = train(&cfg, None).unwrap();
    let ckpt_path = cfg.run_dir.join("final.ckpt");
    let bytes = fs::read(&ckpt_path).unwrap();
    let reloaded = Checkpoint::from_bytes(&bytes).unwrap();
    let ckpt_ok = reloaded.to_bytes().unwrap() == bytes
        && reloaded
            .model()
            .unwrap()
            .store
            .iter()
            .zip(full.trainer.model.store.iter())
            .all(|((_, a), (_, b))| a.value == b.value);

    let mut first = cfg.clone();
    first.run_dir = root.path().join("split");
    first.training.total_steps = 30;
    let head = train(&first, None).unwrap();
    let mut rest = cfg.clone();
    rest.run_dir = first.run_dir.clone();
    let tail = train(&rest, Some(&first.run_dir.join("final.ckpt"))).unwrap();
    let mut resumed = head.losses.clone();
    resumed.extend(tail.losses.iter().copied());
    let losses_ok = resumed == full.losses
        && fs::read(cfg.run_dir.join(METRICS_FILE)).unwrap()
            == fs::read(first.run_dir.join(METRICS_FILE)).unwrap();

    let mut round_trips = 0;
    let all = presets::all();
    for p in &all {
        let text = p.config.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        round_trips += (back == p.config && back.to_toml().unwrap() == text) as usize;
    }
    let saved_ok = RunConfig::load(&cfg.run_dir.join("config.toml")).unwrap() == cfg;
    Verdict {
        id: 10,
        pass: bleu_ok && ckpt_ok && losses_ok && round_trips == all.len() && saved_ok,
        detail: format!(
            "hand BLEU {score:.4}; checkpoint bytes/params reproduced: {ckpt_ok}; resumed loss sequence bit-identical ({} steps): {losses_ok}; configs round-tripped {round_trips}/{} presets, run config reload exact: {saved_ok}",
            resumed.len(),
            all.len()
        ),
    }
}

fn main() {
    let start = Instant::now();
    let mut verdicts = Vec::new();
    let mut record = |v: Verdict| {
        eprintln!("criterion {}: {}", v.id, if v.pass { "PASS" } else { "FAIL" });
        verdicts.push(v);
    };

    record(criterion_gradients());
    record(criterion_degeneracy());
    record(criterion_flops());
    record(criterion_harness());
    record(criterion_routing());

    let base = presets::find("thor-tiny-cipher").unwrap().config;
    let mut comp = Composition::default();
    let mut runs = |objective, alpha| -> Vec<CipherRun> {
        SEEDS
            .iter()
            .map(|&s| cipher_run(&base, objective, alpha, s, &mut comp))
            .collect()
    };
    let thor = runs(Objective::ThorFull, base.training.alpha);
    let ce1_cr = runs(Objective::Ce1Cr, base.training.alpha);
    let ce1_ce2 = runs(Objective::Ce1Ce2, base.training.alpha);
    let mut sweep: Vec<(f64, Vec<f64>)> = vec![(0.0, ce1_ce2.iter().map(|r| r.bleu).collect())];
    for alpha in [2.0, 4.0, 6.0, 8.0] {
        let rows = runs(Objective::ThorFull, alpha);
        sweep.push((alpha, rows.iter().map(|r| r.bleu).collect()));
    }
    let bleus = |rs: &[CipherRun]| rs.iter().map(|r| r.bleu).collect::<Vec<_>>();

    record(criterion_composition(&comp, &base));
    record(criterion_ablation(&bleus(&thor), &bleus(&ce1_cr), &bleus(&ce1_ce2)));
    record(criterion_inference_modes(&thor[0].model, &base));
    record(criterion_variance(
        &thor.iter().map(|r| &r.model).collect::<Vec<_>>(),
        &ce1_ce2.iter().map(|r| &r.model).collect::<Vec<_>>(),
        &base,
    ));
    record(criterion_alpha(&sweep));

    verdicts.sort_by_key(|v| v.id);
    println!();
    println!("acceptance summary ({:.0} s)", start.elapsed().as_secs_f64());
    for v in &verdicts {
        println!(
            "criterion {:>2}: {}  {}",
            v.id,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!("{} passed, {failed} failed", verdicts.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
