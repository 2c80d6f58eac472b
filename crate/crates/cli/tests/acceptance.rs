//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Failures are reported but only turn into a non-zero exit status when
//! `ACCEPTANCE_STRICT=1`. `ACCEPTANCE_ONLY=1,5,10` runs a subset.

use std::cell::OnceCell;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::rc::Rc;
use std::time::Instant;

use layerprune::baselines::{calibration_loss, oracle_prune, random_search, CalibrationSet, RandomSpace};
use layerprune::distill::{block_alignment, distill_finetune, finetune, masked_repkd_loss, DistillConfig, Exclusion, Threshold};
use layerprune::eval::{eval_loss, throughput_bench, BenchConfig};
use layerprune::lora::{LoraAdapter, LoraConfig};
use layerprune::mask::{binomial, enumerate_candidates, search_space_size, MaskDistribution, NMScheme, PruneDecision, SearchSpace};
use layerprune::model::{diffusion_loss, Gates};
use layerprune::optim::OptimConfig;
use layerprune::recover::{apply_decision, learn_pruning, PruneLearnConfig};
use layerprune::rng::seeded;
use layerprune::tensor::{gate, grad_check, layernorm, straight_through, Tape, Tensor, TensorError, Var, DEFAULT_STEP};
use layerprune::train::{train_base, TrainConfig};
use layerprune::{DiffusionTask, TaskConfig, ToyDiT, ToyDiTConfig};
use rand::Rng;

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;
type TResult<'t> = Result<Var<'t>, TensorError>;

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> AnyResult<Check> {
    Ok(Check { pass, detail: detail.into() })
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn toy_config(depth: usize) -> ToyDiTConfig {
    ToyDiTConfig { depth, hidden_dim: 16, heads: 2, mlp_ratio: 2.0, seq_len: 2, ..Default::default() }
}

fn trained(depth: usize, steps: usize, seed: u64, task: &DiffusionTask) -> AnyResult<ToyDiT> {
    let tc = TrainConfig { steps, batch_size: 64, optim: OptimConfig { lr: 1e-3, ..Default::default() }, ..Default::default() };
    Ok(train_base(&toy_config(depth), task, &tc, seed)?.ema)
}

// ---------------------------------------------------------------- 1

fn scalar_fn<F: for<'t> Fn(Var<'t>) -> TResult<'t>>(f: F) -> F {
    f
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut seeded(seed, 77))
}

/// Contracts an arbitrary output with fixed weights into a scalar.
fn project<'t>(y: Var<'t>, seed: u64) -> TResult<'t> {
    let w = y.tape().constant(randn(&y.shape(), seed));
    Ok(y.mul(w)?.sum())
}

fn op_sweep() -> AnyResult<Vec<(&'static str, f64)>> {
    let a = randn(&[4, 5], 1);
    let b = randn(&[5, 3], 2);
    let bt = randn(&[3, 5], 3);
    let ba = randn(&[2, 3, 4], 4);
    let bb = randn(&[2, 4, 5], 5);
    let bbt = randn(&[2, 5, 4], 6);
    let row = randn(&[5], 7);
    let pos = Tensor::new([4, 5], a.data().iter().map(|v| v.abs() + 0.5).collect())?;
    let index: Rc<[usize]> = Rc::from(vec![3usize, 0, 7, 7, 19, 12]);
    let h = DEFAULT_STEP;

    let mut out = Vec::new();
    macro_rules! run {
        ($name:expr, $point:expr, $f:expr) => {
            out.push(($name, grad_check(scalar_fn($f), $point, h)?));
        };
    }
    run!("matmul.lhs", &a, |x| project(x.matmul(x.tape().constant(b.clone()))?, 10));
    run!("matmul.rhs", &b, |x| project(x.tape().constant(a.clone()).matmul(x)?, 10));
    run!("matmul_nt.lhs", &a, |x| project(x.matmul_nt(x.tape().constant(bt.clone()))?, 11));
    run!("matmul_nt.rhs", &bt, |x| project(x.tape().constant(a.clone()).matmul_nt(x)?, 11));
    run!("bmm.lhs", &ba, |x| project(x.bmm(x.tape().constant(bb.clone()))?, 12));
    run!("bmm.rhs", &bb, |x| project(x.tape().constant(ba.clone()).bmm(x)?, 12));
    run!("bmm_nt.lhs", &ba, |x| project(x.bmm_nt(x.tape().constant(bbt.clone()))?, 13));
    run!("bmm_nt.rhs", &bbt, |x| project(x.tape().constant(ba.clone()).bmm_nt(x)?, 13));
    run!("add.broadcast", &row, |x| project(x.tape().constant(a.clone()).add(x)?, 14));
    run!("add", &a, |x| project(x.add(x.tape().constant(pos.clone()))?, 14));
    run!("sub", &a, |x| project(x.tape().constant(pos.clone()).sub(x)?, 15));
    run!("mul", &a, |x| project(x.mul(x.tape().constant(pos.clone()))?, 16));
    run!("mul.broadcast", &row, |x| project(x.tape().constant(a.clone()).mul(x)?, 16));
    run!("scale", &a, |x| project(x.scale(-1.7), 17));
    run!("gelu", &a, |x| project(x.gelu(), 18));
    run!("exp", &a, |x| project(x.exp(), 19));
    run!("log", &pos, |x| project(x.log()?, 20));
    run!("square", &a, |x| project(x.square(), 21));
    run!("sum", &a, |x| Ok(x.sum().scale(1.3)));
    run!("mean", &a, |x| Ok(x.exp().mean()));
    run!("mse", &a, |x| x.mse(x.tape().constant(pos.clone())));
    run!("softmax.0", &a, |x| project(x.softmax(0)?, 22));
    run!("softmax.1", &a, |x| project(x.softmax(1)?, 22));
    run!("log_softmax", &a, |x| project(x.log_softmax(1)?, 23));
    run!("reshape", &a, |x| project(x.reshape([2, 10])?, 24));
    run!("gather", &a, |x| project(x.gather(index.clone(), [2, 3])?, 25));
    run!("rows", &a, |x| project(x.rows(&[3, 1, 1])?, 26));
    run!("layernorm.x", &a, |x| {
        let t = x.tape();
        project(layernorm(x, t.constant(row.clone()), t.constant(randn(&[5], 8)), 1e-5)?, 27)
    });
    run!("layernorm.gain", &row, |x| {
        let t = x.tape();
        project(layernorm(t.constant(a.clone()), x, t.constant(randn(&[5], 8)), 1e-5)?, 27)
    });
    run!("layernorm.bias", &row, |x| {
        let t = x.tape();
        project(layernorm(t.constant(a.clone()), t.constant(randn(&[5], 8)), x, 1e-5)?, 27)
    });
    let gates = Tensor::new([3], vec![1.0, 0.3, 0.0])?;
    for idx in 0..3 {
        let (g, p) = (gates.clone(), pos.clone());
        out.push((
            ["gate.phi.on", "gate.phi.relaxed", "gate.phi.off"][idx],
            grad_check(scalar_fn(move |x| { let t = x.tape(); project(gate(x, t.constant(p.clone()), t.constant(g.clone()), idx, None)?, 28) }), &a, h)?,
        ));
        let (g, p) = (gates.clone(), pos.clone());
        out.push((
            ["gate.skip.on", "gate.skip.relaxed", "gate.skip.off"][idx],
            grad_check(scalar_fn(move |x| { let t = x.tape(); project(gate(t.constant(p.clone()), x, t.constant(g.clone()), idx, None)?, 28) }), &a, h)?,
        ));
    }
    run!("gate.gates", &gates, |x| {
        let t = x.tape();
        project(gate(t.constant(a.clone()), t.constant(pos.clone()), x, 1, None)?, 29)
    });
    // the forward value is the hard tensor, so the checked function is the soft path
    run!("straight_through", &a, |x| {
        let soft = x.softmax(1)?;
        let hard = soft.to_tensor();
        project(straight_through(hard, soft)?, 30)
    });
    Ok(out)
}

fn loss_sweep() -> AnyResult<Vec<(String, f64)>> {
    let cfg = ToyDiTConfig { depth: 2, hidden_dim: 8, heads: 2, mlp_ratio: 2.0, seq_len: 3, num_classes: 4, ..Default::default() };
    let mut model = ToyDiT::init(cfg, &mut seeded(3, 0))?;
    model.params.output.weight = Tensor::randn(model.params.output.weight.shape().to_vec(), 0.3, &mut seeded(4, 0));
    let task = DiffusionTask::new(TaskConfig { train_size: 64, heldout_size: 16, ..Default::default() })?;
    let batch = task.train_batch(4, &mut seeded(5, 0));
    let mut adapter = LoraAdapter::init(&model, &LoraConfig { rank: 2, alpha: None }, &mut seeded(6, 0))?;
    adapter.params.for_each_mut(&mut |_, t| *t = Tensor::randn(t.shape().to_vec(), 0.2, &mut seeded(7, t.numel() as u64)));

    let mut out = Vec::new();
    let names = model.params.names();
    let tensors: Vec<Tensor> = model.params.flat().into_iter().cloned().collect();
    for (name, t) in names.iter().zip(&tensors) {
        for gates in [vec![1.0, 1.0], vec![1.0, 0.5]] {
            let f = scalar_fn(|x| {
                let tape = x.tape();
                let params = model.params.map(&mut |n, p| if n == name { x } else { tape.constant(p.clone()) });
                diffusion_loss(&model, &params, None, &batch, &task.schedule, Gates::Fixed(&gates)).map_err(to_tensor_err)
            });
            out.push((format!("{name} gates {gates:?}"), grad_check(f, t, DEFAULT_STEP)?));
        }
    }
    let mut lora = Vec::new();
    adapter.params.visit(&mut |n, t| lora.push((n.to_string(), t.clone())));
    for (name, t) in &lora {
        let f = scalar_fn(|x| {
            let tape = x.tape();
            let params = model.bind(tape, false);
            let l = adapter.params.map(&mut |n, p| if n == name { x } else { tape.constant(p.clone()) });
            diffusion_loss(&model, &params, Some((&l, adapter.alpha)), &batch, &task.schedule, Gates::All).map_err(to_tensor_err)
        });
        out.push((name.clone(), grad_check(f, t, DEFAULT_STEP)?));
    }
    Ok(out)
}

fn to_tensor_err(e: layerprune::Error) -> TensorError {
    match e {
        layerprune::Error::Tensor(t) => t,
        other => TensorError::NonFinite(other.to_string()),
    }
}

fn gradient_correctness() -> AnyResult<Check> {
    let start = Instant::now();
    let ops = op_sweep()?;
    let loss = loss_sweep()?;
    let secs = start.elapsed().as_secs_f64();
    let worst_op = ops.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let worst_loss = loss.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let pass = worst_op.1 < 1e-5 && worst_loss.1 < 1e-5 && secs < 120.0;
    check(
        pass,
        format!(
            "{} op checks, worst {} {:.1e}; {} loss checks, worst {} {:.1e}; {secs:.1}s",
            ops.len(),
            worst_op.0,
            worst_op.1,
            loss.len(),
            worst_loss.0,
            worst_loss.1
        ),
    )
}

// ---------------------------------------------------------------- 2, 3, 4

fn mask_validity() -> AnyResult<Check> {
    let draws = 100_000;
    let mut details = Vec::new();
    let mut violations = 0usize;
    for (n, m) in [(1, 2), (2, 4)] {
        let scheme = NMScheme::new(n, m, 8)?;
        let logits = Tensor::randn([scheme.blocks, scheme.num_candidates()], 1.0, &mut seeded(n as u64, 90));
        let dist = MaskDistribution::with_logits(scheme, logits)?;
        let mut rng = seeded(m as u64, 91);
        let mut bad = 0;
        for i in 0..draws {
            let tau = 0.1 + 3.9 * (i % 40) as f64 / 39.0;
            let g = dist.sample_full(tau, &mut rng)?;
            let ok = g.len() == 8
                && g.iter().all(|v| *v == 0.0 || *v == 1.0)
                && g.chunks(m).all(|b| b.iter().filter(|v| **v == 1.0).count() == n);
            bad += usize::from(!ok);
        }
        violations += bad;
        details.push(format!("{n}:{m} {bad} violations in {draws}"));
    }
    check(violations == 0, details.join(", "))
}

fn gumbel_fidelity() -> AnyResult<Check> {
    let scheme = NMScheme::new(2, 3, 3)?;
    let logits = [1.0, 0.0, -1.0];
    let dist = MaskDistribution::with_logits(scheme, Tensor::new([1, 3], logits.to_vec())?)?;
    let cands = enumerate_candidates(2, 3)?;
    let draws = 100_000;
    let mut counts = [0usize; 3];
    let mut rng = seeded(5, 92);
    for _ in 0..draws {
        let g = dist.sample_full(1.0, &mut rng)?;
        let c = (0..3).find(|&c| cands.row(c) == g.as_slice()).ok_or("draw is not a candidate")?;
        counts[c] += 1;
    }
    let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
    let tv = 0.5 * (0..3).map(|c| (counts[c] as f64 / draws as f64 - logits[c].exp() / z).abs()).sum::<f64>();
    check(tv < 0.01, format!("counts {counts:?}, total variation {tv:.4}"))
}

fn candidate_enumeration() -> AnyResult<Check> {
    let c = enumerate_candidates(2, 3)?;
    let expected = [[1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]];
    let matrix_ok = c.shape() == [3, 3] && (0..3).all(|i| c.row(i) == expected[i]);
    let c147 = binomial(14, 7);
    let rows147 = enumerate_candidates(7, 14)?.shape()[0];
    let c2814 = binomial(28, 14);
    let global = search_space_size(SearchSpace::Global { layers: 28, keep: 14 })?;
    let pass = matrix_ok && c147 == Some(3432) && rows147 == 3432 && c2814 == Some(40_116_600) && global == 40_116_600;
    check(pass, format!("(2,3) matrix {}; C(14,7) = {c147:?} ({rows147} rows); C(28,14) = {c2814:?}", if matrix_ok { "exact" } else { "wrong" }))
}

// ---------------------------------------------------------------- 5

fn masked_forward_exactness() -> AnyResult<Check> {
    let mut rng = seeded(11, 93);
    let mut worst = 0.0f64;
    for pair in 0..20u64 {
        let heads = rng.random_range(1..=2);
        let cfg = ToyDiTConfig {
            depth: rng.random_range(2..=8),
            hidden_dim: heads * rng.random_range(2..=6),
            heads,
            mlp_ratio: 2.0,
            seq_len: rng.random_range(1..=3),
            num_classes: if pair % 2 == 0 { 0 } else { 3 },
            ..Default::default()
        };
        let mut model = ToyDiT::init(cfg.clone(), &mut seeded(pair, 94))?;
        model.params.for_each_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3)));
        let gates: Vec<f64> = loop {
            let g: Vec<f64> = (0..cfg.depth).map(|_| f64::from(rng.random_bool(0.5))).collect();
            if g.contains(&1.0) {
                break g;
            }
        };
        let keep: Vec<usize> = (0..cfg.depth).filter(|&i| gates[i] == 1.0).collect();
        let shrunk = model.with_layers(&keep)?;
        let n = 6;
        let points: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.num_timesteps)).collect();
        let labels: Option<Vec<usize>> = (cfg.num_classes > 0).then(|| (0..n).map(|_| rng.random_range(0..3)).collect());
        let input = model.input_for(&points, &t, labels.as_deref());
        let masked = model.predict(&input, &gates)?;
        let direct = shrunk.predict(&input, &shrunk.all_on())?;
        worst = worst.max(masked.max_abs_diff(&direct));
    }
    check(worst <= 1e-12, format!("20 pairs, worst element difference {worst:.1e}"))
}

// ---------------------------------------------------------------- 6

fn planted_convergence() -> AnyResult<Check> {
    let start = Instant::now();
    let task = DiffusionTask::new(TaskConfig { train_size: 4096, heldout_size: 256, ..Default::default() })?;
    let mut passed = 0;
    let mut details = Vec::new();
    for seed in SEEDS {
        let model = trained(4, 1500, seed, &task)?.with_identity_layers(&[0, 2, 4, 6])?;
        let cfg = PruneLearnConfig { steps: Some(2000), batch_size: 32, ..Default::default() };
        let out = learn_pruning(&model, &task, &cfg, seed)?;
        let conf = out.decision.confidences.iter().cloned().fold(f64::INFINITY, f64::min);
        let ok = out.decision.retained_layers == [1, 3, 5, 7] && conf >= 0.9;
        passed += usize::from(ok);
        details.push(format!("seed {seed} kept {:?} min confidence {conf:.3}", out.decision.retained_layers));
    }
    let secs = start.elapsed().as_secs_f64();
    check(passed == 3 && secs < 600.0, format!("{passed}/3 seeds; {}; {secs:.0}s", details.join("; ")))
}

// ---------------------------------------------------------------- 7, 9

struct TrendRun {
    learnable: f64,
    oracle: f64,
    min_loss: f64,
    distilled: f64,
}

fn recovery_config() -> DistillConfig {
    let mut cfg = DistillConfig { steps: 5000, batch_size: 128, ..Default::default() };
    cfg.optim.lr = 1e-3;
    cfg
}

fn trend_run(seed: u64) -> AnyResult<TrendRun> {
    let task = DiffusionTask::new(TaskConfig::default())?;
    let teacher = trained(8, 12_000, seed, &task)?;
    let learned = learn_pruning(&teacher, &task, &PruneLearnConfig { steps: Some(2000), batch_size: 32, ..Default::default() }, seed)?.decision;
    let calib = CalibrationSet::new(&task, 512, 0);
    let search = random_search(&teacher, &calib, 2000, RandomSpace::Keep(4), seed)?;
    let min_loss = PruneDecision::global(&search.scores[search.min].gates);
    let oracle = PruneDecision::global(&oracle_prune(8, 4)?);
    let rcfg = recovery_config();
    let recover = |d: &PruneDecision| -> AnyResult<f64> {
        let r = finetune(apply_decision(&teacher, d)?, &task, &rcfg, seed)?;
        Ok(eval_loss(&r.ema, &task, 0)?)
    };
    let align = block_alignment(8, NMScheme::new(1, 2, 8)?, &learned)?;
    let distilled = distill_finetune(apply_decision(&teacher, &learned)?, &teacher, Some(&align), &task, &rcfg, seed)?;
    let run = TrendRun {
        learnable: recover(&learned)?,
        oracle: recover(&oracle)?,
        min_loss: recover(&min_loss)?,
        distilled: eval_loss(&distilled.ema, &task, 0)?,
    };
    println!(
        "  seed {seed}: learned {:?} (calib {:.4}), min-loss {:?} (calib {:.4}), oracle calib {:.4}",
        learned.retained_layers,
        calibration_loss(&teacher, &learned.gates(), &calib)?,
        min_loss.retained_layers,
        search.scores[search.min].calibration_loss,
        calibration_loss(&teacher, &oracle.gates(), &calib)?,
    );
    Ok(run)
}

fn trend_ordering(runs: &[TrendRun]) -> AnyResult<Check> {
    let ok = runs.iter().filter(|r| r.learnable <= r.oracle && r.oracle <= r.min_loss).count();
    let rows: Vec<String> = runs
        .iter()
        .zip(SEEDS)
        .map(|(r, s)| format!("seed {s} learnable {:.4} oracle {:.4} min-loss {:.4}", r.learnable, r.oracle, r.min_loss))
        .collect();
    check(ok >= 2, format!("{ok}/3 seeds ordered; {}", rows.join("; ")))
}

fn distillation_benefit(runs: &[TrendRun]) -> AnyResult<Check> {
    let ok = runs.iter().filter(|r| r.distilled < r.learnable).count();
    let rows: Vec<String> =
        runs.iter().zip(SEEDS).map(|(r, s)| format!("seed {s} distill {:.4} plain {:.4}", r.distilled, r.learnable)).collect();
    check(ok >= 2, format!("{ok}/3 seeds improved; {}", rows.join("; ")))
}

// ---------------------------------------------------------------- 8

fn masked_kd_robustness() -> AnyResult<Check> {
    let task = DiffusionTask::new(TaskConfig { train_size: 4096, heldout_size: 256, ..Default::default() })?;
    let mut teacher = trained(8, 1500, 0, &task)?;
    let scheme = NMScheme::new(1, 2, 8)?;
    let forced = Tensor::new([4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0])?;
    let decision = MaskDistribution::with_logits(scheme, forced)?.decide();
    assert_eq!(decision.retained_layers, [0, 2, 5, 7]);
    let student = apply_decision(&teacher, &decision)?;
    let align = block_alignment(8, scheme, &decision)?;

    // a 100σ offset in one channel of the first block output is carried by the residual stream into every aligned state
    let input = teacher.batch_input(&task.train_batch(64, &mut seeded(3, 95)), &task.schedule);
    let clean = teacher.hidden_states(&input, &teacher.all_on())?;
    let data = clean[1].data();
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let sigma = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / data.len() as f64).sqrt();
    teacher.params.blocks[0].down.bias.data_mut()[3] += 100.0 * sigma;

    let t_states = teacher.hidden_states(&input, &teacher.all_on())?;
    let s_states = student.hidden_states(&input, &student.all_on())?;
    let rep = |k: f64| -> AnyResult<f64> {
        let tape = Tape::new();
        let mut total = 0.0;
        for &(s, t) in &align.pairs {
            let (l, _) = masked_repkd_loss(tape.constant(s_states[s + 1].clone()), &t_states[t + 1], k, Threshold::Centered, Exclusion::Union)?;
            total += l.item();
        }
        Ok(total)
    };
    let (unmasked, masked) = (rep(f64::INFINITY)?, rep(2.0)?);
    let ratio = unmasked / masked;

    let cfg = DistillConfig { steps: 1000, batch_size: 64, ..recovery_config() };
    let (finite, detail) = match distill_finetune(student, &teacher, Some(&align), &task, &cfg, 0) {
        Ok(r) => {
            let finite = r.log.len() == 1000 && r.log.iter().all(|row| [row.total, row.kd, row.diff, row.rep].iter().all(|v| v.is_finite()));
            (finite, format!("1000 steps, final total {:.4}", r.log.last().map_or(f64::NAN, |r| r.total)))
        }
        Err(e) => (false, format!("distillation failed: {e}")),
    };
    check(ratio >= 10.0 && finite, format!("unmasked {unmasked:.3e} vs k=2 {masked:.3e} (ratio {ratio:.0}); {detail}"))
}

// ---------------------------------------------------------------- 10

fn depth_speedup() -> AnyResult<Check> {
    let start = Instant::now();
    let cfg = BenchConfig {
        depths: vec![8, 4],
        model: ToyDiTConfig { hidden_dim: 32, heads: 4, mlp_ratio: 4.0, seq_len: 8, ..Default::default() },
        batch: 64,
        trials: 15,
        ..Default::default()
    };
    let report = throughput_bench(&cfg)?;
    let speedup = report.rows[1].speedup;
    let secs = start.elapsed().as_secs_f64();
    check(
        (1.8..=2.2).contains(&speedup) && secs < 300.0,
        format!("depth 8 {:.1} it/s, depth 4 {:.1} it/s, speedup {speedup:.3}; {secs:.1}s", report.rows[0].its, report.rows[1].its),
    )
}

// ---------------------------------------------------------------- 11

const PIPELINE_CONFIG: &str = r#"
seeds = [0]

[model]
depth = 8
hidden_dim = 16
heads = 2
mlp_ratio = 2.0
seq_len = 2

[task]
train_size = 2048
heldout_size = 256

[train]
steps = 1000
batch_size = 64

[prune.learn]
steps = 300
batch_size = 32

[recover.train]
steps = 300
batch_size = 64

[eval]
samples = 500
"#;

fn artifacts(root: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>, base: &Path) -> std::io::Result<()> {
    for e in std::fs::read_dir(root)? {
        let p = e?.path();
        if p.is_dir() {
            artifacts(&p, out, base)?;
        } else if p.extension().is_some_and(|x| x == "tfck") || p.file_name().is_some_and(|n| n == "decision.json") {
            out.push((p.strip_prefix(base).unwrap().to_path_buf(), std::fs::read(&p)?));
        }
    }
    Ok(())
}

fn pipeline_once() -> AnyResult<Vec<(PathBuf, Vec<u8>)>> {
    let dir = tempfile::tempdir()?;
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, format!("output_dir = {:?}\n{PIPELINE_CONFIG}", dir.path().join("runs").display().to_string()))?;
    let stages: [&[&str]; 4] = [&["train-base"], &["prune-learn"], &["distill"], &["eval", "--recover", "distill"]];
    for stage in stages {
        let out = Command::new(env!("CARGO_BIN_EXE_layerprune")).arg("--config").arg(&cfg).arg("--seed").arg("0").args(stage).output()?;
        if !out.status.success() {
            return Err(format!("{stage:?} failed: {}", String::from_utf8_lossy(&out.stderr)).into());
        }
    }
    let mut found = Vec::new();
    artifacts(&dir.path().join("runs"), &mut found, dir.path())?;
    found.sort();
    Ok(found)
}

fn reproducibility() -> AnyResult<Check> {
    let a = pipeline_once()?;
    let b = pipeline_once()?;
    let same_files = a.iter().map(|x| &x.0).eq(b.iter().map(|x| &x.0));
    let differing: Vec<String> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.display().to_string()).collect();
    let decisions = a.iter().filter(|x| x.0.ends_with("decision.json")).count();
    let checkpoints = a.len() - decisions;
    check(
        same_files && differing.is_empty() && decisions > 0 && checkpoints >= 2,
        if differing.is_empty() && same_files {
            format!("{decisions} decision(s) and {checkpoints} checkpoint(s) byte-identical across two runs")
        } else {
            format!("differing artifacts: {differing:?}, same file set: {same_files}")
        },
    )
}

// ----------------------------------------------------------------

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let wanted = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));

    let trend: OnceCell<AnyResult<Vec<TrendRun>>> = OnceCell::new();
    let trend_runs = || {
        trend.get_or_init(|| {
            println!("  training and recovering 3 seeds for the trend comparison");
            SEEDS.iter().map(|&s| trend_run(s)).collect()
        })
    };
    let shared = |f: fn(&[TrendRun]) -> AnyResult<Check>| match trend_runs() {
        Ok(runs) => f(runs),
        Err(e) => Err(e.to_string().into()),
    };

    let criteria: Vec<(&str, Box<dyn Fn() -> AnyResult<Check> + '_>)> = vec![
        ("gradient correctness", Box::new(gradient_correctness)),
        ("mask validity", Box::new(mask_validity)),
        ("gumbel-max fidelity", Box::new(gumbel_fidelity)),
        ("candidate enumeration", Box::new(candidate_enumeration)),
        ("masked forward exactness", Box::new(masked_forward_exactness)),
        ("planted redundancy convergence", Box::new(planted_convergence)),
        ("recovery trend ordering", Box::new(move || shared(trend_ordering))),
        ("masked KD robustness", Box::new(masked_kd_robustness)),
        ("distillation benefit", Box::new(move || shared(distillation_benefit))),
        ("depth speedup", Box::new(depth_speedup)),
        ("reproducibility", Box::new(reproducibility)),
    ];

    let mut failed = Vec::new();
    let mut ran = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !wanted(id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run));
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok(Ok(c)) => (c.pass, c.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        println!("criterion {id:>2} {}  {name}: {detail} [{secs:.1}s]", if pass { "PASS" } else { "FAIL" });
        if !pass {
            failed.push(id);
        }
    }
    println!("acceptance: {}/{ran} passed{}", ran - failed.len(), if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") });
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
