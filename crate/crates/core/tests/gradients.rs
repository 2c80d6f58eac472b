//! Finite-difference checks of the full model loss.

use layerprune::lora::{LoraAdapter, LoraConfig};
use layerprune::mask::{gumbel_noise, MaskDistribution, NMScheme};
use layerprune::model::{diffusion_loss, forward, Gates, PrunedGrad};
use layerprune::rng::seeded;
use layerprune::tensor::{grad_check, Tape, Tensor, Var, DEFAULT_STEP};
use layerprune::{DiffusionTask, TaskConfig, ToyDiT, ToyDiTConfig};

type TResult<'t> = Result<Var<'t>, layerprune::tensor::TensorError>;

/// Pins a closure to the higher-ranked signature `grad_check` expects.
fn scalar_fn<F: for<'t> Fn(Var<'t>) -> TResult<'t>>(f: F) -> F {
    f
}

fn setup() -> (ToyDiT, DiffusionTask, layerprune::Batch) {
    let cfg = ToyDiTConfig { depth: 2, hidden_dim: 8, heads: 2, mlp_ratio: 2.0, seq_len: 3, num_classes: 8, ..Default::default() };
    let mut model = ToyDiT::init(cfg, &mut seeded(3, 0)).unwrap();
    // a zero output head makes most gradients vanish; use a random one
    model.params.output.weight = Tensor::randn(model.params.output.weight.shape().to_vec(), 0.3, &mut seeded(4, 0));
    let task = DiffusionTask::new(TaskConfig { train_size: 64, heldout_size: 16, ..Default::default() }).unwrap();
    let batch = task.train_batch(4, &mut seeded(5, 0));
    (model, task, batch)
}

/// Loss as a function of the parameter named `target`.
fn loss_wrt<'t>(model: &ToyDiT, task: &DiffusionTask, batch: &layerprune::Batch, target: &str, x: Var<'t>, gates: &[f64]) -> Var<'t> {
    let tape = x.tape();
    let params = model.params.map(&mut |name, t| if name == target { x } else { tape.constant(t.clone()) });
    diffusion_loss(model, &params, None, batch, &task.schedule, Gates::Fixed(gates)).unwrap()
}

#[test]
fn full_loss_gradient_for_every_parameter() {
    let (model, task, batch) = setup();
    let names = model.params.names();
    let tensors: Vec<Tensor> = model.params.flat().into_iter().cloned().collect();
    for (name, t) in names.iter().zip(&tensors) {
        for gates in [vec![1.0, 1.0], vec![1.0, 0.5]] {
            let err = grad_check(|x| Ok(loss_wrt(&model, &task, &batch, name, x, &gates)), t, DEFAULT_STEP).unwrap();
            assert!(err < 1e-5, "{name} with gates {gates:?}: relative error {err:e}");
        }
    }
}

#[test]
fn lora_path_gradients() {
    let (model, task, batch) = setup();
    let mut adapter = LoraAdapter::init(&model, &LoraConfig { rank: 2, alpha: None }, &mut seeded(6, 0)).unwrap();
    // B = 0 at init would zero the gradient to A
    adapter.params.for_each_mut(&mut |_, t| {
        if t.data().iter().all(|v| *v == 0.0) {
            *t = Tensor::randn(t.shape().to_vec(), 0.2, &mut seeded(7, t.numel() as u64));
        }
    });
    let mut names = Vec::new();
    adapter.params.visit(&mut |n, t| names.push((n.to_string(), t.clone())));
    for (name, t) in names.iter().filter(|(n, _)| n.contains("lora.1.") || n.contains(".q.")) {
        let f = scalar_fn(|x| {
            let tape = x.tape();
            let params = model.bind(tape, false);
            let lora = adapter.params.map(&mut |n, p| if n == name { x } else { tape.constant(p.clone()) });
            Ok(diffusion_loss(&model, &params, Some((&lora, adapter.alpha)), &batch, &task.schedule, Gates::All).unwrap())
        });
        let err = grad_check(f, t, DEFAULT_STEP).unwrap();
        assert!(err < 1e-5, "{name}: relative error {err:e}");
    }
}

/// With the noise fixed, the straight-through logit gradient equals the
/// gradient of `⟨c, relaxed gates⟩` where `c` is the loss gradient at the
/// hard gates.
#[test]
fn straight_through_gradient_matches_relaxed_path() {
    let (model, task, batch) = setup();
    let scheme = NMScheme::new(1, 2, 2).unwrap();
    let dist = MaskDistribution::with_logits(scheme, Tensor::new([1, 2], vec![0.3, -0.2]).unwrap()).unwrap();
    let noise = gumbel_noise(1, 2, &mut seeded(8, 0));
    let tau = 0.7;

    let tape = Tape::new();
    let logits = tape.param(&dist.logits);
    let draw = dist.sample_differentiable(logits, &noise, tau).unwrap();
    let params = model.bind(&tape, false);
    let input = model.batch_input(&batch, &task.schedule);
    let pass = forward(&model.config, &params, None, &input, Gates::Sampled { gates: draw.gates, pruned: PrunedGrad::Gate }).unwrap();
    let loss = pass.output.mse(tape.constant(model.noise_target(&batch))).unwrap();
    let hard = draw.gates.value().clone();
    let ste = tape.backward(loss).unwrap().tensor(logits);
    drop(params);

    // loss gradient at the hard gates, taken with the gates as a leaf
    let tape = Tape::new();
    let gates = tape.param(&hard);
    let params = model.bind(&tape, false);
    let pass = forward(&model.config, &params, None, &input, Gates::Sampled { gates, pruned: PrunedGrad::Gate }).unwrap();
    let loss = pass.output.mse(tape.constant(model.noise_target(&batch))).unwrap();
    let c = tape.backward(loss).unwrap().tensor(gates);
    drop(params);
    assert!(c.data().iter().any(|v| *v != 0.0));

    let relaxed = scalar_fn(|x| {
        let tape = x.tape();
        let perturbed = x.log_softmax(1)?.add(tape.constant(noise.clone()))?;
        let soft = perturbed.scale(1.0 / tau).softmax(1)?;
        let gates = soft.matmul(tape.constant(dist.candidates.clone()))?.reshape([2])?;
        gates.mul(tape.constant(c.clone()))?.sum().reshape([1])
    });
    let tape = Tape::new();
    let x = tape.param(&dist.logits);
    let y = relaxed(x).unwrap();
    let expected = tape.backward(y).unwrap().tensor(x);
    for (a, b) in ste.data().iter().zip(expected.data()) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }
    let err = grad_check(relaxed, &dist.logits, DEFAULT_STEP).unwrap();
    assert!(err < 1e-4, "relaxed path finite differences: {err:e}");
}

#[test]
fn init_loss_is_near_one() {
    let cfg = ToyDiTConfig { depth: 4, hidden_dim: 16, heads: 2, mlp_ratio: 2.0, seq_len: 2, ..Default::default() };
    let model = ToyDiT::init(cfg, &mut seeded(0, 1)).unwrap();
    let task = DiffusionTask::new(TaskConfig { train_size: 10_000, heldout_size: 16, ..Default::default() }).unwrap();
    let batch = task.train_batch(10_000, &mut seeded(1, 1));
    let loss = model.loss_value(&batch, &task.schedule, &model.all_on()).unwrap();
    assert!((loss - 1.0).abs() < 0.2, "initial loss {loss}");
}
