//! Finite-difference gradient checks in f64 for every differentiable
//! primitive and for the model-level losses. Each check returns the worst
//! relative error it saw.

#![allow(dead_code)]

use latent_scope::future::{fp_loss, fp_loss_grad, lstm_unroll_grad, mdn_nll_grad, FpParams};
use latent_scope::vae::{vae_loss, vae_loss_grad, VaeConfig, VaeParams};
use latent_scope_tensor::{Result, Tape, Tensor, Var};
use latent_scope_testkit::{central_difference, max_relative_error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
const H: f64 = 1e-6;
const FLOOR: f64 = 1e-2;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

pub fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Magnitudes in [0.2, 1.5] with mixed signs, away from relu/clamp kinks.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11);
    let mut t = random(shape, seed, 0.2, 1.5);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

fn weighted(tape: &mut Tape<f64>, inputs: &[Var], build: &Build) -> Result<Var> {
    let y = build(tape, inputs)?;
    let shape = tape.shape(y).to_vec();
    let w = random(&shape, 0x5eed, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check_op(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = weighted(&mut tape, &vars, build).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).to_f64_vec();
        let mut f = |x: &[f64]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    let t = if j == k {
                        Tensor::new(t.shape().to_vec(), x.to_vec()).unwrap()
                    } else {
                        t.clone()
                    };
                    tape.leaf(t)
                })
                .collect();
            let loss = weighted(&mut tape, &vars, build).unwrap();
            tape.value(loss).item().unwrap()
        };
        let numeric = central_difference(&mut f, input.data(), H);
        worst = worst.max(max_relative_error(&analytic, &numeric, FLOOR));
    }
    worst
}

/// Every tape primitive on fixed random inputs.
pub fn primitives() -> Vec<(&'static str, f64)> {
    let a = || random(&[3, 4], 1, -1.0, 1.0);
    let pos = || random(&[3, 4], 2, 0.3, 2.0);
    let kink_free = || away_from_zero(&[3, 4], 3);
    let mut out = Vec::new();
    let mut run = |name: &'static str, build: Box<Build>, inputs: Vec<Tensor<f64>>| {
        out.push((name, check_op(&*build, &inputs)));
    };
    run("add (broadcast)", Box::new(|t, v| t.add(v[0], v[1])), vec![a(), random(&[4], 4, -1.0, 1.0)]);
    run("sub (broadcast)", Box::new(|t, v| t.sub(v[0], v[1])), vec![a(), random(&[3, 1], 5, -1.0, 1.0)]);
    run("mul (broadcast)", Box::new(|t, v| t.mul(v[0], v[1])), vec![a(), random(&[1, 4], 6, -1.0, 1.0)]);
    run("div", Box::new(|t, v| t.div(v[0], v[1])), vec![a(), pos()]);
    run("relu", Box::new(|t, v| t.relu(v[0])), vec![kink_free()]);
    run("sigmoid", Box::new(|t, v| t.sigmoid(v[0])), vec![a()]);
    run("tanh", Box::new(|t, v| t.tanh(v[0])), vec![a()]);
    run("exp", Box::new(|t, v| t.exp(v[0])), vec![a()]);
    run("log", Box::new(|t, v| t.log(v[0])), vec![pos()]);
    run("square", Box::new(|t, v| t.square(v[0])), vec![a()]);
    run("scale", Box::new(|t, v| t.scale(v[0], -1.7)), vec![a()]);
    run("neg", Box::new(|t, v| t.neg(v[0])), vec![a()]);
    run("add_scalar", Box::new(|t, v| t.add_scalar(v[0], 0.3)), vec![a()]);
    run("clamp", Box::new(|t, v| t.clamp(v[0], -0.5, 0.5)), vec![kink_free().map(|x| x * 0.9)]);
    run("matmul", Box::new(|t, v| t.matmul(v[0], v[1])), vec![a(), random(&[4, 2], 7, -1.0, 1.0)]);
    run("transpose", Box::new(|t, v| t.transpose(v[0])), vec![a()]);
    run(
        "linear",
        Box::new(|t, v| t.linear(v[0], v[1], v[2])),
        vec![a(), random(&[4, 5], 8, -1.0, 1.0), random(&[5], 9, -1.0, 1.0)],
    );
    run(
        "conv2d",
        Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
        vec![
            random(&[2, 2, 6, 6], 10, -1.0, 1.0),
            random(&[3, 2, 4, 4], 11, -1.0, 1.0),
            random(&[3], 12, -1.0, 1.0),
        ],
    );
    run(
        "conv_transpose2d",
        Box::new(|t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)),
        vec![
            random(&[2, 3, 3, 3], 13, -1.0, 1.0),
            random(&[3, 2, 4, 4], 14, -1.0, 1.0),
            random(&[2], 15, -1.0, 1.0),
        ],
    );
    run("softmax", Box::new(|t, v| t.softmax(v[0])), vec![a()]);
    run("log_softmax", Box::new(|t, v| t.log_softmax(v[0])), vec![a()]);
    run("logsumexp", Box::new(|t, v| t.logsumexp(v[0])), vec![a()]);
    run("sum", Box::new(|t, v| t.sum(v[0])), vec![a()]);
    run("mean", Box::new(|t, v| t.mean(v[0])), vec![a()]);
    run("sum_last", Box::new(|t, v| t.sum_last(v[0])), vec![a()]);
    run("reshape", Box::new(|t, v| t.reshape(v[0], &[2, 6])), vec![a()]);
    run(
        "concat",
        Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        vec![a(), random(&[3, 2], 16, -1.0, 1.0)],
    );
    run("slice", Box::new(|t, v| t.slice(v[0], 1, 1, 3)), vec![a()]);
    out
}

/// Relative error of analytic vs central-difference derivatives at a few
/// coordinates of every tensor in `params`.
fn check_coordinates(
    tensors: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    per_tensor: usize,
    seed: u64,
    loss_at: &mut dyn FnMut(usize, usize, f64) -> f64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (k, t) in tensors.iter().enumerate() {
        for _ in 0..per_tensor.min(t.len()) {
            let i = rng.random_range(0..t.len());
            let x0 = t.data()[i];
            let mut f = |x: &[f64]| loss_at(k, i, x[0]);
            let numeric = central_difference(&mut f, &[x0], H);
            worst = worst.max(max_relative_error(&[analytic[k].data()[i]], &numeric, FLOOR));
        }
    }
    worst
}

/// Full VAE objective on a 2-image batch, both divergence modes.
pub fn vae(config: &VaeConfig) -> f64 {
    let params = VaeParams::<f64>::init(config.latent_dim, 5).unwrap();
    let images = random(&[2, 3, 64, 64], 17, 0.0, 1.0);
    let rng = || ChaCha8Rng::seed_from_u64(99);
    let (_, grads) = vae_loss_grad(&params, &images, config, &mut rng()).unwrap();
    let tensors = params.params().tensors().to_vec();
    let mut probe = params.clone();
    let mut loss_at = |k: usize, i: usize, v: f64| {
        let orig = probe.params().get(k).data()[i];
        probe.params_mut().get_mut(k).data_mut()[i] = v;
        let l = vae_loss(&probe, &images, config, &mut rng()).unwrap().total;
        probe.params_mut().get_mut(k).data_mut()[i] = orig;
        l
    };
    check_coordinates(&tensors, &grads, 3, 23, &mut loss_at)
}

/// Encoder LSTM unrolled for three steps: parameters and inputs.
pub fn lstm_unroll() -> f64 {
    let params = FpParams::<f64>::init(3, 4, 2, 7).unwrap();
    let inputs: Vec<Tensor<f64>> = (0..3).map(|t| random(&[2, 3], 30 + t, -1.5, 1.5)).collect();
    let probe = random(&[2, 4], 40, -1.0, 1.0);
    let (_, pg, xg) = lstm_unroll_grad(&params, &inputs, &probe).unwrap();
    let value = |p: &FpParams<f64>, xs: &[Tensor<f64>]| lstm_unroll_grad(p, xs, &probe).unwrap().0;

    let mut worst: f64 = 0.0;
    for (slot, g) in pg.iter().enumerate() {
        let mut f = |x: &[f64]| {
            let mut p = params.clone();
            *p.params_mut().get_mut(slot) = Tensor::new(g.shape().to_vec(), x.to_vec()).unwrap();
            value(&p, &inputs)
        };
        let numeric = central_difference(&mut f, params.params().get(slot).data(), H);
        worst = worst.max(max_relative_error(&g.to_f64_vec(), &numeric, FLOOR));
    }
    for (t, g) in xg.iter().enumerate() {
        let mut f = |x: &[f64]| {
            let mut xs = inputs.clone();
            xs[t] = Tensor::new(g.shape().to_vec(), x.to_vec()).unwrap();
            value(&params, &xs)
        };
        let numeric = central_difference(&mut f, inputs[t].data(), H);
        worst = worst.max(max_relative_error(&g.to_f64_vec(), &numeric, FLOOR));
    }
    worst
}

/// Mixture-density NLL with respect to the raw head outputs.
pub fn mdn_nll() -> f64 {
    let (b, f, d, m) = (2, 2, 3, 3);
    let head = random(&[b, f, m * (1 + 2 * d)], 50, -1.5, 1.5);
    let targets = random(&[b, f, d], 51, -1.0, 1.0);
    let (_, g) = mdn_nll_grad(&head, &targets, m).unwrap();
    let mut loss = |x: &[f64]| {
        let h = Tensor::new(head.shape().to_vec(), x.to_vec()).unwrap();
        mdn_nll_grad(&h, &targets, m).unwrap().0
    };
    let numeric = central_difference(&mut loss, head.data(), H);
    max_relative_error(&g.to_f64_vec(), &numeric, FLOOR)
}

/// Encoder, decoder and head together on a 2-window batch.
pub fn future_model() -> f64 {
    let params = FpParams::<f64>::init(2, 3, 2, 9).unwrap();
    let past = random(&[2, 5, 2], 60, -1.0, 1.0);
    let future = random(&[2, 5, 2], 61, -1.0, 1.0);
    let (_, grads) = fp_loss_grad(&params, &past, &future).unwrap();
    let mut worst: f64 = 0.0;
    for (slot, g) in grads.iter().enumerate() {
        let mut f = |x: &[f64]| {
            let mut p = params.clone();
            *p.params_mut().get_mut(slot) = Tensor::new(g.shape().to_vec(), x.to_vec()).unwrap();
            fp_loss(&p, &past, &future).unwrap()
        };
        let numeric = central_difference(&mut f, params.params().get(slot).data(), H);
        worst = worst.max(max_relative_error(&g.to_f64_vec(), &numeric, FLOOR));
    }
    worst
}
