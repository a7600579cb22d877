use std::f64::consts::PI;

use latent_scope_tensor::{ParamSet, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stage_rng;

pub const LOG_STD_CLAMP: f64 = 7.0;

const ENC_WX: usize = 0;
const ENC_WH: usize = 1;
const ENC_B: usize = 2;
const DEC_WX: usize = 3;
const DEC_WH: usize = 4;
const DEC_B: usize = 5;
const HEAD_W: usize = 6;
const HEAD_B: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LstmRole {
    Encoder,
    Decoder,
}

impl LstmRole {
    fn slots(self) -> [usize; 3] {
        match self {
            LstmRole::Encoder => [ENC_WX, ENC_WH, ENC_B],
            LstmRole::Decoder => [DEC_WX, DEC_WH, DEC_B],
        }
    }
}

/// Encoder and decoder LSTMs (gate order input, forget, cell, output) and
/// the mixture-density head.
#[derive(Clone, Debug, PartialEq)]
pub struct FpParams<T> {
    input_dim: usize,
    hidden: usize,
    components: usize,
    params: ParamSet<T>,
}

fn layout(d: usize, h: usize, m: usize) -> Vec<(&'static str, Vec<usize>)> {
    let w = m * (1 + 2 * d);
    vec![
        ("encoder.w_input", vec![d, 4 * h]),
        ("encoder.w_hidden", vec![h, 4 * h]),
        ("encoder.bias", vec![4 * h]),
        ("decoder.w_input", vec![d, 4 * h]),
        ("decoder.w_hidden", vec![h, 4 * h]),
        ("decoder.bias", vec![4 * h]),
        ("head.weight", vec![h, w]),
        ("head.bias", vec![w]),
    ]
}

impl<T: Real> FpParams<T> {
    /// Uniform `(-1/sqrt(hidden), 1/sqrt(hidden))` initialisation.
    pub fn init(input_dim: usize, hidden: usize, components: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || components == 0 {
            return Err(Error::invalid("input_dim, hidden and components must be at least 1"));
        }
        let mut rng = stage_rng(seed, "fp-init", 0);
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut params = ParamSet::new();
        for (name, shape) in layout(input_dim, hidden, components) {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                .collect();
            params.push(name, Tensor::new(shape, data)?);
        }
        Ok(FpParams {
            input_dim,
            hidden,
            components,
            params,
        })
    }

    /// Wraps loaded tensors after checking them against the architecture.
    pub fn from_params(input_dim: usize, hidden: usize, components: usize, params: ParamSet<T>) -> Result<Self> {
        let expected = layout(input_dim, hidden, components);
        if params.len() != expected.len() {
            return Err(Error::invalid(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(params.iter()) {
            if *name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::invalid(format!(
                    "tensor `{got_name}` has shape {:?}; architecture expects `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(FpParams {
            input_dim,
            hidden,
            components,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn components(&self) -> usize {
        self.components
    }

    /// Scalars emitted by the head per future step: `M (1 + 2 d)`.
    pub fn head_width(&self) -> usize {
        self.components * (1 + 2 * self.input_dim)
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> FpParams<U> {
        FpParams {
            input_dim: self.input_dim,
            hidden: self.hidden,
            components: self.components,
            params: self.params.cast(),
        }
    }

    pub(crate) fn dims(&self) -> Dims {
        Dims {
            d: self.input_dim,
            h: self.hidden,
            m: self.components,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims {
    pub d: usize,
    pub h: usize,
    pub m: usize,
}

fn lstm_on<T: Real>(tape: &mut Tape<T>, w: [Var; 3], x: Var, h: Var, c: Var, hidden: usize) -> Result<(Var, Var)> {
    let gx = tape.matmul(x, w[0])?;
    let gh = tape.matmul(h, w[1])?;
    let g = tape.add(gx, gh)?;
    let g = tape.add(g, w[2])?;
    let i = tape.slice(g, 1, 0, hidden)?;
    let i = tape.sigmoid(i)?;
    let f = tape.slice(g, 1, hidden, 2 * hidden)?;
    let f = tape.sigmoid(f)?;
    let cand = tape.slice(g, 1, 2 * hidden, 3 * hidden)?;
    let cand = tape.tanh(cand)?;
    let o = tape.slice(g, 1, 3 * hidden, 4 * hidden)?;
    let o = tape.sigmoid(o)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, cand)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

fn role_vars(p: &[Var], role: LstmRole) -> [Var; 3] {
    role.slots().map(|s| p[s])
}

fn zero_state<T: Real>(tape: &mut Tape<T>, batch: usize, hidden: usize) -> Var {
    tape.constant(Tensor::zeros([batch, hidden]))
}

/// Runs the encoder over `steps` (each `[B, d]`) from a zero state.
pub(crate) fn encode_on<T: Real>(tape: &mut Tape<T>, p: &[Var], steps: &[Var], dims: Dims) -> Result<(Var, Var)> {
    let batch = tape.shape(steps[0])[0];
    let mut h = zero_state(tape, batch, dims.h);
    let mut c = zero_state(tape, batch, dims.h);
    for &x in steps {
        (h, c) = lstm_on(tape, role_vars(p, LstmRole::Encoder), x, h, c, dims.h)?;
    }
    Ok((h, c))
}

/// Splits `[B, steps, d]` into per-step `[B, d]` vars.
pub(crate) fn unstack<T: Real>(tape: &mut Tape<T>, seq: Var) -> Result<Vec<Var>> {
    let s = tape.shape(seq).to_vec();
    if s.len() != 3 {
        return Err(Error::invalid(format!("expected [batch, steps, dim] sequences, got {s:?}")));
    }
    (0..s[1])
        .map(|t| {
            let x = tape.slice(seq, 1, t, t + 1)?;
            Ok(tape.reshape(x, &[s[0], s[2]])?)
        })
        .collect()
}

/// Per-row negative log-likelihood `[B]` of `target: [B, d]` under the head
/// output `out: [B, M (1 + 2 d)]`.
pub(crate) fn mdn_nll_on<T: Real>(tape: &mut Tape<T>, out: Var, target: Var, m: usize, d: usize) -> Result<Var> {
    let b = tape.shape(out)[0];
    let logits = tape.slice(out, 1, 0, m)?;
    let log_w = tape.log_softmax(logits)?;
    let means = tape.slice(out, 1, m, m + m * d)?;
    let means = tape.reshape(means, &[b, m, d])?;
    let ls = tape.slice(out, 1, m + m * d, m + 2 * m * d)?;
    let c = T::from_f64_lossy(LOG_STD_CLAMP);
    let ls = tape.clamp(ls, -c, c)?;
    let ls = tape.reshape(ls, &[b, m, d])?;
    let t = tape.reshape(target, &[b, 1, d])?;
    let diff = tape.sub(t, means)?;
    let neg_ls = tape.neg(ls)?;
    let inv_std = tape.exp(neg_ls)?;
    let r = tape.mul(diff, inv_std)?;
    let r2 = tape.square(r)?;
    let r2 = tape.sum_last(r2)?;
    let ls_sum = tape.sum_last(ls)?;
    let half = tape.scale(r2, T::from_f64_lossy(-0.5))?;
    let log_comp = tape.sub(half, ls_sum)?;
    let log_comp = tape.add_scalar(log_comp, T::from_f64_lossy(-0.5 * d as f64 * (2.0 * PI).ln()))?;
    let joint = tape.add(log_w, log_comp)?;
    let ll = tape.logsumexp(joint)?;
    Ok(tape.neg(ll)?)
}

/// Mean over the batch of the summed per-step NLL, decoder teacher-forced
/// with a zero first input.
pub(crate) fn loss_on<T: Real>(tape: &mut Tape<T>, p: &[Var], past: Var, future: Var, dims: Dims) -> Result<Var> {
    let past = unstack(tape, past)?;
    let future = unstack(tape, future)?;
    let batch = tape.shape(past[0])[0];
    let (mut h, mut c) = encode_on(tape, p, &past, dims)?;
    let mut total: Option<Var> = None;
    for (t, &target) in future.iter().enumerate() {
        let input = if t == 0 {
            tape.constant(Tensor::zeros([batch, dims.d]))
        } else {
            future[t - 1]
        };
        (h, c) = lstm_on(tape, role_vars(p, LstmRole::Decoder), input, h, c, dims.h)?;
        let out = tape.linear(h, p[HEAD_W], p[HEAD_B])?;
        let nll = mdn_nll_on(tape, out, target, dims.m, dims.d)?;
        total = Some(match total {
            None => nll,
            Some(acc) => tape.add(acc, nll)?,
        });
    }
    let total = total.expect("at least one future step");
    Ok(tape.mean(total)?)
}

fn check_sequences(params_d: usize, t: &Tensor<impl Real>, what: &str) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || s[2] != params_d {
        return Err(Error::invalid(format!(
            "{what} must be [batch, steps, {params_d}], got {s:?}"
        )));
    }
    Ok(())
}

/// Training loss for `past: [B, P, d]` and `future: [B, F, d]`.
pub fn fp_loss<T: Real>(params: &FpParams<T>, past: &Tensor<T>, future: &Tensor<T>) -> Result<f64> {
    check_sequences(params.input_dim, past, "past")?;
    check_sequences(params.input_dim, future, "future")?;
    let mut tape = Tape::new();
    let p = params.params.bind_constant(&mut tape);
    let (a, b) = (tape.constant(past.clone()), tape.constant(future.clone()));
    let loss = loss_on(&mut tape, &p, a, b, params.dims())?;
    Ok(tape.value(loss).item()?.to_f64_lossy())
}

/// [`fp_loss`] with the gradient for every parameter tensor.
pub fn fp_loss_grad<T: Real>(params: &FpParams<T>, past: &Tensor<T>, future: &Tensor<T>) -> Result<(f64, Vec<Tensor<T>>)> {
    check_sequences(params.input_dim, past, "past")?;
    check_sequences(params.input_dim, future, "future")?;
    let mut tape = Tape::new();
    let p = params.params.bind(&mut tape);
    let (a, b) = (tape.constant(past.clone()), tape.constant(future.clone()));
    let loss = loss_on(&mut tape, &p, a, b, params.dims())?;
    let value = tape.value(loss).item()?.to_f64_lossy();
    let mut g = tape.backward(loss)?;
    Ok((value, p.iter().map(|&v| g.take(v)).collect()))
}

fn check_state<T: Real>(params: &FpParams<T>, x: &Tensor<T>, h: &Tensor<T>, c: &Tensor<T>) -> Result<()> {
    let b = x.shape().first().copied().unwrap_or(0);
    if x.shape() != [b, params.input_dim] || h.shape() != [b, params.hidden] || c.shape() != h.shape() {
        return Err(Error::invalid(format!(
            "lstm_step expects x [B, {}] and state [B, {}], got {:?}, {:?}, {:?}",
            params.input_dim,
            params.hidden,
            x.shape(),
            h.shape(),
            c.shape()
        )));
    }
    Ok(())
}

/// One LSTM recurrence: returns `(h', c')`.
pub fn lstm_step<T: Real>(
    params: &FpParams<T>,
    role: LstmRole,
    x: &Tensor<T>,
    h: &Tensor<T>,
    c: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_state(params, x, h, c)?;
    let mut tape = Tape::new();
    let p = params.params.bind_constant(&mut tape);
    let (x, h, c) = (tape.constant(x.clone()), tape.constant(h.clone()), tape.constant(c.clone()));
    let (h, c) = lstm_on(&mut tape, role_vars(&p, role), x, h, c, params.hidden)?;
    Ok((tape.value(h).clone(), tape.value(c).clone()))
}

/// Unrolls the encoder over `inputs` (each `[B, d]`) from a zero state and
/// returns `sum(probe * (h_T + c_T))` with its gradient for the three
/// encoder tensors and for every input.
pub fn lstm_unroll_grad<T: Real>(
    params: &FpParams<T>,
    inputs: &[Tensor<T>],
    probe: &Tensor<T>,
) -> Result<(f64, Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    if inputs.is_empty() {
        return Err(Error::invalid("need at least one step"));
    }
    let mut tape = Tape::new();
    let p = params.params.bind(&mut tape);
    let xs: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let (h, c) = encode_on(&mut tape, &p, &xs, params.dims())?;
    let probe = tape.constant(probe.clone());
    let s = tape.add(h, c)?;
    let s = tape.mul(s, probe)?;
    let loss = tape.sum(s)?;
    let value = tape.value(loss).item()?.to_f64_lossy();
    let mut g = tape.backward(loss)?;
    let pg = LstmRole::Encoder.slots().iter().map(|&s| g.take(p[s])).collect();
    let xg = xs.iter().map(|&v| g.take(v)).collect();
    Ok((value, pg, xg))
}

/// Final encoder state `(h, c)` for `past: [B, P, d]`.
pub fn encode_state<T: Real>(params: &FpParams<T>, past: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    check_sequences(params.input_dim, past, "past")?;
    let mut tape = Tape::new();
    let p = params.params.bind_constant(&mut tape);
    let seq = tape.constant(past.clone());
    let steps = unstack(&mut tape, seq)?;
    let (h, c) = encode_on(&mut tape, &p, &steps, params.dims())?;
    Ok((tape.value(h).clone(), tape.value(c).clone()))
}

/// Sequence encodings `[B, hidden]`: the encoder's final hidden state.
pub fn encode_sequence<T: Real>(params: &FpParams<T>, past: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(encode_state(params, past)?.0)
}

/// Diagonal Gaussian mixture over one future encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMixture {
    pub weights: Vec<f64>,
    /// `[component][dim]`
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
}

impl StepMixture {
    fn from_head<T: Real>(row: &[T], m: usize, d: usize) -> Self {
        let row: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
        let logits = &row[..m];
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        let means = (0..m).map(|k| row[m + k * d..m + (k + 1) * d].to_vec()).collect();
        let off = m + m * d;
        let stds = (0..m)
            .map(|k| {
                row[off + k * d..off + (k + 1) * d]
                    .iter()
                    .map(|ls| ls.clamp(-LOG_STD_CLAMP, LOG_STD_CLAMP).exp())
                    .collect()
            })
            .collect();
        StepMixture {
            weights: e.iter().map(|v| v / z).collect(),
            means,
            stds,
        }
    }

    /// Mixture mean `sum_m w_m mu_m`.
    pub fn mean(&self) -> Vec<f64> {
        let d = self.means.first().map_or(0, Vec::len);
        let mut out = vec![0.0; d];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (o, m) in out.iter_mut().zip(mu) {
                *o += w * m;
            }
        }
        out
    }

    /// `log sum_m w_m prod_j N(x_j | mu_mj, sigma_mj)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.weights.len());
        for ((w, mu), sd) in self.weights.iter().zip(&self.means).zip(&self.stds) {
            if mu.len() != x.len() || sd.len() != x.len() {
                return Err(Error::invalid("mixture and target dimensions differ"));
            }
            if sd.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::invalid("mixture std must be positive"));
            }
            let mut lp = w.ln();
            for ((&xj, &m), &s) in x.iter().zip(mu).zip(sd) {
                let r = (xj - m) / s;
                lp += -0.5 * (2.0 * PI).ln() - s.ln() - 0.5 * r * r;
            }
            terms.push(lp);
        }
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Ok(max);
        }
        Ok(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
    }
}

/// Rolls the decoder for `steps` steps from encoder state `(h, c)`, each
/// `[B, hidden]`. The first input is zero; later inputs are the previous
/// step's mixture mean. Returns mixtures indexed `[batch][step]`.
pub fn decode_future<T: Real>(
    params: &FpParams<T>,
    h: &Tensor<T>,
    c: &Tensor<T>,
    steps: usize,
) -> Result<Vec<Vec<StepMixture>>> {
    let Dims { d, h: hidden, m } = params.dims();
    let batch = h.shape().first().copied().unwrap_or(0);
    let zero = Tensor::zeros([batch.max(1), d]);
    check_state(params, &zero, h, c)?;
    let mut tape = Tape::new();
    let p = params.params.bind_constant(&mut tape);
    let mut hv = tape.constant(h.clone());
    let mut cv = tape.constant(c.clone());
    let mut input = tape.constant(zero);
    let mut out = vec![Vec::with_capacity(steps); batch];
    for _ in 0..steps {
        (hv, cv) = lstm_on(&mut tape, role_vars(&p, LstmRole::Decoder), input, hv, cv, hidden)?;
        let head = tape.linear(hv, p[HEAD_W], p[HEAD_B])?;
        let head = tape.value(head).clone();
        let mut next = Vec::with_capacity(batch * d);
        for (b, seq) in out.iter_mut().enumerate() {
            let mix = StepMixture::from_head(head.row(b), m, d);
            next.extend(mix.mean().into_iter().map(T::from_f64_lossy));
            seq.push(mix);
        }
        input = tape.constant(Tensor::new(vec![batch, d], next)?);
    }
    Ok(out)
}

/// `-sum_t log sum_m w_m prod_j N(target_tj | mu_mj, sigma_mj)` for one
/// sequence.
pub fn mdn_nll(mixtures: &[StepMixture], targets: &[Vec<f64>]) -> Result<f64> {
    if mixtures.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} mixtures for {} targets",
            mixtures.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (mix, t) in mixtures.iter().zip(targets) {
        total -= mix.log_density(t)?;
    }
    Ok(total)
}

/// Batch-mean of the summed per-step NLL for raw head outputs
/// `[B, F, M (1 + 2 d)]` against `targets: [B, F, d]`, with its gradient
/// with respect to the head outputs.
pub fn mdn_nll_grad<T: Real>(
    head: &Tensor<T>,
    targets: &Tensor<T>,
    components: usize,
) -> Result<(f64, Tensor<T>)> {
    let (hs, ts) = (head.shape(), targets.shape());
    if hs.len() != 3 || ts.len() != 3 || hs[..2] != ts[..2] || hs[2] != components * (1 + 2 * ts[2]) {
        return Err(Error::invalid(format!(
            "head {hs:?} does not match targets {ts:?} with {components} components"
        )));
    }
    let d = ts[2];
    let mut tape = Tape::new();
    let hv = tape.leaf(head.clone());
    let tv = tape.constant(targets.clone());
    let outs = unstack(&mut tape, hv)?;
    let tgts = unstack(&mut tape, tv)?;
    let mut total: Option<Var> = None;
    for (&o, &t) in outs.iter().zip(&tgts) {
        let nll = mdn_nll_on(&mut tape, o, t, components, d)?;
        total = Some(match total {
            None => nll,
            Some(acc) => tape.add(acc, nll)?,
        });
    }
    let loss = tape.mean(total.expect("at least one step"))?;
    let value = tape.value(loss).item()?.to_f64_lossy();
    let mut g = tape.backward(loss)?;
    Ok((value, g.take(hv)))
}
