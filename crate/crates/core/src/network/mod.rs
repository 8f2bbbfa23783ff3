//! The dual CNN: a state network producing per-timestep state distributions
//! and a value network producing per-state power levels. The appliance
//! power is their row-wise dot product.

pub mod layers;

pub use layers::{Cnn, Conv1d, Dense, Trace};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crf::{self, CrfParams, EmissionMode};
use crate::error::{Error, Result};
use crate::signal::WindowBatch;

/// Convolution/FC layout shared by both networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub conv_channels: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub hidden: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![30, 30, 40, 50, 50, 50],
            conv_kernels: vec![10, 8, 6, 5, 5, 5],
            hidden: 1024,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.len() != self.conv_kernels.len() {
            return Err(Error::Config(format!(
                "{} conv channel widths but {} kernel widths",
                self.conv_channels.len(),
                self.conv_kernels.len()
            )));
        }
        if self.conv_channels.is_empty()
            || self.conv_channels.iter().chain(&self.conv_kernels).any(|&v| v == 0)
            || self.hidden == 0
        {
            return Err(Error::Config(
                "network needs at least one conv layer and non-zero widths".into(),
            ));
        }
        Ok(())
    }
}

/// Dimensions of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_len: usize,
    pub output_len: usize,
    pub num_states: usize,
    pub network: NetworkConfig,
}

/// Parameters of both networks plus the value-head output scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualCnn {
    pub arch: Architecture,
    pub state_net: Cnn,
    pub power_net: Cnn,
    /// Watts multiplying the softplus of the value head.
    pub power_scale: f64,
}

/// `q x M` predicted state probabilities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDistributionWindow {
    pub q: usize,
    pub m: usize,
    pub probs: Vec<f64>,
}

/// `q x M` predicted per-state power in watts, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePowerWindow {
    pub q: usize,
    pub m: usize,
    pub powers: Vec<f64>,
}

impl StateDistributionWindow {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.probs[t * self.m..(t + 1) * self.m]
    }
}

impl StatePowerWindow {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.powers[t * self.m..(t + 1) * self.m]
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a `rows x m` matrix.
pub fn softmax_rows(logits: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, dst) in logits.chunks(m).zip(out.chunks_mut(m)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &l) in dst.iter_mut().zip(row) {
            *d = (l - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// Row-wise log-softmax of a `rows x m` matrix.
pub fn log_softmax_rows(logits: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, dst) in logits.chunks(m).zip(out.chunks_mut(m)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        for (d, &l) in dst.iter_mut().zip(row) {
            *d = l - lse;
        }
    }
    out
}

impl DualCnn {
    /// Glorot-uniform initialization from a fixed seed.
    pub fn new(arch: Architecture, power_scale: f64, seed: u64) -> Result<Self> {
        arch.network.validate()?;
        if arch.num_states == 0 || arch.output_len == 0 || arch.output_len >= arch.input_len {
            return Err(Error::InvalidArgument(format!(
                "invalid model dimensions: w={}, q={}, M={}",
                arch.input_len, arch.output_len, arch.num_states
            )));
        }
        if !(power_scale > 0.0 && power_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "power scale must be positive, got {power_scale}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let outputs = arch.output_len * arch.num_states;
        let net = &arch.network;
        let state_net = Cnn::new(
            arch.input_len,
            &net.conv_channels,
            &net.conv_kernels,
            net.hidden,
            outputs,
            &mut rng,
        );
        let power_net = Cnn::new(
            arch.input_len,
            &net.conv_channels,
            &net.conv_kernels,
            net.hidden,
            outputs,
            &mut rng,
        );
        Ok(Self {
            arch,
            state_net,
            power_net,
            power_scale,
        })
    }

    /// Sets the power head's output biases so that, before training, state
    /// `s` predicts roughly `centers[s]` watts at every step.
    pub fn anchor_power_levels(&mut self, centers: &[f64]) -> Result<()> {
        let m = self.num_states();
        if centers.len() != m {
            return Err(Error::LengthMismatch {
                what: "state centers",
                expected: m,
                found: centers.len(),
            });
        }
        for (i, b) in self.power_net.output.bias.iter_mut().enumerate() {
            let y = (centers[i % m] / self.power_scale).max(1e-3);
            // inverse softplus: ln(e^y - 1)
            *b = y + (-(-y).exp_m1()).ln();
        }
        Ok(())
    }

    pub fn q(&self) -> usize {
        self.arch.output_len
    }

    pub fn num_states(&self) -> usize {
        self.arch.num_states
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.state_net.tensors();
        v.extend(self.power_net.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.state_net.tensors_mut();
        v.extend(self.power_net.tensors_mut());
        v
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.arch.input_len {
            return Err(Error::ShapeMismatch(format!(
                "input window has {} samples, model expects {}",
                input.len(),
                self.arch.input_len
            )));
        }
        Ok(())
    }

    /// State logits and their row-wise softmax.
    pub fn forward_state(&self, input: &[f64]) -> Result<(Vec<f64>, StateDistributionWindow)> {
        self.check_input(input)?;
        let logits = self.state_net.forward(input);
        let probs = softmax_rows(&logits, self.num_states());
        Ok((
            logits,
            StateDistributionWindow {
                q: self.q(),
                m: self.num_states(),
                probs,
            },
        ))
    }

    /// Per-state power: `power_scale * softplus(raw)`.
    pub fn forward_power(&self, input: &[f64]) -> Result<StatePowerWindow> {
        self.check_input(input)?;
        let raw = self.power_net.forward(input);
        Ok(StatePowerWindow {
            q: self.q(),
            m: self.num_states(),
            powers: raw.iter().map(|&r| self.power_scale * softplus(r)).collect(),
        })
    }
}

/// Expected power per row: `sum_s p[t, s] * c[t, s]`.
pub fn combine(probs: &StateDistributionWindow, powers: &StatePowerWindow) -> Result<Vec<f64>> {
    if probs.q != powers.q || probs.m != powers.m || probs.probs.len() != powers.powers.len() {
        return Err(Error::ShapeMismatch(format!(
            "state window {}x{} vs power window {}x{}",
            probs.q, probs.m, powers.q, powers.m
        )));
    }
    Ok((0..probs.q)
        .map(|t| probs.row(t).iter().zip(powers.row(t)).map(|(p, c)| p * c).sum())
        .collect())
}

/// Per-row argmax; ties go to the lower state.
pub fn decode_states(probs: &StateDistributionWindow) -> Vec<usize> {
    (0..probs.q).map(|t| argmax(probs.row(t))).collect()
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean squared error between targets and the combined prediction.
pub fn loss_power(
    probs: &StateDistributionWindow,
    powers: &StatePowerWindow,
    target: &[f64],
) -> Result<f64> {
    let pred = combine(probs, powers)?;
    if target.len() != pred.len() {
        return Err(Error::LengthMismatch {
            what: "power targets",
            expected: pred.len(),
            found: target.len(),
        });
    }
    Ok(pred.iter().zip(target).map(|(p, y)| (y - p).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Mean cross-entropy of one-hot state targets against `softmax(logits)`.
pub fn loss_state_ce(logits: &[f64], num_states: usize, labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() * num_states {
        return Err(Error::ShapeMismatch(format!(
            "{} logits for {} labels x {num_states} states",
            logits.len(),
            labels.len()
        )));
    }
    let logp = log_softmax_rows(logits, num_states);
    let mut total = 0.0;
    for (t, &l) in labels.iter().enumerate() {
        if l >= num_states {
            return Err(Error::LabelOutOfRange {
                label: l,
                states: num_states,
            });
        }
        total -= logp[t * num_states + l];
    }
    Ok(total / labels.len() as f64)
}

/// MSDC objective: unweighted sum of the state and power terms.
pub fn loss_msdc(state_loss: f64, power_loss: f64) -> f64 {
    state_loss + power_loss
}

/// Which state-consistency term accompanies the power loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy against pre-extracted states.
    Msdc,
    /// Linear-chain CRF negative log-likelihood.
    MsdcCrf,
}

/// A loss kind bound to the parameters it needs.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    Msdc,
    MsdcCrf {
        crf: &'a CrfParams,
        emission: EmissionMode,
    },
}

impl Objective<'_> {
    pub fn kind(&self) -> LossKind {
        match self {
            Objective::Msdc => LossKind::Msdc,
            Objective::MsdcCrf { .. } => LossKind::MsdcCrf,
        }
    }
}

/// Batch-mean loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub power: f64,
    pub state: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.state + self.power
    }
}

/// Gradients with the same shape tree as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub state_net: Cnn,
    pub power_net: Cnn,
    pub crf: Option<CrfParams>,
}

impl Gradients {
    fn zeros(model: &DualCnn, crf: Option<&CrfParams>) -> Self {
        Self {
            state_net: model.state_net.zeros_like(),
            power_net: model.power_net.zeros_like(),
            crf: crf.map(|c| CrfParams::zeros(c.num_states)),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.state_net.tensors_mut();
        v.extend(self.power_net.tensors_mut());
        if let Some(c) = &mut self.crf {
            v.extend(c.tensors_mut());
        }
        v
    }

    /// Network tensors followed by CRF tensors, matching
    /// `DualCnn::tensors` then `CrfParams::tensors`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.state_net.tensors();
        v.extend(self.power_net.tensors());
        if let Some(c) = &self.crf {
            v.extend(c.tensors());
        }
        v
    }

    fn add(&mut self, other: &Gradients) {
        let theirs = other.tensors();
        for (mine, theirs) in self.tensors_mut().into_iter().zip(theirs) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += b;
            }
        }
    }

    fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            for v in t {
                *v *= k;
            }
        }
    }
}

/// Forward-only batch loss (no gradient bookkeeping).
pub fn evaluate_loss(model: &DualCnn, batch: &WindowBatch, objective: Objective<'_>) -> Result<LossParts> {
    let mut parts = LossParts::default();
    if batch.is_empty() {
        return Ok(parts);
    }
    for i in 0..batch.len() {
        let (logits, probs) = model.forward_state(&batch.inputs[i])?;
        let powers = model.forward_power(&batch.inputs[i])?;
        parts.power += loss_power(&probs, &powers, &batch.target_power[i])?;
        parts.state += match objective {
            Objective::Msdc => loss_state_ce(&logits, model.num_states(), &batch.target_states[i])?,
            Objective::MsdcCrf { crf, emission } => {
                let e = emissions(&logits, &probs, emission);
                crf::loss_crf(&e, crf, &batch.target_states[i])?
            }
        };
    }
    let n = batch.len() as f64;
    parts.power /= n;
    parts.state /= n;
    Ok(parts)
}

/// CRF emission scores for one window.
pub fn emissions(logits: &[f64], probs: &StateDistributionWindow, mode: EmissionMode) -> Vec<f64> {
    match mode {
        EmissionMode::LogProb => log_softmax_rows(logits, probs.m),
        EmissionMode::Prob => probs.probs.clone(),
    }
}

/// Output of [`backward`].
#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: LossParts,
    pub grads: Gradients,
}

/// Fixed-size chunks keep the reduction order independent of thread count.
const GRAD_CHUNK: usize = 8;

/// Exact gradients of the batch-mean objective w.r.t. every parameter.
pub fn backward(model: &DualCnn, batch: &WindowBatch, objective: Objective<'_>) -> Result<Backward> {
    backward_weighted(model, batch, objective, 1.0)
}

/// [`backward`] with the power term multiplied by `power_weight`.
pub(crate) fn backward_weighted(
    model: &DualCnn,
    batch: &WindowBatch,
    objective: Objective<'_>,
    power_weight: f64,
) -> Result<Backward> {
    let crf_params = match objective {
        Objective::MsdcCrf { crf, .. } => Some(crf),
        Objective::Msdc => None,
    };
    for i in 0..batch.len() {
        model.check_input(&batch.inputs[i])?;
        if batch.target_power[i].len() != model.q() || batch.target_states[i].len() != model.q() {
            return Err(Error::ShapeMismatch(format!(
                "window {i} targets do not have q = {} entries",
                model.q()
            )));
        }
    }
    let indices: Vec<usize> = (0..batch.len()).collect();
    let partials: Vec<Result<(LossParts, Gradients)>> = indices
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = Gradients::zeros(model, crf_params);
            let mut loss = LossParts::default();
            for &i in chunk {
                let l = window_backward(
                    model,
                    &batch.inputs[i],
                    &batch.target_power[i],
                    &batch.target_states[i],
                    objective,
                    power_weight,
                    &mut grads,
                )?;
                loss.power += l.power;
                loss.state += l.state;
            }
            Ok((loss, grads))
        })
        .collect();

    let mut grads = Gradients::zeros(model, crf_params);
    let mut loss = LossParts::default();
    for p in partials {
        let (l, g) = p?;
        loss.power += l.power;
        loss.state += l.state;
        grads.add(&g);
    }
    if !batch.is_empty() {
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        loss.power *= inv;
        loss.state *= inv;
    }
    if grads.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(Backward { loss, grads })
}

fn window_backward(
    model: &DualCnn,
    input: &[f64],
    target: &[f64],
    labels: &[usize],
    objective: Objective<'_>,
    power_weight: f64,
    grads: &mut Gradients,
) -> Result<LossParts> {
    let q = model.q();
    let m = model.num_states();
    let scale = model.power_scale;

    let state_trace = model.state_net.forward_trace(input);
    let power_trace = model.power_net.forward_trace(input);
    let logits = state_trace.output();
    let raw = power_trace.output();
    let probs = softmax_rows(logits, m);
    let powers: Vec<f64> = raw.iter().map(|&r| scale * softplus(r)).collect();

    let mut d_probs = vec![0.0; q * m];
    let mut d_raw = vec![0.0; q * m];
    let mut power_loss = 0.0;
    for t in 0..q {
        let row = t * m..(t + 1) * m;
        let pred: f64 = probs[row.clone()].iter().zip(&powers[row.clone()]).map(|(p, c)| p * c).sum();
        let err = target[t] - pred;
        power_loss += err * err;
        let d_pred = -2.0 * err * power_weight / q as f64;
        for k in row {
            d_probs[k] = d_pred * powers[k];
            d_raw[k] = d_pred * probs[k] * scale * sigmoid(raw[k]);
        }
    }
    power_loss /= q as f64;

    // Softmax Jacobian: dl_j = p_j (dp_j - sum_k p_k dp_k).
    let mut d_logits = vec![0.0; q * m];
    softmax_backward(&probs, &d_probs, m, &mut d_logits);

    let state_loss = match objective {
        Objective::Msdc => {
            let logp = log_softmax_rows(logits, m);
            let mut loss = 0.0;
            for (t, &l) in labels.iter().enumerate() {
                if l >= m {
                    return Err(Error::LabelOutOfRange { label: l, states: m });
                }
                loss -= logp[t * m + l];
                for s in 0..m {
                    let onehot = if s == l { 1.0 } else { 0.0 };
                    d_logits[t * m + s] += (probs[t * m + s] - onehot) / q as f64;
                }
            }
            loss / q as f64
        }
        Objective::MsdcCrf { crf, emission } => {
            let e = match emission {
                EmissionMode::LogProb => log_softmax_rows(logits, m),
                EmissionMode::Prob => probs.clone(),
            };
            let g = crf::loss_crf_grad(&e, crf, labels)?;
            match emission {
                EmissionMode::LogProb => {
                    for (t, row) in g.emissions.chunks(m).enumerate() {
                        let sum: f64 = row.iter().sum();
                        for s in 0..m {
                            d_logits[t * m + s] += row[s] - probs[t * m + s] * sum;
                        }
                    }
                }
                EmissionMode::Prob => softmax_backward(&probs, &g.emissions, m, &mut d_logits),
            }
            let acc = grads.crf.as_mut().expect("CRF gradient slot");
            for (a, b) in acc.tensors_mut().into_iter().zip(g.params.tensors()) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            g.loss
        }
    };

    model.state_net.backward(&state_trace, &d_logits, &mut grads.state_net);
    model.power_net.backward(&power_trace, &d_raw, &mut grads.power_net);
    Ok(LossParts {
        power: power_loss,
        state: state_loss,
    })
}

/// Accumulates the softmax vector-Jacobian product into `out`.
fn softmax_backward(probs: &[f64], upstream: &[f64], m: usize, out: &mut [f64]) {
    for ((p, g), o) in probs.chunks(m).zip(upstream.chunks(m)).zip(out.chunks_mut(m)) {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for s in 0..m {
            o[s] += p[s] * (g[s] - dot);
        }
    }
}
