//! Linear-chain CRF over per-timestep state emissions.
//!
//! Emissions are a row-major `q x M` score matrix. A label sequence scores
//! `start[l0] + sum emissions[t, l_t] + sum transition[l_t, l_t+1] + stop[l_last]`;
//! the partition function sums `exp(score)` over all `M^q` sequences and is
//! evaluated with the forward recursion in log space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How state-network outputs become CRF emission scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmissionMode {
    /// Log-softmax of the state logits.
    #[default]
    LogProb,
    /// Softmax probabilities used directly as scores.
    Prob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    pub num_states: usize,
    /// Row-major `M x M`; entry `(a, b)` scores a move from `a` to `b`.
    pub transition: Vec<f64>,
    pub start: Vec<f64>,
    pub stop: Vec<f64>,
}

impl CrfParams {
    pub fn zeros(num_states: usize) -> Self {
        Self {
            num_states,
            transition: vec![0.0; num_states * num_states],
            start: vec![0.0; num_states],
            stop: vec![0.0; num_states],
        }
    }

    pub fn trans(&self, from: usize, to: usize) -> f64 {
        self.transition[from * self.num_states + to]
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.transition, &self.start, &self.stop]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.transition, &mut self.start, &mut self.stop]
    }

    pub fn is_well_formed(&self, num_states: usize) -> bool {
        self.num_states == num_states
            && self.transition.len() == num_states * num_states
            && self.start.len() == num_states
            && self.stop.len() == num_states
            && self.is_finite()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check(&self, emissions: &[f64]) -> Result<usize> {
        let m = self.num_states;
        if m == 0 || emissions.len() % m != 0 || emissions.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "emissions of length {} are not a non-empty q x {m} matrix",
                emissions.len()
            )));
        }
        if self.transition.len() != m * m || self.start.len() != m || self.stop.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "CRF parameters do not match {m} states"
            )));
        }
        Ok(emissions.len() / m)
    }

    fn check_labels(&self, q: usize, labels: &[usize]) -> Result<()> {
        if labels.len() != q {
            return Err(Error::LengthMismatch {
                what: "CRF labels vs emissions",
                expected: q,
                found: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= self.num_states) {
            return Err(Error::LabelOutOfRange {
                label,
                states: self.num_states,
            });
        }
        Ok(())
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn sequence_score(emissions: &[f64], crf: &CrfParams, labels: &[usize]) -> Result<f64> {
    let q = crf.check(emissions)?;
    crf.check_labels(q, labels)?;
    let m = crf.num_states;
    let mut score = crf.start[labels[0]] + crf.stop[labels[q - 1]];
    for (t, &l) in labels.iter().enumerate() {
        score += emissions[t * m + l];
    }
    for pair in labels.windows(2) {
        score += crf.trans(pair[0], pair[1]);
    }
    Ok(score)
}

/// Forward log-potentials `alpha[t * M + s]`.
fn forward(emissions: &[f64], crf: &CrfParams, q: usize) -> Vec<f64> {
    let m = crf.num_states;
    let mut alpha = vec![0.0; q * m];
    for s in 0..m {
        alpha[s] = crf.start[s] + emissions[s];
    }
    for t in 1..q {
        for s in 0..m {
            let prev = &alpha[(t - 1) * m..t * m];
            let lse = log_sum_exp((0..m).map(|a| prev[a] + crf.trans(a, s)));
            alpha[t * m + s] = emissions[t * m + s] + lse;
        }
    }
    alpha
}

/// Backward log-potentials `beta[t * M + s]` (stop scores included).
fn backward(emissions: &[f64], crf: &CrfParams, q: usize) -> Vec<f64> {
    let m = crf.num_states;
    let mut beta = vec![0.0; q * m];
    beta[(q - 1) * m..].copy_from_slice(&crf.stop);
    for t in (0..q - 1).rev() {
        for a in 0..m {
            let lse = log_sum_exp(
                (0..m).map(|s| crf.trans(a, s) + emissions[(t + 1) * m + s] + beta[(t + 1) * m + s]),
            );
            beta[t * m + a] = lse;
        }
    }
    beta
}

pub fn log_partition(emissions: &[f64], crf: &CrfParams) -> Result<f64> {
    let q = crf.check(emissions)?;
    let m = crf.num_states;
    let alpha = forward(emissions, crf, q);
    let last = &alpha[(q - 1) * m..];
    Ok(log_sum_exp((0..m).map(|s| last[s] + crf.stop[s])))
}

/// Negative log-likelihood of `labels`: `log Z - score(labels)`.
pub fn loss_crf(emissions: &[f64], crf: &CrfParams, labels: &[usize]) -> Result<f64> {
    let score = sequence_score(emissions, crf, labels)?;
    Ok(log_partition(emissions, crf)? - score)
}

/// Loss together with its gradients w.r.t. the emissions and CRF params.
#[derive(Debug, Clone)]
pub struct CrfGrad {
    pub loss: f64,
    pub emissions: Vec<f64>,
    pub params: CrfParams,
}

/// [`loss_crf`] plus exact gradients from forward-backward marginals.
pub fn loss_crf_grad(emissions: &[f64], crf: &CrfParams, labels: &[usize]) -> Result<CrfGrad> {
    let q = crf.check(emissions)?;
    crf.check_labels(q, labels)?;
    let m = crf.num_states;
    let alpha = forward(emissions, crf, q);
    let beta = backward(emissions, crf, q);
    let log_z = log_sum_exp((0..m).map(|s| alpha[(q - 1) * m + s] + crf.stop[s]));
    let score = sequence_score(emissions, crf, labels)?;

    let mut d_emit = vec![0.0; q * m];
    for (i, d) in d_emit.iter_mut().enumerate() {
        *d = (alpha[i] + beta[i] - log_z).exp();
    }
    let mut grad = CrfParams::zeros(m);
    grad.start.copy_from_slice(&d_emit[..m]);
    grad.stop.copy_from_slice(&d_emit[(q - 1) * m..]);
    for t in 0..q - 1 {
        for a in 0..m {
            let base = alpha[t * m + a] - log_z;
            for b in 0..m {
                grad.transition[a * m + b] += (base
                    + crf.trans(a, b)
                    + emissions[(t + 1) * m + b]
                    + beta[(t + 1) * m + b])
                    .exp();
            }
        }
    }

    for (t, &l) in labels.iter().enumerate() {
        d_emit[t * m + l] -= 1.0;
    }
    grad.start[labels[0]] -= 1.0;
    grad.stop[labels[q - 1]] -= 1.0;
    for pair in labels.windows(2) {
        grad.transition[pair[0] * m + pair[1]] -= 1.0;
    }

    Ok(CrfGrad {
        loss: log_z - score,
        emissions: d_emit,
        params: grad,
    })
}

/// Highest-scoring label sequence and its score.
///
/// Among equally scoring sequences the lexicographically smallest wins:
/// max-scores-to-go are computed backwards, then the path is chosen
/// front to back taking the lowest index at every tie.
pub fn viterbi(emissions: &[f64], crf: &CrfParams) -> Result<(Vec<usize>, f64)> {
    let q = crf.check(emissions)?;
    let m = crf.num_states;
    let mut to_go = vec![0.0; q * m];
    to_go[(q - 1) * m..].copy_from_slice(&crf.stop);
    for t in (0..q - 1).rev() {
        for a in 0..m {
            to_go[t * m + a] = (0..m)
                .map(|s| crf.trans(a, s) + emissions[(t + 1) * m + s] + to_go[(t + 1) * m + s])
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let argmax = |f: &dyn Fn(usize) -> f64| {
        let mut best = 0;
        let mut best_v = f(0);
        for s in 1..m {
            let v = f(s);
            if v > best_v {
                best = s;
                best_v = v;
            }
        }
        (best, best_v)
    };
    let (first, best_score) = argmax(&|s| crf.start[s] + emissions[s] + to_go[s]);
    let mut path = Vec::with_capacity(q);
    path.push(first);
    for t in 1..q {
        let prev = path[t - 1];
        let (next, _) = argmax(&|s| crf.trans(prev, s) + emissions[t * m + s] + to_go[t * m + s]);
        path.push(next);
    }
    Ok((path, best_score))
}
