//! Single-state (off/on) ablation: the same pipeline with M = 2.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};
use crate::states::{StateModel, StateSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    SingleState,
    #[default]
    MultiState,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub mode: AblationMode,
    /// Watts; required in single-state mode.
    pub threshold: Option<f64>,
}

impl AblationSpec {
    pub fn single_state(threshold: f64) -> Self {
        Self {
            mode: AblationMode::SingleState,
            threshold: Some(threshold),
        }
    }

    /// Collapses the states in single-state mode, passes them through otherwise.
    pub fn apply(&self, model: &StateModel, seq: &StateSequence) -> Result<(StateModel, StateSequence)> {
        match self.mode {
            AblationMode::MultiState => Ok((model.clone(), seq.clone())),
            AblationMode::SingleState => {
                let t = self.threshold.ok_or_else(|| {
                    Error::InvalidArgument("single-state ablation needs a threshold in watts".into())
                })?;
                collapse_states(model, seq, t)
            }
        }
    }
}

/// Maps states with center below `threshold` to 0 (off) and the rest to 1
/// (on). The on-center is the mean of the merged centers weighted by how
/// often each occurs in `seq`; the off-center likewise.
pub fn collapse_states(model: &StateModel, seq: &StateSequence, threshold: f64) -> Result<(StateModel, StateSequence)> {
    let lo = model.centers.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = model.centers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(threshold > 0.0 && threshold > lo && threshold <= hi) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} W must be positive and lie in ({lo}, {hi}]"
        )));
    }
    if seq.num_states() != model.num_states() {
        return Err(Error::InvalidArgument(format!(
            "sequence has {} states, model has {}",
            seq.num_states(),
            model.num_states()
        )));
    }
    let is_on: Vec<bool> = model.centers.iter().map(|&c| c >= threshold).collect();
    let mut counts = vec![0usize; model.num_states()];
    for &l in seq.labels() {
        counts[l] += 1;
    }
    let merged = |on: bool| -> f64 {
        let members: Vec<usize> = (0..model.num_states()).filter(|&s| is_on[s] == on).collect();
        let n: usize = members.iter().map(|&s| counts[s]).sum();
        if n == 0 {
            members.iter().map(|&s| model.centers[s]).sum::<f64>() / members.len() as f64
        } else {
            members.iter().map(|&s| model.centers[s] * counts[s] as f64).sum::<f64>() / n as f64
        }
    };
    let collapsed = StateModel {
        appliance_id: model.appliance_id.clone(),
        centers: vec![merged(false), merged(true)],
        bandwidth: model.bandwidth,
    };
    let labels = seq.labels().iter().map(|&l| usize::from(is_on[l])).collect();
    Ok((collapsed, StateSequence::new(labels, 2)?))
}

/// One-sided paired sign test that `a` tends to be smaller than `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignTest {
    /// Pairs with `a < b`.
    pub wins: usize,
    /// Pairs with `a > b`.
    pub losses: usize,
    /// `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`; ties dropped.
    pub p_value: f64,
}

pub fn sign_test(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            what: "sign test pairs",
            expected: a.len(),
            found: b.len(),
        });
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let n = wins + losses;
    let p_value = if wins == 0 {
        1.0
    } else {
        let d = Binomial::new(0.5, n as u64).expect("valid binomial");
        1.0 - d.cdf(wins as u64 - 1)
    };
    Ok(SignTest { wins, losses, p_value })
}
