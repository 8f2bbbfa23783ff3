//! Disaggregation error metrics.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples per SAE_δ period: one hour at 3 s sampling.
pub const DEFAULT_PERIOD_SAMPLES: usize = 1200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Watts.
    pub mae: f64,
    /// Fraction of total true energy.
    pub sae: f64,
    /// Watts.
    pub sae_delta: f64,
    pub state_accuracy: f64,
}

fn same_len(pred: usize, truth: usize) -> Result<()> {
    if pred != truth {
        return Err(Error::LengthMismatch {
            what: "prediction vs truth",
            expected: truth,
            found: pred,
        });
    }
    if truth == 0 {
        return Err(Error::TooShort {
            what: "metrics",
            needed: 1,
            found: 0,
        });
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    Ok(pred.iter().zip(truth).map(|(p, y)| (p - y).abs()).sum::<f64>() / truth.len() as f64)
}

pub fn sae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    let r: f64 = truth.iter().sum();
    if r <= 0.0 {
        return Err(Error::DegenerateSeries(
            "total true energy is zero; SAE is undefined".into(),
        ));
    }
    let r_hat: f64 = pred.iter().sum();
    Ok((r_hat - r).abs() / r)
}

/// Mean over full periods of `|sum pred - sum truth| / period`; a trailing
/// partial period is dropped.
pub fn sae_delta(pred: &[f64], truth: &[f64], period: usize) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    if period == 0 {
        return Err(Error::InvalidArgument("SAE_delta period must be >= 1".into()));
    }
    let periods = truth.len() / period;
    if periods == 0 {
        return Err(Error::TooShort {
            what: "SAE_delta",
            needed: period,
            found: truth.len(),
        });
    }
    let total: f64 = pred
        .chunks_exact(period)
        .zip(truth.chunks_exact(period))
        .map(|(p, y)| (p.iter().sum::<f64>() - y.iter().sum::<f64>()).abs() / period as f64)
        .sum();
    Ok(total / periods as f64)
}

pub fn state_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

pub fn evaluate(
    pred_power: &[f64],
    truth_power: &[f64],
    pred_states: &[usize],
    truth_states: &[usize],
    period: usize,
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        mae: mae(pred_power, truth_power)?,
        sae: sae(pred_power, truth_power)?,
        sae_delta: sae_delta(pred_power, truth_power, period)?,
        state_accuracy: state_accuracy(pred_states, truth_states)?,
    })
}

/// Writes `appliance,mae,sae,sae_delta,state_accuracy` rows.
pub fn write_report_csv(path: &Path, rows: &[(String, MetricsReport)]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "appliance,mae,sae,sae_delta,state_accuracy").map_err(io)?;
    for (name, r) in rows {
        writeln!(
            out,
            "{name},{},{},{},{}",
            r.mae, r.sae, r.sae_delta, r.state_accuracy
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[3.0, 5.0], &[0.0, 0.0]).unwrap(), 4.0);
        assert_eq!(mae(&[12.0, 18.0, 33.0], &[10.0, 20.0, 30.0]).unwrap(), 7.0 / 3.0);
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sae_examples() {
        assert_eq!(sae(&[50.0, 50.0], &[40.0, 60.0]).unwrap(), 0.0);
        assert!((sae(&[110.0], &[100.0]).unwrap() - 0.10).abs() < 1e-15);
        assert!((sae(&[80.0], &[100.0]).unwrap() - 0.20).abs() < 1e-15);
        assert!(sae(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn sae_delta_examples() {
        assert_eq!(sae_delta(&[1.0; 4], &[1.0; 4], 2).unwrap(), 0.0);
        assert_eq!(sae_delta(&[2.0, 2.0, 1.0, 1.0], &[1.0; 4], 2).unwrap(), 0.5);
        // trailing partial period ignored
        assert_eq!(sae_delta(&[2.0, 2.0, 1.0, 1.0, 9.0], &[1.0; 5], 2).unwrap(), 0.5);
        assert!(sae_delta(&[1.0], &[1.0], 2).is_err());
        assert_eq!(DEFAULT_PERIOD_SAMPLES, 1200);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(state_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(state_accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert_eq!(state_accuracy(&[0, 1, 1], &[0, 1, 2]).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn csv_report() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let r = MetricsReport {
            mae: 0.0,
            sae: 0.0,
            sae_delta: 0.0,
            state_accuracy: 1.0,
        };
        write_report_csv(&path, &[("fridge".into(), r)]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "appliance,mae,sae,sae_delta,state_accuracy\nfridge,0,0,0,1\n"
        );
    }

    proptest! {
        #[test]
        fn constant_offset_shows_up_as_mae(truth in prop::collection::vec(0.0f64..1e4, 1..64), c in 0.0f64..100.0) {
            let pred: Vec<f64> = truth.iter().map(|y| y + c).collect();
            prop_assert!((mae(&pred, &truth).unwrap() - c).abs() < 1e-9);
        }

        #[test]
        fn sae_is_scale_free(
            pairs in prop::collection::vec((0.0f64..1e3, 1.0f64..1e3), 1..64),
            alpha in 0.01f64..100.0,
        ) {
            let (pred, truth): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let sp: Vec<f64> = pred.iter().map(|v| v * alpha).collect();
            let st: Vec<f64> = truth.iter().map(|v| v * alpha).collect();
            let a = sae(&pred, &truth).unwrap();
            prop_assert!((sae(&sp, &st).unwrap() - a).abs() < 1e-9 * (1.0 + a));
        }

        #[test]
        fn unit_period_sae_delta_is_mae(pairs in prop::collection::vec((0.0f64..1e3, 0.0f64..1e3), 1..64)) {
            let (pred, truth): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let a = sae_delta(&pred, &truth, 1).unwrap();
            prop_assert!((a - mae(&pred, &truth).unwrap()).abs() < 1e-9);
        }
    }
}
