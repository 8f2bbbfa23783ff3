//! Per-appliance training loop, prediction, and run-directory artifacts.

mod adam;

use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};

use crate::checkpoint;
use crate::crf::{self, CrfParams, EmissionMode};
use crate::error::{Error, Result};
use crate::network::{
    backward, combine, decode_states, emissions, evaluate_loss, Architecture, DualCnn, LossKind, NetworkConfig,
    Objective,
};
use crate::signal::{
    make_windows, stitch_predictions, stitch_states, NormalizationStats, PaddedInput, PowerSeries, WindowBatch,
    WindowSpec,
};
use crate::states::{extract_state_model, ExtractionConfig, StateModel, StateSequence};

/// Chronological train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split ratios must be in [0, 1] and sum to 1, got {}/{}/{}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

/// Segment lengths: each ratio times `len` rounded down, then leftover
/// samples go to the segments with the largest fractional parts (earlier
/// segment on ties).
pub fn split_lengths(len: usize, ratios: &SplitRatios) -> Result<[usize; 3]> {
    ratios.validate()?;
    let raw = [ratios.train, ratios.val, ratios.test].map(|r| r * len as f64);
    let mut out = raw.map(|x| (x + 1e-9).floor() as usize);
    let frac = raw.map(|x| x - (x + 1e-9).floor());
    let mut order: Vec<usize> = (0..3).filter(|&i| raw[i] > 0.0).collect();
    order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]));
    let mut rem = len.saturating_sub(out.iter().sum());
    for &i in order.iter().cycle() {
        if rem == 0 {
            break;
        }
        out[i] += 1;
        rem -= 1;
    }
    Ok(out)
}

/// Contiguous, order-preserving train/val/test index ranges.
pub fn split_dataset(len: usize, ratios: &SplitRatios) -> Result<[Range<usize>; 3]> {
    let [a, b, c] = split_lengths(len, ratios)?;
    if a == 0 {
        return Err(Error::TooShort {
            what: "training split",
            needed: 1,
            found: 0,
        });
    }
    Ok([0..a, a..a + b, a + b..a + b + c])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    /// w
    pub input_len: usize,
    /// q
    pub output_len: usize,
    /// Defaults to q/2.
    pub train_stride: Option<usize>,
    /// Defaults to q.
    pub inference_stride: Option<usize>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            input_len: 400,
            output_len: 64,
            train_stride: None,
            inference_stride: None,
        }
    }
}

impl WindowConfig {
    pub fn train_spec(&self) -> Result<WindowSpec> {
        let stride = self.train_stride.unwrap_or((self.output_len / 2).max(1));
        WindowSpec::new(self.input_len, self.output_len, stride)
    }

    pub fn inference_spec(&self) -> Result<WindowSpec> {
        WindowSpec::new(
            self.input_len,
            self.output_len,
            self.inference_stride.unwrap_or(self.output_len),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub window: WindowConfig,
    pub network: NetworkConfig,
    pub emission: EmissionMode,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub split: SplitRatios,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Msdc,
            window: WindowConfig::default(),
            network: NetworkConfig::default(),
            emission: EmissionMode::default(),
            batch_size: 64,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            max_epochs: 50,
            patience: 5,
            seed: 0,
            split: SplitRatios::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.network.validate()?;
        self.window.train_spec()?;
        self.window.inference_spec()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.patience > self.max_epochs {
            return Err(Error::InvalidArgument(format!(
                "patience ({}) exceeds max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// One appliance's aligned signals plus the state supervision.
#[derive(Debug, Clone)]
pub struct ApplianceData {
    pub name: String,
    pub aggregate: PowerSeries,
    pub appliance: PowerSeries,
    pub states: StateSequence,
    pub state_model: StateModel,
}

impl ApplianceData {
    pub fn new(
        name: impl Into<String>,
        aggregate: PowerSeries,
        appliance: PowerSeries,
        states: StateSequence,
        state_model: StateModel,
    ) -> Result<Self> {
        for (what, found) in [
            ("appliance vs aggregate", appliance.len()),
            ("state labels vs aggregate", states.len()),
        ] {
            if found != aggregate.len() {
                return Err(Error::LengthMismatch {
                    what,
                    expected: aggregate.len(),
                    found,
                });
            }
        }
        if states.num_states() != state_model.num_states() {
            return Err(Error::InvalidArgument(format!(
                "label sequence has {} states but the state model has {}",
                states.num_states(),
                state_model.num_states()
            )));
        }
        Ok(Self {
            name: name.into(),
            aggregate,
            appliance,
            states,
            state_model,
        })
    }

    /// Fits states on the training split only, then labels the whole series.
    pub fn extract(
        name: impl Into<String>,
        aggregate: PowerSeries,
        appliance: PowerSeries,
        extraction: &ExtractionConfig,
        split: &SplitRatios,
    ) -> Result<Self> {
        let name = name.into();
        let [train, _, _] = split_dataset(appliance.len(), split)?;
        let (model, _) = extract_state_model(&name, &appliance.values()[train], extraction)?;
        let states = model.label_series(appliance.values());
        Self::new(name, aggregate, appliance, states, model)
    }

    pub fn segment(&self, range: Range<usize>) -> (PowerSeries, PowerSeries, &[usize]) {
        (
            self.aggregate.slice(range.start, range.end),
            self.appliance.slice(range.start, range.end),
            &self.states.labels()[range],
        )
    }
}

/// Everything needed to disaggregate a new aggregate signal.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub appliance: String,
    pub net: DualCnn,
    pub crf: Option<CrfParams>,
    pub emission: EmissionMode,
    pub norm: NormalizationStats,
    pub centers: Vec<f64>,
    pub inference_stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub power: Vec<f64>,
    pub states: Vec<usize>,
}

impl TrainedModel {
    pub fn objective(&self) -> Objective<'_> {
        match &self.crf {
            Some(crf) => Objective::MsdcCrf {
                crf,
                emission: self.emission,
            },
            None => Objective::Msdc,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        self.objective().kind()
    }

    /// Windows -> forward -> combine -> stitch. States decode by per-step
    /// argmax, or by Viterbi when a CRF is attached.
    pub fn predict(&self, aggregate: &[f64]) -> Result<Prediction> {
        let spec = WindowSpec::new(self.net.arch.input_len, self.net.q(), self.inference_stride)?;
        let centers = spec.centers(aggregate.len())?;
        let padded = PaddedInput::new(aggregate, spec.input_len, &self.norm);
        let windows: Vec<(Vec<f64>, Vec<usize>)> = centers
            .par_iter()
            .map(|&c| {
                let x = padded.window(c);
                let (logits, probs) = self.net.forward_state(x)?;
                let powers = self.net.forward_power(x)?;
                let y = combine(&probs, &powers)?;
                let s = match &self.crf {
                    Some(crf) => crf::viterbi(&emissions(&logits, &probs, self.emission), crf)?.0,
                    None => decode_states(&probs),
                };
                Ok((y, s))
            })
            .collect::<Result<_>>()?;
        let (power, states): (Vec<_>, Vec<_>) = centers
            .iter()
            .zip(windows)
            .map(|(&c, (y, s))| ((c, y), (c, s)))
            .unzip();
        Ok(Prediction {
            power: stitch_predictions(&power, aggregate.len())?,
            states: stitch_states(&states, aggregate.len())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mae: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// Validation MAE and state accuracy of the returned parameters.
    pub val_mae: Option<f64>,
    pub val_state_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub report: TrainReport,
}

/// Where a run's artifacts go.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
    /// Written verbatim to `config.snapshot`.
    pub snapshot: String,
}

impl RunDir {
    fn init(&self) -> Result<()> {
        std::fs::create_dir_all(&self.path).map_err(|e| Error::io(&self.path, e))?;
        write_atomic(&self.path.join("config.snapshot"), self.snapshot.as_bytes())?;
        let log = self.path.join("train_log.csv");
        std::fs::write(&log, "epoch,train_loss,val_loss,val_mae,wall_seconds\n").map_err(|e| Error::io(&log, e))
    }

    fn log(&self, row: &EpochLog) -> Result<()> {
        let path = self.path.join("train_log.csv");
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(
            f,
            "{},{},{},{},{:.3}",
            row.epoch, row.train_loss, row.val_loss, row.val_mae, row.wall_seconds
        )
        .map_err(|e| Error::io(&path, e))
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn divergence(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Divergence { epoch },
        other => other,
    }
}

struct Validation {
    batch: WindowBatch,
    aggregate: Vec<f64>,
    truth: Vec<f64>,
    states: Vec<usize>,
}

/// Trains one appliance model. Early stopping watches validation J_power;
/// the returned parameters are those of the best validation epoch. With an
/// empty validation split the training J_power is watched instead.
pub fn train(data: &ApplianceData, cfg: &TrainConfig, run: Option<&RunDir>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let q = cfg.window.output_len;
    let [train_range, val_range, _] = split_dataset(data.aggregate.len(), &cfg.split)?;
    if train_range.len() < q {
        return Err(Error::TooShort {
            what: "training split",
            needed: q,
            found: train_range.len(),
        });
    }
    let (agg_tr, app_tr, st_tr) = data.segment(train_range);
    let norm = NormalizationStats::from_values(agg_tr.values())?;
    let train_batch = make_windows(&agg_tr, &app_tr, st_tr, &cfg.window.train_spec()?, &norm)?;

    let inference = cfg.window.inference_spec()?;
    let validation = if val_range.len() >= q {
        let (agg, app, st) = data.segment(val_range);
        Some(Validation {
            batch: make_windows(&agg, &app, st, &inference, &norm)?,
            aggregate: agg.values().to_vec(),
            truth: app.values().to_vec(),
            states: st.to_vec(),
        })
    } else {
        None
    };

    let arch = Architecture {
        input_len: cfg.window.input_len,
        output_len: q,
        num_states: data.state_model.num_states(),
        network: cfg.network.clone(),
    };
    let power_scale = app_tr.max().max(1.0);
    let mut net = DualCnn::new(arch, power_scale, cfg.seed)?;
    net.anchor_power_levels(&data.state_model.centers)?;
    let mut model = TrainedModel {
        appliance: data.name.clone(),
        net,
        crf: match cfg.loss {
            LossKind::Msdc => None,
            LossKind::MsdcCrf => Some(CrfParams::zeros(data.state_model.num_states())),
        },
        emission: cfg.emission,
        norm,
        centers: data.state_model.centers.clone(),
        inference_stride: inference.stride,
    };

    if let Some(run) = run {
        run.init()?;
    }
    let shapes: Vec<usize> = param_tensors(&model).iter().map(|t| t.len()).collect();
    let mut opt = Adam::new(cfg.adam, cfg.learning_rate, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..train_batch.len()).collect();

    let mut best = model.clone();
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
        val_mae: None,
        val_state_accuracy: None,
    };
    let mut since_best = 0;
    let started = Instant::now();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        let mut train_power = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_batch.select(chunk);
            let bw = backward(&model.net, &batch, model.objective()).map_err(divergence(epoch))?;
            let w = chunk.len() as f64;
            train_loss += bw.loss.total() * w;
            train_power += bw.loss.power * w;
            let mut params = model.net.tensors_mut();
            if let Some(c) = &mut model.crf {
                params.extend(c.tensors_mut());
            }
            opt.step(params, bw.grads.tensors());
        }
        let n = train_batch.len() as f64;
        train_loss /= n;
        train_power /= n;
        let crf_finite = model.crf.as_ref().map_or(true, |c| c.is_finite());
        if !train_loss.is_finite() || !model.net.is_finite() || !crf_finite {
            return Err(Error::Divergence { epoch });
        }

        let (val_loss, val_mae) = match &validation {
            Some(v) => {
                let loss = evaluate_loss(&model.net, &v.batch, model.objective())?.power;
                let pred = model.predict(&v.aggregate)?;
                (loss, crate::metrics::mae(&pred.power, &v.truth)?)
            }
            None => (train_power, f64::NAN),
        };
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let row = EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_mae,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "{} epoch {epoch}: train {train_loss:.4} val J_power {val_loss:.4} val MAE {val_mae:.3}",
            data.name
        );

        if val_loss < report.best_val_loss {
            report.best_val_loss = val_loss;
            report.best_epoch = Some(epoch);
            best = model.clone();
            since_best = 0;
            if let Some(run) = run {
                checkpoint::save(&run.path.join("checkpoint.best"), &best)?;
            }
        } else {
            since_best += 1;
        }
        if let Some(run) = run {
            checkpoint::save(&run.path.join("checkpoint.last"), &model)?;
            run.log(&row)?;
        }
        report.epochs.push(row);
        if cfg.patience > 0 && since_best >= cfg.patience && epoch < cfg.max_epochs {
            report.stopped_early = true;
            break;
        }
    }

    if let Some(v) = &validation {
        let pred = best.predict(&v.aggregate)?;
        report.val_mae = Some(crate::metrics::mae(&pred.power, &v.truth)?);
        report.val_state_accuracy = Some(crate::metrics::state_accuracy(&pred.states, &v.states)?);
    }
    Ok(TrainOutcome { model: best, report })
}

fn param_tensors(model: &TrainedModel) -> Vec<&[f64]> {
    let mut v = model.net.tensors();
    if let Some(c) = &model.crf {
        v.extend(c.tensors());
    }
    v
}
