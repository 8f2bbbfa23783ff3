//! Power-state pre-extraction by flat-kernel mean shift.
//!
//! An appliance's readings are clustered into a small set of power levels
//! (the state centers); every timestep is then labelled with its nearest
//! center. The labels supervise the state network during training.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tuning knobs for [`mean_shift`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanShiftConfig {
    /// A seed has converged once a step moves it less than this many watts.
    pub tolerance: f64,
    pub max_iters: usize,
    /// Upper bound on the number of seeds (every k-th sorted point).
    pub max_seeds: usize,
}

impl Default for MeanShiftConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            max_iters: 500,
            max_seeds: 10_000,
        }
    }
}

/// Settings for [`extract_state_model`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionConfig {
    /// Fixed bandwidth in watts; when absent it is derived from the data.
    pub bandwidth: Option<f64>,
    /// Derived bandwidth as a fraction of the observed max power.
    pub bandwidth_fraction: f64,
    /// Floor for the derived bandwidth (all-zero channels have max 0).
    pub min_bandwidth: f64,
    /// Clusters holding fewer than this fraction of samples are dissolved.
    pub min_fraction: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            bandwidth: None,
            bandwidth_fraction: 0.05,
            min_bandwidth: 1.0,
            min_fraction: 0.005,
        }
    }
}

impl ExtractionConfig {
    pub fn bandwidth_for(&self, values: &[f64]) -> f64 {
        self.bandwidth.unwrap_or_else(|| {
            let max = values.iter().copied().fold(0.0, f64::max);
            (max * self.bandwidth_fraction).max(self.min_bandwidth)
        })
    }
}

/// An appliance's discrete power levels, sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateModel {
    pub appliance_id: String,
    pub centers: Vec<f64>,
    pub bandwidth: f64,
}

impl StateModel {
    pub fn num_states(&self) -> usize {
        self.centers.len()
    }

    /// Index of the nearest center; ties go to the lower state.
    pub fn label(&self, value: f64) -> usize {
        nearest(&self.centers, value)
    }

    pub fn label_series(&self, values: &[f64]) -> StateSequence {
        StateSequence {
            labels: values.iter().map(|&v| self.label(v)).collect(),
            num_states: self.num_states(),
        }
    }
}

/// Per-timestep state labels, each below `num_states`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSequence {
    labels: Vec<usize>,
    num_states: usize,
}

impl StateSequence {
    pub fn new(labels: Vec<usize>, num_states: usize) -> Result<Self> {
        if let Some(&label) = labels.iter().find(|&&l| l >= num_states) {
            return Err(Error::LabelOutOfRange {
                label,
                states: num_states,
            });
        }
        Ok(Self { labels, num_states })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<usize> {
        self.labels
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn nearest(centers: &[f64], value: f64) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let d = (value - c).abs();
        if d < best_dist {
            best = k;
            best_dist = d;
        }
    }
    best
}

/// Flat-kernel neighbourhood means over sorted data, O(log n) per query.
struct SortedData {
    sorted: Vec<f64>,
    prefix: Vec<f64>,
}

impl SortedData {
    fn new(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut prefix = Vec::with_capacity(sorted.len() + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for v in &sorted {
            acc += v;
            prefix.push(acc);
        }
        Self { sorted, prefix }
    }

    fn window_mean(&self, x: f64, bandwidth: f64) -> Option<f64> {
        let lo = self.sorted.partition_point(|&v| v < x - bandwidth);
        let hi = self.sorted.partition_point(|&v| v <= x + bandwidth);
        (hi > lo).then(|| (self.prefix[hi] - self.prefix[lo]) / (hi - lo) as f64)
    }
}

/// Modes of the flat-kernel density estimate of `values`.
///
/// Every k-th sorted point seeds an ascent; converged seeds closer than
/// `bandwidth / 2` are merged into their seed-weighted mean. Returned
/// centers are sorted ascending.
pub fn mean_shift(values: &[f64], bandwidth: f64) -> Result<Vec<f64>> {
    mean_shift_with(values, bandwidth, &MeanShiftConfig::default())
}

pub fn mean_shift_with(values: &[f64], bandwidth: f64, cfg: &MeanShiftConfig) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::TooShort {
            what: "mean shift",
            needed: 1,
            found: 0,
        });
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    let data = SortedData::new(values);
    let step = data.sorted.len().div_ceil(cfg.max_seeds.max(1));

    // Identical seeds follow identical trajectories; run each once.
    let mut seeds: Vec<(f64, usize)> = Vec::new();
    for &s in data.sorted.iter().step_by(step) {
        match seeds.last_mut() {
            Some((v, n)) if *v == s => *n += 1,
            _ => seeds.push((s, 1)),
        }
    }

    let mut modes = Vec::with_capacity(seeds.len());
    for (seed, weight) in seeds {
        let mut x = seed;
        let mut converged = false;
        for _ in 0..cfg.max_iters {
            let next = data.window_mean(x, bandwidth).unwrap_or(x);
            let shift = (next - x).abs();
            x = next;
            if shift < cfg.tolerance {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence {
                iterations: cfg.max_iters,
            });
        }
        modes.push((x, weight));
    }
    modes.sort_by(|a, b| a.0.total_cmp(&b.0));

    let merge_tol = bandwidth / 2.0;
    let mut centers = Vec::new();
    let mut group_sum = 0.0;
    let mut group_weight = 0usize;
    let mut prev = f64::NEG_INFINITY;
    for (m, w) in modes {
        if group_weight > 0 && m - prev >= merge_tol {
            centers.push(group_sum / group_weight as f64);
            group_sum = 0.0;
            group_weight = 0;
        }
        group_sum += m * w as f64;
        group_weight += w;
        prev = m;
    }
    centers.push(group_sum / group_weight as f64);
    Ok(centers)
}

/// Determines an appliance's power states and labels every timestep.
pub fn extract_state_model(
    appliance_id: &str,
    values: &[f64],
    config: &ExtractionConfig,
) -> Result<(StateModel, StateSequence)> {
    let bandwidth = config.bandwidth_for(values);
    let mut centers = mean_shift(values, bandwidth)?;

    let mut counts = vec![0usize; centers.len()];
    for &v in values {
        counts[nearest(&centers, v)] += 1;
    }
    let min_count = config.min_fraction * values.len() as f64;
    let keep: Vec<bool> = counts.iter().map(|&c| c as f64 >= min_count).collect();
    if keep.iter().any(|&k| k) {
        centers = centers
            .into_iter()
            .zip(&keep)
            .filter_map(|(c, &k)| k.then_some(c))
            .collect();
    } else {
        let (largest, _) = counts
            .iter()
            .enumerate()
            .max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))
            .expect("at least one center");
        centers = vec![centers[largest]];
    }

    let model = StateModel {
        appliance_id: appliance_id.to_string(),
        centers,
        bandwidth,
    };
    let seq = model.label_series(values);
    Ok((model, seq))
}

/// Rows are one-hot distributions over `num_states`.
pub fn one_hot(states: &[usize], num_states: usize) -> Result<Vec<Vec<f64>>> {
    states
        .iter()
        .map(|&s| {
            if s >= num_states {
                return Err(Error::LabelOutOfRange {
                    label: s,
                    states: num_states,
                });
            }
            let mut row = vec![0.0; num_states];
            row[s] = 1.0;
            Ok(row)
        })
        .collect()
}

/// Writes the label sidecar: a `# centers:` header followed by one
/// `index<TAB>label` line per timestep.
pub fn write_sidecar(path: &Path, centers: &[f64], labels: &[usize]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut header = String::from("# centers: ");
    for (i, c) in centers.iter().enumerate() {
        if i > 0 {
            header.push(',');
        }
        write!(header, "{c:.4}").expect("writing to a String");
    }
    let io = |e| Error::io(path, e);
    writeln!(out, "{header}").map_err(io)?;
    for (i, l) in labels.iter().enumerate() {
        writeln!(out, "{i}\t{l}").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads a sidecar written by [`write_sidecar`]; returns (centers, labels).
pub fn read_sidecar(path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    let file = std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingSidecar(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut centers = None;
    let mut labels = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = n + 1;
        if let Some(rest) = line.strip_prefix("# centers:") {
            let parsed: std::result::Result<Vec<f64>, _> =
                rest.trim().split(',').map(|c| c.trim().parse::<f64>()).collect();
            centers = Some(parsed.map_err(|e| parse_err(lineno, format!("bad center: {e}")))?);
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (idx, label) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(lineno, "expected index<TAB>label".into()))?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|e| parse_err(lineno, format!("bad index: {e}")))?;
        if idx != labels.len() {
            return Err(parse_err(
                lineno,
                format!("index {idx} out of sequence, expected {}", labels.len()),
            ));
        }
        labels.push(
            label
                .trim()
                .parse()
                .map_err(|e| parse_err(lineno, format!("bad label: {e}")))?,
        );
    }
    let centers = centers.ok_or_else(|| parse_err(1, "missing '# centers:' header".into()))?;
    if let Some(&label) = labels.iter().find(|&&l| l >= centers.len()) {
        return Err(Error::LabelOutOfRange {
            label,
            states: centers.len(),
        });
    }
    Ok((centers, labels))
}
