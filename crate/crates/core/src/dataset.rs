//! REDD / UK-DALE low-frequency dataset reader and writer.
//!
//! Layout: `house_<n>/labels.dat` maps channel numbers to names
//! (`channel<SPACE>name` per line) and `house_<n>/channel_<k>.dat` holds
//! `unix_timestamp<SPACE>watts` readings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::PowerSeries;

const DEFAULT_ALIASES: &str = include_str!("../data/appliance_aliases.toml");

/// Raw readings of one channel file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChannelData {
    pub samples: Vec<(f64, f64)>,
    pub malformed: usize,
    pub total_lines: usize,
}

fn parse_line(line: &str) -> Option<(f64, f64)> {
    let mut it = line.split_whitespace();
    let ts: f64 = it.next()?.parse().ok()?;
    let w: f64 = it.next()?.parse().ok()?;
    if it.next().is_some() || !ts.is_finite() || !w.is_finite() {
        return None;
    }
    Some((ts, w))
}

/// Parses `timestamp watts` lines. Up to 1% malformed lines are skipped
/// with a warning; more is an error.
pub fn parse_channel_file(path: &Path) -> Result<ChannelData> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut data = ChannelData::default();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        data.total_lines += 1;
        match parse_line(&line) {
            Some(pair) => data.samples.push(pair),
            None => data.malformed += 1,
        }
    }
    if data.total_lines == 0 {
        warn!("{}: empty channel file", path.display());
        return Ok(data);
    }
    if data.malformed * 100 > data.total_lines {
        return Err(Error::MalformedLines {
            path: path.to_path_buf(),
            malformed: data.malformed,
            total: data.total_lines,
        });
    }
    if data.malformed > 0 {
        warn!(
            "{}: skipped {} malformed of {} lines",
            path.display(),
            data.malformed,
            data.total_lines
        );
    }
    if !data.samples.windows(2).all(|w| w[0].0 <= w[1].0) {
        data.samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    Ok(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResampleConfig {
    /// Seconds between output samples.
    pub target_interval: f64,
    /// Forward-fill reaches at most this many intervals past a reading.
    pub max_gap_intervals: f64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self {
            target_interval: 3.0,
            max_gap_intervals: 3.0,
        }
    }
}

/// What alignment kept and dropped.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AlignReport {
    pub grid_len: usize,
    pub segments: usize,
    pub kept: usize,
}

/// Uniform grid `start + k * interval` for `k < len`.
#[derive(Debug, Clone, Copy)]
struct Grid {
    start: f64,
    interval: f64,
    len: usize,
}

fn overlap_grid(series: &[&[(f64, f64)]], interval: f64) -> Result<Grid> {
    let mut start = f64::NEG_INFINITY;
    let mut end = f64::INFINITY;
    for s in series {
        let (first, last) = match (s.first(), s.last()) {
            (Some(f), Some(l)) => (f.0, l.0),
            _ => return Err(Error::NoOverlap),
        };
        start = start.max(first);
        end = end.min(last);
    }
    if end < start {
        return Err(Error::NoOverlap);
    }
    let len = ((end - start) / interval).floor() as usize + 1;
    Ok(Grid {
        start,
        interval,
        len,
    })
}

/// Bucket means on the grid; empty buckets forward-fill within `max_gap`
/// seconds of the last reading and are `None` beyond it.
fn resample_onto(samples: &[(f64, f64)], grid: Grid, max_gap: f64) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(grid.len);
    let mut i = 0;
    let mut last: Option<(f64, f64)> = None;
    for k in 0..grid.len {
        let lo = grid.start + k as f64 * grid.interval;
        let hi = lo + grid.interval;
        while i < samples.len() && samples[i].0 < lo {
            last = Some(samples[i]);
            i += 1;
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        while i < samples.len() && samples[i].0 < hi {
            sum += samples[i].1;
            n += 1;
            last = Some(samples[i]);
            i += 1;
        }
        let v = if n > 0 {
            Some(sum / n as f64)
        } else {
            match last {
                Some((t, v)) if lo - t <= max_gap => Some(v),
                _ => None,
            }
        };
        out.push(v);
    }
    out
}

/// Longest run of indices where every column is present.
fn longest_valid_run(columns: &[Vec<Option<f64>>], len: usize) -> (usize, usize, usize) {
    let mut best = (0, 0);
    let mut segments = 0;
    let mut run_start = None;
    for k in 0..=len {
        let ok = k < len && columns.iter().all(|c| c[k].is_some());
        match (ok, run_start) {
            (true, None) => run_start = Some(k),
            (false, Some(s)) => {
                segments += 1;
                if k - s > best.1 - best.0 {
                    best = (s, k);
                }
                run_start = None;
            }
            _ => {}
        }
    }
    (best.0, best.1, segments)
}

/// Resamples `columns` onto a shared grid over their common time range and
/// keeps the longest gap-free stretch.
fn align_many(columns: &[&[(f64, f64)]], cfg: &ResampleConfig) -> Result<(Vec<PowerSeries>, AlignReport)> {
    if !(cfg.target_interval > 0.0) {
        return Err(Error::InvalidArgument("target interval must be positive".into()));
    }
    let grid = overlap_grid(columns, cfg.target_interval)?;
    let max_gap = cfg.max_gap_intervals * cfg.target_interval;
    let resampled: Vec<Vec<Option<f64>>> = columns
        .iter()
        .map(|c| resample_onto(c, grid, max_gap))
        .collect();
    let (lo, hi, segments) = longest_valid_run(&resampled, grid.len);
    if hi == lo {
        return Err(Error::NoOverlap);
    }
    if segments > 1 {
        info!(
            "gaps split the data into {segments} segments; kept {} of {} samples",
            hi - lo,
            grid.len
        );
    }
    let start = grid.start + lo as f64 * grid.interval;
    let series = resampled
        .into_iter()
        .map(|c| {
            let values = c[lo..hi].iter().map(|v| v.expect("valid run")).collect();
            PowerSeries::new(start, grid.interval, values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        series,
        AlignReport {
            grid_len: grid.len,
            segments,
            kept: hi - lo,
        },
    ))
}

/// Puts a mains and an appliance channel on a common grid.
pub fn align_and_resample(
    mains: &[(f64, f64)],
    channel: &[(f64, f64)],
    cfg: &ResampleConfig,
) -> Result<(PowerSeries, PowerSeries, AlignReport)> {
    let (mut series, report) = align_many(&[mains, channel], cfg)?;
    let channel = series.pop().expect("two columns");
    let mains = series.pop().expect("two columns");
    Ok((mains, channel, report))
}

/// Canonical appliance names.
#[derive(Debug, Clone)]
pub struct ApplianceAliases {
    table: Vec<(String, Vec<String>)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AliasFile {
    aliases: BTreeMap<String, Vec<String>>,
}

pub fn normalize_name(name: &str) -> String {
    name.to_lowercase()
        .replace(['_', '-'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

impl Default for ApplianceAliases {
    fn default() -> Self {
        Self::parse(DEFAULT_ALIASES).expect("bundled alias table parses")
    }
}

impl ApplianceAliases {
    pub fn parse(text: &str) -> Result<Self> {
        let file: AliasFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("alias table: {e}")))?;
        Ok(Self {
            table: file
                .aliases
                .into_iter()
                .map(|(k, v)| (normalize_name(&k), v.iter().map(|a| normalize_name(a)).collect()))
                .collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn canonical(&self, name: &str) -> String {
        let n = normalize_name(name);
        self.table
            .iter()
            .find(|(k, v)| *k == n || v.contains(&n))
            .map(|(k, _)| k.clone())
            .unwrap_or(n)
    }
}

/// Options for [`load_house`].
#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub resample: ResampleConfig,
    /// Channels at least this zero are reported as nearly empty.
    pub zero_fraction_threshold: f64,
    pub aliases: ApplianceAliases,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            resample: ResampleConfig::default(),
            zero_fraction_threshold: 0.995,
            aliases: ApplianceAliases::default(),
        }
    }
}

/// One household's aligned mains and appliance channels.
#[derive(Debug, Clone, PartialEq)]
pub struct HouseBundle {
    pub house_id: String,
    pub mains: PowerSeries,
    pub channels: BTreeMap<String, PowerSeries>,
    pub report: AlignReport,
    /// Requested appliances whose readings are almost all zero.
    pub mostly_zero: Vec<String>,
}

impl HouseBundle {
    pub fn interval(&self) -> f64 {
        self.mains.interval
    }

    pub fn channel(&self, name: &str) -> Result<&PowerSeries> {
        self.channels.get(name).ok_or_else(|| Error::MissingChannel {
            appliance: name.to_string(),
            house: self.house_id.clone(),
        })
    }
}

pub fn house_dir(root: &Path, house_id: &str) -> PathBuf {
    if house_id.starts_with("house_") {
        root.join(house_id)
    } else {
        root.join(format!("house_{house_id}"))
    }
}

fn read_labels(dir: &Path) -> Result<Vec<(usize, String)>> {
    let path = dir.join("labels.dat");
    let text = std::fs::read_to_string(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingLabels(path.clone())
        } else {
            Error::io(&path, e)
        }
    })?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (ch, name) = line.split_once(char::is_whitespace).ok_or_else(|| Error::Parse {
            path: path.clone(),
            line: n + 1,
            message: "expected 'channel name'".into(),
        })?;
        let ch = ch.parse().map_err(|e| Error::Parse {
            path: path.clone(),
            line: n + 1,
            message: format!("bad channel number: {e}"),
        })?;
        out.push((ch, name.trim().to_string()));
    }
    Ok(out)
}

/// Channels matching a requested appliance: exact canonical matches, or
/// failing those, labels whose canonical name contains the request.
fn matching_channels(labels: &[(usize, String)], request: &str, aliases: &ApplianceAliases) -> Vec<usize> {
    let want = aliases.canonical(request);
    let canon: Vec<(usize, String)> = labels
        .iter()
        .map(|(c, n)| (*c, aliases.canonical(n)))
        .collect();
    let exact: Vec<usize> = canon.iter().filter(|(_, n)| *n == want).map(|(c, _)| *c).collect();
    if !exact.is_empty() {
        return exact;
    }
    canon
        .iter()
        .filter(|(_, n)| n.contains(&want))
        .map(|(c, _)| *c)
        .collect()
}

/// Loads the mains (summed over all mains channels) and the requested
/// appliances (summed over matching channels) on one aligned grid.
pub fn load_house(root: &Path, house_id: &str, appliances: &[String], opts: &LoadOptions) -> Result<HouseBundle> {
    let dir = house_dir(root, house_id);
    let labels = read_labels(&dir)?;
    let house = dir
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| house_id.to_string());

    let mains_channels = matching_channels(&labels, "mains", &opts.aliases);
    if mains_channels.is_empty() {
        return Err(Error::MissingChannel {
            appliance: "mains".into(),
            house,
        });
    }
    let mut groups: Vec<Vec<usize>> = vec![mains_channels];
    for a in appliances {
        let chans = matching_channels(&labels, a, &opts.aliases);
        if chans.is_empty() {
            return Err(Error::MissingChannel {
                appliance: a.clone(),
                house,
            });
        }
        groups.push(chans);
    }

    let mut raw: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for &ch in groups.iter().flatten() {
        if !raw.contains_key(&ch) {
            let data = parse_channel_file(&dir.join(format!("channel_{ch}.dat")))?;
            raw.insert(ch, data.samples);
        }
    }
    let order: Vec<usize> = raw.keys().copied().collect();
    let columns: Vec<&[(f64, f64)]> = order.iter().map(|c| raw[c].as_slice()).collect();
    let (aligned, report) = align_many(&columns, &opts.resample)?;
    let by_channel: BTreeMap<usize, &PowerSeries> = order.iter().copied().zip(aligned.iter()).collect();

    let sum_group = |chans: &[usize]| -> Result<PowerSeries> {
        let first = by_channel[&chans[0]];
        if chans.len() == 1 {
            return Ok(first.clone());
        }
        let mut values = vec![0.0; first.len()];
        for c in chans {
            for (v, x) in values.iter_mut().zip(by_channel[c].values()) {
                *v += x;
            }
        }
        first.with_values(values)
    };

    let mains = sum_group(&groups[0])?;
    let mut channels = BTreeMap::new();
    let mut mostly_zero = Vec::new();
    for (name, chans) in appliances.iter().zip(&groups[1..]) {
        let series = sum_group(chans)?;
        let zeros = series.values().iter().filter(|&&v| v <= 0.0).count();
        if zeros as f64 >= opts.zero_fraction_threshold * series.len() as f64 {
            warn!("{house}: '{name}' is almost all zero ({zeros} of {} samples)", series.len());
            mostly_zero.push(name.clone());
        }
        channels.insert(name.clone(), series);
    }
    Ok(HouseBundle {
        house_id: house,
        mains,
        channels,
        report,
        mostly_zero,
    })
}

fn format_timestamp(t: f64) -> String {
    if t.fract() == 0.0 && t.abs() < 1e15 {
        format!("{}", t as i64)
    } else {
        format!("{t}")
    }
}

fn write_channel(path: &Path, series: &PowerSeries) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let mut line = String::new();
    for (k, v) in series.values().iter().enumerate() {
        line.clear();
        writeln!(line, "{} {v}", format_timestamp(series.timestamp(k))).expect("String write");
        out.write_all(line.as_bytes()).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Writes mains as channel 1 and each appliance as channels 2.. in REDD
/// layout; returns the house directory.
pub fn export_house(
    root: &Path,
    house_id: &str,
    mains: &PowerSeries,
    appliances: &[(String, PowerSeries)],
) -> Result<PathBuf> {
    let dir = house_dir(root, house_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut labels = String::from("1 mains\n");
    write_channel(&dir.join("channel_1.dat"), mains)?;
    for (k, (name, series)) in appliances.iter().enumerate() {
        if series.len() != mains.len() {
            return Err(Error::LengthMismatch {
                what: "exported appliance vs mains",
                expected: mains.len(),
                found: series.len(),
            });
        }
        let ch = k + 2;
        writeln!(labels, "{ch} {}", name.replace(' ', "_")).expect("String write");
        write_channel(&dir.join(format!("channel_{ch}.dat")), series)?;
    }
    let path = dir.join("labels.dat");
    std::fs::write(&path, labels).map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn parses_lines_and_counts_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.dat", "1303132964 41.2\n");
        assert_eq!(parse_channel_file(&p).unwrap().samples, vec![(1303132964.0, 41.2)]);

        let empty = write(dir.path(), "e.dat", "");
        assert!(parse_channel_file(&empty).unwrap().samples.is_empty());

        let mut body: String = (0..99).map(|i| format!("{i} 1.0\n")).collect();
        body.push_str("abc 41.2\n");
        let one_pct = write(dir.path(), "ok.dat", &body);
        let d = parse_channel_file(&one_pct).unwrap();
        assert_eq!((d.samples.len(), d.malformed), (99, 1));

        body.push_str("1000 x\n");
        let two_pct = write(dir.path(), "bad.dat", &body);
        assert!(matches!(
            parse_channel_file(&two_pct),
            Err(Error::MalformedLines { malformed: 2, total: 101, .. })
        ));
    }

    #[test]
    fn identical_grids_are_untouched() {
        let a: Vec<(f64, f64)> = (0..10).map(|k| (100.0 + 3.0 * k as f64, k as f64)).collect();
        let b: Vec<(f64, f64)> = (0..10).map(|k| (100.0 + 3.0 * k as f64, 2.0 * k as f64)).collect();
        let (m, c, r) = align_and_resample(&a, &b, &ResampleConfig::default()).unwrap();
        assert_eq!(m.values(), a.iter().map(|p| p.1).collect::<Vec<_>>());
        assert_eq!(c.values(), b.iter().map(|p| p.1).collect::<Vec<_>>());
        assert_eq!(m.start_timestamp, 100.0);
        assert_eq!((r.segments, r.kept), (1, 10));
    }

    #[test]
    fn one_second_mains_are_bucket_averaged() {
        let mains: Vec<(f64, f64)> = (0..9).map(|k| (k as f64, (k * k) as f64)).collect();
        let chan: Vec<(f64, f64)> = (0..3).map(|k| (3.0 * k as f64 + 0.0, 5.0)).collect();
        let cfg = ResampleConfig::default();
        let (m, c, _) = align_and_resample(&mains, &chan, &cfg).unwrap();
        // channel spans 0..6 -> grid 0, 3, 6; bucket [6, 9) has 36, 49, 64
        assert_eq!(m.values(), &[(0.0 + 1.0 + 4.0) / 3.0, (9.0 + 16.0 + 25.0) / 3.0, (36.0 + 49.0 + 64.0) / 3.0]);
        assert_eq!(c.values(), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn long_gap_keeps_largest_segment() {
        let mut a: Vec<(f64, f64)> = (0..20).map(|k| (3.0 * k as f64, 1.0)).collect();
        // 10-minute hole, then 50 more samples
        a.extend((0..50).map(|k| (57.0 + 600.0 + 3.0 * k as f64, 2.0)));
        let (m, c, r) = align_and_resample(&a, &a, &ResampleConfig::default()).unwrap();
        assert_eq!(r.segments, 2);
        assert_eq!(m.len(), 50);
        assert!(c.values().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn short_gaps_forward_fill() {
        let a = vec![(0.0, 1.0), (3.0, 2.0), (12.0, 4.0)]; // missing 6 and 9
        let (m, _, r) = align_and_resample(&a, &a, &ResampleConfig::default()).unwrap();
        assert_eq!(m.values(), &[1.0, 2.0, 2.0, 2.0, 4.0]);
        assert_eq!(r.segments, 1);
    }

    #[test]
    fn disjoint_ranges_fail() {
        let a = vec![(0.0, 1.0), (3.0, 1.0)];
        let b = vec![(100.0, 1.0), (103.0, 1.0)];
        assert!(matches!(
            align_and_resample(&a, &b, &ResampleConfig::default()),
            Err(Error::NoOverlap)
        ));
    }

    #[test]
    fn redd_style_labels_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let h = dir.path().join("house_1");
        std::fs::create_dir_all(&h).unwrap();
        write(
            &h,
            "labels.dat",
            "1 mains\n2 mains\n5 refrigerator\n6 dishwaser\n10 washer_dryer\n20 washer_dryer\n",
        );
        let ch = |v: f64| (0..10).map(|k| format!("{} {v}\n", 1000 + 3 * k)).collect::<String>();
        for (c, v) in [(1, 100.0), (2, 50.0), (5, 120.0), (6, 0.0), (10, 200.0), (20, 300.0)] {
            write(&h, &format!("channel_{c}.dat"), &ch(v));
        }
        let req: Vec<String> = ["fridge", "washing machine", "dishwasher"].map(String::from).to_vec();
        let b = load_house(dir.path(), "1", &req, &LoadOptions::default()).unwrap();
        assert!(b.mains.values().iter().all(|&v| v == 150.0));
        assert!(b.channel("fridge").unwrap().values().iter().all(|&v| v == 120.0));
        assert!(b.channel("washing machine").unwrap().values().iter().all(|&v| v == 500.0));
        assert_eq!(b.mostly_zero, vec!["dishwasher".to_string()]);

        assert!(matches!(
            load_house(dir.path(), "1", &["kettle".to_string()], &LoadOptions::default()),
            Err(Error::MissingChannel { .. })
        ));
        assert!(matches!(
            load_house(dir.path(), "9", &[], &LoadOptions::default()),
            Err(Error::MissingLabels(_))
        ));
    }

    #[test]
    fn aliases_normalize() {
        let a = ApplianceAliases::default();
        assert_eq!(a.canonical("Washer_Dryer"), "washing machine");
        assert_eq!(a.canonical("aggregate"), "mains");
        assert_eq!(a.canonical("lighting"), "lighting");
    }
}
