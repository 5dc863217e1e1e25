//! Verification scores for downscaled wind ensembles.
//!
//! Point scores (MAE, RMSE, CRPS) work on flat slices, structural diagnostics
//! (spectra, speed PDFs, joint densities, FSS) on `[N, 2, H, W]` field stacks.
//! [`MetricsReport`] collects per-timestep scores and supports the win-count
//! and backend-delta comparisons.

use crate::data::windspeed;
use crate::tensor::Tensor;
use crate::{Error, Result};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// Default FSS neighbourhood widths in grid points.
pub const DEFAULT_NEIGHBORHOODS: [usize; 4] = [1, 3, 5, 9];

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::contract("empty field"));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred, truth)?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Root mean squared error.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred, truth)?;
    let ss: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

/// Field-mean CRPS of an ensemble using the standard (uncorrected) estimator
/// `(1/M)Σ|x_m − o| − (1/2M²)ΣΣ|x_m − x_m'|`.
///
/// The pairwise term is evaluated from sorted members in `O(M log M)` per cell.
pub fn crps_ensemble(members: &[&[f64]], truth: &[f64]) -> Result<f64> {
    let m = members.len();
    if m == 0 {
        return Err(Error::contract("CRPS needs at least one member"));
    }
    for x in members {
        same_len(x, truth)?;
    }
    let mf = m as f64;
    let mut sorted = vec![0.0; m];
    let mut total = 0.0;
    for (i, &o) in truth.iter().enumerate() {
        let mut skill = 0.0;
        for (s, x) in sorted.iter_mut().zip(members) {
            *s = x[i];
            skill += (x[i] - o).abs();
        }
        sorted.sort_by(f64::total_cmp);
        // Σ_{i<j} (x_(j) − x_(i)) = Σ_i x_(i) (2i − M + 1)
        let spread: f64 = sorted
            .iter()
            .enumerate()
            .map(|(k, x)| x * (2.0 * k as f64 - mf + 1.0))
            .sum();
        total += skill / mf - spread / (mf * mf);
    }
    Ok(total / truth.len() as f64)
}

/// Exceedance fractions over an `n × n` window, zero-padded at the borders.
fn fractions(field: &[f64], h: usize, w: usize, threshold: f64, n: usize) -> Vec<f64> {
    let bin: Vec<f64> = field
        .iter()
        .map(|&v| f64::from(u8::from(v >= threshold)))
        .collect();
    let r = (n / 2) as isize;
    let area = (n * n) as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut c = 0.0;
            for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    c += bin[yy as usize * w + xx as usize];
                }
            }
            out[y as usize * w + x as usize] = c / area;
        }
    }
    out
}

/// Fractions skill score of two `h × w` scalar fields.
///
/// Cells with value `>= threshold` count as exceedances. Fractions use an
/// `n × n` mean filter with zero padding outside the grid. When neither field
/// has an exceedance the score is defined as 1.
pub fn fss(
    pred: &[f64],
    truth: &[f64],
    h: usize,
    w: usize,
    threshold: f64,
    n: usize,
) -> Result<f64> {
    same_len(pred, truth)?;
    if pred.len() != h * w {
        return Err(Error::contract(format!(
            "{} values for a {h}×{w} grid",
            pred.len()
        )));
    }
    if n.is_multiple_of(2) || n > h.min(w) {
        return Err(Error::config(format!(
            "neighbourhood {n} must be odd and at most {}",
            h.min(w)
        )));
    }
    let pf = fractions(pred, h, w, threshold, n);
    let of = fractions(truth, h, w, threshold, n);
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, o) in pf.iter().zip(&of) {
        num += (p - o) * (p - o);
        den += p * p + o * o;
    }
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - num / den)
}

/// Mean FSS over a stack of forecast/truth speed fields sharing one threshold.
pub fn fss_mean(
    preds: &[Vec<f64>],
    truths: &[Vec<f64>],
    h: usize,
    w: usize,
    threshold: f64,
    n: usize,
) -> Result<f64> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::contract(format!(
            "FSS needs matching non-empty stacks, got {} and {}",
            preds.len(),
            truths.len()
        )));
    }
    let mut acc = 0.0;
    for (p, t) in preds.iter().zip(truths) {
        acc += fss(p, t, h, w, threshold, n)?;
    }
    Ok(acc / preds.len() as f64)
}

/// Axis along which 1-D spectra are taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Along rows (x).
    Zonal,
    /// Along columns (y).
    Meridional,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::Zonal, Direction::Meridional];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Zonal => "zonal",
            Direction::Meridional => "meridional",
        }
    }
}

/// Mean 1-D kinetic-energy power per wavenumber `k = 1 ..= N/2 − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumCurve {
    pub direction: Direction,
    pub wavenumbers: Vec<usize>,
    pub power: Vec<f64>,
}

fn field_dims(fields: &Tensor) -> Result<(usize, usize, usize)> {
    match *fields.shape() {
        [2, h, w] => Ok((1, h, w)),
        [n, 2, h, w] => Ok((n, h, w)),
        ref s => Err(Error::config(format!(
            "expected [N, 2, H, W] wind fields, got {s:?}"
        ))),
    }
}

/// Directional kinetic-energy spectrum of `[N, 2, H, W]` (or `[2, H, W]`) fields.
///
/// Each row (zonal) or column (meridional) of `u` and `v` is transformed with an
/// unwindowed DFT; the power `0.5(|û_k|² + |v̂_k|²)/L²` is averaged over lines and
/// samples.
pub fn directional_spectrum(fields: &Tensor, direction: Direction) -> Result<SpectrumCurve> {
    let (n, h, w) = field_dims(fields)?;
    if !h.is_power_of_two() || !w.is_power_of_two() || h < 4 || w < 4 {
        return Err(Error::config(format!(
            "spectrum needs power-of-two sides ≥ 4, got {h}×{w}"
        )));
    }
    let (len, lines) = match direction {
        Direction::Zonal => (w, h),
        Direction::Meridional => (h, w),
    };
    let fft = FftPlanner::<f64>::new().plan_fft_forward(len);
    let kmax = len / 2 - 1;
    let mut power = vec![0.0; kmax];
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    let plane = h * w;
    for s in 0..n {
        for c in 0..2 {
            let base = (s * 2 + c) * plane;
            let f = &fields.data()[base..base + plane];
            for line in 0..lines {
                for (i, b) in buf.iter_mut().enumerate() {
                    let v = match direction {
                        Direction::Zonal => f[line * w + i],
                        Direction::Meridional => f[i * w + line],
                    };
                    *b = Complex::new(v, 0.0);
                }
                fft.process(&mut buf);
                for (k, p) in power.iter_mut().enumerate() {
                    *p += buf[k + 1].norm_sqr();
                }
            }
        }
    }
    let norm = 0.5 / ((len * len) as f64 * (lines * n) as f64);
    power.iter_mut().for_each(|p| *p *= norm);
    Ok(SpectrumCurve {
        direction,
        wavenumbers: (1..=kmax).collect(),
        power,
    })
}

/// Probability mass per bin over `[lo, hi]`; values outside the range land in
/// the edge bins.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut counts = vec![0u64; bins];
    for &v in values {
        counts[bin_index(v, bins, lo, hi)] += 1;
    }
    let n = values.len() as f64;
    counts.iter().map(|&c| c as f64 / n).collect()
}

fn bin_index(v: f64, bins: usize, lo: f64, hi: f64) -> usize {
    let t = (v - lo) / (hi - lo) * bins as f64;
    if t.is_nan() || t < 0.0 {
        0
    } else {
        (t as usize).min(bins - 1)
    }
}

/// Log-density histogram of wind speed.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedPdf {
    /// `bins + 1` edges from 0 to the range maximum.
    pub edges: Vec<f64>,
    /// `log10` density per bin; empty bins hold `f64::NEG_INFINITY`.
    pub log10_density: Vec<f64>,
}

impl SpeedPdf {
    pub fn bin_width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect()
    }

    /// Linear density, zero for empty bins.
    pub fn density(&self) -> Vec<f64> {
        self.log10_density.iter().map(|d| 10f64.powf(*d)).collect()
    }
}

/// Wind-speed log-PDF of `[N, 2, H, W]` fields over `[0, max speed]`.
pub fn windspeed_log_pdf(fields: &Tensor, bins: usize) -> Result<SpeedPdf> {
    let speeds = windspeed(fields)?;
    let max = speeds.iter().copied().fold(0.0, f64::max);
    speed_log_pdf(&speeds, bins, max)
}

/// Wind-speed log-PDF over `[0, max]`, for comparing several sources on one grid.
pub fn speed_log_pdf(speeds: &[f64], bins: usize, max: f64) -> Result<SpeedPdf> {
    if bins < 2 {
        return Err(Error::config(format!("need at least two bins, got {bins}")));
    }
    if speeds.is_empty() {
        return Err(Error::contract("no speeds to histogram"));
    }
    let hi = if max > 0.0 { max } else { 1.0 };
    let width = hi / bins as f64;
    let mass = histogram(speeds, bins, 0.0, hi);
    Ok(SpeedPdf {
        edges: (0..=bins).map(|i| i as f64 * width).collect(),
        log10_density: mass
            .iter()
            .map(|&m| {
                if m > 0.0 {
                    (m / width).log10()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect(),
    })
}

/// 2-D histogram of `(u, v)` over `[−range, range]²`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointHistogram {
    pub bins: usize,
    pub range: f64,
    /// Row-major `[u bin][v bin]` sample counts.
    pub counts: Vec<u64>,
    pub total: u64,
}

impl JointHistogram {
    pub fn bin_width(&self) -> f64 {
        2.0 * self.range / self.bins as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = self.bin_width();
        (0..self.bins)
            .map(|i| -self.range + (i as f64 + 0.5) * w)
            .collect()
    }

    /// Probability mass per bin.
    pub fn mass(&self) -> Vec<f64> {
        let n = self.total as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Density per bin, `mass / area`.
    pub fn density(&self) -> Vec<f64> {
        let a = self.bin_width() * self.bin_width();
        self.mass().iter().map(|m| m / a).collect()
    }

    pub fn marginal_u(&self) -> Vec<f64> {
        let n = self.total as f64;
        self.counts
            .chunks(self.bins)
            .map(|r| r.iter().sum::<u64>() as f64 / n)
            .collect()
    }

    pub fn marginal_v(&self) -> Vec<f64> {
        let mut cols = vec![0u64; self.bins];
        for row in self.counts.chunks(self.bins) {
            for (o, c) in cols.iter_mut().zip(row) {
                *o += c;
            }
        }
        let n = self.total as f64;
        cols.iter().map(|&c| c as f64 / n).collect()
    }

    /// Plug-in mutual information of the binned pair, in nats.
    pub fn mutual_information(&self) -> f64 {
        let pu = self.marginal_u();
        let pv = self.marginal_v();
        let mass = self.mass();
        let mut mi = 0.0;
        for (i, row) in mass.chunks(self.bins).enumerate() {
            for (j, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    mi += p * (p / (pu[i] * pv[j])).ln();
                }
            }
        }
        mi
    }
}

/// Joint `(u, v)` histogram of `[N, 2, H, W]` fields.
pub fn joint_histogram(fields: &Tensor, bins: usize, range: f64) -> Result<JointHistogram> {
    let (n, h, w) = field_dims(fields)?;
    let plane = h * w;
    let mut u = Vec::with_capacity(n * plane);
    let mut v = Vec::with_capacity(n * plane);
    for pair in fields.data().chunks(2 * plane) {
        u.extend_from_slice(&pair[..plane]);
        v.extend_from_slice(&pair[plane..]);
    }
    joint_histogram_of(&u, &v, bins, range)
}

/// Joint histogram of paired samples; out-of-range values land in edge bins.
pub fn joint_histogram_of(u: &[f64], v: &[f64], bins: usize, range: f64) -> Result<JointHistogram> {
    if bins < 2 {
        return Err(Error::config(format!("need at least two bins, got {bins}")));
    }
    if range.is_nan() || range <= 0.0 {
        return Err(Error::config(format!(
            "range must be positive, got {range}"
        )));
    }
    same_len(u, v)?;
    let mut counts = vec![0u64; bins * bins];
    for (a, b) in u.iter().zip(v) {
        counts[bin_index(*a, bins, -range, range) * bins + bin_index(*b, bins, -range, range)] += 1;
    }
    Ok(JointHistogram {
        bins,
        range,
        counts,
        total: u.len() as u64,
    })
}

/// Wind component being scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variable {
    #[serde(rename = "u10m")]
    U10m,
    #[serde(rename = "v10m")]
    V10m,
}

impl Variable {
    pub const ALL: [Variable; 2] = [Variable::U10m, Variable::V10m];

    pub fn name(self) -> &'static str {
        match self {
            Variable::U10m => "u10m",
            Variable::V10m => "v10m",
        }
    }

    pub fn channel(self) -> usize {
        match self {
            Variable::U10m => 0,
            Variable::V10m => 1,
        }
    }
}

impl FromStr for Variable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u10m" => Ok(Variable::U10m),
            "v10m" => Ok(Variable::V10m),
            _ => Err(Error::config(format!("unknown variable {s:?}"))),
        }
    }
}

/// Per-timestep score compared in win counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "mae")]
    Mae,
    #[serde(rename = "crps")]
    Crps,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::Mae, Metric::Crps];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mae => "mae",
            Metric::Crps => "crps",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(Metric::Mae),
            "crps" => Ok(Metric::Crps),
            _ => Err(Error::config(format!("unknown metric {s:?}"))),
        }
    }
}

/// Scores of one variable at one timestep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepScore {
    pub time_id: usize,
    pub variable: Variable,
    /// MAE of the ensemble mean.
    pub mae: f64,
    /// CRPS of the full ensemble.
    pub crps: f64,
}

impl TimestepScore {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Mae => self.mae,
            Metric::Crps => self.crps,
        }
    }
}

/// Scores an `[M, 2, H, W]` ensemble against a `[2, H, W]` truth.
pub fn score_ensemble(
    time_id: usize,
    members: &Tensor,
    truth: &Tensor,
) -> Result<[TimestepScore; 2]> {
    let (m, h, w) = field_dims(members)?;
    if truth.shape() != [2, h, w] {
        return Err(Error::contract(format!(
            "truth shape {:?} does not match members {:?}",
            truth.shape(),
            members.shape()
        )));
    }
    let plane = h * w;
    let score = |var: Variable| -> Result<TimestepScore> {
        let c = var.channel();
        let o = &truth.data()[c * plane..(c + 1) * plane];
        let xs: Vec<&[f64]> = (0..m)
            .map(|k| &members.data()[(k * 2 + c) * plane..(k * 2 + c + 1) * plane])
            .collect();
        let mut mean = vec![0.0; plane];
        for x in &xs {
            for (a, b) in mean.iter_mut().zip(*x) {
                *a += b;
            }
        }
        mean.iter_mut().for_each(|a| *a /= m as f64);
        Ok(TimestepScore {
            time_id,
            variable: var,
            mae: mae(&mean, o)?,
            crps: crps_ensemble(&xs, o)?,
        })
    };
    Ok([score(Variable::U10m)?, score(Variable::V10m)?])
}

/// Mean and (population) standard deviation of a metric across timesteps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Aggregate {
        mean,
        std: var.sqrt(),
    }
}

/// Per-timestep scores of one model on one split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Sorted by `(time_id, variable)`, one record per pair.
    pub records: Vec<TimestepScore>,
}

impl MetricsReport {
    /// Builds a report, rejecting duplicate `(time_id, variable)` records.
    pub fn new(mut records: Vec<TimestepScore>) -> Result<Self> {
        records.sort_by_key(|r| (r.time_id, r.variable));
        if let Some(w) = records
            .windows(2)
            .find(|w| (w[0].time_id, w[0].variable) == (w[1].time_id, w[1].variable))
        {
            return Err(Error::contract(format!(
                "duplicate record for time {} {}",
                w[0].time_id,
                w[0].variable.name()
            )));
        }
        Ok(Self { records })
    }

    pub fn timesteps(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.records.iter().map(|r| r.time_id).collect();
        t.dedup();
        t
    }

    /// Number of per-timestep comparisons a win count over this report makes.
    pub fn comparisons(&self) -> usize {
        self.records.len() * Metric::ALL.len()
    }

    pub fn aggregate(&self, variable: Variable, metric: Metric) -> Option<Aggregate> {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.variable == variable)
            .map(|r| r.get(metric))
            .collect();
        (!v.is_empty()).then(|| aggregate(&v))
    }

    fn check_coverage(&self, other: &Self) -> Result<()> {
        let keys = |r: &Self| {
            r.records
                .iter()
                .map(|s| (s.time_id, s.variable))
                .collect::<Vec<_>>()
        };
        if keys(self) != keys(other) {
            return Err(Error::contract(format!(
                "reports cover different timesteps/variables ({} vs {} records)",
                self.records.len(),
                other.records.len()
            )));
        }
        Ok(())
    }

    /// CSV with one row per timestep × variable × metric.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("time_id,variable,metric,value\n");
        for r in &self.records {
            for m in Metric::ALL {
                s.push_str(&format!(
                    "{},{},{},{}\n",
                    r.time_id,
                    r.variable.name(),
                    m.name(),
                    r.get(m)
                ));
            }
        }
        s
    }

    /// Parses the output of [`MetricsReport::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("time_id,variable,metric,value") {
            return Err(Error::format("metrics csv", "missing header"));
        }
        let mut map: BTreeMap<(usize, Variable), [Option<f64>; 2]> = BTreeMap::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = |why: &str| Error::format("metrics csv", format!("line {}: {why}", i + 2));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(bad("expected 4 columns"));
            }
            let t: usize = cols[0].parse().map_err(|_| bad("bad time_id"))?;
            let var: Variable = cols[1].parse().map_err(|_| bad("bad variable"))?;
            let metric: Metric = cols[2].parse().map_err(|_| bad("bad metric"))?;
            let value: f64 = cols[3].parse().map_err(|_| bad("bad value"))?;
            map.entry((t, var)).or_default()[metric as usize] = Some(value);
        }
        let mut records = Vec::with_capacity(map.len());
        for ((time_id, variable), [mae, crps]) in map {
            match (mae, crps) {
                (Some(mae), Some(crps)) => records.push(TimestepScore {
                    time_id,
                    variable,
                    mae,
                    crps,
                }),
                _ => {
                    return Err(Error::format(
                        "metrics csv",
                        format!("time {time_id} {} lacks a metric", variable.name()),
                    ))
                }
            }
        }
        Self::new(records)
    }

    /// Aggregate summary as JSON.
    pub fn summary_json(&self) -> serde_json::Value {
        let mut agg = serde_json::Map::new();
        for var in Variable::ALL {
            let mut per = serde_json::Map::new();
            for m in Metric::ALL {
                if let Some(a) = self.aggregate(var, m) {
                    per.insert(
                        m.name().into(),
                        serde_json::json!({"mean": a.mean, "std": a.std}),
                    );
                }
            }
            agg.insert(var.name().into(), per.into());
        }
        serde_json::json!({
            "timesteps": self.timesteps().len(),
            "records": self.records.len(),
            "comparisons": self.comparisons(),
            "aggregates": agg,
        })
    }
}

/// Number of per-timestep comparisons a challenger wins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinCount {
    pub wins: usize,
    pub total: usize,
}

impl WinCount {
    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.wins as f64 / self.total as f64
        }
    }
}

impl fmt::Display for WinCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{} ({:.1}%)", self.wins, self.total, self.percent())
    }
}

/// Counts comparisons where `challenger` scores strictly lower than `baseline`,
/// one per timestep × variable × metric. Ties are not wins.
pub fn win_counts(baseline: &MetricsReport, challenger: &MetricsReport) -> Result<WinCount> {
    baseline.check_coverage(challenger)?;
    let mut wins = 0;
    for (a, b) in baseline.records.iter().zip(&challenger.records) {
        for m in Metric::ALL {
            if b.get(m) < a.get(m) {
                wins += 1;
            }
        }
    }
    Ok(WinCount {
        wins,
        total: baseline.comparisons(),
    })
}

/// One signed difference `noisy − exact`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRecord {
    pub time_id: usize,
    pub variable: Variable,
    pub metric: Metric,
    pub delta: f64,
}

/// Per-timestep metric differences between two backends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendDelta {
    pub records: Vec<DeltaRecord>,
}

impl BackendDelta {
    pub fn max_abs(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.delta.abs())
            .fold(0.0, f64::max)
    }

    /// Largest `|Δ|` at each timestep, in time order.
    pub fn per_timestep_max_abs(&self) -> Vec<(usize, f64)> {
        let mut map: BTreeMap<usize, f64> = BTreeMap::new();
        for r in &self.records {
            let e = map.entry(r.time_id).or_insert(0.0);
            *e = e.max(r.delta.abs());
        }
        map.into_iter().collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("time_id,variable,metric,delta\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.time_id,
                r.variable.name(),
                r.metric.name(),
                r.delta
            ));
        }
        s
    }
}

/// Signed per-timestep differences `noisy − exact`.
pub fn backend_delta(noisy: &MetricsReport, exact: &MetricsReport) -> Result<BackendDelta> {
    noisy.check_coverage(exact)?;
    let mut records = Vec::with_capacity(noisy.comparisons());
    for (a, b) in noisy.records.iter().zip(&exact.records) {
        for metric in Metric::ALL {
            records.push(DeltaRecord {
                time_id: a.time_id,
                variable: a.variable,
                metric,
                delta: a.get(metric) - b.get(metric),
            });
        }
    }
    Ok(BackendDelta { records })
}

/// Renders a comparison table: one row per model with `mean ± std` for each
/// variable and metric, and the win count of each model against the first.
pub fn comparison_table(models: &[(&str, &MetricsReport)]) -> Result<String> {
    let Some((_, baseline)) = models.first() else {
        return Err(Error::contract("no models to tabulate"));
    };
    let mut header = vec!["Model".to_string()];
    for var in Variable::ALL {
        for m in Metric::ALL {
            header.push(format!("{} {}", var.name(), m.name().to_uppercase()));
        }
    }
    header.push("Total Wins".into());
    let mut rows = vec![header];
    for (i, (name, report)) in models.iter().enumerate() {
        let mut row = vec![name.to_string()];
        for var in Variable::ALL {
            for m in Metric::ALL {
                row.push(
                    report
                        .aggregate(var, m)
                        .map_or("-".into(), |a| a.to_string()),
                );
            }
        }
        row.push(if i == 0 {
            "-".into()
        } else {
            win_counts(baseline, report)?.to_string()
        });
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
        }
    }
    Ok(out)
}
