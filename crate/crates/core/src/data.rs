//! Synthetic 10 m wind fields, train/val/OOD splits, normalization and the
//! on-disk dataset format.
//!
//! A sample is a pair of correlated Gaussian random fields `(u, v)` built by
//! spectral synthesis, plus its 4×4 block average as the low-resolution
//! input. A dataset directory holds `meta.json`, `fields.f32` (hi-res,
//! `[sample, channel, y, x]`) and `lowres.f32` (same layout at 1/4 size),
//! both raw little-endian `f32`.

use std::fs;
use std::ops::Range;
use std::path::Path;

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix_seed, rng_for};
use crate::tensor::Tensor;

/// Low-resolution cells per side of one high-resolution block.
pub const SCALE: usize = 4;
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub height: usize,
    pub width: usize,
    /// Isotropic spectral slope: shell-summed power falls off as `k^-gamma`.
    pub gamma: f64,
    /// Per-component standard deviation, m/s.
    pub sigma: f64,
    pub mean_u: f64,
    pub mean_v: f64,
    /// Correlation between the `u` and `v` fluctuations.
    pub rho: f64,
    pub seed: u64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            gamma: 5.0 / 3.0,
            sigma: 2.0,
            mean_u: 3.0,
            mean_v: 1.0,
            rho: 0.3,
            seed: 0,
        }
    }
}

impl FieldSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, n) in [("height", self.height), ("width", self.width)] {
            if !n.is_power_of_two() || n < SCALE {
                return Err(Error::config(format!(
                    "field {name} {n} must be a power of two and at least {SCALE}"
                )));
            }
        }
        if !(self.gamma > 0.0) {
            return Err(Error::config(format!(
                "gamma {} must be positive",
                self.gamma
            )));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::config(format!(
                "sigma {} must be non-negative",
                self.sigma
            )));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::config(format!("rho {} outside [-1, 1]", self.rho)));
        }
        Ok(())
    }

    /// The default distribution shift: steeper spectrum and stronger mean wind.
    pub fn shifted(&self, gamma: f64, mean_shift: f64) -> Self {
        Self {
            gamma,
            mean_u: self.mean_u + mean_shift,
            mean_v: self.mean_v + mean_shift,
            ..*self
        }
    }
}

/// Unit-variance Gaussian random field with shell power `∝ k^-gamma`.
///
/// White noise is filtered in Fourier space by `|k|^{-(gamma+1)/2}` with the
/// mean mode removed; a real input and a radially symmetric filter keep the
/// result real. The output is scaled by the filter's theoretical variance,
/// not the sample variance, so per-sample amplitude fluctuations survive.
pub fn gaussian_random_field(h: usize, w: usize, gamma: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, &[0x6772_66]);
    let mut buf: Vec<Complex64> = (0..h * w)
        .map(|_| Complex64::new(StandardNormal.sample(&mut rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    fft2(&mut planner, &mut buf, h, w, false);
    let mut filter_energy = 0.0;
    for ky in 0..h {
        let fy = signed_freq(ky, h);
        for kx in 0..w {
            let fx = signed_freq(kx, w);
            let k = (fx * fx + fy * fy).sqrt();
            let a = if k == 0.0 {
                0.0
            } else {
                k.powf(-(gamma + 1.0) / 2.0)
            };
            filter_energy += a * a;
            buf[ky * w + kx] *= a;
        }
    }
    fft2(&mut planner, &mut buf, h, w, true);
    let n = (h * w) as f64;
    // var = Σ a² / n for the unnormalized forward / 1/n inverse pair
    let norm = (filter_energy / n).sqrt();
    buf.iter().map(|c| c.re / n / norm).collect()
}

fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// In-place 2-D FFT (unnormalized in both directions).
fn fft2(planner: &mut FftPlanner<f64>, buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let row = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    row.process(buf);
    let col = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

/// `SCALE×SCALE` block means of a `[C, H, W]` tensor.
pub fn block_average(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || !s[1].is_multiple_of(SCALE) || !s[2].is_multiple_of(SCALE) {
        return Err(Error::config(format!(
            "block average needs [C, H, W] with H, W divisible by {SCALE}, got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (lh, lw) = (h / SCALE, w / SCALE);
    let mut out = vec![0.0; c * lh * lw];
    let d = x.data();
    let inv = 1.0 / (SCALE * SCALE) as f64;
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[(ch * lh + y / SCALE) * lw + xx / SCALE] += d[(ch * h + y) * w + xx] * inv;
            }
        }
    }
    Tensor::new(&[c, lh, lw], out)
}

/// Nearest-neighbour upsampling of `[B, C, h, w]` by `SCALE`.
pub fn upsample_nearest(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::config(format!(
            "upsample needs [B, C, h, w], got {s:?}"
        )));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (hh, ww) = (h * SCALE, w * SCALE);
    let d = x.data();
    let mut out = Vec::with_capacity(b * c * hh * ww);
    for plane in 0..b * c {
        for y in 0..hh {
            for xx in 0..ww {
                out.push(d[(plane * h + y / SCALE) * w + xx / SCALE]);
            }
        }
    }
    Tensor::new(&[b, c, hh, ww], out)
}

/// One `(x_hr [2, H, W], y_lr [2, H/4, W/4])` pair.
pub fn generate_sample(spec: &FieldSpec) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let g1 = gaussian_random_field(h, w, spec.gamma, mix_seed(spec.seed, 1));
    let g2 = gaussian_random_field(h, w, spec.gamma, mix_seed(spec.seed, 2));
    let c = (1.0 - spec.rho * spec.rho).max(0.0).sqrt();
    let mut data = Vec::with_capacity(2 * h * w);
    data.extend(g1.iter().map(|a| spec.mean_u + spec.sigma * a));
    data.extend(
        g1.iter()
            .zip(&g2)
            .map(|(a, b)| spec.mean_v + spec.sigma * (spec.rho * a + c * b)),
    );
    let x = Tensor::new(&[2, h, w], data)?;
    let y = block_average(&x)?;
    Ok((x, y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Ood,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Ood];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Ood => "ood",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "ood" => Ok(Split::Ood),
            _ => Err(Error::config(format!(
                "unknown split {s:?} (train, val, ood)"
            ))),
        }
    }
}

/// Per-channel statistics of the hi-res train split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 2],
            std: [1.0; 2],
        }
    }

    /// Statistics of `[N, 2, H, W]` fields.
    pub fn fit(fields: &Tensor) -> Result<Self> {
        let s = fields.shape();
        if s.len() != 4 || s[1] != 2 || s[0] == 0 {
            return Err(Error::config(format!(
                "normalization needs [N>0, 2, H, W], got {s:?}"
            )));
        }
        let plane = s[2] * s[3];
        let mut mean = [0.0; 2];
        let mut std = [0.0; 2];
        for c in 0..2 {
            let vals = || {
                fields
                    .data()
                    .chunks(plane)
                    .skip(c)
                    .step_by(2)
                    .flatten()
                    .copied()
            };
            let n = (s[0] * plane) as f64;
            let m = vals().sum::<f64>() / n;
            let var = vals().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[c] = m;
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    fn map(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let s = x.shape();
        if s.len() < 3 || s[s.len() - 3] != 2 {
            return Err(Error::config(format!("expected [.., 2, H, W], got {s:?}")));
        }
        let plane = s[s.len() - 2] * s[s.len() - 1];
        let mut out = x.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let c = i % 2;
            chunk
                .iter_mut()
                .for_each(|v| *v = f(*v, self.mean[c], self.std[c]));
        }
        Ok(out)
    }

    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.map(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.map(x, |v, m, s| v * s + m)
    }
}

/// One split in physical units, values held at `f32` precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub spec: FieldSpec,
    /// Per-sample seeds `seeds.start..seeds.end`.
    pub seeds: Range<u64>,
    /// `[N, 2, H, W]`.
    pub hi: Tensor,
    /// `[N, 2, H/4, W/4]`.
    pub lo: Tensor,
    pub stats: Normalization,
}

fn to_f32_precision(t: Tensor) -> Tensor {
    let shape = t.shape().to_vec();
    let data = t.into_data().into_iter().map(|v| v as f32 as f64).collect();
    Tensor::new(&shape, data).expect("same shape")
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.hi.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Generate samples for seeds `base ⊕ i` for `i` in `seeds`.
    pub fn generate(split: Split, spec: FieldSpec, seeds: Range<u64>) -> Result<Self> {
        spec.validate()?;
        let pairs: Vec<(Tensor, Tensor)> = seeds
            .clone()
            .into_par_iter()
            .map(|i| {
                generate_sample(&FieldSpec {
                    seed: mix_seed(spec.seed, i),
                    ..spec
                })
            })
            .collect::<Result<_>>()?;
        let (his, los): (Vec<Tensor>, Vec<Tensor>) = pairs
            .into_iter()
            .map(|(x, y)| {
                let (xs, ys) = ([&[1], x.shape()].concat(), [&[1], y.shape()].concat());
                Ok((x.reshape(&xs)?, y.reshape(&ys)?))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let (h, w) = (spec.height, spec.width);
        let hi = if his.is_empty() {
            Tensor::zeros(&[0, 2, h, w])
        } else {
            Tensor::stack_batch(&his)?
        };
        let lo = if los.is_empty() {
            Tensor::zeros(&[0, 2, h / SCALE, w / SCALE])
        } else {
            Tensor::stack_batch(&los)?
        };
        Ok(Self {
            split,
            spec,
            seeds,
            hi: to_f32_precision(hi),
            lo: to_f32_precision(lo),
            stats: Normalization::identity(),
        })
    }

    /// Sample `i` as `(hi [2, H, W], lo [2, h, w])`.
    pub fn sample(&self, i: usize) -> (Tensor, Tensor) {
        let drop_lead = |t: Tensor| {
            let s = t.shape()[1..].to_vec();
            t.reshape(&s).expect("same element count")
        };
        (
            drop_lead(self.hi.batch_item(i)),
            drop_lead(self.lo.batch_item(i)),
        )
    }

    /// Gather samples `idx` into batched tensors.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let his: Vec<Tensor> = idx.iter().map(|&i| self.hi.batch_item(i)).collect();
        let los: Vec<Tensor> = idx.iter().map(|&i| self.lo.batch_item(i)).collect();
        Ok((Tensor::stack_batch(&his)?, Tensor::stack_batch(&los)?))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = Meta {
            format_version: FORMAT_VERSION,
            split: self.split,
            count: self.len(),
            hi_shape: self.hi.shape()[1..].to_vec(),
            lo_shape: self.lo.shape()[1..].to_vec(),
            scale: SCALE,
            spec: self.spec,
            seed_start: self.seeds.start,
            seed_end: self.seeds.end,
            stats: self.stats,
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        fs::write(dir.join("fields.f32"), f32_bytes(self.hi.data()))?;
        fs::write(dir.join("lowres.f32"), f32_bytes(self.lo.data()))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("meta.json"))?;
        let meta: Meta =
            serde_json::from_str(&text).map_err(|e| Error::format("meta.json", e.to_string()))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::format(
                "meta.json:format_version",
                format!("unsupported version {}", meta.format_version),
            ));
        }
        if meta.scale != SCALE {
            return Err(Error::format(
                "meta.json:scale",
                format!("expected {SCALE}, got {}", meta.scale),
            ));
        }
        if meta.seed_end < meta.seed_start || meta.seed_end - meta.seed_start != meta.count as u64 {
            return Err(Error::format(
                "meta.json:seed_end",
                format!("seed range does not cover {} samples", meta.count),
            ));
        }
        let read = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let bytes = fs::read(dir.join(name))?;
            let mut full = vec![meta.count];
            full.extend_from_slice(shape);
            let n: usize = full.iter().product();
            if bytes.len() != n * 4 {
                return Err(Error::format(
                    name,
                    format!(
                        "expected {} bytes for shape {full:?}, found {}",
                        n * 4,
                        bytes.len()
                    ),
                ));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            Tensor::new(&full, data)
        };
        if meta.hi_shape.len() != 3 || meta.lo_shape.len() != 3 {
            return Err(Error::format(
                "meta.json:hi_shape",
                "shapes must be [C, H, W]",
            ));
        }
        let hi = read("fields.f32", &meta.hi_shape)?;
        let lo = read("lowres.f32", &meta.lo_shape)?;
        Ok(Self {
            split: meta.split,
            spec: meta.spec,
            seeds: meta.seed_start..meta.seed_end,
            hi,
            lo,
            stats: meta.stats,
        })
    }
}

fn f32_bytes(data: &[f64]) -> Vec<u8> {
    data.iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    split: Split,
    count: usize,
    hi_shape: Vec<usize>,
    lo_shape: Vec<usize>,
    scale: usize,
    spec: FieldSpec,
    seed_start: u64,
    seed_end: u64,
    stats: Normalization,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub ood: Dataset,
}

impl Splits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Ood => &self.ood,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for s in Split::ALL {
            self.get(s).write(&dir.join(s.name()))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: Dataset::read(&dir.join("train"))?,
            val: Dataset::read(&dir.join("val"))?,
            ood: Dataset::read(&dir.join("ood"))?,
        })
    }
}

/// Generate three splits from explicit per-sample seed ranges.
///
/// Every split derives sample seeds from the same base `seed`, so the
/// ranges must be disjoint. Normalization statistics come from `train` and
/// are attached to all three.
pub fn build_splits_with_ranges(
    ranges: [Range<u64>; 3],
    id_spec: &FieldSpec,
    ood_spec: &FieldSpec,
    seed: u64,
) -> Result<Splits> {
    for i in 0..3 {
        for j in i + 1..3 {
            let (a, b) = (&ranges[i], &ranges[j]);
            if a.start < b.end && b.start < a.end {
                return Err(Error::config(format!(
                    "seed ranges {a:?} ({}) and {b:?} ({}) overlap",
                    Split::ALL[i].name(),
                    Split::ALL[j].name()
                )));
            }
        }
    }
    if ranges[0].is_empty() {
        return Err(Error::config("training split must not be empty"));
    }
    if (id_spec.height, id_spec.width) != (ood_spec.height, ood_spec.width) {
        return Err(Error::config("ID and OOD grids must have the same size"));
    }
    let id = FieldSpec { seed, ..*id_spec };
    let ood = FieldSpec { seed, ..*ood_spec };
    let [r_train, r_val, r_ood] = ranges;
    let mut train = Dataset::generate(Split::Train, id, r_train)?;
    let mut val = Dataset::generate(Split::Val, id, r_val)?;
    let mut ood = Dataset::generate(Split::Ood, ood, r_ood)?;
    let stats = Normalization::fit(&train.hi)?;
    train.stats = stats;
    val.stats = stats;
    ood.stats = stats;
    Ok(Splits { train, val, ood })
}

/// Consecutive seed blocks: train, then val, then OOD.
pub fn build_splits(
    n_train: usize,
    n_val: usize,
    n_ood: usize,
    id_spec: &FieldSpec,
    ood_spec: &FieldSpec,
    seed: u64,
) -> Result<Splits> {
    let (a, b, c) = (n_train as u64, n_val as u64, n_ood as u64);
    build_splits_with_ranges([0..a, a..a + b, a + b..a + b + c], id_spec, ood_spec, seed)
}

/// Wind speed `√(u² + v²)` per cell of `[.., 2, H, W]` fields.
pub fn windspeed(fields: &Tensor) -> Result<Vec<f64>> {
    let s = fields.shape();
    if s.len() < 3 || s[s.len() - 3] != 2 {
        return Err(Error::config(format!("expected [.., 2, H, W], got {s:?}")));
    }
    let plane = s[s.len() - 2] * s[s.len() - 1];
    let mut out = Vec::with_capacity(fields.numel() / 2);
    for pair in fields.data().chunks(2 * plane) {
        let (u, v) = pair.split_at(plane);
        out.extend(u.iter().zip(v).map(|(a, b)| a.hypot(*b)));
    }
    Ok(out)
}

/// Linear-interpolated quantile of unsorted values, `q ∈ [0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}
