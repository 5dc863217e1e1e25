//! Two-stage corrective diffusion downscaling.
//!
//! A regression UNet maps the nearest-upsampled low-resolution input to a
//! conditional-mean estimate. A second, timestep-conditioned UNet is trained
//! as a DDPM ε-predictor on the residual `r₀ = x − regression(y)`, with the
//! upsampled input and the regression output concatenated as conditioning
//! channels. Ensembles are regression output plus independently sampled
//! residuals, mapped back to physical units.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{upsample_nearest, Normalization, SCALE};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::qsim::Backend;
use crate::rng::{derive_seed, rng_for};
use crate::tensor::{Tape, Tensor, Var};
use crate::unet::UNet;

/// Output channels of both networks: `(u10m, v10m)`.
pub const FIELD_CHANNELS: usize = 2;
/// Diffusion input: noisy residual, upsampled input, regression output.
pub const DIFFUSION_IN_CHANNELS: usize = 3 * FIELD_CHANNELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            _ => Err(Error::config(format!(
                "unknown schedule {s:?} (linear, cosine)"
            ))),
        }
    }
}

const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    /// `betas[t-1] = β_t`.
    betas: Vec<f64>,
    /// `alpha_bars[t] = ᾱ_t`, with `ᾱ_0 = 1`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(t: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t < 2 {
            return Err(Error::config(format!("diffusion needs T >= 2, got {t}")));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "linear betas need 0 < {beta_start} < {beta_end} < 1"
            )));
        }
        let betas = (0..t)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
            .collect();
        Ok(Self::from_betas(ScheduleKind::Linear, betas))
    }

    pub fn cosine(t: usize) -> Result<Self> {
        if t < 2 {
            return Err(Error::config(format!("diffusion needs T >= 2, got {t}")));
        }
        let f = |s: usize| {
            let x = (s as f64 / t as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let betas = (1..=t)
            .map(|s| (1.0 - f(s) / f(s - 1)).min(MAX_BETA))
            .collect();
        Ok(Self::from_betas(ScheduleKind::Cosine, betas))
    }

    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let last = *alpha_bars.last().expect("non-empty");
            alpha_bars.push(last * (1.0 - b));
        }
        Self {
            kind,
            betas,
            alpha_bars,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t` for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Variance of the ancestral step `x_t → x_{t-1}`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

/// Default schedules. The linear range scales the usual 1000-step
/// `[1e-4, 0.02]` betas by `1000 / T` so that short chains still end close
/// to pure noise.
pub fn make_schedule(t: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    match kind {
        ScheduleKind::Linear => {
            if t < 2 {
                return Err(Error::config(format!("diffusion needs T >= 2, got {t}")));
            }
            let scale = 1000.0 / t as f64;
            let end = (0.02 * scale).min(MAX_BETA);
            let start = (1e-4 * scale).min(end / 2.0);
            NoiseSchedule::linear(t, start, end)
        }
        ScheduleKind::Cosine => NoiseSchedule::cosine(t),
    }
}

/// Fixed linear part of the noise prediction: `ε̂ = √(1−ᾱ_t)·x_t + net(x_t, t)`.
///
/// `√(1−ᾱ_t)·x_t` is `E[ε | x_t]` when `r₀ ~ N(0, I)`, so the network only
/// learns the departure from a unit Gaussian residual.
pub fn eps_skip(sched: &NoiseSchedule, t: usize) -> f64 {
    (1.0 - sched.alpha_bar(t)).sqrt()
}

/// `x_t = √ᾱ_t·r₀ + √(1−ᾱ_t)·ε`.
pub fn q_sample(sched: &NoiseSchedule, r0: &[f64], eps: &[f64], t: usize) -> Vec<f64> {
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    r0.iter().zip(eps).map(|(r, e)| a * r + b * e).collect()
}

fn check_lowres(y: &Tensor, size: usize) -> Result<()> {
    let s = y.shape();
    let want = size / SCALE;
    if s.len() != 4 || s[1] != FIELD_CHANNELS || s[2] != want || s[3] != want {
        return Err(Error::config(format!(
            "low-resolution input must be [B, {FIELD_CHANNELS}, {want}, {want}] for a {size}×{size} \
             model at scale {SCALE}, got {s:?}"
        )));
    }
    Ok(())
}

/// Deterministic conditional-mean estimate for normalized `y_lr: [B,2,h,w]`.
pub fn regression_forward(regression: &UNet, y_lr: &Tensor) -> Result<Tensor> {
    check_lowres(y_lr, regression.config().input_size())?;
    let mut tape = Tape::inference();
    let vars = regression.bind(&mut tape, false);
    let x = tape.constant(upsample_nearest(y_lr)?);
    let out = regression.forward(&mut tape, &vars, x, None, &Backend::Exact, 0)?;
    Ok(tape.value(out).clone())
}

/// A model, its optimizer and the number of completed steps.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: UNet,
    pub opt: Adam,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: UNet, adam: AdamConfig) -> Self {
        let opt = Adam::new(adam, model.params());
        Self {
            model,
            opt,
            step: 0,
        }
    }

    /// One optimizer update on the scalar built by `loss`.
    pub fn step_with<F>(&mut self, loss: F) -> Result<f64>
    where
        F: FnOnce(&UNet, &mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape, true);
        let l = loss(&self.model, &mut tape, &vars)?;
        let value = tape.value(l).data()[0];
        if !value.is_finite() {
            return Err(Error::numeric(format!(
                "loss became {value} at step {}",
                self.step + 1
            )));
        }
        tape.backward(l)?;
        let grads: Vec<Vec<f64>> = vars
            .iter()
            .zip(self.model.params())
            .map(|(v, p)| {
                tape.grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.numel()])
            })
            .collect();
        self.opt
            .step(self.model.params_mut(), &grads)
            .map_err(|e| match e {
                Error::Numeric(m) => Error::numeric(format!("{m} (loss {value})")),
                other => other,
            })?;
        self.step += 1;
        Ok(value)
    }

    /// Model parameters plus optimizer moments and the step counter.
    pub fn to_checkpoint(&self, mut meta: serde_json::Value) -> Result<Checkpoint> {
        if let serde_json::Value::Object(m) = &mut meta {
            m.insert("step".into(), self.step.into());
            m.insert("adam".into(), serde_json::to_value(self.opt.config())?);
        }
        let mut ck = self.model.to_checkpoint(meta)?;
        let (m, v) = self.opt.moments();
        for ((name, p), (mi, vi)) in self
            .model
            .names()
            .iter()
            .zip(self.model.params())
            .zip(m.iter().zip(v))
        {
            ck.push(
                format!("adam.m.{name}"),
                Tensor::new(p.shape(), mi.clone())?,
            );
            ck.push(
                format!("adam.v.{name}"),
                Tensor::new(p.shape(), vi.clone())?,
            );
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = UNet::from_checkpoint(ck)?;
        let adam: AdamConfig = match ck.meta.get("adam") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| Error::format("meta.adam", e.to_string()))?,
            None => return Err(Error::format("meta.adam", "missing optimizer settings")),
        };
        let step = ck
            .meta
            .get("step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::format("meta.step", "missing step counter"))?;
        let mut opt = Adam::new(adam, model.params());
        let mut ms = Vec::new();
        let mut vs = Vec::new();
        for name in model.names() {
            ms.push(ck.require(&format!("adam.m.{name}"))?.data().to_vec());
            vs.push(ck.require(&format!("adam.v.{name}"))?.data().to_vec());
        }
        opt.restore(ms, vs, step)?;
        Ok(Self { model, opt, step })
    }
}

/// Normalized training pairs. `hi: [N,2,H,W]`, `lo: [N,2,H/4,W/4]`.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub hi: Tensor,
    pub lo: Tensor,
}

impl TrainingSet {
    pub fn normalized(hi: &Tensor, lo: &Tensor, stats: &Normalization) -> Result<Self> {
        if hi.shape()[0] != lo.shape()[0] || hi.shape()[0] == 0 {
            return Err(Error::config(
                "training set needs matching, non-empty hi/lo batches",
            ));
        }
        Ok(Self {
            hi: stats.normalize(hi)?,
            lo: stats.normalize(lo)?,
        })
    }

    pub fn len(&self) -> usize {
        self.hi.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Batch indices for one step, drawn without replacement.
    pub fn draw(&self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = self.len();
        sample_indices(rng, n, batch.min(n)).into_vec()
    }

    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let hi: Vec<Tensor> = idx.iter().map(|&i| self.hi.batch_item(i)).collect();
        let lo: Vec<Tensor> = idx.iter().map(|&i| self.lo.batch_item(i)).collect();
        Ok((Tensor::stack_batch(&hi)?, Tensor::stack_batch(&lo)?))
    }
}

/// Per-step RNG: a pure function of `(seed, step)`, so resumed runs replay
/// the same batches and noise.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    rng_for(seed, &[0x7374_6570, step])
}

/// One regression update: MSE between the prediction and the normalized truth.
pub fn regression_train_step(
    trainer: &mut Trainer,
    data: &TrainingSet,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = step_rng(seed, trainer.step);
    let idx = data.draw(batch, &mut rng);
    let (x, y) = data.gather(&idx)?;
    check_lowres(&y, trainer.model.config().input_size())?;
    let up = upsample_nearest(&y)?;
    trainer.step_with(|model, tape, vars| {
        let inp = tape.constant(up);
        let pred = model.forward(tape, vars, inp, None, &Backend::Exact, 0)?;
        let target = tape.constant(x);
        tape.mse(pred, target)
    })
}

/// One ε-prediction update on residuals of the frozen `regression`.
///
/// Draws `t ~ U{1..T}` and `ε ~ N(0, I)` per sample from `rng`.
pub fn diffusion_train_step(
    trainer: &mut Trainer,
    x: &Tensor,
    y_lr: &Tensor,
    regression: &UNet,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let reg = regression_forward(regression, y_lr)?;
    if reg.shape() != x.shape() {
        return Err(Error::config(format!(
            "target {:?} does not match regression output {:?}",
            x.shape(),
            reg.shape()
        )));
    }
    let b = x.shape()[0];
    let per = x.numel() / b;
    let ts: Vec<usize> = (0..b)
        .map(|_| rng.random_range(1..=sched.steps()))
        .collect();
    let eps: Vec<f64> = (0..x.numel()).map(|_| StandardNormal.sample(rng)).collect();
    let r0: Vec<f64> = x
        .data()
        .iter()
        .zip(reg.data())
        .map(|(a, r)| a - r)
        .collect();
    let mut xt = Vec::with_capacity(x.numel());
    let mut skip = Vec::with_capacity(x.numel());
    for (i, &t) in ts.iter().enumerate() {
        let s = i * per..(i + 1) * per;
        let noised = q_sample(sched, &r0[s.clone()], &eps[s], t);
        let g = eps_skip(sched, t);
        skip.extend(noised.iter().map(|v| g * v));
        xt.extend(noised);
    }
    let input = condition_input(&Tensor::new(x.shape(), xt)?, y_lr, &reg)?;
    let skip = Tensor::new(x.shape(), skip)?;
    let eps = Tensor::new(x.shape(), eps)?;
    let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    trainer.step_with(|model, tape, vars| {
        let inp = tape.constant(input);
        let out = model.forward(tape, vars, inp, Some(&tf), &Backend::Exact, 0)?;
        let skip = tape.constant(skip);
        let pred = tape.add(out, skip)?;
        let target = tape.constant(eps);
        tape.mse(pred, target)
    })
}

/// Diffusion step drawn from the per-step RNG of `(seed, trainer.step)`.
pub fn diffusion_train_step_seeded(
    trainer: &mut Trainer,
    data: &TrainingSet,
    batch: usize,
    regression: &UNet,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let mut rng = step_rng(seed, trainer.step);
    let idx = data.draw(batch, &mut rng);
    let (x, y) = data.gather(&idx)?;
    diffusion_train_step(trainer, &x, &y, regression, sched, &mut rng).map_err(|e| match e {
        Error::Numeric(m) => Error::numeric(format!("{m}; batch {idx:?}")),
        other => other,
    })
}

/// Channel-concat `[x_t, upsample(y_lr), regression]` into `[B, 6, H, W]`.
pub fn condition_input(xt: &Tensor, y_lr: &Tensor, reg: &Tensor) -> Result<Tensor> {
    let up = upsample_nearest(y_lr)?;
    let s = xt.shape();
    if up.shape() != s || reg.shape() != s {
        return Err(Error::config(format!(
            "conditioning shapes differ: x_t {s:?}, upsampled {:?}, regression {:?}",
            up.shape(),
            reg.shape()
        )));
    }
    let (b, plane) = (s[0], FIELD_CHANNELS * s[2] * s[3]);
    let mut data = Vec::with_capacity(3 * xt.numel());
    for i in 0..b {
        for src in [xt, &up, reg] {
            data.extend_from_slice(&src.data()[i * plane..(i + 1) * plane]);
        }
    }
    Tensor::new(&[b, DIFFUSION_IN_CHANNELS, s[2], s[3]], data)
}

/// Ancestral DDPM sampling of residuals conditioned on normalized
/// `y_lr: [B,2,h,w]` and regression output `reg: [B,2,H,W]`.
///
/// `rngs` holds one noise stream per batch element; `seed` drives noisy
/// quantum backends and is combined with the step index.
pub fn sample_residual(
    model: &UNet,
    y_lr: &Tensor,
    reg: &Tensor,
    sched: &NoiseSchedule,
    rngs: &mut [ChaCha8Rng],
    backend: &Backend,
    seed: u64,
) -> Result<Tensor> {
    let shape = reg.shape().to_vec();
    let b = shape[0];
    if rngs.len() != b {
        return Err(Error::contract(format!(
            "{} noise streams for a batch of {b}",
            rngs.len()
        )));
    }
    let per = reg.numel() / b;
    let mut x: Vec<f64> = Vec::with_capacity(reg.numel());
    for r in rngs.iter_mut() {
        x.extend((0..per).map(|_| -> f64 { StandardNormal.sample(r) }));
    }
    for t in (1..=sched.steps()).rev() {
        let mut tape = Tape::inference();
        let vars = model.bind(&mut tape, false);
        let input = condition_input(&Tensor::new(&shape, x.clone())?, y_lr, reg)?;
        let inp = tape.constant(input);
        let tf = vec![t as f64; b];
        let out = model.forward(
            &mut tape,
            &vars,
            inp,
            Some(&tf),
            backend,
            derive_seed(seed, &[t as u64]),
        )?;
        let eps = tape.value(out).data();
        let beta = sched.beta(t);
        let coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
        let g = eps_skip(sched, t);
        for (xi, e) in x.iter_mut().zip(eps) {
            *xi = inv_sqrt_alpha * (*xi - coef * (g * *xi + e));
        }
        if t > 1 {
            let sd = sched.posterior_variance(t).sqrt();
            for (i, r) in rngs.iter_mut().enumerate() {
                for xi in &mut x[i * per..(i + 1) * per] {
                    let z: f64 = StandardNormal.sample(r);
                    *xi += sd * z;
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite residual at sampling step {t}"
            )));
        }
    }
    Tensor::new(&shape, x)
}

/// Trained networks and what is needed to use them.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub regression: UNet,
    /// `None` gives regression-only forecasts.
    pub diffusion: Option<UNet>,
    pub sched: NoiseSchedule,
    pub stats: Normalization,
}

/// `M` members for one low-resolution input, in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleForecast {
    pub time_id: usize,
    /// `[M, 2, H, W]`.
    pub members: Tensor,
    /// Regression-only prediction `[2, H, W]`.
    pub regression: Tensor,
    pub member_seeds: Vec<u64>,
}

impl EnsembleForecast {
    pub fn n_members(&self) -> usize {
        self.members.shape()[0]
    }

    /// Member mean `[2, H, W]`.
    pub fn mean(&self) -> Tensor {
        let m = self.n_members();
        let per = self.members.numel() / m;
        let mut out = vec![0.0; per];
        for chunk in self.members.data().chunks(per) {
            out.iter_mut()
                .zip(chunk)
                .for_each(|(o, v)| *o += v / m as f64);
        }
        Tensor::new(&self.members.shape()[1..], out).expect("member shape")
    }
}

impl Pipeline {
    /// Seed of member `m` at `time_id` under base `seed`.
    pub fn member_seed(seed: u64, time_id: usize, m: usize) -> u64 {
        derive_seed(seed, &[time_id as u64, m as u64])
    }

    /// Normalized residuals `[M,2,H,W]` and regression output `[1,2,H,W]`.
    pub fn sample_normalized(
        &self,
        y_lr_phys: &Tensor,
        time_id: usize,
        members: usize,
        seed: u64,
        backend: &Backend,
    ) -> Result<(Tensor, Tensor)> {
        if members == 0 {
            return Err(Error::config("ensemble needs at least one member"));
        }
        let y = self.stats.normalize(y_lr_phys)?;
        let y = if y.shape().len() == 3 {
            let s = [&[1], y.shape()].concat();
            y.reshape(&s)?
        } else {
            y
        };
        if y.shape()[0] != 1 {
            return Err(Error::contract("sample one low-resolution input at a time"));
        }
        let reg = regression_forward(&self.regression, &y)?;
        let ys = Tensor::stack_batch(&vec![y; members])?;
        let regs = Tensor::stack_batch(&vec![reg.clone(); members])?;
        let residual = match &self.diffusion {
            Some(model) => {
                let mut rngs: Vec<ChaCha8Rng> = (0..members)
                    .map(|m| rng_for(Self::member_seed(seed, time_id, m), &[]))
                    .collect();
                let qseed = derive_seed(seed, &[time_id as u64, 0x7175_616e]);
                sample_residual(model, &ys, &regs, &self.sched, &mut rngs, backend, qseed)?
            }
            None => Tensor::zeros(regs.shape()),
        };
        Ok((residual, reg))
    }

    /// `member_m = denormalize(regression(y) + residual_m)`.
    pub fn downscale_ensemble(
        &self,
        y_lr_phys: &Tensor,
        time_id: usize,
        members: usize,
        seed: u64,
        backend: &Backend,
    ) -> Result<EnsembleForecast> {
        let (residual, reg) = self.sample_normalized(y_lr_phys, time_id, members, seed, backend)?;
        let per = reg.numel();
        let mut pred = residual.into_data();
        for chunk in pred.chunks_mut(per) {
            chunk.iter_mut().zip(reg.data()).for_each(|(p, r)| *p += r);
        }
        let mut shape = reg.shape().to_vec();
        shape[0] = members;
        let members_t = self.stats.denormalize(&Tensor::new(&shape, pred)?)?;
        let reg_phys = self.stats.denormalize(&reg)?;
        let reg_shape = reg_phys.shape()[1..].to_vec();
        Ok(EnsembleForecast {
            time_id,
            members: members_t,
            regression: reg_phys.reshape(&reg_shape)?,
            member_seeds: (0..members)
                .map(|m| Self::member_seed(seed, time_id, m))
                .collect(),
        })
    }

    /// Ensembles for several `(time_id, y_lr)` inputs, in input order.
    pub fn downscale_many(
        &self,
        inputs: &[(usize, Tensor)],
        members: usize,
        seed: u64,
        backend: &Backend,
    ) -> Result<Vec<EnsembleForecast>> {
        inputs
            .par_iter()
            .map(|(id, y)| self.downscale_ensemble(y, *id, members, seed, backend))
            .collect()
    }
}
