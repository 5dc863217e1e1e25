//! Residual UNet down to a 2×2 bottleneck, with optional timestep
//! embedding and an optional hybrid quantum bottleneck block.
//!
//! Encoder level `l` runs one residual block at width `widths[l]`, keeps the
//! result as a skip, then halves the resolution by 2×2 average pooling and a
//! 3×3 convolution into the next width. The bottleneck block runs at
//! `bottleneck_channels`; when a hybrid configuration is present both of its
//! convolutions are [`HybridConvVertex`]es. The decoder mirrors the encoder
//! with nearest upsampling, a 3×3 convolution, skip concatenation and a
//! residual block. The output convolution starts at zero.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::hybrid::{HybridBottleneckConfig, HybridConvVertex};
use crate::qsim::Backend;
use crate::rng::{mix_seed, rng_for};
use crate::tensor::{Tape, Tensor, Var};

pub const NORM_GROUPS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channel width per resolution level, finest first.
    pub widths: Vec<usize>,
    pub bottleneck_channels: usize,
    /// Sinusoidal embedding size; zero disables timestep conditioning.
    pub time_embed_dim: usize,
    pub hybrid: Option<HybridBottleneckConfig>,
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Input side length that lands exactly on a 2×2 bottleneck.
    pub fn input_size(&self) -> usize {
        2 << self.levels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::config("unet needs at least one level"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("unet channel counts must be positive"));
        }
        for &c in self.widths.iter().chain([&self.bottleneck_channels]) {
            if c == 0 || c % NORM_GROUPS != 0 {
                return Err(Error::config(format!(
                    "unet width {c} is not a positive multiple of {NORM_GROUPS}"
                )));
            }
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::config("time embedding size must be even"));
        }
        if let Some(h) = &self.hybrid {
            h.validate()?;
            if h.total_channels != self.bottleneck_channels {
                return Err(Error::config(format!(
                    "hybrid block expects {} channels, bottleneck has {}",
                    h.total_channels, self.bottleneck_channels
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvP {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormP {
    g: usize,
    b: usize,
}

#[derive(Clone, Debug)]
enum ConvSlot {
    Plain(ConvP),
    Hybrid {
        vertex: HybridConvVertex,
        qweights: Vec<usize>,
        conv: Option<ConvP>,
    },
}

#[derive(Clone, Debug)]
struct ResP {
    n0: NormP,
    c0: ConvSlot,
    emb: Option<(usize, usize)>,
    n1: NormP,
    c1: ConvSlot,
    skip: Option<ConvP>,
}

#[derive(Clone, Debug)]
struct Layout {
    time: Option<(usize, usize)>,
    conv_in: ConvP,
    enc: Vec<ResP>,
    down: Vec<ConvP>,
    mid: ResP,
    up: Vec<ConvP>,
    dec: Vec<ResP>,
    norm_out: NormP,
    conv_out: ConvP,
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> usize {
        let t = Tensor::from_fn(shape, |_| self.rng.random_range(-bound..=bound));
        self.add(name, t)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) -> ConvP {
        let fan_in = (cin * k * k) as f64;
        let w = if zero {
            self.add(format!("{name}.w"), Tensor::zeros(&[cout, cin, k, k]))
        } else {
            self.uniform(
                format!("{name}.w"),
                &[cout, cin, k, k],
                (3.0 / fan_in).sqrt(),
            )
        };
        let b = self.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        ConvP { w, b }
    }

    fn linear(&mut self, name: &str, nin: usize, nout: usize) -> (usize, usize) {
        let w = self.uniform(format!("{name}.w"), &[nout, nin], (3.0 / nin as f64).sqrt());
        let b = self.add(format!("{name}.b"), Tensor::zeros(&[nout]));
        (w, b)
    }

    fn norm(&mut self, name: &str, c: usize) -> NormP {
        NormP {
            g: self.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
            b: self.add(format!("{name}.beta"), Tensor::zeros(&[c])),
        }
    }

    fn slot(
        &mut self,
        name: &str,
        c: usize,
        hybrid: Option<&HybridBottleneckConfig>,
    ) -> Result<ConvSlot> {
        let Some(h) = hybrid else {
            return Ok(ConvSlot::Plain(self.conv(name, c, c, 3, false)));
        };
        let vertex = HybridConvVertex::new(*h)?;
        let nw = if h.n_circuits > 0 {
            h.weights_per_circuit()?
        } else {
            0
        };
        let qweights = (0..h.n_circuits)
            .map(|ci| {
                let t =
                    Tensor::from_fn(&[nw], |_| self.rng.random_range(0.0..std::f64::consts::TAU));
                self.add(format!("{name}.q{ci}"), t)
            })
            .collect();
        let rest = h.classical_channels();
        let conv = (rest > 0).then(|| self.conv(name, rest, rest, 3, false));
        Ok(ConvSlot::Hybrid {
            vertex,
            qweights,
            conv,
        })
    }

    fn res(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        emb: usize,
        hybrid: Option<&HybridBottleneckConfig>,
    ) -> Result<ResP> {
        let n0 = self.norm(&format!("{name}.norm0"), cin);
        let c0 = match hybrid {
            Some(_) => self.slot(&format!("{name}.conv0"), cout, hybrid)?,
            None => ConvSlot::Plain(self.conv(&format!("{name}.conv0"), cin, cout, 3, false)),
        };
        let emb = (emb > 0).then(|| self.linear(&format!("{name}.emb"), emb, cout));
        let n1 = self.norm(&format!("{name}.norm1"), cout);
        let c1 = self.slot(&format!("{name}.conv1"), cout, hybrid)?;
        let skip = (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, false));
        Ok(ResP {
            n0,
            c0,
            emb,
            n1,
            c1,
            skip,
        })
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    cfg: UNetConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl UNet {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, &[0x756e_6574]);
        let mut b = Builder {
            rng: &mut rng,
            names: Vec::new(),
            params: Vec::new(),
        };
        let e = cfg.time_embed_dim;
        let time = (e > 0).then(|| b.linear("time", e, e));
        let conv_in = b.conv("conv_in", cfg.in_channels, cfg.widths[0], 3, false);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for (l, &c) in cfg.widths.iter().enumerate() {
            enc.push(b.res(&format!("enc{l}"), c, c, e, None)?);
            let next = cfg
                .widths
                .get(l + 1)
                .copied()
                .unwrap_or(cfg.bottleneck_channels);
            down.push(b.conv(&format!("down{l}"), c, next, 3, false));
        }
        let cb = cfg.bottleneck_channels;
        let mid = b.res("mid", cb, cb, e, cfg.hybrid.as_ref())?;
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for (l, &c) in cfg.widths.iter().enumerate() {
            let prev = cfg.widths.get(l + 1).copied().unwrap_or(cb);
            up.push(b.conv(&format!("up{l}"), prev, c, 3, false));
            dec.push(b.res(&format!("dec{l}"), 2 * c, c, e, None)?);
        }
        let norm_out = b.norm("norm_out", cfg.widths[0]);
        let conv_out = b.conv("conv_out", cfg.widths[0], cfg.out_channels, 3, true);
        let layout = Layout {
            time,
            conv_in,
            enc,
            down,
            mid,
            up,
            dec,
            norm_out,
            conv_out,
        };
        let (names, params) = (b.names, b.params);
        Ok(Self {
            cfg,
            layout,
            names,
            params,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Indices of the quantum weight vectors in [`UNet::params`].
    pub fn quantum_param_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for slot in [&self.layout.mid.c0, &self.layout.mid.c1] {
            if let ConvSlot::Hybrid { qweights, .. } = slot {
                out.extend_from_slice(qweights);
            }
        }
        out
    }

    pub fn has_quantum_layer(&self) -> bool {
        !self.quantum_param_indices().is_empty()
    }

    /// Register every parameter on `tape`: trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// `x: [B, in, S, S]` with `S = input_size()`; `t` holds one timestep per
    /// batch element when the embedding is enabled. `seed` decorrelates noisy
    /// quantum evaluations between calls.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        t: Option<&[f64]>,
        backend: &Backend,
        seed: u64,
    ) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::contract(format!(
                "unet bound with {} vars, has {} params",
                vars.len(),
                self.params.len()
            )));
        }
        let s = tape.shape(x).to_vec();
        let size = self.cfg.input_size();
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[2] != size || s[3] != size {
            return Err(Error::config(format!(
                "unet expects [B, {}, {size}, {size}], got {s:?}",
                self.cfg.in_channels
            )));
        }
        let temb = match (self.layout.time, t) {
            (Some((w, b)), Some(t)) => {
                if t.len() != s[0] {
                    return Err(Error::contract(format!(
                        "{} timesteps for a batch of {}",
                        t.len(),
                        s[0]
                    )));
                }
                let e = tape.constant(sinusoidal_embedding(t, self.cfg.time_embed_dim));
                let h = tape.linear(e, vars[w], Some(vars[b]))?;
                Some(tape.silu(h))
            }
            (None, None) => None,
            (Some(_), None) => return Err(Error::contract("timestep-conditioned unet needs t")),
            (None, Some(_)) => return Err(Error::contract("unet has no timestep embedding")),
        };
        let l = &self.layout;
        let mut ctx = Ctx {
            tape,
            vars,
            temb,
            backend,
            seed,
        };
        let mut h = ctx.conv(x, l.conv_in, 1)?;
        let mut skips = Vec::with_capacity(l.enc.len());
        for (enc, down) in l.enc.iter().zip(&l.down) {
            h = ctx.res(h, enc, 0)?;
            skips.push(h);
            h = ctx.tape.avgpool2x(h)?;
            h = ctx.conv(h, *down, 1)?;
        }
        h = ctx.res(h, &l.mid, 1)?;
        for ((up, dec), skip) in l.up.iter().zip(&l.dec).zip(&skips).rev() {
            h = ctx.tape.upsample2x(h)?;
            h = ctx.conv(h, *up, 1)?;
            h = ctx.tape.concat(&[h, *skip])?;
            h = ctx.res(h, dec, 0)?;
        }
        h = ctx.norm_act(h, l.norm_out)?;
        ctx.conv(h, l.conv_out, 1)
    }

    pub fn to_checkpoint(&self, mut meta: serde_json::Value) -> Result<Checkpoint> {
        if let serde_json::Value::Object(m) = &mut meta {
            m.insert("unet".into(), serde_json::to_value(&self.cfg)?);
        } else {
            meta = serde_json::json!({ "unet": self.cfg });
        }
        let mut ck = Checkpoint::new(meta);
        for (n, p) in self.names.iter().zip(&self.params) {
            ck.push(n.clone(), p.clone());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: UNetConfig = serde_json::from_value(
            ck.meta
                .get("unet")
                .cloned()
                .ok_or_else(|| Error::format("meta.unet", "missing model configuration"))?,
        )
        .map_err(|e| Error::format("meta.unet", e.to_string()))?;
        let mut net = Self::new(cfg, 0)?;
        for (n, p) in net.names.iter().zip(&mut net.params) {
            let t = ck.require(n)?;
            if t.shape() != p.shape() {
                return Err(Error::format(
                    n.clone(),
                    format!("shape {:?}, expected {:?}", t.shape(), p.shape()),
                ));
            }
            *p = t.clone();
        }
        Ok(net)
    }
}

/// `[sin(t·f_0..f_{h-1}), cos(t·f_0..f_{h-1})]` with `f_i = 10000^{-i/h}`.
pub fn sinusoidal_embedding(t: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        data.extend(freqs.clone().map(|f| (ti * f).sin()));
        data.extend(freqs.map(|f| (ti * f).cos()));
    }
    Tensor::new(&[t.len(), dim], data).expect("embedding shape")
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    vars: &'a [Var],
    temb: Option<Var>,
    backend: &'a Backend,
    seed: u64,
}

impl Ctx<'_> {
    fn conv(&mut self, x: Var, p: ConvP, pad: usize) -> Result<Var> {
        let k = self.tape.shape(self.vars[p.w])[2];
        let pad = if k == 1 { 0 } else { pad };
        self.tape
            .conv2d(x, self.vars[p.w], Some(self.vars[p.b]), 1, pad)
    }

    fn norm_act(&mut self, x: Var, p: NormP) -> Result<Var> {
        let h = self
            .tape
            .group_norm(x, self.vars[p.g], self.vars[p.b], NORM_GROUPS)?;
        Ok(self.tape.silu(h))
    }

    fn slot(&mut self, x: Var, slot: &ConvSlot, stream: u64) -> Result<Var> {
        match slot {
            ConvSlot::Plain(p) => self.conv(x, *p, 1),
            ConvSlot::Hybrid {
                vertex,
                qweights,
                conv,
            } => {
                let qw: Vec<Var> = qweights.iter().map(|&i| self.vars[i]).collect();
                vertex.forward(
                    self.tape,
                    x,
                    &qw,
                    conv.map(|c| self.vars[c.w]),
                    conv.map(|c| self.vars[c.b]),
                    self.backend,
                    mix_seed(self.seed, stream),
                )
            }
        }
    }

    fn res(&mut self, x: Var, p: &ResP, stream: u64) -> Result<Var> {
        let h = self.norm_act(x, p.n0)?;
        let mut h = self.slot(h, &p.c0, 2 * stream)?;
        if let (Some((w, b)), Some(temb)) = (p.emb, self.temb) {
            let e = self.tape.linear(temb, self.vars[w], Some(self.vars[b]))?;
            h = self.tape.broadcast_add(h, e)?;
        }
        let h = self.norm_act(h, p.n1)?;
        let h = self.slot(h, &p.c1, 2 * stream + 1)?;
        let skip = match p.skip {
            Some(s) => self.conv(x, s, 0)?,
            None => x,
        };
        self.tape.add(h, skip)
    }
}
