use super::conv::{col2im, gemm, im2col, ConvGeom};
use super::{Op, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const GROUPNORM_EPS: f64 = 1e-5;

fn expect_rank(shape: &[usize], rank: usize, what: &str) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::config(format!(
            "{what} expects rank {rank}, got shape {shape:?}"
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    /// 2-D convolution of `[B,Cin,H,W]` with `[Cout,Cin,k,k]`, optional bias `[Cout]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        expect_rank(&xs, 4, "conv2d input")?;
        expect_rank(&ks, 4, "conv2d kernel")?;
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kcin, k, k2) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin || k != k2 {
            return Err(Error::config(format!(
                "conv2d kernel {ks:?} incompatible with input {xs:?}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::config(format!("conv2d kernel size {k} must be odd")));
        }
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::config(format!(
                "conv2d geometry invalid: input {xs:?}, k={k}, stride={stride}, pad={pad}"
            )));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::config(format!(
                    "conv2d bias shape {:?}, expected [{cout}]",
                    self.shape(bv)
                )));
            }
        }
        let g = ConvGeom {
            c: cin,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        };
        let rows = g.col_rows();
        let ncols = g.col_cols();
        let keep = self.needs(&[input, kernel]);
        let mut cols_all = if keep {
            vec![0.0; b * rows * ncols]
        } else {
            Vec::new()
        };
        let mut scratch = if keep {
            Vec::new()
        } else {
            vec![0.0; rows * ncols]
        };
        let mut out = vec![0.0; b * cout * ncols];
        {
            let x = self.value(input).data();
            let kd = self.value(kernel).data();
            for bi in 0..b {
                let cols: &mut [f64] = if keep {
                    &mut cols_all[bi * rows * ncols..(bi + 1) * rows * ncols]
                } else {
                    &mut scratch
                };
                im2col(&x[bi * cin * h * w..(bi + 1) * cin * h * w], &g, cols);
                let o = &mut out[bi * cout * ncols..(bi + 1) * cout * ncols];
                if let Some(bv) = bias {
                    let bd = self.value(bv).data();
                    for (co, row) in o.chunks_mut(ncols).enumerate() {
                        row.fill(bd[co]);
                    }
                }
                gemm(cout, rows, ncols, kd, false, cols, false, 1.0, o);
            }
        }
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        let rg = self.needs(&parents);
        let value = Tensor::new(&[b, cout, g.ho, g.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
                cols: cols_all,
            },
            rg,
        ))
    }

    /// `x·wᵀ + b` for `x:[B,in]`, `w:[out,in]`, `b:[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        expect_rank(&xs, 2, "linear input")?;
        expect_rank(&ws, 2, "linear weight")?;
        if xs[1] != ws[1] {
            return Err(Error::config(format!(
                "linear weight {ws:?} incompatible with input {xs:?}"
            )));
        }
        let (bs, nin, nout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; bs * nout];
        if let Some(bv) = b {
            if self.shape(bv) != [nout] {
                return Err(Error::config(format!(
                    "linear bias shape {:?}, expected [{nout}]",
                    self.shape(bv)
                )));
            }
            let bd = self.value(bv).data();
            for row in out.chunks_mut(nout) {
                row.copy_from_slice(bd);
            }
        }
        gemm(
            bs,
            nin,
            nout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            1.0,
            &mut out,
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.needs(&parents);
        let value = Tensor::new(&[bs, nout], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        let rg = self.needs(&[x]);
        self.push(value, Op::Silu { x }, rg)
    }

    /// Group normalization over `[B,C,H,W]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        expect_rank(&xs, 4, "groupnorm input")?;
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::config(format!(
                "groupnorm: {c} channels not divisible into {groups} groups"
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::config(
                "groupnorm affine parameters must have shape [C]",
            ));
        }
        let cg = c / groups;
        let n = cg * h * w;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; b * groups];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for gi in 0..groups {
                let off = (bi * c + gi * cg) * h * w;
                let seg = &xd[off..off + n];
                let mean = seg.iter().sum::<f64>() / n as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + GROUPNORM_EPS).sqrt();
                inv_std[bi * groups + gi] = is;
                for (j, v) in seg.iter().enumerate() {
                    let ch = gi * cg + j / (h * w);
                    let xh = (v - mean) * is;
                    xhat[off + j] = xh;
                    out[off + j] = xh * gd[ch] + bd[ch];
                }
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        let keep = self.record;
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat: if keep { xhat } else { Vec::new() },
                inv_std: if keep { inv_std } else { Vec::new() },
            },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data().iter().map(|v| v * c).collect(),
        };
        let rg = self.needs(&[x]);
        self.push(value, Op::Scale { x, c }, rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Concatenate along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(Error::config("concat needs rank >= 2"));
        }
        let inner: usize = s0[2..].iter().product();
        let mut total_c = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::config(format!(
                    "concat: shape {s:?} incompatible with {s0:?}"
                )));
            }
            total_c += s[1];
        }
        let b = s0[0];
        let mut data = Vec::with_capacity(b * total_c * inner);
        for bi in 0..b {
            for p in parts {
                let pv = self.value(*p);
                let c = pv.shape()[1];
                data.extend_from_slice(&pv.data()[bi * c * inner..(bi + 1) * c * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = total_c;
        let rg = self.needs(parts);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Channels `[start, start+len)` along axis 1.
    pub fn split(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start + len > s[1] {
            return Err(Error::config(format!(
                "split [{start}, {}) out of range for shape {s:?}",
                start + len
            )));
        }
        let inner: usize = s[2..].iter().product();
        let c = s[1];
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * len * inner);
        for bi in 0..s[0] {
            data.extend_from_slice(&xd[(bi * c + start) * inner..(bi * c + start + len) * inner]);
        }
        let mut shape = s.clone();
        shape[1] = len;
        let rg = self.needs(&[x]);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Split { x, start }, rg))
    }

    /// Nearest-neighbour 2× upsampling of `[B,C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        expect_rank(&s, 4, "upsample2x")?;
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xd = self.value(x).data();
        let mut data = vec![0.0; b * c * 4 * h * w];
        for plane in 0..b * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut data[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.needs(&[x]);
        let value = Tensor::new(&[b, c, 2 * h, 2 * w], data)?;
        Ok(self.push(value, Op::Upsample2x { x }, rg))
    }

    /// 2×2 average pooling of `[B,C,H,W]` with even `H`, `W`.
    pub fn avgpool2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        expect_rank(&s, 4, "avgpool2x")?;
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!(
                "avgpool2x needs even spatial dims, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut data = vec![0.0; b * c * ho * wo];
        for plane in 0..b * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    data[plane * ho * wo + y * wo + xx] =
                        0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let rg = self.needs(&[x]);
        let value = Tensor::new(&[b, c, ho, wo], data)?;
        Ok(self.push(value, Op::AvgPool2x { x }, rg))
    }

    /// Add a `[B,C]` embedding to every pixel of `[B,C,H,W]`.
    pub fn broadcast_add(&mut self, x: Var, emb: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        expect_rank(&s, 4, "broadcast-add input")?;
        if self.shape(emb) != [s[0], s[1]] {
            return Err(Error::config(format!(
                "broadcast-add embedding {:?} does not match [{}, {}]",
                self.shape(emb),
                s[0],
                s[1]
            )));
        }
        let hw = s[2] * s[3];
        let ed = self.value(emb).data();
        let mut data = self.value(x).data().to_vec();
        for (plane, chunk) in data.chunks_mut(hw).enumerate() {
            let e = ed[plane];
            chunk.iter_mut().for_each(|v| *v += e);
        }
        let rg = self.needs(&[x, emb]);
        let value = Tensor::new(&s, data)?;
        Ok(self.push(value, Op::BroadcastAdd { x, emb }, rg))
    }

    /// Mean squared error, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let n = ad.len().max(1) as f64;
        let s = ad
            .iter()
            .zip(bd)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Mse { a, b }, rg))
    }
}

/// Parent gradients of node `i` given its upstream gradient `g`.
pub(super) fn backward_node(tape: &Tape, i: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
    let node = &tape.nodes[i];
    let val = |v: Var| tape.value(v);
    let rg = |v: Var| tape.nodes[v.0].requires_grad;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            pad,
            cols,
        } => {
            let xs = val(*input).shape();
            let ks = val(*kernel).shape();
            let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (cout, k) = (ks[0], ks[2]);
            let os = node.value.shape();
            let g_ = ConvGeom {
                c: cin,
                h,
                w,
                k,
                stride: *stride,
                pad: *pad,
                ho: os[2],
                wo: os[3],
            };
            let rows = g_.col_rows();
            let ncols = g_.col_cols();
            if cols.len() != b * rows * ncols {
                return Err(Error::contract("conv2d activations were not recorded"));
            }
            let kd = val(*kernel).data();
            let mut dk = vec![0.0; cout * rows];
            let mut dx = if rg(*input) {
                vec![0.0; b * cin * h * w]
            } else {
                Vec::new()
            };
            let mut dcols = vec![0.0; rows * ncols];
            for bi in 0..b {
                let go = &g[bi * cout * ncols..(bi + 1) * cout * ncols];
                let cb = &cols[bi * rows * ncols..(bi + 1) * rows * ncols];
                gemm(cout, ncols, rows, go, false, cb, true, 1.0, &mut dk);
                if rg(*input) {
                    gemm(rows, cout, ncols, kd, true, go, false, 0.0, &mut dcols);
                    col2im(
                        &dcols,
                        &g_,
                        &mut dx[bi * cin * h * w..(bi + 1) * cin * h * w],
                    );
                }
            }
            if rg(*input) {
                out.push((*input, dx));
            }
            out.push((*kernel, dk));
            if let Some(bv) = bias {
                let mut db = vec![0.0; cout];
                for bi in 0..b {
                    for (co, d) in db.iter_mut().enumerate() {
                        let off = (bi * cout + co) * ncols;
                        *d += g[off..off + ncols].iter().sum::<f64>();
                    }
                }
                out.push((*bv, db));
            }
        }
        Op::Linear { x, w, b } => {
            let xs = val(*x).shape();
            let (bs, nin) = (xs[0], xs[1]);
            let nout = val(*w).shape()[0];
            let mut dx = vec![0.0; bs * nin];
            gemm(bs, nout, nin, g, false, val(*w).data(), false, 0.0, &mut dx);
            let mut dw = vec![0.0; nout * nin];
            gemm(nout, bs, nin, g, true, val(*x).data(), false, 0.0, &mut dw);
            out.push((*x, dx));
            out.push((*w, dw));
            if let Some(bv) = b {
                let mut db = vec![0.0; nout];
                for row in g.chunks(nout) {
                    db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                }
                out.push((*bv, db));
            }
        }
        Op::Silu { x } => {
            let dx = val(*x)
                .data()
                .iter()
                .zip(g)
                .map(|(&v, &gg)| {
                    let s = sigmoid(v);
                    gg * (s + v * s * (1.0 - s))
                })
                .collect();
            out.push((*x, dx));
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            xhat,
            inv_std,
        } => {
            let xs = val(*x).shape();
            let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            if xhat.len() != b * c * h * w {
                return Err(Error::contract("groupnorm activations were not recorded"));
            }
            let hw = h * w;
            let cg = c / groups;
            let n = (cg * hw) as f64;
            let gd = val(*gamma).data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dx = vec![0.0; g.len()];
            for bi in 0..b {
                for gi in 0..*groups {
                    let off = (bi * c + gi * cg) * hw;
                    let len = cg * hw;
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..len {
                        let ch = gi * cg + j / hw;
                        let d = g[off + j] * gd[ch];
                        sum_d += d;
                        sum_dx += d * xhat[off + j];
                        dgamma[ch] += g[off + j] * xhat[off + j];
                        dbeta[ch] += g[off + j];
                    }
                    let is = inv_std[bi * groups + gi];
                    for j in 0..len {
                        let ch = gi * cg + j / hw;
                        let d = g[off + j] * gd[ch];
                        dx[off + j] = is / n * (n * d - sum_d - xhat[off + j] * sum_dx);
                    }
                }
            }
            out.push((*x, dx));
            out.push((*gamma, dgamma));
            out.push((*beta, dbeta));
        }
        Op::Add { a, b } => {
            out.push((*a, g.to_vec()));
            out.push((*b, g.to_vec()));
        }
        Op::Mul { a, b } => {
            let ad = val(*a).data();
            let bd = val(*b).data();
            out.push((*a, g.iter().zip(bd).map(|(x, y)| x * y).collect()));
            out.push((*b, g.iter().zip(ad).map(|(x, y)| x * y).collect()));
        }
        Op::Scale { x, c } => {
            out.push((*x, g.iter().map(|v| v * c).collect()));
        }
        Op::Sum { x } => {
            out.push((*x, vec![g[0]; val(*x).numel()]));
        }
        Op::Concat { parts } => {
            let s = node.value.shape();
            let inner: usize = s[2..].iter().product();
            let total_c = s[1];
            let mut c_off = 0;
            for p in parts {
                let c = val(*p).shape()[1];
                let mut d = Vec::with_capacity(s[0] * c * inner);
                for bi in 0..s[0] {
                    let base = (bi * total_c + c_off) * inner;
                    d.extend_from_slice(&g[base..base + c * inner]);
                }
                out.push((*p, d));
                c_off += c;
            }
        }
        Op::Split { x, start } => {
            let s = val(*x).shape();
            let inner: usize = s[2..].iter().product();
            let len = node.value.shape()[1];
            let mut d = vec![0.0; val(*x).numel()];
            for bi in 0..s[0] {
                let dst = (bi * s[1] + start) * inner;
                let src = bi * len * inner;
                d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            out.push((*x, d));
        }
        Op::Upsample2x { x } => {
            let s = val(*x).shape();
            let (h, w) = (s[2], s[3]);
            let mut d = vec![0.0; val(*x).numel()];
            for plane in 0..s[0] * s[1] {
                let src = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                    }
                }
            }
            out.push((*x, d));
        }
        Op::AvgPool2x { x } => {
            let s = val(*x).shape();
            let (h, w) = (s[2], s[3]);
            let (ho, wo) = (h / 2, w / 2);
            let mut d = vec![0.0; val(*x).numel()];
            for plane in 0..s[0] * s[1] {
                for y in 0..ho {
                    for xx in 0..wo {
                        let gv = 0.25 * g[plane * ho * wo + y * wo + xx];
                        let i = plane * h * w + 2 * y * w + 2 * xx;
                        d[i] += gv;
                        d[i + 1] += gv;
                        d[i + w] += gv;
                        d[i + w + 1] += gv;
                    }
                }
            }
            out.push((*x, d));
        }
        Op::BroadcastAdd { x, emb } => {
            let s = val(*x).shape();
            let hw = s[2] * s[3];
            let de = g.chunks(hw).map(|c| c.iter().sum()).collect();
            out.push((*x, g.to_vec()));
            out.push((*emb, de));
        }
        Op::Mse { a, b } => {
            let ad = val(*a).data();
            let bd = val(*b).data();
            let n = ad.len().max(1) as f64;
            let da: Vec<f64> = ad
                .iter()
                .zip(bd)
                .map(|(x, y)| 2.0 * (x - y) / n * g[0])
                .collect();
            let db = da.iter().map(|v| -v).collect();
            out.push((*a, da));
            out.push((*b, db));
        }
        Op::Custom { parents, op } => {
            let pv: Vec<&Tensor> = parents.iter().map(|p| val(*p)).collect();
            let needs: Vec<bool> = parents.iter().map(|p| rg(*p)).collect();
            let grads = op.backward(&pv, &node.value, g, &needs)?;
            if grads.len() != parents.len() {
                return Err(Error::contract(format!(
                    "custom op {} returned {} gradients for {} parents",
                    op.name(),
                    grads.len(),
                    parents.len()
                )));
            }
            for (p, gr) in parents.iter().zip(grads) {
                if let Some(gr) = gr {
                    if gr.len() != val(*p).numel() {
                        return Err(Error::contract(format!(
                            "custom op {} gradient length mismatch",
                            op.name()
                        )));
                    }
                    out.push((*p, gr));
                }
            }
        }
    }
    Ok(out)
}
