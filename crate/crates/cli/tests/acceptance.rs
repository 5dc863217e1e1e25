//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1-6 check the core library against independent oracles written
//! here. Criteria 7-11 drive the `qds` binary through a desk-scale pipeline
//! (dataset, regression, classical and hybrid diffusion, evaluation,
//! diagnostics, backend comparison, replays). Set `QDS_ACCEPTANCE_DIR` to keep
//! the pipeline outputs; otherwise they live in a temporary directory.

use std::f64::consts::TAU;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use num_complex::Complex64 as C;
use qds_core::ansatz::{self, AnsatzSpec, Variant};
use qds_core::data::gaussian_random_field;
use qds_core::hybrid::{HybridBottleneckConfig, HybridConvVertex};
use qds_core::metrics::{crps_ensemble, directional_spectrum, fss, mae, Direction};
use qds_core::qsim::{
    parameter_shift_grad, run, Backend, Circuit, Gate, GateKind, Param, StateVector,
};
use qds_core::tensor::{finite_diff_check, Tape, Tensor, Var};
use qds_core::unet::{UNet, UNetConfig};
use qds_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn minutes(d: Duration) -> String {
    let s = d.as_secs_f64();
    format!("{}m{:02}s", (s / 60.0) as u64, (s % 60.0) as u64)
}

// ---------------------------------------------------------------- criterion 1

/// `Σ y ⊙ r` for a fixed random `r`, so every output coordinate matters.
fn project(t: &mut Tape, y: Var, seed: u64) -> qds_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = randn(&mut rng, t.shape(y));
    let rv = t.constant(r);
    let p = t.mul(y, rv)?;
    Ok(t.sum(p))
}

type OpCase = (
    &'static str,
    Box<dyn Fn(&mut Tape, &[Var]) -> qds_core::Result<Var>>,
);

fn op_cases(seed: u64, c: usize, stride: usize, target: Tensor) -> Vec<OpCase> {
    vec![
        (
            "conv2d",
            Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, 1)?;
                project(t, y, seed)
            }),
        ),
        (
            "linear",
            Box::new(move |t, v| {
                let y = t.linear(v[5], v[6], Some(v[7]))?;
                project(t, y, seed)
            }),
        ),
        (
            "silu",
            Box::new(move |t, v| {
                let y = t.silu(v[0]);
                project(t, y, seed)
            }),
        ),
        (
            "group_norm",
            Box::new(move |t, v| {
                let y = t.group_norm(v[0], v[3], v[4], 2)?;
                project(t, y, seed)
            }),
        ),
        (
            "add",
            Box::new(move |t, v| {
                let s = t.silu(v[0]);
                let y = t.add(v[0], s)?;
                project(t, y, seed)
            }),
        ),
        (
            "mul",
            Box::new(move |t, v| {
                let y = t.mul(v[0], v[0])?;
                project(t, y, seed)
            }),
        ),
        (
            "scale+sum",
            Box::new(move |t, v| {
                let y = t.scale(v[0], -1.7);
                let q = t.mul(y, v[0])?;
                Ok(t.sum(q))
            }),
        ),
        (
            "concat+split",
            Box::new(move |t, v| {
                let a = t.split(v[0], 0, c / 2)?;
                let b = t.split(v[0], c / 2, c - c / 2)?;
                let y = t.concat(&[b, v[0], a])?;
                let s = t.silu(y);
                project(t, s, seed)
            }),
        ),
        (
            "upsample2x",
            Box::new(move |t, v| {
                let u = t.upsample2x(v[0])?;
                let y = t.silu(u);
                project(t, y, seed)
            }),
        ),
        (
            "avgpool2x",
            Box::new(move |t, v| {
                let s = t.silu(v[0]);
                let y = t.avgpool2x(s)?;
                project(t, y, seed)
            }),
        ),
        (
            "broadcast_add",
            Box::new(move |t, v| {
                let e = t.linear(v[5], v[6], None)?;
                let y = t.broadcast_add(v[0], e)?;
                let s = t.silu(y);
                project(t, s, seed)
            }),
        ),
        (
            "mse",
            Box::new(move |t, v| {
                let y = t.silu(v[0]);
                let tg = t.constant(target.clone());
                t.mse(y, tg)
            }),
        ),
    ]
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for seed in 0..24u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let b = rng.random_range(1..=2);
        let c = 2 * rng.random_range(1..=3);
        let h = 2 * rng.random_range(1..=4);
        let w = 2 * rng.random_range(1..=4);
        let e = rng.random_range(2..=6);
        let stride = 1 + (seed % 2) as usize;
        let params = [
            randn(&mut rng, &[b, c, h, w]),
            randn(&mut rng, &[c, c, 3, 3]),
            randn(&mut rng, &[c]),
            randn(&mut rng, &[c]),
            randn(&mut rng, &[c]),
            randn(&mut rng, &[b, e]),
            randn(&mut rng, &[c, e]),
            randn(&mut rng, &[c]),
        ];
        let target = randn(&mut rng, &[b, c, h, w]);
        for (name, f) in op_cases(seed, c, stride, target) {
            let err = finite_diff_check(|t, v| f(t, v), &params, 1e-4).map_err(e2s)?;
            ensure(err < 1e-3, || {
                format!("{name} at [{b},{c},{h},{w}] seed {seed}: rel err {err:.2e}")
            })?;
            worst = worst.max(err);
            checks += 1;
        }
    }

    for (label, hybrid) in [
        ("classical", None),
        (
            "hybrid",
            Some(HybridBottleneckConfig {
                n_qubits: 4,
                n_circuits: 1,
                variant: Variant::A,
                layers: 1,
                total_channels: 4,
            }),
        ),
    ] {
        let cfg = UNetConfig {
            in_channels: 2,
            out_channels: 2,
            widths: vec![4, 4],
            bottleneck_channels: 4,
            time_embed_dim: 4,
            hybrid,
        };
        let mut net = UNet::new(cfg, 7).map_err(e2s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // the output convolution starts at zero, which would hide every upstream gradient
        let idx = net
            .names()
            .iter()
            .position(|n| n == "conv_out.w")
            .ok_or("no conv_out.w")?;
        for v in net.params_mut()[idx].data_mut() {
            *v = rng.random_range(-0.2..0.2);
        }
        let x = Tensor::from_fn(&[1, 2, 8, 8], |_| rng.random_range(-1.0..1.0));
        let target = Tensor::from_fn(&[1, 2, 8, 8], |_| rng.random_range(-1.0..1.0));
        let err = finite_diff_check(
            |tape, vars| {
                let xv = tape.constant(x.clone());
                let y = net.forward(tape, vars, xv, Some(&[3.0]), &Backend::Exact, 0)?;
                let tv = tape.constant(target.clone());
                tape.mse(y, tv)
            },
            net.params(),
            1e-4,
        )
        .map_err(e2s)?;
        ensure(err < 1e-3, || {
            format!("{label} UNet end-to-end: rel err {err:.2e}")
        })?;
        worst = worst.max(err);
        checks += 1;
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(120), || {
        format!("took {}", minutes(took))
    })?;
    Ok(format!(
        "{checks} FD checks over 24 random shapes plus two end-to-end UNets, worst rel err {worst:.1e}, {:.1}s",
        took.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- criterion 2

/// Full `2^n × 2^n` matrix of one gate, row-major.
fn dense_gate(n: usize, g: &Gate) -> Vec<C> {
    let dim = 1usize << n;
    let mut m = vec![C::new(0.0, 0.0); dim * dim];
    let theta = g.angle().unwrap_or(0.0);
    let (s, c) = (0.5 * theta).sin_cos();
    let i = C::new(0.0, 1.0);
    let z = C::new(0.0, 0.0);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let u: [[C; 2]; 2] = match g.kind {
        GateKind::H => [
            [C::new(r, 0.0), C::new(r, 0.0)],
            [C::new(r, 0.0), C::new(-r, 0.0)],
        ],
        GateKind::RX => [[C::new(c, 0.0), -i * s], [-i * s, C::new(c, 0.0)]],
        GateKind::RY => [
            [C::new(c, 0.0), C::new(-s, 0.0)],
            [C::new(s, 0.0), C::new(c, 0.0)],
        ],
        GateKind::RZ => [[(-i * 0.5 * theta).exp(), z], [z, (i * 0.5 * theta).exp()]],
        _ => [[z; 2]; 2],
    };
    let [q0, q1] = g.qubits;
    for col in 0..dim {
        match g.kind {
            GateKind::CNOT => {
                let row = if (col >> q0) & 1 == 1 {
                    col ^ (1 << q1)
                } else {
                    col
                };
                m[row * dim + col] = C::new(1.0, 0.0);
            }
            GateKind::CZ => {
                let sign = if (col >> q0) & (col >> q1) & 1 == 1 {
                    -1.0
                } else {
                    1.0
                };
                m[col * dim + col] = C::new(sign, 0.0);
            }
            _ => {
                let bit = (col >> q0) & 1;
                for out in 0..2 {
                    let row = (col & !(1 << q0)) | (out << q0);
                    m[row * dim + col] = u[out][bit];
                }
            }
        }
    }
    m
}

fn dense_amplitudes(c: &Circuit) -> Vec<C> {
    let dim = 1usize << c.n_qubits();
    let mut v = vec![C::new(0.0, 0.0); dim];
    v[0] = C::new(1.0, 0.0);
    for g in c.gates() {
        let m = dense_gate(c.n_qubits(), g);
        v = (0..dim)
            .map(|r| (0..dim).map(|k| m[r * dim + k] * v[k]).sum())
            .collect();
    }
    v
}

fn dense_z(c: &Circuit) -> Vec<f64> {
    let v = dense_amplitudes(c);
    (0..c.n_qubits())
        .map(|q| {
            v.iter()
                .enumerate()
                .map(|(b, a)| {
                    if (b >> q) & 1 == 0 {
                        a.norm_sqr()
                    } else {
                        -a.norm_sqr()
                    }
                })
                .sum()
        })
        .collect()
}

/// Largest `| ‖ψ‖² − 1 |` seen after any gate.
fn norm_drift(c: &Circuit) -> Result<f64, String> {
    let mut s = StateVector::zero(c.n_qubits()).map_err(e2s)?;
    let mut worst: f64 = 0.0;
    for g in c.gates() {
        s.apply(g).map_err(e2s)?;
        worst = worst.max((s.norm_sqr() - 1.0).abs());
    }
    Ok(worst)
}

fn random_circuit(n: usize, gates: usize, rng: &mut ChaCha8Rng) -> Result<Circuit, String> {
    let mut c = Circuit::new(n).map_err(e2s)?;
    for _ in 0..gates {
        let q = rng.random_range(0..n);
        let a = rng.random_range(-TAU..TAU);
        let other = if n > 1 {
            (q + rng.random_range(1..n)) % n
        } else {
            q
        };
        let g = match rng.random_range(0..6) {
            0 => Gate::h(q),
            1 => Gate::rx(q, Param::Fixed(a)),
            2 => Gate::ry(q, Param::Fixed(a)),
            3 => Gate::rz(q, Param::Fixed(a)),
            4 if n > 1 => Gate::cnot(q, other),
            5 if n > 1 => Gate::cz(q, other),
            _ => Gate::ry(q, Param::Fixed(a)),
        };
        c.push(g).map_err(e2s)?;
    }
    Ok(c)
}

fn bound_ansatz(
    n: usize,
    variant: Variant,
    layers: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Circuit, String> {
    let t = ansatz::build(&AnsatzSpec::new(n, variant, layers).map_err(e2s)?).map_err(e2s)?;
    let inputs: Vec<f64> = (0..t.n_input_slots())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let weights: Vec<f64> = (0..t.n_weight_slots())
        .map(|_| rng.random_range(-TAU..TAU))
        .collect();
    t.bind(&inputs, &weights).map_err(e2s)
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut circuits: Vec<(String, Circuit)> = Vec::new();
    for n in 1..=5 {
        for k in 0..8 {
            circuits.push((
                format!("random n={n} #{k}"),
                random_circuit(n, 40, &mut rng)?,
            ));
        }
    }
    for layers in [1, 2] {
        circuits.push((
            format!("A n=4 L={layers}"),
            bound_ansatz(4, Variant::A, layers, &mut rng)?,
        ));
        for v in [Variant::A, Variant::B, Variant::AB] {
            circuits.push((
                format!("{v} n=8 L={layers}"),
                bound_ansatz(8, v, layers, &mut rng)?,
            ));
        }
    }
    let mut amp_err: f64 = 0.0;
    let mut drift: f64 = 0.0;
    for (name, c) in &circuits {
        let exact = qds_core::qsim::simulate(c).map_err(e2s)?;
        let dense = dense_amplitudes(c);
        let a = exact
            .amplitudes()
            .iter()
            .zip(&dense)
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max);
        let z = run(c, &Backend::Exact).map_err(e2s)?;
        let zd = dense_z(c);
        let e = z
            .iter()
            .zip(&zd)
            .map(|(x, y)| (x - y).abs())
            .fold(a, f64::max);
        ensure(e < 1e-10, || format!("{name}: dense oracle gap {e:.2e}"))?;
        amp_err = amp_err.max(e);
        let d = norm_drift(c)?;
        ensure(d < 1e-12, || format!("{name}: norm drift {d:.2e}"))?;
        drift = drift.max(d);
    }

    let mut shift_err: f64 = 0.0;
    let mut shifted = 0;
    for (n, v) in [(4, Variant::A), (8, Variant::AB), (12, Variant::B)] {
        let c = bound_ansatz(n, v, 2, &mut rng)?;
        let d = norm_drift(&c)?;
        ensure(d < 1e-12, || format!("{v} n={n}: norm drift {d:.2e}"))?;
        drift = drift.max(d);
        let eps = 1e-6;
        for (gi, g) in c.gates().iter().enumerate() {
            let Some(theta) = g.angle() else { continue };
            let ps = parameter_shift_grad(&c, &Backend::Exact, gi).map_err(e2s)?;
            let up = run(
                &c.with_angle(gi, theta + eps).map_err(e2s)?,
                &Backend::Exact,
            )
            .map_err(e2s)?;
            let dn = run(
                &c.with_angle(gi, theta - eps).map_err(e2s)?,
                &Backend::Exact,
            )
            .map_err(e2s)?;
            for q in 0..n {
                let fd = (up[q] - dn[q]) / (2.0 * eps);
                let e = (ps[q] - fd).abs();
                ensure(e < 1e-6, || {
                    format!("{v} n={n} gate {gi} qubit {q}: shift {} vs fd {fd}", ps[q])
                })?;
                shift_err = shift_err.max(e);
            }
            shifted += 1;
        }
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(180), || {
        format!("took {}", minutes(took))
    })?;
    Ok(format!(
        "{} circuits vs dense matrices (max gap {amp_err:.1e}); {shifted} shift-rule gradients at n=4,8,12 \
         (max |ps-fd| {shift_err:.1e}); norm drift {drift:.1e}; {:.1}s",
        circuits.len(),
        took.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Check {
    let cases = [
        (12, 3, Variant::B, 1),
        (12, 9, Variant::B, 3),
        (4, 1, Variant::A, 1),
        (4, 3, Variant::A, 3),
    ];
    for (n, want, variant, circuits) in cases {
        let cfg = HybridBottleneckConfig {
            n_qubits: n,
            n_circuits: circuits,
            variant,
            layers: 1,
            total_channels: 16,
        };
        HybridConvVertex::new(cfg).map_err(e2s)?;
        let got = cfg.quantum_channels();
        ensure(got == want, || {
            format!("N={n}, circuits={circuits}: {got} channels, expected {want}")
        })?;
    }
    let bad = HybridBottleneckConfig {
        n_qubits: 4,
        n_circuits: 1,
        variant: Variant::B,
        layers: 1,
        total_channels: 16,
    };
    match HybridConvVertex::new(bad) {
        Err(e @ Error::Config(_))
            if e.to_string()
                .contains("block B requires at least two channels") => {}
        Err(e) => return Err(format!("wrong rejection for variant B at one channel: {e}")),
        Ok(_) => return Err("variant B at one channel was accepted".into()),
    }
    Ok("(12,1)->3, (12,3)->9, (4,1)->1, (4,3)->3; variant B at one channel rejected".into())
}

// ---------------------------------------------------------------- criterion 4

fn crps_brute(members: &[f64], o: f64) -> f64 {
    let m = members.len() as f64;
    let skill = members.iter().map(|x| (x - o).abs()).sum::<f64>() / m;
    let spread: f64 = members
        .iter()
        .flat_map(|a| members.iter().map(move |b| (a - b).abs()))
        .sum();
    skill - spread / (2.0 * m * m)
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let n = rng.random_range(1..50);
        let f: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let o: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let c = crps_ensemble(&[&f], &o).map_err(e2s)?;
        let m = mae(&f, &o).map_err(e2s)?;
        ensure(c == m, || format!("single member: crps {c} != mae {m}"))?;
    }
    let half = crps_ensemble(&[&[0.0], &[1.0]], &[0.0]).map_err(e2s)?;
    let oracle = crps_brute(&[0.0, 1.0], 0.0);
    ensure(oracle == 0.25 && (half - 0.25).abs() < 1e-15, || {
        format!("{{0,1}} vs 0 gave {half}")
    })?;
    let mut min: f64 = f64::INFINITY;
    let mut gap: f64 = 0.0;
    for _ in 0..1000 {
        let m = rng.random_range(1..20);
        let members: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
        let o: f64 = rng.random_range(-6.0..6.0);
        let cols: Vec<[f64; 1]> = members.iter().map(|&x| [x]).collect();
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        let c = crps_ensemble(&refs, &[o]).map_err(e2s)?;
        min = min.min(c);
        gap = gap.max((c - crps_brute(&members, o)).abs());
    }
    ensure(min >= 0.0, || format!("negative CRPS {min}"))?;
    ensure(gap < 1e-12, || format!("brute-force gap {gap:.2e}"))?;
    Ok(format!("M=1 equals MAE exactly; {{0,1}} vs 0 = {half}; 1000 random cases min {min:.3e}, oracle gap {gap:.1e}"))
}

// ---------------------------------------------------------------- criterion 5

/// Neighbourhood exceedance fractions by explicit zero padding.
fn fractions_brute(f: &[f64], h: usize, w: usize, thr: f64, n: usize) -> Vec<f64> {
    let r = n / 2;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in 0..n {
                for dx in 0..n {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < r || xx < r || yy - r >= h || xx - r >= w {
                        continue;
                    }
                    if f[(yy - r) * w + xx - r] >= thr {
                        s += 1.0;
                    }
                }
            }
            out[y * w + x] = s / (n * n) as f64;
        }
    }
    out
}

fn fss_brute(p: &[f64], o: &[f64], h: usize, w: usize, thr: f64, n: usize) -> f64 {
    let pf = fractions_brute(p, h, w, thr, n);
    let of = fractions_brute(o, h, w, thr, n);
    let num: f64 = pf.iter().zip(&of).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = pf.iter().zip(&of).map(|(a, b)| a * a + b * b).sum();
    if den == 0.0 {
        1.0
    } else {
        1.0 - num / den
    }
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let field: Vec<f64> = (0..16 * 16).map(|_| rng.random_range(0.0..1.0)).collect();
    for n in [1, 3, 5, 9] {
        let s = fss(&field, &field, 16, 16, 0.7, n).map_err(e2s)?;
        ensure(s == 1.0, || format!("perfect forecast at n={n}: {s}"))?;
    }
    let mut a = vec![0.0; 16];
    let mut b = vec![0.0; 16];
    a[5] = 1.0;
    b[10] = 1.0;
    let disjoint = fss(&a, &b, 4, 4, 0.5, 1).map_err(e2s)?;
    ensure(disjoint == 0.0, || format!("disjoint at n=1: {disjoint}"))?;
    let mut p = vec![0.0; 16];
    let mut o = vec![0.0; 16];
    p[5] = 1.0;
    o[6] = 1.0;
    let got = fss(&p, &o, 4, 4, 0.5, 3).map_err(e2s)?;
    let want = fss_brute(&p, &o, 4, 4, 0.5, 3);
    ensure((got - want).abs() < 1e-12, || {
        format!("4x4 offset: {got} vs oracle {want}")
    })?;
    Ok(format!(
        "perfect = 1, disjoint = 0, 4x4 one-cell offset {got:.12} = oracle {want:.12}"
    ))
}

// ---------------------------------------------------------------- criterion 6

fn loglog_slope(ks: &[f64], p: &[f64]) -> f64 {
    let xs: Vec<f64> = ks.iter().map(|k| k.ln()).collect();
    let ys: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

fn criterion_6() -> Check {
    let n = 32;
    let tone = Tensor::from_fn(&[2, n, n], |i| {
        if i < n * n {
            (TAU * 5.0 * (i % n) as f64 / n as f64).cos()
        } else {
            0.0
        }
    });
    let s = directional_spectrum(&tone, Direction::Zonal).map_err(e2s)?;
    for (k, p) in s.wavenumbers.iter().zip(&s.power) {
        let want = if *k == 5 { 0.125 } else { 0.0 };
        ensure((p - want).abs() < 1e-10, || {
            format!("pure tone: k={k} power {p}, expected {want}")
        })?;
    }

    let (m, h, w) = (4, 16, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let f = Tensor::from_fn(&[m, 2, h, w], |_| rng.random_range(-3.0..3.0));
    let mut parseval_gap: f64 = 0.0;
    for dir in Direction::ALL {
        let total: f64 = directional_spectrum(&f, dir)
            .map_err(e2s)?
            .power
            .iter()
            .sum();
        let (len, lines) = if dir == Direction::Zonal {
            (w, h)
        } else {
            (h, w)
        };
        let mut want = 0.0;
        for sidx in 0..m {
            for c in 0..2 {
                for line in 0..lines {
                    let x: Vec<f64> = (0..len)
                        .map(|i| {
                            let (y, xx) = if dir == Direction::Zonal {
                                (line, i)
                            } else {
                                (i, line)
                            };
                            f.data()[((sidx * 2 + c) * h + y) * w + xx]
                        })
                        .collect();
                    let mean = x.iter().sum::<f64>() / len as f64;
                    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
                    let nyq: f64 = x
                        .iter()
                        .enumerate()
                        .map(|(j, v)| if j % 2 == 0 { *v } else { -v })
                        .sum();
                    // one-sided bins 1..L/2-1 hold half the variance less the Nyquist share, halved again for KE
                    want += 0.25 * (var - nyq * nyq / (len * len) as f64);
                }
            }
        }
        want /= (lines * m) as f64;
        parseval_gap = parseval_gap.max((total / want - 1.0).abs());
    }
    ensure(parseval_gap < 1e-6, || {
        format!("Parseval relative gap {parseval_gap:.2e}")
    })?;

    let mut slopes = Vec::new();
    for gamma in [5.0 / 3.0, 3.0] {
        let mut data = Vec::new();
        for seed in 0..100u64 {
            data.extend(gaussian_random_field(32, 32, gamma, 500 + 2 * seed));
            data.extend(gaussian_random_field(32, 32, gamma, 501 + 2 * seed));
        }
        let fields = Tensor::new(&[100, 2, 32, 32], data).map_err(e2s)?;
        for dir in Direction::ALL {
            let s = directional_spectrum(&fields, dir).map_err(e2s)?;
            let ks: Vec<f64> = (2..=8).map(|k| k as f64).collect();
            let slope = loglog_slope(&ks, &s.power[1..8]);
            ensure((slope + gamma).abs() < 0.3, || {
                format!("gamma {gamma:.3} {}: slope {slope:.3}", dir.name())
            })?;
            slopes.push(format!("{:.2}", slope));
        }
    }
    Ok(format!(
        "tone peak exact to 1e-10; Parseval gap {parseval_gap:.1e}; GRF slopes {} for gamma 5/3, 3",
        slopes.join("/")
    ))
}

// ---------------------------------------------------------- pipeline fixture

struct Pipeline {
    root: PathBuf,
    training_time: Duration,
    total_time: Duration,
}

impl Pipeline {
    fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn qds(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_qds"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(e2s)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "qds {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

const SEED: &str = "7";
const NOISE_LEVELS: &str = "0,1e-4,1e-3,1e-2";
const COMPARE_SHOTS: &str = "8";

fn build_pipeline(root: &Path) -> Result<Pipeline, String> {
    fs::create_dir_all(root).map_err(e2s)?;
    let p = |n: &str| root.join(n);
    let start = Instant::now();
    let stage = |label: &str, args: &[&str]| -> Result<(), String> {
        let t = Instant::now();
        qds(args)?;
        eprintln!("  {label}: {:.0}s", t.elapsed().as_secs_f64());
        Ok(())
    };
    stage(
        "gen-data",
        &[
            "gen-data",
            "--out",
            s(&p("data")),
            "--n-train",
            "256",
            "--n-val",
            "100",
            "--n-ood",
            "100",
            "--seed",
            SEED,
        ],
    )?;
    stage(
        "regression",
        &[
            "train",
            "--stage",
            "regression",
            "--data",
            s(&p("data")),
            "--out",
            s(&p("reg")),
            "--steps",
            "500",
            "--batch",
            "16",
            "--seed",
            SEED,
        ],
    )?;
    stage(
        "classical diffusion",
        &[
            "train",
            "--stage",
            "diffusion",
            "--data",
            s(&p("data")),
            "--regression",
            s(&p("reg")),
            "--out",
            s(&p("classical")),
            "--steps",
            "300",
            "--batch",
            "16",
            "--diffusion.steps",
            "64",
            "--seed",
            SEED,
        ],
    )?;
    stage(
        "hybrid diffusion",
        &[
            "train",
            "--stage",
            "diffusion",
            "--data",
            s(&p("data")),
            "--regression",
            s(&p("reg")),
            "--out",
            s(&p("hybrid")),
            "--steps",
            "300",
            "--batch",
            "8",
            "--diffusion.steps",
            "64",
            "--hybrid.enabled",
            "true",
            "--ansatz.n_qubits",
            "12",
            "--ansatz.variant",
            "B",
            "--hybrid.n_circuits",
            "1",
            "--seed",
            SEED,
        ],
    )?;
    let training_time = start.elapsed();
    for split in ["val", "ood"] {
        stage(
            &format!("evaluate {split}"),
            &[
                "evaluate",
                "--data",
                s(&p("data")),
                "--split",
                split,
                "--members",
                "4",
                "--out",
                s(&p(&format!("eval_{split}"))),
                "--seed",
                SEED,
                s(&p("classical")),
                s(&p("hybrid")),
            ],
        )?;
    }
    stage(
        "diagnostics",
        &[
            "diagnostics",
            "--out",
            s(&p("diagnostics")),
            "--seed",
            SEED,
            s(&p("eval_val")),
        ],
    )?;
    stage(
        "compare-backends",
        &[
            "compare-backends",
            "--run",
            s(&p("hybrid")),
            "--data",
            s(&p("data")),
            "--times",
            "20",
            "--members",
            "16",
            "--p-dep",
            NOISE_LEVELS,
            "--p-ro",
            "0",
            "--shots",
            COMPARE_SHOTS,
            "--out",
            s(&p("compare")),
            "--seed",
            SEED,
        ],
    )?;
    Ok(Pipeline {
        root: root.to_path_buf(),
        training_time,
        total_time: start.elapsed(),
    })
}

fn read(p: &Path) -> Result<String, String> {
    fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn json(p: &Path) -> Result<Value, String> {
    serde_json::from_str(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))
}

fn csv_rows(p: &Path) -> Result<Vec<Vec<String>>, String> {
    Ok(read(p)?
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

// ---------------------------------------------------------------- criterion 7

/// Drop of the mean of the last 25 logged losses relative to the first step.
fn loss_drop(run: &Path) -> Result<(f64, f64, f64, usize), String> {
    let losses: Vec<f64> = csv_rows(&run.join("loss.csv"))?
        .iter()
        .map(|r| r[1].parse::<f64>().map_err(e2s))
        .collect::<Result<_, _>>()?;
    ensure(losses.len() >= 25, || {
        format!("{}: only {} steps", run.display(), losses.len())
    })?;
    let first = losses[0];
    let tail = losses[losses.len() - 25..].iter().sum::<f64>() / 25.0;
    Ok((1.0 - tail / first, first, tail, losses.len()))
}

fn criterion_7(p: &Pipeline) -> Check {
    let mut parts = Vec::new();
    for (name, need, max_steps) in [
        ("reg", 0.5, 500),
        ("classical", 0.3, 300),
        ("hybrid", 0.3, 300),
    ] {
        let (drop, first, tail, steps) = loss_drop(&p.p(name))?;
        ensure(steps <= max_steps, || format!("{name}: {steps} steps"))?;
        ensure(drop >= need, || {
            format!(
                "{name}: loss {first:.3} -> {tail:.3} ({:.0}% drop, need {:.0}%)",
                100.0 * drop,
                100.0 * need
            )
        })?;
        parts.push(format!(
            "{name} {first:.3}->{tail:.3} (-{:.0}%, {steps} steps)",
            100.0 * drop
        ));
    }
    ensure(p.total_time < Duration::from_secs(45 * 60), || {
        format!("pipeline took {}", minutes(p.total_time))
    })?;
    Ok(format!(
        "{}; training {} , whole pipeline {}",
        parts.join(", "),
        minutes(p.training_time),
        minutes(p.total_time)
    ))
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8(p: &Pipeline) -> Check {
    let doc = json(&p.p("diagnostics/diagnostics.json"))?;
    let rows = doc["regression_below_ensemble_upper_third"]
        .as_array()
        .ok_or("missing upper-third summary")?;
    ensure(rows.len() == 2, || {
        format!("expected two diffusion sources, found {}", rows.len())
    })?;
    let mut parts = Vec::new();
    for r in rows {
        let src = r["source"].as_str().unwrap_or("?");
        for dir in ["zonal", "meridional"] {
            let f = r[dir].as_f64().ok_or("missing fraction")?;
            ensure(f >= 0.8, || {
                format!(
                    "{src} {dir}: regression below ensemble at {:.0}% of upper-third k",
                    100.0 * f
                )
            })?;
            parts.push(format!("{src} {dir} {:.0}%", 100.0 * f));
        }
    }
    Ok(format!(
        "regression underpowered vs ensemble at upper-third k: {}",
        parts.join(", ")
    ))
}

// ---------------------------------------------------------------- criterion 9

fn is_mean_pm_std(cell: &str) -> bool {
    let Some((m, s)) = cell.trim().split_once(" ± ") else {
        return false;
    };
    let four =
        |x: &str| x.parse::<f64>().is_ok() && x.split_once('.').is_some_and(|(_, d)| d.len() == 4);
    four(m) && four(s)
}

fn is_win_cell(cell: &str, total: usize) -> bool {
    let cell = cell.trim();
    let Some((count, rest)) = cell.split_once('/') else {
        return false;
    };
    let Some(pct) = rest
        .strip_prefix(&format!("{total} ("))
        .and_then(|r| r.strip_suffix("%)"))
    else {
        return false;
    };
    count.parse::<usize>().is_ok_and(|c| c <= total)
        && pct.split_once('.').is_some_and(|(_, d)| d.len() == 1)
}

fn check_table(dir: &Path, split: &str) -> Result<String, String> {
    let report = json(&dir.join("report.json"))?;
    ensure(report["split"] == split, || {
        format!("report.json split is {}", report["split"])
    })?;
    let wins = csv_rows(&dir.join("wins.csv"))?;
    ensure(wins.len() == 1, || format!("{} win rows", wins.len()))?;
    let total: usize = wins[0][3].parse().map_err(e2s)?;
    ensure(total == 400, || format!("win denominator {total}"))?;
    let md = read(&dir.join("comparison.md"))?;
    let rows: Vec<Vec<&str>> = md
        .lines()
        .filter(|l| l.starts_with('|'))
        .map(|l| l.trim_matches('|').split('|').map(str::trim).collect())
        .collect();
    ensure(rows.len() == 4, || {
        format!("table has {} lines", rows.len())
    })?;
    let header = [
        "Model",
        "u10m MAE",
        "u10m CRPS",
        "v10m MAE",
        "v10m CRPS",
        "Total Wins",
    ];
    ensure(rows[0] == header, || format!("header {:?}", rows[0]))?;
    for row in &rows[2..] {
        ensure(row[1..5].iter().all(|c| is_mean_pm_std(c)), || {
            format!("cells {:?}", row)
        })?;
    }
    ensure(rows[2][5] == "-" && is_win_cell(rows[3][5], 400), || {
        format!("wins cells {:?}", (rows[2][5], rows[3][5]))
    })?;
    for label in ["classical", "hybrid"] {
        let m = csv_rows(&dir.join(label).join("metrics.csv"))?;
        ensure(m.len() == 400, || {
            format!("{label}: {} metric rows", m.len())
        })?;
    }
    Ok(format!(
        "{split} {} vs {}: {}",
        rows[2][0], rows[3][0], rows[3][5]
    ))
}

fn criterion_9(p: &Pipeline) -> Check {
    let val = check_table(&p.p("eval_val"), "val")?;
    let ood = check_table(&p.p("eval_ood"), "ood")?;
    let data = json(&p.p("data/ood/meta.json"))?;
    let val_meta = json(&p.p("data/val/meta.json"))?;
    ensure(data["spec"] != val_meta["spec"], || {
        "ood split uses the in-distribution generator".into()
    })?;
    Ok(format!("{val}; {ood}"))
}

// --------------------------------------------------------------- criterion 10

fn criterion_10(p: &Pipeline) -> Check {
    let dir = p.p("compare");
    let sweep = csv_rows(&dir.join("sweep.csv"))?;
    let num = |r: &[String], i: usize| r[i].parse::<f64>().map_err(e2s);
    ensure(sweep.len() == 4, || format!("{} sweep rows", sweep.len()))?;
    let zero = csv_rows(&dir.join("delta_pdep_0e0.csv"))?;
    ensure(zero.len() == 20 * 4, || {
        format!("{} delta rows at p=0", zero.len())
    })?;
    ensure(zero.iter().all(|r| r[3].parse::<f64>() == Ok(0.0)), || {
        "p_dep=p_ro=0 gives nonzero deltas".into()
    })?;
    let times: std::collections::BTreeSet<&str> = zero.iter().map(|r| r[0].as_str()).collect();
    ensure(times.len() == 20, || {
        format!("{} distinct timesteps", times.len())
    })?;
    let mut maxes = Vec::new();
    for r in &sweep[1..] {
        maxes.push((num(r, 0)?, num(r, 3)?, num(r, 5)?));
    }
    for pair in maxes.windows(2) {
        let (p0, m0, s0) = pair[0];
        let (p1, m1, s1) = pair[1];
        let tol = 3.0 * (s0 * s0 + s1 * s1).sqrt();
        ensure(m1 >= m0 - tol, || {
            format!("max|Δ| {m1:.3e} at p={p1:e} below {m0:.3e} at p={p0:e} by more than {tol:.3e}")
        })?;
    }
    let listing: Vec<String> = maxes
        .iter()
        .map(|(p, m, _)| format!("p={p:e}: {m:.2e}"))
        .collect();
    Ok(format!(
        "K=20, M=16, {COMPARE_SHOTS} shots; p=0 deltas all zero; max|Δ| {}",
        listing.join(", ")
    ))
}

// --------------------------------------------------------------- criterion 11

fn files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(e2s)? {
            let path = e.map_err(e2s)?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path
                .file_name()
                .is_some_and(|n| n != "resolved_config.json")
            {
                let rel = path
                    .strip_prefix(dir)
                    .map_err(e2s)?
                    .to_string_lossy()
                    .into_owned();
                out.push((rel, fs::read(&path).map_err(e2s)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn criterion_11(p: &Pipeline) -> Check {
    let root = p.p("determinism");
    let d = |n: &str| root.join(n);
    let _ = fs::remove_dir_all(&root);
    let steps: Vec<(&str, Vec<String>)> = vec![
        (
            "gen-data",
            vec![
                "gen-data",
                "--out",
                s(&d("data")),
                "--n-train",
                "32",
                "--n-val",
                "6",
                "--n-ood",
                "4",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "train regression",
            [
                "train",
                "--stage",
                "regression",
                "--data",
                s(&d("data")),
                "--out",
                s(&d("reg")),
                "--steps",
                "6",
                "--batch",
                "4",
                "--train.checkpoint_every",
                "4",
            ]
            .map(String::from)
            .to_vec(),
        ),
        (
            "train hybrid",
            [
                "train",
                "--stage",
                "diffusion",
                "--data",
                s(&d("data")),
                "--regression",
                s(&d("reg")),
                "--out",
                s(&d("hybrid")),
                "--steps",
                "4",
                "--batch",
                "4",
                "--diffusion.steps",
                "8",
                "--hybrid.enabled",
                "true",
                "--ansatz.n_qubits",
                "12",
            ]
            .map(String::from)
            .to_vec(),
        ),
        (
            "evaluate",
            [
                "evaluate",
                "--data",
                s(&d("data")),
                "--members",
                "2",
                "--limit",
                "3",
                "--out",
                s(&d("eval")),
                s(&d("reg")),
                s(&d("hybrid")),
            ]
            .map(String::from)
            .to_vec(),
        ),
        (
            "diagnostics",
            ["diagnostics", "--out", s(&d("diag")), s(&d("eval"))]
                .map(String::from)
                .to_vec(),
        ),
        (
            "compare-backends",
            [
                "compare-backends",
                "--run",
                s(&d("hybrid")),
                "--data",
                s(&d("data")),
                "--times",
                "2",
                "--members",
                "2",
                "--p-dep",
                "0,1e-2",
                "--shots",
                "4",
                "--out",
                s(&d("compare")),
            ]
            .map(String::from)
            .to_vec(),
        ),
    ];
    let mut replayed = Vec::new();
    let mut n_csv = 0;
    for (name, args) in &steps {
        let mut args: Vec<&str> = args.iter().map(String::as_str).collect();
        args.extend(["--seed", SEED]);
        qds(&args)?;
        let out = PathBuf::from(args[args.iter().position(|a| *a == "--out").unwrap() + 1]);
        let replay = out.with_extension("replay");
        qds(&[
            "rerun",
            s(&out.join("resolved_config.json")),
            "--out",
            s(&replay),
        ])?;
        let (a, b) = (files(&out)?, files(&replay)?);
        ensure(a.len() == b.len(), || {
            format!(
                "{name}: replay wrote {} files, original {}",
                b.len(),
                a.len()
            )
        })?;
        for ((fa, ba), (fb, bb)) in a.iter().zip(&b) {
            ensure(fa == fb && ba == bb, || {
                format!("{name}: {fa} differs on replay")
            })?;
        }
        n_csv += a.iter().filter(|(f, _)| f.ends_with(".csv")).count();
        replayed.push(*name);
    }
    ensure(n_csv > 0, || "no CSV outputs were compared".into())?;
    Ok(format!(
        "{n_csv} CSVs (and every other output) identical on replay of {}",
        replayed.join(", ")
    ))
}

// ------------------------------------------------------------------- driver

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let titles = [
        "autodiff finite-difference soundness",
        "quantum oracle equivalence",
        "bottleneck channel arithmetic",
        "CRPS properties",
        "FSS properties",
        "spectrum correctness",
        "desk-scale training",
        "regression underpowered at high wavenumbers",
        "evaluation tables and win counts",
        "backend comparison protocol",
        "determinism on replay",
    ];
    let unit: [fn() -> Check; 6] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
    ];
    let mut failed = 0;
    let mut report = |i: usize, r: Check| {
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag}: {} - {detail}", i + 1, titles[i]);
    };
    for (i, f) in unit.iter().enumerate() {
        report(i, guarded(f));
    }

    let (_tmp, root) = match std::env::var_os("QDS_ACCEPTANCE_DIR") {
        Some(d) => (None, PathBuf::from(d)),
        None => {
            let t = tempfile::TempDir::new().expect("temporary directory");
            let r = t.path().to_path_buf();
            (Some(t), r)
        }
    };
    eprintln!("acceptance pipeline in {}", root.display());
    let pipeline = match catch_unwind(AssertUnwindSafe(|| build_pipeline(&root))) {
        Ok(r) => r,
        Err(_) => Err("pipeline panicked".into()),
    };
    let staged: [fn(&Pipeline) -> Check; 5] = [
        criterion_7,
        criterion_8,
        criterion_9,
        criterion_10,
        criterion_11,
    ];
    for (k, f) in staged.iter().enumerate() {
        let r = match &pipeline {
            Ok(p) => guarded(|| f(p)),
            Err(e) => Err(format!("pipeline did not complete: {e}")),
        };
        report(6 + k, r);
    }
    println!(
        "{} of {} criteria passed",
        titles.len() - failed,
        titles.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
