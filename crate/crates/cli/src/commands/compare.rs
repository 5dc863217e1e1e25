use std::fs;

use qds_core::data::Split;
use qds_core::metrics::backend_delta;
use qds_core::qsim::{Backend, NoiseParams};
use qds_core::{Error, Result};

use super::evaluate::{forecast, score};
use crate::config::RunConfig;
use crate::runio::{fmt_f64, load_run, load_split, prepare_out};
use crate::svg::{LineChart, Scale, Series};

pub const SWEEP_CSV: &str = "sweep.csv";

/// `k` indices spread evenly over `0..n`.
pub fn evenly_spaced(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| i * n / k).collect()
}

pub fn delta_file(p_dep: f64) -> String {
    format!("delta_pdep_{p_dep:e}.csv")
}

pub fn compare_backends(mut cfg: RunConfig) -> Result<()> {
    let c = cfg.compare.clone();
    let run_dir = c
        .run
        .clone()
        .ok_or_else(|| Error::Config("compare-backends needs --run RUN_DIR".into()))?;
    let run = load_run(&run_dir)?;
    if !run
        .pipeline
        .diffusion
        .as_ref()
        .is_some_and(|d| d.has_quantum_layer())
    {
        return Err(Error::Config(format!(
            "{} has no quantum layer to perturb",
            run_dir.display()
        )));
    }
    if c.members == 0 || c.times == 0 {
        return Err(Error::Config(
            "compare.members and compare.times must be positive".into(),
        ));
    }
    if c.p_dep.is_empty() {
        return Err(Error::Config("compare.p_dep lists no noise levels".into()));
    }
    let noise: Vec<NoiseParams> = c
        .p_dep
        .iter()
        .map(|&p| {
            let n = NoiseParams {
                p_dep: p,
                p_ro: c.p_ro,
                shots: c.shots,
                seed: cfg.seed,
            };
            n.validate().map(|_| n)
        })
        .collect::<Result<_>>()?;
    let data = load_split(&cfg, Split::Val)?;
    if c.times > data.len() {
        return Err(Error::Config(format!(
            "{} verification times requested from {} validation samples",
            c.times,
            data.len()
        )));
    }
    let out = prepare_out(&mut cfg)?;
    let ids = evenly_spaced(data.len(), c.times);

    log::info!("exact backend: {} times × {} members", ids.len(), c.members);
    let exact = score(
        &data,
        &forecast(
            &run.pipeline,
            &data,
            &ids,
            c.members,
            cfg.seed,
            &Backend::Exact,
        )?,
    )?;
    fs::write(out.join("metrics_exact.csv"), exact.to_csv())?;

    let mut sweep =
        String::from("p_dep,p_ro,shots,max_abs_delta,mean_abs_delta,sd_timestep_max_abs_delta\n");
    let mut series = Vec::new();
    for p in noise {
        log::info!(
            "noisy backend p_dep={:e} p_ro={:e} shots={}",
            p.p_dep,
            p.p_ro,
            p.shots
        );
        let fc = forecast(
            &run.pipeline,
            &data,
            &ids,
            c.members,
            cfg.seed,
            &Backend::Noisy(p),
        )?;
        let noisy = score(&data, &fc)?;
        fs::write(
            out.join(format!("metrics_pdep_{:e}.csv", p.p_dep)),
            noisy.to_csv(),
        )?;
        let delta = backend_delta(&noisy, &exact)?;
        fs::write(out.join(delta_file(p.p_dep)), delta.to_csv())?;
        let per_t = delta.per_timestep_max_abs();
        let k = per_t.len() as f64;
        let mean_t = per_t.iter().map(|x| x.1).sum::<f64>() / k;
        let sd_t = (per_t
            .iter()
            .map(|x| (x.1 - mean_t) * (x.1 - mean_t))
            .sum::<f64>()
            / k)
            .sqrt();
        let mean_abs =
            delta.records.iter().map(|r| r.delta.abs()).sum::<f64>() / delta.records.len() as f64;
        sweep.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt_f64(p.p_dep),
            fmt_f64(p.p_ro),
            p.shots,
            fmt_f64(delta.max_abs()),
            fmt_f64(mean_abs),
            fmt_f64(sd_t)
        ));
        series.push(Series {
            label: format!("p_dep={:e}", p.p_dep),
            points: per_t.iter().map(|&(t, d)| (t as f64, d)).collect(),
        });
    }
    fs::write(out.join(SWEEP_CSV), &sweep)?;
    let chart = LineChart {
        title: "Noisy minus exact: per-timestep max |Δ|".into(),
        x_label: "validation time index".into(),
        y_label: "max |Δ| over variables and metrics".into(),
        x_scale: Scale::Linear,
        y_scale: Scale::Linear,
        series,
    };
    fs::write(out.join("deltas.svg"), chart.render())?;
    print!("{sweep}");
    Ok(())
}
