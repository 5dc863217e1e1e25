use std::collections::HashSet;
use std::fs;
use std::path::Path;

use qds_core::corrdiff::{EnsembleForecast, Pipeline};
use qds_core::data::Dataset;
use qds_core::metrics::{
    comparison_table, score_ensemble, win_counts, Metric, MetricsReport, Variable,
};
use qds_core::qsim::Backend;
use qds_core::tensor::Tensor;
use qds_core::{Error, Result};
use rayon::prelude::*;
use serde_json::json;

use crate::config::RunConfig;
use crate::runio::{
    load_run, load_split, prepare_out, EnsembleMeta, StoredEnsemble, ENSEMBLE_FORMAT_VERSION,
};

pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const COMPARISON_MD: &str = "comparison.md";
pub const WINS_CSV: &str = "wins.csv";
pub const REPORT_JSON: &str = "report.json";

/// Ensembles for `time_ids` of `data`, in order.
pub fn forecast(
    pipeline: &Pipeline,
    data: &Dataset,
    time_ids: &[usize],
    members: usize,
    seed: u64,
    backend: &Backend,
) -> Result<Vec<EnsembleForecast>> {
    let inputs: Vec<(usize, Tensor)> = time_ids.iter().map(|&i| (i, data.sample(i).1)).collect();
    pipeline.downscale_many(&inputs, members, seed, backend)
}

/// Scores forecasts against the matching truth fields of `data`.
pub fn score(data: &Dataset, forecasts: &[EnsembleForecast]) -> Result<MetricsReport> {
    let per: Vec<[qds_core::metrics::TimestepScore; 2]> = forecasts
        .par_iter()
        .map(|f| score_ensemble(f.time_id, &f.members, &data.sample(f.time_id).0))
        .collect::<Result<_>>()?;
    MetricsReport::new(per.into_iter().flatten().collect())
}

fn stack(forecasts: &[EnsembleForecast]) -> Result<(Tensor, Tensor)> {
    let members: Vec<Tensor> = forecasts.iter().map(|f| f.members.clone()).collect();
    let regs: Vec<Tensor> = forecasts
        .iter()
        .map(|f| {
            let s = [&[1], f.regression.shape()].concat();
            f.regression.clone().reshape(&s)
        })
        .collect::<Result<_>>()?;
    let m = forecasts[0].n_members();
    let mut members = Tensor::stack_batch(&members)?;
    let s = members.shape().to_vec();
    members = members.reshape(&[forecasts.len(), m, s[1], s[2], s[3]])?;
    Ok((members, Tensor::stack_batch(&regs)?))
}

pub fn evaluate(mut cfg: RunConfig) -> Result<()> {
    let members = cfg.eval.members;
    if members < 1 {
        return Err(Error::Config("--members must be at least 1".into()));
    }
    if cfg.eval.runs.is_empty() {
        return Err(Error::Config(
            "evaluate needs at least one run directory".into(),
        ));
    }
    let split = cfg.eval.split;
    let data = load_split(&cfg, split)?;
    let n = cfg.eval.limit.map_or(data.len(), |l| l.min(data.len()));
    if n == 0 {
        return Err(Error::Config(format!(
            "{} split has no samples to evaluate",
            split.name()
        )));
    }
    let backend = cfg.backend()?;
    let mut runs = Vec::new();
    let mut seen = HashSet::new();
    for dir in &cfg.eval.runs {
        let mut run = load_run(dir)?;
        let base = run.label.clone();
        let mut k = 2;
        while !seen.insert(run.label.clone()) {
            run.label = format!("{base}-{k}");
            k += 1;
        }
        runs.push((dir.clone(), run));
    }
    let out = prepare_out(&mut cfg)?;
    let time_ids: Vec<usize> = (0..n).collect();

    let mut reports = Vec::new();
    for (dir, run) in &runs {
        log::info!("{}: sampling {n} timesteps × {members} members", run.label);
        let forecasts = forecast(&run.pipeline, &data, &time_ids, members, cfg.seed, &backend)?;
        let report = score(&data, &forecasts)?;
        let label_dir = out.join(&run.label);
        let (m, r) = stack(&forecasts)?;
        let (h, w) = (m.shape()[3], m.shape()[4]);
        StoredEnsemble {
            meta: EnsembleMeta {
                format_version: ENSEMBLE_FORMAT_VERSION,
                label: run.label.clone(),
                run: dir.clone(),
                stage: run.stage.clone(),
                hybrid: run
                    .pipeline
                    .diffusion
                    .as_ref()
                    .is_some_and(|d| d.has_quantum_layer()),
                split,
                members,
                time_ids: time_ids.clone(),
                height: h,
                width: w,
            },
            members: m,
            regression: r,
        }
        .write(&label_dir)?;
        fs::write(label_dir.join(METRICS_CSV), report.to_csv())?;
        fs::write(
            label_dir.join(SUMMARY_JSON),
            serde_json::to_string_pretty(&report.summary_json())? + "\n",
        )?;
        reports.push((run.label.clone(), report));
    }
    write_tables(&out, &cfg, &reports)
}

fn write_tables(out: &Path, cfg: &RunConfig, reports: &[(String, MetricsReport)]) -> Result<()> {
    let named: Vec<(&str, &MetricsReport)> = reports.iter().map(|(l, r)| (l.as_str(), r)).collect();
    let table = comparison_table(&named)?;
    let (base_label, base) = &reports[0];
    let title = format!(
        "Split: {} ({} timesteps × {} variables × {} metrics, {} members); wins counted against {}\n\n",
        cfg.eval.split.name(),
        base.timesteps().len(),
        Variable::ALL.len(),
        Metric::ALL.len(),
        cfg.eval.members,
        base_label
    );
    fs::write(out.join(COMPARISON_MD), format!("{title}{table}"))?;
    println!("{title}{table}");

    let mut wins_csv = String::from("baseline,challenger,wins,total,percent\n");
    let mut wins_json = Vec::new();
    for (label, report) in &reports[1..] {
        let w = win_counts(base, report)?;
        wins_csv.push_str(&format!(
            "{base_label},{label},{},{},{:.1}\n",
            w.wins,
            w.total,
            w.percent()
        ));
        wins_json.push(json!({
            "baseline": base_label,
            "challenger": label,
            "wins": w.wins,
            "total": w.total,
            "percent": w.percent(),
            "formatted": w.to_string(),
        }));
    }
    if reports.len() > 1 {
        fs::write(out.join(WINS_CSV), wins_csv)?;
    }
    let models: Vec<_> = reports
        .iter()
        .map(|(l, r)| {
            let mut s = r.summary_json();
            s["label"] = json!(l);
            let mut formatted = serde_json::Map::new();
            for v in Variable::ALL {
                for m in Metric::ALL {
                    if let Some(agg) = r.aggregate(v, m) {
                        formatted
                            .insert(format!("{}_{}", v.name(), m.name()), json!(agg.to_string()));
                    }
                }
            }
            s["formatted"] = formatted.into();
            s
        })
        .collect();
    let doc = json!({
        "split": cfg.eval.split.name(),
        "members": cfg.eval.members,
        "models": models,
        "wins": wins_json,
    });
    fs::write(
        out.join(REPORT_JSON),
        serde_json::to_string_pretty(&doc)? + "\n",
    )?;
    Ok(())
}
