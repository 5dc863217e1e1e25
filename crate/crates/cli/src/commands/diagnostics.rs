use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use qds_core::data::{quantile, windspeed, Dataset};
use qds_core::metrics::{
    directional_spectrum, fss_mean, joint_histogram, speed_log_pdf, Direction, SpectrumCurve,
};
use qds_core::tensor::Tensor;
use qds_core::{Error, Result};
use serde_json::json;

use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::runio::{fmt_f64, load_split, prepare_out, StoredEnsemble, ENSEMBLE_META};
use crate::svg::{Heatmap, LineChart, Scale, Series};

pub const SPECTRA_CSV: &str = "spectra.csv";
pub const SPEED_PDF_CSV: &str = "speed_pdf.csv";
pub const JOINT_CSV: &str = "joint.csv";
pub const FSS_CSV: &str = "fss.csv";
pub const DIAGNOSTICS_JSON: &str = "diagnostics.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Truth,
    Regression,
    Ensemble,
}

struct Source {
    name: String,
    kind: Kind,
    /// Pooled `[K, 2, H, W]` fields.
    fields: Tensor,
    /// Samples per truth timestep (members for ensembles, 1 otherwise).
    per_time: usize,
    /// Name of the regression source this ensemble was built on.
    regression: Option<String>,
}

/// Ensemble subdirectories of an evaluation directory, sorted by name.
fn ensemble_dirs(eval_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(eval_dir)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", eval_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(ENSEMBLE_META).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn gather(data: &Dataset, ids: &[usize]) -> Result<Tensor> {
    let items: Vec<Tensor> = ids
        .iter()
        .map(|&i| {
            let x = data.sample(i).0;
            let s = [&[1], x.shape()].concat();
            x.reshape(&s)
        })
        .collect::<Result<_>>()?;
    Tensor::stack_batch(&items)
}

fn collect_sources(cfg: &RunConfig) -> Result<Vec<Source>> {
    let mut ensembles = Vec::new();
    let mut data_cfg = None;
    for input in &cfg.diagnostics.inputs {
        let eval_cfg = RunConfig::resolve(Some(&input.join(RESOLVED_CONFIG)), &[])?;
        let dirs = ensemble_dirs(input)?;
        if dirs.is_empty() {
            return Err(Error::Config(format!(
                "{} holds no persisted ensembles; run evaluate first",
                input.display()
            )));
        }
        for d in dirs {
            ensembles.push(StoredEnsemble::read(&d)?);
        }
        data_cfg.get_or_insert(eval_cfg);
    }
    let (data, ids) = match (&data_cfg, ensembles.first()) {
        (Some(ec), Some(first)) => {
            let ids = first.meta.time_ids.clone();
            for e in &ensembles {
                if e.meta.time_ids != ids || e.meta.split != first.meta.split {
                    return Err(Error::Contract(format!(
                        "ensemble {} covers different timesteps than {}",
                        e.meta.label, first.meta.label
                    )));
                }
            }
            (load_split(ec, first.meta.split)?, ids)
        }
        _ => {
            let d = load_split(cfg, cfg.eval.split)?;
            let n = cfg.eval.limit.map_or(d.len(), |l| l.min(d.len()));
            (d, (0..n).collect())
        }
    };
    if ids.is_empty() {
        return Err(Error::Config("no timesteps to diagnose".into()));
    }
    let mut sources = vec![Source {
        name: "truth".into(),
        kind: Kind::Truth,
        fields: gather(&data, &ids)?,
        per_time: 1,
        regression: None,
    }];
    for e in ensembles {
        let reg_name = match sources
            .iter()
            .find(|s| s.kind == Kind::Regression && s.fields == e.regression)
        {
            Some(s) => s.name.clone(),
            None => {
                let n_reg = sources
                    .iter()
                    .filter(|s| s.kind == Kind::Regression)
                    .count();
                let name = if n_reg == 0 {
                    "regression".to_string()
                } else {
                    format!("regression-{}", n_reg + 1)
                };
                sources.push(Source {
                    name: name.clone(),
                    kind: Kind::Regression,
                    fields: e.regression.clone(),
                    per_time: 1,
                    regression: None,
                });
                name
            }
        };
        if e.meta.stage == "regression" {
            continue;
        }
        let s = e.members.shape().to_vec();
        sources.push(Source {
            name: e.meta.label.clone(),
            kind: Kind::Ensemble,
            fields: e.members.reshape(&[s[0] * s[1], s[2], s[3], s[4]])?,
            per_time: e.meta.members,
            regression: Some(reg_name),
        });
    }
    Ok(sources)
}

/// Fraction of wavenumbers in the upper third of `1..=N/2−1` where `low`
/// carries strictly less power than `high`.
pub fn upper_third_fraction(low: &SpectrumCurve, high: &SpectrumCurve) -> f64 {
    let kmax = low.wavenumbers.len();
    let start = (2 * kmax).div_ceil(3);
    let idx: Vec<usize> = (start..kmax).collect();
    let below = idx
        .iter()
        .filter(|&&i| low.power[i] < high.power[i])
        .count();
    below as f64 / idx.len() as f64
}

pub fn diagnostics(mut cfg: RunConfig) -> Result<()> {
    let d = cfg.diagnostics.clone();
    if d.pdf_bins < 2 || d.joint_bins < 2 {
        return Err(Error::Config("diagnostics bins must be at least 2".into()));
    }
    let sources = collect_sources(&cfg)?;
    let out = prepare_out(&mut cfg)?;
    let shape = sources[0].fields.shape().to_vec();
    let (h, w) = (shape[2], shape[3]);
    for &n in &d.neighborhoods {
        if n % 2 == 0 || n > h.min(w) {
            return Err(Error::Config(format!(
                "FSS neighbourhood {n} must be odd and ≤ {}",
                h.min(w)
            )));
        }
    }

    let mut spectra_csv = String::from("source,direction,k,power\n");
    let mut curves = Vec::new();
    for s in &sources {
        for dir in Direction::ALL {
            let c = directional_spectrum(&s.fields, dir)?;
            for (k, p) in c.wavenumbers.iter().zip(&c.power) {
                let _ = writeln!(spectra_csv, "{},{},{k},{}", s.name, dir.name(), fmt_f64(*p));
            }
            curves.push((s.name.clone(), c));
        }
    }
    fs::write(out.join(SPECTRA_CSV), spectra_csv)?;

    let speeds: Vec<Vec<f64>> = sources
        .iter()
        .map(|s| windspeed(&s.fields))
        .collect::<Result<_>>()?;
    let vmax = speeds.iter().flatten().copied().fold(0.0, f64::max);
    let mut pdf_csv = String::from("source,bin_lo,bin_hi,log10_density\n");
    let mut pdf_series = Vec::new();
    for (s, sp) in sources.iter().zip(&speeds) {
        let pdf = speed_log_pdf(sp, d.pdf_bins, vmax)?;
        for (i, v) in pdf.log10_density.iter().enumerate() {
            let _ = writeln!(
                pdf_csv,
                "{},{},{},{}",
                s.name,
                fmt_f64(pdf.edges[i]),
                fmt_f64(pdf.edges[i + 1]),
                fmt_f64(*v)
            );
        }
        pdf_series.push(Series {
            label: s.name.clone(),
            points: pdf
                .centers()
                .into_iter()
                .zip(pdf.log10_density.iter().copied())
                .collect(),
        });
    }
    fs::write(out.join(SPEED_PDF_CSV), pdf_csv)?;

    let mut joint_csv = String::from("source,u_center,v_center,density\n");
    let mut mi = serde_json::Map::new();
    let mut joints = Vec::new();
    for s in &sources {
        let j = joint_histogram(&s.fields, d.joint_bins, d.joint_range)?;
        let c = j.centers();
        for (idx, dens) in j.density().iter().enumerate() {
            let _ = writeln!(
                joint_csv,
                "{},{},{},{}",
                s.name,
                fmt_f64(c[idx / j.bins]),
                fmt_f64(c[idx % j.bins]),
                fmt_f64(*dens)
            );
        }
        mi.insert(s.name.clone(), json!(j.mutual_information()));
        joints.push((s.name.clone(), j));
    }
    fs::write(out.join(JOINT_CSV), joint_csv)?;

    let threshold = quantile(&speeds[0], d.quantile);
    let plane = h * w;
    let truth_fields: Vec<Vec<f64>> = speeds[0].chunks(plane).map(<[f64]>::to_vec).collect();
    let mut fss_csv = String::from("source,neighborhood,threshold,fss\n");
    let mut fss_series = Vec::new();
    for (s, sp) in sources.iter().zip(&speeds).skip(1) {
        let preds: Vec<Vec<f64>> = sp.chunks(plane).map(<[f64]>::to_vec).collect();
        let truths: Vec<Vec<f64>> = (0..preds.len())
            .map(|i| truth_fields[i / s.per_time].clone())
            .collect();
        let mut pts = Vec::new();
        for &n in &d.neighborhoods {
            let f = fss_mean(&preds, &truths, h, w, threshold, n)?;
            let _ = writeln!(
                fss_csv,
                "{},{n},{},{}",
                s.name,
                fmt_f64(threshold),
                fmt_f64(f)
            );
            pts.push((n as f64, f));
        }
        fss_series.push(Series {
            label: s.name.clone(),
            points: pts,
        });
    }
    fs::write(out.join(FSS_CSV), fss_csv)?;

    let mut ordering = Vec::new();
    for s in sources.iter().filter(|s| s.kind == Kind::Ensemble) {
        let reg = s.regression.as_deref().unwrap_or("regression");
        let mut entry = json!({ "source": s.name, "regression": reg });
        for dir in Direction::ALL {
            let find = |name: &str| {
                curves
                    .iter()
                    .find(|(n, c)| n == name && c.direction == dir)
                    .map(|(_, c)| c)
            };
            if let (Some(r), Some(e)) = (find(reg), find(&s.name)) {
                entry[dir.name()] = json!(upper_third_fraction(r, e));
            }
        }
        ordering.push(entry);
    }
    let summary = json!({
        "sources": sources.iter().map(|s| &s.name).collect::<Vec<_>>(),
        "timesteps": sources[0].fields.shape()[0],
        "fss_quantile": d.quantile,
        "fss_threshold": threshold,
        "neighborhoods": d.neighborhoods,
        "mutual_information": mi,
        "regression_below_ensemble_upper_third": ordering,
    });
    fs::write(
        out.join(DIAGNOSTICS_JSON),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;

    if d.svg {
        for dir in Direction::ALL {
            let chart = LineChart {
                title: format!("{} kinetic-energy spectrum", dir.name()),
                x_label: "wavenumber k".into(),
                y_label: "power".into(),
                x_scale: Scale::Log,
                y_scale: Scale::Log,
                series: curves
                    .iter()
                    .filter(|(_, c)| c.direction == dir)
                    .map(|(n, c)| Series {
                        label: n.clone(),
                        points: c
                            .wavenumbers
                            .iter()
                            .map(|&k| k as f64)
                            .zip(c.power.iter().copied())
                            .collect(),
                    })
                    .collect(),
            };
            fs::write(
                out.join(format!("spectrum_{}.svg", dir.name())),
                chart.render(),
            )?;
        }
        let pdf_chart = LineChart {
            title: "wind-speed log-PDF".into(),
            x_label: "speed (m/s)".into(),
            y_label: "log10 density".into(),
            x_scale: Scale::Linear,
            y_scale: Scale::Linear,
            series: pdf_series,
        };
        fs::write(out.join("speed_pdf.svg"), pdf_chart.render())?;
        if !fss_series.is_empty() {
            let fss_chart = LineChart {
                title: format!("FSS at the p{} truth speed", d.quantile * 100.0),
                x_label: "neighbourhood (grid points)".into(),
                y_label: "FSS".into(),
                x_scale: Scale::Linear,
                y_scale: Scale::Linear,
                series: fss_series,
            };
            fs::write(out.join("fss.svg"), fss_chart.render())?;
        }
        for (name, j) in &joints {
            let map = Heatmap {
                title: format!("joint (u, v) density: {name}"),
                x_label: "v (m/s)".into(),
                y_label: "u (m/s)".into(),
                x_range: (-j.range, j.range),
                y_range: (-j.range, j.range),
                rows: j.bins,
                cols: j.bins,
                values: j
                    .density()
                    .iter()
                    .map(|&v| {
                        if v > 0.0 {
                            v.log10()
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect(),
            };
            fs::write(out.join(format!("joint_{name}.svg")), map.render())?;
        }
    }
    log::info!(
        "diagnostics for {} sources written to {}",
        sources.len(),
        out.display()
    );
    Ok(())
}
