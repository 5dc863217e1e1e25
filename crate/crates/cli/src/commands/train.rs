use std::fs;
use std::path::Path;

use qds_core::checkpoint::Checkpoint;
use qds_core::corrdiff::{
    diffusion_train_step_seeded, make_schedule, regression_train_step, Trainer, TrainingSet,
};
use qds_core::data::{Dataset, Split};
use qds_core::rng::derive_seed;
use qds_core::unet::UNet;
use qds_core::{Error, Result};
use serde_json::json;

use crate::config::{RunConfig, Stage};
use crate::runio::{data_dir, fmt_f64, model_meta, prepare_out, MODEL_CKPT, REGRESSION_CKPT};

pub const LOSS_CSV: &str = "loss.csv";
const LOSS_HEADER: &str = "step,loss";

fn stage_tag(stage: Stage) -> u64 {
    match stage {
        Stage::Regression => 0x7265_6772,
        Stage::Diffusion => 0x6469_6666,
    }
}

fn load_regression(run: &Path) -> Result<Checkpoint> {
    let path = run.join(MODEL_CKPT);
    if !path.exists() {
        return Err(Error::Config(format!(
            "diffusion stage needs a trained regression checkpoint; none at {}",
            path.display()
        )));
    }
    let ck = Checkpoint::load(&path)?;
    if model_meta(&ck)?.stage != "regression" {
        return Err(Error::Config(format!(
            "{} is not a regression checkpoint",
            path.display()
        )));
    }
    Ok(ck)
}

fn previous_losses(dir: &Path, upto: u64) -> Result<Vec<String>> {
    let Ok(text) = fs::read_to_string(dir.join(LOSS_CSV)) else {
        return Ok(Vec::new());
    };
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= upto)
        })
        .map(str::to_string)
        .collect())
}

fn write_losses(dir: &Path, rows: &[String]) -> Result<()> {
    let mut s = String::from(LOSS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    let tmp = dir.join(format!("{LOSS_CSV}.tmp"));
    fs::write(&tmp, s)?;
    fs::rename(tmp, dir.join(LOSS_CSV))?;
    Ok(())
}

pub fn train(mut cfg: RunConfig, resume: bool) -> Result<()> {
    let stage = cfg.train.stage;
    if cfg.train.batch == 0 || cfg.train.checkpoint_every == 0 {
        return Err(Error::Config(
            "train.batch and train.checkpoint_every must be positive".into(),
        ));
    }
    let train_split = Dataset::read(&data_dir(&cfg)?.join(Split::Train.name()))?;
    let stats = train_split.stats;
    let data = TrainingSet::normalized(&train_split.hi, &train_split.lo, &stats)?;

    let regression = match stage {
        Stage::Regression => None,
        Stage::Diffusion => {
            let run = cfg.train.regression_run.clone().ok_or_else(|| {
                Error::Config(
                    "diffusion stage needs a regression checkpoint (--regression RUN_DIR)".into(),
                )
            })?;
            let ck = load_regression(&run)?;
            Some((UNet::from_checkpoint(&ck)?, ck))
        }
    };
    let model_cfg = match stage {
        Stage::Regression => cfg.regression_unet(),
        Stage::Diffusion => cfg.diffusion_unet(),
    };
    model_cfg.validate()?;
    let size = train_split.hi.shape()[2];
    if model_cfg.input_size() != size {
        return Err(Error::Config(format!(
            "network expects {0}×{0} fields but the dataset holds {size}×{size}",
            model_cfg.input_size()
        )));
    }
    let sched = match stage {
        Stage::Diffusion => Some(make_schedule(cfg.diffusion.steps, cfg.diffusion.schedule)?),
        Stage::Regression => None,
    };

    let out = prepare_out(&mut cfg)?;
    let ckpt_path = out.join(MODEL_CKPT);
    let seed = derive_seed(cfg.seed, &[stage_tag(stage)]);
    let (mut trainer, mut rows) = if resume && ckpt_path.exists() {
        let t = Trainer::from_checkpoint(&Checkpoint::load(&ckpt_path)?)?;
        let rows = previous_losses(&out, t.step)?;
        log::info!("resuming {} at step {}", out.display(), t.step);
        (t, rows)
    } else {
        (
            Trainer::new(UNet::new(model_cfg, seed)?, cfg.adam()),
            Vec::new(),
        )
    };
    if let Some((_, ck)) = &regression {
        ck.save(&out.join(REGRESSION_CKPT))?;
    }
    let meta = json!({
        "stage": match stage { Stage::Regression => "regression", Stage::Diffusion => "diffusion" },
        "stats": stats,
        "schedule_steps": sched.as_ref().map(|s| s.steps()),
        "schedule_kind": sched.as_ref().map(|s| s.kind()),
    });

    let total = cfg.train.steps;
    while trainer.step < total {
        let loss = match (&regression, &sched) {
            (Some((reg, _)), Some(s)) => {
                diffusion_train_step_seeded(&mut trainer, &data, cfg.train.batch, reg, s, seed)?
            }
            _ => regression_train_step(&mut trainer, &data, cfg.train.batch, seed)?,
        };
        rows.push(format!("{},{}", trainer.step, fmt_f64(loss)));
        if trainer.step % 25 == 0 || trainer.step == 1 {
            log::info!("step {}/{total} loss {loss:.5}", trainer.step);
        }
        if trainer.step % cfg.train.checkpoint_every == 0 || trainer.step == total {
            trainer.to_checkpoint(meta.clone())?.save(&ckpt_path)?;
            write_losses(&out, &rows)?;
        }
    }
    if !ckpt_path.exists() {
        trainer.to_checkpoint(meta)?.save(&ckpt_path)?;
        write_losses(&out, &rows)?;
    }
    log::info!("finished {} steps in {}", trainer.step, out.display());
    Ok(())
}
