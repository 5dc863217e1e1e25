mod compare;
mod diagnostics;
mod evaluate;
mod train;

pub use compare::compare_backends;
pub use diagnostics::diagnostics;
pub use evaluate::evaluate;
pub use train::train;

use qds_core::data::build_splits;
use qds_core::Result;

use crate::config::RunConfig;
use crate::runio::prepare_out;

pub fn gen_data(mut cfg: RunConfig) -> Result<()> {
    let (id, ood) = (cfg.field_spec(), cfg.ood_spec());
    id.validate()?;
    ood.validate()?;
    let d = &cfg.data;
    let splits = build_splits(d.n_train, d.n_val, d.n_ood, &id, &ood, cfg.seed)?;
    let out = prepare_out(&mut cfg)?;
    splits.write(&out)?;
    log::info!(
        "wrote {} train / {} val / {} ood samples to {}",
        splits.train.len(),
        splits.val.len(),
        splits.ood.len(),
        out.display()
    );
    Ok(())
}
