use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `f` builds the scalar on the given tape from leaves for `params`.
/// Returns the largest `|analytic − fd| / (|fd| + 1e-8)` over all coordinates.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::contract("finite_diff_check: f must return a scalar"));
        }
        let s = v.data()[0];
        if !s.is_finite() {
            return Err(Error::numeric(format!("finite_diff_check: f returned {s}")));
        }
        Ok(s)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).data()[0].is_finite() {
        return Err(Error::numeric("finite_diff_check: non-finite loss"));
    }
    tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; params[pi].numel()]);
        for j in 0..params[pi].numel() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * eps);
            let err = (analytic[j] - fd).abs() / (fd.abs() + 1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
