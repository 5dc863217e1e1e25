//! Monte Carlo trajectory emulation of local depolarizing gate noise and
//! symmetric readout bit flips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::circuit::Circuit;
use super::state::{Pauli, StateVector};
use crate::error::{Error, Result};
use crate::rng::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Probability of a random Pauli on each touched qubit after each gate.
    pub p_dep: f64,
    /// Probability that a measured bit is flipped.
    pub p_ro: f64,
    pub shots: usize,
    pub seed: u64,
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_dep", self.p_dep), ("p_ro", self.p_ro)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.shots == 0 {
            return Err(Error::config("shots must be at least 1"));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

struct Fault {
    gate: usize,
    qubit: usize,
    pauli: Pauli,
}

struct Shot {
    faults: Vec<Fault>,
    flips: Vec<bool>,
}

/// Draw one trajectory's fault pattern.
///
/// Every shot consumes the same number of uniforms regardless of the
/// probabilities, so fault sets at a smaller `p_dep` are subsets of those at
/// a larger one for the same seed.
fn sample_shot(circuit: &Circuit, noise: &NoiseParams, shot: usize) -> Shot {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(noise.seed, shot as u64));
    let mut faults = Vec::new();
    for (gi, g) in circuit.gates().iter().enumerate() {
        for &q in g.touched() {
            let u: f64 = rng.random();
            let w: f64 = rng.random();
            if u < noise.p_dep {
                let pauli = match (w * 3.0) as usize {
                    0 => Pauli::X,
                    1 => Pauli::Y,
                    _ => Pauli::Z,
                };
                faults.push(Fault {
                    gate: gi,
                    qubit: q,
                    pauli,
                });
            }
        }
    }
    let flips = (0..circuit.n_qubits())
        .map(|_| rng.random::<f64>() < noise.p_ro)
        .collect();
    Shot { faults, flips }
}

/// Mean of per-shot `⟨Z_i⟩` (sign-flipped on readout errors) over noisy
/// trajectories.
pub(crate) fn run_noisy(circuit: &Circuit, noise: &NoiseParams) -> Result<Vec<f64>> {
    noise.validate()?;
    let n = circuit.n_qubits();
    let shots: Vec<Shot> = (0..noise.shots)
        .map(|s| sample_shot(circuit, noise, s))
        .collect();

    // Fault-free shots share the ideal expectations; only their readout
    // sign pattern differs, so they reduce to a signed count per qubit.
    let mut clean_sign = vec![0i64; n];
    let mut faulty: Vec<&Shot> = Vec::new();
    for shot in &shots {
        if shot.faults.is_empty() {
            for (c, &f) in clean_sign.iter_mut().zip(&shot.flips) {
                *c += if f { -1 } else { 1 };
            }
        } else {
            faulty.push(shot);
        }
    }
    faulty.sort_by_key(|s| s.faults[0].gate);

    let mut acc = vec![0.0; n];
    let mut state = StateVector::zero(n)?;
    let gates = circuit.gates();
    let mut next = 0;
    for (gi, g) in gates.iter().enumerate() {
        state.apply(g)?;
        while next < faulty.len() && faulty[next].faults[0].gate == gi {
            let shot = faulty[next];
            let mut branch = state.clone();
            let mut fi = 0;
            for (gj, gate) in gates.iter().enumerate().skip(gi) {
                if gj > gi {
                    branch.apply(gate)?;
                }
                while fi < shot.faults.len() && shot.faults[fi].gate == gj {
                    branch.apply_pauli(shot.faults[fi].qubit, shot.faults[fi].pauli);
                    fi += 1;
                }
            }
            for ((a, e), &f) in acc.iter_mut().zip(branch.expectations_z()).zip(&shot.flips) {
                *a += if f { -e } else { e };
            }
            next += 1;
        }
    }
    let ideal = state.expectations_z();
    let total = noise.shots as f64;
    Ok(ideal
        .iter()
        .zip(&clean_sign)
        .zip(&acc)
        .map(|((e, &c), a)| e * (c as f64 / total) + a / total)
        .collect())
}
