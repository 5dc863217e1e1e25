//! Exact statevector simulation with Pauli-Z readout, parameter-shift
//! gradients and a trajectory noise emulator.

mod circuit;
mod noise;
mod state;

pub use circuit::{Circuit, Gate, GateKind, Param, MAX_QUBITS};
pub use noise::NoiseParams;
pub use state::{apply_gate, expectations_z, StateVector};

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Backend {
    Exact,
    Noisy(NoiseParams),
}

impl Backend {
    pub fn is_exact(&self) -> bool {
        matches!(self, Backend::Exact)
    }

    /// Same backend with the noise seed replaced; exact stays exact.
    pub fn reseeded(&self, seed: u64) -> Backend {
        match self {
            Backend::Exact => Backend::Exact,
            Backend::Noisy(p) => Backend::Noisy(p.with_seed(seed)),
        }
    }
}

/// Evolve a fully bound circuit from `|0…0⟩`.
pub fn simulate(circuit: &Circuit) -> Result<StateVector> {
    let mut state = StateVector::zero(circuit.n_qubits())?;
    for g in circuit.gates() {
        state.apply(g)?;
    }
    Ok(state)
}

/// Per-qubit `⟨Z⟩` of a bound circuit on the chosen backend.
pub fn run(circuit: &Circuit, backend: &Backend) -> Result<Vec<f64>> {
    if !circuit.is_bound() {
        return Err(Error::contract("run: circuit has unbound parameter slots"));
    }
    match backend {
        Backend::Exact => Ok(simulate(circuit)?.expectations_z()),
        Backend::Noisy(p) => noise::run_noisy(circuit, p),
    }
}

/// `∂⟨Z_i⟩/∂θ` for the rotation at `gate_index`, for every qubit `i`.
pub fn parameter_shift_grad(
    circuit: &Circuit,
    backend: &Backend,
    gate_index: usize,
) -> Result<Vec<f64>> {
    let g = circuit.gates().get(gate_index).ok_or_else(|| {
        Error::contract(format!("parameter shift: no gate at index {gate_index}"))
    })?;
    let theta = g.angle().ok_or_else(|| {
        Error::contract(format!(
            "parameter shift: gate {gate_index} ({:?}) is not a bound rotation",
            g.kind
        ))
    })?;
    let plus = run(&circuit.with_angle(gate_index, theta + FRAC_PI_2)?, backend)?;
    let minus = run(&circuit.with_angle(gate_index, theta - FRAC_PI_2)?, backend)?;
    Ok(plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| 0.5 * (p - m))
        .collect())
}
