use num_complex::Complex64;

use super::circuit::{Gate, GateKind, MAX_QUBITS};
use crate::error::{Error, Result};

/// Amplitudes of an `n`-qubit register, qubit 0 being the least significant
/// bit of the basis index.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    amps: Vec<Complex64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Pauli {
    X,
    Y,
    Z,
}

impl StateVector {
    /// `|0…0⟩`.
    pub fn zero(n_qubits: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(Error::config(format!(
                "register size {n_qubits} outside 1..={MAX_QUBITS}"
            )));
        }
        let mut amps = vec![Complex64::new(0.0, 0.0); 1 << n_qubits];
        amps[0] = Complex64::new(1.0, 0.0);
        Ok(Self { n_qubits, amps })
    }

    pub fn from_amplitudes(n_qubits: usize, amps: Vec<Complex64>) -> Result<Self> {
        if amps.len() != 1 << n_qubits {
            return Err(Error::config(format!(
                "{} amplitudes for {n_qubits} qubits",
                amps.len()
            )));
        }
        Ok(Self { n_qubits, amps })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Apply a bound gate in place.
    pub fn apply(&mut self, gate: &Gate) -> Result<()> {
        gate.validate(self.n_qubits)?;
        let [q0, q1] = gate.qubits;
        match gate.kind {
            GateKind::H => {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                self.pairs(q0, |a, b| {
                    let (x, y) = (*a, *b);
                    *a = (x + y) * s;
                    *b = (x - y) * s;
                });
            }
            GateKind::RX | GateKind::RY | GateKind::RZ => {
                let theta = gate.angle().ok_or_else(|| {
                    Error::contract(format!("{:?} on qubit {q0} has an unbound slot", gate.kind))
                })?;
                let (s, c) = (0.5 * theta).sin_cos();
                match gate.kind {
                    GateKind::RX => {
                        let mis = Complex64::new(0.0, -s);
                        self.pairs(q0, |a, b| {
                            let (x, y) = (*a, *b);
                            *a = x * c + y * mis;
                            *b = x * mis + y * c;
                        });
                    }
                    GateKind::RY => self.pairs(q0, |a, b| {
                        let (x, y) = (*a, *b);
                        *a = x * c - y * s;
                        *b = x * s + y * c;
                    }),
                    _ => {
                        let p0 = Complex64::new(c, -s);
                        let p1 = Complex64::new(c, s);
                        self.pairs(q0, |a, b| {
                            *a *= p0;
                            *b *= p1;
                        });
                    }
                }
            }
            GateKind::CNOT => {
                let (cm, tm) = (1usize << q0, 1usize << q1);
                for i in 0..self.amps.len() {
                    if i & cm != 0 && i & tm == 0 {
                        self.amps.swap(i, i | tm);
                    }
                }
            }
            GateKind::CZ => {
                let m = (1usize << q0) | (1usize << q1);
                for (i, a) in self.amps.iter_mut().enumerate() {
                    if i & m == m {
                        *a = -*a;
                    }
                }
            }
        }
        Ok(())
    }

    pub(crate) fn apply_pauli(&mut self, q: usize, p: Pauli) {
        match p {
            Pauli::X => self.pairs(q, std::mem::swap),
            Pauli::Y => self.pairs(q, |a, b| {
                let (x, y) = (*a, *b);
                *a = Complex64::new(y.im, -y.re);
                *b = Complex64::new(-x.im, x.re);
            }),
            Pauli::Z => self.pairs(q, |_, b| *b = -*b),
        }
    }

    /// Visit amplitude pairs differing only in bit `q`.
    fn pairs(&mut self, q: usize, mut f: impl FnMut(&mut Complex64, &mut Complex64)) {
        let stride = 1usize << q;
        for chunk in self.amps.chunks_mut(2 * stride) {
            let (lo, hi) = chunk.split_at_mut(stride);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                f(a, b);
            }
        }
    }

    /// `⟨Z_i⟩` for every qubit.
    pub fn expectations_z(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_qubits];
        for (idx, a) in self.amps.iter().enumerate() {
            let p = a.norm_sqr();
            if p == 0.0 {
                continue;
            }
            for (q, e) in out.iter_mut().enumerate() {
                if idx >> q & 1 == 0 {
                    *e += p;
                } else {
                    *e -= p;
                }
            }
        }
        out
    }
}

/// Functional form of [`StateVector::apply`].
pub fn apply_gate(mut state: StateVector, gate: &Gate) -> Result<StateVector> {
    state.apply(gate)?;
    Ok(state)
}

pub fn expectations_z(state: &StateVector) -> Vec<f64> {
    state.expectations_z()
}
