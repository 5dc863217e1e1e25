//! HQConv-style circuit templates.
//!
//! Qubits come in groups of four, one group per input channel of a 2×2
//! feature map: qubit `4·c + p` carries pixel `p` of channel `c`.
//!
//! * Encoding: `H` then `RZ(input)` on every qubit.
//! * Block A (within a channel): `RY(w)` on each group qubit, a CZ ring
//!   `(q0,q1) (q1,q2) (q2,q3) (q3,q0)`, then `RZ(w)` on each group qubit.
//! * Block B (across channels): for each pixel offset `p`, a CNOT chain from
//!   group `g` to group `g+1`, then `RY(w)` on each qubit at that offset.
//!
//! The gate content of both blocks is a fixed convention realizing the
//! intra-channel/cross-channel split; it is not a gate-exact copy of any
//! published circuit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qsim::{Circuit, Gate, GateKind, Param};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "A")]
    A,
    #[serde(rename = "B")]
    B,
    #[serde(rename = "A+B")]
    AB,
}

impl Variant {
    pub fn has_a(self) -> bool {
        matches!(self, Variant::A | Variant::AB)
    }

    pub fn has_b(self) -> bool {
        matches!(self, Variant::B | Variant::AB)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::AB => "A+B",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "A+B" | "AB" => Ok(Variant::AB),
            other => Err(Error::config(format!(
                "unknown ansatz variant {other:?} (expected A, B or A+B)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnsatzSpec {
    pub n_qubits: usize,
    pub variant: Variant,
    pub layers: usize,
}

impl AnsatzSpec {
    pub fn new(n_qubits: usize, variant: Variant, layers: usize) -> Result<Self> {
        let spec = Self {
            n_qubits,
            variant,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn channels(&self) -> usize {
        self.n_qubits / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_qubits == 0 || !self.n_qubits.is_multiple_of(4) {
            return Err(Error::config(format!(
                "ansatz needs a positive multiple of 4 qubits, got {}",
                self.n_qubits
            )));
        }
        if self.n_qubits > crate::qsim::MAX_QUBITS {
            return Err(Error::config(format!(
                "ansatz with {} qubits exceeds the simulator limit",
                self.n_qubits
            )));
        }
        if self.layers == 0 {
            return Err(Error::config("ansatz needs at least one layer"));
        }
        if self.variant.has_b() && self.channels() < 2 {
            return Err(Error::config(format!(
                "variant {}: block B requires at least two channels; \
                 {} qubits encode one channel, use variant A",
                self.variant, self.n_qubits
            )));
        }
        Ok(())
    }
}

/// Number of trainable angles in the template for `spec`.
pub fn param_count(spec: &AnsatzSpec) -> usize {
    let a = if spec.variant.has_a() {
        8 * spec.channels()
    } else {
        0
    };
    let b = if spec.variant.has_b() {
        spec.n_qubits
    } else {
        0
    };
    spec.layers * (a + b)
}

/// Built circuit template with slot bookkeeping.
#[derive(Clone, Debug)]
pub struct CircuitTemplate {
    spec: AnsatzSpec,
    circuit: Circuit,
    input_gates: Vec<usize>,
    weight_gates: Vec<usize>,
}

impl CircuitTemplate {
    pub fn spec(&self) -> &AnsatzSpec {
        &self.spec
    }

    pub fn circuit(&self) -> &Circuit {
        &self.circuit
    }

    pub fn n_input_slots(&self) -> usize {
        self.input_gates.len()
    }

    pub fn n_weight_slots(&self) -> usize {
        self.weight_gates.len()
    }

    /// Gate index of input slot `i`.
    pub fn input_gates(&self) -> &[usize] {
        &self.input_gates
    }

    /// Gate index of weight slot `j`.
    pub fn weight_gates(&self) -> &[usize] {
        &self.weight_gates
    }

    pub fn bind(&self, inputs: &[f64], weights: &[f64]) -> Result<Circuit> {
        self.circuit.bind(inputs, weights)
    }
}

pub fn build(spec: &AnsatzSpec) -> Result<CircuitTemplate> {
    spec.validate()?;
    let n = spec.n_qubits;
    let groups = spec.channels();
    let mut c = Circuit::new(n)?;
    for q in 0..n {
        c.push(Gate::h(q))?;
        c.push(Gate::rz(q, Param::Input(q)))?;
    }
    let mut w = 0usize;
    let mut next = || {
        w += 1;
        Param::Weight(w - 1)
    };
    for _ in 0..spec.layers {
        if spec.variant.has_a() {
            for g in 0..groups {
                let base = 4 * g;
                for p in 0..4 {
                    c.push(Gate::ry(base + p, next()))?;
                }
                for p in 0..4 {
                    c.push(Gate::cz(base + p, base + (p + 1) % 4))?;
                }
                for p in 0..4 {
                    c.push(Gate::rz(base + p, next()))?;
                }
            }
        }
        if spec.variant.has_b() {
            for p in 0..4 {
                for g in 0..groups - 1 {
                    c.push(Gate::cnot(4 * g + p, 4 * (g + 1) + p))?;
                }
                for g in 0..groups {
                    c.push(Gate::ry(4 * g + p, next()))?;
                }
            }
        }
    }
    let input_gates = c.input_gates();
    let weight_gates = c.weight_gates();
    debug_assert_eq!(weight_gates.len(), param_count(spec));
    Ok(CircuitTemplate {
        spec: *spec,
        circuit: c,
        input_gates,
        weight_gates,
    })
}

/// Count of gates of one kind, for structural checks.
pub fn count_gates(template: &CircuitTemplate, kind: GateKind) -> usize {
    template
        .circuit()
        .gates()
        .iter()
        .filter(|g| g.kind == kind)
        .count()
}
