use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest register the simulator accepts.
pub const MAX_QUBITS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateKind {
    H,
    RX,
    RY,
    RZ,
    CNOT,
    CZ,
}

impl GateKind {
    pub fn is_rotation(self) -> bool {
        matches!(self, GateKind::RX | GateKind::RY | GateKind::RZ)
    }

    pub fn arity(self) -> usize {
        match self {
            GateKind::CNOT | GateKind::CZ => 2,
            _ => 1,
        }
    }
}

/// Where a rotation angle comes from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Param {
    /// Non-parameterized gate.
    None,
    Fixed(f64),
    /// Index into the trainable weight vector.
    Weight(usize),
    /// Index into the encoded input feature vector.
    Input(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gate {
    pub kind: GateKind,
    /// `[target, _]` for one-qubit gates, `[control, target]` for CNOT,
    /// the two (symmetric) qubits for CZ.
    pub qubits: [usize; 2],
    pub param: Param,
}

impl Gate {
    pub fn h(q: usize) -> Self {
        Self {
            kind: GateKind::H,
            qubits: [q, q],
            param: Param::None,
        }
    }

    pub fn rx(q: usize, p: Param) -> Self {
        Self {
            kind: GateKind::RX,
            qubits: [q, q],
            param: p,
        }
    }

    pub fn ry(q: usize, p: Param) -> Self {
        Self {
            kind: GateKind::RY,
            qubits: [q, q],
            param: p,
        }
    }

    pub fn rz(q: usize, p: Param) -> Self {
        Self {
            kind: GateKind::RZ,
            qubits: [q, q],
            param: p,
        }
    }

    pub fn cnot(control: usize, target: usize) -> Self {
        Self {
            kind: GateKind::CNOT,
            qubits: [control, target],
            param: Param::None,
        }
    }

    pub fn cz(a: usize, b: usize) -> Self {
        Self {
            kind: GateKind::CZ,
            qubits: [a, b],
            param: Param::None,
        }
    }

    /// Qubits the gate acts on.
    pub fn touched(&self) -> &[usize] {
        &self.qubits[..self.kind.arity()]
    }

    /// Bound rotation angle.
    pub fn angle(&self) -> Option<f64> {
        match self.param {
            Param::Fixed(a) => Some(a),
            _ => None,
        }
    }

    pub(crate) fn validate(&self, n_qubits: usize) -> Result<()> {
        for &q in self.touched() {
            if q >= n_qubits {
                return Err(Error::config(format!(
                    "{:?} on qubit {q} but register has {n_qubits} qubits",
                    self.kind
                )));
            }
        }
        if self.kind.arity() == 2 && self.qubits[0] == self.qubits[1] {
            return Err(Error::config(format!(
                "{:?} needs two distinct qubits, got {:?}",
                self.kind, self.qubits
            )));
        }
        match (self.kind.is_rotation(), self.param) {
            (true, Param::None) => Err(Error::config(format!(
                "{:?} gate without an angle slot",
                self.kind
            ))),
            (false, p) if p != Param::None => Err(Error::config(format!(
                "{:?} gate cannot carry a parameter",
                self.kind
            ))),
            _ => Ok(()),
        }
    }
}

/// Ordered gate list on a fixed register. Serves as both template (with
/// weight/input slots) and bound circuit (all angles fixed).
#[derive(Clone, Debug, PartialEq)]
pub struct Circuit {
    n_qubits: usize,
    gates: Vec<Gate>,
}

impl Circuit {
    pub fn new(n_qubits: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(Error::config(format!(
                "register size {n_qubits} outside 1..={MAX_QUBITS}"
            )));
        }
        Ok(Self {
            n_qubits,
            gates: Vec::new(),
        })
    }

    pub fn push(&mut self, gate: Gate) -> Result<()> {
        gate.validate(self.n_qubits)?;
        self.gates.push(gate);
        Ok(())
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn is_bound(&self) -> bool {
        self.gates
            .iter()
            .all(|g| !matches!(g.param, Param::Weight(_) | Param::Input(_)))
    }

    /// Gate indices holding weight slots, indexed by slot.
    pub fn weight_gates(&self) -> Vec<usize> {
        self.slot_gates(|p| match p {
            Param::Weight(i) => Some(i),
            _ => None,
        })
    }

    /// Gate indices holding input slots, indexed by slot.
    pub fn input_gates(&self) -> Vec<usize> {
        self.slot_gates(|p| match p {
            Param::Input(i) => Some(i),
            _ => None,
        })
    }

    fn slot_gates(&self, pick: impl Fn(Param) -> Option<usize>) -> Vec<usize> {
        let mut slots: Vec<(usize, usize)> = self
            .gates
            .iter()
            .enumerate()
            .filter_map(|(gi, g)| pick(g.param).map(|s| (s, gi)))
            .collect();
        slots.sort_unstable();
        slots.into_iter().map(|(_, gi)| gi).collect()
    }

    /// Substitute inputs and weights for every slot.
    pub fn bind(&self, inputs: &[f64], weights: &[f64]) -> Result<Circuit> {
        let n_in = self.input_gates().len();
        let n_w = self.weight_gates().len();
        if inputs.len() != n_in || weights.len() != n_w {
            return Err(Error::contract(format!(
                "bind: expected {n_in} inputs and {n_w} weights, got {} and {}",
                inputs.len(),
                weights.len()
            )));
        }
        let gates = self
            .gates
            .iter()
            .map(|g| {
                let param = match g.param {
                    Param::Weight(i) => Param::Fixed(weights[i]),
                    Param::Input(i) => Param::Fixed(inputs[i]),
                    p => p,
                };
                Gate { param, ..*g }
            })
            .collect();
        Ok(Circuit {
            n_qubits: self.n_qubits,
            gates,
        })
    }

    /// Copy with the angle of one bound rotation replaced.
    pub fn with_angle(&self, gate_index: usize, angle: f64) -> Result<Circuit> {
        let g = self.gates.get(gate_index).ok_or_else(|| {
            Error::contract(format!(
                "gate index {gate_index} out of range ({} gates)",
                self.gates.len()
            ))
        })?;
        if !g.kind.is_rotation() {
            return Err(Error::contract(format!(
                "gate {gate_index} is {:?}, not a rotation",
                g.kind
            )));
        }
        if g.angle().is_none() {
            return Err(Error::contract(format!("gate {gate_index} is unbound")));
        }
        let mut out = self.clone();
        out.gates[gate_index].param = Param::Fixed(angle);
        Ok(out)
    }
}
