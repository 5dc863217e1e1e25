//! Test-only oracles, independent of the production code paths they check.

use num_complex::Complex64;

use crate::qsim::{Circuit, GateKind};

type C = Complex64;

/// Full `2^n × 2^n` matrix of one gate, row-major.
pub fn dense_gate(n: usize, kind: GateKind, qubits: [usize; 2], angle: f64) -> Vec<C> {
    let dim = 1usize << n;
    let mut m = vec![C::new(0.0, 0.0); dim * dim];
    let (s, c) = (0.5 * angle).sin_cos();
    let i = C::new(0.0, 1.0);
    let one: [[C; 2]; 2] = match kind {
        GateKind::H => {
            let h = std::f64::consts::FRAC_1_SQRT_2;
            [
                [C::new(h, 0.0), C::new(h, 0.0)],
                [C::new(h, 0.0), C::new(-h, 0.0)],
            ]
        }
        GateKind::RX => [[C::new(c, 0.0), -i * s], [-i * s, C::new(c, 0.0)]],
        GateKind::RY => [
            [C::new(c, 0.0), C::new(-s, 0.0)],
            [C::new(s, 0.0), C::new(c, 0.0)],
        ],
        GateKind::RZ => [
            [(-i * 0.5 * angle).exp(), C::new(0.0, 0.0)],
            [C::new(0.0, 0.0), (i * 0.5 * angle).exp()],
        ],
        _ => [[C::new(0.0, 0.0); 2]; 2],
    };
    for col in 0..dim {
        match kind {
            GateKind::CNOT => {
                let row = if col >> qubits[0] & 1 == 1 {
                    col ^ (1 << qubits[1])
                } else {
                    col
                };
                m[row * dim + col] = C::new(1.0, 0.0);
            }
            GateKind::CZ => {
                let both = (col >> qubits[0] & 1) & (col >> qubits[1] & 1);
                m[col * dim + col] = C::new(if both == 1 { -1.0 } else { 1.0 }, 0.0);
            }
            _ => {
                let q = qubits[0];
                let bit = col >> q & 1;
                for out_bit in 0..2 {
                    let row = (col & !(1 << q)) | (out_bit << q);
                    m[row * dim + col] = one[out_bit][bit];
                }
            }
        }
    }
    m
}

/// Amplitudes of a bound circuit via dense matrix–vector products.
pub fn dense_amplitudes(circuit: &Circuit) -> Vec<C> {
    let n = circuit.n_qubits();
    let dim = 1usize << n;
    let mut v = vec![C::new(0.0, 0.0); dim];
    v[0] = C::new(1.0, 0.0);
    for g in circuit.gates() {
        let m = dense_gate(n, g.kind, g.qubits, g.angle().unwrap_or(0.0));
        v = (0..dim)
            .map(|r| (0..dim).map(|c| m[r * dim + c] * v[c]).sum())
            .collect();
    }
    v
}

/// `⟨Z_i⟩` from dense amplitudes.
pub fn dense_expectations(circuit: &Circuit) -> Vec<f64> {
    let v = dense_amplitudes(circuit);
    (0..circuit.n_qubits())
        .map(|q| {
            v.iter()
                .enumerate()
                .map(|(b, a)| {
                    if b >> q & 1 == 0 {
                        a.norm_sqr()
                    } else {
                        -a.norm_sqr()
                    }
                })
                .sum()
        })
        .collect()
}
