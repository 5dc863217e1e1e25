//! Quantum/classical channel routing at the 2×2 bottleneck.
//!
//! A [`QuantumLayer`] maps `[B, N/4, 2, 2]` to the same shape through one
//! circuit. A channel layer runs `n_circuits` independent circuits on
//! consecutive channel groups. The hybrid vertex sends the first
//! `quantum_channels` input channels through the channel layer, convolves
//! the rest classically, and concatenates the two results along channels.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ansatz::{self, AnsatzSpec, CircuitTemplate, Variant};
use crate::error::{Error, Result};
use crate::qsim::{self, Backend};
use crate::rng::mix_seed;
use crate::tensor::{CustomOp, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridBottleneckConfig {
    pub n_qubits: usize,
    /// Zero degenerates the vertex to its classical convolution.
    pub n_circuits: usize,
    pub variant: Variant,
    pub layers: usize,
    /// Channel count `C_b` of the bottleneck feature map.
    pub total_channels: usize,
}

impl HybridBottleneckConfig {
    pub fn channels_per_circuit(&self) -> usize {
        self.n_qubits / 4
    }

    pub fn quantum_channels(&self) -> usize {
        self.n_circuits * self.channels_per_circuit()
    }

    pub fn classical_channels(&self) -> usize {
        self.total_channels.saturating_sub(self.quantum_channels())
    }

    pub fn ansatz_spec(&self) -> Result<AnsatzSpec> {
        AnsatzSpec::new(self.n_qubits, self.variant, self.layers)
    }

    pub fn weights_per_circuit(&self) -> Result<usize> {
        Ok(ansatz::param_count(&self.ansatz_spec()?))
    }

    pub fn validate(&self) -> Result<()> {
        self.ansatz_spec()?;
        if self.quantum_channels() > self.total_channels {
            return Err(Error::config(format!(
                "{} circuits × {} channels = {} quantum channels exceed the {} bottleneck channels",
                self.n_circuits,
                self.channels_per_circuit(),
                self.quantum_channels(),
                self.total_channels
            )));
        }
        Ok(())
    }
}

fn check_bottleneck(shape: &[usize], what: &str) -> Result<()> {
    if shape.len() != 4 || shape[2] != 2 || shape[3] != 2 {
        let size = if shape.len() == 4 {
            format!("{}x{}", shape[2], shape[3])
        } else {
            format!("{shape:?}")
        };
        return Err(Error::config(format!(
            "{what} needs a 2x2 spatial map, got {size}"
        )));
    }
    Ok(())
}

/// One variational circuit applied per batch element.
#[derive(Clone, Debug)]
pub struct QuantumLayer {
    template: Arc<CircuitTemplate>,
}

impl QuantumLayer {
    pub fn new(spec: &AnsatzSpec) -> Result<Self> {
        Ok(Self {
            template: Arc::new(ansatz::build(spec)?),
        })
    }

    pub fn template(&self) -> &CircuitTemplate {
        &self.template
    }

    pub fn n_weights(&self) -> usize {
        self.template.n_weight_slots()
    }

    /// Expectations for one flattened input vector.
    pub fn evaluate(&self, inputs: &[f64], weights: &[f64], backend: &Backend) -> Result<Vec<f64>> {
        qsim::run(&self.template.bind(inputs, weights)?, backend)
    }

    /// `[B, N/4, 2, 2] → [B, N/4, 2, 2]`. `seed` decorrelates noisy-backend
    /// trajectories between calls; the exact backend ignores it.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        weights: Var,
        backend: &Backend,
        seed: u64,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        check_bottleneck(&shape, "quantum layer")?;
        let n = self.template.spec().n_qubits;
        if shape[1] * 4 != n {
            return Err(Error::config(format!(
                "quantum layer with {n} qubits takes {} channels, got {}",
                n / 4,
                shape[1]
            )));
        }
        if tape.value(weights).numel() != self.n_weights() {
            return Err(Error::contract(format!(
                "quantum layer needs {} weights, got {}",
                self.n_weights(),
                tape.value(weights).numel()
            )));
        }
        let xd = tape.value(x).data();
        let wd = tape.value(weights).data();
        let outs: Vec<Vec<f64>> = (0..shape[0])
            .into_par_iter()
            .map(|b| {
                let be = backend.reseeded(mix_seed(seed, b as u64));
                self.evaluate(&xd[b * n..(b + 1) * n], wd, &be)
            })
            .collect::<Result<_>>()?;
        let out = Tensor::new(&shape, outs.concat())?;
        let op = QuantumOp {
            template: Arc::clone(&self.template),
            backend: *backend,
            seed,
        };
        Ok(tape.custom(&[x, weights], out, Box::new(op)))
    }
}

/// Backward of [`QuantumLayer::forward`] by the parameter-shift rule; inputs
/// and weights are both rotation angles.
struct QuantumOp {
    template: Arc<CircuitTemplate>,
    backend: Backend,
    seed: u64,
}

impl CustomOp for QuantumOp {
    fn name(&self) -> &str {
        "quantum-layer"
    }

    fn backward(
        &self,
        parents: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let x = parents[0];
        let w = parents[1].data();
        let n = self.template.spec().n_qubits;
        let batch = x.shape()[0];
        let n_w = self.template.n_weight_slots();
        let mut gates: Vec<usize> = Vec::new();
        if needs[0] {
            gates.extend_from_slice(self.template.input_gates());
        }
        if needs[1] {
            gates.extend_from_slice(self.template.weight_gates());
        }
        let jobs: Vec<(usize, usize)> = (0..batch)
            .flat_map(|b| (0..gates.len()).map(move |k| (b, k)))
            .collect();
        let partials: Vec<f64> = jobs
            .par_iter()
            .map(|&(b, k)| {
                let circuit = self.template.bind(&x.data()[b * n..(b + 1) * n], w)?;
                let be = self.backend.reseeded(mix_seed(self.seed, b as u64));
                let d = qsim::parameter_shift_grad(&circuit, &be, gates[k])?;
                let g = &grad_out[b * n..(b + 1) * n];
                Ok(d.iter().zip(g).map(|(a, b)| a * b).sum())
            })
            .collect::<Result<_>>()?;
        let mut dx = needs[0].then(|| vec![0.0; batch * n]);
        let mut dw = needs[1].then(|| vec![0.0; n_w]);
        for (&(b, k), v) in jobs.iter().zip(&partials) {
            if needs[0] && k < n {
                dx.as_mut().expect("input grad")[b * n + k] = *v;
            } else {
                let j = if needs[0] { k - n } else { k };
                dw.as_mut().expect("weight grad")[j] += v;
            }
        }
        Ok(vec![dx, dw])
    }
}

/// `n_circuits` independent quantum layers over consecutive channel groups.
#[derive(Clone, Debug)]
pub struct QuantumChannelLayer {
    layer: QuantumLayer,
    n_circuits: usize,
}

impl QuantumChannelLayer {
    pub fn new(spec: &AnsatzSpec, n_circuits: usize) -> Result<Self> {
        Ok(Self {
            layer: QuantumLayer::new(spec)?,
            n_circuits,
        })
    }

    pub fn layer(&self) -> &QuantumLayer {
        &self.layer
    }

    pub fn n_circuits(&self) -> usize {
        self.n_circuits
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        weights: &[Var],
        backend: &Backend,
        seed: u64,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        check_bottleneck(&shape, "quantum channel layer")?;
        if self.n_circuits == 0 || !shape[1].is_multiple_of(self.n_circuits) {
            return Err(Error::config(format!(
                "{} channels cannot be split evenly over {} circuits",
                shape[1], self.n_circuits
            )));
        }
        if weights.len() != self.n_circuits {
            return Err(Error::contract(format!(
                "{} weight vectors for {} circuits",
                weights.len(),
                self.n_circuits
            )));
        }
        let per = shape[1] / self.n_circuits;
        let mut outs = Vec::with_capacity(self.n_circuits);
        for (ci, w) in weights.iter().enumerate() {
            let part = tape.split(x, ci * per, per)?;
            outs.push(
                self.layer
                    .forward(tape, part, *w, backend, mix_seed(seed, ci as u64))?,
            );
        }
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        tape.concat(&outs)
    }
}

/// Hybrid replacement for a 3×3 convolution at the 2×2 bottleneck.
#[derive(Clone, Debug)]
pub struct HybridConvVertex {
    cfg: HybridBottleneckConfig,
    channel_layer: Option<QuantumChannelLayer>,
}

impl HybridConvVertex {
    pub fn new(cfg: HybridBottleneckConfig) -> Result<Self> {
        cfg.validate()?;
        let channel_layer = if cfg.n_circuits > 0 {
            Some(QuantumChannelLayer::new(
                &cfg.ansatz_spec()?,
                cfg.n_circuits,
            )?)
        } else {
            None
        };
        Ok(Self { cfg, channel_layer })
    }

    pub fn config(&self) -> &HybridBottleneckConfig {
        &self.cfg
    }

    /// Output channels: quantum channels pass through at equal count, the
    /// classical kernel decides the rest.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        qweights: &[Var],
        kernel: Option<Var>,
        bias: Option<Var>,
        backend: &Backend,
        seed: u64,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        check_bottleneck(&shape, "hybrid conv vertex")?;
        let q = self.cfg.quantum_channels();
        let c_in = shape[1];
        if q > c_in {
            return Err(Error::config(format!(
                "{q} quantum channels requested but the input has {c_in}"
            )));
        }
        let classical = |tape: &mut Tape, xc: Var| match kernel {
            Some(k) => tape.conv2d(xc, k, bias, 1, 1),
            None => Err(Error::config(
                "hybrid vertex has classical channels but no kernel",
            )),
        };
        let Some(layer) = &self.channel_layer else {
            return classical(tape, x);
        };
        let xq = tape.split(x, 0, q)?;
        let yq = layer.forward(tape, xq, qweights, backend, seed)?;
        if q == c_in {
            return Ok(yq);
        }
        let xc = tape.split(x, q, c_in - q)?;
        let yc = classical(tape, xc)?;
        tape.concat(&[yq, yc])
    }
}
