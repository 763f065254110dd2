//! Statevector simulation of the feature-enhancement circuit.
//!
//! Qubit `i` is bit `i` (little-endian) of the amplitude index. One circuit
//! layer applies `Ry(θ_i)` to every qubit and then a CNOT ring
//! `i -> (i + 1) mod n`; the same data-dependent angles are re-uploaded in
//! every layer. Readout is the exact Pauli-Z expectation per qubit.
//!
//! Gradients come from adjoint (reverse) differentiation of the simulation.
//! [`parameter_shift_gradient`] evaluates the same derivative from forward
//! runs only and serves as the reference in tests.

use num_complex::Complex;

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MAX_QUBITS: usize = 12;

/// Largest tolerated deviation of `Σ|a|²` from 1 before readout in `f64`;
/// narrower scalars get a tolerance scaled by their machine epsilon.
pub const NORM_TOLERANCE: f64 = 1e-8;

fn norm_tolerance<T: Real>() -> f64 {
    NORM_TOLERANCE.max(64.0 * T::epsilon().as_f64())
}

/// `2^n` complex amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector<T> {
    qubits: usize,
    amps: Vec<Complex<T>>,
}

impl<T: Real> StateVector<T> {
    /// `|0…0⟩` on `qubits` qubits.
    pub fn zero(qubits: usize) -> Result<Self> {
        check_qubits(qubits)?;
        let mut amps = vec![Complex::new(T::zero(), T::zero()); 1 << qubits];
        amps[0] = Complex::new(T::one(), T::zero());
        Ok(Self { qubits, amps })
    }

    pub fn qubits(&self) -> usize {
        self.qubits
    }

    pub fn amplitudes(&self) -> &[Complex<T>] {
        &self.amps
    }

    pub fn norm_sqr(&self) -> T {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Applies the 2×2 real matrix `[[a, b], [c, d]]` to `qubit`.
    fn apply_real_1q(&mut self, qubit: usize, [a, b, c, d]: [T; 4]) {
        let stride = 1usize << qubit;
        for base in (0..self.amps.len()).step_by(stride << 1) {
            for i in base..base + stride {
                let (x0, x1) = (self.amps[i], self.amps[i + stride]);
                self.amps[i] = x0 * a + x1 * b;
                self.amps[i + stride] = x0 * c + x1 * d;
            }
        }
    }

    /// `Ry(θ) = [[cos θ/2, −sin θ/2], [sin θ/2, cos θ/2]]`.
    pub fn apply_ry(&mut self, qubit: usize, theta: T) {
        let half = theta * T::lit(0.5);
        let (s, c) = half.sin_cos();
        self.apply_real_1q(qubit, [c, -s, s, c]);
    }

    /// `dRy/dθ` applied to the state (not unitary).
    fn apply_ry_derivative(&mut self, qubit: usize, theta: T) {
        let half = theta * T::lit(0.5);
        let (s, c) = half.sin_cos();
        let h = T::lit(0.5);
        self.apply_real_1q(qubit, [-s * h, -c * h, c * h, -s * h]);
    }

    pub fn apply_cnot(&mut self, control: usize, target: usize) {
        let (cm, tm) = (1usize << control, 1usize << target);
        for i in 0..self.amps.len() {
            if i & cm != 0 && i & tm == 0 {
                self.amps.swap(i, i | tm);
            }
        }
    }

    fn apply(&mut self, gate: Gate, angles: &[T], inverse: bool) {
        match gate {
            Gate::Ry { qubit, layer } => {
                let theta = angles[layer * self.qubits + qubit];
                self.apply_ry(qubit, if inverse { -theta } else { theta });
            }
            Gate::Cnot { control, target } => self.apply_cnot(control, target),
        }
    }

    /// `z_i = Σ_k |a_k|² · (+1 if bit i of k is 0 else −1)`.
    pub fn expectation_z(&self) -> Result<Vec<T>> {
        let norm = self.norm_sqr();
        if (norm.as_f64() - 1.0).abs() > norm_tolerance::<T>() {
            return Err(Error::Consistency(format!("state norm {norm} deviates from 1")));
        }
        let mut z = vec![T::zero(); self.qubits];
        for (k, a) in self.amps.iter().enumerate() {
            let p = a.norm_sqr();
            for (i, zi) in z.iter_mut().enumerate() {
                if k >> i & 1 == 0 {
                    *zi += p;
                } else {
                    *zi -= p;
                }
            }
        }
        Ok(z)
    }

    fn inner(&self, other: &Self) -> Complex<T> {
        self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum()
    }

    /// Multiplies each basis amplitude by `Σ_i w_i · (±1)`, i.e. applies the
    /// diagonal observable `Σ_i w_i Z_i`.
    fn apply_weighted_z(&mut self, weights: &[T]) {
        for (k, a) in self.amps.iter_mut().enumerate() {
            let mut s = T::zero();
            for (i, &w) in weights.iter().enumerate() {
                if k >> i & 1 == 0 {
                    s += w;
                } else {
                    s -= w;
                }
            }
            *a = *a * s;
        }
    }
}

fn check_qubits(n: usize) -> Result<()> {
    if n == 0 || n > MAX_QUBITS {
        return Err(Error::Config(format!("qubit count {n} outside 1..={MAX_QUBITS}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    /// Rotation on `qubit` reading angle slot `layer * n + qubit`.
    Ry { qubit: usize, layer: usize },
    Cnot { control: usize, target: usize },
}

/// Rotation layer plus CNOT ring, repeated `depth` times.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingCircuit {
    qubits: usize,
    depth: usize,
}

impl RingCircuit {
    pub fn new(qubits: usize, depth: usize) -> Result<Self> {
        check_qubits(qubits)?;
        if depth == 0 {
            return Err(Error::Config("circuit depth must be at least 1".into()));
        }
        Ok(Self { qubits, depth })
    }

    pub fn qubits(&self) -> usize {
        self.qubits
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn gates(&self) -> Vec<Gate> {
        let n = self.qubits;
        let mut gates = Vec::with_capacity(self.depth * 2 * n);
        for layer in 0..self.depth {
            gates.extend((0..n).map(|qubit| Gate::Ry { qubit, layer }));
            if n > 1 {
                gates.extend((0..n).map(|i| Gate::Cnot {
                    control: i,
                    target: (i + 1) % n,
                }));
            }
        }
        gates
    }

    fn check_angles<T>(&self, theta: &[T]) -> Result<()> {
        if theta.len() != self.qubits {
            return Err(Error::dim("run_circuit", "qubits", format!("{} angles for {} qubits", theta.len(), self.qubits)));
        }
        Ok(())
    }

    /// Angles for every rotation slot: `θ` repeated once per layer.
    fn reupload<T: Real>(&self, theta: &[T]) -> Vec<T> {
        theta.iter().copied().cycle().take(self.depth * self.qubits).collect()
    }

    pub fn run<T: Real>(&self, theta: &[T]) -> Result<StateVector<T>> {
        self.check_angles(theta)?;
        self.run_slots(&self.reupload(theta))
    }

    /// Runs with an independent angle for every rotation occurrence
    /// (`depth * n` slots, layer-major).
    pub fn run_slots<T: Real>(&self, slots: &[T]) -> Result<StateVector<T>> {
        if slots.len() != self.depth * self.qubits {
            return Err(Error::dim("run_circuit", "slots", format!("{} slots, expected {}", slots.len(), self.depth * self.qubits)));
        }
        let mut psi = StateVector::zero(self.qubits)?;
        for gate in self.gates() {
            psi.apply(gate, slots, false);
        }
        Ok(psi)
    }

    /// Runs the circuit and checks the norm after every gate.
    pub fn run_checked<T: Real>(&self, theta: &[T], tolerance: f64) -> Result<StateVector<T>> {
        self.check_angles(theta)?;
        let slots = self.reupload(theta);
        let mut psi = StateVector::zero(self.qubits)?;
        for gate in self.gates() {
            psi.apply(gate, &slots, false);
            let dev = (psi.norm_sqr().as_f64() - 1.0).abs();
            if dev > tolerance {
                return Err(Error::Consistency(format!("norm deviates by {dev:e} after {gate:?}")));
            }
        }
        Ok(psi)
    }

    pub fn expectations<T: Real>(&self, theta: &[T]) -> Result<Vec<T>> {
        self.run(theta)?.expectation_z()
    }

    /// `dL/dθ` given `dL/dz`, by reverse traversal of the circuit.
    ///
    /// Keeps two states: `phi` is un-computed gate by gate back to the input,
    /// `lam` carries the observable `Σ_i g_i Z_i` applied to the output.
    pub fn adjoint_gradient<T: Real>(&self, theta: &[T], upstream: &[T]) -> Result<Vec<T>> {
        self.check_angles(theta)?;
        if upstream.len() != self.qubits {
            return Err(Error::dim("quantum_backward", "qubits", "upstream length differs from qubit count"));
        }
        let slots = self.reupload(theta);
        let mut phi = self.run_slots(&slots)?;
        let mut lam = phi.clone();
        lam.apply_weighted_z(upstream);
        let mut grad = vec![T::zero(); self.qubits];
        let two = T::lit(2.0);
        for gate in self.gates().into_iter().rev() {
            phi.apply(gate, &slots, true);
            if let Gate::Ry { qubit, layer } = gate {
                let mut mu = phi.clone();
                mu.apply_ry_derivative(qubit, slots[layer * self.qubits + qubit]);
                grad[qubit] += two * lam.inner(&mu).re;
            }
            lam.apply(gate, &slots, true);
        }
        Ok(grad)
    }
}

/// `dL/dθ` by the parameter-shift rule: every rotation occurrence is shifted
/// by ±π/2 separately and the halves of the differences are summed per angle.
pub fn parameter_shift_gradient<T: Real>(circuit: &RingCircuit, theta: &[T], upstream: &[T]) -> Result<Vec<T>> {
    let n = circuit.qubits();
    let base: Vec<T> = theta.iter().copied().cycle().take(n * circuit.depth()).collect();
    let shift = T::FRAC_PI_2();
    let half = T::lit(0.5);
    let mut grad = vec![T::zero(); n];
    for slot in 0..base.len() {
        let mut plus = base.clone();
        plus[slot] += shift;
        let mut minus = base.clone();
        minus[slot] -= shift;
        let zp = circuit.run_slots(&plus)?.expectation_z()?;
        let zm = circuit.run_slots(&minus)?.expectation_z()?;
        let d: T = upstream.iter().zip(zp.iter().zip(&zm)).map(|(&u, (&a, &b))| u * (a - b) * half).sum();
        grad[slot % n] += d;
    }
    Ok(grad)
}

/// Batched circuit readout as a graph node: `[N, n] angles -> [N, n]` Z expectations.
struct CircuitReadout {
    circuit: RingCircuit,
}

impl<T: Real> CustomOp<T> for CircuitReadout {
    fn name(&self) -> &'static str {
        "circuit_readout"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_output: &[T]) -> Vec<Option<Vec<T>>> {
        let n = self.circuit.qubits();
        let mut grad = Vec::with_capacity(grad_output.len());
        for (theta, g) in inputs[0].data().chunks_exact(n).zip(grad_output.chunks_exact(n)) {
            grad.extend(
                self.circuit
                    .adjoint_gradient(theta, g)
                    .expect("shapes validated at forward"),
            );
        }
        vec![Some(grad)]
    }
}

/// `θ = π · tanh(h · W_qᵀ)` with `W_q` of shape `[n, F]`.
pub fn encode_angles<T: Real>(g: &mut Graph<T>, h: Var, wq: Var) -> Result<Var> {
    let pre = g.linear(h, wq, None)?;
    let t = g.tanh(pre);
    Ok(g.scale(t, T::PI()))
}

/// Rowwise circuit simulation and Pauli-Z readout.
pub fn circuit_expectations<T: Real>(g: &mut Graph<T>, theta: Var, circuit: RingCircuit) -> Result<Var> {
    let shape = g.shape(theta).to_vec();
    if shape.len() != 2 || shape[1] != circuit.qubits() {
        return Err(Error::dim("run_circuit", "qubits", format!("angles {shape:?} for {} qubits", circuit.qubits())));
    }
    let mut z = Vec::with_capacity(g.value(theta).numel());
    for row in g.value(theta).rows() {
        z.extend(circuit.expectations(row)?);
    }
    let out = Tensor::new(&shape, z)?;
    Ok(g.custom(&[theta], out, Box::new(CircuitReadout { circuit })))
}

/// Residual fusion `h' = h + α · z · W_rᵀ` with `W_r` of shape `[F, n]`.
pub fn fuse<T: Real>(g: &mut Graph<T>, h: Var, z: Var, wr: Var, alpha: T) -> Result<Var> {
    let projected = g.linear(z, wr, None)?;
    if g.shape(projected) != g.shape(h) {
        return Err(Error::dim("fuse", "features", format!("{:?} vs {:?}", g.shape(projected), g.shape(h))));
    }
    let scaled = g.scale(projected, alpha);
    g.add(h, scaled)
}

/// The whole enhancement path `h -> θ -> ψ -> z -> h'`.
pub fn enhance<T: Real>(g: &mut Graph<T>, h: Var, wq: Var, wr: Var, circuit: RingCircuit, alpha: T) -> Result<Var> {
    let theta = encode_angles(g, h, wq)?;
    let z = circuit_expectations(g, theta, circuit)?;
    fuse(g, h, z, wr, alpha)
}
