//! Dense statevector simulation of the re-uploading variational circuit.
//!
//! The circuit acts on `n` qubits initialized to |0…0⟩. Each of `L` layers
//! applies an R_Y data-encoding rotation per qubit (every layer when
//! re-uploading is on, only the first layer otherwise), a general
//! Rot(φ,θ,ω) = R_Z(ω)·R_Y(θ)·R_Z(φ) rotation per qubit, and a ring of CNOTs
//! (control i → target (i+1) mod n, applied for i = 0,1,…,n−1 in that order).
//! The output is the vector of per-qubit Pauli-Z expectations, each in
//! [−1, +1].
//!
//! Gradients with respect to both the variational angles and the encoded
//! inputs use the two-point parameter-shift rule: every parameterized gate
//! here is exp(−iαG/2) with G ∈ {Y, Z}, so ∂⟨Z⟩/∂α =
//! [f(α+π/2) − f(α−π/2)] / 2 exactly.
//!
//! Conventions (fixed so oracle tests are reproducible):
//! - qubit 0 is the most significant bit of the basis-state index;
//! - all arithmetic is double-precision complex; nothing here is random.

use num_complex::Complex64;
use std::f64::consts::FRAC_PI_2;

/// Errors for invalid gate or circuit arguments.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum QsimError {
    #[error("qubit index {qubit} out of range for {n_qubits} qubits")]
    QubitOutOfRange { qubit: usize, n_qubits: usize },
    #[error("cnot control and target are both {0}")]
    ControlEqualsTarget(usize),
    #[error("input has {got} entries but the circuit has {expected} qubits")]
    InputLengthMismatch { got: usize, expected: usize },
    #[error("upstream has {got} entries but the circuit has {expected} qubits")]
    UpstreamLengthMismatch { got: usize, expected: usize },
}

/// Full state of an n-qubit register: 2ⁿ complex amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct Statevector {
    n_qubits: usize,
    amps: Vec<Complex64>,
}

impl Statevector {
    /// |0…0⟩ on `n_qubits` qubits. Supported range is 2..=10.
    pub fn zero(n_qubits: usize) -> Self {
        assert!(
            (2..=10).contains(&n_qubits),
            "n_qubits {n_qubits} outside supported range 2..=10"
        );
        let mut amps = vec![Complex64::new(0.0, 0.0); 1 << n_qubits];
        amps[0] = Complex64::new(1.0, 0.0);
        Statevector { n_qubits, amps }
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    /// Σ|amp|², which every gate below preserves.
    pub fn norm_sq(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    fn check_qubit(&self, qubit: usize) -> Result<(), QsimError> {
        if qubit >= self.n_qubits {
            return Err(QsimError::QubitOutOfRange {
                qubit,
                n_qubits: self.n_qubits,
            });
        }
        Ok(())
    }

    /// Bit of basis index `basis` belonging to `qubit` (qubit 0 = MSB).
    #[inline]
    fn bit(&self, basis: usize, qubit: usize) -> usize {
        (basis >> (self.n_qubits - 1 - qubit)) & 1
    }
}

/// Applies R_Y(angle) = exp(−i·angle·Y/2) to one qubit.
pub fn apply_ry(state: &mut Statevector, qubit: usize, angle: f64) -> Result<(), QsimError> {
    state.check_qubit(qubit)?;
    ry_unchecked(state, qubit, angle);
    Ok(())
}

/// Applies R_Z(angle) = exp(−i·angle·Z/2) to one qubit.
pub fn apply_rz(state: &mut Statevector, qubit: usize, angle: f64) -> Result<(), QsimError> {
    state.check_qubit(qubit)?;
    rz_unchecked(state, qubit, angle);
    Ok(())
}

/// Applies Rot(φ,θ,ω) = R_Z(ω)·R_Y(θ)·R_Z(φ): the φ rotation acts first.
pub fn apply_rot(
    state: &mut Statevector,
    qubit: usize,
    phi: f64,
    theta: f64,
    omega: f64,
) -> Result<(), QsimError> {
    state.check_qubit(qubit)?;
    rz_unchecked(state, qubit, phi);
    ry_unchecked(state, qubit, theta);
    rz_unchecked(state, qubit, omega);
    Ok(())
}

/// Applies CNOT with the given control and target qubits.
pub fn apply_cnot(
    state: &mut Statevector,
    control: usize,
    target: usize,
) -> Result<(), QsimError> {
    state.check_qubit(control)?;
    state.check_qubit(target)?;
    if control == target {
        return Err(QsimError::ControlEqualsTarget(control));
    }
    cnot_unchecked(state, control, target);
    Ok(())
}

/// ⟨Z⟩ on one qubit: P(bit = 0) − P(bit = 1), in [−1, +1].
pub fn expectation_z(state: &Statevector, qubit: usize) -> Result<f64, QsimError> {
    state.check_qubit(qubit)?;
    let mut acc = 0.0;
    for (basis, amp) in state.amps.iter().enumerate() {
        let sign = 1.0 - 2.0 * state.bit(basis, qubit) as f64;
        acc += amp.norm_sqr() * sign;
    }
    Ok(acc)
}

fn ry_unchecked(state: &mut Statevector, qubit: usize, angle: f64) {
    let half = 0.5 * angle;
    let (s, c) = half.sin_cos();
    let mask = 1usize << (state.n_qubits - 1 - qubit);
    let dim = state.amps.len();
    for basis in 0..dim {
        if basis & mask == 0 {
            let a0 = state.amps[basis];
            let a1 = state.amps[basis | mask];
            state.amps[basis] = a0 * c - a1 * s;
            state.amps[basis | mask] = a0 * s + a1 * c;
        }
    }
}

fn rz_unchecked(state: &mut Statevector, qubit: usize, angle: f64) {
    let half = 0.5 * angle;
    let phase0 = Complex64::new(half.cos(), -half.sin());
    let phase1 = Complex64::new(half.cos(), half.sin());
    let mask = 1usize << (state.n_qubits - 1 - qubit);
    for (basis, amp) in state.amps.iter_mut().enumerate() {
        *amp *= if basis & mask == 0 { phase0 } else { phase1 };
    }
}

fn cnot_unchecked(state: &mut Statevector, control: usize, target: usize) {
    let cmask = 1usize << (state.n_qubits - 1 - control);
    let tmask = 1usize << (state.n_qubits - 1 - target);
    let dim = state.amps.len();
    for basis in 0..dim {
        if basis & cmask != 0 && basis & tmask == 0 {
            state.amps.swap(basis, basis | tmask);
        }
    }
}

/// Structure of one circuit: qubit count, depth, re-uploading, and the
/// per-layer multiplier applied to encoded inputs (all 1.0 for unit scale,
/// {1, 2, 4, …} for the frequency-scaled variant).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CircuitConfig {
    pub n_qubits: usize,
    pub n_layers: usize,
    pub reupload: bool,
    pub encoding_scale: Vec<f64>,
}

impl CircuitConfig {
    pub fn new(n_qubits: usize, n_layers: usize, reupload: bool, encoding_scale: Vec<f64>) -> Self {
        assert!((2..=10).contains(&n_qubits), "n_qubits outside 2..=10");
        assert!(n_layers >= 1, "need at least one layer");
        assert_eq!(encoding_scale.len(), n_layers, "one encoding scale per layer");
        CircuitConfig {
            n_qubits,
            n_layers,
            reupload,
            encoding_scale,
        }
    }

    /// Unit-scale encoding: every layer re-encodes the raw input.
    pub fn unit(n_qubits: usize, n_layers: usize, reupload: bool) -> Self {
        Self::new(n_qubits, n_layers, reupload, vec![1.0; n_layers])
    }

    /// Geometric {1, 2, 4, …} per-layer encoding multipliers.
    pub fn frequency_scaled(n_qubits: usize, n_layers: usize, reupload: bool) -> Self {
        let scale = (0..n_layers).map(|l| (1u64 << l) as f64).collect();
        Self::new(n_qubits, n_layers, reupload, scale)
    }

    /// Number of variational angles: 3·n·L.
    pub fn n_angles(&self) -> usize {
        3 * self.n_qubits * self.n_layers
    }

    /// Flat index of angle `k` (0 = φ, 1 = θ, 2 = ω) of qubit `qubit` in
    /// layer `layer`.
    #[inline]
    pub fn angle_index(&self, layer: usize, qubit: usize, k: usize) -> usize {
        (layer * self.n_qubits + qubit) * 3 + k
    }

    fn encodes_at(&self, layer: usize) -> bool {
        self.reupload || layer == 0
    }
}

/// One circuit instance: its structure plus the flat `[layer][qubit][φθω]`
/// variational angles.
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitParams {
    pub config: CircuitConfig,
    pub angles: Vec<f64>,
}

impl CircuitParams {
    pub fn new(config: CircuitConfig, angles: Vec<f64>) -> Self {
        assert_eq!(angles.len(), config.n_angles(), "angle count must be 3·n·L");
        assert!(angles.iter().all(|a| a.is_finite()), "angles must be finite");
        CircuitParams { config, angles }
    }

    pub fn zeros(config: CircuitConfig) -> Self {
        let n = config.n_angles();
        CircuitParams {
            config,
            angles: vec![0.0; n],
        }
    }

    fn angle(&self, layer: usize, qubit: usize, k: usize) -> f64 {
        self.angles[self.config.angle_index(layer, qubit, k)]
    }
}

/// Identifies one rotation angle inside the circuit for shift evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GateAngle {
    /// Encoding R_Y of (layer, qubit); the shift adds to the full encoded
    /// angle scale[layer]·x[qubit].
    Encoding { layer: usize, qubit: usize },
    /// Variational angle k ∈ {0: φ, 1: θ, 2: ω} of (layer, qubit).
    Variational { layer: usize, qubit: usize, k: usize },
}

fn run_with_shift(
    x: &[f64],
    params: &CircuitParams,
    shift: Option<(GateAngle, f64)>,
) -> Vec<f64> {
    let cfg = &params.config;
    let n = cfg.n_qubits;
    let mut state = Statevector::zero(n);
    for layer in 0..cfg.n_layers {
        if cfg.encodes_at(layer) {
            for qubit in 0..n {
                let mut angle = cfg.encoding_scale[layer] * x[qubit];
                if let Some((GateAngle::Encoding { layer: sl, qubit: sq }, delta)) = shift {
                    if sl == layer && sq == qubit {
                        angle += delta;
                    }
                }
                ry_unchecked(&mut state, qubit, angle);
            }
        }
        for qubit in 0..n {
            let mut rot = [
                params.angle(layer, qubit, 0),
                params.angle(layer, qubit, 1),
                params.angle(layer, qubit, 2),
            ];
            if let Some((GateAngle::Variational { layer: sl, qubit: sq, k }, delta)) = shift {
                if sl == layer && sq == qubit {
                    rot[k] += delta;
                }
            }
            rz_unchecked(&mut state, qubit, rot[0]);
            ry_unchecked(&mut state, qubit, rot[1]);
            rz_unchecked(&mut state, qubit, rot[2]);
        }
        for qubit in 0..n {
            cnot_unchecked(&mut state, qubit, (qubit + 1) % n);
        }
    }
    (0..n)
        .map(|q| expectation_z(&state, q).expect("qubit index in range"))
        .collect()
}

/// Runs the circuit on input `x` and returns the n Pauli-Z expectations.
pub fn run_circuit(x: &[f64], params: &CircuitParams) -> Result<Vec<f64>, QsimError> {
    if x.len() != params.config.n_qubits {
        return Err(QsimError::InputLengthMismatch {
            got: x.len(),
            expected: params.config.n_qubits,
        });
    }
    Ok(run_with_shift(x, params, None))
}

/// Parameter-shift gradients of `upstream · f(x; θ)` with respect to every
/// variational angle and every input entry.
///
/// `upstream` holds the loss-gradient coefficients on the n expectations.
/// Returns `(d_angles, d_x)` with `d_angles` in the same flat layout as
/// [`CircuitParams::angles`]. Each scalar costs two full circuit evaluations.
pub fn circuit_gradients(
    x: &[f64],
    params: &CircuitParams,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), QsimError> {
    let cfg = &params.config;
    let n = cfg.n_qubits;
    if x.len() != n {
        return Err(QsimError::InputLengthMismatch {
            got: x.len(),
            expected: n,
        });
    }
    if upstream.len() != n {
        return Err(QsimError::UpstreamLengthMismatch {
            got: upstream.len(),
            expected: n,
        });
    }

    let shift_pair = |gate: GateAngle| -> f64 {
        let plus = run_with_shift(x, params, Some((gate, FRAC_PI_2)));
        let minus = run_with_shift(x, params, Some((gate, -FRAC_PI_2)));
        upstream
            .iter()
            .zip(plus.iter().zip(minus.iter()))
            .map(|(u, (p, m))| u * (p - m) * 0.5)
            .sum()
    };

    let mut d_angles = vec![0.0; cfg.n_angles()];
    for layer in 0..cfg.n_layers {
        for qubit in 0..n {
            for k in 0..3 {
                d_angles[cfg.angle_index(layer, qubit, k)] =
                    shift_pair(GateAngle::Variational { layer, qubit, k });
            }
        }
    }

    // d/dx_i of an encoding gate with angle scale·x_i picks up the chain
    // factor scale; contributions sum over every layer that encodes.
    let mut d_x = vec![0.0; n];
    for layer in 0..cfg.n_layers {
        if !cfg.encodes_at(layer) {
            continue;
        }
        for qubit in 0..n {
            d_x[qubit] += cfg.encoding_scale[layer] * shift_pair(GateAngle::Encoding { layer, qubit });
        }
    }

    Ok((d_angles, d_x))
}
