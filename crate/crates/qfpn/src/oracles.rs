//! Independent reference implementations used only by the verification
//! suites. Nothing in the library's production paths calls into here.
//!
//! Each reference deliberately follows a different computational route than
//! the code it checks: the circuit oracle builds full 2ⁿ×2ⁿ unitaries from
//! explicit 2×2 matrices and Kronecker products instead of in-place kernels;
//! the Lovász reference manipulates explicit pixel sets instead of the
//! cumulative-sum recurrence; the metric reference counts thresholds from
//! set cardinalities. Keep it that way — a shared shortcut would turn a
//! differential test into a tautology.

use crate::dataio::Mask;
use crate::qsim::CircuitParams;
use num_complex::Complex64;

// ---------------------------------------------------------------------------
// Dense circuit oracle
// ---------------------------------------------------------------------------

/// Dense complex square matrix, row-major.
#[derive(Clone)]
pub struct CMat {
    pub dim: usize,
    pub data: Vec<Complex64>,
}

impl CMat {
    pub fn identity(dim: usize) -> Self {
        let mut data = vec![Complex64::new(0.0, 0.0); dim * dim];
        for i in 0..dim {
            data[i * dim + i] = Complex64::new(1.0, 0.0);
        }
        CMat { dim, data }
    }

    pub fn from_rows(rows: &[&[Complex64]]) -> Self {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for r in rows {
            assert_eq!(r.len(), dim);
            data.extend_from_slice(r);
        }
        CMat { dim, data }
    }

    pub fn at(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.dim + c]
    }

    pub fn matmul(&self, rhs: &CMat) -> CMat {
        assert_eq!(self.dim, rhs.dim);
        let d = self.dim;
        let mut out = vec![Complex64::new(0.0, 0.0); d * d];
        for r in 0..d {
            for k in 0..d {
                let a = self.at(r, k);
                if a.norm_sqr() == 0.0 {
                    continue;
                }
                for c in 0..d {
                    out[r * d + c] += a * rhs.at(k, c);
                }
            }
        }
        CMat { dim: d, data: out }
    }

    pub fn kron(&self, rhs: &CMat) -> CMat {
        let d = self.dim * rhs.dim;
        let mut out = vec![Complex64::new(0.0, 0.0); d * d];
        for ra in 0..self.dim {
            for ca in 0..self.dim {
                let a = self.at(ra, ca);
                for rb in 0..rhs.dim {
                    for cb in 0..rhs.dim {
                        out[(ra * rhs.dim + rb) * d + (ca * rhs.dim + cb)] = a * rhs.at(rb, cb);
                    }
                }
            }
        }
        CMat { dim: d, data: out }
    }

    pub fn apply_to_zero_state(&self) -> Vec<Complex64> {
        (0..self.dim).map(|r| self.at(r, 0)).collect()
    }
}

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn ry_matrix(angle: f64) -> CMat {
    let (s, co) = (angle / 2.0).sin_cos();
    CMat::from_rows(&[&[c(co, 0.0), c(-s, 0.0)], &[c(s, 0.0), c(co, 0.0)]])
}

pub fn rz_matrix(angle: f64) -> CMat {
    CMat::from_rows(&[
        &[Complex64::from_polar(1.0, -angle / 2.0), c(0.0, 0.0)],
        &[c(0.0, 0.0), Complex64::from_polar(1.0, angle / 2.0)],
    ])
}

pub fn rot_matrix(phi: f64, theta: f64, omega: f64) -> CMat {
    rz_matrix(omega).matmul(&ry_matrix(theta).matmul(&rz_matrix(phi)))
}

/// Embeds a single-qubit matrix on `qubit` of an n-qubit register, with
/// qubit 0 as the most significant bit of the basis index.
pub fn embed_single(n: usize, qubit: usize, gate: &CMat) -> CMat {
    let left = CMat::identity(1 << qubit);
    let right = CMat::identity(1 << (n - 1 - qubit));
    left.kron(gate).kron(&right)
}

/// Full CNOT permutation matrix on n qubits (MSB-first bit convention).
pub fn cnot_matrix(n: usize, control: usize, target: usize) -> CMat {
    let dim = 1 << n;
    let cmask = 1usize << (n - 1 - control);
    let tmask = 1usize << (n - 1 - target);
    let mut m = CMat {
        dim,
        data: vec![Complex64::new(0.0, 0.0); dim * dim],
    };
    for basis in 0..dim {
        let out = if basis & cmask != 0 { basis ^ tmask } else { basis };
        m.data[out * dim + basis] = c(1.0, 0.0);
    }
    m
}

/// Builds the whole circuit unitary and returns the n Pauli-Z expectations
/// on U|0…0⟩.
pub fn oracle_expectations(x: &[f64], params: &CircuitParams) -> Vec<f64> {
    let cfg = &params.config;
    let n = cfg.n_qubits;
    let dim = 1 << n;
    let mut unitary = CMat::identity(dim);
    let push = |gate: CMat, unitary: &mut CMat| {
        *unitary = gate.matmul(unitary);
    };
    for layer in 0..cfg.n_layers {
        if cfg.reupload || layer == 0 {
            for qubit in 0..n {
                let g = ry_matrix(cfg.encoding_scale[layer] * x[qubit]);
                push(embed_single(n, qubit, &g), &mut unitary);
            }
        }
        for qubit in 0..n {
            let idx = |k: usize| params.angles[cfg.angle_index(layer, qubit, k)];
            let g = rot_matrix(idx(0), idx(1), idx(2));
            push(embed_single(n, qubit, &g), &mut unitary);
        }
        for qubit in 0..n {
            push(cnot_matrix(n, qubit, (qubit + 1) % n), &mut unitary);
        }
    }
    let amps = unitary.apply_to_zero_state();
    (0..n)
        .map(|q| {
            amps.iter()
                .enumerate()
                .map(|(basis, a)| {
                    let bit = (basis >> (n - 1 - q)) & 1;
                    a.norm_sqr() * (1.0 - 2.0 * bit as f64)
                })
                .sum()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Numerical differentiation
// ---------------------------------------------------------------------------

/// Central finite differences of a scalar function of a flat vector.
pub fn finite_difference(f: &mut dyn FnMut(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; point.len()];
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let plus = f(&probe);
        probe[i] = point[i] - step;
        let minus = f(&probe);
        probe[i] = point[i];
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Relative comparison with an absolute floor for near-zero gradients.
pub fn close_rel(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs_floor
}

// ---------------------------------------------------------------------------
// Lovász hinge reference
// ---------------------------------------------------------------------------

/// Set-based prefix-chain evaluation of the Lovász hinge for one sample.
///
/// Sorts hinge errors descending (stable), then for each prefix set M_k of
/// "mispredicted" pixels computes the Jaccard loss of the prediction
/// obtained by flipping exactly the pixels in M_k, and accumulates
/// Σ max(e, 0)·(J_k − J_{k−1}).
pub fn lovasz_hinge_reference(logits: &[f64], targets: &[f64]) -> f64 {
    let n = logits.len();
    let errors: Vec<f64> = (0..n)
        .map(|i| 1.0 - logits[i] * (2.0 * targets[i] - 1.0))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).expect("finite"));

    let gt_set: std::collections::BTreeSet<usize> =
        (0..n).filter(|&i| targets[i] == 1.0).collect();
    let jaccard_loss = |mispredicted: &std::collections::BTreeSet<usize>| -> f64 {
        // Prediction = ground truth with the mispredicted pixels flipped.
        let pred: std::collections::BTreeSet<usize> = (0..n)
            .filter(|i| gt_set.contains(i) != mispredicted.contains(i))
            .collect();
        let inter = gt_set.intersection(&pred).count();
        let union = gt_set.union(&pred).count();
        if union == 0 {
            0.0
        } else {
            1.0 - inter as f64 / union as f64
        }
    };

    let mut mispredicted = std::collections::BTreeSet::new();
    let mut prev = jaccard_loss(&mispredicted);
    let mut loss = 0.0;
    for &idx in &order {
        mispredicted.insert(idx);
        let j = jaccard_loss(&mispredicted);
        loss += errors[idx].max(0.0) * (j - prev);
        prev = j;
    }
    loss
}

// ---------------------------------------------------------------------------
// Competition metric reference
// ---------------------------------------------------------------------------

/// Independent reimplementation of the per-image competition precision,
/// working from explicit pixel sets.
pub fn tgs_precision_reference(pred: &Mask, gt: &Mask) -> f64 {
    let pred_set: std::collections::BTreeSet<usize> = pred
        .pixels
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| (p == 1).then_some(i))
        .collect();
    let gt_set: std::collections::BTreeSet<usize> = gt
        .pixels
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| (p == 1).then_some(i))
        .collect();
    match (gt_set.is_empty(), pred_set.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let inter = gt_set.intersection(&pred_set).count() as f64;
    let union = gt_set.union(&pred_set).count() as f64;
    let score = inter / union;
    // Thresholds 10/20 .. 19/20: the same reals as the production grid,
    // reached by a different route.
    let hits = (10..20).filter(|&k| score > k as f64 / 20.0).count();
    hits as f64 / 10.0
}
