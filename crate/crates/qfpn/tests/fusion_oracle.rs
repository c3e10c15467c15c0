//! Gate forward passes vs a step-by-step composition computed with plain
//! loops and the dense-matrix circuit oracle.

use qfpn::fusion::{fpn_gate_forward, skip_gate_forward, QuantumFpnGate, QuantumSkipGate};
use qfpn::oracles::oracle_expectations;
use qfpn::qsim::{CircuitConfig, CircuitParams};
use qfpn::tensorgraph::Node;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn gap_reference(values: &[f64], b: usize, c: usize, area: usize) -> Vec<f64> {
    (0..b * c)
        .map(|bc| values[bc * area..(bc + 1) * area].iter().sum::<f64>() / area as f64)
        .collect()
}

/// The full chain for one sample: pooled concat, compression, scale/shift
/// into [−π, π], circuit (via the dense oracle), per-channel sigmoid gate,
/// convex combination.
fn fpn_reference(lat: &[f64], td: &[f64], c: usize, area: usize, gate: &QuantumFpnGate) -> Vec<f64> {
    let n = gate.circuit.n_qubits;
    let glat = gap_reference(lat, 1, c, area);
    let gtd = gap_reference(td, 1, c, area);
    let pooled: Vec<f64> = glat.iter().chain(&gtd).copied().collect();

    let compress = gate.compress.node.values();
    let mut v = vec![0.0; n];
    for (o, vo) in v.iter_mut().enumerate() {
        for (i, p) in pooled.iter().enumerate() {
            *vo += compress[o * 2 * c + i] * p;
        }
    }
    let scale = gate.scale.node.values();
    let shift = gate.shift.node.values();
    let x: Vec<f64> = v
        .iter()
        .enumerate()
        .map(|(i, vi)| (scale[i] * vi.tanh() + shift[i]) * PI)
        .collect();

    let params = CircuitParams::new(gate.circuit.clone(), gate.angles.node.values());
    let q = oracle_expectations(&x, &params);

    let out_w = gate.out_w.node.values();
    let out_b = gate.out_b.node.values();
    let g: Vec<f64> = (0..c)
        .map(|ch| {
            let z = out_b[ch] + (0..n).map(|i| out_w[ch * n + i] * q[i]).sum::<f64>();
            logistic(z)
        })
        .collect();

    let mut out = vec![0.0; c * area];
    for ch in 0..c {
        for p in 0..area {
            out[ch * area + p] = g[ch] * lat[ch * area + p] + (1.0 - g[ch]) * td[ch * area + p];
        }
    }
    out
}

fn skip_reference(skip: &[f64], c: usize, area: usize, gate: &QuantumSkipGate) -> Vec<f64> {
    let n = gate.circuit.n_qubits;
    let pooled = gap_reference(skip, 1, c, area);
    let proj = gate.proj.node.values();
    let x: Vec<f64> = (0..n)
        .map(|o| {
            let z: f64 = (0..c).map(|i| proj[o * c + i] * pooled[i]).sum();
            z.tanh() * PI
        })
        .collect();
    let params = CircuitParams::new(gate.circuit.clone(), gate.angles.node.values());
    let q = oracle_expectations(&x, &params);
    let out_w = gate.out_w.node.values();
    let out_b = gate.out_b.node.values();
    let g: Vec<f64> = (0..c)
        .map(|ch| {
            let z = out_b[ch] + (0..n).map(|i| out_w[ch * n + i] * q[i]).sum::<f64>();
            logistic(z)
        })
        .collect();
    let mut out = vec![0.0; c * area];
    for ch in 0..c {
        for p in 0..area {
            out[ch * area + p] = g[ch] * skip[ch * area + p];
        }
    }
    out
}

#[test]
fn fpn_gate_matches_equation_chain_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for round in 0..10 {
        let (c, hw) = (3, 4);
        let area = hw * hw;
        let gate = QuantumFpnGate::new(c, CircuitConfig::unit(4, 2, true), "g", 100 + round, 0);
        let lat_vals: Vec<f64> = (0..c * area).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let td_vals: Vec<f64> = (0..c * area).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lat = Node::constant(vec![1, c, hw, hw], lat_vals.clone());
        let td = Node::constant(vec![1, c, hw, hw], td_vals.clone());

        let out = fpn_gate_forward(&lat, &td, &gate).values();
        let reference = fpn_reference(&lat_vals, &td_vals, c, area, &gate);
        for (i, (a, b)) in out.iter().zip(&reference).enumerate() {
            assert!((a - b).abs() < 1e-10, "round {round} element {i}: {a} vs {b}");
        }
    }
}

#[test]
fn skip_gate_matches_equation_chain_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(56);
    for round in 0..10 {
        let (c, hw) = (4, 3);
        let area = hw * hw;
        let qubits = if round % 2 == 0 { 4 } else { 6 };
        let gate = QuantumSkipGate::new(
            c,
            CircuitConfig::unit(qubits, 2, round % 3 != 0),
            "g",
            200 + round,
            0,
        );
        let skip_vals: Vec<f64> = (0..c * area).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let skip = Node::constant(vec![1, c, hw, hw], skip_vals.clone());

        let out = skip_gate_forward(&skip, &gate).values();
        let reference = skip_reference(&skip_vals, c, area, &gate);
        for (i, (a, b)) in out.iter().zip(&reference).enumerate() {
            assert!((a - b).abs() < 1e-10, "round {round} element {i}: {a} vs {b}");
        }
    }
}

#[test]
fn frequency_scaled_encoding_matches_reference_too() {
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    let (c, hw) = (2, 4);
    let area = hw * hw;
    let gate = QuantumFpnGate::new(c, CircuitConfig::frequency_scaled(4, 2, true), "g", 300, 0);
    assert_eq!(gate.circuit.encoding_scale, vec![1.0, 2.0]);
    let lat_vals: Vec<f64> = (0..c * area).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let td_vals: Vec<f64> = (0..c * area).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let lat = Node::constant(vec![1, c, hw, hw], lat_vals.clone());
    let td = Node::constant(vec![1, c, hw, hw], td_vals.clone());
    let out = fpn_gate_forward(&lat, &td, &gate).values();
    let reference = fpn_reference(&lat_vals, &td_vals, c, area, &gate);
    for (a, b) in out.iter().zip(&reference) {
        assert!((a - b).abs() < 1e-10);
    }
}
