//! Statevector simulator vs the dense Kronecker-product unitary oracle.



use qfpn::oracles::oracle_expectations;
use qfpn::qsim::{run_circuit, CircuitConfig, CircuitParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn random_case(rng: &mut ChaCha8Rng, n: usize, layers: usize, reupload: bool) -> (Vec<f64>, CircuitParams) {
    let scale: Vec<f64> = (0..layers).map(|_| rng.gen_range(0.5..2.0)).collect();
    let cfg = CircuitConfig::new(n, layers, reupload, scale);
    let angles = (0..cfg.n_angles()).map(|_| rng.gen_range(-PI..PI)).collect();
    let x = (0..n).map(|_| rng.gen_range(-PI..PI)).collect();
    (x, CircuitParams::new(cfg, angles))
}

#[test]
fn matches_dense_oracle_across_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for n in 2..=5 {
        for layers in 1..=2 {
            for draw in 0..100 {
                let reupload = draw % 2 == 0;
                let (x, params) = random_case(&mut rng, n, layers, reupload);
                let fast = run_circuit(&x, &params).unwrap();
                let slow = oracle_expectations(&x, &params);
                for (q, (a, b)) in fast.iter().zip(slow.iter()).enumerate() {
                    assert!(
                        (a - b).abs() < 1e-12,
                        "n={n} L={layers} draw={draw} qubit={q}: {a} vs oracle {b}"
                    );
                }
            }
        }
    }
}

#[test]
fn single_encoded_input_case() {
    // x = [pi/2, 0, 0, 0] with zero angles, one layer.
    let cfg = CircuitConfig::unit(4, 1, true);
    let params = CircuitParams::zeros(cfg);
    let x = [std::f64::consts::FRAC_PI_2, 0.0, 0.0, 0.0];
    let fast = run_circuit(&x, &params).unwrap();
    let slow = oracle_expectations(&x, &params);
    for (a, b) in fast.iter().zip(slow.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
    // Encoding puts qubit 0 on the equator; the CNOT chain propagates its
    // bit down the ring and the closing cnot(3,0) flips it back, leaving
    // (|0000> + |0111>)/sqrt(2).
    assert!((fast[0] - 1.0).abs() < 1e-12);
    assert!(fast[1].abs() < 1e-12);
    assert!(fast[2].abs() < 1e-12);
    assert!(fast[3].abs() < 1e-12);
}
