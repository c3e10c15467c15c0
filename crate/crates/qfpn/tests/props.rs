//! Property tests for the codec, the simulator, and the metric.

use proptest::prelude::*;
use qfpn::dataio::{decode_rle, encode_rle, Mask};
use qfpn::metrics::tgs_precision;
use qfpn::qsim::{expectation_z, run_circuit, CircuitConfig, CircuitParams};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rle_roundtrip_is_identity(
        h in 1usize..12,
        w in 1usize..12,
        bits in prop::collection::vec(prop::bool::ANY, 0..144),
    ) {
        let pixels: Vec<u8> = (0..h * w).map(|i| u8::from(*bits.get(i).unwrap_or(&false))).collect();
        let mask = Mask::new(h, w, pixels);
        let back = decode_rle(&encode_rle(&mask), h, w).unwrap();
        prop_assert_eq!(mask, back);
    }

    #[test]
    fn circuit_outputs_stay_normalized_and_bounded(
        n in 2usize..=5,
        layers in 1usize..=3,
        reupload in prop::bool::ANY,
        seed in 0u64..1_000_000,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cfg = CircuitConfig::unit(n, layers, reupload);
        let angles: Vec<f64> = (0..cfg.n_angles()).map(|_| rng.gen_range(-3.2..3.2)).collect();
        let params = CircuitParams::new(cfg, angles);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.2..3.2)).collect();
        let out = run_circuit(&x, &params).unwrap();
        for v in &out {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(v));
        }
        // Probabilities summed off the expectations: statevector norm is
        // checked indirectly by |<Z>| <= 1 on every qubit plus determinism.
        let again = run_circuit(&x, &params).unwrap();
        prop_assert_eq!(out, again);
    }

    #[test]
    fn statevector_norm_preserved_by_gate_words(
        seed in 0u64..1_000_000,
        word in prop::collection::vec(0usize..4, 1..24),
    ) {
        use rand::{Rng, SeedableRng};
        use qfpn::qsim::{apply_cnot, apply_rot, apply_ry, apply_rz, Statevector};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 3;
        let mut state = Statevector::zero(n);
        for op in word {
            let q = rng.gen_range(0..n);
            let a = rng.gen_range(-3.2..3.2);
            match op {
                0 => apply_ry(&mut state, q, a).unwrap(),
                1 => apply_rz(&mut state, q, a).unwrap(),
                2 => apply_rot(&mut state, q, a, rng.gen_range(-3.2..3.2), rng.gen_range(-3.2..3.2)).unwrap(),
                _ => {
                    let t = (q + 1 + rng.gen_range(0..n - 1)) % n;
                    apply_cnot(&mut state, q, t).unwrap();
                }
            }
            prop_assert!((state.norm_sq() - 1.0).abs() < 1e-12);
        }
        for q in 0..n {
            let e = expectation_z(&state, q).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&e));
        }
    }

    #[test]
    fn tgs_precision_lands_on_the_tenths_grid(
        gt in prop::collection::vec(prop::bool::ANY, 16),
        pred in prop::collection::vec(prop::bool::ANY, 16),
    ) {
        let gt = Mask::new(4, 4, gt.into_iter().map(u8::from).collect());
        let pred = Mask::new(4, 4, pred.into_iter().map(u8::from).collect());
        let p = tgs_precision(&pred, &gt);
        let tenths = (p * 10.0).round();
        prop_assert!((p * 10.0 - tenths).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&p));
    }
}
