//! Finite-difference verification of every graph primitive and of the two
//! gate chains, on randomized small shapes.

use qfpn::fusion::{fpn_gate_forward, skip_gate_forward, QuantumFpnGate, QuantumSkipGate};
use qfpn::oracles::{close_rel, finite_difference};
use qfpn::qsim::CircuitConfig;
use qfpn::tensorgraph::{
    add, backward, broadcast_channelwise, concat, conv2d, global_avg_pool, linear, maxpool2x,
    mean_all, mul, quantum_node, relu, scalar_mul, sigmoid, tanh, upsample_nearest2x, Node,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-8;
const FD_STEP: f64 = 1e-5;

fn leaf(rng: &mut ChaCha8Rng, shape: &[usize]) -> Node {
    let n: usize = shape.iter().product();
    Node::leaf(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.2..1.2)).collect())
}

/// Checks d(build())/d(target) against central differences.
fn fd_check(name: &str, target: &Node, build: &dyn Fn() -> Node) {
    let loss = build();
    target.zero_grad();
    backward(&loss);
    let analytic = target.grad();
    let point = target.values();
    let mut eval = |vals: &[f64]| {
        target.set_values(vals);
        build().scalar()
    };
    let fd = finite_difference(&mut eval, &point, FD_STEP);
    target.set_values(&point);
    for (i, (a, f)) in analytic.iter().zip(&fd).enumerate() {
        assert!(
            close_rel(*a, *f, REL_TOL, ABS_FLOOR),
            "{name}[{i}]: analytic {a} vs finite difference {f}"
        );
    }
}

/// Weights the output with a fixed random mask so every element matters.
fn weighted(rng: &mut ChaCha8Rng, out: &Node) -> Node {
    let n: usize = out.shape().iter().product();
    let w = Node::constant(out.shape(), (0..n).map(|_| rng.gen_range(0.2..1.0)).collect());
    mean_all(&mul(out, &w))
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let x = leaf(&mut rng, &[1, 2, 5, 5]);
    let w = leaf(&mut rng, &[3, 2, 3, 3]);
    let b = leaf(&mut rng, &[3]);
    let build = || weighted(&mut ChaCha8Rng::seed_from_u64(7), &conv2d(&x, &w, &b, 1, 1));
    fd_check("conv2d/input", &x, &build);
    fd_check("conv2d/weight", &w, &build);
    fd_check("conv2d/bias", &b, &build);
}

#[test]
fn linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let x = leaf(&mut rng, &[3, 4]);
    let w = leaf(&mut rng, &[2, 4]);
    let b = leaf(&mut rng, &[2]);
    let build = || weighted(&mut ChaCha8Rng::seed_from_u64(8), &linear(&x, &w, Some(&b)));
    fd_check("linear/x", &x, &build);
    fd_check("linear/w", &w, &build);
    fd_check("linear/b", &b, &build);
}

#[test]
fn pooling_and_resampling_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let x = leaf(&mut rng, &[1, 2, 4, 4]);
    let gap = || weighted(&mut ChaCha8Rng::seed_from_u64(9), &global_avg_pool(&x));
    fd_check("global_avg_pool", &x, &gap);
    let up = || weighted(&mut ChaCha8Rng::seed_from_u64(10), &upsample_nearest2x(&x));
    fd_check("upsample_nearest2x", &x, &up);
    let mp = || weighted(&mut ChaCha8Rng::seed_from_u64(11), &maxpool2x(&x));
    fd_check("maxpool2x", &x, &mp);
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let a = leaf(&mut rng, &[2, 3]);
    let b = leaf(&mut rng, &[2, 3]);
    let row = leaf(&mut rng, &[3]);

    let add_build = || weighted(&mut ChaCha8Rng::seed_from_u64(12), &add(&a, &b));
    fd_check("add/a", &a, &add_build);
    fd_check("add/b", &b, &add_build);

    let mul_build = || weighted(&mut ChaCha8Rng::seed_from_u64(13), &mul(&a, &b));
    fd_check("mul/a", &a, &mul_build);
    fd_check("mul/b", &b, &mul_build);

    let brow = || weighted(&mut ChaCha8Rng::seed_from_u64(14), &mul(&a, &row));
    fd_check("mul_row/a", &a, &brow);
    fd_check("mul_row/row", &row, &brow);
    let arow = || weighted(&mut ChaCha8Rng::seed_from_u64(15), &add(&a, &row));
    fd_check("add_row/row", &row, &arow);

    let sm = || weighted(&mut ChaCha8Rng::seed_from_u64(16), &scalar_mul(&a, -1.7));
    fd_check("scalar_mul", &a, &sm);
}

#[test]
fn activation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let x = leaf(&mut rng, &[2, 5]);
    let t = || weighted(&mut ChaCha8Rng::seed_from_u64(17), &tanh(&x));
    fd_check("tanh", &x, &t);
    let s = || weighted(&mut ChaCha8Rng::seed_from_u64(18), &sigmoid(&x));
    fd_check("sigmoid", &x, &s);
    let r = || weighted(&mut ChaCha8Rng::seed_from_u64(19), &relu(&x));
    fd_check("relu", &x, &r);
}

#[test]
fn structural_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let a = leaf(&mut rng, &[2, 2]);
    let b = leaf(&mut rng, &[2, 3]);
    let cat = || weighted(&mut ChaCha8Rng::seed_from_u64(20), &concat(&[&a, &b], 1));
    fd_check("concat/a", &a, &cat);
    fd_check("concat/b", &b, &cat);

    let g = leaf(&mut rng, &[2, 3]);
    let bc = || weighted(&mut ChaCha8Rng::seed_from_u64(21), &broadcast_channelwise(&g, 3, 3));
    fd_check("broadcast_channelwise", &g, &bc);
}

#[test]
fn quantum_node_end_to_end_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let cfg = CircuitConfig::unit(4, 2, true);
    let x = Node::leaf(vec![2, 4], (0..8).map(|_| rng.gen_range(-1.5..1.5)).collect());
    let angles = Node::leaf(
        vec![2, 4, 3],
        (0..cfg.n_angles()).map(|_| rng.gen_range(-0.8..0.8)).collect(),
    );
    let build = || weighted(&mut ChaCha8Rng::seed_from_u64(22), &quantum_node(&x, &angles, &cfg));

    for (name, target) in [("quantum_node/x", &x), ("quantum_node/angles", &angles)] {
        let loss = build();
        target.zero_grad();
        backward(&loss);
        let analytic = target.grad();
        let point = target.values();
        let mut eval = |vals: &[f64]| {
            target.set_values(vals);
            build().scalar()
        };
        let fd = finite_difference(&mut eval, &point, FD_STEP);
        target.set_values(&point);
        for (i, (a, f)) in analytic.iter().zip(&fd).enumerate() {
            assert!((a - f).abs() < 1e-5, "{name}[{i}]: {a} vs {f}");
        }
    }
}

#[test]
fn skip_chain_gradients() {
    // tanh(proj(GAP)) -> circuit -> sigmoid(linear) -> multiplicative gate.
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let f_skip = leaf(&mut rng, &[1, 3, 4, 4]);
    let gate = QuantumSkipGate::new(3, CircuitConfig::unit(4, 2, true), "t.gate", 31, 0);
    let build = || weighted(&mut ChaCha8Rng::seed_from_u64(23), &skip_gate_forward(&f_skip, &gate));
    fd_check("skip/features", &f_skip, &build);
    fd_check("skip/proj", &gate.proj.node, &build);
    fd_check("skip/angles", &gate.angles.node, &build);
    fd_check("skip/out_w", &gate.out_w.node, &build);
    fd_check("skip/out_b", &gate.out_b.node, &build);
}

#[test]
fn fpn_chain_gradients() {
    // GAP/concat/compress -> scale·tanh+shift -> circuit -> sigmoid(linear)
    // -> convex combination.
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let f_lat = leaf(&mut rng, &[1, 3, 4, 4]);
    let f_td = leaf(&mut rng, &[1, 3, 4, 4]);
    let gate = QuantumFpnGate::new(3, CircuitConfig::unit(4, 2, true), "t.gate", 37, 0);
    let build = || {
        weighted(
            &mut ChaCha8Rng::seed_from_u64(24),
            &fpn_gate_forward(&f_lat, &f_td, &gate),
        )
    };
    fd_check("fpn/lat", &f_lat, &build);
    fd_check("fpn/td", &f_td, &build);
    fd_check("fpn/compress", &gate.compress.node, &build);
    fd_check("fpn/scale", &gate.scale.node, &build);
    fd_check("fpn/shift", &gate.shift.node, &build);
    fd_check("fpn/angles", &gate.angles.node, &build);
    fd_check("fpn/out_w", &gate.out_w.node, &build);
    fd_check("fpn/out_b", &gate.out_b.node, &build);
}
