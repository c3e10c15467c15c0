//! Quantum feature-fusion gates.
//!
//! Two integration topologies share the same circuit machinery. The FPN gate
//! pools both incoming streams, compresses them to one rotation angle per
//! qubit, rescales into [−π, π] with a learnable scale/shift, runs the
//! circuit, and turns the measured expectations into a per-channel mixing
//! ratio g ∈ (0,1)^C applied as g⊙F_lat + (1−g)⊙F_td. The skip gate does
//! the same on a single stream and multiplies: g⊙F_skip. The classical
//! merge used by the ablation is plain element-wise addition.
//!
//! Initialization keeps the circuit near identity (angles uniform in ±0.1,
//! scale 0.5, shift 0) and zeroes the output linear's bias so the freshly
//! built gate mixes at exactly g = 0.5.

use crate::initialize::{fan_in_leaf, uniform_leaf};
use crate::qsim::CircuitConfig;
use crate::tensorgraph::{
    add, broadcast_channelwise, concat, global_avg_pool, linear, mul, quantum_node, scalar_mul,
    sigmoid, sub, tanh, Node, ParamGroup, Parameter,
};
use std::f64::consts::PI;

/// Spread of the initial circuit angles.
const ANGLE_INIT_BOUND: f64 = 0.1;

/// One FPN merge gate: blends a lateral and a top-down stream of `channels`
/// channels through an `n`-qubit circuit.
#[derive(Debug, Clone)]
pub struct QuantumFpnGate {
    pub compress: Parameter,
    pub scale: Parameter,
    pub shift: Parameter,
    pub angles: Parameter,
    pub out_w: Parameter,
    pub out_b: Parameter,
    pub circuit: CircuitConfig,
    channels: usize,
}

impl QuantumFpnGate {
    pub fn new(channels: usize, circuit: CircuitConfig, prefix: &str, seed: u64, fold: usize) -> Self {
        let n = circuit.n_qubits;
        let name = |field: &str| format!("{prefix}.{field}");
        let compress = Parameter::new(
            fan_in_leaf(vec![n, 2 * channels], 2 * channels, seed, fold, &name("compress.weight")),
            name("compress.weight"),
            ParamGroup::Decoder,
        );
        let scale = Parameter::new(Node::leaf(vec![n], vec![0.5; n]), name("scale"), ParamGroup::Decoder)
            .no_decay();
        let shift = Parameter::new(Node::leaf(vec![n], vec![0.0; n]), name("shift"), ParamGroup::Decoder)
            .no_decay();
        let angles = Parameter::new(
            uniform_leaf(
                vec![circuit.n_layers, n, 3],
                ANGLE_INIT_BOUND,
                seed,
                fold,
                &name("circuit.angles"),
            ),
            name("circuit.angles"),
            ParamGroup::Quantum,
        )
        .no_decay();
        let out_w = Parameter::new(
            fan_in_leaf(vec![channels, n], n, seed, fold, &name("out.weight")),
            name("out.weight"),
            ParamGroup::Decoder,
        );
        let out_b = Parameter::new(
            Node::leaf(vec![channels], vec![0.0; channels]),
            name("out.bias"),
            ParamGroup::Decoder,
        );
        QuantumFpnGate {
            compress,
            scale,
            shift,
            angles,
            out_w,
            out_b,
            circuit,
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        vec![
            self.compress.clone(),
            self.scale.clone(),
            self.shift.clone(),
            self.angles.clone(),
            self.out_w.clone(),
            self.out_b.clone(),
        ]
    }
}

/// Blends the two streams through the gate; fully differentiable.
pub fn fpn_gate_forward(f_lat: &Node, f_td: &Node, gate: &QuantumFpnGate) -> Node {
    let s = f_lat.shape();
    assert_eq!(s, f_td.shape(), "fpn_gate_forward: stream shapes {s:?} vs {:?}", f_td.shape());
    assert_eq!(s.len(), 4, "fpn_gate_forward: expected [B,C,H,W], got {s:?}");
    assert_eq!(s[1], gate.channels, "fpn_gate_forward: {s:?} vs gate of {} channels", gate.channels);
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);

    let pooled = concat(&[&global_avg_pool(f_lat), &global_avg_pool(f_td)], 1);
    let v = linear(&pooled, &gate.compress.node, None);
    let x = scalar_mul(
        &add(&mul(&tanh(&v), &gate.scale.node), &gate.shift.node),
        PI,
    );
    let q = quantum_node(&x, &gate.angles.node, &gate.circuit);
    let g = sigmoid(&linear(&q, &gate.out_w.node, Some(&gate.out_b.node)));

    let ones = Node::constant(vec![b, c], vec![1.0; b * c]);
    let g_map = broadcast_channelwise(&g, h, w);
    let inv_map = broadcast_channelwise(&sub(&ones, &g), h, w);
    add(&mul(&g_map, f_lat), &mul(&inv_map, f_td))
}

/// The ablation's merge: plain element-wise addition, no parameters.
pub fn classical_fpn_merge(f_lat: &Node, f_td: &Node) -> Node {
    assert_eq!(
        f_lat.shape(),
        f_td.shape(),
        "classical_fpn_merge: stream shapes {:?} vs {:?}",
        f_lat.shape(),
        f_td.shape()
    );
    add(f_lat, f_td)
}

/// One skip-connection gate: multiplicatively modulates a single stream.
#[derive(Debug, Clone)]
pub struct QuantumSkipGate {
    pub proj: Parameter,
    pub angles: Parameter,
    pub out_w: Parameter,
    pub out_b: Parameter,
    pub circuit: CircuitConfig,
    channels: usize,
}

impl QuantumSkipGate {
    pub fn new(channels: usize, circuit: CircuitConfig, prefix: &str, seed: u64, fold: usize) -> Self {
        let n = circuit.n_qubits;
        let name = |field: &str| format!("{prefix}.{field}");
        // The projection carries no bias, so a zero feature map encodes to
        // exactly zero rotation angles.
        let proj = Parameter::new(
            fan_in_leaf(vec![n, channels], channels, seed, fold, &name("proj.weight")),
            name("proj.weight"),
            ParamGroup::Decoder,
        );
        let angles = Parameter::new(
            uniform_leaf(
                vec![circuit.n_layers, n, 3],
                ANGLE_INIT_BOUND,
                seed,
                fold,
                &name("circuit.angles"),
            ),
            name("circuit.angles"),
            ParamGroup::Quantum,
        )
        .no_decay();
        let out_w = Parameter::new(
            fan_in_leaf(vec![channels, n], n, seed, fold, &name("out.weight")),
            name("out.weight"),
            ParamGroup::Decoder,
        );
        let out_b = Parameter::new(
            Node::leaf(vec![channels], vec![0.0; channels]),
            name("out.bias"),
            ParamGroup::Decoder,
        );
        QuantumSkipGate {
            proj,
            angles,
            out_w,
            out_b,
            circuit,
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        vec![
            self.proj.clone(),
            self.angles.clone(),
            self.out_w.clone(),
            self.out_b.clone(),
        ]
    }
}

/// Gates a skip stream: g ⊙ F_skip with g from the circuit.
pub fn skip_gate_forward(f_skip: &Node, gate: &QuantumSkipGate) -> Node {
    let s = f_skip.shape();
    assert_eq!(s.len(), 4, "skip_gate_forward: expected [B,C,H,W], got {s:?}");
    assert_eq!(s[1], gate.channels, "skip_gate_forward: {s:?} vs gate of {} channels", gate.channels);
    let (h, w) = (s[2], s[3]);

    let x = scalar_mul(&tanh(&linear(&global_avg_pool(f_skip), &gate.proj.node, None)), PI);
    let q = quantum_node(&x, &gate.angles.node, &gate.circuit);
    let g = sigmoid(&linear(&q, &gate.out_w.node, Some(&gate.out_b.node)));
    mul(&broadcast_channelwise(&g, h, w), f_skip)
}
