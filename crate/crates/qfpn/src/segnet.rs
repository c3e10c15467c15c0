//! Toy encoder-decoder assembly.
//!
//! A four-stage convolutional encoder (3×3 conv, relu, 2×2 max-pool per
//! stage) feeds one of two decoders:
//!
//! - `fpn`: 1×1 lateral projections to a shared pyramid width, a top-down
//!   pathway with nearest 2× upsampling, and a pluggable merge at each of
//!   the three junctions — the quantum gate or classical addition — followed
//!   by a 3×3 smoothing conv per level and a head producing one logit
//!   channel at input resolution.
//! - `unet_skip`: a mirrored decoder with channel concatenation, where each
//!   of the four skip levels (the deepest being the bottleneck) optionally
//!   passes through a quantum skip gate. With identity skips this is the
//!   plain baseline.
//!
//! The two merge kinds of the `fpn` topology build parameter sets that
//! differ only in the `gate.*` names, which is what makes the ablation a
//! controlled comparison.

use crate::fusion::{
    classical_fpn_merge, fpn_gate_forward, skip_gate_forward, QuantumFpnGate, QuantumSkipGate,
};
use crate::initialize::fan_in_leaf;
use crate::qsim::CircuitConfig;
use crate::tensorgraph::{
    concat, conv2d, maxpool2x, relu, upsample_nearest2x, Node, ParamGroup, Parameter,
};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    UnetSkip,
    Fpn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeKind {
    Quantum,
    Classical,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingScaleKind {
    Unit,
    Frequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipPlacement {
    AllLevels,
    BottleneckOnly,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("encoder_widths must have exactly 4 entries, got {0}")]
    BadWidths(usize),
    #[error("resolution {0} must be a multiple of 16 (four downsampling stages)")]
    BadResolution(usize),
    #[error("qubits must be 4 or 6, got {0}")]
    BadQubits(usize),
    #[error("layers must be at least 1")]
    BadLayers,
    #[error("input_channels must be at least 1")]
    BadInputChannels,
    #[error("{0}")]
    BadCombination(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
}

/// Everything that determines the network's shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub topology: Topology,
    pub merge_kind: MergeKind,
    pub encoder_widths: Vec<usize>,
    pub input_channels: usize,
    pub resolution: usize,
    pub qubits: usize,
    pub layers: usize,
    pub reupload: bool,
    pub encoding_scale_kind: EncodingScaleKind,
    pub skip_placement: SkipPlacement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            topology: Topology::Fpn,
            merge_kind: MergeKind::Quantum,
            encoder_widths: vec![16, 32, 64, 128],
            input_channels: 5,
            resolution: 64,
            qubits: 4,
            layers: 2,
            reupload: true,
            encoding_scale_kind: EncodingScaleKind::Unit,
            skip_placement: SkipPlacement::AllLevels,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.encoder_widths.len() != 4 {
            return Err(ModelError::BadWidths(self.encoder_widths.len()));
        }
        if self.resolution < 16 || self.resolution % 16 != 0 {
            return Err(ModelError::BadResolution(self.resolution));
        }
        if self.qubits != 4 && self.qubits != 6 {
            return Err(ModelError::BadQubits(self.qubits));
        }
        if self.layers < 1 {
            return Err(ModelError::BadLayers);
        }
        if self.input_channels < 1 {
            return Err(ModelError::BadInputChannels);
        }
        match (self.topology, self.merge_kind) {
            (Topology::Fpn, MergeKind::Identity) => Err(ModelError::BadCombination(
                "topology 'fpn' needs a merge operator: use merge 'quantum' or 'classical'".into(),
            )),
            (Topology::UnetSkip, MergeKind::Classical) => Err(ModelError::BadCombination(
                "topology 'unet_skip' has no FPN merge; use merge 'identity' for plain skips \
                 or merge 'quantum' for quantum skip gates"
                    .into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn circuit(&self) -> CircuitConfig {
        match self.encoding_scale_kind {
            EncodingScaleKind::Unit => CircuitConfig::unit(self.qubits, self.layers, self.reupload),
            EncodingScaleKind::Frequency => {
                CircuitConfig::frequency_scaled(self.qubits, self.layers, self.reupload)
            }
        }
    }

    fn pyramid_width(&self) -> usize {
        self.encoder_widths[1]
    }
}

struct ConvBlock {
    weight: Parameter,
    bias: Parameter,
    stride: usize,
    padding: usize,
}

impl ConvBlock {
    fn new(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        padding: usize,
        group: ParamGroup,
        seed: u64,
        fold: usize,
    ) -> ConvBlock {
        let wname = format!("{prefix}.weight");
        let weight = Parameter::new(
            fan_in_leaf(vec![c_out, c_in, k, k], c_in * k * k, seed, fold, &wname),
            wname,
            group,
        );
        let bias = Parameter::new(
            Node::leaf(vec![c_out], vec![0.0; c_out]),
            format!("{prefix}.bias"),
            group,
        );
        ConvBlock {
            weight,
            bias,
            stride: 1,
            padding,
        }
    }

    fn forward(&self, x: &Node) -> Node {
        conv2d(x, &self.weight.node, &self.bias.node, self.stride, self.padding)
    }

    fn params(&self) -> Vec<Parameter> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

enum Decoder {
    Fpn {
        laterals: Vec<ConvBlock>,
        gates: Vec<QuantumFpnGate>,
        smooths: Vec<ConvBlock>,
        head: ConvBlock,
    },
    Unet {
        gates: Vec<Option<QuantumSkipGate>>,
        blocks: Vec<ConvBlock>,
        head: ConvBlock,
    },
}

/// A built model: the layer structure plus the flat named parameter list
/// (construction order, used for manifests and checkpoints).
pub struct SegModel {
    pub config: ModelConfig,
    encoder: Vec<ConvBlock>,
    decoder: Decoder,
    params: Vec<Parameter>,
}

/// Parameter counts reported in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterBudget {
    pub total: usize,
    pub quantum: usize,
    pub gate_scale_shift: usize,
    pub classical: usize,
}

/// One manifest row of a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
}

pub fn build_model(config: &ModelConfig, seed: u64, fold: usize) -> Result<SegModel, ModelError> {
    config.validate()?;
    let widths = &config.encoder_widths;
    let mut params = Vec::new();

    let mut encoder = Vec::with_capacity(4);
    let mut c_in = config.input_channels;
    for (i, &w) in widths.iter().enumerate() {
        let block = ConvBlock::new(
            &format!("encoder.stage{i}.conv"),
            c_in,
            w,
            3,
            1,
            ParamGroup::Encoder,
            seed,
            fold,
        );
        params.extend(block.params());
        encoder.push(block);
        c_in = w;
    }

    let decoder = match config.topology {
        Topology::Fpn => {
            let p = config.pyramid_width();
            let mut laterals = Vec::with_capacity(4);
            for (i, &w) in widths.iter().enumerate() {
                let block = ConvBlock::new(
                    &format!("fpn.lateral{i}"),
                    w,
                    p,
                    1,
                    0,
                    ParamGroup::Decoder,
                    seed,
                    fold,
                );
                params.extend(block.params());
                laterals.push(block);
            }
            let mut gates = Vec::new();
            if config.merge_kind == MergeKind::Quantum {
                for i in 0..3 {
                    let gate = QuantumFpnGate::new(
                        p,
                        config.circuit(),
                        &format!("fpn.merge{i}.gate"),
                        seed,
                        fold,
                    );
                    params.extend(gate.parameters());
                    gates.push(gate);
                }
            }
            let mut smooths = Vec::with_capacity(3);
            for i in 0..3 {
                let block = ConvBlock::new(
                    &format!("fpn.smooth{i}"),
                    p,
                    p,
                    3,
                    1,
                    ParamGroup::Decoder,
                    seed,
                    fold,
                );
                params.extend(block.params());
                smooths.push(block);
            }
            let head = ConvBlock::new("head.conv", p, 1, 3, 1, ParamGroup::Decoder, seed, fold);
            params.extend(head.params());
            Decoder::Fpn {
                laterals,
                gates,
                smooths,
                head,
            }
        }
        Topology::UnetSkip => {
            let mut gates = Vec::with_capacity(4);
            for (i, &w) in widths.iter().enumerate() {
                let gated = config.merge_kind == MergeKind::Quantum
                    && (config.skip_placement == SkipPlacement::AllLevels || i == 3);
                if gated {
                    let gate = QuantumSkipGate::new(
                        w,
                        config.circuit(),
                        &format!("skip{i}.gate"),
                        seed,
                        fold,
                    );
                    params.extend(gate.parameters());
                    gates.push(Some(gate));
                } else {
                    gates.push(None);
                }
            }
            let mut blocks = Vec::with_capacity(3);
            // Deepest first: concat(up(w3), skip w2) -> w2, then down to w0.
            for i in 0..3 {
                let (up_w, skip_w) = (widths[3 - i], widths[2 - i]);
                let block = ConvBlock::new(
                    &format!("decoder.block{i}"),
                    up_w + skip_w,
                    skip_w,
                    3,
                    1,
                    ParamGroup::Decoder,
                    seed,
                    fold,
                );
                params.extend(block.params());
                blocks.push(block);
            }
            let head = ConvBlock::new("head.conv", widths[0], 1, 3, 1, ParamGroup::Decoder, seed, fold);
            params.extend(head.params());
            Decoder::Unet { gates, blocks, head }
        }
    };

    Ok(SegModel {
        config: config.clone(),
        encoder,
        decoder,
        params,
    })
}

impl SegModel {
    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn parameter_budget(&self) -> ParameterBudget {
        let mut budget = ParameterBudget {
            total: 0,
            quantum: 0,
            gate_scale_shift: 0,
            classical: 0,
        };
        for p in &self.params {
            let n = p.numel();
            budget.total += n;
            if p.group == ParamGroup::Quantum {
                budget.quantum += n;
            } else {
                budget.classical += n;
            }
            if p.name.ends_with(".scale") || p.name.ends_with(".shift") {
                budget.gate_scale_shift += n;
            }
        }
        budget
    }

    /// Logits at input resolution: `[B, input_channels, R, R]` → `[B, 1, R, R]`.
    pub fn forward(&self, batch: &Node) -> Node {
        let s = batch.shape();
        assert_eq!(s.len(), 4, "forward: expected [B,C,R,R], got {s:?}");
        assert_eq!(
            s[1], self.config.input_channels,
            "forward: batch channels {s:?} vs config {}",
            self.config.input_channels
        );
        assert!(
            s[2] == self.config.resolution && s[3] == self.config.resolution,
            "forward: batch spatial {s:?} vs configured resolution {}",
            self.config.resolution
        );

        let mut features = Vec::with_capacity(4);
        let mut x = batch.clone();
        for stage in &self.encoder {
            x = maxpool2x(&relu(&stage.forward(&x)));
            features.push(x.clone());
        }

        match &self.decoder {
            Decoder::Fpn {
                laterals,
                gates,
                smooths,
                head,
            } => {
                let p: Vec<Node> = features
                    .iter()
                    .zip(laterals)
                    .map(|(c, l)| l.forward(c))
                    .collect();
                let mut top = p[3].clone();
                for (i, smooth) in smooths.iter().enumerate() {
                    let lateral = &p[2 - i];
                    let upsampled = upsample_nearest2x(&top);
                    let merged = match self.config.merge_kind {
                        MergeKind::Quantum => fpn_gate_forward(lateral, &upsampled, &gates[i]),
                        MergeKind::Classical => classical_fpn_merge(lateral, &upsampled),
                        MergeKind::Identity => unreachable!("rejected by validate"),
                    };
                    top = relu(&smooth.forward(&merged));
                }
                head.forward(&upsample_nearest2x(&top))
            }
            Decoder::Unet { gates, blocks, head } => {
                let skip = |i: usize| -> Node {
                    match &gates[i] {
                        Some(g) => skip_gate_forward(&features[i], g),
                        None => features[i].clone(),
                    }
                };
                let mut x = skip(3);
                for (i, block) in blocks.iter().enumerate() {
                    let cat = concat(&[&upsample_nearest2x(&x), &skip(2 - i)], 1);
                    x = relu(&block.forward(&cat));
                }
                head.forward(&upsample_nearest2x(&x))
            }
        }
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.params
            .iter()
            .map(|p| ManifestEntry {
                name: p.name.clone(),
                shape: p.node.shape(),
                group: p.group,
            })
            .collect()
    }

    /// Writes `manifest.json` plus `checkpoint.bin` (little-endian f64
    /// values, manifest order) into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), ModelError> {
        std::fs::create_dir_all(dir)?;
        let manifest = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        std::fs::write(dir.join("manifest.json"), manifest)?;
        let mut bin = std::fs::File::create(dir.join("checkpoint.bin"))?;
        for p in &self.params {
            for v in p.node.values() {
                bin.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Restores parameter values from a checkpoint written by a model of the
    /// same configuration.
    pub fn load_checkpoint(&self, dir: &Path) -> Result<(), ModelError> {
        let manifest: Vec<ManifestEntry> =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)
                .map_err(|e| ModelError::Manifest(e.to_string()))?;
        if manifest.len() != self.params.len() {
            return Err(ModelError::Manifest(format!(
                "{} entries but the model has {} parameters",
                manifest.len(),
                self.params.len()
            )));
        }
        let mut bin = std::fs::File::open(dir.join("checkpoint.bin"))?;
        for (entry, p) in manifest.iter().zip(&self.params) {
            if entry.name != p.name || entry.shape != p.node.shape() {
                return Err(ModelError::Manifest(format!(
                    "entry '{}' {:?} does not match parameter '{}' {:?}",
                    entry.name,
                    entry.shape,
                    p.name,
                    p.node.shape()
                )));
            }
            let n: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            bin.read_exact(&mut raw)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            p.node.set_values(&values);
        }
        Ok(())
    }
}
