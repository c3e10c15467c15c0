//! The two-stage training loop.
//!
//! Stage 1 optimizes 0.5·BCE + 0.3·Dice + 0.2·Lovász with AdamW under
//! differential learning rates (encoder vs decoder+quantum) and cosine
//! annealing with constant-period warm restarts. Stage 2 switches to the
//! pure Lovász hinge at a single reduced rate with one cosine decay to
//! η_min. Gradients are clipped to a global norm in both stages; quantum
//! angles and the gate scale/shift are exempt from weight decay.
//!
//! Everything is keyed off the run seed: parameter init streams depend only
//! on (seed, fold, parameter name), and the per-epoch sample order and flip
//! decisions depend only on (seed, fold, epoch). Two runs that share a seed
//! therefore see identical data order and identical shared-parameter init
//! even when one of them carries quantum gates — the controlled-ablation
//! contract. Run fingerprints land in the out-of-fold report.
//!
//! Run directory layout:
//! `config.json`, `fold<k>/{log.csv,checkpoint.bin,manifest.json}`,
//! `oof_report.json`.

use crate::dataio::{
    apply_folds, assemble_input, resize_mask_nearest, stratified_folds, DataError, SampleRecord,
};
use crate::hashutil::{derive_seed, Fnv1a};
use crate::losses::{staged_loss, LossError};
use crate::metrics::{
    full_evaluation, mean_tgs_at, tta_hflip, MetricsError, PerImageScore, ProbMap,
};
use crate::qsim::CircuitConfig;
use crate::segnet::{build_model, MergeKind, ModelConfig, ModelError, ParameterBudget, SegModel};
use crate::tensorgraph::{backward, sigmoid_scalar, Node, ParamGroup, Parameter};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("non-finite loss at fold {fold}, epoch {epoch}, step {step}: {components}")]
    NonFiniteLoss {
        fold: usize,
        epoch: usize,
        step: usize,
        components: String,
    },
    #[error("fold {0} has an empty train or validation split")]
    EmptyFold(usize),
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("run directory: {0}")]
    RunDir(String),
}

/// Optimization hyperparameters. Defaults are the desk-scale settings; the
/// published schedule uses 100/60 epochs with the same rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lr_encoder: f64,
    pub lr_decoder_quantum: f64,
    pub stage2_lr: f64,
    pub eta_min: f64,
    pub t0: usize,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub folds: usize,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 12,
            stage2_epochs: 6,
            lr_encoder: 3e-5,
            lr_decoder_quantum: 3e-4,
            stage2_lr: 9e-5,
            eta_min: 3e-7,
            t0: 10,
            clip_norm: 1.0,
            batch_size: 8,
            seed: 7,
            folds: 5,
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("lr_encoder", self.lr_encoder),
            ("lr_decoder_quantum", self.lr_decoder_quantum),
            ("stage2_lr", self.stage2_lr),
            ("eta_min", self.eta_min),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::BadConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::BadConfig("weight_decay must be non-negative".into()));
        }
        if self.stage1_epochs < 1 {
            return Err(TrainError::BadConfig("stage1_epochs must be at least 1".into()));
        }
        if self.t0 < 1 {
            return Err(TrainError::BadConfig("t0 must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        if self.folds < 2 {
            return Err(TrainError::BadConfig("folds must be at least 2".into()));
        }
        Ok(())
    }
}

/// A full run specification: optimization plus model shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

/// Epoch diagnostics of the quantum parameter group: the l2 norm and the
/// across-parameter population variance of the epoch-averaged gradient, with
/// the 2^−n barren-plateau reference floor attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantumGradStats {
    pub epoch: usize,
    pub l2_norm: f64,
    pub variance: f64,
    pub bp_floor: f64,
}

/// Stats over a flattened quantum-group gradient vector.
pub fn quantum_grad_stats(
    flat: &[f64],
    n_qubits: usize,
    epoch: usize,
) -> Result<QuantumGradStats, TrainError> {
    if flat.is_empty() {
        return Err(TrainError::BadConfig("no quantum parameters to diagnose".into()));
    }
    let n = flat.len() as f64;
    let l2_norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
    let mean = flat.iter().sum::<f64>() / n;
    let variance = flat.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n;
    Ok(QuantumGradStats {
        epoch,
        l2_norm,
        variance,
        bp_floor: bp_floor(n_qubits),
    })
}

/// The 2^−n reference floor for gradient-variance diagnostics.
pub fn bp_floor(n_qubits: usize) -> f64 {
    0.5f64.powi(n_qubits as i32)
}

/// Cosine annealing with warm restarts at a constant period `t0`.
pub fn cosine_warm_restart_lr(base_lr: f64, eta_min: f64, t0: usize, epoch: usize) -> f64 {
    assert!(t0 >= 1, "t0 must be at least 1");
    let e = (epoch % t0) as f64;
    eta_min + 0.5 * (base_lr - eta_min) * (1.0 + (PI * e / t0 as f64).cos())
}

/// Single cosine decay from `base_lr` toward `eta_min` over `total` epochs.
pub fn cosine_decay_lr(base_lr: f64, eta_min: f64, total: usize, epoch: usize) -> f64 {
    assert!(total >= 1, "total must be at least 1");
    let e = (epoch.min(total)) as f64;
    eta_min + 0.5 * (base_lr - eta_min) * (1.0 + (PI * e / total as f64).cos())
}

/// Global-norm clipping across all parameter gradients. Scales every
/// gradient by max_norm/norm when the joint norm exceeds the cap and
/// returns the factor applied (1.0 otherwise).
pub fn clip_gradients(params: &[Parameter], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let mut total = 0.0;
    for p in params {
        total += p.node.grad().iter().map(|g| g * g).sum::<f64>();
    }
    let norm = total.sqrt();
    if norm <= max_norm {
        return 1.0;
    }
    let factor = max_norm / norm;
    for p in params {
        p.node.scale_grad(factor);
    }
    factor
}

/// Decoupled-weight-decay Adam with bias correction, β = (0.9, 0.999),
/// ε = 1e-8. Parameters flagged `no_decay` skip the decay term.
pub struct AdamW {
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamW {
    pub fn new(params: &[Parameter]) -> AdamW {
        AdamW {
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One update over all parameters; `lr_for` supplies the per-group rate.
    pub fn step(&mut self, params: &[Parameter], lr_for: &dyn Fn(&Parameter) -> f64, weight_decay: f64) {
        self.step += 1;
        let bias1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (i, p) in params.iter().enumerate() {
            let lr = lr_for(p);
            let grads = p.node.grad();
            let mut values = p.node.values();
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for k in 0..values.len() {
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * grads[k];
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * grads[k] * grads[k];
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                values[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                if p.decay && weight_decay > 0.0 {
                    values[k] -= lr * weight_decay * values[k];
                }
            }
            p.node.set_values(&values);
        }
    }
}

/// Summary returned by [`train`] and serialized as `oof_report.json`.
///
/// `fold_initial_loss` / `fold_final_loss` report the fixed 0.5·BCE +
/// 0.3·Dice + 0.2·Lovász composite at the first and last epoch, so the pair
/// stays comparable across the stage boundary (the stage-2 optimization
/// target alone would change scale mid-run).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OofReport {
    pub tgs_map: f64,
    pub best_threshold: f64,
    pub n_empty_correct: usize,
    pub batch_order_hash: String,
    pub shared_init_hash: String,
    pub fold_initial_loss: Vec<f64>,
    pub fold_final_loss: Vec<f64>,
    pub quantum_parameters: usize,
    pub per_image: Vec<PerImageScore>,
}

/// (sample id, averaged probabilities, ground truth at model resolution).
type OofPrediction = (String, ProbMap, crate::dataio::Mask);

struct PreparedSample {
    id: String,
    input: Vec<f64>,
    target: Vec<f64>,
    fold: usize,
}

fn prepare_samples(records: &[SampleRecord], resolution: usize) -> Result<Vec<PreparedSample>, TrainError> {
    records
        .iter()
        .map(|r| {
            let input = assemble_input(r, resolution)?;
            let mask = resize_mask_nearest(&r.mask, resolution, resolution);
            Ok(PreparedSample {
                id: r.id.clone(),
                input,
                target: mask.pixels.iter().map(|&p| f64::from(p)).collect(),
                fold: r.fold,
            })
        })
        .collect()
}

fn hflip_channels(data: &[f64], channels: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for c in 0..channels {
        let base = c * r * r;
        for y in 0..r {
            for x in 0..r {
                out[base + y * r + x] = data[base + y * r + (r - 1 - x)];
            }
        }
    }
    out
}

fn format_float(v: f64) -> String {
    format!("{v:.6e}")
}

/// Hash of all initial values of parameters outside the quantum gates, in
/// construction order. Equal across the quantum/classical ablation pair.
fn shared_init_hash(hasher: &mut Fnv1a, model: &SegModel) {
    for p in model.parameters() {
        if p.name.contains(".gate.") {
            continue;
        }
        for v in p.node.values() {
            hasher.write_f64(v);
        }
    }
}

struct EpochPlan {
    order: Vec<usize>,
    flips: Vec<bool>,
}

fn epoch_plan(train_idx: &[usize], seed: u64, fold: usize, epoch: usize) -> EpochPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &["order", &fold.to_string(), &epoch.to_string()],
    ));
    let mut order = train_idx.to_vec();
    order.shuffle(&mut rng);
    let flips = (0..order.len()).map(|_| rng.gen_bool(0.5)).collect();
    EpochPlan { order, flips }
}

fn batch_nodes(
    samples: &[PreparedSample],
    picks: &[(usize, bool)],
    channels: usize,
    r: usize,
) -> (Node, Vec<f64>) {
    let b = picks.len();
    let mut input = Vec::with_capacity(b * channels * r * r);
    let mut target = Vec::with_capacity(b * r * r);
    for &(idx, flip) in picks {
        let s = &samples[idx];
        if flip {
            input.extend(hflip_channels(&s.input, channels, r));
            target.extend(hflip_channels(&s.target, 1, r));
        } else {
            input.extend_from_slice(&s.input);
            target.extend_from_slice(&s.target);
        }
    }
    (Node::constant(vec![b, channels, r, r], input), target)
}

fn validation_probs(model: &SegModel, samples: &[PreparedSample], idx: &[usize], batch: usize) -> Vec<ProbMap> {
    let r = model.config.resolution;
    let c = model.config.input_channels;
    let mut probs = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch) {
        let picks: Vec<(usize, bool)> = chunk.iter().map(|&i| (i, false)).collect();
        let (input, _) = batch_nodes(samples, &picks, c, r);
        let logits = model.forward(&input).values();
        for i in 0..chunk.len() {
            probs.push(ProbMap::new(
                r,
                r,
                logits[i * r * r..(i + 1) * r * r]
                    .iter()
                    .map(|&z| sigmoid_scalar(z))
                    .collect(),
            ));
        }
    }
    probs
}

fn target_masks(samples: &[PreparedSample], idx: &[usize], r: usize) -> Vec<crate::dataio::Mask> {
    idx.iter()
        .map(|&i| {
            crate::dataio::Mask::new(
                r,
                r,
                samples[i].target.iter().map(|&t| t as u8).collect(),
            )
        })
        .collect()
}

/// Trains all folds, writes the run directory, and returns the pooled
/// out-of-fold report. Deterministic for a fixed config and seed.
pub fn train(
    config: &RunConfig,
    records: &[SampleRecord],
    out_dir: &Path,
    verbose: bool,
) -> Result<OofReport, TrainError> {
    config.train.validate()?;
    config.model.validate()?;
    let tc = &config.train;
    let mc = &config.model;
    let r = mc.resolution;
    let channels = mc.input_channels;

    let mut records = records.to_vec();
    let plan = stratified_folds(&records, tc.folds, tc.seed)?;
    apply_folds(&mut records, &plan);
    let samples = prepare_samples(&records, r)?;

    std::fs::create_dir_all(out_dir)?;
    let budget = build_model(mc, tc.seed, 0)?.parameter_budget();
    write_config_json(out_dir, config, &budget)?;

    let total_epochs = tc.stage1_epochs + tc.stage2_epochs;
    let mut order_hasher = Fnv1a::new();
    let mut init_hasher = Fnv1a::new();
    let mut fold_initial_loss = Vec::with_capacity(tc.folds);
    let mut fold_final_loss = Vec::with_capacity(tc.folds);
    let mut oof: Vec<OofPrediction> = Vec::new();

    for fold in 0..tc.folds {
        let train_idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].fold != fold).collect();
        let val_idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].fold == fold).collect();
        if train_idx.is_empty() || val_idx.is_empty() {
            return Err(TrainError::EmptyFold(fold));
        }

        let model = build_model(mc, tc.seed, fold)?;
        shared_init_hash(&mut init_hasher, &model);
        let params = model.parameters().to_vec();
        let has_quantum = params.iter().any(|p| p.group == ParamGroup::Quantum);
        let mut optimizer = AdamW::new(&params);
        let mut log = String::from(
            "epoch,stage,lr,bce,dice,lovasz,total,val_tgs_map,q_grad_norm,q_grad_var\n",
        );

        for epoch in 0..total_epochs {
            let stage: u8 = if epoch < tc.stage1_epochs { 1 } else { 2 };
            let (lr_encoder, lr_rest) = if stage == 1 {
                (
                    cosine_warm_restart_lr(tc.lr_encoder, tc.eta_min, tc.t0, epoch),
                    cosine_warm_restart_lr(tc.lr_decoder_quantum, tc.eta_min, tc.t0, epoch),
                )
            } else {
                let lr = cosine_decay_lr(
                    tc.stage2_lr,
                    tc.eta_min,
                    tc.stage2_epochs,
                    epoch - tc.stage1_epochs,
                );
                (lr, lr)
            };
            let lr_for = move |p: &Parameter| match p.group {
                ParamGroup::Encoder => lr_encoder,
                ParamGroup::Decoder | ParamGroup::Quantum => lr_rest,
            };

            let plan = epoch_plan(&train_idx, tc.seed, fold, epoch);
            order_hasher.write_u64(fold as u64);
            order_hasher.write_u64(epoch as u64);
            for (&i, &f) in plan.order.iter().zip(&plan.flips) {
                order_hasher.write_u64(i as u64);
                order_hasher.write(&[u8::from(f)]);
            }

            let mut epoch_sums = [0.0f64; 4]; // bce, dice, lovasz, total
            let mut q_grad_sum: Vec<f64> = Vec::new();
            let picks: Vec<(usize, bool)> = plan.order.iter().copied().zip(plan.flips).collect();
            let n_steps = picks.chunks(tc.batch_size).len();
            for (step, chunk) in picks.chunks(tc.batch_size).enumerate() {
                let (input, target) = batch_nodes(&samples, chunk, channels, r);
                let logits = model.forward(&input);
                let breakdown = staged_loss(&logits, &target, stage)?;
                let all_finite = breakdown.total.is_finite()
                    && breakdown.bce.is_finite()
                    && breakdown.dice.is_finite()
                    && breakdown.lovasz.is_finite();
                if !all_finite {
                    return Err(TrainError::NonFiniteLoss {
                        fold,
                        epoch,
                        step,
                        components: format!(
                            "bce={} dice={} lovasz={}",
                            breakdown.bce, breakdown.dice, breakdown.lovasz
                        ),
                    });
                }
                epoch_sums[0] += breakdown.bce;
                epoch_sums[1] += breakdown.dice;
                epoch_sums[2] += breakdown.lovasz;
                epoch_sums[3] += breakdown.total;

                for p in &params {
                    p.node.zero_grad();
                }
                backward(&breakdown.total_node);

                if has_quantum {
                    // Diagnostics see the raw gradients, before clipping.
                    let mut flat = Vec::new();
                    for p in &params {
                        if p.group == ParamGroup::Quantum {
                            flat.extend(p.node.grad());
                        }
                    }
                    if q_grad_sum.is_empty() {
                        q_grad_sum = flat;
                    } else {
                        for (acc, g) in q_grad_sum.iter_mut().zip(&flat) {
                            *acc += g;
                        }
                    }
                }

                clip_gradients(&params, tc.clip_norm);
                optimizer.step(&params, &lr_for, tc.weight_decay);
            }

            let means: Vec<f64> = epoch_sums.iter().map(|s| s / n_steps as f64).collect();
            let composite = {
                let (wb, wd, wl) = crate::losses::STAGE1_WEIGHTS;
                wb * means[0] + wd * means[1] + wl * means[2]
            };
            if epoch == 0 {
                fold_initial_loss.push(composite);
            }
            if epoch + 1 == total_epochs {
                fold_final_loss.push(composite);
            }

            let val_probs = validation_probs(&model, &samples, &val_idx, tc.batch_size);
            let val_gts = target_masks(&samples, &val_idx, r);
            let val_tgs = mean_tgs_at(&val_probs, &val_gts, 0.5);

            let (qn, qv) = if has_quantum {
                let avg: Vec<f64> = q_grad_sum.iter().map(|s| s / n_steps as f64).collect();
                let stats = quantum_grad_stats(&avg, mc.qubits, epoch)?;
                (format_float(stats.l2_norm), format_float(stats.variance))
            } else {
                (String::new(), String::new())
            };
            log.push_str(&format!(
                "{epoch},{stage},{},{},{},{},{},{},{qn},{qv}\n",
                format_float(lr_rest),
                format_float(means[0]),
                format_float(means[1]),
                format_float(means[2]),
                format_float(means[3]),
                format_float(val_tgs),
            ));
            if verbose {
                eprintln!(
                    "fold {fold} epoch {epoch} stage {stage}: loss {:.4} val_tgs {:.4}",
                    means[3], val_tgs
                );
            }
        }

        let fold_dir = out_dir.join(format!("fold{fold}"));
        std::fs::create_dir_all(&fold_dir)?;
        std::fs::write(fold_dir.join("log.csv"), &log)?;
        model.save_checkpoint(&fold_dir)?;

        // Out-of-fold predictions with flip TTA at the final weights.
        for chunk in val_idx.chunks(tc.batch_size) {
            let picks: Vec<(usize, bool)> = chunk.iter().map(|&i| (i, false)).collect();
            let (input, _) = batch_nodes(&samples, &picks, channels, r);
            let probs = tta_hflip(&model, &input.values(), chunk.len());
            for (k, &i) in chunk.iter().enumerate() {
                let gt = crate::dataio::Mask::new(
                    r,
                    r,
                    samples[i].target.iter().map(|&t| t as u8).collect(),
                );
                oof.push((samples[i].id.clone(), probs[k].clone(), gt));
            }
        }
    }

    let ids: Vec<String> = oof.iter().map(|(id, _, _)| id.clone()).collect();
    let probs: Vec<ProbMap> = oof.iter().map(|(_, p, _)| p.clone()).collect();
    let gts: Vec<crate::dataio::Mask> = oof.iter().map(|(_, _, g)| g.clone()).collect();
    let eval = full_evaluation(&ids, &probs, &gts)?;

    let report = OofReport {
        tgs_map: eval.tgs_map,
        best_threshold: eval.best_threshold,
        n_empty_correct: eval.n_empty_correct,
        batch_order_hash: format!("{:016x}", order_hasher.finish()),
        shared_init_hash: format!("{:016x}", init_hasher.finish()),
        fold_initial_loss,
        fold_final_loss,
        quantum_parameters: budget.quantum,
        per_image: eval.per_image,
    };
    std::fs::write(
        out_dir.join("oof_report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    Ok(report)
}

fn write_config_json(
    out_dir: &Path,
    config: &RunConfig,
    budget: &ParameterBudget,
) -> Result<(), TrainError> {
    #[derive(Serialize)]
    struct ResolvedConfig<'a> {
        train: &'a TrainConfig,
        model: &'a ModelConfig,
        parameters: &'a ParameterBudget,
    }
    let json = serde_json::to_string_pretty(&ResolvedConfig {
        train: &config.train,
        model: &config.model,
        parameters: budget,
    })
    .expect("config serializes");
    std::fs::write(out_dir.join("config.json"), json)?;
    Ok(())
}

/// One ablation leg.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub merge: String,
    pub oof_tgs_map: f64,
    pub best_threshold: f64,
    pub delta_pp: f64,
}

/// Runs the matched quantum/classical pair with shared seeds and writes
/// `ablation.csv` plus both run directories under `out_dir`.
pub fn run_ablation(
    config: &RunConfig,
    records: &[SampleRecord],
    out_dir: &Path,
    verbose: bool,
) -> Result<Vec<AblationRow>, TrainError> {
    let mut quantum_cfg = config.clone();
    quantum_cfg.model.merge_kind = MergeKind::Quantum;
    let mut classical_cfg = config.clone();
    classical_cfg.model.merge_kind = MergeKind::Classical;

    let classical = train(&classical_cfg, records, &out_dir.join("classical"), verbose)?;
    let quantum = train(&quantum_cfg, records, &out_dir.join("quantum"), verbose)?;

    let delta_pp = (quantum.tgs_map - classical.tgs_map) * 100.0;
    let rows = vec![
        AblationRow {
            merge: "classical".into(),
            oof_tgs_map: classical.tgs_map,
            best_threshold: classical.best_threshold,
            delta_pp: 0.0,
        },
        AblationRow {
            merge: "quantum".into(),
            oof_tgs_map: quantum.tgs_map,
            best_threshold: quantum.best_threshold,
            delta_pp,
        },
    ];
    let mut csv = String::from("merge,oof_tgs_map,best_threshold,delta_pp\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.merge,
            format_float(row.oof_tgs_map),
            format_float(row.best_threshold),
            format_float(row.delta_pp),
        ));
    }
    std::fs::write(out_dir.join("ablation.csv"), csv)?;
    Ok(rows)
}

/// Re-evaluates a finished run: reloads every fold checkpoint, recomputes
/// pooled out-of-fold predictions with flip TTA, and reruns the threshold
/// search. `records` must be the corpus the run was trained on.
pub fn evaluate_run(
    run_dir: &Path,
    records: &[SampleRecord],
) -> Result<crate::metrics::EvalResult, TrainError> {
    let config = load_run_config(run_dir)?;
    let tc = &config.train;
    let mc = &config.model;
    let r = mc.resolution;

    let mut records = records.to_vec();
    let plan = stratified_folds(&records, tc.folds, tc.seed)?;
    apply_folds(&mut records, &plan);
    let samples = prepare_samples(&records, r)?;

    let mut oof: Vec<OofPrediction> = Vec::new();
    for fold in 0..tc.folds {
        let fold_dir = run_dir.join(format!("fold{fold}"));
        if !fold_dir.exists() {
            return Err(TrainError::RunDir(format!(
                "missing {}",
                fold_dir.display()
            )));
        }
        let model = build_model(mc, tc.seed, fold)?;
        model.load_checkpoint(&fold_dir)?;
        let val_idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].fold == fold).collect();
        for chunk in val_idx.chunks(tc.batch_size) {
            let picks: Vec<(usize, bool)> = chunk.iter().map(|&i| (i, false)).collect();
            let (input, _) = batch_nodes(&samples, &picks, mc.input_channels, r);
            let probs = tta_hflip(&model, &input.values(), chunk.len());
            for (k, &i) in chunk.iter().enumerate() {
                let gt = crate::dataio::Mask::new(
                    r,
                    r,
                    samples[i].target.iter().map(|&t| t as u8).collect(),
                );
                oof.push((samples[i].id.clone(), probs[k].clone(), gt));
            }
        }
    }
    let ids: Vec<String> = oof.iter().map(|(id, _, _)| id.clone()).collect();
    let probs: Vec<ProbMap> = oof.iter().map(|(_, p, _)| p.clone()).collect();
    let gts: Vec<crate::dataio::Mask> = oof.iter().map(|(_, _, g)| g.clone()).collect();
    Ok(full_evaluation(&ids, &probs, &gts)?)
}

/// Reads back the resolved `config.json` of a run directory.
pub fn load_run_config(run_dir: &Path) -> Result<RunConfig, TrainError> {
    let path = run_dir.join("config.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| TrainError::RunDir(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| TrainError::RunDir(format!("{}: {e}", path.display())))
}

/// Per-circuit diagnostic used by the CLI: expectations plus parameter-shift
/// gradients of Σ⟨Z_i⟩ for a given input and angle assignment.
pub struct CircuitDiagnostics {
    pub expectations: Vec<f64>,
    pub d_angles: Vec<f64>,
    pub d_x: Vec<f64>,
    pub bp_floor: f64,
}

pub fn diagnose_circuit(
    x: &[f64],
    config: &CircuitConfig,
    angles: &[f64],
) -> Result<CircuitDiagnostics, TrainError> {
    let params = crate::qsim::CircuitParams::new(config.clone(), angles.to_vec());
    let expectations = crate::qsim::run_circuit(x, &params)
        .map_err(|e| TrainError::BadConfig(e.to_string()))?;
    let upstream = vec![1.0; config.n_qubits];
    let (d_angles, d_x) = crate::qsim::circuit_gradients(x, &params, &upstream)
        .map_err(|e| TrainError::BadConfig(e.to_string()))?;
    Ok(CircuitDiagnostics {
        expectations,
        d_angles,
        d_x,
        bp_floor: bp_floor(config.n_qubits),
    })
}
