//! Command-line surface for the qfpn pipeline: synthetic data, training,
//! evaluation, the matched quantum/classical ablation, circuit and gradient
//! diagnostics, and an RLE codec filter.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. All commands are
//! deterministic under fixed flags and seed. Numbers print with 6
//! significant digits; the JSON reports on disk keep full precision.

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use qfpn::dataio::{
    decode_rle, encode_rle, generate_synthetic, image_from_pgm_bytes, load_corpus, pgm_bytes,
    save_corpus, Image, Mask, SampleRecord,
};
use qfpn::qsim::CircuitConfig;
use qfpn::segnet::{MergeKind, ModelError, Topology};
use qfpn::trainer::{
    bp_floor, diagnose_circuit, evaluate_run, load_run_config, run_ablation, train, RunConfig,
    TrainError,
};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "qfpn",
    version,
    about = "Quantum feature-pyramid gating for binary segmentation",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus in the competition layout
    Synth {
        /// Number of samples
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Image side length in pixels
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        /// Fraction of samples with empty masks, in [0, 1)
        #[arg(long, default_value_t = 0.15)]
        empty_fraction: f64,
        /// Generator seed
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output corpus directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model with cross-validation and write a run directory
    Train {
        #[command(flatten)]
        common: TrainArgs,
        /// Output run directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate a finished run's out-of-fold predictions
    Eval {
        /// Corpus directory the run was trained on
        #[arg(long)]
        data: PathBuf,
        /// Run directory produced by `train`
        #[arg(long)]
        run: PathBuf,
        /// Output directory for eval.csv and eval_report.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the matched quantum/classical merge pair with shared seeds
    Ablate {
        /// Corpus directory
        #[arg(long)]
        data: PathBuf,
        /// Shared seed for both legs
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Optional JSON run config (flags win over file values)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for both runs and ablation.csv
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspect circuits and logged gradient diagnostics
    Diagnose {
        #[command(subcommand)]
        what: DiagnoseCommand,
    },
    /// Run-length mask codec on stdin/stdout (PGM masks)
    Rle {
        #[command(subcommand)]
        what: RleCommand,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory (train.csv, depths.csv, images/)
    #[arg(long)]
    data: PathBuf,
    /// JSON run config; explicit flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model topology: fpn or unet_skip
    #[arg(long)]
    topology: Option<String>,
    /// Merge operator: quantum, classical, or identity
    #[arg(long)]
    merge: Option<String>,
    /// Circuit width: 4 or 6 qubits
    #[arg(long)]
    qubits: Option<usize>,
    /// Re-apply the data encoding before every variational layer
    #[arg(long)]
    reupload: Option<bool>,
    /// Cross-validation fold count
    #[arg(long)]
    folds: Option<usize>,
    /// Run seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum DiagnoseCommand {
    /// Print expectations and parameter-shift gradients for one circuit
    Circuit {
        /// Comma-separated encoded inputs (default: zeros)
        #[arg(long)]
        x: Option<String>,
        /// Comma-separated variational angles, 3·n·L values (default: zeros)
        #[arg(long)]
        angles: Option<String>,
        /// Qubit count
        #[arg(long, default_value_t = 4)]
        qubits: usize,
        /// Variational layers
        #[arg(long, default_value_t = 2)]
        layers: usize,
        /// Data re-uploading
        #[arg(long, default_value_t = true)]
        reupload: bool,
        /// Encoding scale: unit or frequency
        #[arg(long, default_value = "unit")]
        scale: String,
    },
    /// Replay a run's logs and compare gradient variance to the 2^-n floor
    Gradients {
        /// Run directory with fold*/log.csv
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Subcommand)]
enum RleCommand {
    /// Read an RLE string on stdin, write a PGM mask to stdout
    Decode {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
    },
    /// Read a PGM mask on stdin, write its RLE string to stdout
    Encode,
}

/// Errors mapped to exit code 2; everything else exits 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(anyhow::Error::new(UsageError(msg.into())))
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.chain().any(|c| {
                c.downcast_ref::<UsageError>().is_some()
                    || matches!(c.downcast_ref::<TrainError>(), Some(TrainError::BadConfig(_)))
                    || c.downcast_ref::<ModelError>().is_some()
            }) {
                2
            } else {
                1
            };
            std::process::exit(code);
        }
    }
}

/// %g-style formatting with 6 significant digits.
fn fmt6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        let trimmed = s.trim_end_matches('0').trim_end_matches('.');
        trimmed.to_string()
    } else {
        format!("{v:.5e}")
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            n,
            resolution,
            empty_fraction,
            seed,
            out,
        } => cmd_synth(n, resolution, empty_fraction, seed, &out),
        Command::Train { common, out } => cmd_train(common, &out),
        Command::Eval { data, run, out } => cmd_eval(&data, &run, &out),
        Command::Ablate {
            data,
            seed,
            config,
            out,
        } => cmd_ablate(&data, seed, config.as_deref(), &out),
        Command::Diagnose { what } => match what {
            DiagnoseCommand::Circuit {
                x,
                angles,
                qubits,
                layers,
                reupload,
                scale,
            } => cmd_diagnose_circuit(x, angles, qubits, layers, reupload, &scale),
            DiagnoseCommand::Gradients { run } => cmd_diagnose_gradients(&run),
        },
        Command::Rle { what } => match what {
            RleCommand::Decode { height, width } => cmd_rle_decode(height, width),
            RleCommand::Encode => cmd_rle_encode(),
        },
    }
}

fn cmd_synth(n: usize, resolution: usize, empty_fraction: f64, seed: u64, out: &Path) -> anyhow::Result<()> {
    let records = generate_synthetic(n, resolution, empty_fraction, seed)
        .map_err(|e| anyhow::Error::new(UsageError(e.to_string())))?;
    save_corpus(&records, out).context("writing corpus")?;
    println!("wrote {} samples at {resolution}x{resolution} to {}", records.len(), out.display());
    Ok(())
}

fn parse_topology(s: &str) -> anyhow::Result<Topology> {
    match s {
        "fpn" => Ok(Topology::Fpn),
        "unet_skip" => Ok(Topology::UnetSkip),
        other => usage(format!("unknown topology '{other}'; expected fpn or unet_skip")),
    }
}

fn parse_merge(s: &str) -> anyhow::Result<MergeKind> {
    match s {
        "quantum" => Ok(MergeKind::Quantum),
        "classical" => Ok(MergeKind::Classical),
        "identity" => Ok(MergeKind::Identity),
        other => usage(format!(
            "unknown merge '{other}'; expected quantum, classical, or identity"
        )),
    }
}

fn resolve_config(args: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| anyhow::Error::new(UsageError(format!("config {}: {e}", path.display()))))?
        }
        None => RunConfig::default(),
    };
    if let Some(t) = &args.topology {
        config.model.topology = parse_topology(t)?;
    }
    if let Some(m) = &args.merge {
        config.model.merge_kind = parse_merge(m)?;
    }
    if let Some(q) = args.qubits {
        config.model.qubits = q;
    }
    if let Some(r) = args.reupload {
        config.model.reupload = r;
    }
    if let Some(f) = args.folds {
        config.train.folds = f;
    }
    if let Some(s) = args.seed {
        config.train.seed = s;
    }
    config.model.validate()?;
    if config.model.topology == Topology::UnetSkip && config.model.merge_kind == MergeKind::Quantum {
        eprintln!("note: with topology unet_skip, quantum gating is applied to the skip connections");
    }
    Ok(config)
}

fn load_data(dir: &Path) -> anyhow::Result<Vec<SampleRecord>> {
    if !dir.join("train.csv").exists() {
        return Err(anyhow!("no corpus at {} (missing train.csv)", dir.display()));
    }
    load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

fn cmd_train(args: TrainArgs, out: &Path) -> anyhow::Result<()> {
    let config = resolve_config(&args)?;
    let records = load_data(&args.data)?;
    let report = train(&config, &records, out, true)?;
    println!("oof_tgs_map {}", fmt6(report.tgs_map));
    println!("best_threshold {}", fmt6(report.best_threshold));
    Ok(())
}

fn cmd_eval(data: &Path, run_dir: &Path, out: &Path) -> anyhow::Result<()> {
    let records = load_data(data)?;
    let result = evaluate_run(run_dir, &records)?;
    std::fs::create_dir_all(out)?;

    let mut csv = String::from("id,iou,tgs_precision\n");
    let mut iou_sum = 0.0;
    for row in &result.per_image {
        iou_sum += row.iou;
        csv.push_str(&format!("{},{},{}\n", row.id, fmt6(row.iou), fmt6(row.tgs_precision)));
    }
    let mean_iou = iou_sum / result.per_image.len() as f64;
    csv.push_str(&format!("all,{},{}\n", fmt6(mean_iou), fmt6(result.tgs_map)));
    std::fs::write(out.join("eval.csv"), csv)?;
    std::fs::write(
        out.join("eval_report.json"),
        serde_json::to_string_pretty(&result).expect("report serializes"),
    )?;

    println!("tgs_map {}", fmt6(result.tgs_map));
    println!("best_threshold {}", fmt6(result.best_threshold));
    Ok(())
}

fn cmd_ablate(data: &Path, seed: u64, config: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let mut run_config = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| anyhow::Error::new(UsageError(format!("config {}: {e}", path.display()))))?
        }
        None => RunConfig::default(),
    };
    run_config.train.seed = seed;
    run_config.model.topology = Topology::Fpn;
    let records = load_data(data)?;
    let rows = run_ablation(&run_config, &records, out, true)?;
    println!("merge,oof_tgs_map,delta_pp");
    for row in &rows {
        println!("{},{},{}", row.merge, fmt6(row.oof_tgs_map), fmt6(row.delta_pp));
    }
    Ok(())
}

fn parse_csv_floats(s: &str, what: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| anyhow::Error::new(UsageError(format!("bad {what} entry '{tok}'"))))
        })
        .collect()
}

fn cmd_diagnose_circuit(
    x: Option<String>,
    angles: Option<String>,
    qubits: usize,
    layers: usize,
    reupload: bool,
    scale: &str,
) -> anyhow::Result<()> {
    if !(2..=10).contains(&qubits) {
        return usage(format!("qubits {qubits} outside the supported 2..=10"));
    }
    if layers < 1 {
        return usage("layers must be at least 1");
    }
    let config = match scale {
        "unit" => CircuitConfig::unit(qubits, layers, reupload),
        "frequency" => CircuitConfig::frequency_scaled(qubits, layers, reupload),
        other => return usage(format!("unknown scale '{other}'; expected unit or frequency")),
    };
    let x = match x {
        Some(s) => parse_csv_floats(&s, "x")?,
        None => vec![0.0; qubits],
    };
    if x.len() != qubits {
        return usage(format!("x has {} entries but the circuit has {qubits} qubits", x.len()));
    }
    let angles = match angles {
        Some(s) => parse_csv_floats(&s, "angles")?,
        None => vec![0.0; config.n_angles()],
    };
    if angles.len() != config.n_angles() {
        return usage(format!(
            "angles has {} entries but the circuit needs {} (3·n·L)",
            angles.len(),
            config.n_angles()
        ));
    }

    let diag = diagnose_circuit(&x, &config, &angles)?;
    println!("record,layer,qubit,angle,value");
    for (q, e) in diag.expectations.iter().enumerate() {
        println!("expectation,,{q},,{}", fmt6(*e));
    }
    let names = ["phi", "theta", "omega"];
    for layer in 0..config.n_layers {
        for qubit in 0..config.n_qubits {
            for (k, name) in names.iter().enumerate() {
                let g = diag.d_angles[config.angle_index(layer, qubit, k)];
                println!("grad_angle,{layer},{qubit},{name},{}", fmt6(g));
            }
        }
    }
    for (q, g) in diag.d_x.iter().enumerate() {
        println!("grad_input,,{q},,{}", fmt6(*g));
    }
    println!("floor,,,,{}", fmt6(diag.bp_floor));
    Ok(())
}

fn cmd_diagnose_gradients(run_dir: &Path) -> anyhow::Result<()> {
    let config = load_run_config(run_dir)?;
    let floor = bp_floor(config.model.qubits);
    let mut variances = Vec::new();
    let mut folds = 0;
    for fold in 0..config.train.folds {
        let path = run_dir.join(format!("fold{fold}")).join("log.csv");
        if !path.exists() {
            continue;
        }
        folds += 1;
        let text = std::fs::read_to_string(&path)?;
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if let Some(v) = cols.get(9).and_then(|s| s.parse::<f64>().ok()) {
                variances.push(v);
            }
        }
    }
    if variances.is_empty() {
        return Err(anyhow!(
            "no quantum gradient variances logged under {} (classical run?)",
            run_dir.display()
        ));
    }
    variances.sort_by(|a, b| a.partial_cmp(b).expect("finite variances"));
    let min = variances[0];
    let median = variances[variances.len() / 2];
    println!("metric,value");
    println!("folds,{folds}");
    println!("epochs,{}", variances.len());
    println!("floor,{}", fmt6(floor));
    println!("min_variance,{}", fmt6(min));
    println!("median_variance,{}", fmt6(median));
    println!("min_ratio,{}", fmt6(min / floor));
    println!("median_ratio,{}", fmt6(median / floor));
    Ok(())
}

fn cmd_rle_decode(height: usize, width: usize) -> anyhow::Result<()> {
    if height == 0 || width == 0 {
        return usage("height and width must be positive");
    }
    let mut input = String::new();
    std::io::stdin().read_to_string(&mut input)?;
    let mask = decode_rle(input.trim(), height, width)
        .map_err(|e| anyhow::Error::new(UsageError(e.to_string())))?;
    let image = Image::new(
        mask.h,
        mask.w,
        mask.pixels.iter().map(|&p| f64::from(p)).collect(),
    );
    std::io::stdout().write_all(&pgm_bytes(&image))?;
    Ok(())
}

fn cmd_rle_encode() -> anyhow::Result<()> {
    let mut input = Vec::new();
    std::io::stdin().read_to_end(&mut input)?;
    let image = image_from_pgm_bytes(&input, "stdin")
        .map_err(|e| anyhow::Error::new(UsageError(e.to_string())))?;
    let mask = Mask::new(
        image.h,
        image.w,
        image.pixels.iter().map(|&p| u8::from(p > 0.5)).collect(),
    );
    println!("{}", encode_rle(&mask));
    Ok(())
}
