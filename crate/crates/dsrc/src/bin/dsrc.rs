//! Command-line surface: pretraining, joint training, classification,
//! baselines and the five-fold evaluation protocol.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 numerical failure
//! (divergence or non-convergence).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use dsrc::data::{self, LabeledDataset, SubsetSpec};
use dsrc::error::DsrcError;
use dsrc::eval::{
    accuracy_fivefold, class_mass_concentration, dsrc_classify, export_code_heatmap,
    ClassificationReport, FoldPlan,
};
use dsrc::network::{default_spec, NetworkSpec};
use dsrc::pipeline;
use dsrc::sparse::{SparseCodes, SparseMode};
use dsrc::train::{Checkpoint, Stage, TrainConfig};

#[derive(Parser)]
#[command(name = "dsrc", version, about = "Deep sparse representation-based classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the encoder-decoder pair on reconstruction only.
    Pretrain(PretrainArgs),
    /// Joint full-batch training of the sparse coding objective.
    Train(TrainArgs),
    /// Classify a test set from saved codes.
    Classify(ClassifyArgs),
    /// Classical SRC baseline on raw pixels.
    SrcBaseline(SrcBaselineArgs),
    /// Five-fold evaluation of either pipeline.
    Eval(EvalArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset source: `synthetic[:K=..,ambient=..,dim=..,train=..,test=..,sigma=..,seed=..]`,
    /// `idx:<images>:<labels>`, `idxpair:<tr-img>:<tr-lbl>:<te-img>:<te-lbl>`,
    /// or `dir:<path>`.
    #[arg(long)]
    data: String,
    /// Fraction of samples held out as the test partition when the source
    /// has no partition of its own.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Seed for the random train/test split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Class-balanced subsample: per-class training count.
    #[arg(long)]
    per_class_train: Option<usize>,
    /// Class-balanced subsample: per-class test count.
    #[arg(long)]
    per_class_test: Option<usize>,
    #[arg(long, default_value_t = 0)]
    subsample_seed: u64,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON file with training hyperparameters; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Network architecture JSON; defaults to the stock 32x32 model.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Pretrained checkpoint to start from.
    #[arg(long)]
    from_checkpoint: Option<PathBuf>,
    /// Train from fresh initialization without a pretrained checkpoint.
    #[arg(long, default_value_t = false)]
    no_pretrain: bool,
    /// Sparse coding layer variant.
    #[arg(long, default_value = "structured")]
    layer: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct SrcBaselineArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0.1)]
    lambda0: f64,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "fivefold")]
    protocol: String,
    /// Which pipeline to evaluate: `src` or `dsrc`.
    #[arg(long)]
    pipeline: String,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0.1)]
    src_lambda0: f64,
    #[arg(long, default_value_t = 0)]
    fold_seed: u64,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Train(args) => cmd_train(args),
        Command::Classify(args) => cmd_classify(args),
        Command::SrcBaseline(args) => cmd_src_baseline(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                DsrcError::TrainingDiverged { .. } | DsrcError::NotConverged { .. } => {
                    ExitCode::from(3)
                }
                _ => ExitCode::from(2),
            }
        }
    }
}

type CmdResult = Result<ExitCode, DsrcError>;

fn parse_kv(spec: &str) -> Result<std::collections::HashMap<String, String>, DsrcError> {
    let mut map = std::collections::HashMap::new();
    if spec.is_empty() {
        return Ok(map);
    }
    for part in spec.split(',') {
        let (k, v) = part.split_once('=').ok_or_else(|| {
            DsrcError::InvalidInput(format!("expected key=value in data spec, got '{part}'"))
        })?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

fn kv_get<T: std::str::FromStr>(
    map: &std::collections::HashMap<String, String>,
    key: &str,
    default: T,
) -> Result<T, DsrcError> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| DsrcError::InvalidInput(format!("bad value for {key}: '{v}'"))),
    }
}

/// Resolve a `--data` spec to a partitioned dataset and the list of input
/// files that went into it (for the manifest hash).
fn load_data(args: &DataArgs) -> Result<(LabeledDataset, Vec<PathBuf>), DsrcError> {
    let (mut ds, files) = if let Some(rest) = args.data.strip_prefix("synthetic") {
        let kv = parse_kv(rest.strip_prefix(':').unwrap_or(""))?;
        let syn = data::synthetic_subspaces(
            kv_get(&kv, "K", 5)?,
            kv_get(&kv, "ambient", 64)?,
            kv_get(&kv, "dim", 4)?,
            kv_get(&kv, "train", 40)?,
            kv_get(&kv, "test", 10)?,
            kv_get(&kv, "sigma", 0.01)?,
            kv_get(&kv, "seed", 0)?,
        )?;
        (syn.dataset, Vec::new())
    } else if let Some(rest) = args.data.strip_prefix("idxpair:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 4 {
            return Err(DsrcError::InvalidInput(
                "idxpair needs 4 paths: train-images:train-labels:test-images:test-labels".into(),
            ));
        }
        let train = data::load_idx(Path::new(parts[0]), Path::new(parts[1]))?;
        let test = data::load_idx(Path::new(parts[2]), Path::new(parts[3]))?;
        (
            merge_partitioned(train, test)?,
            parts.iter().map(PathBuf::from).collect(),
        )
    } else if let Some(rest) = args.data.strip_prefix("idx:") {
        let (imgs, lbls) = rest.split_once(':').ok_or_else(|| {
            DsrcError::InvalidInput("idx needs 2 paths: images:labels".into())
        })?;
        let ds = data::load_idx(Path::new(imgs), Path::new(lbls))?;
        (ds, vec![PathBuf::from(imgs), PathBuf::from(lbls)])
    } else if let Some(rest) = args.data.strip_prefix("dir:") {
        let (ds, skipped) = data::load_image_dir(Path::new(rest))?;
        if skipped > 0 {
            eprintln!("warning: skipped {skipped} undecodable files");
        }
        (ds, vec![PathBuf::from(rest)])
    } else {
        return Err(DsrcError::InvalidInput(format!(
            "unrecognized data spec '{}'",
            args.data
        )));
    };

    if ds.train_idx.is_empty() && ds.test_idx.is_empty() {
        split_random(&mut ds, args.test_fraction, args.split_seed);
    }
    if let (Some(tr), Some(te)) = (args.per_class_train, args.per_class_test) {
        ds = data::subsample(
            &ds,
            &SubsetSpec { per_class_train: tr, per_class_test: te, seed: args.subsample_seed },
        )?;
    }
    Ok((ds, files))
}

fn merge_partitioned(
    train: LabeledDataset,
    test: LabeledDataset,
) -> Result<LabeledDataset, DsrcError> {
    let n = train.len();
    let m = test.len();
    let mut images = train.images.data;
    images.extend_from_slice(&test.images.data);
    let mut labels = train.labels;
    labels.extend_from_slice(&test.labels);
    let num_classes = train.num_classes.max(test.num_classes);
    let ds = LabeledDataset {
        images: dsrc::Tensor::from_vec(&[n + m, 1, 32, 32], images)?,
        labels,
        train_idx: (0..n).collect(),
        test_idx: (n..n + m).collect(),
        provenance: format!("{}+{}", train.provenance, test.provenance),
        num_classes,
    };
    ds.validate()?;
    Ok(ds)
}

fn split_random(ds: &mut LabeledDataset, test_fraction: f64, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let test_count = ((n as f64) * test_fraction).round() as usize;
    ds.test_idx = order[..test_count].to_vec();
    ds.train_idx = order[test_count..].to_vec();
}

fn resolve_config(args: &ConfigArgs) -> Result<TrainConfig, DsrcError> {
    let mut config = match &args.config {
        None => TrainConfig::default(),
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
    };
    if let Some(v) = args.lambda0 {
        config.lambda0 = v;
    }
    if let Some(v) = args.lambda1 {
        config.lambda1 = v;
    }
    if let Some(v) = args.lr {
        config.learning_rate = v;
    }
    if let Some(v) = args.epochs {
        config.pretrain_epochs = v;
    }
    if let Some(v) = args.batch {
        config.pretrain_batch = v;
    }
    if let Some(v) = args.iters {
        config.joint_iters = v;
    }
    if let Some(v) = args.p {
        config.p = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    config.validate()?;
    Ok(config)
}

fn load_spec(path: &Option<PathBuf>) -> Result<NetworkSpec, DsrcError> {
    match path {
        None => Ok(default_spec()),
        Some(p) => NetworkSpec::from_json(&std::fs::read_to_string(p)?),
    }
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    config: Option<TrainConfig>,
    data: Option<String>,
    provenance: Option<String>,
    threads: usize,
    input_hashes: Vec<(String, String)>,
    outputs: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String, DsrcError> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        hasher.update(path.display().to_string().as_bytes());
    } else {
        hasher.update(std::fs::read(path)?);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: Option<&TrainConfig>,
    data: Option<&DataArgs>,
    provenance: Option<&str>,
    inputs: &[PathBuf],
    outputs: &[&str],
) -> Result<(), DsrcError> {
    let threads = std::env::var("DSRC_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1);
    let mut input_hashes = Vec::new();
    for p in inputs {
        input_hashes.push((p.display().to_string(), sha256_file(p)?));
    }
    let manifest = Manifest {
        command: command.to_string(),
        config: config.cloned(),
        data: data.map(|d| d.data.clone()),
        provenance: provenance.map(|s| s.to_string()),
        threads,
        input_hashes,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs) -> CmdResult {
    let config = resolve_config(&args.config)?;
    let spec = load_spec(&args.spec)?;
    let (dataset, inputs) = load_data(&args.data)?;
    std::fs::create_dir_all(&args.out)?;

    let out = pipeline::pretrain_stage(&dataset, &spec, &config)?;
    out.checkpoint.save(&args.out.join("checkpoint.bin"))?;
    let mut csv = Vec::new();
    out.trace.write_csv(&mut csv)?;
    std::fs::write(args.out.join("trace.csv"), csv)?;
    write_manifest(
        &args.out,
        "pretrain",
        Some(&config),
        Some(&args.data),
        Some(&dataset.provenance),
        &inputs,
        &["checkpoint.bin", "trace.csv"],
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let config = resolve_config(&args.config)?;
    let mode = match args.layer.as_str() {
        "structured" => SparseMode::Structured,
        "full" => SparseMode::FullSelfExpressive,
        other => {
            return Err(DsrcError::InvalidInput(format!(
                "unknown layer variant '{other}' (expected structured|full)"
            )))
        }
    };
    let (dataset, mut inputs) = load_data(&args.data)?;
    std::fs::create_dir_all(&args.out)?;

    let (spec, encoder, decoder) = match (&args.from_checkpoint, args.no_pretrain) {
        (Some(path), _) => {
            inputs.push(path.clone());
            let ckpt = Checkpoint::load(path)?;
            if ckpt.stage != Stage::Pretrained && !args.no_pretrain {
                return Err(DsrcError::InvalidInput(format!(
                    "checkpoint stage is {:?}, expected a pretrained checkpoint",
                    ckpt.stage
                )));
            }
            let (enc, dec, _) = ckpt.restore()?;
            (ckpt.spec, enc, dec)
        }
        (None, true) => {
            let spec = load_spec(&args.spec)?;
            let (enc, dec) = dsrc::network::init_params(&spec, config.seed);
            (spec, enc, dec)
        }
        (None, false) => {
            return Err(DsrcError::InvalidInput(
                "either --from-checkpoint or --no-pretrain is required".into(),
            ))
        }
    };

    let out = pipeline::joint_stage(&encoder, &decoder, &dataset, &spec, &config, mode)?;
    out.result.checkpoint.save(&args.out.join("checkpoint.bin"))?;
    out.codes.save(&args.out.join("codes.bin"))?;
    let mut csv = Vec::new();
    out.result.trace.write_csv(&mut csv)?;
    std::fs::write(args.out.join("trace.csv"), csv)?;
    export_code_heatmap(&out.codes, &args.out.join("heatmap.pgm"))?;
    write_manifest(
        &args.out,
        "train",
        Some(&config),
        Some(&args.data),
        Some(&dataset.provenance),
        &inputs,
        &["checkpoint.bin", "codes.bin", "codes.bin.json", "trace.csv", "heatmap.pgm"],
    )?;
    if !out.result.converged {
        eprintln!("NOT_CONVERGED: joint training did not converge (p={})", config.p);
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_classify(args: ClassifyArgs) -> CmdResult {
    let codes = SparseCodes::load(&args.codes)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let d_z = ckpt.spec.embedding_dim()?;
    if codes.d_z() != d_z {
        return Err(DsrcError::InvalidShape(format!(
            "codes have d_z = {}, checkpoint expects {d_z}",
            codes.d_z()
        )));
    }
    if let Some((n, m, _)) = ckpt.sparse_dims {
        if codes.n() != n || codes.m() != m {
            return Err(DsrcError::InvalidShape(format!(
                "codes are {}x{}, checkpoint sparse layer is {n}x{m}",
                codes.n(),
                codes.m()
            )));
        }
    }
    let num_classes = codes.train_labels.iter().max().map_or(0, |v| v + 1);
    let (preds, residuals) = dsrc_classify(&codes.z_train, &codes.train_labels, &codes)?;
    let report = ClassificationReport::from_predictions(
        preds,
        residuals,
        codes.test_labels.clone(),
        num_classes,
    );
    std::fs::write(&args.report, serde_json::to_string_pretty(&report)?)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_src_baseline(args: SrcBaselineArgs) -> CmdResult {
    let (dataset, _) = load_data(&args.data)?;
    let preds = pipeline::src_baseline(&dataset, args.lambda0)?;
    let truth = dataset.labels_of(&dataset.test_idx);
    let report = ClassificationReport::from_predictions(
        preds,
        Vec::new(),
        Some(truth),
        dataset.num_classes,
    );
    if let Some(parent) = args.report.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&args.report, serde_json::to_string_pretty(&report)?)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EvalReport {
    pipeline: String,
    folds: Vec<f64>,
    mean: f64,
    std: f64,
    fold_seed: u64,
    /// Mean l1-mass concentration of A on true-class rows (dsrc only).
    concentration: Option<f64>,
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    if args.protocol != "fivefold" {
        return Err(DsrcError::InvalidInput(format!(
            "unknown protocol '{}'",
            args.protocol
        )));
    }
    let config = resolve_config(&args.config)?;
    let spec = load_spec(&args.spec)?;
    let (dataset, inputs) = load_data(&args.data)?;
    std::fs::create_dir_all(&args.out)?;

    let plan = FoldPlan::new(dataset.len(), args.folds, args.data.test_fraction, args.fold_seed);
    let mut concentrations: Vec<f64> = Vec::new();
    let summary = match args.pipeline.as_str() {
        "src" => accuracy_fivefold(&dataset, |ds| pipeline::src_baseline(ds, args.src_lambda0), &plan)?,
        "dsrc" => accuracy_fivefold(
            &dataset,
            |ds| {
                let (preds, codes, _) = pipeline::dsrc_full(ds, &spec, &config)?;
                concentrations
                    .push(class_mass_concentration(&codes, &ds.labels_of(&ds.test_idx)));
                Ok(preds)
            },
            &plan,
        )?,
        other => {
            return Err(DsrcError::InvalidInput(format!(
                "unknown pipeline '{other}' (expected src|dsrc)"
            )))
        }
    };
    let report = EvalReport {
        pipeline: args.pipeline.clone(),
        folds: summary.per_fold.clone(),
        mean: summary.mean,
        std: summary.std,
        fold_seed: args.fold_seed,
        concentration: if concentrations.is_empty() {
            None
        } else {
            Some(concentrations.iter().sum::<f64>() / concentrations.len() as f64)
        },
    };
    std::fs::write(args.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    write_manifest(
        &args.out,
        "eval",
        Some(&config),
        Some(&args.data),
        Some(&dataset.provenance),
        &inputs,
        &["report.json"],
    )?;
    Ok(ExitCode::SUCCESS)
}
