//! Command-line front end: dataset generation, the three training
//! protocols, positional-term inspection, and the gradient-check suite.
//!
//! Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or
//! configuration error. Every command is deterministic: identical inputs
//! and seeds reproduce every artifact byte for byte. Set `EEGPE_VERBOSE=1`
//! for progress lines on stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use eegpe::config::RunConfig;
use eegpe::data::container::load_epoch_set;
use eegpe::data::synthetic::{SyntheticMode, SyntheticSpec};
use eegpe::data::EpochSet;
use eegpe::geometry::Montage;
use eegpe::model::{build_pe_tables, checkpoint, ForwardPass, HeadSpec, ModelConfig, ModelState};
use eegpe::posenc::PeKind;
use eegpe::tensor::Tensor;
use eegpe::train::{
    curve_csv, metrics_csv, report_json, run_finetune, run_pretrain, run_probe, summarize,
    ClassificationReport, DownstreamOutcome, PretrainReport, PretrainSeedRow, Protocol,
    SeedMetrics,
};
use eegpe::verify::gradient_suite;
use eegpe::{Error, Result};

#[derive(Parser)]
#[command(
    name = "eegpe",
    version,
    about = "Benchmark harness for positional encodings in an EEG transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled EEG dataset directory.
    GenData(GenDataArgs),
    /// Masked-patch pretraining over one or more seeds.
    Pretrain(RunArgs),
    /// Frozen-backbone linear probe from a pretrained checkpoint.
    Probe(RunArgs),
    /// Full fine-tuning from a pretrained checkpoint.
    Finetune(RunArgs),
    /// Emit a positional-encoding variant's additive term as CSV.
    InspectPe(InspectArgs),
    /// Finite-difference gradient checks for every op and the full model.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Generator: channel-coded or spatial-class.
    #[arg(long, value_parser = parse_mode, default_value = "channel-coded")]
    mode: SyntheticMode,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 10)]
    subjects: usize,
    #[arg(long, default_value_t = 20)]
    epochs_per_subject: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 40.0)]
    sampling_rate: f64,
    #[arg(long, default_value_t = 4.0)]
    epoch_seconds: f64,
    /// Gaussian noise standard deviation added to every sample.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Directory to create (meta.json, data.bin, montage.txt).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration, merged over the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (overrides the config file).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Positional-encoding variant (overrides the config file).
    #[arg(long, value_parser = parse_pe)]
    pe: Option<PeKind>,
    /// Comma-separated seeds (overrides the config file).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory (overrides the config file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pretrained checkpoint; probe and finetune only.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, value_parser = parse_pe)]
    pe: PeKind,
    /// Montage file; defaults to a synthetic ring of --channels electrodes.
    #[arg(long)]
    montage: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    /// Embedding width of the emitted term.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Patch positions per epoch.
    #[arg(long, default_value_t = 4)]
    patches: usize,
    /// Seed for variants whose term depends on initialisation.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// tiny probes a sample of model coordinates; desk probes every one.
    #[arg(long, default_value = "tiny")]
    preset: String,
}

fn parse_pe(s: &str) -> Result<PeKind> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<SyntheticMode> {
    s.parse()
}

fn progress(msg: &str) {
    if std::env::var_os("EEGPE_VERBOSE").is_some_and(|v| v != "0") {
        eprintln!("{msg}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Probe(args) => cmd_downstream(Protocol::Probe, args),
        Command::Finetune(args) => cmd_downstream(Protocol::Finetune, args),
        Command::InspectPe(args) => cmd_inspect_pe(args),
        Command::GradCheck(args) => cmd_grad_check(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        mode: args.mode,
        channels: args.channels,
        subjects: args.subjects,
        epochs_per_subject: args.epochs_per_subject,
        classes: args.classes,
        sampling_rate: args.sampling_rate,
        epoch_seconds: args.epoch_seconds,
        noise: args.noise,
        seed: args.seed,
    };
    spec.generate_to_dir(&args.out)?;
    progress(&format!("wrote dataset to {}", args.out.display()));
    Ok(())
}

/// Config file (or defaults) with flag overrides applied, revalidated.
fn load_run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::resolve(None)?,
    };
    if let Some(kind) = args.pe {
        cfg.model.pe.kind = kind;
    }
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(dir) = &args.data {
        cfg.paths.data = Some(dir.display().to_string());
    }
    if let Some(dir) = &args.out {
        cfg.paths.out = Some(dir.display().to_string());
    }
    if let Some(file) = &args.checkpoint {
        cfg.paths.checkpoint = Some(file.display().to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required_path(slot: &Option<String>, flag: &str) -> Result<PathBuf> {
    slot.as_ref().map(PathBuf::from).ok_or_else(|| {
        Error::Config(format!("missing {flag} (pass the flag or set it in the config file)"))
    })
}

fn load_data(cfg: &RunConfig, dir: &Path) -> Result<EpochSet> {
    load_epoch_set(
        dir,
        cfg.data.sampling_rate,
        cfg.model.patch_len,
        cfg.data.split,
        cfg.data.split_seed,
    )
}

fn load_checkpoint(path: &Path) -> Result<ModelState> {
    match checkpoint::load(path) {
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::Config(
            format!("checkpoint {} does not exist", path.display()),
        )),
        other => other,
    }
}

fn cmd_pretrain(args: RunArgs) -> Result<()> {
    if args.checkpoint.is_some() {
        return Err(Error::Config(
            "pretrain starts from scratch and does not take --checkpoint".into(),
        ));
    }
    let cfg = load_run_config(&args)?;
    let data_dir = required_path(&cfg.paths.data, "--data")?;
    let out_dir = required_path(&cfg.paths.out, "--out")?;
    let data = load_data(&cfg, &data_dir)?;
    fs::create_dir_all(&out_dir)?;

    let mut rows = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        progress(&format!("pretrain {} seed {seed}", cfg.model.pe.kind));
        let outcome = run_pretrain(&cfg, &data, seed)?;
        let seed_dir = out_dir.join(format!("seed-{seed}"));
        fs::create_dir_all(&seed_dir)?;
        fs::write(seed_dir.join("curve.csv"), curve_csv(&outcome.curve))?;
        checkpoint::save(&outcome.best_state, &seed_dir.join("best.ckpt"))?;
        checkpoint::save(&outcome.final_state, &seed_dir.join("final.ckpt"))?;
        let best = outcome.curve[outcome.best_epoch - 1];
        let last = *outcome.curve.last().expect("training ran at least one epoch");
        rows.push(PretrainSeedRow {
            seed,
            best_epoch: outcome.best_epoch,
            best_val_loss: best.val_loss,
            final_val_loss: last.val_loss,
            final_train_loss: last.train_loss,
        });
    }
    let report = PretrainReport {
        protocol: Protocol::Pretrain.to_string(),
        pe: cfg.model.pe.kind.to_string(),
        rows,
        config: cfg,
    };
    fs::write(out_dir.join("report.json"), report_json(&report)?)?;
    Ok(())
}

fn kappa_csv(values: &[f64]) -> String {
    let mut out = String::from("epoch,val_kappa\n");
    for (i, v) in values.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, v));
    }
    out
}

fn cmd_downstream(protocol: Protocol, args: RunArgs) -> Result<()> {
    let cfg = load_run_config(&args)?;
    let data_dir = required_path(&cfg.paths.data, "--data")?;
    let out_dir = required_path(&cfg.paths.out, "--out")?;
    let ckpt_path = required_path(&cfg.paths.checkpoint, "--checkpoint")?;
    let source = load_checkpoint(&ckpt_path)?;
    if let Some(kind) = args.pe {
        if kind != source.config.pe.kind {
            return Err(Error::Config(format!(
                "checkpoint {} was pretrained with {}; --pe {kind} cannot change a \
                 checkpoint's encoding (pretrain a new one instead)",
                ckpt_path.display(),
                source.config.pe.kind,
            )));
        }
    }
    let data = load_data(&cfg, &data_dir)?;
    fs::create_dir_all(&out_dir)?;

    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        progress(&format!("{protocol} {} seed {seed}", source.config.pe.kind));
        let outcome: DownstreamOutcome = match protocol {
            Protocol::Probe => run_probe(&cfg, &source, &data, seed)?,
            Protocol::Finetune => run_finetune(&cfg, &source, &data, seed)?,
            Protocol::Pretrain => unreachable!("dispatched by subcommand"),
        };
        let seed_dir = out_dir.join(format!("seed-{seed}"));
        fs::create_dir_all(&seed_dir)?;
        fs::write(seed_dir.join("kappa.csv"), kappa_csv(&outcome.val_kappa))?;
        checkpoint::save(&outcome.state, &seed_dir.join("best.ckpt"))?;
        per_seed.push(SeedMetrics {
            seed,
            best_epoch: outcome.best_epoch,
            balanced_accuracy: outcome.test_balanced_accuracy,
            kappa: outcome.test_kappa,
            weighted_f1: outcome.test_weighted_f1,
        });
    }
    fs::write(out_dir.join("metrics.csv"), metrics_csv(&per_seed))?;
    let report = ClassificationReport {
        protocol: protocol.to_string(),
        pe: source.config.pe.kind.to_string(),
        summary: summarize(&per_seed)?,
        per_seed,
        config: cfg,
    };
    fs::write(out_dir.join("report.json"), report_json(&report)?)?;
    Ok(())
}

fn cmd_inspect_pe(args: InspectArgs) -> Result<()> {
    let montage = match &args.montage {
        Some(path) => Montage::load(path)?,
        None => Montage::synthetic_ring(args.channels)?,
    };
    if args.patches == 0 {
        return Err(Error::Config("--patches must be at least 1".into()));
    }
    let mut config = ModelConfig::desk(args.pe);
    config.embed_dim = args.dim;
    config.heads = 2;
    config.validate()?;
    let state =
        ModelState::new(config, &montage, args.patches, args.seed, &HeadSpec::pretrain())?;
    let tables = build_pe_tables(&config, &montage, args.patches)?;
    let mut fp = ForwardPass::new(&state, tables.as_ref(), &|_| false)?;

    // Additive variants: term = pe(0) - 0, exactly the table entries. The
    // convolutional variant responds to content, so probe it with a
    // constant-one embedding; the term is then the kernel's positional
    // response including its border profile.
    let (c, w, d) = (montage.len(), args.patches, args.dim);
    let fill = if args.pe == PeKind::Acpe { 1.0 } else { 0.0 };
    let probe = Tensor::new(&[1, c, w, d], vec![fill; c * w * d])?;
    let emb = fp.tape_mut().constant(&probe);
    let with_pe = fp.apply_pe(emb)?;
    let term = fp.tape_mut().sub(with_pe, emb)?;
    let values = fp.value(term);

    let mut csv = String::new();
    for row in 0..c * w {
        for j in 0..d {
            if j > 0 {
                csv.push(',');
            }
            csv.push_str(&format!("{}", values[row * d + j]));
        }
        csv.push('\n');
    }
    match &args.out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<()> {
    let cap = match args.preset.as_str() {
        "tiny" => Some(6),
        "desk" => None,
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?} (expected tiny or desk)"
            )))
        }
    };
    let entries = gradient_suite(cap)?;
    let mut all_ok = true;
    for e in &entries {
        let verdict = if e.passed() {
            "ok"
        } else {
            all_ok = false;
            "FAIL"
        };
        println!(
            "{:<34} max rel err {:.3e} over {:>6} coords (tolerance {:.0e}) {verdict}",
            e.name, e.max_rel_err, e.checked, e.tolerance
        );
    }
    if all_ok {
        Ok(())
    } else {
        Err(Error::Numeric("gradient suite exceeded tolerance".into()))
    }
}
