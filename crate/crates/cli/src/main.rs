//! `cimt`: phantom generation, training, evaluation, model comparison and
//! gradient checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use cimt_core::checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Checkpoint};
use cimt_core::model::{check_params, snapshot_localizer};
use cimt_core::modelcheck::check_preset;
use cimt_core::phantom::{load_dataset, make_splits, save_dataset, Dataset, Split};
use cimt_core::report::{build_report, compare_reports, comparison_table, roc_csv, EvalOptions, EvalReport};
use cimt_core::train::{ResumeMeta, TrainState, Trainer};
use cimt_core::{Error, Preset, Result, RunConfig};

/// Exit status of each failure class.
mod exit {
    pub const CHECK_FAILED: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const DIVERGED: u8 = 4;
    pub const CHECKPOINT: u8 = 5;
    pub const UNPAIRED: u8 = 6;
    pub const INTERNAL: u8 = 10;
}

const AFTER_HELP: &str = "\
Exit codes:
  0  success
  1  gradient check above tolerance
  2  invalid configuration or arguments
  3  I/O error or malformed input file
  4  training diverged
  5  checkpoint invalid or preset mismatch
  6  reports cover different cases
  10 internal error";

#[derive(Parser)]
#[command(name = "cimt", version, about = "Cluster-induced mask transformer on synthetic CT phantoms", after_help = AFTER_HELP)]
struct Cli {
    /// Directory that relative paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Overrides data.base_seed, train.seed and eval.seed.
    #[arg(long, global = true, env = "CIMT_SEED")]
    seed: Option<u64>,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset.
    Gen(GenArgs),
    /// Train a model preset on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Paired significance tests between two evaluation reports.
    Compare(CompareArgs),
    /// Finite-difference gradient checks of the micro models.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Print the split summary without writing anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory; training logs are written next to the tensors.
    #[arg(long)]
    out: PathBuf,
    /// cimt, unet-s4c or unet-joint.
    #[arg(long, value_parser = parse_preset)]
    preset: Preset,
    /// Continue from the resume state in `--out`.
    #[arg(long)]
    resume: bool,
    /// Stop once this many epochs (both stages) have completed.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Report path; the ROC curve goes next to it unless `--roc` is given.
    #[arg(long)]
    out: PathBuf,
    /// ROC curve CSV path.
    #[arg(long)]
    roc: Option<PathBuf>,
    /// Evaluation settings are read from this config's `eval` section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fail with exit code 5 unless the checkpoint holds this preset.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Crop around the ground-truth stomach instead of the localizer output.
    #[arg(long)]
    oracle_roi: bool,
    /// Keep only normal cases; AUC and sensitivity are reported undefined.
    #[arg(long)]
    all_negative_cohort: bool,
    /// Worker threads; overrides eval.jobs.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    report_a: PathBuf,
    #[arg(long)]
    report_b: PathBuf,
    /// Print CSV instead of an aligned table.
    #[arg(long)]
    csv: bool,
    /// Permutation replicates for the sensitivity and specificity tests.
    #[arg(long, default_value_t = 10_000)]
    replicates: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Preset to check; all presets when omitted.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Coordinates probed per parameter tensor.
    #[arg(long, default_value_t = 4)]
    per_tensor: usize,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => exit::CONFIG,
        Error::Io { .. } | Error::Json { .. } | Error::Data(_) => exit::IO,
        Error::Diverged(_) => exit::DIVERGED,
        Error::Checkpoint(_) => exit::CHECKPOINT,
        Error::Unpaired(_) => exit::UNPAIRED,
        _ => exit::INTERNAL,
    }
}

struct Ctx {
    workdir: PathBuf,
    seed: Option<u64>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    fn config(&self, path: Option<&PathBuf>) -> Result<RunConfig> {
        let mut cfg = match path {
            Some(p) => RunConfig::load(&self.path(p))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.data.base_seed = seed;
            cfg.train.seed = seed;
            cfg.eval.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn pretty(value: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn cmd_gen(ctx: &Ctx, a: &GenArgs) -> Result<u8> {
    let cfg = ctx.config(a.config.as_ref())?;
    let index = make_splits(&cfg.data)?;
    println!("{:<6} {:>6} {:>9} {:>10}", "split", "n", "positive", "prevalence");
    for split in Split::ALL {
        let entries: Vec<_> = index.split(split).collect();
        let pos = entries.iter().filter(|e| e.patient_label == 1).count();
        let prev = if entries.is_empty() { 0.0 } else { pos as f64 / entries.len() as f64 };
        println!("{:<6} {:>6} {:>9} {:>10.3}", split.name(), entries.len(), pos, prev);
    }
    if a.dry_run {
        return Ok(0);
    }
    let ds = Dataset::generate(index)?;
    save_dataset(&ds, &ctx.path(&a.out))?;
    info!("wrote {} cases to {}", ds.samples.len(), ctx.path(&a.out).display());
    Ok(0)
}

const RESUME_DIR: &str = "resume";

fn save_resume(dir: &Path, preset: Preset, hash: &str, cfg: &RunConfig, state: &TrainState) -> Result<()> {
    let (tensors, meta) = state.to_parts();
    let ck = Checkpoint {
        preset,
        config_hash: hash.to_string(),
        model: cfg.model.clone(),
        meta: serde_json::to_value(&meta).expect("serializable"),
        tensors,
    };
    save_checkpoint(&ck, dir)
}

fn load_resume(dir: &Path, preset: Preset, hash: &str, cfg: &RunConfig) -> Result<TrainState> {
    let ck = load_checkpoint(dir)?;
    if ck.preset != preset {
        return Err(Error::Checkpoint(format!(
            "resume state in {} is for preset {}, not {preset}",
            dir.display(),
            ck.preset
        )));
    }
    if ck.config_hash != hash {
        return Err(Error::Checkpoint(format!(
            "resume state in {} was written under a different configuration",
            dir.display()
        )));
    }
    let meta: ResumeMeta = serde_json::from_value(ck.meta)
        .map_err(|e| Error::Checkpoint(format!("{}: bad resume metadata: {e}", dir.display())))?;
    TrainState::from_parts(&ck.tensors, meta, cfg.train.optimizer.clone())
}

fn jsonl<T: serde::Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
        .collect()
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<u8> {
    let cfg = ctx.config(a.config.as_ref())?;
    let hash = cfg.hash();
    let ds = load_dataset(&ctx.path(&a.data))?;
    if ds.index.config != cfg.data {
        warn!("dataset was generated with a different data section than the config");
    }
    let train: Vec<_> = ds.split(Split::Train).into_iter().map(|(_, s)| s).collect();
    let val: Vec<_> = ds.split(Split::Val).into_iter().map(|(_, s)| s).collect();
    let trainer = Trainer::new(a.preset, &cfg.model, &cfg.train, &train, &val)?;
    let out = ctx.path(&a.out);
    let resume_dir = out.join(RESUME_DIR);
    let mut state = if a.resume {
        load_resume(&resume_dir, a.preset, &hash, &cfg)?
    } else {
        trainer.init_state()?
    };
    let end = a
        .stop_after
        .map_or(trainer.total_epochs(), |s| s.min(trainer.total_epochs()));
    while state.epochs_done < end {
        let next = state.epochs_done + 1;
        trainer.run(&mut state, Some(next))?;
        save_resume(&resume_dir, a.preset, &hash, &cfg, &state)?;
    }
    if state.epochs_done < trainer.total_epochs() {
        println!(
            "stopped after {} of {} epochs; continue with --resume",
            state.epochs_done,
            trainer.total_epochs()
        );
        return Ok(0);
    }
    let outcome = trainer.finish(state)?;
    let mut params = outcome.params.clone();
    if !params.names().any(|n| n.starts_with("localizer.")) {
        snapshot_localizer(&mut params);
    }
    let meta = json!({
        "threshold": outcome.threshold.threshold,
        "volume_threshold": outcome.volume_threshold,
        "val_sensitivity": outcome.threshold.sensitivity,
        "val_specificity": outcome.threshold.specificity,
        "best_epoch": outcome.best_epoch,
        "best_val_auc": outcome.best_val_auc,
        "skipped_steps": outcome.skipped,
        "train": cfg.train,
        "data": ds.index.config,
    });
    save_checkpoint(
        &Checkpoint {
            preset: a.preset,
            config_hash: hash,
            model: cfg.model.clone(),
            meta,
            tensors: params,
        },
        &out,
    )?;
    write_text(&out.join("train_log.jsonl"), &jsonl(&outcome.log))?;
    write_text(&out.join("pretrain_log.jsonl"), &jsonl(&outcome.pretrain_log))?;
    println!(
        "{}: best epoch {} val AUC {:.4}; threshold {:.6}",
        a.preset, outcome.best_epoch, outcome.best_val_auc, outcome.threshold.threshold
    );
    Ok(0)
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<u8> {
    let mut cfg = ctx.config(a.config.as_ref())?;
    if let Some(j) = a.jobs {
        cfg.eval.jobs = j;
    }
    cfg.eval.validate()?;
    let ck_dir = ctx.path(&a.checkpoint);
    let manifest = read_manifest(&ck_dir)?;
    if let Some(p) = a.preset {
        if p != manifest.preset {
            return Err(Error::Checkpoint(format!(
                "{} holds preset {}, expected {p}",
                ck_dir.display(),
                manifest.preset
            )));
        }
    }
    let ck = load_checkpoint(&ck_dir)?;
    check_params(ck.preset, &ck.model, &ck.tensors)?;
    let threshold = ck
        .meta
        .get("threshold")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::Checkpoint(format!("{}: no operating threshold", ck_dir.display())))?;
    let ds = load_dataset(&ctx.path(&a.data))?;
    let cases = ds.split(a.split);
    let opts = EvalOptions {
        oracle_roi: a.oracle_roi,
        all_negative_cohort: a.all_negative_cohort,
        jobs: cfg.eval.jobs,
    };
    let report = build_report(
        &ck.tensors,
        ck.preset,
        &ck.model,
        &ck.config_hash,
        a.split.name(),
        &cases,
        threshold,
        &opts,
        &cfg.eval,
    )?;
    let out = ctx.path(&a.out);
    write_text(&out, &pretty(&report))?;
    let roc = a.roc.as_ref().map_or_else(|| out.with_extension("roc.csv"), |p| ctx.path(p));
    write_text(&roc, &roc_csv(&report))?;
    let show = |c: &Option<cimt_core::metrics::Ci>| {
        c.map_or_else(
            || "undefined".to_string(),
            |c| format!("{:.4} [{:.4}, {:.4}]", c.point, c.low, c.high),
        )
    };
    println!("n={} ({} positive)", report.n, report.n_positive);
    println!("auc          {}", show(&report.auc));
    println!("sensitivity  {}", show(&report.sensitivity));
    println!("specificity  {}", show(&report.specificity));
    if let Some(l) = report.localization_rate {
        println!("localization {l:.4}");
    }
    Ok(0)
}

fn load_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_slice(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_compare(ctx: &Ctx, a: &CompareArgs) -> Result<u8> {
    if a.replicates == 0 {
        return Err(Error::Config("--replicates must be positive".into()));
    }
    let ra = load_report(&ctx.path(&a.report_a))?;
    let rb = load_report(&ctx.path(&a.report_b))?;
    let c = compare_reports(&ra, &rb, a.replicates, ctx.seed.unwrap_or(0))?;
    print!("{}", comparison_table(&c, a.csv));
    Ok(0)
}

fn cmd_gradcheck(ctx: &Ctx, a: &GradcheckArgs) -> Result<u8> {
    if a.per_tensor == 0 {
        return Err(Error::Config("--per-tensor must be positive".into()));
    }
    let seed = ctx.seed.unwrap_or(0);
    let presets = a.preset.map_or_else(|| Preset::ALL.to_vec(), |p| vec![p]);
    let mut ok = true;
    for p in presets {
        let s = check_preset(p, seed, a.per_tensor)?;
        for t in s.tensors.iter().filter(|t| !t.passed) {
            println!("  {:<40} rel. err {:.3e}", t.name, t.max_rel_err);
        }
        let qk = match s.qk_zero {
            Some(true) => "; Q/K gradient through hard assignment exactly 0",
            Some(false) => "; Q/K gradient through hard assignment NOT zero",
            None => "",
        };
        println!(
            "{} {}: {} tensors, max rel. err {:.3e} (tol {:.0e}){qk}",
            if s.passed { "PASS" } else { "FAIL" },
            p,
            s.tensors.len(),
            s.max_rel_err,
            s.tolerance
        );
        ok &= s.passed;
    }
    Ok(if ok { 0 } else { exit::CHECK_FAILED })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let ctx = Ctx {
        workdir: cli.workdir.clone(),
        seed: cli.seed,
    };
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Compare(a) => cmd_compare(&ctx, a),
        Command::Gradcheck(a) => cmd_gradcheck(&ctx, a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
