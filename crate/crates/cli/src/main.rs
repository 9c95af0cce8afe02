//! `gazecast` command-line tool.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use gazecast::checkpoint::{checkpoint_dtype, init_from, load_checkpoint, read_checkpoint_config, save_checkpoint};
use gazecast::checks::{grad_suite, oracle_suite, SuiteReport};
use gazecast::data::{
    dataset_digest, generate_dataset, read_dataset_modalities, train_test_split, write_dataset, SceneSample, SceneSpec,
};
use gazecast::eval::{evaluate, write_dump};
use gazecast::model::GazeModel;
use gazecast::pgm::render_sample;
use gazecast::train::train;
use gazecast::{GazeError, ModalityId, RunConfig, Variant};
use gazecast_tensor::{fault, DType, Element};

const EXIT_USAGE: u8 = 1;
const EXIT_CHECK: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "gazecast", version, about = "Multimodal gaze-target prediction on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Write `train/` and `test/` subdirectories with this test share.
        #[arg(long)]
        test_fraction: Option<f64>,
    },
    /// Train a model and write a checkpoint plus a loss CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint whose scene extractors seed the new model; repeatable.
        #[arg(long)]
        init: Vec<PathBuf>,
        /// Loss CSV path (default: checkpoint path with `.loss.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Fail unless the checkpoint was trained as this variant.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Render cone, heatmap and overlay images for one sample.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: u64,
        #[arg(long)]
        render: PathBuf,
    },
    /// Run the built-in verification suites.
    Check {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        #[arg(long, hide = true)]
        corrupt_conv_backward: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Grad,
    Oracle,
    All,
}

enum Failure {
    Checks,
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

impl From<GazeError> for Failure {
    fn from(e: GazeError) -> Self {
        Failure::Other(e.into())
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<GazeError>() {
        Some(GazeError::Diverged(_)) => EXIT_DIVERGED,
        Some(g) if g.is_data_error() => EXIT_DATA,
        Some(GazeError::Domain(_) | GazeError::Metric(_)) => EXIT_DATA,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = std::env::var("GAZECAST_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks) => ExitCode::from(EXIT_CHECK),
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Gen {
            spec,
            out,
            count,
            test_fraction,
        } => cmd_gen(&spec, &out, count, test_fraction)?,
        Command::Train {
            config,
            data,
            out,
            init,
            log,
        } => {
            let cfg = RunConfig::load(&config)?;
            let log = log.unwrap_or_else(|| out.with_extension("loss.csv"));
            match cfg.dtype.dtype() {
                DType::F64 => cmd_train::<f64>(cfg, &data, &out, &init, &log)?,
                DType::F32 => cmd_train::<f32>(cfg, &data, &out, &init, &log)?,
            }
        }
        Command::Eval {
            ckpt,
            data,
            report,
            dump,
            variant,
        } => match checkpoint_dtype(&ckpt)? {
            DType::F64 => cmd_eval::<f64>(&ckpt, &data, &report, dump.as_deref(), variant)?,
            DType::F32 => cmd_eval::<f32>(&ckpt, &data, &report, dump.as_deref(), variant)?,
        },
        Command::Infer {
            ckpt,
            data,
            sample,
            render,
        } => match checkpoint_dtype(&ckpt)? {
            DType::F64 => cmd_infer::<f64>(&ckpt, &data, sample, &render)?,
            DType::F32 => cmd_infer::<f32>(&ckpt, &data, sample, &render)?,
        },
        Command::Check {
            suite,
            corrupt_conv_backward,
        } => return cmd_check(suite, corrupt_conv_backward),
    }
    Ok(())
}

fn cmd_gen(spec_path: &Path, out: &Path, count: usize, test_fraction: Option<f64>) -> anyhow::Result<()> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let spec = SceneSpec::from_toml_str(&text)?;
    let (samples, check) = generate_dataset(&spec, count)?;
    println!(
        "self-check: {} samples, {} in frame, {} outside cone, {} checker mismatches: {}",
        check.samples,
        check.in_frame,
        check.outside_cone,
        check.checker_mismatch,
        if check.passed() { "ok" } else { "FAILED" }
    );
    if !check.passed() {
        return Err(GazeError::Data("generator self-check failed".into()).into());
    }
    match test_fraction {
        None => {
            write_dataset(&samples, out)?;
            println!("wrote {count} samples to {} ({})", out.display(), dataset_digest(out)?);
        }
        Some(f) => {
            let (tr, te) = train_test_split(samples, f, spec.rng_seed)?;
            for (name, part) in [("train", &tr), ("test", &te)] {
                let dir = out.join(name);
                write_dataset(part, &dir)?;
                println!("wrote {} samples to {} ({})", part.len(), dir.display(), dataset_digest(&dir)?);
            }
        }
    }
    Ok(())
}

/// Modalities a configuration needs from disk.
fn needed(cfg: &RunConfig) -> Vec<ModalityId> {
    let mut ms = cfg.modalities();
    let src = cfg.variant.gaze_source();
    if !ms.contains(&src) {
        ms.push(src);
    }
    ms.sort();
    ms
}

fn load_data(dir: &Path, cfg: &RunConfig) -> anyhow::Result<Vec<SceneSample>> {
    read_dataset_modalities(dir, &needed(cfg)).with_context(|| format!("loading dataset {}", dir.display()))
}

fn cmd_train<T: Element>(cfg: RunConfig, data: &Path, out: &Path, init: &[PathBuf], log_path: &Path) -> anyhow::Result<()> {
    let samples = load_data(data, &cfg)?;
    let mut model = GazeModel::<T>::new(&cfg)?;
    for path in init {
        let src = load_checkpoint::<T>(path).with_context(|| format!("loading {}", path.display()))?;
        let n = init_from(&mut model, &src).with_context(|| format!("initializing from {}", path.display()))?;
        println!("initialized {n} tensors from {} ({})", path.display(), src.config.variant);
    }
    println!(
        "training {} on {} samples, {} parameters, config {}",
        cfg.variant,
        samples.len(),
        model.store.num_values(),
        cfg.hash_hex()
    );
    let mut last_epoch = usize::MAX;
    let result = train(&mut model, &samples, |r| {
        if r.epoch != last_epoch {
            last_epoch = r.epoch;
            println!("epoch {} step {} L_total {:.5}", r.epoch, r.step, r.loss.total);
        }
    });
    let log = match result {
        Ok(l) => l,
        Err(e) => return Err(e.into()),
    };
    if let Some(parent) = log_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    log.write_csv(BufWriter::new(fs::File::create(log_path)?))?;
    save_checkpoint(&model, out)?;
    if let (Some(first), Some(last)) = (log.steps.first(), log.steps.last()) {
        println!("L_total {:.5} -> {:.5}", first.loss.total, last.loss.total);
    }
    println!("wrote {} and {}", out.display(), log_path.display());
    Ok(())
}

fn cmd_eval<T: Element>(
    ckpt: &Path,
    data: &Path,
    report_path: &Path,
    dump: Option<&Path>,
    variant: Option<Variant>,
) -> anyhow::Result<()> {
    let model = load_checkpoint::<T>(ckpt)?;
    if let Some(v) = variant {
        if v != model.config.variant {
            return Err(GazeError::Checkpoint(format!(
                "checkpoint holds a {} model, expected {v}",
                model.config.variant
            ))
            .into());
        }
    }
    let samples = load_data(data, &model.config)?;
    let (report, records) = evaluate(&model, &samples)?;
    for p in [Some(report_path), dump].into_iter().flatten() {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    if let Some(d) = dump {
        write_dump(&records, BufWriter::new(fs::File::create(d)?))?;
    }
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "{}: AUC {} AvgDist {} MinDist {} AP {} over {} samples",
        report.variant,
        fmt(report.metrics.auc),
        fmt(report.metrics.avg_dist),
        fmt(report.metrics.min_dist),
        fmt(report.metrics.ap),
        report.metrics.n_samples
    );
    Ok(())
}

fn cmd_infer<T: Element>(ckpt: &Path, data: &Path, id: u64, dir: &Path) -> anyhow::Result<()> {
    let cfg = read_checkpoint_config(&fs::read(ckpt)?)?;
    let model = load_checkpoint::<T>(ckpt)?;
    let samples = load_data(data, &cfg)?;
    let sample = samples
        .iter()
        .find(|s| s.sample_id == id)
        .ok_or_else(|| GazeError::Data(format!("no sample with id {id} in {}", data.display())))?;
    let r = render_sample(&model, sample, dir)?;
    println!(
        "predicted target ({:.4}, {:.4}); wrote {}, {}, {}",
        r.predicted[0],
        r.predicted[1],
        r.cone.display(),
        r.heatmap.display(),
        r.overlay.display()
    );
    Ok(())
}

fn print_suite(name: &str, r: &SuiteReport) {
    for c in &r.results {
        println!(
            "{:<7} {:<18} max error {:.3e} (tol {:.0e}, {} checked) {}",
            name,
            c.name,
            c.max_error,
            c.tolerance,
            c.checked,
            if c.passed() { "pass" } else { "FAIL" }
        );
    }
    println!("{name} suite: {:.1} s", r.seconds);
}

fn cmd_check(suite: Suite, corrupt: bool) -> Result<(), Failure> {
    fault::corrupt_conv_backward(corrupt);
    let mut failures = Vec::new();
    let mut suites: Vec<(&str, fn() -> gazecast::Result<SuiteReport>)> = Vec::new();
    if matches!(suite, Suite::Grad | Suite::All) {
        suites.push(("grad", grad_suite));
    }
    if matches!(suite, Suite::Oracle | Suite::All) {
        suites.push(("oracle", oracle_suite));
    }
    for (name, f) in suites {
        let r = f().map_err(|e| anyhow!(e).context(format!("{name} suite")))?;
        print_suite(name, &r);
        failures.extend(r.failures().into_iter().map(|c| format!("{name}/{}", c.name)));
    }
    if failures.is_empty() {
        println!("all checks passed");
        Ok(())
    } else {
        eprintln!("failed checks: {}", failures.join(", "));
        Err(Failure::Checks)
    }
}
