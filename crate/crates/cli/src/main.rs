use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use rose_core::autodiff::AutodiffError;
use rose_core::data::{self, DataError, ImageDataset};
use rose_core::eval::{self, ScoreColumn};
use rose_core::fisher::{FisherError, FisherMethod, RELATIVE_DAMPING};
use rose_core::formats;
use rose_core::rose::{self, FitConfig, RoseConfig, RoseError, ScoreConfig, ScoreTable};
use rose_core::tensor::{Scalar, TensorError};
use rose_core::vae::{TrainConfig, VaeConfig, VaeError, VaeModel};

#[derive(Parser, Debug)]
#[command(name = "rose", version, about = "Out-of-distribution scoring with Fisher-preconditioned VAE score gradients")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, env = "ROSE_THREADS")]
    threads: Option<usize>,
    /// Run model arithmetic in 64-bit floats.
    #[arg(long = "f64", global = true)]
    double: bool,
    /// More logging; `score` also checks the backward-pass count.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a VAE and write a checkpoint plus a loss-curve CSV.
    Train(TrainArgs),
    /// Fit Fisher factors and calibration statistics.
    Fit(FitArgs),
    /// Write per-sample layer scores, ROSE and NLL as CSV.
    Score(ScoreArgs),
    /// Detection metrics from two score tables.
    Eval(EvalArgs),
    /// Scale pixel intensities of an IDX file.
    Perturb(PerturbArgs),
    /// Generate a synthetic IDX dataset.
    Gen(GenArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// IDX file or manifest of `label=path` lines.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 50)]
    latent: usize,
    /// Channels of the first encoder convolution.
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Epochs between learning-rate halvings.
    #[arg(long, default_value_t = 30)]
    lr_period: usize,
    #[arg(long, default_value_t = 1)]
    iwae_k: usize,
    /// Train on the first N samples only.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Loss curve destination; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "ekfac")]
    method: FisherMethod,
    #[arg(long, default_value_t = 2000)]
    n_samples: usize,
    #[arg(long, default_value_t = RELATIVE_DAMPING)]
    damping_rel: f64,
    #[arg(long, default_value_t = 1)]
    iwae_k: usize,
    /// Calibrate on M further samples instead of the Fisher samples.
    #[arg(long)]
    holdout: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormOrder {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Inf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    fisher: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "inf")]
    p: NormOrder,
    /// Comma-separated per-layer offsets.
    #[arg(long, value_delimiter = ',')]
    beta: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    iwae_k: usize,
    /// Importance samples for the NLL column.
    #[arg(long, default_value_t = 20)]
    nll_k: usize,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Metric {
    Auroc,
    Auprc,
    Fpr80,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Score table of in-distribution samples.
    #[arg(long = "in")]
    in_csv: PathBuf,
    /// Score table(s) of out-of-distribution samples.
    #[arg(long = "out", required = true)]
    out_csv: Vec<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "auroc,auprc,fpr80")]
    metrics: Vec<Metric>,
    #[arg(long, value_enum, default_value = "rose")]
    column: Column,
    /// Add one AUROC row per layer.
    #[arg(long)]
    per_layer: bool,
    /// Report destination; standard output when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// 50-bin histogram CSV of the first OOD table against the in-distribution table.
    #[arg(long)]
    histogram: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Column {
    Rose,
    Nll,
}

#[derive(Args, Debug)]
struct PerturbArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    brightness: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GenKind {
    Noise,
    Constant,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: GenKind,
    #[arg(long)]
    n: usize,
    /// `HxW`, e.g. `28x28`.
    #[arg(long, default_value = "28x28", value_parser = parse_shape)]
    shape: (usize, usize),
    #[arg(long)]
    out: PathBuf,
}

fn parse_shape(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    let (h, w) = (parse(h)?, parse(w)?);
    if h == 0 || w == 0 {
        return Err("shape dimensions must be positive".into());
    }
    Ok((h, w))
}

/// Usage errors detected after argument parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn is_numeric_tensor(e: &TensorError) -> bool {
    matches!(e, TensorError::NonFinite { .. } | TensorError::NoConvergence { .. })
}

fn is_numeric_vae(e: &VaeError) -> bool {
    match e {
        VaeError::Diverged { .. } => true,
        VaeError::Tensor(t) | VaeError::Autodiff(AutodiffError::Tensor(t)) => is_numeric_tensor(t),
        _ => false,
    }
}

fn is_numeric_fisher(e: &FisherError) -> bool {
    match e {
        FisherError::Eigen { .. } => true,
        FisherError::Tensor(t) => is_numeric_tensor(t),
        FisherError::Vae(v) => is_numeric_vae(v),
        _ => false,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        let numeric = cause.downcast_ref::<VaeError>().is_some_and(is_numeric_vae)
            || cause.downcast_ref::<FisherError>().is_some_and(is_numeric_fisher)
            || cause.downcast_ref::<TensorError>().is_some_and(is_numeric_tensor)
            || matches!(cause.downcast_ref::<RoseError>(), Some(RoseError::NonFinite { .. }))
            || matches!(cause.downcast_ref::<RoseError>(), Some(RoseError::Fisher(f)) if is_numeric_fisher(f))
            || matches!(cause.downcast_ref::<RoseError>(), Some(RoseError::Vae(v)) if is_numeric_vae(v));
        if numeric {
            return EXIT_NUMERIC;
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_target(false)
        .init();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: could not configure thread pool: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => {
            if cli.double {
                train::<f64>(cli, a)
            } else {
                train::<f32>(cli, a)
            }
        }
        Command::Fit(a) => {
            if cli.double {
                fit::<f64>(cli, a)
            } else {
                fit::<f32>(cli, a)
            }
        }
        Command::Score(a) => {
            if cli.double {
                score::<f64>(cli, a)
            } else {
                score::<f32>(cli, a)
            }
        }
        Command::Eval(a) => evaluate(a),
        Command::Perturb(a) => perturb(a),
        Command::Gen(a) => generate(cli, a),
    }
}

/// Loads an IDX file, or every entry of a `label=path` manifest.
fn load_data(path: &Path) -> Result<ImageDataset> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let label = path.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned());
    if bytes.len() >= 4 && bytes[..4] == data::IDX_MAGIC_U8_3D.to_be_bytes() {
        return Ok(data::parse_idx(&bytes, label).with_context(|| format!("parsing {}", path.display()))?);
    }
    let text = String::from_utf8(bytes).map_err(|_| {
        anyhow!(DataError::Invalid(format!("{} is neither an IDX file nor a text manifest", path.display())))
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let entries = data::parse_manifest(&text, base)?;
    let parts = entries
        .iter()
        .map(|e| {
            let mut ds = data::load_idx(&e.path).with_context(|| format!("loading {}", e.path.display()))?;
            ds.label = e.label.clone();
            Ok(ds)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(data::concat(&parts, label)?)
}

fn limited(ds: ImageDataset, limit: Option<usize>) -> Result<ImageDataset> {
    match limit {
        Some(n) if n < ds.len() => Ok(ds.take(n)?),
        _ => Ok(ds),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_model<T: Scalar>(path: &Path) -> Result<VaeModel<T>> {
    let m = formats::load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(m.cast())
}

fn train<T: Scalar>(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let ds = limited(load_data(&a.data)?, a.limit)?;
    let shape = ds.sample_shape().to_vec();
    let config = VaeConfig {
        in_channels: shape[0],
        height: shape[1],
        width: shape[2],
        channels: a.channels,
        latent_dim: a.latent,
    };
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        lr_halving_period: a.lr_period,
        seed: cli.seed,
        iwae_k: a.iwae_k,
    };
    tc.validate().map_err(|e| usage(e.to_string()))?;
    let mut model = VaeModel::<T>::new(config, cli.seed).map_err(|e| usage(e.to_string()))?;
    info!(
        "training {} parameters on {} samples of {:?} ({}) for {} epochs",
        model.num_params(),
        ds.len(),
        shape,
        T::NAME,
        a.epochs
    );
    let start = Instant::now();
    let curve = model.train_with(&ds, &tc, |epoch, loss| {
        info!("epoch {epoch:>3}  loss {loss:.4}  lr {:.2e}  {:.1}s", tc.lr_at(epoch.max(1)), start.elapsed().as_secs_f64());
    })?;
    formats::save_checkpoint(&model, &a.out)?;
    let loss_path = a.loss_csv.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    let mut w = create(&loss_path)?;
    writeln!(w, "epoch,loss")?;
    for (e, l) in curve.epochs.iter().enumerate() {
        writeln!(w, "{e},{l:.9}")?;
    }
    w.flush()?;
    println!(
        "wrote {} (fingerprint {:016x}) and {}",
        a.out.display(),
        formats::model_fingerprint(&model),
        loss_path.display()
    );
    Ok(())
}

fn fit<T: Scalar>(cli: &Cli, a: &FitArgs) -> Result<()> {
    let model = load_model::<T>(&a.model)?;
    let ds = load_data(&a.data)?;
    let requested = a.n_samples + a.holdout.unwrap_or(0);
    if requested > ds.len() {
        bail!(RoseError::Undersized { requested, available: ds.len() });
    }
    let cfg = FitConfig {
        method: a.method,
        n_samples: a.n_samples,
        damping_rel: a.damping_rel,
        k: a.iwae_k,
        seed: cli.seed,
        holdout: a.holdout,
    };
    let start = Instant::now();
    let artifact = rose::fit_artifact(&model, &ds, &cfg)?;
    formats::save_fisher(&artifact, &a.out)?;
    let stats = artifact.stats.as_ref().expect("calibrated");
    for (l, name) in artifact.layer_names.iter().enumerate() {
        info!(
            "{name}: {:?} damping {:.3e} mu {:.4e} sigma {:.4e}",
            artifact.layers[l].shape(),
            artifact.layers[l].damping(),
            stats.mu[l],
            stats.sigma[l]
        );
    }
    println!(
        "wrote {} ({} on {} samples, {:.1}s)",
        a.out.display(),
        a.method,
        a.n_samples,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn score<T: Scalar>(cli: &Cli, a: &ScoreArgs) -> Result<()> {
    let model = load_model::<T>(&a.model)?;
    let artifact = formats::load_fisher(&a.fisher).with_context(|| format!("loading {}", a.fisher.display()))?;
    let ds = limited(load_data(&a.data)?, a.limit)?;
    let p = match a.p {
        NormOrder::One => 1.0,
        NormOrder::Two => 2.0,
        NormOrder::Inf => f64::INFINITY,
    };
    let cfg = ScoreConfig { rose: RoseConfig { beta: a.beta.clone(), p }, k: a.iwae_k, nll_k: a.nll_k, seed: cli.seed };
    if let Err(e) = cfg.rose.validate(artifact.num_layers()) {
        return Err(usage(e.to_string()));
    }
    model.reset_backward_passes();
    let start = Instant::now();
    let table = rose::score_pipeline(&model, &artifact, &ds, &cfg)?;
    let secs = start.elapsed().as_secs_f64();
    let passes = model.backward_passes();
    if cli.verbose {
        if passes != ds.len() {
            bail!("backward pass count {passes} differs from sample count {}", ds.len());
        }
        info!("backward passes: {passes} for {} samples", ds.len());
    }
    let mut w = create(&a.out)?;
    table.write_csv(&mut w)?;
    w.flush()?;
    println!(
        "scored {} samples in {:.2}s ({:.1} images/sec) -> {}",
        ds.len(),
        secs,
        ds.len() as f64 / secs.max(1e-9),
        a.out.display()
    );
    Ok(())
}

fn read_table(path: &Path) -> Result<ScoreTable> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    ScoreTable::read_csv(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn evaluate(a: &EvalArgs) -> Result<()> {
    let in_table = read_table(&a.in_csv)?;
    let column = match a.column {
        Column::Rose => ScoreColumn::Rose,
        Column::Nll => ScoreColumn::Nll,
    };
    let mut out: Box<dyn Write> = match &a.report {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    writeln!(out, "metric,dataset,value")?;
    for path in &a.out_csv {
        let table = read_table(path)?;
        let r = eval::evaluate_tables(&in_table, &table, column)?;
        let name = path.file_stem().map_or("out".into(), |s| s.to_string_lossy().into_owned());
        for m in &a.metrics {
            let (metric, v) = match m {
                Metric::Auroc => ("auroc", r.auroc),
                Metric::Auprc => ("auprc", r.auprc),
                Metric::Fpr80 => ("fpr80", r.fpr80),
            };
            writeln!(out, "{metric},{name},{v:.9}")?;
        }
        writeln!(out, "n_in,{name},{}", r.n_in)?;
        writeln!(out, "n_out,{name},{}", r.n_out)?;
        if a.per_layer {
            for (l, v) in r.per_layer_auroc.iter().enumerate() {
                writeln!(out, "auroc_layer_{},{name},{v:.9}", l + 1)?;
            }
        }
    }
    out.flush()?;
    if let Some(h) = &a.histogram {
        let table = read_table(&a.out_csv[0])?;
        let rows = eval::histogram(&column.of(&in_table), &column.of(&table), eval::HISTOGRAM_BINS)?;
        let mut w = create(h)?;
        eval::write_histogram(&mut w, &rows)?;
        w.flush()?;
    }
    Ok(())
}

fn perturb(a: &PerturbArgs) -> Result<()> {
    if !(a.brightness > 0.0 && a.brightness.is_finite()) {
        return Err(usage(format!("brightness factor must be positive, got {}", a.brightness)));
    }
    let ds = load_data(&a.data)?;
    let out = data::brightness(&ds, a.brightness)?;
    data::write_idx(&out, &a.out)?;
    println!("wrote {} samples at {}x brightness to {}", out.len(), a.brightness, a.out.display());
    Ok(())
}

fn generate(cli: &Cli, a: &GenArgs) -> Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let ds = match a.kind {
        GenKind::Noise => data::gen_noise(a.n, a.shape, cli.seed)?,
        GenKind::Constant => data::gen_constant(a.n, a.shape, cli.seed)?,
    };
    data::write_idx(&ds, &a.out)?;
    println!("wrote {} {:?} images to {}", ds.len(), a.kind, a.out.display());
    Ok(())
}
