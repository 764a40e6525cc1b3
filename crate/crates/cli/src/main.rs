use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sketchdl::baseline::{aksvd_train_with_observer, AkSvdConfig};
use sketchdl::cksvd::{train_with_observer, TrainConfig};
use sketchdl::config::{parse_ratio, ExperimentConfig, Method};
use sketchdl::experiment::{
    initial_dictionary, match_atoms, mean_curve, run_experiment, sketch_configs, solve_mode,
    synthetic_for_trial, trial_seed, CSV_HEADER, RECOVERY_THRESHOLD,
};
use sketchdl::kmeans::{kmeans_train_with_observer, KMeansConfig};
use sketchdl::matfile;
use sketchdl::seed::{derive_seed, stream};
use sketchdl::sketching::sketch_blocks;
use sketchdl::theory::{
    eta_for_p0, monte_carlo_fk_snrs, monte_carlo_hk, p0_bound, p1_bound, BoundParams,
};
use sketchdl::{BlockPartition, Dictionary, Error, ProjectionDistribution, SketchConfig, SketchedDataset};

#[derive(Parser)]
#[command(name = "sketchdl", version, about = "Dictionary learning and K-means from sparse random projection sketches")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic data set of one trial.
    Gen(GenArgs),
    /// Sketch a data matrix block by block.
    Sketch(SketchArgs),
    /// Learn a dictionary with CK-SVD or AK-SVD.
    Train(TrainArgs),
    /// Compressive K-means.
    Kmeans(KmeansArgs),
    /// Bound evaluation and Monte-Carlo checks.
    Theory(TheoryArgs),
    /// Run the full recovery experiment of a config and write its CSV.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    trial: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistArg {
    Sparse,
    Gaussian,
}

#[derive(Args)]
struct SketchArgs {
    /// Data matrix, one sample per column.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sketch dimension.
    #[arg(long)]
    m: usize,
    /// Number of blocks, each with its own projection.
    #[arg(long)]
    blocks: usize,
    #[arg(long, value_enum, default_value = "sparse")]
    dist: DistArg,
    /// Sparse-Bernoulli parameter.
    #[arg(long, conflicts_with = "gamma")]
    s: Option<f64>,
    /// Compression factor m/s, e.g. 1/10.
    #[arg(long)]
    gamma: Option<String>,
    /// Gaussian entry variance (default 1/p).
    #[arg(long)]
    variance: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InputArgs {
    #[arg(long)]
    config: PathBuf,
    /// Pre-computed sketches; otherwise the data is sketched with the first
    /// projection setting of the config.
    #[arg(long, conflicts_with = "data")]
    sketches: Option<PathBuf>,
    /// Data matrix; otherwise the synthetic data of `--trial` is used.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Ground-truth dictionary used for the recovery column.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    trial: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Defaults to the first of cksvd or aksvd listed in the config.
    #[arg(long)]
    method: Option<Method>,
    /// Initial dictionary.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Write the dictionary every N iterations.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct KmeansArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Initial centers.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum McKind {
    Hk,
    Fk,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct TheoryArgs {
    #[arg(long)]
    p: usize,
    #[arg(long)]
    m: usize,
    /// Kurtosis of the entry law; taken from `--dist` when absent.
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long, value_enum)]
    dist: Option<DistArg>,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    cluster_size: Option<usize>,
    /// Target P0; prints the matching eta.
    #[arg(long, conflicts_with = "eta")]
    p0: Option<f64>,
    /// Error level; prints P0 (and P1 with `--snr`).
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    snr: Option<f64>,
    /// Run a Monte-Carlo check instead of evaluating the bound.
    #[arg(long, value_enum)]
    monte_carlo: Option<McKind>,
    #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    p0_targets: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_path` of the config; stdout when neither is set.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Format(_) | Error::Io(_) | Error::InvalidParameter(_) => 2,
        Error::DimensionMismatch { .. } | Error::NotApplicable(_) | Error::Numerical(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("sketchdl: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("sketchdl: {e}");
            return ExitCode::from(3);
        }
    }
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Sketch(a) => sketch(a),
        Command::Train(a) => train(a),
        Command::Kmeans(a) => kmeans(a),
        Command::Theory(a) => theory(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sketchdl: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn create_dir(dir: &Path) -> sketchdl::Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn gen(a: GenArgs) -> sketchdl::Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let data = synthetic_for_trial(&cfg, a.trial)?;
    create_dir(&a.out)?;
    matfile::save(a.out.join("X.cdlm"), &data.x)?;
    matfile::save(a.out.join("D_true.cdlm"), data.dictionary.matrix())?;
    let mut c = nalgebra::DMatrix::zeros(cfg.k, cfg.n);
    for (i, code) in data.codes.iter().enumerate() {
        for (&j, &v) in code.support.iter().zip(&code.values) {
            c[(j, i)] = v;
        }
    }
    matfile::save(a.out.join("C_true.cdlm"), &c)?;
    println!("wrote {}x{} data to {}", data.x.nrows(), data.x.ncols(), a.out.display());
    Ok(())
}

fn sketch(a: SketchArgs) -> sketchdl::Result<()> {
    let x = matfile::load(&a.data)?;
    let p = x.nrows();
    let dist = match a.dist {
        DistArg::Gaussian => match a.variance {
            Some(v) => ProjectionDistribution::gaussian(v)?,
            None => ProjectionDistribution::gaussian_for_dim(p)?,
        },
        DistArg::Sparse => {
            let s = match (a.s, &a.gamma) {
                (Some(s), _) => s,
                (None, Some(g)) => a.m as f64 / parse_ratio(g)?,
                (None, None) => {
                    return Err(Error::Config("sparse projections need --s or --gamma".into()))
                }
            };
            ProjectionDistribution::sparse_bernoulli(s)?
        }
    };
    let partition = BlockPartition::even(x.ncols(), a.blocks)?;
    let cfg = SketchConfig {
        m: a.m,
        dist,
        blocks: a.blocks,
        master_seed: a.seed,
    };
    let sketches = sketch_blocks(&x, &partition, &cfg)?;
    sketches.write_dir(&a.out)?;
    println!(
        "sketched {} samples into {} blocks of m={} ({})",
        x.ncols(),
        a.blocks,
        a.m,
        dist.name()
    );
    Ok(())
}

struct Inputs {
    cfg: ExperimentConfig,
    gamma: Option<f64>,
    sketches: Option<SketchedDataset>,
    x: Option<nalgebra::DMatrix<f64>>,
    truth: Option<nalgebra::DMatrix<f64>>,
}

/// Resolve the data source of `train` and `kmeans`. Sketches are only built
/// when `need_sketches` is set.
fn load_inputs(a: &InputArgs, need_sketches: bool) -> sketchdl::Result<Inputs> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let mut truth = a.truth.as_ref().map(matfile::load).transpose()?;
    let mut gamma = None;
    if let Some(dir) = &a.sketches {
        if !need_sketches {
            return Err(Error::NotApplicable("this method needs raw data, not sketches".into()));
        }
        let sketches = SketchedDataset::read_dir(dir)?;
        if matches!(sketches.dist(), ProjectionDistribution::SparseBernoulli { .. }) {
            gamma = Some(sketches.compression_factor()?);
        }
        return Ok(Inputs {
            cfg,
            gamma,
            sketches: Some(sketches),
            x: None,
            truth,
        });
    }
    let x = match &a.data {
        Some(path) => matfile::load(path)?,
        None => {
            let data = synthetic_for_trial(&cfg, a.trial)?;
            truth.get_or_insert_with(|| data.dictionary.matrix().clone());
            data.x
        }
    };
    let sketches = if need_sketches {
        let (g, sc) = sketch_configs(&cfg, a.trial)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::Config("no projection setting".into()))?;
        gamma = g;
        let partition = BlockPartition::even(x.ncols(), sc.blocks)?;
        Some(sketch_blocks(&x, &partition, &sc)?)
    } else {
        None
    };
    Ok(Inputs {
        cfg,
        gamma,
        sketches,
        x: Some(x),
        truth,
    })
}

fn history_row(
    method: Method,
    gamma: Option<f64>,
    trial: usize,
    iteration: usize,
    recovery: Option<f64>,
    objective: f64,
    seconds: f64,
) -> String {
    format!(
        "{},{},{},{},{},{:.16e},{:.16e}",
        method,
        gamma.map(|g| format!("{g:.16e}")).unwrap_or_default(),
        trial,
        iteration,
        recovery.map(|r| format!("{r:.16e}")).unwrap_or_default(),
        objective,
        seconds
    )
}

fn recovery(learned: &nalgebra::DMatrix<f64>, truth: Option<&nalgebra::DMatrix<f64>>) -> sketchdl::Result<Option<f64>> {
    truth
        .map(|t| match_atoms(learned, t, RECOVERY_THRESHOLD).map(|s| s.recovered_fraction))
        .transpose()
}

fn train(a: TrainArgs) -> sketchdl::Result<()> {
    let cfg = ExperimentConfig::load(&a.input.config)?;
    let method = match a.method {
        Some(m) => m,
        None => *cfg
            .methods
            .iter()
            .find(|m| **m != Method::Kmeans)
            .ok_or_else(|| Error::Config("config lists no dictionary method; use `kmeans`".into()))?,
    };
    if method == Method::Kmeans {
        return Err(Error::Config("use the `kmeans` subcommand for K-means".into()));
    }
    if cfg.t == 0 {
        return Err(Error::Config("missing key `T`".into()));
    }
    let inputs = load_inputs(&a.input, method == Method::Cksvd)?;
    let init = match &a.init {
        Some(path) => Dictionary::from_columns(matfile::load(path)?)?,
        None => initial_dictionary(&cfg, a.input.trial)?,
    };
    create_dir(&a.input.out)?;
    let mut history = BufWriter::new(File::create(a.input.out.join("history.csv"))?);
    writeln!(history, "{CSV_HEADER}")?;
    let ts = trial_seed(&cfg, a.input.trial);
    let truth = inputs.truth.as_ref();
    let mut failure: Option<Error> = None;
    let mut observe = |method: Method, gamma: Option<f64>, it: usize, objective: f64, seconds: f64, d: &Dictionary| {
        let res = (|| -> sketchdl::Result<()> {
            let rec = recovery(d.matrix(), truth)?;
            writeln!(history, "{}", history_row(method, gamma, a.input.trial, it, rec, objective, seconds))?;
            if a.checkpoint_every.is_some_and(|n| n > 0 && it % n == 0) {
                matfile::save(a.input.out.join(format!("checkpoint_{it:04}.cdlm")), d.matrix())?;
            }
            Ok(())
        })();
        if let Err(e) = res {
            failure.get_or_insert(e);
        }
    };
    let dictionary = match method {
        Method::Cksvd => {
            let sketches = inputs.sketches.as_ref().expect("sketches requested");
            let mut tc = TrainConfig::new(cfg.t, cfg.iterations, ts);
            tc.delayed_refit = cfg.delayed_refit;
            tc.solve = solve_mode(&cfg);
            train_with_observer(sketches, cfg.k, &tc, Some(&init), |rec, d| {
                observe(method, inputs.gamma, rec.iteration, rec.objective, rec.seconds, d)
            })?
            .dictionary
        }
        Method::Aksvd => {
            let x = inputs.x.as_ref().expect("raw data loaded");
            let ak = AkSvdConfig {
                k: cfg.k,
                sparsity: cfg.t,
                iterations: cfg.iterations,
                seed: ts,
            };
            aksvd_train_with_observer(x, &ak, Some(&init), |rec, d| {
                observe(method, None, rec.iteration, rec.objective, rec.seconds, d)
            })?
            .dictionary
        }
        Method::Kmeans => unreachable!(),
    };
    if let Some(e) = failure {
        return Err(e);
    }
    history.flush()?;
    matfile::save(a.input.out.join("dictionary.cdlm"), dictionary.matrix())?;
    match recovery(dictionary.matrix(), truth)? {
        Some(r) => println!("{method}: recovered fraction {r:.3} after {} iterations", cfg.iterations),
        None => println!("{method}: finished {} iterations", cfg.iterations),
    }
    Ok(())
}

fn kmeans(a: KmeansArgs) -> sketchdl::Result<()> {
    let inputs = load_inputs(&a.input, true)?;
    let cfg = &inputs.cfg;
    let sketches = inputs.sketches.as_ref().expect("sketches requested");
    let ts = trial_seed(cfg, a.input.trial);
    let mut kc = KMeansConfig::new(cfg.k, cfg.iterations, derive_seed(ts, stream::KMEANS));
    kc.solve = solve_mode(cfg);
    kc.init = a.init.as_ref().map(matfile::load).transpose()?;
    create_dir(&a.input.out)?;
    let mut history = BufWriter::new(File::create(a.input.out.join("history.csv"))?);
    writeln!(history, "{CSV_HEADER}")?;
    let truth = inputs.truth.as_ref();
    let mut failure: Option<Error> = None;
    let out = kmeans_train_with_observer(sketches, &kc, |rec, c| {
        let res = recovery(c, truth).and_then(|r| {
            writeln!(
                history,
                "{}",
                history_row(Method::Kmeans, inputs.gamma, a.input.trial, rec.iteration, r, rec.objective, rec.seconds)
            )
            .map_err(Error::from)
        });
        if let Err(e) = res {
            failure.get_or_insert(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    history.flush()?;
    matfile::save(a.input.out.join("centers.cdlm"), &out.centers)?;
    let mut assign = BufWriter::new(File::create(a.input.out.join("assignments.csv"))?);
    for k in &out.assignments {
        writeln!(assign, "{k}")?;
    }
    assign.flush()?;
    let last = out.history.last().map_or(0.0, |r| r.objective);
    println!("kmeans: {} iterations, final sketch-domain objective {last:.6e}", cfg.iterations);
    Ok(())
}

fn theory_dist(a: &TheoryArgs) -> sketchdl::Result<Option<ProjectionDistribution>> {
    match (a.dist, a.s) {
        (Some(DistArg::Gaussian), _) => ProjectionDistribution::gaussian_for_dim(a.p).map(Some),
        (Some(DistArg::Sparse), Some(s)) | (None, Some(s)) => ProjectionDistribution::sparse_bernoulli(s).map(Some),
        (Some(DistArg::Sparse), None) => Err(Error::Config("--dist sparse needs --s".into())),
        (None, None) => Ok(None),
    }
}

fn theory(a: TheoryArgs) -> sketchdl::Result<()> {
    let dist = theory_dist(&a)?;
    if let Some(kind) = a.monte_carlo {
        let dist = dist.ok_or_else(|| Error::Config("--monte-carlo needs --dist".into()))?;
        let mut out: Box<dyn Write> = match &a.out {
            Some(path) => Box::new(BufWriter::new(File::create(path)?)),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        };
        match kind {
            McKind::Hk => {
                monte_carlo_hk(dist, a.p, a.m, &a.sizes, a.trials, a.seed)?.write_csv(&mut out, &a.p0_targets, true)?
            }
            McKind::Fk => {
                let snr = a.snr.ok_or_else(|| Error::Config("--monte-carlo fk needs --snr".into()))?;
                let reports = monte_carlo_fk_snrs(dist, a.p, a.m, &a.sizes, &[snr], a.trials, a.seed)?;
                reports[0].write_csv(&mut out, &a.p0_targets, true)?;
            }
        }
        out.flush()?;
        return Ok(());
    }
    let kappa = match (a.kappa, dist) {
        (Some(k), _) => k,
        (None, Some(d)) => d.kurtosis()?,
        (None, None) => return Err(Error::Config("need --kappa or --dist".into())),
    };
    let c = a
        .cluster_size
        .ok_or_else(|| Error::Config("--cluster-size is required".into()))?;
    let eta = match (a.p0, a.eta) {
        (Some(target), _) => {
            let eta = eta_for_p0(target, a.p, a.m, c, kappa)?;
            println!("eta={eta:.6}");
            eta
        }
        (None, Some(eta)) => eta,
        (None, None) => return Err(Error::Config("need --p0 or --eta".into())),
    };
    let params = BoundParams {
        p: a.p,
        m: a.m,
        cluster_size: c,
        kappa,
        eta,
        snr: a.snr.unwrap_or(f64::INFINITY),
    };
    params.validate()?;
    println!("p0={:.6e}", p0_bound(&params));
    if a.snr.is_some() {
        println!("p1={:.6e}", p1_bound(&params));
    }
    Ok(())
}

fn bench(a: BenchArgs) -> sketchdl::Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let path = a.out.or_else(|| cfg.output_path.clone());
    let rows = match &path {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            run_experiment(&cfg, BufWriter::new(File::create(path)?))?
        }
        None => run_experiment(&cfg, BufWriter::new(io::stdout().lock()))?,
    };
    let settings = cfg.projection_settings().unwrap_or_default();
    for &method in &cfg.methods {
        let gammas: Vec<Option<f64>> = if method.compressive() {
            settings.iter().map(|s| s.0).collect()
        } else {
            vec![None]
        };
        for g in gammas {
            if let Some(last) = mean_curve(&rows, method, g).last() {
                let label = g.map(|g| format!(" gamma={g:.4}")).unwrap_or_default();
                eprintln!("{method}{label}: mean final recovery {last:.3}");
            }
        }
    }
    Ok(())
}
