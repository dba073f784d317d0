use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use georetrieval::featurizer::{Featurizer, SearchRequest};
use georetrieval::geo::{box_size_km, to_box, BoundingBox};
use georetrieval::harness::{
    compare_policies, emit_plot_data, evaluate_offline, generate_log, load_examples, run_arms, save_examples,
    split_examples, ExperimentConfig, ExperimentReport, Metrics,
};
use georetrieval::model::{encode_examples, load_checkpoint, save_checkpoint, train, train_from, Architecture, Estimator};
use georetrieval::policy::{
    build_stats_table, mc_dropout_score, FixedBounds, McConfig, Policy, SigmaMode, DEFAULT_CONTAINMENT,
    DEFAULT_MC_SAMPLES, DEFAULT_STATS_EXPANSION,
};
use georetrieval::simworld::{generate_world, World};
use georetrieval::Error;

#[derive(Parser)]
#[command(name = "georet", version, about = "Learned retrieval bounds for location search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a world, an offline event log, and train/heldout examples.
    GenWorld(GenWorldArgs),
    /// Train a bounds model and write a checkpoint.
    Train(TrainArgs),
    /// Score a policy on heldout examples.
    Eval(EvalArgs),
    /// Run the closed loop for one or more arms.
    Simulate(LoopArgs),
    /// Run at least two arms on paired streams and report deltas.
    Compare(LoopArgs),
    /// Print the uncertainty and boxes a checkpoint gives one request.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenWorldArgs {
    /// Experiment TOML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training examples (JSONL).
    #[arg(long, conflicts_with = "world")]
    dataset: Option<PathBuf>,
    /// Directory written by gen-world; its train.jsonl is used.
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from this checkpoint instead of a fresh init.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out_checkpoint: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FixedPolicy {
    Heuristic,
    Stats,
    World,
    Degenerate,
}

#[derive(Clone, Copy, ValueEnum)]
enum SigmaArg {
    Mad,
    Std,
}

impl From<SigmaArg> for SigmaMode {
    fn from(s: SigmaArg) -> Self {
        match s {
            SigmaArg::Mad => SigmaMode::Mad,
            SigmaArg::Std => SigmaMode::Std,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, conflicts_with = "policy", required_unless_present = "policy")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    policy: Option<FixedPolicy>,
    #[arg(long)]
    heldout: PathBuf,
    /// World file; listings are counted against it.
    #[arg(long)]
    world: PathBuf,
    /// Examples the stats policy is built from.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
    mc_samples: usize,
    /// Serve the UCB box with this lambda; the MC mean box when omitted.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum, default_value = "mad")]
    sigma_mode: SigmaArg,
    /// Metrics CSV; stdout when omitted.
    #[arg(long)]
    out_report: Option<PathBuf>,
}

#[derive(Args)]
struct LoopArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// World file written by gen-world; generated from the config seed when omitted.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Comma-separated arm names from the config; all arms when omitted.
    #[arg(long, value_delimiter = ',')]
    arms: Vec<String>,
    #[arg(long)]
    days: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One SearchRequest as JSON; `-` reads stdin.
    #[arg(long)]
    request_json: String,
    #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
    mc_samples: usize,
    #[arg(long, default_value_t = georetrieval::policy::DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, value_enum, default_value = "mad")]
    sigma_mode: SigmaArg,
}

/// Failure paired with the process exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = match err.downcast_ref::<Error>() {
            Some(Error::InvalidArgument(_) | Error::InvalidConfig(_)) => EXIT_USAGE,
            Some(Error::Numerical(_)) => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        };
        Failure { code, err }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        anyhow::Error::from(err).into()
    }
}

fn usage(msg: String) -> Failure {
    Failure { code: EXIT_USAGE, err: anyhow!(msg) }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let out = match cli.command {
        Command::GenWorld(a) => gen_world(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Simulate(a) => loop_cmd(a, false),
        Command::Compare(a) => loop_cmd(a, true),
        Command::Inspect(a) => inspect_cmd(a),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) if !p.is_file() => Err(usage(format!("config file not found: {}", p.display()))),
        Some(p) => Ok(ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?),
    }
}

/// Effective config goes to stderr so stdout stays machine-readable.
fn print_config<T: Serialize>(cfg: &T) -> CliResult<()> {
    let text = toml::to_string(cfg).map_err(|e| anyhow!("serializing config: {e}"))?;
    eprintln!("# effective config\n{text}");
    Ok(())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn gen_world(a: GenWorldArgs) -> CliResult<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    print_config(&cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let world = generate_world(&cfg.world, cfg.seed)?;
    world.save(&a.out.join("world.jsonl"))?;

    let days = cfg.offline.train_days + cfg.offline.heldout_days;
    let log = generate_log(&world, 0..days, &Policy::Fixed(FixedBounds::World))?;
    let mut w = create(&a.out.join("events.jsonl"))?;
    log.write_jsonl(&mut w)?;
    w.flush().context("writing events.jsonl")?;

    let (train, heldout) = split_examples(&log, cfg.offline.train_days);
    save_examples(&a.out.join("train.jsonl"), &train)?;
    save_examples(&a.out.join("heldout.jsonl"), &heldout)?;
    fs::write(a.out.join("config.toml"), cfg.to_toml()?).context("writing config.toml")?;
    info!(
        "{} destinations, {} listings, {} searches, {} train and {} heldout examples",
        world.destinations.len(),
        world.listings.len(),
        log.searches.len(),
        train.len(),
        heldout.len()
    );
    println!("{}", a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(a.config.as_deref())?.train;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    print_config(&cfg)?;
    let dataset = match (&a.dataset, &a.world) {
        (Some(d), _) => d.clone(),
        (None, Some(w)) => w.join("train.jsonl"),
        (None, None) => return Err(usage("one of --dataset or --world is required".into())),
    };
    let examples = load_examples(&dataset)?;
    let (featurizer, outcome) = match &a.resume {
        Some(ckpt) => {
            let prior = load_checkpoint(ckpt)?;
            let data = encode_examples(&prior.featurizer, &examples);
            (prior.featurizer, train_from(prior.params, &cfg, &data)?)
        }
        None => {
            let featurizer = Featurizer::fit(examples.iter().map(|e| &e.request))?;
            let data = encode_examples(&featurizer, &examples);
            let arch = Architecture::for_vocab(&featurizer.vocab, cfg.hidden, cfg.nonneg);
            (featurizer, train(arch, &cfg, &data)?)
        }
    };
    let mut out = io::stdout().lock();
    writeln!(out, "epoch,loss").context("writing stdout")?;
    for (epoch, loss) in outcome.loss_curve.iter().enumerate() {
        writeln!(out, "{epoch},{loss}").context("writing stdout")?;
    }
    let est = Estimator::new(featurizer, outcome.params, cfg);
    save_checkpoint(&a.out_checkpoint, &est)?;
    info!("wrote {} (model {})", a.out_checkpoint.display(), est.version);
    Ok(())
}

const METRICS_COLUMNS: [&str; 7] = [
    "policy",
    "n",
    "booked_location_recall",
    "mean_bounds_size_km",
    "mean_listings_retrieved",
    "mean_sigma",
    "booking_conversion",
];

fn metrics_record(policy: &str, m: &Metrics) -> [String; 7] {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    [
        policy.to_string(),
        m.n.to_string(),
        m.booked_location_recall.to_string(),
        m.mean_bounds_size_km.to_string(),
        m.mean_listings_retrieved.to_string(),
        opt(m.mean_sigma),
        opt(m.booking_conversion),
    ]
}

fn eval_cmd(a: EvalArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let heuristic = cfg.closed_loop.heuristic;
    let world = World::load(&a.world)?;
    let heldout = load_examples(&a.heldout)?;
    let policy = match (&a.checkpoint, a.policy) {
        (Some(ckpt), _) => {
            let model = Arc::new(load_checkpoint(ckpt)?);
            match a.lambda {
                None => Policy::MlMean { model, n_samples: a.mc_samples },
                Some(lambda) => Policy::McDropoutUcb {
                    model,
                    mc: McConfig { n_samples: a.mc_samples, lambda, sigma_mode: a.sigma_mode.into() },
                },
            }
        }
        (None, Some(FixedPolicy::Heuristic)) => Policy::Heuristic(heuristic),
        (None, Some(FixedPolicy::World)) => Policy::Fixed(FixedBounds::World),
        (None, Some(FixedPolicy::Degenerate)) => Policy::Fixed(FixedBounds::Degenerate),
        (None, Some(FixedPolicy::Stats)) => {
            let Some(train_path) = &a.train else {
                return Err(usage("--policy stats needs --train".into()));
            };
            let examples = load_examples(train_path)?;
            let table = build_stats_table(
                examples.iter().map(|e| (e.request.location_id.as_str(), e.booked, e.request.center)),
            )?;
            Policy::Stats {
                table: Arc::new(table),
                containment: DEFAULT_CONTAINMENT,
                expansion: DEFAULT_STATS_EXPANSION,
                fallback: heuristic,
            }
        }
        (None, None) => return Err(usage("one of --checkpoint or --policy is required".into())),
    };
    eprintln!(
        "# effective config\npolicy = {:?}\nheldout = {:?}\nmc_samples = {}\nlambda = {:?}\nheuristic = {:?}",
        policy.name(),
        a.heldout,
        a.mc_samples,
        a.lambda,
        heuristic
    );
    let metrics = evaluate_offline(&policy, &heldout, world.index())?;
    let sink: Box<dyn Write> = match &a.out_report {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(METRICS_COLUMNS).context("writing metrics")?;
    w.write_record(metrics_record(policy.name(), &metrics)).context("writing metrics")?;
    w.flush().context("writing metrics")?;
    Ok(())
}

fn loop_cmd(a: LoopArgs, paired: bool) -> CliResult<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = a.days {
        cfg.closed_loop.days = d;
    }
    if !a.arms.is_empty() {
        let mut picked = Vec::new();
        for name in &a.arms {
            let arm = cfg
                .arms
                .iter()
                .find(|x| &x.name == name)
                .ok_or_else(|| usage(format!("no arm named {name:?} in config")))?;
            picked.push(arm.clone());
        }
        cfg.arms = picked;
    }
    cfg.validate()?;
    let world = match &a.world {
        Some(p) => World::load(p)?,
        None => generate_world(&cfg.world, cfg.seed)?,
    };
    cfg.world = world.config.clone();
    cfg.seed = world.seed;
    print_config(&cfg)?;

    let report = if paired {
        compare_policies(&world, &cfg.arms, &cfg.closed_loop, &cfg.train)?
    } else {
        run_arms(&world, &cfg.arms, &cfg.closed_loop, &cfg.train)?
    };
    write_report(&report, &a.out)?;
    print_summary(&report).context("writing stdout")?;
    if let Some(arm) = report.arms.iter().find(|r| r.aborted.is_some()) {
        return Err(Failure {
            code: EXIT_NUMERICAL,
            err: anyhow!("arm {} aborted: {}", arm.arm.name, arm.aborted.as_deref().unwrap_or_default()),
        });
    }
    Ok(())
}

fn write_report(report: &ExperimentReport, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = create(&out.join("report.json"))?;
    serde_json::to_writer_pretty(&mut w, report).context("writing report.json")?;
    w.flush().context("writing report.json")?;
    emit_plot_data(report, &out.join("series.csv"), &out.join("samples.jsonl"))?;
    Ok(())
}

fn print_summary(report: &ExperimentReport) -> io::Result<()> {
    let mut out = io::stdout().lock();
    match report.stream_hash() {
        Some(h) => writeln!(out, "stream_hash {h}")?,
        None => writeln!(out, "stream_hash unpaired")?,
    }
    for arm in &report.arms {
        let t = arm.totals();
        writeln!(
            out,
            "arm {} days {} recall {:.4} size_km {:.2} listings {:.1} bookings {} tail_bookings {}",
            arm.arm.name,
            arm.days.len(),
            t.booked_location_recall,
            t.mean_bounds_size_km,
            t.mean_listings_retrieved,
            arm.bookings(),
            arm.tail_bookings()
        )?;
    }
    if report.arms.len() > 1 {
        let base = &report.arms[0].arm.name;
        for (arm, d) in report.arms.iter().zip(&report.deltas).skip(1) {
            writeln!(
                out,
                "delta {} vs {}: recall {:+.2} pts, size {}, listings {}, bookings {:+}, tail_bookings {:+}",
                arm.arm.name,
                base,
                d.recall_delta_pts,
                pct(d.size_delta_pct),
                pct(d.listings_delta_pct),
                d.bookings_delta,
                d.tail_bookings_delta
            )?;
        }
    }
    Ok(())
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:+.2}%"))
}

#[derive(Serialize)]
struct Inspection {
    model_version: String,
    n_samples: usize,
    lambda: f64,
    mu: [f64; 4],
    sigma: [f64; 4],
    mean_box: BoundingBox,
    ucb_box: BoundingBox,
    mean_box_km: f64,
    ucb_box_km: f64,
}

fn inspect_cmd(a: InspectArgs) -> CliResult<()> {
    let raw = if a.request_json == "-" {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s).context("reading stdin")?;
        s
    } else {
        fs::read_to_string(&a.request_json).with_context(|| format!("reading {}", a.request_json))?
    };
    let req: SearchRequest = serde_json::from_str(&raw).context("malformed request")?;
    req.validate()?;
    if !a.lambda.is_finite() || a.lambda < 0.0 {
        return Err(usage(format!("lambda must be finite and >= 0, got {}", a.lambda)));
    }
    eprintln!(
        "# effective config\ncheckpoint = {:?}\nmc_samples = {}\nlambda = {}",
        a.checkpoint, a.mc_samples, a.lambda
    );
    let est = load_checkpoint(&a.checkpoint)?;
    let u = mc_dropout_score(&est, &est.encode(&req), a.mc_samples, a.sigma_mode.into())?;
    let mean_box = to_box(req.center, u.upper(0.0));
    let ucb_box = to_box(req.center, u.upper(a.lambda));
    let report = Inspection {
        model_version: est.version.clone(),
        n_samples: u.n_samples,
        lambda: a.lambda,
        mu: u.mu.to_array(),
        sigma: u.sigma.to_array(),
        mean_box,
        ucb_box,
        mean_box_km: box_size_km(&mean_box).wh_sum_km,
        ucb_box_km: box_size_km(&ucb_box).wh_sum_km,
    };
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, &report).context("writing stdout")?;
    writeln!(out).context("writing stdout")?;
    Ok(())
}
