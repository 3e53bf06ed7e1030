use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use chrono::{NaiveDate, NaiveTime};
use clap::{Args, Parser, Subcommand, ValueEnum};
use surconfort::bench::report::{emit_report, sensitivity_curve, summarize, table1, table2, ReportFormat};
use surconfort::bench::{
    evaluate, forecast, job_seed, load_dataset, run_ablation, run_sensitivity, run_sweep, train_method, CsvSource,
    DataSource, ExperimentConfig, Method, TrainedModel,
};
use surconfort::data::{fold_datasets, kfold_split, mask_labels, read_holidays, HolidayCalendar, ServiceWindow};
use surconfort::graphssl::GraphSource;
use surconfort::nn::{load_checkpoint, save_checkpoint};
use surconfort::railgraph::{build_adjacency, build_cosine_adjacency, RailNetwork};
use surconfort::synthgen::{generate_calendar, generate_network, generate_world, SynthWorldConfig, Topology};
use surconfort::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "surconfort", version, about = "Station congestion classification from sparse passenger reports")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic world as CSV files.
    Gen(GenArgs),
    /// Train one method on one fold and optionally save the network.
    Train(TrainArgs),
    /// Score a saved network on one test fold.
    Eval(EvalArgs),
    /// Every configured method and label ratio.
    Sweep(SweepArgs),
    /// Rail graph vs natural graph vs supervised only.
    Ablate(SweepArgs),
    /// The rail-graph method over a grid of regularization weights.
    Sensitivity(SensitivityArgs),
    /// Predict congestion for one station at one moment.
    Forecast(ForecastArgs),
    /// Write the station adjacency as `i,j,weight` CSV.
    GraphExport(GraphExportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TopologyArg {
    Ring,
    Line,
}

/// Synthetic world knobs.
#[derive(Debug, Clone, Default, Args)]
struct WorldArgs {
    #[arg(long)]
    stations: Option<usize>,
    #[arg(long)]
    topology: Option<TopologyArg>,
    #[arg(long)]
    days: Option<usize>,
    /// Mean reports per in-service cell.
    #[arg(long)]
    report_rate: Option<f64>,
    #[arg(long)]
    world_seed: Option<u64>,
}

impl WorldArgs {
    fn apply(&self, w: &mut SynthWorldConfig) {
        if let Some(v) = self.stations {
            w.n_stations = v;
        }
        if let Some(t) = self.topology {
            w.topology = match t {
                TopologyArg::Ring => Topology::Ring,
                TopologyArg::Line => Topology::Line,
            };
        }
        if let Some(v) = self.days {
            w.n_days = v;
        }
        if let Some(v) = self.report_rate {
            w.report_rate = v;
        }
        if let Some(v) = self.world_seed {
            w.seed = v;
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GraphArg {
    Rail,
    Cosine,
}

/// Options shared by every command that builds an experiment config.
/// Flags override values from `--config`.
#[derive(Debug, Clone, Default, Args)]
struct ExpArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with stations.csv, edges.csv, reports.csv and optionally
    /// holidays.csv and truth.csv; synthetic data when absent.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[command(flatten)]
    world: WorldArgs,
    /// Slots per day.
    #[arg(long)]
    slots: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    /// Run only the first N folds.
    #[arg(long)]
    max_folds: Option<usize>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Distance cutoff of the rail graph in km.
    #[arg(long)]
    dmax: Option<f64>,
    #[arg(long)]
    zeta: Option<f64>,
    #[arg(long)]
    graph: Option<GraphArg>,
    #[arg(long)]
    edges_per_batch: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Score against the ground-truth field instead of report labels.
    #[arg(long)]
    truth: bool,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
}

impl ExpArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(dir) = &self.data_dir {
            cfg.data = DataSource::Csv(CsvSource::in_dir(dir));
        }
        if let DataSource::Synthetic(w) = &mut cfg.data {
            self.world.apply(w);
            if let Some(s) = self.slots {
                w.slots_per_day = s;
            }
        }
        if let Some(v) = self.slots {
            cfg.slots = v;
        }
        if let Some(v) = self.folds {
            cfg.folds = v;
        }
        if let Some(v) = self.max_folds {
            cfg.max_folds = Some(v);
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = v.clone();
        }
        if let Some(v) = self.dmax {
            cfg.d_max_km = v;
        }
        if let Some(v) = self.zeta {
            cfg.ngm.zeta = v;
        }
        if let Some(g) = self.graph {
            cfg.ngm.graph = match g {
                GraphArg::Rail => GraphSource::Rail,
                GraphArg::Cosine => GraphSource::Cosine,
            };
        }
        if let Some(v) = self.edges_per_batch {
            cfg.ngm.edges_per_batch = v;
        }
        if let Some(v) = self.delta {
            cfg.diffusion.delta = v;
        }
        if let Some(v) = self.k {
            cfg.diffusion.k = v;
        }
        if let Some(v) = self.gamma {
            cfg.diffusion.gamma = v;
        }
        if let Some(v) = self.rounds {
            cfg.diffusion.rounds = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.max_epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.train.patience = v;
        }
        if self.truth {
            cfg.truth = true;
        }
        if let Some(v) = self.jobs {
            cfg.jobs = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Base synthetic config; a full experiment config is accepted too.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    world: WorldArgs,
    #[arg(long)]
    slots: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    method: Method,
    #[arg(long, default_value_t = 1.0)]
    label_ratio: f64,
    /// Fold whose training part is used.
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path (network methods only).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    exp: ExpArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Score every labeled cell instead of one test fold.
    #[arg(long)]
    all: bool,
    /// Per-station CSV destination.
    #[arg(long)]
    per_station: Option<PathBuf>,
    #[command(flatten)]
    exp: ExpArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Markdown,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Comma-separated label ratios in (0, 1].
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    /// Report directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "markdown")]
    format: FormatArg,
    #[command(flatten)]
    exp: ExpArgs,
}

impl SweepArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = self.exp.config()?;
        if let Some(m) = &self.methods {
            cfg.methods = m.clone();
        }
        if let Some(r) = &self.ratios {
            cfg.ratios = r.clone();
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn format(&self) -> ReportFormat {
        match self.format {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Markdown => ReportFormat::Markdown,
        }
    }
}

#[derive(Debug, Args)]
struct SensitivityArgs {
    /// Comma-separated regularization weights.
    #[arg(long, value_delimiter = ',')]
    zetas: Option<Vec<f64>>,
    #[arg(long)]
    label_ratio: Option<f64>,
    #[command(flatten)]
    sweep: SweepArgs,
}

#[derive(Debug, Args)]
struct ForecastArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    station: usize,
    /// YYYY-MM-DD
    #[arg(long)]
    date: NaiveDate,
    /// HH:MM
    #[arg(long, value_parser = parse_time)]
    time: NaiveTime,
    /// Holiday CSV; otherwise taken from the data source.
    #[arg(long)]
    holidays: Option<PathBuf>,
    #[command(flatten)]
    exp: ExpArgs,
}

fn parse_time(s: &str) -> std::result::Result<NaiveTime, String> {
    NaiveTime::parse_from_str(s, "%H:%M")
        .or_else(|_| NaiveTime::parse_from_str(s, "%H:%M:%S"))
        .map_err(|e| format!("expected HH:MM, got `{s}`: {e}"))
}

#[derive(Debug, Args)]
struct GraphExportArgs {
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    exp: ExpArgs,
}

fn network_of(cfg: &ExperimentConfig) -> Result<RailNetwork> {
    match &cfg.data {
        DataSource::Synthetic(w) => generate_network(w),
        DataSource::Csv(src) => RailNetwork::load_csv(&src.stations, &src.edges),
    }
}

fn calendar_of(cfg: &ExperimentConfig) -> Result<HolidayCalendar> {
    match &cfg.data {
        DataSource::Synthetic(w) => Ok(generate_calendar(w)),
        DataSource::Csv(src) => match &src.holidays {
            Some(p) => read_holidays(p),
            None => Ok(HolidayCalendar::weekends_only()),
        },
    }
}

fn graph_of(cfg: &ExperimentConfig, net: &RailNetwork) -> Result<surconfort::railgraph::RailAdjacency> {
    match cfg.ngm.graph {
        GraphSource::Cosine => build_cosine_adjacency(net),
        GraphSource::Rail | GraphSource::Natural => build_adjacency(net, cfg.d_max_km),
    }
}

fn gen(args: &GenArgs) -> Result<()> {
    let mut world = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            match serde_json::from_str::<SynthWorldConfig>(&text) {
                Ok(w) => w,
                Err(_) => match ExperimentConfig::from_json(&text)?.data {
                    DataSource::Synthetic(w) => w,
                    DataSource::Csv(_) => return Err(Error::Config("gen needs a synthetic data source".into())),
                },
            }
        }
        None => SynthWorldConfig::default(),
    };
    args.world.apply(&mut world);
    if let Some(s) = args.slots {
        world.slots_per_day = s;
    }
    let w = generate_world(&world)?;
    w.write_to(&args.out)?;
    println!(
        "wrote {} stations, {} reports over {} days to {}",
        w.network.len(),
        w.reports.len(),
        world.n_days,
        args.out.display()
    );
    Ok(())
}

/// Loads the data and returns the masked training split and test samples of
/// one fold, along with the dataset.
fn fold_split(
    cfg: &ExperimentConfig,
    fold: usize,
    seed: u64,
    ratio: f64,
) -> Result<(surconfort::bench::Dataset, surconfort::data::SplitDataset, Vec<surconfort::data::Sample>)> {
    let ds = load_dataset(cfg)?;
    let folds = kfold_split(ds.full.l(), cfg.folds, seed)?;
    let f = folds
        .get(fold)
        .ok_or_else(|| Error::InvalidArgument(format!("fold {fold} outside 0..{}", cfg.folds)))?;
    let (train, test) = fold_datasets(&ds.full, f);
    let train = mask_labels(&train, ratio, job_seed(seed, ratio, fold))?;
    Ok((ds, train, test))
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.exp.config()?;
    if args.out.is_some() && !args.method.is_neural() {
        return Err(Error::InvalidArgument(format!(
            "{} does not produce a network checkpoint",
            args.method
        )));
    }
    let (ds, split, test) = fold_split(&cfg, args.fold, args.seed, args.label_ratio)?;
    let adjacency = graph_of(&cfg, &ds.network)?;
    let js = job_seed(args.seed, args.label_ratio, args.fold);
    let model = train_method(args.method, &split, &adjacency, &cfg, js, None)?;
    let pred = model.predict(ds.full.encoder, &test)?;
    let correct = pred.iter().zip(&test).filter(|(p, s)| Some(**p) == s.label).count();
    println!(
        "{} fold={} seed={} ratio={} labeled={} test_accuracy={:.4}",
        args.method,
        args.fold,
        args.seed,
        args.label_ratio,
        split.l(),
        correct as f64 / test.len() as f64
    );
    if let (Some(out), TrainedModel::Network(m)) = (&args.out, &model) {
        save_checkpoint(m, &ds.full.encoder, out)?;
        println!("checkpoint written to {}", out.display());
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.exp.config()?;
    let (model, encoder) = load_checkpoint(&args.checkpoint)?;
    let (ds, _, test) = fold_split(&cfg, args.fold, args.seed, 1.0)?;
    let data = ds.full.encoder;
    if encoder != data {
        return Err(Error::Shape(format!(
            "checkpoint expects S = {} stations and T = {} slots, data has S = {} and T = {}",
            encoder.n_stations, encoder.n_slots, data.n_stations, data.n_slots
        )));
    }
    let samples = if args.all { ds.full.labeled.clone() } else { test };
    let ev = evaluate(&model, encoder, &samples)?;
    println!("accuracy={:.4} correct={} total={}", ev.accuracy, ev.correct, ev.total);
    if let Some(path) = &args.per_station {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["station", "correct", "total", "accuracy"])?;
        for (s, t) in &ev.per_station {
            w.write_record([s.to_string(), t.correct.to_string(), t.total.to_string(), t.accuracy().to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        surconfort::bench::report::write_atomic(path, &bytes)?;
    }
    Ok(())
}

fn report(records: &[surconfort::bench::ResultRecord], cfg: &ExperimentConfig, format: ReportFormat) -> Result<()> {
    let files = emit_report(records, &cfg.output_dir, cfg, format)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let cfg = args.config()?;
    let records = run_sweep(&cfg)?;
    print!("{}", table1(&summarize(&records)));
    report(&records, &cfg, args.format())
}

fn ablate(args: &SweepArgs) -> Result<()> {
    let cfg = args.config()?;
    let records = run_ablation(&cfg)?;
    print!("{}", table2(&summarize(&records)));
    report(&records, &cfg, args.format())
}

fn sensitivity(args: &SensitivityArgs) -> Result<()> {
    let mut cfg = args.sweep.config()?;
    if let Some(z) = &args.zetas {
        cfg.zeta_grid = z.clone();
    }
    if let Some(r) = args.label_ratio {
        cfg.sensitivity_ratio = r;
    }
    cfg.validate()?;
    let records = run_sensitivity(&cfg)?;
    println!("zeta,acc_mean,acc_std,runs");
    for (z, m, s, n) in sensitivity_curve(&records, cfg.sensitivity_ratio) {
        println!("{z},{m:.4},{s:.4},{n}");
    }
    report(&records, &cfg, args.sweep.format())
}

fn run_forecast(args: &ForecastArgs) -> Result<()> {
    let (model, encoder) = load_checkpoint(&args.checkpoint)?;
    let calendar = match &args.holidays {
        Some(p) => read_holidays(p)?,
        None => calendar_of(&args.exp.config()?)?,
    };
    let f = forecast(
        &model,
        encoder,
        &calendar,
        &ServiceWindow::default(),
        args.station,
        args.date,
        args.time,
    )?;
    let c = f.confidences;
    println!(
        "station={} date={} time={} level={} class={} confidences={:.4},{:.4},{:.4},{:.4}",
        args.station,
        args.date,
        args.time.format("%H:%M"),
        f.class + 1,
        f.class,
        c[0],
        c[1],
        c[2],
        c[3]
    );
    Ok(())
}

fn graph_export(args: &GraphExportArgs) -> Result<()> {
    let cfg = args.exp.config()?;
    let net = network_of(&cfg)?;
    let adj = graph_of(&cfg, &net)?;
    match &args.out {
        Some(p) => {
            let mut buf = Vec::new();
            adj.write_csv(&mut buf)?;
            surconfort::bench::report::write_atomic(p, &buf)?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            adj.write_csv(&mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Ablate(a) => ablate(a),
        Command::Sensitivity(a) => sensitivity(a),
        Command::Forecast(a) => run_forecast(a),
        Command::GraphExport(a) => graph_export(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests;
