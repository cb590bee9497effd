mod config;

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use stkde::domain::{ingest_events, write_events};
use stkde::estimation::{fit_all_cells, positive_part};
use stkde::evaluation::{run_backtest, tune_threshold, BacktestPlan, MethodKind, MethodSpec};
use stkde::kde::{fmt_f64, select_bandwidth};
use stkde::synthetic::{simulate, truth_log_score};
use stkde::{
    load_model, save_model, Error, ErrorCategory, EventStore, HourIndex, SpatialPoint, StkdeModel,
    StudyRegion,
};

use config::{range, RunConfig};

#[derive(Parser)]
#[command(
    name = "stkde",
    version,
    about = "Spatio-temporal weighted KDE demand forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, env = "STKDE_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Caps worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit per-cell weight curves and a bandwidth; writes a model file.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Event CSV with `timestamp,x_km,y_km`.
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        interpolate: bool,
    },
    /// Write density grids for target hours.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        events: PathBuf,
        /// Hour indices: `5000`, `5000,5001` or `5000..5010`.
        #[arg(long, required = true)]
        target: String,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        interpolate: bool,
    },
    /// Backtest the configured methods and write comparison reports.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Event CSV; the configured scenario is simulated when omitted.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Fixed threshold for every stKDE method without one.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        interpolate: bool,
    },
    /// Simulate a scenario; writes events and ground truth.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) => match e.category() {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numerical => 4,
        },
        None if err.chain().any(|e| e.is::<std::io::Error>()) => 3,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common = match &cli.command {
        Command::Fit { common, .. }
        | Command::Predict { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Simulate { common } => common,
    };
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring worker threads")?;
    }
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
        if let Some(s) = &mut config.scenario {
            s.seed = seed;
        }
    }
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating output directory {}", common.out.display()))?;
    let out = common.out.clone();
    match cli.command {
        Command::Fit {
            events,
            threshold,
            interpolate,
            ..
        } => {
            if let Some(o) = threshold {
                config.weights.threshold = o;
            }
            config.weights.interpolate |= interpolate;
            cmd_fit(&config, &events, &out)
        }
        Command::Predict {
            model,
            events,
            target,
            threshold,
            interpolate,
            ..
        } => cmd_predict(
            &config,
            &model,
            &events,
            &target,
            threshold,
            interpolate,
            &out,
        ),
        Command::Evaluate {
            events,
            threshold,
            interpolate,
            ..
        } => cmd_evaluate(&config, events.as_deref(), threshold, interpolate, &out),
        Command::Simulate { .. } => cmd_simulate(&config, &out),
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn load_events(path: &Path, region: &StudyRegion, epoch: i64) -> anyhow::Result<EventStore> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let ingested = ingest_events(BufReader::new(file), region, epoch)
        .with_context(|| format!("reading events from {}", path.display()))?;
    eprintln!(
        "loaded {} events over {} hours ({} outside the box, {} unparseable)",
        ingested.store.len(),
        ingested.store.horizon(),
        ingested.dropped_out_of_box,
        ingested.dropped_unparseable
    );
    Ok(ingested.store)
}

fn default_train(store: &EventStore) -> std::ops::Range<u32> {
    let first = store.events().first().map_or(0, |e| e.period.0);
    first..store.horizon()
}

/// Every seventh hour of the last `max_lag` hours of `train`.
fn tuning_hours(train: &std::ops::Range<u32>, max_lag: u32) -> Vec<HourIndex> {
    let start = train.end.saturating_sub(max_lag).max(train.start).max(1);
    (start..train.end).step_by(7).map(HourIndex).collect()
}

fn cmd_fit(config: &RunConfig, events: &Path, out: &Path) -> anyhow::Result<()> {
    let region = config.region()?;
    let store = load_events(events, &region, config.epoch()?)?;
    let train = match config.fit.train {
        Some(r) => range(r, "training")?,
        None => default_train(&store),
    };
    let estimation = config.estimation();
    let started = Instant::now();
    let bandwidth = match config.kernel.bandwidth()? {
        Some(b) => b,
        None => {
            let points: Vec<SpatialPoint> = store
                .range(train.clone())
                .iter()
                .map(|e| e.location)
                .collect();
            select_bandwidth(&points)?
        }
    };
    let fitted = fit_all_cells(&store, &region, train.clone(), &estimation)?;
    let mut weights = fitted
        .model
        .clone()
        .with_interpolation(config.weights.interpolate);
    let threshold = match config.weights.retain_events {
        Some(n) => tune_threshold(
            &weights,
            &store,
            &tuning_hours(&train, estimation.max_lag),
            n,
        )?,
        None => config.weights.threshold,
    };
    weights = weights.with_threshold(threshold)?;
    let model = StkdeModel::new(weights, config.kernel.kind, bandwidth);
    eprintln!(
        "fitted {} cells ({} fallback) in {:.2}s",
        fitted.fits.len(),
        fitted.fallback_count(),
        started.elapsed().as_secs_f64()
    );

    let mut w = create(&out.join("model.txt"))?;
    save_model(&model, &mut w)?;
    w.flush()?;

    let mut acf = String::from("cell,lag,acf,acf_positive,pairs,reliable\n");
    for curve in fitted.acf.iter().flatten() {
        let pos = positive_part(curve);
        for l in 0..curve.values.len() {
            let _ = writeln!(
                acf,
                "{},{},{},{},{},{}",
                curve.cell,
                l + 1,
                fmt_f64(curve.values[l]),
                fmt_f64(pos.values[l]),
                curve.pairs[l],
                curve.reliable[l]
            );
        }
    }
    fs::write(out.join("acf.csv"), acf)?;

    let mut fits =
        String::from("cell,events,fallback,converged,iterations,sse,rho0,rho1,rho2,rho3,rho4\n");
    let mut summary = format!(
        "training hours {}..{}, {} events\nbandwidth h11 = {:.6} h12 = {:.6} h22 = {:.6}\nthreshold = {:.6e}, interpolate = {}\n\n{:>4} {:>7} {:>8} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
        train.start,
        train.end,
        store.range(train.clone()).len(),
        bandwidth.entries().0,
        bandwidth.entries().1,
        bandwidth.entries().2,
        threshold,
        config.weights.interpolate,
        "cell",
        "events",
        "fallback",
        "rho0",
        "rho1",
        "rho2",
        "rho3",
        "rho4"
    );
    for (c, f) in fitted.fits.iter().enumerate() {
        let p = &f.params;
        let _ = writeln!(
            fits,
            "{c},{},{},{},{},{},{},{},{},{},{}",
            fitted.cell_events[c],
            f.fallback,
            f.converged,
            f.iterations,
            fmt_f64(f.sse),
            fmt_f64(p.rho0),
            fmt_f64(p.rho1),
            fmt_f64(p.rho2),
            fmt_f64(p.rho3),
            fmt_f64(p.rho4)
        );
        let _ = writeln!(
            summary,
            "{c:>4} {:>7} {:>8} {:>10.6} {:>10.6} {:>10.6} {:>10.6} {:>10.6}",
            fitted.cell_events[c],
            if f.fallback { "yes" } else { "no" },
            p.rho0,
            p.rho1,
            p.rho2,
            p.rho3,
            p.rho4
        );
    }
    fs::write(out.join("fits.csv"), fits)?;
    fs::write(out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn parse_targets(raw: &str) -> anyhow::Result<Vec<HourIndex>> {
    let mut out = Vec::new();
    for part in raw.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (u32, u32) = (
                a.trim()
                    .parse()
                    .with_context(|| format!("bad target `{part}`"))?,
                b.trim()
                    .parse()
                    .with_context(|| format!("bad target `{part}`"))?,
            );
            out.extend((a..b).map(HourIndex));
        } else {
            out.push(HourIndex(part.parse().map_err(|_| {
                Error::Config(format!("bad target hour `{part}`"))
            })?));
        }
    }
    if out.is_empty() {
        bail!(Error::Config("no target hours given".into()));
    }
    Ok(out)
}

fn cmd_predict(
    config: &RunConfig,
    model_path: &Path,
    events: &Path,
    target: &str,
    threshold: Option<f64>,
    interpolate: bool,
    out: &Path,
) -> anyhow::Result<()> {
    let targets = parse_targets(target)?;
    let file =
        File::open(model_path).with_context(|| format!("opening {}", model_path.display()))?;
    let mut model = load_model(BufReader::new(file))
        .with_context(|| format!("loading model {}", model_path.display()))?;
    if interpolate {
        model.weights = model.weights.clone().with_interpolation(true);
    }
    if let Some(o) = threshold {
        model.weights = model.weights.clone().with_threshold(o)?;
    }
    let region = model.region().clone();
    let store = load_events(events, &region, config.epoch()?)?;
    for t in targets {
        let started = Instant::now();
        let prediction = model.prepare(&store, t)?;
        let grid =
            stkde::DensityGrid::evaluate(&region, region.resolution, |p| prediction.density(p))?;
        let mut w = create(&out.join(format!("grid_{t}.csv")))?;
        grid.write_csv(&mut w)?;
        w.flush()?;
        let mut m = create(&out.join(format!("grid_{t}.meta")))?;
        grid.write_metadata(&mut m, t)?;
        writeln!(m, "retained = {}", prediction.retained)?;
        writeln!(m, "omitted = {}", prediction.omitted)?;
        m.flush()?;
        eprintln!(
            "hour {t}: {} events retained, {} omitted, integral {:.6}, {:.3}s",
            prediction.retained,
            prediction.omitted,
            grid.integral(),
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn cmd_evaluate(
    config: &RunConfig,
    events: Option<&Path>,
    threshold: Option<f64>,
    interpolate: bool,
    out: &Path,
) -> anyhow::Result<()> {
    let region = config.region()?;
    let simulation = match events {
        Some(_) => None,
        None => Some(simulate(&config.scenario())?),
    };
    let loaded;
    let store = match (events, &simulation) {
        (Some(path), _) => {
            loaded = load_events(path, &region, config.epoch()?)?;
            &loaded
        }
        (None, Some(sim)) => &sim.store,
        (None, None) => unreachable!(),
    };
    let ev = &config.evaluate;
    let train = range(
        ev.train
            .ok_or_else(|| Error::Config("[evaluate] needs train = [start, end]".into()))?,
        "training",
    )?;
    let test = range(
        ev.test
            .ok_or_else(|| Error::Config("[evaluate] needs test = [start, end]".into()))?,
        "test",
    )?;
    let mut methods = if ev.methods.is_empty() {
        let mut m = MethodSpec::standard_set(ev.threshold_events);
        for spec in &mut m {
            if let MethodKind::Medic { config: c } = &mut spec.kind {
                *c = config.medic;
            }
        }
        m
    } else {
        ev.methods.clone()
    };
    for spec in &mut methods {
        if let MethodKind::Stkde {
            interpolate: i,
            threshold: t,
        } = &mut spec.kind
        {
            *i |= interpolate;
            if t.is_none() {
                *t = threshold.map(|value| stkde::evaluation::ThresholdRule::Fixed { value });
            }
        }
    }
    let mut plan = BacktestPlan::new(train, test.clone(), methods);
    plan.estimation = config.estimation();
    plan.kernel = config.kernel.kind;
    plan.bandwidth = config.kernel.bandwidth()?;
    plan.density_floor = ev.density_floor;

    let outcome = run_backtest(&plan, store, &region, simulation.as_ref().map(|s| &s.truth))?;
    let report = &outcome.report;
    let mut w = create(&out.join("report.csv"))?;
    report.write_summary_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&out.join("per_hour.csv"))?;
    report.write_per_hour_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&out.join("timing.csv"))?;
    report.write_timing_csv(&mut w)?;
    w.flush()?;
    let mut table = Vec::new();
    report.write_table(&mut table)?;
    if let Some(sim) = &simulation {
        writeln!(
            table,
            "Ground-truth density scores {:.3} on the same events.",
            truth_log_score(sim, test)?
        )?;
    }
    fs::write(out.join("table.txt"), &table)?;
    std::io::stdout().write_all(&table)?;
    Ok(())
}

fn cmd_simulate(config: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let spec = config.scenario();
    let sim = simulate(&spec)?;
    let mut w = create(&out.join("events.csv"))?;
    write_events(&mut w, sim.store.events(), config.epoch()?)?;
    w.flush()?;

    let k = sim.truth.component_count();
    let mut weights = String::from("hour,intensity");
    for j in 0..k {
        let _ = write!(weights, ",w{j}");
    }
    weights.push('\n');
    for t in 0..sim.truth.horizon() {
        let h = HourIndex(t);
        let _ = write!(weights, "{t},{}", fmt_f64(sim.truth.intensity(h)));
        for w in sim.truth.mixing_weights(h) {
            let _ = write!(weights, ",{}", fmt_f64(*w));
        }
        weights.push('\n');
    }
    fs::write(out.join("truth_weights.csv"), weights)?;

    let mut meta = format!(
        "seed = {}\nhorizon = {}\nevents = {}\nrejection_rate = {}\nbbox = {:?}\ncomponents = {k}\n",
        spec.seed,
        spec.horizon,
        sim.store.len(),
        fmt_f64(sim.rejection_rate),
        spec.bbox
    );
    for (j, c) in spec.components.iter().enumerate() {
        let _ = writeln!(
            meta,
            "[component.{j}]\ncenter = {:?}\ncovariance = {:?}",
            c.center, c.covariance
        );
    }
    fs::write(out.join("truth.txt"), &meta)?;
    eprintln!(
        "simulated {} events over {} hours (rejection rate {:.4})",
        sim.store.len(),
        spec.horizon,
        sim.rejection_rate
    );
    Ok(())
}
