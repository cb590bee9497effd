//! End-to-end acceptance checks. Runs as a plain binary so the per-criterion
//! summary is always printed; exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stkde::estimation::acf::{sample_acf, ShareSeries};
use stkde::estimation::{fit_all_cells, fit_weight_params, AcfCurve, EstimationConfig, FitOptions};
use stkde::evaluation::{run_backtest, BacktestPlan, MethodKind, MethodSpec};
use stkde::kde::{kernel_density, select_bandwidth};
use stkde::model_file::model_to_string;
use stkde::synthetic::{simulate, truth_log_score, ComponentSpec, IntensitySpec, ScenarioSpec};
use stkde::{
    Bandwidth, Event, EventStore, HourIndex, KernelKind, SpatialPoint, StkdeModel, StudyRegion,
    WeightModel, WeightParams, WeightedKde,
};

const DOWNTOWN: [f64; 4] = [0.95, 0.9995, 0.001, 0.145];
const L: u32 = 672;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Independent evaluation through exp/ln rather than powf.
fn weight_oracle(rho: [f64; 4], lag: u32) -> f64 {
    let pow = |b: f64, e: f64| {
        if e == 0.0 {
            1.0
        } else if b == 0.0 {
            0.0
        } else {
            (e * b.ln()).exp()
        }
    };
    let l = lag as f64;
    let s1 = (PI * l / 24.0).sin().powi(2);
    let s2 = (PI * l / 168.0).sin().powi(2);
    pow(rho[0], l) + pow(rho[1], l) * pow(rho[2], s1) * pow(rho[3], s2)
}

fn weight_formula() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lag_zero = (0..1000).all(|_| {
        let rho: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>());
        WeightParams::new(rho, 24, 168).unwrap().raw_weight(0) == 2.0
    });
    let p = WeightParams::new(DOWNTOWN, 24, 168).unwrap();
    // 30-digit reference values
    let frozen = [(24, 0.978_915_749_451_190), (168, 0.919_592_894_761_891_6)];
    let mut worst: f64 = 0.0;
    for (lag, reference) in frozen {
        let got = p.raw_weight(lag);
        worst = worst
            .max((got - weight_oracle(DOWNTOWN, lag)).abs())
            .max((got - reference).abs());
    }
    outcome(
        lag_zero && worst < 1e-3,
        format!(
            "w(0)=2 for 1000 random parameter sets: {lag_zero}; w(24)={:.6}, w(168)={:.6}, max deviation {worst:.1e}",
            p.raw_weight(24),
            p.raw_weight(168)
        ),
    )
}

fn exact_curve(params: &WeightParams, scale: f64) -> AcfCurve {
    let values: Vec<f64> = params.raw_curve(L).iter().map(|w| scale * w).collect();
    AcfCurve {
        cell: 0,
        autocov: values.clone(),
        values,
        pairs: vec![10_000; L as usize],
        reliable: vec![true; L as usize],
        denominator: 1.0,
    }
}

fn noiseless_recovery() -> Outcome {
    let started = Instant::now();
    let cases = [
        ("pure decay", [0.9, 0.0, 1.0, 1.0], 0.5),
        ("downtown", DOWNTOWN, 0.1),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, rho, scale) in cases {
        let truth = WeightParams::new(rho, 24, 168).unwrap();
        let target = exact_curve(&truth, scale);
        let fit = fit_weight_params(&target, 24, 168, &FitOptions::default()).unwrap();
        let fitted: Vec<f64> = fit
            .params
            .raw_curve(L)
            .iter()
            .map(|w| fit.params.rho0 * w)
            .collect();
        let num: f64 = fitted
            .iter()
            .zip(&target.values)
            .map(|(f, a)| (f - a).powi(2))
            .sum();
        let den: f64 = target.values.iter().map(|a| a * a).sum();
        let rel = (num / den).sqrt();
        // normalised prediction weights compared the same way
        let (tn, fnorm) = (truth.raw_curve(L), fit.params.raw_curve(L));
        let (ts, fs): (f64, f64) = (tn.iter().sum(), fnorm.iter().sum());
        let num: f64 = tn
            .iter()
            .zip(&fnorm)
            .map(|(t, f)| (t / ts - f / fs).powi(2))
            .sum();
        let den: f64 = tn.iter().map(|t| (t / ts).powi(2)).sum();
        let rel_norm = (num / den).sqrt();
        pass &= rel < 1e-3 && rel_norm < 1e-3;
        parts.push(format!(
            "{name}: rel L2 {rel:.1e} (normalised {rel_norm:.1e})"
        ));
    }
    let secs = started.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    outcome(pass, format!("{}; {secs:.1}s", parts.join(", ")))
}

fn brute_acf(values: &[Option<f64>], max_lag: usize) -> Vec<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    let den: f64 = present.iter().map(|v| (v - mean) * (v - mean)).sum();
    (1..=max_lag)
        .map(|l| {
            let mut num = 0.0;
            for t in 0..values.len() - l {
                if let (Some(a), Some(b)) = (values[t], values[t + l]) {
                    num += (a - mean) * (b - mean);
                }
            }
            num / den
        })
        .collect()
}

fn acf_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for cell in 0..50 {
        let values: Vec<Option<f64>> = (0..2000)
            .map(|_| (rng.random::<f64>() >= 0.05).then(|| rng.random::<f64>()))
            .collect();
        let series = ShareSeries {
            cell,
            start: 0,
            values: values.clone(),
        };
        let got = sample_acf(&series, L).unwrap();
        for (g, w) in got.values.iter().zip(brute_acf(&values, L as usize)) {
            worst = worst.max((g - w).abs());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-12 && secs < 60.0,
        format!(
            "50 series of 2000 with 5% missing, max |FFT - double loop| {worst:.1e}; {secs:.1}s"
        ),
    )
}

fn kde_reductions() -> Outcome {
    let region = StudyRegion::new(0.0, 10.0, 0.0, 10.0, 2, 2, 2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let events: Vec<Event> = (0..2000)
        .map(|_| Event {
            location: SpatialPoint::new(rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)),
            period: HourIndex(rng.random_range(0..800)),
        })
        .collect();
    let store = EventStore::from_events(events);
    let bw = Bandwidth::new(0.8, 0.1, 0.6).unwrap();
    let target = HourIndex(800);
    let queries: Vec<SpatialPoint> = (0..50)
        .map(|_| SpatialPoint::new(rng.random_range(-1.0..11.0), rng.random_range(-1.0..11.0)))
        .collect();

    // equal weights: rho1 = 0, rho2 = rho3 = rho4 = 1 gives w = 1 at every lag
    let flat = WeightParams::new([0.0, 1.0, 1.0, 1.0], 24, 168).unwrap();
    let model = StkdeModel::new(
        WeightModel::new(region.clone(), vec![flat; 4], L).unwrap(),
        KernelKind::Gaussian,
        bw,
    );
    let window = store.window(HourIndex(800 - L), HourIndex(799));
    let (h11, h12, h22) = bw.entries();
    let det = h11 * h22 - h12 * h12;
    let plain = |q: SpatialPoint| {
        window
            .iter()
            .map(|e| {
                let (dx, dy) = (q.x - e.location.x, q.y - e.location.y);
                let z = (h22 * dx * dx - 2.0 * h12 * dx * dy + h11 * dy * dy) / det;
                (-0.5 * z).exp() / (2.0 * PI * det.sqrt())
            })
            .sum::<f64>()
            / window.len() as f64
    };
    let equal_err = queries
        .iter()
        .map(|&q| (model.predict_density(&store, target, q).unwrap() - plain(q)).abs())
        .fold(0.0, f64::max);

    let lone = Event {
        location: SpatialPoint::new(3.0, 4.0),
        period: HourIndex(10),
    };
    let single_store = EventStore::from_events(vec![lone]);
    let downtown = WeightParams::new(DOWNTOWN, 24, 168).unwrap();
    let single_model = StkdeModel::new(
        WeightModel::new(region.clone(), vec![downtown; 4], L).unwrap(),
        KernelKind::Gaussian,
        bw,
    );
    let single_err = queries
        .iter()
        .map(|&q| {
            let got = single_model
                .predict_density(&single_store, HourIndex(30), q)
                .unwrap();
            (got - kernel_density(KernelKind::Gaussian, &bw, q, lone.location)).abs()
        })
        .fold(0.0, f64::max);

    let weighted: Vec<(SpatialPoint, f64)> = window
        .iter()
        .map(|e| (e.location, rng.random_range(0.01..2.0)))
        .collect();
    let base = WeightedKde::new(weighted.iter().copied(), KernelKind::Gaussian, bw).unwrap();
    let scaled = WeightedKde::new(
        weighted.iter().map(|&(p, w)| (p, w * 37.5)),
        KernelKind::Gaussian,
        bw,
    )
    .unwrap();
    let scale_err = queries
        .iter()
        .map(|&q| (base.density(q) - scaled.density(q)).abs())
        .fold(0.0, f64::max);

    outcome(
        equal_err <= 1e-12 && single_err <= 1e-12 && scale_err <= 1e-12,
        format!(
            "equal weights vs plain KDE {equal_err:.1e}, single event vs kernel {single_err:.1e}, weight rescaling {scale_err:.1e}"
        ),
    )
}

fn normalization() -> Outcome {
    let started = Instant::now();
    // 99.9% ellipse radius sqrt(-2 ln 0.001) * 3 = 11.15 km around (20, 20)
    let spec = ScenarioSpec {
        bbox: [0.0, 40.0, 0.0, 40.0],
        horizon: 800,
        seed: 5,
        intensity: IntensitySpec::Constant { rate: 10.0 },
        components: vec![ComponentSpec {
            center: [20.0, 20.0],
            covariance: [9.0, 1.0, 9.0],
            base: 0.0,
            daily_amplitude: 0.0,
            daily_peak: 0.0,
            weekly_amplitude: 0.0,
            weekly_peak: 0.0,
            ar_coefficient: 0.0,
            ar_sigma: 0.0,
        }],
    };
    let sim = simulate(&spec).unwrap();
    let points: Vec<SpatialPoint> = sim.store.range(0..700).iter().map(|e| e.location).collect();
    let bw = select_bandwidth(&points).unwrap();
    let (h11, _, h22) = bw.entries();
    let resolution = 4.0 / h11.sqrt().min(h22.sqrt());
    let region = spec.region(2, 2, resolution).unwrap();
    let downtown = WeightParams::new(DOWNTOWN, 24, 168).unwrap();
    let model = StkdeModel::new(
        WeightModel::new(region, vec![downtown; 4], L).unwrap(),
        KernelKind::Gaussian,
        bw,
    );
    let grid = model
        .predict_grid(&sim.store, HourIndex(750), resolution)
        .unwrap();
    let integral = grid.integral();
    let secs = started.elapsed().as_secs_f64();
    outcome(
        (0.99..=1.0).contains(&integral) && secs < 60.0,
        format!(
            "integral {integral:.6} on a {}x{} grid ({resolution:.2} points/km, bandwidth sd {:.3} km); {secs:.1}s",
            grid.nx,
            grid.ny,
            h11.sqrt().min(h22.sqrt())
        ),
    )
}

struct SeedResult {
    seed: u64,
    stkde: f64,
    interpolated: f64,
    thresholded: f64,
    medic: f64,
    recent: f64,
    equal: f64,
    truth: f64,
    truth_direct: f64,
    retained: f64,
    full_window: f64,
}

fn planted_backtest(seed: u64) -> SeedResult {
    let train = 0..16 * 168;
    let test = 16 * 168..24 * 168;
    let spec = ScenarioSpec::planted_city(test.end, seed);
    let sim = simulate(&spec).unwrap();
    let region = spec.region(2, 3, 2.0).unwrap();
    let mut methods = MethodSpec::standard_set(200);
    methods.push(MethodSpec::new("truth", MethodKind::Truth));
    let mut plan = BacktestPlan::new(train, test.clone(), methods);
    plan.estimation.fit.seed = seed;
    let out = run_backtest(&plan, &sim.store, &region, Some(&sim.truth)).unwrap();
    let r = &out.report;
    let score = |name: &str| r.method(name).unwrap().average_log_score;
    SeedResult {
        seed,
        stkde: score("stKDE"),
        interpolated: score("+ interpolation"),
        thresholded: score("+ threshold (less data)"),
        medic: score("MEDIC"),
        recent: score("naiveKDE most recent hour"),
        equal: score("naiveKDE all equal weights"),
        truth: score("truth"),
        truth_direct: truth_log_score(&sim, test).unwrap(),
        retained: r.method("+ threshold (less data)").unwrap().mean_support,
        full_window: r.method("stKDE").unwrap().mean_support,
    }
}

fn method_ordering(results: &[SeedResult], secs: f64) -> Outcome {
    let beats_equal = results.iter().all(|r| r.stkde > r.equal);
    let beats_medic = results.iter().all(|r| r.stkde > r.medic);
    let beats_recent = results.iter().filter(|r| r.stkde > r.recent).count();
    let gibbs = results.iter().all(|r| {
        [
            r.stkde,
            r.interpolated,
            r.thresholded,
            r.medic,
            r.recent,
            r.equal,
        ]
        .iter()
        .all(|s| r.truth > *s)
            && (r.truth - r.truth_direct).abs() < 1e-9
    });
    let mean =
        |f: fn(&SeedResult) -> f64| results.iter().map(f).sum::<f64>() / results.len() as f64;
    outcome(
        beats_equal && beats_medic && beats_recent >= 4 && gibbs,
        format!(
            "mean scores stKDE {:.3}, equal {:.3}, recent {:.3}, MEDIC {:.3}, truth {:.3}; stKDE beats recent on {beats_recent}/5 seeds; {secs:.0}s",
            mean(|r| r.stkde),
            mean(|r| r.equal),
            mean(|r| r.recent),
            mean(|r| r.medic),
            mean(|r| r.truth)
        ),
    )
}

fn refinements(results: &[SeedResult]) -> Outcome {
    let worst_interp = results
        .iter()
        .map(|r| r.stkde - r.interpolated)
        .fold(f64::NEG_INFINITY, f64::max);
    let worst_threshold = results
        .iter()
        .map(|r| r.stkde - r.thresholded)
        .fold(f64::NEG_INFINITY, f64::max);
    let worst_reduction = results
        .iter()
        .map(|r| 1.0 - r.retained / r.full_window)
        .fold(f64::INFINITY, f64::min);
    let retained = results.iter().map(|r| r.retained).sum::<f64>() / results.len() as f64;
    outcome(
        worst_interp <= 0.05 && worst_threshold <= 0.6 && worst_reduction >= 0.9,
        format!(
            "interpolation costs at most {worst_interp:.4} nats; threshold keeps {retained:.0} events on average, kernel evaluations cut by at least {:.1}%, costs at most {worst_threshold:.3} nats",
            100.0 * worst_reduction
        ),
    )
}

fn latency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let region = StudyRegion::new(0.0, 50.0, 0.0, 50.0, 3, 7, 2.0).unwrap();
    let events: Vec<Event> = (0..15_000)
        .map(|_| Event {
            location: SpatialPoint::new(rng.random_range(0.0..50.0), rng.random_range(0.0..50.0)),
            period: HourIndex(rng.random_range(0..L)),
        })
        .collect();
    let store = EventStore::from_events(events);
    let params: Vec<WeightParams> = (0..21)
        .map(|c| {
            WeightParams::new([0.9 + 0.004 * c as f64, 0.9995, 0.001, 0.145], 24, 168).unwrap()
        })
        .collect();
    let model = StkdeModel::new(
        WeightModel::new(region, params, L).unwrap(),
        KernelKind::Gaussian,
        Bandwidth::diagonal(1.2, 1.2).unwrap(),
    );
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let started = Instant::now();
    let grid = pool.install(|| model.predict_grid(&store, HourIndex(L), 2.0).unwrap());
    let secs = started.elapsed().as_secs_f64();
    outcome(
        grid.nx == 100 && grid.ny == 100 && secs < 10.0,
        format!(
            "{}x{} grid over 15000 events on one thread in {secs:.2}s",
            grid.nx, grid.ny
        ),
    )
}

fn pipeline_bytes(seed: u64) -> Vec<Vec<u8>> {
    let horizon = 1000 + 168 + 336;
    let spec = ScenarioSpec::planted_city(horizon, seed);
    let sim = simulate(&spec).unwrap();
    let region = spec.region(2, 3, 1.0).unwrap();
    let train = 0..1000 + 168;
    let mut config = EstimationConfig::default();
    config.fit.seed = seed;
    let fitted = fit_all_cells(&sim.store, &region, train.clone(), &config).unwrap();
    let points: Vec<SpatialPoint> = sim
        .store
        .range(train.clone())
        .iter()
        .map(|e| e.location)
        .collect();
    let model = StkdeModel::new(
        fitted.model.clone(),
        KernelKind::Gaussian,
        select_bandwidth(&points).unwrap(),
    );
    let mut grid = Vec::new();
    model
        .predict_grid(&sim.store, HourIndex(train.end + 5), 1.0)
        .unwrap()
        .write_csv(&mut grid)
        .unwrap();
    let mut plan = BacktestPlan::new(train, 1000 + 168..horizon, MethodSpec::standard_set(200));
    plan.estimation = config;
    let report = run_backtest(&plan, &sim.store, &region, None)
        .unwrap()
        .report;
    let (mut summary, mut per_hour, mut table) = (Vec::new(), Vec::new(), Vec::new());
    report.write_summary_csv(&mut summary).unwrap();
    report.write_per_hour_csv(&mut per_hour).unwrap();
    report.write_table(&mut table).unwrap();
    vec![
        model_to_string(&model).into_bytes(),
        grid,
        summary,
        per_hour,
        table,
    ]
}

fn determinism() -> Outcome {
    let started = Instant::now();
    let (a, b) = (pipeline_bytes(7), pipeline_bytes(7));
    let identical = a == b;
    let bytes: usize = a.iter().map(Vec::len).sum();
    outcome(
        identical,
        format!(
            "model, grid and report outputs ({bytes} bytes) identical across two runs: {identical}; {:.0}s",
            started.elapsed().as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let mut rows: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, o: Outcome| {
        println!(
            "criterion {n} {}: {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        rows.push((n, name, o));
    };
    record(1, "weight formula point checks", weight_formula());
    record(2, "noiseless recovery", noiseless_recovery());
    record(3, "ACF oracle equivalence", acf_oracle());
    record(4, "KDE reductions", kde_reductions());
    record(5, "grid normalization", normalization());

    let started = Instant::now();
    let results: Vec<SeedResult> = (1..=5).map(planted_backtest).collect();
    let secs = started.elapsed().as_secs_f64();
    for r in &results {
        println!(
            "  seed {}: stKDE {:.3} interp {:.3} threshold {:.3} ({:.0} of {:.0} events) MEDIC {:.3} recent {:.3} equal {:.3} truth {:.3}",
            r.seed, r.stkde, r.interpolated, r.thresholded, r.retained, r.full_window, r.medic, r.recent, r.equal, r.truth
        );
    }
    record(
        6,
        "method ordering on the planted city",
        method_ordering(&results, secs),
    );
    record(
        7,
        "interpolation and threshold refinements",
        refinements(&results),
    );
    record(8, "prediction latency", latency());
    record(9, "pipeline determinism", determinism());

    println!();
    println!("acceptance summary:");
    for (n, name, o) in &rows {
        println!(
            "  {} criterion {n}: {name}",
            if o.pass { "PASS" } else { "FAIL" }
        );
    }
    let failed = rows.iter().filter(|(_, _, o)| !o.pass).count();
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
