//! Acceptance criteria 1-10. Runs without the libtest harness so that every
//! criterion prints one PASS/FAIL line even when an earlier one fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::fixture::{Counting, Fixture};
use common::gradient_cases;
use har_uq::bundle::Bundle;
use har_uq::cascade::{Cascade, Stage};
use har_uq::config::RunConfig;
use har_uq::detectors::{kmeans_fit, DetectorKind, Flag, KMeansConfig};
use har_uq::mae::{masked_reconstruction_loss, MaeConfig, MaeModel};
use har_uq::metrics::{uncertainty_accuracy, Report};
use har_uq::nn::{Tape, Tensor};
use har_uq::pipeline::{self, RunOutput, System};
use har_uq::rng::RngState;

// Tolerances and limits.
const GRAD_TOL: f64 = 1e-3;
const GRAD_SECONDS: f64 = 30.0;
const CLOSURE_RANGE: (f64, f64) = (0.002, 0.025);
const KMEANS_MEAN_TOL: f64 = 1e-6;
const SHIFT_FACTOR: f64 = 3.0;
const CASCADE_SLACK: f64 = 0.02;
const MIN_VALIDATION_UA: f64 = 0.70;
const PIPELINE_SECONDS: f64 = 15.0 * 60.0;
const TIMING_WINDOWS: usize = 10_000;
const CASCADE_SECONDS: f64 = 60.0;
const ROUND_TRIP_WINDOWS: usize = 100;
const SCORE_TOL: f64 = 1e-6;
const SEEDS: [u64; 3] = [0, 1, 2];

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Run {
    cfg: RunConfig,
    out: RunOutput,
    seconds: f64,
}

fn full_run(offset: u64) -> Run {
    let mut cfg = RunConfig::default();
    cfg.seeds = cfg.seeds.offset(offset);
    let start = Instant::now();
    let set = pipeline::scenarios(&cfg).unwrap();
    let out = pipeline::run_all(&cfg, &set).unwrap();
    Run {
        cfg,
        out,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    for (name, case) in gradient_cases() {
        for seed in 0..10 {
            let err = case(seed);
            if !(err <= worst.1) {
                worst = (format!("{name} seed {seed}"), err);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst.1 < GRAD_TOL && secs < GRAD_SECONDS,
        format!(
            "worst relative error {:.2e} ({}), {secs:.1}s",
            worst.1, worst.0
        ),
    )
}

fn locality() -> Outcome {
    let mae = MaeModel::new(MaeConfig::default(), &mut RngState::new(1)).unwrap();
    let fx_windows = Fixture::new(20, 0.9, 40).windows;
    let mut rng = RngState::new(2);
    let loss_of = |preds: &[Tensor], targets: &[Tensor], masks: &[Vec<bool>]| -> u32 {
        let mut tape = Tape::new();
        let p: Vec<_> = preds.iter().map(|t| tape.leaf(t.clone())).collect();
        let t: Vec<_> = targets.iter().map(|t| tape.leaf(t.clone())).collect();
        let l = masked_reconstruction_loss(&mut tape, &p, &t, masks).unwrap();
        tape.value(l).item().to_bits()
    };
    for case in 0..100u64 {
        let batch = vec![&fx_windows[rng.below(fx_windows.len())]];
        let mut tape = Tape::new();
        let bound = mae.params().bind(&mut tape);
        let parts = mae
            .forward_parts(&mut tape, &bound, &batch, &mut RngState::new(case))
            .unwrap();
        let preds: Vec<Tensor> = parts.preds.iter().map(|&v| tape.value(v).clone()).collect();
        let targets: Vec<Tensor> = parts
            .targets
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect();
        let before = loss_of(&preds, &targets, &parts.masks);
        let mut mutated = [preds, targets];
        for ts in &mut mutated {
            for (t, mask) in ts.iter_mut().zip(&parts.masks) {
                let cols = t.cols();
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        for v in &mut t.data_mut()[r * cols..(r + 1) * cols] {
                            *v += rng.normal() as f32 * 3.0;
                        }
                    }
                }
            }
        }
        let after = loss_of(&mutated[0], &mutated[1], &parts.masks);
        if before != after {
            return Err(format!("case {case}: loss changed"));
        }
    }
    Ok("100 cases bit-identical".into())
}

fn closure(runs: &[Run]) -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for (seed, run) in SEEDS.iter().zip(runs) {
        let bundle = &run.out.bundle;
        let system = System::from_bundle(bundle).unwrap();
        let set = pipeline::scenarios(&run.cfg).unwrap();
        let latents = system.latents(&set.validation).unwrap();
        let batch =
            har_uq::detectors::Batch::new(system.mae, system.head, &set.validation, &latents)
                .unwrap();
        for kind in DetectorKind::ALL {
            let det = system.detectors.get(kind);
            let t = det.threshold().unwrap();
            let scores = det.calibration_scores(&batch).unwrap();
            let rate =
                scores.iter().filter(|&&s| t.flag(s).is_red()).count() as f64 / scores.len() as f64;
            ok &= rate >= CLOSURE_RANGE.0 && rate <= CLOSURE_RANGE.1;
            details.push(format!(
                "s{seed} {kind} {:.2}%/{}",
                100.0 * rate,
                scores.len()
            ));
        }
    }
    ensure(ok, details.join(", "))
}

fn ua_oracle() -> Outcome {
    let mut rng = RngState::new(4);
    for case in 0..1000 {
        let n = 1 + rng.below(1000);
        let flags: Vec<Flag> = (0..n)
            .map(|_| {
                if rng.uniform() < 0.5 {
                    Flag::Red
                } else {
                    Flag::Green
                }
            })
            .collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        let mut inconsistent = 0usize;
        for i in 0..n {
            let correct = preds[i] == labels[i];
            if flags[i].is_red() == correct {
                inconsistent += 1;
            }
        }
        let oracle = 1.0 - inconsistent as f64 / n as f64;
        let rep = uncertainty_accuracy(&flags, &preds, &labels).unwrap();
        if rep.ua != oracle {
            return Err(format!("case {case}: {} vs {oracle}", rep.ua));
        }
        let inverted: Vec<Flag> = flags.iter().map(|&f| !f).collect();
        let other = uncertainty_accuracy(&inverted, &preds, &labels).unwrap().ua;
        if (rep.ua + other - 1.0).abs() > 1e-12 {
            return Err(format!(
                "case {case}: complement sums to {}",
                rep.ua + other
            ));
        }
    }
    Ok("1000 vectors exact, complements sum to 1".into())
}

fn cascade_equivalence() -> Outcome {
    let fx = Fixture::new(1000, 0.9, 41);
    let batch = fx.batch();
    let d = &fx.detectors;
    let (rec, dist, mcd) = (
        Counting::new(&d.reconstruction),
        Counting::new(&d.distance),
        Counting::new(&d.mcdropout),
    );
    let verdicts = Cascade::new(&rec, &dist, &mcd)
        .unwrap()
        .run(&batch, true)
        .unwrap();
    let standalone: Vec<Vec<Flag>> = DetectorKind::ALL
        .iter()
        .map(|&k| {
            let v = d.get(k).verdicts(&batch, &batch.all_rows()).unwrap();
            v.iter().map(|v| v.flag).collect()
        })
        .collect();
    let mismatches = (0..batch.len())
        .filter(|&i| verdicts[i].final_flag.is_red() != standalone.iter().any(|f| f[i].is_red()))
        .count();
    let red1: Vec<usize> = (0..batch.len())
        .filter(|&i| verdicts[i].stage_reached == Stage::Reconstruction)
        .collect();
    let leaked = red1
        .iter()
        .filter(|r| dist.seen.borrow().contains(r) || mcd.seen.borrow().contains(r))
        .count();
    ensure(
        mismatches == 0 && leaked == 0 && !red1.is_empty(),
        format!(
            "{mismatches} OR mismatches; {} stage-1 reds, {leaked} re-scored later; calls {}/{}/{}",
            red1.len(),
            rec.calls(),
            dist.calls(),
            mcd.calls()
        ),
    )
}

fn kmeans() -> Outcome {
    let mut rng = RngState::new(5);
    let mut points: Vec<Vec<f32>> = (0..300)
        .map(|_| (0..4).map(|_| rng.normal() as f32).collect())
        .collect();
    let set = kmeans_fit(&points, 6, &KMeansConfig::default(), &mut rng).unwrap();
    let monotone = set.inertia_history.windows(2).all(|w| w[1] <= w[0]);

    let one = kmeans_fit(&points, 1, &KMeansConfig::default(), &mut rng).unwrap();
    let mean_err = (0..4)
        .map(|d| {
            let m = points.iter().map(|p| f64::from(p[d])).sum::<f64>() / points.len() as f64;
            (one.centroid(0)[d] - m).abs()
        })
        .fold(0.0, f64::max);

    let sigma = 0.5;
    points.clear();
    let centers = [[8.0f32, 8.0, 0.0, 0.0], [-8.0f32, -8.0, 0.0, 0.0]];
    for c in &centers {
        for _ in 0..200 {
            points.push(
                c.iter()
                    .map(|&v| v + (rng.normal() * sigma) as f32)
                    .collect(),
            );
        }
    }
    let two = kmeans_fit(&points, 2, &KMeansConfig::default(), &mut rng).unwrap();
    let recovered = centers.iter().all(|c| {
        (0..2).any(|i| {
            let d: f64 = two
                .centroid(i)
                .iter()
                .zip(c)
                .map(|(x, &y)| (x - f64::from(y)).powi(2))
                .sum();
            d.sqrt() < 3.0 * sigma
        })
    });
    ensure(
        monotone && mean_err < KMEANS_MEAN_TOL && recovered,
        format!("monotone {monotone}, k=1 mean error {mean_err:.1e}, blobs recovered {recovered}"),
    )
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn directional(runs: &[Run]) -> Outcome {
    let reports: Vec<&Report> = runs.iter().map(|r| &r.out.evaluation.report).collect();
    let avg = |method: &str, split: &str, f: fn(&har_uq::metrics::ReportRow) -> f64| {
        mean(reports.iter().map(|r| f(r.row(method, split).unwrap())))
    };
    let red = |m: &str, s: &str| avg(m, s, |r| r.red_rate);
    let ua = |m: &str, s: &str| avg(m, s, |r| r.ua);

    let a = (
        red("reconstruction", "unseen_class"),
        red("reconstruction", "validation"),
    );
    let b = (
        red("distance", "unseen_dataset"),
        red("distance", "validation"),
    );
    let c = ["reconstruction", "distance", "mcdropout"].map(|m| ua(m, "unseen_class"));
    let best = ["reconstruction", "distance", "mcdropout"]
        .map(|m| ua(m, "unseen_dataset"))
        .into_iter()
        .fold(0.0, f64::max);
    let d = ua("cascade", "unseen_dataset");
    let e =
        ["reconstruction", "distance", "mcdropout", "cascade"].map(|m| (m, ua(m, "validation")));
    let slowest = runs.iter().map(|r| r.seconds).fold(0.0, f64::max);

    let checks = [
        (
            "a",
            a.0 >= SHIFT_FACTOR * a.1,
            format!("rec red {:.1}% vs val {:.1}%", 100.0 * a.0, 100.0 * a.1),
        ),
        (
            "b",
            b.0 >= SHIFT_FACTOR * b.1,
            format!("dist red {:.1}% vs val {:.1}%", 100.0 * b.0, 100.0 * b.1),
        ),
        (
            "c",
            c[2] < c[0] && c[2] < c[1],
            format!(
                "unseen_class UA rec {:.1} dist {:.1} mcd {:.1}",
                100.0 * c[0],
                100.0 * c[1],
                100.0 * c[2]
            ),
        ),
        (
            "d",
            d >= best - CASCADE_SLACK,
            format!("cascade {:.1} vs best {:.1}", 100.0 * d, 100.0 * best),
        ),
        (
            "e",
            e.iter().all(|(_, u)| *u >= MIN_VALIDATION_UA),
            format!(
                "validation UA {}",
                e.iter()
                    .map(|(m, u)| format!("{m} {:.1}", 100.0 * u))
                    .collect::<Vec<_>>()
                    .join(" ")
            ),
        ),
        (
            "runtime",
            slowest < PIPELINE_SECONDS,
            format!("slowest run {slowest:.0}s"),
        ),
    ];
    for (seed, run) in SEEDS.iter().zip(runs) {
        let r = &run.out.evaluation.report;
        let row = |m: &str, s: &str| r.row(m, s).unwrap().clone();
        println!(
            "    seed {seed}: rec red uc {:.1}% dist red ud {:.1}% mcd UA uc {:.1} cascade UA ud {:.1} ({:.0}s)",
            100.0 * row("reconstruction", "unseen_class").red_rate,
            100.0 * row("distance", "unseen_dataset").red_rate,
            100.0 * row("mcdropout", "unseen_class").ua,
            100.0 * row("cascade", "unseen_dataset").ua,
            run.seconds
        );
    }
    println!("    3-seed mean UA / red rate (%):");
    for split in pipeline::SPLITS {
        let cells: Vec<String> = ["reconstruction", "distance", "mcdropout", pipeline::CASCADE]
            .iter()
            .map(|m| {
                format!(
                    "{m} {:5.1}/{:5.1}",
                    100.0 * ua(m, split),
                    100.0 * red(m, split)
                )
            })
            .collect();
        println!("    {split:<15} {}", cells.join("  "));
    }
    let ok = checks.iter().all(|c| c.1);
    let detail = checks
        .iter()
        .map(|(n, pass, d)| format!("({n}) {} {d}", if *pass { "ok" } else { "FAIL" }))
        .collect::<Vec<_>>()
        .join("; ");
    ensure(ok, detail)
}

fn determinism(first: &Run) -> Outcome {
    let again = full_run(SEEDS[0]);
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    first.out.evaluation.report.write_csv(&p1).unwrap();
    again.out.evaluation.report.write_csv(&p2).unwrap();
    let same_report = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();
    let (c1, c2) = (
        first.out.bundle.checksum().unwrap(),
        again.out.bundle.checksum().unwrap(),
    );
    ensure(
        c1 == c2 && same_report,
        format!(
            "bundle {}.. vs {}.., report identical {same_report}",
            &c1[..12],
            &c2[..12]
        ),
    )
}

fn timing(run: &Run) -> Outcome {
    let system = System::from_bundle(&run.out.bundle).unwrap();
    let windows = pipeline::timing_windows(&run.cfg, TIMING_WINDOWS, 77).unwrap();
    let t = pipeline::timing_report(&system, &windows).unwrap();
    let fastest = t.distance < t.reconstruction && t.distance < t.mcdropout;
    ensure(
        fastest && t.total < CASCADE_SECONDS,
        format!(
            "{} windows: rec {:.2}s dist {:.3}s mcd {:.2}s, encode+cascade {:.2}s",
            t.n, t.reconstruction, t.distance, t.mcdropout, t.total
        ),
    )
}

fn round_trip(run: &Run) -> Outcome {
    let bundle = &run.out.bundle;
    let loaded = Bundle::from_bytes(&bundle.to_bytes().unwrap()).unwrap();
    let windows = pipeline::timing_windows(&run.cfg, ROUND_TRIP_WINDOWS, 78).unwrap();
    let verdicts = |b: &Bundle| {
        let s = System::from_bundle(b).unwrap();
        let z = s.latents(&windows).unwrap();
        s.cascade(&windows, &z, false).unwrap()
    };
    let (a, b) = (verdicts(bundle), verdicts(&loaded));
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(&b) {
        if x.final_flag != y.final_flag || x.stage_reached != y.stage_reached {
            return Err("flag differs after reload".into());
        }
        for (u, v) in x.verdicts.iter().zip(&y.verdicts) {
            if u.flag != v.flag {
                return Err(format!("{} flag differs after reload", u.detector));
            }
            worst = worst.max((u.score - v.score).abs());
        }
    }
    ensure(
        a.len() == ROUND_TRIP_WINDOWS && worst <= SCORE_TOL && loaded == *bundle,
        format!("{} windows, max score change {worst:.1e}", a.len()),
    )
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n:>2} {tag} {name} [{secs:.1}s]: {detail}");
    outcome.is_ok()
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut all = true;
    all &= report(1, "gradient suite", gradients);
    all &= report(2, "loss locality", locality);
    all &= report(4, "uncertainty accuracy oracle", ua_oracle);
    all &= report(5, "cascade equivalence", cascade_equivalence);
    all &= report(6, "k-means", kmeans);

    println!("training {} full pipelines...", SEEDS.len());
    let runs: Vec<Run> = SEEDS.iter().map(|&s| full_run(s)).collect();
    all &= report(3, "quantile closure", || closure(&runs));
    all &= report(7, "directional scenario trends (3-seed mean)", || {
        directional(&runs)
    });
    all &= report(8, "determinism", || determinism(&runs[0]));
    all &= report(9, "timing", || timing(&runs[0]));
    all &= report(10, "bundle round trip", || round_trip(&runs[0]));

    println!(
        "acceptance: {}",
        if all { "all criteria pass" } else { "FAILED" }
    );
    if !all {
        std::process::exit(1);
    }
}
