//! Acceptance runner. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use lrp_core::data::{dataset_mean, Dataset};
use lrp_core::eval::{mode_for, prepare_dataset, score_dataset, PreparedSample};
use lrp_core::lrp::{Analyzer, CompositeConfig, FlatDepth, PoolOrder, Rule};
use lrp_core::metrics::{aggregate, baseline_scores};
use lrp_core::model::{load_model, Model};
use lrp_core::occlusion::occlusion_experiment;

const FIXTURE_IMAGES: usize = 2000;

fn fixture_model_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synth_cnn.json")
}

fn timed(limit: Duration, f: impl FnOnce() -> CheckResult) -> CheckResult {
    let start = Instant::now();
    let r = f();
    let took = start.elapsed();
    let r = r.map(|m| format!("{m}; {:.1}s", took.as_secs_f64()));
    if took > limit {
        return Err(format!(
            "took {:.1}s, limit {}s ({})",
            took.as_secs_f64(),
            limit.as_secs(),
            r.unwrap_or_else(|e| e)
        ));
    }
    r
}

struct Fixture {
    model: Model,
    samples: Vec<PreparedSample>,
    dir: tempfile::TempDir,
}

fn fixture() -> Result<Fixture, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = lrp_core::synth::write_dataset(dir.path(), 0, FIXTURE_IMAGES).map_err(|e| e.to_string())?;
    let model = load_model(fixture_model_path()).map_err(|e| e.to_string())?;
    let dataset = Dataset::load(&manifest).map_err(|e| e.to_string())?;
    let (samples, failed) = prepare_dataset(&model, &dataset, mode_for(&model, false));
    if !failed.is_empty() {
        return Err(format!("{} images failed to load", failed.len()));
    }
    Ok(Fixture { model, samples, dir })
}

fn ordering_study(fx: &Fixture) -> CheckResult {
    let configs = [
        ("uniform-z", CompositeConfig::uniform_z()),
        ("uniform-ab1", CompositeConfig::uniform(Rule::AlphaBeta { alpha: 1.0 }).unwrap()),
        ("cmp-a1", CompositeConfig::cmp(1.0, FlatDepth::Layers(0)).unwrap()),
        ("cmp-a1+flat1", CompositeConfig::cmp(1.0, FlatDepth::Layers(1)).unwrap()),
    ];
    let mut means = Vec::new();
    for (name, config) in &configs {
        let analyzer = Analyzer::new(&fx.model, config).map_err(|e| e.to_string())?;
        let (scores, failures) = score_dataset(&analyzer, &fx.samples, PoolOrder::default(), &Default::default());
        if !failures.is_empty() {
            return Err(format!("{name}: {} pairs failed", failures.len()));
        }
        let report = aggregate(&scores).map_err(|e| e.to_string())?;
        means.push((*name, report.mean_mu_w, report.mean_mu));
    }
    let base = aggregate(&baseline_scores(
        &fx.samples.iter().map(|s| s.annotated.clone()).collect::<Vec<_>>(),
    ))
    .map_err(|e| e.to_string())?;
    let table = means
        .iter()
        .map(|(n, w, m)| format!("{n} mu_w={w:.3} mu={m:.3}"))
        .chain([format!("baseline mu_w={:.3} mu={:.3}", base.mean_mu_w, base.mean_mu)])
        .collect::<Vec<_>>()
        .join(", ");
    let ab1 = means[1].1;
    let ordered = means[2].1 > ab1 && means[3].1 > ab1;
    let above_baseline = means.iter().all(|m| m.1 > 1.0) && base.mean_mu_w == 1.0;
    if ordered && above_baseline {
        Ok(table)
    } else {
        Err(table)
    }
}

fn occlusion_sanity(fx: &Fixture) -> CheckResult {
    let mean = dataset_mean(fx.samples.iter().map(|s| &s.pixels)).map_err(|e| e.to_string())?;
    let pairs: Vec<_> = fx.samples.iter().map(|s| (s.annotated.clone(), s.pixels.clone())).collect();
    let results = occlusion_experiment(&fx.model, &pairs, &mean).map_err(|e| e.to_string())?;
    let small: Vec<_> = results.iter().filter(|r| 4 * r.s_in <= r.s_tot).collect();
    if small.is_empty() {
        return Err("no boxes at or below 25% of the image".into());
    }
    let n = small.len() as f64;
    let obj = small.iter().map(|r| r.delta_f_object).sum::<f64>() / n;
    let ctx = small.iter().map(|r| r.delta_f_context).sum::<f64>() / n;
    let msg = format!("{} pairs, mean delta_f object {obj:.3} vs context {ctx:.3}", small.len());
    if obj < ctx {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn determinism(fx: &Fixture) -> CheckResult {
    let bin = env!("CARGO_BIN_EXE_lrp");
    let dataset = fx.dir.path().join("dataset.json");
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/cmp-a1-flat1.json");
    let run = |out: &Path, jobs: &str| -> Result<(), String> {
        let status = Command::new(bin)
            .args(["evaluate", "--model"])
            .arg(fixture_model_path())
            .arg("--dataset")
            .arg(&dataset)
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(out)
            .args(["--jobs", jobs])
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        Ok(())
    };
    let a = fx.dir.path().join("run_a");
    let b = fx.dir.path().join("run_b");
    run(&a, "1")?;
    run(&b, "4")?;
    let mut bytes = 0;
    for f in ["scores.csv", "summary.csv", "bins.csv"] {
        let x = std::fs::read(a.join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(f)).map_err(|e| e.to_string())?;
        if x != y {
            return Err(format!("{f} differs between runs"));
        }
        bytes += x.len();
    }
    Ok(format!("scores.csv, summary.csv, bins.csv identical across --jobs 1 and --jobs 4 ({bytes} bytes)"))
}

fn main() {
    let zero_bias = population(24, true, 100);
    let biased = population(24, false, 200);
    let mut results: Vec<(&str, CheckResult)> = vec![
        (
            "1 conservation",
            timed(Duration::from_secs(30), || check_conservation(&zero_bias, 10, 101)),
        ),
        (
            "2 gradient x input",
            timed(Duration::from_secs(60), || check_gradient_x_input(&zero_bias, &biased, 10, 102)),
        ),
        ("3 epsilon limit", check_epsilon_limit(&zero_bias, 10, 103)),
        ("4 flat rule", check_flat_rule(1000, 104)),
        (
            "5 metric oracle",
            timed(Duration::from_secs(10), || check_metric_oracle(1000, 105)),
        ),
    ];

    match fixture() {
        Ok(fx) => {
            results.push((
                "6 ordering study",
                timed(Duration::from_secs(600), || ordering_study(&fx)),
            ));
            results.push((
                "7 occlusion sanity",
                timed(Duration::from_secs(120), || occlusion_sanity(&fx)),
            ));
            results.push(("8 determinism", determinism(&fx)));
        }
        Err(e) => {
            for c in ["6 ordering study", "7 occlusion sanity", "8 determinism"] {
                results.push((c, Err(format!("fixture setup failed: {e}"))));
            }
        }
    }

    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(msg) => println!("PASS criterion {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name}: {msg}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
