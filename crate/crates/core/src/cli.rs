//! The `lrp` command line.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::attrfile::{read_attr, write_attr};
use crate::data::{preprocess, read_image, Annotation, Dataset, ImageSample};
use crate::eval::{match_channels, mode_for, prepare_dataset, score_dataset, PreparedSample};
use crate::lrp::{pool_channels_with, resolve_rules, Analyzer, CompositeConfig, PoolOrder};
use crate::metrics::{
    aggregate, baseline_scores, read_scores_csv, write_bins_csv, write_scores_csv, write_summary_csv,
    AnnotatedImage, LocalizationScore,
};
use crate::model::{load_model, Model};
use crate::numerics::Tensor;
use crate::occlusion::{binned_curves, occlusion_experiment, write_bins_csv as write_occ_bins, write_results_csv};
use crate::render::{colorize_with, montage, write_image, Normalization};

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Partial = 1,
    Usage = 2,
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

fn usage(message: impl std::fmt::Display) -> CliError {
    CliError {
        exit: Exit::Usage,
        message: message.to_string(),
    }
}

#[derive(Debug, Parser)]
#[command(name = "lrp", version, about = "Layer-wise relevance propagation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preprocess {
    Stretch,
    Crop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolOrderArg {
    SumThenPos,
    PosThenSum,
}

impl From<PoolOrderArg> for PoolOrder {
    fn from(a: PoolOrderArg) -> Self {
        match a {
            PoolOrderArg::SumThenPos => PoolOrder::SumThenPositive,
            PoolOrderArg::PosThenSum => PoolOrder::PositiveThenSum,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Explain one image for one class.
    Attribute {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "stretch")]
        preprocess: Preprocess,
        /// Render the input next to the heatmap.
        #[arg(long)]
        montage: bool,
    },
    /// Score attributions against ground-truth boxes for a whole dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
        config: Option<PathBuf>,
        /// Score the uniform-attribution baseline instead of a rule config.
        #[arg(long)]
        baseline: bool,
        #[arg(long, value_enum, default_value = "stretch")]
        preprocess: Preprocess,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = default_jobs(), value_parser = clap::value_parser!(u32).range(1..))]
        jobs: u32,
        #[arg(long, value_enum, default_value = "sum-then-pos")]
        pool_order: PoolOrderArg,
    },
    /// Object versus context occlusion study.
    Occlusion {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "stretch")]
        preprocess: Preprocess,
        #[arg(long, default_value_t = default_jobs(), value_parser = clap::value_parser!(u32).range(1..))]
        jobs: u32,
    },
    /// Render a stored attribution map.
    Render {
        #[arg(long)]
        attr: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Saturate at this percentile of |R| instead of the maximum.
        #[arg(long)]
        clip_percentile: Option<f64>,
        #[arg(long, value_enum, default_value = "sum-then-pos")]
        pool_order: PoolOrderArg,
    },
    /// Print the layer table, and the resolved rules when a config is given.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the synthetic textured-object dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        count: usize,
    },
}

fn default_jobs() -> u32 {
    std::thread::available_parallelism().map_or(1, |n| n.get() as u32)
}

pub fn run(cli: Cli) -> Result<Exit, CliError> {
    match cli.command {
        Command::Attribute {
            model,
            config,
            image,
            class,
            out,
            preprocess,
            montage,
        } => cmd_attribute(&model, &config, &image, &class, &out, preprocess, montage),
        Command::Evaluate {
            model,
            dataset,
            config,
            baseline: _,
            preprocess,
            out,
            jobs,
            pool_order,
        } => with_pool(jobs, || {
            cmd_evaluate(&model, &dataset, config.as_deref(), preprocess, &out, pool_order.into())
        }),
        Command::Occlusion {
            model,
            dataset,
            out,
            preprocess,
            jobs,
        } => with_pool(jobs, || cmd_occlusion(&model, &dataset, &out, preprocess)),
        Command::Render {
            attr,
            out,
            clip_percentile,
            pool_order,
        } => cmd_render(&attr, &out, clip_percentile, pool_order.into()),
        Command::Inspect { model, config } => cmd_inspect(&model, config.as_deref()),
        Command::Synth { out, seed, count } => {
            let manifest = crate::synth::write_dataset(&out, seed, count).map_err(usage)?;
            println!("wrote {count} images, manifest {}", manifest.display());
            Ok(Exit::Ok)
        }
    }
}

fn with_pool(jobs: u32, f: impl FnOnce() -> Result<Exit, CliError> + Send) -> Result<Exit, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs as usize)
        .build()
        .map_err(usage)?;
    pool.install(f)
}

fn open_model(path: &Path) -> Result<Model, CliError> {
    load_model(path).map_err(|e| usage(format!("cannot load model {}: {e}", path.display())))
}

fn open_config(path: &Path) -> Result<CompositeConfig, CliError> {
    CompositeConfig::from_file(path).map_err(|e| usage(format!("bad config {}: {e}", path.display())))
}

fn open_dataset(path: &Path) -> Result<Dataset, CliError> {
    Dataset::load(path).map_err(|e| usage(format!("cannot load dataset {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))
}

fn class_index(model: &Model, class: &str) -> Result<usize, CliError> {
    model.class_index(class).ok_or_else(|| {
        usage(format!(
            "unknown class `{class}`; valid labels: {}",
            model.class_labels().join(", ")
        ))
    })
}

fn cmd_attribute(
    model_path: &Path,
    config_path: &Path,
    image_path: &Path,
    class: &str,
    out: &Path,
    mode: Preprocess,
    with_montage: bool,
) -> Result<Exit, CliError> {
    let model = open_model(model_path)?;
    let config = open_config(config_path)?;
    let idx = class_index(&model, class)?;
    let pixels = read_image(image_path).map_err(usage)?;
    let sample = ImageSample::new("input", pixels);
    let empty = Annotation {
        image_id: "input".into(),
        filename: None,
        boxes: vec![],
    };
    let (x, _) = preprocess(&sample, &empty, mode_for(&model, mode == Preprocess::Crop)).map_err(usage)?;
    let x = match_channels(x, model.input_shape()[0]).map_err(usage)?;
    let analyzer = Analyzer::new(&model, &config).map_err(usage)?;
    let map = analyzer.attribute(&x, idx).map_err(usage)?;

    create_dir(out)?;
    let stem = image_path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    let attr_path = out.join(format!("{stem}_{class}.attr"));
    write_attr(&attr_path, &map).map_err(usage)?;
    let heat = colorize_with(
        &pool_channels_with(&map.relevance, PoolOrder::default()),
        Normalization::MaxAbs,
    );
    let png = out.join(format!("{stem}_{class}.png"));
    let picture = if with_montage { montage(&x, &heat).map_err(usage)? } else { heat };
    write_image(&picture, &png).map_err(usage)?;
    println!("class {class} (index {idx})");
    println!("logit {}", map.output_logit);
    println!("relevance sum {}", map.relevance.sum());
    println!("digest {}", map.config_digest);
    println!("wrote {} and {}", attr_path.display(), png.display());
    Ok(Exit::Ok)
}

fn analyzer_name(config: Option<&Path>) -> String {
    config
        .and_then(|p| p.file_stem())
        .map_or("baseline".into(), |s| s.to_string_lossy().into_owned())
}

fn annotated(samples: &[PreparedSample]) -> Vec<AnnotatedImage> {
    samples.iter().map(|s| s.annotated.clone()).collect()
}

fn cmd_evaluate(
    model_path: &Path,
    dataset_path: &Path,
    config_path: Option<&Path>,
    mode: Preprocess,
    out: &Path,
    order: PoolOrder,
) -> Result<Exit, CliError> {
    let model = open_model(model_path)?;
    let config = config_path.map(open_config).transpose()?;
    let analyzer = config
        .as_ref()
        .map(|c| Analyzer::new(&model, c))
        .transpose()
        .map_err(usage)?;
    let dataset = open_dataset(dataset_path)?;
    if dataset.items.is_empty() {
        return Err(usage(format!("dataset {} has no annotated images", dataset_path.display())));
    }
    create_dir(out)?;

    let (samples, load_failures) = prepare_dataset(&model, &dataset, mode_for(&model, mode == Preprocess::Crop));
    let mut failed = load_failures.len();
    for (id, e) in &load_failures {
        log::error!("{id}: {e}");
    }

    let scores_path = out.join("scores.csv");
    let mut scores: Vec<LocalizationScore> = if scores_path.exists() {
        let prior = read_scores_csv(&scores_path).map_err(usage)?;
        log::info!("resuming: {} pairs already scored", prior.len());
        prior
    } else {
        Vec::new()
    };
    let done: BTreeSet<(String, String)> = scores
        .iter()
        .map(|s| (s.image_id.clone(), s.class_label.clone()))
        .collect();

    match &analyzer {
        Some(a) => {
            let (new, failures) = score_dataset(a, &samples, order, &done);
            for (id, class, e) in &failures {
                log::error!("{id}/{class}: {e}");
            }
            failed += failures.len();
            scores.extend(new);
        }
        None => scores.extend(
            baseline_scores(&annotated(&samples))
                .into_iter()
                .filter(|s| !done.contains(&(s.image_id.clone(), s.class_label.clone()))),
        ),
    }
    scores.sort_by(|a, b| (&a.image_id, &a.class_label).cmp(&(&b.image_id, &b.class_label)));
    write_scores_csv(&scores_path, &scores).map_err(usage)?;
    if scores.is_empty() {
        return Err(CliError {
            exit: Exit::Partial,
            message: "no pair could be scored".into(),
        });
    }

    let report = aggregate(&scores).map_err(usage)?;
    let name = analyzer_name(config_path);
    let base_images = annotated(&samples);
    let base = aggregate(&baseline_scores(&base_images)).map_err(usage)?;
    let rows: Vec<(&str, &_)> = if analyzer.is_some() {
        vec![(name.as_str(), &report), ("Baseline", &base)]
    } else {
        vec![("Baseline", &report)]
    };
    write_summary_csv(&out.join("summary.csv"), &rows).map_err(usage)?;
    write_bins_csv(&out.join("bins.csv"), &report).map_err(usage)?;

    println!(
        "{name}: {} pairs, mean mu_w {:.4}, mean mu {:.4}",
        report.n_scores, report.mean_mu_w, report.mean_mu
    );
    if failed > 0 {
        eprintln!("{failed} items failed; see log");
        return Ok(Exit::Partial);
    }
    Ok(Exit::Ok)
}

fn cmd_occlusion(model_path: &Path, dataset_path: &Path, out: &Path, mode: Preprocess) -> Result<Exit, CliError> {
    let model = open_model(model_path)?;
    let dataset = open_dataset(dataset_path)?;
    let (samples, load_failures) = prepare_dataset(&model, &dataset, mode_for(&model, mode == Preprocess::Crop));
    for (id, e) in &load_failures {
        log::error!("{id}: {e}");
    }
    let samples: Vec<_> = samples.into_iter().filter(|s| !s.annotated.boxes.is_empty()).collect();
    if samples.is_empty() {
        return Err(usage(format!("dataset {} has no annotated boxes", dataset_path.display())));
    }
    let mean = crate::data::dataset_mean(samples.iter().map(|s| &s.pixels)).map_err(usage)?;
    let pairs: Vec<(AnnotatedImage, Tensor)> = samples.into_iter().map(|s| (s.annotated, s.pixels)).collect();
    let results = occlusion_experiment(&model, &pairs, &mean).map_err(usage)?;
    let mut results = results;
    results.sort_by(|a, b| (&a.image_id, &a.class_label).cmp(&(&b.image_id, &b.class_label)));
    create_dir(out)?;
    write_results_csv(&out.join("occlusion.csv"), &results).map_err(usage)?;
    write_occ_bins(&out.join("occlusion_bins.csv"), &binned_curves(&results)).map_err(usage)?;
    let n = results.len() as f64;
    println!(
        "{} pairs, mean delta_f object {:.4}, context {:.4}",
        results.len(),
        results.iter().map(|r| r.delta_f_object).sum::<f64>() / n,
        results.iter().map(|r| r.delta_f_context).sum::<f64>() / n
    );
    if !load_failures.is_empty() {
        return Ok(Exit::Partial);
    }
    Ok(Exit::Ok)
}

fn cmd_render(attr: &Path, out: &Path, clip: Option<f64>, order: PoolOrder) -> Result<Exit, CliError> {
    let map = read_attr(attr).map_err(usage)?;
    if map.relevance.rank() != 3 {
        return Err(usage(format!(
            "attribution map has shape {:?}, expected (C, H, W)",
            map.relevance.shape()
        )));
    }
    let norm = match clip {
        Some(p) if (0.0..=100.0).contains(&p) => Normalization::Percentile(p),
        Some(p) => return Err(usage(format!("--clip-percentile must be in [0, 100], got {p}"))),
        None => Normalization::MaxAbs,
    };
    let rgb = colorize_with(&pool_channels_with(&map.relevance, order), norm);
    write_image(&rgb, out).map_err(usage)?;
    Ok(Exit::Ok)
}

fn cmd_inspect(model_path: &Path, config: Option<&Path>) -> Result<Exit, CliError> {
    let model = open_model(model_path)?;
    let rules = config
        .map(|p| open_config(p).and_then(|c| resolve_rules(&model, &c).map_err(usage)))
        .transpose()?;
    let mut s = String::new();
    writeln!(s, "input {:?}, {} parameters, checksum {:08x}", model.input_shape(), model.parameter_count(), model.checksum()).unwrap();
    writeln!(s, "classes: {}", model.class_labels().join(", ")).unwrap();
    writeln!(s, "{:>3}  {:<10} {:<14} {:<14} {:>8}  rule", "#", "type", "input", "output", "params").unwrap();
    for (i, layer) in model.layers().iter().enumerate() {
        let rule = rules.as_ref().map_or(String::new(), |r| r.rules()[i].to_string());
        writeln!(
            s,
            "{i:>3}  {:<10} {:<14} {:<14} {:>8}  {rule}",
            layer.kind().name(),
            format!("{:?}", model.shape_at(i)),
            format!("{:?}", model.shape_at(i + 1)),
            layer.parameter_count()
        )
        .unwrap();
    }
    print!("{s}");
    Ok(Exit::Ok)
}
