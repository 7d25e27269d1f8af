//! Command-line front end: generate benchmarks, train, score detection
//! dumps, run ablation sweeps and render reports. Exits nonzero on any
//! error, including replay buffer audit violations.

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use codet::distill::DistillVariant;
use codet::evalkit::evaluate;
use codet::harness::{
    eval_config, read_detection_dump, read_runs_jsonl, report, run_ablation, run_experiment,
    sample_gts, AblationAxis, ExperimentConfig,
};
use codet::streamgen::{
    generate_benchmark, load_benchmark, serialize_benchmark, Benchmark, BenchmarkSpec, TrackMode,
};

#[derive(Parser)]
#[command(name = "codet", version, about = "continual object detection workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic benchmark into a directory.
    Gen {
        /// Benchmark spec JSON; defaults to the desk-scale spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Track for the default spec: category or instance.
        #[arg(long, default_value = "category")]
        track: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train over the experience stream described by an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a detection dump (CSV) against a benchmark's test set.
    Eval {
        /// Benchmark manifest path.
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        detections: PathBuf,
    },
    /// Cross-product ablation sweep over config axes and seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Axes: replay, pmd, nlcls, distill (all variants) or
        /// distill=a|b|c for a subset.
        #[arg(long, value_delimiter = ',')]
        axes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
    },
    /// Render the comparison table and plots from a runs.jsonl file.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_track(s: &str) -> Result<TrackMode> {
    match s {
        "category" => Ok(TrackMode::Category),
        "instance" => Ok(TrackMode::Instance),
        other => bail!("unknown track `{other}` (use category or instance)"),
    }
}

fn parse_axis(s: &str) -> Result<AblationAxis> {
    if let Some(rest) = s.strip_prefix("distill=") {
        let variants = rest
            .split('|')
            .map(|v| DistillVariant::from_str(v).map_err(anyhow::Error::msg))
            .collect::<Result<Vec<_>>>()?;
        if variants.is_empty() {
            bail!("distill axis needs at least one variant");
        }
        return Ok(AblationAxis::Distill(variants));
    }
    match s {
        "replay" => Ok(AblationAxis::Replay),
        "pmd" => Ok(AblationAxis::Pmd),
        "nlcls" => Ok(AblationAxis::NonLocalClassifier),
        "distill" => Ok(AblationAxis::Distill(vec![
            DistillVariant::None,
            DistillVariant::Feature,
            DistillVariant::Attention,
            DistillVariant::NonLocal,
            DistillVariant::Logit,
        ])),
        other => bail!("unknown ablation axis `{other}`"),
    }
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Gen { spec, out, track, seed } => {
            let spec = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str::<BenchmarkSpec>(&text)
                        .with_context(|| format!("parsing {}", path.display()))?
                }
                None => BenchmarkSpec::desk(parse_track(&track)?, seed),
            };
            let (train, test) = generate_benchmark(&spec)?;
            let benchmark = Benchmark { spec, train, test };
            let manifest = serialize_benchmark(&benchmark, &out)?;
            println!("wrote {}", manifest.display());
        }
        Cmd::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let record = run_experiment(&cfg)?;
            for (i, m) in record.per_experience_map.iter().enumerate() {
                println!("experience {}: mAP {m:.4}", i + 1);
            }
            println!("average mAP {:.4}", record.average_map);
            println!("record {}", cfg.output_dir.join("run.json").display());
        }
        Cmd::Eval { benchmark, detections } => {
            let bench = load_benchmark(&benchmark)?;
            let preds = read_detection_dump(&detections, &bench.test)?;
            let gts: Vec<_> = bench
                .test
                .iter()
                .map(|s| sample_gts(s, bench.spec.track_mode))
                .collect();
            let result = evaluate(&preds, &gts, &eval_config(bench.spec.track_mode))?;
            for (label, ap) in &result.per_label_ap {
                println!("label {label}: AP {ap:.4}");
            }
            println!("mAP {:.6}", result.map);
        }
        Cmd::Ablate { config, axes, seeds } => {
            let cfg = ExperimentConfig::load(&config)?;
            let axes = axes
                .iter()
                .map(|s| parse_axis(s))
                .collect::<Result<Vec<_>>>()?;
            let table = run_ablation(&cfg, &axes, &seeds)?;
            for row in &table.rows {
                println!(
                    "{}: {:.4} +/- {:.4}",
                    row.label, row.mean_average_map, row.stddev
                );
            }
            println!(
                "table {}",
                cfg.output_dir.join("ablation.csv").display()
            );
        }
        Cmd::Report { runs, out } => {
            let entries = read_runs_jsonl(&runs)?;
            let files = report(&entries, &out)?;
            println!("table {}", files.table.display());
            println!("map plot {}", files.map_plot.display());
            println!("loss plot {}", files.loss_plot.display());
        }
    }
    Ok(())
}
