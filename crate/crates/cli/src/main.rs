//! `podnet` — train a toy anchor-box detector on synthetic shapes, compress
//! it with a POD projection, fine-tune, and report compression and timing.
//!
//! Commands communicate through files in a run directory:
//!   full.model / reduced.model            trained detectors
//!   full.history.json / reduced.history.json   loss + epoch-time traces
//!   eval_full.json / eval_reduced.json    mAP reports
//!   report.json, timing.json, report.csv  final summaries
//!
//! Exit codes: 0 success, 2 validation error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use podnet_core::config::RunConfig;
use podnet_core::data::{generate_shapes_dataset, load_dataset, save_dataset, Dataset, Split, DEFAULT_CLASSES};
use podnet_core::error::{Error, Result};
use podnet_core::eval::{detect_dataset, evaluate_map, write_detections_csv, EvalReport};
use podnet_core::model_io::{load_model, save_model, Model};
use podnet_core::net::FullDetectorSpec;
use podnet_core::pipeline::{build_reduced, finetune, train_baseline, TrainHistory};
use podnet_core::pod::RankPolicy;
use podnet_core::report::{
    build_report, load_report, save_json, write_report_csv, write_singular_values_csv,
};

#[derive(Parser)]
#[command(name = "podnet", version, about = "POD-compressed object detection pipeline")]
struct Cli {
    /// Master seed; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// JSON config with every pipeline constant (defaults apply otherwise).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset (train + test splits).
    GenData {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Train the full toy detector from scratch.
    TrainFull {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Build the reduced detector: split, snapshots, POD, fresh heads.
    Reduce {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        /// Cut-off layer index l.
        #[arg(long)]
        cut: Option<usize>,
        /// Fixed number of POD modes.
        #[arg(long, conflicts_with = "energy")]
        rank: Option<usize>,
        /// Energy threshold ε in (0,1] for rank selection.
        #[arg(long)]
        energy: Option<f64>,
    },
    /// Fine-tune the reduced detector (the reduction layer stays frozen).
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Also train the pre-model instead of keeping it frozen.
        #[arg(long)]
        unfreeze_pre: bool,
    },
    /// Evaluate a model file on a dataset split (mAP@IoU).
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Where to write the JSON report (default: eval_<kind>.json next to the model).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also export all detections as CSV.
        #[arg(long)]
        detections_csv: Option<PathBuf>,
    },
    /// Assemble report.json / timing.json / report.csv from a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// POD-basis utilities.
    Pod {
        #[command(subcommand)]
        command: PodCommand,
    },
    /// Fine-tune and evaluate one reduced detector per prior-scale candidate.
    ScaleSweep(SweepArgs),
    /// Fine-tune and evaluate one reduced detector per cut-off layer.
    CutSweep {
        #[command(flatten)]
        common: SweepCommon,
        /// Comma-separated cut indices (default: every valid l).
        #[arg(long)]
        cuts: Option<String>,
    },
}

#[derive(Subcommand)]
enum PodCommand {
    /// Dump singular values as CSV (index,sigma,cumulative_energy).
    Inspect {
        /// A reduced model file.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SweepCommon {
    #[arg(long)]
    data: PathBuf,
    /// Run directory holding full.model; sweep outputs land here too.
    #[arg(long)]
    run_dir: PathBuf,
    /// Fine-tuning epochs per sweep point (default: config finetune_epochs).
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: SweepCommon,
    /// JSON file with an array of prior-config candidates
    /// ({"scales_featmap": [...], "scales_global": [...], "aspect_ratios": [...]}).
    #[arg(long)]
    candidates: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn effective_config(cli_seed: Option<u64>, config_path: &Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = match config_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli_seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    load_dataset(dir, split)
}

fn history_path(run_dir: &Path, kind: &str) -> PathBuf {
    run_dir.join(format!("{kind}.history.json"))
}

fn save_history(history: &TrainHistory, run_dir: &Path, kind: &str) -> Result<()> {
    save_json(history, &history_path(run_dir, kind))
}

fn load_history(run_dir: &Path, kind: &str) -> Result<TrainHistory> {
    let path = history_path(run_dir, kind);
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: bad history: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(cli.seed, &cli.config)?;
    match cli.command {
        Command::GenData { out, n_train, n_test } => {
            let n_train = n_train.unwrap_or(cfg.n_train);
            let n_test = n_test.unwrap_or(cfg.n_test);
            let (train, test) = generate_shapes_dataset(n_train, n_test, &DEFAULT_CLASSES, cfg.seed)?;
            save_dataset(&train, &out)?;
            save_dataset(&test, &out)?;
            println!(
                "wrote {} train / {} test images to {}",
                train.len(),
                test.len(),
                out.display()
            );
            Ok(())
        }

        Command::TrainFull { data, run_dir, epochs } => {
            let mut cfg = cfg;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg.validate()?;
            std::fs::create_dir_all(&run_dir)?;
            let train = load_split(&data, Split::Train)?;
            let spec = FullDetectorSpec::toy(cfg.seed, cfg.priors.clone());
            let result = train_baseline(spec, &train, &cfg);
            let (full, history) = match result {
                Ok(ok) => ok,
                Err(e) => return Err(e), // diverged runs restore their checkpoint internally
            };
            save_model(&Model::Full(full), &run_dir.join("full.model"))?;
            save_history(&history, &run_dir, "full")?;
            cfg.save(&run_dir.join("config.json"))?;
            println!(
                "trained full detector: loss {:.4} → {:.4} over {} epochs",
                history.epoch_losses.first().unwrap_or(&f64::NAN),
                history.epoch_losses.last().unwrap_or(&f64::NAN),
                cfg.epochs
            );
            Ok(())
        }

        Command::Reduce { data, run_dir, cut, rank, energy } => {
            let train = load_split(&data, Split::Train)?;
            let model = load_model(&run_dir.join("full.model"))?;
            let full = model
                .as_full()
                .ok_or_else(|| Error::InvalidArgument("full.model is not a full detector".into()))?;
            let cut_index = cut.unwrap_or(cfg.cut_index);
            let policy = match (rank, energy) {
                (Some(r), _) => RankPolicy::FixedR { r },
                (None, Some(eps)) => RankPolicy::Energy { epsilon: eps },
                (None, None) => cfg.rank_policy,
            };
            let reduced = build_reduced(full, &train, cut_index, policy, &cfg)?;
            println!(
                "reduced detector: cut {} (x^(l) dim {}), rank {}, trainable params {} vs full {}",
                cut_index,
                reduced.reduction.snapshot_dim(),
                reduced.reduction.rank(),
                reduced.count_parameters(),
                full.count_parameters()
            );
            save_model(&Model::Reduced(reduced), &run_dir.join("reduced.model"))?;
            Ok(())
        }

        Command::Finetune { data, run_dir, epochs, unfreeze_pre } => {
            let mut cfg = cfg;
            if let Some(e) = epochs {
                cfg.finetune_epochs = e;
            }
            if unfreeze_pre {
                cfg.freeze_pre_model = false;
            }
            cfg.validate()?;
            let train = load_split(&data, Split::Train)?;
            let model = load_model(&run_dir.join("reduced.model"))?;
            let reduced = model.as_reduced().ok_or_else(|| {
                Error::InvalidArgument("reduced.model is not a reduced detector".into())
            })?;
            let history = finetune(reduced, &train, &cfg)?;
            save_model(&model, &run_dir.join("reduced.model"))?;
            save_history(&history, &run_dir, "reduced")?;
            println!(
                "fine-tuned reduced detector: loss {:.4} → {:.4} over {} epochs (pre-model {})",
                history.epoch_losses.first().unwrap_or(&f64::NAN),
                history.epoch_losses.last().unwrap_or(&f64::NAN),
                cfg.finetune_epochs,
                if cfg.freeze_pre_model { "frozen" } else { "trainable" }
            );
            Ok(())
        }

        Command::Eval { model, data, split, out, detections_csv } => {
            let split = match split.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown split '{other}' (use train or test)"
                    )))
                }
            };
            let dataset = load_split(&data, split)?;
            let loaded = load_model(&model)?;
            let report = eval_model(&loaded, &dataset, &cfg, detections_csv.as_deref())?;
            let out = out.unwrap_or_else(|| {
                model
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join(format!("eval_{}.json", loaded.kind_name()))
            });
            save_json(&report, &out)?;
            println!(
                "mAP@{:.2} = {:.4} over {} classes → {}",
                report.iou_threshold,
                report.mean_ap,
                report.evaluated_classes,
                out.display()
            );
            Ok(())
        }

        Command::Report { run_dir } => {
            let full = load_model(&run_dir.join("full.model"))?;
            let reduced = load_model(&run_dir.join("reduced.model"))?;
            let full_history = load_history(&run_dir, "full")?;
            let reduced_history = load_history(&run_dir, "reduced")?;
            let eval_full: EvalReport = read_json(&run_dir.join("eval_full.json"))?;
            let eval_reduced: EvalReport = read_json(&run_dir.join("eval_reduced.json"))?;
            let (report, timing) = build_report(
                full.count_parameters(),
                reduced.count_parameters(),
                eval_full,
                eval_reduced,
                &full_history,
                &reduced_history,
                cfg,
            )?;
            save_json(&report, &run_dir.join("report.json"))?;
            save_json(&timing, &run_dir.join("timing.json"))?;
            write_report_csv(&report, Some(&timing), &run_dir.join("report.csv"))?;
            println!(
                "compression {:.4} ({} / {}), mAP full {:.4} vs reduced {:.4}, epoch speedup {:.2}x",
                report.compression_ratio,
                report.params_reduced,
                report.params_full,
                report.map_full,
                report.map_reduced,
                timing.speedup_ratio
            );
            // consistency: stored reports must re-derive from the artifacts
            let reread = load_report(&run_dir.join("report.json"))?;
            if reread.params_full != report.params_full {
                return Err(Error::Format("report.json did not round-trip".into()));
            }
            Ok(())
        }

        Command::Pod { command: PodCommand::Inspect { model, out } } => {
            let loaded = load_model(&model)?;
            let reduced = loaded.as_reduced().ok_or_else(|| {
                Error::InvalidArgument("pod inspect expects a reduced model".into())
            })?;
            write_singular_values_csv(&reduced.reduction.singular_values, &out)?;
            println!(
                "wrote {} singular values to {}",
                reduced.reduction.singular_values.len(),
                out.display()
            );
            Ok(())
        }

        Command::ScaleSweep(args) => scale_sweep(args, cfg),
        Command::CutSweep { common, cuts } => cut_sweep(common, cuts, cfg),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn eval_model(
    model: &Model,
    dataset: &Dataset,
    cfg: &RunConfig,
    detections_csv: Option<&Path>,
) -> Result<EvalReport> {
    let detections = match model {
        Model::Full(m) => detect_dataset(m, dataset, cfg)?,
        Model::Reduced(m) => detect_dataset(m, dataset, cfg)?,
    };
    if let Some(csv) = detections_csv {
        write_detections_csv(csv, &detections, &dataset.class_names)?;
    }
    evaluate_map(&detections, dataset, cfg.eval_iou_threshold)
}

fn default_scale_candidates() -> Vec<podnet_core::boxes::PriorConfig> {
    use podnet_core::boxes::PriorConfig;
    vec![
        PriorConfig {
            scales_featmap: vec![0.1, 0.2],
            scales_global: vec![0.5, 0.8],
            aspect_ratios: vec![1.0, 2.0, 0.5],
        },
        PriorConfig::default(),
        PriorConfig {
            scales_featmap: vec![0.2, 0.4],
            scales_global: vec![0.7, 0.9],
            aspect_ratios: vec![1.0, 2.0, 0.5],
        },
        PriorConfig {
            scales_featmap: vec![0.15, 0.3],
            scales_global: vec![0.6, 0.85],
            aspect_ratios: vec![1.0],
        },
    ]
}

/// The scale-parameter analysis: each candidate prior configuration gets its
/// own reduced detector (heads rebuilt for its prior layout), a fine-tune,
/// and an evaluation row.
fn scale_sweep(args: SweepArgs, cfg: RunConfig) -> Result<()> {
    let SweepArgs { common, candidates } = args;
    let candidates = match candidates {
        Some(path) => read_json::<Vec<podnet_core::boxes::PriorConfig>>(&path)?,
        None => default_scale_candidates(),
    };
    let train = load_split(&common.data, Split::Train)?;
    let test = load_split(&common.data, Split::Test)?;
    let model = load_model(&common.run_dir.join("full.model"))?;
    let full = model
        .as_full()
        .ok_or_else(|| Error::InvalidArgument("full.model is not a full detector".into()))?;

    let mut cfg = cfg;
    if let Some(e) = common.epochs {
        cfg.finetune_epochs = e;
    }

    let out = common.run_dir.join("scale_sweep.csv");
    let mut rows = String::from("scales_featmap,scales_global,aspect_ratios,rank,map\n");
    for prior_config in candidates {
        prior_config.validate()?;
        let mut full_variant = full.clone();
        full_variant.prior_config = prior_config.clone();
        let reduced = build_reduced(&full_variant, &train, cfg.cut_index, cfg.rank_policy, &cfg)?;
        finetune(&reduced, &train, &cfg)?;
        let dets = detect_dataset(&reduced, &test, &cfg)?;
        let eval = evaluate_map(&dets, &test, cfg.eval_iou_threshold)?;
        let fmt = |v: &[f64]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
        };
        rows.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            fmt(&prior_config.scales_featmap),
            fmt(&prior_config.scales_global),
            fmt(&prior_config.aspect_ratios),
            reduced.reduction.rank(),
            eval.mean_ap
        ));
        println!(
            "scales featmap [{}] global [{}] → mAP {:.4}",
            fmt(&prior_config.scales_featmap),
            fmt(&prior_config.scales_global),
            eval.mean_ap
        );
    }
    std::fs::write(&out, rows)?;
    println!("sweep table → {}", out.display());
    Ok(())
}

/// Accuracy/compression trade-off across cut-off layers.
fn cut_sweep(common: SweepCommon, cuts: Option<String>, cfg: RunConfig) -> Result<()> {
    let train = load_split(&common.data, Split::Train)?;
    let test = load_split(&common.data, Split::Test)?;
    let model = load_model(&common.run_dir.join("full.model"))?;
    let full = model
        .as_full()
        .ok_or_else(|| Error::InvalidArgument("full.model is not a full detector".into()))?;

    let mut cfg = cfg;
    if let Some(e) = common.epochs {
        cfg.finetune_epochs = e;
    }

    let cut_list: Vec<usize> = match cuts {
        Some(text) => text
            .split(',')
            .map(|s| {
                s.trim().parse::<usize>().map_err(|_| {
                    Error::InvalidArgument(format!("bad cut index '{s}' in --cuts"))
                })
            })
            .collect::<Result<_>>()?,
        None => (1..full.basenet.len()).collect(),
    };

    let out = common.run_dir.join("cut_sweep.csv");
    let mut rows = String::from("cut_index,snapshot_dim,rank,trainable_params,compression_ratio,map\n");
    let full_params = full.count_parameters();
    for l in cut_list {
        let reduced = match build_reduced(full, &train, l, cfg.rank_policy, &cfg) {
            Ok(r) => r,
            Err(e) => {
                // a cut can make the fixed rank infeasible (r > min(n_l, N)); report and move on
                println!("cut {l}: skipped ({e})");
                continue;
            }
        };
        finetune(&reduced, &train, &cfg)?;
        let dets = detect_dataset(&reduced, &test, &cfg)?;
        let eval = evaluate_map(&dets, &test, cfg.eval_iou_threshold)?;
        let params = reduced.count_parameters();
        rows.push_str(&format!(
            "{l},{},{},{params},{:.6},{:.6}\n",
            reduced.reduction.snapshot_dim(),
            reduced.reduction.rank(),
            params as f64 / full_params as f64,
            eval.mean_ap
        ));
        println!(
            "cut {l}: x^(l) dim {}, params {params}, mAP {:.4}",
            reduced.reduction.snapshot_dim(),
            eval.mean_ap
        );
    }
    std::fs::write(&out, rows)?;
    println!("sweep table → {}", out.display());
    Ok(())
}
