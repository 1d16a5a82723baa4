//! `nann`: generate data, train the metric, build the graph index, search and
//! evaluate.
//!
//! Every subcommand reads the run configuration from `--config` (flat
//! `key = value` text) with `--seed` and repeated `--set key=value`
//! overrides applied on top, and writes its artifacts under `--out`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nann_core::data::{load_dataset, save_dataset, Dataset};
use nann_core::eval::{self, EvalReport, RunConfig, TrainingSummary};
use nann_core::index::GraphIndex;
use nann_core::metric::MetricModel;
use nann_core::search::{c_hipanns, ModelEval};
use nann_core::train::{fit, write_loss_log};
use nann_core::Error;

#[derive(Parser, Debug)]
#[command(name = "nann", version, about = "Graph retrieval with a learned relevance metric")]
struct Cli {
    /// Seed for every random stage (overrides the config file)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Flat key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Override one config key; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset to <out>/dataset.txt
    Gen,
    /// Train the metric; writes <out>/model.bin and <out>/loss.tsv
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Build the graph index over projected items; writes <out>/index.bin
    Build {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Retrieve the top items for one user and print them as JSON
    Search {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        user: usize,
    },
    /// Score retrieval against brute force; writes report.json and report.tsv
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Run the whole pipeline from the config; writes bench.json and bench.tsv
    Bench {
        /// Also run each single-flag ablation and write ablations.tsv
        #[arg(long)]
        ablations: bool,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train { .. } => "train",
            Command::Build { .. } => "build",
            Command::Search { .. } => "search",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
        }
    }
}

fn load_config(cli: &Cli) -> nann_core::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_text(&fs::read_to_string(path)?)?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(out: &Path, name: &str, contents: &str) -> nann_core::Result<PathBuf> {
    let path = out.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn load_inputs(data: &Path, model: &Path) -> nann_core::Result<(Dataset, MetricModel)> {
    Ok((load_dataset(data)?, MetricModel::load(model)?))
}

fn save_report(out: &Path, stem: &str, report: &EvalReport) -> nann_core::Result<()> {
    write(out, &format!("{stem}.json"), &report.to_json())?;
    write(out, &format!("{stem}.tsv"), &report.to_tsv())?;
    print!("{}", report.table());
    Ok(())
}

fn run(cli: &Cli) -> nann_core::Result<()> {
    let cfg = load_config(cli).map_err(|e| e.at_stage("config"))?;
    fs::create_dir_all(&cli.out)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Gen => {
            let ds = eval::generate(&cfg)?;
            let path = out.join("dataset.txt");
            save_dataset(&ds, &path)?;
            println!(
                "wrote {} ({} users, {} items, {} interactions)",
                path.display(),
                ds.users.len(),
                ds.items.len(),
                ds.interactions.len()
            );
        }
        Command::Train { data } => {
            let ds = load_dataset(data)?;
            let state = fit(&ds, &cfg.train_config())?;
            let mut log = Vec::new();
            write_loss_log(&state.history, &mut log)?;
            fs::write(out.join("loss.tsv"), log)?;
            let model = state.export_model();
            model.save(out.join("model.bin"))?;
            if cfg.quantize {
                model.quantize()?.save(out.join("model.fp16.bin"))?;
            }
            if let Some((first, last)) = state.smoothed_total(20) {
                println!("trained {} steps, loss {first:.4} -> {last:.4}", state.history.len());
            }
        }
        Command::Build { data, model } => {
            let (ds, model) = load_inputs(data, model)?;
            let emb = eval::embed(&model, &ds)?;
            let index = eval::build_index(&cfg.index_config(), &emb)?;
            index.save(out.join("index.bin"))?;
            println!("built index: layer sizes {:?}", index.layer_sizes());
        }
        Command::Search {
            data,
            model,
            index,
            user,
        } => {
            let (ds, model) = load_inputs(data, model)?;
            let index = GraphIndex::load(index)?;
            let emb = eval::embed(&model, &ds)?;
            let h_u = emb
                .users
                .get(*user)
                .ok_or_else(|| Error::InvalidArgument(format!("no user at position {user}")))?;
            let metric = ModelEval {
                model: &model,
                user: h_u,
                item_embeddings: &emb.items,
            };
            let result = c_hipanns(&index, &metric, &cfg.search_params())?;
            let doc = serde_json::json!({ "user": user, "items": result.items, "stats": result.stats });
            println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
        }
        Command::Eval { data, model, index } => {
            let (ds, model) = load_inputs(data, model)?;
            let index = index.as_ref().map(GraphIndex::load).transpose()?;
            let report = eval::evaluate(&cfg, &ds, &model, index.as_ref(), None::<TrainingSummary>)?;
            save_report(out, "report", &report)?;
        }
        Command::Bench { ablations } => {
            let report = eval::run_experiment(&cfg)?;
            save_report(out, "bench", &report)?;
            if *ablations {
                let mut rows = String::from("variant\tcoverage\trecall_at_10\trecall_at_100\titems_per_sec\tmean_hops_to_best\n");
                let variants: [(&str, fn(&mut RunConfig)); 5] = [
                    ("full", |_| {}),
                    ("no_scl", |c| c.no_scl = true),
                    ("no_multirel", |c| c.no_multirel = true),
                    ("no_parallel", |c| c.no_parallel = true),
                    ("no_batching", |c| c.no_batching = true),
                ];
                for (name, apply) in variants {
                    let mut v = cfg.clone();
                    apply(&mut v);
                    let r = if name == "full" { report.clone() } else { eval::run_experiment(&v)? };
                    let a = &r.aggregate;
                    rows.push_str(&format!(
                        "{name}\t{:.4}\t{:.4}\t{:.4}\t{:.0}\t{:.3}\n",
                        a.coverage, a.recall_at_10, a.recall_at_100, a.items_per_sec, a.mean_hops_to_best
                    ));
                }
                write(out, "ablations.tsv", &rows)?;
                print!("{rows}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let e = match e {
                Error::Stage { .. } => e,
                other => other.at_stage(cli.command.stage()),
            };
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
