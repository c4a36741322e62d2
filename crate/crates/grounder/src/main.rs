//! Command-line surface: data generation, contrastive pretraining,
//! grounding training, evaluation, attention dumps, and the convergence /
//! ablation sweeps. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use grounder::checkpoint;
use grounder::config::{QueryStrategy, RunConfig};
use grounder::data;
use grounder::model::GroundingModel;
use grounder::params::Graph;
use grounder::train;

#[derive(Parser)]
#[command(name = "grounder", version, about = "Visual grounding on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every model-facing command; they override values from
/// the optional config file.
#[derive(Args, Clone, Default)]
struct ConfigFlags {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Decoder query source: referential|random-init|linguistic-embedding|zero.
    #[arg(long)]
    strategy: Option<String>,
    /// Adapter flow: both|image-only|text-only|none.
    #[arg(long)]
    direction: Option<String>,
    /// Comma-separated adapter insertion layers; empty string disables adapters.
    #[arg(long)]
    qa_layers: Option<String>,
    /// Comma-separated fusion layers.
    #[arg(long)]
    fusion_layers: Option<String>,
    /// Query count.
    #[arg(long)]
    nq: Option<usize>,
    /// Freeze the backbone after pretraining.
    #[arg(long)]
    freeze: Option<bool>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Contrastive pretraining steps (0 disables).
    #[arg(long)]
    pretrain_steps: Option<usize>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<RunConfig, String> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| format!("reading {path:?}: {e}"))?;
                RunConfig::parse(&text).map_err(|e| e.to_string())?
            }
            None => RunConfig::default(),
        };
        let mut set = |key: &str, value: String| -> Result<(), String> {
            cfg.apply(key, &value).map_err(|e| e.to_string())
        };
        if let Some(v) = &self.strategy {
            set("strategy", v.clone())?;
        }
        if let Some(v) = &self.direction {
            set("direction", v.clone())?;
        }
        if let Some(v) = &self.qa_layers {
            set("qa_layers", v.clone())?;
        }
        if let Some(v) = &self.fusion_layers {
            set("fusion_layers", v.clone())?;
        }
        if let Some(v) = self.nq {
            set("nq", v.to_string())?;
        }
        if let Some(v) = self.freeze {
            set("freeze", v.to_string())?;
        }
        if let Some(v) = self.epochs {
            set("epochs", v.to_string())?;
        }
        if let Some(v) = self.seed {
            set("seed", v.to_string())?;
        }
        if let Some(v) = self.pretrain_steps {
            set("pretrain_steps", v.to_string())?;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grounding dataset and print its content hash.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Store only per-sample seeds; samples regenerate on load.
        #[arg(long, default_value_t = false)]
        seeds_only: bool,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Contrastively pretrain the dual encoder and write a checkpoint.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Train the grounding model; writes per-epoch checkpoints, a CSV log
    /// and the effective config into --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Initialize from a checkpoint (skips inline pretraining).
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Evaluate a checkpoint; prints a JSON report to stdout.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Dump adapter and decoder attention maps for one sample as JSON.
    DumpAttn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Train every (strategy, seed) pair under one budget; emits the
    /// accuracy-vs-epoch CSV.
    Convergence {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated strategies.
        #[arg(long, default_value = "referential,random-init,linguistic-embedding")]
        strategies: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Run the adapter position and direction ablations; emits a CSV.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: ConfigFlags,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap help/version are success paths
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(RunError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(RunError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

enum RunError {
    Usage(String),
    Runtime(String),
}

fn usage(msg: impl ToString) -> RunError {
    RunError::Usage(msg.to_string())
}

fn runtime(msg: impl ToString) -> RunError {
    RunError::Runtime(msg.to_string())
}

fn load_dataset(path: &Path, cfg: &RunConfig) -> Result<Vec<data::GroundingSample>, RunError> {
    let f = fs::File::open(path).map_err(|e| runtime(format!("opening {path:?}: {e}")))?;
    data::read_dataset(
        &mut BufReader::new(f),
        &cfg.gen,
        cfg.model.image_size,
        cfg.model.max_text_len,
    )
    .map_err(runtime)
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::GenData { seed, count, out, seeds_only, flags } => {
            let mut cfg = flags.resolve().map_err(usage)?;
            cfg.gen.seed = seed;
            cfg.gen.count = count;
            let samples =
                data::generate_dataset(&cfg.gen, cfg.model.image_size, cfg.model.max_text_len)
                    .map_err(runtime)?;
            let mut buf = Vec::new();
            data::write_dataset(&mut buf, &samples, seeds_only).map_err(runtime)?;
            fs::write(&out, &buf).map_err(|e| runtime(format!("writing {out:?}: {e}")))?;
            let hash = Sha256::digest(&buf);
            println!("{}", hex_string(&hash));
            Ok(())
        }
        Command::Pretrain { data: data_path, checkpoint: ckpt, flags } => {
            let cfg = flags.resolve().map_err(usage)?;
            let samples = load_dataset(&data_path, &cfg)?;
            let mut model: GroundingModel<f32> = GroundingModel::new(cfg.model.clone());
            let losses = train::contrastive_pretrain(&mut model, &samples, &cfg.train);
            checkpoint::write_store(&model.store, &ckpt).map_err(runtime)?;
            let first = losses.first().copied().unwrap_or(0.0);
            let last = losses.last().copied().unwrap_or(0.0);
            println!("pretrained {} steps: loss {first:.4} -> {last:.4}", losses.len());
            Ok(())
        }
        Command::Train { data: data_path, out, backbone, flags } => {
            let mut cfg = flags.resolve().map_err(usage)?;
            let samples = load_dataset(&data_path, &cfg)?;
            fs::create_dir_all(&out).map_err(|e| runtime(format!("creating {out:?}: {e}")))?;
            let mut model: GroundingModel<f32> = GroundingModel::new(cfg.model.clone());
            if let Some(b) = &backbone {
                checkpoint::read_into_store(&mut model.store, b).map_err(runtime)?;
                cfg.train.pretrain_steps = 0;
            }
            fs::write(out.join("config.txt"), cfg.to_text())
                .map_err(|e| runtime(format!("writing config: {e}")))?;
            let out_dir = out.clone();
            let outcome = train::train(&mut model, &samples, &cfg.train, |m, epoch, _, _| {
                let path = out_dir.join(format!("epoch_{:03}.rfck", epoch + 1));
                if let Err(e) = checkpoint::write_store(&m.store, &path) {
                    eprintln!("warning: checkpoint {path:?} failed: {e}");
                }
            })
            .map_err(runtime)?;
            checkpoint::write_store(&model.store, &out.join("final.rfck")).map_err(runtime)?;
            write_train_log(&out.join("train_log.csv"), &outcome.log).map_err(runtime)?;
            let report = serde_json::to_string_pretty(&outcome.report).map_err(runtime)?;
            fs::write(out.join("report.json"), &report).map_err(runtime)?;
            println!(
                "trained {} epochs: prec@0.5 {:.4}{}",
                cfg.train.epochs,
                outcome.report.prec_at_05,
                outcome.report.miou.map(|m| format!(", mIoU {m:.4}")).unwrap_or_default()
            );
            Ok(())
        }
        Command::Eval { data: data_path, checkpoint: ckpt, flags } => {
            let cfg = flags.resolve().map_err(usage)?;
            let samples = load_dataset(&data_path, &cfg)?;
            let mut model: GroundingModel<f32> = GroundingModel::new(cfg.model.clone());
            checkpoint::read_into_store(&mut model.store, &ckpt).map_err(runtime)?;
            let report = train::evaluate(&model, &samples);
            println!("{}", serde_json::to_string_pretty(&report).map_err(runtime)?);
            Ok(())
        }
        Command::DumpAttn { data: data_path, checkpoint: ckpt, sample, out, flags } => {
            let cfg = flags.resolve().map_err(usage)?;
            let samples = load_dataset(&data_path, &cfg)?;
            if sample >= samples.len() {
                return Err(runtime(format!(
                    "sample index {sample} out of range for dataset of {}",
                    samples.len()
                )));
            }
            let mut model: GroundingModel<f32> = GroundingModel::new(cfg.model.clone());
            checkpoint::read_into_store(&mut model.store, &ckpt).map_err(runtime)?;
            let dump = attention_dump(&model, &samples[sample], sample);
            fs::write(&out, serde_json::to_string_pretty(&dump).map_err(runtime)?)
                .map_err(|e| runtime(format!("writing {out:?}: {e}")))?;
            println!("wrote attention maps for sample {sample} to {}", out.display());
            Ok(())
        }
        Command::Convergence { data: data_path, strategies, seeds, out, flags } => {
            let cfg = flags.resolve().map_err(usage)?;
            let samples = load_dataset(&data_path, &cfg)?;
            let strategies: Vec<QueryStrategy> = strategies
                .split(',')
                .map(|s| s.trim().parse::<QueryStrategy>())
                .collect::<Result<_, _>>()
                .map_err(usage)?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| s.trim().parse::<u64>().map_err(|e| e.to_string()))
                .collect::<Result<_, _>>()
                .map_err(usage)?;
            let outcome = train::convergence_experiment::<f32>(
                &cfg.model,
                &samples,
                &strategies,
                &seeds,
                &cfg.train,
            )
            .map_err(runtime)?;
            let mut w = BufWriter::new(
                fs::File::create(&out).map_err(|e| runtime(format!("creating {out:?}: {e}")))?,
            );
            writeln!(w, "strategy,seed,epoch,prec@0.5").map_err(runtime)?;
            for row in &outcome.rows {
                writeln!(w, "{},{},{},{}", row.strategy, row.seed, row.epoch, row.prec_at_05)
                    .map_err(runtime)?;
            }
            for (strategy, curve) in &outcome.median_curves {
                let final_prec = curve.last().copied().unwrap_or(0.0);
                println!("{strategy}: median final prec@0.5 {final_prec:.4}");
            }
            Ok(())
        }
        Command::Ablate { data: data_path, out, flags } => {
            let cfg = flags.resolve().map_err(usage)?;
            let samples = load_dataset(&data_path, &cfg)?;
            let rows = run_ablations(&cfg, &samples);
            let mut w = BufWriter::new(
                fs::File::create(&out).map_err(|e| runtime(format!("creating {out:?}: {e}")))?,
            );
            writeln!(w, "axis,configuration,prec@0.5,status").map_err(runtime)?;
            for (axis, name, prec, status) in &rows {
                writeln!(w, "{axis},{name},{prec},{status}").map_err(runtime)?;
                println!("{axis:<9} {name:<12} prec@0.5 {prec:.4} [{status}]");
            }
            if rows.iter().any(|(_, _, _, s)| s != "ok") {
                return Err(runtime("one or more ablation runs aborted"));
            }
            Ok(())
        }
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_train_log(path: &Path, log: &[train::LogRow]) -> std::io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "step,L_det,L_aux,L_focal,L_dice,total,lr")?;
    for r in log {
        writeln!(w, "{},{},{},{},{},{},{}", r.step, r.det, r.aux, r.focal, r.dice, r.total, r.lr)?;
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct AttnDump {
    sample: usize,
    expression: String,
    grid: usize,
    /// One entry per adapter insertion layer; rows renormalized over the
    /// patch grid (class column dropped).
    adapter_layers: Vec<AdapterDumpEntry>,
    decoder: Vec<Vec<f32>>,
}

#[derive(serde::Serialize)]
struct AdapterDumpEntry {
    layer: usize,
    queries_to_image: Vec<Vec<f32>>,
}

/// Row-renormalized patch-grid attention (class token dropped).
fn patch_grid_rows(map: &grounder::nn::AttnMap, grid: usize) -> Vec<Vec<f32>> {
    assert_eq!(map.cols, grid * grid + 1);
    (0..map.rows)
        .map(|r| {
            let row = &map.row(r)[1..];
            let total: f32 = row.iter().sum();
            let inv = if total > 0.0 { 1.0 / total } else { 0.0 };
            row.iter().map(|v| v * inv).collect()
        })
        .collect()
}

fn attention_dump(
    model: &GroundingModel<f32>,
    sample: &data::GroundingSample,
    index: usize,
) -> AttnDump {
    let mut g = Graph::traced(&model.store);
    let out = model.forward_sample(&mut g, sample);
    let grid = model.cfg.patches_per_side();
    AttnDump {
        sample: index,
        expression: sample.expression(),
        grid,
        adapter_layers: out
            .adapter_traces
            .iter()
            .map(|t| AdapterDumpEntry {
                layer: t.layer,
                queries_to_image: patch_grid_rows(&t.query_image_attn, grid),
            })
            .collect(),
        decoder: patch_grid_rows(&out.decoder_attn.expect("traced forward"), grid),
    }
}

/// Position and direction ablations at a fixed budget. Returns
/// (axis, configuration, final prec, status) rows; a NaN abort surfaces in
/// the status column instead of panicking.
fn run_ablations(
    cfg: &RunConfig,
    samples: &[data::GroundingSample],
) -> Vec<(String, String, f64, String)> {
    let all_even: Vec<usize> = (1..=cfg.model.layers).filter(|l| l % 2 == 0).collect();
    let position_axis: Vec<(String, Vec<usize>)> = vec![
        ("none".into(), vec![]),
        ("{4}".into(), vec![4]),
        ("{2,4,6}".into(), vec![2, 4, 6]),
        ("all-even".into(), all_even),
    ];
    let direction_axis = ["both", "image-only", "text-only"];
    let mut rows = Vec::new();
    for (name, layers) in &position_axis {
        let mut c = cfg.clone();
        c.model.adapter_layers = layers.clone();
        if layers.is_empty() {
            c.model.strategy = QueryStrategy::Zero;
        }
        rows.push(run_one_ablation("position", name, &c, samples));
    }
    for dir in direction_axis {
        let mut c = cfg.clone();
        c.model.direction = dir.parse().unwrap();
        rows.push(run_one_ablation("direction", dir, &c, samples));
    }
    rows
}

fn run_one_ablation(
    axis: &str,
    name: &str,
    cfg: &RunConfig,
    samples: &[data::GroundingSample],
) -> (String, String, f64, String) {
    let mut model: GroundingModel<f32> = GroundingModel::new(cfg.model.clone());
    match train::train(&mut model, samples, &cfg.train, |_, _, _, _| {}) {
        Ok(outcome) => (axis.into(), name.into(), outcome.report.prec_at_05, "ok".into()),
        Err(e) => (axis.into(), name.into(), f64::NAN, e.to_string()),
    }
}
