use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use salience::checkpoint::load_checkpoint;
use salience::config::Config;
use salience::data::{read_map_container, write_map_container, write_pgm, ClipRecord, MapKind, MapVolume};
use salience::ensemble::{fuse_many, parse_weights, FusionMode};
use salience::experts::ExpertKind;
use salience::metrics::{evaluate, MetricReport};
use salience::train::{generate_dataset, load_dataset, predict, run_stage, split_indices, RunRecord};
use serde::Serialize;

const MAP_EXTENSION: &str = "vsm";

#[derive(Parser)]
#[command(name = "salience", version, about = "Multi-expert video saliency prediction")]
struct Cli {
    /// JSON config; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic clip dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_clips: Option<usize>,
    },
    /// Train one expert for one stage.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        expert: u8,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write main-path logits for every selected clip.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Fuse two prediction directories into saliency maps.
    Fuse {
        #[arg(long, num_args = 2, required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<FusionMode>,
        /// Comma-separated fusion weights, e.g. 0.5,0.5.
        #[arg(long)]
        weights: Option<String>,
        /// Also write every fused frame as an 8-bit PGM.
        #[arg(long)]
        pgm: bool,
    },
    /// Score predictions against targets; one JSON line per clip, then the aggregate.
    Eval {
        /// A map container or a directory of them.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Summarize the run records in a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => Config::default(),
    };
    Ok(cfg)
}

fn map_files(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("listing {}", path.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == MAP_EXTENSION));
    files.sort();
    if files.is_empty() {
        bail!("no .{MAP_EXTENSION} maps in {}", path.display());
    }
    Ok(files)
}

fn select(data: Vec<ClipRecord>, split: SplitArg, cfg: &Config) -> anyhow::Result<Vec<ClipRecord>> {
    let idx = match split {
        SplitArg::All => return Ok(data),
        SplitArg::Train => split_indices(data.len(), cfg.train.val_fraction, cfg.train.seed)?.train,
        SplitArg::Val => split_indices(data.len(), cfg.train.val_fraction, cfg.train.seed)?.val,
    };
    let mut keep: Vec<Option<ClipRecord>> = data.into_iter().map(Some).collect();
    Ok(idx.iter().filter_map(|&i| keep[i].take()).collect())
}

#[derive(Serialize)]
struct EvalRow<'a> {
    clip_id: &'a str,
    #[serde(flatten)]
    report: MetricReport,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData { out, n_clips } => {
            if let Some(s) = cli.seed {
                cfg.data.seed = s;
            }
            if let Some(n) = n_clips {
                cfg.data.n_clips = n;
            }
            let paths = generate_dataset(&out, &cfg.data)?;
            eprintln!("wrote {} clips to {}", paths.len(), out.display());
        }
        Command::Train { data, out, expert, stage, epochs } => {
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            cfg.train.stage = stage;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let clips = load_dataset(&data)?;
            let rec = run_stage(&out, ExpertKind::from_id(expert)?, &cfg, &clips)?;
            let last = rec.epochs.last().and_then(|e| e.mean_total);
            eprintln!(
                "expert {expert} stage {stage}: {} steps, final loss {:?}, train CC {:.4}",
                rec.steps.len(),
                last,
                rec.final_train.cc
            );
        }
        Command::Predict { checkpoint, data, out, split } => {
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            let (model, _) = load_checkpoint::<f32>(&checkpoint)?;
            fs::create_dir_all(&out)?;
            for rec in select(load_dataset(&data)?, split, &cfg)? {
                let map = predict(&model, &rec.clip)?;
                write_map_container(&map, out.join(format!("{}.{MAP_EXTENSION}", rec.clip.clip_id)))?;
            }
        }
        Command::Fuse { inputs, out, mode, weights, pgm } => {
            if let Some(m) = mode {
                cfg.fusion.mode = m;
            }
            if let Some(w) = weights {
                cfg.fusion.weights = parse_weights(&w)?;
            }
            cfg.fusion.validate()?;
            fs::create_dir_all(&out)?;
            for a in map_files(&inputs[0])? {
                let name = a.file_name().context("map without a file name")?;
                let b = inputs[1].join(name);
                let (ma, mb) = (read_map_container(&a)?, read_map_container(&b)?);
                if ma.kind != MapKind::Logits || mb.kind != MapKind::Logits {
                    bail!("fusion expects logit maps: {} / {}", a.display(), b.display());
                }
                if ma.clip_id != mb.clip_id {
                    bail!("clip ids differ: {:?} vs {:?}", ma.clip_id, mb.clip_id);
                }
                let fused = MapVolume {
                    values: fuse_many(&[&ma.values, &mb.values], &cfg.fusion)?,
                    kind: MapKind::Saliency,
                    clip_id: ma.clip_id.clone(),
                };
                write_map_container(&fused, out.join(name))?;
                if pgm {
                    let (t, h, w) = fused.dims();
                    for f in 0..t {
                        let frame = &fused.values.data()[f * h * w..(f + 1) * h * w];
                        write_pgm(frame, h, w, out.join(format!("{}_{f:03}.pgm", fused.clip_id)))?;
                    }
                }
            }
        }
        Command::Eval { pred, data } => {
            let targets: BTreeMap<String, ClipRecord> =
                load_dataset(&data)?.into_iter().map(|r| (r.clip.clip_id.clone(), r)).collect();
            let mut reports = Vec::new();
            for path in map_files(&pred)? {
                let map = read_map_container(&path)?;
                let rec = targets
                    .get(&map.clip_id)
                    .with_context(|| format!("no target clip {:?} in {}", map.clip_id, data.display()))?;
                let report = evaluate(&map.saliency(), &rec.target)?;
                println!("{}", serde_json::to_string(&EvalRow { clip_id: &map.clip_id, report })?);
                reports.push(report);
            }
            let agg = MetricReport::aggregate(&reports).context("nothing to evaluate")?;
            println!("{}", serde_json::to_string(&EvalRow { clip_id: "aggregate", report: agg })?);
        }
        Command::Report { run } => {
            let mut files: Vec<PathBuf> = fs::read_dir(&run)
                .with_context(|| format!("listing {}", run.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.retain(|p| p.to_string_lossy().ends_with(".run.json"));
            files.sort();
            if files.is_empty() {
                bail!("no run records in {}", run.display());
            }
            for f in files {
                let rec: RunRecord = serde_json::from_slice(&fs::read(&f)?)?;
                let val = rec.epochs.last().and_then(|e| e.val);
                let row = serde_json::json!({
                    "expert": rec.expert,
                    "stage": rec.stage,
                    "seed": rec.seed,
                    "steps": rec.steps.len(),
                    "final_total": rec.steps.last().map(|s| s.total),
                    "train": rec.final_train,
                    "val": val,
                });
                println!("{row}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
