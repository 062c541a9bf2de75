//! Two-stage expert training, dataset plumbing and prediction.
//!
//! Stage 1 trains the decoder against cached extractor features. Stage 2
//! starts from a stage-1 checkpoint, inserts adapters and trains decoder
//! and adapters jointly with fresh optimizer state.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{Config, DataConfig, TrainConfig};
use crate::data::{
    generate_synthetic_clip, read_clip_container, write_clip_container, ClipRecord, MapKind, MapVolume, VideoClip,
};
use crate::error::{Error, Result};
use crate::experts::{expert_loss_grads, loss_seeds, ExpertKind, ExpertModel, ExpertTargets};
use crate::graph::Graph;
use crate::losses::LossBreakdown;
use crate::metrics::{evaluate, MetricReport};
use crate::optim::{average_grads, AdamW};
use crate::params::{ParamGroup, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CLIP_EXTENSION: &str = "vsc";

/// Mixes a tag into a base seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Writes `n_clips` synthetic clips as `clip_XXXX.vsc`; returns their paths.
pub fn generate_dataset(dir: impl AsRef<Path>, cfg: &DataConfig) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    (0..cfg.n_clips)
        .map(|i| {
            let rec = generate_synthetic_clip(derive_seed(cfg.seed, i as u64), &cfg.clip)?;
            let path = dir.join(format!("clip_{i:04}.{CLIP_EXTENSION}"));
            write_clip_container(&rec, &path)?;
            Ok(path)
        })
        .collect()
}

/// Reads every clip container in `dir`, sorted by file name.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<ClipRecord>> {
    let mut paths: Vec<PathBuf> =
        fs::read_dir(dir.as_ref())?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == CLIP_EXTENSION));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no .{CLIP_EXTENSION} clips in {}", dir.as_ref().display())));
    }
    paths.iter().map(read_clip_container).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Seeded shuffle, then the first `ceil(n * val_fraction)` indices are held
/// out. The split depends only on `n`, the fraction and the seed, so both
/// experts see the same partition.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<Split> {
    let n_val = (n as f64 * val_fraction).ceil() as usize;
    if n_val >= n {
        return Err(Error::InvalidArgument(format!(
            "{n} clips leave nothing to train on with val_fraction {val_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5_1117)));
    let train = idx.split_off(n_val);
    Ok(Split { train, val: idx })
}

/// One optimizer step: the batch mean of the combined loss breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub stage: u8,
    pub expert: u8,
    pub kl: f64,
    pub cc: f64,
    pub sim: f64,
    pub bce: f64,
    pub total: f64,
}

/// Metrics after `epoch` epochs; epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total: Option<f64>,
    pub val: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub expert: u8,
    pub stage: u8,
    pub seed: u64,
    pub config: TrainConfig,
    pub train_clips: Vec<String>,
    pub val_clips: Vec<String>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub final_train: MetricReport,
    pub checkpoint: Option<PathBuf>,
}

fn mean_breakdown(parts: &[LossBreakdown]) -> [f64; 5] {
    let n = parts.len() as f64;
    let mut acc = [0.0; 5];
    for b in parts {
        for (a, v) in acc.iter_mut().zip([b.kl, b.cc, b.sim, b.bce, b.total]) {
            *a += v / n;
        }
    }
    acc
}

/// Checks the trainability matrix of `stage` on every parameter.
fn assert_trainability<T: Scalar>(model: &ExpertModel<T>, stage: u8) -> Result<()> {
    for (_, p) in model.store.iter() {
        let expected = match p.group {
            ParamGroup::Backbone => false,
            ParamGroup::Lora => stage == 2,
            ParamGroup::Decoder => true,
        };
        if p.trainable != expected {
            return Err(Error::State(format!(
                "parameter {:?} ({}) trainable={} in stage {stage}",
                p.name,
                p.group.as_str(),
                p.trainable
            )));
        }
    }
    if stage == 2 && model.store.group_count(ParamGroup::Lora) == 0 {
        return Err(Error::State("stage 2 without adapters".into()));
    }
    Ok(())
}

/// Inputs for one clip: cached features in stage 1, frames in stage 2.
enum Source<'a, T> {
    Features(&'a FeaturePyramid<T>),
    Frames(&'a VideoClip),
}

fn forward_nodes<T: Scalar>(
    model: &ExpertModel<T>,
    g: &mut Graph<T>,
    src: &Source<'_, T>,
) -> Result<crate::experts::ExpertNodes> {
    match src {
        Source::Features(f) => model.forward_features_graph(g, f),
        Source::Frames(c) => model.forward_graph(g, c),
    }
}

type ParamGrads<T> = Vec<(ParamId, Tensor<T>)>;
/// Train and validation features, in split order.
type FeatureCache<T> = (Vec<FeaturePyramid<T>>, Vec<FeaturePyramid<T>>);

/// Loss and parameter gradients of one clip.
fn clip_grads<T: Scalar>(
    model: &ExpertModel<T>,
    src: &Source<'_, T>,
    targets: &ExpertTargets<T>,
) -> Result<(LossBreakdown, ParamGrads<T>)> {
    let mut g = Graph::new();
    let nodes = forward_nodes(model, &mut g, src)?;
    let out = model.collect(&g, &nodes)?;
    let (loss, main_grad, aux_grads) = expert_loss_grads(&out, targets, &model.config.expert)?;
    let seeds = loss_seeds(&g, &nodes, main_grad, aux_grads)?;
    let grads = g.backward(seeds)?.param_grads(&g);
    Ok((loss.combined, grads))
}

fn saliency_of<T: Scalar>(model: &ExpertModel<T>, src: &Source<'_, T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let nodes = forward_nodes(model, &mut g, src)?;
    Ok(model.collect(&g, &nodes)?.main_logits.map(T::sigmoid))
}

fn evaluate_sources<T: Scalar>(
    model: &ExpertModel<T>,
    srcs: &[Source<'_, T>],
    records: &[&ClipRecord],
) -> Result<MetricReport> {
    let reports = srcs
        .iter()
        .zip(records)
        .map(|(s, r)| evaluate(&saliency_of(model, s)?, &r.target))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::aggregate(&reports).ok_or_else(|| Error::InvalidArgument("no clips to evaluate".into()))
}

/// Metrics of the model's saliency over `records`.
pub fn evaluate_model<T: Scalar>(model: &ExpertModel<T>, records: &[&ClipRecord]) -> Result<MetricReport> {
    let srcs: Vec<Source<'_, T>> = records.iter().map(|r| Source::Frames(&r.clip)).collect();
    evaluate_sources(model, &srcs, records)
}

/// Trains `model` in place for one stage on the train part of `data`.
///
/// The model must already be in the state the stage starts from: fresh for
/// stage 1, loaded from a stage-1 checkpoint for stage 2 (adapters are
/// inserted here). Each optimizer step is written to `log` as a JSON line.
pub fn train_expert<T: Scalar>(
    model: &mut ExpertModel<T>,
    cfg: &TrainConfig,
    data: &[ClipRecord],
    log: &mut dyn Write,
) -> Result<RunRecord> {
    cfg.validate()?;
    let stage = cfg.stage;
    let expert = model.kind.id();
    let split = split_indices(data.len(), cfg.val_fraction, cfg.seed)?;
    let train: Vec<&ClipRecord> = split.train.iter().map(|&i| &data[i]).collect();
    let val: Vec<&ClipRecord> = split.val.iter().map(|&i| &data[i]).collect();

    let lr = if stage == 1 {
        vec![(ParamGroup::Decoder, cfg.lr_decoder())]
    } else {
        if model.backbone.lora().is_none() {
            let seed = derive_seed(cfg.seed, 0x10_2a + expert as u64);
            model.backbone.insert_lora(&mut model.store, cfg.lora_rank, cfg.lora_alpha, seed)?;
        }
        vec![(ParamGroup::Decoder, cfg.lr_decoder()), (ParamGroup::Lora, cfg.lr_lora)]
    };
    model.backbone.set_stage(&mut model.store, stage)?;
    let mut opt = AdamW::<T>::new(cfg.optimizer.clone(), &lr)?;

    // Features of a frozen extractor never change, so stage 1 computes them once.
    let cached: Option<FeatureCache<T>> = if stage == 1 {
        let feats = |rs: &[&ClipRecord]| {
            rs.iter().map(|r| model.backbone.extract_features(&model.store, &r.clip)).collect::<Result<Vec<_>>>()
        };
        Some((feats(&train)?, feats(&val)?))
    } else {
        None
    };
    let source = |i: usize, is_val: bool| -> Source<'_, T> {
        match &cached {
            Some((tr, va)) => Source::Features(if is_val { &va[i] } else { &tr[i] }),
            None => Source::Frames(if is_val { &val[i].clip } else { &train[i].clip }),
        }
    };
    let targets: Vec<ExpertTargets<T>> = {
        let probe = match source(0, false) {
            Source::Features(f) => model.forward_features(f)?,
            Source::Frames(c) => model.forward(c)?,
        };
        train
            .iter()
            .map(|r| ExpertTargets::for_output(&r.target, &probe, model.config.expert.bce_target))
            .collect::<Result<_>>()?
    };

    let val_report = |m: &ExpertModel<T>| -> Result<Option<MetricReport>> {
        if val.is_empty() || !cfg.eval_every_epoch {
            return Ok(None);
        }
        let srcs: Vec<Source<'_, T>> = (0..val.len()).map(|i| source(i, true)).collect();
        evaluate_sources(m, &srcs, &val).map(Some)
    };

    let mut epochs = vec![EpochLog { epoch: 0, mean_total: None, val: val_report(model)? }];
    let mut steps = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, ((stage as u64) << 8) | expert as u64));
    let batch = cfg.batch_size();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(batch) {
            assert_trainability(model, stage)?;
            let step = steps.len() + 1;
            let mut parts = Vec::with_capacity(chunk.len());
            let mut per_clip = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (b, grads) = clip_grads(model, &source(i, false), &targets[i])?;
                parts.push(b);
                per_clip.push(grads);
            }
            let [kl, cc, sim, bce, total] = mean_breakdown(&parts);
            let entry = StepLog { step, stage, expert, kl, cc, sim, bce, total };
            if !total.is_finite() {
                return Err(Error::NonFinite { step, detail: serde_json::to_string(&entry)? });
            }
            serde_json::to_writer(&mut *log, &entry)?;
            log.write_all(b"\n")?;
            opt.step(&mut model.store, &average_grads(per_clip))?;
            epoch_total += total * chunk.len() as f64;
            steps.push(entry);
        }
        epochs.push(EpochLog { epoch, mean_total: Some(epoch_total / train.len() as f64), val: val_report(model)? });
    }
    assert_trainability(model, stage)?;

    let train_srcs: Vec<Source<'_, T>> = (0..train.len()).map(|i| source(i, false)).collect();
    let final_train = evaluate_sources(model, &train_srcs, &train)?;
    let ids = |rs: &[&ClipRecord]| rs.iter().map(|r| r.clip.clip_id.clone()).collect();
    Ok(RunRecord {
        expert,
        stage,
        seed: cfg.seed,
        config: cfg.clone(),
        train_clips: ids(&train),
        val_clips: ids(&val),
        steps,
        epochs,
        final_train,
        checkpoint: None,
    })
}

pub fn checkpoint_path(run_dir: impl AsRef<Path>, kind: ExpertKind, stage: u8) -> PathBuf {
    run_dir.as_ref().join(format!("expert{}_stage{stage}.ckpt", kind.id()))
}

/// Runs one stage of one expert under `run_dir`: stage 1 starts from a fresh
/// model, stage 2 from the stage-1 checkpoint written there earlier. Writes
/// the checkpoint, the JSON-lines step log and the run record.
pub fn run_stage(run_dir: impl AsRef<Path>, kind: ExpertKind, cfg: &Config, data: &[ClipRecord]) -> Result<RunRecord> {
    cfg.validate()?;
    let dir = run_dir.as_ref();
    fs::create_dir_all(dir)?;
    let stage = cfg.train.stage;
    let mut model = if stage == 1 {
        ExpertModel::<f32>::new(kind, cfg.model.clone(), derive_seed(cfg.train.seed, kind.id() as u64))?
    } else {
        let (m, saved) = load_checkpoint::<f32>(checkpoint_path(dir, kind, 1))?;
        if saved != 1 || m.kind != kind {
            return Err(Error::State(format!(
                "expected a stage-1 checkpoint of expert {kind}, found stage {saved} of expert {}",
                m.kind
            )));
        }
        m
    };
    let stem = format!("expert{}_stage{stage}", kind.id());
    let mut log = std::io::BufWriter::new(fs::File::create(dir.join(format!("{stem}.log.jsonl")))?);
    let mut record = train_expert(&mut model, &cfg.train, data, &mut log)?;
    log.flush()?;
    let ckpt = checkpoint_path(dir, kind, stage);
    save_checkpoint(&model, stage, &ckpt)?;
    record.checkpoint = Some(ckpt);
    fs::write(dir.join(format!("{stem}.run.json")), serde_json::to_vec_pretty(&record)?)?;
    Ok(record)
}

/// Main-path logits of one clip as a `(T, H, W)` map volume.
pub fn predict<T: Scalar>(model: &ExpertModel<T>, clip: &VideoClip) -> Result<MapVolume> {
    let logits = model.forward(clip)?.main_logits;
    Ok(MapVolume { values: logits.cast(), kind: MapKind::Logits, clip_id: clip.clip_id.clone() })
}
