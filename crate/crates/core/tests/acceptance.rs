//! Acceptance suite: one PASS/FAIL line per criterion, each with its runtime
//! bound. Exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salience::backbone::TapConfig;
use salience::blocks::{norm_groups, CenterBias, Film, ResBlend3d};
use salience::checkpoint::load_checkpoint;
use salience::config::Config;
use salience::data::{
    decode_clip, decode_map, encode_clip, encode_map, generate_synthetic_clip, normalize_to_distribution, ClipRecord,
    MapKind, MapVolume, SaliencyTarget, SynthSpec, VideoClip, MAP_MAGIC,
};
use salience::ensemble::{fuse, FusionConfig, FusionMode};
use salience::experts::{
    expert_loss_grads, loss_seeds, Decoder, ExpertConfig, ExpertKind, ExpertModel, ExpertTargets, ModelConfig,
};
use salience::gradcheck::{finite_difference_check, sample_entries};
use salience::graph::Graph;
use salience::losses::{bce_loss, cc_loss, composite_loss, kl_loss, sim_loss, BceTarget, LossTarget, LossWeights};
use salience::metrics::{evaluate, metric_auc_judd, metric_cc, metric_nss, MetricReport};
use salience::params::{ParamGroup, ParamId, ParamStore};
use salience::train::{generate_dataset, load_dataset, predict, run_stage, split_indices, train_expert};
use salience::Tensor;

type Outcome = Result<(), String>;
/// Name, runtime limit and body of one criterion.
type Criterion = (&'static str, Duration, fn() -> Outcome);

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T>(r: salience::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- helpers

/// Random clip below the synthetic generator's minimum size.
fn random_record(t: usize, hw: usize, seed: u64) -> ClipRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = Tensor::from_fn(&[t, 3, hw, hw], |_| rng.random_range(0.0f32..1.0));
    let plane = hw * hw;
    let mut density = Vec::new();
    let mut fix = vec![0u8; t * plane];
    for ti in 0..t {
        let raw: Vec<f32> = (0..plane).map(|_| rng.random_range(0.05f32..1.0)).collect();
        density.extend(normalize_to_distribution(&raw));
        fix[ti * plane + rng.random_range(0..plane)] = 1;
    }
    ClipRecord::new(
        VideoClip::new(frames, "random", 25.0).unwrap(),
        SaliencyTarget::new(Tensor::from_vec(&[t, hw, hw], density).unwrap(), fix).unwrap(),
        seed,
    )
    .unwrap()
}

fn tiny_model_config(hw: usize, patch: usize) -> ModelConfig {
    ModelConfig {
        backbone: TapConfig { depth: 4, tap_layers: vec![0, 1, 2, 3], patch, channels: 8, cls_dim: 6 },
        expert: ExpertConfig { c_d: 4, head_channels: 4, ..ExpertConfig::default() },
        height: hw,
        width: hw,
        backbone_seed: 0,
    }
}

fn small_run_config() -> Config {
    let mut c = Config::default();
    c.data.n_clips = 6;
    c.data.clip = SynthSpec::new(3, 16, 16, 1);
    c.model = tiny_model_config(16, 8);
    c.train.epochs = 2;
    c.train.val_fraction = 0.2;
    c
}

fn small_dataset(c: &Config) -> Vec<ClipRecord> {
    (0..c.data.n_clips as u64).map(|i| generate_synthetic_clip(i + 100, &c.data.clip).unwrap()).collect()
}

/// Judd AUC by brute force: one ROC point per distinct fixated value,
/// counting every pixel at or above it.
fn auc_oracle(pred: &[f64], fix: &[u8]) -> f64 {
    let f = fix.iter().filter(|&&v| v > 0).count() as f64;
    let n = pred.len() as f64 - f;
    let mut th: Vec<f64> = pred.iter().zip(fix).filter(|(_, &x)| x > 0).map(|(&p, _)| p).collect();
    th.sort_by(|a, b| b.total_cmp(a));
    th.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for &t in &th {
        let tp = pred.iter().zip(fix).filter(|(&p, &x)| x > 0 && p >= t).count() as f64;
        let fp = pred.iter().zip(fix).filter(|(&p, &x)| x == 0 && p >= t).count() as f64;
        pts.push((fp / n, tp / f));
    }
    pts.push((1.0, 1.0));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

// --------------------------------------------------------------- criteria

fn identity_at_init() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let film = ok(Film::new(&mut store, "film", 6, 8, &mut rng))?;
    let blend = ok(ResBlend3d::new(&mut store, "blend", 8, &mut rng))?;
    let center = ok(CenterBias::new(&mut store, "center", 32, 32))?;
    check!(norm_groups(8) > 1, "blend norm has a single group");

    let x = Tensor::from_fn(&[8, 3, 4, 4], |_| rng.random_range(-3.0..3.0));
    let cls = Tensor::from_fn(&[6], |_| rng.random_range(-3.0..3.0));
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let cn = g.input(cls);
    let f = ok(film.forward(&mut g, &store, xn, cn))?;
    let b = ok(blend.forward(&mut g, &store, xn))?;
    let d_film = max_diff(g.value(f).data(), x.data());
    let d_blend = max_diff(g.value(b).data(), x.data());
    check!(d_film < 1e-6, "FiLM deviates from identity by {d_film:e}");
    check!(d_blend < 1e-6, "ResBlend3d deviates from identity by {d_blend:e}");

    let z = g.input(Tensor::zeros(&[1, 3, 32, 32]));
    let zc = ok(center.forward(&mut g, &store, z))?;
    let out = g.value(zc).data().to_vec();
    for t in 0..3 {
        let frame = &out[t * 1024..(t + 1) * 1024];
        let arg = (0..1024).max_by(|&i, &j| frame[i].total_cmp(&frame[j])).unwrap();
        let (y, x) = (arg / 32, arg % 32);
        check!((15..=16).contains(&y) && (15..=16).contains(&x), "center-bias argmax at ({y}, {x})");
    }

    let rec = generate_synthetic_clip(3, &SynthSpec::new(4, 32, 32, 2)).unwrap();
    let m = ok(ExpertModel::<f64>::new(ExpertKind::One, ModelConfig::default(), 7))?;
    let logits = ok(m.forward(&rec.clip))?.main_logits;
    let Decoder::One(e) = &m.decoder else {
        return Err("expert 1 has the wrong decoder".into());
    };
    let prior = m.store.value(e.center.map).data();
    for t in 0..4 {
        let d = max_diff(logits.slice_outer(t), prior);
        check!(d < 1e-6, "expert 1 frame {t} differs from the center prior by {d:e}");
    }
    Ok(())
}

fn lora_and_freeze() -> Outcome {
    let rec = generate_synthetic_clip(5, &SynthSpec::new(4, 32, 32, 1)).unwrap();
    let mut m = ok(ExpertModel::<f32>::new(ExpertKind::Two, ModelConfig::default(), 1))?;
    let before = ok(m.backbone.extract_features(&m.store, &rec.clip))?;
    ok(m.backbone.insert_lora(&mut m.store, 4, 8.0, 2))?;
    let after = ok(m.backbone.extract_features(&m.store, &rec.clip))?;
    let mut worst = after.cls.max_abs_diff(&before.cls);
    for (a, b) in after.levels.iter().zip(&before.levels) {
        worst = worst.max(a.max_abs_diff(b));
    }
    check!(worst < 1e-6, "features move by {worst:e} when adapters are inserted");

    let mut c = small_run_config();
    let data = small_dataset(&c);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for kind in [ExpertKind::One, ExpertKind::Two] {
        let fresh = ok(ExpertModel::<f32>::new(kind, c.model.clone(), 0))?;
        let base = fresh.store.snapshot(ParamGroup::Backbone);
        c.train.stage = 1;
        ok(run_stage(dir.path(), kind, &c, &data))?;
        let (s1, _) = ok(load_checkpoint::<f32>(dir.path().join(format!("expert{}_stage1.ckpt", kind.id()))))?;
        check!(s1.store.snapshot(ParamGroup::Backbone) == base, "expert {kind}: stage 1 touched the extractor");
        c.train.stage = 2;
        let rec = ok(run_stage(dir.path(), kind, &c, &data))?;
        let (s2, _) = ok(load_checkpoint::<f32>(rec.checkpoint.unwrap()))?;
        check!(s2.store.snapshot(ParamGroup::Backbone) == base, "expert {kind}: stage 2 touched the extractor");
        let lora = s2.store.snapshot(ParamGroup::Lora);
        check!(
            lora.iter().any(|(n, v)| n.ends_with(".lora_b") && v.data().iter().any(|&x| x != 0.0)),
            "expert {kind}: stage 2 left every adapter at zero"
        );
    }
    Ok(())
}

fn loss_values() -> Outcome {
    let kl = ok(kl_loss(&[0.25f64, 0.75], &[0.5, 0.5]))?;
    let sim = ok(sim_loss(&[0.5f64, 0.5], &[0.25, 0.75]))?;
    let cc = ok(cc_loss(&[1.0f64, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 5.0]))?;
    let bce_half = ok(bce_loss(&[0.5f64, 0.5], &[0.0, 1.0]))?;
    let bce = ok(bce_loss(&[0.9f64, 0.1], &[1.0, 0.0]))?;
    for (name, got, want) in [
        ("KL", kl, 0.14384),
        ("SIM", sim, 0.25),
        ("CC", cc, 0.01730),
        ("BCE(0.5)", bce_half, std::f64::consts::LN_2),
        ("BCE(0.9)", bce, 0.10536),
    ] {
        check!((got - want).abs() < 1e-5, "{name} loss {got} != {want}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = LossWeights::default();
    for _ in 0..20 {
        let rec = random_record(2, 5, rng.random());
        let target = LossTarget::<f64>::new(&rec.target, BceTarget::ScaledDensity);
        let logits = Tensor::from_fn(&[2, 5, 5], |_| rng.random_range(-3.0..3.0));
        let b = ok(composite_loss(&logits, &target, &w))?;
        let expect = 10.0 * b.kl + 2.0 * b.cc + b.sim + b.bce;
        check!(b.total == expect, "composite total {} != {}", b.total, expect);
    }
    Ok(())
}

fn expert_gradient_error(kind: ExpertKind) -> Result<(usize, f64), String> {
    let rec = random_record(2, 4, 8);
    let mut m = ok(ExpertModel::<f64>::new(kind, tiny_model_config(4, 2), 5))?;
    ok(m.backbone.insert_lora(&mut m.store, 2, 4.0, 1))?;
    ok(m.backbone.set_stage(&mut m.store, 2))?;
    // move off the zero-initialized identity so every path carries gradient
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ids: Vec<ParamId> = m.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for &id in &ids {
        for v in m.store.value_mut(id).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let cfg = m.config.expert.clone();
    let mut g = Graph::new();
    let nodes = ok(m.forward_graph(&mut g, &rec.clip))?;
    let out = ok(m.collect(&g, &nodes))?;
    let targets = ok(ExpertTargets::for_output(&rec.target, &out, cfg.bce_target))?;
    let (_, gm, ga) = ok(expert_loss_grads(&out, &targets, &cfg))?;
    let seeds = ok(loss_seeds(&g, &nodes, gm, ga))?;
    let grads = ok(g.backward(seeds))?.param_grads(&g);
    let picks = sample_entries(&m.store, &ids, 40, &mut rng);
    let probe = m.clone();
    let rep = ok(finite_difference_check(&mut m.store, &grads, &picks, 1e-6, 1e-6, |s| {
        let mut p = probe.clone();
        p.store = s.clone();
        Ok(expert_loss_grads(&p.forward(&rec.clip)?, &targets, &cfg)?.0.combined.total)
    }))?;
    Ok((rep.checked, rep.max_rel_err))
}

fn gradient_fidelity() -> Outcome {
    for kind in [ExpertKind::One, ExpertKind::Two] {
        let (n, err) = expert_gradient_error(kind)?;
        check!(n >= 32, "expert {kind}: only {n} parameters checked");
        check!(err < 1e-4, "expert {kind}: max relative error {err:e}");
    }
    Ok(())
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for i in 0..200 {
        let pred: Vec<f64> = if i % 2 == 0 {
            (0..64).map(|_| rng.random()).collect()
        } else {
            (0..64).map(|_| f64::from(rng.random_range(0..6u8)) / 5.0).collect()
        };
        let mut fix = vec![0u8; 64];
        for _ in 0..rng.random_range(1..=10) {
            fix[rng.random_range(0..64)] = 1;
        }
        let got = ok(metric_auc_judd(&pred, &fix))?;
        let want = auc_oracle(&pred, &fix);
        check!((got - want).abs() < 1e-9, "instance {i}: AUC {got} vs oracle {want}");
    }
    let nss = ok(metric_nss(&[0.0f64, 0.0, 0.0, 1.0], &[0, 0, 0, 1]))?;
    check!((nss - 3f64.sqrt()).abs() < 1e-9, "NSS example {nss}");
    for i in 0..100 {
        let pred: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let gt: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut fix = vec![0u8; 64];
        for _ in 0..rng.random_range(1..=10) {
            fix[rng.random_range(0..64)] = 1;
        }
        let (a, b) = (rng.random_range(0.1..5.0), rng.random_range(-3.0..3.0));
        let affine: Vec<f64> = pred.iter().map(|v| a * v + b).collect();
        let monotone: Vec<f64> = pred.iter().map(|v| (3.0 * v).exp() + v).collect();
        let d_auc = (ok(metric_auc_judd(&pred, &fix))? - ok(metric_auc_judd(&monotone, &fix))?).abs();
        let d_nss = (ok(metric_nss(&pred, &fix))? - ok(metric_nss(&affine, &fix))?).abs();
        let d_cc = (ok(metric_cc(&pred, &gt))? - ok(metric_cc(&affine, &gt))?).abs();
        check!(d_auc < 1e-9, "map {i}: AUC changes by {d_auc:e} under a monotone transform");
        check!(d_nss < 1e-9, "map {i}: NSS changes by {d_nss:e} under an affine transform");
        check!(d_cc < 1e-9, "map {i}: CC changes by {d_cc:e} under an affine transform");
    }
    Ok(())
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = Config::default();
    cfg.data.n_clips = 64;
    ok(generate_dataset(dir.path().join("data"), &cfg.data))?;
    let data = ok(load_dataset(dir.path().join("data")))?;
    let run = dir.path().join("run");
    let train_one = |kind: ExpertKind| -> salience::Result<MetricReport> {
        let mut c = cfg.clone();
        c.train.stage = 1;
        let s1 = run_stage(&run, kind, &c, &data)?;
        c.train.stage = 2;
        let s2 = run_stage(&run, kind, &c, &data)?;
        eprintln!(
            "    expert {kind}: train CC {:.4} after stage 1, {:.4} after stage 2",
            s1.final_train.cc, s2.final_train.cc
        );
        Ok(s2.final_train)
    };
    // the experts share nothing, so they train concurrently
    let (r1, r2) = std::thread::scope(|s| {
        let h1 = s.spawn(|| train_one(ExpertKind::One));
        let h2 = s.spawn(|| train_one(ExpertKind::Two));
        (h1.join(), h2.join())
    });
    let reports =
        [ok(r1.map_err(|_| "expert 1 panicked".to_string())?)?, ok(r2.map_err(|_| "expert 2 panicked".to_string())?)?];
    for (k, r) in reports.iter().enumerate() {
        check!(r.cc > 0.95, "expert {}: final train CC {:.4}", k + 1, r.cc);
    }

    let split = ok(split_indices(data.len(), cfg.train.val_fraction, cfg.train.seed))?;
    let models = [
        ok(load_checkpoint::<f32>(run.join("expert1_stage2.ckpt")))?.0,
        ok(load_checkpoint::<f32>(run.join("expert2_stage2.ckpt")))?.0,
    ];
    let fusion = FusionConfig::default();
    let (mut singles, mut fused) = ([Vec::new(), Vec::new()], Vec::new());
    for &i in &split.val {
        let rec = &data[i];
        let maps = [ok(predict(&models[0], &rec.clip))?, ok(predict(&models[1], &rec.clip))?];
        for (k, m) in maps.iter().enumerate() {
            singles[k].push(ok(evaluate(&m.saliency(), &rec.target))?);
        }
        let f = ok(fuse(&maps[0].values, &maps[1].values, &fusion))?;
        fused.push(ok(evaluate(&f, &rec.target))?);
    }
    let agg = |r: &[MetricReport]| MetricReport::aggregate(r).expect("non-empty split").scores();
    let (a, b, f) = (agg(&singles[0]), agg(&singles[1]), agg(&fused));
    let wins = (0..4).filter(|&k| f[k] >= a[k].max(b[k])).count();
    eprintln!("    val [cc, sim, auc_judd, nss]: expert 1 {a:.4?}, expert 2 {b:.4?}, fused {f:.4?}");
    if wins < 2 {
        eprintln!("    WARN fused prediction leads on only {wins} of 4 metrics");
    } else {
        eprintln!("    fused prediction leads on {wins} of 4 metrics");
    }
    Ok(())
}

fn fusion_contracts() -> Outcome {
    let scalar = |v: f64| Tensor::from_vec(&[1, 1, 1], vec![v]).unwrap();
    let half = |mode| FusionConfig { mode, weights: vec![0.5, 0.5] };
    let logit = ok(fuse(&scalar(0.0), &scalar(2.0), &half(FusionMode::Logit)))?.data()[0];
    let sal = ok(fuse(&scalar(0.0), &scalar(2.0), &half(FusionMode::Saliency)))?.data()[0];
    check!((logit - 0.73106).abs() < 1e-5, "logit fusion {logit}");
    check!((sal - 0.69040).abs() < 1e-5, "saliency fusion {sal}");

    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..200 {
        let w = rng.random_range(0.0..=1.0);
        let mode = if rng.random() { FusionMode::Logit } else { FusionMode::Saliency };
        let cfg = FusionConfig { mode, weights: vec![w, 1.0 - w] };
        let z1 = Tensor::from_fn(&[2, 3, 3], |_| rng.random_range(-8.0..8.0));
        let z2 = Tensor::from_fn(&[2, 3, 3], |_| rng.random_range(-8.0..8.0));
        let same = ok(fuse(&z1, &z1, &cfg))?;
        check!(max_diff(same.data(), z1.map(sig).data()) < 1e-5, "fixed point fails in {mode} mode");
        let out = ok(fuse(&z1, &z2, &cfg))?;
        for ((&o, &a), &b) in out.data().iter().zip(z1.data()).zip(z2.data()) {
            let (lo, hi) = (sig(a).min(sig(b)), sig(a).max(sig(b)));
            check!(o >= lo - 1e-5 && o <= hi + 1e-5, "{o} outside [{lo}, {hi}] in {mode} mode");
        }
    }
    Ok(())
}

fn determinism_and_formats() -> Outcome {
    let c = small_run_config();
    let data = small_dataset(&c);
    let mut logs = Vec::new();
    for _ in 0..2 {
        let mut m = ok(ExpertModel::<f32>::new(ExpertKind::Two, c.model.clone(), 3))?;
        let mut buf = Vec::new();
        ok(train_expert(&mut m, &c.train, &data, &mut buf))?;
        logs.push(buf);
    }
    check!(!logs[0].is_empty() && logs[0] == logs[1], "loss logs differ between identical runs");

    let rec = generate_synthetic_clip(9, &SynthSpec::default()).unwrap();
    let bytes = ok(encode_clip(&rec))?;
    let back = ok(decode_clip(&bytes))?;
    check!(back == rec && ok(encode_clip(&back))? == bytes, "clip container round trip is not exact");
    let m = ok(ExpertModel::<f32>::new(ExpertKind::One, ModelConfig::default(), 0))?;
    let map = ok(predict(&m, &rec.clip))?;
    check!(map.dims() == (20, 32, 32), "logit volume is {:?}", map.dims());
    let mbytes = ok(encode_map(&map))?;
    let mback = ok(decode_map(&mbytes))?;
    check!(mback == map && mback.kind == MapKind::Logits, "logit container round trip is not exact");

    let code = |r: salience::Result<ClipRecord>| r.map(|_| ()).err().map(|e| e.code());
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    check!(code(decode_clip(&bad)) == Some("bad_magic"), "corrupt magic gives {:?}", code(decode_clip(&bad)));
    let short = &bytes[..bytes.len() - 1];
    check!(code(decode_clip(short)) == Some("truncated_payload"), "short payload gives {:?}", code(decode_clip(short)));
    let frame = |header: &str, payload: &[u8]| {
        let mut b = MAP_MAGIC.to_vec();
        b.extend_from_slice(&(header.len() as u32).to_le_bytes());
        b.extend_from_slice(header.as_bytes());
        b.extend_from_slice(payload);
        b
    };
    let garbled = frame("{\"T\":", &[]);
    let degenerate = frame(r#"{"T":0,"H":32,"W":32,"kind":"logits","clip_id":"x","dtype":"f32le"}"#, &[]);
    let mcode = |b: &[u8]| decode_map(b).map(|_: MapVolume| ()).err().map(|e| e.code());
    check!(mcode(&garbled) == Some("bad_header"), "garbled header gives {:?}", mcode(&garbled));
    check!(mcode(&degenerate) == Some("header_mismatch"), "degenerate shape gives {:?}", mcode(&degenerate));
    Ok(())
}

// ----------------------------------------------------------------- driver

fn main() {
    let criteria: [Criterion; 8] = [
        ("identity at init", Duration::from_secs(5), identity_at_init),
        ("adapter no-op and extractor freeze", Duration::from_secs(30), lora_and_freeze),
        ("loss values", Duration::from_secs(1), loss_values),
        ("gradient fidelity", Duration::from_secs(120), gradient_fidelity),
        ("metric oracle equivalence", Duration::from_secs(30), metric_oracles),
        ("end-to-end overfit", Duration::from_secs(20 * 60), end_to_end),
        ("fusion contracts", Duration::from_secs(5), fusion_contracts),
        ("determinism and formats", Duration::from_secs(30), determinism_and_formats),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let outcome =
            outcome.and_then(
                |()| {
                    if took <= limit {
                        Ok(())
                    } else {
                        Err(format!("took {took:.1?}, limit {limit:?}"))
                    }
                },
            );
        match outcome {
            Ok(()) => println!("criterion {n} ({name}): PASS in {took:.2?}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL in {took:.2?}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
