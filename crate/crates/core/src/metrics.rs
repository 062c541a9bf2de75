//! Saliency evaluation metrics: CC, SIM, NSS and AUC-Judd.
//!
//! All metrics take a saliency map (any real scores, higher = more salient)
//! and are averaged over frames by [`evaluate`].

use serde::{Deserialize, Serialize};

use crate::data::{normalize_to_distribution, SaliencyTarget};
use crate::error::{Error, Result};
use crate::losses::{pearson, EPS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cc: f64,
    pub sim: f64,
    pub auc_judd: f64,
    pub nss: f64,
    pub n_frames: usize,
}

impl MetricReport {
    /// Frame-weighted mean of several reports.
    pub fn aggregate(reports: &[MetricReport]) -> Option<MetricReport> {
        let n: usize = reports.iter().map(|r| r.n_frames).sum();
        if n == 0 {
            return None;
        }
        let avg =
            |f: fn(&MetricReport) -> f64| reports.iter().map(|r| f(r) * r.n_frames as f64).sum::<f64>() / n as f64;
        Some(MetricReport {
            cc: avg(|r| r.cc),
            sim: avg(|r| r.sim),
            auc_judd: avg(|r| r.auc_judd),
            nss: avg(|r| r.nss),
            n_frames: n,
        })
    }

    /// The four scores in `[cc, sim, auc_judd, nss]` order.
    pub fn scores(&self) -> [f64; 4] {
        [self.cc, self.sim, self.auc_judd, self.nss]
    }
}

fn same_len<A, B>(a: &[A], b: &[B]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "metric inputs must be equal-length and non-empty ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn fixation_count(fix: &[u8]) -> Result<usize> {
    let f = fix.iter().filter(|&&v| v != 0).count();
    if f == 0 {
        return Err(Error::InvalidArgument("map has no fixations".into()));
    }
    Ok(f)
}

/// Pearson correlation; 0 when either map is constant.
pub fn metric_cc<T: Scalar>(pred: &[T], gt: &[T]) -> Result<T> {
    same_len(pred, gt)?;
    Ok(pearson(pred, gt))
}

/// Histogram intersection of the two maps after normalization.
pub fn metric_sim<T: Scalar>(pred: &[T], gt: &[T]) -> Result<T> {
    same_len(pred, gt)?;
    let p = normalize_to_distribution(pred);
    let q = normalize_to_distribution(gt);
    Ok(p.iter().zip(&q).map(|(&a, &b)| a.min(b)).sum())
}

/// Mean z-scored prediction at fixated pixels; 0 for a constant map.
pub fn metric_nss<T: Scalar>(pred: &[T], fix: &[u8]) -> Result<T> {
    same_len(pred, fix)?;
    let f = fixation_count(fix)?;
    let n = T::from_usize_lossy(pred.len());
    let mean = pred.iter().copied().sum::<T>() / n;
    let var = pred.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let std = var.sqrt();
    if std <= T::lit(EPS) || std.is_nan() {
        return Ok(T::zero());
    }
    let hit: T = pred.iter().zip(fix).filter(|(_, &g)| g != 0).map(|(&v, _)| (v - mean) / std).sum();
    Ok(hit / T::from_usize_lossy(f))
}

/// Judd ROC area: one point per distinct fixated value `t` (descending),
/// counting pixels with `pred >= t`, closed by `(0,0)` and `(1,1)`.
pub fn metric_auc_judd<T: Scalar>(pred: &[T], fix: &[u8]) -> Result<T> {
    same_len(pred, fix)?;
    let f = fixation_count(fix)?;
    let n = pred.len();
    if f == n {
        return Err(Error::InvalidArgument("AUC-Judd needs at least one non-fixated pixel".into()));
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("prediction has non-finite values".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pred[b].partial_cmp(&pred[a]).expect("finite"));

    let (nf, nn) = (T::from_usize_lossy(f), T::from_usize_lossy(n - f));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_x, mut prev_y) = (T::zero(), T::zero());
    let mut area = T::zero();
    let mut i = 0;
    while i < n {
        // consume a whole tie group so that ">= t" counts every equal pixel
        let v = pred[order[i]];
        let mut group_has_fix = false;
        while i < n && pred[order[i]] == v {
            if fix[order[i]] != 0 {
                tp += 1;
                group_has_fix = true;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if group_has_fix {
            let x = T::from_usize_lossy(fp) / nn;
            let y = T::from_usize_lossy(tp) / nf;
            area += (x - prev_x) * (y + prev_y) * T::lit(0.5);
            prev_x = x;
            prev_y = y;
        }
    }
    area += (T::one() - prev_x) * (T::one() + prev_y) * T::lit(0.5);
    Ok(area)
}

/// Per-frame metrics of a `(T, H, W)` saliency volume, averaged over frames.
pub fn evaluate<T: Scalar>(pred: &Tensor<T>, target: &SaliencyTarget) -> Result<MetricReport> {
    let (t, h, w) = target.dims();
    if pred.shape() != [t, h, w] {
        return Err(Error::Shape(format!("prediction {:?} does not match target ({t}, {h}, {w})", pred.shape())));
    }
    let mut sums = [0.0f64; 4];
    for ti in 0..t {
        let p = pred.slice_outer(ti);
        let gt: Vec<T> = target.density_frame(ti).iter().map(|&v| T::lit(v as f64)).collect();
        let fix = target.fixation_frame(ti);
        let vals = [metric_cc(p, &gt)?, metric_sim(p, &gt)?, metric_auc_judd(p, fix)?, metric_nss(p, fix)?];
        for (s, v) in sums.iter_mut().zip(vals) {
            *s += v.to_f64_lossy();
        }
    }
    let tf = t as f64;
    Ok(MetricReport { cc: sums[0] / tf, sim: sums[1] / tf, auc_judd: sums[2] / tf, nss: sums[3] / tf, n_frames: t })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_clip, SynthSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut ChaCha8Rng, levels: Option<u32>) -> (Vec<f64>, Vec<u8>) {
        let pred: Vec<f64> = (0..64)
            .map(|_| match levels {
                Some(k) => rng.random_range(0..k) as f64,
                None => rng.random_range(0.0..1.0),
            })
            .collect();
        let nfix = rng.random_range(1..=10);
        let mut fix = vec![0u8; 64];
        while fix.iter().filter(|&&v| v == 1).count() < nfix {
            fix[rng.random_range(0..64)] = 1;
        }
        (pred, fix)
    }

    #[test]
    fn cc_examples() {
        let gt = [0.1f64, 0.5, 0.2, 0.2];
        assert!((metric_cc(&gt, &gt).unwrap() - 1.0).abs() < 1e-12);
        let moved: Vec<f64> = gt.iter().map(|v| 3.0 * v + 7.0).collect();
        assert!((metric_cc(&moved, &gt).unwrap() - 1.0).abs() < 1e-12);
        let v = metric_cc(&[1.0f64, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 5.0]).unwrap();
        assert!((v - 0.98270).abs() < 1e-5);
        assert_eq!(metric_cc(&[2.0f64; 4], &gt).unwrap(), 0.0);
    }

    #[test]
    fn sim_examples() {
        let p = [0.1f64, 0.9];
        assert!((metric_sim(&p, &p).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(metric_sim(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((metric_sim(&[0.5f64, 0.5], &[0.25, 0.75]).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn nss_examples() {
        assert_eq!(metric_nss(&[0.3f64; 4], &[1, 0, 0, 0]).unwrap(), 0.0);
        // mean 0.25, population variance 0.1875
        let v = metric_nss(&[0.0f64, 0.0, 0.0, 1.0], &[0, 0, 0, 1]).unwrap();
        assert!((v - 0.75 / 0.1875f64.sqrt()).abs() < 1e-12);
        assert!((v - 3f64.sqrt()).abs() < 1e-9);
        assert_eq!(metric_nss(&[0.0f64, 2.0, 1.0], &[0, 0, 1]).unwrap(), 0.0);
        assert!(metric_nss(&[0.0f64, 1.0], &[0, 0]).is_err());
    }

    #[test]
    fn auc_examples() {
        let fix = [0u8, 1, 0, 0, 1, 0];
        let indicator: Vec<f64> = fix.iter().map(|&v| v as f64).collect();
        assert_eq!(metric_auc_judd(&indicator, &fix).unwrap(), 1.0);
        assert_eq!(metric_auc_judd(&[0.4f64; 6], &fix).unwrap(), 0.5);
        assert!(metric_auc_judd(&[0.1f64, 0.2], &[1, 1]).is_err());
        assert!(metric_auc_judd(&[0.1f64, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn auc_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..200 {
            // alternate continuous maps with heavily tied ones
            let (pred, fix) = random_instance(&mut rng, if i % 2 == 0 { None } else { Some(5) });
            let fast = metric_auc_judd(&pred, &fix).unwrap();
            let slow = oracle::auc_judd_exhaustive(&pred, &fix);
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        }
    }

    #[test]
    fn evaluate_on_ground_truth() {
        let rec = generate_synthetic_clip(5, &SynthSpec::new(2, 16, 16, 2)).unwrap();
        let pred: Tensor<f64> = rec.target.density.cast();
        let r = evaluate(&pred, &rec.target).unwrap();
        assert!((r.cc - 1.0).abs() < 1e-9);
        assert!((r.sim - 1.0).abs() < 1e-6);
        assert_eq!(r.n_frames, 2);
        // mean of per-frame values
        let per: Vec<f64> = (0..2)
            .map(|t| {
                let gt: Vec<f64> = rec.target.density_frame(t).iter().map(|&v| v as f64).collect();
                metric_nss(&gt, rec.target.fixation_frame(t)).unwrap()
            })
            .collect();
        assert!((r.nss - (per[0] + per[1]) / 2.0).abs() < 1e-12);
        let json = serde_json::to_value(r).unwrap();
        for k in ["cc", "sim", "auc_judd", "nss", "n_frames"] {
            assert!(json.get(k).is_some());
        }
        assert!(evaluate(&Tensor::<f64>::zeros(&[1, 16, 16]), &rec.target).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
            (proptest::collection::vec(-2.0f64..2.0, 64), proptest::collection::btree_set(0usize..64, 1..=10)).prop_map(
                |(p, idx)| {
                    let mut fix = vec![0u8; 64];
                    for i in idx {
                        fix[i] = 1;
                    }
                    (p, fix)
                },
            )
        }

        proptest! {
            #[test]
            fn auc_rank_invariant((p, fix) in instance()) {
                let q: Vec<f64> = p.iter().map(|x| x * x * x + x).collect();
                let a = metric_auc_judd(&p, &fix).unwrap();
                prop_assert!((a - metric_auc_judd(&q, &fix).unwrap()).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&a));
            }

            #[test]
            fn nss_and_cc_affine_invariant(
                (p, fix) in instance(), a in 0.1f64..10.0, b in -5.0f64..5.0
            ) {
                let q: Vec<f64> = p.iter().map(|x| a * x + b).collect();
                prop_assert!((metric_nss(&p, &fix).unwrap() - metric_nss(&q, &fix).unwrap()).abs() < 1e-9);
                let gt: Vec<f64> = fix.iter().map(|&v| v as f64 + 0.1).collect();
                prop_assert!((metric_cc(&p, &gt).unwrap() - metric_cc(&q, &gt).unwrap()).abs() < 1e-9);
            }

            #[test]
            fn sim_and_cc_symmetric(
                p in proptest::collection::vec(0.0f64..1.0, 16),
                q in proptest::collection::vec(0.0f64..1.0, 16)
            ) {
                prop_assert!((metric_sim(&p, &q).unwrap() - metric_sim(&q, &p).unwrap()).abs() < 1e-12);
                prop_assert!((metric_cc(&p, &q).unwrap() - metric_cc(&q, &p).unwrap()).abs() < 1e-12);
                let s = metric_sim(&p, &q).unwrap();
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&s));
            }
        }
    }
}
