//! Post-hoc analyses: entropy statistics, membership-inference ROC/AUC,
//! per-class anomaly ranking, embedding export, and k-means clustering.

use crate::data::{IndexMaps, IndexedDataset};
use crate::error::{Error, Result};
use crate::models::{apply_mask_sentinel, validity_mask, Variant};
use crate::nn::loss::softmax_probs;
use crate::nn::ParamStore;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::train::CnnModelRef;
use crate::util::argmax;

use serde::Serialize;

/// H(p) = −Σ p·ln p with 0·ln 0 = 0. Input must be a distribution
/// (nonnegative, sums to 1 within 1e-4).
pub fn entropy(probs: &[f32]) -> Result<f32> {
    let mut sum = 0.0f64;
    for &p in probs {
        if p < 0.0 || !p.is_finite() {
            return Err(Error::Param(format!("entropy: invalid probability {p}")));
        }
        sum += p as f64;
    }
    if (sum - 1.0).abs() > 1e-4 {
        return Err(Error::Param(format!(
            "entropy: probabilities sum to {sum}, not 1"
        )));
    }
    let mut h = 0.0f64;
    for &p in probs {
        if p > 0.0 {
            h -= p as f64 * (p as f64).ln();
        }
    }
    Ok(h as f32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    MaxConfidence,
    NegEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    Class,
    Index,
}

/// Member/non-member score samples for one (branch, kind) pair. Higher
/// scores must indicate membership, hence negated entropy.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub kind: ScoreKind,
    pub branch: BranchKind,
    pub member_scores: Vec<f32>,
    pub nonmember_scores: Vec<f32>,
}

/// Exact AUC via rank statistics (ties contribute ½) plus the ROC
/// polyline over every distinct threshold, with (0,0) and (1,1)
/// endpoints. fpr/tpr pairs are ordered by increasing fpr.
pub fn roc_auc(set: &ScoreSet) -> Result<(f64, Vec<(f64, f64)>)> {
    let m = set.member_scores.len();
    let n = set.nonmember_scores.len();
    if m == 0 || n == 0 {
        return Err(Error::Param("roc_auc: both sides must be nonempty".into()));
    }

    // Mann–Whitney with average ranks for ties.
    let mut all: Vec<(f32, bool)> = set
        .member_scores
        .iter()
        .map(|&s| (s, true))
        .chain(set.nonmember_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut rank_sum_members = 0.0f64;
    let mut i = 0usize;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for item in &all[i..=j] {
            if item.1 {
                rank_sum_members += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_members - (m as f64) * (m as f64 + 1.0) / 2.0;
    let auc = u / (m as f64 * n as f64);

    // ROC points: thresholds descending; predict member iff score ≥ t.
    let mut thresholds: Vec<f32> = all.iter().map(|(s, _)| *s).collect();
    thresholds.dedup();
    let mut points = vec![(0.0f64, 0.0f64)];
    for &t in thresholds.iter().rev() {
        let tp = set.member_scores.iter().filter(|&&s| s >= t).count() as f64;
        let fp = set.nonmember_scores.iter().filter(|&&s| s >= t).count() as f64;
        points.push((fp / n as f64, tp / m as f64));
    }
    if *points.last().unwrap() != (1.0, 1.0) {
        points.push((1.0, 1.0));
    }
    Ok((auc, points))
}

/// Four score sets (class/index × confidence/entropy) with their AUCs.
pub struct MiaReport {
    pub sets: Vec<ScoreSet>,
    pub aucs: Vec<(BranchKind, ScoreKind, f64)>,
    /// True when the requested sample count exceeded a split.
    pub clamped: bool,
}

/// Max-confidence and entropy scores from both branches over sampled
/// members (train) and non-members (test). The index branch is scored
/// on the predicted-class-masked distribution, i.e. the inference path.
pub fn membership_inference(
    model: CnnModelRef<'_>,
    store: &mut ParamStore,
    ds_train: &IndexedDataset,
    ds_test: &IndexedDataset,
    maps: &IndexMaps,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<MiaReport> {
    if model.spec().variant != Variant::TwoBranch {
        return Err(Error::Param(
            "membership inference needs the two-branch model's class head".into(),
        ));
    }
    let n_train = n_samples.min(ds_train.len());
    let n_test = n_samples.min(ds_test.len());
    let clamped = n_train < n_samples || n_test < n_samples;
    if clamped {
        eprintln!(
            "warning: clamping MIA samples to {n_train} members / {n_test} non-members (requested {n_samples})"
        );
    }
    let mut members = rng.sample_without_replacement(ds_train.len(), n_train);
    members.sort_unstable();
    let mut nonmembers = rng.sample_without_replacement(ds_test.len(), n_test);
    nonmembers.sort_unstable();

    let score = |store: &mut ParamStore,
                 ds: &IndexedDataset,
                 idx: &[usize]|
     -> Result<(Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>)> {
        let mut class_conf = Vec::with_capacity(idx.len());
        let mut class_ent = Vec::with_capacity(idx.len());
        let mut index_conf = Vec::with_capacity(idx.len());
        let mut index_ent = Vec::with_capacity(idx.len());
        let class_counts: Vec<usize> =
            (0..maps.num_classes()).map(|c| maps.class_count(c)).collect();
        for chunk in idx.chunks(256) {
            let x = ds.batch(chunk);
            let out = model.forward_eval(store, &x)?;
            let class_logits = out.class_logits.as_ref().expect("two-branch");
            let cprobs = softmax_probs(class_logits, None);
            let predicted: Vec<usize> =
                (0..chunk.len()).map(|i| argmax(class_logits.row(i))).collect();
            let iprobs = if model.spec().conditional {
                let m = out.index_logits.dim(1);
                let mask = validity_mask(&predicted, &class_counts, m);
                let mut logits = out.index_logits.clone();
                apply_mask_sentinel(&mut logits, &mask);
                softmax_probs(&logits, None)
            } else {
                softmax_probs(&out.index_logits, None)
            };
            for i in 0..chunk.len() {
                let crow = cprobs.row(i);
                class_conf.push(crow[argmax(crow)]);
                class_ent.push(entropy(crow)?);
                let irow = iprobs.row(i);
                index_conf.push(irow[argmax(irow)]);
                index_ent.push(entropy(irow)?);
            }
        }
        Ok((class_conf, class_ent, index_conf, index_ent))
    };

    let (m_cc, m_ce, m_ic, m_ie) = score(store, ds_train, &members)?;
    let (t_cc, t_ce, t_ic, t_ie) = score(store, ds_test, &nonmembers)?;

    let neg = |v: Vec<f32>| -> Vec<f32> { v.into_iter().map(|x| -x).collect() };
    let sets = vec![
        ScoreSet {
            kind: ScoreKind::MaxConfidence,
            branch: BranchKind::Class,
            member_scores: m_cc,
            nonmember_scores: t_cc,
        },
        ScoreSet {
            kind: ScoreKind::NegEntropy,
            branch: BranchKind::Class,
            member_scores: neg(m_ce),
            nonmember_scores: neg(t_ce),
        },
        ScoreSet {
            kind: ScoreKind::MaxConfidence,
            branch: BranchKind::Index,
            member_scores: m_ic,
            nonmember_scores: t_ic,
        },
        ScoreSet {
            kind: ScoreKind::NegEntropy,
            branch: BranchKind::Index,
            member_scores: neg(m_ie),
            nonmember_scores: neg(t_ie),
        },
    ];
    let mut aucs = Vec::with_capacity(4);
    for s in &sets {
        let (auc, _) = roc_auc(s)?;
        aucs.push((s.branch, s.kind, auc));
    }
    Ok(MiaReport {
        sets,
        aucs,
        clamped,
    })
}

/// Per class, every training sample with its masked index-branch
/// entropy, sorted ascending (lowest entropy = most anomalous under the
/// paper's convention).
pub struct AnomalyRanking {
    pub per_class: Vec<Vec<(usize, f32)>>,
}

impl AnomalyRanking {
    /// The k lowest- and k highest-entropy samples of a class.
    pub fn extremes(&self, class: usize, k: usize) -> (Vec<(usize, f32)>, Vec<(usize, f32)>) {
        let ranking = &self.per_class[class];
        let lo = ranking.iter().take(k).copied().collect();
        let hi = ranking.iter().rev().take(k).copied().collect();
        (lo, hi)
    }
}

/// Entropy of the index-branch softmax per training sample, masked to
/// the sample's true class for conditional models.
pub fn rank_anomalies(
    model: CnnModelRef<'_>,
    store: &mut ParamStore,
    ds_train: &IndexedDataset,
    maps: &IndexMaps,
) -> Result<AnomalyRanking> {
    let mut per_class: Vec<Vec<(usize, f32)>> = vec![Vec::new(); ds_train.num_classes];
    let indices: Vec<usize> = (0..ds_train.len()).collect();
    let class_counts: Vec<usize> = (0..maps.num_classes()).map(|c| maps.class_count(c)).collect();
    for chunk in indices.chunks(256) {
        let x = ds_train.batch(chunk);
        let out = model.forward_eval(store, &x)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| ds_train.labels[i]).collect();
        let probs = if model.spec().conditional {
            let m = out.index_logits.dim(1);
            let mask = validity_mask(&labels, &class_counts, m);
            let mut logits = out.index_logits;
            apply_mask_sentinel(&mut logits, &mask);
            softmax_probs(&logits, None)
        } else {
            softmax_probs(&out.index_logits, None)
        };
        for (r, &i) in chunk.iter().enumerate() {
            let h = entropy(probs.row(r))?;
            per_class[labels[r]].push((i, h));
        }
    }
    for list in per_class.iter_mut() {
        list.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    }
    Ok(AnomalyRanking { per_class })
}

/// Index-branch embeddings for the given samples, one row per input.
pub fn extract_embeddings(
    model: CnnModelRef<'_>,
    store: &mut ParamStore,
    ds: &IndexedDataset,
    indices: &[usize],
) -> Result<Tensor> {
    let mut rows: Vec<f32> = Vec::new();
    let mut width = 0usize;
    for chunk in indices.chunks(256) {
        let x = ds.batch(chunk);
        let out = model.forward_eval(store, &x)?;
        width = out.embedding.dim(1);
        rows.extend_from_slice(out.embedding.data());
    }
    Ok(Tensor::from_vec(&[indices.len(), width], rows))
}

pub struct KMeansResult {
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    /// Within-cluster SSE after each Lloyd iteration.
    pub sse_history: Vec<f64>,
}

impl KMeansResult {
    /// The m nearest sample rows to each centroid (Euclidean).
    pub fn nearest_samples(&self, x: &Tensor, m: usize) -> Vec<Vec<usize>> {
        let k = self.centroids.dim(0);
        let mut out = Vec::with_capacity(k);
        for c in 0..k {
            let mut dists: Vec<(usize, f64)> = (0..x.dim(0))
                .map(|i| (i, sqdist(x.row(i), self.centroids.row(c))))
                .collect();
            dists.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            out.push(dists.into_iter().take(m).map(|(i, _)| i).collect());
        }
        out
    }
}

fn sqdist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum()
}

/// Lloyd iterations from k-means++ seeding. Stops after `max_iters` or
/// when the relative SSE improvement drops below `tol`.
pub fn kmeans(
    x: &Tensor,
    k: usize,
    rng: &mut RngStream,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansResult> {
    let n = x.dim(0);
    let d = x.dim(1);
    if k == 0 || k > n {
        return Err(Error::Param(format!("kmeans: k = {k} outside [1, {n}]")));
    }

    // k-means++ seeding
    let mut centroids = vec![0.0f32; k * d];
    let first = rng.below(n);
    centroids[..d].copy_from_slice(x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sqdist(x.row(i), &centroids[..d])).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.below(n)
        } else {
            let mut target = rng.next_f32() as f64 * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids[c * d..(c + 1) * d].copy_from_slice(x.row(pick));
        for i in 0..n {
            let nd = sqdist(x.row(i), &centroids[c * d..(c + 1) * d]);
            if nd < d2[i] {
                d2[i] = nd;
            }
        }
    }

    let mut assignments = vec![0usize; n];
    let mut sse_history: Vec<f64> = Vec::new();
    for _iter in 0..max_iters {
        // assign
        let mut sse = 0.0f64;
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dd = sqdist(x.row(i), &centroids[c * d..(c + 1) * d]);
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            assignments[i] = best;
            sse += best_d;
        }
        // update
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(x.row(i)) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // deterministic restart on the point farthest from its centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sqdist(x.row(a), &centroids[assignments[a] * d..assignments[a] * d + d]);
                        let db = sqdist(x.row(b), &centroids[assignments[b] * d..assignments[b] * d + d]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids[c * d..(c + 1) * d].copy_from_slice(x.row(far));
            } else {
                for (j, s) in sums[c * d..(c + 1) * d].iter().enumerate() {
                    centroids[c * d + j] = (s / counts[c] as f64) as f32;
                }
            }
        }
        let done = match sse_history.last() {
            Some(&prev) => prev > 0.0 && ((prev - sse) / prev.max(1e-12)) < tol,
            None => false,
        };
        sse_history.push(sse);
        if done {
            break;
        }
    }

    Ok(KMeansResult {
        centroids: Tensor::from_vec(&[k, d], centroids),
        assignments,
        sse_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_unit_cases() {
        let onehot = vec![0.0, 1.0, 0.0];
        assert!(entropy(&onehot).unwrap().abs() < 1e-7);

        let k = 6000usize;
        let uniform = vec![1.0 / k as f32; k];
        let h = entropy(&uniform).unwrap();
        assert!((h - (k as f32).ln()).abs() < 1e-4, "h = {h}");

        let half = vec![0.5, 0.5, 0.0, 0.0];
        assert!((entropy(&half).unwrap() - 2.0f32.ln()).abs() < 1e-6);

        assert!(entropy(&[0.5, 0.6]).is_err());
        assert!(entropy(&[-0.1, 1.1]).is_err());
    }

    #[test]
    fn auc_trivial_cases() {
        let full = ScoreSet {
            kind: ScoreKind::MaxConfidence,
            branch: BranchKind::Index,
            member_scores: vec![0.9, 0.8],
            nonmember_scores: vec![0.1, 0.2],
        };
        let (auc, points) = roc_auc(&full).unwrap();
        assert_eq!(auc, 1.0);
        assert_eq!(points.first().unwrap(), &(0.0, 0.0));
        assert_eq!(points.last().unwrap(), &(1.0, 1.0));

        let ties = ScoreSet {
            kind: ScoreKind::MaxConfidence,
            branch: BranchKind::Class,
            member_scores: vec![0.5; 10],
            nonmember_scores: vec![0.5; 7],
        };
        let (auc, _) = roc_auc(&ties).unwrap();
        assert!((auc - 0.5).abs() < 1e-12);

        let empty = ScoreSet {
            kind: ScoreKind::MaxConfidence,
            branch: BranchKind::Class,
            member_scores: vec![],
            nonmember_scores: vec![0.5],
        };
        assert!(roc_auc(&empty).is_err());
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = RngStream::new(42);
        let members: Vec<f32> = (0..100).map(|_| rng.normal(0.6, 0.3)).collect();
        let nonmembers: Vec<f32> = (0..100).map(|_| rng.normal(0.4, 0.3)).collect();
        let set = ScoreSet {
            kind: ScoreKind::MaxConfidence,
            branch: BranchKind::Index,
            member_scores: members.clone(),
            nonmember_scores: nonmembers.clone(),
        };
        let (auc, _) = roc_auc(&set).unwrap();
        // O(n²) brute force: P(m > n) + ½P(m = n)
        let mut acc = 0.0f64;
        for &m in &members {
            for &t in &nonmembers {
                acc += if m > t {
                    1.0
                } else if m == t {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let brute = acc / (members.len() * nonmembers.len()) as f64;
        assert!((auc - brute).abs() < 1e-9, "{auc} vs {brute}");
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = RngStream::new(7);
        let set = ScoreSet {
            kind: ScoreKind::MaxConfidence,
            branch: BranchKind::Index,
            member_scores: (0..60).map(|_| rng.next_f32()).collect(),
            nonmember_scores: (0..50).map(|_| rng.next_f32() * 0.8).collect(),
        };
        let (auc1, _) = roc_auc(&set).unwrap();
        let transform = |v: &Vec<f32>| v.iter().map(|&x| (3.0 * x).exp()).collect();
        let set2 = ScoreSet {
            member_scores: transform(&set.member_scores),
            nonmember_scores: transform(&set.nonmember_scores),
            ..set.clone()
        };
        let (auc2, _) = roc_auc(&set2).unwrap();
        assert!((auc1 - auc2).abs() < 1e-12);
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let x = Tensor::from_vec(&[4, 2], vec![0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 2.0, 2.0]);
        let mut rng = RngStream::new(1);
        let r = kmeans(&x, 1, &mut rng, 50, 1e-9).unwrap();
        assert_eq!(r.centroids.data(), &[1.0, 1.0]);
    }

    #[test]
    fn kmeans_separated_blobs_pure() {
        let mut rng = RngStream::new(2);
        let mut rows = Vec::new();
        for i in 0..60 {
            let (cx, cy) = if i < 30 { (0.0, 0.0) } else { (10.0, 10.0) };
            rows.push(cx + rng.normal(0.0, 0.3));
            rows.push(cy + rng.normal(0.0, 0.3));
        }
        let x = Tensor::from_vec(&[60, 2], rows);
        let r = kmeans(&x, 2, &mut rng, 100, 1e-9).unwrap();
        let first = r.assignments[0];
        assert!(r.assignments[..30].iter().all(|&a| a == first));
        assert!(r.assignments[30..].iter().all(|&a| a != first));
        // Lloyd: SSE non-increasing
        for w in r.sse_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "sse increased: {:?}", r.sse_history);
        }
        assert!(kmeans(&x, 61, &mut rng, 10, 1e-9).is_err());
    }
}
