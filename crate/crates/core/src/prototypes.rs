//! Per-domain context prototype banks: train a weak source-only context
//! classifier, drop high-entropy context features, and k-means-cluster the
//! survivors into K prototypes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::array::Array;
use crate::error::{HctError, Result};

/// K context prototypes for one domain plus clustering metadata.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    /// K×D centroid matrix.
    pub prototypes: Array,
    pub domain: String,
    /// Fraction of context features surviving the entropy filter.
    pub kept_fraction: f64,
    /// Per-iteration k-means objective; non-increasing.
    pub inertia_trace: Vec<f64>,
}

impl PrototypeBank {
    pub fn k(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }
}

/// A linear softmax classifier over raw context features; deliberately weak,
/// its only job is entropy ranking.
#[derive(Clone, Debug)]
pub struct ContextClassifier {
    pub w: Array,
    pub b: Array,
}

impl ContextClassifier {
    pub fn n_classes(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn probabilities(&self, feature: &[f64]) -> Vec<f64> {
        let n_cls = self.n_classes();
        let d = self.w.shape()[0];
        let mut logits = self.b.data().to_vec();
        for (l, &x) in feature.iter().enumerate().take(d) {
            if x == 0.0 {
                continue;
            }
            let wrow = self.w.row(l);
            for j in 0..n_cls {
                logits[j] += x * wrow[j];
            }
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in logits.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in logits.iter_mut() {
            *v /= z;
        }
        logits
    }

    pub fn entropy(&self, feature: &[f64]) -> f64 {
        self.probabilities(feature)
            .iter()
            .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
            .sum()
    }
}

/// Fit the filter classifier on labeled source context features with plain
/// mini-batch SGD on softmax cross-entropy.
pub fn train_context_classifier(
    features: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    epochs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ContextClassifier> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(HctError::InvalidArgument(format!(
            "context classifier needs matched features/labels, got {}/{}",
            features.len(),
            labels.len()
        )));
    }
    let d = features[0].len();
    let mut clf = ContextClassifier {
        w: crate::nn::init_weight(d, n_classes, rng),
        b: Array::zeros(vec![n_classes]),
    };
    let lr = 0.1;
    let batch = 256.min(features.len());
    let mut order: Vec<usize> = (0..features.len()).collect();
    for _ in 0..epochs {
        shuffle(&mut order, rng);
        for chunk in order.chunks(batch) {
            let mut gw = vec![0.0; d * n_classes];
            let mut gb = vec![0.0; n_classes];
            for &i in chunk {
                let p = clf.probabilities(&features[i]);
                for j in 0..n_classes {
                    let delta = p[j] - if j == labels[i] { 1.0 } else { 0.0 };
                    gb[j] += delta;
                    for (l, &x) in features[i].iter().enumerate() {
                        gw[l * n_classes + j] += delta * x;
                    }
                }
            }
            let scale = lr / chunk.len() as f64;
            for (w, g) in clf.w.data_mut().iter_mut().zip(&gw) {
                *w -= scale * g;
            }
            for (b, g) in clf.b.data_mut().iter_mut().zip(&gb) {
                *b -= scale * g;
            }
        }
    }
    Ok(clf)
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Keep the ceil(keep_fraction * n) features with the lowest predictive
/// entropy under the classifier; ties broken by original index.
pub fn entropy_filter(
    features: &[Vec<f64>],
    classifier: &ContextClassifier,
    keep_fraction: f64,
) -> Result<Vec<Vec<f64>>> {
    if features.is_empty() {
        return Err(HctError::InvalidArgument("entropy_filter on an empty feature list".into()));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(HctError::InvalidArgument(format!(
            "keep_fraction must lie in (0, 1], got {}",
            keep_fraction
        )));
    }
    let keep = ((keep_fraction * features.len() as f64).ceil() as usize).max(1);
    let mut ranked: Vec<(f64, usize)> = features
        .iter()
        .enumerate()
        .map(|(i, f)| (classifier.entropy(f), i))
        .collect();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = ranked[..keep].iter().map(|&(_, i)| i).collect();
    kept.sort_unstable();
    Ok(kept.into_iter().map(|i| features[i].clone()).collect())
}

/// Lloyd's k-means with k-means++ seeding. Terminates when the max centroid
/// shift drops below `tol` or after `max_iters`. Empty clusters are
/// re-seeded from the point farthest from its centroid. Assignment ties go
/// to the lowest cluster index.
pub fn cluster_prototypes(
    features: &[Vec<f64>],
    k: usize,
    domain: &str,
    rng: &mut ChaCha8Rng,
    max_iters: usize,
    tol: f64,
) -> Result<PrototypeBank> {
    if k == 0 {
        return Err(HctError::InvalidArgument("k must be positive".into()));
    }
    if features.len() < k {
        return Err(HctError::InvalidArgument(format!(
            "k-means needs at least k={} features, got {}",
            k,
            features.len()
        )));
    }
    let d = features[0].len();
    let n = features.len();

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(features[rng.gen_range(0..n)].clone());
    let mut best_sq = vec![f64::INFINITY; n];
    while centroids.len() < k {
        let newest = centroids.last().unwrap();
        let mut total = 0.0;
        for (i, f) in features.iter().enumerate() {
            let dist = sq_dist(f, newest);
            if dist < best_sq[i] {
                best_sq[i] = dist;
            }
            total += best_sq[i];
        }
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in best_sq.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.push(features[next].clone());
    }

    let mut assignment = vec![0usize; n];
    let mut inertia_trace = Vec::new();
    for _ in 0..max_iters {
        // Assignment step.
        let mut inertia = 0.0;
        for (i, f) in features.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, cen) in centroids.iter().enumerate() {
                let dist = sq_dist(f, cen);
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            assignment[i] = best;
            inertia += best_d;
        }
        inertia_trace.push(inertia);

        // Update step.
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, f) in features.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, &v) in sums[assignment[i]].iter_mut().zip(f) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let new_c = if counts[c] == 0 {
                // Re-seed an empty cluster from the farthest point.
                let far = features
                    .iter()
                    .enumerate()
                    .max_by(|(i, f), (j, g)| {
                        let a = sq_dist(f, &centroids[assignment[*i]]);
                        let b = sq_dist(g, &centroids[assignment[*j]]);
                        a.partial_cmp(&b).unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                features[far].clone()
            } else {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            };
            shift = shift.max(sq_dist(&new_c, &centroids[c]).sqrt());
            centroids[c] = new_c;
        }
        if shift < tol {
            break;
        }
    }
    // Final objective under the settled centroids.
    let final_inertia: f64 = features
        .iter()
        .map(|f| centroids.iter().map(|c| sq_dist(f, c)).fold(f64::INFINITY, f64::min))
        .sum();
    inertia_trace.push(final_inertia);
    let mut last = f64::INFINITY;
    for &v in &inertia_trace {
        if v > last + 1e-9 {
            return Err(HctError::Contract(format!(
                "k-means objective increased: {} -> {}",
                last, v
            )));
        }
        last = v;
    }

    let flat: Vec<f64> = centroids.into_iter().flatten().collect();
    Ok(PrototypeBank {
        prototypes: Array::new(vec![k, d], flat)?,
        domain: domain.to_string(),
        kept_fraction: 1.0,
        inertia_trace,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Full bank pipeline for one domain: entropy-filter the context features
/// with the given classifier, then cluster the survivors.
pub fn build_bank(
    features: &[Vec<f64>],
    classifier: &ContextClassifier,
    keep_fraction: f64,
    k: usize,
    domain: &str,
    rng: &mut ChaCha8Rng,
) -> Result<PrototypeBank> {
    let kept = entropy_filter(features, classifier, keep_fraction)?;
    let kept_fraction = kept.len() as f64 / features.len() as f64;
    let mut bank = cluster_prototypes(&kept, k, domain, rng, 100, 1e-6)?;
    bank.kept_fraction = kept_fraction;
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::derived_rng;

    fn uniform_classifier(d: usize, n_cls: usize) -> ContextClassifier {
        ContextClassifier { w: Array::zeros(vec![d, n_cls]), b: Array::zeros(vec![n_cls]) }
    }

    #[test]
    fn uniform_prediction_has_max_entropy_and_is_dropped() {
        let n_cls = 4;
        let clf = uniform_classifier(2, n_cls);
        assert!((clf.entropy(&[0.3, 0.4]) - (n_cls as f64).ln()).abs() < 1e-12);

        // Sharp classifier: big weight on the first coordinate.
        let mut sharp = uniform_classifier(2, n_cls);
        sharp.w.data_mut()[0] = 50.0;
        let peaked = vec![1.0, 0.0];
        let flat = vec![0.0, 0.0];
        let kept = entropy_filter(&[peaked.clone(), flat], &sharp, 0.5).unwrap();
        assert_eq!(kept, vec![peaked]);
    }

    #[test]
    fn one_hot_prediction_has_zero_entropy_and_is_kept() {
        let mut clf = uniform_classifier(1, 3);
        clf.b.data_mut()[1] = 1e6;
        assert!(clf.entropy(&[0.0]) < 1e-9);
        let kept = entropy_filter(&[vec![0.0]], &clf, 0.1).unwrap();
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn filter_matches_a_brute_force_entropy_sort() {
        let mut rng = derived_rng(21, 1);
        let n_cls = 3;
        let d = 4;
        let mut clf = uniform_classifier(d, n_cls);
        for v in clf.w.data_mut() {
            *v = rng.gen::<f64>() * 4.0 - 2.0;
        }
        let features: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
            .collect();

        let kept = entropy_filter(&features, &clf, 0.5).unwrap();
        assert_eq!(kept.len(), 5);

        let mut by_entropy: Vec<(f64, usize)> = features
            .iter()
            .enumerate()
            .map(|(i, f)| (clf.entropy(f), i))
            .collect();
        by_entropy.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut expect: Vec<usize> = by_entropy[..5].iter().map(|&(_, i)| i).collect();
        expect.sort_unstable();
        let expect: Vec<Vec<f64>> = expect.into_iter().map(|i| features[i].clone()).collect();
        assert_eq!(kept, expect);

        let max_kept = kept.iter().map(|f| clf.entropy(f)).fold(f64::MIN, f64::max);
        let min_dropped = by_entropy[5..].iter().map(|&(e, _)| e).fold(f64::MAX, f64::min);
        assert!(max_kept <= min_dropped + 1e-12);
    }

    #[test]
    fn filter_size_is_ceil_of_fraction() {
        let clf = uniform_classifier(1, 2);
        let feats: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64]).collect();
        assert_eq!(entropy_filter(&feats, &clf, 0.5).unwrap().len(), 4);
        assert_eq!(entropy_filter(&feats, &clf, 1.0).unwrap().len(), 7);
        assert!(entropy_filter(&[], &clf, 0.5).is_err());
    }

    #[test]
    fn k1_centroid_is_the_mean() {
        let mut rng = derived_rng(22, 1);
        let feats: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..3).map(|_| rng.gen::<f64>() * 10.0 - 5.0).collect())
            .collect();
        let bank = cluster_prototypes(&feats, 1, "source", &mut rng, 100, 1e-9).unwrap();
        for j in 0..3 {
            let mean: f64 = feats.iter().map(|f| f[j]).sum::<f64>() / feats.len() as f64;
            assert!((bank.prototypes.data()[j] - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn two_blobs_are_recovered() {
        let mut rng = derived_rng(23, 1);
        let d = 6;
        let mut feats = Vec::new();
        for sign in [-5.0f64, 5.0] {
            for _ in 0..40 {
                let mut f = vec![0.0; d];
                f[0] = sign + (rng.gen::<f64>() - 0.5) * 0.02;
                for v in f.iter_mut().skip(1) {
                    *v = (rng.gen::<f64>() - 0.5) * 0.02;
                }
                feats.push(f);
            }
        }
        let bank = cluster_prototypes(&feats, 2, "source", &mut rng, 100, 1e-9).unwrap();
        let c0 = bank.prototypes.row(0)[0];
        let c1 = bank.prototypes.row(1)[0];
        let (lo, hi) = if c0 < c1 { (c0, c1) } else { (c1, c0) };
        assert!((lo + 5.0).abs() < 0.1, "low blob centroid {}", lo);
        assert!((hi - 5.0).abs() < 0.1, "high blob centroid {}", hi);
        for w in bank.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn fewer_features_than_k_is_an_error() {
        let mut rng = derived_rng(24, 1);
        let feats = vec![vec![0.0; 2]; 3];
        assert!(cluster_prototypes(&feats, 4, "source", &mut rng, 10, 1e-6).is_err());
    }

    #[test]
    fn trained_classifier_separates_an_easy_problem() {
        let mut rng = derived_rng(25, 1);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let cls = i % 2;
            let center = if cls == 0 { -2.0 } else { 2.0 };
            feats.push(vec![center + (rng.gen::<f64>() - 0.5) * 0.1, 1.0]);
            labels.push(cls);
        }
        let clf = train_context_classifier(&feats, &labels, 2, 5, &mut rng).unwrap();
        let correct = feats
            .iter()
            .zip(&labels)
            .filter(|(f, &y)| {
                let p = clf.probabilities(f);
                (p[1] > p[0]) == (y == 1)
            })
            .count();
        assert!(correct as f64 / feats.len() as f64 > 0.95);
    }
}
