//! Benchmark-validation oracles, independent of the model implementation.

use rand::Rng;

use crate::error::Result;
use crate::streams::derived_rng;

use super::{BenchSpec, Dataset, Domain, SignalBank};

/// Classify each video from its human region alone: average the features
/// over the masked positions per clip and pick the class whose noiseless
/// trajectory is nearest in concatenated Euclidean distance. With sigma = 0
/// this is exact.
pub fn nearest_latent_accuracy(
    spec: &BenchSpec,
    bank: &SignalBank,
    dataset: &Dataset,
    labels: &[usize],
) -> Result<f64> {
    let mut correct = 0usize;
    for (video, &label) in dataset.videos.iter().zip(labels) {
        let mut observed = Vec::with_capacity(spec.m * spec.d);
        for (clip, mask) in video.clips.iter().zip(&video.masks) {
            let mut mean = vec![0.0; spec.d];
            let mut count = 0usize;
            for r in 0..spec.h {
                for c in 0..spec.w {
                    if mask.grid().at(r, c) >= 0.5 {
                        count += 1;
                        let base = (r * spec.w + c) * spec.d;
                        for (acc, &v) in mean.iter_mut().zip(&clip.data()[base..base + spec.d]) {
                            *acc += v;
                        }
                    }
                }
            }
            for v in mean.iter_mut() {
                *v /= count as f64;
            }
            observed.extend(mean);
        }
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for cls in 0..spec.n_cls {
            let mut dist = 0.0;
            for clip in 0..spec.m {
                let dir = bank.human_direction(cls, clip);
                for (dd, &dv) in dir.iter().enumerate() {
                    let diff = observed[clip * spec.d + dd] - spec.human_amplitude * dv;
                    dist += diff * diff;
                }
            }
            if dist < best_dist {
                best_dist = dist;
                best = cls;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Monte-Carlo the accuracy of the scene-only Bayes rule fit on the source
/// mapping (predict the action equal to the scene type) when applied to
/// target videos drawn under the deranged mapping.
pub fn scene_bayes_rate_monte_carlo(spec: &BenchSpec, samples: usize) -> f64 {
    let mut rng = derived_rng(spec.seed, 0xBA1E5);
    let mut hits = 0usize;
    for _ in 0..samples {
        let label = rng.gen_range(0..spec.n_cls);
        let scene = super::sample_scene(spec, Domain::Target, label, &mut rng);
        if scene == label {
            hits += 1;
        }
    }
    hits as f64 / samples as f64
}
