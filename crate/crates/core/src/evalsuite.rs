//! Metrics: accuracy, gradient-times-input spatial attribution, the human
//! ratio of thresholded attribution against ground-truth masks, and the
//! Davies-Bouldin index over video-level features.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::diff::{DiffArray, Tape};
use crate::error::{HctError, Result};
use crate::human_encoder::TrnPlan;
use crate::masking::HumanMask;
use crate::nn::Binder;
use crate::training::{ModelState, PreparedVideo, StreamNeeds, Variant};

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(HctError::InvalidArgument(format!(
            "accuracy needs matched non-empty inputs, got {}/{}",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Per-clip nonnegative saliency grids, max-normalized to 1 (an all-zero
/// grid is permitted when the gradient vanishes).
#[derive(Clone, Debug)]
pub struct AttributionMap {
    pub per_clip: Vec<Array>,
    pub threshold_coef: f64,
}

impl AttributionMap {
    /// Positions of clip `i` at or above `threshold_coef * max`; empty when
    /// the whole grid is zero.
    pub fn binarized(&self, clip: usize) -> Vec<(usize, usize)> {
        let grid = &self.per_clip[clip];
        let max = grid.data().iter().cloned().fold(0.0f64, f64::max);
        if max <= 0.0 {
            return Vec::new();
        }
        let (h, w) = (grid.shape()[0], grid.shape()[1]);
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if grid.at(r, c) >= self.threshold_coef * max {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn keyframe_index(&self) -> usize {
        self.per_clip.len() / 2
    }
}

/// Saliency of a scalar score with respect to per-clip feature maps:
/// relu(sum_d d(score)/d(x_{j,d}) * x_{j,d}) per position, max-normalized
/// per clip. The score builder receives the flattened `[H*W, D]` clip
/// leaves and must return a scalar.
pub fn attribution_for_score<F>(
    clips: &[Array],
    h: usize,
    w: usize,
    threshold_coef: f64,
    score_fn: F,
) -> Result<AttributionMap>
where
    F: Fn(&Tape, &[DiffArray]) -> Result<DiffArray>,
{
    let tape = Tape::new();
    let leaves: Vec<DiffArray> = clips
        .iter()
        .map(|c| tape.leaf(c.clone()))
        .collect::<Result<_>>()?;
    let score = score_fn(&tape, &leaves)?;
    if score.len() != 1 {
        return Err(HctError::InvalidArgument("attribution score must be scalar".into()));
    }
    let grads = tape.backward(&score)?;
    let mut per_clip = Vec::with_capacity(clips.len());
    for (clip, leaf) in clips.iter().zip(&leaves) {
        let g = grads
            .wrt(leaf)
            .ok_or_else(|| HctError::Contract("clip leaf missing from gradient map".into()))?;
        if !g.is_finite() {
            return Err(HctError::NonFinite { op: "attribution gradient".into() });
        }
        let d = clip.shape().last().copied().unwrap_or(1);
        let mut grid = vec![0.0; h * w];
        for (pos, cell) in grid.iter_mut().enumerate() {
            let base = pos * d;
            let dot: f64 = (0..d).map(|j| g.data()[base + j] * clip.data()[base + j]).sum();
            *cell = dot.max(0.0);
        }
        let max = grid.iter().cloned().fold(0.0f64, f64::max);
        if max > 0.0 {
            for v in grid.iter_mut() {
                *v /= max;
            }
        }
        per_clip.push(Array::new(vec![h, w], grid)?);
    }
    Ok(AttributionMap { per_clip, threshold_coef })
}

/// Attribution of the model's pre-softmax class score for one video. For
/// the probability-fusion variant the score is the mean of the two heads'
/// class logits.
pub fn attribution_map(
    model: &ModelState,
    pv: &PreparedVideo,
    h: usize,
    w: usize,
    target_class: usize,
    threshold_coef: f64,
) -> Result<AttributionMap> {
    let plan = TrnPlan::eval(model.config.m)?;
    attribution_for_score(&pv.clips_flat, h, w, threshold_coef, |tape, leaves| {
        let bd = Binder::new(tape);
        let bank = model.bank_tokens(tape, pv.domain)?;
        let logits = match model.config.variant {
            Variant::LateFusion => {
                let needs = StreamNeeds::for_variant(&model.config);
                let out = model.forward_prepared(&bd, leaves, pv, &plan, bank.as_ref(), needs)?;
                let hm = model.human_encoder.classifier.forward(
                    &bd,
                    "hm.cls",
                    &out.human.as_ref().unwrap().pooled,
                )?;
                let ctx = model.video_head.classifier.forward(
                    &bd,
                    "video.cls",
                    out.ctx_pooled.as_ref().unwrap(),
                )?;
                tape.scale(&tape.add(&hm, &ctx)?, 0.5)?
            }
            _ => model.logits_prepared(&bd, leaves, pv, &plan, bank.as_ref())?,
        };
        let n_cls = logits.len();
        if target_class >= n_cls {
            return Err(HctError::InvalidArgument(format!(
                "target class {} out of range for {} classes",
                target_class, n_cls
            )));
        }
        let mut onehot = vec![0.0; n_cls];
        onehot[target_class] = 1.0;
        let pick = tape.constant(Array::vector(onehot))?;
        tape.sum_all(&tape.mul(&logits, &pick)?)
    })
}

/// How the overlap is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioDenominator {
    /// Overlap / binarized-attribution area (the default reading).
    Attribution,
    /// Overlap / mask area.
    Mask,
    /// Overlap / union area.
    Union,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HumanRatioOutcome {
    pub percent: f64,
    pub evaluated: usize,
    /// Keyframes whose binarized attribution was empty.
    pub skipped: usize,
}

/// Mean over keyframes (the center clip of each video) of the fraction of
/// the thresholded attribution that falls inside the ground-truth human
/// mask. Keyframes with an empty binarized map are skipped and counted.
pub fn human_ratio(
    maps: &[AttributionMap],
    masks_per_video: &[Vec<HumanMask>],
    denominator: RatioDenominator,
) -> Result<HumanRatioOutcome> {
    if maps.is_empty() || maps.len() != masks_per_video.len() {
        return Err(HctError::InvalidArgument(format!(
            "human_ratio needs matched non-empty inputs, got {}/{}",
            maps.len(),
            masks_per_video.len()
        )));
    }
    let mut total = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for (map, masks) in maps.iter().zip(masks_per_video) {
        let key = map.keyframe_index();
        let grid = &map.per_clip[key];
        let mask = &masks[key];
        if grid.shape() != mask.grid().shape() {
            return Err(HctError::ShapeMismatch {
                op: "human_ratio".into(),
                detail: format!("attribution {:?} vs mask {:?}", grid.shape(), mask.grid().shape()),
            });
        }
        let bin = map.binarized(key);
        if bin.is_empty() {
            skipped += 1;
            continue;
        }
        let human: Vec<(usize, usize)> = mask.positions_at_or_above(0.5);
        let overlap = bin.iter().filter(|p| human.contains(p)).count();
        let denom = match denominator {
            RatioDenominator::Attribution => bin.len(),
            RatioDenominator::Mask => human.len(),
            RatioDenominator::Union => bin.len() + human.len() - overlap,
        };
        if denom == 0 {
            skipped += 1;
            continue;
        }
        total += overlap as f64 / denom as f64;
        evaluated += 1;
    }
    let percent = if evaluated > 0 { 100.0 * total / evaluated as f64 } else { 0.0 };
    Ok(HumanRatioOutcome { percent, evaluated, skipped })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DbiOutcome {
    pub index: f64,
    /// Class pairs whose centroid distance fell under the guard.
    pub degenerate_pairs: usize,
}

/// Davies-Bouldin index with Euclidean distances: mean over classes of the
/// worst (s_i + s_j) / d_ij. Lower is better. Centroid pairs closer than
/// 1e-12 make the index infinite and are counted as degenerate.
pub fn davies_bouldin(features: &[Vec<f64>], labels: &[usize]) -> Result<DbiOutcome> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(HctError::InvalidArgument(format!(
            "davies_bouldin needs matched non-empty inputs, got {}/{}",
            features.len(),
            labels.len()
        )));
    }
    let n_cls = labels.iter().max().unwrap() + 1;
    let dim = features[0].len();
    let mut counts = vec![0usize; n_cls];
    let mut centroids = vec![vec![0.0; dim]; n_cls];
    for (f, &l) in features.iter().zip(labels) {
        counts[l] += 1;
        for (c, v) in centroids[l].iter_mut().zip(f) {
            *c += v;
        }
    }
    let classes: Vec<usize> = (0..n_cls).filter(|&c| counts[c] > 0).collect();
    if classes.len() < 2 {
        return Err(HctError::InvalidArgument("davies_bouldin needs at least two classes".into()));
    }
    for &c in &classes {
        for v in centroids[c].iter_mut() {
            *v /= counts[c] as f64;
        }
    }
    let mut scatter = vec![0.0; n_cls];
    for (f, &l) in features.iter().zip(labels) {
        scatter[l] += dist(f, &centroids[l]);
    }
    for &c in &classes {
        scatter[c] /= counts[c] as f64;
    }

    let mut degenerate_pairs = 0usize;
    let mut sum = 0.0;
    for &i in &classes {
        let mut worst: f64 = 0.0;
        for &j in &classes {
            if i == j {
                continue;
            }
            let d_ij = dist(&centroids[i], &centroids[j]);
            if d_ij < 1e-12 {
                degenerate_pairs += 1;
                worst = f64::INFINITY;
                continue;
            }
            worst = worst.max((scatter[i] + scatter[j]) / d_ij);
        }
        sum += worst;
    }
    Ok(DbiOutcome { index: sum / classes.len() as f64, degenerate_pairs })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Model-level evaluation plumbing
// ---------------------------------------------------------------------------

/// Predictions over a prepared split; per-video tapes run in parallel.
pub fn predict_all(model: &ModelState, prepared: &[PreparedVideo]) -> Result<Vec<usize>> {
    prepared
        .par_iter()
        .map(|pv| model.predict(pv).map(|(label, _)| label))
        .collect()
}

/// The variant's video-level feature before its classifier, for feature-
/// distribution analysis.
pub fn video_feature(model: &ModelState, pv: &PreparedVideo) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let bd = Binder::new(&tape);
    let clips: Vec<DiffArray> = pv
        .clips_flat
        .iter()
        .map(|c| tape.constant(c.clone()))
        .collect::<Result<_>>()?;
    let plan = TrnPlan::eval(model.config.m)?;
    let bank = model.bank_tokens(&tape, pv.domain)?;
    let needs = StreamNeeds::for_variant(&model.config);
    let out = model.forward_prepared(&bd, &clips, pv, &plan, bank.as_ref(), needs)?;
    let feat = match model.config.variant {
        Variant::Full => out.hc_pooled.unwrap().data().to_vec(),
        Variant::HmEncOnly => out.human.unwrap().pooled.data().to_vec(),
        Variant::CtxEncOnly => out.ctx_pooled.unwrap().data().to_vec(),
        Variant::Backbone => out.backbone_pooled.unwrap().data().to_vec(),
        Variant::LateFusion => {
            let mut v = out.human.unwrap().pooled.data().to_vec();
            v.extend_from_slice(out.ctx_pooled.unwrap().data());
            v
        }
    };
    Ok(feat)
}

pub fn video_features_all(model: &ModelState, prepared: &[PreparedVideo]) -> Result<Vec<Vec<f64>>> {
    prepared.par_iter().map(|pv| video_feature(model, pv)).collect()
}

/// Load the withheld target labels. This is the only sanctioned reader of
/// the evaluation-label file.
pub fn load_eval_labels(path: &std::path::Path) -> Result<Vec<usize>> {
    let file = crate::synthbench::read_eval_labels_unchecked(path)?;
    if file.domain != crate::synthbench::Domain::Target {
        return Err(HctError::Format {
            path: path.display().to_string(),
            detail: "evaluation labels must belong to the target domain".into(),
        });
    }
    Ok(file.labels)
}

/// Metrics for one run, serialized as JSON and CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy_source: Option<f64>,
    pub accuracy_target: Option<f64>,
    pub human_ratio_percent: Option<f64>,
    pub human_ratio_skipped: Option<usize>,
    pub davies_bouldin_target: Option<f64>,
}

impl MetricsReport {
    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| HctError::Format { path: path.display().to_string(), detail: e.to_string() })?;
        std::fs::write(path, json).map_err(|e| HctError::io(path.display().to_string(), e))
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::from("metric,value\n");
        let mut push = |name: &str, v: Option<f64>| {
            if let Some(v) = v {
                out.push_str(&format!("{},{}\n", name, v));
            }
        };
        push("accuracy_source", self.accuracy_source);
        push("accuracy_target", self.accuracy_target);
        push("human_ratio_percent", self.human_ratio_percent);
        push("human_ratio_skipped", self.human_ratio_skipped.map(|v| v as f64));
        push("davies_bouldin_target", self.davies_bouldin_target);
        std::fs::write(path, out).map_err(|e| HctError::io(path.display().to_string(), e))
    }
}
