//! Spatial masking: split each clip-level feature map into human and
//! non-human context position sets by thresholding a human mask, with
//! per-clip maxpool and dataset-average fallbacks when a clip detects no
//! humans.

use crate::array::Array;
use crate::error::{HctError, Result};

/// Which rule produced the effective mask for a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    Provided,
    MaxpoolFallback,
    DatasetAverageFallback,
}

/// Per-position probability of visible humans, at feature-map resolution.
#[derive(Clone, Debug)]
pub struct HumanMask {
    grid: Array,
    source: MaskSource,
}

impl HumanMask {
    /// An H×W grid of probabilities in [0, 1].
    pub fn new(grid: Array) -> Result<Self> {
        if grid.shape().len() != 2 {
            return Err(HctError::ShapeMismatch {
                op: "HumanMask::new".into(),
                detail: format!("expected an H x W grid, got {:?}", grid.shape()),
            });
        }
        if grid.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(HctError::InvalidArgument("mask entries must lie in [0, 1]".into()));
        }
        Ok(HumanMask { grid, source: MaskSource::Provided })
    }

    pub fn grid(&self) -> &Array {
        &self.grid
    }

    pub fn source(&self) -> MaskSource {
        self.source
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    /// Positions at or above the threshold, in row-major order.
    pub fn positions_at_or_above(&self, threshold: f64) -> Vec<(usize, usize)> {
        let (h, w) = (self.height(), self.width());
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if self.grid.at(r, c) >= threshold {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

/// Disjoint, exhaustive split of the H·W positions of one clip into a human
/// set and a context set. Feature vectors are plain copies; the
/// differentiable path re-gathers positions through selection matrices.
#[derive(Clone, Debug)]
pub struct ClipPartition {
    pub human_set: Vec<((usize, usize), Vec<f64>)>,
    pub context_set: Vec<((usize, usize), Vec<f64>)>,
}

impl ClipPartition {
    pub fn human_positions(&self) -> Vec<(usize, usize)> {
        self.human_set.iter().map(|(p, _)| *p).collect()
    }

    pub fn context_positions(&self) -> Vec<(usize, usize)> {
        self.context_set.iter().map(|(p, _)| *p).collect()
    }
}

/// Partition an H×W×D feature map by thresholding the mask: a position is
/// human iff its mask value is >= the threshold, context otherwise.
pub fn partition(features: &Array, mask: &HumanMask, threshold: f64) -> Result<ClipPartition> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(HctError::InvalidArgument(format!(
            "mask threshold must lie in (0, 1), got {}",
            threshold
        )));
    }
    if features.shape().len() != 3 {
        return Err(HctError::ShapeMismatch {
            op: "masking::partition".into(),
            detail: format!("expected H x W x D features, got {:?}", features.shape()),
        });
    }
    let (h, w, d) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    if mask.height() != h || mask.width() != w {
        return Err(HctError::ShapeMismatch {
            op: "masking::partition".into(),
            detail: format!("mask {}x{} vs features {}x{}", mask.height(), mask.width(), h, w),
        });
    }
    let mut human_set = Vec::new();
    let mut context_set = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let base = (r * w + c) * d;
            let vec = features.data()[base..base + d].to_vec();
            if mask.grid.at(r, c) >= threshold {
                human_set.push(((r, c), vec));
            } else {
                context_set.push(((r, c), vec));
            }
        }
    }
    Ok(ClipPartition { human_set, context_set })
}

/// Elementwise mean of masks, used as the dataset-average fallback. Computed
/// over the training split of the mask's own domain.
pub fn dataset_average(masks: &[HumanMask]) -> Result<HumanMask> {
    let first = masks
        .first()
        .ok_or_else(|| HctError::InvalidArgument("dataset_average of zero masks".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut acc = vec![0.0; h * w];
    for m in masks {
        if m.height() != h || m.width() != w {
            return Err(HctError::ShapeMismatch {
                op: "masking::dataset_average".into(),
                detail: format!("{}x{} vs {}x{}", m.height(), m.width(), h, w),
            });
        }
        for (a, v) in acc.iter_mut().zip(m.grid.data()) {
            *a += v;
        }
    }
    let n = masks.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    HumanMask::new(Array::new(vec![h, w], acc)?)
}

/// Resolve the effective mask for each clip of one video. A clip whose own
/// mask yields an empty human set at the threshold uses the elementwise max
/// over the video's clips; if every clip is empty, all clips use the
/// dataset average. The source field records which rule fired.
pub fn fallback_mask(
    clip_masks: &[HumanMask],
    dataset_avg: &HumanMask,
    threshold: f64,
) -> Result<Vec<HumanMask>> {
    let first = clip_masks
        .first()
        .ok_or_else(|| HctError::InvalidArgument("fallback_mask with an empty clip list".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut maxpooled = vec![f64::NEG_INFINITY; h * w];
    let mut any_nonempty = false;
    for m in clip_masks {
        if m.height() != h || m.width() != w {
            return Err(HctError::ShapeMismatch {
                op: "masking::fallback_mask".into(),
                detail: format!("{}x{} vs {}x{}", m.height(), m.width(), h, w),
            });
        }
        if m.grid.data().iter().any(|&v| v >= threshold) {
            any_nonempty = true;
        }
        for (a, v) in maxpooled.iter_mut().zip(m.grid.data()) {
            *a = a.max(*v);
        }
    }
    if !any_nonempty {
        let grid = dataset_avg.grid.clone();
        return Ok(clip_masks
            .iter()
            .map(|_| HumanMask { grid: grid.clone(), source: MaskSource::DatasetAverageFallback })
            .collect());
    }
    let max_mask = Array::new(vec![h, w], maxpooled)?;
    Ok(clip_masks
        .iter()
        .map(|m| {
            if m.grid.data().iter().any(|&v| v >= threshold) {
                m.clone()
            } else {
                HumanMask { grid: max_mask.clone(), source: MaskSource::MaxpoolFallback }
            }
        })
        .collect())
}
