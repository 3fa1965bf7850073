//! Deterministic two-domain synthetic benchmark.
//!
//! Each video is M clip-level H×W×D feature maps plus a planted human mask.
//! The human region encodes the class as a latent direction rotating with a
//! class-specific per-clip phase, so the label is recoverable only by
//! modeling the trajectory across clips. Context positions mix a "tool"
//! component tied to the action identically in both domains with a "scene"
//! component whose scene-to-action mapping holds in the source domain but is
//! derangement-remapped in the target, which makes scene reliance fail to
//! transfer. All randomness comes from per-video counter-based streams.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{HctError, Result};
use crate::masking::HumanMask;
use crate::streams::{derived_rng, next_gaussian, stream_id};

mod format;
pub mod oracle;

pub use format::{read_dataset, read_eval_labels_unchecked, write_dataset, write_eval_labels};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Wire value: 0 = source, 1 = target.
    pub fn label(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

/// Size of the planted human rectangle; its position varies per video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub n_cls: usize,
    /// Clips per video.
    pub m: usize,
    pub h: usize,
    pub w: usize,
    /// Feature dimension.
    pub d: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub human_region: RegionSpec,
    /// Additive Gaussian noise scale.
    pub sigma: f64,
    /// Probability that a source video's scene follows the source mapping.
    pub rho_source: f64,
    /// Probability that a target video's scene follows the deranged mapping.
    pub rho_target: f64,
    /// Fraction of the context signal carried by the domain-stable tool
    /// component; the rest is the scene component.
    pub shared_context_fraction: f64,
    pub human_amplitude: f64,
    pub context_amplitude: f64,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            n_cls: 6,
            m: 5,
            h: 4,
            w: 4,
            d: 32,
            n_source: 600,
            n_target: 600,
            human_region: RegionSpec { height: 2, width: 2 },
            sigma: 0.3,
            rho_source: 1.0,
            rho_target: 0.0,
            shared_context_fraction: 0.4,
            human_amplitude: 3.0,
            context_amplitude: 2.0,
            seed: 17,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_cls < 2 {
            return Err(HctError::InvalidArgument("n_cls must be at least 2".into()));
        }
        if self.m < 2 {
            return Err(HctError::InvalidArgument("m must be at least 2".into()));
        }
        if self.h == 0 || self.w == 0 || self.d == 0 {
            return Err(HctError::InvalidArgument("h, w, d must be positive".into()));
        }
        if self.human_region.height == 0
            || self.human_region.width == 0
            || self.human_region.height > self.h
            || self.human_region.width > self.w
        {
            return Err(HctError::InvalidArgument(format!(
                "human region {}x{} does not fit the {}x{} grid",
                self.human_region.height, self.human_region.width, self.h, self.w
            )));
        }
        if self.human_region.height == self.h && self.human_region.width == self.w {
            return Err(HctError::InvalidArgument("human region must leave context positions".into()));
        }
        for (name, v) in [("rho_source", self.rho_source), ("rho_target", self.rho_target)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(HctError::InvalidArgument(format!("{} must lie in [0, 1], got {}", name, v)));
            }
        }
        if !(0.0..=1.0).contains(&self.shared_context_fraction) {
            return Err(HctError::InvalidArgument("shared_context_fraction must lie in [0, 1]".into()));
        }
        if self.sigma < 0.0 {
            return Err(HctError::InvalidArgument("sigma must be nonnegative".into()));
        }
        if self.n_source == 0 || self.n_target == 0 {
            return Err(HctError::InvalidArgument("both splits need at least one video".into()));
        }
        Ok(())
    }

    /// The target domain's scene-to-action derangement.
    pub fn derangement(&self, class: usize) -> usize {
        (class + 1) % self.n_cls
    }
}

/// One video: M clip-level feature maps, per-clip ground-truth masks, the
/// class label (absent when withheld) and the domain tag.
#[derive(Clone, Debug)]
pub struct VideoRecord {
    pub clips: Vec<Array>,
    pub masks: Vec<HumanMask>,
    pub label: Option<usize>,
    pub domain: Domain,
}

/// Generation metadata exposed for benchmark validation.
#[derive(Clone, Copy, Debug)]
pub struct GenMeta {
    pub label: usize,
    pub scene: usize,
    pub region_origin: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub domain: Domain,
    pub videos: Vec<VideoRecord>,
}

pub struct GeneratedBench {
    pub source: Dataset,
    pub target: Dataset,
    /// Held-out target labels, for evaluation only.
    pub target_labels: Vec<usize>,
}

/// The latent directions shared by both domains, derived from the seed.
#[derive(Clone, Debug)]
pub struct SignalBank {
    /// Orthonormal pair spanning the human trajectory plane.
    pub plane_a: Vec<f64>,
    pub plane_b: Vec<f64>,
    /// Per-class angular velocity of the human direction, radians per clip.
    pub omega: Vec<f64>,
    /// Domain-stable tool direction per class.
    pub tools: Vec<Vec<f64>>,
    /// Scene direction per scene type.
    pub scenes: Vec<Vec<f64>>,
}

impl SignalBank {
    pub fn derive(spec: &BenchSpec) -> Self {
        let mut rng = derived_rng(spec.seed, 0x5157);
        let unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let v: Vec<f64> = (0..spec.d).map(|_| next_gaussian(rng)).collect();
            normalize(v)
        };
        let plane_a = unit(&mut rng);
        let raw_b: Vec<f64> = (0..spec.d).map(|_| next_gaussian(&mut rng)).collect();
        let dot: f64 = plane_a.iter().zip(&raw_b).map(|(a, b)| a * b).sum();
        let plane_b = normalize(raw_b.iter().zip(&plane_a).map(|(b, a)| b - dot * a).collect());
        let omega = (0..spec.n_cls)
            .map(|c| std::f64::consts::PI * (c + 1) as f64 / spec.n_cls as f64)
            .collect();
        let tools = (0..spec.n_cls).map(|_| unit(&mut rng)).collect();
        let scenes = (0..spec.n_cls).map(|_| unit(&mut rng)).collect();
        SignalBank { plane_a, plane_b, omega, tools, scenes }
    }

    /// Noiseless human direction for class `c` at clip `i`, unit norm.
    pub fn human_direction(&self, class: usize, clip: usize) -> Vec<f64> {
        let angle = self.omega[class] * clip as f64;
        let (s, c) = angle.sin_cos();
        self.plane_a
            .iter()
            .zip(&self.plane_b)
            .map(|(a, b)| c * a + s * b)
            .collect()
    }
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// The scene type for one video: with probability rho the domain's mapping
/// applies (identity in source, derangement in target), otherwise uniform.
pub fn sample_scene(spec: &BenchSpec, domain: Domain, label: usize, rng: &mut ChaCha8Rng) -> usize {
    let (rho, mapped) = match domain {
        Domain::Source => (spec.rho_source, label),
        Domain::Target => (spec.rho_target, spec.derangement(label)),
    };
    if rng.gen::<f64>() < rho {
        mapped
    } else {
        rng.gen_range(0..spec.n_cls)
    }
}

/// Generate one video from its own counter-based stream.
pub fn generate_video(
    spec: &BenchSpec,
    bank: &SignalBank,
    domain: Domain,
    index: usize,
) -> (VideoRecord, GenMeta) {
    let stream_base = match domain {
        Domain::Source => stream_id::GEN_SOURCE,
        Domain::Target => stream_id::GEN_TARGET,
    };
    let mut rng = derived_rng(spec.seed, stream_base + index as u64);
    let label = index % spec.n_cls;
    let r0 = rng.gen_range(0..=spec.h - spec.human_region.height);
    let c0 = rng.gen_range(0..=spec.w - spec.human_region.width);
    let scene = sample_scene(spec, domain, label, &mut rng);

    let in_region =
        |r: usize, c: usize| r >= r0 && r < r0 + spec.human_region.height && c >= c0 && c < c0 + spec.human_region.width;

    let tool = &bank.tools[label];
    let scene_dir = &bank.scenes[scene];
    let ctx_base: Vec<f64> = tool
        .iter()
        .zip(scene_dir)
        .map(|(t, s)| {
            spec.context_amplitude
                * (spec.shared_context_fraction * t + (1.0 - spec.shared_context_fraction) * s)
        })
        .collect();

    let mut clips = Vec::with_capacity(spec.m);
    let mut masks = Vec::with_capacity(spec.m);
    for clip in 0..spec.m {
        let human_dir = bank.human_direction(label, clip);
        let mut data = Vec::with_capacity(spec.h * spec.w * spec.d);
        let mut mask = Vec::with_capacity(spec.h * spec.w);
        for r in 0..spec.h {
            for c in 0..spec.w {
                let human = in_region(r, c);
                mask.push(if human { 1.0 } else { 0.0 });
                for dd in 0..spec.d {
                    let base = if human {
                        spec.human_amplitude * human_dir[dd]
                    } else {
                        ctx_base[dd]
                    };
                    data.push(base + spec.sigma * next_gaussian(&mut rng));
                }
            }
        }
        clips.push(Array::new(vec![spec.h, spec.w, spec.d], data).expect("clip shape"));
        masks.push(HumanMask::new(Array::new(vec![spec.h, spec.w], mask).expect("mask shape")).expect("mask range"));
    }
    let record = VideoRecord { clips, masks, label: Some(label), domain };
    (record, GenMeta { label, scene, region_origin: (r0, c0) })
}

/// Generate both splits. The target split's records carry no labels; the
/// held-out labels are returned separately for evaluation-only use.
pub fn generate_dataset(spec: &BenchSpec) -> Result<GeneratedBench> {
    spec.validate()?;
    let bank = SignalBank::derive(spec);
    let source_videos: Vec<VideoRecord> = (0..spec.n_source)
        .into_par_iter()
        .map(|i| generate_video(spec, &bank, Domain::Source, i).0)
        .collect();
    let mut target_videos: Vec<VideoRecord> = (0..spec.n_target)
        .into_par_iter()
        .map(|i| generate_video(spec, &bank, Domain::Target, i).0)
        .collect();
    let target_labels: Vec<usize> = target_videos
        .iter_mut()
        .map(|v| v.label.take().expect("generated label"))
        .collect();
    Ok(GeneratedBench {
        source: Dataset { domain: Domain::Source, videos: source_videos },
        target: Dataset { domain: Domain::Target, videos: target_videos },
        target_labels,
    })
}
