//! The assembled model: configuration, parameter state, the per-video
//! forward pipeline, loss composition and inference.

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::context_encoder::{context_alignment_loss, ContextEncoder};
use crate::diff::{DiffArray, Tape};
use crate::error::{HctError, Result};
use crate::hc_decoder::{hc_alignment_loss, HcDecoder};
use crate::human_encoder::{human_encoder_loss, HumanEncoder, HumanForward, HumanLossItem, TrnPlan};
use crate::masking::{fallback_mask, HumanMask};
use crate::nn::{AffineParams, Binder, MlpParams, ParamVisitor, ParamVisitorMut};
use crate::prototypes::PrototypeBank;
use crate::streams::{derived_rng, stream_id};
use crate::synthbench::{Domain, VideoRecord};

use super::TrainConfig;

/// Model wiring. `Full` is the complete pipeline; the others realize the
/// ablation rows: classifier-on-pooled-features baseline, human encoder
/// alone, context encoder alone, and the two encoders fused at the
/// probability level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Backbone,
    HmEncOnly,
    CtxEncOnly,
    LateFusion,
    Full,
}

/// Number of context prototypes: fixed, or twice the class count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeCount {
    Fixed(usize),
    TwoNcls,
}

impl PrototypeCount {
    pub fn resolve(self, n_cls: usize) -> usize {
        match self {
            PrototypeCount::Fixed(k) => k,
            PrototypeCount::TwoNcls => 2 * n_cls,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub m: usize,
    pub d: usize,
    pub d_v: usize,
    pub n_cls: usize,
    pub k: PrototypeCount,
    pub l_e: usize,
    pub l_d: usize,
    /// Mask threshold for the human/context partition.
    pub lambda_m: f64,
    pub variant: Variant,
    /// Drop the prototype stream from the context encoder.
    pub no_prototypes: bool,
    /// Feed every position to both encoders instead of partitioning.
    pub no_masking: bool,
    /// Give the prototype stream its own attention parameters instead of
    /// sharing the clip stream's.
    pub separate_prototype_stream: bool,
    /// Add self-attention among the decoder's granularity queries.
    pub decoder_self_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            m: 5,
            d: 32,
            d_v: 16,
            n_cls: 6,
            k: PrototypeCount::TwoNcls,
            l_e: 2,
            l_d: 2,
            lambda_m: 0.5,
            variant: Variant::Full,
            no_prototypes: false,
            no_masking: false,
            separate_prototype_stream: false,
            decoder_self_attention: false,
        }
    }
}

impl ModelConfig {
    pub fn k_resolved(&self) -> usize {
        self.k.resolve(self.n_cls)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(HctError::InvalidArgument("m must be at least 2".into()));
        }
        if self.l_e == 0 || self.l_d == 0 {
            return Err(HctError::InvalidArgument("l_e and l_d must be positive".into()));
        }
        if !(self.lambda_m > 0.0 && self.lambda_m < 1.0) {
            return Err(HctError::InvalidArgument(format!(
                "lambda_m must lie in (0, 1), got {}",
                self.lambda_m
            )));
        }
        if self.k_resolved() == 0 {
            return Err(HctError::InvalidArgument("prototype count must be positive".into()));
        }
        Ok(())
    }

    fn uses_human_stream(&self) -> bool {
        matches!(self.variant, Variant::HmEncOnly | Variant::LateFusion | Variant::Full)
    }

    fn uses_context_stream(&self) -> bool {
        matches!(self.variant, Variant::CtxEncOnly | Variant::LateFusion | Variant::Full)
    }

    fn uses_prototypes(&self) -> bool {
        self.uses_context_stream() && !self.no_prototypes
    }
}

/// Video-level head: action classifier plus one domain discriminator.
#[derive(Clone, Debug)]
pub struct VideoHead {
    pub classifier: AffineParams,
    pub disc: MlpParams,
}

/// Pooled-feature baseline head on the raw feature dimension.
#[derive(Clone, Debug)]
pub struct BackboneHead {
    pub classifier: AffineParams,
    pub disc: MlpParams,
}

#[derive(Clone, Debug)]
pub struct Banks {
    pub source: PrototypeBank,
    pub target: PrototypeBank,
}

impl Banks {
    pub fn for_domain(&self, domain: Domain) -> &PrototypeBank {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }
}

/// All learnable parameters plus prototype banks and config snapshots.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub human_encoder: HumanEncoder,
    pub context_encoder: ContextEncoder,
    pub decoder: HcDecoder,
    pub video_head: VideoHead,
    pub backbone_head: BackboneHead,
    pub banks: Option<Banks>,
    /// Training configuration used to produce this state, for the manifest.
    pub train_snapshot: Option<TrainConfig>,
}

impl ModelState {
    /// Initialize every component from the seed's parameter stream, so a
    /// state is fully determined by (config, seed).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = derived_rng(seed, stream_id::PARAM_INIT);
        let ModelConfig { m, d, d_v, n_cls, l_e, l_d, .. } = config;
        let human_encoder = HumanEncoder::init(m, d, d_v, n_cls, &mut rng);
        let context_encoder = ContextEncoder::init(
            m,
            d,
            d_v,
            l_e,
            !config.no_prototypes,
            config.separate_prototype_stream,
            &mut rng,
        );
        let decoder = HcDecoder::init(m, d_v, l_d, config.decoder_self_attention, &mut rng);
        let video_head = VideoHead {
            classifier: AffineParams::init(d_v, n_cls, &mut rng),
            disc: MlpParams::init(d_v, d_v, 2, &mut rng),
        };
        let backbone_head = BackboneHead {
            classifier: AffineParams::init(d, n_cls, &mut rng),
            disc: MlpParams::init(d, d_v, 2, &mut rng),
        };
        Ok(ModelState {
            config,
            human_encoder,
            context_encoder,
            decoder,
            video_head,
            backbone_head,
            banks: None,
            train_snapshot: None,
        })
    }

    /// Domain discriminators wired into the full pipeline.
    pub fn discriminator_count(&self) -> usize {
        self.human_encoder.trn_discs.len()
            + self.human_encoder.proj_discs.len()
            + self.context_encoder.discs.len()
            + self.decoder.discriminator_count()
            + 1
    }

    pub fn visit<'a>(&'a self, f: &mut ParamVisitor<'a, '_>) {
        self.human_encoder.visit(f);
        self.context_encoder.visit(f);
        self.decoder.visit(f);
        self.video_head.classifier.visit("video.cls", f);
        self.video_head.disc.visit("video.disc", f);
        self.backbone_head.classifier.visit("bb.cls", f);
        self.backbone_head.disc.visit("bb.disc", f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut ParamVisitorMut<'a, '_>) {
        self.human_encoder.visit_mut(f);
        self.context_encoder.visit_mut(f);
        self.decoder.visit_mut(f);
        self.video_head.classifier.visit_mut("video.cls", f);
        self.video_head.disc.visit_mut("video.disc", f);
        self.backbone_head.classifier.visit_mut("bb.cls", f);
        self.backbone_head.disc.visit_mut("bb.disc", f);
    }

    /// Serialized view of every named tensor, sorted by name.
    pub fn named_params(&self) -> Vec<(String, &Array)> {
        let mut out: Vec<(String, &Array)> = Vec::new();
        self.visit(&mut |name, arr| out.push((name, arr)));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

// ---------------------------------------------------------------------------
// Per-video preparation: flatten clips, resolve mask fallbacks, and bake the
// partition into selection matrices so every training step reuses them.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PreparedVideo {
    /// M flattened clips, each [H*W, D].
    pub clips_flat: Vec<Array>,
    /// Per clip, the [n_h, H*W] row-selection matrix over human positions.
    pub human_sel: Vec<Array>,
    /// Per clip, a [1, H*W] averaging row over context positions (absent for
    /// all-human clips).
    pub ctx_mean_sel: Vec<Option<Array>>,
    /// Per clip, the flat indices of the context positions.
    pub ctx_positions: Vec<Vec<usize>>,
    pub label: Option<usize>,
    pub domain: Domain,
}

/// Resolve fallbacks and bake the partition for one video.
pub fn prepare_video(
    video: &VideoRecord,
    dataset_avg_mask: &HumanMask,
    config: &ModelConfig,
) -> Result<PreparedVideo> {
    let m = video.clips.len();
    if m != config.m {
        return Err(HctError::ShapeMismatch {
            op: "prepare_video".into(),
            detail: format!("video has {} clips, model expects {}", m, config.m),
        });
    }
    let (h, w) = (video.clips[0].shape()[0], video.clips[0].shape()[1]);
    let hw = h * w;
    let clips_flat: Vec<Array> = video
        .clips
        .iter()
        .map(|c| c.clone().reshaped(vec![hw, c.shape()[2]]))
        .collect::<Result<_>>()?;

    let (human_positions, ctx_positions): (Vec<Vec<usize>>, Vec<Vec<usize>>) = if config.no_masking {
        let all: Vec<usize> = (0..hw).collect();
        (vec![all.clone(); m], vec![all; m])
    } else {
        let effective = fallback_mask(&video.masks, dataset_avg_mask, config.lambda_m)?;
        let mut humans = Vec::with_capacity(m);
        let mut ctxs = Vec::with_capacity(m);
        for mask in &effective {
            let mut hpos = Vec::new();
            let mut cpos = Vec::new();
            for r in 0..h {
                for c in 0..w {
                    if mask.grid().at(r, c) >= config.lambda_m {
                        hpos.push(r * w + c);
                    } else {
                        cpos.push(r * w + c);
                    }
                }
            }
            if hpos.is_empty() {
                return Err(HctError::Contract(
                    "clip still has an empty human set after mask fallbacks".into(),
                ));
            }
            humans.push(hpos);
            ctxs.push(cpos);
        }
        (humans, ctxs)
    };

    let human_sel = human_positions
        .iter()
        .map(|pos| {
            let mut data = vec![0.0; pos.len() * hw];
            for (row, &p) in pos.iter().enumerate() {
                data[row * hw + p] = 1.0;
            }
            Array::new(vec![pos.len(), hw], data)
        })
        .collect::<Result<_>>()?;
    let ctx_mean_sel = ctx_positions
        .iter()
        .map(|pos| {
            if pos.is_empty() {
                return Ok(None);
            }
            let mut data = vec![0.0; hw];
            for &p in pos {
                data[p] = 1.0 / pos.len() as f64;
            }
            Ok(Some(Array::new(vec![1, hw], data)?))
        })
        .collect::<Result<_>>()?;

    Ok(PreparedVideo {
        clips_flat,
        human_sel,
        ctx_mean_sel,
        ctx_positions,
        label: video.label,
        domain: video.domain,
    })
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Which streams a forward pass must produce.
#[derive(Clone, Copy, Debug, Default)]
pub struct StreamNeeds {
    pub human: bool,
    pub context: bool,
    pub decoder: bool,
    pub backbone: bool,
}

impl StreamNeeds {
    pub fn for_variant(config: &ModelConfig) -> Self {
        StreamNeeds {
            human: config.uses_human_stream(),
            context: config.uses_context_stream(),
            decoder: config.variant == Variant::Full,
            backbone: config.variant == Variant::Backbone,
        }
    }
}

/// One video's tape-level outputs.
pub struct VideoOutputs {
    pub human: Option<HumanForward>,
    /// Per-layer clip tokens of the context encoder; last is Z^ctx.
    pub ctx_layers: Option<Vec<DiffArray>>,
    /// Mean over Z^ctx rows, [D_v].
    pub ctx_pooled: Option<DiffArray>,
    /// Per decoder layer, the [(M-1), D_v] interaction features.
    pub dec_layers: Option<Vec<DiffArray>>,
    /// Mean over the final decoder rows, [D_v].
    pub hc_pooled: Option<DiffArray>,
    /// Mean over every position of every clip, [D].
    pub backbone_pooled: Option<DiffArray>,
}

impl ModelState {
    /// Forward one prepared video whose flattened clips are already on the
    /// tape (as constants during training, or leaves for attribution and
    /// gradient checks).
    pub fn forward_prepared(
        &self,
        bd: &Binder,
        clips_flat: &[DiffArray],
        pv: &PreparedVideo,
        plan: &TrnPlan,
        bank_tokens: Option<&DiffArray>,
        needs: StreamNeeds,
    ) -> Result<VideoOutputs> {
        let tape = bd.tape();
        let m = self.config.m;

        let human = if needs.human {
            let mut clip_feats = Vec::with_capacity(m);
            for (clip, sel) in clips_flat.iter().zip(&pv.human_sel) {
                let sel = tape.constant(sel.clone())?;
                clip_feats.push(tape.matmul(&sel, clip)?);
            }
            Some(self.human_encoder.encode(bd, &clip_feats, plan)?)
        } else {
            None
        };

        let (ctx_layers, ctx_pooled) = if needs.context {
            let mut means = Vec::with_capacity(m);
            for (clip, sel) in clips_flat.iter().zip(&pv.ctx_mean_sel) {
                match sel {
                    Some(sel) => {
                        let sel = tape.constant(sel.clone())?;
                        let mean = tape.matmul(&sel, clip)?;
                        let d = mean.shape()[1];
                        means.push(Some(tape.reshape(&mean, vec![d])?));
                    }
                    None => means.push(None),
                }
            }
            let (z0, c0) = self.context_encoder.context_inputs(bd, &means, bank_tokens)?;
            let (layers, _) = self.context_encoder.encode(bd, z0, c0)?;
            let pooled = tape.mean_pool(layers.last().expect("l_e >= 1"), 0)?;
            (Some(layers), Some(pooled))
        } else {
            (None, None)
        };

        let (dec_layers, hc_pooled) = if needs.decoder {
            let z_hm = &human.as_ref().expect("decoder needs the human stream").z;
            let z_ctx = ctx_layers.as_ref().expect("decoder needs the context stream").last().unwrap();
            let layers = self.decoder.decode(bd, z_hm, z_ctx)?;
            let pooled = tape.mean_pool(layers.last().unwrap(), 0)?;
            (Some(layers), Some(pooled))
        } else {
            (None, None)
        };

        let backbone_pooled = if needs.backbone {
            let refs: Vec<&DiffArray> = clips_flat.iter().collect();
            let stacked = tape.concat(0, &refs)?;
            Some(tape.mean_pool(&stacked, 0)?)
        } else {
            None
        };

        Ok(VideoOutputs { human, ctx_layers, ctx_pooled, dec_layers, hc_pooled, backbone_pooled })
    }

    /// Register the prototype bank for a domain on the tape (prototypes are
    /// constants; their projected embeddings stay learnable through Proj).
    pub fn bank_tokens(&self, tape: &Tape, domain: Domain) -> Result<Option<DiffArray>> {
        if !self.config.uses_prototypes() {
            return Ok(None);
        }
        let banks = self
            .banks
            .as_ref()
            .ok_or_else(|| HctError::Contract("prototype banks are not built yet".into()))?;
        Ok(Some(tape.constant(banks.for_domain(domain).prototypes.clone())?))
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

pub struct BatchItem {
    pub outputs: VideoOutputs,
    pub label: Option<usize>,
    pub domain: Domain,
}

/// Term breakdown of the overall objective; the four entries sum to the
/// total exactly.
pub struct BatchLoss {
    pub total: DiffArray,
    pub hm: DiffArray,
    pub ctx: DiffArray,
    pub hc: DiffArray,
    pub video: DiffArray,
}

/// Mean source classification over a head plus weighted domain alignment
/// over every video, on some per-video pooled feature.
fn head_loss(
    bd: &Binder,
    name_cls: &str,
    classifier: &AffineParams,
    name_disc: &str,
    disc: &MlpParams,
    pooled: &[&DiffArray],
    labels: &[Option<usize>],
    domains: &[usize],
    lambda: f64,
    grl_coeff: f64,
) -> Result<(DiffArray, DiffArray, DiffArray)> {
    let tape = bd.tape();
    let src_rows: Vec<&DiffArray> = pooled
        .iter()
        .zip(labels)
        .filter_map(|(p, l)| l.map(|_| *p))
        .collect();
    let src_labels: Vec<usize> = labels.iter().flatten().copied().collect();
    let classification = if src_rows.is_empty() {
        tape.zero_scalar()?
    } else {
        let logits = classifier.forward(bd, name_cls, &tape.stack_rows(&src_rows)?)?;
        tape.cross_entropy(&logits, &src_labels)?
    };
    let all = tape.stack_rows(pooled)?;
    let align = crate::nn::domain_loss(disc, bd, name_disc, &all, domains, grl_coeff)?;
    let align = tape.scale(&align, lambda)?;
    let total = tape.add(&classification, &align)?;
    Ok((total, classification, align))
}

impl ModelState {
    /// Video-level loss on the pooled interaction features H(Z^hc):
    /// source-only classification plus lambda_H-weighted domain alignment
    /// through gradient reversal.
    pub fn video_loss(
        &self,
        bd: &Binder,
        pooled: &[&DiffArray],
        labels: &[Option<usize>],
        domains: &[usize],
        lambda_h: f64,
        grl_coeff: f64,
    ) -> Result<DiffArray> {
        for (l, d) in labels.iter().zip(domains) {
            if *d == 1 && l.is_some() {
                return Err(HctError::Contract("label provided for a target-tagged sample".into()));
            }
        }
        let (total, _, _) = head_loss(
            bd,
            "video.cls",
            &self.video_head.classifier,
            "video.disc",
            &self.video_head.disc,
            pooled,
            labels,
            domains,
            lambda_h,
            grl_coeff,
        )?;
        Ok(total)
    }

    /// The overall objective over a batch: the human-encoder term, the
    /// context-alignment term, the interaction-alignment term and the
    /// video-level term, each batched over the videos that carry the
    /// needed stream.
    pub fn total_loss(
        &self,
        bd: &Binder,
        items: &[BatchItem],
        cfg: &TrainConfig,
        grl_coeff: f64,
    ) -> Result<BatchLoss> {
        let tape = bd.tape();
        let domains: Vec<usize> = items.iter().map(|i| i.domain.label()).collect();
        let labels: Vec<Option<usize>> = items.iter().map(|i| i.label).collect();

        // Human-encoder term.
        let hm = if items.iter().all(|i| i.outputs.human.is_some()) && !items.is_empty() {
            let loss_items: Vec<HumanLossItem> = items
                .iter()
                .map(|i| HumanLossItem {
                    forward: i.outputs.human.as_ref().unwrap(),
                    label: i.label,
                    domain: i.domain.label(),
                })
                .collect();
            human_encoder_loss(bd, &self.human_encoder, &loss_items, cfg.lambda_hm, grl_coeff)?.total
        } else {
            tape.zero_scalar()?
        };

        // Context alignment: per layer, every clip token of every video.
        let ctx = if items.iter().all(|i| i.outputs.ctx_layers.is_some()) && !items.is_empty() {
            let l_e = self.config.l_e;
            let mut per_layer = Vec::with_capacity(l_e);
            let mut token_domains = Vec::new();
            for item in items {
                for _ in 0..self.config.m {
                    token_domains.push(item.domain.label());
                }
            }
            for l in 0..l_e {
                let parts: Vec<&DiffArray> = items
                    .iter()
                    .map(|i| &i.outputs.ctx_layers.as_ref().unwrap()[l])
                    .collect();
                per_layer.push(tape.concat(0, &parts)?);
            }
            context_alignment_loss(bd, &self.context_encoder, &per_layer, &token_domains, cfg.lambda_ctx, grl_coeff)?
        } else {
            tape.zero_scalar()?
        };

        // Interaction alignment: one discriminator per (layer, granularity).
        let hc = if items.iter().all(|i| i.outputs.dec_layers.is_some()) && !items.is_empty() {
            let (l_d, g_n) = (self.config.l_d, self.config.m - 1);
            let mut rows: Vec<Vec<DiffArray>> = Vec::with_capacity(l_d);
            for l in 0..l_d {
                let mut per_g = Vec::with_capacity(g_n);
                for g in 0..g_n {
                    let mut sel_row = vec![0.0; g_n];
                    sel_row[g] = 1.0;
                    let sel = tape.constant(Array::matrix(1, g_n, sel_row)?)?;
                    let picked: Vec<DiffArray> = items
                        .iter()
                        .map(|i| tape.matmul(&sel, &i.outputs.dec_layers.as_ref().unwrap()[l]))
                        .collect::<Result<_>>()?;
                    let refs: Vec<&DiffArray> = picked.iter().collect();
                    per_g.push(tape.concat(0, &refs)?);
                }
                rows.push(per_g);
            }
            hc_alignment_loss(bd, &self.decoder, &rows, &domains, cfg.lambda_hc, grl_coeff)?
        } else {
            tape.zero_scalar()?
        };

        // Video-level term on the variant's final pooled feature.
        let video = match self.config.variant {
            Variant::Full if !items.is_empty() && items.iter().all(|i| i.outputs.hc_pooled.is_some()) => {
                let pooled: Vec<&DiffArray> =
                    items.iter().map(|i| i.outputs.hc_pooled.as_ref().unwrap()).collect();
                self.video_loss(bd, &pooled, &labels, &domains, cfg.lambda_h, grl_coeff)?
            }
            Variant::CtxEncOnly | Variant::LateFusion
                if !items.is_empty() && items.iter().all(|i| i.outputs.ctx_pooled.is_some()) =>
            {
                let pooled: Vec<&DiffArray> =
                    items.iter().map(|i| i.outputs.ctx_pooled.as_ref().unwrap()).collect();
                self.video_loss(bd, &pooled, &labels, &domains, cfg.lambda_h, grl_coeff)?
            }
            Variant::Backbone
                if !items.is_empty() && items.iter().all(|i| i.outputs.backbone_pooled.is_some()) =>
            {
                let pooled: Vec<&DiffArray> =
                    items.iter().map(|i| i.outputs.backbone_pooled.as_ref().unwrap()).collect();
                let (total, _, _) = head_loss(
                    bd,
                    "bb.cls",
                    &self.backbone_head.classifier,
                    "bb.disc",
                    &self.backbone_head.disc,
                    &pooled,
                    &labels,
                    &domains,
                    cfg.lambda_h,
                    grl_coeff,
                )?;
                total
            }
            _ => tape.zero_scalar()?,
        };

        let total = tape.add(&tape.add(&tape.add(&hm, &ctx)?, &hc)?, &video)?;
        Ok(BatchLoss { total, hm, ctx, hc, video })
    }
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

fn softmax_plain(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

impl ModelState {
    /// Class logits for one prepared video on a caller-supplied tape, with
    /// the clips already registered. Used by inference and attribution.
    pub fn logits_prepared(
        &self,
        bd: &Binder,
        clips_flat: &[DiffArray],
        pv: &PreparedVideo,
        plan: &TrnPlan,
        bank_tokens: Option<&DiffArray>,
    ) -> Result<DiffArray> {
        let needs = StreamNeeds::for_variant(&self.config);
        let out = self.forward_prepared(bd, clips_flat, pv, plan, bank_tokens, needs)?;
        let tape = bd.tape();
        match self.config.variant {
            Variant::Full => {
                self.video_head.classifier.forward(bd, "video.cls", out.hc_pooled.as_ref().unwrap())
            }
            Variant::HmEncOnly => self
                .human_encoder
                .classifier
                .forward(bd, "hm.cls", &out.human.as_ref().unwrap().pooled),
            Variant::CtxEncOnly => {
                self.video_head.classifier.forward(bd, "video.cls", out.ctx_pooled.as_ref().unwrap())
            }
            Variant::Backbone => self
                .backbone_head
                .classifier
                .forward(bd, "bb.cls", out.backbone_pooled.as_ref().unwrap()),
            Variant::LateFusion => {
                // Probability-level fusion of the two heads; the returned
                // vector holds log-probabilities of the fused distribution.
                let hm_logits = self
                    .human_encoder
                    .classifier
                    .forward(bd, "hm.cls", &out.human.as_ref().unwrap().pooled)?;
                let ctx_logits = self
                    .video_head
                    .classifier
                    .forward(bd, "video.cls", out.ctx_pooled.as_ref().unwrap())?;
                let fused: Vec<f64> = softmax_plain(hm_logits.data())
                    .iter()
                    .zip(softmax_plain(ctx_logits.data()))
                    .map(|(a, b)| ((a + b) / 2.0).ln())
                    .collect();
                tape.constant(Array::vector(fused))
            }
        }
    }

    /// Deterministic inference: class label plus class probabilities.
    pub fn predict(&self, pv: &PreparedVideo) -> Result<(usize, Vec<f64>)> {
        let tape = Tape::new();
        let bd = Binder::new(&tape);
        let clips: Vec<DiffArray> = pv
            .clips_flat
            .iter()
            .map(|c| tape.constant(c.clone()))
            .collect::<Result<_>>()?;
        let plan = TrnPlan::eval(self.config.m)?;
        let bank = self.bank_tokens(&tape, pv.domain)?;
        let logits = self.logits_prepared(&bd, &clips, pv, &plan, bank.as_ref())?;
        let probs = softmax_plain(logits.data());
        let best = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        Ok((best, probs))
    }
}

/// Trainable-parameter name prefixes per variant and stage.
pub fn stage1_prefixes() -> Vec<String> {
    vec!["hm.".into()]
}

pub fn stage2_prefixes() -> Vec<String> {
    vec!["ctx.".into(), "dec.".into(), "video.".into()]
}
