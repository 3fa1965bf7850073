//! Two-stage adversarial training, loss tracing and inference plumbing.
//!
//! Stage 1 trains the human encoder and its heads with SGD. Prototype banks
//! are then built per domain from the raw context features. Stage 2 trains
//! the context encoder, decoder and video-level heads with Adam while the
//! human encoder stays frozen. The baseline variants collapse to a single
//! stage over their own parameters. Every batch pairs `batch_pairs` source
//! videos with the same number of target videos.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HctError, Result};
use crate::human_encoder::TrnPlan;
use crate::masking::{dataset_average, HumanMask};
use crate::nn::Binder;
use crate::prototypes::{build_bank, train_context_classifier};
use crate::streams::{derived_rng, stream_id};
use crate::synthbench::{Dataset, Domain};

pub mod checkpoint;
pub mod model;
pub mod optim;

pub use model::{
    prepare_video, BatchItem, Banks, ModelConfig, ModelState, PreparedVideo, PrototypeCount,
    StreamNeeds, Variant, VideoOutputs,
};
pub use optim::{decayed_lr, grl_coefficient, Adam, Sgd};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub epochs: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig { lr0: 0.01, weight_decay: 5e-4, epochs: 60 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_hm: f64,
    pub lambda_ctx: f64,
    pub lambda_hc: f64,
    pub lambda_h: f64,
    /// SGD stage over the human encoder.
    pub stage1: StageConfig,
    /// Adam stage over context encoder, decoder and video heads.
    pub stage2: StageConfig,
    /// Source (and target) videos per batch.
    pub batch_pairs: usize,
    pub grl_gamma: f64,
    pub lr_alpha: f64,
    pub lr_beta: f64,
    /// Entropy-filter keep fraction for prototype building.
    pub keep_fraction: f64,
    /// Rebuild prototype banks every N stage-2 epochs; `None` keeps the
    /// banks fixed after stage 1 (the backbone-level features they are
    /// built from do not drift, so a refresh reproduces the same banks).
    pub prototype_refresh_epochs: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_hm: 0.5,
            lambda_ctx: 0.5,
            lambda_hc: 0.25,
            lambda_h: 0.25,
            stage1: StageConfig { lr0: 0.01, weight_decay: 5e-4, epochs: 60 },
            stage2: StageConfig { lr0: 0.001, weight_decay: 0.0, epochs: 30 },
            batch_pairs: 16,
            grl_gamma: 10.0,
            lr_alpha: 10.0,
            lr_beta: 0.75,
            keep_fraction: 0.5,
            prototype_refresh_epochs: None,
            seed: 17,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_pairs == 0 {
            return Err(HctError::InvalidArgument("batch_pairs must be positive".into()));
        }
        for (name, v) in [
            ("lambda_hm", self.lambda_hm),
            ("lambda_ctx", self.lambda_ctx),
            ("lambda_hc", self.lambda_hc),
            ("lambda_h", self.lambda_h),
        ] {
            if v < 0.0 {
                return Err(HctError::InvalidArgument(format!("{} must be nonnegative, got {}", name, v)));
            }
        }
        if self.stage1.epochs == 0 && self.stage2.epochs == 0 {
            return Err(HctError::InvalidArgument("at least one stage needs epochs".into()));
        }
        Ok(())
    }
}

/// One logged optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub l_hm: f64,
    pub l_ctx: f64,
    pub l_hc: f64,
    pub l_video: f64,
    pub total: f64,
    pub lr: f64,
    pub grl_coef: f64,
}

pub fn write_trace_csv(path: &std::path::Path, rows: &[TraceRow]) -> Result<()> {
    let mut out = String::from("step,L_hm,L_ctx,L_hc,L_video,total,lr,grl_coef\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step, r.l_hm, r.l_ctx, r.l_hc, r.l_video, r.total, r.lr, r.grl_coef
        ));
    }
    std::fs::write(path, out).map_err(|e| HctError::io(path.display().to_string(), e))
}

pub struct TrainOutput {
    pub model: ModelState,
    pub trace: Vec<TraceRow>,
}

/// Dataset-side preparation shared by training and evaluation: the
/// dataset-average mask of the split and the per-video baked partitions.
pub fn prepare_dataset(dataset: &Dataset, config: &ModelConfig) -> Result<Vec<PreparedVideo>> {
    let all_masks: Vec<HumanMask> = dataset
        .videos
        .iter()
        .flat_map(|v| v.masks.iter().cloned())
        .collect();
    let avg = dataset_average(&all_masks)?;
    dataset
        .videos
        .iter()
        .map(|v| prepare_video(v, &avg, config))
        .collect()
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

enum StageOpt {
    Sgd,
    Adam,
}

struct StageRun<'a> {
    opt: StageOpt,
    stage: &'a StageConfig,
    /// Parameter-name prefixes bound as constants during this stage.
    frozen: Vec<String>,
    needs: StreamNeeds,
    stream: u64,
}

fn run_stage(
    model: &mut ModelState,
    src: &[PreparedVideo],
    tgt: &[PreparedVideo],
    cfg: &TrainConfig,
    run: StageRun,
    trace: &mut Vec<TraceRow>,
    global_step: &mut u64,
) -> Result<()> {
    let bp = cfg.batch_pairs;
    let steps_per_epoch = (src.len().max(tgt.len()) / bp).max(1);
    let total_steps = (steps_per_epoch * run.stage.epochs).max(1);
    let mut rng = derived_rng(cfg.seed, run.stream);
    let sgd = Sgd { weight_decay: run.stage.weight_decay };
    let mut adam = Adam::new();

    let mut stage_step = 0usize;
    for _epoch in 0..run.stage.epochs {
        let src_order = shuffled(src.len(), &mut rng);
        let tgt_order = shuffled(tgt.len(), &mut rng);
        for s in 0..steps_per_epoch {
            let p = stage_step as f64 / total_steps as f64;
            let grl = grl_coefficient(cfg.grl_gamma, p)?;
            let lr = decayed_lr(run.stage.lr0, cfg.lr_alpha, cfg.lr_beta, p);
            let plan = TrnPlan::sample(model.config.m, &mut rng)?;

            let tape = crate::diff::Tape::new();
            let bd = Binder::with_frozen(&tape, run.frozen.clone());
            let (src_bank, tgt_bank) = if run.needs.context {
                (model.bank_tokens(&tape, Domain::Source)?, model.bank_tokens(&tape, Domain::Target)?)
            } else {
                (None, None)
            };

            let mut items = Vec::with_capacity(2 * bp);
            for j in 0..bp {
                for (prepared, order, bank) in [
                    (src, &src_order, &src_bank),
                    (tgt, &tgt_order, &tgt_bank),
                ] {
                    let idx = order[(s * bp + j) % prepared.len()];
                    let pv = &prepared[idx];
                    let clips: Vec<crate::diff::DiffArray> = pv
                        .clips_flat
                        .iter()
                        .map(|c| tape.constant(c.clone()))
                        .collect::<Result<_>>()?;
                    let outputs =
                        model.forward_prepared(&bd, &clips, pv, &plan, bank.as_ref(), run.needs)?;
                    items.push(BatchItem { outputs, label: pv.label, domain: pv.domain });
                }
            }

            let loss = model.total_loss(&bd, &items, cfg, grl)?;
            for (name, term) in [
                ("L_hm", &loss.hm),
                ("L_ctx", &loss.ctx),
                ("L_hc", &loss.hc),
                ("L_video", &loss.video),
            ] {
                if !term.scalar_value().is_finite() {
                    return Err(HctError::NonFinite { op: format!("loss term {}", name) });
                }
            }
            let grads = tape.backward(&loss.total)?;
            let named = bd.named_grads(&grads);
            match run.opt {
                StageOpt::Sgd => model.visit_mut(&mut |name, param| {
                    if let Some(g) = named.get(&name) {
                        sgd.step(param, g, lr);
                    }
                }),
                StageOpt::Adam => model.visit_mut(&mut |name, param| {
                    if let Some(g) = named.get(&name) {
                        adam.step(&name, param, g, lr);
                    }
                }),
            }

            trace.push(TraceRow {
                step: *global_step,
                l_hm: loss.hm.scalar_value(),
                l_ctx: loss.ctx.scalar_value(),
                l_hc: loss.hc.scalar_value(),
                l_video: loss.video.scalar_value(),
                total: loss.total.scalar_value(),
                lr,
                grl_coef: grl,
            });
            *global_step += 1;
            stage_step += 1;
        }
    }
    Ok(())
}

/// Collect per-position context feature vectors for a whole split.
fn context_features(prepared: &[PreparedVideo]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for pv in prepared {
        for (clip, positions) in pv.clips_flat.iter().zip(&pv.ctx_positions) {
            for &p in positions {
                feats.push(clip.row(p).to_vec());
                labels.push(pv.label.unwrap_or(0));
            }
        }
    }
    (feats, labels)
}

/// Build per-domain prototype banks: a weak source-trained context
/// classifier ranks entropy, the low-entropy survivors are clustered.
pub fn build_banks(
    src: &[PreparedVideo],
    tgt: &[PreparedVideo],
    n_cls: usize,
    k: usize,
    keep_fraction: f64,
    seed: u64,
) -> Result<Banks> {
    let (src_feats, src_labels) = context_features(src);
    let (tgt_feats, _) = context_features(tgt);
    if src_feats.is_empty() || tgt_feats.is_empty() {
        return Err(HctError::Contract("prototype banks need context features in both domains".into()));
    }
    let mut clf_rng = derived_rng(seed, stream_id::CONTEXT_CLASSIFIER);
    let classifier = train_context_classifier(&src_feats, &src_labels, n_cls, 5, &mut clf_rng)?;
    let mut src_rng = derived_rng(seed, stream_id::KMEANS_SOURCE);
    let mut tgt_rng = derived_rng(seed, stream_id::KMEANS_TARGET);
    let source = build_bank(&src_feats, &classifier, keep_fraction, k, "source", &mut src_rng)?;
    let target = build_bank(&tgt_feats, &classifier, keep_fraction, k, "target", &mut tgt_rng)?;
    Ok(Banks { source, target })
}

/// Train a model of the configured variant. The full pipeline runs the
/// two-stage procedure; baselines run the single stage they need.
pub fn two_stage_train(
    source: &Dataset,
    target: &Dataset,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    model_cfg.validate()?;
    if source.videos.is_empty() || target.videos.is_empty() {
        return Err(HctError::Dataset("both splits must be non-empty".into()));
    }
    if source.videos.iter().any(|v| v.label.is_none()) {
        return Err(HctError::Dataset("source split must be fully labeled".into()));
    }
    if target.videos.iter().any(|v| v.label.is_some()) {
        return Err(HctError::Contract("target split must not carry labels into training".into()));
    }

    let mut model = ModelState::init(model_cfg, cfg.seed)?;
    model.train_snapshot = Some(cfg.clone());
    let src_prepared = prepare_dataset(source, &model.config)?;
    let tgt_prepared = prepare_dataset(target, &model.config)?;

    let mut trace = Vec::new();
    let mut step = 0u64;
    let needs = StreamNeeds::for_variant(&model.config);
    let k = model.config.k_resolved();
    let n_cls = model.config.n_cls;

    let needs_banks = !model.config.no_prototypes
        && matches!(model.config.variant, Variant::Full | Variant::CtxEncOnly | Variant::LateFusion);

    match model.config.variant {
        Variant::Backbone | Variant::CtxEncOnly => {
            if needs_banks {
                model.banks =
                    Some(build_banks(&src_prepared, &tgt_prepared, n_cls, k, cfg.keep_fraction, cfg.seed)?);
            }
            let single = StageConfig {
                lr0: cfg.stage2.lr0,
                weight_decay: cfg.stage2.weight_decay,
                epochs: cfg.stage1.epochs + cfg.stage2.epochs,
            };
            run_stage(
                &mut model,
                &src_prepared,
                &tgt_prepared,
                cfg,
                StageRun { opt: StageOpt::Adam, stage: &single, frozen: vec![], needs, stream: stream_id::STAGE2 },
                &mut trace,
                &mut step,
            )?;
        }
        Variant::HmEncOnly => {
            run_stage(
                &mut model,
                &src_prepared,
                &tgt_prepared,
                cfg,
                StageRun {
                    opt: StageOpt::Sgd,
                    stage: &cfg.stage1,
                    frozen: vec![],
                    needs,
                    stream: stream_id::STAGE1,
                },
                &mut trace,
                &mut step,
            )?;
        }
        Variant::LateFusion | Variant::Full => {
            let stage1_needs = StreamNeeds { human: true, ..Default::default() };
            run_stage(
                &mut model,
                &src_prepared,
                &tgt_prepared,
                cfg,
                StageRun {
                    opt: StageOpt::Sgd,
                    stage: &cfg.stage1,
                    frozen: vec![],
                    needs: stage1_needs,
                    stream: stream_id::STAGE1,
                },
                &mut trace,
                &mut step,
            )?;
            if needs_banks {
                model.banks =
                    Some(build_banks(&src_prepared, &tgt_prepared, n_cls, k, cfg.keep_fraction, cfg.seed)?);
            }
            run_stage(
                &mut model,
                &src_prepared,
                &tgt_prepared,
                cfg,
                StageRun {
                    opt: StageOpt::Adam,
                    stage: &cfg.stage2,
                    frozen: vec!["hm.".into()],
                    needs,
                    stream: stream_id::STAGE2,
                },
                &mut trace,
                &mut step,
            )?;
        }
    }

    Ok(TrainOutput { model, trace })
}
