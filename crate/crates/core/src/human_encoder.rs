//! Human-aware temporal modeling: aggregate each clip's human feature set
//! with self-attention, extract M-1 orders of temporal dynamics with TRN
//! units, and assemble the human-level loss with per-granularity domain
//! alignment.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diff::DiffArray;
use crate::error::{HctError, Result};
use crate::nn::{AffineParams, AttnParams, Binder, MlpParams, ParamVisitor, ParamVisitorMut};
use crate::streams::{derived_rng, EVAL_STREAM};

/// Which size-(g+1) clip subsets each TRN granularity averages over.
/// Temporal order is preserved inside every subset. Training samples up to
/// three subsets per granularity; the inference plan uses a fixed stream so
/// predictions are deterministic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrnPlan {
    subsets: Vec<Vec<Vec<usize>>>,
}

const MAX_SUBSETS_PER_GRANULARITY: usize = 3;

impl TrnPlan {
    pub fn sample(m: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if m < 2 {
            return Err(HctError::InvalidArgument(format!("temporal modeling needs M >= 2 clips, got {}", m)));
        }
        let mut subsets = Vec::with_capacity(m - 1);
        for granularity in 1..m {
            let size = granularity + 1;
            let all = combinations(m, size);
            if all.len() <= MAX_SUBSETS_PER_GRANULARITY {
                subsets.push(all);
            } else {
                let mut chosen: Vec<Vec<usize>> = Vec::with_capacity(MAX_SUBSETS_PER_GRANULARITY);
                while chosen.len() < MAX_SUBSETS_PER_GRANULARITY {
                    let pick = sample_sorted_subset(m, size, rng);
                    if !chosen.contains(&pick) {
                        chosen.push(pick);
                    }
                }
                subsets.push(chosen);
            }
        }
        Ok(TrnPlan { subsets })
    }

    /// The deterministic plan used at inference time.
    pub fn eval(m: usize) -> Result<Self> {
        let mut rng = derived_rng(0, EVAL_STREAM);
        Self::sample(m, &mut rng)
    }

    pub fn granularities(&self) -> usize {
        self.subsets.len()
    }

    pub fn subsets_for(&self, granularity_index: usize) -> &[Vec<usize>] {
        &self.subsets[granularity_index]
    }
}

fn combinations(m: usize, size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(size);
    fn rec(start: usize, m: usize, size: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            cur.push(i);
            rec(i + 1, m, size, cur, out);
            cur.pop();
        }
    }
    rec(0, m, size, &mut cur, &mut out);
    out
}

fn sample_sorted_subset(m: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..m).collect();
    for i in 0..size {
        let j = rng.gen_range(i..m);
        pool.swap(i, j);
    }
    let mut subset = pool[..size].to_vec();
    subset.sort_unstable();
    subset
}

/// Parameters of the human encoder and its heads: the per-clip aggregation
/// attention, the projection into the temporal-modeling space, one TRN unit
/// per granularity, the action classifier over pooled human features, and
/// one domain discriminator per granularity for both the TRN outputs and
/// the projected clip features.
#[derive(Clone, Debug)]
pub struct HumanEncoder {
    pub attn: AttnParams,
    pub proj: AffineParams,
    pub trns: Vec<MlpParams>,
    pub classifier: AffineParams,
    pub trn_discs: Vec<MlpParams>,
    pub proj_discs: Vec<MlpParams>,
}

impl HumanEncoder {
    pub fn init(m: usize, d: usize, d_v: usize, n_cls: usize, rng: &mut ChaCha8Rng) -> Self {
        let trns = (1..m)
            .map(|g| MlpParams::init((g + 1) * d_v, d_v, d_v, rng))
            .collect();
        let trn_discs = (1..m).map(|_| MlpParams::init(d_v, d_v, 2, rng)).collect();
        let proj_discs = (1..m).map(|_| MlpParams::init(d_v, d_v, 2, rng)).collect();
        HumanEncoder {
            attn: AttnParams::init(d, rng),
            proj: AffineParams::init(d, d_v, rng),
            trns,
            classifier: AffineParams::init(d_v, n_cls, rng),
            trn_discs,
            proj_discs,
        }
    }

    pub fn m(&self) -> usize {
        self.trns.len() + 1
    }

    /// Aggregate one clip's human feature set (rows of `human_feats`) into a
    /// single vector: mean over tokens of a pre-norm residual self-attention
    /// block. The token set is unordered; no position encoding is applied.
    pub fn aggregate_human(&self, bd: &Binder, human_feats: &DiffArray) -> Result<DiffArray> {
        if human_feats.shape().len() != 2 || human_feats.shape()[0] == 0 {
            return Err(HctError::Contract(
                "aggregate_human needs a non-empty token set; empty sets signal a masking-fallback bug".into(),
            ));
        }
        let tape = bd.tape();
        let normed = tape.layer_norm(human_feats)?;
        let attended = self.attn.attend(bd, "hm.attn", &normed, &normed, false)?;
        let resid = tape.add(human_feats, &attended)?;
        tape.mean_pool(&resid, 0)
    }

    /// Granularity rows z_1..z_{M-1}: each is the subset-average of a TRN
    /// unit applied to the concatenation of the projected clip features.
    pub fn trn_forward(&self, bd: &Binder, projected: &[DiffArray], plan: &TrnPlan) -> Result<Vec<DiffArray>> {
        let m = projected.len();
        if m < 2 {
            return Err(HctError::InvalidArgument(format!("temporal modeling needs M >= 2 clips, got {}", m)));
        }
        if m != self.m() || plan.granularities() != m - 1 {
            return Err(HctError::ShapeMismatch {
                op: "trn_forward".into(),
                detail: format!("{} clips against an encoder/plan built for M = {}", m, self.m()),
            });
        }
        let tape = bd.tape();
        let mut rows = Vec::with_capacity(m - 1);
        for (gi, trn) in self.trns.iter().enumerate() {
            let mut per_subset = Vec::new();
            for subset in plan.subsets_for(gi) {
                let parts: Vec<&DiffArray> = subset.iter().map(|&i| &projected[i]).collect();
                let cat = tape.concat(0, &parts)?;
                per_subset.push(trn.forward(bd, &format!("hm.trn{}", gi + 1), &cat)?);
            }
            let refs: Vec<&DiffArray> = per_subset.iter().collect();
            let stacked = tape.stack_rows(&refs)?;
            rows.push(tape.mean_pool(&stacked, 0)?);
        }
        Ok(rows)
    }

    /// Full human-encoder forward for one video: per-clip aggregation,
    /// projection, temporal modeling, and mean pooling over granularities.
    pub fn encode(
        &self,
        bd: &Binder,
        clip_human_feats: &[DiffArray],
        plan: &TrnPlan,
    ) -> Result<HumanForward> {
        let tape = bd.tape();
        let mut projected = Vec::with_capacity(clip_human_feats.len());
        for feats in clip_human_feats {
            let aggregated = self.aggregate_human(bd, feats)?;
            projected.push(self.proj.forward(bd, "hm.proj", &aggregated)?);
        }
        let z_rows = self.trn_forward(bd, &projected, plan)?;
        let refs: Vec<&DiffArray> = z_rows.iter().collect();
        let z = tape.stack_rows(&refs)?;
        let pooled = tape.mean_pool(&z, 0)?;
        Ok(HumanForward { projected, z_rows, z, pooled })
    }

    pub fn visit<'a>(&'a self, f: &mut ParamVisitor<'a, '_>) {
        self.attn.visit("hm.attn", f);
        self.proj.visit("hm.proj", f);
        for (i, t) in self.trns.iter().enumerate() {
            t.visit(&format!("hm.trn{}", i + 1), f);
        }
        self.classifier.visit("hm.cls", f);
        for (i, d) in self.trn_discs.iter().enumerate() {
            d.visit(&format!("hm.disc_trn{}", i + 1), f);
        }
        for (i, d) in self.proj_discs.iter().enumerate() {
            d.visit(&format!("hm.disc_proj{}", i + 1), f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut ParamVisitorMut<'a, '_>) {
        self.attn.visit_mut("hm.attn", f);
        self.proj.visit_mut("hm.proj", f);
        for (i, t) in self.trns.iter_mut().enumerate() {
            t.visit_mut(&format!("hm.trn{}", i + 1), f);
        }
        self.classifier.visit_mut("hm.cls", f);
        for (i, d) in self.trn_discs.iter_mut().enumerate() {
            d.visit_mut(&format!("hm.disc_trn{}", i + 1), f);
        }
        for (i, d) in self.proj_discs.iter_mut().enumerate() {
            d.visit_mut(&format!("hm.disc_proj{}", i + 1), f);
        }
    }
}

/// Human-encoder outputs for one video.
pub struct HumanForward {
    /// Projected per-clip features, M entries of `[D_v]`.
    pub projected: Vec<DiffArray>,
    /// Granularity rows, M-1 entries of `[D_v]`.
    pub z_rows: Vec<DiffArray>,
    /// The stacked `[(M-1), D_v]` matrix.
    pub z: DiffArray,
    /// Mean over granularity rows, `[D_v]`.
    pub pooled: DiffArray,
}

/// One video's contribution to the human-encoder loss.
pub struct HumanLossItem<'a> {
    pub forward: &'a HumanForward,
    /// Class label; present for source videos, absent for target.
    pub label: Option<usize>,
    /// 0 = source, 1 = target.
    pub domain: usize,
}

/// Term breakdown of the human-encoder loss.
pub struct HumanLoss {
    pub total: DiffArray,
    pub classification: DiffArray,
    pub trn_align: DiffArray,
    pub proj_align: DiffArray,
}

/// Classification over pooled human features of the source videos only,
/// plus lambda/(M-1)-weighted domain alignment through gradient reversal on
/// every granularity row and on the first M-1 projected clip features.
pub fn human_encoder_loss(
    bd: &Binder,
    enc: &HumanEncoder,
    items: &[HumanLossItem],
    lambda_hm: f64,
    grl_coeff: f64,
) -> Result<HumanLoss> {
    let tape = bd.tape();
    let m = enc.m();
    for item in items {
        if item.domain == 1 && item.label.is_some() {
            return Err(HctError::Contract("label provided for a target-tagged sample".into()));
        }
        if item.domain == 0 && item.label.is_none() {
            return Err(HctError::Contract("source sample without a label".into()));
        }
    }

    // (a) source classification on H(Z^hm).
    let source: Vec<&HumanLossItem> = items.iter().filter(|i| i.domain == 0).collect();
    let classification = if source.is_empty() {
        tape.zero_scalar()?
    } else {
        let rows: Vec<&DiffArray> = source.iter().map(|i| &i.forward.pooled).collect();
        let labels: Vec<usize> = source.iter().map(|i| i.label.unwrap()).collect();
        let logits = enc.classifier.forward(bd, "hm.cls", &tape.stack_rows(&rows)?)?;
        tape.cross_entropy(&logits, &labels)?
    };

    let domains: Vec<usize> = items.iter().map(|i| i.domain).collect();
    let weight = lambda_hm / (m - 1) as f64;

    // (b) per-granularity alignment of the TRN rows.
    let mut trn_align = tape.zero_scalar()?;
    for gi in 0..m - 1 {
        let rows: Vec<&DiffArray> = items.iter().map(|i| &i.forward.z_rows[gi]).collect();
        let feats = tape.stack_rows(&rows)?;
        let term = crate::nn::domain_loss(
            &enc.trn_discs[gi],
            bd,
            &format!("hm.disc_trn{}", gi + 1),
            &feats,
            &domains,
            grl_coeff,
        )?;
        trn_align = tape.add(&trn_align, &term)?;
    }
    trn_align = tape.scale(&trn_align, weight)?;

    // (c) alignment of the projected clip features for clips 1..M-1.
    let mut proj_align = tape.zero_scalar()?;
    for gi in 0..m - 1 {
        let rows: Vec<&DiffArray> = items.iter().map(|i| &i.forward.projected[gi]).collect();
        let feats = tape.stack_rows(&rows)?;
        let term = crate::nn::domain_loss(
            &enc.proj_discs[gi],
            bd,
            &format!("hm.disc_proj{}", gi + 1),
            &feats,
            &domains,
            grl_coeff,
        )?;
        proj_align = tape.add(&proj_align, &term)?;
    }
    proj_align = tape.scale(&proj_align, weight)?;

    let total = tape.add(&tape.add(&classification, &trn_align)?, &proj_align)?;
    Ok(HumanLoss { total, classification, trn_align, proj_align })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::Array;
    use crate::diff::{grad_check, Tape};
    use crate::streams::derived_rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn singleton_set_attention_weight_is_one() {
        let mut rng = derived_rng(31, 1);
        let enc = HumanEncoder::init(3, 4, 4, 2, &mut rng);
        let tape = Tape::new();
        let bd = Binder::new(&tape);
        let x = tape
            .constant(Array::matrix(1, 4, vec![0.5, -1.0, 2.0, 0.3]).unwrap())
            .unwrap();
        let normed = tape.layer_norm(&x).unwrap();
        let q = tape
            .matmul(&normed, &bd.param("hm.attn.wq", &enc.attn.wq).unwrap())
            .unwrap();
        let k = tape
            .matmul(&normed, &bd.param("hm.attn.wk", &enc.attn.wk).unwrap())
            .unwrap();
        let w = tape.attention_weights(&q, &k).unwrap();
        assert_eq!(w.shape(), &[1, 1]);
        assert!(close(w.data()[0], 1.0, 1e-15));
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let mut rng = derived_rng(32, 1);
        let enc = HumanEncoder::init(3, 4, 4, 2, &mut rng);
        let data = vec![
            0.1, 0.2, 0.3, 0.4, //
            -1.0, 0.5, 2.0, 0.0, //
            0.7, 0.7, -0.2, 1.5,
        ];
        let permuted = vec![
            0.7, 0.7, -0.2, 1.5, //
            0.1, 0.2, 0.3, 0.4, //
            -1.0, 0.5, 2.0, 0.0,
        ];
        let tape = Tape::new();
        let bd = Binder::new(&tape);
        let a = tape.constant(Array::matrix(3, 4, data).unwrap()).unwrap();
        let b = tape.constant(Array::matrix(3, 4, permuted).unwrap()).unwrap();
        let ya = enc.aggregate_human(&bd, &a).unwrap();
        let yb = enc.aggregate_human(&bd, &b).unwrap();
        for (u, v) in ya.data().iter().zip(yb.data()) {
            assert!(close(*u, *v, 1e-12));
        }
    }

    #[test]
    fn aggregate_rejects_empty_sets() {
        let mut rng = derived_rng(33, 1);
        let enc = HumanEncoder::init(3, 4, 4, 2, &mut rng);
        let tape = Tape::new();
        let bd = Binder::new(&tape);
        let empty = tape.constant(Array::new(vec![0, 4], vec![]).unwrap()).unwrap();
        assert!(enc.aggregate_human(&bd, &empty).is_err());
    }

    /// Recompute the two-token attention block with independent matrix
    /// arithmetic and compare.
    #[test]
    fn two_token_aggregation_matches_hand_oracle() {
        let mut rng = derived_rng(34, 1);
        let d = 3;
        let enc = HumanEncoder::init(2, d, 4, 2, &mut rng);
        let x = vec![0.4, -0.9, 1.3, 2.0, 0.1, -0.5];

        let tape = Tape::new();
        let bd = Binder::new(&tape);
        let xd = tape.constant(Array::matrix(2, d, x.clone()).unwrap()).unwrap();
        let got = enc.aggregate_human(&bd, &xd).unwrap();

        // Oracle: plain f64 re-derivation.
        let ln = |row: &[f64]| -> Vec<f64> {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (var + crate::diff::LAYER_NORM_EPS).sqrt();
            row.iter().map(|v| (v - mean) * inv).collect()
        };
        let matvec = |m: &Array, v: &[f64]| -> Vec<f64> {
            let (rows, cols) = (m.shape()[0], m.shape()[1]);
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c] += v[r] * m.data()[r * cols + c];
                }
            }
            out
        };
        let n0 = ln(&x[0..d]);
        let n1 = ln(&x[d..2 * d]);
        let q: Vec<Vec<f64>> = vec![matvec(&enc.attn.wq, &n0), matvec(&enc.attn.wq, &n1)];
        let k: Vec<Vec<f64>> = vec![matvec(&enc.attn.wk, &n0), matvec(&enc.attn.wk, &n1)];
        let v: Vec<Vec<f64>> = vec![matvec(&enc.attn.wv, &n0), matvec(&enc.attn.wv, &n1)];
        let scale = 1.0 / (d as f64).sqrt();
        let mut expected = vec![0.0; d];
        for t in 0..2 {
            let s0: f64 = q[t].iter().zip(&k[0]).map(|(a, b)| a * b).sum::<f64>() * scale;
            let s1: f64 = q[t].iter().zip(&k[1]).map(|(a, b)| a * b).sum::<f64>() * scale;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let z = e0 + e1;
            for j in 0..d {
                let attn = (e0 * v[0][j] + e1 * v[1][j]) / z;
                expected[j] += (x[t * d + j] + attn) / 2.0;
            }
        }
        for (g, e) in got.data().iter().zip(&expected) {
            assert!(close(*g, *e, 1e-12), "{} vs {}", g, e);
        }
    }

    #[test]
    fn trn_output_has_m_minus_one_rows() {
        let mut rng = derived_rng(35, 1);
        let (m, d, d_v) = (5, 4, 6);
        let enc = HumanEncoder::init(m, d, d_v, 2, &mut rng);
        let plan = TrnPlan::sample(m, &mut rng).unwrap();
        let tape = Tape::new();
        let bd = Binder::new(&tape);
        let projected: Vec<DiffArray> = (0..m)
            .map(|i| {
                tape.constant(Array::vector((0..d_v).map(|j| (i * d_v + j) as f64 * 0.1).collect()))
                    .unwrap()
            })
            .collect();
        let rows = enc.trn_forward(&bd, &projected, &plan).unwrap();
        assert_eq!(rows.len(), m - 1);
        for r in &rows {
            assert_eq!(r.shape(), &[d_v]);
        }
    }

    #[test]
    fn constant_clips_make_trn_subset_independent() {
        let mut rng = derived_rng(36, 1);
        let (m, d, d_v) = (5, 4, 6);
        let enc = HumanEncoder::init(m, d, d_v, 2, &mut rng);
        let plan_a = TrnPlan::sample(m, &mut rng).unwrap();
        let plan_b = TrnPlan::sample(m, &mut rng).unwrap();
        assert_ne!(plan_a, plan_b);
        let tape = Tape::new();
        let bd = Binder::new(&tape);
        let same = Array::vector((0..d_v).map(|j| j as f64 * 0.3 - 0.7).collect());
        let projected: Vec<DiffArray> = (0..m).map(|_| tape.constant(same.clone()).unwrap()).collect();
        let rows_a = enc.trn_forward(&bd, &projected, &plan_a).unwrap();
        let rows_b = enc.trn_forward(&bd, &projected, &plan_b).unwrap();
        for (a, b) in rows_a.iter().zip(&rows_b) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!(close(*x, *y, 1e-12));
            }
        }
    }

    #[test]
    fn top_granularity_is_the_full_concatenation() {
        let mut rng = derived_rng(37, 1);
        let (m, d, d_v) = (4, 3, 5);
        let enc = HumanEncoder::init(m, d, d_v, 2, &mut rng);
        let plan = TrnPlan::sample(m, &mut rng).unwrap();
        assert_eq!(plan.subsets_for(m - 2), &[vec![0, 1, 2, 3]]);
        let tape = Tape::new();
        let bd = Binder::new(&tape);
        let projected: Vec<DiffArray> = (0..m)
            .map(|i| tape.constant(Array::vector((0..d_v).map(|j| (i + j) as f64 * 0.2).collect())).unwrap())
            .collect();
        let rows = enc.trn_forward(&bd, &projected, &plan).unwrap();

        let refs: Vec<&DiffArray> = projected.iter().collect();
        let cat = tape.concat(0, &refs).unwrap();
        let direct = enc.trns[m - 2].forward(&bd, &format!("hm.trn{}", m - 1), &cat).unwrap();
        for (a, b) in rows[m - 2].data().iter().zip(direct.data()) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    fn toy_forward(enc: &HumanEncoder, bd: &Binder, seed: u64) -> HumanForward {
        let m = enc.m();
        let d = enc.attn.wq.shape()[0];
        let mut rng = derived_rng(seed, 9);
        let clips: Vec<DiffArray> = (0..m)
            .map(|_| {
                let data = (0..2 * d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                bd.tape().constant(Array::matrix(2, d, data).unwrap()).unwrap()
            })
            .collect();
        let plan = TrnPlan::eval(m).unwrap();
        enc.encode(bd, &clips, &plan).unwrap()
    }

    #[test]
    fn zero_lambda_reduces_loss_to_classification() {
        let mut rng = derived_rng(38, 1);
        let enc = HumanEncoder::init(3, 4, 4, 2, &mut rng);
        let tape = Tape::new();
        let bd = Binder::new(&tape);
        let fwd = toy_forward(&enc, &bd, 101);
        let items = [HumanLossItem { forward: &fwd, label: Some(1), domain: 0 }];
        let loss = human_encoder_loss(&bd, &enc, &items, 0.0, 1.0).unwrap();
        assert!(close(loss.total.scalar_value(), loss.classification.scalar_value(), 1e-15));
        assert_eq!(loss.trn_align.scalar_value(), 0.0);
        assert_eq!(loss.proj_align.scalar_value(), 0.0);
    }

    #[test]
    fn target_label_is_a_contract_violation() {
        let mut rng = derived_rng(39, 1);
        let enc = HumanEncoder::init(3, 4, 4, 2, &mut rng);
        let tape = Tape::new();
        let bd = Binder::new(&tape);
        let fwd = toy_forward(&enc, &bd, 102);
        let items = [HumanLossItem { forward: &fwd, label: Some(0), domain: 1 }];
        assert!(human_encoder_loss(&bd, &enc, &items, 0.5, 1.0).is_err());
    }

    /// Tiny fixture (M=3, D_v=4, two classes): recompute the three loss
    /// terms with a plain softmax/cross-entropy oracle.
    #[test]
    fn loss_matches_term_by_term_recomputation() {
        let mut rng = derived_rng(40, 1);
        let (m, d, d_v, n_cls) = (3, 3, 4, 2);
        let enc = HumanEncoder::init(m, d, d_v, n_cls, &mut rng);
        let tape = Tape::new();
        let bd = Binder::new(&tape);
        let fwd_src = toy_forward(&enc, &bd, 103);
        let fwd_tgt = toy_forward(&enc, &bd, 104);
        let items = [
            HumanLossItem { forward: &fwd_src, label: Some(1), domain: 0 },
            HumanLossItem { forward: &fwd_tgt, label: None, domain: 1 },
        ];
        let lambda = 0.5;
        let loss = human_encoder_loss(&bd, &enc, &items, lambda, 1.0).unwrap();

        let ce = |logits: &[f64], label: usize| -> f64 {
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
            m + z.ln() - logits[label]
        };
        let affine = |p: &AffineParams, x: &[f64]| -> Vec<f64> {
            let (din, dout) = (p.w.shape()[0], p.w.shape()[1]);
            let mut out = p.b.data().to_vec();
            for l in 0..din {
                for j in 0..dout {
                    out[j] += x[l] * p.w.data()[l * dout + j];
                }
            }
            out
        };
        let mlp = |p: &MlpParams, x: &[f64]| -> Vec<f64> {
            let h: Vec<f64> = affine(&p.l1, x).into_iter().map(|v| v.max(0.0)).collect();
            affine(&p.l2, &h)
        };

        let expect_cls = ce(&affine(&enc.classifier, fwd_src.pooled.data()), 1);
        assert!(close(loss.classification.scalar_value(), expect_cls, 1e-12));

        let mut expect_trn = 0.0;
        let mut expect_proj = 0.0;
        for gi in 0..m - 1 {
            let mut trn_term = 0.0;
            let mut proj_term = 0.0;
            for (item, domain) in items.iter().zip([0usize, 1]) {
                trn_term += ce(&mlp(&enc.trn_discs[gi], item.forward.z_rows[gi].data()), domain);
                proj_term += ce(&mlp(&enc.proj_discs[gi], item.forward.projected[gi].data()), domain);
            }
            expect_trn += trn_term / 2.0;
            expect_proj += proj_term / 2.0;
        }
        let weight = lambda / (m - 1) as f64;
        assert!(close(loss.trn_align.scalar_value(), weight * expect_trn, 1e-12));
        assert!(close(loss.proj_align.scalar_value(), weight * expect_proj, 1e-12));
        assert!(close(
            loss.total.scalar_value(),
            loss.classification.scalar_value() + loss.trn_align.scalar_value() + loss.proj_align.scalar_value(),
            1e-15
        ));
    }

    /// Zeroing one head's parameters changes only its own term.
    #[test]
    fn heads_are_disjoint_parameter_sets() {
        let mut rng = derived_rng(41, 1);
        let (m, d, d_v, n_cls) = (3, 3, 4, 2);
        let enc = HumanEncoder::init(m, d, d_v, n_cls, &mut rng);
        let eval = |e: &HumanEncoder| -> (f64, f64, f64) {
            let tape = Tape::new();
            let bd = Binder::new(&tape);
            let fwd = toy_forward(e, &bd, 105);
            let items = [HumanLossItem { forward: &fwd, label: Some(0), domain: 0 }];
            let loss = human_encoder_loss(&bd, e, &items, 0.5, 1.0).unwrap();
            (
                loss.classification.scalar_value(),
                loss.trn_align.scalar_value(),
                loss.proj_align.scalar_value(),
            )
        };
        let base = eval(&enc);

        let mut no_cls = enc.clone();
        no_cls.classifier.w = Array::zeros(no_cls.classifier.w.shape().to_vec());
        let got = eval(&no_cls);
        assert_ne!(got.0, base.0);
        assert_eq!(got.1, base.1);
        assert_eq!(got.2, base.2);

        let mut no_trn = enc.clone();
        for d in no_trn.trn_discs.iter_mut() {
            d.l1.w = Array::zeros(d.l1.w.shape().to_vec());
        }
        let got = eval(&no_trn);
        assert_eq!(got.0, base.0);
        assert_ne!(got.1, base.1);
        assert_eq!(got.2, base.2);
    }

    /// Loss gradients against central differences, with discriminators
    /// frozen and reversal run at coefficient -1 so the loss is an ordinary
    /// differentiable function of the clip features.
    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = derived_rng(42, 1);
        let (m, d, d_v, n_cls) = (3, 3, 4, 2);
        let enc = HumanEncoder::init(m, d, d_v, n_cls, &mut rng);
        let plan = TrnPlan::eval(m).unwrap();
        let tokens = 2;
        let point = Array::new(
            vec![m * tokens * d],
            (0..m * tokens * d).map(|i| ((i as f64) * 0.37).sin()).collect(),
        )
        .unwrap();
        let err = grad_check(
            |tape, x| {
                let bd = Binder::with_frozen(tape, vec!["hm.disc".into()]);
                let clips: Vec<DiffArray> = (0..m)
                    .map(|i| {
                        let flat = tape.reshape(x, vec![m, tokens * d])?;
                        let row = tape.matmul(
                            &tape.constant(one_hot_row(i, m))?,
                            &flat,
                        )?;
                        tape.reshape(&row, vec![tokens, d])
                    })
                    .collect::<Result<_>>()?;
                let fwd = enc.encode(&bd, &clips, &plan)?;
                let items = [HumanLossItem { forward: &fwd, label: Some(1), domain: 0 }];
                let loss = human_encoder_loss(&bd, &enc, &items, 0.5, -1.0)?;
                Ok(loss.total)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "human encoder loss grad error {}", err);
    }

    fn one_hot_row(i: usize, n: usize) -> Array {
        let mut data = vec![0.0; n];
        data[i] = 1.0;
        Array::matrix(1, n, data).unwrap()
    }
}
