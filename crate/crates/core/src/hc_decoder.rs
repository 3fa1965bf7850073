//! Human-context interaction modeling: the M-1 granularity rows of the
//! human temporal features query the encoded context tokens across L_d
//! layers, with one domain discriminator per (layer, granularity) pair.

use rand_chacha::ChaCha8Rng;

use crate::diff::DiffArray;
use crate::error::{HctError, Result};
use crate::nn::{ffn_block, AttnParams, Binder, MlpParams, ParamVisitor, ParamVisitorMut};

#[derive(Clone, Debug)]
pub struct DecLayer {
    /// Present only when the optional query self-attention is configured.
    pub self_attn: Option<AttnParams>,
    pub cross_attn: AttnParams,
    pub ffn: MlpParams,
}

#[derive(Clone, Debug)]
pub struct HcDecoder {
    pub layers: Vec<DecLayer>,
    /// Discriminators indexed `[layer][granularity]`.
    pub discs: Vec<Vec<MlpParams>>,
    /// Test hook: replace cross-attention scores with uniform weights.
    pub uniform_attention: bool,
}

impl HcDecoder {
    pub fn init(
        m: usize,
        d_v: usize,
        n_layers: usize,
        query_self_attention: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|_| DecLayer {
                self_attn: query_self_attention.then(|| AttnParams::init(d_v, rng)),
                cross_attn: AttnParams::init(d_v, rng),
                ffn: MlpParams::init(d_v, 2 * d_v, d_v, rng),
            })
            .collect();
        let discs = (0..n_layers)
            .map(|_| (1..m).map(|_| MlpParams::init(d_v, d_v, 2, rng)).collect())
            .collect();
        HcDecoder { layers, discs, uniform_attention: false }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn discriminator_count(&self) -> usize {
        self.discs.iter().map(|d| d.len()).sum()
    }

    /// Decode: Z_0 = Z^hm, then per layer a pre-norm residual cross-attention
    /// into the final encoder output followed by a residual feedforward.
    /// Returns every layer's `[(M-1), D_v]` matrix; the last one is Z^hc.
    pub fn decode(&self, bd: &Binder, z_hm: &DiffArray, z_ctx: &DiffArray) -> Result<Vec<DiffArray>> {
        if z_hm.shape().len() != 2 || z_ctx.shape().len() != 2 || z_hm.shape()[1] != z_ctx.shape()[1] {
            return Err(HctError::ShapeMismatch {
                op: "hc_decode".into(),
                detail: format!("query {:?} vs context {:?}", z_hm.shape(), z_ctx.shape()),
            });
        }
        let tape = bd.tape();
        let mut z = z_hm.clone();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let base = format!("dec.layer{}", li + 1);
            if let Some(self_attn) = &layer.self_attn {
                let ln = tape.layer_norm(&z)?;
                let sa = self_attn.attend(bd, &format!("{base}.self"), &ln, &ln, false)?;
                z = tape.add(&z, &sa)?;
            }
            let ln_q = tape.layer_norm(&z)?;
            let ln_kv = tape.layer_norm(z_ctx)?;
            let cross = layer.cross_attn.attend(
                bd,
                &format!("{base}.cross"),
                &ln_q,
                &ln_kv,
                self.uniform_attention,
            )?;
            let mid = tape.add(&z, &cross)?;
            z = ffn_block(&layer.ffn, bd, &format!("{base}.ffn"), &mid)?;
            per_layer.push(z.clone());
        }
        Ok(per_layer)
    }

    pub fn visit<'a>(&'a self, f: &mut ParamVisitor<'a, '_>) {
        for (li, layer) in self.layers.iter().enumerate() {
            let base = format!("dec.layer{}", li + 1);
            if let Some(a) = &layer.self_attn {
                a.visit(&format!("{base}.self"), f);
            }
            layer.cross_attn.visit(&format!("{base}.cross"), f);
            layer.ffn.visit(&format!("{base}.ffn"), f);
        }
        for (li, row) in self.discs.iter().enumerate() {
            for (gi, d) in row.iter().enumerate() {
                d.visit(&format!("dec.disc{}_{}", li + 1, gi + 1), f);
            }
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut ParamVisitorMut<'a, '_>) {
        for (li, layer) in self.layers.iter_mut().enumerate() {
            let base = format!("dec.layer{}", li + 1);
            if let Some(a) = &mut layer.self_attn {
                a.visit_mut(&format!("{base}.self"), f);
            }
            layer.cross_attn.visit_mut(&format!("{base}.cross"), f);
            layer.ffn.visit_mut(&format!("{base}.ffn"), f);
        }
        for (li, row) in self.discs.iter_mut().enumerate() {
            for (gi, d) in row.iter_mut().enumerate() {
                d.visit_mut(&format!("dec.disc{}_{}", li + 1, gi + 1), f);
            }
        }
    }
}

/// lambda/(L_d(M-1)) times the summed domain cross-entropies over every
/// (layer, granularity) feature through gradient reversal. `rows[l][g]`
/// stacks the batch's granularity-g features at layer l+1, one video per
/// row; `domains` labels the rows.
pub fn hc_alignment_loss(
    bd: &Binder,
    dec: &HcDecoder,
    rows: &[Vec<DiffArray>],
    domains: &[usize],
    lambda_hc: f64,
    grl_coeff: f64,
) -> Result<DiffArray> {
    let tape = bd.tape();
    if rows.len() != dec.discs.len() || rows.iter().zip(&dec.discs).any(|(r, d)| r.len() != d.len()) {
        return Err(HctError::ShapeMismatch {
            op: "hc_alignment_loss".into(),
            detail: "per-(layer, granularity) features do not match the discriminator grid".into(),
        });
    }
    let mut total = tape.zero_scalar()?;
    for (li, layer_rows) in rows.iter().enumerate() {
        for (gi, feats) in layer_rows.iter().enumerate() {
            let term = crate::nn::domain_loss(
                &dec.discs[li][gi],
                bd,
                &format!("dec.disc{}_{}", li + 1, gi + 1),
                feats,
                domains,
                grl_coeff,
            )?;
            total = tape.add(&total, &term)?;
        }
    }
    let count: usize = dec.discs.iter().map(|d| d.len()).sum();
    tape.scale(&total, lambda_hc / count as f64)
}

/// Split a per-layer decode output into per-(layer, granularity) single-row
/// matrices for one video, ready for `hc_alignment_loss` at batch size 1.
pub fn per_granularity_rows(bd: &Binder, per_layer: &[DiffArray]) -> Result<Vec<Vec<DiffArray>>> {
    let tape = bd.tape();
    let mut out = Vec::with_capacity(per_layer.len());
    for z in per_layer {
        let (rows, d_v) = (z.shape()[0], z.shape()[1]);
        let mut layer_rows = Vec::with_capacity(rows);
        for g in 0..rows {
            let mut sel = vec![0.0; rows];
            sel[g] = 1.0;
            let sel = tape.constant(crate::array::Array::matrix(1, rows, sel)?)?;
            let row = tape.matmul(&sel, z)?;
            layer_rows.push(tape.reshape(&row, vec![1, d_v])?);
        }
        out.push(layer_rows);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::Array;
    use crate::diff::{grad_check, Tape};
    use crate::streams::derived_rng;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array {
        let mut rng = derived_rng(seed, 3);
        Array::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn output_shape_is_granularities_by_dv_per_layer() {
        let mut rng = derived_rng(61, 1);
        let (m, d_v) = (5, 6);
        let dec = HcDecoder::init(m, d_v, 2, false, &mut rng);
        let tape = Tape::new();
        let bd = Binder::new(&tape);
        let z_hm = tape.constant(random_matrix(m - 1, d_v, 1)).unwrap();
        let z_ctx = tape.constant(random_matrix(m, d_v, 2)).unwrap();
        let layers = dec.decode(&bd, &z_hm, &z_ctx).unwrap();
        assert_eq!(layers.len(), 2);
        for z in &layers {
            assert_eq!(z.shape(), &[m - 1, d_v]);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut rng = derived_rng(62, 1);
        let dec = HcDecoder::init(4, 6, 1, false, &mut rng);
        let tape = Tape::new();
        let bd = Binder::new(&tape);
        let z_hm = tape.constant(random_matrix(3, 6, 3)).unwrap();
        let z_ctx = tape.constant(random_matrix(4, 5, 4)).unwrap();
        assert!(dec.decode(&bd, &z_hm, &z_ctx).is_err());
    }

    /// With the cross-attention value projection and the FFN second layer
    /// zero-initialized, the residual paths force Z_1 = Z_0 exactly.
    #[test]
    fn zeroed_projections_make_the_layer_an_identity() {
        let mut rng = derived_rng(63, 1);
        let (m, d_v) = (4, 5);
        let mut dec = HcDecoder::init(m, d_v, 1, false, &mut rng);
        dec.layers[0].cross_attn.wv = Array::zeros(vec![d_v, d_v]);
        dec.layers[0].ffn.l2.w = Array::zeros(vec![2 * d_v, d_v]);
        dec.layers[0].ffn.l2.b = Array::zeros(vec![d_v]);
        let tape = Tape::new();
        let bd = Binder::new(&tape);
        let z_hm = tape.constant(random_matrix(m - 1, d_v, 5)).unwrap();
        let z_ctx = tape.constant(random_matrix(m, d_v, 6)).unwrap();
        let layers = dec.decode(&bd, &z_hm, &z_ctx).unwrap();
        assert_eq!(layers[0].data(), z_hm.data());
    }

    /// Uniform-attention hook: every granularity row receives the same
    /// context summary through cross-attention.
    #[test]
    fn uniform_attention_gives_every_row_the_same_context_summary() {
        let mut rng = derived_rng(64, 1);
        let (m, d_v) = (5, 4);
        let mut dec = HcDecoder::init(m, d_v, 1, false, &mut rng);
        dec.uniform_attention = true;
        dec.layers[0].ffn.l2.w = Array::zeros(vec![2 * d_v, d_v]);
        dec.layers[0].ffn.l2.b = Array::zeros(vec![d_v]);
        let tape = Tape::new();
        let bd = Binder::new(&tape);
        let z_hm = tape.constant(random_matrix(m - 1, d_v, 7)).unwrap();
        let z_ctx = tape.constant(random_matrix(m, d_v, 8)).unwrap();
        let layers = dec.decode(&bd, &z_hm, &z_ctx).unwrap();
        let added: Vec<Vec<f64>> = (0..m - 1)
            .map(|g| {
                (0..d_v)
                    .map(|j| layers[0].value().at(g, j) - z_hm.value().at(g, j))
                    .collect()
            })
            .collect();
        for g in 1..m - 1 {
            for j in 0..d_v {
                assert!(close(added[g][j], added[0][j], 1e-12));
            }
        }
    }

    #[test]
    fn discriminator_grid_matches_layers_times_granularities() {
        let mut rng = derived_rng(65, 1);
        let dec = HcDecoder::init(5, 4, 2, false, &mut rng);
        assert_eq!(dec.discriminator_count(), 8);
    }

    #[test]
    fn uniform_logit_discriminators_give_lambda_ln2() {
        let mut rng = derived_rng(66, 1);
        let (m, d_v) = (4, 4);
        let mut dec = HcDecoder::init(m, d_v, 2, false, &mut rng);
        for row in dec.discs.iter_mut() {
            for disc in row.iter_mut() {
                for a in [&mut disc.l1, &mut disc.l2] {
                    a.w = Array::zeros(a.w.shape().to_vec());
                    a.b = Array::zeros(a.b.shape().to_vec());
                }
            }
        }
        let tape = Tape::new();
        let bd = Binder::new(&tape);
        let rows: Vec<Vec<DiffArray>> = (0..2)
            .map(|l| {
                (0..m - 1)
                    .map(|g| tape.constant(random_matrix(2, d_v, 10 + (l * 4 + g) as u64)).unwrap())
                    .collect()
            })
            .collect();
        let lambda = 0.25;
        let loss = hc_alignment_loss(&bd, &dec, &rows, &[0, 1], lambda, 1.0).unwrap();
        assert!(close(loss.scalar_value(), lambda * std::f64::consts::LN_2, 1e-12));
    }

    #[test]
    fn decode_plus_alignment_gradient_matches_finite_differences() {
        let mut rng = derived_rng(67, 1);
        let (m, d_v) = (3, 4);
        let dec = HcDecoder::init(m, d_v, 1, false, &mut rng);
        let z_ctx = random_matrix(m, d_v, 11);
        let point = random_matrix(m - 1, d_v, 12);
        let err = grad_check(
            |tape, x| {
                let bd = Binder::with_frozen(tape, vec!["dec.".into()]);
                let ctx = tape.constant(z_ctx.clone())?;
                let layers = dec.decode(&bd, x, &ctx)?;
                let rows = per_granularity_rows(&bd, &layers)?;
                hc_alignment_loss(&bd, &dec, &rows, &[0], 0.25, -1.0)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "decoder alignment grad error {}", err);
    }
}
