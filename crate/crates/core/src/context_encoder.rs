//! Action-correlated temporal modeling for contexts: project per-clip
//! context means and prototype vectors into the modeling space, then run
//! L_e layers of self-attention plus prototype cross-attention, with
//! per-layer cross-domain alignment on the clip tokens.

use rand_chacha::ChaCha8Rng;

use crate::array::Array;
use crate::diff::DiffArray;
use crate::error::{HctError, Result};
use crate::nn::{ffn_block, AffineParams, AttnParams, Binder, MlpParams, ParamVisitor, ParamVisitorMut};

/// One encoder layer. The prototype stream runs through the same attention
/// modules; when `separate` parameters are configured it gets its own copy.
#[derive(Clone, Debug)]
pub struct CtxLayer {
    pub self_attn: AttnParams,
    pub cross_attn: AttnParams,
    pub ffn: MlpParams,
    pub proto_self_attn: Option<AttnParams>,
    pub proto_cross_attn: Option<AttnParams>,
    pub proto_ffn: Option<MlpParams>,
}

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub proj: AffineParams,
    /// Learned additive position encoding per clip slot, `[M, D_v]`; applied
    /// to clip tokens only.
    pub pos_enc: Array,
    pub layers: Vec<CtxLayer>,
    pub discs: Vec<MlpParams>,
    /// When false, the prototype stream is dropped and each layer reduces to
    /// FFN(SelfAttn(Z)).
    pub use_prototypes: bool,
}

impl ContextEncoder {
    pub fn init(
        m: usize,
        d: usize,
        d_v: usize,
        n_layers: usize,
        use_prototypes: bool,
        separate_prototype_stream: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|_| {
                let base = CtxLayer {
                    self_attn: AttnParams::init(d_v, rng),
                    cross_attn: AttnParams::init(d_v, rng),
                    ffn: MlpParams::init(d_v, 2 * d_v, d_v, rng),
                    proto_self_attn: None,
                    proto_cross_attn: None,
                    proto_ffn: None,
                };
                if separate_prototype_stream && use_prototypes {
                    CtxLayer {
                        proto_self_attn: Some(AttnParams::init(d_v, rng)),
                        proto_cross_attn: Some(AttnParams::init(d_v, rng)),
                        proto_ffn: Some(MlpParams::init(d_v, 2 * d_v, d_v, rng)),
                        ..base
                    }
                } else {
                    base
                }
            })
            .collect();
        let discs = (0..n_layers).map(|_| MlpParams::init(d_v, d_v, 2, rng)).collect();
        ContextEncoder {
            proj: AffineParams::init(d, d_v, rng),
            pos_enc: Array::zeros(vec![m, d_v]),
            layers,
            discs,
            use_prototypes,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Build the layer-0 tokens. `clip_context_means` holds one `[D]` vector
    /// per clip: the mean over that clip's context positions, or `None` for
    /// an all-human clip (which contributes a zero vector before Proj).
    /// Prototypes are projected with the same map but get no position
    /// encoding.
    pub fn context_inputs(
        &self,
        bd: &Binder,
        clip_context_means: &[Option<DiffArray>],
        bank: Option<&DiffArray>,
    ) -> Result<(DiffArray, Option<DiffArray>)> {
        let tape = bd.tape();
        let m = self.pos_enc.shape()[0];
        let d = self.proj.w.shape()[0];
        if clip_context_means.len() != m {
            return Err(HctError::ShapeMismatch {
                op: "context_inputs".into(),
                detail: format!("{} clips for an encoder built for M = {}", clip_context_means.len(), m),
            });
        }
        let zero = tape.constant(Array::zeros(vec![d]))?;
        let rows: Vec<&DiffArray> = clip_context_means
            .iter()
            .map(|opt| opt.as_ref().unwrap_or(&zero))
            .collect();
        let stacked = tape.stack_rows(&rows)?;
        let projected = self.proj.forward(bd, "ctx.proj", &stacked)?;
        let pe = bd.param("ctx.pe", &self.pos_enc)?;
        let clip_tokens = tape.add(&projected, &pe)?;
        let proto_tokens = match (self.use_prototypes, bank) {
            (true, Some(bank)) => Some(self.proj.forward(bd, "ctx.proj", bank)?),
            (true, None) => {
                return Err(HctError::Contract("context encoder expects a prototype bank".into()));
            }
            (false, _) => None,
        };
        Ok((clip_tokens, proto_tokens))
    }

    /// Run the L_e layers. Returns every layer's clip-token matrix (the
    /// last entry is Z^ctx) and the final prototype tokens.
    pub fn encode(
        &self,
        bd: &Binder,
        clip_tokens: DiffArray,
        proto_tokens: Option<DiffArray>,
    ) -> Result<(Vec<DiffArray>, Option<DiffArray>)> {
        let tape = bd.tape();
        let mut z = clip_tokens;
        let mut c = proto_tokens;
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let base = format!("ctx.layer{}", li + 1);
            let ln_z = tape.layer_norm(&z)?;
            match &c {
                Some(cur_c) => {
                    let ln_c = tape.layer_norm(cur_c)?;
                    let z_self = layer.self_attn.attend(bd, &format!("{base}.self"), &ln_z, &ln_z, false)?;
                    let z_cross = layer.cross_attn.attend(bd, &format!("{base}.cross"), &ln_z, &ln_c, false)?;
                    let z_mid = tape.add(&tape.add(&z, &z_self)?, &z_cross)?;
                    let z_next = ffn_block(&layer.ffn, bd, &format!("{base}.ffn"), &z_mid)?;

                    // Prototype stream through the identical modules (or its
                    // own copies when configured separate).
                    let p_self = layer.proto_self_attn.as_ref().unwrap_or(&layer.self_attn);
                    let p_cross = layer.proto_cross_attn.as_ref().unwrap_or(&layer.cross_attn);
                    let p_ffn = layer.proto_ffn.as_ref().unwrap_or(&layer.ffn);
                    let (self_name, cross_name, ffn_name) = if layer.proto_self_attn.is_some() {
                        (
                            format!("{base}.proto_self"),
                            format!("{base}.proto_cross"),
                            format!("{base}.proto_ffn"),
                        )
                    } else {
                        (format!("{base}.self"), format!("{base}.cross"), format!("{base}.ffn"))
                    };
                    let c_self = p_self.attend(bd, &self_name, &ln_c, &ln_c, false)?;
                    let c_cross = p_cross.attend(bd, &cross_name, &ln_c, &ln_z, false)?;
                    let c_mid = tape.add(&tape.add(cur_c, &c_self)?, &c_cross)?;
                    let c_next = ffn_block(p_ffn, bd, &ffn_name, &c_mid)?;

                    z = z_next;
                    c = Some(c_next);
                }
                None => {
                    let z_self = layer.self_attn.attend(bd, &format!("{base}.self"), &ln_z, &ln_z, false)?;
                    let z_mid = tape.add(&z, &z_self)?;
                    z = ffn_block(&layer.ffn, bd, &format!("{base}.ffn"), &z_mid)?;
                }
            }
            per_layer.push(z.clone());
        }
        Ok((per_layer, c))
    }

    pub fn visit<'a>(&'a self, f: &mut ParamVisitor<'a, '_>) {
        self.proj.visit("ctx.proj", f);
        f("ctx.pe".into(), &self.pos_enc);
        for (li, layer) in self.layers.iter().enumerate() {
            let base = format!("ctx.layer{}", li + 1);
            layer.self_attn.visit(&format!("{base}.self"), f);
            layer.cross_attn.visit(&format!("{base}.cross"), f);
            layer.ffn.visit(&format!("{base}.ffn"), f);
            if let Some(a) = &layer.proto_self_attn {
                a.visit(&format!("{base}.proto_self"), f);
            }
            if let Some(a) = &layer.proto_cross_attn {
                a.visit(&format!("{base}.proto_cross"), f);
            }
            if let Some(m) = &layer.proto_ffn {
                m.visit(&format!("{base}.proto_ffn"), f);
            }
        }
        for (li, d) in self.discs.iter().enumerate() {
            d.visit(&format!("ctx.disc{}", li + 1), f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut ParamVisitorMut<'a, '_>) {
        self.proj.visit_mut("ctx.proj", f);
        f("ctx.pe".into(), &mut self.pos_enc);
        for (li, layer) in self.layers.iter_mut().enumerate() {
            let base = format!("ctx.layer{}", li + 1);
            layer.self_attn.visit_mut(&format!("{base}.self"), f);
            layer.cross_attn.visit_mut(&format!("{base}.cross"), f);
            layer.ffn.visit_mut(&format!("{base}.ffn"), f);
            if let Some(a) = &mut layer.proto_self_attn {
                a.visit_mut(&format!("{base}.proto_self"), f);
            }
            if let Some(a) = &mut layer.proto_cross_attn {
                a.visit_mut(&format!("{base}.proto_cross"), f);
            }
            if let Some(m) = &mut layer.proto_ffn {
                m.visit_mut(&format!("{base}.proto_ffn"), f);
            }
        }
        for (li, d) in self.discs.iter_mut().enumerate() {
            d.visit_mut(&format!("ctx.disc{}", li + 1), f);
        }
    }
}

/// lambda/L_e times the summed per-layer domain cross-entropy over clip
/// tokens, through gradient reversal. `per_layer[l]` stacks every clip token
/// in the batch at layer l+1; `token_domains` labels each row. Prototype
/// tokens are never fed to the discriminators.
pub fn context_alignment_loss(
    bd: &Binder,
    enc: &ContextEncoder,
    per_layer: &[DiffArray],
    token_domains: &[usize],
    lambda_ctx: f64,
    grl_coeff: f64,
) -> Result<DiffArray> {
    let tape = bd.tape();
    if per_layer.len() != enc.discs.len() {
        return Err(HctError::ShapeMismatch {
            op: "context_alignment_loss".into(),
            detail: format!("{} layer outputs for {} discriminators", per_layer.len(), enc.discs.len()),
        });
    }
    let mut total = tape.zero_scalar()?;
    for (li, tokens) in per_layer.iter().enumerate() {
        let term = crate::nn::domain_loss(
            &enc.discs[li],
            bd,
            &format!("ctx.disc{}", li + 1),
            tokens,
            token_domains,
            grl_coeff,
        )?;
        total = tape.add(&total, &term)?;
    }
    tape.scale(&total, lambda_ctx / enc.n_layers() as f64)
}
