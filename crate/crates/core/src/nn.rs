//! Shared building blocks for the encoders, decoder and heads: affine
//! layers, single-head attention, feedforward blocks, two-layer MLPs, and
//! the binder that registers named parameters on a tape.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::array::Array;
use crate::diff::{DiffArray, Gradients, Tape};
use crate::error::Result;

/// Uniform init in ±1/sqrt(fan_in).
pub fn init_weight(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Array {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
        .collect();
    Array::new(vec![fan_in, fan_out], data).expect("init shape")
}

/// Registers named parameters as tape leaves (or constants when frozen),
/// memoized per name, and maps gradients back to names after backward.
pub struct Binder<'t> {
    tape: &'t Tape,
    bound: RefCell<HashMap<String, DiffArray>>,
    frozen_prefixes: Vec<String>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape) -> Self {
        Binder { tape, bound: RefCell::new(HashMap::new()), frozen_prefixes: Vec::new() }
    }

    /// Parameters whose name starts with any of these prefixes are bound as
    /// constants: they join the forward pass but receive no gradient.
    pub fn with_frozen(tape: &'t Tape, frozen_prefixes: Vec<String>) -> Self {
        Binder { tape, bound: RefCell::new(HashMap::new()), frozen_prefixes }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Bind a parameter once per tape; later calls return the same node.
    pub fn param(&self, name: &str, value: &Array) -> Result<DiffArray> {
        if let Some(existing) = self.bound.borrow().get(name) {
            return Ok(existing.clone());
        }
        let bound = if self.is_frozen(name) {
            self.tape.constant(value.clone())?
        } else {
            self.tape.leaf(value.clone())?
        };
        self.bound.borrow_mut().insert(name.to_string(), bound.clone());
        Ok(bound)
    }

    /// Gradients for every bound, unfrozen parameter, by name.
    pub fn named_grads(&self, grads: &Gradients) -> HashMap<String, Array> {
        let mut out = HashMap::new();
        for (name, node) in self.bound.borrow().iter() {
            if self.is_frozen(name) {
                continue;
            }
            if let Some(g) = grads.wrt(node) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

/// Callback used to enumerate parameters for checkpoints and optimizers.
pub type ParamVisitor<'a, 'f> = dyn FnMut(String, &'a Array) + 'f;
pub type ParamVisitorMut<'a, 'f> = dyn FnMut(String, &'a mut Array) + 'f;

// ---------------------------------------------------------------------------
// Affine layer
// ---------------------------------------------------------------------------

/// y = x·W + b.
#[derive(Clone, Debug)]
pub struct AffineParams {
    pub w: Array,
    pub b: Array,
}

impl AffineParams {
    pub fn init(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        AffineParams { w: init_weight(d_in, d_out, rng), b: Array::zeros(vec![d_out]) }
    }

    pub fn forward(&self, bd: &Binder, name: &str, x: &DiffArray) -> Result<DiffArray> {
        let w = bd.param(&format!("{name}.w"), &self.w)?;
        let b = bd.param(&format!("{name}.b"), &self.b)?;
        bd.tape().affine(x, &w, &b)
    }

    pub fn visit<'a>(&'a self, name: &str, f: &mut ParamVisitor<'a, '_>) {
        f(format!("{name}.w"), &self.w);
        f(format!("{name}.b"), &self.b);
    }

    pub fn visit_mut<'a>(&'a mut self, name: &str, f: &mut ParamVisitorMut<'a, '_>) {
        f(format!("{name}.w"), &mut self.w);
        f(format!("{name}.b"), &mut self.b);
    }
}

// ---------------------------------------------------------------------------
// Single-head scaled dot-product attention (no biases, no output projection)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AttnParams {
    pub wq: Array,
    pub wk: Array,
    pub wv: Array,
}

impl AttnParams {
    pub fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        AttnParams {
            wq: init_weight(d, d, rng),
            wk: init_weight(d, d, rng),
            wv: init_weight(d, d, rng),
        }
    }

    /// Attend queries over keys/values; `queries == keys_values` gives
    /// self-attention. Set `uniform_weights` to bypass the learned scores
    /// with a uniform distribution (test hook for attention-free baselines).
    pub fn attend(
        &self,
        bd: &Binder,
        name: &str,
        queries: &DiffArray,
        keys_values: &DiffArray,
        uniform_weights: bool,
    ) -> Result<DiffArray> {
        let tape = bd.tape();
        let wv = bd.param(&format!("{name}.wv"), &self.wv)?;
        let v = tape.matmul(keys_values, &wv)?;
        if uniform_weights {
            let n = queries.shape()[0];
            let m = keys_values.shape()[0];
            let w = tape.constant(Array::full(vec![n, m], 1.0 / m as f64))?;
            return tape.matmul(&w, &v);
        }
        let wq = bd.param(&format!("{name}.wq"), &self.wq)?;
        let wk = bd.param(&format!("{name}.wk"), &self.wk)?;
        let q = tape.matmul(queries, &wq)?;
        let k = tape.matmul(keys_values, &wk)?;
        tape.attention(&q, &k, &v)
    }

    pub fn visit<'a>(&'a self, name: &str, f: &mut ParamVisitor<'a, '_>) {
        f(format!("{name}.wq"), &self.wq);
        f(format!("{name}.wk"), &self.wk);
        f(format!("{name}.wv"), &self.wv);
    }

    pub fn visit_mut<'a>(&'a mut self, name: &str, f: &mut ParamVisitorMut<'a, '_>) {
        f(format!("{name}.wq"), &mut self.wq);
        f(format!("{name}.wk"), &mut self.wk);
        f(format!("{name}.wv"), &mut self.wv);
    }
}

// ---------------------------------------------------------------------------
// Two-layer blocks
// ---------------------------------------------------------------------------

/// Two affine layers with a relu between: d_in -> hidden -> d_out. Used for
/// the TRN units, the feedforward blocks and the domain discriminators.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub l1: AffineParams,
    pub l2: AffineParams,
}

impl MlpParams {
    pub fn init(d_in: usize, hidden: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        MlpParams {
            l1: AffineParams::init(d_in, hidden, rng),
            l2: AffineParams::init(hidden, d_out, rng),
        }
    }

    pub fn forward(&self, bd: &Binder, name: &str, x: &DiffArray) -> Result<DiffArray> {
        let h = self.l1.forward(bd, &format!("{name}.l1"), x)?;
        let h = bd.tape().relu(&h)?;
        self.l2.forward(bd, &format!("{name}.l2"), &h)
    }

    pub fn visit<'a>(&'a self, name: &str, f: &mut ParamVisitor<'a, '_>) {
        self.l1.visit(&format!("{name}.l1"), f);
        self.l2.visit(&format!("{name}.l2"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, name: &str, f: &mut ParamVisitorMut<'a, '_>) {
        self.l1.visit_mut(&format!("{name}.l1"), f);
        self.l2.visit_mut(&format!("{name}.l2"), f);
    }
}

/// Pre-norm residual feedforward block: x + MLP(LN(x)).
pub fn ffn_block(ffn: &MlpParams, bd: &Binder, name: &str, x: &DiffArray) -> Result<DiffArray> {
    let tape = bd.tape();
    let normed = tape.layer_norm(x)?;
    let out = ffn.forward(bd, name, &normed)?;
    tape.add(x, &out)
}

/// A domain discriminator: gradient reversal, then a two-layer MLP to
/// 2-class logits, then mean cross-entropy against the domain labels. Every
/// row of `features` carries the label at the same index.
pub fn domain_loss(
    disc: &MlpParams,
    bd: &Binder,
    name: &str,
    features: &DiffArray,
    domain_labels: &[usize],
    grl_coeff: f64,
) -> Result<DiffArray> {
    let reversed = bd.tape().grad_reverse(features, grl_coeff)?;
    let logits = disc.forward(bd, name, &reversed)?;
    bd.tape().cross_entropy(&logits, domain_labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::derived_rng;

    #[test]
    fn binder_memoizes_and_freezes() {
        let tape = Tape::new();
        let bd = Binder::with_frozen(&tape, vec!["frozen.".into()]);
        let p = Array::vector(vec![1.0, 2.0]);
        let a = bd.param("live.w", &p).unwrap();
        let b = bd.param("live.w", &p).unwrap();
        assert_eq!(a.tape_id(), b.tape_id());
        let f = bd.param("frozen.w", &p).unwrap();
        let live_sum = tape.sum_all(&a).unwrap();
        let frozen_sum = tape.sum_all(&f).unwrap();
        let loss = tape.add(&live_sum, &frozen_sum).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.wrt(&a).is_some());
        assert!(grads.wrt(&f).is_none());
        let named = bd.named_grads(&grads);
        assert!(named.contains_key("live.w"));
        assert!(!named.contains_key("frozen.w"));
    }

    #[test]
    fn init_weight_respects_fan_in_bound() {
        let mut rng = derived_rng(3, 1);
        let w = init_weight(16, 8, &mut rng);
        let bound = 1.0 / 4.0;
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(w.data().iter().any(|v| v.abs() > bound * 0.1));
    }

    #[test]
    fn uniform_attention_rows_share_the_same_summary() {
        let mut rng = derived_rng(4, 1);
        let attn = AttnParams::init(3, &mut rng);
        let tape = Tape::new();
        let bd = Binder::new(&tape);
        let q = tape
            .constant(Array::matrix(2, 3, vec![5.0, -1.0, 2.0, 0.0, 0.5, -3.0]).unwrap())
            .unwrap();
        let kv = tape
            .constant(Array::matrix(4, 3, (0..12).map(|i| i as f64 * 0.3).collect()).unwrap())
            .unwrap();
        let out = attn.attend(&bd, "t", &q, &kv, true).unwrap();
        assert_eq!(&out.data()[..3], &out.data()[3..]);
    }

    #[test]
    fn domain_loss_with_zeroed_discriminator_is_ln2() {
        let mut rng = derived_rng(5, 1);
        let mut disc = MlpParams::init(4, 4, 2, &mut rng);
        for a in [&mut disc.l1, &mut disc.l2] {
            a.w = Array::zeros(a.w.shape().to_vec());
            a.b = Array::zeros(a.b.shape().to_vec());
        }
        let tape = Tape::new();
        let bd = Binder::new(&tape);
        let feats = tape.constant(Array::matrix(3, 4, vec![0.7; 12]).unwrap()).unwrap();
        let loss = domain_loss(&disc, &bd, "d", &feats, &[0, 1, 0], 1.0).unwrap();
        assert!((loss.scalar_value() - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
