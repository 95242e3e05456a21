//! Parameterized layers: the path-keyed parameter store, initialization
//! schemes, multi-head attention, and the pre-norm transformer layer.
//!
//! Parameters live in a `ParamStore` keyed by dotted paths
//! (`fusion.txt.layer0.self.q.w`). A forward pass first binds the whole
//! store onto a tape, then layer helpers resolve the vars they need by
//! prefix. The `pretrained` flag on each parameter is what the training
//! engine partitions learning-rate groups by.

use std::collections::{BTreeMap, HashMap};

use crate::error::{CoreError, Result};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

pub const TRUNC_NORMAL_SIGMA: f64 = 0.02;

/// A named model parameter. `pretrained` marks membership in the
/// lower-learning-rate group once weights were carried over from a
/// previous run; it is fixed at model construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub pretrained: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    TruncNormal { sigma: f64 },
    Zeros,
    Ones,
}

/// Deterministic parameter init: the draw stream is keyed by the parameter
/// path, so adding or reordering other parameters never shifts values.
pub fn init_tensor(factory: &SeededRng, path: &str, shape: Vec<usize>, scheme: InitScheme) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = match scheme {
        InitScheme::Zeros => vec![0.0; numel],
        InitScheme::Ones => vec![1.0; numel],
        InitScheme::TruncNormal { sigma } => {
            let mut rng = factory.stream(&format!("init:{path}"));
            (0..numel).map(|_| trunc_normal(&mut rng, sigma)).collect()
        }
    };
    let mut t = Tensor::new(shape, data).expect("init tensors are finite");
    t.requires_grad = true;
    t
}

fn trunc_normal(rng: &mut ChaCha12Rng, sigma: f64) -> f64 {
    // Box-Muller; u1 shifted into (0, 1] to keep the log finite.
    // Tails are clamped to +-2 sigma, which keeps the sample std within a
    // couple percent of sigma (rejection resampling would shrink it ~12%).
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    let v = sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    v.clamp(-2.0 * sigma, 2.0 * sigma)
}

/// Ordered path -> parameter map. BTreeMap keeps iteration (and therefore
/// checkpoints and optimizer updates) in a stable order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: &str, tensor: Tensor) {
        debug_assert!(!self.map.contains_key(path), "duplicate parameter {path}");
        self.map.insert(path.to_string(), Param { tensor, pretrained: false });
    }

    pub fn init(&mut self, factory: &SeededRng, path: &str, shape: Vec<usize>, scheme: InitScheme) {
        self.insert(path, init_tensor(factory, path, shape, scheme));
    }

    pub fn get(&self, path: &str) -> &Param {
        self.map
            .get(path)
            .unwrap_or_else(|| panic!("unknown parameter path {path}"))
    }

    pub fn get_mut(&mut self, path: &str) -> &mut Param {
        self.map
            .get_mut(path)
            .unwrap_or_else(|| panic!("unknown parameter path {path}"))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.map.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(|p| p.tensor.numel()).sum()
    }

    /// Flags every parameter whose path starts with `prefix` as pretrained.
    pub fn mark_pretrained(&mut self, prefix: &str) {
        for (path, p) in self.map.iter_mut() {
            if path.starts_with(prefix) {
                p.pretrained = true;
            }
        }
    }

    /// Drops every parameter whose path starts with `prefix` (temporary
    /// heads, e.g. the unimodal-proxy ones).
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.map.retain(|path, _| !path.starts_with(prefix));
    }

    pub fn zero_grads(&mut self) {
        for p in self.map.values_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut vars = HashMap::with_capacity(self.map.len());
        for (path, p) in &self.map {
            vars.insert(path.clone(), tape.leaf(&p.tensor));
        }
        Bound { vars }
    }

    /// Pulls gradients of the last backward pass into the parameter buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (path, p) in self.map.iter_mut() {
            if let Some(g) = bound.vars.get(path).and_then(|v| tape.grad(*v)) {
                p.tensor.accumulate_grad(g);
            }
        }
    }
}

/// Parameter paths bound onto a specific tape.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, path: &str) -> Var {
        *self
            .vars
            .get(path)
            .unwrap_or_else(|| panic!("parameter {path} not bound"))
    }

    /// Rebinds one path to a different var; used by gradient checks to
    /// substitute a probe tensor for a single parameter.
    pub fn insert_override(&mut self, path: &str, v: Var) {
        self.vars.insert(path.to_string(), v);
    }
}

// ---- layer initializers ----------------------------------------------------

/// Fan-in-scaled weight sigma. The classic 0.02 constant is tuned for
/// width-768 encoders; at desk-scale widths it starves every sublayer of
/// signal (transfer scales with sigma^2 * d), so weights are drawn at
/// 1/sqrt(fan_in) instead, which reproduces the reference-width ratios.
pub fn weight_sigma(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

pub fn init_linear(store: &mut ParamStore, factory: &SeededRng, prefix: &str, din: usize, dout: usize) {
    store.init(
        factory,
        &format!("{prefix}.w"),
        vec![din, dout],
        InitScheme::TruncNormal { sigma: weight_sigma(din) },
    );
    store.init(factory, &format!("{prefix}.b"), vec![dout], InitScheme::Zeros);
}

pub fn init_layer_norm(store: &mut ParamStore, factory: &SeededRng, prefix: &str, d: usize) {
    store.init(factory, &format!("{prefix}.g"), vec![d], InitScheme::Ones);
    store.init(factory, &format!("{prefix}.b"), vec![d], InitScheme::Zeros);
}

pub fn init_attention(store: &mut ParamStore, factory: &SeededRng, prefix: &str, width: usize) {
    for name in ["q", "v", "o"] {
        init_linear(store, factory, &format!("{prefix}.{name}"), width, width);
    }
    // no key bias: softmax scores are invariant to a per-query constant
    // shift, so a key bias would be a permanently gradient-free parameter
    store.init(
        factory,
        &format!("{prefix}.k.w"),
        vec![width, width],
        InitScheme::TruncNormal { sigma: weight_sigma(width) },
    );
}

/// One pre-norm transformer layer; `fusion` adds the cross-attention
/// sublayer and its norm.
pub fn init_transformer_layer(
    store: &mut ParamStore,
    factory: &SeededRng,
    prefix: &str,
    width: usize,
    ffn_hidden: usize,
    fusion: bool,
) {
    init_layer_norm(store, factory, &format!("{prefix}.ln1"), width);
    init_attention(store, factory, &format!("{prefix}.self"), width);
    if fusion {
        init_layer_norm(store, factory, &format!("{prefix}.lnx"), width);
        init_attention(store, factory, &format!("{prefix}.cross"), width);
    }
    init_layer_norm(store, factory, &format!("{prefix}.ln2"), width);
    init_linear(store, factory, &format!("{prefix}.fc1"), width, ffn_hidden);
    init_linear(store, factory, &format!("{prefix}.fc2"), ffn_hidden, width);
}

// ---- forward helpers ---------------------------------------------------------

/// Dropout / train-eval state threaded through forward passes.
pub struct ForwardCtx {
    pub train: bool,
    pub dropout: f64,
    pub rng: ChaCha12Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            dropout: 0.0,
            rng: SeededRng::new(0).stream("eval-dropout"),
        }
    }

    pub fn train(dropout: f64, rng: ChaCha12Rng) -> Self {
        ForwardCtx { train: true, dropout, rng }
    }
}

/// Per-example key visibility. Queries attend only to visible key
/// positions; a batch row with no visible key is rejected up front so
/// attention can never softmax over an empty set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyMask {
    pub batch: usize,
    pub len: usize,
    pub visible: Vec<bool>,
}

impl KeyMask {
    pub fn new(batch: usize, len: usize, visible: Vec<bool>) -> Result<Self> {
        if visible.len() != batch * len {
            return Err(CoreError::DimensionMismatch {
                op: "key_mask",
                lhs: vec![batch, len],
                rhs: vec![visible.len()],
            });
        }
        for b in 0..batch {
            if !visible[b * len..(b + 1) * len].iter().any(|v| *v) {
                return Err(CoreError::Contract(format!(
                    "fully masked key row for batch element {b}"
                )));
            }
        }
        Ok(KeyMask { batch, len, visible })
    }

    pub fn all_visible(batch: usize, len: usize) -> Self {
        KeyMask { batch, len, visible: vec![true; batch * len] }
    }

    /// Additive pre-softmax mask, broadcast over heads and query positions.
    fn additive(&self, tape: &mut Tape) -> Var {
        let data: Vec<f64> = self
            .visible
            .iter()
            .map(|&v| if v { 0.0 } else { -1e30 })
            .collect();
        tape.constant(Tensor {
            shape: vec![self.batch, 1, 1, self.len],
            data,
            requires_grad: false,
            grad: None,
        })
    }
}

pub fn linear(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.matmul(x, bound.var(&format!("{prefix}.w")))?;
    tape.add(h, bound.var(&format!("{prefix}.b")))
}

pub fn linear_no_bias(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    tape.matmul(x, bound.var(&format!("{prefix}.w")))
}

pub fn layer_norm_at(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    tape.layer_norm(
        x,
        bound.var(&format!("{prefix}.g")),
        bound.var(&format!("{prefix}.b")),
        1e-5,
    )
}

/// Softmaxed per-head attention over already-projected q, k, v. Returns the
/// mixed values before the output projection; exposed separately so tests
/// can probe the pre-projection contract.
pub fn attention_core(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: &KeyMask,
    heads: usize,
) -> Result<Var> {
    let scores = tape.attention_scores(q, k, heads)?;
    let add_mask = mask.additive(tape);
    let masked = tape.add(scores, add_mask)?;
    let probs = tape.softmax(masked, 3)?;
    tape.attention_mix(probs, v, heads)
}

/// Full multi-head attention block: project queries from one sequence and
/// keys/values from another (the same one for self-attention), attend, and
/// apply the output projection.
pub fn multi_head_attention(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    queries_from: Var,
    keys_values_from: Var,
    mask: &KeyMask,
    heads: usize,
) -> Result<Var> {
    let wq = tape.shape(queries_from).to_vec();
    let wk = tape.shape(keys_values_from).to_vec();
    if wq.last() != wk.last() {
        return Err(CoreError::DimensionMismatch {
            op: "multi_head_attention",
            lhs: wq,
            rhs: wk,
        });
    }
    if wk[1] != mask.len || wk[0] != mask.batch {
        return Err(CoreError::DimensionMismatch {
            op: "multi_head_attention_mask",
            lhs: wk,
            rhs: vec![mask.batch, mask.len],
        });
    }
    let q = linear(tape, bound, &format!("{prefix}.q"), queries_from)?;
    let k = linear_no_bias(tape, bound, &format!("{prefix}.k"), keys_values_from)?;
    let v = linear(tape, bound, &format!("{prefix}.v"), keys_values_from)?;
    let mixed = attention_core(tape, q, k, v, mask, heads)?;
    linear(tape, bound, &format!("{prefix}.o"), mixed)
}

/// Pre-norm residual transformer layer. Sublayers apply in fixed order:
/// self-attention, then (fusion layers only) cross-attention on
/// `cross_source`, then the feed-forward block.
#[allow(clippy::too_many_arguments)]
pub fn transformer_layer(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: Var,
    self_mask: &KeyMask,
    cross: Option<(Var, &KeyMask)>,
    fusion: bool,
    heads: usize,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    if fusion != cross.is_some() {
        return Err(CoreError::Contract(if fusion {
            format!("fusion layer {prefix} called without a cross source")
        } else {
            format!("non-fusion layer {prefix} called with a cross source")
        }));
    }
    let mut h = x;
    let normed = layer_norm_at(tape, bound, &format!("{prefix}.ln1"), h)?;
    let a = multi_head_attention(
        tape,
        bound,
        &format!("{prefix}.self"),
        normed,
        normed,
        self_mask,
        heads,
    )?;
    let a = tape.dropout(a, ctx.dropout, &mut ctx.rng, ctx.train)?;
    h = tape.add(h, a)?;

    if let Some((src, cross_mask)) = cross {
        let normed = layer_norm_at(tape, bound, &format!("{prefix}.lnx"), h)?;
        let c = multi_head_attention(
            tape,
            bound,
            &format!("{prefix}.cross"),
            normed,
            src,
            cross_mask,
            heads,
        )?;
        let c = tape.dropout(c, ctx.dropout, &mut ctx.rng, ctx.train)?;
        h = tape.add(h, c)?;
    }

    let normed = layer_norm_at(tape, bound, &format!("{prefix}.ln2"), h)?;
    let f = linear(tape, bound, &format!("{prefix}.fc1"), normed)?;
    let f = tape.gelu(f)?;
    let f = linear(tape, bound, &format!("{prefix}.fc2"), f)?;
    let f = tape.dropout(f, ctx.dropout, &mut ctx.rng, ctx.train)?;
    tape.add(h, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_store(width: usize, fusion: bool) -> (ParamStore, SeededRng) {
        let factory = SeededRng::new(42);
        let mut store = ParamStore::new();
        init_transformer_layer(&mut store, &factory, "layer", width, width * 4, fusion);
        (store, factory)
    }

    fn random_seq(factory: &SeededRng, label: &str, b: usize, l: usize, d: usize) -> Tensor {
        let mut rng = factory.stream(label);
        let data: Vec<f64> = (0..b * l * d).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
        Tensor::new(vec![b, l, d], data).unwrap()
    }

    #[test]
    fn init_zeros_scheme() {
        let f = SeededRng::new(1);
        let t = init_tensor(&f, "p", vec![3, 3], InitScheme::Zeros);
        assert!(t.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn trunc_normal_moments_and_clip() {
        let f = SeededRng::new(1);
        let t = init_tensor(
            &f,
            "p",
            vec![10_000],
            InitScheme::TruncNormal { sigma: 0.02 },
        );
        let sigma = (t.data.iter().map(|v| v * v).sum::<f64>() / t.data.len() as f64).sqrt();
        assert!((0.018..=0.022).contains(&sigma), "sigma {sigma}");
        assert!(t.data.iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn init_is_deterministic_per_path() {
        let f = SeededRng::new(7);
        let a = init_tensor(&f, "enc.w", vec![8], InitScheme::TruncNormal { sigma: 0.02 });
        let b = init_tensor(&f, "enc.w", vec![8], InitScheme::TruncNormal { sigma: 0.02 });
        let c = init_tensor(&f, "enc.v", vec![8], InitScheme::TruncNormal { sigma: 0.02 });
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn uniform_attention_when_keys_identical() {
        // all keys identical -> weights uniform -> every query gets the mean value
        let factory = SeededRng::new(3);
        let mut store = ParamStore::new();
        init_attention(&mut store, &factory, "att", 8);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let q = tape.constant(random_seq(&factory, "q", 1, 2, 8));
        let key_row: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let mut kv_data = Vec::new();
        for _ in 0..3 {
            kv_data.extend_from_slice(&key_row);
        }
        let kv = tape.constant(Tensor::new(vec![1, 3, 8], kv_data).unwrap());
        let mask = KeyMask::all_visible(1, 3);
        let out = multi_head_attention(&mut tape, &bound, "att", q, kv, &mask, 2).unwrap();
        let o = &tape.value(out).data;
        for c in 0..8 {
            assert!((o[c] - o[8 + c]).abs() < 1e-12, "query rows must agree");
        }
    }

    #[test]
    fn degenerate_mask_selects_single_value() {
        let factory = SeededRng::new(4);
        let mut tape = Tape::new();
        let q = tape.constant(random_seq(&factory, "q", 1, 2, 6));
        let k = tape.constant(random_seq(&factory, "k", 1, 4, 6));
        let v = tape.constant(random_seq(&factory, "v", 1, 4, 6));
        let j = 2;
        let visible: Vec<bool> = (0..4).map(|i| i == j).collect();
        let mask = KeyMask::new(1, 4, visible).unwrap();
        let out = attention_core(&mut tape, q, k, v, &mask, 3).unwrap();
        let o = &tape.value(out).data;
        let vv = &tape.value(v).data;
        for query in 0..2 {
            for c in 0..6 {
                assert!(
                    (o[query * 6 + c] - vv[j * 6 + c]).abs() < 1e-12,
                    "masked attention must return value_j exactly"
                );
            }
        }
    }

    #[test]
    fn single_head_attention_matches_explicit_loop_oracle() {
        let factory = SeededRng::new(5);
        let (lq, lk, d) = (2, 3, 4);
        let qt = random_seq(&factory, "q", 1, lq, d);
        let kt = random_seq(&factory, "k", 1, lk, d);
        let vt = random_seq(&factory, "v", 1, lk, d);

        // independent explicit-loop attention oracle
        let scale = 1.0 / (d as f64).sqrt();
        let mut want = vec![0.0; lq * d];
        for i in 0..lq {
            let mut scores = vec![0.0; lk];
            for j in 0..lk {
                for c in 0..d {
                    scores[j] += qt.data[i * d + c] * kt.data[j * d + c];
                }
                scores[j] *= scale;
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..lk {
                for c in 0..d {
                    want[i * d + c] += exps[j] / z * vt.data[j * d + c];
                }
            }
        }

        let mut tape = Tape::new();
        let q = tape.constant(qt);
        let k = tape.constant(kt);
        let v = tape.constant(vt);
        let mask = KeyMask::all_visible(1, lk);
        let out = attention_core(&mut tape, q, k, v, &mask, 1).unwrap();
        for (a, b) in tape.value(out).data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn fully_masked_row_is_a_contract_error() {
        assert!(matches!(
            KeyMask::new(1, 3, vec![false, false, false]),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn layer_with_zero_output_projections_is_identity() {
        let width = 8;
        let (mut store, factory) = toy_store(width, false);
        store.get_mut("layer.self.o.w").tensor.data.fill(0.0);
        store.get_mut("layer.fc2.w").tensor.data.fill(0.0);
        let x = random_seq(&factory, "x", 2, 3, width);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let mask = KeyMask::all_visible(2, 3);
        let mut ctx = ForwardCtx::eval();
        let y = transformer_layer(&mut tape, &bound, "layer", xv, &mask, None, false, 2, &mut ctx)
            .unwrap();
        assert_eq!(tape.value(y).data, x.data);
    }

    #[test]
    fn layer_preserves_shape() {
        let (store, factory) = toy_store(8, true);
        let x = random_seq(&factory, "x", 2, 5, 8);
        let src = random_seq(&factory, "s", 2, 4, 8);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(x);
        let sv = tape.constant(src);
        let self_mask = KeyMask::all_visible(2, 5);
        let cross_mask = KeyMask::all_visible(2, 4);
        let mut ctx = ForwardCtx::eval();
        let y = transformer_layer(
            &mut tape,
            &bound,
            "layer",
            xv,
            &self_mask,
            Some((sv, &cross_mask)),
            true,
            2,
            &mut ctx,
        )
        .unwrap();
        assert_eq!(tape.shape(y), &[2, 5, 8]);
    }

    #[test]
    fn fusion_layer_without_source_is_contract_error() {
        let (store, factory) = toy_store(8, true);
        let x = random_seq(&factory, "x", 1, 3, 8);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(x);
        let mask = KeyMask::all_visible(1, 3);
        let mut ctx = ForwardCtx::eval();
        let r = transformer_layer(&mut tape, &bound, "layer", xv, &mask, None, true, 2, &mut ctx);
        assert!(matches!(r, Err(CoreError::Contract(_))));
    }

    #[test]
    fn attention_weights_are_convex_combinations() {
        // checked through the softmax node: nonnegative, sums to 1 over visible keys
        let factory = SeededRng::new(8);
        let mut tape = Tape::new();
        let q = tape.constant(random_seq(&factory, "q", 2, 3, 6));
        let k = tape.constant(random_seq(&factory, "k", 2, 4, 6));
        let visible = vec![true, true, false, true, true, false, true, true];
        let mask = KeyMask::new(2, 4, visible.clone()).unwrap();
        let scores = tape.attention_scores(q, k, 2).unwrap();
        let add = mask.additive(&mut tape);
        let masked = tape.add(scores, add).unwrap();
        let probs = tape.softmax(masked, 3).unwrap();
        let p = tape.value(probs);
        for b in 0..2 {
            for h in 0..2 {
                for i in 0..3 {
                    let base = ((b * 2 + h) * 3 + i) * 4;
                    let row = &p.data[base..base + 4];
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                    for (j, &w) in row.iter().enumerate() {
                        assert!(w >= 0.0);
                        if !visible[b * 4 + j] {
                            assert_eq!(w, 0.0, "masked key must get zero weight");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn layer_is_permutation_equivariant() {
        // no position embeddings inside the layer, so permuting positions
        // (and masks consistently) must permute the output identically
        let width = 8;
        let (store, factory) = toy_store(width, false);
        let x = random_seq(&factory, "x", 1, 4, width);
        let perm = [2usize, 0, 3, 1];
        let mut xp_data = vec![0.0; x.data.len()];
        for (dst, &src) in perm.iter().enumerate() {
            xp_data[dst * width..(dst + 1) * width]
                .copy_from_slice(&x.data[src * width..(src + 1) * width]);
        }
        let run = |input: Tensor| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let xv = tape.constant(input);
            let mask = KeyMask::all_visible(1, 4);
            let mut ctx = ForwardCtx::eval();
            let y =
                transformer_layer(&mut tape, &bound, "layer", xv, &mask, None, false, 2, &mut ctx)
                    .unwrap();
            tape.value(y).data.clone()
        };
        let y = run(x.clone());
        let yp = run(Tensor::new(vec![1, 4, width], xp_data).unwrap());
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..width {
                assert!((yp[dst * width + c] - y[src * width + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_gradients_pass_finite_difference_check() {
        use crate::gradcheck::grad_check;
        let width = 6;
        let factory = SeededRng::new(9);
        let mut store = ParamStore::new();
        init_transformer_layer(&mut store, &factory, "layer", width, 12, true);
        let x = random_seq(&factory, "x", 1, 3, width);
        let src = random_seq(&factory, "s", 1, 2, width);

        // check gradient w.r.t. every parameter tensor of the layer
        let paths: Vec<String> = store.paths().cloned().collect();
        for path in paths {
            let store = store.clone();
            let x = x.clone();
            let src = src.clone();
            let probe = store.get(&path).tensor.clone();
            let key = path.clone();
            let err = grad_check(
                move |tape, v| {
                    let mut bound = store.bind(tape);
                    bound.vars.insert(key.clone(), v);
                    let xv = tape.constant(x.clone());
                    let sv = tape.constant(src.clone());
                    let self_mask = KeyMask::all_visible(1, 3);
                    let cross_mask = KeyMask::all_visible(1, 2);
                    let mut ctx = ForwardCtx::eval();
                    let y = transformer_layer(
                        tape,
                        &bound,
                        "layer",
                        xv,
                        &self_mask,
                        Some((sv, &cross_mask)),
                        true,
                        2,
                        &mut ctx,
                    )?;
                    tape.sum_all(y)
                },
                &probe,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "grad check failed for {path}: {err}");
        }
    }
}
