//! Transformer building blocks over the autodiff substrate: masked
//! attention, encoder/decoder layers with switchable residual connections,
//! layer normalization, a gated recurrent cell, and a finite-difference
//! gradient checker.
//!
//! Layers do not own their parameters; they hold names into a
//! [`ParameterStore`] and read per-pass [`Leaves`]. Two layers built with
//! the same names therefore share parameters, and gradients from both flow
//! into the same leaf.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

/// Named parameter arrays. Values are immutable snapshots behind `Arc`; the
/// optimizer replaces them wholesale, so concurrent readers of an old
/// snapshot are unaffected.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Arc<Array2<f64>>>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, values: Array2<f64>) {
        let name = name.into();
        let prev = self.params.insert(name.clone(), Arc::new(values));
        assert!(prev.is_none(), "duplicate parameter name: {name}");
    }

    pub fn get(&self, name: &str) -> &Arc<Array2<f64>> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn set(&mut self, name: &str, values: Array2<f64>) {
        let slot = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"));
        assert_eq!(slot.dim(), values.dim(), "parameter shape change: {name}");
        *slot = Arc::new(values);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Array2<f64>>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count; shared tensors are stored (and counted) once.
    pub fn total_params(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Wrap every parameter as a trainable leaf for one forward/backward
    /// pass. Cheap: values are shared, not copied.
    pub fn leaves(&self) -> Leaves {
        Leaves {
            map: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::leaf(Arc::clone(v))))
                .collect(),
        }
    }

    /// Read-only view for inference: no gradient bookkeeping, and
    /// intermediate results are freed as soon as they go out of scope.
    pub fn frozen(&self) -> Leaves {
        Leaves {
            map: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::constant_shared(Arc::clone(v))))
                .collect(),
        }
    }
}

/// Per-pass view of the parameters as autodiff leaves.
pub struct Leaves {
    map: BTreeMap<String, Tensor>,
}

impl Leaves {
    pub fn param(&self, name: &str) -> Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
            .clone()
    }

    /// Gradients accumulated by backward passes, in name order. Parameters
    /// the loss never touched get zeros.
    pub fn grads(&self) -> BTreeMap<String, Array2<f64>> {
        self.map
            .iter()
            .map(|(k, t)| {
                let g = t
                    .grad()
                    .unwrap_or_else(|| Array2::zeros((t.rows(), t.cols())));
                (k.clone(), g)
            })
            .collect()
    }

    pub fn grad_of(&self, name: &str) -> Option<Array2<f64>> {
        self.map.get(name).and_then(|t| t.grad())
    }
}

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
fn init_uniform(rng: &mut ChaCha20Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

// ---------------------------------------------------------------------------
// Attention masks
// ---------------------------------------------------------------------------

/// Boolean T x T attention mask; `allowed[(t, tau)]` says whether the query
/// at position t may attend to position tau. Construction guarantees every
/// row has at least one allowed entry, so attention softmax rows are always
/// well defined.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    allowed: Array2<bool>,
}

impl AttentionMask {
    /// Validates that no row is empty.
    pub fn new(allowed: Array2<bool>) -> Result<Self> {
        for (r, row) in allowed.rows().into_iter().enumerate() {
            if !row.iter().any(|&a| a) {
                return Err(Error::InvalidArgument(format!(
                    "attention mask row {r} has no allowed entries"
                )));
            }
        }
        Ok(AttentionMask { allowed })
    }

    /// Inclusive causal mask: position t attends to tau <= t.
    pub fn causal(t_len: usize) -> Self {
        assert!(t_len >= 1);
        AttentionMask {
            allowed: Array2::from_shape_fn((t_len, t_len), |(t, tau)| tau <= t),
        }
    }

    /// Unmasked attention over the full sequence.
    pub fn full(t_len: usize) -> Self {
        assert!(t_len >= 1);
        AttentionMask {
            allowed: Array2::from_elem((t_len, t_len), true),
        }
    }

    pub fn allowed(&self) -> &Array2<bool> {
        &self.allowed
    }

    pub fn is_allowed(&self, t: usize, tau: usize) -> bool {
        self.allowed[(t, tau)]
    }
}

/// Causal mask builder. A strictly exclusive mask (tau < t) would leave its
/// first row empty and the softmax there undefined, so exclusive
/// dependencies are realized by right-shifting the input stream (zero start
/// frame) and reusing the inclusive mask: attending to shifted position
/// tau <= t reads original positions up to t - 1. Both flags therefore
/// return the inclusive lower-triangular matrix; `inclusive = false`
/// documents at the call site that the paired stream is shifted.
pub fn build_causal_mask(t_len: usize, inclusive: bool) -> AttentionMask {
    let _ = inclusive;
    AttentionMask::causal(t_len)
}

// ---------------------------------------------------------------------------
// Positional encoding
// ---------------------------------------------------------------------------

/// Sinusoidal positional encoding: PE(pos, 2i) = sin(pos / 10000^(2i/d)),
/// PE(pos, 2i+1) = cos(pos / 10000^(2i/d)).
pub fn positional_encoding(t_len: usize, d: usize) -> Array2<f64> {
    assert!(d % 2 == 0, "positional encoding width must be even");
    let mut pe = Array2::zeros((t_len, d));
    for pos in 0..t_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[(pos, 2 * i)] = angle.sin();
            pe[(pos, 2 * i + 1)] = angle.cos();
        }
    }
    pe
}

// ---------------------------------------------------------------------------
// Core blocks
// ---------------------------------------------------------------------------

/// Width/shape settings for one Transformer layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub residual_enabled: bool,
}

impl Default for LayerConfig {
    fn default() -> Self {
        LayerConfig {
            d_model: 256,
            n_heads: 1,
            d_ff: 1024,
            residual_enabled: true,
        }
    }
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return Err(Error::InvalidConfig("layer widths must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Scaled dot-product attention: softmax(Q K^T / sqrt(d_k) + mask) V.
/// Masked-out positions contribute exactly zero weight.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttentionMask) -> Tensor {
    assert_eq!(q.cols(), k.cols(), "attention: query/key width mismatch");
    assert_eq!(k.rows(), v.rows(), "attention: key/value length mismatch");
    assert_eq!(
        mask.allowed().dim(),
        (q.rows(), k.rows()),
        "attention: mask shape mismatch"
    );
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let scores = q.matmul(&k.transpose()).scale(scale);
    let weights = scores.masked_softmax_rows(mask.allowed());
    weights.matmul(v)
}

/// Affine map `x W + b` with W named `<prefix>.w` and b `<prefix>.b`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: String,
    b: String,
}

impl Linear {
    pub fn init(
        store: &mut ParameterStore,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        store.insert(format!("{prefix}.w"), init_uniform(rng, d_in, d_out, d_in));
        store.insert(format!("{prefix}.b"), init_uniform(rng, 1, d_out, d_in));
        Linear {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
        }
    }

    pub fn forward(&self, ps: &Leaves, x: &Tensor) -> Tensor {
        x.matmul(&ps.param(&self.w)).add_row(&ps.param(&self.b))
    }
}

/// Post-norm layer normalization with learned affine; the pre-affine
/// output has per-row mean 0 and variance 1.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
    eps: f64,
}

impl LayerNorm {
    pub fn init(store: &mut ParameterStore, prefix: &str, d: usize) -> Self {
        store.insert(format!("{prefix}.gamma"), Array2::ones((1, d)));
        store.insert(format!("{prefix}.beta"), Array2::zeros((1, d)));
        LayerNorm {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            eps: 1e-8,
        }
    }

    /// Normalization alone (mean 0, variance 1 per row).
    pub fn normalize(x: &Tensor, eps: f64) -> Tensor {
        let centered = x.sub_col(&x.mean_cols());
        let var = centered.mul(&centered).mean_cols();
        centered.div_col(&var.add_scalar(eps).sqrt())
    }

    pub fn forward(&self, ps: &Leaves, x: &Tensor) -> Tensor {
        Self::normalize(x, self.eps)
            .mul_row(&ps.param(&self.gamma))
            .add_row(&ps.param(&self.beta))
    }
}

/// Two dense layers with a ReLU in between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn init(
        store: &mut ParameterStore,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        cfg: &LayerConfig,
    ) -> Self {
        FeedForward {
            lin1: Linear::init(store, rng, &format!("{prefix}.ff1"), cfg.d_model, cfg.d_ff),
            lin2: Linear::init(store, rng, &format!("{prefix}.ff2"), cfg.d_ff, cfg.d_model),
        }
    }

    pub fn forward(&self, ps: &Leaves, x: &Tensor) -> Tensor {
        self.lin2.forward(ps, &self.lin1.forward(ps, x).relu())
    }
}

/// Multi-head attention with per-head projections, concatenation and an
/// output projection. With a single head this reduces to a projected
/// scaled-dot attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    n_heads: usize,
}

impl MultiHeadAttention {
    pub fn init(
        store: &mut ParameterStore,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        cfg: &LayerConfig,
    ) -> Self {
        let d = cfg.d_model;
        MultiHeadAttention {
            wq: Linear::init(store, rng, &format!("{prefix}.q"), d, d),
            wk: Linear::init(store, rng, &format!("{prefix}.k"), d, d),
            wv: Linear::init(store, rng, &format!("{prefix}.v"), d, d),
            wo: Linear::init(store, rng, &format!("{prefix}.o"), d, d),
            n_heads: cfg.n_heads,
        }
    }

    pub fn forward(
        &self,
        ps: &Leaves,
        x_query: &Tensor,
        x_kv: &Tensor,
        mask: &AttentionMask,
    ) -> Tensor {
        let q = self.wq.forward(ps, x_query);
        let k = self.wk.forward(ps, x_kv);
        let v = self.wv.forward(ps, x_kv);
        let concat = if self.n_heads == 1 {
            scaled_dot_attention(&q, &k, &v, mask)
        } else {
            let dh = q.cols() / self.n_heads;
            let mut heads = Vec::with_capacity(self.n_heads);
            for h in 0..self.n_heads {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                heads.push(scaled_dot_attention(
                    &q.slice_cols(lo, hi),
                    &k.slice_cols(lo, hi),
                    &v.slice_cols(lo, hi),
                    mask,
                ));
            }
            let mut acc = heads[0].clone();
            for head in &heads[1..] {
                acc = acc.concat_cols(head);
            }
            acc
        };
        self.wo.forward(ps, &concat)
    }
}

/// Encoder layer: NL(x + MHA(x, x, x)) then NL(. + FF(.)).
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    mha: MultiHeadAttention,
    norm1: LayerNorm,
    norm2: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn init(
        store: &mut ParameterStore,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        cfg: &LayerConfig,
    ) -> Self {
        EncoderLayer {
            mha: MultiHeadAttention::init(store, rng, &format!("{prefix}.mha"), cfg),
            norm1: LayerNorm::init(store, &format!("{prefix}.norm1"), cfg.d_model),
            norm2: LayerNorm::init(store, &format!("{prefix}.norm2"), cfg.d_model),
            ff: FeedForward::init(store, rng, prefix, cfg),
        }
    }

    pub fn forward(&self, ps: &Leaves, x: &Tensor, mask: Option<&AttentionMask>) -> Tensor {
        let full;
        let mask = match mask {
            Some(m) => m,
            None => {
                full = AttentionMask::full(x.rows());
                &full
            }
        };
        let attended = self.mha.forward(ps, x, x, mask);
        let h = self.norm1.forward(ps, &x.add(&attended));
        self.norm2.forward(ps, &h.add(&self.ff.forward(ps, &h)))
    }
}

/// Decoder layer: masked self-attention over the query stream, then
/// cross-attention (query from the decoder stream, key/value from the
/// memory), then feed-forward; each sub-block wrapped in layer norm. Skip
/// connections are present iff `residual_enabled`.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    self_mha: MultiHeadAttention,
    cross_mha: MultiHeadAttention,
    norm1: LayerNorm,
    norm2: LayerNorm,
    norm3: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    pub fn init(
        store: &mut ParameterStore,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        cfg: &LayerConfig,
    ) -> Self {
        DecoderLayer {
            self_mha: MultiHeadAttention::init(store, rng, &format!("{prefix}.self"), cfg),
            cross_mha: MultiHeadAttention::init(store, rng, &format!("{prefix}.cross"), cfg),
            norm1: LayerNorm::init(store, &format!("{prefix}.norm1"), cfg.d_model),
            norm2: LayerNorm::init(store, &format!("{prefix}.norm2"), cfg.d_model),
            norm3: LayerNorm::init(store, &format!("{prefix}.norm3"), cfg.d_model),
            ff: FeedForward::init(store, rng, prefix, cfg),
        }
    }

    pub fn forward(
        &self,
        ps: &Leaves,
        x_query: &Tensor,
        memory: &Tensor,
        self_mask: &AttentionMask,
        cross_mask: &AttentionMask,
        residual_enabled: bool,
    ) -> Tensor {
        let self_att = self.self_mha.forward(ps, x_query, x_query, self_mask);
        let h1 = if residual_enabled {
            self.norm1.forward(ps, &x_query.add(&self_att))
        } else {
            self.norm1.forward(ps, &self_att)
        };
        let cross_att = self.cross_mha.forward(ps, &h1, memory, cross_mask);
        let h2 = if residual_enabled {
            self.norm2.forward(ps, &h1.add(&cross_att))
        } else {
            self.norm2.forward(ps, &cross_att)
        };
        let ff_out = self.ff.forward(ps, &h2);
        if residual_enabled {
            self.norm3.forward(ps, &h2.add(&ff_out))
        } else {
            self.norm3.forward(ps, &ff_out)
        }
    }
}

/// Single gated recurrent cell (reset/update gates, tanh candidate).
#[derive(Debug, Clone)]
pub struct GruCell {
    wr: Linear,
    wu: Linear,
    wc: Linear,
    ur: String,
    uu: String,
    uc: String,
    pub hidden: usize,
}

impl GruCell {
    pub fn init(
        store: &mut ParameterStore,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        d_in: usize,
        hidden: usize,
    ) -> Self {
        let wr = Linear::init(store, rng, &format!("{prefix}.wr"), d_in, hidden);
        let wu = Linear::init(store, rng, &format!("{prefix}.wu"), d_in, hidden);
        let wc = Linear::init(store, rng, &format!("{prefix}.wc"), d_in, hidden);
        for gate in ["ur", "uu", "uc"] {
            store.insert(
                format!("{prefix}.{gate}"),
                init_uniform(rng, hidden, hidden, hidden),
            );
        }
        GruCell {
            wr,
            wu,
            wc,
            ur: format!("{prefix}.ur"),
            uu: format!("{prefix}.uu"),
            uc: format!("{prefix}.uc"),
            hidden,
        }
    }

    /// One step: x is 1 x d_in, h is 1 x hidden; returns the next hidden.
    pub fn step(&self, ps: &Leaves, x: &Tensor, h: &Tensor) -> Tensor {
        let r = self
            .wr
            .forward(ps, x)
            .add(&h.matmul(&ps.param(&self.ur)))
            .sigmoid();
        let u = self
            .wu
            .forward(ps, x)
            .add(&h.matmul(&ps.param(&self.uu)))
            .sigmoid();
        let c = self
            .wc
            .forward(ps, x)
            .add(&r.mul(h).matmul(&ps.param(&self.uc)))
            .tanh();
        u.mul(h).add(&u.neg().add_scalar(1.0).mul(&c))
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Fourth-order symmetric (central) difference:
/// (-f(x+2e) + 8 f(x+e) - 8 f(x-e) + f(x-2e)) / (12 e).
/// The higher order permits a larger step, keeping both truncation and
/// cancellation noise below the per-coordinate tolerance even where the
/// true gradient is zero.
fn central_difference(mut eval_at: impl FnMut(f64) -> f64, orig: f64, eps: f64) -> f64 {
    let fp2 = eval_at(orig + 2.0 * eps);
    let fp1 = eval_at(orig + eps);
    let fm1 = eval_at(orig - eps);
    let fm2 = eval_at(orig - 2.0 * eps);
    (-fp2 + 8.0 * fp1 - 8.0 * fm1 + fm2) / (12.0 * eps)
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum relative error between analytic gradients and central finite
/// differences, over every coordinate of every input:
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(f: F, inputs: &[Array2<f64>], eps: f64) -> f64
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|a| Tensor::leaf(Arc::new(a.clone())))
        .collect();
    let loss = f(&leaves);
    assert_eq!(loss.shape(), (1, 1), "grad_check requires a scalar function");
    loss.backward();
    let analytic: Vec<Array2<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| Array2::zeros((l.rows(), l.cols()))))
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Array2<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        for idx in ndarray::indices(inputs[i].dim()) {
            let orig = work[i][idx];
            let numeric = central_difference(
                |v| {
                    work[i][idx] = v;
                    let consts: Vec<Tensor> =
                        work.iter().map(|a| Tensor::constant(a.clone())).collect();
                    f(&consts).item()
                },
                orig,
                eps,
            );
            work[i][idx] = orig;
            worst = worst.max(relative_error(analytic[i][idx], numeric));
        }
    }
    worst
}

/// Gradient check against every coordinate of every parameter in a store.
pub fn grad_check_params<F>(store: &ParameterStore, f: F, eps: f64) -> f64
where
    F: Fn(&Leaves) -> Tensor,
{
    let leaves = store.leaves();
    let loss = f(&leaves);
    assert_eq!(
        loss.shape(),
        (1, 1),
        "grad_check_params requires a scalar function"
    );
    loss.backward();
    let analytic = leaves.grads();

    let mut worst = 0.0f64;
    let mut perturbed = store.clone();
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in &names {
        let base = store.get(name).as_ref().clone();
        for idx in ndarray::indices(base.dim()) {
            let orig = base[idx];
            let numeric = central_difference(
                |v| {
                    let mut arr = base.clone();
                    arr[idx] = v;
                    perturbed.set(name, arr);
                    f(&perturbed.leaves()).item()
                },
                orig,
                eps,
            );
            perturbed.set(name, base.clone());
            worst = worst.max(relative_error(analytic[name][idx], numeric));
        }
    }
    worst
}
