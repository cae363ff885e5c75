//! Negative-ELBO loss assembly, AdamW with decoupled weight decay, the
//! warmup + cosine-annealing schedule and the training loop.
//!
//! Batch items run forward/backward in parallel on parameter snapshots;
//! their gradients are reduced in item order afterwards, so results are
//! bit-identical regardless of thread count.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{itakura_saito, kl_diag_gaussian, kl_to_standard_normal};
use crate::dsp::EPS_POWER;
use crate::error::{Error, Result};
use crate::model::{DvaeModel, ForwardNoise, ForwardOutput, ModelConfig};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// The differentiable loss terms of one pass.
pub struct LossTerms {
    /// recon_is + beta_z * kl_z + beta_w * kl_w (minimized).
    pub total: Tensor,
    pub recon_is: Tensor,
    pub kl_z: Tensor,
    pub kl_w: Tensor,
    pub beta_w: f64,
    pub beta_z: f64,
}

/// Scalar view of [`LossTerms`], in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon_is: f64,
    pub kl_z: f64,
    pub kl_w: f64,
}

impl LossTerms {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            total: self.total.item(),
            recon_is: self.recon_is.item(),
            kl_z: self.kl_z.item(),
            kl_w: self.kl_w.item(),
        }
    }
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.recon_is.is_finite()
            && self.kl_z.is_finite()
            && self.kl_w.is_finite()
    }

    /// Name of the first non-finite term, for diagnostics.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        if !self.recon_is.is_finite() {
            Some("recon_is")
        } else if !self.kl_z.is_finite() {
            Some("kl_z")
        } else if !self.kl_w.is_finite() {
            Some("kl_w")
        } else if !self.total.is_finite() {
            Some("total")
        } else {
            None
        }
    }
}

/// Single-sample negative ELBO: sum_t d_IS(|s_t|^2, v_s,t)
/// + beta_z sum_t KL(q_z,t || p_z,t) + beta_w KL(q_w || N(0, I)).
pub fn elbo_loss(
    out: &ForwardOutput,
    s_power_tf: &Array2<f64>,
    beta_w: f64,
    beta_z: f64,
) -> Result<LossTerms> {
    let floored = s_power_tf.mapv(|v| v.max(EPS_POWER));
    let recon_is = itakura_saito(&Tensor::constant(floored), &out.v_s)?;
    let kl_z = kl_diag_gaussian(&out.q_z, &out.p_z)?;
    let kl_w = kl_to_standard_normal(&out.q_w);
    let total = recon_is.add(&kl_z.scale(beta_z)).add(&kl_w.scale(beta_w));
    Ok(LossTerms {
        total,
        recon_is,
        kl_z,
        kl_w,
        beta_w,
        beta_z,
    })
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// AdamW settings plus the learning-rate schedule shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_iters: u64,
    pub cosine_iters: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-9,
            weight_decay: 1e-5,
            lr_max: 5e-5,
            lr_min: 1e-8,
            warmup_iters: 5000,
            cosine_iters: 20000,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::InvalidConfig("beta1/beta2 must lie in (0, 1)".into()));
        }
        if self.lr_min > self.lr_max {
            return Err(Error::InvalidConfig("lr_min must be <= lr_max".into()));
        }
        Ok(())
    }
}

/// Learning rate at an iteration: linear warmup from zero to lr_max, then
/// cosine annealing down to lr_min, then constant lr_min.
pub fn lr_at(iter: u64, cfg: &OptimizerConfig) -> f64 {
    if iter <= cfg.warmup_iters {
        if cfg.warmup_iters == 0 {
            return cfg.lr_max;
        }
        return cfg.lr_max * iter as f64 / cfg.warmup_iters as f64;
    }
    let past = iter - cfg.warmup_iters;
    if past <= cfg.cosine_iters && cfg.cosine_iters > 0 {
        let phase = std::f64::consts::PI * past as f64 / cfg.cosine_iters as f64;
        cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + phase.cos())
    } else {
        cfg.lr_min
    }
}

/// First and second Adam moments per parameter, plus the step count.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update: bias-corrected moment step plus decoupled decay
/// p <- p - lr * weight_decay * p applied separately from the gradient
/// term.
pub fn adamw_step(
    store: &mut crate::nn::ParameterStore,
    grads: &BTreeMap<String, Array2<f64>>,
    state: &mut AdamState,
    lr: f64,
    cfg: &OptimizerConfig,
) {
    state.t += 1;
    let t = state.t;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let g = &grads[&name];
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(g.dim()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(g.dim()));
        ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        });
        ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        });
        let mut p = store.get(&name).as_ref().clone();
        ndarray::Zip::from(&mut p).and(&*m).and(&*v).for_each(|p, &m, &v| {
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps) + lr * cfg.weight_decay * *p;
        });
        store.set(&name, p);
    }
}

/// Scales all gradients so their global l2 norm does not exceed
/// `clip_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Array2<f64>>, clip_norm: f64) -> f64 {
    let sq: f64 = grads.values().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > clip_norm && norm > 0.0 {
        let k = clip_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Run-level settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub iterations: u64,
    pub batch_size: usize,
    pub t_seg: usize,
    pub stft: crate::dsp::StftConfig,
    /// Silence-trim threshold in dB below the loudest frame.
    pub trim_db: f64,
    pub beta_w: f64,
    pub beta_z: f64,
    pub clip_norm: f64,
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            iterations: 25_000,
            batch_size: 32,
            t_seg: 150,
            stft: crate::dsp::StftConfig::default(),
            trim_db: 30.0,
            beta_w: 1e-2,
            beta_z: 1e-2,
            clip_norm: 5.0,
            checkpoint_every: 0,
        }
    }
}

/// One metrics-log row. The text format is tab-delimited with the header
/// `iteration lr total recon_is kl_z kl_w wall_secs`; wall_secs is the only
/// non-deterministic column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub wall_secs: f64,
}

pub const LOG_HEADER: &str = "iteration\tlr\ttotal\trecon_is\tkl_z\tkl_w\twall_secs";

impl LogRow {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:.3}",
            self.iteration,
            self.lr,
            self.loss.total,
            self.loss.recon_is,
            self.loss.kl_z,
            self.loss.kl_w,
            self.wall_secs
        )
    }
}

use crate::data::epoch_order;

/// Training driver holding the model, optimizer state and the noise RNG.
pub struct Trainer {
    pub model: DvaeModel,
    pub optim: OptimizerConfig,
    pub run: RunConfig,
    pub state: AdamState,
    pub iteration: u64,
    rng: ChaCha20Rng,
}

impl Trainer {
    pub fn new(model: DvaeModel, optim: OptimizerConfig, run: RunConfig) -> Result<Self> {
        optim.validate()?;
        if run.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        let rng = ChaCha20Rng::seed_from_u64(run.seed);
        Ok(Trainer {
            model,
            optim,
            run,
            state: AdamState::new(),
            iteration: 0,
            rng,
        })
    }

    /// Mini-batch for a given iteration, derived purely from (seed,
    /// iteration) so a resumed run sees the same stream.
    fn batch_indices(&self, n_segments: usize, iteration: u64) -> Vec<usize> {
        let bpe = n_segments.div_ceil(self.run.batch_size) as u64;
        let epoch = iteration / bpe;
        let slot = (iteration % bpe) as usize;
        let order = epoch_order(n_segments, self.run.seed, epoch);
        order
            .into_iter()
            .skip(slot * self.run.batch_size)
            .take(self.run.batch_size)
            .collect()
    }

    /// One optimization step over the given batch (frames-as-rows
    /// segments). Returns the batch-mean loss.
    pub fn step(&mut self, batch: &[&Array2<f64>]) -> Result<LossBreakdown> {
        assert!(!batch.is_empty());
        let cfg = *self.model.config();
        // Noise is drawn sequentially, in batch order, before the parallel
        // section; the RNG stream is independent of thread scheduling.
        let noises: Vec<ForwardNoise> = batch
            .iter()
            .map(|seg| ForwardNoise::draw(&mut self.rng, seg.dim().0, &cfg))
            .collect();

        let model = &self.model;
        let (beta_w, beta_z) = (self.run.beta_w, self.run.beta_z);
        let items: Vec<Result<(BTreeMap<String, Array2<f64>>, LossBreakdown)>> = batch
            .par_iter()
            .zip(noises.into_par_iter())
            .map(|(seg, noise)| {
                let ps = model.store().leaves();
                let out = model.forward_tf(&ps, seg, &noise)?;
                let loss = elbo_loss(&out, seg, beta_w, beta_z)?;
                loss.total.backward();
                Ok((ps.grads(), loss.breakdown()))
            })
            .collect();

        let scale = 1.0 / batch.len() as f64;
        let mut grad_acc: Option<BTreeMap<String, Array2<f64>>> = None;
        let mut loss_acc = LossBreakdown {
            total: 0.0,
            recon_is: 0.0,
            kl_z: 0.0,
            kl_w: 0.0,
        };
        for item in items {
            let (grads, loss) = item?;
            if let Some(term) = loss.non_finite_term() {
                return Err(Error::NonFiniteLoss {
                    iteration: self.iteration,
                    term: term.into(),
                });
            }
            loss_acc.total += loss.total * scale;
            loss_acc.recon_is += loss.recon_is * scale;
            loss_acc.kl_z += loss.kl_z * scale;
            loss_acc.kl_w += loss.kl_w * scale;
            match grad_acc.as_mut() {
                None => grad_acc = Some(grads),
                Some(acc) => {
                    for (name, g) in grads {
                        *acc.get_mut(&name).expect("same parameter set") += &g;
                    }
                }
            }
        }
        let mut grads = grad_acc.expect("non-empty batch");
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
        clip_global_norm(&mut grads, self.run.clip_norm);
        let lr = lr_at(self.iteration + 1, &self.optim);
        adamw_step(self.model.store_mut(), &grads, &mut self.state, lr, &self.optim);
        self.iteration += 1;
        Ok(loss_acc)
    }

    /// Train for `run.iterations` total iterations (continues from the
    /// current iteration when resumed). Calls `on_row` after every step.
    pub fn train(
        &mut self,
        segments: &[Array2<f64>],
        on_row: impl FnMut(&LogRow),
    ) -> Result<Vec<LogRow>> {
        self.train_with_checkpoints(segments, on_row, |_| Ok(()))
    }

    /// As [`Trainer::train`], invoking `on_checkpoint` every
    /// `run.checkpoint_every` iterations (and once more at the end) when
    /// the cadence is nonzero.
    pub fn train_with_checkpoints(
        &mut self,
        segments: &[Array2<f64>],
        mut on_row: impl FnMut(&LogRow),
        mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<Vec<LogRow>> {
        if segments.is_empty() {
            return Err(Error::EmptySignal("training corpus has no segments".into()));
        }
        let start = Instant::now();
        let mut rows = Vec::new();
        while self.iteration < self.run.iterations {
            let idx = self.batch_indices(segments.len(), self.iteration);
            let batch: Vec<&Array2<f64>> = idx.iter().map(|&i| &segments[i]).collect();
            let loss = self.step(&batch)?;
            let row = LogRow {
                iteration: self.iteration,
                lr: lr_at(self.iteration, &self.optim),
                loss,
                wall_secs: start.elapsed().as_secs_f64(),
            };
            on_row(&row);
            rows.push(row);
            if self.run.checkpoint_every > 0 && self.iteration % self.run.checkpoint_every == 0 {
                on_checkpoint(&self.checkpoint())?;
            }
        }
        Ok(rows)
    }

    /// Snapshot of everything needed to continue the run bit-exactly.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model_config: *self.model.config(),
            optimizer: self.optim,
            run: self.run,
            iteration: self.iteration,
            params: tensor_map(self.model.store().iter().map(|(k, v)| (k, v.as_ref()))),
            adam_m: tensor_map(self.state.m.iter().map(|(k, v)| (k.as_str(), v))),
            adam_v: tensor_map(self.state.v.iter().map(|(k, v)| (k.as_str(), v))),
            adam_t: self.state.t,
            rng_seed: self.rng.get_seed().to_vec(),
            rng_word_pos: format!("{:x}", self.rng.get_word_pos()),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.validate()?;
        let mut model = DvaeModel::new(ck.model_config, 0)?;
        restore_store(model.store_mut(), &ck.params)?;
        let mut state = AdamState::new();
        state.t = ck.adam_t;
        for (name, td) in &ck.adam_m {
            state.m.insert(name.clone(), td.to_array()?);
        }
        for (name, td) in &ck.adam_v {
            state.v.insert(name.clone(), td.to_array()?);
        }
        let seed: [u8; 32] = ck
            .rng_seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha20Rng::from_seed(seed);
        let pos = u128::from_str_radix(&ck.rng_word_pos, 16)
            .map_err(|e| Error::Checkpoint(format!("bad rng position: {e}")))?;
        rng.set_word_pos(pos);
        Ok(Trainer {
            model,
            optim: ck.optimizer,
            run: ck.run,
            state,
            iteration: ck.iteration,
            rng,
        })
    }
}

// ---------------------------------------------------------------------------
// Gradient suite
// ---------------------------------------------------------------------------

/// Finite-difference verification results: per-block maximum relative
/// errors plus the end-to-end ELBO check on the tiny configuration.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub blocks: Vec<(String, f64)>,
    pub elbo: f64,
}

impl GradReport {
    pub fn worst_block(&self) -> f64 {
        self.blocks.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Checks every differentiable block and the full ELBO on a tiny model
/// (F=9, T=5, d_model=8, one layer) against central finite differences.
/// The ELBO uses a smaller step than the blocks: its loss surface has many
/// ReLU kinks and a wide stencil can straddle one.
pub fn gradient_suite(block_eps: f64, elbo_eps: f64) -> GradReport {
    let eps = block_eps;
    use crate::distributions::DiagGaussianParams;
    use crate::nn::{
        grad_check, grad_check_params, scaled_dot_attention, AttentionMask, DecoderLayer,
        EncoderLayer, GruCell, LayerConfig, LayerNorm, MultiHeadAttention, ParameterStore,
    };

    let mut rng = ChaCha20Rng::seed_from_u64(0xC0FFEE);
    let mut randn = |r: usize, c: usize| -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || {
            rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)
        })
    };
    let mut blocks = Vec::new();

    let mask = AttentionMask::causal(4);
    let qkv = [randn(4, 3), randn(4, 3), randn(4, 3)];
    blocks.push((
        "scaled_dot_attention".to_string(),
        grad_check(
            |inp| scaled_dot_attention(&inp[0], &inp[1], &inp[2], &mask).mul(&inp[0]).sum_all(),
            &qkv,
            eps,
        ),
    ));

    let x = randn(3, 4);
    blocks.push((
        "layer_norm".to_string(),
        grad_check(
            |inp| {
                LayerNorm::normalize(&inp[0], 1e-8)
                    .mul(&inp[0])
                    .sum_all()
            },
            std::slice::from_ref(&x),
            eps,
        ),
    ));

    let lc = LayerConfig {
        d_model: 4,
        n_heads: 2,
        d_ff: 6,
        residual_enabled: true,
    };
    {
        let mut store = ParameterStore::new();
        let mut rng_p = ChaCha20Rng::seed_from_u64(1);
        let mha = MultiHeadAttention::init(&mut store, &mut rng_p, "mha", &lc);
        let xq = randn(4, 4);
        let xkv = randn(4, 4);
        let mask = AttentionMask::causal(4);
        blocks.push((
            "multi_head_attention".to_string(),
            grad_check_params(
                &store,
                |ps| {
                    mha.forward(ps, &Tensor::constant(xq.clone()), &Tensor::constant(xkv.clone()), &mask)
                        .sum_all()
                },
                eps,
            ),
        ));
    }
    {
        let mut store = ParameterStore::new();
        let mut rng_p = ChaCha20Rng::seed_from_u64(2);
        let layer = EncoderLayer::init(&mut store, &mut rng_p, "enc", &lc);
        let x = randn(4, 4);
        blocks.push((
            "encoder_layer".to_string(),
            grad_check_params(
                &store,
                |ps| layer.forward(ps, &Tensor::constant(x.clone()), None).sum_all(),
                eps,
            ),
        ));
    }
    for residual in [true, false] {
        let mut store = ParameterStore::new();
        let mut rng_p = ChaCha20Rng::seed_from_u64(3);
        let layer = DecoderLayer::init(&mut store, &mut rng_p, "dec", &lc);
        let xq = randn(4, 4);
        let mem = randn(4, 4);
        let mask = AttentionMask::causal(4);
        blocks.push((
            format!("decoder_layer(residual={residual})"),
            grad_check_params(
                &store,
                |ps| {
                    layer
                        .forward(
                            ps,
                            &Tensor::constant(xq.clone()),
                            &Tensor::constant(mem.clone()),
                            &mask,
                            &mask,
                            residual,
                        )
                        .sum_all()
                },
                eps,
            ),
        ));
    }
    {
        let mut store = ParameterStore::new();
        let mut rng_p = ChaCha20Rng::seed_from_u64(4);
        let cell = GruCell::init(&mut store, &mut rng_p, "gru", 3, 4);
        let frames = randn(5, 3);
        blocks.push((
            "gru_cell".to_string(),
            grad_check_params(
                &store,
                |ps| {
                    let x = Tensor::constant(frames.clone());
                    let mut h = Tensor::zeros(1, 4);
                    for t in 0..5 {
                        h = cell.step(ps, &x.slice_rows(t, t + 1), &h);
                    }
                    h.sum_all()
                },
                eps,
            ),
        ));
    }
    {
        let gaussians = [randn(1, 5), randn(1, 5), randn(1, 5), randn(1, 5)];
        blocks.push((
            "kl_diag_gaussian".to_string(),
            grad_check(
                |inp| {
                    let q = DiagGaussianParams::new(inp[0].clone(), inp[1].clone()).unwrap();
                    let p = DiagGaussianParams::new(inp[2].clone(), inp[3].clone()).unwrap();
                    kl_diag_gaussian(&q, &p).unwrap()
                },
                &gaussians,
                eps,
            ),
        ));
        blocks.push((
            "itakura_saito".to_string(),
            grad_check(
                |inp| itakura_saito(&inp[0].exp(), &inp[1].exp()).unwrap(),
                &gaussians[..2],
                eps,
            ),
        ));
    }

    // Full ELBO on the tiny model.
    let cfg = ModelConfig::tiny();
    let model = DvaeModel::new(cfg, 7).unwrap();
    let t_len = 5;
    let data = Array2::from_shape_simple_fn((t_len, cfg.f_bins), || {
        let v: f64 =
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
        (0.5 * v).exp()
    });
    let noise = {
        let mut nrng = ChaCha20Rng::seed_from_u64(9);
        ForwardNoise::draw(&mut nrng, t_len, &cfg)
    };
    let elbo = crate::nn::grad_check_params(
        model.store(),
        |ps| {
            let out = model.forward_tf(ps, &data, &noise).unwrap();
            elbo_loss(&out, &data, 1e-2, 1e-2).unwrap().total
        },
        elbo_eps,
    );
    GradReport { blocks, elbo }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

/// Row-major array payload inside a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn from_array(a: &Array2<f64>) -> Self {
        TensorData {
            rows: a.dim().0,
            cols: a.dim().1,
            data: a.iter().cloned().collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone())
            .map_err(|e| Error::Checkpoint(format!("bad tensor payload: {e}")))
    }
}

fn tensor_map<'a>(
    entries: impl Iterator<Item = (&'a str, &'a Array2<f64>)>,
) -> BTreeMap<String, TensorData> {
    entries
        .map(|(k, v)| (k.to_string(), TensorData::from_array(v)))
        .collect()
}

fn restore_store(
    store: &mut crate::nn::ParameterStore,
    params: &BTreeMap<String, TensorData>,
) -> Result<()> {
    let expected: Vec<String> = store.names().map(String::from).collect();
    for name in &expected {
        let td = params.get(name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint is missing parameter {name}"))
        })?;
        let arr = td.to_array()?;
        if arr.dim() != store.get(name).dim() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                arr.dim(),
                store.get(name).dim()
            )));
        }
        store.set(name, arr);
    }
    if params.len() != expected.len() {
        return Err(Error::Checkpoint(
            "checkpoint holds parameters unknown to this config".into(),
        ));
    }
    Ok(())
}

/// Versioned JSON container: config, parameters (64-bit floats), optimizer
/// moments and the RNG state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model_config: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub run: RunConfig,
    pub iteration: u64,
    pub params: BTreeMap<String, TensorData>,
    pub adam_m: BTreeMap<String, TensorData>,
    pub adam_v: BTreeMap<String, TensorData>,
    pub adam_t: u64,
    pub rng_seed: Vec<u8>,
    pub rng_word_pos: String,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Checkpoint = serde_json::from_reader(file)?;
        ck.validate()?;
        Ok(ck)
    }

    /// Model with the stored parameters.
    pub fn build_model(&self) -> Result<DvaeModel> {
        self.validate()?;
        let mut model = DvaeModel::new(self.model_config, 0)?;
        restore_store(model.store_mut(), &self.params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::nn::ParameterStore;
    use rand_distr::{Distribution, StandardNormal};

    fn rand_segments(rng: &mut ChaCha20Rng, n: usize, t: usize, f: usize) -> Vec<Array2<f64>> {
        (0..n)
            .map(|_| {
                Array2::from_shape_simple_fn((t, f), || {
                    let v: f64 = StandardNormal.sample(rng);
                    (v * 0.5).exp()
                })
            })
            .collect()
    }

    #[test]
    fn elbo_zero_when_model_matches_data() {
        // v_s == s and q == p everywhere: both divergences vanish.
        use crate::distributions::DiagGaussianParams;
        let s = Array2::from_elem((3, 4), 2.0);
        let q = DiagGaussianParams::new(
            Tensor::constant(Array2::from_elem((3, 2), 0.3)),
            Tensor::constant(Array2::from_elem((3, 2), -0.1)),
        )
        .unwrap();
        let out = ForwardOutput {
            q_w: DiagGaussianParams::standard(1, 2),
            w_sample: Tensor::zeros(1, 2),
            q_z: q.clone(),
            z_sample: Tensor::zeros(3, 2),
            p_z: q,
            v_s: Tensor::constant(s.clone()),
        };
        let loss = elbo_loss(&out, &s, 1e-2, 1e-2).unwrap();
        let b = loss.breakdown();
        assert_eq!(b.total, 0.0);
        assert_eq!(b.recon_is, 0.0);
        assert_eq!(b.kl_z, 0.0);
        assert_eq!(b.kl_w, 0.0);
    }

    #[test]
    fn elbo_beta_linearity() {
        let model = DvaeModel::new(ModelConfig::tiny(), 5).unwrap();
        let cfg = *model.config();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let s = Array2::from_shape_simple_fn((4, cfg.f_bins), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            v.exp()
        });
        let noise = ForwardNoise::draw(&mut rng, 4, &cfg);
        let ps = model.store().leaves();
        let out = model.forward_tf(&ps, &s, &noise).unwrap();

        let zero_beta = elbo_loss(&out, &s, 0.0, 0.0).unwrap().breakdown();
        assert_eq!(zero_beta.total, zero_beta.recon_is);

        let b1 = elbo_loss(&out, &s, 1e-2, 1e-2).unwrap().breakdown();
        let b2 = elbo_loss(&out, &s, 1e-2, 2e-2).unwrap().breakdown();
        let kl_contrib_1 = b1.total - b1.recon_is - 1e-2 * b1.kl_w;
        let kl_contrib_2 = b2.total - b2.recon_is - 1e-2 * b2.kl_w;
        assert!((kl_contrib_2 - 2.0 * kl_contrib_1).abs() < 1e-9 * kl_contrib_1.abs().max(1.0));

        // Additivity identity of the breakdown.
        let recomposed = b1.recon_is + 1e-2 * b1.kl_z + 1e-2 * b1.kl_w;
        assert!((b1.total - recomposed).abs() < 1e-12 * b1.total.abs().max(1.0));
        assert!(b1.kl_z >= 0.0 && b1.kl_w >= 0.0 && b1.recon_is >= 0.0);
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = OptimizerConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(5000, &cfg), 5e-5);
        assert!((lr_at(25_000, &cfg) - 1e-8).abs() < 1e-20);
        assert_eq!(lr_at(30_000, &cfg), 1e-8);
        // Half period: exact midpoint of [lr_min, lr_max].
        let mid = lr_at(15_000, &cfg);
        assert!((mid - (5e-5 + 1e-8) / 2.0).abs() < 1e-18);
        // Continuity at the warmup/cosine junction.
        let before = lr_at(5000, &cfg);
        let after = lr_at(5001, &cfg);
        assert!((before - after).abs() < 1e-7);
        // Warmup is linear.
        assert!((lr_at(2500, &cfg) - 2.5e-5).abs() < 1e-18);
    }

    #[test]
    fn adamw_zero_gradient_is_pure_decay() {
        let mut store = ParameterStore::new();
        store.insert("p", Array2::from_elem((1, 1), 2.0));
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Array2::zeros((1, 1)));
        let mut state = AdamState::new();
        let cfg = OptimizerConfig::default();
        adamw_step(&mut store, &grads, &mut state, 0.1, &cfg);
        let expected = 2.0 - 0.1 * cfg.weight_decay * 2.0;
        assert_eq!(store.get("p")[(0, 0)], expected);
    }

    #[test]
    fn adamw_matches_scalar_recursion() {
        let cfg = OptimizerConfig {
            weight_decay: 1e-3,
            ..OptimizerConfig::default()
        };
        let lr = 1e-2;
        let grads_seq = [0.3, -1.2, 0.8, 0.05, -0.4];

        let mut store = ParameterStore::new();
        store.insert("p", Array2::from_elem((1, 1), 0.7));
        let mut state = AdamState::new();

        // Independent scalar recursion.
        let (mut p, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for (t, &g) in grads_seq.iter().enumerate() {
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), Array2::from_elem((1, 1), g));
            adamw_step(&mut store, &grads, &mut state, lr, &cfg);

            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t as i32 + 1));
            let v_hat = v / (1.0 - cfg.beta2.powi(t as i32 + 1));
            p -= lr * m_hat / (v_hat.sqrt() + cfg.eps) + lr * cfg.weight_decay * p;
            assert!(
                (store.get("p")[(0, 0)] - p).abs() < 1e-12,
                "step {t}: {} vs {p}",
                store.get("p")[(0, 0)]
            );
        }

        // weight_decay = 0 reduces to plain Adam.
        let plain = OptimizerConfig {
            weight_decay: 0.0,
            ..cfg
        };
        let mut store2 = ParameterStore::new();
        store2.insert("p", Array2::from_elem((1, 1), 0.7));
        let mut state2 = AdamState::new();
        let (mut p2, mut m2, mut v2) = (0.7f64, 0.0f64, 0.0f64);
        for (t, &g) in grads_seq.iter().enumerate() {
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), Array2::from_elem((1, 1), g));
            adamw_step(&mut store2, &grads, &mut state2, lr, &plain);
            m2 = plain.beta1 * m2 + (1.0 - plain.beta1) * g;
            v2 = plain.beta2 * v2 + (1.0 - plain.beta2) * g * g;
            p2 -= lr * (m2 / (1.0 - plain.beta1.powi(t as i32 + 1)))
                / ((v2 / (1.0 - plain.beta2.powi(t as i32 + 1))).sqrt() + plain.eps);
            assert!((store2.get("p")[(0, 0)] - p2).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Array2::from_elem((1, 2), 3.0));
        grads.insert("b".to_string(), Array2::from_elem((1, 2), 4.0));
        // norm = sqrt(2*9 + 2*16) = sqrt(50)
        let norm = clip_global_norm(&mut grads, 5.0);
        assert!((norm - 50f64.sqrt()).abs() < 1e-12);
        let new_norm: f64 = grads
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!((new_norm - 5.0).abs() < 1e-12);

        let mut small = BTreeMap::new();
        small.insert("a".to_string(), Array2::from_elem((1, 1), 0.5));
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small["a"][(0, 0)], 0.5);
    }

    #[test]
    fn training_same_seed_same_curve() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let cfg = ModelConfig::tiny();
        let segments = rand_segments(&mut rng, 6, 5, cfg.f_bins);
        let run = RunConfig {
            seed: 7,
            iterations: 8,
            batch_size: 4,
            t_seg: 5,
            ..RunConfig::default()
        };
        let optim = OptimizerConfig {
            warmup_iters: 4,
            cosine_iters: 4,
            lr_max: 1e-3,
            ..OptimizerConfig::default()
        };
        let run_once = || {
            let model = DvaeModel::new(cfg, 11).unwrap();
            let mut trainer = Trainer::new(model, optim, run).unwrap();
            trainer.train(&segments, |_| {}).unwrap()
        };
        let a = run_once();
        let b = run_once();
        assert_eq!(a.len(), b.len());
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.loss.total.to_bits(), rb.loss.total.to_bits());
            assert_eq!(ra.loss.recon_is.to_bits(), rb.loss.recon_is.to_bits());
        }
    }

    #[test]
    fn checkpoint_resume_continues_bit_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let cfg = ModelConfig::tiny().with_variant(Variant::HiT);
        let segments = rand_segments(&mut rng, 5, 4, cfg.f_bins);
        let optim = OptimizerConfig {
            warmup_iters: 3,
            cosine_iters: 5,
            lr_max: 5e-4,
            ..OptimizerConfig::default()
        };
        let run_full = RunConfig {
            seed: 9,
            iterations: 10,
            batch_size: 2,
            t_seg: 4,
            ..RunConfig::default()
        };

        // Straight-through run.
        let model = DvaeModel::new(cfg, 21).unwrap();
        let mut direct = Trainer::new(model, optim, run_full).unwrap();
        let direct_rows = direct.train(&segments, |_| {}).unwrap();

        // Stop at 5, checkpoint through JSON, resume to 10.
        let model = DvaeModel::new(cfg, 21).unwrap();
        let mut first = Trainer::new(
            model,
            optim,
            RunConfig {
                iterations: 5,
                ..run_full
            },
        )
        .unwrap();
        first.train(&segments, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        first.checkpoint().save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        let mut resumed = Trainer::from_checkpoint(&loaded).unwrap();
        resumed.run.iterations = 10;
        let resumed_rows = resumed.train(&segments, |_| {}).unwrap();

        assert_eq!(resumed_rows.len(), 5);
        for (ra, rb) in direct_rows[5..].iter().zip(&resumed_rows) {
            assert_eq!(ra.iteration, rb.iteration);
            assert_eq!(ra.loss.total.to_bits(), rb.loss.total.to_bits());
        }

        // Final parameters identical too.
        for (name, v) in direct.model.store().iter() {
            let r = resumed.model.store().get(name);
            assert_eq!(v.as_ref(), r.as_ref(), "parameter {name} diverged");
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let cfg = ModelConfig::tiny();
        let segments = rand_segments(&mut rng, 4, 4, cfg.f_bins);
        let mut trainer = Trainer::new(
            DvaeModel::new(cfg, 2).unwrap(),
            OptimizerConfig::default(),
            RunConfig {
                iterations: 3,
                batch_size: 2,
                ..RunConfig::default()
            },
        )
        .unwrap();
        // Poison one parameter; the step must fail with the term name
        // rather than panic.
        let dim = trainer.model.store().get("dec.head_vs.w").dim();
        trainer
            .model
            .store_mut()
            .set("dec.head_vs.w", Array2::from_elem(dim, f64::NAN));
        let err = trainer.train(&segments, |_| {}).unwrap_err();
        match err {
            crate::error::Error::NonFiniteLoss { iteration, term } => {
                assert_eq!(iteration, 0);
                assert_eq!(term, "recon_is");
            }
            other => panic!("expected NonFiniteLoss, got {other}"),
        }
    }

    #[test]
    fn training_rejects_empty_corpus() {
        let model = DvaeModel::new(ModelConfig::tiny(), 1).unwrap();
        let mut trainer = Trainer::new(
            model,
            OptimizerConfig::default(),
            RunConfig {
                iterations: 1,
                ..RunConfig::default()
            },
        )
        .unwrap();
        assert!(trainer.train(&[], |_| {}).is_err());
    }
}
