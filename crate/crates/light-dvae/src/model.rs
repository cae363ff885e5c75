//! The Transformer dynamical VAE over speech power spectrograms: a
//! sequence-level latent w encoded by a recurrent network, per-frame
//! latents z from a non-causal Transformer encoder, and two causal decoder
//! passes producing the latent prior and the observation variance.
//!
//! Variants: `HiT` keeps two separate decoder stacks, `LigHT` shares one
//! stack between the two passes, `InvS` swaps the observation decoder's
//! query and key/value sources, and `InvSNR` additionally removes the
//! observation decoder's residual connections.
//!
//! Frames are rows internally (T x F); the public spectrogram type is
//! F x T and is transposed at the boundary.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distributions::{reparam_sample, DiagGaussianParams, LOG_VAR_CLAMP};
use crate::dsp::PowerSpectrogram;
use crate::error::{Error, Result};
use crate::nn::{
    positional_encoding, AttentionMask, DecoderLayer, EncoderLayer, GruCell, LayerConfig, Leaves,
    Linear, ParameterStore,
};
use crate::tensor::Tensor;

/// Architecture variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Two separate decoder stacks.
    HiT,
    /// One decoder stack shared by the prior and observation passes.
    LigHT,
    /// Observation decoder with query/key-value sources swapped.
    InvS,
    /// InvS with residual connections removed in the observation pass.
    InvSNR,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::HiT => "hit",
            Variant::LigHT => "light",
            Variant::InvS => "inv-s",
            Variant::InvSNR => "inv-s-nr",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(v: &str) -> Result<Self> {
        match v.to_ascii_lowercase().as_str() {
            "hit" => Ok(Variant::HiT),
            "light" => Ok(Variant::LigHT),
            "inv-s" | "invs" => Ok(Variant::InvS),
            "inv-s-nr" | "invsnr" => Ok(Variant::InvSNR),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant '{other}' (expected hit, light, inv-s or inv-s-nr)"
            ))),
        }
    }
}

/// Stack layout the ablations build on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseArch {
    HiT,
    LigHT,
}

impl std::fmt::Display for BaseArch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaseArch::HiT => "hit",
            BaseArch::LigHT => "light",
        })
    }
}

impl std::str::FromStr for BaseArch {
    type Err = Error;

    fn from_str(v: &str) -> Result<Self> {
        match v.to_ascii_lowercase().as_str() {
            "hit" => Ok(BaseArch::HiT),
            "light" => Ok(BaseArch::LigHT),
            other => Err(Error::InvalidArgument(format!(
                "unknown base '{other}' (expected hit or light)"
            ))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Frequency bins F of the input power spectrogram.
    pub f_bins: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    /// Per-frame latent width.
    pub l_z: usize,
    /// Sequence-level latent width.
    pub l_w: usize,
    /// Hidden width of the w-encoder recurrence.
    pub rnn_hidden: usize,
    pub variant: Variant,
    /// Stack layout for the InvS / InvSNR ablations; ignored otherwise.
    pub base: BaseArch,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            f_bins: 513,
            d_model: 256,
            n_layers: 4,
            d_ff: 1024,
            n_heads: 1,
            l_z: 16,
            l_w: 32,
            rnn_hidden: 256,
            variant: Variant::LigHT,
            base: BaseArch::LigHT,
        }
    }
}

impl ModelConfig {
    /// Minimal configuration for gradient suites.
    pub fn tiny() -> Self {
        ModelConfig {
            f_bins: 9,
            d_model: 8,
            n_layers: 1,
            d_ff: 16,
            n_heads: 1,
            l_z: 2,
            l_w: 3,
            rnn_hidden: 8,
            variant: Variant::LigHT,
            base: BaseArch::LigHT,
        }
    }

    /// Laptop-scale configuration used by the desk training runs.
    pub fn desk() -> Self {
        ModelConfig {
            f_bins: 65,
            d_model: 32,
            n_layers: 2,
            d_ff: 128,
            n_heads: 1,
            l_z: 4,
            l_w: 8,
            rnn_hidden: 32,
            variant: Variant::LigHT,
            base: BaseArch::LigHT,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        if matches!(variant, Variant::HiT) {
            self.base = BaseArch::HiT;
        }
        if matches!(variant, Variant::LigHT) {
            self.base = BaseArch::LigHT;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("f_bins", self.f_bins),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("l_z", self.l_z),
            ("l_w", self.l_w),
            ("rnn_hidden", self.rnn_hidden),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % 2 != 0 {
            return Err(Error::InvalidConfig(
                "d_model must be even for the positional encoding".into(),
            ));
        }
        self.layer_config().validate()
    }

    pub fn layer_config(&self) -> LayerConfig {
        LayerConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            residual_enabled: true,
        }
    }

    /// Stack layout after resolving the ablation base.
    pub fn effective_base(&self) -> BaseArch {
        match self.variant {
            Variant::HiT => BaseArch::HiT,
            Variant::LigHT => BaseArch::LigHT,
            Variant::InvS | Variant::InvSNR => self.base,
        }
    }

    /// One decoder stack serves both passes?
    pub fn shares_decoder(&self) -> bool {
        self.effective_base() == BaseArch::LigHT
    }

    /// Observation pass queries from the (shifted) feedback stream instead
    /// of the latent stream?
    pub fn swaps_observation_inputs(&self) -> bool {
        matches!(self.variant, Variant::InvS | Variant::InvSNR)
    }

    /// Residual connections in the observation pass (removed for InvSNR
    /// only; the prior pass always keeps them).
    pub fn observation_residual(&self) -> bool {
        !matches!(self.variant, Variant::InvSNR)
    }
}

/// Standard-normal draws consumed by one teacher-forced pass.
#[derive(Debug, Clone)]
pub struct ForwardNoise {
    /// 1 x l_w draw for the sequence latent.
    pub w: Array2<f64>,
    /// T x l_z draws for the frame latents.
    pub z: Array2<f64>,
}

impl ForwardNoise {
    pub fn draw(rng: &mut ChaCha20Rng, t_len: usize, cfg: &ModelConfig) -> Self {
        ForwardNoise {
            w: Array2::from_shape_simple_fn((1, cfg.l_w), || StandardNormal.sample(rng)),
            z: Array2::from_shape_simple_fn((t_len, cfg.l_z), || StandardNormal.sample(rng)),
        }
    }

    /// Zero noise: samples collapse to the posterior means.
    pub fn zeros(t_len: usize, cfg: &ModelConfig) -> Self {
        ForwardNoise {
            w: Array2::zeros((1, cfg.l_w)),
            z: Array2::zeros((t_len, cfg.l_z)),
        }
    }
}

/// Everything one teacher-forced pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Posterior over the sequence latent (1 x l_w).
    pub q_w: DiagGaussianParams,
    /// Reparameterized w draw (1 x l_w).
    pub w_sample: Tensor,
    /// Per-frame posteriors (T x l_z).
    pub q_z: DiagGaussianParams,
    /// Reparameterized z draws (T x l_z).
    pub z_sample: Tensor,
    /// Per-frame latent priors (T x l_z).
    pub p_z: DiagGaussianParams,
    /// Observation variances (T x f_bins), strictly positive.
    pub v_s: Tensor,
}

/// Decoder feedback source at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Ground-truth past frames (teacher forcing).
    Tf,
    /// The model's own previously generated frames.
    Gen,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(v: &str) -> Result<Self> {
        match v.to_ascii_uppercase().as_str() {
            "TF" | "GT" => Ok(Mode::Tf),
            "GEN" => Ok(Mode::Gen),
            other => Err(Error::InvalidArgument(format!("unknown mode: {other}"))),
        }
    }
}

/// Model instance: configuration plus named parameters.
#[derive(Debug, Clone)]
pub struct DvaeModel {
    cfg: ModelConfig,
    store: ParameterStore,
    w_gru: GruCell,
    w_head: Linear,
    enc_embed: Linear,
    enc_layers: Vec<EncoderLayer>,
    q_z_head: Linear,
    dec_main_embed: Linear,
    dec_s_embed: Linear,
    prior_stack: Vec<DecoderLayer>,
    obs_stack: Vec<DecoderLayer>,
    p_z_head: Linear,
    v_s_head: Linear,
}

impl DvaeModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let lc = cfg.layer_config();

        let w_gru = GruCell::init(&mut store, &mut rng, "wenc.gru", cfg.f_bins, cfg.rnn_hidden);
        let w_head = Linear::init(&mut store, &mut rng, "wenc.head", cfg.rnn_hidden, 2 * cfg.l_w);

        let enc_embed = Linear::init(
            &mut store,
            &mut rng,
            "enc.embed",
            cfg.f_bins + cfg.l_w,
            cfg.d_model,
        );
        let enc_layers = (0..cfg.n_layers)
            .map(|i| EncoderLayer::init(&mut store, &mut rng, &format!("enc.layer{i}"), &lc))
            .collect();
        let q_z_head = Linear::init(&mut store, &mut rng, "enc.head", cfg.d_model, 2 * cfg.l_z);

        let dec_main_embed = Linear::init(
            &mut store,
            &mut rng,
            "dec.embed_main",
            cfg.l_z + cfg.l_w,
            cfg.d_model,
        );
        let dec_s_embed =
            Linear::init(&mut store, &mut rng, "dec.embed_s", cfg.f_bins, cfg.d_model);

        let (prior_stack, obs_stack): (Vec<DecoderLayer>, Vec<DecoderLayer>) =
            if cfg.shares_decoder() {
                let shared: Vec<DecoderLayer> = (0..cfg.n_layers)
                    .map(|i| {
                        DecoderLayer::init(&mut store, &mut rng, &format!("dec.stack.layer{i}"), &lc)
                    })
                    .collect();
                (shared.clone(), shared)
            } else {
                let prior = (0..cfg.n_layers)
                    .map(|i| {
                        DecoderLayer::init(
                            &mut store,
                            &mut rng,
                            &format!("dec.stack_z.layer{i}"),
                            &lc,
                        )
                    })
                    .collect();
                let obs = (0..cfg.n_layers)
                    .map(|i| {
                        DecoderLayer::init(
                            &mut store,
                            &mut rng,
                            &format!("dec.stack_s.layer{i}"),
                            &lc,
                        )
                    })
                    .collect();
                (prior, obs)
            };

        let p_z_head = Linear::init(&mut store, &mut rng, "dec.head_pz", cfg.d_model, 2 * cfg.l_z);
        let v_s_head = Linear::init(&mut store, &mut rng, "dec.head_vs", cfg.d_model, cfg.f_bins);

        Ok(DvaeModel {
            cfg,
            store,
            w_gru,
            w_head,
            enc_embed,
            enc_layers,
            q_z_head,
            dec_main_embed,
            dec_s_embed,
            prior_stack,
            obs_stack,
            p_z_head,
            v_s_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn count_params(&self) -> usize {
        self.store.total_params()
    }

    /// Parameter counts grouped by module prefix, in name order.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: std::collections::BTreeMap<String, usize> = Default::default();
        for (name, values) in self.store.iter() {
            let prefix = name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".");
            *groups.entry(prefix).or_default() += values.len();
        }
        groups.into_iter().collect()
    }

    /// Scalar count of one decoder stack (the quantity LigHT shares).
    pub fn decoder_stack_param_count(&self) -> usize {
        if self.cfg.shares_decoder() {
            self.store.count_with_prefix("dec.stack.")
        } else {
            self.store.count_with_prefix("dec.stack_z.")
        }
    }

    fn split_gaussian(&self, raw: &Tensor, width: usize) -> Result<DiagGaussianParams> {
        DiagGaussianParams::new(raw.slice_cols(0, width), raw.slice_cols(width, 2 * width))
    }

    /// Sequence-latent posterior from the full spectrogram: a gated
    /// recurrence over frames, last hidden state through a linear head.
    pub fn encode_w(&self, ps: &Leaves, s: &Tensor) -> Result<DiagGaussianParams> {
        let t_len = s.rows();
        let mut h = Tensor::zeros(1, self.cfg.rnn_hidden);
        for t in 0..t_len {
            h = self.w_gru.step(ps, &s.slice_rows(t, t + 1), &h);
        }
        self.split_gaussian(&self.w_head.forward(ps, &h), self.cfg.l_w)
    }

    /// Per-frame latent posteriors. The encoder is non-causal: every q(z_t)
    /// conditions on the whole sequence (and on w, replicated per frame).
    pub fn encode_z(&self, ps: &Leaves, s: &Tensor, w: &Tensor) -> Result<DiagGaussianParams> {
        let t_len = s.rows();
        let x = s.concat_cols(&w.repeat_row(t_len));
        let pe = Tensor::constant(positional_encoding(t_len, self.cfg.d_model));
        let mut e = self.enc_embed.forward(ps, &x).add(&pe);
        for layer in &self.enc_layers {
            e = layer.forward(ps, &e, None);
        }
        self.split_gaussian(&self.q_z_head.forward(ps, &e), self.cfg.l_z)
    }

    /// Both decoder passes.
    pub fn decode(
        &self,
        ps: &Leaves,
        z: &Tensor,
        w: &Tensor,
        s_feedback: &Tensor,
    ) -> Result<(DiagGaussianParams, Tensor)> {
        let p_z = self.decode_prior(ps, z, w, s_feedback)?;
        let v_s = self.decode_observation(ps, z, w, s_feedback)?;
        Ok((p_z, v_s))
    }

    /// Embedded (shifted) feedback stream shared by both passes.
    fn embed_feedback(&self, ps: &Leaves, s_feedback: &Tensor, pe: &Tensor) -> Tensor {
        self.dec_s_embed
            .forward(ps, &s_feedback.shift_down())
            .add(pe)
    }

    /// Prior pass: self-attention over the shifted latent stream (so frame
    /// t sees z up to t-1 plus w), cross-attention into the shifted
    /// feedback stream (s up to t-1).
    pub fn decode_prior(
        &self,
        ps: &Leaves,
        z: &Tensor,
        w: &Tensor,
        s_feedback: &Tensor,
    ) -> Result<DiagGaussianParams> {
        let t_len = z.rows();
        let pe = Tensor::constant(positional_encoding(t_len, self.cfg.d_model));
        let causal = AttentionMask::causal(t_len);
        // Only the z part is shifted; w stays attached to every position so
        // the prior at t = 1 still conditions on it.
        let main = z.shift_down().concat_cols(&w.repeat_row(t_len));
        let mut x = self.dec_main_embed.forward(ps, &main).add(&pe);
        let memory = self.embed_feedback(ps, s_feedback, &pe);
        for layer in &self.prior_stack {
            x = layer.forward(ps, &x, &memory, &causal, &causal, true);
        }
        self.split_gaussian(&self.p_z_head.forward(ps, &x), self.cfg.l_z)
    }

    /// Observation pass: the latent stream is unshifted (frame t sees z up
    /// to t), the feedback stream shifted. InvS swaps which stream drives
    /// the queries; InvSNR additionally drops the residual connections.
    pub fn decode_observation(
        &self,
        ps: &Leaves,
        z: &Tensor,
        w: &Tensor,
        s_feedback: &Tensor,
    ) -> Result<Tensor> {
        let t_len = z.rows();
        let pe = Tensor::constant(positional_encoding(t_len, self.cfg.d_model));
        let causal = AttentionMask::causal(t_len);
        let main = z.concat_cols(&w.repeat_row(t_len));
        let main_stream = self.dec_main_embed.forward(ps, &main).add(&pe);
        let feedback_stream = self.embed_feedback(ps, s_feedback, &pe);

        let (mut x, memory) = if self.cfg.swaps_observation_inputs() {
            (feedback_stream, main_stream)
        } else {
            (main_stream, feedback_stream)
        };
        let residual = self.cfg.observation_residual();
        for layer in &self.obs_stack {
            x = layer.forward(ps, &x, &memory, &causal, &causal, residual);
        }
        let log_v = self
            .v_s_head
            .forward(ps, &x)
            .clamp(LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1);
        Ok(log_v.exp())
    }

    /// Teacher-forced pass: encode, sample, decode against the ground-truth
    /// feedback. `s_power_tf` is frames-as-rows (T x F).
    pub fn forward_tf(
        &self,
        ps: &Leaves,
        s_power_tf: &Array2<f64>,
        noise: &ForwardNoise,
    ) -> Result<ForwardOutput> {
        let (t_len, f) = s_power_tf.dim();
        if f != self.cfg.f_bins {
            return Err(Error::shape(
                "forward_tf",
                format!("{} bins", self.cfg.f_bins),
                format!("{f} bins"),
            ));
        }
        if t_len == 0 {
            return Err(Error::EmptySignal("zero-length spectrogram".into()));
        }
        let s = Tensor::constant(s_power_tf.clone());
        let q_w = self.encode_w(ps, &s)?;
        let w_sample = reparam_sample(&q_w, &Tensor::constant(noise.w.clone()))?;
        let q_z = self.encode_z(ps, &s, &w_sample)?;
        let z_sample = reparam_sample(&q_z, &Tensor::constant(noise.z.clone()))?;
        let (p_z, v_s) = self.decode(ps, &z_sample, &w_sample, &s)?;
        Ok(ForwardOutput {
            q_w,
            w_sample,
            q_z,
            z_sample,
            p_z,
            v_s,
        })
    }

    /// Analysis-resynthesis: z and w always come from the inference model
    /// run on the ground truth; the decoder feedback is either the ground
    /// truth (TF) or the model's own previous outputs (GEN). Returns the
    /// v_s sequence as T x F.
    pub fn resynthesize(
        &self,
        s_power: &PowerSpectrogram,
        mode: Mode,
        rng: &mut ChaCha20Rng,
    ) -> Result<Array2<f64>> {
        let s_tf = s_power.values.t().to_owned();
        let t_len = s_tf.dim().0;
        let noise = ForwardNoise::draw(rng, t_len, &self.cfg);
        let ps = self.store.frozen();

        // Encoder side is identical in both modes.
        let s = Tensor::constant(s_tf.clone());
        let q_w = self.encode_w(&ps, &s)?;
        let w_sample = reparam_sample(&q_w, &Tensor::constant(noise.w.clone()))?;
        let q_z = self.encode_z(&ps, &s, &w_sample)?;
        let z_sample = reparam_sample(&q_z, &Tensor::constant(noise.z.clone()))?;

        match mode {
            Mode::Tf => Ok(self
                .decode_observation(&ps, &z_sample, &w_sample, &s)?
                .values()
                .clone()),
            Mode::Gen => {
                let z_const = Tensor::constant(z_sample.values().clone());
                let w_const = Tensor::constant(w_sample.values().clone());
                let f_bins = self.cfg.f_bins;
                Ok(generation_loop(t_len, f_bins, |feedback| {
                    let v = self
                        .decode_observation(
                            &ps,
                            &z_const,
                            &w_const,
                            &Tensor::constant(feedback.clone()),
                        )
                        .expect("shapes fixed by construction");
                    v.values().clone()
                }))
            }
        }
    }

    /// Ancestral sampling of a new spectrogram: w from its standard-normal
    /// prior (unless given), then frame by frame z_t from the prior pass
    /// and the expected power v_s,t fed back as the generated frame.
    pub fn generate(
        &self,
        t_len: usize,
        rng: &mut ChaCha20Rng,
        w: Option<Array2<f64>>,
    ) -> Result<PowerSpectrogram> {
        if t_len == 0 {
            return Err(Error::InvalidArgument("generate: T must be >= 1".into()));
        }
        let cfg = &self.cfg;
        let w = match w {
            Some(w) => {
                if w.dim() != (1, cfg.l_w) {
                    return Err(Error::shape(
                        "generate w",
                        format!("(1, {})", cfg.l_w),
                        format!("{:?}", w.dim()),
                    ));
                }
                w
            }
            None => Array2::from_shape_simple_fn((1, cfg.l_w), || StandardNormal.sample(rng)),
        };
        let ps = self.store.frozen();
        let w_t = Tensor::constant(w);
        let mut z = Array2::zeros((t_len, cfg.l_z));
        let mut feedback = Array2::zeros((t_len, cfg.f_bins));
        for t in 0..t_len {
            // Prior parameters at frame t depend only on z_{<t}, s_{<t}, w,
            // so the zero rows at positions >= t are never read.
            let p_z = self.decode_prior(
                &ps,
                &Tensor::constant(z.clone()),
                &w_t,
                &Tensor::constant(feedback.clone()),
            )?;
            let mean = p_z.mean.values();
            let log_var = p_z.log_var.values();
            for j in 0..cfg.l_z {
                let eps: f64 = StandardNormal.sample(rng);
                z[(t, j)] = mean[(t, j)] + (0.5 * log_var[(t, j)]).exp() * eps;
            }
            let v_s = self.decode_observation(
                &ps,
                &Tensor::constant(z.clone()),
                &w_t,
                &Tensor::constant(feedback.clone()),
            )?;
            feedback.row_mut(t).assign(&v_s.values().row(t));
        }
        Ok(PowerSpectrogram::from_values(feedback.t().to_owned()))
    }
}

/// Frame-by-frame generation: `decode_step` maps the current feedback
/// matrix (rows >= t still zero) to a full v_s matrix; row t is appended to
/// the feedback after each step. Factored out so the self-consistency of
/// the loop is testable with a manufactured decoder.
pub fn generation_loop(
    t_len: usize,
    f_bins: usize,
    decode_step: impl Fn(&Array2<f64>) -> Array2<f64>,
) -> Array2<f64> {
    let mut feedback = Array2::zeros((t_len, f_bins));
    for t in 0..t_len {
        let v_s = decode_step(&feedback);
        feedback.row_mut(t).assign(&v_s.row(t));
    }
    feedback
}

/// Transposes a frames-as-rows matrix back into an F x T spectrogram.
pub fn v_s_to_spectrogram(v_s: &Array2<f64>) -> PowerSpectrogram {
    PowerSpectrogram::from_values(v_s.t().to_owned())
}
