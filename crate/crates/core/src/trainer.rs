//! Alternating training of the viseme/phoneme mapping: a statistic network
//! acting as discriminator over mutual-information estimates, and a
//! generator made of two front-end encoders plus a proxy recognition head,
//! with the two cluster banks refreshed on a fixed epoch schedule.

use std::fs;
use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{BankConfig, ClusterBank, ResampleStrategy};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::eval::ReferenceClassifier;
use crate::mi::{self, Bound, PairedBatch};
use crate::nn::{self, Activation, Adam, DenseNetwork, Gradients};
use crate::rng;
use crate::transfer::{Retrieval, DEFAULT_TEMPERATURE};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "epoch,l_proxy,l_gan_d,l_g,l_rec,l_var,js_mi_symbols,phoneme_match_acc";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Balanced banks, adversarial MI terms, transfer and reconstruction.
    #[default]
    Univpm,
    /// As above without the discriminator and the adversarial terms.
    NoAmie,
    /// Random-pruning banks, no adversarial terms.
    PruningBaseline,
    /// Full method with the proxy head reading noisy audio.
    Noisy,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "univpm" => Ok(Self::Univpm),
            "no-amie" => Ok(Self::NoAmie),
            "pruning-baseline" => Ok(Self::PruningBaseline),
            "noisy" => Ok(Self::Noisy),
            other => Err(Error::config(
                "variant",
                format!("unknown variant {other:?} (univpm, no-amie, pruning-baseline, noisy)"),
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Univpm => "univpm",
            Self::NoAmie => "no-amie",
            Self::PruningBaseline => "pruning-baseline",
            Self::Noisy => "noisy",
        }
    }

    pub fn adversarial(self) -> bool {
        matches!(self, Self::Univpm | Self::Noisy)
    }

    pub fn strategy(self) -> ResampleStrategy {
        match self {
            Self::PruningBaseline => ResampleStrategy::RandomPruning,
            _ => ResampleStrategy::Balanced,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceSign {
    /// `L_var = -(Var_v + Var_a)`: minimizing spreads the centers.
    #[default]
    Dispersive,
    /// `L_var = Var_v + Var_a` as literally summed into the loss.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderInit {
    #[default]
    Identity,
    Random,
}

/// Every key is optional in the TOML file; missing keys take the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub variant: Variant,
    pub lambda_gan: f64,
    pub lambda_rec: f64,
    pub lambda_var: f64,
    pub bank_update_interval_epochs: usize,
    pub epochs: usize,
    /// Sequences per batch.
    pub batch_size: usize,
    pub lr_discriminator: f64,
    pub lr_generator: f64,
    pub seed: u64,
    /// Clusters per bank.
    pub clusters: usize,
    pub max_cluster_size: usize,
    pub temperature: f64,
    pub statistic_hidden: Vec<usize>,
    /// Soft clip `±bound` on the statistic network output; 0 disables it.
    pub statistic_output_bound: f64,
    /// Hidden widths of the encoders; empty means a single linear layer.
    pub encoder_hidden: Vec<usize>,
    pub encoder_init: EncoderInit,
    pub var_sign: VarianceSign,
    /// Keep the banks exactly as they are at the start of training.
    pub freeze_banks: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Univpm,
            lambda_gan: 0.1,
            lambda_rec: 0.2,
            lambda_var: 0.5,
            bank_update_interval_epochs: 10,
            epochs: 30,
            batch_size: 4,
            lr_discriminator: 1e-3,
            lr_generator: 1e-3,
            seed: 0,
            clusters: 10,
            max_cluster_size: 20,
            temperature: DEFAULT_TEMPERATURE,
            statistic_hidden: vec![64, 64],
            statistic_output_bound: 5.0,
            encoder_hidden: Vec::new(),
            encoder_init: EncoderInit::Identity,
            var_sign: VarianceSign::Dispersive,
            freeze_banks: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("lambda_gan", self.lambda_gan),
            ("lambda_rec", self.lambda_rec),
            ("lambda_var", self.lambda_var),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be a finite value >= 0, got {v}")));
            }
        }
        if self.bank_update_interval_epochs == 0 {
            return Err(Error::config("bank_update_interval_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        for (field, v) in [
            ("lr_discriminator", self.lr_discriminator),
            ("lr_generator", self.lr_generator),
            ("temperature", self.temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        if !(self.statistic_output_bound >= 0.0 && self.statistic_output_bound.is_finite()) {
            return Err(Error::config("statistic_output_bound", "must be a finite value >= 0"));
        }
        if self.clusters < 2 {
            return Err(Error::config("clusters", "must be at least 2"));
        }
        self.bank_config(0).validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `lambda_gan` as applied: zero for the variants without the
    /// discriminator.
    pub fn effective_lambda_gan(&self) -> f64 {
        if self.variant.adversarial() {
            self.lambda_gan
        } else {
            0.0
        }
    }

    fn bank_config(&self, salt: u64) -> BankConfig {
        BankConfig {
            seed: self.seed ^ salt,
            max_cluster_size: self.max_cluster_size,
            ..BankConfig::with_clusters(self.clusters)
        }
    }
}

/// One batch of aligned raw frames.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x_v: Array2<f64>,
    pub x_a: Array2<f64>,
    /// Audio seen by the proxy head when it differs from the clean stream.
    pub x_a_proxy: Option<Array2<f64>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Concatenates sequences `indices` of `corpus`.
    pub fn from_corpus(corpus: &Corpus, indices: &[usize], noisy: bool) -> Result<Self> {
        let seqs: Vec<_> = indices.iter().map(|&i| &corpus.sequences[i]).collect();
        let x_v = concat_rows(seqs.iter().map(|s| s.f_v.view()), corpus.config.dim);
        let x_a = concat_rows(seqs.iter().map(|s| s.f_a.view()), corpus.config.dim);
        let x_a_proxy = if noisy {
            let noisy_views = seqs
                .iter()
                .map(|s| {
                    s.f_a_noisy.as_ref().map(|m| m.view()).ok_or_else(|| {
                        Error::config("variant", "the noisy variant needs a corpus generated with noise_snr_db")
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(concat_rows(noisy_views.into_iter(), corpus.config.dim))
        } else {
            None
        };
        let labels = seqs.iter().flat_map(|s| s.labels.iter().copied()).collect();
        Ok(Self {
            x_v,
            x_a,
            x_a_proxy,
            labels,
        })
    }
}

fn concat_rows<'a>(views: impl Iterator<Item = ArrayView2<'a, f64>>, dim: usize) -> Array2<f64> {
    let views: Vec<_> = views.collect();
    if views.is_empty() {
        return Array2::zeros((0, dim));
    }
    concatenate(Axis(0), &views).expect("equal widths")
}

/// Per-epoch means of the logged quantities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_proxy: f64,
    pub l_gan_d: f64,
    pub l_g: f64,
    pub l_rec: f64,
    pub l_var: f64,
    pub js_mi_symbols: f64,
    pub phoneme_match_acc: f64,
}

impl EpochMetrics {
    pub fn values(&self) -> [f64; 7] {
        [
            self.l_proxy,
            self.l_gan_d,
            self.l_g,
            self.l_rec,
            self.l_var,
            self.js_mi_symbols,
            self.phoneme_match_acc,
        ]
    }

    pub fn csv_line(&self) -> String {
        let vals: Vec<String> = self.values().iter().map(|v| format!("{v:.9}")).collect();
        format!("{},{}", self.epoch, vals.join(","))
    }
}

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in log {
        out.push_str(&m.csv_line());
        out.push('\n');
    }
    out
}

/// Gradients per parameter group from one sub-step. Groups not updated by
/// that sub-step hold exact zeros.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub visual_encoder: Gradients,
    pub audio_encoder: Gradients,
    pub proxy_head: Gradients,
    pub statistic: Gradients,
}

impl StepGradients {
    fn zeros(state: &TrainerState) -> Self {
        Self {
            visual_encoder: Gradients::zeros_for(&state.visual_encoder, 0),
            audio_encoder: Gradients::zeros_for(&state.audio_encoder, 0),
            proxy_head: Gradients::zeros_for(&state.proxy_head, 0),
            statistic: Gradients::zeros_for(&state.statistic, 0),
        }
    }

    pub fn generator_is_zero(&self) -> bool {
        self.visual_encoder.params_are_zero() && self.audio_encoder.params_are_zero() && self.proxy_head.params_are_zero()
    }

    pub fn discriminator_is_zero(&self) -> bool {
        self.statistic.params_are_zero()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLosses {
    pub total: f64,
    pub l_proxy: f64,
    pub l_g: f64,
    pub l_rec: f64,
    pub l_var: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorLosses {
    pub l_gan: f64,
    pub js_features: f64,
    pub js_symbols: f64,
    pub js_transfer: f64,
}

#[derive(Clone, Debug)]
pub struct TrainerState {
    pub config: TrainerConfig,
    pub dim: usize,
    pub classes: usize,
    pub visual_encoder: DenseNetwork,
    pub audio_encoder: DenseNetwork,
    pub proxy_head: DenseNetwork,
    pub statistic: DenseNetwork,
    pub viseme_bank: ClusterBank,
    pub phoneme_bank: ClusterBank,
    pub opt_visual: Adam,
    pub opt_audio: Adam,
    pub opt_head: Adam,
    pub opt_statistic: Adam,
    pub epoch: usize,
    pub log: Vec<EpochMetrics>,
}

/// Mean per-frame Euclidean distance and its gradient with respect to `a`
/// (the gradient for `b` is the negation).
pub fn rec_loss(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let m = a.nrows();
    if m == 0 {
        return Ok((0.0, Array2::zeros(a.raw_dim())));
    }
    let mut grad = &a - &b;
    let mut total = 0.0;
    for mut row in grad.rows_mut() {
        let n = row.dot(&row).sqrt();
        total += n;
        if n > 0.0 {
            row /= n * m as f64;
        }
    }
    Ok((total / m as f64, grad))
}

/// Mean squared distance of the rows of `centers` to their centroid, with
/// its gradient.
pub fn center_variance(centers: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let n = centers.nrows();
    if n < 2 {
        return Err(Error::config("clusters", format!("variance needs at least 2 centers, got {n}")));
    }
    let mean = centers.mean_axis(Axis(0)).expect("n >= 2");
    let dev = &centers - &mean;
    let var = dev.iter().map(|v| v * v).sum::<f64>() / n as f64;
    Ok((var, dev * (2.0 / n as f64)))
}

/// `-(Var(c_v) + Var(c_a))`.
pub fn var_regularizer(centers_v: ArrayView2<f64>, centers_a: ArrayView2<f64>) -> Result<f64> {
    Ok(-(center_variance(centers_v)?.0 + center_variance(centers_a)?.0))
}

/// Variance of the batch soft centers `ĉ_j = Σ_i A_ij f_i / Σ_i A_ij`, where
/// `f` is `values` and `A` is the addressing of `assign` against
/// `bank_centers`. The gradient is taken with respect to `assign` only:
/// `values` are constants, so dispersion is reached by reassigning frames,
/// not by rescaling them.
pub fn soft_center_variance(
    values: ArrayView2<f64>,
    assign: ArrayView2<f64>,
    bank_centers: ArrayView2<f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    if values.dim() != assign.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", values.dim(), assign.dim())));
    }
    let addr = crate::transfer::addressing_scores(assign, bank_centers, temperature)?;
    let a = addr.weights();
    let mass = a.sum_axis(Axis(0));
    let soft = a.t().dot(&values) / &mass.view().insert_axis(Axis(1));
    let (var, g_soft) = center_variance(soft.view())?;
    let scaled = &g_soft / &mass.view().insert_axis(Axis(1));
    // d ĉ_j / d A_ij = (f_i - ĉ_j) / S_j
    let g_a = values.dot(&scaled.t()) - (&soft * &scaled).sum_axis(Axis(1)).insert_axis(Axis(0));
    let grad = addr.backward(assign, g_a.view())?;
    Ok((var, grad))
}

struct JsTerm {
    value: f64,
    params: Gradients,
    gx: Array2<f64>,
    gy: Array2<f64>,
}

fn js_term(net: &DenseNetwork, x: ArrayView2<f64>, y: ArrayView2<f64>, perm: &[usize]) -> Result<JsTerm> {
    let joint = PairedBatch::from_views(x, y)?;
    let marginal = joint.permute_y(perm)?;
    let g = mi::objective_with_gradients(Bound::JensenShannon, net, &joint, &marginal)?;
    let d = x.ncols();
    let (mut gx, mut gy) = mi::ObjectiveGradients::split(&g.joint_input, d);
    let (gmx, gmy) = mi::ObjectiveGradients::split(&g.marginal_input, d);
    gx += &gmx;
    for (k, &p) in perm.iter().enumerate() {
        let mut row = gy.row_mut(p);
        row += &gmy.row(k);
    }
    Ok(JsTerm {
        value: g.value,
        params: g.params,
        gx,
        gy,
    })
}

fn split_cols(m: &Array2<f64>, d: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    (
        m.slice(s![.., 0..d]).to_owned(),
        m.slice(s![.., d..2 * d]).to_owned(),
        m.slice(s![.., 2 * d..3 * d]).to_owned(),
    )
}

fn make_encoder(config: &TrainerConfig, dim: usize, rng: &mut ChaCha8Rng) -> Result<DenseNetwork> {
    match (config.encoder_init, config.encoder_hidden.is_empty()) {
        (EncoderInit::Identity, true) => Ok(DenseNetwork::identity(dim)),
        (EncoderInit::Identity, false) => Err(Error::config(
            "encoder_init",
            "identity initialization needs encoder_hidden = []",
        )),
        (EncoderInit::Random, _) => {
            let dims: Vec<usize> = std::iter::once(dim)
                .chain(config.encoder_hidden.iter().copied())
                .chain([dim])
                .collect();
            DenseNetwork::new(&dims, Activation::Relu, Activation::Identity, rng)
        }
    }
}

impl TrainerState {
    pub fn new(config: TrainerConfig, dim: usize, classes: usize) -> Result<Self> {
        config.validate()?;
        if dim < 2 {
            return Err(Error::config("dim", "must be at least 2"));
        }
        if classes < 2 {
            return Err(Error::config("phonemes", "need at least 2 classes"));
        }
        let mut init = rng::stream(config.seed, 100);
        let visual_encoder = make_encoder(&config, dim, &mut init)?;
        let audio_encoder = make_encoder(&config, dim, &mut init)?;
        let proxy_head = DenseNetwork::new(&[3 * dim, classes], Activation::Relu, Activation::Identity, &mut init)?;
        let bound = (config.statistic_output_bound > 0.0).then_some(config.statistic_output_bound);
        let statistic = mi::bounded_statistic_network(2 * dim, &config.statistic_hidden, bound, &mut init)?;
        let viseme_bank = ClusterBank::new(config.bank_config(0x5649), dim)?;
        let phoneme_bank = ClusterBank::new(config.bank_config(0x5048), dim)?;
        Ok(Self {
            opt_visual: Adam::new(config.lr_generator),
            opt_audio: Adam::new(config.lr_generator),
            opt_head: Adam::new(config.lr_generator),
            opt_statistic: Adam::new(config.lr_discriminator),
            config,
            dim,
            classes,
            visual_encoder,
            audio_encoder,
            proxy_head,
            statistic,
            viseme_bank,
            phoneme_bank,
            epoch: 0,
            log: Vec::new(),
        })
    }

    pub fn banks_ready(&self) -> bool {
        self.viseme_bank.is_initialized() && self.phoneme_bank.is_initialized()
    }

    pub fn encode_visual(&self, x_v: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.visual_encoder.predict(x_v)
    }

    pub fn encode_audio(&self, x_a: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.audio_encoder.predict(x_a)
    }

    /// Nearest viseme-center and phoneme-center rows for each frame.
    pub fn symbol_sequences(&self, f_v: ArrayView2<f64>, f_a: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        Ok((self.viseme_bank.quantize(f_v)?.0, self.phoneme_bank.quantize(f_a)?.0))
    }

    /// Restored audio features for visual features `f_v`.
    pub fn restore(&self, f_v: ArrayView2<f64>) -> Result<Array2<f64>> {
        let centers = self.phoneme_bank.centers_matrix();
        Ok(Retrieval::new(f_v, centers.view(), self.config.temperature)?.restored)
    }

    /// Feeds encoded features of `batch` to both banks.
    pub fn ingest(&mut self, batch: &Batch, rng_v: &mut ChaCha8Rng, rng_a: &mut ChaCha8Rng) -> Result<()> {
        let f_v = self.encode_visual(batch.x_v.view())?;
        let f_a = self.encode_audio(batch.x_a.view())?;
        let strategy = self.config.variant.strategy();
        self.viseme_bank.ingest_with(strategy, f_v.view(), rng_v)?;
        self.phoneme_bank.ingest_with(strategy, f_a.view(), rng_a)
    }

    fn check_ready(&self, batch: &Batch) -> Result<()> {
        if !self.banks_ready() {
            return Err(Error::State("banks are not initialized".into()));
        }
        if batch.len() < 2 {
            return Err(Error::InvalidBatch(format!("need at least 2 frames, got {}", batch.len())));
        }
        Ok(())
    }

    /// `L_GAN = JS(f_v, f_a) - JS(s_v, s_a) - JS(f_v, f̂_a)` and its gradient
    /// for the statistic network only.
    pub fn discriminator_objective<R: Rng>(&self, batch: &Batch, rng: &mut R) -> Result<(DiscriminatorLosses, StepGradients)> {
        self.check_ready(batch)?;
        let f_v = self.encode_visual(batch.x_v.view())?;
        let f_a = self.encode_audio(batch.x_a.view())?;
        let (s_v, s_a) = self.symbol_sequences(f_v.view(), f_a.view())?;
        let f_hat = self.restore(f_v.view())?;
        let m = batch.len();
        let t1 = js_term(&self.statistic, f_v.view(), f_a.view(), &mi::non_identity_permutation(m, rng)?)?;
        let t2 = js_term(&self.statistic, s_v.view(), s_a.view(), &mi::non_identity_permutation(m, rng)?)?;
        let t3 = js_term(&self.statistic, f_v.view(), f_hat.view(), &mi::non_identity_permutation(m, rng)?)?;
        let mut grads = StepGradients::zeros(self);
        let mut g = t1.params;
        let mut neg = t2.params;
        neg.accumulate_params(&t3.params);
        neg.scale_params(-1.0);
        g.accumulate_params(&neg);
        g.input = Array2::zeros((0, 0));
        grads.statistic = g;
        Ok((
            DiscriminatorLosses {
                l_gan: t1.value - t2.value - t3.value,
                js_features: t1.value,
                js_symbols: t2.value,
                js_transfer: t3.value,
            },
            grads,
        ))
    }

    /// `L_proxy + λ_GAN L_G + λ_rec L_rec + λ_var L_var` and its gradients
    /// for the generator groups only. The second return value is the
    /// gradient with respect to the encoded visual features.
    pub fn generator_objective<R: Rng>(
        &self,
        batch: &Batch,
        rng: &mut R,
    ) -> Result<(GeneratorLosses, StepGradients, Array2<f64>)> {
        self.check_ready(batch)?;
        let cfg = &self.config;
        let d = self.dim;
        let m = batch.len();
        let tau = cfg.temperature;
        let lambda_gan = cfg.effective_lambda_gan();
        let c_v = self.viseme_bank.centers_matrix();
        let c_a = self.phoneme_bank.centers_matrix();

        let ev = self.visual_encoder.forward(batch.x_v.view())?;
        let ea = self.audio_encoder.forward(batch.x_a.view())?;
        let en = match &batch.x_a_proxy {
            Some(x) => Some(self.audio_encoder.forward(x.view())?),
            None => None,
        };
        let f_v = ev.output();
        let f_a = ea.output();
        let f_ap = en.as_ref().map(|c| c.output()).unwrap_or(f_a);

        let transfer = Retrieval::new(f_v.view(), c_a.view(), tau)?;
        let f_hat = &transfer.restored;

        // proxy head on f_v ⊕ f_a ⊕ f̂_a
        let head_in = concatenate(Axis(1), &[f_v.view(), f_ap.view(), f_hat.view()]).expect("equal rows");
        let hc = self.proxy_head.forward(head_in.view())?;
        let (l_proxy, g_logits) = nn::softmax_cross_entropy(hc.output().view(), &batch.labels)?;
        let mut head_grads = self.proxy_head.backward(&hc, g_logits.view())?;
        let (mut g_fv, g_fap, mut g_fhat) = split_cols(&head_grads.input, d);
        head_grads.input = Array2::zeros((0, 0));
        let mut g_fa = Array2::zeros((m, d));

        // reconstruction
        let (l_rec, g_rec) = rec_loss(f_hat.view(), f_a.view())?;
        g_fhat.scaled_add(cfg.lambda_rec, &g_rec);
        g_fa.scaled_add(-cfg.lambda_rec, &g_rec);

        // adversarial terms against the frozen statistic network
        let soft_v = Retrieval::new(f_v.view(), c_v.view(), tau)?;
        let soft_a = Retrieval::new(f_a.view(), c_a.view(), tau)?;
        let sym = js_term(
            &self.statistic,
            soft_v.restored.view(),
            soft_a.restored.view(),
            &mi::non_identity_permutation(m, rng)?,
        )?;
        let tr = js_term(&self.statistic, f_v.view(), f_hat.view(), &mi::non_identity_permutation(m, rng)?)?;
        let l_g = -sym.value - tr.value;
        if lambda_gan > 0.0 {
            g_fv += &soft_v.backward(f_v.view(), (&sym.gx * -lambda_gan).view())?;
            g_fa += &soft_a.backward(f_a.view(), (&sym.gy * -lambda_gan).view())?;
            g_fv.scaled_add(-lambda_gan, &tr.gx);
            g_fhat.scaled_add(-lambda_gan, &tr.gy);
        }

        // dispersion of the batch soft centers
        let sign = match cfg.var_sign {
            VarianceSign::Dispersive => -1.0,
            VarianceSign::Literal => 1.0,
        };
        let (var_v, g_var_v) = soft_center_variance(f_v.view(), f_v.view(), c_v.view(), tau)?;
        let (var_a, g_var_a) = soft_center_variance(f_a.view(), f_a.view(), c_a.view(), tau)?;
        let l_var = sign * (var_v + var_a);
        g_fv.scaled_add(cfg.lambda_var * sign, &g_var_v);
        g_fa.scaled_add(cfg.lambda_var * sign, &g_var_a);

        g_fv += &transfer.backward(f_v.view(), g_fhat.view())?;

        let mut visual = self.visual_encoder.backward(&ev, g_fv.view())?;
        let mut audio = match &en {
            Some(cache) => {
                let mut a = self.audio_encoder.backward(&ea, g_fa.view())?;
                a.accumulate_params(&self.audio_encoder.backward(cache, g_fap.view())?);
                a
            }
            None => {
                g_fa += &g_fap;
                self.audio_encoder.backward(&ea, g_fa.view())?
            }
        };
        let g_fv_out = std::mem::replace(&mut visual.input, Array2::zeros((0, 0)));
        audio.input = Array2::zeros((0, 0));

        let mut grads = StepGradients::zeros(self);
        grads.visual_encoder = visual;
        grads.audio_encoder = audio;
        grads.proxy_head = head_grads;
        let total = l_proxy + lambda_gan * l_g + cfg.lambda_rec * l_rec + cfg.lambda_var * l_var;
        Ok((
            GeneratorLosses {
                total,
                l_proxy,
                l_g,
                l_rec,
                l_var,
            },
            grads,
            g_fv_out,
        ))
    }

    /// Ascent step on `L_GAN` for the statistic network.
    pub fn discriminator_step<R: Rng>(&mut self, batch: &Batch, rng: &mut R) -> Result<DiscriminatorLosses> {
        let (losses, mut grads) = self.discriminator_objective(batch, rng)?;
        grads.statistic.scale_params(-1.0);
        self.statistic.apply_gradients(&grads.statistic, &mut self.opt_statistic)?;
        Ok(losses)
    }

    /// Descent step on the generator objective.
    pub fn generator_step<R: Rng>(&mut self, batch: &Batch, rng: &mut R) -> Result<GeneratorLosses> {
        let (losses, grads, _) = self.generator_objective(batch, rng)?;
        self.visual_encoder.apply_gradients(&grads.visual_encoder, &mut self.opt_visual)?;
        self.audio_encoder.apply_gradients(&grads.audio_encoder, &mut self.opt_audio)?;
        self.proxy_head.apply_gradients(&grads.proxy_head, &mut self.opt_head)?;
        Ok(losses)
    }

    /// Referee agreement between restored and clean features over `corpus`,
    /// in percent, with a nearest-mean referee fitted on the clean features.
    pub fn match_accuracy(&self, corpus: &Corpus) -> Result<f64> {
        let all: Vec<usize> = (0..corpus.sequences.len()).collect();
        let batch = Batch::from_corpus(corpus, &all, false)?;
        let f_a = self.encode_audio(batch.x_a.view())?;
        let f_v = self.encode_visual(batch.x_v.view())?;
        let referee = ReferenceClassifier::fit(f_a.view(), &batch.labels, self.classes)?;
        let restored = self.restore(f_v.view())?;
        crate::eval::agreement(&referee, restored.view(), f_a.view())
    }

    pub fn save(&self, dir: &Path) -> Result<Vec<String>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            dim: self.dim,
            classes: self.classes,
            epoch: self.epoch,
            config: self.config.clone(),
        };
        let meta_path = dir.join("trainer.json");
        let text = serde_json::to_string_pretty(&meta)?;
        fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;
        let mut files = vec!["trainer.json".to_string()];
        for (name, net) in [
            ("visual_encoder.bin", &self.visual_encoder),
            ("audio_encoder.bin", &self.audio_encoder),
            ("proxy_head.bin", &self.proxy_head),
            ("statistic.bin", &self.statistic),
        ] {
            net.save(&dir.join(name))?;
            files.push(name.into());
        }
        for (name, bank) in [("viseme_bank.bin", &self.viseme_bank), ("phoneme_bank.bin", &self.phoneme_bank)] {
            crate::blob::write_file(&dir.join(name), &bank.to_bytes()?)?;
            files.push(name.into());
        }
        Ok(files)
    }

    /// Restores networks, banks and config. Optimizer moments and the
    /// metric log are not part of a checkpoint.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("trainer.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible {
                path: meta_path.clone(),
                reason: format!("checkpoint version {} (expected {CHECKPOINT_VERSION})", meta.version),
            });
        }
        let mut state = Self::new(meta.config, meta.dim, meta.classes)?;
        state.epoch = meta.epoch;
        state.visual_encoder = DenseNetwork::load(&dir.join("visual_encoder.bin"))?;
        state.audio_encoder = DenseNetwork::load(&dir.join("audio_encoder.bin"))?;
        state.proxy_head = DenseNetwork::load(&dir.join("proxy_head.bin"))?;
        state.statistic = DenseNetwork::load(&dir.join("statistic.bin"))?;
        state.viseme_bank = ClusterBank::from_bytes(&crate::blob::read_file(&dir.join("viseme_bank.bin"))?)?;
        state.phoneme_bank = ClusterBank::from_bytes(&crate::blob::read_file(&dir.join("phoneme_bank.bin"))?)?;
        for (name, dims, want) in [
            ("visual_encoder", state.visual_encoder.layer_dims(), (meta.dim, meta.dim)),
            ("audio_encoder", state.audio_encoder.layer_dims(), (meta.dim, meta.dim)),
            ("proxy_head", state.proxy_head.layer_dims(), (3 * meta.dim, meta.classes)),
            ("statistic", state.statistic.layer_dims(), (2 * meta.dim, 1)),
        ] {
            if (dims[0], *dims.last().expect("nonempty")) != want {
                return Err(Error::Incompatible {
                    path: dir.join(format!("{name}.bin")),
                    reason: format!("layer dims {dims:?} do not fit dim {} / {} classes", meta.dim, meta.classes),
                });
            }
        }
        if state.viseme_bank.dim() != meta.dim || state.phoneme_bank.dim() != meta.dim {
            return Err(Error::Incompatible {
                path: dir.to_path_buf(),
                reason: "bank dimension differs from the encoders".into(),
            });
        }
        Ok(state)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    dim: usize,
    classes: usize,
    epoch: usize,
    config: TrainerConfig,
}

/// Trains from scratch on `corpus`.
pub fn train(config: &TrainerConfig, corpus: &Corpus) -> Result<TrainerState> {
    let state = TrainerState::new(config.clone(), corpus.config.dim, corpus.config.phonemes)?;
    train_from(state, corpus)
}

/// Continues training `state` for `state.config.epochs` epochs.
pub fn train_from(mut state: TrainerState, corpus: &Corpus) -> Result<TrainerState> {
    if corpus.sequences.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if corpus.config.dim != state.dim || corpus.config.phonemes != state.classes {
        return Err(Error::Shape(format!(
            "corpus has D={} P={}, trainer expects D={} P={}",
            corpus.config.dim, corpus.config.phonemes, state.dim, state.classes
        )));
    }
    let cfg = state.config.clone();
    let noisy = cfg.variant == Variant::Noisy;
    let adversarial = cfg.variant.adversarial();
    let mut order_rng = rng::stream(cfg.seed, 101);
    let mut step_rng = rng::stream(cfg.seed, 102);
    let mut bank_v_rng = rng::stream(cfg.seed, 103);
    let mut bank_a_rng = rng::stream(cfg.seed, 104);
    let mut order: Vec<usize> = (0..corpus.sequences.len()).collect();
    let start = state.epoch;
    for epoch in start..start + cfg.epochs {
        order.shuffle(&mut order_rng);
        let update_banks = !cfg.freeze_banks && epoch % cfg.bank_update_interval_epochs == 0;
        let mut sums = [0.0f64; 6];
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::from_corpus(corpus, chunk, noisy)?;
            if update_banks {
                state.ingest(&batch, &mut bank_v_rng, &mut bank_a_rng)?;
            }
            if !state.banks_ready() || batch.len() < 2 {
                continue;
            }
            let d = if adversarial {
                state.discriminator_step(&batch, &mut step_rng)?
            } else {
                state.discriminator_objective(&batch, &mut step_rng)?.0
            };
            let g = state.generator_step(&batch, &mut step_rng)?;
            for (s, v) in sums.iter_mut().zip([g.l_proxy, d.l_gan, g.l_g, g.l_rec, g.l_var, d.js_symbols]) {
                *s += v;
            }
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let acc = if state.banks_ready() {
            state.match_accuracy(corpus)?
        } else {
            0.0
        };
        state.log.push(EpochMetrics {
            epoch,
            l_proxy: sums[0] / n,
            l_gan_d: sums[1] / n,
            l_g: sums[2] / n,
            l_rec: sums[3] / n,
            l_var: sums[4] / n,
            js_mi_symbols: sums[5] / n,
            phoneme_match_acc: acc,
        });
        state.epoch = epoch + 1;
    }
    Ok(state)
}

pub fn write_metrics(path: &Path, log: &[EpochMetrics]) -> Result<()> {
    fs::write(path, metrics_csv(log)).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    })?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(Error::Format(format!("unexpected metrics header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad number {:?} in column {i}", &rec[i])))
        };
        out.push(EpochMetrics {
            epoch: rec[0].parse().map_err(|_| Error::Format(format!("bad epoch {:?}", &rec[0])))?,
            l_proxy: num(1)?,
            l_gan_d: num(2)?,
            l_g: num(3)?,
            l_rec: num(4)?,
            l_var: num(5)?,
            js_mi_symbols: num(6)?,
            phoneme_match_acc: num(7)?,
        });
    }
    Ok(out)
}
