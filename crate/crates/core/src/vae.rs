//! Convolutional VAE with a Bernoulli decoder.
//!
//! The encoder is a stack of stride-2 4×4 convolutions without biases whose
//! channel count starts at `n` and doubles per layer, followed by bias-free
//! mean and log-variance heads. The decoder maps the latent through a dense
//! layer and two nearest-neighbour-upsample + 3×3 convolution stages back to
//! per-pixel Bernoulli logits.
//!
//! The same machinery evaluates the ELBO (analytic KL), the importance
//! weighted bound, their parameter gradients for training, and per-sample
//! score gradients of the selected encoder layers.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{
    per_sample_gradients, Activation, AutodiffError, BackwardOptions, ConvSpec, LayerCapture, LayerGradientSet,
    LayerSpec, Network, Tape,
};
use crate::data::ImageDataset;
use crate::tensor::{Rng, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("invalid architecture: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = VaeError> = std::result::Result<T, E>;

/// Shape hyper-parameters of the standard architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VaeConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channels of the first encoder convolution; doubled at each layer.
    pub channels: usize,
    pub latent_dim: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { in_channels: 1, height: 28, width: 28, channels: 16, latent_dim: 50 }
    }
}

/// Which encoder network a selected layer lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncoderPart {
    Trunk,
    Mean,
    LogVar,
}

/// A parameterized encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerRef {
    pub part: EncoderPart,
    pub index: usize,
}

/// Training hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_halving_period: usize,
    pub seed: u64,
    pub iwae_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 64, learning_rate: 1e-3, lr_halving_period: 30, seed: 0, iwae_k: 1 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr_halving_period == 0 || self.iwae_k == 0 {
            return Err(VaeError::Config("batch_size, lr_halving_period and iwae_k must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(VaeError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }

    /// Learning rate during 1-based `epoch`: halved every `lr_halving_period` epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = epoch.saturating_sub(1) / self.lr_halving_period;
        self.learning_rate * 0.5f64.powi(halvings as i32)
    }
}

/// Per-epoch mean training loss (negative bound, nats per sample).
/// Entry 0 is the loss of the initial parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    pub epochs: Vec<f64>,
}

#[derive(Debug)]
pub struct VaeModel<T: Scalar = f32> {
    config: Option<VaeConfig>,
    trunk: Network<T>,
    mean_head: Network<T>,
    logvar_head: Network<T>,
    decoder: Network<T>,
    selected: Vec<LayerRef>,
    backward_passes: AtomicUsize,
}

impl<T: Scalar> Clone for VaeModel<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            trunk: self.trunk.clone(),
            mean_head: self.mean_head.clone(),
            logvar_head: self.logvar_head.clone(),
            decoder: self.decoder.clone(),
            selected: self.selected.clone(),
            backward_passes: AtomicUsize::new(self.backward_passes.load(Ordering::Relaxed)),
        }
    }
}

/// Layer chains of the standard architecture: `(trunk, mean, logvar, decoder)`.
pub fn standard_layers(cfg: &VaeConfig) -> Result<[(Vec<usize>, Vec<LayerSpec>); 4]> {
    if cfg.channels == 0 || cfg.latent_dim == 0 || cfg.in_channels == 0 {
        return Err(VaeError::Config("channels, latent_dim and in_channels must be positive".into()));
    }
    if cfg.height % 4 != 0 || cfg.width % 4 != 0 || cfg.height < 16 || cfg.width < 16 {
        return Err(VaeError::Config(format!(
            "input {}x{} must be at least 16x16 with sides divisible by 4",
            cfg.height, cfg.width
        )));
    }
    let mut trunk = Vec::new();
    let mut hw = (cfg.height, cfg.width);
    let mut ch = cfg.in_channels;
    for i in 0..4 {
        let out = cfg.channels << i;
        let conv = ConvSpec::new(ch, out, 4, 2, 1, hw, false);
        hw = conv.out_hw;
        ch = out;
        trunk.push(LayerSpec::Conv2d(conv));
        trunk.push(LayerSpec::Activation(Activation::Relu));
    }
    let flat = ch * hw.0 * hw.1;
    trunk.push(LayerSpec::Reshape { shape: vec![flat] });
    let head = || vec![LayerSpec::Dense { inputs: flat, outputs: cfg.latent_dim, bias: false }];

    let (h4, w4) = (cfg.height / 4, cfg.width / 4);
    let wide = 2 * cfg.channels;
    let up1 = ConvSpec::new(wide, cfg.channels, 3, 1, 1, (h4 * 2, w4 * 2), true);
    let up2 = ConvSpec::new(cfg.channels, cfg.in_channels, 3, 1, 1, (cfg.height, cfg.width), true);
    let decoder = vec![
        LayerSpec::Dense { inputs: cfg.latent_dim, outputs: wide * h4 * w4, bias: true },
        LayerSpec::Activation(Activation::Relu),
        LayerSpec::Reshape { shape: vec![wide, h4, w4] },
        LayerSpec::Upsample { factor: 2 },
        LayerSpec::Conv2d(up1),
        LayerSpec::Activation(Activation::Relu),
        LayerSpec::Upsample { factor: 2 },
        LayerSpec::Conv2d(up2),
    ];
    let input = vec![cfg.in_channels, cfg.height, cfg.width];
    Ok([(input, trunk), (vec![flat], head()), (vec![flat], head()), (vec![cfg.latent_dim], decoder)])
}

impl<T: Scalar> VaeModel<T> {
    /// Standard architecture with seeded initialisation; the encoder
    /// convolutions are selected.
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        let [t, m, l, d] = standard_layers(&config)?;
        let mut model = Self::from_networks(
            Network::new(t.0, t.1)?,
            Network::new(m.0, m.1)?,
            Network::new(l.0, l.1)?,
            Network::new(d.0, d.1)?,
            None,
        )?;
        model.config = Some(config);
        let mut rng = Rng::new(seed);
        model.trunk.init(&mut rng);
        model.mean_head.init(&mut rng);
        model.logvar_head.init(&mut rng);
        model.decoder.init(&mut rng);
        Ok(model)
    }

    /// Assembles a model from arbitrary networks. `selected = None` selects
    /// the encoder convolutions, or every parameterized encoder layer when
    /// there are none.
    pub fn from_networks(
        trunk: Network<T>,
        mean_head: Network<T>,
        logvar_head: Network<T>,
        decoder: Network<T>,
        selected: Option<Vec<LayerRef>>,
    ) -> Result<Self> {
        let latent = mean_head.output_shape().to_vec();
        if latent.len() != 1 {
            return Err(VaeError::Config(format!("latent must be a vector, got {latent:?}")));
        }
        if mean_head.input_shape() != trunk.output_shape() || logvar_head.input_shape() != trunk.output_shape() {
            return Err(VaeError::Config("heads must consume the trunk output".into()));
        }
        if logvar_head.output_shape() != latent.as_slice() || decoder.input_shape() != latent.as_slice() {
            return Err(VaeError::Config("log-variance head and decoder must share the latent shape".into()));
        }
        if decoder.output_shape() != trunk.input_shape() {
            return Err(VaeError::Config(format!(
                "decoder output {:?} does not reproduce input {:?}",
                decoder.output_shape(),
                trunk.input_shape()
            )));
        }
        let mut model = Self {
            config: None,
            trunk,
            mean_head,
            logvar_head,
            decoder,
            selected: Vec::new(),
            backward_passes: AtomicUsize::new(0),
        };
        let selected = selected.unwrap_or_else(|| model.default_selection());
        model.set_selected(selected)?;
        Ok(model)
    }

    pub fn config(&self) -> Option<&VaeConfig> {
        self.config.as_ref()
    }

    pub(crate) fn set_config(&mut self, config: VaeConfig) {
        self.config = Some(config);
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.input_shape()[0]
    }

    pub fn input_shape(&self) -> &[usize] {
        self.trunk.input_shape()
    }

    pub fn networks(&self) -> [&Network<T>; 4] {
        [&self.trunk, &self.mean_head, &self.logvar_head, &self.decoder]
    }

    pub fn networks_mut(&mut self) -> [&mut Network<T>; 4] {
        [&mut self.trunk, &mut self.mean_head, &mut self.logvar_head, &mut self.decoder]
    }

    /// All parameterized encoder layers in forward order.
    pub fn encoder_layers(&self) -> Vec<LayerRef> {
        let mut out: Vec<LayerRef> = self
            .trunk
            .parameterized_layers()
            .into_iter()
            .map(|index| LayerRef { part: EncoderPart::Trunk, index })
            .collect();
        out.extend(self.mean_head.parameterized_layers().into_iter().map(|index| LayerRef { part: EncoderPart::Mean, index }));
        out.extend(
            self.logvar_head
                .parameterized_layers()
                .into_iter()
                .map(|index| LayerRef { part: EncoderPart::LogVar, index }),
        );
        out
    }

    pub fn default_selection(&self) -> Vec<LayerRef> {
        let all = self.encoder_layers();
        let convs: Vec<LayerRef> = all
            .iter()
            .copied()
            .filter(|r| matches!(self.encoder_network(r.part).layers()[r.index], LayerSpec::Conv2d(_)))
            .collect();
        if convs.is_empty() {
            all
        } else {
            convs
        }
    }

    pub fn selected_layers(&self) -> &[LayerRef] {
        &self.selected
    }

    pub fn set_selected(&mut self, selected: Vec<LayerRef>) -> Result<()> {
        if selected.is_empty() {
            return Err(VaeError::Config("at least one encoder layer must be selected".into()));
        }
        let all = self.encoder_layers();
        for (i, r) in selected.iter().enumerate() {
            if !all.contains(r) {
                return Err(VaeError::Config(format!("{r:?} is not a parameterized encoder layer")));
            }
            if selected[..i].contains(r) {
                return Err(VaeError::Config(format!("{r:?} selected twice")));
            }
        }
        self.selected = selected;
        Ok(())
    }

    pub fn encoder_network(&self, part: EncoderPart) -> &Network<T> {
        match part {
            EncoderPart::Trunk => &self.trunk,
            EncoderPart::Mean => &self.mean_head,
            EncoderPart::LogVar => &self.logvar_head,
        }
    }

    /// Human-readable layer name, e.g. `conv3` or `logvar`.
    pub fn layer_name(&self, r: LayerRef) -> String {
        match r.part {
            EncoderPart::Mean => "mean".into(),
            EncoderPart::LogVar => "logvar".into(),
            EncoderPart::Trunk => {
                let layers = self.trunk.layers();
                let kind = layers[r.index].kind();
                let ordinal = layers[..=r.index].iter().filter(|l| l.kind() == kind).count();
                match kind {
                    "conv2d" => format!("conv{ordinal}"),
                    other => format!("{other}{ordinal}"),
                }
            }
        }
    }

    /// Weight shape `[out, fan_in(+1 with bias)]` of a selected layer, as used
    /// by its per-sample gradients.
    pub fn gradient_shape(&self, r: LayerRef) -> (usize, usize) {
        let (out, fan_in, bias) = self.encoder_network(r.part).layers()[r.index].param_dims().unwrap();
        (out, fan_in + usize::from(bias))
    }

    pub fn num_params(&self) -> usize {
        self.networks().iter().map(|n| n.num_params()).sum()
    }

    /// Number of per-sample backward passes run so far.
    pub fn backward_passes(&self) -> usize {
        self.backward_passes.load(Ordering::Relaxed)
    }

    pub fn reset_backward_passes(&self) {
        self.backward_passes.store(0, Ordering::Relaxed);
    }

    pub fn cast<U: Scalar>(&self) -> VaeModel<U> {
        let conv = |n: &Network<T>| -> Network<U> {
            let mut out = Network::new(n.input_shape().to_vec(), n.layers().to_vec()).expect("validated");
            for (dst, src) in out.param_slices_mut().into_iter().zip(n.param_slices()) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = U::of(s.as_f64());
                }
            }
            out
        };
        VaeModel {
            config: self.config,
            trunk: conv(&self.trunk),
            mean_head: conv(&self.mean_head),
            logvar_head: conv(&self.logvar_head),
            decoder: conv(&self.decoder),
            selected: self.selected.clone(),
            backward_passes: AtomicUsize::new(0),
        }
    }

    /// Standard-normal reparameterisation noise `[N, k, D]`, one independent
    /// stream per sample id so results do not depend on batching.
    pub fn draw_noise(&self, seed: u64, ids: &[u64], k: usize) -> Tensor<T> {
        let d = self.latent_dim();
        let mut data = Vec::with_capacity(ids.len() * k * d);
        for &id in ids {
            let mut rng = Rng::with_stream(seed, id);
            data.extend((0..k * d).map(|_| T::of(rng.gaussian())));
        }
        Tensor::new(vec![ids.len(), k, d], data).expect("gaussian draws are finite")
    }

    fn noise_from(&self, rng: &mut Rng, n: usize, k: usize) -> Tensor<T> {
        Tensor::gaussian(&[n, k, self.latent_dim()], rng)
    }

    /// Per-sample ELBO `E_q[log p(x|z)] − KL(q(z|x) ‖ N(0, I))` with one
    /// reconstruction sample and the analytic KL.
    pub fn elbo(&self, x: &Tensor<T>, rng: &mut Rng) -> Result<Vec<f64>> {
        let eps = self.noise_from(rng, batch_len(x), 1);
        self.elbo_with_noise(x, &eps)
    }

    pub fn elbo_with_noise(&self, x: &Tensor<T>, eps: &Tensor<T>) -> Result<Vec<f64>> {
        Ok(Evaluation::run(self, x, eps, Bound::Elbo)?.bound)
    }

    /// Negative importance-weighted bound with `k` samples (nats). For `k = 1`
    /// this is `−elbo` on the same latent draw.
    pub fn iwae_nll(&self, x: &Tensor<T>, k: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        if k == 0 {
            return Err(VaeError::Input("k must be at least 1".into()));
        }
        let eps = self.noise_from(rng, batch_len(x), k);
        self.iwae_nll_with_noise(x, &eps)
    }

    pub fn iwae_nll_with_noise(&self, x: &Tensor<T>, eps: &Tensor<T>) -> Result<Vec<f64>> {
        let k = eps.shape().get(1).copied().unwrap_or(0);
        let ev = Evaluation::run(self, x, eps, Bound::for_k(k))?;
        Ok(ev.bound.iter().map(|b| -b).collect())
    }

    /// Per-sample KL term of the encoder distribution.
    pub fn kl(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        let eps = Tensor::zeros(&[batch_len(x), 1, self.latent_dim()]);
        Ok(Evaluation::run(self, x, &eps, Bound::Elbo)?.kl)
    }

    /// Encoder mean and log-variance, each `[N, D]`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        check_pixels(x)?;
        let f = self.trunk.predict(x)?;
        Ok((self.mean_head.predict(&f)?, self.logvar_head.predict(&f)?))
    }

    /// Score gradients of the bound w.r.t. the selected encoder layers for
    /// every sample of `x`, with `h`/`δ` captured. One backward pass per
    /// sample. Also returns each sample's negative bound.
    pub fn score_gradients_with_noise(
        &self,
        x: &Tensor<T>,
        eps: &Tensor<T>,
    ) -> Result<(Vec<LayerGradientSet<T>>, Vec<f64>)> {
        let k = eps.shape().get(1).copied().unwrap_or(0);
        let ev = Evaluation::run(self, x, eps, Bound::for_k(k))?;
        let scale = vec![1.0; ev.n];
        let back = ev.backward(&scale, false, true)?;
        let nll = ev.bound.iter().map(|b| -b).collect();
        Ok((per_sample_gradients(&back.captures), nll))
    }

    /// Score gradient of one sample `[C, H, W]` (or `[1, C, H, W]`) with `k`
    /// latent draws from `rng`.
    pub fn score_gradient(&self, sample: &Tensor<T>, k: usize, rng: &mut Rng) -> Result<LayerGradientSet<T>> {
        if k == 0 {
            return Err(VaeError::Input("k must be at least 1".into()));
        }
        let x = if sample.rank() == self.input_shape().len() {
            let mut shape = vec![1];
            shape.extend_from_slice(sample.shape());
            sample.clone().reshape(&shape)?
        } else {
            sample.clone()
        };
        if batch_len(&x) != 1 {
            return Err(VaeError::Input("score_gradient takes a single sample".into()));
        }
        let eps = self.noise_from(rng, 1, k);
        let (mut sets, _) = self.score_gradients_with_noise(&x, &eps)?;
        Ok(sets.remove(0))
    }

    /// Mean negative bound over the batch and its gradient for every
    /// parameter, flattened per network in [`VaeModel::networks`] order.
    pub fn loss_and_gradients(&self, x: &Tensor<T>, eps: &Tensor<T>) -> Result<(f64, Vec<Vec<T>>)> {
        let k = eps.shape().get(1).copied().unwrap_or(0);
        let ev = Evaluation::run(self, x, eps, Bound::for_k(k))?;
        let scale = vec![1.0 / ev.n as f64; ev.n];
        let back = ev.backward(&scale, true, false)?;
        let loss = -ev.bound.iter().sum::<f64>() / ev.n as f64;
        Ok((loss, back.grads))
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for net in self.networks_mut() {
            out.extend(net.param_slices_mut());
        }
        out
    }
}

fn batch_len<T: Scalar>(x: &Tensor<T>) -> usize {
    x.shape().first().copied().unwrap_or(0)
}

fn check_pixels<T: Scalar>(x: &Tensor<T>) -> Result<()> {
    if let Some(i) = x.data().iter().position(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(VaeError::Input(format!("pixel {i} = {} outside [0, 1]", x.data()[i])));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bound {
    /// One draw, analytic KL.
    Elbo,
    /// `log (1/k) Σ_j w_j` with `k ≥ 2` draws.
    Iwae(usize),
}

impl Bound {
    fn for_k(k: usize) -> Self {
        if k <= 1 {
            Bound::Elbo
        } else {
            Bound::Iwae(k)
        }
    }

    fn k(self) -> usize {
        match self {
            Bound::Elbo => 1,
            Bound::Iwae(k) => k,
        }
    }
}

/// One forward evaluation of the bound with its tapes kept for backward.
struct Evaluation<'m, T: Scalar> {
    model: &'m VaeModel<T>,
    bound_kind: Bound,
    n: usize,
    k: usize,
    d: usize,
    x: Tensor<T>,
    trunk: Tape<'m, T>,
    mean: Tape<'m, T>,
    logvar: Tape<'m, T>,
    decoder: Tape<'m, T>,
    mu: Vec<T>,
    lv: Vec<T>,
    eps: Vec<T>,
    z: Vec<T>,
    /// Normalised importance weights `[N, k]` (all ones for the ELBO).
    weights: Vec<f64>,
    kl: Vec<f64>,
    bound: Vec<f64>,
}

struct VaeBackward<T: Scalar> {
    grads: Vec<Vec<T>>,
    captures: Vec<LayerCapture<T>>,
}

fn softplus(l: f64) -> f64 {
    l.max(0.0) + (-l.abs()).exp().ln_1p()
}

fn sigmoid(l: f64) -> f64 {
    if l >= 0.0 {
        1.0 / (1.0 + (-l).exp())
    } else {
        let e = l.exp();
        e / (1.0 + e)
    }
}

impl<'m, T: Scalar> Evaluation<'m, T> {
    fn run(model: &'m VaeModel<T>, x: &Tensor<T>, eps: &Tensor<T>, bound_kind: Bound) -> Result<Self> {
        check_pixels(x)?;
        let n = batch_len(x);
        let d = model.latent_dim();
        let k = bound_kind.k();
        if eps.shape() != [n, k, d] {
            return Err(VaeError::Input(format!("noise shape {:?} but expected {:?}", eps.shape(), [n, k, d])));
        }
        let mut trunk = model.trunk.tape();
        let feats = trunk.forward(x)?.clone();
        let mut mean = model.mean_head.tape();
        let mu = mean.forward(&feats)?.data().to_vec();
        let mut logvar = model.logvar_head.tape();
        let lv = logvar.forward(&feats)?.data().to_vec();

        let mut z = Vec::with_capacity(n * k * d);
        for i in 0..n {
            for j in 0..k {
                for t in 0..d {
                    let sigma = (T::of(0.5) * lv[i * d + t]).exp();
                    z.push(mu[i * d + t] + sigma * eps.data()[(i * k + j) * d + t]);
                }
            }
        }
        let zt = Tensor::new(vec![n * k, d], z)?;
        let mut decoder = model.decoder.tape();
        let logits = decoder.forward(&zt)?;
        let pix = x.len() / n.max(1);

        let mut kl = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc = 0.0;
            for t in 0..d {
                let (m, l) = (mu[i * d + t].as_f64(), lv[i * d + t].as_f64());
                acc += 0.5 * (m * m + l.exp() - 1.0 - l);
            }
            kl.push(acc);
        }
        let mut bound = Vec::with_capacity(n);
        let mut weights = vec![1.0; n * k];
        for i in 0..n {
            let xs = &x.data()[i * pix..(i + 1) * pix];
            let recon = |j: usize| -> f64 {
                let ls = &logits.data()[(i * k + j) * pix..][..pix];
                xs.iter().zip(ls).map(|(&xv, &lv)| {
                    let l = lv.as_f64();
                    xv.as_f64() * l - softplus(l)
                }).sum()
            };
            match bound_kind {
                Bound::Elbo => bound.push(recon(0) - kl[i]),
                Bound::Iwae(_) => {
                    let logw: Vec<f64> = (0..k)
                        .map(|j| {
                            let mut prior_minus_q = 0.0;
                            for t in 0..d {
                                let zv = zt.data()[(i * k + j) * d + t].as_f64();
                                let e = eps.data()[(i * k + j) * d + t].as_f64();
                                let l = lv[i * d + t].as_f64();
                                prior_minus_q += -0.5 * zv * zv + 0.5 * l + 0.5 * e * e;
                            }
                            recon(j) + prior_minus_q
                        })
                        .collect();
                    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = logw.iter().map(|w| (w - max).exp()).sum();
                    bound.push(max + sum.ln() - (k as f64).ln());
                    for j in 0..k {
                        weights[i * k + j] = (logw[j] - max).exp() / sum;
                    }
                }
            }
        }
        if let Some(i) = bound.iter().position(|b| !b.is_finite()) {
            return Err(TensorError::NonFinite { op: "bound", index: i }.into());
        }
        Ok(Self {
            model,
            bound_kind,
            n,
            k,
            d,
            x: x.clone(),
            trunk,
            mean,
            logvar,
            decoder,
            mu,
            lv,
            eps: eps.data().to_vec(),
            z: zt.into_data(),
            weights,
            kl,
            bound,
        })
    }

    /// Backpropagates `Σ_n scale_n · (−bound_n)`.
    fn backward(&self, scale: &[f64], param_grads: bool, capture: bool) -> Result<VaeBackward<T>> {
        let (n, k, d) = (self.n, self.k, self.d);
        let model = self.model;
        let logits = self.decoder.output().expect("forward ran");
        let pix = logits.len() / (n * k);
        let coef: Vec<f64> = (0..n * k).map(|r| scale[r / k] * self.weights[r]).collect();

        let mut dlogits = Vec::with_capacity(logits.len());
        for r in 0..n * k {
            let i = r / k;
            let xs = &self.x.data()[i * pix..(i + 1) * pix];
            let ls = &logits.data()[r * pix..][..pix];
            for (&xv, &lv) in xs.iter().zip(ls) {
                dlogits.push(T::of(-coef[r] * (xv.as_f64() - sigmoid(lv.as_f64()))));
            }
        }
        let dlogits = Tensor::new(logits.shape().to_vec(), dlogits)?;
        let dec = self.decoder.backward(&dlogits, &BackwardOptions { param_grads, capture: vec![] })?;
        let dz = dec.input_grad.data();

        let mut dmu = vec![0.0f64; n * d];
        let mut dlv = vec![0.0f64; n * d];
        for i in 0..n {
            for t in 0..d {
                let l = self.lv[i * d + t].as_f64();
                let sigma = (0.5 * l).exp();
                let (mut gm, mut gl) = (0.0, 0.0);
                for j in 0..k {
                    let r = (i * k + j) * d + t;
                    let e = self.eps[r].as_f64();
                    let g = dz[r].as_f64();
                    match self.bound_kind {
                        Bound::Elbo => {
                            gm += g;
                            gl += g * 0.5 * sigma * e;
                        }
                        Bound::Iwae(_) => {
                            let c = coef[i * k + j];
                            let total = g + c * self.z[r].as_f64();
                            gm += total;
                            gl += total * 0.5 * sigma * e - 0.5 * c;
                        }
                    }
                }
                if self.bound_kind == Bound::Elbo {
                    let m = self.mu[i * d + t].as_f64();
                    gm += scale[i] * m;
                    gl += scale[i] * 0.5 * (l.exp() - 1.0);
                }
                dmu[i * d + t] = gm;
                dlv[i * d + t] = gl;
            }
        }
        let to_t = |v: Vec<f64>| Tensor::new(vec![n, d], v.into_iter().map(T::of).collect());
        let head_capture = |part: EncoderPart| -> Vec<usize> {
            if !capture {
                return vec![];
            }
            model.selected.iter().filter(|r| r.part == part).map(|r| r.index).collect()
        };
        let mb = self.mean.backward(
            &to_t(dmu)?,
            &BackwardOptions { param_grads, capture: head_capture(EncoderPart::Mean) },
        )?;
        let lb = self.logvar.backward(
            &to_t(dlv)?,
            &BackwardOptions { param_grads, capture: head_capture(EncoderPart::LogVar) },
        )?;
        let dfeat = mb.input_grad.add(&lb.input_grad)?;
        let tb = self.trunk.backward(
            &dfeat,
            &BackwardOptions { param_grads, capture: head_capture(EncoderPart::Trunk) },
        )?;
        model.backward_passes.fetch_add(n, Ordering::Relaxed);

        let mut captures = Vec::new();
        if capture {
            for r in &model.selected {
                let pool = match r.part {
                    EncoderPart::Trunk => &tb.captures,
                    EncoderPart::Mean => &mb.captures,
                    EncoderPart::LogVar => &lb.captures,
                };
                let c = pool.iter().find(|c| c.layer == r.index).expect("captured");
                captures.push(c.clone());
            }
        }
        let mut grads = Vec::new();
        if param_grads {
            for back in [&tb, &mb, &lb, &dec] {
                for g in back.param_grads.iter().flatten() {
                    grads.push(g.weight.data().to_vec());
                    if let Some(b) = &g.bias {
                        grads.push(b.data().to_vec());
                    }
                }
            }
        }
        Ok(VaeBackward { grads, captures })
    }
}

/// Adam state over a flat list of parameter slices.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            step: 0,
        }
    }

    fn update<T: Scalar>(&mut self, params: Vec<&mut [T]>, grads: &[Vec<T>], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                *p = T::of(p.as_f64() - update);
            }
        }
    }
}

/// Samples per parallel work unit during training. Gradients are summed in
/// chunk order, so results do not depend on the thread count.
const TRAIN_CHUNK: usize = 16;

impl<T: Scalar> VaeModel<T> {
    /// Mean negative bound over a whole dataset (evaluation only).
    pub fn mean_loss(&self, data: &ImageDataset, k: usize, seed: u64) -> Result<f64> {
        let n = data.len();
        let ids: Vec<usize> = (0..n).collect();
        let chunks: Vec<&[usize]> = ids.chunks(256).collect();
        let sums = chunks
            .par_iter()
            .map(|chunk| -> Result<f64> {
                let x: Tensor<T> = data.batch(chunk).cast();
                let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
                let eps = self.draw_noise(seed, &ids, k);
                Ok(self.iwae_nll_with_noise(&x, &eps)?.iter().sum())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(sums.iter().sum::<f64>() / n as f64)
    }

    /// Adam on the mean negative bound. Entry 0 of the returned curve is the
    /// loss of the parameters before training.
    pub fn train(&mut self, data: &ImageDataset, cfg: &TrainConfig) -> Result<LossCurve> {
        self.train_with(data, cfg, |_, _| {})
    }

    /// [`VaeModel::train`] with a per-epoch callback `(epoch, mean_loss)`.
    pub fn train_with(
        &mut self,
        data: &ImageDataset,
        cfg: &TrainConfig,
        mut on_epoch: impl FnMut(usize, f64),
    ) -> Result<LossCurve> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(VaeError::Input("training set is empty".into()));
        }
        if data.sample_shape() != self.input_shape() {
            return Err(VaeError::Input(format!(
                "dataset samples {:?} do not match model input {:?}",
                data.sample_shape(),
                self.input_shape()
            )));
        }
        let mut rng = Rng::new(cfg.seed);
        let initial = self.mean_loss(data, cfg.iwae_k, rng.next_u64())?;
        on_epoch(0, initial);
        let mut curve = vec![initial];
        let sizes: Vec<usize> = self.param_slices_mut().iter().map(|s| s.len()).collect();
        let mut adam = Adam::new(&sizes);
        let mut order: Vec<usize> = (0..data.len()).collect();

        for epoch in 1..=cfg.epochs {
            let lr = cfg.lr_at(epoch);
            rng.shuffle(&mut order);
            let mut epoch_loss = 0.0;
            for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
                let eps = self.noise_from(&mut rng, batch.len(), cfg.iwae_k);
                let per = self.latent_dim() * cfg.iwae_k;
                let chunk_results = batch
                    .chunks(TRAIN_CHUNK)
                    .enumerate()
                    .collect::<Vec<_>>()
                    .into_par_iter()
                    .map(|(c, idx)| -> Result<(f64, Vec<Vec<T>>)> {
                        let x: Tensor<T> = data.batch(idx).cast();
                        let start = c * TRAIN_CHUNK * per;
                        let e = Tensor::new(
                            vec![idx.len(), cfg.iwae_k, self.latent_dim()],
                            eps.data()[start..start + idx.len() * per].to_vec(),
                        )?;
                        self.loss_and_gradients(&x, &e)
                    })
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| diverged_or(e, epoch, b))?;
                let total = batch.len() as f64;
                let mut loss = 0.0;
                let mut grads: Vec<Vec<T>> = sizes.iter().map(|&s| vec![T::zero(); s]).collect();
                for ((chunk_loss, chunk_grads), idx) in chunk_results.into_iter().zip(batch.chunks(TRAIN_CHUNK)) {
                    let w = idx.len() as f64 / total;
                    loss += chunk_loss * w;
                    let wt = T::of(w);
                    for (acc, g) in grads.iter_mut().zip(chunk_grads) {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a = *a + wt * v;
                        }
                    }
                }
                if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                    return Err(VaeError::Diverged { epoch, batch: b, loss });
                }
                adam.update(self.param_slices_mut(), &grads, lr);
                epoch_loss += loss * total;
            }
            let mean = epoch_loss / data.len() as f64;
            on_epoch(epoch, mean);
            curve.push(mean);
        }
        self.reset_backward_passes();
        Ok(LossCurve { epochs: curve })
    }
}

fn diverged_or(e: VaeError, epoch: usize, batch: usize) -> VaeError {
    match e {
        VaeError::Tensor(TensorError::NonFinite { .. })
        | VaeError::Autodiff(AutodiffError::Tensor(TensorError::NonFinite { .. })) => {
            VaeError::Diverged { epoch, batch, loss: f64::NAN }
        }
        other => other,
    }
}

impl fmt::Display for LayerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let part = match self.part {
            EncoderPart::Trunk => "trunk",
            EncoderPart::Mean => "mean",
            EncoderPart::LogVar => "logvar",
        };
        write!(f, "{part}[{}]", self.index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_noise;

    const LN_2PI: f64 = 1.837_877_066_409_345_5;

    fn tiny() -> VaeConfig {
        VaeConfig { in_channels: 1, height: 16, width: 16, channels: 2, latent_dim: 3 }
    }

    fn images(n: usize, seed: u64) -> Tensor<f64> {
        Tensor::uniform(&[n, 1, 16, 16], 0.0, 1.0, &mut Rng::new(seed))
    }

    /// 2-pixel model with a 1-d latent for quadrature checks.
    fn toy_model(seed: u64) -> VaeModel<f64> {
        let trunk = Network::new(
            vec![1, 1, 2],
            vec![
                LayerSpec::Reshape { shape: vec![2] },
                LayerSpec::Dense { inputs: 2, outputs: 3, bias: true },
                LayerSpec::Activation(Activation::Relu),
            ],
        )
        .unwrap();
        let head = || Network::new(vec![3], vec![LayerSpec::Dense { inputs: 3, outputs: 1, bias: true }]).unwrap();
        let decoder = Network::new(
            vec![1],
            vec![
                LayerSpec::Dense { inputs: 1, outputs: 4, bias: true },
                LayerSpec::Activation(Activation::Relu),
                LayerSpec::Dense { inputs: 4, outputs: 2, bias: true },
                LayerSpec::Reshape { shape: vec![1, 1, 2] },
            ],
        )
        .unwrap();
        let mut m = VaeModel::from_networks(trunk, head(), head(), decoder, None).unwrap();
        let mut rng = Rng::new(seed);
        for net in m.networks_mut() {
            for s in net.param_slices_mut() {
                for v in s.iter_mut() {
                    *v = 1.5 * rng.gaussian();
                }
            }
        }
        m
    }

    #[test]
    fn standard_architecture_shapes() {
        let m = VaeModel::<f32>::new(VaeConfig::default(), 0).unwrap();
        assert_eq!(m.input_shape(), &[1, 28, 28]);
        assert_eq!(m.latent_dim(), 50);
        let names: Vec<String> = m.selected_layers().iter().map(|&r| m.layer_name(r)).collect();
        assert_eq!(names, ["conv1", "conv2", "conv3", "conv4"]);
        let all: Vec<String> = m.encoder_layers().iter().map(|&r| m.layer_name(r)).collect();
        assert_eq!(all, ["conv1", "conv2", "conv3", "conv4", "mean", "logvar"]);
        assert_eq!(m.gradient_shape(m.selected_layers()[3]), (128, 64 * 16));
        assert!(VaeModel::<f32>::new(VaeConfig { height: 30, ..VaeConfig::default() }, 0).is_err());
    }

    #[test]
    fn selection_must_be_encoder_layers() {
        let mut m = VaeModel::<f32>::new(tiny(), 0).unwrap();
        assert!(m.set_selected(vec![]).is_err());
        assert!(m.set_selected(vec![LayerRef { part: EncoderPart::Trunk, index: 1 }]).is_err());
        let r = LayerRef { part: EncoderPart::Trunk, index: 2 };
        assert!(m.set_selected(vec![r, r]).is_err());
        m.set_selected(vec![r]).unwrap();
        assert_eq!(m.selected_layers(), &[r]);
    }

    #[test]
    fn kl_is_zero_for_standard_normal_posterior() {
        let mut m = VaeModel::<f64>::new(tiny(), 1).unwrap();
        for head in [&mut m.mean_head, &mut m.logvar_head] {
            for s in head.param_slices_mut() {
                s.fill(0.0);
            }
        }
        let kl = m.kl(&images(3, 2)).unwrap();
        assert!(kl.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kl_for_unit_mean_is_half() {
        // One latent dimension, μ = 1, log σ² = 0.
        let mut m = toy_model(3);
        for s in m.mean_head.param_slices_mut() {
            s.fill(0.0);
        }
        m.mean_head.param_mut(0).unwrap().bias.as_mut().unwrap().data_mut()[0] = 1.0;
        for s in m.logvar_head.param_slices_mut() {
            s.fill(0.0);
        }
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.3, 0.9]).unwrap();
        assert!((m.kl(&x).unwrap()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_is_nonnegative() {
        let m = VaeModel::<f64>::new(tiny(), 4).unwrap();
        assert!(m.kl(&images(8, 5)).unwrap().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        let m = VaeModel::<f32>::new(tiny(), 0).unwrap();
        let mut x = Tensor::<f32>::zeros(&[1, 1, 16, 16]);
        x.data_mut()[5] = 1.5;
        assert!(matches!(m.elbo(&x, &mut Rng::new(0)), Err(VaeError::Input(_))));
    }

    #[test]
    fn iwae_with_one_sample_is_negative_elbo() {
        let m = VaeModel::<f64>::new(tiny(), 5).unwrap();
        let x = images(4, 6);
        let eps = m.draw_noise(9, &[0, 1, 2, 3], 1);
        let elbo = m.elbo_with_noise(&x, &eps).unwrap();
        let nll = m.iwae_nll_with_noise(&x, &eps).unwrap();
        for (e, n) in elbo.iter().zip(&nll) {
            assert_eq!(-e, *n);
        }
    }

    #[test]
    fn iwae_invariant_to_sample_order() {
        let m = VaeModel::<f64>::new(tiny(), 6).unwrap();
        let x = images(1, 7);
        let eps = m.draw_noise(3, &[0], 5);
        let d = m.latent_dim();
        let mut rev = Vec::new();
        for j in (0..5).rev() {
            rev.extend_from_slice(&eps.data()[j * d..(j + 1) * d]);
        }
        let rev = Tensor::new(vec![1, 5, d], rev).unwrap();
        let a = m.iwae_nll_with_noise(&x, &eps).unwrap()[0];
        let b = m.iwae_nll_with_noise(&x, &rev).unwrap()[0];
        assert!((a - b).abs() < 1e-12 * a.abs());
    }

    #[test]
    fn batch_equals_single_evaluation() {
        let m = VaeModel::<f64>::new(tiny(), 7).unwrap();
        let x = images(3, 8);
        let eps = m.draw_noise(1, &[10, 11, 12], 4);
        let batch = m.iwae_nll_with_noise(&x, &eps).unwrap();
        for i in 0..3 {
            let xi = Tensor::new(vec![1, 1, 16, 16], x.data()[i * 256..(i + 1) * 256].to_vec()).unwrap();
            let ei = m.draw_noise(1, &[10 + i as u64], 4);
            let single = m.iwae_nll_with_noise(&xi, &ei).unwrap()[0];
            assert!((single - batch[i]).abs() < 1e-10 * single.abs());
        }
    }

    #[test]
    fn bounds_are_ordered_against_quadrature() {
        let m = toy_model(11);
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.8, 0.1]).unwrap();
        // log p(x) = log ∫ p(x|z) N(z; 0, 1) dz on a fine grid.
        let (lo, hi, steps) = (-12.0, 12.0, 24_000);
        let dz = (hi - lo) / steps as f64;
        let zs: Vec<f64> = (0..=steps).map(|i| lo + i as f64 * dz).collect();
        let logits = m.decoder.predict(&Tensor::new(vec![zs.len(), 1], zs.clone()).unwrap()).unwrap();
        let mut terms = Vec::with_capacity(zs.len());
        for (i, &z) in zs.iter().enumerate() {
            let l = &logits.data()[2 * i..2 * i + 2];
            let loglik: f64 = x.data().iter().zip(l).map(|(&xv, &lv)| xv * lv - softplus(lv)).sum();
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            terms.push(loglik - 0.5 * z * z - 0.5 * LN_2PI + (w * dz).ln());
        }
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_p = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();

        let runs = 4000;
        let ids: Vec<u64> = (0..runs).collect();
        let xs = Tensor::new(vec![runs as usize, 1, 1, 2], x.data().repeat(runs as usize)).unwrap();
        let elbo: f64 =
            m.elbo_with_noise(&xs, &m.draw_noise(1, &ids, 1)).unwrap().iter().sum::<f64>() / runs as f64;
        let iwae: f64 =
            -m.iwae_nll_with_noise(&xs, &m.draw_noise(2, &ids, 16)).unwrap().iter().sum::<f64>() / runs as f64;
        assert!(elbo < iwae, "elbo {elbo} iwae {iwae}");
        assert!(iwae <= log_p + 1e-3, "iwae {iwae} log p {log_p}");
        assert!(log_p - iwae < log_p - elbo);
    }

    #[test]
    fn nll_decreases_with_k_on_average() {
        let m = VaeModel::<f64>::new(tiny(), 12).unwrap();
        let x = images(100, 13);
        let ids: Vec<u64> = (0..100).collect();
        let mean = |k: usize| -> f64 {
            m.iwae_nll_with_noise(&x, &m.draw_noise(k as u64, &ids, k)).unwrap().iter().sum::<f64>() / 100.0
        };
        let (n1, n5, n20) = (mean(1), mean(5), mean(20));
        assert!(n5 <= n1 && n20 <= n5, "{n1} {n5} {n20}");
    }

    /// Relative-error floor: the loss is O(100) nats, so central differences
    /// carry absolute noise near 1e-8.
    const FD_FLOOR: f64 = 1e-3;

    /// Central differences of the per-sample negative bound, latents frozen.
    fn check_score_gradient(k: usize) {
        let mut m = VaeModel::<f64>::new(tiny(), 21).unwrap();
        m.set_selected(m.encoder_layers()).unwrap();
        let x = images(1, 22);
        let eps = m.draw_noise(5, &[0], k);
        let (sets, _) = m.score_gradients_with_noise(&x, &eps).unwrap();
        let set = &sets[0];
        assert_eq!(set.len(), m.selected_layers().len());
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (li, r) in m.selected_layers().iter().enumerate() {
            let grad = &set.layers[li].grad;
            let wlen = m.encoder_network(r.part).param(r.index).unwrap().weight.len();
            // Every third entry keeps the test fast while covering all layers.
            for idx in (0..wlen).step_by(3) {
                let eval = |delta: f64| {
                    let mut p = m.clone();
                    let net = match r.part {
                        EncoderPart::Trunk => &mut p.trunk,
                        EncoderPart::Mean => &mut p.mean_head,
                        EncoderPart::LogVar => &mut p.logvar_head,
                    };
                    net.param_mut(r.index).unwrap().weight.data_mut()[idx] += delta;
                    p.iwae_nll_with_noise(&x, &eps).unwrap()[0]
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = grad.data()[idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "k={k}: worst relative error {worst}");
    }

    #[test]
    fn score_gradient_matches_finite_differences_elbo() {
        check_score_gradient(1);
    }

    #[test]
    fn score_gradient_matches_finite_differences_iwae() {
        check_score_gradient(4);
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let m = VaeModel::<f64>::new(tiny(), 31).unwrap();
        let x = images(2, 32);
        let eps = m.draw_noise(2, &[0, 1], 3);
        let (_, grads) = m.loss_and_gradients(&x, &eps).unwrap();
        let h = 1e-5;
        let mut slot = 0;
        let mut worst: f64 = 0.0;
        for net_i in 0..4 {
            let count = m.networks()[net_i].param_slices().len();
            for s in 0..count {
                let g = &grads[slot + s];
                for idx in (0..g.len()).step_by(7) {
                    let eval = |delta: f64| {
                        let mut p = m.clone();
                        p.networks_mut()[net_i].param_slices_mut()[s][idx] += delta;
                        let nll = p.iwae_nll_with_noise(&x, &eps).unwrap();
                        nll.iter().sum::<f64>() / 2.0
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    let rel = (g[idx] - numeric).abs() / g[idx].abs().max(numeric.abs()).max(FD_FLOOR);
                    worst = worst.max(rel);
                }
            }
            slot += count;
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn duplicate_sample_same_seed_same_gradient() {
        let m = VaeModel::<f32>::new(tiny(), 8).unwrap();
        let x: Tensor<f32> = images(1, 9).cast();
        let a = m.score_gradient(&x, 1, &mut Rng::new(4)).unwrap();
        let b = m.score_gradient(&x, 1, &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backward_counter_counts_samples() {
        let m = VaeModel::<f32>::new(tiny(), 8).unwrap();
        let x: Tensor<f32> = images(5, 9).cast();
        let eps = m.draw_noise(0, &[0, 1, 2, 3, 4], 2);
        m.score_gradients_with_noise(&x, &eps).unwrap();
        assert_eq!(m.backward_passes(), 5);
    }

    #[test]
    fn lr_schedule_halves_after_period() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(1), 1e-3);
        assert_eq!(cfg.lr_at(30), 1e-3);
        assert_eq!(cfg.lr_at(31), 5e-4);
        assert_eq!(cfg.lr_at(61), 2.5e-4);
    }

    #[test]
    fn one_epoch_reduces_loss_on_average() {
        let data = gen_noise(64, (16, 16), 3).unwrap();
        let data = crate::data::brightness(&data, 0.3).unwrap();
        let mut improved = 0.0;
        for seed in 0..5 {
            let mut m = VaeModel::<f32>::new(tiny(), seed).unwrap();
            let cfg = TrainConfig { epochs: 1, batch_size: 8, seed, ..TrainConfig::default() };
            let curve = m.train(&data, &cfg).unwrap();
            assert_eq!(curve.epochs.len(), 2);
            improved += curve.epochs[0] - m.mean_loss(&data, 1, 99).unwrap();
        }
        assert!(improved > 0.0, "{improved}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = gen_noise(20, (16, 16), 3).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 8, seed: 5, ..TrainConfig::default() };
        let mut a = VaeModel::<f32>::new(tiny(), 1).unwrap();
        let mut b = VaeModel::<f32>::new(tiny(), 1).unwrap();
        let ca = a.train(&data, &cfg).unwrap();
        let cb = b.train(&data, &cfg).unwrap();
        assert_eq!(ca, cb);
        for (x, y) in a.networks().iter().zip(b.networks()) {
            assert_eq!(x.param_slices(), y.param_slices());
        }
    }

    #[test]
    fn divergence_is_reported() {
        let data = gen_noise(16, (16, 16), 3).unwrap();
        let mut m = VaeModel::<f32>::new(tiny(), 1).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_size: 8, learning_rate: 1e30, ..TrainConfig::default() };
        let err = m.train(&data, &cfg).unwrap_err();
        assert!(matches!(err, VaeError::Diverged { .. }), "{err}");
    }
}
