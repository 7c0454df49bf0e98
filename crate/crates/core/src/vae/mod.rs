//! β-VAE with an MLP encoder and a dense-then-upsampling decoder, trained
//! by backpropagation through the reparameterized sample.
//!
//! Loss per image is the L1 reconstruction error summed over pixels plus β
//! times the Gaussian KL term; a batch loss is the mean over its images.

mod checkpoint;
pub mod net;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use net::Activation;
use net::{Layer, Network};

use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamConfig, AdamState, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeArchitecture {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Hidden widths of the encoder; the last one is the feature width
    /// feeding the mean and log-variance heads.
    pub encoder_widths: Vec<usize>,
    pub latent_dim: usize,
    /// Dense widths of the decoder, starting with the projection of `z`. The
    /// last one is reshaped onto the grid the upsampling blocks start from.
    pub decoder_widths: Vec<usize>,
    /// Number of (upsample, conv) blocks after the dense stack; 0 means a
    /// dense output layer.
    pub upsample_blocks: usize,
    pub activation: Activation,
    /// Encoder hidden layers whose weights stay at their initial values.
    #[serde(default)]
    pub frozen_encoder_layers: Vec<bool>,
}

impl VaeArchitecture {
    pub fn input_len(&self) -> usize {
        self.input_channels * self.input_height * self.input_width
    }

    /// Latent dimension `latent_dim` over `channels x size x size` inputs with
    /// the default 512-wide decoder projection.
    pub fn desk(channels: usize, size: usize, latent_dim: usize, upsample_blocks: usize) -> Self {
        Self {
            input_channels: channels,
            input_height: size,
            input_width: size,
            encoder_widths: vec![128],
            latent_dim,
            decoder_widths: vec![512],
            upsample_blocks,
            activation: Activation::LeakyRelu,
            frozen_encoder_layers: Vec::new(),
        }
    }

    fn build(&self) -> Result<(Network, Network)> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent dimension must be at least 1".into()));
        }
        if self.input_len() == 0 {
            return Err(Error::Config("empty input shape".into()));
        }
        if self.decoder_widths.is_empty() {
            return Err(Error::Config("decoder needs at least one dense width".into()));
        }
        if self.frozen_encoder_layers.len() > self.encoder_widths.len() {
            return Err(Error::Config("freeze mask longer than encoder".into()));
        }
        let act = self.activation;

        let mut enc = Vec::new();
        let mut width = self.input_len();
        for &w in &self.encoder_widths {
            enc.push(Layer::Dense { inputs: width, outputs: w });
            enc.push(Layer::Act { kind: act, len: w });
            width = w;
        }
        enc.push(Layer::Dense {
            inputs: width,
            outputs: 2 * self.latent_dim,
        });

        let mut dec = Vec::new();
        let mut width = self.latent_dim;
        for &w in &self.decoder_widths {
            dec.push(Layer::Dense { inputs: width, outputs: w });
            dec.push(Layer::Act { kind: act, len: w });
            width = w;
        }
        let (h, w, c_out) = (self.input_height, self.input_width, self.input_channels);
        if self.upsample_blocks == 0 {
            dec.push(Layer::Dense {
                inputs: width,
                outputs: self.input_len(),
            });
        } else {
            let scale = 1usize
                .checked_shl(self.upsample_blocks as u32)
                .filter(|s| h % s == 0 && w % s == 0)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "{h}x{w} output is not divisible by 2^{}",
                        self.upsample_blocks
                    ))
                })?;
            let (mut ch, mut cw) = (h / scale, w / scale);
            // widths that do not tile the base grid get a projection that does
            if width % (ch * cw) != 0 {
                let tiled = width.div_ceil(ch * cw) * ch * cw;
                dec.push(Layer::Dense { inputs: width, outputs: tiled });
                dec.push(Layer::Act { kind: act, len: tiled });
                width = tiled;
            }
            let mut channels = width / (ch * cw);
            for _ in 0..self.upsample_blocks {
                dec.push(Layer::Upsample2x {
                    channels,
                    height: ch,
                    width: cw,
                });
                ch *= 2;
                cw *= 2;
                let next = (channels / 2).max(1);
                dec.push(Layer::Conv3x3 {
                    in_channels: channels,
                    out_channels: next,
                    height: ch,
                    width: cw,
                });
                dec.push(Layer::Act {
                    kind: act,
                    len: next * ch * cw,
                });
                channels = next;
            }
            dec.push(Layer::Conv3x3 {
                in_channels: channels,
                out_channels: c_out,
                height: h,
                width: w,
            });
        }
        dec.push(Layer::Act {
            kind: Activation::Sigmoid,
            len: self.input_len(),
        });
        Ok((Network::new(enc)?, Network::new(dec)?))
    }
}

/// Flat parameter vector: encoder weights followed by decoder weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeParams {
    pub values: Vec<f64>,
    pub encoder_len: usize,
}

impl VaeParams {
    pub fn encoder(&self) -> &[f64] {
        &self.values[..self.encoder_len]
    }

    pub fn decoder(&self) -> &[f64] {
        &self.values[self.encoder_len..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
    pub sample: Vec<f64>,
    pub noise: Vec<f64>,
}

/// `z = mean + exp(log_var / 2) * eps` with `eps ~ N(0, I)`.
pub fn reparameterize(mean: &[f64], log_var: &[f64], rng: &mut RngStream) -> Result<LatentCode> {
    if mean.len() != log_var.len() {
        return Err(Error::Shape(format!(
            "mean has {} entries, log-variance {}",
            mean.len(),
            log_var.len()
        )));
    }
    let noise: Vec<f64> = (0..mean.len()).map(|_| rng.normal()).collect();
    Ok(LatentCode {
        sample: apply_noise(mean, log_var, &noise),
        mean: mean.to_vec(),
        log_var: log_var.to_vec(),
        noise,
    })
}

fn apply_noise(mean: &[f64], log_var: &[f64], noise: &[f64]) -> Vec<f64> {
    mean.iter()
        .zip(log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

/// Sum of absolute pixel differences.
pub fn reconstruction_loss(x: &[f64], x_rec: &[f64]) -> Result<f64> {
    if x.len() != x_rec.len() {
        return Err(Error::Shape(format!("{} vs {} pixels", x.len(), x_rec.len())));
    }
    Ok(x.iter().zip(x_rec).map(|(a, b)| (a - b).abs()).sum())
}

/// KL divergence of `N(mean, exp(log_var))` from the standard normal.
pub fn kl_loss(mean: &[f64], log_var: &[f64]) -> Result<f64> {
    if mean.len() != log_var.len() {
        return Err(Error::Shape(format!("{} vs {} latent entries", mean.len(), log_var.len())));
    }
    Ok(-0.5
        * mean
            .iter()
            .zip(log_var)
            .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
            .sum::<f64>())
}

pub fn total_loss(rec: f64, kl: f64, beta: f64) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::Domain(format!("beta {beta} must be non-negative")));
    }
    Ok(rec + beta * kl)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaExponent {
    /// Exponent is the 0-based epoch index.
    #[default]
    Absolute,
    /// Exponent restarts at 0 on the first epoch after warm-up.
    Restart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub warmup_epochs: usize,
    pub base: f64,
    pub growth: f64,
    #[serde(default)]
    pub exponent: BetaExponent,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            warmup_epochs: 3,
            base: 0.005,
            growth: 1.2,
            exponent: BetaExponent::Absolute,
        }
    }
}

impl BetaSchedule {
    /// Constant β, handy for ablations and overfit checks.
    pub fn constant(beta: f64) -> Self {
        Self {
            warmup_epochs: 0,
            base: beta,
            growth: 1.0,
            exponent: BetaExponent::Absolute,
        }
    }
}

pub fn beta_at_epoch(sched: &BetaSchedule, epoch: usize) -> f64 {
    if epoch < sched.warmup_epochs {
        return 0.0;
    }
    let exponent = match sched.exponent {
        BetaExponent::Absolute => epoch,
        BetaExponent::Restart => epoch - sched.warmup_epochs,
    };
    sched.base * sched.growth.powi(exponent as i32)
}

/// Halves `current_lr` every `patience` consecutive epochs without a strict
/// improvement of the best validation loss seen so far.
pub fn lr_on_plateau(history: &[f64], current_lr: f64, patience: usize) -> f64 {
    let patience = patience.max(1);
    let Some((&first, rest)) = history.split_first() else {
        return current_lr;
    };
    let mut best = first;
    let mut stale = 0;
    for &v in rest {
        if v < best {
            best = v;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    if stale > 0 && stale % patience == 0 {
        current_lr / 2.0
    } else {
        current_lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_patience: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 10,
            initial_lr: 7.5e-4,
            lr_patience: 1,
            batch_size: 64,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.initial_lr > 0.0) || self.batch_size == 0 || self.lr_patience == 0 {
            return Err(Error::Config(
                "epochs, batch size and patience must be positive, learning rate > 0".into(),
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.initial_lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub rec_loss: f64,
    pub kl_loss: f64,
    pub beta: f64,
    pub lr: f64,
    pub val_loss: f64,
}

/// Encoder and decoder networks for one architecture.
#[derive(Debug, Clone)]
pub struct VaeModel {
    arch: VaeArchitecture,
    encoder: Network,
    decoder: Network,
}

impl VaeModel {
    pub fn new(arch: VaeArchitecture) -> Result<Self> {
        let (encoder, decoder) = arch.build()?;
        Ok(Self {
            arch,
            encoder,
            decoder,
        })
    }

    pub fn architecture(&self) -> &VaeArchitecture {
        &self.arch
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.decoder.n_params()
    }

    pub fn init_params(&self, rng: &mut RngStream) -> VaeParams {
        let mut values = self.encoder.init_params(rng);
        let encoder_len = values.len();
        values.extend(self.decoder.init_params(rng));
        VaeParams { values, encoder_len }
    }

    pub fn zero_params(&self) -> VaeParams {
        VaeParams {
            values: vec![0.0; self.n_params()],
            encoder_len: self.encoder.n_params(),
        }
    }

    fn check_params(&self, params: &VaeParams) -> Result<()> {
        if params.values.len() != self.n_params() || params.encoder_len != self.encoder.n_params() {
            return Err(Error::Shape(format!(
                "parameter vector of {} does not fit architecture with {}",
                params.values.len(),
                self.n_params()
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_len() {
            return Err(Error::Shape(format!(
                "input has {} values, architecture expects {}",
                x.len(),
                self.arch.input_len()
            )));
        }
        Ok(())
    }

    /// Parameter mask: `true` for trainable entries.
    fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.n_params()];
        for (i, &frozen) in self.arch.frozen_encoder_layers.iter().enumerate() {
            if frozen {
                // hidden layer i is network layer 2 * i (dense, act, dense, ...)
                for m in &mut mask[self.encoder.param_range(2 * i)] {
                    *m = false;
                }
            }
        }
        mask
    }

    pub fn encode(&self, params: &VaeParams, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_params(params)?;
        self.check_input(x)?;
        let mut out = self.encoder.infer(params.encoder(), x);
        let log_var = out.split_off(self.arch.latent_dim);
        Ok((out, log_var))
    }

    pub fn decode(&self, params: &VaeParams, z: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if z.len() != self.arch.latent_dim {
            return Err(Error::Shape(format!(
                "latent vector of {} for dimension {}",
                z.len(),
                self.arch.latent_dim
            )));
        }
        Ok(self.decoder.infer(params.decoder(), z))
    }

    /// Loss of one image for a fixed noise vector.
    pub fn sample_loss(&self, params: &VaeParams, x: &[f64], noise: &[f64], beta: f64) -> Result<f64> {
        let (mean, log_var) = self.encode(params, x)?;
        let z = apply_noise(&mean, &log_var, noise);
        let x_rec = self.decode(params, &z)?;
        total_loss(reconstruction_loss(x, &x_rec)?, kl_loss(&mean, &log_var)?, beta)
    }

    /// Accumulates the gradient of one image's loss into `grad`; returns the
    /// reconstruction and KL terms.
    pub fn accumulate_gradient(
        &self,
        params: &VaeParams,
        x: &[f64],
        noise: &[f64],
        beta: f64,
        grad: &mut [f64],
    ) -> (f64, f64) {
        let d = self.arch.latent_dim;
        let enc_trace = self.encoder.forward(params.encoder(), x);
        let head = enc_trace.output();
        let (mean, log_var) = head.split_at(d);
        let std: Vec<f64> = log_var.iter().map(|lv| (0.5 * lv).exp()).collect();
        let z: Vec<f64> = (0..d).map(|i| mean[i] + std[i] * noise[i]).collect();
        let dec_trace = self.decoder.forward(params.decoder(), &z);
        let x_rec = dec_trace.output();

        let rec: f64 = x.iter().zip(x_rec).map(|(a, b)| (a - b).abs()).sum();
        let kl = -0.5
            * (0..d)
                .map(|i| 1.0 + log_var[i] - mean[i] * mean[i] - log_var[i].exp())
                .sum::<f64>();

        let grad_rec: Vec<f64> = x
            .iter()
            .zip(x_rec)
            .map(|(a, b)| {
                if b > a {
                    1.0
                } else if b < a {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        let (grad_enc, grad_dec) = grad.split_at_mut(params.encoder_len);
        let grad_z = self.decoder.backward(params.decoder(), &dec_trace, &grad_rec, grad_dec);

        let mut grad_head = vec![0.0; 2 * d];
        for i in 0..d {
            grad_head[i] = grad_z[i] + beta * mean[i];
            grad_head[d + i] = grad_z[i] * noise[i] * 0.5 * std[i] + beta * 0.5 * (log_var[i].exp() - 1.0);
        }
        self.encoder.backward(params.encoder(), &enc_trace, &grad_head, grad_enc);
        (rec, kl)
    }

    /// Mean reconstruction-plus-KL loss over `images`, decoding the latent
    /// mean (no sampling noise).
    pub fn validation_loss(&self, params: &VaeParams, images: &[Vec<f64>], beta: f64) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::Domain("validation set is empty".into()));
        }
        let losses = images
            .par_iter()
            .map(|x| {
                let (mean, log_var) = self.encode(params, x)?;
                let x_rec = self.decode(params, &mean)?;
                total_loss(reconstruction_loss(x, &x_rec)?, kl_loss(&mean, &log_var)?, beta)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(losses.iter().sum::<f64>() / images.len() as f64)
    }
}

/// Which latent vector becomes the exported embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingMode {
    #[default]
    Mean,
    /// One reparameterized draw per image, from a stream keyed by row index.
    Sample { seed: u64 },
}

/// One row per image, in input order.
pub fn extract_embeddings(
    model: &VaeModel,
    params: &VaeParams,
    images: &[Vec<f64>],
    mode: EmbeddingMode,
) -> Result<Vec<Vec<f64>>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let (mean, log_var) = model.encode(params, x)?;
            match mode {
                EmbeddingMode::Mean => Ok(mean),
                EmbeddingMode::Sample { seed } => {
                    let mut rng = RngStream::new(seed, 0).split(i as u64);
                    Ok(reparameterize(&mean, &log_var, &mut rng)?.sample)
                }
            }
        })
        .collect()
}

/// Everything needed to continue training after an epoch boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub params: VaeParams,
    pub adam: AdamState,
    pub lr: f64,
    pub val_history: Vec<f64>,
    pub log: Vec<EpochLog>,
    pub next_epoch: usize,
}

/// Samples per gradient work unit; the reduction order over units is fixed,
/// so results do not depend on the thread count.
const GRAD_CHUNK: usize = 4;

pub struct Trainer<'a> {
    model: &'a VaeModel,
    data: &'a [Vec<f64>],
    val: &'a [Vec<f64>],
    cfg: TrainConfig,
    sched: BetaSchedule,
    trainable: Vec<bool>,
    state: TrainerState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a VaeModel,
        data: &'a [Vec<f64>],
        val: &'a [Vec<f64>],
        cfg: &TrainConfig,
        sched: &BetaSchedule,
    ) -> Result<Self> {
        let mut rng = RngStream::new(cfg.seed, 0).split_named("vae-init");
        let params = model.init_params(&mut rng);
        let state = TrainerState {
            adam: AdamState::new(params.values.len(), cfg.adam()),
            params,
            lr: cfg.initial_lr,
            val_history: Vec::new(),
            log: Vec::new(),
            next_epoch: 0,
        };
        Self::resume(model, data, val, cfg, sched, state)
    }

    pub fn resume(
        model: &'a VaeModel,
        data: &'a [Vec<f64>],
        val: &'a [Vec<f64>],
        cfg: &TrainConfig,
        sched: &BetaSchedule,
        state: TrainerState,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() || val.is_empty() {
            return Err(Error::Domain("training and validation sets must be non-empty".into()));
        }
        for x in data.iter().chain(val) {
            model.check_input(x)?;
        }
        model.check_params(&state.params)?;
        Ok(Self {
            model,
            data,
            val,
            cfg: cfg.clone(),
            sched: *sched,
            trainable: model.trainable_mask(),
            state,
        })
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn into_state(self) -> TrainerState {
        self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.next_epoch >= self.cfg.epochs
    }

    /// Runs the next epoch and returns its log entry.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.state.next_epoch;
        let beta = beta_at_epoch(&self.sched, epoch);
        let lr = self.state.lr;
        self.state.adam.set_learning_rate(lr);

        let root = RngStream::new(self.cfg.seed, 0);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        root.split_named("vae-shuffle").split(epoch as u64).shuffle(&mut order);
        let mut noise_rng = root.split_named("vae-noise").split(epoch as u64);
        let d = self.model.arch.latent_dim;

        let (mut rec_total, mut kl_total) = (0.0, 0.0);
        for (batch_idx, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let noise: Vec<Vec<f64>> = batch
                .iter()
                .map(|_| (0..d).map(|_| noise_rng.normal()).collect())
                .collect();
            let (mut grad, rec, kl) = self.batch_gradient(batch, &noise, beta);
            let loss = rec + beta * kl;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: batch_idx,
                    message: format!("loss is {loss}"),
                });
            }
            let scale = 1.0 / batch.len() as f64;
            for (g, &trainable) in grad.iter_mut().zip(&self.trainable) {
                *g = if trainable { *g * scale } else { 0.0 };
            }
            adam_step(&mut self.state.params.values, &grad, &mut self.state.adam).map_err(|e| Error::Training {
                epoch,
                batch: batch_idx,
                message: e.to_string(),
            })?;
            rec_total += rec;
            kl_total += kl;
        }

        let n = self.data.len() as f64;
        let val_loss = self.model.validation_loss(&self.state.params, self.val, beta)?;
        if !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                batch: 0,
                message: format!("validation loss is {val_loss}"),
            });
        }
        self.state.val_history.push(val_loss);
        let entry = EpochLog {
            epoch,
            rec_loss: rec_total / n,
            kl_loss: kl_total / n,
            beta,
            lr,
            val_loss,
        };
        self.state.log.push(entry.clone());
        self.state.lr = lr_on_plateau(&self.state.val_history, lr, self.cfg.lr_patience);
        self.state.next_epoch += 1;
        Ok(entry)
    }

    fn batch_gradient(&self, batch: &[usize], noise: &[Vec<f64>], beta: f64) -> (Vec<f64>, f64, f64) {
        let n_params = self.model.n_params();
        let partials: Vec<(Vec<f64>, f64, f64)> = batch
            .par_chunks(GRAD_CHUNK)
            .zip(noise.par_chunks(GRAD_CHUNK))
            .map(|(idx, eps)| {
                let mut grad = vec![0.0; n_params];
                let (mut rec, mut kl) = (0.0, 0.0);
                for (&i, e) in idx.iter().zip(eps) {
                    let (r, k) = self
                        .model
                        .accumulate_gradient(&self.state.params, &self.data[i], e, beta, &mut grad);
                    rec += r;
                    kl += k;
                }
                (grad, rec, kl)
            })
            .collect();
        let mut iter = partials.into_iter();
        let (mut grad, mut rec, mut kl) = iter.next().expect("non-empty batch");
        for (g, r, k) in iter {
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
            rec += r;
            kl += k;
        }
        (grad, rec, kl)
    }
}

/// Trains a fresh model to completion.
pub fn fit(
    arch: &VaeArchitecture,
    data: &[Vec<f64>],
    val: &[Vec<f64>],
    cfg: &TrainConfig,
    sched: &BetaSchedule,
) -> Result<(VaeParams, Vec<EpochLog>)> {
    let model = VaeModel::new(arch.clone())?;
    let mut trainer = Trainer::new(&model, data, val, cfg, sched)?;
    while !trainer.is_finished() {
        trainer.run_epoch()?;
    }
    let state = trainer.into_state();
    Ok((state.params, state.log))
}
