//! Duration-driven acoustic model with a variational reference encoder.
//!
//! Phonemes are embedded and encoded by a biLSTM into `Y`, replicated per
//! frame by their durations into `Y↑`, and decoded one frame per step by an
//! LSTM conditioned on `[Y↑_t ‖ z ‖ prenet(x_{t-1})]`. The output layer
//! reads `[h_t ‖ Y↑_t ‖ z]`. There is no post-net.
//!
//! The reference encoder runs three stride-2 convolutions over time, an
//! LSTM over the result, and projects its final state to `(μ, log σ²)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::latent::{kl_to_standard_normal, LatentVar};
use crate::nn::{lstm_step, BiLstm, Embedding, Linear, Lstm};
use crate::params::{Namespace, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticConfig {
    pub phonemes: usize,
    pub mel_bins: usize,
    pub latent_dim: usize,
    pub phoneme_embed: usize,
    /// Per direction; encodings are twice this wide.
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub prenet_dim: usize,
    pub prenet_dropout: f64,
    pub reference_channels: usize,
    pub reference_hidden: usize,
}

impl AcousticConfig {
    pub fn new(phonemes: usize, mel_bins: usize, latent_dim: usize) -> Self {
        AcousticConfig {
            phonemes,
            mel_bins,
            latent_dim,
            phoneme_embed: 16,
            encoder_hidden: 24,
            decoder_hidden: 48,
            prenet_dim: 16,
            prenet_dropout: 0.5,
            reference_channels: 24,
            reference_hidden: 32,
        }
    }

    pub fn encoding_dim(&self) -> usize {
        2 * self.encoder_hidden
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.phonemes,
            self.mel_bins,
            self.latent_dim,
            self.phoneme_embed,
            self.encoder_hidden,
            self.decoder_hidden,
            self.prenet_dim,
            self.reference_channels,
            self.reference_hidden,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config("acoustic sizes must all be positive".into()));
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err(Error::Config(format!(
                "prenet dropout {} outside [0, 1)",
                self.prenet_dropout
            )));
        }
        Ok(())
    }
}

/// Linear ramp of the KL weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub alpha_max: f64,
    pub ramp_start: u64,
    pub ramp_end: u64,
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.ramp_start > self.ramp_end || !(self.alpha_max > 0.0) {
            return Err(Error::Config(format!(
                "anneal schedule needs 0 <= ramp_start <= ramp_end and alpha_max > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn anneal_alpha(step: u64, schedule: &AnnealSchedule) -> f64 {
    if step < schedule.ramp_start {
        0.0
    } else if step >= schedule.ramp_end {
        schedule.alpha_max
    } else {
        let span = (schedule.ramp_end - schedule.ramp_start) as f64;
        schedule.alpha_max * (step - schedule.ramp_start) as f64 / span
    }
}

/// Replicate row `i` of `y` `durations[i]` times.
pub fn upsample<'t>(y: Var<'t>, durations: &[u32]) -> Result<Var<'t>> {
    if durations.len() != y.rows() {
        return Err(Error::Shape(format!(
            "{} durations for {} encodings",
            durations.len(),
            y.rows()
        )));
    }
    let index: Vec<usize> = durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i, d as usize))
        .collect();
    if index.is_empty() {
        return Err(Error::EmptySequence("upsampled frames (all durations zero)"));
    }
    y.gather_rows(&index)
}

/// Reconstruction, KL-to-prior and their weighted sum.
#[derive(Clone, Copy)]
pub struct ElboTerms<'t> {
    pub loss: Var<'t>,
    pub recon: Var<'t>,
    pub kl: Var<'t>,
}

/// `MSE(X̂, X) + α · KL(N(μ, σ²) ‖ N(0, I))`.
pub fn elbo_loss<'t>(
    predicted: Var<'t>,
    target: Var<'t>,
    latent: LatentVar<'t>,
    alpha: f64,
) -> Result<ElboTerms<'t>> {
    if predicted.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            predicted.dims(),
            target.dims()
        )));
    }
    let recon = predicted.sub(target)?.square().mean();
    let kl = kl_to_standard_normal(latent)?;
    let loss = recon.add(kl.scale(alpha))?;
    Ok(ElboTerms { loss, recon, kl })
}

#[derive(Debug, Clone)]
pub struct AcousticModel {
    pub config: AcousticConfig,
    phoneme_table: Embedding,
    encoder: BiLstm,
    prenet: Linear,
    decoder: Lstm,
    output: Linear,
    convs: [Linear; 3],
    summary: Lstm,
    posterior: Linear,
}

impl AcousticModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: AcousticConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let a = |local: &str| Namespace::Acoustic.name(local);
        let r = |local: &str| Namespace::Reference.name(local);
        let c = &config;
        let enc = c.encoding_dim();
        let dec_in = enc + c.latent_dim + c.prenet_dim;
        let phoneme_table = Embedding::new(store, &a("phoneme"), c.phonemes, c.phoneme_embed, rng)?;
        let encoder = BiLstm::new(store, &a("encoder"), c.phoneme_embed, c.encoder_hidden, rng)?;
        let prenet = Linear::new(store, &a("prenet"), c.mel_bins, c.prenet_dim, true, rng)?;
        let decoder = Lstm::new(store, &a("decoder"), dec_in, c.decoder_hidden, rng)?;
        let output = Linear::new(
            store,
            &a("output"),
            c.decoder_hidden + enc + c.latent_dim,
            c.mel_bins,
            true,
            rng,
        )?;
        let ch = c.reference_channels;
        let convs = [
            Linear::new(store, &r("conv0"), 3 * c.mel_bins, ch, true, rng)?,
            Linear::new(store, &r("conv1"), 3 * ch, ch, true, rng)?,
            Linear::new(store, &r("conv2"), 3 * ch, ch, true, rng)?,
        ];
        let summary = Lstm::new(store, &r("summary"), ch, c.reference_hidden, rng)?;
        let posterior = Linear::new(store, &r("posterior"), c.reference_hidden, 2 * c.latent_dim, true, rng)?;
        Ok(AcousticModel {
            config,
            phoneme_table,
            encoder,
            prenet,
            decoder,
            output,
            convs,
            summary,
            posterior,
        })
    }

    /// Bind to parameters already in `store`, e.g. from a checkpoint.
    pub fn existing(store: &ParamStore, config: AcousticConfig) -> Result<Self> {
        config.validate()?;
        let a = |local: &str| Namespace::Acoustic.name(local);
        let r = |local: &str| Namespace::Reference.name(local);
        let model = AcousticModel {
            phoneme_table: Embedding::existing(store, &a("phoneme"))?,
            encoder: BiLstm::existing(store, &a("encoder"))?,
            prenet: Linear::existing(store, &a("prenet"))?,
            decoder: Lstm::existing(store, &a("decoder"))?,
            output: Linear::existing(store, &a("output"))?,
            convs: [
                Linear::existing(store, &r("conv0"))?,
                Linear::existing(store, &r("conv1"))?,
                Linear::existing(store, &r("conv2"))?,
            ],
            summary: Lstm::existing(store, &r("summary"))?,
            posterior: Linear::existing(store, &r("posterior"))?,
            config,
        };
        let c = &model.config;
        if model.phoneme_table.vocab != c.phonemes
            || model.output.output != c.mel_bins
            || model.posterior.output != 2 * c.latent_dim
            || model.decoder.hidden != c.decoder_hidden
        {
            return Err(Error::Checkpoint(
                "acoustic parameters do not match the configured sizes".into(),
            ));
        }
        Ok(model)
    }

    /// `Y: [P, 2·encoder_hidden]`.
    pub fn encode_phonemes<'t>(&self, tape: &'t Tape, store: &ParamStore, ids: &[usize]) -> Result<Var<'t>> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.phonemes) {
            return Err(Error::Index {
                index: bad,
                len: self.config.phonemes,
            });
        }
        if ids.is_empty() {
            return Err(Error::EmptySequence("phoneme sequence"));
        }
        let emb = self.phoneme_table.forward(tape, store, ids)?;
        self.encoder.encode(tape, store, emb)
    }

    /// `[T, B]` mel to `(μ_o, log σ²_o)`, each `[1, D]`.
    pub fn reference_encode<'t>(&self, tape: &'t Tape, store: &ParamStore, mel: Var<'t>) -> Result<LatentVar<'t>> {
        if mel.rows() == 0 {
            return Err(Error::EmptySequence("reference mel"));
        }
        if mel.cols() != self.config.mel_bins {
            return Err(Error::Shape(format!(
                "reference encoder expects {} bins, got {:?}",
                self.config.mel_bins,
                mel.dims()
            )));
        }
        let mut x = mel;
        for conv in &self.convs {
            x = conv_stride2(tape, store, conv, x)?.relu();
        }
        let states = self.summary.run(tape, store, x, false)?;
        let last = *states.last().expect("non-empty");
        let out = self.posterior.forward(tape, store, last)?;
        let d = self.config.latent_dim;
        Ok(LatentVar {
            mean: out.slice_cols(0, d)?,
            log_var: out.slice_cols(d, d)?,
        })
    }

    /// Decode `[T, B]` frames from `Y↑` and `z: [1, D]`. With a teacher mel
    /// each step sees the true previous frame; otherwise its own output.
    /// `prenet_mask`, when given, multiplies the prenet activations.
    pub fn decode<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        upsampled: Var<'t>,
        z: Var<'t>,
        teacher: Option<&Tensor>,
        prenet_mask: Option<&Tensor>,
    ) -> Result<Var<'t>> {
        let c = &self.config;
        let frames = upsampled.rows();
        if frames == 0 {
            return Err(Error::EmptySequence("decoder input"));
        }
        if upsampled.cols() != c.encoding_dim() || z.dims() != [1, c.latent_dim] {
            return Err(Error::Shape(format!(
                "decoder got Y↑ {:?} and z {:?}",
                upsampled.dims(),
                z.dims()
            )));
        }
        if let Some(m) = prenet_mask {
            if m.dims() != [frames, c.prenet_dim] {
                return Err(Error::Shape(format!(
                    "prenet mask {:?}, expected [{frames}, {}]",
                    m.dims(),
                    c.prenet_dim
                )));
            }
        }
        let z_rows = z.gather_rows(&vec![0; frames])?;
        let w = self.decoder.bind(tape, store);
        let (mut h, mut cell) = self.decoder.zero_state(tape);

        match teacher {
            Some(mel) => {
                if mel.dims() != [frames, c.mel_bins] {
                    return Err(Error::Shape(format!(
                        "teacher mel {:?} for {frames} frames of {} bins",
                        mel.dims(),
                        c.mel_bins
                    )));
                }
                let mut shifted = vec![0.0; c.mel_bins];
                shifted.extend_from_slice(&mel.data()[..(frames - 1) * c.mel_bins]);
                let prev = tape.constant(Tensor::matrix(frames, c.mel_bins, shifted)?);
                let mut pre = self.prenet.forward(tape, store, prev)?.relu();
                if let Some(m) = prenet_mask {
                    pre = pre.mul(tape.constant(m.clone()))?;
                }
                let inputs = tape.concat_cols(&[upsampled, z_rows, pre])?;
                let proj = inputs.matmul(w.wx)?.add_row(w.b)?;
                let mut hs = Vec::with_capacity(frames);
                for t in 0..frames {
                    let (h2, c2) = lstm_step(proj.row(t)?, h, cell, w.wh)?;
                    h = h2;
                    cell = c2;
                    hs.push(h);
                }
                let hs = tape.concat_rows(&hs)?;
                let features = tape.concat_cols(&[hs, upsampled, z_rows])?;
                self.output.forward(tape, store, features)
            }
            None => {
                let static_in = tape.concat_cols(&[upsampled, z_rows])?;
                let static_width = static_in.cols();
                let wx_static = w.wx.gather_rows(&(0..static_width).collect::<Vec<_>>())?;
                let wx_pre = w.wx.gather_rows(&(static_width..w.wx.rows()).collect::<Vec<_>>())?;
                let static_proj = static_in.matmul(wx_static)?.add_row(w.b)?;
                let mut prev = tape.constant(Tensor::zeros(&[1, c.mel_bins]));
                let mut outs = Vec::with_capacity(frames);
                for t in 0..frames {
                    let mut pre = self.prenet.forward(tape, store, prev)?.relu();
                    if let Some(m) = prenet_mask {
                        pre = pre.mul(tape.constant(Tensor::row(m.row_slice(t))))?;
                    }
                    let x_proj = static_proj.row(t)?.add(pre.matmul(wx_pre)?)?;
                    let (h2, c2) = lstm_step(x_proj, h, cell, w.wh)?;
                    h = h2;
                    cell = c2;
                    let feat = tape.concat_cols(&[h, upsampled.row(t)?, z])?;
                    let frame = self.output.forward(tape, store, feat)?;
                    outs.push(frame);
                    prev = frame;
                }
                tape.concat_rows(&outs)
            }
        }
    }

    /// Inverted-dropout mask for the prenet, `[frames, prenet_dim]`.
    pub fn prenet_mask<R: Rng + ?Sized>(&self, frames: usize, rng: &mut R) -> Tensor {
        let p = self.config.prenet_dropout;
        let keep = 1.0 / (1.0 - p);
        let data = (0..frames * self.config.prenet_dim)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        Tensor::matrix(frames, self.config.prenet_dim, data).expect("mask shape")
    }

    /// Free-running synthesis with no gradient bookkeeping kept.
    pub fn synthesize(&self, store: &ParamStore, ids: &[usize], durations: &[u32], z: &[f64]) -> Result<Tensor> {
        if z.len() != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "z has {} dims, model expects {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        let tape = Tape::new();
        let y = self.encode_phonemes(&tape, store, ids)?;
        let up = upsample(y, durations)?;
        let zv = tape.constant(Tensor::row(z));
        Ok(self.decode(&tape, store, up, zv, None, None)?.value())
    }

    /// Posterior of a mel, evaluated outside any training graph.
    pub fn posterior(&self, store: &ParamStore, mel: &Tensor) -> Result<crate::latent::GaussianLatent> {
        let tape = Tape::new();
        let x = tape.constant(mel.clone());
        Ok(self.reference_encode(&tape, store, x)?.value())
    }
}

/// Kernel-3, stride-2, pad-1 convolution over rows of `x: [T, C]`,
/// giving `[⌊(T−1)/2⌋ + 1, C_out]`.
fn conv_stride2<'t>(tape: &'t Tape, store: &ParamStore, layer: &Linear, x: Var<'t>) -> Result<Var<'t>> {
    let (len, width) = (x.rows(), x.cols());
    let zero = tape.constant(Tensor::zeros(&[1, width]));
    let padded = tape.concat_rows(&[zero, x, zero])?;
    let out_len = (len - 1) / 2 + 1;
    let taps = (0..3)
        .map(|k| padded.gather_rows(&(0..out_len).map(|o| 2 * o + k).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let windows = tape.concat_cols(&taps)?;
    layer.forward(tape, store, windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::latent::{kl_divergence, GaussianLatent};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (ParamStore, AcousticModel) {
        let mut cfg = AcousticConfig::new(4, 4, 2);
        cfg.phoneme_embed = 3;
        cfg.encoder_hidden = 2;
        cfg.decoder_hidden = 3;
        cfg.prenet_dim = 2;
        cfg.reference_channels = 3;
        cfg.reference_hidden = 2;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = AcousticModel::new(&mut store, cfg, &mut rng).unwrap();
        (store, model)
    }

    fn mel(frames: usize, bins: usize) -> Tensor {
        let data = (0..frames * bins).map(|i| ((i as f64) * 0.37).sin() - 0.2).collect();
        Tensor::matrix(frames, bins, data).unwrap()
    }

    #[test]
    fn anneal_ramp() {
        let s = AnnealSchedule {
            alpha_max: 0.5,
            ramp_start: 100,
            ramp_end: 300,
        };
        assert_eq!(anneal_alpha(0, &s), 0.0);
        assert_eq!(anneal_alpha(99, &s), 0.0);
        assert_eq!(anneal_alpha(200, &s), 0.25);
        assert_eq!(anneal_alpha(300, &s), 0.5);
        assert_eq!(anneal_alpha(10_000, &s), 0.5);
        assert!(AnnealSchedule { ramp_start: 5, ramp_end: 4, ..s }.validate().is_err());
    }

    #[test]
    fn upsample_examples() {
        let tape = Tape::new();
        let y = tape.constant(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]], 1).unwrap());
        assert_eq!(upsample(y, &[2, 1, 3]).unwrap().value().data(), &[1.0, 1.0, 2.0, 3.0, 3.0, 3.0]);
        assert_eq!(upsample(y, &[1, 1, 1]).unwrap().value(), y.value());
        let y2 = tape.constant(Tensor::from_rows(&[vec![1.0], vec![2.0]], 1).unwrap());
        assert_eq!(upsample(y2, &[0, 2]).unwrap().value().data(), &[2.0, 2.0]);
        assert!(upsample(y2, &[0, 0]).is_err());
        assert!(upsample(y2, &[1]).is_err());
    }

    #[test]
    fn elbo_examples() {
        let tape = Tape::new();
        let x = tape.constant(mel(3, 2));
        let prior = GaussianLatent::standard(8);
        let terms = elbo_loss(x, x, prior.on(&tape), 1.0).unwrap();
        assert_eq!(terms.loss.item(), 0.0);
        let shifted = GaussianLatent::new(vec![1.0; 8], vec![0.0; 8]).unwrap();
        assert!((elbo_loss(x, x, shifted.on(&tape), 1.0).unwrap().loss.item() - 4.0).abs() < 1e-12);
        let y = tape.constant(mel(3, 2).scale_data(0.5));
        let t = elbo_loss(y, x, shifted.on(&tape), 0.0).unwrap();
        assert_eq!(t.loss.item(), t.recon.item());
        let kl = kl_divergence(&shifted, &GaussianLatent::standard(8)).unwrap();
        assert!((t.kl.item() - kl).abs() < 1e-6);
    }

    #[test]
    fn shapes_and_determinism() {
        let (store, model) = tiny();
        let tape = Tape::new();
        let y = model.encode_phonemes(&tape, &store, &[2]).unwrap();
        assert_eq!(y.dims(), vec![1, 4]);
        for frames in [1usize, 2, 5, 9] {
            let lat = model.reference_encode(&tape, &store, tape.constant(mel(frames, 4))).unwrap();
            assert_eq!(lat.mean.dims(), vec![1, 2]);
            assert_eq!(lat.log_var.dims(), vec![1, 2]);
        }
        let a = model.synthesize(&store, &[0, 1, 3], &[2, 1, 2], &[0.1, -0.2]).unwrap();
        let b = model.synthesize(&store, &[0, 1, 3], &[2, 1, 2], &[0.1, -0.2]).unwrap();
        assert_eq!(a.dims(), &[5, 4]);
        assert_eq!(a, b);
        assert!(model.encode_phonemes(&tape, &store, &[4]).is_err());
    }

    #[test]
    fn free_running_matches_teacher_fed_own_output() {
        let (store, model) = tiny();
        let tape = Tape::new();
        let y = model.encode_phonemes(&tape, &store, &[1, 2]).unwrap();
        let up = upsample(y, &[2, 2]).unwrap();
        let z = tape.constant(Tensor::row(&[0.3, -0.1]));
        let free = model.decode(&tape, &store, up, z, None, None).unwrap().value();
        let forced = model.decode(&tape, &store, up, z, Some(&free), None).unwrap().value();
        for (a, b) in free.data().iter().zip(forced.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn elbo_gradients() {
        let (mut store, model) = tiny();
        let target = mel(8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mask = model.prenet_mask(8, &mut rng);
        let err = grad_check(&mut store, 1e-5, |tape, s| {
            let y = model.encode_phonemes(tape, s, &[0, 3])?;
            let up = upsample(y, &[3, 5])?;
            let x = tape.constant(target.clone());
            let lat = model.reference_encode(tape, s, x)?;
            let z = crate::latent::reparameterize(lat, &Tensor::row(&[0.4, -1.3]))?;
            let out = model.decode(tape, s, up, z, Some(&target), Some(&mask))?;
            Ok(elbo_loss(out, x, lat, 0.7)?.loss)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
