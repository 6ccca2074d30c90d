//! The adversary side: a toy voice-conversion synthesizer that clones a
//! speaker from a stolen embedding, and classical speech-enhancement filters
//! used as perturbation-removal attacks.

use std::path::Path;

use crate::codec;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::signal::{self, FrameSpec, MelConfig, Waveform};
use crate::speaker::{SpeakerEmbedding, SpeakerEncoderModel};

const STD_FLOOR: f64 = 1e-6;
const RIDGE: f64 = 1e-8;

/// Voice-conversion surrogate: an affine map from a speaker embedding to a
/// per-mel-band `[gain; offset]` pair that renormalizes a neutral reference
/// profile to that speaker's statistics.
#[derive(Debug, Clone)]
pub struct ToySynthModel {
    pub encoder_id: String,
    /// embed_dim x 2*n_mels.
    pub weights: Mat,
    /// 2*n_mels.
    pub bias: Vec<f64>,
    /// Per-band mean / std of the neutral (speaker-averaged) profile.
    pub neutral_mean: Vec<f64>,
    pub neutral_std: Vec<f64>,
    pub mel: MelConfig,
    pub frame_spec: FrameSpec,
    pub sample_rate: u32,
    pub griffin_lim_iters: usize,
}

impl ToySynthModel {
    pub fn n_mels(&self) -> usize {
        self.mel.n_mels
    }

    /// Per-band (gains, offsets) predicted from a speaker embedding.
    pub fn predict_profile(&self, embedding: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if embedding.len() != self.weights.rows {
            return Err(Error::ShapeMismatch(format!(
                "embedding dim {} vs synth input {}",
                embedding.len(),
                self.weights.rows
            )));
        }
        let n = self.n_mels();
        let mut out = self.bias.clone();
        for (i, &e) in embedding.iter().enumerate() {
            if e == 0.0 {
                continue;
            }
            let row = self.weights.row(i);
            for (o, w) in out.iter_mut().zip(row) {
                *o += e * w;
            }
        }
        Ok((out[..n].to_vec(), out[n..].to_vec()))
    }
}

fn band_stats(frames: &[&Mat], n_mels: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; n_mels];
    let mut count = 0usize;
    for m in frames {
        for r in 0..m.rows {
            for (acc, v) in mean.iter_mut().zip(m.row(r)) {
                *acc += v;
            }
        }
        count += m.rows;
    }
    for v in mean.iter_mut() {
        *v /= count as f64;
    }
    let mut var = vec![0.0; n_mels];
    for m in frames {
        for r in 0..m.rows {
            for ((acc, mu), v) in var.iter_mut().zip(&mean).zip(m.row(r)) {
                let d = v - mu;
                *acc += d * d;
            }
        }
    }
    let std = var
        .iter()
        .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    (mean, std)
}

/// Least-squares fit from each training speaker's enrolled embedding to the
/// per-band affine transform mapping the neutral profile to that speaker's
/// mean/variance profile. The fit is closed-form; the seed is accepted for
/// interface uniformity and does not affect the result.
pub fn train_toy_synth(
    utterances: &[(usize, signal::MelFrames)],
    n_speakers: usize,
    encoder: &SpeakerEncoderModel,
    frame_spec: FrameSpec,
    sample_rate: u32,
    griffin_lim_iters: usize,
    _seed: u64,
) -> Result<ToySynthModel> {
    if n_speakers < 2 {
        return Err(Error::Precondition(
            "toy synth needs at least 2 speakers".into(),
        ));
    }
    let first = utterances
        .first()
        .ok_or_else(|| Error::Precondition("empty corpus".into()))?;
    let mel_cfg = first.1.config;
    let n_mels = mel_cfg.n_mels;

    // Per-speaker band statistics and enrolled embeddings.
    let mut speaker_mean = Vec::with_capacity(n_speakers);
    let mut speaker_std = Vec::with_capacity(n_speakers);
    let mut speaker_emb = Vec::with_capacity(n_speakers);
    for s in 0..n_speakers {
        let mels: Vec<&Mat> = utterances
            .iter()
            .filter(|(sp, _)| *sp == s)
            .map(|(_, m)| &m.mat)
            .collect();
        if mels.is_empty() {
            return Err(Error::Precondition(format!(
                "speaker index {s} has no utterances"
            )));
        }
        let (mean, std) = band_stats(&mels, n_mels);
        speaker_mean.push(mean);
        speaker_std.push(std);
        let mut emb = vec![0.0; encoder.embed_dim];
        let mut n = 0usize;
        for (sp, mel) in utterances {
            if *sp != s {
                continue;
            }
            for (a, b) in emb.iter_mut().zip(&encoder.embed_mel(mel)?.values) {
                *a += b;
            }
            n += 1;
        }
        let norm: f64 = emb.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Numeric(format!("zero mean embedding, speaker {s}")));
        }
        for v in emb.iter_mut() {
            *v /= norm;
        }
        let _ = n;
        speaker_emb.push(emb);
    }

    // Neutral profile: speaker-averaged band statistics.
    let mut neutral_mean = vec![0.0; n_mels];
    let mut neutral_std = vec![0.0; n_mels];
    for s in 0..n_speakers {
        for b in 0..n_mels {
            neutral_mean[b] += speaker_mean[s][b] / n_speakers as f64;
            neutral_std[b] += speaker_std[s][b] / n_speakers as f64;
        }
    }
    for v in neutral_std.iter_mut() {
        *v = v.max(STD_FLOOR);
    }

    // Targets: gain_b = std_s / neutral_std, offset_b = mean_s - gain_b *
    // neutral_mean, so gain * neutral + offset reproduces the speaker.
    let in_dim = encoder.embed_dim + 1; // embedding plus intercept column
    let out_dim = 2 * n_mels;
    let mut x = nalgebra::DMatrix::<f64>::zeros(n_speakers, in_dim);
    let mut y = nalgebra::DMatrix::<f64>::zeros(n_speakers, out_dim);
    for s in 0..n_speakers {
        for (j, v) in speaker_emb[s].iter().enumerate() {
            x[(s, j)] = *v;
        }
        x[(s, in_dim - 1)] = 1.0;
        for b in 0..n_mels {
            let gain = speaker_std[s][b] / neutral_std[b];
            y[(s, b)] = gain;
            y[(s, n_mels + b)] = speaker_mean[s][b] - gain * neutral_mean[b];
        }
    }
    let gram = x.transpose() * &x + nalgebra::DMatrix::identity(in_dim, in_dim) * RIDGE;
    let rhs = x.transpose() * &y;
    let solution = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            let pinv = gram
                .svd(true, true)
                .pseudo_inverse(1e-10)
                .map_err(|e| Error::Numeric(format!("toy synth pseudo-inverse: {e}")))?;
            pinv * &rhs
        }
    };
    let mut weights = Mat::zeros(encoder.embed_dim, out_dim);
    for i in 0..encoder.embed_dim {
        for j in 0..out_dim {
            weights.set(i, j, solution[(i, j)]);
        }
    }
    let bias: Vec<f64> = (0..out_dim).map(|j| solution[(in_dim - 1, j)]).collect();
    if !weights.is_finite() || bias.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite toy synth parameters".into()));
    }
    Ok(ToySynthModel {
        encoder_id: encoder.id.clone(),
        weights,
        bias,
        neutral_mean,
        neutral_std,
        mel: mel_cfg,
        frame_spec,
        sample_rate,
        griffin_lim_iters,
    })
}

/// Clone the stolen speaker's voice onto the content utterance: z-score the
/// content's log-mel bands, renormalize to the neutral profile, then apply
/// the per-band transform predicted from the stolen embedding, and invert
/// via the mel pseudo-inverse and Griffin-Lim.
pub fn synthesize_vc(
    model: &ToySynthModel,
    content: &Waveform,
    stolen: &SpeakerEmbedding,
) -> Result<Waveform> {
    if stolen.encoder_id != model.encoder_id {
        return Err(Error::Precondition(format!(
            "stolen embedding from encoder {} but synth was trained on {}",
            stolen.encoder_id, model.encoder_id
        )));
    }
    let (gains, offsets) = model.predict_profile(&stolen.values)?;
    let spec = signal::stft(content, &model.frame_spec)?;
    let mel = signal::log_mel(&spec, &model.mel)?;
    let mels: [&Mat; 1] = [&mel.mat];
    let (c_mean, c_std) = band_stats(&mels, model.n_mels());
    let mut out = Mat::zeros(mel.mat.rows, mel.mat.cols);
    for r in 0..mel.mat.rows {
        let src = mel.mat.row(r);
        let dst = out.row_mut(r);
        for b in 0..src.len() {
            let neutral =
                (src[b] - c_mean[b]) / c_std[b] * model.neutral_std[b] + model.neutral_mean[b];
            dst[b] = gains[b] * neutral + offsets[b];
        }
    }
    codec::mel_to_waveform(
        &signal::MelFrames {
            mat: out,
            config: model.mel,
        },
        &model.frame_spec,
        model.sample_rate,
        model.griffin_lim_iters,
    )
}

// ---------------------------------------------------------------------------
// Speech-enhancement removal attacks.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnhanceMethod {
    SpectralMasking,
    Wiener,
    Smoothing,
}

impl EnhanceMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnhanceMethod::SpectralMasking => "spectral-masking",
            EnhanceMethod::Wiener => "wiener",
            EnhanceMethod::Smoothing => "smoothing",
        }
    }

    pub fn parse(s: &str) -> Result<EnhanceMethod> {
        match s {
            "spectral-masking" => Ok(EnhanceMethod::SpectralMasking),
            "wiener" => Ok(EnhanceMethod::Wiener),
            "smoothing" => Ok(EnhanceMethod::Smoothing),
            other => Err(Error::Config(format!("unknown enhancement method {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnhanceConfig {
    pub method: EnhanceMethod,
    /// Fraction of lowest-energy frames used for the noise estimate.
    pub noise_fraction: f64,
    pub over_subtraction: f64,
    pub spectral_floor: f64,
    /// Temporal median-filter width (odd, >= 1).
    pub kernel_width: usize,
    pub frame_spec: FrameSpec,
}

impl EnhanceConfig {
    pub fn new(method: EnhanceMethod) -> Self {
        EnhanceConfig {
            method,
            noise_fraction: 0.10,
            over_subtraction: 2.0,
            spectral_floor: 0.05,
            kernel_width: 5,
            frame_spec: FrameSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_fraction <= 0.0
            || self.noise_fraction > 1.0
            || self.over_subtraction <= 0.0
            || self.spectral_floor <= 0.0
            || self.spectral_floor >= 1.0
            || self.kernel_width == 0
            || self.kernel_width.is_multiple_of(2)
        {
            return Err(Error::Config(
                "enhance config requires noise_fraction in (0,1], over_subtraction > 0, \
                 spectral_floor in (0,1), odd kernel_width >= 1"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Mean magnitude per bin over the lowest-energy fraction of frames.
fn noise_estimate(mag: &Mat, fraction: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..mag.rows).collect();
    let energy: Vec<f64> = (0..mag.rows)
        .map(|r| mag.row(r).iter().map(|v| v * v).sum())
        .collect();
    order.sort_by(|&a, &b| energy[a].total_cmp(&energy[b]).then(a.cmp(&b)));
    let take = ((mag.rows as f64 * fraction).ceil() as usize).clamp(1, mag.rows);
    let mut noise = vec![0.0; mag.cols];
    for &r in &order[..take] {
        for (n, v) in noise.iter_mut().zip(mag.row(r)) {
            *n += v / take as f64;
        }
    }
    noise
}

/// Magnitude-domain core of `enhance`; exposed so the per-bin floor
/// invariant is directly assertable.
pub fn enhanced_magnitude(mag: &Mat, config: &EnhanceConfig) -> Result<Mat> {
    config.validate()?;
    match config.method {
        EnhanceMethod::SpectralMasking => {
            let noise = noise_estimate(mag, config.noise_fraction);
            let mut out = Mat::zeros(mag.rows, mag.cols);
            for r in 0..mag.rows {
                let src = mag.row(r);
                let dst = out.row_mut(r);
                for b in 0..src.len() {
                    let sub = src[b] - config.over_subtraction * noise[b];
                    dst[b] = sub.max(config.spectral_floor * src[b]);
                }
            }
            Ok(out)
        }
        EnhanceMethod::Wiener => {
            let noise = noise_estimate(mag, config.noise_fraction);
            let mut out = Mat::zeros(mag.rows, mag.cols);
            for r in 0..mag.rows {
                let src = mag.row(r);
                let dst = out.row_mut(r);
                for b in 0..src.len() {
                    let p = src[b] * src[b];
                    let n = noise[b] * noise[b];
                    let gain = if p > 0.0 { ((p - n) / p).max(0.0) } else { 0.0 };
                    dst[b] = (gain * src[b]).max(config.spectral_floor * src[b]);
                }
            }
            Ok(out)
        }
        EnhanceMethod::Smoothing => {
            // Temporal median per bin with edge replication, so width 1 is
            // the identity.
            let half = config.kernel_width / 2;
            let mut out = Mat::zeros(mag.rows, mag.cols);
            let mut window = Vec::with_capacity(config.kernel_width);
            for r in 0..mag.rows {
                for b in 0..mag.cols {
                    window.clear();
                    for k in 0..config.kernel_width {
                        let idx = (r + k)
                            .saturating_sub(half)
                            .min(mag.rows - 1);
                        window.push(mag.get(idx, b));
                    }
                    window.sort_by(f64::total_cmp);
                    out.set(r, b, window[half]);
                }
            }
            Ok(out)
        }
    }
}

/// Apply a speech-enhancement filter: modify the STFT magnitude, keep the
/// original phase, resynthesize at the input length.
pub fn enhance(wav: &Waveform, config: &EnhanceConfig) -> Result<Waveform> {
    config.validate()?;
    let spec = signal::stft(wav, &config.frame_spec)?;
    let mag = spec.magnitude();
    let phase = spec.phase();
    let out = enhanced_magnitude(&mag, config)?;
    let data: Vec<rustfft::num_complex::Complex<f64>> = out
        .data
        .iter()
        .zip(&phase.data)
        .map(|(&m, &p)| rustfft::num_complex::Complex::from_polar(m, p))
        .collect();
    let rebuilt = signal::istft(
        &signal::ComplexSpectrogram {
            frames: out.rows,
            bins: out.cols,
            data,
            frame_spec: config.frame_spec,
            sample_rate: wav.sample_rate,
        },
        &config.frame_spec,
    )?;
    let mut samples = rebuilt.samples;
    samples.resize(wav.samples.len(), 0.0);
    Waveform::new(samples, wav.sample_rate)
}

/// ||enhanced - original|| / ||protected - original|| over magnitude
/// spectrograms (frames trimmed to the shortest); 0 = perfect removal,
/// >= 1 = no removal or added distortion.
pub fn removal_efficacy(
    original: &Waveform,
    protected: &Waveform,
    enhanced: &Waveform,
    frame_spec: &FrameSpec,
) -> Result<f64> {
    let mo = signal::stft(original, frame_spec)?.magnitude();
    let mp = signal::stft(protected, frame_spec)?.magnitude();
    let me = signal::stft(enhanced, frame_spec)?.magnitude();
    let frames = mo.rows.min(mp.rows).min(me.rows);
    let mut num = 0.0;
    let mut den = 0.0;
    for r in 0..frames {
        let o = mo.row(r);
        let p = mp.row(r);
        let e = me.row(r);
        for b in 0..o.len() {
            num += (e[b] - o[b]).powi(2);
            den += (p[b] - o[b]).powi(2);
        }
    }
    if den == 0.0 {
        return Err(Error::Precondition(
            "removal_efficacy: protected equals original".into(),
        ));
    }
    Ok((num / den).sqrt())
}

// ---------------------------------------------------------------------------
// Persistence: diffnet affine file plus a text manifest with the neutral
// profile and geometry.
// ---------------------------------------------------------------------------

pub fn save_toy_synth(model: &ToySynthModel, path: &Path) -> Result<()> {
    let net = crate::diffnet::Network::new(vec![crate::diffnet::Layer::Affine {
        weights: model.weights.clone(),
        bias: model.bias.clone(),
    }]);
    crate::diffnet::save_network(&net, path)?;
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:e}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    let meta = format!(
        "encoder_id={}\nn_mels={}\nfmin={}\nfmax={}\nlog_floor={}\nn_fft={}\nhop={}\nsample_rate={}\ngriffin_lim_iters={}\nneutral_mean={}\nneutral_std={}\n",
        model.encoder_id,
        model.mel.n_mels,
        model.mel.fmin,
        model.mel.fmax,
        model.mel.log_floor,
        model.frame_spec.n_fft,
        model.frame_spec.hop,
        model.sample_rate,
        model.griffin_lim_iters,
        fmt(&model.neutral_mean),
        fmt(&model.neutral_std)
    );
    let meta_path = path.with_extension("meta");
    std::fs::write(&meta_path, meta).map_err(|source| Error::Io {
        path: meta_path,
        source,
    })
}

pub fn load_toy_synth(path: &Path) -> Result<ToySynthModel> {
    let net = crate::diffnet::load_network(path)?;
    let (weights, bias) = match net.layers.as_slice() {
        [crate::diffnet::Layer::Affine { weights, bias }] => (weights.clone(), bias.clone()),
        _ => {
            return Err(Error::Config(format!(
                "{}: not a toy synth parameter file",
                path.display()
            )))
        }
    };
    let meta_path = path.with_extension("meta");
    let meta = std::fs::read_to_string(&meta_path)
        .map_err(|_| Error::MissingArtifact(meta_path.display().to_string()))?;
    let mut kv = std::collections::HashMap::new();
    for line in meta.lines() {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| -> Result<f64> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Config(format!("toy synth meta missing key {k}")))
    };
    let get_vec = |k: &str| -> Result<Vec<f64>> {
        kv.get(k)
            .ok_or_else(|| Error::Config(format!("toy synth meta missing key {k}")))?
            .split(',')
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("toy synth meta bad value in {k}")))
            })
            .collect()
    };
    Ok(ToySynthModel {
        encoder_id: kv
            .get("encoder_id")
            .cloned()
            .ok_or_else(|| Error::Config("toy synth meta missing encoder_id".into()))?,
        weights,
        bias,
        neutral_mean: get_vec("neutral_mean")?,
        neutral_std: get_vec("neutral_std")?,
        mel: MelConfig {
            n_mels: get("n_mels")? as usize,
            fmin: get("fmin")?,
            fmax: get("fmax")?,
            log_floor: get("log_floor")?,
        },
        frame_spec: FrameSpec::new(
            get("n_fft")? as usize,
            get("hop")? as usize,
            signal::Window::HannPeriodic,
        )?,
        sample_rate: get("sample_rate")? as u32,
        griffin_lim_iters: get("griffin_lim_iters")? as usize,
    })
}
