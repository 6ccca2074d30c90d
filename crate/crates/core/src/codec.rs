//! Differentiable audio codec stand-in: a learned linear autoencoder over
//! log-mel frames. The analysis map projects log-mel onto its top principal
//! directions; the synthesis map is a ridge least-squares reconstruction
//! expressed as a diffnet network so gradients flow back to the embedding.
//! Waveform synthesis inverts the mel filterbank (pseudo-inverse, clipped
//! at zero) and reconstructs phase with Griffin-Lim.

use std::path::Path;

use nalgebra::DMatrix;

use crate::diffnet::{Activations, Layer, Network};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::signal::{
    self, FrameSpec, MelConfig, MelFrames, Waveform,
};

/// Frames x d embedding matrix, the space where perturbations live.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSeq {
    pub mat: Mat,
    pub frame_spec: FrameSpec,
    pub sample_rate: u32,
}

impl EmbeddingSeq {
    pub fn dim(&self) -> usize {
        self.mat.cols
    }

    pub fn frames(&self) -> usize {
        self.mat.rows
    }

    /// Root-mean-square over all entries.
    pub fn rms(&self) -> f64 {
        (self.mat.data.iter().map(|v| v * v).sum::<f64>() / self.mat.data.len() as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct CodecModel {
    /// Affine mel -> d projection (weights n_mels x d, bias d).
    pub analysis_w: Mat,
    pub analysis_b: Vec<f64>,
    /// Refinement stages (shape-preserving) followed by the affine d -> mel
    /// synthesis map, as a diffnet network for the gradient path.
    pub synthesis: Network,
    pub d: usize,
    pub mel: MelConfig,
    pub frame_spec: FrameSpec,
    pub sample_rate: u32,
    pub griffin_lim_iters: usize,
}

/// Fixed phase-reconstruction seed so decode is a pure function.
const DECODE_GL_SEED: u64 = 0x5eed_c0de;

fn mat_to_dmatrix(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows, m.cols, &m.data)
}

fn dmatrix_to_mat(m: &DMatrix<f64>) -> Mat {
    let mut out = Mat::zeros(m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.set(r, c, m[(r, c)]);
        }
    }
    out
}

/// Stack the log-mel frames of a corpus into one N x n_mels matrix.
fn corpus_mel_frames(
    corpus: &[Waveform],
    frame_spec: &FrameSpec,
    mel: &MelConfig,
) -> Result<Mat> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for wav in corpus {
        let frames = signal::log_mel(&signal::stft(wav, frame_spec)?, mel)?;
        for r in 0..frames.mat.rows {
            rows.push(frames.mat.row(r).to_vec());
        }
    }
    if rows.is_empty() {
        return Err(Error::Precondition("empty training corpus".into()));
    }
    Ok(Mat::from_rows(rows))
}

/// Fit the codec on a corpus. The analysis map is PCA of the pooled log-mel
/// frames; the synthesis map is the ridge least-squares reconstruction of
/// those frames from their embeddings. Deterministic: PCA signs are fixed
/// by making each component's largest-magnitude coefficient positive.
pub fn fit_codec(
    corpus: &[Waveform],
    d: usize,
    frame_spec: &FrameSpec,
    mel: &MelConfig,
    ridge: f64,
    griffin_lim_iters: usize,
) -> Result<CodecModel> {
    if corpus.is_empty() {
        return Err(Error::Precondition("empty training corpus".into()));
    }
    if d == 0 || d > mel.n_mels {
        return Err(Error::Precondition(format!(
            "embedding dim d={d} out of range 1..={}",
            mel.n_mels
        )));
    }
    let sample_rate = corpus[0].sample_rate;
    let x = corpus_mel_frames(corpus, frame_spec, mel)?;
    let n = x.rows as f64;

    // Work in log-mel shifted so that silence sits at zero; a zero embedding
    // then decodes to the log floor (near-silence) rather than the corpus mean.
    let ln_floor = mel.log_floor.ln();
    let shifted = x.map(|v| v - ln_floor);
    let xd = mat_to_dmatrix(&shifted);

    // Second-moment matrix and its top-d eigenvectors (uncentered PCA).
    let cov = xd.transpose() * &xd / n;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut analysis_w = Mat::zeros(mel.n_mels, d);
    for (j, &col) in order.iter().take(d).enumerate() {
        let v = eig.eigenvectors.column(col);
        // Deterministic sign: largest-magnitude coefficient positive.
        let pivot = (0..v.len())
            .max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap())
            .unwrap();
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..v.len() {
            analysis_w.set(i, j, sign * v[i]);
        }
    }
    // Analysis affine applied to raw log-mel: e = (mel - ln_floor) V.
    let analysis_b: Vec<f64> = (0..d)
        .map(|j| -ln_floor * (0..mel.n_mels).map(|i| analysis_w.get(i, j)).sum::<f64>())
        .collect();

    // Ridge LS for the synthesis map in shifted space, no intercept, so the
    // zero embedding maps exactly to the log floor.
    let emb_d = &xd * mat_to_dmatrix(&analysis_w);
    let gram =
        emb_d.transpose() * &emb_d + DMatrix::from_diagonal_element(d, d, ridge.max(0.0));
    let rhs = emb_d.transpose() * &xd;
    let solved = match gram.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        // Rank-deficient gram (e.g. zero ridge at full rank): pseudo-inverse.
        None => gram
            .svd(true, true)
            .pseudo_inverse(1e-10)
            .map_err(|e| Error::Numeric(format!("codec synthesis solve: {e}")))?
            * &rhs,
    };
    let syn_w = dmatrix_to_mat(&solved);
    let syn_b = vec![ln_floor; mel.n_mels];

    Ok(CodecModel {
        analysis_w,
        analysis_b,
        synthesis: Network::new(vec![Layer::Affine {
            weights: syn_w,
            bias: syn_b,
        }]),
        d,
        mel: *mel,
        frame_spec: *frame_spec,
        sample_rate,
        griffin_lim_iters,
    })
}

pub fn encode(model: &CodecModel, wav: &Waveform) -> Result<EmbeddingSeq> {
    let mel = signal::log_mel(&signal::stft(wav, &model.frame_spec)?, &model.mel)?;
    Ok(encode_mel(model, &mel))
}

/// Analysis projection of precomputed log-mel frames.
pub fn encode_mel(model: &CodecModel, mel: &MelFrames) -> EmbeddingSeq {
    let mut e = mel.mat.matmul(&model.analysis_w);
    for r in 0..e.rows {
        for c in 0..e.cols {
            e.data[r * e.cols + c] += model.analysis_b[c];
        }
    }
    EmbeddingSeq {
        mat: e,
        frame_spec: model.frame_spec,
        sample_rate: model.sample_rate,
    }
}

/// Differentiable decode to log-mel frames, retaining activations so the
/// caller can run backward.
pub fn decode_features_retained(
    model: &CodecModel,
    emb: &EmbeddingSeq,
) -> Result<(MelFrames, Activations)> {
    if emb.dim() != model.d {
        return Err(Error::ShapeMismatch(format!(
            "embedding dim {} vs codec d {}",
            emb.dim(),
            model.d
        )));
    }
    let acts = model.synthesis.forward(&emb.mat)?;
    let mel = MelFrames {
        mat: acts.output().clone(),
        config: model.mel,
    };
    Ok((mel, acts))
}

pub fn decode_features(model: &CodecModel, emb: &EmbeddingSeq) -> Result<MelFrames> {
    decode_features_retained(model, emb).map(|(mel, _)| mel)
}

/// Gradient of a scalar loss w.r.t. the embedding, given the loss gradient
/// in the decoded mel domain.
pub fn decode_features_backward(
    model: &CodecModel,
    acts: &Activations,
    mel_grad: &Mat,
) -> Result<Mat> {
    Ok(model.synthesis.backward(acts, mel_grad)?.input_grad)
}

/// Right pseudo-inverse projection mel-power -> bin-power: rows x n_mels
/// times ((M M^T)^-1 M), clipped at zero by the caller.
pub fn mel_power_to_bin_power(filterbank: &Mat, mel_power: &Mat) -> Result<Mat> {
    let m = mat_to_dmatrix(filterbank);
    let gram = &m * m.transpose();
    let inv = gram
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numeric("mel filterbank gram not invertible".into()))?;
    let proj = inv * m; // n_mels x bins
    let out = mat_to_dmatrix(mel_power) * proj;
    Ok(dmatrix_to_mat(&out))
}

/// Full decode to waveform: synthesis to log-mel, mel inversion, Griffin-Lim.
pub fn decode(model: &CodecModel, emb: &EmbeddingSeq) -> Result<Waveform> {
    let mel = decode_features(model, emb)?;
    mel_to_waveform(
        &mel,
        &model.frame_spec,
        model.sample_rate,
        model.griffin_lim_iters,
    )
}

/// Invert log-mel frames to a waveform (shared by codec decode and the toy
/// synthesizer).
pub fn mel_to_waveform(
    mel: &MelFrames,
    frame_spec: &FrameSpec,
    sample_rate: u32,
    gl_iters: usize,
) -> Result<Waveform> {
    let fb = signal::mel_filterbank(&mel.config, frame_spec, sample_rate)?;
    let mel_power = mel.mat.map(f64::exp);
    let bin_power = mel_power_to_bin_power(&fb, &mel_power)?;
    let magnitudes = bin_power.map(|p| p.max(0.0).sqrt());
    signal::griffin_lim(&magnitudes, frame_spec, sample_rate, gl_iters, DECODE_GL_SEED)
}

/// Cosine similarity of two magnitude spectrograms, frames trimmed to the
/// shorter of the two.
pub fn spectral_similarity(a: &Waveform, b: &Waveform, frame_spec: &FrameSpec) -> Result<f64> {
    let ma = signal::stft(a, frame_spec)?.magnitude();
    let mb = signal::stft(b, frame_spec)?.magnitude();
    let frames = ma.rows.min(mb.rows);
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for r in 0..frames {
        for (x, y) in ma.row(r).iter().zip(mb.row(r)) {
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Precondition("silent signal in spectral_similarity".into()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

// ---------------------------------------------------------------------------
// Persistence: one diffnet parameter file (analysis affine + synthesis
// layers) plus a text manifest of the codec configuration.
// ---------------------------------------------------------------------------

pub fn save_codec(model: &CodecModel, path: &Path) -> Result<()> {
    let mut layers = vec![Layer::Affine {
        weights: model.analysis_w.clone(),
        bias: model.analysis_b.clone(),
    }];
    layers.extend(model.synthesis.layers.iter().cloned());
    crate::diffnet::save_network(&Network::new(layers), path)?;
    let meta = format!(
        "d={}\nn_mels={}\nfmin={}\nfmax={}\nlog_floor={}\nn_fft={}\nhop={}\nsample_rate={}\ngriffin_lim_iters={}\n",
        model.d,
        model.mel.n_mels,
        model.mel.fmin,
        model.mel.fmax,
        model.mel.log_floor,
        model.frame_spec.n_fft,
        model.frame_spec.hop,
        model.sample_rate,
        model.griffin_lim_iters
    );
    let meta_path = path.with_extension("meta");
    std::fs::write(&meta_path, meta).map_err(|source| Error::Io {
        path: meta_path,
        source,
    })
}

pub fn load_codec(path: &Path) -> Result<CodecModel> {
    let net = crate::diffnet::load_network(path)?;
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
            .ok_or_else(|| Error::Config(format!("codec meta missing key {k}")))
    };
    let (analysis, synthesis_layers) = match net.layers.split_first() {
        Some((Layer::Affine { weights, bias }, rest)) if !rest.is_empty() => {
            ((weights.clone(), bias.clone()), rest.to_vec())
        }
        _ => {
            return Err(Error::Config(format!(
                "{}: not a codec parameter file",
                path.display()
            )))
        }
    };
    Ok(CodecModel {
        analysis_w: analysis.0,
        analysis_b: analysis.1,
        synthesis: Network::new(synthesis_layers),
        d: get("d")? as usize,
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
