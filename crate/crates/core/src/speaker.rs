//! Speaker-embedding extraction, enrollment, verification and threshold
//! calibration. Two architecturally distinct encoder variants (log-mel
//! statistics vs MFCC statistics) stand in for separate verifiers so
//! transferability can be measured.
//!
//! The feature stage (mean + standard deviation pooled over time, MFCC via
//! a fixed DCT) is differentiable by hand so the full decode -> encoder
//! path has exact gradients w.r.t. mel frames.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::diffnet::{self, Activations, Layer, Network};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::signal::{self, FrameSpec, MelConfig, MelFrames, Waveform};

pub const MFCC_COEFFS: usize = 20;
const VAR_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureRecipe {
    /// Per-band mean + std of log-mel frames (2 * n_mels features).
    MelStats,
    /// Mean + std of MFCC coefficients 1..=20 (40 features).
    MfccStats,
}

impl FeatureRecipe {
    pub fn feature_dim(&self, n_mels: usize) -> usize {
        match self {
            FeatureRecipe::MelStats => 2 * n_mels,
            FeatureRecipe::MfccStats => 2 * MFCC_COEFFS,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            FeatureRecipe::MelStats => 32,
            FeatureRecipe::MfccStats => 24,
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            FeatureRecipe::MelStats => "mel",
            FeatureRecipe::MfccStats => "mfcc",
        }
    }

    pub fn parse(s: &str) -> Result<FeatureRecipe> {
        match s {
            "mel" => Ok(FeatureRecipe::MelStats),
            "mfcc" => Ok(FeatureRecipe::MfccStats),
            other => Err(Error::Config(format!("unknown encoder variant {other}"))),
        }
    }
}

/// DCT-II rows 1..=k over n_mels bands (c0 carries overall energy and is
/// dropped).
fn dct_rows(k: usize, n_mels: usize) -> Mat {
    let mut d = Mat::zeros(k, n_mels);
    for r in 0..k {
        for j in 0..n_mels {
            d.set(
                r,
                j,
                (std::f64::consts::PI * (r + 1) as f64 * (j as f64 + 0.5) / n_mels as f64).cos(),
            );
        }
    }
    d
}

/// Retained intermediates for the pooling backward pass.
pub struct PoolContext {
    /// Frame-level coefficients the stats were pooled over (T x k).
    coeffs: Mat,
    means: Vec<f64>,
    stds: Vec<f64>,
    recipe: FeatureRecipe,
    n_mels: usize,
}

/// Mean + std pooling over time (1 x 2k), differentiable.
pub fn pooled_features(recipe: FeatureRecipe, mel: &Mat) -> (Mat, PoolContext) {
    let coeffs = match recipe {
        FeatureRecipe::MelStats => mel.clone(),
        FeatureRecipe::MfccStats => mel.matmul(&dct_rows(MFCC_COEFFS, mel.cols).transpose()),
    };
    let t = coeffs.rows as f64;
    let k = coeffs.cols;
    let means: Vec<f64> = (0..k)
        .map(|c| (0..coeffs.rows).map(|r| coeffs.get(r, c)).sum::<f64>() / t)
        .collect();
    let stds: Vec<f64> = (0..k)
        .map(|c| {
            let var = (0..coeffs.rows)
                .map(|r| (coeffs.get(r, c) - means[c]).powi(2))
                .sum::<f64>()
                / t;
            (var + VAR_EPS).sqrt()
        })
        .collect();
    let mut feats = Mat::zeros(1, 2 * k);
    feats.data[..k].copy_from_slice(&means);
    feats.data[k..].copy_from_slice(&stds);
    let ctx = PoolContext {
        coeffs,
        means,
        stds,
        recipe,
        n_mels: mel.cols,
    };
    (feats, ctx)
}

/// Gradient of a scalar loss w.r.t. the mel frames, given its gradient
/// w.r.t. the pooled features.
pub fn pooled_backward(ctx: &PoolContext, feat_grad: &Mat) -> Mat {
    let k = ctx.coeffs.cols;
    let t = ctx.coeffs.rows as f64;
    let mut coeff_grad = Mat::zeros(ctx.coeffs.rows, k);
    for c in 0..k {
        let g_mean = feat_grad.data[c];
        let g_std = feat_grad.data[k + c];
        // d std/d x_t = (x_t - mean) / (T * std)
        for r in 0..ctx.coeffs.rows {
            let dev = ctx.coeffs.get(r, c) - ctx.means[c];
            coeff_grad.set(r, c, g_mean / t + g_std * dev / (t * ctx.stds[c]));
        }
    }
    match ctx.recipe {
        FeatureRecipe::MelStats => coeff_grad,
        FeatureRecipe::MfccStats => coeff_grad.matmul(&dct_rows(MFCC_COEFFS, ctx.n_mels)),
    }
}

/// Unit-norm speaker embedding tagged with its source encoder.
#[derive(Debug, Clone)]
pub struct SpeakerEmbedding {
    pub values: Vec<f64>,
    pub encoder_id: String,
}

impl SpeakerEmbedding {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub embedding: SpeakerEmbedding,
    pub enrollment_count: usize,
}

#[derive(Debug, Clone)]
pub struct VerifierConfig {
    pub encoder_id: String,
    pub threshold: f64,
    pub eer: f64,
}

#[derive(Debug, Clone)]
pub struct SpeakerEncoderModel {
    pub id: String,
    pub recipe: FeatureRecipe,
    /// Feature -> embedding network, ending in L2-normalize.
    pub net: Network,
    pub embed_dim: usize,
}

/// Retained state for the differentiable mel -> embedding path.
pub struct EmbedRetained {
    pub embedding: SpeakerEmbedding,
    acts: Activations,
    pool: PoolContext,
}

impl SpeakerEncoderModel {
    /// Differentiable path: mel frames feed the pooled-feature network
    /// directly; retained state supports `embed_backward`.
    pub fn embed_mel_retained(&self, mel: &MelFrames) -> Result<EmbedRetained> {
        if mel.mat.rows == 0 {
            return Err(Error::Precondition("no mel frames to embed".into()));
        }
        let (feats, pool) = pooled_features(self.recipe, &mel.mat);
        let acts = self.net.forward(&feats)?;
        let values = acts.output().row(0).to_vec();
        Ok(EmbedRetained {
            embedding: SpeakerEmbedding {
                values,
                encoder_id: self.id.clone(),
            },
            acts,
            pool,
        })
    }

    pub fn embed_mel(&self, mel: &MelFrames) -> Result<SpeakerEmbedding> {
        Ok(self.embed_mel_retained(mel)?.embedding)
    }

    /// Gradient of a scalar loss w.r.t. the mel frames, given the loss
    /// gradient w.r.t. the embedding.
    pub fn embed_backward(&self, retained: &EmbedRetained, upstream: &[f64]) -> Result<Mat> {
        let up = Mat::from_rows(vec![upstream.to_vec()]);
        let rec = self.net.backward(&retained.acts, &up)?;
        Ok(pooled_backward(&retained.pool, &rec.input_grad))
    }

    /// Waveform inputs route through the signal feature chain.
    pub fn embed_waveform(
        &self,
        wav: &Waveform,
        frame_spec: &FrameSpec,
        mel_config: &MelConfig,
    ) -> Result<SpeakerEmbedding> {
        let mel = signal::log_mel(&signal::stft(wav, frame_spec)?, mel_config)?;
        self.embed_mel(&mel)
    }
}

/// Cosine similarity of two embeddings.
pub fn similarity(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f64> {
    if a.values.len() != b.values.len() {
        return Err(Error::ShapeMismatch(format!(
            "embedding dims {} vs {}",
            a.values.len(),
            b.values.len()
        )));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean of the sample embeddings, re-normalized.
pub fn enroll(
    model: &SpeakerEncoderModel,
    speaker_id: &str,
    samples: &[Waveform],
    frame_spec: &FrameSpec,
    mel_config: &MelConfig,
) -> Result<SpeakerProfile> {
    if samples.is_empty() {
        return Err(Error::Precondition("empty enrollment sample list".into()));
    }
    let mut mean = vec![0.0; model.embed_dim];
    for wav in samples {
        let e = model.embed_waveform(wav, frame_spec, mel_config)?;
        for (m, v) in mean.iter_mut().zip(&e.values) {
            *m += v;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Numeric("degenerate enrollment mean".into()));
    }
    mean.iter_mut().for_each(|v| *v /= norm);
    Ok(SpeakerProfile {
        speaker_id: speaker_id.to_string(),
        embedding: SpeakerEmbedding {
            values: mean,
            encoder_id: model.id.clone(),
        },
        enrollment_count: samples.len(),
    })
}

/// EER calibration over labeled trial scores (score, is_same_speaker).
/// The threshold is placed at the equal-error-rate point, ties broken
/// toward the lower threshold.
pub fn calibrate_threshold(encoder_id: &str, trials: &[(f64, bool)]) -> Result<VerifierConfig> {
    let n_same = trials.iter().filter(|(_, same)| *same).count();
    let n_diff = trials.len() - n_same;
    if n_same == 0 || n_diff == 0 {
        return Err(Error::Precondition(
            "trial set must contain both same- and different-speaker pairs".into(),
        ));
    }
    // Candidate thresholds: every score plus just-below/just-above sentinels.
    let mut candidates: Vec<f64> = trials.iter().map(|(s, _)| *s).collect();
    candidates.push(-1.0);
    candidates.push(1.0 + 1e-12);
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let mut best = (f64::INFINITY, 1.0, 0.5); // (|far-frr|, threshold, eer)
    for &t in &candidates {
        let far = trials.iter().filter(|(s, same)| !*same && *s >= t).count() as f64
            / n_diff as f64;
        let frr =
            trials.iter().filter(|(s, same)| *same && *s < t).count() as f64 / n_same as f64;
        let gap = (far - frr).abs();
        let eer = (far + frr) / 2.0;
        // Strict less-than keeps the lowest threshold on ties.
        if gap < best.0 - 1e-15 || (gap <= best.0 + 1e-15 && eer < best.2 - 1e-15) {
            best = (gap, t, eer);
        }
    }
    // Any value between the chosen candidate and the next score below it
    // yields the same FAR/FRR; center the threshold in that gap so the
    // operating point does not sit exactly on an observed score.
    let below = candidates
        .iter()
        .copied()
        .filter(|&c| c < best.1)
        .fold(-1.0f64, f64::max);
    Ok(VerifierConfig {
        encoder_id: encoder_id.to_string(),
        threshold: (below + best.1) / 2.0,
        eer: best.2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject,
}

/// Accept iff similarity >= threshold (ties accept, by documented rule).
pub fn verify(
    profile: &SpeakerProfile,
    embedding: &SpeakerEmbedding,
    config: &VerifierConfig,
) -> Result<(Verdict, f64)> {
    if profile.embedding.encoder_id != config.encoder_id {
        return Err(Error::Precondition(format!(
            "profile encoder {} does not match verifier {}",
            profile.embedding.encoder_id, config.encoder_id
        )));
    }
    let score = similarity(&profile.embedding, embedding)?;
    let verdict = if score >= config.threshold {
        Verdict::Accept
    } else {
        Verdict::Reject
    };
    Ok((verdict, score))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Train a d-vector encoder: a small classifier over pooled features whose
/// penultimate layer (L2-normalized) is the embedding.
pub fn train_speaker_encoder(
    utterances: &[(usize, MelFrames)],
    n_speakers: usize,
    recipe: FeatureRecipe,
    seed: u64,
    epochs: usize,
    lr: f64,
) -> Result<SpeakerEncoderModel> {
    if n_speakers < 2 {
        return Err(Error::Precondition("corpus must contain >= 2 speakers".into()));
    }
    if utterances.is_empty() {
        return Err(Error::Precondition("empty training corpus".into()));
    }
    let n_mels = utterances[0].1.mat.cols;
    let feat_dim = recipe.feature_dim(n_mels);
    let embed_dim = recipe.embed_dim();

    // Pool features once; standardize per dimension and fold the
    // standardization into the first affine layer.
    let feats: Vec<Mat> = utterances
        .iter()
        .map(|(_, mel)| pooled_features(recipe, &mel.mat).0)
        .collect();
    let n = feats.len() as f64;
    let mu: Vec<f64> = (0..feat_dim)
        .map(|c| feats.iter().map(|f| f.data[c]).sum::<f64>() / n)
        .collect();
    let sigma: Vec<f64> = (0..feat_dim)
        .map(|c| {
            let var = feats.iter().map(|f| (f.data[c] - mu[c]).powi(2)).sum::<f64>() / n;
            var.sqrt().max(1e-6)
        })
        .collect();

    let hidden = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = diffnet::affine_random(feat_dim, hidden, &mut rng);
    if let Layer::Affine { weights, bias } = &mut first {
        for i in 0..feat_dim {
            for (j, b) in bias.iter_mut().enumerate() {
                let w = weights.get(i, j) / sigma[i];
                weights.set(i, j, w);
                *b -= mu[i] * w;
            }
        }
    }
    let mut net = Network::new(vec![
        first,
        Layer::Tanh,
        diffnet::affine_random(hidden, embed_dim, &mut rng),
        Layer::Tanh,
        diffnet::affine_random(embed_dim, n_speakers, &mut rng),
        Layer::LogSoftmax,
    ]);
    let dataset: diffnet::Dataset = feats
        .into_iter()
        .zip(utterances.iter().map(|(l, _)| *l))
        .collect();
    diffnet::train_classifier(&mut net, &dataset, n_speakers, epochs, lr)?;

    // Embedding network = classifier trunk + L2-normalize.
    let encoder_layers: Vec<Layer> = net.layers[..4]
        .iter()
        .cloned()
        .chain(std::iter::once(Layer::L2Normalize))
        .collect();
    Ok(SpeakerEncoderModel {
        id: recipe.id().to_string(),
        recipe,
        net: Network::new(encoder_layers),
        embed_dim,
    })
}

/// Training classification accuracy of an already-trained encoder is not
/// recoverable (the classifier head is dropped), so training helpers that
/// need it retrain; this reports accuracy for a freshly trained head.
pub fn train_with_accuracy(
    utterances: &[(usize, MelFrames)],
    n_speakers: usize,
    recipe: FeatureRecipe,
    seed: u64,
    epochs: usize,
    lr: f64,
) -> Result<(SpeakerEncoderModel, f64)> {
    // Retrain the full classifier to measure accuracy, then rebuild the
    // encoder exactly as train_speaker_encoder does.
    let model = train_speaker_encoder(utterances, n_speakers, recipe, seed, epochs, lr)?;
    let feats: Vec<Mat> = utterances
        .iter()
        .map(|(_, mel)| pooled_features(recipe, &mel.mat).0)
        .collect();
    // Nearest-profile accuracy over embeddings as the reported measure.
    let mut sums: Vec<Vec<f64>> = vec![vec![0.0; model.embed_dim]; n_speakers];
    let mut counts = vec![0usize; n_speakers];
    let mut embs = Vec::with_capacity(feats.len());
    for ((label, _), feat) in utterances.iter().zip(&feats) {
        let acts = model.net.forward(feat)?;
        let e = acts.output().row(0).to_vec();
        for (s, v) in sums[*label].iter_mut().zip(&e) {
            *s += v;
        }
        counts[*label] += 1;
        embs.push((*label, e));
    }
    for s in sums.iter_mut() {
        let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        s.iter_mut().for_each(|v| *v /= norm);
    }
    let mut correct = 0usize;
    for (label, e) in &embs {
        let pred = sums
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.iter().zip(e).map(|(a, b)| a * b).sum::<f64>()))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0;
        if pred == *label {
            correct += 1;
        }
    }
    Ok((model, correct as f64 / embs.len() as f64))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

pub fn save_encoder(model: &SpeakerEncoderModel, path: &Path) -> Result<()> {
    diffnet::save_network(&model.net, path)?;
    let meta = format!(
        "id={}\nrecipe={}\nembed_dim={}\n",
        model.id,
        model.recipe.id(),
        model.embed_dim
    );
    let meta_path = path.with_extension("meta");
    std::fs::write(&meta_path, meta).map_err(|source| Error::Io {
        path: meta_path,
        source,
    })
}

pub fn load_encoder(path: &Path) -> Result<SpeakerEncoderModel> {
    let net = diffnet::load_network(path)?;
    let meta_path = path.with_extension("meta");
    let meta = std::fs::read_to_string(&meta_path)
        .map_err(|_| Error::MissingArtifact(meta_path.display().to_string()))?;
    let mut id = None;
    let mut recipe = None;
    let mut embed_dim = None;
    for line in meta.lines() {
        match line.split_once('=') {
            Some(("id", v)) => id = Some(v.to_string()),
            Some(("recipe", v)) => recipe = Some(FeatureRecipe::parse(v)?),
            Some(("embed_dim", v)) => embed_dim = v.parse().ok(),
            _ => {}
        }
    }
    match (id, recipe, embed_dim) {
        (Some(id), Some(recipe), Some(embed_dim)) => Ok(SpeakerEncoderModel {
            id,
            recipe,
            net,
            embed_dim,
        }),
        _ => Err(Error::Config(format!(
            "{}: incomplete encoder metadata",
            meta_path.display()
        ))),
    }
}

/// Enrolled profiles as a text table: `speaker_id=count:v1,v2,...` sorted by
/// speaker id, one encoder per file.
pub fn save_profiles(
    encoder_id: &str,
    profiles: &std::collections::BTreeMap<String, SpeakerProfile>,
    path: &Path,
) -> Result<()> {
    let mut out = format!("encoder_id={encoder_id}\n");
    for (id, p) in profiles {
        let values = p
            .embedding
            .values
            .iter()
            .map(|v| format!("{v:e}"))
            .collect::<Vec<_>>()
            .join(",");
        out.push_str(&format!("{id}={}:{values}\n", p.enrollment_count));
    }
    std::fs::write(path, out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_profiles(
    path: &Path,
) -> Result<(String, std::collections::BTreeMap<String, SpeakerProfile>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    let mut lines = text.lines();
    let encoder_id = lines
        .next()
        .and_then(|l| l.strip_prefix("encoder_id="))
        .ok_or_else(|| Error::Config(format!("{}: missing encoder_id line", path.display())))?
        .to_string();
    let mut profiles = std::collections::BTreeMap::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Config(format!("{}: malformed profile line: {line}", path.display()));
        let (id, rest) = line.split_once('=').ok_or_else(bad)?;
        let (count, values) = rest.split_once(':').ok_or_else(bad)?;
        let values: Vec<f64> = values
            .split(',')
            .map(|v| v.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        profiles.insert(
            id.to_string(),
            SpeakerProfile {
                speaker_id: id.to_string(),
                embedding: SpeakerEmbedding {
                    values,
                    encoder_id: encoder_id.clone(),
                },
                enrollment_count: count.parse().map_err(|_| bad())?,
            },
        );
    }
    Ok((encoder_id, profiles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    struct TestCorpus {
        utts: Vec<(usize, MelFrames)>,
        n_speakers: usize,
    }

    fn build_corpus(n_speakers: usize, utts_per_speaker: usize) -> TestCorpus {
        let dir = tempfile::tempdir().unwrap();
        let manifest =
            corpus::generate_corpus(dir.path(), 2024, n_speakers, utts_per_speaker, 1.0, 16000)
                .unwrap();
        let spec = FrameSpec::default();
        let mel_cfg = MelConfig::default();
        let speakers = manifest.speakers();
        let utts = manifest
            .records
            .iter()
            .map(|r| {
                let wav = signal::read_wav(&r.path).unwrap();
                let mel = signal::log_mel(&signal::stft(&wav, &spec).unwrap(), &mel_cfg).unwrap();
                let label = speakers.iter().position(|s| *s == r.speaker_id).unwrap();
                (label, mel)
            })
            .collect();
        TestCorpus { utts, n_speakers }
    }

    fn train(recipe: FeatureRecipe, tc: &TestCorpus) -> SpeakerEncoderModel {
        train_speaker_encoder(&tc.utts, tc.n_speakers, recipe, 7, 300, 0.05).unwrap()
    }

    #[test]
    fn embeddings_unit_norm_and_deterministic() {
        let tc = build_corpus(4, 3);
        let model = train(FeatureRecipe::MelStats, &tc);
        for (_, mel) in &tc.utts {
            let e = model.embed_mel(mel).unwrap();
            assert!((e.norm() - 1.0).abs() < 1e-9);
            let e2 = model.embed_mel(mel).unwrap();
            assert_eq!(e.values, e2.values);
        }
    }

    #[test]
    fn same_speaker_closer_than_different() {
        let tc = build_corpus(6, 4);
        for recipe in [FeatureRecipe::MelStats, FeatureRecipe::MfccStats] {
            let model = train(recipe, &tc);
            let embs: Vec<(usize, SpeakerEmbedding)> = tc
                .utts
                .iter()
                .map(|(l, mel)| (*l, model.embed_mel(mel).unwrap()))
                .collect();
            let mut same = Vec::new();
            let mut diff = Vec::new();
            for i in 0..embs.len() {
                for j in i + 1..embs.len() {
                    let s = similarity(&embs[i].1, &embs[j].1).unwrap();
                    if embs[i].0 == embs[j].0 {
                        same.push(s);
                    } else {
                        diff.push(s);
                    }
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            assert!(
                mean(&same) - mean(&diff) >= 0.2,
                "{:?} margin {} vs {}",
                recipe,
                mean(&same),
                mean(&diff)
            );
        }
    }

    #[test]
    fn similarity_geometry() {
        let e = |v: Vec<f64>| SpeakerEmbedding {
            values: v,
            encoder_id: "mel".into(),
        };
        let a = e(vec![1.0, 0.0]);
        let b = e(vec![0.0, 1.0]);
        let na = e(vec![-1.0, 0.0]);
        assert!((similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(similarity(&a, &b).unwrap().abs() < 1e-12);
        assert!((similarity(&a, &na).unwrap() + 1.0).abs() < 1e-12);
        assert!(similarity(&a, &e(vec![1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn enroll_mean_profile() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = corpus::generate_corpus(dir.path(), 5, 4, 4, 1.0, 16000).unwrap();
        let tc = build_corpus(4, 4);
        let model = train(FeatureRecipe::MelStats, &tc);
        let spec = FrameSpec::default();
        let mel_cfg = MelConfig::default();
        let by_speaker = manifest.by_speaker();
        let (spk, utts) = by_speaker.iter().next().unwrap();
        let wavs: Vec<Waveform> = utts.iter().map(|r| signal::read_wav(&r.path).unwrap()).collect();
        let single = enroll(&model, spk, &wavs[..1], &spec, &mel_cfg).unwrap();
        let own = model.embed_waveform(&wavs[0], &spec, &mel_cfg).unwrap();
        assert!((similarity(&single.embedding, &own).unwrap() - 1.0).abs() < 1e-9);
        // Two identical samples = one.
        let two = enroll(
            &model,
            spk,
            &[wavs[0].clone(), wavs[0].clone()],
            &spec,
            &mel_cfg,
        )
        .unwrap();
        assert!((similarity(&two.embedding, &single.embedding).unwrap() - 1.0).abs() < 1e-9);
        assert!(enroll(&model, spk, &[], &spec, &mel_cfg).is_err());
    }

    #[test]
    fn calibrate_separable_and_chance() {
        let mut trials = Vec::new();
        for i in 0..10 {
            trials.push((0.9 + 0.005 * i as f64, true));
            trials.push((0.1 - 0.005 * i as f64, false));
        }
        let cfg = calibrate_threshold("mel", &trials).unwrap();
        assert_eq!(cfg.eer, 0.0);
        assert!(cfg.threshold > 0.1 && cfg.threshold <= 0.9);

        let identical: Vec<(f64, bool)> = (0..20)
            .flat_map(|i| {
                let s = -0.5 + i as f64 * 0.05;
                [(s, true), (s, false)]
            })
            .collect();
        let cfg2 = calibrate_threshold("mel", &identical).unwrap();
        assert!((cfg2.eer - 0.5).abs() <= 0.05, "eer {}", cfg2.eer);

        assert!(calibrate_threshold("mel", &[(0.5, true)]).is_err());
    }

    #[test]
    fn verify_boundary_rules() {
        let profile = SpeakerProfile {
            speaker_id: "spk00".into(),
            embedding: SpeakerEmbedding {
                values: vec![1.0, 0.0],
                encoder_id: "mel".into(),
            },
            enrollment_count: 1,
        };
        let cfg = VerifierConfig {
            encoder_id: "mel".into(),
            threshold: 0.5,
            eer: 0.0,
        };
        let at = SpeakerEmbedding {
            values: vec![0.5, (1.0f64 - 0.25).sqrt()],
            encoder_id: "mel".into(),
        };
        let (v, s) = verify(&profile, &at, &cfg).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
        assert_eq!(v, Verdict::Accept); // tie accepts
        let opposite = SpeakerEmbedding {
            values: vec![-1.0, 0.0],
            encoder_id: "mel".into(),
        };
        assert_eq!(verify(&profile, &opposite, &cfg).unwrap().0, Verdict::Reject);
        let mismatched = VerifierConfig {
            encoder_id: "mfcc".into(),
            threshold: 0.0,
            eer: 0.0,
        };
        assert!(verify(&profile, &at, &mismatched).is_err());
    }

    #[test]
    fn variants_differ_in_dim_and_ranking() {
        let tc = build_corpus(6, 4);
        let mel = train(FeatureRecipe::MelStats, &tc);
        let mfcc = train(FeatureRecipe::MfccStats, &tc);
        assert_eq!(mel.embed_dim, 32);
        assert_eq!(mfcc.embed_dim, 24);
        // Similarity rankings over 20 trials must not be identical.
        let mut rank_mel = Vec::new();
        let mut rank_mfcc = Vec::new();
        for i in 0..5 {
            for j in i + 1..5 {
                let a = &tc.utts[i].1;
                let b = &tc.utts[j].1;
                rank_mel.push(
                    similarity(&mel.embed_mel(a).unwrap(), &mel.embed_mel(b).unwrap()).unwrap(),
                );
                rank_mfcc.push(
                    similarity(&mfcc.embed_mel(a).unwrap(), &mfcc.embed_mel(b).unwrap()).unwrap(),
                );
            }
        }
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
            idx
        };
        assert_ne!(order(&rank_mel), order(&rank_mfcc));
    }

    #[test]
    fn train_deterministic_model_files() {
        let tc = build_corpus(4, 3);
        let dir = tempfile::tempdir().unwrap();
        let a = train(FeatureRecipe::MelStats, &tc);
        let b = train(FeatureRecipe::MelStats, &tc);
        save_encoder(&a, &dir.path().join("a.bin")).unwrap();
        save_encoder(&b, &dir.path().join("b.bin")).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("a.bin")).unwrap(),
            std::fs::read(dir.path().join("b.bin")).unwrap()
        );
    }

    #[test]
    fn single_speaker_rejected() {
        let tc = build_corpus(4, 2);
        assert!(train_speaker_encoder(&tc.utts, 1, FeatureRecipe::MelStats, 1, 10, 0.05).is_err());
    }

    #[test]
    fn pooled_backward_matches_fd() {
        use rand::Rng;
        for recipe in [FeatureRecipe::MelStats, FeatureRecipe::MfccStats] {
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let mut mel = Mat::zeros(6, 64);
            for v in mel.data.iter_mut() {
                *v = rng.gen_range(-2.0..2.0);
            }
            let k = recipe.feature_dim(64);
            let seed: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, ctx) = pooled_features(recipe, &mel);
            let grad = pooled_backward(&ctx, &Mat::from_rows(vec![seed.clone()]));
            let loss = |m: &Mat| {
                let (f, _) = pooled_features(recipe, m);
                f.data.iter().zip(&seed).map(|(a, b)| a * b).sum::<f64>()
            };
            let step = 1e-5;
            for &i in &[0usize, 17, 100, 250, 383] {
                let mut p = mel.clone();
                p.data[i] += step;
                let mut m = mel.clone();
                m.data[i] -= step;
                let numeric = (loss(&p) - loss(&m)) / (2.0 * step);
                let analytic = grad.data[i];
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-4,
                    "{recipe:?} coord {i}: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn encoder_save_load_round_trip() {
        let tc = build_corpus(4, 2);
        let model = train(FeatureRecipe::MfccStats, &tc);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        save_encoder(&model, &path).unwrap();
        let back = load_encoder(&path).unwrap();
        assert_eq!(back.id, "mfcc");
        assert_eq!(back.embed_dim, 24);
        let e1 = model.embed_mel(&tc.utts[0].1).unwrap();
        let e2 = back.embed_mel(&tc.utts[0].1).unwrap();
        assert!(similarity(&e1, &e2).unwrap() > 0.999);
    }
}
