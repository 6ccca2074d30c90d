//! Adversarial voice protection: the alternating identity/quality loss
//! controller and the embedding-level PGD loop, with a signal-level
//! (STFT-magnitude) baseline for comparison.
//!
//! Direction convention: the identity loss is a distance to be *minimized*
//! (so the victim's embedding is pushed toward the target speaker) and the
//! SNR loss is a quality score to be *maximized*. Optimization terminates
//! once the identity loss is at or below its threshold while the SNR is at
//! or above its threshold.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{self, CodecModel, EmbeddingSeq};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::signal::{self, MelFrames, Waveform};
use crate::speaker::SpeakerEncoderModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    /// Euclidean distance between unit-norm speaker embeddings.
    L2,
    /// 1 - cosine similarity.
    Cosine,
}

impl DistanceKind {
    pub fn parse(s: &str) -> Result<DistanceKind> {
        match s {
            "l2" => Ok(DistanceKind::L2),
            "cosine" => Ok(DistanceKind::Cosine),
            other => Err(Error::Config(format!("unknown distance kind {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PercAlConfig {
    pub tau_identity: f64,
    pub tau_snr_db: f64,
    pub alpha: f64,
    pub epsilon_init: f64,
    pub epsilon_stab: f64,
    pub max_iters: usize,
    /// Optional L-inf projection radius around the original embedding;
    /// disabled by default to match the literal algorithm.
    pub budget_rho: Option<f64>,
    pub distance: DistanceKind,
}

impl PercAlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0
            || self.max_iters < 1
            || self.tau_identity <= 0.0
            || self.epsilon_stab <= 0.0
            || self.budget_rho.is_some_and(|r| r <= 0.0)
        {
            return Err(Error::Precondition(
                "PercAlConfig requires alpha > 0, max_iters >= 1, tau_identity > 0, \
                 epsilon_stab > 0 and budget_rho > 0 when enabled"
                    .into(),
            ));
        }
        Ok(())
    }
}

impl Default for PercAlConfig {
    fn default() -> Self {
        PercAlConfig {
            tau_identity: 0.5,
            tau_snr_db: 15.0,
            alpha: 1e-2,
            epsilon_init: 1e-2,
            epsilon_stab: 1e-8,
            max_iters: 500,
            budget_rho: None,
            distance: DistanceKind::L2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Identity,
    Quality,
    Done,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Identity => "identity",
            Phase::Quality => "quality",
            Phase::Done => "done",
        }
    }
}

/// Loss-switching rule: identity first, quality once identity is distorted
/// enough, done when both thresholds hold.
pub fn perc_al_select(l_identity: f64, snr_db: f64, config: &PercAlConfig) -> Phase {
    if l_identity > config.tau_identity {
        Phase::Identity
    } else if snr_db < config.tau_snr_db {
        Phase::Quality
    } else {
        Phase::Done
    }
}

/// 10 log10(||orig||^2 / (||orig - perturb||^2 + eps)); higher means a
/// smaller perturbation.
pub fn snr_loss(orig: &Mat, perturb: &Mat, epsilon_stab: f64) -> Result<f64> {
    if orig.rows != perturb.rows || orig.cols != perturb.cols {
        return Err(Error::ShapeMismatch(format!(
            "snr_loss {}x{} vs {}x{}",
            orig.rows, orig.cols, perturb.rows, perturb.cols
        )));
    }
    let signal: f64 = orig.data.iter().map(|v| v * v).sum();
    if signal == 0.0 {
        return Err(Error::Precondition("snr_loss: all-zero original".into()));
    }
    let noise: f64 = orig
        .data
        .iter()
        .zip(&perturb.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(10.0 * (signal / (noise + epsilon_stab)).log10())
}

/// Distance between two speaker embeddings plus its gradient w.r.t. the
/// first argument.
pub fn embedding_distance(g: &[f64], target: &[f64], kind: DistanceKind) -> (f64, Vec<f64>) {
    match kind {
        DistanceKind::L2 => {
            let diff: Vec<f64> = g.iter().zip(target).map(|(a, b)| a - b).collect();
            let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            let grad = if dist > 0.0 {
                diff.iter().map(|v| v / dist).collect()
            } else {
                vec![0.0; g.len()]
            };
            (dist, grad)
        }
        DistanceKind::Cosine => {
            let dot: f64 = g.iter().zip(target).map(|(a, b)| a * b).sum();
            (1.0 - dot, target.iter().map(|v| -v).collect())
        }
    }
}

/// One protection objective: an encoder with the target embedding the
/// victim should be pushed toward.
pub struct ProtectTarget<'a> {
    pub encoder: &'a SpeakerEncoderModel,
    pub target: Vec<f64>,
}

/// Identity loss of decoded mel frames against the targets (arithmetic mean
/// over encoders) plus its gradient w.r.t. the mel frames.
fn identity_loss_grad_mel(
    targets: &[ProtectTarget<'_>],
    mel: &MelFrames,
    kind: DistanceKind,
) -> Result<(f64, Mat)> {
    if targets.is_empty() {
        return Err(Error::Precondition("empty encoder list".into()));
    }
    let mut total = 0.0;
    let mut grad = Mat::zeros(mel.mat.rows, mel.mat.cols);
    let scale = 1.0 / targets.len() as f64;
    for t in targets {
        if t.target.len() != t.encoder.embed_dim {
            return Err(Error::ShapeMismatch(format!(
                "target dim {} vs encoder {} dim {}",
                t.target.len(),
                t.encoder.id,
                t.encoder.embed_dim
            )));
        }
        let retained = t.encoder.embed_mel_retained(mel)?;
        let (loss, up) = embedding_distance(&retained.embedding.values, &t.target, kind);
        let g = t.encoder.embed_backward(&retained, &up)?;
        total += scale * loss;
        for (a, b) in grad.data.iter_mut().zip(&g.data) {
            *a += scale * b;
        }
    }
    Ok((total, grad))
}

/// Identity loss of an embedding sequence under the codec's decode path.
pub fn identity_loss(
    codec_model: &CodecModel,
    targets: &[ProtectTarget<'_>],
    e_perturb: &EmbeddingSeq,
    kind: DistanceKind,
) -> Result<f64> {
    let mel = codec::decode_features(codec_model, e_perturb)?;
    identity_loss_grad_mel(targets, &mel, kind).map(|(l, _)| l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    IterationBudgetExhausted,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::IterationBudgetExhausted => "iteration-budget-exhausted",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iteration: usize,
    pub phase: Phase,
    pub l_identity: f64,
    pub snr_db: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct DefenseResult {
    pub protected: Waveform,
    /// Final adversarial embedding (embedding-level defense only).
    pub e_adv: Option<EmbeddingSeq>,
    pub trace: Vec<TraceRow>,
    pub termination: Termination,
}

impl DefenseResult {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,phase,l_identity,snr_db,grad_norm\n");
        for row in &self.trace {
            out.push_str(&format!(
                "{},{},{:.9},{:.6},{:.9}\n",
                row.iteration,
                row.phase.as_str(),
                row.l_identity,
                row.snr_db,
                row.grad_norm
            ));
        }
        out
    }
}

fn seeded_noise(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in m.data.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = scale * z;
    }
    m
}

/// Toward-the-anchor quality step: each coordinate moves by alpha in the
/// direction of the anchor, clamped so it never overshoots.
fn quality_step(var: &mut Mat, anchor: &Mat, alpha: f64) {
    for (v, &a) in var.data.iter_mut().zip(&anchor.data) {
        let d = a - *v;
        *v += d.signum() * alpha.min(d.abs());
    }
}

fn project_linf(var: &mut Mat, anchor: &Mat, rho: f64) {
    for (v, &a) in var.data.iter_mut().zip(&anchor.data) {
        *v = v.clamp(a - rho, a + rho);
    }
}

/// Core PerC-AL loop shared by the embedding-level and signal-level
/// defenses. `loss_grad` maps the current variable to the identity loss and
/// its gradient w.r.t. the variable.
fn perc_al_loop(
    var: &mut Mat,
    orig: &Mat,
    config: &PercAlConfig,
    mut loss_grad: impl FnMut(&Mat) -> Result<(f64, Mat)>,
) -> Result<(Vec<TraceRow>, Termination)> {
    let mut trace = Vec::new();
    let mut termination = Termination::IterationBudgetExhausted;
    for iter in 1..=config.max_iters {
        let (l_identity, grad) = loss_grad(var)?;
        let snr_db = snr_loss(orig, var, config.epsilon_stab)?;
        if !l_identity.is_finite() || !snr_db.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {iter}: L_identity={l_identity} SNR={snr_db}"
            )));
        }
        let phase = perc_al_select(l_identity, snr_db, config);
        let grad_norm = match phase {
            Phase::Identity => grad.frobenius_norm(),
            _ => 0.0,
        };
        trace.push(TraceRow {
            iteration: iter,
            phase,
            l_identity,
            snr_db,
            grad_norm,
        });
        match phase {
            Phase::Done => {
                termination = Termination::Converged;
                break;
            }
            Phase::Identity => {
                for (v, g) in var.data.iter_mut().zip(&grad.data) {
                    *v -= config.alpha * g.signum();
                }
            }
            Phase::Quality => quality_step(var, orig, config.alpha),
        }
        if let Some(rho) = config.budget_rho {
            project_linf(var, orig, rho);
        }
    }
    Ok((trace, termination))
}

/// Embedding-level PGD protection: perturb the codec embedding of `x_u`
/// until its decoded speaker embedding crosses toward the target, then
/// restore SNR, then decode the protected waveform once.
pub fn pgd_protect(
    codec_model: &CodecModel,
    targets: &[ProtectTarget<'_>],
    x_u: &Waveform,
    config: &PercAlConfig,
    seed: u64,
) -> Result<DefenseResult> {
    config.validate()?;
    let e_orig = codec::encode(codec_model, x_u)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = seeded_noise(
        e_orig.mat.rows,
        e_orig.mat.cols,
        config.epsilon_init,
        &mut rng,
    );
    let mut var = e_orig.mat.clone();
    for (v, n) in var.data.iter_mut().zip(&noise.data) {
        *v += n;
    }
    let (trace, termination) = perc_al_loop(&mut var, &e_orig.mat, config, |m| {
        let e = EmbeddingSeq {
            mat: m.clone(),
            frame_spec: e_orig.frame_spec,
            sample_rate: e_orig.sample_rate,
        };
        let (mel, acts) = codec::decode_features_retained(codec_model, &e)?;
        let (loss, mel_grad) = identity_loss_grad_mel(targets, &mel, config.distance)?;
        let e_grad = codec::decode_features_backward(codec_model, &acts, &mel_grad)?;
        Ok((loss, e_grad))
    })?;
    let e_adv = EmbeddingSeq {
        mat: var,
        frame_spec: e_orig.frame_spec,
        sample_rate: e_orig.sample_rate,
    };
    let protected = codec::decode(codec_model, &e_adv)?;
    Ok(DefenseResult {
        protected,
        e_adv: Some(e_adv),
        trace,
        termination,
    })
}

/// Mean of per-encoder identity losses (the ensemble objective).
pub fn ensemble_identity_loss(
    codec_model: &CodecModel,
    targets: &[ProtectTarget<'_>],
    e_perturb: &EmbeddingSeq,
    kind: DistanceKind,
) -> Result<f64> {
    identity_loss(codec_model, targets, e_perturb, kind)
}

/// Signal-level baseline: the same PerC-AL loop, but the optimization
/// variable is the STFT magnitude of `x_u`; the protected waveform is
/// resynthesized with the original phase.
pub fn signal_level_protect(
    targets: &[ProtectTarget<'_>],
    x_u: &Waveform,
    frame_spec: &signal::FrameSpec,
    mel_config: &signal::MelConfig,
    config: &PercAlConfig,
    seed: u64,
) -> Result<DefenseResult> {
    config.validate()?;
    let spec = signal::stft(x_u, frame_spec)?;
    let mag0 = spec.magnitude();
    let phase = spec.phase();
    let fb = signal::mel_filterbank(mel_config, frame_spec, x_u.sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = seeded_noise(mag0.rows, mag0.cols, config.epsilon_init, &mut rng);
    let mut var = mag0.clone();
    for (v, n) in var.data.iter_mut().zip(&noise.data) {
        *v += n;
    }
    let (trace, termination) = perc_al_loop(&mut var, &mag0, config, |m| {
        // mel_j = ln(max(sum_k fb_jk m_k^2, floor)); gradient is zero on
        // floored bands.
        let power = m.map(|v| v * v);
        let mel_power = power.matmul(&fb.transpose());
        let mel = MelFrames {
            mat: mel_power.map(|v| v.max(mel_config.log_floor).ln()),
            config: *mel_config,
        };
        let (loss, mel_grad) = identity_loss_grad_mel(targets, &mel, config.distance)?;
        let mut grad = Mat::zeros(m.rows, m.cols);
        for r in 0..m.rows {
            for j in 0..fb.rows {
                let denom = mel_power.get(r, j);
                if denom <= mel_config.log_floor {
                    continue;
                }
                let g = mel_grad.get(r, j) / denom;
                if g == 0.0 {
                    continue;
                }
                let fb_row = fb.row(j);
                let m_row = m.row(r);
                let grad_row = grad.row_mut(r);
                for k in 0..fb_row.len() {
                    grad_row[k] += g * fb_row[k] * 2.0 * m_row[k];
                }
            }
        }
        Ok((loss, grad))
    })?;
    // Resynthesize with the original phase; pad to the input length.
    let data: Vec<rustfft::num_complex::Complex<f64>> = var
        .data
        .iter()
        .zip(&phase.data)
        .map(|(&m, &p)| rustfft::num_complex::Complex::from_polar(m.max(0.0), p))
        .collect();
    let rebuilt = signal::istft(
        &signal::ComplexSpectrogram {
            frames: var.rows,
            bins: var.cols,
            data,
            frame_spec: *frame_spec,
            sample_rate: x_u.sample_rate,
        },
        frame_spec,
    )?;
    let mut samples = rebuilt.samples;
    samples.resize(x_u.samples.len(), 0.0);
    let protected = Waveform::new(samples, x_u.sample_rate)?;
    Ok(DefenseResult {
        protected,
        e_adv: None,
        trace,
        termination,
    })
}
