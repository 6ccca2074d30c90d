//! Evaluation harness: defense-success metrics, the full
//! victim x defense x enhancement x verifier campaign, CSV reports and
//! spectrogram dumps.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::attack::{self, EnhanceConfig, EnhanceMethod, ToySynthModel};
use crate::codec::CodecModel;
use crate::corpus;
use crate::defense::{self, PercAlConfig, ProtectTarget};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::signal::{self, FrameSpec, MelConfig, Waveform};
use crate::speaker::{self, SpeakerEncoderModel, SpeakerProfile, Verdict, VerifierConfig};

pub const SNR_CAP_DB: f64 = 120.0;
const LOG_MAG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DefenseKind {
    Raw,
    EmbeddingLevel,
    SignalLevel,
}

impl DefenseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DefenseKind::Raw => "raw",
            DefenseKind::EmbeddingLevel => "embedding-level",
            DefenseKind::SignalLevel => "signal-level",
        }
    }

    pub fn parse(s: &str) -> Result<DefenseKind> {
        match s {
            "raw" => Ok(DefenseKind::Raw),
            "embedding-level" | "embedding" => Ok(DefenseKind::EmbeddingLevel),
            "signal-level" | "signal" => Ok(DefenseKind::SignalLevel),
            other => Err(Error::Config(format!("unknown defense kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EnhanceKind {
    None,
    SpectralMasking,
    Wiener,
    Smoothing,
}

impl EnhanceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnhanceKind::None => "none",
            EnhanceKind::SpectralMasking => "spectral-masking",
            EnhanceKind::Wiener => "wiener",
            EnhanceKind::Smoothing => "smoothing",
        }
    }

    pub fn parse(s: &str) -> Result<EnhanceKind> {
        match s {
            "none" => Ok(EnhanceKind::None),
            "spectral-masking" => Ok(EnhanceKind::SpectralMasking),
            "wiener" => Ok(EnhanceKind::Wiener),
            "smoothing" => Ok(EnhanceKind::Smoothing),
            other => Err(Error::Config(format!("unknown enhancement kind {other}"))),
        }
    }

    fn method(&self) -> Option<EnhanceMethod> {
        match self {
            EnhanceKind::None => None,
            EnhanceKind::SpectralMasking => Some(EnhanceMethod::SpectralMasking),
            EnhanceKind::Wiener => Some(EnhanceMethod::Wiener),
            EnhanceKind::Smoothing => Some(EnhanceMethod::Smoothing),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub victim: String,
    pub sample_id: String,
    pub content_id: String,
    pub defense: DefenseKind,
    pub enhancement: EnhanceKind,
    pub verifier: String,
    pub score: f64,
    pub accepted: bool,
    /// Waveform SNR of the defended (and possibly enhanced) victim sample
    /// against the original.
    pub snr_db: f64,
    pub lsd_db: f64,
    /// Residual-perturbation ratio; defined only for protected + enhanced
    /// cells.
    pub removal: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub defense: DefenseKind,
    pub enhancement: EnhanceKind,
    pub verifier: String,
    pub trials: usize,
    pub dsr: f64,
    pub mean_snr_db: f64,
    pub mean_lsd_db: f64,
    pub mean_removal: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub config_snapshot: String,
    pub seed: u64,
    pub outcomes: Vec<TrialOutcome>,
    pub aggregates: Vec<AggregateRow>,
}

/// Defense success rate of one grid cell: the percentage of trials the
/// verifier rejected.
pub fn dsr(outcomes: &[&TrialOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Precondition("dsr over an empty cell".into()));
    }
    let rejects = outcomes.iter().filter(|o| !o.accepted).count();
    Ok(100.0 * rejects as f64 / outcomes.len() as f64)
}

/// 10 log10(||ref||^2 / ||ref - test||^2) over samples, trimmed to the
/// shorter signal and capped at [`SNR_CAP_DB`].
pub fn waveform_snr(reference: &Waveform, test: &Waveform) -> Result<f64> {
    let n = reference.samples.len().min(test.samples.len());
    let mut sig = 0.0;
    let mut noi = 0.0;
    for i in 0..n {
        sig += reference.samples[i] * reference.samples[i];
        noi += (reference.samples[i] - test.samples[i]).powi(2);
    }
    if sig == 0.0 {
        return Err(Error::Precondition("waveform_snr: silent reference".into()));
    }
    if noi == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (sig / noi).log10()).min(SNR_CAP_DB))
}

/// Root-mean-square difference of floored log magnitudes in dB, frames
/// trimmed to the shorter spectrogram.
pub fn log_spectral_distance(
    reference: &Waveform,
    test: &Waveform,
    frame_spec: &FrameSpec,
) -> Result<f64> {
    let ma = signal::stft(reference, frame_spec)?.magnitude();
    let mb = signal::stft(test, frame_spec)?.magnitude();
    let frames = ma.rows.min(mb.rows);
    let mut acc = 0.0;
    let mut count = 0usize;
    for r in 0..frames {
        for (a, b) in ma.row(r).iter().zip(mb.row(r)) {
            let d = 20.0 * (a.max(LOG_MAG_FLOOR).log10() - b.max(LOG_MAG_FLOOR).log10());
            acc += d * d;
            count += 1;
        }
    }
    Ok((acc / count as f64).sqrt())
}

/// One verification column of the campaign grid: an encoder, its calibrated
/// threshold and the enrolled victim profiles.
pub struct Verifier {
    pub encoder: SpeakerEncoderModel,
    pub config: VerifierConfig,
    pub profiles: BTreeMap<String, SpeakerProfile>,
}

pub struct VictimCase {
    pub speaker_id: String,
    pub sample_id: String,
    pub sample: Waveform,
}

pub struct ContentCase {
    pub utt_id: String,
    pub speaker_id: String,
    pub wav: Waveform,
}

pub struct Campaign<'a> {
    pub codec: &'a CodecModel,
    pub verifiers: &'a [Verifier],
    /// One synthesizer per verifier encoder (the attacker matched to each
    /// verification column).
    pub synths: &'a [ToySynthModel],
    /// Encoder ids the defense optimizes against (subset of verifier ids).
    pub protect_encoder_ids: &'a [String],
    pub victims: &'a [VictimCase],
    /// Attacker content pool; utterances by the victim are skipped per trial.
    pub contents: &'a [ContentCase],
    /// Cap on content utterances per cell (0 = all).
    pub max_contents: usize,
    pub defenses: &'a [DefenseKind],
    pub enhancements: &'a [EnhanceKind],
    pub perc_al: &'a PercAlConfig,
    /// PerC-AL config for the signal-level baseline (magnitudes live on a
    /// different scale than embeddings).
    pub perc_al_signal: &'a PercAlConfig,
    pub enhance_defaults: &'a EnhanceConfig,
    pub frame_spec: FrameSpec,
    pub mel: MelConfig,
    pub seed: u64,
    pub config_snapshot: String,
}

fn verifier_by_id<'a>(campaign: &'a Campaign<'_>, id: &str) -> Result<&'a Verifier> {
    campaign
        .verifiers
        .iter()
        .find(|v| v.encoder.id == id)
        .ok_or_else(|| Error::Config(format!("no verifier for encoder {id}")))
}

/// Farthest enrolled profile from the victim under this encoder — the
/// identity target the defense pushes toward.
fn select_target(verifier: &Verifier, victim: &str) -> Result<Vec<f64>> {
    let own = verifier
        .profiles
        .get(victim)
        .ok_or_else(|| Error::Config(format!("victim {victim} not enrolled")))?;
    let mut best: Option<(f64, &SpeakerProfile)> = None;
    for (id, p) in &verifier.profiles {
        if id == victim {
            continue;
        }
        let d: f64 = p
            .embedding
            .values
            .iter()
            .zip(&own.embedding.values)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        if best.as_ref().is_none_or(|(bd, _)| d > *bd) {
            best = Some((d, p));
        }
    }
    best.map(|(_, p)| p.embedding.values.clone())
        .ok_or_else(|| Error::Precondition(format!("no non-victim profile for {victim}")))
}

/// Defended sample plus its zero-perturbation passthrough (the same
/// synthesis pipeline without the adversarial perturbation); removal
/// efficacy is measured against the passthrough so it isolates the
/// perturbation from shared pipeline distortion.
fn protect(
    campaign: &Campaign<'_>,
    victim: &VictimCase,
    defense: DefenseKind,
) -> Result<(Waveform, Waveform)> {
    if defense == DefenseKind::Raw {
        return Ok((victim.sample.clone(), victim.sample.clone()));
    }
    let mut encoders = Vec::new();
    let mut targets = Vec::new();
    for id in campaign.protect_encoder_ids {
        let v = verifier_by_id(campaign, id)?;
        targets.push(select_target(v, &victim.speaker_id)?);
        encoders.push(&v.encoder);
    }
    let pairs: Vec<ProtectTarget<'_>> = encoders
        .iter()
        .zip(targets)
        .map(|(e, t)| ProtectTarget { encoder: e, target: t })
        .collect();
    let label = format!("protect/{}/{}/{}", victim.speaker_id, victim.sample_id, defense.as_str());
    let seed = corpus::derive_seed(campaign.seed, &label);
    match defense {
        DefenseKind::EmbeddingLevel => {
            let result = defense::pgd_protect(
                campaign.codec,
                &pairs,
                &victim.sample,
                campaign.perc_al,
                seed,
            )?;
            let passthrough =
                crate::codec::decode(campaign.codec, &crate::codec::encode(campaign.codec, &victim.sample)?)?;
            Ok((result.protected, passthrough))
        }
        DefenseKind::SignalLevel => {
            let result = defense::signal_level_protect(
                &pairs,
                &victim.sample,
                &campaign.frame_spec,
                &campaign.mel,
                campaign.perc_al_signal,
                seed,
            )?;
            let spec = signal::stft(&victim.sample, &campaign.frame_spec)?;
            let rebuilt = signal::istft(&spec, &campaign.frame_spec)?;
            let mut samples = rebuilt.samples;
            samples.resize(victim.sample.samples.len(), 0.0);
            let passthrough = Waveform::new(samples, victim.sample.sample_rate)?;
            Ok((result.protected, passthrough))
        }
        DefenseKind::Raw => unreachable!(),
    }
}

/// Run the full grid. Deterministic under (config, seed); cells execute in
/// parallel and are collected in grid order.
pub fn run_campaign(campaign: &Campaign<'_>) -> Result<EvalReport> {
    if campaign.victims.is_empty() || campaign.contents.is_empty() {
        return Err(Error::Precondition("campaign needs victims and contents".into()));
    }
    for v in campaign.verifiers {
        if v.encoder.id != v.config.encoder_id {
            return Err(Error::Config(format!(
                "verifier pairing mismatch: encoder {} vs config {}",
                v.encoder.id, v.config.encoder_id
            )));
        }
        if !campaign.synths.iter().any(|s| s.encoder_id == v.encoder.id) {
            return Err(Error::Config(format!(
                "no toy synth trained for encoder {}",
                v.encoder.id
            )));
        }
    }
    for id in campaign.protect_encoder_ids {
        verifier_by_id(campaign, id)?;
    }

    // Stage 1: defended victim samples, parallel over victim x defense.
    let protect_jobs: Vec<(usize, DefenseKind)> = campaign
        .victims
        .iter()
        .enumerate()
        .flat_map(|(i, _)| campaign.defenses.iter().map(move |d| (i, *d)))
        .collect();
    let defended: Vec<(Waveform, Waveform)> = protect_jobs
        .par_iter()
        .map(|(i, d)| protect(campaign, &campaign.victims[*i], *d))
        .collect::<Result<_>>()?;
    let defended_of = |i: usize, d: DefenseKind| -> &(Waveform, Waveform) {
        let k = protect_jobs
            .iter()
            .position(|(vi, vd)| *vi == i && *vd == d)
            .expect("defended sample present");
        &defended[k]
    };

    // Stage 2: enhancement, synthesis and verification per grid cell.
    let cells: Vec<(usize, DefenseKind, EnhanceKind)> = campaign
        .victims
        .iter()
        .enumerate()
        .flat_map(|(i, _)| {
            campaign.defenses.iter().flat_map(move |d| {
                campaign.enhancements.iter().map(move |e| (i, *d, *e))
            })
        })
        .collect();
    let outcomes: Vec<Vec<TrialOutcome>> = cells
        .par_iter()
        .map(|&(i, d, e)| -> Result<Vec<TrialOutcome>> {
            let victim = &campaign.victims[i];
            let (base, passthrough) = defended_of(i, d);
            let processed = match e.method() {
                None => base.clone(),
                Some(m) => {
                    let cfg = EnhanceConfig {
                        method: m,
                        frame_spec: campaign.frame_spec,
                        ..campaign.enhance_defaults.clone()
                    };
                    attack::enhance(base, &cfg)?
                }
            };
            let snr_db = waveform_snr(&victim.sample, &processed)?;
            let lsd_db = log_spectral_distance(&victim.sample, &processed, &campaign.frame_spec)?;
            let removal = if d != DefenseKind::Raw && e != EnhanceKind::None {
                Some(attack::removal_efficacy(
                    passthrough,
                    base,
                    &processed,
                    &campaign.frame_spec,
                )?)
            } else {
                None
            };
            let mut rows = Vec::new();
            for verifier in campaign.verifiers {
                let synth = campaign
                    .synths
                    .iter()
                    .find(|s| s.encoder_id == verifier.encoder.id)
                    .expect("checked above");
                let stolen = verifier.encoder.embed_waveform(
                    &processed,
                    &campaign.frame_spec,
                    &campaign.mel,
                )?;
                let profile = verifier
                    .profiles
                    .get(&victim.speaker_id)
                    .ok_or_else(|| Error::Config(format!("victim {} not enrolled", victim.speaker_id)))?;
                let pool = campaign
                    .contents
                    .iter()
                    .filter(|c| c.speaker_id != victim.speaker_id);
                let pool: Vec<&ContentCase> = if campaign.max_contents == 0 {
                    pool.collect()
                } else {
                    pool.take(campaign.max_contents).collect()
                };
                if pool.is_empty() {
                    return Err(Error::Precondition(format!(
                        "no non-victim content utterances for {}",
                        victim.speaker_id
                    )));
                }
                for content in pool {
                    let cloned = attack::synthesize_vc(synth, &content.wav, &stolen)?;
                    let emb = verifier.encoder.embed_waveform(
                        &cloned,
                        &campaign.frame_spec,
                        &campaign.mel,
                    )?;
                    let (verdict, score) = speaker::verify(profile, &emb, &verifier.config)?;
                    rows.push(TrialOutcome {
                        victim: victim.speaker_id.clone(),
                        sample_id: victim.sample_id.clone(),
                        content_id: content.utt_id.clone(),
                        defense: d,
                        enhancement: e,
                        verifier: verifier.encoder.id.clone(),
                        score: round6(score),
                        accepted: verdict == Verdict::Accept,
                        snr_db: round6(snr_db),
                        lsd_db: round6(lsd_db),
                        removal: removal.map(round6),
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let outcomes: Vec<TrialOutcome> = outcomes.into_iter().flatten().collect();
    let aggregates = aggregate(&outcomes);
    Ok(EvalReport {
        config_snapshot: campaign.config_snapshot.clone(),
        seed: campaign.seed,
        outcomes,
        aggregates,
    })
}

/// Group per-trial rows by (defense, enhancement, verifier) and compute the
/// cell aggregates.
pub fn aggregate(outcomes: &[TrialOutcome]) -> Vec<AggregateRow> {
    let mut cells: BTreeMap<(DefenseKind, EnhanceKind, String), Vec<&TrialOutcome>> =
        BTreeMap::new();
    for o in outcomes {
        cells
            .entry((o.defense, o.enhancement, o.verifier.clone()))
            .or_default()
            .push(o);
    }
    cells
        .into_iter()
        .map(|((defense, enhancement, verifier), rows)| {
            let n = rows.len() as f64;
            let removals: Vec<f64> = rows.iter().filter_map(|o| o.removal).collect();
            AggregateRow {
                defense,
                enhancement,
                verifier,
                trials: rows.len(),
                dsr: dsr(&rows).expect("nonempty cell"),
                mean_snr_db: rows.iter().map(|o| o.snr_db).sum::<f64>() / n,
                mean_lsd_db: rows.iter().map(|o| o.lsd_db).sum::<f64>() / n,
                mean_removal: if removals.is_empty() {
                    None
                } else {
                    Some(removals.iter().sum::<f64>() / removals.len() as f64)
                },
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Report files: trials.csv + summary.csv + config.txt.
// ---------------------------------------------------------------------------

const TRIALS_HEADER: &str =
    "victim,sample_id,content_id,defense,enhancement,verifier,score,accepted,snr_db,lsd_db,removal_efficacy";
const SUMMARY_HEADER: &str =
    "defense,enhancement,verifier,trials,dsr,mean_snr_db,mean_lsd_db,mean_removal_efficacy";

/// Round to the precision trial rows are emitted at, so aggregates computed
/// before emission match aggregates recomputed from a parsed report.
fn round6(x: f64) -> f64 {
    format!("{x:.6}").parse().expect("formatted float reparses")
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "na".into(),
    }
}

pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut trials = String::from(TRIALS_HEADER);
    trials.push('\n');
    for o in &report.outcomes {
        trials.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{},{:.6},{:.6},{}\n",
            o.victim,
            o.sample_id,
            o.content_id,
            o.defense.as_str(),
            o.enhancement.as_str(),
            o.verifier,
            o.score,
            if o.accepted { "accept" } else { "reject" },
            o.snr_db,
            o.lsd_db,
            fmt_opt(o.removal),
        ));
    }
    let mut summary = String::from(SUMMARY_HEADER);
    summary.push('\n');
    for a in &report.aggregates {
        summary.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{}\n",
            a.defense.as_str(),
            a.enhancement.as_str(),
            a.verifier,
            a.trials,
            a.dsr,
            a.mean_snr_db,
            a.mean_lsd_db,
            fmt_opt(a.mean_removal),
        ));
    }
    let config = format!("seed={}\n{}", report.seed, report.config_snapshot);
    for (name, body) in [
        ("trials.csv", &trials),
        ("summary.csv", &summary),
        ("config.txt", &config),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|source| Error::Io { path, source })?;
    }
    Ok(())
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Config(format!("report: bad {what} value {s}")))
}

fn parse_opt(s: &str, what: &str) -> Result<Option<f64>> {
    if s == "na" {
        Ok(None)
    } else {
        parse_f64(s, what).map(Some)
    }
}

/// Load a report directory, recompute every aggregate from the per-trial
/// rows and verify the stored summary matches bit-exactly (at the emitted
/// precision).
pub fn load_report(dir: &Path) -> Result<EvalReport> {
    let read = |name: &str| -> Result<String> {
        let path = dir.join(name);
        std::fs::read_to_string(&path)
            .map_err(|_| Error::MissingArtifact(path.display().to_string()))
    };
    let trials = read("trials.csv")?;
    let summary = read("summary.csv")?;
    let config = read("config.txt")?;
    let mut lines = trials.lines();
    if lines.next() != Some(TRIALS_HEADER) {
        return Err(Error::Config("report: unexpected trials header".into()));
    }
    let mut outcomes = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(Error::Config(format!("report: malformed trial row: {line}")));
        }
        outcomes.push(TrialOutcome {
            victim: f[0].into(),
            sample_id: f[1].into(),
            content_id: f[2].into(),
            defense: DefenseKind::parse(f[3])?,
            enhancement: EnhanceKind::parse(f[4])?,
            verifier: f[5].into(),
            score: parse_f64(f[6], "score")?,
            accepted: match f[7] {
                "accept" => true,
                "reject" => false,
                other => return Err(Error::Config(format!("report: bad verdict {other}"))),
            },
            snr_db: parse_f64(f[8], "snr")?,
            lsd_db: parse_f64(f[9], "lsd")?,
            removal: parse_opt(f[10], "removal")?,
        });
    }
    let (seed, config_snapshot) = match config.split_once('\n') {
        Some((first, rest)) if first.starts_with("seed=") => (
            first["seed=".len()..]
                .parse()
                .map_err(|_| Error::Config("report: bad seed line".into()))?,
            rest.to_string(),
        ),
        _ => return Err(Error::Config("report: config.txt missing seed line".into())),
    };
    // Integrity: the stored summary must equal the recomputation at emitted
    // precision.
    let aggregates = aggregate(&outcomes);
    let mut expect = String::from(SUMMARY_HEADER);
    expect.push('\n');
    for a in &aggregates {
        expect.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{}\n",
            a.defense.as_str(),
            a.enhancement.as_str(),
            a.verifier,
            a.trials,
            a.dsr,
            a.mean_snr_db,
            a.mean_lsd_db,
            fmt_opt(a.mean_removal),
        ));
    }
    if summary != expect {
        return Err(Error::Config(
            "report integrity: summary does not match recomputed aggregates".into(),
        ));
    }
    Ok(EvalReport {
        config_snapshot,
        seed,
        outcomes,
        aggregates,
    })
}

/// Write a log-magnitude spectrogram as a binary portable graymap (time on
/// x, frequency on y with bin 0 at the bottom), min-max normalized.
pub fn dump_spectrogram(wav: &Waveform, frame_spec: &FrameSpec, path: &Path) -> Result<()> {
    let mag = signal::stft(wav, frame_spec)?.magnitude();
    let log: Mat = mag.map(|v| v.max(LOG_MAG_FLOOR).log10());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &log.data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let width = log.rows; // frames
    let height = log.cols; // bins
    let mut body = format!("P5\n{width} {height}\n255\n").into_bytes();
    for y in 0..height {
        let bin = height - 1 - y;
        for frame in 0..width {
            let v = if span > 0.0 {
                ((log.get(frame, bin) - lo) / span * 255.0).round() as u8
            } else {
                0
            };
            body.push(v);
        }
    }
    std::fs::write(path, body).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
