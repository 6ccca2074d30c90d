//! Data layer: deterministic synthetic multi-speaker corpus (source-filter
//! synthesis), real WAV ingestion, manifests and splits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::signal::{self, Waveform};

/// Source-filter parameters defining one synthetic speaker identity.
#[derive(Debug, Clone)]
pub struct SpeakerSpec {
    pub id: String,
    pub f0_hz: f64,
    pub formants_hz: [f64; 3],
    pub bandwidths_hz: [f64; 3],
    pub tilt_db_per_octave: f64,
    pub jitter: f64,
}

impl SpeakerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(70.0..=400.0).contains(&self.f0_hz) {
            return Err(Error::Precondition(format!(
                "f0 {} outside [70, 400] Hz",
                self.f0_hz
            )));
        }
        if !(self.formants_hz[0] < self.formants_hz[1] && self.formants_hz[1] < self.formants_hz[2])
        {
            return Err(Error::Precondition("formants must be strictly increasing".into()));
        }
        if !(0.0..=0.05).contains(&self.jitter) {
            return Err(Error::Precondition("jitter outside [0, 0.05]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Enroll,
    Victim,
    Content,
    Unassigned,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Enroll => "enroll",
            Role::Victim => "victim",
            Role::Content => "content",
            Role::Unassigned => "unassigned",
        }
    }

    fn parse(s: &str) -> Result<Role> {
        match s {
            "enroll" => Ok(Role::Enroll),
            "victim" => Ok(Role::Victim),
            "content" => Ok(Role::Content),
            "unassigned" => Ok(Role::Unassigned),
            other => Err(Error::Config(format!("unknown role {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestRecord {
    pub utt_id: String,
    pub speaker_id: String,
    pub path: PathBuf,
    pub duration_s: f64,
    pub split: String,
    pub role: Role,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn speakers(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for r in &self.records {
            if !ids.contains(&r.speaker_id) {
                ids.push(r.speaker_id.clone());
            }
        }
        ids
    }

    pub fn by_speaker(&self) -> BTreeMap<String, Vec<&ManifestRecord>> {
        let mut map: BTreeMap<String, Vec<&ManifestRecord>> = BTreeMap::new();
        for r in &self.records {
            map.entry(r.speaker_id.clone()).or_default().push(r);
        }
        map
    }

    pub fn with_role(&self, role: Role) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.role == role).collect()
    }

    /// Rejects duplicate utterance ids and dangling paths.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.utt_id) {
                return Err(Error::Precondition(format!(
                    "duplicate utterance id {}",
                    r.utt_id
                )));
            }
            if !r.path.exists() {
                return Err(Error::Precondition(format!(
                    "dangling path {} for utterance {}",
                    r.path.display(),
                    r.utt_id
                )));
            }
            if r.duration_s <= 0.0 {
                return Err(Error::Precondition(format!(
                    "non-positive duration for {}",
                    r.utt_id
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "id={} speaker={} path={} duration={:.6} split={} role={}\n",
                r.utt_id,
                r.speaker_id,
                r.path.display(),
                r.duration_s,
                r.split,
                r.role.as_str()
            ));
        }
        std::fs::write(path, out).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut records = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
            for token in line.split_whitespace() {
                let (k, v) = token.split_once('=').ok_or_else(|| {
                    Error::Config(format!("manifest line {}: bad token {token}", ln + 1))
                })?;
                fields.insert(k, v);
            }
            let get = |k: &str| -> Result<&str> {
                fields
                    .get(k)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("manifest line {}: missing {k}", ln + 1)))
            };
            records.push(ManifestRecord {
                utt_id: get("id")?.to_string(),
                speaker_id: get("speaker")?.to_string(),
                path: PathBuf::from(get("path")?),
                duration_s: get("duration")?
                    .parse()
                    .map_err(|_| Error::Config(format!("manifest line {}: bad duration", ln + 1)))?,
                split: get("split")?.to_string(),
                role: Role::parse(get("role")?)?,
            });
        }
        Ok(Manifest { records })
    }
}

// ---------------------------------------------------------------------------
// Synthetic speaker synthesis
// ---------------------------------------------------------------------------

/// Fold a label into the master seed (FNV-1a) so every stage draws from an
/// independent, reproducible stream.
pub fn derive_seed(master_seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    master_seed ^ h
}

fn derive_rng(master_seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master_seed, label))
}

/// Draw a speaker parameter set from the master seed.
pub fn speaker_spec(master_seed: u64, index: usize) -> SpeakerSpec {
    let id = format!("spk{index:02}");
    let mut rng = derive_rng(master_seed, &format!("speaker/{id}"));
    let f0 = rng.gen_range(90.0..300.0);
    let f1 = rng.gen_range(300.0..900.0);
    let f2 = rng.gen_range(f1 + 300.0..2300.0);
    let f3 = rng.gen_range(f2 + 300.0..3400.0);
    SpeakerSpec {
        id,
        f0_hz: f0,
        formants_hz: [f1, f2, f3],
        bandwidths_hz: [
            rng.gen_range(50.0..120.0),
            rng.gen_range(70.0..160.0),
            rng.gen_range(100.0..220.0),
        ],
        tilt_db_per_octave: rng.gen_range(-12.0..-6.0),
        jitter: rng.gen_range(0.001..0.02),
    }
}

/// Parallel-formant gain at frequency f: sum of Lorentzian resonances.
fn formant_gain(spec: &SpeakerSpec, f: f64) -> f64 {
    let mut g = 0.01;
    for (i, &fc) in spec.formants_hz.iter().enumerate() {
        let hb = spec.bandwidths_hz[i] / 2.0;
        g += (hb * hb) / ((f - fc) * (f - fc) + hb * hb);
    }
    g
}

/// One vowel-like utterance: jittered harmonic source with a seeded f0
/// contour, shaped by the speaker's formants and spectral tilt, under a
/// smooth amplitude envelope with syllabic modulation.
pub fn synth_utterance(
    spec: &SpeakerSpec,
    duration_s: f64,
    sample_rate: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Waveform> {
    spec.validate()?;
    let sr = sample_rate as f64;
    let n = (duration_s * sr) as usize;
    if n == 0 {
        return Err(Error::Precondition("zero-length utterance".into()));
    }
    let nyquist = sr / 2.0;

    // f0 contour: piecewise-linear between control points every 250 ms.
    let n_ctrl = (duration_s / 0.25).ceil() as usize + 2;
    let ctrl: Vec<f64> = (0..n_ctrl)
        .map(|_| spec.f0_hz * (1.0 + rng.gen_range(-0.08..0.08)))
        .collect();
    let ctrl_hop = 0.25 * sr;

    // Harmonic amplitudes at the nominal f0 (formants + tilt).
    let n_harm = ((nyquist * 0.95) / spec.f0_hz).floor() as usize;
    if n_harm == 0 {
        return Err(Error::Precondition("f0 above usable band".into()));
    }
    let amps: Vec<f64> = (1..=n_harm)
        .map(|k| {
            let f = spec.f0_hz * k as f64;
            let tilt = 10f64.powf(spec.tilt_db_per_octave * (k as f64).log2() / 20.0);
            formant_gain(spec, f) * tilt
        })
        .collect();

    // Syllabic amplitude modulation (2-5 Hz) plus an overall raised-cosine
    // envelope, so every utterance has genuinely quiet frames for the
    // enhancement noise estimators to latch onto.
    let syll_rate = rng.gen_range(2.0..5.0);
    let syll_phase = rng.gen_range(0.0..std::f64::consts::TAU);

    // Jitter: per-10ms multiplicative f0 noise.
    let seg = (0.01 * sr) as usize;
    let mut phases = vec![0.0f64; n_harm];
    let mut samples = Vec::with_capacity(n);
    let mut jitter_mult = 1.0;
    for i in 0..n {
        if i % seg == 0 {
            let z: f64 = StandardNormal.sample(rng);
            jitter_mult = 1.0 + spec.jitter * z;
        }
        let ci = (i as f64 / ctrl_hop) as usize;
        let frac = i as f64 / ctrl_hop - ci as f64;
        let f0 = (ctrl[ci] * (1.0 - frac) + ctrl[(ci + 1).min(n_ctrl - 1)] * frac) * jitter_mult;
        let mut s = 0.0;
        for (k, phase) in phases.iter_mut().enumerate() {
            let f = f0 * (k + 1) as f64;
            if f < nyquist * 0.95 {
                *phase += std::f64::consts::TAU * f / sr;
                s += amps[k] * phase.sin();
            }
        }
        let t = i as f64 / sr;
        let env = (std::f64::consts::PI * i as f64 / n as f64).sin().powi(2);
        let syll = 0.35 + 0.65 * (0.5 + 0.5 * (std::f64::consts::TAU * syll_rate * t + syll_phase).sin());
        samples.push(s * env * syll);
    }
    let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 0.0 {
        let scale = 0.3 / peak;
        samples.iter_mut().for_each(|v| *v *= scale);
    }
    Waveform::new(samples, sample_rate)
}

/// Generate the synthetic corpus under `dir`: one WAV per utterance plus a
/// manifest. Fully deterministic given the seed.
pub fn generate_corpus(
    dir: &Path,
    seed: u64,
    n_speakers: usize,
    utts_per_speaker: usize,
    duration_s: f64,
    sample_rate: u32,
) -> Result<Manifest> {
    if n_speakers < 2 || utts_per_speaker < 1 {
        return Err(Error::Precondition(
            "need n_speakers >= 2 and utts_per_speaker >= 1".into(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for s in 0..n_speakers {
        let spec = speaker_spec(seed, s);
        let spk_dir = dir.join(&spec.id);
        std::fs::create_dir_all(&spk_dir).map_err(|source| Error::Io {
            path: spk_dir.clone(),
            source,
        })?;
        for u in 0..utts_per_speaker {
            let utt_id = format!("{}_utt{u:02}", spec.id);
            let mut rng = derive_rng(seed, &format!("utt/{utt_id}"));
            let wav = synth_utterance(&spec, duration_s, sample_rate, &mut rng)?;
            let path = spk_dir.join(format!("utt{u:02}.wav"));
            signal::write_wav(&path, &wav)?;
            records.push(ManifestRecord {
                utt_id,
                speaker_id: spec.id.clone(),
                path,
                duration_s: wav.duration_s(),
                split: "all".into(),
                role: Role::Unassigned,
            });
        }
    }
    let manifest = Manifest { records };
    manifest.save(&dir.join("manifest.txt"))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Ingestion of real WAV directories
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeakerIdRule {
    /// Speaker id = name of the file's parent directory.
    ParentDir,
    /// Speaker id = filename up to the first '_'.
    FilenamePrefix,
}

pub struct IngestOutcome {
    pub manifest: Manifest,
    pub skipped: Vec<PathBuf>,
}

pub fn ingest_directory(dir: &Path, rule: SpeakerIdRule) -> Result<IngestOutcome> {
    if !dir.is_dir() {
        return Err(Error::Precondition(format!(
            "{} is not a readable directory",
            dir.display()
        )));
    }
    let mut wavs: Vec<PathBuf> = Vec::new();
    let mut skipped = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&d)
            .map_err(|source| Error::Io {
                path: d.clone(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().and_then(|e| e.to_str()) == Some("wav") {
                wavs.push(p);
            } else {
                skipped.push(p);
            }
        }
    }
    wavs.sort();
    let mut records = Vec::new();
    for p in wavs {
        let wav = match signal::read_wav(&p) {
            Ok(w) => w,
            Err(_) => {
                skipped.push(p);
                continue;
            }
        };
        let stem = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("utt")
            .to_string();
        let speaker_id = match rule {
            SpeakerIdRule::ParentDir => p
                .parent()
                .and_then(|d| d.file_name())
                .and_then(|s| s.to_str())
                .unwrap_or("unknown")
                .to_string(),
            SpeakerIdRule::FilenamePrefix => {
                stem.split('_').next().unwrap_or("unknown").to_string()
            }
        };
        records.push(ManifestRecord {
            utt_id: format!("{speaker_id}_{stem}"),
            speaker_id,
            path: p,
            duration_s: wav.duration_s(),
            split: "all".into(),
            role: Role::Unassigned,
        });
    }
    if records.is_empty() {
        return Err(Error::Precondition(format!(
            "no usable WAV files under {}",
            dir.display()
        )));
    }
    Ok(IngestOutcome {
        manifest: Manifest { records },
        skipped,
    })
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Split per speaker into enroll/victim/content role pools using the given
/// ratios. Every speaker appears in every split.
pub fn split(manifest: &Manifest, ratios: [f64; 3], seed: u64) -> Result<Manifest> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| r <= 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!(
            "ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let mut records = Vec::new();
    for (speaker, utts) in manifest.by_speaker() {
        let n = utts.len();
        let n_enroll = (ratios[0] * n as f64).round().max(1.0) as usize;
        let n_victim = (ratios[1] * n as f64).round().max(1.0) as usize;
        if n_enroll + n_victim >= n {
            return Err(Error::Precondition(format!(
                "speaker {speaker} has too few utterances ({n}) for the split"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = derive_rng(seed, &format!("split/{speaker}"));
        // Fisher-Yates with the derived generator.
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for (rank, &idx) in order.iter().enumerate() {
            let (split_tag, role) = if rank < n_enroll {
                ("train", Role::Enroll)
            } else if rank < n_enroll + n_victim {
                ("dev", Role::Victim)
            } else {
                ("eval", Role::Content)
            };
            let mut rec = utts[idx].clone();
            rec.split = split_tag.to_string();
            rec.role = role;
            records.push(rec);
        }
    }
    Ok(Manifest { records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let m1 = generate_corpus(&dir.path().join("a"), 11, 4, 3, 0.5, 16000).unwrap();
        assert_eq!(m1.records.len(), 12);
        m1.validate().unwrap();
        let m2 = generate_corpus(&dir.path().join("b"), 11, 4, 3, 0.5, 16000).unwrap();
        for (r1, r2) in m1.records.iter().zip(&m2.records) {
            assert_eq!(
                std::fs::read(&r1.path).unwrap(),
                std::fs::read(&r2.path).unwrap(),
                "utterance {} differs across identical seeds",
                r1.utt_id
            );
        }
    }

    #[test]
    fn corpus_invalid_counts_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_corpus(dir.path(), 1, 1, 3, 0.5, 16000).is_err());
        assert!(generate_corpus(dir.path(), 1, 4, 0, 0.5, 16000).is_err());
    }

    #[test]
    fn split_ratios_per_speaker() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(dir.path(), 7, 3, 10, 0.3, 16000).unwrap();
        let s = split(&m, [0.5, 0.2, 0.3], 5).unwrap();
        for (_, utts) in s.by_speaker() {
            let enroll = utts.iter().filter(|r| r.role == Role::Enroll).count();
            let victim = utts.iter().filter(|r| r.role == Role::Victim).count();
            let content = utts.iter().filter(|r| r.role == Role::Content).count();
            assert_eq!((enroll, victim, content), (5, 2, 3));
        }
        let s2 = split(&m, [0.5, 0.2, 0.3], 5).unwrap();
        for (a, b) in s.records.iter().zip(&s2.records) {
            assert_eq!(a.utt_id, b.utt_id);
            assert_eq!(a.role, b.role);
        }
    }

    #[test]
    fn split_insufficient_utts_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(dir.path(), 7, 3, 1, 0.3, 16000).unwrap();
        assert!(split(&m, [0.4, 0.3, 0.3], 5).is_err());
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(dir.path(), 3, 2, 2, 0.3, 16000).unwrap();
        let path = dir.path().join("m2.txt");
        m.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back.records.len(), m.records.len());
        back.validate().unwrap();

        let mut dup = back.clone();
        dup.records.push(dup.records[0].clone());
        assert!(dup.validate().is_err());

        let mut dangling = back.clone();
        dangling.records[0].path = PathBuf::from("/nonexistent/x.wav");
        assert!(dangling.validate().is_err());
    }

    #[test]
    fn ingest_mixed_directory() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(dir.path(), 9, 2, 2, 0.3, 16000).unwrap();
        std::fs::write(dir.path().join("spk00/readme.txt"), "not audio").unwrap();
        let out = ingest_directory(dir.path(), SpeakerIdRule::ParentDir).unwrap();
        assert_eq!(out.manifest.records.len(), m.records.len());
        assert!(out
            .skipped
            .iter()
            .any(|p| p.file_name().unwrap() == "readme.txt"));
        assert!(out.manifest.records.iter().any(|r| r.speaker_id == "spk01"));
    }

    #[test]
    fn ingest_empty_directory_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ingest_directory(dir.path(), SpeakerIdRule::ParentDir).is_err());
    }

    #[test]
    fn utterances_are_distinct_within_speaker() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(dir.path(), 13, 2, 2, 0.3, 16000).unwrap();
        let a = signal::read_wav(&m.records[0].path).unwrap();
        let b = signal::read_wav(&m.records[1].path).unwrap();
        assert_ne!(a.samples, b.samples);
    }
}
