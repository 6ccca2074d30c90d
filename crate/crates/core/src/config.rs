//! Flat key=value run configuration with dotted section prefixes. Unknown
//! keys are rejected; the effective configuration is snapshot-able so every
//! report carries its exact inputs.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::eval::{DefenseKind, EnhanceKind};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub corpus_dir: PathBuf,
    pub model_dir: PathBuf,
    pub report_dir: PathBuf,

    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub split_enroll: f64,
    pub split_victim: f64,
    pub split_content: f64,

    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,

    pub codec_dim: usize,
    pub codec_ridge: f64,
    pub griffin_lim_iters: usize,

    pub encoder_variants: Vec<String>,
    pub encoder_epochs: usize,
    pub encoder_lr: f64,

    /// tau_identity = scale x mean different-speaker profile distance.
    pub tau_identity_scale: f64,
    pub tau_snr_db: f64,
    /// Identity threshold scale for the signal-level (spectrogram) baseline.
    pub signal_tau_identity_scale: f64,
    pub signal_tau_snr_db: f64,
    /// Initial-noise scale for the signal-level baseline. Larger than the
    /// embedding-level default on purpose: a spectrogram-domain defense is
    /// dominated by an additive noise-like perturbation, which is the
    /// regime speech enhancement is designed to strip.
    pub signal_epsilon_init_scale: f64,
    /// alpha = scale x variable RMS (embedding or magnitude).
    pub alpha_scale: f64,
    pub epsilon_init_scale: f64,
    pub max_iters: usize,
    /// 0 disables the L-inf budget projection.
    pub budget_rho: f64,
    pub distance: String,
    pub protect_encoders: Vec<String>,

    pub noise_fraction: f64,
    pub over_subtraction: f64,
    pub spectral_floor: f64,
    pub kernel_width: usize,

    pub defenses: Vec<DefenseKind>,
    pub enhancements: Vec<EnhanceKind>,
    pub max_victims: usize,
    pub max_contents: usize,

    pub seed: u64,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus_dir: PathBuf::from("corpus"),
            model_dir: PathBuf::from("models"),
            report_dir: PathBuf::from("reports"),
            speakers: 16,
            utterances_per_speaker: 4,
            duration_s: 1.0,
            sample_rate: 16000,
            split_enroll: 0.5,
            split_victim: 0.25,
            split_content: 0.25,
            n_fft: 1024,
            hop: 128,
            n_mels: 128,
            fmin: 50.0,
            fmax: 7600.0,
            log_floor: 1e-10,
            codec_dim: 64,
            codec_ridge: 1e-6,
            griffin_lim_iters: 60,
            encoder_variants: vec!["mel".into(), "mfcc".into()],
            encoder_epochs: 300,
            encoder_lr: 0.05,
            tau_identity_scale: 0.7,
            tau_snr_db: 15.0,
            signal_tau_identity_scale: 0.6,
            signal_tau_snr_db: 0.0,
            signal_epsilon_init_scale: 1.2,
            alpha_scale: 2e-3,
            epsilon_init_scale: 1e-2,
            max_iters: 500,
            budget_rho: 0.0,
            distance: "l2".into(),
            protect_encoders: vec!["mel".into(), "mfcc".into()],
            noise_fraction: 0.10,
            over_subtraction: 2.0,
            spectral_floor: 0.05,
            kernel_width: 5,
            defenses: vec![
                DefenseKind::Raw,
                DefenseKind::EmbeddingLevel,
                DefenseKind::SignalLevel,
            ],
            enhancements: vec![
                EnhanceKind::None,
                EnhanceKind::SpectralMasking,
                EnhanceKind::Wiener,
                EnhanceKind::Smoothing,
            ],
            max_victims: 8,
            max_contents: 3,
            seed: 1234,
            workers: 0,
        }
    }
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

impl RunConfig {
    /// Apply one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value for {what}: {value}"));
        macro_rules! num {
            ($field:expr, $key:expr) => {
                $field = value.parse().map_err(|_| bad($key))?
            };
        }
        match key {
            "paths.corpus_dir" => self.corpus_dir = PathBuf::from(value),
            "paths.model_dir" => self.model_dir = PathBuf::from(value),
            "paths.report_dir" => self.report_dir = PathBuf::from(value),
            "corpus.speakers" => num!(self.speakers, key),
            "corpus.utterances_per_speaker" => num!(self.utterances_per_speaker, key),
            "corpus.duration_s" => num!(self.duration_s, key),
            "corpus.sample_rate" => num!(self.sample_rate, key),
            "corpus.split_enroll" => num!(self.split_enroll, key),
            "corpus.split_victim" => num!(self.split_victim, key),
            "corpus.split_content" => num!(self.split_content, key),
            "stft.n_fft" => num!(self.n_fft, key),
            "stft.hop" => num!(self.hop, key),
            "mel.n_mels" => num!(self.n_mels, key),
            "mel.fmin" => num!(self.fmin, key),
            "mel.fmax" => num!(self.fmax, key),
            "mel.log_floor" => num!(self.log_floor, key),
            "codec.dim" => num!(self.codec_dim, key),
            "codec.ridge" => num!(self.codec_ridge, key),
            "codec.griffin_lim_iters" => num!(self.griffin_lim_iters, key),
            "encoder.variants" => self.encoder_variants = parse_list(value),
            "encoder.epochs" => num!(self.encoder_epochs, key),
            "encoder.lr" => num!(self.encoder_lr, key),
            "defense.tau_identity_scale" => num!(self.tau_identity_scale, key),
            "defense.tau_snr_db" => num!(self.tau_snr_db, key),
            "defense.signal_tau_identity_scale" => num!(self.signal_tau_identity_scale, key),
            "defense.signal_tau_snr_db" => num!(self.signal_tau_snr_db, key),
            "defense.signal_epsilon_init_scale" => num!(self.signal_epsilon_init_scale, key),
            "defense.alpha_scale" => num!(self.alpha_scale, key),
            "defense.epsilon_init_scale" => num!(self.epsilon_init_scale, key),
            "defense.max_iters" => num!(self.max_iters, key),
            "defense.budget_rho" => num!(self.budget_rho, key),
            "defense.distance" => self.distance = value.to_string(),
            "defense.protect_encoders" => self.protect_encoders = parse_list(value),
            "enhance.noise_fraction" => num!(self.noise_fraction, key),
            "enhance.over_subtraction" => num!(self.over_subtraction, key),
            "enhance.spectral_floor" => num!(self.spectral_floor, key),
            "enhance.kernel_width" => num!(self.kernel_width, key),
            "grid.defenses" => {
                self.defenses = parse_list(value)
                    .iter()
                    .map(|s| DefenseKind::parse(s))
                    .collect::<Result<_>>()?
            }
            "grid.enhancements" => {
                self.enhancements = parse_list(value)
                    .iter()
                    .map(|s| EnhanceKind::parse(s))
                    .collect::<Result<_>>()?
            }
            "grid.max_victims" => num!(self.max_victims, key),
            "grid.max_contents" => num!(self.max_contents, key),
            "seed" => num!(self.seed, key),
            "workers" => num!(self.workers, key),
            other => return Err(Error::Config(format!("unknown config key: {other}"))),
        }
        Ok(())
    }

    /// Parse a config file body: `key = value` lines, `#` comments, blank
    /// lines ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value: {line}", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::Config(format!("cannot read config file {}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let sum = self.split_enroll + self.split_victim + self.split_content;
        if self.speakers < 2
            || self.utterances_per_speaker < 4
            || self.duration_s <= 0.0
            || (sum - 1.0).abs() > 1e-9
            || self.codec_dim == 0
            || self.encoder_variants.is_empty()
            || self.protect_encoders.is_empty()
            || self.defenses.is_empty()
            || self.enhancements.is_empty()
            || self.tau_identity_scale <= 0.0
            || self.signal_tau_identity_scale <= 0.0
            || self.alpha_scale <= 0.0
            || self.max_iters == 0
            || self.budget_rho < 0.0
        {
            return Err(Error::Config("invalid configuration values".into()));
        }
        crate::defense::DistanceKind::parse(&self.distance)?;
        for e in self.protect_encoders.iter().chain(&self.encoder_variants) {
            crate::speaker::FeatureRecipe::parse(e)?;
        }
        for p in &self.protect_encoders {
            if !self.encoder_variants.contains(p) {
                return Err(Error::Config(format!(
                    "protect encoder {p} is not among encoder.variants"
                )));
            }
        }
        Ok(())
    }

    /// Canonical text of the effective configuration: every key, sorted.
    pub fn snapshot(&self) -> String {
        let defenses = self
            .defenses
            .iter()
            .map(|d| d.as_str())
            .collect::<Vec<_>>()
            .join(",");
        let enhancements = self
            .enhancements
            .iter()
            .map(|e| e.as_str())
            .collect::<Vec<_>>()
            .join(",");
        let mut pairs = vec![
            ("codec.dim".to_string(), self.codec_dim.to_string()),
            ("codec.griffin_lim_iters".into(), self.griffin_lim_iters.to_string()),
            ("codec.ridge".into(), format!("{:e}", self.codec_ridge)),
            ("corpus.duration_s".into(), self.duration_s.to_string()),
            ("corpus.sample_rate".into(), self.sample_rate.to_string()),
            ("corpus.speakers".into(), self.speakers.to_string()),
            ("corpus.split_content".into(), self.split_content.to_string()),
            ("corpus.split_enroll".into(), self.split_enroll.to_string()),
            ("corpus.split_victim".into(), self.split_victim.to_string()),
            (
                "corpus.utterances_per_speaker".into(),
                self.utterances_per_speaker.to_string(),
            ),
            ("defense.alpha_scale".into(), format!("{:e}", self.alpha_scale)),
            ("defense.budget_rho".into(), format!("{:e}", self.budget_rho)),
            ("defense.distance".into(), self.distance.clone()),
            (
                "defense.epsilon_init_scale".into(),
                format!("{:e}", self.epsilon_init_scale),
            ),
            ("defense.max_iters".into(), self.max_iters.to_string()),
            (
                "defense.protect_encoders".into(),
                self.protect_encoders.join(","),
            ),
            (
                "defense.tau_identity_scale".into(),
                self.tau_identity_scale.to_string(),
            ),
            ("defense.tau_snr_db".into(), self.tau_snr_db.to_string()),
            (
                "defense.signal_tau_identity_scale".into(),
                self.signal_tau_identity_scale.to_string(),
            ),
            (
                "defense.signal_tau_snr_db".into(),
                self.signal_tau_snr_db.to_string(),
            ),
            (
                "defense.signal_epsilon_init_scale".into(),
                format!("{:e}", self.signal_epsilon_init_scale),
            ),
            ("encoder.epochs".into(), self.encoder_epochs.to_string()),
            ("encoder.lr".into(), self.encoder_lr.to_string()),
            ("encoder.variants".into(), self.encoder_variants.join(",")),
            ("enhance.kernel_width".into(), self.kernel_width.to_string()),
            ("enhance.noise_fraction".into(), self.noise_fraction.to_string()),
            (
                "enhance.over_subtraction".into(),
                self.over_subtraction.to_string(),
            ),
            ("enhance.spectral_floor".into(), self.spectral_floor.to_string()),
            ("grid.defenses".into(), defenses),
            ("grid.enhancements".into(), enhancements),
            ("grid.max_contents".into(), self.max_contents.to_string()),
            ("grid.max_victims".into(), self.max_victims.to_string()),
            ("mel.fmax".into(), self.fmax.to_string()),
            ("mel.fmin".into(), self.fmin.to_string()),
            ("mel.log_floor".into(), format!("{:e}", self.log_floor)),
            ("mel.n_mels".into(), self.n_mels.to_string()),
            ("paths.corpus_dir".into(), self.corpus_dir.display().to_string()),
            ("paths.model_dir".into(), self.model_dir.display().to_string()),
            ("paths.report_dir".into(), self.report_dir.display().to_string()),
            ("seed".into(), self.seed.to_string()),
            ("stft.hop".into(), self.hop.to_string()),
            ("stft.n_fft".into(), self.n_fft.to_string()),
            ("workers".into(), self.workers.to_string()),
        ];
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn frame_spec(&self) -> Result<crate::signal::FrameSpec> {
        crate::signal::FrameSpec::new(self.n_fft, self.hop, crate::signal::Window::HannPeriodic)
    }

    pub fn mel_config(&self) -> crate::signal::MelConfig {
        crate::signal::MelConfig {
            n_mels: self.n_mels,
            fmin: self.fmin,
            fmax: self.fmax,
            log_floor: self.log_floor,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_snapshot_roundtrips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        // Feeding the snapshot back reproduces the same snapshot.
        let mut other = RunConfig::default();
        other.apply_text(&cfg.snapshot()).unwrap();
        assert_eq!(cfg.snapshot(), other.snapshot());
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("defense.tau=3\n").unwrap_err();
        assert_eq!(err.category(), "config");
        assert!(cfg.apply_text("no_equals_sign\n").is_err());
        assert!(cfg.apply_text("corpus.speakers=abc\n").is_err());
    }

    #[test]
    fn comments_and_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\n\nseed = 99\ncorpus.speakers = 8\n")
            .unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.speakers, 8);
        cfg.apply_text("seed=100\n").unwrap();
        assert_eq!(cfg.seed, 100);
    }

    #[test]
    fn validate_rejects_inconsistencies() {
        let cfg = RunConfig {
            protect_encoders: vec!["mfcc".into()],
            encoder_variants: vec!["mel".into()],
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = RunConfig {
            split_enroll: 0.9,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = RunConfig {
            distance: "cityblock".into(),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
