//! Deterministic DSP core: WAV exchange, framing, STFT/ISTFT, log-mel
//! analysis and Griffin-Lim phase reconstruction.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Mono audio buffer with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Precondition("sample_rate must be > 0".into()));
        }
        if samples.is_empty() {
            return Err(Error::Precondition("empty waveform".into()));
        }
        if !samples.iter().all(|s| s.is_finite()) {
            return Err(Error::Numeric("non-finite sample".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    /// Periodic Hann taper; satisfies COLA at hop = n_fft/2^k for k >= 1.
    HannPeriodic,
    Rectangular,
}

/// STFT framing parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameSpec {
    pub n_fft: usize,
    pub hop: usize,
    pub window: Window,
}

impl FrameSpec {
    pub fn new(n_fft: usize, hop: usize, window: Window) -> Result<Self> {
        if n_fft == 0 || hop == 0 || hop > n_fft {
            return Err(Error::Precondition(format!(
                "frame spec requires 0 < hop <= n_fft, got n_fft={n_fft} hop={hop}"
            )));
        }
        Ok(FrameSpec { n_fft, hop, window })
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn window_values(&self) -> Vec<f64> {
        match self.window {
            Window::Rectangular => vec![1.0; self.n_fft],
            Window::HannPeriodic => (0..self.n_fft)
                .map(|k| {
                    0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / self.n_fft as f64).cos()
                })
                .collect(),
        }
    }
}

impl Default for FrameSpec {
    /// n_fft 512, hop 128, periodic Hann.
    fn default() -> Self {
        FrameSpec {
            n_fft: 512,
            hop: 128,
            window: Window::HannPeriodic,
        }
    }
}

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Frames x bins complex STFT matrix.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex<f64>>,
    pub frame_spec: FrameSpec,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    #[inline]
    pub fn get(&self, frame: usize, bin: usize) -> Complex<f64> {
        self.data[frame * self.bins + bin]
    }

    /// Per-frame magnitude matrix.
    pub fn magnitude(&self) -> Mat {
        Mat {
            rows: self.frames,
            cols: self.bins,
            data: self.data.iter().map(|c| c.norm()).collect(),
        }
    }

    /// Per-frame phase matrix.
    pub fn phase(&self) -> Mat {
        Mat {
            rows: self.frames,
            cols: self.bins,
            data: self.data.iter().map(|c| c.arg()).collect(),
        }
    }
}

/// Mel analysis parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    /// 64 bands, 50 Hz - 7600 Hz, log floor 1e-10.
    fn default() -> Self {
        MelConfig {
            n_mels: 64,
            fmin: 50.0,
            fmax: 7600.0,
            log_floor: 1e-10,
        }
    }
}

/// Frames x n_mels log-mel energies.
#[derive(Debug, Clone)]
pub struct MelFrames {
    pub mat: Mat,
    pub config: MelConfig,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, n_mels x bins, each row normalized to sum 1.
pub fn mel_filterbank(config: &MelConfig, frame_spec: &FrameSpec, sample_rate: u32) -> Result<Mat> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(config.fmin >= 0.0 && config.fmin < config.fmax && config.fmax <= nyquist) {
        return Err(Error::Precondition(format!(
            "mel band edges must satisfy 0 <= fmin < fmax <= sr/2, got fmin={} fmax={} nyquist={}",
            config.fmin, config.fmax, nyquist
        )));
    }
    if config.n_mels == 0 {
        return Err(Error::Precondition("n_mels must be >= 1".into()));
    }
    let bins = frame_spec.bins();
    let mel_lo = hz_to_mel(config.fmin);
    let mel_hi = hz_to_mel(config.fmax);
    let edges: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..bins)
        .map(|k| k as f64 * sample_rate as f64 / frame_spec.n_fft as f64)
        .collect();
    let mut fb = Mat::zeros(config.n_mels, bins);
    for m in 0..config.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut sum = 0.0;
        for (k, &f) in bin_hz.iter().enumerate() {
            let w = if f > lo && f < center {
                (f - lo) / (center - lo)
            } else if (f - center).abs() < f64::EPSILON {
                1.0
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            fb.set(m, k, w);
            sum += w;
        }
        if sum <= 0.0 {
            return Err(Error::Precondition(format!(
                "mel band {m} captures no FFT bin; increase n_fft or widen band"
            )));
        }
        for k in 0..bins {
            fb.set(m, k, fb.get(m, k) / sum);
        }
    }
    Ok(fb)
}

/// Center frequencies (Hz) of each mel band. Used by tests and band checks.
pub fn mel_band_centers(config: &MelConfig) -> Vec<f64> {
    let mel_lo = hz_to_mel(config.fmin);
    let mel_hi = hz_to_mel(config.fmax);
    (0..config.n_mels)
        .map(|m| mel_to_hz(mel_lo + (mel_hi - mel_lo) * (m + 1) as f64 / (config.n_mels + 1) as f64))
        .collect()
}

// ---------------------------------------------------------------------------
// WAV exchange
// ---------------------------------------------------------------------------

/// Read a PCM 16-bit or 32-bit float WAV; channels are averaged to mono.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    // The file exists, so a read failure while parsing means the header is
    // truncated or otherwise malformed.
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::Unsupported => {
            Error::UnsupportedWav(format!("{path:?}: unsupported wav feature"))
        }
        other => Error::MalformedWav(format!("{path:?}: {other}")),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::MalformedWav(format!("{path:?}: zero channels")));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::MalformedWav(format!("{path:?}: {e}")))?
            .into_iter()
            .map(|s| s as f64 / 32768.0)
            .collect(),
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::MalformedWav(format!("{path:?}: {e}")))?
            .into_iter()
            .map(|s| s as f64)
            .collect(),
        (fmt, bits) => {
            return Err(Error::UnsupportedWav(format!(
                "{path:?}: {fmt:?} {bits}-bit (supported: PCM 16-bit, float 32-bit)"
            )))
        }
    };
    if interleaved.is_empty() {
        return Err(Error::MalformedWav(format!("{path:?}: no samples")));
    }
    let n = interleaved.len() / channels;
    let mono: Vec<f64> = (0..n)
        .map(|i| interleaved[i * channels..(i + 1) * channels].iter().sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(mono, spec.sample_rate)
}

/// Write 16-bit mono PCM. Samples outside [-1, 1] are clipped; the count of
/// clipped samples is returned so callers can warn.
pub fn write_wav(path: &Path, wav: &Waveform) -> Result<usize> {
    if wav.samples.is_empty() {
        return Err(Error::Precondition("empty waveform".into()));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wav.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let mut clipped = 0usize;
    for &s in &wav.samples {
        let c = if s > 1.0 {
            clipped += 1;
            1.0
        } else if s < -1.0 {
            clipped += 1;
            -1.0
        } else {
            s
        };
        let q = (c * 32767.0).round() as i16;
        writer.write_sample(q).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })?;
    }
    writer.finalize().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })?;
    Ok(clipped)
}

// ---------------------------------------------------------------------------
// STFT / ISTFT
// ---------------------------------------------------------------------------

fn fft_pair(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    let mut planner = FftPlanner::new();
    (planner.plan_fft_forward(n), planner.plan_fft_inverse(n))
}

pub fn stft(wav: &Waveform, spec: &FrameSpec) -> Result<ComplexSpectrogram> {
    if wav.samples.len() < spec.n_fft {
        return Err(Error::Precondition(format!(
            "waveform length {} shorter than n_fft {}",
            wav.samples.len(),
            spec.n_fft
        )));
    }
    let window = spec.window_values();
    let frames = 1 + (wav.samples.len() - spec.n_fft) / spec.hop;
    let bins = spec.bins();
    let (fft, _) = fft_pair(spec.n_fft);
    let mut data = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); spec.n_fft];
    for t in 0..frames {
        let start = t * spec.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(wav.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(ComplexSpectrogram {
        frames,
        bins,
        data,
        frame_spec: *spec,
        sample_rate: wav.sample_rate,
    })
}

/// Least-squares inverse STFT (weighted overlap-add). Errors when the
/// window/hop pair violates COLA on the fully-overlapped interior.
pub fn istft(spec: &ComplexSpectrogram, frame_spec: &FrameSpec) -> Result<Waveform> {
    let n_fft = frame_spec.n_fft;
    let hop = frame_spec.hop;
    if spec.bins != frame_spec.bins() {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram bins {} vs frame spec bins {}",
            spec.bins,
            frame_spec.bins()
        )));
    }
    let window = frame_spec.window_values();
    check_cola(&window, hop)?;
    let frames = spec.frames;
    let len = (frames - 1) * hop + n_fft;
    let (_, ifft) = fft_pair(n_fft);
    let mut num = vec![0.0f64; len];
    let mut den = vec![0.0f64; len];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..frames {
        // Rebuild the full spectrum from the one-sided half.
        for (k, b) in buf.iter_mut().enumerate() {
            *b = if k < spec.bins {
                spec.get(t, k)
            } else {
                spec.get(t, n_fft - k).conj()
            };
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for i in 0..n_fft {
            let x = buf[i].re / n_fft as f64;
            num[start + i] += window[i] * x;
            den[start + i] += window[i] * window[i];
        }
    }
    // Relative floor on the squared-window overlap: dividing by a
    // near-zero overlap (first/last few samples) amplifies any spectral
    // perturbation into edge spikes, so ill-covered samples fade out
    // instead.
    let den_max = den.iter().cloned().fold(0.0f64, f64::max);
    let floor = 1e-2 * den_max;
    let samples: Vec<f64> = num
        .iter()
        .zip(&den)
        .map(|(&n, &d)| if den_max > 0.0 { n / d.max(floor) } else { 0.0 })
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// COLA check on the fully-overlapped interior of the squared-window
/// overlap-add. hop = n_fft with Hann fails here.
fn check_cola(window: &[f64], hop: usize) -> Result<()> {
    let n_fft = window.len();
    let frames = 2 * n_fft / hop + 4;
    let len = (frames - 1) * hop + n_fft;
    let mut den = vec![0.0f64; len];
    for t in 0..frames {
        for (i, &w) in window.iter().enumerate() {
            den[t * hop + i] += w * w;
        }
    }
    let interior = &den[n_fft..len - n_fft];
    let min = interior.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = interior.iter().cloned().fold(0.0f64, f64::max);
    if min < 1e-6 * max.max(1e-12) {
        return Err(Error::Precondition(format!(
            "window/hop pair violates COLA (interior min {min:.3e}, max {max:.3e})"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Log-mel analysis
// ---------------------------------------------------------------------------

pub fn log_mel(spec: &ComplexSpectrogram, config: &MelConfig) -> Result<MelFrames> {
    let fb = mel_filterbank(config, &spec.frame_spec, spec.sample_rate)?;
    let power = Mat {
        rows: spec.frames,
        cols: spec.bins,
        data: spec.data.iter().map(|c| c.norm_sqr()).collect(),
    };
    Ok(log_mel_from_power(&power, &fb, config))
}

/// Log-mel from a precomputed power matrix (frames x bins) and filterbank.
pub fn log_mel_from_power(power: &Mat, filterbank: &Mat, config: &MelConfig) -> MelFrames {
    let mel_power = power.matmul(&filterbank.transpose());
    MelFrames {
        mat: mel_power.map(|v| v.max(config.log_floor).ln()),
        config: *config,
    }
}

// ---------------------------------------------------------------------------
// Griffin-Lim
// ---------------------------------------------------------------------------

/// Iterative phase reconstruction from magnitude frames. The initial phase
/// is drawn from a seeded generator so results are reproducible.
pub fn griffin_lim(
    magnitudes: &Mat,
    frame_spec: &FrameSpec,
    sample_rate: u32,
    iters: usize,
    seed: u64,
) -> Result<Waveform> {
    if iters == 0 {
        return Err(Error::Precondition("griffin_lim requires iters >= 1".into()));
    }
    if magnitudes.data.iter().any(|&m| m < 0.0) {
        return Err(Error::Precondition("negative magnitude input".into()));
    }
    if magnitudes.cols != frame_spec.bins() {
        return Err(Error::ShapeMismatch(format!(
            "magnitude bins {} vs frame spec bins {}",
            magnitudes.cols,
            frame_spec.bins()
        )));
    }
    let all_zero = magnitudes.data.iter().all(|&m| m == 0.0);
    // Small seeded phase jitter around zero: keeps runs reproducible while
    // starting much closer to a consistent phase field than uniform [0, 2pi).
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phase: Vec<f64> = (0..magnitudes.data.len())
        .map(|_| rng.gen_range(-0.5..0.5))
        .collect();
    let mut wav = None;
    for _ in 0..iters {
        let spec = ComplexSpectrogram {
            frames: magnitudes.rows,
            bins: magnitudes.cols,
            data: magnitudes
                .data
                .iter()
                .zip(&phase)
                .map(|(&m, &p)| Complex::from_polar(m, p))
                .collect(),
            frame_spec: *frame_spec,
            sample_rate,
        };
        let x = istft(&spec, frame_spec)?;
        let re = stft(&x, frame_spec)?;
        phase = re.data.iter().map(|c| c.arg()).collect();
        wav = Some(x);
    }
    let mut wav = wav.expect("iters >= 1");
    if all_zero {
        wav.samples.iter_mut().for_each(|s| *s = 0.0);
    }
    Ok(wav)
}

/// Relative Frobenius distance between |stft(x)| and a target magnitude.
pub fn spectral_convergence(x: &Waveform, target: &Mat, frame_spec: &FrameSpec) -> Result<f64> {
    let mag = stft(x, frame_spec)?.magnitude();
    if mag.rows != target.rows || mag.cols != target.cols {
        return Err(Error::ShapeMismatch("spectral_convergence frames".into()));
    }
    let diff: f64 = mag
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm = target.frobenius_norm();
    if norm == 0.0 {
        return Ok(if diff == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(diff / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, sr: u32, n: usize, amp: f64) -> Waveform {
        Waveform::new(
            (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / sr as f64).sin()).collect(),
            sr,
        )
        .unwrap()
    }

    fn seeded_noise(seed: u64, n: usize, sr: u32) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), sr).unwrap()
    }

    #[test]
    fn wav_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.wav");
        let wav = seeded_noise(7, 4000, 16000);
        let clipped = write_wav(&path, &wav).unwrap();
        assert_eq!(clipped, 0);
        let back = read_wav(&path).unwrap();
        let max_err = wav
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1.0 / 32768.0 + 1e-12, "max_err={max_err}");
    }

    #[test]
    fn wav_16bit_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(16384i16).unwrap();
        w.finalize().unwrap();
        let wav = read_wav(&path).unwrap();
        assert!((wav.samples[0] - 0.5).abs() <= 1.0 / 32768.0);
    }

    #[test]
    fn wav_stereo_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(32767i16).unwrap(); // left ~1.0
        w.write_sample(0i16).unwrap(); // right 0.0
        w.finalize().unwrap();
        let wav = read_wav(&path).unwrap();
        assert!((wav.samples[0] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn wav_truncated_header_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"RIFF\x04\x00\x00\x00WA").unwrap();
        match read_wav(&path) {
            Err(Error::MalformedWav(_)) => {}
            other => panic!("expected malformed header error, got {other:?}"),
        }
    }

    #[test]
    fn wav_missing_file_distinct() {
        match read_wav(Path::new("/nonexistent/nope.wav")) {
            Err(Error::MissingFile(_)) => {}
            other => panic!("expected missing file error, got {other:?}"),
        }
    }

    #[test]
    fn wav_clipping_counted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wav");
        let wav = Waveform::new(vec![0.0, 1.5, -2.0], 16000).unwrap();
        assert_eq!(write_wav(&path, &wav).unwrap(), 2);
        let back = read_wav(&path).unwrap();
        assert!((back.samples[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn wav_empty_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let wav = Waveform {
            samples: vec![],
            sample_rate: 16000,
        };
        assert!(matches!(
            write_wav(&dir.path().join("e.wav"), &wav),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn stft_zero_input_zero_output() {
        let wav = Waveform::new(vec![0.0; 2048], 16000).unwrap();
        let s = stft(&wav, &FrameSpec::default()).unwrap();
        assert!(s.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn stft_frame_count() {
        let spec = FrameSpec::default();
        let wav = seeded_noise(3, 4096, 16000);
        let s = stft(&wav, &spec).unwrap();
        assert_eq!(s.frames, 1 + (4096 - 512) / 128);
        assert_eq!(s.bins, 257);
    }

    #[test]
    fn stft_sine_energy_concentrates_in_bin() {
        // Bin-center frequency, rectangular window: energy lands in bin k.
        let spec = FrameSpec::new(512, 512, Window::Rectangular).unwrap();
        let sr = 16000;
        let k = 20;
        let freq = k as f64 * sr as f64 / 512.0;
        let wav = sine(freq, sr, 512, 0.8);
        let s = stft(&wav, &spec).unwrap();
        // One-sided energy accounting: double the interior bins.
        let total: f64 = (0..s.bins)
            .map(|b| {
                let e = s.get(0, b).norm_sqr();
                if b == 0 || b == s.bins - 1 {
                    e
                } else {
                    2.0 * e
                }
            })
            .sum();
        let at_k = 2.0 * s.get(0, k).norm_sqr();
        assert!(at_k / total > 0.99, "ratio={}", at_k / total);

        // Independent direct-DFT oracle for bin k.
        let mut re = 0.0;
        let mut im = 0.0;
        for (n, &x) in wav.samples.iter().enumerate() {
            let ang = -2.0 * PI * k as f64 * n as f64 / 512.0;
            re += x * ang.cos();
            im += x * ang.sin();
        }
        let oracle = Complex::new(re, im);
        assert!((oracle - s.get(0, k)).norm() < 1e-6 * oracle.norm().max(1.0));
    }

    #[test]
    fn stft_parseval_rectangular() {
        let spec = FrameSpec::new(512, 512, Window::Rectangular).unwrap();
        let wav = seeded_noise(5, 512, 16000);
        let s = stft(&wav, &spec).unwrap();
        let freq_energy: f64 = (0..s.bins)
            .map(|b| {
                let e = s.get(0, b).norm_sqr();
                if b == 0 || b == s.bins - 1 {
                    e
                } else {
                    2.0 * e
                }
            })
            .sum::<f64>()
            / 512.0;
        let time_energy: f64 = wav.samples.iter().map(|x| x * x).sum();
        assert!((freq_energy - time_energy).abs() / time_energy < 1e-6);
    }

    #[test]
    fn stft_impulse_flat_magnitude() {
        let mut samples = vec![0.0; 512];
        samples[0] = 1.0;
        let wav = Waveform::new(samples, 16000).unwrap();
        let spec = FrameSpec::new(512, 512, Window::Rectangular).unwrap();
        let s = stft(&wav, &spec).unwrap();
        for b in 0..s.bins {
            assert!((s.get(0, b).norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn stft_linearity() {
        let spec = FrameSpec::default();
        let x = seeded_noise(11, 2048, 16000);
        let y = seeded_noise(12, 2048, 16000);
        let combo = Waveform::new(
            x.samples
                .iter()
                .zip(&y.samples)
                .map(|(a, b)| 2.0 * a - 0.5 * b)
                .collect(),
            16000,
        )
        .unwrap();
        let sx = stft(&x, &spec).unwrap();
        let sy = stft(&y, &spec).unwrap();
        let sc = stft(&combo, &spec).unwrap();
        for i in 0..sc.data.len() {
            let expect = 2.0 * sx.data[i] - 0.5 * sy.data[i];
            assert!((sc.data[i] - expect).norm() < 1e-9);
        }
    }

    #[test]
    fn istft_round_trip_interior() {
        let spec = FrameSpec::default();
        for seed in 0..5u64 {
            let wav = seeded_noise(seed, 4096, 16000);
            let s = stft(&wav, &spec).unwrap();
            let back = istft(&s, &spec).unwrap();
            for i in spec.n_fft..(s.frames - 1) * spec.hop {
                assert!(
                    (wav.samples[i] - back.samples[i]).abs() <= 1e-6,
                    "seed {seed} sample {i}"
                );
            }
        }
    }

    #[test]
    fn istft_zero_spec_zero_wave() {
        let spec = FrameSpec::default();
        let zero = ComplexSpectrogram {
            frames: 10,
            bins: spec.bins(),
            data: vec![Complex::new(0.0, 0.0); 10 * spec.bins()],
            frame_spec: spec,
            sample_rate: 16000,
        };
        let wav = istft(&zero, &spec).unwrap();
        assert!(wav.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn istft_non_cola_rejected() {
        let spec = FrameSpec::new(512, 512, Window::HannPeriodic).unwrap();
        let wav = seeded_noise(1, 2048, 16000);
        let s = stft(&wav, &spec).unwrap();
        assert!(matches!(istft(&s, &spec), Err(Error::Precondition(_))));
    }

    #[test]
    fn mel_filterbank_rows_sum_to_one() {
        let fb = mel_filterbank(&MelConfig::default(), &FrameSpec::default(), 16000).unwrap();
        for m in 0..fb.rows {
            let sum: f64 = fb.row(m).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "band {m} sum {sum}");
            assert!(fb.row(m).iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn mel_invalid_edges_rejected() {
        let bad = MelConfig {
            fmax: 9000.0,
            ..MelConfig::default()
        };
        assert!(mel_filterbank(&bad, &FrameSpec::default(), 16000).is_err());
    }

    #[test]
    fn log_mel_zero_input_is_log_floor() {
        let wav = Waveform::new(vec![0.0; 2048], 16000).unwrap();
        let s = stft(&wav, &FrameSpec::default()).unwrap();
        let mel = log_mel(&s, &MelConfig::default()).unwrap();
        let want = (1e-10f64).ln();
        assert!(mel.mat.data.iter().all(|&v| (v - want).abs() < 1e-12));
    }

    #[test]
    fn log_mel_sine_hits_expected_band() {
        let config = MelConfig::default();
        let centers = mel_band_centers(&config);
        let sr = 16000;
        for &j in &[5usize, 20, 40, 60] {
            let wav = sine(centers[j], sr, 4096, 0.8);
            let s = stft(&wav, &FrameSpec::default()).unwrap();
            let mel = log_mel(&s, &config).unwrap();
            // Mid-frame band argmax must match the band whose center we hit.
            let row = mel.mat.row(mel.mat.rows / 2);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert!(
                (argmax as i64 - j as i64).abs() <= 1,
                "band {j} argmax {argmax}"
            );
        }
    }

    #[test]
    fn griffin_lim_converges_on_sine_mixture() {
        let spec = FrameSpec::default();
        let sr = 16000;
        let n = 4096;
        let wav = Waveform::new(
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr as f64;
                    0.4 * (2.0 * PI * kfreq(8) * t).sin() + 0.3 * (2.0 * PI * kfreq(23) * t).sin()
                })
                .collect(),
            sr,
        )
        .unwrap();
        let mag = stft(&wav, &spec).unwrap().magnitude();
        let out60 = griffin_lim(&mag, &spec, sr, 60, 99).unwrap();
        let err60 = spectral_convergence(&out60, &mag, &spec).unwrap();
        assert!(err60 < 0.1, "err60={err60}");
        let out1 = griffin_lim(&mag, &spec, sr, 1, 99).unwrap();
        let err1 = spectral_convergence(&out1, &mag, &spec).unwrap();
        assert!(err1 >= err60 - 1e-6);
        fn kfreq(k: usize) -> f64 {
            k as f64 * 16000.0 / 512.0
        }
    }

    #[test]
    fn griffin_lim_monotone_error() {
        let spec = FrameSpec::default();
        let wav = seeded_noise(17, 4096, 16000);
        let mag = stft(&wav, &spec).unwrap().magnitude();
        let mut prev = f64::INFINITY;
        for iters in [1usize, 5, 15, 40] {
            let out = griffin_lim(&mag, &spec, 16000, iters, 4).unwrap();
            let err = spectral_convergence(&out, &mag, &spec).unwrap();
            assert!(err <= prev + 1e-6, "iters={iters} err={err} prev={prev}");
            prev = err;
        }
    }

    #[test]
    fn griffin_lim_zero_magnitudes() {
        let spec = FrameSpec::default();
        let mag = Mat::zeros(8, spec.bins());
        let wav = griffin_lim(&mag, &spec, 16000, 5, 0).unwrap();
        assert!(wav.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn griffin_lim_negative_magnitude_rejected() {
        let spec = FrameSpec::default();
        let mut mag = Mat::zeros(4, spec.bins());
        mag.set(0, 0, -1.0);
        assert!(griffin_lim(&mag, &spec, 16000, 5, 0).is_err());
    }

    #[test]
    fn griffin_lim_deterministic() {
        let spec = FrameSpec::default();
        let wav = seeded_noise(21, 4096, 16000);
        let mag = stft(&wav, &spec).unwrap().magnitude();
        let a = griffin_lim(&mag, &spec, 16000, 10, 7).unwrap();
        let b = griffin_lim(&mag, &spec, 16000, 10, 7).unwrap();
        assert_eq!(a.samples, b.samples);
    }
}
