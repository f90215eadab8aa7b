//! Waveform-level signal processing: log-mel feature extraction,
//! SNR-controlled noise mixing, babble synthesis, and SpecAugment.
//!
//! All functions are pure given their inputs and an explicit RNG; none touch
//! global state.

use ndarray::Array2;
use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{AvsrError, Result};

pub mod wav;

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_RATE: u32 = 100;
pub const NUM_MELS: usize = 80;

/// Mono 16 kHz waveform.
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(AvsrError::InvalidConfig("non-finite sample".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate: SAMPLE_RATE,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean square power.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }
}

/// Time-major matrix of log-mel frames at 100 Hz.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    /// `T x 80`.
    pub frames: Array2<f64>,
    pub frame_rate: u32,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }
}

/// Log-mel front-end configuration.
#[derive(Debug, Clone)]
pub struct MelConfig {
    pub window_ms: usize,
    pub stride_ms: usize,
    pub num_mels: usize,
    pub fft_size: usize,
    pub mel_low_hz: f64,
    pub mel_high_hz: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            window_ms: 25,
            stride_ms: 10,
            num_mels: NUM_MELS,
            fft_size: 512,
            mel_low_hz: 125.0,
            mel_high_hz: 7500.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn window_samples(&self) -> usize {
        self.window_ms * SAMPLE_RATE as usize / 1000
    }

    pub fn stride_samples(&self) -> usize {
        self.stride_ms * SAMPLE_RATE as usize / 1000
    }

    fn validate(&self) -> Result<()> {
        if self.fft_size < self.window_samples() {
            return Err(AvsrError::InvalidConfig(
                "fft_size smaller than window".into(),
            ));
        }
        if !(0.0 <= self.mel_low_hz
            && self.mel_low_hz < self.mel_high_hz
            && self.mel_high_hz <= SAMPLE_RATE as f64 / 2.0)
        {
            return Err(AvsrError::InvalidConfig("mel range out of bounds".into()));
        }
        if self.log_floor <= 0.0 {
            return Err(AvsrError::InvalidConfig("log_floor must be positive".into()));
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank as a `(num_mels, fft_size/2 + 1)` matrix.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let n_freqs = cfg.fft_size / 2 + 1;
    let mel_lo = hz_to_mel(cfg.mel_low_hz);
    let mel_hi = hz_to_mel(cfg.mel_high_hz);
    let points: Vec<f64> = (0..cfg.num_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.num_mels + 1) as f64))
        .collect();
    let hz_per_bin = SAMPLE_RATE as f64 / cfg.fft_size as f64;
    let mut filters = Array2::<f64>::zeros((cfg.num_mels, n_freqs));
    for m in 0..cfg.num_mels {
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        for bin in 0..n_freqs {
            let f = bin as f64 * hz_per_bin;
            let w = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            filters[(m, bin)] = w;
        }
    }
    filters
}

/// Center frequency in Hz of each mel filter.
pub fn mel_center_frequencies(cfg: &MelConfig) -> Vec<f64> {
    let mel_lo = hz_to_mel(cfg.mel_low_hz);
    let mel_hi = hz_to_mel(cfg.mel_high_hz);
    (1..=cfg.num_mels)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.num_mels + 1) as f64))
        .collect()
}

fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// 80-dim log-mel features at 100 Hz. Framing uses no padding: every frame
/// lies fully inside the signal, so `T = (len - window)/stride + 1` exactly.
pub fn compute_logmel(wave: &Waveform, cfg: &MelConfig) -> Result<FeatureSequence> {
    cfg.validate()?;
    let win = cfg.window_samples();
    let stride = cfg.stride_samples();
    if wave.len() < win {
        return Err(AvsrError::UtteranceTooShort);
    }
    let t = (wave.len() - win) / stride + 1;
    let window = hann_window(win);
    let filters = mel_filterbank(cfg);
    let n_freqs = cfg.fft_size / 2 + 1;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    let mut frames = Array2::<f64>::zeros((t, cfg.num_mels));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for fi in 0..t {
        let start = fi * stride;
        for i in 0..cfg.fft_size {
            let v = if i < win {
                wave.samples[start + i] * window[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf.iter().take(n_freqs).map(|c| c.norm_sqr()).collect();
        for m in 0..cfg.num_mels {
            let mut e = 0.0;
            for (bin, &p) in power.iter().enumerate() {
                e += filters[(m, bin)] * p;
            }
            frames[(fi, m)] = e.max(cfg.log_floor).ln();
        }
    }
    Ok(FeatureSequence {
        frames,
        frame_rate: FRAME_RATE,
    })
}

/// Tile or crop `noise` to `len` samples starting at a circular offset.
fn tile_noise(noise: &[f64], len: usize, offset: usize) -> Vec<f64> {
    (0..len).map(|i| noise[(offset + i) % noise.len()]).collect()
}

/// Mix noise into a clean waveform at a target SNR in dB.
///
/// The noise is tiled/cropped to the clean length at a random circular
/// offset, scaled so the realized power ratio matches `snr_db` exactly, and
/// added. The sum is peak-rescaled only if it would leave `[-1, 1]`.
pub fn mix_at_snr(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    rng: &mut impl Rng,
) -> Result<Waveform> {
    let p_clean = clean.power();
    if p_clean <= 0.0 {
        return Err(AvsrError::SilentUtterance);
    }
    let offset = rng.random_range(0..noise.len().max(1));
    let tiled = tile_noise(&noise.samples, clean.len(), offset);
    let p_noise = tiled.iter().map(|s| s * s).sum::<f64>() / tiled.len().max(1) as f64;
    if p_noise <= 0.0 {
        return Err(AvsrError::SilentNoise);
    }
    let scale = (p_clean / (10f64.powf(snr_db / 10.0) * p_noise)).sqrt();
    let mut mixed: Vec<f64> = clean
        .samples
        .iter()
        .zip(&tiled)
        .map(|(c, n)| c + scale * n)
        .collect();
    let peak = mixed.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if peak > 1.0 {
        for s in &mut mixed {
            *s /= peak;
        }
    }
    Ok(Waveform {
        samples: mixed,
        sample_rate: SAMPLE_RATE,
    })
}

/// Babble noise: `k` pool utterances at random circular offsets, summed and
/// rescaled to unit RMS. Output length is the longest chosen utterance.
pub fn make_babble(pool: &[Waveform], k: usize, rng: &mut impl Rng) -> Result<Waveform> {
    if k < 2 || pool.len() < k {
        return Err(AvsrError::BabblePoolTooSmall { pool: pool.len(), k });
    }
    let picks = rand::seq::index::sample(rng, pool.len(), k);
    let len = picks
        .iter()
        .map(|i| pool[i].len())
        .max()
        .filter(|&l| l > 0)
        .ok_or(AvsrError::SilentNoise)?;
    let mut sum = vec![0.0f64; len];
    for i in picks.iter() {
        let u = &pool[i];
        if u.is_empty() {
            continue;
        }
        let offset = rng.random_range(0..u.len());
        for (j, s) in sum.iter_mut().enumerate() {
            *s += u.samples[(offset + j) % u.len()];
        }
    }
    let rms = (sum.iter().map(|s| s * s).sum::<f64>() / len as f64).sqrt();
    if rms <= 0.0 {
        return Err(AvsrError::SilentNoise);
    }
    for s in &mut sum {
        *s /= rms;
    }
    Ok(Waveform {
        samples: sum,
        sample_rate: SAMPLE_RATE,
    })
}

/// SpecAugment policy.
#[derive(Debug, Clone)]
pub struct SpecAugmentConfig {
    pub num_freq_masks: usize,
    pub max_freq_width: usize,
    pub num_time_masks: usize,
    pub max_time_ratio: f64,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        SpecAugmentConfig {
            num_freq_masks: 2,
            max_freq_width: 27,
            num_time_masks: 2,
            max_time_ratio: 0.05,
        }
    }
}

impl SpecAugmentConfig {
    pub fn disabled() -> Self {
        SpecAugmentConfig {
            num_freq_masks: 0,
            max_freq_width: 0,
            num_time_masks: 0,
            max_time_ratio: 0.0,
        }
    }
}

/// Masked regions are filled with the per-utterance mean of the input
/// feature matrix; shape is unchanged.
pub fn spec_augment(
    feat: &FeatureSequence,
    cfg: &SpecAugmentConfig,
    rng: &mut impl Rng,
) -> FeatureSequence {
    let mut frames = feat.frames.clone();
    let (t, d) = (frames.nrows(), frames.ncols());
    if t == 0 || d == 0 {
        return FeatureSequence {
            frames,
            frame_rate: feat.frame_rate,
        };
    }
    let fill = feat.frames.mean().unwrap_or(0.0);
    for _ in 0..cfg.num_freq_masks {
        let width = rng.random_range(0..=cfg.max_freq_width.min(d));
        if width == 0 {
            continue;
        }
        let start = rng.random_range(0..=d - width);
        for fi in 0..t {
            for ch in start..start + width {
                frames[(fi, ch)] = fill;
            }
        }
    }
    let max_t = ((t as f64) * cfg.max_time_ratio).floor() as usize;
    for _ in 0..cfg.num_time_masks {
        let width = rng.random_range(0..=max_t.min(t));
        if width == 0 {
            continue;
        }
        let start = rng.random_range(0..=t - width);
        for fi in start..start + width {
            for ch in 0..d {
                frames[(fi, ch)] = fill;
            }
        }
    }
    FeatureSequence {
        frames,
        frame_rate: feat.frame_rate,
    }
}
