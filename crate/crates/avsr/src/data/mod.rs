//! Synthetic paired audio/video corpus: generation, manifests, and loading.
//!
//! Each utterance is a random symbol sequence. Audio is a concatenation of
//! 100 ms per-symbol two-sinusoid chords; video renders a symbol-indexed
//! mouth ellipse at 25 Hz, synchronized to the audio symbol timeline. The
//! visual signal is fully informative about the symbol; noise is added only
//! at training/eval time, never baked into files.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayD, Axis};
use rand::Rng;

use crate::dsp::{self, wav, Waveform, SAMPLE_RATE};
use crate::error::{AvsrError, Result};
use crate::rng::substream;

pub mod container;

use container::TensorData;

/// Audio duration of one symbol.
pub const SYMBOL_MS: usize = 100;
pub const VIDEO_FPS: usize = 25;
pub const VOCAB_SIZE: usize = 16;
/// Eval babble mixes this many train utterances.
pub const BABBLE_K: usize = 30;
/// Training noise proxies written at generation time.
pub const TRAIN_BABBLES: usize = 3;

pub const SPLITS: [&str; 4] = ["pretrain", "train", "dev", "test"];

/// Corpus layout and sizes.
#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub num_pretrain: usize,
    pub num_train: usize,
    pub num_dev: usize,
    pub num_test: usize,
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub video_size: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_pretrain: 128,
            num_train: 96,
            num_dev: 24,
            num_test: 32,
            min_symbols: 6,
            max_symbols: 12,
            video_size: 32,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn count_for(&self, split: &str) -> usize {
        match split {
            "pretrain" => self.num_pretrain,
            "train" => self.num_train,
            "dev" => self.num_dev,
            "test" => self.num_test,
            _ => 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.min_symbols == 0 || self.min_symbols > self.max_symbols {
            return Err(AvsrError::InvalidConfig("bad symbol count range".into()));
        }
        // 15 s cap on utterance duration
        if self.max_symbols * SYMBOL_MS > 15_000 {
            return Err(AvsrError::InvalidConfig(
                "max_symbols exceeds the 15 s duration cap".into(),
            ));
        }
        if self.num_train < BABBLE_K {
            return Err(AvsrError::InvalidConfig(format!(
                "train split must hold at least {BABBLE_K} utterances for babble synthesis"
            )));
        }
        Ok(())
    }
}

/// One synthetic utterance.
#[derive(Debug, Clone)]
pub struct ManifestRecord {
    pub id: String,
    pub audio_path: PathBuf,
    pub video_path: PathBuf,
    pub transcript: String,
    pub duration_s: f64,
    pub split: String,
}

/// 25 Hz video frames stored as u8, mapped to `[-1, 1]` in memory.
#[derive(Debug, Clone)]
pub struct VideoSequence {
    /// `(T, H, W, 3)`.
    pub frames: Array4<u8>,
}

impl VideoSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    /// Pixel u8 `x` maps to `x/127.5 - 1`.
    pub fn to_float(&self) -> ArrayD<f64> {
        self.frames.mapv(|v| v as f64 / 127.5 - 1.0).into_dyn()
    }
}

/// Symbol names: 16 single letters.
pub fn symbol_names() -> Vec<String> {
    (0..VOCAB_SIZE)
        .map(|i| ((b'a' + i as u8) as char).to_string())
        .collect()
}

/// Two-sinusoid chord frequencies for a symbol, spaced for 80-mel
/// separability within the 125-7500 Hz analysis range.
fn chord_freqs(symbol: usize) -> (f64, f64) {
    let f1 = 350.0 + 170.0 * symbol as f64;
    let f2 = 3400.0 + 230.0 * symbol as f64;
    (f1, f2)
}

/// 100 ms chord for one symbol, amplitude 0.3, with 5 ms cosine edge ramps.
pub fn symbol_audio(symbol: usize) -> Vec<f64> {
    let n = SYMBOL_MS * SAMPLE_RATE as usize / 1000;
    let (f1, f2) = chord_freqs(symbol);
    let ramp = 80; // 5 ms
    (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let mut v = 0.15 * (2.0 * std::f64::consts::PI * f1 * t).sin()
                + 0.15 * (2.0 * std::f64::consts::PI * f2 * t).sin();
            if i < ramp {
                v *= 0.5 - 0.5 * (std::f64::consts::PI * i as f64 / ramp as f64).cos();
            } else if i >= n - ramp {
                let j = n - 1 - i;
                v *= 0.5 - 0.5 * (std::f64::consts::PI * j as f64 / ramp as f64).cos();
            }
            v
        })
        .collect()
}

/// Mouth ellipse semi-axes for a symbol: aperture grows and width shrinks
/// with the symbol index, so every symbol has a unique shape.
fn mouth_axes(symbol: usize, h: usize, w: usize) -> (f64, f64) {
    let ah = h as f64 * (0.06 + 0.022 * symbol as f64) / 2.0 * 2.0;
    let aw = w as f64 * (0.46 - 0.018 * symbol as f64);
    (ah.max(1.0), aw.max(2.0))
}

/// Render the video frame showing one symbol.
pub fn render_frame(symbol: usize, h: usize, w: usize) -> Array4<u8> {
    let mut frame = Array4::<u8>::zeros((1, h, w, 3));
    let (ah, aw) = mouth_axes(symbol, h, w);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let lip = [210u8, (70 + symbol * 9) as u8, 90u8];
    let skin = [72u8, 52u8, 46u8];
    for y in 0..h {
        for x in 0..w {
            let dy = (y as f64 + 0.5 - cy) / ah;
            let dx = (x as f64 + 0.5 - cx) / aw;
            let color = if dy * dy + dx * dx <= 1.0 { lip } else { skin };
            for c in 0..3 {
                frame[(0, y, x, c)] = color[c];
            }
        }
    }
    frame
}

/// Audio and video for a symbol sequence. Video frame `f` renders the symbol
/// active at the frame midpoint, so the audio and video timelines agree.
pub fn render_utterance(symbols: &[usize], video_size: usize) -> (Waveform, VideoSequence) {
    let mut samples = Vec::with_capacity(symbols.len() * SYMBOL_MS * 16);
    for &s in symbols {
        samples.extend(symbol_audio(s));
    }
    let duration = symbols.len() as f64 * SYMBOL_MS as f64 / 1000.0;
    let t_video = (duration * VIDEO_FPS as f64).round() as usize;
    let mut frames = Array4::<u8>::zeros((t_video, video_size, video_size, 3));
    for f in 0..t_video {
        let mid_s = (f as f64 + 0.5) / VIDEO_FPS as f64;
        let sym = ((mid_s * 1000.0 / SYMBOL_MS as f64) as usize).min(symbols.len() - 1);
        let rendered = render_frame(symbols[sym], video_size, video_size);
        frames
            .index_axis_mut(Axis(0), f)
            .assign(&rendered.index_axis(Axis(0), 0));
    }
    (
        Waveform {
            samples,
            sample_rate: SAMPLE_RATE,
        },
        VideoSequence { frames },
    )
}

/// The symbol sequence of one utterance; exactly the draw `generate_corpus`
/// makes, so corpus statistics can be checked without touching disk.
pub fn utterance_symbols(spec: &CorpusSpec, split: &str, index: usize) -> Vec<usize> {
    let mut rng = substream(spec.seed, &format!("data/{split}/{index}"));
    let count = rng.random_range(spec.min_symbols..=spec.max_symbols);
    (0..count).map(|_| rng.random_range(0..VOCAB_SIZE)).collect()
}

fn manifest_line(rec: &ManifestRecord) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{:.3}\t{}",
        rec.id,
        rec.audio_path.display(),
        rec.video_path.display(),
        rec.transcript,
        rec.duration_s,
        rec.split
    )
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| AvsrError::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(AvsrError::Format(format!(
                "{}:{}: expected 6 tab-separated fields",
                path.display(),
                lineno + 1
            )));
        }
        let names = symbol_names();
        for tok in fields[3].split_whitespace() {
            if !names.iter().any(|n| n == tok) {
                return Err(AvsrError::Format(format!(
                    "{}:{}: transcript symbol {tok:?} not in vocabulary",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        records.push(ManifestRecord {
            id: fields[0].to_string(),
            audio_path: PathBuf::from(fields[1]),
            video_path: PathBuf::from(fields[2]),
            transcript: fields[3].to_string(),
            duration_s: fields[4]
                .parse()
                .map_err(|_| AvsrError::Format(format!("bad duration at line {}", lineno + 1)))?,
            split: fields[5].to_string(),
        });
    }
    Ok(records)
}

/// Generate all splits plus the frozen noise waveforms under `out_dir`.
/// Byte-identical output for the same `(spec, seed)`.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<()> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| AvsrError::io(out_dir, e))?;
    let names = symbol_names();
    let mut train_waves: Vec<Waveform> = Vec::new();

    for split in SPLITS {
        let split_dir = out_dir.join(split);
        fs::create_dir_all(&split_dir).map_err(|e| AvsrError::io(&split_dir, e))?;
        let mut manifest = String::new();
        for idx in 0..spec.count_for(split) {
            let symbols = utterance_symbols(spec, split, idx);
            let (wave, video) = render_utterance(&symbols, spec.video_size);
            let id = format!("{split}{idx:04}");
            let audio_rel = PathBuf::from(split).join(format!("{id}.wav"));
            let video_rel = PathBuf::from(split).join(format!("{id}.fvt"));
            wav::write_wav(&out_dir.join(&audio_rel), &wave)?;
            container::write_tensor(
                &out_dir.join(&video_rel),
                &TensorData::U8(video.frames.clone().into_dyn()),
            )?;
            let rec = ManifestRecord {
                id,
                audio_path: audio_rel,
                video_path: video_rel,
                transcript: symbols
                    .iter()
                    .map(|&s| names[s].clone())
                    .collect::<Vec<_>>()
                    .join(" "),
                duration_s: symbols.len() as f64 * SYMBOL_MS as f64 / 1000.0,
                split: split.to_string(),
            };
            manifest.push_str(&manifest_line(&rec));
            manifest.push('\n');
            if split == "train" {
                train_waves.push(wave);
            }
        }
        let mpath = split_dir.join("manifest.txt");
        fs::write(&mpath, manifest).map_err(|e| AvsrError::io(&mpath, e))?;
    }

    // Frozen noise: one eval babble plus a few training babbles, all drawn
    // from the train pool. Peak-normalized on write; SNR mixing rescales
    // anyway, so the stored amplitude is irrelevant.
    let noise_dir = out_dir.join("noise");
    fs::create_dir_all(&noise_dir).map_err(|e| AvsrError::io(&noise_dir, e))?;
    let write_babble = |name: &str, label: &str| -> Result<()> {
        let mut rng = substream(spec.seed, label);
        let mut babble = dsp::make_babble(&train_waves, BABBLE_K.min(train_waves.len()), &mut rng)?;
        let peak = babble.samples.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if peak > 0.0 {
            for s in &mut babble.samples {
                *s *= 0.95 / peak;
            }
        }
        wav::write_wav(&noise_dir.join(name), &babble)
    };
    write_babble("babble_eval.wav", "noise/babble_eval")?;
    for i in 0..TRAIN_BABBLES {
        write_babble(&format!("babble_train_{i}.wav"), &format!("noise/babble_train/{i}"))?;
    }

    let meta = format!(
        "seed={}\nvideo_size={}\nmin_symbols={}\nmax_symbols={}\nnum_pretrain={}\nnum_train={}\nnum_dev={}\nnum_test={}\n",
        spec.seed,
        spec.video_size,
        spec.min_symbols,
        spec.max_symbols,
        spec.num_pretrain,
        spec.num_train,
        spec.num_dev,
        spec.num_test,
    );
    let cpath = out_dir.join("corpus.txt");
    fs::write(&cpath, meta).map_err(|e| AvsrError::io(&cpath, e))?;
    Ok(())
}

/// Load one utterance's audio, video, and transcript.
pub fn load_example(
    corpus_root: &Path,
    rec: &ManifestRecord,
) -> Result<(Waveform, VideoSequence, String)> {
    let named = |e: AvsrError| AvsrError::Record {
        id: rec.id.clone(),
        msg: e.to_string(),
    };
    let wave = wav::read_wav(&corpus_root.join(&rec.audio_path)).map_err(named)?;
    let tensor = container::read_tensor(&corpus_root.join(&rec.video_path)).map_err(named)?;
    let video = match tensor {
        TensorData::U8(a) if a.ndim() == 4 => VideoSequence {
            frames: a.into_dimensionality::<ndarray::Ix4>().unwrap(),
        },
        _ => {
            return Err(AvsrError::Record {
                id: rec.id.clone(),
                msg: "video tensor must be rank-4 u8".into(),
            })
        }
    };
    Ok((wave, video, rec.transcript.clone()))
}

/// Manifest path for a split.
pub fn manifest_path(corpus_root: &Path, split: &str) -> PathBuf {
    corpus_root.join(split).join("manifest.txt")
}
