//! Synthetic corpus generation: determinism, audio/video timeline agreement,
//! loading, and corpus statistics.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use avsr::data::{
    self, generate_corpus, load_example, manifest_path, read_manifest, symbol_audio,
    utterance_symbols, CorpusSpec, SPLITS, SYMBOL_MS, VIDEO_FPS, VOCAB_SIZE,
};

fn small_spec(seed: u64) -> CorpusSpec {
    CorpusSpec {
        num_pretrain: 4,
        num_train: 30, // babble synthesis needs at least the mixing count
        num_dev: 2,
        num_test: 2,
        min_symbols: 6,
        max_symbols: 10,
        video_size: 32,
        seed,
    }
}

fn dir_digest(root: &Path) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, u64>) {
        for e in fs::read_dir(dir).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let bytes = fs::read(&p).unwrap();
                let mut h: u64 = 0xcbf29ce484222325;
                for b in bytes {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), h);
            }
        }
    }
    walk(root, root, &mut out);
    out
}

#[test]
fn generation_is_byte_identical_per_seed() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let d3 = tempfile::tempdir().unwrap();
    generate_corpus(&small_spec(7), d1.path()).unwrap();
    generate_corpus(&small_spec(7), d2.path()).unwrap();
    generate_corpus(&small_spec(8), d3.path()).unwrap();
    assert_eq!(dir_digest(d1.path()), dir_digest(d2.path()));
    assert_ne!(dir_digest(d1.path()), dir_digest(d3.path()));
}

#[test]
fn durations_and_shapes_follow_symbol_count() {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec {
        min_symbols: 8,
        max_symbols: 8,
        ..small_spec(3)
    };
    generate_corpus(&spec, dir.path()).unwrap();
    let records = read_manifest(&manifest_path(dir.path(), "dev")).unwrap();
    for rec in &records {
        assert_eq!(rec.transcript.split_whitespace().count(), 8);
        assert!((rec.duration_s - 0.8).abs() < 1e-9);
        let (wave, video, _) = load_example(dir.path(), rec).unwrap();
        assert_eq!(wave.len(), 12_800);
        assert_eq!(video.num_frames(), 20);
        assert_eq!(video.height(), 32);
    }
}

#[test]
fn symbol_signatures_are_nearly_orthogonal() {
    for a in 0..VOCAB_SIZE {
        for b in (a + 1)..VOCAB_SIZE {
            let wa = symbol_audio(a);
            let wb = symbol_audio(b);
            let dot: f64 = wa.iter().zip(&wb).map(|(x, y)| x * y).sum();
            let na: f64 = wa.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = wb.iter().map(|x| x * x).sum::<f64>().sqrt();
            let corr = (dot / (na * nb)).abs();
            assert!(corr < 0.2, "symbols {a},{b}: correlation {corr}");
        }
    }
}

#[test]
fn audio_and_video_timelines_agree() {
    // the symbol rendered in a video frame equals the symbol active at the
    // frame midpoint on the audio timeline
    let symbols = vec![0usize, 5, 5, 12, 3, 3, 9, 1];
    let (_, video) = data::render_utterance(&symbols, 32);
    for f in 0..video.num_frames() {
        let mid_s = (f as f64 + 0.5) / VIDEO_FPS as f64;
        let expect = ((mid_s * 1000.0 / SYMBOL_MS as f64) as usize).min(symbols.len() - 1);
        let frame = video.frames.index_axis(ndarray::Axis(0), f).to_owned();
        let reference = data::render_frame(symbols[expect], 32, 32);
        assert_eq!(
            frame,
            reference.index_axis(ndarray::Axis(0), 0).to_owned(),
            "frame {f}"
        );
    }
}

#[test]
fn pixel_mapping_endpoints() {
    let strip = data::VideoSequence {
        frames: ndarray::Array4::from_shape_fn((1, 1, 3, 3), |(_, _, x, _)| [0u8, 128, 255][x]),
    };
    let f = strip.to_float();
    assert!((f[[0, 0, 0, 0]] - (-1.0)).abs() < 1e-12);
    assert!((f[[0, 0, 1, 0]] - 0.0039).abs() < 1e-3); // 128/127.5 - 1
    assert!((f[[0, 0, 2, 0]] - 1.0).abs() < 1.0 / 255.0);
}

#[test]
fn splits_are_disjoint_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(5);
    generate_corpus(&spec, dir.path()).unwrap();
    let mut all_ids = std::collections::HashSet::new();
    for split in SPLITS {
        let records = read_manifest(&manifest_path(dir.path(), split)).unwrap();
        assert_eq!(records.len(), spec.count_for(split));
        for rec in &records {
            assert!(all_ids.insert(rec.id.clone()), "duplicate id {}", rec.id);
            assert_eq!(rec.split, split);
        }
    }
    for name in ["babble_eval.wav", "babble_train_0.wav"] {
        assert!(dir.path().join("noise").join(name).exists());
    }
}

#[test]
fn symbol_frequencies_are_uniform() {
    // >= 1e4 symbols drawn exactly as generation draws them
    let spec = CorpusSpec {
        num_pretrain: 1300,
        ..small_spec(11)
    };
    let mut counts = vec![0usize; VOCAB_SIZE];
    let mut total = 0usize;
    for idx in 0..spec.num_pretrain {
        for s in utterance_symbols(&spec, "pretrain", idx) {
            counts[s] += 1;
            total += 1;
        }
    }
    assert!(total >= 10_000, "only {total} symbols");
    for (s, &c) in counts.iter().enumerate() {
        let freq = c as f64 / total as f64;
        assert!(
            (freq - 1.0 / 16.0).abs() < 0.01,
            "symbol {s}: frequency {freq}"
        );
    }
}

#[test]
fn corrupt_or_missing_files_name_the_record() {
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(&small_spec(13), dir.path()).unwrap();
    let records = read_manifest(&manifest_path(dir.path(), "test")).unwrap();
    let rec = &records[0];
    fs::remove_file(dir.path().join(&rec.video_path)).unwrap();
    let err = load_example(dir.path(), rec).unwrap_err().to_string();
    assert!(err.contains(&rec.id), "error does not name the record: {err}");
}

#[test]
fn manifest_rejects_foreign_symbols() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.txt");
    fs::write(&path, "x0\ta.wav\ta.fvt\tq z\t0.8\ttest\n").unwrap();
    assert!(read_manifest(&path).is_err());
}
