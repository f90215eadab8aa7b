//! Masked-prediction pre-training machinery: frame stacking, a frozen
//! random-projection quantizer, span masking for audio and video, and the
//! masked cross-entropy loss.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dsp::FeatureSequence;
use crate::error::{AvsrError, Result};
use crate::rng::substream;

pub const STACK: usize = 4;
pub const DEFAULT_INPUT_DIM: usize = 320;
pub const DEFAULT_CODE_DIM: usize = 16;
pub const DEFAULT_CODEBOOK_SIZE: usize = 8192;
pub const DEFAULT_MASK_PROB: f64 = 0.01;
pub const DEFAULT_MASK_SPAN: usize = 40;

/// Frozen random projection plus frozen random codebook. Never updated by
/// training; fully reproducible from `seed`.
#[derive(Debug, Clone)]
pub struct RandomQuantizer {
    /// `(input_dim, code_dim)`.
    pub projection: Array2<f64>,
    /// `(codebook_size, code_dim)`, rows unit-norm.
    pub codebook: Array2<f64>,
    pub seed: u64,
    /// Per-dimension normalization of stacked features, frozen once fitted.
    pub feat_mean: Array1<f64>,
    pub feat_std: Array1<f64>,
}

/// Draw quantizer matrices from counter-based substreams of `seed`.
pub fn init_quantizer(
    seed: u64,
    input_dim: usize,
    code_dim: usize,
    codebook_size: usize,
) -> RandomQuantizer {
    assert!(input_dim > 0 && code_dim > 0 && codebook_size > 0);
    let mut rng_p = substream(seed, "quantizer/projection");
    let projection = Array2::from_shape_fn((input_dim, code_dim), |_| {
        rng_p.sample::<f64, _>(StandardNormal)
    });
    let mut rng_c = substream(seed, "quantizer/codebook");
    let mut codebook = Array2::from_shape_fn((codebook_size, code_dim), |_| {
        rng_c.sample::<f64, _>(StandardNormal)
    });
    for mut row in codebook.rows_mut() {
        let norm = row.mapv(|v| v * v).sum().sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    RandomQuantizer {
        projection,
        codebook,
        seed,
        feat_mean: Array1::zeros(input_dim),
        feat_std: Array1::ones(input_dim),
    }
}

impl RandomQuantizer {
    pub fn input_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn code_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.nrows()
    }

    /// Fit the frozen per-dimension normalization from stacked corpus rows.
    pub fn fit_normalization(&mut self, stacked_rows: &[Array2<f64>]) {
        let dim = self.input_dim();
        let mut count = 0usize;
        let mut sum = Array1::<f64>::zeros(dim);
        let mut sumsq = Array1::<f64>::zeros(dim);
        for block in stacked_rows {
            for row in block.rows() {
                sum += &row;
                sumsq += &row.mapv(|v| v * v);
                count += 1;
            }
        }
        if count == 0 {
            return;
        }
        let mean = sum.mapv(|v| v / count as f64);
        let var = &sumsq.mapv(|v| v / count as f64) - &mean.mapv(|v| v * v);
        self.feat_mean = mean;
        self.feat_std = var.mapv(|v| v.max(1e-12).sqrt());
    }

    /// Nearest codebook row (cosine similarity) per input row.
    ///
    /// Each row is normalized, projected, and L2-normalized; the label is the
    /// argmin Euclidean distance to the (unit-norm) codebook rows, ties broken
    /// by lowest index. A zero-norm projected vector falls through to the same
    /// tie-break over raw distances, which picks the lowest-index row at
    /// maximal inner product 0.
    pub fn quantize(&self, stacked: ArrayView2<f64>) -> Vec<u32> {
        assert_eq!(
            stacked.ncols(),
            self.input_dim(),
            "quantize: row dim must equal input_dim"
        );
        let normalized = {
            let mut m = stacked.to_owned();
            for mut row in m.rows_mut() {
                row -= &self.feat_mean;
                row /= &self.feat_std;
            }
            m
        };
        let mut projected = normalized.dot(&self.projection);
        for mut row in projected.rows_mut() {
            let norm = row.mapv(|v| v * v).sum().sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            }
        }
        // With unit-norm rows, argmin ||v - c|| == argmax <v, c>.
        let scores = projected.dot(&self.codebook.t());
        scores
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for (i, &v) in row.iter().enumerate() {
                    if v > best_v {
                        best_v = v;
                        best = i;
                    }
                }
                best as u32
            })
            .collect()
    }
}

/// Concatenate groups of four consecutive 100 Hz frames into 25 Hz rows;
/// trailing remainder frames are dropped.
pub fn stack_frames(feat: &FeatureSequence) -> Array2<f64> {
    let t = feat.num_frames();
    let d = feat.frames.ncols();
    let out_t = t / STACK;
    let mut out = Array2::<f64>::zeros((out_t, d * STACK));
    for i in 0..out_t {
        for j in 0..STACK {
            let src = feat.frames.row(i * STACK + j);
            out.row_mut(i)
                .slice_mut(ndarray::s![j * d..(j + 1) * d])
                .assign(&src);
        }
    }
    out
}

/// Set of masked 100 Hz frame spans.
#[derive(Debug, Clone)]
pub struct MaskSpec {
    /// `(start, len)` pairs; spans may overlap.
    pub spans: Vec<(usize, usize)>,
    pub num_frames: usize,
}

impl MaskSpec {
    /// Per-frame union of all spans.
    pub fn frame_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.num_frames];
        for &(start, len) in &self.spans {
            for f in m.iter_mut().skip(start).take(len) {
                *f = true;
            }
        }
        m
    }
}

/// Each frame independently starts a masked span with probability `p`;
/// spans are clipped at the sequence end.
pub fn sample_mask(t: usize, p: f64, span: usize, rng: &mut impl Rng) -> MaskSpec {
    assert!(t >= 1, "sample_mask: T must be >= 1");
    let mut spans = Vec::new();
    for start in 0..t {
        if rng.random::<f64>() < p {
            spans.push((start, span.min(t - start)));
        }
    }
    MaskSpec {
        spans,
        num_frames: t,
    }
}

/// Replace masked frames with i.i.d. Gaussian noise, mean 0, std 0.1.
pub fn apply_audio_mask(
    feat: &FeatureSequence,
    mask: &MaskSpec,
    rng: &mut impl Rng,
) -> FeatureSequence {
    assert_eq!(mask.num_frames, feat.num_frames(), "mask length mismatch");
    let normal = Normal::new(0.0, 0.1).unwrap();
    let mut frames = feat.frames.clone();
    let fm = mask.frame_mask();
    for (i, &masked) in fm.iter().enumerate() {
        if masked {
            for v in frames.row_mut(i) {
                *v = normal.sample(rng);
            }
        }
    }
    FeatureSequence {
        frames,
        frame_rate: feat.frame_rate,
    }
}

/// 25 Hz loss-target eligibility: position `i` is a target iff all four
/// constituent 100 Hz frames `4i..4i+3` are masked.
pub fn mask_at_target_rate(mask: &MaskSpec) -> Vec<bool> {
    let fm = mask.frame_mask();
    let out_t = mask.num_frames / STACK;
    (0..out_t)
        .map(|i| (0..STACK).all(|j| fm[i * STACK + j]))
        .collect()
}

/// Replace each masked 25 Hz video frame with a uniformly chosen frame of
/// the same utterance (any index, including masked ones). A single-frame
/// video is replaced by itself, a no-op.
pub fn apply_video_mask(
    video: &crate::data::VideoSequence,
    target_mask: &[bool],
    rng: &mut impl Rng,
) -> crate::data::VideoSequence {
    let t = video.num_frames();
    assert_eq!(t, target_mask.len(), "video mask length mismatch");
    let mut out = video.clone();
    for (i, &masked) in target_mask.iter().enumerate() {
        if masked {
            let src = rng.random_range(0..t);
            let frame = video.frames.index_axis(Axis(0), src).to_owned();
            out.frames.index_axis_mut(Axis(0), i).assign(&frame);
        }
    }
    out
}

/// Quantized prediction targets at 25 Hz.
#[derive(Debug, Clone)]
pub struct TargetSequence {
    pub labels: Vec<u32>,
    pub target_mask: Vec<bool>,
}

impl TargetSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.target_mask.iter().filter(|&&m| m).count()
    }
}

/// Masked cross-entropy over codebook logits.
#[derive(Debug, Clone, Copy)]
pub struct MlmLoss {
    pub loss: f64,
    /// True when no position carried a target and the loss defaulted to 0.
    pub empty: bool,
    /// Fraction of masked positions whose argmax logit hits the label.
    pub masked_accuracy: f64,
}

/// Mean over positions with `target_mask = true` of `-log softmax(logits)[label]`.
pub fn mlm_loss(logits: ArrayView2<f64>, targets: &TargetSequence) -> Result<MlmLoss> {
    if logits.nrows() != targets.len() {
        return Err(AvsrError::ShapeMismatch(format!(
            "mlm_loss: {} logit rows vs {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    let mut hits = 0usize;
    let mut count = 0usize;
    for (i, (&label, &masked)) in targets.labels.iter().zip(&targets.target_mask).enumerate() {
        if !masked {
            continue;
        }
        let row = logits.row(i);
        if label as usize >= row.len() {
            return Err(AvsrError::InvalidLabel(label));
        }
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = mx + row.mapv(|v| (v - mx).exp()).sum().ln();
        total += lse - row[label as usize];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        if argmax == label as usize {
            hits += 1;
        }
        count += 1;
    }
    if count == 0 {
        return Ok(MlmLoss {
            loss: 0.0,
            empty: true,
            masked_accuracy: 0.0,
        });
    }
    Ok(MlmLoss {
        loss: total / count as f64,
        empty: false,
        masked_accuracy: hits as f64 / count as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::FeatureSequence;
    use crate::rng::substream;
    use ndarray::Array2;
    use rand_distr::StandardNormal;

    fn feat_from(frames: Array2<f64>) -> FeatureSequence {
        FeatureSequence {
            frames,
            frame_rate: 100,
        }
    }

    #[test]
    fn quantizer_reproducible_from_seed() {
        let a = init_quantizer(7, 320, 16, 128);
        let b = init_quantizer(7, 320, 16, 128);
        assert_eq!(a.projection, b.projection);
        assert_eq!(a.codebook, b.codebook);
    }

    #[test]
    fn codebook_shape_and_row_norms() {
        let q = init_quantizer(1, 320, 16, 8192);
        assert_eq!(q.codebook.dim(), (8192, 16));
        for row in q.codebook.rows() {
            let n = row.mapv(|v| v * v).sum().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn different_seeds_differ_almost_everywhere() {
        let a = init_quantizer(1, 320, 16, 256);
        let b = init_quantizer(2, 320, 16, 256);
        let total = a.projection.len();
        let same = a
            .projection
            .iter()
            .zip(b.projection.iter())
            .filter(|(x, y)| x == y)
            .count();
        assert!(same * 100 <= total, "{same}/{total} entries identical");
    }

    #[test]
    fn stacking_arithmetic() {
        let f8 = feat_from(Array2::zeros((8, 80)));
        assert_eq!(stack_frames(&f8).dim(), (2, 320));
        let f9 = feat_from(Array2::zeros((9, 80)));
        assert_eq!(stack_frames(&f9).dim(), (2, 320));
        let f100 = feat_from(Array2::zeros((100, 80)));
        assert_eq!(stack_frames(&f100).dim(), (25, 320));
        let f3 = feat_from(Array2::zeros((3, 80)));
        assert_eq!(stack_frames(&f3).dim(), (0, 320));
    }

    #[test]
    fn stacked_rows_concatenate_in_order() {
        let mut frames = Array2::zeros((4, 80));
        for t in 0..4 {
            for d in 0..80 {
                frames[(t, d)] = (t * 100 + d) as f64;
            }
        }
        let stacked = stack_frames(&feat_from(frames));
        assert_eq!(stacked[(0, 0)], 0.0);
        assert_eq!(stacked[(0, 80)], 100.0);
        assert_eq!(stacked[(0, 319)], 379.0);
    }

    #[test]
    fn identical_rows_get_identical_labels() {
        let q = init_quantizer(3, 320, 16, 64);
        let mut rng = substream(4, "bestrq/ident");
        let row: Vec<f64> = (0..320).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut m = Array2::zeros((2, 320));
        for (j, &v) in row.iter().enumerate() {
            m[(0, j)] = v;
            m[(1, j)] = v;
        }
        let labels = q.quantize(m.view());
        assert_eq!(labels[0], labels[1]);
    }

    #[test]
    fn positive_scaling_preserves_labels() {
        let q = init_quantizer(3, 320, 16, 64);
        let mut rng = substream(5, "bestrq/scale");
        let mut m = Array2::zeros((2, 320));
        for j in 0..320 {
            let v: f64 = rng.sample(StandardNormal);
            m[(0, j)] = v;
            m[(1, j)] = 3.0 * v;
        }
        let labels = q.quantize(m.view());
        assert_eq!(labels[0], labels[1]);
    }

    /// Brute-force nearest-neighbor oracle written against the struct fields
    /// only: normalize, project, normalize, argmin Euclidean distance with
    /// lowest-index ties.
    fn oracle_label(q: &RandomQuantizer, row: ndarray::ArrayView1<f64>) -> u32 {
        let normalized: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(j, &v)| (v - q.feat_mean[j]) / q.feat_std[j])
            .collect();
        let mut v = vec![0.0f64; q.code_dim()];
        for (j, &x) in normalized.iter().enumerate() {
            for (k, item) in v.iter_mut().enumerate() {
                *item += x * q.projection[(j, k)];
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        let mut best = 0u32;
        let mut best_d = f64::INFINITY;
        for c in 0..q.codebook_size() {
            let d: f64 = (0..q.code_dim())
                .map(|k| {
                    let diff = v[k] - q.codebook[(c, k)];
                    diff * diff
                })
                .sum();
            if d < best_d {
                best_d = d;
                best = c as u32;
            }
        }
        best
    }

    #[test]
    fn agrees_with_brute_force_oracle() {
        let mut q = init_quantizer(6, 320, 16, 64);
        // exercise the normalization path too
        let mut rng = substream(7, "bestrq/oracle");
        let rows = Array2::from_shape_fn((10_000, 320), |_| rng.sample::<f64, _>(StandardNormal));
        q.fit_normalization(&[rows.slice(ndarray::s![..64, ..]).to_owned()]);
        let labels = q.quantize(rows.view());
        let mut used = std::collections::HashSet::new();
        for (i, &label) in labels.iter().enumerate() {
            assert!(label < 64);
            used.insert(label);
            if i % 7 == 0 {
                assert_eq!(label, oracle_label(&q, rows.row(i)), "row {i}");
            }
        }
        assert!(used.len() >= 32, "only {} codebook ids used", used.len());
    }

    #[test]
    fn zero_norm_row_is_deterministic() {
        let q = init_quantizer(8, 320, 16, 64);
        let m = Array2::zeros((1, 320));
        let a = q.quantize(m.view());
        let b = q.quantize(m.view());
        assert_eq!(a, b);
        // exact tie across the whole unit-norm codebook: lowest index wins
        assert_eq!(a[0], 0);
    }

    #[test]
    fn mask_probability_extremes() {
        let mut rng = substream(9, "bestrq/mask0");
        let none = sample_mask(50, 0.0, 40, &mut rng);
        assert!(none.spans.is_empty());
        let all = sample_mask(10, 1.0, 40, &mut rng);
        assert!(all.frame_mask().iter().all(|&m| m));
        // spans clip at the sequence end
        for &(start, len) in &all.spans {
            assert!(start + len <= 10);
        }
    }

    #[test]
    fn interior_mask_coverage_matches_closed_form() {
        // P(masked) = 1 - (1-p)^span for frames with >= span-1 predecessors
        let p = 0.01f64;
        let span = 40usize;
        let t = 1000;
        let expect = 1.0 - (1.0 - p).powi(span as i32);
        let mut masked = 0usize;
        let mut total = 0usize;
        for trial in 0..120 {
            let mut rng = substream(trial, "bestrq/coverage");
            let mask = sample_mask(t, p, span, &mut rng);
            let fm = mask.frame_mask();
            for &m in fm.iter().skip(span - 1) {
                total += 1;
                if m {
                    masked += 1;
                }
            }
        }
        assert!(total >= 100_000);
        let rate = masked as f64 / total as f64;
        assert!(
            (rate - expect).abs() < 0.01,
            "coverage {rate} vs closed form {expect}"
        );
    }

    #[test]
    fn audio_mask_fill_statistics() {
        let t = 10_000;
        let feat = feat_from(Array2::from_elem((t, 80), 5.0));
        let mask = MaskSpec {
            spans: vec![(0, t)],
            num_frames: t,
        };
        let mut rng = substream(10, "bestrq/fill");
        let out = apply_audio_mask(&feat, &mask, &mut rng);
        let mean = out.frames.mean().unwrap();
        let std = out.frames.mapv(|v| (v - mean) * (v - mean)).mean().unwrap().sqrt();
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((std - 0.1).abs() < 0.01, "std {std}");
    }

    #[test]
    fn unmasked_regions_are_bit_identical() {
        let mut rng = substream(11, "bestrq/unmasked");
        let feat = feat_from(Array2::from_shape_fn((100, 80), |(t, d)| {
            (t * 80 + d) as f64 * 0.001
        }));
        let mask = MaskSpec {
            spans: vec![(20, 40)],
            num_frames: 100,
        };
        let out = apply_audio_mask(&feat, &mask, &mut rng);
        let fm = mask.frame_mask();
        for t in 0..100 {
            if !fm[t] {
                for d in 0..80 {
                    assert_eq!(out.frames[(t, d)].to_bits(), feat.frames[(t, d)].to_bits());
                }
            }
        }
        // empty mask is the identity
        let empty = MaskSpec {
            spans: vec![],
            num_frames: 100,
        };
        let same = apply_audio_mask(&feat, &empty, &mut rng);
        assert_eq!(same.frames, feat.frames);
    }

    #[test]
    fn target_rate_requires_all_four_frames() {
        let aligned = MaskSpec {
            spans: vec![(0, 40)],
            num_frames: 120,
        };
        let t = mask_at_target_rate(&aligned);
        assert!(t[..10].iter().all(|&m| m));
        assert!(t[10..].iter().all(|&m| !m));

        let shifted = MaskSpec {
            spans: vec![(2, 40)], // frames 2..=41
            num_frames: 120,
        };
        let t = mask_at_target_rate(&shifted);
        assert!(!t[0]);
        assert!(t[1..10].iter().all(|&m| m));
        assert!(!t[10]);

        let empty = MaskSpec {
            spans: vec![],
            num_frames: 120,
        };
        assert!(mask_at_target_rate(&empty).iter().all(|&m| !m));
    }

    #[test]
    fn uniform_logits_hit_log_codebook_size() {
        let targets = TargetSequence {
            labels: vec![5, 6, 7],
            target_mask: vec![true, true, true],
        };
        let logits = Array2::zeros((3, 8192));
        let out = mlm_loss(logits.view(), &targets).unwrap();
        assert!((out.loss - (8192f64).ln()).abs() < 1e-6);
        assert!(!out.empty);
    }

    #[test]
    fn saturated_logits_give_zero_loss() {
        let targets = TargetSequence {
            labels: vec![2],
            target_mask: vec![true],
        };
        let mut logits = Array2::zeros((1, 16));
        logits[(0, 2)] = 100.0;
        let out = mlm_loss(logits.view(), &targets).unwrap();
        assert!(out.loss <= 1e-6);
        assert_eq!(out.masked_accuracy, 1.0);
    }

    #[test]
    fn random_logits_match_scalar_recomputation() {
        let mut rng = substream(12, "bestrq/mlm");
        let logits = Array2::from_shape_fn((5, 32), |_| rng.sample::<f64, _>(StandardNormal));
        let targets = TargetSequence {
            labels: vec![3, 9, 1, 30, 12],
            target_mask: vec![true, false, true, true, false],
        };
        let out = mlm_loss(logits.view(), &targets).unwrap();
        // independent scalar recomputation of the three masked terms
        let mut expect = 0.0;
        for i in [0usize, 2, 3] {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect += z.ln() - row[targets.labels[i] as usize];
        }
        expect /= 3.0;
        assert!((out.loss - expect).abs() < 1e-9);
    }

    #[test]
    fn empty_targets_are_flagged() {
        let targets = TargetSequence {
            labels: vec![1, 2],
            target_mask: vec![false, false],
        };
        let logits = Array2::zeros((2, 16));
        let out = mlm_loss(logits.view(), &targets).unwrap();
        assert!(out.empty);
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn mlm_shape_mismatch_is_an_error() {
        let targets = TargetSequence {
            labels: vec![1],
            target_mask: vec![true],
        };
        let logits = Array2::zeros((2, 16));
        assert!(mlm_loss(logits.view(), &targets).is_err());
    }
}
