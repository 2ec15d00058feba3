//! Dataset handling: deterministic synthetic generation, manifest + feature
//! blob I/O, and padded batching.
//!
//! On-disk layout is a line-oriented manifest (one JSON record per sample)
//! next to a `blobs/` directory of raw little-endian `f32` matrices,
//! row-major with no header; shapes are authoritative from the manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localize::TimeInterval;

/// Seconds per synthetic frame. The generator fixes the frame rate and
/// varies segment placement instead; evaluation works in seconds either way.
pub const SYNTHETIC_FRAME_DURATION: f64 = 1.0;

/// One video/query pair with precomputed features.
///
/// The ground-truth interval is for evaluation only; training never reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample {
    pub sample_id: String,
    /// n x D_v, one row per frame.
    pub video_features: Array2<f64>,
    /// m x D_q, one row per query token.
    pub query_features: Array2<f64>,
    /// Seconds per frame, > 0.
    pub frame_duration: f64,
    pub ground_truth: Option<TimeInterval>,
}

impl FeatureSample {
    pub fn n(&self) -> usize {
        self.video_features.nrows()
    }

    pub fn m(&self) -> usize {
        self.query_features.nrows()
    }

    /// Check the structural invariants, reporting the sample id on failure.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Data(format!("sample {}: {msg}", self.sample_id)));
        if self.n() == 0 || self.m() == 0 {
            return fail("empty video or query".into());
        }
        if !(self.frame_duration > 0.0) || !self.frame_duration.is_finite() {
            return fail(format!("invalid frame duration {}", self.frame_duration));
        }
        if self.video_features.iter().any(|v| !v.is_finite()) {
            return fail("non-finite video feature".into());
        }
        if self.query_features.iter().any(|v| !v.is_finite()) {
            return fail("non-finite query feature".into());
        }
        if let Some(gt) = &self.ground_truth {
            let len = self.n() as f64 * self.frame_duration;
            if gt.start < 0.0 || gt.end > len + 1e-9 || gt.start >= gt.end {
                return fail(format!(
                    "ground truth [{}, {}] outside video span [0, {len}]",
                    gt.start, gt.end
                ));
            }
        }
        Ok(())
    }
}

/// Recipe for a synthetic grounding dataset.
///
/// Every sample hides one contiguous foreground segment: those frames carry
/// the (projected) query prototype plus Gaussian noise of `noise_std`, while
/// background frames are independent unit Gaussians. The query itself is
/// `m` noisy copies of the prototype, so foreground frames and query rows
/// agree up to noise and a model must align them to localize the segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_samples: usize,
    /// Frames per video.
    pub n: usize,
    /// Tokens per query.
    pub m: usize,
    pub d_v: usize,
    pub d_q: usize,
    /// Segment length bounds in frames, inclusive.
    pub min_seg_frames: usize,
    pub max_seg_frames: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_samples: 200,
            n: 64,
            m: 8,
            d_v: 32,
            d_q: 32,
            min_seg_frames: 8,
            max_seg_frames: 16,
            noise_std: 0.5,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be positive".into()));
        }
        if self.n == 0 || self.m == 0 || self.d_v == 0 || self.d_q == 0 {
            return Err(Error::Config("n, m, d_v, d_q must all be positive".into()));
        }
        if self.min_seg_frames < 1
            || self.min_seg_frames > self.max_seg_frames
            || self.max_seg_frames > self.n
        {
            return Err(Error::Config(format!(
                "segment bounds must satisfy 1 <= {} <= {} <= n = {}",
                self.min_seg_frames, self.max_seg_frames, self.n
            )));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

/// splitmix64 finalizer; decorrelates per-sample streams from (seed, index).
pub(crate) fn sub_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Features are quantized to f32 at generation time so that saving to blobs
/// and loading back reproduces them bit-exactly.
fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Generate a synthetic dataset. Deterministic for a fixed spec: each sample
/// draws from its own stream derived from (seed, sample index), so results
/// do not depend on generation order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<FeatureSample>> {
    spec.validate()?;
    // The cross-modal map from query space to video space is shared by the
    // whole dataset. With d_v == d_q it is the identity, which keeps
    // zero-noise foreground frames exactly equal to the prototype.
    let map: Option<Array2<f64>> = if spec.d_v == spec.d_q {
        None
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, u64::MAX));
        let scale = 1.0 / (spec.d_q as f64).sqrt();
        Some(Array2::from_shape_fn((spec.d_q, spec.d_v), |_| randn(&mut rng) * scale))
    };

    let mut samples = Vec::with_capacity(spec.num_samples);
    for idx in 0..spec.num_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, idx as u64));

        let proto = Array2::from_shape_fn((1, spec.d_q), |_| randn(&mut rng));
        let mapped: Array2<f64> = match &map {
            Some(m) => proto.dot(m),
            None => proto.clone(),
        };

        let seg_len = rng.gen_range(spec.min_seg_frames..=spec.max_seg_frames);
        let seg_start = rng.gen_range(0..=spec.n - seg_len);
        let seg_end = seg_start + seg_len;

        let mut video = Array2::<f64>::zeros((spec.n, spec.d_v));
        for i in 0..spec.n {
            for c in 0..spec.d_v {
                let value = if i >= seg_start && i < seg_end {
                    mapped[[0, c]] + spec.noise_std * randn(&mut rng)
                } else {
                    randn(&mut rng)
                };
                video[[i, c]] = quantize(value);
            }
        }

        let mut query = Array2::<f64>::zeros((spec.m, spec.d_q));
        for r in 0..spec.m {
            for c in 0..spec.d_q {
                query[[r, c]] = quantize(proto[[0, c]] + spec.noise_std * randn(&mut rng));
            }
        }

        let gt = TimeInterval::new(
            seg_start as f64 * SYNTHETIC_FRAME_DURATION,
            seg_end as f64 * SYNTHETIC_FRAME_DURATION,
            0.0,
        )?;
        let sample = FeatureSample {
            sample_id: format!("synth-{:05}", idx),
            video_features: video,
            query_features: query,
            frame_duration: SYNTHETIC_FRAME_DURATION,
            ground_truth: Some(gt),
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

/// One line of the manifest file.
#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    sample_id: String,
    video_blob_path: String,
    n: usize,
    d_v: usize,
    query_blob_path: String,
    m: usize,
    d_q: usize,
    frame_duration: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_end: Option<f64>,
}

fn write_blob(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(matrix.len() * 4);
    for &v in matrix.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path, rows: usize, cols: usize, sample_id: &str) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expect = rows * cols * 4;
    if bytes.len() != expect {
        return Err(Error::Data(format!(
            "sample {sample_id}: blob {} holds {} bytes, manifest declares {rows}x{cols} ({expect} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    let mut matrix = Array2::<f64>::zeros((rows, cols));
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(Error::Data(format!(
                "sample {sample_id}: non-finite value at flat index {i} of {}",
                path.display()
            )));
        }
        matrix[[i / cols, i % cols]] = v;
    }
    Ok(matrix)
}

/// Write `samples` under `dir` as `manifest.jsonl` plus one video and one
/// query blob per sample in `dir/blobs/`. Returns the manifest path.
pub fn save_manifest(samples: &[FeatureSample], dir: &Path) -> Result<PathBuf> {
    let blob_dir = dir.join("blobs");
    fs::create_dir_all(&blob_dir).map_err(|e| Error::io(&blob_dir, e))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut out = Vec::new();
    for sample in samples {
        sample.validate()?;
        let video_rel = format!("blobs/{}.video.f32", sample.sample_id);
        let query_rel = format!("blobs/{}.query.f32", sample.sample_id);
        write_blob(&dir.join(&video_rel), &sample.video_features)?;
        write_blob(&dir.join(&query_rel), &sample.query_features)?;
        let record = ManifestRecord {
            sample_id: sample.sample_id.clone(),
            video_blob_path: video_rel,
            n: sample.n(),
            d_v: sample.video_features.ncols(),
            query_blob_path: query_rel,
            m: sample.m(),
            d_q: sample.query_features.ncols(),
            frame_duration: sample.frame_duration,
            gt_start: sample.ground_truth.map(|g| g.start),
            gt_end: sample.ground_truth.map(|g| g.end),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Parse { path: manifest_path.clone(), message: e.to_string() })?;
        out.push(line);
    }
    let mut file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for line in &out {
        writeln!(file, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(manifest_path)
}

/// Load a dataset from a manifest file. Blob paths resolve relative to the
/// manifest's directory; every blob is shape-checked against its record.
pub fn load_manifest(path: &Path) -> Result<Vec<FeatureSample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", lineno + 1),
        })?;
        let video = read_blob(
            &base.join(&record.video_blob_path),
            record.n,
            record.d_v,
            &record.sample_id,
        )?;
        let query = read_blob(
            &base.join(&record.query_blob_path),
            record.m,
            record.d_q,
            &record.sample_id,
        )?;
        let ground_truth = match (record.gt_start, record.gt_end) {
            (Some(start), Some(end)) => Some(TimeInterval::new(start, end, 0.0).map_err(|e| {
                Error::Data(format!("sample {}: {e}", record.sample_id))
            })?),
            (None, None) => None,
            _ => {
                return Err(Error::Data(format!(
                    "sample {}: gt_start and gt_end must be present together",
                    record.sample_id
                )))
            }
        };
        let sample = FeatureSample {
            sample_id: record.sample_id,
            video_features: video,
            query_features: query,
            frame_duration: record.frame_duration,
            ground_truth,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

/// A fixed-size group of samples with explicit padding masks.
///
/// Mask rows are a prefix of trues followed by falses; padded positions in
/// [`Batch::padded_video`] / [`Batch::padded_query`] carry zero vectors.
/// Everything downstream excludes padded positions from reductions, so
/// appending padding to a batch never changes per-sample results.
#[derive(Debug, Clone)]
pub struct Batch {
    pub samples: Vec<FeatureSample>,
    /// K x n_max, true = real frame.
    pub video_pad_mask: Array2<bool>,
    /// K x m_max, true = real token.
    pub query_pad_mask: Array2<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_max(&self) -> usize {
        self.video_pad_mask.ncols()
    }

    pub fn m_max(&self) -> usize {
        self.query_pad_mask.ncols()
    }

    /// Number of real frames of sample `k`.
    pub fn n_valid(&self, k: usize) -> usize {
        self.samples[k].n()
    }

    /// Number of real query tokens of sample `k`.
    pub fn m_valid(&self, k: usize) -> usize {
        self.samples[k].m()
    }

    /// Video features of sample `k`, zero-padded to `n_max` rows.
    pub fn padded_video(&self, k: usize) -> Array2<f64> {
        pad_rows(&self.samples[k].video_features, self.n_max())
    }

    /// Query features of sample `k`, zero-padded to `m_max` rows.
    pub fn padded_query(&self, k: usize) -> Array2<f64> {
        pad_rows(&self.samples[k].query_features, self.m_max())
    }
}

fn pad_rows(x: &Array2<f64>, rows: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((rows, x.ncols()));
    out.slice_mut(ndarray::s![..x.nrows(), ..]).assign(x);
    out
}

/// Split samples into consecutive batches of at most `k`, padding each batch
/// to its own maxima.
pub fn batchify(samples: &[FeatureSample], k: usize) -> Result<Vec<Batch>> {
    if k == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::Data("cannot batch an empty sample list".into()));
    }
    let mut batches = Vec::with_capacity(samples.len().div_ceil(k));
    for chunk in samples.chunks(k) {
        let n_max = chunk.iter().map(|s| s.n()).max().unwrap();
        let m_max = chunk.iter().map(|s| s.m()).max().unwrap();
        let video_pad_mask =
            Array2::from_shape_fn((chunk.len(), n_max), |(i, j)| j < chunk[i].n());
        let query_pad_mask =
            Array2::from_shape_fn((chunk.len(), m_max), |(i, j)| j < chunk[i].m());
        batches.push(Batch { samples: chunk.to_vec(), video_pad_mask, query_pad_mask });
    }
    Ok(batches)
}
