//! Evaluation harness: partitioning volumes into samples, accuracy metrics,
//! per-baseline improvement distributions, and the method-comparison driver.

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{forward, slice_mask, Mode, ModelError, ModelState};
use crate::recovery::{
    copy_next, copy_previous, knn_vote, project, RecoveryError, RecoveryInput,
};
use crate::rng::derive_rng;
use crate::stats::mean_std;
use crate::tensor::{Tensor, TensorError};
use crate::volume::{
    average_orientations, extract_boundaries, BoundaryMask, ChannelStats, GrainDictionary,
    GrainMap, OrientationVolume, VolumeError,
};

const STREAM_PARTITION: u64 = 10;
const STREAM_KNN: u64 = 11;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("partition error: {0}")]
    Partition(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A volume prepared for evaluation: raw per-grain-uniform values, IDs,
/// boundaries, and the grain dictionary.
#[derive(Debug, Clone)]
pub struct EvalVolume {
    pub values: OrientationVolume,
    pub ids: GrainMap,
    pub boundaries: BoundaryMask,
    pub dictionary: GrainDictionary,
}

impl EvalVolume {
    pub fn new(values: OrientationVolume, ids: GrainMap) -> Result<EvalVolume, EvalError> {
        let (values, dictionary) = average_orientations(&ids, &values)?;
        let boundaries = extract_boundaries(&ids);
        Ok(EvalVolume {
            values,
            ids,
            boundaries,
            dictionary,
        })
    }
}

/// One evaluation unit: a segment of a volume with one masked interior
/// slice. Stores indices; voxel data is extracted on demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalSample {
    pub volume: usize,
    pub origin: [usize; 3],
    pub shape: [usize; 3],
    /// Masked slice, 0-based along the segment's second axis (1..=shape-2).
    pub masked_index: usize,
}

impl EvalSample {
    fn slice_ids(&self, vol: &EvalVolume, offset: usize) -> Vec<u32> {
        let [s0, _, s2] = self.shape;
        let mut out = Vec::with_capacity(s0 * s2);
        for i in 0..s0 {
            for k in 0..s2 {
                out.push(vol.ids.get([
                    self.origin[0] + i,
                    self.origin[1] + offset,
                    self.origin[2] + k,
                ]));
            }
        }
        out
    }

    fn slice_boundary(&self, vol: &EvalVolume) -> Vec<bool> {
        let [s0, _, s2] = self.shape;
        let mut out = Vec::with_capacity(s0 * s2);
        for i in 0..s0 {
            for k in 0..s2 {
                out.push(vol.boundaries.get([
                    self.origin[0] + i,
                    self.origin[1] + self.masked_index,
                    self.origin[2] + k,
                ]));
            }
        }
        out
    }

    fn raw_crop(&self, vol: &EvalVolume) -> Vec<f64> {
        let [s0, s1, s2] = self.shape;
        let mut out = Vec::with_capacity(s0 * s1 * s2 * 3);
        for i in 0..s0 {
            for j in 0..s1 {
                for k in 0..s2 {
                    let v = vol.values.get([
                        self.origin[0] + i,
                        self.origin[1] + j,
                        self.origin[2] + k,
                    ]);
                    out.extend_from_slice(&v);
                }
            }
        }
        out
    }

    /// Observed-ID dictionary and recovery input for this sample. The
    /// prediction defaults to zeros; the caller overwrites it for
    /// model-driven recovery.
    fn recovery_input(&self, vol: &EvalVolume) -> RecoveryInput {
        let prev_ids = self.slice_ids(vol, self.masked_index - 1);
        let next_ids = self.slice_ids(vol, self.masked_index + 1);
        let mut observed: Vec<u32> = prev_ids.iter().chain(next_ids.iter()).cloned().collect();
        observed.sort_unstable();
        observed.dedup();
        let dictionary: GrainDictionary = observed
            .iter()
            .map(|id| (*id, vol.dictionary[id]))
            .collect();
        let [s0, _, s2] = self.shape;
        RecoveryInput {
            rows: s0,
            cols: s2,
            pred_slice: vec![0.0; s0 * s2 * 3],
            prev_ids,
            next_ids,
            dictionary,
        }
    }
}

/// Tiles each volume into nonoverlapping segments (remainder voxels at the
/// high end of each axis are dropped), masks one of the five central slices
/// of each segment with a seeded per-segment RNG, and discards segments
/// whose masked slice has no boundary voxels.
pub fn partition(
    volumes: &[EvalVolume],
    segment_shape: [usize; 3],
    seed: u64,
) -> Result<Vec<EvalSample>, EvalError> {
    if segment_shape[1] < 3 {
        return Err(EvalError::Partition(
            "segments need at least 3 slices along the second axis".into(),
        ));
    }
    let mut samples = Vec::new();
    let mut segment_counter = 0u64;
    for (vi, vol) in volumes.iter().enumerate() {
        let dims = vol.values.shape();
        let tiles = [
            dims[0] / segment_shape[0],
            dims[1] / segment_shape[1],
            dims[2] / segment_shape[2],
        ];
        if tiles.iter().any(|&t| t == 0) {
            return Err(EvalError::Partition(format!(
                "volume {vi} of shape {dims:?} is smaller than one {segment_shape:?} segment"
            )));
        }
        for ti in 0..tiles[0] {
            for tj in 0..tiles[1] {
                for tk in 0..tiles[2] {
                    let mut rng = derive_rng(seed, STREAM_PARTITION, segment_counter);
                    segment_counter += 1;
                    let masked_index = rand::Rng::gen_range(&mut rng, 1..=segment_shape[1] - 2);
                    let sample = EvalSample {
                        volume: vi,
                        origin: [
                            ti * segment_shape[0],
                            tj * segment_shape[1],
                            tk * segment_shape[2],
                        ],
                        shape: segment_shape,
                        masked_index,
                    };
                    if sample.slice_boundary(vol).iter().any(|&b| b) {
                        samples.push(sample);
                    }
                }
            }
        }
    }
    Ok(samples)
}

/// Fraction of voxels with matching IDs.
pub fn overall_accuracy(pred: &[u32], truth: &[u32]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(EvalError::Usage(format!(
            "accuracy needs equal nonempty slices, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Match fraction restricted to ground-truth boundary voxels.
pub fn boundary_accuracy(
    pred: &[u32],
    truth: &[u32],
    boundary: &[bool],
) -> Result<f64, EvalError> {
    if pred.len() != truth.len() || pred.len() != boundary.len() {
        return Err(EvalError::Usage(
            "accuracy needs equally shaped slices and boundary map".into(),
        ));
    }
    let total = boundary.iter().filter(|&&b| b).count();
    if total == 0 {
        return Err(EvalError::Metric(
            "no boundary voxels in the reference slice".into(),
        ));
    }
    let hits = pred
        .iter()
        .zip(truth)
        .zip(boundary)
        .filter(|((a, b), &e)| e && a == b)
        .count();
    Ok(hits as f64 / total as f64)
}

/// Per-sample differences metric(method) - metric(baseline).
pub fn improvements(method: &[f64], baseline: &[f64]) -> Result<Vec<f64>, EvalError> {
    if method.len() != baseline.len() {
        return Err(EvalError::Usage(format!(
            "improvement needs matched sample sets, got {} and {}",
            method.len(),
            baseline.len()
        )));
    }
    Ok(method.iter().zip(baseline).map(|(a, b)| a - b).collect())
}

/// Five-number summary plus mean and standard deviation, for box plots.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct QuantileSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Result<QuantileSummary, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Usage("cannot summarize an empty set".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| -> f64 {
        let pos = q * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    let (mean, std) = mean_std(&sorted);
    Ok(QuantileSummary {
        min: sorted[0],
        q1: quantile(0.25),
        median: quantile(0.5),
        q3: quantile(0.75),
        max: sorted[sorted.len() - 1],
        mean,
        std,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Transformer,
    KnnVote,
    CopyPrevious,
    CopyNext,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Transformer,
        Method::KnnVote,
        Method::CopyPrevious,
        Method::CopyNext,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Transformer => "transformer",
            Method::KnnVote => "knn_vote",
            Method::CopyPrevious => "copy_previous",
            Method::CopyNext => "copy_next",
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct SampleScore {
    pub sample: usize,
    pub method: Method,
    pub overall: f64,
    pub boundary: f64,
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub overall_mean: f64,
    pub overall_std: f64,
    pub boundary_mean: f64,
    pub boundary_std: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ImprovementSummary {
    pub baseline: Method,
    pub metric: String,
    pub summary: QuantileSummary,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub scores: Vec<SampleScore>,
    pub methods: Vec<MethodSummary>,
    /// Transformer-minus-baseline distributions, when the transformer ran.
    pub improvements: Vec<ImprovementSummary>,
}

impl EvalReport {
    /// Per-sample scores as CSV (sample, method, overall, boundary).
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("sample,method,overall_accuracy,boundary_accuracy\n");
        for s in &self.scores {
            out.push_str(&format!(
                "{},{},{:.17},{:.17}\n",
                s.sample,
                s.method.name(),
                s.overall,
                s.boundary
            ));
        }
        out
    }

    /// Per-method means and deviations as CSV.
    pub fn summary_csv(&self) -> String {
        let mut out =
            String::from("method,overall_mean,overall_std,boundary_mean,boundary_std\n");
        for m in &self.methods {
            out.push_str(&format!(
                "{},{:.17},{:.17},{:.17},{:.17}\n",
                m.method.name(),
                m.overall_mean,
                m.overall_std,
                m.boundary_mean,
                m.boundary_std
            ));
        }
        out
    }
}

/// Trained model plus the normalization statistics recorded at training
/// time.
pub struct TrainedModel<'a> {
    pub state: &'a ModelState,
    pub stats: &'a ChannelStats,
}

/// Recovers every sample with every requested method and aggregates
/// accuracies. Samples run in parallel; per-sample RNGs derive from
/// (seed, sample index), so the report is identical for any worker count.
pub fn run_comparison(
    volumes: &[EvalVolume],
    samples: &[EvalSample],
    model: Option<&TrainedModel>,
    methods: &[Method],
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if methods.is_empty() {
        return Err(EvalError::Usage("no methods requested".into()));
    }
    if methods.contains(&Method::Transformer) && model.is_none() {
        return Err(EvalError::Usage(
            "transformer evaluation needs a trained model".into(),
        ));
    }
    if let Some(m) = model {
        let crop = m.state.config().crop_shape;
        if samples.iter().any(|s| s.shape != crop) {
            return Err(EvalError::Usage(format!(
                "model crop shape {crop:?} does not match the sample segment shape"
            )));
        }
    }

    let per_sample: Result<Vec<Vec<SampleScore>>, EvalError> = samples
        .par_iter()
        .enumerate()
        .map(|(si, sample)| {
            let vol = &volumes[sample.volume];
            let truth = sample.slice_ids(vol, sample.masked_index);
            let boundary = sample.slice_boundary(vol);
            let mut input = sample.recovery_input(vol);
            let mut scores = Vec::with_capacity(methods.len());
            for &method in methods {
                let recovered = match method {
                    Method::CopyPrevious => copy_previous(&input),
                    Method::CopyNext => copy_next(&input),
                    Method::KnnVote => {
                        let mut rng = derive_rng(seed, STREAM_KNN, si as u64);
                        knn_vote(&input, &mut rng)?
                    }
                    Method::Transformer => {
                        let tm = model.expect("checked above");
                        let raw = sample.raw_crop(vol);
                        let normalized: Vec<f64> = raw
                            .chunks(3)
                            .flat_map(|v| tm.stats.apply([v[0], v[1], v[2]]))
                            .collect();
                        let [s0, s1, s2] = sample.shape;
                        let gt = Tensor::from_vec(&[s0, s1, s2, 3], normalized)?;
                        let mask = slice_mask(sample.shape, 3, sample.masked_index);
                        let masked = gt.mul(&mask)?;
                        let bound = tm.state.bind(false)?;
                        let pred = forward(
                            &bound,
                            tm.state.config(),
                            &masked,
                            &mut Mode::Eval,
                        )?;
                        let pred_slice = pred.index_axis(1, sample.masked_index)?;
                        input.pred_slice = pred_slice
                            .data()
                            .chunks(3)
                            .flat_map(|v| tm.stats.invert([v[0], v[1], v[2]]))
                            .collect();
                        project(&input)?
                    }
                };
                scores.push(SampleScore {
                    sample: si,
                    method,
                    overall: overall_accuracy(&recovered, &truth)?,
                    boundary: boundary_accuracy(&recovered, &truth, &boundary)?,
                });
            }
            Ok(scores)
        })
        .collect();
    let scores: Vec<SampleScore> = per_sample?.into_iter().flatten().collect();

    let mut methods_summary = Vec::new();
    for &method in methods {
        let overall: Vec<f64> = scores
            .iter()
            .filter(|s| s.method == method)
            .map(|s| s.overall)
            .collect();
        let bnd: Vec<f64> = scores
            .iter()
            .filter(|s| s.method == method)
            .map(|s| s.boundary)
            .collect();
        if overall.is_empty() {
            continue;
        }
        let (om, os) = mean_std(&overall);
        let (bm, bs) = mean_std(&bnd);
        methods_summary.push(MethodSummary {
            method,
            overall_mean: om,
            overall_std: os,
            boundary_mean: bm,
            boundary_std: bs,
        });
    }

    let mut improvement_summaries = Vec::new();
    if methods.contains(&Method::Transformer) {
        let pull = |method: Method, f: fn(&SampleScore) -> f64| -> Vec<f64> {
            scores
                .iter()
                .filter(|s| s.method == method)
                .map(f)
                .collect()
        };
        let t_overall = pull(Method::Transformer, |s| s.overall);
        let t_boundary = pull(Method::Transformer, |s| s.boundary);
        for &baseline in methods {
            if baseline == Method::Transformer {
                continue;
            }
            let b_overall = pull(baseline, |s| s.overall);
            let b_boundary = pull(baseline, |s| s.boundary);
            improvement_summaries.push(ImprovementSummary {
                baseline,
                metric: "overall_accuracy".into(),
                summary: summarize(&improvements(&t_overall, &b_overall)?)?,
            });
            improvement_summaries.push(ImprovementSummary {
                baseline,
                metric: "boundary_accuracy".into(),
                summary: summarize(&improvements(&t_boundary, &b_boundary)?)?,
            });
        }
    }

    Ok(EvalReport {
        scores,
        methods: methods_summary,
        improvements: improvement_summaries,
    })
}
