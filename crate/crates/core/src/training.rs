//! Self-supervised training: crop sampling with augmentation, slice
//! masking, cosine learning-rate schedule, and SGD with momentum.

use std::f64::consts::PI;

use rand::Rng;
use thiserror::Error;

use crate::model::{
    boundary_masked_loss, forward, slice_mask, Mode, ModelError, ModelState,
};
use crate::rng::derive_rng;
use crate::tensor::{Tensor, TensorError};
use crate::volume::{BoundaryMask, ChannelStats, GrainMap, OrientationVolume, VolumeError};

const STREAM_SAMPLING: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("training configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite gradient in parameter {0}")]
    NonFinite(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Optimizer and schedule settings. Defaults follow the reference training
/// recipe; every field scales down for desk-size runs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr_peak: 0.01,
            warmup_steps: 8000,
            total_steps: 160_000,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 1,
            seed: 0,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(TrainingError::Config(format!(
                "warmup_steps {} must be smaller than total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size < 1 {
            return Err(TrainingError::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainingError::Config(format!(
                "momentum {} must be in [0, 1)",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Cosine warmup/decay: a half-cosine ramp from 0 to `lr_peak` over
/// [0, warmup), then a half-cosine decay back to 0 over [warmup, total].
/// Continuous, and peaks exactly at `warmup_steps`.
pub fn lr_schedule(step: u64, config: &TrainConfig) -> f64 {
    let step = step.min(config.total_steps);
    if step < config.warmup_steps {
        let t = step as f64 / config.warmup_steps as f64;
        config.lr_peak * (1.0 - (PI * t).cos()) / 2.0
    } else {
        let span = (config.total_steps - config.warmup_steps) as f64;
        if span == 0.0 {
            return 0.0;
        }
        let t = (step - config.warmup_steps) as f64 / span;
        config.lr_peak * (1.0 + (PI * t).cos()) / 2.0
    }
}

/// Augmentation settings. Geometric transforms are lattice-exact (axis
/// permutations, per-axis flips, quarter turns in the plane of the first
/// and third axes); color shifts are per-channel affine maps applied to the
/// normalized cubochoric channels.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub color_scale_range: [f64; 2],
    pub color_offset_range: [f64; 2],
    pub flips: bool,
    pub rotations: bool,
    pub permute_axes: bool,
}

impl Default for AugmentSpec {
    fn default() -> AugmentSpec {
        AugmentSpec {
            color_scale_range: [0.8, 1.2],
            color_offset_range: [-0.2, 0.2],
            flips: true,
            rotations: true,
            permute_axes: true,
        }
    }
}

/// Composition of an axis permutation, per-axis reversals, and quarter
/// turns: view axis `i` reads source axis `src_axis[i]`, optionally
/// reversed. Applying one to a volume and to its boundary mask commutes
/// with boundary extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatticeTransform {
    pub src_axis: [usize; 3],
    pub reversed: [bool; 3],
}

impl LatticeTransform {
    pub fn identity() -> LatticeTransform {
        LatticeTransform {
            src_axis: [0, 1, 2],
            reversed: [false; 3],
        }
    }

    pub fn from_parts(perm: [usize; 3], flips: [bool; 3], quarter_turns: u8) -> LatticeTransform {
        let mut t = LatticeTransform {
            src_axis: perm,
            reversed: flips,
        };
        // one quarter turn in the (first, third) axis plane:
        // B[i, y, j] = A[j, y, n-1-i]
        for _ in 0..(quarter_turns % 4) {
            let new0 = (t.src_axis[2], !t.reversed[2]);
            let new2 = (t.src_axis[0], t.reversed[0]);
            t.src_axis[0] = new0.0;
            t.reversed[0] = new0.1;
            t.src_axis[2] = new2.0;
            t.reversed[2] = new2.1;
        }
        t
    }

    /// Shape of the transformed view of a source with dims `src_dims`.
    pub fn view_dims(&self, src_dims: [usize; 3]) -> [usize; 3] {
        [
            src_dims[self.src_axis[0]],
            src_dims[self.src_axis[1]],
            src_dims[self.src_axis[2]],
        ]
    }

    /// Source coordinate backing view coordinate `v`.
    pub fn source_of(&self, v: [usize; 3], src_dims: [usize; 3]) -> [usize; 3] {
        let mut out = [0usize; 3];
        for i in 0..3 {
            let dim = src_dims[self.src_axis[i]];
            out[self.src_axis[i]] = if self.reversed[i] { dim - 1 - v[i] } else { v[i] };
        }
        out
    }

    /// Materializes the transformed grain map (used by tests and tooling).
    pub fn apply_to_map(&self, g: &GrainMap) -> GrainMap {
        let sdims = g.shape();
        let vdims = self.view_dims(sdims);
        let mut ids = Vec::with_capacity(g.ids().len());
        for i in 0..vdims[0] {
            for j in 0..vdims[1] {
                for k in 0..vdims[2] {
                    ids.push(g.get(self.source_of([i, j, k], sdims)));
                }
            }
        }
        GrainMap::from_raw(vdims, ids).expect("transform preserves voxel count")
    }

    /// Materializes the transformed boundary mask.
    pub fn apply_to_mask(&self, b: &BoundaryMask) -> BoundaryMask {
        let sdims = b.shape();
        let vdims = self.view_dims(sdims);
        let mut flags = Vec::with_capacity(vdims[0] * vdims[1] * vdims[2]);
        for i in 0..vdims[0] {
            for j in 0..vdims[1] {
                for k in 0..vdims[2] {
                    flags.push(b.get(self.source_of([i, j, k], sdims)));
                }
            }
        }
        BoundaryMask::from_raw(vdims, flags).expect("transform preserves voxel count")
    }
}

/// One pooled training volume: normalized values plus the boundary mask of
/// its grain map.
#[derive(Debug, Clone)]
pub struct TrainVolume {
    pub values: OrientationVolume,
    pub boundaries: BoundaryMask,
}

/// Normalizes a set of generated volumes with pooled statistics and
/// attaches boundary masks.
pub fn prepare_pool(
    volumes: &[(OrientationVolume, GrainMap)],
) -> Result<(Vec<TrainVolume>, ChannelStats), TrainingError> {
    if volumes.is_empty() {
        return Err(TrainingError::Data("empty training pool".into()));
    }
    let refs: Vec<&OrientationVolume> = volumes.iter().map(|(v, _)| v).collect();
    let stats = ChannelStats::from_volumes(&refs)?;
    let mut pool = Vec::with_capacity(volumes.len());
    for (v, g) in volumes {
        let (normed, _) = crate::volume::normalize_channels(v, Some(&stats))?;
        pool.push(TrainVolume {
            values: normed,
            boundaries: crate::volume::extract_boundaries(g),
        });
    }
    Ok((pool, stats))
}

/// One training unit: an augmented normalized crop, the masked slice index
/// (0-based along the second axis), and the boundary map of that slice.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub ground_truth: Tensor,
    pub masked_index: usize,
    pub boundary: Vec<bool>,
}

impl TrainingSample {
    /// Ground truth with the masked slice zeroed (elementwise mask).
    pub fn masked_input(&self) -> Result<Tensor, TensorError> {
        let s = self.ground_truth.shape();
        let mask = slice_mask([s[0], s[1], s[2]], s[3], self.masked_index);
        self.ground_truth.mul(&mask)
    }
}

const MAX_RESAMPLE_ATTEMPTS: usize = 100;

/// Draws one sample: volume choice, axis permutation, flips, quarter turns,
/// per-channel color shift, crop origin, and masked-slice index, in that
/// order, from the supplied RNG. Samples whose masked slice has no boundary
/// voxels are discarded and resampled.
pub fn sample_crop(
    pool: &[TrainVolume],
    crop_shape: [usize; 3],
    augment: &AugmentSpec,
    rng: &mut impl Rng,
) -> Result<TrainingSample, TrainingError> {
    if pool.is_empty() {
        return Err(TrainingError::Data("empty training pool".into()));
    }
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    for _ in 0..MAX_RESAMPLE_ATTEMPTS {
        let vol = &pool[rng.gen_range(0..pool.len())];
        let perm = if augment.permute_axes {
            PERMS[rng.gen_range(0..6)]
        } else {
            [0, 1, 2]
        };
        let flips = if augment.flips {
            [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)]
        } else {
            [false; 3]
        };
        let turns = if augment.rotations {
            rng.gen_range(0..4u8)
        } else {
            0
        };
        let mut color = [[1.0f64, 0.0f64]; 3];
        for ch in color.iter_mut() {
            ch[0] = rng.gen_range(augment.color_scale_range[0]..=augment.color_scale_range[1]);
            ch[1] = rng.gen_range(augment.color_offset_range[0]..=augment.color_offset_range[1]);
        }

        let transform = LatticeTransform::from_parts(perm, flips, turns);
        let sdims = vol.values.shape();
        let vdims = transform.view_dims(sdims);
        if vdims[0] < crop_shape[0] || vdims[1] < crop_shape[1] || vdims[2] < crop_shape[2] {
            return Err(TrainingError::Data(format!(
                "volume {sdims:?} cannot host a {crop_shape:?} crop under permutation {perm:?}"
            )));
        }
        let origin = [
            rng.gen_range(0..=vdims[0] - crop_shape[0]),
            rng.gen_range(0..=vdims[1] - crop_shape[1]),
            rng.gen_range(0..=vdims[2] - crop_shape[2]),
        ];
        // masked slice: one of the five central slices of the second axis
        let m = rng.gen_range(1..=crop_shape[1] - 2);

        let mut boundary = Vec::with_capacity(crop_shape[0] * crop_shape[2]);
        for i in 0..crop_shape[0] {
            for k in 0..crop_shape[2] {
                let src = transform.source_of(
                    [origin[0] + i, origin[1] + m, origin[2] + k],
                    sdims,
                );
                boundary.push(vol.boundaries.get(src));
            }
        }
        if !boundary.iter().any(|&b| b) {
            continue; // slice has no boundary voxels; resample
        }

        let mut data = Vec::with_capacity(crop_shape.iter().product::<usize>() * 3);
        for i in 0..crop_shape[0] {
            for j in 0..crop_shape[1] {
                for k in 0..crop_shape[2] {
                    let src = transform.source_of(
                        [origin[0] + i, origin[1] + j, origin[2] + k],
                        sdims,
                    );
                    let val = vol.values.get(src);
                    for ch in 0..3 {
                        data.push(color[ch][0] * val[ch] + color[ch][1]);
                    }
                }
            }
        }
        let ground_truth = Tensor::from_vec(
            &[crop_shape[0], crop_shape[1], crop_shape[2], 3],
            data,
        )?;
        return Ok(TrainingSample {
            ground_truth,
            masked_index: m,
            boundary,
        });
    }
    Err(TrainingError::Data(format!(
        "no crop with boundary voxels after {MAX_RESAMPLE_ATTEMPTS} attempts"
    )))
}

/// SGD with classic momentum and decoupled-from-nothing weight decay:
/// v <- momentum*v + (g + wd*theta); theta <- theta - lr(step)*v.
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(state: &ModelState) -> Sgd {
        Sgd {
            velocity: state.iter().map(|(_, _, v)| vec![0.0; v.len()]).collect(),
        }
    }

    pub fn step(
        &mut self,
        state: &mut ModelState,
        grads: &[(String, Vec<f64>)],
        step: u64,
        config: &TrainConfig,
    ) -> Result<(), TrainingError> {
        let lr = lr_schedule(step, config);
        for (slot, (name, grad)) in self.velocity.iter_mut().zip(grads) {
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainingError::NonFinite(name.clone()));
            }
            let theta = state.value_mut(name)?;
            for ((v, &g), t) in slot.iter_mut().zip(grad).zip(theta.iter_mut()) {
                *v = config.momentum * *v + (g + config.weight_decay * *t);
                *t -= lr * *v;
            }
        }
        Ok(())
    }
}

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Runs the sample -> forward -> loss -> backward -> update loop for
/// `total_steps` steps, recording the loss every step. `on_checkpoint`
/// fires every `checkpoint_every` steps (and at the end) when configured.
pub fn train(
    pool: &[TrainVolume],
    state: &mut ModelState,
    config: &TrainConfig,
    augment: &AugmentSpec,
    mut on_checkpoint: impl FnMut(u64, &ModelState),
) -> Result<Vec<TraceRow>, TrainingError> {
    config.validate()?;
    let model_config = state.config().clone();
    let crop = model_config.crop_shape;
    let mut sample_rng = derive_rng(config.seed, STREAM_SAMPLING, 0);
    let mut dropout_rng = derive_rng(config.seed, STREAM_DROPOUT, 0);
    let mut sgd = Sgd::new(state);
    let mut trace = Vec::with_capacity(config.total_steps as usize);

    for i in 0..config.total_steps {
        let bound = state.bind(true)?;
        let mut loss_sum = 0.0;
        for _ in 0..config.batch_size {
            let sample = sample_crop(pool, crop, augment, &mut sample_rng)?;
            let input = sample.masked_input()?;
            let mut mode = Mode::Train {
                rng: &mut dropout_rng,
            };
            let pred = forward(&bound, &model_config, &input, &mut mode)?;
            let loss = boundary_masked_loss(
                &pred,
                &sample.ground_truth,
                sample.masked_index,
                &sample.boundary,
            )?;
            loss_sum += loss.item()?;
            loss.scale(1.0 / config.batch_size as f64)?.backward()?;
        }
        let grads: Vec<(String, Vec<f64>)> = bound
            .iter()
            .map(|(n, t)| {
                (
                    n.to_string(),
                    t.take_grad().unwrap_or_else(|| vec![0.0; t.len()]),
                )
            })
            .collect();
        let step = i + 1;
        sgd.step(state, &grads, step, config)?;
        trace.push(TraceRow {
            step,
            lr: lr_schedule(step, config),
            loss: loss_sum / config.batch_size as f64,
        });
        if let Some(every) = config.checkpoint_every {
            if every > 0 && (step % every == 0 || step == config.total_steps) {
                on_checkpoint(step, state);
            }
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::rng_from_seed;
    use crate::volume::extract_boundaries;

    fn small_train_config(total: u64, warmup: u64) -> TrainConfig {
        TrainConfig {
            lr_peak: 0.01,
            warmup_steps: warmup,
            total_steps: total,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 1,
            seed: 11,
            checkpoint_every: None,
        }
    }

    #[test]
    fn schedule_hits_the_documented_points() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert!((lr_schedule(8000, &c) - 0.01).abs() < 1e-15);
        assert!(lr_schedule(160_000, &c).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_continuous_and_peaks_at_warmup() {
        let c = small_train_config(1000, 100);
        let mut max_lr = 0.0f64;
        let mut argmax = 0;
        let mut prev = lr_schedule(0, &c);
        for s in 1..=1000 {
            let lr = lr_schedule(s, &c);
            assert!(
                (lr - prev).abs() < c.lr_peak * 0.05,
                "jump at step {s}: {prev} -> {lr}"
            );
            if lr > max_lr {
                max_lr = lr;
                argmax = s;
            }
            prev = lr;
        }
        assert_eq!(argmax, 100);
        assert!((max_lr - c.lr_peak).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_zero_decay_is_identity() {
        let config = ModelConfig {
            layers: 0,
            heads: 1,
            embed_dim: 4,
            ff_dim: 4,
            dropout_p: 0.0,
            input_channels: 3,
            crop_shape: [4, 7, 4],
        };
        let mut state = ModelState::init(&config, 3).unwrap();
        let before: Vec<Vec<f64>> = state.iter().map(|(_, _, v)| v.to_vec()).collect();
        let mut sgd = Sgd::new(&state);
        let grads: Vec<(String, Vec<f64>)> = state
            .iter()
            .map(|(n, _, v)| (n.to_string(), vec![0.0; v.len()]))
            .collect();
        let tc = TrainConfig {
            weight_decay: 0.0,
            ..small_train_config(100, 10)
        };
        sgd.step(&mut state, &grads, 5, &tc).unwrap();
        let after: Vec<Vec<f64>> = state.iter().map(|(_, _, v)| v.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn sgd_momentum_recursion_matches_hand_computation() {
        // theta=1, g=1, v=0, wd=0, constant lr 0.1:
        // step1: v=1,   theta=0.9
        // step2: v=1.9, theta=0.71
        let config = ModelConfig {
            layers: 0,
            heads: 1,
            embed_dim: 1,
            ff_dim: 1,
            dropout_p: 0.0,
            input_channels: 1,
            crop_shape: [1, 1, 1],
        };
        let mut state = ModelState::init(&config, 0).unwrap();
        for (_, v) in state.values_mut() {
            v.fill(1.0);
        }
        let names: Vec<String> = state.iter().map(|(n, _, _)| n.to_string()).collect();
        let grads: Vec<(String, Vec<f64>)> = state
            .iter()
            .map(|(n, _, v)| (n.to_string(), vec![1.0; v.len()]))
            .collect();
        // schedule that returns lr=0.1 at the probed step
        let tc = TrainConfig {
            lr_peak: 0.1,
            warmup_steps: 1,
            total_steps: 3,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 1,
            seed: 0,
            checkpoint_every: None,
        };
        assert!((lr_schedule(1, &tc) - 0.1).abs() < 1e-15);
        let mut sgd = Sgd::new(&state);
        sgd.step(&mut state, &grads, 1, &tc).unwrap();
        let theta1 = state.value(&names[0]).unwrap()[0];
        assert!((theta1 - 0.9).abs() < 1e-12);
        sgd.step(&mut state, &grads, 1, &tc).unwrap();
        let theta2 = state.value(&names[0]).unwrap()[0];
        assert!((theta2 - 0.71).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_non_finite_gradients() {
        let config = ModelConfig {
            layers: 0,
            heads: 1,
            embed_dim: 2,
            ff_dim: 2,
            dropout_p: 0.0,
            input_channels: 1,
            crop_shape: [1, 1, 1],
        };
        let mut state = ModelState::init(&config, 0).unwrap();
        let mut grads: Vec<(String, Vec<f64>)> = state
            .iter()
            .map(|(n, _, v)| (n.to_string(), vec![0.0; v.len()]))
            .collect();
        grads[0].1[0] = f64::NAN;
        let bad_name = grads[0].0.clone();
        let mut sgd = Sgd::new(&state);
        match sgd.step(&mut state, &grads, 1, &small_train_config(10, 1)) {
            Err(TrainingError::NonFinite(name)) => assert_eq!(name, bad_name),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    fn checkerboard_pool(shape: [usize; 3], block: usize) -> Vec<TrainVolume> {
        let mut v = OrientationVolume::zeros(shape);
        let mut ids = Vec::new();
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    let parity = ((i / block) + (j / block) + (k / block)) % 2;
                    let val = if parity == 0 { 0.7 } else { -0.7 };
                    v.set([i, j, k], [val, val * 0.5, -val]);
                    ids.push(parity as u32 + 1);
                }
            }
        }
        // distinct blocks of the same parity are separate grains spatially,
        // but for boundary purposes the two-value map suffices
        let g = GrainMap::from_raw(shape, ids).unwrap();
        vec![TrainVolume {
            boundaries: extract_boundaries(&g),
            values: v,
        }]
    }

    #[test]
    fn sample_crop_is_reproducible_and_masks_one_slice() {
        let pool = checkerboard_pool([12, 12, 12], 3);
        let crop = [8, 7, 8];
        let aug = AugmentSpec::default();
        let mut r1 = rng_from_seed(21);
        let s1 = sample_crop(&pool, crop, &aug, &mut r1).unwrap();
        let mut r2 = rng_from_seed(21);
        let s2 = sample_crop(&pool, crop, &aug, &mut r2).unwrap();
        assert_eq!(s1.ground_truth.data(), s2.ground_truth.data());
        assert_eq!(s1.masked_index, s2.masked_index);
        assert_eq!(s1.boundary, s2.boundary);
        assert!((1..=5).contains(&s1.masked_index));

        // mask introduces exactly n1*n3*channels zeros at the masked slice
        let masked = s1.masked_input().unwrap();
        let mut zeroed = 0;
        for (i, (&m, &g)) in masked
            .data()
            .iter()
            .zip(s1.ground_truth.data())
            .enumerate()
        {
            let j = (i / (8 * 3)) % 7;
            if j == s1.masked_index {
                assert_eq!(m, 0.0);
                zeroed += 1;
            } else {
                assert_eq!(m, g);
            }
        }
        assert_eq!(zeroed, 8 * 8 * 3);
    }

    #[test]
    fn uniform_pool_exhausts_resampling() {
        let mut v = OrientationVolume::zeros([10, 10, 10]);
        for f in 0..v.num_voxels() {
            v.data_mut()[f * 3..f * 3 + 3].copy_from_slice(&[0.4, 0.1, -0.3]);
        }
        let g = crate::volume::segment_grains(&v, 0.0).unwrap();
        let pool = vec![TrainVolume {
            boundaries: extract_boundaries(&g),
            values: v,
        }];
        let mut rng = rng_from_seed(5);
        match sample_crop(&pool, [8, 7, 8], &AugmentSpec::default(), &mut rng) {
            Err(TrainingError::Data(_)) => {}
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn lattice_transforms_commute_with_boundary_extraction() {
        let mut rng = rng_from_seed(6);
        let ids: Vec<u32> = (0..6 * 7 * 5)
            .map(|_| rng.gen_range(1..4u32))
            .collect();
        let g = GrainMap::from_raw([6, 7, 5], ids).unwrap();
        let b = extract_boundaries(&g);
        let cases = [
            LatticeTransform::from_parts([2, 0, 1], [false, true, false], 0),
            LatticeTransform::from_parts([0, 1, 2], [true, true, true], 0),
            LatticeTransform::from_parts([1, 2, 0], [false, false, false], 1),
            LatticeTransform::from_parts([2, 1, 0], [true, false, true], 3),
        ];
        for t in cases {
            let tb = t.apply_to_mask(&b);
            let bt = extract_boundaries(&t.apply_to_map(&g));
            assert_eq!(tb.flags(), bt.flags(), "transform {t:?}");
        }
    }

    #[test]
    fn rotation_preserves_grain_id_set() {
        let mut rng = rng_from_seed(7);
        let ids: Vec<u32> = (0..5 * 4 * 5).map(|_| rng.gen_range(1..6u32)).collect();
        let g = GrainMap::from_raw([5, 4, 5], ids).unwrap();
        let t = LatticeTransform::from_parts([0, 1, 2], [false; 3], 1);
        let tg = t.apply_to_map(&g);
        let set = |m: &GrainMap| {
            let mut s: Vec<u32> = m.ids().to_vec();
            s.sort_unstable();
            s.dedup();
            s
        };
        assert_eq!(set(&g), set(&tg));
    }

    fn tiny_model() -> (ModelConfig, ModelState) {
        let config = ModelConfig {
            layers: 1,
            heads: 2,
            embed_dim: 4,
            ff_dim: 4,
            dropout_p: 0.1,
            input_channels: 3,
            crop_shape: [8, 7, 8],
        };
        let state = ModelState::init(&config, 9).unwrap();
        (config, state)
    }

    #[test]
    fn zero_steps_leaves_the_model_unchanged() {
        let pool = checkerboard_pool([12, 12, 12], 3);
        let (_, mut state) = tiny_model();
        let before: Vec<Vec<f64>> = state.iter().map(|(_, _, v)| v.to_vec()).collect();
        let tc = TrainConfig {
            total_steps: 0,
            warmup_steps: 0,
            ..small_train_config(10, 1)
        };
        let trace = train(&pool, &mut state, &tc, &AugmentSpec::default(), |_, _| {}).unwrap();
        assert!(trace.is_empty());
        let after: Vec<Vec<f64>> = state.iter().map(|(_, _, v)| v.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn fixed_seed_training_is_reproducible() {
        let pool = checkerboard_pool([12, 12, 12], 3);
        let tc = small_train_config(8, 2);
        let (_, mut s1) = tiny_model();
        let t1 = train(&pool, &mut s1, &tc, &AugmentSpec::default(), |_, _| {}).unwrap();
        let (_, mut s2) = tiny_model();
        let t2 = train(&pool, &mut s2, &tc, &AugmentSpec::default(), |_, _| {}).unwrap();
        assert_eq!(t1, t2);
        for ((_, _, v1), (_, _, v2)) in s1.iter().zip(s2.iter()) {
            assert_eq!(v1, v2);
        }
        assert!(t1.iter().all(|row| row.loss.is_finite()));
    }

    #[test]
    fn checkpoint_callback_fires_on_schedule() {
        let pool = checkerboard_pool([12, 12, 12], 3);
        let (_, mut state) = tiny_model();
        let tc = TrainConfig {
            checkpoint_every: Some(3),
            ..small_train_config(7, 2)
        };
        let mut seen = Vec::new();
        train(&pool, &mut state, &tc, &AugmentSpec::default(), |step, _| {
            seen.push(step)
        })
        .unwrap();
        assert_eq!(seen, vec![3, 6, 7]);
    }
}
