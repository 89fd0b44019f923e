//! Synthetic polycrystal generation at desk scale.
//!
//! Grains come from an additively weighted (Laguerre) tessellation: seed
//! count is chosen so the expected grain volume matches a sphere whose
//! diameter is `mean_grain_size * voxels_per_unit` voxels, per-seed radii
//! are lognormal, and every voxel joins the seed minimizing
//! `|x - s|^2 - r^2`. Each grain gets an independent uniformly random
//! orientation. Twin lamellae are planar slabs (parallel within a grain,
//! thickness 1..=3 voxels) carrying a new grain ID and an orientation
//! rotated 60 degrees about a random axis from the parent. The result is
//! canonicalized by exact-value segmentation, small-grain removal, and
//! per-grain averaging, which makes the ID map and the orientation field
//! consistent by construction.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use rayon::prelude::*;
use thiserror::Error;

use crate::orientation::{
    quaternion_to_cubochoric, random_quaternion, random_unit_vector, UnitQuaternion,
};
use crate::rng::rng_from_seed;
use crate::stats::{inverse_normal_cdf, linear_fit};
use crate::volume::{
    average_orientations, remove_small_grains, segment_grains, GrainMap, OrientationVolume,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("generation error: {0}")]
    Generation(String),
    #[error("statistics error: {0}")]
    Statistics(String),
    #[error(transparent)]
    Volume(#[from] crate::volume::VolumeError),
}

/// Settings for one synthetic volume.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub shape: [usize; 3],
    /// Unitless linear grain scale; the mean grain diameter in voxels is
    /// `mean_grain_size * voxels_per_unit`.
    pub mean_grain_size: f64,
    /// Poisson rate of twin lamellae per grain.
    pub mean_twins_per_grain: f64,
    pub seed: u64,
    /// Voxels per unit of `mean_grain_size` (granularity knob).
    #[serde(default = "default_voxels_per_unit")]
    pub voxels_per_unit: f64,
    /// Lognormal sigma of seed radii.
    #[serde(default = "default_radius_sigma")]
    pub radius_lognormal_sigma: f64,
    /// Grains below this voxel count are absorbed into neighbors.
    #[serde(default = "default_min_grain_voxels")]
    pub min_grain_voxels: usize,
}

fn default_voxels_per_unit() -> f64 {
    4.0
}

fn default_radius_sigma() -> f64 {
    0.4
}

fn default_min_grain_voxels() -> usize {
    27
}

impl GenSpec {
    pub fn new(shape: [usize; 3], mean_grain_size: f64, mean_twins_per_grain: f64, seed: u64) -> GenSpec {
        GenSpec {
            shape,
            mean_grain_size,
            mean_twins_per_grain,
            seed,
            voxels_per_unit: default_voxels_per_unit(),
            radius_lognormal_sigma: default_radius_sigma(),
            min_grain_voxels: default_min_grain_voxels(),
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.shape.iter().any(|&d| d == 0) {
            return Err(SynthError::Generation(format!(
                "every dimension must be at least 1, got {:?}",
                self.shape
            )));
        }
        let total = self.shape.iter().product::<usize>();
        if total < self.min_grain_voxels {
            return Err(SynthError::Generation(format!(
                "shape {:?} ({} voxels) is too small to host any grain of {} voxels",
                self.shape, total, self.min_grain_voxels
            )));
        }
        if !(self.mean_grain_size > 0.0) || !(self.voxels_per_unit > 0.0) {
            return Err(SynthError::Generation(
                "mean_grain_size and voxels_per_unit must be positive".into(),
            ));
        }
        if self.mean_twins_per_grain < 0.0 {
            return Err(SynthError::Generation(
                "mean_twins_per_grain must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

struct SeedPoint {
    pos: [f64; 3],
    weight: f64, // r^2
}

/// Uniform bucket grid for exact nearest-power-seed queries.
struct SeedGrid {
    cell: f64,
    dims: [usize; 3],
    buckets: Vec<Vec<u32>>,
    max_weight: f64,
}

impl SeedGrid {
    fn build(seeds: &[SeedPoint], shape: [usize; 3], cell: f64) -> SeedGrid {
        let dims = [
            (shape[0] as f64 / cell).ceil().max(1.0) as usize,
            (shape[1] as f64 / cell).ceil().max(1.0) as usize,
            (shape[2] as f64 / cell).ceil().max(1.0) as usize,
        ];
        let mut buckets = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        for (i, s) in seeds.iter().enumerate() {
            let b = [
                ((s.pos[0] / cell) as usize).min(dims[0] - 1),
                ((s.pos[1] / cell) as usize).min(dims[1] - 1),
                ((s.pos[2] / cell) as usize).min(dims[2] - 1),
            ];
            buckets[(b[0] * dims[1] + b[1]) * dims[2] + b[2]].push(i as u32);
        }
        let max_weight = seeds.iter().map(|s| s.weight).fold(0.0, f64::max);
        SeedGrid {
            cell,
            dims,
            buckets,
            max_weight,
        }
    }

    /// Seed index minimizing the power distance to `p`; ties go to the
    /// lowest index. Shell search with a conservative lower bound keeps the
    /// result exact.
    fn nearest(&self, seeds: &[SeedPoint], p: [f64; 3]) -> u32 {
        let home = [
            ((p[0] / self.cell) as usize).min(self.dims[0] - 1),
            ((p[1] / self.cell) as usize).min(self.dims[1] - 1),
            ((p[2] / self.cell) as usize).min(self.dims[2] - 1),
        ];
        let mut best: Option<(f64, u32)> = None;
        let max_shell = self.dims.iter().max().unwrap() + 1;
        for shell in 0..=max_shell {
            if let Some((bp, _)) = best {
                // any seed in a bucket at Chebyshev distance `shell` is at
                // least (shell-1)*cell away
                if shell >= 2 {
                    let lower = (shell as f64 - 1.0) * self.cell;
                    if lower * lower - self.max_weight > bp {
                        break;
                    }
                }
            }
            let s = shell as isize;
            for di in -s..=s {
                let bi = home[0] as isize + di;
                if bi < 0 || bi >= self.dims[0] as isize {
                    continue;
                }
                for dj in -s..=s {
                    let bj = home[1] as isize + dj;
                    if bj < 0 || bj >= self.dims[1] as isize {
                        continue;
                    }
                    for dk in -s..=s {
                        // only the surface of the shell
                        if di.abs().max(dj.abs()).max(dk.abs()) != s {
                            continue;
                        }
                        let bk = home[2] as isize + dk;
                        if bk < 0 || bk >= self.dims[2] as isize {
                            continue;
                        }
                        let bucket = &self.buckets[((bi as usize) * self.dims[1]
                            + bj as usize)
                            * self.dims[2]
                            + bk as usize];
                        for &si in bucket {
                            let sd = &seeds[si as usize];
                            let dx = p[0] - sd.pos[0];
                            let dy = p[1] - sd.pos[1];
                            let dz = p[2] - sd.pos[2];
                            let power = dx * dx + dy * dy + dz * dz - sd.weight;
                            let better = match best {
                                None => true,
                                Some((bp, bi_)) => {
                                    power < bp || (power == bp && si < bi_)
                                }
                            };
                            if better {
                                best = Some((power, si));
                            }
                        }
                    }
                }
            }
        }
        best.expect("at least one seed exists").1
    }
}

/// Generates an orientation volume and its grain map.
///
/// All randomness flows through one stream in a fixed order: seed positions,
/// then radii, then per-cell orientations, then per-grain twin draws
/// (ascending grain ID). Voxel assignment itself consumes no randomness, so
/// parallel execution cannot perturb the output.
pub fn generate(spec: &GenSpec) -> Result<(OrientationVolume, GrainMap), SynthError> {
    spec.validate()?;
    let shape = spec.shape;
    let total_voxels = shape.iter().product::<usize>();
    let mut rng = rng_from_seed(spec.seed);

    // expected grain volume = sphere of diameter d voxels
    let d = spec.mean_grain_size * spec.voxels_per_unit;
    let expected_volume = PI / 6.0 * d * d * d;
    let n_seeds = ((total_voxels as f64 / expected_volume).round() as usize).max(1);

    let mut seeds = Vec::with_capacity(n_seeds);
    for _ in 0..n_seeds {
        let pos = [
            rng.gen_range(0.0..shape[0] as f64),
            rng.gen_range(0.0..shape[1] as f64),
            rng.gen_range(0.0..shape[2] as f64),
        ];
        seeds.push(SeedPoint { pos, weight: 0.0 });
    }
    let radius_dist = LogNormal::new((d / 2.0).ln(), spec.radius_lognormal_sigma)
        .map_err(|e| SynthError::Generation(format!("bad radius distribution: {e}")))?;
    for s in seeds.iter_mut() {
        let r: f64 = radius_dist.sample(&mut rng);
        s.weight = r * r;
    }
    let mut cell_quats: Vec<UnitQuaternion> = Vec::with_capacity(n_seeds);
    for _ in 0..n_seeds {
        cell_quats.push(random_quaternion(&mut rng));
    }

    // Laguerre assignment (exact, deterministic, parallel over slabs)
    let [_, n2, n3] = shape;
    let mut cell_of = vec![0u32; total_voxels];
    if n_seeds == 1 {
        // single cell; nothing to search
    } else {
        let bucket_edge = (d / 2.0).max(2.0);
        let grid = SeedGrid::build(&seeds, shape, bucket_edge);
        cell_of
            .par_chunks_mut(n2 * n3)
            .enumerate()
            .for_each(|(i, slab)| {
                for j in 0..n2 {
                    for k in 0..n3 {
                        let p = [i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5];
                        slab[j * n3 + k] = grid.nearest(&seeds, p);
                    }
                }
            });
    }

    // twin lamellae: per cell, k ~ Poisson(rate) parallel slabs
    let mut owner: Vec<u32> = cell_of.clone(); // current label per voxel
    let mut label_quats = cell_quats.clone();
    if spec.mean_twins_per_grain > 0.0 {
        let poisson = Poisson::new(spec.mean_twins_per_grain)
            .map_err(|e| SynthError::Generation(format!("bad twin rate: {e}")))?;
        // voxel lists per original cell, in row-major order
        let mut cell_voxels: Vec<Vec<u32>> = vec![Vec::new(); n_seeds];
        for (f, &c) in cell_of.iter().enumerate() {
            cell_voxels[c as usize].push(f as u32);
        }
        for cell in 0..n_seeds {
            if cell_voxels[cell].is_empty() {
                continue;
            }
            let k = poisson.sample(&mut rng) as usize;
            if k == 0 {
                continue;
            }
            // lamellae within a grain share one habit normal
            let normal = random_unit_vector(&mut rng);
            for _ in 0..k {
                let center_flat =
                    cell_voxels[cell][rng.gen_range(0..cell_voxels[cell].len())] as usize;
                let ci = center_flat / (n2 * n3);
                let cj = (center_flat / n3) % n2;
                let ck = center_flat % n3;
                let center = [ci as f64 + 0.5, cj as f64 + 0.5, ck as f64 + 0.5];
                let thickness = rng.gen_range(1..=3) as f64;
                let axis = random_unit_vector(&mut rng);
                let twin_q =
                    UnitQuaternion::from_axis_angle(axis, PI / 3.0).mul(&cell_quats[cell]);
                let new_label = label_quats.len() as u32;
                label_quats.push(twin_q);
                let mut claimed = false;
                for &vf in &cell_voxels[cell] {
                    let vf = vf as usize;
                    if owner[vf] != cell as u32 {
                        continue; // already claimed by an earlier lamella
                    }
                    let i = vf / (n2 * n3);
                    let j = (vf / n3) % n2;
                    let kk = vf % n3;
                    let rel = [
                        i as f64 + 0.5 - center[0],
                        j as f64 + 0.5 - center[1],
                        kk as f64 + 0.5 - center[2],
                    ];
                    let dist = rel[0] * normal[0] + rel[1] * normal[1] + rel[2] * normal[2];
                    if dist.abs() <= thickness / 2.0 {
                        owner[vf] = new_label;
                        claimed = true;
                    }
                }
                if !claimed {
                    label_quats.pop();
                }
            }
        }
    }

    // materialize orientations, then canonicalize
    let mut v = OrientationVolume::zeros(shape);
    let cubo: Vec<[f64; 3]> = label_quats
        .iter()
        .map(|q| quaternion_to_cubochoric(q).as_array())
        .collect();
    for (f, &label) in owner.iter().enumerate() {
        v.data_mut()[f * 3..f * 3 + 3].copy_from_slice(&cubo[label as usize]);
    }

    let g = segment_grains(&v, 0.0)?;
    let (g, v) = remove_small_grains(&g, &v, spec.min_grain_voxels)?;
    let (v, _) = average_orientations(&g, &v)?;
    Ok((v, g))
}

/// One row of the probability-plot table: a theoretical normal quantile
/// paired with an observed ln(D / mean(D)).
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct QuantileRow {
    pub normal_quantile: f64,
    pub log_normalized_diameter: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SizeDistributionReport {
    pub rows: Vec<QuantileRow>,
}

impl SizeDistributionReport {
    /// Least-squares fit over the central fraction of rows (by rank);
    /// returns (slope, intercept, r_squared).
    pub fn fit_middle(&self, central_fraction: f64) -> (f64, f64, f64) {
        let n = self.rows.len();
        let drop = ((1.0 - central_fraction) / 2.0 * n as f64).floor() as usize;
        let mid = &self.rows[drop..n - drop];
        let xs: Vec<f64> = mid.iter().map(|r| r.normal_quantile).collect();
        let ys: Vec<f64> = mid.iter().map(|r| r.log_normalized_diameter).collect();
        linear_fit(&xs, &ys)
    }
}

/// Sphere-equivalent diameters D = (6 * voxels / pi)^(1/3), normalized by
/// their mean, log-transformed, and paired with normal plotting quantiles.
pub fn size_distribution_report(g: &GrainMap) -> Result<SizeDistributionReport, SynthError> {
    let sizes = g.grain_sizes();
    let n = sizes.len();
    if n < 30 {
        return Err(SynthError::Statistics(format!(
            "need at least 30 grains for a size distribution, got {n}"
        )));
    }
    let mut diameters: Vec<f64> = sizes
        .values()
        .map(|&v| (6.0 * v as f64 / PI).cbrt())
        .collect();
    diameters.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = diameters.iter().sum::<f64>() / n as f64;
    let rows = diameters
        .iter()
        .enumerate()
        .map(|(i, &dia)| QuantileRow {
            // Blom plotting positions
            normal_quantile: inverse_normal_cdf((i as f64 + 1.0 - 0.375) / (n as f64 + 0.25)),
            log_normalized_diameter: (dia / mean).ln(),
        })
        .collect();
    Ok(SizeDistributionReport { rows })
}
