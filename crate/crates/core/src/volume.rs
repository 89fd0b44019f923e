//! Voxel-volume containers and the orientation/ID/boundary derivation
//! pipeline: grain segmentation, small-grain removal, per-grain orientation
//! averaging, boundary extraction, and per-channel normalization.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::orientation::{cubochoric_to_quaternion, misorientation_angle, Cubochoric, UnitQuaternion};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("volumes have different shapes: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("channel {0} has zero variance; cannot normalize")]
    ZeroVariance(usize),
    #[error("orientation error: {0}")]
    Orientation(#[from] crate::orientation::OrientationError),
}

/// Per-voxel cubochoric field of shape (n1, n2, n3, 3), channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationVolume {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl OrientationVolume {
    pub fn zeros(shape: [usize; 3]) -> OrientationVolume {
        OrientationVolume {
            shape,
            data: vec![0.0; shape[0] * shape[1] * shape[2] * 3],
        }
    }

    pub fn from_raw(shape: [usize; 3], data: Vec<f64>) -> Result<OrientationVolume, VolumeError> {
        if data.len() != shape[0] * shape[1] * shape[2] * 3 {
            return Err(VolumeError::Parameter(format!(
                "payload length {} does not match shape {:?} with 3 channels",
                data.len(),
                shape
            )));
        }
        Ok(OrientationVolume { shape, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_voxels(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn flat(&self, v: [usize; 3]) -> usize {
        (v[0] * self.shape[1] + v[1]) * self.shape[2] + v[2]
    }

    #[inline]
    pub fn get(&self, v: [usize; 3]) -> [f64; 3] {
        let b = self.flat(v) * 3;
        [self.data[b], self.data[b + 1], self.data[b + 2]]
    }

    #[inline]
    pub fn set(&mut self, v: [usize; 3], val: [f64; 3]) {
        let b = self.flat(v) * 3;
        self.data[b..b + 3].copy_from_slice(&val);
    }
}

/// Per-voxel grain IDs; after compaction the IDs form {1..G}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrainMap {
    shape: [usize; 3],
    ids: Vec<u32>,
}

impl GrainMap {
    pub fn from_raw(shape: [usize; 3], ids: Vec<u32>) -> Result<GrainMap, VolumeError> {
        if ids.len() != shape[0] * shape[1] * shape[2] {
            return Err(VolumeError::Parameter(format!(
                "id payload length {} does not match shape {:?}",
                ids.len(),
                shape
            )));
        }
        Ok(GrainMap { shape, ids })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    #[inline]
    pub fn flat(&self, v: [usize; 3]) -> usize {
        (v[0] * self.shape[1] + v[1]) * self.shape[2] + v[2]
    }

    #[inline]
    pub fn get(&self, v: [usize; 3]) -> u32 {
        self.ids[self.flat(v)]
    }

    #[inline]
    pub fn set(&mut self, v: [usize; 3], id: u32) {
        let i = self.flat(v);
        self.ids[i] = id;
    }

    /// Number of distinct grain IDs present.
    pub fn grain_count(&self) -> usize {
        let mut seen = std::collections::HashSet::new();
        for &id in &self.ids {
            seen.insert(id);
        }
        seen.len()
    }

    /// Voxel count per grain ID.
    pub fn grain_sizes(&self) -> BTreeMap<u32, usize> {
        let mut sizes = BTreeMap::new();
        for &id in &self.ids {
            *sizes.entry(id).or_insert(0usize) += 1;
        }
        sizes
    }

    /// Relabels IDs to the contiguous set {1..G}, ascending by old ID.
    pub fn compact(&mut self) {
        let sizes = self.grain_sizes();
        let mut remap = BTreeMap::new();
        for (next, &old) in sizes.keys().enumerate() {
            remap.insert(old, next as u32 + 1);
        }
        for id in self.ids.iter_mut() {
            *id = remap[id];
        }
    }

    /// Copies the 2D slice at `index` along `axis`.
    pub fn slice(&self, axis: usize, index: usize) -> Vec<u32> {
        let [n1, n2, n3] = self.shape;
        let (rows, cols) = match axis {
            0 => (n2, n3),
            1 => (n1, n3),
            _ => (n1, n2),
        };
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let v = match axis {
                    0 => [index, r, c],
                    1 => [r, index, c],
                    _ => [r, c, index],
                };
                out.push(self.get(v));
            }
        }
        out
    }
}

/// Boolean boundary flags, one per voxel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryMask {
    shape: [usize; 3],
    flags: Vec<bool>,
}

impl BoundaryMask {
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn from_raw(shape: [usize; 3], flags: Vec<bool>) -> Result<BoundaryMask, VolumeError> {
        if flags.len() != shape[0] * shape[1] * shape[2] {
            return Err(VolumeError::Parameter(format!(
                "flag payload length {} does not match shape {:?}",
                flags.len(),
                shape
            )));
        }
        Ok(BoundaryMask { shape, flags })
    }

    #[inline]
    pub fn get(&self, v: [usize; 3]) -> bool {
        self.flags[(v[0] * self.shape[1] + v[1]) * self.shape[2] + v[2]]
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Copies the 2D slice at `index` along `axis`.
    pub fn slice(&self, axis: usize, index: usize) -> Vec<bool> {
        let [n1, n2, n3] = self.shape;
        let (rows, cols) = match axis {
            0 => (n2, n3),
            1 => (n1, n3),
            _ => (n1, n2),
        };
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let v = match axis {
                    0 => [index, r, c],
                    1 => [r, index, c],
                    _ => [r, c, index],
                };
                out.push(self.get(v));
            }
        }
        out
    }
}

/// Grain ID -> representative cubochoric vector.
pub type GrainDictionary = BTreeMap<u32, [f64; 3]>;

/// The six face-sharing neighbor offsets.
pub const FACE_NEIGHBORS: [[isize; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

#[inline]
pub fn neighbor(v: [usize; 3], d: [isize; 3], shape: [usize; 3]) -> Option<[usize; 3]> {
    let i = v[0] as isize + d[0];
    let j = v[1] as isize + d[1];
    let k = v[2] as isize + d[2];
    if i < 0
        || j < 0
        || k < 0
        || i >= shape[0] as isize
        || j >= shape[1] as isize
        || k >= shape[2] as isize
    {
        None
    } else {
        Some([i as usize, j as usize, k as usize])
    }
}

/// Connected-component labeling over the 6-neighborhood: two neighbors join
/// iff their misorientation is at most `tolerance` radians. Tolerance 0
/// joins only voxels with exactly equal cubochoric vectors. IDs are compact
/// {1..G}, assigned in row-major discovery order.
pub fn segment_grains(v: &OrientationVolume, tolerance: f64) -> Result<GrainMap, VolumeError> {
    if tolerance < 0.0 || !tolerance.is_finite() {
        return Err(VolumeError::Parameter(format!(
            "misorientation tolerance must be a finite non-negative angle, got {tolerance}"
        )));
    }
    let shape = v.shape();
    let n = v.num_voxels();
    // precompute quaternions once when an angular tolerance is in play
    let quats: Option<Vec<UnitQuaternion>> = if tolerance > 0.0 {
        let qs: Result<Vec<UnitQuaternion>, VolumeError> = (0..n)
            .into_par_iter()
            .map(|f| {
                let c = Cubochoric {
                    c1: v.data[f * 3],
                    c2: v.data[f * 3 + 1],
                    c3: v.data[f * 3 + 2],
                };
                cubochoric_to_quaternion(&c).map_err(VolumeError::from)
            })
            .collect();
        Some(qs?)
    } else {
        None
    };

    let joined = |a: usize, b: usize| -> bool {
        match &quats {
            None => v.data[a * 3..a * 3 + 3] == v.data[b * 3..b * 3 + 3],
            Some(qs) => misorientation_angle(&qs[a], &qs[b]) <= tolerance,
        }
    };

    let mut ids = vec![0u32; n];
    let mut next_id = 0u32;
    let mut queue = std::collections::VecDeque::new();
    let [n1, n2, n3] = shape;
    for i in 0..n1 {
        for j in 0..n2 {
            for k in 0..n3 {
                let f = (i * n2 + j) * n3 + k;
                if ids[f] != 0 {
                    continue;
                }
                next_id += 1;
                ids[f] = next_id;
                queue.push_back([i, j, k]);
                while let Some(cur) = queue.pop_front() {
                    let cf = (cur[0] * n2 + cur[1]) * n3 + cur[2];
                    for d in FACE_NEIGHBORS {
                        if let Some(nb) = neighbor(cur, d, shape) {
                            let nf = (nb[0] * n2 + nb[1]) * n3 + nb[2];
                            if ids[nf] == 0 && joined(cf, nf) {
                                ids[nf] = next_id;
                                queue.push_back(nb);
                            }
                        }
                    }
                }
            }
        }
    }
    GrainMap::from_raw(shape, ids)
}

/// Reassigns every grain smaller than `min_voxels` to its most frequent
/// face-neighboring grain (ties to the lowest neighboring ID), iterating
/// until no sub-threshold grain remains or only one grain is left. Sizes
/// are measured at the start of each iteration, so two adjacent small
/// grains are both removed even when their union clears the threshold.
/// Voxels that change grain take the mean orientation of their new grain's
/// original voxels. IDs are recompacted.
pub fn remove_small_grains(
    g: &GrainMap,
    v: &OrientationVolume,
    min_voxels: usize,
) -> Result<(GrainMap, OrientationVolume), VolumeError> {
    if min_voxels < 1 {
        return Err(VolumeError::Parameter(
            "min_voxels must be at least 1".into(),
        ));
    }
    if g.shape() != v.shape() {
        return Err(VolumeError::ShapeMismatch(g.shape(), v.shape()));
    }
    let shape = g.shape();
    let [n1, n2, n3] = shape;
    let mut map = g.clone();

    loop {
        let sizes = map.grain_sizes();
        if sizes.len() <= 1 {
            break;
        }
        let small: Vec<u32> = sizes
            .iter()
            .filter(|&(_, &s)| s < min_voxels)
            .map(|(&id, _)| id)
            .collect();
        if small.is_empty() {
            break;
        }
        let small_set: std::collections::HashSet<u32> = small.iter().cloned().collect();

        // one pass over all face pairs: adjacency counts for small grains
        let mut adjacency: BTreeMap<u32, BTreeMap<u32, usize>> =
            small.iter().map(|&id| (id, BTreeMap::new())).collect();
        for i in 0..n1 {
            for j in 0..n2 {
                for k in 0..n3 {
                    let id = map.get([i, j, k]);
                    if !small_set.contains(&id) {
                        continue;
                    }
                    for d in FACE_NEIGHBORS {
                        if let Some(nb) = neighbor([i, j, k], d, shape) {
                            let other = map.get(nb);
                            if other != id {
                                *adjacency
                                    .get_mut(&id)
                                    .unwrap()
                                    .entry(other)
                                    .or_insert(0) += 1;
                            }
                        }
                    }
                }
            }
        }

        // most frequent neighbor per small grain (ties: lowest ID)
        let mut target: BTreeMap<u32, u32> = BTreeMap::new();
        for (&id, counts) in &adjacency {
            let best = counts
                .iter()
                .fold(None::<(u32, usize)>, |best, (&nid, &c)| match best {
                    Some((_, bc)) if c <= bc => best,
                    _ => Some((nid, c)),
                });
            if let Some((nid, _)) = best {
                target.insert(id, nid);
            }
        }
        if target.is_empty() {
            break;
        }
        // resolve chains of small-into-small merges; a cycle collapses onto
        // its lowest member, which survives this iteration
        let mut resolved: BTreeMap<u32, u32> = BTreeMap::new();
        for &id in target.keys() {
            if resolved.contains_key(&id) {
                continue;
            }
            let mut path = vec![id];
            let mut cur = id;
            let dest = loop {
                match target.get(&cur) {
                    None => break cur, // landed on a surviving grain
                    Some(&next) => {
                        if let Some(&d) = resolved.get(&next) {
                            break d;
                        }
                        if let Some(pos) = path.iter().position(|&p| p == next) {
                            break *path[pos..].iter().min().unwrap();
                        }
                        path.push(next);
                        cur = next;
                    }
                }
            };
            for p in path {
                if p != dest {
                    resolved.insert(p, dest);
                }
            }
        }
        if resolved.is_empty() {
            break;
        }
        for id in map.ids.iter_mut() {
            if let Some(&d) = resolved.get(id) {
                *id = d;
            }
        }
    }

    // voxels that moved take the mean orientation of the surviving grain's
    // original voxels
    let mut out_v = v.clone();
    let mut sums: BTreeMap<u32, ([f64; 3], usize)> = BTreeMap::new();
    for (f, (&new_id, &old_id)) in map.ids.iter().zip(g.ids.iter()).enumerate() {
        if new_id == old_id {
            let e = sums.entry(new_id).or_insert(([0.0; 3], 0));
            for c in 0..3 {
                e.0[c] += v.data[f * 3 + c];
            }
            e.1 += 1;
        }
    }
    for (f, (&new_id, &old_id)) in map.ids.iter().zip(g.ids.iter()).enumerate() {
        if new_id != old_id {
            let (sum, count) = sums[&new_id];
            for c in 0..3 {
                out_v.data[f * 3 + c] = sum[c] / count as f64;
            }
        }
    }

    map.compact();
    Ok((map, out_v))
}

/// Replaces every voxel's vector with the arithmetic mean over its grain
/// and returns the per-grain dictionary of those means.
pub fn average_orientations(
    g: &GrainMap,
    v: &OrientationVolume,
) -> Result<(OrientationVolume, GrainDictionary), VolumeError> {
    if g.shape() != v.shape() {
        return Err(VolumeError::ShapeMismatch(g.shape(), v.shape()));
    }
    let mut sums: BTreeMap<u32, ([f64; 3], usize)> = BTreeMap::new();
    for (f, &id) in g.ids.iter().enumerate() {
        let e = sums.entry(id).or_insert(([0.0; 3], 0));
        for c in 0..3 {
            e.0[c] += v.data[f * 3 + c];
        }
        e.1 += 1;
    }
    let dict: GrainDictionary = sums
        .into_iter()
        .map(|(id, (sum, count))| {
            (
                id,
                [
                    sum[0] / count as f64,
                    sum[1] / count as f64,
                    sum[2] / count as f64,
                ],
            )
        })
        .collect();
    let mut out = v.clone();
    for (f, &id) in g.ids.iter().enumerate() {
        let mean = dict[&id];
        out.data[f * 3..f * 3 + 3].copy_from_slice(&mean);
    }
    Ok((out, dict))
}

/// Marks voxels with at least one face-sharing neighbor of a different ID.
/// Voxels on the volume surface consider only in-bounds neighbors.
pub fn extract_boundaries(g: &GrainMap) -> BoundaryMask {
    let shape = g.shape();
    let [_, n2, n3] = shape;
    let mut flags = vec![false; g.ids.len()];
    flags
        .par_chunks_mut(n2 * n3)
        .enumerate()
        .for_each(|(i, slab)| {
            for j in 0..n2 {
                for k in 0..n3 {
                    let id = g.get([i, j, k]);
                    let mut boundary = false;
                    for d in FACE_NEIGHBORS {
                        if let Some(nb) = neighbor([i, j, k], d, shape) {
                            if g.get(nb) != id {
                                boundary = true;
                                break;
                            }
                        }
                    }
                    slab[j * n3 + k] = boundary;
                }
            }
        });
    BoundaryMask { shape, flags }
}

/// Per-channel mean and standard deviation used for z-scoring.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    /// Pooled statistics over one or more volumes.
    pub fn from_volumes(volumes: &[&OrientationVolume]) -> Result<ChannelStats, VolumeError> {
        let mut sum = [0.0f64; 3];
        let mut count = 0usize;
        for v in volumes {
            for f in 0..v.num_voxels() {
                for c in 0..3 {
                    sum[c] += v.data[f * 3 + c];
                }
            }
            count += v.num_voxels();
        }
        if count == 0 {
            return Err(VolumeError::Parameter("no voxels to normalize".into()));
        }
        let mean = [
            sum[0] / count as f64,
            sum[1] / count as f64,
            sum[2] / count as f64,
        ];
        let mut sq = [0.0f64; 3];
        for v in volumes {
            for f in 0..v.num_voxels() {
                for c in 0..3 {
                    let d = v.data[f * 3 + c] - mean[c];
                    sq[c] += d * d;
                }
            }
        }
        let mut std = [0.0f64; 3];
        for c in 0..3 {
            std[c] = (sq[c] / count as f64).sqrt();
            if std[c] == 0.0 {
                return Err(VolumeError::ZeroVariance(c));
            }
        }
        Ok(ChannelStats { mean, std })
    }

    pub fn apply(&self, value: [f64; 3]) -> [f64; 3] {
        [
            (value[0] - self.mean[0]) / self.std[0],
            (value[1] - self.mean[1]) / self.std[1],
            (value[2] - self.mean[2]) / self.std[2],
        ]
    }

    pub fn invert(&self, value: [f64; 3]) -> [f64; 3] {
        [
            value[0] * self.std[0] + self.mean[0],
            value[1] * self.std[1] + self.mean[1],
            value[2] * self.std[2] + self.mean[2],
        ]
    }
}

/// Z-scores each channel. When `stats` is supplied (held-out data at
/// inference time) those statistics are applied instead of being recomputed.
pub fn normalize_channels(
    v: &OrientationVolume,
    stats: Option<&ChannelStats>,
) -> Result<(OrientationVolume, ChannelStats), VolumeError> {
    let stats = match stats {
        Some(s) => *s,
        None => ChannelStats::from_volumes(&[v])?,
    };
    let mut out = v.clone();
    for f in 0..v.num_voxels() {
        for c in 0..3 {
            out.data[f * 3 + c] = (v.data[f * 3 + c] - stats.mean[c]) / stats.std[c];
        }
    }
    Ok((out, stats))
}

/// Undoes [`normalize_channels`].
pub fn denormalize_channels(v: &OrientationVolume, stats: &ChannelStats) -> OrientationVolume {
    let mut out = v.clone();
    for f in 0..v.num_voxels() {
        for c in 0..3 {
            out.data[f * 3 + c] = v.data[f * 3 + c] * stats.std[c] + stats.mean[c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn uniform_volume(shape: [usize; 3], val: [f64; 3]) -> OrientationVolume {
        let mut v = OrientationVolume::zeros(shape);
        for f in 0..v.num_voxels() {
            v.data[f * 3..f * 3 + 3].copy_from_slice(&val);
        }
        v
    }

    /// Union-find over voxels: the brute-force segmentation oracle.
    fn segment_oracle(v: &OrientationVolume) -> Vec<u32> {
        let n = v.num_voxels();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        let shape = v.shape();
        let [n1, n2, n3] = shape;
        for i in 0..n1 {
            for j in 0..n2 {
                for k in 0..n3 {
                    let f = (i * n2 + j) * n3 + k;
                    for d in FACE_NEIGHBORS {
                        if let Some(nb) = neighbor([i, j, k], d, shape) {
                            let nf = (nb[0] * n2 + nb[1]) * n3 + nb[2];
                            if v.data[f * 3..f * 3 + 3] == v.data[nf * 3..nf * 3 + 3] {
                                let (ra, rb) = (find(&mut parent, f), find(&mut parent, nf));
                                if ra != rb {
                                    parent[ra.max(rb)] = ra.min(rb);
                                }
                            }
                        }
                    }
                }
            }
        }
        (0..n).map(|i| find(&mut parent.clone(), i) as u32).collect()
    }

    fn same_partition(a: &[u32], b: &[u32]) -> bool {
        let mut fwd = std::collections::HashMap::new();
        let mut bwd = std::collections::HashMap::new();
        for (&x, &y) in a.iter().zip(b) {
            if *fwd.entry(x).or_insert(y) != y || *bwd.entry(y).or_insert(x) != x {
                return false;
            }
        }
        true
    }

    #[test]
    fn uniform_volume_is_a_single_grain() {
        let v = uniform_volume([4, 4, 4], [0.1, 0.2, 0.3]);
        let g = segment_grains(&v, 0.0).unwrap();
        assert_eq!(g.grain_count(), 1);
        assert!(g.ids().iter().all(|&id| id == 1));
    }

    #[test]
    fn two_half_volumes_make_two_grains() {
        let mut v = uniform_volume([4, 6, 4], [0.1, 0.0, 0.0]);
        for i in 0..4 {
            for j in 3..6 {
                for k in 0..4 {
                    v.set([i, j, k], [-0.2, 0.0, 0.0]);
                }
            }
        }
        let g = segment_grains(&v, 0.0).unwrap();
        assert_eq!(g.grain_count(), 2);
    }

    #[test]
    fn segmentation_matches_union_find_oracle() {
        let mut rng = rng_from_seed(31);
        let seeds = [[0.1, 0.0, 0.0], [0.0, 0.2, 0.0], [-0.3, 0.0, 0.1]];
        let mut v = OrientationVolume::zeros([8, 8, 8]);
        for f in 0..v.num_voxels() {
            let val = seeds[rng.gen_range(0..3)];
            v.data[f * 3..f * 3 + 3].copy_from_slice(&val);
        }
        let g = segment_grains(&v, 0.0).unwrap();
        let oracle = segment_oracle(&v);
        assert!(same_partition(g.ids(), &oracle));
    }

    #[test]
    fn angular_tolerance_joins_near_orientations() {
        // two half volumes 0.01 rad apart join at tolerance 0.02, not 0.005
        use crate::orientation::{quaternion_to_cubochoric, UnitQuaternion};
        let qa = UnitQuaternion::from_axis_angle([0.0, 0.0, 1.0], 0.3);
        let qb = UnitQuaternion::from_axis_angle([0.0, 0.0, 1.0], 0.31);
        let ca = quaternion_to_cubochoric(&qa).as_array();
        let cb = quaternion_to_cubochoric(&qb).as_array();
        let mut v = uniform_volume([2, 4, 2], ca);
        for i in 0..2 {
            for j in 2..4 {
                for k in 0..2 {
                    v.set([i, j, k], cb);
                }
            }
        }
        assert_eq!(segment_grains(&v, 0.02).unwrap().grain_count(), 1);
        assert_eq!(segment_grains(&v, 0.005).unwrap().grain_count(), 2);
    }

    #[test]
    fn small_island_is_absorbed() {
        let mut v = uniform_volume([6, 6, 6], [0.1, 0.0, 0.0]);
        for i in 2..4 {
            for j in 2..4 {
                for k in 2..4 {
                    v.set([i, j, k], [0.5, 0.0, 0.0]);
                }
            }
        }
        let g = segment_grains(&v, 0.0).unwrap();
        assert_eq!(g.grain_count(), 2);
        let (g2, v2) = remove_small_grains(&g, &v, 27).unwrap();
        assert_eq!(g2.grain_count(), 1);
        // island voxels took the host grain's orientation
        for (a, b) in v2.get([2, 2, 2]).iter().zip([0.1, 0.0, 0.0].iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn large_grains_are_untouched() {
        let mut v = uniform_volume([6, 6, 6], [0.1, 0.0, 0.0]);
        for i in 0..3 {
            for j in 0..6 {
                for k in 0..6 {
                    v.set([i, j, k], [-0.4, 0.0, 0.0]);
                }
            }
        }
        let g = segment_grains(&v, 0.0).unwrap();
        let (g2, v2) = remove_small_grains(&g, &v, 27).unwrap();
        assert_eq!(g2.ids(), g.ids());
        assert_eq!(v2.data(), v.data());
    }

    #[test]
    fn adjacent_small_grains_are_both_removed() {
        // a 6x6x6 host with two touching 2x2x2 islands (8 voxels each,
        // union 16 < 27 here, but the point is the size test runs on the
        // sizes measured before any merging in the pass)
        let mut v = uniform_volume([6, 6, 6], [0.1, 0.0, 0.0]);
        for i in 1..3 {
            for j in 1..3 {
                for k in 1..3 {
                    v.set([i, j, k], [0.5, 0.0, 0.0]);
                }
            }
        }
        for i in 3..5 {
            for j in 1..3 {
                for k in 1..3 {
                    v.set([i, j, k], [0.9, 0.0, 0.0]);
                }
            }
        }
        let g = segment_grains(&v, 0.0).unwrap();
        assert_eq!(g.grain_count(), 3);
        let (g2, _) = remove_small_grains(&g, &v, 27).unwrap();
        assert_eq!(g2.grain_count(), 1);
    }

    #[test]
    fn adjacent_small_grains_with_large_union_still_removed() {
        // two 3x3x2 islands (18 voxels each, union 36 >= 27) inside a host:
        // the per-grain size test precedes merging, so both must vanish
        let mut v = uniform_volume([7, 7, 7], [0.1, 0.0, 0.0]);
        for i in 2..5 {
            for j in 2..5 {
                for k in 1..3 {
                    v.set([i, j, k], [0.5, 0.0, 0.0]);
                }
            }
        }
        for i in 2..5 {
            for j in 2..5 {
                for k in 3..5 {
                    v.set([i, j, k], [0.9, 0.0, 0.0]);
                }
            }
        }
        let g = segment_grains(&v, 0.0).unwrap();
        assert_eq!(g.grain_count(), 3);
        let (g2, _) = remove_small_grains(&g, &v, 27).unwrap();
        assert_eq!(
            g2.grain_count(),
            1,
            "both sub-threshold grains must be absorbed even though their union is large"
        );
    }

    #[test]
    fn all_small_grains_merge_into_one() {
        let mut v = uniform_volume([2, 2, 2], [0.1, 0.0, 0.0]);
        v.set([0, 0, 0], [0.9, 0.0, 0.0]);
        let g = segment_grains(&v, 0.0).unwrap();
        assert_eq!(g.grain_count(), 2);
        let (g2, _) = remove_small_grains(&g, &v, 27).unwrap();
        assert_eq!(g2.grain_count(), 1);
    }

    #[test]
    fn averaging_leaves_uniform_grains_unchanged() {
        let v = uniform_volume([3, 3, 3], [0.2, -0.1, 0.05]);
        let g = segment_grains(&v, 0.0).unwrap();
        let (out, dict) = average_orientations(&g, &v).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in dict[&1].iter().zip([0.2, -0.1, 0.05].iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn averaging_takes_the_arithmetic_mean() {
        let mut v = uniform_volume([2, 2, 1], [0.0, 0.0, 0.0]);
        v.set([0, 0, 0], [0.2, 0.0, 0.0]);
        v.set([1, 0, 0], [0.2, 0.0, 0.0]);
        // single grain via explicit map, mixed values
        let g = GrainMap::from_raw([2, 2, 1], vec![1; 4]).unwrap();
        let (out, dict) = average_orientations(&g, &v).unwrap();
        assert_eq!(dict[&1], [0.1, 0.0, 0.0]);
        for f in 0..4 {
            assert_eq!(&out.data()[f * 3..f * 3 + 3], &[0.1, 0.0, 0.0]);
        }
    }

    #[test]
    fn averaged_grains_have_zero_variance() {
        let mut rng = rng_from_seed(32);
        let mut v = OrientationVolume::zeros([5, 5, 5]);
        for f in 0..v.num_voxels() {
            for c in 0..3 {
                v.data[f * 3 + c] = rng.gen_range(-0.5..0.5);
            }
        }
        let mut ids = vec![0u32; 125];
        for (f, id) in ids.iter_mut().enumerate() {
            *id = (f % 4) as u32 + 1;
        }
        let g = GrainMap::from_raw([5, 5, 5], ids).unwrap();
        let (out, dict) = average_orientations(&g, &v).unwrap();
        for (f, &id) in g.ids().iter().enumerate() {
            assert_eq!(&out.data()[f * 3..f * 3 + 3], &dict[&id]);
        }
    }

    #[test]
    fn uniform_volume_has_no_boundaries() {
        let v = uniform_volume([4, 4, 4], [0.3, 0.0, 0.0]);
        let g = segment_grains(&v, 0.0).unwrap();
        let b = extract_boundaries(&g);
        assert_eq!(b.count(), 0);
    }

    #[test]
    fn half_volumes_boundary_is_two_layers() {
        let mut ids = vec![1u32; 4 * 6 * 4];
        let g0 = GrainMap::from_raw([4, 6, 4], ids.clone()).unwrap();
        for i in 0..4 {
            for j in 3..6 {
                for k in 0..4 {
                    ids[g0.flat([i, j, k])] = 2;
                }
            }
        }
        let g = GrainMap::from_raw([4, 6, 4], ids).unwrap();
        let b = extract_boundaries(&g);
        for i in 0..4 {
            for j in 0..6 {
                for k in 0..4 {
                    let expect = j == 2 || j == 3;
                    assert_eq!(b.get([i, j, k]), expect, "at [{i},{j},{k}]");
                }
            }
        }
    }

    #[test]
    fn boundaries_match_brute_force_and_ignore_relabeling() {
        let mut rng = rng_from_seed(33);
        let ids: Vec<u32> = (0..6 * 5 * 4).map(|_| rng.gen_range(1..5)).collect();
        let g = GrainMap::from_raw([6, 5, 4], ids.clone()).unwrap();
        let b = extract_boundaries(&g);
        // brute force scan
        for i in 0..6 {
            for j in 0..5 {
                for k in 0..4 {
                    let mut expect = false;
                    for d in FACE_NEIGHBORS {
                        if let Some(nb) = neighbor([i, j, k], d, [6, 5, 4]) {
                            if g.get(nb) != g.get([i, j, k]) {
                                expect = true;
                            }
                        }
                    }
                    assert_eq!(b.get([i, j, k]), expect);
                }
            }
        }
        // relabeling invariance: permute IDs 1..4 -> 4..1
        let relabeled: Vec<u32> = ids.iter().map(|&id| 5 - id).collect();
        let g2 = GrainMap::from_raw([6, 5, 4], relabeled).unwrap();
        assert_eq!(extract_boundaries(&g2).flags(), b.flags());
    }

    #[test]
    fn normalization_round_trip_and_errors() {
        let mut rng = rng_from_seed(34);
        let mut v = OrientationVolume::zeros([4, 4, 4]);
        for f in 0..v.num_voxels() {
            for c in 0..3 {
                v.data[f * 3 + c] = rng.gen_range(-1.0..1.0);
            }
        }
        let (normed, stats) = normalize_channels(&v, None).unwrap();
        // channels now zero-mean unit-std
        let (renormed, _) = normalize_channels(&normed, None).unwrap();
        for (a, b) in normed.data().iter().zip(renormed.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let restored = denormalize_channels(&normed, &stats);
        for (a, b) in restored.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let constant = uniform_volume([3, 3, 3], [0.5, 0.1, -0.2]);
        assert!(matches!(
            normalize_channels(&constant, None),
            Err(VolumeError::ZeroVariance(_))
        ));
    }

    #[test]
    fn supplied_stats_are_applied_not_recomputed() {
        let v = uniform_volume([2, 2, 2], [1.0, 2.0, 3.0]);
        let stats = ChannelStats {
            mean: [0.0, 0.0, 0.0],
            std: [2.0, 2.0, 2.0],
        };
        let (normed, used) = normalize_channels(&v, Some(&stats)).unwrap();
        assert_eq!(used, stats);
        assert_eq!(normed.get([0, 0, 0]), [0.5, 1.0, 1.5]);
    }

    #[test]
    fn slice_to_slice_differences_live_on_boundaries() {
        // construct a blocky multi-grain map and check the differences
        // between adjacent slices along axis 1 sit inside the union of the
        // two slices' boundary voxels
        let mut ids = vec![1u32; 8 * 8 * 8];
        let g0 = GrainMap::from_raw([8, 8, 8], ids.clone()).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..8 {
                    let f = g0.flat([i, j, k]);
                    ids[f] = 1 + (i / 3) as u32 * 9 + (j / 4) as u32 * 3 + (k / 5) as u32;
                }
            }
        }
        let g = GrainMap::from_raw([8, 8, 8], ids).unwrap();
        let b = extract_boundaries(&g);
        for j in 0..7 {
            let s0 = g.slice(1, j);
            let s1 = g.slice(1, j + 1);
            let b0 = b.slice(1, j);
            let b1 = b.slice(1, j + 1);
            for idx in 0..s0.len() {
                if s0[idx] != s1[idx] {
                    assert!(
                        b0[idx] || b1[idx],
                        "difference at slice {j} element {idx} is off-boundary"
                    );
                }
            }
        }
    }
}
