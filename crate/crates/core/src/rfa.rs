//! Region feature aggregation: the per-proposal representation is the
//! concatenation `[voxel ; pixel ; point]` of three components.
//!
//! - voxel: backbone features at voxel centroids, propagated onto the proposal centroid;
//! - pixel: a BEV map sampled on an `m1 x m2` grid inside the rotated footprint;
//! - point: a small multi-level keypoint encoder (FPS + multi-scale set
//!   abstraction) over the raw cloud, propagated onto the proposal centroid.
//!
//! The convolutional backbones are replaced by deterministic generators: voxel
//! features mix multi-scale kernel density and mean-shift channels of the voxel
//! centroids through a seeded projection, and the BEV map is a blurred
//! log-occupancy image replicated across channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::interp::{
    dist2, farthest_point_sample, propagate_features, sample_bev_grid_with, set_abstraction_msg, BevFeatureMap,
    BevSampling, FeatureSet, SpatialHash,
};
use crate::nnet::{Activation, DenseStack};
use crate::scene::{Bounds3, Box3D, PointCloud};
use crate::voxel::{restore_centroids, SparseVoxelGrid};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfaConfig {
    pub m1: usize,
    pub m2: usize,
    pub voxel_dim: usize,
    /// Must equal `m1 * m2`.
    pub pixel_dim: usize,
    pub point_dim: usize,
    /// Keypoints per encoder level; a level keeps `min(count, available)`.
    pub keypoint_counts: Vec<usize>,
    /// Two grouping radii per level, meters.
    pub radii: Vec<[f64; 2]>,
    /// Hidden width of every set-abstraction stack.
    pub point_hidden: usize,
    pub bev_cell_size: f64,
    pub bev_sampling: BevSampling,
    /// Kernel widths of the synthetic voxel backbone, meters.
    pub density_scales: Vec<f64>,
}

impl Default for RfaConfig {
    fn default() -> Self {
        Self {
            m1: 4,
            m2: 4,
            voxel_dim: 16,
            pixel_dim: 16,
            point_dim: 16,
            keypoint_counts: vec![4096, 1024, 256],
            radii: vec![[0.1, 0.5], [0.5, 1.0], [1.0, 2.0]],
            point_hidden: 16,
            bev_cell_size: 0.4,
            bev_sampling: BevSampling::Bilinear,
            density_scales: vec![0.5, 1.0, 2.0],
        }
    }
}

impl RfaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m1 == 0 || self.m2 == 0 {
            return Err(Error::Config("grid counts m1, m2 must be positive".into()));
        }
        if self.pixel_dim != self.m1 * self.m2 {
            return Err(Error::Config(format!(
                "pixel_dim {} must equal m1 * m2 = {}",
                self.pixel_dim,
                self.m1 * self.m2
            )));
        }
        if self.voxel_dim == 0 || self.point_hidden == 0 {
            return Err(Error::Config("voxel_dim and point_hidden must be positive".into()));
        }
        if self.point_dim < 2 {
            return Err(Error::Config("point_dim must be at least 2 (one share per grouping radius)".into()));
        }
        if self.keypoint_counts.is_empty() || self.keypoint_counts.len() != self.radii.len() {
            return Err(Error::Config(format!(
                "{} keypoint levels but {} radius pairs",
                self.keypoint_counts.len(),
                self.radii.len()
            )));
        }
        if self.keypoint_counts.contains(&0) {
            return Err(Error::Config("keypoint counts must be positive".into()));
        }
        if self.radii.iter().flatten().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Config("grouping radii must be positive".into()));
        }
        if !(self.bev_cell_size > 0.0 && self.bev_cell_size.is_finite()) {
            return Err(Error::Config("bev_cell_size must be positive".into()));
        }
        if self.density_scales.is_empty() || self.density_scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config("density scales must be positive and non-empty".into()));
        }
        Ok(())
    }

    /// Width of the assembled representation.
    pub fn state_dim(&self) -> usize {
        self.voxel_dim + self.pixel_dim + self.point_dim
    }

    /// Output widths of the two grouping scales; they sum to `point_dim`.
    fn scale_widths(&self) -> [usize; 2] {
        let a = self.point_dim / 2;
        [a, self.point_dim - a]
    }
}

/// One proposal's representation.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiRepresentation {
    pub centroid: [f64; 3],
    pub feature: Vec<f64>,
}

/// Concatenates the components in the order voxel, pixel, point.
pub fn assemble(centroid: [f64; 3], voxel: &[f64], pixel: &[f64], point: &[f64]) -> Result<RoiRepresentation> {
    let feature: Vec<f64> = voxel.iter().chain(pixel).chain(point).copied().collect();
    if feature.iter().any(|v| !v.is_finite()) || centroid.iter().any(|v| !v.is_finite()) {
        return Err(Error::Range("region representation has non-finite entries".into()));
    }
    Ok(RoiRepresentation { centroid, feature })
}

/// Number of backbone channels before projection: reflectance, then
/// density and a 3D mean-shift vector per scale.
fn base_channels(scales: usize) -> usize {
    1 + 4 * scales
}

/// Stand-in for the sparse-convolution backbone: one `dim`-vector per voxel
/// centroid (lexicographic voxel order).
///
/// Per kernel width `s`, with Gaussian weights `w_j = count_j exp(-|c_j - c|^2 / 2s^2)`
/// over centroids within `3s`, the base channels are `ln(1 + sum w)` and the
/// mean shift `(sum w c_j / sum w - c) / s`. A seeded `dim x base` matrix with
/// entries uniform in `±sqrt(3 / base)` mixes them.
pub fn synthetic_voxel_features(grid: &SparseVoxelGrid, dim: usize, scales: &[f64], seed: u64) -> Result<FeatureSet> {
    if dim == 0 || scales.is_empty() {
        return Err(Error::Config("voxel feature width and scales must be non-empty".into()));
    }
    let cells = restore_centroids(grid);
    let counts: Vec<f64> = grid
        .sorted_entries()
        .iter()
        .map(|(_, e)| e.point_count as f64)
        .collect();
    let positions: Vec<[f64; 3]> = cells.iter().map(|(c, _)| *c).collect();
    let base_dim = base_channels(scales.len());
    let mut base = vec![Vec::with_capacity(base_dim); positions.len()];
    for (b, (_, f)) in base.iter_mut().zip(&cells) {
        b.push(f[3]);
    }
    for &s in scales {
        let hash = SpatialHash::new(&positions, 3.0 * s)?;
        let inv = 1.0 / (2.0 * s * s);
        for (i, &c) in positions.iter().enumerate() {
            let (mut total, mut acc) = (0.0, [0.0; 3]);
            for j in hash.within(c, 3.0 * s) {
                let w = counts[j] * (-dist2(positions[j], c) * inv).exp();
                total += w;
                for a in 0..3 {
                    acc[a] += w * positions[j][a];
                }
            }
            // The voxel itself is always within range, so total > 0.
            base[i].push((1.0 + total).ln());
            for a in 0..3 {
                base[i].push((acc[a] / total - c[a]) / s);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = (3.0 / base_dim as f64).sqrt();
    let mix: Vec<f64> = (0..dim * base_dim).map(|_| rng.random_range(-bound..bound)).collect();
    let features = base
        .iter()
        .map(|b| {
            (0..dim)
                .map(|o| mix[o * base_dim..(o + 1) * base_dim].iter().zip(b).map(|(m, v)| m * v).sum())
                .collect()
        })
        .collect();
    FeatureSet::new(positions, features, dim)
}

/// Stand-in for the 2D BEV backbone: `ln(1 + points per cell)` smoothed by a
/// separable `[1, 2, 1] / 4` kernel, replicated into `channels` planes.
pub fn synthetic_bev_map(cloud: &PointCloud, range: &Bounds3, cell_size: f64, channels: usize) -> Result<BevFeatureMap> {
    range.validate()?;
    if !(cell_size > 0.0 && cell_size.is_finite()) || channels == 0 {
        return Err(Error::Config("bev map needs a positive cell size and channel count".into()));
    }
    let ext = range.extent();
    let cols = (ext[0] / cell_size - 1e-9).ceil().max(1.0) as usize;
    let rows = (ext[1] / cell_size - 1e-9).ceil().max(1.0) as usize;
    let mut count = vec![0.0; rows * cols];
    for p in cloud.points() {
        let c = ((p.x - range.min[0]) / cell_size).floor();
        let r = ((p.y - range.min[1]) / cell_size).floor();
        if c >= 0.0 && r >= 0.0 && (c as usize) < cols && (r as usize) < rows {
            count[r as usize * cols + c as usize] += 1.0;
        }
    }
    let occ: Vec<f64> = count.iter().map(|&n| f64::ln_1p(n)).collect();
    let blur = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            for c in 0..cols {
                let at = |dr: i64, dc: i64| -> f64 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr < 0 || cc < 0 || rr >= rows as i64 || cc >= cols as i64 {
                        0.0
                    } else {
                        src[rr as usize * cols + cc as usize]
                    }
                };
                out[r * cols + c] = if along_x {
                    0.25 * at(0, -1) + 0.5 * at(0, 0) + 0.25 * at(0, 1)
                } else {
                    0.25 * at(-1, 0) + 0.5 * at(0, 0) + 0.25 * at(1, 0)
                };
            }
        }
        out
    };
    let smooth = blur(&blur(&occ, true), false);
    BevFeatureMap::from_fn(rows, cols, channels, cell_size, [range.min[0], range.min[1]], |r, c, _| {
        smooth[r * cols + c]
    })
}

/// Backbone features at voxel centroids propagated onto the proposal centroid.
pub fn voxel_component(voxel_features: &FeatureSet, proposal: &Box3D) -> Result<Vec<f64>> {
    let out = propagate_features(voxel_features, &[proposal.center])?;
    Ok(out.features()[0].clone())
}

/// The `m1 * m2` BEV grid samples inside the proposal's rotated footprint.
pub fn pixel_component(map: &BevFeatureMap, proposal: &Box3D, cfg: &RfaConfig) -> Result<Vec<f64>> {
    sample_bev_grid_with(map, proposal, cfg.m1, cfg.m2, cfg.bev_sampling)
}

/// Set-abstraction stacks of the keypoint encoder, two per level.
#[derive(Debug, Clone, PartialEq)]
pub struct PointStacks {
    levels: Vec<[DenseStack; 2]>,
}

impl PointStacks {
    /// Level `l` maps `[feature ; offset]` to its share of the next feature;
    /// level 0 reads reflectance only.
    pub fn new(levels: Vec<[DenseStack; 2]>) -> Result<Self> {
        let mut in_dim = 1;
        for (l, pair) in levels.iter().enumerate() {
            for s in pair {
                if s.input_dim() != in_dim + 3 {
                    return Err(Error::Config(format!(
                        "level {l} stack expects {} inputs, got {}",
                        in_dim + 3,
                        s.input_dim()
                    )));
                }
            }
            in_dim = pair[0].output_dim() + pair[1].output_dim();
        }
        if levels.is_empty() {
            return Err(Error::Config("point encoder needs at least one level".into()));
        }
        Ok(Self { levels })
    }

    /// Glorot stacks `[in + 3, hidden, share]` with ReLU output.
    pub fn glorot(cfg: &RfaConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.scale_widths();
        let mut in_dim = 1;
        let mut levels = Vec::with_capacity(cfg.radii.len());
        for _ in &cfg.radii {
            let a = DenseStack::glorot(&[in_dim + 3, cfg.point_hidden, widths[0]], Activation::Relu, rng)?;
            let b = DenseStack::glorot(&[in_dim + 3, cfg.point_hidden, widths[1]], Activation::Relu, rng)?;
            levels.push([a, b]);
            in_dim = cfg.point_dim;
        }
        Self::new(levels)
    }

    pub fn levels(&self) -> &[[DenseStack; 2]] {
        &self.levels
    }

    pub fn output_dim(&self) -> usize {
        let last = self.levels.last().expect("non-empty");
        last[0].output_dim() + last[1].output_dim()
    }
}

/// Runs the keypoint encoder over the whole cloud. Level `l` picks FPS
/// keypoints (start index 0) from the previous level's keypoints and pools
/// around them at both radii.
pub fn encode_keypoints(cloud: &PointCloud, cfg: &RfaConfig, stacks: &PointStacks) -> Result<FeatureSet> {
    if stacks.levels.len() != cfg.radii.len() || cfg.radii.len() != cfg.keypoint_counts.len() {
        return Err(Error::Config("point stacks and radii disagree on the number of levels".into()));
    }
    if cloud.is_empty() {
        return Err(Error::Contract("keypoint encoding needs a non-empty cloud".into()));
    }
    let mut src = FeatureSet::new(
        cloud.positions(),
        cloud.points().iter().map(|p| vec![p.r]).collect(),
        1,
    )?;
    for ((pair, radii), &count) in stacks.levels.iter().zip(&cfg.radii).zip(&cfg.keypoint_counts) {
        let k = count.min(src.len());
        let idx = farthest_point_sample(src.positions(), k, 0)?;
        let centers: Vec<[f64; 3]> = idx.iter().map(|&i| src.positions()[i]).collect();
        src = set_abstraction_msg(&src, &centers, &[(radii[0], &pair[0]), (radii[1], &pair[1])])?;
    }
    Ok(src)
}

/// Encoded keypoint features propagated onto the proposal centroid.
pub fn point_component(cloud: &PointCloud, proposal: &Box3D, cfg: &RfaConfig, stacks: &PointStacks) -> Result<Vec<f64>> {
    let keypoints = encode_keypoints(cloud, cfg, stacks)?;
    Ok(propagate_features(&keypoints, &[proposal.center])?.features()[0].clone())
}

/// Scene-level inputs shared by every proposal of one scene.
#[derive(Debug, Clone)]
pub struct SceneFeatures {
    pub voxels: FeatureSet,
    pub bev: BevFeatureMap,
    pub keypoints: FeatureSet,
}

impl SceneFeatures {
    /// `seed` fixes the backbone projection; reuse it across scenes that
    /// should share one backbone.
    pub fn compute(
        cloud: &PointCloud,
        grid: &SparseVoxelGrid,
        range: &Bounds3,
        cfg: &RfaConfig,
        stacks: &PointStacks,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let keypoints = if cloud.is_empty() {
            FeatureSet::new(Vec::new(), Vec::new(), stacks.output_dim())?
        } else {
            encode_keypoints(cloud, cfg, stacks)?
        };
        Ok(Self {
            voxels: synthetic_voxel_features(grid, cfg.voxel_dim, &cfg.density_scales, seed)?,
            bev: synthetic_bev_map(cloud, range, cfg.bev_cell_size, cfg.pixel_dim)?,
            keypoints,
        })
    }

    /// Assembled representation; a component whose source set is empty (empty
    /// cloud) is all zeros.
    pub fn roi(&self, proposal: &Box3D, cfg: &RfaConfig) -> Result<RoiRepresentation> {
        let spread = |src: &FeatureSet| -> Result<Vec<f64>> {
            if src.is_empty() {
                Ok(vec![0.0; src.dim()])
            } else {
                Ok(propagate_features(src, &[proposal.center])?.features()[0].clone())
            }
        };
        let voxel = spread(&self.voxels)?;
        let pixel = pixel_component(&self.bev, proposal, cfg)?;
        let point = spread(&self.keypoints)?;
        assemble(proposal.center, &voxel, &pixel, &point)
    }

    /// Backbone features broadcast onto raw points (inputs of the auxiliary heads).
    pub fn point_features(&self, cloud: &PointCloud) -> Result<Vec<Vec<f64>>> {
        if cloud.is_empty() {
            return Ok(Vec::new());
        }
        Ok(propagate_features(&self.voxels, &cloud.positions())?.features().to_vec())
    }
}

/// Per-point supervision for the auxiliary heads: foreground mask (closed
/// containment in any gt box) and the offset from the point to the center of
/// the first containing box; zero elsewhere.
pub fn auxiliary_targets(cloud: &PointCloud, gt_boxes: &[Box3D]) -> (Vec<bool>, Vec<[f64; 3]>) {
    cloud
        .points()
        .iter()
        .map(|p| {
            let q = p.xyz();
            match gt_boxes.iter().find(|b| b.contains(q)) {
                Some(b) => (true, [b.center[0] - q[0], b.center[1] - q[1], b.center[2] - q[2]]),
                None => (false, [0.0; 3]),
            }
        })
        .unzip()
}
