//! Many-to-one voxelization with mean-point voxel features.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scene::{Bounds3, PointCloud};

/// Ratios within this distance of an integer are treated as exact when sizing the grid.
const RESOLUTION_SLACK: f64 = 1e-9;
/// Bits per axis in a packed voxel key.
const KEY_BITS: u32 = 21;
const KEY_LIMIT: usize = 1 << KEY_BITS;

/// What happens to points arriving at a voxel that is already full.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum OverflowPolicy {
    /// Keep the first `max_points_per_voxel` points in input order.
    #[default]
    KeepFirst,
    /// Keep a uniformly random subset (reservoir sampling) drawn from a seeded stream.
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelizationConfig {
    /// `(v_L, v_W, v_H)` in meters.
    pub step: [f64; 3],
    /// `None` means unbounded capacity.
    pub max_points_per_voxel: Option<usize>,
    pub range_bounds: Bounds3,
    #[serde(default)]
    pub overflow: OverflowPolicy,
}

impl Default for VoxelizationConfig {
    fn default() -> Self {
        Self::kitti()
    }
}

impl VoxelizationConfig {
    pub const DEFAULT_CAPACITY: usize = 5;

    /// KITTI car setting: 5 cm x 5 cm x 10 cm voxels over the clipped range.
    pub fn kitti() -> Self {
        Self {
            step: [0.05, 0.05, 0.1],
            max_points_per_voxel: Some(Self::DEFAULT_CAPACITY),
            range_bounds: Bounds3::KITTI,
            overflow: OverflowPolicy::KeepFirst,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.range_bounds.validate()?;
        if !self.step.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Config(format!(
                "voxel step {:?} must be strictly positive",
                self.step
            )));
        }
        if self.max_points_per_voxel == Some(0) {
            return Err(Error::Config("max_points_per_voxel must be at least 1".into()));
        }
        let res = self.resolution();
        if res.iter().any(|&r| r > KEY_LIMIT) {
            return Err(Error::Config(format!(
                "grid resolution {res:?} exceeds {KEY_LIMIT} cells per axis"
            )));
        }
        Ok(())
    }

    /// `ceil(extent / step)` per axis.
    pub fn resolution(&self) -> [usize; 3] {
        let ext = self.range_bounds.extent();
        std::array::from_fn(|a| {
            let ratio = ext[a] / self.step[a];
            let nearest = ratio.round();
            if (ratio - nearest).abs() <= RESOLUTION_SLACK * nearest.max(1.0) {
                nearest as usize
            } else {
                ratio.ceil() as usize
            }
        })
    }

    /// Voxel index of a point, or `None` if it is outside the range.
    pub fn index_of(&self, p: [f64; 3]) -> Option<[u32; 3]> {
        if !self.range_bounds.contains(p) {
            return None;
        }
        let res = self.resolution();
        let mut idx = [0u32; 3];
        for a in 0..3 {
            let f = ((p[a] - self.range_bounds.min[a]) / self.step[a]).floor();
            // Rounding can push a point just below the upper bound into cell `res`.
            idx[a] = (f.max(0.0) as usize).min(res[a] - 1) as u32;
        }
        Some(idx)
    }
}

/// Interleaves the low 21 bits of each coordinate into a Morton code.
pub fn morton_encode(idx: [u32; 3]) -> u64 {
    fn spread(v: u32) -> u64 {
        let mut x = u64::from(v) & 0x1f_ffff;
        x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
        x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
        x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
        x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
        x = (x | (x << 2)) & 0x1249_2492_4924_9249;
        x
    }
    spread(idx[0]) | (spread(idx[1]) << 1) | (spread(idx[2]) << 2)
}

pub fn morton_decode(key: u64) -> [u32; 3] {
    fn compact(v: u64) -> u32 {
        let mut x = v & 0x1249_2492_4924_9249;
        x = (x | (x >> 2)) & 0x10c3_0c30_c30c_30c3;
        x = (x | (x >> 4)) & 0x100f_00f0_0f00_f00f;
        x = (x | (x >> 8)) & 0x001f_0000_ff00_00ff;
        x = (x | (x >> 16)) & 0x001f_0000_0000_ffff;
        x = (x | (x >> 32)) & 0x1f_ffff;
        x as u32
    }
    [compact(key), compact(key >> 1), compact(key >> 2)]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelEntry {
    /// Mean of the retained `(x, y, z, r)`.
    pub feature: [f64; 4],
    /// Number of retained points.
    pub point_count: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Accum {
    sum: [f64; 4],
    kept: usize,
    seen: usize,
    // Reservoir mode keeps the retained points explicitly.
    slot: usize,
}

/// Sparse voxel grid keyed by packed Morton index.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelGrid {
    entries: HashMap<u64, VoxelEntry>,
    resolution: [usize; 3],
    step: [f64; 3],
    origin: [f64; 3],
}

impl SparseVoxelGrid {
    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn step(&self) -> [f64; 3] {
        self.step
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: [u32; 3]) -> Option<&VoxelEntry> {
        self.entries.get(&morton_encode(idx))
    }

    /// Entries in lexicographic `(i, j, k)` order.
    pub fn sorted_entries(&self) -> Vec<([u32; 3], VoxelEntry)> {
        let mut out: Vec<_> = self
            .entries
            .iter()
            .map(|(&k, &e)| (morton_decode(k), e))
            .collect();
        out.sort_unstable_by_key(|(idx, _)| *idx);
        out
    }

    /// Sum of retained point counts.
    pub fn retained_points(&self) -> usize {
        self.entries.values().map(|e| e.point_count).sum()
    }

    /// Real-world center of voxel `idx`.
    pub fn centroid(&self, idx: [u32; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + (f64::from(idx[a]) + 0.5) * self.step[a])
    }

    /// One line per voxel: `i j k count fx fy fz fr`, lexicographic order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (idx, e) in self.sorted_entries() {
            let f = e.feature;
            out.push_str(&format!(
                "{} {} {} {} {} {} {} {}\n",
                idx[0], idx[1], idx[2], e.point_count, f[0], f[1], f[2], f[3]
            ));
        }
        out
    }
}

/// Groups points by voxel index and averages the retained points of each voxel.
pub fn voxelize(cloud: &PointCloud, cfg: &VoxelizationConfig) -> Result<SparseVoxelGrid> {
    cfg.validate()?;
    let capacity = cfg.max_points_per_voxel.unwrap_or(usize::MAX);
    let mut accum: HashMap<u64, Accum> = HashMap::new();
    // Only used by the reservoir policy: retained points per voxel.
    let mut reservoirs: Vec<Vec<[f64; 4]>> = Vec::new();
    let mut rng = match cfg.overflow {
        OverflowPolicy::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        OverflowPolicy::KeepFirst => None,
    };

    for (n, p) in cloud.points().iter().enumerate() {
        let idx = cfg.index_of(p.xyz()).ok_or_else(|| {
            Error::Contract(format!(
                "point {n} at ({}, {}, {}) lies outside the voxelization range",
                p.x, p.y, p.z
            ))
        })?;
        let v = p.as_array();
        let slot_count = reservoirs.len();
        let a = accum.entry(morton_encode(idx)).or_insert_with(|| Accum {
            slot: slot_count,
            ..Accum::default()
        });
        a.seen += 1;
        match rng.as_mut() {
            None => {
                if a.kept < capacity {
                    a.kept += 1;
                    for c in 0..4 {
                        a.sum[c] += v[c];
                    }
                }
            }
            Some(rng) => {
                if a.slot == reservoirs.len() {
                    reservoirs.push(Vec::new());
                }
                let res = &mut reservoirs[a.slot];
                if res.len() < capacity {
                    res.push(v);
                } else {
                    let j = rng.random_range(0..a.seen);
                    if j < capacity {
                        res[j] = v;
                    }
                }
                a.kept = res.len();
            }
        }
    }

    let entries = accum
        .into_iter()
        .map(|(key, a)| {
            let sum = if rng.is_some() {
                reservoirs[a.slot].iter().fold([0.0; 4], |mut s, v| {
                    for c in 0..4 {
                        s[c] += v[c];
                    }
                    s
                })
            } else {
                a.sum
            };
            let n = a.kept as f64;
            (
                key,
                VoxelEntry {
                    feature: sum.map(|s| s / n),
                    point_count: a.kept,
                },
            )
        })
        .collect();

    Ok(SparseVoxelGrid {
        entries,
        resolution: cfg.resolution(),
        step: cfg.step,
        origin: cfg.range_bounds.min,
    })
}

/// Voxel centers in world coordinates paired with their mean-point features,
/// lexicographic in `(i, j, k)`.
pub fn restore_centroids(grid: &SparseVoxelGrid) -> Vec<([f64; 3], [f64; 4])> {
    grid.sorted_entries()
        .into_iter()
        .map(|(idx, e)| (grid.centroid(idx), e.feature))
        .collect()
}
