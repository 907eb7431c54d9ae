//! Point-set operators: farthest point sampling, inverse-distance feature
//! propagation, radius grouping with max-pooled PointNet layers, and BEV
//! grid-point sampling.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nnet::DenseStack;
use crate::scene::Box3D;

/// Regularizer in the inverse squared-distance weights.
pub const PROPAGATION_EPS: f64 = 1e-8;
/// Number of neighbors used by feature propagation.
pub const PROPAGATION_K: usize = 3;

pub(crate) fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Uniform-grid hash over a fixed point set for radius queries.
#[derive(Debug, Clone)]
pub struct SpatialHash {
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<usize>>,
    positions: Vec<[f64; 3]>,
}

impl SpatialHash {
    pub fn new(positions: &[[f64; 3]], cell: f64) -> Result<Self> {
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(Error::Range(format!("spatial hash cell size {cell} must be positive")));
        }
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, &p) in positions.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        Ok(Self {
            cell,
            buckets,
            positions: positions.to_vec(),
        })
    }

    fn key(p: [f64; 3], cell: f64) -> [i64; 3] {
        p.map(|v| (v / cell).floor() as i64)
    }

    /// Indices with `|p - q| < radius`, ascending.
    pub fn within(&self, q: [f64; 3], radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        let reach = (radius / self.cell).ceil() as i64;
        let k = Self::key(q, self.cell);
        let mut out = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(b) = self.buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        out.extend(b.iter().copied().filter(|&i| dist2(self.positions[i], q) < r2));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Positions with one feature vector each.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    positions: Vec<[f64; 3]>,
    features: Vec<Vec<f64>>,
    dim: usize,
}

impl FeatureSet {
    pub fn new(positions: Vec<[f64; 3]>, features: Vec<Vec<f64>>, dim: usize) -> Result<Self> {
        if positions.len() != features.len() {
            return Err(Error::dim(positions.len(), features.len(), "feature set rows"));
        }
        if let Some(f) = features.iter().find(|f| f.len() != dim) {
            return Err(Error::dim(dim, f.len(), "feature set channels"));
        }
        Ok(Self {
            positions,
            features,
            dim,
        })
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> FeatureSet {
        FeatureSet {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            dim: self.dim,
        }
    }
}

/// Greedy farthest point sampling from `start_index`; ties pick the lowest index.
pub fn farthest_point_sample(positions: &[[f64; 3]], k: usize, start_index: usize) -> Result<Vec<usize>> {
    let n = positions.len();
    if k > n {
        return Err(Error::Contract(format!("cannot sample {k} of {n} points")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if start_index >= n {
        return Err(Error::Contract(format!("start index {start_index} out of {n} points")));
    }
    let mut chosen = Vec::with_capacity(k);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut cur = start_index;
    for _ in 0..k {
        chosen.push(cur);
        taken[cur] = true;
        let c = positions[cur];
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in 0..n {
            let d = dist2(positions[i], c);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if !taken[i] && min_d2[i] > best.0 {
                best = (min_d2[i], i);
            }
        }
        cur = best.1;
    }
    Ok(chosen)
}

/// The `k` nearest indices to `q` (ties by lower index) with squared distances.
fn k_nearest(positions: &[[f64; 3]], q: [f64; 3], k: usize) -> Vec<(f64, usize)> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, &p) in positions.iter().enumerate() {
        let d = dist2(p, q);
        if best.len() == k && d >= best[k - 1].0 {
            continue;
        }
        let at = best.partition_point(|&(bd, _)| bd <= d);
        best.insert(at, (d, i));
        best.truncate(k);
    }
    best
}

/// Inverse-distance-weighted interpolation from the 3 nearest source points
/// (all of them when fewer exist), weights `1 / (d^2 + eps)` normalized to one.
pub fn propagate_features(src: &FeatureSet, query_positions: &[[f64; 3]]) -> Result<FeatureSet> {
    if src.is_empty() {
        return Err(Error::Contract("feature propagation needs a non-empty source set".into()));
    }
    let k = PROPAGATION_K.min(src.len());
    let features = query_positions
        .iter()
        .map(|&q| {
            let nn = k_nearest(&src.positions, q, k);
            let w: Vec<f64> = nn.iter().map(|(d, _)| 1.0 / (d + PROPAGATION_EPS)).collect();
            let total: f64 = w.iter().sum();
            let mut out = vec![0.0; src.dim];
            for ((_, i), wi) in nn.iter().zip(&w) {
                let wn = wi / total;
                for (o, f) in out.iter_mut().zip(&src.features[*i]) {
                    *o += wn * f;
                }
            }
            out
        })
        .collect();
    FeatureSet::new(query_positions.to_vec(), features, src.dim)
}

/// Set abstraction: for each center, run `mlp` on `[feature, p - center]` of every
/// source point strictly within `radius` and max-pool over them channel-wise.
/// Empty neighborhoods yield zeros.
pub fn set_abstraction(
    src: &FeatureSet,
    centers: &[[f64; 3]],
    radius: f64,
    mlp: &DenseStack,
) -> Result<FeatureSet> {
    if mlp.input_dim() != src.dim + 3 {
        return Err(Error::dim(src.dim + 3, mlp.input_dim(), "set abstraction mlp input"));
    }
    let hash = SpatialHash::new(&src.positions, radius.max(1e-6))?;
    let out_dim = mlp.output_dim();
    let mut features = Vec::with_capacity(centers.len());
    for &c in centers {
        let mut pooled: Option<Vec<f64>> = None;
        for j in hash.within(c, radius) {
            let y = mlp.forward(&grouped_input(src, j, c))?;
            match pooled.as_mut() {
                None => pooled = Some(y),
                Some(acc) => acc.iter_mut().zip(&y).for_each(|(a, v)| *a = a.max(*v)),
            }
        }
        features.push(pooled.unwrap_or_else(|| vec![0.0; out_dim]));
    }
    FeatureSet::new(centers.to_vec(), features, out_dim)
}

fn grouped_input(src: &FeatureSet, j: usize, c: [f64; 3]) -> Vec<f64> {
    let p = src.positions[j];
    let mut x = src.features[j].clone();
    x.extend_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
    x
}

/// Multi-scale grouping: one set abstraction per `(radius, mlp)` pair, outputs concatenated.
pub fn set_abstraction_msg(
    src: &FeatureSet,
    centers: &[[f64; 3]],
    scales: &[(f64, &DenseStack)],
) -> Result<FeatureSet> {
    let parts = scales
        .iter()
        .map(|(r, mlp)| set_abstraction(src, centers, *r, mlp))
        .collect::<Result<Vec<_>>>()?;
    let dim = parts.iter().map(FeatureSet::dim).sum();
    let features = (0..centers.len())
        .map(|i| parts.iter().flat_map(|p| p.features[i].iter().copied()).collect())
        .collect();
    FeatureSet::new(centers.to_vec(), features, dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BevSampling {
    #[default]
    Bilinear,
    Nearest,
}

/// Dense `rows x cols x channels` BEV tensor; columns run along `x`, rows along `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap {
    rows: usize,
    cols: usize,
    channels: usize,
    data: Vec<f64>,
    pub cell_size: f64,
    pub origin: [f64; 2],
}

impl BevFeatureMap {
    pub fn new(
        rows: usize,
        cols: usize,
        channels: usize,
        data: Vec<f64>,
        cell_size: f64,
        origin: [f64; 2],
    ) -> Result<Self> {
        if data.len() != rows * cols * channels {
            return Err(Error::dim(rows * cols * channels, data.len(), "bev map storage"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Range("bev map has non-finite entries".into()));
        }
        if !(cell_size > 0.0) || !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::Range("bev map cell size must be positive".into()));
        }
        Ok(Self {
            rows,
            cols,
            channels,
            data,
            cell_size,
            origin,
        })
    }

    /// Map whose every entry is produced by `f(row, col, channel)`.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        channels: usize,
        cell_size: f64,
        origin: [f64; 2],
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols * channels);
        for r in 0..rows {
            for c in 0..cols {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::new(rows, cols, channels, data, cell_size, origin)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.cols + col) * self.channels + channel]
    }

    /// Value at an integer cell, zero outside the map.
    fn get_padded(&self, row: i64, col: i64, channel: usize) -> f64 {
        if row < 0 || col < 0 || row >= self.rows as i64 || col >= self.cols as i64 {
            0.0
        } else {
            self.get(row as usize, col as usize, channel)
        }
    }

    /// Samples one channel at a world `(x, y)`; cell centers hold the stored values.
    pub fn sample(&self, x: f64, y: f64, channel: usize, mode: BevSampling) -> f64 {
        let fx = (x - self.origin[0]) / self.cell_size;
        let fy = (y - self.origin[1]) / self.cell_size;
        match mode {
            BevSampling::Nearest => self.get_padded(fy.floor() as i64, fx.floor() as i64, channel),
            BevSampling::Bilinear => {
                let (gx, gy) = (fx - 0.5, fy - 0.5);
                let (c0, r0) = (gx.floor(), gy.floor());
                let (tx, ty) = (gx - c0, gy - r0);
                let (c0, r0) = (c0 as i64, r0 as i64);
                let mut v = 0.0;
                for (dr, wy) in [(0, 1.0 - ty), (1, ty)] {
                    for (dc, wx) in [(0, 1.0 - tx), (1, tx)] {
                        let w = wx * wy;
                        if w != 0.0 {
                            v += w * self.get_padded(r0 + dr, c0 + dc, channel);
                        }
                    }
                }
                v
            }
        }
    }
}

/// World positions of the `m1 x m2` grid inside the proposal's rotated BEV
/// footprint: `m1` cells along the length, `m2` across the width, point
/// `g = a * m2 + b` at the center of cell `(a, b)`.
pub fn bev_grid_points(proposal: &Box3D, m1: usize, m2: usize) -> Vec<[f64; 2]> {
    let (l, w) = (proposal.dims[0], proposal.dims[1]);
    let mut out = Vec::with_capacity(m1 * m2);
    for a in 0..m1 {
        let u = -0.5 * l + (a as f64 + 0.5) * l / m1 as f64;
        for b in 0..m2 {
            let v = -0.5 * w + (b as f64 + 0.5) * w / m2 as f64;
            let p = proposal.to_world([u, v, 0.0]);
            out.push([p[0], p[1]]);
        }
    }
    out
}

/// Samples channel `g` of `map` at grid point `g` of the proposal footprint.
pub fn sample_bev_grid(map: &BevFeatureMap, proposal: &Box3D, m1: usize, m2: usize) -> Result<Vec<f64>> {
    sample_bev_grid_with(map, proposal, m1, m2, BevSampling::Bilinear)
}

pub fn sample_bev_grid_with(
    map: &BevFeatureMap,
    proposal: &Box3D,
    m1: usize,
    m2: usize,
    mode: BevSampling,
) -> Result<Vec<f64>> {
    if m1 == 0 || m2 == 0 {
        return Err(Error::Config("grid counts m1, m2 must be positive".into()));
    }
    if map.channels < m1 * m2 {
        return Err(Error::Config(format!(
            "bev map has {} channels but the {m1}x{m2} grid needs {}",
            map.channels,
            m1 * m2
        )));
    }
    Ok(bev_grid_points(proposal, m1, m2)
        .into_iter()
        .enumerate()
        .map(|(g, [x, y])| map.sample(x, y, g, mode))
        .collect())
}
