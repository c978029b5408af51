//! Point-cloud container and geometric kernels.
//!
//! All comparisons use squared Euclidean distances (argmin-equivalent and
//! cheaper), and every selection rule breaks ties toward the lowest index so
//! results are deterministic and oracle-checkable.

use crate::error::{Error, Result};

/// N points with 3-D coordinates in meters, plus optional per-point extra
/// channels (e.g. colors in `[0, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<[f64; 3]>,
    extras: Option<Extras>,
}

/// Row-aligned extra channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Extras {
    pub width: usize,
    /// Row-major `N × width`.
    pub data: Vec<f64>,
}

impl PointCloud {
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid(
                "point cloud must contain at least one point",
            ));
        }
        if !coords.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite {
                op: "PointCloud::new",
            });
        }
        Ok(PointCloud {
            coords,
            extras: None,
        })
    }

    pub fn with_extras(mut self, width: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || data.len() != self.len() * width {
            return Err(Error::invalid(format!(
                "extras of width {width} with {} values do not align with {} points",
                data.len(),
                self.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: "PointCloud::with_extras",
            });
        }
        self.extras = Some(Extras { width, data });
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        false // N ≥ 1 by construction
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn coords_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.coords
    }

    pub fn extras(&self) -> Option<&Extras> {
        self.extras.as_ref()
    }

    pub fn extra_width(&self) -> usize {
        self.extras.as_ref().map_or(0, |e| e.width)
    }
}

/// Sub-sampled anchor points. `coords[i]` always equals
/// `parent.coords[source_indices[i]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyPoints {
    pub coords: Vec<[f64; 3]>,
    pub source_indices: Vec<usize>,
}

impl KeyPoints {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

#[inline]
pub fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Row-major `P × Q` matrix of squared Euclidean distances.
pub fn pairwise_sq_dist(a: &[[f64; 3]], b: &[[f64; 3]]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &pa in a {
        for &pb in b {
            out.push(sq_dist(pa, pb));
        }
    }
    out
}

/// Greedy farthest point sampling starting from index 0. Each subsequent
/// pick maximizes the minimum squared distance to everything already
/// selected; ties break to the lowest index.
pub fn farthest_point_sampling(pc: &PointCloud, m: usize) -> Result<KeyPoints> {
    farthest_point_sampling_from(pc, m, 0)
}

/// Farthest point sampling from an explicit start index (a seeded start is
/// available for training; tests use the deterministic index 0).
pub fn farthest_point_sampling_from(pc: &PointCloud, m: usize, start: usize) -> Result<KeyPoints> {
    let n = pc.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!(
            "farthest_point_sampling: m = {m} outside 1..={n}"
        )));
    }
    if start >= n {
        return Err(Error::invalid(format!(
            "farthest_point_sampling: start {start} out of range for {n} points"
        )));
    }
    let coords = pc.coords();
    let mut selected = Vec::with_capacity(m);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut last = start;
    selected.push(start);
    while selected.len() < m {
        let lastc = coords[last];
        let mut best = f64::NEG_INFINITY;
        let mut best_i = 0;
        for (i, (&c, md)) in coords.iter().zip(min_dist.iter_mut()).enumerate() {
            let d = sq_dist(c, lastc);
            if d < *md {
                *md = d;
            }
            if *md > best {
                best = *md;
                best_i = i;
            }
        }
        selected.push(best_i);
        last = best_i;
    }
    Ok(KeyPoints {
        coords: selected.iter().map(|&i| coords[i]).collect(),
        source_indices: selected,
    })
}

/// Brute-force k-nearest-neighbor search: row `i` of the returned `Q × k`
/// index matrix holds the `k` refs nearest to `queries[i]`, ordered by
/// ascending distance with ties broken by lowest index.
pub fn knn_search(queries: &[[f64; 3]], refs: &[[f64; 3]], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > refs.len() {
        return Err(Error::invalid(format!(
            "knn_search: k = {k} outside 1..={}",
            refs.len()
        )));
    }
    let mut out = Vec::with_capacity(queries.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(refs.len());
    for &q in queries {
        scratch.clear();
        scratch.extend(refs.iter().enumerate().map(|(i, &r)| (sq_dist(q, r), i)));
        scratch.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.extend(scratch[..k].iter().map(|&(_, i)| i));
    }
    Ok(out)
}

/// For every point, the index of its nearest key (lowest index on ties).
pub fn nearest_key_assignment(pc: &PointCloud, keys: &KeyPoints) -> Vec<usize> {
    assert!(!keys.is_empty(), "nearest_key_assignment: no keys");
    pc.coords()
        .iter()
        .map(|&p| {
            let mut best = f64::INFINITY;
            let mut best_j = 0;
            for (j, &kc) in keys.coords.iter().enumerate() {
                let d = sq_dist(p, kc);
                if d < best {
                    best = d;
                    best_j = j;
                }
            }
            best_j
        })
        .collect()
}

// ── uniform grid accelerator ───────────────────────────────────────

/// Uniform hash grid over 3-D points. Used to accelerate fixed-radius
/// queries (ball grouping) and k-NN; both paths return exactly what the
/// brute-force kernels return.
pub struct GridIndex<'a> {
    points: &'a [[f64; 3]],
    cell: f64,
    origin: [f64; 3],
    dims: [usize; 3],
    /// CSR layout: cell c owns `order[starts[c]..starts[c+1]]`, each bucket
    /// sorted by point index.
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> GridIndex<'a> {
    pub fn build(points: &'a [[f64; 3]], cell: f64) -> Result<Self> {
        if !cell.is_finite() || cell <= 0.0 {
            return Err(Error::invalid(format!(
                "grid cell size {cell} must be positive"
            )));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent_cells = |cell: f64| -> [usize; 3] {
            let mut dims = [1usize; 3];
            for a in 0..3 {
                dims[a] = (((hi[a] - lo[a]) / cell).floor() as usize + 1).max(1);
            }
            dims
        };
        // Cap the cell count so pathological cell sizes cannot blow memory.
        let mut cell = cell;
        let mut dims = extent_cells(cell);
        let cap = 4 * points.len().max(1024);
        if dims.iter().product::<usize>() > cap {
            let scale = (dims.iter().product::<usize>() as f64 / cap as f64).cbrt();
            cell *= scale.max(1.0);
            dims = extent_cells(cell);
        }
        let ncells = dims[0] * dims[1] * dims[2];
        let cell_of = |p: &[f64; 3]| -> usize {
            let mut idx = [0usize; 3];
            for a in 0..3 {
                idx[a] = (((p[a] - lo[a]) / cell).floor() as usize).min(dims[a] - 1);
            }
            (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]
        };
        let mut counts = vec![0usize; ncells + 1];
        for p in points {
            counts[cell_of(p) + 1] += 1;
        }
        for c in 0..ncells {
            counts[c + 1] += counts[c];
        }
        let starts = counts.clone();
        let mut cursor = counts;
        let mut order = vec![0usize; points.len()];
        // Filling in index order keeps each bucket sorted by point index.
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p);
            order[cursor[c]] = i;
            cursor[c] += 1;
        }
        Ok(GridIndex {
            points,
            cell,
            origin: lo,
            dims,
            starts,
            order,
        })
    }

    fn cell_coord(&self, p: [f64; 3]) -> [isize; 3] {
        let mut idx = [0isize; 3];
        for a in 0..3 {
            idx[a] = (((p[a] - self.origin[a]) / self.cell).floor() as isize)
                .clamp(0, self.dims[a] as isize - 1);
        }
        idx
    }

    fn bucket(&self, ix: isize, iy: isize, iz: isize) -> &[usize] {
        if ix < 0 || iy < 0 || iz < 0 {
            return &[];
        }
        let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
        if ix >= self.dims[0] || iy >= self.dims[1] || iz >= self.dims[2] {
            return &[];
        }
        let c = (ix * self.dims[1] + iy) * self.dims[2] + iz;
        &self.order[self.starts[c]..self.starts[c + 1]]
    }

    /// Indices of all points with squared distance ≤ `radius²` from
    /// `center`, ascending.
    pub fn query_radius(&self, center: [f64; 3], radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        let reach = (radius / self.cell).ceil() as isize;
        let c = self.cell_coord(center);
        let mut found = Vec::new();
        for ix in c[0] - reach..=c[0] + reach {
            for iy in c[1] - reach..=c[1] + reach {
                for iz in c[2] - reach..=c[2] + reach {
                    for &i in self.bucket(ix, iy, iz) {
                        if sq_dist(self.points[i], center) <= r2 {
                            found.push(i);
                        }
                    }
                }
            }
        }
        found.sort_unstable();
        found
    }

    /// Exact k nearest neighbors of `center`, matching [`knn_search`]
    /// ordering (ascending distance, ties to lowest index). Searches
    /// expanding cell shells until the best-k set provably cannot improve.
    pub fn knn(&self, center: [f64; 3], k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.points.len() {
            return Err(Error::invalid(format!(
                "grid knn: k = {k} outside 1..={}",
                self.points.len()
            )));
        }
        let c = self.cell_coord(center);
        let mut best: Vec<(f64, usize)> = Vec::new();
        let max_reach = *self.dims.iter().max().unwrap() as isize + 1;
        for reach in 0..=max_reach {
            // Any point in a cell at Chebyshev shell `reach` is at least
            // (reach-1)·cell away from the center.
            if best.len() >= k {
                let bound = (reach - 1).max(0) as f64 * self.cell;
                if best[k - 1].0 <= bound * bound {
                    break;
                }
            }
            for ix in c[0] - reach..=c[0] + reach {
                for iy in c[1] - reach..=c[1] + reach {
                    for iz in c[2] - reach..=c[2] + reach {
                        let on_shell = (ix - c[0])
                            .abs()
                            .max((iy - c[1]).abs())
                            .max((iz - c[2]).abs())
                            == reach;
                        if !on_shell {
                            continue;
                        }
                        for &i in self.bucket(ix, iy, iz) {
                            best.push((sq_dist(self.points[i], center), i));
                        }
                    }
                }
            }
            best.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            best.truncate(k);
        }
        Ok(best[..k].iter().map(|&(_, i)| i).collect())
    }
}
