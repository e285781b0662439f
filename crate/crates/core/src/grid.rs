//! Discrete measures on rectangular product grids.
//!
//! A [`GridMeasure`] stores one nonnegative weight per grid cell, where a
//! weight is density times cell volume. Axes carry their own quadrature
//! volumes, so density/weight conversions are exact on the grid. Flat cell
//! indices are row-major with the last axis varying fastest, which makes the
//! flat index of a leading prefix of coordinates `flat / trailing_size`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GRID_EQ_TOL: f64 = 1e-12;

/// Block dimensions `d_1..d_k0` with their prefix sums `n_i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct BlockStructure {
    block_dims: Vec<usize>,
    prefix_dims: Vec<usize>,
}

impl BlockStructure {
    /// Builds the structure from block sizes. A single block is accepted and
    /// describes the plain (non-cascaded) bridge.
    pub fn new(block_dims: Vec<usize>) -> Result<Self> {
        if block_dims.is_empty() {
            return Err(Error::InvalidStructure("no blocks".into()));
        }
        if block_dims.contains(&0) {
            return Err(Error::InvalidStructure(format!("block dimensions must be positive, got {block_dims:?}")));
        }
        let prefix_dims = block_dims
            .iter()
            .scan(0, |acc, &d| {
                *acc += d;
                Some(*acc)
            })
            .collect();
        Ok(Self { block_dims, prefix_dims })
    }

    /// One block per coordinate.
    pub fn scalar_blocks(dim: usize) -> Result<Self> {
        Self::new(vec![1; dim])
    }

    /// Number of levels `k0`.
    pub fn depth(&self) -> usize {
        self.block_dims.len()
    }

    /// `true` when there are at least two levels.
    pub fn is_cascade(&self) -> bool {
        self.depth() >= 2
    }

    pub fn total_dim(&self) -> usize {
        *self.prefix_dims.last().unwrap()
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.block_dims
    }

    /// `d_i` for `1 <= level <= k0`.
    pub fn block_dim(&self, level: usize) -> usize {
        self.block_dims[level - 1]
    }

    /// `n_i` for `0 <= level <= k0`, with `n_0 = 0`.
    pub fn prefix_dim(&self, level: usize) -> usize {
        if level == 0 {
            0
        } else {
            self.prefix_dims[level - 1]
        }
    }

    /// Coordinates belonging to block `level`.
    pub fn block_range(&self, level: usize) -> std::ops::Range<usize> {
        self.prefix_dim(level - 1)..self.prefix_dim(level)
    }

    pub fn check_level(&self, level: usize) -> Result<()> {
        if level == 0 || level > self.depth() {
            Err(Error::LevelOutOfRange { level, depth: self.depth() })
        } else {
            Ok(())
        }
    }
}

impl TryFrom<Vec<usize>> for BlockStructure {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BlockStructure> for Vec<usize> {
    fn from(s: BlockStructure) -> Self {
        s.block_dims
    }
}

/// Grid points of one coordinate with their quadrature volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    points: Vec<f64>,
    volumes: Vec<f64>,
}

impl Axis {
    pub fn new(points: Vec<f64>, volumes: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidAxis("empty axis".into()));
        }
        if points.len() != volumes.len() {
            return Err(Error::InvalidAxis(format!("{} points but {} volumes", points.len(), volumes.len())));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidAxis("non-finite point".into()));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidAxis("points must be strictly increasing".into()));
        }
        if volumes.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidAxis("cell volumes must be positive".into()));
        }
        Ok(Self { points, volumes })
    }

    /// Midpoint rule: `count` equal cells partitioning `[min, max]`, one point
    /// at each cell centre.
    pub fn midpoint(min: f64, max: f64, count: usize) -> Result<Self> {
        if count == 0 || !(max > min) {
            return Err(Error::InvalidAxis(format!("need count >= 1 and max > min, got [{min}, {max}] x {count}")));
        }
        let h = (max - min) / count as f64;
        let points = (0..count).map(|j| min + (j as f64 + 0.5) * h).collect();
        Self::new(points, vec![h; count])
    }

    /// Unit-volume cells on the given points (plain histograms).
    pub fn unit(points: Vec<f64>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0; n])
    }

    /// Unit-volume cells at `0, 1, .., count - 1`.
    pub fn indices(count: usize) -> Result<Self> {
        Self::unit((0..count).map(|j| j as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    /// Index of the grid point nearest to `x` (ties go to the lower index).
    pub fn nearest(&self, x: f64) -> usize {
        let p = &self.points;
        match p.binary_search_by(|a| a.partial_cmp(&x).unwrap()) {
            Ok(j) => j,
            Err(0) => 0,
            Err(j) if j == p.len() => p.len() - 1,
            Err(j) => {
                if x - p[j - 1] <= p[j] - x {
                    j - 1
                } else {
                    j
                }
            }
        }
    }

    pub(crate) fn approx_eq(&self, other: &Axis) -> bool {
        self.len() == other.len()
            && self.points.iter().zip(&other.points).all(|(a, b)| (a - b).abs() <= GRID_EQ_TOL * (1.0 + a.abs()))
            && self.volumes.iter().zip(&other.volumes).all(|(a, b)| (a - b).abs() <= GRID_EQ_TOL * a.abs())
    }
}

pub(crate) fn axes_approx_eq(a: &[Axis], b: &[Axis]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.approx_eq(y))
}

/// Number of cells of a product grid.
pub fn grid_len(axes: &[Axis]) -> usize {
    axes.iter().map(Axis::len).product()
}

/// Per-cell volumes of a product grid in flat order.
pub fn cell_volumes(axes: &[Axis]) -> Vec<f64> {
    let mut out = vec![1.0];
    for axis in axes {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for &v in &out {
            next.extend(axis.volumes().iter().map(|w| v * w));
        }
        out = next;
    }
    out
}

/// Writes the multi-index of `flat` into `out` (row-major, last axis fastest).
pub fn unravel(mut flat: usize, dims: &[usize], out: &mut [usize]) {
    for k in (0..dims.len()).rev() {
        out[k] = flat % dims[k];
        flat /= dims[k];
    }
}

/// Flat index of a multi-index.
pub fn ravel(index: &[usize], dims: &[usize]) -> usize {
    index.iter().zip(dims).fold(0, |acc, (&i, &d)| acc * d + i)
}

/// A finite measure on a product grid, weights in row-major flat order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMeasure {
    axes: Vec<Axis>,
    weights: Vec<f64>,
}

impl GridMeasure {
    pub fn new(axes: Vec<Axis>, weights: Vec<f64>) -> Result<Self> {
        let n = grid_len(&axes);
        if weights.len() != n {
            return Err(Error::InvalidMeasure(format!("grid has {n} cells but {} weights were given", weights.len())));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::InvalidMeasure(format!("weights must be finite and nonnegative, found {w}")));
        }
        Ok(Self { axes, weights })
    }

    /// Weights `f(point) * cell volume` for a density `f`; not normalized.
    pub fn from_density(axes: Vec<Axis>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let dims: Vec<usize> = axes.iter().map(Axis::len).collect();
        let vols = cell_volumes(&axes);
        let mut idx = vec![0; dims.len()];
        let mut x = vec![0.0; dims.len()];
        let weights = vols
            .iter()
            .enumerate()
            .map(|(flat, v)| {
                unravel(flat, &dims, &mut idx);
                for (k, &i) in idx.iter().enumerate() {
                    x[k] = axes[k].points()[i];
                }
                f(&x) * v
            })
            .collect();
        Self::new(axes, weights)
    }

    /// Point mass at the given multi-index.
    pub fn dirac(axes: Vec<Axis>, index: &[usize]) -> Result<Self> {
        let dims: Vec<usize> = axes.iter().map(Axis::len).collect();
        let mut weights = vec![0.0; grid_len(&axes)];
        weights[ravel(index, &dims)] = 1.0;
        Self::new(axes, weights)
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(Axis::len).collect()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn cell_volumes(&self) -> Vec<f64> {
        cell_volumes(&self.axes)
    }

    /// Density values (weight / cell volume) in flat order.
    pub fn densities(&self) -> Vec<f64> {
        self.weights.iter().zip(self.cell_volumes()).map(|(w, v)| w / v).collect()
    }

    pub fn same_grid(&self, other: &GridMeasure) -> bool {
        axes_approx_eq(&self.axes, &other.axes)
    }

    pub(crate) fn check_same_grid(&self, other: &GridMeasure) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "shapes {:?} and {:?} (or their coordinates) differ",
                self.shape(),
                other.shape()
            )))
        }
    }

    /// Scales the weights to unit total mass.
    pub fn normalize(&self) -> Result<GridMeasure> {
        let total = self.total_mass();
        if !(total > 0.0) {
            return Err(Error::ZeroMass);
        }
        Ok(GridMeasure { axes: self.axes.clone(), weights: self.weights.iter().map(|w| w / total).collect() })
    }

    /// Marginal on the first `k` axes.
    pub fn marginal_leading(&self, k: usize) -> GridMeasure {
        assert!(k <= self.dim(), "cannot keep {k} of {} axes", self.dim());
        let trail: usize = self.axes[k..].iter().map(Axis::len).product();
        let weights = self.weights.chunks(trail).map(|c| c.iter().sum()).collect();
        GridMeasure { axes: self.axes[..k].to_vec(), weights }
    }

    /// Marginal on an arbitrary ordered subset of axes.
    pub fn marginal(&self, keep: &[usize]) -> GridMeasure {
        let dims = self.shape();
        let out_dims: Vec<usize> = keep.iter().map(|&a| dims[a]).collect();
        let mut weights = vec![0.0; out_dims.iter().product()];
        let mut idx = vec![0; dims.len()];
        for (flat, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            unravel(flat, &dims, &mut idx);
            let out = keep.iter().fold(0, |acc, &a| acc * dims[a] + idx[a]);
            weights[out] += w;
        }
        GridMeasure { axes: keep.iter().map(|&a| self.axes[a].clone()).collect(), weights }
    }

    /// The level-`i` marginal `μ_i` on the first `n_i` coordinates.
    pub fn marginal_prefix(&self, structure: &BlockStructure, level: usize) -> Result<GridMeasure> {
        self.check_structure(structure)?;
        structure.check_level(level)?;
        Ok(self.marginal_leading(structure.prefix_dim(level)))
    }

    /// Conditional law of the trailing axes given a leading flat prefix index
    /// over the first `k` axes.
    pub fn disintegrate_leading(&self, k: usize, prefix_flat: usize) -> Result<GridMeasure> {
        let trail: usize = self.axes[k..].iter().map(Axis::len).product();
        let slice = &self.weights[prefix_flat * trail..(prefix_flat + 1) * trail];
        let mass: f64 = slice.iter().sum();
        if !(mass > 0.0) {
            let dims: Vec<usize> = self.axes[..k].iter().map(Axis::len).collect();
            let mut prefix = vec![0; k];
            unravel(prefix_flat, &dims, &mut prefix);
            return Err(Error::ConditioningOnNull { prefix });
        }
        Ok(GridMeasure { axes: self.axes[k..].to_vec(), weights: slice.iter().map(|w| w / mass).collect() })
    }

    /// `μ(d x_{[n_i+1, d]} | x_{n_i})` at the grid point `prefix` (length `n_i`).
    pub fn disintegrate(&self, structure: &BlockStructure, level: usize, prefix: &[usize]) -> Result<GridMeasure> {
        self.check_structure(structure)?;
        structure.check_level(level)?;
        let k = structure.prefix_dim(level);
        let flat = self.prefix_flat(k, prefix)?;
        self.disintegrate_leading(k, flat)
    }

    /// Conditional density `f_{ν_i}(y | y_{n_{i-1}})` of block `level` at the
    /// grid point `prefix` (length `n_{i-1}`), returned on the block grid.
    pub fn conditional_density(&self, structure: &BlockStructure, level: usize, prefix: &[usize]) -> Result<Vec<f64>> {
        self.check_structure(structure)?;
        structure.check_level(level)?;
        let k_prev = structure.prefix_dim(level - 1);
        let k = structure.prefix_dim(level);
        let marg = self.marginal_leading(k);
        let flat = self.prefix_flat(k_prev, prefix)?;
        let block_axes = &self.axes[k_prev..k];
        let block_len = grid_len(block_axes);
        let slice = &marg.weights[flat * block_len..(flat + 1) * block_len];
        let prev_mass: f64 = slice.iter().sum();
        if !(prev_mass > 0.0) {
            return Err(Error::ConditioningOnNull { prefix: prefix.to_vec() });
        }
        Ok(slice.iter().zip(cell_volumes(block_axes)).map(|(w, v)| w / (v * prev_mass)).collect())
    }

    fn prefix_flat(&self, k: usize, prefix: &[usize]) -> Result<usize> {
        if prefix.len() != k {
            return Err(Error::InvalidMeasure(format!("prefix has {} coordinates, expected {k}", prefix.len())));
        }
        let dims: Vec<usize> = self.axes[..k].iter().map(Axis::len).collect();
        if prefix.iter().zip(&dims).any(|(i, d)| i >= d) {
            return Err(Error::InvalidMeasure(format!("prefix {prefix:?} outside grid {dims:?}")));
        }
        Ok(ravel(prefix, &dims))
    }

    fn check_structure(&self, structure: &BlockStructure) -> Result<()> {
        if structure.total_dim() != self.dim() {
            return Err(Error::InvalidStructure(format!(
                "structure covers {} coordinates, measure has {}",
                structure.total_dim(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Product measure `self ⊗ other` with `other`'s axes appended.
    pub fn product(&self, other: &GridMeasure) -> GridMeasure {
        let mut weights = Vec::with_capacity(self.len() * other.len());
        for &a in &self.weights {
            weights.extend(other.weights.iter().map(|b| a * b));
        }
        let mut axes = self.axes.clone();
        axes.extend(other.axes.iter().cloned());
        GridMeasure { axes, weights }
    }

    /// Replaces every density value below `floor` on the support by `floor`
    /// (weights recomputed and renormalized). `floor = 0` is the identity.
    pub fn with_density_floor(&self, floor: f64) -> Result<GridMeasure> {
        if floor <= 0.0 {
            return Ok(self.clone());
        }
        let weights = self.weights.iter().zip(self.cell_volumes()).map(|(&w, v)| (w / v).max(floor) * v).collect();
        GridMeasure::new(self.axes.clone(), weights)?.normalize()
    }
}

/// `H(p‖q) = Σ p log(p/q)`, with `0 log 0 = 0` and `+∞` off the support of `q`.
pub fn relative_entropy(p: &GridMeasure, q: &GridMeasure) -> Result<f64> {
    p.check_same_grid(q)?;
    let mut acc = 0.0;
    for (&a, &b) in p.weights.iter().zip(&q.weights) {
        if a > 0.0 {
            if b > 0.0 {
                acc += a * (a / b).ln();
            } else {
                return Ok(f64::INFINITY);
            }
        }
    }
    Ok(acc)
}

/// `∫ f log f` for the grid density `f = weight / volume`.
pub fn differential_entropy(m: &GridMeasure) -> f64 {
    m.weights.iter().zip(m.cell_volumes()).filter(|(w, _)| **w > 0.0).map(|(w, v)| w * (w / v).ln()).sum()
}

/// `(1/2) Σ |p - q|`.
pub fn total_variation(p: &GridMeasure, q: &GridMeasure) -> Result<f64> {
    p.check_same_grid(q)?;
    Ok(tv_slices(&p.weights, &q.weights))
}

/// `(1/2) Σ |a - b|` over raw weight slices of equal length.
pub fn tv_slices(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Right-continuous CDF on sorted grid points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteCDF {
    points: Vec<f64>,
    values: Vec<f64>,
}

impl DiscreteCDF {
    pub fn new(points: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != values.len() {
            return Err(Error::InvalidMeasure("CDF needs matching nonempty points and values".into()));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidMeasure("CDF points must be strictly increasing".into()));
        }
        if values.windows(2).any(|w| w[0] > w[1]) || values[0] < 0.0 {
            return Err(Error::InvalidMeasure("CDF values must be nondecreasing in [0, 1]".into()));
        }
        if (values[values.len() - 1] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMeasure(format!("CDF must end at 1, ends at {}", values[values.len() - 1])));
        }
        Ok(Self { points, values })
    }

    /// Cumulative sums of `weights`, normalized so the last value is 1.
    pub fn from_weights(points: Vec<f64>, weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::ZeroMass);
        }
        let mut acc = 0.0;
        let values = weights
            .iter()
            .map(|w| {
                acc += w;
                acc / total
            })
            .collect();
        Self::new(points, values)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Smallest index `j` with `u <= F(x_j)`; the last index when none is.
    pub fn quantile_index(&self, u: f64) -> usize {
        let j = self.values.partition_point(|&f| f < u);
        j.min(self.values.len() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis2() -> Axis {
        Axis::indices(2).unwrap()
    }

    fn table() -> GridMeasure {
        GridMeasure::new(vec![axis2(), axis2()], vec![0.1, 0.2, 0.3, 0.4]).unwrap()
    }

    #[test]
    fn normalize_cases() {
        let m = GridMeasure::new(vec![axis2()], vec![2.0, 2.0]).unwrap();
        assert_eq!(m.normalize().unwrap().weights(), &[0.5, 0.5]);
        let m = GridMeasure::new(vec![axis2()], vec![1.0, 0.0]).unwrap();
        assert_eq!(m.normalize().unwrap().weights(), &[1.0, 0.0]);
        let m = GridMeasure::new(vec![axis2()], vec![0.0, 0.0]).unwrap();
        assert!(matches!(m.normalize(), Err(Error::ZeroMass)));
    }

    #[test]
    fn rejects_bad_axes_and_weights() {
        assert!(Axis::new(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(Axis::new(vec![0.0, 1.0], vec![1.0, 0.0]).is_err());
        assert!(GridMeasure::new(vec![axis2()], vec![1.0, -0.1]).is_err());
        assert!(GridMeasure::new(vec![axis2()], vec![1.0]).is_err());
        assert!(BlockStructure::new(vec![1, 0]).is_err());
        assert!(BlockStructure::new(vec![]).is_err());
    }

    #[test]
    fn block_structure_prefixes() {
        let s = BlockStructure::new(vec![2, 1, 3]).unwrap();
        assert_eq!(s.depth(), 3);
        assert_eq!(s.total_dim(), 6);
        assert_eq!(s.prefix_dim(0), 0);
        assert_eq!(s.prefix_dim(2), 3);
        assert_eq!(s.block_range(3), 3..6);
        assert!(s.is_cascade());
        assert!(!BlockStructure::new(vec![2]).unwrap().is_cascade());
    }

    #[test]
    fn marginal_prefix_cases() {
        let s = BlockStructure::new(vec![1, 1]).unwrap();
        let m = table();
        let m1 = m.marginal_prefix(&s, 1).unwrap();
        assert!((m1.weights()[0] - 0.3).abs() < 1e-15);
        assert!((m1.weights()[1] - 0.7).abs() < 1e-15);
        assert_eq!(m.marginal_prefix(&s, 2).unwrap(), m);

        let a = GridMeasure::new(vec![Axis::indices(3).unwrap()], vec![0.2, 0.5, 0.3]).unwrap();
        let b = GridMeasure::new(vec![axis2()], vec![0.25, 0.75]).unwrap();
        let ab = a.product(&b);
        let back = ab.marginal_prefix(&s, 1).unwrap();
        for (x, y) in back.weights().iter().zip(a.weights()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(m.marginal_prefix(&s, 3).is_err());
    }

    #[test]
    fn generic_marginal_matches_leading() {
        let m = table();
        assert_eq!(m.marginal(&[0]).weights(), m.marginal_leading(1).weights());
        let second = m.marginal(&[1]);
        assert!((second.weights()[0] - 0.4).abs() < 1e-15);
        assert!((second.weights()[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn disintegrate_cases() {
        let s = BlockStructure::new(vec![1, 1]).unwrap();
        let m = table();
        let c = m.disintegrate(&s, 1, &[0]).unwrap();
        assert!((c.weights()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((c.weights()[1] - 2.0 / 3.0).abs() < 1e-15);

        let z = GridMeasure::new(vec![axis2(), axis2()], vec![0.0, 0.0, 0.5, 0.5]).unwrap();
        assert!(matches!(z.disintegrate(&s, 1, &[0]), Err(Error::ConditioningOnNull { .. })));

        let a = GridMeasure::new(vec![axis2()], vec![0.4, 0.6]).unwrap();
        let b = GridMeasure::new(vec![Axis::indices(3).unwrap()], vec![0.1, 0.3, 0.6]).unwrap();
        let ab = a.product(&b);
        for x in 0..2 {
            let c = ab.disintegrate(&s, 1, &[x]).unwrap();
            for (u, v) in c.weights().iter().zip(b.weights()) {
                assert!((u - v).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn conditional_density_cases() {
        let s = BlockStructure::new(vec![1, 1]).unwrap();
        let ax = Axis::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let m = GridMeasure::new(vec![ax.clone(), ax], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        // f(y | row 1) = w(1, y) / (vol(y) * 0.7)
        let f = m.conditional_density(&s, 2, &[1]).unwrap();
        assert!((f[0] - 0.3 / (0.5 * 0.7)).abs() < 1e-14);
        assert!((f[1] - 0.4 / (0.5 * 0.7)).abs() < 1e-14);
        let integral: f64 = f.iter().map(|v| v * 0.5).sum();
        assert!((integral - 1.0).abs() < 1e-12);

        // isotropic Gaussian: conditional on y1 is the 1-D standard density
        let axis = Axis::midpoint(-6.0, 6.0, 61).unwrap();
        let g = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let gm = GridMeasure::from_density(vec![axis.clone(), axis.clone()], |x| g(x[0]) * g(x[1]))
            .unwrap()
            .normalize()
            .unwrap();
        for prefix in [10, 30, 45] {
            let f = gm.conditional_density(&s, 2, &[prefix]).unwrap();
            for (j, v) in f.iter().enumerate() {
                assert!((v - g(axis.points()[j])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn entropy_and_tv_examples() {
        let ax = axis2();
        let p = GridMeasure::new(vec![ax.clone()], vec![0.5, 0.5]).unwrap();
        let q = GridMeasure::new(vec![ax.clone()], vec![0.25, 0.75]).unwrap();
        assert_eq!(relative_entropy(&p, &p).unwrap(), 0.0);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((relative_entropy(&p, &q).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.143841).abs() < 1e-6);
        let d1 = GridMeasure::new(vec![ax.clone()], vec![1.0, 0.0]).unwrap();
        let d2 = GridMeasure::new(vec![ax.clone()], vec![0.0, 1.0]).unwrap();
        assert_eq!(relative_entropy(&d1, &d2).unwrap(), f64::INFINITY);
        assert_eq!(total_variation(&p, &p).unwrap(), 0.0);
        assert_eq!(total_variation(&d1, &d2).unwrap(), 1.0);
        assert!((total_variation(&p, &q).unwrap() - 0.25).abs() < 1e-15);

        let other = GridMeasure::new(vec![Axis::indices(3).unwrap()], vec![0.2, 0.3, 0.5]).unwrap();
        assert!(matches!(relative_entropy(&p, &other), Err(Error::GridMismatch(_))));
        assert!(matches!(total_variation(&p, &other), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn differential_entropy_examples() {
        let unit = Axis::midpoint(0.0, 1.0, 10).unwrap();
        let m = GridMeasure::from_density(vec![unit], |_| 1.0).unwrap();
        assert!(differential_entropy(&m).abs() < 1e-14);
        let two = Axis::midpoint(0.0, 2.0, 10).unwrap();
        let m = GridMeasure::from_density(vec![two], |_| 0.5).unwrap();
        assert!((differential_entropy(&m) + 2f64.ln()).abs() < 1e-14);
        let tiny = Axis::new(vec![0.0, 1.0], vec![1e-6, 1.0]).unwrap();
        let m = GridMeasure::new(vec![tiny], vec![1.0, 0.0]).unwrap();
        assert!(differential_entropy(&m) > 10.0);
    }

    #[test]
    fn cdf_and_quantile_index() {
        let c = DiscreteCDF::new(vec![1.0, 2.0], vec![0.25, 1.0]).unwrap();
        assert_eq!(c.quantile_index(0.25), 0);
        assert_eq!(c.quantile_index(0.5), 1);
        assert!(DiscreteCDF::new(vec![1.0, 2.0], vec![0.5, 0.4]).is_err());
        assert!(DiscreteCDF::new(vec![1.0, 2.0], vec![0.5, 0.9]).is_err());
    }

    #[test]
    fn density_floor_is_identity_at_zero() {
        let m = table();
        assert_eq!(m.with_density_floor(0.0).unwrap(), m);
        let z = GridMeasure::new(vec![axis2()], vec![1.0, 0.0]).unwrap();
        let f = z.with_density_floor(1e-3).unwrap();
        assert!(f.weights()[1] > 0.0);
        assert!((f.total_mass() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nearest_point() {
        let a = Axis::unit(vec![0.0, 1.0, 3.0]).unwrap();
        assert_eq!(a.nearest(-5.0), 0);
        assert_eq!(a.nearest(0.5), 0);
        assert_eq!(a.nearest(0.6), 1);
        assert_eq!(a.nearest(2.5), 2);
        assert_eq!(a.nearest(9.0), 2);
    }
}
