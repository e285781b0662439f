//! Strictly positive transition kernels on grids.
//!
//! Kernel values are densities with respect to the target cell volumes, so
//! `Σ_y p(x, y) vol(y) = 1` for every source point `x`. Values are stored as
//! logarithms; sharp heat kernels underflow in linear form long before the
//! log-domain solver notices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{grid_len, unravel, Axis, BlockStructure};
use crate::numeric::log_sum_exp;

const DEPENDENCE_TOL: f64 = 1e-8;

/// Log of the 1-D heat kernel `g(t, z) = exp(-z²/2t) / sqrt(2πt)`.
pub fn log_heat_kernel(t: f64, z: f64) -> f64 {
    -z * z / (2.0 * t) - 0.5 * (2.0 * std::f64::consts::PI * t).ln()
}

/// The heat kernel `g(t, z)`; on `ℝ^d` it is the product over coordinates.
pub fn heat_kernel(t: f64, z: &[f64]) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::NonpositiveTime(t));
    }
    Ok(z.iter().map(|&zi| log_heat_kernel(t, zi)).sum::<f64>().exp())
}

/// Dense `rows x cols` table of log kernel values.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelTable {
    rows: usize,
    cols: usize,
    log_values: Vec<f64>,
}

impl KernelTable {
    pub fn from_values(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::InvalidKernel(format!("{} values for a {rows}x{cols} table", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidKernel(format!("kernel values must be finite and strictly positive, found {v}")));
        }
        Ok(Self { rows, cols, log_values: values.iter().map(|v| v.ln()).collect() })
    }

    pub fn from_log_values(rows: usize, cols: usize, log_values: Vec<f64>) -> Result<Self> {
        if log_values.len() != rows * cols {
            return Err(Error::InvalidKernel(format!("{} values for a {rows}x{cols} table", log_values.len())));
        }
        if log_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidKernel("log kernel values must be finite".into()));
        }
        Ok(Self { rows, cols, log_values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn log(&self, r: usize, c: usize) -> f64 {
        self.log_values[r * self.cols + c]
    }

    pub fn value(&self, r: usize, c: usize) -> f64 {
        self.log(r, c).exp()
    }

    pub fn log_row(&self, r: usize) -> &[f64] {
        &self.log_values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn log_values(&self) -> &[f64] {
        &self.log_values
    }

    pub fn values(&self) -> Vec<f64> {
        self.log_values.iter().map(|v| v.exp()).collect()
    }

    /// `Σ_c p(r, c) vol(c)` for each row.
    pub fn row_integrals(&self, target_volumes: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| self.log_row(r).iter().zip(target_volumes).map(|(l, v)| l.exp() * v).sum()).collect()
    }

    /// Multiplies each row by a positive factor given in log form.
    pub fn shift_rows(&self, log_factors: &[f64]) -> KernelTable {
        let mut out = self.clone();
        for r in 0..self.rows {
            for v in &mut out.log_values[r * self.cols..(r + 1) * self.cols] {
                *v += log_factors[r];
            }
        }
        out
    }
}

/// Serializable kernel description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// Product heat kernel `Π_k g(t_k, y_k - x_k)`, one variance per coordinate.
    GaussianHeat { variances: Vec<f64> },
    /// Dense table over full source × target grids, row-major.
    Tabulated { values: Vec<f64> },
}

#[derive(Clone, Debug)]
enum Repr {
    /// One row-normalized factor per coordinate.
    Product {
        factors: Vec<KernelTable>,
        raw_log_mass: Vec<Vec<f64>>,
    },
    Dense(KernelTable),
}

/// A strictly positive transition kernel between two product grids.
#[derive(Clone, Debug)]
pub struct Kernel {
    source: Vec<Axis>,
    target: Vec<Axis>,
    repr: Repr,
}

impl Kernel {
    /// Heat kernel with per-coordinate variances, each 1-D factor
    /// renormalized on the target axis.
    pub fn gaussian_heat(source: Vec<Axis>, target: Vec<Axis>, variances: &[f64]) -> Result<Self> {
        if source.len() != target.len() || variances.len() != source.len() {
            return Err(Error::InvalidKernel(format!(
                "gaussian kernel needs matching dimensions, got {} source axes, {} target axes, {} variances",
                source.len(),
                target.len(),
                variances.len()
            )));
        }
        let mut factors = Vec::with_capacity(source.len());
        let mut raw_log_mass = Vec::with_capacity(source.len());
        for ((sx, ty), &t) in source.iter().zip(&target).zip(variances) {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::NonpositiveTime(t));
            }
            let log_vol: Vec<f64> = ty.volumes().iter().map(|v| v.ln()).collect();
            let mut logs = Vec::with_capacity(sx.len() * ty.len());
            let mut masses = Vec::with_capacity(sx.len());
            for &x in sx.points() {
                let row: Vec<f64> = ty.points().iter().map(|&y| log_heat_kernel(t, y - x)).collect();
                let mass = log_sum_exp(row.iter().zip(&log_vol).map(|(a, b)| a + b));
                logs.extend(row.iter().map(|v| v - mass));
                masses.push(mass);
            }
            factors.push(KernelTable::from_log_values(sx.len(), ty.len(), logs)?);
            raw_log_mass.push(masses);
        }
        Ok(Self { source, target, repr: Repr::Product { factors, raw_log_mass } })
    }

    /// Dense kernel from raw values over the full grids (row = source cell).
    pub fn tabulated(source: Vec<Axis>, target: Vec<Axis>, values: &[f64]) -> Result<Self> {
        let table = KernelTable::from_values(grid_len(&source), grid_len(&target), values)?;
        Ok(Self { source, target, repr: Repr::Dense(table) })
    }

    pub fn from_table(source: Vec<Axis>, target: Vec<Axis>, table: KernelTable) -> Result<Self> {
        if table.rows() != grid_len(&source) || table.cols() != grid_len(&target) {
            return Err(Error::InvalidKernel("table shape does not match grids".into()));
        }
        Ok(Self { source, target, repr: Repr::Dense(table) })
    }

    pub fn from_spec(spec: &KernelSpec, source: Vec<Axis>, target: Vec<Axis>) -> Result<Self> {
        match spec {
            KernelSpec::GaussianHeat { variances } => Self::gaussian_heat(source, target, variances),
            KernelSpec::Tabulated { values } => Self::tabulated(source, target, values),
        }
    }

    pub fn source_axes(&self) -> &[Axis] {
        &self.source
    }

    pub fn target_axes(&self) -> &[Axis] {
        &self.target
    }

    pub fn is_product(&self) -> bool {
        matches!(self.repr, Repr::Product { .. })
    }

    pub fn log_density(&self, x_flat: usize, y_flat: usize) -> f64 {
        match &self.repr {
            Repr::Dense(t) => t.log(x_flat, y_flat),
            Repr::Product { factors, .. } => {
                product_log(factors, &self.source, &self.target, factors.len(), x_flat, y_flat)
            }
        }
    }

    /// Full dense table `p(x, y)` over the source × target grids.
    pub fn dense(&self) -> KernelTable {
        match &self.repr {
            Repr::Dense(t) => t.clone(),
            Repr::Product { factors, .. } => dense_product(factors, &self.source, &self.target, factors.len()),
        }
    }

    /// `max_x |Σ_y p(x, y) vol(y) - 1|` of the stored kernel.
    pub fn normalization_error(&self) -> f64 {
        let vols = crate::grid::cell_volumes(&self.target);
        match &self.repr {
            Repr::Dense(t) => t.row_integrals(&vols).iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max),
            Repr::Product { factors, .. } => {
                let mut worst: f64 = 0.0;
                for (f, ax) in factors.iter().zip(&self.target) {
                    for m in f.row_integrals(ax.volumes()) {
                        worst = worst.max((m - 1.0).abs());
                    }
                }
                worst
            }
        }
    }

    /// Mass the raw (unnormalized) heat kernel loses outside the target grid,
    /// maximized over source points; zero for tabulated kernels.
    pub fn truncation_mass(&self) -> f64 {
        match &self.repr {
            Repr::Dense(_) => 0.0,
            Repr::Product { raw_log_mass, .. } => {
                let mut total_worst: f64 = 0.0;
                for masses in raw_log_mass {
                    for m in masses {
                        total_worst = total_worst.max((1.0 - m.exp()).abs());
                    }
                }
                total_worst
            }
        }
    }

    /// Block marginal kernels `p_1..p_k0` for the structure.
    pub fn block_kernels(&self, structure: &BlockStructure) -> Result<BlockKernelSet> {
        if structure.total_dim() != self.source.len() || structure.total_dim() != self.target.len() {
            return Err(Error::InvalidStructure(format!(
                "structure covers {} coordinates, kernel has {}",
                structure.total_dim(),
                self.source.len()
            )));
        }
        let levels = match &self.repr {
            Repr::Product { factors, .. } => Levels::Product(factors.clone()),
            Repr::Dense(_) => Levels::Dense(
                (1..=structure.depth()).map(|i| block_marginal(self, structure, i)).collect::<Result<Vec<_>>>()?,
            ),
        };
        Ok(BlockKernelSet {
            structure: structure.clone(),
            source: self.source.clone(),
            target: self.target.clone(),
            levels,
        })
    }
}

fn product_log(
    factors: &[KernelTable],
    source: &[Axis],
    target: &[Axis],
    n: usize,
    x_flat: usize,
    y_flat: usize,
) -> f64 {
    let (mut x, mut y) = (x_flat, y_flat);
    let mut acc = 0.0;
    for k in (0..n).rev() {
        let (xs, ys) = (source[k].len(), target[k].len());
        acc += factors[k].log(x % xs, y % ys);
        x /= xs;
        y /= ys;
    }
    acc
}

fn dense_product(factors: &[KernelTable], source: &[Axis], target: &[Axis], n: usize) -> KernelTable {
    let rows = grid_len(&source[..n]);
    let cols = grid_len(&target[..n]);
    let mut logs = Vec::with_capacity(rows * cols);
    for x in 0..rows {
        for y in 0..cols {
            logs.push(product_log(factors, source, target, n, x, y));
        }
    }
    KernelTable::from_log_values(rows, cols, logs).expect("finite product kernel")
}

/// The level-`i` block marginal `p_i(x_{n_i}, y_{n_i})`.
///
/// Product heat kernels are marginalized analytically (the product of the
/// first `n_i` factors). Tabulated kernels are summed over trailing target
/// cells, and the result must not vary with the trailing source coordinates.
pub fn block_marginal(kernel: &Kernel, structure: &BlockStructure, level: usize) -> Result<KernelTable> {
    structure.check_level(level)?;
    let n = structure.prefix_dim(level);
    match &kernel.repr {
        Repr::Product { factors, .. } => Ok(dense_product(factors, &kernel.source, &kernel.target, n)),
        Repr::Dense(table) => {
            if level == structure.depth() {
                return Ok(table.clone());
            }
            let x_trail = grid_len(&kernel.source[n..]);
            let y_trail = grid_len(&kernel.target[n..]);
            let rows = grid_len(&kernel.source[..n]);
            let cols = grid_len(&kernel.target[..n]);
            let log_trail_vol: Vec<f64> =
                crate::grid::cell_volumes(&kernel.target[n..]).iter().map(|v| v.ln()).collect();
            let summed = |x_full: usize, yp: usize| {
                let row = table.log_row(x_full);
                log_sum_exp(row[yp * y_trail..(yp + 1) * y_trail].iter().zip(&log_trail_vol).map(|(a, b)| a + b))
            };
            let mut logs = Vec::with_capacity(rows * cols);
            let mut deviation: f64 = 0.0;
            for xp in 0..rows {
                for yp in 0..cols {
                    let base = summed(xp * x_trail, yp);
                    for xr in 1..x_trail {
                        let other = summed(xp * x_trail + xr, yp);
                        deviation = deviation.max((other - base).exp_m1().abs());
                    }
                    logs.push(base);
                }
            }
            if deviation > DEPENDENCE_TOL {
                return Err(Error::DependenceViolation { level, deviation });
            }
            KernelTable::from_log_values(rows, cols, logs)
        }
    }
}

#[derive(Clone, Debug)]
enum Levels {
    Product(Vec<KernelTable>),
    Dense(Vec<KernelTable>),
}

/// Block marginal kernels for every level of a structure.
#[derive(Clone, Debug)]
pub struct BlockKernelSet {
    structure: BlockStructure,
    source: Vec<Axis>,
    target: Vec<Axis>,
    levels: Levels,
}

/// Conditional kernel `p_i(x, · | y_{n_{i-1}})` restricted to one target prefix.
///
/// Source points whose rows coincide share a class: `table` has one row per
/// class, `class_of_source[x]` maps each source prefix point to its row, and
/// `log_norm[x] = log ∫ p_i(x, (y_prev, z)) dz`.
#[derive(Clone, Debug)]
pub struct ConditionalKernel {
    pub table: KernelTable,
    pub class_of_source: Vec<usize>,
    pub log_norm: Vec<f64>,
}

impl ConditionalKernel {
    pub fn log(&self, x: usize, z: usize) -> f64 {
        self.table.log(self.class_of_source[x], z)
    }
}

impl BlockKernelSet {
    pub fn structure(&self) -> &BlockStructure {
        &self.structure
    }

    /// Source axes of the first `n_i` coordinates.
    pub fn source_axes(&self, level: usize) -> &[Axis] {
        &self.source[..self.structure.prefix_dim(level)]
    }

    pub fn target_axes(&self, level: usize) -> &[Axis] {
        &self.target[..self.structure.prefix_dim(level)]
    }

    pub fn block_target_axes(&self, level: usize) -> &[Axis] {
        &self.target[self.structure.block_range(level)]
    }

    pub fn full_source_axes(&self) -> &[Axis] {
        &self.source
    }

    pub fn full_target_axes(&self) -> &[Axis] {
        &self.target
    }

    pub fn is_product(&self) -> bool {
        matches!(self.levels, Levels::Product(_))
    }

    /// `log p_i(x_{n_i}, y_{n_i})` for flat prefix indices.
    pub fn log_p(&self, level: usize, x_prefix: usize, y_prefix: usize) -> f64 {
        match &self.levels {
            Levels::Product(f) => {
                product_log(f, &self.source, &self.target, self.structure.prefix_dim(level), x_prefix, y_prefix)
            }
            Levels::Dense(t) => t[level - 1].log(x_prefix, y_prefix),
        }
    }

    /// Dense table of `p_i`.
    pub fn table(&self, level: usize) -> KernelTable {
        match &self.levels {
            Levels::Product(f) => dense_product(f, &self.source, &self.target, self.structure.prefix_dim(level)),
            Levels::Dense(t) => t[level - 1].clone(),
        }
    }

    /// Conditional kernel at level `i` for the flat target prefix `y_prev`
    /// over the first `n_{i-1}` coordinates (`0` at level 1).
    pub fn conditional(&self, level: usize, y_prev: usize) -> ConditionalKernel {
        let s = &self.structure;
        let n_prev = s.prefix_dim(level - 1);
        let n = s.prefix_dim(level);
        let x_len = grid_len(&self.source[..n]);
        let z_axes = &self.target[n_prev..n];
        let z_len = grid_len(z_axes);
        let log_z_vol: Vec<f64> = crate::grid::cell_volumes(z_axes).iter().map(|v| v.ln()).collect();
        match &self.levels {
            Levels::Product(f) => {
                let xb_axes = &self.source[n_prev..n];
                let xb_len = grid_len(xb_axes);
                let xb_dims: Vec<usize> = xb_axes.iter().map(Axis::len).collect();
                let z_dims: Vec<usize> = z_axes.iter().map(Axis::len).collect();
                // per-coordinate row masses of the block factors
                let block_mass: Vec<Vec<f64>> = (n_prev..n)
                    .map(|k| {
                        let vols = self.target[k].volumes();
                        f[k].row_integrals(vols).iter().map(|m| m.ln()).collect()
                    })
                    .collect();
                let mut xi = vec![0; xb_dims.len()];
                let mut zi = vec![0; z_dims.len()];
                let mut logs = Vec::with_capacity(xb_len * z_len);
                let mut class_mass = Vec::with_capacity(xb_len);
                for xb in 0..xb_len {
                    unravel(xb, &xb_dims, &mut xi);
                    let m: f64 = (0..xi.len()).map(|a| block_mass[a][xi[a]]).sum();
                    class_mass.push(m);
                    for z in 0..z_len {
                        unravel(z, &z_dims, &mut zi);
                        let l: f64 = (0..xi.len()).map(|a| f[n_prev + a].log(xi[a], zi[a])).sum();
                        logs.push(l - m);
                    }
                }
                let table = KernelTable::from_log_values(xb_len, z_len, logs).expect("finite");
                let class_of_source: Vec<usize> = (0..x_len).map(|x| x % xb_len).collect();
                let log_norm = (0..x_len)
                    .map(|x| {
                        let prefix = product_log(f, &self.source, &self.target, n_prev, x / xb_len, y_prev);
                        prefix + class_mass[x % xb_len]
                    })
                    .collect();
                ConditionalKernel { table, class_of_source, log_norm }
            }
            Levels::Dense(t) => {
                let p = &t[level - 1];
                let mut logs = Vec::with_capacity(x_len * z_len);
                let mut log_norm = Vec::with_capacity(x_len);
                for x in 0..x_len {
                    let row = &p.log_row(x)[y_prev * z_len..(y_prev + 1) * z_len];
                    let m = log_sum_exp(row.iter().zip(&log_z_vol).map(|(a, b)| a + b));
                    logs.extend(row.iter().map(|v| v - m));
                    log_norm.push(m);
                }
                ConditionalKernel {
                    table: KernelTable::from_log_values(x_len, z_len, logs).expect("finite"),
                    class_of_source: (0..x_len).collect(),
                    log_norm,
                }
            }
        }
    }
}

/// Location of the worst convexity defect found by [`log_concavity_check`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvexityDefect {
    pub level: usize,
    pub source: usize,
    pub target_prefix: usize,
    /// Flat block-target index of the centre point of the stencil.
    pub block_point: usize,
    /// Block coordinate along which the second difference was taken.
    pub axis: usize,
    pub second_difference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogConcavityReport {
    pub modulus: f64,
    pub passed: bool,
    /// Most negative second difference seen (positive when all are).
    pub worst: f64,
    pub location: Option<ConvexityDefect>,
    pub stencils_checked: usize,
    pub axes_skipped: usize,
}

const CONVEXITY_TOL: f64 = 1e-8;
const MAX_SAMPLES: usize = 16;

fn sample_indices(n: usize) -> Vec<usize> {
    if n <= MAX_SAMPLES {
        (0..n).collect()
    } else {
        (0..MAX_SAMPLES).map(|j| j * (n - 1) / (MAX_SAMPLES - 1)).collect()
    }
}

/// Checks that `y ↦ log p_i(x, (y_prev, y)) + C|y|²` is convex along every
/// block-target grid line, for sampled `x` and `y_prev`, at every level.
pub fn log_concavity_check(kernels: &BlockKernelSet, modulus: f64) -> LogConcavityReport {
    let s = kernels.structure();
    let mut worst = f64::INFINITY;
    let mut location = None;
    let mut stencils = 0;
    let mut skipped = 0;
    for level in 1..=s.depth() {
        let n_prev = s.prefix_dim(level - 1);
        let x_len = grid_len(kernels.source_axes(level));
        let yp_len = grid_len(&kernels.target[..n_prev]);
        let z_axes = kernels.block_target_axes(level);
        let z_dims: Vec<usize> = z_axes.iter().map(Axis::len).collect();
        let z_len: usize = z_dims.iter().product();
        for x in sample_indices(x_len) {
            for yp in sample_indices(yp_len) {
                for (a, axis) in z_axes.iter().enumerate() {
                    if axis.len() < 3 {
                        skipped += 1;
                        continue;
                    }
                    let stride: usize = z_dims[a + 1..].iter().product();
                    let pts = axis.points();
                    let mut zi = vec![0; z_dims.len()];
                    for z in 0..z_len {
                        unravel(z, &z_dims, &mut zi);
                        let j = zi[a];
                        if j == 0 || j + 1 == axis.len() {
                            continue;
                        }
                        let f = |zz: usize, coord: f64| {
                            let y = yp * z_len + zz;
                            kernels.log_p(level, x, y) + modulus * coord * coord
                        };
                        let (h1, h2) = (pts[j] - pts[j - 1], pts[j + 1] - pts[j]);
                        let fm = f(z - stride, pts[j - 1]);
                        let f0 = f(z, pts[j]);
                        let fp = f(z + stride, pts[j + 1]);
                        let d2 = 2.0 * ((fp - f0) / h2 - (f0 - fm) / h1) / (h1 + h2);
                        stencils += 1;
                        if d2 < worst {
                            worst = d2;
                            location = Some(ConvexityDefect {
                                level,
                                source: x,
                                target_prefix: yp,
                                block_point: z,
                                axis: a,
                                second_difference: d2,
                            });
                        }
                    }
                }
            }
        }
    }
    let passed = worst >= -CONVEXITY_TOL;
    LogConcavityReport {
        modulus,
        passed,
        worst,
        location: if passed { None } else { location },
        stencils_checked: stencils,
        axes_skipped: skipped,
    }
}
