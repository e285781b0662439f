//! Two-dimensional Gaussian Bernstein-process example.
//!
//! The cascade with `d = 2`, one coordinate per block and the heat kernel
//! `g(1, ·)` per coordinate yields potentials `h_1(y_1)` and `h_2(y_1, y_2)`
//! on the target grid. They are extended off the grid by linear (bilinear)
//! interpolation between grid points, held constant over the outer half
//! cells and set to zero outside the cell box. Convolutions of these
//! piecewise-linear profiles with Gaussians are evaluated in closed form, so
//! the path weights have expectation one up to rounding.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

use crate::cascade::{solve_cascade, CascadeOptions, CascadeSolution};
use crate::error::{Error, Result};
use crate::grid::{Axis, BlockStructure, GridMeasure};
use crate::kernel::Kernel;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standardized distance beyond which a Gaussian tail is treated as zero.
const TAIL_CUTOFF: f64 = 40.0;

/// Steps of the default sampling grid, `2^DEFAULT_DYADIC_LEVEL`.
pub const DEFAULT_DYADIC_LEVEL: u32 = 3;

/// 8-point Gauss–Legendre rule on `[-1, 1]`.
#[allow(clippy::excessive_precision)]
const GL8: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_3, 0.101_228_536_290_376_3),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_5),
    (-0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
    (0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
    (0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_5),
    (0.960_289_856_497_536_3, 0.101_228_536_290_376_3),
];

/// `g(t, z)`, the one-dimensional heat kernel.
fn g(t: f64, z: f64) -> f64 {
    INV_SQRT_2PI / t.sqrt() * (-z * z / (2.0 * t)).exp()
}

fn phi(u: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * u * u).exp()
}

/// `Φ(b) - Φ(a)` for `a ≤ b`, evaluated in the far tail without cancellation.
fn normal_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        0.5 * (erfc(a / SQRT_2) - erfc(b / SQRT_2))
    } else if b <= 0.0 {
        0.5 * (erfc(-b / SQRT_2) - erfc(-a / SQRT_2))
    } else {
        1.0 - 0.5 * (erfc(-a / SQRT_2) + erfc(b / SQRT_2))
    }
}

/// Piecewise-linear interpolation on the points of one axis.
#[derive(Clone, Debug)]
struct Profile {
    nodes: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl Profile {
    fn new(axis: &Axis) -> Self {
        let p = axis.points();
        let v = axis.volumes();
        let n = p.len();
        Self { nodes: p.to_vec(), lo: p[0] - 0.5 * v[0], hi: p[n - 1] + 0.5 * v[n - 1] }
    }

    fn contains(&self, z: f64) -> bool {
        z >= self.lo && z <= self.hi
    }

    /// `(i, j, λ)` with value `(1 - λ) v_i + λ v_j`, or `None` outside the box.
    fn locate(&self, z: f64) -> Option<(usize, usize, f64)> {
        if !self.contains(z) {
            return None;
        }
        let n = self.nodes.len();
        let j = self.nodes.partition_point(|&p| p <= z);
        Some(match j {
            0 => (0, 0, 0.0),
            j if j == n => (n - 1, n - 1, 0.0),
            j => {
                let (a, b) = (self.nodes[j - 1], self.nodes[j]);
                (j - 1, j, (z - a) / (b - a))
            }
        })
    }

    fn eval(&self, v: &[f64], z: f64) -> f64 {
        match self.locate(z) {
            None => 0.0,
            Some((i, j, l)) => (1.0 - l) * v[i] + l * v[j],
        }
    }

    /// Pieces of the profile as `(a, b, i, j)`: linear from `v_i` at `a` to
    /// `v_j` at `b`.
    fn pieces(&self) -> Vec<(f64, f64, usize, usize)> {
        let n = self.nodes.len();
        let mut out = Vec::with_capacity(n + 1);
        out.push((self.lo, self.nodes[0], 0, 0));
        for j in 1..n {
            out.push((self.nodes[j - 1], self.nodes[j], j - 1, j));
        }
        out.push((self.nodes[n - 1], self.hi, n - 1, n - 1));
        out
    }

    /// `∫ v(z) N(z; x, var) dz` in closed form.
    fn convolve(&self, v: &[f64], x: f64, var: f64) -> f64 {
        let s = var.sqrt();
        let n = self.nodes.len();
        let mut acc = 0.0;
        let mut piece = |a: f64, b: f64, va: f64, vb: f64| {
            let (ua, ub) = ((a - x) / s, (b - x) / s);
            if ub < -TAIL_CUTOFF || ua > TAIL_CUTOFF || (va == 0.0 && vb == 0.0) {
                return;
            }
            let beta = (vb - va) / (b - a);
            let alpha = va - beta * a;
            acc += (alpha + beta * x) * normal_mass(ua, ub) + beta * s * (phi(ua) - phi(ub));
        };
        piece(self.lo, self.nodes[0], v[0], v[0]);
        for j in 1..n {
            piece(self.nodes[j - 1], self.nodes[j], v[j - 1], v[j]);
        }
        piece(self.nodes[n - 1], self.hi, v[n - 1], v[n - 1]);
        acc
    }
}

fn check_time(t: f64, open_at_zero: bool) -> Result<()> {
    let ok = if open_at_zero { t > 0.0 && t < 1.0 } else { (0.0..1.0).contains(&t) };
    if ok {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange(t))
    }
}

/// Potentials of the example and the tables the path weights need.
#[derive(Clone, Debug)]
pub struct BernsteinModel {
    mu: GridMeasure,
    target: Vec<Axis>,
    y1: Profile,
    y2: Profile,
    h1: Vec<f64>,
    /// `h_2(y_1, y_2)` at `y_1 * n_2 + y_2`.
    h2: Vec<f64>,
    /// `h_1(0, x_1)` per source index.
    h1_0: Vec<f64>,
    /// `h̄_2(0, y_1, x_2)` at grid `y_1` and source index `x_2`, `y_1 * m_2 + x_2`.
    h2bar_0: Vec<f64>,
}

impl BernsteinModel {
    /// Builds the model from potential values on the target grid.
    pub fn new(mu: GridMeasure, target: Vec<Axis>, h1: Vec<f64>, h2: Vec<f64>) -> Result<Self> {
        if mu.dim() != 2 || target.len() != 2 {
            return Err(Error::GridMismatch("the example is two-dimensional".into()));
        }
        let (n1, n2) = (target[0].len(), target[1].len());
        if h1.len() != n1 || h2.len() != n1 * n2 {
            return Err(Error::GridMismatch(format!(
                "potentials need {n1} and {} values, got {} and {}",
                n1 * n2,
                h1.len(),
                h2.len()
            )));
        }
        if h1.iter().chain(&h2).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidMeasure("potentials must be finite and nonnegative".into()));
        }
        let y1 = Profile::new(&target[0]);
        let y2 = Profile::new(&target[1]);
        let xs1 = mu.axes()[0].points().to_vec();
        let xs2 = mu.axes()[1].points().to_vec();
        let h1_0: Vec<f64> = xs1.par_iter().map(|&x| y1.convolve(&h1, x, 1.0)).collect();
        let h2bar_0: Vec<f64> = (0..n1)
            .into_par_iter()
            .flat_map_iter(|a| {
                let row = &h2[a * n2..(a + 1) * n2];
                let y2 = &y2;
                xs2.iter().map(move |&x| y2.convolve(row, x, 1.0)).collect::<Vec<_>>()
            })
            .collect();
        let m1 = mu.marginal_leading(1);
        if let Some(i) = (0..xs1.len()).find(|&i| m1.weights()[i] > 0.0 && !(h1_0[i] > 0.0)) {
            return Err(Error::InvalidMeasure(format!("h1(0, x1) vanishes at source index {i} in the support of mu")));
        }
        Ok(Self { mu, target, y1, y2, h1, h2, h1_0, h2bar_0 })
    }

    /// Reads `h_1` and the gauge-fixed `h_2` off a two-level cascade with one
    /// coordinate per block.
    pub fn from_cascade(mu: GridMeasure, solution: &CascadeSolution) -> Result<Self> {
        if solution.structure.block_dims() != [1, 1] {
            return Err(Error::InvalidStructure("the example needs blocks of sizes 1 and 1".into()));
        }
        let target = solution.level(2).global_coupling.axes()[2..].to_vec();
        let h1 = solution.level(1).h_table();
        let h2 = solution.level(2).h_table();
        Self::new(mu, target, h1, h2)
    }

    /// Solves the cascade for `p(x, y) = Π g(1, y_i - x_i)` and builds the model.
    pub fn solve(mu: &GridMeasure, nu: &GridMeasure, opts: &CascadeOptions) -> Result<(Self, CascadeSolution)> {
        let kernel = Kernel::gaussian_heat(mu.axes().to_vec(), nu.axes().to_vec(), &[1.0, 1.0])?;
        let kernels = kernel.block_kernels(&BlockStructure::scalar_blocks(2)?)?;
        let sol = solve_cascade(mu, nu, &kernels, opts)?;
        let model = Self::from_cascade(mu.clone(), &sol)?;
        Ok((model, sol))
    }

    pub fn mu(&self) -> &GridMeasure {
        &self.mu
    }

    pub fn target_axes(&self) -> &[Axis] {
        &self.target
    }

    pub fn h1(&self, y1: f64) -> f64 {
        self.y1.eval(&self.h1, y1)
    }

    pub fn h2(&self, y1: f64, y2: f64) -> f64 {
        match (self.y1.locate(y1), self.y2.locate(y2)) {
            (Some((i, j, l)), Some(_)) => {
                let n2 = self.target[1].len();
                let a = self.y2.eval(&self.h2[i * n2..(i + 1) * n2], y2);
                let b = self.y2.eval(&self.h2[j * n2..(j + 1) * n2], y2);
                (1.0 - l) * a + l * b
            }
            _ => 0.0,
        }
    }

    /// `h_1(t, x) = ∫ h_1(z) g(1 - t, z - x) dz`.
    pub fn h1_t(&self, t: f64, x: f64) -> Result<f64> {
        check_time(t, false)?;
        Ok(self.y1.convolve(&self.h1, x, 1.0 - t))
    }

    /// `h̄_2(t, y_1, y_2) = ∫ h_2(y_1, z) g(1 - t, z - y_2) dz`.
    pub fn h2bar_t(&self, t: f64, y1: f64, y2: f64) -> Result<f64> {
        check_time(t, false)?;
        let n2 = self.target[1].len();
        Ok(match self.y1.locate(y1) {
            None => 0.0,
            Some((i, j, l)) => {
                let a = self.y2.convolve(&self.h2[i * n2..(i + 1) * n2], y2, 1.0 - t);
                let b = self.y2.convolve(&self.h2[j * n2..(j + 1) * n2], y2, 1.0 - t);
                (1.0 - l) * a + l * b
            }
        })
    }

    /// Tabulated `h_1(0, x_1)` at the source grid points.
    pub fn h1_0_table(&self) -> &[f64] {
        &self.h1_0
    }

    /// Radon–Nikodym weight of the bridge path law against `X + B` at an
    /// arbitrary start `x` and endpoint `y = x + B(1)`.
    pub fn path_weight(&self, x: [f64; 2], y: [f64; 2]) -> f64 {
        let num = self.h2(y[0], y[1]) * self.h1(y[0]);
        if num == 0.0 {
            return 0.0;
        }
        let den = self.y1.convolve(&self.h1, x[0], 1.0) * self.h2bar_t(0.0, y[0], x[1]).expect("t = 0 is admissible");
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }

    /// Same weight with `x` at source grid indices, using the tables.
    fn weight_indexed(&self, i1: usize, i2: usize, y: [f64; 2]) -> f64 {
        let num = self.h2(y[0], y[1]) * self.h1(y[0]);
        if num == 0.0 {
            return 0.0;
        }
        let m2 = self.mu.axes()[1].len();
        let (i, j, l) = self.y1.locate(y[0]).expect("numerator vanishes off the box");
        let hbar = (1.0 - l) * self.h2bar_0[i * m2 + i2] + l * self.h2bar_0[j * m2 + i2];
        let den = self.h1_0[i1] * hbar;
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }

    /// Gauss–Legendre nodes over the `y_1` profile: `(y, weight, h_1(y))`.
    fn y1_quadrature(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for (a, b, i, j) in self.y1.pieces() {
            if b <= a || (self.h1[i] == 0.0 && self.h1[j] == 0.0) {
                continue;
            }
            let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
            for (u, w) in GL8 {
                let y = mid + half * u;
                out.push((y, w * half, self.y1.eval(&self.h1, y)));
            }
        }
        out
    }

    /// Density of `X(t)` under the bridge path law at one point.
    pub fn marginal_density_t(&self, t: f64, z: [f64; 2]) -> Result<f64> {
        Ok(self.marginal_density_grid(t, &[z[0]], &[z[1]])?[0])
    }

    /// Density of `X(t)` on the product of `z1` and `z2`, `z1`-major.
    pub fn marginal_density_grid(&self, t: f64, z1: &[f64], z2: &[f64]) -> Result<Vec<f64>> {
        check_time(t, true)?;
        let (n1, n2) = (self.target[0].len(), self.target[1].len());
        let xs1 = self.mu.axes()[0].points();
        let xs2 = self.mu.axes()[1].points();
        let m2 = xs2.len();
        let quad = self.y1_quadrature();
        let nq = quad.len();
        let locs: Vec<(usize, usize, f64)> = quad.iter().map(|q| self.y1.locate(q.0).unwrap()).collect();

        // 1 / h̄_2(0, y_q, x_2), zero where the potential vanishes
        let mut inv0 = vec![0.0; m2 * nq];
        for (q, &(i, j, l)) in locs.iter().enumerate() {
            for x2 in 0..m2 {
                let v = (1.0 - l) * self.h2bar_0[i * m2 + x2] + l * self.h2bar_0[j * m2 + x2];
                inv0[x2 * nq + q] = if v > 0.0 { 1.0 / v } else { 0.0 };
            }
        }
        // h̄_2(t, y_q, z_2)
        let hbt: Vec<Vec<f64>> = z2
            .par_iter()
            .map(|&z| {
                let rows: Vec<f64> =
                    (0..n1).map(|a| self.y2.convolve(&self.h2[a * n2..(a + 1) * n2], z, 1.0 - t)).collect();
                locs.iter().map(|&(i, j, l)| (1.0 - l) * rows[i] + l * rows[j]).collect()
            })
            .collect();
        // μ(x) / h_1(0, x_1) g(t, z_1 - x_1) summed over x_1
        let w = self.mu.weights();
        let c: Vec<Vec<f64>> = z1
            .iter()
            .map(|&z| {
                let mut row = vec![0.0; m2];
                for (i1, &x1) in xs1.iter().enumerate() {
                    if self.h1_0[i1] == 0.0 {
                        continue;
                    }
                    let gx = g(t, z - x1) / self.h1_0[i1];
                    for (x2, r) in row.iter_mut().enumerate() {
                        *r += w[i1 * m2 + x2] * gx;
                    }
                }
                row
            })
            .collect();
        let a: Vec<Vec<f64>> =
            z1.iter().map(|&z| quad.iter().map(|&(y, wq, h)| wq * h * g(1.0 - t, y - z)).collect()).collect();
        let out = (0..z1.len() * z2.len())
            .into_par_iter()
            .map(|k| {
                let (p, r) = (k / z2.len(), k % z2.len());
                let ah: Vec<f64> = a[p].iter().zip(&hbt[r]).map(|(x, y)| x * y).collect();
                let mut acc = 0.0;
                for x2 in 0..m2 {
                    let cw = c[p][x2];
                    if cw == 0.0 {
                        continue;
                    }
                    let gz = g(t, z2[r] - xs2[x2]);
                    let inner: f64 = ah.iter().zip(&inv0[x2 * nq..(x2 + 1) * nq]).map(|(x, y)| x * y).sum();
                    acc += gz * cw * inner;
                }
                acc
            })
            .collect();
        Ok(out)
    }

    /// `density × cell volume` on a grid; the total approximates one.
    pub fn marginal_density_on(&self, t: f64, axes: &[Axis]) -> Result<GridMeasure> {
        if axes.len() != 2 {
            return Err(Error::GridMismatch("density grid must be two-dimensional".into()));
        }
        let d = self.marginal_density_grid(t, axes[0].points(), axes[1].points())?;
        let vols = crate::grid::cell_volumes(axes);
        GridMeasure::new(axes.to_vec(), d.iter().zip(&vols).map(|(a, b)| a * b).collect())
    }

    /// Paths `X + B` on `times` with `X ~ μ`; path `k` draws from stream `k`
    /// of a generator seeded with `seed`, so every path is reproducible alone.
    pub fn sample_paths(&self, n_paths: usize, times: &[f64], seed: u64) -> Result<PathEnsemble> {
        if n_paths == 0 {
            return Err(Error::InvalidOption("need at least one path".into()));
        }
        let well_formed = times.len() >= 2
            && times[0] == 0.0
            && times[times.len() - 1] == 1.0
            && times.windows(2).all(|w| w[0] < w[1]);
        if !well_formed {
            return Err(Error::InvalidOption("time grid must increase strictly from 0 to 1".into()));
        }
        let index = WeightedIndex::new(self.mu.weights())
            .map_err(|e| Error::InvalidMeasure(format!("cannot sample mu: {e}")))?;
        let m2 = self.mu.axes()[1].len();
        let xs1 = self.mu.axes()[0].points();
        let xs2 = self.mu.axes()[1].points();
        let steps: Vec<f64> = times.windows(2).map(|w| (w[1] - w[0]).sqrt()).collect();
        let paths: Vec<PathSample> = (0..n_paths)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                let x_index = index.sample(&mut rng);
                let (i1, i2) = (x_index / m2, x_index % m2);
                let mut pos = [xs1[i1], xs2[i2]];
                let mut positions = Vec::with_capacity(times.len());
                positions.push(pos);
                for &sd in &steps {
                    let b1: f64 = rng.sample(StandardNormal);
                    let b2: f64 = rng.sample(StandardNormal);
                    pos = [pos[0] + sd * b1, pos[1] + sd * b2];
                    positions.push(pos);
                }
                let escaped = !(self.y1.contains(pos[0]) && self.y2.contains(pos[1]));
                let weight = if escaped { 0.0 } else { self.weight_indexed(i1, i2, pos) };
                PathSample { x_index, positions, weight, escaped }
            })
            .collect();
        Ok(PathEnsemble { times: times.to_vec(), paths })
    }
}

/// `0, 2^-m, …, 1`.
pub fn dyadic_times(m: u32) -> Vec<f64> {
    let n = 1usize << m;
    (0..=n).map(|k| k as f64 / n as f64).collect()
}

#[derive(Clone, Debug)]
pub struct PathSample {
    /// Flat index of the starting cell of `μ`.
    pub x_index: usize,
    /// Positions at the ensemble's times; the first is `X`, the last `X + B(1)`.
    pub positions: Vec<[f64; 2]>,
    pub weight: f64,
    /// Endpoint outside the target box; the weight is then zero.
    pub escaped: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct WeightStats {
    pub mean: f64,
    pub std_error: f64,
    pub effective_sample_size: f64,
    pub escaped: usize,
    pub escaped_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct PathEnsemble {
    pub times: Vec<f64>,
    pub paths: Vec<PathSample>,
}

impl PathEnsemble {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn weight_stats(&self) -> WeightStats {
        let n = self.paths.len() as f64;
        let (s, s2) = self.paths.iter().fold((0.0, 0.0), |(a, b), p| (a + p.weight, b + p.weight * p.weight));
        let mean = s / n;
        let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
        let escaped = self.paths.iter().filter(|p| p.escaped).count();
        WeightStats {
            mean,
            std_error: (var / n).sqrt(),
            effective_sample_size: if s2 > 0.0 { s * s / s2 } else { 0.0 },
            escaped,
            escaped_fraction: escaped as f64 / n,
        }
    }

    /// `(position at time index k, weight)` per path.
    pub fn weighted_positions(&self, k: usize) -> Vec<(Vec<f64>, f64)> {
        self.paths.iter().map(|p| (p.positions[k].to_vec(), p.weight)).collect()
    }

    /// Rows `x0, x1, y0, y1, weight` with `y` the endpoint.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x0", "x1", "y0", "y1", "weight"])?;
        for p in &self.paths {
            let (x, y) = (p.positions[0], p.positions[p.positions.len() - 1]);
            w.write_record([x[0], x[1], y[0], y[1], p.weight].map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ChiSquareReport {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub bins: usize,
}

/// Cell index of `x` on an axis whose cells are centred on the points.
fn cell_of(axis: &Axis, x: f64) -> Option<usize> {
    let p = axis.points();
    let v = axis.volumes();
    let n = p.len();
    if x < p[0] - 0.5 * v[0] || x > p[n - 1] + 0.5 * v[n - 1] {
        return None;
    }
    let j = axis.nearest(x);
    Some(j)
}

/// Chi-square test of weighted samples against cell masses of `target`.
///
/// Cells are grouped into blocks of `block` cells per axis; blocks whose
/// expected count `n · mass` falls below `min_expected_count` are pooled
/// with the mass outside the grid into one bin. Weighted bin means are
/// compared with their empirical variances, one degree of freedom per bin,
/// since the weights do not sum to `n` exactly.
pub fn weighted_chi_square(
    target: &GridMeasure,
    samples: &[(Vec<f64>, f64)],
    block: usize,
    min_expected_count: f64,
) -> Result<ChiSquareReport> {
    let block = block.max(1);
    let n = samples.len();
    if n < 2 {
        return Err(Error::InvalidOption("chi-square needs at least two samples".into()));
    }
    let d = target.dim();
    let dims = target.shape();
    let coarse: Vec<usize> = dims.iter().map(|m| m.div_ceil(block)).collect();
    let nb: usize = coarse.iter().product();
    let coarse_of = |cells: &[usize]| cells.iter().zip(&coarse).fold(0, |acc, (&c, &m)| acc * m + c / block);

    let mut expected = vec![0.0; nb];
    let mut idx = vec![0; d];
    for (flat, &w) in target.weights().iter().enumerate() {
        crate::grid::unravel(flat, &dims, &mut idx);
        expected[coarse_of(&idx)] += w;
    }
    let outside_expected = (1.0 - target.total_mass()).max(0.0);
    let (mut s1, mut s2) = (vec![0.0; nb + 1], vec![0.0; nb + 1]);
    let mut cells = vec![0; d];
    for (x, w) in samples {
        if x.len() != d {
            return Err(Error::GridMismatch("sample dimension differs from the target".into()));
        }
        let mut inside = true;
        for a in 0..d {
            match cell_of(&target.axes()[a], x[a]) {
                Some(c) => cells[a] = c,
                None => inside = false,
            }
        }
        let b = if inside { coarse_of(&cells) } else { nb };
        s1[b] += w;
        s2[b] += w * w;
    }

    let nf = n as f64;
    let min_mass = min_expected_count / nf;
    let mut pooled = (outside_expected, s1[nb], s2[nb]);
    let mut terms = Vec::new();
    for b in 0..nb {
        if expected[b] < min_mass {
            pooled.0 += expected[b];
            pooled.1 += s1[b];
            pooled.2 += s2[b];
        } else {
            terms.push((expected[b], s1[b], s2[b]));
        }
    }
    if pooled.0 > 0.0 || pooled.1 > 0.0 {
        terms.push(pooled);
    }
    let statistic: f64 = terms
        .iter()
        .map(|&(e, a, b)| {
            let mean = a / nf;
            let var = ((b / nf - mean * mean) / nf).max(f64::MIN_POSITIVE);
            (mean - e).powi(2) / var
        })
        .sum();
    let dof = terms.len();
    let p_value =
        ChiSquared::new(dof as f64).map_err(|e| Error::InvalidOption(format!("chi-square: {e}")))?.sf(statistic);
    Ok(ChiSquareReport { statistic, dof, p_value, bins: terms.len() })
}
