//! Brute-force entropy minimizers for tiny instances.
//!
//! Written independently of the production solvers: plain (non-log) scaling
//! with compensated sums, run until the dual gradient is at machine level.
//! Only the input containers and the dense kernel table are shared.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::{BlockStructure, GridMeasure};
use crate::kernel::Kernel;
use crate::numeric::{neumaier_sum, Neumaier};

const GRADIENT_TOL: f64 = 1e-14;
const MAX_SWEEPS: usize = 2_000_000;
const MASS_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct OracleBridge {
    /// Row-major coupling weights on source × target.
    pub coupling: Vec<f64>,
    pub value: f64,
    pub sweeps: usize,
    pub gradient_norm: f64,
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    neumaier_sum(p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()))
}

/// Minimizes `H(π ‖ q)` over couplings of `(r, c)` for a positive reference
/// `q` on `r.len() × c.len()` cells (row-major).
pub fn minimize_entropy(r: &[f64], c: &[f64], q: &[f64]) -> Result<OracleBridge> {
    let (n, m) = (r.len(), c.len());
    if q.len() != n * m {
        return Err(Error::GridMismatch("reference does not match the marginals".into()));
    }
    let (sr, sc) = (neumaier_sum(r.iter().copied()), neumaier_sum(c.iter().copied()));
    if (sr - sc).abs() > MASS_TOL || r.iter().chain(c).any(|v| *v < 0.0) {
        return Err(Error::Infeasible(format!("marginal masses {sr} and {sc} differ")));
    }
    let mut u = vec![1.0; n];
    let mut v: Vec<f64> = c.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
    let mut grad = f64::INFINITY;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        for i in 0..n {
            let s = neumaier_sum((0..m).map(|j| q[i * m + j] * v[j]));
            u[i] = if r[i] > 0.0 { r[i] / s } else { 0.0 };
        }
        for j in 0..m {
            let s = neumaier_sum((0..n).map(|i| q[i * m + j] * u[i]));
            v[j] = if c[j] > 0.0 { c[j] / s } else { 0.0 };
        }
        // after the column update only the rows can be off
        let mut g = Neumaier::default();
        for i in 0..n {
            let s = neumaier_sum((0..m).map(|j| u[i] * q[i * m + j] * v[j]));
            g.add((s - r[i]) * (s - r[i]));
        }
        grad = g.value().sqrt();
        if grad <= GRADIENT_TOL {
            break;
        }
    }
    if grad > GRADIENT_TOL {
        return Err(Error::NotConverged { iterations: sweeps, residual: grad });
    }
    let coupling: Vec<f64> = (0..n * m).map(|k| u[k / m] * q[k] * v[k % m]).collect();
    let value = kl(&coupling, q);
    Ok(OracleBridge { coupling, value, sweeps, gradient_norm: grad })
}

/// Reference `μ(x) p(x, y) vol(y)` from a source measure, target measure and
/// kernel table given in linear form (row-major).
fn reference(mu: &[f64], p: &[f64], target_volumes: &[f64]) -> Vec<f64> {
    let m = target_volumes.len();
    (0..mu.len() * m).map(|k| mu[k / m] * p[k] * target_volumes[k % m]).collect()
}

/// Brute-force Schrödinger bridge between `mu` and `nu` for the dense kernel
/// values `p` (rows = source cells).
pub fn brute_force_bridge(mu: &GridMeasure, nu: &GridMeasure, p: &[f64]) -> Result<OracleBridge> {
    if mu.shape().iter().chain(&nu.shape()).any(|&k| k > 6) {
        return Err(Error::InvalidOption("oracle grids are limited to 6 points per axis".into()));
    }
    let vols = nu.cell_volumes();
    let q = reference(mu.weights(), p, &vols);
    minimize_entropy(mu.weights(), nu.weights(), &q)
}

/// Scalar-search cross-check for 2 × 2 instances: `π₁₁ = s` parametrizes the
/// feasible set and `dH/ds` is increasing, so bisection finds the optimum.
pub fn line_search_2x2(r: [f64; 2], c: [f64; 2], q: [f64; 4]) -> Result<([f64; 4], f64)> {
    if (r[0] + r[1] - c[0] - c[1]).abs() > MASS_TOL {
        return Err(Error::Infeasible("2x2 marginal masses differ".into()));
    }
    let pi = |s: f64| [s, r[0] - s, c[0] - s, r[1] - c[0] + s];
    let slope = |s: f64| {
        let p = pi(s);
        (p[0] / q[0]).ln() - (p[1] / q[1]).ln() - (p[2] / q[2]).ln() + (p[3] / q[3]).ln()
    };
    let (mut lo, mut hi) = ((c[0] - r[1]).max(0.0), r[0].min(c[0]));
    if !(hi > lo) {
        return Err(Error::EmptyInterior);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 1e-16 {
            break;
        }
        if slope(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let p = pi(0.5 * (lo + hi));
    let value = kl(&p, &q);
    Ok((p, value))
}

#[derive(Clone, Debug)]
pub struct OracleLevel {
    /// Coupling on `x_{n_i} × y_{n_i}`.
    pub coupling: Vec<f64>,
    pub value: f64,
    /// `(target prefix, prefix mass, conditional value)` for admissible prefixes.
    pub prefixes: Vec<(usize, f64, f64)>,
}

fn leading_marginal(weights: &[f64], trailing: usize) -> Vec<f64> {
    weights.chunks(trailing).map(|c| neumaier_sum(c.iter().copied())).collect()
}

/// Level-by-level ground truth: per-prefix conditional optima, recursive
/// assembly and chain-rule values.
pub fn brute_force_cascade(
    mu: &GridMeasure,
    nu: &GridMeasure,
    kernel: &Kernel,
    structure: &BlockStructure,
) -> Result<Vec<OracleLevel>> {
    let src_len: Vec<usize> = mu.shape();
    let tgt_len: Vec<usize> = nu.shape();
    let vol_axes: Vec<Vec<f64>> = nu.axes().iter().map(|a| a.volumes().to_vec()).collect();
    let d = structure.total_dim();
    if src_len.len() != d || tgt_len.len() != d {
        return Err(Error::InvalidStructure("structure does not cover the grids".into()));
    }
    let full = kernel.dense().values();
    let cols_full: usize = tgt_len.iter().product();
    let prod = |v: &[usize]| v.iter().product::<usize>();
    let vol_of = |lo: usize, hi: usize| -> Vec<f64> {
        let mut out = vec![1.0];
        for a in &vol_axes[lo..hi] {
            out = out.iter().flat_map(|p| a.iter().map(move |v| p * v)).collect();
        }
        out
    };

    let mut levels: Vec<OracleLevel> = Vec::new();
    for level in 1..=structure.depth() {
        let n = structure.prefix_dim(level);
        let n_prev = structure.prefix_dim(level - 1);
        let (xl, yl) = (prod(&src_len[..n]), prod(&tgt_len[..n]));
        let (x_trail, y_trail) = (prod(&src_len[n..]), prod(&tgt_len[n..]));
        let ypl = prod(&tgt_len[..n_prev]);
        let zl = yl / ypl;
        let trail_vol = vol_of(n, d);
        let zvol = vol_of(n_prev, n);

        // block marginal kernel p_i at trailing source index 0
        let p_i: Vec<f64> = (0..xl * yl)
            .map(|k| {
                let (x, y) = (k / yl, k % yl);
                let row = x * x_trail;
                neumaier_sum((0..y_trail).map(|t| full[row * cols_full + y * y_trail + t] * trail_vol[t]))
            })
            .collect();
        let mu_i = leading_marginal(mu.weights(), x_trail);
        let nu_i = leading_marginal(nu.weights(), y_trail);

        if level == 1 {
            let q = reference(&mu_i, &p_i, &zvol);
            let b = minimize_entropy(&mu_i, &nu_i, &q)?;
            levels.push(OracleLevel { value: b.value, prefixes: vec![(0, 1.0, b.value)], coupling: b.coupling });
            continue;
        }

        let prev = &levels[level - 2].coupling;
        let xpl = prod(&src_len[..n_prev]);
        let xb = xl / xpl;
        let mu_prev: Vec<f64> = mu_i.chunks(xb).map(|c| neumaier_sum(c.iter().copied())).collect();
        // ext(x, yp) on x_{n_i} × y_{n_{i-1}}
        let mut ext = vec![0.0; xl * ypl];
        for x in 0..xl {
            let xp = x / xb;
            if mu_prev[xp] == 0.0 {
                continue;
            }
            for yp in 0..ypl {
                ext[x * ypl + yp] = prev[xp * ypl + yp] * mu_i[x] / mu_prev[xp];
            }
        }
        let mut coupling = vec![0.0; xl * yl];
        let mut prefixes = Vec::new();
        let mut value = Neumaier::default();
        for yp in 0..ypl {
            let target: Vec<f64> = nu_i[yp * zl..(yp + 1) * zl].to_vec();
            let tm = neumaier_sum(target.iter().copied());
            if tm <= 0.0 {
                continue;
            }
            let col: Vec<f64> = (0..xl).map(|x| ext[x * ypl + yp]).collect();
            let sm = neumaier_sum(col.iter().copied());
            let source: Vec<f64> = col.iter().map(|v| v / sm).collect();
            let target: Vec<f64> = target.iter().map(|v| v / tm).collect();
            let mut q = vec![0.0; xl * zl];
            for x in 0..xl {
                let row = &p_i[x * yl + yp * zl..x * yl + (yp + 1) * zl];
                let norm = neumaier_sum(row.iter().zip(&zvol).map(|(a, b)| a * b));
                for z in 0..zl {
                    q[x * zl + z] = source[x] * row[z] / norm * zvol[z];
                }
            }
            let b = minimize_entropy(&source, &target, &q)?;
            for x in 0..xl {
                if source[x] == 0.0 {
                    continue;
                }
                for z in 0..zl {
                    coupling[x * yl + yp * zl + z] = col[x] * b.coupling[x * zl + z] / source[x];
                }
            }
            value.add(sm * b.value);
            prefixes.push((yp, sm, b.value));
        }
        levels.push(OracleLevel { coupling, value: value.value(), prefixes });
    }
    Ok(levels)
}

/// One transportation polytope: couplings of `(rows, cols)` placed into a
/// larger flat coupling at `cells[i * cols.len() + j]`.
#[derive(Clone, Debug)]
pub struct FeasibleBlock {
    pub rows: Vec<f64>,
    pub cols: Vec<f64>,
    pub cells: Vec<usize>,
}

/// Product of independent transportation polytopes inside a coupling of
/// `len` cells; cells not covered by any block are zero.
#[derive(Clone, Debug)]
pub struct FeasibleFamily {
    pub len: usize,
    pub blocks: Vec<FeasibleBlock>,
}

impl FeasibleFamily {
    /// Couplings of `(μ, ν)` on a row-major `|μ| × |ν|` grid.
    pub fn bridge(mu: &[f64], nu: &[f64]) -> Self {
        let m = nu.len();
        Self {
            len: mu.len() * m,
            blocks: vec![FeasibleBlock { rows: mu.to_vec(), cols: nu.to_vec(), cells: (0..mu.len() * m).collect() }],
        }
    }

    /// Level-`i` admissible couplings on `x_{n_i} × y_{n_i}`: prefix
    /// projection `ext` on `x_{n_i} × y_{n_{i-1}}`, target `nu_i` on
    /// `y_{n_i}` with `block_len` cells per prefix. The per-prefix target is
    /// rescaled to the extension's prefix mass.
    pub fn cascade_level(ext: &[f64], nu_i: &[f64], block_len: usize) -> Self {
        let yl = nu_i.len();
        let ypl = yl / block_len;
        let xl = ext.len() / ypl;
        let mut blocks = Vec::new();
        for yp in 0..ypl {
            let rows: Vec<f64> = (0..xl).map(|x| ext[x * ypl + yp]).collect();
            let rm = neumaier_sum(rows.iter().copied());
            let t = &nu_i[yp * block_len..(yp + 1) * block_len];
            let tm = neumaier_sum(t.iter().copied());
            if rm <= 0.0 || tm <= 0.0 {
                continue;
            }
            let cols: Vec<f64> = t.iter().map(|v| v * rm / tm).collect();
            let cells = (0..xl).flat_map(|x| (0..block_len).map(move |z| x * yl + yp * block_len + z)).collect();
            blocks.push(FeasibleBlock { rows, cols, cells });
        }
        Self { len: xl * yl, blocks }
    }
}

/// Random feasible couplings: the product interior point plus a
/// double-centred Gaussian perturbation on the support, scaled by a random
/// fraction of the largest step that keeps every cell positive.
pub fn feasible_samples(family: &FeasibleFamily, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut has_direction = false;
    for b in &family.blocks {
        let (sr, sc) = (neumaier_sum(b.rows.iter().copied()), neumaier_sum(b.cols.iter().copied()));
        if (sr - sc).abs() > MASS_TOL * sr.max(1.0) {
            return Err(Error::Infeasible(format!("block masses {sr} and {sc} differ")));
        }
        let nr = b.rows.iter().filter(|v| **v > 0.0).count();
        let nc = b.cols.iter().filter(|v| **v > 0.0).count();
        has_direction |= nr >= 2 && nc >= 2;
    }
    if !has_direction {
        return Err(Error::EmptyInterior);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut w = vec![0.0; family.len];
        for b in &family.blocks {
            let ri: Vec<usize> = (0..b.rows.len()).filter(|&i| b.rows[i] > 0.0).collect();
            let ci: Vec<usize> = (0..b.cols.len()).filter(|&j| b.cols[j] > 0.0).collect();
            let total = neumaier_sum(b.rows.iter().copied());
            let m = b.cols.len();
            let base = |i: usize, j: usize| b.rows[i] * b.cols[j] / total;
            let mut g: Vec<Vec<f64>> =
                ri.iter().map(|_| ci.iter().map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
            let (nr, nc) = (ri.len() as f64, ci.len() as f64);
            let row_mean: Vec<f64> = g.iter().map(|r| r.iter().sum::<f64>() / nc).collect();
            let col_mean: Vec<f64> = (0..ci.len()).map(|j| g.iter().map(|r| r[j]).sum::<f64>() / nr).collect();
            let grand = row_mean.iter().sum::<f64>() / nr;
            for (a, r) in g.iter_mut().enumerate() {
                for (bj, v) in r.iter_mut().enumerate() {
                    *v += grand - row_mean[a] - col_mean[bj];
                }
            }
            let mut t_max = f64::INFINITY;
            for (a, &i) in ri.iter().enumerate() {
                for (bj, &j) in ci.iter().enumerate() {
                    if g[a][bj] < 0.0 {
                        t_max = t_max.min(-base(i, j) / g[a][bj]);
                    }
                }
            }
            let t = if t_max.is_finite() { rng.random::<f64>() * t_max * (1.0 - 1e-9) } else { 0.0 };
            for (a, &i) in ri.iter().enumerate() {
                for (bj, &j) in ci.iter().enumerate() {
                    w[b.cells[i * m + j]] = base(i, j) + t * g[a][bj];
                }
            }
        }
        out.push(w);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Axis;

    fn unit(n: usize) -> Vec<Axis> {
        vec![Axis::indices(n).unwrap()]
    }

    #[test]
    fn pushforward_target_gives_reference() {
        let mu = [0.3, 0.7];
        let p = [0.2, 0.5, 0.3, 0.6, 0.1, 0.3];
        let nu: Vec<f64> = (0..3).map(|j| 0.3 * p[j] + 0.7 * p[3 + j]).collect();
        let mu_m = GridMeasure::new(unit(2), mu.to_vec()).unwrap();
        let nu_m = GridMeasure::new(unit(3), nu).unwrap();
        let b = brute_force_bridge(&mu_m, &nu_m, &p).unwrap();
        assert!(b.value.abs() < 1e-15);
        for k in 0..6 {
            assert!((b.coupling[k] - mu[k / 3] * p[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_2x2_and_line_search_agree() {
        let e = (-1.0f64).exp();
        let z = 1.0 + e;
        let p = [1.0 / z, e / z, e / z, 1.0 / z];
        let m = GridMeasure::new(unit(2), vec![0.5, 0.5]).unwrap();
        let b = brute_force_bridge(&m, &m, &p).unwrap();
        assert!((b.coupling[0] - b.coupling[3]).abs() < 1e-16);
        assert!((b.coupling[1] - b.coupling[2]).abs() < 1e-16);
        let q = [0.5 * p[0], 0.5 * p[1], 0.5 * p[2], 0.5 * p[3]];
        let (pi, v) = line_search_2x2([0.5, 0.5], [0.5, 0.5], q).unwrap();
        for k in 0..4 {
            assert!((pi[k] - b.coupling[k]).abs() < 1e-14);
        }
        assert!((v - b.value).abs() < 1e-14);
        // closed form: π11 = s solves s² / (1/2 - s)² = 1 / e² → s = 1 / (2(1 + e))
        let s = 0.5 / (1.0 + e);
        assert!((b.coupling[0] - s).abs() < 1e-15);
    }

    #[test]
    fn asymmetric_2x2_line_search() {
        let q = [0.1, 0.3, 0.25, 0.35];
        let b = minimize_entropy(&[0.6, 0.4], &[0.2, 0.8], &q).unwrap();
        let (pi, v) = line_search_2x2([0.6, 0.4], [0.2, 0.8], q).unwrap();
        for k in 0..4 {
            assert!((pi[k] - b.coupling[k]).abs() < 1e-14);
        }
        assert!((v - b.value).abs() < 1e-14);
    }

    #[test]
    fn infeasible_marginals() {
        assert!(matches!(minimize_entropy(&[0.5, 0.5], &[0.5, 0.6], &[0.25; 4]), Err(Error::Infeasible(_))));
    }

    #[test]
    fn feasible_samples_hold_constraints() {
        let fam = FeasibleFamily::bridge(&[0.2, 0.5, 0.3], &[0.6, 0.4]);
        assert!(feasible_samples(&fam, 0, 1).unwrap().is_empty());
        let q = [0.1, 0.1, 0.2, 0.3, 0.1, 0.2];
        let opt = minimize_entropy(&[0.2, 0.5, 0.3], &[0.6, 0.4], &q).unwrap();
        for s in feasible_samples(&fam, 200, 7).unwrap() {
            assert!(s.iter().all(|v| *v > 0.0));
            for i in 0..3 {
                assert!((s[2 * i] + s[2 * i + 1] - [0.2, 0.5, 0.3][i]).abs() < 1e-14);
            }
            for j in 0..2 {
                assert!(((0..3).map(|i| s[2 * i + j]).sum::<f64>() - [0.6, 0.4][j]).abs() < 1e-14);
            }
            assert!(kl(&s, &q) >= opt.value - 1e-15);
        }
        let single = FeasibleFamily::bridge(&[1.0], &[0.5, 0.5]);
        assert!(matches!(feasible_samples(&single, 3, 1), Err(Error::EmptyInterior)));
    }

    #[test]
    fn product_cascade_prefixes_agree() {
        let ax = vec![Axis::indices(2).unwrap(), Axis::indices(2).unwrap()];
        let a = [0.3, 0.7];
        let b = [0.6, 0.4];
        let mu = GridMeasure::new(ax.clone(), vec![a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1]]).unwrap();
        let nu = GridMeasure::new(ax.clone(), vec![0.5 * 0.2, 0.5 * 0.8, 0.5 * 0.2, 0.5 * 0.8]).unwrap();
        let k = Kernel::gaussian_heat(ax.clone(), ax, &[1.0, 1.0]).unwrap();
        let s = BlockStructure::new(vec![1, 1]).unwrap();
        let lv = brute_force_cascade(&mu, &nu, &k, &s).unwrap();
        let pre = &lv[1].prefixes;
        assert_eq!(pre.len(), 2);
        assert!((pre[0].2 - pre[1].2).abs() < 1e-13);
        let chain: f64 = pre.iter().map(|p| p.1 * p.2).sum();
        assert!((chain - lv[1].value).abs() < 1e-15);
    }
}
