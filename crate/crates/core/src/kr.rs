//! Knothe–Rosenblatt rearrangement between grid measures.
//!
//! CDFs are right-continuous: the value at a grid point is the cumulative
//! weight up to and including it. Map values are target grid indices, so the
//! snap onto the target grid is built in.

use std::collections::HashMap;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{grid_len, tv_slices, unravel, Axis, DiscreteCDF, GridMeasure};
use crate::kernel::Kernel;
use crate::sfe::{solve_bridge, FortetOptions};

/// Comparison slack for CDF values; keeps rounding in cumulative sums from
/// moving a quantile by one cell on matched grids.
const CDF_TIE_TOL: f64 = 1e-12;

/// `F^{-1}(u) = min { x : u ≤ F(x) }` on the CDF's grid.
pub fn quasi_inverse(cdf: &DiscreteCDF, u: f64) -> f64 {
    cdf.points()[cdf.quantile_index(u)]
}

fn prefix_index(p: &GridMeasure, x_prefix: &[usize]) -> Result<usize> {
    let mut flat = 0;
    for (a, &i) in x_prefix.iter().enumerate() {
        if a >= p.dim() || i >= p.axes()[a].len() {
            return Err(Error::GridMismatch(format!("prefix {x_prefix:?} is off the grid")));
        }
        flat = flat * p.axes()[a].len() + i;
    }
    Ok(flat)
}

/// CDF of coordinate `k` (1-based) under `P(· | x_{k-1})`, marginalizing the
/// coordinates after `k`.
pub fn conditional_cdf(p: &GridMeasure, k: usize, x_prefix: &[usize]) -> Result<DiscreteCDF> {
    if k == 0 || k > p.dim() || x_prefix.len() != k - 1 {
        return Err(Error::InvalidOption(format!(
            "coordinate {k} needs a prefix of length {} in dimension {}",
            k.saturating_sub(1),
            p.dim()
        )));
    }
    let m = p.marginal_leading(k);
    let flat = prefix_index(p, x_prefix)?;
    let n = p.axes()[k - 1].len();
    let slice = &m.weights()[flat * n..(flat + 1) * n];
    if !(slice.iter().sum::<f64>() > 0.0) {
        return Err(Error::ConditioningOnNull { prefix: x_prefix.to_vec() });
    }
    DiscreteCDF::from_weights(p.axes()[k - 1].points().to_vec(), slice)
}

/// Triangular map `T = (T_1, …, T_d)` as target grid indices.
///
/// `maps[k][x]` is `T_{k+1}` at the flat source prefix `x` over the first
/// `k + 1` coordinates, or `None` off the source support.
#[derive(Clone, Debug, PartialEq)]
pub struct KrMap {
    source: Vec<Axis>,
    target: Vec<Axis>,
    maps: Vec<Vec<Option<usize>>>,
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc / total
        })
        .collect()
}

fn first_at_least(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|&f| f + CDF_TIE_TOL < u).min(cdf.len() - 1)
}

/// Builds the Knothe–Rosenblatt map from `p0` to `p1` coordinate by
/// coordinate, conditioning `p1` on the already mapped prefix.
pub fn kr_map(p0: &GridMeasure, p1: &GridMeasure) -> Result<KrMap> {
    let d = p0.dim();
    if p1.dim() != d {
        return Err(Error::GridMismatch(format!("dimensions {d} and {} differ", p1.dim())));
    }
    let src_dims: Vec<usize> = p0.axes().iter().map(Axis::len).collect();
    let tgt_dims: Vec<usize> = p1.axes().iter().map(Axis::len).collect();
    let mut maps: Vec<Vec<Option<usize>>> = Vec::with_capacity(d);
    // mapped target prefix (flat over the first k coordinates) per source prefix
    let mut mapped_prefix: Vec<Option<usize>> = vec![Some(0)];
    for k in 0..d {
        let m0 = p0.marginal_leading(k + 1);
        let m1 = p1.marginal_leading(k + 1);
        let (ns, nt) = (src_dims[k], tgt_dims[k]);
        let mut target_cdfs: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut tk = vec![None; mapped_prefix.len() * ns];
        let mut next = vec![None; mapped_prefix.len() * ns];
        for (xp, tp) in mapped_prefix.iter().enumerate() {
            let row = &m0.weights()[xp * ns..(xp + 1) * ns];
            if !(row.iter().sum::<f64>() > 0.0) {
                continue;
            }
            let tp = tp.expect("source prefixes with mass have a mapped prefix");
            #[allow(clippy::map_entry)] // the miss path can return an error
            if !target_cdfs.contains_key(&tp) {
                let trow = &m1.weights()[tp * nt..(tp + 1) * nt];
                if !(trow.iter().sum::<f64>() > 0.0) {
                    let mut prefix = vec![0; k];
                    unravel(tp, &tgt_dims[..k], &mut prefix);
                    return Err(Error::ConditioningOnNull { prefix });
                }
                target_cdfs.insert(tp, cumulative(trow));
            }
            let f1 = &target_cdfs[&tp];
            let f0 = cumulative(row);
            for j in 0..ns {
                if row[j] == 0.0 {
                    continue;
                }
                let t = first_at_least(f1, f0[j]);
                tk[xp * ns + j] = Some(t);
                next[xp * ns + j] = Some(tp * nt + t);
            }
        }
        maps.push(tk);
        mapped_prefix = next;
    }
    Ok(KrMap { source: p0.axes().to_vec(), target: p1.axes().to_vec(), maps })
}

impl KrMap {
    pub fn dim(&self) -> usize {
        self.source.len()
    }

    /// `T_k` (1-based `k`) at the flat source prefix over the first `k` coordinates.
    pub fn component(&self, k: usize, prefix_flat: usize) -> Option<usize> {
        self.maps[k - 1][prefix_flat]
    }

    /// Target index tuple of a full source cell.
    pub fn image(&self, x_flat: usize) -> Option<Vec<usize>> {
        let d = self.dim();
        (0..d)
            .map(|k| {
                let trail = grid_len(&self.source[k + 1..]);
                self.maps[k][x_flat / trail]
            })
            .collect()
    }

    /// Flat target index of the image of the first `k` coordinates of `x_flat`.
    fn image_prefix_flat(&self, x_flat: usize, k: usize) -> Option<usize> {
        let mut flat = 0;
        for a in 0..k {
            let trail = grid_len(&self.source[a + 1..]);
            flat = flat * self.target[a].len() + self.maps[a][x_flat / trail]?;
        }
        Some(flat)
    }

    pub fn target_points(&self, x_flat: usize) -> Option<Vec<f64>> {
        self.image(x_flat).map(|t| t.iter().zip(&self.target).map(|(&i, a)| a.points()[i]).collect())
    }

    /// `T_k(x_{k-1}, ·)` nondecreasing on the support for every prefix and `k`.
    pub fn is_monotone(&self) -> bool {
        for (k, map) in self.maps.iter().enumerate() {
            let n = self.source[k].len();
            for row in map.chunks(n) {
                let vals: Vec<usize> = row.iter().flatten().copied().collect();
                if vals.windows(2).any(|w| w[1] < w[0]) {
                    return false;
                }
            }
        }
        true
    }

    /// Writes `i0.., t0.., y0..` rows: source index tuple, target index tuple
    /// and target coordinates, for cells on the source support.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let d = self.dim();
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<String> = (0..d)
            .map(|a| format!("i{a}"))
            .chain((0..d).map(|a| format!("t{a}")))
            .chain((0..d).map(|a| format!("y{a}")))
            .collect();
        w.write_record(&header)?;
        let dims: Vec<usize> = self.source.iter().map(Axis::len).collect();
        let mut idx = vec![0; d];
        for x in 0..grid_len(&self.source) {
            if let Some(t) = self.image(x) {
                unravel(x, &dims, &mut idx);
                let mut rec: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
                rec.extend(t.iter().map(|i| i.to_string()));
                rec.extend(t.iter().zip(&self.target).map(|(&i, a)| format!("{}", a.points()[i])));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Image of the first `k` coordinates of `p0` under `T_k` on the target prefix grid.
pub fn pushforward_prefix(p0: &GridMeasure, map: &KrMap, k: usize) -> Result<GridMeasure> {
    let mut w = vec![0.0; grid_len(&map.target[..k])];
    for (x, &m) in p0.weights().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let t = map
            .image_prefix_flat(x, k)
            .ok_or_else(|| Error::InvalidMeasure("map is undefined on part of the source support".into()))?;
        w[t] += m;
    }
    GridMeasure::new(map.target[..k].to_vec(), w)
}

/// TV distance between the pushforward of `p0` and `p1`.
pub fn pushforward_check(p0: &GridMeasure, map: &KrMap, p1: &GridMeasure) -> Result<f64> {
    let pushed = pushforward_prefix(p0, map, map.dim())?;
    pushed.check_same_grid(p1)?;
    Ok(tv_slices(pushed.weights(), p1.weights()))
}

/// Pushforward error of every prefix `k = 1..d` against `p1`'s k-prefix.
pub fn telescoping_errors(p0: &GridMeasure, map: &KrMap, p1: &GridMeasure) -> Result<Vec<f64>> {
    (1..=map.dim())
        .map(|k| {
            let pushed = pushforward_prefix(p0, map, k)?;
            Ok(tv_slices(pushed.weights(), p1.marginal_leading(k).weights()))
        })
        .collect()
}

/// Deterministic coupling of `p0` concentrated on the graph of `T`.
pub fn kr_coupling(p0: &GridMeasure, map: &KrMap) -> Result<GridMeasure> {
    let yl = grid_len(&map.target);
    let mut w = vec![0.0; p0.len() * yl];
    let d = map.dim();
    for (x, &m) in p0.weights().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let t = map
            .image_prefix_flat(x, d)
            .ok_or_else(|| Error::InvalidMeasure("map is undefined on part of the source support".into()))?;
        w[x * yl + t] = m;
    }
    let axes: Vec<Axis> = p0.axes().iter().chain(&map.target).cloned().collect();
    GridMeasure::new(axes, w)
}

/// `Σ π(x, y) |y - T(x)|²` for a coupling on the map's source × target grid.
pub fn map_deviation(coupling: &GridMeasure, map: &KrMap) -> Result<f64> {
    let xl = grid_len(&map.source);
    let yl = grid_len(&map.target);
    if coupling.len() != xl * yl {
        return Err(Error::GridMismatch("coupling does not match the map grids".into()));
    }
    let tdims: Vec<usize> = map.target.iter().map(Axis::len).collect();
    let mut yi = vec![0; tdims.len()];
    let mut acc = 0.0;
    for x in 0..xl {
        let row = &coupling.weights()[x * yl..(x + 1) * yl];
        if row.iter().all(|v| *v == 0.0) {
            continue;
        }
        let tx = map
            .target_points(x)
            .ok_or_else(|| Error::InvalidMeasure("coupling charges a source cell outside the map's support".into()))?;
        for (y, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            unravel(y, &tdims, &mut yi);
            let d2: f64 = yi.iter().zip(&map.target).zip(&tx).map(|((&i, a), t)| (a.points()[i] - t).powi(2)).sum();
            acc += w * d2;
        }
    }
    Ok(acc)
}

#[derive(Clone, Debug, Serialize)]
pub struct ZeroNoiseReport {
    pub variances: Vec<f64>,
    /// `Σ π(x, y) |y - T(x)|²` per variance.
    pub deviation: Vec<f64>,
    pub values: Vec<f64>,
    pub iterations: Vec<usize>,
    /// Deviation strictly decreases along the ladder.
    pub decreasing: bool,
}

/// Solves the bridge for the heat kernel at each variance and measures how
/// far its coupling spreads around the Knothe–Rosenblatt graph.
pub fn zero_noise_ladder(
    mu: &GridMeasure,
    nu: &GridMeasure,
    variances: &[f64],
    opts: &FortetOptions,
) -> Result<ZeroNoiseReport> {
    let map = kr_map(mu, nu)?;
    let mut report = ZeroNoiseReport {
        variances: variances.to_vec(),
        deviation: Vec::new(),
        values: Vec::new(),
        iterations: Vec::new(),
        decreasing: false,
    };
    for &t in variances {
        let kernel = Kernel::gaussian_heat(mu.axes().to_vec(), nu.axes().to_vec(), &vec![t; mu.dim()])?;
        let sol = solve_bridge(mu, nu, &kernel.dense(), opts)?;
        report.deviation.push(map_deviation(&sol.coupling, &map)?);
        report.values.push(sol.value);
        report.iterations.push(sol.diagnostics.iterations);
    }
    report.decreasing = report.deviation.windows(2).all(|w| w[1] < w[0]);
    Ok(report)
}
