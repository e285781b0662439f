//! Single Schrödinger functional equation solved by Fortet iteration.
//!
//! Potentials are kept as logarithms. `h` lives on the target grid and is
//! `-inf` exactly where the target density vanishes; `h0(x) = Σ_y h(y) p(x, y) vol(y)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{cell_volumes, tv_slices, Axis, GridMeasure};
use crate::kernel::KernelTable;
use crate::numeric::log_sum_exp;

const MASS_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct FortetOptions {
    /// Stop once the target-marginal total variation drops below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Starting `log h` on the target grid; `0` everywhere when absent.
    pub init_log_h: Option<Vec<f64>>,
}

impl Default for FortetOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 50_000, init_log_h: None }
    }
}

impl FortetOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Potentials {
    log_h: Vec<f64>,
    log_h0: Vec<f64>,
}

impl Potentials {
    pub fn from_logs(log_h: Vec<f64>, log_h0: Vec<f64>) -> Self {
        Self { log_h, log_h0 }
    }

    pub fn log_h(&self) -> &[f64] {
        &self.log_h
    }

    pub fn log_h0(&self) -> &[f64] {
        &self.log_h0
    }

    pub fn h(&self) -> Vec<f64> {
        self.log_h.iter().map(|v| v.exp()).collect()
    }

    pub fn h0(&self) -> Vec<f64> {
        self.log_h0.iter().map(|v| v.exp()).collect()
    }

    /// Multiplies `h` (and hence `h0`) by `exp(log_c)`.
    pub fn scaled(&self, log_c: f64) -> Self {
        Self {
            log_h: self.log_h.iter().map(|v| v + log_c).collect(),
            log_h0: self.log_h0.iter().map(|v| v + log_c).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FortetDiagnostics {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub residual_trace: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BridgeSolution {
    pub potentials: Potentials,
    pub coupling: GridMeasure,
    pub value: f64,
    pub diagnostics: FortetDiagnostics,
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v > f64::NEG_INFINITY && best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

fn ln_or_neg_inf(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Fortet iteration on raw weight vectors.
///
/// `source` and `target` are cell masses; `target_volumes` the target cell
/// volumes. Returns ungauged potentials; the error carries the last residual.
pub(crate) fn fortet_core(
    source: &[f64],
    target: &[f64],
    target_volumes: &[f64],
    kernel: &KernelTable,
    opts: &FortetOptions,
) -> std::result::Result<(Potentials, FortetDiagnostics), FortetDiagnostics> {
    let (rows, cols) = (kernel.rows(), kernel.cols());
    let active: Vec<usize> = (0..rows).filter(|&x| source[x] > 0.0).collect();
    let log_mu: Vec<f64> = source.iter().map(|&m| ln_or_neg_inf(m)).collect();
    let log_vol: Vec<f64> = target_volumes.iter().map(|v| v.ln()).collect();
    let log_f: Vec<f64> = target.iter().zip(target_volumes).map(|(&w, &v)| ln_or_neg_inf(w / v)).collect();

    let mut log_h = match &opts.init_log_h {
        Some(init) => init.clone(),
        None => vec![0.0; cols],
    };
    for (lh, lf) in log_h.iter_mut().zip(&log_f) {
        if *lf == f64::NEG_INFINITY {
            *lh = f64::NEG_INFINITY;
        }
    }
    let mut log_h0 = vec![0.0; rows];
    let mut col_max = vec![f64::NEG_INFINITY; cols];
    let mut col_sum = vec![0.0; cols];
    let mut log_s = vec![0.0; cols];
    let mut hv = vec![0.0; cols];
    let mut diag = FortetDiagnostics::default();

    for it in 1..=opts.max_iter {
        for (y, v) in hv.iter_mut().enumerate() {
            *v = log_h[y] + log_vol[y];
        }
        for (x, lh0) in log_h0.iter_mut().enumerate() {
            let row = kernel.log_row(x);
            *lh0 = log_sum_exp(row.iter().zip(&hv).map(|(a, b)| a + b));
        }

        col_max.fill(f64::NEG_INFINITY);
        for &x in &active {
            let a = log_mu[x] - log_h0[x];
            for (m, &l) in col_max.iter_mut().zip(kernel.log_row(x)) {
                *m = m.max(a + l);
            }
        }
        col_sum.fill(0.0);
        for &x in &active {
            let a = log_mu[x] - log_h0[x];
            for ((s, &l), &m) in col_sum.iter_mut().zip(kernel.log_row(x)).zip(&col_max) {
                *s += (a + l - m).exp();
            }
        }
        for y in 0..cols {
            log_s[y] = col_max[y] + col_sum[y].ln();
        }

        let mut residual = 0.0;
        for y in 0..cols {
            let m = (hv[y] + log_s[y]).exp();
            residual += (m - target[y]).abs();
        }
        residual *= 0.5;
        diag.iterations = it;
        diag.residual = residual;
        diag.residual_trace.push(residual);
        if residual < opts.tol {
            diag.converged = true;
            return Ok((Potentials { log_h, log_h0 }, diag));
        }
        for y in 0..cols {
            log_h[y] = log_f[y] - log_s[y];
        }
    }
    Err(diag)
}

/// Shifts potentials so that `h(y*) = 1` at `y* = argmax f_ν`.
pub(crate) fn apply_gauge(pot: &mut Potentials, target: &[f64], target_volumes: &[f64]) -> Option<usize> {
    let f: Vec<f64> =
        target.iter().zip(target_volumes).map(|(w, v)| if *w > 0.0 { w / v } else { f64::NEG_INFINITY }).collect();
    let star = argmax_first(&f)?;
    let c = pot.log_h[star];
    for v in pot.log_h.iter_mut().chain(pot.log_h0.iter_mut()) {
        *v -= c;
    }
    Some(star)
}

fn check_inputs(mu: &GridMeasure, nu: &GridMeasure, p: &KernelTable, opts: &FortetOptions) -> Result<()> {
    if p.rows() != mu.len() || p.cols() != nu.len() {
        return Err(Error::GridMismatch(format!(
            "kernel is {}x{}, measures have {} and {} cells",
            p.rows(),
            p.cols(),
            mu.len(),
            nu.len()
        )));
    }
    for (name, m) in [("source", mu), ("target", nu)] {
        if (m.total_mass() - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidMeasure(format!("{name} measure has mass {}, expected 1", m.total_mass())));
        }
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidOption(format!("tolerance must be positive, got {}", opts.tol)));
    }
    if let Some(init) = &opts.init_log_h {
        if init.len() != nu.len() || init.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidOption("initial log h must be finite and cover the target grid".into()));
        }
    }
    Ok(())
}

/// Solves the Schrödinger system for `(μ, ν, p)` and returns gauge-fixed
/// potentials with `h(argmax f_ν) = 1`.
pub fn fortet_iterate(
    mu: &GridMeasure,
    nu: &GridMeasure,
    p: &KernelTable,
    opts: &FortetOptions,
) -> Result<(Potentials, FortetDiagnostics)> {
    check_inputs(mu, nu, p, opts)?;
    let vols = nu.cell_volumes();
    match fortet_core(mu.weights(), nu.weights(), &vols, p, opts) {
        Ok((mut pot, diag)) => {
            apply_gauge(&mut pot, nu.weights(), &vols);
            Ok((pot, diag))
        }
        Err(diag) => Err(Error::NotConverged { iterations: diag.iterations, residual: diag.residual }),
    }
}

fn product_axes(mu: &GridMeasure, target_axes: &[Axis]) -> Vec<Axis> {
    mu.axes().iter().chain(target_axes).cloned().collect()
}

/// Coupling `μ(x) p(x, y) h(y) vol(y) / h0(x)` on the source × target grid.
pub fn assemble_coupling(
    mu: &GridMeasure,
    target_axes: &[Axis],
    p: &KernelTable,
    pot: &Potentials,
) -> Result<GridMeasure> {
    let log_vol: Vec<f64> = cell_volumes(target_axes).iter().map(|v| v.ln()).collect();
    let mut w = Vec::with_capacity(p.rows() * p.cols());
    for (x, &m) in mu.weights().iter().enumerate() {
        let row = p.log_row(x);
        for y in 0..p.cols() {
            w.push(if m > 0.0 { m * (row[y] + pot.log_h[y] + log_vol[y] - pot.log_h0[x]).exp() } else { 0.0 });
        }
    }
    GridMeasure::new(product_axes(mu, target_axes), w)
}

/// Reference measure `μ(dx) p(x, y) dy`.
pub fn reference_coupling(mu: &GridMeasure, target_axes: &[Axis], p: &KernelTable) -> Result<GridMeasure> {
    let vols = cell_volumes(target_axes);
    let mut w = Vec::with_capacity(p.rows() * p.cols());
    for (x, &m) in mu.weights().iter().enumerate() {
        for (y, v) in vols.iter().enumerate() {
            w.push(m * p.value(x, y) * v);
        }
    }
    GridMeasure::new(product_axes(mu, target_axes), w)
}

/// `H(coupling ‖ μ(dx) p(x, y) dy)`.
pub fn schrodinger_value(coupling: &GridMeasure, mu: &GridMeasure, p: &KernelTable) -> Result<f64> {
    if coupling.dim() < mu.dim() || !crate::grid::axes_approx_eq(&coupling.axes()[..mu.dim()], mu.axes()) {
        return Err(Error::GridMismatch("coupling source axes differ from the source measure".into()));
    }
    // log-domain kernel: linear entries underflow at small variance while the
    // coupling keeps mass there
    let vols = cell_volumes(&coupling.axes()[mu.dim()..]);
    let m = vols.len();
    if m != p.cols() || mu.len() != p.rows() || coupling.len() != p.rows() * m {
        return Err(Error::GridMismatch("coupling, source and kernel shapes differ".into()));
    }
    let mut acc = 0.0;
    for (k, &a) in coupling.weights().iter().enumerate() {
        if a > 0.0 {
            let (x, y) = (k / m, k % m);
            let (mx, lp) = (mu.weights()[x], p.log(x, y));
            if mx <= 0.0 || lp == f64::NEG_INFINITY {
                return Ok(f64::INFINITY);
            }
            acc += a * ((a / (mx * vols[y])).ln() - lp);
        }
    }
    Ok(acc)
}

/// Solves the bridge and assembles its coupling and value.
pub fn solve_bridge(
    mu: &GridMeasure,
    nu: &GridMeasure,
    p: &KernelTable,
    opts: &FortetOptions,
) -> Result<BridgeSolution> {
    let (potentials, diagnostics) = fortet_iterate(mu, nu, p, opts)?;
    let coupling = assemble_coupling(mu, nu.axes(), p, &potentials)?;
    let value = schrodinger_value(&coupling, mu, p)?;
    Ok(BridgeSolution { potentials, coupling, value, diagnostics })
}

impl BridgeSolution {
    /// TV distances of the coupling marginals to `(μ, ν)`.
    pub fn marginal_errors(&self, mu: &GridMeasure, nu: &GridMeasure) -> (f64, f64) {
        let src = self.coupling.marginal_leading(mu.dim());
        let all: Vec<usize> = (mu.dim()..self.coupling.dim()).collect();
        let tgt = self.coupling.marginal(&all);
        (tv_slices(src.weights(), mu.weights()), tv_slices(tgt.weights(), nu.weights()))
    }
}
