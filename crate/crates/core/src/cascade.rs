//! Inductive system of conditional Schrödinger bridges.
//!
//! Level 1 is a plain bridge between the first-block marginals. Level `i`
//! extends the level-`(i-1)` coupling by the conditional law of the next
//! source block, then solves one bridge per admissible target prefix
//! `y_prev` (target prefix density positive) with the conditional kernel
//! `p_i(x, · | y_prev)`. Conditional potentials are gauge-fixed at the mode
//! of the conditional target density and assembled into a global coupling by
//! the product formula.
//!
//! Flat index conventions: a coupling on `X × Y` stores `(x, y)` at
//! `x * |Y| + y`; prefix grids are row-major with the last coordinate fastest.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{
    axes_approx_eq, cell_volumes, grid_len, relative_entropy, tv_slices, unravel, Axis, BlockStructure, GridMeasure,
};
use crate::kernel::{BlockKernelSet, ConditionalKernel, KernelTable};
use crate::numeric::log_sum_exp;
use crate::sfe::{
    self, apply_gauge, argmax_first, fortet_core, BridgeSolution, FortetDiagnostics, FortetOptions, Potentials,
};

/// Starting potentials for every Fortet run of a cascade.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Init {
    #[default]
    Zero,
    /// `log h` uniform on `[-2, 2]`, one independent stream per (level, prefix).
    RandomPositive { seed: u64 },
}

#[derive(Clone, Debug, Default)]
pub struct CascadeOptions {
    pub fortet: FortetOptions,
    /// Keep conditional couplings for every prefix.
    pub retain_per_prefix: bool,
    pub init: Init,
}

/// Solution of one conditional bridge at a fixed target prefix.
#[derive(Clone, Debug)]
pub struct ConditionalBridge {
    pub level: usize,
    pub y_prev: usize,
    /// Mass of the extended source at this prefix.
    pub source_mass: f64,
    /// Normalized source `ext(· | y_prev)` on the `x_{n_i}` grid.
    pub source: Vec<f64>,
    /// Normalized target `ν_i(y_prev, ·)` on the block grid.
    pub target: Vec<f64>,
    pub kernel: ConditionalKernel,
    /// `log h` on the block grid and conditional `log h0` per source point.
    pub potentials: Potentials,
    pub value: f64,
    pub diagnostics: FortetDiagnostics,
}

impl ConditionalBridge {
    /// `p_i(x, z | y_prev) h(z) vol(z) / h0(x)`, the conditional law of the
    /// block given `x`.
    pub fn transition(&self, x: usize, z: usize, log_block_volume: f64) -> f64 {
        let lh = self.potentials.log_h()[z];
        if lh == f64::NEG_INFINITY {
            return 0.0;
        }
        (self.kernel.log(x, z) + lh + log_block_volume - self.potentials.log_h0()[x]).exp()
    }

    /// Conditional coupling weights on `x_{n_i} × block`.
    pub fn coupling_weights(&self, block_volumes: &[f64]) -> Vec<f64> {
        let zl = block_volumes.len();
        let log_vol: Vec<f64> = block_volumes.iter().map(|v| v.ln()).collect();
        let mut w = vec![0.0; self.source.len() * zl];
        for (x, &s) in self.source.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            for z in 0..zl {
                w[x * zl + z] = s * self.transition(x, z, log_vol[z]);
            }
        }
        w
    }

    fn shift(&mut self, log_c: f64) {
        self.potentials = self.potentials.scaled(log_c);
    }
}

/// Lightweight per-prefix record kept on every level.
#[derive(Clone, Debug, Serialize)]
pub struct PrefixRecord {
    pub source_mass: f64,
    pub target_mass: f64,
    pub value: f64,
    pub iterations: usize,
    pub residual: f64,
    #[serde(skip)]
    pub log_h: Vec<f64>,
    #[serde(skip)]
    pub coupling: Option<GridMeasure>,
}

#[derive(Clone, Debug)]
pub struct CascadeLevel {
    pub level: usize,
    /// Gauge-fixed `log h_i` on the level-`i` target prefix grid.
    pub log_h_table: Vec<f64>,
    /// `log h_i(0, x_{n_i}, y_{n_{i-1}})` on `x_{n_i} × y_{n_{i-1}}`.
    pub log_h0_table: Vec<f64>,
    pub per_prefix: BTreeMap<usize, PrefixRecord>,
    /// Level-1 bridge, absent at deeper levels.
    pub bridge: Option<BridgeSolution>,
    /// Extended previous coupling on `x_{n_i} × y_{n_{i-1}}` (levels ≥ 2).
    pub extension: Option<GridMeasure>,
    pub reference: GridMeasure,
    pub global_coupling: GridMeasure,
    pub value: f64,
    /// `Σ_{y_prev} mass(y_prev) · conditional value`.
    pub value_decomposed: f64,
}

impl CascadeLevel {
    pub fn h_table(&self) -> Vec<f64> {
        self.log_h_table.iter().map(|v| v.exp()).collect()
    }

    pub fn h0_table(&self) -> Vec<f64> {
        self.log_h0_table.iter().map(|v| v.exp()).collect()
    }

    pub fn max_residual(&self) -> f64 {
        match &self.bridge {
            Some(b) => b.diagnostics.residual,
            None => self.per_prefix.values().map(|r| r.residual).fold(0.0, f64::max),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CascadeSolution {
    pub structure: BlockStructure,
    pub levels: Vec<CascadeLevel>,
}

impl CascadeSolution {
    pub fn level(&self, i: usize) -> &CascadeLevel {
        &self.levels[i - 1]
    }

    pub fn values(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.value).collect()
    }
}

fn prefix_tuple(flat: usize, axes: &[Axis]) -> Vec<usize> {
    let dims: Vec<usize> = axes.iter().map(Axis::len).collect();
    let mut out = vec![0; dims.len()];
    unravel(flat, &dims, &mut out);
    out
}

/// `π_{i-1} ⊗ μ_{i|i-1}` on `x_{n_i} × y_{n_{i-1}}`.
///
/// `prev` lives on `x_{n_{i-1}} × y_{n_{i-1}}`; `mu` is any measure whose
/// first `n_i` coordinates carry `μ_i`.
pub fn extend_source(
    prev: &GridMeasure,
    mu: &GridMeasure,
    structure: &BlockStructure,
    level: usize,
) -> Result<GridMeasure> {
    structure.check_level(level)?;
    if level < 2 {
        return Err(Error::InvalidStructure("extension starts at level 2".into()));
    }
    let n_prev = structure.prefix_dim(level - 1);
    let n = structure.prefix_dim(level);
    if mu.dim() < n || prev.dim() != 2 * n_prev {
        return Err(Error::GridMismatch(format!(
            "extension at level {level} needs a {}-dimensional previous coupling and at least {n} source coordinates",
            2 * n_prev
        )));
    }
    if !axes_approx_eq(&prev.axes()[..n_prev], &mu.axes()[..n_prev]) {
        return Err(Error::GridMismatch("previous coupling source axes differ from the source measure".into()));
    }
    let mu_i = mu.marginal_leading(n);
    let mu_prev = mu_i.marginal_leading(n_prev);
    let xb_len = grid_len(&mu.axes()[n_prev..n]);
    let yp_axes = &prev.axes()[n_prev..];
    let ypl = grid_len(yp_axes);
    let xpl = mu_prev.len();
    let mut w = vec![0.0; xpl * xb_len * ypl];
    for xp in 0..xpl {
        let row = &prev.weights()[xp * ypl..(xp + 1) * ypl];
        let m = mu_prev.weights()[xp];
        if m == 0.0 {
            if row.iter().any(|&v| v > 0.0) {
                return Err(Error::ConditioningOnNull { prefix: prefix_tuple(xp, &mu.axes()[..n_prev]) });
            }
            continue;
        }
        for xb in 0..xb_len {
            let cond = mu_i.weights()[xp * xb_len + xb] / m;
            if cond == 0.0 {
                continue;
            }
            let x = xp * xb_len + xb;
            for (yp, &v) in row.iter().enumerate() {
                w[x * ypl + yp] = v * cond;
            }
        }
    }
    let axes: Vec<Axis> = mu.axes()[..n].iter().chain(yp_axes).cloned().collect();
    GridMeasure::new(axes, w)
}

/// `π_{0,i} = ext(x, y_prev) p_i(x, z | y_prev) vol(z)` on `x_{n_i} × y_{n_i}`.
pub fn reference_measure(ext: &GridMeasure, kernels: &BlockKernelSet, level: usize) -> Result<GridMeasure> {
    let s = kernels.structure();
    s.check_level(level)?;
    let n = s.prefix_dim(level);
    let xl = grid_len(kernels.source_axes(level));
    let target = kernels.target_axes(level);
    let (ypl, zl) = level_target_shape(kernels, level);
    if ext.len() != xl * ypl {
        return Err(Error::GridMismatch("extension does not match the level grids".into()));
    }
    let zvol = cell_volumes(kernels.block_target_axes(level));
    let yl = ypl * zl;
    let mut w = vec![0.0; xl * yl];
    for yp in 0..ypl {
        if (0..xl).all(|x| ext.weights()[x * ypl + yp] == 0.0) {
            continue;
        }
        let ck = kernels.conditional(level, yp);
        for x in 0..xl {
            let e = ext.weights()[x * ypl + yp];
            if e == 0.0 {
                continue;
            }
            for z in 0..zl {
                w[x * yl + yp * zl + z] = e * ck.log(x, z).exp() * zvol[z];
            }
        }
    }
    let axes: Vec<Axis> = kernels.source_axes(level).iter().chain(&target[..n]).cloned().collect();
    GridMeasure::new(axes, w)
}

fn level_target_shape(kernels: &BlockKernelSet, level: usize) -> (usize, usize) {
    let s = kernels.structure();
    let ypl = grid_len(&kernels.full_target_axes()[..s.prefix_dim(level - 1)]);
    let zl = grid_len(kernels.block_target_axes(level));
    (ypl, zl)
}

/// Solves the conditional bridge at target prefix `y_prev`.
///
/// `nu_i` is the level-`i` target marginal on `y_{n_i}`. The returned
/// potentials are not gauge-fixed.
pub fn conditional_bridge(
    ext: &GridMeasure,
    kernels: &BlockKernelSet,
    nu_i: &GridMeasure,
    level: usize,
    y_prev: usize,
    opts: &FortetOptions,
) -> Result<ConditionalBridge> {
    let s = kernels.structure();
    s.check_level(level)?;
    let xl = grid_len(kernels.source_axes(level));
    let (ypl, zl) = level_target_shape(kernels, level);
    if nu_i.len() != ypl * zl || ext.len() != xl * ypl || y_prev >= ypl {
        return Err(Error::GridMismatch("conditional bridge inputs do not match the level grids".into()));
    }
    let prefix_axes = &kernels.full_target_axes()[..s.prefix_dim(level - 1)];
    let row = &nu_i.weights()[y_prev * zl..(y_prev + 1) * zl];
    let target_mass: f64 = row.iter().sum();
    if !(target_mass > 0.0) {
        return Err(Error::ConditioningOnNull { prefix: prefix_tuple(y_prev, prefix_axes) });
    }
    let mut source: Vec<f64> = (0..xl).map(|x| ext.weights()[x * ypl + y_prev]).collect();
    let source_mass: f64 = source.iter().sum();
    if !(source_mass > 0.0) {
        return Err(Error::ConditioningOnNull { prefix: prefix_tuple(y_prev, prefix_axes) });
    }
    for v in &mut source {
        *v /= source_mass;
    }
    let target: Vec<f64> = row.iter().map(|v| v / target_mass).collect();
    let kernel = kernels.conditional(level, y_prev);
    let zvol = cell_volumes(kernels.block_target_axes(level));

    let classes = kernel.table.rows();
    let mut class_mass = vec![0.0; classes];
    for (x, &m) in source.iter().enumerate() {
        class_mass[kernel.class_of_source[x]] += m;
    }
    let (pot, diagnostics) =
        fortet_core(&class_mass, &target, &zvol, &kernel.table, opts).map_err(|d| Error::PrefixNotConverged {
            level,
            prefix: prefix_tuple(y_prev, prefix_axes),
            iterations: d.iterations,
            residual: d.residual,
        })?;
    let log_h0: Vec<f64> = kernel.class_of_source.iter().map(|&c| pot.log_h0()[c]).collect();
    let potentials = Potentials::from_logs(pot.log_h().to_vec(), log_h0);
    let mut bridge =
        ConditionalBridge { level, y_prev, source_mass, source, target, kernel, potentials, value: 0.0, diagnostics };
    let w = bridge.coupling_weights(&zvol);
    let lh = bridge.potentials.log_h();
    let lh0 = bridge.potentials.log_h0();
    let mut value = 0.0;
    for x in 0..xl {
        for z in 0..zl {
            let c = w[x * zl + z];
            if c > 0.0 {
                value += c * (lh[z] - lh0[x]);
            }
        }
    }
    bridge.value = value;
    Ok(bridge)
}

/// Gauge-fixes a level's `log h` table (rows = target prefixes, `block_len`
/// columns). Admissible rows are shifted so that `h = 1` at the mode of the
/// conditional target density; other rows become `-inf`.
///
/// Returns the fixed table and the additive shift applied to each row
/// (`None` for inadmissible rows).
pub fn gauge_fix(
    log_h: &[f64],
    nu_i: &GridMeasure,
    structure: &BlockStructure,
    level: usize,
) -> Result<(Vec<f64>, Vec<Option<f64>>)> {
    structure.check_level(level)?;
    let n_prev = structure.prefix_dim(level - 1);
    let zvol = cell_volumes(&nu_i.axes()[n_prev..]);
    let zl = zvol.len();
    if log_h.len() != nu_i.len() {
        return Err(Error::GridMismatch("h table does not match the target grid".into()));
    }
    let ypl = nu_i.len() / zl;
    let mut out = vec![f64::NEG_INFINITY; log_h.len()];
    let mut shifts = vec![None; ypl];
    for yp in 0..ypl {
        let row = &nu_i.weights()[yp * zl..(yp + 1) * zl];
        if row.iter().sum::<f64>() <= 0.0 {
            continue;
        }
        let dens: Vec<f64> =
            row.iter().zip(&zvol).map(|(w, v)| if *w > 0.0 { w / v } else { f64::NEG_INFINITY }).collect();
        let star = argmax_first(&dens)
            .ok_or_else(|| Error::SelectionFailure { level, prefix: prefix_tuple(yp, &nu_i.axes()[..n_prev]) })?;
        let c = -log_h[yp * zl + star];
        if !c.is_finite() {
            return Err(Error::SelectionFailure { level, prefix: prefix_tuple(yp, &nu_i.axes()[..n_prev]) });
        }
        for z in 0..zl {
            out[yp * zl + z] = if row[z] > 0.0 { log_h[yp * zl + z] + c } else { f64::NEG_INFINITY };
        }
        shifts[yp] = Some(c);
    }
    Ok((out, shifts))
}

/// Global coupling `π_{μ_i, ν_i}` by the product formula over levels `1..=i`.
pub fn assemble_global(
    levels: &[CascadeLevel],
    mu: &GridMeasure,
    kernels: &BlockKernelSet,
    level: usize,
) -> Result<GridMeasure> {
    let refs: Vec<&CascadeLevel> = levels.iter().collect();
    assemble_product(&refs, mu, kernels, level)
}

fn assemble_product(
    levels: &[&CascadeLevel],
    mu: &GridMeasure,
    kernels: &BlockKernelSet,
    level: usize,
) -> Result<GridMeasure> {
    let s = kernels.structure();
    s.check_level(level)?;
    if levels.len() < level {
        return Err(Error::LevelOutOfRange { level, depth: levels.len() });
    }
    let n = s.prefix_dim(level);
    let src = kernels.source_axes(level);
    let tgt = kernels.target_axes(level);
    let mu_i = mu.marginal_leading(n);
    let xl = grid_len(src);
    let yl = grid_len(tgt);

    struct Factor<'a> {
        j: usize,
        x_div: usize,
        y_div: usize,
        yp_div: usize,
        zl: usize,
        ypl: usize,
        log_vol: Vec<f64>,
        level: &'a CascadeLevel,
    }
    let factors: Vec<Factor> = (1..=level)
        .map(|j| {
            let nj = s.prefix_dim(j);
            let npj = s.prefix_dim(j - 1);
            let block = &kernels.full_target_axes()[npj..nj];
            Factor {
                j,
                x_div: grid_len(&src[nj..n]),
                y_div: grid_len(&tgt[nj..n]),
                yp_div: grid_len(&tgt[npj..n]),
                zl: grid_len(block),
                ypl: grid_len(&tgt[..npj]),
                log_vol: cell_volumes(block).iter().map(|v| v.ln()).collect(),
                level: levels[j - 1],
            }
        })
        .collect();

    let mut w = vec![0.0; xl * yl];
    for x in 0..xl {
        let m = mu_i.weights()[x];
        if m == 0.0 {
            continue;
        }
        'cells: for y in 0..yl {
            let mut acc = 0.0;
            for f in &factors {
                let (xj, yj, ypj) = (x / f.x_div, y / f.y_div, y / f.yp_div);
                let lh = f.level.log_h_table[yj];
                if lh == f64::NEG_INFINITY {
                    continue 'cells;
                }
                let lh0 = f.level.log_h0_table[xj * f.ypl + ypj];
                acc += kernels.log_p(f.j, xj, yj) + lh + f.log_vol[yj % f.zl] - lh0;
            }
            w[x * yl + y] = m * acc.exp();
        }
    }
    let axes: Vec<Axis> = src.iter().chain(tgt).cloned().collect();
    GridMeasure::new(axes, w)
}

/// Recursive assembly: the extension times each conditional coupling.
pub fn assemble_recursive(
    ext: &GridMeasure,
    bridges: &[ConditionalBridge],
    kernels: &BlockKernelSet,
    level: usize,
) -> Result<GridMeasure> {
    let s = kernels.structure();
    let xl = grid_len(kernels.source_axes(level));
    let (ypl, zl) = level_target_shape(kernels, level);
    let yl = ypl * zl;
    let log_vol: Vec<f64> = cell_volumes(kernels.block_target_axes(level)).iter().map(|v| v.ln()).collect();
    let mut w = vec![0.0; xl * yl];
    for b in bridges {
        for x in 0..xl {
            let e = ext.weights()[x * ypl + b.y_prev];
            if e == 0.0 {
                continue;
            }
            for z in 0..zl {
                w[x * yl + b.y_prev * zl + z] = e * b.transition(x, z, log_vol[z]);
            }
        }
    }
    let n = s.prefix_dim(level);
    let axes: Vec<Axis> = kernels.source_axes(level).iter().chain(&kernels.full_target_axes()[..n]).cloned().collect();
    GridMeasure::new(axes, w)
}

/// `V_i = H(π ‖ π_{0,i})`.
pub fn level_value(pi: &GridMeasure, pi0: &GridMeasure) -> Result<f64> {
    relative_entropy(pi, pi0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    pub source_tv: f64,
    pub target_tv: f64,
    /// Distance of the `(x_{n_i}, y_{n_{i-1}})` projection to the extension.
    pub projection_tv: Option<f64>,
}

impl AdmissibilityReport {
    pub fn max(&self) -> f64 {
        self.source_tv.max(self.target_tv).max(self.projection_tv.unwrap_or(0.0))
    }
}

/// Marginal and projection residuals of a level-`i` coupling on
/// `x_{n_i} × y_{n_i}`.
pub fn verify_admissible(
    pi: &GridMeasure,
    mu_i: &GridMeasure,
    nu_i: &GridMeasure,
    prev_ext: Option<&GridMeasure>,
) -> Result<AdmissibilityReport> {
    let n = mu_i.dim();
    if pi.dim() != n + nu_i.dim() {
        return Err(Error::GridMismatch("coupling dimension does not match the marginals".into()));
    }
    let src = pi.marginal_leading(n);
    let tgt_keep: Vec<usize> = (n..pi.dim()).collect();
    let tgt = pi.marginal(&tgt_keep);
    src.check_same_grid(mu_i)?;
    tgt.check_same_grid(nu_i)?;
    let projection_tv = match prev_ext {
        Some(ext) => {
            let n_prev = ext.dim() - n;
            let keep: Vec<usize> = (0..n + n_prev).collect();
            let proj = pi.marginal(&keep);
            proj.check_same_grid(ext)?;
            Some(tv_slices(proj.weights(), ext.weights()))
        }
        None => None,
    };
    Ok(AdmissibilityReport {
        source_tv: tv_slices(src.weights(), mu_i.weights()),
        target_tv: tv_slices(tgt.weights(), nu_i.weights()),
        projection_tv,
    })
}

fn random_init(seed: u64, level: usize, prefix: usize, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((level as u64) << 40) ^ prefix as u64);
    (0..len).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn fortet_for(opts: &CascadeOptions, level: usize, prefix: usize, len: usize) -> FortetOptions {
    let mut f = opts.fortet.clone();
    f.init_log_h = match opts.init {
        Init::Zero => None,
        Init::RandomPositive { seed } => Some(random_init(seed, level, prefix, len)),
    };
    f
}

fn check_cascade_inputs(mu: &GridMeasure, nu: &GridMeasure, kernels: &BlockKernelSet) -> Result<()> {
    if !axes_approx_eq(mu.axes(), kernels.full_source_axes()) {
        return Err(Error::GridMismatch("source measure axes differ from the kernel source grid".into()));
    }
    if !axes_approx_eq(nu.axes(), kernels.full_target_axes()) {
        return Err(Error::GridMismatch("target measure axes differ from the kernel target grid".into()));
    }
    Ok(())
}

fn solve_level_one(
    mu: &GridMeasure,
    nu: &GridMeasure,
    kernels: &BlockKernelSet,
    opts: &CascadeOptions,
) -> Result<CascadeLevel> {
    let n = kernels.structure().prefix_dim(1);
    let mu_1 = mu.marginal_leading(n);
    let nu_1 = nu.marginal_leading(n);
    let p1 = kernels.table(1);
    let fopts = fortet_for(opts, 1, 0, nu_1.len());
    let bridge = sfe::solve_bridge(&mu_1, &nu_1, &p1, &fopts)?;
    let reference = sfe::reference_coupling(&mu_1, nu_1.axes(), &p1)?;
    let mut per_prefix = BTreeMap::new();
    per_prefix.insert(
        0,
        PrefixRecord {
            source_mass: 1.0,
            target_mass: 1.0,
            value: bridge.value,
            iterations: bridge.diagnostics.iterations,
            residual: bridge.diagnostics.residual,
            log_h: bridge.potentials.log_h().to_vec(),
            coupling: opts.retain_per_prefix.then(|| bridge.coupling.clone()),
        },
    );
    Ok(CascadeLevel {
        level: 1,
        log_h_table: bridge.potentials.log_h().to_vec(),
        log_h0_table: bridge.potentials.log_h0().to_vec(),
        per_prefix,
        global_coupling: bridge.coupling.clone(),
        reference,
        value: bridge.value,
        value_decomposed: bridge.value,
        extension: None,
        bridge: Some(bridge),
    })
}

/// Solves level `i ≥ 2` given the solved levels `1..i`.
pub fn solve_level(
    levels: &[CascadeLevel],
    mu: &GridMeasure,
    nu: &GridMeasure,
    kernels: &BlockKernelSet,
    level: usize,
    opts: &CascadeOptions,
) -> Result<CascadeLevel> {
    let s = kernels.structure();
    let n = s.prefix_dim(level);
    let nu_i = nu.marginal_leading(n);
    let ext = extend_source(&levels[level - 2].global_coupling, mu, s, level)?;
    let (ypl, zl) = level_target_shape(kernels, level);
    let admissible: Vec<usize> =
        (0..ypl).filter(|&yp| nu_i.weights()[yp * zl..(yp + 1) * zl].iter().sum::<f64>() > 0.0).collect();
    let mut bridges = admissible
        .par_iter()
        .map(|&yp| conditional_bridge(&ext, kernels, &nu_i, level, yp, &fortet_for(opts, level, yp, zl)))
        .collect::<Result<Vec<_>>>()?;

    let mut raw = vec![f64::NEG_INFINITY; ypl * zl];
    for b in &bridges {
        raw[b.y_prev * zl..(b.y_prev + 1) * zl].copy_from_slice(b.potentials.log_h());
    }
    let (log_h_table, shifts) = gauge_fix(&raw, &nu_i, s, level)?;
    let xl = grid_len(kernels.source_axes(level));
    let mut log_h0_table = vec![f64::NEG_INFINITY; xl * ypl];
    for b in &mut bridges {
        let c = shifts[b.y_prev].expect("admissible prefix has a gauge shift");
        b.shift(c);
        for x in 0..xl {
            log_h0_table[x * ypl + b.y_prev] = b.potentials.log_h0()[x] + b.kernel.log_norm[x];
        }
    }

    let mut out = CascadeLevel {
        level,
        log_h_table,
        log_h0_table,
        per_prefix: BTreeMap::new(),
        bridge: None,
        extension: None,
        reference: reference_measure(&ext, kernels, level)?,
        global_coupling: GridMeasure::new(vec![Axis::indices(1)?], vec![1.0])?,
        value: 0.0,
        value_decomposed: 0.0,
    };
    let mut all: Vec<&CascadeLevel> = levels[..level - 1].iter().collect();
    all.push(&out);
    out.global_coupling = assemble_product(&all, mu, kernels, level)?;
    out.value = level_value(&out.global_coupling, &out.reference)?;

    let zvol = cell_volumes(kernels.block_target_axes(level));
    let block_axes: Vec<Axis> =
        kernels.source_axes(level).iter().chain(kernels.block_target_axes(level)).cloned().collect();
    let mut decomposed = 0.0;
    for b in &bridges {
        decomposed += b.source_mass * b.value;
        let coupling = if opts.retain_per_prefix {
            Some(GridMeasure::new(block_axes.clone(), b.coupling_weights(&zvol))?)
        } else {
            None
        };
        out.per_prefix.insert(
            b.y_prev,
            PrefixRecord {
                source_mass: b.source_mass,
                target_mass: nu_i.weights()[b.y_prev * zl..(b.y_prev + 1) * zl].iter().sum(),
                value: b.value,
                iterations: b.diagnostics.iterations,
                residual: b.diagnostics.residual,
                log_h: b.potentials.log_h().to_vec(),
                coupling,
            },
        );
    }
    out.value_decomposed = decomposed;
    out.extension = Some(ext);
    Ok(out)
}

/// Solves every level of the cascade in order.
pub fn solve_cascade(
    mu: &GridMeasure,
    nu: &GridMeasure,
    kernels: &BlockKernelSet,
    opts: &CascadeOptions,
) -> Result<CascadeSolution> {
    check_cascade_inputs(mu, nu, kernels)?;
    let s = kernels.structure();
    let mut levels = vec![solve_level_one(mu, nu, kernels, opts)?];
    for level in 2..=s.depth() {
        let next = solve_level(&levels, mu, nu, kernels, level, opts)?;
        levels.push(next);
    }
    Ok(CascadeSolution { structure: s.clone(), levels })
}

/// A single-bridge instance perturbed by the stability probe.
#[derive(Clone, Debug)]
pub struct BridgeInstance {
    pub mu: GridMeasure,
    pub nu: GridMeasure,
    pub kernel: KernelTable,
}

impl BridgeInstance {
    /// Gibbs kernel `exp(-c(x, y) / t)` with rows normalized against the
    /// target cell volumes.
    pub fn gibbs(mu: GridMeasure, nu: GridMeasure, cost: &[f64], t: f64) -> Result<BridgeInstance> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::NonpositiveTime(t));
        }
        let (rows, cols) = (mu.len(), nu.len());
        if cost.len() != rows * cols || cost.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidKernel(format!("cost needs {} finite entries", rows * cols)));
        }
        let log_vol: Vec<f64> = nu.cell_volumes().iter().map(|v| v.ln()).collect();
        let mut logs = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row: Vec<f64> = cost[r * cols..(r + 1) * cols].iter().map(|c| -c / t).collect();
            let norm = log_sum_exp(row.iter().zip(&log_vol).map(|(a, b)| a + b));
            logs.extend(row.iter().map(|a| a - norm));
        }
        let kernel = KernelTable::from_log_values(rows, cols, logs)?;
        Ok(BridgeInstance { mu, nu, kernel })
    }

    /// Kernel times `1 + ε cos(1.3 j + 0.7 k + 0.5)` (rows renormalized),
    /// marginals mixed as `(1 - ε) m + ε · uniform`.
    pub fn perturbed(&self, eps: f64) -> Result<BridgeInstance> {
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::InvalidOption(format!("perturbation size must lie in [0, 1), got {eps}")));
        }
        let vols = self.nu.cell_volumes();
        let (rows, cols) = (self.kernel.rows(), self.kernel.cols());
        let mut values = Vec::with_capacity(rows * cols);
        for j in 0..rows {
            let row: Vec<f64> = (0..cols)
                .map(|k| {
                    let field = (1.3 * j as f64 + 0.7 * k as f64 + 0.5).cos();
                    self.kernel.value(j, k) * (1.0 + eps * field)
                })
                .collect();
            let mass: f64 = row.iter().zip(&vols).map(|(p, v)| p * v).sum();
            let orig: f64 = (0..cols).map(|k| self.kernel.value(j, k) * vols[k]).sum();
            values.extend(row.iter().map(|p| p * orig / mass));
        }
        let mix = |m: &GridMeasure| {
            let u = 1.0 / m.len() as f64;
            GridMeasure::new(m.axes().to_vec(), m.weights().iter().map(|w| (1.0 - eps) * w + eps * u).collect())
        };
        Ok(BridgeInstance {
            mu: mix(&self.mu)?,
            nu: mix(&self.nu)?,
            kernel: if eps == 0.0 { self.kernel.clone() } else { KernelTable::from_values(rows, cols, &values)? },
        })
    }

    pub fn solve(&self, opts: &FortetOptions) -> Result<BridgeSolution> {
        sfe::solve_bridge(&self.mu, &self.nu, &self.kernel, opts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityReport {
    pub epsilons: Vec<f64>,
    pub tv: Vec<f64>,
    /// Distances strictly decrease as ε shrinks along the given order.
    pub monotone: bool,
}

/// TV distance between the optimal couplings of an instance and its
/// ε-perturbations, for each ε in order.
pub fn stability_probe(instance: &BridgeInstance, epsilons: &[f64], opts: &FortetOptions) -> Result<StabilityReport> {
    let base = instance.solve(opts)?;
    let mut tv = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let sol = instance.perturbed(eps)?.solve(opts)?;
        tv.push(tv_slices(sol.coupling.weights(), base.coupling.weights()));
    }
    let monotone = tv.windows(2).all(|w| w[1] < w[0]);
    Ok(StabilityReport { epsilons: epsilons.to_vec(), tv, monotone })
}

/// Re-gauges level-1 potentials at `argmax f_ν`; exposed for callers that
/// rescale potentials by hand.
pub fn gauge_fix_bridge(pot: &mut Potentials, nu: &GridMeasure) -> Option<usize> {
    apply_gauge(pot, nu.weights(), &nu.cell_volumes())
}
