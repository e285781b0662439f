//! Subcommand bodies. Each returns the `result` section of the summary and
//! writes its CSV artifacts through `Output`.

use std::io::Write;

use sbcascade::bernstein::{dyadic_times, weighted_chi_square, BernsteinModel};
use sbcascade::cascade::{solve_cascade, stability_probe, verify_admissible, BridgeInstance, CascadeSolution};
use sbcascade::grid::{relative_entropy, tv_slices};
use sbcascade::io::{write_grid_values, write_measure_csv, AxisSpec};
use sbcascade::kr::{kr_map, pushforward_check, pushforward_prefix, telescoping_errors, zero_noise_ladder};
use sbcascade::oracle::{brute_force_bridge, brute_force_cascade, feasible_samples, FeasibleFamily, OracleLevel};
use sbcascade::sfe::{reference_coupling, solve_bridge};
use sbcascade::{Axis, BridgeSolution, Error, GridMeasure};
use serde_json::{json, Value};

use crate::config::{KernelConfig, Problem};
use crate::error::CliError;
use crate::output::Output;

type Outcome = Result<Value, CliError>;

fn write_coupling(out: &mut Output, name: &str, m: &GridMeasure) -> Result<(), CliError> {
    out.csv(name, |w| write_measure_csv(w, m))
}

fn write_potential(out: &mut Output, name: &str, axes: &[Axis], h: &[f64]) -> Result<(), CliError> {
    out.csv(name, |w| write_grid_values(w, axes, h, "h"))
}

fn bridge_summary(s: &BridgeSolution, p: &Problem) -> Value {
    let (source_tv, target_tv) = s.marginal_errors(&p.mu, &p.nu);
    json!({
        "value": s.value,
        "iterations": s.diagnostics.iterations,
        "residual": s.diagnostics.residual,
        "marginal_errors": {"source_tv": source_tv, "target_tv": target_tv},
        "h": s.potentials.h(),
        "h0": s.potentials.h0(),
    })
}

/// Smallest `H(sample ‖ reference) - value`, or `None` when the feasible
/// polytope is a single point.
fn certify(
    family: &FeasibleFamily,
    reference: &GridMeasure,
    value: f64,
    n: usize,
    seed: u64,
) -> Result<Option<f64>, CliError> {
    let samples = match feasible_samples(family, n, seed) {
        Err(Error::EmptyInterior) => return Ok(None),
        other => other?,
    };
    let mut margin = f64::INFINITY;
    for w in samples {
        let pi = GridMeasure::new(reference.axes().to_vec(), w)?;
        margin = margin.min(relative_entropy(&pi, reference)? - value);
    }
    Ok(Some(margin))
}

fn certification_json(margin: Option<f64>, samples: usize) -> Value {
    match margin {
        Some(m) => json!({"samples": samples, "min_margin": m, "certified": m >= -1e-9}),
        None => json!({"samples": 0, "single_point_polytope": true, "certified": true}),
    }
}

fn bridge_oracle(p: &Problem, s: &BridgeSolution) -> Outcome {
    let table = p.kernel.dense();
    let o = brute_force_bridge(&p.mu, &p.nu, &table.values())?;
    let reference = reference_coupling(&p.mu, p.nu.axes(), &table)?;
    let family = FeasibleFamily::bridge(p.mu.weights(), p.nu.weights());
    let n = p.config.oracle.feasible_samples;
    let margin = if n == 0 { None } else { certify(&family, &reference, s.value, n, p.config.seed)? };
    Ok(json!({
        "oracle_value": o.value,
        "value_gap": (s.value - o.value).abs(),
        "coupling_tv": tv_slices(s.coupling.weights(), &o.coupling),
        "oracle_sweeps": o.sweeps,
        "certification": certification_json(margin, n),
    }))
}

pub fn bridge(p: &Problem, out: &mut Output) -> Outcome {
    let table = p.kernel.dense();
    let s = solve_bridge(&p.mu, &p.nu, &table, &p.fortet())?;
    write_coupling(out, "coupling.csv", &s.coupling)?;
    write_potential(out, "potentials.csv", p.nu.axes(), &s.potentials.h())?;
    let mut result = bridge_summary(&s, p);
    if p.config.flags.oracle_comparison {
        result["oracle"] = bridge_oracle(p, &s)?;
    }
    if p.config.flags.stability_probe {
        let inst = BridgeInstance { mu: p.mu.clone(), nu: p.nu.clone(), kernel: table };
        result["stability"] = serde_json::to_value(stability_probe(&inst, &p.config.stability.epsilons, &p.fortet())?)
            .map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(result)
}

fn solve_full_cascade(p: &Problem) -> Result<CascadeSolution, CliError> {
    let set = p.kernel.block_kernels(&p.structure)?;
    Ok(solve_cascade(&p.mu, &p.nu, &set, &p.cascade_options())?)
}

fn level_oracle(l: &sbcascade::cascade::CascadeLevel, o: &OracleLevel) -> Value {
    json!({
        "oracle_value": o.value,
        "value_gap": (l.value - o.value).abs(),
        "coupling_tv": tv_slices(l.global_coupling.weights(), &o.coupling),
    })
}

pub fn cascade(p: &Problem, out: &mut Output) -> Outcome {
    let sol = solve_full_cascade(p)?;
    let oracle = if p.config.flags.oracle_comparison {
        Some(brute_force_cascade(&p.mu, &p.nu, &p.kernel, &p.structure)?)
    } else {
        None
    };
    let mut levels = Vec::new();
    for l in &sol.levels {
        let i = l.level;
        let n = p.structure.prefix_dim(i);
        let rep = verify_admissible(
            &l.global_coupling,
            &p.mu.marginal_leading(n),
            &p.nu.marginal_leading(n),
            l.extension.as_ref(),
        )?;
        write_coupling(out, &format!("level{i}_coupling.csv"), &l.global_coupling)?;
        write_potential(out, &format!("level{i}_h.csv"), &p.nu.axes()[..n], &l.h_table())?;
        let mut entry = json!({
            "level": i,
            "value": l.value,
            "value_decomposed": l.value_decomposed,
            "max_residual": l.max_residual(),
            "admissibility": rep,
            "prefixes": l.per_prefix.len(),
        });
        if p.config.flags.retain_per_prefix {
            entry["per_prefix"] = serde_json::to_value(&l.per_prefix).map_err(|e| CliError::Io(e.to_string()))?;
            for (yp, rec) in &l.per_prefix {
                if let Some(c) = &rec.coupling {
                    write_coupling(out, &format!("level{i}_prefix{yp}_coupling.csv"), c)?;
                }
            }
        }
        if let Some(o) = &oracle {
            entry["oracle"] = level_oracle(l, &o[i - 1]);
        }
        levels.push(entry);
    }
    Ok(json!({"blocks": p.structure.block_dims(), "values": sol.values(), "levels": levels}))
}

pub fn oracle(p: &Problem, out: &mut Output) -> Outcome {
    let n = p.config.oracle.feasible_samples;
    if p.structure.depth() == 1 {
        let table = p.kernel.dense();
        let s = solve_bridge(&p.mu, &p.nu, &table, &p.fortet())?;
        let o = brute_force_bridge(&p.mu, &p.nu, &table.values())?;
        let oracle_coupling = GridMeasure::new(s.coupling.axes().to_vec(), o.coupling)?;
        write_coupling(out, "oracle_coupling.csv", &oracle_coupling)?;
        return Ok(json!({"levels": [bridge_oracle(p, &s)?]}));
    }
    let sol = solve_full_cascade(p)?;
    let oracle = brute_force_cascade(&p.mu, &p.nu, &p.kernel, &p.structure)?;
    let mut levels = Vec::new();
    for (l, o) in sol.levels.iter().zip(oracle) {
        let i = l.level;
        let k = p.structure.prefix_dim(i);
        let nu_i = p.nu.marginal_leading(k);
        let family = match &l.extension {
            None => FeasibleFamily::bridge(p.mu.marginal_leading(k).weights(), nu_i.weights()),
            Some(ext) => {
                let block_len = sbcascade::grid::grid_len(&p.nu.axes()[p.structure.block_range(i)]);
                FeasibleFamily::cascade_level(ext.weights(), nu_i.weights(), block_len)
            }
        };
        let margin = if n == 0 {
            None
        } else {
            certify(&family, &l.reference, l.value, n, p.config.seed.wrapping_add(i as u64))?
        };
        let mut entry = level_oracle(l, &o);
        entry["level"] = json!(i);
        entry["certification"] = certification_json(margin, n);
        let oracle_coupling = GridMeasure::new(l.global_coupling.axes().to_vec(), o.coupling)?;
        write_coupling(out, &format!("level{i}_oracle_coupling.csv"), &oracle_coupling)?;
        levels.push(entry);
    }
    Ok(json!({"levels": levels}))
}

pub fn kr(p: &Problem, out: &mut Output) -> Outcome {
    let map = kr_map(&p.mu, &p.nu)?;
    let tv = pushforward_check(&p.mu, &map, &p.nu)?;
    let telescoping = telescoping_errors(&p.mu, &map, &p.nu)?;
    let push = pushforward_prefix(&p.mu, &map, map.dim())?;
    out.csv("kr_map.csv", |w| map.write_csv(w))?;
    write_coupling(out, "pushforward.csv", &push)?;
    Ok(json!({
        "pushforward_tv": tv,
        "telescoping_errors": telescoping,
        "monotone": map.is_monotone(),
    }))
}

fn build_axes(specs: &[AxisSpec]) -> Result<Vec<Axis>, CliError> {
    Ok(specs.iter().map(AxisSpec::build).collect::<sbcascade::Result<Vec<_>>>()?)
}

pub fn bernstein(p: &Problem, out: &mut Output) -> Outcome {
    let unit = match &p.config.kernel {
        KernelConfig::GaussianHeat { variances } => variances.iter().all(|v| *v == 1.0),
        _ => false,
    };
    if p.mu.dim() != 2 || p.nu.dim() != 2 || p.structure.block_dims() != [1, 1] || !unit {
        return Err(CliError::ConfigInvalid(
            "bernstein needs two-dimensional grids, blocks [1, 1] and the unit-variance heat kernel".into(),
        ));
    }
    let cfg = &p.config.bernstein;
    let (model, sol) = BernsteinModel::solve(&p.mu, &p.nu, &p.cascade_options())?;
    let times = dyadic_times(cfg.dyadic_level);
    let ens = model.sample_paths(cfg.paths, &times, p.config.seed)?;
    let end = ens.weighted_positions(times.len() - 1);
    let chi = weighted_chi_square(&p.nu, &end, cfg.chi_square_block, cfg.min_expected_count)?;
    let axes = match &cfg.density_axes {
        Some(specs) => build_axes(specs)?,
        None => p.nu.axes().to_vec(),
    };
    let mut masses = Vec::new();
    for &t in &cfg.density_times {
        let d = model.marginal_density_on(t, &axes)?;
        masses.push(json!({"t": t, "mass": d.total_mass()}));
        write_coupling(out, &format!("density_t{t}.csv"), &d)?;
    }
    if cfg.write_paths {
        out.csv("paths.csv", |w| ens.write_csv(w))?;
    }
    Ok(json!({
        "values": sol.values(),
        "weights": ens.weight_stats(),
        "endpoint_chi_square": chi,
        "density_mass": masses,
    }))
}

pub fn zero_noise(p: &Problem, out: &mut Output) -> Outcome {
    let report = zero_noise_ladder(&p.mu, &p.nu, &p.config.zero_noise.variances, &p.fortet())?;
    out.csv("zero_noise.csv", |mut w| {
        writeln!(w, "variance,deviation,value,iterations")?;
        for k in 0..report.variances.len() {
            writeln!(
                w,
                "{},{},{},{}",
                report.variances[k], report.deviation[k], report.values[k], report.iterations[k]
            )?;
        }
        w.flush()?;
        Ok(())
    })?;
    let map = kr_map(&p.mu, &p.nu)?;
    out.csv("kr_map.csv", |w| map.write_csv(w))?;
    serde_json::to_value(&report).map_err(|e| CliError::Io(e.to_string()))
}
