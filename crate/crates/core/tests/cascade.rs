#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use rand::Rng;
use sbcascade::cascade::{
    assemble_global, assemble_recursive, conditional_bridge, extend_source, gauge_fix, level_value, reference_measure,
    solve_cascade, stability_probe, verify_admissible, BridgeInstance, CascadeOptions, Init,
};
use sbcascade::grid::total_variation;
use sbcascade::oracle::brute_force_cascade;
use sbcascade::sfe::{assemble_coupling, solve_bridge};
use sbcascade::{Axis, BlockStructure, FortetOptions, GridMeasure, Kernel, KernelTable};

fn tight() -> CascadeOptions {
    CascadeOptions { fortet: FortetOptions::with_tol(1e-13), ..CascadeOptions::default() }
}

fn product(a: &GridMeasure, b: &GridMeasure) -> GridMeasure {
    a.product(b)
}

#[test]
fn single_block_equals_plain_bridge_bitwise() {
    let mut r = rng(1);
    let ax = vec![Axis::midpoint(-2.0, 2.0, 5).unwrap(), Axis::midpoint(-1.0, 1.0, 3).unwrap()];
    let mu = random_measure(&mut r, &ax, 0.0);
    let nu = random_measure(&mut r, &ax, 0.2);
    let k = Kernel::gaussian_heat(ax.clone(), ax.clone(), &[1.0, 0.5]).unwrap();
    let s = BlockStructure::new(vec![2]).unwrap();
    let set = k.block_kernels(&s).unwrap();
    let sol = solve_cascade(&mu, &nu, &set, &CascadeOptions::default()).unwrap();
    let plain = solve_bridge(&mu, &nu, &k.dense(), &FortetOptions::default()).unwrap();
    let l1 = sol.level(1);
    assert_eq!(l1.global_coupling.weights(), plain.coupling.weights());
    assert_eq!(l1.value.to_bits(), plain.value.to_bits());
    assert_eq!(l1.log_h_table, plain.potentials.log_h());
    let direct = assemble_global(&sol.levels, &mu, &set, 1).unwrap();
    let via_sfe = assemble_coupling(&mu, nu.axes(), &k.dense(), &plain.potentials).unwrap();
    assert_eq!(direct.weights(), via_sfe.weights());
}

#[test]
fn extension_of_diagonal_coupling_for_product_measure() {
    let ax = unit_axes(2, 2);
    let a = GridMeasure::new(vec![ax[0].clone()], vec![0.4, 0.6]).unwrap();
    let b = GridMeasure::new(vec![ax[1].clone()], vec![0.3, 0.7]).unwrap();
    let mu = product(&a, &b);
    let diag = GridMeasure::new(unit_axes(2, 2), vec![0.4, 0.0, 0.0, 0.6]).unwrap();
    let s = BlockStructure::new(vec![1, 1]).unwrap();
    let ext = extend_source(&diag, &mu, &s, 2).unwrap();
    // ext(x1, x2, y1) = diag(x1, y1) b(x2)
    let expected = [0.4 * 0.3, 0.0, 0.4 * 0.7, 0.0, 0.0, 0.6 * 0.3, 0.0, 0.6 * 0.7];
    for (u, v) in ext.weights().iter().zip(expected) {
        assert!((u - v).abs() < 1e-16);
    }
}

#[test]
fn extension_hand_instance_and_trivial_block() {
    let ax = unit_axes(2, 2);
    let mu = GridMeasure::new(ax.clone(), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let prev = GridMeasure::new(unit_axes(2, 2), vec![0.2, 0.1, 0.25, 0.45]).unwrap();
    let s = BlockStructure::new(vec![1, 1]).unwrap();
    let ext = extend_source(&prev, &mu, &s, 2).unwrap();
    // μ(x2 | x1 = 0) = (1/3, 2/3), μ(x2 | x1 = 1) = (3/7, 4/7)
    let expected = [
        0.2 / 3.0,
        0.1 / 3.0,
        0.4 / 3.0,
        0.2 / 3.0,
        0.25 * 3.0 / 7.0,
        0.45 * 3.0 / 7.0,
        0.25 * 4.0 / 7.0,
        0.45 * 4.0 / 7.0,
    ];
    for (u, v) in ext.weights().iter().zip(expected) {
        assert!((u - v).abs() < 1e-16);
    }
    assert!((ext.total_mass() - 1.0).abs() < 1e-15);

    // second block with a single point: extension is prev with a dummy axis
    let ax1 = vec![Axis::indices(2).unwrap(), Axis::indices(1).unwrap()];
    let mu1 = GridMeasure::new(ax1, vec![0.3, 0.7]).unwrap();
    let ext1 = extend_source(&prev, &mu1, &s, 2).unwrap();
    assert_eq!(ext1.weights(), prev.weights());
    assert_eq!(ext1.dim(), 3);
}

#[test]
fn extension_rejects_unsupported_prefix_mass() {
    let ax = unit_axes(2, 2);
    let mu = GridMeasure::new(ax, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
    let prev = GridMeasure::new(unit_axes(2, 2), vec![0.25, 0.25, 0.25, 0.25]).unwrap();
    let s = BlockStructure::new(vec![1, 1]).unwrap();
    assert!(matches!(extend_source(&prev, &mu, &s, 2), Err(sbcascade::Error::ConditioningOnNull { .. })));
}

#[test]
fn reference_for_product_kernel_is_ext_times_factor() {
    let ax = vec![Axis::midpoint(-1.0, 1.0, 3).unwrap(), Axis::midpoint(-1.0, 1.0, 4).unwrap()];
    let k = Kernel::gaussian_heat(ax.clone(), ax.clone(), &[1.0, 0.4]).unwrap();
    let s = BlockStructure::new(vec![1, 1]).unwrap();
    let set = k.block_kernels(&s).unwrap();
    let mut r = rng(3);
    let ext = random_measure(&mut r, &[ax[0].clone(), ax[1].clone(), ax[0].clone()], 0.0);
    let pi0 = reference_measure(&ext, &set, 2).unwrap();
    let factor = Kernel::gaussian_heat(vec![ax[1].clone()], vec![ax[1].clone()], &[0.4]).unwrap();
    let vol = ax[1].volumes();
    for x1 in 0..3 {
        for x2 in 0..4 {
            for y1 in 0..3 {
                for y2 in 0..4 {
                    let w = pi0.weights()[(x1 * 4 + x2) * 12 + y1 * 4 + y2];
                    let e = ext.weights()[(x1 * 4 + x2) * 3 + y1];
                    let expect = e * factor.log_density(x2, y2).exp() * vol[y2];
                    assert!((w - expect).abs() < 1e-15);
                }
            }
        }
    }
    assert!((pi0.total_mass() - 1.0).abs() < 1e-14);
}

#[test]
fn reference_hand_tabulated_instance() {
    let ax = unit_axes(2, 2);
    let values: Vec<f64> =
        [[0.1, 0.2, 0.3, 0.4], [0.2, 0.1, 0.4, 0.3], [0.25, 0.05, 0.2, 0.5], [0.1, 0.2, 0.5, 0.2]].concat();
    let k = Kernel::tabulated(ax.clone(), ax.clone(), &values).unwrap();
    let set = k.block_kernels(&BlockStructure::new(vec![1, 1]).unwrap()).unwrap();
    let ext = GridMeasure::new(unit_axes(3, 2), vec![0.1, 0.05, 0.15, 0.2, 0.0, 0.25, 0.1, 0.15]).unwrap();
    let pi0 = reference_measure(&ext, &set, 2).unwrap();
    // x = (1, 0), y_prev = 1: ext = 0.25, conditional row = (0.2, 0.7) / 0.7 .. row 2 entries 2,3
    let x = 2;
    let row = [0.2, 0.5];
    let norm = 0.7;
    for z in 0..2 {
        let expect = 0.25 * row[z] / norm;
        assert!((pi0.weights()[x * 4 + 2 + z] - expect).abs() < 1e-16);
    }
    assert_eq!(pi0.weights()[x * 4], 0.0);
}

#[test]
fn product_case_conditionals_identical_across_prefixes() {
    let ax = vec![Axis::midpoint(-2.0, 2.0, 5).unwrap(), Axis::midpoint(-2.0, 2.0, 4).unwrap()];
    let mut r = rng(5);
    let a = random_measure(&mut r, &ax[..1], 0.0);
    let b = random_measure(&mut r, &ax[1..], 0.0);
    let c = random_measure(&mut r, &ax[..1], 0.0);
    let d = random_measure(&mut r, &ax[1..], 0.0);
    let (mu, nu) = (product(&a, &b), product(&c, &d));
    let k = Kernel::gaussian_heat(ax.clone(), ax.clone(), &[1.0, 1.0]).unwrap();
    let s = BlockStructure::new(vec![1, 1]).unwrap();
    let set = k.block_kernels(&s).unwrap();
    let sol = solve_cascade(&mu, &nu, &set, &tight()).unwrap();
    let l2 = sol.level(2);
    let h = l2.h_table();
    for y1 in 1..5 {
        for z in 0..4 {
            let rel = (h[y1 * 4 + z] - h[z]).abs() / h[z];
            assert!(rel < 1e-6, "{rel}");
        }
    }
    // global coupling is the product of the two 1-D bridges
    let b1 = solve_bridge(&a, &c, &set.table(1), &FortetOptions::with_tol(1e-13)).unwrap();
    let f2 = Kernel::gaussian_heat(ax[1..].to_vec(), ax[1..].to_vec(), &[1.0]).unwrap();
    let b2 = solve_bridge(&b, &d, &f2.dense(), &FortetOptions::with_tol(1e-13)).unwrap();
    let mut expect = Vec::new();
    for x1 in 0..5 {
        for x2 in 0..4 {
            for y1 in 0..5 {
                for y2 in 0..4 {
                    expect.push(b1.coupling.weights()[x1 * 5 + y1] * b2.coupling.weights()[x2 * 4 + y2]);
                }
            }
        }
    }
    assert!(tv(l2.global_coupling.weights(), &expect) < 1e-8);
}

#[test]
fn already_optimal_conditional_has_constant_h() {
    // ν = kernel pushforward of μ, so the reference is optimal at every level
    let ax = unit_axes(2, 2);
    let mut r = rng(6);
    let s = BlockStructure::new(vec![1, 1]).unwrap();
    let k = triangular_kernel(&mut r, &ax, &ax, &s);
    let mu = random_measure(&mut r, &ax, 0.0);
    let p = k.dense();
    let nu_w: Vec<f64> = (0..4).map(|y| (0..4).map(|x| mu.weights()[x] * p.value(x, y)).sum()).collect();
    let nu = GridMeasure::new(ax.clone(), nu_w).unwrap();
    let set = k.block_kernels(&s).unwrap();
    let sol = solve_cascade(&mu, &nu, &set, &tight()).unwrap();
    for l in &sol.levels {
        for h in l.h_table() {
            assert!((h - 1.0).abs() < 1e-9, "{h}");
        }
        assert!(l.value.abs() < 1e-12);
        assert!(tv(l.global_coupling.weights(), l.reference.weights()) < 1e-12);
    }
}

#[test]
fn gauge_fix_indicator_and_rescaling() {
    let ax = unit_axes(2, 3);
    // one admissible y per prefix, prefix 2 inadmissible
    let nu = GridMeasure::new(ax.clone(), vec![0.0, 0.5, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let s = BlockStructure::new(vec![1, 1]).unwrap();
    let raw = vec![0.3, -1.2, 0.5, 2.0, 0.1, 0.0, 0.0, 0.0, 0.0];
    let (fixed, shifts) = gauge_fix(&raw, &nu, &s, 2).unwrap();
    let h: Vec<f64> = fixed.iter().map(|v| v.exp()).collect();
    assert_eq!(h, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert!(shifts[2].is_none());

    let mut r = rng(8);
    let nu = random_measure(&mut r, &ax, 0.2);
    let raw: Vec<f64> = (0..9).map(|_| r.random_range(-1.0..1.0)).collect();
    let (a, _) = gauge_fix(&raw, &nu, &s, 2).unwrap();
    let scaled: Vec<f64> = raw.iter().map(|v| v + 7f64.ln()).collect();
    let (b, _) = gauge_fix(&scaled, &nu, &s, 2).unwrap();
    // per-prefix rescaling by arbitrary positive functions of y_prev
    let per: Vec<f64> = raw.iter().enumerate().map(|(k, v)| v + [0.3, -2.0, 5.0][k / 3]).collect();
    let (c, _) = gauge_fix(&per, &nu, &s, 2).unwrap();
    for k in 0..9 {
        for other in [b[k], c[k]] {
            if a[k] == f64::NEG_INFINITY {
                assert_eq!(other, f64::NEG_INFINITY);
            } else {
                assert!((a[k].exp() - other.exp()).abs() <= 1e-12 * a[k].exp());
            }
        }
    }
}

#[test]
fn random_initializations_agree_after_gauge() {
    let ax = unit_axes(3, 3);
    let mut r = rng(9);
    let s = BlockStructure::new(vec![1, 1, 1]).unwrap();
    let k = triangular_kernel(&mut r, &ax, &ax, &s);
    let mu = random_measure(&mut r, &ax, 0.0);
    let nu = random_measure(&mut r, &ax, 0.15);
    let set = k.block_kernels(&s).unwrap();
    let a = solve_cascade(&mu, &nu, &set, &tight()).unwrap();
    let mut opts = tight();
    opts.init = Init::RandomPositive { seed: 77 };
    let b = solve_cascade(&mu, &nu, &set, &opts).unwrap();
    for (la, lb) in a.levels.iter().zip(&b.levels) {
        for (u, v) in la.h_table().iter().zip(lb.h_table()) {
            assert!((u - v).abs() <= 1e-6 * u.abs().max(1e-300), "{u} {v}");
        }
        assert!(tv(la.global_coupling.weights(), lb.global_coupling.weights()) < 1e-8);
    }
}

#[test]
fn assembly_routes_agree_and_values_decompose() {
    for (seed, blocks) in [(10u64, vec![1, 1]), (11, vec![1, 1, 1]), (12, vec![1, 2])] {
        let mut r = rng(seed);
        let d: usize = blocks.iter().sum();
        let ax = unit_axes(d, 3);
        let s = BlockStructure::new(blocks).unwrap();
        let k = triangular_kernel(&mut r, &ax, &ax, &s);
        let mu = random_measure(&mut r, &ax, 0.1);
        let nu = random_measure(&mut r, &ax, 0.2);
        let set = k.block_kernels(&s).unwrap();
        let sol = solve_cascade(&mu, &nu, &set, &tight()).unwrap();
        for level in 2..=s.depth() {
            let l = sol.level(level);
            let ext = l.extension.as_ref().unwrap();
            let nu_i = nu.marginal_leading(s.prefix_dim(level));
            let (ypl, zl) = (ext.len() / sbcascade::grid::grid_len(set.source_axes(level)), nu_i.len());
            let zl = zl / ypl;
            let bridges: Vec<_> = (0..ypl)
                .filter(|&yp| nu_i.weights()[yp * zl..(yp + 1) * zl].iter().sum::<f64>() > 0.0)
                .map(|yp| conditional_bridge(ext, &set, &nu_i, level, yp, &FortetOptions::with_tol(1e-13)).unwrap())
                .collect();
            let rec = assemble_recursive(ext, &bridges, &set, level).unwrap();
            let diff =
                rec.weights().iter().zip(l.global_coupling.weights()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "level {level}: {diff}");
            assert!((l.value - l.value_decomposed).abs() < 1e-9);
            let nu_prev = nu.marginal_leading(s.prefix_dim(level - 1));
            let chain: f64 = l.per_prefix.iter().map(|(yp, rec)| nu_prev.weights()[*yp] * rec.value).sum();
            assert!((l.value - chain).abs() < 1e-9);
            let keys: Vec<usize> = l.per_prefix.keys().copied().collect();
            let expect: Vec<usize> = (0..ypl).filter(|&yp| nu_prev.weights()[yp] > 0.0).collect();
            assert_eq!(keys, expect);
        }
    }
}

#[test]
fn cascade_matches_oracle_and_is_admissible() {
    for seed in 20..26u64 {
        let mut r = rng(seed);
        let blocks = if seed % 2 == 0 { vec![1, 1] } else { vec![1, 1, 1] };
        let d: usize = blocks.iter().sum();
        let ax = unit_axes(d, 2);
        let s = BlockStructure::new(blocks).unwrap();
        let k = triangular_kernel(&mut r, &ax, &ax, &s);
        let mu = random_measure(&mut r, &ax, 0.0);
        let nu = random_measure(&mut r, &ax, 0.0);
        let set = k.block_kernels(&s).unwrap();
        let sol = solve_cascade(&mu, &nu, &set, &tight()).unwrap();
        let oracle = brute_force_cascade(&mu, &nu, &k, &s).unwrap();
        for (i, (l, o)) in sol.levels.iter().zip(&oracle).enumerate() {
            assert!(tv(l.global_coupling.weights(), &o.coupling) < 1e-10);
            assert!((l.value - o.value).abs() < 1e-10);
            let n = s.prefix_dim(i + 1);
            let rep = verify_admissible(
                &l.global_coupling,
                &mu.marginal_leading(n),
                &nu.marginal_leading(n),
                l.extension.as_ref(),
            )
            .unwrap();
            assert!(rep.max() < 1e-12, "{rep:?}");
            assert!(level_value(&l.reference, &l.reference).unwrap() == 0.0);
        }
    }
}

#[test]
fn admissibility_counterexamples() {
    let ax = unit_axes(2, 3);
    let mut r = rng(30);
    let s = BlockStructure::new(vec![1, 1]).unwrap();
    let k = triangular_kernel(&mut r, &ax, &ax, &s);
    let mu = random_measure(&mut r, &ax, 0.0);
    let nu = random_measure(&mut r, &ax, 0.0);
    let set = k.block_kernels(&s).unwrap();
    let sol = solve_cascade(&mu, &nu, &set, &tight()).unwrap();
    let l2 = sol.level(2);
    let ext = l2.extension.as_ref().unwrap();
    let indep = mu.product(&nu);
    let rep = verify_admissible(&indep, &mu, &nu, Some(ext)).unwrap();
    assert!(rep.source_tv < 1e-15 && rep.target_tv < 1e-15);
    assert!(rep.projection_tv.unwrap() > 1e-3);
    let rep = verify_admissible(&l2.reference, &mu, &nu, Some(ext)).unwrap();
    assert!(rep.source_tv < 1e-12);
    assert!(rep.projection_tv.unwrap() < 1e-12);
    assert!(rep.target_tv > 1e-3);
}

#[test]
fn feasible_extension_coupling_upper_bounds_value() {
    // ext(x, y_prev) ⊗ ν_i(· | y_prev) is admissible at level i
    let ax = unit_axes(2, 3);
    let mut r = rng(31);
    let s = BlockStructure::new(vec![1, 1]).unwrap();
    let k = triangular_kernel(&mut r, &ax, &ax, &s);
    let mu = random_measure(&mut r, &ax, 0.0);
    let nu = random_measure(&mut r, &ax, 0.0);
    let set = k.block_kernels(&s).unwrap();
    let sol = solve_cascade(&mu, &nu, &set, &tight()).unwrap();
    let l2 = sol.level(2);
    let ext = l2.extension.as_ref().unwrap();
    let mut w = vec![0.0; 81];
    for x in 0..9 {
        for yp in 0..3 {
            let row = &nu.weights()[yp * 3..yp * 3 + 3];
            let m: f64 = row.iter().sum();
            for z in 0..3 {
                w[x * 9 + yp * 3 + z] = ext.weights()[x * 3 + yp] * row[z] / m;
            }
        }
    }
    let pi = GridMeasure::new(l2.global_coupling.axes().to_vec(), w).unwrap();
    let v = level_value(&pi, &l2.reference).unwrap();
    assert!(v.is_finite());
    assert!(v >= l2.value - 1e-12);
}

fn golden_instance() -> BridgeInstance {
    let e = (-1.0f64).exp();
    let z = 1.0 + e;
    let p = KernelTable::from_values(2, 2, &[1.0 / z, e / z, e / z, 1.0 / z]).unwrap();
    let m = GridMeasure::new(unit_axes(1, 2), vec![0.5, 0.5]).unwrap();
    BridgeInstance { mu: m.clone(), nu: m, kernel: p }
}

#[test]
fn stability_probe_shape() {
    let inst = golden_instance();
    let opts = FortetOptions::with_tol(1e-14);
    let zero = stability_probe(&inst, &[0.0], &opts).unwrap();
    assert_eq!(zero.tv, vec![0.0]);
    let rep = stability_probe(&inst, &[1e-1, 1e-2, 1e-3], &opts).unwrap();
    assert!(rep.monotone, "{rep:?}");
    // perturbed instance stays a valid bridge instance
    let p = inst.perturbed(0.1).unwrap();
    assert!((p.mu.total_mass() - 1.0).abs() < 1e-15);
    let rows = p.kernel.row_integrals(&[1.0, 1.0]);
    assert!(rows.iter().all(|m| (m - 1.0).abs() < 1e-15));
}

#[test]
fn total_variation_between_solutions_of_different_tolerances_is_small() {
    let ax = vec![Axis::midpoint(-3.0, 3.0, 8).unwrap()];
    let mut r = rng(40);
    let mu = random_measure(&mut r, &ax, 0.0);
    let nu = random_measure(&mut r, &ax, 0.0);
    let p = Kernel::gaussian_heat(ax.clone(), ax.clone(), &[0.5]).unwrap().dense();
    let a = solve_bridge(&mu, &nu, &p, &FortetOptions::with_tol(1e-8)).unwrap();
    let b = solve_bridge(&mu, &nu, &p, &FortetOptions::with_tol(1e-13)).unwrap();
    assert!(total_variation(&a.coupling, &b.coupling).unwrap() < 1e-7);
}
