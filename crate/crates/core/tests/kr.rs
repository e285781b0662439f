mod common;

use sbcascade::io::Density;
use sbcascade::kr::{
    conditional_cdf, kr_coupling, kr_map, map_deviation, pushforward_check, telescoping_errors, zero_noise_ladder,
};
use sbcascade::{Axis, FortetOptions, GridMeasure};

fn gaussian_on_own_box(mean: [f64; 2], sd: [f64; 2], n: usize) -> GridMeasure {
    let axes: Vec<Axis> =
        (0..2).map(|a| Axis::midpoint(mean[a] - 6.0 * sd[a], mean[a] + 6.0 * sd[a], n).unwrap()).collect();
    Density::gaussian(mean.to_vec(), vec![sd[0] * sd[0], sd[1] * sd[1]]).discretize(&axes).unwrap()
}

#[test]
fn gaussian_pushforward_on_200_point_axes() {
    let p0 = gaussian_on_own_box([0.0, 0.0], [1.0, 1.0], 200);
    let p1 = gaussian_on_own_box([0.5, -1.0], [0.8, 1.4], 200);
    let map = kr_map(&p0, &p1).unwrap();
    assert!(map.is_monotone());
    let tv = pushforward_check(&p0, &map, &p1).unwrap();
    assert!(tv <= 0.02, "{tv}");
    for e in telescoping_errors(&p0, &map, &p1).unwrap() {
        assert!(e <= 0.02);
    }
    let same = pushforward_check(&p0, &kr_map(&p0, &p0).unwrap(), &p0).unwrap();
    assert!(same <= 0.005, "{same}");
}

#[test]
fn triangular_map_on_correlated_target() {
    // non-product target with the first marginal of p0, so T_1 is the identity
    // and T_2 must depend on the first coordinate
    let n = 60;
    let ax = vec![Axis::midpoint(-5.0, 5.0, n).unwrap(), Axis::midpoint(-5.0, 5.0, n).unwrap()];
    let p0 = Density::gaussian(vec![0.0, 0.0], vec![1.0, 1.0]).discretize(&ax).unwrap();
    let m0 = p0.marginal_leading(1);
    let corr = Density::CorrelatedGaussian { mean: vec![0.0, 0.0], cov: vec![vec![1.0, 0.7], vec![0.7, 1.0]] }
        .discretize(&ax)
        .unwrap();
    let mut w = Vec::with_capacity(n * n);
    for i in 0..n {
        let row = &corr.weights()[i * n..(i + 1) * n];
        let mass: f64 = row.iter().sum();
        w.extend(row.iter().map(|v| m0.weights()[i] * v / mass));
    }
    let p1 = GridMeasure::new(ax, w).unwrap();
    let map = kr_map(&p0, &p1).unwrap();
    assert!(map.is_monotone());
    for i in 0..n {
        assert_eq!(map.component(1, i), Some(i));
    }
    let lo = map.image(20 * n + 30).unwrap()[1];
    let hi = map.image(40 * n + 30).unwrap()[1];
    assert!(hi > lo, "positive correlation raises T_2 with x_1");
    let errs = telescoping_errors(&p0, &map, &p1).unwrap();
    assert!(errs[0] < 1e-12, "{errs:?}");
    let c = kr_coupling(&p0, &map).unwrap();
    assert!(common::tv(c.marginal_leading(2).weights(), p0.weights()) < 1e-15);
    assert_eq!(map_deviation(&c, &map).unwrap(), 0.0);
}

#[test]
fn conditional_cdf_on_correlated_measure_moves_with_prefix() {
    let ax = vec![Axis::midpoint(-4.0, 4.0, 40).unwrap(), Axis::midpoint(-4.0, 4.0, 40).unwrap()];
    let p = Density::CorrelatedGaussian { mean: vec![0.0, 0.0], cov: vec![vec![1.0, 0.5], vec![0.5, 1.0]] }
        .discretize(&ax)
        .unwrap();
    let low = conditional_cdf(&p, 2, &[10]).unwrap();
    let high = conditional_cdf(&p, 2, &[30]).unwrap();
    assert!(low.values().iter().zip(high.values()).all(|(a, b)| a >= b));
}

#[test]
fn zero_noise_ladder_concentrates_on_the_monotone_map() {
    let ax = vec![Axis::midpoint(-6.0, 6.0, 200).unwrap()];
    let mu = Density::gaussian(vec![0.0], vec![1.0]).discretize(&ax).unwrap();
    let nu = Density::gaussian(vec![1.0], vec![0.25]).discretize(&ax).unwrap();
    let report = zero_noise_ladder(&mu, &nu, &[1.0, 0.1, 0.01], &FortetOptions::default()).unwrap();
    assert!(report.decreasing, "{report:?}");
}
