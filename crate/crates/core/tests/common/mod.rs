#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbcascade::grid::{cell_volumes, grid_len, unravel};
use sbcascade::{Axis, BlockStructure, GridMeasure, Kernel, KernelTable};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_axes(d: usize, n: usize) -> Vec<Axis> {
    (0..d).map(|_| Axis::indices(n).unwrap()).collect()
}

/// Positive random weights, each cell zeroed with probability `zero_prob`
/// (at least one cell stays positive).
pub fn random_measure(rng: &mut ChaCha8Rng, axes: &[Axis], zero_prob: f64) -> GridMeasure {
    let n = grid_len(axes);
    let mut w: Vec<f64> =
        (0..n).map(|_| if rng.random::<f64>() < zero_prob { 0.0 } else { rng.random_range(0.05..1.0) }).collect();
    if w.iter().all(|v| *v == 0.0) {
        w[rng.random_range(0..n)] = 1.0;
    }
    GridMeasure::new(axes.to_vec(), w).unwrap().normalize().unwrap()
}

pub fn random_table(rng: &mut ChaCha8Rng, rows: usize, target_volumes: &[f64]) -> KernelTable {
    let cols = target_volumes.len();
    let mut v = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f64> = (0..cols).map(|_| rng.random_range(0.05..1.0)).collect();
        let m: f64 = row.iter().zip(target_volumes).map(|(a, b)| a * b).sum();
        v.extend(row.iter().map(|a| a / m));
    }
    KernelTable::from_values(rows, cols, &v).unwrap()
}

/// Dense kernel `p(x, y) = Π_j q_j(y_block_j | x_{n_j}, y_{n_{j-1}})` with
/// random positive factors, so every block marginal depends only on its
/// source prefix.
pub fn triangular_kernel(rng: &mut ChaCha8Rng, source: &[Axis], target: &[Axis], s: &BlockStructure) -> Kernel {
    let depth = s.depth();
    let mut factors = Vec::new();
    for j in 1..=depth {
        let xl = grid_len(&source[..s.prefix_dim(j)]);
        let ypl = grid_len(&target[..s.prefix_dim(j - 1)]);
        let zvol = cell_volumes(&target[s.block_range(j)]);
        factors.push(random_table(rng, xl * ypl, &zvol));
    }
    let xl = grid_len(source);
    let yl = grid_len(target);
    let tdims: Vec<usize> = target.iter().map(Axis::len).collect();
    let mut yi = vec![0; tdims.len()];
    let mut values = Vec::with_capacity(xl * yl);
    for x in 0..xl {
        for y in 0..yl {
            unravel(y, &tdims, &mut yi);
            let mut p = 1.0;
            for j in 1..=depth {
                let (n, np) = (s.prefix_dim(j), s.prefix_dim(j - 1));
                let xj = x / grid_len(&source[n..]);
                let ypl = grid_len(&target[..np]);
                let yp = y / grid_len(&target[np..]);
                let z = (y / grid_len(&target[n..])) % grid_len(&target[np..n]);
                p *= factors[j - 1].value(xj * ypl + yp, z);
            }
            values.push(p);
        }
    }
    Kernel::tabulated(source.to_vec(), target.to_vec(), &values).unwrap()
}

pub fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// μ = N(0, 0.6 I) and a correlated ν on a shared `n × n` grid over `[-6, 6]²`.
pub fn bernstein_instance(n: usize) -> (GridMeasure, GridMeasure) {
    use sbcascade::io::Density;
    let ax = vec![Axis::midpoint(-6.0, 6.0, n).unwrap(), Axis::midpoint(-6.0, 6.0, n).unwrap()];
    let mu = Density::gaussian(vec![0.0, 0.0], vec![0.6, 0.6]).discretize(&ax).unwrap();
    let nu = Density::CorrelatedGaussian { mean: vec![0.5, -0.3], cov: vec![vec![1.2, 0.5], vec![0.5, 1.0]] }
        .discretize(&ax)
        .unwrap();
    (mu, nu)
}
