//! Analytic density descriptors (JSON) and CSV exchange formats.
//!
//! Grid CSV rows are `i0..i{d-1}, x0..x{d-1}, <value>`, one row per cell in
//! flat order. Kernel CSV rows are `source, target, value` with flat indices.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{grid_len, unravel, Axis, BlockStructure, GridMeasure};

/// Midpoint-rule axis description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl AxisSpec {
    pub fn build(&self) -> Result<Axis> {
        Axis::midpoint(self.min, self.max, self.count)
    }
}

/// Named analytic densities, discretized as `f(point) * cell volume` and
/// renormalized on the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Density {
    /// Gaussian with diagonal covariance.
    Gaussian {
        mean: Vec<f64>,
        cov_diag: Vec<f64>,
    },
    /// Gaussian with a full covariance matrix, given by rows.
    CorrelatedGaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    /// Uniform on the box `[lo, hi]`.
    Uniform {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    Mixture {
        components: Vec<Density>,
        weights: Vec<f64>,
    },
    /// Explicit cell weights in flat order.
    Weights {
        values: Vec<f64>,
    },
}

impl Density {
    pub fn gaussian(mean: Vec<f64>, cov_diag: Vec<f64>) -> Self {
        Density::Gaussian { mean, cov_diag }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidMeasure(m));
        match self {
            Density::Gaussian { mean, cov_diag } => {
                if mean.len() != dim || cov_diag.len() != dim {
                    return bad(format!("gaussian needs {dim} means and variances"));
                }
                if cov_diag.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return bad("gaussian variances must be positive".into());
                }
                Ok(())
            }
            Density::CorrelatedGaussian { mean, cov } => {
                if mean.len() != dim || cov.len() != dim || cov.iter().any(|r| r.len() != dim) {
                    return bad(format!("gaussian needs {dim} means and a {dim}x{dim} covariance"));
                }
                if (0..dim).any(|i| (0..i).any(|j| cov[i][j] != cov[j][i])) {
                    return bad("covariance must be symmetric".into());
                }
                if cholesky(cov).is_none() {
                    return bad("covariance must be positive definite".into());
                }
                Ok(())
            }
            Density::Uniform { lo, hi } => {
                if lo.len() != dim || hi.len() != dim {
                    return bad(format!("uniform box needs {dim} bounds"));
                }
                if lo.iter().zip(hi).any(|(a, b)| !(b > a)) {
                    return bad("uniform box must have hi > lo".into());
                }
                Ok(())
            }
            Density::Mixture { components, weights } => {
                if components.is_empty() || components.len() != weights.len() {
                    return bad("mixture needs matching nonempty components and weights".into());
                }
                if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || !(weights.iter().sum::<f64>() > 0.0) {
                    return bad("mixture weights must be nonnegative with positive sum".into());
                }
                for c in components {
                    if matches!(c, Density::Weights { .. }) {
                        return bad("explicit weights cannot be mixed".into());
                    }
                    c.validate(dim)?;
                }
                Ok(())
            }
            Density::Weights { values } => {
                if values.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    return bad("explicit weights must be nonnegative".into());
                }
                Ok(())
            }
        }
    }

    /// Density value at a point. Not defined for explicit weights.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Density::Gaussian { mean, cov_diag } => x
                .iter()
                .zip(mean)
                .zip(cov_diag)
                .map(|((x, m), v)| (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt())
                .product(),
            Density::CorrelatedGaussian { mean, cov } => {
                let l = cholesky(cov).expect("validated covariance");
                let d = mean.len();
                // forward substitution L v = x - m
                let mut v = vec![0.0; d];
                for i in 0..d {
                    let s: f64 = (0..i).map(|j| l[i][j] * v[j]).sum();
                    v[i] = (x[i] - mean[i] - s) / l[i][i];
                }
                let q: f64 = v.iter().map(|a| a * a).sum();
                let det_sqrt: f64 = (0..d).map(|i| l[i][i]).product();
                (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powf(d as f64 / 2.0) * det_sqrt)
            }
            Density::Uniform { lo, hi } => {
                let inside = x.iter().zip(lo).zip(hi).all(|((x, a), b)| x >= a && x <= b);
                if inside {
                    1.0 / lo.iter().zip(hi).map(|(a, b)| b - a).product::<f64>()
                } else {
                    0.0
                }
            }
            Density::Mixture { components, weights } => {
                let total: f64 = weights.iter().sum();
                components.iter().zip(weights).map(|(c, w)| w / total * c.eval(x)).sum()
            }
            Density::Weights { .. } => f64::NAN,
        }
    }

    /// Normalized grid measure.
    pub fn discretize(&self, axes: &[Axis]) -> Result<GridMeasure> {
        self.validate(axes.len())?;
        let m = match self {
            Density::Weights { values } => GridMeasure::new(axes.to_vec(), values.clone())?,
            _ => GridMeasure::from_density(axes.to_vec(), |x| self.eval(x))?,
        };
        m.normalize()
    }
}

/// Lower Cholesky factor, `None` unless positive definite.
fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0 && d.is_finite()) {
                    return None;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

/// JSON descriptor of a measure: axes, optional block structure, density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureDescriptor {
    pub axes: Vec<AxisSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<BlockStructure>,
    pub density: Density,
}

impl MeasureDescriptor {
    pub fn build(&self) -> Result<GridMeasure> {
        let axes = self.axes.iter().map(AxisSpec::build).collect::<Result<Vec<_>>>()?;
        if let Some(b) = &self.blocks {
            if b.total_dim() != axes.len() {
                return Err(Error::InvalidStructure(format!(
                    "blocks cover {} coordinates but {} axes given",
                    b.total_dim(),
                    axes.len()
                )));
            }
        }
        self.density.discretize(&axes)
    }
}

/// Writes one row per cell: index tuple, coordinates, value.
pub fn write_grid_values<W: Write>(out: W, axes: &[Axis], values: &[f64], value_name: &str) -> Result<()> {
    let d = axes.len();
    let dims: Vec<usize> = axes.iter().map(Axis::len).collect();
    if values.len() != grid_len(axes) {
        return Err(Error::InvalidMeasure("value count does not match grid".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..d).map(|k| format!("i{k}")).collect();
    header.extend((0..d).map(|k| format!("x{k}")));
    header.push(value_name.to_string());
    w.write_record(&header)?;
    let mut idx = vec![0; d];
    for (flat, v) in values.iter().enumerate() {
        unravel(flat, &dims, &mut idx);
        let mut rec: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
        rec.extend((0..d).map(|k| axes[k].points()[idx[k]].to_string()));
        rec.push(v.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_measure_csv<W: Write>(out: W, m: &GridMeasure) -> Result<()> {
    write_grid_values(out, m.axes(), m.weights(), "weight")
}

/// Reads weights for the given axes; missing cells are zero. Coordinates
/// must agree with the axes.
pub fn read_measure_csv<R: Read>(input: R, axes: Vec<Axis>) -> Result<GridMeasure> {
    let d = axes.len();
    let dims: Vec<usize> = axes.iter().map(Axis::len).collect();
    let mut weights = vec![0.0; grid_len(&axes)];
    let mut r = csv::Reader::from_reader(input);
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 2 * d + 1 {
            return Err(Error::InvalidMeasure(format!("expected {} columns, found {}", 2 * d + 1, rec.len())));
        }
        let parse_err = |s: &str| Error::InvalidMeasure(format!("cannot parse '{s}'"));
        let mut idx = Vec::with_capacity(d);
        for k in 0..d {
            let i: usize = rec[k].trim().parse().map_err(|_| parse_err(&rec[k]))?;
            if i >= dims[k] {
                return Err(Error::InvalidMeasure(format!("index {i} out of range on axis {k}")));
            }
            let x: f64 = rec[d + k].trim().parse().map_err(|_| parse_err(&rec[d + k]))?;
            let p = axes[k].points()[i];
            if (x - p).abs() > 1e-9 * (1.0 + p.abs()) {
                return Err(Error::GridMismatch(format!("coordinate {x} does not match grid point {p} on axis {k}")));
            }
            idx.push(i);
        }
        let w: f64 = rec[2 * d].trim().parse().map_err(|_| parse_err(&rec[2 * d]))?;
        weights[crate::grid::ravel(&idx, &dims)] = w;
    }
    GridMeasure::new(axes, weights)
}

/// Reads a dense `rows x cols` kernel from `source, target, value` rows.
/// Every entry must be present.
pub fn read_kernel_csv<R: Read>(input: R, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let mut values = vec![f64::NAN; rows * cols];
    let mut r = csv::Reader::from_reader(input);
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(Error::InvalidKernel("kernel rows need source,target,value".into()));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|_| Error::InvalidKernel(format!("cannot parse '{s}'")))
        };
        let s = parse(&rec[0])? as usize;
        let t = parse(&rec[1])? as usize;
        if s >= rows || t >= cols {
            return Err(Error::InvalidKernel(format!("entry ({s}, {t}) outside {rows}x{cols}")));
        }
        values[s * cols + t] = parse(&rec[2])?;
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidKernel("kernel table has missing entries".into()));
    }
    Ok(values)
}

pub fn write_kernel_csv<W: Write>(out: W, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["source", "target", "value"])?;
    for s in 0..rows {
        for t in 0..cols {
            w.write_record(&[s.to_string(), t.to_string(), values[s * cols + t].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_json_roundtrip_and_build() {
        let text = r#"{
            "axes": [{"min": -3, "max": 3, "count": 12}, {"min": -3, "max": 3, "count": 12}],
            "blocks": [1, 1],
            "density": {"kind": "mixture",
                        "components": [{"kind": "gaussian", "mean": [0, 0], "cov_diag": [1, 1]},
                                       {"kind": "uniform", "lo": [-1, -1], "hi": [1, 1]}],
                        "weights": [0.7, 0.3]}
        }"#;
        let d: MeasureDescriptor = serde_json::from_str(text).unwrap();
        let back: MeasureDescriptor = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
        assert_eq!(d, back);
        let m = d.build().unwrap();
        assert_eq!(m.shape(), vec![12, 12]);
        assert!((m.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_densities_are_rejected() {
        let axes = vec![Axis::midpoint(0.0, 1.0, 4).unwrap()];
        assert!(Density::gaussian(vec![0.0], vec![-1.0]).discretize(&axes).is_err());
        assert!(Density::gaussian(vec![0.0, 1.0], vec![1.0, 1.0]).discretize(&axes).is_err());
        let far = Density::Uniform { lo: vec![5.0], hi: vec![6.0] };
        assert!(matches!(far.discretize(&axes), Err(Error::ZeroMass)));
    }

    #[test]
    fn correlated_gaussian_density() {
        let d = Density::CorrelatedGaussian { mean: vec![0.5, -0.3], cov: vec![vec![1.2, 0.5], vec![0.5, 1.0]] };
        d.validate(2).unwrap();
        // closed form with det = 0.95 and the explicit inverse
        let (u, v): (f64, f64) = (1.0 - 0.5, 0.2 + 0.3);
        let q = (1.0 * u * u - 2.0 * 0.5 * u * v + 1.2 * v * v) / 0.95;
        let expect = (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * 0.95_f64.sqrt());
        assert!((d.eval(&[1.0, 0.2]) - expect).abs() < 1e-15);
        let diag = Density::CorrelatedGaussian { mean: vec![0.0], cov: vec![vec![2.0]] };
        assert!((diag.eval(&[0.7]) - Density::gaussian(vec![0.0], vec![2.0]).eval(&[0.7])).abs() < 1e-16);
        let singular = Density::CorrelatedGaussian { mean: vec![0.0, 0.0], cov: vec![vec![1.0, 1.0], vec![1.0, 1.0]] };
        assert!(singular.validate(2).is_err());
        let asym = Density::CorrelatedGaussian { mean: vec![0.0, 0.0], cov: vec![vec![1.0, 0.1], vec![0.2, 1.0]] };
        assert!(asym.validate(2).is_err());
    }

    #[test]
    fn measure_csv_roundtrip() {
        let axes = vec![Axis::midpoint(0.0, 1.0, 3).unwrap(), Axis::indices(2).unwrap()];
        let m = GridMeasure::new(axes.clone(), vec![0.1, 0.2, 0.0, 0.3, 0.15, 0.25]).unwrap();
        let mut buf = Vec::new();
        write_measure_csv(&mut buf, &m).unwrap();
        let back = read_measure_csv(buf.as_slice(), axes).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn kernel_csv_requires_all_entries() {
        let mut buf = Vec::new();
        write_kernel_csv(&mut buf, 2, 2, &[0.5, 0.5, 0.25, 0.75]).unwrap();
        assert_eq!(read_kernel_csv(buf.as_slice(), 2, 2).unwrap(), vec![0.5, 0.5, 0.25, 0.75]);
        let partial = "source,target,value\n0,0,1.0\n";
        assert!(read_kernel_csv(partial.as_bytes(), 2, 2).is_err());
    }
}
