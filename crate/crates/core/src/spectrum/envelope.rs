//! Convex envelopes of normalized `h` curves across layers.

use serde::Serialize;

use super::SpectrumProfile;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const ENVELOPE_GRID_POINTS: usize = 256;

/// Piecewise-linear function on `[xs[0], xs[n-1]]`, `xs` strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PiecewiseLinear {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() != ys.len() || xs.is_empty() {
            return Err(Error::InvalidArgument(
                "piecewise-linear function needs matching, nonempty knots".into(),
            ));
        }
        if xs.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::InvalidArgument(
                "knots must be strictly increasing".into(),
            ));
        }
        if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("piecewise-linear knots".into()));
        }
        Ok(Self { xs, ys })
    }

    /// Samples `f` on `n` uniform knots of `[0, 1]`.
    pub fn sample(n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let xs = uniform_grid(n);
        let ys = xs.iter().map(|&x| f(x)).collect();
        Self::new(xs, ys)
    }

    /// Linear interpolation, clamped to the end values outside the domain.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let i = self.xs.partition_point(|&k| k <= x) - 1;
        let (x0, x1) = (self.xs[i], self.xs[i + 1]);
        let (y0, y1) = (self.ys[i], self.ys[i + 1]);
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    pub fn is_nonincreasing(&self, tol: f64) -> bool {
        self.ys.windows(2).all(|p| p[1] <= p[0] + tol)
    }

    /// Slopes nondecreasing, up to `tol`.
    pub fn is_convex(&self, tol: f64) -> bool {
        let slopes: Vec<f64> = self
            .xs
            .windows(2)
            .zip(self.ys.windows(2))
            .map(|(x, y)| (y[1] - y[0]) / (x[1] - x[0]))
            .collect();
        slopes.windows(2).all(|s| s[1] >= s[0] - tol)
    }

    /// Smallest `x` in the domain with `f(x) ≤ y` for a nonincreasing `f`;
    /// `None` when even the right end exceeds `y`.
    pub fn generalized_inverse(&self, y: f64) -> Option<f64> {
        if self.ys[0] <= y {
            return Some(self.xs[0]);
        }
        for i in 0..self.xs.len() - 1 {
            let (y0, y1) = (self.ys[i], self.ys[i + 1]);
            if y1 <= y {
                // y0 > y >= y1
                let t = (y0 - y) / (y0 - y1);
                return Some(self.xs[i] + t * (self.xs[i + 1] - self.xs[i]));
            }
        }
        None
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            xs: self.xs.clone(),
            ys: self.ys.iter().map(|y| y * factor).collect(),
        }
    }

    fn area(&self) -> f64 {
        self.xs
            .windows(2)
            .zip(self.ys.windows(2))
            .map(|(x, y)| 0.5 * (y[0] + y[1]) * (x[1] - x[0]))
            .sum()
    }
}

/// Lower and upper convex nonincreasing bounds on the retained layers'
/// normalized curves `ĥ_l(ε) = h_l(ε) / P_l(k_l)`, sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopePair {
    pub lower: PiecewiseLinear,
    pub upper: PiecewiseLinear,
    /// Retained layers over total layers.
    pub coverage_fraction: f64,
    /// Indices (into the input list) of the retained layers.
    pub retained: Vec<usize>,
}

pub(crate) fn uniform_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// `ĥ(ε)` on `grid`.
pub fn normalized_curve<T: Scalar>(p: &SpectrumProfile<T>, grid: &[f64]) -> Vec<f64> {
    let full = p.param_count(p.max_rank()) as f64;
    grid.iter()
        .map(|&eps| p.h_mapping(T::lit(eps)) as f64 / full)
        .collect()
}

/// Builds the envelope pair after dropping the `trim_fraction` of layers whose
/// curves lie farthest (sup distance) from the pointwise median curve.
///
/// `lower` is the greatest convex minorant of the pointwise minimum. `upper`
/// is the tighter (by area) of two convex majorants of the pointwise maximum:
/// its greatest convex minorant lifted by the largest gap, or the constant
/// `max ĥ(0)`.
pub fn envelope<T: Scalar>(
    profiles: &[SpectrumProfile<T>],
    trim_fraction: f64,
) -> Result<EnvelopePair> {
    if profiles.is_empty() {
        return Err(Error::InvalidArgument(
            "envelope of an empty profile list".into(),
        ));
    }
    if !(0.0..0.5).contains(&trim_fraction) {
        return Err(Error::InvalidArgument(format!(
            "trim fraction {trim_fraction} outside [0, 0.5)"
        )));
    }
    let grid = uniform_grid(ENVELOPE_GRID_POINTS);
    let curves: Vec<Vec<f64>> = profiles
        .iter()
        .map(|p| normalized_curve(p, &grid))
        .collect();

    let median: Vec<f64> = (0..grid.len())
        .map(|i| {
            let mut col: Vec<f64> = curves.iter().map(|c| c[i]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = col.len();
            if n % 2 == 1 {
                col[n / 2]
            } else {
                0.5 * (col[n / 2 - 1] + col[n / 2])
            }
        })
        .collect();
    let distance: Vec<f64> = curves
        .iter()
        .map(|c| {
            c.iter()
                .zip(&median)
                .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()))
        })
        .collect();
    let drop = (trim_fraction * curves.len() as f64).floor() as usize;
    let mut by_distance: Vec<usize> = (0..curves.len()).collect();
    by_distance.sort_by(|&a, &b| {
        distance[b]
            .partial_cmp(&distance[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut retained: Vec<usize> = by_distance[drop..].to_vec();
    retained.sort_unstable();

    let lo: Vec<f64> = (0..grid.len())
        .map(|i| {
            retained
                .iter()
                .map(|&l| curves[l][i])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let hi: Vec<f64> = (0..grid.len())
        .map(|i| {
            retained
                .iter()
                .map(|&l| curves[l][i])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();

    let lower = PiecewiseLinear::new(grid.clone(), greatest_convex_minorant(&grid, &lo))?;
    let upper = convex_majorant(&grid, &hi)?;
    Ok(EnvelopePair {
        lower,
        upper,
        coverage_fraction: retained.len() as f64 / profiles.len() as f64,
        retained,
    })
}

/// Lower convex hull of `(xs[i], ys[i])`, evaluated back on `xs`.
pub(crate) fn greatest_convex_minorant(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let mut hull: Vec<usize> = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            // Drop b if it lies on or above the chord a -> i.
            let cross = (xs[b] - xs[a]) * (ys[i] - ys[a]) - (ys[b] - ys[a]) * (xs[i] - xs[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    let mut out = Vec::with_capacity(xs.len());
    let mut seg = 0;
    for (i, &x) in xs.iter().enumerate() {
        while seg + 1 < hull.len() - 1 && xs[hull[seg + 1]] < x {
            seg += 1;
        }
        if hull.len() == 1 {
            out.push(ys[i]);
            continue;
        }
        let (a, b) = (hull[seg], hull[seg + 1]);
        let t = (x - xs[a]) / (xs[b] - xs[a]);
        out.push(ys[a] + t * (ys[b] - ys[a]));
    }
    out
}

fn convex_majorant(xs: &[f64], ys: &[f64]) -> Result<PiecewiseLinear> {
    let gcm = greatest_convex_minorant(xs, ys);
    let gap = ys
        .iter()
        .zip(&gcm)
        .fold(0.0f64, |acc, (y, g)| acc.max(y - g));
    let lifted = PiecewiseLinear::new(xs.to_vec(), gcm.iter().map(|g| g + gap).collect())?;
    let top = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let flat = PiecewiseLinear::new(xs.to_vec(), vec![top; xs.len()])?;
    Ok(if flat.area() < lifted.area() {
        flat
    } else {
        lifted
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn power_law(name: &str, k: usize, p: f64) -> SpectrumProfile<f64> {
        let sigma = (1..=k).map(|i| (i as f64).powf(-p)).collect();
        SpectrumProfile::from_singular_values(name, "g", k, k, sigma).unwrap()
    }

    #[test]
    fn eval_and_inverse() {
        let f = PiecewiseLinear::new(vec![0.0, 0.5, 1.0], vec![2.0, 1.0, 1.0]).unwrap();
        assert_eq!(f.eval(0.25), 1.5);
        assert_eq!(f.eval(-1.0), 2.0);
        assert_eq!(f.eval(2.0), 1.0);
        assert_eq!(f.generalized_inverse(1.5), Some(0.25));
        // flat at 1.0 from 0.5: smallest root
        assert_eq!(f.generalized_inverse(1.0), Some(0.5));
        assert_eq!(f.generalized_inverse(0.5), None);
        assert_eq!(f.generalized_inverse(3.0), Some(0.0));
        assert!(f.is_convex(0.0));
        assert!(f.is_nonincreasing(0.0));
    }

    #[test]
    fn gcm_is_below_and_convex() {
        let xs = uniform_grid(11);
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - x * x).collect();
        let g = greatest_convex_minorant(&xs, &ys);
        for (a, b) in g.iter().zip(&ys) {
            assert!(a <= &(b + 1e-12));
        }
        // concave data: the hull is the chord.
        for (x, v) in xs.iter().zip(&g) {
            assert!((v - (1.0 - x)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_layer_envelope_brackets_its_curve() {
        let p = power_law("a", 12, 1.0);
        let env = envelope(std::slice::from_ref(&p), 0.0).unwrap();
        let grid = uniform_grid(ENVELOPE_GRID_POINTS);
        let c = normalized_curve(&p, &grid);
        for (i, &x) in grid.iter().enumerate() {
            assert!(env.lower.eval(x) <= c[i] + 1e-12);
            assert!(env.upper.eval(x) >= c[i] - 1e-12);
        }
        assert!(env.lower.is_convex(1e-9) && env.upper.is_convex(1e-9));
        assert_eq!(env.coverage_fraction, 1.0);
    }

    #[test]
    fn identical_layers_give_the_single_layer_envelope() {
        let p = power_law("a", 10, 0.7);
        let one = envelope(std::slice::from_ref(&p), 0.0).unwrap();
        let two = envelope(&[p.clone(), p.clone()], 0.0).unwrap();
        assert_eq!(one.lower, two.lower);
        assert_eq!(one.upper, two.upper);
    }

    #[test]
    fn trimming_drops_the_outlier() {
        let mut profiles: Vec<_> = (0..9)
            .map(|i| power_law(&format!("l{i}"), 8, 1.5))
            .collect();
        profiles
            .push(SpectrumProfile::from_matrix("flat", "g", &Matrix::<f64>::identity(8)).unwrap());
        let env = envelope(&profiles, 0.1).unwrap();
        assert_eq!(env.retained, (0..9).collect::<Vec<_>>());
        assert!((env.coverage_fraction - 0.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(envelope::<f64>(&[], 0.0).is_err());
        assert!(envelope(&[power_law("a", 3, 1.0)], 0.5).is_err());
    }
}
