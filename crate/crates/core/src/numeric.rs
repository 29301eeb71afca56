//! Small numerical helpers shared by the analysis modules.

use nalgebra::{DMatrix, DVector};

/// Pairwise (cascade) summation; deterministic for a given slice order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        xs.iter().fold(0.0, |acc, &x| acc + x)
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

pub fn max_abs(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Result of a weighted least-squares line `y = intercept + slope * x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope (zero for exact or two-point fits).
    pub slope_stderr: f64,
    /// Weighted RMS of the residuals.
    pub rms: f64,
}

/// Weighted least-squares line. Returns `None` for fewer than two points or
/// when all abscissae coincide.
pub fn fit_line(xs: &[f64], ys: &[f64], weights: Option<&[f64]>) -> Option<LineFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let sw: f64 = (0..n).map(w).sum();
    if sw <= 0.0 {
        return None;
    }
    let xm = (0..n).map(|i| w(i) * xs[i]).sum::<f64>() / sw;
    let ym = (0..n).map(|i| w(i) * ys[i]).sum::<f64>() / sw;
    let sxx: f64 = (0..n).map(|i| w(i) * (xs[i] - xm).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = (0..n).map(|i| w(i) * (xs[i] - xm) * (ys[i] - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let sse: f64 = (0..n).map(|i| w(i) * (ys[i] - intercept - slope * xs[i]).powi(2)).sum();
    let rms = (sse / sw).sqrt();
    // weights are treated as frequency counts
    let slope_stderr = if n > 2 && sw > 2.0 {
        (sse / (sw - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Some(LineFit {
        slope,
        intercept,
        slope_stderr,
        rms,
    })
}

/// Least-squares slope of a line through the origin, with its standard error.
pub fn fit_through_origin(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    if xs.is_empty() || sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let slope = sxy / sxx;
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x).powi(2)).sum();
    let dof = (xs.len() as f64 - 1.0).max(1.0);
    Some((slope, (sse / dof / sxx).sqrt()))
}

/// Weights of the three-point Lagrange first and second derivative at the
/// middle node of `(x0, x1, x2)`, possibly non-uniform.
pub fn three_point_weights(x0: f64, x1: f64, x2: f64) -> ([f64; 3], [f64; 3]) {
    let h1 = x1 - x0;
    let h2 = x2 - x1;
    let first = [-h2 / (h1 * (h1 + h2)), (h2 - h1) / (h1 * h2), h1 / (h2 * (h1 + h2))];
    let second = [2.0 / (h1 * (h1 + h2)), -2.0 / (h1 * h2), 2.0 / (h2 * (h1 + h2))];
    (first, second)
}

/// Orthonormal basis (as columns) of the orthogonal complement of `v`.
pub fn orthogonal_complement(v: &DVector<f64>) -> DMatrix<f64> {
    let n = v.len();
    let norm = v.norm();
    let u = if norm > 0.0 {
        v / norm
    } else {
        let mut e = DVector::zeros(n);
        e[0] = 1.0;
        e
    };
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(n.saturating_sub(1));
    // Gram-Schmidt over the coordinate axes, least aligned with u first
    let mut axes: Vec<usize> = (0..n).collect();
    axes.sort_by(|&a, &b| u[a].abs().total_cmp(&u[b].abs()));
    for &k in &axes {
        if basis.len() + 1 == n {
            break;
        }
        let mut w = DVector::zeros(n);
        w[k] = 1.0;
        let proj = w.dot(&u);
        w -= &u * proj;
        for b in &basis {
            let p = w.dot(b);
            w -= b * p;
        }
        let wn = w.norm();
        if wn > 1e-10 {
            basis.push(w / wn);
        }
    }
    let mut m = DMatrix::zeros(n, basis.len());
    for (j, b) in basis.iter().enumerate() {
        m.set_column(j, b);
    }
    m
}

/// Symmetric positive semi-definite square root via eigen-decomposition.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let sym = 0.5 * (m + m.transpose());
    let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pairwise_matches_naive_on_small_input() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }

    #[test]
    fn line_fit_exact() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x - 1.0).collect();
        let fit = fit_line(&xs, &ys, None).unwrap();
        assert_relative_eq!(fit.slope, 2.0, epsilon = 1e-14);
        assert_relative_eq!(fit.intercept, -1.0, epsilon = 1e-14);
        assert!(fit.slope_stderr < 1e-14);
    }

    #[test]
    fn three_point_weights_exact_on_quadratics() {
        let (x0, x1, x2) = (0.1, 0.25, 0.6);
        let f = |x: f64| 3.0 * x * x - x + 2.0;
        let (d1, d2) = three_point_weights(x0, x1, x2);
        let fs = [f(x0), f(x1), f(x2)];
        let a: f64 = d1.iter().zip(fs).map(|(w, v)| w * v).sum();
        let b: f64 = d2.iter().zip(fs).map(|(w, v)| w * v).sum();
        assert_relative_eq!(a, 6.0 * x1 - 1.0, epsilon = 1e-12);
        assert_relative_eq!(b, 6.0, epsilon = 1e-10);
    }

    #[test]
    fn complement_is_orthonormal() {
        let v = DVector::from_vec(vec![0.3, -1.2, 0.7]);
        let p = orthogonal_complement(&v);
        assert_eq!(p.ncols(), 2);
        let g = p.transpose() * &p;
        assert_relative_eq!(g, DMatrix::identity(2, 2), epsilon = 1e-12);
        assert!((p.transpose() * v).norm() < 1e-12);
    }
}
