//! Dense eigen/SVD kernels, PCA, and ridge regression.
//!
//! Everything here is small-matrix code: the largest system in a desk run is
//! a few hundred samples on a side. Symmetric eigenproblems use cyclic Jacobi
//! rotations; singular values use one-sided (Hestenes) Jacobi directly on the
//! data so that small singular values keep their relative accuracy.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix. Eigenvalues are returned in
/// descending order with eigenvectors as the matching columns.
pub fn symmetric_eigen(a: &Tensor) -> (Vec<f64>, Tensor) {
    let n = a.rows();
    assert_eq!(n, a.cols(), "symmetric_eigen needs a square matrix");
    let mut m: Vec<f64> = a.data().to_vec();
    let mut v = Tensor::identity(n).into_data();
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vecs = Tensor::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vecs.set(k, dst, v[k * n + src]);
        }
    }
    (values, vecs)
}

/// Singular values in descending order, by one-sided Jacobi.
pub fn singular_values(a: &Tensor) -> Vec<f64> {
    // Orthogonalize the columns of the taller orientation.
    let work = if a.cols() > a.rows() { a.transpose() } else { a.clone() };
    let (m, n) = (work.rows(), work.cols());
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| work.get(i, j)).collect()).collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, xq) = (*x, *y);
                    *x = c * xp - s * xq;
                    *y = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Singular spectrum with cumulative energy and effective ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub singular_values: Vec<f64>,
    pub cumulative_energy: Vec<f64>,
    /// `(threshold, rank)` pairs, always including 0.9 and 0.99.
    pub ranks: Vec<(f64, usize)>,
}

impl SpectrumSummary {
    pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.9, 0.99];

    /// Smallest `r` whose leading `r` directions hold at least `threshold`
    /// of the squared singular-value energy; zero for an empty spectrum.
    pub fn rank_at(&self, threshold: f64) -> usize {
        self.cumulative_energy
            .iter()
            .position(|&e| e >= threshold)
            .map_or(0, |i| i + 1)
    }

    /// Energy fraction held by the first `r` directions.
    pub fn energy_of_top(&self, r: usize) -> f64 {
        match r {
            0 => 0.0,
            r => self.cumulative_energy.get(r - 1).or(self.cumulative_energy.last()).copied().unwrap_or(0.0),
        }
    }
}

pub fn svd_spectrum(matrix: &Tensor) -> Result<SpectrumSummary> {
    if matrix.is_empty() {
        return Err(Error::arg("svd_spectrum needs a nonempty matrix"));
    }
    if !matrix.is_finite() {
        return Err(Error::NonFinite { context: "svd_spectrum input".into() });
    }
    let sv = singular_values(matrix);
    let total: f64 = sv.iter().map(|s| s * s).sum();
    if total == 0.0 {
        let ranks = SpectrumSummary::DEFAULT_THRESHOLDS.iter().map(|&t| (t, 0)).collect();
        return Ok(SpectrumSummary { singular_values: vec![], cumulative_energy: vec![], ranks });
    }
    let mut cumulative = Vec::with_capacity(sv.len());
    let mut run = 0.0;
    for s in &sv {
        run += s * s;
        cumulative.push((run / total).min(1.0));
    }
    if let Some(last) = cumulative.last_mut() {
        *last = 1.0;
    }
    let mut summary = SpectrumSummary { singular_values: sv, cumulative_energy: cumulative, ranks: vec![] };
    summary.ranks = SpectrumSummary::DEFAULT_THRESHOLDS
        .iter()
        .map(|&t| (t, summary.rank_at(t)))
        .collect();
    Ok(summary)
}

/// Result of [`pca_fit_project`].
#[derive(Debug, Clone)]
pub struct PcaFit {
    /// `dims × k`, orthonormal columns.
    pub basis: Tensor,
    /// `samples × k`
    pub projected: Tensor,
    /// Smallest component count reaching 95% of the variance.
    pub id95: usize,
    /// Sample variances along every principal direction, descending.
    pub variances: Vec<f64>,
    pub mean: Tensor,
}

impl PcaFit {
    pub fn project(&self, x: &Tensor) -> Tensor {
        let mut xc = x.clone();
        for r in 0..xc.rows() {
            for (v, m) in xc.row_slice_mut(r).iter_mut().zip(self.mean.data()) {
                *v -= m;
            }
        }
        xc.matmul(&self.basis)
    }
}

/// Smallest component count whose cumulative share of `variances` reaches
/// `fraction`.
pub fn intrinsic_dimension(variances: &[f64], fraction: f64) -> usize {
    let total: f64 = variances.iter().map(|v| v.max(0.0)).sum();
    if total <= 0.0 {
        return 0;
    }
    let mut run = 0.0;
    for (i, v) in variances.iter().enumerate() {
        run += v.max(0.0);
        if run / total >= fraction - 1e-12 {
            return i + 1;
        }
    }
    variances.len()
}

/// Mean-centers `x` and projects it onto its top `k` principal directions.
pub fn pca_fit_project(x: &Tensor, k: usize) -> Result<PcaFit> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::arg("PCA needs at least two samples"));
    }
    if k > n.min(d) {
        return Err(Error::arg(format!("PCA rank {k} exceeds min(samples={n}, dims={d})")));
    }
    let (xc, mean) = x.centered();
    let denom = (n - 1) as f64;

    let (variances, basis_full) = if d <= n {
        let cov = xc.transpose().matmul(&xc).scale(1.0 / denom);
        symmetric_eigen(&cov)
    } else {
        // Gram route: eigenvectors of Xc·Xcᵀ mapped back through Xcᵀ.
        let gram = xc.matmul(&xc.transpose());
        let (vals, u) = symmetric_eigen(&gram);
        let mut basis = xc.transpose().matmul(&u);
        let top = vals.first().copied().unwrap_or(0.0).max(0.0);
        for (j, &lam) in vals.iter().enumerate() {
            let norm = (0..d).map(|i| basis.get(i, j).powi(2)).sum::<f64>().sqrt();
            if lam > 1e-12 * top && norm > 0.0 {
                for i in 0..d {
                    basis.set(i, j, basis.get(i, j) / norm);
                }
            } else {
                for i in 0..d {
                    basis.set(i, j, 0.0);
                }
            }
        }
        (vals.iter().map(|v| v / denom).collect(), basis)
    };

    let mut basis = basis_full.select_cols(&(0..k).collect::<Vec<_>>());
    complete_orthonormal(&mut basis);
    let projected = xc.matmul(&basis);
    let variances: Vec<f64> = variances.into_iter().map(|v| v.max(0.0)).collect();
    Ok(PcaFit { id95: intrinsic_dimension(&variances, 0.95), basis, projected, variances, mean })
}

/// Replaces zero columns with unit vectors orthogonal to the others.
fn complete_orthonormal(basis: &mut Tensor) {
    let (d, k) = (basis.rows(), basis.cols());
    let mut next_axis = 0;
    for j in 0..k {
        let norm: f64 = (0..d).map(|i| basis.get(i, j).powi(2)).sum::<f64>().sqrt();
        if norm > 0.5 {
            continue;
        }
        while next_axis < d {
            let mut cand: Vec<f64> = (0..d).map(|i| if i == next_axis { 1.0 } else { 0.0 }).collect();
            next_axis += 1;
            for other in 0..k {
                if other == j {
                    continue;
                }
                let dot: f64 = (0..d).map(|i| cand[i] * basis.get(i, other)).sum();
                for (i, c) in cand.iter_mut().enumerate() {
                    *c -= dot * basis.get(i, other);
                }
            }
            let n: f64 = cand.iter().map(|c| c * c).sum::<f64>().sqrt();
            if n > 1e-6 {
                for (i, c) in cand.iter().enumerate() {
                    basis.set(i, j, c / n);
                }
                break;
            }
        }
    }
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::shape("cholesky needs a square matrix"));
    }
    let max_diag = (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max);
    let tol = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
    let mut l = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= tol {
                    return Err(Error::Singular(format!(
                        "matrix is not positive definite at pivot {i}; use a positive ridge alpha"
                    )));
                }
                l.set(i, i, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solves `A X = B` given the lower Cholesky factor of `A`.
pub fn cholesky_solve(l: &Tensor, b: &Tensor) -> Tensor {
    let n = l.rows();
    let m = b.cols();
    let mut x = b.clone();
    for c in 0..m {
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in i + 1..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    x
}

/// A fitted ridge regression with an unpenalized intercept.
#[derive(Debug, Clone)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub y_mean: f64,
}

impl RidgeModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.y_mean
            + row
                .iter()
                .zip(&self.x_mean)
                .zip(&self.weights)
                .map(|((x, m), w)| (x - m) * w)
                .sum::<f64>()
    }
}

/// Closed-form ridge fit on the given rows. Uses the primal system when the
/// feature count is at most the sample count and the dual system otherwise.
pub fn ridge_fit(x: &Tensor, y: &[f64], alpha: f64, rows: &[usize]) -> Result<RidgeModel> {
    if !(alpha >= 0.0) {
        return Err(Error::arg("ridge alpha must be nonnegative"));
    }
    if rows.is_empty() {
        return Err(Error::arg("ridge needs training rows"));
    }
    let xs = x.select_rows(rows);
    let (xc, xm) = xs.centered();
    let y_mean = rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64;
    let yc = Tensor::new(rows.len(), 1, rows.iter().map(|&i| y[i] - y_mean).collect());
    let d = xc.cols();
    let weights = if d <= rows.len() {
        let mut a = xc.transpose().matmul(&xc);
        for i in 0..d {
            a.set(i, i, a.get(i, i) + alpha);
        }
        let l = cholesky(&a)?;
        cholesky_solve(&l, &xc.transpose().matmul(&yc)).into_data()
    } else {
        let mut g = xc.matmul(&xc.transpose());
        for i in 0..g.rows() {
            g.set(i, i, g.get(i, i) + alpha);
        }
        let l = cholesky(&g)?;
        xc.transpose().matmul(&cholesky_solve(&l, &yc)).into_data()
    };
    Ok(RidgeModel { weights, x_mean: xm.into_data(), y_mean })
}

/// Coefficient of determination on `ys` against their own mean.
pub fn r_squared(pred: &[f64], ys: &[f64]) -> Result<f64> {
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Degenerate("R² undefined for a constant test target".into()));
    }
    let ss_res: f64 = pred.iter().zip(ys).map(|(p, y)| (p - y).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Fits ridge regression on `train` rows and returns held-out R² on `test`.
pub fn ridge_r2(x: &Tensor, y: &[f64], alpha: f64, train: &[usize], test: &[usize]) -> Result<f64> {
    if x.rows() != y.len() {
        return Err(Error::shape("ridge targets must match sample count"));
    }
    if train.iter().any(|i| test.contains(i)) {
        return Err(Error::arg("ridge train and test indices must be disjoint"));
    }
    if test.is_empty() {
        return Err(Error::arg("ridge needs test rows"));
    }
    let model = ridge_fit(x, y, alpha, train)?;
    let pred: Vec<f64> = test.iter().map(|&i| model.predict_row(x.row_slice(i))).collect();
    let ys: Vec<f64> = test.iter().map(|&i| y[i]).collect();
    r_squared(&pred, &ys)
}
