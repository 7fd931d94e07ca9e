use crate::error::{Error, Result};
use crate::grad::{gemm_tn_acc, Tensor};

/// Relative pivot size below which the Gram matrix is treated as singular.
const PIVOT_TOL: f64 = 1e-11;

/// Least-squares coefficients `(X'X)^{-1} X'Y` for `x: [n, p]`, no intercept.
///
/// Solved by Cholesky factorization of the Gram matrix with one step of
/// iterative refinement. A (numerically) singular Gram matrix is an error.
pub fn fit_ols(x: &Tensor, y: &[f64]) -> Result<Vec<f64>> {
    let (n, p) = x
        .dims2()
        .ok_or_else(|| Error::shape("fit_ols", "design must be a matrix"))?;
    if y.len() != n {
        return Err(Error::shape("fit_ols", format!("{n} rows but {} targets", y.len())));
    }
    if n < p {
        return Err(Error::RankDeficient(format!("{n} observations for {p} coefficients")));
    }
    let mut gram = vec![0.0; p * p];
    gemm_tn_acc(n, p, p, x.data(), x.data(), &mut gram);
    let chol = cholesky(&gram, p)?;
    let xty = |r: &[f64]| {
        let mut out = vec![0.0; p];
        gemm_tn_acc(n, p, 1, x.data(), r, &mut out);
        out
    };
    let mut theta = chol_solve(&chol, p, &xty(y));
    let resid: Vec<f64> = (0..n)
        .map(|i| y[i] - dot(&x.data()[i * p..(i + 1) * p], &theta))
        .collect();
    let delta = chol_solve(&chol, p, &xty(&resid));
    for (t, d) in theta.iter_mut().zip(delta) {
        *t += d;
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "fit_ols" });
    }
    Ok(theta)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower-triangular `L` with `L L' = a`.
fn cholesky(a: &[f64], p: usize) -> Result<Vec<f64>> {
    let scale = (0..p).map(|i| a[i * p + i]).fold(0.0, f64::max);
    let mut l = vec![0.0; p * p];
    for j in 0..p {
        let mut d = a[j * p + j];
        for k in 0..j {
            d -= l[j * p + k] * l[j * p + k];
        }
        if !(d > PIVOT_TOL * scale) {
            return Err(Error::RankDeficient(format!(
                "Gram matrix is singular at column {j}; covariates are collinear"
            )));
        }
        let d = d.sqrt();
        l[j * p + j] = d;
        for i in j + 1..p {
            let mut v = a[i * p + j];
            for k in 0..j {
                v -= l[i * p + k] * l[j * p + k];
            }
            l[i * p + j] = v / d;
        }
    }
    Ok(l)
}

fn chol_solve(l: &[f64], p: usize, b: &[f64]) -> Vec<f64> {
    let mut z = b.to_vec();
    for i in 0..p {
        for k in 0..i {
            z[i] -= l[i * p + k] * z[k];
        }
        z[i] /= l[i * p + i];
    }
    for i in (0..p).rev() {
        for k in i + 1..p {
            z[i] -= l[k * p + i] * z[k];
        }
        z[i] /= l[i * p + i];
    }
    z
}
