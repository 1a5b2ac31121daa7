//! Complex singular value decompositions sized for signature restoration.
//!
//! Two routes cover the restoration workload. The economy route
//! eigendecomposes the Hermitian Gram matrix on the smaller side, costing
//! `O(N * L^2)` for a tall `N x L` stack and never forming the large singular
//! factor. The one-sided Jacobi route orthogonalizes columns directly; it is
//! slower but resolves small singular values the squared Gram cannot, so it
//! serves small matrices and accuracy-critical thresholds.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Largest min-dimension routed to the Jacobi decomposition by default.
pub const JACOBI_CUTOFF: usize = 48;

/// Which Gram matrix to eigendecompose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramSide {
    /// `Z^H Z`, yielding right singular vectors (columns of V).
    Right,
    /// `Z Z^H`, yielding left singular vectors (columns of U).
    Left,
}

fn check_finite(z: ArrayView2<Complex64>, context: &str) -> Result<()> {
    for v in z.iter() {
        if !(v.re.is_finite() && v.im.is_finite()) {
            return Err(Error::numerical(format!(
                "linalg: {context} contains a non-finite entry"
            )));
        }
    }
    Ok(())
}

/// Singular values (descending) with one side's singular vectors as columns.
#[derive(Debug, Clone)]
pub struct SideSpectrum {
    pub values: Vec<f64>,
    pub vectors: Array2<Complex64>,
}

/// Eigendecomposes the chosen Gram matrix of `z`.
///
/// Returns all `n` singular value estimates (`n` being the chosen side's
/// dimension) in descending order with matching orthonormal vectors. Values
/// below roughly `1e-8` of the largest are squared away by the Gram form and
/// come back as noise-level numbers.
pub fn gram_spectrum(z: ArrayView2<Complex64>, side: GramSide) -> Result<SideSpectrum> {
    check_finite(z, "gram input")?;
    let (m, l) = z.dim();
    if m == 0 || l == 0 {
        return Err(Error::shape("linalg: empty matrix has no decomposition"));
    }
    let n = match side {
        GramSide::Right => l,
        GramSide::Left => m,
    };
    let mut gram = DMatrix::<Complex64>::zeros(n, n);
    match side {
        GramSide::Right => {
            for a in 0..l {
                for b in a..l {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for r in 0..m {
                        acc += z[(r, a)].conj() * z[(r, b)];
                    }
                    gram[(a, b)] = acc;
                    gram[(b, a)] = acc.conj();
                }
            }
        }
        GramSide::Left => {
            for a in 0..m {
                for b in a..m {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for c in 0..l {
                        acc += z[(a, c)] * z[(b, c)].conj();
                    }
                    gram[(a, b)] = acc;
                    gram[(b, a)] = acc.conj();
                }
            }
        }
    }
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values: Vec<f64> = order
        .iter()
        .map(|&j| eig.eigenvalues[j].max(0.0).sqrt())
        .collect();
    if values.iter().any(|s| !s.is_finite()) {
        return Err(Error::numerical("linalg: gram eigensolve returned non-finite values"));
    }
    let mut vectors = Array2::zeros((n, n));
    for (col, &j) in order.iter().enumerate() {
        for r in 0..n {
            vectors[(r, col)] = eig.eigenvectors[(r, j)];
        }
    }
    Ok(SideSpectrum { values, vectors })
}

/// Full thin SVD factors: `z = u * diag(sigma) * v^H`.
#[derive(Debug, Clone)]
pub struct JacobiSvd {
    pub sigma: Vec<f64>,
    pub u: Array2<Complex64>,
    pub v: Array2<Complex64>,
}

const JACOBI_TOL: f64 = 1e-14;
const JACOBI_MAX_SWEEPS: usize = 30;

fn jacobi_tall(z: ArrayView2<Complex64>) -> Result<(Vec<f64>, Array2<Complex64>, Array2<Complex64>)> {
    let (m, l) = z.dim();
    let mut a = z.to_owned();
    let mut v = Array2::from_shape_fn((l, l), |(r, c)| {
        if r == c {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut max_off = 0.0f64;
        for p in 0..l {
            for q in p + 1..l {
                let mut alpha = 0.0f64;
                let mut beta = 0.0f64;
                let mut gamma = Complex64::new(0.0, 0.0);
                for r in 0..m {
                    alpha += a[(r, p)].norm_sqr();
                    beta += a[(r, q)].norm_sqr();
                    gamma += a[(r, p)].conj() * a[(r, q)];
                }
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.norm() / (alpha * beta).sqrt();
                max_off = max_off.max(off);
                if off <= JACOBI_TOL {
                    continue;
                }
                let phase = gamma / gamma.norm();
                let tau = (beta - alpha) / (2.0 * gamma.norm());
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * cs;
                for r in 0..m {
                    let ap = a[(r, p)];
                    let aq = a[(r, q)];
                    a[(r, p)] = ap * cs - aq * phase.conj() * sn;
                    a[(r, q)] = ap * phase * sn + aq * cs;
                }
                for r in 0..l {
                    let vp = v[(r, p)];
                    let vq = v[(r, q)];
                    v[(r, p)] = vp * cs - vq * phase.conj() * sn;
                    v[(r, q)] = vp * phase * sn + vq * cs;
                }
            }
        }
        if max_off <= JACOBI_TOL {
            break;
        }
    }
    let mut sigma: Vec<f64> = (0..l)
        .map(|c| {
            (0..m)
                .map(|r| a[(r, c)].norm_sqr())
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]));
    let sorted_sigma: Vec<f64> = order.iter().map(|&j| sigma[j]).collect();
    sigma = sorted_sigma;
    let mut u = Array2::zeros((m, l));
    let mut v_sorted = Array2::zeros((l, l));
    for (col, &j) in order.iter().enumerate() {
        let s = sigma[col];
        if s > 0.0 {
            for r in 0..m {
                u[(r, col)] = a[(r, j)] / s;
            }
        }
        for r in 0..l {
            v_sorted[(r, col)] = v[(r, j)];
        }
    }
    Ok((sigma, u, v_sorted))
}

/// One-sided Jacobi SVD, accurate for small singular values.
pub fn jacobi_svd(z: ArrayView2<Complex64>) -> Result<JacobiSvd> {
    check_finite(z, "jacobi input")?;
    let (m, l) = z.dim();
    if m == 0 || l == 0 {
        return Err(Error::shape("linalg: empty matrix has no decomposition"));
    }
    if m >= l {
        let (sigma, u, v) = jacobi_tall(z)?;
        Ok(JacobiSvd { sigma, u, v })
    } else {
        let zh = Array2::from_shape_fn((l, m), |(r, c)| z[(c, r)].conj());
        let (sigma, u, v) = jacobi_tall(zh.view())?;
        Ok(JacobiSvd { sigma, u: v, v: u })
    }
}

/// Singular values of `z` in descending order via the cheapest safe route.
pub fn singular_values(z: ArrayView2<Complex64>) -> Result<Vec<f64>> {
    let (m, l) = z.dim();
    let min_dim = m.min(l);
    if min_dim <= JACOBI_CUTOFF {
        Ok(jacobi_svd(z)?.sigma)
    } else if m >= l {
        Ok(gram_spectrum(z, GramSide::Right)?.values)
    } else {
        Ok(gram_spectrum(z, GramSide::Left)?.values)
    }
}

/// Sum of singular values.
pub fn nuclear_norm(z: ArrayView2<Complex64>) -> Result<f64> {
    Ok(singular_values(z)?.iter().sum())
}
