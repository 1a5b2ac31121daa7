//! Contrast stacks, singular value thresholding, and low-rank restoration.
//!
//! A contrast stack holds the `N x L` complex matrix whose column `i` is the
//! vectorized (row-major) `h x w` image of frame `i`, so row `j` is the
//! temporal signature of pixel `j`. Restoration alternates a gradient step on
//! the data-fidelity term with singular value thresholding, the proximal
//! operator of the nuclear norm.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::dict::Dictionary;
use crate::error::{Error, Result};
use crate::kspace::{self, KSpaceData};
use crate::linalg::{self, GramSide, JACOBI_CUTOFF};

/// `N x L` complex image stack with frame geometry `h x w`, `N = h * w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastStack {
    pub data: Array2<Complex64>,
    pub h: usize,
    pub w: usize,
}

impl ContrastStack {
    /// Wraps a matrix whose row count matches the frame geometry.
    pub fn new(data: Array2<Complex64>, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::parameter(format!(
                "lowrank: frame geometry {h}x{w} must be nonzero"
            )));
        }
        if data.nrows() != h * w {
            return Err(Error::shape(format!(
                "lowrank: stack has {} rows but geometry {h}x{w} implies {}",
                data.nrows(),
                h * w
            )));
        }
        if data.ncols() == 0 {
            return Err(Error::shape("lowrank: stack has zero frames"));
        }
        Ok(Self { data, h, w })
    }

    /// All-zero stack of the given geometry.
    pub fn zeros(h: usize, w: usize, frames: usize) -> Result<Self> {
        if h == 0 || w == 0 || frames == 0 {
            return Err(Error::parameter(format!(
                "lowrank: stack geometry {h}x{w}x{frames} must be nonzero"
            )));
        }
        Ok(Self {
            data: Array2::zeros((h * w, frames)),
            h,
            w,
        })
    }

    /// Number of frames `L`.
    pub fn frames(&self) -> usize {
        self.data.ncols()
    }

    /// Number of pixels `N`.
    pub fn pixels(&self) -> usize {
        self.data.nrows()
    }

    /// Extracts frame `i` as an `h x w` image.
    pub fn frame(&self, i: usize) -> Result<Array2<Complex64>> {
        if i >= self.frames() {
            return Err(Error::shape(format!(
                "lowrank: frame {i} out of range ({} frames)",
                self.frames()
            )));
        }
        let col: Vec<Complex64> = self.data.column(i).to_vec();
        Array2::from_shape_vec((self.h, self.w), col)
            .map_err(|e| Error::shape(format!("lowrank: frame reshape failed: {e}")))
    }

    /// Overwrites frame `i` from an `h x w` image.
    pub fn set_frame(&mut self, i: usize, img: ArrayView2<Complex64>) -> Result<()> {
        if i >= self.frames() {
            return Err(Error::shape(format!(
                "lowrank: frame {i} out of range ({} frames)",
                self.frames()
            )));
        }
        if img.dim() != (self.h, self.w) {
            return Err(Error::shape(format!(
                "lowrank: frame image is {}x{} but stack geometry is {}x{}",
                img.dim().0,
                img.dim().1,
                self.h,
                self.w
            )));
        }
        for (dst, src) in self.data.column_mut(i).iter_mut().zip(img.iter()) {
            *dst = *src;
        }
        Ok(())
    }

    /// Frobenius norm of the stack matrix.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }
}

fn frobenius(a: &Array2<Complex64>) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// Relative threshold below which the Gram route cannot resolve a shrink.
const GRAM_TAU_FLOOR: f64 = 1e-7;

fn reconstruct_from_side(
    z: ArrayView2<Complex64>,
    spectrum: &linalg::SideSpectrum,
    tau: f64,
    side: GramSide,
) -> Array2<Complex64> {
    let n = spectrum.values.len();
    let mut mixer = Array2::zeros((n, n));
    for (j, &sigma) in spectrum.values.iter().enumerate() {
        let gain = if sigma > 0.0 {
            (sigma - tau).max(0.0) / sigma
        } else {
            0.0
        };
        if gain == 0.0 {
            continue;
        }
        let gc = Complex64::new(gain, 0.0);
        for r in 0..n {
            for c in 0..n {
                mixer[(r, c)] +=
                    spectrum.vectors[(r, j)] * gc * spectrum.vectors[(c, j)].conj();
            }
        }
    }
    match side {
        GramSide::Right => z.dot(&mixer),
        GramSide::Left => mixer.dot(&z),
    }
}

/// Soft-thresholds the singular values of `z` by `tau`.
///
/// This is the proximal operator of `tau` times the nuclear norm. The second
/// return value is the input's singular spectrum in descending order, so the
/// output's spectrum is `max(sigma - tau, 0)` of it by construction.
pub fn svt_with_spectrum(
    z: ArrayView2<Complex64>,
    tau: f64,
) -> Result<(Array2<Complex64>, Vec<f64>)> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::parameter(format!(
            "lowrank: threshold tau={tau} must be finite and nonnegative"
        )));
    }
    let (m, l) = z.dim();
    if m == 0 || l == 0 {
        return Err(Error::shape("lowrank: cannot threshold an empty matrix"));
    }
    if tau == 0.0 {
        let spectrum = linalg::singular_values(z)?;
        return Ok((z.to_owned(), spectrum));
    }
    let min_dim = m.min(l);
    let use_jacobi = {
        if min_dim <= JACOBI_CUTOFF {
            true
        } else {
            let probe = linalg::singular_values(z)?;
            let sigma_max = probe.first().copied().unwrap_or(0.0);
            sigma_max > 0.0 && tau < GRAM_TAU_FLOOR * sigma_max
        }
    };
    if use_jacobi {
        let svd = linalg::jacobi_svd(z)?;
        let mut shrunk = svd.u.clone();
        for (c, &sigma) in svd.sigma.iter().enumerate() {
            let s = (sigma - tau).max(0.0);
            for r in 0..m {
                shrunk[(r, c)] *= s;
            }
        }
        let vh = Array2::from_shape_fn((svd.v.ncols(), svd.v.nrows()), |(r, c)| {
            svd.v[(c, r)].conj()
        });
        return Ok((shrunk.dot(&vh), svd.sigma));
    }
    let side = if m >= l { GramSide::Right } else { GramSide::Left };
    let spectrum = linalg::gram_spectrum(z, side)?;
    let out = reconstruct_from_side(z, &spectrum, tau, side);
    Ok((out, spectrum.values))
}

/// Soft-thresholds the singular values of `z` by `tau`.
pub fn svt(z: ArrayView2<Complex64>, tau: f64) -> Result<Array2<Complex64>> {
    svt_with_spectrum(z, tau).map(|(out, _)| out)
}

/// Restoration settings for the iterative gradient / thresholding loop.
#[derive(Debug, Clone)]
pub struct RestoreConfig {
    pub mu: f64,
    pub lambda: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub projector: Option<Array2<Complex64>>,
}

impl Default for RestoreConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            lambda: 5.0,
            tol: 1e-4,
            max_iters: 200,
            projector: None,
        }
    }
}

impl RestoreConfig {
    /// Checks parameter ranges.
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::parameter(format!(
                "lowrank: step size mu={} must be positive and finite",
                self.mu
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::parameter(format!(
                "lowrank: weight lambda={} must be nonnegative and finite",
                self.lambda
            )));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::parameter(format!(
                "lowrank: tolerance tol={} must be positive and finite",
                self.tol
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::parameter("lowrank: max_iters must be at least 1"));
        }
        Ok(())
    }
}

/// One restoration iteration's diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct RestoreLogRow {
    pub iter: usize,
    pub rel_change: f64,
    pub nuclear_norm: f64,
    pub data_fidelity: f64,
}

impl RestoreLogRow {
    /// Composite objective value at this iterate.
    pub fn objective(&self, lambda: f64) -> f64 {
        self.data_fidelity + lambda * self.nuclear_norm
    }
}

/// Per-iteration restoration log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RestoreLog {
    pub rows: Vec<RestoreLogRow>,
    pub converged: bool,
}

impl RestoreLog {
    /// Number of iterations run.
    pub fn iterations(&self) -> usize {
        self.rows.len()
    }

    /// Final relative change, if any iteration ran.
    pub fn final_rel_change(&self) -> Option<f64> {
        self.rows.last().map(|r| r.rel_change)
    }

    /// Writes the log as `iter,rel_change,nuclear_norm,data_fidelity` CSV.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = String::from("iter,rel_change,nuclear_norm,data_fidelity\n");
        for row in &self.rows {
            text.push_str(&format!(
                "{},{},{},{}\n",
                row.iter, row.rel_change, row.nuclear_norm, row.data_fidelity
            ));
        }
        let path = path.as_ref();
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

fn gradient_step(
    x: &ContrastStack,
    y: &KSpaceData,
    mu: f64,
) -> Result<Array2<Complex64>> {
    let frames: Vec<Array2<Complex64>> = (0..x.frames())
        .into_par_iter()
        .map(|i| {
            let frame = x.frame(i)?;
            let k = kspace::fft2_unitary(frame.view());
            let mask = &y.masks[i];
            let mut residual_k = Array2::zeros((y.h, y.w));
            let mut idx = 0;
            for r in 0..y.h {
                for c in 0..y.w {
                    if mask.is_kept(r, c) {
                        residual_k[(r, c)] = k[(r, c)] - y.samples[i][idx];
                        idx += 1;
                    }
                }
            }
            let correction = kspace::ifft2_unitary(residual_k.view());
            Ok(frame - &correction.mapv(|v| v * mu))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut z = Array2::zeros((x.pixels(), x.frames()));
    for (i, frame) in frames.iter().enumerate() {
        for (dst, src) in z.column_mut(i).iter_mut().zip(frame.iter()) {
            *dst = *src;
        }
    }
    Ok(z)
}

fn data_fidelity(x: &ContrastStack, y: &KSpaceData) -> Result<f64> {
    let halves: Vec<f64> = (0..x.frames())
        .into_par_iter()
        .map(|i| {
            let frame = x.frame(i)?;
            let samples = kspace::forward(frame.view(), &y.masks[i])?;
            Ok(samples
                .iter()
                .zip(y.samples[i].iter())
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(0.5 * halves.iter().sum::<f64>())
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 5;

/// Restores a contrast stack from subsampled k-space measurements.
///
/// Starts from zero and alternates a per-frame gradient step on the data
/// fidelity with singular value thresholding at `lambda * mu`; an optional
/// row-space projector is applied between the two. Each log row reports the
/// just-updated iterate's relative change, nuclear norm, and data fidelity.
pub fn restore(y: &KSpaceData, cfg: &RestoreConfig) -> Result<(ContrastStack, RestoreLog)> {
    cfg.validate()?;
    if let Some(p) = &cfg.projector {
        if p.dim() != (y.frames(), y.frames()) {
            return Err(Error::shape(format!(
                "lowrank: projector is {}x{} but the stack has {} frames",
                p.dim().0,
                p.dim().1,
                y.frames()
            )));
        }
    }
    let mut x = ContrastStack::zeros(y.h, y.w, y.frames())?;
    let mut log = RestoreLog::default();
    let tau = cfg.lambda * cfg.mu;
    let mut baseline_rel: Option<f64> = None;
    let mut high_streak = 0usize;
    for iter in 1..=cfg.max_iters {
        let mut z = gradient_step(&x, y, cfg.mu)?;
        if let Some(p) = &cfg.projector {
            z = z.dot(p);
        }
        let (x_new, spectrum) = svt_with_spectrum(z.view(), tau)?;
        if x_new.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::numerical(format!(
                "lowrank: iterate became non-finite at iteration {iter}"
            )));
        }
        let delta = frobenius(&(&x_new - &x.data));
        let old_norm = frobenius(&x.data);
        let rel_change = if old_norm > 0.0 {
            delta / old_norm
        } else if delta > 0.0 {
            1.0
        } else {
            0.0
        };
        let nuclear: f64 = spectrum.iter().map(|&s| (s - tau).max(0.0)).sum();
        x.data = x_new;
        let fidelity = data_fidelity(&x, y)?;
        log.rows.push(RestoreLogRow {
            iter,
            rel_change,
            nuclear_norm: nuclear,
            data_fidelity: fidelity,
        });
        if rel_change < cfg.tol {
            log.converged = true;
            break;
        }
        match baseline_rel {
            None => baseline_rel = Some(rel_change),
            Some(base) => {
                if rel_change > DIVERGENCE_FACTOR * base {
                    high_streak += 1;
                    if high_streak >= DIVERGENCE_PATIENCE {
                        return Err(Error::numerical(format!(
                            "lowrank: diverging at iteration {iter}: relative change \
                             {rel_change:.3e} exceeds {DIVERGENCE_FACTOR}x the initial \
                             {base:.3e} for {DIVERGENCE_PATIENCE} consecutive iterations \
                             (try a smaller mu)"
                        )));
                    }
                } else {
                    high_streak = 0;
                }
            }
        }
    }
    Ok((x, log))
}

/// Orthogonal projector onto the row space of the dictionary matrix.
pub fn dictionary_projector(dict: &Dictionary) -> Result<Array2<Complex64>> {
    let d = &dict.signatures;
    let (k, l) = d.dim();
    if k == 0 || l == 0 {
        return Err(Error::shape("lowrank: dictionary matrix is empty"));
    }
    let (values, vectors, cut) = if k.min(l) <= JACOBI_CUTOFF {
        let svd = linalg::jacobi_svd(d.view())?;
        let sigma_max = svd.sigma.first().copied().unwrap_or(0.0);
        (svd.sigma, svd.v, 1e-10 * sigma_max)
    } else {
        let spectrum = linalg::gram_spectrum(d.view(), GramSide::Right)?;
        let sigma_max = spectrum.values.first().copied().unwrap_or(0.0);
        (spectrum.values, spectrum.vectors, GRAM_TAU_FLOOR * sigma_max)
    };
    if values.first().copied().unwrap_or(0.0) <= 0.0 {
        return Err(Error::numerical("lowrank: dictionary matrix is zero"));
    }
    let mut p = Array2::zeros((l, l));
    for (j, &sigma) in values.iter().enumerate() {
        if sigma <= cut {
            continue;
        }
        for r in 0..l {
            for c in 0..l {
                p[(r, c)] += vectors[(r, j)] * vectors[(c, j)].conj();
            }
        }
    }
    Ok(p)
}
