//! Extended-phase-graph simulation of complex temporal signatures.
//!
//! The magnetization is tracked as configuration states of order k:
//! `f_plus[k]` holds the transverse state F(k), `f_minus[k]` holds the
//! conjugate of F(-k) (so both vectors index nonnegative orders and
//! `f_minus[0] == conj(f_plus[0])` always), and `z[k]` holds the
//! longitudinal state. With that storage the RF pulse of flip angle alpha
//! and phase phi acts per order as the matrix
//!
//! ```text
//! F+' = cos^2(a/2) F+  +  e^{2i phi} sin^2(a/2) F-  -  i e^{i phi} sin(a) Z
//! F-' = e^{-2i phi} sin^2(a/2) F+  +  cos^2(a/2) F-  +  i e^{-i phi} sin(a) Z
//! Z'  = -(i/2) e^{-i phi} sin(a) F+  +  (i/2) e^{i phi} sin(a) F-  +  cos(a) Z
//! ```
//!
//! relaxation over dt multiplies transverse states by exp(-dt/T2) and
//! longitudinal states by exp(-dt/T1) with regrowth of z[0] toward m0, and
//! the unit spoiler gradient shifts `f_plus` up one order and `f_minus`
//! down one order, refilling `f_plus[0]` from `conj(f_minus[0])`.
//!
//! Every RF pulse here uses phase 0 and the spoiler is exactly one
//! dephasing unit per TR; the per-frame loop is pulse, relax to TE, record
//! `f_plus[0]`, relax the rest of TR, shift.

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sequence::SequenceParams;

/// Relaxation times of one tissue, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TissueParams {
    pub t1_ms: f64,
    pub t2_ms: f64,
}

impl TissueParams {
    pub fn new(t1_ms: f64, t2_ms: f64) -> Result<Self> {
        let tissue = TissueParams { t1_ms, t2_ms };
        tissue.validate()?;
        Ok(tissue)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t1_ms > 0.0 && self.t1_ms.is_finite()) {
            return Err(Error::parameter(format!(
                "epg: t1_ms must be finite and positive, got {}",
                self.t1_ms
            )));
        }
        if !(self.t2_ms > 0.0 && self.t2_ms.is_finite()) {
            return Err(Error::parameter(format!(
                "epg: t2_ms must be finite and positive, got {}",
                self.t2_ms
            )));
        }
        if self.t2_ms > self.t1_ms {
            return Err(Error::parameter(format!(
                "epg: t2_ms ({}) must not exceed t1_ms ({})",
                self.t2_ms, self.t1_ms
            )));
        }
        Ok(())
    }
}

/// Configuration-state vectors up to a truncation order.
#[derive(Debug, Clone)]
pub struct EpgState {
    f_plus: Vec<Complex64>,
    f_minus: Vec<Complex64>,
    z: Vec<Complex64>,
    m0: f64,
}

impl EpgState {
    /// Equilibrium state: all transverse states zero, z[0] = m0.
    pub fn new(k_max: usize, m0: f64) -> Self {
        let mut z = vec![Complex64::ZERO; k_max + 1];
        z[0] = Complex64::new(m0, 0.0);
        EpgState {
            f_plus: vec![Complex64::ZERO; k_max + 1],
            f_minus: vec![Complex64::ZERO; k_max + 1],
            z,
            m0,
        }
    }

    pub fn k_max(&self) -> usize {
        self.f_plus.len() - 1
    }

    pub fn m0(&self) -> f64 {
        self.m0
    }

    /// The observable transverse signal F(0).
    pub fn f0(&self) -> Complex64 {
        self.f_plus[0]
    }

    /// The longitudinal state Z(0).
    pub fn z0(&self) -> Complex64 {
        self.z[0]
    }

    /// Apply an RF pulse of flip angle `alpha_rad` about phase `phi_rad`.
    pub fn rf_rotation(&mut self, alpha_rad: f64, phi_rad: f64) {
        let i = Complex64::I;
        let cos_a = alpha_rad.cos();
        let sin_a = alpha_rad.sin();
        let ca2 = 0.5 * (1.0 + cos_a);
        let sa2 = 0.5 * (1.0 - cos_a);
        let e_ip = Complex64::from_polar(1.0, phi_rad);
        let e_2ip = Complex64::from_polar(1.0, 2.0 * phi_rad);
        let t11 = Complex64::new(ca2, 0.0);
        let t12 = e_2ip * sa2;
        let t13 = -i * e_ip * sin_a;
        let t21 = e_2ip.conj() * sa2;
        let t22 = Complex64::new(ca2, 0.0);
        let t23 = i * e_ip.conj() * sin_a;
        let t31 = -i * 0.5 * e_ip.conj() * sin_a;
        let t32 = i * 0.5 * e_ip * sin_a;
        let t33 = Complex64::new(cos_a, 0.0);
        for k in 0..self.f_plus.len() {
            let fp = self.f_plus[k];
            let fm = self.f_minus[k];
            let z = self.z[k];
            self.f_plus[k] = t11 * fp + t12 * fm + t13 * z;
            self.f_minus[k] = t21 * fp + t22 * fm + t23 * z;
            self.z[k] = t31 * fp + t32 * fm + t33 * z;
        }
    }

    /// Relax all states over `dt_ms`; z[0] regrows toward m0.
    pub fn relax(&mut self, dt_ms: f64, tissue: &TissueParams) -> Result<()> {
        if !(dt_ms >= 0.0 && dt_ms.is_finite()) {
            return Err(Error::parameter(format!(
                "epg: relaxation interval must be finite and nonnegative, got {dt_ms}"
            )));
        }
        let e1 = (-dt_ms / tissue.t1_ms).exp();
        let e2 = (-dt_ms / tissue.t2_ms).exp();
        for k in 0..self.f_plus.len() {
            self.f_plus[k] *= e2;
            self.f_minus[k] *= e2;
            self.z[k] *= e1;
        }
        self.z[0] += Complex64::new(self.m0 * (1.0 - e1), 0.0);
        Ok(())
    }

    /// Apply a unit gradient dephasing: `f_plus` shifts up one order,
    /// `f_minus` shifts down one, and the new `f_plus[0]` is the conjugate
    /// of the new `f_minus[0]`. States pushed beyond `k_max` are dropped.
    pub fn grad_shift(&mut self) {
        let top = self.f_plus.len() - 1;
        for k in (1..=top).rev() {
            self.f_plus[k] = self.f_plus[k - 1];
        }
        for k in 0..top {
            self.f_minus[k] = self.f_minus[k + 1];
        }
        self.f_minus[top] = Complex64::ZERO;
        self.f_plus[0] = self.f_minus[0].conj();
    }

    /// Largest state magnitude, for passivity checks.
    pub fn max_abs(&self) -> f64 {
        self.f_plus
            .iter()
            .chain(&self.f_minus)
            .chain(&self.z)
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }

    fn is_finite(&self) -> bool {
        self.f_plus
            .iter()
            .chain(&self.f_minus)
            .chain(&self.z)
            .all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

/// Default truncation order for a schedule of `frames` frames.
pub fn default_k_max(frames: usize) -> usize {
    frames.min(100)
}

/// Simulate the complex signature of one tissue under a schedule.
///
/// Returns the transverse signal at each echo time, one value per frame.
pub fn simulate_signature(
    tissue: &TissueParams,
    seq: &SequenceParams,
    k_max: Option<usize>,
) -> Result<Vec<Complex64>> {
    tissue.validate()?;
    seq.validate()?;
    let k_max = k_max.unwrap_or_else(|| default_k_max(seq.len()));
    if k_max < 1 {
        return Err(Error::parameter("epg: k_max must be at least 1"));
    }
    let mut state = EpgState::new(k_max, 1.0);
    if seq.inversion {
        state.rf_rotation(std::f64::consts::PI, 0.0);
        state.relax(seq.ti_ms, tissue)?;
    }
    let mut signal = Vec::with_capacity(seq.len());
    for i in 0..seq.len() {
        state.rf_rotation(seq.fa_deg[i].to_radians(), 0.0);
        state.relax(seq.te_ms[i], tissue)?;
        signal.push(state.f0());
        state.relax(seq.tr_ms[i] - seq.te_ms[i], tissue)?;
        state.grad_shift();
        if !state.is_finite() {
            return Err(Error::numerical(format!(
                "epg: state became non-finite at frame {i}"
            )));
        }
    }
    Ok(signal)
}

/// Simulate a batch of tissues; row k is `simulate_signature(tissues[k], ..)`.
///
/// Rows are independent, so they fan out across the rayon pool; results are
/// assembled in order and identical for any worker count.
pub fn simulate_batch(
    tissues: &[TissueParams],
    seq: &SequenceParams,
    k_max: Option<usize>,
) -> Result<Array2<Complex64>> {
    if tissues.is_empty() {
        return Err(Error::parameter("epg: tissue batch is empty"));
    }
    seq.validate()?;
    let l = seq.len();
    let rows: Vec<Result<Vec<Complex64>>> = tissues
        .par_iter()
        .map(|tissue| simulate_signature(tissue, seq, k_max))
        .collect();
    let mut data = Vec::with_capacity(tissues.len() * l);
    for (idx, row) in rows.into_iter().enumerate() {
        let row = row.map_err(|e| Error::numerical(format!("epg: batch row {idx}: {e}")))?;
        data.extend_from_slice(&row);
    }
    Array2::from_shape_vec((tissues.len(), l), data)
        .map_err(|e| Error::shape(format!("epg: batch assembly: {e}")))
}
