//! Parameter-map error metrics, synthetic ellipse phantoms, and reports.
//!
//! Metrics compare a true and an estimated real-valued map: root mean square
//! error over all elements, two signal-to-noise conventions, peak SNR, and
//! Pearson correlation. Phantoms rasterize ellipse regions over a uniform
//! background and expand pixelwise tissue maps into signature stacks with
//! per-tissue memoization.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::epg::{self, TissueParams};
use crate::error::{Error, Result};
use crate::lowrank::ContrastStack;
use crate::sequence::SequenceParams;

fn check_same_shape(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "eval: map shapes {}x{} and {}x{} differ",
            a.dim().0,
            a.dim().1,
            b.dim().0,
            b.dim().1
        )));
    }
    Ok(())
}

/// Root mean square error over all elements.
pub fn rmse(x_true: ArrayView2<f64>, x_est: ArrayView2<f64>) -> Result<f64> {
    check_same_shape(x_true, x_est)?;
    let n = x_true.len() as f64;
    let sum: f64 = x_true
        .iter()
        .zip(x_est.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sum / n).sqrt())
}

/// Numerator convention for the signal-to-noise ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SnrConvention {
    /// Squared Frobenius norm over RMSE.
    #[default]
    #[serde(rename = "paper")]
    Paper,
    /// Frobenius norm over RMSE.
    #[serde(rename = "standard")]
    Standard,
}

impl fmt::Display for SnrConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SnrConvention::Paper => write!(f, "paper"),
            SnrConvention::Standard => write!(f, "standard"),
        }
    }
}

impl FromStr for SnrConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(SnrConvention::Paper),
            "standard" => Ok(SnrConvention::Standard),
            other => Err(Error::parameter(format!(
                "eval: unknown SNR convention '{other}' (expected 'paper' or 'standard')"
            ))),
        }
    }
}

/// Signal-to-noise ratio in dB; infinite when the estimate is exact.
pub fn snr_db(
    x_true: ArrayView2<f64>,
    x_est: ArrayView2<f64>,
    convention: SnrConvention,
) -> Result<f64> {
    let err = rmse(x_true, x_est)?;
    let frob_sq: f64 = x_true.iter().map(|v| v * v).sum();
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    let numerator = match convention {
        SnrConvention::Paper => frob_sq,
        SnrConvention::Standard => frob_sq.sqrt(),
    };
    Ok(20.0 * (numerator / err).log10())
}

/// Peak signal-to-noise ratio in dB; infinite when the estimate is exact.
pub fn psnr_db(x_true: ArrayView2<f64>, x_est: ArrayView2<f64>, peak: f64) -> Result<f64> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::parameter(format!(
            "eval: peak value {peak} must be positive and finite"
        )));
    }
    let err = rmse(x_true, x_est)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / err).log10())
}

/// Pearson correlation of the vectorized maps.
pub fn corrcoef(x_true: ArrayView2<f64>, x_est: ArrayView2<f64>) -> Result<f64> {
    check_same_shape(x_true, x_est)?;
    let n = x_true.len() as f64;
    let mean_a: f64 = x_true.iter().sum::<f64>() / n;
    let mean_b: f64 = x_est.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (a, b) in x_true.iter().zip(x_est.iter()) {
        let da = a - mean_a;
        let db = b - mean_b;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::parameter(
            "eval: correlation is undefined for a constant map",
        ));
    }
    Ok(cov / (var_a * var_b).sqrt())
}

/// One tissue-valued ellipse region of a phantom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseRegion {
    pub center_row: f64,
    pub center_col: f64,
    pub semi_axis_row: f64,
    pub semi_axis_col: f64,
    pub angle_rad: f64,
    pub t1_ms: f64,
    pub t2_ms: f64,
}

impl EllipseRegion {
    fn contains(&self, r: f64, c: f64) -> bool {
        let dr = r - self.center_row;
        let dc = c - self.center_col;
        let (sin, cos) = self.angle_rad.sin_cos();
        let u = dr * cos + dc * sin;
        let v = -dr * sin + dc * cos;
        let a = self.semi_axis_row;
        let b = self.semi_axis_col;
        (u / a) * (u / a) + (v / b) * (v / b) <= 1.0
    }

    fn bounding_radius(&self) -> f64 {
        self.semi_axis_row.max(self.semi_axis_col)
    }
}

/// Phantom description: geometry, background tissue, and ellipse regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub h: usize,
    pub w: usize,
    pub background_t1_ms: f64,
    pub background_t2_ms: f64,
    pub regions: Vec<EllipseRegion>,
}

impl PhantomSpec {
    /// The 32x32 desk phantom: uniform background and three ellipses.
    pub fn desk_default() -> Self {
        Self {
            h: 32,
            w: 32,
            background_t1_ms: 500.0,
            background_t2_ms: 50.0,
            regions: vec![
                EllipseRegion {
                    center_row: 10.0,
                    center_col: 10.0,
                    semi_axis_row: 6.0,
                    semi_axis_col: 4.5,
                    angle_rad: 0.5,
                    t1_ms: 800.0,
                    t2_ms: 80.0,
                },
                EllipseRegion {
                    center_row: 12.0,
                    center_col: 22.0,
                    semi_axis_row: 5.0,
                    semi_axis_col: 3.5,
                    angle_rad: -0.4,
                    t1_ms: 1200.0,
                    t2_ms: 110.0,
                },
                EllipseRegion {
                    center_row: 23.0,
                    center_col: 16.0,
                    semi_axis_row: 5.5,
                    semi_axis_col: 7.5,
                    angle_rad: 0.2,
                    t1_ms: 2000.0,
                    t2_ms: 300.0,
                },
            ],
        }
    }

    /// Checks geometry, tissue validity, and region bounds.
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(Error::parameter(format!(
                "eval: phantom geometry {}x{} must be nonzero",
                self.h, self.w
            )));
        }
        TissueParams::new(self.background_t1_ms, self.background_t2_ms)
            .map_err(|e| Error::parameter(format!("eval: phantom background: {e}")))?;
        for (i, region) in self.regions.iter().enumerate() {
            TissueParams::new(region.t1_ms, region.t2_ms)
                .map_err(|e| Error::parameter(format!("eval: phantom region {i}: {e}")))?;
            if !(region.semi_axis_row > 0.0 && region.semi_axis_col > 0.0) {
                return Err(Error::parameter(format!(
                    "eval: phantom region {i} has non-positive semi-axes"
                )));
            }
            let rad = region.bounding_radius();
            let in_bounds = region.center_row - rad >= -0.5
                && region.center_row + rad <= self.h as f64 - 0.5
                && region.center_col - rad >= -0.5
                && region.center_col + rad <= self.w as f64 - 0.5;
            if !in_bounds {
                return Err(Error::parameter(format!(
                    "eval: phantom region {i} extends outside the {}x{} frame",
                    self.h, self.w
                )));
            }
        }
        Ok(())
    }
}

/// Rasterizes a phantom back-to-front into T1 and T2 maps.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Array2<f64>, Array2<f64>)> {
    spec.validate()?;
    let mut t1 = Array2::from_elem((spec.h, spec.w), spec.background_t1_ms);
    let mut t2 = Array2::from_elem((spec.h, spec.w), spec.background_t2_ms);
    for region in &spec.regions {
        for r in 0..spec.h {
            for c in 0..spec.w {
                if region.contains(r as f64, c as f64) {
                    t1[(r, c)] = region.t1_ms;
                    t2[(r, c)] = region.t2_ms;
                }
            }
        }
    }
    Ok((t1, t2))
}

/// Simulates a signature stack from pixelwise tissue maps.
///
/// Each distinct `(t1, t2)` pair is simulated once and broadcast to every
/// pixel holding it, which is bitwise identical to per-pixel simulation.
pub fn phantom_to_stack(
    t1_map: ArrayView2<f64>,
    t2_map: ArrayView2<f64>,
    seq: &SequenceParams,
) -> Result<ContrastStack> {
    if t1_map.dim() != t2_map.dim() {
        return Err(Error::shape(format!(
            "eval: T1 map is {}x{} but T2 map is {}x{}",
            t1_map.dim().0,
            t1_map.dim().1,
            t2_map.dim().0,
            t2_map.dim().1
        )));
    }
    let (h, w) = t1_map.dim();
    if h == 0 || w == 0 {
        return Err(Error::shape("eval: tissue maps are empty"));
    }
    let mut index_of: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    let mut tissues: Vec<TissueParams> = Vec::new();
    let mut pixel_tissue = vec![0usize; h * w];
    for r in 0..h {
        for c in 0..w {
            let (t1, t2) = (t1_map[(r, c)], t2_map[(r, c)]);
            let key = (t1.to_bits(), t2.to_bits());
            let idx = *index_of.entry(key).or_insert_with(|| {
                tissues.push(TissueParams { t1_ms: t1, t2_ms: t2 });
                tissues.len() - 1
            });
            pixel_tissue[r * w + c] = idx;
        }
    }
    for (i, tissue) in tissues.iter().enumerate() {
        tissue.validate().map_err(|e| {
            Error::parameter(format!("eval: tissue map value {i}: {e}"))
        })?;
    }
    let signatures = epg::simulate_batch(&tissues, seq, None)?;
    let frames = signatures.ncols();
    let mut data = Array2::zeros((h * w, frames));
    for (pixel, &idx) in pixel_tissue.iter().enumerate() {
        for f in 0..frames {
            data[(pixel, f)] = signatures[(idx, f)];
        }
    }
    ContrastStack::new(data, h, w)
}

/// Metrics for one parameter map; `corrcoef` is absent for a constant map.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MapMetrics {
    pub rmse_ms: f64,
    pub snr_db: f64,
    pub psnr_db: f64,
    pub corrcoef: Option<f64>,
}

/// Computes the four map metrics against a ground-truth map.
pub fn map_metrics(
    x_true: ArrayView2<f64>,
    x_est: ArrayView2<f64>,
    convention: SnrConvention,
) -> Result<MapMetrics> {
    let peak = x_true.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::parameter("eval: true map is identically zero"));
    }
    Ok(MapMetrics {
        rmse_ms: rmse(x_true, x_est)?,
        snr_db: snr_db(x_true, x_est, convention)?,
        psnr_db: psnr_db(x_true, x_est, peak)?,
        corrcoef: corrcoef(x_true, x_est).ok(),
    })
}

/// Full evaluation report for a reconstruction run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub t1: MapMetrics,
    pub t2: MapMetrics,
    pub snr_convention: SnrConvention,
    pub timings_s: BTreeMap<String, f64>,
}

impl MetricsReport {
    /// Column header matching `csv_row`.
    pub fn csv_header() -> &'static str {
        "t1_rmse_ms,t1_snr_db,t1_psnr_db,t1_corrcoef,\
         t2_rmse_ms,t2_snr_db,t2_psnr_db,t2_corrcoef"
    }

    /// One CSV row of the eight metric values; absent correlations are empty.
    pub fn csv_row(&self) -> String {
        let corr = |c: Option<f64>| c.map_or_else(String::new, |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.t1.rmse_ms,
            self.t1.snr_db,
            self.t1.psnr_db,
            corr(self.t1.corrcoef),
            self.t2.rmse_ms,
            self.t2.snr_db,
            self.t2.psnr_db,
            corr(self.t2.corrcoef)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::{generate_fisp, FispConfig};
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ones_and_offset() -> (Array2<f64>, Array2<f64>) {
        let x = Array2::from_elem((2, 5), 1.0);
        let y = x.mapv(|v| v + 0.1);
        (x, y)
    }

    #[test]
    fn rmse_hand_values() {
        let (x, y) = ones_and_offset();
        assert_eq!(rmse(x.view(), x.view()).unwrap(), 0.0);
        assert!((rmse(x.view(), y.view()).unwrap() - 0.1).abs() <= 1e-12);
        let a = Array2::from_elem((1, 1), 3.0);
        let b = Array2::from_elem((1, 1), 7.0);
        assert_eq!(rmse(a.view(), b.view()).unwrap(), 4.0);
    }

    #[test]
    fn snr_and_psnr_hand_values() {
        let (x, y) = ones_and_offset();
        let snr = snr_db(x.view(), y.view(), SnrConvention::Paper).unwrap();
        assert!((snr - 40.0).abs() <= 1e-12, "{snr}");
        let snr_std = snr_db(x.view(), y.view(), SnrConvention::Standard).unwrap();
        let expect = 20.0 * (10.0f64.sqrt() / rmse(x.view(), y.view()).unwrap()).log10();
        assert!((snr_std - expect).abs() <= 1e-12);
        let psnr = psnr_db(x.view(), y.view(), 1.0).unwrap();
        assert!((psnr - 20.0).abs() <= 1e-12, "{psnr}");
        assert!(snr_db(x.view(), x.view(), SnrConvention::Paper).unwrap().is_infinite());
        assert!(psnr_db(x.view(), x.view(), 1.0).unwrap().is_infinite());
        assert!(psnr_db(x.view(), y.view(), 0.0).is_err());
    }

    #[test]
    fn corrcoef_hand_values() {
        let x = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = corrcoef(x.view(), x.view()).unwrap();
        assert!((r - 1.0).abs() <= 1e-12);
        let neg = x.mapv(|v| -v);
        let r = corrcoef(x.view(), neg.view()).unwrap();
        assert!((r + 1.0).abs() <= 1e-12);
        let constant = Array2::from_elem((2, 3), 5.0);
        assert!(corrcoef(x.view(), constant.view()).is_err());
    }

    #[test]
    fn corrcoef_of_independent_noise_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Array::from_shape_fn((100, 100), |_| rng.gen::<f64>());
        let b = Array::from_shape_fn((100, 100), |_| rng.gen::<f64>());
        let r = corrcoef(a.view(), b.view()).unwrap();
        assert!(r.abs() < 0.05, "{r}");
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Vec<f64> = (0..24).map(|_| rng.gen::<f64>() * 10.0).collect();
        let b: Vec<f64> = (0..24).map(|_| rng.gen::<f64>() * 10.0).collect();
        let mut order: Vec<usize> = (0..24).collect();
        for i in (1..24).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let pa: Vec<f64> = order.iter().map(|&i| a[i]).collect();
        let pb: Vec<f64> = order.iter().map(|&i| b[i]).collect();
        let (a, b) = (
            Array2::from_shape_vec((4, 6), a).unwrap(),
            Array2::from_shape_vec((4, 6), b).unwrap(),
        );
        let (pa, pb) = (
            Array2::from_shape_vec((6, 4), pa).unwrap(),
            Array2::from_shape_vec((6, 4), pb).unwrap(),
        );
        assert!((rmse(a.view(), b.view()).unwrap() - rmse(pa.view(), pb.view()).unwrap()).abs() <= 1e-12);
        assert!(
            (snr_db(a.view(), b.view(), SnrConvention::Paper).unwrap()
                - snr_db(pa.view(), pb.view(), SnrConvention::Paper).unwrap())
            .abs()
                <= 1e-12
        );
        assert!((corrcoef(a.view(), b.view()).unwrap() - corrcoef(pa.view(), pb.view()).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn empty_region_list_gives_constant_maps() {
        let spec = PhantomSpec {
            h: 8,
            w: 6,
            background_t1_ms: 500.0,
            background_t2_ms: 50.0,
            regions: vec![],
        };
        let (t1, t2) = make_phantom(&spec).unwrap();
        assert!(t1.iter().all(|&v| v == 500.0));
        assert!(t2.iter().all(|&v| v == 50.0));
    }

    #[test]
    fn desk_phantom_rasterizes_regions() {
        let spec = PhantomSpec::desk_default();
        let (t1, t2) = make_phantom(&spec).unwrap();
        assert_eq!(t1.dim(), (32, 32));
        assert_eq!(t1[(10, 10)], 800.0);
        assert_eq!(t2[(10, 10)], 80.0);
        assert_eq!(t1[(12, 22)], 1200.0);
        assert_eq!(t1[(23, 16)], 2000.0);
        assert_eq!(t1[(0, 0)], 500.0);
        let mut distinct: Vec<u64> = t1.iter().map(|v| v.to_bits()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        assert!(distinct.len() <= 4);
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn region_out_of_bounds_is_rejected() {
        let mut spec = PhantomSpec::desk_default();
        spec.regions[0].center_col = 30.0;
        assert!(make_phantom(&spec).is_err());
    }

    #[test]
    fn later_regions_overwrite_earlier() {
        let mut region_a = PhantomSpec::desk_default().regions[0];
        region_a.center_row = 8.0;
        region_a.center_col = 8.0;
        let mut region_b = region_a;
        region_b.t1_ms = 1500.0;
        region_b.t2_ms = 200.0;
        let spec = PhantomSpec {
            h: 16,
            w: 16,
            background_t1_ms: 500.0,
            background_t2_ms: 50.0,
            regions: vec![region_a, region_b],
        };
        let (t1, _) = make_phantom(&spec).unwrap();
        assert_eq!(t1[(8, 8)], 1500.0);
    }

    #[test]
    fn constant_maps_give_rank_one_stack() {
        let seq = generate_fisp(&FispConfig::new(12, 3)).unwrap();
        let t1 = Array2::from_elem((4, 4), 800.0);
        let t2 = Array2::from_elem((4, 4), 80.0);
        let stack = phantom_to_stack(t1.view(), t2.view(), &seq).unwrap();
        let first = stack.data.row(0).to_owned();
        for row in stack.data.rows() {
            for (a, b) in row.iter().zip(first.iter()) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn distinct_tissues_give_distinct_rows() {
        let seq = generate_fisp(&FispConfig::new(16, 4)).unwrap();
        let spec = PhantomSpec::desk_default();
        let (t1, t2) = make_phantom(&spec).unwrap();
        let stack = phantom_to_stack(t1.view(), t2.view(), &seq).unwrap();
        let mut rows: Vec<Vec<(u64, u64)>> = stack
            .data
            .rows()
            .into_iter()
            .map(|row| row.iter().map(|v| (v.re.to_bits(), v.im.to_bits())).collect())
            .collect();
        rows.sort_unstable();
        rows.dedup();
        assert_eq!(rows.len(), 4);
    }

    #[test]
    fn memoized_stack_matches_per_pixel_simulation() {
        let seq = generate_fisp(&FispConfig::new(10, 5)).unwrap();
        let spec = PhantomSpec::desk_default();
        let (t1, t2) = make_phantom(&spec).unwrap();
        let stack = phantom_to_stack(t1.view(), t2.view(), &seq).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                let tissue = TissueParams {
                    t1_ms: t1[(r, c)],
                    t2_ms: t2[(r, c)],
                };
                let direct = epg::simulate_signature(&tissue, &seq, None).unwrap();
                for (a, b) in stack.data.row(r * 32 + c).iter().zip(direct.iter()) {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn report_serializes_and_rows_match() {
        let x = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = x.mapv(|v| v + 0.1);
        let m = map_metrics(x.view(), y.view(), SnrConvention::Paper).unwrap();
        let mut timings = BTreeMap::new();
        timings.insert("restore".to_string(), 1.25);
        let report = MetricsReport {
            t1: m,
            t2: m,
            snr_convention: SnrConvention::Paper,
            timings_s: timings,
        };
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.t1.rmse_ms, report.t1.rmse_ms);
        let row = report.csv_row();
        assert_eq!(row.split(',').count(), 8);
        assert_eq!(MetricsReport::csv_header().split(',').count(), 8);
    }

    #[test]
    fn map_metrics_degrade_correlation_on_constant_estimate() {
        let x = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let flat = Array2::from_elem((2, 3), 2.0);
        let m = map_metrics(x.view(), flat.view(), SnrConvention::Paper).unwrap();
        assert!(m.rmse_ms.is_finite() && m.rmse_ms > 0.0);
        assert!(m.corrcoef.is_none());
        let report = MetricsReport {
            t1: m,
            t2: m,
            snr_convention: SnrConvention::Paper,
            timings_s: BTreeMap::new(),
        };
        assert_eq!(report.csv_row().split(',').count(), 8);
    }
}
