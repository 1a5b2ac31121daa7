//! T1/T2 lookup-table grids, dictionary synthesis, and correlation matching.
//!
//! A dictionary pairs a `K x 2` lookup table of tissue parameters with the
//! `K x L` complex signature matrix obtained by simulating each entry under a
//! fixed acquisition schedule. Matching scores a query signature against every
//! row and returns the best entry's parameters.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epg::{self, TissueParams};
use crate::error::{Error, Result};
use crate::persist;
use crate::sequence::SequenceParams;

/// Inclusive arithmetic grid `min, min+step, ..` capped at `max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRange {
    pub min_ms: f64,
    pub max_ms: f64,
    pub step_ms: f64,
}

impl GridRange {
    /// Builds a validated grid range.
    pub fn new(min_ms: f64, max_ms: f64, step_ms: f64) -> Result<Self> {
        if !(min_ms.is_finite() && max_ms.is_finite() && step_ms.is_finite()) {
            return Err(Error::parameter(format!(
                "dict: grid range ({min_ms}, {max_ms}, {step_ms}) must be finite"
            )));
        }
        if min_ms < 1.0 {
            return Err(Error::parameter(format!(
                "dict: grid minimum {min_ms} ms must be at least 1 ms"
            )));
        }
        if step_ms <= 0.0 {
            return Err(Error::parameter(format!(
                "dict: grid step {step_ms} ms must be positive"
            )));
        }
        if max_ms < min_ms {
            return Err(Error::parameter(format!(
                "dict: grid maximum {max_ms} ms is below minimum {min_ms} ms"
            )));
        }
        Ok(Self {
            min_ms,
            max_ms,
            step_ms,
        })
    }

    /// Number of grid points, robust to floating-point span rounding.
    pub fn count(&self) -> usize {
        ((self.max_ms - self.min_ms) / self.step_ms + 1e-9).floor() as usize + 1
    }

    /// Value of the `i`-th grid point.
    pub fn value(&self, i: usize) -> f64 {
        self.min_ms + i as f64 * self.step_ms
    }

    /// All grid points in ascending order.
    pub fn values(&self) -> Vec<f64> {
        (0..self.count()).map(|i| self.value(i)).collect()
    }
}

/// Grid descriptor recorded when a lookup table was generated from ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridDescriptor {
    pub t1: GridRange,
    pub t2: GridRange,
}

/// `K x 2` table of `(t1_ms, t2_ms)` tissue parameter entries.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    pub entries: Vec<(f64, f64)>,
    pub grid: Option<GridDescriptor>,
}

impl LookupTable {
    /// Builds a table from explicit entries, checking every invariant.
    pub fn from_entries(entries: Vec<(f64, f64)>) -> Result<Self> {
        let lut = Self {
            entries,
            grid: None,
        };
        lut.validate()?;
        Ok(lut)
    }

    /// Number of entries `K`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// True when the table has no entries.
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks entry validity: nonempty, physical tissues, unique rows.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::parameter("dict: lookup table has no entries"));
        }
        let mut seen = BTreeSet::new();
        for (k, &(t1, t2)) in self.entries.iter().enumerate() {
            TissueParams::new(t1, t2).map_err(|e| {
                Error::parameter(format!("dict: lookup table row {k}: {e}"))
            })?;
            if !seen.insert((t1.to_bits(), t2.to_bits())) {
                return Err(Error::parameter(format!(
                    "dict: lookup table row {k} ({t1} ms, {t2} ms) is a duplicate"
                )));
            }
        }
        Ok(())
    }
}

/// Enumerates the T1/T2 product grid, keeping physical pairs with `t1 >= t2`.
///
/// Rows are ordered with t2 as the slow axis and t1 ascending within each t2.
pub fn build_lut(t1_range: &GridRange, t2_range: &GridRange) -> Result<LookupTable> {
    let t1_values = t1_range.values();
    let t2_values = t2_range.values();
    let mut entries = Vec::new();
    for &t2 in &t2_values {
        for &t1 in &t1_values {
            if t1 >= t2 {
                entries.push((t1, t2));
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::parameter(format!(
            "dict: grid T1 [{}, {}] x T2 [{}, {}] has no pairs with t1 >= t2",
            t1_range.min_ms, t1_range.max_ms, t2_range.min_ms, t2_range.max_ms
        )));
    }
    Ok(LookupTable {
        entries,
        grid: Some(GridDescriptor {
            t1: *t1_range,
            t2: *t2_range,
        }),
    })
}

/// Signature dictionary: `K x L` complex matrix with cached row norms.
#[derive(Debug, Clone)]
pub struct Dictionary {
    pub signatures: Array2<Complex64>,
    pub norms_sq: Vec<f64>,
    pub lut: LookupTable,
    pub sequence_fingerprint: u64,
}

impl Dictionary {
    /// Number of entries `K`.
    pub fn len(&self) -> usize {
        self.signatures.nrows()
    }

    /// True when the dictionary has no entries.
    pub fn is_empty(&self) -> bool {
        self.signatures.nrows() == 0
    }

    /// Signature length `L`.
    pub fn signature_len(&self) -> usize {
        self.signatures.ncols()
    }
}

/// Simulates every lookup-table entry under `seq` and caches row norms.
pub fn build_dictionary(lut: &LookupTable, seq: &SequenceParams) -> Result<Dictionary> {
    lut.validate()?;
    seq.validate()?;
    let tissues: Vec<TissueParams> = lut
        .entries
        .iter()
        .map(|&(t1, t2)| TissueParams { t1_ms: t1, t2_ms: t2 })
        .collect();
    let signatures = epg::simulate_batch(&tissues, seq, None)?;
    let norms_sq: Vec<f64> = signatures
        .rows()
        .into_iter()
        .map(|row| row.iter().map(|v| v.norm_sqr()).sum())
        .collect();
    for (k, &n) in norms_sq.iter().enumerate() {
        if !(n > 0.0) {
            return Err(Error::numerical(format!(
                "dict: signature row {k} is identically zero"
            )));
        }
    }
    Ok(Dictionary {
        signatures,
        norms_sq,
        lut: lut.clone(),
        sequence_fingerprint: seq.fingerprint(),
    })
}

/// Score denominator convention for matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MatchNorm {
    /// Divide the correlation by the squared row norm.
    #[default]
    #[serde(rename = "sq")]
    SquaredNorm,
    /// Divide the correlation by the row norm.
    #[serde(rename = "unit")]
    UnitNorm,
}

impl fmt::Display for MatchNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchNorm::SquaredNorm => write!(f, "sq"),
            MatchNorm::UnitNorm => write!(f, "unit"),
        }
    }
}

impl FromStr for MatchNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sq" => Ok(MatchNorm::SquaredNorm),
            "unit" => Ok(MatchNorm::UnitNorm),
            other => Err(Error::parameter(format!(
                "dict: unknown match norm '{other}' (expected 'sq' or 'unit')"
            ))),
        }
    }
}

fn score_denominator(norm_sq: f64, norm: MatchNorm) -> f64 {
    match norm {
        MatchNorm::SquaredNorm => norm_sq,
        MatchNorm::UnitNorm => norm_sq.sqrt(),
    }
}

/// Matches one query signature; returns the best row index and its parameters.
///
/// The score is the real part of the conjugated inner product of the row with
/// the query, divided by the convention's denominator. Ties keep the lowest
/// row index.
pub fn match_signature(
    dict: &Dictionary,
    query: ArrayView1<Complex64>,
    norm: MatchNorm,
) -> Result<(usize, TissueParams)> {
    if query.len() != dict.signature_len() {
        return Err(Error::shape(format!(
            "dict: query length {} does not match signature length {}",
            query.len(),
            dict.signature_len()
        )));
    }
    if query.iter().all(|v| *v == Complex64::new(0.0, 0.0)) {
        return Err(Error::parameter("dict: query signature is identically zero"));
    }
    let query_conj: Array1<Complex64> = query.iter().map(|v| v.conj()).collect();
    let correlations = dict.signatures.dot(&query_conj);
    let mut best_k = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (k, corr) in correlations.iter().enumerate() {
        let score = corr.re / score_denominator(dict.norms_sq[k], norm);
        if score > best_score {
            best_score = score;
            best_k = k;
        }
    }
    if !best_score.is_finite() {
        return Err(Error::numerical(format!(
            "dict: non-finite match score {best_score} at row {best_k}"
        )));
    }
    let (t1, t2) = dict.lut.entries[best_k];
    Ok((best_k, TissueParams { t1_ms: t1, t2_ms: t2 }))
}

/// Real part of the conjugated inner product of two equal-length signatures.
fn correlation_re(d: &[Complex64], q: &[Complex64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut chunks_d = d.chunks_exact(4);
    let mut chunks_q = q.chunks_exact(4);
    for (dc, qc) in chunks_d.by_ref().zip(chunks_q.by_ref()) {
        for i in 0..4 {
            acc[i] += dc[i].re * qc[i].re + dc[i].im * qc[i].im;
        }
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (dv, qv) in chunks_d.remainder().iter().zip(chunks_q.remainder()) {
        sum += dv.re * qv.re + dv.im * qv.im;
    }
    sum
}

/// Matches every row of a signature stack; returns an `N x 2` parameter matrix.
///
/// The dictionary is streamed once per call in row blocks shared by all
/// queries, so the cost grows linearly with the number of entries.
pub fn match_batch(
    dict: &Dictionary,
    stack: ArrayView2<Complex64>,
    norm: MatchNorm,
) -> Result<Array2<f64>> {
    let n = stack.nrows();
    if stack.ncols() != dict.signature_len() {
        return Err(Error::shape(format!(
            "dict: stack width {} does not match signature length {}",
            stack.ncols(),
            dict.signature_len()
        )));
    }
    let probes = stack.as_standard_layout();
    for (j, row) in probes.rows().into_iter().enumerate() {
        if row.iter().all(|v| *v == Complex64::new(0.0, 0.0)) {
            return Err(Error::parameter(format!(
                "dict: stack row {j}: query signature is identically zero"
            )));
        }
    }
    let signatures = dict.signatures.as_standard_layout();
    let denom: Vec<f64> = dict
        .norms_sq
        .iter()
        .map(|&ns| score_denominator(ns, norm))
        .collect();
    const BLOCK: usize = 128;
    let starts: Vec<usize> = (0..dict.len()).step_by(BLOCK).collect();
    let better = |cand: (f64, usize), best: (f64, usize)| {
        cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1)
    };
    let best = starts
        .into_par_iter()
        .map(|start| {
            let end = (start + BLOCK).min(dict.len());
            let mut local = vec![(f64::NEG_INFINITY, 0usize); n];
            for k in start..end {
                let d = signatures.row(k);
                let d = d.to_slice().expect("contiguous dictionary row");
                for (j, q) in probes.rows().into_iter().enumerate() {
                    let q = q.to_slice().expect("contiguous query row");
                    let score = correlation_re(d, q) / denom[k];
                    if better((score, k), local[j]) {
                        local[j] = (score, k);
                    }
                }
            }
            local
        })
        .reduce(
            || vec![(f64::NEG_INFINITY, 0usize); n],
            |mut lhs, rhs| {
                for (a, b) in lhs.iter_mut().zip(rhs) {
                    if better(b, *a) {
                        *a = b;
                    }
                }
                lhs
            },
        );
    let mut out = Array2::zeros((n, 2));
    for (j, &(score, k)) in best.iter().enumerate() {
        if !score.is_finite() {
            return Err(Error::numerical(format!(
                "dict: non-finite match score {score} at row {k}"
            )));
        }
        let (t1, t2) = dict.lut.entries[k];
        out[(j, 0)] = t1;
        out[(j, 1)] = t2;
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct DictionarySidecar {
    entries: usize,
    signature_len: usize,
    sequence_fingerprint: u64,
    grid: Option<GridDescriptor>,
}

/// Writes `signatures.hyt`, `lut.csv`, and `dictionary.json` into `dir`.
pub fn save_dictionary(dict: &Dictionary, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    persist::write_tensor(
        dir.join("signatures.hyt"),
        &persist::Tensor::Complex(dict.signatures.clone().into_dyn()),
    )?;
    let mut csv = String::from("t1_ms,t2_ms\n");
    for &(t1, t2) in &dict.lut.entries {
        csv.push_str(&format!("{t1},{t2}\n"));
    }
    let csv_path = dir.join("lut.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    persist::write_json(
        dir.join("dictionary.json"),
        &DictionarySidecar {
            entries: dict.len(),
            signature_len: dict.signature_len(),
            sequence_fingerprint: dict.sequence_fingerprint,
            grid: dict.lut.grid,
        },
    )
}

/// Loads a dictionary saved by `save_dictionary`, revalidating every part.
pub fn load_dictionary(dir: impl AsRef<Path>) -> Result<Dictionary> {
    let dir = dir.as_ref();
    let tensor = persist::read_tensor(dir.join("signatures.hyt"))?;
    let signatures = tensor.into_complex()?;
    let signatures: Array2<Complex64> = signatures.into_dimensionality().map_err(|_| {
        Error::integrity(format!(
            "dict: {} does not hold a 2-d signature matrix",
            dir.join("signatures.hyt").display()
        ))
    })?;
    let csv_path = dir.join("lut.csv");
    let text = std::fs::read_to_string(&csv_path)
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::integrity(format!("dict: {} is empty", csv_path.display())))?;
    if header != "t1_ms,t2_ms" {
        return Err(Error::integrity(format!(
            "dict: {} has header '{header}', expected 't1_ms,t2_ms'",
            csv_path.display()
        )));
    }
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let mut next_value = |name: &str| -> Result<f64> {
            fields
                .next()
                .ok_or_else(|| {
                    Error::integrity(format!(
                        "dict: {} row {i} is missing field {name}",
                        csv_path.display()
                    ))
                })?
                .parse::<f64>()
                .map_err(|_| {
                    Error::integrity(format!(
                        "dict: {} row {i} has a malformed {name}",
                        csv_path.display()
                    ))
                })
        };
        let t1 = next_value("t1_ms")?;
        let t2 = next_value("t2_ms")?;
        entries.push((t1, t2));
    }
    let sidecar: DictionarySidecar = persist::read_json(dir.join("dictionary.json"))?;
    if entries.len() != signatures.nrows() {
        return Err(Error::integrity(format!(
            "dict: lut.csv has {} rows but signatures.hyt has {}",
            entries.len(),
            signatures.nrows()
        )));
    }
    if sidecar.entries != signatures.nrows() || sidecar.signature_len != signatures.ncols() {
        return Err(Error::integrity(format!(
            "dict: dictionary.json records {} x {} but signatures.hyt is {} x {}",
            sidecar.entries,
            sidecar.signature_len,
            signatures.nrows(),
            signatures.ncols()
        )));
    }
    let lut = LookupTable {
        entries,
        grid: sidecar.grid,
    };
    lut.validate()?;
    let norms_sq: Vec<f64> = signatures
        .rows()
        .into_iter()
        .map(|row| row.iter().map(|v| v.norm_sqr()).sum())
        .collect();
    for (k, &n) in norms_sq.iter().enumerate() {
        if !(n > 0.0) {
            return Err(Error::integrity(format!(
                "dict: loaded signature row {k} is identically zero"
            )));
        }
    }
    Ok(Dictionary {
        signatures,
        norms_sq,
        lut,
        sequence_fingerprint: sidecar.sequence_fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epg::simulate_signature;
    use crate::sequence::{generate_fisp, FispConfig};

    fn desk_sequence(frames: usize) -> SequenceParams {
        generate_fisp(&FispConfig::new(frames, 7)).unwrap()
    }

    fn desk_dictionary(frames: usize) -> Dictionary {
        let t1 = GridRange::new(100.0, 2000.0, 100.0).unwrap();
        let t2 = GridRange::new(10.0, 100.0, 10.0).unwrap();
        let lut = build_lut(&t1, &t2).unwrap();
        assert_eq!(lut.len(), 200);
        build_dictionary(&lut, &desk_sequence(frames)).unwrap()
    }

    #[test]
    fn grid_range_counts() {
        assert_eq!(GridRange::new(1.0, 5000.0, 10.0).unwrap().count(), 500);
        assert_eq!(GridRange::new(1.0, 2000.0, 10.0).unwrap().count(), 200);
        assert_eq!(GridRange::new(100.0, 200.0, 100.0).unwrap().count(), 2);
        assert_eq!(GridRange::new(5.0, 5.0, 1.0).unwrap().count(), 1);
        assert_eq!(GridRange::new(5.0, 7.0, 10.0).unwrap().count(), 1);
        let r = GridRange::new(100.0, 130.0, 10.0).unwrap();
        assert_eq!(r.values(), vec![100.0, 110.0, 120.0, 130.0]);
    }

    #[test]
    fn grid_range_rejects_invalid() {
        assert!(GridRange::new(0.5, 10.0, 1.0).is_err());
        assert!(GridRange::new(10.0, 5.0, 1.0).is_err());
        assert!(GridRange::new(1.0, 10.0, 0.0).is_err());
        assert!(GridRange::new(1.0, 10.0, -1.0).is_err());
        assert!(GridRange::new(1.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn build_lut_enumerates_small_grid_by_hand() {
        let t1 = GridRange::new(100.0, 200.0, 100.0).unwrap();
        let t2 = GridRange::new(50.0, 150.0, 100.0).unwrap();
        let lut = build_lut(&t1, &t2).unwrap();
        assert_eq!(
            lut.entries,
            vec![(100.0, 50.0), (200.0, 50.0), (200.0, 150.0)]
        );
        assert_eq!(lut.len(), 3);
        assert!(lut.grid.is_some());
    }

    #[test]
    fn build_lut_full_grid_size() {
        let t1 = GridRange::new(1.0, 5000.0, 10.0).unwrap();
        let t2 = GridRange::new(1.0, 2000.0, 10.0).unwrap();
        let lut = build_lut(&t1, &t2).unwrap();
        assert_eq!(lut.len(), 80100);
        assert!(lut.entries.iter().all(|&(t1, t2)| t1 >= t2));
        lut.validate().unwrap();
    }

    #[test]
    fn build_lut_excludes_unphysical_pairs() {
        let t1 = GridRange::new(100.0, 300.0, 100.0).unwrap();
        let t2 = GridRange::new(100.0, 300.0, 100.0).unwrap();
        let lut = build_lut(&t1, &t2).unwrap();
        assert!(!lut.entries.contains(&(100.0, 300.0)));
        assert!(lut.entries.contains(&(300.0, 300.0)));
        assert_eq!(lut.len(), 6);
    }

    #[test]
    fn build_lut_rejects_empty_result() {
        let t1 = GridRange::new(10.0, 20.0, 10.0).unwrap();
        let t2 = GridRange::new(500.0, 600.0, 100.0).unwrap();
        assert!(build_lut(&t1, &t2).is_err());
    }

    #[test]
    fn lookup_table_rejects_duplicates_and_bad_rows() {
        assert!(LookupTable::from_entries(vec![(100.0, 50.0), (100.0, 50.0)]).is_err());
        assert!(LookupTable::from_entries(vec![(100.0, 300.0)]).is_err());
        assert!(LookupTable::from_entries(vec![]).is_err());
        LookupTable::from_entries(vec![(100.0, 50.0), (100.0, 100.0)]).unwrap();
    }

    #[test]
    fn build_dictionary_matches_sequential_simulation() {
        let lut = LookupTable::from_entries(vec![
            (100.0, 50.0),
            (200.0, 50.0),
            (200.0, 150.0),
        ])
        .unwrap();
        let seq = desk_sequence(10);
        let dict = build_dictionary(&lut, &seq).unwrap();
        assert_eq!(dict.signatures.dim(), (3, 10));
        for (k, &(t1, t2)) in lut.entries.iter().enumerate() {
            let direct =
                simulate_signature(&TissueParams { t1_ms: t1, t2_ms: t2 }, &seq, None).unwrap();
            for (a, b) in dict.signatures.row(k).iter().zip(direct.iter()) {
                assert_eq!(a, b);
            }
            let norm_sq: f64 = direct.iter().map(|v| v.norm_sqr()).sum();
            assert!((dict.norms_sq[k] - norm_sq).abs() <= 1e-10 * norm_sq);
        }
        assert_eq!(dict.sequence_fingerprint, seq.fingerprint());
    }

    #[test]
    fn build_dictionary_single_row() {
        let lut = LookupTable::from_entries(vec![(800.0, 80.0)]).unwrap();
        let dict = build_dictionary(&lut, &desk_sequence(12)).unwrap();
        assert_eq!(dict.signatures.dim(), (1, 12));
    }

    #[test]
    fn self_match_recovers_every_entry_under_unit_norm() {
        let dict = desk_dictionary(100);
        for k in 0..dict.len() {
            let (got, tissue) =
                match_signature(&dict, dict.signatures.row(k), MatchNorm::UnitNorm).unwrap();
            assert_eq!(got, k, "row {k} matched to {got}");
            assert_eq!(tissue.t1_ms, dict.lut.entries[k].0);
            assert_eq!(tissue.t2_ms, dict.lut.entries[k].1);
        }
    }

    #[test]
    fn match_agrees_with_brute_force_oracle() {
        let dict = desk_dictionary(60);
        let mut query = dict.signatures.row(17).to_owned();
        for (i, v) in query.iter_mut().enumerate() {
            *v += Complex64::new(1e-4 * (i as f64).sin(), 1e-4 * (i as f64).cos());
        }
        for norm in [MatchNorm::SquaredNorm, MatchNorm::UnitNorm] {
            let (got, _) = match_signature(&dict, query.view(), norm).unwrap();
            let mut best = (0usize, f64::NEG_INFINITY);
            for k in 0..dict.len() {
                let corr: Complex64 = dict
                    .signatures
                    .row(k)
                    .iter()
                    .zip(query.iter())
                    .map(|(d, q)| d.conj() * q)
                    .sum();
                let score = corr.re / score_denominator(dict.norms_sq[k], norm);
                if score > best.1 {
                    best = (k, score);
                }
            }
            assert_eq!(got, best.0);
        }
    }

    #[test]
    fn match_is_invariant_to_positive_scaling() {
        let dict = desk_dictionary(40);
        let query = dict.signatures.row(123).to_owned();
        let scaled = query.mapv(|v| v * 3.7);
        for norm in [MatchNorm::SquaredNorm, MatchNorm::UnitNorm] {
            let (a, _) = match_signature(&dict, query.view(), norm).unwrap();
            let (b, _) = match_signature(&dict, scaled.view(), norm).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn match_conjugates_the_dictionary_row() {
        let lut = LookupTable::from_entries(vec![(100.0, 50.0), (200.0, 50.0)]).unwrap();
        let mut signatures = Array2::zeros((2, 1));
        signatures[(0, 0)] = Complex64::new(0.0, 1.0);
        signatures[(1, 0)] = Complex64::new(1.0, 0.0);
        let dict = Dictionary {
            signatures,
            norms_sq: vec![1.0, 1.0],
            lut,
            sequence_fingerprint: 0,
        };
        let query = Array1::from_elem(1, Complex64::new(0.0, 1.0));
        let (k, _) = match_signature(&dict, query.view(), MatchNorm::SquaredNorm).unwrap();
        assert_eq!(k, 0);
    }

    #[test]
    fn match_norm_conventions_differ_on_a_hand_case() {
        let lut = LookupTable::from_entries(vec![(100.0, 50.0), (200.0, 50.0)]).unwrap();
        let mut signatures = Array2::zeros((2, 2));
        signatures[(0, 0)] = Complex64::new(1.0, 0.0);
        signatures[(1, 1)] = Complex64::new(3.0, 0.0);
        let dict = Dictionary {
            signatures,
            norms_sq: vec![1.0, 9.0],
            lut,
            sequence_fingerprint: 0,
        };
        let query = Array1::from_vec(vec![Complex64::new(1.0, 0.0), Complex64::new(3.0, 0.0)]);
        let (sq, _) = match_signature(&dict, query.view(), MatchNorm::SquaredNorm).unwrap();
        let (unit, _) = match_signature(&dict, query.view(), MatchNorm::UnitNorm).unwrap();
        assert_eq!(sq, 0, "tied scores keep the lowest index");
        assert_eq!(unit, 1);
    }

    #[test]
    fn match_rejects_bad_queries() {
        let dict = desk_dictionary(20);
        let zero = Array1::from_elem(20, Complex64::new(0.0, 0.0));
        assert!(match_signature(&dict, zero.view(), MatchNorm::SquaredNorm).is_err());
        let short = Array1::from_elem(19, Complex64::new(1.0, 0.0));
        assert!(match_signature(&dict, short.view(), MatchNorm::SquaredNorm).is_err());
    }

    #[test]
    fn match_batch_equals_sequential_and_respects_permutation() {
        let dict = desk_dictionary(30);
        let mut stack = Array2::zeros((64, 30));
        for j in 0..64 {
            let row = dict.signatures.row((j * 3) % dict.len());
            for (dst, src) in stack.row_mut(j).iter_mut().zip(row.iter()) {
                *dst = *src * Complex64::new(1.0, 0.0) + Complex64::new(1e-5, -1e-5);
            }
        }
        let batch = match_batch(&dict, stack.view(), MatchNorm::SquaredNorm).unwrap();
        assert_eq!(batch.dim(), (64, 2));
        for j in 0..64 {
            let (_, tissue) =
                match_signature(&dict, stack.row(j), MatchNorm::SquaredNorm).unwrap();
            assert_eq!(batch[(j, 0)], tissue.t1_ms);
            assert_eq!(batch[(j, 1)], tissue.t2_ms);
        }
        let mut reversed = Array2::zeros((64, 30));
        for j in 0..64 {
            reversed.row_mut(j).assign(&stack.row(63 - j));
        }
        let rev = match_batch(&dict, reversed.view(), MatchNorm::SquaredNorm).unwrap();
        for j in 0..64 {
            assert_eq!(rev[(j, 0)], batch[(63 - j, 0)]);
            assert_eq!(rev[(j, 1)], batch[(63 - j, 1)]);
        }
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dict = desk_dictionary(25);
        let dir = tempfile::tempdir().unwrap();
        save_dictionary(&dict, dir.path()).unwrap();
        let loaded = load_dictionary(dir.path()).unwrap();
        assert_eq!(loaded.signatures, dict.signatures);
        assert_eq!(loaded.lut.entries, dict.lut.entries);
        assert_eq!(loaded.lut.grid, dict.lut.grid);
        assert_eq!(loaded.sequence_fingerprint, dict.sequence_fingerprint);
    }

    #[test]
    fn load_rejects_tampered_lut() {
        let dict = desk_dictionary(15);
        let dir = tempfile::tempdir().unwrap();
        save_dictionary(&dict, dir.path()).unwrap();
        let csv_path = dir.path().join("lut.csv");
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let mut lines: Vec<String> = text.lines().map(|s| s.to_string()).collect();
        lines[1] = "50,900".to_string();
        std::fs::write(&csv_path, lines.join("\n") + "\n").unwrap();
        assert!(load_dictionary(dir.path()).is_err());
    }
}
