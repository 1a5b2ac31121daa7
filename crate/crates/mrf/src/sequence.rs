//! FISP pulse-sequence schedules: per-frame repetition time, echo time,
//! and flip angle, plus the optional leading inversion pulse.
//!
//! Flip angles follow a rectified sinusoid `fa_amplitude * |sin(2*pi*i/period)|`
//! and repetition times wander around a center value by a seeded 1D gradient
//! noise ("Perlin-style": random lattice gradients, smoothstep fade), so the
//! same seed always reproduces the same schedule bit for bit.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A complete acquisition schedule of `len()` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceParams {
    pub tr_ms: Vec<f64>,
    pub te_ms: Vec<f64>,
    pub fa_deg: Vec<f64>,
    pub inversion: bool,
    pub ti_ms: f64,
}

/// Knobs for [`generate_fisp`]. Defaults reproduce the reference schedule:
/// 0-70 degree rectified-sine flip angles with a 500-frame period, TR in
/// 11.5-14.5 ms around a 13 ms center, constant 2 ms TE, and a leading
/// inversion pulse with a 20 ms delay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FispConfig {
    pub frames: usize,
    pub seed: u64,
    pub fa_amplitude_deg: f64,
    pub fa_period: usize,
    pub tr_center_ms: f64,
    pub tr_halfspan_ms: f64,
    pub te_ms: f64,
    pub inversion: bool,
    pub ti_ms: f64,
}

impl FispConfig {
    pub fn new(frames: usize, seed: u64) -> Self {
        FispConfig {
            frames,
            seed,
            fa_amplitude_deg: 70.0,
            fa_period: 500,
            tr_center_ms: 13.0,
            tr_halfspan_ms: 1.5,
            te_ms: 2.0,
            inversion: true,
            ti_ms: 20.0,
        }
    }
}

const NOISE_LATTICE_SPACING: usize = 32;

/// Classic 1D gradient noise: a random gradient in [-1, 1] at every lattice
/// point, smoothstep-faded between neighbors. Values lie in [-1, 1] and are
/// exactly 0 at lattice points.
fn gradient_noise_1d(n_points: usize, lattice_spacing: usize, seed: u64) -> Vec<f64> {
    let n_lattice = n_points / lattice_spacing + 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gradients: Vec<f64> = (0..n_lattice).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    (0..n_points)
        .map(|i| {
            let i0 = i / lattice_spacing;
            let t = (i % lattice_spacing) as f64 / lattice_spacing as f64;
            let a = gradients[i0] * t;
            let b = gradients[i0 + 1] * (t - 1.0);
            let s = t * t * (3.0 - 2.0 * t);
            a + s * (b - a)
        })
        .collect()
}

/// Generate a FISP schedule from a seed. Pure in its arguments: the same
/// config always yields bit-identical vectors.
pub fn generate_fisp(config: &FispConfig) -> Result<SequenceParams> {
    if config.frames < 1 {
        return Err(Error::parameter("sequence: frames must be at least 1"));
    }
    if !(config.fa_amplitude_deg > 0.0 && config.fa_amplitude_deg <= 180.0) {
        return Err(Error::parameter(format!(
            "sequence: fa_amplitude_deg must lie in (0, 180], got {}",
            config.fa_amplitude_deg
        )));
    }
    if config.fa_period < 1 {
        return Err(Error::parameter("sequence: fa_period must be at least 1"));
    }
    if !(config.tr_halfspan_ms >= 0.0) {
        return Err(Error::parameter(format!(
            "sequence: tr_halfspan_ms must be nonnegative, got {}",
            config.tr_halfspan_ms
        )));
    }
    if !(config.te_ms < config.tr_center_ms - config.tr_halfspan_ms) {
        return Err(Error::parameter(format!(
            "sequence: te_ms ({}) must be below the smallest possible tr_ms ({})",
            config.te_ms,
            config.tr_center_ms - config.tr_halfspan_ms
        )));
    }
    if !(config.ti_ms >= 0.0 && config.ti_ms.is_finite()) {
        return Err(Error::parameter(format!(
            "sequence: ti_ms must be finite and nonnegative, got {}",
            config.ti_ms
        )));
    }
    let noise = gradient_noise_1d(config.frames, NOISE_LATTICE_SPACING, config.seed);
    let fa_deg: Vec<f64> = (0..config.frames)
        .map(|i| {
            let phase = 2.0 * std::f64::consts::PI * i as f64 / config.fa_period as f64;
            config.fa_amplitude_deg * phase.sin().abs()
        })
        .collect();
    let tr_ms: Vec<f64> = noise
        .iter()
        .map(|&p| config.tr_center_ms + config.tr_halfspan_ms * p)
        .collect();
    let te_ms = vec![config.te_ms; config.frames];
    let seq = SequenceParams {
        tr_ms,
        te_ms,
        fa_deg,
        inversion: config.inversion,
        ti_ms: config.ti_ms,
    };
    seq.validate()?;
    Ok(seq)
}

impl SequenceParams {
    pub fn len(&self) -> usize {
        self.tr_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tr_ms.is_empty()
    }

    /// Check every schedule invariant, reporting the first violation with its
    /// frame index.
    pub fn validate(&self) -> Result<()> {
        let l = self.tr_ms.len();
        if l == 0 {
            return Err(Error::parameter("sequence: schedule has zero frames"));
        }
        if self.te_ms.len() != l || self.fa_deg.len() != l {
            return Err(Error::shape(format!(
                "sequence: vector lengths disagree (tr {}, te {}, fa {})",
                l,
                self.te_ms.len(),
                self.fa_deg.len()
            )));
        }
        for i in 0..l {
            let (tr, te, fa) = (self.tr_ms[i], self.te_ms[i], self.fa_deg[i]);
            if !tr.is_finite() || !te.is_finite() || !fa.is_finite() {
                return Err(Error::parameter(format!(
                    "sequence: non-finite value at frame {i}"
                )));
            }
            if !(te > 0.0) {
                return Err(Error::parameter(format!(
                    "sequence: te_ms[{i}] = {te} must be positive"
                )));
            }
            if !(tr > te) {
                return Err(Error::parameter(format!(
                    "sequence: tr_ms[{i}] = {tr} must exceed te_ms[{i}] = {te}"
                )));
            }
            if !(0.0..=180.0).contains(&fa) {
                return Err(Error::parameter(format!(
                    "sequence: fa_deg[{i}] = {fa} outside [0, 180]"
                )));
            }
        }
        if !(self.ti_ms >= 0.0 && self.ti_ms.is_finite()) {
            return Err(Error::parameter(format!(
                "sequence: ti_ms = {} must be finite and nonnegative",
                self.ti_ms
            )));
        }
        Ok(())
    }

    /// Order-sensitive hash of the full schedule (FNV-1a over value bits),
    /// used to tie dictionaries to the exact sequence that produced them.
    pub fn fingerprint(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        for v in self.tr_ms.iter().chain(&self.te_ms).chain(&self.fa_deg) {
            eat(&v.to_bits().to_le_bytes());
        }
        eat(&[self.inversion as u8]);
        eat(&self.ti_ms.to_bits().to_le_bytes());
        hash
    }

    /// Write the schedule as `frame,tr_ms,te_ms,fa_deg` CSV plus a JSON
    /// sidecar (same stem, `.json`) holding the seed, inversion flag, and
    /// inversion delay. Values print in shortest round-trip form, so reading
    /// back reproduces the exact bits.
    pub fn save_csv(&self, path: impl AsRef<Path>, seed: Option<u64>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::from("frame,tr_ms,te_ms,fa_deg\n");
        for i in 0..self.len() {
            text.push_str(&format!(
                "{i},{},{},{}\n",
                self.tr_ms[i], self.te_ms[i], self.fa_deg[i]
            ));
        }
        std::fs::write(path, text)
            .map_err(|e| Error::io(format!("sequence: writing {}", path.display()), e))?;
        let sidecar = SequenceSidecar {
            seed,
            inversion: self.inversion,
            ti_ms: self.ti_ms,
        };
        crate::persist::write_json(sidecar_path(path), &sidecar)
    }

    /// Read a schedule written by [`save_csv`].
    pub fn load_csv(path: impl AsRef<Path>) -> Result<SequenceParams> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("sequence: reading {}", path.display()), e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::integrity(format!("sequence: {} is empty", path.display())))?;
        if header.trim() != "frame,tr_ms,te_ms,fa_deg" {
            return Err(Error::integrity(format!(
                "sequence: {} has unexpected header {header:?}",
                path.display()
            )));
        }
        let mut tr_ms = Vec::new();
        let mut te_ms = Vec::new();
        let mut fa_deg = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::integrity(format!(
                    "sequence: {} line {} has {} fields, expected 4",
                    path.display(),
                    lineno + 2,
                    fields.len()
                )));
            }
            let parse = |s: &str, name: &str| -> Result<f64> {
                s.trim().parse().map_err(|_| {
                    Error::integrity(format!(
                        "sequence: {} line {}: unreadable {name} {s:?}",
                        path.display(),
                        lineno + 2
                    ))
                })
            };
            tr_ms.push(parse(fields[1], "tr_ms")?);
            te_ms.push(parse(fields[2], "te_ms")?);
            fa_deg.push(parse(fields[3], "fa_deg")?);
        }
        let sidecar: SequenceSidecar = crate::persist::read_json(sidecar_path(path))?;
        let seq = SequenceParams {
            tr_ms,
            te_ms,
            fa_deg,
            inversion: sidecar.inversion,
            ti_ms: sidecar.ti_ms,
        };
        seq.validate()?;
        Ok(seq)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

#[derive(Debug, Serialize, Deserialize)]
struct SequenceSidecar {
    seed: Option<u64>,
    inversion: bool,
    ti_ms: f64,
}
