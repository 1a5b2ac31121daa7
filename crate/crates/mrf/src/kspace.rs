//! Centered unitary 2-D Fourier operators and Gaussian-density sampling masks.
//!
//! The forward operator takes an image frame to its centered orthonormal 2-D
//! DFT and gathers the cells a sampling mask keeps; the adjoint scatters
//! samples back into a zero-filled grid and inverts the transform. Masks draw
//! cells without replacement with a Gaussian radial density around DC and
//! always keep a 4x4 center block.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::ContrastStack;
use crate::persist;

/// Side length of the always-kept center block.
const CENTER_BLOCK: usize = 4;

fn plan_cache() -> &'static Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn plan(len: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    let mut cache = plan_cache().lock().expect("fft plan cache poisoned");
    cache
        .entry((len, forward))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if forward {
                planner.plan_fft_forward(len)
            } else {
                planner.plan_fft_inverse(len)
            }
        })
        .clone()
}

fn shift2(a: &Array2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let (h, w) = a.dim();
    let (sr, sc) = (h / 2, w / 2);
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            if inverse {
                out[(r, c)] = a[((r + sr) % h, (c + sc) % w)];
            } else {
                out[((r + sr) % h, (c + sc) % w)] = a[(r, c)];
            }
        }
    }
    out
}

fn fft_rows(a: &mut Array2<Complex64>, forward: bool) {
    let w = a.ncols();
    let fft = plan(w, forward);
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for mut row in a.rows_mut() {
        let slice = row.as_slice_mut().expect("row not contiguous");
        fft.process_with_scratch(slice, &mut scratch);
    }
}

fn fft2_centered(img: ArrayView2<Complex64>, forward: bool) -> Array2<Complex64> {
    let (h, w) = img.dim();
    let mut work = shift2(&img.to_owned(), true);
    fft_rows(&mut work, forward);
    let mut work = work.reversed_axes().as_standard_layout().to_owned();
    fft_rows(&mut work, forward);
    let work = work.reversed_axes().as_standard_layout().to_owned();
    let scale = 1.0 / ((h * w) as f64).sqrt();
    shift2(&work, false).mapv_into(|v| v * scale)
}

/// Unitary centered 2-D DFT of an image (DC at the center of the output).
pub fn fft2_unitary(img: ArrayView2<Complex64>) -> Array2<Complex64> {
    fft2_centered(img, true)
}

/// Inverse of `fft2_unitary`.
pub fn ifft2_unitary(k: ArrayView2<Complex64>) -> Array2<Complex64> {
    fft2_centered(k, false)
}

/// Boolean k-space sampling pattern with the DC cell always kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingMask {
    keep: Array2<bool>,
    kept: usize,
}

impl SamplingMask {
    /// Wraps a boolean grid, requiring a kept DC cell.
    pub fn from_grid(keep: Array2<bool>) -> Result<Self> {
        let (h, w) = keep.dim();
        if h == 0 || w == 0 {
            return Err(Error::parameter("kspace: mask has zero size"));
        }
        if !keep[(h / 2, w / 2)] {
            return Err(Error::parameter(
                "kspace: mask must keep the DC cell at the grid center",
            ));
        }
        let kept = keep.iter().filter(|&&b| b).count();
        Ok(Self { keep, kept })
    }

    /// Frame height.
    pub fn h(&self) -> usize {
        self.keep.nrows()
    }

    /// Frame width.
    pub fn w(&self) -> usize {
        self.keep.ncols()
    }

    /// Number of kept cells `Q`.
    pub fn kept_count(&self) -> usize {
        self.kept
    }

    /// Achieved sampling ratio.
    pub fn ratio(&self) -> f64 {
        self.kept as f64 / (self.h() * self.w()) as f64
    }

    /// Whether cell `(r, c)` is kept.
    pub fn is_kept(&self, r: usize, c: usize) -> bool {
        self.keep[(r, c)]
    }

    /// Kept cells in row-major order.
    pub fn kept_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::with_capacity(self.kept);
        for r in 0..self.h() {
            for c in 0..self.w() {
                if self.keep[(r, c)] {
                    cells.push((r, c));
                }
            }
        }
        cells
    }

    /// Borrow of the boolean grid.
    pub fn grid(&self) -> &Array2<bool> {
        &self.keep
    }
}

fn center_block_start(n: usize) -> usize {
    (n / 2).saturating_sub(1).min(n - CENTER_BLOCK)
}

/// Draws `frames` independent Gaussian-density masks keeping exactly
/// `round(beta * h * w)` cells each, center block included.
pub fn make_gaussian_masks(
    h: usize,
    w: usize,
    frames: usize,
    beta: f64,
    sigma_frac: f64,
    seed: u64,
) -> Result<Vec<SamplingMask>> {
    if h < CENTER_BLOCK || w < CENTER_BLOCK {
        return Err(Error::parameter(format!(
            "kspace: frame {h}x{w} cannot hold the {CENTER_BLOCK}x{CENTER_BLOCK} center block"
        )));
    }
    if frames == 0 {
        return Err(Error::parameter("kspace: mask series needs at least 1 frame"));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::parameter(format!(
            "kspace: sampling ratio beta={beta} must lie in (0, 1]"
        )));
    }
    if !(sigma_frac > 0.0 && sigma_frac.is_finite()) {
        return Err(Error::parameter(format!(
            "kspace: sigma_frac={sigma_frac} must be positive and finite"
        )));
    }
    let cells = (h * w) as f64;
    if beta * cells < (CENTER_BLOCK * CENTER_BLOCK) as f64 {
        return Err(Error::parameter(format!(
            "kspace: budget beta*h*w = {:.3} cannot hold the {} center cells",
            beta * cells,
            CENTER_BLOCK * CENTER_BLOCK
        )));
    }
    let budget = (beta * cells).round() as usize;
    let (r0, c0) = (center_block_start(h), center_block_start(w));
    let (dc_r, dc_c) = (h / 2, w / 2);
    let sigma_px = sigma_frac * h.min(w) as f64;
    let mut candidates = Vec::with_capacity(h * w - CENTER_BLOCK * CENTER_BLOCK);
    for r in 0..h {
        for c in 0..w {
            let in_block =
                r >= r0 && r < r0 + CENTER_BLOCK && c >= c0 && c < c0 + CENTER_BLOCK;
            if in_block {
                continue;
            }
            let dr = r as f64 - dc_r as f64;
            let dc = c as f64 - dc_c as f64;
            let radius_sq = dr * dr + dc * dc;
            let weight = (-radius_sq / (2.0 * sigma_px * sigma_px)).exp();
            candidates.push(((r, c), weight));
        }
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let frame_seeds: Vec<u64> = (0..frames).map(|_| master.next_u64()).collect();
    let masks: Vec<SamplingMask> = frame_seeds
        .into_par_iter()
        .map(|frame_seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(frame_seed);
            let mut keyed: Vec<(f64, usize)> = candidates
                .iter()
                .enumerate()
                .map(|(i, &(_, weight))| {
                    let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                    (-u.ln() / weight.max(f64::MIN_POSITIVE), i)
                })
                .collect();
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut keep = Array2::from_elem((h, w), false);
            for r in r0..r0 + CENTER_BLOCK {
                for c in c0..c0 + CENTER_BLOCK {
                    keep[(r, c)] = true;
                }
            }
            for &(_, i) in keyed.iter().take(budget - CENTER_BLOCK * CENTER_BLOCK) {
                keep[candidates[i].0] = true;
            }
            SamplingMask::from_grid(keep).expect("generated mask keeps DC")
        })
        .collect();
    Ok(masks)
}

/// Transforms a frame and gathers the kept cells in row-major order.
pub fn forward(x_frame: ArrayView2<Complex64>, mask: &SamplingMask) -> Result<Array1<Complex64>> {
    if x_frame.dim() != (mask.h(), mask.w()) {
        return Err(Error::shape(format!(
            "kspace: frame is {}x{} but mask is {}x{}",
            x_frame.dim().0,
            x_frame.dim().1,
            mask.h(),
            mask.w()
        )));
    }
    let k = fft2_unitary(x_frame);
    let mut samples = Array1::zeros(mask.kept_count());
    let mut idx = 0;
    for r in 0..mask.h() {
        for c in 0..mask.w() {
            if mask.is_kept(r, c) {
                samples[idx] = k[(r, c)];
                idx += 1;
            }
        }
    }
    Ok(samples)
}

/// Scatters samples into a zero-filled grid and inverts the transform.
pub fn adjoint(samples: ArrayView1<Complex64>, mask: &SamplingMask) -> Result<Array2<Complex64>> {
    if samples.len() != mask.kept_count() {
        return Err(Error::shape(format!(
            "kspace: {} samples but mask keeps {} cells",
            samples.len(),
            mask.kept_count()
        )));
    }
    let mut k = Array2::zeros((mask.h(), mask.w()));
    let mut idx = 0;
    for r in 0..mask.h() {
        for c in 0..mask.w() {
            if mask.is_kept(r, c) {
                k[(r, c)] = samples[idx];
                idx += 1;
            }
        }
    }
    Ok(ifft2_unitary(k.view()))
}

/// Per-frame subsampled k-space measurements with their masks.
#[derive(Debug, Clone)]
pub struct KSpaceData {
    pub masks: Vec<SamplingMask>,
    pub samples: Vec<Array1<Complex64>>,
    pub h: usize,
    pub w: usize,
}

impl KSpaceData {
    /// Wraps per-frame masks and samples, checking geometry and counts.
    pub fn new(masks: Vec<SamplingMask>, samples: Vec<Array1<Complex64>>) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::shape("kspace: measurement set has zero frames"));
        }
        if masks.len() != samples.len() {
            return Err(Error::shape(format!(
                "kspace: {} masks but {} sample frames",
                masks.len(),
                samples.len()
            )));
        }
        let (h, w) = (masks[0].h(), masks[0].w());
        for (i, mask) in masks.iter().enumerate() {
            if (mask.h(), mask.w()) != (h, w) {
                return Err(Error::shape(format!(
                    "kspace: mask {i} is {}x{} but mask 0 is {h}x{w}",
                    mask.h(),
                    mask.w()
                )));
            }
            if samples[i].len() != mask.kept_count() {
                return Err(Error::shape(format!(
                    "kspace: frame {i} has {} samples but its mask keeps {}",
                    samples[i].len(),
                    mask.kept_count()
                )));
            }
        }
        Ok(Self { masks, samples, h, w })
    }

    /// Number of frames `L`.
    pub fn frames(&self) -> usize {
        self.masks.len()
    }
}

/// Applies `forward` to every frame of a stack.
pub fn subsample_stack(x: &ContrastStack, masks: &[SamplingMask]) -> Result<KSpaceData> {
    if masks.len() != x.frames() {
        return Err(Error::shape(format!(
            "kspace: stack has {} frames but {} masks given",
            x.frames(),
            masks.len()
        )));
    }
    if masks.iter().any(|m| (m.h(), m.w()) != (x.h, x.w)) {
        return Err(Error::shape(format!(
            "kspace: mask geometry does not match stack frames {}x{}",
            x.h, x.w
        )));
    }
    let samples: Vec<Array1<Complex64>> = (0..x.frames())
        .into_par_iter()
        .map(|i| {
            let frame = x.frame(i)?;
            forward(frame.view(), &masks[i])
        })
        .collect::<Result<Vec<_>>>()?;
    KSpaceData::new(masks.to_vec(), samples)
}

/// Applies `adjoint` to every frame, yielding the zero-filled stack.
pub fn zero_fill_stack(y: &KSpaceData) -> Result<ContrastStack> {
    let frames: Vec<Array2<Complex64>> = (0..y.frames())
        .into_par_iter()
        .map(|i| adjoint(y.samples[i].view(), &y.masks[i]))
        .collect::<Result<Vec<_>>>()?;
    let mut stack = ContrastStack::zeros(y.h, y.w, y.frames())?;
    for (i, frame) in frames.iter().enumerate() {
        stack.set_frame(i, frame.view())?;
    }
    Ok(stack)
}

#[derive(Serialize, Deserialize)]
struct MaskManifest {
    h: usize,
    w: usize,
    frames: usize,
    kept_counts: Vec<usize>,
}

/// Writes per-frame PBM masks, a JSON manifest, and one samples tensor.
pub fn save_kspace(data: &KSpaceData, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let mask_dir = dir.join("masks");
    std::fs::create_dir_all(&mask_dir)
        .map_err(|e| Error::io(mask_dir.display().to_string(), e))?;
    for (i, mask) in data.masks.iter().enumerate() {
        let flat: Vec<bool> = mask.grid().iter().copied().collect();
        persist::write_pbm(
            mask_dir.join(format!("frame_{i:04}.pbm")),
            data.h,
            data.w,
            &flat,
        )?;
    }
    persist::write_json(
        dir.join("masks.json"),
        &MaskManifest {
            h: data.h,
            w: data.w,
            frames: data.frames(),
            kept_counts: data.masks.iter().map(|m| m.kept_count()).collect(),
        },
    )?;
    let total: usize = data.samples.iter().map(|s| s.len()).sum();
    let mut flat = Array1::zeros(total);
    let mut idx = 0;
    for frame in &data.samples {
        for &v in frame.iter() {
            flat[idx] = v;
            idx += 1;
        }
    }
    persist::write_tensor(
        dir.join("samples.hyt"),
        &persist::Tensor::Complex(flat.into_dyn()),
    )
}

/// Loads measurements saved by `save_kspace`, revalidating every count.
pub fn load_kspace(dir: impl AsRef<Path>) -> Result<KSpaceData> {
    let dir = dir.as_ref();
    let manifest: MaskManifest = persist::read_json(dir.join("masks.json"))?;
    if manifest.kept_counts.len() != manifest.frames {
        return Err(Error::integrity(format!(
            "kspace: manifest lists {} kept counts for {} frames",
            manifest.kept_counts.len(),
            manifest.frames
        )));
    }
    let mut masks = Vec::with_capacity(manifest.frames);
    for i in 0..manifest.frames {
        let (gh, gw, flat) =
            persist::read_pbm(dir.join("masks").join(format!("frame_{i:04}.pbm")))?;
        if (gh, gw) != (manifest.h, manifest.w) {
            return Err(Error::integrity(format!(
                "kspace: mask {i} is {gh}x{gw} but manifest says {}x{}",
                manifest.h, manifest.w
            )));
        }
        let grid = Array2::from_shape_vec((gh, gw), flat)
            .map_err(|e| Error::integrity(format!("kspace: mask {i} reshape failed: {e}")))?;
        let mask = SamplingMask::from_grid(grid)?;
        if mask.kept_count() != manifest.kept_counts[i] {
            return Err(Error::integrity(format!(
                "kspace: mask {i} keeps {} cells but manifest says {}",
                mask.kept_count(),
                manifest.kept_counts[i]
            )));
        }
        masks.push(mask);
    }
    let flat = persist::read_tensor(dir.join("samples.hyt"))?.into_complex()?;
    let flat = flat.into_dimensionality::<ndarray::Ix1>().map_err(|_| {
        Error::integrity(format!(
            "kspace: {} does not hold a 1-d sample vector",
            dir.join("samples.hyt").display()
        ))
    })?;
    let total: usize = manifest.kept_counts.iter().sum();
    if flat.len() != total {
        return Err(Error::integrity(format!(
            "kspace: samples.hyt holds {} values but manifest counts sum to {total}",
            flat.len()
        )));
    }
    let mut samples = Vec::with_capacity(manifest.frames);
    let mut offset = 0;
    for &count in &manifest.kept_counts {
        samples.push(flat.slice(ndarray::s![offset..offset + count]).to_owned());
        offset += count;
    }
    KSpaceData::new(masks, samples)
}
