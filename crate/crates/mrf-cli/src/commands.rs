//! Implementations of the pipeline subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayD, IxDyn};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use mrf::dict::{build_dictionary, build_lut, load_dictionary, match_batch, Dictionary};
use mrf::error::{Error, Result};
use mrf::eval::{make_phantom, map_metrics, phantom_to_stack, MetricsReport, PhantomSpec};
use mrf::kspace::{load_kspace, make_gaussian_masks, save_kspace, subsample_stack};
use mrf::lowrank::{dictionary_projector, restore, ContrastStack};
use mrf::net::{self, NetConfig};
use mrf::persist::{self, Tensor};

use crate::config::RunConfig;

/// Writes the effective configuration next to the outputs.
pub fn write_used_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    persist::write_json(out.join("config.used.json"), cfg)
}

fn require<'a>(value: &'a Option<String>, what: &str, flag: &str) -> Result<&'a str> {
    value.as_deref().ok_or_else(|| {
        Error::parameter(format!(
            "cli: {what} is required; pass {flag} or set it in the config"
        ))
    })
}

fn build_dict_from_config(cfg: &RunConfig) -> Result<Dictionary> {
    let (t1, t2) = cfg.grid()?;
    let lut = build_lut(&t1, &t2)?;
    build_dictionary(&lut, &cfg.sequence()?)
}

fn obtain_dictionary(cfg: &RunConfig) -> Result<Dictionary> {
    match &cfg.dict_dir {
        Some(dir) => load_dictionary(dir),
        None => build_dict_from_config(cfg),
    }
}

/// Reads a complex tensor holding signatures: `N x L`, or `h x w x L` frames.
fn read_signatures(path: &str) -> Result<(Array2<Complex64>, Option<(usize, usize)>)> {
    let tensor = persist::read_tensor(path)?;
    let arr = tensor.into_complex()?;
    let dims = arr.shape().to_vec();
    let flat_len: usize = dims.iter().product();
    let flat = arr
        .into_shape_with_order(IxDyn(&[flat_len]))
        .map_err(|e| Error::shape(format!("cli: reshaping signatures: {e}")))?;
    let (v, _) = flat.into_raw_vec_and_offset();
    match dims.as_slice() {
        [n, l] => Ok((
            Array2::from_shape_vec((*n, *l), v)
                .map_err(|e| Error::shape(format!("cli: reshaping signatures: {e}")))?,
            None,
        )),
        [h, w, l] => Ok((
            Array2::from_shape_vec((h * w, *l), v)
                .map_err(|e| Error::shape(format!("cli: reshaping stack: {e}")))?,
            Some((*h, *w)),
        )),
        other => Err(Error::shape(format!(
            "cli: {path}: expected a 2-D (N x L) or 3-D (h x w x L) complex tensor, got {other:?}"
        ))),
    }
}

fn stack_to_tensor(stack: &ContrastStack) -> Tensor {
    let (n, l) = stack.data.dim();
    let (v, _) = stack.data.clone().into_raw_vec_and_offset();
    let arr = ArrayD::from_shape_vec(IxDyn(&[stack.h, stack.w, l]), v)
        .expect("stack rows reshape to h x w x frames");
    debug_assert_eq!(n, stack.h * stack.w);
    Tensor::Complex(arr)
}

fn map_from_column(params: &Array2<f64>, col: usize, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |(r, c)| params[[r * w + c, col]])
}

fn write_maps(
    cfg: &RunConfig,
    out: &Path,
    params: &Array2<f64>,
    h: usize,
    w: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let t1 = map_from_column(params, 0, h, w);
    let t2 = map_from_column(params, 1, h, w);
    persist::write_tensor(
        out.join("t1_map.hyt"),
        &Tensor::Real(t1.clone().into_dyn()),
    )?;
    persist::write_tensor(
        out.join("t2_map.hyt"),
        &Tensor::Real(t2.clone().into_dyn()),
    )?;
    persist::write_pgm(out.join("t1_map.pgm"), &t1, 0.0, cfg.t1_display_max)?;
    persist::write_pgm(out.join("t2_map.pgm"), &t2, 0.0, cfg.t2_display_max)?;
    Ok((t1, t2))
}

fn read_real_map(path: &Path) -> Result<Array2<f64>> {
    let arr = persist::read_tensor(path)?.into_real()?;
    match arr.shape() {
        [h, w] => {
            let (hh, ww) = (*h, *w);
            let flat = arr
                .into_shape_with_order(IxDyn(&[hh * ww]))
                .map_err(|e| Error::shape(format!("cli: reshaping map: {e}")))?;
            let (v, _) = flat.into_raw_vec_and_offset();
            Array2::from_shape_vec((hh, ww), v)
                .map_err(|e| Error::shape(format!("cli: reshaping map: {e}")))
        }
        other => Err(Error::shape(format!(
            "cli: expected a 2-D real map tensor, got shape {other:?}"
        ))),
    }
}

fn reference_maps(cfg: &RunConfig, h: usize, w: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    match &cfg.reference_dir {
        Some(dir) => {
            let dir = PathBuf::from(dir);
            Ok((
                read_real_map(&dir.join("t1_map.hyt"))?,
                read_real_map(&dir.join("t2_map.hyt"))?,
            ))
        }
        None => {
            let spec = PhantomSpec::desk_default();
            if (spec.h, spec.w) != (h, w) {
                return Err(Error::parameter(format!(
                    "cli: maps are {h}x{w} but the built-in phantom reference is {}x{}; \
                     set reference_dir to score against your own truth maps",
                    spec.h, spec.w
                )));
            }
            make_phantom(&spec)
        }
    }
}

fn desk_phantom_stack(cfg: &RunConfig) -> Result<ContrastStack> {
    let spec = PhantomSpec::desk_default();
    let (t1, t2) = make_phantom(&spec)?;
    phantom_to_stack(t1.view(), t2.view(), &cfg.sequence()?)
}

/// `seq gen`: writes the acquisition schedule as CSV.
pub fn seq_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let seq = cfg.sequence()?;
    seq.save_csv(out.join("sequence.csv"), Some(cfg.sequence_seed))?;
    println!("wrote {} frames to sequence.csv", seq.len());
    Ok(())
}

/// `dict build`: simulates the dictionary for the configured grid and sequence.
pub fn dict_build(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dict = build_dict_from_config(cfg)?;
    mrf::dict::save_dictionary(&dict, out)?;
    println!(
        "wrote dictionary with K={} entries of length L={}",
        dict.len(),
        dict.signature_len()
    );
    Ok(())
}

/// `dict match`: matches signatures from a tensor file against a dictionary.
pub fn dict_match(cfg: &RunConfig, out: &Path) -> Result<()> {
    let input = require(&cfg.input_path, "an input signature tensor", "--input")?;
    let dict = obtain_dictionary(cfg)?;
    let norm = cfg.match_norm()?;
    let (signatures, geometry) = read_signatures(input)?;
    let started = Instant::now();
    let params = match_batch(&dict, signatures.view(), norm)?;
    let elapsed = started.elapsed().as_secs_f64();
    persist::write_tensor(
        out.join("matched.hyt"),
        &Tensor::Real(params.clone().into_dyn()),
    )?;
    let mut csv = String::from("t1_ms,t2_ms\n");
    for r in 0..params.nrows() {
        csv.push_str(&format!("{},{}\n", params[[r, 0]], params[[r, 1]]));
    }
    std::fs::write(out.join("matched.csv"), csv)
        .map_err(|e| Error::io("cli: writing matched.csv", e))?;
    if let Some((h, w)) = geometry {
        write_maps(cfg, out, &params, h, w)?;
    }
    println!(
        "matched {} signatures against K={} in {elapsed:.3}s",
        params.nrows(),
        dict.len()
    );
    Ok(())
}

/// `train`: trains the network on a dictionary and saves a checkpoint.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dict = obtain_dictionary(cfg)?;
    let net_cfg = cfg.net_config()?;
    let model = net::build(&net_cfg, cfg.net_init_seed)?;
    let train_cfg = cfg.train_config();
    let started = Instant::now();
    let trained = net::train(model, &dict, &train_cfg)?;
    let elapsed = started.elapsed().as_secs_f64();
    net::save_checkpoint(&trained, out.join("model.ckpt"))?;
    net::write_history_csv(&trained.history, out.join("training_log.csv"))?;
    let summary = trained.history.last().map_or_else(
        || "no epochs".to_string(),
        |r| {
            format!(
                "final train rmse {:.5}, val rmse {:.5}, best epoch {}",
                r.train_rmse, r.val_rmse, trained.epoch
            )
        },
    );
    println!(
        "trained {} parameters on K={} in {elapsed:.1}s: {summary}",
        trained.param_count(),
        dict.len()
    );
    Ok(())
}

/// `predict`: runs a trained network on signatures from a tensor file.
pub fn predict(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model_path = require(&cfg.model_path, "a model checkpoint", "--model")?;
    let input = require(&cfg.input_path, "an input signature tensor", "--input")?;
    let model = net::load_checkpoint(model_path)?;
    let (signatures, geometry) = read_signatures(input)?;
    let started = Instant::now();
    let params = net::predict(&model, signatures.view())?;
    let elapsed = started.elapsed().as_secs_f64();
    persist::write_tensor(
        out.join("predictions.hyt"),
        &Tensor::Real(params.clone().into_dyn()),
    )?;
    let mut csv = String::from("t1_ms,t2_ms\n");
    for r in 0..params.nrows() {
        csv.push_str(&format!("{},{}\n", params[[r, 0]], params[[r, 1]]));
    }
    std::fs::write(out.join("predictions.csv"), csv)
        .map_err(|e| Error::io("cli: writing predictions.csv", e))?;
    if let Some((h, w)) = geometry {
        write_maps(cfg, out, &params, h, w)?;
    }
    println!("predicted {} signatures in {elapsed:.3}s", params.nrows());
    Ok(())
}

/// `subsample`: measures a contrast stack through per-frame Gaussian masks.
pub fn subsample(cfg: &RunConfig, out: &Path) -> Result<()> {
    let stack = match &cfg.input_path {
        Some(path) => {
            let (signatures, geometry) = read_signatures(path)?;
            let (h, w) = geometry.ok_or_else(|| {
                Error::shape(format!(
                    "cli: {path}: subsampling needs an h x w x L stack tensor"
                ))
            })?;
            ContrastStack::new(signatures, h, w)?
        }
        None => desk_phantom_stack(cfg)?,
    };
    let masks = make_gaussian_masks(
        stack.h,
        stack.w,
        stack.frames(),
        cfg.beta,
        cfg.sigma_frac,
        cfg.mask_seed,
    )?;
    let data = subsample_stack(&stack, &masks)?;
    let kept = data.masks.first().map_or(0, |m| m.kept_count());
    let dir = out.join("kspace");
    save_kspace(&data, &dir)?;
    persist::write_tensor(out.join("stack.hyt"), &stack_to_tensor(&stack))?;
    println!(
        "kept {kept} of {} cells per frame across {} frames",
        stack.pixels(),
        stack.frames()
    );
    Ok(())
}

fn restore_from_kspace(cfg: &RunConfig) -> Result<(ContrastStack, mrf::lowrank::RestoreLog)> {
    let dir = require(&cfg.kspace_dir, "a k-space directory", "--kspace")?;
    let data = load_kspace(dir)?;
    let projector = if cfg.use_projector {
        Some(dictionary_projector(&obtain_dictionary(cfg)?)?)
    } else {
        None
    };
    let restore_cfg = cfg.restore_config(projector);
    restore(&data, &restore_cfg)
}

/// `restore`: low-rank restoration of a stack from subsampled k-space.
pub fn restore_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let started = Instant::now();
    let (stack, log) = restore_from_kspace(cfg)?;
    let elapsed = started.elapsed().as_secs_f64();
    persist::write_tensor(out.join("restored.hyt"), &stack_to_tensor(&stack))?;
    log.write_csv(out.join("restore_log.csv"))?;
    println!(
        "restored in {} iterations ({}converged) in {elapsed:.2}s",
        log.iterations(),
        if log.converged { "" } else { "not " }
    );
    Ok(())
}

/// `reconstruct`: restoration followed by parameter mapping and metrics.
pub fn reconstruct(cfg: &RunConfig, out: &Path) -> Result<()> {
    let total_started = Instant::now();
    let restore_started = Instant::now();
    let (stack, log) = restore_from_kspace(cfg)?;
    let restore_s = restore_started.elapsed().as_secs_f64();
    log.write_csv(out.join("restore_log.csv"))?;

    let mapping_started = Instant::now();
    let params = match &cfg.model_path {
        Some(path) => {
            let model = net::load_checkpoint(path)?;
            net::predict(&model, stack.data.view())?
        }
        None => {
            let dict = obtain_dictionary(cfg)?;
            match_batch(&dict, stack.data.view(), cfg.match_norm()?)?
        }
    };
    let mapping_s = mapping_started.elapsed().as_secs_f64();

    let (t1, t2) = write_maps(cfg, out, &params, stack.h, stack.w)?;
    let (t1_ref, t2_ref) = reference_maps(cfg, stack.h, stack.w)?;
    let convention = cfg.snr()?;
    let mut report = MetricsReport {
        t1: map_metrics(t1_ref.view(), t1.view(), convention)?,
        t2: map_metrics(t2_ref.view(), t2.view(), convention)?,
        snr_convention: convention,
        timings_s: Default::default(),
    };
    report.timings_s.insert("restore".to_string(), restore_s);
    report.timings_s.insert("mapping".to_string(), mapping_s);
    report.timings_s.insert(
        "total".to_string(),
        total_started.elapsed().as_secs_f64(),
    );
    persist::write_json(out.join("metrics.json"), &report)?;
    println!(
        "t1 rmse {:.3} ms psnr {:.2} dB; t2 rmse {:.3} ms psnr {:.2} dB",
        report.t1.rmse_ms, report.t1.psnr_db, report.t2.rmse_ms, report.t2.psnr_db
    );
    Ok(())
}

/// `eval`: scores a pair of parameter maps against a reference.
pub fn eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let t1_path = require(&cfg.eval_t1_path, "a T1 map tensor", "--t1")?;
    let t2_path = require(&cfg.eval_t2_path, "a T2 map tensor", "--t2")?;
    let t1 = read_real_map(Path::new(t1_path))?;
    let t2 = read_real_map(Path::new(t2_path))?;
    let (t1_ref, t2_ref) = reference_maps(cfg, t1.nrows(), t1.ncols())?;
    let convention = cfg.snr()?;
    let report = MetricsReport {
        t1: map_metrics(t1_ref.view(), t1.view(), convention)?,
        t2: map_metrics(t2_ref.view(), t2.view(), convention)?,
        snr_convention: convention,
        timings_s: Default::default(),
    };
    persist::write_json(out.join("metrics.json"), &report)?;
    let csv = format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row());
    std::fs::write(out.join("metrics.csv"), csv)
        .map_err(|e| Error::io("cli: writing metrics.csv", e))?;
    println!(
        "t1 rmse {:.3} ms, t2 rmse {:.3} ms",
        report.t1.rmse_ms, report.t2.rmse_ms
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchRow {
    k: usize,
    match_median_s: f64,
    predict_median_s: f64,
}

fn synthetic_dictionary(k: usize, l: usize, seed: u64) -> Result<Dictionary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut signatures = Array2::zeros((k, l));
    for mut row in signatures.rows_mut() {
        let mut norm_sq = 0.0;
        for v in row.iter_mut() {
            let z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            norm_sq += z.norm_sqr();
            *v = z;
        }
        let inv = 1.0 / norm_sq.sqrt();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    let norms_sq = signatures
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|z| z.norm_sqr()).sum())
        .collect();
    let entries: Vec<(f64, f64)> = (0..k).map(|i| (1000.0 + i as f64, 50.0)).collect();
    Ok(Dictionary {
        signatures,
        norms_sq,
        lut: mrf::dict::LookupTable {
            entries,
            grid: None,
        },
        sequence_fingerprint: 0,
    })
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.total_cmp(b));
    samples[samples.len() / 2]
}

/// `bench`: wall-time scaling of matching vs network inference in K.
pub fn bench(cfg: &RunConfig, out: &Path) -> Result<()> {
    let l = cfg.frames;
    let norm = cfg.match_norm()?;
    let net_cfg = NetConfig {
        input_length: l,
        ..cfg.net_config()?
    };
    let model = net::build(&net_cfg, cfg.net_init_seed)?;
    let probes = synthetic_dictionary(cfg.bench_probes, l, cfg.bench_seed.wrapping_add(1))?;
    let mut rows = Vec::new();
    for k in [cfg.bench_k, 2 * cfg.bench_k] {
        let dict = synthetic_dictionary(k, l, cfg.bench_seed)?;
        let mut match_times = Vec::new();
        let mut predict_times = Vec::new();
        for _ in 0..cfg.bench_reps {
            let t = Instant::now();
            match_batch(&dict, probes.signatures.view(), norm)?;
            match_times.push(t.elapsed().as_secs_f64());
            let t = Instant::now();
            net::predict(&model, probes.signatures.view())?;
            predict_times.push(t.elapsed().as_secs_f64());
        }
        rows.push(BenchRow {
            k,
            match_median_s: median(&mut match_times),
            predict_median_s: median(&mut predict_times),
        });
    }
    let mut csv = String::from("k,match_median_s,predict_median_s\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{}\n",
            r.k, r.match_median_s, r.predict_median_s
        ));
    }
    std::fs::write(out.join("bench.csv"), &csv)
        .map_err(|e| Error::io("cli: writing bench.csv", e))?;
    persist::write_json(out.join("bench.json"), &rows)?;
    for r in &rows {
        println!(
            "K={}: match {:.4}s, predict {:.4}s",
            r.k, r.match_median_s, r.predict_median_s
        );
    }
    Ok(())
}
