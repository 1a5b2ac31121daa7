//! Acceptance gate: one test per shipped criterion. Each test prints exactly
//! one pass/fail line (visible under `--nocapture`, or on failure) with every
//! tolerance pinned in the message.

use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mrf::dict::{
    build_dictionary, build_lut, match_batch, Dictionary, GridRange, LookupTable, MatchNorm,
};
use mrf::epg::{simulate_signature, EpgState, TissueParams};
use mrf::eval::{make_phantom, map_metrics, phantom_to_stack, PhantomSpec, SnrConvention};
use mrf::kspace::{self, make_gaussian_masks, subsample_stack, zero_fill_stack, KSpaceData};
use mrf::linalg::{jacobi_svd, nuclear_norm};
use mrf::lowrank::{restore, svt, ContrastStack, RestoreConfig, RestoreLog};
use mrf::net::{self, InputMode, NetConfig, TrainConfig};
use mrf::persist::{self, Tensor};
use mrf::sequence::{generate_fisp, FispConfig, SequenceParams};

const SEQ_SEED: u64 = 11;
const MASK_SEED: u64 = 12;
const NET_SEED: u64 = 13;
const TRAIN_SEED: u64 = 14;
const PROBE_SEED: u64 = 15;

/// Prints the single criterion line and then enforces it.
fn report(idx: usize, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("criterion {idx:02} {status} {name}: {detail}");
    assert!(pass, "criterion {idx:02} {name}: {detail}");
}

fn full_sequence() -> SequenceParams {
    generate_fisp(&FispConfig::new(200, SEQ_SEED)).expect("schedule generates")
}

#[test]
fn criterion_01_lookup_table_cardinality() {
    let started = Instant::now();
    let lut = build_lut(
        &GridRange::new(1.0, 5000.0, 10.0).unwrap(),
        &GridRange::new(1.0, 2000.0, 10.0).unwrap(),
    )
    .unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let pass = lut.len() == 80100 && elapsed < 1.0;
    report(
        1,
        "lookup-table cardinality",
        pass,
        &format!(
            "K={} (required exactly 80100), built in {elapsed:.3}s (limit 1s)",
            lut.len()
        ),
    );
}

#[test]
fn criterion_02_mask_budget() {
    let started = Instant::now();
    let masks = make_gaussian_masks(128, 128, 200, 0.15, 0.25, MASK_SEED).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let counts: Vec<usize> = masks.iter().map(|m| m.kept_count()).collect();
    let all_exact = counts.iter().all(|&c| c == 2458);
    let pass = masks.len() == 200 && all_exact && elapsed < 1.0;
    report(
        2,
        "mask cell budget",
        pass,
        &format!(
            "128x128, beta=0.15: kept {}..{} cells over {} frames (required exactly 2458 each), \
             {elapsed:.3}s (limit 1s)",
            counts.iter().min().unwrap(),
            counts.iter().max().unwrap(),
            masks.len()
        ),
    );
}

#[test]
fn criterion_03_relaxation_closed_form() {
    let started = Instant::now();
    let frames = 120;
    let tr = 12.0;
    let te = 3.0;
    let mut max_err = 0.0f64;
    for &t1 in &[100.0, 500.0, 1000.0, 3000.0] {
        let tissue = TissueParams::new(t1, t1.min(100.0)).unwrap();
        let mut state = EpgState::new(10, 1.0);
        state.rf_rotation(std::f64::consts::PI, 0.0);
        let ti = 20.0;
        state.relax(ti, &tissue).unwrap();
        let mut t = ti;
        for _ in 0..frames {
            state.relax(te, &tissue).unwrap();
            t += te;
            let expected = 1.0 - 2.0 * (-t / t1).exp();
            let z = state.z0();
            max_err = max_err.max((z.re - expected).abs()).max(z.im.abs());
            state.relax(tr - te, &tissue).unwrap();
            t += tr - te;
            state.grad_shift();
        }
    }
    let zero_seq = SequenceParams {
        tr_ms: vec![tr; frames],
        te_ms: vec![te; frames],
        fa_deg: vec![0.0; frames],
        inversion: false,
        ti_ms: 0.0,
    };
    let tissue = TissueParams::new(1000.0, 100.0).unwrap();
    let signal = simulate_signature(&tissue, &zero_seq, None).unwrap();
    let silent = signal.iter().all(|v| v.re == 0.0 && v.im == 0.0);
    let elapsed = started.elapsed().as_secs_f64();
    let pass = max_err <= 1e-12 && silent && elapsed < 1.0;
    report(
        3,
        "relaxation closed form",
        pass,
        &format!(
            "inversion recovery max |error| = {max_err:.3e} (limit 1e-12) over T1 in \
             {{100,500,1000,3000}}; zero-excitation signal identically zero: {silent}; \
             {elapsed:.3}s (limit 1s)"
        ),
    );
}

fn desk_dictionary() -> Dictionary {
    let lut = build_lut(
        &GridRange::new(100.0, 2000.0, 100.0).unwrap(),
        &GridRange::new(10.0, 100.0, 10.0).unwrap(),
    )
    .unwrap();
    build_dictionary(&lut, &full_sequence()).unwrap()
}

#[test]
fn criterion_04_matching_exactness() {
    let dict = desk_dictionary();
    assert_eq!(dict.len(), 200, "desk dictionary has 200 entries");
    let started = Instant::now();
    let params = match_batch(&dict, dict.signatures.view(), MatchNorm::UnitNorm).unwrap();

    let mut oracle_hits = 0usize;
    let mut exact_hits = 0usize;
    for i in 0..dict.len() {
        let q = dict.signatures.row(i);
        let mut best = f64::NEG_INFINITY;
        let mut best_k = 0usize;
        for k in 0..dict.len() {
            let d = dict.signatures.row(k);
            let mut inner = Complex64::new(0.0, 0.0);
            let mut norm_sq = 0.0;
            for (a, b) in q.iter().zip(d.iter()) {
                inner += a * b.conj();
                norm_sq += b.norm_sqr();
            }
            let score = inner.re / norm_sq.sqrt();
            if score > best {
                best = score;
                best_k = k;
            }
        }
        if best_k == i {
            oracle_hits += 1;
        }
        let (t1, t2) = dict.lut.entries[i];
        if params[[i, 0]] == t1 && params[[i, 1]] == t2 {
            exact_hits += 1;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let pass = oracle_hits == dict.len() && exact_hits == dict.len() && elapsed < 5.0;
    report(
        4,
        "self-match exactness",
        pass,
        &format!(
            "brute-force oracle self-hits {oracle_hits}/200, matcher exact (T1,T2) hits \
             {exact_hits}/200 (both required 200/200), {elapsed:.3}s (limit 5s)"
        ),
    );
}

const C5_EPOCHS: usize = 60;
const C5_BATCH: usize = 16;
const C5_LR: f64 = 1e-3;
const C5_DECAY_EVERY: usize = 25;

#[test]
fn criterion_05_off_grid_behavior() {
    let t1_range = GridRange::new(801.0, 1201.0, 10.0).unwrap();
    let t2_range = GridRange::new(41.0, 121.0, 10.0).unwrap();
    let lut = build_lut(&t1_range, &t2_range).unwrap();
    let seq = full_sequence();
    let dict = build_dictionary(&lut, &seq).unwrap();
    assert_eq!(dict.len(), 369);

    let probe_t1 = [1005.0, 1005.5, 1006.0, 1006.5, 1007.0];
    let mut probes = Array2::zeros((probe_t1.len(), seq.len()));
    for (i, &t1) in probe_t1.iter().enumerate() {
        let tissue = TissueParams::new(t1, 81.0).unwrap();
        let sig = simulate_signature(&tissue, &seq, None).unwrap();
        for (j, v) in sig.iter().enumerate() {
            probes[[i, j]] = *v;
        }
    }
    let matched = match_batch(&dict, probes.view(), MatchNorm::UnitNorm).unwrap();
    let neighbors_only = (0..probe_t1.len())
        .all(|i| matched[[i, 0]] == 1001.0 || matched[[i, 0]] == 1011.0);
    let matched_t1: Vec<f64> = (0..probe_t1.len()).map(|i| matched[[i, 0]]).collect();

    let net_cfg = NetConfig {
        target_scale: (1201.0, 121.0),
        ..NetConfig::new(seq.len())
    };
    let model = net::build(&net_cfg, NET_SEED).unwrap();
    let train_cfg = TrainConfig {
        epochs: C5_EPOCHS,
        batch_size: C5_BATCH,
        initial_lr: C5_LR,
        lr_decay_every: C5_DECAY_EVERY,
        validation_fraction: 0.1,
        seed: TRAIN_SEED,
        ..TrainConfig::default()
    };
    let train_started = Instant::now();
    let model = net::train(model, &dict, &train_cfg).unwrap();
    let train_s = train_started.elapsed().as_secs_f64();

    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    let n_test = 500;
    let mut truth = Array2::zeros((n_test, 2));
    let mut test_sigs = Array2::zeros((n_test, seq.len()));
    for i in 0..n_test {
        let t1 = rng.gen_range(800.0..1200.0);
        let t2 = rng.gen_range(40.0..120.0);
        truth[[i, 0]] = t1;
        truth[[i, 1]] = t2;
        let sig = simulate_signature(&TissueParams::new(t1, t2).unwrap(), &seq, None).unwrap();
        for (j, v) in sig.iter().enumerate() {
            test_sigs[[i, j]] = *v;
        }
    }
    let rmse_of = |est: &Array2<f64>| -> f64 {
        let mut sse = 0.0;
        for i in 0..n_test {
            let d1 = est[[i, 0]] - truth[[i, 0]];
            let d2 = est[[i, 1]] - truth[[i, 1]];
            sse += d1 * d1 + d2 * d2;
        }
        (sse / (2 * n_test) as f64).sqrt()
    };
    let dm_est = match_batch(&dict, test_sigs.view(), MatchNorm::UnitNorm).unwrap();
    let net_est = net::predict(&model, test_sigs.view()).unwrap();
    let dm_rmse = rmse_of(&dm_est);
    let net_rmse = rmse_of(&net_est);

    let pass = neighbors_only && train_s < 600.0 && net_rmse <= 0.5 * dm_rmse;
    report(
        5,
        "off-grid behavior",
        pass,
        &format!(
            "matched T1 {matched_t1:?} (required subset of {{1001, 1011}}); trained in \
             {train_s:.0}s (limit 600s); 500-probe RMSE: network {net_rmse:.3} ms vs matching \
             {dm_rmse:.3} ms (required network <= 0.5x matching)"
        ),
    );
}

#[test]
fn criterion_06_thresholding_prox_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst_perturb = f64::INFINITY;
    let mut worst_subgrad = f64::INFINITY;
    for _ in 0..20 {
        let z = Array2::from_shape_fn((5, 4), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let tau = rng.gen_range(0.2..1.5);
        let x = svt(z.view(), tau).unwrap();
        let objective = |w: &Array2<Complex64>| -> f64 {
            let fit: f64 = w
                .iter()
                .zip(z.iter())
                .map(|(a, b)| (a - b).norm_sqr())
                .sum();
            0.5 * fit + tau * nuclear_norm(w.view()).unwrap()
        };
        let f_x = objective(&x);

        for _ in 0..10_000 {
            let eps = 10f64.powf(rng.gen_range(-4.0..0.0));
            let w = Array2::from_shape_fn((5, 4), |idx| {
                x[idx] + eps * Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            worst_perturb = worst_perturb.min(objective(&w) - f_x);
        }

        let mut w = z.clone();
        let mut best = objective(&w);
        for t in 0..1_000 {
            let svd = jacobi_svd(w.view()).unwrap();
            let mut g = &w - &z;
            for r in 0..5 {
                for c in 0..4 {
                    let mut uv = Complex64::new(0.0, 0.0);
                    for j in 0..4 {
                        uv += svd.u[(r, j)] * svd.v[(c, j)].conj();
                    }
                    g[(r, c)] += tau * uv;
                }
            }
            let step = 0.5 / ((t + 1) as f64).sqrt();
            w = &w - &g.mapv(|v| v * step);
            best = best.min(objective(&w));
        }
        worst_subgrad = worst_subgrad.min(best - f_x);
    }
    let elapsed = started.elapsed().as_secs_f64();
    let pass = worst_perturb >= -1e-8 && worst_subgrad >= -1e-8 && elapsed < 30.0;
    report(
        6,
        "thresholding prox oracle",
        pass,
        &format!(
            "20 random 5x4 matrices: worst perturbation margin {worst_perturb:.3e}, worst \
             subgradient-descent margin {worst_subgrad:.3e} (both required >= -1e-8), \
             {elapsed:.1}s (limit 30s)"
        ),
    );
}

struct DeskRestore {
    t1_true: Array2<f64>,
    t2_true: Array2<f64>,
    y: KSpaceData,
    restored: ContrastStack,
    log: RestoreLog,
    restore_s: f64,
}

fn desk_restore() -> &'static DeskRestore {
    static FIXTURE: OnceLock<DeskRestore> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let spec = PhantomSpec::desk_default();
        let (t1_true, t2_true) = make_phantom(&spec).unwrap();
        let seq = full_sequence();
        let stack = phantom_to_stack(t1_true.view(), t2_true.view(), &seq).unwrap();
        let masks = make_gaussian_masks(spec.h, spec.w, seq.len(), 0.15, 0.25, MASK_SEED).unwrap();
        let y = subsample_stack(&stack, &masks).unwrap();
        let cfg = RestoreConfig {
            mu: 1.0,
            lambda: 5.0,
            tol: 1e-4,
            max_iters: 200,
            projector: None,
        };
        let started = Instant::now();
        let (restored, log) = restore(&y, &cfg).unwrap();
        let restore_s = started.elapsed().as_secs_f64();
        DeskRestore {
            t1_true,
            t2_true,
            y,
            restored,
            log,
            restore_s,
        }
    })
}

#[test]
fn criterion_07_objective_monotonicity() {
    let fx = desk_restore();
    let lambda = 5.0;
    let objectives: Vec<f64> = fx.log.rows.iter().map(|r| r.objective(lambda)).collect();
    let mut worst_rise = 0.0f64;
    for pair in objectives.windows(2) {
        let rise = (pair[1] - pair[0]) / pair[0].abs().max(1e-300);
        worst_rise = worst_rise.max(rise);
    }

    let mut fit = 0.0;
    for i in 0..fx.restored.frames() {
        let frame = fx.restored.frame(i).unwrap();
        let predicted = kspace::forward(frame.view(), &fx.y.masks[i]).unwrap();
        fit += predicted
            .iter()
            .zip(fx.y.samples[i].iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>();
    }
    let independent_obj = 0.5 * fit + lambda * nuclear_norm(fx.restored.data.view()).unwrap();
    let logged_obj = objectives.last().copied().unwrap();
    let obj_agree = ((independent_obj - logged_obj) / logged_obj.abs()).abs() <= 1e-6;

    let pass = worst_rise <= 1e-6
        && fx.log.converged
        && fx.log.iterations() <= 200
        && obj_agree;
    report(
        7,
        "objective monotonicity",
        pass,
        &format!(
            "worst relative objective rise {worst_rise:.3e} (slack 1e-6); converged at \
             tol=1e-4 in {} iterations (limit 200); recomputed final objective matches the \
             log to {:.3e} (limit 1e-6); restore took {:.1}s",
            fx.log.iterations(),
            ((independent_obj - logged_obj) / logged_obj.abs()).abs(),
            fx.restore_s
        ),
    );
}

const C8_EPOCHS: usize = 60;
const C8_BATCH: usize = 16;
const C8_LR: f64 = 1e-3;
// The default nuclear weight is tuned for full-size stacks; singular values
// shrink with pixel count, so the desk-size stack needs a lighter touch.
const C8_LAMBDA: f64 = 0.1;

#[test]
fn criterion_08_end_to_end_gain() {
    let total_started = Instant::now();
    let fx = desk_restore();
    let seq = full_sequence();
    let lut = build_lut(
        &GridRange::new(500.0, 2000.0, 100.0).unwrap(),
        &GridRange::new(50.0, 300.0, 10.0).unwrap(),
    )
    .unwrap();
    let dict = build_dictionary(&lut, &seq).unwrap();

    let zero_filled = zero_fill_stack(&fx.y).unwrap();
    let base_params = match_batch(&dict, zero_filled.data.view(), MatchNorm::UnitNorm).unwrap();

    let restore_cfg = RestoreConfig {
        mu: 1.0,
        lambda: C8_LAMBDA,
        tol: 1e-4,
        max_iters: 200,
        projector: None,
    };
    let (restored, _) = restore(&fx.y, &restore_cfg).unwrap();

    let net_cfg = NetConfig {
        target_scale: (2000.0, 300.0),
        ..NetConfig::new(seq.len())
    };
    let model = net::build(&net_cfg, NET_SEED).unwrap();
    let train_cfg = TrainConfig {
        epochs: C8_EPOCHS,
        batch_size: C8_BATCH,
        initial_lr: C8_LR,
        lr_decay_every: 25,
        validation_fraction: 0.1,
        seed: TRAIN_SEED,
        ..TrainConfig::default()
    };
    let model = net::train(model, &dict, &train_cfg).unwrap();
    let hydra_params = net::predict(&model, restored.data.view()).unwrap();

    let (h, w) = fx.t1_true.dim();
    let to_map = |p: &Array2<f64>, col: usize| {
        Array2::from_shape_fn((h, w), |(r, c)| p[[r * w + c, col]])
    };
    let base_t1 = map_metrics(
        fx.t1_true.view(),
        to_map(&base_params, 0).view(),
        SnrConvention::Paper,
    )
    .unwrap();
    let base_t2 = map_metrics(
        fx.t2_true.view(),
        to_map(&base_params, 1).view(),
        SnrConvention::Paper,
    )
    .unwrap();
    let hydra_t1 = map_metrics(
        fx.t1_true.view(),
        to_map(&hydra_params, 0).view(),
        SnrConvention::Paper,
    )
    .unwrap();
    let hydra_t2 = map_metrics(
        fx.t2_true.view(),
        to_map(&hydra_params, 1).view(),
        SnrConvention::Paper,
    )
    .unwrap();

    let gain_t1 = hydra_t1.psnr_db - base_t1.psnr_db;
    let gain_t2 = hydra_t2.psnr_db - base_t2.psnr_db;
    let elapsed = total_started.elapsed().as_secs_f64();
    let pass = gain_t1 >= 3.0 && gain_t2 >= 3.0 && elapsed < 600.0;
    report(
        8,
        "end-to-end reconstruction gain",
        pass,
        &format!(
            "T1 PSNR {:.2} dB vs baseline {:.2} dB (gain {gain_t1:.2}), T2 PSNR {:.2} dB vs \
             baseline {:.2} dB (gain {gain_t2:.2}) (both gains required >= 3 dB); total \
             {elapsed:.0}s (limit 600s)",
            hydra_t1.psnr_db, base_t1.psnr_db, hydra_t2.psnr_db, base_t2.psnr_db
        ),
    );
}

#[test]
fn criterion_09_gradient_checks() {
    let started = Instant::now();
    let configs = [
        NetConfig {
            base_channels: 2,
            n_blocks: 2,
            kernel_size: 3,
            target_scale: (100.0, 50.0),
            ..NetConfig::new(16)
        },
        NetConfig {
            base_channels: 2,
            n_blocks: 1,
            kernel_size: 5,
            input_mode: InputMode::RealImag,
            target_scale: (80.0, 40.0),
            ..NetConfig::new(12)
        },
        NetConfig {
            base_channels: 4,
            n_blocks: 2,
            kernel_size: 3,
            input_mode: InputMode::Real,
            target_scale: (60.0, 30.0),
            ..NetConfig::new(20)
        },
    ];
    let h = 1e-6;
    let rel_limit = 1e-4;
    let noise_floor = 1e-7;
    let mut worst_rel = 0.0f64;
    let mut worst_slot = String::new();
    let mut params_checked = 0usize;
    let mut kink_rechecks = 0usize;
    let mut failures = Vec::new();
    let mut worst_row_sum_err = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(31);

    // The piecewise-linear activations make the loss nonsmooth on a measure-zero
    // set; a central difference straddling such a kink is not a valid gradient
    // sample. A parameter that fails the first batch must pass on three fresh
    // random batches, which move the kinks; a wrong gradient fails everywhere.
    let rel_err = |grad: f64, fd: f64| -> Option<f64> {
        if grad.abs() < noise_floor && fd.abs() < noise_floor {
            return None;
        }
        Some((grad - fd).abs() / grad.abs().max(fd.abs()).max(1e-12))
    };
    for (ci, cfg) in configs.iter().enumerate() {
        let mut model = net::build(cfg, NET_SEED + ci as u64).unwrap();
        // Freshly built models put every bias at exactly zero, which parks a
        // kink at the evaluation point wherever a window of inactive inputs
        // makes a pre-activation equal its bias. Jittering all parameters
        // moves the check to a generic point where the loss is differentiable.
        for v in model.params.iter_mut() {
            *v += rng.gen_range(-0.05..0.05f64);
        }
        let b = 3;
        let width = cfg.input_mode.channels() * cfg.input_length;
        let draw_batch = |rng: &mut ChaCha8Rng| {
            let mut batch = Array2::zeros((b, width));
            for i in 0..b {
                let sig: Vec<Complex64> = (0..cfg.input_length)
                    .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                    .collect();
                let row = net::preprocess_signature(&sig, cfg.input_mode).unwrap();
                for (j, v) in row.iter().enumerate() {
                    batch[[i, j]] = *v;
                }
            }
            let targets = Array2::from_shape_fn((b, 2), |_| rng.gen_range(0.1..1.0));
            (batch, targets)
        };
        let (batch, targets) = draw_batch(&mut rng);
        let (_, grad) = net::loss_and_gradient(&model, batch.view(), targets.view()).unwrap();
        let slots: Vec<(String, usize, usize)> = model
            .slots()
            .iter()
            .map(|s| (s.name.clone(), s.offset, s.len))
            .collect();
        let fd_at = |model: &mut net::Model, p: usize, batch: &Array2<f64>, targets: &Array2<f64>| {
            let orig = model.params[p];
            model.params[p] = orig + h;
            let (up, _) = net::loss_and_gradient(model, batch.view(), targets.view()).unwrap();
            model.params[p] = orig - h;
            let (down, _) = net::loss_and_gradient(model, batch.view(), targets.view()).unwrap();
            model.params[p] = orig;
            (up - down) / (2.0 * h)
        };
        let mut suspects = Vec::new();
        for (name, offset, len) in &slots {
            for p in *offset..offset + len {
                let fd = fd_at(&mut model, p, &batch, &targets);
                params_checked += 1;
                match rel_err(grad[p], fd) {
                    None => {}
                    Some(rel) if rel < rel_limit => {
                        if rel > worst_rel {
                            worst_rel = rel;
                            worst_slot = format!("config {ci} {name}[{}]", p - offset);
                        }
                    }
                    Some(_) => suspects.push((name.clone(), *offset, p)),
                }
            }
        }
        for (name, offset, p) in suspects {
            kink_rechecks += 1;
            for _ in 0..3 {
                let (batch, targets) = draw_batch(&mut rng);
                let (_, grad) =
                    net::loss_and_gradient(&model, batch.view(), targets.view()).unwrap();
                let fd = fd_at(&mut model, p, &batch, &targets);
                if let Some(rel) = rel_err(grad[p], fd) {
                    if rel >= rel_limit {
                        failures.push(format!(
                            "config {ci} {name}[{}] rel {rel:.3e}",
                            p - offset
                        ));
                        break;
                    }
                    if rel > worst_rel {
                        worst_rel = rel;
                        worst_slot = format!("config {ci} {name}[{}] (recheck)", p - offset);
                    }
                }
            }
        }

        let first_row: Vec<f64> = batch.row(0).to_vec();
        let (_, attention) = net::forward_with_attention(&model, &first_row).unwrap();
        assert!(!attention.is_empty(), "attention maps are produced");
        for a in &attention {
            for row in a.rows() {
                let sum: f64 = row.iter().sum();
                worst_row_sum_err = worst_row_sum_err.max((sum - 1.0).abs());
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let pass = failures.is_empty() && worst_row_sum_err <= 1e-12 && elapsed < 60.0;
    report(
        9,
        "gradient checks",
        pass,
        &format!(
            "{params_checked} parameters over 3 tiny networks: worst accepted relative \
             error {worst_rel:.3e} at {worst_slot} (limit 1e-4, h=1e-6, dead parameters \
             pass when both sides < 1e-7, {kink_rechecks} kink-straddling samples rechecked \
             on fresh batches, persistent failures: {failures:?}); worst attention row-sum \
             error {worst_row_sum_err:.3e} (limit 1e-12); {elapsed:.1}s (limit 60s)"
        ),
    );
}

fn synthetic_dictionary(k: usize, l: usize, seed: u64) -> Dictionary {
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
    Dictionary {
        signatures,
        norms_sq,
        lut: LookupTable {
            entries,
            grid: None,
        },
        sequence_fingerprint: 0,
    }
}

#[test]
fn criterion_10_speed_scaling() {
    let l = 200;
    let k = 16_384;
    let reps = 5;
    let probes = synthetic_dictionary(64, l, PROBE_SEED).signatures;
    let model = net::build(&NetConfig::new(l), NET_SEED).unwrap();
    let mut match_medians = Vec::new();
    let mut predict_medians = Vec::new();
    for size in [k, 2 * k] {
        let dict = synthetic_dictionary(size, l, PROBE_SEED + 1);
        let mut match_times = Vec::new();
        let mut predict_times = Vec::new();
        for _ in 0..reps {
            let t = Instant::now();
            match_batch(&dict, probes.view(), MatchNorm::SquaredNorm).unwrap();
            match_times.push(t.elapsed().as_secs_f64());
            let t = Instant::now();
            net::predict(&model, probes.view()).unwrap();
            predict_times.push(t.elapsed().as_secs_f64());
        }
        match_times.sort_by(|a, b| a.total_cmp(b));
        predict_times.sort_by(|a, b| a.total_cmp(b));
        match_medians.push(match_times[reps / 2]);
        predict_medians.push(predict_times[reps / 2]);
    }
    let match_ratio = match_medians[1] / match_medians[0];
    let predict_drift =
        (predict_medians[1] - predict_medians[0]).abs() / predict_medians[0];
    let pass = (1.5..=2.6).contains(&match_ratio) && predict_drift < 0.10;
    report(
        10,
        "speed scaling",
        pass,
        &format!(
            "matching time ratio at 2K vs K={k}: {match_ratio:.2} (required in [1.5, 2.6]; \
             medians {:.4}s -> {:.4}s); network inference drift {:.1}% (required < 10%; \
             medians {:.4}s, {:.4}s)",
            match_medians[0],
            match_medians[1],
            predict_drift * 100.0,
            predict_medians[0],
            predict_medians[1]
        ),
    );
}

#[test]
fn criterion_11_metric_hand_values() {
    let truth = Array2::from_elem((2, 5), 1.0);
    let est = truth.mapv(|v| v + 0.1);
    let rmse = mrf::eval::rmse(truth.view(), est.view()).unwrap();
    let snr = mrf::eval::snr_db(truth.view(), est.view(), SnrConvention::Paper).unwrap();
    let psnr = mrf::eval::psnr_db(truth.view(), est.view(), 1.0).unwrap();
    let rmse_err = (rmse - 0.1).abs();
    let snr_err = (snr - 40.0).abs();
    let psnr_err = (psnr - 20.0).abs();
    let pass = rmse_err <= 1e-12 && snr_err <= 1e-12 && psnr_err <= 1e-12;
    report(
        11,
        "metric hand values",
        pass,
        &format!(
            "ten ones vs +0.1 everywhere: RMSE {rmse} (expect 0.1, err {rmse_err:.3e}), \
             SNR {snr} dB (expect 40, err {snr_err:.3e}), PSNR at peak 1 {psnr} dB \
             (expect 20, err {psnr_err:.3e}); all limits 1e-12"
        ),
    );
}

#[test]
fn criterion_12_container_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut round_trips = 0usize;
    let mut bitwise_ok = true;

    let real = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[3, 4, 2]), |_| {
        rng.gen_range(-1e6..1e6)
    });
    let complex = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[5, 3]), |_| {
        Complex64::new(rng.gen_range(-1e6..1e6), rng.gen_range(-1e6..1e6))
    });
    let vector = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[7]), |_| {
        rng.gen_range(-1.0..1.0)
    });
    let tensors = vec![
        Tensor::Real(real),
        Tensor::Complex(complex),
        Tensor::Real(vector),
    ];
    for (i, t) in tensors.iter().enumerate() {
        let path = dir.path().join(format!("t{i}.hyt"));
        persist::write_tensor(&path, t).unwrap();
        let back = persist::read_tensor(&path).unwrap();
        round_trips += 1;
        let same = match (t, &back) {
            (Tensor::Real(a), Tensor::Real(b)) => {
                a.shape() == b.shape()
                    && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Tensor::Complex(a), Tensor::Complex(b)) => {
                a.shape() == b.shape()
                    && a.iter().zip(b.iter()).all(|(x, y)| {
                        x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits()
                    })
            }
            _ => false,
        };
        bitwise_ok &= same;
    }

    let small = Tensor::Real(ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[2, 3]), |_| {
        rng.gen_range(-1.0..1.0)
    }));
    let bytes = persist::tensor_to_bytes(&small);
    let mut rejected = 0usize;
    for pos in 0..bytes.len() {
        let mut corrupted = bytes.clone();
        corrupted[pos] ^= 0x40;
        if persist::tensor_from_bytes(&corrupted, "corruption probe").is_err() {
            rejected += 1;
        }
    }
    let all_rejected = rejected == bytes.len();
    let pass = bitwise_ok && all_rejected;
    report(
        12,
        "container round trip",
        pass,
        &format!(
            "{round_trips} tensors round-tripped bitwise: {bitwise_ok}; single-byte \
             corruptions rejected {rejected}/{} (required all)",
            bytes.len()
        ),
    );
}

