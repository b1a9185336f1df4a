//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL ...` line
//! and then asserts, so `cargo test --test acceptance -- --nocapture`
//! shows the whole table.

use std::f64::consts::LN_2;
use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s3pet_core::autograd::Tape;
use s3pet_core::datagen::{
    decode_pvol, encode_pvol, synthesize, DataConfig, DoseParams, PhantomSpec, SplitConfig,
};
use s3pet_core::dkd::{js_divergence, Decoupled, DecoupledTokens};
use s3pet_core::dkl::{swap_tokens, token_swap};
use s3pet_core::metrics::{
    gaussian_taps, nmse, psnr, psnr_values, restack, ssim, DATA_RANGE, SSIM_K1, SSIM_K2,
    SSIM_WINDOW,
};
use s3pet_core::model::{Dose, ModelDims};
use s3pet_core::objectives::{rec_loss, stage2_loss, LossWeights};
use s3pet_core::tokenizer::{patchify, unpatchify, TokenSequence};
use s3pet_core::trainer::{
    ablation_csv, finetune_from, finetune_stage2, gradient_check, infer, infer_slices,
    lpet_baseline, pretrain_stage1, run_ablation, AblationData, EvalCase, GradCheckConfig,
    PairedSlices, S3petNet, SliceBatch, Stage, TrainConfig, Variant,
};
use s3pet_core::volume::{ImageSlice, ImageVolume};

const GRAD_TOL: f64 = 1e-5;
const GRAD_MIN_SAMPLES: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const ALGEBRA_TOL: f64 = 1e-9;
const JS_PAIRS: usize = 1000;
const JS_SYMMETRY_TOL: f64 = 1e-9;
const JS_SELF_TOL: f64 = 1e-12;
const JS_DISJOINT_TOL: f64 = 1e-6;
const JS_ORACLE_TOL: f64 = 1e-9;
const STAGE1_SLICES: usize = 32;
const STAGE1_STEPS: usize = 200;
const STAGE1_MIN_DROP: f64 = 0.5;
const STAGE1_BUDGET: Duration = Duration::from_secs(300);
const METRIC_PAIRS: usize = 20;
const METRIC_TOL: f64 = 1e-6;
const OVERFIT_TRAIN_GAIN: f64 = 2.0;
const OVERFIT_HELD_GAIN: f64 = 0.5;
const OVERFIT_MAX_STEPS: usize = 2000;
const OVERFIT_BUDGET: Duration = Duration::from_secs(30 * 60);
const ABLATION_SEEDS: u64 = 3;
const ABLATION_GAIN: f64 = 0.1;
const ABLATION_STAGE1_STEPS: usize = 500;
const ABLATION_STAGE2_STEPS: usize = 1000;

/// Training-heavy criteria take turns so their wall-clock budgets are not
/// shared with each other on small machines.
static HEAVY: Mutex<()> = Mutex::new(());

fn heavy() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written to the raw stderr handle so the line shows up even when the test
/// harness captures output of passing tests.
fn report(n: u32, ok: bool, detail: impl std::fmt::Display) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} {detail}");
}

fn data_config() -> DataConfig {
    DataConfig {
        phantom: PhantomSpec::default(),
        dose: DoseParams::default(),
        splits: SplitConfig::new(1, 1, 1, 1),
    }
}

/// Paired slices of the named synthetic volumes, all slices of each.
fn volumes(ids: impl Iterator<Item = String>) -> Vec<(ImageVolume, ImageVolume)> {
    let cfg = data_config();
    ids.map(|id| {
        let v = synthesize(11, &id, &cfg).unwrap();
        (v.lpet, v.spet)
    })
    .collect()
}

fn tiny_dims() -> ModelDims {
    ModelDims {
        dim: 8,
        depth: 1,
        heads: 2,
        patch: 8,
        slice: 16,
    }
}

fn random_slices(n: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<ImageSlice> {
    (0..n)
        .map(|_| {
            ImageSlice::new(
                side,
                side,
                (0..side * side).map(|_| rng.random::<f32>()).collect(),
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn criterion_1_gradient_check() {
    let t = Instant::now();
    let cfg = GradCheckConfig::default();
    let result = gradient_check(&cfg);
    let elapsed = t.elapsed();
    let (ok, detail) = match &result {
        Ok(r) => {
            let stage2_groups: std::collections::BTreeSet<&str> = r
                .samples
                .iter()
                .filter(|s| s.stage == Stage::Two)
                .map(|s| s.name.split('.').next().unwrap())
                .collect();
            let n = r.samples.len() + r.shared.len();
            let ok = r.max_rel_error() < GRAD_TOL
                && n >= GRAD_MIN_SAMPLES
                && elapsed < GRAD_BUDGET
                && stage2_groups.len() == 6;
            (
                ok,
                format!(
                    "{n} samples over {} stage-II groups, max rel error {:.2e}, {:.1}s",
                    stage2_groups.len(),
                    r.max_rel_error(),
                    elapsed.as_secs_f64()
                ),
            )
        }
        Err(e) => (false, e.to_string()),
    };
    report(1, ok, detail);
    assert!(ok);
}

#[test]
fn criterion_2_loss_algebra() {
    let w = LossWeights::default();
    let r = stage2_loss(0.1, 0.2, 0.3, &w);
    let mut ok = (r.total - 1.8).abs() < ALGEBRA_TOL && r.is_consistent(&w, ALGEBRA_TOL);

    // Weighted total against direct arithmetic on random terms and weights.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let w = LossWeights {
            gamma: rng.random_range(0.0..3.0),
            lambda1: rng.random_range(0.0..3.0),
            lambda2: rng.random_range(0.0..10.0),
        };
        let (a, t, c) = (
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
        );
        ok &= (stage2_loss(a, t, c, &w).total - (a + w.lambda1 * t + w.lambda2 * c)).abs()
            < ALGEBRA_TOL;

        let s = random_slices(4, 4, &mut rng);
        let l1 = |p: &ImageSlice, q: &ImageSlice| {
            p.data
                .iter()
                .zip(&q.data)
                .map(|(x, y)| (*x as f64 - *y as f64).abs())
                .sum::<f64>()
                / p.data.len() as f64
        };
        let got = rec_loss(&s[0], &s[1], &s[2], &s[3], w.gamma).unwrap();
        ok &= (got - (l1(&s[0], &s[1]) + w.gamma * l1(&s[2], &s[3]))).abs() < ALGEBRA_TOL;
    }

    // Every logged step of a short full-model run.
    let data = PairedSlices::from_volumes(&volumes((0..1).map(|i| format!("algebra_{i}"))))
        .map(|p| downsample(&p, 16))
        .unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 4,
        dims: tiny_dims(),
        ..TrainConfig::stage2()
    };
    let run = finetune_from(
        S3petNet::init(3, cfg.dims, Variant::Full).unwrap(),
        &data,
        &cfg,
    )
    .unwrap();
    let consistent = run
        .log
        .iter()
        .all(|r| r.is_consistent(&cfg.weights, ALGEBRA_TOL));
    ok &= consistent && run.log.len() == 20;
    report(
        2,
        ok,
        format!(
            "1.8 case total {:.12}, {} logged steps consistent: {consistent}",
            r.total,
            run.log.len()
        ),
    );
    assert!(ok);
}

/// Keeps every `side/target`-th pixel so the slices fit a small model.
fn downsample(p: &PairedSlices, target: usize) -> PairedSlices {
    let f = |s: &ImageSlice| {
        let k = s.height / target;
        let data = (0..target * target)
            .map(|i| s.get((i / target) * k, (i % target) * k))
            .collect();
        ImageSlice::new(target, target, data).unwrap()
    };
    PairedSlices {
        lpet: p.lpet.iter().map(f).collect(),
        spet: p.spet.iter().map(f).collect(),
    }
}

fn random_distribution(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random_bool(0.1) {
                0.0
            } else {
                1e-3 + rng.random::<f64>().powi(3)
            }
        })
        .collect();
    if v.iter().all(|&x| x == 0.0) {
        v[0] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

/// ½KL(p‖m) + ½KL(q‖m) with 0·ln 0 = 0.
fn js_oracle(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).ln())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

#[test]
fn criterion_3_js_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut sym, mut oracle, mut selfd, mut bounds) = (0.0f64, 0.0f64, 0.0f64, true);
    for _ in 0..JS_PAIRS {
        let n = rng.random_range(2..40);
        let p = random_distribution(n, &mut rng);
        let q = random_distribution(n, &mut rng);
        let pq = js_divergence(&p, &q).unwrap();
        let qp = js_divergence(&q, &p).unwrap();
        sym = sym.max((pq - qp).abs());
        bounds &= (0.0..=LN_2).contains(&pq);
        oracle = oracle.max((pq - js_oracle(&p, &q)).abs());
        selfd = selfd.max(js_divergence(&p, &p).unwrap());
    }
    let mut disjoint = (js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - LN_2).abs();
    for _ in 0..100 {
        let n = rng.random_range(2..40);
        let cut = rng.random_range(1..n);
        let mut p = random_distribution(n, &mut rng);
        let mut q = random_distribution(n, &mut rng);
        p[cut..].iter_mut().for_each(|v| *v = 0.0);
        q[..cut].iter_mut().for_each(|v| *v = 0.0);
        if p.iter().sum::<f64>() == 0.0 || q.iter().sum::<f64>() == 0.0 {
            continue;
        }
        let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
        p.iter_mut().for_each(|v| *v /= sp);
        q.iter_mut().for_each(|v| *v /= sq);
        disjoint = disjoint.max((js_divergence(&p, &q).unwrap() - LN_2).abs());
    }
    let ok = sym < JS_SYMMETRY_TOL
        && bounds
        && selfd < JS_SELF_TOL
        && disjoint < JS_DISJOINT_TOL
        && oracle < JS_ORACLE_TOL;
    report(
        3,
        ok,
        format!("{JS_PAIRS} pairs: asym {sym:.1e}, self {selfd:.1e}, disjoint {disjoint:.1e}, oracle {oracle:.1e}, bounds {bounds}"),
    );
    assert!(ok);
}

fn random_tokens(n: usize, d: usize, rng: &mut ChaCha8Rng) -> TokenSequence {
    TokenSequence::new(
        n,
        d,
        (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect(),
    )
    .unwrap()
}

#[test]
fn criterion_4_structural_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    // Token swap applied twice gives back the inputs bit for bit.
    let mut swap_ok = true;
    for _ in 0..50 {
        let mk = |dose, rng: &mut ChaCha8Rng| DecoupledTokens {
            specific: random_tokens(16, 8, rng),
            invariant: random_tokens(16, 8, rng),
            dose,
        };
        let (l, s) = (mk(Dose::Low, &mut rng), mk(Dose::Standard, &mut rng));
        let (l1, s1) = swap_tokens(&l, &s).unwrap();
        let (l2, s2) = swap_tokens(&l1, &s1).unwrap();
        swap_ok &= l2 == l && s2 == s;
        let (gl, gs) = token_swap(
            &Decoupled {
                specific: 1,
                invariant: 2,
                dose: Dose::Low,
            },
            &Decoupled {
                specific: 3,
                invariant: 4,
                dose: Dose::Standard,
            },
        );
        let (gl2, gs2) = token_swap(&gl, &gs);
        swap_ok &=
            gl2.specific == 1 && gl2.invariant == 2 && gs2.specific == 3 && gs2.invariant == 4;
    }

    // 100 training steps; the projector both branches read is one set of weights.
    let data = PairedSlices::from_volumes(&volumes((0..1).map(|i| format!("struct_{i}"))))
        .map(|p| downsample(&p, 16))
        .unwrap();
    let cfg = TrainConfig {
        epochs: 100,
        max_steps: Some(100),
        batch_size: 8,
        dims: tiny_dims(),
        ..TrainConfig::stage2()
    };
    let before = S3petNet::init(5, cfg.dims, Variant::Full).unwrap();
    let run = finetune_from(before.clone(), &data, &cfg).unwrap();
    let (inv_l, inv_s) = (
        run.net.dkd.invariant(Dose::Low),
        run.net.dkd.invariant(Dose::Standard),
    );
    let bits =
        |t: &s3pet_core::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let shared_ok = run.log.len() == 100
        && bits(&inv_l.weight) == bits(&inv_s.weight)
        && bits(&inv_l.bias) == bits(&inv_s.bias)
        && inv_l.weight != before.dkd.invariant(Dose::Low).weight
        && run
            .checkpoint
            .entries
            .iter()
            .filter(|e| e.name.starts_with("dkd.invariant"))
            .count()
            == 2;

    // Gradient of the transfer loss alone: zero for everything that only
    // feeds the target s_ds, non-zero on the LPET side.
    let net = &run.net;
    let mut net_train = net.clone();
    net_train.set_mode(s3pet_core::decoder::Mode::Train);
    let l: Vec<&ImageSlice> = data.lpet.iter().take(4).collect();
    let s: Vec<&ImageSlice> = data.spet.iter().take(4).collect();
    let (lb, sb) = (
        SliceBatch::new(&l, &cfg.dims).unwrap(),
        SliceBatch::new(&s, &cfg.dims).unwrap(),
    );
    let mut tape = Tape::new();
    let pass = net_train
        .forward(&mut tape, &lb, &sb, &cfg.weights)
        .unwrap();
    let g = tape.backward(pass.terms.transfer.unwrap()).unwrap();
    let mut spet_zero = true;
    let mut spet_bound = 0;
    let mut lpet_nonzero = false;
    use s3pet_core::params::{ParamKind, Parameters};
    net_train.visit("", &mut |name, t, kind| {
        if kind != ParamKind::Learnable {
            return;
        }
        let grad = tape.param_var(t).and_then(|v| g.get(v));
        if name.starts_with("spet.") || name.starts_with("dkd.specific_s") {
            spet_bound += usize::from(tape.param_var(t).is_some());
            spet_zero &= grad.is_none_or(|g| g.iter().all(|&v| v == 0.0));
        }
        if name.starts_with("lpet.") {
            lpet_nonzero |= grad.is_some_and(|g| g.iter().any(|&v| v != 0.0));
        }
    });
    let stop_ok = spet_zero && spet_bound > 0 && lpet_nonzero;

    // Patch round trip over every patch size that tiles the slice.
    let mut patch_ok = true;
    for side in [8usize, 16, 24, 64] {
        let img = &random_slices(1, side, &mut rng)[0];
        for p in (1..=side).filter(|p| side % p == 0) {
            let back = unpatchify(&patchify(img, p).unwrap(), side, side, p).unwrap();
            patch_ok &= back
                .data
                .iter()
                .map(|v| v.to_bits())
                .eq(img.data.iter().map(|v| v.to_bits()));
        }
    }

    let ok = swap_ok && shared_ok && stop_ok && patch_ok;
    report(
        4,
        ok,
        format!("swap involution {swap_ok}, shared projector after 100 steps {shared_ok}, stop-gradient {stop_ok}, patch round trip {patch_ok}"),
    );
    assert!(ok);
}

#[test]
fn criterion_5_stage1_sanity() {
    let _turn = heavy();
    let slices: Vec<ImageSlice> = volumes((0..4).map(|i| format!("stage1_{i}")))
        .into_iter()
        .flat_map(|(_, s)| s.slices())
        .collect();
    assert_eq!(slices.len(), STAGE1_SLICES);
    assert_eq!((slices[0].height, slices[0].width), (64, 64));
    let cfg = TrainConfig {
        epochs: STAGE1_STEPS,
        max_steps: Some(STAGE1_STEPS),
        ..TrainConfig::stage1()
    };
    assert_eq!(cfg.learning_rate, 2e-4);
    let t = Instant::now();
    let mut detail = Vec::new();
    let mut ok = true;
    for dose in [Dose::Standard, Dose::Low] {
        let run = pretrain_stage1(&slices, dose, &cfg).unwrap();
        let first = run.step_losses[0];
        let last = *run.step_losses.last().unwrap();
        let drop = 1.0 - last / first;
        let again = pretrain_stage1(&slices, dose, &cfg).unwrap();
        let same = again.step_losses == run.step_losses
            && again.checkpoint.encode() == run.checkpoint.encode();
        ok &= run.step_losses.len() == STAGE1_STEPS && drop >= STAGE1_MIN_DROP && same;
        detail.push(format!(
            "{dose}: {first:.4} -> {last:.4} ({:.0}% drop, rerun identical {same})",
            drop * 100.0
        ));
    }
    let elapsed = t.elapsed();
    ok &= elapsed < STAGE1_BUDGET;
    report(
        5,
        ok,
        format!("{}, {:.1}s", detail.join("; "), elapsed.as_secs_f64()),
    );
    assert!(ok);
}

/// Desk-scale protocol shared by the overfit and ablation criteria: a pool
/// of unpaired SPET volumes and LPET-only volumes for Stage I, a few paired
/// volumes for Stage II and held-out pairs for evaluation.
fn desk_data(tag: &str, paired_train: usize, held_out: usize) -> AblationData {
    let cfg = data_config();
    let gen = |role: &str, n: usize| -> Vec<_> {
        (0..n)
            .map(|i| synthesize(31, &format!("{tag}_{role}_{i}"), &cfg).unwrap())
            .collect()
    };
    let unpaired = gen("unpaired", 12);
    let lpet_only = gen("lpet", 3);
    let train = gen("train", paired_train);
    let eval = gen("eval", held_out);
    let mut pretrain_lpet: Vec<ImageSlice> =
        lpet_only.iter().flat_map(|v| v.lpet.slices()).collect();
    pretrain_lpet.extend(train.iter().flat_map(|v| v.lpet.slices()));
    AblationData {
        pretrain_lpet,
        pretrain_spet: unpaired.iter().flat_map(|v| v.spet.slices()).collect(),
        train: PairedSlices::from_volumes(
            &train
                .iter()
                .map(|v| (v.lpet.clone(), v.spet.clone()))
                .collect::<Vec<_>>(),
        )
        .unwrap(),
        eval: eval
            .into_iter()
            .map(|v| EvalCase {
                id: v.id,
                lpet: v.lpet,
                spet: v.spet,
            })
            .collect(),
    }
}

/// Learning rate for the desk-scale runs; the 2e-4 default needs far more
/// steps than the budgets allow.
const DESK_LR: f64 = 1e-3;

fn desk_configs(
    dims: ModelDims,
    stage1_steps: usize,
    stage2_steps: usize,
    batch: usize,
) -> (TrainConfig, TrainConfig) {
    let c1 = TrainConfig {
        epochs: usize::MAX,
        max_steps: Some(stage1_steps),
        batch_size: 16,
        learning_rate: DESK_LR,
        dims,
        ..TrainConfig::stage1()
    };
    let c2 = TrainConfig {
        stage: Stage::Two,
        max_steps: Some(stage2_steps),
        batch_size: batch,
        ..c1.clone()
    };
    (c1, c2)
}

#[test]
fn criterion_6_overfit_sanity() {
    let _turn = heavy();
    let t = Instant::now();
    let data = desk_data("overfit", 2, 1);
    assert_eq!((data.train.len(), data.eval[0].lpet.depth), (16, 8));
    let (c1, c2) = desk_configs(ModelDims::default(), 1000, 1000, 16);
    assert!(c2.max_steps.unwrap() <= OVERFIT_MAX_STEPS);
    let l = pretrain_stage1(&data.pretrain_lpet, Dose::Low, &c1)
        .unwrap()
        .checkpoint;
    let s = pretrain_stage1(&data.pretrain_spet, Dose::Standard, &c1)
        .unwrap()
        .checkpoint;
    let run = finetune_stage2(&data.train, &l, &s, &c2).unwrap();

    let train_ref = restack(&data.train.spet).unwrap();
    let train_lpet = psnr(&restack(&data.train.lpet).unwrap(), &train_ref, 1.0).unwrap();
    let train_rpet = psnr(
        &restack(&infer_slices(&run.net, &data.train.lpet).unwrap()).unwrap(),
        &train_ref,
        1.0,
    )
    .unwrap();
    let held = &data.eval[0];
    let held_lpet = lpet_baseline(&data.eval, 1.0).unwrap().psnr;
    let held_rpet = psnr(
        &restack(&infer_slices(&run.net, &held.lpet.slices()).unwrap()).unwrap(),
        &held.spet,
        1.0,
    )
    .unwrap();
    let elapsed = t.elapsed();

    let train_ok = train_rpet >= train_lpet + OVERFIT_TRAIN_GAIN;
    let held_ok = held_rpet >= held_lpet + OVERFIT_HELD_GAIN;
    let ok = train_ok && held_ok && elapsed < OVERFIT_BUDGET;
    report(
        6,
        ok,
        format!(
            "{} steps: train RPET {train_rpet:.2} dB vs LPET {train_lpet:.2} dB ({:+.2}), held-out RPET {held_rpet:.2} dB vs LPET {held_lpet:.2} dB ({:+.2}), {:.0}s",
            run.log.len(),
            train_rpet - train_lpet,
            held_rpet - held_lpet,
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_7_ablation_direction() {
    let _turn = heavy();
    let t = Instant::now();
    let data = desk_data("ablation", 2, 2);
    let dims = ModelDims {
        dim: 32,
        ..ModelDims::default()
    };
    let (c1, c2) = desk_configs(dims, ABLATION_STAGE1_STEPS, ABLATION_STAGE2_STEPS, 8);
    let mut rows = Vec::new();
    for seed in 0..ABLATION_SEEDS {
        rows.extend(
            run_ablation(
                &data,
                &TrainConfig { seed, ..c1.clone() },
                &TrainConfig { seed, ..c2.clone() },
                1.0,
            )
            .unwrap(),
        );
    }
    let csv = ablation_csv(&rows).unwrap();
    let out = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("ablation.csv");
    std::fs::write(&out, &csv).unwrap();
    print!("{csv}");
    for r in &rows {
        println!("seed {} {}: psnr {:.3}", r.seed, r.variant, r.metrics.psnr);
    }

    let mean = |v: Variant| {
        let of: Vec<f64> = rows
            .iter()
            .filter(|r| r.variant == v)
            .map(|r| r.metrics.psnr)
            .collect();
        of.iter().sum::<f64>() / of.len() as f64
    };
    let (base, full) = (mean(Variant::Baseline), mean(Variant::Full));
    let complete = csv.lines().count() == 5 && rows.len() == 4 * ABLATION_SEEDS as usize;
    let ok = complete && full >= base + ABLATION_GAIN;
    report(
        7,
        ok,
        format!(
            "{ABLATION_SEEDS} seeds: full {full:.3} dB vs baseline {base:.3} dB ({:+.3}), csv at {}, {:.0}s",
            full - base,
            out.display(),
            t.elapsed().as_secs_f64()
        ),
    );
    assert!(ok);
}

/// Brute-force SSIM: explicit 2-D window at every fully-inside position.
fn ssim_oracle(a: &ImageVolume, b: &ImageVolume) -> f64 {
    let taps = gaussian_taps();
    let (h, w) = (a.height, a.width);
    let c1 = (SSIM_K1 * DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * DATA_RANGE).powi(2);
    let mut per_slice = Vec::new();
    for z in 0..a.depth {
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..=h - SSIM_WINDOW {
            for j in 0..=w - SSIM_WINDOW {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for u in 0..SSIM_WINDOW {
                    for v in 0..SSIM_WINDOW {
                        let k = taps[u] * taps[v];
                        let x = a.get(z, i + u, j + v) as f64;
                        let y = b.get(z, i + u, j + v) as f64;
                        ma += k * x;
                        mb += k * y;
                        saa += k * x * x;
                        sbb += k * y * y;
                        sab += k * x * y;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        per_slice.push(total / count as f64);
    }
    per_slice.iter().sum::<f64>() / per_slice.len() as f64
}

fn random_volume(d: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImageVolume {
    ImageVolume::new(
        d,
        h,
        w,
        1,
        (0..d * h * w).map(|_| rng.random::<f32>()).collect(),
    )
    .unwrap()
}

#[test]
fn criterion_8_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = [0.0f64; 3];
    for _ in 0..METRIC_PAIRS {
        let (d, h, w) = (
            rng.random_range(1..4),
            rng.random_range(11..24),
            rng.random_range(11..24),
        );
        let a = random_volume(d, h, w, &mut rng);
        // Reference correlated with the prediction so SSIM is not near zero.
        let mut b = a.clone();
        b.data
            .iter_mut()
            .for_each(|v| *v = (*v * 0.7 + rng.random::<f32>() * 0.3).min(1.0));
        let xs: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
        let ys: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
        let sq: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - y).powi(2)).sum();
        let psnr_ref = 10.0 * (1.0 / (sq / xs.len() as f64)).log10();
        let nmse_ref = sq / ys.iter().map(|y| y * y).sum::<f64>();
        worst[0] = worst[0].max((psnr(&a, &b, 1.0).unwrap() - psnr_ref).abs());
        worst[1] = worst[1].max((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs());
        worst[2] = worst[2].max((nmse(&a, &b).unwrap() - nmse_ref).abs());
    }

    let a = random_volume(2, 16, 16, &mut rng);
    let identical = ssim(&a, &a).unwrap() == 1.0
        && nmse(&a, &a).unwrap() == 0.0
        && psnr(&a, &a, 1.0).unwrap() == f64::INFINITY;
    let offset = (psnr_values(&[0.6; 50], &[0.5; 50], 1.0).unwrap() - 20.0).abs();
    let zero = ImageVolume::zeros(a.depth, a.height, a.width);
    let zero_pred = nmse(&zero, &a).unwrap();
    let closed = identical && offset < 1e-12 && zero_pred == 1.0;
    let ok = worst.iter().all(|&e| e < METRIC_TOL) && closed;
    report(
        8,
        ok,
        format!(
            "{METRIC_PAIRS} pairs: psnr {:.1e}, ssim {:.1e}, nmse {:.1e}; identical {identical}, offset err {offset:.1e}, zero-pred nmse {zero_pred}",
            worst[0], worst[1], worst[2]
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_9_persistence() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut pvol_ok = true;
    for _ in 0..10 {
        let v = random_volume(
            rng.random_range(1..5),
            rng.random_range(1..20),
            rng.random_range(1..20),
            &mut rng,
        );
        let bytes = encode_pvol(&v);
        let back = decode_pvol(&bytes).unwrap();
        pvol_ok &= back == v && encode_pvol(&back) == bytes;
    }

    let data = PairedSlices::from_volumes(&volumes((0..1).map(|i| format!("persist_{i}"))))
        .map(|p| downsample(&p, 16))
        .unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        dims: tiny_dims(),
        ..TrainConfig::stage2()
    };
    let run = finetune_from(
        S3petNet::init(9, cfg.dims, Variant::Full).unwrap(),
        &data,
        &cfg,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stage2.ckpt");
    s3pet_core::trainer::save_checkpoint(&path, &run.checkpoint).unwrap();
    let loaded = s3pet_core::trainer::load_checkpoint(&path).unwrap();
    let ckpt_ok = loaded == run.checkpoint && loaded.encode() == std::fs::read(&path).unwrap();

    let x = restack(&data.lpet).unwrap();
    let direct = infer(&x, &run.checkpoint).unwrap();
    let reloaded = infer(&x, &loaded).unwrap();
    let infer_ok = direct
        .data
        .iter()
        .map(|v| v.to_bits())
        .eq(reloaded.data.iter().map(|v| v.to_bits()));

    let ok = pvol_ok && ckpt_ok && infer_ok;
    report(
        9,
        ok,
        format!("pvol {pvol_ok}, checkpoint {ckpt_ok}, infer(load(save)) {infer_ok}"),
    );
    assert!(ok);
}
