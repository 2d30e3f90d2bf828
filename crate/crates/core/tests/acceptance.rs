//! Acceptance run: one PASS/FAIL line per criterion, with its runtime budget.
//!
//! `cargo test -p ssr-core --test acceptance [-- <name filter>]`

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{micro_config, shapes_data, tiny_config};
use ssr_core::config::ExperimentConfig;
use ssr_core::datasets::{synthetic, Sampler, TrainingData};
use ssr_core::imaging::{
    degrade, images_to_tensor, upsample_naive, DegradationSpec, ImageTensor, Kernel,
    ValueRange,
};
use ssr_core::losses::{
    adv_generator, consistency, l1_pixel, perceptual, total_generator, LossReport, LossWeights,
};
use ssr_core::metrics::{frechet_distance, product_sqrt, FidConfig, FidExtractor, GaussianStats};
use ssr_core::models::{FeatureExtractor, FeatureExtractorSpec};
use ssr_core::trainer::{fit, read_loss_log, LossRecord, Trainer, LOSS_LOG};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------- loss algebra

fn loss_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c: [f64; 6] = std::array::from_fn(|_| rng.random_range(0.0..10.0));
        let w = LossWeights {
            lambda_sup_adv: rng.random_range(0.0..1.0),
            eta_sup_l1: rng.random_range(0.0..1.0),
            alpha_cons_percep: rng.random_range(0.0..1.0),
            gamma_unsup_adv: rng.random_range(0.0..1.0),
            beta_cons_l1: rng.random_range(0.0..1.0),
        };
        let report = LossReport {
            percep_sup: Some(c[0]),
            adv_g_sup: Some(c[1]),
            l1_sup: Some(c[2]),
            cons_percep: Some(c[3]),
            adv_g_unsup: Some(c[4]),
            cons_l1: Some(c[5]),
            ..LossReport::default()
        };
        // oracle: the weighted sum written out in the opposite order
        let expected = w.beta_cons_l1 * c[5]
            + w.gamma_unsup_adv * c[4]
            + w.alpha_cons_percep * c[3]
            + w.eta_sup_l1 * c[2]
            + w.lambda_sup_adv * c[1]
            + c[0];
        worst = worst.max(rel(total_generator(&report, &w).unwrap(), expected));

        let sup = LossWeights {
            alpha_cons_percep: 0.0,
            gamma_unsup_adv: 0.0,
            beta_cons_l1: 0.0,
            ..w
        };
        let supervised = c[0] + w.lambda_sup_adv * c[1] + w.eta_sup_l1 * c[2];
        let got = total_generator(&report, &sup).unwrap();
        ensure(got == supervised, || {
            format!("zero unsupervised weights: {got} != supervised objective {supervised}")
        })?;
    }
    ensure(worst <= 1e-6, || format!("worst relative error {worst:e}"))?;
    let ones = LossReport {
        l1_sup: Some(1.0),
        percep_sup: Some(1.0),
        adv_g_sup: Some(1.0),
        adv_g_unsup: Some(1.0),
        cons_l1: Some(1.0),
        cons_percep: Some(1.0),
        ..LossReport::default()
    };
    let unit = total_generator(&ones, &LossWeights::semi_supervised()).unwrap();
    ensure((unit - 1.12).abs() <= 1e-12, || format!("unit components give {unit}"))?;
    Ok(format!(
        "1000 draws, worst rel err {worst:.1e}; supervised reduction exact; unit components {unit:.4}"
    ))
}

// ----------------------------------------------------------- consistency zero

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageTensor {
    let data = (0..h * w * c).map(|_| rng.random::<f32>()).collect();
    ImageTensor::new(h, w, c, ValueRange::Unit, data).unwrap()
}

fn consistency_zero_law() -> Outcome {
    let spec = DegradationSpec::new(4, Kernel::AveragePool);
    let fx_spec = FeatureExtractorSpec::default().with_tap(2, 2).with_width_divisor(8);
    let fx = FeatureExtractor::new(&fx_spec, DType::F64, &Device::Cpu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(1..=4);
        let c = if rng.random_bool(0.5) { 1 } else { 3 };
        let side = 2 * rng.random_range(1..=8);
        let lrs: Vec<_> = (0..n).map(|_| random_image(&mut rng, side, side, c)).collect();
        let srs: Vec<_> = lrs.iter().map(|x| upsample_naive(x, 4).unwrap()).collect();
        let lr = images_to_tensor(&lrs, DType::F64, &Device::Cpu).unwrap();
        let sr = images_to_tensor(&srs, DType::F64, &Device::Cpu).unwrap();
        let (l1, p) = consistency(&lr, &sr, &spec, &fx).unwrap();
        let (l1, p) = (l1.to_scalar::<f64>().unwrap(), p.to_scalar::<f64>().unwrap());
        worst = (worst.0.max(l1), worst.1.max(p));
    }
    ensure(worst.0 <= 1e-15 && worst.1 <= 1e-12, || {
        format!("max cons_l1 {:e}, max cons_percep {:e}", worst.0, worst.1)
    })?;
    Ok(format!(
        "100 batches, max cons_l1 {:.1e}, max cons_percep {:.1e}",
        worst.0, worst.1
    ))
}

// --------------------------------------------------------------- gradients

/// Worst norm-relative error between autodiff and central differences of `f` at `x0`.
fn gradient_error(x0: &[f64], shape: &[usize], f: &dyn Fn(&Tensor) -> Tensor) -> f64 {
    let dev = Device::Cpu;
    let var = Var::from_tensor(&Tensor::from_slice(x0, shape, &dev).unwrap()).unwrap();
    let loss = f(var.as_tensor());
    let grads = loss.backward().unwrap();
    let ad = grads
        .get(var.as_tensor())
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    let eval = |x: &[f64]| {
        f(&Tensor::from_slice(x, shape, &dev).unwrap())
            .to_scalar::<f64>()
            .unwrap()
    };
    let h = 1e-6;
    let mut x = x0.to_vec();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..x.len() {
        x[i] = x0[i] + h;
        let up = eval(&x);
        x[i] = x0[i] - h;
        let down = eval(&x);
        x[i] = x0[i];
        let fd = (up - down) / (2.0 * h);
        num += (ad[i] - fd).powi(2);
        den += fd.powi(2);
    }
    num.sqrt() / den.sqrt().max(1e-300)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn gradient_suite() -> Outcome {
    const INSTANCES: usize = 20;
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let percep_fx = FeatureExtractor::new(
        &FeatureExtractorSpec::default().with_tap(3, 4).with_width_divisor(8),
        DType::F64,
        &dev,
    )
    .unwrap();
    let cons_fx = FeatureExtractor::new(
        &FeatureExtractorSpec::default().with_tap(2, 2).with_width_divisor(8),
        DType::F64,
        &dev,
    )
    .unwrap();
    let mut worst = [0.0f64; 5];
    for _ in 0..INSTANCES {
        // l1 on 1×3×8×8, keeping every difference away from the kink at zero
        let shape = [1, 3, 8, 8];
        let a = uniform(&mut rng, 192, 0.0, 1.0);
        let b: Vec<f64> = a
            .iter()
            .map(|&v| {
                let d = rng.random_range(0.01..0.3);
                if rng.random_bool(0.5) { v + d } else { v - d }
            })
            .collect();
        let bt = Tensor::from_slice(&b, &shape[..], &dev).unwrap();
        worst[0] = worst[0].max(gradient_error(&a, &shape, &|x| l1_pixel(x, &bt).unwrap()));

        let b = uniform(&mut rng, 192, 0.0, 1.0);
        let bt = Tensor::from_slice(&b, &shape[..], &dev).unwrap();
        let a = uniform(&mut rng, 192, 0.0, 1.0);
        worst[1] = worst[1].max(gradient_error(&a, &shape, &|x| {
            perceptual(x, &bt, &percep_fx).unwrap()
        }));

        // consistency: 2×2 LR against an 8×8 SR, gradients w.r.t. the SR image
        let spec = DegradationSpec::default();
        let lr = Tensor::from_slice(&uniform(&mut rng, 12, 0.2, 0.8), (1, 3, 2, 2), &dev).unwrap();
        let sr = uniform(&mut rng, 192, 0.25, 0.75);
        worst[2] = worst[2].max(gradient_error(&sr, &shape, &|x| {
            consistency(&lr, x, &spec, &cons_fx).unwrap().0
        }));
        worst[3] = worst[3].max(gradient_error(&sr, &shape, &|x| {
            consistency(&lr, x, &spec, &cons_fx).unwrap().1
        }));

        let p = uniform(&mut rng, 16, 0.05, 0.95);
        worst[4] = worst[4].max(gradient_error(&p, &[16, 1], &|x| adv_generator(x).unwrap()));
    }
    let names = ["l1_pixel", "perceptual", "cons_l1", "cons_percep", "adv_generator"];
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(worst.iter().all(|&e| e <= 1e-4), || format!("relative errors: {detail}"))?;
    Ok(format!("{INSTANCES} instances each, worst relative error: {detail}"))
}

// ------------------------------------------------------------- degradation

fn degradation_suite() -> Outcome {
    let mut worst_const = 0.0f64;
    for kernel in [Kernel::Bicubic, Kernel::AveragePool, Kernel::Nearest] {
        for v in [0.0, 0.5, 0.73, 1.0] {
            let img = ImageTensor::filled(256, 256, 3, v).unwrap();
            let out = degrade(&img, &DegradationSpec::new(4, kernel)).unwrap();
            ensure(out.shape() == (64, 64, 3), || format!("{kernel:?}: {:?}", out.shape()))?;
            for &x in out.data() {
                worst_const = worst_const.max((x - v).abs() as f64);
            }
        }
    }
    ensure(worst_const <= 1e-6, || format!("constant image drifts by {worst_const:e}"))?;

    let img = ImageTensor::filled(256, 256, 1, 0.2).unwrap();
    let out = degrade(&img, &DegradationSpec::default()).unwrap();
    ensure(out.shape() == (64, 64, 1), || format!("256 -> {:?}", out.shape()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let s = rng.random_range(2..=5);
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let c = if rng.random_bool(0.5) { 1 } else { 3 };
        let x = random_image(&mut rng, h, w, c);
        let back = degrade(&upsample_naive(&x, s).unwrap(), &DegradationSpec::new(s, Kernel::AveragePool))
            .unwrap();
        ensure(back == x, || format!("round trip failed at scale {s} on {h}x{w}x{c}"))?;
    }
    Ok(format!(
        "constant fixed point max drift {worst_const:.1e}; 256->64 shape law; 50 exact replicate/average-pool round trips"
    ))
}

// --------------------------------------------------------------------- FID

fn scalar_stats(mu: f64, sigma: f64) -> GaussianStats {
    GaussianStats {
        mean: DVector::from_element(1, mu),
        cov: DMatrix::from_element(1, 1, sigma * sigma),
        n: 100,
    }
}

fn random_psd(rng: &mut ChaCha8Rng, d: usize, ridge: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(d, d) * ridge
}

fn fid_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_1d = 0.0f64;
    for _ in 0..500 {
        let (ma, mb) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let (sa, sb) = (rng.random_range(0.01..3.0), rng.random_range(0.01..3.0));
        let got = frechet_distance(&scalar_stats(ma, sa), &scalar_stats(mb, sb)).unwrap();
        let want = (ma - mb).powi(2) + (sa - sb).powi(2);
        worst_1d = worst_1d.max((got - want).abs());
    }
    ensure(worst_1d <= 1e-9, || format!("1-D closed form off by {worst_1d:e}"))?;

    let mut worst_sym = 0.0f64;
    let mut worst_sqrt = 0.0f64;
    for d in 1..=16 {
        for _ in 0..4 {
            let mk = |rng: &mut ChaCha8Rng, ridge| GaussianStats {
                mean: DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
                cov: random_psd(rng, d, ridge),
                n: 50,
            };
            let a = mk(&mut rng, 0.1);
            let b = mk(&mut rng, 0.0);
            ensure(frechet_distance(&a, &a).unwrap() == 0.0, || format!("d(a,a) != 0 at dim {d}"))?;
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            worst_sym = worst_sym.max((ab - ba).abs());
            let s = product_sqrt(&a.cov, &b.cov);
            let target = &a.cov * &b.cov;
            worst_sqrt = worst_sqrt.max((&s * &s - &target).norm() / target.norm());
        }
    }
    ensure(worst_sym <= 1e-9, || format!("asymmetry {worst_sym:e}"))?;
    ensure(worst_sqrt <= 1e-6, || format!("sqrt reconstruction error {worst_sqrt:e}"))?;

    let ex = FidExtractor::new(&FidConfig::small(), &Device::Cpu).unwrap();
    let real = synthetic::shapes(64, 32, 3, 6);
    let same = ex.fid(&real, &real).unwrap().fid;
    // reordering changes the accumulation order, so this goes through the full eigen path
    let mut shuffled = real.clone();
    shuffled.reverse();
    let reordered = ex.fid(&real, &shuffled).unwrap().fid;
    ensure(same <= 1e-6 && reordered <= 1e-6, || {
        format!("fid(real, real) = {same:e}, reordered {reordered:e}")
    })?;
    Ok(format!(
        "1-D max err {worst_1d:.1e} (500 pairs); d(a,a)=0; asymmetry {worst_sym:.1e}; sqrt rel err {worst_sqrt:.1e} (dims 1-16); fid(real,real) {same:.1e}, reordered {reordered:.1e}"
    ))
}

// --------------------------------------------------------- two-stage schedule

fn snapshot_values(t: &Trainer) -> Vec<Vec<f64>> {
    t.discriminator()
        .params()
        .snapshot()
        .unwrap()
        .values()
        .map(|v| v.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap())
        .collect()
}

fn two_stage_schedule() -> Outcome {
    let mut cfg = micro_config();
    cfg.trainer.warmup_batches = 10;
    cfg.trainer.max_batches = 12;
    let sampler = Sampler::new(shapes_data(&cfg, 8, 8, 0, 7), cfg.trainer.batch, 7).unwrap();
    let mut t = Trainer::new(&cfg, &Device::Cpu).unwrap();
    let init = snapshot_values(&t);
    for k in 0..12u64 {
        let r = t.step(&sampler.batch(k).unwrap()).unwrap();
        let batch = k + 1;
        let warm = k < 10;
        let present: Vec<_> = r.values().filter(|(_, v)| v.is_some()).map(|(n, _)| n).collect();
        if warm {
            ensure(present == ["l1_sup", "total_g"], || format!("batch {batch}: {present:?}"))?;
            ensure(snapshot_values(&t) == init, || format!("D moved during warmup batch {batch}"))?;
        } else {
            ensure(present.len() == 8, || format!("batch {batch}: only {present:?}"))?;
        }
        if batch == 11 {
            ensure(snapshot_values(&t) != init, || "D unchanged at batch 11".into())?;
        }
    }
    Ok("D bit-identical through batch 10 (index 9), differs at batch 11; report fields flip at index 10".into())
}

// ------------------------------------------------------------------- smoke

fn smoke_config(weights: LossWeights) -> ExperimentConfig {
    let mut cfg = tiny_config();
    cfg.loss_weights = weights;
    cfg.trainer.warmup_batches = 500;
    cfg.trainer.max_batches = 800;
    cfg.trainer.validate_every = 100;
    cfg
}

fn smoke_data(cfg: &ExperimentConfig) -> Arc<TrainingData> {
    shapes_data(cfg, 32, 96, 8, 100)
}

fn cons_at(log: &[LossRecord], step: u64) -> Result<f64, String> {
    log.iter()
        .find(|r| r.step == step)
        .and_then(|r| r.report.cons_l1)
        .ok_or_else(|| format!("no cons_l1 at step {step}"))
}

fn smoke_run(name: &str, weights: LossWeights, dir: &Path) -> Result<(Trainer, Vec<LossRecord>, Vec<f64>), String> {
    let cfg = smoke_config(weights);
    let out = dir.join(name);
    let res = fit(&cfg, smoke_data(&cfg), &out, None, &Device::Cpu).map_err(|e| format!("{name}: {e}"))?;
    let log = read_loss_log(&out.join(LOSS_LOG)).map_err(|e| e.to_string())?;
    ensure(log.len() == 800, || format!("{name}: {} log records", log.len()))?;
    let l1 = res.validations.iter().map(|v| v.l1).collect();
    Ok((res.trainer, log, l1))
}

fn smoke() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (semi, log, l1) = smoke_run("semi", LossWeights::semi_supervised(), tmp.path())?;
    let (l1_init, l1_final) = (l1[0], *l1.last().unwrap());
    let drop = 1.0 - l1_final / l1_init;
    // log steps are 0-based: step 500 is the 501st batch, the first adversarial one
    let (c_start, c_end) = (cons_at(&log, 500)?, cons_at(&log, 799)?);
    let (_, ablation_log, _) = smoke_run("ablation1", LossWeights::ablation_1(), tmp.path())?;
    let ablation_ok = ablation_log[500..].iter().all(|r| r.report.cons_l1.is_some());
    let (sup, _, _) = smoke_run("supervised", LossWeights::supervised_only(), tmp.path())?;

    let cfg = smoke_config(LossWeights::semi_supervised());
    let held_out: Vec<_> = synthetic::shapes(64, 32, 3, 200)
        .into_iter()
        .map(|hr| (degrade(&hr, &cfg.degradation).unwrap(), hr))
        .collect();
    let ex = FidExtractor::new(&cfg.fid, &Device::Cpu).unwrap();
    let fid_semi = semi.fid(&held_out, &ex).unwrap().fid;
    let fid_sup = sup.fid(&held_out, &ex).unwrap().fid;

    let detail = format!(
        "(a) val L1 {l1_init:.4} -> {l1_final:.4} ({:.1}% drop); (b) cons_l1 step 501 {c_start:.5} -> final {c_end:.5}; (c) ablation-1 ran 800 batches; FID on 64 held-out (not gated): semi {fid_semi:.3}, supervised-only {fid_sup:.3}",
        100.0 * drop
    );
    println!("    validation L1 curve (every 100 batches): {l1:.4?}");
    ensure(drop >= 0.30, || format!("(a) failed: {detail}"))?;
    ensure(c_end < c_start, || format!("(b) failed: {detail}"))?;
    ensure(ablation_ok, || format!("(c) failed: {detail}"))?;
    Ok(detail)
}

// --------------------------------------------------------- reproducibility

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = micro_config();
    cfg.trainer.warmup_batches = 3;
    cfg.trainer.max_batches = 8;
    cfg.trainer.workers = 1;
    let data = shapes_data(&cfg, 6, 6, 2, 8);
    let run = |name: &str, cfg: &ExperimentConfig, resume: Option<&Path>| {
        let dir = tmp.path().join(name);
        fit(cfg, data.clone(), &dir, resume, &Device::Cpu).unwrap();
        std::fs::read(dir.join(LOSS_LOG)).unwrap()
    };
    let a = run("a", &cfg, None);
    let b = run("b", &cfg, None);
    ensure(a == b, || "two seeded runs wrote different loss logs".into())?;

    // interrupt at batch 5, then resume in the same directory
    let mut short = cfg.clone();
    short.trainer.max_batches = 5;
    run("c", &short, None);
    let ckpt = tmp.path().join("c").join("last.safetensors");
    let c = run("c", &cfg, Some(&ckpt));
    ensure(a == c, || "resumed run diverges from the uninterrupted one".into())?;
    let n = read_loss_log(&tmp.path().join("a").join(LOSS_LOG)).unwrap().len();
    Ok(format!("{n} f64 loss records identical across two runs and across resume at batch 5"))
}

struct Criterion {
    name: &'static str,
    budget_s: f64,
    run: fn() -> Outcome,
}

const CRITERIA: &[Criterion] = &[
    Criterion { name: "loss-algebra", budget_s: 10.0, run: loss_algebra },
    Criterion { name: "consistency-zero-law", budget_s: 30.0, run: consistency_zero_law },
    Criterion { name: "gradient-suite", budget_s: 300.0, run: gradient_suite },
    Criterion { name: "degradation-suite", budget_s: 10.0, run: degradation_suite },
    Criterion { name: "fid-oracles", budget_s: 120.0, run: fid_oracles },
    Criterion { name: "two-stage-schedule", budget_s: 120.0, run: two_stage_schedule },
    Criterion { name: "desk-scale-smoke", budget_s: 1200.0, run: smoke },
    // no stated budget
    Criterion { name: "reproducibility", budget_s: f64::INFINITY, run: reproducibility },
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for c in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok(d) if secs <= c.budget_s => (true, d),
            Ok(d) => (false, format!("over the {}s budget; {d}", c.budget_s)),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "{} {} [{secs:.1}s]: {detail}",
            if ok { "PASS" } else { "FAIL" },
            c.name
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
