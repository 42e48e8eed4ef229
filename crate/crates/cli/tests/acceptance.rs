//! Acceptance gates. One line per criterion: `C<n> PASS|FAIL|NOT RUN <name>: <detail>`.
//!
//! Tolerances and budgets are pinned below. The desk-scale accuracy gate
//! needs the CIFAR-10 binary batches; point `MIXFORGE_CIFAR10_DIR` at them
//! to run it (hours on a CPU).

use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use mixforge::data::{pair_batch, DatasetSpec, ImageBatch, Split, SyntheticSpec};
use mixforge::gradcheck::{check_gradients, GradCheckConfig};
use mixforge::mixer::{
    apply_affine, identity_theta, mix, mix_batch, mix_with, sample_coefficients, sample_noise, MixCoefficients,
    MixSettings, MixStrategy, MixerConfig, MixerParams, WarpPadding,
};
use mixforge::models::{build_model, ArchSpec, Family};
use mixforge::saliency::TeacherHandle;
use mixforge::stats::ks_two_sample;
use mixforge::training::{search_loss, train_mixer, train_task, NoMix, SearchConfig, TaskConfig};
use mixforge::{data::load_dataset, SeedStreams};
use mixforge_cli::bench::run_bench;
use mixforge_cli::config::{BenchSection, MixerSection};
use mixforge_cli::{run, Command, RunArgs};
use rand::Rng as _;
use rand_distr::{Beta, Distribution, Normal, StandardNormal};
use serde_json::{json, Value};

const MASK_SUM_TOL: f64 = 1e-6;
const MASK_TRIALS: usize = 1000;
const WARP_ORACLE_TOL: f64 = 1e-5;
const WARP_FIELDS: usize = 100;
const IDENTITY_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(300);
const KS_SAMPLES: usize = 10_000;
const KS_MIN_P: f64 = 0.01;
const KS_ALPHAS: [f64; 3] = [0.2, 1.0, 2.0];
const SEARCH_STEPS: usize = 200;
const SEARCH_SEEDS: u64 = 5;
const SEARCH_MIN_IMPROVED: usize = 4;
const DESK_MARGIN_PP: f64 = 0.3;
const MIN_SPEEDUP: f64 = 4.0;
const BENCH_BUDGET: Duration = Duration::from_secs(300);
const LABEL_SUM_TOL: f64 = 1e-9;

const DEV: Device = Device::Cpu;

enum Verdict {
    Pass(String),
    Fail(String),
    NotRun(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

type Gate = fn() -> anyhow::Result<Verdict>;

fn max_abs(t: &Tensor) -> anyhow::Result<f64> {
    Ok(t.abs()?
        .flatten_all()?
        .max(0)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?)
}

fn toy_teacher(size: usize, classes: usize, seed: u64) -> anyhow::Result<TeacherHandle> {
    let spec = ArchSpec::new(Family::ToyCnn, 3, size, size, classes);
    let model = build_model(spec, SeedStreams::new(seed).stream("teacher"), DType::F64, &DEV)?;
    Ok(TeacherHandle::freeze(&model, "toy")?)
}

fn random_batch(n: usize, size: usize, classes: usize, seed: u64) -> anyhow::Result<ImageBatch> {
    let mut rng = SeedStreams::new(seed).stream("images");
    let v: Vec<f64> = (0..n * 3 * size * size)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let images = Tensor::from_vec(v, (n, 3, size, size), &DEV)?;
    Ok(ImageBatch::new(
        images,
        (0..n).map(|i| (i % classes) as u32).collect(),
        classes,
    )?)
}

/// Adds N(0, sd) to every trainable mixer tensor, temperature included.
fn perturb(params: &MixerParams, sd: f64, seed: u64) -> anyhow::Result<()> {
    let mut rng = SeedStreams::new(seed).stream("perturb");
    let normal = Normal::new(0.0, sd)?;
    for (_, var) in params.store().trainable() {
        let t = var.as_tensor();
        let noise: Vec<f64> = (0..t.elem_count()).map(|_| normal.sample(&mut rng)).collect();
        var.set(&(t + Tensor::from_vec(noise, t.shape(), &DEV)?)?)?;
    }
    Ok(())
}

fn c1_mask_normalization() -> anyhow::Result<Verdict> {
    let size = 8;
    let per_trial = 20;
    let mut worst: f64 = 0.0;
    let mut total = 0;
    for trial in 0..(MASK_TRIALS / per_trial) as u64 {
        let k = 2 + (trial % 2) as usize;
        let teacher = toy_teacher(size, 3, 100 + trial)?;
        let params = MixerParams::init(
            MixerConfig::new(k, size, size),
            SeedStreams::new(trial).stream("mixer"),
            DType::F64,
            &DEV,
        )?;
        perturb(&params, 0.5, trial)?;
        let batch = random_batch(per_trial, size, 3, 200 + trial)?;
        let mut rng = SeedStreams::new(300 + trial).stream("mix");
        let alpha = rng.random_range(0.1..3.0);
        let settings = MixSettings {
            strategy: MixStrategy::Full,
            alpha,
            ..MixSettings::default()
        };
        let out = mix_batch(&batch, &teacher, &params, &settings, &mut rng)?;
        worst = worst.max(max_abs(&(out.details.masks.sum(1)? - 1.0)?)?);
        total += per_trial;
    }
    Ok(verdict(
        worst <= MASK_SUM_TOL && total == MASK_TRIALS,
        format!(
            "{total} mixer inputs (k=2,3, random weights/τ/CAMs/λ/z), max |Σm-1| = {worst:.2e} (tol {MASK_SUM_TOL:e})"
        ),
    ))
}

/// Scalar-loop bilinear sampling with zero padding and half-pixel centres.
fn oracle_warp(src: &[f64], h: usize, w: usize, t: &[f64]) -> Vec<f64> {
    let at = |y: i64, x: i64| {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            src[y as usize * w + x as usize]
        }
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let gx = (2.0 * x as f64 + 1.0) / w as f64 - 1.0;
            let gy = (2.0 * y as f64 + 1.0) / h as f64 - 1.0;
            let px = ((t[0] * gx + t[1] * gy + t[2] + 1.0) * w as f64 - 1.0) / 2.0;
            let py = ((t[3] * gx + t[4] * gy + t[5] + 1.0) * h as f64 - 1.0) / 2.0;
            let (x0, y0) = (px.floor(), py.floor());
            let (fx, fy) = (px - x0, py - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            out.push(
                at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + at(y0, x0 + 1) * fx * (1.0 - fy)
                    + at(y0 + 1, x0) * (1.0 - fx) * fy
                    + at(y0 + 1, x0 + 1) * fx * fy,
            );
        }
    }
    out
}

fn c2_warp_oracle() -> anyhow::Result<Verdict> {
    let (h, w) = (16, 16);
    let mut rng = SeedStreams::new(2).stream("warp");
    let mut worst: f64 = 0.0;
    for _ in 0..WARP_FIELDS {
        let src: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let theta: Vec<f64> = vec![
            rng.random_range(0.5..1.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(0.5..1.5),
            rng.random_range(-0.5..0.5),
        ];
        let x = Tensor::from_vec(src.clone(), (1, 1, h, w), &DEV)?;
        let t = Tensor::from_vec(theta.clone(), (1, 2, 3), &DEV)?;
        let fast = apply_affine(&x, &t, WarpPadding::Zeros)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        for (a, b) in fast.iter().zip(oracle_warp(&src, h, w, &theta)) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(verdict(
        worst <= WARP_ORACLE_TOL,
        format!("{WARP_FIELDS} random 16x16 fields, max |fast - oracle| = {worst:.2e} (tol {WARP_ORACLE_TOL:e})"),
    ))
}

fn c3_identity_contracts() -> anyhow::Result<Verdict> {
    let batch = random_batch(6, 8, 3, 3)?;
    let warped = apply_affine(&batch.images, &identity_theta(6, DType::F64, &DEV)?, WarpPadding::Zeros)?;
    let warp_err = max_abs(&(warped - &batch.images)?)?;

    let teacher = toy_teacher(8, 3, 4)?;
    let params = MixerParams::init(
        MixerConfig::new(2, 8, 8),
        SeedStreams::new(5).stream("mixer"),
        DType::F64,
        &DEV,
    )?;
    let out = mix_batch(
        &batch,
        &teacher,
        &params,
        &MixSettings::default(),
        &mut SeedStreams::new(6).stream("mix"),
    )?;
    let thetas = out.details.thetas.flatten_all()?.to_vec1::<f64>()?;
    let exact_identity = thetas.chunks(6).all(|c| c == [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    let x2 = random_batch(6, 8, 3, 7)?.images;
    let masks = Tensor::cat(
        &[
            Tensor::ones((6, 1, 8, 8), DType::F64, &DEV)?,
            Tensor::zeros((6, 1, 8, 8), DType::F64, &DEV)?,
        ],
        1,
    )?;
    let thetas = identity_theta(12, DType::F64, &DEV)?.reshape((6, 2, 2, 3))?;
    let coeffs = vec![MixCoefficients::new(vec![0.5, 0.5])?; 6];
    let labels = vec![batch.labels.clone(), vec![2, 1, 0, 2, 1, 0]];
    let mixed = mix(
        &[batch.images.clone(), x2],
        &thetas,
        &masks,
        &coeffs,
        &labels,
        3,
        WarpPadding::Zeros,
    )?;
    let mix_err = max_abs(&(mixed.images - &batch.images)?)?;
    Ok(verdict(
        warp_err <= IDENTITY_TOL && exact_identity && mix_err <= IDENTITY_TOL,
        format!(
            "identity warp err {warp_err:.1e}, fresh thetas exactly identity: {exact_identity}, degenerate mix err {mix_err:.1e} (tol {IDENTITY_TOL:e})"
        ),
    ))
}

fn c4_gradient_check() -> anyhow::Result<Verdict> {
    let teacher = toy_teacher(8, 2, 3)?;
    let params = MixerParams::init(
        MixerConfig::new(2, 8, 8),
        SeedStreams::new(3).stream("mixer"),
        DType::F64,
        &DEV,
    )?;
    // the identity initialization puts every sample point on a pixel centre,
    // where bilinear interpolation has a kink
    perturb(&params, 0.05, 3)?;
    // one pair: loss evaluations scale with the batch and every entry needs two
    let batch = random_batch(2, 8, 2, 3)?;
    let cfg = SearchConfig::default();
    let mix_rng = SeedStreams::new(9).stream("mix");
    let vars: Vec<_> = params
        .store()
        .trainable()
        .into_iter()
        .map(|(n, v)| (n.to_string(), v.clone()))
        .collect();
    let loss = || Ok(search_loss(&batch, &teacher, &params, &cfg, &mut mix_rng.clone())?.0);
    let check = GradCheckConfig {
        tolerance: GRAD_REL_TOL,
        ..GradCheckConfig::default()
    };
    let start = Instant::now();
    let report = check_gradients(&vars, loss, &check, &mut SeedStreams::new(1).stream("pick"))?;
    let elapsed = start.elapsed();
    let total: usize = vars.iter().map(|(_, v)| v.elem_count()).sum();
    Ok(verdict(
        report.passed() && report.checked == total && elapsed <= GRAD_BUDGET,
        format!(
            "{}/{total} entries of {} tensors (f_s, f_m, log τ), {} failures, {} via one-sided/small-step stencil, worst rel err {:.1e} (tol {GRAD_REL_TOL:e}), {:.0}s (budget {}s)",
            report.checked,
            vars.len(),
            report.failures.len(),
            report.one_sided,
            report.worst_relative_error(),
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    ))
}

fn c5_dirichlet_marginals() -> anyhow::Result<Verdict> {
    let mut ours = SeedStreams::new(50).stream("coeffs");
    let mut reference = SeedStreams::new(51).stream("reference");
    let mut parts = Vec::new();
    let mut ok = true;
    for alpha in KS_ALPHAS {
        let a: Vec<f64> = (0..KS_SAMPLES)
            .map(|_| sample_coefficients(alpha, 2, &mut ours).map(|c| c.as_slice()[0]))
            .collect::<mixforge::Result<_>>()?;
        let beta = Beta::new(alpha, alpha)?;
        let b: Vec<f64> = (0..KS_SAMPLES).map(|_| beta.sample(&mut reference)).collect();
        let ks = ks_two_sample(&a, &b)?;
        ok &= ks.p_value > KS_MIN_P;
        parts.push(format!("α={alpha}: D={:.4} p={:.3}", ks.statistic, ks.p_value));
    }
    Ok(verdict(
        ok,
        format!("n={KS_SAMPLES}, {} (need p > {KS_MIN_P})", parts.join(", ")),
    ))
}

fn two_class_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        name: "two-class".into(),
        format: mixforge::data::DatasetFormat::Synthetic,
        path: None,
        split: Split::Train,
        num_classes: 2,
        channels: 3,
        height: 8,
        width: 8,
        subset_fraction: 1.0,
        seed,
        synthetic: Some(SyntheticSpec {
            train_per_class: 16,
            test_per_class: 8,
            noise: 0.3,
        }),
    }
}

/// Search loss of a fixed batch under fixed mixing draws, before and after
/// 200 search steps (100 epochs of two batches) against a trained toy teacher.
/// An untrained teacher sits at chance on every input and gives the mixer
/// nothing to optimize.
fn c6_search_reduces_loss() -> anyhow::Result<Verdict> {
    let spec = two_class_spec(0);
    let train = load_dataset(&spec)?;
    let test = load_dataset(&spec.with_split(Split::Test))?;
    let batch_size = 16;
    let epochs = SEARCH_STEPS / train.len().div_ceil(batch_size);
    let search = SearchConfig {
        lr: 0.01,
        weight_decay: 0.0,
        epochs,
        batch_size,
        ..SearchConfig::default()
    };
    // every training image: the split is ordered by class, so any strided
    // subset can end up single-class with one-hot mixed labels
    let eval_idx: Vec<usize> = (0..train.len()).collect();
    let mut improved = 0;
    let mut parts = Vec::new();
    for seed in 0..SEARCH_SEEDS {
        let task: TaskConfig = serde_json::from_value(json!({
            "arch": "toy-cnn",
            "epochs": 20,
            "batch_size": 16,
            "schedule": { "initial": 0.05 },
            "seed": seed,
            "standard_augment": false,
        }))?;
        let trained = train_task(&train, &test, &NoMix, &task, DType::F32, None)?;
        let acc = trained.metrics.last().and_then(|e| e.top1_pct).unwrap_or(f64::NAN);
        let teacher = TeacherHandle::freeze(&trained.model, "toy")?;
        let mixer = MixerConfig::new(2, 8, 8);
        let before = MixerParams::init(
            mixer.clone(),
            SeedStreams::new(seed).stream("search/init"),
            DType::F32,
            &DEV,
        )?;
        let run = train_mixer(&train, &teacher, mixer, &search, seed, None)?;
        let eval = train.batch(&eval_idx, None, DType::F32, &DEV)?;
        let mix_rng = SeedStreams::new(1000 + seed).stream("eval/mix");
        let loss = |p: &MixerParams| -> anyhow::Result<f64> {
            let (l, _) = search_loss(&eval, &teacher, p, &search, &mut mix_rng.clone())?;
            Ok(l.to_dtype(DType::F64)?.to_scalar::<f64>()?)
        };
        let (l0, l1) = (loss(&before)?, loss(&run.params)?);
        if l1 < l0 {
            improved += 1;
        }
        parts.push(format!("{l0:.3}->{l1:.3} (teacher {acc:.0}%)"));
    }
    Ok(verdict(
        improved >= SEARCH_MIN_IMPROVED,
        format!(
            "{SEARCH_STEPS} steps, loss on a fixed batch fell in {improved}/{SEARCH_SEEDS} seeds (need {SEARCH_MIN_IMPROVED}): {}",
            parts.join(", ")
        ),
    ))
}

fn mean_top1(results: &Value, strategy: &str) -> Option<f64> {
    results["results"]
        .as_array()?
        .iter()
        .find(|r| r["strategy"] == strategy)?["top1_mean"]
        .as_f64()
}

fn c7_desk_scale_accuracy() -> anyhow::Result<Verdict> {
    let Some(dir) = std::env::var_os("MIXFORGE_CIFAR10_DIR") else {
        return Ok(Verdict::NotRun(
            "MIXFORGE_CIFAR10_DIR unset; needs the CIFAR-10 binary batches (5,000-image subset, ResNet-18, 60 epochs, 3 seeds)".into(),
        ));
    };
    let out = tempfile::tempdir()?;
    let config = out.path().join("desk.toml");
    std::fs::write(
        &config,
        format!(
            r#"
name = "desk"
output_dir = "{out}"
seeds = [0, 1, 2]
strategies = ["simple", "transformmix", "softmax-cam"]

[dataset]
name = "cifar10"
format = "cifar-binary"
path = "{data}"
num_classes = 10
channels = 3
height = 32
width = 32
subset_fraction = 0.1

[task]
arch = "resnet-18"
epochs = 60
batch_size = 128
schedule = {{ initial = 0.1, milestones = [30, 45], factor = 0.1 }}

[search]
lr = 0.0005
weight_decay = 0.01
epochs = 20
batch_size = 128
alpha = 1.0
"#,
            out = out.path().join("desk").display(),
            data = Path::new(&dir).display()
        ),
    )?;
    let args = RunArgs {
        config,
        seed: None,
        strategy: vec![],
    };
    run(&Command::TrainTeacher(args.clone()))?;
    run(&Command::TrainMixer(args.clone()))?;
    let res = run(&Command::TrainTask(args))?;
    let (simple, full, cam) = (
        mean_top1(&res, "simple").unwrap_or(f64::NAN),
        mean_top1(&res, "transformmix").unwrap_or(f64::NAN),
        mean_top1(&res, "softmax-cam").unwrap_or(f64::NAN),
    );
    Ok(verdict(
        full >= simple + DESK_MARGIN_PP && full >= cam,
        format!("mean top-1 over 3 seeds: TransformMix {full:.2}, Simple {simple:.2}, softmax+CAM {cam:.2} (need +{DESK_MARGIN_PP}pp over Simple)"),
    ))
}

fn c8_timing() -> anyhow::Result<Verdict> {
    let section = BenchSection::default();
    let start = Instant::now();
    let report = run_bench(
        &section,
        MixerSection::default().mixer_config(section.height, section.width),
        0,
    )?;
    let elapsed = start.elapsed();
    let protocol = report.batch_size == 128 && report.trials == 10 && report.input == [3, 32, 32];
    Ok(verdict(
        protocol && report.speedup >= MIN_SPEEDUP && elapsed <= BENCH_BUDGET,
        format!(
            "batch {}, {} trials, {}x{}x{}: learned {:.4}±{:.4}s vs {}-step iterative {:.4}±{:.4}s, speedup {:.1}x (need {MIN_SPEEDUP}x), {:.0}s (budget {}s)",
            report.batch_size,
            report.trials,
            report.input[0],
            report.input[1],
            report.input[2],
            report.transformmix.mean_seconds,
            report.transformmix.std_seconds,
            report.iterative_steps,
            report.iterative.mean_seconds,
            report.iterative.std_seconds,
            report.speedup,
            elapsed.as_secs_f64(),
            BENCH_BUDGET.as_secs()
        ),
    ))
}

fn toy_experiment(root: &Path, size: usize, extra: &str) -> anyhow::Result<RunArgs> {
    let config = root.join(format!("toy{size}.toml"));
    std::fs::write(
        &config,
        format!(
            r#"
name = "toy{size}"
output_dir = "{out}"
seeds = [0]

[dataset]
name = "shapes{size}"
format = "synthetic"
num_classes = 4
channels = 3
height = {size}
width = {size}

[dataset.synthetic]
train_per_class = 4
test_per_class = 2

[task]
arch = "toy-cnn"
epochs = 1
batch_size = 8
schedule = {{ initial = 0.05 }}

[search]
lr = 0.001
weight_decay = 0.0
epochs = 1
batch_size = 8
alpha = 1.0
{extra}
"#,
            out = root.join(format!("toy{size}")).display()
        ),
    )?;
    Ok(RunArgs {
        config,
        seed: None,
        strategy: vec![],
    })
}

fn weights_digest(sidecar: &Path) -> anyhow::Result<String> {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
    Ok(v["weights_digest"].as_str().unwrap_or_default().to_string())
}

fn c9_transfer() -> anyhow::Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let root = dir.path();
    let src = toy_experiment(root, 32, "")?;
    run(&Command::TrainTeacher(src.clone()))?;
    run(&Command::TrainMixer(src))?;
    let stem = root.join("toy32/mixer/seed-0/mixer");
    let target = toy_experiment(root, 64, &format!("[transfer]\nmixer = \"{}\"\n", stem.display()))?;
    run(&Command::TrainTeacher(target.clone()))?;
    let out = run(&Command::Transfer(target))?;
    let bridged = out["runs"][0]["top1_pct"].as_f64().is_some_and(f64::is_finite);

    let same = toy_experiment(root, 16, "")?;
    let same_stem = root.join("toy16/mixer/seed-0/mixer");
    let text = std::fs::read_to_string(&same.config)? + &format!("[transfer]\nmixer = \"{}\"\n", same_stem.display());
    std::fs::write(&same.config, text)?;
    run(&Command::TrainTeacher(same.clone()))?;
    run(&Command::TrainMixer(same.clone()))?;
    run(&Command::TrainTask(same.clone()))?;
    run(&Command::Transfer(same))?;
    let direct = weights_digest(&root.join("toy16/task/transformmix/seed-0/task.json"))?;
    let transferred = weights_digest(&root.join("toy16/transfer/transformmix/seed-0/task.json"))?;
    let equal = !direct.is_empty() && direct == transferred;
    Ok(verdict(
        bridged && equal,
        format!("32x32 mixer trained a 64x64 task end-to-end: {bridged}; same-resolution transfer equals direct (weight digest): {equal}"),
    ))
}

fn c10_three_way() -> anyhow::Result<Verdict> {
    let cfg = MixerConfig::new(3, 8, 8);
    let channels = (cfg.transform_in_channels(), cfg.mask_in_channels());
    let teacher = toy_teacher(8, 5, 10)?;
    let params = MixerParams::init(cfg.clone(), SeedStreams::new(11).stream("mixer"), DType::F64, &DEV)?;
    perturb(&params, 0.2, 11)?;
    let batch = random_batch(9, 8, 5, 12)?;
    let mut rng = SeedStreams::new(13).stream("mix");
    let out = mix_batch(&batch, &teacher, &params, &MixSettings::default(), &mut rng)?;
    let thetas = out.details.thetas.dims().to_vec();
    let masks = out.details.masks.dims().to_vec();
    let mask_err = max_abs(&(out.details.masks.sum(1)? - 1.0)?)?;
    let label_err = max_abs(&(out.batch.labels.sum(1)? - 1.0)?)?;

    // explicit draws through the same pipeline
    let pairing = pair_batch(9, 3, &mut rng);
    let coeffs = (0..9)
        .map(|_| sample_coefficients(1.0, 3, &mut rng))
        .collect::<mixforge::Result<Vec<_>>>()?;
    let noise = (0..9).map(|_| sample_noise(&mut rng, (8, 8), cfg.noise_grid)).collect();
    let again = mix_with(
        &batch,
        &teacher,
        &params,
        &MixSettings::default(),
        pairing,
        coeffs,
        noise,
    )?;
    let again_err = max_abs(&(again.details.masks.sum(1)? - 1.0)?)?;

    let ok = channels == (6, 5)
        && thetas == [9, 3, 2, 3]
        && masks == [9, 3, 8, 8]
        && mask_err.max(again_err) <= MASK_SUM_TOL
        && label_err <= LABEL_SUM_TOL;
    Ok(verdict(
        ok,
        format!(
            "f_s/f_m input channels {channels:?}, thetas {thetas:?} (3x6 per sample), masks {masks:?}, max |Σm-1| {:.1e}, max |Σy-1| {label_err:.1e}",
            mask_err.max(again_err)
        ),
    ))
}

fn main() {
    let gates: [(&str, &str, Gate); 10] = [
        ("C1", "mask normalization", c1_mask_normalization),
        ("C2", "warp oracle equivalence", c2_warp_oracle),
        ("C3", "identity contracts", c3_identity_contracts),
        ("C4", "gradient check", c4_gradient_check),
        ("C5", "Dirichlet/Beta marginals", c5_dirichlet_marginals),
        ("C6", "search-stage optimization", c6_search_reduces_loss),
        ("C7", "desk-scale directional accuracy", c7_desk_scale_accuracy),
        ("C8", "timing protocol and speedup", c8_timing),
        ("C9", "transfer mode", c9_transfer),
        ("C10", "k=3 generalization", c10_three_way),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, gate) in gates {
        if !filter.is_empty() && !filter.iter().any(|f| f.eq_ignore_ascii_case(id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = gate().unwrap_or_else(|e| Verdict::Fail(format!("error: {e:#}")));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Verdict::Pass(d) => println!("{id} PASS {name}: {d} [{secs:.1}s]"),
            Verdict::Fail(d) => {
                failed += 1;
                println!("{id} FAIL {name}: {d} [{secs:.1}s]");
            }
            Verdict::NotRun(d) => println!("{id} NOT RUN {name}: {d}"),
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
