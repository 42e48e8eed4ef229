//! Image grids of the mixing pipeline.

use candle_core::{Device, Tensor};
use mixforge::data::{load_dataset, NormStats, Pairing};
use mixforge::mixer::{mix_batch, mix_with, sample_noise, MixCoefficients, MixSettings, MixStrategy};
use mixforge::saliency::maps_to_tensor;
use mixforge::viz::{tensor_tiles, ImageGrid};
use mixforge::{Error, SeedStreams};
use serde_json::{json, Value};

use crate::commands::{load_teacher, load_trained_mixer};
use crate::config::ExperimentConfig;
use crate::runs::{create_dir, write_json, Layout};

pub const SWEEP_LAMBDAS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

fn gather(x: &Tensor, slot: &[usize]) -> mixforge::Result<Tensor> {
    let idx: Vec<u32> = slot.iter().map(|&i| i as u32).collect();
    Ok(x.index_select(&Tensor::new(idx, x.device())?, 0)?)
}

fn mean(t: &Tensor) -> mixforge::Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.mean_all()?.to_scalar::<f64>()?)
}

/// Writes `grid.png` (rows: k inputs, k CAMs, k warped inputs, k masks,
/// the mix) and, if enabled, the λ sweep of a fixed pair.
pub fn visualize(cfg: &ExperimentConfig) -> anyhow::Result<Value> {
    let layout = Layout::new(cfg);
    let seed = cfg.seeds[0];
    let teacher = load_teacher(&layout, cfg, seed)?;
    let (params, _) = load_trained_mixer(&layout, cfg, seed)?;
    let data = load_dataset(&cfg.dataset)?;
    let n = cfg.visualize.n;
    let k = params.k();
    if n > data.len() {
        return Err(Error::Input(format!("cannot show {n} samples from {} images", data.len())).into());
    }
    if n < k {
        return Err(Error::Input(format!("need at least k={k} samples to mix, got {n}")).into());
    }
    let dir = layout.stage_dir("visualize");
    create_dir(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;

    let strategy = cfg.strategy.mix_strategy().unwrap_or(MixStrategy::Full);
    let settings = MixSettings {
        strategy,
        alpha: cfg.task.alpha,
        cam_target: cfg.mixer.cam_target,
    };
    let dtype = teacher.dtype();
    let idx: Vec<usize> = (0..n).collect();
    let batch = data.batch(&idx, None, dtype, &Device::Cpu)?;
    let mut rng = SeedStreams::new(seed).stream("visualize/mix");
    let out = mix_batch(&batch, &teacher, &params, &settings, &mut rng)?;
    let d = &out.details;
    let stats = Some(data.stats());
    let unit = NormStats::identity(1);
    let cams = maps_to_tensor(&d.saliency, dtype, &Device::Cpu)?;
    let mut grid = ImageGrid::new();
    for j in 0..k {
        grid.push_row(tensor_tiles(&gather(&batch.images, d.pairing.slot(j))?, stats)?);
    }
    for j in 0..k {
        grid.push_row(tensor_tiles(&gather(&cams, d.pairing.slot(j))?, Some(&unit))?);
    }
    for w in &d.warped_images {
        grid.push_row(tensor_tiles(w, stats)?);
    }
    for j in 0..k {
        grid.push_row(tensor_tiles(&d.masks.narrow(1, j, 1)?, Some(&unit))?);
    }
    grid.push_row(tensor_tiles(&out.batch.images, stats)?);
    let grid_path = dir.join("grid.png");
    grid.save_png(&grid_path)?;
    let mut summary = json!({
        "command": "visualize",
        "seed": seed,
        "k": k,
        "columns": n,
        "rows": grid.rows(),
        "grid": grid_path,
        "tau": params.tau()?,
    });

    if cfg.visualize.lambda_sweep {
        let sweep = lambda_sweep(cfg, &data, &teacher, &params, &settings, seed)?;
        sweep.0.save_png(&dir.join("lambda_sweep.png"))?;
        write_json(&dir.join("lambda_sweep.json"), &sweep.1)?;
        summary["lambda_sweep"] = sweep.1;
    }
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Mixes one fixed pair at λ = 0.1..0.9 (weight of the second image) with
/// one shared noise draw. Rows: the mix, then one row per mask.
fn lambda_sweep(
    cfg: &ExperimentConfig,
    data: &mixforge::data::Dataset,
    teacher: &mixforge::saliency::TeacherHandle,
    params: &mixforge::mixer::MixerParams,
    settings: &MixSettings,
    seed: u64,
) -> anyhow::Result<(ImageGrid, Value)> {
    let (a, b) = cfg.visualize.pair;
    if a >= data.len() || b >= data.len() {
        return Err(Error::Input(format!("sweep pair ({a}, {b}) outside {} images", data.len())).into());
    }
    let k = params.k();
    let m = SWEEP_LAMBDAS.len();
    // rows 0..m hold image a, rows m..2m image b, so each has its own CAM
    let idx: Vec<usize> = std::iter::repeat_n(a, m).chain(std::iter::repeat_n(b, m)).collect();
    let batch = data.batch(&idx, None, teacher.dtype(), &Device::Cpu)?;
    let mut slots = vec![(0..2 * m).collect::<Vec<_>>()];
    let partner: Vec<usize> = (0..2 * m).map(|i| (i + m) % (2 * m)).collect();
    slots.extend(std::iter::repeat_n(partner, k - 1));
    let pairing = Pairing::from_slots(slots)?;
    let coeffs = (0..2 * m)
        .map(|i| {
            let l = SWEEP_LAMBDAS[i % m];
            let mut c = vec![0.0; k];
            c[0] = 1.0 - l;
            c[1] = l;
            MixCoefficients::new(c)
        })
        .collect::<mixforge::Result<Vec<_>>>()?;
    let mut rng = SeedStreams::new(seed).stream("visualize/sweep");
    let z = sample_noise(
        &mut rng,
        (params.config().height, params.config().width),
        params.config().noise_grid,
    );
    let out = mix_with(&batch, teacher, params, settings, pairing, coeffs, vec![z; 2 * m])?;
    let mixed = out.batch.images.narrow(0, 0, m)?;
    let masks = out.details.masks.narrow(0, 0, m)?;
    let unit = NormStats::identity(1);
    let mut grid = ImageGrid::new();
    grid.push_row(tensor_tiles(&mixed, Some(data.stats()))?);
    let mut mass = Vec::with_capacity(k);
    for j in 0..k {
        let mj = masks.narrow(1, j, 1)?;
        grid.push_row(tensor_tiles(&mj, Some(&unit))?);
        mass.push(
            (0..m)
                .map(|i| mean(&mj.narrow(0, i, 1)?))
                .collect::<mixforge::Result<Vec<f64>>>()?,
        );
    }
    let second = mass[1].clone();
    let nondecreasing = second.windows(2).all(|w| w[1] >= w[0]);
    Ok((
        grid,
        json!({
            "pair": [a, b],
            "lambdas": SWEEP_LAMBDAS,
            "mask_mean": mass,
            "second_mask_mean": second,
            "second_mask_nondecreasing": nondecreasing,
        }),
    ))
}
