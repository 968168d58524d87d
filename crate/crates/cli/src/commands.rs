//! Subcommand implementations.

use std::path::{Path, PathBuf};

use log::info;
use serde_json::json;
use ulfdti::augment::{make_training_pair, ulf_degrade_protocol, AugmentConfig, UlfProtocol};
use ulfdti::bias::{optimize_bias, AtlasPriors, DctBasis};
use ulfdti::gradients::{parse_gradient_table, write_gradient_table, DEFAULT_SHELL_TOLERANCE};
use ulfdti::nifti::{read_nifti, write_nifti_with, NiftiDataType, WriteOptions};
use ulfdti::phantom::{
    make_synthetic_atlas, make_tensor_field, synthesize_dwi, ulf_gradient_table, InjectedBias, PhantomSpec, Scene,
};
use ulfdti::rng::seeded;
use ulfdti::sample::SAMPLE_CHANNELS;
use ulfdti::stats::{angular_error_v1, lncc, mae, write_stats_csv, StatRow};
use ulfdti::tensor::{fit_dataset, metric_maps, FitConfig, TensorField};
use ulfdti::{DwiDataset, ShSample, Volume, VolumeGrid};
use ulfdti_net::checkpoint;
use ulfdti_net::data::{normalize, training_set, v1_field};
use ulfdti_net::infer::{superresolve, Tiling};
use ulfdti_net::train::{train, write_history_csv, TrainConfig};
use ulfdti_net::DiffSrModel;

use crate::config::RunConfig;
use crate::error::{CliError, Result, WithPath};
use crate::manifest::Manifest;
use crate::{Cli, Command, DwiArgs};

/// Injected bias Γ range and Υ range used by `phantom --bias`.
pub const PHANTOM_GAMMA_RANGE: (f64, f64) = (0.7, 1.3);
pub const PHANTOM_UPSILON_RANGE: (f64, f64) = (0.98, 1.02);

/// Iterations of `train` when neither the config nor the flags set them.
pub const DEFAULT_TRAIN_ITERATIONS: usize = 2000;

struct Ctx {
    seed: u64,
    threads: usize,
    file: RunConfig,
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => {
            require(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let threads = cli
        .threads
        .or(file.threads)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(CliError::Usage("--threads must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let ctx = Ctx { seed, threads, file };
    let mut inputs: Vec<PathBuf> = cli.config.iter().cloned().collect();
    pool.install(|| dispatch(&ctx, cli.command, &mut inputs))
}

fn three(v: &[usize], flag: &str) -> Result<[usize; 3]> {
    match v {
        &[a, b, c] if a > 0 && b > 0 && c > 0 => Ok([a, b, c]),
        _ => Err(CliError::Usage(format!("{flag} needs three positive sizes, got {v:?}"))),
    }
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input file {} does not exist", path.display())))
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

fn read_dwi(args: &DwiArgs, inputs: &mut Vec<PathBuf>) -> Result<DwiDataset> {
    for p in [&args.dwi, &args.bvals, &args.bvecs] {
        require(p)?;
        inputs.push(p.clone());
    }
    let volume = read_nifti(&args.dwi).at(&args.dwi)?;
    let table = parse_gradient_table(&args.bvals, &args.bvecs).at(&args.bvals)?;
    DwiDataset::new(volume, table).at(&args.dwi)
}

fn write_f64(volume: &Volume, path: &Path, description: &str) -> Result<()> {
    let opts = WriteOptions {
        datatype: NiftiDataType::Float64,
        description: description.into(),
    };
    write_nifti_with(volume, path, &opts).at(path)
}

fn write_dwi(ds: &DwiDataset, out: &Path, outputs: &mut Vec<String>) -> Result<()> {
    write_f64(&ds.volume, &out.join("dwi.nii"), "dwi")?;
    write_gradient_table(&ds.gradients, out.join("dwi.bval"), out.join("dwi.bvec"))?;
    outputs.extend(["dwi.nii", "dwi.bval", "dwi.bvec"].map(String::from));
    Ok(())
}

fn finish(ctx: &Ctx, name: &str, out: &Path, config: serde_json::Value, inputs: &[PathBuf], outputs: Vec<String>) -> Result<()> {
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let mut m = Manifest::new(name, ctx.seed, ctx.threads, config, &refs)?;
    m.outputs = outputs;
    m.write(out)?;
    info!("{name}: wrote {} outputs to {}", m.outputs.len(), out.display());
    Ok(())
}

fn dispatch(ctx: &Ctx, command: Command, inputs: &mut Vec<PathBuf>) -> Result<()> {
    let name = command.name();
    match command {
        Command::Fit { input, out, weighted } => {
            let ds = read_dwi(&input, inputs)?;
            let mut cfg = ctx.file.fit.unwrap_or_default();
            cfg.weighted |= weighted;
            prepare_out(&out)?;
            let outputs = fit(&ds, cfg, &out)?;
            finish(ctx, name, &out, json!({ "fit": cfg }), inputs, outputs)
        }
        Command::ShFit { input, out } => {
            let ds = read_dwi(&input, inputs)?;
            prepare_out(&out)?;
            let s = ShSample::from_dwi(&ds)?;
            let path = out.join("sample.nii");
            s.write(&path).at(&path)?;
            finish(ctx, name, &out, json!({}), inputs, vec!["sample.nii".into()])
        }
        Command::BiasCorrect {
            input,
            atlas,
            out,
            lambda_c,
            lambda_gm,
            adam_steps,
            adam_lr,
        } => {
            let ds = read_dwi(&input, inputs)?;
            require(&atlas)?;
            inputs.push(atlas.clone());
            let priors = AtlasPriors::from_volume(&read_nifti(&atlas).at(&atlas)?).at(&atlas)?;
            let mut cfg = ctx.file.bias.unwrap_or_default();
            cfg.lambda_c = lambda_c.unwrap_or(cfg.lambda_c);
            cfg.lambda_gm = lambda_gm.unwrap_or(cfg.lambda_gm);
            cfg.adam_steps = adam_steps.unwrap_or(cfg.adam_steps);
            cfg.adam_lr = adam_lr.unwrap_or(cfg.adam_lr);
            prepare_out(&out)?;
            let outputs = bias_correct(&ds, &priors, &cfg, &out)?;
            finish(ctx, name, &out, json!({ "bias": cfg }), inputs, outputs)
        }
        Command::Degrade {
            input,
            out,
            voxel_mm,
            directions,
            sigma,
            fixed_start,
        } => {
            let ds = read_dwi(&input, inputs)?;
            let mut p: UlfProtocol = ctx.file.protocol.clone().unwrap_or_default();
            p.voxel_mm = voxel_mm.unwrap_or(p.voxel_mm);
            p.n_directions = directions.unwrap_or(p.n_directions);
            p.rician_sigma = sigma.unwrap_or(p.rician_sigma);
            p.random_start &= !fixed_start;
            prepare_out(&out)?;
            let degraded = ulf_degrade_protocol(&ds, &p, &mut seeded(ctx.seed))?;
            let mut outputs = Vec::new();
            write_dwi(&degraded, &out, &mut outputs)?;
            finish(ctx, name, &out, json!({ "protocol": p }), inputs, outputs)
        }
        Command::AugmentPreview { sample, out, count, crop } => {
            require(&sample)?;
            inputs.push(sample.clone());
            let s = ShSample::read(&sample).at(&sample)?;
            let mut cfg: AugmentConfig = ctx.file.augment.clone().unwrap_or_default();
            if let Some(c) = crop {
                cfg.crop_size = [c; 3];
            }
            cfg.seed = ctx.seed;
            cfg.validate()?;
            prepare_out(&out)?;
            let mut rng = seeded(ctx.seed);
            let mut outputs = Vec::new();
            for k in 0..count {
                let pair = make_training_pair(&s, &cfg, &mut rng)?;
                for (tag, x) in [("target", &pair.target), ("lr", &pair.lr)] {
                    let file = format!("{tag}_{k}.nii");
                    let path = out.join(&file);
                    x.write(&path).at(&path)?;
                    outputs.push(file);
                }
            }
            finish(ctx, name, &out, json!({ "augment": cfg, "count": count }), inputs, outputs)
        }
        Command::Phantom {
            scene,
            dims,
            voxel_mm,
            bias,
            sigma,
            out,
        } => {
            let scene: Scene = scene.parse().map_err(|e: ulfdti::Error| CliError::Usage(e.to_string()))?;
            let mut spec = PhantomSpec::ulf(scene);
            let d = match dims {
                Some(d) => three(&d, "--dims")?,
                None => spec.grid.dims,
            };
            spec.grid = VolumeGrid::isotropic(d, voxel_mm.unwrap_or(spec.grid.voxel_size[0]));
            spec.seed = ctx.seed;
            prepare_out(&out)?;
            let outputs = phantom(&spec, bias, sigma, ctx.seed, &out)?;
            finish(
                ctx,
                name,
                &out,
                json!({ "phantom": spec, "bias": bias, "sigma": sigma }),
                inputs,
                outputs,
            )
        }
        Command::Train {
            samples,
            phantoms,
            phantom_dims,
            phantom_voxel_mm,
            iterations,
            out,
        } => {
            let data = if samples.is_empty() {
                let grid = VolumeGrid::isotropic(three(&phantom_dims, "--phantom-dims")?, phantom_voxel_mm);
                training_set(phantoms, &grid, ctx.seed)?
            } else {
                samples
                    .iter()
                    .map(|p| {
                        require(p)?;
                        inputs.push(p.clone());
                        Ok(normalize(&ShSample::read(p).at(p)?)?.0)
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let mut cfg = ctx
                .file
                .train
                .clone()
                .unwrap_or_else(|| TrainConfig::desk(DEFAULT_TRAIN_ITERATIONS, ctx.seed));
            cfg.iterations = iterations.unwrap_or(cfg.iterations);
            cfg.seed = ctx.seed;
            cfg.augment.seed = ctx.seed;
            let mut model_cfg = ctx.file.model.clone().unwrap_or_default();
            model_cfg.seed = ctx.seed;
            prepare_out(&out)?;
            let mut model = DiffSrModel::new(model_cfg.clone())?;
            let history = train(&mut model, &data, &cfg, |r| {
                if r.iteration % 50 == 0 {
                    info!("iteration {}: loss {:.5}", r.iteration, r.total);
                }
            })?;
            checkpoint::save(out.join("model.ckpt"), &model, ctx.seed, &cfg.loss)?;
            write_history_csv(out.join("loss.csv"), &history)?;
            finish(
                ctx,
                name,
                &out,
                json!({ "train": cfg, "model": model_cfg, "samples": data.len() }),
                inputs,
                vec!["model.ckpt".into(), "loss.csv".into()],
            )
        }
        Command::Superresolve {
            model,
            input,
            dwi,
            bvals,
            bvecs,
            voxel_mm,
            tile,
            overlap,
            whole,
            out,
        } => {
            require(&model)?;
            inputs.push(model.clone());
            let (net, _) = checkpoint::load(&model)?;
            let sample = match (input, dwi, bvals, bvecs) {
                (Some(p), _, _, _) => {
                    require(&p)?;
                    inputs.push(p.clone());
                    ShSample::read(&p).at(&p)?
                }
                (None, Some(dwi), Some(bvals), Some(bvecs)) => {
                    ShSample::from_dwi(&read_dwi(&DwiArgs { dwi, bvals, bvecs }, inputs)?)?
                }
                _ => return Err(CliError::Usage("give --input or --dwi/--bvals/--bvecs".into())),
            };
            if !(voxel_mm > 0.0) {
                return Err(CliError::Usage("--voxel-mm must be positive".into()));
            }
            let tiling = if whole {
                Tiling::Whole
            } else {
                match (tile, ctx.file.tiling) {
                    (Some(size), _) => Tiling::Tiles {
                        size,
                        overlap: overlap.unwrap_or(8),
                    },
                    (None, Some(t)) => t,
                    (None, None) => Tiling::default(),
                }
            };
            let target = sample.grid().resampled([voxel_mm; 3]);
            prepare_out(&out)?;
            let sr = superresolve(&net, &sample, &target, tiling)?;
            let path = out.join("sample.nii");
            sr.write(&path).at(&path)?;
            finish(
                ctx,
                name,
                &out,
                json!({ "voxel_mm": voxel_mm, "tiling": tiling, "dims": target.dims }),
                inputs,
                vec!["sample.nii".into()],
            )
        }
        Command::Metrics {
            pred,
            reference,
            mask,
            lncc_window,
            out,
        } => {
            for p in [&pred, &reference].into_iter().chain(mask.as_ref()) {
                require(p)?;
                inputs.push(p.clone());
            }
            let a = read_nifti(&pred).at(&pred)?;
            let b = read_nifti(&reference).at(&reference)?;
            let m = match &mask {
                Some(p) => Some(read_nifti(p).at(p)?),
                None => None,
            };
            prepare_out(&out)?;
            let rows = metrics(&a, &b, m.as_ref(), lncc_window)?;
            write_stats_csv(&out.join("metrics.csv"), &rows)?;
            finish(
                ctx,
                name,
                &out,
                json!({ "lncc_window": lncc_window }),
                inputs,
                vec!["metrics.csv".into()],
            )
        }
    }
}

fn fit(ds: &DwiDataset, cfg: FitConfig, out: &Path) -> Result<Vec<String>> {
    let (field, _) = fit_dataset(ds, cfg)?;
    let (fa, adc, v1) = metric_maps(&field);
    let mut outputs = Vec::new();
    for (file, v) in [("tensor.nii", &field.to_volume()), ("fa.nii", &fa), ("adc.nii", &adc), ("v1.nii", &v1)] {
        write_f64(v, &out.join(file), file.trim_end_matches(".nii"))?;
        outputs.push(file.to_string());
    }
    Ok(outputs)
}

fn bias_correct(ds: &DwiDataset, atlas: &AtlasPriors, cfg: &ulfdti::bias::CorrectionConfig, out: &Path) -> Result<Vec<String>> {
    let res = optimize_bias(ds, atlas, cfg)?;
    let basis = DctBasis::new(&ds.volume.grid);
    let mut fields = Volume::zeros(ds.volume.grid.clone(), ds.gradients.len());
    for i in 0..ds.gradients.len() {
        let f = res.coefficients.multiplicative_field(&basis, i)?;
        fields.channel_mut(i).copy_from_slice(&f);
    }
    write_f64(&res.corrected.volume, &out.join("corrected.nii"), "corrected dwi")?;
    write_f64(&fields, &out.join("bias.nii"), "exp(zeta) per volume")?;
    let summary = json!({
        "coefficients": res.coefficients,
        "status": res.status,
        "initial_objective": res.initial_objective,
        "handoff_objective": res.handoff_objective,
        "final_objective": res.final_objective,
        "history": res.history,
    });
    let path = out.join("bias.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| CliError::io(&path, e))?;
    Ok(["corrected.nii", "bias.nii", "bias.json"].map(String::from).to_vec())
}

fn phantom(spec: &PhantomSpec, bias: bool, sigma: f64, seed: u64, out: &Path) -> Result<Vec<String>> {
    let ph = make_tensor_field(spec)?;
    let g = ulf_gradient_table();
    let mut rng = seeded(seed);
    let injected = bias.then(|| {
        let basis = DctBasis::new(&spec.grid);
        InjectedBias::random(&g, &basis, PHANTOM_GAMMA_RANGE, PHANTOM_UPSILON_RANGE, DEFAULT_SHELL_TOLERANCE, &mut rng)
    });
    let ds = synthesize_dwi(&ph.tensors, &g, &ph.s0, injected.as_ref(), sigma, &mut rng)?;
    let mut outputs = Vec::new();
    write_dwi(&ds, out, &mut outputs)?;
    let (fa, _, _) = metric_maps(&ph.tensors);
    let s0 = Volume::new(spec.grid.clone(), 1, ph.s0.clone())?;
    let atlas = make_synthetic_atlas(&ph)?.to_volume();
    for (file, v) in [
        ("tensor.nii", &ph.tensors.to_volume()),
        ("fa.nii", &fa),
        ("labels.nii", &ph.label_volume()),
        ("s0.nii", &s0),
        ("atlas.nii", &atlas),
    ] {
        write_f64(v, &out.join(file), file.trim_end_matches(".nii"))?;
        outputs.push(file.to_string());
    }
    if let Some(b) = injected {
        let path = out.join("bias.json");
        std::fs::write(&path, serde_json::to_string_pretty(&b)?).map_err(|e| CliError::io(&path, e))?;
        outputs.push("bias.json".into());
    }
    Ok(outputs)
}

fn row(metric: &str, value: f64) -> StatRow {
    StatRow {
        metric: metric.into(),
        value,
        ci_low: None,
        ci_high: None,
        p_raw: None,
        p_fdr: None,
    }
}

fn repeat_mask(mask: Option<&[bool]>, channels: usize) -> Option<Vec<bool>> {
    mask.map(|m| (0..channels).flat_map(|_| m.iter().copied()).collect())
}

fn tensor_v1(v: &Volume) -> Result<Vec<[f64; 3]>> {
    Ok(TensorField::from_volume(v)?.metrics().iter().map(|m| m.v1).collect())
}

/// Metric rows for a prediction against a reference. 7-channel volumes
/// are SH samples, 6-channel volumes tensors; anything else gets MAE and
/// LNCC of the first channel.
pub fn metrics(pred: &Volume, reference: &Volume, mask: Option<&Volume>, window: usize) -> Result<Vec<StatRow>> {
    if pred.grid.dims != reference.grid.dims || pred.channels != reference.channels {
        return Err(CliError::Usage(format!(
            "prediction {:?}×{} and reference {:?}×{} differ in shape",
            pred.grid.dims, pred.channels, reference.grid.dims, reference.channels
        )));
    }
    let n = pred.n_voxels();
    let mask: Option<Vec<bool>> = match mask {
        Some(m) if m.grid.dims != pred.grid.dims => {
            return Err(CliError::Usage("mask grid differs from the prediction".into()));
        }
        Some(m) => Some(m.channel(0).iter().map(|&v| v != 0.0).collect()),
        None => None,
    };
    let mk = mask.as_deref();
    let first = |v: &Volume| v.select_channels(&[0]);
    let mut rows = Vec::new();
    match pred.channels {
        SAMPLE_CHANNELS => {
            let (sa, sb) = (ShSample::new(pred.clone())?, ShSample::new(reference.clone())?);
            rows.push(row("mae_lowb", mae(pred.channel(0), reference.channel(0), mk)?));
            let sh_mask = repeat_mask(mk, SAMPLE_CHANNELS - 1);
            rows.push(row("mae_sh", mae(&pred.data[n..], &reference.data[n..], sh_mask.as_deref())?));
            rows.push(row("lncc_lowb", lncc(&first(pred), &first(reference), window)?));
            rows.push(row("v1_angular_error_deg", angular_error_v1(&v1_field(&sa)?, &v1_field(&sb)?, mk)?));
        }
        6 => {
            let (fa_a, adc_a, _) = metric_maps(&TensorField::from_volume(pred)?);
            let (fa_b, adc_b, _) = metric_maps(&TensorField::from_volume(reference)?);
            rows.push(row("mae_fa", mae(&fa_a.data, &fa_b.data, mk)?));
            rows.push(row("mae_adc", mae(&adc_a.data, &adc_b.data, mk)?));
            rows.push(row("lncc_fa", lncc(&fa_a, &fa_b, window)?));
            rows.push(row("v1_angular_error_deg", angular_error_v1(&tensor_v1(pred)?, &tensor_v1(reference)?, mk)?));
        }
        c => {
            let all = repeat_mask(mk, c);
            rows.push(row("mae", mae(&pred.data, &reference.data, all.as_deref())?));
            rows.push(row("lncc", lncc(&first(pred), &first(reference), window)?));
        }
    }
    Ok(rows)
}
