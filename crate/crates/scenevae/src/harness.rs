//! Experiment orchestration and the command line interface: dataset
//! generation, training, the view-count comparison, camera-trajectory
//! interpolation, prior sampling, depth-uncertainty maps, and the
//! conditioning-mechanism ablation grid.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Parser;
use rand::Rng;

use crate::config::Config;
use crate::field::LatentSample;
use crate::geometry::{interpolate_trajectory, Camera, TrajectoryConfig, TrajectoryMode};
use crate::inference::ContextSet;
use crate::model::{ModelConfig, SceneVae};
use crate::objective::{
    self, evaluate_elbo, infer_lambda_trace, train_nerf_single_scene, train_nerf_vae,
    LikelihoodConfig, NerfConfig, SingleSceneNerf, TrainingConfig,
};
use crate::renderer::{depth_statistics, RenderedPixel, Sampling};
use crate::synthdata::{self, DatasetConfig, SceneRecord};
use crate::tape::Tensor;
use crate::{Error, Result};

/// Final-beta grid used by the ablation experiment when none is configured.
pub const DEFAULT_BETA_GRID: [f64; 5] = [0.064, 0.256, 1.024, 4.096, 16.384];

/// Log-spaced MSE histogram bin edges shared by all conditions.
pub fn mse_hist_edges() -> Vec<f64> {
    let mut edges: Vec<f64> = (0..=24)
        .map(|i| 10f64.powf(-6.0 + 6.0 * i as f64 / 24.0))
        .collect();
    edges.insert(0, 0.0);
    edges
}

/// One evaluated view.
#[derive(Debug, Clone, PartialEq)]
pub struct PerViewMse {
    pub condition: String,
    pub views: usize,
    pub seed: u64,
    pub scene: usize,
    pub view: usize,
    pub mse: f64,
}

/// Aggregated metrics for one grid condition.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub condition: String,
    pub views: usize,
    pub mse_mean: f64,
    pub mse_p2_5: f64,
    pub mse_p97_5: f64,
    pub kl: f64,
    /// Counts per histogram bin (edges from [`mse_hist_edges`]).
    pub hist: Vec<usize>,
}

/// Linear-interpolation percentile of a sorted slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Aggregates per-view errors into per-condition summaries. The percentile
/// band spans the stated population: views x scenes x seeds.
pub fn summarize(per_view: &[PerViewMse], kl_by_condition: &[(String, usize, f64)]) -> Vec<MetricSummary> {
    let edges = mse_hist_edges();
    let mut keys: Vec<(String, usize)> = per_view
        .iter()
        .map(|r| (r.condition.clone(), r.views))
        .collect();
    keys.sort();
    keys.dedup();
    keys.iter()
        .map(|(condition, views)| {
            let mut mses: Vec<f64> = per_view
                .iter()
                .filter(|r| &r.condition == condition && r.views == *views)
                .map(|r| r.mse)
                .collect();
            mses.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut hist = vec![0usize; edges.len() - 1];
            for &m in &mses {
                let bin = edges
                    .windows(2)
                    .position(|w| m >= w[0] && m < w[1])
                    .unwrap_or(hist.len() - 1);
                hist[bin] += 1;
            }
            let kl = kl_by_condition
                .iter()
                .find(|(c, v, _)| c == condition && v == views)
                .map(|(_, _, k)| *k)
                .unwrap_or(0.0);
            MetricSummary {
                condition: condition.clone(),
                views: *views,
                mse_mean: mses.iter().sum::<f64>() / mses.len() as f64,
                mse_p2_5: percentile(&mses, 2.5),
                mse_p97_5: percentile(&mses, 97.5),
                kl,
                hist,
            }
        })
        .collect()
}

/// Writes `condition,views,mse_mean,mse_p2.5,mse_p97.5,kl` rows.
pub fn write_summary_csv(path: &Path, summaries: &[MetricSummary]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "condition,views,mse_mean,mse_p2.5,mse_p97.5,kl")?;
    for s in summaries {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            s.condition, s.views, s.mse_mean, s.mse_p2_5, s.mse_p97_5, s.kl
        )?;
    }
    Ok(())
}

pub fn write_per_view_csv(path: &Path, rows: &[PerViewMse]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "condition,views,seed,scene,view,mse")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.condition, r.views, r.seed, r.scene, r.view, r.mse
        )?;
    }
    Ok(())
}

/// Reads rows written by [`write_per_view_csv`].
pub fn read_per_view_csv(path: &Path) -> Result<Vec<PerViewMse>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let p: Vec<&str> = line.split(',').collect();
        if p.len() != 6 {
            return Err(Error::input(format!("per-view csv line {} malformed", i + 1)));
        }
        let bad = |what: &str| Error::input(format!("per-view csv line {}: bad {what}", i + 1));
        rows.push(PerViewMse {
            condition: p[0].to_string(),
            views: p[1].parse().map_err(|_| bad("views"))?,
            seed: p[2].parse().map_err(|_| bad("seed"))?,
            scene: p[3].parse().map_err(|_| bad("scene"))?,
            view: p[4].parse().map_err(|_| bad("view"))?,
            mse: p[5].parse().map_err(|_| bad("mse"))?,
        });
    }
    Ok(rows)
}

fn write_hist_csv(path: &Path, summaries: &[MetricSummary]) -> Result<()> {
    let edges = mse_hist_edges();
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "condition,views,bin_lo,bin_hi,count")?;
    for s in summaries {
        for (b, count) in s.hist.iter().enumerate() {
            writeln!(
                f,
                "{},{},{},{},{}",
                s.condition,
                s.views,
                edges[b],
                edges[b + 1],
                count
            )?;
        }
    }
    Ok(())
}

fn view_mse(rendered: &[RenderedPixel], target: &[f64]) -> f64 {
    let mut sq = 0.0;
    for (p, px) in rendered.iter().enumerate() {
        for c in 0..3 {
            let d = px.rgb_fine[c] - target[3 * p + c];
            sq += d * d;
        }
    }
    sq / (3.0 * rendered.len() as f64)
}

/// Picks `n_ctx` context views and `n_eval` target views disjointly from a
/// seeded permutation of the record's views.
fn split_views(record: &SceneRecord, n_ctx: usize, n_eval: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = (0..record.views.len()).collect();
    let mut rng = crate::rng::stream(seed, &[0x5p11_t as u64]);
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let ctx = ids[..n_ctx.min(ids.len())].to_vec();
    let rest = &ids[n_ctx.min(ids.len())..];
    let eval = rest[..n_eval.min(rest.len())].to_vec();
    (ctx, eval)
}

/// Inferred posterior mean as a plain latent sample.
pub fn posterior_mean_latent(model: &SceneVae, lambda: &Tensor) -> LatentSample {
    let d = lambda.cols() / 2;
    let rows = lambda.rows();
    let mut mean = Vec::with_capacity(rows * d);
    for r in 0..rows {
        for c in 0..d {
            mean.push(lambda.get(r, c));
        }
    }
    if model.cfg.field.mode.wants_map_latent() {
        LatentSample::Map {
            channels: d,
            hw: model.cfg.field.latent_hw,
            data: mean,
        }
    } else {
        LatentSample::Vector(mean)
    }
}

/// Posterior sample (outside any tape) from unconstrained `lambda`.
pub fn posterior_sample_latent(
    model: &SceneVae,
    lambda: &Tensor,
    rng: &mut impl Rng,
) -> LatentSample {
    let d = lambda.cols() / 2;
    let rows = lambda.rows();
    let softplus = |x: f64| {
        if x > 30.0 {
            x
        } else {
            x.exp().ln_1p()
        }
    };
    let mut data = Vec::with_capacity(rows * d);
    for r in 0..rows {
        for c in 0..d {
            let mean = lambda.get(r, c);
            let std = softplus(lambda.get(r, d + c));
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            data.push(mean + std * (-2.0 * u1.ln()).sqrt() * u2.cos());
        }
    }
    if model.cfg.field.mode.wants_map_latent() {
        LatentSample::Map {
            channels: d,
            hw: model.cfg.field.latent_hw,
            data,
        }
    } else {
        LatentSample::Vector(data)
    }
}

/// What [`eval_mse`] evaluates at each grid point.
pub enum EvalSubject<'a> {
    /// The conditional model inferring from `views` context images.
    Vae {
        model: &'a SceneVae,
        infer_steps: usize,
    },
    /// Per-scene baselines trained on `views` images, stored under
    /// `dir/scene_<s>/v<views>_s<seed>`.
    NerfCheckpoints { dir: &'a Path },
}

/// Per-view MSE over a grid of view counts.
///
/// For the conditional model the grid varies the number of context views at
/// test time; for the baselines it varies the training-view count of the
/// stored checkpoints (missing checkpoints are listed and skipped). Targets
/// are `n_eval_views` held-out views per scene. Writes the per-view CSV,
/// the summary CSV, and histogram data when `out_dir` is given.
#[allow(clippy::too_many_arguments)]
pub fn eval_mse(
    subject: &EvalSubject,
    eval_scenes: &[SceneRecord],
    grid: &[usize],
    n_eval_views: usize,
    seeds: &[u64],
    lik: &LikelihoodConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<MetricSummary>> {
    let mut rows = Vec::new();
    let mut kls: Vec<(String, usize, f64)> = Vec::new();
    let condition = match subject {
        EvalSubject::Vae { .. } => "vae",
        EvalSubject::NerfCheckpoints { .. } => "nerf",
    };
    for &views in grid {
        let mut kl_acc = 0.0;
        let mut kl_n = 0usize;
        for &seed in seeds {
            for (s, record) in eval_scenes.iter().enumerate() {
                let (ctx_ids, eval_ids) = split_views(record, views, n_eval_views, seed ^ s as u64);
                match subject {
                    EvalSubject::Vae { model, infer_steps } => {
                        let context = ContextSet::from_record(record, &ctx_ids)?;
                        let trace =
                            infer_lambda_trace(model, &context, *infer_steps, 1.0, lik, seed)?;
                        let lambda = trace.last().unwrap();
                        let terms =
                            evaluate_elbo(model, &context, lambda, 1.0, lik, Some(64), seed)?;
                        kl_acc += terms.kl;
                        kl_n += 1;
                        let latent = posterior_mean_latent(model, lambda);
                        for &v in &eval_ids {
                            let cam = &record.views[v].camera;
                            let rendered =
                                model.render_view(Some(&latent), cam, Sampling::Eval)?;
                            rows.push(PerViewMse {
                                condition: condition.into(),
                                views,
                                seed,
                                scene: s,
                                view: v,
                                mse: view_mse(&rendered, &record.views[v].image_f64()),
                            });
                        }
                    }
                    EvalSubject::NerfCheckpoints { dir } => {
                        let ckpt = dir.join(format!("scene_{s}")).join(format!("v{views}_s{seed}"));
                        let nerf = match SingleSceneNerf::load(&ckpt) {
                            Ok(n) => n,
                            Err(e) => {
                                eprintln!(
                                    "warning: skipping grid point views={views} seed={seed} \
                                     scene={s}: {e}"
                                );
                                continue;
                            }
                        };
                        for &v in &eval_ids {
                            let cam = &record.views[v].camera;
                            let rendered = nerf.render_view(cam, Sampling::Eval)?;
                            rows.push(PerViewMse {
                                condition: condition.into(),
                                views,
                                seed,
                                scene: s,
                                view: v,
                                mse: view_mse(&rendered, &record.views[v].image_f64()),
                            });
                        }
                    }
                }
            }
        }
        if kl_n > 0 {
            kls.push((condition.into(), views, kl_acc / kl_n as f64));
        }
    }
    let summaries = summarize(&rows, &kls);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_per_view_csv(&dir.join("per_view_mse.csv"), &rows)?;
        write_summary_csv(&dir.join("eval_mse.csv"), &summaries)?;
        write_hist_csv(&dir.join("mse_hist.csv"), &summaries)?;
    }
    Ok(summaries)
}

/// Saves an RGB8 buffer as PNG.
pub fn save_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let img: image::RgbImage =
        image::ImageBuffer::from_raw(width as u32, height as u32, rgb.to_vec())
            .ok_or_else(|| Error::input("pixel buffer size mismatch"))?;
    img.save(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

/// Saves a depth map: `width, height` as little-endian u32, then row-major
/// little-endian f32 values.
pub fn save_depth(path: &Path, width: usize, height: usize, depth: &[f64]) -> Result<()> {
    assert_eq!(depth.len(), width * height);
    let mut bytes = Vec::with_capacity(8 + 4 * depth.len());
    bytes.extend((width as u32).to_le_bytes());
    bytes.extend((height as u32).to_le_bytes());
    for d in depth {
        bytes.extend((*d as f32).to_le_bytes());
    }
    Ok(std::fs::write(path, bytes)?)
}

/// Loads a depth map written by [`save_depth`].
pub fn load_depth(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::input("depth file truncated"));
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let vals = bytes[8..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect::<Vec<f32>>();
    if vals.len() != w * h {
        return Err(Error::input("depth file size mismatch"));
    }
    Ok((w, h, vals))
}

fn pixels_to_rgb8(pixels: &[RenderedPixel]) -> Vec<u8> {
    pixels
        .iter()
        .flat_map(|p| {
            p.rgb_fine
                .iter()
                .map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect::<Vec<u8>>()
        })
        .collect()
}

/// Depth rendered to a grayscale preview (near = bright).
fn depth_to_rgb8(depth: &[f64], far: f64) -> Vec<u8> {
    depth
        .iter()
        .flat_map(|d| {
            let v = (1.0 - (d / far).clamp(0.0, 1.0)) * 255.0;
            [v as u8; 3]
        })
        .collect()
}

/// Interpolation artifacts: the frames plus strip images on disk.
pub struct InterpolationOutput {
    pub frames: Vec<Vec<RenderedPixel>>,
    pub cameras: Vec<Camera>,
}

/// Infers once from `n_ctx` views, then renders an interpolated camera
/// trajectory between two of the scene's views with the latent held fixed.
#[allow(clippy::too_many_arguments)]
pub fn run_interpolation(
    model: &SceneVae,
    record: &SceneRecord,
    n_ctx: usize,
    mode: TrajectoryMode,
    n_frames: usize,
    infer_steps: usize,
    lik: &LikelihoodConfig,
    seed: u64,
    traj: &TrajectoryConfig,
    out_dir: Option<&Path>,
) -> Result<InterpolationOutput> {
    if record.views.len() < n_ctx.max(2) {
        return Err(Error::input("scene record has too few views"));
    }
    let ctx_ids: Vec<usize> = (0..n_ctx).collect();
    let context = ContextSet::from_record(record, &ctx_ids)?;
    let trace = infer_lambda_trace(model, &context, infer_steps, 1.0, lik, seed)?;
    let latent = posterior_mean_latent(model, trace.last().unwrap());

    let c_a = &record.views[0].camera;
    let c_b = &record.views[1].camera;
    let cameras = if n_frames == 1 {
        vec![c_a.clone()]
    } else {
        interpolate_trajectory(c_a, c_b, n_frames, mode, traj)
    };
    let frames: Vec<Vec<RenderedPixel>> = cameras
        .iter()
        .map(|cam| model.render_view(Some(&latent), cam, Sampling::Eval))
        .collect::<Result<_>>()?;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let (w, h) = (record.width, record.height);
        // Horizontal strips: frames side by side.
        let mut rgb = vec![0u8; 3 * w * n_frames.max(1) * h];
        let mut depth_strip = vec![0u8; 3 * w * n_frames.max(1) * h];
        for (f, frame) in frames.iter().enumerate() {
            let frgb = pixels_to_rgb8(frame);
            let fdepth: Vec<f64> = frame.iter().map(|p| p.depth).collect();
            let fdepth_rgb = depth_to_rgb8(&fdepth, model.cfg.interval.far);
            save_depth(&dir.join(format!("depth_{f:03}.bin")), w, h, &fdepth)?;
            for row in 0..h {
                let dst = 3 * (row * w * frames.len() + f * w);
                let src = 3 * row * w;
                rgb[dst..dst + 3 * w].copy_from_slice(&frgb[src..src + 3 * w]);
                depth_strip[dst..dst + 3 * w].copy_from_slice(&fdepth_rgb[src..src + 3 * w]);
            }
        }
        save_rgb_png(&dir.join("interp_rgb.png"), w * frames.len(), h, &rgb)?;
        save_rgb_png(
            &dir.join("interp_depth.png"),
            w * frames.len(),
            h,
            &depth_strip,
        )?;
    }
    Ok(InterpolationOutput { frames, cameras })
}

/// Uncertainty outputs: per-pixel means and depth variance over posterior
/// samples.
pub struct UncertaintyOutput {
    pub mean_rgb: Vec<f64>,
    pub mean_depth: Vec<f64>,
    pub depth_variance: Vec<f64>,
}

/// Renders `n_samples` posterior draws of one scene from a target camera and
/// reports the mean image, mean depth, and per-pixel depth variance.
#[allow(clippy::too_many_arguments)]
pub fn run_uncertainty(
    model: &SceneVae,
    record: &SceneRecord,
    context_views: &[usize],
    target: &Camera,
    n_samples: usize,
    infer_steps: usize,
    lik: &LikelihoodConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<UncertaintyOutput> {
    let context = ContextSet::from_record(record, context_views)?;
    let trace = infer_lambda_trace(model, &context, infer_steps, 1.0, lik, seed)?;
    let lambda = trace.last().unwrap().clone();

    let n_pix = target.width * target.height;
    let mut mean_rgb = vec![0.0; 3 * n_pix];
    let mut rng = crate::rng::stream(seed, &[0xdef7]);
    let mut latents = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        latents.push(posterior_sample_latent(model, &lambda, &mut rng));
    }
    let (mean_depth, depth_variance) = depth_statistics(n_samples, |s| {
        let pixels = model.render_view(Some(&latents[s]), target, Sampling::Eval)?;
        for (p, px) in pixels.iter().enumerate() {
            for c in 0..3 {
                mean_rgb[3 * p + c] += px.rgb_fine[c] / n_samples as f64;
            }
        }
        Ok(pixels.iter().map(|p| p.depth).collect())
    })?;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let rgb8: Vec<u8> = mean_rgb
            .iter()
            .map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        save_rgb_png(&dir.join("mean_rgb.png"), target.width, target.height, &rgb8)?;
        save_depth(
            &dir.join("mean_depth.bin"),
            target.width,
            target.height,
            &mean_depth,
        )?;
        save_depth(
            &dir.join("depth_variance.bin"),
            target.width,
            target.height,
            &depth_variance,
        )?;
        let vmax = depth_variance.iter().cloned().fold(1e-12, f64::max);
        let var_rgb: Vec<u8> = depth_variance
            .iter()
            .flat_map(|v| [((v / vmax).sqrt().clamp(0.0, 1.0) * 255.0) as u8; 3])
            .collect();
        save_rgb_png(
            &dir.join("depth_variance.png"),
            target.width,
            target.height,
            &var_rgb,
        )?;
    }
    Ok(UncertaintyOutput {
        mean_rgb,
        mean_depth,
        depth_variance,
    })
}

/// One ablation cell specification.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub mode: String,
    pub refine_steps: usize,
    pub beta_final: f64,
}

/// One ablation result row (mean and std over seeds).
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub elbo_mean: f64,
    pub elbo_std: f64,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub kl_mean: f64,
    pub kl_std: f64,
    pub failures: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains each (conditioning mode x iterative x beta) cell at desk scale and
/// tabulates final ELBO, MSE, and KL over seeds. Cell failures are recorded
/// and the grid continues.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_grid(
    train_records: &[SceneRecord],
    eval_records: &[SceneRecord],
    cells: &[AblationCell],
    seeds: &[u64],
    base_model_cfg: &Config,
    base_train_cfg: &TrainingConfig,
    n_ctx_eval: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for cell in cells {
        let mut elbos = Vec::new();
        let mut mses = Vec::new();
        let mut kls = Vec::new();
        let mut failures = 0usize;
        for &seed in seeds {
            let result = (|| -> Result<(f64, f64, f64)> {
                let mut cfg_text = base_model_cfg.clone();
                cfg_text.set("model.mode", &cell.mode);
                cfg_text.set("model.refine_steps", cell.refine_steps);
                let model_cfg = ModelConfig::from_config(&cfg_text)?;
                let mut model = SceneVae::init(model_cfg, seed)?;
                let mut tcfg = base_train_cfg.clone();
                tcfg.seed = seed;
                tcfg.beta.final_value = cell.beta_final;
                tcfg.beta.start = tcfg.beta.start.min(cell.beta_final);
                train_nerf_vae(&mut model, train_records, &tcfg, None)?;
                // Final metrics on held-out scenes at beta = 1.
                let mut e_acc = (0.0, 0.0, 0.0);
                for (s, record) in eval_records.iter().enumerate() {
                    let ids: Vec<usize> = (0..n_ctx_eval.min(record.views.len())).collect();
                    let context = ContextSet::from_record(record, &ids)?;
                    let trace = infer_lambda_trace(
                        &model,
                        &context,
                        model.cfg.refine_steps,
                        1.0,
                        &tcfg.likelihood,
                        seed ^ s as u64,
                    )?;
                    let terms = evaluate_elbo(
                        &model,
                        &context,
                        trace.last().unwrap(),
                        1.0,
                        &tcfg.likelihood,
                        Some(256),
                        seed ^ s as u64,
                    )?;
                    e_acc.0 += terms.elbo;
                    e_acc.1 += terms.mse;
                    e_acc.2 += terms.kl;
                }
                let n = eval_records.len() as f64;
                Ok((e_acc.0 / n, e_acc.1 / n, e_acc.2 / n))
            })();
            match result {
                Ok((e, m, k)) => {
                    elbos.push(e);
                    mses.push(m);
                    kls.push(k);
                }
                Err(err) => {
                    eprintln!(
                        "warning: ablation cell {}/T={}/beta={} seed {seed} failed: {err}",
                        cell.mode, cell.refine_steps, cell.beta_final
                    );
                    failures += 1;
                }
            }
        }
        let (elbo_mean, elbo_std) = if elbos.is_empty() { (f64::NAN, 0.0) } else { mean_std(&elbos) };
        let (mse_mean, mse_std) = if mses.is_empty() { (f64::NAN, 0.0) } else { mean_std(&mses) };
        let (kl_mean, kl_std) = if kls.is_empty() { (f64::NAN, 0.0) } else { mean_std(&kls) };
        rows.push(AblationRow {
            cell: cell.clone(),
            elbo_mean,
            elbo_std,
            mse_mean,
            mse_std,
            kl_mean,
            kl_std,
            failures,
        });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::File::create(dir.join("ablation.csv"))?;
        writeln!(
            f,
            "mode,iterative_steps,beta,elbo_mean,elbo_std,mse_mean,mse_std,kl_mean,kl_std,failures"
        )?;
        for r in &rows {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{}",
                r.cell.mode,
                r.cell.refine_steps,
                r.cell.beta_final,
                r.elbo_mean,
                r.elbo_std,
                r.mse_mean,
                r.mse_std,
                r.kl_mean,
                r.kl_std,
                r.failures
            )?;
        }
        // Human-readable table mirroring (ELBO, MSE [1e-3], KL).
        let mut t = std::fs::File::create(dir.join("ablation_table.txt"))?;
        writeln!(t, "{:<14} {:>3} {:>8} | ELBO            MSE [1e-3]      KL", "mode", "T", "beta")?;
        for r in &rows {
            writeln!(
                t,
                "{:<14} {:>3} {:>8} | {:>6.3} ± {:<6.3} {:>6.2} ± {:<6.2} {:>6.1} ± {:<6.1}",
                r.cell.mode,
                r.cell.refine_steps,
                r.cell.beta_final,
                r.elbo_mean,
                r.elbo_std,
                r.mse_mean * 1e3,
                r.mse_std * 1e3,
                r.kl_mean,
                r.kl_std
            )?;
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Command line interface
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(
    name = "scenevae",
    about = "Latent-conditioned radiance fields: data generation, training, and evaluation",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Subcommand, Debug)]
enum Command {
    /// Generate a raytraced multi-view dataset.
    Generate(CommonArgs),
    /// Train the conditional model.
    Train(CommonArgs),
    /// Train per-scene unconditional baselines over a view-count grid.
    TrainNerf(CommonArgs),
    /// Evaluate reconstruction MSE over a view-count grid.
    EvalMse(CommonArgs),
    /// Render a camera-trajectory interpolation from a fixed latent.
    Interpolate(CommonArgs),
    /// Render scenes sampled from the prior.
    Sample(CommonArgs),
    /// Render posterior depth-uncertainty maps.
    Uncertainty(CommonArgs),
    /// Train and tabulate the conditioning-mechanism ablation grid.
    Ablate(CommonArgs),
}

#[derive(clap::Args, Debug)]
struct CommonArgs {
    /// Flat key-value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Entry point used by the binary: returns the process exit code
/// (0 success, 1 usage error, 2 runtime failure).
pub fn cli(argv: Vec<String>) -> i32 {
    let parsed = Cli::try_parse_from(std::iter::once("scenevae".to_string()).chain(argv));
    let cli = match parsed {
        Ok(c) => c,
        Err(e) => {
            // Help/version requests are successful exits.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::TrainNerf(a) => cmd_train_nerf(a),
        Command::EvalMse(a) => cmd_eval_mse(a),
        Command::Interpolate(a) => cmd_interpolate(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Uncertainty(a) => cmd_uncertainty(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Dataset configuration from `data.*` keys.
pub fn dataset_config_from(cfg: &Config) -> Result<DatasetConfig> {
    let recipe_name = cfg.str_or("data.recipe", "jaytracer");
    let mut scene = match recipe_name {
        "jaytracer" => synthdata::SceneRecipe::jaytracer_default(),
        "clevr" => synthdata::SceneRecipe::clevr_default(),
        other => return Err(Error::config(format!("unknown recipe: {other}"))),
    };
    scene.objects_min = cfg.usize_or("data.objects_min", scene.objects_min)?;
    scene.objects_max = cfg.usize_or("data.objects_max", scene.objects_max)?;
    if scene.objects_max < scene.objects_min {
        return Err(Error::config("data.objects_max < data.objects_min"));
    }
    let camera = match recipe_name {
        "jaytracer" => synthdata::CameraRecipe::jaytracer_default(),
        _ => synthdata::CameraRecipe::clevr_default(),
    };
    let side = cfg.usize_or("data.side", 64)?;
    Ok(DatasetConfig {
        scenes: cfg.usize_or("data.scenes", 8)?,
        views: cfg.usize_or("data.views", 10)?,
        width: cfg.usize_or("data.width", side)?,
        height: cfg.usize_or("data.height", side)?,
        fov_y: cfg.f64_or("data.fov_y", 50.0)?,
        scene,
        camera,
        trace: synthdata::TraceConfig::default(),
    })
}

fn cmd_generate(a: &CommonArgs) -> Result<()> {
    let cfg = Config::load(&a.config)?;
    let dcfg = dataset_config_from(&cfg)?;
    let manifest = synthdata::generate_dataset(&dcfg, a.seed, &a.out)?;
    println!(
        "wrote {} scenes x {} views to {}",
        manifest.entries.len(),
        dcfg.views,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: &CommonArgs) -> Result<()> {
    let cfg = Config::load(&a.config)?;
    let dataset_dir = PathBuf::from(cfg.require_str("train.dataset")?);
    let dataset = synthdata::load_dataset(&dataset_dir)?;
    let model_cfg = ModelConfig::from_config(&cfg)?;
    let mut train_cfg = TrainingConfig::from_config(&cfg)?;
    if train_cfg.seed == 0 {
        train_cfg.seed = a.seed;
    }
    let mut model = SceneVae::init(model_cfg, a.seed)?;
    let rows = train_nerf_vae(&mut model, &dataset, &train_cfg, Some(&a.out))?;
    if let Some(last) = rows.last() {
        println!(
            "finished at step {}: elbo {:.1}, mse {:.5}, kl {:.2}",
            last.step, last.elbo, last.mse, last.kl
        );
    }
    Ok(())
}

fn cmd_train_nerf(a: &CommonArgs) -> Result<()> {
    let cfg = Config::load(&a.config)?;
    let dataset_dir = PathBuf::from(cfg.require_str("nerf.dataset")?);
    let dataset = synthdata::load_dataset(&dataset_dir)?;
    let n_scenes = cfg.usize_or("nerf.scenes", dataset.len())?;
    let view_grid = cfg.usize_list_or("nerf.view_grid", &[5, 10, 20, 50, 100])?;
    let seeds: Vec<u64> = cfg
        .usize_list_or("nerf.seeds", &[0])?
        .into_iter()
        .map(|s| s as u64)
        .collect();
    let base = NerfConfig::from_config(&cfg)?;
    for (s, record) in dataset.iter().take(n_scenes).enumerate() {
        for &views in &view_grid {
            if views > record.views.len() {
                eprintln!(
                    "warning: scene {s} has {} views, skipping grid point {views}",
                    record.views.len()
                );
                continue;
            }
            for &seed in &seeds {
                let ids: Vec<usize> = (0..views).collect();
                let train_views = ContextSet::from_record(record, &ids)?;
                let mut ncfg = base.clone();
                ncfg.seed = seed.wrapping_add(a.seed);
                let nerf = train_nerf_single_scene(&train_views, &ncfg)?;
                let dir = a.out.join(format!("scene_{s}")).join(format!("v{views}_s{seed}"));
                nerf.save(&dir)?;
                println!("trained scene {s} views {views} seed {seed}");
            }
        }
    }
    Ok(())
}

fn cmd_eval_mse(a: &CommonArgs) -> Result<()> {
    let cfg = Config::load(&a.config)?;
    let dataset = synthdata::load_dataset(Path::new(cfg.require_str("eval.dataset")?))?;
    let grid = cfg.usize_list_or("eval.grid", &[1, 2, 3, 4, 5, 6])?;
    let n_eval_views = cfg.usize_or("eval.n_eval_views", 10)?;
    let seeds: Vec<u64> = cfg
        .usize_list_or("eval.seeds", &[0])?
        .into_iter()
        .map(|s| s as u64)
        .collect();
    let lik = LikelihoodConfig::new(
        cfg.f64_or("train.sigma_lik", 0.1)?,
        false,
    )?;
    let subject = cfg.str_or("eval.subject", "vae");
    let summaries = match subject {
        "vae" => {
            let model = SceneVae::load(Path::new(cfg.require_str("eval.model_dir")?))?;
            let infer_steps = cfg.usize_or("eval.infer_steps", model.cfg.refine_steps)?;
            eval_mse(
                &EvalSubject::Vae {
                    model: &model,
                    infer_steps,
                },
                &dataset,
                &grid,
                n_eval_views,
                &seeds,
                &lik,
                Some(&a.out),
            )?
        }
        "nerf" => {
            let dir = PathBuf::from(cfg.require_str("eval.nerf_dir")?);
            eval_mse(
                &EvalSubject::NerfCheckpoints { dir: &dir },
                &dataset,
                &grid,
                n_eval_views,
                &seeds,
                &lik,
                Some(&a.out),
            )?
        }
        other => return Err(Error::config(format!("unknown eval subject: {other}"))),
    };
    for s in &summaries {
        println!(
            "{} views={}: mse {:.5} [{:.5}, {:.5}] kl {:.2}",
            s.condition, s.views, s.mse_mean, s.mse_p2_5, s.mse_p97_5, s.kl
        );
    }
    Ok(())
}

fn cmd_interpolate(a: &CommonArgs) -> Result<()> {
    let cfg = Config::load(&a.config)?;
    let model = SceneVae::load(Path::new(cfg.require_str("interp.model_dir")?))?;
    let dataset = synthdata::load_dataset(Path::new(cfg.require_str("interp.dataset")?))?;
    let scene = cfg.usize_or("interp.scene", 0)?;
    let record = dataset
        .get(scene)
        .ok_or_else(|| Error::input(format!("scene {scene} not in dataset")))?;
    let mode = match cfg.str_or("interp.mode", "wd") {
        "wd" => TrajectoryMode::WithinDistribution,
        "ood" => TrajectoryMode::OutOfDistribution,
        other => return Err(Error::config(format!("unknown trajectory mode: {other}"))),
    };
    let traj = TrajectoryConfig {
        lift_height: {
            let v = cfg.f64_or("interp.lift_height", 0.0)?;
            (v > 0.0).then_some(v)
        },
    };
    let lik = LikelihoodConfig::default();
    run_interpolation(
        &model,
        record,
        cfg.usize_or("interp.n_ctx", 4)?,
        mode,
        cfg.usize_or("interp.frames", 8)?,
        cfg.usize_or("eval.infer_steps", model.cfg.refine_steps)?,
        &lik,
        a.seed,
        &traj,
        Some(&a.out),
    )?;
    println!("wrote interpolation strips to {}", a.out.display());
    Ok(())
}

fn cmd_sample(a: &CommonArgs) -> Result<()> {
    let cfg = Config::load(&a.config)?;
    let model = SceneVae::load(Path::new(cfg.require_str("sample.model_dir")?))?;
    let n_scenes = cfg.usize_or("sample.scenes", 4)?;
    let n_views = cfg.usize_or("sample.views", 4)?;
    let side = cfg.usize_or("sample.side", 64)?;
    let dcfg = DatasetConfig::jaytracer(1, n_views, side);
    std::fs::create_dir_all(&a.out)?;
    let mut rng = crate::rng::stream(a.seed, &[0x5a3]);
    for s in 0..n_scenes {
        let scene = objective::sample_scene(&model, &mut rng);
        for v in 0..n_views {
            let camera = synthdata::sample_camera(a.seed ^ s as u64, v, &dcfg);
            let pixels = scene.render(&camera, Sampling::Eval)?;
            let rgb = pixels_to_rgb8(&pixels);
            save_rgb_png(&a.out.join(format!("sample_{s:02}_{v:02}.png")), side, side, &rgb)?;
            let depth: Vec<f64> = pixels.iter().map(|p| p.depth).collect();
            save_depth(&a.out.join(format!("sample_{s:02}_{v:02}_depth.bin")), side, side, &depth)?;
        }
    }
    println!("wrote {n_scenes} prior scenes x {n_views} views");
    Ok(())
}

fn cmd_uncertainty(a: &CommonArgs) -> Result<()> {
    let cfg = Config::load(&a.config)?;
    let model = SceneVae::load(Path::new(cfg.require_str("unc.model_dir")?))?;
    let dataset = synthdata::load_dataset(Path::new(cfg.require_str("unc.dataset")?))?;
    let scene = cfg.usize_or("unc.scene", 0)?;
    let record = dataset
        .get(scene)
        .ok_or_else(|| Error::input(format!("scene {scene} not in dataset")))?;
    let context_views = cfg.usize_list_or("unc.context_views", &[0])?;
    let target_view = cfg.usize_or("unc.target_view", 1)?;
    let target = record
        .views
        .get(target_view)
        .ok_or_else(|| Error::input("target view out of range"))?
        .camera
        .clone();
    run_uncertainty(
        &model,
        record,
        &context_views,
        &target,
        cfg.usize_or("unc.samples", 100)?,
        cfg.usize_or("eval.infer_steps", model.cfg.refine_steps)?,
        &LikelihoodConfig::default(),
        a.seed,
        Some(&a.out),
    )?;
    println!("wrote uncertainty maps to {}", a.out.display());
    Ok(())
}

fn cmd_ablate(a: &CommonArgs) -> Result<()> {
    let cfg = Config::load(&a.config)?;
    let dataset = synthdata::load_dataset(Path::new(cfg.require_str("ablate.dataset")?))?;
    let n_eval = cfg.usize_or("ablate.eval_scenes", 2)?;
    if dataset.len() <= n_eval {
        return Err(Error::config("ablate.eval_scenes leaves no training scenes"));
    }
    let (train_records, eval_records) = dataset.split_at(dataset.len() - n_eval);
    let modes: Vec<String> = cfg
        .str_or("ablate.modes", "shift,shift_all,ain_all,attention")
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let iterative = cfg.usize_list_or("ablate.iterative", &[0])?;
    let betas = cfg.f64_list_or("ablate.betas", &DEFAULT_BETA_GRID)?;
    let seeds: Vec<u64> = cfg
        .usize_list_or("ablate.seeds", &[0])?
        .into_iter()
        .map(|s| s as u64)
        .collect();
    let mut cells = Vec::new();
    for mode in &modes {
        for &t in &iterative {
            for &beta in &betas {
                cells.push(AblationCell {
                    mode: mode.clone(),
                    refine_steps: t,
                    beta_final: beta,
                });
            }
        }
    }
    let train_cfg = TrainingConfig::from_config(&cfg)?;
    let rows = run_ablation_grid(
        train_records,
        eval_records,
        &cells,
        &seeds,
        &cfg,
        &train_cfg,
        cfg.usize_or("ablate.n_ctx_eval", train_cfg.n_ctx)?,
        Some(&a.out),
    )?;
    println!("ablation grid: {} cells", rows.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolation() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 5.0);
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert!((percentile(&v, 25.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn summary_recomputation_from_csv_is_exact() {
        let rows: Vec<PerViewMse> = (0..40)
            .map(|i| PerViewMse {
                condition: if i % 2 == 0 { "vae" } else { "nerf" }.into(),
                views: 3 + (i % 3),
                seed: i as u64 % 2,
                scene: i / 10,
                view: i,
                mse: 0.001 * (i as f64 + 1.0) * if i % 7 == 0 { 10.0 } else { 1.0 },
            })
            .collect();
        let kls = vec![("vae".to_string(), 3usize, 12.5f64)];
        let summaries = summarize(&rows, &kls);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("per_view.csv");
        write_per_view_csv(&path, &rows).unwrap();
        let back = read_per_view_csv(&path).unwrap();
        assert_eq!(back, rows);
        let again = summarize(&back, &kls);
        assert_eq!(again, summaries);
    }

    #[test]
    fn depth_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let depth = vec![0.5, 1.5, 2.25, f64::from(f32::MAX), 0.0, 3.75];
        save_depth(&path, 3, 2, &depth).unwrap();
        let (w, h, vals) = load_depth(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        for (a, b) in vals.iter().zip(&depth) {
            assert_eq!(*a, *b as f32);
        }
    }

    #[test]
    fn default_beta_grid_matches_experiment_values() {
        assert_eq!(DEFAULT_BETA_GRID, [0.064, 0.256, 1.024, 4.096, 16.384]);
    }

    #[test]
    fn split_views_is_disjoint_and_seeded() {
        let cfg = DatasetConfig::jaytracer(1, 10, 8);
        let record = synthdata::render_scene_record(3, &cfg);
        let (ctx, eval) = split_views(&record, 3, 5, 7);
        assert_eq!(ctx.len(), 3);
        assert_eq!(eval.len(), 5);
        for c in &ctx {
            assert!(!eval.contains(c));
        }
        let (ctx2, eval2) = split_views(&record, 3, 5, 7);
        assert_eq!(ctx, ctx2);
        assert_eq!(eval, eval2);
    }
}
