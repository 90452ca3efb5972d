//! Differentiable volumetric rendering.
//!
//! Per ray: stratified coarse samples, transmittance compositing,
//! inverse-CDF resampling of fine samples from the coarse weights, and a
//! second compositing pass over the merged point set. Both the coarse and
//! fine colors are returned since both enter the likelihood.
//!
//! Compositing uses the exact log-space form: with `s_k = sigma_k * delta_k`,
//! `T_k = exp(-sum_{j<k} s_j)` and `alpha_k = 1 - exp(-s_k)`, so the
//! telescoping identity `w_k = T_k - T_{k+1}` holds to machine precision and
//! the formula is exact for piecewise-constant densities.

use std::cell::Cell;

use nalgebra::Vector3;
use rand::Rng;

use crate::field::FieldOut;
use crate::geometry::{pixel_to_ray, Camera, Ray};
use crate::nn::GraphCtx;
use crate::tape::{Tensor, Var};
use crate::{Error, Result};

/// Epsilon in the depth normalization (guards 0/0 on empty rays).
const DEPTH_EPS: f64 = 1e-10;
/// Below this accumulated weight a ray is treated as empty and its depth
/// reported as `far`.
const EMPTY_RAY_WEIGHT: f64 = 1e-8;

thread_local! {
    static RENDER_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of render passes issued on this thread (test instrumentation).
pub fn render_call_count() -> u64 {
    RENDER_CALLS.with(|c| c.get())
}

/// Ray integration bounds in world units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayInterval {
    pub near: f64,
    pub far: f64,
}

impl RayInterval {
    pub fn new(near: f64, far: f64) -> Result<Self> {
        if !(near >= 0.0 && far > near) {
            return Err(Error::input(format!("invalid ray interval [{near}, {far}]")));
        }
        Ok(RayInterval { near, far })
    }
}

/// Ascending quadrature abscissae along a ray.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePoints {
    t: Vec<f64>,
}

impl SamplePoints {
    pub fn new(t: Vec<f64>) -> Result<Self> {
        if t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input("sample points must be strictly ascending"));
        }
        Ok(SamplePoints { t })
    }

    pub fn values(&self) -> &[f64] {
        &self.t
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// One rendered pixel, both compositing passes.
#[derive(Debug, Clone)]
pub struct RenderedPixel {
    pub rgb_coarse: [f64; 3],
    pub rgb_fine: [f64; 3],
    /// Expected ray depth from the fine pass; `far` on empty rays.
    pub depth: f64,
    /// Fine-pass compositing weights.
    pub weights: Vec<f64>,
    /// Transmittance left after the last sample.
    pub transmittance_residual: f64,
}

/// Sampling behavior: deterministic evaluation (bin midpoints, quantile
/// midpoints) or jittered training draws with per-pixel streams derived from
/// `(seed, pixel id)`.
#[derive(Debug, Clone, Copy)]
pub enum Sampling {
    Eval,
    Train { seed: u64 },
}

impl Sampling {
    fn stream(&self, ray_id: u64) -> Option<rand_chacha::ChaCha8Rng> {
        match self {
            Sampling::Eval => None,
            Sampling::Train { seed } => Some(crate::rng::pixel_stream(*seed, ray_id)),
        }
    }
}

/// Splits `interval` into `n` equal bins and draws one point per bin
/// (bin midpoints under the eval sampler).
pub fn stratified_sample(
    interval: RayInterval,
    n: usize,
    rng: Option<&mut dyn rand::RngCore>,
) -> SamplePoints {
    assert!(n >= 2, "stratified sampling needs at least 2 points");
    let width = (interval.far - interval.near) / n as f64;
    let t = match rng {
        None => (0..n)
            .map(|k| interval.near + (k as f64 + 0.5) * width)
            .collect(),
        Some(rng) => (0..n)
            .map(|k| interval.near + (k as f64 + rng.gen_range(0.0..1.0)) * width)
            .collect(),
    };
    SamplePoints { t }
}

/// Draws `n_fine` points by inverting the piecewise-constant CDF defined by
/// the coarse `weights` over the `n` equal bins of `interval`, then merges
/// them with the coarse points (ascending). All-zero weights fall back to a
/// uniform density. The resampling itself carries no gradients.
pub fn hierarchical_resample(
    weights: &[f64],
    points: &SamplePoints,
    interval: RayInterval,
    n_fine: usize,
    rng: Option<&mut dyn rand::RngCore>,
) -> SamplePoints {
    let n = weights.len();
    assert_eq!(n, points.len(), "one weight per coarse point");
    let total: f64 = weights.iter().sum();
    let uniform = 1.0 / n as f64;
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for &w in weights {
        acc += if total > 0.0 { w / total } else { uniform };
        cdf.push(acc);
    }
    cdf[n] = 1.0;

    let bin_width = (interval.far - interval.near) / n as f64;
    let mut draws = Vec::with_capacity(n_fine);
    let mut rng = rng;
    for k in 0..n_fine {
        // Stratified quantiles; midpoints under the eval sampler.
        let u = match rng.as_deref_mut() {
            None => (k as f64 + 0.5) / n_fine as f64,
            Some(r) => (k as f64 + r.gen_range(0.0..1.0)) / n_fine as f64,
        };
        // Invert the piecewise-linear CDF.
        let mut bin = match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        bin = bin.min(n - 1);
        let mass = cdf[bin + 1] - cdf[bin];
        let frac = if mass > 0.0 { (u - cdf[bin]) / mass } else { 0.5 };
        draws.push(interval.near + (bin as f64 + frac) * bin_width);
    }

    let mut merged = points.t.clone();
    merged.extend(draws);
    merged.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Exact ties (possible under the deterministic sampler) get nudged so the
    // strict-ascent invariant holds; the induced segments have length ~1e-12.
    let nudge = (interval.far - interval.near) * 1e-12;
    for i in 1..merged.len() {
        if merged[i] <= merged[i - 1] {
            merged[i] = merged[i - 1] + nudge;
        }
    }
    SamplePoints { t: merged }
}

/// Tape-level compositing output for a batch of rays.
pub struct CompositeBatch {
    /// `R x 3` composited color.
    pub color: Var,
    /// `R x S` per-sample weights.
    pub weights: Var,
    /// `R x 1` expected depth (`sum w t / (sum w + eps)`).
    pub depth: Var,
    /// `R x 1` transmittance remaining after the last sample.
    pub residual: Var,
}

/// Composites a batch of rays sharing a sample count.
///
/// `sigma` is `R x S`, `rgb` is `(R*S) x 3` ray-major, and `t_matrix` is the
/// constant `R x S` matrix of sample depths.
pub fn composite_batch(
    sigma: &Var,
    rgb: &Var,
    t_matrix: &Tensor,
    interval: RayInterval,
) -> Result<CompositeBatch> {
    let rays = t_matrix.rows();
    let samples = t_matrix.cols();
    for r in 0..rays {
        for k in 1..samples {
            if t_matrix.get(r, k) <= t_matrix.get(r, k - 1) {
                return Err(Error::input("sample points must be strictly ascending"));
            }
        }
    }
    // delta_k = t_{k+1} - t_k, last delta = far - t_S (bounded scenes; any
    // leftover transmittance is reported, not composited over a background).
    let mut deltas = vec![0.0; rays * samples];
    for r in 0..rays {
        for k in 0..samples {
            let next = if k + 1 < samples {
                t_matrix.get(r, k + 1)
            } else {
                interval.far
            };
            deltas[r * samples + k] = next - t_matrix.get(r, k);
        }
    }
    let delta_t = Tensor::new(rays, samples, deltas);
    let s = sigma.mul_const(&delta_t); // R x S
    let trans = s.cumsum_rows_exclusive().neg().exp(); // T_k
    let alpha = s.neg().exp().neg().add_scalar(1.0); // 1 - exp(-s)
    let weights = trans.mul(&alpha);
    let color = weights.weighted_sum_per_ray(rgb);
    let residual = s.sum_rows().neg().exp();
    let depth_num = weights.mul_const(t_matrix).sum_rows();
    let depth_den = weights.sum_rows().add_scalar(DEPTH_EPS);
    let depth = depth_num.div(&depth_den);
    Ok(CompositeBatch {
        color,
        weights,
        depth,
        residual,
    })
}

/// Value-level single-ray compositing over plain field outputs.
pub fn composite(
    outputs: &[crate::field::RadianceOutput],
    points: &SamplePoints,
    interval: RayInterval,
) -> Result<RenderedPixel> {
    if outputs.len() != points.len() {
        return Err(Error::input("outputs misaligned with sample points"));
    }
    let store = crate::nn::ParamStore::new();
    let ctx = GraphCtx::new(&store, false, false);
    let n = outputs.len();
    let sigma = ctx.constant(Tensor::new(
        1,
        n,
        outputs.iter().map(|o| o.sigma).collect(),
    ));
    let rgb = ctx.constant(Tensor::new(
        n,
        3,
        outputs.iter().flat_map(|o| o.rgb).collect(),
    ));
    let t_matrix = Tensor::new(1, n, points.t.clone());
    let out = composite_batch(&sigma, &rgb, &t_matrix, interval)?;
    let color = out.color.value();
    let weights = out.weights.value();
    let sum_w: f64 = weights.data().iter().sum();
    let depth = if sum_w > EMPTY_RAY_WEIGHT {
        out.depth.value().item()
    } else {
        interval.far
    };
    Ok(RenderedPixel {
        rgb_coarse: [color.get(0, 0), color.get(0, 1), color.get(0, 2)],
        rgb_fine: [color.get(0, 0), color.get(0, 1), color.get(0, 2)],
        depth,
        weights: weights.data().to_vec(),
        transmittance_residual: out.residual.value().item(),
    })
}

/// A scene function the renderer can drive: the caller has already fixed
/// parameters, conditioning, and any training-time density noise policy.
pub trait RayField {
    fn eval(
        &self,
        ctx: &GraphCtx,
        positions: &[Vector3<f64>],
        directions: &[Vector3<f64>],
    ) -> Result<FieldOut>;
}

/// Quadrature configuration for rendering.
#[derive(Debug, Clone, Copy)]
pub struct RenderConfig {
    pub interval: RayInterval,
    pub n_coarse: usize,
    pub n_fine: usize,
}

/// Tape-level outputs for a rendered ray batch.
pub struct RenderBatch {
    pub rgb_coarse: Var,
    pub rgb_fine: Var,
    /// `R x 1` fine-pass depth.
    pub depth: Var,
    /// Fine-pass weights, `R x (n_coarse + n_fine)`.
    pub weights_fine: Var,
    /// `R x 1` fine-pass transmittance residual.
    pub residual: Var,
    /// Merged per-ray sample depths.
    pub fine_points: Vec<SamplePoints>,
}

/// Renders a batch of rays: coarse pass, importance resampling, fine pass.
///
/// `ray_ids` seed the per-ray sampling streams under [`Sampling::Train`];
/// rays are independent, so any parallel execution over disjoint id sets
/// produces identical results.
pub fn render_rays(
    ctx: &GraphCtx,
    coarse: &dyn RayField,
    fine: &dyn RayField,
    rays: &[Ray],
    ray_ids: &[u64],
    cfg: &RenderConfig,
    sampling: Sampling,
) -> Result<RenderBatch> {
    if rays.is_empty() {
        return Err(Error::input("empty ray batch"));
    }
    assert_eq!(rays.len(), ray_ids.len());
    RENDER_CALLS.with(|c| c.set(c.get() + 1));
    let n_rays = rays.len();

    // Coarse pass.
    let mut coarse_points = Vec::with_capacity(n_rays);
    for (ray_id, _) in ray_ids.iter().zip(rays) {
        let mut rng = sampling.stream(*ray_id);
        let pts = stratified_sample(
            cfg.interval,
            cfg.n_coarse,
            rng.as_mut().map(|r| r as &mut dyn rand::RngCore),
        );
        coarse_points.push(pts);
    }
    let coarse_out = eval_along(ctx, coarse, rays, &coarse_points)?;
    let t_coarse = t_matrix(&coarse_points);
    let sigma_c = coarse_out.sigma.reshape(n_rays, cfg.n_coarse);
    let comp_c = composite_batch(&sigma_c, &coarse_out.rgb, &t_coarse, cfg.interval)?;

    // Importance resampling from detached coarse weights.
    let w_values = comp_c.weights.value();
    let mut fine_points = Vec::with_capacity(n_rays);
    for (i, ray_id) in ray_ids.iter().enumerate() {
        let row: Vec<f64> = (0..cfg.n_coarse).map(|k| w_values.get(i, k)).collect();
        let mut rng = sampling.stream(ray_id.wrapping_add(0x5eed_f1fe));
        fine_points.push(hierarchical_resample(
            &row,
            &coarse_points[i],
            cfg.interval,
            cfg.n_fine,
            rng.as_mut().map(|r| r as &mut dyn rand::RngCore),
        ));
    }

    // Fine pass over the merged point set.
    let fine_out = eval_along(ctx, fine, rays, &fine_points)?;
    let t_fine = t_matrix(&fine_points);
    let n_merged = cfg.n_coarse + cfg.n_fine;
    let sigma_f = fine_out.sigma.reshape(n_rays, n_merged);
    let comp_f = composite_batch(&sigma_f, &fine_out.rgb, &t_fine, cfg.interval)?;

    Ok(RenderBatch {
        rgb_coarse: comp_c.color,
        rgb_fine: comp_f.color,
        depth: comp_f.depth,
        weights_fine: comp_f.weights,
        residual: comp_f.residual,
        fine_points,
    })
}

fn t_matrix(points: &[SamplePoints]) -> Tensor {
    let rays = points.len();
    let samples = points[0].len();
    let mut data = Vec::with_capacity(rays * samples);
    for p in points {
        debug_assert_eq!(p.len(), samples);
        data.extend_from_slice(&p.t);
    }
    Tensor::new(rays, samples, data)
}

fn eval_along(
    ctx: &GraphCtx,
    field: &dyn RayField,
    rays: &[Ray],
    points: &[SamplePoints],
) -> Result<FieldOut> {
    let total: usize = points.iter().map(|p| p.len()).sum();
    let mut positions = Vec::with_capacity(total);
    let mut directions = Vec::with_capacity(total);
    for (ray, pts) in rays.iter().zip(points) {
        for &t in &pts.t {
            positions.push(ray.origin + ray.direction * t);
            directions.push(ray.direction);
        }
    }
    field.eval(ctx, &positions, &directions)
}

/// Renders the listed pixels of `camera` and extracts plain values.
pub fn render_pixels(
    ctx: &GraphCtx,
    coarse: &dyn RayField,
    fine: &dyn RayField,
    camera: &Camera,
    pixels: &[(usize, usize)],
    cfg: &RenderConfig,
    sampling: Sampling,
) -> Result<Vec<RenderedPixel>> {
    let mut rays = Vec::with_capacity(pixels.len());
    let mut ids = Vec::with_capacity(pixels.len());
    for &(i, j) in pixels {
        rays.push(pixel_to_ray(camera, i, j)?);
        ids.push((i * camera.width + j) as u64);
    }
    let batch = render_rays(ctx, coarse, fine, &rays, &ids, cfg, sampling)?;
    Ok(extract_pixels(&batch, cfg))
}

/// Converts a tape-level render batch into per-pixel values.
pub fn extract_pixels(batch: &RenderBatch, cfg: &RenderConfig) -> Vec<RenderedPixel> {
    let rgb_c = batch.rgb_coarse.value();
    let rgb_f = batch.rgb_fine.value();
    let depth = batch.depth.value();
    let weights = batch.weights_fine.value();
    let resid = batch.residual.value();
    let n = rgb_c.rows();
    (0..n)
        .map(|r| {
            let w: Vec<f64> = (0..weights.cols()).map(|k| weights.get(r, k)).collect();
            let sum_w: f64 = w.iter().sum();
            RenderedPixel {
                rgb_coarse: [rgb_c.get(r, 0), rgb_c.get(r, 1), rgb_c.get(r, 2)],
                rgb_fine: [rgb_f.get(r, 0), rgb_f.get(r, 1), rgb_f.get(r, 2)],
                depth: if sum_w > EMPTY_RAY_WEIGHT {
                    depth.get(r, 0)
                } else {
                    cfg.interval.far
                },
                weights: w,
                transmittance_residual: resid.get(r, 0),
            }
        })
        .collect()
}

/// Renders a full image (row-major pixel order) and returns the per-pixel
/// results.
pub fn render_image(
    ctx: &GraphCtx,
    coarse: &dyn RayField,
    fine: &dyn RayField,
    camera: &Camera,
    cfg: &RenderConfig,
    sampling: Sampling,
) -> Result<Vec<RenderedPixel>> {
    let pixels: Vec<(usize, usize)> = (0..camera.height)
        .flat_map(|i| (0..camera.width).map(move |j| (i, j)))
        .collect();
    render_pixels(ctx, coarse, fine, camera, &pixels, cfg, sampling)
}

/// Per-pixel mean and unbiased variance of depth over `n_samples` renders
/// produced by `render_depth(sample_index)`.
pub fn depth_statistics(
    n_samples: usize,
    mut render_depth: impl FnMut(usize) -> Result<Vec<f64>>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_samples < 2 {
        return Err(Error::input("depth statistics need n_samples >= 2"));
    }
    let first = render_depth(0)?;
    let n_pix = first.len();
    let mut mean = first;
    let mut m2 = vec![0.0; n_pix];
    // Welford accumulation.
    for s in 1..n_samples {
        let d = render_depth(s)?;
        if d.len() != n_pix {
            return Err(Error::input("depth map size changed between samples"));
        }
        let count = (s + 1) as f64;
        for i in 0..n_pix {
            let delta = d[i] - mean[i];
            mean[i] += delta / count;
            m2[i] += delta * (d[i] - mean[i]);
        }
    }
    let var: Vec<f64> = m2.iter().map(|v| v / (n_samples - 1) as f64).collect();
    Ok((mean, var))
}
