//! Amortized posterior inference: context encoding, posterior
//! parameterization, and iterative refinement of posterior parameters from
//! objective gradients.
//!
//! The posterior is a diagonal Gaussian. Its unconstrained parameters
//! `lambda` concatenate the mean and pre-softplus std along the channel
//! axis, with one row per latent position (a single row for vector latents).
//!
//! Iterative refinement follows `lambda_{t+1} = lambda_t + f(h, grad)`,
//! where `f` is an LSTM acting per latent position followed by a
//! zero-initialized linear projection, `h` is the context embedding, and
//! `grad` is the (detached) gradient of the objective estimate with respect
//! to `lambda_t`. The gradient oracle is injected by the caller, keeping
//! this module independent of the renderer.

use std::cell::Cell;

use rand::Rng;

use crate::field::LatentVar;
use crate::geometry::{pixel_to_ray, Camera};
use crate::nn::{Act, Conv, GraphCtx, Init, LstmCell, Linear, Mlp, ParamStore};
use crate::tape::{Spatial, Tensor, Var};
use crate::{Error, Result};

thread_local! {
    static INFER_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`infer`] invocations on this thread (test instrumentation).
pub fn infer_call_count() -> u64 {
    INFER_CALLS.with(|c| c.get())
}

/// One conditioning view: an image in `[0, 1]` and its camera.
#[derive(Debug, Clone)]
pub struct ContextElement {
    /// Row-major `H x W x 3` values in `[0, 1]`.
    pub image: Vec<f64>,
    pub camera: Camera,
}

/// The set of views the posterior conditions on.
#[derive(Debug, Clone)]
pub struct ContextSet {
    pub elements: Vec<ContextElement>,
}

impl ContextSet {
    pub fn new(elements: Vec<ContextElement>) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::input("context set needs at least one element"));
        }
        let (w, h) = (elements[0].camera.width, elements[0].camera.height);
        for e in &elements {
            if e.camera.width != w || e.camera.height != h {
                return Err(Error::input("context images must share a resolution"));
            }
            if e.image.len() != 3 * w * h {
                return Err(Error::input("context image size mismatch"));
            }
        }
        Ok(ContextSet { elements })
    }

    pub fn from_record(record: &crate::synthdata::SceneRecord, view_ids: &[usize]) -> Result<Self> {
        let elements = view_ids
            .iter()
            .map(|&v| {
                let view = record
                    .views
                    .get(v)
                    .ok_or_else(|| Error::input(format!("view {v} out of range")))?;
                Ok(ContextElement {
                    image: view.image_f64(),
                    camera: view.camera.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ContextSet::new(elements)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn width(&self) -> usize {
        self.elements[0].camera.width
    }

    pub fn height(&self) -> usize {
        self.elements[0].camera.height
    }

    /// The 9-channel planar encoder input for one element: RGB plus the
    /// per-pixel ray origin (constant across the image) and unit direction.
    pub fn element_tensor(&self, idx: usize) -> (Tensor, Spatial) {
        let e = &self.elements[idx];
        let (w, h) = (e.camera.width, e.camera.height);
        let n = w * h;
        let mut data = vec![0.0; 9 * n];
        for p in 0..n {
            data[p] = e.image[3 * p];
            data[n + p] = e.image[3 * p + 1];
            data[2 * n + p] = e.image[3 * p + 2];
        }
        for c in 0..3 {
            let v = e.camera.position[c];
            data[(3 + c) * n..(4 + c) * n].fill(v);
        }
        for i in 0..h {
            for j in 0..w {
                let ray = pixel_to_ray(&e.camera, i, j).expect("pixel in range");
                let p = i * w + j;
                data[6 * n + p] = ray.direction.x;
                data[7 * n + p] = ray.direction.y;
                data[8 * n + p] = ray.direction.z;
            }
        }
        (Tensor::new(9, n, data), Spatial { h, w })
    }
}

/// Context embedding `h`: pooled vector or spatial map (positions as rows).
#[derive(Clone)]
pub enum ContextEmbedding {
    Vector(Var),
    Map { var: Var, hw: usize },
}

impl ContextEmbedding {
    pub fn rows(&self) -> usize {
        match self {
            ContextEmbedding::Vector(_) => 1,
            ContextEmbedding::Map { var, .. } => var.rows(),
        }
    }

    fn var(&self) -> &Var {
        match self {
            ContextEmbedding::Vector(v) => v,
            ContextEmbedding::Map { var, .. } => var,
        }
    }
}

/// Pre-activation residual block (stride on the first conv).
#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl ResBlock {
    fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        ResBlock {
            conv1: Conv::init(store, rng, &format!("{name}.conv1"), c_in, c_out, 3, stride, Init::He),
            conv2: Conv::init(store, rng, &format!("{name}.conv2"), c_out, c_out, 3, 1, Init::He),
            shortcut: (stride != 1 || c_in != c_out).then(|| {
                Conv::init(store, rng, &format!("{name}.shortcut"), c_in, c_out, 1, stride, Init::He)
            }),
        }
    }

    fn forward(&self, ctx: &GraphCtx, x: &Var, sp: Spatial) -> (Var, Spatial) {
        let h = x.swish();
        let (h, sp2) = self.conv1.forward(ctx, &h, sp);
        let h = h.swish();
        let (h, _) = self.conv2.forward(ctx, &h, sp2);
        let sc = match &self.shortcut {
            Some(conv) => conv.forward(ctx, x, sp).0,
            None => x.clone(),
        };
        (h.add(&sc), sp2)
    }
}

/// Encoder layout: a strided stem followed by residual block groups.
#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    /// `(blocks, first stride, channels)` per group.
    pub groups: Vec<(usize, usize, usize)>,
    /// Global average pooling (vector latents) vs. spatial map output.
    pub pooled: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stem_channels: 32,
            groups: vec![(3, 2, 64), (7, 1, 64)],
            pooled: true,
        }
    }
}

impl EncoderConfig {
    pub fn out_channels(&self) -> usize {
        self.groups
            .last()
            .map(|g| g.2)
            .unwrap_or(self.stem_channels)
    }
}

/// Shared convolutional context encoder.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    stem1: Conv,
    stem2: Conv,
    blocks: Vec<ResBlock>,
    pub cfg: EncoderConfig,
}

impl ContextEncoder {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &EncoderConfig,
    ) -> Self {
        let stem1 = Conv::init(store, rng, &format!("{name}.stem1"), 9, cfg.stem_channels, 3, 2, Init::He);
        let stem2 = Conv::init(
            store,
            rng,
            &format!("{name}.stem2"),
            cfg.stem_channels,
            cfg.stem_channels,
            3,
            2,
            Init::He,
        );
        let mut blocks = Vec::new();
        let mut c_in = cfg.stem_channels;
        for (g, &(n_blocks, stride, channels)) in cfg.groups.iter().enumerate() {
            for b in 0..n_blocks {
                let s = if b == 0 { stride } else { 1 };
                blocks.push(ResBlock::init(
                    store,
                    rng,
                    &format!("{name}.g{g}.b{b}"),
                    c_in,
                    channels,
                    s,
                ));
                c_in = channels;
            }
        }
        ContextEncoder {
            stem1,
            stem2,
            blocks,
            cfg: cfg.clone(),
        }
    }

    fn encode_one(&self, ctx: &GraphCtx, input: &Var, sp: Spatial) -> (Var, Spatial) {
        let (h, sp) = self.stem1.forward(ctx, input, sp);
        let h = h.swish();
        let (mut h, mut sp) = self.stem2.forward(ctx, &h, sp);
        for block in &self.blocks {
            let (h2, sp2) = block.forward(ctx, &h, sp);
            h = h2;
            sp = sp2;
        }
        (h.swish(), sp)
    }
}

/// Encodes a context set: each element through the shared encoder, outputs
/// averaged over elements, then pooled (vector) or transposed to a
/// positions-by-channels map.
pub fn encode_context(
    encoder: &ContextEncoder,
    ctx: &GraphCtx,
    context: &ContextSet,
) -> Result<ContextEmbedding> {
    let mut mean: Option<Var> = None;
    let mut out_sp = Spatial { h: 0, w: 0 };
    for idx in 0..context.len() {
        let (input, sp) = context.element_tensor(idx);
        let input = ctx.constant(input);
        let (h, sp) = encoder.encode_one(ctx, &input, sp);
        out_sp = sp;
        mean = Some(match mean {
            None => h,
            Some(acc) => acc.add(&h),
        });
    }
    let mean = mean
        .expect("nonempty context")
        .mul_scalar(1.0 / context.len() as f64);
    if encoder.cfg.pooled {
        // (C, HW) -> per-channel means -> 1 x C.
        let pooled = mean
            .sum_rows()
            .mul_scalar(1.0 / out_sp.len() as f64)
            .transpose();
        Ok(ContextEmbedding::Vector(pooled))
    } else {
        if out_sp.h != out_sp.w {
            return Err(Error::config("map embeddings require square outputs"));
        }
        Ok(ContextEmbedding::Map {
            var: mean.transpose(),
            hw: out_sp.h,
        })
    }
}

/// Diagonal Gaussian posterior parameters on the tape.
#[derive(Clone)]
pub struct PosteriorParams {
    pub mean: Var,
    pub std: Var,
}

impl PosteriorParams {
    pub fn latent_dim(&self) -> usize {
        self.mean.cols()
    }
}

/// Splits unconstrained `lambda` (`rows x 2D`) into mean and std, with
/// softplus keeping the std strictly positive.
pub fn split_posterior(lambda: &Var) -> PosteriorParams {
    let d = lambda.cols() / 2;
    PosteriorParams {
        mean: lambda.slice_cols(0, d),
        std: lambda.slice_cols(d, 2 * d).softplus(),
    }
}

/// Feed-forward posterior head `lambda = MLP(h)`, applied element-wise over
/// positions when `h` is a map.
pub fn posterior_from_embedding(head: &Mlp, ctx: &GraphCtx, h: &ContextEmbedding) -> Var {
    head.forward(ctx, h.var())
}

/// Reparameterized draw `mean + std * eps` with `eps ~ N(0, I)`; gradients
/// flow into both parameters. `map_hw` selects the latent shape: `None` for
/// a vector, `Some(hw)` for an `hw x hw` spatial map.
pub fn sample_posterior(
    ctx: &GraphCtx,
    params: &PosteriorParams,
    map_hw: Option<usize>,
    rng: &mut impl Rng,
) -> LatentVar {
    let rows = params.mean.rows();
    let cols = params.mean.cols();
    let eps: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            (-2.0 * u1.ln()).sqrt() * u2.cos()
        })
        .collect();
    let eps = ctx.constant(Tensor::new(rows, cols, eps));
    let z = params.mean.add(&params.std.mul(&eps));
    match map_hw {
        None => {
            assert_eq!(rows, 1, "vector latent expects a single posterior row");
            LatentVar::Vector(z)
        }
        Some(hw) => {
            assert_eq!(rows, hw * hw, "map latent row count mismatch");
            LatentVar::Map { var: z, hw }
        }
    }
}

/// The recurrent refinement network.
#[derive(Debug, Clone)]
pub struct RefineNet {
    cell: LstmCell,
    proj: Linear,
    /// Sign-preserving log-scaling of the incoming gradient.
    pub log_scale_grad: bool,
}

impl RefineNet {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        embed_dim: usize,
        lambda_dim: usize,
        hidden: usize,
    ) -> Self {
        RefineNet {
            cell: LstmCell::init(store, rng, &format!("{name}.cell"), embed_dim + lambda_dim, hidden),
            // Zero-initialized projection: refinement starts as the identity.
            proj: Linear::init(store, rng, &format!("{name}.proj"), hidden, lambda_dim, Init::Zeros),
            log_scale_grad: true,
        }
    }
}

/// Refinement loop state.
pub struct RefinementState {
    /// Unconstrained posterior parameters, `rows x 2D`.
    pub lambda: Var,
    hidden: (Var, Var),
    pub step: usize,
}

impl RefinementState {
    /// `lambda_0 = 0` with a zero recurrent state.
    pub fn zero(ctx: &GraphCtx, net: &RefineNet, rows: usize, lambda_dim: usize) -> Self {
        RefinementState {
            lambda: ctx.constant(Tensor::zeros(rows, lambda_dim)),
            hidden: net.cell.zero_state(ctx, rows),
            step: 0,
        }
    }
}

/// One refinement update `lambda + proj(LSTM(h, grad))`.
///
/// `grad_lambda` is the detached objective gradient; training gradients flow
/// through `lambda`, the cell, and the embedding, but not into the gradient
/// signal itself.
pub fn refine_step(
    ctx: &GraphCtx,
    net: &RefineNet,
    state: RefinementState,
    h: &ContextEmbedding,
    grad_lambda: &Tensor,
) -> RefinementState {
    assert_eq!(grad_lambda.rows(), state.lambda.rows());
    assert_eq!(grad_lambda.cols(), state.lambda.cols());
    let grad = if net.log_scale_grad {
        let scaled: Vec<f64> = grad_lambda
            .data()
            .iter()
            .map(|&g| g.abs().ln_1p() * g.signum())
            .collect();
        Tensor::new(grad_lambda.rows(), grad_lambda.cols(), scaled)
    } else {
        grad_lambda.clone()
    };
    let grad = ctx.constant(grad);
    let input = Var::concat_cols(&[h.var(), &grad]);
    let (h_new, c_new) = net.cell.step(ctx, &input, &state.hidden.0, &state.hidden.1);
    let delta = net.proj.forward(ctx, &h_new);
    RefinementState {
        lambda: state.lambda.add(&delta),
        hidden: (h_new, c_new),
        step: state.step + 1,
    }
}

/// Gradient oracle for iterative inference: maps current `lambda` values to
/// the detached gradient of the objective estimate w.r.t. `lambda`.
pub type LambdaGradOracle<'a> = dyn FnMut(&Tensor, usize) -> Result<Tensor> + 'a;

/// Inference driver.
///
/// `steps == 0` is the plain amortized path (`lambda = MLP(h)`); `steps >= 1`
/// starts from `lambda_0 = 0` and applies `refine_step` with gradients from
/// the oracle. Returns the final unconstrained `lambda`.
#[allow(clippy::too_many_arguments)]
pub fn infer(
    ctx: &GraphCtx,
    encoder: &ContextEncoder,
    head: &Mlp,
    refine: Option<&RefineNet>,
    context: &ContextSet,
    steps: usize,
    lambda_dim: usize,
    grad_oracle: &mut LambdaGradOracle,
) -> Result<Var> {
    INFER_CALLS.with(|c| c.set(c.get() + 1));
    let h = encode_context(encoder, ctx, context)?;
    if steps == 0 {
        return Ok(posterior_from_embedding(head, ctx, &h));
    }
    let net = refine.ok_or_else(|| Error::config("iterative inference without a refinement net"))?;
    let mut state = RefinementState::zero(ctx, net, h.rows(), lambda_dim);
    for t in 0..steps {
        let grad = grad_oracle(&state.lambda.value(), t)?;
        state = refine_step(ctx, net, state, &h, &grad);
    }
    Ok(state.lambda)
}
