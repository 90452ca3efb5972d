//! Scene functions: the unconditional radiance field and its
//! latent-conditioned variants.
//!
//! A field maps an encoded ray point `(x, d)` to `((r, g, b), sigma)`. The
//! density trunk consumes the encoded position only (with a skip connection
//! of the encoded position into a configurable trunk layer); the color branch
//! consumes trunk features plus the encoded direction. Volume density
//! therefore never depends on the view direction.
//!
//! Conditioning mechanisms on the per-scene latent `z`:
//! * `Shift` — `z` concatenated with the network input (first trunk layer).
//! * `ShiftAll` — `z` concatenated with the inputs to all hidden layers.
//! * `AinAll` — per-layer learned scale/shift of hidden-layer inputs,
//!   parameterized as `1 + delta` so a zero projection is the identity.
//! * `Attention` — hidden features attend to a spatial latent map; each
//!   attention block reads its own channel slice of the map.

use nalgebra::Vector3;
use rand::Rng;

use crate::geometry::{encode_input, EncodingConfig};
use crate::nn::{Act, Conv, GraphCtx, Init, Linear, Mlp, ParamStore};
use crate::tape::{Spatial, Tensor, Var};
use crate::{Error, Result};

/// One field input: a world-space point with a unit view direction.
#[derive(Debug, Clone, Copy)]
pub struct RadianceQuery {
    pub position: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl RadianceQuery {
    pub fn new(position: Vector3<f64>, direction: Vector3<f64>) -> Result<Self> {
        if (direction.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::input("query direction must be unit length"));
        }
        Ok(RadianceQuery {
            position,
            direction,
        })
    }
}

/// One field response.
#[derive(Debug, Clone, Copy)]
pub struct RadianceOutput {
    pub rgb: [f64; 3],
    pub sigma: f64,
}

/// How the latent conditions the scene function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningMode {
    /// Unconditional field.
    None,
    Shift,
    ShiftAll,
    AinAll,
    Attention,
}

impl ConditioningMode {
    pub fn wants_map_latent(&self) -> bool {
        matches!(self, ConditioningMode::Attention)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ConditioningMode::None),
            "shift" => Ok(ConditioningMode::Shift),
            "shift_all" => Ok(ConditioningMode::ShiftAll),
            "ain_all" => Ok(ConditioningMode::AinAll),
            "attention" => Ok(ConditioningMode::Attention),
            other => Err(Error::config(format!("unknown conditioning mode: {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConditioningMode::None => "none",
            ConditioningMode::Shift => "shift",
            ConditioningMode::ShiftAll => "shift_all",
            ConditioningMode::AinAll => "ain_all",
            ConditioningMode::Attention => "attention",
        }
    }
}

/// A per-scene latent on the tape: a vector for the MLP conditioners or a
/// spatial `(hw*hw) x channels` map (positions as rows) for attention.
#[derive(Clone)]
pub enum LatentVar {
    Vector(Var),
    Map { var: Var, hw: usize },
}

impl LatentVar {
    pub fn dim(&self) -> usize {
        match self {
            LatentVar::Vector(v) => v.cols(),
            LatentVar::Map { var, .. } => var.cols(),
        }
    }
}

/// Plain latent values (outside any tape), e.g. prior draws for rendering.
/// Map data is position-major: `data[pos * channels + c]`.
#[derive(Debug, Clone)]
pub enum LatentSample {
    Vector(Vec<f64>),
    Map {
        channels: usize,
        hw: usize,
        data: Vec<f64>,
    },
}

impl LatentSample {
    pub fn len(&self) -> usize {
        match self {
            LatentSample::Vector(v) => v.len(),
            LatentSample::Map { data, .. } => data.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_var(&self, ctx: &GraphCtx) -> LatentVar {
        match self {
            LatentSample::Vector(v) => {
                LatentVar::Vector(ctx.constant(Tensor::row(v.clone())))
            }
            LatentSample::Map { channels, hw, data } => LatentVar::Map {
                var: ctx.constant(Tensor::new(hw * hw, *channels, data.clone())),
                hw: *hw,
            },
        }
    }
}

/// Latent pre-processing applied before the latent reaches the scene
/// function: a small MLP for vector latents, a small CNN for map latents, or
/// nothing.
#[derive(Debug, Clone)]
pub enum LatentPreproc {
    Identity,
    Mlp(Mlp),
    Cnn { convs: Vec<Conv>, hw: usize },
}

impl LatentPreproc {
    pub fn init_mlp(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        latent_dim: usize,
        hidden: &[usize],
    ) -> Self {
        if hidden.is_empty() {
            return LatentPreproc::Identity;
        }
        let mut dims = vec![latent_dim];
        dims.extend_from_slice(hidden);
        LatentPreproc::Mlp(Mlp::init(store, rng, name, &dims, Act::Relu, Init::He))
    }

    pub fn init_cnn(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        latent_channels: usize,
        hw: usize,
        hidden: &[usize],
        out_channels: usize,
    ) -> Self {
        if hidden.is_empty() && out_channels == latent_channels {
            return LatentPreproc::Identity;
        }
        let mut channels = vec![latent_channels];
        channels.extend_from_slice(hidden);
        channels.push(out_channels);
        let convs = (0..channels.len() - 1)
            .map(|i| {
                Conv::init(
                    store,
                    rng,
                    &format!("{name}.{i}"),
                    channels[i],
                    channels[i + 1],
                    3,
                    1,
                    Init::He,
                )
            })
            .collect();
        LatentPreproc::Cnn { convs, hw }
    }

    /// Channel count of the pre-processed latent given the raw latent width.
    pub fn out_dim(&self, latent_dim: usize) -> usize {
        match self {
            LatentPreproc::Identity => latent_dim,
            LatentPreproc::Mlp(mlp) => mlp.layers.last().unwrap().out_dim,
            LatentPreproc::Cnn { convs, .. } => convs.last().unwrap().c_out,
        }
    }
}

/// Conditioning signal ready for field evaluation.
#[derive(Clone)]
pub enum Conditioning {
    None,
    /// Pre-processed latent vector, `1 x D`.
    Vector(Var),
    /// Per-attention-block channel slices, each `tokens x slice_channels`.
    Slices(Vec<Var>),
}

/// Builds the conditioning signal for `mode` from a latent.
///
/// Vector modes pre-process the latent with the configured transform.
/// Attention pre-processes the map with a small CNN, flattens it to
/// `H_z*W_z` tokens, and partitions the channels into one slice per
/// attention block (floor division, remainder assigned to the last slice).
pub fn make_conditioning(
    ctx: &GraphCtx,
    mode: ConditioningMode,
    z: &LatentVar,
    preproc: &LatentPreproc,
    n_blocks: usize,
) -> Result<Conditioning> {
    match (mode, z) {
        (ConditioningMode::None, _) => Ok(Conditioning::None),
        (
            ConditioningMode::Shift | ConditioningMode::ShiftAll | ConditioningMode::AinAll,
            LatentVar::Vector(v),
        ) => {
            let pre = match preproc {
                LatentPreproc::Identity => v.clone(),
                LatentPreproc::Mlp(mlp) => mlp.forward(ctx, v),
                LatentPreproc::Cnn { .. } => {
                    return Err(Error::config(
                        "CNN latent pre-processing requires a map latent",
                    ))
                }
            };
            Ok(Conditioning::Vector(pre))
        }
        (ConditioningMode::Attention, LatentVar::Map { var, hw }) => {
            // The latent map arrives position-major (tokens x channels); the
            // conv preprocessing runs channel-major.
            let tokens = match preproc {
                LatentPreproc::Identity => var.clone(),
                LatentPreproc::Cnn { convs, hw: chw } => {
                    if chw != hw {
                        return Err(Error::config("latent map size mismatch"));
                    }
                    let sp = Spatial { h: *hw, w: *hw };
                    let mut h = var.transpose();
                    for (i, conv) in convs.iter().enumerate() {
                        let (y, _) = conv.forward(ctx, &h, sp);
                        h = if i + 1 < convs.len() { y.relu() } else { y };
                    }
                    h.transpose()
                }
                LatentPreproc::Mlp(_) => {
                    return Err(Error::config(
                        "MLP latent pre-processing requires a vector latent",
                    ))
                }
            };
            let channels = tokens.cols();
            if n_blocks == 0 || channels < n_blocks {
                return Err(Error::config(format!(
                    "cannot split {channels} latent channels across {n_blocks} attention blocks"
                )));
            }
            let each = channels / n_blocks;
            let mut slices = Vec::with_capacity(n_blocks);
            for b in 0..n_blocks {
                let start = b * each;
                let end = if b + 1 == n_blocks { channels } else { start + each };
                slices.push(tokens.slice_cols(start, end));
            }
            Ok(Conditioning::Slices(slices))
        }
        _ => Err(Error::config(
            "latent shape does not match the conditioning mode",
        )),
    }
}

/// Multi-head dot-product attention block.
///
/// The per-point features are projected to low-dimensional queries; keys and
/// values are projections of the latent-slice tokens. The attention read is
/// concatenated with the block input and passed through the block's single
/// linear layer (no layer norm).
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    out: Linear,
    pub heads: usize,
    pub dim_per_head: usize,
}

impl AttentionBlock {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        slice_channels: usize,
        heads: usize,
        dim_per_head: usize,
        out_dim: usize,
    ) -> Self {
        let proj = heads * dim_per_head;
        AttentionBlock {
            wq: Linear::init(store, rng, &format!("{name}.q"), in_dim, proj, Init::Glorot),
            wk: Linear::init(
                store,
                rng,
                &format!("{name}.k"),
                slice_channels,
                proj,
                Init::Glorot,
            ),
            wv: Linear::init(
                store,
                rng,
                &format!("{name}.v"),
                slice_channels,
                proj,
                Init::Glorot,
            ),
            out: Linear::init(
                store,
                rng,
                &format!("{name}.out"),
                in_dim + proj,
                out_dim,
                Init::He,
            ),
            heads,
            dim_per_head,
        }
    }

    /// The attention read: `points x (heads * dim_per_head)`.
    pub fn attend(&self, ctx: &GraphCtx, x: &Var, slice: &Var) -> Var {
        let q = self.wq.forward(ctx, x);
        let k = self.wk.forward(ctx, slice);
        let v = self.wv.forward(ctx, slice);
        let scale = 1.0 / (self.dim_per_head as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let lo = h * self.dim_per_head;
            let hi = lo + self.dim_per_head;
            let qh = q.slice_cols(lo, hi);
            let kh = k.slice_cols(lo, hi);
            let vh = v.slice_cols(lo, hi);
            let logits = qh.matmul(&kh.transpose()).mul_scalar(scale);
            let weights = logits.softmax_rows();
            head_outs.push(weights.matmul(&vh));
        }
        let refs: Vec<&Var> = head_outs.iter().collect();
        Var::concat_cols(&refs)
    }

    /// Full block: attend, concatenate with the input, one linear layer.
    pub fn forward(&self, ctx: &GraphCtx, x: &Var, slice: &Var) -> Var {
        let read = self.attend(ctx, x, slice);
        self.out.forward(ctx, &Var::concat_cols(&[x, &read])).relu()
    }

    /// Attention weights for one head (test instrumentation).
    pub fn attention_weights(&self, ctx: &GraphCtx, x: &Var, slice: &Var, head: usize) -> Var {
        let q = self.wq.forward(ctx, x);
        let k = self.wk.forward(ctx, slice);
        let lo = head * self.dim_per_head;
        let hi = lo + self.dim_per_head;
        let scale = 1.0 / (self.dim_per_head as f64).sqrt();
        q.slice_cols(lo, hi)
            .matmul(&k.slice_cols(lo, hi).transpose())
            .mul_scalar(scale)
            .softmax_rows()
    }
}

/// Architecture and conditioning configuration for one scene function.
#[derive(Debug, Clone)]
pub struct FieldConfig {
    pub mode: ConditioningMode,
    pub encoding: EncodingConfig,
    /// When false, the color branch never sees the view direction.
    pub use_directions: bool,
    pub density_layers: usize,
    pub color_layers: usize,
    pub hidden: usize,
    /// 1-based trunk layer that receives the encoded position again.
    pub skip_layer: usize,
    /// Latent width (vector) or latent map channels (attention).
    pub latent_dim: usize,
    /// Latent map side length for attention conditioning.
    pub latent_hw: usize,
    /// Channels of the pre-processed latent entering the field.
    pub cond_dim: usize,
    pub attn_heads: usize,
    pub attn_dim_per_head: usize,
    /// Training-time Gaussian perturbation of pre-activation density.
    pub density_noise_std: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            mode: ConditioningMode::Shift,
            encoding: EncodingConfig::default(),
            use_directions: true,
            density_layers: 2,
            color_layers: 4,
            hidden: 256,
            skip_layer: 2,
            latent_dim: 128,
            latent_hw: 8,
            cond_dim: 128,
            attn_heads: 4,
            attn_dim_per_head: 32,
            density_noise_std: 0.01,
        }
    }
}

impl FieldConfig {
    pub fn n_attention_blocks(&self) -> usize {
        if self.mode == ConditioningMode::Attention {
            self.density_layers + self.color_layers
        } else {
            0
        }
    }

    fn enc_pos_len(&self) -> usize {
        self.encoding.position_len()
    }

    fn enc_dir_len(&self) -> usize {
        if self.use_directions {
            self.encoding.direction_len()
        } else {
            0
        }
    }
}

/// Per-layer AIN modulation heads (zero-initialized so the initial
/// modulation is the identity).
#[derive(Debug, Clone)]
struct AinMod {
    scale: Linear,
    shift: Linear,
}

impl AinMod {
    fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cond_dim: usize,
        width: usize,
    ) -> Self {
        AinMod {
            scale: Linear::init(store, rng, &format!("{name}.scale"), cond_dim, width, Init::Zeros),
            shift: Linear::init(store, rng, &format!("{name}.shift"), cond_dim, width, Init::Zeros),
        }
    }

    fn apply(&self, ctx: &GraphCtx, x: &Var, cond: &Var) -> Var {
        let scale = self.scale.forward(ctx, cond).add_scalar(1.0);
        let shift = self.shift.forward(ctx, cond);
        x.mul_rowvec(&scale).add_rowvec(&shift)
    }
}

/// Parameters of one scene function instance (coarse or fine).
#[derive(Debug, Clone)]
pub struct FieldParams {
    pub cfg: FieldConfig,
    trunk: Vec<Linear>,
    color: Vec<Linear>,
    sigma_head: Mlp,
    color_head: Mlp,
    trunk_attn: Vec<AttentionBlock>,
    color_attn: Vec<AttentionBlock>,
    ain: Vec<AinMod>,
}

/// Batched, encoded field inputs.
pub struct QueryBatch {
    pub n: usize,
    pub enc_pos: Tensor,
    pub enc_dir: Option<Tensor>,
}

impl QueryBatch {
    pub fn encode(
        positions: &[Vector3<f64>],
        directions: &[Vector3<f64>],
        cfg: &FieldConfig,
    ) -> Self {
        assert_eq!(positions.len(), directions.len());
        let n = positions.len();
        let lp = cfg.encoding.l_position;
        let mut pos_data = Vec::with_capacity(n * cfg.enc_pos_len());
        for p in positions {
            pos_data.extend(encode_input(&[p.x, p.y, p.z], lp));
        }
        let enc_pos = Tensor::new(n, cfg.enc_pos_len(), pos_data);
        let enc_dir = if cfg.use_directions {
            let ld = cfg.encoding.l_direction;
            let mut dir_data = Vec::with_capacity(n * cfg.enc_dir_len());
            for d in directions {
                dir_data.extend(encode_input(&[d.x, d.y, d.z], ld));
            }
            Some(Tensor::new(n, cfg.enc_dir_len(), dir_data))
        } else {
            None
        };
        QueryBatch { n, enc_pos, enc_dir }
    }

    pub fn from_queries(queries: &[RadianceQuery], cfg: &FieldConfig) -> Self {
        let positions: Vec<_> = queries.iter().map(|q| q.position).collect();
        let directions: Vec<_> = queries.iter().map(|q| q.direction).collect();
        QueryBatch::encode(&positions, &directions, cfg)
    }
}

/// Field outputs on the tape.
pub struct FieldOut {
    /// `n x 3`, sigmoid-bounded.
    pub rgb: Var,
    /// `n x 1`, softplus-activated.
    pub sigma: Var,
}

/// Broadcasts a `1 x d` row to `n` rows (differentiable through matmul).
fn tile_rows(ctx: &GraphCtx, v: &Var, n: usize) -> Var {
    let ones = ctx.constant(Tensor::new(n, 1, vec![1.0; n]));
    ones.matmul(v)
}

impl FieldParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: &FieldConfig,
    ) -> Self {
        let cfg = cfg.clone();
        let hidden = cfg.hidden;
        let cond = cfg.cond_dim;
        let mut trunk = Vec::new();
        let mut color = Vec::new();
        let mut trunk_attn = Vec::new();
        let mut color_attn = Vec::new();
        let mut ain = Vec::new();
        let mut ain_widths = Vec::new();

        if cfg.mode == ConditioningMode::Attention {
            let n_blocks = cfg.n_attention_blocks();
            let each = cond / n_blocks;
            let slice_w = |b: usize| {
                if b + 1 == n_blocks {
                    cond - each * (n_blocks - 1)
                } else {
                    each
                }
            };
            for l in 0..cfg.density_layers {
                let in_dim = if l == 0 { cfg.enc_pos_len() } else { hidden };
                trunk_attn.push(AttentionBlock::init(
                    store,
                    rng,
                    &format!("{prefix}.trunk_attn.{l}"),
                    in_dim,
                    slice_w(l),
                    cfg.attn_heads,
                    cfg.attn_dim_per_head,
                    hidden,
                ));
            }
            for l in 0..cfg.color_layers {
                let in_dim = if l == 0 {
                    hidden + cfg.enc_dir_len()
                } else {
                    hidden
                };
                color_attn.push(AttentionBlock::init(
                    store,
                    rng,
                    &format!("{prefix}.color_attn.{l}"),
                    in_dim,
                    slice_w(cfg.density_layers + l),
                    cfg.attn_heads,
                    cfg.attn_dim_per_head,
                    hidden,
                ));
            }
        } else {
            for l in 0..cfg.density_layers {
                let mut in_dim = if l == 0 { cfg.enc_pos_len() } else { hidden };
                if l + 1 == cfg.skip_layer && l > 0 {
                    in_dim += cfg.enc_pos_len();
                }
                match cfg.mode {
                    ConditioningMode::Shift if l == 0 => in_dim += cond,
                    ConditioningMode::ShiftAll => in_dim += cond,
                    _ => {}
                }
                if cfg.mode == ConditioningMode::AinAll {
                    ain_widths.push(in_dim);
                }
                trunk.push(Linear::init(
                    store,
                    rng,
                    &format!("{prefix}.trunk.{l}"),
                    in_dim,
                    hidden,
                    Init::He,
                ));
            }
            for l in 0..cfg.color_layers {
                let mut in_dim = if l == 0 {
                    hidden + cfg.enc_dir_len()
                } else {
                    hidden
                };
                if cfg.mode == ConditioningMode::ShiftAll {
                    in_dim += cond;
                }
                if cfg.mode == ConditioningMode::AinAll {
                    ain_widths.push(in_dim);
                }
                color.push(Linear::init(
                    store,
                    rng,
                    &format!("{prefix}.color.{l}"),
                    in_dim,
                    hidden,
                    Init::He,
                ));
            }
        }

        let head_dims: Vec<usize> = if cfg.mode == ConditioningMode::Attention {
            // A 2-layer head reads out density and color from block features.
            vec![hidden, hidden]
        } else {
            vec![hidden]
        };
        let mut sigma_dims = head_dims.clone();
        sigma_dims.push(1);
        let mut color_dims = head_dims;
        color_dims.push(3);
        let sigma_head = Mlp::init(
            store,
            rng,
            &format!("{prefix}.sigma_head"),
            &sigma_dims,
            Act::Relu,
            Init::Glorot,
        );
        let color_head = Mlp::init(
            store,
            rng,
            &format!("{prefix}.color_head"),
            &color_dims,
            Act::Relu,
            Init::Glorot,
        );

        for (i, w) in ain_widths.into_iter().enumerate() {
            ain.push(AinMod::init(
                store,
                rng,
                &format!("{prefix}.ain.{i}"),
                cond,
                w,
            ));
        }

        FieldParams {
            cfg,
            trunk,
            color,
            sigma_head,
            color_head,
            trunk_attn,
            color_attn,
            ain,
        }
    }

    /// Evaluates the field on a query batch.
    ///
    /// `noise`, when present, is added to the pre-activation density
    /// (training-time perturbation; pass `None` at evaluation).
    pub fn evaluate(
        &self,
        ctx: &GraphCtx,
        cond: &Conditioning,
        queries: &QueryBatch,
        noise: Option<&Tensor>,
    ) -> Result<FieldOut> {
        if queries.n == 0 {
            return Err(Error::input("empty query batch"));
        }
        match (self.cfg.mode, cond) {
            (ConditioningMode::None, Conditioning::None) => {}
            (
                ConditioningMode::Shift | ConditioningMode::ShiftAll | ConditioningMode::AinAll,
                Conditioning::Vector(v),
            ) => {
                if v.cols() != self.cfg.cond_dim {
                    return Err(Error::config(format!(
                        "conditioning width {} does not match configured {}",
                        v.cols(),
                        self.cfg.cond_dim
                    )));
                }
            }
            (ConditioningMode::Attention, Conditioning::Slices(s)) => {
                if s.len() != self.cfg.n_attention_blocks() {
                    return Err(Error::config(format!(
                        "{} latent slices for {} attention blocks",
                        s.len(),
                        self.cfg.n_attention_blocks()
                    )));
                }
            }
            _ => {
                return Err(Error::config(
                    "conditioning signal does not match the conditioning mode",
                ))
            }
        }

        let n = queries.n;
        let enc_pos = ctx.constant(queries.enc_pos.clone());
        let cond_tiled = match cond {
            Conditioning::Vector(v) => Some(tile_rows(ctx, v, n)),
            _ => None,
        };

        let features = match self.cfg.mode {
            ConditioningMode::Attention => {
                let Conditioning::Slices(slices) = cond else { unreachable!() };
                let mut h = enc_pos.clone();
                for (l, block) in self.trunk_attn.iter().enumerate() {
                    h = block.forward(ctx, &h, &slices[l]);
                }
                h
            }
            _ => {
                let mut ain_idx = 0;
                let mut h = enc_pos.clone();
                for (l, layer) in self.trunk.iter().enumerate() {
                    let mut input = h;
                    if l + 1 == self.cfg.skip_layer && l > 0 {
                        input = Var::concat_cols(&[&input, &enc_pos]);
                    }
                    let shift_here = matches!(
                        (self.cfg.mode, l),
                        (ConditioningMode::Shift, 0) | (ConditioningMode::ShiftAll, _)
                    );
                    if shift_here {
                        input = Var::concat_cols(&[&input, cond_tiled.as_ref().unwrap()]);
                    }
                    if self.cfg.mode == ConditioningMode::AinAll {
                        let Conditioning::Vector(v) = cond else { unreachable!() };
                        input = self.ain[ain_idx].apply(ctx, &input, v);
                        ain_idx += 1;
                    }
                    h = layer.forward(ctx, &input).relu();
                }
                h
            }
        };

        let mut pre_sigma = self.sigma_head.forward(ctx, &features);
        if let Some(noise) = noise {
            pre_sigma = pre_sigma.add_const(noise);
        }
        let sigma = pre_sigma.softplus();

        let color_in = match &queries.enc_dir {
            Some(d) => {
                let enc_dir = ctx.constant(d.clone());
                Var::concat_cols(&[&features, &enc_dir])
            }
            None => features,
        };
        let color_features = match self.cfg.mode {
            ConditioningMode::Attention => {
                let Conditioning::Slices(slices) = cond else { unreachable!() };
                let mut h = color_in;
                for (l, block) in self.color_attn.iter().enumerate() {
                    h = block.forward(ctx, &h, &slices[self.cfg.density_layers + l]);
                }
                h
            }
            _ => {
                let mut ain_idx = self.trunk.len();
                let mut h = color_in;
                for layer in &self.color {
                    let mut input = h;
                    if self.cfg.mode == ConditioningMode::ShiftAll {
                        input = Var::concat_cols(&[&input, cond_tiled.as_ref().unwrap()]);
                    }
                    if self.cfg.mode == ConditioningMode::AinAll {
                        let Conditioning::Vector(v) = cond else { unreachable!() };
                        input = self.ain[ain_idx].apply(ctx, &input, v);
                        ain_idx += 1;
                    }
                    h = layer.forward(ctx, &input).relu();
                }
                h
            }
        };
        let rgb = self.color_head.forward(ctx, &color_features).sigmoid();

        Ok(FieldOut { rgb, sigma })
    }

    /// Evaluation-only convenience over plain query/response types.
    pub fn evaluate_values(
        &self,
        store: &ParamStore,
        latent: Option<&LatentSample>,
        preproc: &LatentPreproc,
        queries: &[RadianceQuery],
    ) -> Result<Vec<RadianceOutput>> {
        let ctx = GraphCtx::new(store, false, false);
        let cond = match latent {
            None => Conditioning::None,
            Some(z) => make_conditioning(
                &ctx,
                self.cfg.mode,
                &z.to_var(&ctx),
                preproc,
                self.cfg.n_attention_blocks(),
            )?,
        };
        let batch = QueryBatch::from_queries(queries, &self.cfg);
        let out = self.evaluate(&ctx, &cond, &batch, None)?;
        let rgb = out.rgb.value();
        let sigma = out.sigma.value();
        Ok((0..queries.len())
            .map(|i| RadianceOutput {
                rgb: [rgb.get(i, 0), rgb.get(i, 1), rgb.get(i, 2)],
                sigma: sigma.get(i, 0),
            })
            .collect())
    }

    /// Name of the final color layer's weight (used by tests that pin the
    /// zero-output behavior).
    pub fn color_head_output_names(&self) -> (String, String) {
        let last = self.color_head.layers.last().unwrap();
        (
            last.weight_name().to_string(),
            last.bias_name().unwrap().to_string(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::GraphCtx;

    fn unit(v: Vector3<f64>) -> Vector3<f64> {
        v.normalize()
    }

    fn small_cfg(mode: ConditioningMode) -> FieldConfig {
        FieldConfig {
            mode,
            encoding: EncodingConfig {
                l_position: 2,
                l_direction: 1,
            },
            use_directions: true,
            density_layers: 2,
            color_layers: 2,
            hidden: 16,
            skip_layer: 2,
            latent_dim: 8,
            latent_hw: 2,
            cond_dim: 8,
            attn_heads: 2,
            attn_dim_per_head: 4,
            density_noise_std: 0.01,
        }
    }

    fn queries(n: usize, seed: u64) -> Vec<RadianceQuery> {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, &[11]);
        (0..n)
            .map(|_| {
                let p = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                let d = unit(Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ));
                RadianceQuery::new(p, d).unwrap()
            })
            .collect()
    }

    fn latent_for(cfg: &FieldConfig) -> LatentSample {
        use rand::Rng;
        let mut rng = crate::rng::stream(3, &[12]);
        if cfg.mode.wants_map_latent() {
            let n = cfg.latent_dim * cfg.latent_hw * cfg.latent_hw;
            LatentSample::Map {
                channels: cfg.latent_dim,
                hw: cfg.latent_hw,
                data: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            }
        } else {
            LatentSample::Vector(
                (0..cfg.latent_dim)
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
            )
        }
    }

    #[test]
    fn zero_color_head_gives_mid_gray() {
        let cfg = small_cfg(ConditioningMode::None);
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(1, &[13]);
        let field = FieldParams::init(&mut store, &mut rng, "f", &cfg);
        let (w, b) = field.color_head_output_names();
        store.get_mut(&w).value.iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(&b).value.iter_mut().for_each(|v| *v = 0.0);
        let out = field
            .evaluate_values(&store, None, &LatentPreproc::Identity, &queries(5, 2))
            .unwrap();
        for o in out {
            assert_eq!(o.rgb, [0.5, 0.5, 0.5]);
        }
    }

    #[test]
    fn sigma_ignores_direction_bit_exactly() {
        for mode in [
            ConditioningMode::None,
            ConditioningMode::Shift,
            ConditioningMode::ShiftAll,
            ConditioningMode::AinAll,
            ConditioningMode::Attention,
        ] {
            let cfg = small_cfg(mode);
            let mut store = ParamStore::new();
            let mut rng = crate::rng::stream(2, &[14]);
            let field = FieldParams::init(&mut store, &mut rng, "f", &cfg);
            let latent = latent_for(&cfg);
            let z = (mode != ConditioningMode::None).then_some(&latent);
            let p = Vector3::new(0.3, -0.2, 0.5);
            let qa = RadianceQuery::new(p, unit(Vector3::new(1.0, 0.2, -0.4))).unwrap();
            let qb = RadianceQuery::new(p, unit(Vector3::new(-0.3, 0.9, 0.1))).unwrap();
            let out = field
                .evaluate_values(&store, z, &LatentPreproc::Identity, &[qa, qb])
                .unwrap();
            assert_eq!(out[0].sigma.to_bits(), out[1].sigma.to_bits(), "{mode:?}");
            assert_ne!(out[0].rgb, out[1].rgb, "{mode:?}: color should vary");
        }
    }

    #[test]
    fn outputs_respect_bounds() {
        let cfg = small_cfg(ConditioningMode::ShiftAll);
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(5, &[15]);
        let field = FieldParams::init(&mut store, &mut rng, "f", &cfg);
        let latent = latent_for(&cfg);
        let out = field
            .evaluate_values(&store, Some(&latent), &LatentPreproc::Identity, &queries(50, 6))
            .unwrap();
        for o in out {
            assert!(o.sigma >= 0.0);
            assert!(o.rgb.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    /// Shift conditioning with z = 0 must reproduce the unconditional field
    /// when the non-latent weight columns are shared.
    #[test]
    fn shift_with_zero_latent_matches_unconditional() {
        let base_cfg = small_cfg(ConditioningMode::None);
        let mut store_none = ParamStore::new();
        let mut rng = crate::rng::stream(7, &[16]);
        let field_none = FieldParams::init(&mut store_none, &mut rng, "f", &base_cfg);

        let shift_cfg = small_cfg(ConditioningMode::Shift);
        let mut store_shift = ParamStore::new();
        let mut rng2 = crate::rng::stream(8, &[17]);
        let field_shift = FieldParams::init(&mut store_shift, &mut rng2, "f", &shift_cfg);

        // Copy shared weights; the first trunk layer of the shift field has
        // extra rows (columns of the weight matrix live row-per-input) that
        // multiply z -- those stay as initialized and are silenced by z = 0.
        let names: Vec<String> = store_none.names().cloned().collect();
        for name in names {
            let src = store_none.get(&name).clone();
            let dst = store_shift.get_mut(&name);
            if src.value.len() == dst.value.len() {
                dst.value = src.value;
            } else {
                // trunk.0.w: (in_dim + cond) x hidden vs in_dim x hidden.
                assert_eq!(dst.rows, src.rows + shift_cfg.cond_dim);
                dst.value[..src.value.len()].copy_from_slice(&src.value);
            }
        }

        let qs = queries(9, 3);
        let zero = LatentSample::Vector(vec![0.0; shift_cfg.latent_dim]);
        let out_none = field_none
            .evaluate_values(&store_none, None, &LatentPreproc::Identity, &qs)
            .unwrap();
        let out_shift = field_shift
            .evaluate_values(&store_shift, Some(&zero), &LatentPreproc::Identity, &qs)
            .unwrap();
        for (a, b) in out_none.iter().zip(&out_shift) {
            assert!((a.sigma - b.sigma).abs() < 1e-12);
            for c in 0..3 {
                assert!((a.rgb[c] - b.rgb[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ain_zero_projection_is_identity_modulation() {
        // AIN heads are zero-initialized, so a fresh AinAll field with any z
        // behaves like the same weights without modulation.
        let cfg = small_cfg(ConditioningMode::AinAll);
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(9, &[18]);
        let field = FieldParams::init(&mut store, &mut rng, "f", &cfg);
        let qs = queries(4, 10);
        let za = LatentSample::Vector(vec![0.7; cfg.latent_dim]);
        let zb = LatentSample::Vector(vec![-0.3; cfg.latent_dim]);
        let oa = field
            .evaluate_values(&store, Some(&za), &LatentPreproc::Identity, &qs)
            .unwrap();
        let ob = field
            .evaluate_values(&store, Some(&zb), &LatentPreproc::Identity, &qs)
            .unwrap();
        for (a, b) in oa.iter().zip(&ob) {
            assert_eq!(a.sigma.to_bits(), b.sigma.to_bits());
        }
    }

    #[test]
    fn attention_slice_partition() {
        let mut cfg = small_cfg(ConditioningMode::Attention);
        cfg.latent_dim = 13; // 4 blocks -> 3,3,3,4
        cfg.cond_dim = 13;
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(11, &[19]);
        let _field = FieldParams::init(&mut store, &mut rng, "f", &cfg);
        let ctx = GraphCtx::new(&store, false, false);
        let latent = LatentSample::Map {
            channels: 13,
            hw: 2,
            data: (0..13 * 4).map(|i| i as f64).collect(),
        };
        let cond = make_conditioning(
            &ctx,
            cfg.mode,
            &latent.to_var(&ctx),
            &LatentPreproc::Identity,
            4,
        )
        .unwrap();
        let Conditioning::Slices(slices) = cond else {
            panic!()
        };
        assert_eq!(slices.len(), 4);
        assert_eq!(slices[0].cols(), 3);
        assert_eq!(slices[3].cols(), 4);
        for s in &slices {
            assert_eq!(s.rows(), 4); // H_z * W_z tokens
        }
    }

    #[test]
    fn conditioning_shape_mismatch_is_config_error() {
        let cfg = small_cfg(ConditioningMode::Attention);
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(12, &[20]);
        let _field = FieldParams::init(&mut store, &mut rng, "f", &cfg);
        let ctx = GraphCtx::new(&store, false, false);
        let vec_latent = LatentSample::Vector(vec![0.0; 8]);
        let err = make_conditioning(
            &ctx,
            ConditioningMode::Attention,
            &vec_latent.to_var(&ctx),
            &LatentPreproc::Identity,
            4,
        );
        assert!(matches!(err, Err(crate::Error::Config(_))));
        // Too few channels for the block count.
        let tiny = LatentSample::Map {
            channels: 2,
            hw: 2,
            data: vec![0.0; 8],
        };
        let err = make_conditioning(
            &ctx,
            ConditioningMode::Attention,
            &tiny.to_var(&ctx),
            &LatentPreproc::Identity,
            4,
        );
        assert!(matches!(err, Err(crate::Error::Config(_))));
    }

    #[test]
    fn attention_zero_values_pass_through() {
        let cfg = small_cfg(ConditioningMode::Attention);
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(13, &[21]);
        let block = AttentionBlock::init(&mut store, &mut rng, "b", 6, 5, 2, 4, 16);
        let ctx = GraphCtx::new(&store, false, false);
        let x = ctx.constant(Tensor::new(3, 6, vec![0.25; 18]));
        let zeros = ctx.constant(Tensor::zeros(4, 5));
        let read = block.attend(&ctx, &x, &zeros);
        assert!(read.value().data().iter().all(|v| *v == 0.0));
        // The full block then equals the linear layer applied to
        // concat(x, zeros).
        let manual = block
            .out
            .forward(&ctx, &Var::concat_cols(&[&x, &read]))
            .relu();
        let full = block.forward(&ctx, &x, &zeros);
        assert_eq!(manual.value().data(), full.value().data());
        let _ = cfg;
    }

    #[test]
    fn attention_uniform_keys_give_uniform_weights() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(14, &[22]);
        let block = AttentionBlock::init(&mut store, &mut rng, "b", 6, 5, 2, 4, 16);
        let ctx = GraphCtx::new(&store, false, false);
        let x = ctx.constant(Tensor::new(2, 6, vec![0.4; 12]));
        // Identical rows -> identical keys -> uniform softmax.
        let slice = ctx.constant(Tensor::new(4, 5, [0.3, -0.1, 0.8, 0.2, 0.5].repeat(4)));
        let w = block.attention_weights(&ctx, &x, &slice, 1);
        for v in w.value().data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_single_token_returns_its_value() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(15, &[23]);
        let block = AttentionBlock::init(&mut store, &mut rng, "b", 6, 5, 1, 4, 16);
        let ctx = GraphCtx::new(&store, false, false);
        let xa = ctx.constant(Tensor::new(1, 6, vec![0.9; 6]));
        let xb = ctx.constant(Tensor::new(1, 6, vec![-2.0; 6]));
        let token = ctx.constant(Tensor::new(1, 5, vec![0.3, 1.0, -0.7, 0.2, 0.05]));
        let ra = block.attend(&ctx, &xa, &token);
        let rb = block.attend(&ctx, &xb, &token);
        // Softmax over a singleton is 1 regardless of the query.
        assert_eq!(ra.value().data(), rb.value().data());
        let v = block.wv.forward(&ctx, &token);
        assert_eq!(ra.value().data(), v.value().data());
    }

    /// Gradient correctness on a toy field: d(rgb, sigma)/d(params, z)
    /// against central finite differences.
    #[test]
    fn field_gradients_match_finite_differences() {
        for mode in [
            ConditioningMode::Shift,
            ConditioningMode::AinAll,
            ConditioningMode::Attention,
        ] {
            let cfg = small_cfg(mode);
            let mut store = ParamStore::new();
            let mut rng = crate::rng::stream(16, &[24]);
            let field = FieldParams::init(&mut store, &mut rng, "f", &cfg);
            let latent = latent_for(&cfg);
            let qs = queries(3, 17);

            let loss_of = |store: &ParamStore, latent: &LatentSample| -> f64 {
                let ctx = GraphCtx::new(store, true, false);
                let cond = make_conditioning(
                    &ctx,
                    cfg.mode,
                    &latent.to_var(&ctx),
                    &LatentPreproc::Identity,
                    cfg.n_attention_blocks(),
                )
                .unwrap();
                let batch = QueryBatch::from_queries(&qs, &cfg);
                let out = field.evaluate(&ctx, &cond, &batch, None).unwrap();
                out.rgb.sum().add(&out.sigma.sum()).value().item()
            };

            // Tape gradients w.r.t. one weight tensor and the latent.
            let ctx = GraphCtx::new(&store, true, false);
            let zvar = match &latent {
                LatentSample::Vector(v) => LatentVar::Vector(ctx.graph.leaf(Tensor::row(v.clone()))),
                LatentSample::Map { channels, hw, data } => LatentVar::Map {
                    var: ctx.graph.leaf(Tensor::new(hw * hw, *channels, data.clone())),
                    hw: *hw,
                },
            };
            let z_id = match &zvar {
                LatentVar::Vector(v) => v.id(),
                LatentVar::Map { var, .. } => var.id(),
            };
            let cond = make_conditioning(
                &ctx,
                cfg.mode,
                &zvar,
                &LatentPreproc::Identity,
                cfg.n_attention_blocks(),
            )
            .unwrap();
            let batch = QueryBatch::from_queries(&qs, &cfg);
            let out = field.evaluate(&ctx, &cond, &batch, None).unwrap();
            let loss = out.rgb.sum().add(&out.sigma.sum());
            let mut grads = loss.backward();
            let z_grad = grads.take(z_id).expect("latent gradient missing");
            let gm = ctx.collect_grads(&mut grads);

            let h = 1e-5;
            // Latent gradient.
            for i in 0..latent.len().min(6) {
                let perturb = |delta: f64| {
                    let mut l = latent.clone();
                    match &mut l {
                        LatentSample::Vector(v) => v[i] += delta,
                        LatentSample::Map { data, .. } => data[i] += delta,
                    }
                    loss_of(&store, &l)
                };
                let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                let ad = z_grad[i];
                assert!(
                    (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6) < 1e-3,
                    "{mode:?} z[{i}]: ad {ad} fd {fd}"
                );
            }
            // One representative parameter tensor per mode.
            let pname = match mode {
                ConditioningMode::Attention => "f.trunk_attn.0.v.w",
                ConditioningMode::AinAll => "f.ain.0.scale.w",
                _ => "f.trunk.0.w",
            };
            let g = gm.get(pname).expect("param gradient missing").to_vec();
            for i in (0..g.len()).step_by(g.len().div_ceil(5).max(1)) {
                let mut plus = store.clone();
                plus.get_mut(pname).value[i] += h;
                let mut minus = store.clone();
                minus.get_mut(pname).value[i] -= h;
                let fd = (loss_of(&plus, &latent) - loss_of(&minus, &latent)) / (2.0 * h);
                assert!(
                    (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6) < 1e-3,
                    "{mode:?} {pname}[{i}]: ad {} fd {fd}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn density_noise_perturbs_before_activation() {
        let cfg = small_cfg(ConditioningMode::None);
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(21, &[25]);
        let field = FieldParams::init(&mut store, &mut rng, "f", &cfg);
        let qs = queries(4, 18);
        let batch = QueryBatch::from_queries(&qs, &cfg);
        let ctx = GraphCtx::new(&store, false, true);
        let clean = field
            .evaluate(&ctx, &Conditioning::None, &batch, None)
            .unwrap();
        let noise = Tensor::new(4, 1, vec![0.5, -0.5, 0.0, 1.0]);
        let noisy = field
            .evaluate(&ctx, &Conditioning::None, &batch, Some(&noise))
            .unwrap();
        // Zero-noise row matches, others differ.
        assert_eq!(
            clean.sigma.value().get(2, 0).to_bits(),
            noisy.sigma.value().get(2, 0).to_bits()
        );
        assert_ne!(clean.sigma.value().get(0, 0), noisy.sigma.value().get(0, 0));
        // rgb untouched by density noise.
        assert_eq!(clean.rgb.value().data(), noisy.rgb.value().data());
    }
}
