//! Trainable networks: a small ViT backbone, the set aggregation, and the
//! projector + prototype head, all with explicit backward passes.
//!
//! Activations are row-major `[rows, features]` matrices. A batch of `B`
//! images with `T` tokens each is laid out as `B * T` rows.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::real::{gelu, gelu_grad, gemm, softmax_inplace, Real, View, ViewMut};
use crate::seed::{self, tag};

const LN_EPS: f64 = 1e-6;
const NORMALIZE_EPS: f64 = 1e-12;
/// Number of trailing blocks whose class tokens form the inference features.
pub const FEATURE_LAYERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitConfig {
    /// Side length of global inputs; other sizes use interpolated position embeddings.
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// Output dimension of the prototype head.
    pub n_prototypes: usize,
    pub projector_hidden_dim: usize,
    pub bottleneck_dim: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 48,
            patch_size: 8,
            embed_dim: 96,
            depth: 4,
            n_heads: 4,
            mlp_ratio: 4,
            n_prototypes: 1024,
            projector_hidden_dim: 256,
            bottleneck_dim: 64,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("n_heads", self.n_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("n_prototypes", self.n_prototypes),
            ("projector_hidden_dim", self.projector_hidden_dim),
            ("bottleneck_dim", self.bottleneck_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(
                "image_size",
                "must be divisible by patch_size",
            ));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::config("embed_dim", "must be divisible by n_heads"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn feature_layers(&self) -> usize {
        FEATURE_LAYERS.min(self.depth)
    }

    /// Dimension of inference features (concatenated trailing class tokens).
    pub fn feature_dim(&self) -> usize {
        self.feature_layers() * self.embed_dim
    }
}

/// Dense tensor with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    norm1_w: usize,
    norm1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    norm2_w: usize,
    norm2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

/// Indices of every parameter tensor, derived from the config.
#[derive(Debug, Clone)]
struct Layout {
    patch_w: usize,
    patch_b: usize,
    cls: usize,
    pos: usize,
    blocks: Vec<BlockIdx>,
    norm_w: usize,
    norm_b: usize,
    head_w: [usize; 3],
    head_b: [usize; 3],
    last_v: usize,
}

/// How a tensor is initialised.
#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    TruncNormal,
    Uniform(f64),
}

struct Registry {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Registry {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.inits.push(init);
        self.names.len() - 1
    }
}

fn build_layout(cfg: &VitConfig) -> (Layout, Registry) {
    let d = cfg.embed_dim;
    let mut r = Registry {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let bound = 1.0 / (cfg.patch_dim() as f64).sqrt();
    let patch_w = r.add(
        "backbone.patch_embed.weight".into(),
        &[cfg.patch_dim(), d],
        Init::Uniform(bound),
    );
    let patch_b = r.add("backbone.patch_embed.bias".into(), &[d], Init::Uniform(bound));
    let cls = r.add("backbone.cls_token".into(), &[d], Init::TruncNormal);
    let pos = r.add(
        "backbone.pos_embed".into(),
        &[1 + cfg.grid() * cfg.grid(), d],
        Init::TruncNormal,
    );
    let mut blocks = Vec::new();
    for i in 0..cfg.depth {
        let p = format!("backbone.blocks.{i}");
        blocks.push(BlockIdx {
            norm1_w: r.add(format!("{p}.norm1.weight"), &[d], Init::Ones),
            norm1_b: r.add(format!("{p}.norm1.bias"), &[d], Init::Zeros),
            qkv_w: r.add(format!("{p}.attn.qkv.weight"), &[d, 3 * d], Init::TruncNormal),
            qkv_b: r.add(format!("{p}.attn.qkv.bias"), &[3 * d], Init::Zeros),
            proj_w: r.add(format!("{p}.attn.proj.weight"), &[d, d], Init::TruncNormal),
            proj_b: r.add(format!("{p}.attn.proj.bias"), &[d], Init::Zeros),
            norm2_w: r.add(format!("{p}.norm2.weight"), &[d], Init::Ones),
            norm2_b: r.add(format!("{p}.norm2.bias"), &[d], Init::Zeros),
            fc1_w: r.add(format!("{p}.mlp.fc1.weight"), &[d, cfg.mlp_dim()], Init::TruncNormal),
            fc1_b: r.add(format!("{p}.mlp.fc1.bias"), &[cfg.mlp_dim()], Init::Zeros),
            fc2_w: r.add(format!("{p}.mlp.fc2.weight"), &[cfg.mlp_dim(), d], Init::TruncNormal),
            fc2_b: r.add(format!("{p}.mlp.fc2.bias"), &[d], Init::Zeros),
        });
    }
    let norm_w = r.add("backbone.norm.weight".into(), &[d], Init::Ones);
    let norm_b = r.add("backbone.norm.bias".into(), &[d], Init::Zeros);
    let h = cfg.projector_hidden_dim;
    let dims = [(d, h), (h, h), (h, cfg.bottleneck_dim)];
    let mut head_w = [0; 3];
    let mut head_b = [0; 3];
    for (i, (a, b)) in dims.into_iter().enumerate() {
        head_w[i] = r.add(format!("head.mlp.{i}.weight"), &[a, b], Init::TruncNormal);
        head_b[i] = r.add(format!("head.mlp.{i}.bias"), &[b], Init::Zeros);
    }
    let last_v = r.add(
        "head.last_layer.weight_v".into(),
        &[cfg.n_prototypes, cfg.bottleneck_dim],
        Init::TruncNormal,
    );
    (
        Layout {
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            norm_w,
            norm_b,
            head_w,
            head_b,
            last_v,
        },
        r,
    )
}

/// All learnable tensors of backbone + projector + head.
#[derive(Debug, Clone)]
pub struct EncoderState<T> {
    pub config: VitConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
    layout: Layout,
}

impl<T: Real> EncoderState<T> {
    /// Fresh parameters: truncated normal (std 0.02) for weights, uniform
    /// fan-in init for the patch projection, unit norm gains, zero biases.
    pub fn init(config: &VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, reg) = build_layout(config);
        let mut rng = seed::rng(seed, &[tag::INIT]);
        let normal = Normal::new(0.0, 0.02).expect("valid sd");
        let tensors = reg
            .shapes
            .iter()
            .zip(&reg.inits)
            .map(|(shape, init)| {
                let mut t = Tensor::zeros(shape);
                for v in t.data.iter_mut() {
                    *v = T::lit(match *init {
                        Init::Zeros => 0.0,
                        Init::Ones => 1.0,
                        Init::TruncNormal => loop {
                            let z: f64 = normal.sample(&mut rng);
                            if z.abs() <= 0.04 {
                                break z;
                            }
                        },
                        Init::Uniform(b) => rng.random_range(-b..b),
                    });
                }
                t
            })
            .collect();
        Ok(EncoderState {
            config: config.clone(),
            names: reg.names,
            tensors,
            layout,
        })
    }

    /// Same layout with every value zero (gradient / moment buffers).
    pub fn zeros_like(&self) -> Self {
        EncoderState {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Build from named tensors (e.g. a checkpoint), validating names and shapes.
    pub fn from_named(config: &VitConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (layout, reg) = build_layout(config);
        let mut map: std::collections::HashMap<String, Tensor<T>> = named.into_iter().collect();
        let mut tensors = Vec::with_capacity(reg.names.len());
        for (name, shape) in reg.names.iter().zip(&reg.shapes) {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::Lookup(format!("missing tensor {name}")))?;
            if &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            tensors.push(t);
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Lookup(format!("unexpected tensor {extra}")));
        }
        Ok(EncoderState {
            config: config.clone(),
            names: reg.names,
            tensors,
            layout,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn same_shapes(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape == b.shape)
    }

    /// Weight decay applies to matrices only, never to biases or norm gains.
    pub fn decays(&self, index: usize) -> bool {
        let name = &self.names[index];
        !(name.ends_with(".bias") || self.tensors[index].shape.len() == 1)
    }

    pub fn cast<U: Real>(&self) -> EncoderState<U> {
        EncoderState {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    fn p(&self, i: usize) -> &[T] {
        &self.tensors[i].data
    }
}

/// Gradient buffers share the parameter layout.
pub type Grads<T> = EncoderState<T>;

// ---------------------------------------------------------------------------
// Building blocks

fn linear_forward<T: Real>(x: &[T], rows: usize, w: &[T], b: &[T], n_in: usize, n_out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * n_out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm(
        T::one(),
        View::rm(x, rows, n_in),
        View::rm(w, n_in, n_out),
        T::one(),
        ViewMut::rm(&mut y, rows, n_out),
    );
    y
}

/// Accumulates weight/bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Real>(
    x: &[T],
    dy: &[T],
    rows: usize,
    w: &[T],
    n_in: usize,
    n_out: usize,
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Vec<T> {
    gemm(
        T::one(),
        View::rm_t(x, rows, n_in),
        View::rm(dy, rows, n_out),
        T::one(),
        ViewMut::rm(dw, n_in, n_out),
    );
    for r in 0..rows {
        for (acc, &g) in db.iter_mut().zip(&dy[r * n_out..(r + 1) * n_out]) {
            *acc += g;
        }
    }
    if !need_dx {
        return Vec::new();
    }
    let mut dx = vec![T::zero(); rows * n_in];
    gemm(
        T::one(),
        View::rm(dy, rows, n_out),
        View::rm_t(w, n_in, n_out),
        T::zero(),
        ViewMut::rm(&mut dx, rows, n_in),
    );
    dx
}

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

fn layer_norm<T: Real>(x: &[T], rows: usize, d: usize, g: &[T], b: &[T]) -> (Vec<T>, LnCache<T>) {
    let mut y = vec![T::zero(); rows * d];
    let mut xhat = vec![T::zero(); rows * d];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::one() / T::lit(d as f64);
    let eps = T::lit(LN_EPS);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            y[r * d + j] = xh * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<T: Real>(
    cache: &LnCache<T>,
    dy: &[T],
    rows: usize,
    d: usize,
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * d];
    let inv_d = T::one() / T::lit(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xh[j];
        }
        let rs = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] = rs * (dxhat[j] - inv_d * sum_dxhat - xh[j] * inv_d * sum_dxhat_xhat);
        }
    }
    dx
}

/// One-dimensional bicubic resampling matrix `[out, in]` (half-pixel
/// centres, replicated borders, cubic coefficient -0.75).
fn bicubic_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    const A: f64 = -0.75;
    let mut m = vec![0.0; n_out * n_in];
    if n_in == n_out {
        for i in 0..n_in {
            m[i * n_in + i] = 1.0;
        }
        return m;
    }
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let i = src.floor();
        let t = src - i;
        let w = [
            ((A * (t + 1.0) - 5.0 * A) * (t + 1.0) + 8.0 * A) * (t + 1.0) - 4.0 * A,
            ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0,
            ((A + 2.0) * (1.0 - t) - (A + 3.0)) * (1.0 - t) * (1.0 - t) + 1.0,
            0.0,
        ];
        let w3 = 1.0 - w[0] - w[1] - w[2];
        for (k, wk) in [w[0], w[1], w[2], w3].into_iter().enumerate() {
            let idx = (i as isize - 1 + k as isize).clamp(0, n_in as isize - 1) as usize;
            m[o * n_in + idx] += wk;
        }
    }
    m
}

/// Two-dimensional interpolation matrix `[g_out^2, g_in^2]` for a square grid.
fn grid_interp<T: Real>(g_in: usize, g_out: usize) -> Vec<T> {
    let r = bicubic_matrix(g_in, g_out);
    let mut m = vec![T::zero(); g_out * g_out * g_in * g_in];
    for oy in 0..g_out {
        for ox in 0..g_out {
            for iy in 0..g_in {
                for ix in 0..g_in {
                    m[(oy * g_out + ox) * g_in * g_in + iy * g_in + ix] =
                        T::lit(r[oy * g_in + iy] * r[ox * g_in + ix]);
                }
            }
        }
    }
    m
}

/// Unfold `[C, S, S]` images into `[B * g^2, C * p * p]` patch rows.
fn unfold_patches<T: Real>(images: &[&Image], patch: usize) -> Vec<T> {
    let Some(first) = images.first() else {
        return Vec::new();
    };
    let g = first.width / patch;
    let pd = CHANNELS * patch * patch;
    let mut out = vec![T::zero(); images.len() * g * g * pd];
    for (b, img) in images.iter().enumerate() {
        for gy in 0..g {
            for gx in 0..g {
                let row = (b * g * g + gy * g + gx) * pd;
                let mut k = 0;
                for c in 0..CHANNELS {
                    for py in 0..patch {
                        for px in 0..patch {
                            out[row + k] = T::lit(img.at(c, gy * patch + py, gx * patch + px) as f64);
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Backbone

struct BlockCache<T> {
    ln1: LnCache<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    attn: Vec<T>,
    attn_out: Vec<T>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    f1: Vec<T>,
    act: Vec<T>,
}

/// Activations retained for the backward pass of one same-size image batch.
pub struct BackboneCache<T> {
    batch: usize,
    tokens: usize,
    grid: usize,
    patches: Vec<T>,
    interp: Option<Vec<T>>,
    blocks: Vec<BlockCache<T>>,
    final_ln: LnCache<T>,
}

/// Output of a backbone pass.
pub struct BackboneOutput<T> {
    /// Final normalised class tokens `[B, D]`.
    pub cls: Vec<T>,
    /// Normalised class tokens of the trailing blocks `[B, L * D]`.
    pub per_layer: Vec<T>,
}

fn check_images(cfg: &VitConfig, images: &[&Image]) -> Result<usize> {
    let Some(first) = images.first() else {
        return Ok(0);
    };
    let size = first.width;
    for img in images {
        if img.channels != CHANNELS {
            return Err(Error::Shape(format!(
                "expected {CHANNELS} channels, got {}",
                img.channels
            )));
        }
        if img.width != size || img.height != size {
            return Err(Error::Shape("images in one batch must share a size".into()));
        }
    }
    if size % cfg.patch_size != 0 || size == 0 {
        return Err(Error::Shape(format!(
            "image size {size} is not a multiple of patch size {}",
            cfg.patch_size
        )));
    }
    Ok(size / cfg.patch_size)
}

fn attention_forward<T: Real>(
    qkv: &[T],
    batch: usize,
    tokens: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut probs = vec![T::zero(); batch * heads * tokens * tokens];
    let mut out = vec![T::zero(); batch * tokens * d];
    for b in 0..batch {
        let base = b * tokens * 3 * d;
        for h in 0..heads {
            let a_off = (b * heads + h) * tokens * tokens;
            let q = View {
                data: qkv,
                offset: base + h * dh,
                rows: tokens,
                cols: dh,
                rs: 3 * d,
                cs: 1,
            };
            let k = View {
                data: qkv,
                offset: base + d + h * dh,
                rows: tokens,
                cols: dh,
                rs: 3 * d,
                cs: 1,
            };
            let v = View {
                data: qkv,
                offset: base + 2 * d + h * dh,
                rows: tokens,
                cols: dh,
                rs: 3 * d,
                cs: 1,
            };
            gemm(
                scale,
                q,
                k.t(),
                T::zero(),
                ViewMut {
                    data: &mut probs,
                    offset: a_off,
                    rows: tokens,
                    cols: tokens,
                    rs: tokens,
                    cs: 1,
                },
            );
            for r in 0..tokens {
                softmax_inplace(&mut probs[a_off + r * tokens..a_off + (r + 1) * tokens]);
            }
            gemm(
                T::one(),
                View {
                    data: &probs,
                    offset: a_off,
                    rows: tokens,
                    cols: tokens,
                    rs: tokens,
                    cs: 1,
                },
                v,
                T::zero(),
                ViewMut {
                    data: &mut out,
                    offset: b * tokens * d + h * dh,
                    rows: tokens,
                    cols: dh,
                    rs: d,
                    cs: 1,
                },
            );
        }
    }
    (probs, out)
}

fn attention_backward<T: Real>(
    qkv: &[T],
    probs: &[T],
    d_out: &[T],
    batch: usize,
    tokens: usize,
    d: usize,
    heads: usize,
) -> Vec<T> {
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dqkv = vec![T::zero(); batch * tokens * 3 * d];
    let mut dp = vec![T::zero(); tokens * tokens];
    for b in 0..batch {
        let base = b * tokens * 3 * d;
        for h in 0..heads {
            let a_off = (b * heads + h) * tokens * tokens;
            let a = View {
                data: probs,
                offset: a_off,
                rows: tokens,
                cols: tokens,
                rs: tokens,
                cs: 1,
            };
            let dout = View {
                data: d_out,
                offset: b * tokens * d + h * dh,
                rows: tokens,
                cols: dh,
                rs: d,
                cs: 1,
            };
            let view = |off: usize| View {
                data: qkv,
                offset: base + off + h * dh,
                rows: tokens,
                cols: dh,
                rs: 3 * d,
                cs: 1,
            };
            // dA = dO V^T
            gemm(T::one(), dout, view(2 * d).t(), T::zero(), ViewMut::rm(&mut dp, tokens, tokens));
            // dV = A^T dO
            gemm(
                T::one(),
                a.t(),
                dout,
                T::zero(),
                ViewMut {
                    data: &mut dqkv,
                    offset: base + 2 * d + h * dh,
                    rows: tokens,
                    cols: dh,
                    rs: 3 * d,
                    cs: 1,
                },
            );
            // dS = A * (dA - rowsum(dA * A)), scaled
            for r in 0..tokens {
                let arow = &probs[a_off + r * tokens..a_off + (r + 1) * tokens];
                let drow = &mut dp[r * tokens..(r + 1) * tokens];
                let dot: T = arow.iter().zip(drow.iter()).map(|(&x, &y)| x * y).sum();
                for (dv, &av) in drow.iter_mut().zip(arow) {
                    *dv = av * (*dv - dot) * scale;
                }
            }
            // dQ = dS K ; dK = dS^T Q
            gemm(
                T::one(),
                View::rm(&dp, tokens, tokens),
                view(d),
                T::zero(),
                ViewMut {
                    data: &mut dqkv,
                    offset: base + h * dh,
                    rows: tokens,
                    cols: dh,
                    rs: 3 * d,
                    cs: 1,
                },
            );
            gemm(
                T::one(),
                View::rm(&dp, tokens, tokens).t(),
                view(0),
                T::zero(),
                ViewMut {
                    data: &mut dqkv,
                    offset: base + d + h * dh,
                    rows: tokens,
                    cols: dh,
                    rs: 3 * d,
                    cs: 1,
                },
            );
        }
    }
    dqkv
}

/// Run the backbone over same-size images. Returns outputs and, when
/// `keep_cache` is set, the activations needed by [`backbone_backward`].
pub fn backbone_forward<T: Real>(
    state: &EncoderState<T>,
    images: &[&Image],
    keep_cache: bool,
) -> Result<(BackboneOutput<T>, Option<BackboneCache<T>>)> {
    let cfg = &state.config;
    let l = &state.layout;
    let d = cfg.embed_dim;
    let n_feat = cfg.feature_layers();
    let g = check_images(cfg, images)?;
    let batch = images.len();
    if batch == 0 {
        return Ok((
            BackboneOutput {
                cls: Vec::new(),
                per_layer: Vec::new(),
            },
            None,
        ));
    }
    let tokens = 1 + g * g;
    let rows = batch * tokens;

    let patches = unfold_patches::<T>(images, cfg.patch_size);
    let emb = linear_forward(
        &patches,
        batch * g * g,
        state.p(l.patch_w),
        state.p(l.patch_b),
        cfg.patch_dim(),
        d,
    );
    let pos = state.p(l.pos);
    let grid = cfg.grid();
    let interp = (g != grid).then(|| grid_interp::<T>(grid, g));
    let pos_patch: Vec<T> = match &interp {
        None => pos[d..].to_vec(),
        Some(m) => {
            let mut out = vec![T::zero(); g * g * d];
            gemm(
                T::one(),
                View::rm(m, g * g, grid * grid),
                View::rm(&pos[d..], grid * grid, d),
                T::zero(),
                ViewMut::rm(&mut out, g * g, d),
            );
            out
        }
    };
    let cls = state.p(l.cls);
    let mut x = vec![T::zero(); rows * d];
    for b in 0..batch {
        let r0 = b * tokens * d;
        for j in 0..d {
            x[r0 + j] = cls[j] + pos[j];
        }
        for t in 0..g * g {
            let dst = r0 + (1 + t) * d;
            let src = (b * g * g + t) * d;
            for j in 0..d {
                x[dst + j] = emb[src + j] + pos_patch[t * d + j];
            }
        }
    }

    let mut caches = Vec::with_capacity(if keep_cache { cfg.depth } else { 0 });
    let mut per_layer = vec![T::zero(); batch * n_feat * d];
    let (norm_w, norm_b) = (state.p(l.norm_w), state.p(l.norm_b));
    let cls_rows = |x: &[T]| -> Vec<T> {
        let mut out = Vec::with_capacity(batch * d);
        for b in 0..batch {
            out.extend_from_slice(&x[b * tokens * d..b * tokens * d + d]);
        }
        out
    };
    for (i, blk) in l.blocks.iter().enumerate() {
        let (h1, ln1) = layer_norm(&x, rows, d, state.p(blk.norm1_w), state.p(blk.norm1_b));
        let qkv = linear_forward(&h1, rows, state.p(blk.qkv_w), state.p(blk.qkv_b), d, 3 * d);
        let (attn, attn_out) = attention_forward(&qkv, batch, tokens, d, cfg.n_heads);
        let proj = linear_forward(&attn_out, rows, state.p(blk.proj_w), state.p(blk.proj_b), d, d);
        for (xv, pv) in x.iter_mut().zip(&proj) {
            *xv += *pv;
        }
        let (h2, ln2) = layer_norm(&x, rows, d, state.p(blk.norm2_w), state.p(blk.norm2_b));
        let f1 = linear_forward(&h2, rows, state.p(blk.fc1_w), state.p(blk.fc1_b), d, cfg.mlp_dim());
        let act: Vec<T> = f1.iter().map(|&v| gelu(v)).collect();
        let f2 = linear_forward(&act, rows, state.p(blk.fc2_w), state.p(blk.fc2_b), cfg.mlp_dim(), d);
        for (xv, fv) in x.iter_mut().zip(&f2) {
            *xv += *fv;
        }
        if i + n_feat >= cfg.depth {
            let slot = i + n_feat - cfg.depth;
            let (normed, _) = layer_norm(&cls_rows(&x), batch, d, norm_w, norm_b);
            for b in 0..batch {
                per_layer[(b * n_feat + slot) * d..(b * n_feat + slot + 1) * d]
                    .copy_from_slice(&normed[b * d..(b + 1) * d]);
            }
        }
        if keep_cache {
            caches.push(BlockCache {
                ln1,
                h1,
                qkv,
                attn,
                attn_out,
                ln2,
                h2,
                f1,
                act,
            });
        }
    }
    let (cls_out, final_ln) = layer_norm(&cls_rows(&x), batch, d, norm_w, norm_b);
    let cache = keep_cache.then_some(BackboneCache {
        batch,
        tokens,
        grid: g,
        patches,
        interp,
        blocks: caches,
        final_ln,
    });
    Ok((
        BackboneOutput {
            cls: cls_out,
            per_layer,
        },
        cache,
    ))
}

/// Backpropagate a gradient on the final class tokens `[B, D]` into `grads`.
pub fn backbone_backward<T: Real>(
    state: &EncoderState<T>,
    cache: &BackboneCache<T>,
    d_cls: &[T],
    grads: &mut Grads<T>,
) {
    let cfg = &state.config;
    let l = &state.layout;
    let d = cfg.embed_dim;
    let (batch, tokens, g) = (cache.batch, cache.tokens, cache.grid);
    let rows = batch * tokens;
    let hm = cfg.mlp_dim();
    assert_eq!(d_cls.len(), batch * d, "class-token gradient shape");

    let d_cls_in = {
        let (dg, db) = two_mut(&mut grads.tensors, l.norm_w, l.norm_b);
        layer_norm_backward(&cache.final_ln, d_cls, batch, d, state.p(l.norm_w), dg, db)
    };
    let mut dx = vec![T::zero(); rows * d];
    for b in 0..batch {
        dx[b * tokens * d..b * tokens * d + d].copy_from_slice(&d_cls_in[b * d..(b + 1) * d]);
    }

    for (blk, bc) in l.blocks.iter().zip(&cache.blocks).rev() {
        // MLP branch.
        let d_act = {
            let (dw, db) = two_mut(&mut grads.tensors, blk.fc2_w, blk.fc2_b);
            linear_backward(&bc.act, &dx, rows, state.p(blk.fc2_w), hm, d, dw, db, true)
        };
        let d_f1: Vec<T> = d_act
            .iter()
            .zip(&bc.f1)
            .map(|(&da, &f)| da * gelu_grad(f))
            .collect();
        let d_h2 = {
            let (dw, db) = two_mut(&mut grads.tensors, blk.fc1_w, blk.fc1_b);
            linear_backward(&bc.h2, &d_f1, rows, state.p(blk.fc1_w), d, hm, dw, db, true)
        };
        let d_x1 = {
            let (dg, db) = two_mut(&mut grads.tensors, blk.norm2_w, blk.norm2_b);
            layer_norm_backward(&bc.ln2, &d_h2, rows, d, state.p(blk.norm2_w), dg, db)
        };
        for (a, b) in dx.iter_mut().zip(&d_x1) {
            *a += *b;
        }
        // Attention branch.
        let d_attn_out = {
            let (dw, db) = two_mut(&mut grads.tensors, blk.proj_w, blk.proj_b);
            linear_backward(&bc.attn_out, &dx, rows, state.p(blk.proj_w), d, d, dw, db, true)
        };
        let d_qkv = attention_backward(&bc.qkv, &bc.attn, &d_attn_out, batch, tokens, d, cfg.n_heads);
        let d_h1 = {
            let (dw, db) = two_mut(&mut grads.tensors, blk.qkv_w, blk.qkv_b);
            linear_backward(&bc.h1, &d_qkv, rows, state.p(blk.qkv_w), d, 3 * d, dw, db, true)
        };
        let d_x0 = {
            let (dg, db) = two_mut(&mut grads.tensors, blk.norm1_w, blk.norm1_b);
            layer_norm_backward(&bc.ln1, &d_h1, rows, d, state.p(blk.norm1_w), dg, db)
        };
        for (a, b) in dx.iter_mut().zip(&d_x0) {
            *a += *b;
        }
    }

    // Token embedding.
    let grid = cfg.grid();
    let mut d_emb = vec![T::zero(); batch * g * g * d];
    let mut d_pos_patch = vec![T::zero(); g * g * d];
    {
        let dcls = &mut grads.tensors[l.cls].data;
        for b in 0..batch {
            for j in 0..d {
                dcls[j] += dx[b * tokens * d + j];
            }
        }
    }
    {
        let dpos = &mut grads.tensors[l.pos].data;
        for b in 0..batch {
            for j in 0..d {
                dpos[j] += dx[b * tokens * d + j];
            }
            for t in 0..g * g {
                let src = b * tokens * d + (1 + t) * d;
                for j in 0..d {
                    let v = dx[src + j];
                    d_emb[(b * g * g + t) * d + j] = v;
                    d_pos_patch[t * d + j] += v;
                }
            }
        }
        match &cache.interp {
            None => {
                for (a, b) in dpos[d..].iter_mut().zip(&d_pos_patch) {
                    *a += *b;
                }
            }
            Some(m) => gemm(
                T::one(),
                View::rm(m, g * g, grid * grid).t(),
                View::rm(&d_pos_patch, g * g, d),
                T::one(),
                ViewMut {
                    data: &mut dpos[..],
                    offset: d,
                    rows: grid * grid,
                    cols: d,
                    rs: d,
                    cs: 1,
                },
            ),
        }
    }
    let (dw, db) = two_mut(&mut grads.tensors, l.patch_w, l.patch_b);
    linear_backward(
        &cache.patches,
        &d_emb,
        batch * g * g,
        state.p(l.patch_w),
        cfg.patch_dim(),
        d,
        dw,
        db,
        false,
    );
}

fn two_mut<T>(tensors: &mut [Tensor<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = tensors.split_at_mut(b);
        (&mut lo[a].data, &mut hi[0].data)
    } else {
        let (lo, hi) = tensors.split_at_mut(a);
        (&mut hi[0].data, &mut lo[b].data)
    }
}

// ---------------------------------------------------------------------------
// Projector + prototype head

/// Activations of the projector/head for the backward pass.
pub struct HeadCache<T> {
    rows: usize,
    input: Vec<T>,
    z1: Vec<T>,
    a1: Vec<T>,
    z2: Vec<T>,
    a2: Vec<T>,
    norm: Vec<T>,
    zn: Vec<T>,
    wn: Vec<T>,
    vnorm: Vec<T>,
}

/// Three fully connected layers (GELU between), L2 normalisation, then a
/// weight-normalised prototype layer without bias. Returns logits `[V, K]`.
pub fn head_forward<T: Real>(state: &EncoderState<T>, x: &[T], rows: usize) -> (Vec<T>, HeadCache<T>) {
    let cfg = &state.config;
    let l = &state.layout;
    let (d, h, bn, k) = (
        cfg.embed_dim,
        cfg.projector_hidden_dim,
        cfg.bottleneck_dim,
        cfg.n_prototypes,
    );
    assert_eq!(x.len(), rows * d, "head input shape");
    let z1 = linear_forward(x, rows, state.p(l.head_w[0]), state.p(l.head_b[0]), d, h);
    let a1: Vec<T> = z1.iter().map(|&v| gelu(v)).collect();
    let z2 = linear_forward(&a1, rows, state.p(l.head_w[1]), state.p(l.head_b[1]), h, h);
    let a2: Vec<T> = z2.iter().map(|&v| gelu(v)).collect();
    let z3 = linear_forward(&a2, rows, state.p(l.head_w[2]), state.p(l.head_b[2]), h, bn);
    let eps = T::lit(NORMALIZE_EPS);
    let mut norm = vec![T::zero(); rows];
    let mut zn = z3.clone();
    for r in 0..rows {
        let row = &mut zn[r * bn..(r + 1) * bn];
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        norm[r] = n;
        row.iter_mut().for_each(|v| *v /= n);
    }
    let v = state.p(l.last_v);
    let mut vnorm = vec![T::zero(); k];
    let mut wn = v.to_vec();
    for j in 0..k {
        let row = &mut wn[j * bn..(j + 1) * bn];
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        vnorm[j] = n;
        row.iter_mut().for_each(|v| *v /= n);
    }
    let mut logits = vec![T::zero(); rows * k];
    gemm(
        T::one(),
        View::rm(&zn, rows, bn),
        View::rm_t(&wn, k, bn),
        T::zero(),
        ViewMut::rm(&mut logits, rows, k),
    );
    (
        logits,
        HeadCache {
            rows,
            input: x.to_vec(),
            z1,
            a1,
            z2,
            a2,
            norm,
            zn,
            wn,
            vnorm,
        },
    )
}

/// Backpropagate logit gradients; returns the gradient on the head input `[V, D]`.
pub fn head_backward<T: Real>(
    state: &EncoderState<T>,
    cache: &HeadCache<T>,
    d_logits: &[T],
    grads: &mut Grads<T>,
) -> Vec<T> {
    let cfg = &state.config;
    let l = &state.layout;
    let (d, h, bn, k) = (
        cfg.embed_dim,
        cfg.projector_hidden_dim,
        cfg.bottleneck_dim,
        cfg.n_prototypes,
    );
    let rows = cache.rows;
    // Prototype layer: logits = zn Wn^T.
    let mut d_wn = vec![T::zero(); k * bn];
    gemm(
        T::one(),
        View::rm_t(d_logits, rows, k),
        View::rm(&cache.zn, rows, bn),
        T::zero(),
        ViewMut::rm(&mut d_wn, k, bn),
    );
    let mut d_zn = vec![T::zero(); rows * bn];
    gemm(
        T::one(),
        View::rm(d_logits, rows, k),
        View::rm(&cache.wn, k, bn),
        T::zero(),
        ViewMut::rm(&mut d_zn, rows, bn),
    );
    {
        let dv = &mut grads.tensors[l.last_v].data;
        for j in 0..k {
            let wrow = &cache.wn[j * bn..(j + 1) * bn];
            let grow = &d_wn[j * bn..(j + 1) * bn];
            let dot: T = wrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
            for t in 0..bn {
                dv[j * bn + t] += (grow[t] - wrow[t] * dot) / cache.vnorm[j];
            }
        }
    }
    let mut d_z3 = vec![T::zero(); rows * bn];
    for r in 0..rows {
        let zr = &cache.zn[r * bn..(r + 1) * bn];
        let gr = &d_zn[r * bn..(r + 1) * bn];
        let dot: T = zr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for t in 0..bn {
            d_z3[r * bn + t] = (gr[t] - zr[t] * dot) / cache.norm[r];
        }
    }
    let d_a2 = {
        let (dw, db) = two_mut(&mut grads.tensors, l.head_w[2], l.head_b[2]);
        linear_backward(&cache.a2, &d_z3, rows, state.p(l.head_w[2]), h, bn, dw, db, true)
    };
    let d_z2: Vec<T> = d_a2.iter().zip(&cache.z2).map(|(&a, &z)| a * gelu_grad(z)).collect();
    let d_a1 = {
        let (dw, db) = two_mut(&mut grads.tensors, l.head_w[1], l.head_b[1]);
        linear_backward(&cache.a1, &d_z2, rows, state.p(l.head_w[1]), h, h, dw, db, true)
    };
    let d_z1: Vec<T> = d_a1.iter().zip(&cache.z1).map(|(&a, &z)| a * gelu_grad(z)).collect();
    let (dw, db) = two_mut(&mut grads.tensors, l.head_w[0], l.head_b[0]);
    linear_backward(&cache.input, &d_z1, rows, state.p(l.head_w[0]), d, h, dw, db, true)
}

// ---------------------------------------------------------------------------
// Public operations

/// Inference embeddings of a batch of same-size images: final class tokens
/// `[B, D]` and concatenated trailing-layer class tokens `[B, L * D]`.
pub fn encode<T: Real>(state: &EncoderState<T>, images: &[&Image]) -> Result<(Vec<T>, Vec<T>)> {
    let (out, _) = backbone_forward(state, images, false)?;
    Ok((out.cls, out.per_layer))
}

/// Arithmetic mean over the set axis of `n x d` embeddings.
pub fn aggregate<T: Real>(embeddings: &[T], n: usize, d: usize) -> Result<Vec<T>> {
    if n == 0 {
        return Err(Error::EmptySet("cannot aggregate an empty set".into()));
    }
    if embeddings.len() != n * d {
        return Err(Error::Shape(format!(
            "{} values do not form a {n} x {d} set",
            embeddings.len()
        )));
    }
    let mut out = vec![T::zero(); d];
    for row in embeddings.chunks_exact(d) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let inv = T::one() / T::lit(n as f64);
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

/// `softmax((logits - center) / temperature)` for one row, checked for finiteness.
pub fn sharpen<T: Real>(logits: &[T], temperature: T, center: Option<&[T]>) -> Result<Vec<T>> {
    if temperature <= T::zero() {
        return Err(Error::config("temperature", "must be positive"));
    }
    let mut z: Vec<T> = match center {
        Some(c) => {
            if c.len() != logits.len() {
                return Err(Error::Shape("center length differs from logits".into()));
            }
            logits.iter().zip(c).map(|(&l, &c)| (l - c) / temperature).collect()
        }
        None => logits.iter().map(|&l| l / temperature).collect(),
    };
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    softmax_inplace(&mut z);
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite probabilities".into()));
    }
    Ok(z)
}

/// Project a set embedding through the head and sharpen it into prototype probabilities.
pub fn project_and_sharpen<T: Real>(
    state: &EncoderState<T>,
    set_embedding: &[T],
    temperature: T,
    center: Option<&[T]>,
) -> Result<Vec<T>> {
    if set_embedding.len() != state.config.embed_dim {
        return Err(Error::Shape(format!(
            "set embedding has {} values, expected {}",
            set_embedding.len(),
            state.config.embed_dim
        )));
    }
    if set_embedding.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite set embedding".into()));
    }
    let (logits, _) = head_forward(state, set_embedding, 1);
    sharpen(&logits, temperature, center)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn micro() -> VitConfig {
        VitConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            n_heads: 2,
            mlp_ratio: 2,
            n_prototypes: 6,
            projector_hidden_dim: 10,
            bottleneck_dim: 5,
        }
    }

    fn random_image(size: usize, seed: u64) -> Image {
        let mut rng = seed::rng(seed, &[]);
        let mut img = Image::zeros(CHANNELS, size, size);
        img.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        img
    }

    #[test]
    fn config_divisibility_is_validated() {
        let bad = VitConfig {
            image_size: 50,
            ..VitConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
        let bad = VitConfig {
            n_heads: 5,
            ..VitConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn empty_batch_yields_empty_outputs() {
        let state = EncoderState::<f32>::init(&VitConfig::default(), 1).unwrap();
        let (cls, per) = encode(&state, &[]).unwrap();
        assert!(cls.is_empty() && per.is_empty());
    }

    #[test]
    fn per_layer_dim_is_four_times_embed() {
        let cfg = VitConfig {
            image_size: 16,
            embed_dim: 16,
            depth: 4,
            n_heads: 2,
            ..VitConfig::default()
        };
        let state = EncoderState::<f32>::init(&cfg, 1).unwrap();
        let img = random_image(16, 3);
        let (cls, per) = encode(&state, &[&img]).unwrap();
        assert_eq!(cls.len(), 16);
        assert_eq!(per.len(), 64);
        // The last slot of the trailing features is the final class token.
        assert_eq!(&per[48..], &cls[..]);
    }

    #[test]
    fn identical_images_give_identical_rows() {
        let state = EncoderState::<f32>::init(&micro(), 2).unwrap();
        let img = random_image(8, 5);
        let (cls, _) = encode(&state, &[&img, &img]).unwrap();
        assert_eq!(&cls[..8], &cls[8..]);
    }

    #[test]
    fn wrong_channel_count_is_a_shape_error() {
        let state = EncoderState::<f32>::init(&micro(), 2).unwrap();
        let img = Image::zeros(3, 8, 8);
        assert!(matches!(encode(&state, &[&img]), Err(Error::Shape(_))));
    }

    #[test]
    fn local_sizes_use_interpolated_positions() {
        let state = EncoderState::<f32>::init(&micro(), 2).unwrap();
        let small = random_image(4, 1);
        let big = random_image(12, 1);
        assert_eq!(encode(&state, &[&small]).unwrap().0.len(), 8);
        assert_eq!(encode(&state, &[&big]).unwrap().0.len(), 8);
    }

    #[test]
    fn bicubic_rows_sum_to_one() {
        for (i, o) in [(6, 3), (3, 6), (6, 8), (4, 1)] {
            let m = bicubic_matrix(i, o);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_contract() {
        assert!(matches!(aggregate::<f64>(&[], 0, 3), Err(Error::EmptySet(_))));
        let x = [1.0, -2.0, 3.0];
        assert_eq!(aggregate(&x, 1, 3).unwrap(), x.to_vec());
        let pm = [1.0, -2.0, 3.0, -1.0, 2.0, -3.0];
        assert_eq!(aggregate(&pm, 2, 3).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant_and_linear(
            rows in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 4), 1..8),
            alpha in -3.0f64..3.0,
            seed in 0u64..1000,
        ) {
            let n = rows.len();
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let mut order: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut seed::rng(seed, &[]));
            let permuted: Vec<f64> = order.iter().flat_map(|&i| rows[i].clone()).collect();
            let a = aggregate(&flat, n, 4).unwrap();
            let b = aggregate(&permuted, n, 4).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-12) + 1e-12);
            }
            let scaled: Vec<f64> = flat.iter().map(|v| v * alpha).collect();
            let c = aggregate(&scaled, n, 4).unwrap();
            for (x, y) in a.iter().zip(&c) {
                prop_assert!((x * alpha - y).abs() < 1e-9);
            }
        }

        #[test]
        fn shapes_follow_the_contract(
            patch in 2usize..5,
            grid in 1usize..4,
            heads in 1usize..4,
            head_dim in 1usize..5,
            depth in 1usize..6,
            batch in 0usize..3,
        ) {
            let cfg = VitConfig {
                image_size: patch * grid,
                patch_size: patch,
                embed_dim: heads * head_dim,
                depth,
                n_heads: heads,
                mlp_ratio: 2,
                n_prototypes: 7,
                projector_hidden_dim: 6,
                bottleneck_dim: 3,
            };
            let state = EncoderState::<f32>::init(&cfg, 0).unwrap();
            let imgs: Vec<Image> = (0..batch).map(|i| random_image(patch * grid, i as u64)).collect();
            let refs: Vec<&Image> = imgs.iter().collect();
            let (cls, per) = encode(&state, &refs).unwrap();
            prop_assert_eq!(cls.len(), batch * cfg.embed_dim);
            prop_assert_eq!(per.len(), batch * cfg.feature_dim());
            if batch > 0 {
                let p = project_and_sharpen(&state, &cls[..cfg.embed_dim], 0.1, None).unwrap();
                prop_assert_eq!(p.len(), 7);
            }
        }
    }

    #[test]
    fn sharpen_contract() {
        // High temperature: near uniform.
        let logits = vec![0.3f64, -0.2, 0.9, 0.0];
        let p = sharpen(&logits, 1e6, Some(&[0.0; 4])).unwrap();
        let (mx, mn) = p.iter().fold((f64::MIN, f64::MAX), |(a, b), &v| (a.max(v), b.min(v)));
        assert!(mx - mn < 1e-3);
        // Closed form: logits [1, 0, 0, 0] at tau 0.01 -> p0 = 1 / (1 + 3 e^-100).
        let p = sharpen(&[1.0f64, 0.0, 0.0, 0.0], 0.01, Some(&[0.0; 4])).unwrap();
        let closed = 1.0 / (1.0 + 3.0 * (-100.0f64).exp());
        assert!((p[0] - closed).abs() < 1e-15);
        assert!(p[0] > 1.0 - 1e-10);
        assert!(p.iter().all(|&v| v > 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(matches!(sharpen(&[f64::NAN, 0.0], 0.1, None), Err(Error::Numeric(_))));
        assert!(sharpen(&[1.0f64], 0.0, None).is_err());
    }

    #[test]
    fn project_and_sharpen_sums_to_one() {
        let state = EncoderState::<f64>::init(&micro(), 4).unwrap();
        let x: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let center = vec![0.05; 6];
        for tau in [0.01, 0.1, 1.0] {
            let p = project_and_sharpen(&state, &x, tau, Some(&center)).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(p.iter().all(|&v| v > 0.0));
        }
    }

    /// Scalar probe `sum(w * out)` for finite-difference checks of one module.
    fn probe<T: Real>(v: &[T], w: &[f64]) -> f64 {
        v.iter().zip(w).map(|(a, b)| a.as_f64() * b).sum()
    }

    #[test]
    fn backbone_backward_matches_finite_differences() {
        let cfg = micro();
        let state = EncoderState::<f64>::init(&cfg, 11).unwrap();
        let imgs = [random_image(8, 1), random_image(8, 2)];
        let locals = [random_image(4, 3)];
        let refs: Vec<&Image> = imgs.iter().collect();
        let lrefs: Vec<&Image> = locals.iter().collect();
        let w: Vec<f64> = (0..16).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let objective = |s: &EncoderState<f64>| {
            let (a, _) = backbone_forward(s, &refs, false).unwrap();
            let (b, _) = backbone_forward(s, &lrefs, false).unwrap();
            probe(&a.cls, &w) + probe(&b.cls, &w[8..])
        };
        let mut grads = state.zeros_like();
        let (_, cache) = backbone_forward(&state, &refs, true).unwrap();
        backbone_backward(&state, &cache.unwrap(), &w, &mut grads);
        let (_, cache) = backbone_forward(&state, &lrefs, true).unwrap();
        backbone_backward(&state, &cache.unwrap(), &w[8..], &mut grads);
        let h = 1e-6;
        for (ti, name) in state.names.iter().enumerate() {
            if name.starts_with("head.") {
                continue;
            }
            for e in 0..state.tensors[ti].len() {
                let mut plus = state.clone();
                plus.tensors[ti].data[e] += h;
                let mut minus = state.clone();
                minus.tensors[ti].data[e] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = grads.tensors[ti].data[e];
                assert!(
                    (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()) + 1e-8,
                    "{name}[{e}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        let cfg = micro();
        let mut state = EncoderState::<f64>::init(&cfg, 12).unwrap();
        // Init-scale weights give a near-zero bottleneck norm, where central
        // differences are badly conditioned.
        for t in state.tensors.iter_mut() {
            t.data.iter_mut().for_each(|v| *v *= 30.0);
        }
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).cos()).collect();
        let w: Vec<f64> = (0..12).map(|i| (i as f64 * 0.91).sin()).collect();
        let objective = |s: &EncoderState<f64>, x: &[f64]| {
            let (logits, _) = head_forward(s, x, 2);
            probe(&logits, &w)
        };
        let mut grads = state.zeros_like();
        let (_, cache) = head_forward(&state, &x, 2);
        let dx = head_backward(&state, &cache, &w, &mut grads);
        let h = 1e-6;
        for (ti, name) in state.names.iter().enumerate() {
            if !name.starts_with("head.") {
                continue;
            }
            for e in 0..state.tensors[ti].len() {
                let mut plus = state.clone();
                plus.tensors[ti].data[e] += h;
                let mut minus = state.clone();
                minus.tensors[ti].data[e] -= h;
                let fd = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * h);
                let an = grads.tensors[ti].data[e];
                assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()) + 1e-8, "{name}[{e}] fd {fd} an {an}");
            }
        }
        for e in 0..x.len() {
            let mut xp = x.clone();
            xp[e] += h;
            let mut xm = x.clone();
            xm[e] -= h;
            let fd = (objective(&state, &xp) - objective(&state, &xm)) / (2.0 * h);
            assert!((fd - dx[e]).abs() <= 1e-5 * fd.abs() + 1e-8);
        }
    }
}
