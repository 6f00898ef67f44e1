//! A small promptable segmentation transformer.
//!
//! * Image trunk: non-overlapping patch embedding, learned positions, one
//!   pre-norm transformer block, plus a per-pixel 3x3 feature map used by
//!   the mask head for full-resolution detail.
//! * Prompt encoder: random Fourier features of the normalised prompt
//!   coordinates plus one of two learned polarity embeddings. A box is
//!   encoded by its centre in the point basis plus its two corners in their
//!   own bases.
//! * Mask decoder: a learned sink token is prepended to the prompt tokens;
//!   each layer runs token self-attention, token-to-image attention, an MLP
//!   and image-to-token attention. Image keys and queries carry the Fourier
//!   encoding of their patch centre; token keys and queries carry the
//!   initial token embedding. Every attention map is returned in an
//!   [`AttentionRecord`] and can receive an additive pre-softmax
//!   calibration.
//! * Mask head: an MLP maps each prompt token to a coarse patch filter and a
//!   fine pixel filter; the coarse logits are bilinearly upsampled.
//!
//! All parameters live in a [`ParamStore`]; the frozen trunk runs once per
//! image through [`MiniSam::encode_image`].

pub mod lora;

use std::rc::Rc;

use cpc_autograd::{Graph, Mat, SparseMatrix, Var};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capl::CalibrationTensor;
use crate::params::{gaussian, glorot, Bound, ParamStore};
use crate::promptkit::{Polarity, PromptAnnotation, PromptElement};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    /// Channels of the per-pixel feature map.
    pub pixel_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch: 8,
            dim: 32,
            heads: 4,
            depth: 2,
            mlp_hidden: 64,
            pixel_dim: 8,
            lora_rank: 4,
            lora_alpha: 4.0,
        }
    }
}

impl ModelConfig {
    /// The smallest useful configuration, for derivative checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 16,
            patch: 4,
            dim: 4,
            heads: 1,
            depth: 1,
            mlp_hidden: 4,
            pixel_dim: 2,
            lora_rank: 1,
            lora_alpha: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.dim % 2 != 0 {
            return fail(format!("dim {} must be even for Fourier prompt features", self.dim));
        }
        if self.patch == 0 || self.image_size < self.patch || self.image_size % self.patch != 0 {
            return fail(format!("patch {} does not divide image size {}", self.patch, self.image_size));
        }
        if self.lora_rank == 0 {
            return fail("LoRA rank must be at least 1".into());
        }
        if self.depth == 0 || self.mlp_hidden == 0 || self.pixel_dim == 0 {
            return fail("depth, mlp_hidden and pixel_dim must be positive".into());
        }
        if !(self.lora_alpha > 0.0) {
            return fail("LoRA alpha must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn n_pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Attention layout for a given number of prompt tokens. The decoder token
/// set is the sink token followed by the prompt tokens, so `tokens =
/// prompts + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLayout {
    pub depth: usize,
    pub heads: usize,
    pub tokens: usize,
    pub patches: usize,
}

/// Post-softmax attention maps of one decoder layer, one entry per head.
#[derive(Clone)]
pub struct LayerAttention<'g> {
    /// token -> token, `T x T`.
    pub prompt_prompt: Vec<Var<'g>>,
    /// token -> image, `T x P`.
    pub prompt_image: Vec<Var<'g>>,
    /// image -> token, `P x T`.
    pub image_prompt: Vec<Var<'g>>,
}

#[derive(Clone)]
pub struct AttentionRecord<'g> {
    pub layers: Vec<LayerAttention<'g>>,
    pub layout: AttentionLayout,
}

impl<'g> AttentionRecord<'g> {
    /// Row index of prompt token `k` in the decoder token set.
    pub fn token_of_entity(&self, k: usize) -> usize {
        k + 1
    }

    pub fn n_entities(&self) -> usize {
        self.layout.tokens - 1
    }

    /// Every map, for row-sum checks.
    pub fn all_maps(&self) -> Vec<Var<'g>> {
        self.layers
            .iter()
            .flat_map(|l| l.prompt_prompt.iter().chain(&l.prompt_image).chain(&l.image_prompt).copied())
            .collect()
    }
}

/// Per-prompt logit maps, stored column-wise as `(H*W) x n_prompts`.
#[derive(Clone)]
pub struct SegOutput<'g> {
    pub logits: Var<'g>,
    /// Decoder output of the prompt tokens, `n x d`.
    pub tokens: Var<'g>,
    pub height: usize,
    pub width: usize,
}

impl SegOutput<'_> {
    pub fn n_maps(&self) -> usize {
        self.logits.shape().1
    }

    /// Logit map of prompt `k` as `H x W`.
    pub fn map(&self, k: usize) -> Mat {
        let v = self.logits.value();
        Mat::from_shape_fn((self.height, self.width), |(y, x)| v[[y * self.width + x, k]])
    }

    /// Thresholded masks (`sigmoid >= 0.5`, i.e. logit >= 0).
    pub fn masks(&self) -> Vec<ndarray::Array2<bool>> {
        (0..self.n_maps()).map(|k| self.map(k).mapv(|z| z >= 0.0)).collect()
    }
}

/// Frozen-trunk features of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    /// `P x d` patch tokens.
    pub tokens: Mat,
    /// `(H*W) x pixel_dim` per-pixel features.
    pub pixels: Mat,
}

pub struct MiniSam {
    pub config: ModelConfig,
    /// `(H*W) x P` bilinear upsampling of patch-grid maps.
    upsample: Rc<SparseMatrix>,
}

impl MiniSam {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let upsample = Rc::new(bilinear_upsample(config.grid(), config.image_size));
        Ok(MiniSam { config, upsample })
    }

    pub fn upsample_matrix(&self) -> Rc<SparseMatrix> {
        Rc::clone(&self.upsample)
    }

    pub fn layout(&self, n_prompts: usize) -> AttentionLayout {
        AttentionLayout {
            depth: self.config.depth,
            heads: self.config.heads,
            tokens: n_prompts + 1,
            patches: self.config.n_patches(),
        }
    }

    /// Randomly initialised trunk, prompt encoder, decoder and head.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let c = &self.config;
        let d = c.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let patch_in = c.patch * c.patch * 3;
        s.insert("trunk.embed.w", glorot(&mut rng, patch_in, d));
        s.insert("trunk.embed.b", Mat::zeros((1, d)));
        s.insert("trunk.pos", gaussian(&mut rng, c.n_patches(), d, 0.1));
        for w in ["wq", "wk", "wv", "wo"] {
            s.insert(format!("trunk.attn.{w}"), glorot(&mut rng, d, d));
        }
        s.insert("trunk.mlp.w1", glorot(&mut rng, d, c.mlp_hidden));
        s.insert("trunk.mlp.b1", Mat::zeros((1, c.mlp_hidden)));
        s.insert("trunk.mlp.w2", glorot(&mut rng, c.mlp_hidden, d));
        s.insert("trunk.mlp.b2", Mat::zeros((1, d)));
        s.insert("trunk.pix.w", glorot(&mut rng, 27, c.pixel_dim));
        s.insert("trunk.pix.b", Mat::zeros((1, c.pixel_dim)));

        s.insert("fixed.pe_point", gaussian(&mut rng, 2, d / 2, 1.0));
        s.insert("fixed.pe_corner_a", gaussian(&mut rng, 2, d / 2, 1.0));
        s.insert("fixed.pe_corner_b", gaussian(&mut rng, 2, d / 2, 1.0));
        s.insert("prompt.type_fg", gaussian(&mut rng, 1, d, 0.5));
        s.insert("prompt.type_bg", gaussian(&mut rng, 1, d, 0.5));
        s.insert("prompt.sink", gaussian(&mut rng, 1, d, 0.5));

        for l in 0..c.depth {
            for b in lora::BLOCKS {
                for w in ["wq", "wk", "wv", "wo"] {
                    s.insert(format!("dec.{l}.{b}.{w}"), glorot(&mut rng, d, d));
                }
            }
            s.insert(format!("dec.{l}.mlp.w1"), glorot(&mut rng, d, c.mlp_hidden));
            s.insert(format!("dec.{l}.mlp.b1"), Mat::zeros((1, c.mlp_hidden)));
            s.insert(format!("dec.{l}.mlp.w2"), glorot(&mut rng, c.mlp_hidden, d));
            s.insert(format!("dec.{l}.mlp.b2"), Mat::zeros((1, d)));
        }

        s.insert("head.w1", glorot(&mut rng, d, d));
        s.insert("head.b1", Mat::zeros((1, d)));
        s.insert("head.coarse", glorot(&mut rng, d, d));
        s.insert("head.fine", glorot(&mut rng, d, c.pixel_dim));
        s.insert("head.bias", Mat::zeros((1, 1)));
        s
    }

    /// Trunk on the graph (differentiable when trunk parameters are bound as
    /// trainable). Returns patch tokens and pixel features.
    pub fn encode_image_graph<'g>(
        &self,
        g: &'g Graph,
        p: &Bound<'g>,
        image: &Array3<f64>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let c = &self.config;
        let (h, w, ch) = image.dim();
        if h != c.image_size || w != c.image_size || ch != 3 {
            return Err(Error::Config(format!(
                "image {h}x{w}x{ch} does not match model input {0}x{0}x3",
                c.image_size
            )));
        }
        let patches = g.constant(patchify(image, c.patch));
        let mut x = patches.matmul(p.get("trunk.embed.w")).add_row(p.get("trunk.embed.b")) + p.get("trunk.pos");
        let n = layer_norm(x);
        let (att, _) = multi_head(
            n,
            n,
            n,
            [p.get("trunk.attn.wq"), p.get("trunk.attn.wk"), p.get("trunk.attn.wv"), p.get("trunk.attn.wo")],
            c.heads,
            None,
        );
        x = x + att;
        let n = layer_norm(x);
        let hidden = n.matmul(p.get("trunk.mlp.w1")).add_row(p.get("trunk.mlp.b1")).tanh();
        x = x + hidden.matmul(p.get("trunk.mlp.w2")).add_row(p.get("trunk.mlp.b2"));
        let tokens = layer_norm(x);
        let pixels = g.constant(im2col3(image)).matmul(p.get("trunk.pix.w")).add_row(p.get("trunk.pix.b")).tanh();
        Ok((tokens, pixels))
    }

    /// Fourier encoding of every patch centre, in the basis used for point
    /// prompts, so prompt and image positions are directly comparable.
    pub fn image_pe(&self, gauss: &Mat) -> Mat {
        let c = &self.config;
        let grid = c.grid();
        let mut out = Mat::zeros((c.n_patches(), c.dim));
        for i in 0..c.n_patches() {
            let centre = |j: usize| j * c.patch + c.patch / 2;
            let row = fourier(gauss, centre(i % grid), centre(i / grid), c.image_size);
            out.row_mut(i).assign(&row.row(0));
        }
        out
    }

    /// Frozen trunk evaluation.
    pub fn encode_image(&self, params: &ParamStore, image: &Array3<f64>) -> Result<ImageFeatures> {
        let g = Graph::new();
        let p = params.subset(&["trunk."]).bind(&g, |_| false);
        let (t, px) = self.encode_image_graph(&g, &p, image)?;
        Ok(ImageFeatures { tokens: t.value().as_ref().clone(), pixels: px.value().as_ref().clone() })
    }

    /// Prompt tokens (`n x d`), row `k` bound to entity `k`.
    pub fn encode_prompts<'g>(&self, g: &'g Graph, p: &Bound<'g>, annotation: &PromptAnnotation) -> Result<Var<'g>> {
        let size = self.config.image_size;
        if annotation.is_empty() {
            return Err(Error::Data("annotation has no elements".into()));
        }
        let mut rows = Vec::with_capacity(annotation.len());
        for (k, e) in annotation.elements.iter().enumerate() {
            if !e.in_bounds(size, size) {
                return Err(Error::Data(format!("prompt {k} lies outside the {size}x{size} image")));
            }
            let (pe, polarity) = match *e {
                PromptElement::Point { x, y, polarity } => {
                    (fourier(&p.get("fixed.pe_point").value(), x, y, size), polarity)
                }
                PromptElement::Box { x_min, y_min, x_max, y_max } => {
                    let centre = fourier(&p.get("fixed.pe_point").value(), (x_min + x_max) / 2, (y_min + y_max) / 2, size);
                    let a = fourier(&p.get("fixed.pe_corner_a").value(), x_min, y_min, size);
                    let b = fourier(&p.get("fixed.pe_corner_b").value(), x_max, y_max, size);
                    (centre + (a + b) * 0.5, Polarity::Foreground)
                }
            };
            let kind = match polarity {
                Polarity::Foreground => p.get("prompt.type_fg"),
                Polarity::Background => p.get("prompt.type_bg"),
            };
            rows.push(g.constant(pe) + kind);
        }
        Ok(Var::concat_rows(&rows))
    }

    /// Decoder and mask head.
    ///
    /// `prompts` is `n x d`; `calibration`, when given, must match
    /// [`MiniSam::layout`] for `n` prompts.
    pub fn forward<'g>(
        &self,
        p: &Bound<'g>,
        image_tokens: Var<'g>,
        pixels: Var<'g>,
        prompts: Var<'g>,
        calibration: Option<&CalibrationTensor<'g>>,
    ) -> Result<(SegOutput<'g>, AttentionRecord<'g>)> {
        let c = &self.config;
        let d = c.dim;
        let n = prompts.shape().0;
        if prompts.shape().1 != d || image_tokens.shape() != (c.n_patches(), d) {
            return Err(Error::Contract("prompt or image token shapes do not match the model".into()));
        }
        let layout = self.layout(n);
        if let Some(cal) = calibration {
            cal.check_layout(&layout)?;
        }
        let g = prompts.graph();
        let token_pe = Var::concat_rows(&[p.get("prompt.sink"), prompts]);
        let image_pe = g.constant(self.image_pe(&p.get("fixed.pe_point").value()));
        let mut tokens = token_pe;
        let mut image = image_tokens;
        let mut layers = Vec::with_capacity(c.depth);
        let alpha = c.lora_alpha;
        for l in 0..c.depth {
            let weights = |b: &str| {
                [
                    lora::effective(p, &format!("dec.{l}.{b}.wq"), alpha),
                    p.get(&format!("dec.{l}.{b}.wk")),
                    lora::effective(p, &format!("dec.{l}.{b}.wv"), alpha),
                    p.get(&format!("dec.{l}.{b}.wo")),
                ]
            };
            let cal = calibration.map(|t| &t.layers[l]);

            let q = if l == 0 { tokens } else { tokens + token_pe };
            let (att, pp) = multi_head(q, q, tokens, weights("self"), c.heads, cal.map(|x| x.prompt_prompt.as_slice()));
            tokens = layer_norm(tokens + att);

            let keyed = image + image_pe;
            let (att, pi) = multi_head(
                tokens + token_pe,
                keyed,
                image,
                weights("p2i"),
                c.heads,
                cal.map(|x| x.prompt_image.as_slice()),
            );
            tokens = layer_norm(tokens + att);

            let hidden = tokens.matmul(p.get(&format!("dec.{l}.mlp.w1"))).add_row(p.get(&format!("dec.{l}.mlp.b1")));
            let mlp = hidden.tanh().matmul(p.get(&format!("dec.{l}.mlp.w2"))).add_row(p.get(&format!("dec.{l}.mlp.b2")));
            tokens = layer_norm(tokens + mlp);

            let (att, ip) = multi_head(
                image + image_pe,
                tokens + token_pe,
                tokens,
                weights("i2p"),
                c.heads,
                cal.map(|x| x.image_prompt.as_slice()),
            );
            image = layer_norm(image + att);

            layers.push(LayerAttention { prompt_prompt: pp, prompt_image: pi, image_prompt: ip });
        }

        let entity_tokens = tokens.slice_rows(1, n);
        let hyper = entity_tokens.matmul(p.get("head.w1")).add_row(p.get("head.b1")).tanh();
        let coarse_filters = hyper.matmul(p.get("head.coarse"));
        let fine_filters = hyper.matmul(p.get("head.fine"));
        let coarse = image.matmul_nt(coarse_filters).scale(1.0 / (d as f64).sqrt());
        let fine = pixels.matmul_nt(fine_filters);
        let logits = coarse.sparse_left(self.upsample_matrix(), false)
            + fine
            + p.get("head.bias").broadcast_scalar(c.n_pixels(), n);
        let seg = SegOutput { logits, tokens: entity_tokens, height: c.image_size, width: c.image_size };
        Ok((seg, AttentionRecord { layers, layout }))
    }
}

/// Parameter-free layer normalisation over each row.
pub fn layer_norm(x: Var<'_>) -> Var<'_> {
    let d = x.shape().1;
    let mean = x.sum_cols().scale(1.0 / d as f64).broadcast_cols(d);
    let centered = x - mean;
    let var = (centered * centered).sum_cols().scale(1.0 / d as f64);
    centered * var.add_scalar(1e-5).powf(-0.5).broadcast_cols(d)
}

/// Multi-head attention with optional additive pre-softmax biases, one per
/// head. Returns the projected output and the post-softmax maps.
fn multi_head<'g>(
    q_in: Var<'g>,
    k_in: Var<'g>,
    v_in: Var<'g>,
    w: [Var<'g>; 4],
    heads: usize,
    bias: Option<&[Var<'g>]>,
) -> (Var<'g>, Vec<Var<'g>>) {
    let d = w[0].shape().1;
    let dh = d / heads;
    let q = q_in.matmul(w[0]);
    let k = k_in.matmul(w[1]);
    let v = v_in.matmul(w[2]);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out: Option<Var<'g>> = None;
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (q.slice_cols(h * dh, dh), k.slice_cols(h * dh, dh), v.slice_cols(h * dh, dh))
        };
        let mut scores = qh.matmul_nt(kh).scale(scale);
        if let Some(b) = bias {
            scores = scores + b[h];
        }
        let a = scores.softmax_rows();
        let wo = if heads == 1 { w[3] } else { w[3].slice_rows(h * dh, dh) };
        let part = a.matmul(vh).matmul(wo);
        out = Some(match out {
            Some(o) => o + part,
            None => part,
        });
        maps.push(a);
    }
    (out.expect("at least one head"), maps)
}

/// `[sin(2 pi u G), cos(2 pi u G)]` with `u` the pixel centre mapped to
/// `[-1, 1]`.
fn fourier(gauss: &Mat, x: usize, y: usize, size: usize) -> Mat {
    let u = 2.0 * (x as f64 + 0.5) / size as f64 - 1.0;
    let v = 2.0 * (y as f64 + 0.5) / size as f64 - 1.0;
    let half = gauss.ncols();
    let mut out = Mat::zeros((1, 2 * half));
    for j in 0..half {
        let a = std::f64::consts::TAU * (u * gauss[[0, j]] + v * gauss[[1, j]]);
        out[[0, j]] = a.sin();
        out[[0, half + j]] = a.cos();
    }
    out
}

/// Non-overlapping patches, row-major over the grid, each flattened as
/// `(dy, dx, channel)`.
pub fn patchify(image: &Array3<f64>, patch: usize) -> Mat {
    let (h, w, ch) = image.dim();
    let (gh, gw) = (h / patch, w / patch);
    Mat::from_shape_fn((gh * gw, patch * patch * ch), |(i, j)| {
        let (py, px) = (i / gw, i % gw);
        let c = j % ch;
        let dx = (j / ch) % patch;
        let dy = j / (ch * patch);
        image[[py * patch + dy, px * patch + dx, c]]
    })
}

/// 3x3 zero-padded neighbourhoods, one row per pixel.
pub fn im2col3(image: &Array3<f64>) -> Mat {
    let (h, w, ch) = image.dim();
    Mat::from_shape_fn((h * w, 9 * ch), |(i, j)| {
        let (y, x) = ((i / w) as i64, (i % w) as i64);
        let c = j % ch;
        let k = j / ch;
        let yy = y + (k / 3) as i64 - 1;
        let xx = x + (k % 3) as i64 - 1;
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            image[[yy as usize, xx as usize, c]]
        }
    })
}

/// Bilinear upsampling from a `grid x grid` map (row-major) to
/// `size x size`, half-pixel aligned with edge clamping.
pub fn bilinear_upsample(grid: usize, size: usize) -> SparseMatrix {
    let axis = |o: usize| -> [(usize, f64); 2] {
        let src = ((o as f64 + 0.5) * grid as f64 / size as f64 - 0.5).clamp(0.0, (grid - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(grid - 1);
        let t = src - lo as f64;
        [(lo, 1.0 - t), (hi, t)]
    };
    let mut triplets = Vec::with_capacity(size * size * 4);
    for y in 0..size {
        for x in 0..size {
            for (gy, wy) in axis(y) {
                for (gx, wx) in axis(x) {
                    let wgt = wy * wx;
                    if wgt != 0.0 {
                        triplets.push((y * size + x, gy * grid + gx, wgt));
                    }
                }
            }
        }
    }
    SparseMatrix::from_triplets(size * size, grid * grid, &triplets)
}
