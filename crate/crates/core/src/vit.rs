//! A miniature Vision Transformer.
//!
//! Each block computes
//!
//! ```text
//! Q = X·Wq   K = X·Wk   V = X·Wv
//! A  = softmax(Q·Kᵀ / √d)·V          (per head, d = C / heads)
//! A' = A·Wp + X
//! Y  = MLP(A') + A'                   MLP(z) = act(z·W1 + b1)·W2 + b2
//! ```
//!
//! with optional pre-normalization in front of the attention and the MLP.
//! The classifier embeds non-overlapping patches, adds a learned position
//! table, runs the blocks, mean-pools over tokens and applies a linear head.
//!
//! Parameters live in a [`ParamSet`] under canonical names: `patch_embed`,
//! `pos_embed`, `block{i}.{wq,wk,wv,wp,mlp_w1,mlp_b1,mlp_w2,mlp_b2}`,
//! `block{i}.{ln1_g,ln1_b,ln2_g,ln2_b}` (layer norm only), `head_w`, `head_b`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Model weights are a [`ParamSet`] with the canonical names above.
pub type ModelWeights = ParamSet;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels_in: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub classes: usize,
    pub use_layernorm: bool,
    pub activation: Activation,
    pub ln_eps: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_h: 16,
            image_w: 16,
            channels_in: 1,
            patch: 4,
            dim: 32,
            heads: 2,
            blocks: 2,
            mlp_hidden: 64,
            classes: 3,
            use_layernorm: false,
            activation: Activation::Relu,
            ln_eps: 1e-5,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("channels_in", self.channels_in),
            ("patch", self.patch),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("classes", self.classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return Err(Error::Config(format!(
                "model.patch {} must divide image {}x{}",
                self.patch, self.image_h, self.image_w
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.heads {} must divide model.dim {}",
                self.heads, self.dim
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("model.ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels_in
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Canonical parameter names and shapes, in lexicographic order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.dim;
        let mut out = vec![
            ("patch_embed".to_string(), vec![self.patch_dim(), c]),
            ("pos_embed".to_string(), vec![self.tokens(), c]),
            ("head_w".to_string(), vec![c, self.classes]),
            ("head_b".to_string(), vec![self.classes]),
        ];
        for i in 0..self.blocks {
            let p = |s: &str| format!("block{i}.{s}");
            out.extend([
                (p("wq"), vec![c, c]),
                (p("wk"), vec![c, c]),
                (p("wv"), vec![c, c]),
                (p("wp"), vec![c, c]),
                (p("mlp_w1"), vec![c, self.mlp_hidden]),
                (p("mlp_b1"), vec![self.mlp_hidden]),
                (p("mlp_w2"), vec![self.mlp_hidden, c]),
                (p("mlp_b2"), vec![c]),
            ]);
            if self.use_layernorm {
                out.extend([
                    (p("ln1_g"), vec![c]),
                    (p("ln1_b"), vec![c]),
                    (p("ln2_g"), vec![c]),
                    (p("ln2_b"), vec![c]),
                ]);
            }
        }
        out.sort();
        out
    }
}

/// One block's tensors, used by the eager single-sample API.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wp: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
    /// `(ln1_g, ln1_b, ln2_g, ln2_b)` when layer norm is enabled.
    pub ln: Option<(Tensor, Tensor, Tensor, Tensor)>,
}

impl BlockWeights {
    pub fn from_params(params: &ParamSet, index: usize) -> Result<Self> {
        let get = |s: &str| params.require(&format!("block{index}.{s}")).cloned();
        let ln = if params.contains(&format!("block{index}.ln1_g")) {
            Some((get("ln1_g")?, get("ln1_b")?, get("ln2_g")?, get("ln2_b")?))
        } else {
            None
        };
        Ok(Self {
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wp: get("wp")?,
            mlp_w1: get("mlp_w1")?,
            mlp_b1: get("mlp_b1")?,
            mlp_w2: get("mlp_w2")?,
            mlp_b2: get("mlp_b2")?,
            ln,
        })
    }

    fn register(&self, tape: &mut Tape) -> BlockVars {
        BlockVars {
            wq: tape.constant(self.wq.clone()),
            wk: tape.constant(self.wk.clone()),
            wv: tape.constant(self.wv.clone()),
            wp: tape.constant(self.wp.clone()),
            mlp_w1: tape.constant(self.mlp_w1.clone()),
            mlp_b1: tape.constant(self.mlp_b1.clone()),
            mlp_w2: tape.constant(self.mlp_w2.clone()),
            mlp_b2: tape.constant(self.mlp_b2.clone()),
            ln: self.ln.as_ref().map(|(a, b, c, d)| {
                (
                    tape.constant(a.clone()),
                    tape.constant(b.clone()),
                    tape.constant(c.clone()),
                    tape.constant(d.clone()),
                )
            }),
        }
    }
}

/// Tape handles for one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wp: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub ln: Option<(Var, Var, Var, Var)>,
}

/// Tape handles for a whole model.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub patch_embed: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
    pub head_w: Var,
    pub head_b: Var,
}

impl ModelVars {
    /// Records every parameter of `model` as a named leaf on `tape`.
    pub fn register(tape: &mut Tape, model: &ModelWeights, config: &ViTConfig) -> Result<Self> {
        let mut param = |name: &str| -> Result<Var> {
            Ok(tape.param(name, model.require(name)?.clone()))
        };
        let patch_embed = param("patch_embed")?;
        let pos_embed = param("pos_embed")?;
        let head_w = param("head_w")?;
        let head_b = param("head_b")?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let mut p = |s: &str| param(&format!("block{i}.{s}"));
            let ln = if config.use_layernorm {
                Some((p("ln1_g")?, p("ln1_b")?, p("ln2_g")?, p("ln2_b")?))
            } else {
                None
            };
            blocks.push(BlockVars {
                wq: p("wq")?,
                wk: p("wk")?,
                wv: p("wv")?,
                wp: p("wp")?,
                mlp_w1: p("mlp_w1")?,
                mlp_b1: p("mlp_b1")?,
                mlp_w2: p("mlp_w2")?,
                mlp_b2: p("mlp_b2")?,
                ln,
            });
        }
        Ok(Self {
            patch_embed,
            pos_embed,
            blocks,
            head_w,
            head_b,
        })
    }
}

/// Splits an `H×W×channels` image into `T` row-major patch tokens of
/// `patch²·channels` values each (pixel rows, then columns, then channels).
pub fn patchify(image: &Tensor, config: &ViTConfig) -> Result<Tensor> {
    let (h, w, ch, p) = (config.image_h, config.image_w, config.channels_in, config.patch);
    if image.shape() != [h, w, ch] {
        return Err(shape_err(
            "patchify",
            format!("image {:?}, config expects [{h}, {w}, {ch}]", image.shape()),
        ));
    }
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(shape_err("patchify", format!("patch {p} does not tile {h}x{w}")));
    }
    let src = image.data();
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(h * w * ch);
    for pr in 0..gh {
        for pc in 0..gw {
            for i in 0..p {
                let row = pr * p + i;
                let start = (row * w + pc * p) * ch;
                out.extend_from_slice(&src[start..start + p * ch]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![gh * gw, p * p * ch], out))
}

/// Multi-head self-attention with projection and residual over a stack of
/// samples: `x` is `(samples·tokens)×C`.
pub fn mhsa_on_tape(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    heads: usize,
    tokens: usize,
) -> Result<Var> {
    attention_with_residual(tape, x, x, block, heads, tokens)
}

/// Attention on `h` with the residual taken from `x` (they differ under pre-norm).
fn attention_with_residual(
    tape: &mut Tape,
    h: Var,
    x: Var,
    block: &BlockVars,
    heads: usize,
    tokens: usize,
) -> Result<Var> {
    let (rows, c) = tape.value(h)?.dims2("mhsa")?;
    if heads == 0 || c % heads != 0 {
        return Err(shape_err("mhsa", format!("{heads} heads for width {c}")));
    }
    if tokens == 0 || rows % tokens != 0 {
        return Err(shape_err("mhsa", format!("{rows} rows for {tokens} tokens")));
    }
    let d = c / heads;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let q = tape.matmul(h, block.wq)?;
    let k = tape.matmul(h, block.wk)?;
    let v = tape.matmul(h, block.wv)?;
    let mut samples = Vec::with_capacity(rows / tokens);
    for s in 0..rows / tokens {
        let r = (s * tokens, (s + 1) * tokens);
        let mut head_out = Vec::with_capacity(heads);
        for j in 0..heads {
            let cols = (j * d, (j + 1) * d);
            let qh = tape.slice(q, r, cols)?;
            let kh = tape.slice(k, r, cols)?;
            let vh = tape.slice(v, r, cols)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv_sqrt_d)?;
            let weights = tape.softmax_rows(scores)?;
            head_out.push(tape.matmul(weights, vh)?);
        }
        samples.push(if heads == 1 {
            head_out[0]
        } else {
            tape.concat_cols(&head_out)?
        });
    }
    let a = if samples.len() == 1 {
        samples[0]
    } else {
        tape.concat_rows(&samples)?
    };
    let projected = tape.matmul(a, block.wp)?;
    tape.add(projected, x)
}

/// One transformer block over `(samples·tokens)×C`.
pub fn block_on_tape(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    config: &ViTConfig,
) -> Result<Var> {
    let tokens = config.tokens();
    let (attn_in, ln2) = match block.ln {
        Some((g1, b1, g2, b2)) => (tape.layer_norm(x, g1, b1, config.ln_eps)?, Some((g2, b2))),
        None => (x, None),
    };
    let a_res = attention_with_residual(tape, attn_in, x, block, config.heads, tokens)?;
    let mlp_in = match ln2 {
        Some((g2, b2)) => tape.layer_norm(a_res, g2, b2, config.ln_eps)?,
        None => a_res,
    };
    let hidden = tape.matmul(mlp_in, block.mlp_w1)?;
    let hidden = tape.add_row(hidden, block.mlp_b1)?;
    let hidden = match config.activation {
        Activation::Relu => tape.relu(hidden)?,
        Activation::Gelu => tape.gelu(hidden)?,
    };
    let out = tape.matmul(hidden, block.mlp_w2)?;
    let out = tape.add_row(out, block.mlp_b2)?;
    tape.add(out, a_res)
}

/// Logits `samples×classes` for a batch of images.
pub fn logits_on_tape(
    tape: &mut Tape,
    model: &ModelVars,
    images: &[&Tensor],
    config: &ViTConfig,
) -> Result<Var> {
    if images.is_empty() {
        return Err(Error::Empty("image batch"));
    }
    let mut patches = Vec::with_capacity(images.len() * config.tokens() * config.patch_dim());
    for img in images {
        patches.extend(patchify(img, config)?.into_data());
    }
    let input = tape.constant(Tensor::from_parts(
        vec![images.len() * config.tokens(), config.patch_dim()],
        patches,
    ));
    let tokens = tape.matmul(input, model.patch_embed)?;
    let mut x = tape.add_tiled(tokens, model.pos_embed)?;
    for block in &model.blocks {
        x = block_on_tape(tape, x, block, config)?;
    }
    let pooled = tape.mean_row_groups(x, config.tokens())?;
    let logits = tape.matmul(pooled, model.head_w)?;
    tape.add_row(logits, model.head_b)
}

/// Eager single-sample attention: `x` is `T×C`.
pub fn mhsa(x: &Tensor, block: &BlockWeights, heads: usize) -> Result<Tensor> {
    let tokens = x.dims2("mhsa")?.0;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let bv = block.register(&mut tape);
    let out = mhsa_on_tape(&mut tape, xv, &bv, heads, tokens)?;
    Ok(tape.value(out)?.clone())
}

/// Eager single-sample transformer block: `x` is `T×C` with `T = config.tokens()`.
pub fn transformer_block(x: &Tensor, block: &BlockWeights, config: &ViTConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let bv = block.register(&mut tape);
    let out = block_on_tape(&mut tape, xv, &bv, config)?;
    Ok(tape.value(out)?.clone())
}

/// Logits `[classes]` for one image.
pub fn forward(model: &ModelWeights, image: &Tensor, config: &ViTConfig) -> Result<Tensor> {
    let batch = forward_batch(model, &[image], config)?;
    Ok(Tensor::from_parts(vec![config.classes], batch.into_data()))
}

/// Logits `samples×classes`.
pub fn forward_batch(model: &ModelWeights, images: &[&Tensor], config: &ViTConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, model, config)?;
    let logits = logits_on_tape(&mut tape, &vars, images, config)?;
    Ok(tape.value(logits)?.clone())
}

/// Mean cross-entropy of a batch and its gradient for every parameter.
pub fn loss_and_grads(
    model: &ModelWeights,
    images: &[&Tensor],
    labels: &[usize],
    config: &ViTConfig,
) -> Result<(f64, ParamSet)> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, model, config)?;
    let logits = logits_on_tape(&mut tape, &vars, images, config)?;
    let loss = tape.cross_entropy(logits, labels)?;
    Ok((tape.value(loss)?.item(), tape.backward(loss)?))
}

/// Mean cross-entropy of a batch, plus the sign pattern of every ReLU input.
pub fn loss_with_relu_pattern(
    model: &ModelWeights,
    images: &[&Tensor],
    labels: &[usize],
    config: &ViTConfig,
) -> Result<(f64, Vec<bool>)> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, model, config)?;
    let logits = logits_on_tape(&mut tape, &vars, images, config)?;
    let loss = tape.cross_entropy(logits, labels)?;
    Ok((tape.value(loss)?.item(), tape.relu_pattern()))
}

/// Floating-point operation count of one attention layer over an `H×W`
/// token grid of width `C`: `3·H·W·C² + 2·H²·W²·C`.
pub fn mhsa_flops(h: u64, w: u64, c: u64) -> Result<u64> {
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Config("mhsa_flops inputs must be positive".into()));
    }
    let ovf = || Error::Overflow("mhsa_flops");
    let hw = h.checked_mul(w).ok_or_else(ovf)?;
    let projections = 3u64
        .checked_mul(hw)
        .and_then(|v| v.checked_mul(c))
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(ovf)?;
    let mixing = 2u64
        .checked_mul(hw)
        .and_then(|v| v.checked_mul(hw))
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(ovf)?;
    projections.checked_add(mixing).ok_or_else(ovf)
}

/// Weight matrices ~ N(0, 0.02²) truncated at ±2σ; biases and the position
/// table zero; layer-norm gains one.
pub fn init_model(config: &ViTConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut params = ParamSet::new();
    for (name, shape) in config.param_shapes() {
        let leaf = name.rsplit('.').next().unwrap_or(&name);
        let n: usize = shape.iter().product();
        let data = match leaf {
            "patch_embed" | "head_w" | "wq" | "wk" | "wv" | "wp" | "mlp_w1" | "mlp_w2" => (0..n)
                .map(|_| loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= 2.0 * INIT_STD {
                        break v;
                    }
                })
                .collect(),
            "ln1_g" | "ln2_g" => vec![1.0; n],
            _ => vec![0.0; n],
        };
        params.insert(name, Tensor::from_parts(shape, data));
    }
    Ok(params)
}
