//! Convolutional stem, transformer encoder, and a decoder that runs either
//! bidirectionally (masked auto-decoding) or causally (autoregressive
//! baseline).

mod ar;
pub mod checkpoint;
mod gradcheck;

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cast, kernels, AttnLayout, Float, Graph, ParamStore, Var};
use crate::vocab::{TaskFilter, TokenId};

pub use ar::{ArOutput, KvCache};
pub use gradcheck::{grad_check, GradCheckReport};

/// Total downsampling factor of the stem.
pub const STEM_STRIDE: usize = 32;
const STEM_KERNELS: [usize; 3] = [4, 4, 2];
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Length of the learned sequence position table.
    pub max_seq_len: usize,
    pub vocab_size: usize,
    /// Training image size as `(height, width)`; both multiples of 32.
    pub image_size: (usize, usize),
    /// Channels after the first and second stem blocks.
    pub stem_channels: (usize, usize),
    /// Residual connections in every block. Turning them off is only
    /// useful for diagnostics.
    #[serde(default = "yes")]
    pub residual: bool,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    /// The default desk-scale model: 128-d, 4 heads, FFN 512, 3+3 layers.
    pub fn desk(vocab_size: usize, max_seq_len: usize) -> Self {
        ModelConfig {
            embed_dim: 128,
            num_heads: 4,
            ffn_dim: 512,
            enc_layers: 3,
            dec_layers: 3,
            max_seq_len,
            vocab_size,
            image_size: (256, 256),
            stem_channels: (32, 64),
            residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!("embed_dim {} not divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return bad(format!("embed_dim {} must be a multiple of 4", self.embed_dim));
        }
        if self.ffn_dim == 0 || self.dec_layers == 0 || self.max_seq_len == 0 || self.vocab_size == 0 {
            return bad("ffn_dim, dec_layers, max_seq_len and vocab_size must be positive".into());
        }
        if self.stem_channels.0 == 0 || self.stem_channels.1 == 0 {
            return bad("stem channels must be positive".into());
        }
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % STEM_STRIDE != 0 || w % STEM_STRIDE != 0 {
            return bad(format!("image size {h}x{w} must be a positive multiple of {STEM_STRIDE}"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// An RGB image with values in `[0, 1]`, stored row-major as `H × W × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!("raster {height}x{width} needs {} values, got {}", height * width * 3, pixels.len())));
        }
        Ok(Raster { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Raster { height, width, pixels: vec![value; height * width * 3] }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn grid(&self) -> Result<(usize, usize)> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(STEM_STRIDE) || !self.width.is_multiple_of(STEM_STRIDE) {
            return Err(Error::Shape(format!(
                "image {}x{} is not a positive multiple of {STEM_STRIDE}",
                self.height, self.width
            )));
        }
        Ok((self.height / STEM_STRIDE, self.width / STEM_STRIDE))
    }
}

/// Instrumentation for the decoding-cost claims.
#[derive(Debug, Default)]
pub struct PassCounters {
    encoder_images: AtomicUsize,
    decoder_passes: AtomicUsize,
}

impl PassCounters {
    pub fn encoder_images(&self) -> usize {
        self.encoder_images.load(Ordering::Relaxed)
    }

    /// Decoder forward calls. One call may process several sequences
    /// (one training step's views of a task) but never more than one
    /// position-dependent step for a single sequence.
    pub fn decoder_passes(&self) -> usize {
        self.decoder_passes.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.encoder_images.store(0, Ordering::Relaxed);
        self.decoder_passes.store(0, Ordering::Relaxed);
    }

    pub(crate) fn add_decoder_pass(&self) {
        self.decoder_passes.fetch_add(1, Ordering::Relaxed);
    }
}

/// Self-attention pattern of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderMode {
    Bidirectional,
    Causal,
}

/// Which decoder layers produce logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heads {
    All,
    Last,
}

/// Encoder output for a batch of images inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct Memory {
    pub tokens: Var,
    /// 2D position table tiled over the batch; added to cross-attention keys.
    pub pos: Var,
    pub n_images: usize,
    pub tokens_per_image: usize,
}

/// Encoder output for one image, outside any graph.
#[derive(Debug, Clone)]
pub struct ImageMemory<T> {
    pub tokens: Array2<T>,
    pub grid: (usize, usize),
}

impl<T: Float> ImageMemory<T> {
    /// Loads this memory into `g` as constants.
    pub fn to_graph(&self, g: &mut Graph<'_, T>) -> Memory {
        let tokens = g.constant(self.tokens.clone());
        let pos = g.constant(position_encoding_2d(self.grid.0, self.grid.1, self.tokens.ncols()));
        Memory { tokens, pos, n_images: 1, tokens_per_image: self.tokens.nrows() }
    }
}

/// A batch of decoder sequences of equal length.
#[derive(Debug, Clone, Copy)]
pub struct DecoderInput<'a> {
    /// `n_seq × seq_len` token ids, sequence-major.
    pub tokens: &'a [TokenId],
    pub seq_len: usize,
    /// Image (memory block) each sequence attends to.
    pub mem_index: &'a [usize],
}

impl DecoderInput<'_> {
    pub fn n_seq(&self) -> usize {
        self.mem_index.len()
    }
}

/// Fixed 2D sinusoidal encodings for an `h × w` grid, row-major over cells.
/// The first half of the channels encodes `y`, the second half `x`.
pub fn position_encoding_2d<T: Float>(h: usize, w: usize, dim: usize) -> Array2<T> {
    let half = dim / 2;
    let scale = 2.0 * std::f64::consts::PI;
    let mut pe = Array2::<T>::zeros((h * w, dim));
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            for (offset, pos) in [(0, (y as f64 + 0.5) / h as f64 * scale), (half, (x as f64 + 0.5) / w as f64 * scale)] {
                for i in 0..half / 2 {
                    let freq = 10000f64.powf(2.0 * i as f64 / half as f64);
                    pe[[row, offset + 2 * i]] = cast(f64::sin(pos / freq));
                    pe[[row, offset + 2 * i + 1]] = cast(f64::cos(pos / freq));
                }
            }
        }
    }
    pe
}

/// Gather map taking `k × k` neighbourhoods of a row-major `(b, y, x) × c`
/// grid into rows of `k·k·c` values ordered `(ky, kx, c)`.
fn patch_map(batch: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<usize> {
    let (oh, ow) = (h / k, w / k);
    let mut map = Vec::with_capacity(batch * h * w * c);
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    for kx in 0..k {
                        let base = ((b * h + oy * k + ky) * w + ox * k + kx) * c;
                        map.extend(base..base + c);
                    }
                }
            }
        }
    }
    map
}

fn truncated_normal<T: Float>(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<T> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * INIT_STD {
            break cast(v);
        }
    })
}

/// Encoder + decoder weights and their configuration.
#[derive(Debug)]
pub struct Model<T: Float = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    counters: PassCounters,
}

fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let d = cfg.embed_dim;
    let (c1, c2) = cfg.stem_channels;
    let mut shapes: Vec<(String, (usize, usize))> = Vec::new();
    let linear = |shapes: &mut Vec<_>, name: &str, i: usize, o: usize| {
        shapes.push((format!("{name}.weight"), (i, o)));
        shapes.push((format!("{name}.bias"), (1, o)));
    };
    let norm = |shapes: &mut Vec<(String, (usize, usize))>, name: &str| {
        shapes.push((format!("{name}.gamma"), (1, d)));
        shapes.push((format!("{name}.beta"), (1, d)));
    };
    let k = STEM_KERNELS;
    linear(&mut shapes, "stem.0", k[0] * k[0] * 3, c1);
    linear(&mut shapes, "stem.1", k[1] * k[1] * c1, c2);
    linear(&mut shapes, "stem.2", k[2] * k[2] * c2, d);
    norm(&mut shapes, "stem.norm");
    for l in 0..cfg.enc_layers {
        norm(&mut shapes, &format!("enc.{l}.ln1"));
        for p in ["q", "k", "v", "o"] {
            linear(&mut shapes, &format!("enc.{l}.attn.{p}"), d, d);
        }
        norm(&mut shapes, &format!("enc.{l}.ln2"));
        linear(&mut shapes, &format!("enc.{l}.ffn.fc1"), d, cfg.ffn_dim);
        linear(&mut shapes, &format!("enc.{l}.ffn.fc2"), cfg.ffn_dim, d);
    }
    shapes.push(("dec.tok_embed".into(), (cfg.vocab_size, d)));
    shapes.push(("dec.pos_embed".into(), (cfg.max_seq_len, d)));
    norm(&mut shapes, "dec.mem_norm");
    for l in 0..cfg.dec_layers {
        norm(&mut shapes, &format!("dec.{l}.ln1"));
        for p in ["q", "k", "v", "o"] {
            linear(&mut shapes, &format!("dec.{l}.self.{p}"), d, d);
        }
        norm(&mut shapes, &format!("dec.{l}.ln2"));
        for p in ["q", "k", "v", "o"] {
            linear(&mut shapes, &format!("dec.{l}.cross.{p}"), d, d);
        }
        norm(&mut shapes, &format!("dec.{l}.ln3"));
        linear(&mut shapes, &format!("dec.{l}.ffn.fc1"), d, cfg.ffn_dim);
        linear(&mut shapes, &format!("dec.{l}.ffn.fc2"), cfg.ffn_dim, d);
    }
    norm(&mut shapes, "dec.out_norm");
    linear(&mut shapes, "dec.head", d, cfg.vocab_size);
    shapes
}

/// Parameter name → is it trained with the stem learning rate.
pub fn is_stem_param(name: &str) -> bool {
    name.starts_with("stem.")
}

/// Parameter name → does weight decay apply (matrices, not biases or norms).
pub fn is_decayed_param(name: &str) -> bool {
    name.ends_with(".weight") || name.ends_with("_embed")
}

struct Layer<'a> {
    prefix: &'a str,
}

impl Layer<'_> {
    fn name(&self, rest: &str) -> String {
        format!("{}.{rest}", self.prefix)
    }
}

impl<T: Float> Model<T> {
    /// Fresh weights: truncated normal (σ = 0.02) matrices and embeddings,
    /// zero biases, unit norm gains.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, (r, c)) in parameter_shapes(&config) {
            let value = if name.ends_with(".gamma") {
                Array2::ones((r, c))
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                Array2::zeros((r, c))
            } else {
                truncated_normal(rng, r, c)
            };
            params.insert(name, value);
        }
        Ok(Model { config, params, counters: PassCounters::default() })
    }

    /// Wraps existing weights after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = parameter_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::Shape(format!("expected {} tensors, got {}", expected.len(), params.len())));
        }
        for (name, shape) in expected {
            let p = params.by_name(&name).ok_or_else(|| Error::Shape(format!("missing tensor {name}")))?;
            if p.dim() != shape {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {:?}", p.dim())));
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::Shape(format!("{name}: non-finite values")));
            }
        }
        Ok(Model { config, params, counters: PassCounters::default() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn counters(&self) -> &PassCounters {
        &self.counters
    }

    /// Same weights in another element type.
    pub fn cast<U: Float>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast(), counters: PassCounters::default() }
    }

    fn p(&self, g: &mut Graph<'_, T>, name: &str) -> Var {
        g.param_named(name).expect("parameter registered at construction")
    }

    fn linear(&self, g: &mut Graph<'_, T>, x: Var, name: &str) -> Var {
        let w = self.p(g, &format!("{name}.weight"));
        let b = self.p(g, &format!("{name}.bias"));
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph<'_, T>, x: Var, name: &str) -> Var {
        let gamma = self.p(g, &format!("{name}.gamma"));
        let beta = self.p(g, &format!("{name}.beta"));
        g.layer_norm(x, gamma, beta)
    }

    fn residual(&self, g: &mut Graph<'_, T>, x: Var, delta: Var) -> Var {
        if self.config.residual {
            g.add(x, delta)
        } else {
            delta
        }
    }

    fn ffn(&self, g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Var {
        let h = self.linear(g, x, &format!("{prefix}.fc1"));
        let h = g.gelu(h);
        self.linear(g, h, &format!("{prefix}.fc2"))
    }

    /// Stem features for a batch of equally sized images:
    /// `(n · h/32 · w/32) × embed_dim`, rows ordered `(image, y, x)`.
    pub fn stem_forward(&self, g: &mut Graph<'_, T>, images: &[&Raster]) -> Result<(Var, (usize, usize))> {
        let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let grid = first.grid()?;
        for im in images {
            if (im.height, im.width) != (first.height, first.width) {
                return Err(Error::Shape("images in a batch must share a size".into()));
            }
        }
        let (h, w) = (first.height, first.width);
        let k0 = STEM_KERNELS[0];
        let (h1, w1) = (h / k0, w / k0);
        let mut patches = Array2::<T>::zeros((images.len() * h1 * w1, k0 * k0 * 3));
        for (b, im) in images.iter().enumerate() {
            for y in 0..h1 {
                for x in 0..w1 {
                    let mut row = patches.row_mut((b * h1 + y) * w1 + x);
                    let mut j = 0;
                    for ky in 0..k0 {
                        for kx in 0..k0 {
                            for c in 0..3 {
                                row[j] = cast(im.get(y * k0 + ky, x * k0 + kx, c) as f64 - 0.5);
                                j += 1;
                            }
                        }
                    }
                }
            }
        }
        let n = images.len();
        let x = g.constant(patches);
        let x = self.linear(g, x, "stem.0");
        let x = g.gelu(x);
        let (c1, c2) = self.config.stem_channels;
        let k1 = STEM_KERNELS[1];
        let (h2, w2) = (h1 / k1, w1 / k1);
        let x = g.regroup(x, patch_map(n, h1, w1, c1, k1), (n * h2 * w2, k1 * k1 * c1));
        let x = self.linear(g, x, "stem.1");
        let x = g.gelu(x);
        let k2 = STEM_KERNELS[2];
        let x = g.regroup(x, patch_map(n, h2, w2, c2, k2), (n * grid.0 * grid.1, k2 * k2 * c2));
        let x = self.linear(g, x, "stem.2");
        let x = self.norm(g, x, "stem.norm");
        Ok((x, grid))
    }

    /// Encoder layers over `x` (features with position encodings already
    /// added), attending within each image's block of rows.
    pub fn encoder_forward(&self, g: &mut Graph<'_, T>, x: Var, n_images: usize, tokens_per_image: usize) -> Var {
        let heads = self.config.num_heads;
        let mut x = x;
        for l in 0..self.config.enc_layers {
            let layer = Layer { prefix: &format!("enc.{l}") };
            let h = self.norm(g, x, &layer.name("ln1"));
            let q = self.linear(g, h, &layer.name("attn.q"));
            let k = self.linear(g, h, &layer.name("attn.k"));
            let v = self.linear(g, h, &layer.name("attn.v"));
            let a = g.attention(q, k, v, AttnLayout::self_attention(heads, n_images, tokens_per_image, false));
            let a = self.linear(g, a, &layer.name("attn.o"));
            x = self.residual(g, x, a);
            let h = self.norm(g, x, &layer.name("ln2"));
            let f = self.ffn(g, h, &layer.name("ffn"));
            x = self.residual(g, x, f);
        }
        x
    }

    /// Stem + position encodings + encoder. Each image counts once on the
    /// encoder counter.
    pub fn encode(&self, g: &mut Graph<'_, T>, images: &[&Raster]) -> Result<Memory> {
        let (feats, grid) = self.stem_forward(g, images)?;
        let s = grid.0 * grid.1;
        let pe = position_encoding_2d::<T>(grid.0, grid.1, self.config.embed_dim);
        let tiled = ndarray::concatenate(Axis(0), &vec![pe.view(); images.len()]).expect("same widths");
        let pos = g.constant(tiled);
        let x = g.add(feats, pos);
        let tokens = self.encoder_forward(g, x, images.len(), s);
        self.counters.encoder_images.fetch_add(images.len(), Ordering::Relaxed);
        Ok(Memory { tokens, pos, n_images: images.len(), tokens_per_image: s })
    }

    /// Encodes one image outside of any training graph.
    pub fn image_memory(&self, image: &Raster) -> Result<ImageMemory<T>> {
        let mut g = Graph::inference(&self.params);
        let mem = self.encode(&mut g, &[image])?;
        Ok(ImageMemory { tokens: g.value(mem.tokens).clone(), grid: image.grid()? })
    }

    /// One decoder forward pass over a batch of sequences.
    ///
    /// `out_rows` selects which positions of every sequence get logits; the
    /// result has one `(n_seq · out_rows.len()) × vocab` matrix per decoder
    /// layer (or only the last with [`Heads::Last`]). All layers share the
    /// output norm and projection.
    pub fn decoder_forward(
        &self,
        g: &mut Graph<'_, T>,
        memory: &Memory,
        input: DecoderInput<'_>,
        mode: DecoderMode,
        out_rows: &[usize],
        heads: Heads,
    ) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let (n_seq, len) = (input.n_seq(), input.seq_len);
        if len > cfg.max_seq_len {
            return Err(Error::SequenceTooLong { len, max: cfg.max_seq_len });
        }
        if input.tokens.len() != n_seq * len || len == 0 {
            return Err(Error::Shape(format!("{} tokens for {n_seq} sequences of length {len}", input.tokens.len())));
        }
        if let Some(&bad) = input.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        if let Some(&bad) = input.mem_index.iter().find(|&&m| m >= memory.n_images) {
            return Err(Error::Shape(format!("memory index {bad} outside batch of {}", memory.n_images)));
        }
        if let Some(&bad) = out_rows.iter().find(|&&r| r >= len) {
            return Err(Error::Shape(format!("output row {bad} outside sequence of length {len}")));
        }
        self.counters.add_decoder_pass();

        let heads_n = cfg.num_heads;
        let s = memory.tokens_per_image;
        let tok = self.p(g, "dec.tok_embed");
        let embedded = g.rows(tok, input.tokens.iter().map(|&t| t as usize).collect());
        let pos_table = self.p(g, "dec.pos_embed");
        let pos = g.rows(pos_table, (0..n_seq).flat_map(|_| 0..len).collect());
        let x0 = g.add(embedded, pos);
        let mem = self.norm(g, memory.tokens, "dec.mem_norm");
        let mem_keys = g.add(mem, memory.pos);
        let select: Vec<usize> = (0..n_seq).flat_map(|q| out_rows.iter().map(move |&r| q * len + r)).collect();
        let causal = mode == DecoderMode::Causal;

        let mut x = x0;
        let mut outputs = Vec::new();
        for l in 0..cfg.dec_layers {
            let layer = Layer { prefix: &format!("dec.{l}") };
            let h = self.norm(g, x, &layer.name("ln1"));
            let hp = g.add(h, pos);
            let q = self.linear(g, hp, &layer.name("self.q"));
            let k = self.linear(g, hp, &layer.name("self.k"));
            let v = self.linear(g, hp, &layer.name("self.v"));
            let a = g.attention(q, k, v, AttnLayout::self_attention(heads_n, n_seq, len, causal));
            let a = self.linear(g, a, &layer.name("self.o"));
            x = self.residual(g, x, a);

            let h = self.norm(g, x, &layer.name("ln2"));
            let hp = g.add(h, pos);
            let q = self.linear(g, hp, &layer.name("cross.q"));
            let k = self.linear(g, mem_keys, &layer.name("cross.k"));
            let v = self.linear(g, mem, &layer.name("cross.v"));
            let a = g.attention(q, k, v, AttnLayout::cross(heads_n, len, s, input.mem_index.to_vec()));
            let a = self.linear(g, a, &layer.name("cross.o"));
            x = self.residual(g, x, a);

            let h = self.norm(g, x, &layer.name("ln3"));
            let f = self.ffn(g, h, &layer.name("ffn"));
            x = self.residual(g, x, f);

            if heads == Heads::All || l + 1 == cfg.dec_layers {
                let picked = g.rows(x, select.clone());
                let normed = self.norm(g, picked, "dec.out_norm");
                outputs.push(self.linear(g, normed, "dec.head"));
            }
        }
        Ok(outputs)
    }

    /// Last-layer probabilities over `filter` for positions
    /// `prompt_len..` of one bidirectionally decoded sequence: one pass.
    pub fn mad_probs(&self, memory: &ImageMemory<T>, tokens: &[TokenId], prompt_len: usize, filter: &TaskFilter) -> Result<Array2<f32>> {
        let mut g = Graph::inference(&self.params);
        let mem = memory.to_graph(&mut g);
        let rows: Vec<usize> = (prompt_len..tokens.len()).collect();
        let input = DecoderInput { tokens, seq_len: tokens.len(), mem_index: &[0] };
        let logits = self.decoder_forward(&mut g, &mem, input, DecoderMode::Bidirectional, &rows, Heads::Last)?;
        Ok(kernels::filtered_softmax(g.value(logits[0]).view(), filter.ids()))
    }
}

#[cfg(test)]
mod tests;
