//! Forward passes of the segmentation network, recorded on a [`Tape`].
//!
//! The public functions at the bottom of this file are the per-component
//! entry points; they all route through the same tape-level builders that
//! training differentiates, so inference and training share one code path.

use std::cell::Cell;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use super::params::{ModelConfig, ModelParams, DECODER_BLOCKS};
use crate::autograd::{ConvGeom, Tape, Var};
use crate::distributions::GaussianDiag;
use crate::error::{Error, Result};
use crate::image::{BinaryMask, BoxPrompt, Image};
use crate::losses::DICE_EPS;
use crate::tensor::Tensor;

/// Encoder output, channel-major `[C, h*w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding {
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub data: Tensor,
}

/// Prompt tokens `[K, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTokens {
    pub tokens: Tensor,
}

impl SparseTokens {
    pub fn rows(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Dense prompt signal, channel-major `[C, h*w]` like [`ImageEmbedding`].
#[derive(Clone, Debug, PartialEq)]
pub struct DenseEmbedding {
    pub data: Tensor,
}

/// Per-pixel mask logits, row-major `H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Logits {
    /// Binary mask at `sigmoid(logit) > 0.5`.
    pub fn to_mask(&self) -> BinaryMask {
        let bits = self.values.iter().map(|&l| crate::losses::sigmoid(l) > 0.5).collect();
        BinaryMask::new(self.height, self.width, bits).expect("logit count matches shape")
    }

    pub fn probs(&self) -> Vec<f64> {
        self.values.iter().map(|&l| crate::losses::sigmoid(l)).collect()
    }
}

thread_local! {
    static IMAGE_ENCODER_CALLS: Cell<usize> = const { Cell::new(0) };
    static PROMPT_ENCODER_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of image- and prompt-encoder evaluations on the current thread.
pub fn encoder_call_counts() -> (usize, usize) {
    (IMAGE_ENCODER_CALLS.with(Cell::get), PROMPT_ENCODER_CALLS.with(Cell::get))
}

pub fn reset_encoder_call_counts() {
    IMAGE_ENCODER_CALLS.with(|c| c.set(0));
    PROMPT_ENCODER_CALLS.with(|c| c.set(0));
}

/// Dropout applied inside the decoder in baseline mode.
pub(crate) struct Dropout<'r> {
    pub p: f64,
    pub rng: &'r mut dyn RngCore,
}

/// Tape plus lazily bound parameter leaves.
pub(crate) struct Graph<'p> {
    pub tape: Tape,
    pub params: &'p ModelParams,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ModelParams, track_grads: bool) -> Self {
        Self { tape: Tape::new(), params, bound: vec![None; params.params().len()], track: track_grads }
    }

    pub fn cfg(&self) -> &'p ModelConfig {
        self.params.config()
    }

    /// Leaf for the named tensor; bound once per graph.
    pub fn p(&mut self, name: &str) -> Var {
        let i = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(v) = self.bound[i] {
            return v;
        }
        let t = &self.params.params()[i].tensor;
        let shape = [t.shape()[0], t.shape()[1]];
        let v = self.tape.leaf(t, shape, self.track && self.params.is_updatable(i));
        self.bound[i] = Some(v);
        v
    }

    /// Gradients of `root` for every bound, updatable parameter.
    pub fn param_grads(&self, root: Var) -> Vec<Option<Vec<f64>>> {
        let mut grads = self.tape.backward(root);
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        self.tape.linear(x, w, b)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Var {
        let g = self.p(&format!("{prefix}.g"));
        let b = self.p(&format!("{prefix}.b"));
        self.tape.layer_norm(x, g, b)
    }

    fn dropout(&mut self, x: Var, drop: &mut Option<Dropout<'_>>) -> Var {
        let Some(d) = drop else { return x };
        if d.p == 0.0 {
            return x;
        }
        let shape = self.tape.shape(x);
        let keep = 1.0 / (1.0 - d.p);
        let mask: Vec<f64> = (0..shape[0] * shape[1])
            .map(|_| if d.rng.gen::<f64>() < d.p { 0.0 } else { keep })
            .collect();
        let m = self.tape.constant(mask, shape);
        self.tape.mul(x, m)
    }

    fn attention(&mut self, prefix: &str, q_in: Var, k_in: Var, v_in: Var) -> Var {
        let c = self.cfg().channels;
        let q = self.linear(q_in, &format!("{prefix}.q"));
        let k = self.linear(k_in, &format!("{prefix}.k"));
        let v = self.linear(v_in, &format!("{prefix}.v"));
        let scores = self.tape.matmul(q, k, false, true);
        let scores = self.tape.scale(scores, 1.0 / (c as f64).sqrt());
        let attn = self.tape.softmax_rows(scores);
        let out = self.tape.matmul(attn, v, false, false);
        self.linear(out, &format!("{prefix}.o"))
    }
}

/// Fourier features of a point with coordinates normalized to `[0, 1]`.
fn fourier_features(gauss: &[f64], half: usize, x: f64, y: f64) -> Vec<f64> {
    let (cx, cy) = (2.0 * x - 1.0, 2.0 * y - 1.0);
    let mut out = vec![0.0; 2 * half];
    for j in 0..half {
        let proj = std::f64::consts::TAU * (cx * gauss[j] + cy * gauss[half + j]);
        out[j] = proj.sin();
        out[half + j] = proj.cos();
    }
    out
}

/// Positional encoding of every embedding-grid cell, `[h*w, C]`.
fn grid_positional(params: &ModelParams) -> Vec<f64> {
    let cfg = params.config();
    let gauss = params.get("prompt.pe_gaussian").expect("pe buffer").data();
    let half = cfg.channels / 2;
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    let mut out = Vec::with_capacity(gh * gw * cfg.channels);
    for i in 0..gh {
        for j in 0..gw {
            let x = (j as f64 + 0.5) / gw as f64;
            let y = (i as f64 + 0.5) / gh as f64;
            out.extend(fourier_features(gauss, half, x, y));
        }
    }
    out
}

fn check_image(cfg: &ModelConfig, img: &Image) -> Result<()> {
    if img.height() != cfg.height || img.width() != cfg.width {
        return Err(Error::Dimension(format!(
            "image is {}x{}, model expects {}x{}",
            img.height(),
            img.width(),
            cfg.height,
            cfg.width
        )));
    }
    Ok(())
}

fn check_mask(cfg: &ModelConfig, mask: &BinaryMask) -> Result<()> {
    if mask.height() != cfg.height || mask.width() != cfg.width {
        return Err(Error::Dimension(format!(
            "mask is {}x{}, model expects {}x{}",
            mask.height(),
            mask.width(),
            cfg.height,
            cfg.width
        )));
    }
    Ok(())
}

pub(crate) fn encode_image_t(g: &mut Graph<'_>, img: &Image) -> Result<Var> {
    let cfg = g.cfg();
    check_image(cfg, img)?;
    IMAGE_ENCODER_CALLS.with(|c| c.set(c.get() + 1));
    let mut x = g.tape.constant(img.pixels().to_vec(), [1, cfg.height * cfg.width]);
    let (mut h, mut w, mut c_in) = (cfg.height, cfg.width, 1);
    for i in 0..cfg.stages() {
        let c_out = cfg.encoder_channels(i);
        let geom = ConvGeom { c_in, h, w, c_out, k: 3, stride: 2, pad: 1 };
        let wv = g.p(&format!("encoder.conv{i}.w"));
        let bv = g.p(&format!("encoder.conv{i}.b"));
        x = g.tape.conv2d(x, wv, bv, geom);
        x = g.tape.gelu(x);
        h = geom.out_h();
        w = geom.out_w();
        c_in = c_out;
    }
    let geom = ConvGeom { c_in, h, w, c_out: cfg.channels, k: 1, stride: 1, pad: 0 };
    let wv = g.p("encoder.neck.w");
    let bv = g.p("encoder.neck.b");
    Ok(g.tape.conv2d(x, wv, bv, geom))
}

/// Returns `(sparse [2, C], dense [C, h*w])`.
pub(crate) fn encode_prompt_t(g: &mut Graph<'_>, bx: &BoxPrompt) -> Result<(Var, Var)> {
    let cfg = g.cfg();
    bx.validate(cfg.height, cfg.width)?;
    PROMPT_ENCODER_CALLS.with(|c| c.set(c.get() + 1));
    let c = cfg.channels;
    let gauss = g.params.get("prompt.pe_gaussian").expect("pe buffer").data();
    let (wf, hf) = (cfg.width as f64, cfg.height as f64);
    let mut pe = fourier_features(gauss, c / 2, (bx.x1 as f64 + 0.5) / wf, (bx.y1 as f64 + 0.5) / hf);
    pe.extend(fourier_features(gauss, c / 2, (bx.x2 as f64 - 0.5) / wf, (bx.y2 as f64 - 0.5) / hf));
    let pe = g.tape.constant(pe, [2, c]);
    let proj = g.linear(pe, "prompt.proj");
    let c0 = g.p("prompt.corner0");
    let c1 = g.p("prompt.corner1");
    let corners = g.tape.concat_rows(c0, c1);
    let sparse = g.tape.add(proj, corners);

    let hw = cfg.grid_h() * cfg.grid_w();
    let zeros = g.tape.constant(vec![0.0; hw * c], [hw, c]);
    let no_mask = g.p("prompt.no_mask");
    let dense = g.tape.add_row(zeros, no_mask);
    let dense = g.tape.transpose(dense);
    Ok((sparse, dense))
}

fn split_gaussian(g: &mut Graph<'_>, stacked: Var) -> (Var, Var) {
    let l = g.cfg().latent_dim;
    let two = g.tape.reshape(stacked, [2, l]);
    let mu = g.tape.slice_rows(two, 0, 1);
    let lv = g.tape.slice_rows(two, 1, 1);
    (mu, lv)
}

/// Prior head: global average pool, then a two-layer MLP to `(mu, log_var)`.
pub(crate) fn prior_t(g: &mut Graph<'_>, emb: Var) -> (Var, Var) {
    let pooled = g.tape.mean_cols(emb);
    let h = g.linear(pooled, "prior.fc1");
    let h = g.tape.gelu(h);
    let out = g.linear(h, "prior.fc2");
    split_gaussian(g, out)
}

/// Area-pools an `H x W` mask onto the embedding grid.
fn pool_mask(cfg: &ModelConfig, mask: &BinaryMask) -> Vec<f64> {
    let s = cfg.downscale;
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    let mut out = vec![0.0; gh * gw];
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            if mask.get(y, x) {
                out[(y / s) * gw + x / s] += 1.0;
            }
        }
    }
    let area = (s * s) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    out
}

/// Posterior head: the pooled mask joins the embedding as an extra channel,
/// then a per-cell projection, global average pool and two-layer MLP.
pub(crate) fn posterior_t(g: &mut Graph<'_>, emb: Var, gt: &BinaryMask) -> Result<(Var, Var)> {
    let cfg = g.cfg();
    check_mask(cfg, gt)?;
    let hw = cfg.grid_h() * cfg.grid_w();
    let pooled = g.tape.constant(pool_mask(cfg, gt), [1, hw]);
    let joined = g.tape.concat_rows(emb, pooled);
    let cells = g.tape.transpose(joined);
    let h = g.linear(cells, "posterior.pix");
    let h = g.tape.gelu(h);
    let h = g.tape.mean_rows(h);
    let h = g.linear(h, "posterior.fc1");
    let h = g.tape.gelu(h);
    let out = g.linear(h, "posterior.fc2");
    Ok(split_gaussian(g, out))
}

/// `mu + exp(log_var / 2) * noise` on the tape.
pub(crate) fn reparam_t(g: &mut Graph<'_>, mu: Var, lv: Var, noise: &[f64]) -> Result<Var> {
    let l = g.cfg().latent_dim;
    if noise.len() != l {
        return Err(Error::Dimension(format!("noise has length {}, latent dimension is {l}", noise.len())));
    }
    let half = g.tape.scale(lv, 0.5);
    let std = g.tape.exp(half);
    let eps = g.tape.constant(noise.to_vec(), [1, l]);
    let spread = g.tape.mul(std, eps);
    Ok(g.tape.add(mu, spread))
}

/// Adds the projected latent to every sparse token row.
pub(crate) fn inject_t(g: &mut Graph<'_>, z: Var, tokens: Var) -> Var {
    let h = g.linear(z, "projector.fc1");
    let h = g.tape.gelu(h);
    let shift = g.linear(h, "projector.fc2");
    g.tape.add_row(tokens, shift)
}

/// Two-way transformer decoder; returns logits `[1, H*W]`.
pub(crate) fn decode_t(
    g: &mut Graph<'_>,
    emb: Var,
    sparse: Var,
    dense: Var,
    drop: &mut Option<Dropout<'_>>,
) -> Var {
    let cfg = g.cfg();
    let c = cfg.channels;
    let hw = cfg.grid_h() * cfg.grid_w();

    let src = g.tape.add(emb, dense);
    let src = g.tape.transpose(src);
    let pos = g.tape.constant(grid_positional(g.params), [hw, c]);
    let mut keys = g.tape.add(src, pos);

    let out_token = g.p("decoder.output_token");
    let mut queries = g.tape.concat_rows(out_token, sparse);

    for blk in 0..DECODER_BLOCKS {
        let pre = format!("decoder.block{blk}");
        let a = g.attention(&format!("{pre}.self_attn"), queries, queries, queries);
        let a = g.dropout(a, drop);
        let q = g.tape.add(queries, a);
        let q = g.norm(q, &format!("{pre}.norm1"));

        let a = g.attention(&format!("{pre}.t2i"), q, keys, keys);
        let a = g.dropout(a, drop);
        let q2 = g.tape.add(q, a);
        let q2 = g.norm(q2, &format!("{pre}.norm2"));

        let m = g.linear(q2, &format!("{pre}.mlp.fc1"));
        let m = g.tape.gelu(m);
        let m = g.dropout(m, drop);
        let m = g.linear(m, &format!("{pre}.mlp.fc2"));
        let q3 = g.tape.add(q2, m);
        queries = g.norm(q3, &format!("{pre}.norm3"));

        let a = g.attention(&format!("{pre}.i2t"), keys, queries, queries);
        let a = g.dropout(a, drop);
        let k2 = g.tape.add(keys, a);
        keys = g.norm(k2, &format!("{pre}.norm4"));
    }
    let a = g.attention("decoder.final_attn", queries, keys, keys);
    let a = g.dropout(a, drop);
    let q = g.tape.add(queries, a);
    let queries = g.norm(q, "decoder.final_norm");

    let token = g.tape.slice_rows(queries, 0, 1);
    let h = g.linear(token, "decoder.hyper.fc1");
    let h = g.tape.gelu(h);
    let h = g.dropout(h, drop);
    let hyper = g.linear(h, "decoder.hyper.fc2");

    let mut up = g.tape.transpose(keys);
    let (mut h_, mut w_) = (cfg.grid_h(), cfg.grid_w());
    for i in 0..cfg.stages() {
        let wv = g.p(&format!("decoder.up{i}.w"));
        let bv = g.p(&format!("decoder.up{i}.b"));
        up = g.tape.conv_t2x2(up, wv, bv, h_, w_);
        up = g.tape.gelu(up);
        h_ *= 2;
        w_ *= 2;
    }
    g.tape.matmul(hyper, up, false, false)
}

/// Handles of one training-objective graph.
pub(crate) struct Objective {
    pub total: Var,
    pub bce: Var,
    pub dice: Var,
    pub kl: Option<Var>,
    pub logits: Var,
    pub posterior: Option<(Var, Var)>,
    pub prior: (Var, Var),
}

/// Full training path: posterior sample, latent injection, decoding and
/// `BCE + Dice + beta * KL(q || p)`.
pub(crate) fn build_objective(
    g: &mut Graph<'_>,
    img: &Image,
    bx: &BoxPrompt,
    gt: &BinaryMask,
    noise: &[f64],
    beta: f64,
) -> Result<Objective> {
    let emb = encode_image_t(g, img)?;
    let (sparse, dense) = encode_prompt_t(g, bx)?;
    let (mq, lq) = posterior_t(g, emb, gt)?;
    let (mp, lp) = prior_t(g, emb);
    let z = reparam_t(g, mq, lq, noise)?;
    let tokens = inject_t(g, z, sparse);
    let logits = decode_t(g, emb, tokens, dense, &mut None);
    let probs = g.tape.sigmoid(logits);
    let target = gt.as_f64();
    let bce = g.tape.bce(probs, target.clone());
    let dice = g.tape.dice(probs, target, DICE_EPS);
    let kl = g.tape.kl(mq, lq, mp, lp);
    let recon = g.tape.add(bce, dice);
    let weighted = g.tape.scale(kl, beta);
    let total = g.tape.add(recon, weighted);
    Ok(Objective { total, bce, dice, kl: Some(kl), logits, posterior: Some((mq, lq)), prior: (mp, lp) })
}

/// Dropout-baseline training path: latent fixed at the prior mean, dropout
/// active in the decoder, reconstruction loss only.
pub(crate) fn build_dropout_objective(
    g: &mut Graph<'_>,
    img: &Image,
    bx: &BoxPrompt,
    gt: &BinaryMask,
    rng: &mut dyn RngCore,
) -> Result<Objective> {
    let emb = encode_image_t(g, img)?;
    let (sparse, dense) = encode_prompt_t(g, bx)?;
    let (mp, lp) = prior_t(g, emb);
    let tokens = inject_t(g, mp, sparse);
    let p = g.cfg().dropout_p;
    let logits = decode_t(g, emb, tokens, dense, &mut Some(Dropout { p, rng }));
    let probs = g.tape.sigmoid(logits);
    let target = gt.as_f64();
    let bce = g.tape.bce(probs, target.clone());
    let dice = g.tape.dice(probs, target, DICE_EPS);
    let total = g.tape.add(bce, dice);
    Ok(Objective { total, bce, dice, kl: None, logits, posterior: None, prior: (mp, lp) })
}

fn read_gaussian(tape: &Tape, (mu, lv): (Var, Var)) -> Result<GaussianDiag> {
    GaussianDiag::new(tape.value(mu).to_vec(), tape.value(lv).to_vec())
}

fn logits_of(cfg: &ModelConfig, tape: &Tape, v: Var) -> Logits {
    Logits { height: cfg.height, width: cfg.width, values: tape.value(v).to_vec() }
}

fn embedding_var(g: &mut Graph<'_>, emb: &ImageEmbedding) -> Result<Var> {
    let cfg = g.cfg();
    let want = [cfg.channels, cfg.grid_h() * cfg.grid_w()];
    if emb.data.shape() != want {
        return Err(Error::Dimension(format!("embedding shape {:?}, expected {:?}", emb.data.shape(), want)));
    }
    Ok(g.tape.leaf(&emb.data, want, false))
}

fn tokens_var(g: &mut Graph<'_>, tokens: &SparseTokens) -> Result<Var> {
    let c = g.cfg().channels;
    if tokens.cols() != c || tokens.rows() == 0 {
        return Err(Error::Dimension(format!("token matrix {:?}, expected [K>=1, {c}]", tokens.tokens.shape())));
    }
    Ok(g.tape.leaf(&tokens.tokens, [tokens.rows(), c], false))
}

fn dense_var(g: &mut Graph<'_>, dense: &DenseEmbedding) -> Result<Var> {
    let cfg = g.cfg();
    let want = [cfg.channels, cfg.grid_h() * cfg.grid_w()];
    if dense.data.shape() != want {
        return Err(Error::Dimension(format!("dense embedding shape {:?}, expected {:?}", dense.data.shape(), want)));
    }
    Ok(g.tape.leaf(&dense.data, want, false))
}

fn tensor_of(tape: &Tape, v: Var) -> Tensor {
    let [r, c] = tape.shape(v);
    Tensor::new(vec![r, c], tape.value(v).to_vec()).expect("tape shape")
}

pub fn encode_image(params: &ModelParams, img: &Image) -> Result<ImageEmbedding> {
    let mut g = Graph::new(params, false);
    let v = encode_image_t(&mut g, img)?;
    let cfg = params.config();
    Ok(ImageEmbedding { channels: cfg.channels, grid_h: cfg.grid_h(), grid_w: cfg.grid_w(), data: tensor_of(&g.tape, v) })
}

pub fn encode_prompt(params: &ModelParams, bx: &BoxPrompt) -> Result<(SparseTokens, DenseEmbedding)> {
    let mut g = Graph::new(params, false);
    let (s, d) = encode_prompt_t(&mut g, bx)?;
    Ok((SparseTokens { tokens: tensor_of(&g.tape, s) }, DenseEmbedding { data: tensor_of(&g.tape, d) }))
}

pub fn prior_forward(params: &ModelParams, emb: &ImageEmbedding) -> Result<GaussianDiag> {
    let mut g = Graph::new(params, false);
    let e = embedding_var(&mut g, emb)?;
    let out = prior_t(&mut g, e);
    read_gaussian(&g.tape, out)
}

pub fn posterior_forward(params: &ModelParams, emb: &ImageEmbedding, gt: &BinaryMask) -> Result<GaussianDiag> {
    let mut g = Graph::new(params, false);
    let e = embedding_var(&mut g, emb)?;
    let out = posterior_t(&mut g, e, gt)?;
    read_gaussian(&g.tape, out)
}

pub fn inject_latent(params: &ModelParams, z: &[f64], tokens: &SparseTokens) -> Result<SparseTokens> {
    let l = params.config().latent_dim;
    if z.len() != l {
        return Err(Error::Dimension(format!("latent has length {}, expected {l}", z.len())));
    }
    let mut g = Graph::new(params, false);
    let t = tokens_var(&mut g, tokens)?;
    let zv = g.tape.constant(z.to_vec(), [1, l]);
    let out = inject_t(&mut g, zv, t);
    Ok(SparseTokens { tokens: tensor_of(&g.tape, out) })
}

/// Mask decoder. `rng` must be provided exactly when `dropout_active`.
pub fn decode(
    params: &ModelParams,
    emb: &ImageEmbedding,
    tokens: &SparseTokens,
    dense: &DenseEmbedding,
    dropout_active: bool,
    rng: Option<&mut dyn RngCore>,
) -> Result<Logits> {
    let mut g = Graph::new(params, false);
    let e = embedding_var(&mut g, emb)?;
    let t = tokens_var(&mut g, tokens)?;
    let d = dense_var(&mut g, dense)?;
    let mut drop = match (dropout_active, rng) {
        (true, Some(rng)) => Some(Dropout { p: params.config().dropout_p, rng }),
        (true, None) => return Err(Error::Validation("dropout decoding requires an rng".into())),
        (false, _) => None,
    };
    let out = decode_t(&mut g, e, t, d, &mut drop);
    Ok(logits_of(params.config(), &g.tape, out))
}

/// Training-path forward pass with the posterior sampled using `noise`.
/// Returns the logits with the posterior `q` and prior `p`.
pub fn forward_train(
    params: &ModelParams,
    img: &Image,
    bx: &BoxPrompt,
    chosen_gt: &BinaryMask,
    noise: &[f64],
) -> Result<(Logits, GaussianDiag, GaussianDiag)> {
    let mut g = Graph::new(params, false);
    let obj = build_objective(&mut g, img, bx, chosen_gt, noise, 0.0)?;
    let q = read_gaussian(&g.tape, obj.posterior.expect("posterior path"))?;
    let p = read_gaussian(&g.tape, obj.prior)?;
    Ok((logits_of(params.config(), &g.tape, obj.logits), q, p))
}

/// Image and prompt encoded once; decodes any number of latents.
pub struct Sampler<'p> {
    params: &'p ModelParams,
    emb: ImageEmbedding,
    sparse: SparseTokens,
    dense: DenseEmbedding,
    prior: GaussianDiag,
}

impl<'p> Sampler<'p> {
    pub fn new(params: &'p ModelParams, img: &Image, bx: &BoxPrompt) -> Result<Self> {
        let emb = encode_image(params, img)?;
        let (sparse, dense) = encode_prompt(params, bx)?;
        let prior = prior_forward(params, &emb)?;
        Ok(Self { params, emb, sparse, dense, prior })
    }

    pub fn prior(&self) -> &GaussianDiag {
        &self.prior
    }

    pub fn embedding(&self) -> &ImageEmbedding {
        &self.emb
    }

    pub fn decode_latent(&self, z: &[f64], dropout_rng: Option<&mut dyn RngCore>) -> Result<Logits> {
        let tokens = inject_latent(self.params, z, &self.sparse)?;
        let active = dropout_rng.is_some();
        decode(self.params, &self.emb, &tokens, &self.dense, active, dropout_rng)
    }

    /// Prediction at `z = mu_prior`, no dropout.
    pub fn central(&self) -> Result<Logits> {
        self.decode_latent(self.prior.mu(), None)
    }

    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<BinaryMask> {
        let noise: Vec<f64> = (0..self.prior.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let z = crate::distributions::sample_reparam(&self.prior, &noise)?;
        Ok(self.decode_latent(&z, None)?.to_mask())
    }

    pub fn sample_dropout<R: RngCore>(&self, rng: &mut R) -> Result<BinaryMask> {
        Ok(self.decode_latent(self.prior.mu(), Some(rng as &mut dyn RngCore))?.to_mask())
    }
}

fn check_count(m: usize) -> Result<()> {
    if m < 1 {
        return Err(Error::Validation("sample count M must be at least 1".into()));
    }
    Ok(())
}

/// Draws `m` masks with latents sampled from the prior.
pub fn forward_sample<R: Rng>(
    params: &ModelParams,
    img: &Image,
    bx: &BoxPrompt,
    m: usize,
    rng: &mut R,
) -> Result<Vec<BinaryMask>> {
    check_count(m)?;
    let sampler = Sampler::new(params, img, bx)?;
    (0..m).map(|_| sampler.sample_prior(rng)).collect()
}

/// Dropout baseline: latent at the prior mean, decoder dropout per draw.
pub fn forward_sample_dropout<R: Rng>(
    params: &ModelParams,
    img: &Image,
    bx: &BoxPrompt,
    m: usize,
    rng: &mut R,
) -> Result<Vec<BinaryMask>> {
    check_count(m)?;
    let sampler = Sampler::new(params, img, bx)?;
    (0..m).map(|_| sampler.sample_dropout(rng)).collect()
}
