//! Timestep-conditioned Unet: residual blocks with group normalization,
//! sinusoidal timestep conditioning, self-attention at chosen levels, and
//! skip connections between mirrored encoder and decoder levels.
//!
//! The final 1×1 projection is the only part that differs between the
//! noise-prediction and segmentation uses; both heads live side by side
//! and [`UnetModel::set_head`] picks one. Everything else is shared.

mod checkpoint;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{Denoiser, NoisePredictor};
use crate::error::{bail, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

pub const HEAD_NOISE: &str = "head_noise";
pub const HEAD_SEGMENTATION: &str = "head_seg";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    pub num_res_blocks: usize,
    /// Level indices (0 = full resolution) that get self-attention.
    pub attention_levels: Vec<usize>,
    pub time_embed_dim: usize,
    pub out_channels_noise: usize,
    pub num_classes: usize,
    /// Maximum timestep accepted by the embedding.
    pub diffusion_steps: usize,
    pub norm_groups: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig {
            in_channels: 1,
            base_width: 32,
            channel_mults: vec![1, 2, 4],
            num_res_blocks: 2,
            attention_levels: vec![2],
            time_embed_dim: 128,
            out_channels_noise: 1,
            num_classes: 6,
            diffusion_steps: 100,
            norm_groups: 8,
        }
    }
}

impl UnetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    /// Spatial sizes must be divisible by this.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn level_width(&self, level: usize) -> usize {
        self.channel_mults[level] * self.base_width
    }

    /// Channel width of a tap point.
    pub fn block_channels(&self, id: BlockId) -> Result<usize> {
        match id {
            BlockId::Middle => Ok(self.level_width(self.levels() - 1)),
            BlockId::Decoder(l) if l < self.levels() => Ok(self.level_width(l)),
            _ => bail!(Config, "block {id} does not exist"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            bail!(Config, "channel_mults must be non-empty and positive: {:?}", self.channel_mults);
        }
        if self.base_width == 0 || self.in_channels == 0 || self.num_classes == 0 || self.out_channels_noise == 0 {
            bail!(Config, "widths and channel counts must be positive");
        }
        if !self.base_width.is_multiple_of(2) || self.time_embed_dim == 0 {
            bail!(Config, "base_width must be even (sinusoidal embedding) and time_embed_dim positive");
        }
        if let Some(l) = self.attention_levels.iter().find(|&&l| l >= self.levels()) {
            bail!(Config, "attention level {l} beyond {} levels", self.levels());
        }
        if self.diffusion_steps == 0 || self.norm_groups == 0 {
            bail!(Config, "diffusion_steps and norm_groups must be positive");
        }
        Ok(())
    }

    fn groups_for(&self, channels: usize) -> usize {
        let g = self.norm_groups.min(channels);
        (1..=g).rev().find(|d| channels.is_multiple_of(*d)).unwrap_or(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Noise,
    Segmentation,
}

impl HeadMode {
    pub fn to_u8(self) -> u8 {
        match self {
            HeadMode::Noise => 0,
            HeadMode::Segmentation => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(HeadMode::Noise),
            1 => Ok(HeadMode::Segmentation),
            other => bail!(Format, "unknown head mode byte {other}"),
        }
    }
}

/// Activation tapped by feature extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BlockId {
    /// Output of the middle (bottleneck) block.
    Middle,
    /// Output of a decoder level before its upsampling; 0 is full resolution.
    Decoder(usize),
}

impl std::str::FromStr for BlockId {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mid" {
            return Ok(BlockId::Middle);
        }
        if let Some(l) = s.strip_prefix("dec").and_then(|v| v.parse().ok()) {
            return Ok(BlockId::Decoder(l));
        }
        bail!(Config, "unknown block id {s:?} (expected \"mid\" or \"dec<level>\")")
    }
}

impl TryFrom<String> for BlockId {
    type Error = crate::Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BlockId> for String {
    fn from(b: BlockId) -> String {
        b.to_string()
    }
}

impl std::fmt::Display for BlockId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockId::Middle => write!(f, "mid"),
            BlockId::Decoder(l) => write!(f, "dec{l}"),
        }
    }
}

/// `concat(sin(t·ω_k), cos(t·ω_k))`, `ω_k = 10000^(−2k/dim)`.
pub fn timestep_embedding(t: usize, dim: usize, steps: usize) -> Result<Tensor<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        bail!(Config, "timestep embedding dimension must be even, got {dim}");
    }
    if t == 0 || t > steps {
        bail!(Index, "timestep {t} outside 1..={steps}");
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let omega = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        out[k] = (t as f64 * omega).sin();
        out[half + k] = (t as f64 * omega).cos();
    }
    Tensor::from_vec(&[dim], out)
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Debug, Clone)]
struct AttnBlock {
    norm: Norm,
    q: Conv,
    k: Conv,
    v: Conv,
    proj: Conv,
    channels: usize,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum EncoderStage {
    Res(ResBlock, Option<AttnBlock>),
    Down,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    res: ResBlock,
    attn: Option<AttnBlock>,
    up: Option<Conv>,
    /// Set on the last stage of a level.
    level_end: Option<usize>,
}

#[derive(Debug, Clone)]
struct Topology {
    time1: Dense,
    time2: Dense,
    conv_in: Conv,
    encoder: Vec<EncoderStage>,
    mid1: ResBlock,
    mid_attn: AttnBlock,
    mid2: ResBlock,
    decoder: Vec<DecoderStage>,
    out_norm: Norm,
    head_noise: Conv,
    head_seg: Conv,
}

/// Named parameter tensors in creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    fn add(&mut self, name: String, value: Tensor<S>) -> usize {
        self.names.push(name);
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

struct Builder<'a, S: Scalar> {
    store: ParamStore<S>,
    rng: &'a mut Rng,
}

impl<S: Scalar> Builder<'_, S> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = rng::uniform(shape, -bound, bound, self.rng);
        self.store.add(name, t)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let fan_in = cin * k * k;
        let w = self.uniform(format!("{name}.w"), &[cout, cin, k, k], fan_in);
        let b = self.uniform(format!("{name}.b"), &[cout], fan_in);
        Conv { w, b, pad: k / 2 }
    }

    fn zero_conv(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        let w = self.store.add(format!("{name}.w"), Tensor::zeros(&[cout, cin, 1, 1]));
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv { w, b, pad: 0 }
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize) -> Dense {
        let w = self.uniform(format!("{name}.w"), &[fout, fin], fin);
        let b = self.uniform(format!("{name}.b"), &[fout], fin);
        Dense { w, b }
    }

    fn norm(&mut self, name: &str, channels: usize, groups: usize) -> Norm {
        let gamma = self.store.add(format!("{name}.gamma"), Tensor::ones(&[channels]));
        let beta = self.store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Norm { gamma, beta, groups }
    }

    fn res(&mut self, cfg: &UnetConfig, name: &str, cin: usize, cout: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin, cfg.groups_for(cin)),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3),
            emb: self.dense(&format!("{name}.emb"), cfg.time_embed_dim, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout, cfg.groups_for(cout)),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1)),
        }
    }

    fn attn(&mut self, cfg: &UnetConfig, name: &str, channels: usize) -> AttnBlock {
        AttnBlock {
            norm: self.norm(&format!("{name}.norm"), channels, cfg.groups_for(channels)),
            q: self.conv(&format!("{name}.q"), channels, channels, 1),
            k: self.conv(&format!("{name}.k"), channels, channels, 1),
            v: self.conv(&format!("{name}.v"), channels, channels, 1),
            proj: self.conv(&format!("{name}.proj"), channels, channels, 1),
            channels,
        }
    }
}

fn build_topology<S: Scalar>(cfg: &UnetConfig, rng: &mut Rng) -> (Topology, ParamStore<S>) {
    let mut b = Builder { store: ParamStore::new(), rng };
    let base = cfg.base_width;
    let time1 = b.dense("time.fc1", base, cfg.time_embed_dim);
    let time2 = b.dense("time.fc2", cfg.time_embed_dim, cfg.time_embed_dim);
    let conv_in = b.conv("conv_in", cfg.in_channels, base, 3);

    let mut skips = vec![base];
    let mut ch = base;
    let mut encoder = Vec::new();
    for level in 0..cfg.levels() {
        let width = cfg.level_width(level);
        for i in 0..cfg.num_res_blocks {
            let name = format!("enc{level}.{i}");
            let res = b.res(cfg, &name, ch, width);
            ch = width;
            let attn = cfg.attention_levels.contains(&level).then(|| b.attn(cfg, &format!("{name}.attn"), ch));
            encoder.push(EncoderStage::Res(res, attn));
            skips.push(ch);
        }
        if level + 1 < cfg.levels() {
            encoder.push(EncoderStage::Down);
            skips.push(ch);
        }
    }

    let mid1 = b.res(cfg, "mid.res1", ch, ch);
    let mid_attn = b.attn(cfg, "mid.attn", ch);
    let mid2 = b.res(cfg, "mid.res2", ch, ch);

    let mut decoder = Vec::new();
    for level in (0..cfg.levels()).rev() {
        let width = cfg.level_width(level);
        for i in 0..=cfg.num_res_blocks {
            let name = format!("dec{level}.{i}");
            let skip_ch = skips.pop().expect("one skip per encoder stage");
            let res = b.res(cfg, &name, ch + skip_ch, width);
            ch = width;
            let attn = cfg.attention_levels.contains(&level).then(|| b.attn(cfg, &format!("{name}.attn"), ch));
            let last = i == cfg.num_res_blocks;
            let up = (last && level > 0).then(|| b.conv(&format!("{name}.up"), ch, ch, 3));
            decoder.push(DecoderStage { res, attn, up, level_end: last.then_some(level) });
        }
    }
    debug_assert!(skips.is_empty());

    let out_norm = b.norm("out.norm", ch, cfg.groups_for(ch));
    let head_noise = b.conv(HEAD_NOISE, ch, cfg.out_channels_noise, 1);
    let head_seg = b.zero_conv(HEAD_SEGMENTATION, ch, cfg.num_classes);
    let topo = Topology {
        time1,
        time2,
        conv_in,
        encoder,
        mid1,
        mid_attn,
        mid2,
        decoder,
        out_norm,
        head_noise,
        head_seg,
    };
    (topo, b.store)
}

#[derive(Debug, Clone)]
pub struct UnetModel<S: Scalar = f32> {
    config: UnetConfig,
    params: ParamStore<S>,
    head: HeadMode,
    topo: Topology,
}

impl<S: Scalar> UnetModel<S> {
    /// Fresh model in noise-prediction mode with a zero segmentation head.
    pub fn new(config: UnetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (topo, params) = build_topology(&config, rng);
        Ok(UnetModel { config, params, head: HeadMode::Noise, topo })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    pub fn head(&self) -> HeadMode {
        self.head
    }

    /// Switches the active output head; trunk parameters are untouched.
    pub fn set_head(&mut self, mode: HeadMode) {
        self.head = mode;
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn is_head_param(name: &str) -> bool {
        name.starts_with(HEAD_NOISE) || name.starts_with(HEAD_SEGMENTATION)
    }

    fn is_active_param(&self, name: &str) -> bool {
        match self.head {
            HeadMode::Noise => !name.starts_with(HEAD_SEGMENTATION),
            HeadMode::Segmentation => !name.starts_with(HEAD_NOISE),
        }
    }

    /// SHA-256 over names and little-endian payloads of the shared trunk.
    pub fn trunk_checksum(&self) -> String {
        self.checksum(|name| !Self::is_head_param(name))
    }

    pub fn checksum(&self, include: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().filter(|(n, _)| include(n)) {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_f().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Precision conversion of every parameter.
    pub fn cast<T: Scalar>(&self) -> UnetModel<T> {
        UnetModel {
            config: self.config.clone(),
            params: ParamStore {
                names: self.params.names.clone(),
                tensors: self.params.tensors.iter().map(Tensor::cast).collect(),
            },
            head: self.head,
            topo: self.topo.clone(),
        }
    }

    /// Records parameters on `tape`. With `trainable` the active-head and
    /// trunk parameters become gradient leaves; the inactive head is data.
    pub fn bind<'m, 't>(&'m self, tape: &'t Tape<S>, trainable: bool) -> BoundUnet<'m, 't, S> {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                if trainable && self.is_active_param(name) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundUnet { model: self, tape, vars }
    }

    /// Binds caller-supplied tape values, one per parameter in store order.
    pub fn bind_vars<'m, 't>(&'m self, tape: &'t Tape<S>, vars: Vec<Var<'t, S>>) -> Result<BoundUnet<'m, 't, S>> {
        if vars.len() != self.params.len() {
            bail!(Dimension, "{} values for {} parameters", vars.len(), self.params.len());
        }
        for (v, t) in vars.iter().zip(self.params.tensors()) {
            if v.shape() != t.shape() {
                bail!(Dimension, "parameter value {:?} for slot {:?}", v.shape(), t.shape());
            }
        }
        Ok(BoundUnet { model: self, tape, vars })
    }

    /// One forward pass without gradient bookkeeping.
    pub fn infer(&self, x: &Tensor<S>, t: &[usize]) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let out = bound.forward(tape.constant(x.clone()), t)?;
        Ok(out.value().as_ref().clone())
    }

    /// Per-pixel argmax of segmentation logits, laid out `[N, H, W]`.
    pub fn segment(&self, x: &Tensor<S>, t: usize) -> Result<Vec<u8>> {
        if self.head != HeadMode::Segmentation {
            bail!(Mode, "segment() needs the segmentation head");
        }
        let n = x.shape()[0];
        let logits = self.infer(x, &vec![t; n])?;
        Ok(argmax_channels(&logits))
    }
}

/// Argmax over axis 1 of `[N, C, H, W]`, ties to the lowest class.
pub fn argmax_channels<S: Scalar>(logits: &Tensor<S>) -> Vec<u8> {
    let s = logits.shape();
    let (n, c) = (s[0], s[1]);
    let p: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(n * p);
    for i in 0..n {
        for k in 0..p {
            let mut best = 0;
            let mut best_v = logits.data()[i * c * p + k];
            for j in 1..c {
                let v = logits.data()[(i * c + j) * p + k];
                if v > best_v {
                    best = j;
                    best_v = v;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

impl<S: Scalar> NoisePredictor<S> for UnetModel<S> {
    fn predict(&self, x_t: &Tensor<S>, t: &[usize]) -> Result<Tensor<S>> {
        if self.head != HeadMode::Noise {
            bail!(Mode, "noise prediction needs the noise head");
        }
        self.infer(x_t, t)
    }
}

/// A model whose parameters are recorded on a tape.
pub struct BoundUnet<'m, 't, S: Scalar> {
    model: &'m UnetModel<S>,
    tape: &'t Tape<S>,
    vars: Vec<Var<'t, S>>,
}

impl<'m, 't, S: Scalar> BoundUnet<'m, 't, S> {
    pub fn model(&self) -> &'m UnetModel<S> {
        self.model
    }

    pub fn vars(&self) -> &[Var<'t, S>] {
        &self.vars
    }

    /// Gradients in parameter order; `None` for data-bound parameters.
    pub fn collect_grads(&self, grads: &mut Gradients<S>) -> Vec<Option<Tensor<S>>> {
        self.vars.iter().map(|v| if v.requires_grad() { grads.take(*v) } else { None }).collect()
    }

    fn v(&self, i: usize) -> Var<'t, S> {
        self.vars[i]
    }

    fn conv(&self, c: Conv, x: Var<'t, S>) -> Result<Var<'t, S>> {
        x.conv2d(self.v(c.w), Some(self.v(c.b)), 1, c.pad)
    }

    fn dense(&self, d: Dense, x: Var<'t, S>) -> Result<Var<'t, S>> {
        x.linear(self.v(d.w), Some(self.v(d.b)))
    }

    fn norm(&self, n: Norm, x: Var<'t, S>) -> Result<Var<'t, S>> {
        x.group_norm(n.groups, self.v(n.gamma), self.v(n.beta))
    }

    fn res(&self, r: &ResBlock, x: Var<'t, S>, emb: Var<'t, S>) -> Result<Var<'t, S>> {
        let h = self.conv(r.conv1, self.norm(r.norm1, x)?.silu()?)?;
        let h = h.add_bias(self.dense(r.emb, emb.silu()?)?)?;
        let h = self.conv(r.conv2, self.norm(r.norm2, h)?.silu()?)?;
        let skip = match r.skip {
            Some(c) => self.conv(c, x)?,
            None => x,
        };
        skip.add(h)
    }

    fn attn(&self, a: &AttnBlock, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let s = x.shape();
        let (n, c, l) = (s[0], s[1], s[2] * s[3]);
        let h = self.norm(a.norm, x)?;
        let q = self.conv(a.q, h)?.reshape(&[n, c, l])?;
        let k = self.conv(a.k, h)?.reshape(&[n, c, l])?;
        let v = self.conv(a.v, h)?.reshape(&[n, c, l])?;
        let scores = q.bmm(k, true, false)?.scale(S::from_f(1.0 / (a.channels as f64).sqrt()))?;
        let weights = scores.softmax(2)?;
        let out = v.bmm(weights, false, true)?.reshape(&s)?;
        x.add(self.conv(a.proj, out)?)
    }

    fn time_embedding(&self, t: &[usize]) -> Result<Var<'t, S>> {
        let cfg = &self.model.config;
        let mut rows = Vec::with_capacity(t.len() * cfg.base_width);
        for &ti in t {
            rows.extend(timestep_embedding(ti, cfg.base_width, cfg.diffusion_steps)?.data().iter().map(|&v| S::from_f(v)));
        }
        let e = self.tape.constant(Tensor::from_vec(&[t.len(), cfg.base_width], rows)?);
        let topo = &self.model.topo;
        self.dense(topo.time2, self.dense(topo.time1, e)?.silu()?)
    }

    /// Full pass through the active head.
    pub fn forward(&self, x: Var<'t, S>, t: &[usize]) -> Result<Var<'t, S>> {
        Ok(self.forward_capture(x, t, &[])?.0)
    }

    /// Forward pass that also returns the requested intermediate activations.
    pub fn forward_capture(&self, x: Var<'t, S>, t: &[usize], capture: &[BlockId]) -> Result<(Var<'t, S>, Vec<Var<'t, S>>)> {
        let cfg = &self.model.config;
        let topo = &self.model.topo;
        let s = x.shape();
        if s.len() != 4 || s[1] != cfg.in_channels {
            bail!(Dimension, "Unet input must be [N, {}, H, W], got {:?}", cfg.in_channels, s);
        }
        let f = cfg.downsample_factor();
        if !s[2].is_multiple_of(f) || !s[3].is_multiple_of(f) {
            bail!(Dimension, "spatial size {}x{} not divisible by {f}", s[2], s[3]);
        }
        if t.len() != s[0] {
            bail!(Dimension, "{} timesteps for batch of {}", t.len(), s[0]);
        }
        for id in capture {
            if let BlockId::Decoder(l) = id {
                if *l >= cfg.levels() {
                    bail!(Config, "block {id} does not exist with {} levels", cfg.levels());
                }
            }
        }
        let mut captured: HashMap<BlockId, Var<'t, S>> = HashMap::new();

        let emb = self.time_embedding(t)?;
        let mut h = self.conv(topo.conv_in, x)?;
        let mut skips = vec![h];
        for stage in &topo.encoder {
            h = match stage {
                EncoderStage::Res(r, a) => {
                    let mut y = self.res(r, h, emb)?;
                    if let Some(a) = a {
                        y = self.attn(a, y)?;
                    }
                    y
                }
                EncoderStage::Down => h.avgpool2x()?,
            };
            skips.push(h);
        }
        h = self.res(&topo.mid1, h, emb)?;
        h = self.attn(&topo.mid_attn, h)?;
        h = self.res(&topo.mid2, h, emb)?;
        captured.insert(BlockId::Middle, h);

        for stage in &topo.decoder {
            let skip = skips.pop().expect("skip per decoder stage");
            h = self.res(&stage.res, self.tape.concat(&[h, skip], 1)?, emb)?;
            if let Some(a) = &stage.attn {
                h = self.attn(a, h)?;
            }
            if let Some(level) = stage.level_end {
                captured.insert(BlockId::Decoder(level), h);
            }
            if let Some(up) = stage.up {
                h = self.conv(up, h.nearest_upsample2x()?)?;
            }
        }
        let h = self.norm(topo.out_norm, h)?.silu()?;
        let head = match self.model.head {
            HeadMode::Noise => topo.head_noise,
            HeadMode::Segmentation => topo.head_seg,
        };
        let out = self.conv(head, h)?;
        let taps = capture.iter().map(|id| captured[id]).collect();
        Ok((out, taps))
    }
}

impl<'t, S: Scalar> Denoiser<'t, S> for BoundUnet<'_, 't, S> {
    fn predict_noise(&self, x_t: Var<'t, S>, t: &[usize]) -> Result<Var<'t, S>> {
        if self.model.head != HeadMode::Noise {
            bail!(Mode, "noise prediction needs the noise head, model is in segmentation mode");
        }
        self.forward(x_t, t)
    }
}

#[cfg(test)]
mod tests;
