//! The multimodal sequence classifier: configuration, parameter
//! initialization, forward pass, checkpointing, and gradient verification.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tensor::{Graph, Real, TensorData, Var};
use crate::dataset::{PROPERTY_LEVELS, PROPRIO_DIM};
use crate::dsp::BIN_WIDTH_HZ;
use crate::frame::{SMALL_H, SMALL_W};
use crate::optflow::{FLOW_C, FLOW_H, FLOW_W};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch for {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch { what: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("empty sequence")]
    EmptySequence,
    #[error("unknown head {0:?}")]
    UnknownHead(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config does not match the requested config")]
    ConfigMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What feeds the image encoder, if anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageInputKind {
    None,
    Raw60x80,
    Flow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Attention,
    Tcn,
}

/// Classification heads attached to the pooled backbone output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    /// Number of fabric classes, when fabric identification is trained.
    pub fabric_classes: Option<usize>,
    /// Adds the three property heads (2 / 5 / 3 classes).
    pub property_heads: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadId {
    Fabric,
    Stretchiness,
    Roughness,
    Thickness,
}

impl HeadId {
    pub fn name(&self) -> &'static str {
        match self {
            HeadId::Fabric => "fabric",
            HeadId::Stretchiness => "stretchiness",
            HeadId::Roughness => "roughness",
            HeadId::Thickness => "thickness",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_input: ImageInputKind,
    pub use_internal_audio: bool,
    pub use_external_audio: bool,
    pub use_proprio: bool,
    pub backbone: BackboneKind,
    /// Sequence length N.
    pub seq_len: usize,
    /// PSD cutoff; the audio encoder input width follows from it.
    pub psd_cutoff_hz: f64,
    pub image_feat: usize,
    pub audio_feat: usize,
    pub proprio_feat: usize,
    pub audio_hidden: usize,
    pub proprio_hidden: usize,
    pub attn_layers: usize,
    pub attn_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub tcn_layers: usize,
    pub head_hidden: usize,
    pub heads: HeadSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_input: ImageInputKind::None,
            use_internal_audio: true,
            use_external_audio: false,
            use_proprio: false,
            backbone: BackboneKind::Attention,
            seq_len: 200,
            psd_cutoff_hz: 15_000.0,
            image_feat: 32,
            audio_feat: 32,
            proprio_feat: 16,
            audio_hidden: 64,
            proprio_hidden: 32,
            attn_layers: 3,
            attn_heads: 4,
            model_dim: 128,
            ff_dim: 256,
            tcn_layers: 4,
            head_hidden: 64,
            heads: HeadSpec { fabric_classes: Some(21), property_heads: false },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.image_input == ImageInputKind::None
            && !self.use_internal_audio
            && !self.use_external_audio
            && !self.use_proprio
        {
            return Err(NeuralError::InvalidConfig("at least one modality must be enabled".into()));
        }
        if self.backbone == BackboneKind::Attention && self.attn_layers != 3 {
            return Err(NeuralError::InvalidConfig(format!(
                "attention backbone uses exactly 3 layers, got {}",
                self.attn_layers
            )));
        }
        if self.model_dim % self.attn_heads != 0 {
            return Err(NeuralError::InvalidConfig(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.attn_heads
            )));
        }
        if self.heads.fabric_classes.is_none() && !self.heads.property_heads {
            return Err(NeuralError::InvalidConfig("no classification heads configured".into()));
        }
        if self.seq_len == 0 {
            return Err(NeuralError::EmptySequence);
        }
        if self.psd_bins() == 0 && (self.use_internal_audio || self.use_external_audio) {
            return Err(NeuralError::InvalidConfig("psd cutoff below one bin".into()));
        }
        Ok(())
    }

    /// Audio-encoder input width implied by the PSD cutoff.
    pub fn psd_bins(&self) -> usize {
        (self.psd_cutoff_hz / BIN_WIDTH_HZ).floor() as usize
    }

    /// (channels, height, width) of the image-encoder input.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        match self.image_input {
            ImageInputKind::None => None,
            ImageInputKind::Raw60x80 => Some((1, SMALL_H, SMALL_W)),
            ImageInputKind::Flow => Some((FLOW_C, FLOW_H, FLOW_W)),
        }
    }

    /// Width of the concatenated per-step feature vector.
    pub fn concat_dim(&self) -> usize {
        let mut d = 0;
        if self.image_input != ImageInputKind::None {
            d += self.image_feat;
        }
        if self.use_internal_audio {
            d += self.audio_feat;
        }
        if self.use_external_audio {
            d += self.audio_feat;
        }
        if self.use_proprio {
            d += self.proprio_feat;
        }
        d
    }

    /// Heads in a fixed order with their class counts.
    pub fn active_heads(&self) -> Vec<(HeadId, usize)> {
        let mut out = Vec::new();
        if let Some(k) = self.heads.fabric_classes {
            out.push((HeadId::Fabric, k));
        }
        if self.heads.property_heads {
            out.push((HeadId::Stretchiness, PROPERTY_LEVELS.0));
            out.push((HeadId::Roughness, PROPERTY_LEVELS.1));
            out.push((HeadId::Thickness, PROPERTY_LEVELS.2));
        }
        out
    }
}

/// Named parameter tensors in deterministic order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    map: BTreeMap<String, TensorData<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: TensorData<T>) {
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&TensorData<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TensorData<T>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorData<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elems(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

enum Init {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    Uniform { fan_in: usize },
    Const(f64),
    /// Small uniform for positional embeddings.
    SmallUniform,
}

/// Declarative parameter layout; initialization and binding both walk this
/// list, so the RNG stream and graph order are reproducible.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
    fn linear(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, din: usize, dout: usize) {
        specs.push((format!("{name}.w"), vec![din, dout], Init::Uniform { fan_in: din }));
        specs.push((format!("{name}.b"), vec![dout], Init::Const(0.01)));
    }

    if let Some((c, _, _)) = cfg.image_shape() {
        for (i, (cin, cout)) in [(c, 8), (8, 16), (16, 32)].into_iter().enumerate() {
            specs.push((
                format!("enc.image.conv{}.w", i + 1),
                vec![cout, cin, 3, 3],
                Init::Uniform { fan_in: cin * 9 },
            ));
            specs.push((format!("enc.image.conv{}.b", i + 1), vec![cout], Init::Const(0.01)));
        }
        linear(&mut specs, "enc.image.out", 32, cfg.image_feat);
    }
    if cfg.use_internal_audio || cfg.use_external_audio {
        // One set of weights serves both audio streams.
        linear(&mut specs, "enc.audio.l1", cfg.psd_bins(), cfg.audio_hidden);
        linear(&mut specs, "enc.audio.l2", cfg.audio_hidden, cfg.audio_feat);
    }
    if cfg.use_proprio {
        linear(&mut specs, "enc.proprio.l1", PROPRIO_DIM, cfg.proprio_hidden);
        linear(&mut specs, "enc.proprio.l2", cfg.proprio_hidden, cfg.proprio_feat);
    }

    linear(&mut specs, "fuse.proj", cfg.concat_dim(), cfg.model_dim);
    specs.push(("pos_embed".into(), vec![cfg.seq_len, cfg.model_dim], Init::SmallUniform));

    match cfg.backbone {
        BackboneKind::Attention => {
            for l in 0..cfg.attn_layers {
                for proj in ["q", "k", "v", "out"] {
                    linear(&mut specs, &format!("attn.{l}.{proj}"), cfg.model_dim, cfg.model_dim);
                }
                specs.push((format!("attn.{l}.ln1.g"), vec![cfg.model_dim], Init::Const(1.0)));
                specs.push((format!("attn.{l}.ln1.b"), vec![cfg.model_dim], Init::Const(0.0)));
                linear(&mut specs, &format!("attn.{l}.ff1"), cfg.model_dim, cfg.ff_dim);
                linear(&mut specs, &format!("attn.{l}.ff2"), cfg.ff_dim, cfg.model_dim);
                specs.push((format!("attn.{l}.ln2.g"), vec![cfg.model_dim], Init::Const(1.0)));
                specs.push((format!("attn.{l}.ln2.b"), vec![cfg.model_dim], Init::Const(0.0)));
            }
            specs.push(("attn.final_ln.g".into(), vec![cfg.model_dim], Init::Const(1.0)));
            specs.push(("attn.final_ln.b".into(), vec![cfg.model_dim], Init::Const(0.0)));
        }
        BackboneKind::Tcn => {
            for l in 0..cfg.tcn_layers {
                specs.push((
                    format!("tcn.{l}.w"),
                    vec![cfg.model_dim, cfg.model_dim, 3],
                    Init::Uniform { fan_in: cfg.model_dim * 3 },
                ));
                specs.push((format!("tcn.{l}.b"), vec![cfg.model_dim], Init::Const(0.01)));
            }
        }
    }

    for (head, k) in cfg.active_heads() {
        linear(&mut specs, &format!("head.{}.l1", head.name()), cfg.model_dim, cfg.head_hidden);
        linear(&mut specs, &format!("head.{}.l2", head.name()), cfg.head_hidden, k);
    }
    specs
}

/// Initialize all parameters for a config; identical seeds produce identical
/// values at either precision (values are drawn in f64 and cast).
pub fn init_params_t<T: Real>(cfg: &ModelConfig, seed: u64) -> ParamSet<T> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape, init) in param_specs(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Uniform { fan_in } => {
                let s = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-s..s)).collect()
            }
            Init::Const(c) => vec![c; n],
            Init::SmallUniform => (0..n).map(|_| rng.random_range(-0.1..0.1)).collect(),
        };
        params.insert(&name, TensorData::from_f64_slice(&shape, &data));
    }
    params
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamSet<f32> {
    init_params_t(cfg, seed)
}

/// Parameters bound into a graph, by name.
pub struct BoundParams {
    map: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Insert every parameter into the graph. `trainable` controls whether
    /// gradients are tracked.
    pub fn bind<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, trainable: bool) -> Self {
        let mut map = BTreeMap::new();
        for (name, value) in params.iter() {
            let var = if trainable { g.param(value.clone()) } else { g.input(value.clone()) };
            map.insert(name.clone(), var);
        }
        BoundParams { map }
    }

    pub fn var(&self, name: &str) -> Var {
        *self.map.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }
}

/// Per-sequence model inputs. Row counts must equal the configured sequence
/// length; PSDs must already be truncated to the configured cutoff.
#[derive(Debug, Clone)]
pub struct SeqTensors<T> {
    /// (N, C, H, W) image or flow stack.
    pub image: Option<TensorData<T>>,
    /// (N, bins)
    pub psd_internal: Option<TensorData<T>>,
    /// (N, bins)
    pub psd_external: Option<TensorData<T>>,
    /// (N, 18)
    pub proprio: Option<TensorData<T>>,
}

impl<T: Real> SeqTensors<T> {
    pub fn empty() -> Self {
        SeqTensors { image: None, psd_internal: None, psd_external: None, proprio: None }
    }
}

/// Everything the forward pass exposes.
pub struct ForwardOutput {
    /// Normalized fused features, (N, concat_dim).
    pub fused: Var,
    /// Backbone output, (N, model_dim).
    pub backbone: Var,
    /// Temporal mean of the backbone output, (1, model_dim).
    pub pooled: Var,
    /// Logits per head, (1, k).
    pub logits: BTreeMap<HeadId, Var>,
    /// Attention probabilities per (layer, head) when captured.
    pub attn_probs: Vec<Var>,
}

fn expect_shape<T: Real>(
    what: &str,
    t: &TensorData<T>,
    expected: &[usize],
) -> Result<(), NeuralError> {
    if t.shape != expected {
        return Err(NeuralError::ShapeMismatch {
            what: what.into(),
            expected: expected.to_vec(),
            got: t.shape.clone(),
        });
    }
    Ok(())
}

/// Full forward pass for one sequence.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    inputs: &SeqTensors<T>,
    capture_attn: bool,
) -> Result<ForwardOutput, NeuralError> {
    let n = cfg.seq_len;
    if n == 0 {
        return Err(NeuralError::EmptySequence);
    }
    let mut features: Vec<Var> = Vec::new();

    if let Some((c, h, w)) = cfg.image_shape() {
        let img = inputs.image.as_ref().ok_or_else(|| NeuralError::ShapeMismatch {
            what: "image input (missing)".into(),
            expected: vec![n, c, h, w],
            got: vec![],
        })?;
        expect_shape("image input", img, &[n, c, h, w])?;
        let x = g.input(img.clone());
        features.push(encode_image(g, bound, x));
    }
    let encode_audio = |g: &mut Graph<T>,
                            t: &Option<TensorData<T>>,
                            what: &str|
     -> Result<Var, NeuralError> {
        let bins = cfg.psd_bins();
        let psd = t.as_ref().ok_or_else(|| NeuralError::ShapeMismatch {
            what: format!("{what} (missing)"),
            expected: vec![n, bins],
            got: vec![],
        })?;
        expect_shape(what, psd, &[n, bins])?;
        let x = g.input(psd.clone());
        Ok(encode_mlp(g, bound, "enc.audio", x))
    };
    if cfg.use_internal_audio {
        features.push(encode_audio(g, &inputs.psd_internal, "internal psd")?);
    }
    if cfg.use_external_audio {
        features.push(encode_audio(g, &inputs.psd_external, "external psd")?);
    }
    if cfg.use_proprio {
        let p = inputs.proprio.as_ref().ok_or_else(|| NeuralError::ShapeMismatch {
            what: "proprio (missing)".into(),
            expected: vec![n, PROPRIO_DIM],
            got: vec![],
        })?;
        expect_shape("proprio", p, &[n, PROPRIO_DIM])?;
        let x = g.input(p.clone());
        features.push(encode_mlp(g, bound, "enc.proprio", x));
    }

    let concat = if features.len() == 1 { features[0] } else { g.concat_cols(&features) };
    let fused = g.min_max_norm_cols(concat);

    let proj = g.matmul(fused, bound.var("fuse.proj.w"));
    let proj = g.add_bias(proj, bound.var("fuse.proj.b"));
    let x = g.add(proj, bound.var("pos_embed"));

    let mut attn_probs = Vec::new();
    let backbone = match cfg.backbone {
        BackboneKind::Attention => {
            attention_backbone(g, bound, cfg, x, capture_attn.then_some(&mut attn_probs))
        }
        BackboneKind::Tcn => tcn_backbone(g, bound, cfg, x),
    };

    let pooled = g.mean_rows(backbone);
    let mut logits = BTreeMap::new();
    for (head, _k) in cfg.active_heads() {
        let h1 = g.matmul(pooled, bound.var(&format!("head.{}.l1.w", head.name())));
        let h1 = g.add_bias(h1, bound.var(&format!("head.{}.l1.b", head.name())));
        let h1 = g.relu(h1);
        let l = g.matmul(h1, bound.var(&format!("head.{}.l2.w", head.name())));
        let l = g.add_bias(l, bound.var(&format!("head.{}.l2.b", head.name())));
        logits.insert(head, l);
    }

    Ok(ForwardOutput { fused, backbone, pooled, logits, attn_probs })
}

fn encode_image<T: Real>(g: &mut Graph<T>, bound: &BoundParams, x: Var) -> Var {
    let mut h = x;
    for i in 1..=3 {
        let w = bound.var(&format!("enc.image.conv{i}.w"));
        let b = bound.var(&format!("enc.image.conv{i}.b"));
        h = g.conv2d(h, w, b, 2, 1);
        h = g.relu(h);
    }
    let pooled = g.mean_pool_hw(h);
    let out = g.matmul(pooled, bound.var("enc.image.out.w"));
    g.add_bias(out, bound.var("enc.image.out.b"))
}

fn encode_mlp<T: Real>(g: &mut Graph<T>, bound: &BoundParams, prefix: &str, x: Var) -> Var {
    let h = g.matmul(x, bound.var(&format!("{prefix}.l1.w")));
    let h = g.add_bias(h, bound.var(&format!("{prefix}.l1.b")));
    let h = g.relu(h);
    let out = g.matmul(h, bound.var(&format!("{prefix}.l2.w")));
    g.add_bias(out, bound.var(&format!("{prefix}.l2.b")))
}

fn attention_backbone<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    mut x: Var,
    mut capture: Option<&mut Vec<Var>>,
) -> Var {
    // Pre-norm blocks: x + attn(LN(x)), x + ff(LN(x)), with one final
    // normalization after the stack. Stable to train without warmup.
    let hd = cfg.model_dim / cfg.attn_heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    for l in 0..cfg.attn_layers {
        let name = |p: &str| format!("attn.{l}.{p}");
        let h_in = g.layer_norm_rows(x, bound.var(&name("ln1.g")), bound.var(&name("ln1.b")), 1e-5);
        let q = g.matmul(h_in, bound.var(&name("q.w")));
        let q = g.add_bias(q, bound.var(&name("q.b")));
        let k = g.matmul(h_in, bound.var(&name("k.w")));
        let k = g.add_bias(k, bound.var(&name("k.b")));
        let v = g.matmul(h_in, bound.var(&name("v.w")));
        let v = g.add_bias(v, bound.var(&name("v.b")));

        let mut head_ctx = Vec::with_capacity(cfg.attn_heads);
        for h in 0..cfg.attn_heads {
            let (from, to) = (h * hd, (h + 1) * hd);
            let qh = g.slice_cols(q, from, to);
            let kh = g.slice_cols(k, from, to);
            let vh = g.slice_cols(v, from, to);
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let probs = g.softmax_rows(scores);
            if let Some(cap) = capture.as_deref_mut() {
                cap.push(probs);
            }
            head_ctx.push(g.matmul(probs, vh));
        }
        let ctx = g.concat_cols(&head_ctx);
        let attn_out = g.matmul(ctx, bound.var(&name("out.w")));
        let attn_out = g.add_bias(attn_out, bound.var(&name("out.b")));
        x = g.add(x, attn_out);

        let h_mid = g.layer_norm_rows(x, bound.var(&name("ln2.g")), bound.var(&name("ln2.b")), 1e-5);
        let ff = g.matmul(h_mid, bound.var(&name("ff1.w")));
        let ff = g.add_bias(ff, bound.var(&name("ff1.b")));
        let ff = g.relu(ff);
        let ff = g.matmul(ff, bound.var(&name("ff2.w")));
        let ff = g.add_bias(ff, bound.var(&name("ff2.b")));
        x = g.add(x, ff);
    }
    g.layer_norm_rows(x, bound.var("attn.final_ln.g"), bound.var("attn.final_ln.b"), 1e-5)
}

fn tcn_backbone<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    mut x: Var,
) -> Var {
    for l in 0..cfg.tcn_layers {
        let dilation = 1usize << l;
        let y = g.causal_conv1d(
            x,
            bound.var(&format!("tcn.{l}.w")),
            bound.var(&format!("tcn.{l}.b")),
            dilation,
        );
        let y = g.relu(y);
        x = g.add(x, y);
    }
    x
}

/// Class targets for the active heads.
#[derive(Debug, Clone, Copy, Default)]
pub struct Targets {
    pub fabric: Option<usize>,
    pub properties: Option<(usize, usize, usize)>,
}

impl Targets {
    pub fn class_for(&self, head: HeadId) -> Option<usize> {
        match head {
            HeadId::Fabric => self.fabric,
            HeadId::Stretchiness => self.properties.map(|p| p.0),
            HeadId::Roughness => self.properties.map(|p| p.1),
            HeadId::Thickness => self.properties.map(|p| p.2),
        }
    }
}

/// Equal-weight sum of per-head cross-entropies over the heads that have
/// targets.
pub fn multitask_loss<T: Real>(
    g: &mut Graph<T>,
    out: &ForwardOutput,
    targets: &Targets,
) -> Result<Var, NeuralError> {
    let mut terms = Vec::new();
    for (&head, &logits) in &out.logits {
        if let Some(class) = targets.class_for(head) {
            terms.push(g.cross_entropy_logits(logits, class));
        }
    }
    if terms.is_empty() {
        return Err(NeuralError::UnknownHead("no head has a target".into()));
    }
    Ok(g.add_scalars(&terms))
}

/// All learnable state plus the exact config it was built for.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
    pub step: u64,
    pub rng_seed: u64,
}

const CKPT_MAGIC: &[u8; 8] = b"TFUSCKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    version: u32,
    config: ModelConfig,
    step: u64,
    rng_seed: u64,
    tensors: Vec<CkptTensor>,
}

#[derive(Serialize, Deserialize)]
struct CkptTensor {
    name: String,
    shape: Vec<usize>,
}

impl ModelState {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, NeuralError> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(ModelState { config, params, step: 0, rng_seed: seed })
    }

    /// Serialize to the versioned named-tensor container.
    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        let tensors: Vec<CkptTensor> = self
            .params
            .iter()
            .map(|(name, t)| CkptTensor { name: name.clone(), shape: t.shape.clone() })
            .collect();
        let header = CkptHeader {
            version: CKPT_VERSION,
            config: self.config.clone(),
            step: self.step,
            rng_seed: self.rng_seed,
            tensors,
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        let mut buf =
            Vec::with_capacity(8 + 4 + header_json.len() + self.params.total_elems() * 4);
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header_json);
        for (_, t) in self.params.iter() {
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        let buf = fs::read(path)?;
        if buf.len() < 12 || &buf[..8] != CKPT_MAGIC {
            return Err(NeuralError::Checkpoint("bad magic".into()));
        }
        let hlen = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let header: CkptHeader = serde_json::from_slice(
            buf.get(12..12 + hlen)
                .ok_or_else(|| NeuralError::Checkpoint("truncated header".into()))?,
        )
        .map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        if header.version != CKPT_VERSION {
            return Err(NeuralError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        let mut off = 12 + hlen;
        let mut params = ParamSet::new();
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let bytes = buf
                .get(off..off + 4 * n)
                .ok_or_else(|| NeuralError::Checkpoint(format!("truncated tensor {}", t.name)))?;
            let data: Vec<f32> =
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            params.insert(&t.name, TensorData::from_vec(&t.shape, data));
            off += 4 * n;
        }
        Ok(ModelState {
            config: header.config,
            params,
            step: header.step,
            rng_seed: header.rng_seed,
        })
    }

    /// Load and refuse configs that differ from the expected one.
    pub fn load_compatible(path: &Path, expected: &ModelConfig) -> Result<Self, NeuralError> {
        let state = Self::load(path)?;
        if &state.config != expected {
            return Err(NeuralError::ConfigMismatch);
        }
        Ok(state)
    }

    /// Inference: per-head class probabilities for one sequence.
    pub fn predict_probs(
        &self,
        inputs: &SeqTensors<f32>,
    ) -> Result<BTreeMap<HeadId, Vec<f32>>, NeuralError> {
        let mut g: Graph<f32> = Graph::new();
        let bound = BoundParams::bind(&mut g, &self.params, false);
        let out = forward(&mut g, &bound, &self.config, inputs, false)?;
        let mut probs = BTreeMap::new();
        for (&head, &logits) in &out.logits {
            let p = g.softmax_rows(logits);
            probs.insert(head, g.value(p).data.clone());
        }
        Ok(probs)
    }

    /// Mean normalized fused feature vector over a sequence (the latent
    /// representation exported for embedding tools).
    pub fn fused_mean(&self, inputs: &SeqTensors<f32>) -> Result<Vec<f32>, NeuralError> {
        let mut g: Graph<f32> = Graph::new();
        let bound = BoundParams::bind(&mut g, &self.params, false);
        let out = forward(&mut g, &bound, &self.config, inputs, false)?;
        let mean = g.mean_rows(out.fused);
        Ok(g.value(mean).data.clone())
    }
}

pub fn argmax(v: &[f32]) -> usize {
    v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0)
}

/// Deterministic random inputs matching a config; used by gradient checks and
/// architecture tests.
pub fn random_inputs<T: Real>(cfg: &ModelConfig, rng: &mut ChaCha12Rng) -> SeqTensors<T> {
    let n = cfg.seq_len;
    let mut tensor = |shape: &[usize]| -> TensorData<T> {
        let data: Vec<f64> =
            (0..shape.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect();
        TensorData::from_f64_slice(shape, &data)
    };
    let mut inputs = SeqTensors::empty();
    if let Some((c, h, w)) = cfg.image_shape() {
        inputs.image = Some(tensor(&[n, c, h, w]));
    }
    if cfg.use_internal_audio {
        inputs.psd_internal = Some(tensor(&[n, cfg.psd_bins()]));
    }
    if cfg.use_external_audio {
        inputs.psd_external = Some(tensor(&[n, cfg.psd_bins()]));
    }
    if cfg.use_proprio {
        inputs.proprio = Some(tensor(&[n, PROPRIO_DIM]));
    }
    inputs
}

/// Outcome of a finite-difference sweep.
#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<(String, usize, f64)>,
}

/// Central finite-difference check of `n_samples` randomly chosen parameter
/// entries at 64-bit precision. Targets and inputs are random but seeded.
pub fn finite_difference_check(
    cfg: &ModelConfig,
    seed: u64,
    n_samples: usize,
    tolerance: f64,
) -> Result<GradCheckReport, NeuralError> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let params: ParamSet<f64> = init_params_t(cfg, seed ^ 0x9e37_79b9);
    let inputs: SeqTensors<f64> = random_inputs(cfg, &mut rng);
    let targets = random_targets(cfg, &mut rng);

    let run_loss = |p: &ParamSet<f64>| -> Result<f64, NeuralError> {
        let mut g: Graph<f64> = Graph::new();
        let bound = BoundParams::bind(&mut g, p, false);
        let out = forward(&mut g, &bound, cfg, &inputs, false)?;
        let loss = multitask_loss(&mut g, &out, &targets)?;
        Ok(g.value(loss).data[0])
    };

    // Analytic gradients once.
    let mut g: Graph<f64> = Graph::new();
    let bound = BoundParams::bind(&mut g, &params, true);
    let out = forward(&mut g, &bound, cfg, &inputs, false)?;
    let loss = multitask_loss(&mut g, &out, &targets)?;
    let mut grads = g.backward(loss);
    let mut analytic: BTreeMap<String, TensorData<f64>> = BTreeMap::new();
    for (name, &var) in bound.iter() {
        if let Some(grad) = grads.take(var) {
            analytic.insert(name.clone(), grad);
        }
    }

    let names: Vec<String> = params.names().cloned().collect();
    // Small enough that ReLU kink crossings (whose FD error grows with eps)
    // stay below tolerance; f64 round-off at this step size is ~1e-10.
    let eps = 1e-6;
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, failures: Vec::new() };
    for _ in 0..n_samples {
        let name = &names[rng.random_range(0..names.len())];
        let numel = params.get(name).unwrap().numel();
        let idx = rng.random_range(0..numel);

        let mut perturbed = params.clone();
        perturbed.get_mut(name).unwrap().data[idx] += eps;
        let up = run_loss(&perturbed)?;
        perturbed.get_mut(name).unwrap().data[idx] -= 2.0 * eps;
        let down = run_loss(&perturbed)?;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.get(name).map(|t| t.data[idx]).unwrap_or(0.0);

        // Floor the denominator: parameters with mathematically zero
        // influence (e.g. key biases, which cancel under softmax shift
        // invariance) leave both estimates at noise level.
        let denom = (a.abs() + numeric.abs()).max(1e-6);
        let rel = (a - numeric).abs() / denom;
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(rel);
        if rel >= tolerance {
            report.failures.push((name.clone(), idx, rel));
        }
    }
    Ok(report)
}

pub fn random_targets(cfg: &ModelConfig, rng: &mut ChaCha12Rng) -> Targets {
    let mut t = Targets::default();
    if let Some(k) = cfg.heads.fabric_classes {
        t.fabric = Some(rng.random_range(0..k));
    }
    if cfg.heads.property_heads {
        t.properties = Some((
            rng.random_range(0..PROPERTY_LEVELS.0),
            rng.random_range(0..PROPERTY_LEVELS.1),
            rng.random_range(0..PROPERTY_LEVELS.2),
        ));
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            use_internal_audio: true,
            use_external_audio: true,
            use_proprio: true,
            seq_len: 12,
            psd_cutoff_hz: 1000.0, // 21 bins
            image_feat: 8,
            audio_feat: 8,
            proprio_feat: 6,
            audio_hidden: 10,
            proprio_hidden: 8,
            model_dim: 16,
            ff_dim: 24,
            head_hidden: 10,
            heads: HeadSpec { fabric_classes: Some(5), property_heads: true },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_head_dims_match_protocol() {
        let cfg = ModelConfig::default();
        let heads = cfg.active_heads();
        assert_eq!(heads, vec![(HeadId::Fabric, 21)]);
        let cfg =
            ModelConfig { heads: HeadSpec { fabric_classes: Some(21), property_heads: true }, ..cfg };
        assert_eq!(
            cfg.active_heads(),
            vec![
                (HeadId::Fabric, 21),
                (HeadId::Stretchiness, 2),
                (HeadId::Roughness, 5),
                (HeadId::Thickness, 3)
            ]
        );
    }

    #[test]
    fn config_requires_a_modality() {
        let cfg = ModelConfig {
            image_input: ImageInputKind::None,
            use_internal_audio: false,
            use_external_audio: false,
            use_proprio: false,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn attention_layer_count_pinned_to_three() {
        let cfg = ModelConfig { attn_layers: 2, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn shared_audio_weights_give_identical_embeddings() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 7);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut inputs: SeqTensors<f32> = random_inputs(&cfg, &mut rng);
        // Same PSD through both streams.
        inputs.psd_external = inputs.psd_internal.clone();

        let mut g: Graph<f32> = Graph::new();
        let bound = BoundParams::bind(&mut g, &params, false);
        let out = forward(&mut g, &bound, &cfg, &inputs, false).unwrap();
        let fused = g.value(out.fused);
        // Fused layout: [audio_int | audio_ext | proprio]; the two audio
        // blocks must be identical because the encoder weights are shared.
        let (n, m) = (fused.rows(), fused.cols());
        assert_eq!(m, cfg.concat_dim());
        for i in 0..n {
            for j in 0..cfg.audio_feat {
                let a = fused.data[i * m + j];
                let b = fused.data[i * m + cfg.audio_feat + j];
                assert_eq!(a, b, "row {i} col {j}");
            }
        }
    }

    #[test]
    fn mutating_shared_audio_weights_moves_both_streams() {
        let cfg = small_cfg();
        let mut params = init_params(&cfg, 7);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let inputs: SeqTensors<f32> = random_inputs(&cfg, &mut rng);

        let embeddings = |params: &ParamSet<f32>| {
            let mut g: Graph<f32> = Graph::new();
            let bound = BoundParams::bind(&mut g, params, false);
            let out = forward(&mut g, &bound, &cfg, &inputs, false).unwrap();
            g.value(out.fused).clone()
        };
        let before = embeddings(&params);
        params.get_mut("enc.audio.l2.w").unwrap().data[3] += 0.5;
        let after = embeddings(&params);

        let m = before.cols();
        let changed_int = (0..before.rows())
            .any(|i| (0..cfg.audio_feat).any(|j| before.data[i * m + j] != after.data[i * m + j]));
        let changed_ext = (0..before.rows()).any(|i| {
            (cfg.audio_feat..2 * cfg.audio_feat)
                .any(|j| before.data[i * m + j] != after.data[i * m + j])
        });
        assert!(changed_int && changed_ext);
    }

    #[test]
    fn softmax_heads_sum_to_one_and_shift_invariant() {
        let cfg = small_cfg();
        let state = ModelState::init(cfg.clone(), 3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let inputs = random_inputs(&cfg, &mut rng);
        let probs = state.predict_probs(&inputs).unwrap();
        assert_eq!(probs.len(), 4);
        for (head, p) in &probs {
            let s: f32 = p.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "{head:?} sums to {s}");
            assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
        }

        // Shifting logits by a constant leaves softmax unchanged.
        let mut g: Graph<f64> = Graph::new();
        let l = g.input(TensorData::from_vec(&[1, 5], vec![0.3, -1.0, 2.0, 0.0, 1.1]));
        let p1 = g.softmax_rows(l);
        let shifted = g.input(TensorData::from_vec(
            &[1, 5],
            vec![0.3 + 7.0, -1.0 + 7.0, 2.0 + 7.0, 7.0, 1.1 + 7.0],
        ));
        let p2 = g.softmax_rows(shifted);
        for (a, b) in g.value(p1).data.iter().zip(&g.value(p2).data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_image_gives_deterministic_finite_embedding() {
        let cfg = ModelConfig {
            image_input: ImageInputKind::Raw60x80,
            use_internal_audio: false,
            seq_len: 2,
            heads: HeadSpec { fabric_classes: Some(3), property_heads: false },
            ..ModelConfig::default()
        };
        let params = init_params(&cfg, 1);
        let mut inputs: SeqTensors<f32> = SeqTensors::empty();
        inputs.image = Some(TensorData::zeros(&[2, 1, SMALL_H, SMALL_W]));

        let run = || {
            let mut g: Graph<f32> = Graph::new();
            let bound = BoundParams::bind(&mut g, &params, false);
            let out = forward(&mut g, &bound, &cfg, &inputs, false).unwrap();
            g.value(out.fused).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn missing_modality_input_is_shape_error() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 1);
        let inputs: SeqTensors<f32> = SeqTensors::empty();
        let mut g: Graph<f32> = Graph::new();
        let bound = BoundParams::bind(&mut g, &params, false);
        assert!(matches!(
            forward(&mut g, &bound, &cfg, &inputs, false),
            Err(NeuralError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn attention_probs_rows_sum_to_one() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 11);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let inputs: SeqTensors<f32> = random_inputs(&cfg, &mut rng);
        let mut g: Graph<f32> = Graph::new();
        let bound = BoundParams::bind(&mut g, &params, false);
        let out = forward(&mut g, &bound, &cfg, &inputs, true).unwrap();
        assert_eq!(out.attn_probs.len(), cfg.attn_layers * cfg.attn_heads);
        for &p in &out.attn_probs {
            let v = g.value(p);
            assert_eq!(v.shape, vec![cfg.seq_len, cfg.seq_len]);
            for row in v.data.chunks(cfg.seq_len) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut cfg = small_cfg();
        cfg.heads = HeadSpec { fabric_classes: Some(3), property_heads: false };
        let params: ParamSet<f64> = init_params_t(&cfg, 13);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let inputs: SeqTensors<f64> = random_inputs(&cfg, &mut rng);

        let n = cfg.seq_len;
        let perm: Vec<usize> = (0..n).rev().collect();

        let run = |inputs: &SeqTensors<f64>, params: &ParamSet<f64>| {
            let mut g: Graph<f64> = Graph::new();
            let bound = BoundParams::bind(&mut g, params, false);
            let out = forward(&mut g, &bound, &cfg, inputs, false).unwrap();
            g.value(out.backbone).clone()
        };
        let base = run(&inputs, &params);

        // Permute every time-indexed input and the positional table rows.
        let permute_rows = |t: &TensorData<f64>| {
            let stride = t.numel() / n;
            let mut data = vec![0.0; t.numel()];
            for (dst, &src) in perm.iter().enumerate() {
                data[dst * stride..(dst + 1) * stride]
                    .copy_from_slice(&t.data[src * stride..(src + 1) * stride]);
            }
            TensorData::from_vec(&t.shape, data)
        };
        let mut p_inputs = inputs.clone();
        p_inputs.psd_internal = p_inputs.psd_internal.as_ref().map(permute_rows);
        p_inputs.psd_external = p_inputs.psd_external.as_ref().map(permute_rows);
        p_inputs.proprio = p_inputs.proprio.as_ref().map(permute_rows);
        let mut p_params = params.clone();
        let pe = permute_rows(params.get("pos_embed").unwrap());
        *p_params.get_mut("pos_embed").unwrap() = pe;

        let permuted = run(&p_inputs, &p_params);
        let m = cfg.model_dim;
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..m {
                let a = base.data[src * m + j];
                let b = permuted.data[dst * m + j];
                assert!((a - b).abs() < 1e-9, "row {dst} col {j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn tcn_zero_input_constant_after_warmup() {
        let cfg = ModelConfig {
            backbone: BackboneKind::Tcn,
            use_internal_audio: true,
            seq_len: 40,
            psd_cutoff_hz: 500.0,
            model_dim: 8,
            audio_hidden: 6,
            audio_feat: 4,
            heads: HeadSpec { fabric_classes: Some(2), property_heads: false },
            ..ModelConfig::default()
        };
        let mut params: ParamSet<f32> = init_params(&cfg, 3);
        // Flatten the positional table so each step sees identical input.
        params.get_mut("pos_embed").unwrap().data.fill(0.0);

        let mut inputs: SeqTensors<f32> = SeqTensors::empty();
        inputs.psd_internal = Some(TensorData::zeros(&[cfg.seq_len, cfg.psd_bins()]));
        let mut g: Graph<f32> = Graph::new();
        let bound = BoundParams::bind(&mut g, &params, false);
        let out = forward(&mut g, &bound, &cfg, &inputs, false).unwrap();
        let y = g.value(out.backbone);
        // Receptive field of 4 dilated layers (k=3): 1 + 2*(1+2+4+8) = 31.
        let warmup = 31;
        let m = cfg.model_dim;
        for t in warmup..cfg.seq_len {
            for j in 0..m {
                let a = y.data[warmup * m + j];
                let b = y.data[t * m + j];
                assert!((a - b).abs() < 1e-6, "step {t} differs from steady state");
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions_bit_exactly() {
        let cfg = small_cfg();
        let state = ModelState::init(cfg.clone(), 21).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let inputs = random_inputs(&cfg, &mut rng);
        let before = state.predict_probs(&inputs).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        state.save(&path).unwrap();
        let loaded = ModelState::load(&path).unwrap();
        assert_eq!(loaded.config, cfg);
        let after = loaded.predict_probs(&inputs).unwrap();
        for (head, p) in &before {
            assert_eq!(p, &after[head], "{head:?} drifted through serialization");
        }
    }

    #[test]
    fn checkpoint_config_mismatch_refused() {
        let cfg = small_cfg();
        let state = ModelState::init(cfg.clone(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        state.save(&path).unwrap();
        let other = ModelConfig { psd_cutoff_hz: 2500.0, ..cfg };
        assert!(matches!(
            ModelState::load_compatible(&path, &other),
            Err(NeuralError::ConfigMismatch)
        ));
    }

    #[test]
    fn finite_difference_spot_check() {
        let cfg = small_cfg();
        let report = finite_difference_check(&cfg, 4, 12, 1e-3).unwrap();
        assert_eq!(report.checked, 12);
        assert!(
            report.failures.is_empty(),
            "gradient failures: {:?} (max rel err {})",
            report.failures,
            report.max_rel_err
        );
    }

    #[test]
    fn every_parameter_gets_gradient_signal() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 17);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut nonzero: std::collections::BTreeSet<String> = Default::default();
        for _ in 0..3 {
            let inputs: SeqTensors<f32> = random_inputs(&cfg, &mut rng);
            let targets = random_targets(&cfg, &mut rng);
            let mut g: Graph<f32> = Graph::new();
            let bound = BoundParams::bind(&mut g, &params, true);
            let out = forward(&mut g, &bound, &cfg, &inputs, false).unwrap();
            let loss = multitask_loss(&mut g, &out, &targets).unwrap();
            let mut grads = g.backward(loss);
            for (name, &var) in bound.iter() {
                if let Some(grad) = grads.take(var) {
                    if grad.data.iter().any(|&v| v != 0.0) {
                        nonzero.insert(name.clone());
                    }
                }
            }
        }
        for name in params.names() {
            assert!(nonzero.contains(name), "parameter {name} never received gradient");
        }
    }
}
