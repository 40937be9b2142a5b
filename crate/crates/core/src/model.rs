//! The Y-shaped network: patch embedder, reprogramming cross-attention
//! against a frozen backbone's embedding table, prefix prompt, encoder `f`,
//! monotone curve decoder `g` and linear SOH head `h`.
//!
//! Shapes along the forward pass: patches `P × 3·patch_len`, tokens `P × d`,
//! aligned tokens `P × D`, context `(L_p + P) × D`, latent `D`, curve `T′`.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ecm::mix_seed;
use crate::error::{Error, Result};
use crate::features::{MaskedFeature, QdLinearFeature, VoltageGrid};
use crate::loss::{pg_ssl_loss_var, CurveVars, LossConfig, PgSslTerms, PhysicsContext, ResidualMode};
use crate::tensor::{Binding, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Mlp,
    Gru,
    Transformer,
}

impl FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "gru" => Ok(Self::Gru),
            "transformer" => Ok(Self::Transformer),
            other => Err(Error::Config(format!("unknown encoder kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    None,
    #[default]
    FrozenToy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Full curve length T′.
    pub t_full: usize,
    pub patch_len: usize,
    /// Token width d.
    pub embed_dim: usize,
    /// Backbone width D.
    pub backbone_dim: usize,
    pub n_heads: usize,
    /// Encoder depth.
    pub n_layers: usize,
    pub encoder_kind: EncoderKind,
    /// Prefix prompt length L_p.
    pub prompt_len: usize,
    /// Number of prototypes V′.
    pub n_prototypes: usize,
    pub reprogramming: bool,
    pub backbone: BackboneKind,
    /// Rows V of the backbone embedding table.
    pub vocab_size: usize,
    pub backbone_blocks: usize,
    pub decoder_hidden: usize,
    /// Softplus floor of the decoder increments.
    pub decoder_eps: f64,
    /// Also adapt the embedder and reprogrammer under `tta_full`.
    pub tta_full_adapts_input: bool,
    /// Decoder output and reconstruction targets are capacities in units of
    /// `c_nom / capacity_unit`.
    pub capacity_unit: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t_full: 128,
            patch_len: 16,
            embed_dim: 32,
            backbone_dim: 96,
            n_heads: 4,
            n_layers: 1,
            encoder_kind: EncoderKind::Mlp,
            prompt_len: 8,
            n_prototypes: 16,
            reprogramming: true,
            backbone: BackboneKind::FrozenToy,
            vocab_size: 256,
            backbone_blocks: 2,
            decoder_hidden: 96,
            decoder_eps: 1e-6,
            tta_full_adapts_input: false,
            capacity_unit: 1.0,
            seed: 0,
        }
    }
}

/// Analytic parameter counts per partition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub embedder: usize,
    pub reprogrammer: usize,
    pub prompt: usize,
    pub backbone: usize,
    pub encoder: usize,
    pub decoder: usize,
    pub head: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.embedder + self.reprogrammer + self.prompt + self.backbone + self.encoder + self.decoder + self.head
    }

    pub fn of(&self, p: Partition) -> usize {
        match p {
            Partition::Embedder => self.embedder,
            Partition::Reprogrammer => self.reprogrammer,
            Partition::Prompt => self.prompt,
            Partition::Backbone => self.backbone,
            Partition::Encoder => self.encoder,
            Partition::Decoder => self.decoder,
            Partition::Head => self.head,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t_full", self.t_full),
            ("patch_len", self.patch_len),
            ("embed_dim", self.embed_dim),
            ("backbone_dim", self.backbone_dim),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("n_prototypes", self.n_prototypes),
            ("decoder_hidden", self.decoder_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.t_full % self.patch_len != 0 {
            return Err(Error::Config(format!(
                "t_full {} is not divisible by patch_len {}",
                self.t_full, self.patch_len
            )));
        }
        if self.embed_dim > self.backbone_dim {
            return Err(Error::Config("embed_dim must not exceed backbone_dim".into()));
        }
        if self.backbone_dim % self.n_heads != 0 {
            return Err(Error::Config("backbone_dim must be divisible by n_heads".into()));
        }
        if self.reprogramming && self.backbone == BackboneKind::None {
            return Err(Error::Config("reprogramming needs the frozen backbone's embedding table".into()));
        }
        if self.backbone == BackboneKind::FrozenToy && self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be >= 1".into()));
        }
        if !(self.decoder_eps > 0.0) {
            return Err(Error::Config("decoder_eps must be positive".into()));
        }
        if !(self.capacity_unit > 0.0 && self.capacity_unit.is_finite()) {
            return Err(Error::Config("capacity_unit must be positive".into()));
        }
        Ok(())
    }

    /// Number of patches P.
    pub fn n_patches(&self) -> usize {
        self.t_full / self.patch_len
    }

    /// Input channels per patch: value, observed flag and mask flag.
    pub fn patch_features(&self) -> usize {
        3 * self.patch_len
    }

    pub fn head_dim(&self) -> usize {
        self.backbone_dim / self.n_heads
    }

    fn block_params(d: usize) -> usize {
        8 * d * d + 3 * d
    }

    pub fn param_counts(&self) -> ParamCounts {
        let (d, dd, t) = (self.embed_dim, self.backbone_dim, self.t_full);
        let reprogrammer = if self.reprogramming {
            self.n_prototypes * self.vocab_size + d * dd + 2 * dd * dd
        } else {
            d * dd + dd
        };
        let backbone = match self.backbone {
            BackboneKind::None => 0,
            BackboneKind::FrozenToy => self.vocab_size * dd + self.backbone_blocks * Self::block_params(dd),
        };
        let per_layer = match self.encoder_kind {
            EncoderKind::Mlp => 4 * dd * dd + 3 * dd,
            EncoderKind::Gru => 6 * dd * dd + 6 * dd,
            EncoderKind::Transformer => Self::block_params(dd),
        };
        let h = self.decoder_hidden;
        ParamCounts {
            embedder: self.patch_features() * d + d,
            reprogrammer,
            prompt: self.prompt_len * dd,
            backbone,
            encoder: self.n_layers * per_layer,
            decoder: dd * h + h + h * t + t + 1,
            head: dd + 1,
        }
    }
}

/// Disjoint groups of parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Embedder,
    Reprogrammer,
    Prompt,
    Backbone,
    Encoder,
    Decoder,
    Head,
}

impl Partition {
    pub const ALL: [Partition; 7] = [
        Self::Embedder,
        Self::Reprogrammer,
        Self::Prompt,
        Self::Backbone,
        Self::Encoder,
        Self::Decoder,
        Self::Head,
    ];

    pub fn of(name: &str) -> Result<Self> {
        let prefix = name.split('.').next().unwrap_or("");
        match prefix {
            "embed" => Ok(Self::Embedder),
            "reprog" | "align" => Ok(Self::Reprogrammer),
            "prompt" => Ok(Self::Prompt),
            "backbone" => Ok(Self::Backbone),
            "encoder" => Ok(Self::Encoder),
            "decoder" => Ok(Self::Decoder),
            "head" => Ok(Self::Head),
            _ => Err(Error::Contract(format!("parameter `{name}` belongs to no partition"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pretrain,
    Probe,
    TtaFull,
    TtaPpa,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [Self::Pretrain, Self::Probe, Self::TtaFull, Self::TtaPpa];
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "probe" => Ok(Self::Probe),
            "tta_full" => Ok(Self::TtaFull),
            "tta_ppa" => Ok(Self::TtaPpa),
            other => Err(Error::Contract(format!("unknown training mode `{other}`"))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pretrain => "pretrain",
            Self::Probe => "probe",
            Self::TtaFull => "tta_full",
            Self::TtaPpa => "tta_ppa",
        })
    }
}

/// Partitions a mode optimizes.
pub fn mode_partitions(config: &ModelConfig, mode: TrainMode) -> Vec<Partition> {
    use Partition::*;
    match mode {
        TrainMode::Pretrain => vec![Embedder, Reprogrammer, Encoder, Decoder, Prompt],
        TrainMode::Probe => vec![Head],
        TrainMode::TtaFull if config.tta_full_adapts_input => vec![Embedder, Reprogrammer, Encoder, Decoder],
        TrainMode::TtaFull => vec![Encoder, Decoder],
        TrainMode::TtaPpa => vec![Prompt],
    }
}

/// Model-ready view of one (possibly masked) feature.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// `P × 3·patch_len`: per patch the visible normalized capacities, the
    /// observed flags and the mask flags.
    pub patches: Tensor,
    /// Observed-prefix capacities in units of `c_nom / capacity_unit`
    /// (pre-mask values).
    pub target: Vec<f64>,
    pub n_obs: usize,
    pub current_a: f64,
    pub c_nom: f64,
    pub unit: f64,
}

impl ModelInput {
    pub fn new(masked: &MaskedFeature, c_nom: f64, config: &ModelConfig, norm: &InputNorm) -> Result<Self> {
        let f = &masked.feature;
        if f.len() != config.t_full {
            return Err(Error::Config(format!(
                "feature has {} grid points, model expects {}",
                f.len(),
                config.t_full
            )));
        }
        if !(c_nom > 0.0) {
            return Err(Error::Config(format!("nominal capacity must be positive, got {c_nom}")));
        }
        let (p_n, pl) = (config.n_patches(), config.patch_len);
        let mut data = vec![0.0; p_n * 3 * pl];
        for p in 0..p_n {
            let row = &mut data[p * 3 * pl..(p + 1) * 3 * pl];
            for k in 0..pl {
                let i = p * pl + k;
                if masked.visible(i) {
                    row[k] = norm.apply(i, f.values[i] / c_nom);
                }
                row[pl + k] = f64::from(u8::from(f.obs_mask[i]));
                row[2 * pl + k] = f64::from(u8::from(masked.masked[i]));
            }
        }
        let n_obs = f.n_observed();
        Ok(Self {
            patches: Tensor::matrix(p_n, 3 * pl, data)?,
            target: f.values[..n_obs].iter().map(|v| config.capacity_unit * v / c_nom).collect(),
            n_obs,
            current_a: f.current_a,
            c_nom,
            unit: config.capacity_unit,
        })
    }
}

/// Per-position standardization of the capacity channel, fitted on the
/// pretraining set. Hidden positions stay at 0, the fitted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub const STD_FLOOR: f64 = 1e-3;

    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Statistics of `value / c_nom` over the observed positions. Positions
    /// never observed keep the identity transform.
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a QdLinearFeature>, c_nom: f64, n: usize) -> Self {
        let (mut sum, mut sq, mut count) = (vec![0.0; n], vec![0.0; n], vec![0usize; n]);
        for f in features {
            for i in 0..f.n_observed().min(n) {
                let v = f.values[i] / c_nom;
                sum[i] += v;
                sq[i] += v * v;
                count[i] += 1;
            }
        }
        let mut out = Self::identity(n);
        for i in 0..n {
            if count[i] > 0 {
                let m = sum[i] / count[i] as f64;
                out.mean[i] = m;
                out.std[i] = (sq[i] / count[i] as f64 - m * m).max(0.0).sqrt().max(Self::STD_FLOOR);
            }
        }
        out
    }

    pub fn apply(&self, i: usize, v: f64) -> f64 {
        (v - self.mean[i]) / self.std[i]
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.mean.len() != n || self.std.len() != n {
            return Err(Error::Config(format!("input normalization has {} points, model expects {n}", self.mean.len())));
        }
        if self.mean.iter().any(|m| !m.is_finite()) || self.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config("input normalization must be finite with positive spread".into()));
        }
        Ok(())
    }
}

/// Encoder, decoder and head outputs.
#[derive(Clone, Copy, Debug)]
pub struct Heads<'t> {
    pub latent: Var<'t>,
    pub xhat: Var<'t>,
    pub soh: Var<'t>,
}

/// Forward-pass intermediates.
#[derive(Clone, Copy, Debug)]
pub struct Forward<'t> {
    pub tokens: Var<'t>,
    pub aligned: Var<'t>,
    pub context: Var<'t>,
    pub latent: Var<'t>,
    pub xhat: Var<'t>,
    pub soh: Var<'t>,
}

/// Plain-value generated curve with its voltage-time companion.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedCurve {
    pub capacity: Vec<f64>,
    pub voltage: Vec<f64>,
    /// `None` when the charge current is zero.
    pub time_s: Option<Vec<f64>>,
}

/// Parameters of the frozen toy backbone: an embedding table and
/// transformer blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    store: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct BackboneFile {
    frozen: bool,
    params: serde_json::Value,
}

impl FrozenBackbone {
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut init = Init::new(seed);
        let mut store = ParamStore::new();
        if config.backbone == BackboneKind::FrozenToy {
            let dd = config.backbone_dim;
            store.insert(
                "backbone.embedding",
                init.normal(&[config.vocab_size, dd], 1.0),
                false,
            )?;
            for k in 0..config.backbone_blocks {
                insert_block(&mut store, &mut init, &format!("backbone.block{k}"), dd, false)?;
            }
        }
        Ok(Self { store })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = BackboneFile {
            frozen: true,
            params: self.store.to_json_value()?,
        };
        fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path, config: &ModelConfig) -> Result<Self> {
        let file: BackboneFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        if !file.frozen {
            return Err(Error::Contract(format!("{} is not marked frozen", path.display())));
        }
        let loaded = ParamStore::from_json_value(file.params)?;
        let expected = Self::random(config, 0)?;
        let mut store = ParamStore::new();
        for p in expected.store.iter() {
            let got = loaded.get(&p.name)?;
            if got.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "backbone `{}` is {:?}, config needs {:?}",
                    p.name,
                    got.shape(),
                    p.value.shape()
                )));
            }
            store.insert(p.name.clone(), got.clone(), false)?;
        }
        if loaded.len() != expected.store.len() {
            return Err(Error::Config("backbone file does not match the configured block count".into()));
        }
        Ok(Self { store })
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = Normal::new(0.0, std).expect("positive std");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| n.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }

    /// `fan_in × fan_out` matrix with variance `1 / fan_in`.
    fn weight(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        self.normal(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }
}

fn insert_linear(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize, trainable: bool) -> Result<()> {
    store.insert(format!("{name}.w"), init.weight(fan_in, fan_out), trainable)?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]), trainable)
}

fn insert_block(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, trainable: bool) -> Result<()> {
    for m in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{name}.{m}"), init.weight(d, d), trainable)?;
    }
    insert_linear(store, init, &format!("{name}.mlp1"), d, 2 * d, trainable)?;
    insert_linear(store, init, &format!("{name}.mlp2"), 2 * d, d, trainable)
}

fn linear<'t>(b: &Binding<'t>, name: &str, x: &Var<'t>) -> Result<Var<'t>> {
    x.matmul(&b.get(&format!("{name}.w"))?)?
        .add_row(&b.get(&format!("{name}.b"))?)
}

/// Multi-head scaled dot-product attention. `q` is `n × D`, `k` and `v` are
/// `m × D`; head `h` uses columns `h·d_k .. (h+1)·d_k`. Returns the
/// concatenated head outputs (`n × D`) and each head's `n × m` weights.
pub fn multi_head_attention<'t>(q: &Var<'t>, k: &Var<'t>, v: &Var<'t>, n_heads: usize) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let dim = q.value().cols();
    if n_heads == 0 || dim % n_heads != 0 || k.value().cols() != dim || v.value().cols() != dim {
        return Err(Error::Shape {
            op: "attention",
            detail: format!("q {:?}, k {:?}, v {:?}, {n_heads} heads", q.shape(), k.shape(), v.shape()),
        });
    }
    let dk = dim / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = (q.slice(h * dk, dk)?, k.slice(h * dk, dk)?, v.slice(h * dk, dk)?);
        let w = qh.matmul(&kh.transpose()?)?.scale(scale).softmax();
        outs.push(w.matmul(&vh)?);
        weights.push(w);
    }
    let out = if outs.len() == 1 { outs[0] } else { Var::concat(&outs)? };
    Ok((out, weights))
}

fn transformer_block<'t>(b: &Binding<'t>, name: &str, x: &Var<'t>, n_heads: usize) -> Result<Var<'t>> {
    let h = x.layer_norm();
    let q = h.matmul(&b.get(&format!("{name}.wq"))?)?;
    let k = h.matmul(&b.get(&format!("{name}.wk"))?)?;
    let v = h.matmul(&b.get(&format!("{name}.wv"))?)?;
    let (att, _) = multi_head_attention(&q, &k, &v, n_heads)?;
    let x = x.add(&att.matmul(&b.get(&format!("{name}.wo"))?)?)?;
    let m = linear(b, &format!("{name}.mlp1"), &x.layer_norm())?.gelu();
    x.add(&linear(b, &format!("{name}.mlp2"), &m)?)
}

fn gru_layer<'t>(b: &Binding<'t>, name: &str, x: &Var<'t>, dim: usize) -> Result<Var<'t>> {
    let tape = x.tape();
    let xw = linear(b, &format!("{name}.x"), x)?;
    let (wh, bh) = (b.get(&format!("{name}.h.w"))?, b.get(&format!("{name}.h.b"))?);
    let mut h = tape.constant(Tensor::zeros(&[1, dim]));
    let mut outs = Vec::with_capacity(x.value().rows());
    for t in 0..x.value().rows() {
        let xt = xw.slice_rows(t, 1)?;
        let hw = h.matmul(&wh)?.add_row(&bh)?;
        let z = xt.slice(0, dim)?.add(&hw.slice(0, dim)?)?.sigmoid();
        let r = xt.slice(dim, dim)?.add(&hw.slice(dim, dim)?)?.sigmoid();
        let n = xt.slice(2 * dim, dim)?.add(&r.mul(&hw.slice(2 * dim, dim)?)?)?.tanh();
        h = n.add(&z.mul(&h.sub(&n)?)?)?;
        outs.push(h);
    }
    Var::concat_rows(&outs)
}

fn expect_shape(op: &'static str, v: &Var<'_>, shape: &[usize]) -> Result<()> {
    if v.shape() != shape {
        return Err(Error::Shape {
            op,
            detail: format!("expected {shape:?}, got {:?}", v.shape()),
        });
    }
    Ok(())
}

/// Fixed sinusoidal position channels, `rows × dim`.
pub fn sinusoidal_positions(rows: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; rows * dim];
    for p in 0..rows {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = p as f64 * freq;
            data[p * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(vec![rows, dim], data).expect("shape matches data")
}

/// Configuration plus every parameter of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub norm: InputNorm,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: ModelConfig,
    #[serde(default)]
    norm: Option<InputNorm>,
    params: serde_json::Value,
}

const BACKBONE_STREAM: u64 = 0xBAC0;


impl ModelState {
    /// Randomly initialized model; the backbone is seeded from
    /// `config.seed` as well.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let backbone = FrozenBackbone::random(&config, mix_seed(config.seed, BACKBONE_STREAM, 0))?;
        Self::with_backbone(config, &backbone)
    }

    pub fn with_backbone(config: ModelConfig, backbone: &FrozenBackbone) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(mix_seed(config.seed, 1, 0));
        let (d, dd) = (config.embed_dim, config.backbone_dim);
        let mut store = ParamStore::new();
        insert_linear(&mut store, &mut init, "embed", config.patch_features(), d, true)?;
        if config.reprogramming {
            store.insert(
                "reprog.proto",
                init.weight(config.vocab_size, config.n_prototypes).reshaped(vec![config.n_prototypes, config.vocab_size])?,
                true,
            )?;
            store.insert("reprog.wq", init.weight(d, dd), true)?;
            store.insert("reprog.wk", init.weight(dd, dd), true)?;
            store.insert("reprog.wv", init.weight(dd, dd), true)?;
        } else {
            insert_linear(&mut store, &mut init, "align", d, dd, true)?;
        }
        if config.prompt_len > 0 {
            store.insert("prompt", init.normal(&[config.prompt_len, dd], 0.5), true)?;
        }
        for p in backbone.store.iter() {
            store.insert(p.name.clone(), p.value.as_ref().clone(), false)?;
        }
        for l in 0..config.n_layers {
            let name = format!("encoder.layer{l}");
            match config.encoder_kind {
                EncoderKind::Mlp => {
                    insert_linear(&mut store, &mut init, &format!("{name}.fc1"), dd, 2 * dd, true)?;
                    insert_linear(&mut store, &mut init, &format!("{name}.fc2"), 2 * dd, dd, true)?;
                }
                EncoderKind::Gru => {
                    insert_linear(&mut store, &mut init, &format!("{name}.x"), dd, 3 * dd, true)?;
                    insert_linear(&mut store, &mut init, &format!("{name}.h"), dd, 3 * dd, true)?;
                }
                EncoderKind::Transformer => insert_block(&mut store, &mut init, &name, dd, true)?,
            }
        }
        let h = config.decoder_hidden;
        insert_linear(&mut store, &mut init, "decoder.fc1", dd, h, true)?;
        store.insert("decoder.fc2.w", init.normal(&[h, config.t_full], 0.01), true)?;
        store.insert("decoder.fc2.b", Tensor::zeros(&[config.t_full]), true)?;
        let ramp = config.t_full as f64 * (2f64.ln() + config.decoder_eps);
        store.insert("decoder.log_scale", Tensor::vector(vec![(config.capacity_unit / ramp).ln()]), true)?;
        store.insert("head.w", Tensor::zeros(&[dd, 1]), true)?;
        store.insert("head.b", Tensor::vector(vec![100.0]), true)?;
        let norm = InputNorm::identity(config.t_full);
        let state = Self { config, store, norm };
        state.check_partitions()?;
        Ok(state)
    }

    fn check_partitions(&self) -> Result<()> {
        for name in self.store.names() {
            Partition::of(name)?;
        }
        Ok(())
    }

    pub fn names_in(&self, partitions: &[Partition]) -> Vec<String> {
        let mut names: Vec<String> = self
            .store
            .names()
            .filter(|n| Partition::of(n).is_ok_and(|p| partitions.contains(&p)))
            .map(str::to_string)
            .collect();
        names.sort();
        names
    }

    /// Sorted names of the parameters `mode` optimizes. Backbone parameters
    /// are never included.
    pub fn trainable_partition(&self, mode: TrainMode) -> Vec<String> {
        self.names_in(&mode_partitions(&self.config, mode))
    }

    pub fn trainable_set(&self, mode: TrainMode) -> HashSet<String> {
        self.trainable_partition(mode).into_iter().collect()
    }

    pub fn num_trainable(&self, mode: TrainMode) -> usize {
        self.store
            .numel(self.trainable_partition(mode).iter().map(String::as_str))
            .expect("partition names exist")
    }

    /// Bytes of every parameter outside `mode`'s partition.
    pub fn frozen_fingerprint(&self, mode: TrainMode) -> Vec<u8> {
        let trainable = self.trainable_set(mode);
        self.store.fingerprint(|n| !trainable.contains(n))
    }

    /// Bytes of the listed partitions.
    pub fn partition_fingerprint(&self, partitions: &[Partition]) -> Vec<u8> {
        self.store
            .fingerprint(|n| Partition::of(n).is_ok_and(|p| partitions.contains(&p)))
    }

    pub fn input(&self, masked: &MaskedFeature, c_nom: f64) -> Result<ModelInput> {
        ModelInput::new(masked, c_nom, &self.config, &self.norm)
    }

    /// Linear patch projection to `P × d`, before position channels.
    pub fn embed_patches<'t>(&self, b: &Binding<'t>, patches: &Var<'t>) -> Result<Var<'t>> {
        let c = &self.config;
        expect_shape("embed_patches", patches, &[c.n_patches(), c.patch_features()])?;
        let tokens = linear(b, "embed", patches)?;
        expect_shape("embed_patches", &tokens, &[c.n_patches(), c.embed_dim])?;
        Ok(tokens)
    }

    /// Patch tokens with sinusoidal position channels added.
    pub fn embed<'t>(&self, b: &Binding<'t>, patches: &Var<'t>) -> Result<Var<'t>> {
        let tokens = self.embed_patches(b, patches)?;
        let pe = patches
            .tape()
            .constant(sinusoidal_positions(self.config.n_patches(), self.config.embed_dim));
        tokens.add(&pe)
    }

    /// Cross-attention of tokens onto the prototypes `E′ = W_proto·E`, or
    /// the linear `d → D` pathway when reprogramming is off.
    pub fn reprogram<'t>(&self, b: &Binding<'t>, tokens: &Var<'t>) -> Result<Var<'t>> {
        let c = &self.config;
        let aligned = if c.reprogramming {
            let protos = b.get("reprog.proto")?.matmul(&b.get("backbone.embedding")?)?;
            let q = tokens.matmul(&b.get("reprog.wq")?)?;
            let k = protos.matmul(&b.get("reprog.wk")?)?;
            let v = protos.matmul(&b.get("reprog.wv")?)?;
            multi_head_attention(&q, &k, &v, c.n_heads)?.0
        } else {
            linear(b, "align", tokens)?
        };
        expect_shape("reprogram", &aligned, &[c.n_patches(), c.backbone_dim])?;
        Ok(aligned)
    }

    /// Prompt-prefixed sequence after the frozen backbone blocks.
    pub fn context<'t>(&self, b: &Binding<'t>, aligned: &Var<'t>) -> Result<Var<'t>> {
        let c = &self.config;
        let mut x = if c.prompt_len > 0 {
            Var::concat_rows(&[b.get("prompt")?, *aligned])?
        } else {
            *aligned
        };
        if c.backbone == BackboneKind::FrozenToy {
            for k in 0..c.backbone_blocks {
                x = transformer_block(b, &format!("backbone.block{k}"), &x, c.n_heads)?;
            }
        }
        expect_shape("context", &x, &[c.prompt_len + c.n_patches(), c.backbone_dim])?;
        Ok(x)
    }

    /// Encoder `f` over the context, mean-pooled to a `D` latent.
    pub fn encode_context<'t>(&self, b: &Binding<'t>, context: &Var<'t>) -> Result<Var<'t>> {
        let c = &self.config;
        let mut x = *context;
        for l in 0..c.n_layers {
            let name = format!("encoder.layer{l}");
            x = match c.encoder_kind {
                EncoderKind::Mlp => {
                    let h = linear(b, &format!("{name}.fc1"), &x.layer_norm())?.gelu();
                    x.add(&linear(b, &format!("{name}.fc2"), &h)?)?
                }
                EncoderKind::Gru => gru_layer(b, &name, &x, c.backbone_dim)?,
                EncoderKind::Transformer => transformer_block(b, &name, &x, c.n_heads)?,
            };
        }
        let latent = x.mean_rows()?;
        expect_shape("encode", &latent, &[c.backbone_dim])?;
        Ok(latent)
    }

    /// Prompt prepending, backbone and encoder.
    pub fn encode<'t>(&self, b: &Binding<'t>, aligned: &Var<'t>) -> Result<Var<'t>> {
        self.encode_context(b, &self.context(b, aligned)?)
    }

    /// Monotone curve `x̂ = exp(s)·cumsum(softplus(g(latent)) + ε)`, in
    /// units of `c_nom / capacity_unit`.
    pub fn decode<'t>(&self, b: &Binding<'t>, latent: &Var<'t>) -> Result<Var<'t>> {
        let c = &self.config;
        let row = latent.reshape(vec![1, c.backbone_dim])?;
        let h = linear(b, "decoder.fc1", &row)?.gelu();
        let inc = linear(b, "decoder.fc2", &h)?.reshape(vec![c.t_full])?;
        let scale = b.get("decoder.log_scale")?.exp();
        let xhat = inc.softplus().offset(c.decoder_eps).cumsum().mul_scalar(&scale)?;
        expect_shape("decode", &xhat, &[c.t_full])?;
        Ok(xhat)
    }

    /// Affine head `D → 1`, SOH in percent.
    pub fn predict_soh<'t>(&self, b: &Binding<'t>, latent: &Var<'t>) -> Result<Var<'t>> {
        let row = latent.reshape(vec![1, self.config.backbone_dim])?;
        row.matmul(&b.get("head.w")?)?
            .add_row(&b.get("head.b")?)?
            .reshape(vec![])
    }

    pub fn forward<'t>(&self, tape: &'t Tape, b: &Binding<'t>, input: &ModelInput) -> Result<Forward<'t>> {
        let patches = tape.constant(input.patches.clone());
        let tokens = self.embed(b, &patches)?;
        let aligned = self.reprogram(b, &tokens)?;
        let context = self.context(b, &aligned)?;
        let h = self.heads(b, &context)?;
        Ok(Forward {
            tokens,
            aligned,
            context,
            latent: h.latent,
            xhat: h.xhat,
            soh: h.soh,
        })
    }

    /// Runs encoder, decoder and head on an already computed context.
    pub fn heads<'t>(&self, b: &Binding<'t>, context: &Var<'t>) -> Result<Heads<'t>> {
        let latent = self.encode_context(b, context)?;
        let xhat = self.decode(b, &latent)?;
        let soh = self.predict_soh(b, &latent)?;
        Ok(Heads { latent, xhat, soh })
    }

    /// Context tensor computed without gradient tracking.
    pub fn context_value(&self, input: &ModelInput) -> Result<Tensor> {
        let tape = Tape::new();
        let b = self.store.bind(&tape, &HashSet::new());
        let patches = tape.constant(input.patches.clone());
        let aligned = self.reprogram(&b, &self.embed(&b, &patches)?)?;
        Ok(self.context(&b, &aligned)?.value().as_ref().clone())
    }

    /// Latent, predicted SOH and generated curve without gradient tracking.
    pub fn evaluate(&self, input: &ModelInput) -> Result<(Vec<f64>, f64, Vec<f64>)> {
        let tape = Tape::new();
        let b = self.store.bind(&tape, &HashSet::new());
        let fwd = self.forward(&tape, &b, input)?;
        Ok((
            fwd.latent.value().data().to_vec(),
            fwd.soh.item(),
            fwd.xhat.value().data().to_vec(),
        ))
    }

    pub fn latent(&self, input: &ModelInput) -> Result<Vec<f64>> {
        Ok(self.evaluate(input)?.0)
    }

    pub fn predict(&self, input: &ModelInput) -> Result<f64> {
        Ok(self.evaluate(input)?.1)
    }

    /// Decodes a latent into capacities (Ah) and the voltage-time curve.
    pub fn generate(&self, latent: &[f64], grid: &VoltageGrid, current_a: f64, c_nom: f64) -> Result<GeneratedCurve> {
        let tape = Tape::new();
        let b = self.store.bind(&tape, &HashSet::new());
        let l = tape.constant(Tensor::vector(latent.to_vec()));
        let xhat = self.decode(&b, &l)?;
        let capacity: Vec<f64> = xhat.value().data().iter().map(|v| v * c_nom / self.config.capacity_unit).collect();
        let time_s = (current_a != 0.0).then(|| capacity.iter().map(|q| q * 3600.0 / current_a.abs()).collect());
        Ok(GeneratedCurve {
            capacity,
            voltage: grid.points(),
            time_s,
        })
    }

    /// Self-supervised loss of one input given its generated curve.
    pub fn ssl_terms<'t>(
        &self,
        xhat: &Var<'t>,
        input: &ModelInput,
        grid: &VoltageGrid,
        physics: Option<&PhysicsContext>,
        loss: &LossConfig,
    ) -> Result<PgSslTerms<'t>> {
        if loss.lambda == 0.0 {
            let curve = CurveVars {
                xhat: *xhat,
                voltage: *xhat,
                time: None,
                ocv: None,
            };
            let zero = crate::ecm::EcmCoefficients { theta1: 0.0, theta2: 0.0 };
            return pg_ssl_loss_var(&curve, &input.target, input.n_obs, input.current_a, &zero, loss);
        }
        let physics = physics.ok_or_else(|| Error::Contract("physics residual needs a physics context".into()))?;
        let curve = generated_curve(xhat.tape(), xhat, input, grid, physics, loss.residual_mode)?;
        pg_ssl_loss_var(&curve, &input.target, input.n_obs, input.current_a, &physics.coeffs, loss)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&CheckpointFile {
            config: self.config.clone(),
            norm: Some(self.norm.clone()),
            params: self.store.to_json_value()?,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        file.config.validate()?;
        let loaded = ParamStore::from_json_value(file.params)?;
        let expected = Self::new(file.config.clone())?;
        if loaded.len() != expected.store.len() {
            return Err(Error::Config("checkpoint parameters do not match its config".into()));
        }
        let mut store = ParamStore::new();
        for p in expected.store.iter() {
            let got = loaded.param(&p.name)?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Config(format!("checkpoint parameter `{}` has the wrong shape", p.name)));
            }
            store.insert(p.name.clone(), got.value.as_ref().clone(), got.trainable)?;
        }
        let norm = file.norm.unwrap_or_else(|| InputNorm::identity(file.config.t_full));
        norm.validate(file.config.t_full)?;
        Ok(Self {
            config: file.config,
            store,
            norm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn backbone(&self) -> Result<FrozenBackbone> {
        let mut store = ParamStore::new();
        for p in self.store.iter().filter(|p| p.name.starts_with("backbone.")) {
            store.insert(p.name.clone(), p.value.as_ref().clone(), false)?;
        }
        Ok(FrozenBackbone { store })
    }
}

/// SOC window the charge spans on the grid: the OCV inverse of each voltage
/// limit shifted by the steady-state overpotential `(R + R_p)·I`.
pub fn soc_window(grid: &VoltageGrid, current_a: f64, physics: &PhysicsContext) -> (f64, f64) {
    let i_d = physics.convention.to_discharge_positive(current_a);
    let eta = -physics.coeffs.total_resistance() * i_d;
    let lo = physics.ocv_table.soc_at(grid.v_lower - eta).clamp(0.0, 1.0);
    let hi = physics.ocv_table.soc_at(grid.v_upper - eta).clamp(0.0, 1.0);
    (lo, hi)
}

/// Voltage, time and OCV companions of a generated curve. The state of
/// charge at each point maps `x̂` affinely onto the SOC window.
pub fn generated_curve<'t>(
    tape: &'t Tape,
    xhat: &Var<'t>,
    input: &ModelInput,
    grid: &VoltageGrid,
    physics: &PhysicsContext,
    mode: ResidualMode,
) -> Result<CurveVars<'t>> {
    let n = xhat.len();
    if n != grid.n_points {
        return Err(Error::Config(format!("curve has {n} points, grid has {}", grid.n_points)));
    }
    let voltage = tape.constant(Tensor::vector(grid.points()));
    let time = (input.current_a != 0.0)
        .then(|| xhat.scale(input.c_nom * 3600.0 / (input.unit * input.current_a.abs())));
    let ocv = match (mode, time) {
        (ResidualMode::OcvCorrected, Some(_)) => {
            let (lo, hi) = soc_window(grid, input.current_a, physics);
            let x0 = xhat.slice(0, 1)?;
            let span = xhat.slice(n - 1, 1)?.sub(&x0)?;
            let ones = tape.constant(Tensor::full(&[n], 1.0));
            let frac = xhat.add_scalar(&x0.scale(-1.0))?.div(&ones.mul_scalar(&span)?)?;
            let soc = frac.scale(hi - lo).offset(lo);
            Some(soc.interp(physics.ocv_table.soc_points(), physics.ocv_table.voltage_points())?)
        }
        _ => None,
    };
    Ok(CurveVars {
        xhat: *xhat,
        voltage,
        time,
        ocv,
    })
}
