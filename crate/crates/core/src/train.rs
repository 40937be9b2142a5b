//! Pretraining, linear probing and per-sample test-time adaptation, with the
//! two optimizers they use.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::Instant;

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecm::mix_seed;
use crate::error::{Error, Result};
use crate::features::{apply_random_mask, MaskSpec, MaskedFeature, QdLinearFeature, VoltageGrid};
use crate::io::FeatureSidecar;
use crate::loss::{LossConfig, PhysicsContext, ResidualMode};
use crate::model::{InputNorm, ModelInput, ModelState, TrainMode};
use crate::tensor::{grad_check, GradCheckReport, ParamStore, Tape, Tensor};

/// Grid, nominal capacity and physics of the domain a feature comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainContext {
    pub grid: VoltageGrid,
    pub c_nom: f64,
    pub physics: Option<PhysicsContext>,
}

impl DomainContext {
    pub fn from_sidecar(s: &FeatureSidecar) -> Result<Self> {
        Ok(Self {
            grid: s.grid()?,
            c_nom: s.c_nom,
            physics: s.physics.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            momentum: 0.9,
            steps: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub pretrain: AdamWConfig,
    pub tta: SgdConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop when the epoch loss improved by less than `plateau_tol`
    /// (relative) over the last `plateau_window` epochs.
    pub plateau_window: usize,
    pub plateau_tol: f64,
    pub pretrain_mask_ratio: f64,
    pub ridge: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            pretrain: AdamWConfig::default(),
            tta: SgdConfig::default(),
            batch_size: 32,
            max_epochs: 500,
            plateau_window: 10,
            plateau_tol: 1e-4,
            pretrain_mask_ratio: 0.3,
            ridge: 1e-6,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pretrain.lr > 0.0 && self.tta.lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.tta.steps == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("steps, batch_size and max_epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.tta.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        MaskSpec::new(self.pretrain_mask_ratio, 0)?;
        if !(self.ridge >= 0.0) {
            return Err(Error::Config("ridge must be >= 0".into()));
        }
        Ok(())
    }
}

/// `v ← μ·v + g;  p ← p − lr·v`.
pub fn sgd_momentum_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// One AdamW update at step `t ≥ 1` with decoupled weight decay.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        params[i] -= lr * weight_decay * params[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
    }
}

/// SGD with momentum over named parameters. Buffers live as long as the
/// optimizer value.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub cfg: SgdConfig,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<String, Tensor>) -> Result<()> {
        for (name, g) in sorted(grads) {
            let p = store.get_mut(name)?;
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            sgd_momentum_step(p.data_mut(), g.data(), v, self.cfg.lr, self.cfg.momentum);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    t: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            ..Self::default()
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        for (name, g) in sorted(grads) {
            let p = store.get_mut(name)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let c = &self.cfg;
            adamw_step(p.data_mut(), g.data(), m, v, self.t, c.lr, (c.beta1, c.beta2), c.eps, c.weight_decay);
        }
        Ok(())
    }
}

fn sorted<V>(map: &HashMap<String, V>) -> Vec<(&String, &V)> {
    let mut v: Vec<_> = map.iter().collect();
    v.sort_by(|a, b| a.0.cmp(b.0));
    v
}

pub fn mae(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "metric inputs differ in length");
    pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "metric inputs differ in length");
    (pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64).sqrt()
}

/// Seed of the mask drawn for one sample.
pub fn sample_seed(seed: u64, f: &QdLinearFeature) -> u64 {
    mix_seed(seed, f.cell_id as u64, f.cycle as u64)
}

fn masked_input(model: &ModelState, f: &QdLinearFeature, domain: &DomainContext, ratio: f64, seed: u64) -> Result<ModelInput> {
    let (masked, _) = apply_random_mask(f, &MaskSpec::new(ratio, seed)?);
    model.input(&masked, domain.c_nom)
}

fn plain_input(model: &ModelState, f: &QdLinearFeature, domain: &DomainContext) -> Result<ModelInput> {
    model.input(&MaskedFeature::unmasked(f.clone()), domain.c_nom)
}

/// Loss value and gradients of one sample.
fn sample_grads(
    model: &ModelState,
    input: &ModelInput,
    domain: &DomainContext,
    loss: &LossConfig,
    trainable: &HashSet<String>,
) -> Result<(f64, HashMap<String, Tensor>)> {
    let tape = Tape::new();
    let b = model.store.bind(&tape, trainable);
    let fwd = model.forward(&tape, &b, input)?;
    let terms = model.ssl_terms(&fwd.xhat, input, &domain.grid, domain.physics.as_ref(), loss)?;
    tape.backward(terms.total)?;
    Ok((terms.total.item(), b.grads(&tape)))
}

/// Central-difference check of the full composite from patch embedding to
/// the self-supervised loss, over every non-backbone, non-head parameter.
pub fn composite_grad_check(
    model: &ModelState,
    feature: &QdLinearFeature,
    domain: &DomainContext,
    loss: &LossConfig,
    mask_ratio: f64,
    epsilon: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    loss.validate()?;
    let input = masked_input(model, feature, domain, mask_ratio, sample_seed(seed, feature))?;
    let names: Vec<String> = model
        .store
        .iter()
        .filter(|p| !p.name.starts_with("backbone.") && !p.name.starts_with("head."))
        .map(|p| p.name.clone())
        .collect();
    grad_check(
        |tape, b| {
            let fwd = model.forward(tape, b, &input)?;
            Ok(model.ssl_terms(&fwd.xhat, &input, &domain.grid, domain.physics.as_ref(), loss)?.total)
        },
        &model.store,
        &names,
        epsilon,
        max_coords,
        seed,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub epoch_losses: Vec<f64>,
    pub plateau: bool,
}

/// Fits the input normalization on the source features, then minimizes the
/// mean self-supervised loss over them with AdamW. Masks and batch order are redrawn every epoch from `optim.seed`.
pub fn pretrain(
    model: &mut ModelState,
    features: &[QdLinearFeature],
    domain: &DomainContext,
    loss: &LossConfig,
    optim: &OptimConfig,
) -> Result<PretrainReport> {
    optim.validate()?;
    loss.validate()?;
    if features.is_empty() {
        return Err(Error::Contract("pretraining needs a non-empty dataset".into()));
    }
    model.norm = InputNorm::fit(features, domain.c_nom, model.config.t_full);
    let trainable = model.trainable_set(TrainMode::Pretrain);
    let mut opt = AdamW::new(optim.pretrain);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut losses = Vec::new();
    let mut plateau = false;
    for epoch in 0..optim.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(optim.seed, 0xE90C, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(optim.batch_size) {
            let results: Vec<Result<(f64, HashMap<String, Tensor>)>> = batch
                .par_iter()
                .map(|&i| {
                    let f = &features[i];
                    let seed = mix_seed(sample_seed(optim.seed, f), epoch as u64, 0x3A5C);
                    let input = masked_input(model, f, domain, optim.pretrain_mask_ratio, seed)?;
                    sample_grads(model, &input, domain, loss, &trainable)
                })
                .collect();
            let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
            for r in results {
                let (l, grads) = r?;
                if !l.is_finite() {
                    return Err(Error::Divergence(format!("pretraining loss {l} at epoch {epoch}")));
                }
                total += l;
                for (name, g) in grads {
                    match sum.get_mut(&name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                        None => {
                            sum.insert(name, g);
                        }
                    }
                }
            }
            let n = batch.len() as f64;
            let mean: HashMap<String, Tensor> = sum
                .into_iter()
                .map(|(k, mut t)| {
                    t.data_mut().iter_mut().for_each(|v| *v /= n);
                    (k, t)
                })
                .collect();
            opt.step(&mut model.store, &mean)?;
        }
        let epoch_loss = total / features.len() as f64;
        debug!("epoch {epoch}: loss {epoch_loss:.6e}");
        losses.push(epoch_loss);
        let w = optim.plateau_window;
        if w > 0 && losses.len() > w {
            let before = losses[losses.len() - 1 - w];
            if (before - epoch_loss) / before.abs().max(f64::MIN_POSITIVE) < optim.plateau_tol {
                plateau = true;
                break;
            }
        }
    }
    if !model.store.iter().all(|p| p.value.is_finite()) {
        return Err(Error::Divergence("non-finite parameters after pretraining".into()));
    }
    info!("pretrained {} epochs, final loss {:.6e}", losses.len(), losses.last().unwrap());
    Ok(PretrainReport {
        epochs: losses.len(),
        epoch_losses: losses,
        plateau,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub n_samples: usize,
    pub train_mae: f64,
    pub train_rmse: f64,
}

/// Fits the head on frozen latents by ridge regression (intercept not
/// penalized) and writes it into the model.
pub fn linear_probe(
    model: &mut ModelState,
    features: &[QdLinearFeature],
    labels: &[f64],
    domain: &DomainContext,
    ridge: f64,
) -> Result<ProbeReport> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Contract(format!(
            "probe needs matching non-empty features and labels ({} vs {})",
            features.len(),
            labels.len()
        )));
    }
    let latents: Vec<Vec<f64>> = features
        .par_iter()
        .map(|f| model.latent(&plain_input(model, f, domain)?))
        .collect::<Result<_>>()?;
    let (n, d) = (latents.len(), latents[0].len());
    let varies = (0..d).any(|j| latents.iter().any(|l| l[j] != latents[0][j]));
    if !varies {
        return Err(Error::Contract("latents have rank 0: every sample maps to the same point".into()));
    }
    let x = DMatrix::from_fn(n, d + 1, |i, j| if j < d { latents[i][j] } else { 1.0 });
    let y = DVector::from_column_slice(labels);
    let mut a = x.transpose() * &x;
    for j in 0..d {
        a[(j, j)] += ridge;
    }
    let rhs = x.transpose() * &y;
    let w = match a.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Contract("probe design matrix is singular".into()))?,
    };
    model.store.set("head.w", Tensor::matrix(d, 1, w.rows(0, d).iter().copied().collect())?)?;
    model.store.set("head.b", Tensor::vector(vec![w[d]]))?;
    let pred: Vec<f64> = (x * &w).iter().copied().collect();
    Ok(ProbeReport {
        n_samples: n,
        train_mae: mae(&pred, labels),
        train_rmse: rmse(&pred, labels),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaMode {
    None,
    #[default]
    TtaFull,
    TtaPpa,
}

impl TtaMode {
    pub fn train_mode(self) -> Option<TrainMode> {
        match self {
            Self::None => None,
            Self::TtaFull => Some(TrainMode::TtaFull),
            Self::TtaPpa => Some(TrainMode::TtaPpa),
        }
    }
}

impl std::str::FromStr for TtaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "tta_full" => Ok(Self::TtaFull),
            "tta_ppa" => Ok(Self::TtaPpa),
            other => Err(Error::Config(format!("unknown TTA mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslKind {
    ReconOnly,
    #[default]
    PgSsl,
}

impl std::str::FromStr for SslKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recon_only" => Ok(Self::ReconOnly),
            "pg_ssl" => Ok(Self::PgSsl),
            other => Err(Error::Config(format!("unknown SSL objective `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetPolicy {
    #[default]
    Episodic,
    Online,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtaConfig {
    pub mode: TtaMode,
    pub ssl: SslKind,
    pub mask_ratio: f64,
    pub reset_policy: ResetPolicy,
    pub residual_mode: ResidualMode,
    pub seed: u64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            mode: TtaMode::TtaFull,
            ssl: SslKind::PgSsl,
            mask_ratio: 0.8,
            reset_policy: ResetPolicy::Episodic,
            residual_mode: ResidualMode::OcvCorrected,
            seed: 0,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.95).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("TTA mask ratio {} outside [0, 0.95]", self.mask_ratio)));
        }
        Ok(())
    }

    /// The loss this configuration optimizes, derived from `base`.
    pub fn loss(&self, base: &LossConfig) -> LossConfig {
        LossConfig {
            lambda: match self.ssl {
                SslKind::ReconOnly => 0.0,
                SslKind::PgSsl => base.lambda,
            },
            residual_mode: self.residual_mode,
            ..*base
        }
    }
}

/// Mutable adaptation state of one stream.
#[derive(Clone, Debug)]
pub struct Session {
    pub state: ModelState,
    sgd: Sgd,
}

impl Session {
    pub fn new(model: &ModelState, optim: &SgdConfig) -> Self {
        Self {
            state: model.clone(),
            sgd: Sgd::new(*optim),
        }
    }

    /// Runs the SGD steps on one feature and returns the loss before each
    /// step followed by the loss after the last one. The mask is drawn once
    /// per sample, so the trajectory compares like with like.
    pub fn adapt(&mut self, feature: &QdLinearFeature, domain: &DomainContext, cfg: &TtaConfig, base_loss: &LossConfig) -> Result<Vec<f64>> {
        let Some(mode) = cfg.mode.train_mode() else {
            return Ok(Vec::new());
        };
        let loss = cfg.loss(base_loss);
        let input = masked_input(&self.state, feature, domain, cfg.mask_ratio, sample_seed(cfg.seed, feature))?;
        let trainable = self.state.trainable_set(mode);
        let cached = (mode == TrainMode::TtaFull && !self.state.config.tta_full_adapts_input)
            .then(|| self.state.context_value(&input))
            .transpose()?;
        let mut losses = Vec::with_capacity(self.sgd.cfg.steps + 1);
        for step in 0..=self.sgd.cfg.steps {
            let last = step == self.sgd.cfg.steps;
            let tape = Tape::new();
            let b = if last {
                self.state.store.bind(&tape, &HashSet::new())
            } else {
                self.state.store.bind(&tape, &trainable)
            };
            let xhat = match &cached {
                Some(ctx) => self.state.heads(&b, &tape.constant(ctx.clone()))?.xhat,
                None => self.state.forward(&tape, &b, &input)?.xhat,
            };
            let terms = self.state.ssl_terms(&xhat, &input, &domain.grid, domain.physics.as_ref(), &loss)?;
            let l = terms.total.item();
            if !l.is_finite() {
                return Err(Error::Divergence(format!(
                    "TTA loss {l} at step {step} (cell {}, cycle {})",
                    feature.cell_id, feature.cycle
                )));
            }
            losses.push(l);
            if last {
                break;
            }
            tape.backward(terms.total)?;
            let grads = b.grads(&tape);
            self.sgd.step(&mut self.state.store, &grads)?;
        }
        Ok(losses)
    }

    pub fn predict(&self, feature: &QdLinearFeature, domain: &DomainContext) -> Result<f64> {
        self.state.predict(&plain_input(&self.state, feature, domain)?)
    }
}

/// Adapts a fresh copy of `model` to one feature.
pub fn tta_adapt(
    model: &ModelState,
    feature: &QdLinearFeature,
    domain: &DomainContext,
    cfg: &TtaConfig,
    optim: &SgdConfig,
    loss: &LossConfig,
) -> Result<(ModelState, Vec<f64>)> {
    cfg.validate()?;
    let mut s = Session::new(model, optim);
    let losses = s.adapt(feature, domain, cfg, loss)?;
    Ok((s.state, losses))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub cell_id: usize,
    pub cycle: usize,
    pub true_soh: Option<f64>,
    pub pred_soh: f64,
    pub ssl_losses: Vec<f64>,
    /// Adaptation plus prediction time (ms).
    #[serde(skip)]
    pub wall_ms: f64,
}

/// Adapts to and predicts each feature in arrival order. Labels are never
/// read here.
pub fn adapt_and_predict_stream<'a, I>(
    model: &ModelState,
    stream: I,
    domain: &DomainContext,
    cfg: &TtaConfig,
    optim: &SgdConfig,
    loss: &LossConfig,
) -> Result<Vec<SampleRecord>>
where
    I: IntoIterator<Item = &'a QdLinearFeature>,
{
    cfg.validate()?;
    let mut session = Session::new(model, optim);
    let mut out = Vec::new();
    for f in stream {
        let start = Instant::now();
        if cfg.reset_policy == ResetPolicy::Episodic {
            session = Session::new(model, optim);
        }
        let ssl_losses = session.adapt(f, domain, cfg, loss)?;
        let pred_soh = session.predict(f, domain)?;
        out.push(SampleRecord {
            cell_id: f.cell_id,
            cycle: f.cycle,
            true_soh: None,
            pred_soh,
            ssl_losses,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_ms: f64,
    pub mean_ms_per_sample: f64,
    pub max_ms_per_sample: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub config: TtaConfig,
    pub samples: Vec<SampleRecord>,
    pub n_labeled: usize,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub trainable_params: usize,
    /// Wall-clock figures; kept out of the JSON so reruns are byte-identical.
    #[serde(skip)]
    pub timing: Option<Timing>,
}

impl AdaptationReport {
    /// Joins labels onto the records and computes the metrics.
    pub fn new(config: TtaConfig, mut samples: Vec<SampleRecord>, labels: &HashMap<(usize, usize), f64>, trainable_params: usize) -> Self {
        let (mut p, mut t) = (Vec::new(), Vec::new());
        for s in &mut samples {
            s.true_soh = labels.get(&(s.cell_id, s.cycle)).copied();
            if let Some(y) = s.true_soh {
                p.push(s.pred_soh);
                t.push(y);
            }
        }
        let times: Vec<f64> = samples.iter().map(|s| s.wall_ms).collect();
        let timing = (!times.is_empty()).then(|| Timing {
            total_ms: times.iter().sum(),
            mean_ms_per_sample: times.iter().sum::<f64>() / times.len() as f64,
            max_ms_per_sample: times.iter().copied().fold(0.0, f64::max),
        });
        Self {
            config,
            n_labeled: p.len(),
            mae: (!p.is_empty()).then(|| mae(&p, &t)),
            rmse: (!p.is_empty()).then(|| rmse(&p, &t)),
            samples,
            trainable_params,
            timing,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Runs one session per cell (cells in parallel, each stream in cycle
/// order) and assembles the report.
pub fn run_adaptation(
    model: &ModelState,
    features: &[QdLinearFeature],
    domain: &DomainContext,
    cfg: &TtaConfig,
    optim: &SgdConfig,
    loss: &LossConfig,
    labels: &HashMap<(usize, usize), f64>,
) -> Result<AdaptationReport> {
    let mut cells: BTreeMap<usize, Vec<&QdLinearFeature>> = BTreeMap::new();
    for f in features {
        cells.entry(f.cell_id).or_default().push(f);
    }
    let streams: Vec<Vec<&QdLinearFeature>> = cells.into_values().collect();
    let per_cell: Vec<Result<Vec<SampleRecord>>> = streams
        .par_iter()
        .map(|s| adapt_and_predict_stream(model, s.iter().copied(), domain, cfg, optim, loss))
        .collect();
    let mut samples = Vec::with_capacity(features.len());
    for r in per_cell {
        samples.extend(r?);
    }
    let trainable = cfg.mode.train_mode().map_or(0, |m| model.num_trainable(m));
    Ok(AdaptationReport::new(*cfg, samples, labels, trainable))
}
