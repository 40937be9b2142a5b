//! Seeded source→target experiments: fleet presets, the full
//! pretrain/probe/adapt pipeline per seed, and the ablation table.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecm::{
    generate_fleet, mix_seed, ChargeMode, ChargeProtocol, DegradationSchedule, EcmParams, Fleet, FleetConfig, OcvTable,
    ParamJitter,
};
use crate::error::{Error, Result};
use crate::features::{qdlinear, truncate_partial, QdLinearFeature, VoltageGrid};
use crate::io::FeatureSidecar;
use crate::loss::{LossConfig, PhysicsContext};
use crate::model::{ModelConfig, ModelState};
use crate::train::{
    linear_probe, pretrain, run_adaptation, AdaptationReport, DomainContext, OptimConfig, PretrainReport, ProbeReport,
    SslKind, TtaConfig, TtaMode,
};

/// Source fleet of the shipped preset: 1.1 Ah cells, moderate OCV curvature.
pub fn source_fleet() -> FleetConfig {
    FleetConfig {
        n_cells: 8,
        n_cycles: 300,
        cycle_stride: 15,
        base_params: EcmParams::new(
            0.05,
            0.03,
            2000.0,
            OcvTable::parametric(2.6, 4.25, 0.5).expect("valid preset curvature"),
            1.1,
        )
        .expect("valid preset parameters"),
        param_jitter: ParamJitter {
            r_ohmic: 0.1,
            r_pol: 0.1,
            c_pol: 0.1,
            fade: 0.3,
        },
        protocol: ChargeProtocol {
            mode: ChargeMode::Cc,
            current_rate: 0.5,
            v_upper: 4.2,
            v_lower: 2.7,
            cv_cutoff_current: 0.0,
            dt: 10.0,
            temperature: 25.0,
            max_steps: 100_000,
        },
        schedule: DegradationSchedule {
            capacity_fade_per_cycle: 7.5e-4,
            resistance_growth_per_cycle: 1e-3,
            noise_sigma: 1e-3,
        },
        seed: 0,
    }
}

/// Target fleet: steeper OCV curve, twice the resistance growth and
/// 0.74 Ah cells.
pub fn target_fleet() -> FleetConfig {
    let mut f = source_fleet();
    f.n_cells = 6;
    f.base_params.ocv_table = OcvTable::parametric(2.6, 4.25, 0.8).expect("valid preset curvature");
    f.base_params.capacity_nom = 0.74;
    f.base_params.capacity_full = 0.74;
    f.schedule.resistance_growth_per_cycle *= 2.0;
    f
}

pub fn default_grid() -> VoltageGrid {
    VoltageGrid::new(2.7, 4.2, 128).expect("valid preset grid")
}

/// Featurized fleet of one domain with its labels.
#[derive(Clone, Debug)]
pub struct DomainData {
    pub context: DomainContext,
    pub features: Vec<QdLinearFeature>,
    pub labels: HashMap<(usize, usize), f64>,
}

impl DomainData {
    pub fn ordered_labels(&self) -> Result<Vec<f64>> {
        self.features
            .iter()
            .map(|f| {
                self.labels
                    .get(&(f.cell_id, f.cycle))
                    .copied()
                    .ok_or_else(|| Error::Contract(format!("no label for cell {} cycle {}", f.cell_id, f.cycle)))
            })
            .collect()
    }

    pub fn sidecar(&self) -> FeatureSidecar {
        let g = &self.context.grid;
        FeatureSidecar {
            v_lower: g.v_lower,
            v_upper: g.v_upper,
            n_points: g.n_points,
            c_nom: self.context.c_nom,
            physics: self.context.physics.clone(),
        }
    }
}

/// Physics a management system would hold for a fleet: the fresh base cell
/// at the protocol temperature.
pub fn fleet_physics(config: &FleetConfig) -> Result<PhysicsContext> {
    let base = config.base_params.clone().normalized()?;
    Ok(PhysicsContext::from_params(&base, config.protocol.temperature))
}

pub fn featurize_fleet(fleet: &Fleet, grid: &VoltageGrid, observed_fraction: f64) -> Result<Vec<QdLinearFeature>> {
    fleet
        .cycles
        .par_iter()
        .map(|c| truncate_partial(&qdlinear(c, grid)?, observed_fraction))
        .collect()
}

pub fn prepare_domain(config: &FleetConfig, grid: &VoltageGrid, observed_fraction: f64) -> Result<DomainData> {
    let fleet = generate_fleet(config)?;
    let features = featurize_fleet(&fleet, grid, observed_fraction)?;
    Ok(DomainData {
        context: DomainContext {
            grid: grid.clone(),
            c_nom: config.base_params.capacity_nom,
            physics: Some(fleet_physics(config)?),
        },
        features,
        labels: fleet.labels.iter().map(|l| ((l.cell_id, l.cycle), l.soh_pct)).collect(),
    })
}

/// One named TTA configuration of the experiment matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub tta: TtaConfig,
    /// Residual weight used at test time instead of `loss.lambda`.
    #[serde(default)]
    pub lambda: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub source: FleetConfig,
    pub target: FleetConfig,
    pub grid: VoltageGrid,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    /// Observed prefix of the source curves used for pretraining.
    pub source_observed_fraction: f64,
    /// Observed prefix of the target curves seen at test time.
    pub target_observed_fraction: f64,
    pub modes: Vec<TtaMode>,
    pub ssl: Vec<SslKind>,
    pub mask_ratios: Vec<f64>,
    /// Test-time residual weights swept for `tta_full` + `pg_ssl`.
    pub lambdas: Vec<f64>,
    pub base_tta: TtaConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: source_fleet(),
            target: target_fleet(),
            grid: default_grid(),
            model: ModelConfig {
                capacity_unit: 5.0,
                tta_full_adapts_input: true,
                ..ModelConfig::default()
            },
            optim: OptimConfig {
                max_epochs: 30,
                ridge: 100.0,
                ..OptimConfig::default()
            },
            loss: LossConfig {
                lambda: 0.25,
                ..LossConfig::default()
            },
            source_observed_fraction: 0.6,
            target_observed_fraction: 0.6,
            modes: vec![TtaMode::None, TtaMode::TtaFull, TtaMode::TtaPpa],
            ssl: vec![SslKind::PgSsl, SslKind::ReconOnly],
            mask_ratios: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            lambdas: vec![0.0, 0.01, 0.1, 1.0],
            base_tta: TtaConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment needs at least one seed".into()));
        }
        self.source.validate()?;
        self.target.validate()?;
        self.grid.validate()?;
        self.model.validate()?;
        self.optim.validate()?;
        self.loss.validate()?;
        self.base_tta.validate()?;
        if let Some(l) = self.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("swept lambda {l} must be finite and non-negative")));
        }
        if self.source.base_params == self.target.base_params
            && self.source.schedule == self.target.schedule
            && self.source.protocol == self.target.protocol
        {
            return Err(Error::Config("target fleet must differ from the source fleet".into()));
        }
        if self.grid.n_points != self.model.t_full {
            return Err(Error::Config(format!(
                "grid has {} points but the model expects {}",
                self.grid.n_points, self.model.t_full
            )));
        }
        for f in [self.source_observed_fraction, self.target_observed_fraction] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("observed fraction {f} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// Seed-specific copy: fleets, model init, batch order and masks all
    /// derive from `seed`.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.source.seed = mix_seed(seed, 0x50, 0);
        c.target.seed = mix_seed(seed, 0x7A, 0);
        c.model.seed = seed;
        c.optim.seed = seed;
        c.base_tta.seed = seed;
        c.seeds = vec![seed];
        c
    }

    /// The ablation matrix: every mode × objective at the base mask ratio,
    /// an unmasked row, and the mask and λ sweeps for `tta_full` + `pg_ssl`.
    pub fn variants(&self) -> Vec<Variant> {
        let mut out = Vec::new();
        let mut push = |tta: TtaConfig, lambda: Option<f64>| {
            let mut name = variant_name(&tta);
            if let Some(l) = lambda {
                name += &format!("/lambda{l}");
            }
            if !out.iter().any(|v: &Variant| v.name == name) {
                out.push(Variant { name, tta, lambda });
            }
        };
        for &mode in &self.modes {
            if mode == TtaMode::None {
                push(TtaConfig { mode, ..self.base_tta }, None);
                continue;
            }
            for &ssl in &self.ssl {
                push(TtaConfig { mode, ssl, ..self.base_tta }, None);
            }
        }
        if self.modes.contains(&TtaMode::TtaFull) {
            let full = TtaConfig {
                mode: TtaMode::TtaFull,
                ssl: SslKind::PgSsl,
                ..self.base_tta
            };
            push(TtaConfig { mask_ratio: 0.0, ..full }, None);
            for &m in &self.mask_ratios {
                push(TtaConfig { mask_ratio: m, ..full }, None);
            }
            for &l in &self.lambdas {
                push(full, Some(l));
            }
        }
        out
    }
}

pub fn variant_name(t: &TtaConfig) -> String {
    match t.mode {
        TtaMode::None => "none".into(),
        mode => {
            let mode = if mode == TtaMode::TtaFull { "tta_full" } else { "tta_ppa" };
            let ssl = if t.ssl == SslKind::PgSsl { "pg_ssl" } else { "recon_only" };
            format!("{mode}/{ssl}/mask{:.2}", t.mask_ratio)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub tta: TtaConfig,
    pub mae: f64,
    pub rmse: f64,
    pub trainable_params: usize,
    #[serde(skip)]
    pub mean_ms_per_sample: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub pretrain: PretrainReport,
    pub probe: ProbeReport,
    pub variants: Vec<VariantResult>,
}

impl SeedResult {
    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }
}

/// Pretrained and probed source model of one seed, plus its target data.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub model: ModelState,
    pub target: DomainData,
    pub pretrain: PretrainReport,
    pub probe: ProbeReport,
}

pub fn prepare_seed(config: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    config.validate()?;
    let cfg = config.for_seed(seed);
    let start = Instant::now();
    let source = prepare_domain(&cfg.source, &cfg.grid, cfg.source_observed_fraction)?;
    let target = prepare_domain(&cfg.target, &cfg.grid, cfg.target_observed_fraction)?;
    let mut model = ModelState::new(cfg.model.clone())?;
    let pretrain_report = pretrain(&mut model, &source.features, &source.context, &cfg.loss, &cfg.optim)?;
    let labels = source.ordered_labels()?;
    let probe = linear_probe(&mut model, &source.features, &labels, &source.context, cfg.optim.ridge)?;
    info!(
        "seed {seed}: pretrain {} epochs, probe train MAE {:.3}, {:.1} s",
        pretrain_report.epochs,
        probe.train_mae,
        start.elapsed().as_secs_f64()
    );
    Ok(Prepared {
        config: cfg,
        model,
        target,
        pretrain: pretrain_report,
        probe,
    })
}

impl Prepared {
    pub fn adapt(&self, tta: &TtaConfig) -> Result<AdaptationReport> {
        run_adaptation(
            &self.model,
            &self.target.features,
            &self.target.context,
            tta,
            &self.config.optim.tta,
            &self.config.loss,
            &self.target.labels,
        )
    }

    pub fn run_variant(&self, v: &Variant) -> Result<VariantResult> {
        let report = match v.lambda {
            None => self.adapt(&v.tta)?,
            Some(lambda) => run_adaptation(
                &self.model,
                &self.target.features,
                &self.target.context,
                &v.tta,
                &self.config.optim.tta,
                &LossConfig { lambda, ..self.config.loss },
                &self.target.labels,
            )?,
        };
        let (mae, rmse) = match (report.mae, report.rmse) {
            (Some(m), Some(r)) if m.is_finite() && r.is_finite() => (m, r),
            _ => return Err(Error::Divergence(format!("variant {} produced no finite metrics", v.name))),
        };
        Ok(VariantResult {
            name: v.name.clone(),
            tta: v.tta,
            mae,
            rmse,
            trainable_params: report.trainable_params,
            mean_ms_per_sample: report.timing.map_or(0.0, |t| t.mean_ms_per_sample),
        })
    }
}

pub fn run_seed(config: &ExperimentConfig, seed: u64, variants: &[Variant]) -> Result<SeedResult> {
    let p = prepare_seed(config, seed)?;
    let results = variants.iter().map(|v| p.run_variant(v)).collect::<Result<Vec<_>>>()?;
    Ok(SeedResult {
        seed,
        pretrain: p.pretrain,
        probe: p.probe,
        variants: results,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedResult>,
}

pub fn run_ablation(config: &ExperimentConfig) -> Result<AblationReport> {
    config.validate()?;
    let variants = config.variants();
    let seeds = config
        .seeds
        .iter()
        .map(|&s| run_seed(config, s, &variants))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        config: config.clone(),
        seeds,
    })
}

/// One row of the summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub variant: String,
    pub mean_mae: f64,
    pub mean_rmse: f64,
    pub per_seed_mae: Vec<f64>,
}

impl AblationReport {
    fn row(&self, label: &str, variant: &str) -> Option<TableRow> {
        let rows: Vec<&VariantResult> = self.seeds.iter().filter_map(|s| s.variant(variant)).collect();
        if rows.len() != self.seeds.len() || rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some(TableRow {
            label: label.into(),
            variant: variant.into(),
            mean_mae: rows.iter().map(|r| r.mae).sum::<f64>() / n,
            mean_rmse: rows.iter().map(|r| r.rmse).sum::<f64>() / n,
            per_seed_mae: rows.iter().map(|r| r.mae).collect(),
        })
    }

    /// The headline rows (full method and its three ablations) followed by
    /// every other variant in the matrix.
    pub fn table(&self) -> Vec<TableRow> {
        let base = self.config.base_tta;
        let full = TtaConfig {
            mode: TtaMode::TtaFull,
            ssl: SslKind::PgSsl,
            ..base
        };
        let headline = [
            ("BatteryTTT", variant_name(&full)),
            ("w/o PG-SSL", variant_name(&TtaConfig { ssl: SslKind::ReconOnly, ..full })),
            ("w/o Masked TTA", variant_name(&TtaConfig { mask_ratio: 0.0, ..full })),
            ("w/o TTA", "none".to_string()),
        ];
        let mut out: Vec<TableRow> = headline.iter().filter_map(|(l, v)| self.row(l, v)).collect();
        if let Some(first) = self.seeds.first() {
            for v in &first.variants {
                if !out.iter().any(|r| r.variant == v.name) {
                    out.extend(self.row(&v.name, &v.name));
                }
            }
        }
        out
    }
}

pub fn render_table_text(rows: &[TableRow]) -> String {
    let w_label = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let w_var = rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(7);
    let mut s = String::new();
    let _ = writeln!(s, "{:<w_label$}  {:<w_var$}  {:>8}  {:>8}  per-seed MAE", "model", "variant", "MAE", "RMSE");
    for r in rows {
        let per: Vec<String> = r.per_seed_mae.iter().map(|m| format!("{m:.3}")).collect();
        let _ = writeln!(
            s,
            "{:<w_label$}  {:<w_var$}  {:>8.3}  {:>8.3}  {}",
            r.label,
            r.variant,
            r.mean_mae,
            r.mean_rmse,
            per.join(" ")
        );
    }
    s
}

pub fn render_table_csv(rows: &[TableRow]) -> Result<String> {
    let n = rows.iter().map(|r| r.per_seed_mae.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["model".to_string(), "variant".into(), "mae".into(), "rmse".into()];
    header.extend((0..n).map(|i| format!("mae_seed{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.label.clone(), r.variant.clone(), format!("{}", r.mean_mae), format!("{}", r.mean_rmse)];
        rec.extend(r.per_seed_mae.iter().map(|m| format!("{m}")));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_is_valid_and_shifted() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let same = ExperimentConfig {
            target: c.source.clone(),
            ..c.clone()
        };
        assert!(same.validate().is_err());
        let negative = ExperimentConfig {
            lambdas: vec![0.1, -1.0],
            ..c.clone()
        };
        assert!(negative.validate().is_err());
    }

    #[test]
    fn variants_cover_the_matrix_once() {
        let v = ExperimentConfig::default().variants();
        let names: Vec<&str> = v.iter().map(|v| v.name.as_str()).collect();
        assert!(names.contains(&"none"));
        assert!(names.contains(&"tta_full/pg_ssl/mask0.80"));
        assert!(names.contains(&"tta_full/recon_only/mask0.80"));
        assert!(names.contains(&"tta_ppa/pg_ssl/mask0.80"));
        assert!(names.contains(&"tta_full/pg_ssl/mask0.00"));
        assert!(names.contains(&"tta_full/pg_ssl/mask0.50"));
        for l in ["0", "0.01", "0.1", "1"] {
            let name = format!("tta_full/pg_ssl/mask0.80/lambda{l}");
            let var = v.iter().find(|v| v.name == name).unwrap();
            assert_eq!(var.lambda, Some(l.parse().unwrap()));
        }
        assert!(v.iter().filter(|v| v.lambda.is_none()).all(|v| !v.name.contains("lambda")));
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }
}
