use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use batteryttt::ecm::{generate_fleet, FleetConfig};
use batteryttt::experiment::{
    featurize_fleet, fleet_physics, prepare_domain, render_table_csv, render_table_text, run_ablation, AblationReport,
    ExperimentConfig,
};
use batteryttt::features::VoltageGrid;
use batteryttt::io::{
    labels_path, read_cycles_csv, read_features, read_labels_csv, write_cycles_csv, write_features, write_labels_csv,
    FeatureDataset, FeatureSidecar,
};
use batteryttt::model::ModelState;
use batteryttt::train::{
    composite_grad_check, linear_probe, mae, pretrain, rmse, run_adaptation, AdaptationReport, DomainContext,
    ResetPolicy, SslKind, TtaMode,
};

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "batteryttt", version, about = "Physics-guided test-time adaptation for battery SOH estimation")]
struct Cli {
    /// Worker threads for per-sample and per-cell parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a fleet of CC charge cycles and their SOH labels.
    Simulate(SimulateArgs),
    /// Extract QdLinear features from a cycle CSV.
    Featurize(FeaturizeArgs),
    /// Self-supervised pretraining on source features.
    Pretrain(PretrainArgs),
    /// Fit the SOH head on frozen latents.
    Probe(ProbeArgs),
    /// Test-time adaptation and prediction over a target stream.
    Adapt(AdaptArgs),
    /// Full ablation matrix over the configured seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of the full model and loss.
    Gradcheck(GradcheckArgs),
    /// Render an adaptation or ablation report as text and CSV.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    None,
    TtaFull,
    TtaPpa,
}

#[derive(Clone, Copy, ValueEnum)]
enum SslArg {
    PgSsl,
    ReconOnly,
}

#[derive(Args)]
struct SimulateArgs {
    /// Fleet config JSON; defaults to the preset chosen by `--domain`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "source")]
    domain: Domain,
    #[arg(long)]
    seed: Option<u64>,
    /// Cycle CSV; labels go next to it as `<stem>.labels.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FeaturizeArgs {
    #[arg(long)]
    input: PathBuf,
    /// Fleet config JSON the cycles were simulated from.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "source")]
    domain: Domain,
    /// Observed prefix fraction of each curve.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// Source feature CSV.
    #[arg(long)]
    input: PathBuf,
    /// Experiment config JSON; defaults to the shipped preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path; the training log goes to `<stem>.report.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    /// Labeled source feature CSV.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AdaptArgs {
    /// Target feature CSV.
    #[arg(long)]
    input: PathBuf,
    /// Probed checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    ssl: Option<SslArg>,
    /// TTA-time mask ratio.
    #[arg(long)]
    mask: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Carry adapted state across samples of a cell instead of resetting.
    #[arg(long)]
    online: bool,
    /// Report JSON; wall-clock timings go to `<stem>.timing.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory for `ablation.json`, `table.txt` and `table.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Checkpoint to check; a freshly initialized model otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    mask: Option<f64>,
    #[arg(long, default_value_t = 256)]
    coords: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Adaptation or ablation report JSON.
    #[arg(long)]
    input: PathBuf,
    /// Text output; the CSV goes next to it. Prints to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BATTERYTTT_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        ensure!(jobs >= 1, "--jobs must be at least 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("cannot size the worker pool")?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Featurize(a) => featurize(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Probe(a) => probe(a),
        Command::Adapt(a) => adapt(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Report(a) => report(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} does not match the expected schema", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn experiment(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate().context("invalid experiment config")?;
    Ok(cfg)
}

fn fleet(path: Option<&Path>, domain: Domain) -> Result<FleetConfig> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => {
            let preset = ExperimentConfig::default();
            match domain {
                Domain::Source => preset.source,
                Domain::Target => preset.target,
            }
        }
    };
    cfg.validate().context("invalid fleet config")?;
    Ok(cfg)
}

fn load_features(path: &Path) -> Result<(FeatureDataset, DomainContext)> {
    let ds = read_features(path).with_context(|| format!("cannot load features {}", path.display()))?;
    ensure!(!ds.features.is_empty(), "{} holds no features", path.display());
    let ctx = DomainContext::from_sidecar(&ds.sidecar)?;
    Ok((ds, ctx))
}

fn load_model(path: &Path) -> Result<ModelState> {
    ModelState::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = fleet(a.config.as_deref(), a.domain)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let fleet = generate_fleet(&cfg)?;
    write_cycles_csv(&a.out, &fleet.cycles).with_context(|| format!("cannot write {}", a.out.display()))?;
    write_labels_csv(&labels_path(&a.out), &fleet.labels)?;
    info!("simulated {} cycles", fleet.cycles.len());
    Ok(())
}

fn featurize(a: FeaturizeArgs) -> Result<()> {
    let cfg = fleet(a.config.as_deref(), a.domain)?;
    let grid: VoltageGrid = ExperimentConfig::default().grid;
    let fraction = a.fraction.unwrap_or(ExperimentConfig::default().target_observed_fraction);
    let cycles = read_cycles_csv(&a.input).with_context(|| format!("cannot load cycles {}", a.input.display()))?;
    let lp = labels_path(&a.input);
    let labels = if lp.exists() { read_labels_csv(&lp)? } else { Vec::new() };
    let fleet = batteryttt::ecm::Fleet { cycles, labels };
    let features = featurize_fleet(&fleet, &grid, fraction)?;
    let dataset = FeatureDataset {
        sidecar: FeatureSidecar {
            v_lower: grid.v_lower,
            v_upper: grid.v_upper,
            n_points: grid.n_points,
            c_nom: cfg.base_params.capacity_nom,
            physics: Some(fleet_physics(&cfg)?),
        },
        features,
        labels: fleet.labels,
    };
    write_features(&a.out, &dataset).with_context(|| format!("cannot write {}", a.out.display()))?;
    Ok(())
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    let cfg = experiment(a.config.as_deref())?.for_seed(a.seed);
    let (ds, ctx) = load_features(&a.input)?;
    let mut model = ModelState::new(cfg.model.clone())?;
    let rep = pretrain(&mut model, &ds.features, &ctx, &cfg.loss, &cfg.optim)?;
    info!("pretrained {} epochs, final loss {:?}", rep.epochs, rep.epoch_losses.last());
    model.save(&a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    write_text(&a.out.with_extension("report.json"), &serde_json::to_string_pretty(&rep)?)
}

fn probe(a: ProbeArgs) -> Result<()> {
    let cfg = experiment(a.config.as_deref())?;
    let (ds, ctx) = load_features(&a.input)?;
    let lookup = ds.label_lookup();
    let labels = ds
        .features
        .iter()
        .map(|f| {
            lookup
                .get(&(f.cell_id, f.cycle))
                .copied()
                .with_context(|| format!("no label for cell {} cycle {}", f.cell_id, f.cycle))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut model = load_model(&a.model)?;
    let rep = linear_probe(&mut model, &ds.features, &labels, &ctx, cfg.optim.ridge)?;
    info!("probe train MAE {:.3}", rep.train_mae);
    model.save(&a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    write_text(&a.out.with_extension("report.json"), &serde_json::to_string_pretty(&rep)?)
}

fn adapt(a: AdaptArgs) -> Result<()> {
    let cfg = experiment(a.config.as_deref())?;
    let (ds, ctx) = load_features(&a.input)?;
    let model = load_model(&a.model)?;
    let mut tta = cfg.base_tta;
    if let Some(m) = a.mode {
        tta.mode = match m {
            ModeArg::None => TtaMode::None,
            ModeArg::TtaFull => TtaMode::TtaFull,
            ModeArg::TtaPpa => TtaMode::TtaPpa,
        };
    }
    if let Some(s) = a.ssl {
        tta.ssl = match s {
            SslArg::PgSsl => SslKind::PgSsl,
            SslArg::ReconOnly => SslKind::ReconOnly,
        };
    }
    if let Some(m) = a.mask {
        tta.mask_ratio = m;
    }
    if let Some(s) = a.seed {
        tta.seed = s;
    }
    if a.online {
        tta.reset_policy = ResetPolicy::Online;
    }
    tta.validate()?;
    let mut optim = cfg.optim.tta;
    if let Some(s) = a.steps {
        ensure!(s >= 1, "--steps must be at least 1");
        optim.steps = s;
    }
    let rep = run_adaptation(&model, &ds.features, &ctx, &tta, &optim, &cfg.loss, &ds.label_lookup())?;
    if let Some(m) = rep.mae {
        ensure!(m.is_finite(), "adaptation diverged: MAE is not finite");
        info!("MAE {m:.3} over {} labeled samples", rep.n_labeled);
    }
    write_text(&a.out, &rep.to_json()?)?;
    if let Some(t) = &rep.timing {
        write_text(&a.out.with_extension("timing.json"), &serde_json::to_string_pretty(t)?)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = experiment(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = a.steps {
        ensure!(s >= 1, "--steps must be at least 1");
        cfg.optim.tta.steps = s;
    }
    let rep = run_ablation(&cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    write_text(&a.out.join("ablation.json"), &serde_json::to_string_pretty(&rep)?)?;
    let rows = rep.table();
    let text = render_table_text(&rows);
    write_text(&a.out.join("table.txt"), &text)?;
    write_text(&a.out.join("table.csv"), &render_table_csv(&rows)?)?;
    print!("{text}");
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = experiment(a.config.as_deref())?.for_seed(a.seed);
    let model = match &a.model {
        Some(p) => load_model(p)?,
        None => ModelState::new(cfg.model.clone())?,
    };
    let target = prepare_domain(&cfg.target, &cfg.grid, cfg.target_observed_fraction)?;
    let feature = target.features.last().context("target preset produced no features")?;
    let mask = a.mask.unwrap_or(cfg.base_tta.mask_ratio);
    let rep = composite_grad_check(&model, feature, &target.context, &cfg.loss, mask, 1e-5, a.coords, a.seed)?;
    if let Some(out) = &a.out {
        write_text(out, &serde_json::to_string_pretty(&rep)?)?;
    }
    println!("max relative error {:.3e} over {} coordinates", rep.max_rel_error, rep.coordinates);
    if !(rep.max_rel_error < GRADCHECK_TOL) {
        bail!("gradient check failed: {:.3e} >= {GRADCHECK_TOL:e}", rep.max_rel_error);
    }
    Ok(())
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn render_adaptation(rep: &AdaptationReport) -> Result<(String, String)> {
    let labeled: Vec<(f64, f64)> = rep.samples.iter().filter_map(|s| s.true_soh.map(|y| (s.pred_soh, y))).collect();
    ensure!(labeled.len() == rep.n_labeled, "report lists {} labeled samples, records hold {}", rep.n_labeled, labeled.len());
    let (p, t): (Vec<f64>, Vec<f64>) = labeled.into_iter().unzip();
    let (m, r) = if p.is_empty() { (None, None) } else { (Some(mae(&p, &t)), Some(rmse(&p, &t))) };
    for (name, stored, computed) in [("MAE", rep.mae, m), ("RMSE", rep.rmse, r)] {
        match (stored, computed) {
            (Some(s), Some(c)) if same(s, c) => {}
            (None, None) => {}
            _ => bail!("report {name} {stored:?} disagrees with its records ({computed:?})"),
        }
    }
    let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    let mut text = format!(
        "mode {:?}  ssl {:?}  mask {:.2}  reset {:?}\nsamples {}  labeled {}  MAE {}  RMSE {}  trainable {}\n\n",
        rep.config.mode,
        rep.config.ssl,
        rep.config.mask_ratio,
        rep.config.reset_policy,
        rep.samples.len(),
        rep.n_labeled,
        fmt_opt(rep.mae),
        fmt_opt(rep.rmse),
        rep.trainable_params
    );
    text += &format!("{:>5} {:>6} {:>9} {:>9} {:>12} {:>12}\n", "cell", "cycle", "true", "pred", "loss_first", "loss_last");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["cell_id", "cycle", "true_soh", "pred_soh", "loss_first", "loss_last"])?;
    for s in &rep.samples {
        let first = s.ssl_losses.first().copied().unwrap_or(f64::NAN);
        let last = s.ssl_losses.last().copied().unwrap_or(f64::NAN);
        text += &format!(
            "{:>5} {:>6} {:>9} {:>9.3} {:>12.4e} {:>12.4e}\n",
            s.cell_id,
            s.cycle,
            fmt_opt(s.true_soh),
            s.pred_soh,
            first,
            last
        );
        w.write_record([
            s.cell_id.to_string(),
            s.cycle.to_string(),
            s.true_soh.map_or(String::new(), |y| y.to_string()),
            s.pred_soh.to_string(),
            first.to_string(),
            last.to_string(),
        ])?;
    }
    let csv = String::from_utf8(w.into_inner().context("csv buffer")?)?;
    Ok((text, csv))
}

fn render_ablation(rep: &AblationReport) -> Result<(String, String)> {
    let rows = rep.table();
    ensure!(!rows.is_empty(), "ablation report holds no complete variant");
    Ok((render_table_text(&rows), render_table_csv(&rows)?))
}

fn report(a: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("cannot read {}", a.input.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("{} is not JSON", a.input.display()))?;
    let (table, csv) = if value.get("seeds").is_some() {
        let rep: AblationReport = serde_json::from_value(value)
            .with_context(|| format!("{} does not match the ablation report schema", a.input.display()))?;
        render_ablation(&rep)?
    } else {
        let rep: AdaptationReport = serde_json::from_value(value)
            .with_context(|| format!("{} does not match the adaptation report schema", a.input.display()))?;
        render_adaptation(&rep)?
    };
    match &a.out {
        Some(out) => {
            write_text(out, &table)?;
            write_text(&out.with_extension("csv"), &csv)?;
        }
        None => print!("{table}"),
    }
    Ok(())
}
