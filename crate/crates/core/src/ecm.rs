//! 1-RC Thevenin equivalent-circuit cell simulator.
//!
//! A cell is an open-circuit voltage source in series with an ohmic
//! resistance and one parallel `R_p C_p` polarization branch. Charge current
//! is positive throughout unless a [`CurrentConvention`] says otherwise.
//! Within a step the current is held constant and the RC branch is advanced
//! with its exact exponential solution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::tape::interp_with_slope;

const KELVIN: f64 = 273.15;

/// Sign convention of the current.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurrentConvention {
    #[default]
    ChargePositive,
    DischargePositive,
}

impl CurrentConvention {
    /// +1 when positive current charges the cell.
    pub fn charge_sign(self) -> f64 {
        match self {
            Self::ChargePositive => 1.0,
            Self::DischargePositive => -1.0,
        }
    }

    /// Converts a current in this convention to the discharge-positive
    /// convention the state equation is written in.
    pub fn to_discharge_positive(self, current: f64) -> f64 {
        -self.charge_sign() * current
    }
}

/// Monotone open-circuit-voltage curve as `(soc, voltage)` breakpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct OcvTable {
    soc: Vec<f64>,
    voltage: Vec<f64>,
}

impl TryFrom<Vec<(f64, f64)>> for OcvTable {
    type Error = Error;

    fn try_from(points: Vec<(f64, f64)>) -> Result<Self> {
        let (soc, voltage) = points.into_iter().unzip();
        Self::new(soc, voltage)
    }
}

impl From<OcvTable> for Vec<(f64, f64)> {
    fn from(t: OcvTable) -> Self {
        t.soc.into_iter().zip(t.voltage).collect()
    }
}

impl OcvTable {
    pub fn new(soc: Vec<f64>, voltage: Vec<f64>) -> Result<Self> {
        if soc.len() < 2 || soc.len() != voltage.len() {
            return Err(Error::Config("OCV table needs >= 2 (soc, voltage) points".into()));
        }
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
        if !increasing(&soc) || !increasing(&voltage) {
            return Err(Error::Config(
                "OCV table must be strictly increasing in soc and voltage".into(),
            ));
        }
        if soc[0] < 0.0 || soc[soc.len() - 1] > 1.0 {
            return Err(Error::Config("OCV table soc must lie in [0, 1]".into()));
        }
        Ok(Self { soc, voltage })
    }

    /// An 11-point curve from `v_empty` to `v_full`. `curvature` in `[0, 1]`
    /// blends a straight line with a logarithmic profile that rises steeply
    /// at low state of charge.
    pub fn parametric(v_empty: f64, v_full: f64, curvature: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&curvature) {
            return Err(Error::Config(format!("OCV curvature {curvature} outside [0, 1]")));
        }
        let soc: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let voltage = soc
            .iter()
            .map(|&s| {
                let log_part = (1.0 + 9.0 * s).ln() / 10f64.ln();
                v_empty + (v_full - v_empty) * ((1.0 - curvature) * s + curvature * log_part)
            })
            .collect();
        Self::new(soc, voltage)
    }

    pub fn soc_points(&self) -> &[f64] {
        &self.soc
    }

    pub fn voltage_points(&self) -> &[f64] {
        &self.voltage
    }

    /// Piecewise-linear lookup, clamped to the table ends.
    pub fn voltage_at(&self, soc: f64) -> f64 {
        interp_with_slope(&self.soc, &self.voltage, soc).0
    }

    /// Inverse lookup, clamped to the table's soc range.
    pub fn soc_at(&self, voltage: f64) -> f64 {
        interp_with_slope(&self.voltage, &self.soc, voltage).0
    }
}

fn default_capacity_full() -> f64 {
    f64::NAN
}

fn default_t_ref() -> f64 {
    25.0
}

/// Circuit parameters of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EcmParams {
    /// Series ohmic resistance R (Ω).
    pub r_ohmic: f64,
    /// Polarization resistance R_p (Ω).
    pub r_pol: f64,
    /// Polarization capacitance C_p (F).
    pub c_pol: f64,
    pub ocv_table: OcvTable,
    /// Nominal capacity (Ah).
    pub capacity_nom: f64,
    /// Current full capacity (Ah); equals `capacity_nom` for a fresh cell.
    #[serde(default = "default_capacity_full")]
    pub capacity_full: f64,
    /// Arrhenius-style coefficient k (K) for the resistance factor
    /// `exp(k (1/T_ref - 1/T))`; 0 disables temperature dependence.
    #[serde(default)]
    pub arrhenius_k: f64,
    #[serde(default = "default_t_ref")]
    pub t_ref_c: f64,
}

impl EcmParams {
    pub fn new(r_ohmic: f64, r_pol: f64, c_pol: f64, ocv_table: OcvTable, capacity_nom: f64) -> Result<Self> {
        let p = Self {
            r_ohmic,
            r_pol,
            c_pol,
            ocv_table,
            capacity_nom,
            capacity_full: capacity_nom,
            arrhenius_k: 0.0,
            t_ref_c: default_t_ref(),
        };
        p.validate()?;
        Ok(p)
    }

    /// Fills a missing `capacity_full` and checks the invariants.
    pub fn normalized(mut self) -> Result<Self> {
        if self.capacity_full.is_nan() {
            self.capacity_full = self.capacity_nom;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("r_ohmic", self.r_ohmic),
            ("r_pol", self.r_pol),
            ("c_pol", self.c_pol),
            ("capacity_nom", self.capacity_nom),
            ("capacity_full", self.capacity_full),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.r_pol * self.c_pol
    }

    /// Multiplicative resistance factor at `temperature_c`.
    pub fn temperature_factor(&self, temperature_c: f64) -> f64 {
        let t_ref = self.t_ref_c + KELVIN;
        let t = temperature_c + KELVIN;
        (self.arrhenius_k * (1.0 / t_ref - 1.0 / t)).exp()
    }

    /// Parameters with both resistances scaled to `temperature_c`.
    pub fn at_temperature(&self, temperature_c: f64) -> Self {
        let f = self.temperature_factor(temperature_c);
        Self {
            r_ohmic: self.r_ohmic * f,
            r_pol: self.r_pol * f,
            ..self.clone()
        }
    }
}

/// Ocv lookup with a domain check on the state of charge.
pub fn ocv_lookup(params: &EcmParams, soc: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&soc) {
        return Err(Error::Domain(format!("soc {soc} outside [0, 1]")));
    }
    Ok(params.ocv_table.voltage_at(soc))
}

/// Coefficients of the state equation `θ₁ I + θ₂ u + u̇ = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EcmCoefficients {
    /// (R + R_p) / (C_p R_p), V/(A·s).
    pub theta1: f64,
    /// 1 / (C_p R_p), 1/s.
    pub theta2: f64,
}

impl EcmCoefficients {
    /// R + R_p recovered from the coefficients.
    pub fn total_resistance(&self) -> f64 {
        self.theta1 / self.theta2
    }
}

pub fn derive_coefficients(params: &EcmParams, temperature_c: f64) -> EcmCoefficients {
    let p = params.at_temperature(temperature_c);
    let theta2 = 1.0 / (p.c_pol * p.r_pol);
    EcmCoefficients {
        theta1: (p.r_ohmic + p.r_pol) * theta2,
        theta2,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    pub soc: f64,
    /// Polarization voltage across the RC branch (V), positive while charging.
    pub u_pol: f64,
    pub capacity_full: f64,
}

impl CellState {
    pub fn fresh(params: &EcmParams, soc: f64) -> Self {
        Self {
            soc,
            u_pol: 0.0,
            capacity_full: params.capacity_full,
        }
    }
}

/// Advances the cell by `dt` seconds at constant charge-positive `current`.
pub fn step_cell(state: &CellState, params: &EcmParams, current: f64, dt: f64) -> CellState {
    let decay = (-dt / params.tau()).exp();
    let u_pol = state.u_pol * decay + current * params.r_pol * (1.0 - decay);
    let soc = (state.soc + current * dt / (3600.0 * state.capacity_full)).clamp(0.0, 1.0);
    CellState { soc, u_pol, ..*state }
}

/// Terminal voltage `u = OCV - u_R - u_p` written for `convention`; with
/// charge-positive current the drops add to the OCV.
pub fn terminal_voltage(state: &CellState, params: &EcmParams, current: f64, convention: CurrentConvention) -> f64 {
    let s = convention.charge_sign();
    params.ocv_table.voltage_at(state.soc) + s * (current * params.r_ohmic + state.u_pol)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChargeMode {
    #[serde(rename = "CC")]
    Cc,
    #[serde(rename = "CC-CV")]
    CcCv,
}

fn default_max_steps() -> usize {
    500_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChargeProtocol {
    pub mode: ChargeMode,
    /// Charge rate relative to the nominal capacity (1/h).
    pub current_rate: f64,
    pub v_upper: f64,
    pub v_lower: f64,
    /// CV phase terminates below this current (A).
    #[serde(default)]
    pub cv_cutoff_current: f64,
    pub dt: f64,
    pub temperature: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

impl ChargeProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_lower < self.v_upper) {
            return Err(Error::Config("protocol needs v_lower < v_upper".into()));
        }
        if !(self.current_rate > 0.0) || !(self.dt > 0.0) {
            return Err(Error::Config("protocol needs positive current_rate and dt".into()));
        }
        if self.mode == ChargeMode::CcCv && !(self.cv_cutoff_current > 0.0) {
            return Err(Error::Config("CC-CV protocol needs a positive cv_cutoff_current".into()));
        }
        Ok(())
    }

    pub fn cc_current(&self, params: &EcmParams) -> f64 {
        self.current_rate * params.capacity_nom
    }
}

/// One sampled charge cycle. Time and capacity are measured from the first
/// sample at or above the protocol's lower voltage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cell_id: usize,
    pub cycle: usize,
    pub t_s: Vec<f64>,
    pub voltage_v: Vec<f64>,
    pub current_a: Vec<f64>,
    pub temp_c: Vec<f64>,
    pub q_ah: Vec<f64>,
}

impl CycleRecord {
    pub fn len(&self) -> usize {
        self.t_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_s.is_empty()
    }

    /// Cycle capacity: the final cumulative charge.
    pub fn capacity(&self) -> f64 {
        self.q_ah.last().copied().unwrap_or(0.0)
    }
}

/// Voltage measurement noise.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeasurementNoise {
    pub sigma: f64,
    pub seed: u64,
}

/// A simulated cycle with the true state of charge at every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TracedCycle {
    pub record: CycleRecord,
    pub soc: Vec<f64>,
}

pub fn simulate_charge_cycle(
    params: &EcmParams,
    state0: &CellState,
    protocol: &ChargeProtocol,
    noise: MeasurementNoise,
) -> Result<CycleRecord> {
    Ok(simulate_charge_cycle_traced(params, state0, protocol, noise)?.record)
}

pub fn simulate_charge_cycle_traced(
    params: &EcmParams,
    state0: &CellState,
    protocol: &ChargeProtocol,
    noise: MeasurementNoise,
) -> Result<TracedCycle> {
    protocol.validate()?;
    params.validate()?;
    let params = params.at_temperature(protocol.temperature);
    let conv = CurrentConvention::ChargePositive;
    let i_cc = protocol.cc_current(&params);
    let dt = protocol.dt;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let normal = (noise.sigma > 0.0)
        .then(|| Normal::new(0.0, noise.sigma).map_err(|e| Error::Config(e.to_string())))
        .transpose()?;

    let mut out = TracedCycle {
        record: CycleRecord::default(),
        soc: Vec::new(),
    };
    let mut state = *state0;
    let mut recording = false;
    let mut t = 0.0;
    let mut q = 0.0;
    let mut in_cv = false;

    let cv_current = |state: &CellState| {
        let ocv = params.ocv_table.voltage_at(state.soc);
        ((protocol.v_upper - ocv - state.u_pol) / params.r_ohmic).clamp(0.0, i_cc)
    };

    for _ in 0..protocol.max_steps {
        let mut current = if in_cv { cv_current(&state) } else { i_cc };
        let mut u = terminal_voltage(&state, &params, current, conv);
        let cc_done = !in_cv && u >= protocol.v_upper;
        if cc_done && protocol.mode == ChargeMode::CcCv {
            in_cv = true;
            current = cv_current(&state);
            u = terminal_voltage(&state, &params, current, conv);
        }
        if !recording && u >= protocol.v_lower {
            recording = true;
        }
        if recording {
            let measured = match &normal {
                Some(n) => u + n.sample(&mut rng),
                None => u,
            };
            let r = &mut out.record;
            r.t_s.push(t);
            r.voltage_v.push(measured);
            r.current_a.push(current);
            r.temp_c.push(protocol.temperature);
            r.q_ah.push(q);
            out.soc.push(state.soc);
        }
        if cc_done && protocol.mode == ChargeMode::Cc {
            return Ok(out);
        }
        if in_cv && current < protocol.cv_cutoff_current {
            return Ok(out);
        }
        if state.soc >= 1.0 {
            return Err(Error::Simulation(format!(
                "cell full at u = {u:.4} V before reaching the termination condition"
            )));
        }
        state = step_cell(&state, &params, current, dt);
        if recording {
            t += dt;
            q += current * dt / 3600.0;
        }
    }
    Err(Error::Simulation(format!(
        "protocol did not terminate within {} steps",
        protocol.max_steps
    )))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DegradationSchedule {
    /// Relative capacity loss per cycle.
    pub capacity_fade_per_cycle: f64,
    /// Relative growth of both resistances per cycle.
    pub resistance_growth_per_cycle: f64,
    /// Standard deviation of voltage measurement noise (V).
    #[serde(default)]
    pub noise_sigma: f64,
}

impl DegradationSchedule {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.capacity_fade_per_cycle,
            self.resistance_growth_per_cycle,
            self.noise_sigma,
        ];
        if rates.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::Config("degradation rates must be >= 0".into()));
        }
        if self.capacity_fade_per_cycle >= 1.0 {
            return Err(Error::Config("capacity fade per cycle must be < 1".into()));
        }
        Ok(())
    }
}

/// Parameters after `cycle_index` cycles of parametric aging.
pub fn apply_degradation(params: &EcmParams, cycle_index: usize, schedule: &DegradationSchedule) -> Result<EcmParams> {
    schedule.validate()?;
    let k = cycle_index as i32;
    let capacity_full = params.capacity_full * (1.0 - schedule.capacity_fade_per_cycle).powi(k);
    if !(capacity_full > 0.0) {
        return Err(Error::Config(format!("degraded capacity {capacity_full} is not positive")));
    }
    let growth = (1.0 + schedule.resistance_growth_per_cycle).powi(k);
    Ok(EcmParams {
        capacity_full,
        r_ohmic: params.r_ohmic * growth,
        r_pol: params.r_pol * growth,
        ..params.clone()
    })
}

/// Relative per-cell spread: each field is scaled by a factor drawn
/// uniformly from `[1 - s, 1 + s]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamJitter {
    #[serde(default)]
    pub r_ohmic: f64,
    #[serde(default)]
    pub r_pol: f64,
    #[serde(default)]
    pub c_pol: f64,
    #[serde(default)]
    pub fade: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    pub n_cells: usize,
    pub n_cycles: usize,
    /// Sample every `cycle_stride`-th cycle.
    #[serde(default = "one")]
    pub cycle_stride: usize,
    pub base_params: EcmParams,
    #[serde(default)]
    pub param_jitter: ParamJitter,
    pub protocol: ChargeProtocol,
    pub schedule: DegradationSchedule,
    pub seed: u64,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub cell_id: usize,
    pub cycle: usize,
    pub soh_pct: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Fleet {
    pub cycles: Vec<CycleRecord>,
    pub labels: Vec<LabelRecord>,
}

/// Per-cell parameters and schedule after jitter. Cell 0 always uses the
/// base values; capacity is never jittered, so every cell starts at 100%.
pub fn cell_parameters(config: &FleetConfig, cell: usize) -> Result<(EcmParams, DegradationSchedule)> {
    let base = config.base_params.clone().normalized()?;
    if cell == 0 {
        return Ok((base, config.schedule.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, cell as u64, u64::MAX));
    let j = &config.param_jitter;
    let mut factor = |s: f64| -> Result<f64> {
        if s == 0.0 {
            return Ok(1.0);
        }
        if !(0.0..1.0).contains(&s) {
            return Err(Error::Config(format!("jitter {s} outside [0, 1)")));
        }
        let u = Uniform::new_inclusive(1.0 - s, 1.0 + s).map_err(|e| Error::Config(e.to_string()))?;
        Ok(u.sample(&mut rng))
    };
    let params = EcmParams {
        r_ohmic: base.r_ohmic * factor(j.r_ohmic)?,
        r_pol: base.r_pol * factor(j.r_pol)?,
        c_pol: base.c_pol * factor(j.c_pol)?,
        ..base
    };
    let schedule = DegradationSchedule {
        capacity_fade_per_cycle: config.schedule.capacity_fade_per_cycle * factor(j.fade)?,
        ..config.schedule.clone()
    };
    Ok((params, schedule))
}

pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the three inputs
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl FleetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cells == 0 || self.n_cycles == 0 || self.cycle_stride == 0 {
            return Err(Error::Config("fleet needs n_cells, n_cycles and cycle_stride >= 1".into()));
        }
        self.base_params.clone().normalized()?;
        self.protocol.validate()?;
        self.schedule.validate()?;
        Ok(())
    }

    pub fn cycle_indices(&self) -> impl Iterator<Item = usize> {
        (0..self.n_cycles).step_by(self.cycle_stride)
    }
}

/// Simulates every sampled cycle of every cell. Cells run in parallel; the
/// output order is (cell, cycle) and independent of the thread count.
pub fn generate_fleet(config: &FleetConfig) -> Result<Fleet> {
    config.validate()?;
    let per_cell: Vec<Result<Vec<(CycleRecord, LabelRecord)>>> = (0..config.n_cells)
        .into_par_iter()
        .map(|cell| {
            let (params, schedule) = cell_parameters(config, cell)?;
            config
                .cycle_indices()
                .map(|cycle| {
                    let aged = apply_degradation(&params, cycle, &schedule)?;
                    let noise = MeasurementNoise {
                        sigma: schedule.noise_sigma,
                        seed: mix_seed(config.seed, cell as u64, cycle as u64),
                    };
                    let state0 = CellState::fresh(&aged, 0.0);
                    let mut record = simulate_charge_cycle(&aged, &state0, &config.protocol, noise)?;
                    record.cell_id = cell;
                    record.cycle = cycle;
                    let label = LabelRecord {
                        cell_id: cell,
                        cycle,
                        soh_pct: 100.0 * aged.capacity_full / aged.capacity_nom,
                    };
                    Ok((record, label))
                })
                .collect()
        })
        .collect();
    let mut fleet = Fleet::default();
    for cell in per_cell {
        for (record, label) in cell? {
            fleet.cycles.push(record);
            fleet.labels.push(label);
        }
    }
    Ok(fleet)
}
