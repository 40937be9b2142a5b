//! Physics-guided self-supervised loss: prefix reconstruction plus the 1-RC
//! ODE residual of the generated voltage-time curve.
//!
//! With the discharge-positive current `I_d` and overpotential
//! `η = u − OCV(soc)`, a 1-RC cell at constant current obeys
//! `η̇ + θ₂·η + θ₁·I_d = 0`. The `OcvCorrected` residual evaluates exactly
//! this; `PaperLiteral` uses the terminal voltage in place of `η`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::ecm::{CurrentConvention, EcmCoefficients, EcmParams, OcvTable};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    PaperLiteral,
    #[default]
    OcvCorrected,
}

/// Which generated points the residual is evaluated on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualScope {
    #[default]
    Full,
    Overlap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub residual_mode: ResidualMode,
    pub scope: ResidualScope,
    /// Divide the residual by `θ₁·|I|` so that it is dimensionless.
    pub normalize: bool,
    pub convention: CurrentConvention,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            residual_mode: ResidualMode::OcvCorrected,
            scope: ResidualScope::Full,
            normalize: true,
            convention: CurrentConvention::ChargePositive,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn with_lambda(self, lambda: f64) -> Self {
        Self { lambda, ..self }
    }
}

/// What a battery management system knows about the cells of a domain: the
/// OCV curve and the circuit coefficients at the operating temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsContext {
    pub ocv_table: OcvTable,
    pub coeffs: EcmCoefficients,
    #[serde(default)]
    pub convention: CurrentConvention,
}

impl PhysicsContext {
    pub fn from_params(params: &EcmParams, temperature_c: f64) -> Self {
        Self {
            ocv_table: params.ocv_table.clone(),
            coeffs: crate::ecm::derive_coefficients(params, temperature_c),
            convention: CurrentConvention::ChargePositive,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualInputs {
    pub v_grid: Vec<f64>,
    pub t_grid: Vec<f64>,
    pub current: f64,
    pub coeffs: EcmCoefficients,
    pub ocv_at_soc: Option<Vec<f64>>,
    pub convention: CurrentConvention,
}

/// Mean squared error of `xhat[0:n_obs]` against `target[0:n_obs]`.
pub fn recon_loss_var<'t>(xhat: &Var<'t>, target: &[f64], n_obs: usize) -> Result<Var<'t>> {
    if n_obs == 0 {
        return Err(Error::Contract("reconstruction needs at least one observed point".into()));
    }
    if target.len() < n_obs || xhat.len() < n_obs {
        return Err(Error::Shape {
            op: "recon_loss",
            detail: format!("{n_obs} observed points, {} targets, {} outputs", target.len(), xhat.len()),
        });
    }
    xhat.slice(0, n_obs)?.sq_err_mean(&target[..n_obs], &vec![1.0; n_obs])
}

/// Residual at interior points `1..n-1` of a voltage-time curve.
pub fn ode_residual_var<'t>(
    v: &Var<'t>,
    t: &Var<'t>,
    ocv: Option<&Var<'t>>,
    current: f64,
    coeffs: &EcmCoefficients,
    mode: ResidualMode,
    convention: CurrentConvention,
) -> Result<Var<'t>> {
    let n = v.len();
    if n < 3 || t.len() != n {
        return Err(Error::Shape {
            op: "ode_residual",
            detail: format!("{n} voltages, {} times (need >= 3 equal)", t.len()),
        });
    }
    let t_vals = t.value();
    if t_vals.data().iter().chain(v.value().data()).any(|x| !x.is_finite()) {
        return Err(Error::Divergence("generated curve is not finite".into()));
    }
    if t_vals.data().windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Contract("residual time grid must be strictly increasing".into()));
    }
    let eta = match (mode, ocv) {
        (ResidualMode::PaperLiteral, _) => *v,
        (ResidualMode::OcvCorrected, Some(o)) => v.sub(o)?,
        (ResidualMode::OcvCorrected, None) => {
            return Err(Error::Contract("ocv_corrected residual needs OCV values".into()))
        }
    };
    let d_eta = eta.slice(2, n - 2)?.sub(&eta.slice(0, n - 2)?)?;
    let d_t = t.slice(2, n - 2)?.sub(&t.slice(0, n - 2)?)?;
    let i_d = convention.to_discharge_positive(current);
    Ok(d_eta
        .div(&d_t)?
        .add(&eta.slice(1, n - 2)?.scale(coeffs.theta2))?
        .offset(coeffs.theta1 * i_d))
}

/// Plain-value residual for recorded or hand-built curves.
pub fn ode_residual(inputs: &ResidualInputs, mode: ResidualMode) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let v = tape.constant(Tensor::vector(inputs.v_grid.clone()));
    let t = tape.constant(Tensor::vector(inputs.t_grid.clone()));
    let ocv = inputs
        .ocv_at_soc
        .as_ref()
        .map(|o| tape.constant(Tensor::vector(o.clone())));
    if let Some(o) = &ocv {
        if o.len() != v.len() {
            return Err(Error::Shape {
                op: "ode_residual",
                detail: format!("{} voltages, {} OCV values", v.len(), o.len()),
            });
        }
    }
    let r = ode_residual_var(&v, &t, ocv.as_ref(), inputs.current, &inputs.coeffs, mode, inputs.convention)?;
    Ok(r.value().data().to_vec())
}

/// A generated curve on the tape: capacities, and when the current is
/// nonzero, the matching time grid and OCV values.
#[derive(Clone, Copy, Debug)]
pub struct CurveVars<'t> {
    pub xhat: Var<'t>,
    pub voltage: Var<'t>,
    pub time: Option<Var<'t>>,
    pub ocv: Option<Var<'t>>,
}

#[derive(Clone, Copy, Debug)]
pub struct PgSslTerms<'t> {
    pub total: Var<'t>,
    pub recon: Var<'t>,
    /// Mean squared (possibly normalized) residual; absent when `λ = 0` or
    /// the time grid is undefined.
    pub residual: Option<Var<'t>>,
}

/// `recon + λ·mean(r²)`.
pub fn pg_ssl_loss_var<'t>(
    curve: &CurveVars<'t>,
    target: &[f64],
    n_obs: usize,
    current: f64,
    coeffs: &EcmCoefficients,
    cfg: &LossConfig,
) -> Result<PgSslTerms<'t>> {
    let recon = recon_loss_var(&curve.xhat, target, n_obs)?;
    if cfg.lambda == 0.0 {
        return Ok(PgSslTerms {
            total: recon,
            recon,
            residual: None,
        });
    }
    let Some(time) = curve.time else {
        warn!("zero charge current: time grid undefined, physics residual skipped");
        return Ok(PgSslTerms {
            total: recon,
            recon,
            residual: None,
        });
    };
    let mut r = ode_residual_var(
        &curve.voltage,
        &time,
        curve.ocv.as_ref(),
        current,
        coeffs,
        cfg.residual_mode,
        cfg.convention,
    )?;
    if cfg.scope == ResidualScope::Overlap {
        let keep = n_obs.saturating_sub(2).min(r.len());
        if keep == 0 {
            return Ok(PgSslTerms {
                total: recon,
                recon,
                residual: None,
            });
        }
        r = r.slice(0, keep)?;
    }
    if cfg.normalize {
        let scale = coeffs.theta1 * current.abs();
        if scale > 0.0 {
            r = r.scale(1.0 / scale);
        }
    }
    let residual = r.square().mean();
    Ok(PgSslTerms {
        total: recon.add(&residual.scale(cfg.lambda))?,
        recon,
        residual: Some(residual),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coeffs() -> EcmCoefficients {
        EcmCoefficients {
            theta1: 0.08 / 30.0,
            theta2: 1.0 / 30.0,
        }
    }

    #[test]
    fn recon_examples() {
        let tape = Tape::new();
        let x = vec![0.1, 0.2, 0.3, 0.4];
        let same = tape.constant(Tensor::vector(vec![0.1, 0.2, 9.0, 9.0]));
        assert_eq!(recon_loss_var(&same, &x, 2).unwrap().item(), 0.0);
        let shifted = tape.constant(Tensor::vector(x.iter().map(|v| v + 1.0).collect()));
        assert!((recon_loss_var(&shifted, &x, 4).unwrap().item() - 1.0).abs() < 1e-12);
        assert!(recon_loss_var(&shifted, &x, 0).is_err());
    }

    #[test]
    fn equilibrium_has_zero_residual() {
        let inputs = ResidualInputs {
            v_grid: vec![3.5, 3.6, 3.7, 3.8],
            t_grid: vec![0.0, 1.0, 2.5, 3.0],
            current: 0.0,
            coeffs: coeffs(),
            ocv_at_soc: Some(vec![3.5, 3.6, 3.7, 3.8]),
            convention: CurrentConvention::ChargePositive,
        };
        let r = ode_residual(&inputs, ResidualMode::OcvCorrected).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn nonincreasing_time_rejected() {
        let inputs = ResidualInputs {
            v_grid: vec![3.5, 3.6, 3.7],
            t_grid: vec![0.0, 1.0, 1.0],
            current: 1.0,
            coeffs: coeffs(),
            ocv_at_soc: None,
            convention: CurrentConvention::ChargePositive,
        };
        assert!(matches!(
            ode_residual(&inputs, ResidualMode::PaperLiteral),
            Err(Error::Contract(_))
        ));
        assert!(ode_residual(
            &ResidualInputs {
                t_grid: vec![0.0, 1.0, 2.0],
                ..inputs
            },
            ResidualMode::OcvCorrected
        )
        .is_err());
    }

    #[test]
    fn paper_literal_sign_ledger() {
        // Flat 3.6 V at 1 A charge: r = θ₁·(−1) + θ₂·3.6.
        let c = coeffs();
        let inputs = ResidualInputs {
            v_grid: vec![3.6; 3],
            t_grid: vec![0.0, 1.0, 2.0],
            current: 1.0,
            coeffs: c,
            ocv_at_soc: None,
            convention: CurrentConvention::ChargePositive,
        };
        let r = ode_residual(&inputs, ResidualMode::PaperLiteral).unwrap();
        assert!((r[0] - (-c.theta1 + c.theta2 * 3.6)).abs() < 1e-15);
        let d = ResidualInputs {
            convention: CurrentConvention::DischargePositive,
            ..inputs
        };
        let r = ode_residual(&d, ResidualMode::PaperLiteral).unwrap();
        assert!((r[0] - (c.theta1 + c.theta2 * 3.6)).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_and_zero_residual_equal_recon() {
        let tape = Tape::new();
        // Steady charge: η = (R + R_p)·I everywhere, so r ≡ 0.
        let v: Vec<f64> = (0..6).map(|i| 3.5 + 0.1 * i as f64).collect();
        let ocv: Vec<f64> = v.iter().map(|x| x - 0.08).collect();
        let xhat = tape.constant(Tensor::vector(vec![0.0, 0.1, 0.2, 0.3, 0.5, 0.6]));
        let curve = CurveVars {
            xhat,
            voltage: tape.constant(Tensor::vector(v)),
            time: Some(tape.constant(Tensor::vector((0..6).map(|i| i as f64 * 7.0).collect()))),
            ocv: Some(tape.constant(Tensor::vector(ocv))),
        };
        let target = [0.05, 0.1, 0.25, 0.3, 0.5, 0.6];
        let recon = recon_loss_var(&xhat, &target, 4).unwrap().item();
        for lambda in [0.0, 1.0] {
            let cfg = LossConfig::default().with_lambda(lambda);
            let terms = pg_ssl_loss_var(&curve, &target, 4, 1.0, &coeffs(), &cfg).unwrap();
            assert!((terms.total.item() - recon).abs() < 1e-15, "lambda {lambda}");
        }
    }
}
