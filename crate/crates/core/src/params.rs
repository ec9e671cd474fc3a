//! Model and numerics parameter sets.
//!
//! `ModelParams` collects the kinetic rate constants, transport coefficients
//! and flow-law constants; `NumericsParams` the discretization knobs. Both
//! deserialize directly from the `[model]` / `[numerics]` config sections and
//! reject unknown keys so typos fail loudly.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Drug-response curve `G(W)` applied to both phases (scaled by `i_1`, `i_2`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrugResponse {
    /// `G(W) = W`.
    Linear,
    /// `G(W) = W / (k_half + W)`, saturating at 1.
    Saturating,
}

/// Physical constants of the multiphase model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// Birth rate of proliferating cells (nutrient-proportional).
    pub k_b: f64,
    /// Rate of P -> Q transfer driven by nutrient deficit `c_bar - C`.
    pub k_q: f64,
    /// Apoptosis rate P -> D driven by nutrient deficit.
    pub k_a: f64,
    /// Reawakening rate Q -> P driven by nutrient level `C`.
    pub k_p: f64,
    /// Death rate Q -> D driven by nutrient deficit.
    pub k_d: f64,
    /// Clearance rate of dead cells.
    pub k_r: f64,
    /// Nutrient consumption coupling for the P phase.
    pub k_1: f64,
    /// Nutrient consumption coupling for the Q phase.
    pub k_2: f64,
    /// Nutrient diffusivity.
    pub nu_1: f64,
    /// Drug diffusivity.
    pub nu_2: f64,
    /// Drug depletion coupling for the P phase.
    pub mu_1: f64,
    /// Drug depletion coupling for the Q phase.
    pub mu_2: f64,
    /// Drug kill intensity on P.
    pub i_1: f64,
    /// Drug kill intensity on Q.
    pub i_2: f64,
    /// Far-field nutrient level; also the nutrient maximum.
    pub c_bar: f64,
    /// Constant mixture density `P + Q + D` inside the tumor.
    pub rho_f: f64,
    /// Friction coefficient in the Darcy law.
    pub mu_tilde: f64,
    /// Permeability in the Darcy law.
    pub permeability: f64,
    /// Brinkman viscosity; 0 selects the pure Darcy model.
    pub mu: f64,
    pub drug_response: DrugResponse,
    /// Half-saturation level for the saturating response.
    pub k_half: f64,
}

impl Default for ModelParams {
    fn default() -> ModelParams {
        ModelParams {
            k_b: 1.0,
            k_q: 0.5,
            k_a: 0.2,
            k_p: 0.8,
            k_d: 0.4,
            k_r: 0.3,
            k_1: 1.0,
            k_2: 1.0,
            nu_1: 0.05,
            nu_2: 0.05,
            mu_1: 1.0,
            mu_2: 1.0,
            i_1: 1.0,
            i_2: 1.0,
            c_bar: 1.0,
            rho_f: 1.0,
            mu_tilde: 1.0,
            permeability: 0.1,
            mu: 0.0,
            drug_response: DrugResponse::Linear,
            k_half: 0.5,
        }
    }
}

impl ModelParams {
    /// Evaluates the drug response `G(W)`.
    #[inline]
    pub fn drug_g(&self, w: f64) -> f64 {
        match self.drug_response {
            DrugResponse::Linear => w,
            DrugResponse::Saturating => w / (self.k_half + w),
        }
    }

    /// Supremum of `G` over `[0, w_bar]`; `G` is nondecreasing for both kinds.
    #[inline]
    pub fn drug_g_sup(&self, w_bar: f64) -> f64 {
        self.drug_g(w_bar.max(0.0))
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("k_b", self.k_b),
            ("k_q", self.k_q),
            ("k_a", self.k_a),
            ("k_p", self.k_p),
            ("k_d", self.k_d),
            ("k_r", self.k_r),
            ("k_1", self.k_1),
            ("k_2", self.k_2),
            ("nu_1", self.nu_1),
            ("nu_2", self.nu_2),
            ("mu_1", self.mu_1),
            ("mu_2", self.mu_2),
            ("i_1", self.i_1),
            ("i_2", self.i_2),
            ("mu", self.mu),
        ];
        for (name, v) in rates {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Params(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        let positive = [
            ("c_bar", self.c_bar),
            ("rho_f", self.rho_f),
            ("mu_tilde", self.mu_tilde),
            ("permeability", self.permeability),
            ("k_half", self.k_half),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Params(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Discretization parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsParams {
    /// Advective CFL number in `dt <= cfl * h / max speed`.
    pub cfl: f64,
    /// Volume-penalization strength (the `1/epsilon` prefactor outside the tumor).
    pub epsilon: f64,
    /// Mask smoothing half-width as a multiple of `h` (`delta = delta_over_h * h`).
    pub delta_over_h: f64,
    /// Relative floor applied to masked coefficients so operators stay definite.
    pub eta: f64,
    /// Relative tolerance for the iterative linear solvers.
    pub tol: f64,
    /// Iteration cap for the linear solvers.
    pub max_iter: usize,
    /// Reinitialize the level set every this many steps.
    pub reinit_every: usize,
    /// Restore `D = rho_f - P - Q` after each transport step (off by default;
    /// the uncorrected drift is a convergence diagnostic).
    pub renormalize_d: bool,
    /// Optional hard cap on the time step.
    pub max_dt: Option<f64>,
}

impl Default for NumericsParams {
    fn default() -> NumericsParams {
        NumericsParams {
            cfl: 0.4,
            epsilon: 1e-3,
            delta_over_h: 1.5,
            eta: 1e-3,
            tol: 1e-8,
            max_iter: 50_000,
            reinit_every: 20,
            renormalize_d: false,
            max_dt: None,
        }
    }
}

impl NumericsParams {
    /// Mask half-width `delta` for spacing `h`.
    #[inline]
    pub fn delta(&self, h: f64) -> f64 {
        self.delta_over_h * h
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::Params(format!("cfl must lie in (0, 1], got {}", self.cfl)));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Params(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.delta_over_h >= 1.0) || !self.delta_over_h.is_finite() {
            return Err(Error::Params(format!(
                "delta_over_h must be >= 1 so masks resolve, got {}",
                self.delta_over_h
            )));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Params(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if !(self.tol > 0.0 && self.tol <= 1e-2) {
            return Err(Error::Params(format!("tol must lie in (0, 1e-2], got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Params("max_iter must be at least 1".into()));
        }
        if self.reinit_every == 0 {
            return Err(Error::Params("reinit_every must be at least 1".into()));
        }
        if let Some(dt) = self.max_dt {
            if !(dt > 0.0) || !dt.is_finite() {
                return Err(Error::Params(format!("max_dt must be > 0, got {dt}")));
            }
        }
        Ok(())
    }
}

/// Validates both parameter sets together.
pub fn validate_params(model: &ModelParams, numerics: &NumericsParams) -> Result<()> {
    model.validate()?;
    numerics.validate()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        validate_params(&ModelParams::default(), &NumericsParams::default()).unwrap();
        let n = NumericsParams::default();
        assert_eq!(n.cfl, 0.4);
        assert_eq!(n.eta, 1e-3);
        assert_eq!(n.tol, 1e-8);
        assert_eq!(n.reinit_every, 20);
        assert!(!n.renormalize_d);
    }

    #[test]
    fn rejects_bad_values() {
        let mut m = ModelParams::default();
        m.k_q = -0.1;
        assert!(m.validate().is_err());
        let mut m = ModelParams::default();
        m.c_bar = 0.0;
        assert!(m.validate().is_err());
        let mut m = ModelParams::default();
        m.permeability = -1.0;
        assert!(m.validate().is_err());

        let mut n = NumericsParams::default();
        n.cfl = 1.5;
        assert!(n.validate().is_err());
        let mut n = NumericsParams::default();
        n.delta_over_h = 0.5;
        assert!(n.validate().is_err());
        let mut n = NumericsParams::default();
        n.max_dt = Some(0.0);
        assert!(n.validate().is_err());
    }

    #[test]
    fn saturating_response_at_half_saturation() {
        let m = ModelParams { drug_response: DrugResponse::Saturating, k_half: 0.5, ..Default::default() };
        assert_eq!(m.drug_g(0.5), 0.5);
        assert!(m.drug_g(10.0) < 1.0);
        assert_eq!(m.drug_g_sup(0.5), 0.5);
        let lin = ModelParams::default();
        assert_eq!(lin.drug_g(0.7), 0.7);
    }

    #[test]
    fn delta_tracks_spacing() {
        let n = NumericsParams::default();
        assert_eq!(n.delta(1.0 / 64.0), 1.5 / 64.0);
    }
}
