//! Time-stepping driver coupling geometry, flow, transport and reactions.
//!
//! One step advances the full state in this order:
//!
//! 1. rebuild the interface masks from the level set,
//! 2. assemble the net-production source and project it to compatibility,
//! 3. solve the penalized flow for the mixture velocity and pressure,
//! 4. pick a stable step (advective CFL plus source stiffness),
//! 5. transport the densities and apply the kinetic sources,
//! 6. advance nutrient and drug by reaction and masked diffusion,
//! 7. advect the level set by the prescribed domain motion and periodically
//!    restore the distance property.
//!
//! Everything is sequential and allocation-deterministic, so identical inputs
//! reproduce bit-identical snapshots. Flow and mask rebuilds are cached across
//! the snapshot boundary: refreshing the flow for output and then stepping
//! reuses one solve.

use crate::error::{Error, Result};
use crate::flow::{project_divergence_rhs, PenalizedFlow};
use crate::geometry::{
    advect_levelset, boundary_clearance_cells, geometry_masks, gradient_band_range, region_volume,
    reinitialize, sdf_ball, DomainMotion, Masks, VelocityField,
};
use crate::grid::{integrate_scalar, FaceField, Grid, ScalarField};
use crate::params::{ModelParams, NumericsParams};
use crate::reactdiff::{drug_rate, nutrient_rate, step_concentration};
use crate::transport::{max_face_speed_sum, rate_bound, stable_dt, step_densities};

/// Interior cells must keep at least this many cells of wall clearance.
const MIN_WALL_CLEARANCE: usize = 3;

/// Hard cap on the normalized energy-decay defect of a diffusion solve.
const ENERGY_SLACK: f64 = 1e-8;

/// Runaway-loop guard for a single `run` call.
const MAX_STEPS: usize = 2_000_000;

/// Initial data: a ball of mixed tissue in quiescent surroundings.
#[derive(Clone, Copy, Debug)]
pub struct InitialBall {
    pub center: [f64; 3],
    pub radius: f64,
    /// Phase fractions of `rho_f`; must sum to 1.
    pub alpha_p: f64,
    pub alpha_q: f64,
    pub alpha_d: f64,
    /// Initial nutrient level, scaled by the smoothed interior mask.
    pub c0: f64,
    /// Initial drug level, scaled likewise.
    pub w0: f64,
}

impl InitialBall {
    pub fn validate(&self, model: &ModelParams) -> Result<()> {
        let sum = self.alpha_p + self.alpha_q + self.alpha_d;
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Params(format!("phase fractions sum to {sum}, expected 1")));
        }
        for (a, name) in
            [(self.alpha_p, "alpha_p"), (self.alpha_q, "alpha_q"), (self.alpha_d, "alpha_d")]
        {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Params(format!("{name} = {a} outside [0, 1]")));
            }
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::Params(format!("initial radius must be > 0, got {}", self.radius)));
        }
        if !(0.0..=model.c_bar).contains(&self.c0) {
            return Err(Error::Params(format!(
                "c0 = {} outside [0, c_bar = {}]",
                self.c0, model.c_bar
            )));
        }
        if !(self.w0 >= 0.0) || !self.w0.is_finite() {
            return Err(Error::Params(format!("w0 must be >= 0, got {}", self.w0)));
        }
        Ok(())
    }
}

/// Full simulation state at one instant.
#[derive(Clone, Debug)]
pub struct State {
    pub t: f64,
    pub step: usize,
    pub p: ScalarField,
    pub q: ScalarField,
    pub d: ScalarField,
    pub c: ScalarField,
    pub w: ScalarField,
    pub phi: ScalarField,
    pub sigma: ScalarField,
    pub velocity: FaceField,
}

/// Per-step diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct StepDiagnostics {
    pub t: f64,
    pub dt: f64,
    pub outer_iterations: usize,
    /// Removed mean `<g>_Omega`: how impermeable walls conflict with net growth.
    pub mean_defect: f64,
    pub max_div_residual: f64,
    pub min_density: f64,
    pub max_density: f64,
    pub c_range: (f64, f64),
    pub w_range: (f64, f64),
    pub energy_defect_c: f64,
    pub energy_defect_w: f64,
    pub renorm_correction: f64,
}

/// Extremes and defects aggregated over a run.
#[derive(Clone, Copy, Debug)]
pub struct RunMonitors {
    pub density_min: f64,
    pub density_max: f64,
    pub c_min: f64,
    pub c_max: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub mass_initial: f64,
    pub mass_final: f64,
    pub volume_initial: f64,
    pub volume_final: f64,
    pub max_mean_defect: f64,
    pub max_div_residual: f64,
    pub max_energy_defect: f64,
    pub max_renorm_correction: f64,
    pub grad_band: (f64, f64),
    pub total_steps: usize,
}

impl RunMonitors {
    fn new(mass: f64, volume: f64) -> RunMonitors {
        RunMonitors {
            density_min: f64::INFINITY,
            density_max: f64::NEG_INFINITY,
            c_min: f64::INFINITY,
            c_max: f64::NEG_INFINITY,
            w_min: f64::INFINITY,
            w_max: f64::NEG_INFINITY,
            mass_initial: mass,
            mass_final: mass,
            volume_initial: volume,
            volume_final: volume,
            max_mean_defect: 0.0,
            max_div_residual: 0.0,
            max_energy_defect: 0.0,
            max_renorm_correction: 0.0,
            grad_band: (1.0, 1.0),
            total_steps: 0,
        }
    }

    /// Scenario-independent health checks; empty means clean.
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        let (lo, hi) = self.grad_band;
        if lo < 0.5 || hi > 2.0 {
            out.push(format!("level-set gradient band [{lo:.3}, {hi:.3}] left [0.5, 2.0]"));
        }
        if self.max_div_residual > 1e-4 {
            out.push(format!("divergence residual {:.3e} above 1e-4", self.max_div_residual));
        }
        if self.max_energy_defect > ENERGY_SLACK {
            out.push(format!(
                "diffusion energy defect {:.3e} above {ENERGY_SLACK:.0e}",
                self.max_energy_defect
            ));
        }
        out
    }
}

/// Outcome of [`Simulation::run`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps: usize,
    pub snapshots: usize,
    pub monitors: RunMonitors,
}

/// Total tissue mass `int (P + Q + D) dx` over the box.
pub fn total_mass(state: &State) -> Result<f64> {
    let sum = ScalarField::from_vec(
        state.p.grid(),
        state
            .p
            .data()
            .iter()
            .zip(state.q.data())
            .zip(state.d.data())
            .map(|((a, b), c)| a + b + c)
            .collect(),
    )?;
    integrate_scalar(&sum, None)
}

/// The full coupled simulation.
pub struct Simulation {
    grid: Grid,
    model: ModelParams,
    numerics: NumericsParams,
    motion: DomainMotion,
    pub state: State,
    w_sup: f64,
    monitors: RunMonitors,
    masks: Masks,
    masks_valid: bool,
    flow_valid: bool,
    last_defect: f64,
    last_outer: usize,
    last_div_residual: f64,
    steps_since_reinit: usize,
}

impl Simulation {
    pub fn new(
        grid: Grid,
        model: ModelParams,
        numerics: NumericsParams,
        motion: DomainMotion,
        initial: InitialBall,
    ) -> Result<Simulation> {
        crate::params::validate_params(&model, &numerics)?;
        motion.validate(&grid)?;
        initial.validate(&model)?;

        let phi = sdf_ball(grid, initial.center, initial.radius);
        check_clearance(&phi)?;
        let delta = numerics.delta(grid.h());
        let masks = geometry_masks(&phi, delta)?;

        // Densities start as sharp indicators; concentrations follow the
        // smoothed mask so they meet the interface Dirichlet data.
        let ind: Vec<f64> = phi.data().iter().map(|&v| if v < 0.0 { 1.0 } else { 0.0 }).collect();
        let field_from = |scale: f64, weights: &[f64]| -> Result<ScalarField> {
            ScalarField::from_vec(grid, weights.iter().map(|w| scale * w).collect())
        };
        let p = field_from(initial.alpha_p * model.rho_f, &ind)?;
        let q = field_from(initial.alpha_q * model.rho_f, &ind)?;
        let d = field_from(initial.alpha_d * model.rho_f, &ind)?;
        let c = field_from(initial.c0, masks.chi_in.data())?;
        let w = field_from(initial.w0, masks.chi_in.data())?;
        let w_sup = w.max().max(0.0);

        let state = State {
            t: 0.0,
            step: 0,
            p,
            q,
            d,
            c,
            w,
            phi,
            sigma: ScalarField::zeros(grid),
            velocity: FaceField::zeros(grid),
        };
        let mass = total_mass(&state)?;
        let volume = region_volume(&state.phi, delta)?;
        if volume <= 0.0 {
            return Err(Error::Geometry("initial tumor region is empty".into()));
        }
        Ok(Simulation {
            grid,
            model,
            numerics,
            motion,
            state,
            w_sup,
            monitors: RunMonitors::new(mass, volume),
            masks,
            masks_valid: true,
            flow_valid: false,
            last_defect: 0.0,
            last_outer: 0,
            last_div_residual: 0.0,
            steps_since_reinit: 0,
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn numerics(&self) -> &NumericsParams {
        &self.numerics
    }

    pub fn motion(&self) -> &DomainMotion {
        &self.motion
    }

    pub fn monitors(&self) -> &RunMonitors {
        &self.monitors
    }

    fn ensure_masks(&mut self) -> Result<()> {
        if !self.masks_valid {
            self.masks = geometry_masks(&self.state.phi, self.numerics.delta(self.grid.h()))?;
            self.masks_valid = true;
        }
        Ok(())
    }

    /// Net-production source `g = (k_b C P - k_r D) / rho_f`, tolerant of the
    /// mild constraint drift a split scheme accumulates.
    fn divergence_source(&self) -> ScalarField {
        let m = &self.model;
        let mut g = ScalarField::zeros(self.grid);
        for idx in 0..self.grid.cell_count() {
            let pv = self.state.p.data()[idx];
            let cv = self.state.c.data()[idx].clamp(0.0, m.c_bar);
            let dv = self.state.d.data()[idx];
            g.data_mut()[idx] = (m.k_b * cv * pv - m.k_r * dv) / m.rho_f;
        }
        g
    }

    /// Brings velocity and pressure up to date with the current state.
    pub fn ensure_flow(&mut self) -> Result<()> {
        if self.flow_valid {
            return Ok(());
        }
        self.ensure_masks()?;
        let g = self.divergence_source();
        let (g_tilde, defect) = project_divergence_rhs(&g, &self.masks.chi_in)?;
        let t = self.state.t;
        let motion = self.motion;
        let target = if motion.is_zero() {
            FaceField::zeros(self.grid)
        } else {
            FaceField::from_fn(self.grid, |a, x| motion.velocity(t, x)[a])
        };
        let flow = PenalizedFlow::new(&self.masks.chi_in, &target, &self.model, &self.numerics)?;
        let sol = flow.solve(&g_tilde)?;
        self.state.velocity = sol.velocity;
        self.state.sigma = sol.sigma;
        self.last_defect = defect;
        self.last_outer = sol.outer_iterations;
        self.last_div_residual = sol.max_div_residual;
        self.monitors.max_mean_defect = self.monitors.max_mean_defect.max(defect);
        self.monitors.max_div_residual = self.monitors.max_div_residual.max(sol.max_div_residual);
        self.flow_valid = true;
        Ok(())
    }

    /// Largest stable step for the current velocity; requires fresh flow.
    pub fn stable_step(&self) -> f64 {
        debug_assert!(self.flow_valid, "call ensure_flow before stable_step");
        let speed_v = max_face_speed_sum(&self.state.velocity);
        // Conservative per-cell bound for the prescribed motion.
        let speed_motion = 2.0 * self.grid.dim() as f64 * self.motion.max_speed_bound();
        let rate = rate_bound(&self.model, self.w_sup);
        stable_dt(self.grid.h(), self.numerics.cfl, speed_v.max(speed_motion), rate)
    }

    /// Advances the state by exactly `dt`.
    pub fn advance(&mut self, dt: f64) -> Result<StepDiagnostics> {
        self.ensure_flow()?;
        let dstep = step_densities(
            &self.state.p,
            &self.state.q,
            &self.state.d,
            &self.state.c,
            &self.state.w,
            &self.state.velocity,
            dt,
            &self.model,
            self.numerics.renormalize_d,
        )?;

        let rate_c = nutrient_rate(&dstep.p, &dstep.q, &self.state.c, &self.model)?;
        let cstep = step_concentration(
            &self.state.c,
            &rate_c,
            &self.masks.chi_in,
            self.model.nu_1,
            dt,
            &self.numerics,
        )?;
        let rate_w = drug_rate(&dstep.p, &dstep.q, &self.state.w, &self.model)?;
        let wstep = step_concentration(
            &self.state.w,
            &rate_w,
            &self.masks.chi_in,
            self.model.nu_2,
            dt,
            &self.numerics,
        )?;
        for (defect, name) in [
            (cstep.normalized_energy_defect, "nutrient"),
            (wstep.normalized_energy_defect, "drug"),
        ] {
            if defect > ENERGY_SLACK {
                return Err(Error::TimeStep(format!(
                    "{name} diffusion violated the energy bound by {defect:.3e}"
                )));
            }
        }

        if !self.motion.is_zero() {
            let mut phi = advect_levelset(&self.state.phi, &self.motion, self.state.t, dt)?;
            self.steps_since_reinit += 1;
            if self.steps_since_reinit >= self.numerics.reinit_every {
                phi = reinitialize(&phi);
                self.steps_since_reinit = 0;
            }
            check_clearance(&phi)?;
            self.state.phi = phi;
            self.masks_valid = false;
        }

        self.state.p = dstep.p;
        self.state.q = dstep.q;
        self.state.d = dstep.d;
        self.state.c = cstep.field;
        self.state.w = wstep.field;
        self.state.t += dt;
        self.state.step += 1;
        self.flow_valid = false;

        let mon = &mut self.monitors;
        mon.density_min = mon.density_min.min(dstep.min_density);
        mon.density_max = mon.density_max.max(dstep.max_density);
        mon.c_min = mon.c_min.min(cstep.min);
        mon.c_max = mon.c_max.max(cstep.max);
        mon.w_min = mon.w_min.min(wstep.min);
        mon.w_max = mon.w_max.max(wstep.max);
        mon.max_energy_defect = mon
            .max_energy_defect
            .max(cstep.normalized_energy_defect)
            .max(wstep.normalized_energy_defect);
        mon.max_renorm_correction = mon.max_renorm_correction.max(dstep.renorm_correction);
        mon.total_steps += 1;
        if let Some((lo, hi)) = gradient_band_range(&self.state.phi, self.numerics.delta(self.grid.h()))
        {
            mon.grad_band = (mon.grad_band.0.min(lo), mon.grad_band.1.max(hi));
        }

        Ok(StepDiagnostics {
            t: self.state.t,
            dt,
            outer_iterations: self.last_outer,
            mean_defect: self.last_defect,
            max_div_residual: self.last_div_residual,
            min_density: dstep.min_density,
            max_density: dstep.max_density,
            c_range: (cstep.min, cstep.max),
            w_range: (wstep.min, wstep.max),
            energy_defect_c: cstep.normalized_energy_defect,
            energy_defect_w: wstep.normalized_energy_defect,
            renorm_correction: dstep.renorm_correction,
        })
    }

    /// Runs until `t_end`, invoking `on_snapshot(state, index)` at `t = 0`,
    /// at every multiple of `cadence`, and at `t_end`. Each snapshot sees
    /// velocity and pressure recomputed for the state it captures.
    pub fn run(
        &mut self,
        t_end: f64,
        cadence: f64,
        mut on_snapshot: impl FnMut(&State, usize) -> Result<()>,
    ) -> Result<RunSummary> {
        let t0 = self.state.t;
        if !(t_end > t0) || !t_end.is_finite() {
            return Err(Error::TimeStep(format!("t_end = {t_end} must exceed current t = {t0}")));
        }
        if !(cadence > 0.0) || !cadence.is_finite() {
            return Err(Error::TimeStep(format!("snapshot cadence must be > 0, got {cadence}")));
        }
        let eps_t = 1e-12 * t_end.abs().max(1.0);
        let target_for = |k: usize| -> f64 {
            let t = t0 + k as f64 * cadence;
            if t > t_end - eps_t {
                t_end
            } else {
                t
            }
        };

        self.ensure_flow()?;
        self.refresh_volume_and_mass()?;
        on_snapshot(&self.state, 0)?;
        let mut snap_index = 1;
        let mut target = target_for(snap_index);
        let mut steps = 0usize;

        while self.state.t < t_end - eps_t {
            self.ensure_flow()?;
            let mut dt = self.stable_step();
            if let Some(cap) = self.numerics.max_dt {
                dt = dt.min(cap);
            }
            let remaining = target - self.state.t;
            if !(remaining > 0.0) {
                return Err(Error::TimeStep(format!(
                    "snapshot target {target} not ahead of t = {}",
                    self.state.t
                )));
            }
            let lands = dt >= remaining * (1.0 - 1e-12);
            if lands {
                dt = remaining;
            }
            if !(dt > 0.0) || !dt.is_finite() {
                return Err(Error::TimeStep(format!("stable step degenerated to {dt}")));
            }
            self.advance(dt)?;
            steps += 1;
            if steps > MAX_STEPS {
                return Err(Error::TimeStep(format!(
                    "exceeded {MAX_STEPS} steps before reaching t_end"
                )));
            }
            if lands {
                self.state.t = target;
                self.ensure_flow()?;
                self.refresh_volume_and_mass()?;
                on_snapshot(&self.state, snap_index)?;
                snap_index += 1;
                if (target - t_end).abs() <= eps_t {
                    break;
                }
                target = target_for(snap_index);
            }
        }

        Ok(RunSummary { steps, snapshots: snap_index, monitors: self.monitors })
    }

    fn refresh_volume_and_mass(&mut self) -> Result<()> {
        self.monitors.volume_final =
            region_volume(&self.state.phi, self.numerics.delta(self.grid.h()))?;
        self.monitors.mass_final = total_mass(&self.state)?;
        Ok(())
    }
}

fn check_clearance(phi: &ScalarField) -> Result<()> {
    match boundary_clearance_cells(phi) {
        None => Err(Error::Geometry("tumor region is empty".into())),
        Some(c) if c < MIN_WALL_CLEARANCE => Err(Error::Geometry(format!(
            "tumor region is {c} cells from the box wall; need at least {MIN_WALL_CLEARANCE}"
        ))),
        Some(_) => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exchange_only_params() -> ModelParams {
        ModelParams { k_b: 0.0, k_r: 0.0, ..ModelParams::default() }
    }

    fn ball() -> InitialBall {
        InitialBall {
            center: [0.5, 0.5, 0.0],
            radius: 0.25,
            alpha_p: 0.3,
            alpha_q: 0.2,
            alpha_d: 0.5,
            c0: 0.5,
            w0: 0.3,
        }
    }

    fn sim_32(model: ModelParams, motion: DomainMotion) -> Simulation {
        let grid = Grid::new(2, 1.0, 32).unwrap();
        Simulation::new(grid, model, NumericsParams::default(), motion, ball()).unwrap()
    }

    #[test]
    fn pure_exchange_run_preserves_bounds_and_mass() {
        let mut sim = sim_32(exchange_only_params(), DomainMotion::Zero);
        let summary = sim.run(0.1, 0.05, |_, _| Ok(())).unwrap();
        let m = summary.monitors;
        assert!(m.density_min >= -1e-12, "density min {}", m.density_min);
        assert!(m.density_max <= 1.0 + 1e-12, "density max {}", m.density_max);
        assert!(m.c_min >= -1e-10 && m.c_max <= 1.0 + 1e-10);
        assert!(m.w_min >= -1e-10 && m.w_max <= 0.3 + 1e-10);
        let drift = (m.mass_final - m.mass_initial).abs();
        assert!(drift <= 1e-12 * m.mass_initial.max(1.0), "mass drift {drift}");
        // With no births or clearance the constraint sum stays exact inside.
        for idx in 0..sim.grid().cell_count() {
            if sim.state.phi.data()[idx] < -0.05 {
                let s = sim.state.p.data()[idx] + sim.state.q.data()[idx]
                    + sim.state.d.data()[idx];
                assert!((s - 1.0).abs() < 1e-12, "sum {s}");
            }
        }
        assert!(m.issues().is_empty(), "issues: {:?}", m.issues());
    }

    #[test]
    fn snapshots_land_exactly() {
        let mut sim = sim_32(exchange_only_params(), DomainMotion::Zero);
        let mut times = Vec::new();
        sim.run(0.1, 0.03, |state, _| {
            times.push(state.t);
            Ok(())
        })
        .unwrap();
        let expected: Vec<f64> =
            vec![0.0, 0.03, 2.0 * 0.03, 3.0 * 0.03, 0.1];
        assert_eq!(times, expected);
    }

    #[test]
    fn growth_run_drives_a_velocity_field() {
        let model = ModelParams { k_b: 1.0, k_r: 0.3, ..ModelParams::default() };
        let mut sim = sim_32(model, DomainMotion::Zero);
        let summary = sim.run(0.0625, 0.03125, |_, _| Ok(())).unwrap();
        assert!(sim.state.velocity.max_abs() > 1e-6, "no outflow produced");
        assert!(summary.monitors.max_div_residual <= 1e-5);
        assert!(summary.monitors.max_mean_defect > 0.0);
        assert!(summary.monitors.issues().is_empty());
    }

    #[test]
    fn rotation_run_keeps_volume_and_clearance() {
        let motion = DomainMotion::RigidRotation {
            center: [0.5, 0.5, 0.0],
            angular_rate: 0.5,
            r0: 0.35,
            r1: 0.46,
        };
        let grid = Grid::new(2, 1.0, 48).unwrap();
        let initial = InitialBall {
            center: [0.5, 0.56, 0.0],
            radius: 0.2,
            ..ball()
        };
        let mut sim = Simulation::new(
            grid,
            exchange_only_params(),
            NumericsParams::default(),
            motion,
            initial,
        )
        .unwrap();
        let summary = sim.run(0.125, 0.0625, |_, _| Ok(())).unwrap();
        let m = summary.monitors;
        let rel = (m.volume_final - m.volume_initial).abs() / m.volume_initial;
        assert!(rel <= 0.02, "volume drift {rel}");
        assert!(sim.state.velocity.max_abs() > 0.01, "exterior not tracking the motion");
        assert!(m.issues().is_empty(), "issues: {:?}", m.issues());
    }

    #[test]
    fn bad_initial_data_is_rejected() {
        let grid = Grid::new(2, 1.0, 32).unwrap();
        // Ball touching the wall: clearance failure.
        let touching = InitialBall { center: [0.1, 0.5, 0.0], radius: 0.25, ..ball() };
        assert!(Simulation::new(
            grid,
            exchange_only_params(),
            NumericsParams::default(),
            DomainMotion::Zero,
            touching,
        )
        .is_err());
        // Fractions not summing to one.
        let bad = InitialBall { alpha_p: 0.5, ..ball() };
        assert!(Simulation::new(
            grid,
            exchange_only_params(),
            NumericsParams::default(),
            DomainMotion::Zero,
            bad,
        )
        .is_err());
    }
}
