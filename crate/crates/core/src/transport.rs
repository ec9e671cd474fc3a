//! Donor-cell transport of the cell-phase densities.
//!
//! One step splits into an explicit conservative advection by the mixture
//! velocity, `f* = f - dt div_h(f v)` with first-order upwind face fluxes,
//! followed by an explicit Euler update with the kinetic sources evaluated at
//! the advected state. Wall faces carry zero velocity, so the box is closed
//! and total mass changes only through the sources and the divergence of `v`.
//!
//! Positivity holds whenever `dt * sum_f |v_f| / h <= 1` per cell (see
//! [`max_face_speed_sum`]) and `dt` stays below half the inverse of the
//! stiffest source rate, which [`stable_dt`] enforces with a factor-2 margin.

use crate::error::{Error, Result};
use crate::grid::{FaceField, ScalarField};
use crate::kinetics::source_at;
use crate::params::ModelParams;

/// Densities beyond `GROSS_BOUND_FACTOR * rho_f` (or below its negative
/// counterpart) abort the run: they signal an unstable step, not the mild
/// constraint drift the splitting is allowed to produce.
const GROSS_BOUND_FACTOR: f64 = 1.25;
const GROSS_NEGATIVE: f64 = -1e-6;

/// Largest per-cell sum of face speeds, `max_c sum_{f in dc} |v_f|`.
/// The advective CFL condition reads `dt * max_face_speed_sum / h <= cfl`.
pub fn max_face_speed_sum(v: &FaceField) -> f64 {
    let g = v.grid();
    let [nx, ny, nz] = g.cell_dims();
    let mut worst = 0.0_f64;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let mut sum = 0.0;
                for a in 0..g.dim() {
                    let mut hi = [i, j, k];
                    hi[a] += 1;
                    sum += v.at(a, i, j, k).abs() + v.at(a, hi[0], hi[1], hi[2]).abs();
                }
                worst = worst.max(sum);
            }
        }
    }
    worst
}

/// Stiffest decay rate among all explicitly integrated source terms, with the
/// drug response evaluated at its supremum up to `w_bar`:
/// for P `(k_q + k_a) c_bar + i_1 G`, for Q `(k_p + k_d) c_bar + i_2 G`,
/// for D `k_r`, for C `(k_1 k_p + k_2 k_q) c_bar rho_f`, and for W
/// `(mu_1 + mu_2) G rho_f`.
pub fn rate_bound(m: &ModelParams, w_bar: f64) -> f64 {
    let g_sup = m.drug_g_sup(w_bar);
    let lam_p = (m.k_q + m.k_a) * m.c_bar + m.i_1 * g_sup;
    let lam_q = (m.k_p + m.k_d) * m.c_bar + m.i_2 * g_sup;
    let lam_d = m.k_r;
    let lam_c = (m.k_1 * m.k_p + m.k_2 * m.k_q) * m.c_bar * m.rho_f;
    let lam_w = (m.mu_1 + m.mu_2) * g_sup * m.rho_f;
    lam_p.max(lam_q).max(lam_d).max(lam_c).max(lam_w)
}

/// Largest stable step: `min(cfl h / speed_sum, 0.5 / rate)`. Either
/// constraint may be absent (zero speed or zero rates), in which case the
/// other one, or infinity, is returned; callers cap against output cadence.
pub fn stable_dt(h: f64, cfl: f64, speed_sum: f64, rate: f64) -> f64 {
    let adv = if speed_sum > 0.0 { cfl * h / speed_sum } else { f64::INFINITY };
    let src = if rate > 0.0 { 0.5 / rate } else { f64::INFINITY };
    adv.min(src)
}

/// Conservative upwind divergence `div_h(f v)`: each face flux takes the
/// donor (upwind) cell value. Wall faces contribute nothing since `v = 0`.
pub fn upwind_flux_divergence(f: &ScalarField, v: &FaceField) -> ScalarField {
    let g = f.grid();
    let n = g.n();
    let h = g.h();
    let mut out = ScalarField::zeros(g);
    for a in 0..g.dim() {
        let fd = g.face_dims(a);
        let mut flux = vec![0.0; g.face_count(a)];
        let mut idx = 0;
        for k in 0..fd[2] {
            for j in 0..fd[1] {
                for i in 0..fd[0] {
                    let p = [i, j, k];
                    if p[a] > 0 && p[a] < n {
                        let vf = v.at(a, i, j, k);
                        if vf != 0.0 {
                            let mut donor = p;
                            if vf > 0.0 {
                                donor[a] -= 1;
                            }
                            flux[idx] = vf * f.at(donor[0], donor[1], donor[2]);
                        }
                    }
                    idx += 1;
                }
            }
        }
        let [nx, ny, nz] = g.cell_dims();
        let mut cidx = 0;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let mut hi = [i, j, k];
                    hi[a] += 1;
                    out.data_mut()[cidx] +=
                        (flux[g.face_index(a, hi[0], hi[1], hi[2])]
                            - flux[g.face_index(a, i, j, k)])
                            / h;
                    cidx += 1;
                }
            }
        }
    }
    out
}

/// Result of one density step, with the extreme values reached and the
/// magnitude of the optional sum renormalization.
pub struct DensityStep {
    pub p: ScalarField,
    pub q: ScalarField,
    pub d: ScalarField,
    pub min_density: f64,
    pub max_density: f64,
    /// Largest relative adjustment applied when `renormalize_d` is on.
    pub renorm_correction: f64,
}

/// Advances P, Q, D by one step of advection plus sources. The kinetic terms
/// are evaluated on the advected state with C clamped to `[0, c_bar]` and W
/// to `[0, inf)`; densities are passed through raw, since the splitting may
/// legitimately hold the sum slightly off `rho_f` in moving-domain runs.
#[allow(clippy::too_many_arguments)]
pub fn step_densities(
    p: &ScalarField,
    q: &ScalarField,
    d: &ScalarField,
    c: &ScalarField,
    w: &ScalarField,
    v: &FaceField,
    dt: f64,
    m: &ModelParams,
    renormalize_d: bool,
) -> Result<DensityStep> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::TimeStep(format!("density step must be > 0, got {dt}")));
    }
    for (other, name) in [(q, "Q"), (d, "D"), (c, "C"), (w, "W")] {
        p.check_compatible(other, name)?;
    }
    v.check_compatible(&p.grid(), "mixture velocity")?;

    let div_p = upwind_flux_divergence(p, v);
    let div_q = upwind_flux_divergence(q, v);
    let div_d = upwind_flux_divergence(d, v);

    let grid = p.grid();
    let mut out_p = ScalarField::zeros(grid);
    let mut out_q = ScalarField::zeros(grid);
    let mut out_d = ScalarField::zeros(grid);
    let mut min_density = f64::INFINITY;
    let mut max_density = f64::NEG_INFINITY;
    let mut renorm_correction = 0.0_f64;
    let hard_lo = GROSS_NEGATIVE * m.rho_f;
    let hard_hi = GROSS_BOUND_FACTOR * m.rho_f;

    for idx in 0..grid.cell_count() {
        let ps = p.data()[idx] - dt * div_p.data()[idx];
        let qs = q.data()[idx] - dt * div_q.data()[idx];
        let ds = d.data()[idx] - dt * div_d.data()[idx];
        let cv = c.data()[idx].clamp(0.0, m.c_bar);
        let wv = w.data()[idx].max(0.0);
        let [gp, gq, gd] = source_at(ps, qs, ds, cv, wv, m);
        let mut pn = ps + dt * gp;
        let mut qn = qs + dt * gq;
        let mut dn = ds + dt * gd;
        for (val, name) in [(pn, "P"), (qn, "Q"), (dn, "D")] {
            if !val.is_finite() {
                return Err(Error::NonFinite(format!("{name} after transport step")));
            }
            if val < hard_lo || val > hard_hi {
                return Err(Error::TimeStep(format!(
                    "{name} = {val:.6} left the stable range [{hard_lo:.2e}, {hard_hi:.3}]; \
                     the step size is too large for the flow or sources"
                )));
            }
        }
        if renormalize_d {
            let s = pn + qn + dn;
            // Rescale interior cells back onto the constraint sum rho_f;
            // cells holding less than half a cell of tissue are left alone.
            if s >= 0.5 * m.rho_f {
                let factor = m.rho_f / s;
                renorm_correction = renorm_correction.max((1.0 - factor).abs());
                pn *= factor;
                qn *= factor;
                dn *= factor;
            }
        }
        min_density = min_density.min(pn).min(qn).min(dn);
        max_density = max_density.max(pn).max(qn).max(dn);
        out_p.data_mut()[idx] = pn;
        out_q.data_mut()[idx] = qn;
        out_d.data_mut()[idx] = dn;
    }

    Ok(DensityStep {
        p: out_p,
        q: out_q,
        d: out_d,
        min_density,
        max_density,
        renorm_correction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_velocity(g: Grid, vx: f64, vy: f64) -> FaceField {
        // Interior faces only; wall faces stay zero, as the solver guarantees.
        let n = g.n();
        FaceField::from_fn(g, |axis, x| {
            let along = x[axis] / g.h();
            let idx = along.round() as usize;
            if idx == 0 || idx == n {
                0.0
            } else if axis == 0 {
                vx
            } else {
                vy
            }
        })
    }

    #[test]
    fn donor_cell_fluxes_hand_values() {
        // Impulse at cell (3,3) on an 8^2 grid, uniform v_x = 0.5:
        // div(3,3) = (0.5*1 - 0.5*0)/h = 4, div(4,3) = (0 - 0.5*1)/h = -4.
        let g = Grid::new(2, 1.0, 8).unwrap();
        let mut f = ScalarField::zeros(g);
        f.data_mut()[g.cell_index(3, 3, 0)] = 1.0;
        let v = uniform_velocity(g, 0.5, 0.0);
        let div = upwind_flux_divergence(&f, &v);
        assert!((div.at(3, 3, 0) - 4.0).abs() < 1e-13);
        assert!((div.at(4, 3, 0) + 4.0).abs() < 1e-13);
        assert_eq!(div.at(2, 3, 0), 0.0);

        // Reversed velocity: the donor switches to the right cell.
        let v = uniform_velocity(g, -0.5, 0.0);
        let div = upwind_flux_divergence(&f, &v);
        assert!((div.at(3, 3, 0) - 4.0).abs() < 1e-13);
        assert!((div.at(2, 3, 0) + 4.0).abs() < 1e-13);
        assert_eq!(div.at(4, 3, 0), 0.0);
    }

    #[test]
    fn advection_conserves_mass_and_positivity() {
        let g = Grid::new(2, 1.0, 32).unwrap();
        let f0 = ScalarField::from_fn(g, |x| {
            if (0.25..0.5).contains(&x[0]) && (0.25..0.75).contains(&x[1]) {
                1.0
            } else {
                0.0
            }
        });
        let v = uniform_velocity(g, 0.1, 0.05);
        let speed = max_face_speed_sum(&v);
        let dt = stable_dt(g.h(), 0.9, speed, 0.0);
        let mut f = f0.clone();
        let mass0 = crate::grid::integrate_scalar(&f, None).unwrap();
        // 20 steps keep the smeared front well away from the walls, where the
        // zeroed wall faces would otherwise compress the profile.
        for _ in 0..20 {
            let div = upwind_flux_divergence(&f, &v);
            for (x, d) in f.data_mut().iter_mut().zip(div.data()) {
                *x -= dt * d;
            }
        }
        let mass1 = crate::grid::integrate_scalar(&f, None).unwrap();
        assert!((mass1 - mass0).abs() < 1e-13, "mass drift {}", mass1 - mass0);
        assert!(f.min() >= 0.0, "negative density {}", f.min());
        assert!(f.max() <= 1.0 + 1e-9, "overshoot {}", f.max());
    }

    #[test]
    fn rate_bound_hand_value() {
        // Defaults, linear response, w_bar = 0.3:
        // lam_P = 0.7 + 0.3 = 1.0, lam_Q = 1.2 + 0.3 = 1.5, lam_D = 0.3,
        // lam_C = (0.8 + 0.5) = 1.3, lam_W = 2 * 0.3 = 0.6 -> max 1.5.
        let m = ModelParams::default();
        let rate = rate_bound(&m, 0.3);
        assert!((rate - 1.5).abs() < 1e-14, "rate {rate}");
        // stable_dt: min(0.4 * h / 2.0, 0.5 / 1.5) with h = 1/64.
        let dt = stable_dt(1.0 / 64.0, 0.4, 2.0, rate);
        assert!((dt - 0.003125).abs() < 1e-15);
        assert_eq!(stable_dt(0.1, 0.4, 0.0, 0.0), f64::INFINITY);
    }

    #[test]
    fn pure_exchange_preserves_the_sum() {
        // k_b = k_r = 0: the source sum telescopes to zero, so P + Q + D is
        // invariant cell by cell even with drug kill active.
        let g = Grid::new(2, 1.0, 16).unwrap();
        let m = ModelParams { k_b: 0.0, k_r: 0.0, ..ModelParams::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ScalarField::from_fn(g, |_| rng.gen_range(0.0..0.4));
        let q = ScalarField::from_fn(g, |_| rng.gen_range(0.0..0.3));
        let d = ScalarField::from_fn(g, |_| rng.gen_range(0.0..0.3));
        let c = ScalarField::from_fn(g, |_| rng.gen_range(0.0..1.0));
        let w = ScalarField::from_fn(g, |_| rng.gen_range(0.0..0.5));
        let v = FaceField::zeros(g);
        let out = step_densities(&p, &q, &d, &c, &w, &v, 0.05, &m, false).unwrap();
        for idx in 0..g.cell_count() {
            let before = p.data()[idx] + q.data()[idx] + d.data()[idx];
            let after = out.p.data()[idx] + out.q.data()[idx] + out.d.data()[idx];
            assert!((after - before).abs() < 1e-14);
        }
        assert!(out.min_density >= 0.0);
    }

    #[test]
    fn mild_constraint_drift_is_tolerated_gross_violation_is_not() {
        let g = Grid::new(2, 1.0, 8).unwrap();
        let m = ModelParams::default();
        let v = FaceField::zeros(g);
        let c = ScalarField::constant(g, 0.5);
        let w = ScalarField::zeros(g);
        // Sum 1.05 rho_f: allowed.
        let p = ScalarField::constant(g, 0.45);
        let q = ScalarField::constant(g, 0.35);
        let d = ScalarField::constant(g, 0.25);
        assert!(step_densities(&p, &q, &d, &c, &w, &v, 0.01, &m, false).is_ok());
        // A density far beyond rho_f: rejected.
        let p_bad = ScalarField::constant(g, 1.5);
        assert!(step_densities(&p_bad, &q, &d, &c, &w, &v, 0.01, &m, false).is_err());
    }

    #[test]
    fn renormalization_restores_the_sum() {
        let g = Grid::new(2, 1.0, 8).unwrap();
        let m = ModelParams { k_b: 0.0, k_r: 0.0, ..ModelParams::default() };
        let v = FaceField::zeros(g);
        let c = ScalarField::constant(g, 0.5);
        let w = ScalarField::zeros(g);
        let p = ScalarField::constant(g, 0.6);
        let q = ScalarField::constant(g, 0.5);
        let d = ScalarField::constant(g, 0.2);
        let out = step_densities(&p, &q, &d, &c, &w, &v, 0.01, &m, true).unwrap();
        for idx in 0..g.cell_count() {
            let s = out.p.data()[idx] + out.q.data()[idx] + out.d.data()[idx];
            assert!((s - m.rho_f).abs() < 1e-13, "sum {s}");
        }
        // Sum was 1.3 rho_f, so the recorded correction is about 0.23.
        assert!((out.renorm_correction - (1.0 - 1.0 / 1.3)).abs() < 1e-3);
    }

    proptest! {
        /// Donor-cell advection keeps nonnegative fields nonnegative under the
        /// face-sum CFL condition and conserves mass exactly (the interior
        /// fluxes telescope and the wall faces carry none). The maximum may
        /// grow where the wall-zeroed velocity compresses, so no bound on it.
        #[test]
        fn upwind_is_positive_and_conservative(
            seed in 0u64..500, vx in -0.5f64..0.5, vy in -0.5f64..0.5,
        ) {
            let g = Grid::new(2, 1.0, 16).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut f = ScalarField::from_fn(g, |_| rng.gen_range(0.0..1.0));
            let v = uniform_velocity(g, vx, vy);
            let dt = stable_dt(g.h(), 1.0, max_face_speed_sum(&v), 0.0).min(1.0);
            let mass0 = crate::grid::integrate_scalar(&f, None).unwrap();
            for _ in 0..5 {
                let div = upwind_flux_divergence(&f, &v);
                for (x, d) in f.data_mut().iter_mut().zip(div.data()) {
                    *x -= dt * d;
                }
            }
            let mass1 = crate::grid::integrate_scalar(&f, None).unwrap();
            prop_assert!(f.min() >= -1e-12);
            prop_assert!((mass1 - mass0).abs() <= 1e-12 * mass0.abs().max(1.0));
        }
    }
}
