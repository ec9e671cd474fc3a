//! Reaction-diffusion of the nutrient and drug concentrations.
//!
//! Both species follow `d_t u = nu Delta u - lambda(state) u` inside the
//! tumor with `u = 0` on the moving interface. One step splits into an
//! explicit reaction `u* = (1 - dt lambda) u` (valid while `dt lambda <= 1`)
//! and an implicit masked diffusion solve
//!
//! ```text
//! (I - dt div(nu (chi_in + eta) grad)) u' = u*
//! ```
//!
//! with homogeneous Neumann walls and cells where `chi_in < 1e-3` pinned to
//! zero, which realizes the interface Dirichlet condition through the mask.
//! The matrix is a symmetric M-matrix, so the solve obeys a discrete maximum
//! principle; the CG tolerance is pushed below the admissibility slack so
//! solver noise cannot masquerade as a bounds violation.

use crate::error::{Error, Result};
use crate::grid::ScalarField;
use crate::linsolve::{conjugate_gradient, CgOptions};
use crate::params::{ModelParams, NumericsParams};

/// Cells with less tumor mask than this are held at zero concentration.
const PIN_THRESHOLD: f64 = 1e-3;

/// Residual cap: keeps per-cell solver noise an order below the 1e-10
/// admissibility slack used by the bounds monitors.
const NOISE_TOL: f64 = 1e-11;

/// Nutrient decay rate `lambda_C = k_1 k_p C P + k_2 k_q (c_bar - C) Q`,
/// evaluated with the state clamped into its admissible box so the rate is
/// never negative.
pub fn nutrient_rate(
    p: &ScalarField,
    q: &ScalarField,
    c: &ScalarField,
    m: &ModelParams,
) -> Result<ScalarField> {
    p.check_compatible(q, "Q")?;
    p.check_compatible(c, "C")?;
    let grid = p.grid();
    let mut out = ScalarField::zeros(grid);
    for idx in 0..grid.cell_count() {
        let pv = p.data()[idx].max(0.0);
        let qv = q.data()[idx].max(0.0);
        let cv = c.data()[idx].clamp(0.0, m.c_bar);
        out.data_mut()[idx] = m.k_1 * m.k_p * cv * pv + m.k_2 * m.k_q * (m.c_bar - cv) * qv;
    }
    Ok(out)
}

/// Drug decay rate `lambda_W = mu_1 G(W) P + mu_2 G(W) Q`, clamped likewise.
pub fn drug_rate(
    p: &ScalarField,
    q: &ScalarField,
    w: &ScalarField,
    m: &ModelParams,
) -> Result<ScalarField> {
    p.check_compatible(q, "Q")?;
    p.check_compatible(w, "W")?;
    let grid = p.grid();
    let mut out = ScalarField::zeros(grid);
    for idx in 0..grid.cell_count() {
        let pv = p.data()[idx].max(0.0);
        let qv = q.data()[idx].max(0.0);
        let g = m.drug_g(w.data()[idx].max(0.0));
        out.data_mut()[idx] = (m.mu_1 * pv + m.mu_2 * qv) * g;
    }
    Ok(out)
}

/// One concentration step with its diagnostics.
pub struct ReactDiffStep {
    pub field: ScalarField,
    pub min: f64,
    pub max: f64,
    /// `(E_after - E_before) / E_before` where the implicit solve guarantees
    /// `E_after = 0.5||u'||^2 + dt |u'|_visc^2 <= 0.5||u*||^2 = E_before`
    /// up to solver noise; positive values beyond ~1e-9 indicate trouble.
    pub normalized_energy_defect: f64,
    pub iterations: usize,
}

/// Advances one concentration by explicit reaction then implicit masked
/// diffusion. `rate` must be the nonnegative decay coefficient field.
pub fn step_concentration(
    field: &ScalarField,
    rate: &ScalarField,
    chi_in: &ScalarField,
    nu: f64,
    dt: f64,
    numerics: &NumericsParams,
) -> Result<ReactDiffStep> {
    field.check_compatible(rate, "reaction rate")?;
    field.check_compatible(chi_in, "chi_in")?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::TimeStep(format!("concentration step must be > 0, got {dt}")));
    }
    if !(nu >= 0.0) {
        return Err(Error::Params(format!("diffusivity must be >= 0, got {nu}")));
    }
    let grid = field.grid();
    let n_cells = grid.cell_count();
    let h2 = grid.h() * grid.h();
    let [nx, ny, nz] = grid.cell_dims();
    let dims = [nx, ny, nz];

    // Explicit reaction with the stiffness guard.
    let mut star = vec![0.0; n_cells];
    for idx in 0..n_cells {
        let lam = rate.data()[idx];
        if lam < -1e-15 || !lam.is_finite() {
            return Err(Error::Params(format!("reaction rate {lam} is negative or non-finite")));
        }
        if dt * lam > 1.0 {
            return Err(Error::TimeStep(format!(
                "explicit reaction unstable: dt * rate = {} > 1; reduce the step",
                dt * lam
            )));
        }
        star[idx] = field.data()[idx] * (1.0 - dt * lam);
    }

    let pinned: Vec<bool> = chi_in.data().iter().map(|&c| c < PIN_THRESHOLD).collect();

    // Face diffusion weights s_f = dt nu (chi_face + eta) / h^2, zero on walls.
    // Stored per axis in face layout.
    let mut weights: Vec<Vec<f64>> = Vec::with_capacity(grid.dim());
    for a in 0..grid.dim() {
        let fd = grid.face_dims(a);
        let mut w = vec![0.0; grid.face_count(a)];
        let mut idx = 0;
        for k in 0..fd[2] {
            for j in 0..fd[1] {
                for i in 0..fd[0] {
                    let p = [i, j, k];
                    if p[a] > 0 && p[a] < grid.n() {
                        let mut cl = p;
                        cl[a] -= 1;
                        let chi_face =
                            0.5 * (chi_in.at(cl[0], cl[1], cl[2]) + chi_in.at(p[0], p[1], p[2]));
                        w[idx] = dt * nu * (chi_face + numerics.eta) / h2;
                    }
                    idx += 1;
                }
            }
        }
        weights.push(w);
    }

    // Diagonal and matrix-free operator. Pinned rows are identity; couplings
    // into pinned cells keep the diagonal part only (Dirichlet elimination).
    let mut diag = vec![1.0; n_cells];
    {
        let mut idx = 0;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    if !pinned[idx] {
                        let p = [i, j, k];
                        let mut acc = 1.0;
                        for (a, w) in weights.iter().enumerate() {
                            for lo in [0usize, 1] {
                                let mut f = p;
                                f[a] += lo;
                                acc += w[grid.face_index(a, f[0], f[1], f[2])];
                            }
                        }
                        diag[idx] = acc;
                    }
                    idx += 1;
                }
            }
        }
    }
    let apply = |x: &[f64], y: &mut [f64]| {
        let mut idx = 0;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    if pinned[idx] {
                        y[idx] = x[idx];
                        idx += 1;
                        continue;
                    }
                    let p = [i, j, k];
                    let mut acc = diag[idx] * x[idx];
                    for (a, w) in weights.iter().enumerate() {
                        for (lo, dir) in [(0usize, -1isize), (1, 1)] {
                            let mut f = p;
                            f[a] += lo;
                            let s = w[grid.face_index(a, f[0], f[1], f[2])];
                            if s != 0.0 {
                                let mut nb = p;
                                nb[a] = (p[a] as isize + dir) as usize;
                                debug_assert!(nb[a] < dims[a]);
                                let nb_idx = grid.cell_index(nb[0], nb[1], nb[2]);
                                if !pinned[nb_idx] {
                                    acc -= s * x[nb_idx];
                                }
                            }
                        }
                    }
                    y[idx] = acc;
                    idx += 1;
                }
            }
        }
    };

    let mut b = star.clone();
    for (bv, pin) in b.iter_mut().zip(&pinned) {
        if *pin {
            *bv = 0.0;
        }
    }
    let b_inf = b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let b_l2 = crate::linsolve::norm2(&b);
    let tol_abs = (numerics.tol * b_l2).min(NOISE_TOL * b_inf);
    let op = (n_cells, apply);
    let mut x = vec![0.0; n_cells];
    let report = conjugate_gradient(
        &op,
        &b,
        &mut x,
        Some(&diag),
        CgOptions { tol_rel: 0.0, tol_abs, max_iter: numerics.max_iter },
    )?;

    // Energy inequality of the implicit step (exact up to solver noise):
    // 0.5||u'||^2 + dt |u'|_visc^2 <= 0.5||u*||^2.
    let vol = grid.cell_volume();
    let mut e_after = 0.0;
    for v in &x {
        e_after += 0.5 * v * v;
    }
    let mut visc = 0.0;
    {
        let mut idx = 0;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    if !pinned[idx] {
                        let p = [i, j, k];
                        // Forward faces only: each interior pair counted once,
                        // pinned neighbors contribute their Dirichlet drop.
                        for (a, w) in weights.iter().enumerate() {
                            if p[a] + 1 < dims[a] {
                                let mut f = p;
                                f[a] += 1;
                                let s = w[grid.face_index(a, f[0], f[1], f[2])];
                                let nb_idx = grid.cell_index(f[0], f[1], f[2]);
                                let other = if pinned[nb_idx] { 0.0 } else { x[nb_idx] };
                                visc += s * (x[idx] - other) * (x[idx] - other);
                            }
                            if p[a] > 0 {
                                let s = w[grid.face_index(a, p[0], p[1], p[2])];
                                let mut nb = p;
                                nb[a] -= 1;
                                let nb_idx = grid.cell_index(nb[0], nb[1], nb[2]);
                                if pinned[nb_idx] {
                                    visc += s * x[idx] * x[idx];
                                }
                            }
                        }
                    }
                    idx += 1;
                }
            }
        }
    }
    let e_before: f64 = b.iter().map(|v| 0.5 * v * v).sum();
    let defect = ((e_after + visc) - e_before) * vol;
    let normalized_energy_defect = defect / (e_before * vol).max(1e-300);

    let out = ScalarField::from_vec(grid, x)?;
    if !out.is_finite() {
        return Err(Error::NonFinite("concentration after diffusion".into()));
    }
    Ok(ReactDiffStep {
        min: out.min(),
        max: out.max(),
        field: out,
        normalized_energy_defect,
        iterations: report.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{geometry_masks, sdf_ball};
    use crate::grid::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn no_rate(g: Grid) -> ScalarField {
        ScalarField::zeros(g)
    }

    #[test]
    fn rates_hand_values() {
        let g = Grid::new(2, 1.0, 8).unwrap();
        let m = ModelParams::default();
        let p = ScalarField::constant(g, 0.3);
        let q = ScalarField::constant(g, 0.2);
        let c = ScalarField::constant(g, 0.5);
        let w = ScalarField::constant(g, 0.4);
        // lambda_C = 1*0.8*0.5*0.3 + 1*0.5*0.5*0.2 = 0.12 + 0.05 = 0.17
        let rc = nutrient_rate(&p, &q, &c, &m).unwrap();
        assert!((rc.data()[0] - 0.17).abs() < 1e-14);
        // lambda_W = (1*0.3 + 1*0.2) * 0.4 = 0.2 with the linear response
        let rw = drug_rate(&p, &q, &w, &m).unwrap();
        assert!((rw.data()[0] - 0.2).abs() < 1e-14);
    }

    #[test]
    fn constant_field_is_a_neumann_steady_state() {
        let g = Grid::new(2, 1.0, 16).unwrap();
        let chi = ScalarField::constant(g, 1.0);
        let c = ScalarField::constant(g, 0.7);
        let out =
            step_concentration(&c, &no_rate(g), &chi, 0.05, 0.1, &NumericsParams::default())
                .unwrap();
        for v in out.field.data() {
            assert!((v - 0.7).abs() < 1e-11);
        }
    }

    #[test]
    fn neumann_diffusion_conserves_mass() {
        let g = Grid::new(2, 1.0, 16).unwrap();
        let chi = ScalarField::constant(g, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = ScalarField::from_fn(g, |_| rng.gen_range(0.0..1.0));
        let before = crate::grid::integrate_scalar(&c, None).unwrap();
        let out =
            step_concentration(&c, &no_rate(g), &chi, 0.05, 0.1, &NumericsParams::default())
                .unwrap();
        let after = crate::grid::integrate_scalar(&out.field, None).unwrap();
        assert!((after - before).abs() < 1e-10, "mass drift {}", after - before);
        assert!(out.normalized_energy_defect <= 1e-9);
    }

    /// cos(pi x) is an exact eigenvector of the discrete Neumann Laplacian
    /// with eigenvalue (2 - 2 cos(pi h)) / h^2, so the implicit step must
    /// divide it by exactly 1 + dt nu (1 + eta) lambda_h.
    #[test]
    fn implicit_step_matches_discrete_eigenvalue() {
        let g = Grid::new(2, 1.0, 32).unwrap();
        let numerics = NumericsParams::default();
        let chi = ScalarField::constant(g, 1.0);
        let c0 = ScalarField::from_fn(g, |x| (PI * x[0]).cos());
        let nu = 0.05;
        let dt = 0.2;
        let h = g.h();
        let lambda_h = (2.0 - 2.0 * (PI * h).cos()) / (h * h);
        let factor = 1.0 / (1.0 + dt * nu * (1.0 + numerics.eta) * lambda_h);
        let out = step_concentration(&c0, &no_rate(g), &chi, nu, dt, &numerics).unwrap();
        for (v, v0) in out.field.data().iter().zip(c0.data()) {
            assert!((v - factor * v0).abs() < 1e-10, "{v} vs {}", factor * v0);
        }
    }

    #[test]
    fn masked_solve_obeys_the_maximum_principle() {
        let g = Grid::new(2, 1.0, 64).unwrap();
        let phi = sdf_ball(g, [0.5, 0.5, 0.0], 0.25);
        let masks = geometry_masks(&phi, 1.5 * g.h()).unwrap();
        let c0 = ScalarField::from_vec(
            g,
            masks.chi_in.data().iter().map(|&x| 0.5 * x).collect(),
        )
        .unwrap();
        let out = step_concentration(&c0, &no_rate(g), &masks.chi_in, 0.05, 0.05,
            &NumericsParams::default())
            .unwrap();
        assert!(out.min >= -1e-10, "min {}", out.min);
        assert!(out.max <= 0.5 + 1e-10, "max {}", out.max);
        // Pinned exterior cells are exactly zero.
        for (v, chi) in out.field.data().iter().zip(masks.chi_in.data()) {
            if *chi < 1e-3 {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(out.normalized_energy_defect <= 1e-9);
    }

    #[test]
    fn reaction_decays_and_guards_stiffness() {
        let g = Grid::new(2, 1.0, 16).unwrap();
        let chi = ScalarField::constant(g, 1.0);
        let c = ScalarField::constant(g, 0.8);
        let rate = ScalarField::constant(g, 2.0);
        // dt * rate = 0.4: c* = 0.8 * 0.6 = 0.48, then diffusion of a constant
        // leaves it unchanged.
        let out =
            step_concentration(&c, &rate, &chi, 0.05, 0.2, &NumericsParams::default()).unwrap();
        for v in out.field.data() {
            assert!((v - 0.48).abs() < 1e-11);
        }
        // dt * rate = 1.2 > 1: rejected.
        assert!(
            step_concentration(&c, &rate, &chi, 0.05, 0.6, &NumericsParams::default()).is_err()
        );
    }

    #[test]
    fn three_dimensional_smoke() {
        let g = Grid::new(3, 1.0, 12).unwrap();
        let phi = sdf_ball(g, [0.5, 0.5, 0.5], 0.3);
        let masks = geometry_masks(&phi, 1.5 * g.h()).unwrap();
        let c0 = ScalarField::from_vec(
            g,
            masks.chi_in.data().iter().map(|&x| 0.9 * x).collect(),
        )
        .unwrap();
        let out = step_concentration(&c0, &no_rate(g), &masks.chi_in, 0.05, 0.05,
            &NumericsParams::default())
            .unwrap();
        assert!(out.min >= -1e-10 && out.max <= 0.9 + 1e-10);
    }
}
