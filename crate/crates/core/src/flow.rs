//! Penalized Darcy/Brinkman flow on the staggered MAC grid.
//!
//! The mixture velocity `v` and pressure `sigma` solve, on the whole box,
//!
//! ```text
//! -div(mu_mask grad) v + (mu_tilde/K) v + chi_out/eps (v - V) + grad sigma = 0
//! div v = g_tilde,    v = 0 on the box walls
//! ```
//!
//! with `mu_mask = mu (chi_in + eta)` and `chi_out = 1 - chi_in`. The
//! penalization relaxes the exterior velocity toward the prescribed domain
//! motion `V` at rate `1/eps`. The viscous term is discretized in flux form so
//! the momentum block `A` is symmetric positive definite, the discrete
//! gradient is the exact negative transpose of the divergence, and the
//! pressure solves the Schur system `(D A^-1 D^T) sigma = g_tilde - D A^-1 b`
//! by preconditioned CG, projecting out the constant null vector.
//! For `mu = 0` the momentum block is diagonal (Darcy); for `mu > 0` each
//! application of `A^-1` is an inner Jacobi-CG solve at a much tighter
//! tolerance than the outer iteration so the Schur operator stays effectively
//! symmetric.

use crate::error::{Error, Result};
use crate::grid::{FaceField, Grid, ScalarField};
use crate::linsolve::{conjugate_gradient, norm2, CgOptions};
use crate::params::{ModelParams, NumericsParams};

/// Inner momentum solves resolve `A^-1` far below the outer Schur tolerance.
const INNER_TOL_REL: f64 = 1e-12;

/// MAC divergence: per cell, the net outward face flux divided by `h`.
pub fn mac_divergence(v: &FaceField) -> ScalarField {
    let g = v.grid();
    let [nx, ny, nz] = g.cell_dims();
    let h = g.h();
    let mut out = ScalarField::zeros(g);
    let mut idx = 0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let mut acc = 0.0;
                for a in 0..g.dim() {
                    let mut hi = [i, j, k];
                    hi[a] += 1;
                    acc += v.at(a, hi[0], hi[1], hi[2]) - v.at(a, i, j, k);
                }
                out.data_mut()[idx] = acc / h;
                idx += 1;
            }
        }
    }
    out
}

/// MAC gradient of a cell scalar: centered difference on interior faces,
/// zero on the box walls (matching the eliminated Dirichlet velocities).
/// This is exactly `-D^T` for [`mac_divergence`].
pub fn mac_gradient(s: &ScalarField) -> FaceField {
    let g = s.grid();
    let n = g.n();
    let h = g.h();
    let mut out = FaceField::zeros(g);
    for a in 0..g.dim() {
        let fd = g.face_dims(a);
        let comp = out.component_mut(a);
        let mut idx = 0;
        for k in 0..fd[2] {
            for j in 0..fd[1] {
                for i in 0..fd[0] {
                    let p = [i, j, k];
                    if p[a] > 0 && p[a] < n {
                        let mut cl = p;
                        cl[a] -= 1;
                        comp[idx] = (s.at(p[0], p[1], p[2]) - s.at(cl[0], cl[1], cl[2])) / h;
                    }
                    idx += 1;
                }
            }
        }
    }
    out
}

/// Projects a divergence source onto the compatible right-hand side
/// `g_tilde = chi_in (g - <g>_Omega)` whose box integral vanishes, and
/// returns the removed mean `<g>_Omega` (the impermeability defect).
pub fn project_divergence_rhs(g: &ScalarField, chi_in: &ScalarField) -> Result<(ScalarField, f64)> {
    g.check_compatible(chi_in, "project_divergence_rhs")?;
    let mut weighted = 0.0;
    let mut weight = 0.0;
    for (v, c) in g.data().iter().zip(chi_in.data()) {
        weighted += v * c;
        weight += c;
    }
    if weight <= 0.0 {
        return Err(Error::Geometry("tumor region is empty; cannot balance the flow".into()));
    }
    let mean = weighted / weight;
    let grid = g.grid();
    let mut data: Vec<f64> = g
        .data()
        .iter()
        .zip(chi_in.data())
        .map(|(v, c)| c * (v - mean))
        .collect();
    // One more pass removes the rounding residue so the box sum is zero to
    // machine precision, as the Schur solve requires.
    let residue: f64 = data.iter().sum::<f64>() / weight;
    for (d, c) in data.iter_mut().zip(chi_in.data()) {
        *d -= c * residue;
    }
    Ok((ScalarField::from_vec(grid, data)?, mean.abs()))
}

/// Velocity and gauge-fixed pressure returned by [`PenalizedFlow::solve`].
pub struct FlowSolution {
    pub velocity: FaceField,
    /// Pressure with zero `chi_in`-weighted mean.
    pub sigma: ScalarField,
    pub outer_iterations: usize,
    /// `max |div v - g_tilde|` actually achieved.
    pub max_div_residual: f64,
}

/// Up to six off-diagonal couplings per face row.
#[derive(Clone, Copy)]
struct Stencil {
    diag: f64,
    nb: [(u32, f64); 6],
    n_nb: u8,
}

const IDENTITY_ROW: Stencil = Stencil { diag: 1.0, nb: [(0, 0.0); 6], n_nb: 0 };

/// Assembled momentum operator and penalization data for one geometry.
pub struct PenalizedFlow {
    grid: Grid,
    offsets: [usize; 3],
    total: usize,
    stencil: Vec<Stencil>,
    a_diag: Vec<f64>,
    b_momentum: Vec<f64>,
    chi_in: ScalarField,
    mu: f64,
    tol: f64,
    max_iter: usize,
}

impl PenalizedFlow {
    /// Assembles the operator for the current masks and penalization target
    /// `V` (sampled on faces).
    pub fn new(
        chi_in: &ScalarField,
        target: &FaceField,
        params: &ModelParams,
        numerics: &NumericsParams,
    ) -> Result<PenalizedFlow> {
        let grid = chi_in.grid();
        target.check_compatible(&grid, "penalization target")?;
        if !chi_in.is_finite() || chi_in.min() < -1e-12 || chi_in.max() > 1.0 + 1e-12 {
            return Err(Error::Geometry("chi_in must take values in [0, 1]".into()));
        }
        let dim = grid.dim();
        let n = grid.n();
        let h2 = grid.h() * grid.h();
        let drag = params.mu_tilde / params.permeability;
        let inv_eps = 1.0 / numerics.epsilon;
        let mu = params.mu;
        let mu_cell: Vec<f64> =
            chi_in.data().iter().map(|&c| mu * (c + numerics.eta)).collect();

        let mut offsets = [0usize; 3];
        let mut total = 0;
        for (a, off) in offsets.iter_mut().enumerate().take(dim) {
            *off = total;
            total += grid.face_count(a);
        }
        let mut stencil = vec![IDENTITY_ROW; total];
        let mut b_momentum = vec![0.0; total];

        for a in 0..dim {
            let fd = grid.face_dims(a);
            for k in 0..fd[2] {
                for j in 0..fd[1] {
                    for i in 0..fd[0] {
                        let p = [i, j, k];
                        if p[a] == 0 || p[a] == n {
                            continue; // wall face: identity row, velocity 0
                        }
                        let flat = offsets[a] + grid.face_index(a, i, j, k);
                        let mut cl = p;
                        cl[a] -= 1;
                        let chi_face =
                            0.5 * (chi_in.at(cl[0], cl[1], cl[2]) + chi_in.at(p[0], p[1], p[2]));
                        let chi_out = (1.0 - chi_face).clamp(0.0, 1.0);
                        let mut row = Stencil { diag: drag + inv_eps * chi_out, ..IDENTITY_ROW };
                        b_momentum[flat] = inv_eps * chi_out * target.at(a, i, j, k);

                        if mu > 0.0 {
                            for b2 in 0..dim {
                                for dir in [-1isize, 1] {
                                    let q_along = p[b2] as isize + dir;
                                    if b2 == a {
                                        // Coupling along the component axis:
                                        // coefficient at the cell between the
                                        // two faces.
                                        let mut cc = p;
                                        cc[a] = if dir == -1 { p[a] - 1 } else { p[a] };
                                        let m = mu_cell[grid.cell_index(cc[0], cc[1], cc[2])];
                                        row.diag += m / h2;
                                        let qa = q_along as usize;
                                        if q_along >= 1 && qa <= n - 1 {
                                            let mut q = p;
                                            q[a] = qa;
                                            row.nb[row.n_nb as usize] = (
                                                (offsets[a] + grid.face_index(a, q[0], q[1], q[2]))
                                                    as u32,
                                                -m / h2,
                                            );
                                            row.n_nb += 1;
                                        }
                                    } else {
                                        // Tangential coupling: coefficient
                                        // averaged over the cells around the
                                        // shared edge.
                                        let edge = if dir == 1 { p[b2] + 1 } else { p[b2] };
                                        let mut msum = 0.0;
                                        let mut mcount = 0.0;
                                        for ca in [p[a] - 1, p[a]] {
                                            for cb_off in 0..2isize {
                                                let cb = edge as isize - 1 + cb_off;
                                                if cb < 0 || cb as usize > n - 1 {
                                                    continue;
                                                }
                                                let mut cc = p;
                                                cc[a] = ca;
                                                cc[b2] = cb as usize;
                                                msum += mu_cell
                                                    [grid.cell_index(cc[0], cc[1], cc[2])];
                                                mcount += 1.0;
                                            }
                                        }
                                        let m = msum / mcount;
                                        if q_along >= 0 && (q_along as usize) <= n - 1 {
                                            row.diag += m / h2;
                                            let mut q = p;
                                            q[b2] = q_along as usize;
                                            row.nb[row.n_nb as usize] = (
                                                (offsets[a] + grid.face_index(a, q[0], q[1], q[2]))
                                                    as u32,
                                                -m / h2,
                                            );
                                            row.n_nb += 1;
                                        } else {
                                            // No-slip mirror ghost across the wall.
                                            row.diag += 2.0 * m / h2;
                                        }
                                    }
                                }
                            }
                        }
                        stencil[flat] = row;
                    }
                }
            }
        }

        let a_diag = stencil.iter().map(|s| s.diag).collect();
        Ok(PenalizedFlow {
            grid,
            offsets,
            total,
            stencil,
            a_diag,
            b_momentum,
            chi_in: chi_in.clone(),
            mu,
            tol: numerics.tol,
            max_iter: numerics.max_iter,
        })
    }

    fn apply_a(&self, x: &[f64], y: &mut [f64]) {
        for (f, st) in self.stencil.iter().enumerate() {
            let mut acc = st.diag * x[f];
            for t in 0..st.n_nb as usize {
                let (q, c) = st.nb[t];
                acc += c * x[q as usize];
            }
            y[f] = acc;
        }
    }

    /// Applies `A^-1`: a diagonal solve for Darcy, an inner CG for Brinkman.
    fn solve_momentum(&self, rhs: &[f64], x: &mut [f64]) -> Result<()> {
        if self.mu == 0.0 {
            for (i, r) in rhs.iter().enumerate() {
                x[i] = r / self.a_diag[i];
            }
            return Ok(());
        }
        let op = (self.total, |v: &[f64], out: &mut [f64]| self.apply_a(v, out));
        conjugate_gradient(
            &op,
            rhs,
            x,
            Some(&self.a_diag),
            CgOptions { tol_rel: INNER_TOL_REL, tol_abs: 0.0, max_iter: self.max_iter },
        )?;
        Ok(())
    }

    fn divergence_flat(&self, v: &[f64], out: &mut [f64]) {
        let g = &self.grid;
        let [nx, ny, nz] = g.cell_dims();
        let h = g.h();
        let mut idx = 0;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let mut acc = 0.0;
                    for a in 0..g.dim() {
                        let mut hi = [i, j, k];
                        hi[a] += 1;
                        acc += v[self.offsets[a] + g.face_index(a, hi[0], hi[1], hi[2])]
                            - v[self.offsets[a] + g.face_index(a, i, j, k)];
                    }
                    out[idx] = acc / h;
                    idx += 1;
                }
            }
        }
    }

    fn gradient_flat(&self, s: &[f64], out: &mut [f64]) {
        let g = &self.grid;
        let n = g.n();
        let h = g.h();
        out.fill(0.0);
        for a in 0..g.dim() {
            let fd = g.face_dims(a);
            let mut idx = 0;
            for k in 0..fd[2] {
                for j in 0..fd[1] {
                    for i in 0..fd[0] {
                        let p = [i, j, k];
                        if p[a] > 0 && p[a] < n {
                            let mut cl = p;
                            cl[a] -= 1;
                            out[self.offsets[a] + idx] = (s[g.cell_index(p[0], p[1], p[2])]
                                - s[g.cell_index(cl[0], cl[1], cl[2])])
                                / h;
                        }
                        idx += 1;
                    }
                }
            }
        }
    }

    /// Solves for velocity and pressure given a compatible divergence source.
    pub fn solve(&self, g_tilde: &ScalarField) -> Result<FlowSolution> {
        g_tilde.check_compatible(&self.chi_in, "divergence source")?;
        let grid = self.grid;
        let n_cells = grid.cell_count();
        let remove_mean = |s: &mut [f64]| {
            let m = s.iter().sum::<f64>() / n_cells as f64;
            for v in s.iter_mut() {
                *v -= m;
            }
        };

        // Schur right-hand side: g_tilde - D A^-1 b, projected onto zero mean.
        let mut av_b = vec![0.0; self.total];
        self.solve_momentum(&self.b_momentum, &mut av_b)?;
        let mut rhs_s = vec![0.0; n_cells];
        self.divergence_flat(&av_b, &mut rhs_s);
        for (r, g) in rhs_s.iter_mut().zip(g_tilde.data()) {
            *r = g - *r;
        }
        remove_mean(&mut rhs_s);

        // Jacobi preconditioner for the Schur complement: diag(D diag(A)^-1 D^T).
        let h2 = grid.h() * grid.h();
        let n = grid.n();
        let mut precond = vec![0.0; n_cells];
        let [nx, ny, nz] = grid.cell_dims();
        let mut idx = 0;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let p = [i, j, k];
                    let mut acc = 0.0;
                    for a in 0..grid.dim() {
                        for lo in [0usize, 1] {
                            let mut f = p;
                            f[a] += lo;
                            if f[a] == 0 || f[a] == n {
                                continue; // wall face carries no unknown
                            }
                            let flat = self.offsets[a] + grid.face_index(a, f[0], f[1], f[2]);
                            acc += 1.0 / (h2 * self.a_diag[flat]);
                        }
                    }
                    precond[idx] = acc;
                    idx += 1;
                }
            }
        }

        // Outer CG on the Schur complement, projecting out constants.
        let schur_err = std::cell::RefCell::new(None::<Error>);
        let grad_buf = std::cell::RefCell::new(vec![0.0; self.total]);
        let ainv_buf = std::cell::RefCell::new(vec![0.0; self.total]);
        let op = (n_cells, |s: &[f64], out: &mut [f64]| {
            let mut gb = grad_buf.borrow_mut();
            let mut ab = ainv_buf.borrow_mut();
            self.gradient_flat(s, &mut gb);
            // G = -D^T, so S = D A^-1 D^T applied via the negated gradient.
            for v in gb.iter_mut() {
                *v = -*v;
            }
            if let Err(e) = self.solve_momentum(&gb, &mut ab) {
                *schur_err.borrow_mut() = Some(e);
                out.fill(0.0);
                return;
            }
            self.divergence_flat(&ab, out);
            let m = out.iter().sum::<f64>() / out.len() as f64;
            for v in out.iter_mut() {
                *v -= m;
            }
        });
        let mut sigma = vec![0.0; n_cells];
        let g_norm = norm2(g_tilde.data());
        let report = conjugate_gradient(
            &op,
            &rhs_s,
            &mut sigma,
            Some(&precond),
            CgOptions { tol_rel: self.tol, tol_abs: self.tol * g_norm, max_iter: self.max_iter },
        );
        if let Some(e) = schur_err.into_inner() {
            return Err(e);
        }
        let report = report?;

        // Recover the velocity: v = A^-1 (b - G sigma) = A^-1 (b + D^T sigma).
        let mut rhs_m = vec![0.0; self.total];
        self.gradient_flat(&sigma, &mut rhs_m);
        for (r, b) in rhs_m.iter_mut().zip(&self.b_momentum) {
            *r = b - *r;
        }
        let mut v_flat = vec![0.0; self.total];
        self.solve_momentum(&rhs_m, &mut v_flat)?;

        // Gauge: zero chi_in-weighted pressure mean.
        let weight: f64 = self.chi_in.data().iter().sum();
        let wmean: f64 = sigma
            .iter()
            .zip(self.chi_in.data())
            .map(|(s, c)| s * c)
            .sum::<f64>()
            / weight;
        for s in sigma.iter_mut() {
            *s -= wmean;
        }

        let mut velocity = FaceField::zeros(grid);
        for a in 0..grid.dim() {
            let count = grid.face_count(a);
            velocity
                .component_mut(a)
                .copy_from_slice(&v_flat[self.offsets[a]..self.offsets[a] + count]);
        }
        let mut div = vec![0.0; n_cells];
        self.divergence_flat(&v_flat, &mut div);
        let max_div_residual = div
            .iter()
            .zip(g_tilde.data())
            .map(|(d, g)| (d - g).abs())
            .fold(0.0_f64, f64::max);

        let sigma = ScalarField::from_vec(grid, sigma)?;
        if !velocity.is_finite() || !sigma.is_finite() {
            return Err(Error::NonFinite("flow solution".into()));
        }
        Ok(FlowSolution { velocity, sigma, outer_iterations: report.iterations, max_div_residual })
    }
}

/// Drag and viscous energy of a velocity field restricted to the tumor:
/// `((mu_tilde/K) sum chi_face v^2 h^d, mu sum chi_edge ((v_q - v_p)/h)^2 h^d)`.
/// Wall-ghost contributions are omitted; the masks vanish there anyway.
pub fn flow_energy(
    v: &FaceField,
    chi_in: &ScalarField,
    params: &ModelParams,
) -> Result<(f64, f64)> {
    let grid = v.grid();
    v.check_compatible(&chi_in.grid(), "flow_energy")?;
    let dim = grid.dim();
    let n = grid.n();
    let cell_vol = grid.cell_volume();
    let h2 = grid.h() * grid.h();
    let mut drag = 0.0;
    let mut visc = 0.0;
    for a in 0..dim {
        let fd = grid.face_dims(a);
        for k in 0..fd[2] {
            for j in 0..fd[1] {
                for i in 0..fd[0] {
                    let p = [i, j, k];
                    if p[a] == 0 || p[a] == n {
                        continue;
                    }
                    let mut cl = p;
                    cl[a] -= 1;
                    let chi_face =
                        0.5 * (chi_in.at(cl[0], cl[1], cl[2]) + chi_in.at(p[0], p[1], p[2]));
                    let vf = v.at(a, p[0], p[1], p[2]);
                    drag += chi_face * vf * vf;
                    // Forward couplings only, so each pair is counted once.
                    for b2 in 0..dim {
                        let mut q = p;
                        q[b2] += 1;
                        let valid = if b2 == a { q[a] <= n - 1 } else { q[b2] <= n - 1 };
                        if !valid {
                            continue;
                        }
                        let chi_edge = if b2 == a {
                            chi_in.at(p[0], p[1], p[2])
                        } else {
                            let edge = p[b2] + 1;
                            let mut sum = 0.0;
                            let mut cnt = 0.0;
                            for ca in [p[a] - 1, p[a]] {
                                for cb_off in 0..2isize {
                                    let cb = edge as isize - 1 + cb_off;
                                    if cb < 0 || cb as usize > n - 1 {
                                        continue;
                                    }
                                    let mut cc = p;
                                    cc[a] = ca;
                                    cc[b2] = cb as usize;
                                    sum += chi_in.at(cc[0], cc[1], cc[2]);
                                    cnt += 1.0;
                                }
                            }
                            sum / cnt
                        };
                        let dv = v.at(a, q[0], q[1], q[2]) - vf;
                        visc += chi_edge * dv * dv / h2;
                    }
                }
            }
        }
    }
    Ok((params.mu_tilde / params.permeability * drag * cell_vol, params.mu * visc * cell_vol))
}

/// Floor below which the level-set gradient on the band counts as degenerate.
const NORMAL_FLOOR: f64 = 0.1;

/// Squared normal slip across the interface, `J = int |(v - V) . n|^2 dS`,
/// assembled as a volume integral against the surface delta with the normal
/// `grad phi / |grad phi|` evaluated at cell centers. The penalty estimate
/// predicts `J <= c * epsilon`.
pub fn boundary_flux_defect(
    v: &FaceField,
    target: &FaceField,
    phi: &ScalarField,
    delta_gamma: &ScalarField,
) -> Result<f64> {
    let grid = phi.grid();
    v.check_compatible(&grid, "boundary_flux_defect velocity")?;
    target.check_compatible(&grid, "boundary_flux_defect target")?;
    phi.check_compatible(delta_gamma, "boundary_flux_defect masks")?;
    let [nx, ny, nz] = grid.cell_dims();
    let cell_vol = grid.cell_volume();
    let mut sum = 0.0;
    let mut idx = 0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let weight = delta_gamma.data()[idx];
                idx += 1;
                if weight <= 0.0 {
                    continue;
                }
                let grad = crate::geometry::grad_at(phi, i, j, k);
                let mag = (grad[0] * grad[0] + grad[1] * grad[1] + grad[2] * grad[2]).sqrt();
                if mag < NORMAL_FLOOR {
                    return Err(Error::Geometry(format!(
                        "level-set gradient {mag:.3e} degenerate on the interface band"
                    )));
                }
                let vc = v.at_cell(i, j, k);
                let tc = target.at_cell(i, j, k);
                let slip = ((vc[0] - tc[0]) * grad[0]
                    + (vc[1] - tc[1]) * grad[1]
                    + (vc[2] - tc[2]) * grad[2])
                    / mag;
                sum += slip * slip * weight * cell_vol;
            }
        }
    }
    if !sum.is_finite() {
        return Err(Error::NonFinite("boundary flux defect".into()));
    }
    Ok(sum)
}
