//! Level-set geometry of the moving tumor region.
//!
//! The region `Omega_t = { phi(t, .) < 0 }` is tracked by a signed-distance
//! level set on cell centers, advected with a prescribed divergence-free
//! velocity `V` by a semi-Lagrangian step and periodically restored to a
//! distance function by fast sweeping. Interface-aware coefficients come from
//! the smoothed Heaviside `H_delta`:
//!
//! ```text
//! H_delta(phi) = 0                                      phi <= -delta
//!              = (1 + phi/delta + sin(pi phi/delta)/pi) / 2   |phi| < delta
//!              = 1                                      phi >= delta
//! ```
//!
//! so `chi_in = 1 - H_delta(phi)` is an exact 0/1 indicator outside a band of
//! half-width `delta` and the surface delta `d H/d phi * |grad phi|`
//! concentrates on that band with unit mass per unit interface length.

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};
use std::f64::consts::PI;

/// Prescribed domain velocity; implementors must be divergence-free and
/// compactly supported inside the box.
pub trait VelocityField {
    fn velocity(&self, t: f64, x: [f64; 3]) -> [f64; 3];
}

/// The built-in motion families. All are exactly divergence-free: the
/// rotation and vortex are tangential axisymmetric fields in the xy-plane,
/// windowed along z in 3D by a profile independent of x and y.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DomainMotion {
    Zero,
    /// Rigid rotation with rate `angular_rate` inside radius `r0`, blended to
    /// rest at `r1` by a smooth tangential-speed cutoff.
    RigidRotation {
        center: [f64; 3],
        angular_rate: f64,
        r0: f64,
        r1: f64,
    },
    /// Annular shear vortex: tangential speed `amplitude * sin^2(pi s)` with
    /// `s = (r - r0)/(r1 - r0)`, zero outside `(r0, r1)`.
    StreamVortex {
        center: [f64; 3],
        amplitude: f64,
        r0: f64,
        r1: f64,
    },
}

/// Cosine step: 1 for `s <= 0`, 0 for `s >= 1`, C1 in between.
fn cutoff(s: f64) -> f64 {
    if s <= 0.0 {
        1.0
    } else if s >= 1.0 {
        0.0
    } else {
        0.5 * (1.0 + (PI * s).cos())
    }
}

impl DomainMotion {
    /// Checks cutoff ordering and that the support fits inside the box.
    pub fn validate(&self, grid: &Grid) -> Result<()> {
        let (center, r0, r1) = match self {
            DomainMotion::Zero => return Ok(()),
            DomainMotion::RigidRotation { center, r0, r1, .. } => (center, *r0, *r1),
            DomainMotion::StreamVortex { center, r0, r1, .. } => (center, *r0, *r1),
        };
        if !(r0 > 0.0 && r1 > r0) {
            return Err(Error::Geometry(format!(
                "motion cutoff radii must satisfy 0 < r0 < r1, got r0={r0}, r1={r1}"
            )));
        }
        let length = grid.length();
        for a in 0..grid.dim() {
            if center[a] - r1 < 0.0 || center[a] + r1 > length {
                return Err(Error::Geometry(format!(
                    "motion support [{:.3}, {:.3}] along axis {a} leaves the box [0, {length}]",
                    center[a] - r1,
                    center[a] + r1
                )));
            }
        }
        Ok(())
    }

    /// Upper bound on `|V|`, used for sanity checks (`stable_dt` samples faces).
    pub fn max_speed_bound(&self) -> f64 {
        match self {
            DomainMotion::Zero => 0.0,
            DomainMotion::RigidRotation { angular_rate, r1, .. } => angular_rate.abs() * r1,
            DomainMotion::StreamVortex { amplitude, .. } => amplitude.abs(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, DomainMotion::Zero)
    }
}

impl VelocityField for DomainMotion {
    fn velocity(&self, _t: f64, x: [f64; 3]) -> [f64; 3] {
        match *self {
            DomainMotion::Zero => [0.0; 3],
            DomainMotion::RigidRotation { center, angular_rate, r0, r1 } => {
                let dx = x[0] - center[0];
                let dy = x[1] - center[1];
                let r = dx.hypot(dy);
                let w = cutoff((r - r0) / (r1 - r0));
                let wz = cutoff(((x[2] - center[2]).abs() - r0) / (r1 - r0));
                let s = angular_rate * w * wz;
                [-s * dy, s * dx, 0.0]
            }
            DomainMotion::StreamVortex { center, amplitude, r0, r1 } => {
                let dx = x[0] - center[0];
                let dy = x[1] - center[1];
                let r = dx.hypot(dy);
                if r <= r0 || r >= r1 {
                    return [0.0; 3];
                }
                let s = (r - r0) / (r1 - r0);
                let wz = cutoff(((x[2] - center[2]).abs() - r0) / (r1 - r0));
                let vt = amplitude * (PI * s).sin().powi(2) * wz;
                [-vt * dy / r, vt * dx / r, 0.0]
            }
        }
    }
}

/// Smoothed Heaviside `H_delta`.
#[inline]
pub fn smoothed_heaviside(phi: f64, delta: f64) -> f64 {
    if phi <= -delta {
        0.0
    } else if phi >= delta {
        1.0
    } else {
        let r = phi / delta;
        0.5 * (1.0 + r + (PI * r).sin() / PI)
    }
}

/// Derivative `d H_delta / d phi`.
#[inline]
pub fn smoothed_heaviside_deriv(phi: f64, delta: f64) -> f64 {
    if phi.abs() >= delta {
        0.0
    } else {
        (1.0 + (PI * phi / delta).cos()) / (2.0 * delta)
    }
}

/// Signed distance to the ball of given center and radius, sampled at cell
/// centers. Negative inside.
pub fn sdf_ball(grid: Grid, center: [f64; 3], radius: f64) -> ScalarField {
    let dim = grid.dim();
    ScalarField::from_fn(grid, |x| {
        let mut r2 = 0.0;
        for a in 0..dim {
            r2 += (x[a] - center[a]) * (x[a] - center[a]);
        }
        r2.sqrt() - radius
    })
}

/// Interface-aware weights derived from the level set.
pub struct Masks {
    /// `1 - H_delta(phi)`: 1 inside the tumor, 0 outside, smooth across the band.
    pub chi_in: ScalarField,
    /// Surface delta `H'(phi) |grad phi|`, integrating to the interface measure.
    pub delta_gamma: ScalarField,
    /// Band half-width used to build the masks.
    pub delta: f64,
}

/// Central-difference gradient at a cell (one-sided at walls).
pub fn grad_at(phi: &ScalarField, i: usize, j: usize, k: usize) -> [f64; 3] {
    let g = phi.grid();
    let [nx, ny, nz] = g.cell_dims();
    let dims = [nx, ny, nz];
    let mut out = [0.0; 3];
    for a in 0..g.dim() {
        let p = [i, j, k];
        let mut lo = p;
        let mut hi = p;
        let mut span = 0.0;
        if p[a] > 0 {
            lo[a] -= 1;
            span += 1.0;
        }
        if p[a] + 1 < dims[a] {
            hi[a] += 1;
            span += 1.0;
        }
        if span > 0.0 {
            out[a] = (phi.at(hi[0], hi[1], hi[2]) - phi.at(lo[0], lo[1], lo[2])) / (span * g.h());
        }
    }
    out
}

/// Central-difference gradient magnitude at a cell (one-sided at walls).
fn grad_magnitude(phi: &ScalarField, i: usize, j: usize, k: usize) -> f64 {
    let d = grad_at(phi, i, j, k);
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Builds `chi_in` and `delta_gamma` for band half-width `delta`.
pub fn geometry_masks(phi: &ScalarField, delta: f64) -> Result<Masks> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Geometry(format!("mask width delta must be > 0, got {delta}")));
    }
    let g = phi.grid();
    let [nx, ny, nz] = g.cell_dims();
    let mut chi_in = ScalarField::zeros(g);
    let mut delta_gamma = ScalarField::zeros(g);
    let mut idx = 0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = phi.data()[idx];
                chi_in.data_mut()[idx] = 1.0 - smoothed_heaviside(p, delta);
                let hp = smoothed_heaviside_deriv(p, delta);
                delta_gamma.data_mut()[idx] =
                    if hp > 0.0 { hp * grad_magnitude(phi, i, j, k) } else { 0.0 };
                idx += 1;
            }
        }
    }
    Ok(Masks { chi_in, delta_gamma, delta })
}

/// Smoothed volume of the region `{ phi < 0 }`.
pub fn region_volume(phi: &ScalarField, delta: f64) -> Result<f64> {
    let masks = geometry_masks(phi, delta)?;
    crate::grid::integrate_scalar(&masks.chi_in, None)
}

/// Multilinear interpolation of a cell-centered field at an arbitrary point.
/// Coordinates are clamped to the cell-center hull (constant extrapolation in
/// the boundary half-cell).
pub fn sample_multilinear(f: &ScalarField, x: [f64; 3]) -> f64 {
    let g = f.grid();
    let n = g.n();
    let h = g.h();
    let dim = g.dim();
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..dim {
        let u = x[a] / h - 0.5;
        let i = u.floor().clamp(0.0, (n - 2) as f64);
        base[a] = i as usize;
        frac[a] = (u - i).clamp(0.0, 1.0);
    }
    let kz = if dim == 3 { 2 } else { 1 };
    let mut value = 0.0;
    for dk in 0..kz {
        let wz = if dim == 3 {
            if dk == 0 {
                1.0 - frac[2]
            } else {
                frac[2]
            }
        } else {
            1.0
        };
        for dj in 0..2 {
            let wy = if dj == 0 { 1.0 - frac[1] } else { frac[1] };
            for di in 0..2 {
                let wx = if di == 0 { 1.0 - frac[0] } else { frac[0] };
                value += wx
                    * wy
                    * wz
                    * f.at(base[0] + di, base[1] + dj, if dim == 3 { base[2] + dk } else { 0 });
            }
        }
    }
    value
}

/// Semi-Lagrangian advection of the level set by `V` over one step: a
/// second-order (midpoint) backward characteristic trace followed by
/// multilinear interpolation. Errors if a foot point leaves the box.
pub fn advect_levelset(
    phi: &ScalarField,
    vel: &dyn VelocityField,
    t: f64,
    dt: f64,
) -> Result<ScalarField> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::TimeStep(format!("advection step must be > 0, got {dt}")));
    }
    let g = phi.grid();
    let [nx, ny, nz] = g.cell_dims();
    let length = g.length();
    let slop = 1e-9 * length;
    let mut out = ScalarField::zeros(g);
    let mut idx = 0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let x = g.cell_center(i, j, k);
                let v_end = vel.velocity(t + dt, x);
                let mut xm = x;
                for a in 0..g.dim() {
                    xm[a] -= 0.5 * dt * v_end[a];
                }
                let v_mid = vel.velocity(t + 0.5 * dt, xm);
                let mut xb = x;
                for a in 0..g.dim() {
                    xb[a] -= dt * v_mid[a];
                    if xb[a] < -slop || xb[a] > length + slop {
                        return Err(Error::Geometry(format!(
                            "characteristic foot point {:.4} left the box along axis {a}; \
                             the motion must vanish near the walls",
                            xb[a]
                        )));
                    }
                    xb[a] = xb[a].clamp(0.0, length);
                }
                out.data_mut()[idx] = sample_multilinear(phi, xb);
                idx += 1;
            }
        }
    }
    Ok(out)
}

/// Local eikonal update from per-axis upwind values (ascending order not
/// required; infinities allowed).
fn eikonal_solve(mut a: [f64; 3], dim: usize, h: f64) -> f64 {
    let vals = &mut a[..dim];
    vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut x = vals[0] + h;
    if dim >= 2 && x > vals[1] {
        let (a0, a1) = (vals[0], vals[1]);
        let disc = 2.0 * h * h - (a0 - a1) * (a0 - a1);
        if disc > 0.0 {
            x = 0.5 * (a0 + a1 + disc.sqrt());
        }
        if dim == 3 && x > vals[2] {
            let sum = vals[0] + vals[1] + vals[2];
            let sumsq = vals.iter().map(|v| v * v).sum::<f64>();
            let disc3 = sum * sum - 3.0 * (sumsq - h * h);
            if disc3 > 0.0 {
                x = (sum + disc3.sqrt()) / 3.0;
            }
        }
    }
    x
}

/// Restores `phi` to a signed distance function by fast sweeping, keeping the
/// zero crossing fixed through locally interpolated interface distances.
/// Returns the input unchanged when there is no sign change anywhere.
pub fn reinitialize(phi: &ScalarField) -> ScalarField {
    let g = phi.grid();
    let h = g.h();
    let dim = g.dim();
    let [nx, ny, nz] = g.cell_dims();
    let dims = [nx, ny, nz];
    let n_cells = g.cell_count();
    let positive: Vec<bool> = phi.data().iter().map(|&v| v >= 0.0).collect();
    let mut dist = vec![f64::INFINITY; n_cells];
    let mut frozen = vec![false; n_cells];

    // Seed cells adjacent to the interface with distances interpolated from
    // the zero crossings along each axis.
    let mut any_interface = false;
    let mut idx = 0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let v = phi.data()[idx];
                if v == 0.0 {
                    dist[idx] = 0.0;
                    frozen[idx] = true;
                    any_interface = true;
                    idx += 1;
                    continue;
                }
                let mut inv_sq = 0.0;
                let p = [i, j, k];
                for a in 0..dim {
                    let mut axis_dist = f64::INFINITY;
                    for dir in [-1isize, 1] {
                        let q = p[a] as isize + dir;
                        if q < 0 || q as usize >= dims[a] {
                            continue;
                        }
                        let mut np = p;
                        np[a] = q as usize;
                        let vn = phi.at(np[0], np[1], np[2]);
                        if (v > 0.0) != (vn > 0.0) {
                            // Linear zero crossing at theta*h from this cell.
                            let theta = v / (v - vn);
                            axis_dist = axis_dist.min(theta.abs() * h);
                        }
                    }
                    if axis_dist.is_finite() {
                        inv_sq += 1.0 / (axis_dist * axis_dist);
                    }
                }
                if inv_sq > 0.0 {
                    dist[idx] = 1.0 / inv_sq.sqrt();
                    frozen[idx] = true;
                    any_interface = true;
                }
                idx += 1;
            }
        }
    }
    if !any_interface {
        return phi.clone();
    }

    // Gauss-Seidel sweeps over all 2^dim axis orientations until stationary.
    let orders: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            let m = dims[a];
            (0..m).collect::<Vec<_>>()
        })
        .collect();
    for _round in 0..4 {
        let mut max_change = 0.0_f64;
        for sweep in 0..(1usize << dim) {
            let pick = |a: usize, pos: usize| -> usize {
                if sweep & (1 << a) == 0 {
                    orders[a][pos]
                } else {
                    orders[a][dims[a] - 1 - pos]
                }
            };
            for kk in 0..nz {
                let k = if dim == 3 { pick(2, kk) } else { kk };
                for jj in 0..ny {
                    let j = pick(1, jj);
                    for ii in 0..nx {
                        let i = pick(0, ii);
                        let idx = g.cell_index(i, j, k);
                        if frozen[idx] {
                            continue;
                        }
                        let p = [i, j, k];
                        let mut mins = [f64::INFINITY; 3];
                        for a in 0..dim {
                            for dir in [-1isize, 1] {
                                let q = p[a] as isize + dir;
                                if q < 0 || q as usize >= dims[a] {
                                    continue;
                                }
                                let mut np = p;
                                np[a] = q as usize;
                                mins[a] = mins[a].min(dist[g.cell_index(np[0], np[1], np[2])]);
                            }
                        }
                        let cand = eikonal_solve(mins, dim, h);
                        if cand < dist[idx] {
                            max_change = max_change.max(dist[idx] - cand);
                            dist[idx] = cand;
                        }
                    }
                }
            }
        }
        if max_change <= 1e-12 * h {
            break;
        }
    }

    let data = dist
        .iter()
        .zip(&positive)
        .map(|(&d, &pos)| if pos { d } else { -d })
        .collect();
    ScalarField::from_vec(g, data).expect("distance field has the grid's cell count")
}

/// Integrates the flow map `dX/dt = V(t, X)` with RK4 over `n_steps` substeps.
/// Errors if the trajectory leaves the box.
pub fn flow_map(
    vel: &dyn VelocityField,
    grid: &Grid,
    x0: [f64; 3],
    t0: f64,
    t1: f64,
    n_steps: usize,
) -> Result<[f64; 3]> {
    if n_steps == 0 {
        return Err(Error::TimeStep("flow_map needs at least one substep".into()));
    }
    let dim = grid.dim();
    let length = grid.length();
    let dt = (t1 - t0) / n_steps as f64;
    let mut x = x0;
    let mut t = t0;
    let add = |x: &[f64; 3], v: &[f64; 3], s: f64, dim: usize| -> [f64; 3] {
        let mut y = *x;
        for a in 0..dim {
            y[a] += s * v[a];
        }
        y
    };
    for _ in 0..n_steps {
        let k1 = vel.velocity(t, x);
        let k2 = vel.velocity(t + 0.5 * dt, add(&x, &k1, 0.5 * dt, dim));
        let k3 = vel.velocity(t + 0.5 * dt, add(&x, &k2, 0.5 * dt, dim));
        let k4 = vel.velocity(t + dt, add(&x, &k3, dt, dim));
        for a in 0..dim {
            x[a] += dt / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]);
            if x[a] < 0.0 || x[a] > length {
                return Err(Error::Geometry(format!(
                    "flow map left the box at {:.4} along axis {a}",
                    x[a]
                )));
            }
        }
        t += dt;
    }
    Ok(x)
}

/// Minimum clearance, in whole cells, between `{ phi < 0 }` and the box walls.
/// `None` when the interior is empty.
pub fn boundary_clearance_cells(phi: &ScalarField) -> Option<usize> {
    let g = phi.grid();
    let [nx, ny, nz] = g.cell_dims();
    let dims = [nx, ny, nz];
    let mut clearance: Option<usize> = None;
    let mut idx = 0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if phi.data()[idx] < 0.0 {
                    let p = [i, j, k];
                    let mut c = usize::MAX;
                    for a in 0..g.dim() {
                        c = c.min(p[a]).min(dims[a] - 1 - p[a]);
                    }
                    clearance = Some(clearance.map_or(c, |prev: usize| prev.min(c)));
                }
                idx += 1;
            }
        }
    }
    clearance
}

/// Range of `|grad phi|` over the band `|phi| < 3 delta`; `None` if the band
/// is empty. A healthy signed distance function stays within `[0.5, 2.0]`.
pub fn gradient_band_range(phi: &ScalarField, delta: f64) -> Option<(f64, f64)> {
    let g = phi.grid();
    let [nx, ny, nz] = g.cell_dims();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut idx = 0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if phi.data()[idx].abs() < 3.0 * delta {
                    let m = grad_magnitude(phi, i, j, k);
                    lo = lo.min(m);
                    hi = hi.max(m);
                }
                idx += 1;
            }
        }
    }
    (lo <= hi).then_some((lo, hi))
}
