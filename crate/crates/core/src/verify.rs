//! Numerical verification: weak-form residuals and the study drivers.
//!
//! The solver is checked in four independent ways:
//!
//! * weak residuals: a saved trajectory is plugged into the integral
//!   identities a weak solution must satisfy, tested against randomized
//!   compactly supported bump functions; residuals must shrink under
//!   simultaneous space and time refinement,
//! * parameter sweeps: the penalty defect `J(eps)` must scale linearly in
//!   the penalization strength, and the Brinkman solutions must converge to
//!   the Darcy reference as the viscosity vanishes with uniformly bounded
//!   energy,
//! * a manufactured periodic Darcy problem with a known smooth pressure,
//!   isolating the pressure discretization from boundaries and masks,
//! * a geometry-only volume-conservation study for the level-set transport
//!   under divergence-free motion.
//!
//! All randomness flows through a caller-supplied seed, so every study is
//! reproducible bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::flow::{boundary_flux_defect, flow_energy};
use crate::geometry::{
    advect_levelset, geometry_masks, region_volume, reinitialize, sdf_ball, DomainMotion,
    VelocityField,
};
use crate::grid::{FaceField, Grid, ScalarField};
use crate::kinetics::source_at;
use crate::linsolve::{conjugate_gradient, CgOptions};
use crate::params::ModelParams;
use crate::snapshot::{params_hash, Snapshot};

/// Trapezoid quadrature in time needs at least this many snapshots.
pub const MIN_SNAPSHOTS: usize = 16;

/// Sanity ceiling on a single trajectory's normalized residuals. The
/// rigorous check is the refinement study; this bound just catches gross
/// inconsistencies when verifying one run in isolation.
pub const RESIDUAL_SANITY: f64 = 0.05;

/// Smallest test-function radius, in cells.
const MIN_RADIUS_CELLS: f64 = 3.0;

/// The six integral identities a weak solution satisfies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeakIdentity {
    TransportP,
    TransportQ,
    TransportD,
    Darcy,
    Nutrient,
    Drug,
}

pub const ALL_IDENTITIES: [WeakIdentity; 6] = [
    WeakIdentity::TransportP,
    WeakIdentity::TransportQ,
    WeakIdentity::TransportD,
    WeakIdentity::Darcy,
    WeakIdentity::Nutrient,
    WeakIdentity::Drug,
];

impl WeakIdentity {
    pub fn name(&self) -> &'static str {
        match self {
            WeakIdentity::TransportP => "transport_p",
            WeakIdentity::TransportQ => "transport_q",
            WeakIdentity::TransportD => "transport_d",
            WeakIdentity::Darcy => "darcy",
            WeakIdentity::Nutrient => "nutrient",
            WeakIdentity::Drug => "drug",
        }
    }

    fn index(&self) -> usize {
        ALL_IDENTITIES.iter().position(|w| w == self).unwrap()
    }
}

/// One-dimensional smooth bump, 1 at the origin, vanishing outside `|s| < 1`
/// with all derivatives.
fn bump1d(s: f64) -> f64 {
    if s * s >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    }
}

/// Derivative of [`bump1d`].
fn bump1d_deriv(s: f64) -> f64 {
    if s * s >= 1.0 {
        0.0
    } else {
        let one_minus = 1.0 - s * s;
        bump1d(s) * (-2.0 * s / (one_minus * one_minus))
    }
}

/// Randomized space-time test function: a tensor-product bump in space times
/// a quadratic polynomial in time that vanishes at the final time.
#[derive(Clone, Debug, PartialEq)]
pub struct TestFunction {
    pub center: [f64; 3],
    pub radius: f64,
    pub amplitude: f64,
    /// Temporal factor `psi(t) = (1 - t/T)(a0 + a1 t/T)`.
    pub a0: f64,
    pub a1: f64,
    pub t_final: f64,
    /// Support cells must satisfy `phi <= -margin` at every snapshot.
    pub margin: f64,
    /// Component direction for the vector (momentum) identity.
    pub axis: usize,
}

impl TestFunction {
    /// Spatial factor (amplitude included).
    pub fn value(&self, x: [f64; 3]) -> f64 {
        let mut b = self.amplitude;
        for a in 0..3 {
            b *= bump1d((x[a] - self.center[a]) / self.radius);
        }
        b
    }

    /// Spatial gradient (amplitude included).
    pub fn gradient(&self, x: [f64; 3]) -> [f64; 3] {
        let s = [0, 1, 2].map(|a| (x[a] - self.center[a]) / self.radius);
        let b = s.map(bump1d);
        let mut out = [0.0; 3];
        for a in 0..3 {
            let mut g = self.amplitude * bump1d_deriv(s[a]) / self.radius;
            for o in 0..3 {
                if o != a {
                    g *= b[o];
                }
            }
            out[a] = g;
        }
        out
    }

    pub fn psi(&self, t: f64) -> f64 {
        let s = t / self.t_final;
        (1.0 - s) * (self.a0 + self.a1 * s)
    }

    pub fn psi_dot(&self, t: f64) -> f64 {
        let s = t / self.t_final;
        (-(self.a0 + self.a1 * s) + (1.0 - s) * self.a1) / self.t_final
    }

    /// True when every cell of the spatial support satisfies
    /// `phi <= -margin`.
    pub fn support_ok(&self, phi: &ScalarField) -> bool {
        let g = phi.grid();
        let h = g.h();
        let dims = g.cell_dims();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            if dims[a] == 1 {
                continue;
            }
            let l = ((self.center[a] - self.radius) / h - 0.5).floor().max(0.0) as usize;
            let r = ((self.center[a] + self.radius) / h + 0.5).ceil() as usize;
            lo[a] = l.min(dims[a] - 1);
            hi[a] = r.min(dims[a] - 1);
        }
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    let x = g.cell_center(i, j, k);
                    if self.value(x) != 0.0 && phi.at(i, j, k) > -self.margin {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// Pointwise maximum of the level set over a trajectory; a conservative
/// "worst case" field for placing supports that stay inside at all times.
fn phi_envelope(snaps: &[Snapshot]) -> ScalarField {
    let mut m = snaps[0].phi.clone();
    for s in &snaps[1..] {
        for (dst, src) in m.data_mut().iter_mut().zip(s.phi.data()) {
            *dst = dst.max(*src);
        }
    }
    m
}

/// Draws `count` test functions whose supports stay `2 * delta` inside the
/// interface at every snapshot. Deterministic for a fixed seed.
pub fn make_test_functions(
    snaps: &[Snapshot],
    delta: f64,
    seed: u64,
    count: usize,
) -> Result<Vec<TestFunction>> {
    if snaps.is_empty() {
        return Err(Error::Verify("cannot build test functions for an empty trajectory".into()));
    }
    let grid = snaps[0].grid;
    let t_final = snaps[snaps.len() - 1].t;
    if !(t_final > 0.0) {
        return Err(Error::Verify(format!("final snapshot time {t_final} must be positive")));
    }
    let h = grid.h();
    let margin = 2.0 * delta;
    let r_min = MIN_RADIUS_CELLS * h;
    let dim = grid.dim();
    // The support is the cube of half-width r, whose corners sit at distance
    // r * sqrt(dim); a signed distance function is 1-Lipschitz, so the cube
    // stays at depth `margin` when r <= (-phi(center) - margin) / sqrt(dim).
    // The estimate is verified cell-exactly below and shrunk if needed.
    let lip = (dim as f64).sqrt();

    let envelope = phi_envelope(snaps);
    let dims = grid.cell_dims();
    let mut candidates = Vec::new();
    let mut idx = 0;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                if envelope.data()[idx] <= -(margin + r_min * lip) {
                    candidates.push((i, j, k, envelope.data()[idx]));
                }
                idx += 1;
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::Verify(
            "no cell is deep enough inside the domain to anchor a test-function support".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for fn_index in 0..count {
        let mut placed = None;
        'centers: for _ in 0..64 {
            let (i, j, k, env) = candidates[rng.gen_range(0..candidates.len())];
            let base = grid.cell_center(i, j, k);
            let mut center = [0.0; 3];
            for a in 0..dim {
                center[a] = base[a] + rng.gen_range(-0.25..0.25) * h;
            }
            if dim == 3 {
                center[2] = base[2] + rng.gen_range(-0.25..0.25) * h;
            }
            let r_cap = (-env - margin) / lip;
            if r_cap < r_min {
                continue;
            }
            // Bias toward the largest radius the depth allows: wider bumps
            // are better resolved, keeping quadrature error subordinate to
            // the scheme error the residuals are meant to expose.
            let r_lo = (0.7 * r_cap).max(r_min);
            let mut tf = TestFunction {
                center,
                radius: rng.gen_range(r_lo..=r_cap),
                amplitude: rng.gen_range(0.5..2.0),
                a0: rng.gen_range(0.5..1.5),
                a1: rng.gen_range(-1.0..1.0),
                t_final,
                margin,
                axis: fn_index % dim,
            };
            // The radius cap assumed a Lipschitz level set; verify against
            // the actual envelope and shrink if the estimate was optimistic.
            for _ in 0..40 {
                if tf.support_ok(&envelope) {
                    placed = Some(tf);
                    break 'centers;
                }
                tf.radius *= 0.8;
                if tf.radius < r_min {
                    break;
                }
            }
        }
        match placed {
            Some(tf) => out.push(tf),
            None => {
                return Err(Error::Verify(format!(
                    "could not place test function {fn_index}: domain too small for supports"
                )))
            }
        }
    }
    Ok(out)
}

/// Test-function samples restricted to the support: cell values, gradients
/// and interior-face gradient components for the diffusion pairing.
struct BumpOnGrid {
    cells: Vec<BumpCell>,
    faces: Vec<BumpFace>,
}

struct BumpCell {
    idx: usize,
    pos: [usize; 3],
    b: f64,
    grad: [f64; 3],
}

struct BumpFace {
    lo: usize,
    hi: usize,
    /// Component `axis` of the (unit-amplitude-relative) gradient at the face center.
    dphi: f64,
}

impl BumpOnGrid {
    fn build(tf: &TestFunction, grid: Grid) -> BumpOnGrid {
        let dims = grid.cell_dims();
        let mut cells = Vec::new();
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let x = grid.cell_center(i, j, k);
                    let b = tf.value(x);
                    if b != 0.0 {
                        cells.push(BumpCell {
                            idx: grid.cell_index(i, j, k),
                            pos: [i, j, k],
                            b,
                            grad: tf.gradient(x),
                        });
                    }
                }
            }
        }
        let mut faces = Vec::new();
        for axis in 0..grid.dim() {
            let fd = grid.face_dims(axis);
            for k in 0..fd[2] {
                for j in 0..fd[1] {
                    for i in 0..fd[0] {
                        let p = [i, j, k];
                        if p[axis] == 0 || p[axis] == grid.n() {
                            continue;
                        }
                        let x = grid.face_center(axis, i, j, k);
                        let dphi = tf.gradient(x)[axis];
                        if dphi != 0.0 {
                            let mut lo = p;
                            lo[axis] -= 1;
                            faces.push(BumpFace {
                                lo: grid.cell_index(lo[0], lo[1], lo[2]),
                                hi: grid.cell_index(p[0], p[1], p[2]),
                                dphi,
                            });
                        }
                    }
                }
            }
        }
        BumpOnGrid { cells, faces }
    }
}

/// Spatial integrals of one snapshot against one test function's bump.
#[derive(Clone, Copy, Default)]
struct SnapSums {
    p_b: f64,
    p_flux: f64,
    gp_b: f64,
    q_b: f64,
    q_flux: f64,
    gq_b: f64,
    d_b: f64,
    d_flux: f64,
    gd_b: f64,
    c_b: f64,
    c_diff: f64,
    c_react: f64,
    w_b: f64,
    w_diff: f64,
    w_react: f64,
    sigma_div: f64,
    v_axis_b: f64,
    visc: f64,
}

fn snapshot_sums(snap: &Snapshot, bump: &BumpOnGrid, axis: usize, m: &ModelParams) -> SnapSums {
    let grid = snap.grid;
    let vol = grid.cell_volume();
    let h = grid.h();
    let dims = grid.cell_dims();
    let mut s = SnapSums::default();
    for cell in &bump.cells {
        let idx = cell.idx;
        let [i, j, k] = cell.pos;
        let p = snap.p.data()[idx];
        let q = snap.q.data()[idx];
        let d = snap.d.data()[idx];
        let c = snap.c.data()[idx];
        let w = snap.w.data()[idx];
        let v = snap.velocity.at_cell(i, j, k);
        let v_dot_grad = v[0] * cell.grad[0] + v[1] * cell.grad[1] + v[2] * cell.grad[2];
        let src = source_at(p, q, d, c, w, m);

        s.p_b += p * cell.b;
        s.p_flux += p * v_dot_grad;
        s.gp_b += src[0] * cell.b;
        s.q_b += q * cell.b;
        s.q_flux += q * v_dot_grad;
        s.gq_b += src[1] * cell.b;
        s.d_b += d * cell.b;
        s.d_flux += d * v_dot_grad;
        s.gd_b += src[2] * cell.b;

        let rate_c = m.k_1 * m.k_p * c * p + m.k_2 * m.k_q * (m.c_bar - c) * q;
        s.c_b += c * cell.b;
        s.c_react += rate_c * c * cell.b;
        let rate_w = (m.mu_1 * p + m.mu_2 * q) * m.drug_g(w);
        s.w_b += w * cell.b;
        s.w_react += rate_w * w * cell.b;

        s.sigma_div += snap.sigma.data()[idx] * cell.grad[axis];
        s.v_axis_b += v[axis] * cell.b;
        if m.mu > 0.0 {
            // Central differences of the cell-averaged velocity component.
            for b2 in 0..grid.dim() {
                let pos = [i, j, k];
                let mut lo = pos;
                let mut hi = pos;
                let mut span = 0.0;
                if pos[b2] > 0 {
                    lo[b2] -= 1;
                    span += 1.0;
                }
                if pos[b2] + 1 < dims[b2] {
                    hi[b2] += 1;
                    span += 1.0;
                }
                if span > 0.0 {
                    let dv = (snap.velocity.at_cell(hi[0], hi[1], hi[2])[axis]
                        - snap.velocity.at_cell(lo[0], lo[1], lo[2])[axis])
                        / (span * h);
                    s.visc += dv * cell.grad[b2];
                }
            }
        }
    }
    s.p_b *= vol;
    s.p_flux *= vol;
    s.gp_b *= vol;
    s.q_b *= vol;
    s.q_flux *= vol;
    s.gq_b *= vol;
    s.d_b *= vol;
    s.d_flux *= vol;
    s.gd_b *= vol;
    s.c_b *= vol;
    s.c_react *= vol;
    s.w_b *= vol;
    s.w_react *= vol;
    s.sigma_div *= vol;
    s.v_axis_b *= vol;
    s.visc *= vol;

    // Face-gradient pairing for the diffusion terms.
    let mut c_diff = 0.0;
    let mut w_diff = 0.0;
    for f in &bump.faces {
        c_diff += (snap.c.data()[f.hi] - snap.c.data()[f.lo]) / h * f.dphi;
        w_diff += (snap.w.data()[f.hi] - snap.w.data()[f.lo]) / h * f.dphi;
    }
    s.c_diff = c_diff * vol;
    s.w_diff = w_diff * vol;
    s
}

/// Trapezoid weights for possibly nonuniform snapshot times.
fn trapezoid_weights(times: &[f64]) -> Vec<f64> {
    let n = times.len();
    let mut w = vec![0.0; n];
    for k in 0..n - 1 {
        let half = 0.5 * (times[k + 1] - times[k]);
        w[k] += half;
        w[k + 1] += half;
    }
    w
}

fn normalized_residual(terms: &[f64]) -> f64 {
    let total: f64 = terms.iter().sum();
    let scale: f64 = terms.iter().map(|t| t.abs()).sum();
    total.abs() / scale.max(1e-30)
}

fn check_trajectory(snaps: &[Snapshot]) -> Result<()> {
    if snaps.len() < MIN_SNAPSHOTS {
        return Err(Error::Verify(format!(
            "need at least {MIN_SNAPSHOTS} snapshots for the time quadrature, got {}",
            snaps.len()
        )));
    }
    let grid = snaps[0].grid;
    let hash = snaps[0].params_hash;
    for (k, s) in snaps.iter().enumerate() {
        if s.grid != grid {
            return Err(Error::Verify(format!("snapshot {k} is on a different grid")));
        }
        if s.params_hash != hash {
            return Err(Error::Verify(format!(
                "snapshot {k} was produced with different parameters"
            )));
        }
        if k > 0 && !(s.t > snaps[k - 1].t) {
            return Err(Error::Verify(format!("snapshot times not increasing at index {k}")));
        }
    }
    Ok(())
}

/// Residuals of all six identities for each test function, as rows indexed
/// like [`ALL_IDENTITIES`].
pub fn weak_residuals_all(
    snaps: &[Snapshot],
    testfns: &[TestFunction],
    model: &ModelParams,
) -> Result<Vec<[f64; 6]>> {
    check_trajectory(snaps)?;
    let grid = snaps[0].grid;
    let t_final = snaps[snaps.len() - 1].t;
    let times: Vec<f64> = snaps.iter().map(|s| s.t).collect();
    let weights = trapezoid_weights(&times);

    let mut out = Vec::with_capacity(testfns.len());
    for (fi, tf) in testfns.iter().enumerate() {
        if (tf.t_final - t_final).abs() > 1e-9 * t_final.max(1.0) {
            return Err(Error::Verify(format!(
                "test function {fi} was built for horizon {}, trajectory ends at {t_final}",
                tf.t_final
            )));
        }
        for (k, s) in snaps.iter().enumerate() {
            if !tf.support_ok(&s.phi) {
                return Err(Error::Verify(format!(
                    "support of test function {fi} leaves the domain at snapshot {k}"
                )));
            }
        }
        let bump = BumpOnGrid::build(tf, grid);
        let sums: Vec<SnapSums> =
            snaps.iter().map(|s| snapshot_sums(s, &bump, tf.axis, model)).collect();

        // Time-quadrature accumulators per identity term.
        let mut acc = [[0.0_f64; 4]; 6];
        for (k, s) in sums.iter().enumerate() {
            let psi = tf.psi(times[k]);
            let psid = tf.psi_dot(times[k]);
            let w = weights[k];
            for (row, (x_b, x_flux, gx_b)) in [
                (s.p_b, s.p_flux, s.gp_b),
                (s.q_b, s.q_flux, s.gq_b),
                (s.d_b, s.d_flux, s.gd_b),
            ]
            .into_iter()
            .enumerate()
            {
                acc[row][1] += w * psid * x_b;
                acc[row][2] += w * psi * x_flux;
                acc[row][3] += w * psi * gx_b;
            }
            acc[3][1] += w * psi * s.sigma_div;
            acc[3][2] -= w * psi * model.mu_tilde / model.permeability * s.v_axis_b;
            acc[3][3] -= w * psi * model.mu * s.visc;
            acc[4][1] += w * psid * s.c_b;
            acc[4][2] -= w * psi * model.nu_1 * s.c_diff;
            acc[4][3] -= w * psi * s.c_react;
            acc[5][1] += w * psid * s.w_b;
            acc[5][2] -= w * psi * model.nu_2 * s.w_diff;
            acc[5][3] -= w * psi * s.w_react;
        }
        // Initial-data terms (the temporal factor vanishes at t = T).
        let psi0 = tf.psi(times[0]);
        acc[0][0] = psi0 * sums[0].p_b;
        acc[1][0] = psi0 * sums[0].q_b;
        acc[2][0] = psi0 * sums[0].d_b;
        acc[4][0] = psi0 * sums[0].c_b;
        acc[5][0] = psi0 * sums[0].w_b;

        let mut row = [0.0; 6];
        for (w, r) in ALL_IDENTITIES.iter().zip(row.iter_mut()) {
            *r = normalized_residual(&acc[w.index()]);
        }
        out.push(row);
    }
    Ok(out)
}

/// Residuals of one identity, one entry per test function.
pub fn weak_residuals(
    snaps: &[Snapshot],
    testfns: &[TestFunction],
    which: WeakIdentity,
    model: &ModelParams,
) -> Result<Vec<f64>> {
    let all = weak_residuals_all(snaps, testfns, model)?;
    Ok(all.into_iter().map(|row| row[which.index()]).collect())
}

/// Named series of a study metric over the study parameter.
#[derive(Clone, Debug)]
pub struct MetricSeries {
    pub name: String,
    pub values: Vec<f64>,
}

/// Outcome of a parameter sweep or refinement study.
#[derive(Clone, Debug)]
pub struct StudyReport {
    pub label: String,
    pub parameter_name: String,
    pub parameters: Vec<f64>,
    pub metrics: Vec<MetricSeries>,
    pub slopes: Vec<(String, f64)>,
    pub passed: bool,
    pub notes: Vec<String>,
}

impl StudyReport {
    /// CSV table: one row per parameter value.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.parameter_name);
        for m in &self.metrics {
            out.push(',');
            out.push_str(&m.name);
        }
        out.push('\n');
        for (i, p) in self.parameters.iter().enumerate() {
            out.push_str(&format!("{p:.16e}"));
            for m in &self.metrics {
                out.push_str(&format!(",{:.16e}", m.values[i]));
            }
            out.push('\n');
        }
        out
    }

    /// Human-readable multi-line summary.
    pub fn summary(&self) -> String {
        let mut out = format!("study {}: {}\n", self.label, if self.passed { "PASS" } else { "FAIL" });
        for (i, p) in self.parameters.iter().enumerate() {
            let mut line = format!("  {} = {p:.3e}:", self.parameter_name);
            for m in &self.metrics {
                line.push_str(&format!(" {} = {:.6e}", m.name, m.values[i]));
            }
            out.push_str(&line);
            out.push('\n');
        }
        for (name, slope) in &self.slopes {
            out.push_str(&format!("  slope[{name}] = {slope:.3}\n"));
        }
        for note in &self.notes {
            out.push_str(&format!("  note: {note}\n"));
        }
        out
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Verify("slope fit needs at least two matched points".into()));
    }
    let mut lx = Vec::with_capacity(xs.len());
    let mut ly = Vec::with_capacity(ys.len());
    for (&x, &y) in xs.iter().zip(ys) {
        if !(x > 0.0) || !(y > 0.0) || !x.is_finite() || !y.is_finite() {
            return Err(Error::Verify(format!(
                "slope fit needs positive finite data, got ({x}, {y})"
            )));
        }
        lx.push(x.ln());
        ly.push(y.ln());
    }
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in lx.iter().zip(&ly) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    if den == 0.0 {
        return Err(Error::Verify("slope fit is degenerate: all parameters equal".into()));
    }
    Ok(num / den)
}

/// Prescribed-motion velocity sampled on the staggered faces.
fn motion_faces(grid: Grid, motion: &DomainMotion, t: f64) -> FaceField {
    if motion.is_zero() {
        FaceField::zeros(grid)
    } else {
        FaceField::from_fn(grid, |a, x| motion.velocity(t, x)[a])
    }
}

/// Runs one configuration to its final time without keeping snapshots and
/// returns the simulation in its final state (flow fields refreshed).
fn run_to_end(cfg: &Config) -> Result<crate::scheme::Simulation> {
    let mut sim = cfg.build()?;
    sim.run(cfg.time.t_end, cfg.time.t_end, |_, _| Ok(()))?;
    Ok(sim)
}

/// Penalty-scaling study: runs the scenario at each `eps` and measures the
/// squared normal slip `J` on the final interface. Passes when `J` is
/// monotone nonincreasing with a log-log slope of at least 0.8.
pub fn eps_sweep(cfg: &Config, eps_list: &[f64]) -> Result<StudyReport> {
    if eps_list.len() < 4 {
        return Err(Error::Verify(format!(
            "epsilon sweep needs >= 4 values, got {}",
            eps_list.len()
        )));
    }
    for pair in eps_list.windows(2) {
        if !(pair[1] < pair[0]) {
            return Err(Error::Verify("epsilon list must be strictly descending".into()));
        }
    }
    if !(eps_list[eps_list.len() - 1] > 0.0) {
        return Err(Error::Verify("epsilon values must be positive".into()));
    }

    let mut defects = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let mut run_cfg = cfg.clone();
        run_cfg.numerics.epsilon = eps;
        let sim = run_to_end(&run_cfg)?;
        let grid = sim.grid();
        let masks = geometry_masks(&sim.state.phi, sim.numerics().delta(grid.h()))?;
        let target = motion_faces(grid, sim.motion(), sim.state.t);
        let j = boundary_flux_defect(&sim.state.velocity, &target, &sim.state.phi, &masks.delta_gamma)?;
        if !(j > 0.0) {
            return Err(Error::Verify(format!(
                "boundary flux defect vanished at eps = {eps}; the sweep is uninformative"
            )));
        }
        defects.push(j);
    }
    let monotone =
        defects.windows(2).all(|pair| pair[1] <= pair[0] * (1.0 + 1e-10));
    let slope = fit_log_slope(eps_list, &defects)?;
    let passed = monotone && slope >= 0.8;
    let mut notes = Vec::new();
    if !monotone {
        notes.push("J(eps) is not monotone nonincreasing".into());
    }
    Ok(StudyReport {
        label: "penalty scaling".into(),
        parameter_name: "epsilon".into(),
        parameters: eps_list.to_vec(),
        metrics: vec![MetricSeries { name: "J".into(), values: defects }],
        slopes: vec![("J".into(), slope)],
        passed,
        notes,
    })
}

/// Weighted cell-centered L2 distance between two face fields.
fn velocity_l2_diff(a: &FaceField, b: &FaceField, weight: &ScalarField) -> f64 {
    let g = weight.grid();
    let dims = g.cell_dims();
    let vol = g.cell_volume();
    let mut sum = 0.0;
    let mut idx = 0;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let va = a.at_cell(i, j, k);
                let vb = b.at_cell(i, j, k);
                let mut d2 = 0.0;
                for ax in 0..3 {
                    let d = va[ax] - vb[ax];
                    d2 += d * d;
                }
                sum += weight.data()[idx] * d2 * vol;
                idx += 1;
            }
        }
    }
    sum.sqrt()
}

/// Weighted L2 distance between two scalar fields.
fn scalar_l2_diff(a: &ScalarField, b: &ScalarField, weight: &ScalarField) -> f64 {
    let vol = weight.grid().cell_volume();
    let mut sum = 0.0;
    for ((x, y), w) in a.data().iter().zip(b.data()).zip(weight.data()) {
        let d = x - y;
        sum += w * d * d * vol;
    }
    sum.sqrt()
}

/// Vanishing-viscosity study: identical runs at each viscosity, compared at
/// the final time against the zero-viscosity reference (the last entry).
/// Passes when the velocity difference is strictly decreasing, the final
/// difference is at most 10% of the first, and the flow energy stays within
/// a factor of 2 across the sweep.
pub fn mu_sweep(cfg: &Config, mu_list: &[f64]) -> Result<StudyReport> {
    if mu_list.len() < 2 {
        return Err(Error::Verify("viscosity sweep needs >= 2 values".into()));
    }
    for pair in mu_list.windows(2) {
        if !(pair[1] < pair[0]) {
            return Err(Error::Verify("viscosity list must be strictly descending".into()));
        }
    }
    if mu_list[mu_list.len() - 1] != 0.0 {
        return Err(Error::Verify("viscosity sweep must end at 0 (the limit reference)".into()));
    }

    struct RunResult {
        state: crate::scheme::State,
        energy: f64,
    }
    let mut runs = Vec::with_capacity(mu_list.len());
    for &mu in mu_list {
        let mut run_cfg = cfg.clone();
        run_cfg.model.mu = mu;
        let sim = run_to_end(&run_cfg)?;
        let masks = geometry_masks(&sim.state.phi, sim.numerics().delta(sim.grid().h()))?;
        let (drag, visc) = flow_energy(&sim.state.velocity, &masks.chi_in, sim.model())?;
        runs.push(RunResult { state: sim.state.clone(), energy: drag + visc });
    }

    let reference = &runs[runs.len() - 1];
    let ref_masks = geometry_masks(
        &reference.state.phi,
        cfg.numerics.delta(reference.state.phi.grid().h()),
    )?;
    let weight = &ref_masks.chi_in;

    let field_of = |s: &crate::scheme::State, name: &str| -> ScalarField {
        match name {
            "P" => s.p.clone(),
            "Q" => s.q.clone(),
            "C" => s.c.clone(),
            "W" => s.w.clone(),
            _ => s.d.clone(),
        }
    };
    let mut v_diff = Vec::new();
    let mut field_diffs: Vec<(String, Vec<f64>)> =
        ["P", "Q", "D", "C", "W"].iter().map(|n| (format!("{n}_diff"), Vec::new())).collect();
    let mut energies = Vec::new();
    for run in &runs {
        v_diff.push(velocity_l2_diff(&run.state.velocity, &reference.state.velocity, weight));
        for (name, series) in field_diffs.iter_mut() {
            let field = &name[..1];
            series.push(scalar_l2_diff(
                &field_of(&run.state, field),
                &field_of(&reference.state, field),
                weight,
            ));
        }
        energies.push(run.energy);
    }

    let nonzero = &v_diff[..v_diff.len() - 1];
    let strictly_decreasing = nonzero.windows(2).all(|p| p[1] < p[0]);
    let converged = nonzero[nonzero.len() - 1] <= 0.1 * nonzero[0];
    let e_min = energies.iter().cloned().fold(f64::INFINITY, f64::min);
    let e_max = energies.iter().cloned().fold(0.0_f64, f64::max);
    let energy_uniform = e_min > 0.0 && e_max / e_min < 2.0;
    let passed = strictly_decreasing && converged && energy_uniform;

    let slope = fit_log_slope(&mu_list[..mu_list.len() - 1], nonzero).unwrap_or(f64::NAN);
    let mut notes = Vec::new();
    if !strictly_decreasing {
        notes.push("velocity difference is not strictly decreasing in mu".into());
    }
    if !converged {
        notes.push("final velocity difference exceeds 10% of the first".into());
    }
    if !energy_uniform {
        notes.push(format!("flow energy varies by {:.2}x across the sweep", e_max / e_min));
    }

    let mut metrics = vec![MetricSeries { name: "v_diff".into(), values: v_diff }];
    for (name, series) in field_diffs {
        metrics.push(MetricSeries { name, values: series });
    }
    metrics.push(MetricSeries { name: "energy".into(), values: energies });
    Ok(StudyReport {
        label: "vanishing viscosity".into(),
        parameter_name: "mu".into(),
        parameters: mu_list.to_vec(),
        metrics,
        slopes: vec![("v_diff".into(), slope)],
        passed,
        notes,
    })
}

/// Space-time refinement study of the weak residuals. Each level doubles the
/// resolution and halves both the step cap and the snapshot cadence; test
/// functions are drawn once on the coarsest level and reused. The per-identity
/// metric is the root-mean-square residual over the test functions, and the
/// study passes when every identity's fitted order is at least 0.8.
pub fn refinement_study(cfg: &Config, levels: &[usize], count: usize) -> Result<StudyReport> {
    if levels.len() < 3 {
        return Err(Error::Verify(format!(
            "refinement study needs >= 3 levels, got {}",
            levels.len()
        )));
    }
    for pair in levels.windows(2) {
        if pair[1] != 2 * pair[0] {
            return Err(Error::Verify("refinement levels must double the resolution".into()));
        }
    }
    if count == 0 {
        return Err(Error::Verify("refinement study needs at least one test function".into()));
    }
    let base_dt = cfg.numerics.max_dt.ok_or_else(|| {
        Error::Verify("refinement study requires numerics.max_dt as the base time step".into())
    })?;
    let base_cadence = cfg.time.snapshot_cadence;

    let mut testfns: Option<Vec<TestFunction>> = None;
    let mut hs = Vec::with_capacity(levels.len());
    let mut per_level = Vec::with_capacity(levels.len());
    for (li, &n) in levels.iter().enumerate() {
        let scale = (1 << li) as f64;
        let mut run_cfg = cfg.clone();
        run_cfg.grid.n = n;
        run_cfg.numerics.max_dt = Some(base_dt / scale);
        run_cfg.time.snapshot_cadence = base_cadence / scale;
        let mut sim = run_cfg.build()?;
        let hash = params_hash(&run_cfg.model, &run_cfg.numerics);
        let mut snaps = Vec::new();
        sim.run(run_cfg.time.t_end, run_cfg.time.snapshot_cadence, |state, _| {
            snaps.push(Snapshot::from_state(state, hash));
            Ok(())
        })?;
        if testfns.is_none() {
            let delta = run_cfg.numerics.delta(sim.grid().h());
            testfns = Some(make_test_functions(&snaps, delta, cfg.time.seed, count)?);
        }
        let matrix = weak_residuals_all(&snaps, testfns.as_ref().unwrap(), &run_cfg.model)?;
        let mut rms = [0.0_f64; 6];
        for row in &matrix {
            for (acc, r) in rms.iter_mut().zip(row) {
                *acc += r * r;
            }
        }
        for acc in rms.iter_mut() {
            *acc = (*acc / matrix.len() as f64).sqrt();
        }
        hs.push(sim.grid().h());
        per_level.push(rms);
    }

    let mut metrics = Vec::new();
    let mut slopes = Vec::new();
    let mut passed = true;
    for (ii, ident) in ALL_IDENTITIES.iter().enumerate() {
        let series: Vec<f64> = per_level.iter().map(|rms| rms[ii]).collect();
        let slope = fit_log_slope(&hs, &series)?;
        passed &= slope >= 0.8;
        metrics.push(MetricSeries { name: ident.name().into(), values: series });
        slopes.push((ident.name().to_string(), slope));
    }
    Ok(StudyReport {
        label: "weak-residual refinement".into(),
        parameter_name: "h".into(),
        parameters: hs,
        metrics,
        slopes,
        passed,
        notes: vec![format!("{count} test functions, seed {}", cfg.time.seed)],
    })
}

/// Geometry-only volume-conservation study: the level set is advected by the
/// prescribed divergence-free motion, with no flow or transport coupling, and
/// the smoothed region volume at the final time is compared to the initial
/// volume. Passes when the relative error improves at first order and the
/// finest level is within 1%.
pub fn volume_conservation_study(cfg: &Config, levels: &[usize]) -> Result<StudyReport> {
    if levels.len() < 2 {
        return Err(Error::Verify("volume study needs >= 2 levels".into()));
    }
    let mut hs = Vec::new();
    let mut errors = Vec::new();
    for &n in levels {
        let grid = Grid::new(cfg.grid.d, cfg.grid.l, n)?;
        let motion = cfg.motion(&grid)?;
        let bound = motion.max_speed_bound();
        if !(bound > 0.0) {
            return Err(Error::Verify("volume study needs a nonzero domain motion".into()));
        }
        let initial = cfg.initial_ball(&grid)?;
        let mut phi = sdf_ball(grid, initial.center, initial.radius);
        let delta = cfg.numerics.delta(grid.h());
        let v0 = region_volume(&phi, delta)?;
        let dt0 = cfg.numerics.cfl * grid.h() / bound;
        let mut t = 0.0;
        let mut steps = 0usize;
        while t < cfg.time.t_end - 1e-12 {
            let dt = dt0.min(cfg.time.t_end - t);
            phi = advect_levelset(&phi, &motion, t, dt)?;
            steps += 1;
            if steps % cfg.numerics.reinit_every == 0 {
                phi = reinitialize(&phi);
            }
            t += dt;
        }
        let v_end = region_volume(&phi, delta)?;
        hs.push(grid.h());
        errors.push((v_end - v0).abs() / v0);
    }
    let slope = fit_log_slope(&hs, &errors)?;
    let finest = errors[errors.len() - 1];
    let passed = slope >= 1.0 && finest <= 0.01;
    Ok(StudyReport {
        label: "volume conservation".into(),
        parameter_name: "h".into(),
        parameters: hs,
        metrics: vec![MetricSeries { name: "volume_error_rel".into(), values: errors }],
        slopes: vec![("volume_error_rel".into(), slope)],
        passed,
        notes: Vec::new(),
    })
}

/// Manufactured periodic Darcy problem on the unit square: the exact pressure
/// `sigma* = cos(2 pi x) cos(2 pi y)` satisfies
/// `-(K/mu_tilde) lap sigma* = g` with `g = (K/mu_tilde) 8 pi^2 sigma*`.
/// Solving the discrete periodic problem at several resolutions isolates the
/// pressure discretization; the L2 error must converge at order >= 1.8.
pub fn darcy_mms_study(model: &ModelParams, levels: &[usize]) -> Result<StudyReport> {
    if levels.len() < 2 {
        return Err(Error::Verify("manufactured study needs >= 2 levels".into()));
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let mobility = model.permeability / model.mu_tilde;
    let mut hs = Vec::new();
    let mut errors = Vec::new();
    for &n in levels {
        if n < 8 {
            return Err(Error::Verify(format!("manufactured study needs n >= 8, got {n}")));
        }
        let h = 1.0 / n as f64;
        let cells = n * n;
        let exact: Vec<f64> = (0..cells)
            .map(|idx| {
                let i = idx % n;
                let j = idx / n;
                let x = (i as f64 + 0.5) * h;
                let y = (j as f64 + 0.5) * h;
                (two_pi * x).cos() * (two_pi * y).cos()
            })
            .collect();
        let mut b: Vec<f64> = exact.iter().map(|s| mobility * 8.0 * two_pi.powi(2) / 4.0 * s).collect();
        let mean = b.iter().sum::<f64>() / cells as f64;
        for v in b.iter_mut() {
            *v -= mean;
        }

        let apply = |x: &[f64], y: &mut [f64]| {
            for j in 0..n {
                let jm = (j + n - 1) % n;
                let jp = (j + 1) % n;
                for i in 0..n {
                    let im = (i + n - 1) % n;
                    let ip = (i + 1) % n;
                    let c = x[j * n + i];
                    y[j * n + i] = mobility
                        * (4.0 * c - x[j * n + im] - x[j * n + ip] - x[jm * n + i] - x[jp * n + i])
                        / (h * h);
                }
            }
            let m = y.iter().sum::<f64>() / cells as f64;
            for v in y.iter_mut() {
                *v -= m;
            }
        };
        let op = (cells, apply);
        let mut sigma = vec![0.0; cells];
        conjugate_gradient(
            &op,
            &b,
            &mut sigma,
            None,
            CgOptions { tol_rel: 1e-13, tol_abs: 0.0, max_iter: 100_000 },
        )?;
        let sigma_mean = sigma.iter().sum::<f64>() / cells as f64;
        let mut err2 = 0.0;
        for (s, e) in sigma.iter().zip(&exact) {
            let d = (s - sigma_mean) - e;
            err2 += d * d * h * h;
        }
        hs.push(h);
        errors.push(err2.sqrt());
    }
    let slope = fit_log_slope(&hs, &errors)?;
    let passed = slope >= 1.8;
    Ok(StudyReport {
        label: "manufactured periodic pressure".into(),
        parameter_name: "h".into(),
        parameters: hs,
        metrics: vec![MetricSeries { name: "pressure_l2_error".into(), values: errors }],
        slopes: vec![("pressure_l2_error".into(), slope)],
        passed,
        notes: Vec::new(),
    })
}

/// Verifies a saved trajectory against all six weak identities with seeded
/// test functions. Passes when every normalized residual is below the sanity
/// ceiling; the refinement study provides the sharper, order-based check.
pub fn verify_snapshots(
    snaps: &[Snapshot],
    model: &ModelParams,
    delta: f64,
    seed: u64,
    count: usize,
) -> Result<StudyReport> {
    let testfns = make_test_functions(snaps, delta, seed, count)?;
    let matrix = weak_residuals_all(snaps, &testfns, model)?;
    let mut metrics = Vec::new();
    let mut passed = true;
    let mut notes = Vec::new();
    for (ii, ident) in ALL_IDENTITIES.iter().enumerate() {
        let series: Vec<f64> = matrix.iter().map(|row| row[ii]).collect();
        let worst = series.iter().cloned().fold(0.0_f64, f64::max);
        if worst > RESIDUAL_SANITY {
            passed = false;
            notes.push(format!(
                "{} residual {worst:.3e} exceeds the sanity ceiling {RESIDUAL_SANITY}",
                ident.name()
            ));
        }
        metrics.push(MetricSeries { name: ident.name().into(), values: series });
    }
    Ok(StudyReport {
        label: "weak identities".into(),
        parameter_name: "testfn".into(),
        parameters: (0..matrix.len()).map(|i| i as f64).collect(),
        metrics,
        slopes: Vec::new(),
        passed,
        notes,
    })
}
