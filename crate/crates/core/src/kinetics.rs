//! Phase-exchange kinetics and the induced divergence constraint.
//!
//! With nutrient deficit `s = c_bar - C` and drug response `G(W)`:
//!
//! ```text
//! G_P = (k_b C - k_q s - k_a s) P + k_p C Q - i_1 G(W) P
//! G_Q = k_q s P - (k_p C + k_d s) Q - i_2 G(W) Q
//! G_D = k_a s P + k_d s Q - k_r D + i_1 G(W) P + i_2 G(W) Q
//! ```
//!
//! Every exchange term appears once with each sign, so the sum telescopes to
//! `G_P + G_Q + G_D = k_b C P - k_r D`: net volume is produced only by births
//! and removed only by clearance of dead material. The tissue velocity must
//! absorb exactly that net production, giving `div v = (k_b C P - k_r D) / rho_f`.

use crate::error::{Error, Result};
use crate::grid::ScalarField;
use crate::params::ModelParams;

/// Absolute slack on admissibility checks, relative to the field's scale.
const ADMISSIBLE_SLACK: f64 = 1e-10;

/// Source triple `(G_P, G_Q, G_D)` on the grid.
pub struct Sources {
    pub gp: ScalarField,
    pub gq: ScalarField,
    pub gd: ScalarField,
}

/// Pointwise sources for one admissible state. No validation; see
/// [`compute_sources`] for the checked field version.
#[inline]
pub fn source_at(p: f64, q: f64, d: f64, c: f64, w: f64, m: &ModelParams) -> [f64; 3] {
    let s = m.c_bar - c;
    let g = m.drug_g(w);
    let kill_p = m.i_1 * g * p;
    let kill_q = m.i_2 * g * q;
    let gp = (m.k_b * c - m.k_q * s - m.k_a * s) * p + m.k_p * c * q - kill_p;
    let gq = m.k_q * s * p - (m.k_p * c + m.k_d * s) * q - kill_q;
    let gd = m.k_a * s * p + m.k_d * s * q - m.k_r * d + kill_p + kill_q;
    [gp, gq, gd]
}

fn check_range(value: f64, lo: f64, hi: f64, scale: f64, what: &str) -> Result<f64> {
    let slack = ADMISSIBLE_SLACK * scale.max(1.0);
    if !value.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    if value < lo - slack || value > hi + slack {
        return Err(Error::Params(format!(
            "{what} = {value} outside admissible range [{lo}, {hi}] beyond slack {slack:.1e}"
        )));
    }
    Ok(value.clamp(lo, hi))
}

fn checked_state(
    p: f64,
    q: f64,
    d: f64,
    c: f64,
    w: f64,
    m: &ModelParams,
) -> Result<[f64; 5]> {
    Ok([
        check_range(p, 0.0, m.rho_f, m.rho_f, "P")?,
        check_range(q, 0.0, m.rho_f, m.rho_f, "Q")?,
        check_range(d, 0.0, m.rho_f, m.rho_f, "D")?,
        check_range(c, 0.0, m.c_bar, m.c_bar, "C")?,
        check_range(w, 0.0, f64::INFINITY, 1.0, "W")?,
    ])
}

/// Evaluates the source triple at every cell. Inputs must be admissible
/// (`0 <= P,Q,D <= rho_f`, `0 <= C <= c_bar`, `W >= 0`); values within
/// `1e-10 * scale` of a bound are clamped onto it, anything worse is an error.
pub fn compute_sources(
    p: &ScalarField,
    q: &ScalarField,
    d: &ScalarField,
    c: &ScalarField,
    w: &ScalarField,
    m: &ModelParams,
) -> Result<Sources> {
    for (other, name) in [(q, "Q"), (d, "D"), (c, "C"), (w, "W")] {
        p.check_compatible(other, name)?;
    }
    let grid = p.grid();
    let mut gp = ScalarField::zeros(grid);
    let mut gq = ScalarField::zeros(grid);
    let mut gd = ScalarField::zeros(grid);
    for idx in 0..grid.cell_count() {
        let [pv, qv, dv, cv, wv] = checked_state(
            p.data()[idx],
            q.data()[idx],
            d.data()[idx],
            c.data()[idx],
            w.data()[idx],
            m,
        )?;
        let [sp, sq, sd] = source_at(pv, qv, dv, cv, wv, m);
        gp.data_mut()[idx] = sp;
        gq.data_mut()[idx] = sq;
        gd.data_mut()[idx] = sd;
    }
    Ok(Sources { gp, gq, gd })
}

/// Divergence right side `g = (k_b C P - k_r D) / rho_f` of the constraint
/// `div v = g`, evaluated cellwise with the same admissibility checks.
pub fn divergence_rhs(
    p: &ScalarField,
    c: &ScalarField,
    d: &ScalarField,
    m: &ModelParams,
) -> Result<ScalarField> {
    p.check_compatible(c, "C")?;
    p.check_compatible(d, "D")?;
    let grid = p.grid();
    let mut g = ScalarField::zeros(grid);
    for idx in 0..grid.cell_count() {
        let pv = check_range(p.data()[idx], 0.0, m.rho_f, m.rho_f, "P")?;
        let cv = check_range(c.data()[idx], 0.0, m.c_bar, m.c_bar, "C")?;
        let dv = check_range(d.data()[idx], 0.0, m.rho_f, m.rho_f, "D")?;
        g.data_mut()[idx] = (m.k_b * cv * pv - m.k_r * dv) / m.rho_f;
    }
    Ok(g)
}
