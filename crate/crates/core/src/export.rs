//! Snapshot export to visualization formats.
//!
//! Two formats are supported: legacy ASCII VTK structured points (readable by
//! ParaView and VisIt) and a flat CSV table. Cell-centered values are written
//! as VTK point data on the lattice of cell centers, so the file origin sits
//! at `h/2` and the spacing is `h`. All numbers carry 17 significant digits,
//! enough to reproduce every `f64` bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::snapshot::Snapshot;

/// Named cell fields of a snapshot, in export order.
fn fields(snap: &Snapshot) -> [(&'static str, &crate::grid::ScalarField); 7] {
    [
        ("P", &snap.p),
        ("Q", &snap.q),
        ("D", &snap.d),
        ("C", &snap.c),
        ("W", &snap.w),
        ("sigma", &snap.sigma),
        ("phi", &snap.phi),
    ]
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Renders the snapshot as a legacy ASCII VTK structured-points dataset.
pub fn render_vtk(snap: &Snapshot) -> String {
    let g = snap.grid;
    let d = g.cell_dims();
    let h = g.h();
    let half = 0.5 * h;
    let mut out = String::new();
    out.push_str("# vtk DataFile Version 3.0\n");
    let _ = writeln!(out, "tumorflow snapshot t={}", fmt_f64(snap.t));
    out.push_str("ASCII\nDATASET STRUCTURED_POINTS\n");
    let _ = writeln!(out, "DIMENSIONS {} {} {}", d[0], d[1], d[2]);
    let origin_z = if g.dim() == 3 { half } else { 0.0 };
    let _ = writeln!(out, "ORIGIN {} {} {}", fmt_f64(half), fmt_f64(half), fmt_f64(origin_z));
    let _ = writeln!(out, "SPACING {} {} {}", fmt_f64(h), fmt_f64(h), fmt_f64(h));
    let _ = writeln!(out, "POINT_DATA {}", g.cell_count());
    for (name, field) in fields(snap) {
        let _ = writeln!(out, "SCALARS {name} double 1");
        out.push_str("LOOKUP_TABLE default\n");
        for &v in field.data() {
            out.push_str(&fmt_f64(v));
            out.push('\n');
        }
    }
    out.push_str("VECTORS velocity double\n");
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                let v = snap.velocity.at_cell(i, j, k);
                let _ = writeln!(out, "{} {} {}", fmt_f64(v[0]), fmt_f64(v[1]), fmt_f64(v[2]));
            }
        }
    }
    out
}

/// Renders the snapshot as a CSV table with one row per cell.
pub fn render_csv(snap: &Snapshot) -> String {
    let g = snap.grid;
    let d = g.cell_dims();
    let mut out = String::new();
    if g.dim() == 3 {
        out.push_str("x,y,z,P,Q,D,C,W,sigma,phi,vx,vy,vz\n");
    } else {
        out.push_str("x,y,P,Q,D,C,W,sigma,phi,vx,vy\n");
    }
    let named = fields(snap);
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                let x = g.cell_center(i, j, k);
                let idx = g.cell_index(i, j, k);
                let mut cols = Vec::with_capacity(13);
                cols.push(fmt_f64(x[0]));
                cols.push(fmt_f64(x[1]));
                if g.dim() == 3 {
                    cols.push(fmt_f64(x[2]));
                }
                for (_, field) in named {
                    cols.push(fmt_f64(field.data()[idx]));
                }
                let v = snap.velocity.at_cell(i, j, k);
                cols.push(fmt_f64(v[0]));
                cols.push(fmt_f64(v[1]));
                if g.dim() == 3 {
                    cols.push(fmt_f64(v[2]));
                }
                out.push_str(&cols.join(","));
                out.push('\n');
            }
        }
    }
    out
}

pub fn save_vtk(snap: &Snapshot, path: &Path) -> Result<()> {
    std::fs::write(path, render_vtk(snap))?;
    Ok(())
}

pub fn save_csv(snap: &Snapshot, path: &Path) -> Result<()> {
    std::fs::write(path, render_csv(snap))?;
    Ok(())
}
