//! TFLO snapshot files: the on-disk state format.
//!
//! A snapshot is a single little-endian binary file:
//!
//! ```text
//! magic   4 bytes  "TFLO"
//! version u32      1
//! dim     u32      2 or 3
//! n       u64      cells per axis
//! length  f64      box side
//! t       f64      simulation time
//! params  u64      FNV-1a hash of the parameter sets
//! cells   7 * n^dim f64   P, Q, D, C, W, sigma, phi (x-fastest)
//! faces   per axis (n+1)-strided f64  staggered velocity components
//! check   u64      FNV-1a over everything above
//! ```
//!
//! Files are bit-exact records of solver state, so byte equality of two
//! snapshots means the runs that produced them were identical.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{FaceField, Grid, ScalarField};
use crate::params::{ModelParams, NumericsParams};
use crate::scheme::State;

pub const MAGIC: [u8; 4] = *b"TFLO";
pub const VERSION: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a 64-bit hash.
pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hash of the parameter sets stored in each snapshot header, used to detect
/// mixing snapshots from differently configured runs.
pub fn params_hash(model: &ModelParams, numerics: &NumericsParams) -> u64 {
    let mut bytes = Vec::with_capacity(256);
    for v in [
        model.k_b,
        model.k_q,
        model.k_a,
        model.k_p,
        model.k_d,
        model.k_r,
        model.k_1,
        model.k_2,
        model.nu_1,
        model.nu_2,
        model.mu_1,
        model.mu_2,
        model.i_1,
        model.i_2,
        model.c_bar,
        model.rho_f,
        model.mu_tilde,
        model.permeability,
        model.mu,
        model.k_half,
        numerics.cfl,
        numerics.epsilon,
        numerics.delta_over_h,
        numerics.eta,
        numerics.tol,
        numerics.max_dt.unwrap_or(f64::INFINITY),
    ] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.push(match model.drug_response {
        crate::params::DrugResponse::Linear => 0,
        crate::params::DrugResponse::Saturating => 1,
    });
    bytes.extend_from_slice(&(numerics.max_iter as u64).to_le_bytes());
    bytes.extend_from_slice(&(numerics.reinit_every as u64).to_le_bytes());
    bytes.push(numerics.renormalize_d as u8);
    fnv1a_64(&bytes)
}

/// One saved state.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub grid: Grid,
    pub t: f64,
    pub params_hash: u64,
    pub p: ScalarField,
    pub q: ScalarField,
    pub d: ScalarField,
    pub c: ScalarField,
    pub w: ScalarField,
    pub sigma: ScalarField,
    pub phi: ScalarField,
    pub velocity: FaceField,
}

impl Snapshot {
    pub fn from_state(state: &State, params_hash: u64) -> Snapshot {
        Snapshot {
            grid: state.p.grid(),
            t: state.t,
            params_hash,
            p: state.p.clone(),
            q: state.q.clone(),
            d: state.d.clone(),
            c: state.c.clone(),
            w: state.w.clone(),
            sigma: state.sigma.clone(),
            phi: state.phi.clone(),
            velocity: state.velocity.clone(),
        }
    }

    fn cell_fields(&self) -> [&ScalarField; 7] {
        [&self.p, &self.q, &self.d, &self.c, &self.w, &self.sigma, &self.phi]
    }

    /// Serializes the snapshot to bytes (checksum included).
    pub fn to_bytes(&self) -> Vec<u8> {
        let g = self.grid;
        let mut buf = Vec::with_capacity(64 + 8 * 8 * g.cell_count());
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(g.dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(g.n() as u64).to_le_bytes());
        buf.extend_from_slice(&g.length().to_le_bytes());
        buf.extend_from_slice(&self.t.to_le_bytes());
        buf.extend_from_slice(&self.params_hash.to_le_bytes());
        for field in self.cell_fields() {
            for v in field.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for axis in 0..g.dim() {
            for v in self.velocity.component(axis) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let check = fnv1a_64(&buf);
        buf.extend_from_slice(&check.to_le_bytes());
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut file = std::fs::File::create(path)?;
        file.write_all(&bytes)?;
        Ok(())
    }

    /// Decodes a snapshot, verifying magic, version, size and checksum.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Snapshot> {
        let fail = |message: String| Error::Snapshot { path: origin.to_string(), message };
        let header = 4 + 4 + 4 + 8 + 8 + 8 + 8;
        if bytes.len() < header {
            return Err(fail(format!("file of {} bytes is shorter than the header", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(fail("bad magic; not a TFLO snapshot".into()));
        }
        let mut r = Cursor { bytes, pos: 4 };
        let version = r.u32();
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}, expected {VERSION}")));
        }
        let dim = r.u32() as usize;
        let n = r.u64() as usize;
        let length = r.f64();
        let t = r.f64();
        let params_hash = r.u64();
        let grid = Grid::new(dim, length, n)
            .map_err(|e| fail(format!("header describes an invalid grid: {e}")))?;

        let mut expected = header + 7 * 8 * grid.cell_count();
        for axis in 0..dim {
            expected += 8 * grid.face_count(axis);
        }
        expected += 8;
        if bytes.len() != expected {
            return Err(fail(format!(
                "size mismatch: {} bytes on disk, {expected} expected for this header",
                bytes.len()
            )));
        }
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        let computed = fnv1a_64(&bytes[..bytes.len() - 8]);
        if stored != computed {
            return Err(fail(format!(
                "checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
            )));
        }

        let read_field = |r: &mut Cursor| -> Result<ScalarField> {
            let mut data = Vec::with_capacity(grid.cell_count());
            for _ in 0..grid.cell_count() {
                data.push(r.f64());
            }
            ScalarField::from_vec(grid, data)
        };
        let p = read_field(&mut r)?;
        let q = read_field(&mut r)?;
        let d = read_field(&mut r)?;
        let c = read_field(&mut r)?;
        let w = read_field(&mut r)?;
        let sigma = read_field(&mut r)?;
        let phi = read_field(&mut r)?;
        let mut velocity = FaceField::zeros(grid);
        for axis in 0..dim {
            for v in velocity.component_mut(axis) {
                *v = r.f64();
            }
        }
        Ok(Snapshot { grid, t, params_hash, p, q, d, c, w, sigma, phi, velocity })
    }

    pub fn load(path: &Path) -> Result<Snapshot> {
        let bytes = std::fs::read(path)?;
        Snapshot::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Byte reader over a validated buffer; bounds are checked up front by the
/// size test in `from_bytes`.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self) -> u32 {
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        v
    }

    fn u64(&mut self) -> u64 {
        let v = u64::from_le_bytes(self.bytes[self.pos..self.pos + 8].try_into().unwrap());
        self.pos += 8;
        v
    }

    fn f64(&mut self) -> f64 {
        let v = f64::from_le_bytes(self.bytes[self.pos..self.pos + 8].try_into().unwrap());
        self.pos += 8;
        v
    }
}

/// Canonical snapshot file name for index `k`.
pub fn snapshot_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("snap_{index:04}.tflo"))
}

/// All `.tflo` files in a directory, sorted by name.
pub fn list_snapshots(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "tflo") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(grid: Grid) -> Snapshot {
        // Deterministic but nonconstant data exercises every array slot.
        let wiggle = |k: usize, s: f64| ((k as f64) * s).sin();
        let field = |s: f64| {
            ScalarField::from_vec(grid, (0..grid.cell_count()).map(|k| wiggle(k, s)).collect())
                .unwrap()
        };
        let mut velocity = FaceField::zeros(grid);
        for axis in 0..grid.dim() {
            for (k, v) in velocity.component_mut(axis).iter_mut().enumerate() {
                *v = wiggle(k, 0.37 + axis as f64);
            }
        }
        Snapshot {
            grid,
            t: 0.75,
            params_hash: params_hash(&ModelParams::default(), &NumericsParams::default()),
            p: field(0.1),
            q: field(0.2),
            d: field(0.3),
            c: field(0.4),
            w: field(0.5),
            sigma: field(0.6),
            phi: field(0.7),
            velocity,
        }
    }

    #[test]
    fn fnv_reference_values() {
        // Standard FNV-1a test vectors.
        assert_eq!(fnv1a_64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a_64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let snap = sample(Grid::new(2, 1.0, 12).unwrap());
        let bytes = snap.to_bytes();
        let back = Snapshot::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.t, snap.t);
        assert_eq!(back.params_hash, snap.params_hash);
        assert_eq!(back.p.data(), snap.p.data());
        assert_eq!(back.phi.data(), snap.phi.data());
        assert_eq!(back.velocity.component(0), snap.velocity.component(0));
        assert_eq!(back.velocity.component(1), snap.velocity.component(1));
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn three_dimensional_round_trip() {
        let snap = sample(Grid::new(3, 2.0, 8).unwrap());
        let back = Snapshot::from_bytes(&snap.to_bytes(), "mem").unwrap();
        assert_eq!(back.grid.dim(), 3);
        assert_eq!(back.velocity.component(2), snap.velocity.component(2));
    }

    #[test]
    fn corruption_is_detected() {
        let snap = sample(Grid::new(2, 1.0, 8).unwrap());
        let good = snap.to_bytes();

        let mut flipped = good.clone();
        flipped[100] ^= 1;
        let err = Snapshot::from_bytes(&flipped, "mem").unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");

        let truncated = &good[..good.len() - 9];
        let err = Snapshot::from_bytes(truncated, "mem").unwrap_err();
        assert!(err.to_string().contains("size mismatch"), "{err}");

        let mut wrong_magic = good.clone();
        wrong_magic[0] = b'X';
        let err = Snapshot::from_bytes(&wrong_magic, "mem").unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let mut wrong_version = good;
        wrong_version[4] = 9;
        let err = Snapshot::from_bytes(&wrong_version, "mem").unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn params_hash_tracks_parameters() {
        let base = params_hash(&ModelParams::default(), &NumericsParams::default());
        let mut m = ModelParams::default();
        m.k_b = 2.0;
        assert_ne!(params_hash(&m, &NumericsParams::default()), base);
        let mut n = NumericsParams::default();
        n.renormalize_d = true;
        assert_ne!(params_hash(&ModelParams::default(), &n), base);
    }

    #[test]
    fn directory_listing_sorts_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let snap = sample(Grid::new(2, 1.0, 8).unwrap());
        for k in [3, 0, 11] {
            snap.save(&snapshot_path(dir.path(), k)).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "skip me").unwrap();
        let listed = list_snapshots(dir.path()).unwrap();
        let names: Vec<_> =
            listed.iter().map(|p| p.file_name().unwrap().to_str().unwrap()).collect();
        assert_eq!(names, ["snap_0000.tflo", "snap_0003.tflo", "snap_0011.tflo"]);
    }
}
