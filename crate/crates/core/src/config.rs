//! Run configuration: a small TOML schema mapped onto the solver types.
//!
//! A config file has six sections. `[grid]`, `[time]` and `[initial]` are
//! required; `[model]`, `[numerics]` and `[motion]` fall back to defaults.
//! Unknown keys are rejected everywhere so a typo cannot silently revert a
//! parameter to its default.
//!
//! ```toml
//! [grid]
//! d = 2
//! n = 64
//!
//! [time]
//! t_end = 0.5
//! snapshot_cadence = 0.05
//!
//! [initial]
//! center = [0.5, 0.5]
//! radius = 0.25
//! alpha_p = 0.3
//! alpha_q = 0.2
//! alpha_d = 0.5
//! c0 = 0.5
//! w0 = 0.3
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DomainMotion;
use crate::grid::Grid;
use crate::params::{ModelParams, NumericsParams};
use crate::scheme::{InitialBall, Simulation};

/// `[grid]` section.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Spatial dimension, 2 or 3.
    pub d: usize,
    /// Cells per axis.
    pub n: usize,
    /// Box side length.
    #[serde(default = "default_length")]
    pub l: f64,
}

fn default_length() -> f64 {
    1.0
}

/// `[time]` section.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub t_end: f64,
    #[serde(default = "default_cadence")]
    pub snapshot_cadence: f64,
    /// Seed for randomized verification passes over this run's output.
    #[serde(default)]
    pub seed: u64,
}

fn default_cadence() -> f64 {
    0.05
}

/// `[motion]` section. `kind` selects the variant; the remaining keys are
/// read only by the variants that need them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionSection {
    /// One of `"zero"`, `"rigid_rotation"`, `"stream_vortex"`.
    pub kind: String,
    pub center: Vec<f64>,
    pub angular_rate: f64,
    pub amplitude: f64,
    pub r0: f64,
    pub r1: f64,
}

impl Default for MotionSection {
    fn default() -> MotionSection {
        MotionSection {
            kind: "zero".into(),
            center: Vec::new(),
            angular_rate: 0.0,
            amplitude: 0.0,
            r0: 0.0,
            r1: 0.0,
        }
    }
}

/// `[initial]` section: the seeded tissue ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub center: Vec<f64>,
    pub radius: f64,
    pub alpha_p: f64,
    pub alpha_q: f64,
    pub alpha_d: f64,
    pub c0: f64,
    pub w0: f64,
}

/// A complete run description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub grid: GridSection,
    pub time: TimeSection,
    #[serde(default)]
    pub model: ModelParams,
    #[serde(default)]
    pub numerics: NumericsParams,
    #[serde(default)]
    pub motion: MotionSection,
    pub initial: InitialSection,
}

/// Pads a config-file center (length `dim`) to the internal 3-vector.
fn pad_center(center: &[f64], dim: usize, what: &str) -> Result<[f64; 3]> {
    if center.len() != dim {
        return Err(Error::Params(format!(
            "{what} center has {} entries, expected {dim}",
            center.len()
        )));
    }
    let mut out = [0.0; 3];
    out[..dim].copy_from_slice(center);
    Ok(out)
}

impl Config {
    /// Parses TOML text; `origin` names the source in error messages.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Config> {
        toml::from_str(text)
            .map_err(|e| Error::Config { path: origin.to_string(), message: e.to_string() })
    }

    /// Reads and parses a config file.
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Config::from_toml_str(&text, &path.display().to_string())
    }

    /// Renders the config back to TOML.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config { path: "<render>".into(), message: e.to_string() })
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid.d, self.grid.l, self.grid.n)
    }

    /// Builds the domain motion, checking dimensions against the grid.
    pub fn motion(&self, grid: &Grid) -> Result<DomainMotion> {
        let m = &self.motion;
        let motion = match m.kind.as_str() {
            "zero" => DomainMotion::Zero,
            "rigid_rotation" => DomainMotion::RigidRotation {
                center: pad_center(&m.center, grid.dim(), "motion")?,
                angular_rate: m.angular_rate,
                r0: m.r0,
                r1: m.r1,
            },
            "stream_vortex" => DomainMotion::StreamVortex {
                center: pad_center(&m.center, grid.dim(), "motion")?,
                amplitude: m.amplitude,
                r0: m.r0,
                r1: m.r1,
            },
            other => {
                return Err(Error::Params(format!(
                    "unknown motion kind {other:?}; expected zero, rigid_rotation or stream_vortex"
                )))
            }
        };
        motion.validate(grid)?;
        Ok(motion)
    }

    pub fn initial_ball(&self, grid: &Grid) -> Result<InitialBall> {
        let i = &self.initial;
        Ok(InitialBall {
            center: pad_center(&i.center, grid.dim(), "initial")?,
            radius: i.radius,
            alpha_p: i.alpha_p,
            alpha_q: i.alpha_q,
            alpha_d: i.alpha_d,
            c0: i.c0,
            w0: i.w0,
        })
    }

    /// Constructs the simulation this config describes.
    pub fn build(&self) -> Result<Simulation> {
        let grid = self.grid()?;
        let motion = self.motion(&grid)?;
        let initial = self.initial_ball(&grid)?;
        Simulation::new(grid, self.model, self.numerics, motion, initial)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [grid]
        d = 2
        n = 32

        [time]
        t_end = 0.5

        [initial]
        center = [0.5, 0.5]
        radius = 0.25
        alpha_p = 0.3
        alpha_q = 0.2
        alpha_d = 0.5
        c0 = 0.5
        w0 = 0.3
    "#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = Config::from_toml_str(MINIMAL, "test").unwrap();
        assert_eq!(cfg.grid.l, 1.0);
        assert_eq!(cfg.time.snapshot_cadence, 0.05);
        assert_eq!(cfg.time.seed, 0);
        assert_eq!(cfg.model, ModelParams::default());
        assert_eq!(cfg.numerics, NumericsParams::default());
        assert_eq!(cfg.motion.kind, "zero");
        let grid = cfg.grid().unwrap();
        assert!(matches!(cfg.motion(&grid).unwrap(), DomainMotion::Zero));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("n = 32", "n = 32\nresolution = 7");
        let err = Config::from_toml_str(&bad, "test").unwrap_err();
        assert!(err.to_string().contains("resolution"), "{err}");

        let bad = format!("{MINIMAL}\n[extra]\nx = 1\n");
        assert!(Config::from_toml_str(&bad, "test").is_err());
    }

    #[test]
    fn motion_sections_build_the_right_variants() {
        let text = format!(
            "{MINIMAL}
            [motion]
            kind = \"rigid_rotation\"
            center = [0.5, 0.5]
            angular_rate = 0.5
            r0 = 0.35
            r1 = 0.46
        "
        );
        let cfg = Config::from_toml_str(&text, "test").unwrap();
        let grid = cfg.grid().unwrap();
        match cfg.motion(&grid).unwrap() {
            DomainMotion::RigidRotation { center, angular_rate, r0, r1 } => {
                assert_eq!(center, [0.5, 0.5, 0.0]);
                assert_eq!(angular_rate, 0.5);
                assert_eq!((r0, r1), (0.35, 0.46));
            }
            other => panic!("wrong variant {other:?}"),
        }

        let text = format!("{MINIMAL}\n[motion]\nkind = \"warp\"\n");
        let cfg = Config::from_toml_str(&text, "test").unwrap();
        assert!(cfg.motion(&grid).is_err());

        // A 2D run cannot take a 3-entry motion center.
        let text = format!(
            "{MINIMAL}
            [motion]
            kind = \"rigid_rotation\"
            center = [0.5, 0.5, 0.5]
            angular_rate = 0.5
            r0 = 0.35
            r1 = 0.46
        "
        );
        let cfg = Config::from_toml_str(&text, "test").unwrap();
        assert!(cfg.motion(&grid).is_err());
    }

    #[test]
    fn build_produces_a_runnable_simulation() {
        let cfg = Config::from_toml_str(MINIMAL, "test").unwrap();
        let mut sim = cfg.build().unwrap();
        sim.ensure_flow().unwrap();
        assert!(sim.stable_step() > 0.0);
    }

    #[test]
    fn render_parse_round_trip() {
        let mut cfg = Config::from_toml_str(MINIMAL, "test").unwrap();
        cfg.model.k_b = 0.0;
        cfg.model.drug_response = crate::params::DrugResponse::Saturating;
        cfg.numerics.max_dt = Some(0.0125);
        cfg.motion = MotionSection {
            kind: "stream_vortex".into(),
            center: vec![0.5, 0.5],
            angular_rate: 0.0,
            amplitude: 0.3,
            r0: 0.2,
            r1: 0.45,
        };
        let text = cfg.to_toml_string().unwrap();
        let back = Config::from_toml_str(&text, "round-trip").unwrap();
        assert_eq!(back, cfg);
    }

    proptest::proptest! {
        #[test]
        fn numeric_fields_round_trip(
            t_end in 1e-3f64..10.0,
            radius in 0.05f64..0.3,
            k_b in 0.0f64..5.0,
            tol in 1e-12f64..1e-3,
        ) {
            let mut cfg = Config::from_toml_str(MINIMAL, "test").unwrap();
            cfg.time.t_end = t_end;
            cfg.initial.radius = radius;
            cfg.model.k_b = k_b;
            cfg.numerics.tol = tol;
            let back = Config::from_toml_str(&cfg.to_toml_string().unwrap(), "rt").unwrap();
            proptest::prop_assert_eq!(back, cfg);
        }
    }
}
