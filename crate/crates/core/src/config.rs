//! Run configuration in TOML, with validation errors that carry field paths.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dyadic::{AdmissionRadius, GeometryScale};
use crate::error::{Error, Result};
use crate::grid::{Catalog, GridSpec};
use crate::params::{check_assumptions, ParameterSet};
use crate::pipeline::{Geometry, Mode};
use crate::quadrature::QuadOptions;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryBlock {
    pub x0: Vec<f64>,
    pub rho0: f64,
    pub beta: f64,
    pub alpha: f64,
    pub scale: GeometryScale,
    #[serde(default)]
    pub admission: AdmissionRadius,
    /// Cells per axis.
    pub grid: usize,
    /// The grid box is [-half_width, half_width]^n.
    pub half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionBlock {
    /// Functions u pushed through the decomposition and the sums.
    pub decompose: Vec<String>,
    /// Functions u for the off-diagonal reverse Holder sweep.
    pub reverse_holder: Vec<String>,
    pub f: String,
    /// Coefficient g; a(x,y) = (g(x) + g(y))/2.
    pub g: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionBlock {
    pub mode: Mode,
    /// 0 uses every available core.
    pub threads: usize,
    pub seed: u64,
    /// Gauss-Legendre points per axis and subdivision depth of the measure quadrature.
    pub quadrature_order: usize,
    pub quadrature_depth: usize,
    pub mc_samples: usize,
    /// Decomposition levels as multiples of the largest root average.
    pub lambda_factors: Vec<f64>,
    /// Level-set sweep, also as multiples of the largest root average.
    pub level_set_factors: Vec<f64>,
    /// Radii per doubling on the exit-radius lattice.
    pub radii_per_octave: usize,
    /// Replaces the ledger kappa when set.
    #[serde(default)]
    pub kappa: Option<f64>,
    /// Replaces M = 4 C_2 when set.
    #[serde(default)]
    pub m_big: Option<f64>,
    /// eps values for the dimensional constants.
    pub dim_eps: Vec<f64>,
    /// Cube side fractions and placements per axis for the ball-cube constant.
    pub cube_fractions: Vec<f64>,
    pub cube_positions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: String,
    pub formats: Vec<Format>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub params: ParameterSet,
    pub geometry: GeometryBlock,
    pub functions: FunctionBlock,
    pub execution: ExecutionBlock,
    pub output: OutputBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = Geometry::relaxed_default(2);
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            params: ParameterSet::config_s(),
            geometry: GeometryBlock {
                x0: g.x0,
                rho0: g.rho0,
                beta: g.beta,
                alpha: g.alpha,
                scale: g.scale,
                admission: g.admission,
                grid: 32,
                half_width: 1.0,
            },
            functions: FunctionBlock {
                decompose: vec!["bump".into(), "trig-random(7)".into()],
                reverse_holder: vec![
                    "bump".into(),
                    "power-cusp(0.5)".into(),
                    "trig-random(7)".into(),
                    "constant(1)".into(),
                    "affine(1,0.5)".into(),
                ],
                f: "bump".into(),
                g: "constant(0.5)".into(),
            },
            execution: ExecutionBlock {
                mode: Mode::Diagnostic,
                threads: 0,
                seed: 7,
                quadrature_order: 10,
                quadrature_depth: 12,
                mc_samples: 200_000,
                lambda_factors: vec![1.0, 1.1],
                level_set_factors: vec![1.0, 1.5, 2.0, 4.0],
                radii_per_octave: 2,
                kappa: None,
                m_big: None,
                dim_eps: vec![0.05, 0.1, 0.2],
                cube_fractions: vec![0.25, 0.5],
                cube_positions: 3,
            },
            output: OutputBlock {
                dir: "out".into(),
                formats: vec![Format::Json, Format::Csv],
            },
        }
    }
}

fn bad(path: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let path = e
                .span()
                .map(|s| format!("byte {}..{}", s.start, s.end))
                .unwrap_or_else(|| "<document>".into());
            bad(&path, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        RunConfig::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(bad(
                "schema_version",
                format!(
                    "expected {CONFIG_SCHEMA_VERSION}, got {}",
                    self.schema_version
                ),
            ));
        }
        let report = check_assumptions(&self.params);
        if let Some(g) = report.first_failure() {
            return Err(bad(&format!("params.{}", g.name), g.detail.clone()));
        }
        let n = self.params.n;
        let geo = &self.geometry;
        if geo.x0.len() != n {
            return Err(bad("geometry.x0", format!("needs {n} coordinates")));
        }
        if !(geo.rho0 > 0.0 && geo.rho0 <= 1.0) {
            return Err(bad("geometry.rho0", "must lie in (0, 1]"));
        }
        if !(geo.rho0 < geo.beta) {
            return Err(bad("geometry.beta", "must exceed rho0"));
        }
        if !(geo.beta < geo.alpha) {
            return Err(bad("geometry.alpha", "must exceed beta"));
        }
        if !(geo.alpha < 1.5 * geo.rho0) {
            return Err(bad("geometry.alpha", "must stay below 3 rho0 / 2"));
        }
        if let GeometryScale::Relaxed { chi, radius_cap } = geo.scale {
            if !(chi > 0.0) {
                return Err(bad("geometry.scale.chi", "must be positive"));
            }
            if !(radius_cap > 0.0 && radius_cap <= 0.5 * geo.rho0) {
                return Err(bad("geometry.scale.radius_cap", "must lie in (0, rho0/2]"));
            }
        }
        if geo.grid < 4 || !geo.grid.is_power_of_two() {
            return Err(bad("geometry.grid", "must be a power of two, at least 4"));
        }
        if !(geo.half_width > 0.0) {
            return Err(bad("geometry.half_width", "must be positive"));
        }
        let spec = self.grid_spec()?;
        let lvl = -spec.h.log2();
        if (lvl - lvl.round()).abs() > 1e-9 {
            return Err(bad(
                "geometry.half_width",
                "cell side must be a power of two",
            ));
        }
        if geo.alpha > geo.half_width {
            return Err(bad(
                "geometry.alpha",
                "B(x0, alpha) must fit in the grid box",
            ));
        }
        for (i, name) in self.functions.decompose.iter().enumerate() {
            Catalog::parse(name)
                .map_err(|e| bad(&format!("functions.decompose[{i}]"), e.to_string()))?;
        }
        for (i, name) in self.functions.reverse_holder.iter().enumerate() {
            Catalog::parse(name)
                .map_err(|e| bad(&format!("functions.reverse_holder[{i}]"), e.to_string()))?;
        }
        Catalog::parse(&self.functions.f).map_err(|e| bad("functions.f", e.to_string()))?;
        let g = Catalog::parse(&self.functions.g).map_err(|e| bad("functions.g", e.to_string()))?;
        let gs = g
            .sample(&spec)
            .map_err(|e| bad("functions.g", e.to_string()))?;
        if gs
            .values
            .iter()
            .any(|&v| v < 0.0 || v > self.params.m_coeff)
        {
            return Err(bad(
                "functions.g",
                format!("must take values in [0, {}]", self.params.m_coeff),
            ));
        }
        let ex = &self.execution;
        if ex.mode == Mode::Theorem && !geo.scale.is_faithful() {
            return Err(bad(
                "execution.mode",
                "theorem mode needs geometry.scale.kind = \"faithful\"",
            ));
        }
        if !(2..=40).contains(&ex.quadrature_order) {
            return Err(bad("execution.quadrature_order", "must lie in 2..=40"));
        }
        if !(1..=30).contains(&ex.quadrature_depth) {
            return Err(bad("execution.quadrature_depth", "must lie in 1..=30"));
        }
        if ex.mc_samples < 10_000 {
            return Err(bad("execution.mc_samples", "need at least 10000"));
        }
        if ex.lambda_factors.is_empty() || ex.lambda_factors.iter().any(|&v| !(v >= 1.0)) {
            return Err(bad("execution.lambda_factors", "need factors >= 1"));
        }
        if ex.level_set_factors.iter().any(|&v| !(v > 0.0)) {
            return Err(bad("execution.level_set_factors", "need positive factors"));
        }
        if ex.radii_per_octave == 0 {
            return Err(bad("execution.radii_per_octave", "must be positive"));
        }
        if let Some(k) = ex.kappa {
            if !(k > 0.0 && k <= 1.0) {
                return Err(bad("execution.kappa", "must lie in (0, 1]"));
            }
        }
        if let Some(m) = ex.m_big {
            if !(m >= 1.0) {
                return Err(bad("execution.m_big", "must be at least 1"));
            }
        }
        for (i, &e) in ex.dim_eps.iter().enumerate() {
            // only the measure enters, so the kernel must stay locally integrable
            if !(e > 0.0 && e * self.params.p < self.params.nf()) {
                return Err(bad(
                    &format!("execution.dim_eps[{i}]"),
                    "need 0 < eps < n/p",
                ));
            }
        }
        if ex.cube_fractions.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(bad("execution.cube_fractions", "need fractions in (0, 1]"));
        }
        if ex.cube_positions == 0 {
            return Err(bad("execution.cube_positions", "must be positive"));
        }
        if self.output.formats.is_empty() {
            return Err(bad("output.formats", "need at least one format"));
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::centered(self.params.n, self.geometry.half_width, self.geometry.grid)
    }

    pub fn geometry(&self) -> Geometry {
        let g = &self.geometry;
        Geometry {
            x0: g.x0.clone(),
            rho0: g.rho0,
            beta: g.beta,
            alpha: g.alpha,
            scale: g.scale,
            admission: g.admission,
        }
    }

    pub fn quad_options(&self) -> QuadOptions {
        QuadOptions {
            order: self.execution.quadrature_order,
            max_depth: self.execution.quadrature_depth,
            ..QuadOptions::default()
        }
    }

    pub fn with_grid(mut self, grid: usize) -> Self {
        self.geometry.grid = grid;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let mut cfg = RunConfig::default();
        cfg.geometry.alpha = 1.2;
        match cfg.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "geometry.alpha"),
            other => panic!("{other:?}"),
        }
        let mut cfg = RunConfig::default();
        cfg.execution.mode = Mode::Theorem;
        assert!(
            matches!(cfg.validate(), Err(Error::Config { path, .. }) if path == "execution.mode")
        );
        let mut cfg = RunConfig::default();
        cfg.functions.decompose.push("wobble".into());
        assert!(
            matches!(cfg.validate(), Err(Error::Config { path, .. }) if path == "functions.decompose[2]")
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = RunConfig::default()
            .to_toml_string()
            .replace("seed = 7", "seed = 7\nbogus = 1");
        assert!(matches!(
            RunConfig::from_toml_str(&text),
            Err(Error::Config { .. })
        ));
    }
}
