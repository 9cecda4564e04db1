//! Experiment configuration: a TOML file with `[section]` headers and
//! `key = value` entries. Unknown keys are rejected; every physical
//! quantity is range-checked before any solve.

use serde::Deserialize;
use std::path::{Path, PathBuf};

use simlmc::field::CovarianceKernel;
use simlmc::material::MeanElasticity;
use simlmc::mesh::{build_plate_hierarchy, load_mesh_hierarchy, MeshHierarchy};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub geometry: GeometryConfig,
    pub load: LoadConfig,
    pub material: MaterialConfig,
    pub mlmc: MlmcConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    /// "plate" (built-in nested plate) or "mesh" (load `mesh_dir`).
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default = "default_width")]
    pub width: f64,
    #[serde(default = "default_height")]
    pub height: f64,
    #[serde(default = "default_nx0")]
    pub nx0: usize,
    #[serde(default = "default_ny0")]
    pub ny0: usize,
    #[serde(default = "default_levels")]
    pub levels: usize,
    pub mesh_dir: Option<PathBuf>,
}

fn default_kind() -> String {
    "plate".into()
}
fn default_width() -> f64 {
    7.0
}
fn default_height() -> f64 {
    21.7
}
fn default_nx0() -> usize {
    2
}
fn default_ny0() -> usize {
    6
}
fn default_levels() -> usize {
    3
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadConfig {
    /// Resultant of the top traction, N.
    pub resultant: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialConfig {
    #[serde(rename = "E1")]
    pub e1: Option<f64>,
    #[serde(rename = "E2")]
    pub e2: Option<f64>,
    pub nu21: Option<f64>,
    #[serde(rename = "G12")]
    pub g12: Option<f64>,
    /// Literal 3x3 elasticity matrix, row major; alternative to the
    /// engineering constants.
    pub matrix: Option<[[f64; 3]; 3]>,
    #[serde(rename = "delta_C")]
    pub delta_c: f64,
    pub corr_len_x: f64,
    pub corr_len_y: f64,
    pub kle_modes: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlmcConfig {
    /// Normalized sampling MSE targets (the eps^2/2 values).
    pub targets: Vec<f64>,
    #[serde(default = "default_n_screen")]
    pub n_screen: u64,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

fn default_n_screen() -> u64 {
    50
}
fn default_max_iterations() -> usize {
    20
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}
impl std::error::Error for ConfigError {}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |msg: String| Err(ConfigError(msg));
        match self.geometry.kind.as_str() {
            "plate" => {
                if self.geometry.width <= 0.0 || self.geometry.height <= 0.0 {
                    return err(format!(
                        "geometry.width/height must be positive, got {} x {}",
                        self.geometry.width, self.geometry.height
                    ));
                }
                if self.geometry.nx0 == 0 || self.geometry.ny0 == 0 {
                    return err("geometry.nx0 and geometry.ny0 must be at least 1".into());
                }
            }
            "mesh" => {
                if self.geometry.mesh_dir.is_none() {
                    return err("geometry.kind = \"mesh\" requires geometry.mesh_dir".into());
                }
            }
            other => return err(format!("geometry.kind must be \"plate\" or \"mesh\", got {other:?}")),
        }
        if self.load.resultant <= 0.0 {
            return err(format!(
                "load.resultant must be positive, got {}",
                self.load.resultant
            ));
        }
        let m = &self.material;
        let has_constants = m.e1.is_some() || m.e2.is_some() || m.nu21.is_some() || m.g12.is_some();
        match (&m.matrix, has_constants) {
            (Some(_), true) => {
                return err("material: give either E1/E2/nu21/G12 or matrix, not both".into())
            }
            (None, true) => {
                for (name, v) in [("E1", m.e1), ("E2", m.e2), ("nu21", m.nu21), ("G12", m.g12)] {
                    match v {
                        None => return err(format!("material.{name} is missing")),
                        Some(x) if x <= 0.0 => {
                            return err(format!("material.{name} must be positive, got {x}"))
                        }
                        _ => {}
                    }
                }
            }
            (None, false) => return err("material: no mean elasticity given".into()),
            (Some(_), false) => {}
        }
        if !(m.delta_c > 0.0 && m.delta_c < 1.0) {
            return err(format!(
                "material.delta_C must lie in (0, 1), got {}",
                m.delta_c
            ));
        }
        if m.corr_len_x <= 0.0 {
            return err(format!(
                "material.corr_len_x must be positive, got {}",
                m.corr_len_x
            ));
        }
        if m.corr_len_y <= 0.0 {
            return err(format!(
                "material.corr_len_y must be positive, got {}",
                m.corr_len_y
            ));
        }
        if m.kle_modes == 0 {
            return err("material.kle_modes must be at least 1".into());
        }
        if self.mlmc.targets.is_empty() {
            return err("mlmc.targets must not be empty".into());
        }
        for &t in &self.mlmc.targets {
            if t <= 0.0 {
                return err(format!("mlmc.targets entries must be positive, got {t}"));
            }
        }
        if self.mlmc.n_screen < 4 {
            return err(format!(
                "mlmc.n_screen must be at least 4, got {}",
                self.mlmc.n_screen
            ));
        }
        Ok(())
    }

    pub fn mean_elasticity(&self) -> Result<MeanElasticity<f64>, ConfigError> {
        let m = &self.material;
        if let Some(rows) = m.matrix {
            let c = nalgebra::Matrix3::new(
                rows[0][0], rows[0][1], rows[0][2], rows[1][0], rows[1][1], rows[1][2], rows[2][0],
                rows[2][1], rows[2][2],
            );
            MeanElasticity::from_matrix(c)
                .map_err(|e| ConfigError(format!("material.matrix: {e}")))
        } else {
            MeanElasticity::orthotropic(
                m.e1.unwrap(),
                m.e2.unwrap(),
                m.nu21.unwrap(),
                m.g12.unwrap(),
            )
            .map_err(|e| ConfigError(format!("material: {e}")))
        }
    }

    pub fn kernel(&self) -> Result<CovarianceKernel<f64>, ConfigError> {
        CovarianceKernel::standard(self.material.corr_len_x, self.material.corr_len_y)
            .map_err(|e| ConfigError(format!("material: {e}")))
    }

    pub fn hierarchy(&self) -> Result<MeshHierarchy<f64>, ConfigError> {
        match self.geometry.kind.as_str() {
            "plate" => build_plate_hierarchy(
                self.geometry.width,
                self.geometry.height,
                self.geometry.nx0,
                self.geometry.ny0,
                self.geometry.levels,
            )
            .map_err(|e| ConfigError(format!("geometry: {e}"))),
            _ => {
                let dir = self.geometry.mesh_dir.as_ref().expect("validated");
                load_mesh_hierarchy(dir).map_err(|e| ConfigError(format!("geometry: {e}")))
            }
        }
    }
}
