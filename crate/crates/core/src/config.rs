//! Structured scene/pipeline configuration. Serialized as TOML with sections
//! `world`, `materials`, `bs`, `trajectories` plus sensing and radio settings.
//! All lengths are meters, all angles radians.

use crate::error::{Error, Result};
use crate::SPEED_OF_LIGHT;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Total number of semantic classes. Layout: 1 sky, 2 ground/road, 3 CU,
/// 4 vegetation, 5..28 the four building materials crossed with six height
/// bands.
pub const NUM_CLASSES: usize = 28;
pub const CLASS_SKY: u8 = 1;
pub const CLASS_GROUND: u8 = 2;
pub const CLASS_CU: u8 = 3;
pub const CLASS_VEGETATION: u8 = 4;
pub const NUM_HEIGHT_BANDS: usize = 6;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// World extent in meters: the scene occupies [0, x] x [0, y] x [0, z].
    pub extent: [f64; 3],
    pub carrier_hz: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            extent: [400.0, 400.0, 60.0],
            carrier_hz: 28.0e9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MaterialSpec {
    pub name: String,
    pub reflection_magnitude: f64,
    pub reflection_phase: f64,
}

impl Default for MaterialSpec {
    fn default() -> Self {
        MaterialSpec {
            name: "concrete".into(),
            reflection_magnitude: 0.70,
            reflection_phase: std::f64::consts::PI,
        }
    }
}

fn default_palette() -> Vec<MaterialSpec> {
    use std::f64::consts::PI;
    let m = |name: &str, mag: f64| MaterialSpec {
        name: name.into(),
        reflection_magnitude: mag,
        reflection_phase: PI,
    };
    vec![
        m("concrete", 0.70),
        m("brick", 0.60),
        m("wood", 0.45),
        m("glass", 0.30),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MaterialsConfig {
    pub palette: Vec<MaterialSpec>,
    pub ground_reflection_magnitude: f64,
    pub ground_reflection_phase: f64,
    pub vegetation_reflection_magnitude: f64,
}

impl Default for MaterialsConfig {
    fn default() -> Self {
        MaterialsConfig {
            palette: default_palette(),
            ground_reflection_magnitude: 0.60,
            ground_reflection_phase: std::f64::consts::PI,
            vegetation_reflection_magnitude: 0.20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BsConfig {
    pub position: [f64; 3],
}

impl Default for BsConfig {
    fn default() -> Self {
        // Paper-style placement.
        BsConfig {
            position: [180.0, 240.0, 40.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildingsConfig {
    pub count_min: usize,
    pub count_max: usize,
    pub footprint_min: f64,
    pub footprint_max: f64,
    pub height_min: f64,
    pub height_max: f64,
    /// Minimum 2-D clearance between a building footprint and any CU route.
    pub route_clearance: f64,
}

impl Default for BuildingsConfig {
    fn default() -> Self {
        BuildingsConfig {
            count_min: 6,
            count_max: 12,
            footprint_min: 10.0,
            footprint_max: 40.0,
            height_min: 5.0,
            height_max: 30.0,
            route_clearance: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VegetationConfig {
    pub count_min: usize,
    pub count_max: usize,
    pub size_min: f64,
    pub size_max: f64,
    pub height_min: f64,
    pub height_max: f64,
}

impl Default for VegetationConfig {
    fn default() -> Self {
        VegetationConfig {
            count_min: 2,
            count_max: 6,
            size_min: 2.0,
            size_max: 6.0,
            height_min: 2.0,
            height_max: 6.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoriesConfig {
    /// Number of L-shaped legs chained into the CU polyline.
    pub count: usize,
    pub leg_min: f64,
    pub leg_max: f64,
    pub cu_height: f64,
    pub speed: f64,
    pub dt: f64,
}

impl Default for TrajectoriesConfig {
    fn default() -> Self {
        TrajectoriesConfig {
            count: 3,
            leg_min: 40.0,
            leg_max: 100.0,
            cu_height: 1.5,
            speed: 3.0,
            dt: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub resolution: usize,
    pub fov_deg: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            resolution: 256,
            fov_deg: 90.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ArraysConfig {
    pub bs_rows: usize,
    pub bs_cols: usize,
    pub cu_rows: usize,
    pub cu_cols: usize,
}

impl Default for ArraysConfig {
    fn default() -> Self {
        ArraysConfig {
            bs_rows: 4,
            bs_cols: 4,
            cu_rows: 4,
            cu_cols: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RaytraceConfig {
    pub max_reflections: usize,
    pub max_paths: usize,
}

impl Default for RaytraceConfig {
    fn default() -> Self {
        // Desk-scale defaults; the paper-scale reflection depth of 6 remains
        // selectable here.
        RaytraceConfig {
            max_reflections: 2,
            max_paths: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiConfig {
    /// Area fraction for the dynamic count threshold j_r.
    pub kappa: f64,
    pub d_min: usize,
    pub d_max: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig {
            kappa: 0.01,
            d_min: 20,
            d_max: 100,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub world: WorldConfig,
    pub materials: MaterialsConfig,
    pub bs: BsConfig,
    pub buildings: BuildingsConfig,
    pub vegetation: VegetationConfig,
    pub trajectories: TrajectoriesConfig,
    pub camera: CameraConfig,
    pub arrays: ArraysConfig,
    pub raytrace: RaytraceConfig,
    pub roi: RoiConfig,
}

impl SceneConfig {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.world.carrier_hz
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.world.extent;
        if e[0] <= 0.0 || e[1] <= 0.0 || e[2] <= 0.0 {
            return Err(Error::config(format!("non-positive world extent {e:?}")));
        }
        if self.world.carrier_hz <= 0.0 {
            return Err(Error::config("carrier frequency must be positive"));
        }
        if self.bs.position[2] <= 0.0 {
            return Err(Error::config("BS height must be positive"));
        }
        if self.buildings.count_min > self.buildings.count_max {
            return Err(Error::config("buildings.count_min > count_max"));
        }
        if self.trajectories.speed <= 0.0 || self.trajectories.dt <= 0.0 {
            return Err(Error::config("trajectory speed and dt must be positive"));
        }
        if self.camera.resolution < 16 {
            return Err(Error::config("camera resolution must be at least 16"));
        }
        if self.camera.resolution % 8 != 0 {
            return Err(Error::config("camera resolution must be divisible by 8"));
        }
        if self.materials.palette.is_empty() {
            return Err(Error::config("material palette is empty"));
        }
        for m in &self.materials.palette {
            if m.reflection_magnitude <= 0.0 || m.reflection_magnitude > 1.0 {
                return Err(Error::config(format!(
                    "reflection magnitude {} of '{}' outside (0,1]",
                    m.reflection_magnitude, m.name
                )));
            }
        }
        if !(0.0..1.0).contains(&self.roi.kappa) {
            return Err(Error::config("roi.kappa must be in [0,1)"));
        }
        if self.roi.d_min == 0 || self.roi.d_min > self.roi.d_max {
            return Err(Error::config("require 0 < roi.d_min <= roi.d_max"));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<SceneConfig> {
        let cfg: SceneConfig =
            toml::from_str(s).map_err(|e| Error::format(format!("scene config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<SceneConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Semantic class for a building of the given palette material index whose
/// roof sits at `top_z`, with bands spanning the world height.
pub fn building_class(material_idx: usize, top_z: f64, world_height: f64) -> u8 {
    let band_h = world_height / NUM_HEIGHT_BANDS as f64;
    let band = ((top_z / band_h) as usize).min(NUM_HEIGHT_BANDS - 1);
    (5 + (material_idx % 4) * NUM_HEIGHT_BANDS + band) as u8
}
