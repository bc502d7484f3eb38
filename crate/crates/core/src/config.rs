//! Run configuration: a TOML file with one section per stage.
//!
//! Key names are unique across sections so that any key can be overridden on
//! the command line by name alone (`--sigma 0.3`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::SelectionParams;
use crate::ingest::SensorConfig;
use crate::mapping::MapParams;
use crate::matching::GraphParams;
use crate::odometry::{AnchorParams, OdometryParams, WeightSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Sequence directory holding `velodyne/*.bin` (or the `.bin` files directly).
    pub path: PathBuf,
    /// Ground-truth poses in KITTI format; defaults to `<path>/poses.txt` when present.
    pub poses: Option<PathBuf>,
    pub first_frame: usize,
    /// Number of frames to process; all remaining when absent.
    pub max_frames: Option<usize>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            path: PathBuf::from("."),
            poses: None,
            first_frame: 0,
            max_frames: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub sigma: f64,
    pub eta: f64,
    pub x: f64,
    pub sector_size: usize,
    pub min_sectors: usize,
    pub map_sigma: f64,
    pub map_sector_size: usize,
}

impl Default for GraphSection {
    fn default() -> Self {
        let o = GraphParams::odometry();
        let m = GraphParams::mapping();
        Self {
            sigma: o.sigma,
            eta: o.eta,
            x: o.x,
            sector_size: o.sector_size,
            min_sectors: o.min_sectors,
            map_sigma: m.sigma,
            map_sector_size: m.sector_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdometrySection {
    pub lambda_frac: f64,
    pub alpha: f64,
    pub outer_passes: usize,
    pub odom_lm_iterations: usize,
    pub max_match_dist: f64,
    pub channel_window: u16,
    pub search_cap: f64,
}

impl Default for OdometrySection {
    fn default() -> Self {
        let o = OdometryParams::default();
        Self {
            lambda_frac: o.schedule.lambda_frac,
            alpha: o.schedule.alpha,
            outer_passes: o.outer_passes,
            odom_lm_iterations: o.lm_iterations,
            max_match_dist: o.max_match_dist,
            channel_window: o.anchors.channel_window,
            search_cap: o.anchors.search_cap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingSection {
    pub mapping_enabled: bool,
    pub edge_voxel: f64,
    pub planar_voxel: f64,
    pub map_radius: f64,
    pub neighbors: usize,
    pub max_neighbor_dist: f64,
    pub fit_tolerance: f64,
    pub map_lm_iterations: usize,
}

impl Default for MappingSection {
    fn default() -> Self {
        let m = MapParams::default();
        Self {
            mapping_enabled: true,
            edge_voxel: m.edge_voxel,
            planar_voxel: m.planar_voxel,
            map_radius: m.radius,
            neighbors: m.neighbors,
            max_neighbor_dist: m.max_neighbor_dist,
            fit_tolerance: m.fit_tolerance,
            map_lm_iterations: m.lm_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub output_dir: PathBuf,
    pub write_map: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("gcloam_out"),
            write_map: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub graph_filter: bool,
    pub conspicuous_features: bool,
    pub weighting: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            graph_filter: true,
            conspicuous_features: false,
            weighting: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub sensor: SensorConfig,
    pub features: SelectionParams,
    pub graph: GraphSection,
    pub odometry: OdometrySection,
    pub mapping: MappingSection,
    pub output: OutputSection,
    pub ablation: AblationSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every overridable key with the section it lives in.
    pub fn keys() -> Vec<(String, String)> {
        let table = toml::Table::try_from(RunConfig::default()).expect("config serializes");
        let mut out = Vec::new();
        for (section, value) in &table {
            if let Some(t) = value.as_table() {
                out.extend(t.keys().map(|k| (section.clone(), k.clone())));
            }
        }
        // Optional keys are absent from the default serialization.
        out.push(("dataset".into(), "poses".into()));
        out.push(("dataset".into(), "max_frames".into()));
        out
    }

    /// Sets `key` (in whichever section owns it) from its textual value.
    /// The value is read as a TOML literal, falling back to a plain string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some((section, _)) = Self::keys().into_iter().find(|(_, k)| k == key) else {
            return Err(Error::Config(format!("unknown key `{key}`")));
        };
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        table
            .entry(section.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("sections are tables")
            .insert(key.to_string(), parsed);
        let next: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("--{key} {value}: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut fraction = |name: &str, v: f64, open_low: bool, open_high: bool| {
            let low_ok = if open_low { v > 0.0 } else { v >= 0.0 };
            let high_ok = if open_high { v < 1.0 } else { v <= 1.0 };
            if !(low_ok && high_ok) {
                problems.push(format!("{name} = {v} is outside its allowed fraction range"));
            }
        };
        fraction("eta", self.graph.eta, true, false);
        fraction("x", self.graph.x, false, true);
        fraction("lambda_frac", self.odometry.lambda_frac, false, false);
        let lengths = [
            ("sigma", self.graph.sigma),
            ("map_sigma", self.graph.map_sigma),
            ("alpha", self.odometry.alpha),
            ("max_match_dist", self.odometry.max_match_dist),
            ("search_cap", self.odometry.search_cap),
            ("edge_voxel", self.mapping.edge_voxel),
            ("planar_voxel", self.mapping.planar_voxel),
            ("map_radius", self.mapping.map_radius),
            ("max_neighbor_dist", self.mapping.max_neighbor_dist),
            ("fit_tolerance", self.mapping.fit_tolerance),
            ("r_t", self.features.r_t),
            ("sigma_disjoint", self.features.sigma_disjoint),
            ("elevation_tolerance_deg", self.sensor.elevation_tolerance_deg),
            ("max_range", self.sensor.max_range),
            ("scan_period", self.sensor.scan_period),
        ];
        for (name, v) in lengths {
            if !(v > 0.0 && v.is_finite()) {
                problems.push(format!("{name} = {v} must be positive"));
            }
        }
        let counts = [
            ("subregions", self.features.subregions),
            ("half_window", self.features.half_window),
            ("sector_size", self.graph.sector_size),
            ("map_sector_size", self.graph.map_sector_size),
            ("min_sectors", self.graph.min_sectors),
            ("outer_passes", self.odometry.outer_passes),
            ("odom_lm_iterations", self.odometry.odom_lm_iterations),
            ("map_lm_iterations", self.mapping.map_lm_iterations),
        ];
        for (name, v) in counts {
            if v == 0 {
                problems.push(format!("{name} must be at least 1"));
            }
        }
        if self.mapping.neighbors < 3 {
            problems.push("neighbors must be at least 3".into());
        }
        if self.sensor.min_range < 0.0 || self.sensor.min_range >= self.sensor.max_range {
            problems.push("min_range must lie in [0, max_range)".into());
        }
        if self.sensor.elevations_deg.is_empty() || self.sensor.elevations_deg.len() > u16::MAX as usize {
            problems.push("elevations_deg must list between 1 and 65535 beams".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn selection(&self) -> SelectionParams {
        if self.ablation.conspicuous_features {
            self.features.clone().conspicuous()
        } else {
            self.features.clone()
        }
    }

    pub fn odometry_params(&self) -> OdometryParams {
        OdometryParams {
            graph: GraphParams {
                sigma: self.graph.sigma,
                eta: self.graph.eta,
                x: self.graph.x,
                sector_size: self.graph.sector_size,
                min_sectors: self.graph.min_sectors,
            },
            graph_filter: self.ablation.graph_filter,
            weighting: self.ablation.weighting,
            schedule: WeightSchedule {
                lambda_frac: self.odometry.lambda_frac,
                alpha: self.odometry.alpha,
            },
            anchors: AnchorParams {
                channel_window: self.odometry.channel_window,
                search_cap: self.odometry.search_cap,
            },
            outer_passes: self.odometry.outer_passes,
            lm_iterations: self.odometry.odom_lm_iterations,
            max_match_dist: self.odometry.max_match_dist,
        }
    }

    pub fn map_params(&self) -> MapParams {
        MapParams {
            edge_voxel: self.mapping.edge_voxel,
            planar_voxel: self.mapping.planar_voxel,
            radius: self.mapping.map_radius,
            neighbors: self.mapping.neighbors,
            max_neighbor_dist: self.mapping.max_neighbor_dist,
            fit_tolerance: self.mapping.fit_tolerance,
            graph: GraphParams {
                sigma: self.graph.map_sigma,
                eta: self.graph.eta,
                x: self.graph.x,
                sector_size: self.graph.map_sector_size,
                min_sectors: self.graph.min_sectors,
            },
            graph_filter: self.ablation.graph_filter,
            lm_iterations: self.mapping.map_lm_iterations,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_unique() {
        let keys = RunConfig::keys();
        let mut names: Vec<&str> = keys.iter().map(|(_, k)| k.as_str()).collect();
        names.sort();
        let n = names.len();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_parse() {
        let cfg = RunConfig::from_toml(
            "[graph]\nsigma = 0.3\n[ablation]\ngraph_filter = false\n[dataset]\npath = \"/data/04\"\nmax_frames = 10\n",
        )
        .unwrap();
        assert_eq!(cfg.graph.sigma, 0.3);
        assert!(!cfg.odometry_params().graph_filter);
        assert_eq!(cfg.dataset.max_frames, Some(10));
    }

    #[test]
    fn override_by_key() {
        let mut cfg = RunConfig::default();
        cfg.set("eta", "0.8").unwrap();
        cfg.set("path", "/tmp/seq").unwrap();
        cfg.set("max_frames", "5").unwrap();
        cfg.set("weighting", "false").unwrap();
        assert_eq!(cfg.graph.eta, 0.8);
        assert_eq!(cfg.dataset.path, PathBuf::from("/tmp/seq"));
        assert_eq!(cfg.dataset.max_frames, Some(5));
        assert!(!cfg.ablation.weighting);
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("eta", "1.5"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("edge_voxel", "0"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("nonsense", "1"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("sigma", "abc"), Err(Error::Config(_))));
        assert_eq!(cfg, RunConfig::default());
        assert!(RunConfig::from_toml("[graph]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[graph]\nx = 1.0\n").is_err());
    }
}
