//! Engine configuration as `key = value` text with `#` comments.

use std::fmt::Write as _;
use std::path::Path;

use super::read_artifact;
use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::losses::LossWeights;
use crate::optim::{
    CameraSchedule, CompositionSchedule, DensifyConfig, JointSchedule, MotionSchedule, StaticSchedule, WarpSchedule,
};

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub static_fit: StaticSchedule,
    /// Points seeded from the orbit depth maps before the static fit.
    pub init_points: usize,
    pub init_max_scale: f64,
    pub orbit_views: usize,
    pub densify: DensifyConfig,
    pub motion: MotionSchedule,
    pub field: FieldConfig,
    pub warp: WarpSchedule,
    pub joint: JointSchedule,
    pub camera: CameraSchedule,
    pub compose: CompositionSchedule,
    pub sh_degree: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub crop_size: usize,
    pub occupancy: f64,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            static_fit: StaticSchedule::default(),
            init_points: 1000,
            init_max_scale: 0.05,
            orbit_views: 8,
            densify: DensifyConfig::default(),
            motion: MotionSchedule::default(),
            field: FieldConfig::default(),
            warp: WarpSchedule::default(),
            joint: JointSchedule::default(),
            camera: CameraSchedule::default(),
            compose: CompositionSchedule::default(),
            sh_degree: 0,
            image_width: 128,
            image_height: 128,
            crop_size: 128,
            occupancy: 0.65,
            seed: 0,
        }
    }
}

trait Value: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn show(&self) -> String;
}

impl Value for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn show(&self) -> String {
        format!("{self:?}")
    }
}

impl Value for usize {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for u64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for bool {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+;)*) => {
        const KEYS: &[&str] = &[$($key),*];

        fn set(cfg: &mut EngineConfig, key: &str, value: &str) -> std::result::Result<(), String> {
            match key {
                $($key => {
                    cfg.$($field).+ = Value::parse_value(value).ok_or_else(|| format!("bad value '{value}' for {key}"))?;
                })*
                _ => return Err(format!("unknown key '{key}'")),
            }
            Ok(())
        }

        fn show(cfg: &EngineConfig, key: &str) -> String {
            match key {
                $($key => cfg.$($field).+.show(),)*
                _ => unreachable!("listed key"),
            }
        }
    };
}

keys! {
    "seed" => seed;
    "sh_degree" => sh_degree;
    "image_width" => image_width;
    "image_height" => image_height;
    "crop_size" => crop_size;
    "occupancy" => occupancy;
    "static.iterations" => static_fit.iterations;
    "static.batch" => static_fit.batch;
    "static.weight_decay" => static_fit.weight_decay;
    "static.lr.position_start" => static_fit.lr.position_start;
    "static.lr.position_end" => static_fit.lr.position_end;
    "static.lr.sh" => static_fit.lr.sh;
    "static.lr.opacity" => static_fit.lr.opacity;
    "static.lr.scale" => static_fit.lr.scale;
    "static.lr.rotation" => static_fit.lr.rotation;
    "static.init_points" => init_points;
    "static.init_max_scale" => init_max_scale;
    "static.orbit_views" => orbit_views;
    "densify.grad_threshold" => densify.grad_threshold;
    "densify.max_scale" => densify.max_scale;
    "densify.min_opacity" => densify.min_opacity;
    "densify.interval" => densify.interval;
    "densify.until_iter" => densify.until_iter;
    "motion.iterations_per_frame" => motion.iterations_per_frame;
    "motion.reference_per_batch" => motion.reference_per_batch;
    "motion.novel_per_batch" => motion.novel_per_batch;
    "motion.lr.grid" => motion.lr.grid;
    "motion.lr.mlp" => motion.lr.mlp;
    "motion.azimuth_range" => motion.azimuth_range;
    "motion.elevation_range" => motion.elevation_range;
    "motion.weight_decay" => motion.weight_decay;
    "motion.time_smoothness" => motion.time_smoothness;
    "loss.rgb" => motion.weights.rgb;
    "loss.flow" => motion.weights.flow;
    "loss.scale" => motion.weights.scale;
    "loss.rigid" => motion.weights.rigid;
    "field.spatial_res" => field.spatial_res;
    "field.temporal_res" => field.temporal_res;
    "field.features" => field.features;
    "field.hidden" => field.hidden;
    "warp.iterations" => warp.iterations;
    "warp.lr" => warp.lr;
    "warp.freeze_depth" => warp.freeze_depth;
    "joint.steps" => joint.steps;
    "joint.lr_scale" => joint.lr_scale;
    "joint.delta_lr" => joint.delta_lr;
    "camera.iterations" => camera.iterations;
    "camera.beta_lr_start" => camera.beta_lr_start;
    "camera.beta_lr_end" => camera.beta_lr_end;
    "camera.refine_pose" => camera.refine_pose;
    "camera.pose_lr" => camera.pose_lr;
    "compose.iterations" => compose.iterations;
    "compose.lr_start" => compose.lr_start;
    "compose.lr_end" => compose.lr_end;
}

impl EngineConfig {
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Parses config text; absent keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", n + 1)));
            }
            set(&mut cfg, key, value).map_err(|m| Error::Config(format!("line {}: {m}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_artifact(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Every key with its current value, parseable by [`EngineConfig::parse`].
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            writeln!(out, "{key} = {}", show(self, key)).expect("string write");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.sh_degree > crate::sh::MAX_DEGREE {
            return bad("sh_degree must be at most 3");
        }
        if self.image_width == 0 || self.image_height == 0 || self.crop_size == 0 {
            return bad("image sizes must be positive");
        }
        if !(self.occupancy > 0.0 && self.occupancy <= 1.0) {
            return bad("occupancy must lie in (0, 1]");
        }
        if self.static_fit.batch == 0 || self.motion.reference_per_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if self.orbit_views == 0 || self.init_points == 0 {
            return bad("static.orbit_views and static.init_points must be positive");
        }
        if self.field.spatial_res < 2 || self.field.temporal_res < 2 || self.field.features == 0 || self.field.hidden == 0 {
            return bad("field resolutions must be at least 2 and sizes positive");
        }
        Ok(())
    }

    /// Motion schedule with the engine seed and background applied.
    pub fn motion_schedule(&self, background: [f64; 3]) -> MotionSchedule {
        MotionSchedule { seed: self.seed, background, ..self.motion.clone() }
    }

    pub fn joint_schedule(&self, background: [f64; 3]) -> JointSchedule {
        JointSchedule { field_lr: self.motion.lr, background, ..self.joint.clone() }
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.motion.weights
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = EngineConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(c, EngineConfig::default());
        assert_eq!(c.occupancy, 0.65);
        assert_eq!(c.crop_size, 128);
        assert_eq!(c.static_fit.iterations, 1000);
        assert_eq!(c.static_fit.batch, 16);
    }

    #[test]
    fn parses_values_and_comments() {
        let c = EngineConfig::parse("seed = 9  # trailing\nmotion.lr.grid=1e-3\ncamera.refine_pose = true\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.motion.lr.grid, 1e-3);
        assert!(c.camera.refine_pose);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        for text in ["bogus = 1", "seed = 1\nseed = 2", "seed 1", "seed = -1", "occupancy = nan", "occupancy = 2", "sh_degree = 4"] {
            assert!(matches!(EngineConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn dump_roundtrips() {
        let mut c = EngineConfig::default();
        c.motion.lr.mlp = 0.1 + 0.2;
        c.occupancy = 1.0 / 3.0;
        c.joint.steps = 17;
        c.camera.refine_pose = true;
        let text = c.dump();
        assert_eq!(text.lines().count(), EngineConfig::keys().len());
        assert_eq!(EngineConfig::parse(&text).unwrap(), c);
    }
}
