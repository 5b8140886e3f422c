//! Fitting loops: static lift, object motion, world warp refinement, joint
//! fine-tuning, camera scale and composition scale.

pub mod adam;
pub mod camera_fit;
pub mod compose_fit;
pub mod densify;
pub mod log;
pub mod motion_fit;
pub mod static_fit;
pub mod world;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::PinholeCamera;
use crate::image::Image;

pub use adam::{AdamState, CloudOptimizer, ExpDecay, GaussianLr};
pub use camera_fit::{fit_camera, CameraFit, CameraSchedule};
pub use compose_fit::{depth_layers, fit_composition, CompositionFit, CompositionFrame, CompositionSchedule, DepthLayer};
pub use densify::{densify_and_prune, DensifyConfig, DensifyReport, DensifyStats};
pub use log::{LossTerms, ProgressLog};
pub use motion_fit::{fit_object_motion, FieldLr, FieldOptimizer, FlowTarget, MotionFit, MotionSchedule, MotionTargets, NovelViews};
pub use static_fit::{fit_static, init_cloud_from_depth, StaticFit, StaticSchedule};
pub use world::{fit_world_warp, joint_finetune, JointFit, JointSchedule, WarpFit, WarpSchedule};

/// A posed target image.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: PinholeCamera,
    pub image: Image,
}

/// Draws `batch` indices in `0..n` with replacement and returns the distinct
/// ones (ascending) with weight `multiplicity / batch`.
pub fn sample_batch(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<(usize, f64)> {
    let mut counts = vec![0usize; n];
    for _ in 0..batch {
        counts[rng.gen_range(0..n)] += 1;
    }
    counts.iter().enumerate().filter(|(_, c)| **c > 0).map(|(i, c)| (i, *c as f64 / batch as f64)).collect()
}
