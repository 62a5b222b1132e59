//! Synthetic datasets: bouncing-ball videos and 3×3 attribute-rule grids.

pub mod boba;
pub mod crpm;
pub mod episode;
pub mod io;
pub mod physics;
pub mod render;

pub use boba::{generate_boba, BobaConfig};
pub use crpm::{generate_crpm, CrpmConfig, CrpmInstance, CrpmRule};
pub use episode::{split_context_target, Episode, ImageDims, Split};
pub use io::{read_dataset, write_dataset, Dataset, DatasetManifest};
pub use physics::{step_physics, BallState};
pub use render::render_frame;
