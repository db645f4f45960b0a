//! Synthetic scene generation and rule-based captioning.

pub mod captions;
pub mod generator;

pub use captions::{
    caption_bearing, caption_motion, caption_obstacle, signed_bearing_deg, CaptionRules,
};
pub use generator::{future_turn, generate_dataset, generate_scene, scene_seed, GeneratorConfig};
