//! Storyboard generation over a procedural toy image world: a scene DSL, a
//! renderer, a border-fitted segmenter, subject removal and sprite redraw.

pub mod dsl;
mod pipeline;
mod redraw;
mod render;
mod scene;
mod segment;
mod sprites;

pub use dsl::{parse_scene, parse_storyboard, MAX_CELL, MAX_SPEED, MIN_SUBJECT_SIZE};
pub use pipeline::{
    generate_storyboard, random_background, random_scene, reference_clip, Protocol, ShotFailure, Storyboard,
    StoryboardShot, SubjectProfile,
};
pub use redraw::{fitted_box, redraw};
pub use render::{motion_masks, render_clip, render_frame, render_scene};
pub use scene::{Action, ActionKind, Background, GradientDir, Placement, Rgb8, SceneSpec};
pub use segment::{fit_background, largest_component, remove_subject, segment_subject, BackgroundModel, Segmentation, MIN_AREA, TAU};
pub use sprites::{family_sprite, placeholder_sprite, Sprite, SPRITE_SIZE};
