use super::scene::SceneSpec;
use super::sprites::{placeholder_sprite, Sprite};
use crate::denoiser::IMAGE_SIZE;
use crate::imaging::{Image, Mask};

/// Renders frame `f` of a scene: background, then the sprite scaled to the
/// placement size and composited at its (motion-clamped) position. `None`
/// draws the generic placeholder sprite. Returns the image and the
/// composited alpha footprint.
pub fn render_frame(spec: &SceneSpec, sprite: Option<&Sprite>, f: usize) -> (Image, Mask) {
    let mut img = spec.background.draw(IMAGE_SIZE);
    let Some(p) = &spec.subject else {
        return (img, Mask::empty(IMAGE_SIZE, IMAGE_SIZE));
    };
    let fallback;
    let sprite = match sprite {
        Some(s) => s,
        None => {
            fallback = placeholder_sprite();
            &fallback
        }
    };
    let (x0, y0) = spec.subject_origin(f).expect("subject present");
    let mask = sprite.scaled(p.size, p.size).composite(&mut img, x0, y0);
    (img.quantized(), mask)
}

/// The storyboard still: frame 0 of the scene.
pub fn render_scene(spec: &SceneSpec, sprite: Option<&Sprite>) -> (Image, Mask) {
    render_frame(spec, sprite, 0)
}

/// All `frames` frames of the scene's action with per-frame masks.
pub fn render_clip(spec: &SceneSpec, sprite: Option<&Sprite>, frames: usize) -> (Vec<Image>, Vec<Mask>) {
    (0..frames).map(|f| render_frame(spec, sprite, f)).unzip()
}

/// Masks of the action's motion applied to a frame-0 mask, one per frame.
pub fn motion_masks(spec: &SceneSpec, mask0: &Mask, frames: usize) -> Vec<Mask> {
    let Some(origin0) = spec.subject_origin(0) else {
        return vec![mask0.clone(); frames];
    };
    (0..frames)
        .map(|f| {
            let o = spec.subject_origin(f).expect("subject present");
            mask0.translated(o.0 as i64 - origin0.0 as i64, o.1 as i64 - origin0.1 as i64)
        })
        .collect()
}
