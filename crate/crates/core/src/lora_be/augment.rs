use rand::Rng;

use super::clip::ReferenceClip;
use crate::denoiser::IMAGE_SIZE;
use crate::storyboard::random_background;

/// Background-agnostic augmentation: every pixel outside the subject mask is
/// replaced by one randomly drawn procedural background, shared by all frames
/// of the clip. Subject pixels and masks are left untouched.
pub fn augment_background<R: Rng + ?Sized>(clip: &ReferenceClip, rng: &mut R) -> ReferenceClip {
    let bg = random_background(rng).draw(IMAGE_SIZE);
    let mut out = clip.clone();
    for (frame, mask) in out.frames.iter_mut().zip(&clip.masks) {
        for y in 0..frame.height() {
            for x in 0..frame.width() {
                if !mask.get(x, y) {
                    frame.set(x, y, bg.get(x, y));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Mask;
    use crate::storyboard::{family_sprite, parse_scene, reference_clip};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip() -> ReferenceClip {
        let spec = parse_scene("shot { bg: solid(#204060); subj: <subject> at (12,14) size 12; act: move_right speed 1 }").unwrap();
        reference_clip(&spec, &family_sprite(5), 4).unwrap()
    }

    #[test]
    fn subject_pixels_survive_and_background_is_shared() {
        let c = clip();
        let a = augment_background(&c, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a.masks, c.masks);
        for (f, (orig, aug)) in c.frames.iter().zip(&a.frames).enumerate() {
            for y in 0..32 {
                for x in 0..32 {
                    if c.masks[f].get(x, y) {
                        assert_eq!(orig.get(x, y), aug.get(x, y));
                    } else if !c.masks[0].get(x, y) {
                        assert_eq!(aug.get(x, y), a.frames[0].get(x, y));
                    }
                }
            }
        }
        assert_ne!(a, c);
    }

    #[test]
    fn full_mask_is_unchanged_and_seed_is_deterministic() {
        let mut c = clip();
        c.masks = vec![Mask::full(32, 32); 4];
        assert_eq!(augment_background(&c, &mut ChaCha8Rng::seed_from_u64(1)), c);
        let c = clip();
        assert_eq!(
            augment_background(&c, &mut ChaCha8Rng::seed_from_u64(8)),
            augment_background(&c, &mut ChaCha8Rng::seed_from_u64(8))
        );
    }
}
