use super::sprites::Sprite;
use crate::error::{Error, Result};
use crate::imaging::{BBox, Image, Mask};

/// Square box (side `min(w, h)`) centred inside `bb`, as `(x0, y0, side)`.
/// Sprites are square, so this is the aspect-preserving fit.
pub fn fitted_box(bb: &BBox, sprite: &Sprite) -> (usize, usize, usize, usize) {
    let (sw, sh) = (sprite.width(), sprite.height());
    // Largest w×h with w/h = sw/sh inside the bbox.
    let (w, h) = if bb.width() * sh <= bb.height() * sw {
        (bb.width(), (bb.width() * sh / sw).max(1))
    } else {
        ((bb.height() * sw / sh).max(1), bb.height())
    };
    (bb.x0 + (bb.width() - w) / 2, bb.y0 + (bb.height() - h) / 2, w, h)
}

/// Fills the mask's bounding box with the subject: the sprite is scaled
/// (aspect-preserving, nearest-neighbour) to the box, centred, and
/// alpha-composited. Pixels outside the composited alpha are untouched.
pub fn redraw(background: &Image, mask: &Mask, sprite: &Sprite) -> Result<Image> {
    let bb = mask.bbox().ok_or_else(|| Error::invalid("redraw needs a nonempty mask"))?;
    let (x0, y0, w, h) = fitted_box(&bb, sprite);
    let mut out = background.clone();
    sprite.scaled(w, h).composite(&mut out, x0, y0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ssim;
    use crate::storyboard::sprites::family_sprite;

    fn box_mask(x0: usize, y0: usize, w: usize, h: usize) -> Mask {
        let mut m = Mask::empty(32, 32);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn native_size_is_an_exact_paste() {
        let sprite = family_sprite(3);
        let bg = Image::filled(32, 32, [0.2, 0.3, 0.4]);
        let out = redraw(&bg, &box_mask(5, 7, 16, 16), &sprite).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let want = if sprite.alpha.get(x, y) { sprite.rgb.get(x, y) } else { [0.2, 0.3, 0.4] };
                assert_eq!(out.get(x + 5, y + 7), want);
            }
        }
    }

    #[test]
    fn outside_bbox_is_untouched_and_empty_mask_rejected() {
        let bg = Image::new(32, 32, (0..32 * 32 * 3).map(|i| (i % 251) as f64 / 255.0).collect()).unwrap();
        let mask = box_mask(3, 4, 10, 14);
        let out = redraw(&bg, &mask, &family_sprite(0)).unwrap();
        let bb = mask.bbox().unwrap();
        for y in 0..32 {
            for x in 0..32 {
                if !bb.contains(x, y) {
                    assert_eq!(out.get(x, y), bg.get(x, y));
                }
            }
        }
        assert!(redraw(&bg, &Mask::empty(32, 32), &family_sprite(0)).is_err());
    }

    #[test]
    fn double_scale_matches_integer_upscale_oracle() {
        let sprite = family_sprite(5);
        let bg = Image::filled(32, 32, [0.5; 3]);
        let out = redraw(&bg, &box_mask(0, 0, 32, 32), &sprite).unwrap();
        // Oracle: every sprite pixel repeated into a 2×2 block.
        let mut oracle = bg.clone();
        for y in 0..32 {
            for x in 0..32 {
                if sprite.alpha.get(x / 2, y / 2) {
                    oracle.set(x, y, sprite.rgb.get(x / 2, y / 2));
                }
            }
        }
        assert!(ssim(&out, &oracle).unwrap() >= 0.99);
    }
}
