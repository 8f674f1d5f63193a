//! 16×16 RGBA subject sprites: a generic placeholder and a procedural family.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{decode_png_raw, Image, Mask};

pub const SPRITE_SIZE: usize = 16;

/// RGB sprite with a binary alpha channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub rgb: Image,
    pub alpha: Mask,
}

impl Sprite {
    pub fn new(rgb: Image, alpha: Mask) -> Result<Self> {
        if rgb.width() != alpha.width() || rgb.height() != alpha.height() {
            return Err(Error::Image("sprite colour and alpha sizes differ".into()));
        }
        if alpha.is_empty() {
            return Err(Error::Image("sprite alpha is empty".into()));
        }
        Ok(Self { rgb, alpha })
    }

    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    /// Nearest-neighbour resize to `w × h`.
    pub fn scaled(&self, w: usize, h: usize) -> Sprite {
        let (sw, sh) = (self.width(), self.height());
        let mut rgb = Image::filled(w, h, [0.0; 3]);
        let mut alpha = Mask::empty(w, h);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x * sw / w, y * sh / h);
                rgb.set(x, y, self.rgb.get(sx, sy));
                alpha.set(x, y, self.alpha.get(sx, sy));
            }
        }
        Sprite { rgb, alpha }
    }

    /// Composites onto `canvas` with the top-left corner at `(x0, y0)`;
    /// returns the footprint as a mask of the canvas size.
    pub fn composite(&self, canvas: &mut Image, x0: usize, y0: usize) -> Mask {
        let mut mask = Mask::empty(canvas.width(), canvas.height());
        for y in 0..self.height() {
            for x in 0..self.width() {
                let (cx, cy) = (x0 + x, y0 + y);
                if self.alpha.get(x, y) && cx < canvas.width() && cy < canvas.height() {
                    canvas.set(cx, cy, self.rgb.get(x, y));
                    mask.set(cx, cy, true);
                }
            }
        }
        mask
    }

    /// RGBA PNG with alpha 0/255.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width() as u32, self.height() as u32);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
            let rgb = self.rgb.to_rgb8();
            let data: Vec<u8> = rgb
                .chunks_exact(3)
                .zip(self.alpha.data())
                .flat_map(|(p, &a)| [p[0], p[1], p[2], if a { 255 } else { 0 }])
                .collect();
            w.write_image_data(&data).map_err(|e| Error::Image(e.to_string()))?;
        }
        Ok(out)
    }

    /// Decodes an RGBA PNG; alpha ≥ 128 counts as opaque.
    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let (w, h, channels, buf) = decode_png_raw(bytes)?;
        if channels != 4 {
            return Err(Error::Image(format!("sprite PNG needs an alpha channel, found {channels} channels")));
        }
        let rgb: Vec<u8> = buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
        let alpha = buf.chunks_exact(4).map(|p| p[3] >= 128).collect();
        Self::new(Image::from_rgb8(w, h, &rgb)?, Mask::from_vec(w, h, alpha)?)
    }
}

fn rgb(r: u8, g: u8, b: u8) -> [f64; 3] {
    [r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0]
}

/// Generic stand-in subject used by the storyboard generator: a magenta
/// square with clipped corners spanning the full sprite box.
pub fn placeholder_sprite() -> Sprite {
    let n = SPRITE_SIZE;
    let mut img = Image::filled(n, n, [0.0; 3]);
    let mut alpha = Mask::empty(n, n);
    for y in 0..n {
        for x in 0..n {
            let corner = (x.min(n - 1 - x) + y.min(n - 1 - y)) < 2;
            if !corner {
                img.set(x, y, rgb(255, 0, 255));
                alpha.set(x, y, true);
            }
        }
    }
    Sprite { rgb: img, alpha }
}

#[derive(Clone, Copy)]
enum Shape {
    Disc,
    Square,
    Diamond,
    Tall,
    Wide,
    Blob,
}

const SHAPES: [Shape; 6] = [Shape::Disc, Shape::Square, Shape::Diamond, Shape::Tall, Shape::Wide, Shape::Blob];

fn inside(shape: Shape, x: usize, y: usize) -> bool {
    let (fx, fy) = (x as f64 + 0.5 - 8.0, y as f64 + 0.5 - 8.0);
    match shape {
        Shape::Disc => fx * fx + fy * fy <= 7.5 * 7.5,
        Shape::Square => fx.abs() <= 7.0 && fy.abs() <= 7.0,
        Shape::Diamond => fx.abs() + fy.abs() <= 8.0,
        Shape::Tall => (fx / 5.0).powi(2) + (fy / 8.0).powi(2) <= 1.0,
        Shape::Wide => (fx / 8.0).powi(2) + (fy / 5.5).powi(2) <= 1.0,
        Shape::Blob => fx * fx + fy * fy <= 49.0 || (fy > 0.0 && fx.abs() <= 7.5),
    }
}

/// Procedural subject `index` of the sprite family. Distinct indices give
/// distinct body shape, palette and markings; the result depends only on `index`.
pub fn family_sprite(index: usize) -> Sprite {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5_9817e ^ index as u64);
    let shape = SHAPES[index % SHAPES.len()];
    let hue = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        // Saturated palette, never close to the placeholder magenta.
        let palette = [
            rgb(230, 80, 40),
            rgb(40, 170, 70),
            rgb(40, 90, 220),
            rgb(240, 200, 30),
            rgb(30, 190, 200),
            rgb(150, 80, 30),
            rgb(250, 140, 20),
            rgb(120, 200, 40),
            rgb(90, 40, 160),
            rgb(200, 200, 200),
        ];
        palette[rng.random_range(0..palette.len())]
    };
    let body = hue(&mut rng);
    let mut accent = hue(&mut rng);
    while accent == body {
        accent = hue(&mut rng);
    }
    let stripe = 2 + rng.random_range(0..3usize);
    let horizontal = rng.random::<bool>();
    let n = SPRITE_SIZE;
    let mut img = Image::filled(n, n, [0.0; 3]);
    let mut alpha = Mask::empty(n, n);
    for y in 0..n {
        for x in 0..n {
            if !inside(shape, x, y) {
                continue;
            }
            alpha.set(x, y, true);
            let band = if horizontal { y } else { x };
            let c = if (band / stripe) % 2 == 1 { accent } else { body };
            img.set(x, y, c);
        }
    }
    // Eyes: two dark pixels pairs near the top.
    for (ex, ey) in [(5, 5), (10, 5), (5, 6), (10, 6)] {
        if alpha.get(ex, ey) {
            img.set(ex, ey, rgb(20, 20, 20));
        }
    }
    Sprite { rgb: img, alpha }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholder_spans_full_box() {
        let s = placeholder_sprite();
        let bb = s.alpha.bbox().unwrap();
        assert_eq!((bb.width(), bb.height()), (16, 16));
    }

    #[test]
    fn family_members_differ_and_are_deterministic() {
        let sprites: Vec<Sprite> = (0..9).map(family_sprite).collect();
        for i in 0..9 {
            assert_eq!(sprites[i], family_sprite(i));
            for j in 0..i {
                assert_ne!(sprites[i], sprites[j], "{i} vs {j}");
            }
        }
    }

    #[test]
    fn integer_upscale_repeats_pixels() {
        let s = family_sprite(2);
        let big = s.scaled(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(big.rgb.get(x, y), s.rgb.get(x / 2, y / 2));
                assert_eq!(big.alpha.get(x, y), s.alpha.get(x / 2, y / 2));
            }
        }
    }

    #[test]
    fn png_round_trip() {
        let s = family_sprite(4);
        assert_eq!(Sprite::decode_png(&s.encode_png().unwrap()).unwrap(), s);
    }
}
