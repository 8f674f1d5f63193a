//! Exact latent codec: space-to-depth over 4×4×3 patches, then `x ↦ 2x − 1`.
//!
//! Channel `c` of latent position `(i, j)` holds pixel
//! `(4i + py, 4j + px)` colour `ch`, where `c = (py·4 + px)·3 + ch`.

use super::config::{IMAGE_SIZE, LATENT_CHANNELS, LATENT_SIDE, PATCH, PIXEL_CHANNELS};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::imaging::Image;

fn check_frame(frame: &Image) -> Result<()> {
    if frame.width() != IMAGE_SIZE || frame.height() != IMAGE_SIZE {
        return Err(Error::shape(
            "latent_encode",
            format!("{IMAGE_SIZE}x{IMAGE_SIZE} frame"),
            format!("{}x{}", frame.width(), frame.height()),
        ));
    }
    Ok(())
}

/// Encodes one frame into `[C, h, w]` values appended to `out`.
fn encode_frame(frame: &Image, out: &mut Vec<f64>) {
    let plane = LATENT_SIDE * LATENT_SIDE;
    let base = out.len();
    out.resize(base + LATENT_CHANNELS * plane, 0.0);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let rgb = frame.get(x, y);
            let (i, py, j, px) = (y / PATCH, y % PATCH, x / PATCH, x % PATCH);
            for (ch, v) in rgb.iter().enumerate() {
                let c = (py * PATCH + px) * PIXEL_CHANNELS + ch;
                out[base + c * plane + i * LATENT_SIDE + j] = 2.0 * v - 1.0;
            }
        }
    }
}

/// Pixel video `[F, 32, 32, 3]` to latent `[F, 48, 8, 8]`.
pub fn latent_encode(frames: &[Image]) -> Result<Tensor> {
    if frames.is_empty() {
        return Err(Error::invalid("latent_encode needs at least one frame"));
    }
    let mut data = Vec::with_capacity(frames.len() * LATENT_CHANNELS * LATENT_SIDE * LATENT_SIDE);
    for frame in frames {
        check_frame(frame)?;
        encode_frame(frame, &mut data);
    }
    Tensor::new(vec![frames.len(), LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE], data)
}

/// Single frame to `[48, 8, 8]`.
pub fn latent_encode_frame(frame: &Image) -> Result<Tensor> {
    check_frame(frame)?;
    let mut data = Vec::new();
    encode_frame(frame, &mut data);
    Tensor::new(vec![LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE], data)
}

/// Latent `[F, 48, 8, 8]` back to pixels, clamped to `[0, 1]`.
pub fn latent_decode(z: &Tensor) -> Result<Vec<Image>> {
    let s = z.shape();
    if s.len() != 4 || s[1] != LATENT_CHANNELS || s[2] != LATENT_SIDE || s[3] != LATENT_SIDE {
        return Err(Error::shape(
            "latent_decode",
            format!("[F, {LATENT_CHANNELS}, {LATENT_SIDE}, {LATENT_SIDE}]"),
            format!("{s:?}"),
        ));
    }
    let plane = LATENT_SIDE * LATENT_SIDE;
    let per_frame = LATENT_CHANNELS * plane;
    let mut video = Vec::with_capacity(s[0]);
    for f in 0..s[0] {
        let src = &z.data()[f * per_frame..(f + 1) * per_frame];
        let mut px = vec![0.0; IMAGE_SIZE * IMAGE_SIZE * PIXEL_CHANNELS];
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let (i, py, j, pxo) = (y / PATCH, y % PATCH, x / PATCH, x % PATCH);
                for ch in 0..PIXEL_CHANNELS {
                    let c = (py * PATCH + pxo) * PIXEL_CHANNELS + ch;
                    let v = (src[c * plane + i * LATENT_SIDE + j] + 1.0) / 2.0;
                    px[(y * IMAGE_SIZE + x) * PIXEL_CHANNELS + ch] = v.clamp(0.0, 1.0);
                }
            }
        }
        video.push(Image::new(IMAGE_SIZE, IMAGE_SIZE, px)?);
    }
    Ok(video)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn midpoint_maps_to_zero() {
        let v = vec![Image::filled(32, 32, [0.5; 3]); 2];
        let z = latent_encode(&v).unwrap();
        assert_eq!(z.shape(), &[2, 48, 8, 8]);
        assert!(z.data().iter().all(|&x| x == 0.0));
        assert_eq!(latent_decode(&Tensor::zeros(&[1, 48, 8, 8])).unwrap()[0], Image::filled(32, 32, [0.5; 3]));
    }

    #[test]
    fn single_white_pixel_lands_in_patch_offset_channel() {
        let mut img = Image::filled(32, 32, [0.0; 3]);
        img.set(0, 0, [1.0, 1.0, 1.0]);
        let z = latent_encode(&[img]).unwrap();
        let at = |c: usize, i: usize, j: usize| z.data()[c * 64 + i * 8 + j];
        assert_eq!(at(0, 0, 0), 1.0);
        assert_eq!(at(1, 0, 0), 1.0);
        assert_eq!(at(3, 0, 0), -1.0);
        assert_eq!(at(0, 0, 1), -1.0);
        assert_eq!(z.data().iter().filter(|&&v| v == 1.0).count(), 3);
    }

    #[test]
    fn decode_clamps() {
        let out = latent_decode(&Tensor::full(&[1, 48, 8, 8], 3.0)).unwrap();
        assert!(out[0].data().iter().all(|&v| v == 1.0));
        assert!(latent_decode(&Tensor::zeros(&[1, 47, 8, 8])).is_err());
        assert!(latent_encode(&[Image::filled(16, 32, [0.0; 3])]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_is_exact_on_8bit_levels(levels in proptest::collection::vec(0u8..=255, 32 * 32 * 3 * 2)) {
            // k/255 is not dyadic, so equality holds on the 8-bit levels, not on the doubles.
            let frames: Vec<Image> = levels
                .chunks(32 * 32 * 3)
                .map(|c| Image::from_rgb8(32, 32, c).unwrap())
                .collect();
            let back = latent_decode(&latent_encode(&frames).unwrap()).unwrap();
            for (a, b) in back.iter().zip(&frames) {
                prop_assert_eq!(a.to_rgb8(), b.to_rgb8());
                prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= 1e-15));
            }
        }

        #[test]
        fn round_trip_is_exact_on_fine_grid(ticks in proptest::collection::vec(0u32..=(1 << 20), 32 * 32 * 3)) {
            let data = ticks.iter().map(|&t| t as f64 / (1u32 << 20) as f64).collect();
            let frame = Image::new(32, 32, data).unwrap();
            prop_assert_eq!(&latent_decode(&latent_encode(&[frame.clone()]).unwrap()).unwrap()[0], &frame);
        }
    }
}
