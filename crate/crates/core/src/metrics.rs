//! Reference image/video metrics on the 8-bit scale: PSNR, block SSIM,
//! temporal consistency and subject fidelity.

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};
use crate::storyboard::{redraw, Sprite};

pub const PEAK: f64 = 255.0;
/// SSIM window side (non-overlapping).
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = (0.01 * PEAK) * (0.01 * PEAK);
pub const SSIM_C2: f64 = (0.03 * PEAK) * (0.03 * PEAK);
pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn same_shape(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::shape(
            op,
            format!("{}x{}", a.width(), a.height()),
            format!("{}x{}", b.width(), b.height()),
        ));
    }
    Ok(())
}

/// `10·log10(255² / MSE)` over 8-bit-scaled values; identical inputs give `+∞`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_shape("psnr", a, b)?;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) * PEAK).powi(2))
        .sum();
    Ok(psnr_from_mse(sse / a.data().len() as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PEAK * PEAK / mse).log10()
    }
}

/// PSNR over whole videos (pooled MSE).
pub fn psnr_video(a: &[Image], b: &[Image]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("psnr_video", format!("{} frames", a.len()), format!("{} frames", b.len())));
    }
    let mut sse = 0.0;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b) {
        same_shape("psnr_video", x, y)?;
        sse += x.data().iter().zip(y.data()).map(|(p, q)| ((p - q) * PEAK).powi(2)).sum::<f64>();
        n += x.data().len();
    }
    Ok(psnr_from_mse(sse / n as f64))
}

/// Reflect-101 index into `0..n` for any integer position.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Plane of one channel on the 255 scale, reflection-padded to a multiple of the window.
fn padded_plane(img: &Image, ch: usize) -> (Vec<f64>, usize, usize) {
    let (w, h) = (img.width(), img.height());
    let pw = w.div_ceil(SSIM_WINDOW) * SSIM_WINDOW;
    let ph = h.div_ceil(SSIM_WINDOW) * SSIM_WINDOW;
    let mut out = Vec::with_capacity(pw * ph);
    for y in 0..ph {
        for x in 0..pw {
            out.push(img.get(reflect(x, w), reflect(y, h))[ch] * PEAK);
        }
    }
    (out, pw, ph)
}

fn window_ssim(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let cov = |p: &[f64], mp: f64, q: &[f64], mq: f64| p.iter().zip(q).map(|(x, y)| (x - mp) * (y - mq)).sum::<f64>() / n;
    let var_a = cov(a, mu_a, a, mu_a);
    let var_b = cov(b, mu_b, b, mu_b);
    let cov_ab = cov(a, mu_a, b, mu_b);
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov_ab + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

/// Mean SSIM over non-overlapping 8×8 windows, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut wa = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut wb = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for ch in 0..3 {
        let (pa, pw, ph) = padded_plane(a, ch);
        let (pb, _, _) = padded_plane(b, ch);
        for by in (0..ph).step_by(SSIM_WINDOW) {
            for bx in (0..pw).step_by(SSIM_WINDOW) {
                wa.clear();
                wb.clear();
                for y in by..by + SSIM_WINDOW {
                    wa.extend_from_slice(&pa[y * pw + bx..y * pw + bx + SSIM_WINDOW]);
                    wb.extend_from_slice(&pb[y * pw + bx..y * pw + bx + SSIM_WINDOW]);
                }
                total += window_ssim(&wa, &wb);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean SSIM between consecutive frames.
pub fn temporal_consistency(video: &[Image]) -> Result<f64> {
    if video.len() < 2 {
        return Err(Error::invalid("temporal consistency needs at least two frames"));
    }
    let mut total = 0.0;
    for pair in video.windows(2) {
        total += ssim(&pair[0], &pair[1])?;
    }
    Ok(total / (video.len() - 1) as f64)
}

/// Subject fidelity with the number of frames skipped for empty masks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fidelity {
    pub value: f64,
    pub skipped_frames: usize,
}

/// Mean over frames of SSIM inside the mask's bounding box between the video
/// crop and the same crop with the canonical sprite (scaled to the box as in
/// redrawing) composited on top.
pub fn subject_fidelity(video: &[Image], masks: &[Mask], sprite: &Sprite) -> Result<Fidelity> {
    if video.len() != masks.len() {
        return Err(Error::shape("subject_fidelity", format!("{} masks", video.len()), format!("{} masks", masks.len())));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for (frame, mask) in video.iter().zip(masks) {
        let Some(bb) = mask.bbox() else { continue };
        let reference = redraw(frame, mask, sprite)?;
        let a = frame.crop(bb.x0, bb.y0, bb.width(), bb.height())?;
        let b = reference.crop(bb.x0, bb.y0, bb.width(), bb.height())?;
        total += ssim(&a, &b)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::invalid("subject fidelity: every frame has an empty mask"));
    }
    Ok(Fidelity {
        value: total / used as f64,
        skipped_frames: video.len() - used,
    })
}

/// Metric value that serializes `±∞` as the strings `"inf"` / `"-inf"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValue(pub f64);

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else if self.0 == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for MetricValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(MetricValue(v)),
            Raw::Text(t) if t == "inf" => Ok(MetricValue(f64::INFINITY)),
            Raw::Text(t) if t == "-inf" => Ok(MetricValue(f64::NEG_INFINITY)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid metric value '{t}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub peak: f64,
    pub ssim_window: usize,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            peak: PEAK,
            ssim_window: SSIM_WINDOW,
            ssim_c1: SSIM_C1,
            ssim_c2: SSIM_C2,
        }
    }
}

/// Per-shot metric values plus their arithmetic means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub config: MetricConfig,
    pub shots: Vec<IndexMap<String, MetricValue>>,
    pub aggregate: IndexMap<String, MetricValue>,
}

impl MetricReport {
    /// Builds the report; every shot must carry the same metric names.
    pub fn from_shots(shots: Vec<IndexMap<String, f64>>) -> Result<Self> {
        let mut aggregate = IndexMap::new();
        if let Some(first) = shots.first() {
            for name in first.keys() {
                let mut sum = 0.0;
                for (i, s) in shots.iter().enumerate() {
                    sum += *s
                        .get(name)
                        .ok_or_else(|| Error::invalid(format!("shot {i} lacks metric '{name}'")))?;
                }
                aggregate.insert(name.clone(), MetricValue(sum / shots.len() as f64));
            }
        }
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            config: MetricConfig::default(),
            shots: shots
                .into_iter()
                .map(|s| s.into_iter().map(|(k, v)| (k, MetricValue(v))).collect())
                .collect(),
            aggregate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storyboard::family_sprite;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image::new(w, h, (0..w * h * 3).map(|_| rng.random_range(0..=255u8) as f64 / 255.0).collect()).unwrap()
    }

    #[test]
    fn psnr_identical_is_infinite_and_serializes_as_inf() {
        let a = Image::filled(4, 4, [0.2; 3]);
        let p = psnr(&a, &a).unwrap();
        assert_eq!(p, f64::INFINITY);
        assert_eq!(serde_json::to_string(&MetricValue(p)).unwrap(), "\"inf\"");
        let back: MetricValue = serde_json::from_str("\"inf\"").unwrap();
        assert_eq!(back.0, f64::INFINITY);
    }

    #[test]
    fn psnr_at_unit_mse() {
        let a = Image::filled(8, 8, [100.0 / 255.0; 3]);
        let b = Image::filled(8, 8, [101.0 / 255.0; 3]);
        assert!((psnr(&a, &b).unwrap() - 48.1308).abs() < 1e-3);
        assert!((psnr_from_mse(1.0) - 20.0 * 255f64.log10()).abs() < 1e-12);
        assert!(psnr(&a, &Image::filled(4, 8, [0.0; 3])).is_err());
    }

    #[test]
    fn ssim_constant_patches_match_closed_form() {
        let a = Image::filled(8, 8, [100.0 / 255.0; 3]);
        let b = Image::filled(8, 8, [120.0 / 255.0; 3]);
        let (m1, m2) = (100.0, 120.0);
        let oracle = (2.0 * m1 * m2 + SSIM_C1) * SSIM_C2 / ((m1 * m1 + m2 * m2 + SSIM_C1) * SSIM_C2);
        assert!((ssim(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn ssim_handles_non_multiple_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 13, 5);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let b = random_image(&mut rng, 13, 5);
        assert!(ssim(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn temporal_consistency_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_image(&mut rng, 16, 16);
        assert_eq!(temporal_consistency(&[f.clone(), f.clone(), f.clone()]).unwrap(), 1.0);
        let v: Vec<Image> = (0..3).map(|_| random_image(&mut rng, 16, 16)).collect();
        let oracle = (ssim(&v[0], &v[1]).unwrap() + ssim(&v[1], &v[2]).unwrap()) / 2.0;
        assert_eq!(temporal_consistency(&v).unwrap(), oracle);
        let rev: Vec<Image> = v.iter().rev().cloned().collect();
        assert_eq!(temporal_consistency(&rev).unwrap(), oracle);
        assert!(temporal_consistency(&v[..1]).is_err());
    }

    #[test]
    fn subject_fidelity_orders_redraw_above_noise() {
        let sprite = family_sprite(6);
        let mut mask = Mask::empty(32, 32);
        for y in 4..20 {
            for x in 8..24 {
                mask.set(x, y, true);
            }
        }
        let bg = Image::filled(32, 32, [0.3, 0.6, 0.2]);
        let frame = redraw(&bg, &mask, &sprite).unwrap();
        let exact = subject_fidelity(&[frame.clone(), frame], &[mask.clone(), mask.clone()], &sprite).unwrap();
        assert_eq!(exact.value, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = vec![random_image(&mut rng, 32, 32), random_image(&mut rng, 32, 32)];
        let noisy = subject_fidelity(&noise, &[mask.clone(), mask.clone()], &sprite).unwrap();
        assert!(noisy.value < exact.value);
        let empty = Mask::empty(32, 32);
        assert!(subject_fidelity(&noise, &[empty.clone(), empty], &sprite).is_err());
    }

    #[test]
    fn report_aggregates_means() {
        let shots = vec![
            IndexMap::from([("ssim".to_string(), 0.5), ("psnr".to_string(), 30.0)]),
            IndexMap::from([("ssim".to_string(), 0.7), ("psnr".to_string(), 20.0)]),
        ];
        let r = MetricReport::from_shots(shots).unwrap();
        assert!((r.aggregate["ssim"].0 - 0.6).abs() < 1e-15);
        assert_eq!(r.aggregate["psnr"].0, 25.0);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<MetricReport>(&json).unwrap(), r);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn metrics_are_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, 16, 16);
            let b = random_image(&mut rng, 16, 16);
            prop_assert_eq!(ssim(&a, &b).unwrap().to_bits(), ssim(&b, &a).unwrap().to_bits());
            prop_assert_eq!(psnr(&a, &b).unwrap().to_bits(), psnr(&b, &a).unwrap().to_bits());
            prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
