use rand::Rng;
use serde::{Deserialize, Serialize};

use super::redraw::redraw;
use super::render::{render_clip, render_scene};
use super::scene::{Action, ActionKind, Background, GradientDir, Placement, Rgb8, SceneSpec};
use super::segment::{remove_subject, segment_subject};
use super::sprites::Sprite;
use crate::denoiser::{IMAGE_SIZE, PLACEHOLDER};
use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};
use crate::lora_be::ReferenceClip;

/// A customized subject: its canonical sprite and the reference clips used
/// to fine-tune the video model on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub id: String,
    pub sprite: Sprite,
    pub clips: Vec<ReferenceClip>,
}

impl SubjectProfile {
    pub fn new(id: impl Into<String>, sprite: Sprite, clips: Vec<ReferenceClip>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::invalid("a subject profile needs at least one reference clip"));
        }
        for clip in &clips {
            clip.check_geometry()?;
        }
        Ok(Self {
            id: id.into(),
            sprite,
            clips,
        })
    }

    /// Profile whose reference clips are rendered from `count` seeded scenes
    /// of `sprite` moving over random backgrounds.
    pub fn synthesize(id: impl Into<String>, sprite: Sprite, count: usize, frames: usize, rng: &mut (impl Rng + ?Sized)) -> Result<Self> {
        let clips = (0..count)
            .map(|_| {
                let spec = random_scene(rng, "subject", 10..=16);
                reference_clip(&spec, &sprite, frames)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(id, sprite, clips)
    }
}

/// Renders a scene with `sprite` into a reference clip whose prompt uses the placeholder.
pub fn reference_clip(spec: &SceneSpec, sprite: &Sprite, frames: usize) -> Result<ReferenceClip> {
    let (images, masks) = render_clip(spec, Some(sprite), frames);
    ReferenceClip::new(images, masks, spec.prompt(PLACEHOLDER))
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> Rgb8 {
    // Keep clear of the placeholder sprite's magenta so segmentation has contrast.
    loop {
        let c = Rgb8([rng.random(), rng.random(), rng.random()]);
        let near = (c.0[0] as i32 - 255).abs() < 64 && (c.0[1] as i32).abs() < 64 && (c.0[2] as i32 - 255).abs() < 64;
        if !near {
            return c;
        }
    }
}

/// Seeded random background from any of the three families.
pub fn random_background<R: Rng + ?Sized>(rng: &mut R) -> Background {
    match rng.random_range(0..3) {
        0 => Background::Solid {
            color: random_color(rng),
        },
        1 => Background::Gradient {
            from: random_color(rng),
            to: random_color(rng),
            dir: if rng.random() {
                GradientDir::Horizontal
            } else {
                GradientDir::Vertical
            },
        },
        _ => Background::Checker {
            a: random_color(rng),
            b: random_color(rng),
            cell: rng.random_range(2..=8),
        },
    }
}

/// Seeded random scene with a subject of side within `sizes`, a random
/// action (speed ≤ 2) and a matching shot text.
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R, subject: &str, sizes: std::ops::RangeInclusive<usize>) -> SceneSpec {
    let background = random_background(rng);
    let size = rng.random_range(sizes);
    let lo = size / 2;
    let hi = IMAGE_SIZE - (size - size / 2);
    let x = rng.random_range(lo..=hi);
    let y = rng.random_range(lo..=hi);
    let kind = ActionKind::ALL[rng.random_range(0..ActionKind::ALL.len())];
    let speed = if kind == ActionKind::Idle { 0 } else { rng.random_range(1..=2) };
    let action = Action { kind, speed };
    let mut spec = SceneSpec {
        background,
        subject: Some(Placement {
            subject: subject.to_string(),
            x,
            y,
            size,
        }),
        action,
        text: String::new(),
    };
    spec.text = spec.prompt(subject);
    spec
}

/// How the storyboard stills are obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum Protocol {
    /// Render with the placeholder sprite, segment, remove, redraw.
    Fresh,
    /// Evaluation variant: backgrounds and masks are given per shot; only redraw runs.
    GivenBackgrounds(Vec<(Image, Mask)>),
}

/// One finished shot. `initial` is the raw generated still, `background`
/// the still with the subject removed and `image` the redrawn final still.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoryboardShot {
    pub index: usize,
    pub spec: SceneSpec,
    pub initial: Image,
    pub mask: Mask,
    pub background: Image,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotFailure {
    pub index: usize,
    pub reason: String,
}

/// Completed shots in shot order plus the shots that failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Storyboard {
    pub shots: Vec<StoryboardShot>,
    pub failures: Vec<ShotFailure>,
}

impl Storyboard {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn shot(&self, index: usize) -> Option<&StoryboardShot> {
        self.shots.iter().find(|s| s.index == index)
    }

    /// Persisted files as `(name, bytes)`: PNG stills, PGM masks and a JSON
    /// manifest with the scene DSL and failures. Byte-deterministic.
    pub fn artifacts(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let mut out = Vec::new();
        for s in &self.shots {
            let i = s.index;
            out.push((format!("shot_{i:02}_initial.png"), s.initial.encode_png()?));
            out.push((format!("shot_{i:02}_mask.pgm"), s.mask.encode_pgm()));
            out.push((format!("shot_{i:02}_background.png"), s.background.encode_png()?));
            out.push((format!("shot_{i:02}_final.png"), s.image.encode_png()?));
        }
        let manifest = serde_json::json!({
            "shots": self.shots.iter().map(|s| serde_json::json!({
                "index": s.index,
                "scene": s.spec.to_dsl(),
                "mask_pixels": s.mask.count(),
            })).collect::<Vec<_>>(),
            "failures": self.failures,
        });
        out.push(("storyboard.json".to_string(), serde_json::to_vec_pretty(&manifest)?));
        Ok(out)
    }

    pub fn write_dir(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in self.artifacts()? {
            std::fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }
}

fn fresh_shot(index: usize, spec: &SceneSpec, sprite: &Sprite) -> Result<StoryboardShot> {
    spec.check_bounds()?;
    let (initial, _) = render_scene(spec, None);
    let seg = segment_subject(&initial);
    if seg.empty {
        return Err(Error::invalid("segmentation found no subject"));
    }
    let background = remove_subject(&initial, &seg.mask);
    let image = redraw(&background, &seg.mask, sprite)?;
    Ok(StoryboardShot {
        index,
        spec: spec.clone(),
        initial,
        mask: seg.mask,
        background,
        image,
    })
}

fn given_shot(index: usize, spec: &SceneSpec, background: &Image, mask: &Mask, sprite: &Sprite) -> Result<StoryboardShot> {
    if background.width() != mask.width() || background.height() != mask.height() {
        return Err(Error::shape(
            "given background",
            format!("{}x{}", background.width(), background.height()),
            format!("mask {}x{}", mask.width(), mask.height()),
        ));
    }
    if mask.is_empty() {
        return Err(Error::invalid("given mask is empty"));
    }
    let image = redraw(background, mask, sprite)?;
    Ok(StoryboardShot {
        index,
        spec: spec.clone(),
        initial: background.clone(),
        mask: mask.clone(),
        background: background.clone(),
        image,
    })
}

/// Runs the storyboard pipeline for every shot. Shots are independent: a
/// failing shot is reported in `failures` and the others still complete.
pub fn generate_storyboard(specs: &[SceneSpec], profile: &SubjectProfile, protocol: &Protocol) -> Result<Storyboard> {
    if specs.is_empty() {
        return Err(Error::invalid("a storyboard needs at least one shot"));
    }
    if let Protocol::GivenBackgrounds(given) = protocol {
        if given.len() != specs.len() {
            return Err(Error::shape(
                "generate_storyboard",
                format!("{} backgrounds", specs.len()),
                format!("{} backgrounds", given.len()),
            ));
        }
    }
    let mut board = Storyboard {
        shots: Vec::new(),
        failures: Vec::new(),
    };
    for (index, spec) in specs.iter().enumerate() {
        let shot = match protocol {
            Protocol::Fresh => fresh_shot(index, spec, &profile.sprite),
            Protocol::GivenBackgrounds(given) => given_shot(index, spec, &given[index].0, &given[index].1, &profile.sprite),
        };
        match shot {
            Ok(s) => board.shots.push(s),
            Err(e) => {
                tracing::warn!(shot = index, error = %e, "storyboard shot failed");
                board.failures.push(ShotFailure {
                    index,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(board)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storyboard::sprites::family_sprite;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn profile() -> SubjectProfile {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        SubjectProfile::synthesize("kitty", family_sprite(8), 2, 4, &mut rng).unwrap()
    }

    fn specs(seed: u64, n: usize) -> Vec<SceneSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| random_scene(&mut rng, "subject", 10..=16)).collect()
    }

    #[test]
    fn fresh_run_recovers_truth_masks() {
        let specs = specs(42, 4);
        let board = generate_storyboard(&specs, &profile(), &Protocol::Fresh).unwrap();
        assert!(board.is_complete());
        assert_eq!(board.shots.len(), 4);
        for s in &board.shots {
            let truth = render_scene(&s.spec, None).1;
            assert!(s.mask.iou(&truth) >= 0.9, "shot {}: {}", s.index, s.mask.iou(&truth));
            let bb = s.mask.bbox().unwrap();
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    if !bb.contains(x, y) {
                        assert_eq!(s.image.get(x, y), s.background.get(x, y));
                    }
                }
            }
        }
    }

    #[test]
    fn empty_given_mask_fails_only_that_shot() {
        let specs = specs(7, 4);
        let given: Vec<(Image, Mask)> = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (_, mask) = render_scene(s, None);
                let mask = if i == 2 { Mask::empty(32, 32) } else { mask };
                (s.background.draw(IMAGE_SIZE), mask)
            })
            .collect();
        let board = generate_storyboard(&specs, &profile(), &Protocol::GivenBackgrounds(given)).unwrap();
        assert_eq!(board.failures.len(), 1);
        assert_eq!(board.failures[0].index, 2);
        assert_eq!(board.shots.iter().map(|s| s.index).collect::<Vec<_>>(), vec![0, 1, 3]);
    }

    #[test]
    fn storyboard_artifacts_are_byte_identical() {
        let specs = specs(9, 3);
        let a = generate_storyboard(&specs, &profile(), &Protocol::Fresh).unwrap();
        let b = generate_storyboard(&specs, &profile(), &Protocol::Fresh).unwrap();
        assert_eq!(a.artifacts().unwrap(), b.artifacts().unwrap());
    }

    #[test]
    fn profile_needs_a_clip() {
        assert!(SubjectProfile::new("x", family_sprite(0), vec![]).is_err());
        assert!(generate_storyboard(&[], &profile(), &Protocol::Fresh).is_err());
    }
}
