use std::fmt;

use serde::{Deserialize, Serialize};

use crate::denoiser::IMAGE_SIZE;
use crate::error::{Error, Result};
use crate::imaging::Image;

/// 8-bit sRGB colour as written in the DSL (`#rrggbb`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rgb8(pub [u8; 3]);

impl Rgb8 {
    pub fn to_f64(self) -> [f64; 3] {
        self.0.map(|c| c as f64 / 255.0)
    }
}

impl fmt::Display for Rgb8 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{:02x}{:02x}{:02x}", self.0[0], self.0[1], self.0[2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientDir {
    Horizontal,
    Vertical,
}

/// Procedural background families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Background {
    Solid { color: Rgb8 },
    /// Linear blend from `from` at the first column/row to `to` at the last.
    Gradient { from: Rgb8, to: Rgb8, dir: GradientDir },
    /// Two-colour lattice anchored at the origin; `a` fills the cell at (0, 0).
    Checker { a: Rgb8, b: Rgb8, cell: usize },
}

impl Background {
    /// Background colour at pixel `(x, y)` of a `size × size` frame, on 8-bit levels.
    pub fn color_at(&self, x: usize, y: usize, size: usize) -> [f64; 3] {
        match *self {
            Background::Solid { color } => color.to_f64(),
            Background::Gradient { from, to, dir } => {
                let pos = match dir {
                    GradientDir::Horizontal => x,
                    GradientDir::Vertical => y,
                };
                let frac = if size > 1 { pos as f64 / (size - 1) as f64 } else { 0.0 };
                let mut out = [0.0; 3];
                for c in 0..3 {
                    let v = from.0[c] as f64 + (to.0[c] as f64 - from.0[c] as f64) * frac;
                    out[c] = v.round() / 255.0;
                }
                out
            }
            Background::Checker { a, b, cell } => {
                if ((x / cell) + (y / cell)) % 2 == 0 {
                    a.to_f64()
                } else {
                    b.to_f64()
                }
            }
        }
    }

    pub fn draw(&self, size: usize) -> Image {
        let mut img = Image::filled(size, size, [0.0; 3]);
        for y in 0..size {
            for x in 0..size {
                img.set(x, y, self.color_at(x, y, size));
            }
        }
        img
    }

    /// DSL form, e.g. `checker(#000000,#ffffff,4)`.
    pub fn to_dsl(&self) -> String {
        match self {
            Background::Solid { color } => format!("solid({color})"),
            Background::Gradient { from, to, dir } => {
                let d = match dir {
                    GradientDir::Horizontal => "horizontal",
                    GradientDir::Vertical => "vertical",
                };
                format!("gradient({from},{to},{d})")
            }
            Background::Checker { a, b, cell } => format!("checker({a},{b},{cell})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Idle,
    MoveLeft,
    MoveRight,
    MoveUp,
    MoveDown,
    Bounce,
}

impl ActionKind {
    pub const ALL: [ActionKind; 6] = [
        ActionKind::Idle,
        ActionKind::MoveLeft,
        ActionKind::MoveRight,
        ActionKind::MoveUp,
        ActionKind::MoveDown,
        ActionKind::Bounce,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            ActionKind::Idle => "idle",
            ActionKind::MoveLeft => "move_left",
            ActionKind::MoveRight => "move_right",
            ActionKind::MoveUp => "move_up",
            ActionKind::MoveDown => "move_down",
            ActionKind::Bounce => "bounce",
        }
    }

    pub fn from_keyword(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.keyword() == word)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    /// Pixels per frame.
    pub speed: usize,
}

impl Action {
    pub fn idle() -> Self {
        Self {
            kind: ActionKind::Idle,
            speed: 0,
        }
    }

    /// Subject displacement `(dx, dy)` at frame `f`.
    pub fn displacement(&self, f: usize) -> (i64, i64) {
        let s = self.speed as i64;
        let f = f as i64;
        match self.kind {
            ActionKind::Idle => (0, 0),
            ActionKind::MoveLeft => (-s * f, 0),
            ActionKind::MoveRight => (s * f, 0),
            ActionKind::MoveUp => (0, -s * f),
            ActionKind::MoveDown => (0, s * f),
            // Triangle wave 0, -1, -2, -1, 0, ... in units of speed.
            ActionKind::Bounce => (0, -s * ((f + 2) % 4 - 2).abs()),
        }
    }

    /// Short natural-language phrase used in denoiser prompts.
    pub fn phrase(&self) -> &'static str {
        match self.kind {
            ActionKind::Idle => "stands still",
            ActionKind::MoveLeft => "walks left",
            ActionKind::MoveRight => "walks right",
            ActionKind::MoveUp => "moves up",
            ActionKind::MoveDown => "moves down",
            ActionKind::Bounce => "bounces",
        }
    }
}

/// Subject placement: centre `(x, y)` and side length `size` of its square box.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Placement {
    pub subject: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl Placement {
    /// Top-left corner of the subject box at displacement `(dx, dy)`.
    pub fn origin(&self, dx: i64, dy: i64) -> (i64, i64) {
        (self.x as i64 - (self.size / 2) as i64 + dx, self.y as i64 - (self.size / 2) as i64 + dy)
    }
}

/// One shot of the story as a structured scene.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: Background,
    pub subject: Option<Placement>,
    pub action: Action,
    pub text: String,
}

impl SceneSpec {
    /// Checks the subject box lies inside the frame at its placement.
    ///
    /// Motion never violates this afterwards: [`SceneSpec::subject_origin`]
    /// stops the subject at the frame edge.
    pub fn check_bounds(&self) -> Result<()> {
        let Some(p) = &self.subject else { return Ok(()) };
        let (x0, y0) = p.origin(0, 0);
        let size = p.size as i64;
        if p.size == 0 || x0 < 0 || y0 < 0 || x0 + size > IMAGE_SIZE as i64 || y0 + size > IMAGE_SIZE as i64 {
            return Err(Error::invalid(format!(
                "subject of size {} centred at ({}, {}) does not fit the {IMAGE_SIZE}x{IMAGE_SIZE} frame",
                p.size, p.x, p.y
            )));
        }
        Ok(())
    }

    /// Top-left corner of the subject box at frame `f`, with the action's
    /// displacement clamped so the box stays inside the frame.
    pub fn subject_origin(&self, f: usize) -> Option<(usize, usize)> {
        let p = self.subject.as_ref()?;
        let (dx, dy) = self.action.displacement(f);
        let (x0, y0) = p.origin(dx, dy);
        let max = IMAGE_SIZE.saturating_sub(p.size) as i64;
        Some((x0.clamp(0, max) as usize, y0.clamp(0, max) as usize))
    }

    /// Canonical DSL text of this scene.
    pub fn to_dsl(&self) -> String {
        let subj = match &self.subject {
            Some(p) => format!("<{}> at ({},{}) size {}", p.subject, p.x, p.y, p.size),
            None => "none".to_string(),
        };
        let act = if self.action.kind != ActionKind::Idle || self.action.speed > 0 {
            format!("{} speed {}", self.action.kind.keyword(), self.action.speed)
        } else {
            self.action.kind.keyword().to_string()
        };
        let text = self.text.replace('\\', "\\\\").replace('"', "\\\"");
        format!("shot {{ bg: {}; subj: {subj}; act: {act}; text: \"{text}\" }}", self.background.to_dsl())
    }

    /// Prompt for the video denoiser built from the structured scene, with
    /// `subject_word` standing for the subject.
    pub fn prompt(&self, subject_word: &str) -> String {
        let speed = match self.action.speed {
            0 => "",
            1 => " slowly",
            _ => " quickly",
        };
        let bg = match self.background {
            Background::Solid { .. } => "solid",
            Background::Gradient { .. } => "gradient",
            Background::Checker { .. } => "checker",
        };
        if self.action.kind == ActionKind::Idle {
            format!("a {subject_word} stands still on a {bg} background")
        } else {
            format!("a {subject_word} {}{speed} on a {bg} background", self.action.phrase())
        }
    }
}
