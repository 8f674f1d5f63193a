//! Strict parser for the scene DSL.
//!
//! ```text
//! storyboard := shot+
//! shot       := "shot" "{" field (";" field)* [";"] "}"
//! field      := "bg" ":" background | "subj" ":" subject
//!             | "act" ":" action | "text" ":" string
//! background := "solid" "(" color ")"
//!             | "gradient" "(" color "," color "," ("horizontal" | "vertical") ")"
//!             | "checker" "(" color "," color "," int ")"
//! subject    := "<" ident ">" "at" "(" int "," int ")" "size" int | "none"
//! action     := ("idle" | "move_left" | "move_right" | "move_up"
//!             | "move_down" | "bounce") ["speed" int]
//! color      := "#" hex{6}
//! ```
//!
//! `bg` and `act` are required, `subj` defaults to `none` and `text` to the
//! empty string. Each field may appear at most once.

use super::scene::{Action, ActionKind, Background, GradientDir, Placement, Rgb8, SceneSpec};
use crate::denoiser::IMAGE_SIZE;
use crate::error::{Error, Result};

/// Largest accepted action speed, in pixels per frame.
pub const MAX_SPEED: usize = 8;
/// Largest accepted checker cell size.
pub const MAX_CELL: usize = 16;
/// Smallest accepted subject size.
pub const MIN_SUBJECT_SIZE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Int(u64),
    Color(Rgb8),
    Str(String),
    Punct(char),
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("'{s}'"),
            Tok::Int(n) => format!("number {n}"),
            Tok::Color(c) => format!("colour {c}"),
            Tok::Str(_) => "string".into(),
            Tok::Punct(c) => format!("'{c}'"),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Clone, Debug)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn err(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn lex(src: &str) -> Result<Vec<Spanned>> {
    let chars: Vec<char> = src.chars().collect();
    let (mut i, mut line, mut col) = (0, 1, 1);
    let mut out = Vec::new();
    while i < chars.len() {
        let c = chars[i];
        let (l0, c0) = (line, col);
        let advance = |i: &mut usize, col: &mut usize, n: usize| {
            *i += n;
            *col += n;
        };
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            advance(&mut i, &mut col, 1);
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                advance(&mut i, &mut col, 1);
            }
            out.push(Spanned {
                tok: Tok::Ident(chars[start..i].iter().collect()),
                line: l0,
                col: c0,
            });
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                advance(&mut i, &mut col, 1);
            }
            let text: String = chars[start..i].iter().collect();
            let n = text.parse().map_err(|_| err(l0, c0, format!("number '{text}' out of range")))?;
            out.push(Spanned { tok: Tok::Int(n), line: l0, col: c0 });
        } else if c == '#' {
            let start = i + 1;
            let mut end = start;
            while end < chars.len() && chars[end].is_ascii_hexdigit() {
                end += 1;
            }
            if end - start != 6 {
                return Err(err(l0, c0, "expected colour of the form #rrggbb"));
            }
            let hex: String = chars[start..end].iter().collect();
            let v = u32::from_str_radix(&hex, 16).expect("validated hex digits");
            let rgb = Rgb8([(v >> 16) as u8, (v >> 8) as u8, v as u8]);
            let n = end - i;
            advance(&mut i, &mut col, n);
            out.push(Spanned { tok: Tok::Color(rgb), line: l0, col: c0 });
        } else if c == '"' {
            advance(&mut i, &mut col, 1);
            let mut s = String::new();
            loop {
                match chars.get(i) {
                    None | Some('\n') => return Err(err(l0, c0, "unterminated string")),
                    Some('"') => {
                        advance(&mut i, &mut col, 1);
                        break;
                    }
                    Some('\\') => {
                        match chars.get(i + 1) {
                            Some(&e @ ('"' | '\\')) => s.push(e),
                            Some('n') => s.push('\n'),
                            _ => return Err(err(line, col, "invalid escape in string")),
                        }
                        advance(&mut i, &mut col, 2);
                    }
                    Some(&ch) => {
                        s.push(ch);
                        advance(&mut i, &mut col, 1);
                    }
                }
            }
            out.push(Spanned { tok: Tok::Str(s), line: l0, col: c0 });
        } else if "{}();:,<>".contains(c) {
            advance(&mut i, &mut col, 1);
            out.push(Spanned { tok: Tok::Punct(c), line: l0, col: c0 });
        } else {
            return Err(err(l0, c0, format!("unexpected character '{c}'")));
        }
    }
    out.push(Spanned { tok: Tok::Eof, line, col });
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Spanned {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Spanned {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn fail<T>(&self, at: &Spanned, expected: &str) -> Result<T> {
        if at.tok == Tok::Eof {
            return Err(err(at.line, at.col, format!("expected {expected}")));
        }
        Err(err(at.line, at.col, format!("expected {expected}, found {}", at.tok.describe())))
    }

    fn punct(&mut self, c: char) -> Result<()> {
        let t = self.next();
        if t.tok == Tok::Punct(c) {
            Ok(())
        } else {
            self.fail(&t, &format!("'{c}'"))
        }
    }

    fn keyword(&mut self, word: &str) -> Result<()> {
        let t = self.next();
        match &t.tok {
            Tok::Ident(s) if s == word => Ok(()),
            _ => self.fail(&t, &format!("'{word}'")),
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, Spanned)> {
        let t = self.next();
        match &t.tok {
            Tok::Ident(s) => Ok((s.clone(), t.clone())),
            _ => self.fail(&t, what),
        }
    }

    fn int(&mut self, what: &str, range: std::ops::RangeInclusive<u64>) -> Result<usize> {
        let t = self.next();
        match t.tok {
            Tok::Int(n) if range.contains(&n) => Ok(n as usize),
            Tok::Int(n) => Err(err(
                t.line,
                t.col,
                format!("{what} {n} out of range {}..={}", range.start(), range.end()),
            )),
            _ => self.fail(&t, what),
        }
    }

    fn color(&mut self) -> Result<Rgb8> {
        let t = self.next();
        match t.tok {
            Tok::Color(c) => Ok(c),
            _ => self.fail(&t, "colour #rrggbb"),
        }
    }

    fn shot(&mut self) -> Result<SceneSpec> {
        let start = self.peek().clone();
        self.keyword("shot")?;
        self.punct('{')?;
        let mut bg: Option<Background> = None;
        let mut subj: Option<Option<Placement>> = None;
        let mut act: Option<Action> = None;
        let mut text: Option<String> = None;
        loop {
            let (name, at) = self.ident("field name (bg, subj, act, text)")?;
            self.punct(':')?;
            let dup = match name.as_str() {
                "bg" => bg.replace(self.background()?).is_some(),
                "subj" => subj.replace(self.subject()?).is_some(),
                "act" => act.replace(self.action()?).is_some(),
                "text" => {
                    let t = self.next();
                    let Tok::Str(s) = t.tok.clone() else { return self.fail(&t, "string") };
                    text.replace(s).is_some()
                }
                other => return Err(err(at.line, at.col, format!("unknown field '{other}'"))),
            };
            if dup {
                return Err(err(at.line, at.col, format!("duplicate field '{name}'")));
            }
            let t = self.next();
            match t.tok {
                Tok::Punct(';') => {
                    if self.peek().tok == Tok::Punct('}') {
                        self.next();
                        break;
                    }
                }
                Tok::Punct('}') => break,
                _ => return self.fail(&t, "';' or '}'"),
            }
        }
        let background = bg.ok_or_else(|| err(start.line, start.col, "shot is missing field 'bg'"))?;
        let action = act.ok_or_else(|| err(start.line, start.col, "shot is missing field 'act'"))?;
        let spec = SceneSpec {
            background,
            subject: subj.unwrap_or(None),
            action,
            text: text.unwrap_or_default(),
        };
        spec.check_bounds().map_err(|e| err(start.line, start.col, e.to_string()))?;
        Ok(spec)
    }

    fn background(&mut self) -> Result<Background> {
        let (kind, at) = self.ident("background (solid, gradient, checker)")?;
        self.punct('(')?;
        let bg = match kind.as_str() {
            "solid" => Background::Solid { color: self.color()? },
            "gradient" => {
                let from = self.color()?;
                self.punct(',')?;
                let to = self.color()?;
                self.punct(',')?;
                let (d, dat) = self.ident("'horizontal' or 'vertical'")?;
                let dir = match d.as_str() {
                    "horizontal" => GradientDir::Horizontal,
                    "vertical" => GradientDir::Vertical,
                    other => return Err(err(dat.line, dat.col, format!("unknown gradient direction '{other}'"))),
                };
                Background::Gradient { from, to, dir }
            }
            "checker" => {
                let a = self.color()?;
                self.punct(',')?;
                let b = self.color()?;
                self.punct(',')?;
                let cell = self.int("checker cell size", 1..=MAX_CELL as u64)?;
                Background::Checker { a, b, cell }
            }
            other => return Err(err(at.line, at.col, format!("unknown background '{other}'"))),
        };
        self.punct(')')?;
        Ok(bg)
    }

    fn subject(&mut self) -> Result<Option<Placement>> {
        let t = self.peek().clone();
        match &t.tok {
            Tok::Ident(s) if s == "none" => {
                self.next();
                return Ok(None);
            }
            Tok::Punct('<') => {
                self.next();
            }
            _ => {
                self.next();
                return self.fail(&t, "'<name>' or 'none'");
            }
        }
        let (subject, _) = self.ident("subject name")?;
        self.punct('>')?;
        self.keyword("at")?;
        self.punct('(')?;
        let max = IMAGE_SIZE as u64 - 1;
        let x = self.int("x coordinate", 0..=max)?;
        self.punct(',')?;
        let y = self.int("y coordinate", 0..=max)?;
        self.punct(')')?;
        self.keyword("size")?;
        let size_at = self.peek().clone();
        let size = self.int("size", MIN_SUBJECT_SIZE as u64..=IMAGE_SIZE as u64)?;
        let p = Placement { subject, x, y, size };
        let probe = SceneSpec {
            background: Background::Solid { color: Rgb8([0; 3]) },
            subject: Some(p.clone()),
            action: Action::idle(),
            text: String::new(),
        };
        probe.check_bounds().map_err(|e| err(size_at.line, size_at.col, strip_prefix(e)))?;
        Ok(Some(p))
    }

    fn action(&mut self) -> Result<Action> {
        let (word, at) = self.ident("action")?;
        let kind = ActionKind::from_keyword(&word).ok_or_else(|| err(at.line, at.col, format!("unknown action '{word}'")))?;
        let mut speed = if kind == ActionKind::Idle { 0 } else { 1 };
        if matches!(&self.peek().tok, Tok::Ident(s) if s == "speed") {
            self.next();
            speed = self.int("speed", 0..=MAX_SPEED as u64)?;
        }
        Ok(Action { kind, speed })
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::InvalidArgument(m) => m,
        other => other.to_string(),
    }
}

/// Parses a sequence of one or more shots.
pub fn parse_storyboard(src: &str) -> Result<Vec<SceneSpec>> {
    let mut p = Parser { toks: lex(src)?, pos: 0 };
    let mut shots = vec![p.shot()?];
    while p.peek().tok != Tok::Eof {
        shots.push(p.shot()?);
    }
    Ok(shots)
}

/// Parses exactly one shot.
pub fn parse_scene(src: &str) -> Result<SceneSpec> {
    let mut p = Parser { toks: lex(src)?, pos: 0 };
    let spec = p.shot()?;
    let t = p.peek().clone();
    if t.tok != Tok::Eof {
        return p.fail(&t, "end of input after one shot");
    }
    Ok(spec)
}
