//! Toy subject segmenter and background remover.
//!
//! A background model is fitted to the 2-pixel border ring (solid: per-channel
//! median; gradient: per-channel least-squares line along rows or columns;
//! checker: two-colour lattice, cell 1..=16). Pixels whose max channel
//! residual exceeds [`TAU`] are foreground; the largest 4-connected component
//! is the subject.

use serde::{Deserialize, Serialize};

use crate::imaging::{quantize_level, Image, Mask};

/// Per-channel residual threshold.
pub const TAU: f64 = 30.0 / 255.0;
/// Components smaller than this are not accepted as a subject.
pub const MIN_AREA: usize = 4;
const RING: usize = 2;

/// Fitted background model; predictions are on 8-bit levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackgroundModel {
    Solid { color: [f64; 3] },
    Gradient { vertical: bool, offset: [f64; 3], slope: [f64; 3] },
    Checker { cell: usize, a: [f64; 3], b: [f64; 3] },
}

impl BackgroundModel {
    pub fn predict(&self, x: usize, y: usize) -> [f64; 3] {
        match self {
            BackgroundModel::Solid { color } => *color,
            BackgroundModel::Gradient { vertical, offset, slope } => {
                let t = if *vertical { y } else { x } as f64;
                std::array::from_fn(|c| quantize_level(offset[c] + slope[c] * t))
            }
            BackgroundModel::Checker { cell, a, b } => {
                if ((x / cell) + (y / cell)) % 2 == 0 {
                    *a
                } else {
                    *b
                }
            }
        }
    }

    /// Model complexity rank used to break ties (simplest first).
    fn complexity(&self) -> usize {
        match self {
            BackgroundModel::Solid { .. } => 0,
            BackgroundModel::Gradient { .. } => 1,
            BackgroundModel::Checker { .. } => 2,
        }
    }
}

fn residual(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0, f64::max)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_color(pixels: &[[f64; 3]]) -> [f64; 3] {
    std::array::from_fn(|c| {
        let mut v: Vec<f64> = pixels.iter().map(|p| p[c]).collect();
        quantize_level(median(&mut v))
    })
}

/// Border-ring samples `(x, y, rgb)`, skipping excluded pixels.
fn ring_samples(img: &Image, exclude: Option<&Mask>) -> Vec<(usize, usize, [f64; 3])> {
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let on_ring = x < RING || y < RING || x + RING >= w || y + RING >= h;
            if on_ring && !exclude.is_some_and(|m| m.get(x, y)) {
                out.push((x, y, img.get(x, y)));
            }
        }
    }
    out
}

fn fit_line(samples: &[(f64, [f64; 3])]) -> Option<([f64; 3], [f64; 3])> {
    let n = samples.len() as f64;
    if samples.len() < 2 {
        return None;
    }
    let mean_t = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let var_t = samples.iter().map(|s| (s.0 - mean_t).powi(2)).sum::<f64>();
    if var_t == 0.0 {
        return None;
    }
    let mut offset = [0.0; 3];
    let mut slope = [0.0; 3];
    for c in 0..3 {
        let mean_v = samples.iter().map(|s| s.1[c]).sum::<f64>() / n;
        let cov = samples.iter().map(|s| (s.0 - mean_t) * (s.1[c] - mean_v)).sum::<f64>();
        slope[c] = cov / var_t;
        offset[c] = mean_v - slope[c] * mean_t;
    }
    Some((offset, slope))
}

fn fit_gradient(ring: &[(usize, usize, [f64; 3])], vertical: bool) -> Option<BackgroundModel> {
    let coord = |x: usize, y: usize| if vertical { y } else { x } as f64;
    let mut samples: Vec<(f64, [f64; 3])> = ring.iter().map(|&(x, y, p)| (coord(x, y), p)).collect();
    let mut model = None;
    // Two robust refits drop samples the previous fit marks as foreground.
    for _ in 0..3 {
        let (offset, slope) = fit_line(&samples)?;
        let m = BackgroundModel::Gradient { vertical, offset, slope };
        let kept: Vec<(f64, [f64; 3])> = ring
            .iter()
            .filter(|&&(x, y, p)| residual(m.predict(x, y), p) <= TAU)
            .map(|&(x, y, p)| (coord(x, y), p))
            .collect();
        model = Some(m);
        if kept.len() == samples.len() || kept.len() < 2 {
            break;
        }
        samples = kept;
    }
    model
}

fn fit_checker(ring: &[(usize, usize, [f64; 3])], cell: usize) -> Option<BackgroundModel> {
    let (mut even, mut odd) = (Vec::new(), Vec::new());
    for &(x, y, p) in ring {
        if ((x / cell) + (y / cell)) % 2 == 0 {
            even.push(p);
        } else {
            odd.push(p);
        }
    }
    if even.is_empty() || odd.is_empty() {
        return None;
    }
    Some(BackgroundModel::Checker {
        cell,
        a: median_color(&even),
        b: median_color(&odd),
    })
}

/// Robust ring score: mean residual truncated at τ.
fn score(model: &BackgroundModel, ring: &[(usize, usize, [f64; 3])]) -> f64 {
    ring.iter()
        .map(|&(x, y, p)| residual(model.predict(x, y), p).min(TAU))
        .sum::<f64>()
        / ring.len() as f64
}

/// Fits the best background model on the border ring, ignoring `exclude`d pixels.
pub fn fit_background(img: &Image, exclude: Option<&Mask>) -> BackgroundModel {
    let mut ring = ring_samples(img, exclude);
    if ring.is_empty() {
        ring = ring_samples(img, None);
    }
    let pixels: Vec<[f64; 3]> = ring.iter().map(|s| s.2).collect();
    let mut candidates = vec![BackgroundModel::Solid {
        color: median_color(&pixels),
    }];
    candidates.extend([false, true].into_iter().filter_map(|v| fit_gradient(&ring, v)));
    candidates.extend((1..=16).filter_map(|cell| fit_checker(&ring, cell)));

    let mut best: Option<(f64, BackgroundModel)> = None;
    for m in candidates {
        let s = score(&m, &ring);
        let better = match &best {
            None => true,
            Some((bs, bm)) => s < bs - 1e-9 || (s <= bs + 1e-9 && m.complexity() < bm.complexity()),
        };
        if better {
            best = Some((s, m));
        }
    }
    best.expect("at least the solid model").1
}

/// Outcome of [`segment_subject`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub mask: Mask,
    /// Set when no component reached [`MIN_AREA`]; `mask` is then empty.
    pub empty: bool,
    pub model: BackgroundModel,
}

/// Largest 4-connected component of `fg`; ties go to the first found in raster order.
pub fn largest_component(fg: &Mask) -> Mask {
    let (w, h) = (fg.width(), fg.height());
    let mut label = vec![usize::MAX; w * h];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..w * h {
        if !fg.data()[start] || label[start] != usize::MAX {
            continue;
        }
        let mut comp = vec![start];
        label[start] = start;
        let mut i = 0;
        while i < comp.len() {
            let p = comp[i];
            i += 1;
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if fg.data()[q] && label[q] == usize::MAX {
                    label[q] = start;
                    comp.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    let mut out = Mask::empty(w, h);
    for p in best {
        out.set(p % w, p / w, true);
    }
    out
}

pub fn segment_subject(img: &Image) -> Segmentation {
    let model = fit_background(img, None);
    let (w, h) = (img.width(), img.height());
    let mut fg = Mask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            fg.set(x, y, residual(model.predict(x, y), img.get(x, y)) > TAU);
        }
    }
    let comp = largest_component(&fg);
    if comp.count() < MIN_AREA {
        return Segmentation {
            mask: Mask::empty(w, h),
            empty: true,
            model,
        };
    }
    Segmentation {
        mask: comp,
        empty: false,
        model,
    }
}

/// Replaces masked pixels by the background model fitted without them.
pub fn remove_subject(img: &Image, mask: &Mask) -> Image {
    if mask.is_empty() {
        return img.clone();
    }
    let model = fit_background(img, Some(mask));
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if mask.get(x, y) {
                out.set(x, y, model.predict(x, y));
            }
        }
    }
    out
}
