use crate::denoiser::{AttnTrace, LATENT_SIDE, PATCH};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::Mask;

/// Mean squared error between the true and predicted noise.
pub fn ldm_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<f64> {
    if eps.shape() != eps_hat.shape() {
        return Err(Error::shape("ldm_loss", format!("{:?}", eps.shape()), format!("{:?}", eps_hat.shape())));
    }
    let sse: f64 = eps.data().iter().zip(eps_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / eps.len() as f64)
}

/// A latent cell is set iff at least half (8 of 16) of its 4×4 pixel patch is set.
pub fn downsample_mask(mask: &Mask) -> Result<Vec<bool>> {
    let side = LATENT_SIDE * PATCH;
    if mask.width() != side || mask.height() != side {
        return Err(Error::shape(
            "downsample_mask",
            format!("{side}x{side}"),
            format!("{}x{}", mask.width(), mask.height()),
        ));
    }
    let mut out = vec![false; LATENT_SIDE * LATENT_SIDE];
    for i in 0..LATENT_SIDE {
        for j in 0..LATENT_SIDE {
            let mut n = 0;
            for py in 0..PATCH {
                for px in 0..PATCH {
                    n += mask.get(j * PATCH + px, i * PATCH + py) as usize;
                }
            }
            out[i * LATENT_SIDE + j] = 2 * n >= PATCH * PATCH;
        }
    }
    Ok(out)
}

/// Latent masks `[F, h·w]` for a clip's per-frame pixel masks.
pub fn latent_masks(masks: &[Mask]) -> Result<Vec<Vec<bool>>> {
    masks.iter().map(downsample_mask).collect()
}

/// Per-position weights such that `Σ_k ⟨w, D_k⟩ = −L_loc`, plus the number of
/// frames skipped for having an empty latent mask.
fn loc_weights(masks: &[Vec<bool>], blocks: usize) -> Result<(Tensor, usize)> {
    let frames = masks.len();
    let hw = LATENT_SIDE * LATENT_SIDE;
    let live: Vec<usize> = masks.iter().map(|m| m.iter().filter(|&&v| v).count()).collect();
    let used = live.iter().filter(|&&c| c > 0).count();
    if used == 0 {
        return Err(Error::invalid("localization loss: every frame has an empty latent mask"));
    }
    let mut w = vec![0.0; frames * hw];
    for (f, m) in masks.iter().enumerate() {
        if m.len() != hw {
            return Err(Error::shape("localization_loss", format!("{hw} latent cells"), m.len().to_string()));
        }
        if live[f] == 0 {
            continue;
        }
        let v = 1.0 / (live[f] as f64 * used as f64 * blocks as f64);
        for (p, &on) in m.iter().enumerate() {
            if on {
                w[f * hw + p] = v;
            }
        }
    }
    Ok((Tensor::new(vec![frames, LATENT_SIDE, LATENT_SIDE], w)?, frames - used))
}

/// Result of evaluating the localization loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LocLoss {
    pub value: f64,
    /// Frames left out because their latent mask was empty.
    pub skipped_frames: usize,
}

/// `L_loc = −(1/K) Σ_k (1/F') Σ_f mean_{m[f]=1} D_k[f]`, averaging only over
/// the `F'` frames whose latent mask is nonempty.
pub fn localization_loss(trace: &AttnTrace, masks: &[Vec<bool>]) -> Result<LocLoss> {
    let k = trace.maps.len();
    if k == 0 {
        return Err(Error::invalid("localization loss needs at least one block map"));
    }
    let (w, skipped) = loc_weights(masks, k)?;
    let mut total = 0.0;
    for d in &trace.maps {
        if d.shape() != w.shape() {
            return Err(Error::shape("localization_loss", format!("{:?}", w.shape()), format!("{:?}", d.shape())));
        }
        total += d.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(LocLoss {
        value: -total,
        skipped_frames: skipped,
    })
}

/// Graph version of [`localization_loss`] over per-block map nodes.
pub(crate) fn localization_loss_graph(g: &mut Graph, maps: &[Var], masks: &[Vec<bool>]) -> Result<(Var, usize)> {
    let (w, skipped) = loc_weights(masks, maps.len())?;
    let mut acc: Option<Var> = None;
    for &d in maps {
        let s = g.weighted_sum(d, w.clone())?;
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    let total = acc.ok_or_else(|| Error::invalid("localization loss needs at least one block map"))?;
    Ok((g.scale(total, -1.0), skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(maps: Vec<Tensor>) -> AttnTrace {
        AttnTrace {
            maps,
            subject_index: 0,
            text_keys: 1,
            image_keys: 64,
        }
    }

    #[test]
    fn ldm_loss_cases() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ldm_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.5);
        assert!((ldm_loss(&a, &b).unwrap() - 0.25).abs() < 1e-15);
        let c = Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.0]);
        let oracle = [(1.0f64 - 0.3), (2.0 + 1.2), (3.0 - 2.0), 4.0]
            .iter()
            .map(|d| d * d)
            .sum::<f64>()
            / 4.0;
        assert!((ldm_loss(&a, &c).unwrap() - oracle).abs() < 1e-15);
        assert!(ldm_loss(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn downsample_threshold() {
        assert!(downsample_mask(&Mask::full(32, 32)).unwrap().iter().all(|&v| v));
        let mut m = Mask::empty(32, 32);
        for y in 8..12 {
            for x in 4..8 {
                m.set(x, y, true);
            }
        }
        let lat = downsample_mask(&m).unwrap();
        assert_eq!(lat.iter().filter(|&&v| v).count(), 1);
        assert!(lat[2 * 8 + 1]);

        let mut seven = Mask::empty(32, 32);
        for i in 0..7 {
            seven.set(i % 4, i / 4, true);
        }
        assert!(!downsample_mask(&seven).unwrap()[0]);
        seven.set(3, 1, true);
        assert!(downsample_mask(&seven).unwrap()[0]);
    }

    #[test]
    fn uniform_attention_gives_inverse_key_count() {
        let n_keys = 70.0;
        let maps = vec![Tensor::full(&[2, 8, 8], 1.0 / n_keys); 3];
        let mut masks = vec![vec![false; 64]; 2];
        masks[0][5] = true;
        masks[1][9] = true;
        masks[1][10] = true;
        let l = localization_loss(&trace(maps), &masks).unwrap();
        assert!((l.value + 1.0 / n_keys).abs() < 1e-15);
    }

    #[test]
    fn full_attention_gives_minus_one() {
        let masks = vec![vec![true; 64]; 2];
        let l = localization_loss(&trace(vec![Tensor::ones(&[2, 8, 8])]), &masks).unwrap();
        assert_eq!(l.value, -1.0);
    }

    #[test]
    fn hand_built_trace_matches_direct_average() {
        let mut d = vec![0.0; 2 * 64];
        d[3] = 0.2;
        d[4] = 0.6;
        d[64 + 3] = 0.1;
        d[64 + 4] = 0.9;
        let mut masks = vec![vec![false; 64]; 2];
        masks[0][3] = true;
        masks[0][4] = true;
        masks[1][4] = true;
        let l = localization_loss(&trace(vec![Tensor::new(vec![2, 8, 8], d).unwrap()]), &masks).unwrap();
        let oracle = -(((0.2 + 0.6) / 2.0) + 0.9) / 2.0;
        assert!((l.value - oracle).abs() < 1e-15);
    }

    #[test]
    fn empty_frames_are_skipped_and_all_empty_rejected() {
        let maps = vec![Tensor::full(&[2, 8, 8], 0.5)];
        let mut masks = vec![vec![false; 64]; 2];
        assert!(localization_loss(&trace(maps.clone()), &masks).is_err());
        masks[1][0] = true;
        let l = localization_loss(&trace(maps), &masks).unwrap();
        assert_eq!(l.skipped_frames, 1);
        assert_eq!(l.value, -0.5);
    }
}
