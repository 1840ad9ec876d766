//! Pseudo-labels from teacher posteriors and reconstruction targets.
//!
//! Probability maps are `[C, H, W]`, label maps are flat `H·W` byte slices
//! with [`IGNORE`] as the sentinel.

use crate::error::{Error, Result};
use crate::ops::IGNORE;
use crate::tensor::Tensor;

const NORMALIZATION_TOL: f64 = 1e-4;

/// Scenario codes of [`scenario_map`].
pub const FOREGROUND: u8 = 1;
pub const BACKGROUND: u8 = 0;
pub const UNCERTAIN: u8 = IGNORE;

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelMap {
    pub label: Vec<u8>,
    /// Max-class posterior per pixel.
    pub confidence: Vec<f32>,
}

impl PseudoLabelMap {
    pub fn labeled_pixels(&self) -> usize {
        self.label.iter().filter(|&&l| l != IGNORE).count()
    }
}

/// A reconstruction target with its per-pixel validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedTarget {
    /// `[3, H, W]`
    pub target: Tensor,
    /// `[1, H, W]`, entries 0 or 1.
    pub mask: Tensor,
}

fn dims3(t: &Tensor, op: &'static str) -> Result<[usize; 3]> {
    match t.shape() {
        &[c, h, w] => Ok([c, h, w]),
        s => Err(Error::shape(op, format!("expected [C, H, W], got {s:?}"))),
    }
}

fn check_probs(probs: &Tensor) -> Result<[usize; 3]> {
    let [c, h, w] = dims3(probs, "probs")?;
    let hw = h * w;
    let p = probs.data();
    for px in 0..hw {
        let mut sum = 0.0;
        for k in 0..c {
            let v = p[k * hw + px] as f64;
            if !(v >= 0.0) {
                return Err(Error::Unnormalized { pixel: px, sum: v });
            }
            sum += v;
        }
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Unnormalized { pixel: px, sum });
        }
    }
    Ok([c, h, w])
}

/// Argmax and its probability at one pixel, restricted to `classes`; ties go
/// to the lowest index.
fn best_of(p: &[f32], hw: usize, px: usize, classes: impl Iterator<Item = usize>) -> Option<(usize, f32)> {
    let mut best: Option<(usize, f32)> = None;
    for k in classes {
        let v = p[k * hw + px];
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best
}

/// Argmax class where the max posterior strictly exceeds `tau`, else [`IGNORE`].
pub fn make_pseudo_labels(probs: &Tensor, tau: f64) -> Result<PseudoLabelMap> {
    let [c, h, w] = check_probs(probs)?;
    let hw = h * w;
    let p = probs.data();
    let mut label = Vec::with_capacity(hw);
    let mut confidence = Vec::with_capacity(hw);
    for px in 0..hw {
        let (k, v) = best_of(p, hw, px, 0..c).expect("at least one class");
        label.push(if v as f64 > tau { k as u8 } else { IGNORE });
        confidence.push(v);
    }
    Ok(PseudoLabelMap { label, confidence })
}

/// Classifies each unlabeled pixel into one of the three cases:
/// confident object ([`FOREGROUND`]), confident non-object ([`BACKGROUND`]),
/// or neither ([`UNCERTAIN`]). The rules are checked in that order.
pub fn scenario_map(probs: &Tensor, tau: f64, objects: &[u8]) -> Result<Vec<u8>> {
    let [c, h, w] = check_probs(probs)?;
    let hw = h * w;
    let p = probs.data();
    let is_object = |k: usize| objects.contains(&(k as u8));
    Ok((0..hw)
        .map(|px| {
            let fg = best_of(p, hw, px, (0..c).filter(|&k| is_object(k)));
            if fg.is_some_and(|(_, v)| v as f64 > tau) {
                return FOREGROUND;
            }
            let (k, v) = best_of(p, hw, px, 0..c).expect("at least one class");
            if v as f64 > tau && !is_object(k) {
                BACKGROUND
            } else {
                UNCERTAIN
            }
        })
        .collect())
}

/// Foreground-only target: the image on object pixels, zero elsewhere.
/// Ignored pixels are masked out; everything else has mask 1.
pub fn forec_target_labeled(image: &Tensor, gt: &[u8], objects: &[u8]) -> Result<MaskedTarget> {
    let [c, h, w] = dims3(image, "forec_target")?;
    let hw = h * w;
    if gt.len() != hw {
        return Err(Error::shape(
            "forec_target",
            format!("{} labels for image [{c}, {h}, {w}]", gt.len()),
        ));
    }
    let src = image.data();
    let mut target = vec![0.0f32; c * hw];
    let mut mask = vec![0.0f32; hw];
    for (px, &g) in gt.iter().enumerate() {
        if g == IGNORE {
            continue;
        }
        mask[px] = 1.0;
        if objects.contains(&g) {
            for k in 0..c {
                target[k * hw + px] = src[k * hw + px];
            }
        }
    }
    Ok(MaskedTarget {
        target: Tensor::new([c, h, w], target)?,
        mask: Tensor::new([1, h, w], mask)?,
    })
}

/// Foreground-only target for an unlabeled image from teacher posteriors.
pub fn forec_target_unlabeled(image: &Tensor, probs: &Tensor, tau: f64, objects: &[u8]) -> Result<MaskedTarget> {
    let [_, h, w] = dims3(image, "forec_target")?;
    if probs.shape()[1..] != [h, w] {
        return Err(Error::shape(
            "forec_target",
            format!("probs {:?} vs image {:?}", probs.shape(), image.shape()),
        ));
    }
    let scenarios = scenario_map(probs, tau, objects)?;
    forec_target_labeled(image, &scenarios, &[FOREGROUND])
}

/// Plain reconstruction: the image itself with an all-ones mask.
pub fn standard_rec_target(image: &Tensor) -> Result<MaskedTarget> {
    let [_, h, w] = dims3(image, "rec_target")?;
    Ok(MaskedTarget {
        target: image.clone(),
        mask: Tensor::full([1, h, w], 1.0),
    })
}

/// Binary object/background labels; ignore is preserved.
pub fn fgbg_target(label: &[u8], objects: &[u8]) -> Vec<u8> {
    label
        .iter()
        .map(|&l| match l {
            IGNORE => IGNORE,
            l if objects.contains(&l) => 1,
            _ => 0,
        })
        .collect()
}
