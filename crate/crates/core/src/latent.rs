//! Latent images of the reconstruction decoder.
//!
//! The reconstruction is a per-pixel linear combination of the `d` slices that
//! feed the decoder's final 1×1 layer. Each slice can be viewed as an image;
//! slices are scored by how well their magnitude correlates with a foreground
//! mask, which serves as a proxy for "the slice attends to objects".

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Network;
use crate::pnm;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Latents {
    pub height: usize,
    pub width: usize,
    /// `d` slices of `H·W` raw activations.
    pub raw: Vec<Vec<f32>>,
    /// The same slices min–max scaled to `[0, 1]`; constant slices are 0.5.
    pub normalized: Vec<Vec<f32>>,
    /// `[3, d]` weights of the final layer.
    pub weights: Tensor,
    /// `[3, H, W]` decoder output.
    pub reconstruction: Tensor,
}

impl Latents {
    pub fn width_d(&self) -> usize {
        self.raw.len()
    }

    /// `Σ_k w_ck · Z_k` in f64.
    pub fn weighted_sum(&self, channel: usize) -> Vec<f64> {
        let d = self.raw.len();
        let w = &self.weights.data()[channel * d..(channel + 1) * d];
        let mut out = vec![0.0f64; self.height * self.width];
        for (slice, &wk) in self.raw.iter().zip(w) {
            for (o, &z) in out.iter_mut().zip(slice) {
                *o += wk as f64 * z as f64;
            }
        }
        out
    }
}

pub fn normalize(slice: &[f32]) -> Vec<f32> {
    let lo = slice.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = slice.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi > lo {
        slice.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; slice.len()]
    }
}

/// Runs one `[3, H, W]` image through the student's reconstruction branch.
pub fn extract_latents(net: &Network, image: &Tensor) -> Result<Latents> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::shape("extract_latents", format!("expected [3, H, W], got {:?}", image.shape())));
    };
    let x = image.clone().reshape([1, 3, h, w])?;
    let (stack, rec) = net.forward_rec(&x)?;
    let d = stack.width();
    let raw: Vec<Vec<f32>> = stack.z.data().chunks(h * w).take(d).map(<[f32]>::to_vec).collect();
    Ok(Latents {
        height: h,
        width: w,
        normalized: raw.iter().map(|s| normalize(s)).collect(),
        raw,
        weights: stack.weights,
        reconstruction: rec.reshape([3, h, w])?,
    })
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    let r = cov / (va * vb).sqrt();
    r.is_finite().then_some(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub index: usize,
    /// Pearson correlation of `|slice|` with the mask; 0 for constant slices.
    pub score: f64,
    pub constant: bool,
}

/// Slices ordered by descending foreground correlation; constant slices last.
pub fn rank_by_foreground(slices: &[Vec<f32>], mask: &[u8]) -> Result<Vec<SliceScore>> {
    if let Some((i, &v)) = mask.iter().enumerate().find(|(_, &v)| v > 1) {
        return Err(Error::NonBinaryMask { index: i, value: v as f64 });
    }
    let fg = mask.iter().filter(|&&v| v == 1).count();
    if fg == 0 {
        return Err(Error::InvalidArgument("foreground mask is empty".into()));
    }
    if fg == mask.len() {
        return Err(Error::InvalidArgument("foreground mask covers every pixel".into()));
    }
    let m: Vec<f64> = mask.iter().map(|&v| v as f64).collect();
    let mut scores = Vec::with_capacity(slices.len());
    for (index, s) in slices.iter().enumerate() {
        if s.len() != mask.len() {
            return Err(Error::shape("rank_by_foreground", format!("slice of {} vs mask of {}", s.len(), mask.len())));
        }
        let a: Vec<f64> = s.iter().map(|v| (*v as f64).abs()).collect();
        let r = pearson(&a, &m);
        scores.push(SliceScore {
            index,
            score: r.unwrap_or(0.0),
            constant: r.is_none(),
        });
    }
    scores.sort_by(|x, y| x.constant.cmp(&y.constant).then(y.score.total_cmp(&x.score)));
    Ok(scores)
}

/// Mean score of the best `k` slices.
pub fn mean_top(scores: &[SliceScore], k: usize) -> f64 {
    let top: Vec<f64> = scores.iter().take(k).map(|s| s.score).collect();
    if top.is_empty() {
        0.0
    } else {
        top.iter().sum::<f64>() / top.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub rank: usize,
    pub index: usize,
    pub file: String,
    pub score: f64,
    pub constant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub height: usize,
    pub width: usize,
    pub slices: Vec<ManifestEntry>,
    pub mean_top3: f64,
}

pub fn slice_file(index: usize) -> String {
    format!("latent_k{index:02}.pgm")
}

/// Writes one PGM per ranked slice (normalized values) and `manifest.json`.
/// Pass a truncated ranking to export only the top slices.
pub fn export_grid(latents: &Latents, ranking: &[SliceScore], dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(Error::file(dir))?;
    let mut slices = Vec::with_capacity(ranking.len());
    for (rank, s) in ranking.iter().enumerate() {
        let file = slice_file(s.index);
        let bytes = pnm::gray_bytes(&latents.normalized[s.index]);
        pnm::write_pgm(latents.width, latents.height, &bytes, dir.join(&file))?;
        slices.push(ManifestEntry {
            rank,
            index: s.index,
            file,
            score: s.score,
            constant: s.constant,
        });
    }
    let manifest = Manifest {
        height: latents.height,
        width: latents.width,
        mean_top3: mean_top(ranking, 3),
        slices,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(Error::file(&path))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_slice_is_mid_gray() {
        assert_eq!(normalize(&[2.0; 4]), vec![0.5; 4]);
        assert_eq!(normalize(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn self_and_inverse_correlation() {
        let mask = [1u8, 0, 0, 1, 0, 1];
        let same: Vec<f32> = mask.iter().map(|&v| v as f32).collect();
        let inv: Vec<f32> = mask.iter().map(|&v| 1.0 - v as f32).collect();
        let flat = vec![0.3f32; 6];
        let noisy = vec![0.1, 0.5, 0.2, 0.4, 0.3, 0.2];
        let r = rank_by_foreground(&[flat, inv, noisy, same], &mask).unwrap();
        assert_eq!(r[0].index, 3);
        assert!((r[0].score - 1.0).abs() < 1e-12);
        assert_eq!(r[2].index, 1);
        assert!((r[2].score + 1.0).abs() < 1e-12);
        assert_eq!((r[3].index, r[3].score, r[3].constant), (0, 0.0, true));
    }

    #[test]
    fn empty_mask_errors() {
        assert!(rank_by_foreground(&[vec![1.0, 2.0]], &[0, 0]).is_err());
        assert!(rank_by_foreground(&[vec![1.0, 2.0]], &[0, 2]).is_err());
    }
}
