//! Weak and strong augmentations.
//!
//! A [`View`] is an image together with any number of label-like maps
//! (ground truth, pseudo-labels, reconstruction scenarios). Geometric ops move
//! every map with the image; photometric ops touch the image only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::IGNORE;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    /// `[3, H, W]`
    pub image: Tensor,
    /// Each map holds `H·W` class indices with [`IGNORE`] as sentinel.
    pub maps: Vec<Vec<u8>>,
}

impl View {
    pub fn new(image: Tensor, maps: Vec<Vec<u8>>) -> Result<Self> {
        let &[3, h, w] = image.shape() else {
            return Err(Error::shape("view", format!("expected [3, H, W], got {:?}", image.shape())));
        };
        if let Some(m) = maps.iter().find(|m| m.len() != h * w) {
            return Err(Error::shape("view", format!("map of {} pixels for {h}x{w} image", m.len())));
        }
        Ok(View { image, maps })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    /// Horizontal flip probability of the weak view.
    pub flip_p: f64,
    /// Probability of rescaling at all; the scale is then uniform in
    /// `[zoom_min, zoom_max]`.
    pub zoom_p: f64,
    pub zoom_min: f64,
    pub zoom_max: f64,
    pub jitter_p: f64,
    /// Multiplicative gain is drawn from `[1 − gain, 1 + gain]`.
    pub jitter_gain: f64,
    /// Additive shift is drawn from `[−shift, shift]`.
    pub jitter_shift: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub cutmix_p: f64,
    pub cutmix_area_min: f64,
    pub cutmix_area_max: f64,
    pub cutmix_aspect_min: f64,
    pub cutmix_aspect_max: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            flip_p: 0.5,
            zoom_p: 0.5,
            zoom_min: 0.5,
            zoom_max: 2.0,
            jitter_p: 0.8,
            jitter_gain: 0.2,
            jitter_shift: 0.1,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 1.0,
            cutmix_p: 0.5,
            cutmix_area_min: 0.2,
            cutmix_area_max: 0.5,
            cutmix_aspect_min: 0.5,
            cutmix_aspect_max: 2.0,
        }
    }
}

impl AugConfig {
    /// Every random op disabled and zoom fixed at 1.
    pub fn identity() -> Self {
        AugConfig {
            flip_p: 0.0,
            zoom_p: 0.0,
            zoom_min: 1.0,
            zoom_max: 1.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            cutmix_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_p", self.flip_p),
            ("zoom_p", self.zoom_p),
            ("jitter_p", self.jitter_p),
            ("grayscale_p", self.grayscale_p),
            ("blur_p", self.blur_p),
            ("cutmix_p", self.cutmix_p),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} = {p} is not a probability")));
            }
        }
        let ranges = [
            ("zoom", self.zoom_min, self.zoom_max, 0.5, 2.0),
            ("blur_sigma", self.blur_sigma_min, self.blur_sigma_max, 0.0, f64::INFINITY),
            ("cutmix_area", self.cutmix_area_min, self.cutmix_area_max, 0.0, 1.0),
            ("cutmix_aspect", self.cutmix_aspect_min, self.cutmix_aspect_max, 0.0, f64::INFINITY),
        ];
        for (name, lo, hi, min, max) in ranges {
            if !(lo <= hi && lo >= min && hi <= max) {
                return Err(Error::Config(format!(
                    "augment.{name}_min/max = [{lo}, {hi}] must be ordered within [{min}, {max}]"
                )));
            }
        }
        if self.jitter_gain < 0.0 || self.jitter_shift < 0.0 {
            return Err(Error::Config("augment jitter ranges must be non-negative".into()));
        }
        Ok(())
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BoxRegion {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxRegion {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AugRecord {
    pub flip: bool,
    pub zoom: f64,
    /// Crop centre offset from the image centre, in source pixels.
    pub crop_offset: (f64, f64),
    pub cutmix: Option<(BoxRegion, usize)>,
    pub jitter: Option<([f32; 3], [f32; 3])>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
}

pub fn hflip(view: &View) -> View {
    let (h, w) = (view.height(), view.width());
    let flip = |src: &[f32]| -> Vec<f32> {
        let mut out = src.to_vec();
        for row in out.chunks_mut(w) {
            row.reverse();
        }
        out
    };
    let mut maps = view.maps.clone();
    for m in &mut maps {
        for row in m.chunks_mut(w) {
            row.reverse();
        }
    }
    View {
        image: Tensor::new([3, h, w], flip(view.image.data())).expect("same shape"),
        maps,
    }
}

/// The teacher's view: a horizontal flip with probability `flip_p`.
pub fn weak_aug(view: &View, cfg: &AugConfig, rng: &mut impl Rng) -> (View, bool) {
    if rng.random_bool(cfg.flip_p) {
        (hflip(view), true)
    } else {
        (view.clone(), false)
    }
}

/// Rescales about the image centre by `scale`, keeping the output size.
///
/// Output pixel `x` samples source coordinate `(x − c)/scale + c`. Images use
/// bilinear interpolation with edge replication; maps use nearest neighbour
/// and become [`IGNORE`] where the source falls outside the image.
pub fn zoom(view: &View, scale: f64) -> View {
    let (h, w) = (view.height(), view.width());
    let hw = h * w;
    let src_coord = |o: usize, n: usize| (o as f64 + 0.5 - n as f64 / 2.0) / scale + n as f64 / 2.0 - 0.5;
    let xs: Vec<f64> = (0..w).map(|x| src_coord(x, w)).collect();
    let ys: Vec<f64> = (0..h).map(|y| src_coord(y, h)).collect();
    let near = |s: f64, n: usize| {
        let r = s.round();
        (r >= 0.0 && r < n as f64).then_some(r as usize)
    };
    let lerp_idx = |s: f64, n: usize| {
        let s = s.clamp(0.0, (n - 1) as f64);
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let src = view.image.data();
    let mut image = vec![0.0f32; 3 * hw];
    for (y, &sy) in ys.iter().enumerate() {
        let (y0, y1, fy) = lerp_idx(sy, h);
        for (x, &sx) in xs.iter().enumerate() {
            let (x0, x1, fx) = lerp_idx(sx, w);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| src[c * hw + yy * w + xx];
                image[c * hw + y * w + x] = (p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx) * (1.0 - fy)
                    + (p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx) * fy;
            }
        }
    }
    let maps = view
        .maps
        .iter()
        .map(|m| {
            let mut out = vec![IGNORE; hw];
            for (y, &sy) in ys.iter().enumerate() {
                for (x, &sx) in xs.iter().enumerate() {
                    if let (Some(yy), Some(xx)) = (near(sy, h), near(sx, w)) {
                        out[y * w + x] = m[yy * w + xx];
                    }
                }
            }
            out
        })
        .collect();
    View {
        image: Tensor::new([3, h, w], image).expect("same shape"),
        maps,
    }
}

/// `v ← clamp(gain_c · v + shift_c, 0, 1)` per channel.
pub fn color_jitter(image: &Tensor, gain: [f32; 3], shift: [f32; 3]) -> Tensor {
    let plane = image.len() / 3;
    let mut out = image.clone();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        for v in chunk {
            *v = (gain[c] * *v + shift[c]).clamp(0.0, 1.0);
        }
    }
    out
}

/// Replaces every channel by the luminance `0.299 R + 0.587 G + 0.114 B`.
pub fn grayscale(image: &Tensor) -> Tensor {
    let plane = image.len() / 3;
    let d = image.data();
    let luma: Vec<f32> = (0..plane)
        .map(|i| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i])
        .collect();
    Tensor::new(image.shape().to_vec(), luma.repeat(3)).expect("same shape")
}

/// Separable Gaussian blur with radius `ceil(3σ)` and edge clamping.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Tensor {
    let &[c, h, w] = image.shape() else {
        unreachable!("views are [3, H, W]")
    };
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let src = image.data();
    let mut tmp = vec![0.0f32; src.len()];
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let s: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * src[base + y * w + clampi(x as isize + k as isize - radius, w)] as f64)
                    .sum();
                tmp[base + y * w + x] = s as f32;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let s: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[base + clampi(y as isize + k as isize - radius, h) * w + x] as f64)
                    .sum();
                out[base + y * w + x] = s as f32;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

/// Pixels (and map entries) inside `region` come from `b`, the rest from `a`.
pub fn cutmix(a: &View, b: &View, region: BoxRegion) -> Result<View> {
    if a.image.shape() != b.image.shape() || a.maps.len() != b.maps.len() {
        return Err(Error::shape(
            "cutmix",
            format!("{:?} with {} maps vs {:?} with {} maps", a.image.shape(), a.maps.len(), b.image.shape(), b.maps.len()),
        ));
    }
    let (h, w) = (a.height(), a.width());
    if region.x0 > region.x1 || region.y0 > region.y1 || region.x1 > w || region.y1 > h {
        return Err(Error::InvalidArgument(format!("cutmix box {region:?} outside {h}x{w}")));
    }
    let hw = h * w;
    let mut out = a.clone();
    for y in region.y0..region.y1 {
        for x in region.x0..region.x1 {
            let p = y * w + x;
            for c in 0..3 {
                out.image.data_mut()[c * hw + p] = b.image.data()[c * hw + p];
            }
            for (m, src) in out.maps.iter_mut().zip(&b.maps) {
                m[p] = src[p];
            }
        }
    }
    debug_assert!((0..hw).all(|p| region.contains(p % w, p / w) || out.maps.iter().zip(&a.maps).all(|(o, s)| o[p] == s[p])));
    Ok(out)
}

/// Draws a box with area fraction and aspect ratio from the configured ranges.
pub fn random_box(h: usize, w: usize, cfg: &AugConfig, rng: &mut impl Rng) -> BoxRegion {
    let area = rng.random_range(cfg.cutmix_area_min..=cfg.cutmix_area_max) * (h * w) as f64;
    let aspect = rng.random_range(cfg.cutmix_aspect_min..=cfg.cutmix_aspect_max);
    let bw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
    let bh = ((area / aspect).sqrt().round() as usize).clamp(1, h);
    let x0 = rng.random_range(0..=w - bw);
    let y0 = rng.random_range(0..=h - bh);
    BoxRegion {
        x0,
        y0,
        x1: x0 + bw,
        y1: y0 + bh,
    }
}

/// The student's view: zoom → colour jitter → grayscale → blur → CutMix with
/// `partner` (whose id is recorded).
pub fn strong_aug(view: &View, partner: &View, partner_id: usize, cfg: &AugConfig, rng: &mut impl Rng) -> Result<(View, AugRecord)> {
    let mut rec = AugRecord::default();
    rec.zoom = if rng.random_bool(cfg.zoom_p) {
        rng.random_range(cfg.zoom_min..=cfg.zoom_max)
    } else {
        1.0
    };
    let mut out = if rec.zoom == 1.0 { view.clone() } else { zoom(view, rec.zoom) };
    if rng.random_bool(cfg.jitter_p) {
        let (g, s) = (cfg.jitter_gain as f32, cfg.jitter_shift as f32);
        let gain = std::array::from_fn(|_| rng.random_range(1.0 - g..=1.0 + g));
        let shift = std::array::from_fn(|_| rng.random_range(-s..=s));
        out.image = color_jitter(&out.image, gain, shift);
        rec.jitter = Some((gain, shift));
    }
    if rng.random_bool(cfg.grayscale_p) {
        out.image = grayscale(&out.image);
        rec.grayscale = true;
    }
    if rng.random_bool(cfg.blur_p) {
        let sigma = rng.random_range(cfg.blur_sigma_min..=cfg.blur_sigma_max);
        out.image = gaussian_blur(&out.image, sigma);
        rec.blur_sigma = Some(sigma);
    }
    if rng.random_bool(cfg.cutmix_p) {
        let region = random_box(out.height(), out.width(), cfg, rng);
        out = cutmix(&out, partner, region)?;
        rec.cutmix = Some((region, partner_id));
    }
    Ok((out, rec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn view(h: usize, w: usize, seed: u64) -> View {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        View::new(
            Tensor::from_fn([3, h, w], |_| rng.random_range(0.0..1.0)),
            vec![(0..h * w).map(|i| (i % 4) as u8).collect()],
        )
        .unwrap()
    }

    #[test]
    fn flip_twice_is_identity() {
        let v = view(4, 5, 0);
        assert_eq!(hflip(&hflip(&v)), v);
        assert_eq!(hflip(&v).maps[0][0], v.maps[0][4]);
    }

    #[test]
    fn identity_config() {
        let v = view(8, 8, 1);
        let p = view(8, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AugConfig::identity();
        assert_eq!(weak_aug(&v, &cfg, &mut rng).0, v);
        assert_eq!(strong_aug(&v, &p, 1, &cfg, &mut rng).unwrap().0, v);
    }

    #[test]
    fn zoom_out_pads_with_ignore() {
        let v = view(8, 8, 3);
        let z = zoom(&v, 0.5);
        assert_eq!(z.maps[0][0], IGNORE);
        assert_ne!(z.maps[0][4 * 8 + 4], IGNORE);
        assert_eq!(zoom(&v, 1.0), v);
    }

    #[test]
    fn grayscale_is_luminance() {
        let img = Tensor::new([3, 1, 1], vec![1.0, 0.5, 0.0]).unwrap();
        let g = grayscale(&img);
        let l = 0.299 + 0.587 * 0.5;
        assert!(g.data().iter().all(|&v| (v - l).abs() < 1e-7));
    }

    #[test]
    fn cutmix_extremes() {
        let (a, b) = (view(6, 6, 4), view(6, 6, 5));
        let none = BoxRegion { x0: 2, y0: 2, x1: 2, y1: 5 };
        assert_eq!(cutmix(&a, &b, none).unwrap(), a);
        let full = BoxRegion { x0: 0, y0: 0, x1: 6, y1: 6 };
        assert_eq!(cutmix(&a, &b, full).unwrap(), b);
        assert!(cutmix(&a, &b, BoxRegion { x0: 0, y0: 0, x1: 7, y1: 1 }).is_err());
    }
}
