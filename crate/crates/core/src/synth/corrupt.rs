//! Image corruptions at five severities. Severity 0 is the identity.
//!
//! The parameter table lives in [`severity_parameter`] and is mirrored in
//! `docs/corruptions.md`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::rng_for;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_SEVERITY: u8 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    DefocusBlur,
    MotionBlur,
    Brightness,
    Contrast,
    Pixelate,
    JpegLikeBlock,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
        CorruptionKind::JpegLikeBlock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::JpegLikeBlock => "jpeg_like_block",
        }
    }

    fn stream(self) -> u64 {
        0xC0_0000 + self as u64
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownCorruption(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > MAX_SEVERITY {
            return Err(Error::Severity(severity));
        }
        Ok(CorruptionSpec { kind, severity })
    }
}

/// Strength of `kind` at severity `1..=5`:
///
/// | kind | parameter | 1 | 2 | 3 | 4 | 5 |
/// |---|---|---|---|---|---|---|
/// | gaussian_noise | noise std | .04 | .08 | .12 | .18 | .26 |
/// | impulse_noise | replaced fraction | .03 | .06 | .09 | .17 | .27 |
/// | defocus_blur | disk radius (px) | 1 | 1.5 | 2 | 2.5 | 3 |
/// | motion_blur | horizontal kernel length (px) | 3 | 5 | 7 | 9 | 11 |
/// | brightness | additive shift | .1 | .2 | .3 | .4 | .5 |
/// | contrast | factor towards the mean | .4 | .3 | .2 | .1 | .05 |
/// | pixelate | block side (px) | 2 | 3 | 4 | 5 | 6 |
/// | jpeg_like_block | DCT quantizer step | .04 | .08 | .12 | .18 | .25 |
pub fn severity_parameter(kind: CorruptionKind, severity: u8) -> Result<f64> {
    if !(1..=MAX_SEVERITY).contains(&severity) {
        return Err(Error::Severity(severity));
    }
    let table: [f64; 5] = match kind {
        CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
        CorruptionKind::ImpulseNoise => [0.03, 0.06, 0.09, 0.17, 0.27],
        CorruptionKind::DefocusBlur => [1.0, 1.5, 2.0, 2.5, 3.0],
        CorruptionKind::MotionBlur => [3.0, 5.0, 7.0, 9.0, 11.0],
        CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
        CorruptionKind::Contrast => [0.4, 0.3, 0.2, 0.1, 0.05],
        CorruptionKind::Pixelate => [2.0, 3.0, 4.0, 5.0, 6.0],
        CorruptionKind::JpegLikeBlock => [0.04, 0.08, 0.12, 0.18, 0.25],
    };
    Ok(table[usize::from(severity) - 1])
}

/// Applies `spec` to a `3 x H x W` image in `[0, 1]`. The result is clamped to
/// `[0, 1]` and depends only on `(image, spec, seed)`.
pub fn corrupt(image: &Tensor, spec: CorruptionSpec, seed: u64) -> Result<Tensor> {
    let [c, h, w] = image.shape() else {
        return Err(Error::Shape(format!("expected C x H x W image, got {:?}", image.shape())));
    };
    let (c, h, w) = (*c, *h, *w);
    if spec.severity > MAX_SEVERITY {
        return Err(Error::Severity(spec.severity));
    }
    if spec.severity == 0 {
        return Ok(image.clone());
    }
    let p = severity_parameter(spec.kind, spec.severity)?;
    let src = image.data();
    let mut out = match spec.kind {
        CorruptionKind::GaussianNoise => {
            // the noise field depends on the seed only, so severities share it
            let mut rng = rng_for(seed, spec.kind.stream());
            src.iter()
                .map(|&x| {
                    let eta: f64 = rng.sample(StandardNormal);
                    x + p * eta
                })
                .collect::<Vec<_>>()
        }
        CorruptionKind::ImpulseNoise => {
            let mut rng = rng_for(seed, spec.kind.stream());
            src.iter()
                .map(|&x| {
                    let hit = rng.random::<f64>() < p;
                    let salt = rng.random::<bool>();
                    match (hit, salt) {
                        (false, _) => x,
                        (true, true) => 1.0,
                        (true, false) => 0.0,
                    }
                })
                .collect()
        }
        CorruptionKind::DefocusBlur => {
            let r = p.ceil() as isize;
            let offsets: Vec<(isize, isize)> = (-r..=r)
                .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
                .filter(|&(dy, dx)| ((dx * dx + dy * dy) as f64) <= p * p)
                .collect();
            convolve_box(src, c, h, w, &offsets)
        }
        CorruptionKind::MotionBlur => {
            let half = (p as isize) / 2;
            let offsets: Vec<(isize, isize)> = (-half..=half).map(|dx| (0, dx)).collect();
            convolve_box(src, c, h, w, &offsets)
        }
        CorruptionKind::Brightness => src.iter().map(|&x| x + p).collect(),
        CorruptionKind::Contrast => {
            let mean = src.iter().sum::<f64>() / src.len() as f64;
            src.iter().map(|&x| (x - mean) * p + mean).collect()
        }
        CorruptionKind::Pixelate => pixelate(src, c, h, w, p as usize),
        CorruptionKind::JpegLikeBlock => dct_quantize(src, c, h, w, p),
    };
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![c, h, w], out)
}

/// Uniform average over `offsets` with replicated borders.
fn convolve_box(src: &[f64], c: usize, h: usize, w: usize, offsets: &[(isize, isize)]) -> Vec<f64> {
    let norm = 1.0 / offsets.len() as f64;
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for &(dy, dx) in offsets {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    acc += plane[yy * w + xx];
                }
                out[ch * h * w + y * w + x] = acc * norm;
            }
        }
    }
    out
}

fn pixelate(src: &[f64], c: usize, h: usize, w: usize, block: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let (ye, xe) = ((by + block).min(h), (bx + block).min(w));
                let mut acc = 0.0;
                for y in by..ye {
                    for x in bx..xe {
                        acc += src[base + y * w + x];
                    }
                }
                let mean = acc / ((ye - by) * (xe - bx)) as f64;
                for y in by..ye {
                    for x in bx..xe {
                        out[base + y * w + x] = mean;
                    }
                }
            }
        }
    }
    out
}

/// Orthonormal DCT-II basis of size `n`: `basis[k][i]`.
fn dct_basis(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            (0..n)
                .map(|i| scale * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos())
                .collect()
        })
        .collect()
}

/// 8x8 block DCT per channel; coefficient `(u, v)` is rounded to a multiple of
/// `step * (1 + u + v)`, so high frequencies are quantized harder.
fn dct_quantize(src: &[f64], c: usize, h: usize, w: usize, step: f64) -> Vec<f64> {
    const B: usize = 8;
    let mut out = src.to_vec();
    for ch in 0..c {
        let base = ch * h * w;
        for by in (0..h).step_by(B) {
            for bx in (0..w).step_by(B) {
                let (bh, bw) = ((by + B).min(h) - by, (bx + B).min(w) - bx);
                let (ky, kx) = (dct_basis(bh), dct_basis(bw));
                let mut coef = vec![0.0; bh * bw];
                for u in 0..bh {
                    for v in 0..bw {
                        let mut acc = 0.0;
                        for y in 0..bh {
                            for x in 0..bw {
                                acc += ky[u][y] * kx[v][x] * src[base + (by + y) * w + bx + x];
                            }
                        }
                        let q = step * (1 + u + v) as f64;
                        coef[u * bw + v] = (acc / q).round() * q;
                    }
                }
                for y in 0..bh {
                    for x in 0..bw {
                        let mut acc = 0.0;
                        for u in 0..bh {
                            for v in 0..bw {
                                acc += ky[u][y] * kx[v][x] * coef[u * bw + v];
                            }
                        }
                        out[base + (by + y) * w + bx + x] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(clean: &Tensor, noisy: &Tensor) -> f64 {
    let mse = clean
        .data()
        .iter()
        .zip(noisy.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / clean.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}
