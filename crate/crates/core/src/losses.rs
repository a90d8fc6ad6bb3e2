//! Reconstruction loss and image-quality metrics.

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerceptualMode {
    Off,
    /// Multi-scale image-gradient L1 term.
    GradientPyramid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_perc: f64,
    pub perceptual_mode: PerceptualMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_perc: 0.1,
            perceptual_mode: PerceptualMode::GradientPyramid,
        }
    }
}

const PYRAMID_LEVELS: usize = 3;

/// Mean squared error plus `λ` times the perceptual proxy.
///
/// Images are `[c, h, w]`. The proxy needs `h` and `w` divisible by 4.
pub fn recon_loss<'t>(pred: Var<'t>, target: Var<'t>, cfg: &LossConfig) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("recon_loss", &[&pred.shape(), &target.shape()]));
    }
    if cfg.lambda_perc < 0.0 {
        return Err(Error::invalid("recon_loss", "lambda_perc must be nonnegative"));
    }
    let mse = pred.sub(target)?.square().mean();
    if cfg.perceptual_mode == PerceptualMode::Off || cfg.lambda_perc == 0.0 {
        return Ok(mse);
    }
    let perc = gradient_pyramid(pred, target)?;
    mse.add(perc.scale(cfg.lambda_perc))
}

/// Mean absolute difference of horizontal and vertical finite differences,
/// averaged over a three-level ×2 average-pooling pyramid.
pub fn gradient_pyramid<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let shape = pred.shape();
    if shape.len() != 3 {
        return Err(Error::shape("gradient_pyramid", &[&shape]));
    }
    let (h, w) = (shape[1], shape[2]);
    let div = 1 << (PYRAMID_LEVELS - 1);
    if h % div != 0 || w % div != 0 || h / div < 2 || w / div < 2 {
        return Err(Error::invalid(
            "gradient_pyramid",
            format!("image {h}×{w} too small or not divisible by {div}"),
        ));
    }
    let (mut p, mut t) = (pred, target);
    let mut terms = Vec::with_capacity(2 * PYRAMID_LEVELS);
    for level in 0..PYRAMID_LEVELS {
        if level > 0 {
            p = p.avg_pool2x()?;
            t = t.avg_pool2x()?;
        }
        let d = p.sub(t)?;
        let s = d.shape();
        let dx = d.narrow(2, 1, s[2] - 1)?.sub(d.narrow(2, 0, s[2] - 1)?)?;
        let dy = d.narrow(1, 1, s[1] - 1)?.sub(d.narrow(1, 0, s[1] - 1)?)?;
        terms.push(dx.abs().mean());
        terms.push(dy.abs().mean());
    }
    let n = terms.len() as f64;
    let total = terms
        .into_iter()
        .try_fold(None::<Var<'t>>, |acc, v| match acc {
            None => Ok::<_, Error>(Some(v)),
            Some(a) => Ok(Some(a.add(v)?)),
        })?
        .expect("pyramid has levels");
    Ok(total.scale(1.0 / n))
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse", &[pred.shape(), target.shape()]));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / pred.numel().max(1) as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Tensor, target: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::invalid("psnr", "peak must be positive"));
    }
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

fn grayscale(img: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let s = img.shape();
    let (c, h, w) = match *s {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => return Err(Error::shape("ssim", &[s])),
    };
    let plane = h * w;
    let mut g = vec![0.0; plane];
    for ch in 0..c {
        for (o, v) in g.iter_mut().zip(&img.data()[ch * plane..(ch + 1) * plane]) {
            *o += v / c as f64;
        }
    }
    Ok((g, h, w))
}

/// Separable "valid" Gaussian filter.
fn filter(img: &[f64], h: usize, w: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| win[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity of the channel-mean grayscale images with an
/// 11×11 Gaussian window (σ = 1.5) and unit peak.
pub fn ssim(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("ssim", &[pred.shape(), target.shape()]));
    }
    let (a, h, w) = grayscale(pred)?;
    let (b, _, _) = grayscale(target)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid("ssim", format!("image {h}×{w} smaller than 11×11")));
    }
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let win = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, _, _) = filter(&a, h, w, &win);
    let (mu_b, _, _) = filter(&b, h, w, &win);
    let (aa, _, _) = filter(&prod(&a, &a), h, w, &win);
    let (bb, _, _) = filter(&prod(&b, &b), h, w, &win);
    let (ab, _, _) = filter(&prod(&a, &b), h, w, &win);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Per-image quality scores.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricRow {
    pub fn compute(name: impl Into<String>, pred: &Tensor, target: &Tensor) -> Result<Self> {
        Ok(MetricRow {
            name: name.into(),
            psnr: psnr(pred, target, 1.0)?,
            ssim: ssim(pred, target)?,
        })
    }
}

/// Tab-separated `name psnr ssim` lines followed by a `mean` line.
pub fn metrics_report(rows: &[MetricRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&format!("{}\t{:.4}\t{:.4}\n", r.name, r.psnr, r.ssim));
    }
    let n = rows.len().max(1) as f64;
    let mp = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
    let ms = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    out.push_str(&format!("mean\t{mp:.4}\t{ms:.4}\n"));
    out
}
