//! Differentiable volume rendering of radiance fields.
//!
//! Samples sit at stratified positions inside the ray's intersection with
//! the unit cube. Compositing uses `α_i = 1 − exp(−σ_i δ_i)`,
//! `T_i = exp(−Σ_{j<i} σ_j δ_j)` and `w_i = T_i α_i`, with the exclusive
//! cumulative sum written as a matmul against a strictly triangular matrix
//! so the whole thing stays on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{CameraPose, Ray};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::triplane::TriPlane;

pub const WHITE: [f64; 3] = [1.0, 1.0, 1.0];
pub const BLACK: [f64; 3] = [0.0, 0.0, 0.0];

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub n_samples: usize,
    pub background: [f64; 3],
    /// Jitter sample positions within their bins, seeded per pixel.
    pub jitter: bool,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            n_samples: 32,
            background: WHITE,
            jitter: false,
            seed: 0,
        }
    }
}

/// Field values at a batch of points.
#[derive(Clone, Copy)]
pub struct FieldSample<'t> {
    /// `[n, 1]`, nonnegative.
    pub sigma: Var<'t>,
    /// `[n, 3]` in `[0, 1]`.
    pub color: Var<'t>,
    /// `[n, C_f]`.
    pub feature: Option<Var<'t>>,
}

/// Per-ray results for a batch of `R` rays.
#[derive(Clone, Copy)]
pub struct RayBatch<'t> {
    /// `[R, 3]`.
    pub color: Var<'t>,
    /// `[R, C_f]`.
    pub feature: Option<Var<'t>>,
    /// `[R]`.
    pub weight_sum: Var<'t>,
}

#[derive(Clone, Copy)]
pub struct RenderOutput<'t> {
    /// `[3, H, W]`.
    pub image: Var<'t>,
    /// `[C_f, H, W]`.
    pub feature_map: Option<Var<'t>>,
    /// `[H, W]`.
    pub weight_sums: Var<'t>,
}

/// Anything that maps world points `[n, 3]` to densities and colours.
pub trait RadianceField<'t> {
    fn evaluate(&self, tape: &'t Tape, points: Tensor, with_feature: bool) -> Result<FieldSample<'t>>;
}

/// Two-hidden-layer MLP turning tri-plane features into field values.
#[derive(Clone, Debug)]
pub struct Decoder {
    hidden1: Linear,
    hidden2: Linear,
    head: Linear,
    feature_head: Linear,
    /// Multiplies the raw density before the softplus.
    pub density_gain: f64,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        width: usize,
        feature_channels: usize,
        density_gain: f64,
        rng: &mut R,
    ) -> Self {
        let g = Init::Scaled(1.0);
        Decoder {
            hidden1: Linear::new(store, &format!("{prefix}.hidden1"), in_channels, width, true, g, rng),
            hidden2: Linear::new(store, &format!("{prefix}.hidden2"), width, width, true, g, rng),
            head: Linear::new(store, &format!("{prefix}.head"), width, 4, true, Init::Scaled(0.1), rng),
            feature_head: Linear::new(store, &format!("{prefix}.feature"), width, feature_channels, true, g, rng),
            density_gain,
        }
    }

    /// Zeroes the density/colour head, as used by the activation checks.
    pub fn zero_head(&self, store: &mut ParamStore) {
        for id in [Some(self.head.weight), self.head.bias].into_iter().flatten() {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// `features: [n, C]` → field values.
    pub fn forward<'t>(&self, p: &Bound<'t>, features: Var<'t>, with_feature: bool) -> Result<FieldSample<'t>> {
        let h = self.hidden1.forward(p, features)?.silu();
        let h = self.hidden2.forward(p, h)?.silu();
        let raw = self.head.forward(p, h)?;
        let sigma = raw.narrow(1, 0, 1)?.scale(self.density_gain).softplus();
        let color = raw.narrow(1, 1, 3)?.sigmoid();
        let feature = if with_feature {
            Some(self.feature_head.forward(p, h)?)
        } else {
            None
        };
        Ok(FieldSample { sigma, color, feature })
    }
}

/// A tri-plane with its decoder, bound to a tape.
pub struct TriPlaneField<'a, 't> {
    pub triplane: TriPlane<'t>,
    pub decoder: &'a Decoder,
    pub params: &'a Bound<'t>,
}

impl<'t> RadianceField<'t> for TriPlaneField<'_, 't> {
    fn evaluate(&self, tape: &'t Tape, points: Tensor, with_feature: bool) -> Result<FieldSample<'t>> {
        decode_point(&self.triplane, tape.constant(points), self.decoder, self.params, with_feature)
    }
}

/// Query the tri-plane at `points: [n, 3]` and decode.
pub fn decode_point<'t>(
    triplane: &TriPlane<'t>,
    points: Var<'t>,
    decoder: &Decoder,
    params: &Bound<'t>,
    with_feature: bool,
) -> Result<FieldSample<'t>> {
    decoder.forward(params, triplane.query(points)?, with_feature)
}

/// Sample positions and interval lengths along one ray. Rays missing the
/// cube get zero-length intervals, which makes them fully transparent.
pub fn ray_samples(ray: &Ray, n: usize, jitter: Option<&mut ChaCha8Rng>) -> (Vec<f64>, Vec<f64>) {
    let Some((t0, t1)) = ray.intersect_cube(0.5) else {
        return (vec![0.0; n], vec![0.0; n]);
    };
    let bin = (t1 - t0) / n as f64;
    let ts: Vec<f64> = match jitter {
        Some(rng) => (0..n).map(|i| t0 + (i as f64 + rng.gen::<f64>()) * bin).collect(),
        None => (0..n).map(|i| t0 + (i as f64 + 0.5) * bin).collect(),
    };
    let deltas = (0..n)
        .map(|i| if i + 1 < n { ts[i + 1] - ts[i] } else { bin })
        .collect();
    (ts, deltas)
}

fn pixel_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// `[S, S]` matrix with ones strictly above the diagonal, so that
/// `x·M` is the exclusive prefix sum of each row of `x`.
fn exclusive_prefix_matrix(s: usize) -> Tensor {
    Tensor::from_fn([s, s], |i| if i / s < i % s { 1.0 } else { 0.0 })
}

/// Composites field samples given per-sample `σ: [R·S, 1]`, colours
/// `[R·S, 3]`, optional features and interval lengths `δ: [R, S]`.
pub fn composite<'t>(
    tape: &'t Tape,
    field: &FieldSample<'t>,
    deltas: Tensor,
    background: [f64; 3],
) -> Result<RayBatch<'t>> {
    let (r, s) = (deltas.shape()[0], deltas.shape()[1]);
    let tau = field.sigma.reshape([r, s])?.mul(tape.constant(deltas))?;
    let cum = tau.matmul(tape.constant(exclusive_prefix_matrix(s)))?;
    let alpha = tau.neg().exp().neg().add_scalar(1.0);
    let w = cum.neg().exp().mul(alpha)?;
    // Σw = 1 − T_final analytically; computing it from T_final keeps it in
    // [0, 1] under rounding.
    let transmittance = tau.sum_axis(1)?.neg().exp();
    let weight_sum = transmittance.neg().add_scalar(1.0);
    let w3 = w.reshape([r, s, 1])?;
    let color = w3.mul(field.color.reshape([r, s, 3])?)?.sum_axis(1)?;
    let bg = transmittance
        .reshape([r, 1])?
        .mul(tape.constant(Tensor::new([1, 3], background.to_vec())?))?;
    let feature = match field.feature {
        Some(f) => {
            let c = f.shape()[1];
            Some(w3.mul(f.reshape([r, s, c])?)?.sum_axis(1)?)
        }
        None => None,
    };
    Ok(RayBatch {
        color: color.add(bg)?,
        feature,
        weight_sum,
    })
}

/// Marches every ray through `field`. `ids` seed the per-ray jitter.
pub fn march_rays<'t, F: RadianceField<'t>>(
    tape: &'t Tape,
    field: &F,
    rays: &[Ray],
    ids: &[u64],
    cfg: &RenderConfig,
    with_feature: bool,
) -> Result<RayBatch<'t>> {
    if cfg.n_samples == 0 {
        return Err(Error::invalid("march_ray", "n_samples must be at least 1"));
    }
    if rays.is_empty() || rays.len() != ids.len() {
        return Err(Error::invalid("march_ray", "need one id per ray and at least one ray"));
    }
    let s = cfg.n_samples;
    let mut points = Vec::with_capacity(rays.len() * s * 3);
    let mut deltas = Vec::with_capacity(rays.len() * s);
    for (ray, &id) in rays.iter().zip(ids) {
        let mut rng = cfg.jitter.then(|| pixel_rng(cfg.seed, id));
        let (ts, ds) = ray_samples(ray, s, rng.as_mut());
        for &t in &ts {
            let p = ray.at(t);
            points.extend((0..3).map(|a| p[a].clamp(-0.5, 0.5)));
        }
        deltas.extend(ds);
    }
    let n = rays.len() * s;
    let sample = field.evaluate(tape, Tensor::new([n, 3], points)?, with_feature)?;
    composite(tape, &sample, Tensor::new([rays.len(), s], deltas)?, cfg.background)
}

/// Renders the listed pixels `(col, row)` of `pose`'s image plane.
pub fn render_pixels<'t, F: RadianceField<'t>>(
    tape: &'t Tape,
    field: &F,
    pose: &CameraPose,
    pixels: &[(usize, usize)],
    cfg: &RenderConfig,
    with_feature: bool,
) -> Result<RayBatch<'t>> {
    let w = pose.width();
    let rays: Vec<Ray> = pixels
        .iter()
        .map(|&(i, j)| pose.pixel_to_ray(i as f64 + 0.5, j as f64 + 0.5))
        .collect();
    let ids: Vec<u64> = pixels.iter().map(|&(i, j)| (j * w + i) as u64).collect();
    march_rays(tape, field, &rays, &ids, cfg, with_feature)
}

/// Reshapes per-ray rows `[R, c]` of a row-major `h × w` pixel block to `[c, h, w]`.
pub fn rows_to_image<'t>(rows: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
    let c = rows.shape()[1];
    rows.t()?.reshape([c, h, w])
}

/// Renders a full `pose.height() × pose.width()` image.
pub fn render<'t, F: RadianceField<'t>>(
    tape: &'t Tape,
    field: &F,
    pose: &CameraPose,
    cfg: &RenderConfig,
    with_feature: bool,
) -> Result<RenderOutput<'t>> {
    let (w, h) = (pose.width(), pose.height());
    let pixels: Vec<(usize, usize)> = (0..h).flat_map(|j| (0..w).map(move |i| (i, j))).collect();
    let batch = render_pixels(tape, field, pose, &pixels, cfg, with_feature)?;
    Ok(RenderOutput {
        image: rows_to_image(batch.color, h, w)?,
        feature_map: batch.feature.map(|f| rows_to_image(f, h, w)).transpose()?,
        weight_sums: batch.weight_sum.reshape([h, w])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use nalgebra::Vector3;

    struct Constant {
        sigma: f64,
        color: [f64; 3],
    }

    impl<'t> RadianceField<'t> for Constant {
        fn evaluate(&self, tape: &'t Tape, points: Tensor, _: bool) -> Result<FieldSample<'t>> {
            let n = points.shape()[0];
            Ok(FieldSample {
                sigma: tape.constant(Tensor::full([n, 1], self.sigma)),
                color: tape.constant(Tensor::from_fn([n, 3], |i| self.color[i % 3])),
                feature: None,
            })
        }
    }

    fn axis_ray() -> Ray {
        Ray {
            origin: Vector3::new(0.0, 0.0, -2.0),
            direction: Vector3::z(),
            t_near: 1e-3,
            t_far: 1e3,
        }
    }

    #[test]
    fn transparent_field_gives_background() {
        let tape = Tape::no_grad();
        let f = Constant { sigma: 0.0, color: [0.2, 0.3, 0.4] };
        let out = march_rays(&tape, &f, &[axis_ray()], &[0], &RenderConfig::default(), false).unwrap();
        assert_eq!(out.color.value().data(), &WHITE);
        assert_eq!(out.weight_sum.item(), 0.0);
    }

    #[test]
    fn opaque_single_sample_takes_its_colour() {
        let tape = Tape::no_grad();
        let f = Constant { sigma: 1e6, color: [0.2, 0.3, 0.4] };
        let cfg = RenderConfig {
            n_samples: 1,
            ..RenderConfig::default()
        };
        let out = march_rays(&tape, &f, &[axis_ray()], &[0], &cfg, false).unwrap();
        assert_eq!(out.color.value().data(), &[0.2, 0.3, 0.4]);
        assert_eq!(out.weight_sum.item(), 1.0);
    }

    #[test]
    fn ray_missing_the_cube_is_background() {
        let tape = Tape::no_grad();
        let f = Constant { sigma: 50.0, color: [0.0; 3] };
        let ray = Ray {
            origin: Vector3::new(3.0, 0.0, -2.0),
            ..axis_ray()
        };
        let out = march_rays(&tape, &f, &[ray], &[0], &RenderConfig::default(), false).unwrap();
        assert_eq!(out.color.value().data(), &WHITE);
    }

    #[test]
    fn midpoints_cover_the_cube_interval() {
        let (ts, ds) = ray_samples(&axis_ray(), 4, None);
        assert_eq!(ts, vec![1.625, 1.875, 2.125, 2.375]);
        assert_eq!(ds, vec![0.25; 4]);
    }

    #[test]
    fn jitter_is_seeded_per_pixel() {
        let tape = Tape::no_grad();
        let f = Constant { sigma: 3.0, color: [0.5; 3] };
        let pose = CameraPose::orbit(Intrinsics::centered(4.0, 4, 4), 0.3, 0.2, 1.3).unwrap();
        let cfg = RenderConfig {
            jitter: true,
            seed: 9,
            ..RenderConfig::default()
        };
        let a = render(&tape, &f, &pose, &cfg, false).unwrap();
        let b = render(&tape, &f, &pose, &cfg, false).unwrap();
        assert_eq!(a.image.value(), b.image.value());
        // Rendering a single pixel alone reproduces the full-image value.
        let one = render_pixels(&tape, &f, &pose, &[(2, 1)], &cfg, false).unwrap();
        let full = a.image.value();
        for c in 0..3 {
            assert_eq!(one.color.value().data()[c], full.data()[c * 16 + 4 + 2]);
        }
    }
}
