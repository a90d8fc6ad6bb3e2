//! Procedural scenes of soft-edged boxes and spheres with an analytic
//! radiance field.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{CameraPose, Intrinsics};
use crate::error::Result;
use crate::renderer::{render, FieldSample, RadianceField, RenderConfig};
use crate::tensor::{Tape, Tensor};

/// Width of the sigmoid edge of each primitive, in world units.
pub const EDGE: f64 = 0.01;
/// Orbit radius of every generated camera.
pub const ORBIT_RADIUS: f64 = 1.3;
pub const MIN_ELEVATION_DEG: f64 = -30.0;
pub const MAX_ELEVATION_DEG: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub albedo: [f64; 3],
    pub density: f64,
}

impl Primitive {
    fn extent(&self) -> [f64; 3] {
        match self.shape {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Box { half } => half,
        }
    }

    /// Soft indicator in `(0, 1)`.
    pub fn occupancy(&self, p: &[f64; 3]) -> f64 {
        let d: [f64; 3] = std::array::from_fn(|a| p[a] - self.center[a]);
        let sdf = match self.shape {
            Shape::Sphere { radius } => (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - radius,
            Shape::Box { half } => (0..3).map(|a| d[a].abs() - half[a]).fold(f64::MIN, f64::max),
        };
        let z = -sdf / EDGE;
        if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub id: u64,
    pub primitives: Vec<Primitive>,
}

impl SyntheticScene {
    pub fn empty(id: u64) -> Self {
        SyntheticScene {
            id,
            primitives: Vec::new(),
        }
    }

    /// Density and density-weighted albedo at `p`.
    pub fn field_at(&self, p: &[f64; 3]) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut rgb = [0.0; 3];
        for prim in &self.primitives {
            let s = prim.density * prim.occupancy(p);
            sigma += s;
            for c in 0..3 {
                rgb[c] += s * prim.albedo[c];
            }
        }
        if sigma > 0.0 {
            rgb.iter_mut().for_each(|c| *c /= sigma);
        }
        (sigma, rgb)
    }
}

/// One to four primitives with parameters drawn from `seed`.
pub fn generate_scene(seed: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(1..=4);
    let primitives = (0..count)
        .map(|_| {
            let shape = if rng.gen_bool(0.5) {
                Shape::Sphere {
                    radius: rng.gen_range(0.08..0.2),
                }
            } else {
                Shape::Box {
                    half: std::array::from_fn(|_| rng.gen_range(0.06..0.18)),
                }
            };
            let mut prim = Primitive {
                shape,
                center: [0.0; 3],
                albedo: std::array::from_fn(|_| rng.gen_range(0.05..0.95)),
                density: rng.gen_range(30.0..80.0),
            };
            let ext = prim.extent();
            prim.center = std::array::from_fn(|a| {
                let lim = (0.5 - ext[a] - 2.0 * EDGE).min(0.4);
                rng.gen_range(-0.4..0.4f64).clamp(-lim, lim)
            });
            prim
        })
        .collect();
    SyntheticScene { id: seed, primitives }
}

impl<'t> RadianceField<'t> for SyntheticScene {
    fn evaluate(&self, tape: &'t Tape, points: Tensor, _with_feature: bool) -> Result<FieldSample<'t>> {
        let n = points.shape()[0];
        let mut sigma = Vec::with_capacity(n);
        let mut color = Vec::with_capacity(3 * n);
        for p in points.data().chunks(3) {
            let (s, c) = self.field_at(&[p[0], p[1], p[2]]);
            sigma.push(s);
            color.extend(c);
        }
        Ok(FieldSample {
            sigma: tape.constant(Tensor::new([n, 1], sigma)?),
            color: tape.constant(Tensor::new([n, 3], color)?),
            feature: None,
        })
    }
}

/// Ray-marched image `[3, H, W]` of the analytic field.
pub fn render_ground_truth(scene: &SyntheticScene, pose: &CameraPose, cfg: &RenderConfig) -> Result<Tensor> {
    let tape = Tape::no_grad();
    let out = render(&tape, scene, pose, cfg, false)?;
    Ok((*out.image.value()).clone())
}

/// `count` cameras on the standard orbit: azimuth uniform, elevation
/// uniform in the allowed band, focal length equal to the image width.
pub fn orbit_cameras(seed: u64, count: usize, size: usize) -> Result<Vec<CameraPose>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = Intrinsics::centered(size as f64, size, size);
    (0..count)
        .map(|_| {
            let az = rng.gen_range(0.0..2.0 * PI);
            let el = rng.gen_range(MIN_ELEVATION_DEG..MAX_ELEVATION_DEG).to_radians();
            CameraPose::orbit(k, az, el, ORBIT_RADIUS)
        })
        .collect()
}
