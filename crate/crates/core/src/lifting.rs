//! Image encoder, unprojection of image features into a voxel grid, and
//! attention pooling of several views into one volume.
//!
//! Voxels are ordered `(z, y, x)` row-major. Voxel `(i, j, k)` along
//! `(x, y, z)` has its centre at `((i + 0.5)/W − 0.5, (j + 0.5)/H − 0.5,
//! (k + 0.5)/D − 0.5)`.

use std::cmp::Ordering;

use nalgebra::Vector3;
use rand::Rng;

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, Init, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Score added to views that do not see a voxel.
const MASKED_SCORE: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VolumeDims {
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl VolumeDims {
    pub fn cube(channels: usize, res: usize) -> Self {
        VolumeDims {
            channels,
            depth: res,
            height: res,
            width: res,
        }
    }

    pub fn voxels(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn center(&self, index: usize) -> Vector3<f64> {
        let (w, h) = (self.width, self.height);
        let (i, j, k) = (index % w, (index / w) % h, index / (w * h));
        Vector3::new(
            (i as f64 + 0.5) / w as f64 - 0.5,
            (j as f64 + 0.5) / h as f64 - 0.5,
            (k as f64 + 0.5) / self.depth as f64 - 0.5,
        )
    }
}

/// Voxel features `[N, C]` with per-voxel view-hit counts.
#[derive(Clone)]
pub struct FeatureVolume<'t> {
    pub dims: VolumeDims,
    pub features: Var<'t>,
    pub mask: Vec<f64>,
}

impl<'t> FeatureVolume<'t> {
    /// Channel-first grid `[C, D, H, W]`.
    pub fn grid(&self) -> Result<Var<'t>> {
        let d = self.dims;
        self.features.t()?.reshape([d.channels, d.depth, d.height, d.width])
    }
}

/// Two conv blocks with a ×2 average-pool between them: `[.., 3, H, W]` →
/// `[.., C_feat, H/2, W/2]`.
#[derive(Clone, Debug)]
pub struct Encoder {
    conv1: Conv,
    conv2: Conv,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        out: usize,
        final_init: Init,
        rng: &mut R,
    ) -> Self {
        Encoder {
            conv1: Conv::new(store, &format!("{prefix}.conv1"), 3, hidden, 3, Init::Scaled(1.0), rng),
            conv2: Conv::new(store, &format!("{prefix}.conv2"), hidden, out, 3, final_init, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, images: Var<'t>) -> Result<Var<'t>> {
        let s = images.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if s.len() < 3 || s[s.len() - 3] != 3 {
            return Err(Error::shape("extract_features", &[&s]));
        }
        if h % 2 == 1 || w % 2 == 1 {
            return Err(Error::invalid("extract_features", format!("image size {h}×{w} must be even")));
        }
        let x = self.conv1.forward(p, images)?.silu().avg_pool2x()?;
        self.conv2.forward(p, x)
    }
}

/// Where each voxel lands in a `fh × fw` feature map of an image seen
/// from `pose`: node-index coordinates `[N, 2]` and a 0/1 visibility mask.
pub fn voxel_projection(pose: &CameraPose, dims: VolumeDims, fh: usize, fw: usize) -> (Tensor, Vec<f64>) {
    let (iw, ih) = (pose.width() as f64, pose.height() as f64);
    let (sx, sy) = (fw as f64 / iw, fh as f64 / ih);
    let n = dims.voxels();
    let mut coords = vec![0.0; 2 * n];
    let mut mask = vec![0.0; n];
    for v in 0..n {
        let Ok((u, vv)) = pose.project(&dims.center(v)) else {
            continue;
        };
        if (0.0..=iw).contains(&u) && (0.0..=ih).contains(&vv) {
            // Feature node p sits at image coordinate (p + 0.5)/s.
            coords[2 * v] = u * sx - 0.5;
            coords[2 * v + 1] = vv * sy - 0.5;
            mask[v] = 1.0;
        }
    }
    (Tensor::from_parts(vec![n, 2], coords), mask)
}

/// Unprojects a `[C, h, w]` feature map into the voxel grid.
pub fn lift_view<'t>(features: Var<'t>, pose: &CameraPose, dims: VolumeDims) -> Result<FeatureVolume<'t>> {
    let s = features.shape();
    if s.len() != 3 || s[0] != dims.channels {
        return Err(Error::shape("lift_view", &[&s, &[dims.channels]]));
    }
    if dims.voxels() == 0 || dims.channels == 0 {
        return Err(Error::invalid("lift_view", "volume dimensions must be positive"));
    }
    let tape = features.tape();
    let (coords, mask) = voxel_projection(pose, dims, s[1], s[2]);
    let n = dims.voxels();
    let sampled = features.bilinear_sample_2d(tape.constant(coords))?;
    let m = tape.constant(Tensor::from_parts(vec![n, 1], mask.clone()));
    Ok(FeatureVolume {
        dims,
        features: sampled.mul(m)?,
        mask,
    })
}

/// Views sorted by content, so that pooling is bitwise independent of the
/// order the caller lists them in.
fn canonical_order<'a, 't>(views: &'a [FeatureVolume<'t>]) -> Vec<&'a FeatureVolume<'t>> {
    let values: Vec<_> = views.iter().map(|v| v.features.value()).collect();
    let mut order: Vec<usize> = (0..views.len()).collect();
    let lex = |x: &[f64], y: &[f64]| {
        x.iter()
            .zip(y)
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    };
    order.sort_by(|&a, &b| {
        lex(values[a].data(), values[b].data()).then_with(|| lex(&views[a].mask, &views[b].mask))
    });
    order.into_iter().map(|i| &views[i]).collect()
}

/// Per-voxel attention pooling over views followed by a residual refinement
/// network (per-depth-slice conv, cross-slice mixing, 1×1 channel mix).
#[derive(Clone, Debug)]
pub struct Aggregator {
    query: ParamId,
    embedding: Option<ParamId>,
    slice_conv: Conv,
    depth_mix: ParamId,
    channel_mix: Conv,
    dims: VolumeDims,
}

impl Aggregator {
    /// `embedding` adds a learned per-voxel offset at the refinement input.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dims: VolumeDims,
        embedding: bool,
        rng: &mut R,
    ) -> Self {
        let c = dims.channels;
        let d = dims.depth;
        Aggregator {
            query: store.add(format!("{prefix}.query"), Tensor::randn([c, 1], 1.0 / (c as f64).sqrt(), rng)),
            embedding: embedding.then(|| {
                store.add(
                    format!("{prefix}.embedding"),
                    Tensor::zeros([d, c, dims.height, dims.width]),
                )
            }),
            slice_conv: Conv::new(store, &format!("{prefix}.slice"), c, c, 3, Init::Scaled(1.0), rng),
            depth_mix: store.add(format!("{prefix}.depth_mix"), Tensor::identity(d)),
            channel_mix: Conv::new(store, &format!("{prefix}.mix"), c, c, 1, Init::Zeros, rng),
            dims,
        }
    }

    /// Attention-weighted average over views, before refinement: `[N, C]`.
    pub fn pool<'t>(&self, p: &Bound<'t>, views: &[FeatureVolume<'t>]) -> Result<Var<'t>> {
        let first = views.first().ok_or_else(|| Error::invalid("aggregate_views", "no views"))?;
        if views.iter().any(|v| v.dims != self.dims) {
            return Err(Error::invalid("aggregate_views", "volume dimensions differ"));
        }
        if views.len() == 1 {
            return Ok(first.features);
        }
        let views = canonical_order(views);
        let tape = first.features.tape();
        let n = self.dims.voxels();
        let scale = 1.0 / (self.dims.channels as f64).sqrt();
        let q = p.get(self.query);
        let mut scores = Vec::with_capacity(views.len());
        for v in &views {
            let bias = Tensor::from_fn([n, 1], |i| if v.mask[i] > 0.0 { 0.0 } else { MASKED_SCORE });
            scores.push(v.features.matmul(q)?.scale(scale).add(tape.constant(bias))?);
        }
        let attn = Var::concat(&scores, 1)?.softmax()?;
        let mut pooled: Option<Var<'t>> = None;
        for (i, v) in views.iter().enumerate() {
            let term = attn.narrow(1, i, 1)?.mul(v.features)?;
            pooled = Some(match pooled {
                None => term,
                Some(acc) => acc.add(term)?,
            });
        }
        Ok(pooled.expect("at least two views"))
    }

    /// Residual refinement of pooled features `[N, C]`.
    pub fn refine<'t>(&self, p: &Bound<'t>, pooled: Var<'t>) -> Result<Var<'t>> {
        let VolumeDims {
            channels: c,
            depth: d,
            height: h,
            width: w,
        } = self.dims;
        // [N, C] → [C, D·H·W] → [C, D, H, W] → [D, C, H, W]
        let slices = pooled.t()?.reshape([c, d, h, w])?.permute(&[1, 0, 2, 3])?;
        let mut x = slices;
        if let Some(e) = self.embedding {
            x = x.add(p.get(e))?;
        }
        let x = self.slice_conv.forward(p, x)?.silu();
        let mixed = p
            .get(self.depth_mix)
            .matmul(x.reshape([d, c * h * w])?)?
            .reshape([d, c, h, w])?;
        let delta = self.channel_mix.forward(p, mixed)?;
        let out = slices.add(delta)?;
        out.permute(&[1, 0, 2, 3])?.reshape([c, d * h * w])?.t()
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, views: &[FeatureVolume<'t>]) -> Result<FeatureVolume<'t>> {
        let pooled = self.pool(p, views)?;
        let refined = self.refine(p, pooled)?;
        let n = self.dims.voxels();
        let mut hits = vec![0.0; n];
        for v in views {
            for (h, m) in hits.iter_mut().zip(&v.mask) {
                *h += m;
            }
        }
        let tape: &Tape = refined.tape();
        let seen = Tensor::from_fn([n, 1], |i| if hits[i] > 0.0 { 1.0 } else { 0.0 });
        Ok(FeatureVolume {
            dims: self.dims,
            features: refined.mul(tape.constant(seen))?,
            mask: hits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pose() -> CameraPose {
        CameraPose::orbit(Intrinsics::centered(32.0, 32, 32), 0.4, 0.3, 1.3).unwrap()
    }

    #[test]
    fn encoder_shapes_and_zero_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "e", 8, 16, Init::Zeros, &mut rng);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let out = enc.forward(&b, tape.constant(Tensor::zeros([3, 64, 64]))).unwrap();
        assert_eq!(out.shape(), vec![16, 32, 32]);
        assert!(out.value().data().iter().all(|&v| v == 0.0));
        assert!(enc.forward(&b, tape.constant(Tensor::zeros([3, 63, 64]))).is_err());
    }

    #[test]
    fn constant_features_lift_to_constant_volume() {
        let tape = Tape::new();
        let dims = VolumeDims::cube(2, 6);
        let f = tape.constant(Tensor::full([2, 16, 16], 0.75));
        let vol = lift_view(f, &pose(), dims).unwrap();
        let data = vol.features.value();
        for (v, &m) in vol.mask.iter().enumerate() {
            let want = if m > 0.0 { 0.75 } else { 0.0 };
            assert!((data.data()[2 * v] - want).abs() < 1e-15);
        }
        assert!(vol.mask.iter().any(|&m| m > 0.0));
    }

    #[test]
    fn camera_looking_away_sees_nothing() {
        let k = Intrinsics::centered(32.0, 32, 32);
        let away = CameraPose::look_at(
            k,
            Vector3::new(1.3, 0.0, 0.0),
            Vector3::new(3.0, 0.0, 0.0),
            Vector3::z(),
        )
        .unwrap();
        let tape = Tape::new();
        let f = tape.constant(Tensor::ones([2, 16, 16]));
        let vol = lift_view(f, &away, VolumeDims::cube(2, 4)).unwrap();
        assert!(vol.mask.iter().all(|&m| m == 0.0));
        assert!(vol.features.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_views_pool_to_the_same_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = VolumeDims::cube(3, 4);
        let mut store = ParamStore::new();
        let agg = Aggregator::new(&mut store, "a", dims, true, &mut rng);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let f = tape.constant(Tensor::randn([3, 8, 8], 1.0, &mut rng));
        let v = lift_view(f, &pose(), dims).unwrap();
        let single = agg.pool(&b, std::slice::from_ref(&v)).unwrap();
        let double = agg.pool(&b, &[v.clone(), v.clone()]).unwrap();
        assert!(single.value().max_abs_diff(&double.value()) < 1e-15);
        // Zero-initialised channel mix: refinement starts as the identity.
        let refined = agg.refine(&b, single).unwrap();
        assert!(refined.value().max_abs_diff(&single.value()) < 1e-15);
        assert!(agg.pool(&b, &[]).is_err());
    }
}
