//! Tri-plane construction from a feature volume, plane upsampling, and
//! point queries.
//!
//! Planes are stored batch-first as `[3, C, R, R]` in the order xy, xz, yz.
//! Plane xy is indexed `[row = y, col = x]`, xz is `[row = z, col = x]` and
//! yz is `[row = z, col = y]`. A world coordinate `p ∈ [−0.5, 0.5]` maps to
//! the node-index coordinate `(p + 0.5)·(R − 1)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, Init, Linear, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Slack allowed when checking that a query point lies in the unit cube.
pub const CUBE_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Learned,
    Bicubic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionPlacement {
    Off,
    FinalBlock,
    EveryBlock,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriPlaneConfig {
    pub channels: usize,
    /// Number of ×2 upsampling stages.
    pub upsample_log2: usize,
    pub mode: UpsampleMode,
    pub attention: AttentionPlacement,
    /// Keys and values are average-pooled this many times (×2 each) before
    /// attention, which keeps the cost linear in plane pixels.
    pub attention_kv_pool: usize,
}

impl Default for TriPlaneConfig {
    fn default() -> Self {
        TriPlaneConfig {
            channels: 16,
            upsample_log2: 2,
            mode: UpsampleMode::Learned,
            attention: AttentionPlacement::FinalBlock,
            attention_kv_pool: 3,
        }
    }
}

/// Fine tri-plane on a tape.
#[derive(Clone, Copy)]
pub struct TriPlane<'t> {
    pub planes: Var<'t>,
}

impl<'t> TriPlane<'t> {
    pub fn new(planes: Var<'t>) -> Result<Self> {
        let s = planes.shape();
        if s.len() != 4 || s[0] != 3 || s[2] != s[3] {
            return Err(Error::shape("triplane", &[&s]));
        }
        Ok(TriPlane { planes })
    }

    pub fn channels(&self) -> usize {
        self.planes.shape()[1]
    }

    pub fn resolution(&self) -> usize {
        self.planes.shape()[2]
    }

    pub fn plane(&self, i: usize) -> Result<Var<'t>> {
        let (c, r) = (self.channels(), self.resolution());
        self.planes.narrow(0, i, 1)?.reshape([c, r, r])
    }

    /// Sum of the three bilinear plane samples at each row of `points: [n, 3]`.
    pub fn query(&self, points: Var<'t>) -> Result<Var<'t>> {
        let s = points.shape();
        if s.len() != 2 || s[1] != 3 {
            return Err(Error::shape("query", &[&s]));
        }
        for p in points.value().data().chunks(3) {
            if p.iter().any(|v| v.abs() > 0.5 + CUBE_SLACK) {
                return Err(Error::OutsideVolume([p[0], p[1], p[2]]));
            }
        }
        let scale = (self.resolution() - 1) as f64;
        let grid = points.add_scalar(0.5).scale(scale);
        let axis = |i: usize| grid.narrow(1, i, 1);
        let (x, y, z) = (axis(0)?, axis(1)?, axis(2)?);
        let coords = [
            Var::concat(&[x, y], 1)?,
            Var::concat(&[x, z], 1)?,
            Var::concat(&[y, z], 1)?,
        ];
        let mut total: Option<Var<'t>> = None;
        for (i, c) in coords.into_iter().enumerate() {
            let sample = self.plane(i)?.bilinear_sample_2d(c)?;
            total = Some(match total {
                None => sample,
                Some(t) => t.add(sample)?,
            });
        }
        Ok(total.expect("three planes"))
    }
}

/// Axis means of a `[C, D, H, W]` grid followed by a per-plane 1×1 conv.
#[derive(Clone, Debug)]
pub struct PlaneProjector {
    convs: [Conv; 3],
}

impl PlaneProjector {
    /// The 1×1 convs start as the identity map.
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        let convs = ["xy", "xz", "yz"].map(|name| {
            let weight = store.add(
                format!("{prefix}.{name}.weight"),
                Tensor::identity(channels).reshaped([channels, channels, 1, 1]).unwrap(),
            );
            let bias = store.add(format!("{prefix}.{name}.bias"), Tensor::zeros([channels]));
            Conv { weight, bias }
        });
        PlaneProjector { convs }
    }

    /// Returns `[3, C, R, R]`; the grid must be a cube.
    pub fn forward<'t>(&self, p: &Bound<'t>, grid: Var<'t>) -> Result<Var<'t>> {
        let planes = volume_to_planes(grid)?;
        let s = planes[0].shape();
        let mut out = Vec::with_capacity(3);
        for (plane, conv) in planes.into_iter().zip(&self.convs) {
            out.push(conv.forward(p, plane)?.reshape([1, s[0], s[1], s[2]])?);
        }
        Var::concat(&out, 0)
    }
}

/// Parameter-free part of the projection: `[xy, xz, yz]` axis means.
pub fn volume_to_planes(grid: Var<'_>) -> Result<[Var<'_>; 3]> {
    let s = grid.shape();
    if s.len() != 4 || s[1] != s[2] || s[2] != s[3] {
        return Err(Error::shape("volume_to_planes", &[&s]));
    }
    Ok([grid.mean_axis(1)?, grid.mean_axis(2)?, grid.mean_axis(3)?])
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    kv_pool: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, c: usize, kv_pool: usize, rng: &mut R) -> Self {
        let mut lin = |name: &str, init| Linear::new(store, &format!("{prefix}.{name}"), c, c, false, init, rng);
        SelfAttention {
            q: lin("q", Init::Scaled(1.0)),
            k: lin("k", Init::Scaled(1.0)),
            v: lin("v", Init::Scaled(1.0)),
            out: lin("out", Init::Zeros),
            kv_pool,
        }
    }

    /// Residual attention over the pixels of each batch item of `[n, c, h, w]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut pooled = x;
        let mut levels = 0;
        while levels < self.kv_pool && pooled.shape()[2] % 2 == 0 && pooled.shape()[2] > 1 {
            pooled = pooled.avg_pool2x()?;
            levels += 1;
        }
        let ps = pooled.shape();
        let kv_len = ps[2] * ps[3];
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let tokens = x.narrow(0, i, 1)?.reshape([c, h * w])?.t()?;
            let kv = pooled.narrow(0, i, 1)?.reshape([c, kv_len])?.t()?;
            let q = self.q.forward(p, tokens)?;
            let k = self.k.forward(p, kv)?;
            let v = self.v.forward(p, kv)?;
            let a = self.out.forward(p, q.attention(k, v)?)?;
            outs.push(a.t()?.reshape([1, c, h, w])?);
        }
        x.add(Var::concat(&outs, 0)?)
    }
}

#[derive(Clone, Debug)]
struct UpsamplerBlock {
    res_a: Conv,
    res_b: Conv,
    post: Conv,
    attention: Option<SelfAttention>,
}

impl UpsamplerBlock {
    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let r = self.res_b.forward(p, self.res_a.forward(p, x.silu())?.silu())?;
        let h = x.add(r)?.upsample_nearest2x()?;
        let h = h.add(self.post.forward(p, h.silu())?)?;
        match &self.attention {
            Some(a) => a.forward(p, h),
            None => Ok(h),
        }
    }
}

/// Brings `[3, C, R, R]` planes to `[3, C, R·2^k, R·2^k]`, sharing weights
/// across the three planes.
#[derive(Clone, Debug)]
pub struct Upsampler {
    mode: UpsampleMode,
    factor_log2: usize,
    blocks: Vec<UpsamplerBlock>,
}

impl Upsampler {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &TriPlaneConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        let blocks = match cfg.mode {
            UpsampleMode::Bicubic => Vec::new(),
            UpsampleMode::Learned => (0..cfg.upsample_log2)
                .map(|i| {
                    let name = format!("{prefix}.block{i}");
                    let last = i + 1 == cfg.upsample_log2;
                    let with_attention = match cfg.attention {
                        AttentionPlacement::Off => false,
                        AttentionPlacement::FinalBlock => last,
                        AttentionPlacement::EveryBlock => true,
                    };
                    UpsamplerBlock {
                        res_a: Conv::new(store, &format!("{name}.res_a"), c, c, 3, Init::Scaled(1.0), rng),
                        res_b: Conv::new(store, &format!("{name}.res_b"), c, c, 3, Init::Zeros, rng),
                        post: Conv::new(store, &format!("{name}.post"), c, c, 3, Init::Zeros, rng),
                        attention: with_attention.then(|| {
                            SelfAttention::new(store, &format!("{name}.attn"), c, cfg.attention_kv_pool, rng)
                        }),
                    }
                })
                .collect(),
        };
        Upsampler {
            mode: cfg.mode,
            factor_log2: cfg.upsample_log2,
            blocks,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, planes: Var<'t>) -> Result<Var<'t>> {
        match self.mode {
            UpsampleMode::Learned => self.blocks.iter().try_fold(planes, |x, b| b.forward(p, x)),
            UpsampleMode::Bicubic => {
                let r = planes.shape()[2];
                bicubic_resize(planes, r << self.factor_log2)
            }
        }
    }
}

/// Target resolution check shared by callers that take a factor rather than
/// a log2 count.
pub fn upsample_log2(factor: usize) -> Result<usize> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::invalid(
            "upsample_planes",
            format!("factor {factor} is not a power of two"),
        ));
    }
    Ok(factor.trailing_zeros() as usize)
}

fn keys_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x.powi(3) - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x.powi(3) - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// `[out, in]` bicubic interpolation matrix with corner-aligned sampling and
/// replicated borders.
pub fn bicubic_matrix(n_in: usize, n_out: usize) -> Tensor {
    let mut m = Tensor::zeros([n_out, n_in]);
    let ratio = if n_out > 1 {
        (n_in - 1) as f64 / (n_out - 1) as f64
    } else {
        0.0
    };
    for o in 0..n_out {
        let src = o as f64 * ratio;
        let base = src.floor() as isize;
        for tap in base - 1..=base + 2 {
            let idx = tap.clamp(0, n_in as isize - 1) as usize;
            m.data_mut()[o * n_in + idx] += keys_kernel(src - tap as f64);
        }
        // The kernel sums to one only up to rounding; put the residue on the
        // largest tap so constant inputs come out to within an ulp or two.
        let row = &mut m.data_mut()[o * n_in..(o + 1) * n_in];
        let big = (0..n_in).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
        let rest: f64 = (0..n_in).filter(|&i| i != big).map(|i| row[i]).sum();
        row[big] = 1.0 - rest;
    }
    m
}

/// Separable bicubic resize of the last two (square) axes of a rank-4 tensor.
pub fn bicubic_resize(x: Var<'_>, out: usize) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::shape("bicubic_resize", &[&s]));
    }
    let (n, c, r) = (s[0], s[1], s[2]);
    if out == r {
        return Ok(x);
    }
    let tape = x.tape();
    let at = tape.constant(bicubic_matrix(r, out).transposed());
    let b = n * c;
    let along_w = x.reshape([b * r, r])?.matmul(at)?.reshape([b, r, out])?;
    let along_h = along_w
        .permute(&[0, 2, 1])?
        .reshape([b * out, r])?
        .matmul(at)?
        .reshape([b, out, out])?;
    along_h.permute(&[0, 2, 1])?.reshape([n, c, out, out])
}

/// Full tri-plane decoder front end: projection plus upsampling.
#[derive(Clone, Debug)]
pub struct TriPlaneBuilder {
    pub projector: PlaneProjector,
    pub upsampler: Upsampler,
}

impl TriPlaneBuilder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &TriPlaneConfig, rng: &mut R) -> Self {
        TriPlaneBuilder {
            projector: PlaneProjector::new(store, &format!("{prefix}.project"), cfg.channels),
            upsampler: Upsampler::new(store, &format!("{prefix}.up"), cfg, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, grid: Var<'t>) -> Result<TriPlane<'t>> {
        let planes = self.projector.forward(p, grid)?;
        TriPlane::new(self.upsampler.forward(p, planes)?)
    }
}

/// Handy for tests and oracles: planes filled from a closure over
/// `(plane, channel, row, col)`.
pub fn planes_from_fn(tape: &Tape, c: usize, r: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> TriPlane<'_> {
    let t = Tensor::from_fn([3, c, r, r], |i| {
        let (col, row) = (i % r, (i / r) % r);
        let ch = (i / (r * r)) % c;
        f(i / (c * r * r), ch, row, col)
    });
    TriPlane { planes: tape.leaf(t) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_planes_sum() {
        let tape = Tape::new();
        let tp = planes_from_fn(&tape, 2, 4, |plane, ch, _, _| (plane + 1) as f64 * 10.0 + ch as f64);
        let pts = tape.constant(Tensor::new([2, 3], vec![0.1, -0.2, 0.3, 0.5, 0.5, -0.5]).unwrap());
        let q = tp.query(pts).unwrap();
        assert_eq!(q.value().data(), &[60.0, 63.0, 60.0, 63.0]);
    }

    #[test]
    fn query_at_grid_nodes_is_exact() {
        let tape = Tape::new();
        let r = 5;
        let tp = planes_from_fn(&tape, 1, r, |plane, _, row, col| (plane * 100 + row * 10 + col) as f64);
        // Node indices (x, y, z) = (1, 3, 2) → world (i/(r−1) − 0.5).
        let w = |i: usize| i as f64 / (r - 1) as f64 - 0.5;
        let pts = tape.constant(Tensor::new([1, 3], vec![w(1), w(3), w(2)]).unwrap());
        let got = tp.query(pts).unwrap().item();
        let xy = 31.0;
        let xz = 100.0 + 21.0;
        let yz = 200.0 + 23.0;
        assert!((got - (xy + xz + yz)).abs() < 1e-12);
    }

    #[test]
    fn query_rejects_points_outside() {
        let tape = Tape::new();
        let tp = planes_from_fn(&tape, 1, 3, |_, _, _, _| 0.0);
        let pts = tape.constant(Tensor::new([1, 3], vec![0.0, 0.6, 0.0]).unwrap());
        assert!(matches!(tp.query(pts), Err(Error::OutsideVolume(_))));
    }

    #[test]
    fn projection_of_constant_and_single_voxel() {
        let mut store = ParamStore::new();
        let proj = PlaneProjector::new(&mut store, "p", 1);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let c = tape.constant(Tensor::full([1, 4, 4, 4], 2.5));
        let planes = proj.forward(&b, c).unwrap();
        assert!(planes.value().data().iter().all(|&v| (v - 2.5).abs() < 1e-15));

        let mut one = Tensor::zeros([1, 4, 4, 4]);
        // depth 1, row 2, col 3
        one.data_mut()[16 + 2 * 4 + 3] = 8.0;
        let planes = proj.forward(&b, tape.constant(one)).unwrap();
        let value = planes.value();
        for (i, &v) in value.data()[..16].iter().enumerate() {
            let want = if i == 2 * 4 + 3 { 2.0 } else { 0.0 };
            assert_eq!(v, want);
        }
    }

    #[test]
    fn bicubic_preserves_constants_and_nodes() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full([3, 2, 4, 4], 0.7));
        let y = bicubic_resize(x, 16).unwrap();
        assert_eq!(y.shape(), vec![3, 2, 16, 16]);
        assert!(y.value().data().iter().all(|v| (v - 0.7).abs() < 1e-12));
        let m = bicubic_matrix(5, 9);
        // Corner alignment: every other output row hits an input node.
        for o in (0..9).step_by(2) {
            for i in 0..5 {
                let want = if i == o / 2 { 1.0 } else { 0.0 };
                assert!((m.data()[o * 5 + i] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn learned_upsampler_is_identity_free_at_k0_and_residual_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = TriPlaneConfig {
            channels: 2,
            upsample_log2: 0,
            ..TriPlaneConfig::default()
        };
        let mut store = ParamStore::new();
        let up = Upsampler::new(&mut store, "u", &cfg, &mut rng);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let x = tape.constant(Tensor::randn([3, 2, 4, 4], 1.0, &mut rng));
        assert_eq!(up.forward(&b, x).unwrap().value(), x.value());

        let cfg = TriPlaneConfig {
            channels: 2,
            upsample_log2: 1,
            ..TriPlaneConfig::default()
        };
        let mut store = ParamStore::new();
        let up = Upsampler::new(&mut store, "u", &cfg, &mut rng);
        let b = store.bind(&tape);
        let y = up.forward(&b, x).unwrap();
        let nearest = x.upsample_nearest2x().unwrap();
        assert!(y.value().max_abs_diff(&nearest.value()) < 1e-15);
    }

    #[test]
    fn factor_must_be_power_of_two() {
        assert_eq!(upsample_log2(8).unwrap(), 3);
        assert_eq!(upsample_log2(1).unwrap(), 0);
        assert!(upsample_log2(6).is_err());
        assert!(upsample_log2(0).is_err());
    }
}
