//! Self-checks shared by the command line and the test suites: the
//! gradient suite and the rendering and DDIM oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nalgebra::Vector3;

use crate::camera::{CameraPose, Intrinsics, Ray};
use crate::diffusion::{
    add_noise, ddim_from, ddim_sample, diffusion_loss, predict_x0, Condition, Denoiser, DenoiserConfig, DiffusionExample,
    EpsPredictor, NoiseSchedule,
};
use crate::error::Result;
use crate::losses::{recon_loss, LossConfig};
use crate::model::{ReconConfig, Reconstructor};
use crate::nn::ParamStore;
use crate::renderer::{composite, march_rays, render, FieldSample, RadianceField, RenderConfig};
use crate::tensor::{grad_check, GradCheckConfig, GradCheckReport, Tape, Tensor, Var};
use crate::triplane::{AttentionPlacement, TriPlaneConfig, UpsampleMode};

/// Verdict of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Largest error seen, in the check's own metric.
    pub max_error: f64,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_error
        )
    }
}

/// Relative tolerance of single-op and module checks.
pub const GRAD_TOL: f64 = 1e-4;
/// Relative tolerance of the full image-to-loss render path.
pub const RENDER_PATH_TOL: f64 = 1e-3;

type GradFn = Box<dyn for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>>;

struct GradCase {
    name: String,
    input: Tensor,
    f: GradFn,
    tol: f64,
    max_coords: Option<usize>,
}

fn case(name: &str, input: Tensor, f: GradFn) -> GradCase {
    GradCase {
        name: name.into(),
        input,
        f,
        tol: GRAD_TOL,
        max_coords: None,
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// One instance of every differentiable primitive, drawn from `seed`.
fn primitive_cases(seed: u64) -> Vec<GradCase> {
    let k = |i: u64| seed.wrapping_mul(1000).wrapping_add(i);
    let c = move |shape: &[usize], i: u64| randn(shape, k(i));
    let pos = move |shape: &[usize], i: u64| Tensor::uniform(shape.to_vec(), 0.5, 2.0, &mut ChaCha8Rng::seed_from_u64(k(i)));
    let inside = move |shape: &[usize], i: u64, hi: f64| Tensor::uniform(shape.to_vec(), 0.0, hi, &mut ChaCha8Rng::seed_from_u64(k(i)));
    let (b1, b2, w1) = (c(&[4], 1), c(&[3, 1], 2), c(&[3, 4], 3));
    let (dv, mb, mr) = (pos(&[2, 3], 4), c(&[4, 2], 5), c(&[3, 4], 6));
    let (sw, rw, pw) = (c(&[3, 5], 7), c(&[3, 4], 8), c(&[4, 2, 3], 9));
    let (cw, cb, cx) = (c(&[3, 2, 3, 3], 10).map(|v| 0.5 * v), c(&[3], 11), c(&[2, 2, 5, 4], 12));
    let cx_bias = cx.clone();
    let (c1x, uw) = (c(&[3, 4, 4], 13), c(&[2, 6, 6], 14));
    let (bxy, bimg) = (inside(&[6, 2], 15, 3.0), c(&[2, 5, 5], 16));
    let (txyz, tvol) = (inside(&[5, 3], 17, 2.0), c(&[2, 4, 4, 4], 18));
    let (aq, ak, av) = (c(&[4, 3], 19), c(&[5, 3], 20), c(&[5, 2], 21));
    let cat = c(&[2, 2], 22);
    vec![
        case("add", c(&[3, 4], 100), Box::new(move |t, x| Ok(x.add(t.constant(b1.clone()))?.square().sum()))),
        case("sub", c(&[3, 4], 101), Box::new(move |t, x| Ok(t.constant(b2.clone()).sub(x)?.square().sum()))),
        case("mul", c(&[4], 102), Box::new(move |t, x| Ok(t.constant(w1.clone()).mul(x)?.sin().sum()))),
        case(
            "div",
            c(&[2, 3], 103),
            Box::new(move |t, x| {
                let b = t.constant(dv.clone());
                Ok(x.div(b)?.add(b.div(x.square().add_scalar(1.0))?)?.sum())
            }),
        ),
        case("scale+add_scalar+neg", c(&[5], 104), Box::new(|_, x| Ok(x.scale(1.5).add_scalar(0.3).neg().square().sum()))),
        case("relu", c(&[10], 105), Box::new(|_, x| Ok(x.relu().square().sum()))),
        case("sigmoid", c(&[10], 106), Box::new(|_, x| Ok(x.sigmoid().sum()))),
        case("silu", c(&[10], 107), Box::new(|_, x| Ok(x.silu().sum()))),
        case("softplus", c(&[10], 108), Box::new(|_, x| Ok(x.scale(3.0).softplus().sum()))),
        case("exp", c(&[10], 109), Box::new(|_, x| Ok(x.exp().sum()))),
        case("log", c(&[10], 110), Box::new(|_, x| Ok(x.square().add_scalar(0.5).log()?.sum()))),
        case("sqrt", c(&[10], 111), Box::new(|_, x| Ok(x.square().add_scalar(0.5).sqrt()?.sum()))),
        case("sin", c(&[10], 112), Box::new(|_, x| Ok(x.sin().sum()))),
        case("abs", c(&[10], 113), Box::new(|_, x| Ok(x.abs().sum()))),
        case("matmul", c(&[3, 4], 114), Box::new(move |t, x| Ok(x.matmul(t.constant(mb.clone()))?.square().sum()))),
        case("matmul-rhs", c(&[4, 2], 115), Box::new(move |t, x| Ok(t.constant(mr.clone()).matmul(x)?.sin().sum()))),
        case("softmax", c(&[3, 5], 116), Box::new(move |t, x| Ok(x.softmax()?.mul(t.constant(sw.clone()))?.sum()))),
        case("sum+mean", c(&[2, 3], 117), Box::new(|_, x| x.square().sum().add(x.sin().mean()))),
        case("sum_axis", c(&[2, 3, 4], 118), Box::new(|_, x| Ok(x.sum_axis(1)?.square().sum()))),
        case("mean_axis", c(&[2, 3, 4], 119), Box::new(|_, x| Ok(x.mean_axis(2)?.square().mean()))),
        case(
            "concat",
            c(&[2, 3], 120),
            Box::new(move |t, x| Ok(Var::concat(&[x, t.constant(cat.clone()), x], 1)?.square().sum())),
        ),
        case("narrow", c(&[4, 5], 121), Box::new(|_, x| Ok(x.narrow(1, 1, 3)?.square().sum()))),
        case("reshape", c(&[2, 6], 122), Box::new(move |t, x| Ok(x.reshape([3, 4])?.mul(t.constant(rw.clone()))?.sum()))),
        case("permute", c(&[2, 3, 4], 123), Box::new(move |t, x| Ok(x.permute(&[2, 0, 1])?.mul(t.constant(pw.clone()))?.sum()))),
        case("transpose", c(&[3, 2], 124), Box::new(|_, x| Ok(x.t()?.sin().sum()))),
        case(
            "conv2d-input",
            c(&[2, 5, 5], 125),
            Box::new({
                let (cw, cb) = (cw.clone(), cb.clone());
                move |t, x| Ok(x.conv2d(t.constant(cw.clone()), Some(t.constant(cb.clone())))?.square().sum())
            }),
        ),
        case("conv2d-weight", cw.clone(), Box::new(move |t, w| Ok(t.constant(cx.clone()).conv2d(w, None)?.sin().sum()))),
        case(
            "conv2d-bias",
            cb,
            Box::new(move |t, b| Ok(t.constant(cx_bias.clone()).conv2d(t.constant(cw.clone()), Some(b))?.square().sum())),
        ),
        case(
            "conv2d-1x1",
            c(&[4, 3, 1, 1], 126),
            Box::new(move |t, w| Ok(t.constant(c1x.clone()).conv2d(w, None)?.square().sum())),
        ),
        case("upsample_nearest2x", c(&[2, 3, 3], 127), Box::new(move |t, x| Ok(x.upsample_nearest2x()?.mul(t.constant(uw.clone()))?.sum()))),
        case("avg_pool2x", c(&[2, 4, 6], 128), Box::new(|_, x| Ok(x.avg_pool2x()?.square().sum()))),
        case(
            "bilinear-image",
            c(&[2, 4, 5], 129),
            Box::new({
                let bxy = bxy.clone();
                move |t, img| Ok(img.bilinear_sample_2d(t.constant(bxy.clone()))?.square().sum())
            }),
        ),
        case(
            "bilinear-coords",
            c(&[6, 2], 130),
            Box::new(move |t, xy| Ok(t.constant(bimg.clone()).bilinear_sample_2d(xy.scale(0.6).add_scalar(2.0))?.sum())),
        ),
        case(
            "trilinear-volume",
            c(&[2, 3, 4, 5], 131),
            Box::new(move |t, v| Ok(v.trilinear_sample_3d(t.constant(txyz.clone()))?.square().sum())),
        ),
        case(
            "trilinear-coords",
            c(&[5, 3], 132),
            Box::new(move |t, xyz| Ok(t.constant(tvol.clone()).trilinear_sample_3d(xyz.scale(0.5).add_scalar(1.5))?.sum())),
        ),
        case(
            "attention-q",
            aq.clone(),
            Box::new({
                let (ak, av) = (ak.clone(), av.clone());
                move |t, q| Ok(q.attention(t.constant(ak.clone()), t.constant(av.clone()))?.square().sum())
            }),
        ),
        case(
            "attention-k",
            ak.clone(),
            Box::new({
                let (aq, av) = (aq.clone(), av.clone());
                move |t, k| Ok(t.constant(aq.clone()).attention(k, t.constant(av.clone()))?.sin().sum())
            }),
        ),
        case(
            "attention-v",
            av,
            Box::new(move |t, v| Ok(t.constant(aq.clone()).attention(t.constant(ak.clone()), v)?.square().sum())),
        ),
    ]
}

/// Adds noise to every parameter so that zero-initialised layers pass
/// gradient to everything upstream.
fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.2 * rng.gen_range(-1.0..1.0));
    }
}

pub fn tiny_recon_config() -> ReconConfig {
    ReconConfig {
        encoder_hidden: 4,
        channels: 4,
        volume_res: 4,
        volume_embedding: true,
        triplane: TriPlaneConfig {
            channels: 4,
            upsample_log2: 1,
            mode: UpsampleMode::Learned,
            attention: AttentionPlacement::FinalBlock,
            attention_kv_pool: 1,
        },
        mlp_width: 8,
        feature_channels: 2,
        density_gain: 2.0,
        render: RenderConfig {
            n_samples: 6,
            ..RenderConfig::default()
        },
    }
}

fn tiny_poses() -> [CameraPose; 2] {
    let k = Intrinsics::centered(8.0, 8, 8);
    [
        CameraPose::orbit(k, 0.3, 0.2, 1.3).unwrap(),
        CameraPose::orbit(k, 1.4, -0.1, 1.3).unwrap(),
    ]
}

/// image → lift → aggregate → tri-plane → render → loss, as a function of
/// the input images, of each parameter tensor, and the feature head.
fn render_path_cases(seed: u64) -> Vec<GradCase> {
    let mut model = Reconstructor::new(tiny_recon_config(), seed);
    jitter(&mut model.store, seed);
    let model = std::rc::Rc::new(model);
    let poses = tiny_poses();
    let images = Tensor::uniform([2, 3, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 7));
    let target = Tensor::uniform([3, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 8));
    let feat_w = randn(&[2, 8, 8], seed + 9);
    let mut cases = Vec::new();
    {
        let (model, poses, target, feat_w) = (model.clone(), poses.clone(), target.clone(), feat_w.clone());
        let mut c = case(
            "render-path-images",
            images.clone(),
            Box::new(move |t, imgs| {
                let p = model.store.bind(t);
                full_loss(&model, &p, imgs, &poses, &target, &feat_w)
            }),
        );
        c.tol = RENDER_PATH_TOL;
        c.max_coords = Some(24);
        cases.push(c);
    }
    for id in model.store.ids() {
        let (model, poses, target, feat_w, images) = (model.clone(), poses.clone(), target.clone(), feat_w.clone(), images.clone());
        let name = format!("render-path-param:{}", model.store.name(id));
        let mut c = case(
            &name,
            model.store.get(id).clone(),
            Box::new(move |t, x| {
                let mut p = model.store.bind(t);
                p.replace(id, x);
                full_loss(&model, &p, t.constant(images.clone()), &poses, &target, &feat_w)
            }),
        );
        c.tol = RENDER_PATH_TOL;
        c.max_coords = Some(3);
        cases.push(c);
    }
    cases
}

fn full_loss<'t>(
    model: &Reconstructor,
    p: &crate::nn::Bound<'t>,
    images: Var<'t>,
    poses: &[CameraPose],
    target: &Tensor,
    feat_w: &Tensor,
) -> Result<Var<'t>> {
    let tape = images.tape();
    let tri = model.reconstruct_images(p, images, poses)?;
    let out = render(tape, &model.field(p, tri), &poses[0], &model.cfg.render, true)?;
    let loss = recon_loss(out.image, tape.constant(target.clone()), &LossConfig::default())?;
    let feat = out.feature_map.expect("feature head requested");
    loss.add(feat.mul(tape.constant(feat_w.clone()))?.mean())
}

/// Compositing as a function of densities, colours and features.
fn composite_cases(seed: u64) -> Vec<GradCase> {
    let (r, s) = (3, 5);
    let deltas = Tensor::uniform([r, s], 0.05, 0.3, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    let sigma0 = Tensor::uniform([r * s, 1], 0.0, 4.0, &mut ChaCha8Rng::seed_from_u64(seed + 2));
    let color0 = Tensor::uniform([r * s, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 3));
    let feat0 = randn(&[r * s, 2], seed + 4);
    let w = randn(&[r, 3], seed + 5);
    let mk = |which: usize| -> GradFn {
        let (deltas, sigma0, color0, feat0, w) = (deltas.clone(), sigma0.clone(), color0.clone(), feat0.clone(), w.clone());
        Box::new(move |t, x| {
            let sigma = if which == 0 { x } else { t.constant(sigma0.clone()) };
            let color = if which == 1 { x } else { t.constant(color0.clone()) };
            let feature = if which == 2 { x } else { t.constant(feat0.clone()) };
            let sample = FieldSample {
                sigma,
                color,
                feature: Some(feature),
            };
            let out = composite(t, &sample, deltas.clone(), [1.0, 1.0, 1.0])?;
            let f = out.feature.expect("feature requested");
            out.color.mul(t.constant(w.clone()))?.sum().add(f.square().sum())?.add(out.weight_sum.sum())
        })
    };
    vec![
        case("composite-sigma", sigma0.clone(), mk(0)),
        case("composite-color", color0.clone(), mk(1)),
        case("composite-feature", feat0.clone(), mk(2)),
    ]
}

pub fn tiny_denoiser_config() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 2,
        feature_channels: 2,
        embed_dim: 4,
        time_dim: 4,
        p_uncond: 0.5,
    }
}

/// denoiser → diffusion_loss on a 3×8×8 batch, per parameter tensor.
fn diffusion_cases(seed: u64) -> Vec<GradCase> {
    let mut model = Denoiser::new(tiny_denoiser_config(), seed);
    jitter(&mut model.store, seed + 1);
    let model = std::rc::Rc::new(model);
    let schedule = std::rc::Rc::new(NoiseSchedule::linear(100, 1e-4, 0.02).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let batch: std::rc::Rc<Vec<DiffusionExample>> = std::rc::Rc::new(
        (0..2)
            .map(|_| DiffusionExample {
                target: Tensor::uniform([3, 8, 8], 0.0, 1.0, &mut rng),
                cond: Condition {
                    feature: Tensor::randn([2, 8, 8], 1.0, &mut rng),
                    image: Tensor::uniform([3, 8, 8], 0.0, 1.0, &mut rng),
                },
            })
            .collect(),
    );
    model
        .store
        .ids()
        .map(|id| {
            let (model, schedule, batch) = (model.clone(), schedule.clone(), batch.clone());
            let mut c = case(
                &format!("diffusion-loss-param:{}", model.store.name(id)),
                model.store.get(id).clone(),
                Box::new(move |t, x| {
                    let mut p = model.store.bind(t);
                    p.replace(id, x);
                    let refs: Vec<&DiffusionExample> = batch.iter().collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
                    diffusion_loss(t, &p, &model, &refs, &schedule, &mut rng)
                }),
            );
            c.max_coords = Some(4);
            c
        })
        .collect()
}

/// Runs every gradient check on each seed. Returns one outcome per case
/// name, failing if any seed fails or if every checked gradient of a case
/// was negligible on every seed.
pub fn gradient_suite(seeds: &[u64]) -> Result<Vec<CheckOutcome>> {
    let mut outcomes: Vec<CheckOutcome> = Vec::new();
    let mut largest: Vec<f64> = Vec::new();
    for &seed in seeds {
        let mut cases = primitive_cases(seed);
        cases.extend(composite_cases(seed));
        cases.extend(render_path_cases(seed));
        cases.extend(diffusion_cases(seed));
        for c in cases {
            let cfg = GradCheckConfig {
                tol: c.tol,
                max_coords: c.max_coords,
                seed,
                ..GradCheckConfig::default()
            };
            let report = grad_check(&c.f, &c.input, &cfg)?;
            let grad = report.coords.iter().map(|k| k.autodiff.abs()).fold(0.0, f64::max);
            let error = reported_error(&report);
            match outcomes.iter().position(|o| o.name == c.name) {
                Some(i) => {
                    outcomes[i].passed &= report.passed;
                    outcomes[i].max_error = outcomes[i].max_error.max(error);
                    largest[i] = largest[i].max(grad);
                }
                None => {
                    outcomes.push(CheckOutcome {
                        name: c.name,
                        passed: report.passed,
                        max_error: error,
                    });
                    largest.push(grad);
                }
            }
        }
    }
    for (o, g) in outcomes.iter_mut().zip(largest) {
        o.passed &= g > NONZERO_GRAD;
    }
    Ok(outcomes)
}

/// A case whose largest gradient stays under this is treated as vacuous.
/// It sits well above the checker's absolute floor.
const NONZERO_GRAD: f64 = 1e-6;

/// Relative error without the checker's absolute floor, over coordinates
/// whose gradient is large enough for the ratio to mean something.
fn reported_error(report: &GradCheckReport) -> f64 {
    report
        .coords
        .iter()
        .filter(|c| !c.kink && c.autodiff.abs().max(c.numeric.abs()) >= NONZERO_GRAD)
        .map(|c| (c.autodiff - c.numeric).abs() / c.autodiff.abs().max(c.numeric.abs()))
        .fold(0.0, f64::max)
}

/// Front-to-back compositing written as an explicit loop with a running
/// transmittance product.
pub fn composite_reference(sigma: &[f64], color: &[[f64; 3]], delta: &[f64], bg: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    let mut transmittance = 1.0;
    for i in 0..sigma.len() {
        let alpha = 1.0 - (-sigma[i] * delta[i]).exp();
        for c in 0..3 {
            out[c] += transmittance * alpha * color[i][c];
        }
        transmittance *= (-sigma[i] * delta[i]).exp();
    }
    for c in 0..3 {
        out[c] += transmittance * bg[c];
    }
    out
}

/// Smooth analytic density and colour over the unit cube.
struct AnalyticField;

impl AnalyticField {
    fn at(p: &[f64]) -> (f64, [f64; 3]) {
        let sigma = 8.0 * ((3.0 * p[0]).sin() + (2.0 * p[1]).cos() * p[2]).abs();
        let color = [0.5 + 0.5 * (4.0 * p[0]).sin(), 0.5 + 0.5 * (3.0 * p[1]).cos(), p[2] + 0.5];
        (sigma, color)
    }
}

impl<'t> RadianceField<'t> for AnalyticField {
    fn evaluate(&self, tape: &'t Tape, points: Tensor, _with_feature: bool) -> Result<FieldSample<'t>> {
        let n = points.shape()[0];
        let (mut sigma, mut color) = (Vec::with_capacity(n), Vec::with_capacity(3 * n));
        for p in points.data().chunks(3) {
            let (s, c) = Self::at(p);
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

/// Checks compositing against [`composite_reference`] on `configs` random
/// sample sets and `configs` rays marched through an analytic field, that
/// weight sums stay in `[0, 1]`, and the opaque and transparent limits.
pub fn rendering_oracle(seed: u64, configs: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut weights_ok = true;
    let bg = [1.0, 1.0, 1.0];
    let tape = Tape::no_grad();
    let run = |sigma: &[f64], color: &[[f64; 3]], delta: &[f64]| -> Result<(Vec<f64>, f64)> {
        let s = sigma.len();
        let sample = FieldSample {
            sigma: tape.constant(Tensor::new([s, 1], sigma.to_vec())?),
            color: tape.constant(Tensor::new([s, 3], color.iter().flatten().copied().collect())?),
            feature: None,
        };
        let out = composite(&tape, &sample, Tensor::new([1, s], delta.to_vec())?, bg)?;
        let c = out.color.value().data().to_vec();
        Ok((c, out.weight_sum.item()))
    };
    for _ in 0..configs {
        let s = rng.gen_range(1..=48);
        let sigma: Vec<f64> = (0..s).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..60.0) }).collect();
        let color: Vec<[f64; 3]> = (0..s).map(|_| std::array::from_fn(|_| rng.gen_range(0.0..1.0))).collect();
        let delta: Vec<f64> = (0..s).map(|_| rng.gen_range(0.0..0.1)).collect();
        let (got, wsum) = run(&sigma, &color, &delta)?;
        weights_ok &= (0.0..=1.0).contains(&wsum);
        let want = composite_reference(&sigma, &color, &delta, bg);
        worst = got.iter().zip(want).fold(worst, |m, (g, w)| m.max((g - w).abs()));
    }

    let cfg = RenderConfig {
        n_samples: 24,
        ..RenderConfig::default()
    };
    let rays: Vec<Ray> = (0..configs)
        .map(|_| {
            let dir = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let origin = dir.normalize() * 2.0;
            let aim = Vector3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6));
            Ray {
                origin,
                direction: (aim - origin).normalize(),
                t_near: 1e-3,
                t_far: 1e3,
            }
        })
        .collect();
    let ids: Vec<u64> = (0..rays.len() as u64).collect();
    let marched = march_rays(&tape, &AnalyticField, &rays, &ids, &cfg, false)?;
    let colors = marched.color.value();
    let sums = marched.weight_sum.value();
    for (r, ray) in rays.iter().enumerate() {
        weights_ok &= (0.0..=1.0).contains(&sums.data()[r]);
        let want = match ray.intersect_cube(0.5) {
            None => bg,
            Some((t0, t1)) => {
                let bin = (t1 - t0) / cfg.n_samples as f64;
                let (mut sigma, mut color) = (Vec::new(), Vec::new());
                for i in 0..cfg.n_samples {
                    let p = ray.at(t0 + (i as f64 + 0.5) * bin);
                    let (s, c) = AnalyticField::at(&[p.x.clamp(-0.5, 0.5), p.y.clamp(-0.5, 0.5), p.z.clamp(-0.5, 0.5)]);
                    sigma.push(s);
                    color.push(c);
                }
                composite_reference(&sigma, &color, &vec![bin; cfg.n_samples], bg)
            }
        };
        worst = (0..3).fold(worst, |m, c| m.max((colors.data()[3 * r + c] - want[c]).abs()));
    }

    let (opaque, opaque_w) = run(&[1e6, 3.0], &[[0.2, 0.4, 0.6], [1.0; 3]], &[0.1, 0.1])?;
    let (clear, clear_w) = run(&[0.0; 4], &[[0.3; 3]; 4], &[0.25; 4])?;
    let limits_exact = opaque == [0.2, 0.4, 0.6] && opaque_w == 1.0 && clear == bg && clear_w == 0.0;
    Ok(CheckOutcome {
        name: "rendering-oracle".into(),
        passed: worst < 1e-9 && weights_ok && limits_exact,
        max_error: worst,
    })
}

/// Denoiser stand-in that returns the noise used to build `x_T`.
pub struct OracleEps {
    pub eps: Tensor,
}

impl EpsPredictor for OracleEps {
    fn predict_eps(&self, _x_t: &Tensor, _t: usize, _cond: &Condition, _dropped: bool) -> Result<Tensor> {
        Ok(self.eps.clone())
    }
}

/// For `pairs` random `(x0, ε)`: exact inversion of `add_noise` at every
/// sampled `t`, and a one-step DDIM jump from `T` with the true noise.
pub fn ddim_inversion_oracle(seed: u64, pairs: usize, schedule: &NoiseSchedule) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut inversion: f64 = 0.0;
    let cond = Condition {
        feature: Tensor::zeros([1, 4, 4]),
        image: Tensor::zeros([3, 4, 4]),
    };
    for _ in 0..pairs {
        let x0 = Tensor::uniform([3, 4, 4], 0.0, 1.0, &mut rng);
        let eps = Tensor::randn([3, 4, 4], 1.0, &mut rng);
        let t = rng.gen_range(1..=schedule.steps());
        let back = predict_x0(&add_noise(&x0, t, &eps, schedule)?, t, &eps, schedule)?;
        inversion = inversion.max(back.max_abs_diff(&x0));
        let x_big_t = add_noise(&x0, schedule.steps(), &eps, schedule)?;
        let oracle = OracleEps { eps: eps.clone() };
        for w in [0.0, 1.0, 2.0] {
            let out = ddim_from(&oracle, x_big_t.clone(), &cond, schedule, 1, w)?;
            worst = worst.max(out.max_abs_diff(&x0));
        }
    }
    Ok(CheckOutcome {
        name: "ddim-inversion-oracle".into(),
        passed: worst < 1e-9 && inversion < 1e-12,
        max_error: worst.max(inversion),
    })
}

/// Projects points along random pixel rays back to the image and reports
/// the worst pixel error over `poses × pixels` round trips.
pub fn camera_roundtrip_oracle(seed: u64, poses: usize, pixels: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..poses {
        let k = Intrinsics::centered(rng.gen_range(20.0..80.0), 64, 48);
        let pose = CameraPose::orbit(
            k,
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            rng.gen_range(-1.4..1.4),
            rng.gen_range(1.0..4.0),
        )?;
        for _ in 0..pixels {
            let (u, v) = (rng.gen_range(0.0..64.0), rng.gen_range(0.0..48.0));
            let point = pose.pixel_to_ray(u, v).at(rng.gen_range(0.5..5.0));
            let (pu, pv) = pose.project(&point)?;
            worst = worst.max((pu - u).abs()).max((pv - v).abs());
        }
    }
    Ok(CheckOutcome {
        name: "camera-roundtrip-oracle".into(),
        passed: worst < 1e-9,
        max_error: worst,
    })
}

/// Every oracle at its acceptance size.
pub fn oracle_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        camera_roundtrip_oracle(seed, 50, 1000)?,
        rendering_oracle(seed, 100)?,
        ddim_inversion_oracle(seed, 20, &NoiseSchedule::default())?,
        guidance_identity_oracle(seed)?,
    ])
}

/// Stand-in whose conditional and unconditional predictions differ.
struct SplitEps;

impl EpsPredictor for SplitEps {
    fn predict_eps(&self, x_t: &Tensor, t: usize, _cond: &Condition, dropped: bool) -> Result<Tensor> {
        let shift = if dropped { 0.3 } else { -0.2 } * t as f64 / 1000.0;
        Ok(x_t.map(|v| 0.1 * v.sin() + shift))
    }
}

/// Routes every query to one branch of the wrapped model.
struct OneBranch<'a> {
    inner: &'a dyn EpsPredictor,
    dropped: bool,
}

impl EpsPredictor for OneBranch<'_> {
    fn predict_eps(&self, x_t: &Tensor, t: usize, cond: &Condition, _dropped: bool) -> Result<Tensor> {
        self.inner.predict_eps(x_t, t, cond, self.dropped)
    }
}

/// Guided sampling at `w = 1` must equal purely conditional sampling bit for
/// bit, and `w = 0` purely unconditional sampling.
pub fn guidance_identity_oracle(seed: u64) -> Result<CheckOutcome> {
    let schedule = NoiseSchedule::default();
    let cond = Condition {
        feature: Tensor::zeros([1, 4, 4]),
        image: Tensor::zeros([3, 4, 4]),
    };
    let mut worst: f64 = 0.0;
    for (w, dropped) in [(1.0, false), (0.0, true)] {
        let guided = ddim_sample(&SplitEps, &cond, &schedule, 50, w, seed)?;
        let branch = OneBranch {
            inner: &SplitEps,
            dropped,
        };
        let plain = ddim_sample(&branch, &cond, &schedule, 50, 2.5, seed)?;
        worst = worst.max(guided.max_abs_diff(&plain));
        if guided.data().iter().zip(plain.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            worst = worst.max(f64::MIN_POSITIVE);
        }
    }
    Ok(CheckOutcome {
        name: "guidance-identity-oracle".into(),
        passed: worst == 0.0,
        max_error: worst,
    })
}
