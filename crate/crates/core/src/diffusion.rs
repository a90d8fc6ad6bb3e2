//! Pixel-space conditional diffusion: noise schedule, the ε-prediction
//! U-net, its training loss and guided DDIM sampling.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::Config;
use crate::nn::{Bound, Conv, Init, Linear, ParamId, ParamStore};
use crate::tensor::{read_checkpoint, write_checkpoint, Tape, Tensor, Var};
use crate::triplane::SelfAttention;

/// Linear β schedule. Timesteps are 1-based; `alpha_bar(0)` is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule", "need at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid("schedule", "need 0 < beta_start <= beta_end < 1"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                beta_start + f * (beta_end - beta_start)
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn snr(&self, t: usize) -> f64 {
        let a = self.alpha_bar(t);
        a / (1.0 - a)
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(
                "diffusion",
                format!("timestep {t} outside [1, {}]", self.steps()),
            ));
        }
        Ok(())
    }

    /// `n` evenly spaced timesteps from `T` down to about `T/n`.
    pub fn sampling_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let big_t = self.steps();
        if n == 0 || n > big_t {
            return Err(Error::invalid("ddim", format!("n_steps must be in [1, {big_t}], got {n}")));
        }
        Ok((1..=n).rev().map(|k| (k * big_t).div_ceil(n)).collect())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }
}

/// `√ᾱ_t · x0 + √(1−ᾱ_t) · ε`.
pub fn add_noise(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::shape("add_noise", &[x0.shape(), eps.shape()]));
    }
    let a = schedule.alpha_bar(t);
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| sa * x + sb * e).collect();
    Tensor::new(x0.shape(), data)
}

/// Clean-image estimate from `x_t` and a noise prediction.
pub fn predict_x0(x_t: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check(t)?;
    let a = schedule.alpha_bar(t);
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    let data = x_t.data().iter().zip(eps.data()).map(|(x, e)| (x - sb * e) / sa).collect();
    Tensor::new(x_t.shape(), data)
}

/// Conditioning for one image: the rendered feature map `[C_f, H, W]` and
/// the input view `[3, H, W]` the global embedding is computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub feature: Tensor,
    pub image: Tensor,
}

/// Anything that predicts the noise in `x_t` (no gradients).
pub trait EpsPredictor {
    fn predict_eps(&self, x_t: &Tensor, t: usize, cond: &Condition, dropped: bool) -> Result<Tensor>;

    /// Unconditional and conditional predictions.
    fn predict_pair(&self, x_t: &Tensor, t: usize, cond: &Condition) -> Result<(Tensor, Tensor)> {
        Ok((self.predict_eps(x_t, t, cond, true)?, self.predict_eps(x_t, t, cond, false)?))
    }
}

/// `ε_u + w·(ε_c − ε_u)`. At `w = 1` this returns `ε_c` itself.
pub fn guide(uncond: &Tensor, cond: &Tensor, w: f64) -> Tensor {
    if w == 1.0 {
        return cond.clone();
    }
    let data = uncond.data().iter().zip(cond.data()).map(|(u, c)| u + w * (c - u)).collect();
    Tensor::from_parts(cond.shape().to_vec(), data)
}

fn guided_eps<M: EpsPredictor + ?Sized>(model: &M, x: &Tensor, t: usize, cond: &Condition, w: f64) -> Result<Tensor> {
    if w == 1.0 {
        model.predict_eps(x, t, cond, false)
    } else if w == 0.0 {
        model.predict_eps(x, t, cond, true)
    } else {
        let (u, c) = model.predict_pair(x, t, cond)?;
        Ok(guide(&u, &c, w))
    }
}

/// Deterministic DDIM (η = 0) from a given `x_T`, without the final clamp.
pub fn ddim_from<M: EpsPredictor + ?Sized>(
    model: &M,
    x_big_t: Tensor,
    cond: &Condition,
    schedule: &NoiseSchedule,
    n_steps: usize,
    guidance_w: f64,
) -> Result<Tensor> {
    if !(guidance_w >= 0.0) {
        return Err(Error::invalid("ddim", "guidance weight must be nonnegative"));
    }
    let ts = schedule.sampling_timesteps(n_steps)?;
    let mut x = x_big_t;
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        let eps = guided_eps(model, &x, t, cond, guidance_w)?;
        let x0 = predict_x0(&x, t, &eps, schedule)?;
        let a = schedule.alpha_bar(t_prev);
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        let data = x0.data().iter().zip(eps.data()).map(|(x0, e)| sa * x0 + sb * e).collect();
        x = Tensor::from_parts(x0.shape().to_vec(), data);
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("DDIM state at t = {t}")));
        }
    }
    Ok(x)
}

/// Guided DDIM sample of a `[3, H, W]` image, clamped to `[0, 1]`.
pub fn ddim_sample<M: EpsPredictor + ?Sized>(
    model: &M,
    cond: &Condition,
    schedule: &NoiseSchedule,
    n_steps: usize,
    guidance_w: f64,
    seed: u64,
) -> Result<Tensor> {
    let s = cond.image.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_big_t = Tensor::randn([3, s[1], s[2]], 1.0, &mut rng);
    Ok(ddim_from(model, x_big_t, cond, schedule, n_steps, guidance_w)?.map(|v| v.clamp(0.0, 1.0)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    /// Channels at full resolution; doubled at each downsampling stage.
    pub base_channels: usize,
    pub feature_channels: usize,
    pub embed_dim: usize,
    pub time_dim: usize,
    pub p_uncond: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_channels: 16,
            feature_channels: 16,
            embed_dim: 32,
            time_dim: 32,
            p_uncond: 0.1,
        }
    }
}

impl DenoiserConfig {
    pub fn from_config(cfg: &mut Config, feature_channels: usize) -> Result<Self> {
        let d = DenoiserConfig::default();
        let p_uncond: f64 = cfg.resolve("p_uncond", d.p_uncond)?;
        if !(0.0..=1.0).contains(&p_uncond) {
            return Err(Error::invalid("config", "p_uncond must lie in [0, 1]"));
        }
        let time_dim = cfg.resolve("time_dim", d.time_dim)?;
        if time_dim % 2 != 0 {
            return Err(Error::invalid("config", "time_dim must be even"));
        }
        Ok(DenoiserConfig {
            base_channels: cfg.resolve("unet_channels", d.base_channels)?,
            feature_channels,
            embed_dim: cfg.resolve("embed_dim", d.embed_dim)?,
            time_dim,
            p_uncond,
        })
    }
}

/// Sinusoidal embedding of each timestep, `[n, dim]`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push((t as f64 * freq).cos());
        }
    }
    Tensor::from_parts(vec![ts.len(), dim], out)
}

/// Conv residual block with additive time and affine embedding modulation.
#[derive(Clone, Debug)]
struct ResBlock {
    conv_a: Conv,
    conv_b: Conv,
    time: Linear,
    film: Linear,
    channels: usize,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, c: usize, time_dim: usize, embed_dim: usize, rng: &mut R) -> Self {
        ResBlock {
            conv_a: Conv::new(store, &format!("{prefix}.conv_a"), c, c, 3, Init::Scaled(1.0), rng),
            conv_b: Conv::new(store, &format!("{prefix}.conv_b"), c, c, 3, Init::Scaled(1.0), rng),
            time: Linear::new(store, &format!("{prefix}.time"), time_dim, c, true, Init::Scaled(1.0), rng),
            film: Linear::new(store, &format!("{prefix}.film"), embed_dim, 2 * c, true, Init::Zeros, rng),
            channels: c,
        }
    }

    /// `x: [n, c, h, w]`, `temb: [n, time_dim]`, `emb: [n, embed_dim]`.
    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, temb: Var<'t>, emb: Var<'t>) -> Result<Var<'t>> {
        let (n, c) = (x.shape()[0], self.channels);
        let h = self.conv_a.forward(p, x.silu())?;
        let h = h.add(self.time.forward(p, temb)?.reshape([n, c, 1, 1])?)?;
        let film = self.film.forward(p, emb)?;
        let scale = film.narrow(1, 0, c)?.reshape([n, c, 1, 1])?;
        let shift = film.narrow(1, c, c)?.reshape([n, c, 1, 1])?;
        let h = h.add(h.mul(scale)?)?.add(shift)?;
        x.add(self.conv_b.forward(p, h.silu())?)
    }
}

/// Pooled-conv global embedding of an input view.
#[derive(Clone, Debug)]
struct ImageEmbedder {
    conv_a: Conv,
    conv_b: Conv,
    proj: Linear,
}

impl ImageEmbedder {
    fn forward<'t>(&self, p: &Bound<'t>, images: Var<'t>) -> Result<Var<'t>> {
        let h = self.conv_a.forward(p, images)?.silu().avg_pool2x()?;
        let h = self.conv_b.forward(p, h)?.silu();
        let s = h.shape();
        let pooled = h.reshape([s[0], s[1], s[2] * s[3]])?.mean_axis(2)?;
        self.proj.forward(p, pooled)
    }
}

/// Small U-net ε-predictor over `concat(x_t, feature)`.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub store: ParamStore,
    embedder: ImageEmbedder,
    null_feature: ParamId,
    null_embedding: ParamId,
    time_a: Linear,
    time_b: Linear,
    conv_in: Conv,
    enc0: ResBlock,
    down1: Conv,
    enc1: ResBlock,
    down2: Conv,
    mid: ResBlock,
    attention: SelfAttention,
    up1: Conv,
    dec1: ResBlock,
    up0: Conv,
    dec0: ResBlock,
    conv_out: Conv,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let (c0, c1, c2) = (cfg.base_channels, 2 * cfg.base_channels, 4 * cfg.base_channels);
        let (td, ed) = (cfg.time_dim, cfg.embed_dim);
        let embedder = ImageEmbedder {
            conv_a: Conv::new(s, "embed.conv_a", 3, c0, 3, Init::Scaled(1.0), rng),
            conv_b: Conv::new(s, "embed.conv_b", c0, ed, 3, Init::Scaled(1.0), rng),
            proj: Linear::new(s, "embed.proj", ed, ed, true, Init::Scaled(1.0), rng),
        };
        let null_feature = s.add("null.feature", Tensor::zeros([1, cfg.feature_channels, 1, 1]));
        let null_embedding = s.add("null.embedding", Tensor::zeros([1, ed]));
        let time_a = Linear::new(s, "time.a", td, td, true, Init::Scaled(1.0), rng);
        let time_b = Linear::new(s, "time.b", td, td, true, Init::Scaled(1.0), rng);
        let conv_in = Conv::new(s, "conv_in", 3 + cfg.feature_channels, c0, 3, Init::Scaled(1.0), rng);
        let enc0 = ResBlock::new(s, "enc0", c0, td, ed, rng);
        let down1 = Conv::new(s, "down1", c0, c1, 3, Init::Scaled(1.0), rng);
        let enc1 = ResBlock::new(s, "enc1", c1, td, ed, rng);
        let down2 = Conv::new(s, "down2", c1, c2, 3, Init::Scaled(1.0), rng);
        let mid = ResBlock::new(s, "mid", c2, td, ed, rng);
        let attention = SelfAttention::new(s, "mid.attention", c2, 0, rng);
        let up1 = Conv::new(s, "up1", c2 + c1, c1, 3, Init::Scaled(1.0), rng);
        let dec1 = ResBlock::new(s, "dec1", c1, td, ed, rng);
        let up0 = Conv::new(s, "up0", c1 + c0, c0, 3, Init::Scaled(1.0), rng);
        let dec0 = ResBlock::new(s, "dec0", c0, td, ed, rng);
        let conv_out = Conv::new(s, "conv_out", c0, 3, 3, Init::Zeros, rng);
        Denoiser {
            cfg,
            store,
            embedder,
            null_feature,
            null_embedding,
            time_a,
            time_b,
            conv_in,
            enc0,
            down1,
            enc1,
            down2,
            mid,
            attention,
            up1,
            dec1,
            up0,
            dec0,
            conv_out,
        }
    }

    /// Batched ε̂ for `x_t: [n, 3, H, W]`, `features: [n, C_f, H, W]` and
    /// `images: [n, 3, H, W]`. Dropped items use the learned null tokens.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x_t: Var<'t>,
        ts: &[usize],
        features: Var<'t>,
        images: Var<'t>,
        dropped: &[bool],
    ) -> Result<Var<'t>> {
        let s = x_t.shape();
        let fs = features.shape();
        if s.len() != 4 || s[1] != 3 || s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(Error::shape("denoiser", &[&s]));
        }
        let n = s[0];
        if fs != [n, self.cfg.feature_channels, s[2], s[3]] || images.shape() != s || ts.len() != n || dropped.len() != n {
            return Err(Error::shape("denoiser", &[&s, &fs, &images.shape()]));
        }
        let tape = x_t.tape();
        let keep = Tensor::from_fn([n, 1, 1, 1], |i| if dropped[i] { 0.0 } else { 1.0 });
        let drop = keep.map(|k| 1.0 - k);
        let (keep, drop) = (tape.constant(keep), tape.constant(drop));
        let features = features.mul(keep)?.add(p.get(self.null_feature).mul(drop)?)?;
        let emb = self.embedder.forward(p, images)?;
        let keep2 = keep.reshape([n, 1])?;
        let drop2 = drop.reshape([n, 1])?;
        let emb = emb.mul(keep2)?.add(p.get(self.null_embedding).mul(drop2)?)?;

        let temb = tape.constant(timestep_embedding(ts, self.cfg.time_dim));
        let temb = self.time_b.forward(p, self.time_a.forward(p, temb)?.silu())?;

        let h0 = self.conv_in.forward(p, Var::concat(&[x_t, features], 1)?)?;
        let h0 = self.enc0.forward(p, h0, temb, emb)?;
        let h1 = self.down1.forward(p, h0.avg_pool2x()?)?;
        let h1 = self.enc1.forward(p, h1, temb, emb)?;
        let h2 = self.down2.forward(p, h1.avg_pool2x()?)?;
        let h2 = self.mid.forward(p, h2, temb, emb)?;
        let h2 = self.attention.forward(p, h2)?;
        let u1 = self.up1.forward(p, Var::concat(&[h2.upsample_nearest2x()?, h1], 1)?)?;
        let u1 = self.dec1.forward(p, u1, temb, emb)?;
        let u0 = self.up0.forward(p, Var::concat(&[u1.upsample_nearest2x()?, h0], 1)?)?;
        let u0 = self.dec0.forward(p, u0, temb, emb)?;
        self.conv_out.forward(p, u0.silu())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_checkpoint(std::io::BufWriter::new(file), &self.store.named_tensors())
    }

    pub fn load(cfg: DenoiserConfig, path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let tensors = read_checkpoint(std::io::BufReader::new(file))?;
        let mut model = Denoiser::new(cfg, 0);
        model.store.load_named(&tensors)?;
        Ok(model)
    }

    fn predict_batch(&self, x_t: &Tensor, ts: &[usize], cond: &Condition, dropped: &[bool]) -> Result<Tensor> {
        let n = dropped.len();
        let tape = Tape::no_grad();
        let p = self.store.bind(&tape);
        let stack = |t: &Tensor| stack_images(&tape, std::iter::repeat_n(t, n));
        let out = self.forward(&p, stack(x_t)?, ts, stack(&cond.feature)?, stack(&cond.image)?, dropped)?;
        let value = (*out.value()).clone();
        Ok(value)
    }
}

impl EpsPredictor for Denoiser {
    fn predict_eps(&self, x_t: &Tensor, t: usize, cond: &Condition, dropped: bool) -> Result<Tensor> {
        let out = self.predict_batch(x_t, &[t], cond, &[dropped])?;
        out.reshaped(x_t.shape())
    }

    fn predict_pair(&self, x_t: &Tensor, t: usize, cond: &Condition) -> Result<(Tensor, Tensor)> {
        let out = self.predict_batch(x_t, &[t, t], cond, &[true, false])?;
        let half = out.numel() / 2;
        let data = out.into_data();
        Ok((
            Tensor::new(x_t.shape(), data[..half].to_vec())?,
            Tensor::new(x_t.shape(), data[half..].to_vec())?,
        ))
    }
}

/// One training example: clean target and its conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionExample {
    pub target: Tensor,
    pub cond: Condition,
}

/// Draws `t`, `ε` and the drop flags for a batch and returns
/// `(x_t, ts, ε, dropped)` with `x_t` stacked as `[n, 3, H, W]`.
pub fn noise_batch<R: Rng + ?Sized>(
    targets: &[&Tensor],
    schedule: &NoiseSchedule,
    p_uncond: f64,
    rng: &mut R,
) -> Result<(Tensor, Vec<usize>, Tensor, Vec<bool>)> {
    let mut xs = Vec::new();
    let mut es = Vec::new();
    let mut ts = Vec::new();
    let mut dropped = Vec::new();
    for x0 in targets {
        let t = rng.gen_range(1..=schedule.steps());
        let eps = Tensor::from_fn(x0.shape(), |_| rng.sample(StandardNormal));
        xs.extend_from_slice(add_noise(x0, t, &eps, schedule)?.data());
        es.extend_from_slice(eps.data());
        ts.push(t);
        dropped.push(rng.gen_bool(p_uncond));
    }
    let mut shape = vec![targets.len()];
    shape.extend_from_slice(targets[0].shape());
    Ok((Tensor::new(shape.clone(), xs)?, ts, Tensor::new(shape, es)?, dropped))
}

/// Stacks `[c, h, w]` tensors into a constant `[n, c, h, w]`.
pub fn stack_images<'t, 'a>(tape: &'t Tape, items: impl IntoIterator<Item = &'a Tensor>) -> Result<Var<'t>> {
    let parts = items
        .into_iter()
        .map(|t| {
            let s = t.shape();
            if s.len() != 3 {
                return Err(Error::shape("stack_images", &[s]));
            }
            Ok(tape.constant(t.clone().reshaped([1, s[0], s[1], s[2]])?))
        })
        .collect::<Result<Vec<_>>>()?;
    Var::concat(&parts, 0)
}

/// Mean squared error between the true noise and `predict(x_t, ts, dropped)`.
pub fn diffusion_loss_with<'t, R, F>(
    tape: &'t Tape,
    targets: &[&Tensor],
    schedule: &NoiseSchedule,
    p_uncond: f64,
    rng: &mut R,
    predict: F,
) -> Result<Var<'t>>
where
    R: Rng + ?Sized,
    F: FnOnce(Var<'t>, &[usize], &[bool], &Tensor) -> Result<Var<'t>>,
{
    if targets.is_empty() {
        return Err(Error::invalid("diffusion_loss", "empty batch"));
    }
    let (x_t, ts, eps, dropped) = noise_batch(targets, schedule, p_uncond, rng)?;
    let x_t = tape.constant(x_t);
    let pred = predict(x_t, &ts, &dropped, &eps)?;
    let eps = tape.constant(eps);
    Ok(pred.sub(eps)?.square().mean())
}

/// Diffusion training loss of `model` on a batch of examples.
pub fn diffusion_loss<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    p: &Bound<'t>,
    model: &Denoiser,
    batch: &[&DiffusionExample],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Var<'t>> {
    let features = stack_images(tape, batch.iter().map(|ex| &ex.cond.feature))?;
    let images = stack_images(tape, batch.iter().map(|ex| &ex.cond.image))?;
    let targets: Vec<&Tensor> = batch.iter().map(|ex| &ex.target).collect();
    diffusion_loss_with(tape, &targets, schedule, model.cfg.p_uncond, rng, |x_t, ts, dropped, _| {
        model.forward(p, x_t, ts, features, images, dropped)
    })
}
