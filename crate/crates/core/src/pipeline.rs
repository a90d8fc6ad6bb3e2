//! Training loops and the two inference modes.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{interpolate_poses, CameraPose, InterpolationMode};
use crate::diffusion::{
    ddim_sample, diffusion_loss_with, predict_x0, stack_images, Condition, Denoiser, DiffusionExample, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::io::Config;
use crate::losses::{psnr, recon_loss, LossConfig, PerceptualMode};
use crate::model::{Reconstructor, View};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::renderer::{render_pixels, rows_to_image};
use crate::tensor::{write_checkpoint, Tape, Tensor};

/// All views of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneViews {
    pub id: u64,
    pub views: Vec<View>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetStrategy {
    Uniform,
    /// Target is the first input view with probability 0.8.
    Anchored,
}

pub const ANCHOR_PROBABILITY: f64 = 0.8;
pub const MAX_INPUT_VIEWS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub scene: u64,
    pub inputs: Vec<View>,
    pub target: View,
    /// Indices of the inputs and the target within the scene.
    pub input_ids: Vec<usize>,
    pub target_id: usize,
}

/// Draws 1–3 distinct input views and one target from a random scene.
/// `allowed` restricts which view indices may be drawn at all.
pub fn sample_training<R: Rng + ?Sized>(
    rng: &mut R,
    scenes: &[SceneViews],
    allowed: Option<&[usize]>,
    strategy: TargetStrategy,
) -> Result<TrainSample> {
    let scene = scenes
        .choose(rng)
        .ok_or_else(|| Error::invalid("train", "empty dataset"))?;
    let pool: Vec<usize> = match allowed {
        Some(ids) => ids.iter().copied().filter(|&i| i < scene.views.len()).collect(),
        None => (0..scene.views.len()).collect(),
    };
    if pool.is_empty() {
        return Err(Error::invalid("train", format!("scene {} has no usable views", scene.id)));
    }
    let count = rng.gen_range(1..=MAX_INPUT_VIEWS.min(pool.len()));
    let input_ids: Vec<usize> = pool.choose_multiple(rng, count).copied().collect();
    let target_id = match strategy {
        TargetStrategy::Anchored if rng.gen_bool(ANCHOR_PROBABILITY) => input_ids[0],
        _ => *pool.choose(rng).unwrap(),
    };
    Ok(TrainSample {
        scene: scene.id,
        inputs: input_ids.iter().map(|&i| scene.views[i].clone()).collect(),
        target: scene.views[target_id].clone(),
        input_ids,
        target_id,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub loss: LossConfig,
    /// Side of the square pixel patch rendered per step; 0 renders the whole image.
    pub patch: usize,
    pub strategy: TargetStrategy,
    /// Validate every this many steps; 0 disables validation.
    pub val_every: usize,
    /// Validation rounds without improvement before stopping; 0 never stops.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ReconTrainConfig {
    fn default() -> Self {
        ReconTrainConfig {
            steps: 3000,
            lr: 1e-3,
            loss: LossConfig::default(),
            patch: 16,
            strategy: TargetStrategy::Uniform,
            val_every: 250,
            patience: 4,
            seed: 0,
        }
    }
}

impl ReconTrainConfig {
    pub fn from_config(cfg: &mut Config) -> Result<Self> {
        let d = ReconTrainConfig::default();
        let strategy = match cfg.resolve("target_strategy", "uniform".to_string())?.as_str() {
            "uniform" => TargetStrategy::Uniform,
            "anchored" => TargetStrategy::Anchored,
            other => return Err(Error::invalid("config", format!("unknown target_strategy `{other}`"))),
        };
        let perceptual_mode = match cfg.resolve("perceptual", "pyramid".to_string())?.as_str() {
            "pyramid" => PerceptualMode::GradientPyramid,
            "off" => PerceptualMode::Off,
            other => return Err(Error::invalid("config", format!("unknown perceptual `{other}`"))),
        };
        let lambda_perc: f64 = cfg.resolve("lambda_perc", d.loss.lambda_perc)?;
        if lambda_perc < 0.0 {
            return Err(Error::invalid("config", "lambda_perc must be nonnegative"));
        }
        Ok(ReconTrainConfig {
            steps: cfg.resolve("recon_steps", d.steps)?,
            lr: cfg.resolve("recon_lr", d.lr)?,
            loss: LossConfig {
                lambda_perc,
                perceptual_mode,
            },
            patch: cfg.resolve("patch", d.patch)?,
            strategy,
            val_every: cfg.resolve("val_every", d.val_every)?,
            patience: cfg.resolve("patience", d.patience)?,
            seed: cfg.resolve("seed", d.seed)?,
        })
    }
}

/// One row of the loss curve. `psnr` is measured on the rendered pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps_run: usize,
    pub log: Vec<LogRow>,
    /// `(step, mean PSNR)` per validation round.
    pub validation: Vec<(usize, f64)>,
    pub stopped_early: bool,
}

/// Tab-separated `step loss psnr` lines with a header.
pub fn loss_log_text(rows: &[LogRow]) -> String {
    let mut s = String::from("step\tloss\tpsnr\n");
    for r in rows {
        writeln!(s, "{}\t{:.9e}\t{:.6}", r.step, r.loss, r.psnr).unwrap();
    }
    s
}

/// `(inputs, target)` pairs of one scene, one per target index.
pub fn view_pairs(scene: &SceneViews, inputs: &[usize], targets: &[usize]) -> Result<Vec<(Vec<View>, View)>> {
    let n = scene.views.len();
    if inputs.is_empty() {
        return Err(Error::invalid("view_pairs", "need at least one input view"));
    }
    if let Some(bad) = inputs.iter().chain(targets).find(|&&k| k >= n) {
        return Err(Error::invalid("view_pairs", format!("scene {} has {n} views, asked for view {bad}", scene.id)));
    }
    let input_views: Vec<View> = inputs.iter().map(|&k| scene.views[k].clone()).collect();
    Ok(targets.iter().map(|&k| (input_views.clone(), scene.views[k].clone())).collect())
}

/// Mean full-image PSNR over `(inputs, target)` pairs.
pub fn evaluate_psnr(model: &Reconstructor, pairs: &[(Vec<View>, View)]) -> Result<f64> {
    let mut total = 0.0;
    for (inputs, target) in pairs {
        let img = model.predict_image(inputs, &target.pose)?;
        total += psnr(&img, &target.image, 1.0)?;
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Top-left corner of a random `patch × patch` window.
fn patch_pixels<R: Rng + ?Sized>(rng: &mut R, w: usize, h: usize, patch: usize) -> (usize, usize, usize, usize) {
    if patch == 0 || patch >= w.min(h) {
        return (0, 0, w, h);
    }
    (rng.gen_range(0..=w - patch), rng.gen_range(0..=h - patch), patch, patch)
}

/// Where to write a dump of the batch that produced a non-finite loss.
#[derive(Clone, Debug, Default)]
pub struct TrainHooks {
    pub dump_dir: Option<PathBuf>,
}

fn dump_batch(dir: &std::path::Path, step: usize, sample: &TrainSample, store: &ParamStore) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("nonfinite_step{step}.lrtn"));
    let mut tensors = store.named_tensors();
    for (k, v) in sample.inputs.iter().enumerate() {
        tensors.push((format!("batch.input{k}"), v.image.clone()));
    }
    tensors.push(("batch.target".into(), sample.target.image.clone()));
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_checkpoint(std::io::BufWriter::new(file), &tensors)?;
    Ok(path)
}

/// Stage-1 training. Keeps the parameters from the best validation round
/// when validation is enabled.
pub fn train_reconstructor(
    model: &mut Reconstructor,
    scenes: &[SceneViews],
    allowed: Option<&[usize]>,
    validation: &[(Vec<View>, View)],
    cfg: &ReconTrainConfig,
    hooks: &TrainHooks,
) -> Result<TrainReport> {
    if scenes.is_empty() {
        return Err(Error::invalid("train_reconstructor", "dataset is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &model.store);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut stale = 0;
    for step in 1..=cfg.steps {
        let sample = sample_training(&mut rng, scenes, allowed, cfg.strategy)?;
        let (w, h) = (sample.target.pose.width(), sample.target.pose.height());
        let (x0, y0, pw, ph) = patch_pixels(&mut rng, w, h, cfg.patch);
        let pixels: Vec<(usize, usize)> = (y0..y0 + ph).flat_map(|j| (x0..x0 + pw).map(move |i| (i, j))).collect();

        let tape = Tape::new();
        let p = model.store.bind(&tape);
        let tri = model.reconstruct(&tape, &p, &sample.inputs)?;
        let batch = render_pixels(&tape, &model.field(&p, tri), &sample.target.pose, &pixels, &model.cfg.render, false)?;
        let pred = rows_to_image(batch.color, ph, pw)?;
        let target = tape
            .constant(sample.target.image.clone())
            .narrow(1, y0, ph)?
            .narrow(2, x0, pw)?;
        let loss = recon_loss(pred, target, &cfg.loss)?;
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            let mut msg = format!(
                "loss {loss_value} at step {step} (scene {}, inputs {:?}, target {})",
                sample.scene, sample.input_ids, sample.target_id
            );
            if let Some(dir) = &hooks.dump_dir {
                let path = dump_batch(dir, step, &sample, &model.store)?;
                write!(msg, ", batch dumped to {}", path.display()).unwrap();
            }
            return Err(Error::NonFinite(msg));
        }
        let patch_psnr = psnr(&pred.value(), &target.value(), 1.0)?;
        let mut grads = tape.backward(loss)?;
        let grads = model.store.collect_grads(&p, &mut grads);
        drop(p);
        adam.step(&mut model.store, &grads)?;
        report.steps_run = step;
        report.log.push(LogRow {
            step,
            loss: loss_value,
            psnr: patch_psnr,
        });

        if cfg.val_every > 0 && !validation.is_empty() && (step % cfg.val_every == 0 || step == cfg.steps) {
            let v = evaluate_psnr(model, validation)?;
            report.validation.push((step, v));
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, model.store.clone()));
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok(report)
}

/// Single reconstruction pass from the inputs, rendered at `target`.
pub fn infer_deterministic(model: &Reconstructor, inputs: &[View], target: &CameraPose) -> Result<(Tensor, Tensor)> {
    model.predict(inputs, target)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Stop once the trailing moving average of the loss falls below this
    /// fraction of the first window's average; 0 never stops.
    pub stop_ratio: f64,
    pub stop_window: usize,
}

impl Default for DiffTrainConfig {
    fn default() -> Self {
        DiffTrainConfig {
            steps: 3000,
            lr: 1e-4,
            batch: 4,
            seed: 0,
            stop_ratio: 0.0,
            stop_window: 100,
        }
    }
}

impl DiffTrainConfig {
    pub fn from_config(cfg: &mut Config) -> Result<Self> {
        let d = DiffTrainConfig::default();
        let batch = cfg.resolve("diff_batch", d.batch)?;
        if batch == 0 {
            return Err(Error::invalid("config", "diff_batch must be positive"));
        }
        Ok(DiffTrainConfig {
            steps: cfg.resolve("diff_steps", d.steps)?,
            lr: cfg.resolve("diff_lr", d.lr)?,
            batch,
            seed: cfg.resolve("seed", d.seed)?,
            stop_ratio: cfg.resolve("diff_stop_ratio", d.stop_ratio)?,
            stop_window: cfg.resolve("diff_stop_window", d.stop_window)?.max(1),
        })
    }
}

/// Schedule keys: `timesteps`, `beta_start`, `beta_end`.
pub fn schedule_from_config(cfg: &mut Config) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(
        cfg.resolve("timesteps", 1000usize)?,
        cfg.resolve("beta_start", 1e-4)?,
        cfg.resolve("beta_end", 0.02)?,
    )
}

/// Stage-2 training. The logged PSNR compares the batch's clean-image
/// estimates against the targets. `stopped_early` reports that the loss
/// reached `stop_ratio`.
pub fn train_diffusion(
    model: &mut Denoiser,
    data: &[DiffusionExample],
    schedule: &NoiseSchedule,
    cfg: &DiffTrainConfig,
    hooks: &TrainHooks,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::invalid("train_diffusion", "conditional dataset is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &model.store);
    let mut report = TrainReport::default();
    for step in 1..=cfg.steps {
        let batch: Vec<&DiffusionExample> = (0..cfg.batch).map(|_| data.choose(&mut rng).unwrap()).collect();
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        let mut noisy = None;
        let loss = {
            let features = stack_images(&tape, batch.iter().map(|ex| &ex.cond.feature))?;
            let images = stack_images(&tape, batch.iter().map(|ex| &ex.cond.image))?;
            let targets: Vec<&Tensor> = batch.iter().map(|ex| &ex.target).collect();
            diffusion_loss_with(&tape, &targets, schedule, model.cfg.p_uncond, &mut rng, |x_t, ts, dropped, _| {
                let pred = model.forward(&p, x_t, ts, features, images, dropped)?;
                noisy = Some((x_t, ts.to_vec(), pred));
                Ok(pred)
            })?
        };
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            let mut msg = format!("diffusion loss {loss_value} at step {step}");
            if let Some(dir) = &hooks.dump_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(format!("nonfinite_step{step}.lrtn"));
                let mut tensors = model.store.named_tensors();
                for (k, ex) in batch.iter().enumerate() {
                    tensors.push((format!("batch.target{k}"), ex.target.clone()));
                }
                let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                write_checkpoint(std::io::BufWriter::new(file), &tensors)?;
                write!(msg, ", batch dumped to {}", path.display()).unwrap();
            }
            return Err(Error::NonFinite(msg));
        }
        let (x_t, ts, pred) = noisy.expect("predictor was called");
        let x_t = x_t.value();
        let pred = pred.value();
        let per = x_t.numel() / batch.len();
        let mut total = 0.0;
        for (k, ex) in batch.iter().enumerate() {
            let slice = |t: &Tensor| Tensor::new(ex.target.shape(), t.data()[k * per..(k + 1) * per].to_vec());
            let x0 = predict_x0(&slice(&x_t)?, ts[k], &slice(&pred)?, schedule)?.map(|v| v.clamp(0.0, 1.0));
            total += psnr(&x0, &ex.target, 1.0)?;
        }
        let mut grads = tape.backward(loss)?;
        let grads = model.store.collect_grads(&p, &mut grads);
        drop(p);
        adam.step(&mut model.store, &grads)?;
        report.steps_run = step;
        report.log.push(LogRow {
            step,
            loss: loss_value,
            psnr: total / batch.len() as f64,
        });
        if cfg.stop_ratio > 0.0 && step >= 2 * cfg.stop_window {
            let w = cfg.stop_window;
            let mean = |rows: &[LogRow]| rows.iter().map(|r| r.loss).sum::<f64>() / w as f64;
            if mean(&report.log[step - w..]) < cfg.stop_ratio * mean(&report.log[..w]) {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok(report)
}

/// Trailing moving averages of `values` over `window` entries.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() - window + 1);
    let mut sum: f64 = values[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..values.len() {
        sum += values[i] - values[i - window];
        out.push(sum / window as f64);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Input,
    Generated,
}

/// Append-only list of posed images; inputs first, then generated views.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBuffer {
    entries: Vec<View>,
    tags: Vec<Provenance>,
}

impl SceneBuffer {
    pub fn from_inputs(inputs: &[View]) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::invalid("scene buffer", "need at least one input view"));
        }
        Ok(SceneBuffer {
            entries: inputs.to_vec(),
            tags: vec![Provenance::Input; inputs.len()],
        })
    }

    pub fn push_generated(&mut self, view: View) {
        self.entries.push(view);
        self.tags.push(Provenance::Generated);
    }

    pub fn views(&self) -> &[View] {
        &self.entries
    }

    pub fn tags(&self) -> &[Provenance] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Turns a rendered view into a refined one. Receives the reconstructor's
/// image and feature map at the new pose and the first input view.
pub trait Refiner {
    fn refine(&self, rendered: &Tensor, feature: &Tensor, input_image: &Tensor, seed: u64) -> Result<Tensor>;
}

/// Guided DDIM sampling conditioned on the rendered feature map.
pub struct DiffusionRefiner<'a> {
    pub model: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub n_steps: usize,
    pub guidance: f64,
}

impl Refiner for DiffusionRefiner<'_> {
    fn refine(&self, _rendered: &Tensor, feature: &Tensor, input_image: &Tensor, seed: u64) -> Result<Tensor> {
        let cond = Condition {
            feature: feature.clone(),
            image: input_image.clone(),
        };
        ddim_sample(self.model, &cond, self.schedule, self.n_steps, self.guidance, seed)
    }
}

/// Returns the reconstructor's own rendering unchanged.
pub struct EchoRefiner;

impl Refiner for EchoRefiner {
    fn refine(&self, rendered: &Tensor, _feature: &Tensor, _input_image: &Tensor, _seed: u64) -> Result<Tensor> {
        Ok(rendered.clone())
    }
}

pub const DEFAULT_PROGRESSIVE_ITERS: usize = 4;
/// Beyond this many intermediate poses neighbouring views barely differ.
pub const MAX_PROGRESSIVE_ITERS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ProgressiveOutput {
    pub image: Tensor,
    pub feature: Tensor,
    /// Refined view at each intermediate pose, in order.
    pub intermediates: Vec<View>,
    pub buffer: SceneBuffer,
}

/// Walks from the first input pose to `target`, refining one intermediate
/// view per step and adding it to the buffer, then reconstructs from the
/// whole buffer. Iteration `i` (from 1) samples with seed `seed + i`.
pub fn infer_progressive<R: Refiner + ?Sized>(
    model: &Reconstructor,
    inputs: &[View],
    target: &CameraPose,
    n_iters: usize,
    refiner: &R,
    seed: u64,
) -> Result<ProgressiveOutput> {
    if n_iters > MAX_PROGRESSIVE_ITERS {
        return Err(Error::invalid(
            "infer_progressive",
            format!("at most {MAX_PROGRESSIVE_ITERS} iterations are supported, got {n_iters}"),
        ));
    }
    let mut buffer = SceneBuffer::from_inputs(inputs)?;
    let poses = interpolate_poses(&inputs[0].pose, target, n_iters, InterpolationMode::Spherical)?;
    let mut intermediates = Vec::with_capacity(n_iters);
    for (i, pose) in poses.into_iter().enumerate() {
        let (rendered, feature) = model.predict(buffer.views(), &pose)?;
        let image = refiner.refine(&rendered, &feature, &inputs[0].image, seed.wrapping_add(i as u64 + 1))?;
        let view = View { image, pose };
        intermediates.push(view.clone());
        buffer.push_generated(view);
    }
    let (image, feature) = model.predict(buffer.views(), target)?;
    Ok(ProgressiveOutput {
        image,
        feature,
        intermediates,
        buffer,
    })
}
