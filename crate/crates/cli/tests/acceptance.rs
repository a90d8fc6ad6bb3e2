//! Acceptance suite. Runs every criterion in order and prints one
//! `PASS`/`FAIL` line per criterion; exits non-zero if any fails.
//!
//! Criterion numbers given as arguments select a subset, e.g.
//! `cargo test --test acceptance -- 5 6`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use liftrefine::checks::{
    camera_roundtrip_oracle, ddim_inversion_oracle, gradient_suite, guidance_identity_oracle, rendering_oracle,
    CheckOutcome,
};
use liftrefine::data::precompute_conditions;
use liftrefine::diffusion::{ddim_sample, Denoiser, DenoiserConfig, NoiseSchedule};
use liftrefine::losses::psnr;
use liftrefine::model::{ReconConfig, Reconstructor, View};
use liftrefine::pipeline::{
    evaluate_psnr, infer_deterministic, infer_progressive, train_diffusion, train_reconstructor, view_pairs,
    DiffTrainConfig, EchoRefiner, Provenance, ReconTrainConfig, SceneViews, TrainHooks,
};
use liftrefine::renderer::RenderConfig;
use liftrefine::scene::{generate_scene, orbit_cameras, render_ground_truth};
use liftrefine::triplane::UpsampleMode;
use liftrefine::Result;

/// Scene id of the single-scene overfit experiments (three primitives).
const OVERFIT_SCENE: u64 = 9;
const VIEWS: usize = 24;
const SIZE: usize = 32;
/// Views `0..TRAIN_VIEWS` may be used for training; the rest are held out.
const TRAIN_VIEWS: usize = 20;
const INPUTS: [usize; 3] = [0, 1, 2];

/// Pilot-derived thresholds (see README): the default model reaches about
/// 41 dB held-in and 42 dB held-out after 2000 steps.
const OVERFIT_STEPS: usize = 2000;
const HELD_IN_MIN_DB: f64 = 25.0;
const HELD_OUT_MIN_DB: f64 = 18.0;
const OVERFIT_BUDGET_S: f64 = 600.0;

const TREND_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TREND_MIN_AGREE: usize = 4;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn scene_views(id: u64, views: usize) -> Result<SceneViews> {
    let scene = generate_scene(id);
    let gt = RenderConfig {
        n_samples: 64,
        ..RenderConfig::default()
    };
    let views = orbit_cameras(id, views, SIZE)?
        .into_iter()
        .map(|pose| {
            Ok(View {
                image: render_ground_truth(&scene, &pose, &gt)?,
                pose,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneViews { id, views })
}

struct Overfit {
    scenes: Vec<SceneViews>,
    allowed: Vec<usize>,
    held_in: Vec<(Vec<View>, View)>,
    held_out: Vec<(Vec<View>, View)>,
}

impl Overfit {
    fn new() -> Result<Self> {
        let scene = scene_views(OVERFIT_SCENE, VIEWS)?;
        let held_in = view_pairs(&scene, &INPUTS, &(0..TRAIN_VIEWS).collect::<Vec<_>>())?;
        let held_out = view_pairs(&scene, &INPUTS, &(TRAIN_VIEWS..VIEWS).collect::<Vec<_>>())?;
        Ok(Overfit {
            scenes: vec![scene],
            allowed: (0..TRAIN_VIEWS).collect(),
            held_in,
            held_out,
        })
    }

    fn train(&self, model_cfg: ReconConfig, steps: usize, seed: u64) -> Result<(Reconstructor, f64)> {
        let mut model = Reconstructor::new(model_cfg, seed);
        let cfg = ReconTrainConfig {
            steps,
            val_every: 0,
            seed,
            ..ReconTrainConfig::default()
        };
        let report = train_reconstructor(&mut model, &self.scenes, Some(&self.allowed), &[], &cfg, &TrainHooks::default())?;
        let tail = 300.min(report.log.len()).max(1);
        let tail_loss = report.log[report.log.len() - tail..].iter().map(|r| r.loss).sum::<f64>() / tail as f64;
        Ok((model, tail_loss))
    }
}

/// Reduced model used where many training runs are needed.
fn ablation_config(volume_res: usize, triplane_res: usize, mode: UpsampleMode) -> ReconConfig {
    let mut cfg = ReconConfig {
        encoder_hidden: 8,
        channels: 8,
        volume_res,
        mlp_width: 32,
        feature_channels: 8,
        ..ReconConfig::default()
    };
    cfg.triplane.channels = 8;
    cfg.triplane.upsample_log2 = (triplane_res / volume_res).trailing_zeros() as usize;
    cfg.triplane.mode = mode;
    cfg.render.n_samples = 16;
    cfg
}

fn checks_verdict(outcomes: &[CheckOutcome]) -> Verdict {
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    let worst = outcomes.iter().map(|o| o.max_error).fold(0.0, f64::max);
    if failed.is_empty() {
        verdict(true, format!("{} checks, max error {worst:.2e}", outcomes.len()))
    } else {
        verdict(false, format!("failed: {}", failed.join(", ")))
    }
}

fn criterion_1() -> Result<Verdict> {
    let start = Instant::now();
    let outcomes = gradient_suite(&TREND_SEEDS)?;
    let secs = start.elapsed().as_secs_f64();
    let mut v = checks_verdict(&outcomes);
    v.passed &= secs < 300.0;
    v.detail = format!("{} (relative) in {secs:.1}s over {} seeds", v.detail, TREND_SEEDS.len());
    Ok(v)
}

fn criterion_2() -> Result<Verdict> {
    Ok(checks_verdict(&[rendering_oracle(2, 100)?]))
}

fn criterion_3() -> Result<Verdict> {
    Ok(checks_verdict(&[camera_roundtrip_oracle(3, 50, 1000)?]))
}

fn criterion_4() -> Result<Verdict> {
    Ok(checks_verdict(&[
        ddim_inversion_oracle(4, 20, &NoiseSchedule::default())?,
        guidance_identity_oracle(4)?,
    ]))
}

fn criterion_5(data: &Overfit, trained: &mut Option<Reconstructor>) -> Result<Verdict> {
    let start = Instant::now();
    let (model, _) = data.train(ReconConfig::default(), OVERFIT_STEPS, 0)?;
    let secs = start.elapsed().as_secs_f64();
    let held_in = evaluate_psnr(&model, &data.held_in)?;
    let mut worst_out = f64::INFINITY;
    for pair in &data.held_out {
        worst_out = worst_out.min(evaluate_psnr(&model, std::slice::from_ref(pair))?);
    }
    *trained = Some(model);
    Ok(verdict(
        held_in > HELD_IN_MIN_DB && worst_out > HELD_OUT_MIN_DB && secs < OVERFIT_BUDGET_S,
        format!(
            "{OVERFIT_STEPS} steps in {secs:.0}s; held-in {held_in:.2} dB (> {HELD_IN_MIN_DB}), worst held-out {worst_out:.2} dB (> {HELD_OUT_MIN_DB})"
        ),
    ))
}

fn criterion_6(data: &Overfit, trained: &mut Option<Reconstructor>) -> Result<Verdict> {
    if trained.is_none() {
        *trained = Some(data.train(ablation_config(8, 32, UpsampleMode::Learned), 500, 0)?.0);
    }
    let model = trained.as_ref().unwrap();
    let mut problems = Vec::new();
    let mut worst_gap: f64 = 0.0;
    for (inputs, target) in &data.held_out {
        let (det, _) = infer_deterministic(model, inputs, &target.pose)?;
        let zero = infer_progressive(model, inputs, &target.pose, 0, &EchoRefiner, 0)?;
        if zero.image.data().iter().zip(det.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            problems.push("n_iters = 0 differs from deterministic".to_string());
        }
        for n in 1..=4 {
            let out = infer_progressive(model, inputs, &target.pose, n, &EchoRefiner, 0)?;
            let generated = out.buffer.tags().iter().filter(|t| **t == Provenance::Generated).count();
            if out.buffer.len() != inputs.len() + n || generated != n || out.intermediates.len() != n {
                problems.push(format!("buffer has {} views after {n} iterations", out.buffer.len()));
            }
            if n == 4 {
                let gap = psnr(&out.image, &target.image, 1.0)? - psnr(&det, &target.image, 1.0)?;
                worst_gap = worst_gap.max(gap.abs());
            }
        }
    }
    problems.dedup();
    Ok(verdict(
        problems.is_empty() && worst_gap <= 0.5,
        if problems.is_empty() {
            format!("bit-exact at 0 iterations, buffer +1 per iteration, echo gap {worst_gap:.3} dB (<= 0.5)")
        } else {
            problems.join("; ")
        },
    ))
}

fn criterion_7(data: &Overfit) -> Result<Verdict> {
    let mut learned_wins = 0;
    let mut losses = Vec::new();
    for &seed in &TREND_SEEDS {
        let (_, learned) = data.train(ablation_config(8, 32, UpsampleMode::Learned), 3000, seed)?;
        let (_, bicubic) = data.train(ablation_config(8, 32, UpsampleMode::Bicubic), 3000, seed)?;
        learned_wins += usize::from(learned <= bicubic);
        losses.push(format!("{learned:.5}/{bicubic:.5}"));
    }
    let mut res_wins = 0;
    let mut psnrs = Vec::new();
    for &seed in &TREND_SEEDS {
        let (hi, _) = data.train(ablation_config(16, 64, UpsampleMode::Learned), 1500, seed)?;
        let (lo, _) = data.train(ablation_config(16, 16, UpsampleMode::Learned), 1500, seed)?;
        let (p_hi, p_lo) = (evaluate_psnr(&hi, &data.held_in)?, evaluate_psnr(&lo, &data.held_in)?);
        res_wins += usize::from(p_hi >= p_lo);
        psnrs.push(format!("{p_hi:.2}/{p_lo:.2}"));
    }
    Ok(verdict(
        learned_wins >= TREND_MIN_AGREE && res_wins >= TREND_MIN_AGREE,
        format!(
            "learned<=bicubic loss {learned_wins}/5 [{}]; res64>=res16 PSNR {res_wins}/5 [{}]",
            losses.join(" "),
            psnrs.join(" ")
        ),
    ))
}

fn criterion_8() -> Result<Verdict> {
    let scenes = [101, 202, 303, 404]
        .into_iter()
        .map(|id| scene_views(id, 8))
        .collect::<Result<Vec<_>>>()?;
    let recon = Reconstructor::new(ReconConfig::default(), 0);
    let records = precompute_conditions(&recon, &scenes, 0)?;
    let schedule = NoiseSchedule::default();
    let mut dropped = 0;
    let mut steps = Vec::new();
    let mut first_model = None;
    for &seed in &TREND_SEEDS {
        let mut model = Denoiser::new(DenoiserConfig::default(), seed);
        let cfg = DiffTrainConfig {
            steps: 3000,
            seed,
            stop_ratio: 0.9,
            stop_window: 100,
            ..DiffTrainConfig::default()
        };
        let report = train_diffusion(&mut model, &records, &schedule, &cfg, &TrainHooks::default())?;
        dropped += usize::from(report.stopped_early);
        steps.push(if report.stopped_early { report.steps_run.to_string() } else { "-".into() });
        first_model.get_or_insert(model);
    }
    let model = first_model.unwrap();
    let cond = &records[0].cond;
    let a = ddim_sample(&model, cond, &schedule, 50, 2.0, 1)?;
    let b = ddim_sample(&model, cond, &schedule, 50, 2.0, 2)?;
    let l2 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    Ok(verdict(
        dropped >= TREND_MIN_AGREE && l2 > 0.0,
        format!("loss below 0.9x initial average for {dropped}/5 seeds (steps {}); sample L2 distance {l2:.3}", steps.join(",")),
    ))
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Compares two artifact trees; returns a description of the first mismatch.
fn compare_trees(a: &Path, b: &Path) -> Option<String> {
    let (fa, fb) = (files_under(a), files_under(b));
    if fa != fb {
        return Some(format!("{} and {} hold different files", a.display(), b.display()));
    }
    if fa.is_empty() {
        return Some(format!("{} is empty", a.display()));
    }
    fa.iter()
        .find(|f| std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap())
        .map(|f| format!("{} differs", f.display()))
}

fn criterion_9() -> Result<Verdict> {
    let bin = env!("CARGO_BIN_EXE_liftrefine");
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let small_model = [
        "channels=4",
        "encoder_hidden=4",
        "volume_res=8",
        "triplane_res=16",
        "mlp_width=16",
        "feature_channels=4",
        "n_samples=8",
        "patch=8",
    ];
    let p = |name: &str| root.join(name).display().to_string();
    // (name, output dir, fixed arguments, extra settings)
    let steps: Vec<(&str, String, Vec<String>, Vec<&str>)> = vec![
        (
            "gen-data",
            p("data"),
            vec!["gen-data".into(), "--seed".into(), "5".into()],
            vec!["train_scenes=2", "val_scenes=1", "test_scenes=1", "views=6", "size=16", "gt_samples=16"],
        ),
        (
            "train-recon",
            p("recon"),
            vec!["train-recon".into(), "--data".into(), p("data"), "--seed".into(), "1".into()],
            [&small_model[..], &["recon_steps=30", "val_every=10"]].concat(),
        ),
        (
            "precompute-cond",
            p("cond"),
            vec!["precompute-cond".into(), "--data".into(), p("data"), "--recon-run".into(), p("recon")],
            vec![],
        ),
        (
            "train-diff",
            p("diff"),
            vec!["train-diff".into(), "--conditions-run".into(), p("cond"), "--seed".into(), "2".into()],
            vec!["diff_steps=10", "unet_channels=4", "embed_dim=8", "time_dim=8", "ddim_steps=5"],
        ),
        (
            "infer-det",
            p("infer-det"),
            vec!["infer", "--data", &p("data"), "--recon-run", &p("recon"), "--target", "3"]
                .into_iter()
                .map(String::from)
                .collect(),
            vec![],
        ),
        (
            "infer-prog",
            p("infer-prog"),
            vec![
                "infer", "--data", &p("data"), "--recon-run", &p("recon"), "--diff-run", &p("diff"), "--target", "4",
                "--mode", "prog", "--iters", "2", "--steps", "5", "--seed", "3",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            vec![],
        ),
        (
            "eval",
            p("eval"),
            vec!["eval", "--data", &p("data"), "--recon-run", &p("recon"), "--inputs", "0,1"]
                .into_iter()
                .map(String::from)
                .collect(),
            vec![],
        ),
        ("grad-check", p("grad"), vec!["grad-check".into()], vec!["grad_seeds=1"]),
        ("oracle-check", p("oracle"), vec!["oracle-check".into()], vec![]),
    ];
    let mut failures = Vec::new();
    for (name, out, args, settings) in &steps {
        let out_flag = if *name == "gen-data" { "--out" } else { "--run" };
        let first = Command::new(bin)
            .args(args)
            .args([out_flag, out])
            .args(settings.iter().flat_map(|s| ["--set", s]))
            .output()
            .unwrap();
        if !first.status.success() {
            failures.push(format!("{name} failed: {}", String::from_utf8_lossy(&first.stderr).trim()));
            continue;
        }
        let rerun = format!("{out}-rerun");
        let snapshot = format!("{out}/config.txt");
        let second = Command::new(bin)
            .args(args)
            .args([out_flag, &rerun, "--config", &snapshot])
            .output()
            .unwrap();
        if !second.status.success() {
            failures.push(format!("{name} rerun failed: {}", String::from_utf8_lossy(&second.stderr).trim()));
        } else if let Some(diff) = compare_trees(Path::new(out), Path::new(&rerun)) {
            failures.push(format!("{name}: {diff}"));
        }
    }
    Ok(verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} subcommand runs reproduced byte for byte", steps.len())
        } else {
            failures.join("; ")
        },
    ))
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let needs_scene = wanted(5) || wanted(6) || wanted(7);
    let data = needs_scene.then(|| Overfit::new().expect("overfit scene"));
    let mut trained = None;
    let mut all_passed = true;
    for n in 1..=9 {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let result = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(data.as_ref().unwrap(), &mut trained),
            6 => criterion_6(data.as_ref().unwrap(), &mut trained),
            7 => criterion_7(data.as_ref().unwrap()),
            8 => criterion_8(),
            _ => criterion_9(),
        };
        let v = result.unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        all_passed &= v.passed;
        println!(
            "criterion {n}: {} ({:.1}s) {}",
            if v.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        );
    }
    if !all_passed {
        std::process::exit(1);
    }
}
