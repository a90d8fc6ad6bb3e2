//! `liftrefine` command-line driver.
//!
//! Every subcommand accepts `--config FILE`, `--set KEY=VALUE` and
//! `--seed N`; flags override the file. Each run directory gets a
//! `config.txt` snapshot of every value the run used, so rerunning from a
//! snapshot reproduces the outputs byte for byte.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use liftrefine::checks::{gradient_suite, oracle_suite, CheckOutcome};
use liftrefine::data::{
    generate_dataset, load_conditions, load_split, precompute_conditions, save_conditions, save_render, DatasetConfig,
    DatasetManifest, Split,
};
use liftrefine::diffusion::{Denoiser, DenoiserConfig};
use liftrefine::io::Config;
use liftrefine::losses::{metrics_report, MetricRow};
use liftrefine::model::{ReconConfig, Reconstructor};
use liftrefine::pipeline::{
    infer_deterministic, infer_progressive, loss_log_text, schedule_from_config, train_diffusion, train_reconstructor,
    view_pairs, DiffTrainConfig, DiffusionRefiner, ReconTrainConfig, SceneViews, TrainHooks, TrainReport,
    DEFAULT_PROGRESSIVE_ITERS,
};

const SNAPSHOT: &str = "config.txt";
const RECON_CKPT: &str = "checkpoints/recon.lrtn";
const DIFF_CKPT: &str = "checkpoints/diffusion.lrtn";
const CONDITIONS: &str = "conditions.lrtn";

#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error(transparent)]
    Lib(#[from] liftrefine::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Check(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Lib(e) if e.is_numerical() => 2,
            Failure::Check(_) => 2,
            _ => 1,
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

#[derive(Parser)]
#[command(name = "liftrefine", version, about = "Few-view novel view synthesis: lift, reconstruct, refine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// `key = value` file; later flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Det,
    Prog,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the reconstructor.
    TrainRecon {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Render conditioning features for every training view.
    PrecomputeCond {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        recon_run: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the conditional denoiser on precomputed conditions.
    TrainDiff {
        #[arg(long)]
        conditions_run: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Synthesise one novel view.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        recon_run: PathBuf,
        #[arg(long)]
        diff_run: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        scene_index: usize,
        /// Comma-separated input view indices.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        inputs: Vec<usize>,
        #[arg(long)]
        target: usize,
        #[arg(long, value_enum, default_value = "det")]
        mode: Mode,
        #[arg(long, default_value_t = DEFAULT_PROGRESSIVE_ITERS)]
        iters: usize,
        #[arg(long, default_value_t = 2.0)]
        guidance: f64,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// PSNR and SSIM of deterministic reconstruction over a split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        recon_run: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        inputs: Vec<usize>,
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every differentiable operation.
    GradCheck {
        #[arg(long, default_value = "runs/grad-check")]
        run: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare renderer, camera and sampler against reference implementations.
    OracleCheck {
        #[arg(long, default_value = "runs/oracle-check")]
        run: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::GenData { out, common } => gen_data(&out, &common),
        Command::TrainRecon { data, run, common } => train_recon(&data, &run, &common),
        Command::PrecomputeCond {
            data,
            recon_run,
            run,
            common,
        } => precompute_cond(&data, &recon_run, &run, &common),
        Command::TrainDiff {
            conditions_run,
            run,
            common,
        } => train_diff(&conditions_run, &run, &common),
        Command::Infer {
            data,
            recon_run,
            diff_run,
            split,
            scene_index,
            inputs,
            target,
            mode,
            iters,
            guidance,
            steps,
            run,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.set("data", data.display());
            cfg.set("recon_run", recon_run.display());
            if let Some(d) = &diff_run {
                cfg.set("diff_run", d.display());
            }
            cfg.set("split", split);
            cfg.set("scene_index", scene_index);
            cfg.set("inputs", join(&inputs));
            cfg.set("target", target);
            cfg.set("mode", format!("{mode:?}").to_lowercase());
            cfg.set("iters", iters);
            cfg.set("guidance", guidance);
            cfg.set("ddim_steps", steps);
            infer(&cfg, &run)
        }
        Command::Eval {
            data,
            recon_run,
            split,
            inputs,
            run,
            common,
        } => eval(&data, &recon_run, split, &inputs, &run, &common),
        Command::GradCheck { run, common } => grad_check(&run, &common),
        Command::OracleCheck { run, common } => oracle_check(&run, &common),
    }
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn load_config(common: &Common) -> Outcome<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::new(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim());
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", seed);
    }
    Ok(cfg)
}

fn create_dir(path: &Path) -> Outcome {
    std::fs::create_dir_all(path).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn run_config(run: &Path) -> Outcome<Config> {
    Ok(Config::load(&run.join(SNAPSHOT))?)
}

fn gen_data(out: &Path, common: &Common) -> Outcome {
    let mut cfg = load_config(common)?;
    let dcfg = DatasetConfig::from_config(&mut cfg)?;
    create_dir(out)?;
    let manifest = generate_dataset(out, &dcfg)?;
    cfg.save(&out.join(SNAPSHOT))?;
    println!("wrote {} scenes to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn load_data(data: &Path, split: Split) -> Outcome<Vec<SceneViews>> {
    let manifest = DatasetManifest::load(data)?;
    let scenes = load_split(data, &manifest, split)?;
    if scenes.is_empty() {
        return Err(Failure::Usage(format!("{} has no {split} scenes", data.display())));
    }
    Ok(scenes)
}

fn write_log(run: &Path, report: &TrainReport) -> Outcome {
    write_text(&run.join("logs/loss.tsv"), &loss_log_text(&report.log))?;
    if !report.validation.is_empty() {
        let mut text = String::from("step\tpsnr\n");
        for (step, v) in &report.validation {
            text.push_str(&format!("{step}\t{v:.6}\n"));
        }
        write_text(&run.join("logs/val.tsv"), &text)?;
    }
    Ok(())
}

fn train_recon(data: &Path, run: &Path, common: &Common) -> Outcome {
    let mut cfg = load_config(common)?;
    cfg.set("data", data.display());
    let model_cfg = ReconConfig::from_config(&mut cfg)?;
    let train_cfg = ReconTrainConfig::from_config(&mut cfg)?;
    let train_views: usize = cfg.resolve("train_views", 0)?;
    let train = load_data(data, Split::Train)?;
    let val = load_data(data, Split::Val).unwrap_or_default();
    let mut validation = Vec::new();
    for scene in &val {
        let n = scene.views.len();
        validation.extend(view_pairs(scene, &[0], &[n / 3, 2 * n / 3])?);
    }
    create_dir(run)?;
    cfg.save(&run.join(SNAPSHOT))?;

    let allowed: Option<Vec<usize>> = (train_views > 0).then(|| (0..train_views).collect());
    let mut model = Reconstructor::new(model_cfg, train_cfg.seed);
    let hooks = TrainHooks {
        dump_dir: Some(run.join("dumps")),
    };
    let report = train_reconstructor(&mut model, &train, allowed.as_deref(), &validation, &train_cfg, &hooks)?;
    create_dir(&run.join("checkpoints"))?;
    model.save(&run.join(RECON_CKPT))?;
    write_log(run, &report)?;
    for (k, (inputs, target)) in validation.iter().enumerate() {
        let img = model.predict_image(inputs, &target.pose)?;
        save_render(&run.join("renders"), &format!("val_{k:02}"), &img)?;
    }
    let last = report.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} steps{}; final loss {last:.5}",
        report.steps_run,
        if report.stopped_early { " (early stop)" } else { "" }
    );
    if let Some((step, v)) = report.validation.iter().max_by(|a, b| a.1.total_cmp(&b.1)) {
        println!("best validation PSNR {v:.2} dB at step {step}");
    }
    Ok(())
}

fn load_reconstructor(recon_run: &Path) -> Outcome<Reconstructor> {
    let mut cfg = run_config(recon_run)?;
    let model_cfg = ReconConfig::from_config(&mut cfg)?;
    Ok(Reconstructor::load(model_cfg, &recon_run.join(RECON_CKPT))?)
}

fn precompute_cond(data: &Path, recon_run: &Path, run: &Path, common: &Common) -> Outcome {
    let mut cfg = load_config(common)?;
    cfg.set("data", data.display());
    cfg.set("recon_run", recon_run.display());
    let seed: u64 = cfg.resolve("seed", 0)?;
    let model = load_reconstructor(recon_run)?;
    let scenes = load_data(data, Split::Train)?;
    let records = precompute_conditions(&model, &scenes, seed)?;
    create_dir(run)?;
    cfg.save(&run.join(SNAPSHOT))?;
    save_conditions(&run.join(CONDITIONS), &records)?;
    println!("wrote {} conditioning records", records.len());
    Ok(())
}

fn train_diff(conditions_run: &Path, run: &Path, common: &Common) -> Outcome {
    let mut cfg = load_config(common)?;
    cfg.set("conditions_run", conditions_run.display());
    let data = load_conditions(&conditions_run.join(CONDITIONS))?;
    let first = data
        .first()
        .ok_or_else(|| Failure::Usage("no conditioning records".into()))?;
    let model_cfg = DenoiserConfig::from_config(&mut cfg, first.cond.feature.shape()[0])?;
    let schedule = schedule_from_config(&mut cfg)?;
    let train_cfg = DiffTrainConfig::from_config(&mut cfg)?;
    let render_steps: usize = cfg.resolve("ddim_steps", 50)?;
    let guidance: f64 = cfg.resolve("guidance", 2.0)?;
    create_dir(run)?;
    cfg.save(&run.join(SNAPSHOT))?;

    let mut model = Denoiser::new(model_cfg, train_cfg.seed);
    let hooks = TrainHooks {
        dump_dir: Some(run.join("dumps")),
    };
    let report = train_diffusion(&mut model, &data, &schedule, &train_cfg, &hooks)?;
    create_dir(&run.join("checkpoints"))?;
    model.save(&run.join(DIFF_CKPT))?;
    write_log(run, &report)?;
    for (k, ex) in data.iter().take(2).enumerate() {
        let sample = liftrefine::diffusion::ddim_sample(&model, &ex.cond, &schedule, render_steps, guidance, k as u64)?;
        save_render(&run.join("renders"), &format!("sample_{k:02}"), &sample)?;
        save_render(&run.join("renders"), &format!("target_{k:02}"), &ex.target)?;
    }
    let last = report.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!("trained {} steps; final loss {last:.5}", report.steps_run);
    Ok(())
}

fn infer(cfg: &Config, run: &Path) -> Outcome {
    let mut cfg = cfg.clone();
    let get = |cfg: &Config, key: &str| cfg.get_str(key).unwrap_or_default().to_string();
    let data = PathBuf::from(get(&cfg, "data"));
    let recon_run = PathBuf::from(get(&cfg, "recon_run"));
    let split: Split = cfg.get("split", Split::Test)?;
    let scene_index: usize = cfg.get("scene_index", 0)?;
    let inputs: Vec<usize> = get(&cfg, "inputs")
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Failure::Usage(format!("bad view index `{s}`"))))
        .collect::<Outcome<_>>()?;
    let target: usize = cfg.get("target", 0)?;
    let seed: u64 = cfg.resolve("seed", 0)?;

    let model = load_reconstructor(&recon_run)?;
    let scenes = load_data(&data, split)?;
    let scene = scenes
        .get(scene_index)
        .ok_or_else(|| Failure::Usage(format!("{split} split has {} scenes", scenes.len())))?;
    let (input_views, target_view) = view_pairs(scene, &inputs, &[target])?.remove(0);
    create_dir(run)?;
    cfg.save(&run.join(SNAPSHOT))?;
    let renders = run.join("renders");

    let image = match get(&cfg, "mode").as_str() {
        "prog" => {
            let diff_run = PathBuf::from(
                cfg.get_str("diff_run")
                    .ok_or_else(|| Failure::Usage("--mode prog needs --diff-run".into()))?,
            );
            let mut dcfg = run_config(&diff_run)?;
            let denoiser_cfg = DenoiserConfig::from_config(&mut dcfg, model.cfg.feature_channels)?;
            let schedule = schedule_from_config(&mut dcfg)?;
            let denoiser = Denoiser::load(denoiser_cfg, &diff_run.join(DIFF_CKPT))?;
            let refiner = DiffusionRefiner {
                model: &denoiser,
                schedule: &schedule,
                n_steps: cfg.get("ddim_steps", 200)?,
                guidance: cfg.get("guidance", 2.0)?,
            };
            let iters: usize = cfg.get("iters", DEFAULT_PROGRESSIVE_ITERS)?;
            let out = infer_progressive(&model, &input_views, &target_view.pose, iters, &refiner, seed)?;
            for (i, v) in out.intermediates.iter().enumerate() {
                save_render(&renders, &format!("iter_{:02}", i + 1), &v.image)?;
            }
            out.image
        }
        _ => infer_deterministic(&model, &input_views, &target_view.pose)?.0,
    };
    save_render(&renders, "output", &image)?;
    save_render(&renders, "target", &target_view.image)?;
    let row = MetricRow::compute(format!("scene_{:06}_view_{target:03}", scene.id), &image, &target_view.image)?;
    let report = metrics_report(std::slice::from_ref(&row));
    write_text(&run.join("metrics.tsv"), &report)?;
    print!("{report}");
    Ok(())
}

fn eval(data: &Path, recon_run: &Path, split: Split, inputs: &[usize], run: &Path, common: &Common) -> Outcome {
    let mut cfg = load_config(common)?;
    cfg.set("data", data.display());
    cfg.set("recon_run", recon_run.display());
    cfg.set("split", split);
    cfg.set("inputs", join(inputs));
    let model = load_reconstructor(recon_run)?;
    let scenes = load_data(data, split)?;
    let mut rows = Vec::new();
    for scene in &scenes {
        let targets: Vec<usize> = (0..scene.views.len()).filter(|k| !inputs.contains(k)).collect();
        let (mut psnr, mut ssim) = (0.0, 0.0);
        for (input_views, target) in view_pairs(scene, inputs, &targets)? {
            let img = model.predict_image(&input_views, &target.pose)?;
            let m = MetricRow::compute("", &img, &target.image)?;
            psnr += m.psnr;
            ssim += m.ssim;
        }
        let n = targets.len().max(1) as f64;
        rows.push(MetricRow {
            name: format!("scene_{:06}", scene.id),
            psnr: psnr / n,
            ssim: ssim / n,
        });
    }
    create_dir(run)?;
    cfg.save(&run.join(SNAPSHOT))?;
    let report = metrics_report(&rows);
    write_text(&run.join("metrics.tsv"), &report)?;
    print!("{report}");
    Ok(())
}

fn report_checks(run: &Path, cfg: &Config, outcomes: &[CheckOutcome]) -> Outcome {
    create_dir(run)?;
    cfg.save(&run.join(SNAPSHOT))?;
    let text: String = outcomes.iter().map(|o| o.line() + "\n").collect();
    write_text(&run.join("report.tsv"), &text)?;
    print!("{text}");
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} of {} checks failed", outcomes.len())));
    }
    println!("all {} checks passed", outcomes.len());
    Ok(())
}

fn grad_check(run: &Path, common: &Common) -> Outcome {
    let mut cfg = load_config(common)?;
    let seed: u64 = cfg.resolve("seed", 0)?;
    let seeds: usize = cfg.resolve("grad_seeds", 5)?;
    let list: Vec<u64> = (0..seeds as u64).map(|k| seed + k).collect();
    report_checks(run, &cfg, &gradient_suite(&list)?)
}

fn oracle_check(run: &Path, common: &Common) -> Outcome {
    let mut cfg = load_config(common)?;
    let seed: u64 = cfg.resolve("seed", 0)?;
    report_checks(run, &cfg, &oracle_suite(seed)?)
}
