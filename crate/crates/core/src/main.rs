use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use stealthpatch::config::PipelineConfig;
use stealthpatch::detector::DetectorWeights;
use stealthpatch::io::{format_loss_csv, load_image, save_image, save_palette, load_palette, Bundle, Image, Metrics};
use stealthpatch::metrics::{confidence_curve, format_curves, Curve};
use stealthpatch::patchgen::{render_hard, PatchParams, RenderedPatch};
use stealthpatch::pipeline::{self, evaluate_patch, load_scenes, save_scenes};
use stealthpatch::rng::derive_seed;
use stealthpatch::trainer::{train_student, train_teacher, CheckpointPolicy, TeacherPatch};
use stealthpatch::Error;

#[derive(Parser)]
#[command(name = "stealthpatch", version, about = "Palette-constrained adversarial patches against a toy detector")]
struct Cli {
    /// Directory holding every artifact of a run.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Key=value config; defaults to the run directory's snapshot.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Upper bound on worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster environment images into a palette file.
    Palette {
        #[arg(long)]
        colors: Option<usize>,
        /// Defaults to `<run-dir>/palette.txt`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// PPM images; defaults to the run's generated environment images.
        images: Vec<PathBuf>,
    },
    /// Synthesize detector, training and evaluation scenes.
    GenData,
    /// Train the toy detector on the detector scenes.
    TrainDetector,
    /// Optimize the unconstrained teacher patch.
    TrainTeacher {
        /// Continue from the checkpoint if one exists.
        #[arg(long)]
        resume: bool,
    },
    /// Optimize a palette-constrained student patch.
    TrainStudent {
        /// Guide the student with the teacher's features (the default).
        #[arg(long, conflicts_with = "no_distill")]
        distill: bool,
        /// Optimize the adversarial loss alone.
        #[arg(long)]
        no_distill: bool,
        /// Distillation weight; overrides the config.
        #[arg(long)]
        beta: Option<f64>,
        /// Artifact name; defaults to `student_distill` or `student_plain`.
        #[arg(long)]
        name: Option<String>,
        /// Continue from the checkpoint if one exists.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate every trained patch on the evaluation scenes.
    Eval,
    /// Summarize the run directory.
    Report,
}

struct Run {
    dir: PathBuf,
    cfg: PipelineConfig,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Path of an artifact produced by an earlier command.
    fn require(&self, name: &str, needs: &'static str) -> Result<PathBuf> {
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::MissingArtifact { path, needs }.into());
        }
        Ok(path)
    }

    fn detector(&self) -> Result<DetectorWeights> {
        Ok(DetectorWeights::load(&self.require("detector.bin", "train-detector")?)?)
    }

    fn scenes(&self, split: &str) -> Result<Vec<stealthpatch::scene::Scene>> {
        let dir = self.require(&format!("scenes/{split}"), "gen-data")?;
        load_scenes(&dir).with_context(|| format!("loading {split} scenes"))
    }

    fn teacher(&self) -> Result<TeacherPatch> {
        let b = Bundle::load_kind(&self.require("teacher.bin", "train-teacher")?, "teacher-patch")?;
        Ok(TeacherPatch::from_bundle(&b)?)
    }

    fn save_patch_image(&self, name: &str, patch: &RenderedPatch) -> Result<()> {
        save_image(&Image::from_tensor(&patch.image)?, &self.path(&format!("{name}.ppm")))?;
        Ok(())
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let snapshot = cli.run_dir.join("config.txt");
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None if snapshot.exists() => PipelineConfig::load(&snapshot)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }
    let mut cfg = load_config(&cli)?;
    // a palette size given on the command line becomes part of the run
    if let Command::Palette { colors: Some(c), .. } = &cli.command {
        cfg.set("palette_size", &c.to_string())?;
    }
    if let Command::TrainStudent { beta: Some(b), .. } = &cli.command {
        cfg.set("beta", &b.to_string())?;
    }
    cfg.validate()?;
    fs::create_dir_all(&cli.run_dir)
        .with_context(|| format!("creating {}", cli.run_dir.display()))?;
    fs::write(cli.run_dir.join("config.txt"), cfg.to_text())?;
    let run = Run {
        dir: cli.run_dir.clone(),
        cfg,
    };
    match cli.command {
        Command::Palette { output, images, .. } => palette(&run, output, images),
        Command::GenData => gen_data(&run),
        Command::TrainDetector => train_detector(&run),
        Command::TrainTeacher { resume } => teacher(&run, resume),
        Command::TrainStudent {
            no_distill,
            name,
            resume,
            ..
        } => student(&run, !no_distill, name, resume),
        Command::Eval => eval(&run),
        Command::Report => report(&run),
    }
}

fn palette(run: &Run, output: Option<PathBuf>, images: Vec<PathBuf>) -> Result<()> {
    let images = if images.is_empty() {
        pipeline::list_images(&run.require("env", "gen-data")?)?
    } else {
        images
    };
    let tensors = images
        .iter()
        .map(|p| Ok(load_image(p).with_context(|| format!("reading {}", p.display()))?.to_tensor()))
        .collect::<Result<Vec<_>>>()?;
    let c = &run.cfg;
    let pal = pipeline::palette_from_images(
        &tensors,
        c.run.palette_size,
        derive_seed(c.run.seed, "palette"),
        c.kmeans_iters,
    )?;
    let out = output.unwrap_or_else(|| run.path("palette.txt"));
    save_palette(&pal, &out)?;
    log::info!("wrote {} colors to {}", pal.len(), out.display());
    Ok(())
}

fn gen_data(run: &Run) -> Result<()> {
    let d = pipeline::synthesize_datasets(&run.cfg)?;
    for (split, scenes) in [("detector", &d.detector), ("train", &d.train), ("eval", &d.eval)] {
        let dir = run.path(&format!("scenes/{split}"));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        save_scenes(&dir, scenes)?;
    }
    let env_dir = run.path("env");
    fs::create_dir_all(&env_dir)?;
    for (i, img) in pipeline::environment_images(&run.cfg)?.iter().enumerate() {
        save_image(&Image::from_tensor(img)?, &env_dir.join(format!("{i:04}.ppm")))?;
    }
    log::info!(
        "wrote {} detector, {} train and {} eval scenes",
        d.detector.len(),
        d.train.len(),
        d.eval.len()
    );
    Ok(())
}

fn train_detector(run: &Run) -> Result<()> {
    let scenes = run.scenes("detector")?;
    let weights = pipeline::train_detector(&run.cfg, &scenes)?;
    weights.save(&run.path("detector.bin"))?;
    let recall = pipeline::detector_recall(&run.cfg, &weights, &run.scenes("eval")?)?;
    log::info!("held-out recall {recall:.3}");
    if recall < 0.9 {
        log::warn!("detector recall {recall:.3} is below the 0.9 gate");
    }
    Ok(())
}

fn teacher(run: &Run, resume: bool) -> Result<()> {
    let weights = run.detector()?;
    let scenes = run.scenes("train")?;
    let policy = CheckpointPolicy {
        path: Some(run.path("teacher.ckpt")),
        resume,
    };
    let out = train_teacher(&run.cfg.run, &scenes, &weights, &policy)?;
    let f = out.final_epoch();
    let mut b = out.best.to_bundle();
    b.set_meta("best_epoch", out.best_epoch);
    b.set_meta("final_l_adv", f.l_adv);
    b.set_meta("final_mean_obj", f.mean_obj);
    b.save(&run.path("teacher.bin"))?;
    run.save_patch_image("teacher", &out.best.rendered())?;
    fs::write(run.path("teacher_loss.csv"), format_loss_csv(&out.records))?;
    log::info!("teacher: final L_adv {:.4}, best epoch {}", f.l_adv, out.best_epoch);
    Ok(())
}

fn student(run: &Run, distill: bool, name: Option<String>, resume: bool) -> Result<()> {
    let name = name.unwrap_or_else(|| if distill { "student_distill" } else { "student_plain" }.into());
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        bail!("--name may only contain letters, digits, '_' and '-'");
    }
    let teacher = run.teacher()?;
    let palette = load_palette(&run.require("palette.txt", "palette")?)?;
    if palette.len() == 1 {
        log::warn!("a single-color palette leaves the student no attack capacity");
    }
    let weights = run.detector()?;
    let scenes = run.scenes("train")?;
    let policy = CheckpointPolicy {
        path: Some(run.path(&format!("{name}.ckpt"))),
        resume,
    };
    let cfg = &run.cfg.run;
    let out = train_student(cfg, &scenes, &weights, &teacher, &palette, distill, &policy)?;
    let f = out.final_epoch();
    let mut b = out.best.to_bundle();
    b.set_meta("distill", distill);
    b.set_meta("beta", if distill { cfg.beta } else { 0.0 });
    b.set_meta("best_epoch", out.best_epoch);
    b.set_meta("final_l_adv", f.l_adv);
    b.set_meta("final_l_distill", f.l_distill);
    b.set_meta("final_mean_obj", f.mean_obj);
    b.save(&run.path(&format!("{name}.bin")))?;
    run.save_patch_image(&name, &render_hard(&out.best))?;
    fs::write(run.path(&format!("{name}_loss.csv")), format_loss_csv(&out.records))?;
    log::info!("{name}: final L_adv {:.4}, best epoch {}", f.l_adv, out.best_epoch);
    Ok(())
}

/// Student artifacts in the run directory, by name.
fn students(run: &Run) -> Result<Vec<(String, Bundle)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(&run.dir)? {
        let path = entry?.path();
        let Some(name) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".bin"))
        else {
            continue;
        };
        if matches!(name, "detector" | "teacher") {
            continue;
        }
        let b = Bundle::load(&path)?;
        if b.kind == "student-patch" {
            out.push((name.to_string(), b));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn eval(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let weights = run.detector()?;
    let scenes = run.scenes("eval")?;
    let teacher_bundle = Bundle::load_kind(&run.require("teacher.bin", "train-teacher")?, "teacher-patch")?;
    let teacher = TeacherPatch::from_bundle(&teacher_bundle)?;
    let students = students(run)?;
    if students.is_empty() {
        return Err(Error::MissingArtifact {
            path: run.path("student_distill.bin"),
            needs: "train-student",
        }
        .into());
    }

    let mut m = Metrics::new();
    m.set("detector_recall", pipeline::detector_recall(cfg, &weights, &scenes)?);
    let gray = evaluate_patch(cfg, &weights, &scenes, &RenderedPatch::gray(cfg.run.patch_size))?;
    m.set("gray.asr", gray.asr);
    m.set("gray.mean_obj", gray.mean_obj);
    let t = evaluate_patch(cfg, &weights, &scenes, &teacher.rendered())?;
    m.set("teacher.asr", t.asr);
    m.set("teacher.mean_obj", t.mean_obj);
    m.set("teacher.final_l_adv", teacher_bundle.meta("final_l_adv")?);

    let spe = pipeline::steps_per_epoch(scenes_len(run)?, cfg.run.batch_size);
    let mut curves = Vec::new();
    for (name, b) in &students {
        let params = PatchParams::from_bundle(b)?;
        let e = evaluate_patch(cfg, &weights, &scenes, &render_hard(&params))?;
        m.set(&format!("{name}.asr"), e.asr);
        m.set(&format!("{name}.mean_obj"), e.mean_obj);
        m.set(&format!("{name}.ssim"), pipeline::teacher_similarity(&params, &teacher)?);
        for key in ["beta", "final_l_adv", "final_l_distill"] {
            m.set(&format!("{name}.{key}"), b.meta(key)?);
        }
        let csv = fs::read_to_string(run.require(&format!("{name}_loss.csv"), "train-student")?)?;
        curves.push(Curve {
            run: name.clone(),
            beta: b.meta_parse("beta")?,
            points: confidence_curve(&csv, spe)?,
        });
    }
    // headline keys follow the distilled student when there is one
    let primary = students
        .iter()
        .find(|(n, _)| n == "student_distill")
        .unwrap_or(&students[0])
        .0
        .clone();
    m.set("student", &primary);
    for key in ["asr", "ssim", "final_l_adv"] {
        let v = m.get(&format!("{primary}.{key}")).expect("set above").to_string();
        m.set(key, v);
    }
    fs::write(run.path("metrics.txt"), m.to_text())?;
    fs::write(run.path("curves.csv"), format_curves(&curves))?;
    log::info!("asr {} ssim {} ({primary})", m.get("asr").unwrap_or("?"), m.get("ssim").unwrap_or("?"));
    Ok(())
}

fn scenes_len(run: &Run) -> Result<usize> {
    Ok(pipeline::list_images(&run.require("scenes/train", "gen-data")?)?.len())
}

fn report(run: &Run) -> Result<()> {
    let m = Metrics::parse(&fs::read_to_string(run.require("metrics.txt", "eval")?)?)?;
    let text = format_report(&m, &run.cfg);
    fs::write(run.path("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn format_report(m: &Metrics, cfg: &PipelineConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "seed {}  epochs {}  palette {}  beta {}  mask {}",
        cfg.run.seed, cfg.run.epochs, cfg.run.palette_size, cfg.run.beta, cfg.run.mask.strategy
    );
    let _ = writeln!(s, "detector recall: {}", m.get("detector_recall").unwrap_or("-"));
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<20} {:>8} {:>10} {:>8} {:>12}", "patch", "asr", "mean_obj", "ssim", "final_l_adv");
    let mut names = vec!["gray".to_string(), "teacher".to_string()];
    for (k, _) in &m.entries {
        if let Some(n) = k.strip_suffix(".asr") {
            if !names.iter().any(|x| x == n) {
                names.push(n.to_string());
            }
        }
    }
    for n in names {
        let get = |k: &str| m.get(&format!("{n}.{k}")).map(short).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{n:<20} {:>8} {:>10} {:>8} {:>12}",
            get("asr"),
            get("mean_obj"),
            get("ssim"),
            get("final_l_adv")
        );
    }
    s
}

fn short(v: &str) -> String {
    v.parse::<f64>().map(|x| format!("{x:.4}")).unwrap_or_else(|_| v.to_string())
}
