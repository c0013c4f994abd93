//! `xalign`: synthetic data generation, training, evaluation, gradient
//! checks, flop reports and the ablation matrix.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use xalign::checks;
use xalign::config::RunConfig;
use xalign::metrics::{count_flops, count_layers, dump_maps, noise_sweep_csv, parse_layers};
use xalign::par::Exec;
use xalign::scene::{generate_scenes, read_dataset, write_dataset, Dataset, SceneSample, Split, CLASS_NAMES};
use xalign::train::{ablation_csv, ablation_summary_csv, evaluate, run_ablation, train, Model, RunState, TrainConfig, Variant};
use xalign::{Error, Tape};

const CONFIG_FILE: &str = "config.txt";
const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
const NOISE_SWEEP: [f64; 4] = [0.0, 0.05, 0.075, 0.1];

#[derive(Parser)]
#[command(name = "xalign", version, about = "Camera + LiDAR BEV segmentation with cross-modal and cross-view alignment")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset (cameras, LiDAR, BEV and perspective labels).
    GenData {
        /// Output directory; created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes.
        #[arg(long, default_value_t = 80)]
        scenes: usize,
        /// Seed of the first scene; scene i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trailing scenes held out for validation.
        #[arg(long, default_value_t = 16)]
        val: usize,
        /// Gaussian image noise baked into the stored images.
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
        /// Run config supplying geometry and LiDAR settings (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one configuration; writes config.txt, loss.csv, checkpoint.ckpt and eval.csv.
    Train {
        /// Run config file; missing keys take their defaults.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from OUT/checkpoint.ckpt instead of starting over.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a dataset split; prints the report CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Run config; defaults to config.txt next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Split to evaluate: val or train.
        #[arg(long, default_value = "val")]
        split: String,
        /// Evaluate at image noise 0, 0.05, 0.075 and 0.1.
        #[arg(long)]
        noise_sweep: bool,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-class probability PGMs and a color PPM for each scene here.
        #[arg(long)]
        maps: Option<PathBuf>,
    },
    /// Compare tape gradients with central differences.
    Gradcheck {
        /// Check name, or `all`.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-stage inference multiply-accumulate counts.
    Flops {
        /// Run config; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Machine-readable CSV instead of a table.
        #[arg(long)]
        csv: bool,
        /// Count a layer list file instead of the model. One layer per line as
        /// `kind counts...`: conv B CIN COUT K GROUPS H W, deconv B CIN COUT K H W,
        /// matmul M N P, attention TOKENS DIM HEADS, channel_attention C TOKENS HEADS,
        /// deformable CIN COUT K H W, resample C POINTS, lift POINTS C; `#` starts a comment.
        #[arg(long)]
        layers: Option<PathBuf>,
    },
    /// Train and evaluate the four variants over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        /// Base run config (lr, steps, widths); variant and fusion are overridden.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override train.steps.
        #[arg(long)]
        steps: Option<u64>,
    },
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure { code: 1, msg: msg.into() }
    }
    fn data(msg: impl Into<String>) -> Self {
        Failure { code: 2, msg: msg.into() }
    }
    fn numerical(msg: impl Into<String>) -> Self {
        Failure { code: 3, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } | Error::Invalid(_) => 1,
            Error::NonFinite { .. } | Error::Autodiff(_) => 3,
            Error::Shape { .. } | Error::Checkpoint { .. } | Error::Io { .. } | Error::Format { .. } => 2,
        };
        Failure { code, msg: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let out = match cli.cmd {
        Cmd::GenData { out, scenes, seed, val, noise_sigma, config } => gen_data(&out, scenes, seed, val, noise_sigma, config.as_deref()),
        Cmd::Train { config, data, out, resume } => cmd_train(&config, &data, &out, resume),
        Cmd::Eval { checkpoint, data, config, split, noise_sweep, out, maps } => {
            cmd_eval(&checkpoint, &data, config.as_deref(), &split, noise_sweep, out.as_deref(), maps.as_deref())
        }
        Cmd::Gradcheck { module, seed } => cmd_gradcheck(&module, seed),
        Cmd::Flops { config, csv, layers } => cmd_flops(config.as_deref(), csv, layers.as_deref()),
        Cmd::Ablate { data, out, seeds, config, steps } => cmd_ablate(&data, &out, &seeds, config.as_deref(), steps),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) if !p.exists() => Err(Failure::usage(format!("{}: config file not found", p.display()))),
        Some(p) => Ok(RunConfig::load(p)?),
    }
}

fn write(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))
}

fn load_dataset(dir: &Path) -> Result<Dataset, Failure> {
    if !dir.join(xalign::scene::MANIFEST).exists() {
        return Err(Failure::data(format!("{}: no dataset manifest", dir.display())));
    }
    Ok(read_dataset(dir)?)
}

fn gen_data(out: &Path, scenes: usize, seed: u64, val: usize, sigma: f64, config: Option<&Path>) -> CmdResult {
    let mut cfg = load_config(config)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Failure::usage(format!("--noise-sigma must be a finite value >= 0, got {sigma}")));
    }
    if val > scenes {
        return Err(Failure::usage(format!("--val {val} exceeds --scenes {scenes}")));
    }
    cfg.data.noise_sigma = sigma;
    let scene_cfg = cfg.scene_config()?;
    let samples = generate_scenes(seed, scenes, &scene_cfg, Exec::default())?;
    let data = Dataset::new(samples, val, sigma)?;
    write_dataset(&data, out)?;
    println!("wrote {scenes} scenes ({} train, {val} val) to {}", scenes - val, out.display());
    Ok(())
}

/// Every scene of `split` must have the camera rig and BEV grid the model expects.
fn check_geometry(model: &Model, scenes: &[&SceneSample]) -> CmdResult {
    for s in scenes {
        if s.rig != model.rig || s.bev_shape != model.cfg.bev.output {
            return Err(Failure::data(format!(
                "scene {} was rendered for a different camera rig or BEV grid than the configured model",
                s.seed
            )));
        }
    }
    Ok(())
}

fn split_of(data: &Dataset, which: Split) -> Result<Vec<&SceneSample>, Failure> {
    let s = data.split(which);
    if s.is_empty() {
        return Err(Failure::data(format!("dataset has no {} scenes", which.name())));
    }
    Ok(s)
}

fn cmd_train(config: &Path, data_dir: &Path, out: &Path, resume: bool) -> CmdResult {
    let cfg = load_config(Some(config))?;
    let data = load_dataset(data_dir)?;
    let model = Model::from_train(&cfg.train)?;
    let train_set = split_of(&data, Split::Train)?;
    let val_set = data.split(Split::Val);
    check_geometry(&model, &train_set)?;
    check_geometry(&model, &val_set)?;
    create_dir(out)?;
    write(&out.join(CONFIG_FILE), &cfg.serialize())?;

    let ckpt = out.join(CHECKPOINT_FILE);
    let mut state = if resume {
        let st = RunState::load(&ckpt)?;
        RunState::new(&model, &cfg.train)?.params.check_compatible(&st.params)?;
        st
    } else {
        RunState::new(&model, &cfg.train)?
    };
    let tc = &cfg.train;
    let val_path = out.join("val.csv");
    let mut val_log = match fs::read_to_string(&val_path) {
        Ok(prev) if resume => prev,
        _ => String::from("step,miou\n"),
    };
    let result = train(&mut state, &model, tc, &train_set, |st, _| {
        if tc.eval_every > 0 && st.step % tc.eval_every == 0 {
            st.save(&ckpt)?;
            if !val_set.is_empty() {
                let r = evaluate(&st.params, &model, &val_set, 0.0, Exec::default())?;
                let _ = writeln!(val_log, "{},{}", st.step, r.miou);
                eprintln!("step {} val mIoU {:.4}", st.step, r.miou);
            }
        }
        Ok(())
    });
    write(&out.join("loss.csv"), &state.loss_csv())?;
    result?;
    state.save(&ckpt)?;
    if tc.eval_every > 0 {
        write(&val_path, &val_log)?;
    }
    let eval_set = if val_set.is_empty() { &train_set } else { &val_set };
    let report = evaluate(&state.params, &model, eval_set, 0.0, Exec::default())?;
    write(&out.join("eval.csv"), &report.to_csv())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    config: Option<&Path>,
    split: &str,
    sweep: bool,
    out: Option<&Path>,
    maps: Option<&Path>,
) -> CmdResult {
    let which = match split {
        "val" => Split::Val,
        "train" => Split::Train,
        other => return Err(Failure::usage(format!("--split must be val or train, got `{other}`"))),
    };
    let sibling = checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
    let cfg = load_config(Some(config.unwrap_or(&sibling)))?;
    let state = RunState::load(checkpoint)?;
    let model = Model::from_train(&cfg.train)?;
    let expected = model.init_params(cfg.train.seed, cfg.train.variant.uses_pv())?;
    expected.check_compatible(&state.params)?;
    let data = load_dataset(data_dir)?;
    let scenes = split_of(&data, which)?;
    check_geometry(&model, &scenes)?;

    let csv = if sweep {
        let mut blocks = Vec::new();
        for s in NOISE_SWEEP {
            blocks.push((s, evaluate(&state.params, &model, &scenes, s, Exec::default())?));
        }
        noise_sweep_csv(&blocks)
    } else {
        evaluate(&state.params, &model, &scenes, 0.0, Exec::default())?.to_csv()
    };
    if let Some(p) = out {
        write(p, &csv)?;
    }
    print!("{csv}");

    if let Some(dir) = maps {
        create_dir(dir)?;
        let classes = &CLASS_NAMES[..model.cfg.classes];
        for s in &scenes {
            let mut ctx = xalign::blocks::Ctx::new(Tape::no_grad(), &state.params, xalign::blocks::Mode::Eval);
            let f = model.forward_scene(&mut ctx, s, false)?;
            let p = ctx.tape.sigmoid(f.bev_logits);
            dump_maps(dir, &format!("scene_{:04}", s.seed), classes, ctx.tape.value(p), 0.5)?;
            dump_maps(dir, &format!("scene_{:04}_gt", s.seed), classes, &s.bev_target(classes.len()), 0.5)?;
        }
    }
    Ok(())
}

fn cmd_gradcheck(module: &str, seed: u64) -> CmdResult {
    let selected = checks::select(module).map_err(|e| Failure::usage(e.to_string()))?;
    println!("check,max_rel_error,pass");
    let mut failed = Vec::new();
    for c in selected {
        let r = c.run(seed)?;
        println!("{},{:.3e},{}", r.name, r.max_rel_error, if r.passed() { "yes" } else { "no" });
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::numerical(format!("gradient check above {:e}: {}", checks::GRADCHECK_TOL, failed.join(", "))))
    }
}

fn cmd_flops(config: Option<&Path>, csv: bool, layers: Option<&Path>) -> CmdResult {
    if let Some(p) = layers {
        let text = fs::read_to_string(p).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
        let parsed = parse_layers(&text).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
        println!("{}", count_layers(&parsed));
        return Ok(());
    }
    let cfg = load_config(config)?;
    let budget = count_flops(&cfg.train.model, &cfg.train.fusion)?;
    print!("{}", if csv { budget.to_csv() } else { budget.to_table() });
    Ok(())
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, Failure> {
    let seeds: Vec<u64> = text
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Failure::usage(format!("--seeds: `{s}` is not a seed"))))
        .collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        return Err(Failure::usage("--seeds is empty"));
    }
    Ok(seeds)
}

fn cmd_ablate(data_dir: &Path, out: &Path, seeds: &str, config: Option<&Path>, steps: Option<u64>) -> CmdResult {
    let seeds = parse_seeds(seeds)?;
    let base = load_config(config)?;
    let data = load_dataset(data_dir)?;
    let train_set = split_of(&data, Split::Train)?;
    let val_set = split_of(&data, Split::Val)?;
    let mut configs = Vec::new();
    for &seed in &seeds {
        for v in Variant::ALL {
            let mut c = TrainConfig { variant: v, seed, ..base.train.clone() };
            c.fusion.kind = v.default_fusion();
            if let Some(s) = steps {
                c.steps = s;
            }
            c.validate()?;
            configs.push(c);
        }
    }
    check_geometry(&Model::from_train(&configs[0])?, &train_set)?;
    create_dir(out)?;
    let rows = run_ablation(&configs, &train_set, &val_set, &NOISE_SWEEP, Exec::default(), |row, st| {
        eprintln!("{} seed {}: mIoU {:.4}", row.variant, row.seed, row.report.miou);
        st.save(&out.join(format!("{}_seed{}.ckpt", row.variant, row.seed)))
    })?;
    write(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    let summary = ablation_summary_csv(&rows);
    write(&out.join("summary.csv"), &summary)?;
    print!("{}", ablation_csv(&rows));
    print!("{summary}");

    let mean = |v: Variant| {
        let xs: Vec<f64> = rows.iter().filter(|r| r.variant == v).map(|r| r.report.miou).collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    let (b, a) = (mean(Variant::Baseline), mean(Variant::XalignAll));
    println!("baseline mean mIoU {b:.4} <= xalign_all mean mIoU {a:.4}: {}", if b <= a { "holds" } else { "violated" });
    Ok(())
}
