use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dan_core::blocks::{AttentionVariant, MstVariant};
use dan_core::checkpoint::{Checkpoint, Model};
use dan_core::dataset::{make_dataset, Manifest, PairSet, MANIFEST};
use dan_core::expert::{check_image_size, Expert, ExpertConfig, Preset, TaskTag};
use dan_core::gating::DanNet;
use dan_core::gradcheck::{block_suite, primitive_suite, GradCheckOptions, GradCheckReport};
use dan_core::image::{colorize_jet, encode_pgm, read_ppm, write_atomic, write_ppm};
use dan_core::loss::LossConfig;
use dan_core::metrics::{metrics_csv, psnr, ssim, MetricRow};
use dan_core::synth::{DegradationSpec, Mode};
use dan_core::train::{log_csv, train_expert, train_gate, Adam, LogRow, TrainConfig};
use dan_core::{Error as CoreError, Tensor32};

/// Errors that map to exit code 2 rather than 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "dan", version, about = "Synthesise, train, restore and evaluate degradation-adaptive restoration networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a paired synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Pre-train a dehazing or desnowing expert.
    TrainExpert(TrainExpertArgs),
    /// Train the gate of a mixture of two frozen experts.
    TrainGate(TrainGateArgs),
    /// Restore one image with an expert or a mixture.
    Restore(RestoreArgs),
    /// PSNR/SSIM of predictions against ground truth, as CSV.
    Eval(EvalArgs),
    /// Finite-difference gradient checks of every primitive and block.
    Gradcheck(GradcheckArgs),
    /// Describe a checkpoint, dataset directory or image.
    Inspect { path: PathBuf },
}

fn parse_size(s: &str) -> Result<usize, String> {
    let n: usize = s.parse().map_err(|_| format!("{:?} is not a number", s))?;
    if !(32..=128).contains(&n) || !n.is_power_of_two() {
        return Err(format!("size {} must be a power of two in [32, 128]", n));
    }
    Ok(n)
}

fn parse_core<T: std::str::FromStr<Err = CoreError>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: CoreError| e.to_string())
}

fn parse_gates(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected WH,WS")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("{:?} is not a number", v));
    Ok((p(a)?, p(b)?))
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = parse_core::<Mode>)]
    mode: Mode,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 32, value_parser = parse_size)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of haze pairs in mixed mode.
    #[arg(long, default_value_t = 0.5)]
    mixed_ratio: f64,
}

#[derive(Args)]
struct TrainFlags {
    /// Dataset directory holding manifest.tsv.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Training log; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    iters: u64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 32)]
    patch: usize,
    #[arg(long, default_value_t = 2e-4)]
    base_lr: f64,
    #[arg(long, default_value_t = 3e-4)]
    max_lr: f64,
    /// Half-cycle length of the triangular schedule [default: clamp(iters/2, 1, 2000)].
    #[arg(long)]
    step_size: Option<u64>,
    #[arg(long, default_value_t = 0.2)]
    lambda_st: f64,
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    val_every: u64,
    #[arg(long)]
    no_augment: bool,
}

impl TrainFlags {
    fn config(&self) -> Result<TrainConfig> {
        let base = TrainConfig::for_iterations(self.iters);
        let cfg = TrainConfig {
            base_lr: self.base_lr,
            max_lr: self.max_lr,
            step_size: self.step_size.unwrap_or(base.step_size),
            batch_size: self.batch,
            iterations: self.iters,
            patch_size: self.patch,
            loss: LossConfig {
                epsilon: self.epsilon,
                lambda_st: self.lambda_st,
            },
            seed: self.seed,
            val_every: self.val_every,
            augment: !self.no_augment,
            ..base
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    fn log_path(&self) -> PathBuf {
        self.log.clone().unwrap_or_else(|| self.out.with_extension("csv"))
    }
}

#[derive(Args)]
struct TrainExpertArgs {
    #[arg(long, value_parser = parse_core::<TaskTag>)]
    task: TaskTag,
    #[arg(long, default_value = "tiny", value_parser = parse_core::<Preset>)]
    preset: Preset,
    /// Overrides the preset's base channel count.
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long, default_value = "full", value_parser = parse_core::<MstVariant>)]
    mst: MstVariant,
    #[arg(long, default_value = "full", value_parser = parse_core::<AttentionVariant>)]
    attention: AttentionVariant,
    /// Continue from a checkpoint (parameters and optimiser state).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct TrainGateArgs {
    #[arg(long)]
    dehaze: PathBuf,
    #[arg(long)]
    desnow: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct RestoreArgs {
    /// Single-expert checkpoint.
    #[arg(long, conflicts_with = "dan", required_unless_present = "dan")]
    ckpt: Option<PathBuf>,
    /// Mixture checkpoint written by train-gate.
    #[arg(long)]
    dan: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Directory for w_h / w_s gate maps (jet PPM and greyscale PGM).
    #[arg(long, requires = "dan")]
    emit_gates: Option<PathBuf>,
    /// Replace predicted gates by constants WH,WS.
    #[arg(long, hide = true, requires = "dan", value_parser = parse_gates)]
    force_gates: Option<(f64, f64)>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Also write the CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "f32")]
    precision: String,
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Worker threads for per-image work, from `DAN_THREADS`.
fn thread_cap() -> Result<usize> {
    match std::env::var("DAN_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage(format!("DAN_THREADS={:?} must be a positive integer", v))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = DegradationSpec {
        mixed_ratio: a.mixed_ratio,
        ..DegradationSpec::new(a.mode, a.seed, a.size)
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    println!(
        "synth: mode={} count={} size={} seed={} mixed_ratio={} out={}",
        a.mode,
        a.count,
        a.size,
        a.seed,
        a.mixed_ratio,
        a.out.display()
    );
    let m = make_dataset(&spec, a.count, &a.out)?;
    let (haze, snow) = m.census();
    let val = m.entries.iter().filter(|e| e.is_validation()).count();
    println!(
        "wrote {} pairs ({} haze, {} snow; {} train / {} val) to {}",
        m.entries.len(),
        haze,
        snow,
        m.entries.len() - val,
        val,
        a.out.display()
    );
    Ok(())
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    write_atomic(path, log_csv(rows).as_bytes())?;
    Ok(())
}

fn describe(cfg: &ExpertConfig) -> String {
    format!(
        "channels={} mst={} attention={}",
        cfg.base_channels, cfg.mst_variant, cfg.attention_variant
    )
}

fn load_data(dir: &Path) -> Result<PairSet<f32>> {
    PairSet::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn cmd_train_expert(a: &TrainExpertArgs) -> Result<()> {
    let cfg = a.train.config()?;
    let (mut expert, mut adam) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let e: Expert<f32> = ck.to_expert()?;
            if e.task != a.task {
                bail!("{}: checkpoint is a {} expert, not {}", path.display(), e.task, a.task);
            }
            let adam = ck.expert_adam(&e)?.unwrap_or_else(|| Adam::new(&e.params, cfg.adam()));
            (e, adam)
        }
        None => {
            let mut ec = ExpertConfig::from(a.preset);
            if let Some(c) = a.channels {
                ec.base_channels = c;
            }
            ec.mst_variant = a.mst;
            ec.attention_variant = a.attention;
            ec.validate().map_err(|e| usage(e.to_string()))?;
            let e = Expert::<f32>::build(ec, a.task, cfg.seed)?;
            let adam = Adam::new(&e.params, cfg.adam());
            (e, adam)
        }
    };
    println!(
        "train-expert: task={} {} data={} out={} | {}",
        a.task,
        describe(&expert.config),
        a.train.data.display(),
        a.train.out.display(),
        cfg.summary()
    );
    let data = load_data(&a.train.data)?;
    match train_expert(&mut expert, &mut adam, &data, &cfg) {
        Ok(r) => {
            let iteration = adam.step_count();
            Checkpoint::from_expert(&expert, Some(&cfg), iteration, Some(&adam)).save(&a.train.out)?;
            write_log(&a.train.log_path(), &r.log)?;
            println!(
                "loss {:.6} -> {:.6}; val psnr {:.3} dB (degraded {:.3} dB, before training {:.3} dB)",
                r.initial_loss, r.final_loss, r.final_val_psnr, r.degraded_val_psnr, r.initial_val_psnr
            );
            Ok(())
        }
        Err(CoreError::Diverged { iteration }) => {
            Checkpoint::from_expert(&expert, Some(&cfg), adam.step_count(), Some(&adam)).save(&a.train.out)?;
            bail!(
                "training diverged at iteration {}; last good parameters saved to {}",
                iteration,
                a.train.out.display()
            )
        }
        Err(e) => Err(e.into()),
    }
}

fn load_expert(path: &Path, task: TaskTag) -> Result<Expert<f32>> {
    let e: Expert<f32> = Checkpoint::load(path)?
        .to_expert()
        .with_context(|| format!("reading expert {}", path.display()))?;
    if e.task != task {
        bail!("{}: expected a {} expert, found {}", path.display(), task, e.task);
    }
    Ok(e)
}

fn cmd_train_gate(a: &TrainGateArgs) -> Result<()> {
    let cfg = a.train.config()?;
    let dehaze = load_expert(&a.dehaze, TaskTag::Dehaze)?;
    let desnow = load_expert(&a.desnow, TaskTag::Desnow)?;
    println!(
        "train-gate: dehaze={} ({}) desnow={} ({}) data={} out={} | {}",
        a.dehaze.display(),
        describe(&dehaze.config),
        a.desnow.display(),
        describe(&desnow.config),
        a.train.data.display(),
        a.train.out.display(),
        cfg.summary()
    );
    let mut dan = DanNet::new(dehaze, desnow, cfg.seed)?;
    let mut adam = Adam::new(&dan.gate_params, cfg.adam());
    let data = load_data(&a.train.data)?;
    match train_gate(&mut dan, &mut adam, &data, &cfg) {
        Ok(r) => {
            Checkpoint::from_dan(&dan, Some(&cfg), adam.step_count(), Some(&adam)).save(&a.train.out)?;
            write_log(&a.train.log_path(), &r.log)?;
            println!(
                "loss {:.6} -> {:.6}; val psnr mixture {:.3} dB (before {:.3} dB), dehaze alone {:.3} dB, desnow alone {:.3} dB, degraded {:.3} dB",
                r.initial_loss,
                r.final_loss,
                r.final_val_psnr,
                r.initial_val_psnr,
                r.dehaze_val_psnr,
                r.desnow_val_psnr,
                r.degraded_val_psnr
            );
            Ok(())
        }
        Err(CoreError::Diverged { iteration }) => {
            Checkpoint::from_dan(&dan, Some(&cfg), adam.step_count(), Some(&adam)).save(&a.train.out)?;
            bail!("gate training diverged at iteration {}; last good state saved to {}", iteration, a.train.out.display())
        }
        Err(e) => Err(e.into()),
    }
}

fn write_gate_maps(dir: &Path, w_h: &Tensor32, w_s: &Tensor32) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, map) in [("w_h", w_h), ("w_s", w_s)] {
        write_atomic(&dir.join(format!("{}.ppm", name)), &colorize_jet(map)?.encode())?;
        write_atomic(&dir.join(format!("{}.pgm", name)), &encode_pgm(map)?)?;
    }
    Ok(())
}

fn cmd_restore(a: &RestoreArgs) -> Result<()> {
    println!(
        "restore: {} input={} output={}{}{}",
        match (&a.ckpt, &a.dan) {
            (Some(c), _) => format!("ckpt={}", c.display()),
            (_, Some(d)) => format!("dan={}", d.display()),
            _ => unreachable!("clap requires one of --ckpt / --dan"),
        },
        a.input.display(),
        a.output.display(),
        a.emit_gates.as_ref().map(|d| format!(" emit-gates={}", d.display())).unwrap_or_default(),
        a.force_gates.map(|(h, s)| format!(" force-gates={},{}", h, s)).unwrap_or_default(),
    );
    let image: Tensor32 = read_ppm(&a.input)?;
    let [_, c, h, w] = image.dims4()?;
    check_image_size(c, h, w).map_err(|e| usage(format!("{}: {}", a.input.display(), e)))?;
    if let Some(path) = &a.ckpt {
        let ck = Checkpoint::load(path)?;
        if matches!(ck.model, Model::Dan { .. }) {
            return Err(usage(format!("{} is a mixture checkpoint; use --dan", path.display())));
        }
        let e: Expert<f32> = ck.to_expert()?;
        write_ppm(&a.output, &e.infer(&image)?)?;
    } else if let Some(path) = &a.dan {
        let ck = Checkpoint::load(path)?;
        if matches!(ck.model, Model::Expert { .. }) {
            return Err(usage(format!("{} is an expert checkpoint; use --ckpt", path.display())));
        }
        let mut dan: DanNet<f32> = ck.to_dan()?;
        dan.forced_gates = a.force_gates;
        let (restored, w_h, w_s) = dan.infer(&image)?;
        write_ppm(&a.output, &restored)?;
        if let Some(dir) = &a.emit_gates {
            write_gate_maps(dir, &w_h, &w_s)?;
        }
    }
    println!("wrote {}x{} image to {}", w, h, a.output.display());
    Ok(())
}

fn ppm_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for e in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if name.ends_with(".ppm") && !name.starts_with('.') {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn metric_row(pred: &Path, gt: &Path, name: &str) -> Result<MetricRow> {
    let p: Tensor32 = read_ppm(&pred.join(name))?;
    let g: Tensor32 = read_ppm(&gt.join(name))?;
    if p.shape() != g.shape() {
        bail!("{}: size {:?} differs from ground truth {:?}", pred.join(name).display(), p.shape(), g.shape());
    }
    Ok(MetricRow {
        image_id: name.trim_end_matches(".ppm").to_string(),
        psnr_db: psnr(&p, &g)?,
        ssim: ssim(&p, &g)?,
    })
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let threads = thread_cap()?;
    eprintln!("eval: pred={} gt={} threads={}", a.pred.display(), a.gt.display(), threads);
    let pred = ppm_names(&a.pred)?;
    let gt = ppm_names(&a.gt)?;
    if let Some(n) = gt.iter().find(|n| !pred.contains(n)) {
        bail!("missing prediction {}", a.pred.join(n).display());
    }
    if let Some(n) = pred.iter().find(|n| !gt.contains(n)) {
        bail!("missing ground truth {}", a.gt.join(n).display());
    }
    if gt.is_empty() {
        bail!("no .ppm images in {}", a.gt.display());
    }
    let per = gt.len().div_ceil(threads);
    let rows: Vec<MetricRow> = std::thread::scope(|s| {
        let handles: Vec<_> = gt
            .chunks(per)
            .map(|names| s.spawn(move || names.iter().map(|n| metric_row(&a.pred, &a.gt, n)).collect::<Result<Vec<_>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| anyhow!("metric worker panicked"))?)
            .collect::<Result<Vec<_>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    let csv = metrics_csv(&rows);
    print!("{}", csv);
    if let Some(out) = &a.out {
        write_atomic(out, csv.as_bytes())?;
    }
    Ok(())
}

fn print_reports(reports: &[GradCheckReport], tol: f64) -> bool {
    let mut ok = true;
    for r in reports {
        let pass = r.passes(tol);
        ok &= pass;
        println!(
            "{:<28} {} max_rel_err {:.3e} over {} entries  {}",
            r.name,
            r.precision,
            r.max_rel_err,
            r.checked,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    ok
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    println!("gradcheck: precision={} step={:e} tol={:e} seed={}", a.precision, a.step, a.tol, a.seed);
    let opts = GradCheckOptions {
        step: a.step,
        ..Default::default()
    };
    let reports = match a.precision.as_str() {
        "f32" => [primitive_suite::<f32>(a.seed, opts)?, block_suite::<f32>(a.seed, opts)?].concat(),
        "f64" => [primitive_suite::<f64>(a.seed, opts)?, block_suite::<f64>(a.seed, opts)?].concat(),
        other => return Err(usage(format!("precision {:?} must be f32 or f64", other))),
    };
    if !print_reports(&reports, a.tol) {
        bail!("some gradient checks exceeded {:e}", a.tol);
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    if path.is_dir() {
        let m = Manifest::read(path)?;
        let (haze, snow) = m.census();
        let val = m.entries.iter().filter(|e| e.is_validation()).count();
        println!("dataset {} ({})", path.display(), MANIFEST);
        println!("  pairs {} (haze {}, snow {}), train {} / val {}", m.entries.len(), haze, snow, m.entries.len() - val, val);
        println!("  spec {}", serde_json::to_string(&m.spec)?);
        return Ok(());
    }
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(dan_core::checkpoint::MAGIC) {
        let ck = Checkpoint::load(path)?;
        println!("checkpoint {}", path.display());
        match ck.model {
            Model::Expert { task, config } => {
                let e: Expert<f32> = ck.to_expert()?;
                println!("  {} expert, {}, {} parameters", task, describe(&config), e.count_params());
                println!("  checksum {}", e.params.checksum());
            }
            Model::Dan { .. } => {
                let d: DanNet<f32> = ck.to_dan()?;
                println!("  mixture, {} parameters (gate {})", d.count_params(), d.gate_params.numel());
                println!("  dehaze {} checksum {}", describe(&d.dehaze.config), d.dehaze.params.checksum());
                println!("  desnow {} checksum {}", describe(&d.desnow.config), d.desnow.params.checksum());
                println!("  gate checksum {}", d.gate_params.checksum());
            }
        }
        println!("  iteration {}, adam step {}, {} tensors", ck.iteration, ck.adam_step, ck.tensors.len());
        if let Some(t) = &ck.train {
            println!("  train {}", t.summary());
        }
        return Ok(());
    }
    let img: Tensor32 = read_ppm(path)?;
    let [_, _, h, w] = img.dims4()?;
    println!("image {} {}x{} mean {:.4}", path.display(), w, h, img.sum_f64() / img.len() as f64);
    Ok(())
}

/// The error chain joined by ": ", leaving out causes whose text the
/// previous message already quotes (core errors embed their source).
fn render_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::TrainExpert(a) => cmd_train_expert(a),
        Command::TrainGate(a) => cmd_train_gate(a),
        Command::Restore(a) => cmd_restore(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Inspect { path } => cmd_inspect(path),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render_chain(&e));
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
