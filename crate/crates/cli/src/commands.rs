use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use xavt_core::analysis::{
    dump_sample, entropy_curve, export_attention_map, format_curve, write_attention_map,
};
use xavt_core::bca::Direction;
use xavt_core::checkpoint::{checksum, read_file, write_file, CHECKPOINT_MAGIC};
use xavt_core::model::{load_checkpoint, Model, ModelConfig, Variant};
use xavt_core::synthdata::{generate, read_dataset, write_dataset, Coupling, CorruptionKind, Dataset, SynthSpec};
use xavt_core::train::{evaluate, model_grad_check, train_from, ModelCheck, OptimConfig, OptimState, ViewSpec};

use crate::config::{RunConfig, KEYS_HELP};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] xavt_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Frozen-expert cross-attention video/audio transformers.
///
/// Exit status: 0 on success, 2 on a contract, configuration or input
/// error, 3 when a verification (gradcheck) fails. XAVT_THREADS caps worker
/// threads (default 1).
#[derive(Debug, Parser)]
#[command(name = "xavt", version, after_help = KEYS_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (clip files plus index.tsv).
    Gen(GenArgs),
    /// Train a model; writes model.xavt, model.optim, train.log and run.cfg.
    Train(TrainArgs),
    /// Evaluate a checkpoint over an index file.
    Eval(EvalArgs),
    /// Compare backward gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Per-layer entropy ratio of one exchange direction.
    Entropy(AnalysisArgs),
    /// Export attention maps of one sample as PGM and TSV.
    Attmap(AttmapArgs),
    /// List checkpoint tensors with shape, trainable flag and checksum.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// xor2x2, visual2 or audio2 (label carried by both, vision or audio).
    #[arg(long, default_value = "xor2x2")]
    pub spec: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Run configuration (key = value lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many epochs; the schedule still spans all of them.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Training index file (overrides train_data).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (overrides out_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Index file (overrides test_data).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Temporal x spatial views, e.g. 1x1 or 2x3.
    #[arg(long)]
    pub views: Option<String>,
    /// misalign[:S], dropout[:R], gaussian:S or pink:S
    #[arg(long)]
    pub corrupt: Option<String>,
    /// Also write metrics.tsv and predictions.tsv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Use the toy geometry regardless of the config preset.
    #[arg(long)]
    pub toy: bool,
    /// 32 (f32 backward, f64 differences) or 64.
    #[arg(long, default_value_t = 32)]
    pub bits: u32,
    #[arg(long)]
    pub h: Option<f64>,
    /// Pass threshold on the largest relative error [1e-3 at 32 bits, 1e-6 at 64].
    #[arg(long)]
    pub tol: Option<f64>,
    /// Half-width of the uniform draw applied to trainables first.
    #[arg(long, default_value_t = 0.1)]
    pub bound: f64,
}

#[derive(Debug, Args)]
pub struct AnalysisArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Exchange direction such as T2S.
    #[arg(long)]
    pub direction: String,
    /// Number of leading samples averaged.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct AttmapArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub direction: String,
    #[arg(long, default_value_t = 1)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    /// Query token (default: the first, a class token where present).
    #[arg(long)]
    pub query: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn threads() -> Result<usize> {
    match std::env::var("XAVT_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage(format!("XAVT_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn run_config(a: &ModelArgs) -> Result<RunConfig> {
    let mut c = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::defaults(),
    };
    if let Some(v) = &a.variant {
        c.set_variant(Variant::parse(&v.to_lowercase())?)?;
    }
    if let Some(s) = a.seed {
        c.set("seed", &s.to_string())?;
    }
    c.finish()?;
    Ok(c)
}

fn load_data(c: &RunConfig, flag: Option<&PathBuf>, fallback: Option<&PathBuf>, what: &str) -> Result<Dataset> {
    let index = flag
        .or(fallback)
        .ok_or_else(|| usage(format!("no {what} given (--data or {what} in the config)")))?;
    let index = if index.is_dir() {
        index.join(xavt_core::synthdata::INDEX_FILE)
    } else {
        index.clone()
    };
    Ok(read_dataset(&index, c.model.num_classes, c.model.frame_rate)?)
}

/// Companion file holding optimiser state for a checkpoint.
pub fn optim_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("optim")
}

fn optim_config(m: &ModelConfig, c: &RunConfig) -> OptimConfig {
    let mut oc = OptimConfig::new(m.depth + 1);
    oc.weight_decay = c.train.weight_decay;
    oc.layer_decay = c.train.layer_decay;
    oc
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    threads()?;
    match cli.command {
        Command::Gen(a) => gen(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Entropy(a) => entropy(a, out),
        Command::Attmap(a) => attmap(a, out),
        Command::Inspect(a) => inspect(a, out),
    }
}

fn gen(a: GenArgs, out: &mut dyn Write) -> Result<()> {
    let coupling = match a.spec.as_str() {
        "xor2x2" => Coupling::Xor,
        "visual2" => Coupling::VisualOnly,
        "audio2" => Coupling::AudioOnly,
        s => return Err(usage(format!("unknown dataset spec {s}"))),
    };
    let mut spec = SynthSpec::xor2x2(a.samples_per_class, a.seed);
    spec.coupling = coupling;
    spec.noise = a.noise;
    let data = generate(&spec)?;
    let index = write_dataset(&a.out, &data)?;
    writeln!(out, "wrote {} clips, index {}", data.len(), index.display())?;
    Ok(())
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut c = run_config(&a.model)?;
    if let Some(e) = a.epochs {
        c.train.epochs = e;
    }
    c.train.stop_after = a.stop_after;
    if let Some(d) = &a.data {
        c.train_data = Some(d.clone());
    }
    if let Some(o) = &a.out {
        c.out_dir = Some(o.clone());
    }
    let dir = c
        .out_dir
        .clone()
        .ok_or_else(|| usage("no output directory (--out or out_dir in the config)"))?;
    let data = load_data(&c, None, c.train_data.as_ref(), "train_data")?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("run.cfg"), c.render())?;

    let (mut model, state) = match &a.resume {
        Some(ckpt) => {
            let model = load_checkpoint(ckpt, c.model.clone())?;
            let tensors = read_file(&optim_path(ckpt), CHECKPOINT_MAGIC)?;
            let state = OptimState::from_tensors(&model.store, optim_config(&c.model, &c), &tensors)?;
            (model, Some(state))
        }
        None => (Model::build(c.model.clone(), None)?, None),
    };
    let mut log = fs::File::create(dir.join("train.log"))?;
    writeln!(log, "step\tepoch\tlr\tloss\ttop1")?;
    let (logs, state) = train_from(&mut model, &data, &c.train, state, &mut log)?;
    let ckpt = dir.join("model.xavt");
    model.save_checkpoint(&ckpt)?;
    write_file(&optim_path(&ckpt), CHECKPOINT_MAGIC, &state.to_tensors(&model.store))?;
    match logs.last() {
        Some(l) => writeln!(out, "trained {} steps, final loss {:.4}, train top1 {:.4}", logs.len(), l.loss, l.top1)?,
        None => writeln!(out, "no steps left to run")?,
    }
    writeln!(out, "checkpoint {}", ckpt.display())?;
    Ok(())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let mut c = run_config(&a.model)?;
    if let Some(v) = &a.views {
        c.views = v.clone();
    }
    let vs = ViewSpec::parse(&c.views)?;
    let corruption = match &a.corrupt {
        Some(k) => Some((CorruptionKind::parse(k, c.model.seed)?, c.model.seed)),
        None => None,
    };
    let data = load_data(&c, a.data.as_ref(), c.test_data.as_ref(), "test_data")?;
    let model = load_checkpoint(&a.checkpoint, c.model.clone())?;
    let ev = evaluate(&model, &data, &vs, corruption)?;
    let mut table = String::from("metric\tvalue\n");
    table.push_str(&format!("top1\t{:.6}\n", ev.metrics.top1));
    table.push_str(&format!("weighted_f1\t{:.6}\n", ev.metrics.weighted_f1));
    for (k, f) in ev.metrics.per_class_f1.iter().enumerate() {
        table.push_str(&format!("f1.class{k}\t{f:.6}\n"));
    }
    out.write_all(table.as_bytes())?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.tsv"), &table)?;
        let mut preds = String::from("index\tlabel\tpred\n");
        for (i, (p, s)) in ev.preds.iter().zip(&data.samples).enumerate() {
            preds.push_str(&format!("{i}\t{}\t{p}\n", s.label));
        }
        fs::write(dir.join("predictions.tsv"), preds)?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let mut c = run_config(&a.model)?;
    if a.toy {
        c.model = ModelConfig {
            variant: c.model.variant,
            disabled: c.model.disabled.clone(),
            windows: c.model.windows.clone(),
            seed: c.model.seed,
            ..ModelConfig::toy(c.model.variant)
        };
        c.finish()?;
    }
    let mut check = ModelCheck::new(a.bits);
    if let Some(h) = a.h {
        check.h = h;
    }
    check.bound = a.bound;
    let tol = a.tol.unwrap_or(if a.bits == 64 { 1e-6 } else { 1e-3 });
    let report = model_grad_check(c.model.clone(), &check)?;
    writeln!(out, "param\tnumel\tmax_rel_error\tmax_abs_grad\tworst_index\tanalytic\tnumeric")?;
    for p in &report.params {
        writeln!(
            out,
            "{}\t{}\t{:.3e}\t{:.3e}\t{}\t{:.6e}\t{:.6e}",
            p.name, p.numel, p.max_rel_error, p.max_abs_grad, p.worst.0, p.worst.1, p.worst.2
        )?;
    }
    let worst = report.max_rel_error();
    let verdict = if worst <= tol { "PASS" } else { "FAIL" };
    writeln!(
        out,
        "{} bits, h {:e}: {} elements, max relative error {:.3e} (tolerance {:e}) {verdict}",
        report.bits,
        report.h,
        report.checked_elements(),
        worst,
        tol
    )?;
    if worst <= tol {
        Ok(())
    } else {
        Err(CliError::Verification(format!("max relative error {worst:.3e} > {tol:e}")))
    }
}

fn entropy(a: AnalysisArgs, out: &mut dyn Write) -> Result<()> {
    let c = run_config(&a.model)?;
    let data = load_data(&c, a.data.as_ref(), c.test_data.as_ref(), "test_data")?;
    let model = load_checkpoint(&a.checkpoint, c.model.clone())?;
    let n = a.samples.min(data.len());
    let idx: Vec<usize> = (0..n).collect();
    let curve = entropy_curve(&model, &data, &idx, Direction::parse(&a.direction)?)?;
    out.write_all(format_curve(&curve).as_bytes())?;
    Ok(())
}

fn attmap(a: AttmapArgs, out: &mut dyn Write) -> Result<()> {
    let c = run_config(&a.model)?;
    let data = load_data(&c, a.data.as_ref(), c.test_data.as_ref(), "test_data")?;
    let model = load_checkpoint(&a.checkpoint, c.model.clone())?;
    let dir = Direction::parse(&a.direction)?.to_string();
    let dump = dump_sample(&model, &data, a.sample)?;
    let map = export_attention_map(&dump, a.layer, &dir, a.query)?;
    let stem = format!("sample{}_layer{}_{dir}", a.sample, a.layer);
    fs::create_dir_all(&a.out)?;
    dump.save(&a.out.join(format!("{stem}.xava")))?;
    for p in write_attention_map(&map, &a.out, &stem)? {
        writeln!(out, "{}", p.display())?;
    }
    Ok(())
}

fn inspect(a: InspectArgs, out: &mut dyn Write) -> Result<()> {
    let tensors = read_file(&a.checkpoint, CHECKPOINT_MAGIC)?;
    writeln!(out, "name\tshape\ttrainable\tsha256")?;
    let mut trainable = 0;
    for t in &tensors {
        let shape: Vec<String> = t.value.shape().iter().map(|d| d.to_string()).collect();
        writeln!(out, "{}\t[{}]\t{}\t{}", t.name, shape.join(","), t.trainable, checksum(&t.value))?;
        if t.trainable {
            trainable += t.value.len();
        }
    }
    writeln!(out, "# {} tensors, {trainable} trainable scalars", tensors.len())?;
    Ok(())
}
