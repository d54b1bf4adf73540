use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use kv_latent::attention::HeadGeometry;
use kv_latent::budget::{render_csv, render_text, CacheBudgetReport, CacheDType};
use kv_latent::model::{self, toy_corpus, CheckpointError, Corpus, Model, ModelConfig};
use kv_latent::numerics::KlDirection;
use kv_latent::rope::{band_series, decay_series, ideal_curve, sig9, write_series_csv, Layout, RopeConfig, RopeMode};
use kv_latent::surgery::{perform_surgery, PostRope, Selection, SurgeryPlan};
use kv_latent::training::{pretrain, run_stage1, run_stage2, Stage, TrainConfig, TrainError, TrainLog, TRAIN_LR};

#[derive(Parser)]
#[command(
    name = "kvl",
    version,
    about = "Decoupled-head KV cache toolkit: RoPE curves, surgery, recovery training, budgets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalized RoPE similarity curve as `pos,value[,ideal]` CSV.
    RopeCurve(RopeCurveArgs),
    /// Reduce head dimensions of a checkpoint and optionally attach LoRA.
    Surgery(SurgeryArgs),
    /// Recovery training of a surgically reduced student.
    Train(TrainArgs),
    /// Held-out log perplexity of a checkpoint.
    Eval(EvalArgs),
    /// KV cache footprint and token capacity of a head geometry.
    Budget(BudgetArgs),
    /// Write a randomly initialized checkpoint.
    Init(InitArgs),
    /// Next-token training of every parameter (teacher production).
    Pretrain(PretrainArgs),
    /// Write the deterministic toy text corpus.
    ToyCorpus(ToyCorpusArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Standard,
    FreqAware,
    Subsampled,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    HalfSplit,
    Adjacent,
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::HalfSplit => Layout::HalfSplit,
            LayoutArg::Adjacent => Layout::Adjacent,
        }
    }
}

#[derive(clap::Args)]
struct RopeCurveArgs {
    #[arg(long, default_value_t = 10000.0)]
    theta: f64,
    #[arg(long)]
    dim: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Standard)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = LayoutArg::HalfSplit)]
    layout: LayoutArg,
    /// Positions 0..max-pos.
    #[arg(long, default_value_t = 8192)]
    max_pos: usize,
    /// Parent schedule width for `--mode subsampled`.
    #[arg(long)]
    parent_dim: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, default_value_t = 0)]
    phase: usize,
    /// Channel band `LO:HI`, 1-based and inclusive; LO odd, HI even.
    #[arg(long)]
    band: Option<String>,
    /// Add the large-dimension limit as an `ideal` column.
    #[arg(long)]
    ideal: bool,
    /// Quadrature panels for `--ideal`; default max(64, ⌈x/2⌉) at position x.
    #[arg(long)]
    ideal_steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a gnuplot script plotting the CSV.
    #[arg(long, requires = "out")]
    gnuplot: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PostRopeArg {
    Subsampled,
    FreqAware,
}

#[derive(clap::Args)]
struct SurgeryArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dqk: usize,
    #[arg(long)]
    dvo: usize,
    #[arg(long, value_enum, default_value_t = PostRopeArg::FreqAware)]
    rope: PostRopeArg,
    #[arg(long)]
    lora_rank: Option<usize>,
    /// Defaults to twice the rank.
    #[arg(long, requires = "lora_rank")]
    lora_alpha: Option<f64>,
    /// JSON surgery report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Keep a seeded random subset of rotation pairs instead of every s-th.
    #[arg(long)]
    random_seed: Option<u64>,
    /// Seed for LoRA initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Ce,
    Kl,
}

#[derive(Clone, Copy, ValueEnum)]
enum KlDirectionArg {
    TeacherStudent,
    StudentTeacher,
}

#[derive(clap::Args)]
struct CorpusArgs {
    /// UTF-8 text, tokenized as bytes.
    #[arg(long)]
    corpus: PathBuf,
    /// Tokens per training window.
    #[arg(long, default_value_t = 65)]
    window: usize,
    #[arg(long, default_value_t = 0.05)]
    held_out: f64,
    /// Use only the first N training windows.
    #[arg(long)]
    max_windows: Option<usize>,
}

#[derive(clap::Args)]
struct OptimArgs {
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV loss log `step,loss,lr`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// `key=value` record of the effective settings.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Stage II objective.
    #[arg(long, value_enum, default_value_t = LossArg::Ce)]
    loss: LossArg,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    student: PathBuf,
    /// Trained checkpoint; defaults to overwriting the student.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = TRAIN_LR)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = KlDirectionArg::TeacherStudent)]
    kl_direction: KlDirectionArg,
    #[command(flatten)]
    data: CorpusArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    HeldOut,
    Train,
    All,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::HeldOut)]
    split: SplitArg,
    #[arg(long)]
    csv: bool,
    #[command(flatten)]
    data: CorpusArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    Bf16,
    F16,
    F32,
    F64,
}

#[derive(clap::Args)]
struct BudgetArgs {
    #[arg(long, default_value_t = 32)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    kv_heads: usize,
    #[arg(long, default_value_t = 128)]
    dqk: usize,
    #[arg(long, default_value_t = 128)]
    dvo: usize,
    #[arg(long, value_enum, default_value_t = DTypeArg::Bf16)]
    dtype: DTypeArg,
    #[arg(long, default_value_t = 4000)]
    tokens: u64,
    /// Memory budget in bytes for the token-capacity column.
    #[arg(long, default_value_t = 60_000_000_000)]
    mem: u64,
    #[arg(long, default_value_t = 128)]
    baseline_dqk: usize,
    #[arg(long, default_value_t = 128)]
    baseline_dvo: usize,
    #[arg(long)]
    csv: bool,
}

#[derive(clap::Args)]
struct InitArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    kv_heads: usize,
    #[arg(long, default_value_t = 32)]
    dqk: usize,
    #[arg(long, default_value_t = 32)]
    dvo: usize,
    #[arg(long, default_value_t = 512)]
    ffn: usize,
    #[arg(long, default_value_t = 256)]
    max_seq: usize,
    #[arg(long, default_value_t = 10000.0)]
    theta: f64,
    #[arg(long, value_enum, default_value_t = LayoutArg::HalfSplit)]
    layout: LayoutArg,
}

#[derive(clap::Args)]
struct PretrainArgs {
    #[arg(long)]
    model: PathBuf,
    /// Defaults to overwriting the input.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[command(flatten)]
    data: CorpusArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(clap::Args)]
struct ToyCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3000)]
    paragraphs: usize,
}

fn threads_from_env() -> Result<usize> {
    match std::env::var("KVL_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("KVL_THREADS must be a non-negative integer, got {v:?}")),
        Err(_) => Ok(0),
    }
}

fn worker_count(requested: usize) -> usize {
    match requested {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
}

/// `f(0..n)` split into contiguous chunks across `threads` workers.
fn par_map(n: usize, threads: usize, f: impl Fn(usize) -> f64 + Sync) -> Vec<f64> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| scope.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread"))
            .collect()
    })
}

fn write_output(path: Option<&Path>, content: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, content).with_context(|| format!("writing {}", p.display())),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(content).context("writing stdout")
        }
    }
}

fn parse_band(s: &str) -> Result<(usize, usize)> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| anyhow!("--band expects LO:HI, got {s:?}"))?;
    let lo: usize = lo.parse().with_context(|| format!("bad band start {lo:?}"))?;
    let hi: usize = hi.parse().with_context(|| format!("bad band end {hi:?}"))?;
    if lo % 2 != 1 || !hi.is_multiple_of(2) || lo > hi {
        bail!("--band {lo}:{hi} must start on an odd channel and end on an even one");
    }
    Ok((lo, hi))
}

fn rope_curve(a: &RopeCurveArgs) -> Result<()> {
    let mode = match a.mode {
        ModeArg::Standard => RopeMode::Standard,
        ModeArg::FreqAware => RopeMode::FrequencyAware,
        ModeArg::Subsampled => RopeMode::Subsampled {
            parent_dim: a
                .parent_dim
                .ok_or_else(|| anyhow!("--mode subsampled needs --parent-dim"))?,
            stride: a.stride.ok_or_else(|| anyhow!("--mode subsampled needs --stride"))?,
            phase: a.phase,
        },
    };
    if !matches!(a.mode, ModeArg::Subsampled) && (a.parent_dim.is_some() || a.stride.is_some()) {
        bail!("--parent-dim and --stride only apply to --mode subsampled");
    }
    let config = RopeConfig {
        theta: a.theta,
        dim: a.dim,
        mode,
        layout: a.layout.into(),
    };
    config.validate()?;

    let series = match &a.band {
        Some(band) => {
            if !matches!(a.mode, ModeArg::Standard) {
                bail!("--band applies to the standard schedule only");
            }
            if a.ideal {
                bail!("--band and --ideal cannot be combined");
            }
            let (lo, hi) = parse_band(band)?;
            band_series(a.theta, a.dim, lo.div_ceil(2)..=hi / 2, a.max_pos)?
        }
        None => decay_series(&config, a.max_pos)?,
    };
    let ideal = a.ideal.then(|| -> Result<Vec<f64>> {
        let threads = worker_count(threads_from_env()?);
        let fixed = a.ideal_steps;
        if fixed == Some(0) {
            bail!("--ideal-steps must be positive");
        }
        Ok(par_map(a.max_pos, threads, |x| {
            let steps = fixed.unwrap_or_else(|| x.div_ceil(2).max(64));
            ideal_curve(a.theta, x as f64, steps)
        }))
    });
    let ideal = ideal.transpose()?;

    let mut buf = Vec::new();
    write_series_csv(&mut buf, &series, ideal.as_deref())?;
    write_output(a.out.as_deref(), &buf)?;

    if let (Some(script), Some(csv)) = (&a.gnuplot, &a.out) {
        let mut s = String::new();
        writeln!(s, "set datafile separator ','")?;
        writeln!(s, "set key autotitle columnhead")?;
        writeln!(s, "set xlabel 'relative position'")?;
        writeln!(s, "set ylabel 'normalized similarity'")?;
        write!(s, "plot '{}' using 1:2 with lines", csv.display())?;
        if ideal.is_some() {
            write!(s, ", '' using 1:3 with lines")?;
        }
        writeln!(s)?;
        fs::write(script, s).with_context(|| format!("writing {}", script.display()))?;
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    model::load(path).with_context(|| format!("loading {}", path.display()))
}

fn save_model(model: &Model<f32>, path: &Path) -> Result<()> {
    model::save(model, path).with_context(|| format!("saving {}", path.display()))
}

fn surgery(a: &SurgeryArgs) -> Result<()> {
    let teacher = load_model(&a.input)?;
    let plan = SurgeryPlan {
        d_qk: a.dqk,
        d_vo: a.dvo,
        selection: match a.random_seed {
            Some(seed) => Selection::Random { seed },
            None => Selection::Strided,
        },
        rope: match a.rope {
            PostRopeArg::Subsampled => PostRope::Subsampled,
            PostRopeArg::FreqAware => PostRope::FrequencyAware,
        },
        lora: a.lora_rank.map(|r| (r, a.lora_alpha.unwrap_or(2.0 * r as f64))),
        seed: a.seed,
    };
    let (student, report) = perform_surgery(&teacher, &plan)?;
    save_model(&student, &a.out)?;
    if let Some(p) = &a.report {
        fs::write(p, report.to_json() + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn load_corpus(a: &CorpusArgs) -> Result<Corpus> {
    let text = fs::read_to_string(&a.corpus).with_context(|| format!("reading corpus {}", a.corpus.display()))?;
    let mut corpus = Corpus::from_text(&text, a.window, a.held_out)?;
    if let Some(n) = a.max_windows {
        if n == 0 {
            bail!("--max-windows must be positive");
        }
        corpus.train.truncate(n);
    }
    Ok(corpus)
}

fn train_config(stage: Stage, lr: f64, o: &OptimArgs) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        lr,
        batch: o.batch,
        steps: o.steps,
        seed: o.seed,
        threads: threads_from_env()?,
        ..TrainConfig::new(stage)
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_artifacts(o: &OptimArgs, cfg: &TrainConfig, log: &TrainLog) -> Result<()> {
    if let Some(p) = &o.log {
        fs::write(p, log.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &o.manifest {
        fs::write(p, cfg.manifest()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let stage = match (a.stage, a.loss) {
        (1, _) => Stage::One,
        (_, LossArg::Ce) => Stage::TwoNtp,
        (_, LossArg::Kl) => Stage::TwoKl,
    };
    let mut cfg = train_config(stage, a.lr, &a.optim)?;
    cfg.kl_direction = match a.kl_direction {
        KlDirectionArg::TeacherStudent => KlDirection::ReferenceFirst,
        KlDirectionArg::StudentTeacher => KlDirection::ModelFirst,
    };
    let teacher = load_model(&a.teacher)?;
    let mut student = load_model(&a.student)?;
    let corpus = load_corpus(&a.data)?;
    let log = match stage {
        Stage::One => run_stage1(&teacher, &mut student, &corpus, &cfg)?,
        _ => run_stage2(&teacher, &mut student, &corpus, &cfg)?,
    };
    save_model(&student, a.out.as_deref().unwrap_or(&a.student))?;
    write_artifacts(&a.optim, &cfg, &log)
}

fn pretrain_cmd(a: &PretrainArgs) -> Result<()> {
    let cfg = train_config(Stage::Pretrain, a.lr, &a.optim)?;
    let mut m = load_model(&a.model)?;
    let corpus = load_corpus(&a.data)?;
    let log = pretrain(&mut m, &corpus, &cfg)?;
    save_model(&m, a.out.as_deref().unwrap_or(&a.model))?;
    write_artifacts(&a.optim, &cfg, &log)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let m = load_model(&a.model)?;
    let corpus = load_corpus(&a.data)?;
    let (name, seqs) = match a.split {
        SplitArg::HeldOut => ("held_out", corpus.held_out),
        SplitArg::Train => ("train", corpus.train),
        SplitArg::All => ("all", [corpus.train, corpus.held_out].concat()),
    };
    let tokens: usize = seqs.iter().map(|s| s.len().saturating_sub(1)).sum();
    let ppl = m.log_perplexity(&seqs)?;
    let out = if a.csv {
        format!(
            "split,windows,tokens,log_ppl\n{name},{},{tokens},{}\n",
            seqs.len(),
            sig9(ppl)
        )
    } else {
        format!(
            "split     {name}\nwindows   {}\ntokens    {tokens}\nlog_ppl   {}\n",
            seqs.len(),
            sig9(ppl)
        )
    };
    write_output(None, out.as_bytes())
}

fn budget(a: &BudgetArgs) -> Result<()> {
    let geom = |d_qk: usize, d_vo: usize| HeadGeometry {
        d_model: a.kv_heads * d_qk.max(d_vo).max(1),
        n_heads: a.kv_heads,
        n_kv_heads: a.kv_heads,
        d_qk,
        d_vo,
    };
    let dtype = match a.dtype {
        DTypeArg::Bf16 => CacheDType::Bf16,
        DTypeArg::F16 => CacheDType::F16,
        DTypeArg::F32 => CacheDType::F32,
        DTypeArg::F64 => CacheDType::F64,
    };
    let report = CacheBudgetReport::new(
        &geom(a.dqk, a.dvo),
        &geom(a.baseline_dqk, a.baseline_dvo),
        a.layers,
        dtype,
        a.tokens,
        a.mem,
    )?;
    let out = if a.csv {
        render_csv(&[report])
    } else {
        render_text(&[report])
    };
    write_output(None, out.as_bytes())
}

fn init(a: &InitArgs) -> Result<()> {
    let config = ModelConfig {
        vocab: a.vocab,
        d_model: a.d_model,
        n_layers: a.layers,
        geom: HeadGeometry {
            d_model: a.d_model,
            n_heads: a.heads,
            n_kv_heads: a.kv_heads,
            d_qk: a.dqk,
            d_vo: a.dvo,
        },
        d_ffn: a.ffn,
        rope: RopeConfig::standard(a.theta, a.dqk).with_layout(a.layout.into()),
        max_seq: a.max_seq,
    };
    let m = Model::<f32>::random(config, a.seed)?;
    save_model(&m, &a.out)
}

fn toy(a: &ToyCorpusArgs) -> Result<()> {
    fs::write(&a.out, toy_corpus(a.seed, a.paragraphs)).with_context(|| format!("writing {}", a.out.display()))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::RopeCurve(a) => rope_curve(a),
        Command::Surgery(a) => surgery(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Budget(a) => budget(a),
        Command::Init(a) => init(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::ToyCorpus(a) => toy(a),
    }
}

/// 3 for divergence, 4 for I/O and checkpoint format, 2 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if matches!(cause.downcast_ref::<TrainError>(), Some(TrainError::Divergence { .. })) {
            return 3;
        }
        if cause.is::<CheckpointError>() || cause.is::<std::io::Error>() {
            return 4;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
