//! The subcommands behind the `latte` binary.
//!
//! Every failure prints one line `error[<kind>]: <message>` to stderr and
//! exits 2 for usage or configuration problems, 1 for anything else.

use crate::config::{resolve_out, RunConfig};
use crate::data::{generate, DataFile, Dataset, DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::eval::{
    analyze_gates, analyze_similarity, bench, clamp_report, evaluate, gates_csv, head_mean_csv, median_bandwidth,
    mmd_rbf, similarity_csv, sliced_w2, DEFAULT_PROJECTIONS,
};
use crate::flowmatch::SamplerConfig;
use crate::model::{Checkpoint, Model};
use crate::rng::Rng;
use crate::train::{MetricsLog, Trainer};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const CHECKPOINT_FILE: &str = "checkpoint.ltte";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Parser, Debug)]
#[command(name = "latte", version, about = "Flow matching with layerwise timestep experts")]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Materialize a dataset split as an LTTD file.
    GenData(GenDataArgs),
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Compare generated samples with held-out data.
    Eval(EvalArgs),
    /// Sequential attention-map similarity along a sampling trajectory.
    AnalyzeAttn(AnalyzeAttnArgs),
    /// Residual gate values over a timestep grid.
    AnalyzeGates(AnalyzeGatesArgs),
    /// Sampling wall-clock of an expert model against its single-group twin.
    Bench(BenchArgs),
    /// Print a checkpoint's configuration, schedule and parameter census.
    InspectCkpt(InspectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Eval,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Dataset spec (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides `run.out_dir`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SamplerArgs {
    /// Euler steps [default: 40].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Guidance scale [default: 5].
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SamplerArgs {
    pub fn resolve(&self) -> Result<SamplerConfig> {
        let d = SamplerConfig::default();
        let cfg = SamplerConfig {
            steps: self.steps.unwrap_or(d.steps),
            cfg_scale: self.cfg_scale.unwrap_or(d.cfg_scale),
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Class for every sample; cycles through all classes when omitted.
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Generate from this checkpoint and score against its held-out split.
    #[arg(long, conflicts_with = "samples")]
    pub ckpt: Option<PathBuf>,
    /// Score an existing LTTD sample file instead.
    #[arg(long, requires = "real")]
    pub samples: Option<PathBuf>,
    /// Reference LTTD file (default with --ckpt: the checkpoint's eval split).
    #[arg(long)]
    pub real: Option<PathBuf>,
    #[arg(long, default_value_t = 4000)]
    pub n: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Seed for projection directions.
    #[arg(long, default_value_t = 0)]
    pub metric_seed: u64,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeAttnArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long)]
    pub class: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Per-head CSV; the head-mean CSV goes next to it with a `_mean` suffix.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeGatesArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, requires = "vanilla")]
    pub expert: Option<PathBuf>,
    #[arg(long, requires = "expert")]
    pub vanilla: Option<PathBuf>,
    /// Build both models fresh from this run config instead.
    #[arg(long, conflicts_with_all = ["expert", "vanilla"])]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub runs: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
}

/// Training run record written next to the checkpoint.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub steps_completed: u64,
    pub wall_seconds: f64,
    pub threads: usize,
    pub machine: String,
    pub notes: Vec<String>,
    pub config: RunConfig,
}

impl Manifest {
    fn load(path: &Path) -> Option<Self> {
        toml::from_str(&fs::read_to_string(path).ok()?).ok()
    }

    fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        write_file(path, text.as_bytes())
    }
}

fn machine() -> String {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{}, {cores} cores", std::env::consts::OS, std::env::consts::ARCH)
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Input(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the subcommand,
/// returning the process exit code.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return 2;
        }
    };
    let mut out = std::io::stdout().lock();
    match run(cli, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            exit_code(&e)
        }
    }
}

/// Runs a parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::GenData(a) => gen_data(&a, out),
        Command::Train(a) => train(&a, out),
        Command::Sample(a) => sample(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::AnalyzeAttn(a) => analyze_attn(&a, out),
        Command::AnalyzeGates(a) => analyze_gates_cmd(&a, out),
        Command::Bench(a) => bench_cmd(&a, out),
        Command::InspectCkpt(a) => inspect(&a, out),
    }
}

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let text = fs::read_to_string(&a.spec)
        .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", a.spec.display())))?;
    let spec = DatasetSpec::from_text(&text)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Eval => Split::Eval,
    };
    let ds = generate(&spec, split)?;
    let file = DataFile::from_dataset(spec.to_text(), &ds);
    file.save(&a.out)?;
    say(out, &format!("wrote {} samples to {}\n", ds.len(), a.out.display()))
}

fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let config = a.config.as_deref().map(RunConfig::load).transpose()?;
    let (mut trainer, config, resumed) = match (&a.resume, config) {
        (None, None) => return Err(Error::Config("train needs --config or --resume".into())),
        (None, Some(cfg)) => {
            let model = Model::<f32>::build(&cfg.model, &mut Rng::new(cfg.run.seed))?;
            (Trainer::new(model, cfg.train.clone(), cfg.data.clone())?, cfg, None)
        }
        (Some(path), cfg) => {
            let ckpt = match &cfg {
                Some(c) => Checkpoint::load_expecting(path, &c.model)?,
                None => Checkpoint::load(path)?,
            };
            let mut t = Trainer::resume(ckpt)?;
            let cfg = match cfg {
                Some(c) => {
                    t.cfg.steps = c.train.steps;
                    c
                }
                None => RunConfig {
                    model: t.model.config().clone(),
                    train: t.cfg.clone(),
                    data: t.data.clone(),
                    ..RunConfig::default()
                },
            };
            (t, cfg, Some(path.clone()))
        }
    };
    let dir = match (&a.out_dir, &resumed, &a.config) {
        (Some(d), _, _) => resolve_out(d),
        (None, Some(p), None) => p.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
        _ => config.out_dir(),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest = match &resumed {
        Some(_) => Manifest::load(&manifest_path).unwrap_or_default(),
        None => Manifest::default(),
    };
    manifest.config = config.clone();
    manifest.threads = rayon::current_num_threads();
    manifest.machine = machine();

    let start_step = trainer.step_count();
    if let Some(p) = &resumed {
        let note = if start_step >= trainer.cfg.steps {
            format!("resumed from {} at step {start_step}: already complete", p.display())
        } else {
            format!("resumed from {} at step {start_step}", p.display())
        };
        manifest.notes.push(note);
    }
    if start_step >= trainer.cfg.steps {
        manifest.save(&manifest_path)?;
        return say(out, &format!("nothing to do: checkpoint is at step {start_step}\n"));
    }

    let metrics_path = dir.join(METRICS_FILE);
    let append = resumed.is_some() && metrics_path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = MetricsLog::new(BufWriter::new(file), !append).map_err(|e| Error::io(&metrics_path, e))?;
    let every = trainer.cfg.log_every.max(1);
    let ckpt_every = trainer.cfg.checkpoint_every;
    let started = Instant::now();
    trainer.run(|t, m| {
        if m.step % every == 0 || m.step == t.cfg.steps {
            log.record(m).map_err(|e| Error::io(&metrics_path, e))?;
        }
        if ckpt_every > 0 && m.step % ckpt_every == 0 && m.step != t.cfg.steps {
            t.checkpoint()?.save(&dir.join(format!("ckpt_{:08}.ltte", m.step)))?;
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    trainer.checkpoint()?.save(&ckpt_path)?;
    let wall = started.elapsed().as_secs_f64();
    manifest.steps_completed = trainer.step_count();
    manifest.wall_seconds += wall;
    manifest.save(&manifest_path)?;
    let losses: Vec<String> = trainer
        .running_loss()
        .iter()
        .map(|l| l.map_or("-".into(), |v| format!("{v:.4}")))
        .collect();
    say(
        out,
        &format!(
            "trained steps {}..{} in {wall:.1}s; running loss per group [{}]; checkpoint {}\n",
            start_step,
            trainer.step_count(),
            losses.join(", "),
            ckpt_path.display()
        ),
    )
}

fn labels_for(n: usize, class: Option<usize>, classes: usize) -> Result<Vec<Option<usize>>> {
    if n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    if let Some(c) = class.filter(|&c| c >= classes) {
        return Err(Error::Input(format!("class {c} is out of range for {classes} classes")));
    }
    Ok((0..n).map(|i| Some(class.unwrap_or(i % classes))).collect())
}

fn sample(a: &SampleArgs, out: &mut dyn Write) -> Result<()> {
    let sampler = a.sampler.resolve()?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let model = &ckpt.model;
    let mc = model.config();
    let labels = labels_for(a.n, a.class, mc.num_classes)?;
    let before = model.layer_executions();
    let mut data = crate::eval::generate(model, &labels, &sampler)?.to_f64_vec();
    if let Some(norm) = &ckpt.meta.normalizer {
        norm.denormalize(&mut data);
    }
    let summary = format!(
        "checkpoint = {:?}\nn = {}\nclass = {}\nsteps = {}\ncfg_scale = {}\nseed = {}\nlayer_executions = {}\n",
        a.ckpt.display().to_string(),
        a.n,
        a.class.map_or("\"all\"".to_string(), |c| c.to_string()),
        sampler.steps,
        sampler.cfg_scale,
        sampler.seed,
        model.layer_executions() - before
    );
    let ds = Dataset {
        samples: data,
        labels: labels.iter().map(|l| l.unwrap_or(0)).collect(),
        tokens: mc.tokens(),
        latent: mc.latent_dim,
    };
    DataFile::from_dataset(summary.clone(), &ds).save(&a.out)?;
    let summary_path = a.out.with_extension("summary.toml");
    write_file(&summary_path, summary.as_bytes())?;
    say(out, &summary)
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let text = if let Some(path) = &a.samples {
        let fake = DataFile::load(path)?.to_dataset();
        let real_path = a.real.as_ref().expect("clap enforces --real");
        let real = DataFile::load(real_path)?.to_dataset();
        if fake.dim() != real.dim() {
            return Err(Error::Input(format!(
                "sample dims differ: {} vs {}",
                fake.dim(),
                real.dim()
            )));
        }
        let dim = real.dim();
        let sw = sliced_w2(
            &fake.samples,
            &real.samples,
            dim,
            DEFAULT_PROJECTIONS,
            &mut Rng::new(a.metric_seed),
        )?;
        let bw = median_bandwidth(&real.samples, dim, 1000)?;
        let mmd = if fake.len() >= 2 && real.len() >= 2 {
            clamp_report(mmd_rbf(&fake.samples, &real.samples, dim, bw)?)
        } else {
            f64::NAN
        };
        format!(
            "sliced_w2 = {sw}\nmmd_rbf = {mmd}\nn_samples = {}\nn_real = {}\n",
            fake.len(),
            real.len()
        )
    } else if let Some(path) = &a.ckpt {
        let sampler = a.sampler.resolve()?;
        let ckpt = Checkpoint::load(path)?;
        let spec = ckpt.meta.data.clone();
        let real = match (&a.real, &spec) {
            (Some(p), _) => DataFile::load(p)?.to_dataset(),
            (None, Some(s)) => generate(s, Split::Eval)?,
            (None, None) => return Err(Error::Input("checkpoint has no dataset spec; pass --real".into())),
        };
        let norm = match &ckpt.meta.normalizer {
            Some(n) => n.clone(),
            None => crate::data::Normalizer {
                mean: vec![0.0; real.dim()],
                std: 1.0,
            },
        };
        let centers = spec.as_ref().and_then(|s| s.class_centers());
        let report = evaluate(
            &ckpt.model,
            &norm,
            &real,
            centers.as_deref(),
            &sampler,
            a.n,
            a.metric_seed,
        )?;
        report.to_text()
    } else {
        return Err(Error::Config("eval needs --ckpt or --samples with --real".into()));
    };
    if let Some(p) = &a.out {
        write_file(p, text.as_bytes())?;
    }
    say(out, &text)
}

fn analyze_attn(a: &AnalyzeAttnArgs, out: &mut dyn Write) -> Result<()> {
    let sampler = a.sampler.resolve()?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let mc = ckpt.model.config();
    let labels = labels_for(a.n, a.class, mc.num_classes)?;
    let rows = analyze_similarity(&ckpt.model, &sampler, &labels)?;
    write_file(&a.out, similarity_csv(&rows).as_bytes())?;
    let stem = a
        .out
        .file_stem()
        .map_or("similarity".into(), |s| s.to_string_lossy().into_owned());
    let mean_path = a.out.with_file_name(format!("{stem}_mean.csv"));
    write_file(&mean_path, head_mean_csv(&rows, mc.heads).as_bytes())?;
    say(
        out,
        &format!(
            "wrote {} rows to {} and {}\n",
            rows.len(),
            a.out.display(),
            mean_path.display()
        ),
    )
}

fn analyze_gates_cmd(a: &AnalyzeGatesArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let rows = analyze_gates(&ckpt.model)?;
    write_file(&a.out, gates_csv(&rows).as_bytes())?;
    say(out, &format!("wrote {} rows to {}\n", rows.len(), a.out.display()))
}

fn bench_cmd(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let sampler = a.sampler.resolve()?;
    let (expert, vanilla) = match (&a.expert, &a.vanilla, &a.config) {
        (Some(e), Some(v), None) => (Checkpoint::load(e)?.model, Checkpoint::load(v)?.model),
        (None, None, Some(c)) => {
            let cfg = RunConfig::load(c)?;
            (
                Model::build(&cfg.model, &mut Rng::new(cfg.run.seed))?,
                Model::build(&cfg.model.vanilla(), &mut Rng::new(cfg.run.seed))?,
            )
        }
        _ => return Err(Error::Config("bench needs --expert and --vanilla, or --config".into())),
    };
    let report = bench(&expert, &vanilla, &sampler, a.runs, a.warmup)?;
    say(out, &report.to_text())
}

fn inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let m = &ckpt.model;
    let mc = m.config();
    let s = m.schedule();
    let mut text = format!(
        "step: {}\ngroups (K): {}\nlayers per group (M): {}\nlayers (L): {}\nvariant: {:?}\n",
        ckpt.step,
        s.groups,
        s.group_size(),
        s.layers,
        mc.variant
    );
    text.push_str("intervals (group: inference | training):\n");
    for k in 0..s.groups {
        let (i, t) = (s.infer_intervals[k], s.train_intervals[k]);
        text.push_str(&format!("  {k}: [{}, {}] | [{}, {}]\n", i.hi, i.lo, t.hi, t.lo));
    }
    text.push_str("census:\n");
    for (name, shape, trainable, role) in m.census() {
        let flag = if trainable { "trainable" } else { "frozen" };
        text.push_str(&format!("  {name} {shape:?} {flag} {role:?}\n"));
    }
    text.push_str(&format!(
        "parameters: {} total, {} trainable\n",
        m.params().numel(),
        m.params().trainable_numel()
    ));
    for k in 0..s.groups {
        text.push_str(&format!(
            "activated parameters per step, group {k}: {}\n",
            m.activated_params_per_step(k)?
        ));
    }
    text.push_str("[model]\n");
    text.push_str(&mc.to_text());
    say(out, &text)
}
