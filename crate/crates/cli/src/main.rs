//! `spamoe`: analysis, decomposition, routing, theorem checks, data
//! generation, training and benchmarks from the command line.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error, 3 bound violation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use spamoe_core::bands::{decompose, BandMaskSet, MaskKind};
use spamoe_core::config::{parse_size, RunConfig};
use spamoe_core::encoder::measure_interp_response;
use spamoe_core::eval::eval_metrics;
use spamoe_core::experts::{Expert, FnoConfig, FnoParams, LnoConfig, LnoParams, MnoConfig, MnoParams};
use spamoe_core::io::{read_field, read_tensor, write_pgm16, write_tensor};
use spamoe_core::metrics::{band_energies, RadialGrid, DEFAULT_EPS, DEFAULT_R_SPLIT};
use spamoe_core::params::ParamSet;
use spamoe_core::router::{energy_map, route, RouterKind, RouterParams, DEFAULT_AGG_HIDDEN, DEFAULT_DK, DEFAULT_TOP_K};
use spamoe_core::synth::{gen_field, FieldKind, FieldSpec};
use spamoe_core::theory::{theorem1_suite, theorem2_suite};
use spamoe_core::train::{evaluate, load_checkpoint, toy_dataset, train_toy, DataConfig};
use spamoe_core::{Error, Field2D, LatentTensor, Tensor};

#[derive(Parser)]
#[command(name = "spamoe", version, about = "Spectral band decomposition, routing and operator experts for 2D fields")]
struct Cli {
    /// Worker threads; defaults to SPAMOE_THREADS, then to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Band energies and HL ratio of a field.
    Analyze(AnalyzeArgs),
    /// Splits a latent tensor or field into radial bands.
    Decompose(DecomposeArgs),
    /// Router logits and Top-k decision for a latent tensor.
    Route(RouteArgs),
    /// Checks one of the HL-ratio bounds over many constructed cases.
    Verify(VerifyArgs),
    /// Writes a synthetic field.
    Gen(GenArgs),
    /// Trains on synthetic data.
    Train(TrainArgs),
    /// MAE, RMSE and SSIM of a prediction, or of a checkpoint on toy data.
    Eval(EvalArgs),
    /// Frequency response of a bilinear down-up cycle.
    MeasureInterp(InterpArgs),
    /// Forward throughput of each expert.
    ExpertBench(BenchArgs),
    /// Frequency preferences and band affinities of a checkpoint.
    InspectPrefs(PrefsArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    field: PathBuf,
    #[arg(long, default_value_t = DEFAULT_R_SPLIT)]
    r_split: f64,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
}

#[derive(Args)]
struct DecomposeArgs {
    input: PathBuf,
    #[arg(short = 'K', long = "bands", default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 20.0)]
    gamma: f64,
    #[arg(long, default_value = "soft")]
    kind: MaskKind,
    /// Rescale soft masks to sum to one at every bin.
    #[arg(long)]
    normalized: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RouteArgs {
    input: PathBuf,
    /// Checkpoint directory; without it a freshly initialized router is used.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Route with this router kind instead of the checkpoint's.
    #[arg(long)]
    baseline: Option<RouterKind>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Initialization seed for routers not taken from a checkpoint.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    theorem: u8,
    #[arg(long, default_value_t = 500)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "32x32", value_parser = size_arg)]
    size: (usize, usize),
    #[arg(long, default_value_t = DEFAULT_R_SPLIT)]
    r_split: f64,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    kind: FieldKind,
    #[arg(long, default_value = "70x70", value_parser = size_arg)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    throw: Option<f64>,
    #[arg(long)]
    curvature: Option<f64>,
    #[arg(long)]
    slope: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write a PGM preview.
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Any config key, as `key=value`; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, requires = "truth", conflicts_with = "model")]
    pred: Option<PathBuf>,
    #[arg(long = "true", id = "truth")]
    truth: Option<PathBuf>,
    /// Checkpoint to evaluate on a freshly generated toy dataset.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
}

#[derive(Args)]
struct InterpArgs {
    #[arg(long, default_value = "70x70", value_parser = size_arg)]
    size: (usize, usize),
    #[arg(long, default_value = "35x35", value_parser = size_arg)]
    mid: (usize, usize),
    #[arg(long, default_value_t = DEFAULT_R_SPLIT)]
    r_split: f64,
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "32x32", value_parser = size_arg)]
    size: (usize, usize),
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PrefsArgs {
    model: PathBuf,
}

fn size_arg(s: &str) -> Result<(usize, usize), String> {
    parse_size(s).map_err(|e| e.to_string())
}

enum Failure {
    Domain(Error),
    Usage(String),
    Violation(Value),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

type Outcome = Result<Value, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let threads = cli.threads.or_else(|| std::env::var("SPAMOE_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("JSON values serialize"));
            ExitCode::SUCCESS
        }
        Err(Failure::Violation(v)) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("JSON values serialize"));
            ExitCode::from(3)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nUsage: spamoe <COMMAND> [OPTIONS]; see `spamoe --help`");
            ExitCode::from(2)
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Analyze(a) => analyze(a),
        Command::Decompose(a) => decompose_cmd(a),
        Command::Route(a) => route_cmd(a),
        Command::Verify(a) => verify(a),
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::MeasureInterp(a) => measure_interp(a),
        Command::ExpertBench(a) => expert_bench(a),
        Command::InspectPrefs(a) => inspect_prefs(a),
    }
}

fn analyze(a: AnalyzeArgs) -> Outcome {
    let u = read_field(&a.field)?;
    let grid = RadialGrid::new(u.height(), u.width(), a.r_split)?;
    let e = band_energies(&u, &grid, a.eps)?;
    Ok(json!({ "e_low": e.e_low, "e_high": e.e_high, "hl": e.hl }))
}

/// Reads a rank-3 latent tensor, or a rank-2 field as a single channel.
fn read_latent(path: &Path) -> Result<LatentTensor, Error> {
    let t = read_tensor(path)?;
    match t.rank() {
        2 => Ok(LatentTensor::from_field(&Field2D::from_tensor(&t)?)),
        _ => LatentTensor::from_tensor(&t),
    }
}

fn decompose_cmd(a: DecomposeArgs) -> Outcome {
    let z = read_latent(&a.input)?;
    let (_, h, w) = z.dims();
    let mut masks = BandMaskSet::build(h, w, a.k, a.gamma, a.kind)?;
    if a.normalized {
        masks = masks.normalized();
    }
    let bands = decompose(&z, &masks)?;
    fs::create_dir_all(&a.out_dir).map_err(Error::from)?;
    let mut files = Vec::new();
    for (k, b) in bands.iter().enumerate() {
        let bin = a.out_dir.join(format!("band_{k}.bin"));
        let pgm = a.out_dir.join(format!("band_{k}_spectrum.pgm"));
        write_tensor(&bin, &b.to_tensor())?;
        write_pgm16(&pgm, &energy_map(b)?)?;
        files.push(json!({ "tensor": bin, "spectrum": pgm }));
    }
    Ok(json!({ "bands": a.k, "centers": masks.centers(), "files": files }))
}

fn route_cmd(a: RouteArgs) -> Outcome {
    let z = read_latent(&a.input)?;
    let fresh = |kind: RouterKind, n_experts: usize| -> Result<(RouterParams, ParamSet), Error> {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let features = if kind == RouterKind::Spectral { 1 } else { z.channels() };
        let p = RouterParams::init(&mut ps, "router", kind, features, DEFAULT_DK, DEFAULT_AGG_HIDDEN, n_experts, &mut rng)?;
        Ok((p, ps))
    };
    let (router, ps, default_k) = match &a.model {
        Some(dir) => {
            let (model, _) = load_checkpoint(dir)?;
            let k = model.config.top_k;
            match a.baseline {
                Some(kind) if kind != model.router.kind => {
                    let (p, ps) = fresh(kind, model.n_experts())?;
                    (p, ps, k)
                }
                _ => (model.router.clone(), model.params, k),
            }
        }
        None => {
            let (p, ps) = fresh(a.baseline.unwrap_or(RouterKind::Spectral), 3)?;
            (p, ps, DEFAULT_TOP_K)
        }
    };
    let d = route(&z, &router, &ps, a.top_k.unwrap_or(default_k))?;
    Ok(json!({ "g": d.logits, "selected": d.selected, "alpha": d.alpha }))
}

fn verify(a: VerifyArgs) -> Outcome {
    let grid = RadialGrid::new(a.size.0, a.size.1, a.r_split)?;
    let report = match a.theorem {
        1 => theorem1_suite(a.cases, &grid, a.eps, a.seed)?,
        _ => theorem2_suite(a.cases, &grid, a.eps, a.seed)?,
    };
    let v = serde_json::to_value(&report).map_err(Error::from)?;
    if report.passed() {
        Ok(v)
    } else {
        Err(Failure::Violation(v))
    }
}

fn gen(a: GenArgs) -> Outcome {
    let mut spec = FieldSpec::new(a.kind, a.size.0, a.size.1, a.seed);
    if let Some(v) = a.layers {
        spec.layers = v;
    }
    if let Some(v) = a.throw {
        spec.throw = v;
    }
    if let Some(v) = a.curvature {
        spec.curvature = v;
    }
    if let Some(v) = a.slope {
        spec.slope = v;
    }
    let f = gen_field(&spec)?;
    write_tensor(&a.out, &f.to_tensor())?;
    if let Some(p) = &a.pgm {
        write_pgm16(p, &f)?;
    }
    Ok(json!({ "out": a.out, "height": f.height(), "width": f.width() }))
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let mut rc = match &a.config {
        Some(p) => RunConfig::parse(&fs::read_to_string(p).map_err(Error::from)?)?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.epochs {
        rc.epochs = v;
    }
    if let Some(v) = a.max_steps {
        rc.max_steps = v;
    }
    if let Some(v) = a.lr {
        rc.lr = v;
    }
    if let Some(v) = a.seed {
        rc.seed = v;
    }
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        rc.set(k.trim(), v.trim())?;
    }
    let cfg = rc.train_config()?;
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    fs::write(a.out.join("run.cfg"), rc.to_text()).map_err(Error::from)?;
    let (_, report) = train_toy(&cfg, Some(&a.out))?;
    Ok(json!({
        "out": a.out,
        "steps": report.steps,
        "epochs": report.epochs.len(),
        "initial": report.initial.metrics,
        "final": report.final_eval.metrics,
        "usage": report.final_eval.usage,
    }))
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    match (&a.pred, &a.truth, &a.model) {
        (Some(p), Some(t), None) => {
            let m = eval_metrics(&read_field(p)?, &read_field(t)?)?;
            Ok(json!({ "mae": m.mae, "rmse": m.rmse, "ssim": m.ssim }))
        }
        (None, None, Some(dir)) => {
            let (model, _) = load_checkpoint(dir)?;
            let mut data = DataConfig::new(a.samples, model.config.h, model.config.w);
            data.seed = a.data_seed;
            let e = evaluate(&model, &toy_dataset(&data)?)?;
            Ok(json!({ "mae": e.metrics.mae, "rmse": e.metrics.rmse, "ssim": e.metrics.ssim }))
        }
        _ => Err(Failure::Usage("eval needs either --pred and --true, or --model".into())),
    }
}

fn measure_interp(a: InterpArgs) -> Outcome {
    let (h, w) = a.size;
    let grid = RadialGrid::new(h, w, a.r_split)?;
    let r = measure_interp_response(h, w, a.mid.0, a.mid.1, &grid)?;
    if let Some(p) = &a.pgm {
        write_pgm16(p, &r.response)?;
    }
    Ok(json!({ "alpha_hat": r.alpha_hat, "beta_hat": r.beta_hat, "bound": r.bound() }))
}

fn expert_bench(a: BenchArgs) -> Outcome {
    let (h, w) = a.size;
    let c = a.channels;
    if a.iters == 0 {
        return Err(Failure::Usage("--iters must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut ps = ParamSet::new();
    let fno = FnoConfig { modes_h: FnoConfig::default().modes_h.min(h), modes_w: FnoConfig::default().modes_w.min(w), ..FnoConfig::default() };
    let experts = [
        Expert::Fno(FnoParams::init(&mut ps, "fno", c, fno, &mut rng)?),
        Expert::Mno(MnoParams::init(&mut ps, "mno", c, MnoConfig::default(), &mut rng)?),
        Expert::Lno(LnoParams::init(&mut ps, "lno", c, LnoConfig::default(), &mut rng)?),
    ];
    let z = LatentTensor::from_tensor(&Tensor::from_fn(&[c, h, w], |i| ((i * 7919) % 1000) as f64 / 1000.0))?;
    let mut rows = Vec::new();
    for e in &experts {
        e.apply(&ps, &z, false)?;
        let t = Instant::now();
        for _ in 0..a.iters {
            e.apply(&ps, &z, false)?;
        }
        let secs = t.elapsed().as_secs_f64();
        rows.push(json!({ "expert": e.kind().name(), "fields_per_sec": a.iters as f64 / secs }));
    }
    Ok(json!({ "size": [h, w], "channels": c, "iters": a.iters, "experts": rows }))
}

fn inspect_prefs(a: PrefsArgs) -> Outcome {
    let (model, _) = load_checkpoint(&a.model)?;
    let masks = model.config.masks()?;
    let pref = model.preferences();
    Ok(json!({ "f": pref.values(), "centers": masks.centers(), "pi": pref.affinity(masks.centers()) }))
}
