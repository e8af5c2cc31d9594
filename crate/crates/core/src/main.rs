use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tsinv_core::attacks::{run_attack, AttackConfig, AttackMethod, AttackResult, Distance, Optimizer};
use tsinv_core::data::{prepare, read_csv, synth_series, PreparedData, SynthConfig, WindowingSpec};
use tsinv_core::eval::{emit_plots, match_batch, run_grid, ExperimentGrid, PlotInput};
use tsinv_core::federation::{capture_round, sample_batch, ClientTruth, Defense, GradientCapture};
use tsinv_core::inversion::{train_finv, train_lti, InvNetSpec, TrainedNet, DEFAULT_LEVELS};
use tsinv_core::io;
use tsinv_core::models::{Architecture, Checkpoint, ModelSpec};
use tsinv_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tsinv", version, about = "Gradient inversion attacks on federated time-series forecasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset preparation.
    #[command(subcommand)]
    Data(DataCmd),
    /// Forecasting model checkpoints.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Simulate one client round and record the shared gradient.
    Capture(CaptureArgs),
    /// Quantile-bound inversion network.
    #[command(subcommand)]
    Finv(TrainCmd),
    /// Learned direct-regression baseline.
    #[command(subcommand)]
    Lti(TrainCmd),
    /// Reconstruct a client batch from a capture.
    Attack(AttackArgs),
    /// Score a reconstruction against the capture's ground truth.
    Eval(EvalArgs),
    /// Experiment grids.
    #[command(subcommand)]
    Grid(GridCmd),
    /// Draw reconstructions next to the ground truth as SVG.
    Plot(PlotArgs),
}

#[derive(Subcommand)]
enum DataCmd {
    Prepare(PrepareArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// CSV with a timestamp column and a value column.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    input: Option<PathBuf>,
    /// Generate a daily-periodic synthetic series instead of reading a CSV.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    h: usize,
    #[arg(long)]
    f: usize,
    #[arg(long, default_value_t = 1)]
    step_attack: usize,
    #[arg(long, default_value_t = 1)]
    step_aux: usize,
    /// Synthetic series length.
    #[arg(long, default_value_t = 2400)]
    length: usize,
    /// Synthetic period in samples.
    #[arg(long, default_value_t = 24)]
    period: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ModelCmd {
    Init(ModelInitArgs),
}

#[derive(Args)]
struct ModelInitArgs {
    #[arg(long)]
    arch: Architecture,
    #[arg(long)]
    h: usize,
    #[arg(long)]
    f: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DefenseArgs {
    #[arg(long, default_value = "none", value_parser = ["none", "gauss", "prune", "sign"])]
    defense: String,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    prune_ratio: Option<f64>,
}

impl DefenseArgs {
    fn build(&self) -> Result<Defense> {
        Defense::from_name(&self.defense, self.noise_std, self.prune_ratio)
    }
}

#[derive(Args)]
struct CaptureArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory written by `data prepare`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[command(flatten)]
    defense: DefenseArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum TrainCmd {
    Train(TrainArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `data prepare`; its auxiliary split is used.
    #[arg(long)]
    aux: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Defaults to 75 for the bounds net and 250 for the baseline.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LEVELS.to_vec())]
    quantiles: Vec<f64>,
    /// Batch size of the captures the net will face.
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[command(flatten)]
    defense: DefenseArgs,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    samples_per_epoch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    capture: PathBuf,
    /// Model checkpoint; defaults to the one recorded in the capture.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    method: AttackMethod,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    distance: Option<Distance>,
    #[arg(long, value_parser = ["adam", "lbfgs"])]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lp: Option<f64>,
    #[arg(long)]
    lt: Option<f64>,
    #[arg(long)]
    lq_obs: Option<f64>,
    #[arg(long)]
    lq_tar: Option<f64>,
    #[arg(long)]
    ltv_obs: Option<f64>,
    #[arg(long)]
    ltv_tar: Option<f64>,
    #[arg(long)]
    period: Option<usize>,
    /// Trained bounds net (or, for lti, the baseline net).
    #[arg(long, alias = "net")]
    bounds: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    result: PathBuf,
    #[arg(long)]
    capture: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum GridCmd {
    Run(GridRunArgs),
}

#[derive(Args)]
struct GridRunArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    result: PathBuf,
    /// Defaults to the capture recorded in the result.
    #[arg(long)]
    capture: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Data(DataCmd::Prepare(a)) => data_prepare(a),
        Command::Model(ModelCmd::Init(a)) => model_init(a),
        Command::Capture(a) => capture(a),
        Command::Finv(TrainCmd::Train(a)) => train_net(a, false),
        Command::Lti(TrainCmd::Train(a)) => train_net(a, true),
        Command::Attack(a) => attack(a),
        Command::Eval(a) => eval(a),
        Command::Grid(GridCmd::Run(a)) => grid(a),
        Command::Plot(a) => plot(a),
    }
}

fn data_prepare(a: PrepareArgs) -> Result<()> {
    let series = match &a.input {
        Some(path) => read_csv(path)?,
        None => synth_series(&SynthConfig::new(a.seed, a.length, a.period))?,
    };
    let spec = WindowingSpec::new(a.h, a.f, a.step_attack, a.step_aux)?;
    let data = prepare(&series, spec, &a.out)?;
    println!(
        "prepared {}: {} attack windows ({} in pool), {} aux windows ({} in D_aux) -> {}",
        data.manifest.series,
        data.attack.windows.len(),
        data.attack_pool().len(),
        data.aux.windows.len(),
        data.aux_set().len(),
        a.out.display()
    );
    Ok(())
}

fn model_init(a: ModelInitArgs) -> Result<()> {
    let spec = ModelSpec::new(a.arch, a.h, a.f).with_hidden(a.hidden).with_seed(a.seed);
    let ckpt = Checkpoint::init(spec)?;
    ckpt.save(&a.out)?;
    println!(
        "{} with {} parameters, model_ref {} -> {}",
        a.arch,
        ckpt.model.param_count(),
        ckpt.model_ref(),
        a.out.display()
    );
    Ok(())
}

fn absolute(p: &Path) -> String {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string()
}

fn capture(a: CaptureArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.model)?;
    let data = PreparedData::load(&a.data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let batch = sample_batch(data.attack_pool(), a.batch_size, &mut rng)?;
    let (mut cap, truth) = capture_round(&ckpt, batch, a.defense.build()?, a.seed)?;
    cap.model_path = Some(absolute(&a.model));
    cap.save(&a.out)?;
    truth.save(&io::sidecar(&a.out, ".truth"))?;
    println!(
        "captured B={} ({} gradient entries, defense {}) -> {}",
        cap.batch_size,
        cap.grads.len(),
        cap.defense.name(),
        a.out.display()
    );
    Ok(())
}

fn train_net(a: TrainArgs, direct: bool) -> Result<()> {
    let ckpt = Checkpoint::load(&a.model)?;
    let data = PreparedData::load(&a.aux)?;
    let ms = ckpt.model.spec();
    let m = ckpt.model.param_count();
    let mut spec = if direct {
        InvNetSpec::direct(m, ms.obs_len, ms.horizon, a.batch_size)
    } else {
        InvNetSpec::quantile(m, ms.obs_len, ms.horizon, a.batch_size, a.quantiles.clone())
    };
    if let Some(e) = a.epochs {
        spec.epochs = e;
    }
    if let Some(h) = a.hidden.clone() {
        spec.hidden = h;
    }
    spec.samples_per_epoch = a.samples_per_epoch;
    let defense = a.defense.build()?;
    let net = if direct {
        train_lti(data.aux_set(), &ckpt, defense, spec, a.seed)?
    } else {
        train_finv(data.aux_set(), &ckpt, defense, spec, a.seed)?
    };
    net.save(&a.out)?;
    let last = net.record.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} epochs, final loss {last:.6} -> {}",
        net.record.epoch_losses.len(),
        a.out.display()
    );
    Ok(())
}

fn model_for(cap: &GradientCapture, flag: Option<&Path>) -> Result<Checkpoint> {
    let path = match (flag, &cap.model_path) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => return Err(Error::Config("capture does not record its model; pass --model".into())),
    };
    Checkpoint::load(&path)
}

fn attack(a: AttackArgs) -> Result<()> {
    let cap = GradientCapture::load(&a.capture)?;
    let ckpt = model_for(&cap, a.model.as_deref())?;
    let mut result = if a.method == AttackMethod::Lti {
        let path = a.bounds.as_ref().ok_or_else(|| Error::Config("lti needs --net <trained baseline>".into()))?;
        TrainedNet::load(path)?.lti_attack(&cap)?
    } else {
        let mut cfg = AttackConfig::preset(a.method, ckpt.model.spec().architecture)?;
        cfg.seed = a.seed;
        if let Some(v) = a.steps {
            cfg.steps = v;
        }
        if let Some(v) = a.distance {
            cfg.distance = v;
        }
        if let Some(v) = &a.optimizer {
            cfg.optimizer = if v == "lbfgs" { Optimizer::Lbfgs } else { Optimizer::Adam };
        }
        if let Some(v) = a.lr {
            cfg.learning_rate = v;
        }
        let lambdas = [
            (a.lp, &mut cfg.lambda_p),
            (a.lt, &mut cfg.lambda_t),
            (a.lq_obs, &mut cfg.lambda_q_obs),
            (a.lq_tar, &mut cfg.lambda_q_tar),
            (a.ltv_obs, &mut cfg.lambda_tv_obs),
            (a.ltv_tar, &mut cfg.lambda_tv_tar),
        ];
        for (flag, slot) in lambdas {
            if let Some(v) = flag {
                *slot = v;
            }
        }
        if let Some(p) = a.period {
            cfg.period = p;
        }
        if let Some(path) = &a.bounds {
            cfg.bounds = Some(TrainedNet::load(path)?.predict_bounds(&cap)?);
        }
        run_attack(&cap, &ckpt, &cfg)?
    };
    result.capture = Some(absolute(&a.capture));
    result.save(&a.out)?;
    match &result.aborted {
        Some(reason) => println!("{} aborted ({reason}); best iterate saved -> {}", a.method, a.out.display()),
        None => println!(
            "{} finished: best loss {:.3e} at step {} in {:.2}s -> {}",
            a.method,
            result.best_loss,
            result.best_step,
            result.wall_time_s,
            a.out.display()
        ),
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let result = AttackResult::load(&a.result)?;
    let cap = GradientCapture::load(&a.capture)?;
    let truth = ClientTruth::load_batch(&io::sidecar(&a.capture, ".truth"), &cap)?;
    let report = match_batch(&result.recon_obs, &result.recon_tar, &truth.obs, &truth.tar)?;
    io::write_json(&a.out, &report)?;
    println!(
        "sMAPE obs {:.6} tar {:.6} | MAE obs {:.6} tar {:.6}{}",
        report.smape_obs,
        report.smape_tar,
        report.mae_obs,
        report.mae_tar,
        if report.greedy { " (greedy matching)" } else { "" }
    );
    Ok(())
}

fn grid(a: GridRunArgs) -> Result<()> {
    let g = ExperimentGrid::load(&a.config)?;
    let report = run_grid(&g)?;
    println!(
        "{} cells run, {} reused, {} failed; {} rows -> {}",
        report.computed,
        report.skipped,
        report.failed,
        report.rows.len(),
        g.out_dir.join("results.csv").display()
    );
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    let result = AttackResult::load(&a.result)?;
    let cap_path = match (&a.capture, &result.capture) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => {
            let p = PathBuf::from(p);
            if p.is_relative() {
                a.result.parent().unwrap_or(Path::new(".")).join(p)
            } else {
                p
            }
        }
        (None, None) => return Err(Error::Config("result does not record its capture; pass --capture".into())),
    };
    let cap = GradientCapture::load(&cap_path)?;
    let truth = ClientTruth::load_batch(&io::sidecar(&cap_path, ".truth"), &cap)?;
    let report = match_batch(&result.recon_obs, &result.recon_tar, &truth.obs, &truth.tar)?;
    let name = a
        .result
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "result".into());
    let paths = emit_plots(
        &[PlotInput {
            name,
            recon_obs: result.recon_obs,
            recon_tar: result.recon_tar,
            true_obs: truth.obs,
            true_tar: truth.tar,
            permutation: Some(report.permutation),
            bounds: result.config.and_then(|c| c.bounds),
        }],
        &a.out,
    )?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}
