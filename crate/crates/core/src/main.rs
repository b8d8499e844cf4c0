use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use dualdist::dtrans::{
    approx_dt_value, exact_edt, exact_signed, r2s_value, roundtrip_mask, s2r_value, RoundTripMode, TransformConfig,
};
use dualdist::engine::{evaluate_net, run_experiment, ExperimentReport, RunConfig};
use dualdist::losses::checks::{gradient_suites, GRAD_TOL};
use dualdist::losses::LossReport;
use dualdist::metrics::{dice_precision_recall, spearman};
use dualdist::synth::Dataset;
use dualdist::volio::{self, VolContainer, VolError};
use dualdist::Tensor;

#[derive(Parser)]
#[command(name = "dualdist", version, about = "Differentiable distance-map transforms and dual-task SSL training")]
struct Cli {
    /// Print failures as one JSON object on stderr
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a distance transform op to a stored volume
    Transform {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: TransformMode,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// run s2r at the configured down_rate
        #[arg(long)]
        resampled: bool,
    },
    /// Mask -> signed map -> mask fidelity per case
    Roundtrip {
        #[arg(long)]
        dataset: PathBuf,
        /// offline-original, online-original, offline-resample, online-resample or all
        #[arg(long, default_value = "all")]
        mode: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// exit 4 when a mode's mean DSC is below this
        #[arg(long)]
        min_dsc: Option<f64>,
    },
    /// Finite-difference gradient suites
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate the final checkpoint
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sliding-window evaluation of a run's final checkpoint
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Approximate vs exact distance transform across sizes and rates
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![16, 24, 32, 48])]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 0.5, 0.25])]
        rates: Vec<f64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TransformMode {
    S2r,
    R2s,
    Edt,
    Signed,
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Config,
    Io,
    Check,
}

impl Kind {
    fn code(self) -> u8 {
        match self {
            Kind::Config => 2,
            Kind::Io => 3,
            Kind::Check => 4,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Kind::Config => "invalid_config",
            Kind::Io => "io_failure",
            Kind::Check => "check_failure",
        }
    }
}

struct Failure {
    kind: Kind,
    msg: String,
}

type CliResult<T = ()> = Result<T, Failure>;

fn config_err(e: impl ToString) -> Failure {
    Failure {
        kind: Kind::Config,
        msg: e.to_string(),
    }
}

fn io_err(e: impl ToString) -> Failure {
    Failure {
        kind: Kind::Io,
        msg: e.to_string(),
    }
}

fn check_err(e: impl ToString) -> Failure {
    Failure {
        kind: Kind::Check,
        msg: e.to_string(),
    }
}

/// Library errors: bad settings are config errors, anything else a failed
/// computation.
fn lib_err(e: dualdist::Error) -> Failure {
    match e {
        dualdist::Error::InvalidConfig(_) | dualdist::Error::EvenKernel(_) | dualdist::Error::NonPositiveBandwidth(_) => {
            config_err(e)
        }
        other => check_err(other),
    }
}

fn vol_err(e: VolError) -> Failure {
    io_err(e)
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| io_err(format!("{}: {e}", path.display())))?;
    volio::parse_run_config(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| io_err(format!("{}: {e}", path.display())))
}

fn gen(config: Option<&Path>, out: &Path) -> CliResult {
    let cfg = load_config(config)?;
    let data = Dataset::generate(&cfg.dataset).map_err(lib_err)?;
    volio::save_dataset(out, &data).map_err(vol_err)?;
    println!("wrote {} volumes to {}", data.volumes.len(), out.display());
    Ok(())
}

fn transform(input: &Path, mode: TransformMode, config: Option<&Path>, out: &Path, resampled: bool) -> CliResult {
    let t = load_config(config)?.transform;
    let vol = volio::read_vol(input).map_err(vol_err)?;
    if vol.dims().len() != 3 {
        return Err(config_err(format!("expected a [d,h,w] volume, got {:?}", vol.dims())));
    }
    let x = vol.to_f64();
    let result = match mode {
        TransformMode::S2r => s2r_value(&x, &t, resampled),
        TransformMode::R2s => Ok(r2s_value(&x, t.steepness)),
        TransformMode::Edt => exact_edt(&vol.to_mask()),
        TransformMode::Signed => exact_signed(&vol.to_mask()),
    }
    .map_err(lib_err)?;
    let name = match mode {
        TransformMode::S2r => "s2r",
        TransformMode::R2s => "r2s",
        TransformMode::Edt => "edt",
        TransformMode::Signed => "signed",
    };
    let out_vol = match vol.data().dtype() {
        volio::Dtype::F64 => VolContainer::from_f64(name, &result),
        _ => VolContainer::from_f32(name, &result.cast()),
    }
    .map_err(vol_err)?;
    volio::write_vol(out, &out_vol).map_err(vol_err)
}

fn roundtrip(dataset: &Path, mode: &str, config: Option<&Path>, report: &Path, min_dsc: Option<f64>) -> CliResult {
    let t = load_config(config)?.transform;
    let modes: Vec<RoundTripMode> = if mode == "all" {
        RoundTripMode::ALL.to_vec()
    } else {
        mode.split(',').map(|m| m.parse().map_err(lib_err)).collect::<CliResult<_>>()?
    };
    let data = volio::load_dataset(dataset).map_err(vol_err)?;
    let mut csv = String::from("case,mode,dsc,seconds,differentiable\n");
    let mut failed = Vec::new();
    for m in modes {
        let mut sum = 0.0;
        for (i, v) in data.volumes.iter().enumerate() {
            let start = Instant::now();
            let back = roundtrip_mask(&v.mask, m, &t).map_err(lib_err)?;
            let secs = start.elapsed().as_secs_f64();
            let (dsc, _, _) = dice_precision_recall(&back, &v.mask).map_err(lib_err)?;
            sum += dsc;
            let _ = writeln!(csv, "{i},{m},{dsc:.6},{secs:.4},{}", m.differentiable());
        }
        let mean = sum / data.volumes.len().max(1) as f64;
        println!("{m}: mean DSC {mean:.4} over {} cases", data.volumes.len());
        if min_dsc.is_some_and(|lo| mean < lo) {
            failed.push(format!("{m} mean DSC {mean:.4}"));
        }
    }
    write_text(report, &csv)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(check_err(format!("below --min-dsc: {}", failed.join(", "))))
    }
}

fn gradcheck(config: Option<&Path>, seed: u64) -> CliResult {
    let cfg = load_config(config)?;
    let suites = gradient_suites(&cfg.transform, &cfg.loss, seed).map_err(lib_err)?;
    let mut failed = Vec::new();
    for s in &suites {
        let c = &s.check;
        let status = if s.passes() { "ok" } else { "FAIL" };
        println!(
            "{:<11} {status:<4} max_rel_error {:.3e} checked {} skipped {}",
            s.name, c.max_rel_error, c.checked, c.skipped
        );
        if !s.passes() {
            failed.push(s.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(check_err(format!("gradient check above {GRAD_TOL:e}: {}", failed.join(", "))))
    }
}

fn train(config: Option<&Path>, out: &Path) -> CliResult {
    let cfg = load_config(config)?;
    volio::create_dir(out).map_err(vol_err)?;
    volio::write_json(&out.join("config.json"), &cfg).map_err(vol_err)?;
    let mut rows: Vec<LossReport> = Vec::with_capacity(cfg.train.max_iterations);
    let every = (cfg.train.max_iterations / 20).max(1);
    let start = Instant::now();
    let exp = run_experiment(&cfg, |r| {
        if (r.iteration + 1) % every == 0 {
            eprintln!(
                "iter {:>6}  total {:.4}  beta {:.4}  mask {:.3}  {:.0}s",
                r.iteration + 1,
                r.total,
                r.beta,
                r.mask_fraction,
                start.elapsed().as_secs_f64()
            );
        }
        rows.push(r.clone());
    })
    .map_err(lib_err)?;
    volio::write_loss_csv(&out.join("loss.csv"), &rows).map_err(vol_err)?;
    volio::save_checkpoint(&out.join("checkpoint"), &exp.net, exp.report.iterations).map_err(vol_err)?;
    volio::write_report(&out.join("report.json"), &exp.report).map_err(vol_err)?;
    print_eval(&exp.report);
    Ok(())
}

fn print_eval(r: &ExperimentReport) {
    let t = &r.eval.test_mean;
    let u = &r.eval.unlabeled_mean;
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    println!(
        "test: dice {:.4} asd {} hd95 {} (n={})",
        t.dice,
        opt(t.asd),
        opt(t.hd95),
        t.n
    );
    println!(
        "unlabeled: dice {:.4} recall {:.4} precision {:.4} (n={})",
        u.dice, u.recall, u.precision, u.n
    );
}

fn eval(run: &Path, dataset: &Path) -> CliResult {
    let cfg: RunConfig = volio::read_json(&run.join("config.json")).map_err(vol_err)?;
    cfg.validate().map_err(lib_err)?;
    let (net, iteration) = volio::load_checkpoint(&run.join("checkpoint")).map_err(vol_err)?;
    let data = volio::load_dataset(dataset).map_err(vol_err)?;
    let eval = evaluate_net(&net, &data, &cfg.train).map_err(lib_err)?;
    volio::write_json(&run.join("eval.json"), &eval).map_err(vol_err)?;
    let t = &eval.test_mean;
    println!("checkpoint at iteration {iteration}: test dice {:.4} (n={})", t.dice, t.n);
    Ok(())
}

struct BenchRow {
    size: usize,
    down_rate: f64,
    mae: f64,
    spearman: f64,
    approx_seconds: f64,
    exact_seconds: f64,
}

fn bench(config: Option<&Path>, sizes: &[usize], rates: &[f64], report: Option<&Path>) -> CliResult {
    let t = load_config(config)?.transform;
    let mut csv = String::from("size,down_rate,mae,spearman,approx_seconds,exact_seconds\n");
    println!("{:>5} {:>6} {:>8} {:>9} {:>10} {:>10}", "size", "rate", "mae", "spearman", "approx_s", "exact_s");
    for &n in sizes {
        let mask = two_balls(n);
        let start = Instant::now();
        let exact = exact_edt(&mask).map_err(lib_err)?;
        let exact_s = start.elapsed().as_secs_f64();
        for &rate in rates {
            let mut tc = t.clone();
            tc.down_rate = rate.min(1.0);
            let start = Instant::now();
            let approx = if rate >= 1.0 {
                approx_dt_value(&mask.to_float::<f64>(), &tc)
            } else {
                approx_resampled(&mask, &tc)
            }
            .map_err(lib_err)?;
            let approx_s = start.elapsed().as_secs_f64();
            let mae = approx.data().iter().zip(exact.data()).map(|(a, b)| (a - b).abs()).sum::<f64>()
                / exact.numel() as f64;
            let rho = spearman(approx.data(), exact.data());
            let row = BenchRow {
                size: n,
                down_rate: rate,
                mae,
                spearman: rho,
                approx_seconds: approx_s,
                exact_seconds: exact_s,
            };
            println!(
                "{:>5} {:>6} {:>8.4} {:>9.4} {:>10.4} {:>10.4}",
                row.size, row.down_rate, row.mae, row.spearman, row.approx_seconds, row.exact_seconds
            );
            let _ = writeln!(csv, "{n},{rate},{mae},{rho},{approx_s},{exact_s}");
        }
    }
    if let Some(p) = report {
        write_text(p, &csv)?;
    }
    Ok(())
}

/// Union of two overlapping balls in an `n³` cube.
fn two_balls(n: usize) -> Tensor<bool> {
    let f = n as f64;
    let balls = [([0.4 * f, 0.4 * f, 0.45 * f], 0.22 * f), ([0.6 * f, 0.58 * f, 0.55 * f], 0.18 * f)];
    Tensor::from_fn(&[n, n, n], |i| {
        let p = [(i / (n * n)) as f64, ((i / n) % n) as f64, (i % n) as f64];
        balls
            .iter()
            .any(|(c, r)| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= r * r)
    })
}

/// Distance transform on a downsampled grid, upsampled and rescaled back to
/// full-resolution voxel units.
fn approx_resampled(mask: &Tensor<bool>, t: &TransformConfig) -> dualdist::Result<Tensor<f64>> {
    use dualdist::dtrans::scaled_dims;
    use dualdist::Tape;
    let dims = mask.spatial_dims();
    let small_dims = scaled_dims(dims, t.down_rate);
    let mut tape = Tape::new();
    let x = tape.constant(mask.to_float::<f64>().reshape(&[1, 1, dims[0], dims[1], dims[2]])?);
    let s = tape.resample(x, small_dims)?;
    let small = tape.value(s).clone().reshape(&small_dims)?;
    let d = approx_dt_value(&small, t)?;
    let mut tape = Tape::new();
    let dv = tape.constant(d.reshape(&[1, 1, small_dims[0], small_dims[1], small_dims[2]])?);
    let up = tape.resample(dv, dims)?;
    let scale = dims[0] as f64 / small_dims[0] as f64;
    Ok(tape.value(up).clone().reshape(&dims)?.map(|v| v * scale))
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Gen { config, out } => gen(config.as_deref(), out),
        Command::Transform {
            input,
            mode,
            config,
            out,
            resampled,
        } => transform(input, *mode, config.as_deref(), out, *resampled),
        Command::Roundtrip {
            dataset,
            mode,
            config,
            report,
            min_dsc,
        } => roundtrip(dataset, mode, config.as_deref(), report, *min_dsc),
        Command::Gradcheck { config, seed } => gradcheck(config.as_deref(), *seed),
        Command::Train { config, out } => train(config.as_deref(), out),
        Command::Eval { run, dataset } => eval(run, dataset),
        Command::Bench {
            config,
            sizes,
            rates,
            report,
        } => bench(config.as_deref(), sizes, rates, report.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if cli.json_errors {
                let obj = serde_json::json!({ "error": f.kind.label(), "code": f.kind.code(), "message": f.msg });
                eprintln!("{obj}");
            } else {
                eprintln!("error: {}", f.msg);
            }
            ExitCode::from(f.kind.code())
        }
    }
}
