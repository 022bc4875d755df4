use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fractal_ir::analysis::{
    analytic_complexity, probe_stack, ComplexityDims, Method, ProbeDepth, RfProbe,
};
use fractal_ir::attention::{gradient_magnitude_experiment, GradExperiment, Pairing};
use fractal_ir::fifm::{AttnMode, ConvKind, FifmConfig};
use fractal_ir::gradcheck;
use fractal_ir_harness::{checkpoint, train, HarnessError, RunConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "fractal-ir", version, about = "Fractal information flow restoration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PairingArg {
    Random,
    Orthogonal,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Denoise,
    Sr2x,
}

#[derive(Subcommand)]
enum Command {
    /// Print a starter run config as JSON.
    DefaultConfig {
        #[arg(value_enum)]
        task: TaskArg,
    },
    /// Train a model; writes metrics CSV and checkpoint when the config names them.
    Train { config: PathBuf },
    /// Validation PSNR/SSIM of a checkpoint.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Analytic cost of each attention scheme at the config's dimensions, as JSON.
    Analyze { config: PathBuf },
    /// Finite-difference check of every op and layer.
    Gradcheck,
    /// Gradient-support probes for the config's first stage geometry, as JSON.
    RfProbe { config: PathBuf },
    /// Gradient-norm distributions of dot vs cosine scores, as CSV.
    GradExperiment {
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 1e-3)]
        min_norm: f64,
        #[arg(long, default_value_t = 1.0)]
        max_norm: f64,
        #[arg(long, value_enum, default_value = "random")]
        pairing: PairingArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn threads_from_env() -> usize {
    std::env::var("FRACTAL_IR_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn to_json<T: Serialize>(v: &T) -> Result<String, HarnessError> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn first_layer(cfg: &RunConfig) -> FifmConfig {
    let (_, layer) = cfg.model.stage_layers().remove(0);
    layer
}

fn probe_size(cfg: &RunConfig, layer: &FifmConfig) -> usize {
    let big = layer.window.region();
    cfg.input_size().max(16 * big).div_ceil(big) * big
}

#[derive(Serialize)]
struct ProbeSummary {
    layers: usize,
    pixels: usize,
    bbox: Option<(usize, usize, usize, usize)>,
    bbox_side: usize,
}

impl ProbeSummary {
    fn new(layers: usize, p: &RfProbe) -> Self {
        Self {
            layers,
            pixels: p.count(),
            bbox: p.bbox,
            bbox_side: p.bbox_side(),
        }
    }
}

#[derive(Serialize)]
struct RfReport {
    image: usize,
    pixel: (usize, usize),
    p: usize,
    s: usize,
    bound: usize,
    l1_only: Vec<ProbeSummary>,
    fifm_att: ProbeSummary,
    layers: Vec<ProbeSummary>,
}

fn rf_report(cfg: &RunConfig) -> Result<RfReport, HarnessError> {
    let layer = first_layer(cfg);
    let n = probe_size(cfg, &layer);
    let (y, x) = (n / 2, n / 2);
    let l1 = FifmConfig {
        mode: AttnMode::L1Only,
        conv_kind: ConvKind::Linear,
        ..layer
    };
    let l1_only = (1..=3)
        .map(|d| Ok(ProbeSummary::new(d, &probe_stack(&vec![l1; d], ProbeDepth::Layer, n, n, y, x, 0)?)))
        .collect::<Result<Vec<_>, fractal_ir::Error>>()?;
    let att = probe_stack(&[layer], ProbeDepth::Attention, n, n, y, x, 0)?;
    let layers = (1..=2)
        .map(|d| Ok(ProbeSummary::new(d, &probe_stack(&vec![layer; d], ProbeDepth::Layer, n, n, y, x, 0)?)))
        .collect::<Result<Vec<_>, fractal_ir::Error>>()?;
    Ok(RfReport {
        image: n,
        pixel: (y, x),
        p: layer.window.p,
        s: layer.window.s,
        bound: 16 * layer.window.region(),
        l1_only,
        fifm_att: ProbeSummary::new(1, &att),
        layers,
    })
}

fn analyze(cfg: &RunConfig) -> Result<String, HarnessError> {
    let layer = first_layer(cfg);
    let size = cfg.input_size() as u64;
    let dims = ComplexityDims {
        b: cfg.batch_size as u64,
        h: size,
        w: size,
        c: layer.channels as u64,
        heads: layer.heads as u64,
        p: layer.window.p as u64,
        s: layer.window.s as u64,
        gamma: layer.ffn_ratio as u64,
    };
    let mut reports = Vec::new();
    for m in Method::ALL {
        let mut r = analytic_complexity(m, dims)?;
        if m == Method::Fractal {
            let n = probe_size(cfg, &layer);
            let p = probe_stack(&[layer, layer], ProbeDepth::Layer, n, n, n / 2, n / 2, 0)?;
            r.rf_measured = Some(p.bbox_side() as u64);
        }
        reports.push(r);
    }
    to_json(&reports)
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::DefaultConfig { task } => {
            let cfg = match task {
                TaskArg::Denoise => RunConfig::denoise_default(),
                TaskArg::Sr2x => RunConfig::sr_default(),
            };
            println!("{}", to_json(&cfg)?);
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = train::train_with(&cfg, |row| eprintln!("{}", row.csv_line()))?;
            match out.final_row() {
                Some(row) => println!("{}", to_json(row)?),
                None => println!("no iterations run"),
            }
        }
        Command::Eval { checkpoint: ckpt, config } => {
            let cfg = RunConfig::load(&config)?;
            let params = checkpoint::load::<f32>(&ckpt)?;
            params.check_against(&cfg.model.param_specs())?;
            println!("{}", to_json(&train::evaluate(&cfg, &params)?)?);
        }
        Command::Analyze { config } => {
            let cfg = RunConfig::load(&config)?;
            println!("{}", analyze(&cfg)?);
        }
        Command::Gradcheck => {
            let mut ok = true;
            for c in gradcheck::suite()? {
                let status = if c.passed() { "ok" } else { "FAIL" };
                println!("{status:4} {:28} {:.3e} (tol {:.0e})", c.name, c.max_rel_error, c.tolerance);
                ok &= c.passed();
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::RfProbe { config } => {
            let cfg = RunConfig::load(&config)?;
            println!("{}", to_json(&rf_report(&cfg)?)?);
        }
        Command::GradExperiment {
            samples,
            dim,
            min_norm,
            max_norm,
            pairing,
            seed,
        } => {
            let exp = GradExperiment {
                n_samples: samples,
                dim,
                norm_range: (min_norm, max_norm),
                pairing: match pairing {
                    PairingArg::Random => Pairing::Random,
                    PairingArg::Orthogonal => Pairing::Orthogonal,
                },
                seed,
            };
            println!("kind,n,min,mean,p50,p90,p99,max");
            for s in gradient_magnitude_experiment(&exp)? {
                let kind = serde_json::to_value(s.kind)?;
                println!(
                    "{},{},{},{},{},{},{},{}",
                    kind.as_str().unwrap_or_default(),
                    s.n,
                    s.min,
                    s.mean,
                    s.p50,
                    s.p90,
                    s.p99,
                    s.max
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    fractal_ir::tensor::init_threads(threads_from_env());
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
