use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use floquet_ris::estimation::{
    align, default_static_k, load_aligned_proxies, step1_estimate, surrogate_step1, OptimizerConfig, Step1Config,
};
use floquet_ris::eval::{
    coordinate_ascent_gain, experiment_fig3, experiment_fig4, experiment_table1, EvalModel, EvaluationSet,
    ExperimentConfig, GainConfig, ModelKind,
};
use floquet_ris::gauge::ProxySet;
use floquet_ris::json;
use floquet_ris::measurement::{simulate_campaign, simulate_static_campaigns, Campaign, MeasurementMode};
use floquet_ris::scenario::{Scenario, ScenarioConfig};
use floquet_ris::{Error, Result};

#[derive(Parser)]
#[command(
    name = "floquet-ris",
    version,
    about = "Time-modulated RIS channel modeling and cross-harmonic gauge alignment"
)]
struct Cli {
    /// Master seed; a given seed always reproduces the same output.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    M1,
    M2,
    M3,
}

impl From<Mode> for MeasurementMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::M1 => Self::M1,
            Mode::M2 => Self::M2,
            Mode::M3 => Self::M3,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Gt,
    TruncGt,
    Aligned,
    Unaligned,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Fig3,
    Fig4,
    Table1,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic ground-truth scenario.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate a measurement campaign of random modulation patterns.
    Campaign {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        q: usize,
        #[arg(
            long,
            allow_negative_numbers = true,
            required_unless_present = "noiseless",
            conflicts_with = "noiseless"
        )]
        snr_db: Option<f64>,
        #[arg(long)]
        noiseless: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-harmonic proxy estimation (or a gauge-perturbed surrogate of it).
    Step1 {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        surrogate: bool,
        #[arg(long, default_value_t = 0.2, requires = "surrogate")]
        spread: f64,
        #[arg(long)]
        mc_unaware: bool,
        /// Static configurations per harmonic (default: twenty observations per unknown).
        #[arg(long, conflicts_with = "surrogate")]
        k1: Option<usize>,
        /// SNR of the static measurements (noiseless if omitted).
        #[arg(long, allow_negative_numbers = true, conflicts_with = "surrogate")]
        snr_db: Option<f64>,
        #[arg(long, conflicts_with = "surrogate")]
        iters: Option<usize>,
        /// Also write per-harmonic fit diagnostics.
        #[arg(long, conflicts_with = "surrogate")]
        diagnostics: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align per-harmonic proxies against a multi-harmonic campaign.
    Align {
        #[arg(long)]
        proxies: PathBuf,
        #[arg(long)]
        campaign: PathBuf,
        #[arg(long, default_value_t = 250)]
        iters: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr_start: f64,
        #[arg(long, default_value_t = 1e-5)]
        lr_end: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a model over unseen random patterns.
    Zeta {
        #[arg(long)]
        scenario: PathBuf,
        #[command(flatten)]
        source: ModelSource,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value_t = 100)]
        patterns: usize,
        #[arg(long)]
        q: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Coordinate-ascent maximization of a fundamental-to-harmonic SISO gain.
    Gain {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        model: Model,
        /// Unaligned proxies (for `--model unaligned`, or aligned ones for `aligned`).
        #[arg(long)]
        proxies: Option<PathBuf>,
        /// Alignment result (for `--model aligned`).
        #[arg(long)]
        result: Option<PathBuf>,
        #[arg(long)]
        mc_unaware: bool,
        #[arg(long)]
        tx: usize,
        #[arg(long)]
        rx: usize,
        #[arg(long, default_value_t = 1, allow_negative_numbers = true)]
        harmonic: i32,
        #[arg(long)]
        q: usize,
        #[arg(long, default_value_t = 4)]
        restarts: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Experiment drivers writing CSV (and JSON for the gain table).
    Exp {
        #[arg(value_enum)]
        which: Experiment,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ModelSource {
    #[arg(long)]
    proxies: Option<PathBuf>,
    #[arg(long)]
    result: Option<PathBuf>,
    /// Ground truth truncated to the retained harmonics.
    #[arg(long)]
    trunc_gt: bool,
    /// Discard mutual coupling of the truncated ground truth.
    #[arg(long, requires = "trunc_gt")]
    mc_unaware: bool,
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| io_error(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("FLOQUET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Validation(format!("FLOQUET_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Validation(format!("cannot size the worker pool: {e}")))
}

/// Runs one command; `Ok(code)` carries non-fatal failures (an aborted alignment).
fn run(cli: Cli) -> Result<u8> {
    configure_threads()?;
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Generate { config, out } => {
            let mut cfg = ScenarioConfig::load(&config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            Scenario::generate(&cfg)?.save(&out)?;
            info!("scenario written to {}", out.display());
        }
        Command::Campaign {
            scenario,
            mode,
            k,
            q,
            snr_db,
            noiseless: _,
            out,
        } => {
            let s = Scenario::load(&scenario)?;
            let retained = s.retained_grid()?;
            simulate_campaign(&s, &retained, k, q, mode.into(), snr_db, seed)?.save(&out)?;
        }
        Command::Step1 {
            scenario,
            surrogate,
            spread,
            mc_unaware,
            k1,
            snr_db,
            iters,
            diagnostics,
            out,
        } => {
            let s = Scenario::load(&scenario)?;
            let retained = s.retained_grid()?;
            let mc = !mc_unaware;
            let proxies = if surrogate {
                surrogate_step1(&s, &retained, spread, seed, mc)?
            } else {
                let c = &s.config;
                let k = k1.unwrap_or_else(|| default_static_k(c.n_t, c.n_r, c.n_s, c.n_states));
                let campaigns = simulate_static_campaigns(&s, &retained, k, snr_db, seed)?;
                let mut cfg = Step1Config::default();
                cfg.optimizer.seed = seed;
                if let Some(n) = iters {
                    cfg.optimizer.iterations = n;
                }
                let r = step1_estimate(&retained, &campaigns, c.n_states, &cfg, mc)?;
                for d in r.diagnostics.iter().filter(|d| !d.converged || d.low_identifiability) {
                    warn!(
                        "harmonic {}: converged {}, low identifiability {}",
                        d.harmonic, d.converged, d.low_identifiability
                    );
                }
                if let Some(p) = diagnostics {
                    let v = serde_json::Value::Array(r.diagnostics.iter().map(|d| d.to_json()).collect());
                    json::write_file(p, &v)?;
                }
                r.proxies
            };
            proxies.save(&out)?;
        }
        Command::Align {
            proxies,
            campaign,
            iters,
            lr_start,
            lr_end,
            out,
        } => {
            let p = ProxySet::load(&proxies)?;
            let c = Campaign::load(&campaign)?;
            let cfg = OptimizerConfig {
                iterations: iters,
                lr_start,
                lr_end,
                seed,
                ..Default::default()
            };
            let r = align(&p, &c, &cfg)?;
            r.save(&out)?;
            info!("final loss {:.6e}", r.final_loss());
            if let Some(reason) = &r.aborted {
                warn!("alignment aborted: {reason}");
                return Ok(3);
            }
        }
        Command::Zeta {
            scenario,
            source,
            mode,
            patterns,
            q,
            out,
        } => {
            let s = Scenario::load(&scenario)?;
            let retained = s.retained_grid()?;
            let model = match (source.proxies, source.result) {
                (Some(p), _) => EvalModel::Proxies(ProxySet::load(p)?),
                (_, Some(r)) => EvalModel::Proxies(load_aligned_proxies(r)?),
                _ => EvalModel::truncated_gt(&s, &retained, !source.mc_unaware)?,
            };
            let set = EvaluationSet::new(&s, &retained, q, patterns, seed)?;
            let report = set.zeta(&s, &model, mode.into())?;
            emit(&json::to_string(&report.to_json()), out.as_deref())?;
        }
        Command::Gain {
            scenario,
            model,
            proxies,
            result,
            mc_unaware,
            tx,
            rx,
            harmonic,
            q,
            restarts,
            out,
        } => {
            let s = Scenario::load(&scenario)?;
            let retained = s.retained_grid()?;
            let need = |what: &str| {
                Error::Validation(format!(
                    "--model {what} needs {}",
                    if what == "aligned" {
                        "--result or --proxies"
                    } else {
                        "--proxies"
                    }
                ))
            };
            let m = match model {
                Model::Gt => EvalModel::GroundTruth,
                Model::TruncGt => EvalModel::truncated_gt(&s, &retained, !mc_unaware)?,
                Model::Aligned => match (result, proxies) {
                    (Some(r), _) => EvalModel::Proxies(load_aligned_proxies(r)?),
                    (None, Some(p)) => EvalModel::Proxies(ProxySet::load(p)?),
                    _ => return Err(need(ModelKind::Aligned.name())),
                },
                Model::Unaligned => EvalModel::Proxies(ProxySet::load(
                    proxies.ok_or_else(|| need(ModelKind::Unaligned.name()))?,
                )?),
            };
            let cfg = GainConfig {
                tx,
                rx,
                harmonic,
                q,
                restarts,
            };
            let r = coordinate_ascent_gain(&m, &s, &retained, &cfg, seed)?;
            emit(&json::to_string(&r.to_json()), out.as_deref())?;
        }
        Command::Exp { which, config, out_dir } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            fs::create_dir_all(&out_dir).map_err(|e| io_error(&out_dir, e))?;
            let write = |name: &str, text: &str| {
                let p = out_dir.join(name);
                fs::write(&p, text).map_err(|e| io_error(&p, e))
            };
            match which {
                Experiment::Fig3 => write("fig3.csv", &experiment_fig3(&cfg)?.to_csv())?,
                Experiment::Fig4 => write("fig4.csv", &experiment_fig4(&cfg)?.to_csv())?,
                Experiment::Table1 => {
                    let t = experiment_table1(&cfg)?;
                    write("table1.csv", &t.to_csv())?;
                    write("table1.json", &json::to_string(&t.to_json()))?;
                }
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
