use cape_harness::experiment::{
    run_experiment, write_outputs, ExperimentConfig, ExperimentKind, Mode,
};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "cape",
    about = "Simulator for distributed differentially private computation with correlated noise",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Load a full experiment config from JSON (CLI flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to results/<kind>-m<master_seed>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of sites.
    #[arg(long)]
    sites: Option<usize>,
    /// Feature dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Total pooled sample count.
    #[arg(long)]
    samples: Option<usize>,
    /// Comma-separated epsilon grid.
    #[arg(long, value_delimiter = ',')]
    epsilon_grid: Option<Vec<f64>>,
    /// Comma-separated N grid (switches the linreg sweep axis to N).
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    /// Fixed epsilon (used for N sweeps and collusion sweeps).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Failure probability delta.
    #[arg(long)]
    delta: Option<f64>,
    /// Number of seeds (runs seeds 0..n).
    #[arg(long)]
    seeds: Option<u64>,
    /// Comma-separated mode list
    /// (non-priv, pooled-dp, cape-fm, conv, local, dpfm, obj-pert).
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    /// Master seed mixed into every stream.
    #[arg(long)]
    master_seed: Option<u64>,
    /// Also write one cape round transcript as transcript.ndjson.
    #[arg(long, default_value_t = false)]
    transcript: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Private linear regression utility sweep (epsilon or N axis).
    Linreg {
        #[command(flatten)]
        common: CommonArgs,
        /// Train on a CSV file instead of synthetic data.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Target column name for --csv.
        #[arg(long)]
        target_column: Option<String>,
        /// Label noise standard deviation for synthetic data.
        #[arg(long)]
        noise_sd: Option<f64>,
    },
    /// Distributed differentially private neural-network training sweep.
    Nn {
        #[command(flatten)]
        common: CommonArgs,
        /// Hidden layer width.
        #[arg(long)]
        hidden: Option<usize>,
        /// Gradient-descent step size.
        #[arg(long)]
        lr: Option<f64>,
        /// Gradient-descent iterations.
        #[arg(long)]
        iters: Option<usize>,
        /// Per-example gradient clipping norm.
        #[arg(long)]
        clip: Option<f64>,
        /// Class mean separation for synthetic data.
        #[arg(long)]
        separation: Option<f64>,
    },
    /// Compare the correlated-noise delta bound against the matched
    /// conventional bound over a per-site noise-scale sweep.
    DeltaCompare {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated tau_s grid.
        #[arg(long, value_delimiter = ',')]
        tau_grid: Option<Vec<f64>>,
    },
    /// Sweep the number of colluding sites from 0 to the protocol bound.
    CollusionSweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated tau_s grid.
        #[arg(long, value_delimiter = ',')]
        tau_grid: Option<Vec<f64>>,
    },
    /// Check variance-ratio bounds over random site-size compositions.
    HRatio {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn load_or_default(kind: ExperimentKind, common: &CommonArgs) -> Result<ExperimentConfig, String> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("bad config JSON: {e}"))?
        }
        None => ExperimentConfig::defaults(kind),
    };
    cfg.kind = kind;
    if let Some(s) = common.sites {
        cfg.s = s;
    }
    if let Some(d) = common.dim {
        cfg.d = d;
    }
    if let Some(n) = common.samples {
        cfg.n = n;
    }
    if let Some(g) = &common.epsilon_grid {
        cfg.epsilon_grid = g.clone();
    }
    if let Some(g) = &common.n_grid {
        cfg.n_grid = g.clone();
    }
    if let Some(e) = common.epsilon {
        cfg.epsilon = e;
    }
    if let Some(d) = common.delta {
        cfg.delta = d;
    }
    if let Some(n) = common.seeds {
        cfg.seeds = (0..n).collect();
    }
    if let Some(modes) = &common.modes {
        cfg.modes = modes
            .iter()
            .map(|m| Mode::parse(m).map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
    }
    if let Some(m) = common.master_seed {
        cfg.master_seed = m;
    }
    cfg.write_transcript = cfg.write_transcript || common.transcript;
    Ok(cfg)
}

fn kind_slug(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::Linreg => "linreg",
        ExperimentKind::Nn => "nn",
        ExperimentKind::DeltaCompare => "delta-compare",
        ExperimentKind::CollusionSweep => "collusion-sweep",
        ExperimentKind::HRatio => "h-ratio",
    }
}

fn run(kind: ExperimentKind, common: &CommonArgs, cfg: ExperimentConfig) -> ExitCode {
    let out_dir = common.out.clone().unwrap_or_else(|| {
        PathBuf::from("results").join(format!("{}-m{}", kind_slug(kind), cfg.master_seed))
    });
    let out = run_experiment(&cfg);
    for f in &out.failures {
        eprintln!("warning: {f}");
    }
    for f in &out.invariant_failures {
        eprintln!("INVARIANT VIOLATED: {f}");
    }
    if let Err(e) = write_outputs(&out_dir, &cfg, &out) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    println!(
        "wrote {} records, {} summary rows to {}",
        out.records.len(),
        out.summaries.len(),
        out_dir.display()
    );
    for row in &out.summaries {
        if row.metric == "loss" || row.metric == "test_acc" || row.metric == "log_delta" {
            println!(
                "  {}={:>12.5e}  {:>10}  {:>10}: mean={:.6e} sd={:.3e} (n={})",
                row.axis, row.axis_value, row.mode, row.metric, row.mean, row.sd, row.n_seeds
            );
        }
    }
    if out.invariant_failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Linreg { common, csv, target_column, noise_sd } => {
            load_or_default(ExperimentKind::Linreg, common).map(|mut cfg| {
                if let Some(p) = csv {
                    cfg.csv_path = Some(p.display().to_string());
                    // CSV data gets a looser default failure probability
                    if common.delta.is_none() && common.config.is_none() {
                        cfg.delta = 1e-3;
                    }
                }
                if let Some(t) = target_column {
                    cfg.target_column = Some(t.clone());
                }
                if let Some(ns) = noise_sd {
                    cfg.noise_sd = *ns;
                }
                (common, cfg)
            })
        }
        Command::Nn { common, hidden, lr, iters, clip, separation } => {
            load_or_default(ExperimentKind::Nn, common).map(|mut cfg| {
                if let Some(h) = hidden {
                    cfg.hidden = *h;
                }
                if let Some(v) = lr {
                    cfg.lr = *v;
                }
                if let Some(v) = iters {
                    cfg.iters = *v;
                }
                if let Some(v) = clip {
                    cfg.clip = *v;
                }
                if let Some(v) = separation {
                    cfg.separation = *v;
                }
                (common, cfg)
            })
        }
        Command::DeltaCompare { common, tau_grid } => {
            load_or_default(ExperimentKind::DeltaCompare, common).map(|mut cfg| {
                if let Some(g) = tau_grid {
                    cfg.tau_grid = g.clone();
                }
                (common, cfg)
            })
        }
        Command::CollusionSweep { common, tau_grid } => {
            load_or_default(ExperimentKind::CollusionSweep, common).map(|mut cfg| {
                if let Some(g) = tau_grid {
                    cfg.tau_grid = g.clone();
                }
                (common, cfg)
            })
        }
        Command::HRatio { common } => {
            load_or_default(ExperimentKind::HRatio, common).map(|cfg| (common, cfg))
        }
    };
    match result {
        Ok((common, cfg)) => run(cfg.kind, common, cfg),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
