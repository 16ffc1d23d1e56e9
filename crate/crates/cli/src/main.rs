use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sbm_limits::bp::{compute_mse, run_bp, NodeEstimates};
use sbm_limits::config::{ExperimentConfig, Instance};
use sbm_limits::harness::{self, Observations, SweepOptions};
use sbm_limits::oracle::exact_posterior;
use sbm_limits::potential::minimize_potential;
use sbm_limits::spectral::spectral_pipeline;
use sbm_limits::{io, linalg, rng, Error, Result};

#[derive(Parser)]
#[command(name = "sbm-limits", version, about = "Bounds and inference for multi-layer stochastic block models with side information")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Trials per sweep point; overrides the config.
    #[arg(long, value_name = "N")]
    trials: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the whitened label vectors.
    Whiten(Common),
    /// Minimize the potential and print u*, f* and tr(U*).
    Bound(Common),
    /// Sample labels, covariates and networks.
    Generate(Common),
    /// Run belief propagation.
    Bp(Common),
    /// Run the spectral pipeline.
    Spectral(Common),
    /// Exact posterior by enumeration on a tiny instance.
    Oracle(Common),
    /// Run a parameter sweep.
    Sweep(Common),
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    let path = c.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.trials {
        if t == 0 {
            return Err(Error::Config("--trials must be at least 1".into()));
        }
        if let Some(sw) = cfg.sweep.as_mut() {
            sw.trials = t;
        }
    }
    Ok(cfg)
}

fn out_file(c: &Common, name: &str) -> Option<PathBuf> {
    c.out.as_ref().map(|d| d.join(name))
}

/// Observations from the config's input files, or simulated from the seed.
fn observations(cfg: &ExperimentConfig, inst: &Instance, config_path: &Path) -> Result<(Observations, bool)> {
    let Some(inputs) = &cfg.inputs else {
        return Ok((harness::simulate(inst, cfg.seed)?, true));
    };
    let base = config_path.parent().unwrap_or(Path::new("."));
    if inputs.edges.len() != inst.specs.len() {
        return Err(Error::Config(format!("{} edge files for {} configured networks", inputs.edges.len(), inst.specs.len())));
    }
    let networks = inputs
        .edges
        .iter()
        .zip(&inst.specs.layers)
        .map(|(p, layer)| io::read_edge_list(io::open(&base.join(p))?, layer.r.clone()))
        .collect::<Result<Vec<_>>>()?;
    let n = networks.first().map_or(inst.n, |g| g.n);
    let covariates = match &inputs.covariates {
        Some(p) => io::read_covariates(io::open(&base.join(p))?)?,
        None => sbm_limits::CovariateSample::empty(n),
    };
    let (labels, known) = match &inputs.labels {
        Some(p) => (io::read_labels(io::open(&base.join(p))?, &inst.model)?, true),
        None => (sbm_limits::LabelSample::from_assignments(&inst.model, vec![0; n], 0)?, false),
    };
    if covariates.n() != n || labels.n != n || networks.iter().any(|g| g.n != n) {
        return Err(Error::Config("input files disagree on n".into()));
    }
    Ok((Observations { labels, covariates, networks }, known))
}

fn report_estimates(c: &Common, name: &str, est: &NodeEstimates, obs: &Observations, known: bool) -> Result<()> {
    println!("iterations {}", est.iterations);
    println!("converged {}", est.converged);
    if known {
        println!("mse {}", compute_mse(&est.means, &obs.labels)?);
    }
    if let Some(path) = out_file(c, name) {
        io::write_estimates(io::create(&path)?, est)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Whiten(c) => {
            let m = load(&c)?.model()?;
            println!("community,p,{}", (1..=m.dim()).map(|i| format!("mu{i}")).collect::<Vec<_>>().join(","));
            for a in 0..m.k() {
                let mu: Vec<String> = m.mu().row(a).iter().map(|v| v.to_string()).collect();
                println!("{a},{},{}", m.p()[a], mu.join(","));
            }
        }
        Command::Bound(c) => {
            let cfg = load(&c)?;
            let inst = cfg.instance()?;
            let b = minimize_potential(&inst.specs, &inst.channel, &inst.model, &cfg.minimize)?;
            println!("u* {:?}", linalg::to_row_major(b.u_star.matrix()));
            println!("f* {}", b.f_star);
            println!("tr(U*) {}", b.u_star.trace());
            if let Some(path) = out_file(&c, "bound.json") {
                serde_json::to_writer_pretty(io::create(&path)?, &b.to_record())?;
                println!("wrote {}", path.display());
            }
        }
        Command::Generate(c) => {
            let cfg = load(&c)?;
            let inst = cfg.instance()?;
            let obs = harness::simulate(&inst, cfg.seed)?;
            let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
            io::write_labels(io::create(&dir.join("labels.csv"))?, &obs.labels)?;
            io::write_covariates(io::create(&dir.join("covariates.csv"))?, &obs.covariates)?;
            for (l, g) in obs.networks.iter().enumerate() {
                io::write_edge_list(io::create(&dir.join(format!("layer{l}.edges")))?, g)?;
                println!("layer {l}: {} edges", g.edge_count());
            }
            println!("wrote {} nodes to {}", obs.labels.n, dir.display());
        }
        Command::Bp(c) => {
            let cfg = load(&c)?;
            let inst = cfg.instance()?;
            let (obs, known) = observations(&cfg, &inst, c.config.as_deref().unwrap())?;
            let seed = rng::derive(cfg.seed, &[rng::stream::BP_INIT]);
            let est = run_bp(&obs.networks, &obs.covariates, &inst.channel, &inst.model, &inst.specs, &cfg.bp, seed)?;
            report_estimates(&c, "bp_estimates.csv", &est, &obs, known)?;
        }
        Command::Spectral(c) => {
            let cfg = load(&c)?;
            let inst = cfg.instance()?;
            let (obs, known) = observations(&cfg, &inst, c.config.as_deref().unwrap())?;
            let est = spectral_pipeline(&obs.networks, &inst.model, &cfg.gmm, rng::derive(cfg.seed, &[rng::stream::SPECTRAL]))?;
            println!("path {:?}", est.path);
            report_estimates(&c, "spectral_estimates.csv", &est.estimates, &obs, known)?;
        }
        Command::Oracle(c) => {
            let cfg = load(&c)?;
            let inst = cfg.instance()?;
            let (obs, known) = observations(&cfg, &inst, c.config.as_deref().unwrap())?;
            let post = exact_posterior(&obs.networks, &[], &obs.covariates, &inst.channel, &inst.model, &inst.specs)?;
            println!("node,{}", (1..=inst.model.k()).map(|a| format!("q{a}")).collect::<Vec<_>>().join(","));
            for i in 0..post.n() {
                let q: Vec<String> = post.marginals.row(i).iter().map(|v| v.to_string()).collect();
                println!("{i},{}", q.join(","));
            }
            println!("tr(mmse) {}", post.mmse_matrix.trace());
            println!("log_evidence {}", post.log_evidence);
            let est = post.estimates(&inst.model);
            if known {
                println!("mse {}", compute_mse(&est.means, &obs.labels)?);
            }
            if let Some(path) = out_file(&c, "oracle_estimates.csv") {
                io::write_estimates(io::create(&path)?, &est)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Sweep(c) => {
            let cfg = load(&c)?;
            let mut opts = SweepOptions::new(c.out.clone().unwrap_or_else(|| PathBuf::from("results")));
            opts.threads = harness::threads_from_env()?;
            let report = harness::run_sweep(&cfg, &opts)?;
            let computed: usize = report.rows.values().map(Vec::len).sum();
            println!("{computed} rows computed, {} points skipped", report.skipped);
            for f in &report.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}
