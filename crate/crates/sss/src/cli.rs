//! Command-line front end.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;
use sss_core::math::derive_seed;
use sss_core::montecarlo::{mcmc_step, weigh};
use sss_core::sampler::scp_basic;
use sss_core::{
    BranchChooser, DrawResult, ExactSampler, Heuristic, IsingModel, McmcState, MemberRun, SamplerParams,
    SeedStream, SimulatedAnnealing, Spin, SpinState, StateSpaceSampler,
};

use crate::config::{Config, HeuristicSpec, Mode, ProblemSource, RunConfig};
use crate::diag::{diagnose, exact_logz, format_scatter, LogZSource};
use crate::error::CliError;
use crate::output::{sample_summary, ChainFile, ChainRow, Meta, SampleRow, SamplesFile};
use crate::parallel::Threaded;
use crate::problem::{family_description, family_from_args, format_problem, read_problem};

#[derive(Debug, Parser)]
#[command(name = "sss", version, about = "State space sampling for Ising models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random problem file.
    Gen {
        /// independent, chain, sk or grid3d
        family: String,
        /// One size, or three for grid3d.
        #[arg(required = true)]
        sizes: Vec<usize>,
        #[arg(long)]
        periodic: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw importance samples and write the sample table.
    Sample(RunArgs),
    /// Run the Metropolis-Hastings chain and write the visited states.
    Mcmc {
        #[command(flatten)]
        run: RunArgs,
        /// Number of steps (overrides `mcmc.steps`).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compare a sample table with the Boltzmann line.
    Diag {
        samples: PathBuf,
        /// Known log Z.
        #[arg(long, conflicts_with = "exact")]
        log_z: Option<f64>,
        /// Compute log Z exactly for the problem (chain, uncoupled or at
        /// most 24 spins).
        #[arg(long)]
        exact: bool,
        /// Problem file for `--exact`.
        #[arg(long, conflicts_with = "config")]
        problem: Option<PathBuf>,
        /// Run config naming the problem for `--exact`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scale a working population size and threshold to a new system size.
    SuggestParams {
        /// Target number of spins.
        #[arg(long)]
        m: usize,
        /// Reference number of spins.
        #[arg(long)]
        m0: usize,
        /// Reference population size.
        #[arg(long, default_value_t = 2000)]
        n0: usize,
        /// Reference threshold in nats.
        #[arg(long, default_value_t = 0.05)]
        theta0: f64,
    },
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// sss, scp-basic or mcmc
    #[arg(long)]
    pub mode: Option<String>,
    /// count or rb
    #[arg(long)]
    pub estimator: Option<String>,
    /// fixed, random, neighbour or bisection
    #[arg(long)]
    pub branch_rule: Option<String>,
    /// Independent trees sharing the draws.
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub draws: Option<usize>,
}

impl RunArgs {
    fn load(&self, extra: &[(&str, String)]) -> Result<RunConfig, CliError> {
        let mut config = Config::load(&self.config)?;
        let overrides = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("output", self.out.as_ref().map(|p| p.display().to_string())),
            ("threads", self.threads.map(|v| v.to_string())),
            ("mode", self.mode.clone()),
            ("sampler.estimator", self.estimator.clone()),
            ("sampler.branch_rule", self.branch_rule.clone()),
            ("trees", self.trees.map(|v| v.to_string())),
            ("draws", self.draws.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                config.set(key, v);
            }
        }
        for (key, value) in extra {
            config.set(key, value.clone());
        }
        RunConfig::from_config(&config)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen {
            family,
            sizes,
            periodic,
            seed,
            out,
        } => cmd_gen(&family, &sizes, periodic, seed, out.as_deref()),
        Command::Sample(args) => {
            let rc = args.load(&[])?;
            if rc.mode == Mode::Mcmc {
                cmd_mcmc(&rc)
            } else {
                cmd_sample(&rc)
            }
        }
        Command::Mcmc { run, steps } => {
            let mut extra = vec![("mode", "mcmc".to_string())];
            if let Some(s) = steps {
                extra.push(("mcmc.steps", s.to_string()));
            }
            cmd_mcmc(&run.load(&extra)?)
        }
        Command::Diag {
            samples,
            log_z,
            exact,
            problem,
            config,
            out,
        } => cmd_diag(&samples, log_z, exact, problem.as_deref(), config.as_deref(), out.as_deref()),
        Command::SuggestParams { m, m0, n0, theta0 } => {
            let (n, theta) = suggest_params(m, m0, n0, theta0)?;
            println!("sampler.population_size = {n}");
            println!("sampler.theta = {theta}");
            Ok(())
        }
    }
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::io(Path::new("<stdout>"), e)),
    }
}

pub fn cmd_gen(family: &str, sizes: &[usize], periodic: bool, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let family = family_from_args(family, sizes, periodic)?;
    let model = IsingModel::generate(family, seed)?;
    let comment = format!("generator gaussian-v1 {} seed {seed}", family_description(family));
    write_output(out, &format_problem(&model, Some(&comment)))
}

/// Population size and threshold for `m` spins from a setting that worked
/// at `m0`: the population grows and the threshold shrinks by `m / m0`.
pub fn suggest_params(m: usize, m0: usize, n0: usize, theta0: f64) -> Result<(usize, f64), CliError> {
    if m == 0 || m0 == 0 || n0 == 0 || !(theta0 > 0.0 && theta0.is_finite()) {
        return Err(CliError::usage("sizes and the reference must be positive".into()));
    }
    let c = m as f64 / m0 as f64;
    Ok((((n0 as f64) * c).round().max(1.0) as usize, theta0 / c))
}

pub fn load_model(source: &ProblemSource) -> Result<IsingModel, CliError> {
    match source {
        ProblemSource::File(path) => read_problem(path),
        ProblemSource::Generate { family, seed } => Ok(IsingModel::generate(*family, *seed)?),
    }
}

fn thread_pool(threads: Option<usize>) -> Result<Option<Arc<ThreadPool>>, CliError> {
    threads
        .map(|n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map(Arc::new)
                .map_err(|e| CliError::usage(format!("thread pool: {e}")))
        })
        .transpose()
}

/// Seed of tree `t`; tree 0 uses the run seed itself.
pub fn tree_seed(seed: u64, t: usize) -> u64 {
    if t == 0 {
        seed
    } else {
        derive_seed(seed, t as u64)
    }
}

/// Draws per tree: the remainder goes to the first trees.
pub fn split_draws(draws: usize, trees: usize) -> Vec<usize> {
    (0..trees)
        .map(|t| draws / trees + usize::from(t < draws % trees))
        .collect()
}

struct TreeRun {
    draws: Vec<DrawResult>,
    heuristic_calls: u64,
}

fn run_tree<H: Heuristic + ?Sized>(
    model: &IsingModel,
    heuristic: &H,
    rc: &RunConfig,
    t: usize,
    n: usize,
) -> Result<TreeRun, CliError> {
    let params = SamplerParams {
        seed: tree_seed(rc.seed, t),
        ..rc.params
    };
    match rc.mode {
        Mode::Sss => {
            let mut sampler = StateSpaceSampler::new(model, heuristic, params)?;
            let draws = (0..n).map(|_| sampler.draw()).collect::<Result<Vec<_>, _>>()?;
            Ok(TreeRun {
                draws,
                heuristic_calls: sampler.heuristic_calls(),
            })
        }
        Mode::ScpBasic => {
            let mut seeds = SeedStream::new(params.seed);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, u64::MAX));
            let draws = (0..n)
                .map(|_| scp_basic(model, heuristic, &params, &mut seeds, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(TreeRun {
                draws,
                heuristic_calls: seeds.issued(),
            })
        }
        Mode::Mcmc => Err(CliError::usage("mcmc mode has no sample table".into())),
    }
}

fn with_heuristic<T>(
    rc: &RunConfig,
    pool: Option<Arc<ThreadPool>>,
    f: impl FnOnce(&(dyn Heuristic + Sync)) -> T,
) -> Result<T, CliError> {
    fn wrap<H: MemberRun>(h: H, pool: Option<Arc<ThreadPool>>) -> Threaded<H> {
        match pool {
            Some(p) => Threaded::with_pool(h, p),
            None => Threaded::new(h),
        }
    }
    Ok(match rc.heuristic {
        HeuristicSpec::Annealing(schedule) => f(&wrap(SimulatedAnnealing::new(schedule)?, pool)),
        HeuristicSpec::Exact => f(&wrap(ExactSampler::new(rc.beta), pool)),
    })
}

fn header(rc: &RunConfig, format: &str) -> Meta {
    let mode = match rc.mode {
        Mode::Sss => "sss",
        Mode::ScpBasic => "scp-basic",
        Mode::Mcmc => "mcmc",
    };
    vec![
        ("format".into(), format.into()),
        ("tool".into(), format!("sss-{}", env!("CARGO_PKG_VERSION"))),
        ("seed".into(), rc.seed.to_string()),
        ("config_hash".into(), rc.hash.clone()),
        ("beta".into(), rc.beta.to_string()),
        ("mode".into(), mode.into()),
    ]
}

/// Runs the configured sampler and returns the sample table.
pub fn sample_table(rc: &RunConfig, model: &IsingModel) -> Result<SamplesFile, CliError> {
    let start = Instant::now();
    let pool = thread_pool(rc.threads)?;
    let counts = split_draws(rc.draws, rc.trees);
    let runs = with_heuristic(rc, pool.clone(), |h| {
        let go = || {
            counts
                .par_iter()
                .enumerate()
                .map(|(t, &n)| run_tree(model, h, rc, t, n))
                .collect::<Vec<_>>()
        };
        match &pool {
            Some(p) => p.install(go),
            None => go(),
        }
    })?
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let mut rows = Vec::with_capacity(rc.draws);
    let mut all = Vec::with_capacity(rc.draws);
    let mut calls = 0;
    for (t, run) in runs.into_iter().enumerate() {
        calls += run.heuristic_calls;
        for d in run.draws {
            rows.push(SampleRow {
                index: rows.len(),
                tree: t,
                state: d.state.clone(),
                energy: model.energy(&d.state)?,
                log_q: d.log_q,
                refresh_calls: d.refresh_calls,
                fallback: d.fallback,
            });
            all.push(d);
        }
    }
    let mut meta = header(rc, "sss-samples");
    meta.push(("trees".into(), rc.trees.to_string()));
    let mut summary = sample_summary(&weigh(&all, model, rc.beta)?);
    summary.push(("heuristic_calls".into(), calls.to_string()));
    summary.push((
        "fallbacks".into(),
        rows.iter().filter(|r| r.fallback).count().to_string(),
    ));
    summary.push(("wall_time_s".into(), format!("{:.3}", start.elapsed().as_secs_f64())));
    Ok(SamplesFile { meta, rows, summary })
}

fn cmd_sample(rc: &RunConfig) -> Result<(), CliError> {
    let model = load_model(&rc.problem)?;
    let table = sample_table(rc, &model)?;
    write_output(rc.output.as_deref(), &table.format())
}

/// Runs the chain; row 0 is the initial state.
pub fn chain_table(rc: &RunConfig, model: &IsingModel) -> Result<ChainFile, CliError> {
    let start = Instant::now();
    let m = model.num_spins();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rc.seed, u64::MAX));
    let initial = match &rc.mcmc_initial {
        Some(s) if s.len() != m => {
            return Err(CliError::usage(format!("`mcmc.initial` has {} spins, the problem {m}", s.len())))
        }
        Some(s) => s.clone(),
        None => SpinState::new((0..m).map(|_| Spin::from_bool(rng.gen())).collect()),
    };
    let chooser = BranchChooser::new(rc.params.branch_rule, model)?;
    let mut seeds = SeedStream::new(rc.seed);
    let mut chain = McmcState::new(model, initial, rc.beta)?;
    let pool = thread_pool(rc.threads)?;
    let mut rows = vec![ChainRow {
        step: 0,
        state: chain.state.clone(),
        energy: model.energy(&chain.state)?,
        accepted: false,
    }];
    with_heuristic(rc, pool, |h| -> Result<(), CliError> {
        for step in 1..=rc.mcmc_steps {
            let accepted = mcmc_step(&mut chain, model, h, &rc.params, &chooser, &mut seeds, &mut rng)?;
            rows.push(ChainRow {
                step,
                state: chain.state.clone(),
                energy: model.energy(&chain.state)?,
                accepted,
            });
        }
        Ok(())
    })??;
    let summary = vec![
        ("steps".into(), chain.steps.to_string()),
        ("accepted".into(), chain.accepted.to_string()),
        ("acceptance_rate".into(), chain.acceptance_rate().to_string()),
        ("heuristic_calls".into(), seeds.issued().to_string()),
        ("wall_time_s".into(), format!("{:.3}", start.elapsed().as_secs_f64())),
    ];
    Ok(ChainFile {
        meta: header(rc, "sss-chain"),
        rows,
        summary,
    })
}

fn cmd_mcmc(rc: &RunConfig) -> Result<(), CliError> {
    let model = load_model(&rc.problem)?;
    let table = chain_table(rc, &model)?;
    write_output(rc.output.as_deref(), &table.format())
}

fn cmd_diag(
    samples: &Path,
    log_z: Option<f64>,
    exact: bool,
    problem: Option<&Path>,
    config: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let text = fs::read_to_string(samples).map_err(|e| CliError::io(samples, e))?;
    let table = SamplesFile::parse(&text)?;
    let reference = if let Some(z) = log_z {
        Some((z, LogZSource::Given))
    } else if exact {
        let model = match (problem, config) {
            (Some(p), _) => read_problem(p)?,
            (None, Some(c)) => load_model(&RunConfig::from_config(&Config::load(c)?)?.problem)?,
            (None, None) => return Err(CliError::usage("`--exact` needs `--problem` or `--config`".into())),
        };
        Some((exact_logz(&model, table.beta()?)?, LogZSource::Exact))
    } else {
        None
    };
    let fit = diagnose(&table, reference)?;
    write_output(out, &format_scatter(&table, &fit))
}
