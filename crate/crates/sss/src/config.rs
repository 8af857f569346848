//! Run configuration: flat `key = value` text with dotted keys.
//!
//! ```text
//! # Ising chain, annealed populations
//! problem.family = chain
//! problem.size = 100
//! beta = 1.0
//! heuristic = sa
//! heuristic.beta_start = 0.1
//! heuristic.n_steps = 100
//! sampler.population_size = 2000
//! sampler.theta = 0.05
//! draws = 50
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use sss_core::{BranchRule, EstimatorMode, Family, SaSchedule, SamplerParams, SpinState, SweepOrder, TreeMode};

use crate::error::CliError;
use crate::problem::family_from_args;

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    /// 0 for values set on the command line.
    line: usize,
}

/// Raw key/value pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, Entry>,
    base_dir: Option<PathBuf>,
}

const KEYS: &[&str] = &[
    "problem.file",
    "problem.family",
    "problem.size",
    "problem.periodic",
    "problem.seed",
    "beta",
    "heuristic",
    "heuristic.beta_start",
    "heuristic.beta_end",
    "heuristic.n_steps",
    "heuristic.sweeps_per_step",
    "heuristic.order",
    "sampler.population_size",
    "sampler.theta",
    "sampler.max_tree_size",
    "sampler.count_threshold",
    "sampler.estimator",
    "sampler.branch_rule",
    "sampler.tree_mode",
    "mode",
    "draws",
    "trees",
    "threads",
    "seed",
    "mcmc.steps",
    "mcmc.initial",
    "output",
];

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| CliError::config(line, format!("expected `key = value`, got `{content}`")))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(CliError::config(line, format!("unknown key `{key}`")));
            }
            let entry = Entry {
                value: value.trim().to_string(),
                line,
            };
            if let Some(previous) = entries.insert(key.to_string(), entry) {
                return Err(CliError::config(
                    line,
                    format!("`{key}` already set on line {}", previous.line),
                ));
            }
        }
        Ok(Config {
            entries,
            base_dir: None,
        })
    }

    /// Reads a file; relative `problem.file` paths resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(0, format!("{}: {e}", path.display())))?;
        let mut config = Config::parse(&text)?;
        config.base_dir = path.parent().map(Path::to_path_buf);
        Ok(config)
    }

    /// Command-line override.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        debug_assert!(KEYS.contains(&key));
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.into(),
                line: 0,
            },
        );
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse()
                .map(Some)
                .map_err(|_| CliError::config(e.line, format!("bad value `{}` for `{key}`", e.value))),
        }
    }

    fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn choice<T: Copy>(&self, key: &str, options: &[(&str, T)], default: T) -> Result<T, CliError> {
        let Some(e) = self.entries.get(key) else {
            return Ok(default);
        };
        options
            .iter()
            .find(|(name, _)| *name == e.value)
            .map(|&(_, v)| v)
            .ok_or_else(|| {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                CliError::config(e.line, format!("`{key}` must be one of {}", names.join(", ")))
            })
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.line)
    }

    /// Sorted `key = value` lines, after overrides. Keys that cannot change
    /// results (`output`, `threads`) are left out.
    pub fn canonical(&self) -> String {
        self.entries
            .iter()
            .filter(|(k, _)| !matches!(k.as_str(), "output" | "threads"))
            .map(|(k, e)| format!("{k} = {}\n", e.value))
            .collect()
    }

    /// First 16 hex digits of the SHA-256 of [`Config::canonical`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        hex::encode(&digest[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Tree-cached state space sampling.
    Sss,
    /// One fresh population per variable, no tree.
    ScpBasic,
    Mcmc,
}

pub const MODES: &[(&str, Mode)] = &[("sss", Mode::Sss), ("scp-basic", Mode::ScpBasic), ("mcmc", Mode::Mcmc)];
pub const ESTIMATORS: &[(&str, EstimatorMode)] = &[("count", EstimatorMode::Count), ("rb", EstimatorMode::RaoBlackwell)];
pub const BRANCH_RULES: &[(&str, BranchRule)] = &[
    ("fixed", BranchRule::Fixed),
    ("random", BranchRule::Random),
    ("neighbour", BranchRule::Neighbour),
    ("bisection", BranchRule::Bisection),
];

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSource {
    File(PathBuf),
    Generate { family: Family, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeuristicSpec {
    Annealing(SaSchedule),
    Exact,
}

/// Everything a run needs, validated.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: ProblemSource,
    pub beta: f64,
    pub heuristic: HeuristicSpec,
    pub params: SamplerParams,
    pub mode: Mode,
    pub draws: usize,
    /// Independent trees sharing the draws.
    pub trees: usize,
    pub threads: Option<usize>,
    pub seed: u64,
    pub mcmc_steps: usize,
    pub mcmc_initial: Option<SpinState>,
    pub output: Option<PathBuf>,
    pub hash: String,
}

impl RunConfig {
    pub fn from_config(c: &Config) -> Result<Self, CliError> {
        let problem = match (c.get_str("problem.file"), c.get_str("problem.family")) {
            (Some(_), Some(_)) => {
                return Err(CliError::config(
                    c.line_of("problem.family"),
                    "set either `problem.file` or `problem.family`",
                ))
            }
            (Some(file), None) => {
                let path = PathBuf::from(file);
                let path = match &c.base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path,
                };
                ProblemSource::File(path)
            }
            (None, Some(name)) => {
                let line = c.line_of("problem.size");
                let sizes = c
                    .get_str("problem.size")
                    .ok_or_else(|| CliError::config(c.line_of("problem.family"), "`problem.size` missing"))?
                    .split([',', ' '])
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| CliError::config(line, "bad `problem.size`"))?;
                let periodic = c.get_or("problem.periodic", false)?;
                let family = family_from_args(name, &sizes, periodic)
                    .map_err(|e| CliError::config(c.line_of("problem.family"), e.to_string()))?;
                ProblemSource::Generate {
                    family,
                    seed: c.get_or("problem.seed", 0)?,
                }
            }
            (None, None) => return Err(CliError::config(0, "no problem: set `problem.file` or `problem.family`")),
        };

        let beta: f64 = c.get_or("beta", 1.0)?;
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(CliError::config(c.line_of("beta"), "`beta` must be finite and non-negative"));
        }
        let heuristic = match c.get_str("heuristic").unwrap_or("sa") {
            "sa" => {
                let order = c.choice(
                    "heuristic.order",
                    &[("random", SweepOrder::RandomPermutation), ("sequential", SweepOrder::Sequential)],
                    SweepOrder::RandomPermutation,
                )?;
                let schedule = SaSchedule {
                    order,
                    ..SaSchedule::linear(
                        c.get_or("heuristic.beta_start", 0.1)?,
                        c.get_or("heuristic.beta_end", beta)?,
                        c.get_or("heuristic.n_steps", 100)?,
                        c.get_or("heuristic.sweeps_per_step", 1)?,
                    )
                };
                schedule
                    .validate()
                    .map_err(|e| CliError::config(c.line_of("heuristic.beta_start"), e.to_string()))?;
                HeuristicSpec::Annealing(schedule)
            }
            "exact" => HeuristicSpec::Exact,
            other => {
                return Err(CliError::config(
                    c.line_of("heuristic"),
                    format!("unknown heuristic `{other}` (sa, exact)"),
                ))
            }
        };

        let seed = c.get_or("seed", 0)?;
        let defaults = SamplerParams::default();
        let params = SamplerParams {
            population_size: c.get_or("sampler.population_size", defaults.population_size)?,
            theta: c.get_or("sampler.theta", defaults.theta)?,
            max_tree_size: c.get_or("sampler.max_tree_size", defaults.max_tree_size)?,
            count_threshold: c.get_or("sampler.count_threshold", defaults.count_threshold)?,
            beta,
            estimator: c.choice("sampler.estimator", ESTIMATORS, defaults.estimator)?,
            branch_rule: c.choice("sampler.branch_rule", BRANCH_RULES, defaults.branch_rule)?,
            seed,
            tree_mode: c.choice(
                "sampler.tree_mode",
                &[("cached", TreeMode::Cached), ("fresh", TreeMode::Fresh)],
                defaults.tree_mode,
            )?,
        };
        params
            .validate()
            .map_err(|e| CliError::config(c.line_of("sampler.population_size"), e.to_string()))?;

        let trees = c.get_or("trees", 1)?;
        if trees == 0 {
            return Err(CliError::config(c.line_of("trees"), "`trees` must be at least 1"));
        }
        let threads = c.get::<usize>("threads")?;
        if threads == Some(0) {
            return Err(CliError::config(c.line_of("threads"), "`threads` must be at least 1"));
        }
        let mcmc_initial = match c.get_str("mcmc.initial") {
            None => None,
            Some(s) => Some(
                s.parse::<SpinState>()
                    .map_err(|_| CliError::config(c.line_of("mcmc.initial"), format!("bad state `{s}`")))?,
            ),
        };
        Ok(RunConfig {
            problem,
            beta,
            heuristic,
            params,
            mode: c.choice("mode", MODES, Mode::Sss)?,
            draws: c.get_or("draws", 100)?,
            trees,
            threads,
            seed,
            mcmc_steps: c.get_or("mcmc.steps", 1000)?,
            mcmc_initial,
            output: c.get_str("output").map(PathBuf::from),
            hash: c.hash(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_fills_defaults() {
        let c = Config::parse("problem.family = chain # comment\nproblem.size = 10\n\ndraws=5\n").unwrap();
        let run = RunConfig::from_config(&c).unwrap();
        assert_eq!(
            run.problem,
            ProblemSource::Generate {
                family: Family::Chain { m: 10 },
                seed: 0
            }
        );
        assert_eq!(run.draws, 5);
        assert_eq!(run.mode, Mode::Sss);
        assert_eq!(run.params.population_size, 2000);
        match run.heuristic {
            HeuristicSpec::Annealing(s) => {
                assert_eq!((s.beta_start, s.beta_end, s.n_steps), (0.1, 1.0, 100));
            }
            HeuristicSpec::Exact => panic!(),
        }
    }

    #[test]
    fn errors_name_the_line() {
        let cases = [
            ("problem.family = chain\nproblem.size = 4\nbogus = 1\n", 3),
            ("problem.family = chain\nproblem.size = 4\ndraws = many\n", 3),
            ("problem.family = chain\nproblem.size = 4\nsampler.estimator = mle\n", 3),
            ("problem.family = chain\nproblem.size = 4\nseed = 1\nseed = 2\n", 4),
            ("problem.family = chain\nproblem.size = 4\nno equals sign\n", 3),
        ];
        for (text, want) in cases {
            let err = Config::parse(text).and_then(|c| RunConfig::from_config(&c)).unwrap_err();
            match err {
                CliError::Config { line, .. } => assert_eq!(line, want, "{text}"),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn hash_tracks_overrides() {
        let mut c = Config::parse("problem.family = chain\nproblem.size = 4\n").unwrap();
        let before = c.hash();
        assert_eq!(before.len(), 16);
        c.set("seed", "3");
        assert_ne!(c.hash(), before);
        let same = Config::parse("problem.size = 4\nseed = 3\nproblem.family = chain\n").unwrap();
        assert_eq!(same.hash(), c.hash());
        c.set("threads", "4");
        c.set("output", "elsewhere.csv");
        assert_eq!(same.hash(), c.hash());
    }

    #[test]
    fn grid_sizes_and_exact_heuristic() {
        let c = Config::parse(
            "problem.family = grid3d\nproblem.size = 2, 3, 4\nproblem.periodic = true\nheuristic = exact\n",
        )
        .unwrap();
        let run = RunConfig::from_config(&c).unwrap();
        assert_eq!(
            run.problem,
            ProblemSource::Generate {
                family: Family::Grid3d {
                    lx: 2,
                    ly: 3,
                    lz: 4,
                    periodic: true
                },
                seed: 0
            }
        );
        assert_eq!(run.heuristic, HeuristicSpec::Exact);
    }
}
