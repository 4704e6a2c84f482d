//! Sequential model-based optimization over mixed search spaces.
//!
//! Two surrogates are available. The GP surrogate fits one independent
//! Gaussian process per categorical combination over the unit-cube-scaled
//! numeric dimensions. The forest surrogate fits one regression forest over
//! one-hot categoricals plus scaled numerics and suits discrete spaces.
//! Both are driven by expected improvement, and a random-search baseline
//! shares the same trace format.
//!
//! Randomness: `ChaCha8Rng::seed_from_u64(seed)` with stream 0 for the
//! initial design and stream `i + 1` for iteration `i`, so a run resumed
//! from a partial trace reproduces the uninterrupted run.

mod forest;
mod gp;
mod space;

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub use forest::{rf_posterior, ForestParams, RandomForest, VARIANCE_FLOOR};
pub use gp::{gp_posterior, GpHyper, GpModel, Kernel, JITTER_MAX, JITTER_START, LENGTH_SCALE_GRID};
pub use space::{CategoricalDim, Config, ContinuousDim, IntegerDim, ParamValue, SearchSpace};

use space::{latin_hypercube, Point};

pub const DEFAULT_XI: f64 = 0.01;
pub const DEFAULT_CANDIDATES: usize = 2048;
/// Latin-hypercube points per categorical combination in the GP initial
/// design, in addition to the all-zero point.
pub const INITIAL_LHS: usize = 7;

/// `EI = (mu - f* - xi) Phi(z) + sigma phi(z)`, `z = (mu - f* - xi) / sigma`.
pub fn expected_improvement(mean: f64, variance: f64, best: f64, xi: f64) -> f64 {
    let sigma = variance.max(0.0).sqrt();
    let improvement = mean - best - xi;
    if sigma <= 0.0 {
        return improvement.max(0.0);
    }
    let z = improvement / sigma;
    let n = Normal::standard();
    (improvement * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Bayes,
    Random,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surrogate {
    #[default]
    Gp,
    RandomForest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub iteration: usize,
    pub config: Config,
    /// `None` marks a failed evaluation.
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub trials: Vec<Trial>,
    pub best: Option<Trial>,
    pub seed: u64,
    pub strategy: Strategy,
}

impl Trace {
    fn new(trials: Vec<Trial>, seed: u64, strategy: Strategy) -> Self {
        let mut best: Option<&Trial> = None;
        for t in &trials {
            if let Some(v) = t.objective {
                if best.is_none_or(|b| v > b.objective.expect("successful")) {
                    best = Some(t);
                }
            }
        }
        let best = best.cloned();
        Self {
            trials,
            best,
            seed,
            strategy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeOptions {
    pub budget: usize,
    pub strategy: Strategy,
    pub surrogate: Surrogate,
    pub seed: u64,
    pub xi: f64,
    pub candidates: usize,
    pub kernel: Kernel,
    /// Random initial points for the forest surrogate.
    pub forest_initial: usize,
    pub forest: ForestParams,
}

impl OptimizeOptions {
    pub fn new(budget: usize, strategy: Strategy, seed: u64) -> Self {
        Self {
            budget,
            strategy,
            surrogate: Surrogate::Gp,
            seed,
            xi: DEFAULT_XI,
            candidates: DEFAULT_CANDIDATES,
            kernel: Kernel::Matern52,
            forest_initial: 5,
            forest: ForestParams::default(),
        }
    }

    pub fn with_surrogate(mut self, surrogate: Surrogate) -> Self {
        self.surrogate = surrogate;
        self
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

struct Run<'a> {
    space: &'a SearchSpace,
    opts: &'a OptimizeOptions,
    points: Vec<Point>,
    trials: Vec<Trial>,
}

impl Run<'_> {
    fn initial_design(&self) -> Vec<Point> {
        let mut rng = stream(self.opts.seed, 0);
        match (self.opts.strategy, self.opts.surrogate) {
            (Strategy::Random, _) => Vec::new(),
            (Strategy::Bayes, Surrogate::Gp) => {
                let d = self.space.numeric_len();
                let parts = self.space.partition_count();
                let per_part: Vec<Vec<Vec<f64>>> = (0..parts)
                    .map(|_| {
                        let mut pts = vec![self.space.zero_unit()];
                        if d > 0 {
                            pts.extend(latin_hypercube(INITIAL_LHS, d, &mut rng));
                        }
                        pts
                    })
                    .collect();
                let rounds = per_part[0].len();
                (0..rounds)
                    .flat_map(|j| {
                        let per_part = &per_part;
                        (0..parts).map(move |p| Point {
                            cats: self.space.partition_cats(p),
                            unit: per_part[p][j].clone(),
                        })
                    })
                    .collect()
            }
            (Strategy::Bayes, Surrogate::RandomForest) => (0..self.opts.forest_initial.max(1))
                .map(|_| self.space.sample_uniform(&mut rng))
                .collect(),
        }
    }

    fn incumbent(&self) -> Option<f64> {
        self.trials
            .iter()
            .filter_map(|t| t.objective)
            .max_by(f64::total_cmp)
    }

    fn propose_gp(&self, rng: &mut ChaCha8Rng) -> Result<Option<Point>> {
        let Some(best) = self.incumbent() else {
            return Ok(None);
        };
        let d = self.space.numeric_len();
        let mut winner: Option<(f64, Point)> = None;
        for part in 0..self.space.partition_count() {
            let cats = self.space.partition_cats(part);
            let candidates: Vec<Vec<f64>> = if d == 0 {
                vec![Vec::new()]
            } else {
                (0..self.opts.candidates)
                    .map(|_| (0..d).map(|_| rand::Rng::random::<f64>(rng)).collect())
                    .collect()
            };
            let (xs, ys): (Vec<Vec<f64>>, Vec<f64>) = self
                .points
                .iter()
                .zip(&self.trials)
                .filter(|(p, t)| p.cats == cats && t.objective.is_some())
                .map(|(p, t)| (p.unit.clone(), t.objective.expect("filtered")))
                .unzip();
            if xs.is_empty() {
                continue;
            }
            let model = GpModel::fit_auto(&xs, &ys, self.opts.kernel)?;
            for c in candidates {
                let (m, v) = model.posterior(&c);
                let ei = expected_improvement(m, v, best, self.opts.xi);
                if winner.as_ref().is_none_or(|(w, _)| ei > *w) {
                    winner = Some((
                        ei,
                        Point {
                            cats: cats.clone(),
                            unit: c,
                        },
                    ));
                }
            }
        }
        Ok(winner.map(|(_, p)| p))
    }

    fn propose_forest(&self, rng: &mut ChaCha8Rng, iteration: usize) -> Result<Option<Point>> {
        let (xs, ys): (Vec<Vec<f64>>, Vec<f64>) = self
            .points
            .iter()
            .zip(&self.trials)
            .filter_map(|(p, t)| t.objective.map(|y| (self.space.features(p), y)))
            .unzip();
        let candidates: Vec<Point> = match self.space.discrete_cells() {
            Some(n) if n <= self.opts.candidates as u128 => {
                // unevaluated cells first; repeats only once the space is exhausted
                let mut cells = self.space.enumerate_cells();
                cells.shuffle(rng);
                let fresh: Vec<Point> = cells
                    .iter()
                    .filter(|c| !self.points.contains(c))
                    .cloned()
                    .collect();
                if fresh.is_empty() {
                    cells
                } else {
                    fresh
                }
            }
            _ => (0..self.opts.candidates)
                .map(|_| self.space.snap(self.space.sample_uniform(rng)))
                .collect(),
        };
        if xs.len() < 2 {
            return Ok(None);
        }
        let best = self.incumbent().expect("has successful trials");
        let params = ForestParams {
            seed: self
                .opts
                .forest
                .seed
                .wrapping_add(self.opts.seed)
                .wrapping_add(iteration as u64 * 1_000),
            ..self.opts.forest
        };
        let forest = RandomForest::fit(&xs, &ys, params)?;
        let mut winner: Option<(f64, Point)> = None;
        for c in candidates {
            let (m, v) = forest.posterior(&self.space.features(&c));
            let ei = expected_improvement(m, v, best, self.opts.xi);
            if winner.as_ref().is_none_or(|(w, _)| ei > *w) {
                winner = Some((ei, c));
            }
        }
        Ok(winner.map(|(_, p)| p))
    }

    fn propose(&self, iteration: usize, initial: &[Point]) -> Result<Point> {
        if let Some(p) = initial.get(iteration) {
            return Ok(p.clone());
        }
        let mut rng = stream(self.opts.seed, iteration as u64 + 1);
        let proposal = match self.opts.strategy {
            Strategy::Random => None,
            Strategy::Bayes => match self.opts.surrogate {
                Surrogate::Gp => self.propose_gp(&mut rng)?,
                Surrogate::RandomForest => self.propose_forest(&mut rng, iteration)?,
            },
        };
        Ok(match proposal {
            Some(p) => p,
            None => self.space.sample_uniform(&mut rng),
        })
    }
}

/// Runs `opts.budget` evaluations of `objective`, continuing after the
/// trials in `prior` (a trace prefix of an identical earlier run).
/// `on_trial` sees every new trial as soon as it is recorded.
pub fn optimize_resume<F, G>(
    space: &SearchSpace,
    opts: &OptimizeOptions,
    prior: Vec<Trial>,
    mut objective: F,
    mut on_trial: G,
) -> Result<Trace>
where
    F: FnMut(&Config) -> std::result::Result<f64, String>,
    G: FnMut(&Trial) -> Result<()>,
{
    space.validate()?;
    if opts.budget == 0 {
        return Err(Error::invalid("budget must be >= 1"));
    }
    if !(opts.xi >= 0.0) || opts.candidates == 0 {
        return Err(Error::invalid("xi must be >= 0 and candidates >= 1"));
    }
    if prior.len() > opts.budget {
        return Err(Error::invalid(format!(
            "trace already holds {} trials, more than the budget {}",
            prior.len(),
            opts.budget
        )));
    }
    let mut run = Run {
        space,
        opts,
        points: Vec::new(),
        trials: Vec::new(),
    };
    for (i, t) in prior.into_iter().enumerate() {
        if t.iteration != i {
            return Err(Error::invalid(format!(
                "trace line {i} has iteration {}",
                t.iteration
            )));
        }
        run.points.push(space.from_config(&t.config)?);
        run.trials.push(t);
    }
    let initial = run.initial_design();
    for iteration in run.trials.len()..opts.budget {
        let proposal = space.snap(run.propose(iteration, &initial)?);
        let config = space.to_config(&proposal);
        let point = space.from_config(&config)?;
        let (objective, error) = match objective(&config) {
            Ok(v) if v.is_finite() => (Some(v), None),
            Ok(v) => (
                None,
                Some(format!("objective returned non-finite value {v}")),
            ),
            Err(e) => (None, Some(e)),
        };
        let trial = Trial {
            iteration,
            config,
            objective,
            error,
        };
        on_trial(&trial)?;
        run.points.push(point);
        run.trials.push(trial);
    }
    Ok(Trace::new(run.trials, opts.seed, opts.strategy))
}

pub fn optimize<F>(space: &SearchSpace, opts: &OptimizeOptions, objective: F) -> Result<Trace>
where
    F: FnMut(&Config) -> std::result::Result<f64, String>,
{
    optimize_resume(space, opts, Vec::new(), objective, |_| Ok(()))
}

/// Appends one trial as a JSON line.
pub fn write_trial<W: Write>(mut w: W, trial: &Trial) -> Result<()> {
    let line = serde_json::to_string(trial)?;
    writeln!(w, "{line}").map_err(|e| Error::Format(format!("writing trace: {e}")))
}

/// Reads a JSON-lines trace; blank lines are skipped.
pub fn read_trials<R: BufRead>(r: R) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| Error::Format(format!("reading trace: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn read_trace_file(path: &Path) -> Result<Vec<Trial>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trials(std::io::BufReader::new(f))
}
