//! Federated averaging with pluggable aggregation.
//!
//! Each round samples participation, runs `I` local SGD steps on every
//! participating client, and combines the resulting updates either with
//! per-client weights from a [`WeightEstimator`] or with one of the baseline
//! aggregators. Random draws are keyed by `(seed, round, client, step)`, so the
//! trace does not depend on how client work is scheduled across threads, and
//! updates are reduced in client-index order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AggregatorKind, ExperimentConfig, ObjectiveConfig, PopulationConfig};
use crate::error::{Error, Result};
use crate::linalg;
use crate::metrics::{optimality_targets, MetricTable, OptimalityTargets};
use crate::objective::{LogisticProblem, ObjectiveSpec};
use crate::participation::{generate_population, ClientPopulation, GenerationParams};
use crate::rng::{CounterRng, Domain};
use crate::weighting::{Strategy, WeightEstimator};
use rand_distr::{Distribution, StandardNormal};

/// Runs abort once `‖x‖` exceeds this.
pub const DIVERGENCE_THRESHOLD: f64 = 1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    /// `y_{t,I} − x_t`; zero for non-participants.
    pub delta: Vec<f64>,
    pub participated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub indicators: Vec<bool>,
    /// Weights applied in this round. Absent for aggregators that are not
    /// a per-client reweighting (average-participating, FedVarp, MIFA).
    pub weights: Option<Vec<f64>>,
    /// `‖x_{t+1} − x_t‖`.
    pub step_norm: f64,
}

/// Model parameters at the start of `round`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub round: u64,
    pub x: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<RoundRecord>,
    pub snapshots: Vec<Snapshot>,
}

impl Trace {
    pub fn final_x(&self) -> Option<&[f64]> {
        self.snapshots.last().map(|s| s.x.as_slice())
    }
}

/// Objective and population materialized from a config.
#[derive(Clone, Debug)]
pub struct Setup {
    pub objective: ObjectiveSpec,
    pub population: ClientPopulation,
}

fn gaussian_vectors(seed: u64, tag: u64, count: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|n| {
            let mut rng = CounterRng::keyed(seed, Domain::Objective, tag, n as u64, 0);
            (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect()
        })
        .collect()
}

fn resolve_centers(
    centers: &Option<Vec<Vec<f64>>>,
    dim: Option<usize>,
    scale: f64,
    clients: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    match centers {
        Some(c) => Ok(c.clone()),
        None => {
            let dim = dim.ok_or_else(|| Error::config("`objective.dim` is required when centers are not given"))?;
            Ok(gaussian_vectors(seed, 0, clients, dim, scale))
        }
    }
}

impl Setup {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let n = config.clients;
        let population = match &config.population {
            PopulationConfig::Manual { p, kappa, classes } => ClientPopulation::manual(p.clone(), kappa.clone(), *classes)?,
            PopulationConfig::Generated {
                classes,
                alpha_data,
                alpha_participation,
                mean_participation,
                p_min,
            } => generate_population(
                GenerationParams {
                    clients: n,
                    classes: *classes,
                    alpha_data: *alpha_data,
                    alpha_participation: *alpha_participation,
                    mean_participation: *mean_participation,
                    p_min: *p_min,
                },
                config.seed,
            )?,
            PopulationConfig::File { path } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::config(format!("cannot read population file {}: {e}", path.display())))?;
                ClientPopulation::from_json(&text)?
            }
        };
        if population.clients != n {
            return Err(Error::config(format!(
                "population has {} clients but `clients` = {n}",
                population.clients
            )));
        }
        let objective = match &config.objective {
            ObjectiveConfig::QuadraticIsotropic {
                dim,
                centers,
                center_scale,
                noise_sigma,
            } => ObjectiveSpec::isotropic(resolve_centers(centers, *dim, *center_scale, n, config.seed)?, *noise_sigma)?,
            ObjectiveConfig::QuadraticGeneral {
                dim,
                centers,
                hessians,
                curvature_range,
                center_scale,
                noise_sigma,
            } => {
                let centers = resolve_centers(centers, *dim, *center_scale, n, config.seed)?;
                let d = centers[0].len();
                let hessians = match hessians {
                    Some(h) => h.clone(),
                    None => {
                        let [lo, hi] = *curvature_range;
                        if !(lo > 0.0 && hi >= lo) {
                            return Err(Error::config("`objective.curvature_range` must satisfy 0 < lo <= hi"));
                        }
                        (0..n)
                            .map(|c| {
                                let mut rng = CounterRng::keyed(config.seed, Domain::Objective, 1, c as u64, 0);
                                (0..d)
                                    .map(|i| {
                                        let mut row = vec![0.0; d];
                                        row[i] = lo + (hi - lo) * rng.next_f64();
                                        row
                                    })
                                    .collect()
                            })
                            .collect()
                    }
                };
                ObjectiveSpec::general(hessians, centers, *noise_sigma)?
            }
            ObjectiveConfig::LogisticSynthetic {
                features,
                samples_per_client,
                separation,
                batch_size,
            } => {
                let problem =
                    LogisticProblem::synthesize(&population.kappa, *features, *samples_per_client, *separation, config.seed)?;
                ObjectiveSpec::logistic(problem, *batch_size)?
            }
        };
        if objective.num_clients() != n {
            return Err(Error::config(format!(
                "objective has {} clients but `clients` = {n}",
                objective.num_clients()
            )));
        }
        if let Some(x0) = &config.initial {
            if x0.len() != objective.dim() {
                return Err(Error::config(format!(
                    "`initial` has dimension {} but the objective has {}",
                    x0.len(),
                    objective.dim()
                )));
            }
        }
        Ok(Self { objective, population })
    }

    /// Targets for the distance columns, or `None` for logistic objectives
    /// unless the numerical oracle is enabled.
    pub fn targets(&self, config: &ExperimentConfig) -> Result<Option<OptimalityTargets>> {
        if !self.objective.is_quadratic() && !config.metrics.logistic_oracle {
            return Ok(None);
        }
        optimality_targets(&self.objective, &self.population.p, config.metrics.alpha.as_deref()).map(Some)
    }
}

/// `I` sequential stochastic-gradient steps from `x`, each drawing from the
/// stream keyed by `(seed, round, client, step)`.
pub fn local_update(
    objective: &ObjectiveSpec,
    client: usize,
    x: &[f64],
    local_lr: f64,
    local_steps: usize,
    seed: u64,
    round: u64,
) -> Result<ClientUpdate> {
    let mut y = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for step in 0..local_steps {
        let mut rng = CounterRng::keyed(seed, Domain::GradientNoise, round, client as u64, step as u64);
        objective.stochastic_grad_into(client, &y, &mut rng, &mut g)?;
        linalg::axpy(-local_lr, &g, &mut y);
    }
    Ok(ClientUpdate {
        client,
        delta: linalg::sub(&y, x),
        participated: true,
    })
}

/// `x + (η/N) Σ_n ω_n Δ_n`, reduced in the order of `updates`.
pub fn aggregate_weighted(x: &[f64], updates: &[ClientUpdate], weights: &[f64], global_lr: f64, clients: usize) -> Vec<f64> {
    let base = global_lr / clients as f64;
    let mut acc = vec![0.0; x.len()];
    for u in updates {
        if u.participated {
            linalg::axpy(base * weights[u.client], &u.delta, &mut acc);
        }
    }
    x.iter().zip(&acc).map(|(a, b)| a + b).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    AverageParticipating,
    AverageAll,
    Fedvarp,
    Mifa,
}

/// Baseline aggregators. FedVarp and MIFA read and update `memory`, one
/// stored update per client, zero-initialized.
pub fn aggregate_baseline(
    kind: BaselineKind,
    x: &[f64],
    updates: &[ClientUpdate],
    global_lr: f64,
    clients: usize,
    memory: Option<&mut [Vec<f64>]>,
) -> Result<Vec<f64>> {
    let participants = updates.iter().filter(|u| u.participated).count();
    let d = x.len();
    match kind {
        BaselineKind::AverageAll => Ok(aggregate_weighted(x, updates, &vec![1.0; clients], global_lr, clients)),
        BaselineKind::AverageParticipating => {
            if participants == 0 {
                return Ok(x.to_vec());
            }
            let coef = global_lr / participants as f64;
            let mut acc = vec![0.0; d];
            for u in updates.iter().filter(|u| u.participated) {
                linalg::axpy(coef, &u.delta, &mut acc);
            }
            Ok(x.iter().zip(&acc).map(|(a, b)| a + b).collect())
        }
        BaselineKind::Fedvarp | BaselineKind::Mifa => {
            let memory = memory.ok_or_else(|| Error::config("FedVarp and MIFA need server memory"))?;
            if memory.len() != clients || memory.iter().any(|m| m.len() != d) {
                return Err(Error::config("server memory has the wrong shape"));
            }
            let mut acc = vec![0.0; d];
            if kind == BaselineKind::Fedvarp {
                if participants > 0 {
                    let coef = 1.0 / participants as f64;
                    for u in updates.iter().filter(|u| u.participated) {
                        for ((a, dv), yv) in acc.iter_mut().zip(&u.delta).zip(&memory[u.client]) {
                            *a += coef * (dv - yv);
                        }
                    }
                }
                for y in memory.iter() {
                    linalg::axpy(1.0 / clients as f64, y, &mut acc);
                }
                for u in updates.iter().filter(|u| u.participated) {
                    memory[u.client].copy_from_slice(&u.delta);
                }
            } else {
                for u in updates.iter().filter(|u| u.participated) {
                    memory[u.client].copy_from_slice(&u.delta);
                }
                for y in memory.iter() {
                    linalg::axpy(1.0 / clients as f64, y, &mut acc);
                }
            }
            Ok(x.iter().zip(&acc).map(|(a, b)| a + global_lr * b).collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Aggregation {
    Weighted { estimator: WeightEstimator, scale: f64 },
    Baseline { kind: BaselineKindTag, memory: Option<Vec<Vec<f64>>> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum BaselineKindTag {
    AverageParticipating,
    Fedvarp,
    Mifa,
}

impl From<BaselineKindTag> for BaselineKind {
    fn from(k: BaselineKindTag) -> Self {
        match k {
            BaselineKindTag::AverageParticipating => BaselineKind::AverageParticipating,
            BaselineKindTag::Fedvarp => BaselineKind::Fedvarp,
            BaselineKindTag::Mifa => BaselineKind::Mifa,
        }
    }
}

/// Everything needed to continue a run from the start of `round`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub round: u64,
    pub x: Vec<f64>,
    pub estimator: Option<WeightEstimator>,
    pub server_memory: Option<Vec<Vec<f64>>>,
}

/// A run in progress.
pub struct Simulation<'a> {
    config: &'a ExperimentConfig,
    setup: &'a Setup,
    aggregation: Aggregation,
    x: Vec<f64>,
    round: u64,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Simulation<'a> {
    pub fn new(config: &'a ExperimentConfig, setup: &'a Setup) -> Result<Self> {
        let n = config.clients;
        let d = setup.objective.dim();
        let agg = &config.aggregator;
        let aggregation = match agg.kind {
            AggregatorKind::Weighted => Aggregation::Weighted {
                estimator: WeightEstimator::new(
                    agg.weighting_strategy(config.rounds)?,
                    n,
                    config.rounds,
                    Some(&setup.population.p),
                )?,
                scale: agg.weight_scale,
            },
            // average-all is the weighted rule with unit weights
            AggregatorKind::AverageAll => Aggregation::Weighted {
                estimator: WeightEstimator::new(Strategy::ConstantOne, n, config.rounds, None)?,
                scale: 1.0,
            },
            AggregatorKind::AverageParticipating => Aggregation::Baseline {
                kind: BaselineKindTag::AverageParticipating,
                memory: None,
            },
            AggregatorKind::Fedvarp => Aggregation::Baseline {
                kind: BaselineKindTag::Fedvarp,
                memory: Some(vec![vec![0.0; d]; n]),
            },
            AggregatorKind::Mifa => Aggregation::Baseline {
                kind: BaselineKindTag::Mifa,
                memory: Some(vec![vec![0.0; d]; n]),
            },
        };
        let pool = if config.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.workers)
                    .build()
                    .map_err(|e| Error::Internal(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            config,
            setup,
            aggregation,
            x: config.initial.clone().unwrap_or_else(|| vec![0.0; d]),
            round: 0,
            pool,
        })
    }

    pub fn resume(config: &'a ExperimentConfig, setup: &'a Setup, checkpoint: Checkpoint) -> Result<Self> {
        let mut sim = Self::new(config, setup)?;
        if checkpoint.x.len() != setup.objective.dim() {
            return Err(Error::config("checkpoint dimension does not match the objective"));
        }
        match (&mut sim.aggregation, checkpoint.estimator, checkpoint.server_memory) {
            (Aggregation::Weighted { estimator, .. }, Some(saved), None) => {
                if saved.strategy() != estimator.strategy() {
                    return Err(Error::config("checkpoint was written with a different weighting strategy"));
                }
                *estimator = saved;
            }
            (Aggregation::Baseline { memory, .. }, None, saved) if memory.is_some() == saved.is_some() => *memory = saved,
            _ => return Err(Error::config("checkpoint does not match the configured aggregator")),
        }
        sim.x = checkpoint.x;
        sim.round = checkpoint.round;
        Ok(sim)
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (estimator, server_memory) = match &self.aggregation {
            Aggregation::Weighted { estimator, .. } => (Some(estimator.clone()), None),
            Aggregation::Baseline { memory, .. } => (None, memory.clone()),
        };
        Checkpoint {
            round: self.round,
            x: self.x.clone(),
            estimator,
            server_memory,
        }
    }

    fn local_lr(&self) -> f64 {
        match self.config.lr_decay {
            Some(d) => self.config.local_lr * d.factor.powi((self.round / d.every) as i32),
            None => self.config.local_lr,
        }
    }

    fn client_updates(&self, indicators: &[bool]) -> Result<Vec<ClientUpdate>> {
        let cfg = self.config;
        let objective = &self.setup.objective;
        let lr = self.local_lr();
        let all = cfg.compute_all_clients;
        let chosen: Vec<usize> = (0..cfg.clients).filter(|&n| all || indicators[n]).collect();
        let work = |&n: &usize| -> Result<ClientUpdate> {
            let mut u = local_update(objective, n, &self.x, lr, cfg.local_steps, cfg.seed, self.round)?;
            if all {
                let mask = if indicators[n] { 1.0 } else { 0.0 };
                u.delta.iter_mut().for_each(|v| *v *= mask);
                u.participated = indicators[n];
            }
            Ok(u)
        };
        match &self.pool {
            Some(pool) => pool.install(|| chosen.par_iter().map(work).collect()),
            None => chosen.iter().map(work).collect(),
        }
    }

    /// Executes one round and returns its record.
    pub fn step(&mut self) -> Result<RoundRecord> {
        let cfg = self.config;
        let n = cfg.clients;
        let t = self.round;
        let participation = self.setup.population.sample_round(cfg.seed, t);
        let updates = self.client_updates(&participation.indicators)?;
        let (next, weights) = match &mut self.aggregation {
            Aggregation::Weighted { estimator, scale } => {
                let applied: Vec<f64> = estimator.weights().iter().map(|w| w * *scale).collect();
                let next = aggregate_weighted(&self.x, &updates, &applied, cfg.global_lr, n);
                estimator.advance(&participation.indicators)?;
                (next, Some(applied))
            }
            Aggregation::Baseline { kind, memory } => {
                let next = aggregate_baseline((*kind).into(), &self.x, &updates, cfg.global_lr, n, memory.as_deref_mut())?;
                (next, None)
            }
        };
        let norm = linalg::norm(&next);
        if !linalg::all_finite(&next) || norm > DIVERGENCE_THRESHOLD {
            return Err(Error::Diverged {
                round: t,
                reason: format!("‖x‖ = {norm} after aggregation"),
            });
        }
        let step_norm = linalg::distance(&next, &self.x);
        self.x = next;
        self.round += 1;
        Ok(RoundRecord {
            round: t,
            indicators: participation.indicators,
            weights,
            step_norm,
        })
    }
}

/// A failed run with everything recorded before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub setup: Option<Setup>,
    pub trace: Trace,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for RunFailure {}

pub struct RunOutput {
    pub setup: Setup,
    pub trace: Trace,
}

impl RunOutput {
    pub fn metric_table(&self, config: &ExperimentConfig) -> Result<MetricTable> {
        let targets = self.setup.targets(config)?;
        MetricTable::from_trace(&self.trace, &self.setup.objective, &self.setup.population.p, targets.as_ref())
    }
}

/// Drives `sim` to the configured horizon, snapshotting the model on the
/// metric cadence and at the final round. `observer` sees the simulation
/// after every round.
pub fn drive<F>(sim: &mut Simulation<'_>, trace: &mut Trace, mut observer: F) -> Result<()>
where
    F: FnMut(&Simulation<'_>, &RoundRecord) -> Result<()>,
{
    let cfg = sim.config;
    if trace.snapshots.is_empty() {
        trace.snapshots.push(Snapshot {
            round: sim.round,
            x: sim.x.clone(),
        });
    }
    while sim.round < cfg.rounds {
        let record = sim.step()?;
        observer(sim, &record)?;
        trace.records.push(record);
        if sim.round.is_multiple_of(cfg.cadence) || sim.round == cfg.rounds {
            trace.snapshots.push(Snapshot {
                round: sim.round,
                x: sim.x.clone(),
            });
        }
    }
    Ok(())
}

/// Runs a configured experiment from scratch.
pub fn run_experiment(config: &ExperimentConfig) -> std::result::Result<RunOutput, Box<RunFailure>> {
    let setup = Setup::build(config).map_err(|error| {
        Box::new(RunFailure {
            error,
            setup: None,
            trace: Trace::default(),
        })
    })?;
    let mut trace = Trace::default();
    let result = Simulation::new(config, &setup).and_then(|mut sim| drive(&mut sim, &mut trace, |_, _| Ok(())));
    match result {
        Ok(()) => Ok(RunOutput { setup, trace }),
        Err(error) => Err(Box::new(RunFailure {
            error,
            setup: Some(setup),
            trace,
        })),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(text).unwrap()
    }

    fn quad_config(extra: &str, aggregator: &str) -> ExperimentConfig {
        config(&format!(
            r#"
clients = 3
rounds = 40
local_steps = 2
local_lr = 0.1
global_lr = 1.0
seed = 5
cadence = 1
{extra}
[aggregator]
{aggregator}

[objective]
kind = "quadratic_isotropic"
centers = [[0.0, 1.0], [2.0, -1.0], [4.0, 0.5]]
noise_sigma = 0.2

[population]
mode = "manual"
p = [0.8, 0.5, 0.2]
"#
        ))
    }

    #[test]
    fn zero_step_size_gives_zero_delta() {
        let obj = ObjectiveSpec::isotropic(vec![vec![1.0, 2.0]], 0.5).unwrap();
        let u = local_update(&obj, 0, &[0.3, 0.4], 0.0, 7, 1, 0).unwrap();
        assert_eq!(u.delta, vec![0.0, 0.0]);
    }

    #[test]
    fn exact_local_steps() {
        let obj = ObjectiveSpec::isotropic(vec![vec![1.0, -2.0]], 0.0).unwrap();
        let x = [3.0, 1.0];
        let g = 0.1;
        let one = local_update(&obj, 0, &x, g, 1, 0, 0).unwrap();
        assert!((one.delta[0] + g * 2.0).abs() < 1e-15 && (one.delta[1] + g * 3.0).abs() < 1e-15);
        let two = local_update(&obj, 0, &x, g, 2, 0, 0).unwrap();
        let c = g * (2.0 - g);
        assert!((two.delta[0] + c * 2.0).abs() < 1e-15 && (two.delta[1] + c * 3.0).abs() < 1e-15);
    }

    fn upd(client: usize, delta: Vec<f64>, participated: bool) -> ClientUpdate {
        ClientUpdate {
            client,
            delta,
            participated,
        }
    }

    #[test]
    fn weighted_formula() {
        let x = [1.0];
        let ups = [upd(0, vec![2.0], true), upd(1, vec![4.0], true)];
        assert_eq!(aggregate_weighted(&x, &ups, &[1.0, 2.0], 1.0, 2), vec![1.0 + 0.5 * (2.0 + 8.0)]);
        let zero = [upd(0, vec![0.0], true)];
        assert_eq!(aggregate_weighted(&x, &zero, &[3.0, 1.0], 1.0, 2), vec![1.0]);
    }

    #[test]
    fn full_participation_averages_coincide() {
        let x = [0.5, 0.5];
        let ups = [upd(0, vec![1.0, 0.0], true), upd(1, vec![0.0, 3.0], true)];
        let a = aggregate_baseline(BaselineKind::AverageParticipating, &x, &ups, 0.7, 2, None).unwrap();
        let b = aggregate_baseline(BaselineKind::AverageAll, &x, &ups, 0.7, 2, None).unwrap();
        assert_eq!(a, b);
        let none = aggregate_baseline(BaselineKind::AverageParticipating, &x, &[], 0.7, 2, None).unwrap();
        assert_eq!(none, x.to_vec());
    }

    #[test]
    fn fedvarp_first_round_is_participant_mean() {
        let x = [0.0];
        let mut mem = vec![vec![0.0]; 3];
        let ups = [upd(0, vec![3.0], true), upd(2, vec![1.0], true)];
        let next = aggregate_baseline(BaselineKind::Fedvarp, &x, &ups, 1.0, 3, Some(&mut mem)).unwrap();
        assert_eq!(next, vec![2.0]);
        assert_eq!(mem, vec![vec![3.0], vec![0.0], vec![1.0]]);
        assert!(aggregate_baseline(BaselineKind::Fedvarp, &x, &ups, 1.0, 3, None).is_err());
    }

    #[test]
    fn mifa_applies_stale_updates() {
        let mut mem = vec![vec![0.0]; 2];
        let r0 = aggregate_baseline(BaselineKind::Mifa, &[0.0], &[upd(0, vec![2.0], true), upd(1, vec![4.0], true)], 0.5, 2, Some(&mut mem)).unwrap();
        assert_eq!(r0, vec![0.5 * 3.0]);
        // nobody participates: the stored updates are applied again
        let r1 = aggregate_baseline(BaselineKind::Mifa, &r0, &[], 0.5, 2, Some(&mut mem)).unwrap();
        assert_eq!(r1, vec![1.5 + 1.5]);
    }

    #[test]
    fn zero_rounds_has_only_initial_snapshot() {
        let mut cfg = quad_config("", "kind = \"average_all\"");
        cfg.rounds = 0;
        let out = run_experiment(&cfg).unwrap();
        assert!(out.trace.records.is_empty());
        assert_eq!(out.trace.snapshots.len(), 1);
        assert_eq!(out.metric_table(&cfg).unwrap().rows.len(), 1);
    }

    #[test]
    fn worker_count_does_not_change_trace() {
        let a = quad_config("workers = 1", "kind = \"weighted\"\nstrategy = \"fedau_finite_k\"\nk = 5");
        let b = quad_config("workers = 4", "kind = \"weighted\"\nstrategy = \"fedau_finite_k\"\nk = 5");
        assert_eq!(run_experiment(&a).unwrap().trace, run_experiment(&b).unwrap().trace);
    }

    #[test]
    fn known_prob_matches_explicit_reciprocal_weights() {
        let known = quad_config("", "kind = \"weighted\"\nstrategy = \"known_prob\"");
        let out = run_experiment(&known).unwrap();
        let setup = &out.setup;
        // replay the same participation with hand-applied 1/p weights
        let w: Vec<f64> = setup.population.p.iter().map(|p| 1.0 / p).collect();
        let mut x = vec![0.0; 2];
        for t in 0..known.rounds {
            let rec = setup.population.sample_round(known.seed, t);
            let ups: Vec<ClientUpdate> = (0..3)
                .filter(|&n| rec.indicators[n])
                .map(|n| local_update(&setup.objective, n, &x, known.local_lr, known.local_steps, known.seed, t).unwrap())
                .collect();
            x = aggregate_weighted(&x, &ups, &w, known.global_lr, 3);
        }
        assert_eq!(out.trace.final_x().unwrap(), x.as_slice());
    }

    #[test]
    fn checkpoint_resume_reproduces_run() {
        for agg in [
            "kind = \"weighted\"\nstrategy = \"fedau_finite_k\"\nk = 4",
            "kind = \"fedvarp\"",
            "kind = \"mifa\"",
        ] {
            let cfg = quad_config("", agg);
            let setup = Setup::build(&cfg).unwrap();
            let mut straight = Simulation::new(&cfg, &setup).unwrap();
            let mut trace = Trace::default();
            drive(&mut straight, &mut trace, |_, _| Ok(())).unwrap();

            let mut first = Simulation::new(&cfg, &setup).unwrap();
            for _ in 0..17 {
                first.step().unwrap();
            }
            let json = serde_json::to_string(&first.checkpoint()).unwrap();
            let ck: Checkpoint = serde_json::from_str(&json).unwrap();
            let mut resumed = Simulation::resume(&cfg, &setup, ck).unwrap();
            while resumed.round() < cfg.rounds {
                resumed.step().unwrap();
            }
            assert_eq!(resumed.x(), straight.x(), "{agg}");
        }
    }

    #[test]
    fn divergence_aborts_with_partial_trace() {
        let mut cfg = quad_config("", "kind = \"average_all\"");
        cfg.local_lr = 3.0;
        cfg.local_steps = 5;
        cfg.global_lr = 1.0;
        cfg.rounds = 10_000;
        let fail = run_experiment(&cfg).err().expect("must diverge");
        assert!(matches!(fail.error, Error::Diverged { .. }));
        assert!(!fail.trace.records.is_empty());
        assert!(fail.trace.records.len() < 10_000);
    }

    #[test]
    fn baselines_record_no_weights() {
        let cfg = quad_config("", "kind = \"average_participating\"");
        let out = run_experiment(&cfg).unwrap();
        assert!(out.trace.records.iter().all(|r| r.weights.is_none()));
        let table = out.metric_table(&cfg).unwrap();
        assert!(table.rows.iter().all(|r| r.weight_error_cum.is_none()));
    }

    #[test]
    fn generated_objectives_build() {
        let gen = config(
            r#"
clients = 4
rounds = 5
[aggregator]
kind = "mifa"
[objective]
kind = "quadratic_general"
dim = 3
[population]
mode = "generated"
"#,
        );
        let setup = Setup::build(&gen).unwrap();
        assert_eq!(setup.objective.dim(), 3);
        assert!(setup.objective.smoothness().unwrap() <= 4.0);
        run_experiment(&gen).unwrap();
    }
}
