//! Hidden per-client participation probabilities and per-round Bernoulli
//! participation indicators.

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{CounterRng, Domain};

pub const DEFAULT_P_MIN: f64 = 0.02;
pub const DEFAULT_MEAN_PARTICIPATION: f64 = 0.1;
const SIMPLEX_TOLERANCE: f64 = 1e-12;

/// Inputs of the Dirichlet generation procedure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub clients: usize,
    pub classes: usize,
    /// Concentration of each client's class distribution.
    pub alpha_data: f64,
    /// Concentration of the shared class-importance vector.
    pub alpha_participation: f64,
    /// Target mean participation probability before clamping.
    pub mean_participation: f64,
    pub p_min: f64,
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if self.clients < 1 {
            return Err(Error::config("population needs at least 1 client"));
        }
        if self.classes < 2 {
            return Err(Error::config("population needs at least 2 classes"));
        }
        if !(self.alpha_data > 0.0 && self.alpha_data.is_finite()) {
            return Err(Error::config("alpha_data must be positive"));
        }
        if !(self.alpha_participation > 0.0 && self.alpha_participation.is_finite()) {
            return Err(Error::config("alpha_participation must be positive"));
        }
        if !(self.mean_participation > 0.0 && self.mean_participation <= 1.0) {
            return Err(Error::config("mean_participation must lie in (0, 1]"));
        }
        if !(self.p_min > 0.0 && self.p_min <= 1.0) {
            return Err(Error::config("p_min must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PopulationMetadata {
    Generated {
        #[serde(flatten)]
        params: GenerationParams,
        seed: u64,
    },
    Manual,
}

/// Participation probabilities and class distributions of all clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientPopulation {
    #[serde(rename = "N")]
    pub clients: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub p: Vec<f64>,
    pub kappa: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    pub metadata: PopulationMetadata,
}

/// Participation indicators of one round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipationRecord {
    pub round: u64,
    pub indicators: Vec<bool>,
}

impl ParticipationRecord {
    pub fn count(&self) -> usize {
        self.indicators.iter().filter(|&&b| b).count()
    }
}

fn dirichlet(alpha: f64, dim: usize, rng: &mut CounterRng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config(format!("gamma({alpha}): {e}")))?;
    // Small concentrations can underflow every coordinate; redraw.
    for _ in 0..1000 {
        let draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
    Err(Error::Internal(format!("Dirichlet({alpha}) draw underflowed repeatedly")))
}

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::config(format!("{what} has a negative entry")));
    }
    let total: f64 = v.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::config(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

/// Draws `κ_n ~ Dir(α_d)` per client and one shared `q ~ Dir(α_p)`, then sets
/// `p_n = C·μ·⟨κ_n, q⟩` clamped to `[p_min, 1]`.
pub fn generate_population(params: GenerationParams, seed: u64) -> Result<ClientPopulation> {
    params.validate()?;
    let c = params.classes;
    let mut q_rng = CounterRng::keyed(seed, Domain::Population, 0, u64::MAX, 0);
    let q = dirichlet(params.alpha_participation, c, &mut q_rng)?;
    let scale = c as f64 * params.mean_participation;
    let mut kappa = Vec::with_capacity(params.clients);
    let mut p = Vec::with_capacity(params.clients);
    for n in 0..params.clients {
        let mut rng = CounterRng::keyed(seed, Domain::Population, 0, n as u64, 0);
        let k = dirichlet(params.alpha_data, c, &mut rng)?;
        let raw: f64 = scale * k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
        p.push(raw.clamp(params.p_min, 1.0));
        kappa.push(k);
    }
    Ok(ClientPopulation {
        clients: params.clients,
        classes: c,
        p,
        kappa,
        q,
        metadata: PopulationMetadata::Generated { params, seed },
    })
}

impl ClientPopulation {
    /// Population with explicitly given probabilities. Class distributions
    /// default to uniform over `classes`.
    pub fn manual(p: Vec<f64>, kappa: Option<Vec<Vec<f64>>>, classes: usize) -> Result<Self> {
        let kappa = match kappa {
            Some(k) => k,
            None => vec![vec![1.0 / classes as f64; classes]; p.len()],
        };
        let classes = kappa.first().map(Vec::len).unwrap_or(classes);
        let pop = Self {
            clients: p.len(),
            classes,
            q: vec![1.0 / classes as f64; classes],
            p,
            kappa,
            metadata: PopulationMetadata::Manual,
        };
        pop.validate()?;
        Ok(pop)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients < 1 || self.p.len() != self.clients || self.kappa.len() != self.clients {
            return Err(Error::config(format!(
                "population declares {} clients but has {} probabilities and {} class distributions",
                self.clients,
                self.p.len(),
                self.kappa.len()
            )));
        }
        if let Some(n) = self.p.iter().position(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(Error::config(format!(
                "participation probability of client {n} is {}, must lie in (0, 1]",
                self.p[n]
            )));
        }
        if let PopulationMetadata::Generated { params, .. } = &self.metadata {
            if let Some(n) = self.p.iter().position(|p| *p < params.p_min) {
                return Err(Error::config(format!("client {n} is below p_min")));
            }
        }
        for (n, k) in self.kappa.iter().enumerate() {
            if k.len() != self.classes {
                return Err(Error::config(format!("kappa of client {n} has wrong length")));
            }
            check_simplex(k, &format!("kappa of client {n}"))?;
        }
        if self.q.len() != self.classes {
            return Err(Error::config("q has wrong length"));
        }
        check_simplex(&self.q, "q")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let pop: Self = serde_json::from_str(text)?;
        pop.validate()?;
        Ok(pop)
    }

    /// Bernoulli indicator of client `n` in round `t`; one uniform draw from
    /// the stream keyed by `(seed, t, n)`.
    #[inline]
    pub fn participates(&self, seed: u64, round: u64, n: usize) -> bool {
        let mut rng = CounterRng::keyed(seed, Domain::Participation, round, n as u64, 0);
        rng.next_f64() < self.p[n]
    }

    pub fn sample_round(&self, seed: u64, round: u64) -> ParticipationRecord {
        ParticipationRecord {
            round,
            indicators: (0..self.clients).map(|n| self.participates(seed, round, n)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn defaults(clients: usize) -> GenerationParams {
        GenerationParams {
            clients,
            classes: 10,
            alpha_data: 0.1,
            alpha_participation: 0.1,
            mean_participation: 0.1,
            p_min: DEFAULT_P_MIN,
        }
    }

    #[test]
    fn normalization_is_inner_product_when_c_mu_is_one() {
        let params = GenerationParams {
            p_min: 1e-9,
            ..defaults(50)
        };
        let pop = generate_population(params, 3).unwrap();
        for (p, k) in pop.p.iter().zip(&pop.kappa) {
            let inner: f64 = k.iter().zip(&pop.q).map(|(a, b)| a * b).sum();
            assert!((p - inner.max(1e-9)).abs() < 1e-15);
        }
    }

    #[test]
    fn near_uniform_dirichlet_gives_mu() {
        let params = GenerationParams {
            alpha_data: 1e6,
            alpha_participation: 1e6,
            ..defaults(20)
        };
        let pop = generate_population(params, 1).unwrap();
        for p in &pop.p {
            assert!((p - 0.1).abs() < 1e-3, "{p}");
        }
    }

    #[test]
    fn clamp_floor_is_exact() {
        let pop = generate_population(defaults(200), 5).unwrap();
        let mut floored = 0;
        for (p, k) in pop.p.iter().zip(&pop.kappa) {
            let raw: f64 = k.iter().zip(&pop.q).map(|(a, b)| a * b).sum();
            assert!(*p >= DEFAULT_P_MIN);
            if raw < DEFAULT_P_MIN {
                assert_eq!(*p, 0.02);
                floored += 1;
            }
        }
        assert!(floored > 0, "heterogeneous defaults should hit the floor");
    }

    #[test]
    fn simplex_invariants_and_mean_band() {
        let params = GenerationParams {
            alpha_data: 0.5,
            alpha_participation: 0.5,
            ..defaults(500)
        };
        let pop = generate_population(params, 11).unwrap();
        pop.validate().unwrap();
        let mean = pop.p.iter().sum::<f64>() / pop.p.len() as f64;
        assert!((0.05..=0.2).contains(&mean), "{mean}");
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(generate_population(GenerationParams { classes: 1, ..defaults(3) }, 0).is_err());
        assert!(generate_population(GenerationParams { clients: 0, ..defaults(3) }, 0).is_err());
        assert!(generate_population(GenerationParams { mean_participation: 0.0, ..defaults(3) }, 0).is_err());
        assert!(generate_population(GenerationParams { alpha_data: -1.0, ..defaults(3) }, 0).is_err());
        assert!(ClientPopulation::manual(vec![0.5, 0.0], None, 2).is_err());
        assert!(ClientPopulation::manual(vec![1.5], None, 2).is_err());
    }

    #[test]
    fn full_participation_and_determinism() {
        let pop = ClientPopulation::manual(vec![1.0; 7], None, 10).unwrap();
        assert!(pop.sample_round(3, 17).indicators.iter().all(|&b| b));
        let het = ClientPopulation::manual(vec![0.3, 0.6, 0.9], None, 10).unwrap();
        assert_eq!(het.sample_round(9, 4), het.sample_round(9, 4));
    }

    #[test]
    fn empirical_frequency_and_independence() {
        let pop = ClientPopulation::manual(vec![0.1, 0.1], None, 2).unwrap();
        let rounds = 100_000u64;
        let (mut s0, mut s1, mut s01) = (0.0, 0.0, 0.0);
        for t in 0..rounds {
            let r = pop.sample_round(42, t);
            let a = r.indicators[0] as u8 as f64;
            let b = r.indicators[1] as u8 as f64;
            s0 += a;
            s1 += b;
            s01 += a * b;
        }
        let m = rounds as f64;
        let f0 = s0 / m;
        let se = (0.1f64 * 0.9 / m).sqrt();
        assert!((f0 - 0.1).abs() <= 3.0 * se, "{f0}");
        let cov = s01 / m - f0 * (s1 / m);
        let corr = cov / ((f0 * (1.0 - f0)) * (s1 / m * (1.0 - s1 / m))).sqrt();
        assert!(corr.abs() < 0.02, "{corr}");
    }

    #[test]
    fn json_roundtrip() {
        let pop = generate_population(defaults(4), 8).unwrap();
        let back = ClientPopulation::from_json(&pop.to_json().unwrap()).unwrap();
        assert_eq!(pop, back);
        let text = pop.to_json().unwrap();
        assert!(text.contains("\"N\": 4") && text.contains("\"kappa\"") && text.contains("\"metadata\""));
    }
}
