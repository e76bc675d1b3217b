use std::path::Path;

use fedau::engine::{drive, Checkpoint, Setup, Simulation, Trace};
use fedau::participation::ClientPopulation;
use fedau::{ExperimentConfig, MetricTable};
use serde::Serialize;

use crate::output::{self, Failure};

pub const METRICS_FILE: &str = "metrics.csv";
pub const POPULATION_FILE: &str = "population.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_sha256: &'a str,
    seed: u64,
    #[serde(flatten)]
    body: &'a T,
}

/// Population file with provenance. Extra keys are ignored when the file is
/// loaded back as a `file` population.
pub fn population_json(population: &ClientPopulation, digest: &str, seed: u64) -> Result<String, Failure> {
    let stamped = Stamped {
        config_sha256: digest,
        seed,
        body: population,
    };
    let mut text = serde_json::to_string_pretty(&stamped).map_err(|e| Failure::new(output::EXIT_FAILURE, e.to_string()))?;
    text.push('\n');
    Ok(text)
}

/// Result of one run whose outputs were written, possibly after divergence.
pub struct RunArtifacts {
    pub table: MetricTable,
    pub failure: Option<Failure>,
}

/// Runs `cfg` and writes metrics, population and checkpoints under `dir`.
/// A diverged run still writes everything recorded up to the failure.
pub fn execute(cfg: &ExperimentConfig, digest: &str, dir: &Path) -> Result<RunArtifacts, Failure> {
    let setup = Setup::build(cfg)?;
    let label = cfg.aggregator.label();
    output::write(&dir.join(POPULATION_FILE), population_json(&setup.population, digest, cfg.seed)?)?;

    let checkpoints = dir.join(CHECKPOINT_DIR);
    let mut trace = Trace::default();
    let result = Simulation::new(cfg, &setup).and_then(|mut sim| {
        drive(&mut sim, &mut trace, |sim, _| {
            match cfg.checkpoint_every {
                Some(every) if sim.round() % every == 0 => {
                    let ckpt: Checkpoint = sim.checkpoint();
                    let path = checkpoints.join(format!("round-{:08}.json", sim.round()));
                    let stamped = Stamped {
                        config_sha256: digest,
                        seed: cfg.seed,
                        body: &ckpt,
                    };
                    if let Some(parent) = path.parent() {
                        std::fs::create_dir_all(parent)?;
                    }
                    std::fs::write(&path, serde_json::to_string(&stamped)?)?;
                    Ok(())
                }
                _ => Ok(()),
            }
        })
    });

    let targets = setup.targets(cfg)?;
    let table = MetricTable::from_trace(&trace, &setup.objective, &setup.population.p, targets.as_ref())?;
    let csv = table.to_csv_string(&output::provenance(digest, cfg.seed, &label));
    output::write(&dir.join(METRICS_FILE), csv)?;
    Ok(RunArtifacts {
        table,
        failure: result.err().map(Failure::from),
    })
}
