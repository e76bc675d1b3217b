//! Local objectives `F_n`, their exact and stochastic gradients, and
//! minimizers of nonnegatively weighted sums `Σ w_n F_n`.
//!
//! The quadratic families have closed-form minimizers so that the targets of
//! both the uniform objective `f = (1/N) Σ F_n` and any reweighted objective
//! are exact. The logistic family is a qualitative workload; its minimizers
//! come from a deterministic full-gradient oracle.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{CounterRng, Domain};

pub const MIN_EIGENVALUE: f64 = 1e-6;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_CLASS_SEPARATION: f64 = 2.0;
const ORACLE_TOLERANCE: f64 = 1e-8;
const ORACLE_MAX_ITERS: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveKind {
    QuadraticIsotropic,
    QuadraticGeneral,
    LogisticSynthetic,
}

/// One client's labeled samples, features stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ClientData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Multinomial logistic regression over per-client datasets.
///
/// Parameters are laid out as a `classes × features` weight matrix (row-major)
/// followed by one bias per class.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticProblem {
    pub classes: usize,
    pub features: usize,
    pub clients: Vec<ClientData>,
}

impl LogisticProblem {
    /// Draws client datasets whose label proportions follow `kappa[n]` and
    /// whose features are unit-covariance Gaussians around per-class means
    /// placed at distance `separation` from the origin.
    pub fn synthesize(
        kappa: &[Vec<f64>],
        features: usize,
        samples_per_client: usize,
        separation: f64,
        seed: u64,
    ) -> Result<Self> {
        let classes = kappa.first().map(Vec::len).unwrap_or(0);
        if classes < 2 {
            return Err(Error::config("logistic objective needs at least 2 classes"));
        }
        if features == 0 || samples_per_client == 0 {
            return Err(Error::config(
                "logistic objective needs features >= 1 and samples_per_client >= 1",
            ));
        }
        let mut mean_rng = CounterRng::keyed(seed, Domain::Dataset, 0, u64::MAX, 0);
        let means: Vec<Vec<f64>> = (0..classes)
            .map(|_| loop {
                let v: Vec<f64> = (0..features)
                    .map(|_| StandardNormal.sample(&mut mean_rng))
                    .collect();
                let len = linalg::norm(&v);
                if len > 1e-12 {
                    break v.iter().map(|x| separation * x / len).collect();
                }
            })
            .collect();

        let clients = kappa
            .iter()
            .enumerate()
            .map(|(n, proportions)| {
                let mut rng = CounterRng::keyed(seed, Domain::Dataset, 0, n as u64, 0);
                let mut feats = Vec::with_capacity(samples_per_client * features);
                let mut labels = Vec::with_capacity(samples_per_client);
                for _ in 0..samples_per_client {
                    let label = categorical(proportions, rng.random::<f64>());
                    labels.push(label);
                    for m in &means[label] {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        feats.push(m + z);
                    }
                }
                ClientData {
                    features: feats,
                    labels,
                }
            })
            .collect();
        Ok(Self {
            classes,
            features,
            clients,
        })
    }

    fn param_dim(&self) -> usize {
        self.classes * (self.features + 1)
    }

    /// Accumulates `scale * ∇ CE(sample)` into `out` and returns the sample loss.
    fn accumulate_sample(
        &self,
        x: &[f64],
        row: &[f64],
        label: usize,
        scale: f64,
        logits: &mut [f64],
        out: Option<&mut [f64]>,
    ) -> f64 {
        let c = self.classes;
        let f = self.features;
        let (weights, bias) = x.split_at(c * f);
        for k in 0..c {
            logits[k] = linalg::dot(&weights[k * f..(k + 1) * f], row) + bias[k];
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            z += *l;
        }
        let loss = z.ln() + max - (logits[label].ln() + max);
        if let Some(out) = out {
            let (gw, gb) = out.split_at_mut(c * f);
            for k in 0..c {
                let mut r = logits[k] / z;
                if k == label {
                    r -= 1.0;
                }
                let coef = scale * r;
                linalg::axpy(coef, row, &mut gw[k * f..(k + 1) * f]);
                gb[k] += coef;
            }
        }
        loss
    }

    fn client_loss_grad(&self, n: usize, x: &[f64], out: Option<&mut [f64]>) -> f64 {
        let data = &self.clients[n];
        let f = self.features;
        let scale = 1.0 / data.len() as f64;
        let mut logits = vec![0.0; self.classes];
        let mut loss = 0.0;
        match out {
            Some(out) => {
                out.iter_mut().for_each(|v| *v = 0.0);
                for (j, &label) in data.labels.iter().enumerate() {
                    let row = &data.features[j * f..(j + 1) * f];
                    loss += self.accumulate_sample(x, row, label, scale, &mut logits, Some(out));
                }
            }
            None => {
                for (j, &label) in data.labels.iter().enumerate() {
                    let row = &data.features[j * f..(j + 1) * f];
                    loss += self.accumulate_sample(x, row, label, scale, &mut logits, None);
                }
            }
        }
        loss * scale
    }

    /// Upper bound on the smoothness constant of every sample loss.
    fn smoothness_bound(&self) -> f64 {
        let f = self.features;
        let mut max_sq: f64 = 0.0;
        for data in &self.clients {
            for j in 0..data.len() {
                let row = &data.features[j * f..(j + 1) * f];
                max_sq = max_sq.max(linalg::norm_sq(row) + 1.0);
            }
        }
        0.5 * max_sq
    }
}

fn categorical(proportions: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in proportions.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    proportions.len() - 1
}

#[derive(Clone, Debug)]
enum LocalModels {
    Isotropic {
        centers: Vec<Vec<f64>>,
    },
    General {
        hessians: Vec<DMatrix<f64>>,
        centers: Vec<Vec<f64>>,
    },
    Logistic(LogisticProblem),
}

/// The collection of local objectives together with the stochastic-gradient
/// noise model.
#[derive(Clone, Debug)]
pub struct ObjectiveSpec {
    dim: usize,
    noise_sigma: f64,
    batch_size: usize,
    models: LocalModels,
}

/// Minimizer of a weighted objective. `numerical` is set when it comes from
/// the iterative oracle rather than a closed form.
#[derive(Clone, Debug, PartialEq)]
pub struct Minimizer {
    pub x: Vec<f64>,
    pub numerical: bool,
}

/// Bound on `max_n ‖∇F_n − ∇f‖`; `approximate` marks a sampled supremum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Divergence {
    pub value: f64,
    pub approximate: bool,
}

fn check_centers(centers: &[Vec<f64>]) -> Result<usize> {
    let dim = centers
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::config("objective needs at least one client"))?;
    if dim == 0 {
        return Err(Error::config("objective dimension must be positive"));
    }
    if let Some(n) = centers.iter().position(|c| c.len() != dim) {
        return Err(Error::config(format!(
            "client {n} center has dimension {} but client 0 has {dim}",
            centers[n].len()
        )));
    }
    if !centers.iter().all(|c| linalg::all_finite(c)) {
        return Err(Error::config("centers must be finite"));
    }
    Ok(dim)
}

fn check_sigma(noise_sigma: f64) -> Result<()> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::config("noise_sigma must be a finite nonnegative number"));
    }
    Ok(())
}

impl ObjectiveSpec {
    /// `F_n(x) = ½‖x − c_n‖²`.
    pub fn isotropic(centers: Vec<Vec<f64>>, noise_sigma: f64) -> Result<Self> {
        let dim = check_centers(&centers)?;
        check_sigma(noise_sigma)?;
        Ok(Self {
            dim,
            noise_sigma,
            batch_size: DEFAULT_BATCH_SIZE,
            models: LocalModels::Isotropic { centers },
        })
    }

    /// `F_n(x) = ½ (x − c_n)ᵀ H_n (x − c_n)` with each `H_n` symmetric
    /// positive definite.
    pub fn general(hessians: Vec<Vec<Vec<f64>>>, centers: Vec<Vec<f64>>, noise_sigma: f64) -> Result<Self> {
        let dim = check_centers(&centers)?;
        check_sigma(noise_sigma)?;
        if hessians.len() != centers.len() {
            return Err(Error::config(format!(
                "{} hessians given for {} clients",
                hessians.len(),
                centers.len()
            )));
        }
        let mut mats = Vec::with_capacity(hessians.len());
        for (n, rows) in hessians.iter().enumerate() {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(Error::config(format!("hessian of client {n} is not {dim}x{dim}")));
            }
            let h = DMatrix::from_fn(dim, dim, |i, j| rows[i][j]);
            let scale = h.amax().max(1.0);
            if (&h - h.transpose()).amax() > 1e-12 * scale {
                return Err(Error::config(format!("hessian of client {n} is not symmetric")));
            }
            let min_eig = h.clone().symmetric_eigen().eigenvalues.min();
            if !(min_eig >= MIN_EIGENVALUE) {
                return Err(Error::config(format!(
                    "hessian of client {n} has minimum eigenvalue {min_eig}, need >= {MIN_EIGENVALUE}"
                )));
            }
            mats.push(h);
        }
        Ok(Self {
            dim,
            noise_sigma,
            batch_size: DEFAULT_BATCH_SIZE,
            models: LocalModels::General {
                hessians: mats,
                centers,
            },
        })
    }

    /// Logistic objective; stochastic gradients are minibatch gradients of
    /// size `batch_size`, sampled with replacement.
    pub fn logistic(problem: LogisticProblem, batch_size: usize) -> Result<Self> {
        if problem.clients.is_empty() {
            return Err(Error::config("objective needs at least one client"));
        }
        if batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        for (n, data) in problem.clients.iter().enumerate() {
            if data.is_empty() {
                return Err(Error::config(format!("client {n} has no samples")));
            }
            if data.features.len() != data.len() * problem.features {
                return Err(Error::config(format!("client {n} feature matrix has wrong size")));
            }
            if let Some(&bad) = data.labels.iter().find(|&&l| l >= problem.classes) {
                return Err(Error::config(format!(
                    "client {n} has label {bad} outside [0, {})",
                    problem.classes
                )));
            }
        }
        Ok(Self {
            dim: problem.param_dim(),
            noise_sigma: 0.0,
            batch_size,
            models: LocalModels::Logistic(problem),
        })
    }

    pub fn kind(&self) -> ObjectiveKind {
        match self.models {
            LocalModels::Isotropic { .. } => ObjectiveKind::QuadraticIsotropic,
            LocalModels::General { .. } => ObjectiveKind::QuadraticGeneral,
            LocalModels::Logistic(_) => ObjectiveKind::LogisticSynthetic,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_clients(&self) -> usize {
        match &self.models {
            LocalModels::Isotropic { centers } | LocalModels::General { centers, .. } => centers.len(),
            LocalModels::Logistic(p) => p.clients.len(),
        }
    }

    /// Configured noise level. Zero for logistic objectives, whose noise
    /// comes from minibatching; see [`ObjectiveSpec::measured_noise_power`].
    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn is_quadratic(&self) -> bool {
        !matches!(self.models, LocalModels::Logistic(_))
    }

    /// Maximum curvature over all clients (the smoothness constant `L`) for
    /// quadratic objectives.
    pub fn smoothness(&self) -> Option<f64> {
        match &self.models {
            LocalModels::Isotropic { .. } => Some(1.0),
            LocalModels::General { hessians, .. } => Some(
                hessians
                    .iter()
                    .map(|h| h.clone().symmetric_eigen().eigenvalues.max())
                    .fold(0.0, f64::max),
            ),
            LocalModels::Logistic(_) => None,
        }
    }

    pub fn logistic_problem(&self) -> Option<&LogisticProblem> {
        match &self.models {
            LocalModels::Logistic(p) => Some(p),
            _ => None,
        }
    }

    fn check(&self, n: usize, x: &[f64]) -> Result<()> {
        if n >= self.num_clients() {
            return Err(Error::contract(format!(
                "client {n} out of range for {} clients",
                self.num_clients()
            )));
        }
        if x.len() != self.dim {
            return Err(Error::config(format!(
                "parameter has dimension {} but objective expects {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Local loss `F_n(x)`.
    pub fn loss(&self, n: usize, x: &[f64]) -> Result<f64> {
        self.check(n, x)?;
        Ok(match &self.models {
            LocalModels::Isotropic { centers } => 0.5 * linalg::distance(x, &centers[n]).powi(2),
            LocalModels::General { hessians, centers } => {
                let d = DVector::from_vec(linalg::sub(x, &centers[n]));
                0.5 * d.dot(&(&hessians[n] * &d))
            }
            LocalModels::Logistic(p) => p.client_loss_grad(n, x, None),
        })
    }

    /// Global loss `f(x) = (1/N) Σ F_n(x)`.
    pub fn global_loss(&self, x: &[f64]) -> Result<f64> {
        let n = self.num_clients();
        let mut total = 0.0;
        for i in 0..n {
            total += self.loss(i, x)?;
        }
        Ok(total / n as f64)
    }

    /// Exact gradient `∇F_n(x)`.
    pub fn grad(&self, n: usize, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.grad_into(n, x, &mut out)?;
        Ok(out)
    }

    pub fn grad_into(&self, n: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check(n, x)?;
        match &self.models {
            LocalModels::Isotropic { centers } => {
                for ((o, xi), ci) in out.iter_mut().zip(x).zip(&centers[n]) {
                    *o = xi - ci;
                }
            }
            LocalModels::General { hessians, centers } => {
                let h = &hessians[n];
                let c = &centers[n];
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..self.dim).map(|j| h[(i, j)] * (x[j] - c[j])).sum();
                }
            }
            LocalModels::Logistic(p) => {
                p.client_loss_grad(n, x, Some(out));
            }
        }
        Ok(())
    }

    /// Gradient of the uniform objective `f`.
    pub fn global_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.weighted_grad(&vec![1.0; self.num_clients()], x)
    }

    /// `Σ w_n ∇F_n(x) / Σ w_n`.
    pub fn weighted_grad(&self, weights: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let total: f64 = weights.iter().sum();
        let mut acc = vec![0.0; self.dim];
        let mut g = vec![0.0; self.dim];
        for (n, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            self.grad_into(n, x, &mut g)?;
            linalg::axpy(w / total, &g, &mut acc);
        }
        Ok(acc)
    }

    /// Stochastic gradient drawn from a caller-supplied stream, which the
    /// engine keys by `(round, client, local step)`.
    ///
    /// Quadratics add isotropic Gaussian noise of total power `σ²`
    /// (per-coordinate variance `σ²/d`). Logistic objectives average the
    /// gradient over a minibatch sampled with replacement.
    pub fn stochastic_grad(&self, n: usize, x: &[f64], rng: &mut CounterRng) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.stochastic_grad_into(n, x, rng, &mut out)?;
        Ok(out)
    }

    pub fn stochastic_grad_into(
        &self,
        n: usize,
        x: &[f64],
        rng: &mut CounterRng,
        out: &mut [f64],
    ) -> Result<()> {
        match &self.models {
            LocalModels::Logistic(p) => {
                self.check(n, x)?;
                let data = &p.clients[n];
                let f = p.features;
                let scale = 1.0 / self.batch_size as f64;
                let mut logits = vec![0.0; p.classes];
                out.iter_mut().for_each(|v| *v = 0.0);
                for _ in 0..self.batch_size {
                    let j = rng.random_range(0..data.len());
                    let row = &data.features[j * f..(j + 1) * f];
                    p.accumulate_sample(x, row, data.labels[j], scale, &mut logits, Some(out));
                }
            }
            _ => {
                self.grad_into(n, x, out)?;
                if self.noise_sigma > 0.0 {
                    let sd = self.noise_sigma / (self.dim as f64).sqrt();
                    for o in out.iter_mut() {
                        let z: f64 = StandardNormal.sample(rng);
                        *o += sd * z;
                    }
                }
            }
        }
        Ok(())
    }

    /// Empirical `E‖g_n(x) − ∇F_n(x)‖²` averaged over clients, from `draws`
    /// stochastic gradients per client.
    pub fn measured_noise_power(&self, x: &[f64], draws: usize, seed: u64) -> Result<f64> {
        let n_clients = self.num_clients();
        let mut total = 0.0;
        let mut g = vec![0.0; self.dim];
        for n in 0..n_clients {
            let exact = self.grad(n, x)?;
            for k in 0..draws {
                let mut rng = CounterRng::keyed(seed, Domain::Auxiliary, k as u64, n as u64, 0);
                self.stochastic_grad_into(n, x, &mut rng, &mut g)?;
                total += linalg::distance(&g, &exact).powi(2);
            }
        }
        Ok(total / (n_clients * draws.max(1)) as f64)
    }

    /// `argmin_x Σ w_n F_n(x)` for nonnegative weights with positive sum.
    pub fn weighted_minimizer(&self, weights: &[f64]) -> Result<Minimizer> {
        if weights.len() != self.num_clients() {
            return Err(Error::contract(format!(
                "{} weights for {} clients",
                weights.len(),
                self.num_clients()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::contract("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::contract("weights must have a positive sum"));
        }
        match &self.models {
            LocalModels::Isotropic { centers } => {
                let mut x = vec![0.0; self.dim];
                for (w, c) in weights.iter().zip(centers) {
                    linalg::axpy(*w, c, &mut x);
                }
                x.iter_mut().for_each(|v| *v /= total);
                Ok(Minimizer { x, numerical: false })
            }
            LocalModels::General { hessians, centers } => {
                let mut lhs = DMatrix::<f64>::zeros(self.dim, self.dim);
                let mut rhs = DVector::<f64>::zeros(self.dim);
                for ((w, h), c) in weights.iter().zip(hessians).zip(centers) {
                    if *w == 0.0 {
                        continue;
                    }
                    lhs += h * *w;
                    rhs += (h * DVector::from_column_slice(c)) * *w;
                }
                let chol = lhs
                    .cholesky()
                    .ok_or_else(|| Error::Internal("weighted Hessian is not positive definite".into()))?;
                Ok(Minimizer {
                    x: chol.solve(&rhs).as_slice().to_vec(),
                    numerical: false,
                })
            }
            LocalModels::Logistic(p) => {
                let x = logistic_oracle(self, p, weights, total)?;
                Ok(Minimizer { x, numerical: true })
            }
        }
    }

    /// Bound `δ` on `max_n ‖∇F_n(x) − ∇f(x)‖`.
    ///
    /// Exact whenever the difference does not depend on `x` (isotropic
    /// quadratics, or general quadratics sharing one Hessian). Otherwise the
    /// supremum is sampled over a probe grid: the origin, the minimizer of
    /// `f` when cheap, and unit offsets from both along every axis.
    pub fn gradient_divergence(&self) -> Result<Divergence> {
        let n = self.num_clients();
        let constant = match &self.models {
            LocalModels::Isotropic { .. } => true,
            LocalModels::General { hessians, .. } => hessians.iter().all(|h| h == &hessians[0]),
            LocalModels::Logistic(_) => false,
        };
        let zero = vec![0.0; self.dim];
        let sup_at = |x: &[f64]| -> Result<f64> {
            let global = self.global_grad(x)?;
            let mut worst: f64 = 0.0;
            for i in 0..n {
                worst = worst.max(linalg::distance(&self.grad(i, x)?, &global));
            }
            Ok(worst)
        };
        if constant {
            return Ok(Divergence {
                value: sup_at(&zero)?,
                approximate: false,
            });
        }
        let mut bases = vec![zero];
        if self.is_quadratic() {
            bases.push(self.weighted_minimizer(&vec![1.0; n])?.x);
        }
        let mut value: f64 = 0.0;
        for base in &bases {
            value = value.max(sup_at(base)?);
            for j in 0..self.dim {
                for sign in [-1.0, 1.0] {
                    let mut probe = base.clone();
                    probe[j] += sign;
                    value = value.max(sup_at(&probe)?);
                }
            }
        }
        Ok(Divergence {
            value,
            approximate: true,
        })
    }
}

/// Nesterov-accelerated full-gradient descent with adaptive restart on the
/// normalized weighted logistic objective.
fn logistic_oracle(spec: &ObjectiveSpec, problem: &LogisticProblem, weights: &[f64], total: f64) -> Result<Vec<f64>> {
    let dim = spec.dim;
    let step = 1.0 / problem.smoothness_bound();
    let grad_at = |x: &[f64], out: &mut Vec<f64>| -> Result<()> {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut g = vec![0.0; dim];
        for (n, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            problem.client_loss_grad(n, x, Some(&mut g));
            linalg::axpy(w / total, &g, out);
        }
        Ok(())
    };
    let mut x = vec![0.0; dim];
    let mut x_prev = x.clone();
    let mut y = x.clone();
    let mut g = vec![0.0; dim];
    let mut momentum_k = 0usize;
    for _ in 0..ORACLE_MAX_ITERS {
        grad_at(&x, &mut g)?;
        if linalg::norm(&g) <= ORACLE_TOLERANCE {
            return Ok(x);
        }
        grad_at(&y, &mut g)?;
        let next: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - step * gi).collect();
        // gradient-based restart
        let direction: Vec<f64> = linalg::sub(&next, &x);
        if linalg::dot(&g, &direction) > 0.0 {
            momentum_k = 0;
        }
        momentum_k += 1;
        let beta = (momentum_k as f64 - 1.0) / (momentum_k as f64 + 2.0);
        x_prev.copy_from_slice(&x);
        x = next;
        for i in 0..dim {
            y[i] = x[i] + beta * (x[i] - x_prev[i]);
        }
        if !linalg::all_finite(&x) {
            return Err(Error::Oracle("logistic oracle produced non-finite iterate".into()));
        }
    }
    Err(Error::Oracle(format!(
        "logistic oracle did not reach gradient norm {ORACLE_TOLERANCE} in {ORACLE_MAX_ITERS} iterations"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iso(centers: &[&[f64]], sigma: f64) -> ObjectiveSpec {
        ObjectiveSpec::isotropic(centers.iter().map(|c| c.to_vec()).collect(), sigma).unwrap()
    }

    #[test]
    fn isotropic_gradient() {
        let spec = iso(&[&[0.0, 0.0], &[3.0, -1.0]], 0.0);
        assert_eq!(spec.grad(0, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(spec.grad(1, &[3.0, -1.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn general_gradient_by_hand() {
        let spec = ObjectiveSpec::general(
            vec![vec![vec![2.0, 0.0], vec![0.0, 1.0]]],
            vec![vec![1.0, 0.0]],
            0.0,
        )
        .unwrap();
        // H (x - c) = diag(2,1) (1, 2)
        assert_eq!(spec.grad(0, &[2.0, 2.0]).unwrap(), vec![2.0, 2.0]);
        assert_eq!(spec.smoothness(), Some(2.0));
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let spec = iso(&[&[0.0, 0.0]], 0.0);
        assert!(matches!(spec.grad(0, &[1.0]), Err(Error::Config(_))));
        assert!(matches!(spec.grad(1, &[1.0, 1.0]), Err(Error::Contract(_))));
        assert!(ObjectiveSpec::isotropic(vec![vec![0.0, 0.0], vec![0.0]], 0.0).is_err());
    }

    #[test]
    fn rejects_bad_hessians() {
        let asym = ObjectiveSpec::general(
            vec![vec![vec![1.0, 0.5], vec![0.0, 1.0]]],
            vec![vec![0.0, 0.0]],
            0.0,
        );
        assert!(matches!(asym, Err(Error::Config(_))));
        let singular = ObjectiveSpec::general(
            vec![vec![vec![1.0, 0.0], vec![0.0, 1e-9]]],
            vec![vec![0.0, 0.0]],
            0.0,
        );
        assert!(matches!(singular, Err(Error::Config(_))));
    }

    #[test]
    fn zero_noise_matches_exact_gradient() {
        let spec = iso(&[&[1.0, -2.0, 0.5]], 0.0);
        let x = [0.3, 0.2, 0.1];
        let mut rng = CounterRng::keyed(1, Domain::GradientNoise, 0, 0, 0);
        assert_eq!(spec.stochastic_grad(0, &x, &mut rng).unwrap(), spec.grad(0, &x).unwrap());
    }

    #[test]
    fn stochastic_grad_is_deterministic_per_key() {
        let spec = iso(&[&[1.0, -2.0]], 0.7);
        let x = [0.3, 0.2];
        let a = spec
            .stochastic_grad(0, &x, &mut CounterRng::keyed(5, Domain::GradientNoise, 3, 0, 2))
            .unwrap();
        let b = spec
            .stochastic_grad(0, &x, &mut CounterRng::keyed(5, Domain::GradientNoise, 3, 0, 2))
            .unwrap();
        let c = spec
            .stochastic_grad(0, &x, &mut CounterRng::keyed(5, Domain::GradientNoise, 3, 0, 3))
            .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn stochastic_grad_unbiased_with_expected_power() {
        let d = 4;
        let sigma = 0.5;
        let spec = ObjectiveSpec::isotropic(vec![vec![1.0, -1.0, 2.0, 0.0]], sigma).unwrap();
        let x = [0.0, 0.5, -0.5, 1.0];
        let exact = spec.grad(0, &x).unwrap();
        let m = 100_000;
        let mut mean = vec![0.0; d];
        let mut power = 0.0;
        for k in 0..m {
            let mut rng = CounterRng::keyed(9, Domain::GradientNoise, k, 0, 0);
            let g = spec.stochastic_grad(0, &x, &mut rng).unwrap();
            linalg::axpy(1.0 / m as f64, &g, &mut mean);
            power += linalg::distance(&g, &exact).powi(2) / m as f64;
        }
        let tol = 3.0 * sigma / ((m as f64) * d as f64).sqrt();
        for j in 0..d {
            assert!((mean[j] - exact[j]).abs() <= tol, "coord {j}: {} vs {}", mean[j], exact[j]);
        }
        assert!((power - sigma * sigma).abs() <= 0.05 * sigma * sigma, "{power}");
    }

    #[test]
    fn isotropic_minimizers() {
        let spec = iso(&[&[0.0, 0.0], &[2.0, 0.0]], 0.0);
        assert_eq!(spec.weighted_minimizer(&[1.0, 1.0]).unwrap().x, vec![1.0, 0.0]);
        let line = iso(&[&[0.0], &[4.0]], 0.0);
        assert_eq!(line.weighted_minimizer(&[1.0, 3.0]).unwrap().x, vec![3.0]);
    }

    #[test]
    fn general_minimizer_by_hand() {
        let spec = ObjectiveSpec::general(
            vec![
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![vec![3.0, 0.0], vec![0.0, 1.0]],
            ],
            vec![vec![0.0, 0.0], vec![4.0, 4.0]],
            0.0,
        )
        .unwrap();
        let m = spec.weighted_minimizer(&[1.0, 1.0]).unwrap();
        assert!(!m.numerical);
        assert!((m.x[0] - 3.0).abs() < 1e-12 && (m.x[1] - 2.0).abs() < 1e-12, "{:?}", m.x);
    }

    #[test]
    fn minimizer_rejects_bad_weights() {
        let spec = iso(&[&[0.0], &[4.0]], 0.0);
        assert!(spec.weighted_minimizer(&[0.0, 0.0]).is_err());
        assert!(spec.weighted_minimizer(&[1.0, -1.0]).is_err());
        assert!(spec.weighted_minimizer(&[1.0]).is_err());
    }

    #[test]
    fn divergence_examples() {
        let equal = iso(&[&[1.0, 1.0], &[1.0, 1.0]], 0.0);
        assert_eq!(equal.gradient_divergence().unwrap().value, 0.0);
        let pair = iso(&[&[-1.0], &[1.0]], 0.0);
        assert_eq!(pair.gradient_divergence().unwrap().value, 1.0);
        let triple = iso(&[&[0.0], &[1.0], &[5.0]], 0.0);
        let d = triple.gradient_divergence().unwrap();
        assert!((d.value - 3.0).abs() < 1e-12);
        assert!(!d.approximate);
    }

    #[test]
    fn divergence_general_distinct_hessians_is_sampled() {
        let spec = ObjectiveSpec::general(
            vec![
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![vec![2.0, 0.0], vec![0.0, 1.0]],
            ],
            vec![vec![0.0, 0.0], vec![1.0, 0.0]],
            0.0,
        )
        .unwrap();
        let d = spec.gradient_divergence().unwrap();
        assert!(d.approximate);
        assert!(d.value > 0.0);
    }

    fn small_logistic() -> ObjectiveSpec {
        let kappa = vec![vec![0.7, 0.3], vec![0.2, 0.8], vec![0.5, 0.5]];
        let problem = LogisticProblem::synthesize(&kappa, 2, 40, 1.0, 3).unwrap();
        ObjectiveSpec::logistic(problem, 8).unwrap()
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let spec = small_logistic();
        let x: Vec<f64> = (0..spec.dim()).map(|i| 0.1 * i as f64 - 0.2).collect();
        let g = spec.grad(1, &x).unwrap();
        let h = 1e-6;
        for j in 0..spec.dim() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[j] += h;
            minus[j] -= h;
            let fd = (spec.loss(1, &plus).unwrap() - spec.loss(1, &minus).unwrap()) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6, "coord {j}: fd {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn logistic_minibatch_is_unbiased() {
        let spec = small_logistic();
        let x = vec![0.05; spec.dim()];
        let exact = spec.grad(0, &x).unwrap();
        let m = 20_000;
        let mut mean = vec![0.0; spec.dim()];
        for k in 0..m {
            let mut rng = CounterRng::keyed(2, Domain::Minibatch, k, 0, 0);
            let g = spec.stochastic_grad(0, &x, &mut rng).unwrap();
            linalg::axpy(1.0 / m as f64, &g, &mut mean);
        }
        assert!(linalg::distance(&mean, &exact) < 5e-3, "{mean:?} vs {exact:?}");
        assert!(spec.measured_noise_power(&x, 200, 1).unwrap() > 0.0);
    }

    #[test]
    fn logistic_oracle_zeroes_weighted_gradient() {
        let spec = small_logistic();
        let w = [1.0, 2.0, 0.5];
        let m = spec.weighted_minimizer(&w).unwrap();
        assert!(m.numerical);
        let g = spec.weighted_grad(&w, &m.x).unwrap();
        assert!(linalg::norm(&g) <= 1e-8, "{}", linalg::norm(&g));
    }

    #[test]
    fn logistic_labels_follow_kappa() {
        let kappa = vec![vec![0.9, 0.1, 0.0]];
        let p = LogisticProblem::synthesize(&kappa, 3, 5000, 2.0, 1).unwrap();
        let zeros = p.clients[0].labels.iter().filter(|&&l| l == 0).count() as f64 / 5000.0;
        assert!((zeros - 0.9).abs() < 0.02);
        assert!(p.clients[0].labels.iter().all(|&l| l < 2));
    }
}
