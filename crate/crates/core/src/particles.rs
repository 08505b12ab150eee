//! Weighted particle sets and Gaussian-kernel density representations.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix4, Vector4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::statespace::{Location, NodeState};

/// Terms of a log-sum-exp more than this far below the maximum are dropped.
/// `J * exp(-40)` stays below 1e-13 relative for any practical `J`.
const LSE_CUTOFF: f64 = 40.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParticleError {
    #[error("particle set is empty")]
    Empty,
    #[error("weight vector length {weights} does not match {particles} particles")]
    LengthMismatch { particles: usize, weights: usize },
    #[error("non-finite particle or weight")]
    NonFinite,
    #[error("negative weight {0}")]
    NegativeWeight(f64),
    #[error("degenerate weight vector (all weights zero)")]
    DegenerateWeights,
    #[error("kernel variance must be positive, got {0}")]
    BadBandwidth(f64),
}

/// `J` weighted samples of a node state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    states: Vec<NodeState>,
    weights: Vec<f64>,
}

impl ParticleSet {
    pub fn new(states: Vec<NodeState>, weights: Vec<f64>) -> Result<Self, ParticleError> {
        if states.is_empty() {
            return Err(ParticleError::Empty);
        }
        if states.len() != weights.len() {
            return Err(ParticleError::LengthMismatch {
                particles: states.len(),
                weights: weights.len(),
            });
        }
        if !states.iter().all(NodeState::is_finite) || !weights.iter().all(|w| w.is_finite()) {
            return Err(ParticleError::NonFinite);
        }
        if let Some(&w) = weights.iter().find(|&&w| w < 0.0) {
            return Err(ParticleError::NegativeWeight(w));
        }
        let mut set = ParticleSet { states, weights };
        set.normalize()?;
        Ok(set)
    }

    /// Equally weighted set.
    pub fn uniform(states: Vec<NodeState>) -> Result<Self, ParticleError> {
        let n = states.len();
        ParticleSet::new(states, vec![1.0; n])
    }

    /// `j` copies of one state.
    pub fn dirac(state: NodeState, j: usize) -> Self {
        let j = j.max(1);
        ParticleSet {
            states: vec![state; j],
            weights: vec![1.0 / j as f64; j],
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[NodeState] {
        &self.states
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn locations(&self) -> Vec<Location> {
        self.states.iter().map(NodeState::location).collect()
    }

    pub fn is_equally_weighted(&self) -> bool {
        let w0 = 1.0 / self.len() as f64;
        self.weights.iter().all(|w| (w - w0).abs() <= 1e-12 * w0)
    }

    fn normalize(&mut self) -> Result<(), ParticleError> {
        let total: f64 = self.weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(ParticleError::DegenerateWeights);
        }
        self.weights.iter_mut().for_each(|w| *w /= total);
        Ok(())
    }

    /// Effective sample size `1 / sum w^2`.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Weighted mean and covariance of the full state.
    pub fn moments(&self) -> (Vector4<f64>, Matrix4<f64>) {
        let mean = self
            .states
            .iter()
            .zip(&self.weights)
            .fold(Vector4::zeros(), |acc, (s, w)| acc + s.0 * *w);
        let cov = self
            .states
            .iter()
            .zip(&self.weights)
            .fold(Matrix4::zeros(), |acc, (s, w)| {
                let d = s.0 - mean;
                acc + d * d.transpose() * *w
            });
        (mean, cov)
    }

    pub fn location_moments(&self) -> (Location, Matrix2<f64>) {
        let (mean, cov) = self.moments();
        (
            Location::new(mean[0], mean[1]),
            cov.fixed_view::<2, 2>(0, 0).into_owned(),
        )
    }

    pub fn mean_location(&self) -> Location {
        self.states
            .iter()
            .zip(&self.weights)
            .fold(Location::zeros(), |acc, (s, w)| acc + s.location() * *w)
    }

    /// Sum of the two location-coordinate variances.
    pub fn location_variance_sum(&self) -> f64 {
        self.location_moments().1.trace()
    }

    /// Multiplies each weight by `f(particle)` and renormalizes.
    pub fn importance_weight<F>(&self, f: F) -> Result<ParticleSet, ParticleError>
    where
        F: Fn(&NodeState) -> f64,
    {
        let weights: Vec<f64> = self
            .states
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| w * f(s))
            .collect();
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ParticleError::NonFinite);
        }
        let mut out = ParticleSet {
            states: self.states.clone(),
            weights,
        };
        out.normalize()?;
        Ok(out)
    }

    /// Multiplies each weight by `exp(log_f[j])`, computed relative to the
    /// maximum so large magnitudes do not overflow.
    pub fn reweight_log(&self, log_f: &[f64]) -> Result<ParticleSet, ParticleError> {
        if log_f.len() != self.len() {
            return Err(ParticleError::LengthMismatch {
                particles: self.len(),
                weights: log_f.len(),
            });
        }
        let log_w: Vec<f64> = self
            .weights
            .iter()
            .zip(log_f)
            .map(|(w, lf)| w.ln() + lf)
            .collect();
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(ParticleError::DegenerateWeights);
        }
        let weights = log_w.iter().map(|l| (l - max).exp()).collect();
        let mut out = ParticleSet {
            states: self.states.clone(),
            weights,
        };
        out.normalize()?;
        Ok(out)
    }

    /// Adds independent `N(0, h2 I)` noise to every location; velocities and
    /// weights are kept.
    pub fn jitter_locations<R: Rng + ?Sized>(&self, h2: f64, rng: &mut R) -> ParticleSet {
        let sd = h2.max(0.0).sqrt();
        let states = self
            .states
            .iter()
            .map(|s| {
                let dx: f64 = StandardNormal.sample(rng);
                let dy: f64 = StandardNormal.sample(rng);
                NodeState::new(s.0[0] + sd * dx, s.0[1] + sd * dy, s.0[2], s.0[3])
            })
            .collect();
        ParticleSet {
            states,
            weights: self.weights.clone(),
        }
    }

    /// Systematic resampling to `j_out` equally weighted particles.
    pub fn resample<R: Rng + ?Sized>(&self, j_out: usize, rng: &mut R) -> Result<ParticleSet, ParticleError> {
        if j_out == 0 {
            return Err(ParticleError::Empty);
        }
        let total: f64 = self.weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(ParticleError::DegenerateWeights);
        }
        let step = total / j_out as f64;
        let mut u = rng.random::<f64>() * step;
        let mut states = Vec::with_capacity(j_out);
        let mut cum = self.weights[0];
        let mut i = 0;
        for _ in 0..j_out {
            while u > cum && i + 1 < self.len() {
                i += 1;
                cum += self.weights[i];
            }
            states.push(self.states[i]);
            u += step;
        }
        Ok(ParticleSet {
            states,
            weights: vec![1.0 / j_out as f64; j_out],
        })
    }
}

/// How the kernel variance of a [`KernelMessage`] is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Rule-of-thumb estimate from the weighted centers.
    Silverman,
}

/// Silverman's rule for an isotropic 2D Gaussian kernel: `h^2 = s^2 n^{-1/3}`
/// where `s^2` is the mean per-axis variance and `n` the effective sample size.
pub fn silverman_variance(centers: &[Location], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    let mean = centers
        .iter()
        .zip(weights)
        .fold(Location::zeros(), |acc, (c, w)| acc + c * *w)
        / total;
    let var = centers
        .iter()
        .zip(weights)
        .map(|(c, w)| w * (c - mean).norm_squared())
        .sum::<f64>()
        / total
        / 2.0;
    let n_eff = total * total / weights.iter().map(|w| w * w).sum::<f64>();
    var * n_eff.powf(-1.0 / 3.0)
}

/// Gaussian-kernel mixture over 2D location,
/// `m(x) = sum_j w_j (2 pi s^2)^{-1} exp(-|x - c_j|^2 / (2 s^2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMessage {
    xs: Vec<f64>,
    ys: Vec<f64>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    sigma_k2: f64,
}

impl KernelMessage {
    pub fn new(centers: &[Location], weights: Vec<f64>, bandwidth: Bandwidth) -> Result<Self, ParticleError> {
        if centers.is_empty() {
            return Err(ParticleError::Empty);
        }
        if centers.len() != weights.len() {
            return Err(ParticleError::LengthMismatch {
                particles: centers.len(),
                weights: weights.len(),
            });
        }
        if !centers.iter().all(|c| c.x.is_finite() && c.y.is_finite()) || !weights.iter().all(|w| w.is_finite()) {
            return Err(ParticleError::NonFinite);
        }
        if let Some(&w) = weights.iter().find(|&&w| w < 0.0) {
            return Err(ParticleError::NegativeWeight(w));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(ParticleError::DegenerateWeights);
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let sigma_k2 = match bandwidth {
            Bandwidth::Fixed(s) => s,
            Bandwidth::Silverman => silverman_variance(centers, &weights).max(1e-9),
        };
        if !(sigma_k2 > 0.0) || !sigma_k2.is_finite() {
            return Err(ParticleError::BadBandwidth(sigma_k2));
        }
        Ok(KernelMessage {
            xs: centers.iter().map(|c| c.x).collect(),
            ys: centers.iter().map(|c| c.y).collect(),
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            weights,
            sigma_k2,
        })
    }

    pub fn equal_weights(centers: &[Location], bandwidth: Bandwidth) -> Result<Self, ParticleError> {
        KernelMessage::new(centers, vec![1.0; centers.len()], bandwidth)
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn sigma_k2(&self) -> f64 {
        self.sigma_k2
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn centers(&self) -> Vec<Location> {
        self.xs.iter().zip(&self.ys).map(|(&x, &y)| Location::new(x, y)).collect()
    }

    fn log_norm(&self) -> f64 {
        -(2.0 * PI * self.sigma_k2).ln()
    }

    /// Log density at `query`, evaluated as a log-sum-exp so points far from
    /// every center still get a finite value.
    pub fn log_evaluate(&self, query: &Location) -> f64 {
        let mut scratch = vec![0.0; self.len()];
        self.log_evaluate_with(query, &mut scratch)
    }

    fn log_evaluate_with(&self, query: &Location, scratch: &mut [f64]) -> f64 {
        let inv = 0.5 / self.sigma_k2;
        let (qx, qy) = (query.x, query.y);
        let mut max = f64::NEG_INFINITY;
        for (((t, &x), &y), &lw) in scratch.iter_mut().zip(&self.xs).zip(&self.ys).zip(&self.log_weights) {
            let dx = x - qx;
            let dy = y - qy;
            *t = lw - (dx * dx + dy * dy) * inv;
            max = max.max(*t);
        }
        if !max.is_finite() {
            return f64::NEG_INFINITY;
        }
        let floor = max - LSE_CUTOFF;
        let sum: f64 = scratch.iter().filter(|&&t| t > floor).map(|&t| (t - max).exp()).sum();
        max + sum.ln() + self.log_norm()
    }

    pub fn log_evaluate_many(&self, queries: &[Location]) -> Vec<f64> {
        let mut scratch = vec![0.0; self.len()];
        queries.iter().map(|q| self.log_evaluate_with(q, &mut scratch)).collect()
    }

    pub fn evaluate(&self, query: &Location) -> f64 {
        self.log_evaluate(query).exp()
    }

    /// Draws one location from the mixture.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Location {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut idx = self.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            cum += w;
            if u < cum {
                idx = i;
                break;
            }
        }
        let sd = self.sigma_k2.sqrt();
        let zx: f64 = StandardNormal.sample(rng);
        let zy: f64 = StandardNormal.sample(rng);
        Location::new(self.xs[idx] + sd * zx, self.ys[idx] + sd * zy)
    }
}
