//! Likelihood consensus for the target belief.
//!
//! Each observing sensor approximates the logarithm of its local factor
//! (a kernel message, or a point-location likelihood for the baseline) by a
//! polynomial in the target location. Because all sensors share the basis,
//! the product of the local factors is `exp` of the sum of coefficient
//! vectors, and that sum is computed by average consensus.

use std::ops::{Add, Sub};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::consensusnet::{self, CommGraph, ConsensusConfig, NetworkError};
use crate::particles::{KernelMessage, ParticleError, ParticleSet};
use crate::statespace::Location;

/// `ln(1e-300)`: log-density values below this are treated as floored.
pub const LOG_DENSITY_FLOOR: f64 = -690.775_527_898_213_7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LcError {
    #[error("need at least {needed} fit points, have {have}")]
    InsufficientPoints { needed: usize, have: usize },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("non-finite fit input")]
    NonFinite,
    #[error(transparent)]
    Particles(#[from] ParticleError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Tensor-product monomial basis `u^i v^j`, `0 <= i, j <= degree`, in
/// coordinates `u = (x1 - c1) / s`, `v = (x2 - c2) / s`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    degree: usize,
    exponents: Vec<(u32, u32)>,
    center: Location,
    scale: f64,
}

impl BasisSpec {
    /// Raw monomials `x1^i x2^j` (identity coordinate map).
    pub fn tensor(degree: usize) -> Self {
        let exponents = (0..=degree as u32)
            .flat_map(|i| (0..=degree as u32).map(move |j| (i, j)))
            .collect();
        BasisSpec {
            degree,
            exponents,
            center: Location::zeros(),
            scale: 1.0,
        }
    }

    /// Same exponents, coordinates centred and scaled to the bounding radius
    /// of `points`.
    pub fn fitted_to(degree: usize, points: &[Location]) -> Self {
        let n = points.len().max(1) as f64;
        let center = points.iter().fold(Location::zeros(), |a, p| a + p) / n;
        let radius = points
            .iter()
            .map(|p| (p - center).amax())
            .fold(0.0f64, f64::max);
        BasisSpec {
            scale: if radius > 1e-9 { radius } else { 1.0 },
            center,
            ..BasisSpec::tensor(degree)
        }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn exponents(&self) -> &[(u32, u32)] {
        &self.exponents
    }

    pub fn center(&self) -> Location {
        self.center
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Number of basis functions `R = (degree + 1)^2`.
    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    /// Evaluates all basis functions at `x`.
    pub fn monomials(&self, x: &Location) -> Vec<f64> {
        let u = (x.x - self.center.x) / self.scale;
        let v = (x.y - self.center.y) / self.scale;
        let d = self.degree + 1;
        let mut pu = vec![1.0; d];
        let mut pv = vec![1.0; d];
        for k in 1..d {
            pu[k] = pu[k - 1] * u;
            pv[k] = pv[k - 1] * v;
        }
        self.exponents
            .iter()
            .map(|&(i, j)| pu[i as usize] * pv[j as usize])
            .collect()
    }
}

/// Expansion coefficients, local (`beta`) or aggregated (`B`).
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffVector(pub Vec<f64>);

impl CoeffVector {
    pub fn zeros(r: usize) -> Self {
        CoeffVector(vec![0.0; r])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&c| c == 0.0)
    }

    pub fn scaled(&self, s: f64) -> CoeffVector {
        CoeffVector(self.0.iter().map(|c| c * s).collect())
    }

    /// `B^T phi(x)`.
    pub fn evaluate(&self, basis: &BasisSpec, x: &Location) -> f64 {
        basis.monomials(x).iter().zip(&self.0).map(|(p, c)| p * c).sum()
    }
}

impl Add for &CoeffVector {
    type Output = CoeffVector;
    fn add(self, rhs: &CoeffVector) -> CoeffVector {
        CoeffVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &CoeffVector {
    type Output = CoeffVector;
    fn sub(self, rhs: &CoeffVector) -> CoeffVector {
        CoeffVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub coeffs: CoeffVector,
    pub residual_rms: f64,
    pub used_points: usize,
}

/// Ridge-regularized least-squares fit of `log_values` at `points`:
/// `beta = argmin sum (log_value - beta^T phi)^2 + lambda |beta|^2`, with
/// `lambda = ridge_scale * trace(Phi^T Phi) / R`.
///
/// Values below [`LOG_DENSITY_FLOOR`] are floored; floored points are
/// dropped when they are fewer than 10% of the total.
pub fn fit_log_values(
    points: &[Location],
    log_values: &[f64],
    basis: &BasisSpec,
    ridge_scale: f64,
) -> Result<FitResult, LcError> {
    let r = basis.len();
    if points.len() != log_values.len() {
        return Err(LcError::NonFinite);
    }
    if log_values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(LcError::NonFinite);
    }
    let floored = log_values.iter().filter(|&&v| v < LOG_DENSITY_FLOOR).count();
    let drop_floored = floored * 10 < points.len();
    let rows: Vec<(Location, f64)> = points
        .iter()
        .zip(log_values)
        .filter(|(_, &v)| !(drop_floored && v < LOG_DENSITY_FLOOR))
        .map(|(p, &v)| (*p, v.max(LOG_DENSITY_FLOOR)))
        .collect();
    if rows.len() < r {
        return Err(LcError::InsufficientPoints {
            needed: r,
            have: rows.len(),
        });
    }
    let design = DMatrix::from_fn(rows.len(), r, |i, c| basis.monomials(&rows[i].0)[c]);
    let target = DVector::from_iterator(rows.len(), rows.iter().map(|(_, v)| *v));
    let mut normal = design.transpose() * &design;
    let rhs = design.transpose() * &target;
    let lambda = ridge_scale * normal.trace() / r as f64;
    if !lambda.is_finite() || lambda < 0.0 || normal.trace() <= 0.0 {
        return Err(LcError::RankDeficient);
    }
    for i in 0..r {
        normal[(i, i)] += lambda;
    }
    let chol = normal.cholesky().ok_or(LcError::RankDeficient)?;
    let beta = chol.solve(&rhs);
    if !beta.iter().all(|b| b.is_finite()) {
        return Err(LcError::RankDeficient);
    }
    let resid = &target - &design * &beta;
    Ok(FitResult {
        coeffs: CoeffVector(beta.iter().copied().collect()),
        residual_rms: (resid.norm_squared() / rows.len() as f64).sqrt(),
        used_points: rows.len(),
    })
}

/// Fits the log of a kernel message at the reference particles.
pub fn fit_log_message(
    msg: &KernelMessage,
    refpoints: &ParticleSet,
    basis: &BasisSpec,
    ridge_scale: f64,
) -> Result<FitResult, LcError> {
    let locs = refpoints.locations();
    let logs = msg.log_evaluate_many(&locs);
    fit_log_values(&locs, &logs, basis, ridge_scale)
}

/// Reweights `particles` by `exp(B^T phi(x))`, relative to the maximum
/// exponent.
pub fn reconstruct_weights(b: &CoeffVector, particles: &ParticleSet, basis: &BasisSpec) -> Result<ParticleSet, LcError> {
    if !b.0.iter().all(|c| c.is_finite()) {
        return Err(LcError::NonFinite);
    }
    let exps: Vec<f64> = particles.states().iter().map(|s| b.evaluate(basis, &s.location())).collect();
    Ok(particles.reweight_log(&exps)?)
}

/// Agrees on one basis per connected component: the lowest-index sensor
/// proposes a basis fitted to its target-prediction particles and the
/// proposal is flooded through the network.
pub fn agree_basis(graph: &CommGraph, target_predictions: &[ParticleSet], degree: usize) -> Vec<BasisSpec> {
    let proposals: Vec<BasisSpec> = target_predictions
        .iter()
        .map(|p| BasisSpec::fitted_to(degree, &p.locations()))
        .collect();
    consensusnet::flood_lowest(graph, &proposals, graph.len())
}

/// Network-wide sums `B = sum_l beta_l`, obtained as `K` times the
/// consensus average. Non-observers contribute zero vectors.
pub fn aggregate(graph: &CommGraph, betas: &[CoeffVector], cfg: &ConsensusConfig) -> Result<Vec<CoeffVector>, LcError> {
    let k = betas.len() as f64;
    let values: Vec<Vec<f64>> = betas.iter().map(|b| b.0.clone()).collect();
    let avg = consensusnet::average_consensus(graph, &values, cfg)?;
    Ok(avg.into_iter().map(|v| CoeffVector(v).scaled(k)).collect())
}

/// Per-sensor target beliefs from local coefficients.
#[derive(Debug, Clone)]
pub struct LcOutcome {
    pub beliefs: Vec<ParticleSet>,
    pub aggregates: Vec<CoeffVector>,
    pub degenerate: Vec<bool>,
}

/// Likelihood-consensus target update. `predictions[s]` is sensor `s`'s
/// copy of the target prediction particles and `betas[s]` its local
/// coefficients (zero when `s` does not observe the target). The resampling
/// generator is built by `resample_rng(s)`; passing a sensor-independent
/// stream makes all sensors' beliefs coincide when consensus is exact.
pub fn lc_target_belief<R, F>(
    graph: &CommGraph,
    betas: &[CoeffVector],
    predictions: &[ParticleSet],
    bases: &[BasisSpec],
    cfg: &ConsensusConfig,
    particles: usize,
    mut resample_rng: F,
) -> Result<LcOutcome, LcError>
where
    R: Rng,
    F: FnMut(usize) -> R,
{
    let aggregates = aggregate(graph, betas, cfg)?;
    let mut beliefs = Vec::with_capacity(predictions.len());
    let mut degenerate = Vec::with_capacity(predictions.len());
    for (s, pred) in predictions.iter().enumerate() {
        let updated = reconstruct_weights(&aggregates[s], pred, &bases[s])
            .and_then(|w| Ok(w.resample(particles, &mut resample_rng(s))?));
        match updated {
            Ok(b) => {
                beliefs.push(b);
                degenerate.push(false);
            }
            Err(LcError::Particles(ParticleError::DegenerateWeights)) => {
                log::warn!("sensor {s}: degenerate target weights, keeping prediction");
                beliefs.push(pred.clone());
                degenerate.push(true);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(LcOutcome {
        beliefs,
        aggregates,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::particles::Bandwidth;
    use crate::statespace::NodeState;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cloud(rng: &mut ChaCha8Rng, n: usize, center: Location, sd: f64) -> ParticleSet {
        let states = (0..n)
            .map(|_| {
                let a: f64 = StandardNormal.sample(rng);
                let b: f64 = StandardNormal.sample(rng);
                NodeState::new(center.x + sd * a, center.y + sd * b, 0.0, 0.0)
            })
            .collect();
        ParticleSet::uniform(states).unwrap()
    }

    #[test]
    fn basis_has_sixteen_terms() {
        let b = BasisSpec::tensor(3);
        assert_eq!(b.len(), 16);
        assert_eq!(b.exponents()[0], (0, 0));
    }

    #[test]
    fn monomials_examples() {
        let b = BasisSpec::tensor(3);
        let at_origin = b.monomials(&Location::zeros());
        for (k, &(i, j)) in b.exponents().iter().enumerate() {
            assert_eq!(at_origin[k], if (i, j) == (0, 0) { 1.0 } else { 0.0 });
        }
        assert!(b.monomials(&Location::new(1.0, 1.0)).iter().all(|&m| m == 1.0));
        let m = b.monomials(&Location::new(2.0, 3.0));
        for (k, &(i, j)) in b.exponents().iter().enumerate() {
            assert_eq!(m[k], 2f64.powi(i as i32) * 3f64.powi(j as i32));
        }
        let k21 = b.exponents().iter().position(|&e| e == (2, 1)).unwrap();
        assert_eq!(m[k21], 12.0);
    }

    #[test]
    fn realizable_polynomial_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Location> = (0..200)
            .map(|_| Location::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
            .collect();
        let basis = BasisSpec::tensor(3);
        let truth: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let truth = CoeffVector(truth);
        let vals: Vec<f64> = pts.iter().map(|p| truth.evaluate(&basis, p)).collect();
        let fit = fit_log_values(&pts, &vals, &basis, 1e-15).unwrap();
        for (a, b) in fit.coeffs.0.iter().zip(&truth.0) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn single_gaussian_kernel_is_quadratic_in_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let msg = KernelMessage::equal_weights(&[Location::new(20.0, 25.0)], Bandwidth::Fixed(2.0)).unwrap();
        let refs = cloud(&mut rng, 500, Location::new(21.0, 24.0), 2.0);
        let basis = BasisSpec::fitted_to(3, &refs.locations());
        let fit = fit_log_message(&msg, &refs, &basis, 1e-9).unwrap();
        assert!(fit.residual_rms < 1e-6, "rms={}", fit.residual_rms);
    }

    #[test]
    fn ring_message_fit_generalizes_to_held_out_points() {
        // Held-out oracle: fit on one cloud, evaluate on an independent cloud
        // from the same distribution.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let anchor = Location::new(0.0, 0.0);
        let centers: Vec<Location> = (0..500)
            .map(|_| {
                let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let r = 25.0 + 2f64.sqrt() * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                anchor + Location::new(r * th.cos(), r * th.sin())
            })
            .collect();
        let msg = KernelMessage::equal_weights(&centers, Bandwidth::Fixed(2.0)).unwrap();
        let fit_pts = cloud(&mut rng, 500, Location::new(17.0, 18.0), 1.5);
        let held = cloud(&mut rng, 500, Location::new(17.0, 18.0), 1.5);
        let basis = BasisSpec::fitted_to(3, &fit_pts.locations());
        let fit = fit_log_message(&msg, &fit_pts, &basis, 1e-9).unwrap();
        let hl = held.locations();
        let (c, r) = (basis.center(), basis.scale());
        let mut se = 0.0;
        let mut n = 0usize;
        for (p, lv) in hl.iter().zip(msg.log_evaluate_many(&hl)) {
            // support region: inside the fit cloud's bounding box
            if (p - c).amax() <= r {
                se += (fit.coeffs.evaluate(&basis, p) - lv).powi(2);
                n += 1;
            }
        }
        let rms = (se / n as f64).sqrt();
        assert!(rms < 0.5, "held-out rms {rms}");
    }

    #[test]
    fn too_few_points_is_error() {
        let pts = vec![Location::new(1.0, 2.0); 5];
        let err = fit_log_values(&pts, &[0.0; 5], &BasisSpec::tensor(3), 1e-9).unwrap_err();
        assert_eq!(err, LcError::InsufficientPoints { needed: 16, have: 5 });
    }

    #[test]
    fn floored_points_dropped_when_rare() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Location> = (0..100)
            .map(|_| Location::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let mut vals: Vec<f64> = pts.iter().map(|p| -p.norm_squared()).collect();
        for v in vals.iter_mut().take(5) {
            *v = -1e6;
        }
        let fit = fit_log_values(&pts, &vals, &BasisSpec::tensor(3), 1e-12).unwrap();
        assert_eq!(fit.used_points, 95);
        assert!(fit.residual_rms < 1e-6);
        for v in vals.iter_mut().take(20) {
            *v = f64::NEG_INFINITY;
        }
        let fit = fit_log_values(&pts, &vals, &BasisSpec::tensor(3), 1e-12).unwrap();
        assert_eq!(fit.used_points, 100);
    }

    #[test]
    fn zero_and_constant_aggregates_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = cloud(&mut rng, 50, Location::new(3.0, 4.0), 1.0);
        let basis = BasisSpec::fitted_to(3, &p.locations());
        let w0 = reconstruct_weights(&CoeffVector::zeros(16), &p, &basis).unwrap();
        assert!(w0.is_equally_weighted());
        let mut c = CoeffVector::zeros(16);
        c.0[0] = 1234.5;
        let w1 = reconstruct_weights(&c, &p, &basis).unwrap();
        assert!(w1.is_equally_weighted());
    }

    #[test]
    fn zero_padding_identity() {
        let betas = vec![
            CoeffVector(vec![1.0, 2.0]),
            CoeffVector::zeros(2),
            CoeffVector(vec![-0.5, 4.0]),
            CoeffVector::zeros(2),
        ];
        let observers_only = &betas[0] + &betas[2];
        let all = betas.iter().fold(CoeffVector::zeros(2), |a, b| &a + b);
        assert_eq!(observers_only, all);
        let agg = aggregate(&CommGraph::complete(4), &betas, &ConsensusConfig::exact()).unwrap();
        for a in agg {
            for (x, y) in a.0.iter().zip(&all.0) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_observer_set_keeps_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pred = cloud(&mut rng, 100, Location::new(0.0, 5.0), 1.0);
        let g = CommGraph::complete(3);
        let preds = vec![pred.clone(); 3];
        let bases = agree_basis(&g, &preds, 3);
        let out = lc_target_belief(
            &g,
            &vec![CoeffVector::zeros(16); 3],
            &preds,
            &bases,
            &ConsensusConfig::default(),
            100,
            |_| ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        for b in out.beliefs {
            // uniform weights + systematic resampling of J from J is the identity
            assert_eq!(b.states(), pred.states());
        }
    }

    #[test]
    fn fitted_kernels_rank_like_centralized_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mk = |c: Location, rng: &mut ChaCha8Rng| {
            let centers: Vec<Location> = (0..500)
                .map(|_| {
                    let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let r = 20.0 + 2f64.sqrt() * Distribution::<f64>::sample(&StandardNormal, rng);
                    c + Location::new(r * th.cos(), r * th.sin())
                })
                .collect();
            KernelMessage::equal_weights(&centers, Bandwidth::Fixed(2.0)).unwrap()
        };
        let target = Location::new(10.0, 12.0);
        let m1 = mk(target + Location::new(20.0, 0.0), &mut rng);
        let m2 = mk(target + Location::new(0.0, -20.0), &mut rng);
        let pred = cloud(&mut rng, 500, target, 2.0);
        let basis = BasisSpec::fitted_to(3, &pred.locations());
        let b1 = fit_log_message(&m1, &pred, &basis, 1e-9).unwrap().coeffs;
        let b2 = fit_log_message(&m2, &pred, &basis, 1e-9).unwrap().coeffs;
        let sum = &b1 + &b2;
        let locs = pred.locations();
        let central: Vec<f64> = m1
            .log_evaluate_many(&locs)
            .iter()
            .zip(m2.log_evaluate_many(&locs))
            .map(|(a, b)| a + b)
            .collect();
        let lc: Vec<f64> = locs.iter().map(|p| sum.evaluate(&basis, p)).collect();
        let rho = crate::stats::spearman(&central, &lc);
        assert!(rho > 0.9, "rho={rho}");
    }

    proptest! {
        #[test]
        fn reconstruct_invariant_to_constant_offset(shift in -1e3f64..1e3, seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = cloud(&mut rng, 60, Location::new(5.0, 5.0), 1.0);
            let basis = BasisSpec::fitted_to(3, &p.locations());
            let b = CoeffVector((0..16).map(|_| rng.random_range(-2.0..2.0)).collect());
            let mut b2 = b.clone();
            b2.0[0] += shift;
            let w1 = reconstruct_weights(&b, &p, &basis).unwrap();
            let w2 = reconstruct_weights(&b2, &p, &basis).unwrap();
            for (a, c) in w1.weights().iter().zip(w2.weights()) {
                prop_assert!((a - c).abs() < 1e-9);
            }
        }

        #[test]
        fn residual_shrinks_as_ridge_vanishes(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Location> = (0..80)
                .map(|_| Location::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let vals: Vec<f64> = pts.iter().map(|p| (3.0 * p.x).sin() - p.y.powi(4)).collect();
            let basis = BasisSpec::tensor(3);
            let mut prev = f64::INFINITY;
            for lam in [1e-1, 1e-3, 1e-5, 1e-7, 1e-9] {
                let r = fit_log_values(&pts, &vals, &basis, lam).unwrap().residual_rms;
                prop_assert!(r <= prev + 1e-12);
                prev = r;
            }
        }
    }
}
