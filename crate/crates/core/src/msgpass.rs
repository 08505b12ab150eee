//! Particle belief propagation for joint sensor self-localization and
//! target tracking. One call to [`CoslatEngine::step`] runs the
//! `P`-iteration message schedule of one time step.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensusnet::{self, ConsensusConfig, Envelope, NetworkError};
use crate::lconsensus::{self, BasisSpec, CoeffVector, LcError, LOG_DENSITY_FLOOR};
use crate::particles::{silverman_variance, Bandwidth, KernelMessage, ParticleError, ParticleSet};
use crate::rng::{self, tag};
use crate::scenario::{MeasurementSet, TopologySnapshot};
use crate::statespace::{Location, MotionModel, NodeId, NodeState, RangeNoise, StatePrior};

/// Retries for a ring radius `y - v` that came out negative.
const RADIUS_RETRIES: usize = 16;

/// Fractional part of the golden ratio.
const GOLDEN_FRACTION: f64 = 0.618_033_988_749_894_9;

/// Proposal mass left to the prediction and the messages when a guide
/// density is supplied to the mixture proposal.
const GUIDE_SHARE_REST: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MsgPassError {
    #[error("missing measurement y[{0},{1}]")]
    MissingMeasurement(NodeId, NodeId),
    #[error("degenerate update for node {0}")]
    Degenerate(NodeId),
    #[error(transparent)]
    Particles(#[from] ParticleError),
    #[error(transparent)]
    Consensus(#[from] LcError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Candidate draws per output particle when sampling from the mixture
/// proposal; the weighted candidates are resampled down to `J`.
pub const MIXTURE_DRAWS_PER_PARTICLE: usize = 4;

/// How updated particles are proposed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Proposal {
    /// Weight the prediction particles by the product of incoming messages.
    Prediction,
    /// Draw from an equal mixture of the smoothed prediction and every
    /// incoming message, then weight by target over proposal density.
    Mixture,
    /// `Prediction`, switching to `Mixture` when the weighted prediction is
    /// degenerate or its effective sample size falls below
    /// `min_ess_fraction * J`.
    Adaptive { min_ess_fraction: f64 },
}

impl Default for Proposal {
    fn default() -> Self {
        Proposal::Adaptive { min_ess_fraction: 0.1 }
    }
}

/// Where the target belief is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Likelihood consensus over the sensor network.
    #[default]
    DistributedLc,
    /// Exact product of the target messages at a fusion center.
    Centralized,
}

/// Which sender density the target-related messages use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageScheme {
    /// The sender's full belief from the previous iteration.
    #[default]
    Amp,
    /// The sender's belief without the receiver's contribution.
    ExactExtrinsic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub particles: usize,
    pub iterations: usize,
    /// Kernel variance of measurement messages.
    pub kernel_variance: f64,
    pub proposal: Proposal,
    pub consensus: ConsensusConfig,
    pub basis_degree: usize,
    pub ridge_scale: f64,
    /// Smooth each updated sensor belief with its rule-of-thumb location
    /// kernel, so repeated resampling cannot collapse a particle set.
    pub regularize: bool,
    /// Beliefs whose location-variance sum exceeds this send no measurement
    /// messages: a particle ring around a nearly flat belief is too sparse to
    /// stand for its nearly flat message.
    pub max_sender_variance: f64,
    /// Chosen per experiment through the run mode.
    #[serde(skip)]
    pub fusion: Fusion,
    #[serde(skip)]
    pub messages: MessageScheme,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            particles: 500,
            iterations: 3,
            kernel_variance: 2.0,
            proposal: Proposal::default(),
            consensus: ConsensusConfig::default(),
            basis_degree: 3,
            ridge_scale: 1e-9,
            regularize: true,
            max_sender_variance: 1000.0,
            fusion: Fusion::default(),
            messages: MessageScheme::default(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.particles < 2 {
            return Err(format!("particles must be at least 2, got {}", self.particles));
        }
        if self.iterations == 0 {
            return Err("iterations must be at least 1".into());
        }
        if !(self.kernel_variance > 0.0) || !self.kernel_variance.is_finite() {
            return Err(format!("kernel_variance must be positive, got {}", self.kernel_variance));
        }
        if let Proposal::Adaptive { min_ess_fraction } = self.proposal {
            if !(0.0..=1.0).contains(&min_ess_fraction) {
                return Err(format!("min_ess_fraction must lie in [0, 1], got {min_ess_fraction}"));
            }
        }
        if !(self.max_sender_variance > 0.0) {
            return Err(format!("max_sender_variance must be positive, got {}", self.max_sender_variance));
        }
        if self.basis_degree == 0 || self.basis_degree > 8 {
            return Err(format!("basis_degree must lie in 1..=8, got {}", self.basis_degree));
        }
        if !(self.ridge_scale >= 0.0) || !self.ridge_scale.is_finite() {
            return Err(format!("ridge_scale must be nonnegative, got {}", self.ridge_scale));
        }
        let r = (self.basis_degree + 1).pow(2);
        if self.particles < r {
            return Err(format!("particles ({}) must be at least the basis size {r}", self.particles));
        }
        Ok(())
    }
}

/// Approximate marginal posterior of one node after iteration `iteration`.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub owner: NodeId,
    pub iteration: usize,
    pub particles: ParticleSet,
    /// Known, fixed state (anchors).
    pub dirac: bool,
}

impl Belief {
    pub fn mean_location(&self) -> Location {
        self.particles.mean_location()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMessage {
    pub owner: NodeId,
    pub particles: ParticleSet,
    pub dirac: bool,
}

/// A range message over the receiver's 2D location.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMessage {
    pub from: NodeId,
    pub to: NodeId,
    pub kernel: KernelMessage,
}

/// Propagates every particle through the motion model with its own noise
/// draw. Dirac beliefs pass through unchanged; weighted beliefs are first
/// resampled so the output is equally weighted.
pub fn prediction_message<R: Rng>(prev: &Belief, model: &MotionModel, rng: &mut R) -> PredictionMessage {
    if prev.dirac {
        return PredictionMessage {
            owner: prev.owner,
            particles: prev.particles.clone(),
            dirac: true,
        };
    }
    let src = if prev.particles.is_equally_weighted() {
        prev.particles.clone()
    } else {
        prev.particles
            .resample(prev.particles.len(), rng)
            .expect("normalized belief resamples")
    };
    PredictionMessage {
        owner: prev.owner,
        particles: propagate_set(&src, model, rng),
        dirac: false,
    }
}

fn propagate_set<R: Rng>(set: &ParticleSet, model: &MotionModel, rng: &mut R) -> ParticleSet {
    let states = set.states().iter().map(|s| model.step(s, rng)).collect();
    ParticleSet::new(states, set.weights().to_vec()).expect("propagation keeps finite states")
}

/// Ring-sampled range message: for each sender particle, a point at
/// distance `y - v` in a random direction, smoothed by a Gaussian kernel of
/// variance `kernel_variance`. Directions form an evenly spaced grid with a
/// random offset and noise values a shifted low-discrepancy sequence; both
/// are assigned to particles in random order, so each center is marginally
/// distributed as an independent ring draw.
/// Centers are weighted by their radius, which cancels the `1 / (2 pi r)`
/// density of a ring and leaves the range likelihood itself.
#[allow(clippy::too_many_arguments)]
pub fn measurement_message<R: Rng>(
    from: NodeId,
    to: NodeId,
    y: f64,
    sender: &ParticleSet,
    noise: &dyn RangeNoise,
    kernel_variance: f64,
    rng: &mut R,
) -> Result<MeasurementMessage, MsgPassError> {
    let (centers, radii) = ring_centers(y, sender, noise, rng);
    let mut weights: Vec<f64> = sender.weights().iter().zip(&radii).map(|(w, r)| w * r).collect();
    if !(weights.iter().sum::<f64>() > 0.0) {
        weights = sender.weights().to_vec();
    }
    let kernel = KernelMessage::new(&centers, weights, Bandwidth::Fixed(kernel_variance))?;
    Ok(MeasurementMessage { from, to, kernel })
}

fn ring_centers<R: Rng>(y: f64, sender: &ParticleSet, noise: &dyn RangeNoise, rng: &mut R) -> (Vec<Location>, Vec<f64>) {
    let j = sender.len();
    let mut strata: Vec<usize> = (0..j).collect();
    strata.shuffle(rng);
    let offset: f64 = rng.random();
    // Noise quantiles follow a Kronecker sequence over the direction grid,
    // so nearby directions see well-spread noise values while each draw
    // keeps the noise distribution.
    let shift: f64 = rng.random();
    let draws: Vec<f64> = (0..j)
        .map(|i| {
            let u = (shift + i as f64 * GOLDEN_FRACTION).fract().clamp(1e-12, 1.0 - 1e-12);
            noise.quantile(u)
        })
        .collect();
    let mut centers = Vec::with_capacity(j);
    let mut radii = Vec::with_capacity(j);
    for (s, stratum) in sender.states().iter().zip(strata) {
        let mut radius = y - draws[stratum];
        for _ in 0..RADIUS_RETRIES {
            if radius >= 0.0 {
                break;
            }
            radius = y - noise.sample(rng);
        }
        let radius = radius.max(0.0);
        let theta = std::f64::consts::TAU * (stratum as f64 + offset) / j as f64;
        centers.push(s.location() + Location::new(radius * theta.cos(), radius * theta.sin()));
        radii.push(radius);
    }
    (centers, radii)
}

/// Result of a belief update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateResult {
    pub particles: ParticleSet,
    /// Effective sample size of the importance weights before resampling.
    pub ess: f64,
    pub used_mixture: bool,
}

/// Weights the prediction (or a mixture proposal) by the product of the
/// incoming kernels and resamples to `j` particles. `guide`, typically the
/// previous iteration's belief, adds a proposal component for the mixture. Fails with
/// [`MsgPassError::Degenerate`] when the product vanishes at every sample.
pub fn belief_update<R: Rng>(
    owner: NodeId,
    pred: &ParticleSet,
    incoming: &[&KernelMessage],
    guide: Option<&ParticleSet>,
    proposal: Proposal,
    j: usize,
    rng: &mut R,
) -> Result<UpdateResult, MsgPassError> {
    if incoming.is_empty() {
        return Ok(UpdateResult {
            particles: pred.clone(),
            ess: pred.ess(),
            used_mixture: false,
        });
    }
    let weighted = match proposal {
        Proposal::Prediction => weight_prediction(owner, pred, incoming),
        Proposal::Mixture => weight_mixture(owner, pred, incoming, guide, j * MIXTURE_DRAWS_PER_PARTICLE, rng),
        Proposal::Adaptive { min_ess_fraction } => match weight_prediction(owner, pred, incoming) {
            Ok((set, false)) if set.ess() >= min_ess_fraction * j as f64 => Ok((set, false)),
            _ => weight_mixture(owner, pred, incoming, guide, j * MIXTURE_DRAWS_PER_PARTICLE, rng),
        },
    };
    let (set, used_mixture) = weighted?;
    Ok(UpdateResult {
        ess: set.ess(),
        particles: set.resample(j, rng)?,
        used_mixture,
    })
}

fn weight_prediction(owner: NodeId, pred: &ParticleSet, incoming: &[&KernelMessage]) -> Result<(ParticleSet, bool), MsgPassError> {
    let locs = pred.locations();
    let mut log_w = vec![0.0; locs.len()];
    for m in incoming {
        for (acc, v) in log_w.iter_mut().zip(m.log_evaluate_many(&locs)) {
            *acc += v;
        }
    }
    check_log_weights(owner, &log_w)?;
    Ok((pred.reweight_log(&log_w)?, false))
}

fn check_log_weights(owner: NodeId, log_w: &[f64]) -> Result<(), MsgPassError> {
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || max < LOG_DENSITY_FLOOR || log_w.iter().any(|v| v.is_nan()) {
        return Err(MsgPassError::Degenerate(owner));
    }
    Ok(())
}

fn weight_mixture<R: Rng>(
    owner: NodeId,
    pred: &ParticleSet,
    incoming: &[&KernelMessage],
    guide: Option<&ParticleSet>,
    j: usize,
    rng: &mut R,
) -> Result<(ParticleSet, bool), MsgPassError> {
    let pred_kde = KernelMessage::new(&pred.locations(), pred.weights().to_vec(), Bandwidth::Silverman)?;
    // A resampled guide may hold only a few distinct points; its bandwidth
    // is kept at least as wide as the narrowest message kernel.
    let floor = incoming.iter().map(|m| m.sigma_k2()).fold(f64::INFINITY, f64::min);
    let guide_kde = guide
        .map(|g| {
            let locs = g.locations();
            let h2 = silverman_variance(&locs, g.weights()).max(floor);
            KernelMessage::new(&locs, g.weights().to_vec(), Bandwidth::Fixed(h2))
        })
        .transpose()?;
    // The target density is the smoothed prediction times the messages;
    // the guide only shapes the proposal.
    let factors: Vec<&KernelMessage> = std::iter::once(&pred_kde).chain(incoming.iter().copied()).collect();
    let mut comps: Vec<(&KernelMessage, f64)> = Vec::with_capacity(factors.len() + 1);
    let factor_share = if guide_kde.is_some() { GUIDE_SHARE_REST } else { 1.0 };
    for f in &factors {
        comps.push((f, factor_share / factors.len() as f64));
    }
    if let Some(g) = &guide_kde {
        comps.push((g, 1.0 - GUIDE_SHARE_REST));
    }
    let cumulative: Vec<f64> = pred
        .weights()
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let mut states = Vec::with_capacity(j);
    let mut assigned = 0usize;
    for (c, (comp, share)) in comps.iter().enumerate() {
        let count = if c + 1 == comps.len() {
            j - assigned
        } else {
            ((share * j as f64).round() as usize).min(j - assigned)
        };
        assigned += count;
        for _ in 0..count {
            let loc = comp.sample(rng);
            let u: f64 = rng.random::<f64>() * cumulative[cumulative.len() - 1];
            let idx = cumulative.partition_point(|&cw| cw < u).min(pred.len() - 1);
            let v = pred.states()[idx].velocity();
            states.push(NodeState::new(loc.x, loc.y, v.x, v.y));
        }
    }
    let locs: Vec<Location> = states.iter().map(|s| s.location()).collect();
    let factor_logs: Vec<Vec<f64>> = factors.iter().map(|m| m.log_evaluate_many(&locs)).collect();
    let guide_logs = guide_kde.as_ref().map(|g| g.log_evaluate_many(&locs));
    let mut log_target = vec![0.0; j];
    let mut log_w = vec![0.0; j];
    let mut terms = Vec::with_capacity(comps.len());
    for s in 0..j {
        terms.clear();
        terms.extend(factor_logs.iter().zip(&comps).map(|(l, (_, share))| l[s] + share.ln()));
        if let Some(g) = &guide_logs {
            terms.push(g[s] + (1.0 - GUIDE_SHARE_REST).ln());
        }
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let q = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
        let target: f64 = factor_logs.iter().map(|l| l[s]).sum();
        log_target[s] = target;
        log_w[s] = if target.is_finite() && q.is_finite() {
            target - q
        } else {
            f64::NEG_INFINITY
        };
    }
    check_log_weights(owner, &log_target)?;
    let uniform = ParticleSet::uniform(states)?;
    Ok((uniform.reweight_log(&log_w)?, true))
}

/// A measurement message whose sender density excludes the receiver's own
/// contribution: the sender's prediction weighted by all of its incoming
/// messages except the one from `to`.
#[allow(clippy::too_many_arguments)]
pub fn extrinsic_message<R: Rng>(
    from: NodeId,
    to: NodeId,
    y: f64,
    sender_pred: &ParticleSet,
    sender_incoming: &[&MeasurementMessage],
    noise: &dyn RangeNoise,
    kernel_variance: f64,
    proposal: Proposal,
    rng: &mut R,
) -> Result<MeasurementMessage, MsgPassError> {
    let kernels: Vec<&KernelMessage> = sender_incoming
        .iter()
        .filter(|m| m.from != to)
        .map(|m| &m.kernel)
        .collect();
    let extrinsic = belief_update(from, sender_pred, &kernels, None, proposal, sender_pred.len(), rng)?;
    measurement_message(from, to, y, &extrinsic.particles, noise, kernel_variance, rng)
}

/// Beliefs of the whole network after one time step. `target[k]` is sensor
/// `k`'s local copy of the target belief.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkBeliefs {
    pub sensors: Vec<Belief>,
    pub target: Vec<ParticleSet>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub n: usize,
    pub seed: u64,
    pub topology: &'a TopologySnapshot,
    pub measurements: &'a MeasurementSet,
    /// Form target messages in both directions. `false` gives pure
    /// cooperative self-localization and leaves the target copies untouched.
    pub include_target: bool,
    /// Per sensor index: the sensor knows it did not move since the last
    /// step. Missing entries count as moving.
    pub at_rest: &'a [bool],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    pub degenerate_events: usize,
    pub fit_failures: usize,
    pub mixture_updates: usize,
}

impl std::ops::AddAssign for StepStats {
    fn add_assign(&mut self, o: StepStats) {
        self.degenerate_events += o.degenerate_events;
        self.fit_failures += o.fit_failures;
        self.mixture_updates += o.mixture_updates;
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub beliefs: NetworkBeliefs,
    pub predictions: Vec<PredictionMessage>,
    pub target_predictions: Vec<ParticleSet>,
    pub stats: StepStats,
}

#[derive(Debug, Clone)]
pub struct CoslatEngine {
    pub filter: FilterConfig,
    pub motion: MotionModel,
    pub noise: Arc<dyn RangeNoise>,
    /// Velocity prior given to the particles of a sensor that knows it is at
    /// rest, so it starts moving with fresh velocity hypotheses. `None`
    /// gives resting particles zero velocity.
    pub rest_prior: Option<StatePrior>,
}

impl CoslatEngine {
    pub fn new(filter: FilterConfig, motion: MotionModel, noise: Arc<dyn RangeNoise>) -> Self {
        CoslatEngine {
            filter,
            motion,
            noise,
            rest_prior: None,
        }
    }

    pub fn with_rest_prior(mut self, prior: StatePrior) -> Self {
        self.rest_prior = Some(prior);
        self
    }

    /// Prediction for a sensor that did not move: locations are kept and
    /// velocities redrawn from the rest prior.
    fn rest_prediction<R: Rng>(&self, prev: &Belief, rng: &mut R) -> PredictionMessage {
        let states = prev
            .particles
            .states()
            .iter()
            .map(|s| {
                let v = self.rest_prior.as_ref().map_or_else(nalgebra::Vector2::zeros, |p| p.sample(rng).velocity());
                NodeState::new(s.0[0], s.0[1], v.x, v.y)
            })
            .collect();
        PredictionMessage {
            owner: prev.owner,
            particles: ParticleSet::new(states, prev.particles.weights().to_vec()).expect("finite resting states"),
            dirac: false,
        }
    }

    /// Beliefs at `n = 0` drawn from the priors. All target copies start
    /// from the same sample.
    pub fn initialize(&self, sensor_priors: &[StatePrior], target_prior: &StatePrior, seed: u64) -> NetworkBeliefs {
        let j = self.filter.particles;
        let sensors = sensor_priors
            .iter()
            .enumerate()
            .map(|(idx, prior)| {
                let owner = NodeId::from_sensor_index(idx);
                let particles = if let StatePrior::Dirac(s) = prior {
                    ParticleSet::dirac(*s, j)
                } else {
                    let mut r = rng::stream(seed, &[tag::PRIOR, owner.0 as u64]);
                    ParticleSet::uniform((0..j).map(|_| prior.sample(&mut r)).collect()).expect("prior draws are finite")
                };
                Belief {
                    owner,
                    iteration: self.filter.iterations,
                    particles,
                    dirac: prior.is_dirac(),
                }
            })
            .collect::<Vec<_>>();
        let mut r = rng::stream(seed, &[tag::PRIOR, 0]);
        let target = ParticleSet::uniform((0..j).map(|_| target_prior.sample(&mut r)).collect()).expect("prior draws are finite");
        NetworkBeliefs {
            target: vec![target; sensors.len()],
            sensors,
        }
    }

    /// Target prediction copies; copies equal to their predecessor reuse its
    /// prediction, and all copies share one noise stream.
    pub fn predict_target(&self, copies: &[ParticleSet], seed: u64, stream_tag: u64, n: usize) -> Vec<ParticleSet> {
        let mut out: Vec<ParticleSet> = Vec::with_capacity(copies.len());
        for (s, copy) in copies.iter().enumerate() {
            if s > 0 && copies[s - 1] == *copy {
                let prev = out[s - 1].clone();
                out.push(prev);
                continue;
            }
            let mut r = rng::stream(seed, &[stream_tag, n as u64]);
            let src = if copy.is_equally_weighted() {
                copy.clone()
            } else {
                copy.resample(copy.len(), &mut r).expect("normalized copy resamples")
            };
            out.push(propagate_set(&src, &self.motion, &mut r));
        }
        out
    }

    fn measurement(&self, set: &MeasurementSet, k: NodeId, l: NodeId) -> Result<f64, MsgPassError> {
        set.get(k, l).ok_or(MsgPassError::MissingMeasurement(k, l))
    }

    /// Runs the `P` message-passing iterations of time step `ctx.n`.
    pub fn step(&self, prev: &NetworkBeliefs, ctx: &StepContext<'_>) -> Result<StepOutcome, MsgPassError> {
        let cfg = &self.filter;
        let n = ctx.n as u64;
        let topo = ctx.topology;
        let k_count = prev.sensors.len();
        let mut stats = StepStats::default();

        let predictions: Vec<PredictionMessage> = prev
            .sensors
            .iter()
            .enumerate()
            .map(|(s, b)| {
                let mut r = rng::stream(ctx.seed, &[tag::PREDICT, n, s as u64]);
                if !b.dirac && ctx.at_rest.get(s).copied().unwrap_or(false) {
                    self.rest_prediction(b, &mut r)
                } else {
                    prediction_message(b, &self.motion, &mut r)
                }
            })
            .collect();

        let track = ctx.include_target;
        let target_preds = if track {
            self.predict_target(&prev.target, ctx.seed, tag::TARGET_PREDICT, ctx.n)
        } else {
            Vec::new()
        };
        let bases = if track && cfg.fusion == Fusion::DistributedLc {
            lconsensus::agree_basis(&topo.comm, &target_preds, cfg.basis_degree)
        } else {
            Vec::new()
        };
        let extrinsic = cfg.messages == MessageScheme::ExactExtrinsic;

        // Iteration-0 state: every belief equals its prediction.
        let mut sensor_beliefs: Vec<ParticleSet> = predictions.iter().map(|p| p.particles.clone()).collect();
        let mut sensor_to_target: Vec<ParticleSet> = sensor_beliefs.clone();
        let mut target_beliefs: Vec<ParticleSet> = target_preds.clone();
        let mut target_to_sensor: Vec<ParticleSet> = target_preds.clone();

        for p in 1..=cfg.iterations as u64 {
            let outgoing: Vec<Envelope<()>> = (0..k_count)
                .flat_map(|k| {
                    topo.measures[k]
                        .iter()
                        .filter(|l| !l.is_target())
                        .map(move |l| Envelope {
                            from: l.sensor_index(),
                            to: k,
                            payload: (),
                        })
                })
                .collect();
            let inbox = consensusnet::mailbox_exchange(&topo.comm, outgoing)?;

            let mut next_beliefs = sensor_beliefs.clone();
            let mut next_sensor_to_target = sensor_to_target.clone();
            for k in 0..k_count {
                if predictions[k].dirac {
                    continue;
                }
                let me = NodeId::from_sensor_index(k);
                let mut msgs = Vec::new();
                for env in inbox[k].iter().filter(|env| self.informative(&sensor_beliefs[env.from])) {
                    let l = NodeId::from_sensor_index(env.from);
                    let y = self.measurement(ctx.measurements, me, l)?;
                    let mut r = rng::stream(ctx.seed, &[tag::MESSAGE, n, p, l.0 as u64, me.0 as u64]);
                    msgs.push(measurement_message(l, me, y, &sensor_beliefs[env.from], self.noise.as_ref(), cfg.kernel_variance, &mut r)?.kernel);
                }
                let sensor_only = msgs.len();
                let observes = track && topo.observes_target(me);
                if observes {
                    let y = self.measurement(ctx.measurements, me, NodeId::TARGET)?;
                    let src = if extrinsic { &target_to_sensor[k] } else { &target_beliefs[k] };
                    let mut r = rng::stream(ctx.seed, &[tag::MESSAGE, n, p, 0, me.0 as u64]);
                    msgs.push(measurement_message(NodeId::TARGET, me, y, src, self.noise.as_ref(), cfg.kernel_variance, &mut r)?.kernel);
                }
                let refs: Vec<&KernelMessage> = msgs.iter().collect();
                let mut r = rng::stream(ctx.seed, &[tag::UPDATE, n, p, me.0 as u64]);
                let guide = (p > 1).then_some(&sensor_beliefs[k]);
                let full = self.update_or_keep(me, &predictions[k].particles, &refs, guide, &mut r, &mut stats);
                next_sensor_to_target[k] = if observes && extrinsic {
                    let mut r = rng::stream(ctx.seed, &[tag::EXTRINSIC, n, p, me.0 as u64]);
                    self.update_or_keep(me, &predictions[k].particles, &refs[..sensor_only], guide, &mut r, &mut stats)
                } else {
                    full.clone()
                };
                next_beliefs[k] = full;
            }

            if track {
                let (beliefs, to_sensor) =
                    self.target_iteration(ctx, p, &sensor_to_target, &sensor_beliefs, &target_preds, &bases, &mut stats)?;
                target_beliefs = beliefs;
                target_to_sensor = to_sensor;
            }
            sensor_beliefs = next_beliefs;
            sensor_to_target = next_sensor_to_target;
        }

        let sensors = sensor_beliefs
            .into_iter()
            .zip(&predictions)
            .enumerate()
            .map(|(k, (particles, pred))| {
                // Only resampled beliefs are smoothed; a belief that received
                // no messages is its prediction.
                let particles = if cfg.regularize && !pred.dirac && particles != pred.particles {
                    let h2 = silverman_variance(&particles.locations(), particles.weights());
                    particles.jitter_locations(h2, &mut rng::stream(ctx.seed, &[tag::REGULARIZE, n, k as u64]))
                } else {
                    particles
                };
                (particles, pred)
            })
            .map(|(particles, pred)| Belief {
                owner: pred.owner,
                iteration: cfg.iterations,
                particles,
                dirac: pred.dirac,
            })
            .collect();
        let target = if track { target_beliefs } else { prev.target.clone() };
        Ok(StepOutcome {
            beliefs: NetworkBeliefs { sensors, target },
            predictions,
            target_predictions: target_preds,
            stats,
        })
    }

    fn informative(&self, belief: &ParticleSet) -> bool {
        belief.location_variance_sum() <= self.filter.max_sender_variance
    }

    fn update_or_keep<R: Rng>(
        &self,
        me: NodeId,
        pred: &ParticleSet,
        msgs: &[&KernelMessage],
        guide: Option<&ParticleSet>,
        rng: &mut R,
        stats: &mut StepStats,
    ) -> ParticleSet {
        match belief_update(me, pred, msgs, guide, self.filter.proposal, self.filter.particles, rng) {
            Ok(u) => {
                stats.mixture_updates += usize::from(u.used_mixture);
                u.particles
            }
            Err(e) => {
                log::warn!("node {me}: {e}; keeping prediction");
                stats.degenerate_events += 1;
                pred.clone()
            }
        }
    }

    /// One target iteration. Returns the target belief copies and, per
    /// sensor, the target density used for the next target-to-sensor message
    /// (the extrinsic belief in exact mode, the belief otherwise).
    #[allow(clippy::too_many_arguments)]
    fn target_iteration(
        &self,
        ctx: &StepContext<'_>,
        p: u64,
        sensor_to_target: &[ParticleSet],
        sensor_beliefs: &[ParticleSet],
        target_preds: &[ParticleSet],
        bases: &[BasisSpec],
        stats: &mut StepStats,
    ) -> Result<(Vec<ParticleSet>, Vec<ParticleSet>), MsgPassError> {
        let cfg = &self.filter;
        let n = ctx.n as u64;
        let topo = ctx.topology;
        let extrinsic = cfg.messages == MessageScheme::ExactExtrinsic;
        if topo.observers.is_empty() {
            return Ok((target_preds.to_vec(), target_preds.to_vec()));
        }
        let src = if extrinsic { sensor_to_target } else { sensor_beliefs };
        let mut messages: Vec<Option<KernelMessage>> = vec![None; target_preds.len()];
        for &k in topo.observers.iter().filter(|k| self.informative(&src[k.sensor_index()])) {
            let y = self.measurement(ctx.measurements, k, NodeId::TARGET)?;
            let mut r = rng::stream(ctx.seed, &[tag::TARGET_MESSAGE, n, p, k.0 as u64]);
            let m = measurement_message(k, NodeId::TARGET, y, &src[k.sensor_index()], self.noise.as_ref(), cfg.kernel_variance, &mut r)?;
            messages[k.sensor_index()] = Some(m.kernel);
        }
        match cfg.fusion {
            Fusion::DistributedLc => self.lc_target(ctx, p, &messages, target_preds, bases, stats),
            Fusion::Centralized => self.central_target(ctx, p, &messages, target_preds, stats),
        }
    }

    fn lc_target(
        &self,
        ctx: &StepContext<'_>,
        p: u64,
        messages: &[Option<KernelMessage>],
        target_preds: &[ParticleSet],
        bases: &[BasisSpec],
        stats: &mut StepStats,
    ) -> Result<(Vec<ParticleSet>, Vec<ParticleSet>), MsgPassError> {
        let cfg = &self.filter;
        let n = ctx.n as u64;
        let r_len = (cfg.basis_degree + 1).pow(2);
        let betas: Vec<CoeffVector> = messages
            .iter()
            .enumerate()
            .map(|(s, m)| match m {
                None => CoeffVector::zeros(r_len),
                Some(m) => match lconsensus::fit_log_message(m, &target_preds[s], &bases[s], cfg.ridge_scale) {
                    Ok(f) => f.coeffs,
                    Err(e) => {
                        log::warn!("sensor {}: local fit failed ({e}); contributing zero", s + 1);
                        stats.fit_failures += 1;
                        CoeffVector::zeros(r_len)
                    }
                },
            })
            .collect();
        let outcome = lconsensus::lc_target_belief(
            &ctx.topology.comm,
            &betas,
            target_preds,
            bases,
            &cfg.consensus,
            cfg.particles,
            |_| rng::stream(ctx.seed, &[tag::TARGET_RESAMPLE, n, p]),
        )?;
        stats.degenerate_events += outcome.degenerate.iter().filter(|d| **d).count();
        let to_sensor = if cfg.messages == MessageScheme::ExactExtrinsic {
            (0..target_preds.len())
                .map(|s| {
                    if messages[s].is_none() {
                        return Ok(outcome.beliefs[s].clone());
                    }
                    let excl = &outcome.aggregates[s] - &betas[s];
                    let mut r = rng::stream(ctx.seed, &[tag::EXTRINSIC, n, p, 0, s as u64 + 1]);
                    Ok(extrinsic_target_belief(&excl, &target_preds[s], &bases[s], cfg.particles, &mut r, stats))
                })
                .collect::<Result<Vec<_>, MsgPassError>>()?
        } else {
            outcome.beliefs.clone()
        };
        Ok((outcome.beliefs, to_sensor))
    }

    fn central_target(
        &self,
        ctx: &StepContext<'_>,
        p: u64,
        messages: &[Option<KernelMessage>],
        target_preds: &[ParticleSet],
        stats: &mut StepStats,
    ) -> Result<(Vec<ParticleSet>, Vec<ParticleSet>), MsgPassError> {
        let cfg = &self.filter;
        let n = ctx.n as u64;
        let mut beliefs: Vec<ParticleSet> = Vec::with_capacity(target_preds.len());
        let mut to_sensor = Vec::with_capacity(target_preds.len());
        let mut cached: Option<(usize, Vec<Vec<f64>>)> = None;
        for (s, pred) in target_preds.iter().enumerate() {
            let reuse = matches!(&cached, Some((c, _)) if target_preds[*c] == *pred);
            if !reuse {
                let locs = pred.locations();
                let logs = messages
                    .iter()
                    .map(|m| m.as_ref().map_or_else(Vec::new, |m| m.log_evaluate_many(&locs)))
                    .collect();
                cached = Some((s, logs));
            }
            let logs = &cached.as_ref().expect("filled above").1;
            let total = sum_logs(logs, None, pred.len());
            let mut r = rng::stream(ctx.seed, &[tag::TARGET_RESAMPLE, n, p]);
            let belief = reweight_resample(pred, &total, cfg.particles, &mut r).unwrap_or_else(|| {
                log::warn!("degenerate centralized target weights; keeping prediction");
                stats.degenerate_events += 1;
                pred.clone()
            });
            if cfg.messages == MessageScheme::ExactExtrinsic && messages[s].is_some() {
                let excl = sum_logs(logs, Some(s), pred.len());
                let mut r = rng::stream(ctx.seed, &[tag::EXTRINSIC, n, p, 0, s as u64 + 1]);
                to_sensor.push(reweight_resample(pred, &excl, cfg.particles, &mut r).unwrap_or_else(|| {
                    stats.degenerate_events += 1;
                    pred.clone()
                }));
            } else {
                to_sensor.push(belief.clone());
            }
            beliefs.push(belief);
        }
        Ok((beliefs, to_sensor))
    }
}

fn sum_logs(logs: &[Vec<f64>], skip: Option<usize>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for (s, l) in logs.iter().enumerate() {
        if Some(s) == skip || l.is_empty() {
            continue;
        }
        for (t, v) in total.iter_mut().zip(l) {
            *t += v;
        }
    }
    total
}

fn reweight_resample<R: Rng>(pred: &ParticleSet, log_w: &[f64], j: usize, rng: &mut R) -> Option<ParticleSet> {
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || max < LOG_DENSITY_FLOOR {
        return None;
    }
    pred.reweight_log(log_w).ok()?.resample(j, rng).ok()
}

/// Target density excluding one sensor's factor: the prediction reweighted
/// by `exp(B - beta)`.
fn extrinsic_target_belief<R: Rng>(
    excl: &CoeffVector,
    pred: &ParticleSet,
    basis: &BasisSpec,
    j: usize,
    rng: &mut R,
    stats: &mut StepStats,
) -> ParticleSet {
    if excl.is_zero() {
        return pred.clone();
    }
    match lconsensus::reconstruct_weights(excl, pred, basis).and_then(|w| Ok(w.resample(j, rng)?)) {
        Ok(b) => b,
        Err(e) => {
            log::warn!("extrinsic target belief: {e}; using prediction");
            stats.degenerate_events += 1;
            pred.clone()
        }
    }
}
