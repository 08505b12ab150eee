//! Reference method: cooperative self-localization without target messages,
//! followed by a likelihood-consensus particle filter for the target that
//! treats the sensors' location estimates as exact.

use crate::lconsensus::{self, CoeffVector};
use crate::msgpass::{CoslatEngine, Fusion, MsgPassError, NetworkBeliefs, StepContext, StepOutcome, StepStats};
use crate::particles::ParticleSet;
use crate::rng::{self, tag};
use crate::statespace::{Location, NodeId};

/// One self-localization step. Target measurements are removed before the
/// engine sees them, so sensor beliefs never depend on them.
pub fn csl_step(engine: &CoslatEngine, prev: &NetworkBeliefs, ctx: &StepContext<'_>) -> Result<StepOutcome, MsgPassError> {
    let sensor_only = ctx.measurements.without_target();
    let mut topo = ctx.topology.clone();
    for m in &mut topo.measures {
        m.retain(|l| !l.is_target());
    }
    topo.observers.clear();
    let inner = StepContext {
        topology: &topo,
        measurements: &sensor_only,
        include_target: false,
        ..*ctx
    };
    engine.step(prev, &inner)
}

/// Target update from point sensor locations: each observer fits
/// `log f(y | x; x_hat_k)` over its prediction particles, and the fits are
/// combined as in the joint method.
pub fn dtt_step(
    engine: &CoslatEngine,
    prev_target: &[ParticleSet],
    sensor_estimates: &[Location],
    ctx: &StepContext<'_>,
) -> Result<(Vec<ParticleSet>, StepStats), MsgPassError> {
    let cfg = &engine.filter;
    let topo = ctx.topology;
    let mut stats = StepStats::default();
    let preds = engine.predict_target(prev_target, ctx.seed, tag::DTT, ctx.n);
    if topo.observers.is_empty() {
        return Ok((preds, stats));
    }
    let mut logs: Vec<Option<Vec<f64>>> = vec![None; preds.len()];
    for &k in &topo.observers {
        let y = ctx
            .measurements
            .get(k, NodeId::TARGET)
            .ok_or(MsgPassError::MissingMeasurement(k, NodeId::TARGET))?;
        let s = k.sensor_index();
        let at = sensor_estimates[s];
        logs[s] = Some(
            preds[s]
                .states()
                .iter()
                .map(|x| engine.noise.log_density(y - (x.location() - at).norm()))
                .collect(),
        );
    }
    let resample_stream = || rng::stream(ctx.seed, &[tag::DTT, ctx.n as u64, 1]);
    match cfg.fusion {
        Fusion::DistributedLc => {
            let bases = lconsensus::agree_basis(&topo.comm, &preds, cfg.basis_degree);
            let r_len = (cfg.basis_degree + 1).pow(2);
            let betas: Vec<CoeffVector> = logs
                .iter()
                .enumerate()
                .map(|(s, l)| match l {
                    None => CoeffVector::zeros(r_len),
                    Some(l) => match lconsensus::fit_log_values(&preds[s].locations(), l, &bases[s], cfg.ridge_scale) {
                        Ok(f) => f.coeffs,
                        Err(e) => {
                            log::warn!("sensor {}: local likelihood fit failed ({e}); contributing zero", s + 1);
                            stats.fit_failures += 1;
                            CoeffVector::zeros(r_len)
                        }
                    },
                })
                .collect();
            let out = lconsensus::lc_target_belief(&topo.comm, &betas, &preds, &bases, &cfg.consensus, cfg.particles, |_| {
                resample_stream()
            })?;
            stats.degenerate_events += out.degenerate.iter().filter(|d| **d).count();
            Ok((out.beliefs, stats))
        }
        Fusion::Centralized => {
            let beliefs = preds
                .iter()
                .map(|pred| {
                    let mut total = vec![0.0; pred.len()];
                    for l in logs.iter().flatten() {
                        for (t, v) in total.iter_mut().zip(l) {
                            *t += v;
                        }
                    }
                    match pred.reweight_log(&total).and_then(|w| w.resample(cfg.particles, &mut resample_stream())) {
                        Ok(b) => b,
                        Err(e) => {
                            log::warn!("degenerate target weights ({e}); keeping prediction");
                            stats.degenerate_events += 1;
                            pred.clone()
                        }
                    }
                })
                .collect();
            Ok((beliefs, stats))
        }
    }
}
