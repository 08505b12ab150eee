//! Scenario construction: node layout, truth trajectories, per-step
//! topology, measurement generation and movement gating.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::consensusnet::CommGraph;
use crate::msgpass::Belief;
use crate::rng::{self, tag};
use crate::statespace::{Location, MotionModel, NodeId, NodeState, RangeNoise, StatePrior};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario config: {0}")]
    Invalid(String),
    #[error("truth table line {line}: {msg}")]
    TruthParse { line: usize, msg: String },
    #[error("truth table: {0}")]
    TruthShape(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensorRole {
    Anchor,
    Mobile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub id: usize,
    pub role: SensorRole,
    pub position: [f64; 2],
    #[serde(default)]
    pub label: String,
    /// Scenarios in which this sensor's measurement and target-observation
    /// radii are limited to `restricted_radius`.
    #[serde(default)]
    pub restricted_in: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub location_min: [f64; 2],
    pub location_max: [f64; 2],
    pub velocity_mean: [f64; 2],
    pub velocity_var: [f64; 2],
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            location_min: [-500.0, -500.0],
            location_max: [500.0, 500.0],
            velocity_mean: [-0.1, -0.1],
            velocity_var: [0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub prior_mean: [f64; 4],
    pub prior_var: [f64; 4],
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec {
            prior_mean: [0.0, 5.0, 0.4, 0.4],
            prior_var: [1.0, 1.0, 0.001, 0.001],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub scenario: u8,
    pub steps: usize,
    pub comm_range: f64,
    pub restricted_radius: f64,
    pub sigma_v2: f64,
    pub sigma_u2: f64,
    /// Release a mobile sensor once its location-variance sum drops below
    /// `gate_factor * sigma_v2`. Disabled sensors move from `n = 1`.
    pub gating: bool,
    pub gate_factor: f64,
    pub truth_seed: u64,
    pub sensors: Vec<SensorSpec>,
    pub mobile_prior: PriorSpec,
    pub target: TargetSpec,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig::reference_network(1)
    }
}

impl ScenarioConfig {
    /// The seven-sensor network with three anchors and four mobile sensors.
    pub fn reference_network(scenario: u8) -> Self {
        let s = |id, role, x, y, label: &str, restricted_in: Vec<u8>| SensorSpec {
            id,
            role,
            position: [x, y],
            label: label.to_string(),
            restricted_in,
        };
        use SensorRole::*;
        ScenarioConfig {
            scenario,
            steps: 75,
            comm_range: 56.0,
            restricted_radius: 20.0,
            sigma_v2: 2.0,
            sigma_u2: 0.0005,
            gating: true,
            gate_factor: 5.0,
            truth_seed: 187,
            sensors: vec![
                s(1, Anchor, -8.0, 18.0, "anchor-west", vec![]),
                s(2, Anchor, 18.0, -8.0, "anchor-south", vec![]),
                s(3, Anchor, 35.5, 30.5, "anchor-east", vec![]),
                s(4, Mobile, -6.0, 36.0, "upper-left", vec![]),
                s(5, Mobile, 32.0, 34.0, "upper-right", vec![1, 2]),
                s(6, Mobile, 0.0, 0.0, "lower-left", vec![2]),
                s(7, Mobile, 22.0, 12.0, "center", vec![]),
            ],
            mobile_prior: PriorSpec::default(),
            target: TargetSpec::default(),
        }
    }

    pub fn num_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn sensor(&self, id: NodeId) -> &SensorSpec {
        &self.sensors[id.sensor_index()]
    }

    pub fn is_anchor(&self, id: NodeId) -> bool {
        self.sensor(id).role == SensorRole::Anchor
    }

    pub fn mobile_ids(&self) -> Vec<NodeId> {
        self.sensors
            .iter()
            .filter(|s| s.role == SensorRole::Mobile)
            .map(|s| NodeId(s.id))
            .collect()
    }

    /// Measurement radius of a sensor in the configured scenario.
    pub fn measurement_radius(&self, id: NodeId) -> f64 {
        if self.sensor(id).restricted_in.contains(&self.scenario) {
            self.restricted_radius
        } else {
            f64::INFINITY
        }
    }

    pub fn target_radius(&self, id: NodeId) -> f64 {
        self.measurement_radius(id)
    }

    pub fn gate_threshold(&self) -> f64 {
        self.gate_factor * self.sigma_v2
    }

    pub fn motion_model(&self) -> MotionModel {
        MotionModel::constant_velocity(self.sigma_u2)
    }

    pub fn sensor_prior(&self, id: NodeId) -> StatePrior {
        let spec = self.sensor(id);
        match spec.role {
            SensorRole::Anchor => StatePrior::Dirac(NodeState::new(spec.position[0], spec.position[1], 0.0, 0.0)),
            SensorRole::Mobile => {
                let p = &self.mobile_prior;
                StatePrior::UniformLocation {
                    min: Location::from(p.location_min),
                    max: Location::from(p.location_max),
                    velocity_mean: Vector2::from(p.velocity_mean),
                    velocity_cov: Matrix2::from_diagonal(&Vector2::from(p.velocity_var)),
                }
            }
        }
    }

    pub fn target_prior(&self) -> StatePrior {
        StatePrior::Gaussian {
            mean: Vector4::from(self.target.prior_mean),
            cov: Matrix4::from_diagonal(&Vector4::from(self.target.prior_var)),
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.sensors.is_empty() {
            return bad("at least one sensor is required".into());
        }
        for (i, s) in self.sensors.iter().enumerate() {
            if s.id != i + 1 {
                return bad(format!("sensor ids must be 1..=K in order; entry {} has id {}", i, s.id));
            }
            if !s.position.iter().all(|v| v.is_finite()) {
                return bad(format!("sensor {} position must be finite", s.id));
            }
        }
        for (name, v) in [
            ("comm_range", self.comm_range),
            ("restricted_radius", self.restricted_radius),
            ("sigma_v2", self.sigma_v2),
            ("gate_factor", self.gate_factor),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.sigma_u2 >= 0.0) || !self.sigma_u2.is_finite() {
            return bad(format!("sigma_u2 must be nonnegative, got {}", self.sigma_u2));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        for id in self.sensors.iter().map(|s| NodeId(s.id)) {
            self.sensor_prior(id).validate().map_err(ScenarioError::Invalid)?;
        }
        self.target_prior().validate().map_err(ScenarioError::Invalid)?;
        Ok(())
    }
}

/// Communication and measurement topology at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologySnapshot {
    /// Sensor communication graph, indexed by sensor index.
    pub comm: CommGraph,
    /// `M_k` per sensor index: nodes sensor `k` measures (may contain the target).
    pub measures: Vec<Vec<NodeId>>,
    /// `T_n`: sensors that observe the target, ascending.
    pub observers: Vec<NodeId>,
}

impl TopologySnapshot {
    pub fn measures_of(&self, k: NodeId) -> &[NodeId] {
        &self.measures[k.sensor_index()]
    }

    pub fn observes_target(&self, k: NodeId) -> bool {
        self.observers.contains(&k)
    }

    /// Sensors with no links at all.
    pub fn isolated(n: usize) -> Self {
        TopologySnapshot {
            comm: CommGraph::empty(n),
            measures: vec![Vec::new(); n],
            observers: Vec::new(),
        }
    }
}

/// Builds `C_n`, `M_{k,n}` and `T_n` from true locations (`locations[0]` is
/// the target, `locations[k]` sensor `k`). Thresholds are inclusive.
pub fn build_topology(locations: &[Location], cfg: &ScenarioConfig) -> TopologySnapshot {
    let k_count = cfg.num_sensors();
    assert_eq!(locations.len(), k_count + 1, "one location per node");
    let mut comm = CommGraph::empty(k_count);
    for a in 0..k_count {
        for b in a + 1..k_count {
            if (locations[a + 1] - locations[b + 1]).norm() <= cfg.comm_range {
                comm.add_edge(a, b).expect("valid indices");
            }
        }
    }
    let mut measures = vec![Vec::new(); k_count];
    let mut observers = Vec::new();
    for a in 0..k_count {
        let id = NodeId::from_sensor_index(a);
        let here = locations[a + 1];
        if (locations[0] - here).norm() <= cfg.target_radius(id) {
            measures[a].push(NodeId::TARGET);
            observers.push(id);
        }
        let radius = cfg.measurement_radius(id);
        for b in comm.neighbors(a) {
            if (locations[b + 1] - here).norm() <= radius {
                measures[a].push(NodeId::from_sensor_index(b));
            }
        }
    }
    TopologySnapshot {
        comm,
        measures,
        observers,
    }
}

/// True states of all nodes, `states[node][n]` for `n = 0..=N`; node 0 is
/// the target.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub states: Vec<Vec<NodeState>>,
}

impl Truth {
    pub fn steps(&self) -> usize {
        self.states.first().map_or(0, |s| s.len().saturating_sub(1))
    }

    pub fn num_nodes(&self) -> usize {
        self.states.len()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ScenarioError> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        out.write_record(["node_id", "n", "x1", "x2", "v1", "v2"])?;
        for (node, traj) in self.states.iter().enumerate() {
            for (n, s) in traj.iter().enumerate() {
                out.write_record([
                    node.to_string(),
                    n.to_string(),
                    format!("{:.6}", s.0[0]),
                    format!("{:.6}", s.0[1]),
                    format!("{:.6}", s.0[2]),
                    format!("{:.6}", s.0[3]),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Parses a truth table (`node_id,n,x1,x2,v1,v2`). Every node must cover
    /// the same contiguous range `0..=N` and node ids must be `0..num_nodes`.
    pub fn read_csv<R: Read>(r: R) -> Result<Truth, ScenarioError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let headers = rdr.headers()?.clone();
        let expected = ["node_id", "n", "x1", "x2", "v1", "v2"];
        if headers.iter().map(str::trim).ne(expected.iter().copied()) {
            return Err(ScenarioError::TruthParse {
                line: 1,
                msg: format!("expected header {}", expected.join(",")),
            });
        }
        let mut rows: BTreeMap<(usize, usize), NodeState> = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            if rec.len() != 6 {
                return Err(ScenarioError::TruthParse {
                    line,
                    msg: format!("expected 6 fields, got {}", rec.len()),
                });
            }
            let int = |j: usize| {
                rec[j].trim().parse::<usize>().map_err(|e| ScenarioError::TruthParse {
                    line,
                    msg: format!("field {}: {e}", expected[j]),
                })
            };
            let float = |j: usize| {
                let v = rec[j].trim().parse::<f64>().map_err(|e| ScenarioError::TruthParse {
                    line,
                    msg: format!("field {}: {e}", expected[j]),
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(ScenarioError::TruthParse {
                        line,
                        msg: format!("field {} is not finite", expected[j]),
                    })
                }
            };
            let key = (int(0)?, int(1)?);
            let state = NodeState::new(float(2)?, float(3)?, float(4)?, float(5)?);
            if rows.insert(key, state).is_some() {
                return Err(ScenarioError::TruthParse {
                    line,
                    msg: format!("duplicate row for node {} step {}", key.0, key.1),
                });
            }
        }
        let nodes = rows.keys().map(|k| k.0).max().map_or(0, |m| m + 1);
        if nodes == 0 {
            return Err(ScenarioError::TruthShape("no rows".into()));
        }
        let steps = rows.keys().map(|k| k.1).max().unwrap_or(0) + 1;
        if rows.len() != nodes.saturating_mul(steps) {
            return Err(ScenarioError::TruthShape(format!(
                "expected {nodes} nodes x {steps} steps, found {} rows",
                rows.len()
            )));
        }
        let mut states = vec![Vec::with_capacity(steps); nodes];
        for ((node, _), s) in rows {
            states[node].push(s);
        }
        Ok(Truth { states })
    }
}

/// Draws one realization of every node's trajectory. Anchors stay put,
/// mobile sensors start at their configured positions with a velocity drawn
/// from the mobile velocity prior, and the target starts at its prior mean
/// location with a velocity drawn from its prior.
pub fn generate_truth(cfg: &ScenarioConfig) -> Truth {
    let model = cfg.motion_model();
    let mut rng = rng::stream(cfg.truth_seed, &[tag::TRUTH]);
    let mut states = Vec::with_capacity(cfg.num_sensors() + 1);
    let target_prior = cfg.target_prior();
    let t0 = {
        let draw = target_prior.sample(&mut rng);
        let m = target_prior.mean();
        NodeState::new(m.0[0], m.0[1], draw.0[2], draw.0[3])
    };
    states.push(trajectory(&model, t0, cfg.steps, &mut rng));
    for spec in &cfg.sensors {
        let start = match spec.role {
            SensorRole::Anchor => NodeState::new(spec.position[0], spec.position[1], 0.0, 0.0),
            SensorRole::Mobile => {
                let v = cfg.sensor_prior(NodeId(spec.id)).sample(&mut rng).velocity();
                NodeState::new(spec.position[0], spec.position[1], v.x, v.y)
            }
        };
        if spec.role == SensorRole::Anchor {
            states.push(vec![start; cfg.steps + 1]);
        } else {
            states.push(trajectory(&model, start, cfg.steps, &mut rng));
        }
    }
    Truth { states }
}

fn trajectory<R: rand::Rng>(model: &MotionModel, start: NodeState, steps: usize, rng: &mut R) -> Vec<NodeState> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(start);
    for _ in 0..steps {
        let next = model.step(out.last().expect("non-empty"), rng);
        out.push(next);
    }
    out
}

/// `true` iff the location-variance sum of `belief` is below `threshold`.
pub fn gate_movement(belief: &Belief, threshold: f64) -> bool {
    belief.particles.location_variance_sum() < threshold
}

/// Latched movement gate: records the step at which each mobile sensor was
/// released. Anchors and ungated scenarios are released from the start.
#[derive(Debug, Clone, PartialEq)]
pub struct MovementGate {
    released_at: Vec<Option<usize>>,
    mobile: Vec<bool>,
    threshold: f64,
}

impl MovementGate {
    pub fn new(cfg: &ScenarioConfig) -> Self {
        let mobile: Vec<bool> = cfg.sensors.iter().map(|s| s.role == SensorRole::Mobile).collect();
        let released_at = mobile.iter().map(|_| if cfg.gating { None } else { Some(0) }).collect();
        MovementGate {
            released_at,
            mobile,
            threshold: cfg.gate_threshold(),
        }
    }

    /// Latches releases after the beliefs of step `n` are final.
    pub fn update(&mut self, n: usize, beliefs: &[Belief]) {
        for (idx, b) in beliefs.iter().enumerate() {
            if self.released_at[idx].is_none() && gate_movement(b, self.threshold) {
                self.released_at[idx] = Some(n);
            }
        }
    }

    pub fn is_released(&self, sensor_index: usize) -> bool {
        self.released_at[sensor_index].is_some()
    }

    pub fn released_at(&self, sensor_index: usize) -> Option<usize> {
        self.released_at[sensor_index]
    }

    /// True state of every node at step `n` given the release history. A
    /// frozen sensor rests at its start location; a sensor released after
    /// step `r` follows its trajectory shifted by `r` steps.
    pub fn realized_states(&self, truth: &Truth, n: usize) -> Vec<NodeState> {
        let mut out = Vec::with_capacity(truth.num_nodes());
        out.push(truth.states[0][n]);
        for idx in 0..truth.num_nodes() - 1 {
            let traj = &truth.states[idx + 1];
            let s = if !self.mobile[idx] {
                traj[n]
            } else {
                match self.released_at[idx] {
                    Some(r) if n > r => traj[n - r],
                    Some(_) | None => NodeState::at_rest(traj[0].location()),
                }
            };
            out.push(s);
        }
        out
    }
}

/// Range measurements `y_{k,l;n}` keyed by `(k, l)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeasurementSet {
    values: BTreeMap<(NodeId, NodeId), f64>,
}

impl MeasurementSet {
    pub fn get(&self, k: NodeId, l: NodeId) -> Option<f64> {
        self.values.get(&(k, l)).copied()
    }

    pub fn insert(&mut self, k: NodeId, l: NodeId, y: f64) {
        self.values.insert((k, l), y);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, NodeId, f64)> + '_ {
        self.values.iter().map(|(&(k, l), &y)| (k, l, y))
    }

    /// Removes all sensor-target measurements.
    pub fn without_target(&self) -> MeasurementSet {
        MeasurementSet {
            values: self
                .values
                .iter()
                .filter(|((_, l), _)| !l.is_target())
                .map(|(k, v)| (*k, *v))
                .collect(),
        }
    }

    /// Feeds the measurement log of one step into a running digest.
    pub fn digest_into(&self, n: usize, hasher: &mut Sha256) {
        for (k, l, y) in self.iter() {
            hasher.update((n as u64).to_le_bytes());
            hasher.update((k.0 as u64).to_le_bytes());
            hasher.update((l.0 as u64).to_le_bytes());
            hasher.update(y.to_bits().to_le_bytes());
        }
    }
}

/// One measurement per `(k, l in M_k)` with independent noise. The noise of
/// `(k, l, n)` comes from its own stream under `run_seed`, so two methods run
/// on the same run see the same noise realization.
pub fn generate_measurements(
    states: &[NodeState],
    topo: &TopologySnapshot,
    noise: &dyn RangeNoise,
    run_seed: u64,
    n: usize,
) -> MeasurementSet {
    let mut set = MeasurementSet::default();
    for (idx, targets) in topo.measures.iter().enumerate() {
        let k = NodeId::from_sensor_index(idx);
        for &l in targets {
            let mut rng = rng::stream(run_seed, &[tag::MEASUREMENT, n as u64, k.0 as u64, l.0 as u64]);
            let v = noise.sample(&mut rng);
            let y = crate::statespace::range_measurement(&states[k.0], &states[l.0], v);
            set.insert(k, l, y);
        }
    }
    set
}
