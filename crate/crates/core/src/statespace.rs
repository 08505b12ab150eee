//! Node states, the constant-velocity motion model, range measurements and
//! state priors.
//!
//! States are `[x1, x2, v1, v2]` with positions in metres and velocities in
//! metres per time step. Only the location part enters the range model.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix2, Matrix4, Matrix4x2, Vector2, Vector4};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// 2D location `[x1, x2]`.
pub type Location = Vector2<f64>;

/// Identifier of a node. `0` is the target, sensors are `1..=K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl NodeId {
    pub const TARGET: NodeId = NodeId(0);

    pub fn is_target(self) -> bool {
        self.0 == 0
    }

    /// Zero-based index of a sensor into per-sensor vectors.
    pub fn sensor_index(self) -> usize {
        debug_assert!(self.0 > 0, "target has no sensor index");
        self.0 - 1
    }

    pub fn from_sensor_index(idx: usize) -> NodeId {
        NodeId(idx + 1)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Kinematic state of a sensor or the target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeState(pub Vector4<f64>);

impl NodeState {
    pub fn new(x1: f64, x2: f64, v1: f64, v2: f64) -> Self {
        NodeState(Vector4::new(x1, x2, v1, v2))
    }

    pub fn at_rest(location: Location) -> Self {
        NodeState::new(location.x, location.y, 0.0, 0.0)
    }

    pub fn location(&self) -> Location {
        Location::new(self.0[0], self.0[1])
    }

    pub fn velocity(&self) -> Vector2<f64> {
        Vector2::new(self.0[2], self.0[3])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Linear-Gaussian motion model `x_n = G x_{n-1} + W u_n`, `u_n ~ N(0, sigma_u2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionModel {
    pub transition: Matrix4<f64>,
    pub noise_input: Matrix4x2<f64>,
    pub sigma_u2: f64,
}

impl MotionModel {
    /// Constant-velocity model with unit time step.
    pub fn constant_velocity(sigma_u2: f64) -> Self {
        #[rustfmt::skip]
        let transition = Matrix4::new(
            1.0, 0.0, 1.0, 0.0,
            0.0, 1.0, 0.0, 1.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        #[rustfmt::skip]
        let noise_input = Matrix4x2::new(
            0.5, 0.0,
            0.0, 0.5,
            1.0, 0.0,
            0.0, 1.0,
        );
        MotionModel {
            transition,
            noise_input,
            sigma_u2,
        }
    }

    pub fn propagate(&self, state: &NodeState, u: &Vector2<f64>) -> NodeState {
        NodeState(self.transition * state.0 + self.noise_input * u)
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector2<f64> {
        let sd = self.sigma_u2.sqrt();
        let a: f64 = StandardNormal.sample(rng);
        let b: f64 = StandardNormal.sample(rng);
        Vector2::new(sd * a, sd * b)
    }

    /// One propagation step with a fresh driving-noise draw.
    pub fn step<R: Rng + ?Sized>(&self, state: &NodeState, rng: &mut R) -> NodeState {
        let u = self.sample_noise(rng);
        self.propagate(state, &u)
    }

    /// Covariance added by one step of driving noise, `sigma_u2 W W^T`.
    pub fn process_covariance(&self) -> Matrix4<f64> {
        self.noise_input * self.noise_input.transpose() * self.sigma_u2
    }
}

/// Additive range-noise distribution. Implementations must be even about zero
/// for the ring construction of measurement messages to be unbiased.
pub trait RangeNoise: fmt::Debug + Send + Sync {
    fn variance(&self) -> f64;
    fn log_density(&self, e: f64) -> f64;
    fn sample(&self, rng: &mut dyn RngCore) -> f64;
    /// Inverse distribution function, `p` in `(0, 1)`.
    fn quantile(&self, p: f64) -> f64;

    fn density(&self, e: f64) -> f64 {
        self.log_density(e).exp()
    }
}

/// Zero-mean Gaussian range noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianRangeNoise {
    pub sigma_v2: f64,
}

impl GaussianRangeNoise {
    pub fn new(sigma_v2: f64) -> Self {
        GaussianRangeNoise { sigma_v2 }
    }
}

impl RangeNoise for GaussianRangeNoise {
    fn variance(&self) -> f64 {
        self.sigma_v2
    }

    fn log_density(&self, e: f64) -> f64 {
        -0.5 * (2.0 * PI * self.sigma_v2).ln() - e * e / (2.0 * self.sigma_v2)
    }

    fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        z * self.sigma_v2.sqrt()
    }

    fn quantile(&self, p: f64) -> f64 {
        if self.sigma_v2 == 0.0 {
            return 0.0;
        }
        statrs::distribution::Normal::new(0.0, self.sigma_v2.sqrt())
            .map(|d| statrs::distribution::ContinuousCDF::inverse_cdf(&d, p))
            .unwrap_or(0.0)
    }
}

/// `||a - b|| + v`.
pub fn range_measurement(a: &NodeState, b: &NodeState, v: f64) -> f64 {
    (a.location() - b.location()).norm() + v
}

/// `f(y | a, b)` for the additive range model.
pub fn range_likelihood(y: f64, a: &Location, b: &Location, noise: &dyn RangeNoise) -> f64 {
    noise.density(y - (a - b).norm())
}

pub fn range_log_likelihood(y: f64, a: &Location, b: &Location, noise: &dyn RangeNoise) -> f64 {
    noise.log_density(y - (a - b).norm())
}

/// Prior over a node's initial state.
#[derive(Debug, Clone, PartialEq)]
pub enum StatePrior {
    /// Exactly known state (anchors, and truth generation).
    Dirac(NodeState),
    /// Location uniform on an axis-aligned box, velocity Gaussian.
    UniformLocation {
        min: Location,
        max: Location,
        velocity_mean: Vector2<f64>,
        velocity_cov: Matrix2<f64>,
    },
    Gaussian {
        mean: Vector4<f64>,
        cov: Matrix4<f64>,
    },
}

impl StatePrior {
    /// Mobile-sensor prior: location uniform on `[-500, 500]^2`,
    /// velocity `N([-0.1, -0.1], diag(0.1, 0.1))`.
    pub fn default_mobile() -> Self {
        StatePrior::UniformLocation {
            min: Location::new(-500.0, -500.0),
            max: Location::new(500.0, 500.0),
            velocity_mean: Vector2::new(-0.1, -0.1),
            velocity_cov: Matrix2::from_diagonal(&Vector2::new(0.1, 0.1)),
        }
    }

    /// Target prior `N([0, 5, 0.4, 0.4], diag(1, 1, 0.001, 0.001))`.
    pub fn default_target() -> Self {
        StatePrior::Gaussian {
            mean: Vector4::new(0.0, 5.0, 0.4, 0.4),
            cov: Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 0.001, 0.001)),
        }
    }

    pub fn is_dirac(&self) -> bool {
        matches!(self, StatePrior::Dirac(_))
    }

    pub fn mean(&self) -> NodeState {
        match self {
            StatePrior::Dirac(s) => *s,
            StatePrior::UniformLocation {
                min,
                max,
                velocity_mean,
                ..
            } => {
                let c = (min + max) * 0.5;
                NodeState::new(c.x, c.y, velocity_mean.x, velocity_mean.y)
            }
            StatePrior::Gaussian { mean, .. } => NodeState(*mean),
        }
    }

    pub fn covariance(&self) -> Matrix4<f64> {
        match self {
            StatePrior::Dirac(_) => Matrix4::zeros(),
            StatePrior::UniformLocation {
                min,
                max,
                velocity_cov,
                ..
            } => {
                let w = max - min;
                let mut c = Matrix4::zeros();
                c[(0, 0)] = w.x * w.x / 12.0;
                c[(1, 1)] = w.y * w.y / 12.0;
                c.fixed_view_mut::<2, 2>(2, 2).copy_from(velocity_cov);
                c
            }
            StatePrior::Gaussian { cov, .. } => *cov,
        }
    }

    /// Checks the structural invariants (finite parameters, PSD covariance,
    /// non-empty box).
    pub fn validate(&self) -> Result<(), String> {
        let cov = self.covariance();
        if !cov.iter().all(|v| v.is_finite()) || !self.mean().is_finite() {
            return Err("prior parameters must be finite".into());
        }
        if (cov - cov.transpose()).amax() > 1e-12 {
            return Err("prior covariance must be symmetric".into());
        }
        let eig = cov.symmetric_eigenvalues();
        if eig.iter().any(|&e| e < -1e-12) {
            return Err("prior covariance must be positive semidefinite".into());
        }
        if let StatePrior::UniformLocation { min, max, .. } = self {
            if min.x >= max.x || min.y >= max.y {
                return Err("uniform location box is empty".into());
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> NodeState {
        match self {
            StatePrior::Dirac(s) => *s,
            StatePrior::UniformLocation {
                min,
                max,
                velocity_mean,
                velocity_cov,
            } => {
                let x1 = rng.random_range(min.x..max.x);
                let x2 = rng.random_range(min.y..max.y);
                let v = gaussian_draw(velocity_mean, velocity_cov, rng);
                NodeState::new(x1, x2, v.x, v.y)
            }
            StatePrior::Gaussian { mean, cov } => NodeState(gaussian_draw(mean, cov, rng)),
        }
    }
}

fn gaussian_draw<const D: usize, R: Rng + ?Sized>(
    mean: &nalgebra::SVector<f64, D>,
    cov: &nalgebra::SMatrix<f64, D, D>,
    rng: &mut R,
) -> nalgebra::SVector<f64, D> {
    // Eigen-decomposition handles singular (PSD) covariances.
    let eig = nalgebra::DMatrix::from_column_slice(D, D, cov.as_slice()).symmetric_eigen();
    let scaled = nalgebra::DVector::from_fn(D, |i, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * eig.eigenvalues[i].max(0.0).sqrt()
    });
    let offset = eig.eigenvectors * scaled;
    mean + nalgebra::SVector::<f64, D>::from_column_slice(offset.as_slice())
}
