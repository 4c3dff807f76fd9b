//! Quaternion unscented Kalman filtering of the pose, velocity and external
//! wrench of two quadrotors carrying a rigid beam, with an EKF baseline,
//! a closed-loop simulator and the supporting I/O.

pub mod config;
pub mod dynamics;
pub mod estimation;
pub mod linalg;
pub mod perf;
pub mod quat;
pub mod simulation;
pub mod telemetry;

pub use config::{ConfigError, EstimatorKind, RunConfig, ScenarioConfig};
pub use dynamics::{BodyState, ControlInput, Discretization, DynamicsError, ObserverState, SystemParams, TransitionModel, Wrench};
pub use estimation::{
    AugmentedState, Ekf, ErrorCovariance, EstimationError, Estimator, FilterConfig, Measurement, ObservationPoints,
    QuatArithmetic, Qukf,
};
pub use quat::{RotationVector, UnitQuaternion, Vec3};
pub use simulation::{
    compute_metrics, run_scenario, Channel, ForceProfile, MetricsReport, SimulationError, TelemetryRecord,
};
pub use telemetry::{MetricsDocument, TelemetryError, TelemetryFormat};
