//! Benchmark system models: planar constant-velocity motion observed by a
//! range-bearing sensor at the origin, plus the noise scenarios the Monte
//! Carlo harness runs.
//!
//! State layout is `[pos_x, vel_x, pos_y, vel_y]`; measurements are
//! `[range, bearing]` with the bearing in radians.

use std::f64::consts::{PI, TAU};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::FilterError;

/// Range below which the bearing is numerically meaningless.
pub const ORIGIN_EPS: f64 = 1e-9;

/// Wraps an angle into `(-pi, pi]`. Any input differs from its wrap by an
/// exact multiple of `2 pi`.
pub fn wrap_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Constant-velocity transition matrix for time step `ts`.
pub fn cv_transition(ts: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, ts, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, ts, //
            0.0, 0.0, 0.0, 1.0,
        ],
    )
}

/// Range and bearing of a state as seen from the origin. `hypot` keeps the
/// range finite even when the squared coordinates would overflow.
pub fn range_bearing(x: &DVector<f64>) -> Result<DVector<f64>, FilterError> {
    if x.len() < 3 {
        return Err(FilterError::DimensionMismatch {
            context: "range_bearing: state must carry positions at indices 0 and 2",
        });
    }
    let (px, py) = (x[0], x[2]);
    let range = px.hypot(py);
    if range < ORIGIN_EPS {
        return Err(FilterError::AtOrigin { eps: ORIGIN_EPS });
    }
    Ok(DVector::from_vec(vec![range, py.atan2(px)]))
}

/// A discrete-time system: transition function, measurement function, and
/// which measurement components live on the circle.
pub struct SystemModel {
    /// State dimension.
    pub n: usize,
    /// Measurement dimension.
    pub m: usize,
    /// Time step in seconds.
    pub ts: f64,
    /// State transition.
    pub f: Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
    /// Measurement map. May fail where the sensor is undefined.
    pub h: Box<dyn Fn(&DVector<f64>) -> Result<DVector<f64>, FilterError> + Send + Sync>,
    /// Per-component flag: `true` means differences of that component are
    /// wrapped into `(-pi, pi]`.
    pub angular: Vec<bool>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("ts", &self.ts)
            .field("angular", &self.angular)
            .finish()
    }
}

impl SystemModel {
    pub fn new(
        n: usize,
        m: usize,
        ts: f64,
        f: Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
        h: Box<dyn Fn(&DVector<f64>) -> Result<DVector<f64>, FilterError> + Send + Sync>,
        angular: Vec<bool>,
    ) -> Result<Self, FilterError> {
        if angular.len() != m || n == 0 || m == 0 {
            return Err(FilterError::DimensionMismatch {
                context: "SystemModel::new: angular flags must match measurement dimension",
            });
        }
        Ok(Self {
            n,
            m,
            ts,
            f,
            h,
            angular,
        })
    }

    /// The benchmark pair: planar constant velocity observed in range and
    /// bearing from the origin.
    pub fn range_bearing_cv(ts: f64) -> Self {
        let fm = cv_transition(ts);
        Self {
            n: 4,
            m: 2,
            ts,
            f: Box::new(move |x| &fm * x),
            h: Box::new(range_bearing),
            angular: vec![false, true],
        }
    }

    /// Wraps the angular components of a measurement-space vector into
    /// `(-pi, pi]`, leaving the rest untouched.
    pub fn wrap_components(&self, mut d: DVector<f64>) -> DVector<f64> {
        for (i, &ang) in self.angular.iter().enumerate() {
            if ang {
                d[i] = wrap_angle(d[i]);
            }
        }
        d
    }

    /// Difference `a - b` with angular components wrapped into `(-pi, pi]`.
    pub fn wrapped_diff(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        self.wrap_components(a - b)
    }
}

/// Noise scenario selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseId {
    /// Stationary noise throughout the run.
    A,
    /// Measurement noise inflated over the middle third of the run.
    B,
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CaseId::A => write!(f, "A"),
            CaseId::B => write!(f, "B"),
        }
    }
}

/// Multiplies the base measurement noise by `gamma` for epochs in
/// `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InflationSchedule {
    pub gamma: f64,
    pub start: usize,
    pub end: usize,
}

impl InflationSchedule {
    /// Inflation over the middle third of a run: `[steps/3, 2*steps/3)` in
    /// integer arithmetic.
    pub fn middle_third(steps: usize, gamma: f64) -> Self {
        Self {
            gamma,
            start: steps / 3,
            end: 2 * steps / 3,
        }
    }

    pub fn active(&self, epoch: usize) -> bool {
        epoch >= self.start && epoch < self.end
    }
}

/// True noise intensities used to simulate a run: a fixed process noise and
/// a measurement noise that may be inflated on a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCase {
    pub case: CaseId,
    pub q_true: DMatrix<f64>,
    pub r_base: DMatrix<f64>,
    pub inflation: Option<InflationSchedule>,
}

impl NoiseCase {
    /// Effective measurement noise covariance at a given epoch.
    pub fn r_at(&self, epoch: usize) -> DMatrix<f64> {
        match &self.inflation {
            Some(s) if s.active(epoch) => &self.r_base * s.gamma,
            _ => self.r_base.clone(),
        }
    }
}

/// Assembles a [`NoiseCase`]; case B gets the middle-third inflation window.
pub fn make_noise_case(
    case: CaseId,
    q_true: DMatrix<f64>,
    r_base: DMatrix<f64>,
    gamma: f64,
    steps: usize,
) -> NoiseCase {
    let inflation = match case {
        CaseId::A => None,
        CaseId::B => Some(InflationSchedule::middle_third(steps, gamma)),
    };
    NoiseCase {
        case,
        q_true,
        r_base,
        inflation,
    }
}
