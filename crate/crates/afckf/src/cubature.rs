//! Third-degree spherical-radial cubature rule and the covariance-form filter
//! steps built on it.
//!
//! The rule places `2n` equally weighted points where the coordinate axes
//! pierce a sphere of radius `sqrt(n)`. Pushing the points through the system
//! functions and re-estimating mean and spread integrates polynomials up to
//! third degree exactly, so on an affine model the filter reproduces a linear
//! Kalman filter to rounding error.
//!
//! Every operation here is a pure function of its inputs; nothing caches
//! state between calls. Returned covariances are symmetrized exactly
//! (both triangles written from one value) before being handed back.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::FilterError;

/// Smallest eigenvalue tolerated in a covariance, relative to its trace.
pub const PSD_FLOOR_REL: f64 = 1e-9;

/// Diagonal jitter ladder used when a plain Cholesky factorization fails.
const JITTER_LADDER: [f64; 4] = [1e-12, 1e-10, 1e-8, 1e-6];

/// Gaussian state belief: mean and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEstimate {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl StateEstimate {
    /// Builds an estimate, enforcing shape agreement and exact covariance
    /// symmetry. PSD is checked by the operations that can violate it, not
    /// here.
    pub fn new(mean: DVector<f64>, mut cov: DMatrix<f64>) -> Result<Self, FilterError> {
        if cov.nrows() != cov.ncols() || cov.nrows() != mean.len() || mean.is_empty() {
            return Err(FilterError::DimensionMismatch {
                context: "StateEstimate::new",
            });
        }
        symmetrize(&mut cov);
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Errors unless the smallest eigenvalue clears `-PSD_FLOOR_REL * trace`.
    /// Written as a negated `>=` so a NaN eigenvalue also fails.
    pub fn check_psd_floor(&self) -> Result<(), FilterError> {
        let floor = -PSD_FLOOR_REL * self.cov.trace().abs().max(f64::MIN_POSITIVE);
        let min_eig = min_symmetric_eigenvalue(&self.cov);
        if !(min_eig >= floor) {
            return Err(FilterError::NonPsd {
                min_eig,
                jitter: 0.0,
            });
        }
        Ok(())
    }
}

/// Nominal process and measurement noise covariances used by a filter.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCovariances {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

/// Signed-axis cubature point set for a given state dimension.
///
/// Point `i` and point `i + dim` are negatives of each other, and every point
/// carries the same weight `1 / (2 dim)`.
#[derive(Debug, Clone)]
pub struct CubatureRule {
    dim: usize,
    points: Vec<DVector<f64>>,
    weight: f64,
}

impl CubatureRule {
    pub fn new(dim: usize) -> Result<Self, FilterError> {
        if dim == 0 {
            return Err(FilterError::DimensionMismatch {
                context: "CubatureRule::new: dim must be at least 1",
            });
        }
        let radius = (dim as f64).sqrt();
        let mut points = Vec::with_capacity(2 * dim);
        for i in 0..dim {
            let mut p = DVector::zeros(dim);
            p[i] = radius;
            points.push(p);
        }
        for i in 0..dim {
            let mut p = DVector::zeros(dim);
            p[i] = -radius;
            points.push(p);
        }
        Ok(Self {
            dim,
            points,
            weight: 1.0 / (2 * dim) as f64,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of points, always `2 * dim`.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// Unit-covariance points; scale by a covariance factor and shift by the
    /// mean to sample an arbitrary Gaussian.
    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    /// Total weight, computed as `2 dim * weight`. Exactly 1.0 for every
    /// supported dimension.
    pub fn weight_sum(&self) -> f64 {
        self.points.len() as f64 * self.weight
    }
}

/// Builds the `2 * dim`-point third-degree rule.
pub fn make_cubature_rule(dim: usize) -> Result<CubatureRule, FilterError> {
    CubatureRule::new(dim)
}

/// Lower-triangular `S` with `S Sᵀ = p`.
///
/// Plain Cholesky first; on failure the diagonal is jittered by `δ·I` with
/// `δ` escalating `1e-12 → 1e-6` before giving up with [`FilterError::NonPsd`].
/// The plain path reproduces `p` to better than 1e-10 relative Frobenius
/// error; a jittered factor trades that for positive definiteness.
pub fn factor_psd(p: &DMatrix<f64>) -> Result<DMatrix<f64>, FilterError> {
    let n = p.nrows();
    if n == 0 || p.ncols() != n {
        return Err(FilterError::DimensionMismatch {
            context: "factor_psd: square matrix required",
        });
    }
    if let Some(ch) = Cholesky::new(p.clone()) {
        return Ok(ch.unpack());
    }
    for &jitter in &JITTER_LADDER {
        let mut pj = p.clone();
        for i in 0..n {
            pj[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(pj) {
            log::debug!("factor_psd: succeeded with diagonal jitter {jitter:e}");
            return Ok(ch.unpack());
        }
    }
    Err(FilterError::NonPsd {
        min_eig: min_symmetric_eigenvalue(p),
        jitter: *JITTER_LADDER.last().unwrap(),
    })
}

/// Cubature images of a belief under a (possibly nonlinear) map, with their
/// weighted mean and spread. The spread carries no additive noise term.
#[derive(Debug, Clone)]
pub struct Propagated {
    /// Images of the cubature points under the map.
    pub points: Vec<DVector<f64>>,
    pub mean: DVector<f64>,
    pub spread: DMatrix<f64>,
}

/// Draws cubature points from `est`, maps them through `f`, and summarizes.
pub fn propagate(
    est: &StateEstimate,
    f: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    rule: &CubatureRule,
) -> Result<Propagated, FilterError> {
    if rule.dim() != est.dim() {
        return Err(FilterError::DimensionMismatch {
            context: "propagate: rule dimension != state dimension",
        });
    }
    let s = factor_psd(&est.cov)?;
    let mut images = Vec::with_capacity(rule.len());
    for xi in rule.points() {
        let x = &est.mean + &s * xi;
        images.push(f(&x));
    }
    let (mean, spread) = weighted_mean_spread(&images, rule.weight());
    Ok(Propagated {
        points: images,
        mean,
        spread,
    })
}

/// Time update: propagate through the transition function and add process
/// noise. Predicted covariance is the cubature spread plus `q`.
pub fn time_update(
    prior: &StateEstimate,
    f: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    q: &DMatrix<f64>,
    rule: &CubatureRule,
) -> Result<StateEstimate, FilterError> {
    let prop = propagate(prior, f, rule)?;
    let pred = StateEstimate::new(prop.mean, prop.spread + q)?;
    pred.check_psd_floor()?;
    Ok(pred)
}

/// Measurement-space view of a predicted state.
#[derive(Debug, Clone)]
pub struct MeasurementPrediction {
    /// Cubature points drawn from the predicted state.
    pub state_points: Vec<DVector<f64>>,
    /// Their images under the measurement function.
    pub meas_points: Vec<DVector<f64>>,
    /// Predicted measurement mean.
    pub mean: DVector<f64>,
    /// Measurement-space spread, without the additive noise term.
    pub spread: DMatrix<f64>,
}

/// Maps a predicted state into measurement space through `h`.
pub fn predict_measurement(
    pred: &StateEstimate,
    h: &dyn Fn(&DVector<f64>) -> Result<DVector<f64>, FilterError>,
    rule: &CubatureRule,
) -> Result<MeasurementPrediction, FilterError> {
    if rule.dim() != pred.dim() {
        return Err(FilterError::DimensionMismatch {
            context: "predict_measurement: rule dimension != state dimension",
        });
    }
    let s = factor_psd(&pred.cov)?;
    let mut state_points = Vec::with_capacity(rule.len());
    let mut meas_points = Vec::with_capacity(rule.len());
    for xi in rule.points() {
        let x = &pred.mean + &s * xi;
        meas_points.push(h(&x)?);
        state_points.push(x);
    }
    let (mean, spread) = weighted_mean_spread(&meas_points, rule.weight());
    Ok(MeasurementPrediction {
        state_points,
        meas_points,
        mean,
        spread,
    })
}

/// Innovation covariance: measurement-point spread plus the (possibly scaled)
/// measurement noise. Fails with [`FilterError::Singular`] when the result is
/// not invertible to working precision.
pub fn innovation_covariance(
    meas_points: &[DVector<f64>],
    meas_mean: &DVector<f64>,
    r_scaled: &DMatrix<f64>,
    rule: &CubatureRule,
) -> Result<DMatrix<f64>, FilterError> {
    if meas_points.len() != rule.len() {
        return Err(FilterError::DimensionMismatch {
            context: "innovation_covariance: point count != rule size",
        });
    }
    let (_, spread) = weighted_spread_about(meas_points, meas_mean, rule.weight());
    let mut p_zz = spread + r_scaled;
    symmetrize(&mut p_zz);
    if Cholesky::new(p_zz.clone()).is_none() {
        return Err(FilterError::Singular);
    }
    Ok(p_zz)
}

/// Cross-covariance between state points and their measurement images.
pub fn cross_covariance(
    state_points: &[DVector<f64>],
    state_mean: &DVector<f64>,
    meas_points: &[DVector<f64>],
    meas_mean: &DVector<f64>,
    rule: &CubatureRule,
) -> Result<DMatrix<f64>, FilterError> {
    if state_points.len() != rule.len() || meas_points.len() != rule.len() {
        return Err(FilterError::DimensionMismatch {
            context: "cross_covariance: point count != rule size",
        });
    }
    let n = state_mean.len();
    let m = meas_mean.len();
    let mut acc = DMatrix::zeros(n, m);
    for (x, z) in state_points.iter().zip(meas_points) {
        let dx = x - state_mean;
        let dz = z - meas_mean;
        acc += dx * dz.transpose();
    }
    Ok(acc * rule.weight())
}

/// Gain, posterior, and innovation from a predicted state and its
/// measurement-space summaries.
///
/// The innovation is `z - ẑ⁻` as passed in; callers that need angular
/// wrap-around adjust `z` to `ẑ⁻ + wrapped(z - ẑ⁻)` beforehand so the
/// difference formed here is already the wrapped one.
pub fn measurement_update(
    pred: &StateEstimate,
    p_zz: &DMatrix<f64>,
    p_xz: &DMatrix<f64>,
    z: &DVector<f64>,
    z_pred: &DVector<f64>,
) -> Result<(StateEstimate, DVector<f64>), FilterError> {
    let m = z.len();
    if z_pred.len() != m || p_zz.nrows() != m || p_zz.ncols() != m {
        return Err(FilterError::DimensionMismatch {
            context: "measurement_update: measurement shapes disagree",
        });
    }
    if p_xz.nrows() != pred.dim() || p_xz.ncols() != m {
        return Err(FilterError::DimensionMismatch {
            context: "measurement_update: cross-covariance shape",
        });
    }
    let chol = Cholesky::new(p_zz.clone()).ok_or(FilterError::Singular)?;
    // K = P_xz P_zz⁻¹, via P_zz Kᵀ = P_xzᵀ.
    let k = chol.solve(&p_xz.transpose()).transpose();
    let innovation = z - z_pred;
    let mean = &pred.mean + &k * &innovation;
    let cov = &pred.cov - &k * p_zz * k.transpose();
    let posterior = StateEstimate::new(mean, cov)?;
    posterior.check_psd_floor()?;
    Ok((posterior, innovation))
}

/// Writes both triangles from the averaged off-diagonal entries, leaving the
/// matrix exactly equal to its transpose.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn weighted_mean_spread(points: &[DVector<f64>], weight: f64) -> (DVector<f64>, DMatrix<f64>) {
    let dim = points[0].len();
    let mut sum = DVector::zeros(dim);
    for p in points {
        sum += p;
    }
    let mean = sum * weight;
    let (_, spread) = weighted_spread_about(points, &mean, weight);
    (mean, spread)
}

fn weighted_spread_about(
    points: &[DVector<f64>],
    mean: &DVector<f64>,
    weight: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let dim = mean.len();
    let mut acc = DMatrix::zeros(dim, dim);
    for p in points {
        let d = p - mean;
        acc += &d * d.transpose();
    }
    let mut spread = acc * weight;
    symmetrize(&mut spread);
    (mean.clone(), spread)
}
