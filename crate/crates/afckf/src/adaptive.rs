//! Adaptive layer on top of the cubature steps: sliding innovation and
//! residual windows, the two fading factors, windowed noise estimates, and
//! the per-epoch filter driver.
//!
//! A filter epoch is all-or-nothing. Every fallible computation happens
//! before any field of [`AdaptiveCkf`] is assigned, so a failed epoch leaves
//! the estimate, the windows, and the adaptive state exactly as they were
//! and the caller can skip the epoch by holding the previous posterior.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cubature::{
    cross_covariance, innovation_covariance, measurement_update, predict_measurement, propagate,
    symmetrize, CubatureRule, NoiseCovariances, StateEstimate,
};
use crate::error::FilterError;
use crate::models::SystemModel;

/// The filter family. Variants differ only in which adaptive mechanisms are
/// switched on; the cubature arithmetic underneath is shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FilterVariant {
    /// Plain cubature filter, nothing adaptive.
    #[serde(rename = "CKF")]
    Ckf,
    /// Windowed measurement-noise estimate substituted for the nominal one.
    #[serde(rename = "ACKF")]
    Ackf,
    /// One fading factor scaling the whole predicted covariance.
    #[serde(rename = "AFCKF_single")]
    AfckfSingle,
    /// One fading factor scaling only the propagated spread, noise untouched.
    #[serde(rename = "AFCKF_P")]
    AfckfP,
    /// Spread fading plus a second factor scaling a windowed noise estimate
    /// that is refreshed only while the innovation energy matches theory.
    #[serde(rename = "AFCKF_R")]
    AfckfR,
}

impl FilterVariant {
    pub fn all() -> [FilterVariant; 5] {
        [
            FilterVariant::Ckf,
            FilterVariant::Ackf,
            FilterVariant::AfckfSingle,
            FilterVariant::AfckfP,
            FilterVariant::AfckfR,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            FilterVariant::Ckf => "CKF",
            FilterVariant::Ackf => "ACKF",
            FilterVariant::AfckfSingle => "AFCKF_single",
            FilterVariant::AfckfP => "AFCKF_P",
            FilterVariant::AfckfR => "AFCKF_R",
        }
    }

    /// Applies a fading factor to the predicted covariance.
    pub fn fades(&self) -> bool {
        matches!(
            self,
            FilterVariant::AfckfSingle | FilterVariant::AfckfP | FilterVariant::AfckfR
        )
    }

    /// Replaces the nominal measurement noise with the windowed estimate.
    pub fn estimates_r(&self) -> bool {
        matches!(self, FilterVariant::Ackf | FilterVariant::AfckfR)
    }

    /// Scales the measurement noise by a second factor.
    pub fn uses_a2(&self) -> bool {
        matches!(self, FilterVariant::AfckfR)
    }

    /// Whether the fading-factor window statistic subtracts the window mean.
    /// The noise-estimating variant keeps the uncentered form so the factor
    /// test and the noise estimate read the window identically.
    fn centered_window(&self) -> bool {
        matches!(self, FilterVariant::AfckfP)
    }
}

impl fmt::Display for FilterVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FilterVariant::all()
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                format!(
                    "unknown variant {s:?}, expected one of CKF, ACKF, AFCKF_single, AFCKF_P, AFCKF_R"
                )
            })
    }
}

/// Tuning knobs for the adaptive mechanisms.
#[derive(Debug, Clone, PartialEq)]
pub struct FadingConfig {
    /// Sliding-window length in epochs.
    pub window: usize,
    /// Upper clamp for both fading factors.
    pub a_max: f64,
    /// Relative eigenvalue floor applied to the measurement-noise estimate.
    pub eps_r: f64,
    /// Forces both factors to exactly 1 and keeps the nominal measurement
    /// noise in place, turning every variant into the plain filter.
    pub fixed_unit_factors: bool,
    /// Also produce the windowed process-noise estimate (diagnostic only,
    /// never fed back into the filter).
    pub estimate_q: bool,
}

impl Default for FadingConfig {
    fn default() -> Self {
        Self {
            window: 30,
            a_max: 4.0,
            eps_r: 1e-8,
            fixed_unit_factors: false,
            estimate_q: false,
        }
    }
}

/// Fixed-capacity FIFO of measurement-space vectors.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    cap: usize,
    buf: VecDeque<DVector<f64>>,
}

impl SlidingWindow {
    pub fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            buf: VecDeque::with_capacity(cap.max(1)),
        }
    }

    /// Appends a sample, evicting the oldest when at capacity.
    pub fn push(&mut self, v: DVector<f64>) {
        if self.buf.len() == self.cap {
            self.buf.pop_front();
        }
        self.buf.push_back(v);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.buf.len() == self.cap
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn iter(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.buf.iter()
    }

    /// Sample covariance of the window contents.
    ///
    /// Uncentered: `(1/N) sum v vᵀ`, needs one sample. Centered:
    /// `1/(N-1) sum (v - v̄)(v - v̄)ᵀ`, needs two.
    pub fn covariance(&self, centered: bool) -> Result<DMatrix<f64>, FilterError> {
        let n = self.buf.len();
        let need = if centered { 2 } else { 1 };
        if n < need {
            return Err(FilterError::WindowTooShort { need, got: n });
        }
        let dim = self.buf[0].len();
        let mut acc = DMatrix::zeros(dim, dim);
        if centered {
            let mut mean = DVector::zeros(dim);
            for v in &self.buf {
                mean += v;
            }
            mean /= n as f64;
            for v in &self.buf {
                let d = v - &mean;
                acc += &d * d.transpose();
            }
            acc /= (n - 1) as f64;
        } else {
            for v in &self.buf {
                acc += v * v.transpose();
            }
            acc /= n as f64;
        }
        symmetrize(&mut acc);
        Ok(acc)
    }
}

/// Residual: measurement minus the posterior-predicted measurement. Callers
/// with angular components wrap the result afterwards.
pub fn residual(z: &DVector<f64>, h_of_posterior: &DVector<f64>) -> DVector<f64> {
    z - h_of_posterior
}

/// First fading factor, scaling the predicted covariance.
///
/// The factor only engages when the windowed innovation covariance exceeds
/// the theoretical one (trace test); the noise trace is subtracted from both
/// sides so the ratio compares the state-dependent parts. A degenerate
/// denominator is reported and treated as no fading.
pub fn compute_a1(c_hat: &DMatrix<f64>, p_zz: &DMatrix<f64>, r: &DMatrix<f64>, a_max: f64) -> f64 {
    let (tr_c_hat, tr_pzz, tr_r) = (c_hat.trace(), p_zz.trace(), r.trace());
    if !(tr_c_hat.is_finite() && tr_pzz.is_finite() && tr_r.is_finite()) {
        log::warn!("fading factor a1: non-finite traces, holding at 1");
        return 1.0;
    }
    if tr_c_hat <= tr_pzz {
        return 1.0;
    }
    let denom = tr_pzz - tr_r;
    if denom <= f64::MIN_POSITIVE {
        log::warn!("fading factor a1: degenerate denominator {denom:e}, holding at 1");
        return 1.0;
    }
    ((tr_c_hat - tr_r) / denom).clamp(1.0, a_max)
}

/// Inflates a predicted covariance: `a1 * spread + q`, symmetrized. With
/// `a1 = 1` this is the plain time update, bit for bit.
pub fn apply_p_adaption(spread: &DMatrix<f64>, q: &DMatrix<f64>, a1: f64) -> DMatrix<f64> {
    let mut p = spread * a1 + q;
    symmetrize(&mut p);
    p
}

/// Second fading factor, scaling the measurement noise. Plain trace ratio of
/// observed to theoretical innovation covariance, clamped to `[1, a_max]`.
pub fn compute_a2(c_hat: &DMatrix<f64>, c_theory: &DMatrix<f64>, a_max: f64) -> f64 {
    let (tr_c_hat, tr_c_theory) = (c_hat.trace(), c_theory.trace());
    if !(tr_c_hat.is_finite() && tr_c_theory.is_finite()) {
        log::warn!("fading factor a2: non-finite traces, holding at 1");
        return 1.0;
    }
    if tr_c_hat <= tr_c_theory {
        return 1.0;
    }
    if tr_c_theory <= f64::MIN_POSITIVE {
        log::warn!("fading factor a2: degenerate denominator {tr_c_theory:e}, holding at 1");
        return 1.0;
    }
    (tr_c_hat / tr_c_theory).clamp(1.0, a_max)
}

/// Scales the measurement noise by the second factor.
pub fn apply_r_adaption(r: &DMatrix<f64>, a2: f64) -> DMatrix<f64> {
    r * a2
}

/// Windowed measurement-noise estimate: uncentered innovation covariance
/// minus the predicted measurement spread, eigenvalue-floored to keep it
/// usable as a covariance. Returns the estimate and whether the floor fired.
pub fn estimate_r_star(
    innovations: &SlidingWindow,
    meas_spread: &DMatrix<f64>,
    eps_r: f64,
) -> Result<(DMatrix<f64>, bool), FilterError> {
    let c_hat = innovations.covariance(false)?;
    let mut raw = c_hat - meas_spread;
    symmetrize(&mut raw);
    let m = raw.nrows() as f64;
    let floor = eps_r * raw.trace().abs().max(meas_spread.trace().abs()) / m;
    let se = raw.clone().symmetric_eigen();
    let mut vals = se.eigenvalues.clone();
    let mut floored = false;
    for v in vals.iter_mut() {
        if *v < floor {
            *v = floor;
            floored = true;
        }
    }
    if !floored {
        return Ok((raw, false));
    }
    let mut r = &se.eigenvectors * DMatrix::from_diagonal(&vals) * se.eigenvectors.transpose();
    symmetrize(&mut r);
    Ok((r, true))
}

/// Energy-test level above which an epoch counts as mismatched for the
/// substitution gate. Sits above the trace jitter of a healthy windowed
/// estimate, so routine fluctuation keeps refreshing the substitution, and
/// matches the benchmark's recovered-detection line: a second factor that
/// has fallen back below this level is treated as released.
const FLAG_THRESHOLD: f64 = 1.05;

/// Per-epoch growth bound on the substituted noise estimate.
///
/// A raw windowed estimate can jump to zero in one epoch whenever the filter
/// runs conservative (believed spread above the realized error), and the
/// resulting unit gain collapses the state covariance onto a stale velocity.
/// Walking the substitution at a bounded rate keeps the gain finite on the
/// way down and lets the feedback through the innovation energy settle the
/// walk on the true level instead of overshooting through it.
const SUBSTITUTION_RATE: f64 = 1.25;

/// Rescales `fresh` so each diagonal lands inside `[lo(i), hi(i)]`, applying
/// the correction as a congruence so the result stays symmetric PSD with
/// `fresh`'s correlation structure.
fn clamp_diagonals(
    fresh: &DMatrix<f64>,
    lo: impl Fn(usize) -> f64,
    hi: impl Fn(usize) -> f64,
) -> DMatrix<f64> {
    let m = fresh.nrows();
    let mut d = DVector::from_element(m, 1.0);
    for i in 0..m {
        let clamped = fresh[(i, i)].clamp(lo(i), hi(i));
        if fresh[(i, i)] > 0.0 {
            d[i] = (clamped / fresh[(i, i)]).sqrt();
        }
    }
    let scale = DMatrix::from_diagonal(&d);
    let mut out = &scale * fresh * &scale;
    symmetrize(&mut out);
    out
}

/// Conservative substitution policy: the windowed estimate only replaces the
/// nominal noise where it claims the channel is cleaner than modeled. Energy
/// above the nominal level is left to the factors; substituting it would
/// lower the gain in exactly the episodes where the window is least
/// trustworthy, and a filter lagging its target feeds that spiral.
fn capped_at_nominal(fresh: &DMatrix<f64>, nominal: &DMatrix<f64>) -> DMatrix<f64> {
    clamp_diagonals(fresh, |_| 0.0, |i| nominal[(i, i)])
}

/// Per-epoch growth bound on top of [`capped_at_nominal`] for the
/// double-factor variant's substitution walk.
fn rate_limited(prev: &DMatrix<f64>, fresh: &DMatrix<f64>) -> DMatrix<f64> {
    clamp_diagonals(
        fresh,
        |i| prev[(i, i)] / SUBSTITUTION_RATE,
        |i| prev[(i, i)] * SUBSTITUTION_RATE,
    )
}

/// Windowed process-noise estimate, reported in measurement space as
/// `H Q Hᵀ` and, when a Jacobian is supplied, pulled back to state space
/// through its pseudo-inverse. Diagnostic output only.
#[derive(Debug, Clone, PartialEq)]
pub struct QStarEstimate {
    /// Measurement-space estimate of the process noise contribution.
    pub hqh: DMatrix<f64>,
    /// State-space recovery, when a Jacobian was available.
    pub q: Option<DMatrix<f64>>,
    /// True when the measurement dimension is below the state dimension, so
    /// the state-space recovery is only the minimum-norm solution.
    pub rank_deficient: bool,
}

/// Builds the process-noise estimate from the windowed innovation-residual
/// differences and the measurement-space spreads around the current update.
pub fn estimate_q_star(
    diffs: &SlidingWindow,
    h_spread_no_q: &DMatrix<f64>,
    hph_post: &DMatrix<f64>,
    jacobian: Option<&DMatrix<f64>>,
) -> Result<QStarEstimate, FilterError> {
    let mean_outer = diffs.covariance(false)?;
    let mut hqh = mean_outer - h_spread_no_q + hph_post;
    symmetrize(&mut hqh);
    let (q, rank_deficient) = match jacobian {
        Some(h) => {
            let pinv = h.clone().pseudo_inverse(1e-12).map_err(|_| {
                FilterError::DimensionMismatch {
                    context: "estimate_q_star: Jacobian pseudo-inverse",
                }
            })?;
            let mut q = &pinv * &hqh * pinv.transpose();
            symmetrize(&mut q);
            (Some(q), h.nrows() < h.ncols())
        }
        None => (None, false),
    };
    Ok(QStarEstimate {
        hqh,
        q,
        rank_deficient,
    })
}

/// Central-difference Jacobian of a measurement function.
pub fn fd_jacobian(
    h: &dyn Fn(&DVector<f64>) -> Result<DVector<f64>, FilterError>,
    x: &DVector<f64>,
    m: usize,
) -> Result<DMatrix<f64>, FilterError> {
    let n = x.len();
    let mut jac = DMatrix::zeros(m, n);
    for j in 0..n {
        let dx = 1e-6 * x[j].abs().max(1.0);
        let mut hi = x.clone();
        hi[j] += dx;
        let mut lo = x.clone();
        lo[j] -= dx;
        let col = (h(&hi)? - h(&lo)?) / (2.0 * dx);
        if col.len() != m {
            return Err(FilterError::DimensionMismatch {
                context: "fd_jacobian: measurement dimension",
            });
        }
        jac.set_column(j, &col);
    }
    Ok(jac)
}

/// Adaptive quantities carried across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveState {
    pub a1: f64,
    pub a2: f64,
    /// Latest windowed measurement-noise estimate, once the window is full.
    pub r_star: Option<DMatrix<f64>>,
    pub r_star_floored: bool,
    /// Noise estimate actually substituted into the filter. Follows `r_star`
    /// while the innovation energy is consistent with theory (second factor
    /// at 1); while a mismatch is flagged it holds the last clean estimate,
    /// so the factors scale a pre-fault noise level instead of one that has
    /// already absorbed the fault. Once the flag has persisted for a full
    /// window every sample postdates the shift and the hold concedes, each
    /// channel bounded by `a_max` over its [`r_anchor`](Self::r_anchor)
    /// level and by the nominal model: window energy alone cannot attribute
    /// a sustained excess to the noise rather than to filter lag, so energy
    /// beyond those ceilings always stays with the factors.
    pub r_held: Option<DMatrix<f64>>,
    /// The held estimate as it stood when the current flag run started: the
    /// last level every channel agreed was clean. Concession is bounded per
    /// channel by `a_max` times this anchor, so a channel whose own share of
    /// the excess is small (the trace statistics are dominated by the
    /// largest-unit channel) cannot quietly absorb estimation error instead
    /// of noise.
    pub r_anchor: Option<DMatrix<f64>>,
    /// Consecutive committed epochs whose energy test flagged a mismatch
    /// (or kept the frozen fade firing); zero on every clean epoch. Values
    /// in `1..window` freeze both the hold and the fade baseline.
    pub flagged_run: usize,
    /// Latest process-noise diagnostic, when enabled.
    pub q_star: Option<QStarEstimate>,
}

impl Default for AdaptiveState {
    fn default() -> Self {
        Self {
            a1: 1.0,
            a2: 1.0,
            r_star: None,
            r_star_floored: false,
            r_held: None,
            r_anchor: None,
            flagged_run: 0,
            q_star: None,
        }
    }
}

/// Per-epoch diagnostics emitted by [`AdaptiveCkf::step`].
#[derive(Debug, Clone, Copy)]
pub struct EpochTelemetry {
    pub epoch: usize,
    pub a1: f64,
    pub a2: f64,
    /// Trace of the windowed innovation covariance behind `a1`, NaN while
    /// the factor is inactive.
    pub tr_c_hat: f64,
    /// Trace of the unfaded theoretical innovation covariance, NaN while the
    /// factor is inactive.
    pub tr_pzz: f64,
    /// Whether the measurement-noise eigenvalue floor fired this epoch.
    pub floored: bool,
    pub variant: FilterVariant,
}

/// A cubature filter with the adaptive mechanisms of one [`FilterVariant`].
#[derive(Debug)]
pub struct AdaptiveCkf {
    variant: FilterVariant,
    cfg: FadingConfig,
    nominal: NoiseCovariances,
    rule: CubatureRule,
    estimate: StateEstimate,
    innovations: SlidingWindow,
    residuals: SlidingWindow,
    diffs: SlidingWindow,
    adaptive: AdaptiveState,
    epoch: usize,
}

impl AdaptiveCkf {
    pub fn new(
        variant: FilterVariant,
        init: StateEstimate,
        nominal: NoiseCovariances,
        cfg: FadingConfig,
    ) -> Result<Self, FilterError> {
        let n = init.dim();
        if nominal.q.nrows() != n || nominal.q.ncols() != n {
            return Err(FilterError::DimensionMismatch {
                context: "AdaptiveCkf::new: process noise shape",
            });
        }
        if nominal.r.nrows() != nominal.r.ncols() || nominal.r.nrows() == 0 {
            return Err(FilterError::DimensionMismatch {
                context: "AdaptiveCkf::new: measurement noise shape",
            });
        }
        if cfg.window < 2 {
            return Err(FilterError::WindowTooShort {
                need: 2,
                got: cfg.window,
            });
        }
        let rule = CubatureRule::new(n)?;
        let w = cfg.window;
        Ok(Self {
            variant,
            cfg,
            nominal,
            rule,
            estimate: init,
            innovations: SlidingWindow::new(w),
            residuals: SlidingWindow::new(w),
            diffs: SlidingWindow::new(w),
            adaptive: AdaptiveState::default(),
            epoch: 0,
        })
    }

    pub fn variant(&self) -> FilterVariant {
        self.variant
    }

    pub fn estimate(&self) -> &StateEstimate {
        &self.estimate
    }

    pub fn adaptive(&self) -> &AdaptiveState {
        &self.adaptive
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Measurement noise the filter will use next epoch: the held windowed
    /// estimate for the variants that maintain one, otherwise the nominal.
    ///
    /// Substitution waits until the window has turned over completely once
    /// after first filling. Earlier windows straddle the initial convergence
    /// transient; an estimate subtracted from them can collapse the gain and
    /// park the filter on its initial velocity error.
    pub fn working_r(&self) -> DMatrix<f64> {
        if self.variant.estimates_r()
            && !self.cfg.fixed_unit_factors
            && self.epoch >= 2 * self.cfg.window
        {
            if let Some(r) = &self.adaptive.r_held {
                return r.clone();
            }
        }
        self.nominal.r.clone()
    }

    /// Runs one predict-update epoch against a measurement.
    ///
    /// Factors are held at exactly 1 until the innovation window has filled,
    /// and always when `fixed_unit_factors` is set; multiplication by that
    /// exact 1.0 leaves every intermediate bit-identical to the plain filter.
    pub fn step(
        &mut self,
        model: &SystemModel,
        z: &DVector<f64>,
    ) -> Result<EpochTelemetry, FilterError> {
        if model.n != self.estimate.dim() || z.len() != model.m {
            return Err(FilterError::DimensionMismatch {
                context: "AdaptiveCkf::step: model or measurement shape",
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(FilterError::NonFinite {
                context: "AdaptiveCkf::step: measurement",
            });
        }
        let adapting = !self.cfg.fixed_unit_factors;
        let window_ready = self.innovations.is_full();
        let r_working = self.working_r();
        let q = &self.nominal.q;

        let prop = propagate(&self.estimate, &model.f, &self.rule)?;

        // Unfaded measurement prediction: the yardstick for the first
        // factor, and the spread the noise estimate subtracts, so neither
        // inherits whatever fading was applied before.
        let mp0 = if self.variant.fades() && adapting {
            let unfaded = StateEstimate::new(prop.mean.clone(), &prop.spread + q)?;
            unfaded.check_psd_floor()?;
            Some(predict_measurement(&unfaded, &model.h, &self.rule)?)
        } else {
            None
        };

        // First factor: compare the windowed innovation covariance against
        // what the unfaded prediction would imply. The noise-estimating
        // variant measures against the noise it actually substitutes; while
        // the energy test is quiet that estimate refreshes from the same
        // window, the explained energy cancels out of the trace test, and
        // the factor stays at one. Only in the frozen regime, while the
        // flagged window still mixes pre- and post-shift samples, does the
        // excess stop cancelling and the factor fire; scaling the baseline by
        // the previous second factor first leaves it only the excess the
        // noise channel has not already claimed. Once every sample postdates
        // the shift the excess is the noise channel's alone: a fade there
        // would feed its own inflation back into the next epoch's yardstick.
        let frozen = (1..self.cfg.window).contains(&self.adaptive.flagged_run);
        let mut a1 = 1.0;
        let mut tr_c_hat = f64::NAN;
        let mut tr_pzz = f64::NAN;
        if let Some(mp0) = mp0.as_ref().filter(|_| window_ready) {
            let c_hat = self
                .innovations
                .covariance(self.variant.centered_window())?;
            let r_base = if self.variant.estimates_r() {
                let held = self.adaptive.r_held.as_ref().unwrap_or(&r_working);
                held * self.adaptive.a2
            } else {
                r_working.clone()
            };
            let mut pzz0 = &mp0.spread + &r_base;
            symmetrize(&mut pzz0);
            tr_c_hat = c_hat.trace();
            tr_pzz = pzz0.trace();
            if frozen || !self.variant.estimates_r() {
                a1 = compute_a1(&c_hat, &pzz0, &r_base, self.cfg.a_max);
            }
        }

        let p_minus = match self.variant {
            FilterVariant::Ckf | FilterVariant::Ackf => &prop.spread + q,
            FilterVariant::AfckfSingle => (&prop.spread + q) * a1,
            FilterVariant::AfckfP | FilterVariant::AfckfR => apply_p_adaption(&prop.spread, q, a1),
        };
        let pred = StateEstimate::new(prop.mean.clone(), p_minus)?;
        pred.check_psd_floor()?;

        let mp = predict_measurement(&pred, &model.h, &self.rule)?;

        // Second factor: observed innovation energy against the faded
        // prediction with the nominal noise.
        let mut a2 = 1.0;
        if self.variant.uses_a2() && adapting && window_ready {
            let c_hat = self.innovations.covariance(false)?;
            let c_theory = &mp.spread + &self.nominal.r;
            a2 = compute_a2(&c_hat, &c_theory, self.cfg.a_max);
        }

        let r_scaled = apply_r_adaption(&r_working, a2);
        let p_zz = innovation_covariance(&mp.meas_points, &mp.mean, &r_scaled, &self.rule)?;
        let p_xz = cross_covariance(
            &mp.state_points,
            &pred.mean,
            &mp.meas_points,
            &mp.mean,
            &self.rule,
        )?;

        // Pre-wrap the measurement so the plain difference inside the update
        // is the wrapped innovation.
        let z_adj = &mp.mean + model.wrapped_diff(z, &mp.mean);
        let (post, innovation) = measurement_update(&pred, &p_zz, &p_xz, &z_adj, &mp.mean)?;

        let h_post = (model.h)(&post.mean)?;
        let eta = model.wrap_components(residual(z, &h_post));

        // Refresh the noise estimate from the window as it will stand after
        // this epoch. Computed before any mutation so a failure leaves the
        // filter untouched. A window still mixing pre- and post-shift
        // samples never reaches the filter; see `AdaptiveState::r_held` for
        // the accept, hold, and concede regimes.
        let mut r_star = self.adaptive.r_star.clone();
        let mut r_star_floored = self.adaptive.r_star_floored;
        let mut r_held = self.adaptive.r_held.clone();
        let mut r_anchor = self.adaptive.r_anchor.clone();
        let mut flagged_run = self.adaptive.flagged_run;
        if self.variant.estimates_r() && adapting {
            // While the frozen fade is firing, a quiet energy test is the
            // fade's own doing (the faded prediction absorbs the excess),
            // not evidence of recovery; the run keeps counting so a
            // sustained shift outlasts the window and stands the fade down
            // instead of rearming it every other epoch.
            flagged_run = if a2 > FLAG_THRESHOLD || (frozen && a1 > 1.0) {
                flagged_run + 1
            } else {
                0
            };
            if flagged_run == 1 {
                // The flag just rose; pin the level every channel last
                // agreed was clean as the episode's concession anchor.
                r_anchor = Some(r_held.clone().unwrap_or_else(|| self.nominal.r.clone()));
            }
            let mut w = self.innovations.clone();
            w.push(innovation.clone());
            if w.is_full() {
                let spread = mp0.as_ref().map_or(&mp.spread, |m| &m.spread);
                let (r, fl) = estimate_r_star(&w, spread, self.cfg.eps_r)?;
                if flagged_run == 0 {
                    // Clean epoch: accept the window, never above the
                    // nominal model. The plain noise estimator carries no
                    // second factor, never flags, and so lands here every
                    // window.
                    let capped = capped_at_nominal(&r, &self.nominal.r);
                    r_held = if self.variant == FilterVariant::AfckfR {
                        // The double-factor variant also walks its
                        // substitution at a bounded per-epoch rate.
                        let prev = self.adaptive.r_held.as_ref().unwrap_or(&self.nominal.r);
                        Some(rate_limited(prev, &capped))
                    } else {
                        Some(capped)
                    };
                } else if flagged_run >= self.cfg.window {
                    // The flag has persisted for a full window, so every
                    // sample postdates the shift and the hold concedes.
                    // Each channel concedes at most `a_max` above its
                    // anchor, the same ceiling the factors honor, and never
                    // above nominal: window energy is measured in the
                    // largest channel's units, so an unbounded concession
                    // would let a small-unit channel absorb the filter's
                    // own fade-era error as if it were noise.
                    let anchor = r_anchor.clone().unwrap_or_else(|| self.nominal.r.clone());
                    let bounded = clamp_diagonals(&r, |_| 0.0, |i| {
                        (self.cfg.a_max * anchor[(i, i)]).min(self.nominal.r[(i, i)])
                    });
                    let prev = self.adaptive.r_held.as_ref().unwrap_or(&self.nominal.r);
                    r_held = Some(rate_limited(prev, &bounded));
                }
                r_star = Some(r);
                r_star_floored = fl;
            }
        }

        // Process-noise diagnostic; failures here only clear the output.
        let mut q_star = None;
        if self.cfg.estimate_q {
            let mut dw = self.diffs.clone();
            dw.push(&innovation - &eta);
            if dw.is_full() {
                match self.q_star_inputs(model, &prop, &post, &dw) {
                    Ok(est) => q_star = Some(est),
                    Err(e) => log::debug!("process-noise diagnostic skipped: {e}"),
                }
            }
        }

        // Everything fallible has succeeded; commit.
        let epoch = self.epoch;
        self.estimate = post;
        self.diffs.push(&innovation - &eta);
        self.innovations.push(innovation);
        self.residuals.push(eta);
        self.adaptive.a1 = a1;
        self.adaptive.a2 = a2;
        self.adaptive.r_star = r_star;
        self.adaptive.r_star_floored = r_star_floored;
        self.adaptive.r_held = r_held;
        self.adaptive.r_anchor = r_anchor;
        self.adaptive.flagged_run = flagged_run;
        self.adaptive.q_star = q_star;
        self.epoch += 1;

        Ok(EpochTelemetry {
            epoch,
            a1,
            a2,
            tr_c_hat,
            tr_pzz,
            floored: self.adaptive.r_star_floored,
            variant: self.variant,
        })
    }

    fn q_star_inputs(
        &self,
        model: &SystemModel,
        prop: &crate::cubature::Propagated,
        post: &StateEstimate,
        diffs: &SlidingWindow,
    ) -> Result<QStarEstimate, FilterError> {
        let no_q = StateEstimate::new(prop.mean.clone(), prop.spread.clone())?;
        let mp_no_q = predict_measurement(&no_q, &model.h, &self.rule)?;
        let mp_post = predict_measurement(post, &model.h, &self.rule)?;
        let jac = fd_jacobian(&model.h, &post.mean, model.m)?;
        estimate_q_star(diffs, &mp_no_q.spread, &mp_post.spread, Some(&jac))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{wrap_angle, SystemModel};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn approx_eq(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn vec1(x: f64) -> DVector<f64> {
        DVector::from_vec(vec![x])
    }

    #[test]
    fn variant_names_round_trip() {
        for v in FilterVariant::all() {
            assert_eq!(v.name().parse::<FilterVariant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
            assert_eq!(serde_json::from_str::<FilterVariant>(&json).unwrap(), v);
        }
        assert!("ckf".parse::<FilterVariant>().is_err());
    }

    #[test]
    fn window_evicts_oldest() {
        let mut w = SlidingWindow::new(2);
        assert!(w.is_empty());
        w.push(vec1(1.0));
        assert!(!w.is_full());
        w.push(vec1(2.0));
        assert!(w.is_full());
        w.push(vec1(3.0));
        assert_eq!(w.len(), 2);
        let vals: Vec<f64> = w.iter().map(|v| v[0]).collect();
        assert_eq!(vals, vec![2.0, 3.0]);
    }

    #[test]
    fn window_covariance_hand_values() {
        let mut w = SlidingWindow::new(3);
        w.push(vec1(1.0));
        w.push(vec1(-1.0));
        // Uncentered: (1 + 1) / 2.
        assert_eq!(w.covariance(false).unwrap()[(0, 0)], 1.0);
        // Centered of a constant window is zero.
        let mut c = SlidingWindow::new(3);
        c.push(vec1(2.0));
        c.push(vec1(2.0));
        c.push(vec1(2.0));
        assert_eq!(c.covariance(true).unwrap()[(0, 0)], 0.0);
        assert_eq!(c.covariance(false).unwrap()[(0, 0)], 4.0);
    }

    #[test]
    fn window_covariance_needs_enough_samples() {
        let w = SlidingWindow::new(4);
        assert_eq!(
            w.covariance(false),
            Err(FilterError::WindowTooShort { need: 1, got: 0 })
        );
        let mut one = SlidingWindow::new(4);
        one.push(vec1(1.0));
        assert_eq!(
            one.covariance(true),
            Err(FilterError::WindowTooShort { need: 2, got: 1 })
        );
    }

    fn m1(x: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 1, &[x])
    }

    #[test]
    fn residual_is_plain_subtraction() {
        assert_eq!(residual(&vec1(5.0), &vec1(3.0)), vec1(2.0));
        assert_eq!(residual(&vec1(3.0), &vec1(3.0)), vec1(0.0));
        let z = DVector::from_vec(vec![1.0, 2.0]);
        let h = DVector::from_vec(vec![0.0, 2.0]);
        assert_eq!(residual(&z, &h), DVector::from_vec(vec![1.0, 0.0]));
    }

    #[test]
    fn a1_hand_values() {
        // Observed below prediction: no fading.
        assert_eq!(compute_a1(&m1(2.0), &m1(3.0), &m1(0.5), 25.0), 1.0);
        // (4 - 1) / (2 - 1) = 3.
        assert_eq!(compute_a1(&m1(4.0), &m1(2.0), &m1(1.0), 25.0), 3.0);
        // Boundary: observed equals theoretical.
        assert_eq!(compute_a1(&m1(2.0), &m1(2.0), &m1(1.0), 25.0), 1.0);
        // Clamped at a_max.
        assert_eq!(compute_a1(&m1(1000.0), &m1(2.0), &m1(1.0), 25.0), 25.0);
        // Degenerate denominator: noise trace equals prediction trace.
        assert_eq!(compute_a1(&m1(4.0), &m1(2.0), &m1(2.0), 25.0), 1.0);
        assert_eq!(compute_a1(&m1(f64::NAN), &m1(2.0), &m1(1.0), 25.0), 1.0);
    }

    #[test]
    fn a2_hand_values() {
        assert_eq!(compute_a2(&m1(6.0), &m1(3.0), 25.0), 2.0);
        assert_eq!(compute_a2(&m1(1.0), &m1(3.0), 25.0), 1.0);
        assert_eq!(compute_a2(&m1(3.0), &m1(3.0), 25.0), 1.0);
        assert_eq!(compute_a2(&m1(100.0), &m1(1.0), 25.0), 25.0);
        assert_eq!(compute_a2(&m1(1.0), &m1(0.0), 25.0), 1.0);
        assert_eq!(compute_a2(&m1(1.0), &m1(f64::INFINITY), 25.0), 1.0);
    }

    #[test]
    fn p_adaption_hand_values() {
        let spread = DMatrix::identity(2, 2);
        let q = DMatrix::zeros(2, 2);
        assert_eq!(
            apply_p_adaption(&spread, &q, 2.0),
            DMatrix::identity(2, 2) * 2.0
        );
        assert_eq!(apply_p_adaption(&m1(1.0), &m1(0.5), 3.0), m1(3.5));
        // Unit factor recovers the plain time update.
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.7]);
        let q2 = DMatrix::from_partial_diagonal(2, 2, &[0.1, 0.1]);
        assert_eq!(apply_p_adaption(&s, &q2, 1.0), &s + &q2);
    }

    #[test]
    fn r_adaption_hand_values() {
        assert_eq!(apply_r_adaption(&m1(4.0), 1.5), m1(6.0));
        let r = DMatrix::from_partial_diagonal(2, 2, &[100.0, 3e-4]);
        assert_eq!(
            apply_r_adaption(&r, 2.0),
            DMatrix::from_partial_diagonal(2, 2, &[200.0, 6e-4])
        );
        assert_eq!(apply_r_adaption(&r, 1.0), r);
    }

    #[test]
    fn r_star_hand_values() {
        let mut w = SlidingWindow::new(2);
        w.push(vec1(2.0));
        w.push(vec1(-2.0));
        // Uncentered window covariance 4, spread 1: estimate 3, no floor.
        let spread = DMatrix::from_row_slice(1, 1, &[1.0]);
        let (r, floored) = estimate_r_star(&w, &spread, 1e-8).unwrap();
        assert_eq!(r[(0, 0)], 3.0);
        assert!(!floored);
    }

    #[test]
    fn r_star_floors_negative_estimate() {
        let mut w = SlidingWindow::new(2);
        w.push(vec1(0.0));
        w.push(vec1(0.0));
        // Raw estimate -1; floor is eps_r * max(1, 1) / 1.
        let spread = DMatrix::from_row_slice(1, 1, &[1.0]);
        let (r, floored) = estimate_r_star(&w, &spread, 1e-8).unwrap();
        assert!(floored);
        assert!(approx_eq(r[(0, 0)], 1e-8, 1e-20));
    }

    #[test]
    fn window_covariance_tracks_known_variance_statistically() {
        // 50 draws from N(0, 4): the uncentered estimate has standard error
        // sqrt(2) * 4 / sqrt(50); stay within three of those.
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, 2.0).unwrap();
        let bound = 3.0 * (2.0f64.sqrt() * 4.0 / 50.0f64.sqrt());
        for seed in 0..8 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut w = SlidingWindow::new(50);
            for _ in 0..50 {
                w.push(vec1(normal.sample(&mut rng)));
            }
            let c = w.covariance(false).unwrap();
            assert!(
                (c[(0, 0)] - 4.0).abs() <= bound,
                "seed {seed}: {} vs 4 +- {bound}",
                c[(0, 0)]
            );
        }
    }

    #[test]
    fn q_star_cancels_for_converged_filter() {
        // All window differences zero and matching spreads: every term
        // cancels exactly.
        let mut d = SlidingWindow::new(2);
        d.push(vec1(0.0));
        d.push(vec1(0.0));
        let est = estimate_q_star(&d, &m1(1.0), &m1(1.0), Some(&m1(1.0))).unwrap();
        assert_eq!(est.hqh, m1(0.0));
        assert_eq!(est.q.unwrap(), m1(0.0));
    }

    #[test]
    fn q_star_hand_values() {
        let mut d = SlidingWindow::new(2);
        d.push(vec1(2.0));
        d.push(vec1(2.0));
        let h_spread = DMatrix::from_row_slice(1, 1, &[1.0]);
        let hph_post = DMatrix::from_row_slice(1, 1, &[0.5]);
        let jac = DMatrix::from_row_slice(1, 1, &[1.0]);
        let est = estimate_q_star(&d, &h_spread, &hph_post, Some(&jac)).unwrap();
        assert!(approx_eq(est.hqh[(0, 0)], 3.5, 1e-12));
        assert!(approx_eq(est.q.unwrap()[(0, 0)], 3.5, 1e-9));
        assert!(!est.rank_deficient);

        // Fewer measurements than states: recovery flagged as minimum-norm.
        let wide = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let est2 = estimate_q_star(&d, &h_spread, &hph_post, Some(&wide)).unwrap();
        assert!(est2.rank_deficient);
    }

    #[test]
    fn q_diagnostic_tracks_true_process_noise_on_linear_run() {
        // Scalar linear-Gaussian oracle: with matched noise the long-run
        // average of the measurement-space process-noise estimate must sit
        // near the true Q. The estimator is high-variance, hence the wide
        // band.
        use rand_distr::{Distribution, Normal};
        let model = SystemModel::new(
            1,
            1,
            1.0,
            Box::new(|x: &DVector<f64>| x * 0.95),
            Box::new(|x: &DVector<f64>| Ok(x.clone())),
            vec![false],
        )
        .unwrap();
        let q_true: f64 = 0.2;
        let r_true: f64 = 1.0;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let wq = Normal::new(0.0, q_true.sqrt()).unwrap();
        let wr = Normal::new(0.0, r_true.sqrt()).unwrap();
        let cfg = FadingConfig {
            estimate_q: true,
            ..FadingConfig::default()
        };
        let init = StateEstimate::new(vec1(0.0), m1(1.0)).unwrap();
        let noise = NoiseCovariances {
            q: m1(q_true),
            r: m1(r_true),
        };
        let mut filt = AdaptiveCkf::new(FilterVariant::Ckf, init, noise, cfg).unwrap();
        let mut x = 0.0f64;
        let mut sum = 0.0;
        let mut count = 0usize;
        for k in 0..20_000 {
            x = 0.95 * x + wq.sample(&mut rng);
            let z = vec1(x + wr.sample(&mut rng));
            filt.step(&model, &z).unwrap();
            if k >= 10_000 {
                sum += filt.adaptive().q_star.as_ref().unwrap().hqh[(0, 0)];
                count += 1;
            }
        }
        let avg = sum / count as f64;
        assert!(
            (avg - q_true).abs() <= 0.5 * q_true,
            "long-run estimate {avg} vs true {q_true}"
        );
    }

    #[test]
    fn fd_jacobian_matches_linear_map() {
        let h_mat = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, 0.5, -1.0, 4.0]);
        let hm = h_mat.clone();
        let h = move |x: &DVector<f64>| -> Result<DVector<f64>, FilterError> { Ok(&hm * x) };
        let x = DVector::from_vec(vec![3.0, -2.0, 7.0]);
        let jac = fd_jacobian(&h, &x, 2).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!(approx_eq(jac[(i, j)], h_mat[(i, j)], 1e-7));
            }
        }
    }

    /// Deterministic range-bearing measurement stream for step-level tests.
    fn synthetic_run(seed: u64, steps: usize) -> (SystemModel, Vec<DVector<f64>>) {
        let model = SystemModel::range_bearing_cv(0.1);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut x = DVector::from_vec(vec![100.0, 10.0, 100.0, 5.0]);
        let mut zs = Vec::with_capacity(steps);
        for _ in 0..steps {
            x = (model.f)(&x);
            let z0 = (model.h)(&x).unwrap();
            zs.push(DVector::from_vec(vec![
                z0[0] + rng.random_range(-3.0..3.0),
                wrap_angle(z0[1] + rng.random_range(-0.02..0.02)),
            ]));
        }
        (model, zs)
    }

    fn bench_noise() -> NoiseCovariances {
        let mut q = DMatrix::zeros(4, 4);
        q[(1, 1)] = 0.2;
        q[(3, 3)] = 0.2;
        NoiseCovariances {
            q,
            r: DMatrix::from_partial_diagonal(2, 2, &[100.0, 3e-4]),
        }
    }

    fn bench_init() -> StateEstimate {
        StateEstimate::new(
            DVector::from_vec(vec![95.0, 9.0, 105.0, 4.0]),
            DMatrix::from_partial_diagonal(4, 4, &[100.0, 1.0, 100.0, 1.0]),
        )
        .unwrap()
    }

    #[test]
    fn factors_hold_at_one_until_window_fills() {
        let (model, zs) = synthetic_run(7, 12);
        let cfg = FadingConfig {
            window: 5,
            ..FadingConfig::default()
        };
        let mut filt =
            AdaptiveCkf::new(FilterVariant::AfckfR, bench_init(), bench_noise(), cfg).unwrap();
        for (k, z) in zs.iter().enumerate() {
            let before_full = filt.innovations.is_full();
            let t = filt.step(&model, z).unwrap();
            if k < 5 {
                assert_eq!(t.a1, 1.0, "epoch {k}");
                assert_eq!(t.a2, 1.0, "epoch {k}");
                assert!(t.tr_c_hat.is_nan());
            }
            if k < 4 {
                assert!(filt.adaptive().r_star.is_none(), "epoch {k}");
            } else {
                assert!(filt.adaptive().r_star.is_some(), "epoch {k}");
            }
            if k >= 5 {
                assert!(before_full);
                assert!(t.tr_c_hat.is_finite());
                assert!(t.tr_pzz.is_finite());
            }
        }
    }

    #[test]
    fn unit_factor_switch_reproduces_plain_filter_bitwise() {
        let (model, zs) = synthetic_run(21, 40);
        for variant in [
            FilterVariant::Ackf,
            FilterVariant::AfckfSingle,
            FilterVariant::AfckfP,
            FilterVariant::AfckfR,
        ] {
            let mut plain = AdaptiveCkf::new(
                FilterVariant::Ckf,
                bench_init(),
                bench_noise(),
                FadingConfig::default(),
            )
            .unwrap();
            let cfg = FadingConfig {
                fixed_unit_factors: true,
                ..FadingConfig::default()
            };
            let mut pinned =
                AdaptiveCkf::new(variant, bench_init(), bench_noise(), cfg).unwrap();
            for z in &zs {
                plain.step(&model, z).unwrap();
                let t = pinned.step(&model, z).unwrap();
                assert_eq!(t.a1, 1.0);
                assert_eq!(t.a2, 1.0);
                assert_eq!(
                    plain.estimate().mean,
                    pinned.estimate().mean,
                    "{variant} mean diverged"
                );
                assert_eq!(
                    plain.estimate().cov,
                    pinned.estimate().cov,
                    "{variant} covariance diverged"
                );
            }
            assert!(pinned.adaptive().r_star.is_none());
        }
    }

    #[test]
    fn ackf_substitutes_estimated_noise() {
        let (model, zs) = synthetic_run(3, 20);
        let cfg = FadingConfig {
            window: 6,
            ..FadingConfig::default()
        };
        let mut filt =
            AdaptiveCkf::new(FilterVariant::Ackf, bench_init(), bench_noise(), cfg).unwrap();
        for z in &zs {
            filt.step(&model, z).unwrap();
        }
        let r_star = filt.adaptive().r_star.clone().unwrap();
        assert_eq!(filt.working_r(), r_star);
        // Plain filter ignores the window entirely.
        let mut plain = AdaptiveCkf::new(
            FilterVariant::Ckf,
            bench_init(),
            bench_noise(),
            FadingConfig::default(),
        )
        .unwrap();
        for z in &zs {
            plain.step(&model, z).unwrap();
        }
        assert_eq!(plain.working_r(), bench_noise().r);
        assert!(plain.adaptive().r_star.is_none());
    }

    #[test]
    fn reestimated_noise_keeps_the_first_factor_quiet() {
        // The noise-estimating variant measures its first factor against the
        // estimate drawn from the same window, so energy the window shows is
        // already accounted for and the factor stays near 1 even though the
        // synthetic noise is nowhere near the nominal covariance.
        let (model, zs) = synthetic_run(17, 80);
        let cfg = FadingConfig {
            window: 8,
            ..FadingConfig::default()
        };
        let mut filt =
            AdaptiveCkf::new(FilterVariant::AfckfR, bench_init(), bench_noise(), cfg).unwrap();
        for (k, z) in zs.iter().enumerate() {
            let t = filt.step(&model, z).unwrap();
            if k >= 16 {
                assert!(t.a1 <= 1.3, "epoch {k}: a1 {}", t.a1);
            }
        }
    }

    #[test]
    fn detected_mismatch_freezes_the_noise_substitution() {
        // Warm the filter on noise consistent with its window, then inflate
        // the measurement noise far beyond it. The detection factor must
        // rise while the substituted noise holds its pre-fault value; the
        // fresh estimate keeps tracking the inflated window.
        let model = SystemModel::range_bearing_cv(0.1);
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let mut x = DVector::from_vec(vec![100.0, 10.0, 100.0, 5.0]);
        let cfg = FadingConfig {
            window: 8,
            ..FadingConfig::default()
        };
        let mut filt =
            AdaptiveCkf::new(FilterVariant::AfckfR, bench_init(), bench_noise(), cfg).unwrap();
        let mut advance = |filt: &mut AdaptiveCkf,
                           x: &mut DVector<f64>,
                           rng: &mut ChaCha12Rng,
                           dr: f64,
                           db: f64| {
            *x = (model.f)(x);
            let z0 = (model.h)(x).unwrap();
            let z = DVector::from_vec(vec![
                z0[0] + rng.random_range(-dr..dr),
                wrap_angle(z0[1] + rng.random_range(-db..db)),
            ]);
            filt.step(&model, &z).unwrap()
        };
        for _ in 0..30 {
            advance(&mut filt, &mut x, &mut rng, 10.0, 0.02);
        }
        let mut saw_detection = false;
        let mut a1_fired = false;
        for _ in 0..7 {
            let before = filt.working_r();
            let t = advance(&mut filt, &mut x, &mut rng, 80.0, 0.3);
            if t.a2 > 1.2 {
                saw_detection = true;
                assert_eq!(
                    filt.working_r(),
                    before,
                    "substitution moved during a flagged epoch"
                );
                if t.a1 > 1.0 {
                    a1_fired = true;
                }
            }
        }
        assert!(saw_detection, "inflated noise never flagged");
        assert!(a1_fired, "first factor stayed idle against the held level");
        let held = filt.working_r();
        let fresh = filt.adaptive().r_star.clone().unwrap();
        assert!(
            fresh.trace() > 2.0 * held.trace(),
            "fresh estimate did not track the burst: {} vs {}",
            fresh.trace(),
            held.trace()
        );
        // However long the shift persists, the substituted level never rises
        // above the nominal model; the excess stays with the factors, since
        // window energy alone cannot tell a noise shift from filter lag.
        let nominal = bench_noise().r.trace();
        for _ in 0..40 {
            advance(&mut filt, &mut x, &mut rng, 80.0, 0.3);
            assert!(
                filt.working_r().trace() <= nominal * 1.0001,
                "substitution absorbed the mismatch: {} vs nominal {}",
                filt.working_r().trace(),
                nominal
            );
        }
    }

    #[test]
    fn inflated_innovations_raise_the_factors() {
        // Feed measurements with noise far beyond the nominal covariance so
        // the windowed innovation energy exceeds the prediction.
        let model = SystemModel::range_bearing_cv(0.1);
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let mut x = DVector::from_vec(vec![100.0, 10.0, 100.0, 5.0]);
        let cfg = FadingConfig {
            window: 8,
            ..FadingConfig::default()
        };
        let mut single = AdaptiveCkf::new(
            FilterVariant::AfckfSingle,
            bench_init(),
            bench_noise(),
            cfg.clone(),
        )
        .unwrap();
        let mut with_a2 =
            AdaptiveCkf::new(FilterVariant::AfckfR, bench_init(), bench_noise(), cfg).unwrap();
        let mut saw_a1 = false;
        let mut saw_a2 = false;
        for _ in 0..60 {
            x = (model.f)(&x);
            let z0 = (model.h)(&x).unwrap();
            let z = DVector::from_vec(vec![
                z0[0] + rng.random_range(-60.0..60.0),
                wrap_angle(z0[1] + rng.random_range(-0.3..0.3)),
            ]);
            let t1 = single.step(&model, &z).unwrap();
            let t2 = with_a2.step(&model, &z).unwrap();
            saw_a1 |= t1.a1 > 1.5;
            saw_a2 |= t2.a2 > 1.5;
            assert!(t1.a1 >= 1.0 && t1.a1 <= 4.0);
            assert!(t2.a2 >= 1.0 && t2.a2 <= 4.0);
        }
        assert!(saw_a1, "single-factor variant never engaged");
        assert!(saw_a2, "noise-scaling factor never engaged");
    }

    #[test]
    fn failed_step_leaves_filter_untouched() {
        let model = SystemModel::range_bearing_cv(0.1);
        // Start exactly at the sensor origin so the measurement map fails.
        let init = StateEstimate::new(
            DVector::zeros(4),
            DMatrix::from_partial_diagonal(4, 4, &[1e-24, 1e-24, 1e-24, 1e-24]),
        )
        .unwrap();
        let mut filt = AdaptiveCkf::new(
            FilterVariant::AfckfR,
            init.clone(),
            bench_noise(),
            FadingConfig::default(),
        )
        .unwrap();
        let z = DVector::from_vec(vec![1.0, 0.0]);
        let err = filt.step(&model, &z).unwrap_err();
        assert!(matches!(err, FilterError::AtOrigin { .. }));
        assert_eq!(filt.estimate(), &init);
        assert_eq!(filt.epoch(), 0);
        assert!(filt.innovations.is_empty());
    }

    #[test]
    fn larger_noise_scale_shrinks_the_gain() {
        // On a fixed prediction, scaling the measurement noise up must shrink
        // the gain and leave a larger posterior covariance.
        let pred = StateEstimate::new(
            DVector::zeros(1),
            DMatrix::from_row_slice(1, 1, &[4.0]),
        )
        .unwrap();
        let rule = CubatureRule::new(1).unwrap();
        let h = |x: &DVector<f64>| -> Result<DVector<f64>, FilterError> { Ok(x.clone()) };
        let mp = predict_measurement(&pred, &h, &rule).unwrap();
        let p_xz = cross_covariance(
            &mp.state_points,
            &pred.mean,
            &mp.meas_points,
            &mp.mean,
            &rule,
        )
        .unwrap();
        let r = DMatrix::from_row_slice(1, 1, &[2.0]);
        let z = vec1(1.0);
        let mut last_cov = 0.0;
        for a2 in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let p_zz = innovation_covariance(&mp.meas_points, &mp.mean, &(&r * a2), &rule).unwrap();
            let (post, _) = measurement_update(&pred, &p_zz, &p_xz, &z, &mp.mean).unwrap();
            assert!(post.cov[(0, 0)] > last_cov, "a2 {a2}");
            last_cov = post.cov[(0, 0)];
        }
        assert!(last_cov < 4.0);
    }

    #[test]
    fn q_diagnostic_is_produced_but_not_fed_back() {
        let (model, zs) = synthetic_run(9, 30);
        let cfg = FadingConfig {
            window: 6,
            estimate_q: true,
            ..FadingConfig::default()
        };
        let mut with_q =
            AdaptiveCkf::new(FilterVariant::AfckfP, bench_init(), bench_noise(), cfg).unwrap();
        let cfg_off = FadingConfig {
            window: 6,
            estimate_q: false,
            ..FadingConfig::default()
        };
        let mut without_q =
            AdaptiveCkf::new(FilterVariant::AfckfP, bench_init(), bench_noise(), cfg_off)
                .unwrap();
        for z in &zs {
            with_q.step(&model, z).unwrap();
            without_q.step(&model, z).unwrap();
            assert_eq!(with_q.estimate().mean, without_q.estimate().mean);
            assert_eq!(with_q.estimate().cov, without_q.estimate().cov);
        }
        let q_est = with_q.adaptive().q_star.clone().unwrap();
        assert_eq!(q_est.hqh.nrows(), 2);
        assert!(q_est.rank_deficient);
        let q = q_est.q.unwrap();
        assert_eq!(q.nrows(), 4);
        assert!(without_q.adaptive().q_star.is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn prop_a1_stays_in_bounds(
            tr_c in -1e6f64..1e6,
            tr_pzz in 1e-6f64..1e6,
            tr_r_frac in 0.0f64..1.0,
            a_max in 1.0f64..100.0,
        ) {
            let tr_r = tr_pzz * tr_r_frac;
            let a1 = compute_a1(&m1(tr_c), &m1(tr_pzz), &m1(tr_r), a_max);
            prop_assert!((1.0..=a_max).contains(&a1));
        }

        #[test]
        fn prop_a2_stays_in_bounds(
            tr_c in -1e6f64..1e6,
            tr_theory in -1e3f64..1e6,
            a_max in 1.0f64..100.0,
        ) {
            let a2 = compute_a2(&m1(tr_c), &m1(tr_theory), a_max);
            prop_assert!((1.0..=a_max).contains(&a2));
        }

        #[test]
        fn prop_window_covariance_matches_bruteforce(
            samples in proptest::collection::vec(
                proptest::collection::vec(-100.0f64..100.0, 3), 1..12),
            centered in proptest::bool::ANY,
        ) {
            let n = samples.len();
            prop_assume!(!centered || n >= 2);
            let mut w = SlidingWindow::new(n);
            for s in &samples {
                w.push(DVector::from_vec(s.clone()));
            }
            let got = w.covariance(centered).unwrap();

            // Brute force with scalar loops, no linear algebra library.
            let dim = 3;
            let mut mean = vec![0.0; dim];
            if centered {
                for s in &samples {
                    for (m, v) in mean.iter_mut().zip(s) {
                        *m += v / n as f64;
                    }
                }
            }
            let denom = if centered { (n - 1) as f64 } else { n as f64 };
            for i in 0..dim {
                for j in 0..dim {
                    let mut acc = 0.0;
                    for s in &samples {
                        acc += (s[i] - mean[i]) * (s[j] - mean[j]);
                    }
                    let want = acc / denom;
                    let tol = 1e-9 * want.abs().max(1.0);
                    prop_assert!(
                        (got[(i, j)] - want).abs() <= tol,
                        "({}, {}): {} vs {}", i, j, got[(i, j)], want
                    );
                }
            }
        }

        #[test]
        fn prop_r_star_never_returns_indefinite_when_floored(
            diag in proptest::collection::vec(0.0f64..10.0, 2),
            spread_scale in 0.1f64..100.0,
        ) {
            let mut w = SlidingWindow::new(2);
            w.push(DVector::from_vec(vec![diag[0], 0.0]));
            w.push(DVector::from_vec(vec![0.0, diag[1]]));
            let spread = DMatrix::from_partial_diagonal(2, 2, &[spread_scale, spread_scale]);
            let (r, floored) = estimate_r_star(&w, &spread, 1e-8).unwrap();
            if floored {
                let min_eig = crate::cubature::min_symmetric_eigenvalue(&r);
                prop_assert!(min_eig >= 0.0, "min eigenvalue {min_eig}");
            }
        }
    }
}
