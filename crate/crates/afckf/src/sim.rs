//! Truth simulation, single-run filter execution, and Monte Carlo
//! aggregation into RMSE and telemetry reports.
//!
//! Determinism contract: a report is a pure function of the configuration.
//! Each run draws from its own counter-derived stream of the master seed, so
//! runs are independent of scheduling and of each other, and adding runs
//! never perturbs earlier runs' draws. Aggregation walks pre-sized per-run
//! slots in index order, so parallel execution yields bit-identical reports.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::adaptive::{AdaptiveCkf, EpochTelemetry, FadingConfig, FilterVariant};
use crate::config::RunConfig;
use crate::cubature::{NoiseCovariances, StateEstimate};
use crate::error::FilterError;
use crate::models::{CaseId, NoiseCase, SystemModel};

/// State indices entering the position RMSE.
pub const POSITION_COMPONENTS: [usize; 2] = [0, 2];
/// State indices entering the velocity RMSE.
pub const VELOCITY_COMPONENTS: [usize; 2] = [1, 3];

/// One simulated trajectory with its measurements and the (noisy) initial
/// estimate every variant starts from.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthData {
    /// True state at each epoch.
    pub states: Vec<DVector<f64>>,
    /// Measurement at each epoch, angular components wrapped.
    pub measurements: Vec<DVector<f64>>,
    /// Initial belief: mean drawn around the true initial state with the
    /// configured covariance.
    pub init_estimate: StateEstimate,
}

/// Simulates one run's truth and measurements.
///
/// Draw order is fixed: four initial-estimate draws, then per epoch four
/// process-noise draws followed by two measurement-noise draws. Zero noise
/// intensities still consume their draws, so changing an intensity never
/// shifts the remaining stream.
pub fn generate_truth(
    cfg: &RunConfig,
    case: &NoiseCase,
    run_index: u64,
) -> Result<TruthData, FilterError> {
    let model = SystemModel::range_bearing_cv(cfg.model.ts);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng.set_stream(run_index);

    let truth0 = cfg.init_truth();
    let p0 = cfg.init_cov();
    let mut mean0 = truth0.clone();
    for i in 0..mean0.len() {
        let draw: f64 = StandardNormal.sample(&mut rng);
        mean0[i] += p0[(i, i)].sqrt() * draw;
    }
    let init_estimate = StateEstimate::new(mean0, p0)?;

    let q_std: Vec<f64> = case.q_true.diagonal().iter().map(|v| v.sqrt()).collect();
    let mut states = Vec::with_capacity(cfg.steps);
    let mut measurements = Vec::with_capacity(cfg.steps);
    let mut x = truth0;
    for k in 0..cfg.steps {
        x = (model.f)(&x);
        for (i, std) in q_std.iter().enumerate() {
            let draw: f64 = StandardNormal.sample(&mut rng);
            x[i] += std * draw;
        }
        let r_k = case.r_at(k);
        let mut z = (model.h)(&x)?;
        for i in 0..z.len() {
            let draw: f64 = StandardNormal.sample(&mut rng);
            z[i] += r_k[(i, i)].sqrt() * draw;
        }
        states.push(x.clone());
        measurements.push(model.wrap_components(z));
    }
    Ok(TruthData {
        states,
        measurements,
        init_estimate,
    })
}

/// One variant's trajectory over one run.
#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: FilterVariant,
    /// Posterior mean at each epoch; a failed epoch holds the previous one.
    pub estimates: Vec<DVector<f64>>,
    pub telemetry: Vec<EpochTelemetry>,
    pub failed_epochs: usize,
    /// Set when more than a tenth of the epochs failed; the remaining epochs
    /// hold the last posterior.
    pub aborted: bool,
}

fn held_telemetry(epoch: usize, filter: &AdaptiveCkf) -> EpochTelemetry {
    EpochTelemetry {
        epoch,
        a1: filter.adaptive().a1,
        a2: filter.adaptive().a2,
        tr_c_hat: f64::NAN,
        tr_pzz: f64::NAN,
        floored: filter.adaptive().r_star_floored,
        variant: filter.variant(),
    }
}

/// Runs one filter variant over a simulated run.
///
/// A failed epoch (non-PSD covariance, singular innovation, sensor
/// singularity) holds the previous posterior and is counted; once failures
/// exceed a tenth of the run the rest is abandoned as held estimates and the
/// run is flagged.
pub fn run_variant(
    variant: FilterVariant,
    model: &SystemModel,
    truth: &TruthData,
    nominal: &NoiseCovariances,
    fading: &FadingConfig,
) -> Result<VariantRun, FilterError> {
    let steps = truth.measurements.len();
    let mut filter = AdaptiveCkf::new(
        variant,
        truth.init_estimate.clone(),
        nominal.clone(),
        fading.clone(),
    )?;
    let mut estimates = Vec::with_capacity(steps);
    let mut telemetry = Vec::with_capacity(steps);
    let mut failed = 0usize;
    let mut aborted = false;
    let abort_threshold = steps / 10;
    for (k, z) in truth.measurements.iter().enumerate() {
        match filter.step(model, z) {
            Ok(t) => {
                estimates.push(filter.estimate().mean.clone());
                telemetry.push(t);
            }
            Err(e) => {
                failed += 1;
                log::debug!("{variant}: epoch {k} skipped ({e})");
                estimates.push(filter.estimate().mean.clone());
                telemetry.push(held_telemetry(k, &filter));
                if failed > abort_threshold {
                    aborted = true;
                    for j in (k + 1)..steps {
                        estimates.push(filter.estimate().mean.clone());
                        telemetry.push(held_telemetry(j, &filter));
                    }
                    break;
                }
            }
        }
    }
    Ok(VariantRun {
        variant,
        estimates,
        telemetry,
        failed_epochs: failed,
        aborted,
    })
}

/// Per-epoch RMSE across runs plus its average over epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct RmseSeries {
    pub per_epoch: Vec<f64>,
    pub average: f64,
}

/// Root-mean-square error over runs of the selected state components'
/// Euclidean error, per epoch, with the scalar average over epochs.
pub fn rmse(
    estimates: &[&[DVector<f64>]],
    truths: &[&[DVector<f64>]],
    components: &[usize],
) -> RmseSeries {
    assert!(
        !estimates.is_empty() && estimates.len() == truths.len(),
        "rmse: runs misaligned"
    );
    let steps = estimates[0].len();
    let mut per_epoch = Vec::with_capacity(steps);
    for k in 0..steps {
        let mut acc = 0.0;
        for (est, tru) in estimates.iter().zip(truths) {
            assert!(
                est.len() == steps && tru.len() == steps,
                "rmse: epochs misaligned"
            );
            for &c in components {
                let d = est[k][c] - tru[k][c];
                acc += d * d;
            }
        }
        per_epoch.push((acc / estimates.len() as f64).sqrt());
    }
    let average = per_epoch.iter().sum::<f64>() / steps as f64;
    RmseSeries { per_epoch, average }
}

/// Cross-run aggregate for one variant under one case.
#[derive(Debug, Clone)]
pub struct VariantReport {
    pub variant: FilterVariant,
    pub case: CaseId,
    pub position: RmseSeries,
    pub velocity: RmseSeries,
    /// Per-epoch mean of the fading factors across runs.
    pub mean_a1: Vec<f64>,
    pub mean_a2: Vec<f64>,
    /// Per-epoch mean of the telemetry traces; NaN while factors are
    /// inactive (warm-up).
    pub mean_tr_c_hat: Vec<f64>,
    pub mean_tr_pzz: Vec<f64>,
    /// Share of runs whose noise-estimate floor fired, per epoch.
    pub floored_share: Vec<f64>,
    pub failed_epochs: usize,
    pub aborted_runs: usize,
}

/// Monte Carlo result for one case.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub case: CaseId,
    pub steps: usize,
    pub ts: f64,
    pub variants: Vec<VariantReport>,
}

struct RunData {
    truth: TruthData,
    variant_runs: Vec<VariantRun>,
}

/// Executes the full Monte Carlo experiment for one case.
///
/// Runs execute in parallel; the merge walks run slots in index order, so
/// the report is identical however the runs were scheduled.
pub fn monte_carlo(cfg: &RunConfig, case_id: CaseId) -> Result<RunReport, FilterError> {
    let case = cfg.noise_case(case_id);
    let model = SystemModel::range_bearing_cv(cfg.model.ts);
    let nominal = cfg.nominal_noise();
    let fading = cfg.fading();

    let per_run: Vec<Result<RunData, FilterError>> = (0..cfg.runs)
        .into_par_iter()
        .map(|r| {
            let truth = generate_truth(cfg, &case, r as u64)?;
            let mut variant_runs = Vec::with_capacity(cfg.variants.len());
            for &variant in &cfg.variants {
                variant_runs.push(run_variant(variant, &model, &truth, &nominal, &fading)?);
            }
            Ok(RunData { truth, variant_runs })
        })
        .collect();
    let mut run_data = Vec::with_capacity(cfg.runs);
    for r in per_run {
        run_data.push(r?);
    }

    let steps = cfg.steps;
    let n_runs = run_data.len() as f64;
    let truths: Vec<&[DVector<f64>]> = run_data.iter().map(|rd| rd.truth.states.as_slice()).collect();
    let mut variants = Vec::with_capacity(cfg.variants.len());
    for (vi, &variant) in cfg.variants.iter().enumerate() {
        let estimates: Vec<&[DVector<f64>]> = run_data
            .iter()
            .map(|rd| rd.variant_runs[vi].estimates.as_slice())
            .collect();
        let position = rmse(&estimates, &truths, &POSITION_COMPONENTS);
        let velocity = rmse(&estimates, &truths, &VELOCITY_COMPONENTS);

        let mut mean_a1 = vec![0.0; steps];
        let mut mean_a2 = vec![0.0; steps];
        let mut mean_tr_c_hat = vec![0.0; steps];
        let mut mean_tr_pzz = vec![0.0; steps];
        let mut floored_share = vec![0.0; steps];
        for rd in &run_data {
            for (k, t) in rd.variant_runs[vi].telemetry.iter().enumerate() {
                mean_a1[k] += t.a1;
                mean_a2[k] += t.a2;
                mean_tr_c_hat[k] += t.tr_c_hat;
                mean_tr_pzz[k] += t.tr_pzz;
                if t.floored {
                    floored_share[k] += 1.0;
                }
            }
        }
        for k in 0..steps {
            mean_a1[k] /= n_runs;
            mean_a2[k] /= n_runs;
            mean_tr_c_hat[k] /= n_runs;
            mean_tr_pzz[k] /= n_runs;
            floored_share[k] /= n_runs;
        }

        variants.push(VariantReport {
            variant,
            case: case_id,
            position,
            velocity,
            mean_a1,
            mean_a2,
            mean_tr_c_hat,
            mean_tr_pzz,
            floored_share,
            failed_epochs: run_data.iter().map(|rd| rd.variant_runs[vi].failed_epochs).sum(),
            aborted_runs: run_data
                .iter()
                .filter(|rd| rd.variant_runs[vi].aborted)
                .count(),
        });
    }
    Ok(RunReport {
        case: case_id,
        steps,
        ts: cfg.model.ts,
        variants,
    })
}

/// Bit-level equality of two reports, treating NaNs at the same position as
/// equal. This is the determinism contract's notion of "identical".
pub fn reports_bit_identical(a: &RunReport, b: &RunReport) -> bool {
    fn veq(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len()
            && a.iter()
                .zip(b)
                .all(|(x, y)| x.to_bits() == y.to_bits())
    }
    fn seq(a: &RmseSeries, b: &RmseSeries) -> bool {
        veq(&a.per_epoch, &b.per_epoch) && a.average.to_bits() == b.average.to_bits()
    }
    a.case == b.case
        && a.steps == b.steps
        && a.ts.to_bits() == b.ts.to_bits()
        && a.variants.len() == b.variants.len()
        && a.variants.iter().zip(&b.variants).all(|(x, y)| {
            x.variant == y.variant
                && x.case == y.case
                && seq(&x.position, &y.position)
                && seq(&x.velocity, &y.velocity)
                && veq(&x.mean_a1, &y.mean_a1)
                && veq(&x.mean_a2, &y.mean_a2)
                && veq(&x.mean_tr_c_hat, &y.mean_tr_c_hat)
                && veq(&x.mean_tr_pzz, &y.mean_tr_pzz)
                && veq(&x.floored_share, &y.floored_share)
                && x.failed_epochs == y.failed_epochs
                && x.aborted_runs == y.aborted_runs
        })
}
