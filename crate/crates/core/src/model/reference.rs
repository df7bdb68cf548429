//! Dense joint-GP reference models over raw inputs.
//!
//! Both build the full `PT x PT` covariance across every patient and cost
//! `O(P^3 T^3)`; they exist as correctness oracles and scaling foils for the
//! block-diagonal model and are capped at [`REFERENCE_SIZE_CAP`] observations.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec::Vec;

use super::{PatientSeries, LN_2PI};
use crate::error::{Error, Result};
use crate::kernel::{rbf_ard, KernelParams};
use crate::linalg::{self, JitterConfig, SpdMatrix};

pub const REFERENCE_SIZE_CAP: usize = 200;

/// Flattened `(patient index, input, target)` triples.
/// Patient index, input row and target for every stacked observation.
type Stacked<'a> = (Vec<usize>, Vec<&'a Vec<f64>>, Vec<f64>);

fn stack(cohort: &[PatientSeries]) -> Result<Stacked<'_>> {
    let size: usize = cohort.iter().map(PatientSeries::len).sum();
    if size > REFERENCE_SIZE_CAP {
        return Err(Error::InstanceTooLarge { size, cap: REFERENCE_SIZE_CAP });
    }
    if size == 0 {
        return Err(Error::EmptyCohort);
    }
    let mut owner = Vec::with_capacity(size);
    let mut xs = Vec::with_capacity(size);
    let mut ys = Vec::with_capacity(size);
    for (i, s) in cohort.iter().enumerate() {
        for (x, y) in s.inputs.iter().zip(&s.targets) {
            owner.push(i);
            xs.push(x);
            ys.push(*y);
        }
    }
    Ok((owner, xs, ys))
}

fn zero_mean_log_density(cov: &SpdMatrix, y: &[f64]) -> Result<f64> {
    let f = linalg::cholesky(cov, &JitterConfig::default())?;
    let alpha = linalg::chol_solve(&f, y)?;
    let quad: f64 = y.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    Ok(-0.5 * quad - 0.5 * linalg::log_det(&f) - 0.5 * y.len() as f64 * LN_2PI)
}

/// Joint log density under `k_g(x, x') + delta_ij k_i(x, x')` with zero mean.
///
/// The global kernel contributes its RBF part only; observation noise comes
/// from each patient's own kernel.
pub fn megp_joint_log_marginal(
    cohort: &[PatientSeries],
    global_kernel: &KernelParams,
    per_patient: &BTreeMap<alloc::string::String, KernelParams>,
) -> Result<f64> {
    let (owner, xs, ys) = stack(cohort)?;
    let kernels = cohort
        .iter()
        .map(|s| per_patient.get(&s.id).ok_or_else(|| Error::UnknownPatient(s.id.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mut failure = None;
    let cov = SpdMatrix::from_fn(ys.len(), |a, b| {
        let mut v = rbf_ard(xs[a], xs[b], global_kernel).unwrap_or_else(|e| {
            failure.get_or_insert(e);
            0.0
        });
        if owner[a] == owner[b] {
            let k = kernels[owner[a]];
            v += rbf_ard(xs[a], xs[b], k).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                0.0
            });
            if a == b {
                v += k.noise_variance();
            }
        }
        v
    });
    if let Some(e) = failure {
        return Err(e);
    }
    zero_mean_log_density(&cov, &ys)
}

/// Joint log density under `K_ij k_g(x, x')` plus the global kernel's noise on
/// the diagonal, with zero mean. `task_matrix` is `P x P` and positive
/// semidefinite.
pub fn mtgp_joint_log_marginal(
    cohort: &[PatientSeries],
    task_matrix: &SpdMatrix,
    global_kernel: &KernelParams,
) -> Result<f64> {
    if task_matrix.dim() != cohort.len() {
        return Err(Error::DimensionMismatch { expected: cohort.len(), found: task_matrix.dim() });
    }
    // semidefinite task matrices (e.g. all ones) are accepted; the noise term
    // keeps the joint covariance definite
    linalg::cholesky(task_matrix, &JitterConfig::default())?;
    let (owner, xs, ys) = stack(cohort)?;
    let noise = global_kernel.noise_variance();
    let mut failure = None;
    let cov = SpdMatrix::from_fn(ys.len(), |a, b| {
        let k = rbf_ard(xs[a], xs[b], global_kernel).unwrap_or_else(|e| {
            failure.get_or_insert(e);
            0.0
        });
        task_matrix.get(owner[a], owner[b]) * k + if a == b { noise } else { 0.0 }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    zero_mean_log_density(&cov, &ys)
}
