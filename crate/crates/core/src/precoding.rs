//! Normalized zero-forcing precoders for one PRB.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Relative singular-value cutoff below which a user set is rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct PrecodeResult {
    pub selected_users: Vec<usize>,
    /// `M x |X|`, column `k` is the unit-norm precoder of `selected_users[k]`.
    pub normalized_precoders: DMatrix<Complex64>,
    /// `|g_u^T w_u|^2` per selected user.
    pub effective_gains: Vec<f64>,
}

impl PrecodeResult {
    pub fn empty(num_antennas: usize) -> Self {
        Self {
            selected_users: Vec::new(),
            normalized_precoders: DMatrix::zeros(num_antennas, 0),
            effective_gains: Vec::new(),
        }
    }
}

/// Gathers the rows of `channel` listed in `users` into a `|users| x M` matrix.
pub fn gather_rows(channel: &DMatrix<Complex64>, users: &[usize]) -> DMatrix<Complex64> {
    DMatrix::from_fn(users.len(), channel.ncols(), |i, j| channel[(users[i], j)])
}

/// Zero-forcing precoding on the selected rows (`|X| x M`, one row per user).
///
/// The precoders are the columns of the right pseudo-inverse `H^+`, so that
/// `H W` is diagonal under the plain transpose convention `g_v^T w_u`, each
/// normalized to unit norm.
pub fn zf_precode(rows: &DMatrix<Complex64>, users: &[usize]) -> Result<PrecodeResult> {
    assert_eq!(
        rows.nrows(),
        users.len(),
        "one channel row per selected user"
    );
    let (k, m) = rows.shape();
    if k == 0 {
        return Ok(PrecodeResult::empty(m));
    }
    if k > m {
        return Err(Error::RankDeficient { ratio: 0.0 });
    }
    let svd = rows.clone().svd(true, true);
    let s = &svd.singular_values;
    let s_max = s.max();
    let s_min = s.min();
    if !(s_max > 0.0) || s_min < RANK_TOLERANCE * s_max || !s_min.is_finite() {
        let ratio = if s_max > 0.0 { s_min / s_max } else { 0.0 };
        return Err(Error::RankDeficient { ratio });
    }
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    // H = U S V^H  =>  H^+ = V S^-1 U^H
    let mut pinv = v_t.adjoint();
    for (c, &sv) in s.iter().enumerate() {
        pinv.column_mut(c).unscale_mut(sv);
    }
    let mut w = pinv * u.adjoint();
    let mut effective_gains = Vec::with_capacity(k);
    for c in 0..k {
        let norm = w.column(c).norm();
        w.column_mut(c).unscale_mut(norm);
        let response: Complex64 = rows
            .row(c)
            .iter()
            .zip(w.column(c).iter())
            .map(|(g, wi)| g * wi)
            .sum();
        effective_gains.push(response.norm_sqr());
    }
    Ok(PrecodeResult {
        selected_users: users.to_vec(),
        normalized_precoders: w,
        effective_gains,
    })
}

/// SNR of a user served alone with a matched filter: `P ||g||^2 / sigma^2`.
pub fn single_user_snr(channel_row: &[Complex64], total_power_w: f64, noise_power_w: f64) -> f64 {
    let energy: f64 = channel_row.iter().map(|z| z.norm_sqr()).sum();
    total_power_w * energy / noise_power_w
}
