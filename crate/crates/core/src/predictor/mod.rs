//! Recurrent target-acceleration predictor.

pub mod cell;
pub mod io;
pub mod model;
pub mod train;

pub use cell::{cell_forward, CellKind, CellParams, CellState};
pub use io::{load_model, read_model, save_model, write_model};
pub use model::{Architecture, Batch, DropoutMasks, EncoderDecoder, Forecast, LossParts, SizePreset};
pub use train::{train, TrainConfig, TrainReport};

use crate::dataset::Feature;
use crate::engagement::{target_accel_polar, PolarTargetAccel};
use crate::error::{Error, Result};

/// Un-scaled lateral acceleration forecast `a_T(k + j)`, `j = 0..n_p`, at
/// control step `dt`. `history` holds raw features sampled every
/// `model.window.sample_dt()`, oldest first. Forecast samples are linearly
/// interpolated onto the control grid.
pub fn forecast_accel(model: &EncoderDecoder, history: &[Feature], dt: f64, n_p: usize) -> Result<Vec<f64>> {
    let scaled: Vec<Feature> = history.iter().map(|f| model.scaler.scale(f)).collect();
    let out = model.forward(&scaled)?;
    let a: Vec<f64> = out.accel.iter().map(|&s| model.accel.unscale(s)).collect();
    resample(&a, model.window.sample_dt(), dt, n_p)
}

fn resample(a: &[f64], sample_dt: f64, dt: f64, n_p: usize) -> Result<Vec<f64>> {
    let last = a.len().saturating_sub(1) as f64;
    let need = n_p.saturating_sub(1) as f64 * dt / sample_dt;
    if a.is_empty() || need > last + 1e-9 {
        return Err(Error::HorizonExceeded {
            requested: n_p,
            available: if a.is_empty() { 0 } else { (last * sample_dt / dt).floor() as usize + 1 },
        });
    }
    Ok((0..n_p)
        .map(|j| {
            let s = (j as f64 * dt / sample_dt).min(last);
            let i = (s.floor() as usize).min(a.len() - 1);
            if i + 1 >= a.len() {
                a[i]
            } else {
                let f = s - i as f64;
                a[i] + f * (a[i + 1] - a[i])
            }
        })
        .collect())
}

/// Converts a scalar lateral-acceleration sequence to polar components,
/// propagating the target heading with the same accelerations.
pub fn polar_sequence(accel: &[f64], lambda: &[f64], theta_t: f64, v_t: f64, dt: f64) -> Result<Vec<PolarTargetAccel>> {
    if lambda.len() < accel.len() {
        return Err(Error::Dimension(format!("{} bearings for {} accelerations", lambda.len(), accel.len())));
    }
    let mut theta = theta_t;
    Ok(accel
        .iter()
        .zip(lambda)
        .map(|(&a, &l)| {
            let w = target_accel_polar(a, theta, l);
            theta += dt * a / v_t;
            w
        })
        .collect())
}

/// Forecast `w(k + j | k)` for `j = 0..n_p` along the nominal bearings.
pub fn predict_polar(
    model: &EncoderDecoder,
    history: &[Feature],
    lambda: &[f64],
    theta_t: f64,
    v_t: f64,
    dt: f64,
    n_p: usize,
) -> Result<Vec<PolarTargetAccel>> {
    let a = forecast_accel(model, history, dt, n_p)?;
    polar_sequence(&a, lambda, theta_t, v_t, dt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resample_interpolates_and_bounds() {
        let a = [0.0, 1.0, 2.0];
        let r = resample(&a, 0.1, 0.05, 5).unwrap();
        for (x, y) in r.iter().zip([0.0, 0.5, 1.0, 1.5, 2.0]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(resample(&a, 0.1, 0.05, 6), Err(Error::HorizonExceeded { available: 5, .. })));
    }

    #[test]
    fn aligned_heading_gives_pure_normal_component() {
        let w = polar_sequence(&[5.0; 4], &[0.3; 4], 0.3, 100.0, 0.0).unwrap();
        for p in w {
            assert!(p.a_tr.abs() < 1e-12);
            assert!((p.a_tlambda - 5.0).abs() < 1e-12);
        }
    }
}
