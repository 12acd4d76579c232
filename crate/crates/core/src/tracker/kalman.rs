//! Constant-velocity Kalman filter over `[cx, cy, s, r, vcx, vcy, vs]`, where
//! `s` is box area and `r` the aspect ratio `w / h`. The aspect ratio carries
//! no velocity.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub type StateVector = SVector<f64, 7>;
pub type StateCovariance = SMatrix<f64, 7, 7>;
type Measurement = SVector<f64, 4>;
type MeasurementMatrix = SMatrix<f64, 4, 7>;

/// Noise settings. Defaults are the usual SORT diagonal values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KalmanConfig {
    pub process_noise: [f64; 7],
    pub measurement_noise: [f64; 4],
    pub initial_covariance: [f64; 7],
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            process_noise: [1.0, 1.0, 1.0, 1.0, 0.01, 0.01, 0.0001],
            measurement_noise: [1.0, 1.0, 10.0, 10.0],
            initial_covariance: [10.0, 10.0, 10.0, 10.0, 1e4, 1e4, 1e4],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanTrackState {
    pub mean: StateVector,
    pub covariance: StateCovariance,
}

fn transition() -> StateCovariance {
    let mut f = StateCovariance::identity();
    f[(0, 4)] = 1.0;
    f[(1, 5)] = 1.0;
    f[(2, 6)] = 1.0;
    f
}

fn observation_matrix() -> MeasurementMatrix {
    let mut h = MeasurementMatrix::zeros();
    for i in 0..4 {
        h[(i, i)] = 1.0;
    }
    h
}

fn symmetrize(p: &mut StateCovariance) {
    *p = (*p + p.transpose()) * 0.5;
}

/// `[cx, cy, area, aspect]` for a box.
pub fn box_to_measurement(b: &BBox) -> [f64; 4] {
    [b.cx(), b.cy(), b.area(), b.w() / b.h()]
}

impl KalmanTrackState {
    pub fn from_box(b: &BBox, cfg: &KalmanConfig) -> Self {
        let z = box_to_measurement(b);
        let mut mean = StateVector::zeros();
        mean.fixed_rows_mut::<4>(0).copy_from_slice(&z);
        let covariance = StateCovariance::from_diagonal(&StateVector::from(cfg.initial_covariance));
        Self { mean, covariance }
    }

    fn check_finite(&self, what: &str) -> Result<()> {
        if self.mean.iter().chain(self.covariance.iter()).all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite Kalman state {what}")))
        }
    }

    pub fn predict(&self, cfg: &KalmanConfig) -> Result<Self> {
        self.check_finite("before predict")?;
        let mut mean = self.mean;
        // area may not be driven below zero
        if mean[2] + mean[6] <= 0.0 {
            mean[6] = 0.0;
        }
        let f = transition();
        let q = StateCovariance::from_diagonal(&StateVector::from(cfg.process_noise));
        let mut covariance = f * self.covariance * f.transpose() + q;
        symmetrize(&mut covariance);
        let next = Self {
            mean: f * mean,
            covariance,
        };
        next.check_finite("after predict")?;
        Ok(next)
    }

    pub fn update(&self, observation: &BBox, cfg: &KalmanConfig) -> Result<Self> {
        self.check_finite("before update")?;
        let h = observation_matrix();
        let r = SMatrix::<f64, 4, 4>::from_diagonal(&Measurement::from(cfg.measurement_noise));
        let z = Measurement::from(box_to_measurement(observation));
        let innovation = z - h * self.mean;
        let s = h * self.covariance * h.transpose() + r;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::Numeric("singular innovation covariance".into()))?;
        let gain = self.covariance * h.transpose() * s_inv;
        let mean = self.mean + gain * innovation;
        // Joseph form keeps the covariance positive semi-definite.
        let i_kh = StateCovariance::identity() - gain * h;
        let mut covariance = i_kh * self.covariance * i_kh.transpose() + gain * r * gain.transpose();
        symmetrize(&mut covariance);
        let next = Self { mean, covariance };
        next.check_finite("after update")?;
        Ok(next)
    }

    /// Measurement-space part `[cx, cy, s, r]` of the mean.
    pub fn measurement(&self) -> [f64; 4] {
        [self.mean[0], self.mean[1], self.mean[2], self.mean[3]]
    }

    /// The box implied by the mean, if its area and aspect are positive.
    pub fn to_box(&self) -> Option<BBox> {
        let [cx, cy, s, r] = self.measurement();
        if !(s > 0.0 && r > 0.0) {
            return None;
        }
        let w = (s * r).sqrt();
        BBox::new(cx, cy, w, s / w).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn zero_velocity_keeps_position() {
        let cfg = KalmanConfig::default();
        let s = KalmanTrackState::from_box(&bx(10.0, 20.0, 4.0, 8.0), &cfg);
        let p = s.predict(&cfg).unwrap();
        assert_eq!(p.measurement(), s.measurement());
        assert!(p.covariance.trace() >= s.covariance.trace());
    }

    #[test]
    fn velocity_propagates_linearly() {
        let cfg = KalmanConfig::default();
        let mut s = KalmanTrackState::from_box(&bx(10.0, 20.0, 4.0, 8.0), &cfg);
        s.mean[4] = 3.0;
        for k in 1..=4 {
            let trace = s.covariance.trace();
            s = s.predict(&cfg).unwrap();
            assert!((s.mean[0] - (10.0 + 3.0 * k as f64)).abs() < 1e-12);
            assert_eq!(s.mean[1], 20.0);
            assert!(s.covariance.trace() >= trace);
        }
    }

    #[test]
    fn update_at_prediction_is_fixed_point() {
        let cfg = KalmanConfig::default();
        let b = bx(10.0, 20.0, 4.0, 8.0);
        let s = KalmanTrackState::from_box(&b, &cfg).predict(&cfg).unwrap();
        let u = s.update(&b, &cfg).unwrap();
        for i in 0..7 {
            assert!((u.mean[i] - s.mean[i]).abs() < 1e-12);
        }
        assert!(u.covariance.trace() <= s.covariance.trace());
    }

    #[test]
    fn update_moves_between_prior_and_observation() {
        let cfg = KalmanConfig::default();
        let s = KalmanTrackState::from_box(&bx(10.0, 20.0, 4.0, 8.0), &cfg)
            .predict(&cfg)
            .unwrap();
        let obs = bx(14.0, 17.0, 6.0, 7.0);
        let u = s.update(&obs, &cfg).unwrap();
        let (prior, post, z) = (s.measurement(), u.measurement(), box_to_measurement(&obs));
        for i in 0..4 {
            let (lo, hi) = (prior[i].min(z[i]), prior[i].max(z[i]));
            assert!(post[i] >= lo - 1e-12 && post[i] <= hi + 1e-12, "component {i}");
        }
        assert!(u.covariance.trace() <= s.covariance.trace());
    }

    #[test]
    fn vanishing_measurement_noise_snaps_to_observation() {
        let cfg = KalmanConfig {
            measurement_noise: [1e-12; 4],
            ..KalmanConfig::default()
        };
        let s = KalmanTrackState::from_box(&bx(10.0, 20.0, 4.0, 8.0), &cfg)
            .predict(&cfg)
            .unwrap();
        let obs = bx(13.0, 22.0, 5.0, 9.0);
        let u = s.update(&obs, &cfg).unwrap();
        let (post, z) = (u.measurement(), box_to_measurement(&obs));
        for i in 0..4 {
            assert!((post[i] - z[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_state_is_rejected() {
        let cfg = KalmanConfig::default();
        let mut s = KalmanTrackState::from_box(&bx(10.0, 20.0, 4.0, 8.0), &cfg);
        s.mean[0] = f64::NAN;
        assert!(matches!(s.predict(&cfg), Err(Error::Numeric(_))));
    }

    #[test]
    fn covariance_stays_symmetric() {
        let cfg = KalmanConfig::default();
        let mut s = KalmanTrackState::from_box(&bx(50.0, 50.0, 10.0, 20.0), &cfg);
        for k in 0..1000 {
            s = s.predict(&cfg).unwrap();
            if k % 3 != 2 {
                let t = k as f64;
                let obs = bx(50.0 + 0.5 * t + (t * 0.7).sin(), 50.0 + (t * 0.3).cos(), 10.0 + (t * 0.1).sin(), 20.0);
                s = s.update(&obs, &cfg).unwrap();
            }
            let asym = (s.covariance - s.covariance.transpose()).abs().max();
            assert!(asym <= 1e-9, "step {k}: asymmetry {asym}");
        }
    }
}
