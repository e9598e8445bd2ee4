//! Constant-velocity Kalman filter over box center and size.
//!
//! State layout: `(cx, cy, w, h, vcx, vcy, vw, vh)`, velocities in pixels per
//! frame. The measurement is `(cx, cy, w, h)`.

use nalgebra::{SMatrix, SVector};

use super::{BoxRect, TrackerConfig};

pub type BoxState = SVector<f64, 8>;
pub type BoxCovariance = SMatrix<f64, 8, 8>;
type Measurement = SVector<f64, 4>;

/// Smallest eigenvalue allowed after a covariance repair.
pub const MIN_EIGENVALUE: f64 = 1e-9;

fn transition() -> BoxCovariance {
    let mut f = BoxCovariance::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

fn observation() -> SMatrix<f64, 4, 8> {
    SMatrix::<f64, 4, 8>::from_fn(|r, c| if r == c { 1.0 } else { 0.0 })
}

fn process_noise(cfg: &TrackerConfig) -> BoxCovariance {
    BoxCovariance::from_fn(|r, c| match (r == c, r < 4) {
        (true, true) => cfg.process_pos_var,
        (true, false) => cfg.process_vel_var,
        _ => 0.0,
    })
}

pub fn measurement_of(b: &BoxRect) -> SVector<f64, 4> {
    let (cx, cy) = b.center();
    Measurement::new(cx, cy, b.width(), b.height())
}

pub fn initial_state(b: &BoxRect) -> BoxState {
    let z = measurement_of(b);
    BoxState::from_fn(|i, _| if i < 4 { z[i] } else { 0.0 })
}

pub fn initial_covariance(cfg: &TrackerConfig) -> BoxCovariance {
    BoxCovariance::from_fn(|r, c| match (r == c, r < 4) {
        (true, true) => cfg.init_pos_var,
        (true, false) => cfg.init_vel_var,
        _ => 0.0,
    })
}

/// Box described by the position part of the state; width and height are
/// floored at one pixel.
pub fn state_box(x: &BoxState) -> BoxRect {
    let w = x[2].max(1.0);
    let h = x[3].max(1.0);
    BoxRect::new(x[0] - w / 2.0, x[1] - h / 2.0, x[0] + w / 2.0, x[1] + h / 2.0)
}

/// Symmetrizes `p` and, if it is not positive-definite, clamps its
/// eigenvalues at [`MIN_EIGENVALUE`]. Returns whether a clamp was needed.
pub fn repair_covariance(p: &BoxCovariance) -> (BoxCovariance, bool) {
    let sym = (p + p.transpose()) * 0.5;
    if sym.cholesky().is_some() {
        return (sym, false);
    }
    let eig = sym.symmetric_eigen();
    let clamped = eig.eigenvalues.map(|l| if l.is_finite() { l.max(MIN_EIGENVALUE) } else { MIN_EIGENVALUE });
    let rebuilt = eig.eigenvectors * BoxCovariance::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    ((rebuilt + rebuilt.transpose()) * 0.5, true)
}

pub fn predict(x: &BoxState, p: &BoxCovariance, cfg: &TrackerConfig) -> (BoxState, BoxCovariance) {
    let f = transition();
    let x_next = f * x;
    let p_next = f * p * f.transpose() + process_noise(cfg);
    (x_next, repair_covariance(&p_next).0)
}

/// Joseph-form measurement update.
pub fn update(
    x: &BoxState,
    p: &BoxCovariance,
    measured: &BoxRect,
    cfg: &TrackerConfig,
) -> (BoxState, BoxCovariance, bool) {
    let h = observation();
    let r = SMatrix::<f64, 4, 4>::identity() * cfg.measurement_var;
    let innovation = measurement_of(measured) - h * x;
    let s = h * p * h.transpose() + r;
    let s_inv = match s.try_inverse() {
        Some(inv) => inv,
        None => match (s + SMatrix::<f64, 4, 4>::identity() * MIN_EIGENVALUE).try_inverse() {
            Some(inv) => inv,
            None => return (*x, *p, false),
        },
    };
    let gain = p * h.transpose() * s_inv;
    let x_new = x + gain * innovation;
    let i_kh = BoxCovariance::identity() - gain * h;
    let p_new = i_kh * p * i_kh.transpose() + gain * r * gain.transpose();
    let (p_new, repaired) = repair_covariance(&p_new);
    (x_new, p_new, repaired)
}
