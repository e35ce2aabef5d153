//! Maps from unconstrained raw parameters onto valid MPC cost parameters.

use crate::ocp::Theta;

/// `log(1 + eᶻ)`, stable for large `|z|`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inv needs a positive argument");
    y + (-(-y).exp_m1()).ln()
}

/// Raw (unconstrained) parameters of the static D1 policy:
/// `[W_d, W_θ, W_δ̇, d̄]` before projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticRawParams {
    pub raw: [f64; 4],
}

impl StaticRawParams {
    /// Raw values that project exactly onto the given cost parameters.
    pub fn from_projected(w_d: f64, w_theta: f64, w_rate: f64, d_bar: f64, lane_width: f64) -> Self {
        let half = lane_width / 2.0;
        assert!(d_bar.abs() < half, "d_bar must lie strictly inside the lane");
        Self { raw: [softplus_inv(w_d), softplus_inv(w_theta), softplus_inv(w_rate), (d_bar / half).atanh()] }
    }

    /// Initial parameters `(1, 1, 1, 0)`.
    pub fn initial(lane_width: f64) -> Self {
        Self::from_projected(1.0, 1.0, 1.0, 0.0, lane_width)
    }
}

/// Softplus on the weights and `(w/2)·tanh` on the offset, with the
/// diagonal Jacobian `∂θ/∂raw`.
pub fn project_static(raw: &StaticRawParams, lane_width: f64) -> (Theta, [f64; 4]) {
    let half = lane_width / 2.0;
    let r = raw.raw;
    let t = r[3].tanh();
    let theta = Theta::Stage { w_d: softplus(r[0]), w_theta: softplus(r[1]), w_rate: softplus(r[2]), d_bar: half * t };
    let jac = [sigmoid(r[0]), sigmoid(r[1]), sigmoid(r[2]), half * (1.0 - t * t)];
    (theta, jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_project_to_log2() {
        let (theta, _) = project_static(&StaticRawParams { raw: [0.0; 4] }, 4.5);
        let Theta::Stage { w_d, w_theta, w_rate, d_bar } = theta else { panic!() };
        for w in [w_d, w_theta, w_rate] {
            assert!((w - 2f64.ln()).abs() < 1e-15);
        }
        assert_eq!(d_bar, 0.0);
    }

    #[test]
    fn offset_asymptote() {
        let (theta, _) = project_static(&StaticRawParams { raw: [0.0, 0.0, 0.0, 8.0] }, 4.5);
        assert!(theta.d_bar() < 2.25 && theta.d_bar() > 2.2499);
    }

    #[test]
    fn initial_raw_value() {
        let raw = StaticRawParams::initial(4.5);
        // bisection oracle for softplus(z) = 1
        let (mut lo, mut hi) = (-5.0_f64, 5.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (1.0 + mid.exp()).ln() < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((raw.raw[0] - lo).abs() < 1e-12);
        assert!((raw.raw[0] - 0.5413).abs() < 1e-4);
        let (theta, _) = project_static(&raw, 4.5);
        assert!((theta.to_vec()[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn stable_for_large_arguments() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    proptest! {
        #[test]
        fn projection_gradients_match_finite_differences(raw in prop::array::uniform4(-6.0f64..6.0), w in 2.0f64..10.0) {
            let p = StaticRawParams { raw };
            let (_, jac) = project_static(&p, w);
            let h = 1e-6;
            for i in 0..4 {
                let mut a = p;
                let mut b = p;
                a.raw[i] += h;
                b.raw[i] -= h;
                let fd = (project_static(&a, w).0.to_vec()[i] - project_static(&b, w).0.to_vec()[i]) / (2.0 * h);
                prop_assert!((fd - jac[i]).abs() <= 1e-8 * (1.0 + jac[i].abs()), "{} vs {}", fd, jac[i]);
            }
        }

        #[test]
        fn projected_ranges(raw in prop::array::uniform4(-700.0f64..700.0), w in 0.5f64..10.0) {
            let (theta, _) = project_static(&StaticRawParams { raw }, w);
            let v = theta.to_vec();
            prop_assert!(v[0] > 0.0 && v[1] > 0.0 && v[2] > 0.0);
            prop_assert!(v[3].abs() <= w / 2.0);
        }
    }
}
