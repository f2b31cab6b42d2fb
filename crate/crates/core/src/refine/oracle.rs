use std::sync::atomic::{AtomicU64, Ordering};

use image::RgbImage;

use super::{RefineError, Regressor};
use crate::losses::PoseTarget;
use crate::projection::DepthImage;
use crate::se3::{relative_to_gt, sample_displacement, NoiseSpec, PoseSE3};

/// Correction that leaves a residual error of exactly `contraction` times
/// the current one: rotation angle and translation both scale by it.
///
/// With `E = h_gt ∘ h_current⁻¹` and residual `Rc = (q_E^c, c · t_E)`, the
/// returned correction is `Rc⁻¹ ∘ E`, so that `h_gt ∘ (H_out ∘ h_current)⁻¹ = Rc`.
/// Residual noise, when nonzero, is drawn from `seed` and composed on the left.
pub fn oracle_correction(
    h_current: &PoseSE3,
    h_gt: &PoseSE3,
    contraction: f64,
    residual_noise: &NoiseSpec,
    seed: u64,
) -> Result<PoseTarget, RefineError> {
    if !(0.0..=1.0).contains(&contraction) {
        return Err(RefineError::BadContraction(contraction));
    }
    let exact = relative_to_gt(h_gt, h_current);
    let residual = PoseSE3 {
        rotation: exact.rotation.canonical().pow(contraction),
        translation: exact.translation * contraction,
    };
    let mut h_out = residual.inverse().compose(&exact);
    if residual_noise.max_translation > 0.0 || residual_noise.max_rotation > 0.0 {
        h_out = sample_displacement(residual_noise, seed)
            .to_pose()
            .compose(&h_out);
    }
    Ok(PoseTarget {
        translation: h_out.translation,
        rotation: h_out.rotation,
    })
}

/// Test double that knows the ground truth. Successive calls draw noise from
/// `seed`, `seed + 1`, ...
#[derive(Debug)]
pub struct OracleRegressor {
    pub h_gt: PoseSE3,
    pub contraction: f64,
    pub noise: NoiseSpec,
    pub seed: u64,
    calls: AtomicU64,
}

impl OracleRegressor {
    pub fn new(h_gt: PoseSE3, contraction: f64) -> Result<Self, RefineError> {
        Self::with_noise(h_gt, contraction, NoiseSpec::default(), 0)
    }

    pub fn exact(h_gt: PoseSE3) -> Self {
        Self::new(h_gt, 0.0).expect("zero contraction is valid")
    }

    pub fn with_noise(
        h_gt: PoseSE3,
        contraction: f64,
        noise: NoiseSpec,
        seed: u64,
    ) -> Result<Self, RefineError> {
        if !(0.0..=1.0).contains(&contraction) {
            return Err(RefineError::BadContraction(contraction));
        }
        Ok(Self {
            h_gt,
            contraction,
            noise,
            seed,
            calls: AtomicU64::new(0),
        })
    }
}

impl Regressor for OracleRegressor {
    fn predict(&self, _rgb: &RgbImage, lidar: &DepthImage) -> Result<PoseTarget, RefineError> {
        let k = self.calls.fetch_add(1, Ordering::SeqCst);
        oracle_correction(
            &lidar.generating_pose,
            &self.h_gt,
            self.contraction,
            &self.noise,
            self.seed.wrapping_add(k),
        )
    }
}
