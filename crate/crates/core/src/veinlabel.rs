//! Soft vein labels from ridge curvature.
//!
//! Veins show up as dark ridges, which are valleys of the intensity
//! surface. The largest eigenvalue of the Hessian of a Gaussian-smoothed
//! image is strongly positive across such a valley, so rectifying and
//! normalizing it yields a per-pixel vein probability without any manual
//! annotation.

use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, normalize_minmax, ProbMap};
use crate::scalar::Scalar;

/// Largest Hessian eigenvalue of the Gaussian-smoothed image, rectified at
/// zero and min-max normalized.
///
/// Second derivatives use central differences with reflected borders:
/// `fxx = f(x+1) - 2 f(x) + f(x-1)` along rows, `fyy` the same down
/// columns, and `fxy` the standard four-point cross difference divided by
/// four. The response is `max(0, ((fxx + fyy) + sqrt((fxx - fyy)^2 +
/// 4 fxy^2)) / 2)`.
pub fn curvature_response<S: Scalar>(map: &ProbMap<S>, sigma: f64) -> Result<ProbMap<S>> {
    let g = gaussian_blur(map, sigma)?;
    let (w, h) = (g.width(), g.height());
    let at = |x: isize, y: isize| -> f64 {
        let sx = crate::imaging::reflect_index(x, w);
        let sy = crate::imaging::reflect_index(y, h);
        g.get(sx, sy).to_f64_lossy()
    };
    let mut out = ProbMap::new(w, h)?;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let c = at(x, y);
            let fxx = at(x + 1, y) - 2.0 * c + at(x - 1, y);
            let fyy = at(x, y + 1) - 2.0 * c + at(x, y - 1);
            let fxy = (at(x + 1, y + 1) - at(x + 1, y - 1) - at(x - 1, y + 1)
                + at(x - 1, y - 1))
                / 4.0;
            let tr = fxx + fyy;
            let diff = fxx - fyy;
            let lam = 0.5 * (tr + (diff * diff + 4.0 * fxy * fxy).sqrt());
            out.set(x as usize, y as usize, S::from_f64_lossy(lam.max(0.0)));
        }
    }
    Ok(normalize_minmax(&out))
}

/// Builds the training target for the segmentation network: curvature
/// response at `sigma_curv`, softened by a second blur at `sigma_smooth`,
/// then renormalized to span [0, 1].
///
/// An image with no curvature signal anywhere cannot supervise training
/// and is rejected.
pub fn make_soft_label<S: Scalar>(
    map: &ProbMap<S>,
    sigma_curv: f64,
    sigma_smooth: f64,
) -> Result<ProbMap<S>> {
    let curv = curvature_response(map, sigma_curv)?;
    let soft = gaussian_blur(&curv, sigma_smooth)?;
    let label = normalize_minmax(&soft);
    if label.as_slice().iter().all(|v| *v == S::zero()) {
        return Err(Error::DegenerateLabels(
            "curvature response is zero everywhere".to_string(),
        ));
    }
    Ok(label)
}
