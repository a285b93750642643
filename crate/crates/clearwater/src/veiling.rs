//! Veiling-light estimation.
//!
//! Looking through object-free water, a camera sees the veiling light: the
//! water column itself, back-scattering ambient light. That color is the
//! additive term of the image formation model, and the distribution of
//! those pixels later tells the regularizer which pixels are "water-like".
//!
//! Object-free water is smooth, so the estimator finds the largest
//! connected region that contains no luminance edges: contrast-stretch the
//! image, take the Sobel gradient magnitude of its luminance, threshold it,
//! and flood-fill the non-edge pixels. The veiling light is the mean color
//! of the winning region, and a Gaussian fitted to the region's pixels
//! yields a Mahalanobis distance that measures how water-like any color is.

use crate::error::{Error, Result};
use crate::image::{
    contrast_stretch, GrayMap, LinearImage, PixelMask, Rect, STRETCH_HIGH_PCT, STRETCH_LOW_PCT,
};

/// Relative weight of the covariance regularizer: `lambda = RIDGE_SCALE *
/// trace / 3`, or `RIDGE_SCALE` absolutely when the trace is zero, is added
/// to the diagonal so the fitted Gaussian is never singular.
pub const RIDGE_SCALE: f64 = 1e-6;

/// Veiling light color plus the statistics of the region it came from.
#[derive(Debug, Clone)]
pub struct VeilingLightEstimate {
    /// The veiling light `A`, used by the image formation model.
    pub color: [f64; 3],
    /// Pixels the estimate was computed from.
    pub mask: PixelMask,
    /// Mean of the fitted Gaussian (equals `color`; kept separate so a
    /// robust color estimator could diverge from the distribution mean).
    pub mean: [f64; 3],
    /// Regularized covariance of the fitted Gaussian.
    pub covariance: [[f64; 3]; 3],
    /// Mean Mahalanobis distance of the region's own pixels.
    pub dm_mean: f64,
    /// Maximum Mahalanobis distance of the region's own pixels.
    pub dm_max: f64,
    /// Standard deviation of those distances.
    pub dm_std: f64,
}

/// Rec. 709 luminance of each pixel.
pub fn luminance(img: &LinearImage) -> GrayMap {
    GrayMap::from_fn(img.width(), img.height(), |x, y| {
        let [r, g, b] = img.pixel(x, y);
        0.2126 * r + 0.7152 * g + 0.0722 * b
    })
}

/// Sobel gradient magnitude with replicated borders, normalized so a unit
/// step edge measures 1.0 per axis.
pub fn sobel_magnitude(map: &GrayMap) -> GrayMap {
    let (w, h) = (map.width(), map.height());
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        map.get(xc, yc)
    };
    GrayMap::from_fn(w, h, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let tl = at(x - 1, y - 1);
        let tc = at(x, y - 1);
        let tr = at(x + 1, y - 1);
        let ml = at(x - 1, y);
        let mr = at(x + 1, y);
        let bl = at(x - 1, y + 1);
        let bc = at(x, y + 1);
        let br = at(x + 1, y + 1);
        let gx = (tr + 2.0 * mr + br - tl - 2.0 * ml - bl) / 4.0;
        let gy = (bl + 2.0 * bc + br - tl - 2.0 * tc - tr) / 4.0;
        (gx * gx + gy * gy).sqrt()
    })
}

/// Pixels whose stretched-luminance gradient stays at or below
/// `edge_threshold`, minus any excluded pixels.
pub fn smooth_mask(
    img: &LinearImage,
    edge_threshold: f64,
    exclude: Option<&PixelMask>,
) -> Result<PixelMask> {
    if !(edge_threshold.is_finite() && edge_threshold >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "edge threshold {edge_threshold} must be non-negative"
        )));
    }
    if let Some(m) = exclude {
        m.check_dims(img.width(), img.height())?;
    }
    let stretched = contrast_stretch(img, STRETCH_LOW_PCT, STRETCH_HIGH_PCT)?.image;
    let grad = sobel_magnitude(&luminance(&stretched));
    Ok(PixelMask::from_fn(img.width(), img.height(), |x, y| {
        grad.get(x, y) <= edge_threshold && !exclude.map_or(false, |m| m.get(x, y))
    }))
}

/// Largest 8-connected component of `mask`, or `None` when the mask is
/// empty. Flood fill with an explicit queue; recursion would overflow on
/// large regions.
pub fn largest_component(mask: &PixelMask) -> Option<PixelMask> {
    let (w, h) = (mask.width(), mask.height());
    let mut labels = vec![0u32; w * h];
    let mut next_label = 0u32;
    let mut best_label = 0u32;
    let mut best_size = 0usize;
    let mut queue = std::collections::VecDeque::new();
    for start in 0..w * h {
        if !mask.data()[start] || labels[start] != 0 {
            continue;
        }
        next_label += 1;
        labels[start] = next_label;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (px, py) = (p % w, p / w);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (px as isize + dx, py as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.data()[q] && labels[q] == 0 {
                        labels[q] = next_label;
                        queue.push_back(q);
                    }
                }
            }
        }
        if size > best_size {
            best_size = size;
            best_label = next_label;
        }
    }
    if best_size == 0 {
        return None;
    }
    Some(
        PixelMask::from_vec(w, h, labels.iter().map(|&l| l == best_label).collect())
            .expect("label buffer matches mask size"),
    )
}

pub(crate) fn mat3_inverse(m: &[[f64; 3]; 3]) -> Result<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if !det.is_finite() || det.abs() < 1e-300 {
        return Err(Error::SingularCovariance);
    }
    let inv_det = 1.0 / det;
    let adj = |r1: usize, c1: usize, r2: usize, c2: usize| m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1];
    Ok([
        [
            adj(1, 1, 2, 2) * inv_det,
            -adj(0, 1, 2, 2) * inv_det,
            adj(0, 1, 1, 2) * inv_det,
        ],
        [
            -adj(1, 0, 2, 2) * inv_det,
            adj(0, 0, 2, 2) * inv_det,
            -adj(0, 0, 1, 2) * inv_det,
        ],
        [
            adj(1, 0, 2, 1) * inv_det,
            -adj(0, 0, 2, 1) * inv_det,
            adj(0, 0, 1, 1) * inv_det,
        ],
    ])
}

fn mahalanobis_distance(p: [f64; 3], mean: [f64; 3], cov_inv: &[[f64; 3]; 3]) -> f64 {
    let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
    let mut q = 0.0;
    for (i, row) in cov_inv.iter().enumerate() {
        for (j, &m) in row.iter().enumerate() {
            q += d[i] * m * d[j];
        }
    }
    q.max(0.0).sqrt()
}

/// Fits the estimate's statistics on the masked pixels of `img`.
fn estimate_from_mask(img: &LinearImage, mask: PixelMask) -> Result<VeilingLightEstimate> {
    mask.check_dims(img.width(), img.height())?;
    let n = mask.count();
    if n == 0 {
        return Err(Error::EmptyRegion);
    }
    let mean = img.channel_means(Some(&mask))?;
    if let Some(&bad) = mean.iter().find(|&&m| m <= 0.0) {
        return Err(Error::DegenerateVeilingLight(bad));
    }

    let mut cov = [[0.0f64; 3]; 3];
    for p in 0..img.pixel_count() {
        if !mask.data()[p] {
            continue;
        }
        let i = p * 3;
        let d = [
            img.data()[i] - mean[0],
            img.data()[i + 1] - mean[1],
            img.data()[i + 2] - mean[2],
        ];
        for r in 0..3 {
            for c in 0..3 {
                cov[r][c] += d[r] * d[c];
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }
    let trace = cov[0][0] + cov[1][1] + cov[2][2];
    // A constant region accumulates rounding dust instead of an exact zero
    // trace; anything this small means "no spread".
    let ridge = if trace > 1e-20 { RIDGE_SCALE * trace / 3.0 } else { RIDGE_SCALE };
    for (r, row) in cov.iter_mut().enumerate() {
        row[r] += ridge;
    }

    let cov_inv = mat3_inverse(&cov)?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut dm_max = 0.0f64;
    for p in 0..img.pixel_count() {
        if !mask.data()[p] {
            continue;
        }
        let i = p * 3;
        let d = mahalanobis_distance(
            [img.data()[i], img.data()[i + 1], img.data()[i + 2]],
            mean,
            &cov_inv,
        );
        sum += d;
        sum_sq += d * d;
        dm_max = dm_max.max(d);
    }
    let dm_mean = sum / n as f64;
    let dm_var = (sum_sq / n as f64 - dm_mean * dm_mean).max(0.0);
    Ok(VeilingLightEstimate {
        color: mean,
        mask,
        mean,
        covariance: cov,
        dm_mean,
        dm_max,
        dm_std: dm_var.sqrt(),
    })
}

/// Estimates the veiling light as the mean color of the largest smooth
/// region of `img`.
///
/// Fails with [`Error::NoVeilingLight`] when that region covers less than
/// `min_region_frac` of the image; pass a manual region to
/// [`manual_veiling_light`] in that case. `exclude` removes pixels (for
/// example a calibration-target mask) from consideration.
pub fn estimate_veiling_light(
    img: &LinearImage,
    edge_threshold: f64,
    min_region_frac: f64,
    exclude: Option<&PixelMask>,
) -> Result<VeilingLightEstimate> {
    if !(0.0..=1.0).contains(&min_region_frac) {
        return Err(Error::InvalidParameter(format!(
            "minimum region fraction {min_region_frac} outside [0, 1]"
        )));
    }
    let smooth = smooth_mask(img, edge_threshold, exclude)?;
    let required = min_region_frac * img.pixel_count() as f64;
    let component = largest_component(&smooth);
    let found = component.as_ref().map_or(0, PixelMask::count);
    if (found as f64) < required.max(1.0) {
        return Err(Error::NoVeilingLight {
            found: found as f64 / img.pixel_count() as f64,
            required: min_region_frac,
        });
    }
    estimate_from_mask(img, component.expect("checked above"))
}

/// Builds the estimate from a caller-chosen rectangle instead of the
/// automatic search.
pub fn manual_veiling_light(img: &LinearImage, rect: Rect) -> Result<VeilingLightEstimate> {
    if !rect.fits(img.width(), img.height()) {
        return Err(Error::InvalidParameter(format!(
            "rectangle {rect} does not fit a {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let mask = PixelMask::from_fn(img.width(), img.height(), |x, y| rect.contains(x, y));
    estimate_from_mask(img, mask)
}

/// Mahalanobis distance of every pixel to the veiling-light distribution.
pub fn mahalanobis_map(img: &LinearImage, est: &VeilingLightEstimate) -> Result<GrayMap> {
    let cov_inv = mat3_inverse(&est.covariance)?;
    Ok(GrayMap::from_fn(img.width(), img.height(), |x, y| {
        mahalanobis_distance(img.pixel(x, y), est.mean, &cov_inv)
    }))
}
