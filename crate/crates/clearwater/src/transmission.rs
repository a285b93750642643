//! Final blue-channel transmission map.
//!
//! The raw haze-line estimate is noisy and ignores the strongest cue in the
//! image: pixels that look like pure water are far away. This module blends
//! the haze-line estimate with a physical lower bound using each pixel's
//! Mahalanobis distance to the veiling-light distribution, then regularizes
//! the result with a guided image filter so transmission edges follow image
//! edges.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hazelines::{
    cluster_pixels, compensation_exponents, initial_transmission, medium_compensate,
    sphere_directions,
};
use crate::image::{
    contrast_stretch, GrayMap, LinearImage, PixelMask, STRETCH_HIGH_PCT, STRETCH_LOW_PCT,
};
use crate::veiling::{mahalanobis_map, mat3_inverse, VeilingLightEstimate};
use crate::water::WaterType;

/// Per-pixel blue-channel transmission, clamped to `[t_floor, 1]` on
/// construction so downstream division by `t` is always safe.
#[derive(Debug, Clone)]
pub struct TransmissionMap {
    pub map: GrayMap,
}

impl TransmissionMap {
    pub fn new(mut map: GrayMap, t_floor: f64) -> Self {
        for v in map.data_mut() {
            *v = v.clamp(t_floor, 1.0);
        }
        TransmissionMap { map }
    }
}

/// Tunables for [`estimate_transmission`].
#[derive(Debug, Clone)]
pub struct TransmissionParams {
    /// Number of haze-line directions on the unit sphere.
    pub n_directions: usize,
    /// Lines with fewer members fall back to a global radius percentile.
    pub min_line_size: usize,
    /// Lower clamp for the final map.
    pub t_floor: f64,
    /// Guided-filter window radius; `None` picks `max(8, width / 50)`.
    pub gf_radius: Option<usize>,
    /// Guided-filter regularization strength.
    pub gf_eps: f64,
}

impl Default for TransmissionParams {
    fn default() -> Self {
        TransmissionParams {
            n_directions: 500,
            min_line_size: 50,
            t_floor: 0.05,
            gf_radius: None,
            gf_eps: 1e-3,
        }
    }
}

/// Guided-filter radius used when none is configured.
pub fn default_gf_radius(width: usize) -> usize {
    (width / 50).max(8)
}

/// Physical lower bound on the blue transmission.
///
/// A non-emissive surface reflects at most the full ambient light, so
/// `1 - I_c/A_c <= t_c (1 - J_c/A_c) <= t_c`; raising the channel ratio to
/// the blue-to-c attenuation ratio turns `t_c` into `t_B`, and the largest
/// channel gives the tightest bound. Bases are clamped to `[0, 1]` before
/// the fractional power (a surface brighter than the water gives a vacuous
/// negative bound).
pub fn lower_bound(img: &LinearImage, a: [f64; 3], wt: &WaterType) -> Result<GrayMap> {
    if a.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "veiling light must be positive in every channel, got ({}, {}, {})",
            a[0], a[1], a[2]
        )));
    }
    let exps = compensation_exponents(wt);
    Ok(GrayMap::from_fn(img.width(), img.height(), |x, y| {
        let p = img.pixel(x, y);
        let mut best = 0.0f64;
        for c in 0..3 {
            let base = (1.0 - p[c] / a[c]).clamp(0.0, 1.0);
            best = best.max(base.powf(exps[c]));
        }
        best.clamp(0.0, 1.0)
    }))
}

/// Blend the haze-line estimate with the lower bound, weighting by how much
/// each pixel resembles pure water.
///
/// Pixels within one standard deviation of the veiling-light distribution
/// take the lower bound; pixels beyond the largest observed distance (plus
/// one deviation) keep the haze-line value; in between, the mix is linear in
/// the distance. A degenerate distribution (`dm_max <= dm_mean`) leaves no
/// room for a blend band, so only the two-way threshold applies.
pub fn soft_matte(
    t_init: &GrayMap,
    t_lb: &GrayMap,
    dm: &GrayMap,
    est: &VeilingLightEstimate,
) -> Result<GrayMap> {
    let (w, h) = (t_init.width(), t_init.height());
    t_lb.check_dims(w, h)?;
    dm.check_dims(w, h)?;
    let lo = est.dm_mean + est.dm_std;
    let hi = est.dm_max + est.dm_std;
    let denom = est.dm_max - est.dm_mean;
    Ok(GrayMap::from_fn(w, h, |x, y| {
        let d = dm.get(x, y);
        let lb = t_lb.get(x, y);
        let init = t_init.get(x, y);
        if d <= lo {
            lb
        } else if denom <= 0.0 || d >= hi {
            init
        } else {
            let alpha = ((d - lo) / denom).clamp(0.0, 1.0);
            alpha * lb + (1.0 - alpha) * init
        }
    }))
}

/// Summed-area table over a `w x h` scalar field, with an extra zero row and
/// column so window queries need no branching.
struct Integral {
    w: usize,
    s: Vec<f64>,
}

impl Integral {
    fn new(values: &[f64], w: usize, h: usize) -> Self {
        let stride = w + 1;
        let mut s = vec![0.0f64; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += values[y * w + x];
                s[(y + 1) * stride + (x + 1)] = s[y * stride + (x + 1)] + row;
            }
        }
        Integral { w, s }
    }

    /// Sum over the inclusive window `[x0..=x1] x [y0..=y1]`.
    fn window_sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let st = self.w + 1;
        self.s[(y1 + 1) * st + (x1 + 1)] + self.s[y0 * st + x0]
            - self.s[y0 * st + (x1 + 1)]
            - self.s[(y1 + 1) * st + x0]
    }
}

/// Mean of `values` over the radius-`r` square window around every pixel,
/// truncated at the image border (the divisor is the in-bounds pixel count).
fn box_mean(values: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let integral = Integral::new(values, w, h);
    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r).min(h - 1);
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r).min(w - 1);
            let count = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
            out[y * w + x] = integral.window_sum(x0, y0, x1, y1) / count;
        }
    }
    out
}

/// Edge-preserving smoothing of `map` steered by a color `guidance` image:
/// each window fits the local linear model `q = a . I + b` ridge-regularized
/// by `eps`, and the per-pixel output averages the models of every window
/// covering that pixel.
pub fn guided_filter(
    map: &GrayMap,
    guidance: &LinearImage,
    radius: usize,
    eps: f64,
) -> Result<GrayMap> {
    let (w, h) = (map.width(), map.height());
    guidance.check_dims(w, h)?;
    if radius == 0 {
        return Err(Error::InvalidParameter("guided-filter radius must be >= 1".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "guided-filter eps must be positive, got {eps}"
        )));
    }

    let n = w * h;
    let chan: Vec<Vec<f64>> = (0..3).map(|c| guidance.channel(c)).collect();
    let mean_i: Vec<Vec<f64>> = chan.iter().map(|c| box_mean(c, w, h, radius)).collect();
    let mean_p = box_mean(map.data(), w, h, radius);

    // Second moments: the six unique entries of I I^T plus the I p products.
    let mut mean_ii = Vec::with_capacity(6);
    for c in 0..3 {
        for d in c..3 {
            let prod: Vec<f64> = (0..n).map(|i| chan[c][i] * chan[d][i]).collect();
            mean_ii.push(box_mean(&prod, w, h, radius));
        }
    }
    let mean_ip: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            let prod: Vec<f64> = (0..n).map(|i| chan[c][i] * map.data()[i]).collect();
            box_mean(&prod, w, h, radius)
        })
        .collect();
    // (c, d) -> index into the packed upper triangle above.
    let tri = [[0, 1, 2], [1, 3, 4], [2, 4, 5]];

    let mut a = vec![[0.0f64; 3]; n];
    let mut b = vec![0.0f64; n];
    a.par_chunks_mut(w)
        .zip(b.par_chunks_mut(w))
        .enumerate()
        .try_for_each(|(y, (arow, brow))| -> Result<()> {
            for x in 0..w {
                let i = y * w + x;
                let mi = [mean_i[0][i], mean_i[1][i], mean_i[2][i]];
                let mut sigma = [[0.0f64; 3]; 3];
                let mut cov_ip = [0.0f64; 3];
                for c in 0..3 {
                    for d in 0..3 {
                        sigma[c][d] = mean_ii[tri[c][d]][i] - mi[c] * mi[d];
                    }
                    sigma[c][c] += eps;
                    cov_ip[c] = mean_ip[c][i] - mi[c] * mean_p[i];
                }
                let inv = mat3_inverse(&sigma)?;
                let mut ak = [0.0f64; 3];
                for c in 0..3 {
                    ak[c] = inv[c][0] * cov_ip[0] + inv[c][1] * cov_ip[1] + inv[c][2] * cov_ip[2];
                }
                arow[x] = ak;
                brow[x] = mean_p[i] - ak[0] * mi[0] - ak[1] * mi[1] - ak[2] * mi[2];
            }
            Ok(())
        })?;

    let mean_a: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            let ac: Vec<f64> = a.iter().map(|v| v[c]).collect();
            box_mean(&ac, w, h, radius)
        })
        .collect();
    let mean_b = box_mean(&b, w, h, radius);

    Ok(GrayMap::from_fn(w, h, |x, y| {
        let i = y * w + x;
        let p = guidance.pixel(x, y);
        mean_a[0][i] * p[0] + mean_a[1][i] * p[1] + mean_a[2][i] * p[2] + mean_b[i]
    }))
}

/// Overwrite each connected masked region with one value: the median of the
/// unmasked pixels found directly below it, column by column (or above, for
/// columns running off the bottom edge).
///
/// Masked regions are calibration targets standing at a locally constant
/// distance, so a single value per region is the right shape, and the median
/// shrugs off the occasional bad neighbor: a donor pixel whose own estimate
/// is off (a haze line shared between two object colors, say) stays a
/// minority. Regions with no unmasked pixel in any of their columns are left
/// untouched.
pub fn fill_masked_regions(map: &mut GrayMap, mask: &PixelMask) -> Result<()> {
    let (w, h) = (map.width(), map.height());
    mask.check_dims(w, h)?;
    for region in mask_regions(mask) {
        // Per column: the span of this region's pixels, to anchor the
        // donor scans.
        let mut span: std::collections::HashMap<usize, (usize, usize)> = Default::default();
        for &i in &region {
            let (x, y) = (i % w, i / w);
            let e = span.entry(x).or_insert((y, y));
            e.0 = e.0.min(y);
            e.1 = e.1.max(y);
        }
        let mut donors = Vec::new();
        for (&x, &(top, bottom)) in &span {
            let below = (bottom + 1..h).find(|&y| !mask.get(x, y));
            let donor = below.or_else(|| (0..top).rev().find(|&y| !mask.get(x, y)));
            if let Some(y) = donor {
                donors.push(map.get(x, y));
            }
        }
        if donors.is_empty() {
            continue;
        }
        donors.sort_by(|a, b| a.partial_cmp(b).expect("finite transmission values"));
        let mid = donors.len() / 2;
        let fill = if donors.len() % 2 == 1 {
            donors[mid]
        } else {
            0.5 * (donors[mid - 1] + donors[mid])
        };
        for &i in &region {
            map.data_mut()[i] = fill;
        }
    }
    Ok(())
}

/// 8-connected components of the mask's set pixels, as index lists.
fn mask_regions(mask: &PixelMask) -> Vec<Vec<usize>> {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    let mut regions = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for start in 0..w * h {
        if !mask.data()[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut region = Vec::new();
        while let Some(p) = queue.pop_front() {
            region.push(p);
            let (px, py) = (p % w, p / w);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (nx, ny) = (px as isize + dx, py as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.data()[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        regions.push(region);
    }
    regions
}

/// Full transmission chain for one water type: medium compensation,
/// haze-line clustering, lower-bound matting, chart in-filling, and guided
/// filtering, clamped to `[t_floor, 1]`.
pub fn estimate_transmission(
    img: &LinearImage,
    est: &VeilingLightEstimate,
    wt: &WaterType,
    params: &TransmissionParams,
    exclude: Option<&PixelMask>,
) -> Result<TransmissionMap> {
    let dm = mahalanobis_map(img, est)?;
    let guidance = contrast_stretch(img, STRETCH_LOW_PCT, STRETCH_HIGH_PCT)?.image;
    estimate_transmission_guided(img, est, &dm, &guidance, wt, params, exclude)
}

/// [`estimate_transmission`] with the water-type-independent inputs (the
/// Mahalanobis map and the stretched guidance image) precomputed, so the
/// per-type selection loop does not redo them.
pub fn estimate_transmission_guided(
    img: &LinearImage,
    est: &VeilingLightEstimate,
    dm: &GrayMap,
    guidance: &LinearImage,
    wt: &WaterType,
    params: &TransmissionParams,
    exclude: Option<&PixelMask>,
) -> Result<TransmissionMap> {
    let comp = medium_compensate(img, est.color, wt);
    let directions = sphere_directions(params.n_directions)?;
    let clustering = cluster_pixels(&comp, directions, exclude)?;
    let t_init = initial_transmission(&clustering, params.t_floor, params.min_line_size, exclude)?;
    let t_lb = lower_bound(img, est.color, wt)?;
    let mut t = soft_matte(&t_init, &t_lb, dm, est)?;
    // Excluded pixels carry no evidence. Filling them before the filter
    // keeps their garbage from bleeding into the scene; restoring the fill
    // values afterwards removes what the filter dragged across the mask
    // boundary, leaving pure interpolation from the surroundings.
    if let Some(mask) = exclude {
        fill_masked_regions(&mut t, mask)?;
    }
    let radius = params.gf_radius.unwrap_or_else(|| default_gf_radius(img.width()));
    let mut filtered = guided_filter(&t, guidance, radius, params.gf_eps)?;
    if let Some(mask) = exclude {
        for (i, &masked) in mask.data().iter().enumerate() {
            if masked {
                filtered.data_mut()[i] = t.data()[i];
            }
        }
    }
    Ok(TransmissionMap::new(filtered, params.t_floor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wt(beta_br: f64, beta_bg: f64) -> WaterType {
        WaterType::new("test", beta_br, beta_bg).unwrap()
    }

    /// Estimate literal: statistics chosen by the test, ridge covariance.
    fn synthetic_estimate(
        mean: [f64; 3],
        dm_mean: f64,
        dm_std: f64,
        dm_max: f64,
    ) -> VeilingLightEstimate {
        let mut covariance = [[0.0; 3]; 3];
        for c in 0..3 {
            covariance[c][c] = 1e-6;
        }
        VeilingLightEstimate {
            color: mean,
            mask: PixelMask::filled(1, 1, false),
            mean,
            covariance,
            dm_mean,
            dm_std,
            dm_max,
        }
    }

    #[test]
    fn lower_bound_hand_example() {
        let img = LinearImage::constant(1, 1, [0.15, 0.25, 0.4]);
        let lb = lower_bound(&img, [0.3, 0.5, 0.8], &wt(0.4, 0.8)).unwrap();
        // All channel ratios are 0.5; the red exponent 0.4 wins.
        assert_abs_diff_eq!(lb.get(0, 0), 0.757858283255199, epsilon = 1e-15);
    }

    #[test]
    fn lower_bound_edge_cases() {
        let a = [0.3, 0.5, 0.8];
        let w = wt(0.4, 0.8);
        // Water-colored pixel: every base is zero.
        let at_a = lower_bound(&LinearImage::constant(1, 1, a), a, &w).unwrap();
        assert_eq!(at_a.get(0, 0), 0.0);
        // Black object in the blue channel: bound saturates at 1.
        let black = lower_bound(&LinearImage::constant(1, 1, [0.3, 0.5, 0.0]), a, &w).unwrap();
        assert_eq!(black.get(0, 0), 1.0);
        // Brighter than the water everywhere: vacuous bound, clamped to 0.
        let bright = lower_bound(&LinearImage::constant(1, 1, [0.9, 0.9, 0.9]), a, &w).unwrap();
        assert_eq!(bright.get(0, 0), 0.0);
        assert!(lower_bound(&LinearImage::constant(1, 1, a), [0.3, 0.0, 0.8], &w).is_err());
    }

    #[test]
    fn soft_matte_hand_example() {
        let est = synthetic_estimate([0.5; 3], 1.0, 0.5, 3.0);
        let t_init = GrayMap::filled(1, 1, 0.4);
        let t_lb = GrayMap::filled(1, 1, 0.8);
        let dm = GrayMap::filled(1, 1, 2.0);
        let out = soft_matte(&t_init, &t_lb, &dm, &est).unwrap();
        // alpha = (2 - 1.5) / 2 = 0.25, so 0.25 * 0.8 + 0.75 * 0.4.
        assert_abs_diff_eq!(out.get(0, 0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn soft_matte_branches() {
        let est = synthetic_estimate([0.5; 3], 1.0, 0.5, 3.0);
        let t_init = GrayMap::filled(3, 1, 0.4);
        let t_lb = GrayMap::filled(3, 1, 0.8);
        let mut dm = GrayMap::filled(3, 1, 0.0);
        dm.set(1, 0, 4.0); // dm_max + 2 sigma
        dm.set(2, 0, 1.5); // exactly the lower threshold
        let out = soft_matte(&t_init, &t_lb, &dm, &est).unwrap();
        assert_eq!(out.get(0, 0), 0.8, "water-like pixel takes the lower bound");
        assert_eq!(out.get(1, 0), 0.4, "distant pixel keeps the haze-line value");
        assert_eq!(out.get(2, 0), 0.8, "threshold boundary belongs to the first branch");
    }

    #[test]
    fn soft_matte_degenerate_distribution_is_two_way() {
        // dm_max == dm_mean: no blend band exists.
        let est = synthetic_estimate([0.5; 3], 1.0, 0.5, 1.0);
        let t_init = GrayMap::filled(2, 1, 0.4);
        let t_lb = GrayMap::filled(2, 1, 0.8);
        let mut dm = GrayMap::filled(2, 1, 1.2);
        dm.set(1, 0, 1.6);
        let out = soft_matte(&t_init, &t_lb, &dm, &est).unwrap();
        assert_eq!(out.get(0, 0), 0.8);
        assert_eq!(out.get(1, 0), 0.4);
    }

    proptest! {
        #[test]
        fn lower_bound_stays_in_unit_interval(
            pr in 0.0..1.5f64, pg in 0.0..1.5f64, pb in 0.0..1.5f64,
            ar in 0.05..1.0f64, ag in 0.05..1.0f64, ab in 0.05..1.0f64,
            br in 0.05..1.5f64, bg in 0.05..1.5f64,
        ) {
            let img = LinearImage::constant(1, 1, [pr, pg, pb]);
            let lb = lower_bound(&img, [ar, ag, ab], &wt(br, bg)).unwrap();
            prop_assert!((0.0..=1.0).contains(&lb.get(0, 0)));
        }

        #[test]
        fn soft_matte_output_between_operands(
            t_init in 0.05..0.9f64,
            t_lb in 0.0..1.0f64,
            d in 0.0..10.0f64,
            dm_mean in 0.0..3.0f64,
            dm_std in 0.0..2.0f64,
            spread in 0.0..3.0f64,
        ) {
            let est = synthetic_estimate([0.5; 3], dm_mean, dm_std, dm_mean + spread);
            let out = soft_matte(
                &GrayMap::filled(1, 1, t_init),
                &GrayMap::filled(1, 1, t_lb),
                &GrayMap::filled(1, 1, d),
                &est,
            ).unwrap();
            let (lo, hi) = (t_init.min(t_lb), t_init.max(t_lb));
            prop_assert!((lo..=hi).contains(&out.get(0, 0)));
        }
    }

    #[test]
    fn guided_filter_preserves_constant_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let guidance = LinearImage::from_fn(20, 15, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let map = GrayMap::filled(20, 15, 0.37);
        let out = guided_filter(&map, &guidance, 3, 1e-3).unwrap();
        for &v in out.data() {
            assert_abs_diff_eq!(v, 0.37, epsilon = 1e-12);
        }
    }

    #[test]
    fn guided_filter_huge_eps_approaches_double_box_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (w, h, r) = (16, 12, 2);
        let guidance = LinearImage::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let map = GrayMap::from_fn(w, h, |_, _| rng.gen());
        let out = guided_filter(&map, &guidance, r, 1e9).unwrap();
        // With a -> 0 the model degenerates to b = window mean, and the
        // output averages those means over a second window. Reference by
        // direct double loops.
        let naive_mean = |vals: &dyn Fn(usize, usize) -> f64, x: usize, y: usize| {
            let mut sum = 0.0;
            let mut count = 0.0;
            for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    sum += vals(xx, yy);
                    count += 1.0;
                }
            }
            sum / count
        };
        for y in 0..h {
            for x in 0..w {
                let first = |xx: usize, yy: usize| naive_mean(&|u, v| map.get(u, v), xx, yy);
                let expect = naive_mean(&first, x, y);
                assert_abs_diff_eq!(out.get(x, y), expect, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn guided_filter_keeps_exact_values_away_from_edges() {
        // Step in both map and guidance: windows that never cross the step
        // see zero variance, so the model reproduces the constant exactly.
        let (w, h, r) = (24, 10, 3);
        let step = |x: usize| if x < 12 { 0.2 } else { 0.8 };
        let guidance = LinearImage::from_fn(w, h, |x, _| [step(x); 3]);
        let map = GrayMap::from_fn(w, h, |x, _| step(x));
        let out = guided_filter(&map, &guidance, r, 1e-3).unwrap();
        for y in 0..h {
            for x in 0..w {
                let dist_to_step = (x as i64 - 11).min(12 - x as i64).unsigned_abs() as usize;
                if dist_to_step > 2 * r {
                    assert_abs_diff_eq!(out.get(x, y), map.get(x, y), epsilon = 1e-9);
                } else {
                    assert!((0.1..=0.9).contains(&out.get(x, y)));
                }
            }
        }
    }

    /// Direct per-window least squares, solved by Gaussian elimination with
    /// partial pivoting: an independent route to the same model.
    fn reference_guided_filter(
        map: &GrayMap,
        guidance: &LinearImage,
        r: usize,
        eps: f64,
    ) -> GrayMap {
        let (w, h) = (map.width(), map.height());
        let window = |x: usize, y: usize| {
            let mut px = Vec::new();
            for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    px.push((guidance.pixel(xx, yy), map.get(xx, yy)));
                }
            }
            px
        };
        let solve = |mut m: [[f64; 4]; 3]| -> [f64; 3] {
            for col in 0..3 {
                let pivot = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()));
                let pivot = pivot.unwrap();
                m.swap(col, pivot);
                for row in 0..3 {
                    if row != col {
                        let f = m[row][col] / m[col][col];
                        for k in col..4 {
                            m[row][k] -= f * m[col][k];
                        }
                    }
                }
            }
            [m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]]
        };
        let mut coef = vec![([0.0f64; 3], 0.0f64); w * h];
        for y in 0..h {
            for x in 0..w {
                let px = window(x, y);
                let n = px.len() as f64;
                let mut mi = [0.0f64; 3];
                let mut mp = 0.0;
                for (g, p) in &px {
                    for c in 0..3 {
                        mi[c] += g[c];
                    }
                    mp += p;
                }
                for c in 0..3 {
                    mi[c] /= n;
                }
                mp /= n;
                let mut aug = [[0.0f64; 4]; 3];
                for (g, p) in &px {
                    for c in 0..3 {
                        for d in 0..3 {
                            aug[c][d] += (g[c] - mi[c]) * (g[d] - mi[d]) / n;
                        }
                        aug[c][3] += (g[c] - mi[c]) * (p - mp) / n;
                    }
                }
                for c in 0..3 {
                    aug[c][c] += eps;
                }
                let a = solve(aug);
                let b = mp - a[0] * mi[0] - a[1] * mi[1] - a[2] * mi[2];
                coef[y * w + x] = (a, b);
            }
        }
        GrayMap::from_fn(w, h, |x, y| {
            let mut suma = [0.0f64; 3];
            let mut sumb = 0.0;
            let mut count = 0.0;
            for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    let (a, b) = coef[yy * w + xx];
                    for c in 0..3 {
                        suma[c] += a[c];
                    }
                    sumb += b;
                    count += 1.0;
                }
            }
            let g = guidance.pixel(x, y);
            (suma[0] * g[0] + suma[1] * g[1] + suma[2] * g[2] + sumb) / count
        })
    }

    #[test]
    fn guided_filter_matches_direct_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (w, h) = (13, 11);
        let guidance = LinearImage::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let map = GrayMap::from_fn(w, h, |_, _| rng.gen());
        let fast = guided_filter(&map, &guidance, 2, 1e-3).unwrap();
        let slow = reference_guided_filter(&map, &guidance, 2, 1e-3);
        for i in 0..w * h {
            assert_abs_diff_eq!(fast.data()[i], slow.data()[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn guided_filter_rejects_bad_parameters() {
        let guidance = LinearImage::zeros(4, 4);
        let map = GrayMap::filled(4, 4, 0.5);
        assert!(guided_filter(&map, &guidance, 0, 1e-3).is_err());
        assert!(guided_filter(&map, &guidance, 2, 0.0).is_err());
        assert!(guided_filter(&map, &LinearImage::zeros(5, 4), 2, 1e-3).is_err());
    }

    #[test]
    fn fill_takes_the_median_of_donors_below() {
        // One masked block over a row of donors with a single outlier: the
        // median ignores it.
        let mut map = GrayMap::from_fn(5, 4, |x, y| {
            if y < 3 {
                99.0
            } else if x == 2 {
                9.0
            } else {
                2.0
            }
        });
        let mask = PixelMask::from_fn(5, 4, |_, y| y < 3);
        fill_masked_regions(&mut map, &mask).unwrap();
        for y in 0..3 {
            for x in 0..5 {
                assert_eq!(map.get(x, y), 2.0);
            }
        }
        assert_eq!(map.get(2, 3), 9.0);
    }

    #[test]
    fn fill_falls_back_to_donors_above() {
        // Region touches the bottom edge; donors come from the rows above.
        let mut map = GrayMap::from_fn(3, 4, |x, y| {
            if y >= 2 {
                99.0
            } else {
                (x + y) as f64
            }
        });
        let mask = PixelMask::from_fn(3, 4, |_, y| y >= 2);
        fill_masked_regions(&mut map, &mask).unwrap();
        // Donors are row 1: values 1, 2, 3 -> median 2.
        for y in 2..4 {
            for x in 0..3 {
                assert_eq!(map.get(x, y), 2.0);
            }
        }
    }

    #[test]
    fn fill_treats_separate_regions_independently() {
        let mut map = GrayMap::from_fn(7, 3, |x, _| if x < 3 { 1.0 } else { 5.0 });
        let mask = PixelMask::from_fn(7, 3, |x, y| y == 0 && !(2..=4).contains(&x));
        fill_masked_regions(&mut map, &mask).unwrap();
        assert_eq!(map.get(0, 0), 1.0);
        assert_eq!(map.get(1, 0), 1.0);
        assert_eq!(map.get(5, 0), 5.0);
        assert_eq!(map.get(6, 0), 5.0);
    }

    #[test]
    fn fill_leaves_regions_without_donors() {
        let mut map = GrayMap::from_fn(2, 2, |x, y| (x * 2 + y) as f64);
        let mask = PixelMask::filled(2, 2, true);
        let before = map.data().to_vec();
        fill_masked_regions(&mut map, &mask).unwrap();
        assert_eq!(map.data(), &before[..]);
    }

    #[test]
    fn transmission_map_clamps_on_construction() {
        let map = GrayMap::from_vec(3, 1, vec![-0.2, 0.5, 1.7]).unwrap();
        let t = TransmissionMap::new(map, 0.05);
        assert_eq!(t.map.data(), &[0.05, 0.5, 1.0]);
    }

    #[test]
    fn default_radius_scales_with_width() {
        assert_eq!(default_gf_radius(100), 8);
        assert_eq!(default_gf_radius(400), 8);
        assert_eq!(default_gf_radius(1000), 20);
    }

    #[test]
    fn estimate_transmission_constant_distance_is_near_constant() {
        use crate::forward::{synthesize, SyntheticScene};
        let wt = crate::water::builtin_library().get("3C").unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let palette: Vec<[f64; 3]> =
            (0..12).map(|_| [rng.gen::<f64>(), rng.gen(), rng.gen()]).collect();
        let scene = SyntheticScene {
            radiance: LinearImage::from_fn(96, 80, |x, y| {
                palette[(x * 31 + y * 17) % palette.len()]
            }),
            distance: GrayMap::filled(96, 80, 3.0),
            veiling: [0.22, 0.5, 0.8],
            water_type: wt.clone(),
            beta_b: 0.265,
            noise_sigma: 0.0,
            noise_seed: 0,
        };
        let img = synthesize(&scene);
        // No water region exists, so hand the stages a synthetic estimate
        // whose distance statistics push every pixel to the haze-line branch.
        let est = synthetic_estimate(scene.veiling, 1.0, 1.0, 3.0);
        let t = estimate_transmission(&img, &est, &wt, &TransmissionParams::default(), None)
            .unwrap();
        let n = t.map.data().len() as f64;
        let mean = t.map.data().iter().sum::<f64>() / n;
        let var = t.map.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(var.sqrt() < 0.02, "std {} too high for a constant-distance scene", var.sqrt());
        for &v in t.map.data() {
            assert!((0.05..=1.0).contains(&v));
        }
    }

    #[test]
    fn estimate_transmission_orders_two_planes() {
        use crate::forward::{make_test_scene, synthesize, SceneKind};
        let scene = make_test_scene(SceneKind::Planes, 4);
        let img = synthesize(&scene);
        let est = synthetic_estimate(scene.veiling, 1.0, 1.0, 3.0);
        let wt = scene.water_type.clone();
        let t = estimate_transmission(&img, &est, &wt, &TransmissionParams::default(), None)
            .unwrap();
        let zs = scene.distance.data();
        let z_near = zs.iter().cloned().fold(f64::INFINITY, f64::min);
        let (mut near_sum, mut near_n, mut far_sum, mut far_n) = (0.0, 0.0, 0.0, 0.0);
        for (i, &z) in zs.iter().enumerate() {
            if z == z_near {
                near_sum += t.map.data()[i];
                near_n += 1.0;
            } else {
                far_sum += t.map.data()[i];
                far_n += 1.0;
            }
        }
        assert!(
            near_sum / near_n > far_sum / far_n,
            "near plane must transmit more: {} vs {}",
            near_sum / near_n,
            far_sum / far_n
        );
    }
}
