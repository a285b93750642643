//! Radiance recovery, global white balance, and the water-type selection
//! loop: every library entry restores the image under its own attenuation
//! ratios, and the candidate whose recovered radiance best satisfies the
//! gray-world assumption wins. Scoring reads the recovery *before* white
//! balance: gray-world gains equalize the masked channel means by
//! construction, so a post-balance score of any candidate that avoids
//! clipping collapses to rounding noise and carries no selection signal.
//! The raw recovery, by contrast, retains the cast a wrong attenuation
//! ratio leaves behind.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{
    contrast_stretch, LinearImage, PixelMask, Rect, STRETCH_HIGH_PCT, STRETCH_LOW_PCT,
};
use crate::transmission::{
    estimate_transmission_guided, TransmissionMap, TransmissionParams,
};
use crate::veiling::{
    estimate_veiling_light, mahalanobis_map, manual_veiling_light, VeilingLightEstimate,
};
use crate::water::{WaterType, WaterTypeLibrary};

/// Knobs for [`restore_auto`].
#[derive(Debug, Clone)]
pub struct RestoreOptions {
    /// Sobel-magnitude threshold separating texture from candidate water.
    pub edge_threshold: f64,
    /// Smallest acceptable veiling-light region, as a fraction of the image.
    pub min_vl_frac: f64,
    /// Take veiling-light statistics from this rectangle instead of
    /// detecting a smooth region.
    pub veiling_rect: Option<Rect>,
    /// Percentiles of the contrast stretch that normalizes the guidance
    /// image for edge-aware smoothing.
    pub stretch_low: f64,
    pub stretch_high: f64,
    pub transmission: TransmissionParams,
    /// Headroom above 1.0 kept through recovery and white balance, so bright
    /// close objects survive until the final display clamp.
    pub clip_max: f64,
    /// Restore with this single water type instead of the whole library.
    pub force_type: Option<String>,
}

impl Default for RestoreOptions {
    fn default() -> Self {
        RestoreOptions {
            edge_threshold: 0.05,
            min_vl_frac: 0.01,
            veiling_rect: None,
            stretch_low: STRETCH_LOW_PCT,
            stretch_high: STRETCH_HIGH_PCT,
            transmission: TransmissionParams::default(),
            clip_max: 1.5,
            force_type: None,
        }
    }
}

/// One water type's restoration attempt.
#[derive(Debug, Clone)]
pub struct RestorationCandidate {
    pub water_type: WaterType,
    /// Restored radiance after white balance.
    pub restored: LinearImage,
    pub transmission: TransmissionMap,
    /// Sum of pairwise channel-mean differences of the recovery before
    /// white balance; lower is better.
    pub gray_world_score: f64,
    /// Identity when the candidate could not be white-balanced.
    pub wb_gains: [f64; 3],
}

/// All candidates plus the index of the winner.
#[derive(Debug, Clone)]
pub struct RestorationResult {
    pub candidates: Vec<RestorationCandidate>,
    pub selected: usize,
    pub veiling: VeilingLightEstimate,
}

impl RestorationResult {
    pub fn selected_candidate(&self) -> &RestorationCandidate {
        &self.candidates[self.selected]
    }
}

/// Invert the attenuation around the veiling light:
/// `J_c = A_c + (I_c - A_c) / t_B^(beta_c/beta_B)`, clamped to
/// `[0, clip_max]`. The blue exponent is 1; red and green divide by the
/// blue-to-c attenuation ratio.
pub fn recover_radiance(
    img: &LinearImage,
    a: [f64; 3],
    t: &TransmissionMap,
    wt: &WaterType,
    clip_max: f64,
) -> LinearImage {
    let exps = [1.0 / wt.beta_br, 1.0 / wt.beta_bg, 1.0];
    LinearImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.pixel(x, y);
        let tb = t.map.get(x, y);
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = (a[c] + (p[c] - a[c]) / tb.powf(exps[c])).clamp(0.0, clip_max);
        }
        out
    })
}

/// White-balanced image plus the gains that produced it.
#[derive(Debug, Clone)]
pub struct WhiteBalanced {
    pub image: LinearImage,
    pub gains: [f64; 3],
}

/// Scale each channel so the channel means over `mask` equalize at their
/// common average, clamping to `[0, clip_max]`.
pub fn white_balance(img: &LinearImage, mask: &PixelMask, clip_max: f64) -> Result<WhiteBalanced> {
    let means = img.channel_means(Some(mask))?;
    if means.iter().any(|&m| m <= 0.0) {
        return Err(Error::ZeroChannelMean);
    }
    let target = (means[0] + means[1] + means[2]) / 3.0;
    let gains = [target / means[0], target / means[1], target / means[2]];
    let image = LinearImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.pixel(x, y);
        [
            (gains[0] * p[0]).clamp(0.0, clip_max),
            (gains[1] * p[1]).clamp(0.0, clip_max),
            (gains[2] * p[2]).clamp(0.0, clip_max),
        ]
    });
    Ok(WhiteBalanced { image, gains })
}

/// Gray-world deviation over `mask`: the sum of pairwise differences of the
/// channel means. Zero for a perfectly gray-balanced region.
pub fn gray_world_score(img: &LinearImage, mask: &PixelMask) -> Result<f64> {
    let m = img.channel_means(Some(mask))?;
    Ok((m[0] - m[1]).abs() + (m[1] - m[2]).abs() + (m[0] - m[2]).abs())
}

/// Restore under every water type in the library and pick the candidate
/// with the lowest gray-world score (ties keep the earliest library entry).
///
/// The veiling light is estimated once (detected, or taken from
/// `veiling_rect`); chart-mask pixels are excluded from every statistic and
/// their transmission is filled in from their surroundings. A candidate
/// whose restoration kills a channel entirely cannot be white-balanced; it
/// keeps its raw recovery and identity gains instead of failing the whole
/// run (its score is enormous anyway — one mean is zero).
pub fn restore_auto(
    img: &LinearImage,
    library: &WaterTypeLibrary,
    opts: &RestoreOptions,
    chart_mask: Option<&PixelMask>,
) -> Result<RestorationResult> {
    if let Some(m) = chart_mask {
        m.check_dims(img.width(), img.height())?;
    }
    let est = match opts.veiling_rect {
        Some(rect) => manual_veiling_light(img, rect)?,
        None => estimate_veiling_light(img, opts.edge_threshold, opts.min_vl_frac, chart_mask)?,
    };
    let dm = mahalanobis_map(img, &est)?;
    let guidance = contrast_stretch(img, opts.stretch_low, opts.stretch_high)?.image;
    let mut stat_mask = est.mask.complement();
    if let Some(m) = chart_mask {
        stat_mask = stat_mask.minus(m)?;
    }

    let forced;
    let types: &[WaterType] = match &opts.force_type {
        Some(name) => {
            forced = [library.get(name)?.clone()];
            &forced
        }
        None => library.types(),
    };

    let candidates: Vec<RestorationCandidate> = types
        .par_iter()
        .map(|wt| -> Result<RestorationCandidate> {
            let t = estimate_transmission_guided(
                img,
                &est,
                &dm,
                &guidance,
                wt,
                &opts.transmission,
                chart_mask,
            )?;
            let recovered = recover_radiance(img, est.color, &t, wt, opts.clip_max);
            let score = gray_world_score(&recovered, &stat_mask)?;
            let (restored, wb_gains) = match white_balance(&recovered, &stat_mask, opts.clip_max)
            {
                Ok(wb) => (wb.image, wb.gains),
                Err(Error::ZeroChannelMean) => (recovered, [1.0, 1.0, 1.0]),
                Err(other) => return Err(other),
            };
            Ok(RestorationCandidate {
                water_type: wt.clone(),
                restored,
                transmission: t,
                gray_world_score: score,
                wb_gains,
            })
        })
        .collect::<Result<_>>()?;

    let mut selected = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.gray_world_score < candidates[selected].gray_world_score {
            selected = i;
        }
    }
    Ok(RestorationResult { candidates, selected, veiling: est })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{make_test_scene, synthesize, true_transmission, SceneKind};
    use crate::image::GrayMap;
    use approx::assert_abs_diff_eq;

    fn wt(beta_br: f64, beta_bg: f64) -> WaterType {
        WaterType::new("test", beta_br, beta_bg).unwrap()
    }

    fn uniform_t(v: f64) -> TransmissionMap {
        TransmissionMap::new(GrayMap::filled(1, 1, v), 0.0)
    }

    #[test]
    fn recovery_inverts_hand_example() {
        let img = LinearImage::constant(
            1,
            1,
            [0.16766764161830636, 0.35352614285189904, 0.3967346701436833],
        );
        let t = uniform_t((-0.5f64).exp());
        let j = recover_radiance(&img, [0.1, 0.3, 0.7], &t, &wt(0.25, 0.8), 1.5);
        let p = j.pixel(0, 0);
        assert_abs_diff_eq!(p[0], 0.6, epsilon = 1e-9);
        assert_abs_diff_eq!(p[1], 0.4, epsilon = 1e-9);
        assert_abs_diff_eq!(p[2], 0.2, epsilon = 1e-9);
    }

    #[test]
    fn recovery_identities() {
        let img = LinearImage::constant(1, 1, [0.3, 0.6, 0.9]);
        let full = recover_radiance(&img, [0.2, 0.2, 0.2], &uniform_t(1.0), &wt(0.5, 0.9), 1.5);
        for c in 0..3 {
            assert_abs_diff_eq!(full.pixel(0, 0)[c], img.pixel(0, 0)[c], epsilon = 1e-15);
        }
        let a = [0.3, 0.6, 0.9];
        let at_a = recover_radiance(&LinearImage::constant(1, 1, a), a, &uniform_t(0.3), &wt(0.5, 0.9), 1.5);
        for c in 0..3 {
            assert_abs_diff_eq!(at_a.pixel(0, 0)[c], a[c], epsilon = 1e-12);
        }
    }

    #[test]
    fn recovery_clamps_to_headroom() {
        // Tiny transmission explodes the offset; the clamp bounds it.
        let img = LinearImage::constant(1, 1, [0.9, 0.9, 0.05]);
        let a = [0.1, 0.1, 0.6];
        let j = recover_radiance(&img, a, &uniform_t(0.05), &wt(0.5, 0.8), 1.5);
        let p = j.pixel(0, 0);
        assert_eq!(p[0], 1.5);
        assert_eq!(p[1], 1.5);
        assert_eq!(p[2], 0.0, "negative offset divides to below zero and clamps");
    }

    #[test]
    fn recovery_round_trips_synthetic_planes() {
        let scene = make_test_scene(SceneKind::Planes, 5);
        let img = synthesize(&scene);
        let t = true_transmission(&scene);
        let j = recover_radiance(&img, scene.veiling, &t, &scene.water_type, 1.5);
        for (a, b) in j.data().iter().zip(scene.radiance.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn white_balance_hand_gains() {
        let img = LinearImage::constant(4, 4, [0.2, 0.4, 0.6]);
        let mask = PixelMask::filled(4, 4, true);
        let wb = white_balance(&img, &mask, 1.5).unwrap();
        assert_abs_diff_eq!(wb.gains[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(wb.gains[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(wb.gains[2], 2.0 / 3.0, epsilon = 1e-15);
        for c in 0..3 {
            assert_abs_diff_eq!(wb.image.pixel(2, 2)[c], 0.4, epsilon = 1e-15);
        }
    }

    #[test]
    fn white_balance_equalizes_channel_means() {
        let img = LinearImage::from_fn(16, 16, |x, y| {
            let v = ((x * 13 + y * 7) % 10) as f64 / 30.0 + 0.2;
            [v, 1.3 * v.min(0.38), 0.7 * v]
        });
        let mask = PixelMask::from_fn(16, 16, |x, _| x % 2 == 0);
        let wb = white_balance(&img, &mask, 1.5).unwrap();
        let means = wb.image.channel_means(Some(&mask)).unwrap();
        let target = (means[0] + means[1] + means[2]) / 3.0;
        for m in means {
            assert!(((m - target) / target).abs() < 1e-9, "means {means:?} not equalized");
        }
    }

    #[test]
    fn white_balance_rejects_dead_channels() {
        let img = LinearImage::constant(4, 4, [0.0, 0.5, 0.5]);
        let mask = PixelMask::filled(4, 4, true);
        assert!(matches!(white_balance(&img, &mask, 1.5), Err(Error::ZeroChannelMean)));
        let empty = PixelMask::filled(4, 4, false);
        assert!(white_balance(&LinearImage::constant(4, 4, [0.5; 3]), &empty, 1.5).is_err());
    }

    #[test]
    fn score_sums_pairwise_mean_differences() {
        let img = LinearImage::constant(3, 3, [0.5, 0.5, 0.7]);
        let mask = PixelMask::filled(3, 3, true);
        assert_abs_diff_eq!(gray_world_score(&img, &mask).unwrap(), 0.4, epsilon = 1e-15);
        let gray = LinearImage::constant(3, 3, [0.42; 3]);
        assert_eq!(gray_world_score(&gray, &mask).unwrap(), 0.0);
    }

    #[test]
    fn forced_and_single_type_runs_produce_one_candidate() {
        let scene = make_test_scene(SceneKind::Charts, 2);
        let img = synthesize(&scene);
        let lib = crate::water::builtin_library();
        let opts = RestoreOptions {
            force_type: Some("5C".into()),
            ..RestoreOptions::default()
        };
        let result = restore_auto(&img, &lib, &opts, None).unwrap();
        assert_eq!(result.candidates.len(), 1);
        assert_eq!(result.selected, 0);
        assert_eq!(result.candidates[0].water_type.name, "5C");

        let missing = RestoreOptions {
            force_type: Some("4Z".into()),
            ..RestoreOptions::default()
        };
        assert!(matches!(
            restore_auto(&img, &lib, &missing, None),
            Err(Error::UnknownWaterType(_))
        ));

        let single = WaterTypeLibrary::new(vec![wt(0.68, 1.13)]).unwrap();
        let result = restore_auto(&img, &single, &RestoreOptions::default(), None).unwrap();
        assert_eq!(result.candidates.len(), 1);
        assert_eq!(result.selected, 0);
    }

    #[test]
    fn selection_recovers_generating_type_on_charts_scene() {
        let scene = make_test_scene(SceneKind::Charts, 7);
        let img = synthesize(&scene);
        // Chart boards are masked out of the statistics, as a real
        // evaluation protocol would feed them.
        let (_, boards) = crate::forward::chart_placement(img.width(), img.height());
        let mask = crate::forward::boards_mask(img.width(), img.height(), &boards);
        let lib = crate::water::builtin_library();
        let result = restore_auto(&img, &lib, &RestoreOptions::default(), Some(&mask)).unwrap();
        assert_eq!(result.candidates.len(), 10);
        let selected = &result.candidates[result.selected];
        assert_eq!(
            selected.water_type.name, "3C",
            "scores: {:?}",
            result
                .candidates
                .iter()
                .map(|c| (c.water_type.name.as_str(), c.gray_world_score))
                .collect::<Vec<_>>()
        );
    }
}
