//! Haze-line clustering of medium-compensated pixels.
//!
//! After subtracting the veiling light and compensating for per-channel
//! attenuation differences, pixels that share a surface color line up along
//! rays through the origin. Grouping pixels by ray direction and comparing
//! each pixel's distance from the origin to the farthest member of its group
//! yields a per-pixel transmission estimate: the farthest member is assumed
//! to be the least attenuated view of that color.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{percentile, GrayMap, LinearImage, PixelMask};
use crate::water::WaterType;

/// Transmission assigned to the brightest member of each line. Scene points
/// are assumed to be at least slightly attenuated, never pristine.
pub const INITIAL_TRANSMISSION_CAP: f64 = 0.9;

/// Veiling-light-subtracted image with per-channel attenuation differences
/// compensated away. Values are signed; the blue channel keeps its raw
/// offset from the veiling light while red and green are raised to the
/// blue-to-red and blue-to-green attenuation ratios:
///
/// ```text
/// comp_c = sign(I_c - A_c) * |I_c - A_c|^(beta_B / beta_c)
/// ```
///
/// This makes all three channels decay with the *blue* transmission, so the
/// compensated pixel of a surface seen through water is the compensated
/// surface color scaled by a single scalar.
pub struct CompensatedImage {
    pub image: LinearImage,
}

/// Exponents applied per channel by [`medium_compensate`]: blue-to-red
/// ratio, blue-to-green ratio, and 1 for blue itself.
pub fn compensation_exponents(water: &WaterType) -> [f64; 3] {
    [water.beta_br, water.beta_bg, 1.0]
}

/// Subtract the veiling light and equalize per-channel attenuation.
pub fn medium_compensate(
    img: &LinearImage,
    veiling_color: [f64; 3],
    water: &WaterType,
) -> CompensatedImage {
    let exps = compensation_exponents(water);
    let image = LinearImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.pixel(x, y);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let d = p[c] - veiling_color[c];
            out[c] = d.signum() * d.abs().powf(exps[c]);
        }
        out
    });
    CompensatedImage { image }
}

/// `n` directions spread over the unit sphere by a Fibonacci midpoint
/// lattice. `n == 2` degenerates to the two poles; fewer than two directions
/// cannot partition signed colors and is rejected.
pub fn sphere_directions(n: usize) -> Result<Vec<[f64; 3]>> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 sphere directions, got {n}"
        )));
    }
    if n == 2 {
        return Ok(vec![[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]);
    }
    let golden_angle = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    let mut dirs = Vec::with_capacity(n);
    for i in 0..n {
        // Midpoint offsets keep the first and last points off the poles.
        let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
        let r = (1.0 - z * z).max(0.0).sqrt();
        let phi = golden_angle * i as f64;
        dirs.push([r * phi.cos(), r * phi.sin(), z]);
    }
    Ok(dirs)
}

/// Pixels grouped into haze lines, with per-line statistics.
pub struct HazeLineClustering {
    pub directions: Vec<[f64; 3]>,
    /// Index into `directions` for every pixel, row-major.
    pub assignment: Vec<u32>,
    /// Distance of each compensated pixel from the origin.
    pub radius: GrayMap,
    /// Largest radius per line, over pixels not excluded from statistics.
    pub line_rmax: Vec<f64>,
    /// Member count per line, over pixels not excluded from statistics.
    pub line_size: Vec<usize>,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Assign every compensated pixel to the direction with the largest dot
/// product (ties keep the earliest direction; zero pixels go to line 0).
/// Pixels under `exclude` still get an assignment and radius but do not
/// contribute to line sizes or maxima.
pub fn cluster_pixels(
    comp: &CompensatedImage,
    directions: Vec<[f64; 3]>,
    exclude: Option<&PixelMask>,
) -> Result<HazeLineClustering> {
    let img = &comp.image;
    if directions.is_empty() {
        return Err(Error::InvalidParameter("no haze-line directions".into()));
    }
    if let Some(m) = exclude {
        m.check_dims(img.width(), img.height())?;
    }
    let (w, h) = (img.width(), img.height());
    let mut assignment = vec![0u32; w * h];
    let mut radius = vec![0.0f64; w * h];

    assignment
        .par_chunks_mut(w)
        .zip(radius.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (arow, rrow))| {
            for x in 0..w {
                let p = img.pixel(x, y);
                rrow[x] = dot(p, p).sqrt();
                let mut best = 0usize;
                let mut best_dot = f64::NEG_INFINITY;
                for (k, d) in directions.iter().enumerate() {
                    let s = dot(p, *d);
                    if s > best_dot {
                        best_dot = s;
                        best = k;
                    }
                }
                arow[x] = best as u32;
            }
        });

    let mut line_rmax = vec![0.0f64; directions.len()];
    let mut line_size = vec![0usize; directions.len()];
    for y in 0..h {
        for x in 0..w {
            if exclude.is_some_and(|m| m.get(x, y)) {
                continue;
            }
            let i = y * w + x;
            let line = assignment[i] as usize;
            line_size[line] += 1;
            if radius[i] > line_rmax[line] {
                line_rmax[line] = radius[i];
            }
        }
    }

    Ok(HazeLineClustering {
        directions,
        assignment,
        radius: GrayMap::from_vec(w, h, radius).expect("radius buffer sized to image"),
        line_rmax,
        line_size,
    })
}

/// Per-pixel transmission from line geometry: the farthest pixel on a line
/// is taken as unattenuated up to the fixed cap, and every other member
/// scales down proportionally to its radius.
///
/// Lines with fewer than `min_line_size` members carry too little evidence
/// to define their own maximum; their pixels are normalized against the
/// 99th-percentile radius of the whole image instead. Results are clamped
/// to `[t_floor, cap]`.
pub fn initial_transmission(
    clustering: &HazeLineClustering,
    t_floor: f64,
    min_line_size: usize,
    exclude: Option<&PixelMask>,
) -> Result<GrayMap> {
    if !(0.0..=INITIAL_TRANSMISSION_CAP).contains(&t_floor) {
        return Err(Error::InvalidParameter(format!(
            "transmission floor {t_floor} outside [0, {INITIAL_TRANSMISSION_CAP}]"
        )));
    }
    let radius = &clustering.radius;
    let (w, h) = (radius.width(), radius.height());
    let included: Vec<f64> = match exclude {
        None => radius.data().to_vec(),
        Some(m) => {
            m.check_dims(w, h)?;
            radius
                .data()
                .iter()
                .zip(m.data())
                .filter(|(_, &e)| !e)
                .map(|(&r, _)| r)
                .collect()
        }
    };
    let global_rmax = if included.is_empty() {
        0.0
    } else {
        percentile(&included, 99.0)?
    };

    Ok(GrayMap::from_fn(w, h, |x, y| {
        let line = clustering.assignment[y * w + x] as usize;
        let rmax = if clustering.line_size[line] >= min_line_size {
            clustering.line_rmax[line]
        } else {
            global_rmax
        };
        if rmax <= 0.0 {
            return t_floor;
        }
        (INITIAL_TRANSMISSION_CAP * radius.get(x, y) / rmax)
            .clamp(t_floor, INITIAL_TRANSMISSION_CAP)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn water(beta_br: f64, beta_bg: f64) -> WaterType {
        WaterType::new("test", beta_br, beta_bg).unwrap()
    }

    #[test]
    fn compensation_hand_example() {
        // Offsets (-0.25, 0.04, 0.5) under exponents (0.5, 2, 1).
        let a = [0.5, 0.5, 0.4];
        let img = LinearImage::constant(1, 1, [0.25, 0.54, 0.9]);
        let comp = medium_compensate(&img, a, &water(0.5, 2.0));
        let p = comp.image.pixel(0, 0);
        assert_abs_diff_eq!(p[0], -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.0016, epsilon = 1e-15);
        assert_abs_diff_eq!(p[2], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn compensation_collapses_attenuation_to_blue_scalar() {
        // Build an observation from a surface color, veiling light, and blue
        // transmission; its compensated value must equal the compensated
        // surface color scaled by exactly that blue transmission.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let wt = water(0.4, 0.7);
        for _ in 0..200 {
            let a = [0.3 + 0.5 * rng.gen::<f64>(), 0.4 + 0.4 * rng.gen::<f64>(), 0.5 + 0.4 * rng.gen::<f64>()];
            let j = [rng.gen(), rng.gen(), rng.gen::<f64>()];
            let tb: f64 = 0.05 + 0.9 * rng.gen::<f64>();
            let mut obs = [0.0; 3];
            let exps = compensation_exponents(&wt);
            for c in 0..3 {
                obs[c] = a[c] + tb.powf(1.0 / exps[c]) * (j[c] - a[c]);
            }
            let comp_obs = medium_compensate(&LinearImage::constant(1, 1, obs), a, &wt);
            let comp_j = medium_compensate(&LinearImage::constant(1, 1, j), a, &wt);
            for c in 0..3 {
                assert_abs_diff_eq!(
                    comp_obs.image.pixel(0, 0)[c],
                    tb * comp_j.image.pixel(0, 0)[c],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn directions_are_unit_and_well_separated() {
        let dirs = sphere_directions(500).unwrap();
        assert_eq!(dirs.len(), 500);
        for d in &dirs {
            assert_abs_diff_eq!(dot(*d, *d).sqrt(), 1.0, epsilon = 1e-12);
        }
        let mut min_angle = f64::INFINITY;
        for i in 0..dirs.len() {
            for j in (i + 1)..dirs.len() {
                let ang = dot(dirs[i], dirs[j]).clamp(-1.0, 1.0).acos().to_degrees();
                min_angle = min_angle.min(ang);
            }
        }
        assert!(min_angle > 5.0, "closest pair only {min_angle} degrees apart");
    }

    #[test]
    fn two_directions_are_the_poles() {
        assert_eq!(sphere_directions(2).unwrap(), vec![[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]);
        assert!(sphere_directions(1).is_err());
        assert!(sphere_directions(0).is_err());
    }

    #[test]
    fn directions_cover_both_hemispheres() {
        let dirs = sphere_directions(101).unwrap();
        let top = dirs.iter().filter(|d| d[2] > 0.0).count();
        let bottom = dirs.iter().filter(|d| d[2] < 0.0).count();
        assert!(top >= 45 && bottom >= 45, "split {top}/{bottom}");
    }

    fn compensated_from(pixels: Vec<[f64; 3]>, w: usize, h: usize) -> CompensatedImage {
        let data = pixels.into_iter().flatten().collect();
        CompensatedImage { image: LinearImage::from_vec(w, h, data).unwrap() }
    }

    #[test]
    fn assignment_maximizes_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dirs = sphere_directions(50).unwrap();
        let pixels: Vec<[f64; 3]> = (0..64)
            .map(|_| [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5])
            .collect();
        let comp = compensated_from(pixels.clone(), 8, 8);
        let cl = cluster_pixels(&comp, dirs.clone(), None).unwrap();
        for (i, p) in pixels.iter().enumerate() {
            let assigned = dot(*p, dirs[cl.assignment[i] as usize]);
            for d in &dirs {
                assert!(dot(*p, *d) <= assigned + 1e-15);
            }
        }
    }

    #[test]
    fn ties_and_zero_pixels_take_the_first_line() {
        let d = [0.0, 0.0, 1.0];
        let comp = compensated_from(vec![[0.0, 0.0, 0.5], [0.0, 0.0, 0.0]], 2, 1);
        let cl = cluster_pixels(&comp, vec![d, d], None).unwrap();
        assert_eq!(cl.assignment, vec![0, 0]);
        assert_eq!(cl.radius.get(0, 0), 0.5);
        assert_eq!(cl.radius.get(1, 0), 0.0);
    }

    #[test]
    fn excluded_pixels_keep_assignment_but_not_statistics() {
        let comp = compensated_from(vec![[0.0, 0.0, 9.0], [0.0, 0.0, 1.0]], 2, 1);
        let exclude = PixelMask::from_vec(2, 1, vec![true, false]).unwrap();
        let cl = cluster_pixels(&comp, sphere_directions(2).unwrap(), Some(&exclude)).unwrap();
        assert_eq!(cl.assignment[0], 0);
        assert_eq!(cl.line_size[0], 1);
        assert_eq!(cl.line_rmax[0], 1.0, "excluded radius 9 must not set the line maximum");
    }

    #[test]
    fn transmission_scales_radii_within_a_line() {
        // Radii 1, 2 and 4 on one line: 0.9 * r / 4.
        let comp = compensated_from(
            vec![[0.0, 0.0, 1.0], [0.0, 0.0, 2.0], [0.0, 0.0, 4.0]],
            3,
            1,
        );
        let cl = cluster_pixels(&comp, sphere_directions(2).unwrap(), None).unwrap();
        let t = initial_transmission(&cl, 0.05, 1, None).unwrap();
        assert_abs_diff_eq!(t.get(0, 0), 0.225, epsilon = 1e-15);
        assert_abs_diff_eq!(t.get(1, 0), 0.45, epsilon = 1e-15);
        assert_abs_diff_eq!(t.get(2, 0), 0.9, epsilon = 1e-15);
    }

    #[test]
    fn small_lines_fall_back_to_global_percentile() {
        // 99 pixels on the +z line with radius 1, one lone pixel on -z with
        // radius 0.5. With min_line_size 2 the lone line is normalized by the
        // global 99th-percentile radius instead of its own maximum.
        let mut pixels = vec![[0.0, 0.0, 1.0]; 99];
        pixels.push([0.0, 0.0, -0.5]);
        let comp = compensated_from(pixels, 10, 10);
        let cl = cluster_pixels(&comp, sphere_directions(2).unwrap(), None).unwrap();
        assert_eq!(cl.line_size[1], 1);
        let t = initial_transmission(&cl, 0.05, 2, None).unwrap();
        let radii: Vec<f64> = cl.radius.data().to_vec();
        let global = percentile(&radii, 99.0).unwrap();
        assert_abs_diff_eq!(t.get(9, 9), (0.9 * 0.5 / global).clamp(0.05, 0.9), epsilon = 1e-15);
        // The big line still normalizes by its own maximum.
        assert_abs_diff_eq!(t.get(0, 0), 0.9, epsilon = 1e-15);
    }

    #[test]
    fn zero_image_gets_floor_everywhere() {
        let comp = compensated_from(vec![[0.0; 3]; 4], 2, 2);
        let cl = cluster_pixels(&comp, sphere_directions(2).unwrap(), None).unwrap();
        let t = initial_transmission(&cl, 0.07, 1, None).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.07));
    }

    #[test]
    fn transmission_respects_floor_and_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pixels: Vec<[f64; 3]> = (0..100)
            .map(|_| [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5])
            .collect();
        let comp = compensated_from(pixels, 10, 10);
        let cl = cluster_pixels(&comp, sphere_directions(20).unwrap(), None).unwrap();
        let t = initial_transmission(&cl, 0.05, 3, None).unwrap();
        for &v in t.data() {
            assert!((0.05..=0.9).contains(&v), "transmission {v} escaped bounds");
        }
        assert!(initial_transmission(&cl, -0.1, 3, None).is_err());
        assert!(initial_transmission(&cl, 0.95, 3, None).is_err());
    }
}
