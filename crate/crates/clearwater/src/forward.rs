//! Forward image-formation model and deterministic test scenes.
//!
//! The simulator renders exactly the model the restoration inverts: per
//! channel, the signal decays exponentially with distance while the veiling
//! light fills in, `I_c = t_c J_c + (1 - t_c) A_c` with
//! `t_c = exp(-beta_c z)`. It is the independent oracle for round-trip,
//! transmission-quality, and type-selection tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{GrayMap, LinearImage, PixelMask, Rect};
use crate::metrics::ChartSpec;
use crate::transmission::TransmissionMap;
use crate::water::{builtin_blue_attenuation, builtin_library, WaterType};

/// Width of generated test scenes.
pub const SCENE_WIDTH: usize = 192;
/// Height of generated test scenes.
pub const SCENE_HEIGHT: usize = 168;
/// Reflectances of the six gray patches on a test chart, dark to light.
pub const CHART_GRAYS: [f64; 6] = [0.04, 0.10, 0.20, 0.35, 0.55, 0.85];

/// Blue transmission below which a distance is treated as unobservable by
/// [`observable_distance`] (stereo reconstruction loses texture there).
const OBSERVABLE_T_MIN: f64 = 0.02;

/// Cell side of the ramp-scene parity mosaic, in pixels.
const MOSAIC_CELL: usize = 6;
/// Colors drawn per luminance class of the parity mosaic.
const MOSAIC_COLORS: usize = 7;

/// Everything needed to render one underwater observation.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// True surface radiance J, linear RGB in [0, 1].
    pub radiance: LinearImage,
    /// Distance from the camera in meters, per pixel.
    pub distance: GrayMap,
    /// Veiling-light color A.
    pub veiling: [f64; 3],
    /// Attenuation ratios of the simulated water body.
    pub water_type: WaterType,
    /// Absolute blue attenuation coefficient, 1/m.
    pub beta_b: f64,
    /// Additive Gaussian noise level in linear units; 0 disables noise.
    pub noise_sigma: f64,
    /// Seed for the noise stream.
    pub noise_seed: u64,
}

/// Scene families produced by [`make_test_scene`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    /// Two fronto-parallel textured planes at distinct distances.
    Planes,
    /// Linear distance ramp under a deep-water band.
    Ramp,
    /// Three gray-patch charts at increasing distances over a ramp.
    Charts,
}

impl SceneKind {
    pub fn name(self) -> &'static str {
        match self {
            SceneKind::Planes => "planes",
            SceneKind::Ramp => "ramp",
            SceneKind::Charts => "charts",
        }
    }
}

impl std::str::FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planes" => Ok(SceneKind::Planes),
            "ramp" => Ok(SceneKind::Ramp),
            "charts" => Ok(SceneKind::Charts),
            other => Err(Error::InvalidParameter(format!(
                "unknown scene kind '{other}' (expected planes, ramp, or charts)"
            ))),
        }
    }
}

impl std::fmt::Display for SceneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-channel attenuation coefficients implied by the ratios and `beta_b`.
pub fn channel_betas(wt: &WaterType, beta_b: f64) -> [f64; 3] {
    [beta_b / wt.beta_br, beta_b / wt.beta_bg, beta_b]
}

/// Render the observation: exponential decay toward the veiling light plus
/// optional sensor noise, clamped to the displayable range.
pub fn synthesize(scene: &SyntheticScene) -> LinearImage {
    let betas = channel_betas(&scene.water_type, scene.beta_b);
    let mut img = LinearImage::from_fn(scene.radiance.width(), scene.radiance.height(), |x, y| {
        let j = scene.radiance.pixel(x, y);
        let z = scene.distance.get(x, y);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let t = (-betas[c] * z).exp();
            out[c] = t * j[c] + (1.0 - t) * scene.veiling[c];
        }
        out
    });
    if scene.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.noise_seed);
        let normal = Normal::new(0.0, scene.noise_sigma).expect("finite positive sigma");
        for v in img.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// Ground-truth blue transmission of the scene.
pub fn true_transmission(scene: &SyntheticScene) -> TransmissionMap {
    let map = GrayMap::from_fn(scene.distance.width(), scene.distance.height(), |x, y| {
        (-scene.beta_b * scene.distance.get(x, y)).exp()
    });
    // Floor 0 keeps the true values untouched; deep water really is opaque.
    TransmissionMap::new(map, 0.0)
}

/// Distances as a stereo rig would see them: `NaN` where the water has
/// swallowed nearly all signal and matching would fail.
pub fn observable_distance(scene: &SyntheticScene) -> GrayMap {
    GrayMap::from_fn(scene.distance.width(), scene.distance.height(), |x, y| {
        let z = scene.distance.get(x, y);
        if (-scene.beta_b * z).exp() >= OBSERVABLE_T_MIN {
            z
        } else {
            f64::NAN
        }
    })
}

/// Ambient light color for a water body: spectral attenuation over an
/// effective path chosen so the strongest and weakest channels differ by a
/// fixed contrast, normalized to a 0.8 peak.
pub fn veiling_for(wt: &WaterType, beta_b: f64) -> [f64; 3] {
    let betas = channel_betas(wt, beta_b);
    let beta_min = betas[0].min(betas[1]).min(betas[2]);
    // Red always attenuates fastest in the builtin library, giving a
    // positive spread; the 2.2 contrast makes distinctly colored water.
    let path = 2.2 / (betas[0] - beta_min);
    let raw = [
        (-betas[0] * path).exp(),
        (-betas[1] * path).exp(),
        (-betas[2] * path).exp(),
    ];
    let peak = raw[0].max(raw[1]).max(raw[2]);
    [0.8 * raw[0] / peak, 0.8 * raw[1] / peak, 0.8 * raw[2] / peak]
}

/// Fractions of the near-to-far span where the three chart boards stand.
/// The last stays short of 1.0 so even the farthest board keeps scene rows
/// below it — transmission in-filling needs a real neighbor underneath.
const CHART_DEPTH_FRACTIONS: [f64; 3] = [0.55, 0.775, 0.94];

/// Board and patch geometry for the three charts of a "charts" scene, as
/// placed by [`make_test_scene_for`]. Returned separately so evaluation
/// code can locate the patches without carrying extra scene state.
pub fn chart_placement(width: usize, height: usize) -> (Vec<ChartSpec>, Vec<Rect>) {
    const BOARD_W: usize = 44;
    const BOARD_H: usize = 30;
    const PATCH: usize = 12;
    const BORDER: usize = 2;
    let band_end = height / 5;
    let gap = (width - 3 * BOARD_W) / 4;
    let mut specs = Vec::new();
    let mut boards = Vec::new();
    for (k, frac) in CHART_DEPTH_FRACTIONS.into_iter().enumerate() {
        // Bottom row of the board sits where the background ramp reaches the
        // same distance, as if the chart were resting against the slope.
        let y_bottom = band_end + (frac * (height - 1 - band_end) as f64).round() as usize;
        let board = Rect::new(gap + k * (BOARD_W + gap), y_bottom + 1 - BOARD_H, BOARD_W, BOARD_H);
        let mut rects = Vec::with_capacity(6);
        for row in 0..2 {
            for col in 0..3 {
                // Patch interiors inset by 2 px to stay clear of bleed.
                rects.push(Rect::new(
                    board.x + BORDER + col * (PATCH + BORDER) + 2,
                    board.y + BORDER + row * (PATCH + BORDER) + 2,
                    PATCH - 4,
                    PATCH - 4,
                ));
            }
        }
        specs.push(ChartSpec::new(format!("chart{k}"), rects).expect("six in-bounds patches"));
        boards.push(board);
    }
    (specs, boards)
}

/// Farthest chart distance for a water body: red optical depth 1.6, deep
/// enough to degrade colors visibly without losing the signal entirely.
pub fn charts_far_distance(wt: &WaterType, beta_b: f64) -> f64 {
    1.6 * wt.beta_br / beta_b
}

/// Nearest scene distance of a "charts" scene: blue transmission exactly at
/// the initial-estimate cap, so the estimator's assumption that the closest
/// content sits at the cap holds by construction.
pub fn charts_near_distance(beta_b: f64) -> f64 {
    -crate::hazelines::INITIAL_TRANSMISSION_CAP.ln() / beta_b
}

/// The distance each chart board stands at, nearest first.
pub fn chart_distances(wt: &WaterType, beta_b: f64) -> [f64; 3] {
    let z_near = charts_near_distance(beta_b);
    let z_far = charts_far_distance(wt, beta_b);
    let mut z = [0.0; 3];
    for (k, frac) in CHART_DEPTH_FRACTIONS.into_iter().enumerate() {
        z[k] = z_near + frac * (z_far - z_near);
    }
    z
}

fn ramp_distance(y: usize, band_end: usize, height: usize, z_near: f64, z_far: f64) -> f64 {
    let rel = (y - band_end) as f64 / (height - 1 - band_end) as f64;
    z_near + rel * (z_far - z_near)
}

/// Deterministic scene for a given water body and absolute blue attenuation.
pub fn make_test_scene_for(
    kind: SceneKind,
    seed: u64,
    wt: &WaterType,
    beta_b: f64,
) -> SyntheticScene {
    let (w, h) = (SCENE_WIDTH, SCENE_HEIGHT);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let band_end = h / 5;
    let z_water = 12.0 / beta_b;
    let veiling = veiling_for(wt, beta_b);

    let mut radiance = match kind {
        // Parity mosaic: flat cells alternating between a dark and a bright
        // luminance class. The guaranteed luminance gap keeps every cell
        // border above the default edge threshold at any observable
        // distance, so the water band stays the largest smooth region no
        // matter how deep the ramp runs.
        SceneKind::Ramp => {
            let dark: Vec<[f64; 3]> = (0..MOSAIC_COLORS)
                .map(|_| {
                    let target = rng.gen_range(0.08..0.22);
                    color_with_luminance(&mut rng, 0.15, target)
                })
                .collect();
            let bright: Vec<[f64; 3]> = (0..MOSAIC_COLORS)
                .map(|_| {
                    let target = rng.gen_range(0.70..0.92);
                    color_with_luminance(&mut rng, 0.60, target)
                })
                .collect();
            let cells_w = (w + MOSAIC_CELL - 1) / MOSAIC_CELL;
            let cells_h = (h + MOSAIC_CELL - 1) / MOSAIC_CELL;
            let picks: Vec<usize> = (0..cells_w * cells_h)
                .map(|_| rng.gen_range(0..MOSAIC_COLORS))
                .collect();
            LinearImage::from_fn(w, h, |x, y| {
                let (cx, cy) = (x / MOSAIC_CELL, y / MOSAIC_CELL);
                let color = picks[cy * cells_w + cx];
                if (cx + cy) % 2 == 0 {
                    dark[color]
                } else {
                    bright[color]
                }
            })
        }
        _ => {
            let mut palette: Vec<[f64; 3]> = (0..14)
                .map(|_| {
                    [
                        rng.gen_range(0.05..0.95),
                        rng.gen_range(0.05..0.95),
                        rng.gen_range(0.05..0.95),
                    ]
                })
                .collect();
            if kind == SceneKind::Charts {
                // Near-gray tints of the patch reflectances populate the
                // gray haze lines at many distances.
                for g in CHART_GRAYS {
                    let tint = [
                        g * rng.gen_range(0.94..1.06),
                        g * rng.gen_range(0.94..1.06),
                        g * rng.gen_range(0.94..1.06),
                    ];
                    palette.push(tint);
                }
            }
            balance_palette(&mut palette);
            LinearImage::from_fn(w, h, |_, _| palette[rng.gen_range(0..palette.len())])
        }
    };
    let distance = match kind {
        SceneKind::Planes => GrayMap::from_fn(w, h, |x, _| if x < w / 2 { 1.0 } else { 5.0 }),
        SceneKind::Ramp => GrayMap::from_fn(w, h, |_, y| {
            if y < band_end {
                z_water
            } else {
                ramp_distance(y, band_end, h, 0.5, 10.0)
            }
        }),
        SceneKind::Charts => {
            let z_far = charts_far_distance(wt, beta_b);
            let z_near = charts_near_distance(beta_b);
            let chart_z = chart_distances(wt, beta_b);
            let mut dist = GrayMap::from_fn(w, h, |_, y| {
                if y < band_end {
                    z_water
                } else {
                    ramp_distance(y, band_end, h, z_near, z_far)
                }
            });
            let (specs, boards) = chart_placement(w, h);
            for (k, board) in boards.iter().enumerate() {
                let z = chart_z[k];
                for y in board.y..board.y + board.h {
                    for x in board.x..board.x + board.w {
                        radiance.set_pixel(x, y, [0.9, 0.9, 0.9]);
                        dist.set(x, y, z);
                    }
                }
                for (i, rect) in specs[k].patch_rects.iter().enumerate() {
                    // Painted 2 px beyond the measurement rect to restore the
                    // full patch the rect was inset from.
                    let g = CHART_GRAYS[i];
                    for y in rect.y - 2..rect.y + rect.h + 2 {
                        for x in rect.x - 2..rect.x + rect.w + 2 {
                            radiance.set_pixel(x, y, [g, g, g]);
                        }
                    }
                }
            }
            dist
        }
    };

    SyntheticScene {
        radiance,
        distance,
        veiling,
        water_type: wt.clone(),
        beta_b,
        noise_sigma: 0.0,
        noise_seed: seed,
    }
}

/// Deterministic scene with per-kind default water: coastal 3C ratios, the
/// tabulated blue attenuation for ramps and charts, and a stronger 0.45/m
/// for the plane pair so the two distances separate clearly.
pub fn make_test_scene(kind: SceneKind, seed: u64) -> SyntheticScene {
    let wt = builtin_library().get("3C").expect("3C is builtin").clone();
    let beta_b = match kind {
        SceneKind::Planes => 0.45,
        _ => builtin_blue_attenuation("3C").expect("3C is builtin"),
    };
    make_test_scene_for(kind, seed, &wt, beta_b)
}

/// Union mask of the chart boards of a charts scene (the regions an
/// evaluation harness excludes from statistics).
pub fn boards_mask(width: usize, height: usize, boards: &[Rect]) -> PixelMask {
    PixelMask::from_fn(width, height, |x, y| boards.iter().any(|b| b.contains(x, y)))
}

/// Random hue rescaled to a target Rec. 709 luminance, redrawn until the
/// rescale keeps every channel at or below 0.98.
fn color_with_luminance(rng: &mut ChaCha8Rng, floor: f64, target: f64) -> [f64; 3] {
    loop {
        let u = [
            rng.gen_range(floor..1.0),
            rng.gen_range(floor..1.0),
            rng.gen_range(floor..1.0),
        ];
        let lum = 0.2126 * u[0] + 0.7152 * u[1] + 0.0722 * u[2];
        let scale = target / lum;
        if scale * u.iter().cloned().fold(0.0, f64::max) <= 0.98 {
            return [scale * u[0], scale * u[1], scale * u[2]];
        }
    }
}

/// Rescale palette channels so the palette-wide channel means are equal:
/// scenes built from it satisfy the gray-world assumption by construction.
fn balance_palette(palette: &mut [[f64; 3]]) {
    let n = palette.len() as f64;
    let mut means = [0.0f64; 3];
    for color in palette.iter() {
        for c in 0..3 {
            means[c] += color[c] / n;
        }
    }
    let target = (means[0] + means[1] + means[2]) / 3.0;
    for color in palette.iter_mut() {
        for c in 0..3 {
            color[c] = (color[c] * target / means[c]).clamp(0.02, 0.98);
        }
    }
}
