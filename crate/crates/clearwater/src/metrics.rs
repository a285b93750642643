//! Quantitative evaluation: correlation between estimated transmission and
//! ground-truth distance, angular reproduction error of gray chart patches,
//! and a manifest-driven batch harness producing plain-text reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{
    load_gray_text, load_image, load_mask, save_gray_text, save_image, Encoding, GrayMap,
    LinearImage, PixelMask, Rect,
};
use crate::restore::{restore_auto, RestoreOptions};
use crate::transmission::TransmissionMap;
use crate::water::WaterTypeLibrary;

/// Location of one color chart: six gray-patch rectangles, dark to light.
#[derive(Debug, Clone)]
pub struct ChartSpec {
    pub id: String,
    pub patch_rects: Vec<Rect>,
}

impl ChartSpec {
    pub fn new(id: String, patch_rects: Vec<Rect>) -> Result<Self> {
        if patch_rects.len() != 6 {
            return Err(Error::InvalidParameter(format!(
                "chart '{id}' needs exactly 6 patch rectangles, got {}",
                patch_rects.len()
            )));
        }
        Ok(ChartSpec { id, patch_rects })
    }
}

/// Pearson correlation via streaming co-moments (single pass, numerically
/// stable update per element). The result is clamped to `[-1, 1]` to absorb
/// last-ulp overshoot on perfectly linear data.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidParameter(format!(
            "correlation series lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 samples, got {}",
            x.len()
        )));
    }
    let mut n = 0.0f64;
    let (mut mean_x, mut mean_y) = (0.0f64, 0.0f64);
    let (mut m2x, mut m2y, mut cxy) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(y) {
        n += 1.0;
        let dx = a - mean_x;
        mean_x += dx / n;
        m2x += dx * (a - mean_x);
        let dy = b - mean_y;
        mean_y += dy / n;
        m2y += dy * (b - mean_y);
        cxy += dx * (b - mean_y);
    }
    if m2x <= 0.0 || m2y <= 0.0 {
        return Err(Error::UndefinedCorrelation("a series has zero variance".into()));
    }
    Ok((cxy / (m2x.sqrt() * m2y.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation between ground-truth distance and the negative log of the
/// estimated transmission. Pixels outside `valid`, with non-finite distance,
/// or with non-positive transmission are skipped.
pub fn transmission_correlation(
    t: &TransmissionMap,
    z_gt: &GrayMap,
    valid: Option<&PixelMask>,
) -> Result<f64> {
    let (w, h) = (t.map.width(), t.map.height());
    z_gt.check_dims(w, h)?;
    if let Some(m) = valid {
        m.check_dims(w, h)?;
    }
    let mut zs = Vec::new();
    let mut neg_log_t = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if valid.is_some_and(|m| !m.get(x, y)) {
                continue;
            }
            let z = z_gt.get(x, y);
            let tv = t.map.get(x, y);
            if !z.is_finite() || !(tv > 0.0) {
                continue;
            }
            zs.push(z);
            neg_log_t.push(-tv.ln());
        }
    }
    pearson(&zs, &neg_log_t)
}

/// Angle in degrees between a color and the achromatic axis (1,1,1).
pub fn gray_angle_degrees(color: [f64; 3]) -> Result<f64> {
    let norm = (color[0] * color[0] + color[1] * color[1] + color[2] * color[2]).sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroPatchColor);
    }
    let cos = ((color[0] + color[1] + color[2]) / (norm * 3.0f64.sqrt())).clamp(-1.0, 1.0);
    Ok(cos.acos().to_degrees())
}

/// Mean angular deviation of the chart's patches from pure gray, in degrees.
/// Each patch contributes the angle of its mean color.
pub fn angular_error(img: &LinearImage, chart: &ChartSpec) -> Result<f64> {
    let mut sum = 0.0;
    for rect in &chart.patch_rects {
        if !rect.fits(img.width(), img.height()) || rect.area() == 0 {
            return Err(Error::InvalidParameter(format!(
                "chart '{}': patch {rect} outside {}x{} image",
                chart.id,
                img.width(),
                img.height()
            )));
        }
        let mut mean = [0.0f64; 3];
        for y in rect.y..rect.y + rect.h {
            for x in rect.x..rect.x + rect.w {
                let p = img.pixel(x, y);
                for c in 0..3 {
                    mean[c] += p[c];
                }
            }
        }
        let area = rect.area() as f64;
        for c in &mut mean {
            *c /= area;
        }
        sum += gray_angle_degrees(mean)?;
    }
    Ok(sum / chart.patch_rects.len() as f64)
}

/// One line-oriented manifest record: where the image lives and what ground
/// truth accompanies it.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub input: PathBuf,
    pub encoding: Encoding,
    pub distance: Option<PathBuf>,
    pub chart_mask: Option<PathBuf>,
    pub charts: Vec<ChartSpec>,
}

/// Parses manifest text. Records start at `image=<id>` lines; the other
/// keys (`input`, `encoding`, `distance`, `chart_mask`, repeatable
/// `chart=<id>:x,y,w,h;...`) attach to the current record. Relative paths
/// resolve against `base`. Blank lines and `#` comments are ignored.
pub fn parse_manifest(text: &str, base: &Path, src: &Path) -> Result<Vec<ManifestEntry>> {
    let err = |line: usize, msg: String| Error::Parse { path: src.into(), line, msg };
    struct Partial {
        id: String,
        line: usize,
        input: Option<PathBuf>,
        encoding: Encoding,
        distance: Option<PathBuf>,
        chart_mask: Option<PathBuf>,
        charts: Vec<ChartSpec>,
    }
    let finish = |p: Partial| -> Result<ManifestEntry> {
        Ok(ManifestEntry {
            input: p
                .input
                .ok_or_else(|| err(p.line, format!("image '{}' has no input= line", p.id)))?,
            id: p.id,
            encoding: p.encoding,
            distance: p.distance,
            chart_mask: p.chart_mask,
            charts: p.charts,
        })
    };
    let mut entries = Vec::new();
    let mut current: Option<Partial> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected key=value, got '{trimmed}'")))?;
        if key == "image" {
            if let Some(done) = current.take() {
                entries.push(finish(done)?);
            }
            current = Some(Partial {
                id: value.to_string(),
                line,
                input: None,
                encoding: Encoding::Linear16,
                distance: None,
                chart_mask: None,
                charts: Vec::new(),
            });
            continue;
        }
        let entry = current
            .as_mut()
            .ok_or_else(|| err(line, format!("'{key}=' before any image= line")))?;
        match key {
            "input" => entry.input = Some(base.join(value)),
            "encoding" => {
                entry.encoding = value
                    .parse()
                    .map_err(|_| err(line, format!("unknown encoding '{value}'")))?;
            }
            "distance" => entry.distance = Some(base.join(value)),
            "chart_mask" => entry.chart_mask = Some(base.join(value)),
            "chart" => {
                let (id, rects) = value
                    .split_once(':')
                    .ok_or_else(|| err(line, "chart needs '<id>:rects'".into()))?;
                let rects: Vec<Rect> = rects
                    .split(';')
                    .map(Rect::parse)
                    .collect::<Result<_>>()
                    .map_err(|e| err(line, e.to_string()))?;
                let spec =
                    ChartSpec::new(id.to_string(), rects).map_err(|e| err(line, e.to_string()))?;
                entry.charts.push(spec);
            }
            other => return Err(err(line, format!("unknown key '{other}'"))),
        }
    }
    if let Some(done) = current.take() {
        entries.push(finish(done)?);
    }
    Ok(entries)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base, path)
}

/// Angular errors of one chart before and after restoration.
#[derive(Debug, Clone)]
pub struct ChartEval {
    pub id: String,
    pub psi_input: f64,
    pub psi_restored: f64,
}

/// Everything measured for a single manifest entry.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub id: String,
    pub selected: String,
    pub score: f64,
    pub rho: Option<f64>,
    pub charts: Vec<ChartEval>,
}

/// Batch results plus cross-image aggregates.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub images: Vec<ImageEval>,
    pub mean_psi_input: Option<f64>,
    pub mean_psi_restored: Option<f64>,
}

/// Restore every manifest entry and score it against whatever ground truth
/// the entry carries. With `method_output_dir` set, the selected restoration
/// (16-bit linear PNG) and its transmission map (text) are written there.
pub fn evaluate_batch(
    entries: &[ManifestEntry],
    library: &WaterTypeLibrary,
    opts: &RestoreOptions,
    method_output_dir: Option<&Path>,
) -> Result<EvalReport> {
    if let Some(dir) = method_output_dir {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.into(), source })?;
    }
    let mut report = EvalReport::default();
    let mut psi_in = Vec::new();
    let mut psi_out = Vec::new();
    for entry in entries {
        let img = load_image(&entry.input, entry.encoding)?;
        let chart_mask = match &entry.chart_mask {
            Some(p) => {
                let m = load_mask(p)?;
                m.check_dims(img.width(), img.height())?;
                Some(m)
            }
            None => None,
        };
        let result = restore_auto(&img, library, opts, chart_mask.as_ref())?;
        let best = result.selected_candidate();
        let rho = match &entry.distance {
            Some(p) => {
                let z = load_gray_text(p)?;
                z.check_dims(img.width(), img.height())?;
                let valid = PixelMask::from_fn(img.width(), img.height(), |x, y| {
                    !chart_mask.as_ref().is_some_and(|m| m.get(x, y))
                });
                Some(transmission_correlation(&best.transmission, &z, Some(&valid))?)
            }
            None => None,
        };
        let mut charts = Vec::new();
        for spec in &entry.charts {
            let eval = ChartEval {
                id: spec.id.clone(),
                psi_input: angular_error(&img, spec)?,
                psi_restored: angular_error(&best.restored, spec)?,
            };
            psi_in.push(eval.psi_input);
            psi_out.push(eval.psi_restored);
            charts.push(eval);
        }
        if let Some(dir) = method_output_dir {
            save_image(
                &best.restored,
                &dir.join(format!("{}_restored.png", entry.id)),
                Encoding::Linear16,
            )?;
            save_gray_text(
                &best.transmission.map,
                &dir.join(format!("{}_transmission.txt", entry.id)),
            )?;
        }
        report.images.push(ImageEval {
            id: entry.id.clone(),
            selected: best.water_type.name.clone(),
            score: best.gray_world_score,
            rho,
            charts,
        });
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    report.mean_psi_input = mean(&psi_in);
    report.mean_psi_restored = mean(&psi_out);
    Ok(report)
}

/// Plain-text rendering: a correlation table, an angular-error table, and
/// cross-image aggregates, tab-separated.
pub fn report_to_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let opt = |v: Option<f64>, prec: usize| match v {
        Some(v) => format!("{v:.prec$}"),
        None => "-".into(),
    };
    out.push_str("# transmission correlation\nimage\tselected\tscore\trho\n");
    for img in &report.images {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.4}\t{}",
            img.id,
            img.selected,
            img.score,
            opt(img.rho, 4)
        );
    }
    out.push_str("\n# angular reproduction error (degrees)\nimage\tchart\tinput\trestored\n");
    for img in &report.images {
        for chart in &img.charts {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.2}\t{:.2}",
                img.id, chart.id, chart.psi_input, chart.psi_restored
            );
        }
    }
    out.push_str("\n# aggregate\n");
    let _ = writeln!(out, "images\t{}", report.images.len());
    let _ = writeln!(out, "mean_psi_input\t{}", opt(report.mean_psi_input, 2));
    let _ = writeln!(out, "mean_psi_restored\t{}", opt(report.mean_psi_restored, 2));
    out
}
