//! Command-line frontend: restore an underwater photo, synthesize oracle
//! scenes, batch-evaluate against ground truth, or list the water types.
//!
//! Configuration precedence, lowest to highest: built-in defaults, the
//! `CLEARWATER_WATER_TYPES` environment variable, `--config FILE`, then
//! explicit flags. `--print-config` emits the merged result in the same
//! `key=value` format `--config` accepts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use clearwater::config::RunConfig;
use clearwater::forward::{
    boards_mask, chart_placement, make_test_scene_for, observable_distance, synthesize,
    true_transmission, SceneKind,
};
use clearwater::image::{
    load_image, load_mask, save_gray16, save_gray_text, save_image, save_mask, Encoding, GrayMap,
};
use clearwater::metrics::{evaluate_batch, load_manifest, report_to_text};
use clearwater::restore::{restore_auto, RestorationResult};
use clearwater::water::{builtin_blue_attenuation, builtin_library, library_to_text, load_library};
use clearwater::{Error, Result};

#[derive(Parser)]
#[command(
    name = "clearwater",
    version,
    about = "Single underwater image color restoration and transmission estimation"
)]
struct Cli {
    /// Apply key=value settings from this file (see --print-config).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Print the merged configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Option<Command>,
}

/// Flag-level overrides for individual config fields; unset flags leave the
/// config (defaults, environment, file) untouched.
#[derive(Args)]
struct Overrides {
    /// Gradient threshold separating texture from candidate water regions.
    #[arg(long, global = true, value_name = "FLOAT")]
    edge_threshold: Option<f64>,
    /// Smallest acceptable veiling-light region as an image fraction.
    #[arg(long, global = true, value_name = "FLOAT")]
    min_vl_frac: Option<f64>,
    /// Manual veiling-light rectangle "x,y,w,h", or "none" to detect.
    #[arg(long, global = true, value_name = "RECT")]
    veiling_rect: Option<String>,
    /// Lower percentile of the guidance contrast stretch.
    #[arg(long, global = true, value_name = "PCT")]
    stretch_low: Option<f64>,
    /// Upper percentile of the guidance contrast stretch.
    #[arg(long, global = true, value_name = "PCT")]
    stretch_high: Option<f64>,
    /// Number of sphere directions defining the haze lines.
    #[arg(long, global = true, value_name = "N")]
    n_hazelines: Option<usize>,
    /// Lines smaller than this borrow the global radius estimate.
    #[arg(long, global = true, value_name = "N")]
    min_line_size: Option<usize>,
    /// Lowest transmission the estimator will report.
    #[arg(long, global = true, value_name = "FLOAT")]
    t_floor: Option<f64>,
    /// Edge-aware smoothing radius in pixels, or "auto".
    #[arg(long, global = true, value_name = "R")]
    gf_radius: Option<String>,
    /// Edge-aware smoothing regularizer.
    #[arg(long, global = true, value_name = "FLOAT")]
    gf_eps: Option<f64>,
    /// Headroom above 1.0 kept through recovery and white balance.
    #[arg(long, global = true, value_name = "FLOAT")]
    clip_max: Option<f64>,
    /// Water-type library file, or "builtin".
    #[arg(long, global = true, value_name = "FILE")]
    water_types: Option<String>,
    /// Skip selection and restore with this single type, or "none".
    #[arg(long, global = true, value_name = "NAME")]
    force_type: Option<String>,
    /// Seed for scene synthesis.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Sensor noise level for scene synthesis.
    #[arg(long, global = true, value_name = "FLOAT")]
    noise_sigma: Option<f64>,
    /// Water type that scene synthesis attenuates with.
    #[arg(long, global = true, value_name = "NAME")]
    scene_water_type: Option<String>,
    /// Blue attenuation (1/m) for synthesis, or "auto" for the bundled value.
    #[arg(long, global = true, value_name = "FLOAT")]
    beta_b: Option<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(v) = self.edge_threshold {
            cfg.edge_threshold = v;
        }
        if let Some(v) = self.min_vl_frac {
            cfg.min_vl_frac = v;
        }
        if let Some(v) = self.stretch_low {
            cfg.stretch_low = v;
        }
        if let Some(v) = self.stretch_high {
            cfg.stretch_high = v;
        }
        if let Some(v) = self.n_hazelines {
            cfg.n_hazelines = v;
        }
        if let Some(v) = self.min_line_size {
            cfg.min_line_size = v;
        }
        if let Some(v) = self.t_floor {
            cfg.t_floor = v;
        }
        if let Some(v) = self.gf_eps {
            cfg.gf_eps = v;
        }
        if let Some(v) = self.clip_max {
            cfg.clip_max = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.noise_sigma {
            cfg.noise_sigma = v;
        }
        for (key, value) in [
            ("veiling_rect", &self.veiling_rect),
            ("gf_radius", &self.gf_radius),
            ("water_types", &self.water_types),
            ("force_type", &self.force_type),
            ("scene_water_type", &self.scene_water_type),
            ("beta_b", &self.beta_b),
        ] {
            if let Some(v) = value {
                cfg.set(key, v)
                    .map_err(|msg| Error::InvalidParameter(format!("--{}: {msg}", key.replace('_', "-"))))?;
            }
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Restore one image; writes the result and a selection report.
    Restore {
        /// Input image (PNG or TIFF).
        #[arg(long)]
        input: PathBuf,
        /// Pixel encoding of the input.
        #[arg(long, default_value = "linear16")]
        encoding: String,
        /// Where to write the restored image.
        #[arg(long)]
        output: PathBuf,
        /// Pixel encoding of the restored image.
        #[arg(long, default_value = "srgb8")]
        output_encoding: String,
        /// Write the transmission map (.png: 16-bit gray; otherwise text).
        #[arg(long)]
        out_transmission: Option<PathBuf>,
        /// Mask image of pixels (e.g. color charts) excluded from statistics.
        #[arg(long)]
        chart_mask: Option<PathBuf>,
        /// Write the selection report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Render a synthetic scene with known radiance, distance, and water.
    Synthesize {
        /// Scene layout: planes, ramp, or charts.
        #[arg(long)]
        kind: String,
        /// Where to write the rendered image (16-bit linear).
        #[arg(long)]
        out_image: PathBuf,
        /// Write the observable distance map as text (unobservable = nan).
        #[arg(long)]
        out_distance: Option<PathBuf>,
        /// Write the true transmission map (.png: 16-bit gray; else text).
        #[arg(long)]
        out_truth: Option<PathBuf>,
        /// Write the chart-board mask (charts scenes only).
        #[arg(long)]
        out_chart_mask: Option<PathBuf>,
        /// Write a manifest describing the outputs, ready for `evaluate`.
        #[arg(long)]
        out_manifest: Option<PathBuf>,
    },
    /// Restore every manifest entry and score against its ground truth.
    Evaluate {
        /// Manifest listing inputs and ground truth (see README).
        #[arg(long)]
        manifest: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also dump each restored image and transmission map here.
        #[arg(long)]
        method_output_dir: Option<PathBuf>,
    },
    /// Print the active water-type library.
    WaterTypes,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.command.is_none() && !cli.print_config {
        let _ = Cli::command().print_help();
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::default();
    if let Ok(path) = std::env::var("CLEARWATER_WATER_TYPES") {
        cfg.set("water_types", &path)
            .map_err(|msg| Error::InvalidParameter(format!("CLEARWATER_WATER_TYPES: {msg}")))?;
    }
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        cfg.apply_text(&text, path)?;
    }
    cli.overrides.apply(&mut cfg)?;
    cfg.validate()?;
    if cli.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }

    let library = match &cfg.water_types {
        Some(path) => load_library(path)?,
        None => builtin_library(),
    };

    match cli.command.expect("checked in main") {
        Command::Restore {
            input,
            encoding,
            output,
            output_encoding,
            out_transmission,
            chart_mask,
            report,
        } => {
            let enc: Encoding = encoding.parse()?;
            let out_enc: Encoding = output_encoding.parse()?;
            let img = load_image(&input, enc)?;
            let mask = match &chart_mask {
                Some(p) => Some(load_mask(p)?),
                None => None,
            };
            let result = restore_auto(&img, &library, &cfg.restore_options(), mask.as_ref())?;
            let best = result.selected_candidate();
            save_image(&best.restored, &output, out_enc)?;
            if let Some(p) = &out_transmission {
                save_gray(&best.transmission.map, p)?;
            }
            emit(report.as_deref(), &restore_report(&input, &result))
        }
        Command::Synthesize {
            kind,
            out_image,
            out_distance,
            out_truth,
            out_chart_mask,
            out_manifest,
        } => {
            let kind: SceneKind = kind.parse()?;
            let wt = library.get(&cfg.scene_water_type)?.clone();
            let beta_b = match cfg.beta_b {
                Some(b) => b,
                None => builtin_blue_attenuation(&wt.name).ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "no bundled blue attenuation for water type {:?}; pass --beta-b",
                        wt.name
                    ))
                })?,
            };
            let mut scene = make_test_scene_for(kind, cfg.seed, &wt, beta_b);
            scene.noise_sigma = cfg.noise_sigma;
            let img = synthesize(&scene);
            save_image(&img, &out_image, Encoding::Linear16)?;
            if let Some(p) = &out_distance {
                save_gray_text(&observable_distance(&scene), p)?;
            }
            if let Some(p) = &out_truth {
                save_gray(&true_transmission(&scene).map, p)?;
            }
            let charts = (kind == SceneKind::Charts)
                .then(|| chart_placement(img.width(), img.height()));
            if let Some(p) = &out_chart_mask {
                let (_, boards) = charts.as_ref().ok_or_else(|| {
                    Error::InvalidParameter("--out-chart-mask requires --kind charts".into())
                })?;
                save_mask(&boards_mask(img.width(), img.height(), boards), p)?;
            }
            if let Some(p) = &out_manifest {
                let text = manifest_text(
                    p,
                    &out_image,
                    out_distance.as_deref(),
                    out_chart_mask.as_deref(),
                    charts.as_ref().map(|(specs, _)| specs.as_slice()),
                );
                write_text(p, &text)?;
            }
            Ok(())
        }
        Command::Evaluate {
            manifest,
            report,
            method_output_dir,
        } => {
            let entries = load_manifest(&manifest)?;
            let rep = evaluate_batch(
                &entries,
                &library,
                &cfg.restore_options(),
                method_output_dir.as_deref(),
            )?;
            emit(report.as_deref(), &report_to_text(&rep))
        }
        Command::WaterTypes => {
            print!("{}", library_to_text(&library));
            Ok(())
        }
    }
}

/// Write a gray map as 16-bit PNG when the extension asks for an image,
/// otherwise as the exact-valued text format.
fn save_gray(map: &GrayMap, path: &Path) -> Result<()> {
    let is_image = path
        .extension()
        .and_then(|e| e.to_str())
        .map_or(false, |e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("tif") || e.eq_ignore_ascii_case("tiff"));
    if is_image {
        save_gray16(map, path)
    } else {
        save_gray_text(map, path)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn restore_report(input: &Path, result: &RestorationResult) -> String {
    let mut s = String::new();
    let v = result.veiling.color;
    let best = result.selected_candidate();
    let _ = writeln!(s, "input={}", input.display());
    let _ = writeln!(s, "veiling={},{},{}", v[0], v[1], v[2]);
    let _ = writeln!(s, "selected={}", best.water_type.name);
    let _ = writeln!(s, "gray_world_score={}", best.gray_world_score);
    let _ = writeln!(s, "wb_gains={},{},{}", best.wb_gains[0], best.wb_gains[1], best.wb_gains[2]);
    let _ = writeln!(s, "candidates:");
    for c in &result.candidates {
        let _ = writeln!(s, "{}\t{}", c.water_type.name, c.gray_world_score);
    }
    s
}

/// Manifest entry for artifacts this invocation wrote. Paths land relative
/// to the manifest when they sit beneath its directory, verbatim otherwise.
fn manifest_text(
    manifest: &Path,
    image: &Path,
    distance: Option<&Path>,
    chart_mask: Option<&Path>,
    charts: Option<&[clearwater::metrics::ChartSpec]>,
) -> String {
    let base = manifest.parent();
    let rel = |p: &Path| -> String {
        match base.and_then(|b| p.strip_prefix(b).ok()) {
            Some(r) => r.display().to_string(),
            None => p.display().to_string(),
        }
    };
    let id = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into());
    let mut s = String::new();
    let _ = writeln!(s, "image={id}");
    let _ = writeln!(s, "input={}", rel(image));
    let _ = writeln!(s, "encoding=linear16");
    if let Some(d) = distance {
        let _ = writeln!(s, "distance={}", rel(d));
    }
    if let Some(m) = chart_mask {
        let _ = writeln!(s, "chart_mask={}", rel(m));
    }
    for spec in charts.unwrap_or_default() {
        let rects: Vec<String> = spec.patch_rects.iter().map(|r| r.to_string()).collect();
        let _ = writeln!(s, "chart={}:{}", spec.id, rects.join(";"));
    }
    s
}
