//! One flat view of every tunable, shared by all subcommands. A config is
//! plain `key=value` text, so the output of `--print-config` can be fed
//! straight back in through `--config`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::Rect;
use crate::restore::RestoreOptions;
use crate::transmission::TransmissionParams;

/// Every knob the pipeline and simulator expose, with its default.
///
/// `Option` fields use a textual sentinel (`auto`, `none`, `builtin`) so a
/// config file can also reset a field back to its automatic behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Gradient threshold separating texture from candidate water regions.
    pub edge_threshold: f64,
    /// Smallest acceptable veiling-light region, as a fraction of the image.
    pub min_vl_frac: f64,
    /// Manual veiling-light rectangle, bypassing detection (`none` = detect).
    pub veiling_rect: Option<Rect>,
    /// Contrast-stretch percentiles used to normalize guidance imagery.
    pub stretch_low: f64,
    pub stretch_high: f64,
    /// Number of sphere directions defining the haze lines.
    pub n_hazelines: usize,
    /// Lines with fewer pixels than this borrow the global radius estimate.
    pub min_line_size: usize,
    /// Lowest transmission the estimator will report.
    pub t_floor: f64,
    /// Edge-aware smoothing radius (`auto` = max(8, width/50)).
    pub gf_radius: Option<usize>,
    /// Edge-aware smoothing regularizer.
    pub gf_eps: f64,
    /// Headroom above 1.0 kept through recovery and white balance.
    pub clip_max: f64,
    /// Water-type library file (`builtin` = the ten bundled types).
    pub water_types: Option<PathBuf>,
    /// Restore with this single type instead of running the selection loop.
    pub force_type: Option<String>,
    /// Seed for scene synthesis.
    pub seed: u64,
    /// Sensor noise level for scene synthesis.
    pub noise_sigma: f64,
    /// Water type that scene synthesis attenuates with.
    pub scene_water_type: String,
    /// Blue attenuation coefficient for synthesis (`auto` = the bundled
    /// value for `scene_water_type`).
    pub beta_b: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TransmissionParams::default();
        let r = RestoreOptions::default();
        RunConfig {
            edge_threshold: r.edge_threshold,
            min_vl_frac: r.min_vl_frac,
            veiling_rect: None,
            stretch_low: r.stretch_low,
            stretch_high: r.stretch_high,
            n_hazelines: t.n_directions,
            min_line_size: t.min_line_size,
            t_floor: t.t_floor,
            gf_radius: None,
            gf_eps: t.gf_eps,
            clip_max: r.clip_max,
            water_types: None,
            force_type: None,
            seed: 0,
            noise_sigma: 0.0,
            scene_water_type: "3C".into(),
            beta_b: None,
        }
    }
}

impl RunConfig {
    /// Serialize as `key=value` lines that [`RunConfig::apply_text`] accepts.
    pub fn to_text(&self) -> String {
        let rect = match self.veiling_rect {
            Some(r) => r.to_string(),
            None => "none".into(),
        };
        let gf_radius = match self.gf_radius {
            Some(r) => r.to_string(),
            None => "auto".into(),
        };
        let water_types = match &self.water_types {
            Some(p) => p.display().to_string(),
            None => "builtin".into(),
        };
        let force_type = self.force_type.clone().unwrap_or_else(|| "none".into());
        let beta_b = match self.beta_b {
            Some(b) => b.to_string(),
            None => "auto".into(),
        };
        format!(
            "# restoration pipeline\n\
             edge_threshold={}\n\
             min_vl_frac={}\n\
             veiling_rect={rect}\n\
             stretch_low={}\n\
             stretch_high={}\n\
             n_hazelines={}\n\
             min_line_size={}\n\
             t_floor={}\n\
             gf_radius={gf_radius}\n\
             gf_eps={}\n\
             clip_max={}\n\
             water_types={water_types}\n\
             force_type={force_type}\n\
             # scene synthesis\n\
             seed={}\n\
             noise_sigma={}\n\
             scene_water_type={}\n\
             beta_b={beta_b}\n",
            self.edge_threshold,
            self.min_vl_frac,
            self.stretch_low,
            self.stretch_high,
            self.n_hazelines,
            self.min_line_size,
            self.t_floor,
            self.gf_eps,
            self.clip_max,
            self.seed,
            self.noise_sigma,
            self.scene_water_type,
        )
    }

    /// Assign one field by key. Shared by the config-file parser and the
    /// command line, so both spell values identically.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("{key}: cannot parse {value:?}"))
        }
        match key {
            "edge_threshold" => self.edge_threshold = num(key, value)?,
            "min_vl_frac" => self.min_vl_frac = num(key, value)?,
            "veiling_rect" => {
                self.veiling_rect = match value {
                    "none" => None,
                    v => Some(Rect::parse(v).map_err(|e| format!("veiling_rect: {e}"))?),
                }
            }
            "stretch_low" => self.stretch_low = num(key, value)?,
            "stretch_high" => self.stretch_high = num(key, value)?,
            "n_hazelines" => self.n_hazelines = num(key, value)?,
            "min_line_size" => self.min_line_size = num(key, value)?,
            "t_floor" => self.t_floor = num(key, value)?,
            "gf_radius" => {
                self.gf_radius = match value {
                    "auto" => None,
                    v => Some(num(key, v)?),
                }
            }
            "gf_eps" => self.gf_eps = num(key, value)?,
            "clip_max" => self.clip_max = num(key, value)?,
            "water_types" => {
                self.water_types = match value {
                    "builtin" => None,
                    v => Some(PathBuf::from(v)),
                }
            }
            "force_type" => {
                self.force_type = match value {
                    "none" => None,
                    v => Some(v.to_string()),
                }
            }
            "seed" => self.seed = num(key, value)?,
            "noise_sigma" => self.noise_sigma = num(key, value)?,
            "scene_water_type" => self.scene_water_type = value.to_string(),
            "beta_b" => {
                self.beta_b = match value {
                    "auto" => None,
                    v => Some(num(key, v)?),
                }
            }
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Apply `key=value` lines on top of the current values. Blank lines and
    /// `#` comments are ignored; `src` only labels errors.
    pub fn apply_text(&mut self, text: &str, src: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: src.to_path_buf(),
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|msg| Error::Parse {
                path: src.to_path_buf(),
                line: i + 1,
                msg,
            })?;
        }
        Ok(())
    }

    /// Check every field against its documented range, so a bad config fails
    /// with one message instead of deep inside the pipeline.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.edge_threshold.is_finite() && self.edge_threshold >= 0.0) {
            return bad(format!("edge_threshold {} must be >= 0", self.edge_threshold));
        }
        if !(self.min_vl_frac > 0.0 && self.min_vl_frac <= 1.0) {
            return bad(format!("min_vl_frac {} must be in (0, 1]", self.min_vl_frac));
        }
        if !(0.0 <= self.stretch_low && self.stretch_low < self.stretch_high && self.stretch_high <= 100.0)
        {
            return bad(format!(
                "stretch percentiles ({}, {}) must satisfy 0 <= low < high <= 100",
                self.stretch_low, self.stretch_high
            ));
        }
        if self.n_hazelines < 2 {
            return bad(format!("n_hazelines {} must be at least 2", self.n_hazelines));
        }
        if !(self.t_floor >= 0.0 && self.t_floor <= 0.9) {
            return bad(format!("t_floor {} must be in [0, 0.9]", self.t_floor));
        }
        if self.gf_radius == Some(0) {
            return bad("gf_radius 0: radius must be positive or auto".into());
        }
        if !(self.gf_eps.is_finite() && self.gf_eps > 0.0) {
            return bad(format!("gf_eps {} must be > 0", self.gf_eps));
        }
        if !(self.clip_max.is_finite() && self.clip_max > 0.0) {
            return bad(format!("clip_max {} must be > 0", self.clip_max));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if let Some(b) = self.beta_b {
            if !(b.is_finite() && b > 0.0) {
                return bad(format!("beta_b {b} must be > 0"));
            }
        }
        Ok(())
    }

    /// The restoration options this config describes.
    pub fn restore_options(&self) -> RestoreOptions {
        RestoreOptions {
            edge_threshold: self.edge_threshold,
            min_vl_frac: self.min_vl_frac,
            veiling_rect: self.veiling_rect,
            stretch_low: self.stretch_low,
            stretch_high: self.stretch_high,
            transmission: TransmissionParams {
                n_directions: self.n_hazelines,
                min_line_size: self.min_line_size,
                t_floor: self.t_floor,
                gf_radius: self.gf_radius,
                gf_eps: self.gf_eps,
            },
            clip_max: self.clip_max,
            force_type: self.force_type.clone(),
        }
    }
}

/// Read a config file applied over the defaults.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cfg = RunConfig::default();
    cfg.apply_text(&text, path)?;
    Ok(cfg)
}
