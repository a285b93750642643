//! Oceanographic water types and their attenuation-coefficient ratios.
//!
//! Restoration needs only two numbers per candidate water body: the ratios
//! of the blue diffuse attenuation coefficient to the red and the green
//! ones. The builtin library freezes those ratios for the ten standard
//! Jerlov classes (open ocean I, IA, IB, II, III and coastal 1C through
//! 9C), evaluated at 600 nm, 525 nm, and 475 nm, the peak sensitivities of
//! a typical camera's red, green, and blue channels. The underlying
//! diffuse attenuation values, in 1/m, follow the Austin and Petzold
//! tabulation as reprinted in Mobley, *Light and Water* (1994).

use std::path::Path;

use crate::error::{Error, Result};

/// Diffuse attenuation (1/m) per class at (600 nm, 525 nm, 475 nm).
/// These drive [`builtin_library`] and give the forward simulator a
/// physically plausible absolute blue coefficient per class.
pub const DIFFUSE_ATTENUATION: [(&str, [f64; 3]); 10] = [
    ("I", [0.235, 0.043, 0.018]),
    ("IA", [0.240, 0.048, 0.025]),
    ("IB", [0.245, 0.054, 0.033]),
    ("II", [0.260, 0.076, 0.062]),
    ("III", [0.295, 0.116, 0.116]),
    ("1C", [0.310, 0.140, 0.154]),
    ("3C", [0.390, 0.235, 0.265]),
    ("5C", [0.560, 0.426, 0.470]),
    ("7C", [1.050, 0.870, 0.980]),
    ("9C", [1.800, 1.565, 1.670]),
];

/// One candidate water body: attenuation-coefficient ratios blue/red and
/// blue/green. Both ratios are strictly positive; in natural water blue
/// always attenuates less than red, so `beta_br < 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaterType {
    pub name: String,
    pub beta_br: f64,
    pub beta_bg: f64,
}

impl WaterType {
    pub fn new(name: impl Into<String>, beta_br: f64, beta_bg: f64) -> Result<Self> {
        if !(beta_br.is_finite() && beta_br > 0.0 && beta_bg.is_finite() && beta_bg > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "attenuation ratios must be positive and finite, got ({beta_br}, {beta_bg})"
            )));
        }
        Ok(Self {
            name: name.into(),
            beta_br,
            beta_bg,
        })
    }

    /// Squared Euclidean distance to another type in ratio space.
    pub fn ratio_distance_sq(&self, other: &WaterType) -> f64 {
        let dr = self.beta_br - other.beta_br;
        let dg = self.beta_bg - other.beta_bg;
        dr * dr + dg * dg
    }
}

/// Ordered collection of candidate water types.
#[derive(Debug, Clone, PartialEq)]
pub struct WaterTypeLibrary {
    types: Vec<WaterType>,
}

impl WaterTypeLibrary {
    pub fn new(types: Vec<WaterType>) -> Result<Self> {
        if types.is_empty() {
            return Err(Error::EmptyLibrary);
        }
        for (i, t) in types.iter().enumerate() {
            if types[..i].iter().any(|u| u.name == t.name) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate water type name `{}`",
                    t.name
                )));
            }
        }
        Ok(Self { types })
    }

    pub fn types(&self) -> &[WaterType] {
        &self.types
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&WaterType> {
        self.types
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownWaterType(name.into()))
    }

    /// Index of the library entry closest to `target` in ratio space.
    pub fn nearest(&self, target: &WaterType) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, t) in self.types.iter().enumerate() {
            let d = t.ratio_distance_sq(target);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// The ten standard classes with ratios derived from
/// [`DIFFUSE_ATTENUATION`]: `beta_br = K(475) / K(600)` and
/// `beta_bg = K(475) / K(525)`.
pub fn builtin_library() -> WaterTypeLibrary {
    let types = DIFFUSE_ATTENUATION
        .iter()
        .map(|(name, [k_red, k_green, k_blue])| {
            WaterType::new(*name, k_blue / k_red, k_blue / k_green).expect("builtin ratios are positive")
        })
        .collect();
    WaterTypeLibrary::new(types).expect("builtin library is non-empty and unique")
}

/// Absolute diffuse attenuation (1/m) of the blue channel for a builtin
/// class, if `name` is one.
pub fn builtin_blue_attenuation(name: &str) -> Option<f64> {
    DIFFUSE_ATTENUATION
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, k)| k[2])
}

/// Parses a library from plain text: one `name beta_br beta_bg` entry per
/// line, `#` starts a comment, blank lines are skipped.
pub fn parse_library(content: &str, path: &Path) -> Result<WaterTypeLibrary> {
    let mut types = Vec::new();
    for (lineno, raw) in content.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.into(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(format!(
                "expected `name beta_br beta_bg`, found {} fields",
                fields.len()
            )));
        }
        let beta_br: f64 = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("invalid ratio `{}`", fields[1])))?;
        let beta_bg: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("invalid ratio `{}`", fields[2])))?;
        types.push(
            WaterType::new(fields[0], beta_br, beta_bg)
                .map_err(|e| parse_err(e.to_string()))?,
        );
    }
    WaterTypeLibrary::new(types)
}

/// Loads a plain-text library file; see [`parse_library`] for the format.
pub fn load_library(path: &Path) -> Result<WaterTypeLibrary> {
    let content = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })?;
    parse_library(&content, path)
}

/// Serializes a library in the [`parse_library`] format.
pub fn library_to_text(lib: &WaterTypeLibrary) -> String {
    let mut out = String::from("# name beta_br beta_bg\n");
    for t in lib.types() {
        out.push_str(&format!("{} {} {}\n", t.name, t.beta_br, t.beta_bg));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn builtin_has_ten_unique_types_in_order() {
        let lib = builtin_library();
        let names: Vec<&str> = lib.types().iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["I", "IA", "IB", "II", "III", "1C", "3C", "5C", "7C", "9C"]);
    }

    #[test]
    fn builtin_ratios_match_attenuation_table() {
        let lib = builtin_library();
        // Spot values recomputed by hand from the frozen table.
        let i = lib.get("I").unwrap();
        assert_abs_diff_eq!(i.beta_br, 0.018 / 0.235, epsilon = 1e-15);
        assert_abs_diff_eq!(i.beta_bg, 0.018 / 0.043, epsilon = 1e-15);
        let c3 = lib.get("3C").unwrap();
        assert_abs_diff_eq!(c3.beta_br, 0.265 / 0.390, epsilon = 1e-15);
        assert_abs_diff_eq!(c3.beta_bg, 0.265 / 0.235, epsilon = 1e-15);
        for (t, (_, k)) in lib.types().iter().zip(DIFFUSE_ATTENUATION.iter()) {
            assert_abs_diff_eq!(t.beta_br, k[2] / k[0], epsilon = 1e-15);
            assert_abs_diff_eq!(t.beta_bg, k[2] / k[1], epsilon = 1e-15);
        }
    }

    #[test]
    fn builtin_ratios_are_positive_and_blue_red_below_one() {
        for t in builtin_library().types() {
            assert!(t.beta_br > 0.0 && t.beta_bg > 0.0);
            // Blue penetrates natural water better than red, always.
            assert!(t.beta_br < 1.0, "{}: beta_br = {}", t.name, t.beta_br);
        }
    }

    #[test]
    fn library_text_roundtrips() {
        let lib = builtin_library();
        let text = library_to_text(&lib);
        let back = parse_library(&text, Path::new("builtin")).unwrap();
        assert_eq!(lib, back);
    }

    #[test]
    fn parse_accepts_comments_and_rejects_bad_rows() {
        let ok = parse_library("# c\nI 0.11 0.46\n\nII 0.2 0.8 # trailing\n", Path::new("t")).unwrap();
        assert_eq!(ok.len(), 2);
        assert_abs_diff_eq!(ok.get("I").unwrap().beta_br, 0.11);
        assert_abs_diff_eq!(ok.get("I").unwrap().beta_bg, 0.46);

        for bad in [
            "I 0.11",             // missing field
            "I 0.11 x",           // non-numeric
            "I -0.1 0.46",        // non-positive ratio
            "I 0.1 0.4\nI 0.2 0.5", // duplicate name
            "",                   // empty library
        ] {
            assert!(parse_library(bad, Path::new("t")).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn nearest_finds_identical_then_closest() {
        let lib = builtin_library();
        for (i, t) in lib.types().iter().enumerate() {
            assert_eq!(lib.nearest(t), i);
        }
        let probe = WaterType::new("probe", 0.07, 0.40).unwrap();
        assert_eq!(lib.types()[lib.nearest(&probe)].name, "I");
    }

    #[test]
    fn blue_attenuation_lookup() {
        assert_eq!(builtin_blue_attenuation("I"), Some(0.018));
        assert_eq!(builtin_blue_attenuation("9C"), Some(1.670));
        assert_eq!(builtin_blue_attenuation("nope"), None);
    }
}
