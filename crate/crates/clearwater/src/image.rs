//! Image containers, color encoding, file I/O, and contrast stretching.
//!
//! All processing happens on linear-light RGB stored as `f64` in `[0, 1]`
//! (restoration stages may exceed 1 up to a configured headroom). Files on
//! disk are either 16-bit linear or 8-bit sRGB-encoded PNG/TIFF; the sRGB
//! transfer function follows IEC 61966-2-1.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Number of color channels in a [`LinearImage`].
pub const CHANNELS: usize = 3;

/// Percentiles used whenever the pipeline needs a contrast-stretched view
/// of the input (edge detection, guided-filter guidance).
pub const STRETCH_LOW_PCT: f64 = 1.0;
pub const STRETCH_HIGH_PCT: f64 = 99.0;

/// Axis-aligned pixel rectangle; `x`/`y` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    /// True when the rectangle is non-empty and lies inside a
    /// `width` x `height` image.
    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }

    /// Parses `x,y,w,h`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::InvalidParameter(format!(
                "rectangle `{s}` is not of the form x,y,w,h"
            )));
        }
        let mut vals = [0usize; 4];
        for (v, p) in vals.iter_mut().zip(&parts) {
            *v = p.parse().map_err(|_| {
                Error::InvalidParameter(format!("rectangle `{s}` has non-integer field `{p}`"))
            })?;
        }
        Ok(Self::new(vals[0], vals[1], vals[2], vals[3]))
    }
}

impl std::fmt::Display for Rect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}

/// Pixel encoding of an image file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    /// 16-bit samples already proportional to linear light.
    Linear16,
    /// 8-bit samples with the sRGB transfer function applied.
    Srgb8,
}

impl Encoding {
    pub fn name(self) -> &'static str {
        match self {
            Encoding::Linear16 => "linear16",
            Encoding::Srgb8 => "srgb8",
        }
    }
}

impl std::str::FromStr for Encoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear16" => Ok(Encoding::Linear16),
            "srgb8" => Ok(Encoding::Srgb8),
            other => Err(Error::InvalidParameter(format!(
                "unknown encoding `{other}` (expected linear16 or srgb8)"
            ))),
        }
    }
}

/// Row-major interleaved RGB image in linear light.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl LinearImage {
    /// All-zero image of the given size.
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * CHANNELS],
        }
    }

    /// Wraps interleaved RGB data; `data.len()` must be `width * height * 3`.
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * CHANNELS {
            return Err(Error::InvalidParameter(format!(
                "image data length {} does not match {}x{}x{}",
                data.len(),
                width,
                height,
                CHANNELS
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set_pixel(x, y, f(x, y));
            }
        }
        img
    }

    /// Constant-color image.
    pub fn constant(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * CHANNELS
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = self.index(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = self.index(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Values of one channel in row-major order.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(CHANNELS).copied().collect()
    }

    /// Mean of each channel over `mask` (all pixels when `mask` is `None`).
    pub fn channel_means(&self, mask: Option<&PixelMask>) -> Result<[f64; 3]> {
        if let Some(m) = mask {
            self.check_dims(m.width, m.height)?;
        }
        let mut sums = [0.0f64; 3];
        let mut n = 0usize;
        for p in 0..self.pixel_count() {
            if mask.map_or(true, |m| m.data[p]) {
                let i = p * CHANNELS;
                sums[0] += self.data[i];
                sums[1] += self.data[i + 1];
                sums[2] += self.data[i + 2];
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::EmptyRegion);
        }
        Ok(sums.map(|s| s / n as f64))
    }

    pub fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(Error::DimensionMismatch(self.width, self.height, width, height));
        }
        Ok(())
    }
}

/// Row-major single-channel map (transmission, distance, weights).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayMap {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidParameter(format!(
                "map data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let data = (0..width * height)
            .map(|p| f(p % width, p / width))
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(Error::DimensionMismatch(self.width, self.height, width, height));
        }
        Ok(())
    }
}

/// Boolean per-pixel mask; `true` selects a pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl PixelMask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidParameter(format!(
                "mask data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..width * height)
            .map(|p| f(p % width, p / width))
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Mask selecting exactly the pixels this mask does not.
    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&b| !b).collect(),
        }
    }

    /// Pixels selected by `self` but not by `other`.
    pub fn minus(&self, other: &PixelMask) -> Result<Self> {
        self.check_dims(other.width, other.height)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && !b)
                .collect(),
        })
    }

    pub fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(Error::DimensionMismatch(self.width, self.height, width, height));
        }
        Ok(())
    }
}

/// sRGB transfer function (IEC 61966-2-1): encoded value in `[0, 1]` to
/// linear light.
pub fn srgb_to_linear(s: f64) -> f64 {
    if s <= 0.04045 {
        s / 12.92
    } else {
        ((s + 0.055) / 1.055).powf(2.4)
    }
}

/// Inverse sRGB transfer function: linear light in `[0, 1]` to the encoded
/// value.
pub fn linear_to_srgb(l: f64) -> f64 {
    if l <= 0.0031308 {
        12.92 * l
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    }
}

fn format_is_supported(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "tif" | "tiff")
    )
}

/// Loads a 3-channel PNG or TIFF into linear light.
///
/// `Encoding::Linear16` requires 16-bit samples and divides by 65535;
/// `Encoding::Srgb8` requires 8-bit samples and applies [`srgb_to_linear`].
pub fn load_image(path: &Path, encoding: Encoding) -> Result<LinearImage> {
    if !format_is_supported(path) {
        return Err(Error::Format { path: path.into() });
    }
    let dynamic = image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })?;
    let wrong_depth = || Error::BitDepth {
        path: path.into(),
        encoding: encoding.name().into(),
    };
    let channel_count = |found: u8| Error::ChannelCount {
        path: path.into(),
        found,
    };
    use image::DynamicImage::*;
    match (&dynamic, encoding) {
        (ImageRgb8(buf), Encoding::Srgb8) => {
            let data = buf.as_raw().iter().map(|&v| srgb_to_linear(v as f64 / 255.0)).collect();
            LinearImage::from_vec(buf.width() as usize, buf.height() as usize, data)
        }
        (ImageRgb16(buf), Encoding::Linear16) => {
            let data = buf.as_raw().iter().map(|&v| v as f64 / 65535.0).collect();
            LinearImage::from_vec(buf.width() as usize, buf.height() as usize, data)
        }
        (ImageRgb8(_) | ImageRgb16(_), _) => Err(wrong_depth()),
        (ImageLuma8(_) | ImageLuma16(_), _) => Err(channel_count(1)),
        (ImageLumaA8(_) | ImageLumaA16(_), _) => Err(channel_count(2)),
        (ImageRgba8(_) | ImageRgba16(_), _) => Err(channel_count(4)),
        _ => Err(wrong_depth()),
    }
}

/// Writes a display version of `img`: values clamped to `[0, 1]`,
/// sRGB-encoded, and quantized to 8 bits (or 16 when `sixteen_bit`).
pub fn save_display(img: &LinearImage, path: &Path, sixteen_bit: bool) -> Result<()> {
    if !format_is_supported(path) {
        return Err(Error::Format { path: path.into() });
    }
    let (w, h) = (img.width() as u32, img.height() as u32);
    let encode = |v: f64| linear_to_srgb(v.clamp(0.0, 1.0));
    let result = if sixteen_bit {
        let data: Vec<u16> = img.data().iter().map(|&v| (encode(v) * 65535.0).round() as u16).collect();
        let buf = image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(w, h, data).expect("sized buffer");
        buf.save(path)
    } else {
        let data: Vec<u8> = img.data().iter().map(|&v| (encode(v) * 255.0).round() as u8).collect();
        let buf = image::ImageBuffer::<image::Rgb<u8>, _>::from_raw(w, h, data).expect("sized buffer");
        buf.save(path)
    };
    result.map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

/// Writes `img` so that [`load_image`] with the same `encoding` reads back
/// the values (up to quantization): 8-bit sRGB-encoded samples, or 16-bit
/// linear samples. Values are clamped to `[0, 1]`.
pub fn save_image(img: &LinearImage, path: &Path, encoding: Encoding) -> Result<()> {
    match encoding {
        Encoding::Srgb8 => save_display(img, path, false),
        Encoding::Linear16 => {
            if !format_is_supported(path) {
                return Err(Error::Format { path: path.into() });
            }
            let data: Vec<u16> = img
                .data()
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
                .collect();
            let buf = image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(
                img.width() as u32,
                img.height() as u32,
                data,
            )
            .expect("sized buffer");
            buf.save(path).map_err(|source| Error::Image {
                path: path.into(),
                source,
            })
        }
    }
}

/// Loads any decodable image as a mask: a pixel is set where its luma is
/// nonzero.
pub fn load_mask(path: &Path) -> Result<PixelMask> {
    let dynamic = image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })?;
    let luma = dynamic.to_luma16();
    let data = luma.as_raw().iter().map(|&v| v > 0).collect();
    PixelMask::from_vec(luma.width() as usize, luma.height() as usize, data)
}

/// Writes a mask as an 8-bit grayscale image (0 or 255).
pub fn save_mask(mask: &PixelMask, path: &Path) -> Result<()> {
    if !format_is_supported(path) {
        return Err(Error::Format { path: path.into() });
    }
    let data: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf = image::ImageBuffer::<image::Luma<u8>, _>::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        data,
    )
    .expect("sized buffer");
    buf.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

/// Writes a single-channel map as 16-bit PNG/TIFF, clamping to `[0, 1]`.
pub fn save_gray16(map: &GrayMap, path: &Path) -> Result<()> {
    if !format_is_supported(path) {
        return Err(Error::Format { path: path.into() });
    }
    let data: Vec<u16> = map
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(map.width() as u32, map.height() as u32, data)
        .expect("sized buffer");
    buf.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

/// Loads a 16-bit single-channel PNG/TIFF into `[0, 1]`.
pub fn load_gray16(path: &Path) -> Result<GrayMap> {
    if !format_is_supported(path) {
        return Err(Error::Format { path: path.into() });
    }
    let dynamic = image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })?;
    match dynamic {
        image::DynamicImage::ImageLuma16(buf) => {
            let data = buf.as_raw().iter().map(|&v| v as f64 / 65535.0).collect();
            GrayMap::from_vec(buf.width() as usize, buf.height() as usize, data)
        }
        _ => Err(Error::BitDepth {
            path: path.into(),
            encoding: "gray16".into(),
        }),
    }
}

/// Serializes a map as plain text: one row per line, space-separated values,
/// `nan` for missing entries. The shortest round-trip float form makes equal
/// maps produce byte-identical files.
pub fn gray_to_text(map: &GrayMap) -> String {
    let mut out = String::new();
    for y in 0..map.height() {
        for x in 0..map.width() {
            if x > 0 {
                out.push(' ');
            }
            let v = map.get(x, y);
            if v.is_nan() {
                out.push_str("nan");
            } else {
                write!(out, "{v}").expect("string write");
            }
        }
        out.push('\n');
    }
    out
}

pub fn save_gray_text(map: &GrayMap, path: &Path) -> Result<()> {
    std::fs::write(path, gray_to_text(map)).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

pub fn load_gray_text(path: &Path) -> Result<GrayMap> {
    let content = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.into(),
                    line: lineno + 1,
                    msg: format!("invalid float `{tok}`"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(prev) = rows.first() {
            if row.len() != prev.len() {
                return Err(Error::Parse {
                    path: path.into(),
                    line: lineno + 1,
                    msg: format!("row has {} values, expected {}", row.len(), prev.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.into(),
            line: 0,
            msg: "empty map file".into(),
        });
    }
    let width = rows[0].len();
    let height = rows.len();
    GrayMap::from_vec(width, height, rows.into_iter().flatten().collect())
}

/// Percentile `p` in `[0, 100]` of `values` using linear interpolation
/// between closest ranks, so `p = 0` is the minimum and `p = 100` the
/// maximum.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidParameter("percentile of empty slice".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("percentile {p} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Result of [`contrast_stretch`]; a channel whose two percentiles
/// coincide cannot be stretched and is flagged instead of divided by zero.
#[derive(Debug, Clone)]
pub struct Stretched {
    pub image: LinearImage,
    pub degenerate_channels: [bool; 3],
}

/// Per-channel affine stretch mapping the `low`/`high` percentiles to 0/1,
/// clamping the remainder. Output values therefore stay in `[0, 1]`.
pub fn contrast_stretch(img: &LinearImage, low: f64, high: f64) -> Result<Stretched> {
    if !(0.0..=100.0).contains(&low) || !(0.0..=100.0).contains(&high) || low >= high {
        return Err(Error::InvalidParameter(format!(
            "percentile range [{low}, {high}] is not an increasing pair in [0, 100]"
        )));
    }
    let mut out = img.clone();
    let mut degenerate = [false; 3];
    for c in 0..CHANNELS {
        let values = img.channel(c);
        let lo = percentile(&values, low)?;
        let hi = percentile(&values, high)?;
        if hi <= lo {
            degenerate[c] = true;
            continue;
        }
        let scale = 1.0 / (hi - lo);
        for v in out.data_mut().iter_mut().skip(c).step_by(CHANNELS) {
            *v = ((*v - lo) * scale).clamp(0.0, 1.0);
        }
    }
    Ok(Stretched {
        image: out,
        degenerate_channels: degenerate,
    })
}
