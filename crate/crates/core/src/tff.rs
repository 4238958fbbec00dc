//! Trace-focused field rendering.
//!
//! A projected trace is turned into a dense attention map by summing one
//! isotropic Gaussian per trace point, clamping to `[0, 1]`, and multiplying
//! the result into the global camera image. The bare trace is also
//! rasterized as a polyline image.
//!
//! Gaussians are summed in ascending trace order with a plain sequential
//! accumulator, so [`extend_field`] reproduces [`render_field`] bit for bit.

use std::io::{self, Write};

use thiserror::Error;

use crate::geometry::Pixel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("invalid field config: {0}")]
    InvalidConfig(String),
    #[error("image values must be in [0, 1], found {0}")]
    OutOfRange(f32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldConfig {
    /// Gaussian standard deviation in pixels.
    pub sigma: f64,
    /// Additive baseline applied before clamping.
    pub floor: f64,
    /// Only every `stride`-th trace point contributes.
    pub stride: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self { sigma: 3.0, floor: 0.0, stride: 1 }
    }
}

impl FieldConfig {
    pub fn new(sigma: f64, floor: f64, stride: usize) -> Result<Self, FieldError> {
        let cfg = Self { sigma, floor, stride };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(FieldError::InvalidConfig(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(0.0..1.0).contains(&self.floor) {
            return Err(FieldError::InvalidConfig(format!("floor must be in [0, 1), got {}", self.floor)));
        }
        if self.stride == 0 {
            return Err(FieldError::InvalidConfig("stride must be positive".into()));
        }
        Ok(())
    }
}

/// Row-major grayscale raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, data: vec![value.clamp(0.0, 1.0); width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self, FieldError> {
        if data.len() != width * height {
            return Err(FieldError::DimensionMismatch(width, height, data.len(), 1));
        }
        if let Some(&bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(FieldError::OutOfRange(bad));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    /// Writes `value`, clamped to `[0, 1]`.
    pub fn set(&mut self, u: usize, v: usize, value: f32) {
        self.data[v * self.width + u] = value.clamp(0.0, 1.0);
    }

    /// Raises a cell to at least `value`.
    pub fn max_at(&mut self, u: usize, v: usize, value: f32) {
        let cell = &mut self.data[v * self.width + u];
        *cell = cell.max(value.clamp(0.0, 1.0));
    }

    /// Plain PGM (P2 ascii when `binary` is false, P5 otherwise).
    pub fn write_pgm<W: Write>(&self, mut out: W, binary: bool) -> io::Result<()> {
        write_pgm(&mut out, self.width, self.height, self.data.iter().map(|&v| v as f64), binary)
    }

    pub fn write_f32_raster<W: Write>(&self, out: W) -> io::Result<()> {
        write_f32_raster(out, self.width, self.height, self.data.iter().copied())
    }
}

/// Dense Gaussian response of one trace point, evaluated at every cell.
pub fn gaussian_map(center: Pixel, cfg: &FieldConfig, width: usize, height: usize) -> Vec<f64> {
    let inv = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
    let mut out = Vec::with_capacity(width * height);
    for v in 0..height {
        let dv = v as f64 - center.v;
        for u in 0..width {
            let du = u as f64 - center.u;
            out.push((-(du * du + dv * dv) * inv).exp());
        }
    }
    out
}

/// The trace-focused field. Keeps the pre-clamp sum so new trace points can
/// be folded in without re-rendering the history.
#[derive(Debug, Clone, PartialEq)]
pub struct FocusField {
    width: usize,
    height: usize,
    floor: f64,
    accum: Vec<f64>,
    points_seen: usize,
}

impl FocusField {
    /// Field of an empty trace.
    pub fn empty(cfg: &FieldConfig, width: usize, height: usize) -> Self {
        Self { width, height, floor: cfg.floor, accum: vec![0.0; width * height], points_seen: 0 }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of trace points folded in so far, including those skipped by
    /// the stride.
    pub fn points_seen(&self) -> usize {
        self.points_seen
    }

    /// Unclamped Gaussian sum (without the floor).
    pub fn accumulator(&self) -> &[f64] {
        &self.accum
    }

    pub fn value(&self, u: usize, v: usize) -> f64 {
        (self.accum[v * self.width + u] + self.floor).clamp(0.0, 1.0)
    }

    pub fn values(&self) -> Vec<f64> {
        self.accum.iter().map(|a| (a + self.floor).clamp(0.0, 1.0)).collect()
    }

    fn fold(&mut self, point: Pixel, cfg: &FieldConfig) {
        if self.points_seen % cfg.stride == 0 {
            let inv = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
            let mut idx = 0;
            for v in 0..self.height {
                let dv = v as f64 - point.v;
                for u in 0..self.width {
                    let du = u as f64 - point.u;
                    self.accum[idx] += (-(du * du + dv * dv) * inv).exp();
                    idx += 1;
                }
            }
        }
        self.points_seen += 1;
    }

    pub fn write_pgm<W: Write>(&self, mut out: W, binary: bool) -> io::Result<()> {
        write_pgm(&mut out, self.width, self.height, self.values().into_iter(), binary)
    }

    pub fn write_f32_raster<W: Write>(&self, out: W) -> io::Result<()> {
        write_f32_raster(out, self.width, self.height, self.values().into_iter().map(|v| v as f32))
    }
}

/// Sums the Gaussians of the (stride-subsampled) trace and clamps.
pub fn render_field(trace2d: &[Pixel], cfg: &FieldConfig, width: usize, height: usize) -> FocusField {
    let mut field = FocusField::empty(cfg, width, height);
    for &p in trace2d {
        field.fold(p, cfg);
    }
    field
}

/// Folds one more trace point into an existing field.
pub fn extend_field(mut field: FocusField, new_point: Pixel, cfg: &FieldConfig) -> FocusField {
    field.fold(new_point, cfg);
    field
}

/// In-place variant of [`extend_field`] for rollout loops.
pub fn extend_field_in_place(field: &mut FocusField, new_point: Pixel, cfg: &FieldConfig) {
    field.fold(new_point, cfg);
}

/// Element-wise product of image and field.
pub fn apply_field(image: &GrayImage, field: &FocusField) -> Result<GrayImage, FieldError> {
    if image.width != field.width || image.height != field.height {
        return Err(FieldError::DimensionMismatch(image.width, image.height, field.width, field.height));
    }
    let data = image
        .data
        .iter()
        .zip(&field.accum)
        .map(|(&i, &a)| (i as f64 * (a + field.floor).clamp(0.0, 1.0)) as f32)
        .collect();
    Ok(GrayImage { width: image.width, height: image.height, data })
}

/// Draws the trace polyline at nearest-cell resolution with intensity 1.
pub fn rasterize_trace(trace2d: &[Pixel], width: usize, height: usize) -> GrayImage {
    let mut img = GrayImage::zeros(width, height);
    match trace2d {
        [] => {}
        [only] => stamp(&mut img, *only),
        _ => {
            for pair in trace2d.windows(2) {
                stamp_segment(&mut img, pair[0], pair[1]);
            }
        }
    }
    img
}

/// Adds the segment ending at `next` to a raster built by
/// [`rasterize_trace`]. With no previous point the single cell is stamped.
pub fn extend_trace_raster(img: &mut GrayImage, prev: Option<Pixel>, next: Pixel) {
    match prev {
        Some(p) => stamp_segment(img, p, next),
        None => stamp(img, next),
    }
}

fn stamp(img: &mut GrayImage, p: Pixel) {
    let u = p.u.round();
    let v = p.v.round();
    if u >= 0.0 && v >= 0.0 && (u as usize) < img.width && (v as usize) < img.height {
        img.set(u as usize, v as usize, 1.0);
    }
}

fn stamp_segment(img: &mut GrayImage, a: Pixel, b: Pixel) {
    let steps = (b.u - a.u).abs().max((b.v - a.v).abs()).ceil().max(0.0) as usize;
    // guard against absurd spans from far off-frame points
    let steps = steps.min(4 * (img.width + img.height));
    for i in 0..=steps {
        let s = if steps == 0 { 0.0 } else { i as f64 / steps as f64 };
        stamp(img, Pixel::new(a.u + s * (b.u - a.u), a.v + s * (b.v - a.v)));
    }
}

fn write_pgm<W: Write>(
    out: &mut W,
    width: usize,
    height: usize,
    values: impl Iterator<Item = f64>,
    binary: bool,
) -> io::Result<()> {
    let bytes: Vec<u8> = values.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    if binary {
        write!(out, "P5\n{width} {height}\n255\n")?;
        out.write_all(&bytes)
    } else {
        write!(out, "P2\n{width} {height}\n255\n")?;
        for row in bytes.chunks(width.max(1)) {
            let line: Vec<String> = row.iter().map(|b| b.to_string()).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

fn write_f32_raster<W: Write>(
    mut out: W,
    width: usize,
    height: usize,
    values: impl Iterator<Item = f32>,
) -> io::Result<()> {
    out.write_all(&(width as u32).to_le_bytes())?;
    out.write_all(&(height as u32).to_le_bytes())?;
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads back a raster written by `write_f32_raster`.
pub fn read_f32_raster(bytes: &[u8]) -> io::Result<(usize, usize, Vec<f32>)> {
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    if bytes.len() < 8 {
        return Err(bad("raster shorter than header"));
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 4 * w * h {
        return Err(bad("raster length does not match header"));
    }
    let data = bytes[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((w, h, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(sigma: f64) -> FieldConfig {
        FieldConfig::new(sigma, 0.0, 1).unwrap()
    }

    #[test]
    fn gaussian_peak_is_one_on_integer_center() {
        let g = gaussian_map(Pixel::new(3.0, 2.0), &cfg(2.0), 8, 6);
        assert_eq!(g[2 * 8 + 3], 1.0);
    }

    #[test]
    fn gaussian_at_one_sigma_distance() {
        let g = gaussian_map(Pixel::new(3.0, 2.0), &cfg(2.0), 8, 6);
        // cell (5, 2) is 2 px from the center
        assert!((g[2 * 8 + 5] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((g[2 * 8 + 5] - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn gaussian_off_frame_center_still_evaluated() {
        let g = gaussian_map(Pixel::new(-10.0, -10.0), &cfg(3.0), 4, 4);
        assert!(g.iter().all(|&v| v > 0.0 && v < 1e-3));
    }

    #[test]
    fn coincident_points_saturate() {
        let p = Pixel::new(4.0, 4.0);
        let f = render_field(&[p, p], &cfg(2.0), 9, 9);
        assert_eq!(f.accumulator()[4 * 9 + 4], 2.0);
        assert_eq!(f.value(4, 4), 1.0);
    }

    #[test]
    fn empty_trace_gives_zero_field() {
        let f = render_field(&[], &cfg(2.0), 5, 5);
        assert!(f.values().iter().all(|&v| v == 0.0));
        let floored = render_field(&[], &FieldConfig::new(2.0, 0.25, 1).unwrap(), 5, 5);
        assert!(floored.values().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn single_point_field_equals_gaussian() {
        let p = Pixel::new(2.3, 1.7);
        let f = render_field(&[p], &cfg(1.5), 6, 5);
        assert_eq!(f.values(), gaussian_map(p, &cfg(1.5), 6, 5));
    }

    #[test]
    fn stride_skips_points() {
        let c = FieldConfig::new(1.0, 0.0, 2).unwrap();
        let pts = [Pixel::new(1.0, 1.0), Pixel::new(5.0, 5.0), Pixel::new(3.0, 3.0)];
        let f = render_field(&pts, &c, 8, 8);
        let g = render_field(&[pts[0], pts[2]], &cfg(1.0), 8, 8);
        assert_eq!(f.accumulator(), g.accumulator());
    }

    #[test]
    fn extend_from_empty_matches_render() {
        let c = cfg(3.0);
        let p = Pixel::new(10.2, 7.9);
        let f = extend_field(FocusField::empty(&c, 16, 16), p, &c);
        assert_eq!(f, render_field(&[p], &c, 16, 16));
    }

    #[test]
    fn apply_field_identity_and_annihilator() {
        let img = GrayImage::from_vec(2, 2, vec![0.1, 0.5, 0.9, 1.0]).unwrap();
        let c = FieldConfig::new(1.0, 0.0, 1).unwrap();
        let zeros = FocusField::empty(&c, 2, 2);
        assert!(apply_field(&img, &zeros).unwrap().data().iter().all(|&v| v == 0.0));
        let mut ones = zeros.clone();
        ones.accum.iter_mut().for_each(|a| *a = 5.0);
        assert_eq!(apply_field(&img, &ones).unwrap(), img);
        let wrong = FocusField::empty(&c, 3, 2);
        assert!(matches!(apply_field(&img, &wrong), Err(FieldError::DimensionMismatch(..))));
    }

    #[test]
    fn raster_single_point() {
        let img = rasterize_trace(&[Pixel::new(3.4, 2.6)], 8, 8);
        let lit: Vec<usize> = (0..64).filter(|&i| img.data()[i] > 0.0).collect();
        assert_eq!(lit, vec![3 * 8 + 3]);
        assert_eq!(img.get(3, 3), 1.0);
    }

    #[test]
    fn raster_horizontal_segment() {
        let img = rasterize_trace(&[Pixel::new(2.0, 5.0), Pixel::new(7.0, 5.0)], 10, 10);
        for u in 0..10 {
            for v in 0..10 {
                let expect = if v == 5 && (2..=7).contains(&u) { 1.0 } else { 0.0 };
                assert_eq!(img.get(u, v), expect, "cell ({u},{v})");
            }
        }
    }

    #[test]
    fn raster_skips_off_frame_samples() {
        let img = rasterize_trace(&[Pixel::new(-3.0, 1.0), Pixel::new(2.0, 1.0)], 4, 4);
        assert_eq!(img.data().iter().filter(|&&v| v > 0.0).count(), 3);
        assert!(rasterize_trace(&[], 4, 4).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn incremental_raster_matches_batch() {
        let pts: Vec<Pixel> = (0..20).map(|i| Pixel::new(1.0 + 0.7 * i as f64, 3.0 + (i as f64 * 0.5).sin() * 4.0)).collect();
        let mut img = GrayImage::zeros(20, 12);
        let mut prev = None;
        for &p in &pts {
            extend_trace_raster(&mut img, prev, p);
            prev = Some(p);
        }
        assert_eq!(img, rasterize_trace(&pts, 20, 12));
    }

    #[test]
    fn config_validation() {
        assert!(FieldConfig::new(0.0, 0.0, 1).is_err());
        assert!(FieldConfig::new(1.0, 1.0, 1).is_err());
        assert!(FieldConfig::new(1.0, -0.1, 1).is_err());
        assert!(FieldConfig::new(1.0, 0.0, 0).is_err());
    }

    #[test]
    fn pgm_and_raster_formats() {
        let img = GrayImage::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        let mut p5 = Vec::new();
        img.write_pgm(&mut p5, true).unwrap();
        assert_eq!(p5, b"P5\n2 1\n255\n\x00\xff");
        let mut p2 = Vec::new();
        img.write_pgm(&mut p2, false).unwrap();
        assert_eq!(String::from_utf8(p2).unwrap(), "P2\n2 1\n255\n0 255\n");
        let mut raw = Vec::new();
        img.write_f32_raster(&mut raw).unwrap();
        assert_eq!(raw.len(), 8 + 8);
        let (w, h, data) = read_f32_raster(&raw).unwrap();
        assert_eq!((w, h, data), (2, 1, vec![0.0, 1.0]));
    }
}
