//! Deterministic image preprocessing: normalization, polar warping of aerial
//! images into the ground domain, and field-of-view cropping of panoramas.
//!
//! Coordinates follow the row/column convention used by the polar formulas:
//! `x` indexes rows (height) and `y` indexes columns (width).

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Image;

/// Standard deviation used when a channel has zero variance.
pub const STD_FLOOR: f64 = 1e-6;

/// Target geometry of the polar transformation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolarConfig {
    /// Side length of the square aerial input.
    pub aerial_size: usize,
    /// Output rows (radius axis).
    pub target_height: usize,
    /// Output columns (azimuth axis).
    pub target_width: usize,
}

impl PolarConfig {
    pub fn new(aerial_size: usize, target_height: usize, target_width: usize) -> Result<Self> {
        let cfg = PolarConfig {
            aerial_size,
            target_height,
            target_width,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.aerial_size == 0 || self.target_height == 0 || self.target_width == 0 {
            return Err(Error::InvalidConfig(format!(
                "polar dimensions must be positive, got aerial {} target {}x{}",
                self.aerial_size, self.target_height, self.target_width
            )));
        }
        Ok(())
    }

    /// Source position for a (possibly fractional) target pixel.
    pub fn source_coordinate(&self, x_t: f64, y_t: f64) -> (f64, f64) {
        let half = self.aerial_size as f64 / 2.0;
        let hv = self.target_height as f64;
        let radius = half * (hv - x_t) / hv;
        let theta = 2.0 * PI * y_t / self.target_width as f64;
        (half - radius * theta.cos(), half + radius * theta.sin())
    }
}

impl Default for PolarConfig {
    fn default() -> Self {
        PolarConfig {
            aerial_size: 512,
            target_height: 128,
            target_width: 512,
        }
    }
}

/// Source sampling coordinates for every target pixel of the polar raster.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarGrid {
    config: PolarConfig,
    coords: Vec<(f64, f64)>,
}

impl PolarGrid {
    pub fn config(&self) -> &PolarConfig {
        &self.config
    }

    pub fn height(&self) -> usize {
        self.config.target_height
    }

    pub fn width(&self) -> usize {
        self.config.target_width
    }

    /// `(x_s, y_s)` for target pixel `(x_t, y_t)`.
    pub fn source(&self, x_t: usize, y_t: usize) -> (f64, f64) {
        self.coords[x_t * self.config.target_width + y_t]
    }
}

pub fn build_polar_grid(config: PolarConfig) -> Result<PolarGrid> {
    config.validate()?;
    let mut coords = Vec::with_capacity(config.target_height * config.target_width);
    for x_t in 0..config.target_height {
        for y_t in 0..config.target_width {
            coords.push(config.source_coordinate(x_t as f64, y_t as f64));
        }
    }
    Ok(PolarGrid { config, coords })
}

/// Four-neighbour bilinear interpolation, clamping coordinates to the image.
pub fn bilinear_sample(img: &Image, x: f64, y: f64) -> Vec<f64> {
    let mut out = vec![0.0; img.channels()];
    bilinear_sample_into(img, x, y, &mut out);
    out
}

fn bilinear_sample_into(img: &Image, x: f64, y: f64, out: &mut [f64]) {
    let max_r = (img.height() - 1) as f64;
    let max_c = (img.width() - 1) as f64;
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, max_r) };
    let y = if y.is_nan() { 0.0 } else { y.clamp(0.0, max_c) };
    let r0 = x.floor() as usize;
    let c0 = y.floor() as usize;
    let r1 = (r0 + 1).min(img.height() - 1);
    let c1 = (c0 + 1).min(img.width() - 1);
    let fr = x - r0 as f64;
    let fc = y - c0 as f64;
    let (p00, p01, p10, p11) = (
        img.pixel(r0, c0),
        img.pixel(r0, c1),
        img.pixel(r1, c0),
        img.pixel(r1, c1),
    );
    for k in 0..img.channels() {
        let top = p00[k] + (p01[k] - p00[k]) * fc;
        let bottom = p10[k] + (p11[k] - p10[k]) * fc;
        out[k] = top + (bottom - top) * fr;
    }
}

/// Samples `img` at every grid coordinate.
pub fn warp_with_grid(img: &Image, grid: &PolarGrid) -> Result<Image> {
    let size = grid.config.aerial_size;
    if img.height() != img.width() {
        return Err(Error::Shape(format!(
            "aerial image must be square, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    if img.height() != size {
        return Err(Error::Shape(format!(
            "aerial image is {0}x{0} but polar config expects {size}x{size}",
            img.height()
        )));
    }
    let mut out = Image::zeros(grid.height(), grid.width(), img.channels());
    let c = img.channels();
    for x_t in 0..grid.height() {
        for y_t in 0..grid.width() {
            let (xs, ys) = grid.source(x_t, y_t);
            let i = out.index(x_t, y_t, 0);
            bilinear_sample_into(img, xs, ys, &mut out.data_mut()[i..i + c]);
        }
    }
    Ok(out)
}

/// Warps a square aerial image into an `H_v × W_v` ground-domain raster.
pub fn polar_transform(aerial: &Image, config: PolarConfig) -> Result<Image> {
    let grid = build_polar_grid(config)?;
    warp_with_grid(aerial, &grid)
}

/// Crop width for a field of view: `floor(width · fov / 360)`.
pub fn fov_width(panorama_width: usize, fov_deg: f64) -> Result<usize> {
    if !(fov_deg > 0.0 && fov_deg <= 360.0) {
        return Err(Error::InvalidArgument(format!(
            "field of view must lie in (0, 360], got {fov_deg}"
        )));
    }
    let w = (panorama_width as f64 * fov_deg / 360.0).floor() as usize;
    if w == 0 {
        return Err(Error::InvalidArgument(format!(
            "field of view {fov_deg} yields an empty crop of a {panorama_width}-column panorama"
        )));
    }
    Ok(w)
}

/// Crops a field of view from a 360° panorama, wrapping past the right edge.
pub fn fov_crop(panorama: &Image, fov_deg: f64, offset_col: usize) -> Result<Image> {
    let width = fov_width(panorama.width(), fov_deg)?;
    if offset_col >= panorama.width() {
        return Err(Error::InvalidArgument(format!(
            "crop offset {offset_col} outside panorama width {}",
            panorama.width()
        )));
    }
    Ok(panorama.crop_columns_circular(offset_col, width))
}

/// Bilinear resize using pixel-centre alignment.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("resize target must be non-empty".into()));
    }
    if img.height() == height && img.width() == width {
        return Ok(img.clone());
    }
    let sr = img.height() as f64 / height as f64;
    let sc = img.width() as f64 / width as f64;
    let c = img.channels();
    let mut out = Image::zeros(height, width, c);
    for r in 0..height {
        let x = (r as f64 + 0.5) * sr - 0.5;
        for col in 0..width {
            let y = (col as f64 + 0.5) * sc - 0.5;
            let i = out.index(r, col, 0);
            bilinear_sample_into(img, x, y, &mut out.data_mut()[i..i + c]);
        }
    }
    Ok(out)
}

/// Per-channel dataset mean and standard deviation of `pixel / 255`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose variance was zero and whose std was clamped to [`STD_FLOOR`].
    #[serde(default)]
    pub clamped_channels: Vec<usize>,
}

impl NormalizationStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        let stats = NormalizationStats {
            mean,
            std,
            clamped_channels: Vec::new(),
        };
        stats.validate()?;
        Ok(stats)
    }

    /// Mean 0, std 1 in every channel.
    pub fn identity(channels: usize) -> Self {
        NormalizationStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            clamped_channels: Vec::new(),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::InvalidConfig(format!(
                "stats have {} means but {} stds",
                self.mean.len(),
                self.std.len()
            )));
        }
        if let Some(k) = self.std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "standard deviation of channel {k} must be positive, got {}",
                self.std[k]
            )));
        }
        Ok(())
    }
}

/// `((img / 255) − μ) / σ` per channel.
pub fn normalize_image(img: &Image, stats: &NormalizationStats) -> Result<Image> {
    check_stats(img, stats)?;
    let c = img.channels();
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let k = i % c;
        *v = (*v / 255.0 - stats.mean[k]) / stats.std[k];
    }
    Ok(out)
}

/// Inverse of [`normalize_image`].
pub fn denormalize_image(img: &Image, stats: &NormalizationStats) -> Result<Image> {
    check_stats(img, stats)?;
    let c = img.channels();
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let k = i % c;
        *v = (*v * stats.std[k] + stats.mean[k]) * 255.0;
    }
    Ok(out)
}

fn check_stats(img: &Image, stats: &NormalizationStats) -> Result<()> {
    stats.validate()?;
    if img.channels() != stats.channels() {
        return Err(Error::Shape(format!(
            "image has {} channels but stats have {}",
            img.channels(),
            stats.channels()
        )));
    }
    Ok(())
}

/// Streaming population statistics of `pixel / 255`, one channel at a time.
///
/// Accumulates with Welford's update so that large datasets stay stable.
#[derive(Debug, Clone, Default)]
pub struct StatsAccumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, img: &Image) -> Result<()> {
        let c = img.channels();
        if self.mean.is_empty() {
            self.mean = vec![0.0; c];
            self.m2 = vec![0.0; c];
        } else if self.mean.len() != c {
            return Err(Error::Shape(format!(
                "mixed channel counts in dataset: {c} vs {}",
                self.mean.len()
            )));
        }
        for px in img.data().chunks_exact(c) {
            self.count += 1;
            let n = self.count as f64;
            for k in 0..c {
                let v = px[k] / 255.0;
                let delta = v - self.mean[k];
                self.mean[k] += delta / n;
                self.m2[k] += delta * (v - self.mean[k]);
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<NormalizationStats> {
        if self.count == 0 {
            return Err(Error::InvalidArgument(
                "cannot compute statistics of an empty image set".into(),
            ));
        }
        let mut clamped = Vec::new();
        let std = self
            .m2
            .iter()
            .enumerate()
            .map(|(k, &s)| {
                let sd = (s / self.count as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    log::warn!("channel {k} has zero variance; clamping std to {STD_FLOOR}");
                    clamped.push(k);
                    STD_FLOOR
                }
            })
            .collect();
        Ok(NormalizationStats {
            mean: self.mean,
            std,
            clamped_channels: clamped,
        })
    }
}

/// Population mean and standard deviation of `pixel / 255` over all images.
pub fn compute_dataset_stats<'a, I>(images: I) -> Result<NormalizationStats>
where
    I: IntoIterator<Item = &'a Image>,
{
    let mut acc = StatsAccumulator::new();
    for img in images {
        acc.push(img)?;
    }
    acc.finish()
}

/// Decodes a PNG or JPEG file into a raw RGB raster with values in `[0, 255]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let decoded = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(f64::from).collect();
    Image::from_vec(h as usize, w as usize, 3, data)
}

/// Writes a raw RGB raster as PNG, rounding and clamping to `u8`.
pub fn save_image_png(img: &Image, path: &Path) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!(
            "PNG export expects 3 channels, got {}",
            img.channels()
        )));
    }
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .ok_or_else(|| Error::Shape("raster does not fill the PNG buffer".into()))?;
    buf.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        Image::from_fn(h, w, c, |r, col, k| (r * 31 + col * 7 + k * 3) as f64 % 256.0)
    }

    #[test]
    fn grid_spot_values() {
        let grid = build_polar_grid(PolarConfig::default()).unwrap();
        let (x, y) = grid.source(0, 0);
        assert_abs_diff_eq!(x, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(y, 256.0, epsilon = 1e-9);
        let (x, y) = grid.source(0, 128);
        assert_abs_diff_eq!(x, 256.0, epsilon = 1e-9);
        assert_abs_diff_eq!(y, 512.0, epsilon = 1e-9);
        for y_t in [0.0, 17.0, 200.0, 511.0] {
            let (x, y) = PolarConfig::default().source_coordinate(128.0, y_t);
            assert_abs_diff_eq!(x, 256.0, epsilon = 1e-9);
            assert_abs_diff_eq!(y, 256.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn grid_rejects_zero_dimensions() {
        assert!(build_polar_grid(PolarConfig {
            aerial_size: 0,
            target_height: 4,
            target_width: 4
        })
        .is_err());
        assert!(PolarConfig::new(8, 0, 4).is_err());
        assert!(PolarConfig::new(8, 4, 0).is_err());
    }

    #[test]
    fn grid_coordinates_stay_inside_aerial_extent() {
        let cfg = PolarConfig::new(64, 16, 48).unwrap();
        let grid = build_polar_grid(cfg).unwrap();
        for x_t in 0..16 {
            for y_t in 0..48 {
                let (x, y) = grid.source(x_t, y_t);
                assert!((-1e-9..=64.0 + 1e-9).contains(&x));
                assert!((-1e-9..=64.0 + 1e-9).contains(&y));
            }
        }
    }

    #[test]
    fn polar_transform_constant_and_shape() {
        let aerial = Image::filled(512, 512, 3, 77.0);
        let out = polar_transform(&aerial, PolarConfig::default()).unwrap();
        assert_eq!(out.shape(), (128, 512, 3));
        assert!(out.data().iter().all(|&v| v == 77.0));
    }

    #[test]
    fn polar_transform_rejects_bad_inputs() {
        let cfg = PolarConfig::new(16, 4, 8).unwrap();
        assert!(polar_transform(&Image::zeros(16, 15, 3), cfg).is_err());
        assert!(polar_transform(&Image::zeros(15, 15, 3), cfg).is_err());
    }

    #[test]
    fn polar_bottom_row_samples_near_centre() {
        // Bottom row sits at radius D_s / (2 H_v) = 2 pixels from the centre.
        let cfg = PolarConfig::new(64, 16, 32).unwrap();
        let grid = build_polar_grid(cfg).unwrap();
        for y_t in 0..32 {
            let (x, y) = grid.source(15, y_t);
            let r = ((x - 32.0).powi(2) + (y - 32.0).powi(2)).sqrt();
            assert_abs_diff_eq!(r, 2.0, epsilon = 1e-9);
        }
        let mut aerial = Image::zeros(64, 64, 1);
        for r in 29..36 {
            for c in 29..36 {
                aerial.set(r, c, 0, 200.0);
            }
        }
        let out = polar_transform(&aerial, cfg).unwrap();
        for y_t in 0..32 {
            assert_eq!(out.get(15, y_t, 0), 200.0);
        }
        assert_eq!(out.get(0, 0, 0), 0.0);
    }

    #[test]
    fn bilinear_examples() {
        let img = ramp(10, 10, 2);
        assert_eq!(bilinear_sample(&img, 3.0, 7.0), img.pixel(3, 7).to_vec());
        let pair = Image::from_vec(1, 2, 1, vec![0.0, 10.0]).unwrap();
        assert_eq!(bilinear_sample(&pair, 0.0, 0.5), vec![5.0]);
        assert_eq!(bilinear_sample(&img, -2.5, 0.0), img.pixel(0, 0).to_vec());
        assert_eq!(bilinear_sample(&img, 100.0, 100.0), img.pixel(9, 9).to_vec());
    }

    #[test]
    fn fov_crop_examples() {
        let pano = ramp(2, 512, 3);
        let half = fov_crop(&pano, 180.0, 0).unwrap();
        assert_eq!(half.width(), 256);
        assert_eq!(half.pixel(1, 255), pano.pixel(1, 255));
        let quarter = fov_crop(&pano, 90.0, 480).unwrap();
        assert_eq!(quarter.width(), 128);
        assert_eq!(quarter.pixel(0, 31), pano.pixel(0, 511));
        assert_eq!(quarter.pixel(0, 32), pano.pixel(0, 0));
        assert_eq!(quarter.pixel(1, 127), pano.pixel(1, 95));
        assert_eq!(fov_crop(&pano, 70.0, 3).unwrap().width(), 99);
        assert_eq!(fov_crop(&pano, 360.0, 0).unwrap(), pano);
    }

    #[test]
    fn fov_crop_rejects_invalid() {
        let pano = ramp(2, 16, 1);
        assert!(fov_crop(&pano, 0.0, 0).is_err());
        assert!(fov_crop(&pano, 361.0, 0).is_err());
        assert!(fov_crop(&pano, f64::NAN, 0).is_err());
        assert!(fov_crop(&pano, 90.0, 16).is_err());
        assert!(fov_crop(&pano, 10.0, 0).is_err());
    }

    #[test]
    fn normalize_examples() {
        let stats = NormalizationStats::identity(1);
        let px = Image::filled(1, 1, 1, 255.0);
        assert_eq!(normalize_image(&px, &stats).unwrap().get(0, 0, 0), 1.0);

        let mu = 0.3;
        let stats = NormalizationStats::new(vec![mu], vec![1.0]).unwrap();
        let px = Image::filled(1, 1, 1, 255.0 * mu);
        assert_abs_diff_eq!(normalize_image(&px, &stats).unwrap().get(0, 0, 0), 0.0, epsilon = 1e-15);

        let stats = NormalizationStats::new(vec![0.5], vec![0.25]).unwrap();
        let px = Image::filled(1, 1, 1, 128.0);
        let expected = (128.0 / 255.0 - 0.5) / 0.25;
        assert_abs_diff_eq!(normalize_image(&px, &stats).unwrap().get(0, 0, 0), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.00784, epsilon = 1e-5);
    }

    #[test]
    fn normalize_errors() {
        let img = Image::zeros(1, 1, 3);
        assert!(normalize_image(&img, &NormalizationStats::identity(2)).is_err());
        assert!(NormalizationStats::new(vec![0.0], vec![0.0]).is_err());
        let bad = NormalizationStats {
            mean: vec![0.0; 3],
            std: vec![1.0, -1.0, 1.0],
            clamped_channels: vec![],
        };
        assert!(normalize_image(&img, &bad).is_err());
    }

    #[test]
    fn stats_examples() {
        let white = Image::filled(3, 3, 3, 255.0);
        let s = compute_dataset_stats([&white]).unwrap();
        assert_eq!(s.mean, vec![1.0; 3]);
        assert_eq!(s.std, vec![STD_FLOOR; 3]);
        assert_eq!(s.clamped_channels, vec![0, 1, 2]);

        let black = Image::zeros(3, 3, 3);
        let s = compute_dataset_stats([&black, &white]).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(s.mean[k], 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(s.std[k], 0.5, epsilon = 1e-12);
        }
        assert!(s.clamped_channels.is_empty());
    }

    #[test]
    fn stats_errors() {
        assert!(compute_dataset_stats(std::iter::empty::<&Image>()).is_err());
        let a = Image::zeros(1, 1, 3);
        let b = Image::zeros(1, 1, 1);
        assert!(compute_dataset_stats([&a, &b]).is_err());
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let img = Image::from_fn(4, 4, 3, |_, _, _| rng.random_range(0..=255) as f64);
        let s = compute_dataset_stats([&img]).unwrap();
        for k in 0..3 {
            let vals: Vec<f64> = img.data().iter().skip(k).step_by(3).map(|v| v / 255.0).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert_abs_diff_eq!(s.mean[k], mean, epsilon = 1e-9);
            assert_abs_diff_eq!(s.std[k], var.sqrt(), epsilon = 1e-9);
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ramp(4, 6, 3);
        assert_eq!(resize_bilinear(&img, 4, 6).unwrap(), img);
        let c = Image::filled(5, 9, 3, 12.0);
        let r = resize_bilinear(&c, 3, 4).unwrap();
        assert!(r.data().iter().all(|&v| (v - 12.0).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn crop_commutes_with_rotation(k in 0usize..40, offset in 0usize..40, fov in 1.0f64..=360.0) {
            let pano = ramp(2, 40, 2);
            // Rotating left by k then cropping at offset equals cropping at offset + k.
            let rotated = pano.crop_columns_circular(k, 40);
            let a = fov_crop(&rotated, fov, offset);
            let b = fov_crop(&pano, fov, (offset + k) % 40);
            match (a, b) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "crop validity diverged"),
            }
        }

        #[test]
        fn normalize_round_trip(vals in proptest::collection::vec(0.0f64..=255.0, 12),
                                mean in proptest::collection::vec(-1.0f64..2.0, 3),
                                std in proptest::collection::vec(0.01f64..3.0, 3)) {
            let img = Image::from_vec(2, 2, 3, vals).unwrap();
            let stats = NormalizationStats::new(mean, std).unwrap();
            let back = denormalize_image(&normalize_image(&img, &stats).unwrap(), &stats).unwrap();
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn bilinear_integer_coordinates_exact(r in 0usize..10, c in 0usize..10) {
            let img = ramp(10, 10, 3);
            prop_assert_eq!(bilinear_sample(&img, r as f64, c as f64), img.pixel(r, c).to_vec());
        }
    }
}
