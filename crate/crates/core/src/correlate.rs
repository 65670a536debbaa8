//! Circular cross-correlation of ground features against aerial features
//! along the azimuth (width) axis.
//!
//! For shift `i`, the score is
//! `Σ_c Σ_h Σ_w F_s(h, (i + w) mod W_s, c) · F_g(h, w, c)`.
//! [`correlate_naive`] evaluates that triple sum directly and stays around as
//! the oracle; [`correlate_fft`] is the production path.

use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Correlation score for every circular shift of the aerial map.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationProfile {
    pub scores: Vec<f64>,
}

impl CorrelationProfile {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Outcome of matching one ground map against one aerial map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchResult {
    pub best_shift: usize,
    pub orientation_deg: f64,
    /// Euclidean distance of the unit-normalized aligned features, in `[0, 2]`.
    pub distance: f64,
    /// Peak correlation score.
    pub score: f64,
}

fn check_pair(fs: &FeatureMap, fg: &FeatureMap) -> Result<()> {
    if fs.height() != fg.height() || fs.channels() != fg.channels() {
        return Err(Error::Shape(format!(
            "aerial features {:?} and ground features {:?} differ in height or channels",
            fs.shape(),
            fg.shape()
        )));
    }
    if fg.width() > fs.width() {
        return Err(Error::Shape(format!(
            "ground width {} exceeds aerial width {}",
            fg.width(),
            fs.width()
        )));
    }
    if fs.width() == 0 {
        return Err(Error::Shape("aerial features have zero width".into()));
    }
    Ok(())
}

pub fn correlate_naive(fs: &FeatureMap, fg: &FeatureMap) -> Result<CorrelationProfile> {
    check_pair(fs, fg)?;
    let ws = fs.width();
    let scores = (0..ws)
        .map(|i| {
            let mut acc = 0.0;
            for c in 0..fg.channels() {
                for h in 0..fg.height() {
                    for w in 0..fg.width() {
                        acc += fs.get(h, (i + w) % ws, c) * fg.get(h, w, c);
                    }
                }
            }
            acc
        })
        .collect();
    Ok(CorrelationProfile { scores })
}

/// Spectra of one feature map, one length-`W_s` transform per `(h, c)` row,
/// zero-padded when the map is narrower than `W_s`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    height: usize,
    channels: usize,
    len: usize,
    bins: Vec<Complex<f64>>,
}

/// FFT correlation engine with cached plans.
pub struct Correlator {
    planner: FftPlanner<f64>,
    forward: HashMap<usize, Arc<dyn Fft<f64>>>,
    inverse: HashMap<usize, Arc<dyn Fft<f64>>>,
}

impl Default for Correlator {
    fn default() -> Self {
        Correlator {
            planner: FftPlanner::new(),
            forward: HashMap::new(),
            inverse: HashMap::new(),
        }
    }
}

impl Correlator {
    pub fn new() -> Self {
        Self::default()
    }

    fn plan(&mut self, len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
        let (map, planner) = if inverse {
            (&mut self.inverse, &mut self.planner)
        } else {
            (&mut self.forward, &mut self.planner)
        };
        map.entry(len)
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    }

    /// Transforms every `(h, c)` row of `f` at length `len ≥ f.width()`.
    pub fn spectrum(&mut self, f: &FeatureMap, len: usize) -> Spectrum {
        debug_assert!(len >= f.width());
        let fft = self.plan(len, false);
        let (h, w, c) = f.shape();
        let mut bins = vec![Complex::new(0.0, 0.0); h * c * len];
        for row in 0..h {
            for ch in 0..c {
                let dst = &mut bins[(row * c + ch) * len..(row * c + ch + 1) * len];
                for col in 0..w {
                    dst[col] = Complex::new(f.get(row, col, ch), 0.0);
                }
            }
        }
        for chunk in bins.chunks_exact_mut(len) {
            fft.process(chunk);
        }
        Spectrum {
            height: h,
            channels: c,
            len,
            bins,
        }
    }

    /// Correlation profile from precomputed aerial and ground spectra.
    pub fn correlate_spectra(&mut self, aerial: &Spectrum, ground: &Spectrum) -> Result<CorrelationProfile> {
        if aerial.height != ground.height || aerial.channels != ground.channels || aerial.len != ground.len {
            return Err(Error::Shape("spectra were computed for incompatible maps".into()));
        }
        let n = aerial.len;
        let mut acc = vec![Complex::new(0.0, 0.0); n];
        for (a, g) in aerial.bins.chunks_exact(n).zip(ground.bins.chunks_exact(n)) {
            for k in 0..n {
                acc[k] += a[k] * g[k].conj();
            }
        }
        self.plan(n, true).process(&mut acc);
        let scale = 1.0 / n as f64;
        Ok(CorrelationProfile {
            scores: acc.iter().map(|z| z.re * scale).collect(),
        })
    }

    pub fn correlate(&mut self, fs: &FeatureMap, fg: &FeatureMap) -> Result<CorrelationProfile> {
        check_pair(fs, fg)?;
        let n = fs.width();
        let a = self.spectrum(fs, n);
        let g = self.spectrum(fg, n);
        self.correlate_spectra(&a, &g)
    }

    pub fn match_pair(&mut self, fs: &FeatureMap, fg: &FeatureMap) -> Result<MatchResult> {
        let profile = self.correlate(fs, fg)?;
        finish_match(fs, fg, &profile)
    }
}

/// Circular cross-correlation through the convolution theorem: per `(h, c)`
/// row, `IFFT(FFT(aerial) · conj(FFT(zero-padded ground)))`, summed over rows.
pub fn correlate_fft(fs: &FeatureMap, fg: &FeatureMap) -> Result<CorrelationProfile> {
    Correlator::new().correlate(fs, fg)
}

/// Argmax shift (smallest index on ties) and its azimuth in degrees.
pub fn estimate_orientation(profile: &CorrelationProfile) -> (usize, f64) {
    let mut best = 0;
    for (i, &s) in profile.scores.iter().enumerate() {
        if s > profile.scores[best] {
            best = i;
        }
    }
    let deg = if profile.scores.is_empty() {
        0.0
    } else {
        best as f64 * 360.0 / profile.scores.len() as f64
    };
    (best, deg)
}

/// Distance between the unit-normalized ground map and the aerial crop at `shift`.
pub fn aligned_distance(fs: &FeatureMap, fg: &FeatureMap, shift: usize) -> Result<f64> {
    check_pair(fs, fg)?;
    if shift >= fs.width() {
        return Err(Error::InvalidArgument(format!(
            "shift {shift} outside aerial width {}",
            fs.width()
        )));
    }
    let crop = fs.crop_columns_circular(shift, fg.width());
    unit_distance(crop.data(), fg.data())
}

pub(crate) fn unit_distance(a: &[f64], g: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || ng == 0.0 {
        return Err(Error::DegenerateFeatures(format!(
            "zero-norm feature vector (aerial crop {na}, ground {ng})"
        )));
    }
    let d2: f64 = a
        .iter()
        .zip(g)
        .map(|(x, y)| {
            let d = x / na - y / ng;
            d * d
        })
        .sum();
    Ok(d2.sqrt().min(2.0))
}

fn finish_match(fs: &FeatureMap, fg: &FeatureMap, profile: &CorrelationProfile) -> Result<MatchResult> {
    let (best_shift, orientation_deg) = estimate_orientation(profile);
    let distance = aligned_distance(fs, fg, best_shift)?;
    Ok(MatchResult {
        best_shift,
        orientation_deg,
        distance,
        score: profile.scores[best_shift],
    })
}

/// Correlates on the FFT path, picks the orientation, and scores the aligned crop.
pub fn match_pair(fs: &FeatureMap, fg: &FeatureMap) -> Result<MatchResult> {
    Correlator::new().match_pair(fs, fg)
}
