//! Toy cross-view data: random aerial scenes, colour-coded masks, and ground
//! panoramas cut from the polar view of the aerial scene at a known azimuth.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{compute_stats, normalize_triplet, DatasetStats, PreprocessConfig, Preprocessor, RawTriplet, TripletTensors};
use crate::error::{Error, Result};
use crate::imageops::{save_image_png, PolarConfig};
use crate::tensor::Image;

const CLASS_COLOURS: [[f64; 3]; 4] = [[128.0, 128.0, 128.0], [200.0, 40.0, 40.0], [40.0, 170.0, 60.0], [40.0, 60.0, 200.0]];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub count: usize,
    pub polar: PolarConfig,
    /// Standard deviation of the ground noise, in units of the full pixel range.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            count: 32,
            polar: PolarConfig {
                aerial_size: 32,
                target_height: 8,
                target_width: 32,
            },
            noise_std: 0.05,
            seed: 0,
        }
    }
}

/// A generated location with its planted azimuth offset, in panorama columns.
#[derive(Debug, Clone)]
pub struct ToyScene {
    pub raw: RawTriplet,
    pub aerial_square: Image,
    pub mask_square: Image,
    pub offset: usize,
}

struct Blob {
    row: f64,
    col: f64,
    radius: f64,
    class: usize,
    colour: [f64; 3],
}

fn random_scene(size: usize, rng: &mut ChaCha8Rng) -> (Image, Image) {
    let blobs: Vec<Blob> = (0..rng.random_range(3..7))
        .map(|_| Blob {
            row: rng.random_range(0.0..size as f64),
            col: rng.random_range(0.0..size as f64),
            radius: rng.random_range(0.15..0.4) * size as f64,
            class: rng.random_range(1..CLASS_COLOURS.len()),
            colour: [rng.random_range(0.0..255.0), rng.random_range(0.0..255.0), rng.random_range(0.0..255.0)],
        })
        .collect();
    let background: [f64; 3] = [rng.random_range(60.0..190.0), rng.random_range(60.0..190.0), rng.random_range(60.0..190.0)];
    let texture: Vec<f64> = (0..size * size * 3).map(|_| rng.random_range(-30.0..30.0)).collect();
    let mut aerial = Image::zeros(size, size, 3);
    let mut mask = Image::zeros(size, size, 3);
    for r in 0..size {
        for c in 0..size {
            let hit = blobs.iter().rev().find(|b| {
                let (dr, dc) = (r as f64 - b.row, c as f64 - b.col);
                dr * dr + dc * dc <= b.radius * b.radius
            });
            let (colour, class) = hit.map_or((background, 0), |b| (b.colour, b.class));
            for k in 0..3 {
                let v = (colour[k] + texture[(r * size + c) * 3 + k]).clamp(0.0, 255.0);
                aerial.set(r, c, k, v);
                mask.set(r, c, k, CLASS_COLOURS[class][k]);
            }
        }
    }
    (aerial, mask)
}

/// Generates `config.count` scenes in raw pixel units. The ground panorama of
/// scene `i` is the polar aerial view cut at `offset` (ground column `j` shows
/// polar column `offset + j`) plus Gaussian noise.
pub fn toy_scenes(config: &ToyConfig) -> Result<Vec<ToyScene>> {
    if config.count == 0 {
        return Err(Error::InvalidArgument("toy dataset needs at least one scene".into()));
    }
    let pre = Preprocessor::new(PreprocessConfig { polar: config.polar })?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_std * 255.0).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let width = config.polar.target_width;
    let mut out = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let (aerial, mask) = random_scene(config.polar.aerial_size, &mut rng);
        let offset = rng.random_range(0..width);
        let placeholder = Image::zeros(config.polar.target_height, width, 3);
        let mut raw = pre.prepare(&format!("toy{i:04}"), &placeholder, &aerial, &mask)?;
        let mut ground = raw.aerial.crop_columns_circular(offset, width);
        for v in ground.data_mut() {
            *v += noise.sample(&mut rng);
        }
        raw.ground = ground;
        out.push(ToyScene {
            raw,
            aerial_square: aerial,
            mask_square: mask,
            offset,
        });
    }
    Ok(out)
}

/// Normalized toy tensors with statistics computed over the scenes themselves.
pub fn toy_tensors(config: &ToyConfig) -> Result<(Vec<TripletTensors>, Vec<usize>, DatasetStats)> {
    let scenes = toy_scenes(config)?;
    let raws: Vec<RawTriplet> = scenes.iter().map(|s| s.raw.clone()).collect();
    let stats = compute_stats(&raws)?;
    let tensors = raws.iter().map(|r| normalize_triplet(r, &stats)).collect::<Result<Vec<_>>>()?;
    Ok((tensors, scenes.iter().map(|s| s.offset).collect(), stats))
}

/// Writes the scenes as PNG files plus `manifest.csv` and `offsets.csv`
/// (`id,offset`) under `dir`. Returns the manifest path.
pub fn write_toy_dataset(dir: &Path, config: &ToyConfig) -> Result<PathBuf> {
    let scenes = toy_scenes(config)?;
    for sub in ["ground", "aerial", "mask"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = String::from("id,ground,aerial,mask\n");
    let mut offsets = String::from("id,offset\n");
    for s in &scenes {
        let id = &s.raw.id;
        let g = format!("ground/{id}.png");
        let a = format!("aerial/{id}.png");
        let m = format!("mask/{id}.png");
        save_image_png(&s.raw.ground, &dir.join(&g))?;
        save_image_png(&s.aerial_square, &dir.join(&a))?;
        save_image_png(&s.mask_square, &dir.join(&m))?;
        let _ = writeln!(manifest, "{id},{g},{a},{m}");
        let _ = writeln!(offsets, "{id},{}", s.offset);
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    let op = dir.join("offsets.csv");
    std::fs::write(&op, offsets).map_err(|e| Error::io(&op, e))?;
    Ok(path)
}
