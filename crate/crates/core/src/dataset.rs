//! Triplet manifests, deterministic splits, preprocessing and the tensor cache.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageops::{
    build_polar_grid, fov_crop, load_image, normalize_image, resize_bilinear, warp_with_grid,
    NormalizationStats, PolarConfig, PolarGrid, StatsAccumulator,
};
use crate::tensor::Image;
use crate::tensorfile::{self, NamedTensor};

pub const DEFAULT_TRAIN_COUNT: usize = 6647;
pub const DEFAULT_TEST_COUNT: usize = 2215;

/// One location: ground panorama, aerial image and segmentation mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletSample {
    pub id: String,
    pub ground_path: PathBuf,
    pub aerial_path: PathBuf,
    pub mask_path: PathBuf,
}

#[derive(serde::Deserialize)]
struct ManifestRow {
    id: String,
    ground: String,
    aerial: String,
    mask: String,
}

/// Reads a `id,ground,aerial,mask` CSV. Relative paths are resolved against the
/// manifest's directory. With `check_exists` every referenced file must exist.
pub fn load_manifest(path: &Path, check_exists: bool) -> Result<Vec<TripletSample>> {
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new("")), check_exists)
}

pub fn parse_manifest(bytes: &[u8], base: &Path, check_exists: bool) -> Result<Vec<TripletSample>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| Error::Manifest { line: 1, msg: e.to_string() })?
        .clone();
    let expected = ["id", "ground", "aerial", "mask"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Manifest {
            line: 1,
            msg: format!("expected header `id,ground,aerial,mask`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Manifest {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: format!("malformed row: {e}"),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let row: ManifestRow = record.deserialize(Some(&headers)).map_err(|e| Error::Manifest {
            line,
            msg: format!("malformed row: {e}"),
        })?;
        if row.id.is_empty() {
            return Err(Error::Manifest { line, msg: "empty id".into() });
        }
        if let Some(first) = seen.insert(row.id.clone(), line) {
            return Err(Error::Manifest {
                line,
                msg: format!("duplicate id `{}` (first seen on line {first})", row.id),
            });
        }
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let sample = TripletSample {
            id: row.id,
            ground_path: resolve(&row.ground),
            aerial_path: resolve(&row.aerial),
            mask_path: resolve(&row.mask),
        };
        if check_exists {
            for p in [&sample.ground_path, &sample.aerial_path, &sample.mask_path] {
                if !p.is_file() {
                    return Err(Error::Manifest {
                        line,
                        msg: format!("sample `{}` references missing file {}", sample.id, p.display()),
                    });
                }
            }
        }
        out.push(sample);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: DEFAULT_TRAIN_COUNT,
            test: DEFAULT_TEST_COUNT,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<TripletSample>,
    pub test: Vec<TripletSample>,
}

/// Sorts samples by id, applies a seeded permutation, then takes the first
/// `train` samples for training and the next `test` for testing.
pub fn split_dataset(samples: &[TripletSample], spec: &SplitSpec) -> Result<Split> {
    let needed = spec.train.checked_add(spec.test).unwrap_or(usize::MAX);
    if needed > samples.len() {
        return Err(Error::InvalidArgument(format!(
            "split of {} train + {} test exceeds the {} available samples",
            spec.train,
            spec.test,
            samples.len()
        )));
    }
    let mut sorted: Vec<&TripletSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    sorted.shuffle(&mut rng);
    Ok(Split {
        train: sorted[..spec.train].iter().map(|s| (*s).clone()).collect(),
        test: sorted[spec.train..needed].iter().map(|s| (*s).clone()).collect(),
    })
}

/// Writes the split membership as `id,split` rows.
pub fn write_split(path: &Path, split: &Split) -> Result<()> {
    let mut text = String::from("id,split\n");
    for (name, part) in [("train", &split.train), ("test", &split.test)] {
        for s in part {
            let _ = writeln!(text, "{},{name}", s.id);
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a split sidecar back as `(train ids, test ids)` in file order.
pub fn read_split(path: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Manifest { line: i + 2, msg: e.to_string() })?;
        let (id, part) = (rec.get(0).unwrap_or(""), rec.get(1).unwrap_or(""));
        match part {
            "train" => train.push(id.to_string()),
            "test" => test.push(id.to_string()),
            other => {
                return Err(Error::Manifest {
                    line: i + 2,
                    msg: format!("unknown split `{other}`"),
                })
            }
        }
    }
    Ok((train, test))
}

/// Shapes of the preprocessed tensors. Ground panoramas are resized to
/// `target_height × target_width` of the polar grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PreprocessConfig {
    pub polar: PolarConfig,
}

/// Normalization statistics, one set per image kind.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub ground: NormalizationStats,
    pub aerial: NormalizationStats,
    pub mask: NormalizationStats,
}

impl DatasetStats {
    pub fn identity() -> Self {
        DatasetStats {
            ground: NormalizationStats::identity(3),
            aerial: NormalizationStats::identity(3),
            mask: NormalizationStats::identity(3),
        }
    }

    /// `kind.mean = a,b,c` / `kind.std = a,b,c` lines.
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        for (name, s) in [("ground", &self.ground), ("aerial", &self.aerial), ("mask", &self.mask)] {
            let _ = writeln!(out, "{name}.mean = {}", join(&s.mean));
            let _ = writeln!(out, "{name}.std = {}", join(&s.std));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("stats line {}: expected `key = values`", i + 1)))?;
            let values = v
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("stats line {}: {e}", i + 1)))?;
            map.insert(k.trim().to_string(), values);
        }
        let mut get = |kind: &str| -> Result<NormalizationStats> {
            let mean = map
                .remove(&format!("{kind}.mean"))
                .ok_or_else(|| Error::Format(format!("stats missing `{kind}.mean`")))?;
            let std = map
                .remove(&format!("{kind}.std"))
                .ok_or_else(|| Error::Format(format!("stats missing `{kind}.std`")))?;
            NormalizationStats::new(mean, std)
        };
        Ok(DatasetStats {
            ground: get("ground")?,
            aerial: get("aerial")?,
            mask: get("mask")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Resized ground panorama and polar-transformed aerial and mask, still in raw
/// pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTriplet {
    pub id: String,
    pub ground: Image,
    pub aerial: Image,
    pub mask: Image,
}

/// Normalized tensors of one location, stored at `f32` precision. The ground
/// panorama keeps its full width; FoV crops are taken at load time.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletTensors {
    pub id: String,
    pub ground: Image,
    pub aerial: Image,
    pub mask: Image,
}

/// Shares one polar sampling grid across all samples.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    config: PreprocessConfig,
    grid: PolarGrid,
}

impl Preprocessor {
    pub fn new(config: PreprocessConfig) -> Result<Self> {
        let grid = build_polar_grid(config.polar)?;
        Ok(Preprocessor { config, grid })
    }

    pub fn config(&self) -> &PreprocessConfig {
        &self.config
    }

    /// Maps decoded images to the network's input geometry.
    pub fn prepare(&self, id: &str, ground: &Image, aerial: &Image, mask: &Image) -> Result<RawTriplet> {
        let p = &self.config.polar;
        for (what, img) in [("aerial", aerial), ("mask", mask)] {
            if img.height() != img.width() {
                return Err(Error::Shape(format!(
                    "sample `{id}`: {what} image is {}×{}, expected square",
                    img.height(),
                    img.width()
                )));
            }
        }
        let fit = |img: &Image| -> Result<Image> {
            if img.height() == p.aerial_size {
                Ok(img.clone())
            } else {
                resize_bilinear(img, p.aerial_size, p.aerial_size)
            }
        };
        let ground = if ground.height() == p.target_height && ground.width() == p.target_width {
            ground.clone()
        } else {
            resize_bilinear(ground, p.target_height, p.target_width)?
        };
        Ok(RawTriplet {
            id: id.to_string(),
            ground,
            aerial: warp_with_grid(&fit(aerial)?, &self.grid)?,
            mask: warp_with_grid(&fit(mask)?, &self.grid)?,
        })
    }

    /// Decodes and prepares the files of one sample.
    pub fn load_raw(&self, sample: &TripletSample) -> Result<RawTriplet> {
        let ground = load_image(&sample.ground_path)?;
        let aerial = load_image(&sample.aerial_path)?;
        let mask = load_image(&sample.mask_path)?;
        self.prepare(&sample.id, &ground, &aerial, &mask)
    }
}

/// Per-kind statistics accumulated one triplet at a time.
#[derive(Debug, Clone, Default)]
pub struct DatasetStatsAccumulator {
    ground: StatsAccumulator,
    aerial: StatsAccumulator,
    mask: StatsAccumulator,
}

impl DatasetStatsAccumulator {
    pub fn push(&mut self, raw: &RawTriplet) -> Result<()> {
        self.ground.push(&raw.ground)?;
        self.aerial.push(&raw.aerial)?;
        self.mask.push(&raw.mask)
    }

    pub fn finish(self) -> Result<DatasetStats> {
        Ok(DatasetStats {
            ground: self.ground.finish()?,
            aerial: self.aerial.finish()?,
            mask: self.mask.finish()?,
        })
    }
}

/// Per-kind statistics over a set of prepared triplets.
pub fn compute_stats(raws: &[RawTriplet]) -> Result<DatasetStats> {
    let mut acc = DatasetStatsAccumulator::default();
    for r in raws {
        acc.push(r)?;
    }
    acc.finish()
}

pub fn normalize_triplet(raw: &RawTriplet, stats: &DatasetStats) -> Result<TripletTensors> {
    let norm = |img: &Image, s: &NormalizationStats| -> Result<Image> {
        let mut out = normalize_image(img, s)?;
        out.round_to_f32();
        Ok(out)
    };
    Ok(TripletTensors {
        id: raw.id.clone(),
        ground: norm(&raw.ground, &stats.ground)?,
        aerial: norm(&raw.aerial, &stats.aerial)?,
        mask: norm(&raw.mask, &stats.mask)?,
    })
}

/// Decodes, prepares and normalizes a sample, then crops the ground panorama
/// to `fov_deg` starting at column `offset`.
pub fn load_triplet(
    sample: &TripletSample,
    pre: &Preprocessor,
    stats: &DatasetStats,
    fov_deg: f64,
    offset: usize,
) -> Result<TripletTensors> {
    let t = normalize_triplet(&pre.load_raw(sample)?, stats)?;
    crop_ground(&t, fov_deg, offset)
}

pub fn crop_ground(t: &TripletTensors, fov_deg: f64, offset: usize) -> Result<TripletTensors> {
    Ok(TripletTensors {
        id: t.id.clone(),
        ground: fov_crop(&t.ground, fov_deg, offset)?,
        aerial: t.aerial.clone(),
        mask: t.mask.clone(),
    })
}

const CACHE_NAMES: [&str; 3] = ["ground", "aerial", "mask"];

fn image_tensor(name: &str, img: &Image) -> Result<NamedTensor> {
    NamedTensor::from_f64(name, vec![img.height(), img.width(), img.channels()], img.data())
}

pub fn encode_triplet(t: &TripletTensors) -> Result<Vec<u8>> {
    tensorfile::encode(&[
        image_tensor(CACHE_NAMES[0], &t.ground)?,
        image_tensor(CACHE_NAMES[1], &t.aerial)?,
        image_tensor(CACHE_NAMES[2], &t.mask)?,
    ])
}

pub fn decode_triplet(id: &str, bytes: &[u8]) -> Result<TripletTensors> {
    let tensors = tensorfile::decode(bytes)?;
    let get = |name: &str| -> Result<Image> {
        let t = tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if t.dims.len() != 3 {
            return Err(Error::Shape(format!("cached `{name}` has rank {}, expected 3", t.dims.len())));
        }
        Image::from_vec(t.dims[0], t.dims[1], t.dims[2], t.to_f64())
    };
    Ok(TripletTensors {
        id: id.to_string(),
        ground: get("ground")?,
        aerial: get("aerial")?,
        mask: get("mask")?,
    })
}

/// File name of a sample's cache entry. Ids are escaped so any string maps to
/// a single path component.
pub fn cache_file_name(id: &str) -> String {
    let mut out = String::new();
    for b in id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || b == b'.' && !out.is_empty() {
            out.push(b as char);
        } else {
            let _ = write!(out, "%{b:02X}");
        }
    }
    out.push_str(".sanw");
    out
}

/// Outcome of writing one cache entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheWrite {
    Created,
    Unchanged,
    Replaced,
}

/// Writes a cache entry unless an identical one is already present.
pub fn write_cache_entry(dir: &Path, t: &TripletTensors) -> Result<CacheWrite> {
    let path = dir.join(cache_file_name(&t.id));
    let bytes = encode_triplet(t)?;
    let status = match std::fs::read(&path) {
        Ok(existing) if existing == bytes => return Ok(CacheWrite::Unchanged),
        Ok(_) => CacheWrite::Replaced,
        Err(_) => CacheWrite::Created,
    };
    let tmp = dir.join(format!(".{}.tmp{}", cache_file_name(&t.id), std::process::id()));
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(status)
}

pub fn read_cache_entry(dir: &Path, id: &str) -> Result<TripletTensors> {
    let path = dir.join(cache_file_name(id));
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode_triplet(id, &bytes)
}

/// Applies `f` to every item on a small pool of scoped threads, keeping order.
pub fn parallel_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<U>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Ids present in `ids` but missing from `samples`.
pub fn unknown_ids<'a>(samples: &[TripletSample], ids: &'a [String]) -> Vec<&'a str> {
    let known: HashSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    ids.iter().map(String::as_str).filter(|id| !known.contains(id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn samples(n: usize) -> Vec<TripletSample> {
        (0..n)
            .map(|i| TripletSample {
                id: format!("loc{i:05}"),
                ground_path: PathBuf::from(format!("g{i}.png")),
                aerial_path: PathBuf::from(format!("a{i}.png")),
                mask_path: PathBuf::from(format!("m{i}.png")),
            })
            .collect()
    }

    #[test]
    fn manifest_rows_in_file_order() {
        let csv = b"id,ground,aerial,mask\nb,g1.png,a1.png,m1.png\na,g2.png,a2.png,m2.png\nc,/abs/g.png,a3.png,m3.png\n";
        let s = parse_manifest(csv, Path::new("/data"), false).unwrap();
        assert_eq!(s.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["b", "a", "c"]);
        assert_eq!(s[0].ground_path, PathBuf::from("/data/g1.png"));
        assert_eq!(s[2].ground_path, PathBuf::from("/abs/g.png"));
    }

    #[test]
    fn duplicate_id_names_id_and_line() {
        let csv = b"id,ground,aerial,mask\nx,g,a,m\ny,g,a,m\nx,g,a,m\n";
        let err = parse_manifest(csv, Path::new(""), false).unwrap_err().to_string();
        assert!(err.contains("`x`"), "{err}");
        assert!(err.contains("line 4"), "{err}");
    }

    #[test]
    fn malformed_rows_rejected() {
        assert!(parse_manifest(b"id,ground,aerial,mask\nx,g,a\n", Path::new(""), false).is_err());
        assert!(parse_manifest(b"id,ground,aerial\nx,g,a\n", Path::new(""), false).is_err());
    }

    #[test]
    fn missing_file_rejected_when_checked() {
        let csv = b"id,ground,aerial,mask\nx,nope.png,nope.png,nope.png\n";
        assert!(parse_manifest(csv, Path::new("/nonexistent"), true).is_err());
        assert!(parse_manifest(csv, Path::new("/nonexistent"), false).is_ok());
    }

    #[test]
    fn default_split_sizes() {
        let all = samples(8862);
        let split = split_dataset(&all, &SplitSpec::default()).unwrap();
        assert_eq!(split.train.len(), 6647);
        assert_eq!(split.test.len(), 2215);
        assert_eq!(split, split_dataset(&all, &SplitSpec::default()).unwrap());
    }

    #[test]
    fn infeasible_split_rejected() {
        let spec = SplitSpec { train: 8, test: 3, seed: 0 };
        assert!(split_dataset(&samples(10), &spec).is_err());
    }

    #[test]
    fn split_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let split = split_dataset(&samples(10), &SplitSpec { train: 6, test: 3, seed: 4 }).unwrap();
        let path = dir.path().join("split.csv");
        write_split(&path, &split).unwrap();
        let (train, test) = read_split(&path).unwrap();
        assert_eq!(train, split.train.iter().map(|s| s.id.clone()).collect::<Vec<_>>());
        assert_eq!(test, split.test.iter().map(|s| s.id.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn stats_text_round_trip() {
        let stats = DatasetStats {
            ground: NormalizationStats::new(vec![0.1, 0.2, 0.3], vec![0.25, 0.5, 1.0 / 3.0]).unwrap(),
            aerial: NormalizationStats::new(vec![0.4, 0.5, 0.6], vec![0.2, 0.2, 0.2]).unwrap(),
            mask: NormalizationStats::identity(3),
        };
        assert_eq!(DatasetStats::from_text(&stats.to_text()).unwrap(), stats);
    }

    fn toy_triplet() -> (Image, Image, Image) {
        let g = Image::from_fn(16, 64, 3, |r, c, k| ((r * 7 + c * 3 + k * 50) % 256) as f64);
        let a = Image::from_fn(32, 32, 3, |r, c, k| ((r * 5 + c * 11 + k * 30) % 256) as f64);
        let m = Image::from_fn(32, 32, 3, |r, c, k| if (r + c + k) % 3 == 0 { 255.0 } else { 0.0 });
        (g, a, m)
    }

    #[test]
    fn prepared_shapes_and_fov_widths() {
        let pre = Preprocessor::new(PreprocessConfig {
            polar: PolarConfig::new(32, 8, 32).unwrap(),
        })
        .unwrap();
        let (g, a, m) = toy_triplet();
        let raw = pre.prepare("x", &g, &a, &m).unwrap();
        assert_eq!(raw.ground.shape(), (8, 32, 3));
        assert_eq!(raw.aerial.shape(), (8, 32, 3));
        assert_eq!(raw.mask.shape(), (8, 32, 3));
        let t = normalize_triplet(&raw, &DatasetStats::identity()).unwrap();
        assert_eq!(crop_ground(&t, 360.0, 5).unwrap().ground.width(), 32);
        assert_eq!(crop_ground(&t, 90.0, 5).unwrap().ground.width(), 8);
        let bad = Image::zeros(32, 30, 3);
        assert!(pre.prepare("x", &g, &bad, &m).is_err());
    }

    #[test]
    fn cache_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let pre = Preprocessor::new(PreprocessConfig {
            polar: PolarConfig::new(32, 8, 32).unwrap(),
        })
        .unwrap();
        let (g, a, m) = toy_triplet();
        let raw = pre.prepare("loc/1", &g, &a, &m).unwrap();
        let stats = compute_stats(std::slice::from_ref(&raw)).unwrap();
        let fresh = normalize_triplet(&raw, &stats).unwrap();
        assert_eq!(write_cache_entry(dir.path(), &fresh).unwrap(), CacheWrite::Created);
        assert_eq!(write_cache_entry(dir.path(), &fresh).unwrap(), CacheWrite::Unchanged);
        let back = read_cache_entry(dir.path(), "loc/1").unwrap();
        let bits = |i: &Image| i.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.ground), bits(&fresh.ground));
        assert_eq!(bits(&back.aerial), bits(&fresh.aerial));
        assert_eq!(bits(&back.mask), bits(&fresh.mask));
    }

    #[test]
    fn cache_names_are_single_components() {
        assert_eq!(cache_file_name("abc_1"), "abc_1.sanw");
        assert_eq!(cache_file_name("a/b"), "a%2Fb.sanw");
        assert_eq!(cache_file_name(".."), "%2E..sanw");
    }

    #[test]
    fn parallel_map_keeps_order() {
        let v: Vec<usize> = (0..37).collect();
        assert_eq!(parallel_map(&v, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn split_disjoint_exact_and_order_independent(
            n in 1usize..60,
            train_frac in 0.0f64..1.0,
            seed in any::<u64>(),
            perm_seed in any::<u64>(),
        ) {
            let all = samples(n);
            let train = (n as f64 * train_frac) as usize;
            let test = n - train;
            let spec = SplitSpec { train, test: test / 2, seed };
            let a = split_dataset(&all, &spec).unwrap();
            prop_assert_eq!(a.train.len(), spec.train);
            prop_assert_eq!(a.test.len(), spec.test);
            let tr: HashSet<_> = a.train.iter().map(|s| &s.id).collect();
            prop_assert!(a.test.iter().all(|s| !tr.contains(&s.id)));
            let mut shuffled = all.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let b = split_dataset(&shuffled, &spec).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
