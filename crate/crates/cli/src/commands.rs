//! Pipeline commands. Each returns a summary value; printing is left to the
//! binary.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crossview_core::backbone::{load_weights, PRETRAINED_CONVS};
use crossview_core::correlate::Correlator;
use crossview_core::dataset::{
    self, load_manifest, read_cache_entry, read_split, split_dataset, write_cache_entry, write_split, CacheWrite,
    DatasetStats, DatasetStatsAccumulator, PreprocessConfig, Preprocessor, TripletSample, TripletTensors,
};
use crossview_core::eval::{emit_report, fov_grid_csv, recall_report, ReportFormat, ReportProvenance};
use crossview_core::imageops::fov_width;
use crossview_core::metric::{pairwise_distance_matrix_with_ids, save_checkpoint, train, write_loss_csv};
use crossview_core::network::Network;
use crossview_core::tensorfile::{read_tensor_file, write_tensor_file, NamedTensor};
use crossview_core::{Error, FeatureMap, RecallReport, Result};

use crate::config::{fov_tag, CropOffset, RunConfig};

const CHUNK: usize = 64;

pub fn split_path(cache: &Path) -> PathBuf {
    cache.join("split.csv")
}

pub fn stats_path(cache: &Path) -> PathBuf {
    cache.join("stats.txt")
}

pub fn tensor_dir(cache: &Path) -> PathBuf {
    cache.join("tensors")
}

pub fn checkpoint_path(cfg: &RunConfig, trained_fov: f64) -> PathBuf {
    cfg.paths.output.join(format!("weights_fov{}.sanw", fov_tag(trained_fov)))
}

pub fn loss_path(cfg: &RunConfig, trained_fov: f64) -> PathBuf {
    cfg.paths.output.join(format!("loss_fov{}.csv", fov_tag(trained_fov)))
}

pub fn feature_store_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.output.join(format!("features_fov{}.sanw", fov_tag(cfg.fov_deg)))
}

pub fn report_path(cfg: &RunConfig, trained: f64, tested: f64, format: ReportFormat) -> PathBuf {
    cfg.paths.output.join(format!(
        "report_train{}_test{}.{}",
        fov_tag(trained),
        fov_tag(tested),
        format.extension()
    ))
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn preprocessor(cfg: &RunConfig) -> Result<Preprocessor> {
    Preprocessor::new(PreprocessConfig { polar: cfg.polar })
}

/// Runs `f` over chunks of `samples` in parallel and joins per-sample failures
/// into one error that names every failing id.
fn for_each_chunk<T: Send>(
    samples: &[TripletSample],
    f: impl Fn(&TripletSample) -> Result<T> + Sync,
    mut sink: impl FnMut(T) -> Result<()>,
) -> Result<()> {
    let mut failures = Vec::new();
    for chunk in samples.chunks(CHUNK) {
        for (s, r) in chunk.iter().zip(dataset::parallel_map(chunk, &f)) {
            match r {
                Ok(v) => sink(v)?,
                Err(e) => failures.push(format!("{}: {e}", s.id)),
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Dataset(format!(
            "{} sample(s) failed: {}",
            failures.len(),
            failures.join("; ")
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreprocessSummary {
    pub samples: usize,
    pub created: usize,
    pub unchanged: usize,
    pub replaced: usize,
}

/// Splits the manifest, computes statistics over the training split, and
/// caches normalized tensors for every sample.
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<PreprocessSummary> {
    let samples = load_manifest(cfg.require_manifest()?, true)?;
    let cache = cfg.require_cache_dir()?;
    let tensors = tensor_dir(cache);
    create_dir(&tensors)?;
    let split = split_dataset(&samples, &cfg.split_spec())?;
    write_split(&split_path(cache), &split)?;
    let pre = preprocessor(cfg)?;

    let mut acc = DatasetStatsAccumulator::default();
    for_each_chunk(&split.train, |s| pre.load_raw(s), |raw| acc.push(&raw))?;
    let stats = acc.finish()?;
    stats.save(&stats_path(cache))?;

    let mut summary = PreprocessSummary {
        samples: samples.len(),
        created: 0,
        unchanged: 0,
        replaced: 0,
    };
    for_each_chunk(
        &samples,
        |s| {
            let t = dataset::normalize_triplet(&pre.load_raw(s)?, &stats)?;
            write_cache_entry(&tensors, &t)
        },
        |status| {
            match status {
                CacheWrite::Created => summary.created += 1,
                CacheWrite::Unchanged => summary.unchanged += 1,
                CacheWrite::Replaced => summary.replaced += 1,
            }
            Ok(())
        },
    )?;
    log::info!(
        "preprocessed {} samples ({} new, {} unchanged, {} rewritten)",
        summary.samples,
        summary.created,
        summary.unchanged,
        summary.replaced
    );
    Ok(summary)
}

/// Ids of the cached split, `(train, test)`.
pub fn cached_split(cfg: &RunConfig) -> Result<(Vec<String>, Vec<String>)> {
    let cache = cfg.require_cache_dir()?;
    let p = split_path(cache);
    if !p.is_file() {
        return Err(Error::InvalidArgument(format!(
            "no split file at {}; run `preprocess` first",
            p.display()
        )));
    }
    read_split(&p)
}

pub fn load_cached(cfg: &RunConfig, ids: &[String]) -> Result<Vec<TripletTensors>> {
    let dir = tensor_dir(cfg.require_cache_dir()?);
    let loaded = dataset::parallel_map(ids, |id| read_cache_entry(&dir, id));
    loaded.into_iter().collect()
}

pub fn load_stats(cfg: &RunConfig) -> Result<DatasetStats> {
    DatasetStats::load(&stats_path(cfg.require_cache_dir()?))
}

/// Weights for a model trained at `trained_fov`: `paths.weights` when set and
/// the FoV is the configured one, otherwise the checkpoint in the output dir.
pub fn load_network(cfg: &RunConfig, trained_fov: f64) -> Result<Network> {
    let path = match &cfg.paths.weights {
        Some(p) if trained_fov == cfg.fov_deg => p.clone(),
        _ => checkpoint_path(cfg, trained_fov),
    };
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!(
            "weight file {} not found; expected a SANW tensor file (magic \"SANW\", version 1) \
             with tensors named `<branch>/conv<i>.weight|bias`, as written by `train`",
            path.display()
        )));
    }
    Network::from_bundle(&cfg.network_config()?, &load_weights(&path)?)
}

/// Start column of the FoV crop for one sample. Random offsets derive from the
/// seed and the id only, so every command and every model sees the same crops.
pub fn crop_offset(cfg: &RunConfig, id: &str, width: usize) -> usize {
    match cfg.crop_offset {
        CropOffset::Fixed(o) => o % width,
        CropOffset::Random => {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in id.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
            ChaCha8Rng::seed_from_u64(cfg.seed ^ h).random_range(0..width)
        }
    }
}

fn ground_features(net: &Network, cfg: &RunConfig, t: &TripletTensors, fov: f64) -> Result<(FeatureMap, usize)> {
    let offset = crop_offset(cfg, &t.id, t.ground.width());
    let crop = crossview_core::imageops::fov_crop(&t.ground, fov, offset)?;
    Ok((net.ground_features(&crop)?, offset))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractSummary {
    pub path: PathBuf,
    pub entries: usize,
    pub aerial_shape: (usize, usize, usize),
    pub ground_shape: (usize, usize, usize),
}

/// Writes `{id}/aerial`, `{id}/ground` and `{id}/offset` for every cached
/// sample into the feature store.
pub fn cmd_extract(cfg: &RunConfig) -> Result<ExtractSummary> {
    let net = load_network(cfg, cfg.fov_deg)?;
    let (train_ids, test_ids) = cached_split(cfg)?;
    let ids: Vec<String> = train_ids.into_iter().chain(test_ids).collect();
    let mut tensors = Vec::with_capacity(ids.len() * 3);
    let mut shapes = ((0, 0, 0), (0, 0, 0));
    for chunk in ids.chunks(CHUNK) {
        let items = load_cached(cfg, chunk)?;
        let feats = dataset::parallel_map(&items, |t| -> Result<_> {
            let fa = net.aerial_features(&t.aerial, &t.mask)?;
            let (fg, offset) = ground_features(&net, cfg, t, cfg.fov_deg)?;
            Ok((fa, fg, offset))
        });
        for (t, f) in items.iter().zip(feats) {
            let (fa, fg, offset) = f?;
            shapes = (fa.shape(), fg.shape());
            let dims = |f: &FeatureMap| vec![f.height(), f.width(), f.channels()];
            tensors.push(NamedTensor::from_f64(format!("{}/aerial", t.id), dims(&fa), fa.data())?);
            tensors.push(NamedTensor::from_f64(format!("{}/ground", t.id), dims(&fg), fg.data())?);
            tensors.push(NamedTensor::new(format!("{}/offset", t.id), vec![1], vec![offset as f32])?);
        }
    }
    create_dir(&cfg.paths.output)?;
    let path = feature_store_path(cfg);
    write_tensor_file(&path, &tensors)?;
    Ok(ExtractSummary {
        path,
        entries: ids.len(),
        aerial_shape: shapes.0,
        ground_shape: shapes.1,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedMatch {
    pub id: String,
    pub distance: f64,
    pub orientation_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSummary {
    pub query: String,
    /// Start column of the query's FoV crop in its panorama.
    pub query_offset: usize,
    pub k: usize,
    pub ranked: Vec<RankedMatch>,
}

struct FeatureStore {
    ids: Vec<String>,
    aerial: Vec<FeatureMap>,
    ground: Vec<FeatureMap>,
    offsets: Vec<usize>,
}

fn read_feature_store(path: &Path) -> Result<FeatureStore> {
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!(
            "feature store {} not found; run `extract` first",
            path.display()
        )));
    }
    let mut store = FeatureStore {
        ids: Vec::new(),
        aerial: Vec::new(),
        ground: Vec::new(),
        offsets: Vec::new(),
    };
    let to_map = |t: &NamedTensor| -> Result<FeatureMap> {
        if t.dims.len() != 3 {
            return Err(Error::Shape(format!("feature `{}` has rank {}", t.name, t.dims.len())));
        }
        FeatureMap::from_vec(t.dims[0], t.dims[1], t.dims[2], t.to_f64())
    };
    for t in read_tensor_file(path)? {
        let (id, kind) = t
            .name
            .rsplit_once('/')
            .ok_or_else(|| Error::Format(format!("unexpected feature entry `{}`", t.name)))?;
        match kind {
            "aerial" => {
                store.ids.push(id.to_string());
                store.aerial.push(to_map(&t)?);
            }
            "ground" => store.ground.push(to_map(&t)?),
            "offset" => store.offsets.push(t.values.first().copied().unwrap_or(0.0) as usize),
            _ => return Err(Error::Format(format!("unexpected feature entry `{}`", t.name))),
        }
    }
    if store.ground.len() != store.ids.len() || store.offsets.len() != store.ids.len() {
        return Err(Error::Format("feature store entries are incomplete".into()));
    }
    Ok(store)
}

/// Ranks every aerial entry of the feature store against one ground query.
pub fn cmd_match(cfg: &RunConfig, query: &str, k: usize) -> Result<MatchSummary> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let store = read_feature_store(&feature_store_path(cfg))?;
    let q = store
        .ids
        .iter()
        .position(|id| id == query)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown query id `{query}`")))?;
    let n = store.ids.len();
    let k_used = if k > n {
        log::warn!("k = {k} exceeds the gallery size {n}; clamping");
        n
    } else {
        k
    };
    let mut corr = Correlator::new();
    let mut scored = Vec::with_capacity(n);
    for (i, fs) in store.aerial.iter().enumerate() {
        let m = corr.match_pair(fs, &store.ground[q])?;
        scored.push((i, m.distance, m.orientation_deg));
    }
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(MatchSummary {
        query: query.to_string(),
        query_offset: store.offsets[q],
        k: k_used,
        ranked: scored
            .into_iter()
            .take(k_used)
            .map(|(i, distance, orientation_deg)| RankedMatch {
                id: store.ids[i].clone(),
                distance,
                orientation_deg,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub loss_history: Vec<f64>,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
}

/// Trains on the cached training split at the configured FoV.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let (train_ids, _) = cached_split(cfg)?;
    let data = load_cached(cfg, &train_ids)?;
    let net_cfg = cfg.network_config()?;
    let net = match &cfg.paths.pretrained {
        Some(p) => {
            let bundle = load_weights(p)?;
            let count = PRETRAINED_CONVS.min(net_cfg.ground.conv_count());
            Network::with_pretrained(&net_cfg, &bundle, count, cfg.seed)?
        }
        None => Network::random(&net_cfg, cfg.seed)?,
    };
    let before = net.frozen_hash();
    let outcome = train(&data, &cfg.train_config(), net)?;
    create_dir(&cfg.paths.output)?;
    let checkpoint = checkpoint_path(cfg, cfg.fov_deg);
    save_checkpoint(&checkpoint, &outcome.network, &outcome.optimizer)?;
    let loss_csv = loss_path(cfg, cfg.fov_deg);
    write_loss_csv(&loss_csv, &outcome.loss_history)?;
    Ok(TrainSummary {
        checkpoint,
        loss_csv,
        loss_history: outcome.loss_history,
        frozen_hash_before: before,
        frozen_hash_after: outcome.network.frozen_hash(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCell {
    pub trained_fov: f64,
    pub tested_fov: f64,
    pub path: PathBuf,
    pub report: RecallReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub cells: Vec<EvalCell>,
    /// Written when more than one report was produced.
    pub grid: Option<PathBuf>,
}

/// Evaluates every trained-FoV model against every tested FoV on the test
/// split. Empty lists default to the configured FoV.
pub fn cmd_eval(cfg: &RunConfig, trained: &[f64], tested: &[f64], format: ReportFormat) -> Result<EvalSummary> {
    let trained = if trained.is_empty() { vec![cfg.fov_deg] } else { trained.to_vec() };
    let tested = if tested.is_empty() { vec![cfg.fov_deg] } else { tested.to_vec() };
    for &f in trained.iter().chain(&tested) {
        crate::config::check_fov(f)?;
    }
    let (_, test_ids) = cached_split(cfg)?;
    if test_ids.is_empty() {
        return Err(Error::Dataset("the test split is empty".into()));
    }
    let data = load_cached(cfg, &test_ids)?;
    for &f in &tested {
        fov_width(data[0].ground.width(), f)?;
    }
    create_dir(&cfg.paths.output)?;
    let mut cells = Vec::new();
    for &t in &trained {
        let net = load_network(cfg, t)?;
        let aerial = dataset::parallel_map(&data, |d| net.aerial_features(&d.aerial, &d.mask))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        for &f in &tested {
            let ground = dataset::parallel_map(&data, |d| ground_features(&net, cfg, d, f).map(|g| g.0))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let d = pairwise_distance_matrix_with_ids(&ground, &aerial, test_ids.clone(), test_ids.clone())?;
            let report = recall_report(
                &d,
                f,
                ReportProvenance {
                    config_hash: cfg.hash(),
                    seed: cfg.seed,
                    trained_fov_deg: Some(t),
                },
            )?;
            let path = report_path(cfg, t, f, format);
            emit_report(&report, &path, format)?;
            cells.push(EvalCell {
                trained_fov: t,
                tested_fov: f,
                path,
                report,
            });
        }
    }
    let grid = if cells.len() > 1 {
        let p = cfg.paths.output.join("fov_grid.csv");
        let rows: Vec<(f64, RecallReport)> = cells.iter().map(|c| (c.trained_fov, c.report.clone())).collect();
        std::fs::write(&p, fov_grid_csv(&rows)).map_err(|e| Error::io(&p, e))?;
        Some(p)
    } else {
        None
    };
    Ok(EvalSummary { cells, grid })
}

/// Writes a toy dataset and a matching config file into `dir`.
pub fn cmd_synth(dir: &Path, count: usize, seed: u64) -> Result<PathBuf> {
    use crossview_core::synthetic::{write_toy_dataset, ToyConfig};
    create_dir(dir)?;
    let toy = ToyConfig {
        count,
        seed,
        ..ToyConfig::default()
    };
    write_toy_dataset(dir, &toy)?;
    let test = (count / 4).max(1).min(count);
    let text = format!(
        "# toy run generated by `crossview synth`\n\
         paths.manifest = manifest.csv\n\
         paths.cache_dir = cache\n\
         paths.output = run\n\
         fov = 360\n\
         seed = {seed}\n\
         polar.aerial_size = {}\n\
         polar.hv = {}\n\
         polar.wv = {}\n\
         backbone.preset = reduced\n\
         backbone.hidden = 8\n\
         backbone.dropout = false\n\
         train.epochs = 30\n\
         train.lr = 0.001\n\
         train.batch_size = 8\n\
         split.train = {}\n\
         split.test = {test}\n",
        toy.polar.aerial_size,
        toy.polar.target_height,
        toy.polar.target_width,
        count - test,
    );
    let path = dir.join("config.txt");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
