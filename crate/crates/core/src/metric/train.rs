use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grad::{loss_gradients, BatchItem, NetworkGrads};
use crate::backbone::{save_weights, WeightBundle};
use crate::dataset::TripletTensors;
use crate::error::{Error, Result};
use crate::imageops::fov_crop;
use crate::network::{Network, NetworkConfig, BRANCHES};
use crate::tensorfile::{self, NamedTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Sharpness of the soft-margin loss.
    pub gamma: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Ground field of view used to crop panoramas during training.
    pub fov_deg: f64,
    /// Apply dropout during training.
    pub dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            gamma: 10.0,
            batch_size: 8,
            seed: 0,
            fov_deg: 360.0,
            dropout: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidConfig(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch size must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("Adam moments must lie in [0, 1) and epsilon > 0".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg <= 360.0) {
            return Err(Error::InvalidConfig(format!("fov {} outside (0, 360]", self.fov_deg)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moment {
    name: String,
    dims: Vec<usize>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam over the trainable convolutions of a [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: Vec<Moment>,
}

fn trainable<'a>(net: &'a Network) -> impl Iterator<Item = (usize, usize, &'a crate::backbone::ConvParams)> + 'a {
    net.branches().into_iter().enumerate().flat_map(|(bi, b)| {
        b.convs()
            .iter()
            .enumerate()
            .skip(b.frozen_convs())
            .map(move |(ci, p)| (bi, ci, p))
    })
}

impl Adam {
    pub fn new(net: &Network, config: &TrainConfig) -> Self {
        let mut moments = Vec::new();
        for (bi, _, p) in trainable(net) {
            for (suffix, dims, len) in [
                ("weight", p.shape.weight_dims(), p.weight.len()),
                ("bias", vec![p.shape.out_channels], p.bias.len()),
            ] {
                moments.push(Moment {
                    name: format!("{}/{}.{suffix}", BRANCHES[bi], p.shape.name),
                    dims,
                    m: vec![0.0; len],
                    v: vec![0.0; len],
                });
            }
        }
        Adam {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            step: 0,
            moments,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Parameters and moments are kept at `f32`
    /// precision, matching the checkpoint format.
    pub fn step(&mut self, net: &mut Network, grads: &NetworkGrads) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps) = (self.learning_rate, self.beta1, self.beta2, self.epsilon);
        let mut slot = 0;
        for (bi, branch) in net.branches_mut().into_iter().enumerate() {
            let frozen = branch.frozen_convs();
            for (ci, p) in branch.convs_mut().iter_mut().enumerate().skip(frozen) {
                let g = grads.branches[bi][ci].as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!("missing gradient for {}/{}", BRANCHES[bi], p.shape.name))
                })?;
                for (param, grad) in [(&mut p.weight, &g.weight), (&mut p.bias, &g.bias)] {
                    let mom = &mut self.moments[slot];
                    slot += 1;
                    for k in 0..param.len() {
                        mom.m[k] = (b1 * mom.m[k] + (1.0 - b1) * grad[k]) as f32 as f64;
                        mom.v[k] = (b2 * mom.v[k] + (1.0 - b2) * grad[k] * grad[k]) as f32 as f64;
                        let update = lr * (mom.m[k] / c1) / ((mom.v[k] / c2).sqrt() + eps);
                        param[k] = (param[k] - update) as f32 as f64;
                    }
                }
            }
        }
        Ok(())
    }

    fn to_named_tensors(&self) -> Result<Vec<NamedTensor>> {
        let mut out = Vec::with_capacity(self.moments.len() * 2);
        for m in &self.moments {
            out.push(NamedTensor::from_f64(format!("m/{}", m.name), m.dims.clone(), &m.m)?);
            out.push(NamedTensor::from_f64(format!("v/{}", m.name), m.dims.clone(), &m.v)?);
        }
        Ok(out)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub network: Network,
    /// Mean batch loss of every epoch.
    pub loss_history: Vec<f64>,
    pub optimizer: Adam,
}

/// Runs the triplet-loss loop. Each epoch shuffles the samples, draws a fresh
/// crop offset for every ground panorama, and takes one Adam step per batch.
pub fn train(dataset: &[TripletTensors], config: &TrainConfig, mut network: Network) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.len() < 2 {
        return Err(Error::Dataset(format!(
            "training needs at least two triplets, got {}",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&network, config);
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let offsets: Vec<usize> = dataset.iter().map(|t| rng.random_range(0..t.ground.width())).collect();
        let mut losses = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = chunk
                .iter()
                .map(|&i| {
                    let t = &dataset[i];
                    Ok(BatchItem {
                        ground: fov_crop(&t.ground, config.fov_deg, offsets[i])?,
                        aerial: t.aerial.clone(),
                        mask: t.mask.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let dropout_seed = config.dropout.then(|| rng.random::<u64>());
            let out = loss_gradients(&network, &batch, config.gamma, dropout_seed)?;
            adam.step(&mut network, &out.grads)?;
            losses.push(out.loss);
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        log::info!("epoch {epoch}/{}: mean loss {mean:.6}", config.epochs);
        history.push(mean);
    }
    Ok(TrainOutcome {
        network,
        loss_history: history,
        optimizer: adam,
    })
}

/// `epoch,mean_loss` rows, epochs counted from 1.
pub fn write_loss_csv(path: &Path, history: &[f64]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("epoch,mean_loss\n");
    for (i, l) in history.iter().enumerate() {
        text.push_str(&format!("{},{}\n", i + 1, l));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn sidecar_paths(weights: &Path) -> (PathBuf, PathBuf) {
    let stem = weights.with_extension("");
    (
        PathBuf::from(format!("{}.opt.txt", stem.display())),
        PathBuf::from(format!("{}.moments.sanw", stem.display())),
    )
}

/// Writes the network weights plus a plain-text optimizer sidecar
/// (`<stem>.opt.txt`) that points at the moment tensors (`<stem>.moments.sanw`).
pub fn save_checkpoint(path: &Path, network: &Network, optimizer: &Adam) -> Result<()> {
    save_weights(&network.to_bundle(), path)?;
    let (opt_path, moments_path) = sidecar_paths(path);
    tensorfile::write_tensor_file(&moments_path, &optimizer.to_named_tensors()?)?;
    let text = format!(
        "step = {}\nlearning_rate = {}\nbeta1 = {}\nbeta2 = {}\nepsilon = {}\nmoments = {}\n",
        optimizer.step,
        optimizer.learning_rate,
        optimizer.beta1,
        optimizer.beta2,
        optimizer.epsilon,
        moments_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    );
    std::fs::write(&opt_path, text).map_err(|e| Error::io(&opt_path, e))
}

/// Loads a checkpoint written by [`save_checkpoint`]. The optimizer sidecar is
/// optional; without it a fresh optimizer is returned.
pub fn load_checkpoint(path: &Path, config: &NetworkConfig, train: &TrainConfig) -> Result<(Network, Adam)> {
    let bundle: WeightBundle = crate::backbone::load_weights(path)?;
    let network = Network::from_bundle(config, &bundle)?;
    let mut adam = Adam::new(&network, train);
    let (opt_path, moments_path) = sidecar_paths(path);
    if let Ok(text) = std::fs::read_to_string(&opt_path) {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                let v = v.trim();
                let parse = |v: &str| -> Result<f64> {
                    v.parse().map_err(|_| Error::Format(format!("bad optimizer value `{v}`")))
                };
                match k.trim() {
                    "step" => adam.step = v.parse().map_err(|_| Error::Format(format!("bad step `{v}`")))?,
                    "learning_rate" => adam.learning_rate = parse(v)?,
                    "beta1" => adam.beta1 = parse(v)?,
                    "beta2" => adam.beta2 = parse(v)?,
                    "epsilon" => adam.epsilon = parse(v)?,
                    _ => {}
                }
            }
        }
        for t in tensorfile::read_tensor_file(&moments_path)? {
            let (kind, name) = t.name.split_at(2);
            if let Some(m) = adam.moments.iter_mut().find(|m| m.name == name) {
                match kind {
                    "m/" => m.m = t.to_f64(),
                    "v/" => m.v = t.to_f64(),
                    _ => {}
                }
            }
        }
    }
    Ok((network, adam))
}
