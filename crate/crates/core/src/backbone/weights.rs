use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::tensorfile::{self, NamedTensor};

const PROVENANCE_PREFIX: &str = "meta.provenance=";

/// Where a bundle's initial values came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Pretrained,
    Random { seed: u64 },
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Pretrained => write!(f, "pretrained"),
            Provenance::Random { seed } => write!(f, "random:{seed}"),
        }
    }
}

impl Provenance {
    fn parse(s: &str) -> Result<Self> {
        if s == "pretrained" {
            return Ok(Provenance::Pretrained);
        }
        s.strip_prefix("random:")
            .and_then(|n| n.parse().ok())
            .map(|seed| Provenance::Random { seed })
            .ok_or_else(|| Error::Format(format!("unrecognised provenance tag `{s}`")))
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named convolution kernels and biases plus their provenance.
///
/// Tensors keep insertion order, which is also the order they are written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    tensors: Vec<ParamTensor>,
    pub provenance: Provenance,
}

impl WeightBundle {
    pub fn new(provenance: Provenance) -> Self {
        WeightBundle {
            tensors: Vec::new(),
            provenance,
        }
    }

    /// Fan-in scaled uniform initialization: kernels drawn from
    /// `U(−√(6/fan_in), √(6/fan_in))` with `fan_in = 9·C_in`, biases zero.
    /// Values are drawn at `f32` precision so that saving is lossless.
    pub fn random(config: &BackboneConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bundle = WeightBundle::new(Provenance::Random { seed });
        for shape in config.conv_shapes() {
            let fan_in = (9 * shape.in_channels) as f64;
            let limit = (6.0 / fan_in).sqrt() as f32;
            let n = 9 * shape.in_channels * shape.out_channels;
            let w = (0..n).map(|_| f64::from(rng.random_range(-limit..limit))).collect();
            bundle.tensors.push(ParamTensor {
                name: shape.weight_name(),
                dims: shape.weight_dims(),
                values: w,
            });
            bundle.tensors.push(ParamTensor {
                name: shape.bias_name(),
                dims: vec![shape.out_channels],
                values: vec![0.0; shape.out_channels],
            });
        }
        bundle
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Inserts or replaces a tensor.
    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if dims.iter().product::<usize>() != values.len() {
            return Err(Error::Shape(format!(
                "tensor `{name}` has dims {dims:?} but {} values",
                values.len()
            )));
        }
        let t = ParamTensor { name, dims, values };
        match self.tensors.iter_mut().find(|x| x.name == t.name) {
            Some(slot) => *slot = t,
            None => self.tensors.push(t),
        }
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamTensor> {
        let i = self.tensors.iter().position(|t| t.name == name)?;
        Some(self.tensors.remove(i))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Copies the kernels and biases of the first `count` convolutions from `source`.
    pub fn overlay_convs(&mut self, config: &BackboneConfig, source: &WeightBundle, count: usize) -> Result<()> {
        for shape in config.conv_shapes().into_iter().take(count) {
            for (name, dims) in [
                (shape.weight_name(), shape.weight_dims()),
                (shape.bias_name(), vec![shape.out_channels]),
            ] {
                let t = source.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
                if t.dims != dims {
                    return Err(Error::Shape(format!(
                        "pretrained `{name}` has dims {:?}, expected {dims:?}",
                        t.dims
                    )));
                }
                self.insert(name, dims, t.values.clone())?;
            }
        }
        Ok(())
    }

    /// Tensors with `prefix` prepended to every name.
    pub fn prefixed(&self, prefix: &str) -> Vec<ParamTensor> {
        self.tensors
            .iter()
            .map(|t| ParamTensor {
                name: format!("{prefix}{}", t.name),
                ..t.clone()
            })
            .collect()
    }

    /// Sub-bundle of tensors whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> WeightBundle {
        WeightBundle {
            tensors: self
                .tensors
                .iter()
                .filter_map(|t| {
                    t.name.strip_prefix(prefix).map(|n| ParamTensor {
                        name: n.to_string(),
                        ..t.clone()
                    })
                })
                .collect(),
            provenance: self.provenance,
        }
    }

    pub fn extend(&mut self, tensors: impl IntoIterator<Item = ParamTensor>) -> Result<()> {
        for t in tensors {
            self.insert(t.name, t.dims, t.values)?;
        }
        Ok(())
    }

    pub fn to_named_tensors(&self) -> Result<Vec<NamedTensor>> {
        let mut out = Vec::with_capacity(self.tensors.len() + 1);
        for t in &self.tensors {
            out.push(NamedTensor::from_f64(t.name.clone(), t.dims.clone(), &t.values)?);
        }
        out.push(NamedTensor::new(
            format!("{PROVENANCE_PREFIX}{}", self.provenance),
            vec![0],
            vec![],
        )?);
        Ok(out)
    }

    /// Files without a provenance entry (e.g. exported ImageNet weights) are
    /// tagged pretrained.
    pub fn from_named_tensors(tensors: Vec<NamedTensor>) -> Result<Self> {
        let mut bundle = WeightBundle::new(Provenance::Pretrained);
        for t in tensors {
            if let Some(tag) = t.name.strip_prefix(PROVENANCE_PREFIX) {
                bundle.provenance = Provenance::parse(tag)?;
                continue;
            }
            let values = t.to_f64();
            bundle.tensors.push(ParamTensor {
                name: t.name,
                dims: t.dims,
                values,
            });
        }
        Ok(bundle)
    }
}

pub fn save_weights(bundle: &WeightBundle, path: &Path) -> Result<()> {
    tensorfile::write_tensor_file(path, &bundle.to_named_tensors()?)
}

pub fn load_weights(path: &Path) -> Result<WeightBundle> {
    WeightBundle::from_named_tensors(tensorfile::read_tensor_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_is_seeded_and_covers_config() {
        let cfg = BackboneConfig::reduced(8, 4, 6);
        let a = WeightBundle::random(&cfg, 3);
        assert_eq!(a, WeightBundle::random(&cfg, 3));
        assert_ne!(a, WeightBundle::random(&cfg, 4));
        assert_eq!(a.len(), 4);
        assert_eq!(a.get("conv2.weight").unwrap().dims, vec![3, 3, 4, 6]);
        let limit = (6.0f64 / 27.0).sqrt();
        assert!(a.get("conv1.weight").unwrap().values.iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.sanw");
        let bundle = WeightBundle::random(&BackboneConfig::reduced(8, 5, 7), 99);
        save_weights(&bundle, &path).unwrap();
        assert_eq!(load_weights(&path).unwrap(), bundle);
    }

    #[test]
    fn missing_provenance_means_pretrained() {
        let t = vec![NamedTensor::new("conv1.bias", vec![1], vec![0.5]).unwrap()];
        let b = WeightBundle::from_named_tensors(t).unwrap();
        assert_eq!(b.provenance, Provenance::Pretrained);
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn prefix_round_trip() {
        let bundle = WeightBundle::random(&BackboneConfig::reduced(8, 2, 2), 1);
        let mut net = WeightBundle::new(bundle.provenance);
        net.extend(bundle.prefixed("ground/")).unwrap();
        assert_eq!(net.strip_prefix("ground/"), bundle);
        assert!(net.strip_prefix("aerial/").is_empty());
    }
}
