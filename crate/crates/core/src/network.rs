//! The three independent branches (ground, aerial, mask) and aerial/mask fusion.

use sha2::{Digest, Sha256};

use crate::backbone::{concat_channels, Backbone, BackboneConfig, Provenance, WeightBundle};
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Image};

pub const BRANCHES: [&str; 3] = ["ground", "aerial", "mask"];

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub ground: BackboneConfig,
    pub aerial: BackboneConfig,
    pub mask: BackboneConfig,
}

impl NetworkConfig {
    /// Full-depth branches: 8-channel aerial and mask maps, 16-channel ground map.
    pub fn vgg16() -> Self {
        NetworkConfig {
            ground: BackboneConfig::vgg16(16),
            aerial: BackboneConfig::vgg16(8),
            mask: BackboneConfig::vgg16(8),
        }
    }

    /// VGG16 layout with hidden widths divided by `divisor`.
    pub fn vgg16_scaled(divisor: usize, input_height: usize) -> Self {
        NetworkConfig {
            ground: BackboneConfig::vgg16_scaled(16, divisor, input_height),
            aerial: BackboneConfig::vgg16_scaled(8, divisor, input_height),
            mask: BackboneConfig::vgg16_scaled(8, divisor, input_height),
        }
    }

    /// Two-convolution branches for desk-scale experiments.
    pub fn reduced(input_height: usize, hidden: usize) -> Self {
        NetworkConfig {
            ground: BackboneConfig::reduced(input_height, hidden, 16),
            aerial: BackboneConfig::reduced(input_height, hidden, 8),
            mask: BackboneConfig::reduced(input_height, hidden, 8),
        }
    }

    pub fn map(mut self, f: impl Fn(BackboneConfig) -> BackboneConfig) -> Self {
        self.ground = f(self.ground);
        self.aerial = f(self.aerial);
        self.mask = f(self.mask);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for c in [&self.ground, &self.aerial, &self.mask] {
            c.validate()?;
        }
        if self.ground.out_channels() != self.aerial.out_channels() + self.mask.out_channels() {
            return Err(Error::InvalidConfig(format!(
                "ground branch emits {} channels but fused aerial features have {}",
                self.ground.out_channels(),
                self.aerial.out_channels() + self.mask.out_channels()
            )));
        }
        if self.aerial.width_stride() != self.mask.width_stride()
            || self.aerial.input_height != self.mask.input_height
        {
            return Err(Error::InvalidConfig(
                "aerial and mask branches must share their downsampling".into(),
            ));
        }
        Ok(())
    }
}

/// Derives a per-branch seed so the three branches start from different draws.
fn branch_seed(seed: u64, branch: usize) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(branch as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub ground: Backbone,
    pub aerial: Backbone,
    pub mask: Backbone,
}

impl Network {
    pub fn random(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tag = Provenance::Random { seed };
        let build = |cfg: &BackboneConfig, branch| {
            Backbone::random(cfg.clone(), branch_seed(seed, branch)).map(|b| b.with_provenance(tag))
        };
        Ok(Network {
            ground: build(&config.ground, 0)?,
            aerial: build(&config.aerial, 1)?,
            mask: build(&config.mask, 2)?,
        })
    }

    /// Random initialization with the first `count` convolutions of every
    /// branch replaced by `pretrained` (an unprefixed single-branch bundle).
    pub fn with_pretrained(config: &NetworkConfig, pretrained: &WeightBundle, count: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let build = |cfg: &BackboneConfig, branch: usize| -> Result<Backbone> {
            let mut w = WeightBundle::random(cfg, branch_seed(seed, branch));
            w.overlay_convs(cfg, pretrained, count)?;
            w.provenance = Provenance::Pretrained;
            Backbone::new(cfg.clone(), &w)
        };
        Ok(Network {
            ground: build(&config.ground, 0)?,
            aerial: build(&config.aerial, 1)?,
            mask: build(&config.mask, 2)?,
        })
    }

    pub fn from_bundle(config: &NetworkConfig, bundle: &WeightBundle) -> Result<Self> {
        config.validate()?;
        Ok(Network {
            ground: Backbone::new(config.ground.clone(), &bundle.strip_prefix("ground/"))?,
            aerial: Backbone::new(config.aerial.clone(), &bundle.strip_prefix("aerial/"))?,
            mask: Backbone::new(config.mask.clone(), &bundle.strip_prefix("mask/"))?,
        })
    }

    pub fn to_bundle(&self) -> WeightBundle {
        let ground = self.ground.to_bundle();
        let mut out = WeightBundle::new(ground.provenance);
        for (name, b) in BRANCHES.iter().zip(self.branches()) {
            out.extend(b.to_bundle().prefixed(&format!("{name}/")))
                .expect("branch tensors are shape-consistent");
        }
        out
    }

    pub fn config(&self) -> NetworkConfig {
        NetworkConfig {
            ground: self.ground.config().clone(),
            aerial: self.aerial.config().clone(),
            mask: self.mask.config().clone(),
        }
    }

    pub fn branches(&self) -> [&Backbone; 3] {
        [&self.ground, &self.aerial, &self.mask]
    }

    pub fn branches_mut(&mut self) -> [&mut Backbone; 3] {
        [&mut self.ground, &mut self.aerial, &mut self.mask]
    }

    pub fn ground_features(&self, ground: &Image) -> Result<FeatureMap> {
        self.ground.forward(ground)
    }

    /// Aerial and mask features stacked on the channel axis.
    pub fn aerial_features(&self, aerial: &Image, mask: &Image) -> Result<FeatureMap> {
        let fa = self.aerial.forward(aerial)?;
        let fm = self.mask.forward(mask)?;
        concat_channels(&fa, &fm)
    }

    /// SHA-256 over the bit patterns of every frozen convolution in every branch.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        for b in self.branches() {
            for conv in &b.convs()[..b.frozen_convs()] {
                h.update(conv.shape.name.as_bytes());
                for v in conv.weight.iter().chain(&conv.bias) {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_fused_shape() {
        let cfg = NetworkConfig::vgg16();
        cfg.validate().unwrap();
        assert_eq!(cfg.aerial.output_shape(128, 512), (4, 64, 8));
        assert_eq!(cfg.ground.output_shape(128, 512), (4, 64, 16));
    }

    #[test]
    fn branches_are_independent() {
        let net = Network::random(&NetworkConfig::reduced(8, 4), 0).unwrap();
        assert_ne!(net.aerial.convs()[0].weight, net.mask.convs()[0].weight);
    }

    #[test]
    fn bundle_round_trip() {
        let cfg = NetworkConfig::reduced(8, 4);
        let net = Network::random(&cfg, 5).unwrap();
        let b = net.to_bundle();
        assert_eq!(b.len(), 12);
        assert_eq!(Network::from_bundle(&cfg, &b).unwrap(), net);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut cfg = NetworkConfig::reduced(8, 4);
        cfg.ground = BackboneConfig::reduced(8, 4, 12);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pretrained_overlay_is_shared_across_branches() {
        let cfg = NetworkConfig::reduced(8, 4);
        let pre = WeightBundle::random(&cfg.aerial, 77);
        let net = Network::with_pretrained(&cfg, &pre, 1, 0).unwrap();
        assert_eq!(net.ground.convs()[0].weight, net.mask.convs()[0].weight);
        assert_ne!(net.ground.convs()[1].weight.len(), net.mask.convs()[1].weight.len());
    }
}
