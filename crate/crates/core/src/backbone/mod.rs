//! Truncated VGG16-style feature branches and channel-axis fusion.
//!
//! A [`Backbone`] is one independent branch (ground, aerial or mask). Inference
//! goes through [`Backbone::forward`]; training records a [`Tape`] with
//! [`Backbone::forward_train`] and replays it with [`Backbone::backward`].

mod config;
mod kernels;
mod weights;

pub use config::{
    BackboneConfig, ConvShape, LayerSpec, DEFAULT_DROPOUT, DEFAULT_FROZEN, PRETRAINED_CONVS, VGG16_WIDTHS,
};
pub use kernels::{conv3x3_backward, conv3x3_forward, max_pool_backward, max_pool_forward};
pub use weights::{load_weights, save_weights, ParamTensor, Provenance, WeightBundle};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Image, Tensor3};

/// Kernel and bias of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub shape: ConvShape,
    /// `[3][3][C_in][C_out]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradient of the loss with respect to one convolution's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrad {
    pub fn zeros_like(p: &ConvParams) -> Self {
        ConvGrad {
            weight: vec![0.0; p.weight.len()],
            bias: vec![0.0; p.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ConvGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

/// Intermediate values recorded by a training forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    entries: Vec<TapeEntry>,
}

/// Which ReLUs fired and which pooling inputs won in a forward pass. Two
/// passes with equal patterns lie on the same linear piece of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationPattern {
    pub relu_active: Vec<bool>,
    pub pool_argmax: Vec<usize>,
}

impl Tape {
    pub fn activation_pattern(&self) -> ActivationPattern {
        let mut relu_active = Vec::new();
        let mut pool_argmax = Vec::new();
        for e in &self.entries {
            match e {
                TapeEntry::Conv { output, relu: true, .. } => relu_active.extend(output.data().iter().map(|&v| v > 0.0)),
                TapeEntry::Pool { argmax, .. } => pool_argmax.extend_from_slice(argmax),
                _ => {}
            }
        }
        ActivationPattern { relu_active, pool_argmax }
    }
}

#[derive(Debug, Clone)]
enum TapeEntry {
    Conv { input: Tensor3, output: Tensor3, relu: bool },
    Pool { in_shape: (usize, usize, usize), argmax: Vec<usize> },
    Dropout { mask: Vec<f64> },
}

/// One forward-capable feature branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    convs: Vec<ConvParams>,
    provenance: Provenance,
}

pub fn build_backbone(config: BackboneConfig, weights: &WeightBundle) -> Result<Backbone> {
    Backbone::new(config, weights)
}

impl Backbone {
    pub fn new(config: BackboneConfig, weights: &WeightBundle) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        for shape in config.conv_shapes() {
            let lookup = |name: String, dims: Vec<usize>| -> Result<Vec<f64>> {
                let t = weights.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
                if t.dims != dims {
                    return Err(Error::Shape(format!(
                        "tensor `{name}` has dims {:?}, layer `{}` expects {dims:?}",
                        t.dims, shape.name
                    )));
                }
                Ok(t.values.clone())
            };
            let weight = lookup(shape.weight_name(), shape.weight_dims())?;
            let bias = lookup(shape.bias_name(), vec![shape.out_channels])?;
            convs.push(ConvParams { shape, weight, bias });
        }
        Ok(Backbone {
            config,
            convs,
            provenance: weights.provenance,
        })
    }

    /// Convenience: random weights drawn from `seed`.
    pub fn random(config: BackboneConfig, seed: u64) -> Result<Self> {
        let w = WeightBundle::random(&config, seed);
        Self::new(config, &w)
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn convs(&self) -> &[ConvParams] {
        &self.convs
    }

    pub fn convs_mut(&mut self) -> &mut [ConvParams] {
        &mut self.convs
    }

    pub fn frozen_convs(&self) -> usize {
        self.config.frozen_convs
    }

    pub fn to_bundle(&self) -> WeightBundle {
        let mut b = WeightBundle::new(self.provenance);
        for c in &self.convs {
            // Shapes were validated at construction.
            b.insert(c.shape.weight_name(), c.shape.weight_dims(), c.weight.clone())
                .expect("consistent conv shape");
            b.insert(c.shape.bias_name(), vec![c.shape.out_channels], c.bias.clone())
                .expect("consistent conv shape");
        }
        b
    }

    fn check_input(&self, img: &Image) -> Result<()> {
        if img.height() != self.config.input_height {
            return Err(Error::Shape(format!(
                "branch expects input height {}, got {}",
                self.config.input_height,
                img.height()
            )));
        }
        if img.channels() != self.config.input_channels {
            return Err(Error::Shape(format!(
                "branch expects {} input channels, got {}",
                self.config.input_channels,
                img.channels()
            )));
        }
        if img.width() == 0 {
            return Err(Error::Shape("input image has zero width".into()));
        }
        Ok(())
    }

    /// Inference forward pass; dropout is the identity.
    pub fn forward(&self, img: &Image) -> Result<FeatureMap> {
        self.check_input(img)?;
        let mut x = img.clone();
        let mut conv_idx = 0;
        for layer in &self.config.layers {
            match layer {
                LayerSpec::Conv { relu, .. } => {
                    let p = &self.convs[conv_idx];
                    x = conv3x3_forward(&x, &p.weight, &p.bias, *relu);
                    conv_idx += 1;
                }
                LayerSpec::MaxPool { rows, cols } => x = max_pool_forward(&x, *rows, *cols).0,
                LayerSpec::Dropout { .. } => {}
            }
        }
        Ok(x)
    }

    /// Inference pass that reuses a recorded activation pattern instead of
    /// re-deciding ReLU gates and pooling winners. Away from kinks it agrees
    /// with [`Backbone::forward`]; under small parameter changes it follows the
    /// same linear piece, which makes it a smooth target for finite differences.
    pub fn forward_pinned(&self, img: &Image, pattern: &ActivationPattern) -> Result<FeatureMap> {
        self.check_input(img)?;
        let mut x = img.clone();
        let (mut relu_at, mut pool_at) = (0, 0);
        let mut conv_idx = 0;
        for layer in &self.config.layers {
            match layer {
                LayerSpec::Conv { relu, .. } => {
                    let p = &self.convs[conv_idx];
                    x = conv3x3_forward(&x, &p.weight, &p.bias, false);
                    if *relu {
                        let gates = pattern
                            .relu_active
                            .get(relu_at..relu_at + x.data().len())
                            .ok_or_else(|| Error::Shape("activation pattern too short".into()))?;
                        for (v, &on) in x.data_mut().iter_mut().zip(gates) {
                            if !on {
                                *v = 0.0;
                            }
                        }
                        relu_at += gates.len();
                    }
                    conv_idx += 1;
                }
                LayerSpec::MaxPool { rows, cols } => {
                    let (h, w, c) = x.shape();
                    let mut y = Tensor3::zeros(h.div_ceil(*rows), w.div_ceil(*cols), c);
                    let n = y.data().len();
                    let winners = pattern
                        .pool_argmax
                        .get(pool_at..pool_at + n)
                        .ok_or_else(|| Error::Shape("activation pattern too short".into()))?;
                    for (v, &i) in y.data_mut().iter_mut().zip(winners) {
                        *v = x.data()[i];
                    }
                    pool_at += n;
                    x = y;
                }
                LayerSpec::Dropout { .. } => {}
            }
        }
        Ok(x)
    }

    /// Training forward pass. With `dropout_rng` set, dropout layers sample
    /// inverted masks; without it they are the identity.
    pub fn forward_train<R: Rng>(&self, img: &Image, mut dropout_rng: Option<&mut R>) -> Result<(FeatureMap, Tape)> {
        self.check_input(img)?;
        let mut x = img.clone();
        let mut entries = Vec::with_capacity(self.config.layers.len());
        let mut conv_idx = 0;
        for layer in &self.config.layers {
            match layer {
                LayerSpec::Conv { relu, .. } => {
                    let p = &self.convs[conv_idx];
                    let y = conv3x3_forward(&x, &p.weight, &p.bias, *relu);
                    entries.push(TapeEntry::Conv {
                        input: std::mem::replace(&mut x, y.clone()),
                        output: y,
                        relu: *relu,
                    });
                    conv_idx += 1;
                }
                LayerSpec::MaxPool { rows, cols } => {
                    let (y, argmax) = max_pool_forward(&x, *rows, *cols);
                    entries.push(TapeEntry::Pool {
                        in_shape: x.shape(),
                        argmax,
                    });
                    x = y;
                }
                LayerSpec::Dropout { rate } => {
                    let keep = 1.0 - rate;
                    let mask: Vec<f64> = match dropout_rng.as_deref_mut() {
                        Some(rng) if *rate > 0.0 => (0..x.data().len())
                            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect(),
                        _ => vec![1.0; x.data().len()],
                    };
                    for (v, m) in x.data_mut().iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    entries.push(TapeEntry::Dropout { mask });
                }
            }
        }
        Ok((x, Tape { entries }))
    }

    /// Back-propagates `grad_out` through the recorded pass. Returns one entry
    /// per convolution; frozen convolutions get `None` and the pass stops below
    /// the first trainable one.
    pub fn backward(&self, tape: &Tape, grad_out: &FeatureMap) -> Vec<Option<ConvGrad>> {
        let frozen = self.config.frozen_convs;
        let mut grads: Vec<Option<ConvGrad>> = vec![None; self.convs.len()];
        let mut g = grad_out.clone();
        let mut conv_idx = self.convs.len();
        for entry in tape.entries.iter().rev() {
            if conv_idx <= frozen {
                break;
            }
            match entry {
                TapeEntry::Conv { input, output, .. } => {
                    conv_idx -= 1;
                    let p = &self.convs[conv_idx];
                    let relu = matches!(
                        self.conv_spec(conv_idx),
                        Some(LayerSpec::Conv { relu: true, .. })
                    );
                    let need_input = conv_idx > frozen;
                    let (di, dw, db) = conv3x3_backward(input, output, &p.weight, relu, &g, need_input);
                    grads[conv_idx] = Some(ConvGrad { weight: dw, bias: db });
                    match di {
                        Some(di) => g = di,
                        None => break,
                    }
                }
                TapeEntry::Pool { in_shape, argmax } => g = max_pool_backward(*in_shape, argmax, &g),
                TapeEntry::Dropout { mask } => {
                    for (v, m) in g.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                }
            }
        }
        grads
    }

    fn conv_spec(&self, idx: usize) -> Option<&LayerSpec> {
        self.config
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. }))
            .nth(idx)
    }
}

/// Stacks `f_sat` and `f_seg` along the channel axis, satellite channels first.
pub fn concat_channels(f_sat: &FeatureMap, f_seg: &FeatureMap) -> Result<FeatureMap> {
    if f_sat.height() != f_seg.height() || f_sat.width() != f_seg.width() {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} with {:?}: spatial shapes differ",
            f_sat.shape(),
            f_seg.shape()
        )));
    }
    let (cs, cm) = (f_sat.channels(), f_seg.channels());
    let mut data = Vec::with_capacity(f_sat.data().len() + f_seg.data().len());
    for (a, b) in f_sat.data().chunks_exact(cs.max(1)).zip(f_seg.data().chunks_exact(cm.max(1))) {
        data.extend_from_slice(a);
        data.extend_from_slice(b);
    }
    Tensor3::from_vec(f_sat.height(), f_sat.width(), cs + cm, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn missing_bias_names_layer() {
        let cfg = BackboneConfig::reduced(8, 4, 4);
        let mut w = WeightBundle::random(&cfg, 0);
        w.remove("conv2.bias");
        let err = Backbone::new(cfg, &w).unwrap_err();
        assert!(err.to_string().contains("conv2.bias"), "{err}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = BackboneConfig::reduced(8, 4, 4);
        let w = WeightBundle::random(&BackboneConfig::reduced(8, 5, 4), 0);
        assert!(matches!(Backbone::new(cfg, &w), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_rejects_wrong_height_or_channels() {
        let b = Backbone::random(BackboneConfig::reduced(8, 4, 4), 0).unwrap();
        assert!(b.forward(&Image::zeros(7, 16, 3)).is_err());
        assert!(b.forward(&Image::zeros(8, 16, 1)).is_err());
        assert!(b.forward(&Image::zeros(8, 16, 3)).is_ok());
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let cfg = BackboneConfig::vgg16_scaled(8, 16, 32);
        let b = Backbone::random(cfg, 1).unwrap();
        let f = b.forward(&Image::zeros(32, 40, 3)).unwrap();
        assert_eq!(f.shape(), (1, 5, 8));
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_train_mode_without_rng_matches() {
        let b = Backbone::random(BackboneConfig::vgg16_scaled(16, 16, 32), 2).unwrap();
        let img = random_image(32, 24, 3);
        let a = b.forward(&img).unwrap();
        assert_eq!(a, b.forward(&img).unwrap());
        let (t, _) = b.forward_train::<ChaCha8Rng>(&img, None).unwrap();
        assert_eq!(a, t);
    }

    #[test]
    fn dropout_active_in_training_only() {
        let b = Backbone::random(BackboneConfig::vgg16_scaled(16, 16, 32), 2).unwrap();
        let img = random_image(32, 24, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (t, _) = b.forward_train(&img, Some(&mut rng)).unwrap();
        assert_ne!(t, b.forward(&img).unwrap());
    }

    #[test]
    fn frozen_layers_get_no_gradient() {
        let cfg = BackboneConfig::vgg16_scaled(4, 16, 32).with_frozen(7).without_dropout();
        let b = Backbone::random(cfg, 4).unwrap();
        let img = random_image(32, 16, 5);
        let (f, tape) = b.forward_train::<ChaCha8Rng>(&img, None).unwrap();
        let grads = b.backward(&tape, &f);
        assert!(grads[..7].iter().all(Option::is_none));
        assert!(grads[7..].iter().all(Option::is_some));
    }

    #[test]
    fn concat_examples() {
        let f = random_image(4, 6, 1).map(|v| v * 2.0);
        let f = concat_channels(&f, &f).unwrap().slice_channels(0, 3).unwrap();
        let zeros = Tensor3::zeros(4, 6, 3);
        let c = concat_channels(&f, &zeros).unwrap();
        assert_eq!(c.shape(), (4, 6, 6));
        assert_eq!(c.slice_channels(0, 3).unwrap(), f);
        assert!(c.slice_channels(3, 6).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(concat_channels(&f, &Tensor3::zeros(4, 5, 3)).is_err());
        let a = Tensor3::zeros(4, 64, 8);
        assert_eq!(concat_channels(&a, &a).unwrap().shape(), (4, 64, 16));
    }
}
