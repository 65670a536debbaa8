//! Reverse-mode gradients of the batch triplet loss through alignment,
//! correlation crops and all trainable branch layers.
//!
//! The argmax shift is piecewise constant in the weights, so it is computed
//! once per pair and then held fixed; gradients flow through the aerial crop
//! taken at that shift.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::loss_and_grad;
use super::DistanceMatrix;
use crate::backbone::{concat_channels, ActivationPattern, ConvGrad, Tape};
use crate::correlate::{estimate_orientation, unit_distance, Correlator};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{FeatureMap, Image, Tensor3};

/// One training triplet after FoV cropping.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub ground: Image,
    pub aerial: Image,
    pub mask: Image,
}

/// Per-branch, per-convolution gradients (`None` for frozen convolutions),
/// ordered ground, aerial, mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub branches: [Vec<Option<ConvGrad>>; 3],
}

impl NetworkGrads {
    fn add_assign(&mut self, branch: usize, other: Vec<Option<ConvGrad>>) {
        for (acc, g) in self.branches[branch].iter_mut().zip(other) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a.add_assign(&g),
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub grads: NetworkGrads,
    pub distances: DistanceMatrix,
}

fn branch_rng(seed: u64, item: usize, branch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((item * 3 + branch) as u64);
    rng
}

struct Encoded {
    ground: Vec<FeatureMap>,
    aerial: Vec<FeatureMap>,
}

fn check_batch(batch: &[BatchItem], shifts: Option<&[usize]>) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument("a training batch needs at least two triplets".into()));
    }
    if let Some(s) = shifts {
        if s.len() != batch.len() * batch.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} pinned shifts, got {}",
                batch.len() * batch.len(),
                s.len()
            )));
        }
    }
    Ok(())
}

fn check_features(enc: &Encoded) -> Result<()> {
    let fs0 = &enc.aerial[0];
    let fg0 = &enc.ground[0];
    if enc.aerial.iter().any(|f| f.shape() != fs0.shape()) || enc.ground.iter().any(|f| f.shape() != fg0.shape()) {
        return Err(Error::Shape("batch items produce feature maps of different shapes".into()));
    }
    if fg0.height() != fs0.height() || fg0.channels() != fs0.channels() || fg0.width() > fs0.width() {
        return Err(Error::Shape(format!(
            "ground features {:?} incompatible with aerial features {:?}",
            fg0.shape(),
            fs0.shape()
        )));
    }
    Ok(())
}

/// Distances and shifts for every (ground q, aerial g) pair of the batch.
fn batch_distances(enc: &Encoded, pinned: Option<&[usize]>) -> Result<(Vec<f64>, Vec<usize>)> {
    let b = enc.ground.len();
    let ws = enc.aerial[0].width();
    let mut corr = Correlator::new();
    let spectra: Vec<_> = enc.aerial.iter().map(|f| corr.spectrum(f, ws)).collect();
    let mut d = Vec::with_capacity(b * b);
    let mut shifts = Vec::with_capacity(b * b);
    for (q, fg) in enc.ground.iter().enumerate() {
        let gs = corr.spectrum(fg, ws);
        for (g, fs) in enc.aerial.iter().enumerate() {
            let shift = match pinned {
                Some(p) => p[q * b + g] % ws,
                None => estimate_orientation(&corr.correlate_spectra(&spectra[g], &gs)?).0,
            };
            let crop = fs.crop_columns_circular(shift, fg.width());
            d.push(unit_distance(crop.data(), fg.data())?);
            shifts.push(shift);
        }
    }
    Ok((d, shifts))
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

/// Forward-only batch loss using the inference path. With `shifts`, the
/// alignment of every pair is pinned instead of searched.
pub fn batch_loss(net: &Network, batch: &[BatchItem], gamma: f64, shifts: Option<&[usize]>) -> Result<(f64, DistanceMatrix)> {
    check_batch(batch, shifts)?;
    let mut enc = Encoded {
        ground: Vec::with_capacity(batch.len()),
        aerial: Vec::with_capacity(batch.len()),
    };
    for item in batch {
        enc.ground.push(net.ground_features(&item.ground)?);
        enc.aerial.push(net.aerial_features(&item.aerial, &item.mask)?);
    }
    check_features(&enc)?;
    let b = batch.len();
    let (d, s) = batch_distances(&enc, shifts)?;
    let (loss, _) = loss_and_grad(&d, b, b, gamma)?;
    Ok((loss, DistanceMatrix::with_ids(d, s, ids(b), ids(b))?))
}

/// Activation patterns of every branch for every item, ordered ground,
/// aerial, mask. Dropout is off.
pub fn batch_patterns(net: &Network, batch: &[BatchItem]) -> Result<Vec<[ActivationPattern; 3]>> {
    batch
        .iter()
        .map(|item| {
            let pat = |b: &crate::backbone::Backbone, img: &Image| -> Result<ActivationPattern> {
                Ok(b.forward_train::<ChaCha8Rng>(img, None)?.1.activation_pattern())
            };
            Ok([pat(&net.ground, &item.ground)?, pat(&net.aerial, &item.aerial)?, pat(&net.mask, &item.mask)?])
        })
        .collect()
}

/// [`batch_loss`] evaluated on a fixed linear piece: ReLU gates and pooling
/// winners come from `patterns`, alignments from `shifts`.
pub fn batch_loss_pinned(
    net: &Network,
    batch: &[BatchItem],
    gamma: f64,
    shifts: &[usize],
    patterns: &[[ActivationPattern; 3]],
) -> Result<f64> {
    check_batch(batch, Some(shifts))?;
    if patterns.len() != batch.len() {
        return Err(Error::InvalidArgument("one activation pattern set per item is required".into()));
    }
    let mut enc = Encoded {
        ground: Vec::with_capacity(batch.len()),
        aerial: Vec::with_capacity(batch.len()),
    };
    for (item, p) in batch.iter().zip(patterns) {
        enc.ground.push(net.ground.forward_pinned(&item.ground, &p[0])?);
        let fa = net.aerial.forward_pinned(&item.aerial, &p[1])?;
        let fm = net.mask.forward_pinned(&item.mask, &p[2])?;
        enc.aerial.push(concat_channels(&fa, &fm)?);
    }
    check_features(&enc)?;
    let b = batch.len();
    let (d, _) = batch_distances(&enc, Some(shifts))?;
    Ok(loss_and_grad(&d, b, b, gamma)?.0)
}

/// Gradient of the distance `|a/|a| − g/|g||` with respect to `a` and `g`.
fn distance_grads(a: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(g).map(|(x, y)| x / na - y / ng).collect();
    let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    if d < 1e-12 {
        return (vec![0.0; a.len()], vec![0.0; g.len()]);
    }
    // d/da = (I − u uᵀ) (diff / d) / |a|, and symmetrically for g with −diff.
    let project = |x: &[f64], n: f64, sign: f64| -> Vec<f64> {
        let dot: f64 = x.iter().zip(&diff).map(|(xi, di)| xi / n * sign * di / d).sum();
        x.iter()
            .zip(&diff)
            .map(|(xi, di)| (sign * di / d - xi / n * dot) / n)
            .collect()
    };
    (project(a, na, 1.0), project(g, ng, -1.0))
}

/// Loss and parameter gradients for one batch, with argmax alignment.
pub fn loss_gradients(net: &Network, batch: &[BatchItem], gamma: f64, dropout_seed: Option<u64>) -> Result<BatchGradients> {
    loss_gradients_with_shifts(net, batch, gamma, dropout_seed, None)
}

/// As [`loss_gradients`], optionally pinning the alignment shift of every pair
/// (row-major over ground × aerial).
pub fn loss_gradients_with_shifts(
    net: &Network,
    batch: &[BatchItem],
    gamma: f64,
    dropout_seed: Option<u64>,
    shifts: Option<&[usize]>,
) -> Result<BatchGradients> {
    check_batch(batch, shifts)?;
    let b = batch.len();
    let mut enc = Encoded {
        ground: Vec::with_capacity(b),
        aerial: Vec::with_capacity(b),
    };
    let mut tapes: Vec<[Tape; 3]> = Vec::with_capacity(b);
    let mut sat_channels = 0;
    for (i, item) in batch.iter().enumerate() {
        let mut rngs: Vec<Option<ChaCha8Rng>> = (0..3).map(|k| dropout_seed.map(|s| branch_rng(s, i, k))).collect();
        let (fg, tg) = net.ground.forward_train(&item.ground, rngs[0].as_mut())?;
        let (fa, ta) = net.aerial.forward_train(&item.aerial, rngs[1].as_mut())?;
        let (fm, tm) = net.mask.forward_train(&item.mask, rngs[2].as_mut())?;
        sat_channels = fa.channels();
        enc.aerial.push(concat_channels(&fa, &fm)?);
        enc.ground.push(fg);
        tapes.push([tg, ta, tm]);
    }
    check_features(&enc)?;
    let (d, s) = batch_distances(&enc, shifts)?;
    let (loss, d_loss) = loss_and_grad(&d, b, b, gamma)?;

    let (h, wv, c) = enc.ground[0].shape();
    let ws = enc.aerial[0].width();
    let mut d_ground: Vec<FeatureMap> = (0..b).map(|_| Tensor3::zeros(h, wv, c)).collect();
    let mut d_aerial: Vec<FeatureMap> = (0..b).map(|_| Tensor3::zeros(h, ws, c)).collect();
    for q in 0..b {
        for g in 0..b {
            let w = d_loss[q * b + g];
            if w == 0.0 {
                continue;
            }
            let shift = s[q * b + g];
            let crop = enc.aerial[g].crop_columns_circular(shift, wv);
            let (da, dg) = distance_grads(crop.data(), enc.ground[q].data());
            for (acc, v) in d_ground[q].data_mut().iter_mut().zip(&dg) {
                *acc += w * v;
            }
            let target = &mut d_aerial[g];
            for row in 0..h {
                for j in 0..wv {
                    let col = (shift + j) % ws;
                    for ch in 0..c {
                        let src = crop.index(row, j, ch);
                        let dst = target.index(row, col, ch);
                        target.data_mut()[dst] += w * da[src];
                    }
                }
            }
        }
    }

    let mut grads = NetworkGrads {
        branches: [
            vec![None; net.ground.convs().len()],
            vec![None; net.aerial.convs().len()],
            vec![None; net.mask.convs().len()],
        ],
    };
    for i in 0..b {
        grads.add_assign(0, net.ground.backward(&tapes[i][0], &d_ground[i]));
        let d_sat = d_aerial[i].slice_channels(0, sat_channels)?;
        let d_seg = d_aerial[i].slice_channels(sat_channels, c)?;
        grads.add_assign(1, net.aerial.backward(&tapes[i][1], &d_sat));
        grads.add_assign(2, net.mask.backward(&tapes[i][2], &d_seg));
    }
    Ok(BatchGradients {
        loss,
        grads,
        distances: DistanceMatrix::with_ids(d, s, ids(b), ids(b))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_grads_match_finite_differences() {
        let a = vec![0.3, -1.2, 0.8, 0.1];
        let g = vec![1.0, 0.4, -0.2, 0.5];
        let (da, dg) = distance_grads(&a, &g);
        let h = 1e-6;
        for k in 0..4 {
            let mut p = a.clone();
            let mut m = a.clone();
            p[k] += h;
            m[k] -= h;
            let fd = (unit_distance(&p, &g).unwrap() - unit_distance(&m, &g).unwrap()) / (2.0 * h);
            assert!((fd - da[k]).abs() < 1e-8);
            let mut p = g.clone();
            let mut m = g.clone();
            p[k] += h;
            m[k] -= h;
            let fd = (unit_distance(&a, &p).unwrap() - unit_distance(&a, &m).unwrap()) / (2.0 * h);
            assert!((fd - dg[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn batch_of_one_rejected() {
        let net = Network::random(&crate::network::NetworkConfig::reduced(8, 4), 0).unwrap();
        let item = BatchItem {
            ground: Image::zeros(8, 16, 3),
            aerial: Image::zeros(8, 16, 3),
            mask: Image::zeros(8, 16, 3),
        };
        assert!(loss_gradients(&net, &[item], 10.0, None).is_err());
    }
}
