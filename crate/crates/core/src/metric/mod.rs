//! Triplet-loss training at desk scale: batch distance matrices, the
//! soft-margin triplet loss, analytic gradients, and the Adam training loop.

mod grad;
mod loss;
mod train;

pub use grad::{
    batch_loss, batch_loss_pinned, batch_patterns, loss_gradients, loss_gradients_with_shifts, BatchGradients, BatchItem, NetworkGrads};
pub use loss::{soft_margin_triplet_loss, soft_margin_triplet_loss_grad};
pub use train::{
    load_checkpoint, save_checkpoint, train, write_loss_csv, Adam, TrainConfig, TrainOutcome,
};

use crate::correlate::{estimate_orientation, unit_distance, Correlator, Spectrum};
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Aligned distances between queries (rows, ground) and gallery items (cols, aerial).
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    shifts: Vec<usize>,
    row_ids: Vec<String>,
    col_ids: Vec<String>,
}

impl DistanceMatrix {
    /// Row `q`'s true match is column `q`; ids are the indices.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        let row_ids = (0..rows).map(|i| i.to_string()).collect();
        let col_ids = (0..cols).map(|i| i.to_string()).collect();
        Self::with_ids(values, vec![0; rows * cols], row_ids, col_ids)
    }

    pub fn with_ids(values: Vec<f64>, shifts: Vec<usize>, row_ids: Vec<String>, col_ids: Vec<String>) -> Result<Self> {
        let (rows, cols) = (row_ids.len(), col_ids.len());
        if values.len() != rows * cols || shifts.len() != rows * cols {
            return Err(Error::Shape(format!(
                "distance matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && (0.0..=2.0).contains(*v))) {
            return Err(Error::InvalidArgument(format!(
                "distance {v} outside [0, 2]"
            )));
        }
        Ok(DistanceMatrix {
            rows,
            cols,
            values,
            shifts,
            row_ids,
            col_ids,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, q: usize, g: usize) -> f64 {
        self.values[q * self.cols + g]
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.values[q * self.cols..(q + 1) * self.cols]
    }

    /// Best azimuth shift (in feature columns) found for entry `(q, g)`.
    pub fn shift(&self, q: usize, g: usize) -> usize {
        self.shifts[q * self.cols + g]
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[String] {
        &self.col_ids
    }

    /// Gallery index holding the true match of every query.
    pub fn ground_truth(&self) -> Result<Vec<usize>> {
        self.row_ids
            .iter()
            .map(|id| {
                self.col_ids.iter().position(|c| c == id).ok_or_else(|| {
                    Error::InvalidArgument(format!("query `{id}` has no match in the gallery"))
                })
            })
            .collect()
    }
}

/// Entry `(q, g)` is the aligned distance of ground map `q` against aerial map `g`.
pub fn pairwise_distance_matrix(ground_feats: &[FeatureMap], aerial_feats: &[FeatureMap]) -> Result<DistanceMatrix> {
    let rows = (0..ground_feats.len()).map(|i| i.to_string()).collect();
    let cols = (0..aerial_feats.len()).map(|i| i.to_string()).collect();
    pairwise_distance_matrix_with_ids(ground_feats, aerial_feats, rows, cols)
}

pub fn pairwise_distance_matrix_with_ids(
    ground_feats: &[FeatureMap],
    aerial_feats: &[FeatureMap],
    row_ids: Vec<String>,
    col_ids: Vec<String>,
) -> Result<DistanceMatrix> {
    if ground_feats.is_empty() || aerial_feats.is_empty() {
        return Err(Error::InvalidArgument("distance matrix needs non-empty feature lists".into()));
    }
    let ws = aerial_feats[0].width();
    let mut corr = Correlator::new();
    let mut aerial_spectra: Vec<Spectrum> = Vec::with_capacity(aerial_feats.len());
    for fs in aerial_feats {
        if fs.shape() != aerial_feats[0].shape() {
            return Err(Error::Shape("aerial feature maps differ in shape".into()));
        }
        aerial_spectra.push(corr.spectrum(fs, ws));
    }
    let mut values = Vec::with_capacity(ground_feats.len() * aerial_feats.len());
    let mut shifts = Vec::with_capacity(values.capacity());
    for fg in ground_feats {
        check_ground(fg, &aerial_feats[0])?;
        let gs = corr.spectrum(fg, ws);
        for (fs, spec) in aerial_feats.iter().zip(&aerial_spectra) {
            let profile = corr.correlate_spectra(spec, &gs)?;
            let (shift, _) = estimate_orientation(&profile);
            let crop = fs.crop_columns_circular(shift, fg.width());
            values.push(unit_distance(crop.data(), fg.data())?);
            shifts.push(shift);
        }
    }
    DistanceMatrix::with_ids(values, shifts, row_ids, col_ids)
}

fn check_ground(fg: &FeatureMap, fs: &FeatureMap) -> Result<()> {
    if fg.height() != fs.height() || fg.channels() != fs.channels() || fg.width() > fs.width() {
        return Err(Error::Shape(format!(
            "ground features {:?} incompatible with aerial features {:?}",
            fg.shape(),
            fs.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlate::match_pair;
    use crate::tensor::Tensor3;
    use rand::{Rng, SeedableRng};

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor3::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn exact_crops_give_zero_diagonal() {
        let aerial: Vec<_> = (0..4).map(|i| random_map(2, 16, 4, i)).collect();
        let ground: Vec<_> = aerial.iter().enumerate().map(|(i, a)| a.crop_columns_circular(3 * i, 6)).collect();
        let d = pairwise_distance_matrix(&ground, &aerial).unwrap();
        for i in 0..4 {
            assert!(d.get(i, i) < 1e-9);
            assert_eq!(d.shift(i, i), 3 * i);
        }
        assert_eq!(d.ground_truth().unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_entry_equals_aligned_distance() {
        let a = random_map(2, 8, 3, 1);
        let g = random_map(2, 5, 3, 2);
        let d = pairwise_distance_matrix(std::slice::from_ref(&g), std::slice::from_ref(&a)).unwrap();
        assert_eq!(d.rows(), 1);
        assert!((d.get(0, 0) - match_pair(&a, &g).unwrap().distance).abs() < 1e-12);
    }

    #[test]
    fn entries_match_pairwise_oracle() {
        let aerial: Vec<_> = (0..3).map(|i| random_map(3, 12, 5, 10 + i)).collect();
        let ground: Vec<_> = (0..3).map(|i| random_map(3, 7, 5, 20 + i)).collect();
        let d = pairwise_distance_matrix(&ground, &aerial).unwrap();
        for q in 0..3 {
            for g in 0..3 {
                let m = match_pair(&aerial[g], &ground[q]).unwrap();
                assert!((d.get(q, g) - m.distance).abs() < 1e-12);
                assert_eq!(d.shift(q, g), m.best_shift);
            }
        }
    }

    #[test]
    fn shape_errors_propagate() {
        let aerial = vec![random_map(2, 8, 3, 1)];
        assert!(pairwise_distance_matrix(&[random_map(2, 9, 3, 1)], &aerial).is_err());
        assert!(pairwise_distance_matrix(&[], &aerial).is_err());
    }

    #[test]
    fn matrix_validation() {
        assert!(DistanceMatrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(DistanceMatrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(DistanceMatrix::new(1, 1, vec![2.5]).is_err());
        let d = DistanceMatrix::with_ids(vec![0.1; 2], vec![0; 2], vec!["x".into()], vec!["a".into(), "b".into()]).unwrap();
        assert!(d.ground_truth().is_err());
    }
}
