use nalgebra::{DMatrix, DVector};

const RIDGE: f64 = 1e-3;
/// Records needed before the model makes real predictions.
pub const MIN_RECORDS: usize = 8;

/// Ridge regression on log cost over a fixed feature vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostModel {
    weights: Option<Vec<f64>>,
}

impl CostModel {
    pub fn fit(samples: &[(Vec<f64>, f64)]) -> CostModel {
        if samples.len() < MIN_RECORDS {
            return CostModel::default();
        }
        let f = samples[0].0.len();
        let x = DMatrix::from_fn(samples.len(), f, |i, j| samples[i].0[j]);
        let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.1.max(1e-9).ln()));
        let xt = x.transpose();
        let a = &xt * &x + DMatrix::identity(f, f) * RIDGE;
        let w = a.cholesky().map(|c| c.solve(&(&xt * y)));
        CostModel { weights: w.map(|w| w.iter().copied().collect()) }
    }

    pub fn is_trained(&self) -> bool {
        self.weights.is_some()
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Predicted cost; a neutral 1.0 until trained.
    pub fn predict(&self, features: &[f64]) -> f64 {
        match &self.weights {
            Some(w) => w.iter().zip(features).map(|(a, b)| a * b).sum::<f64>().exp(),
            None => 1.0,
        }
    }
}
