use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::EstimatorError;

/// Per-feature z-score transform. Zero-variance features get scale 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<'_, f64>) -> Result<Self, EstimatorError> {
        let n = x.nrows();
        if n < 2 {
            return Err(EstimatorError::TooFewRows { needed: 2, got: n });
        }
        let mean = x.mean_axis(Axis(0)).expect("n >= 2");
        let scale = x
            .axis_iter(Axis(1))
            .zip(mean.iter())
            .map(|(col, &m)| {
                let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
                let sd = var.sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, EstimatorError> {
        if x.ncols() != self.dim() {
            return Err(EstimatorError::Dimension {
                expected: self.dim(),
                got: x.ncols(),
            });
        }
        Ok((&x - &self.mean) / &self.scale)
    }

    pub fn apply_row(&self, row: &[f64]) -> Result<Vec<f64>, EstimatorError> {
        if row.len() != self.dim() {
            return Err(EstimatorError::Dimension {
                expected: self.dim(),
                got: row.len(),
            });
        }
        Ok(row
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn constant_column_maps_to_zero() {
        let x = array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]];
        let st = Standardizer::fit(x.view()).unwrap();
        assert_eq!(st.scale[1], 1.0);
        let z = st.apply(x.view()).unwrap();
        assert!(z.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fit_data_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(4.0, 3.0).unwrap();
        let x = Array2::from_shape_fn((200, 6), |_| normal.sample(&mut rng));
        let z = Standardizer::fit(x.view())
            .unwrap()
            .apply(x.view())
            .unwrap();
        for col in z.axis_iter(Axis(1)) {
            let m = col.mean().unwrap();
            let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 200.0).sqrt();
            assert!(m.abs() < 1e-9);
            assert!((sd - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn standard_data_is_nearly_unchanged() {
        // Two points at -1 and +1: mean 0, population std 1.
        let x = array![[-1.0, 1.0], [1.0, -1.0]];
        let z = Standardizer::fit(x.view())
            .unwrap()
            .apply(x.view())
            .unwrap();
        assert!((&z - &x).iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn held_out_fold_uses_training_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a_dist = Normal::new(0.0, 1.0).unwrap();
        let b_dist = Normal::new(2.0, 1.0).unwrap();
        let a = Array2::from_shape_fn((100, 3), |_| a_dist.sample(&mut rng));
        let b = Array2::from_shape_fn((50, 3), |_| b_dist.sample(&mut rng));
        let st = Standardizer::fit(a.view()).unwrap();
        let zb = st.apply(b.view()).unwrap();
        for j in 0..3 {
            let ma = a.column(j).mean().unwrap();
            let sa = (a.column(j).iter().map(|v| (v - ma).powi(2)).sum::<f64>() / 100.0).sqrt();
            let expect = (b.column(j).mean().unwrap() - ma) / sa;
            let got = zb.column(j).mean().unwrap();
            assert!((got - expect).abs() < 1e-12);
            assert!(got > 1.0);
        }
    }

    #[test]
    fn rejects_single_row_and_wrong_width() {
        assert!(Standardizer::fit(array![[1.0, 2.0]].view()).is_err());
        let st = Standardizer::fit(array![[1.0], [2.0]].view()).unwrap();
        assert!(st.apply_row(&[1.0, 2.0]).is_err());
        assert_eq!(st.apply_row(&[1.5]).unwrap(), vec![0.0]);
    }
}
