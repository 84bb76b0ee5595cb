//! k-nearest-neighbour classifier on standardized features.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::linear::Scaler;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnFit {
    pub k: usize,
    pub scaler: Scaler,
    pub points: Vec<Vec<f64>>,
    /// Class index per training row.
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl KnnFit {
    pub fn fit(x: &DMatrix<f64>, labels: &[usize], n_classes: usize, k: usize) -> KnnFit {
        let scaler = Scaler::fit(x);
        let z = scaler.transform(x);
        let points = (0..z.nrows())
            .map(|r| z.row(r).iter().copied().collect())
            .collect();
        KnnFit {
            k: k.max(1),
            scaler,
            points,
            labels: labels.to_vec(),
            n_classes,
        }
    }

    /// Majority vote among the k nearest rows; distance ties go to the
    /// earlier training row, vote ties to the smaller class index.
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<usize> {
        let z = self.scaler.transform(x);
        (0..z.nrows())
            .map(|r| {
                let row: Vec<f64> = z.row(r).iter().copied().collect();
                let mut d: Vec<(f64, usize)> = self
                    .points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let s: f64 = p.iter().zip(&row).map(|(a, b)| (a - b).powi(2)).sum();
                        (s, i)
                    })
                    .collect();
                d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let mut votes = vec![0usize; self.n_classes];
                for &(_, i) in d.iter().take(self.k) {
                    votes[self.labels[i]] += 1;
                }
                let best = votes.iter().copied().max().unwrap_or(0);
                votes.iter().position(|&v| v == best).unwrap_or(0)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_neighbour_votes() {
        let x = DMatrix::from_column_slice(6, 1, &[0., 1., 2., 10., 11., 12.]);
        let labels = [0, 0, 0, 1, 1, 1];
        let f = KnnFit::fit(&x, &labels, 2, 3);
        let q = DMatrix::from_column_slice(2, 1, &[1.5, 10.5]);
        assert_eq!(f.predict(&q), vec![0, 1]);
    }
}
