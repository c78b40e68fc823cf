use ndarray::Array2;

/// Weights of the last fully-connected layer: the fine head `W` (`d x k`,
/// column `i` scores fine class `i`) and one head per coarse type
/// (`d_j x k_j`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub fine: Array2<f64>,
    pub coarse: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn zeros(d: usize, k: usize, coarse_dims: &[(usize, usize)]) -> Self {
        Self {
            fine: Array2::zeros((d, k)),
            coarse: coarse_dims
                .iter()
                .map(|&(dj, kj)| Array2::zeros((dj, kj)))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fine: Array2::zeros(self.fine.raw_dim()),
            coarse: self
                .coarse
                .iter()
                .map(|w| Array2::zeros(w.raw_dim()))
                .collect(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.fine.nrows()
    }

    /// True when every coarse head reads features of the fine head's width,
    /// which the hierarchical prior needs.
    pub fn dims_coupled(&self) -> bool {
        self.coarse.iter().all(|w| w.nrows() == self.fine.nrows())
    }
}
