//! Small dense linear-algebra helpers over `ndarray`, backed by nalgebra's
//! symmetric eigensolver.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
/// Eigenvectors are the columns of the returned matrix.
pub(crate) fn sym_eigen(m: &ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = m.nrows();
    let dm = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[[i, j]] + m[[j, i]]));
    let eig = SymmetricEigen::new(dm);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        // Fix the sign so the largest-magnitude component is positive.
        let col = eig.eigenvectors.column(src);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[[i, dst]] = sign * col[i];
        }
    }
    (values, vectors)
}

/// Column means and population covariance of the rows of `x`.
pub(crate) fn mean_and_covariance(x: &ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).expect("non-empty rows");
    let centered = x - &mean;
    let cov = centered.t().dot(&centered) / n;
    (mean, cov)
}

/// `(W Wᵀ)^(-1/2) W`, the symmetric decorrelation used by FastICA.
pub(crate) fn symmetric_decorrelation(w: &Array2<f64>) -> Array2<f64> {
    let (vals, vecs) = sym_eigen(&w.dot(&w.t()).view());
    let inv_sqrt = Array1::from_iter(vals.iter().map(|&v| 1.0 / v.max(1e-300).sqrt()));
    let scaled = &vecs * &inv_sqrt;
    scaled.dot(&vecs.t()).dot(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn eigen_sorted_and_reconstructs() {
        let m = array![[2.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 1.0]];
        let (vals, vecs) = sym_eigen(&m.view());
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        let rec = (&vecs * &Array1::from(vals)).dot(&vecs.t());
        for (a, b) in rec.iter().zip(m.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn decorrelation_is_orthogonal() {
        let w = array![[1.0, 0.4], [0.2, 0.7]];
        let d = symmetric_decorrelation(&w);
        let i = d.dot(&d.t());
        assert!((i[[0, 0]] - 1.0).abs() < 1e-12);
        assert!(i[[0, 1]].abs() < 1e-12);
    }
}
