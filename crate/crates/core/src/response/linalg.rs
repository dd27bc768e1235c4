//! Small dense helpers shared by the response fits.

use nalgebra::DMatrix;

const RELATIVE_PIVOT: f64 = 1e-10;

/// Indices of columns of a symmetric positive semi-definite Gram matrix
/// that are (numerically) linear combinations of earlier columns, found by
/// a Cholesky pass that skips vanishing pivots.
pub(crate) fn dependent_columns(gram: &DMatrix<f64>) -> Vec<usize> {
    let n = gram.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut dependent = Vec::new();
    for j in 0..n {
        let mut d = gram[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > RELATIVE_PIVOT * gram[(j, j)].abs()) || gram[(j, j)] == 0.0 {
            dependent.push(j);
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = gram[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    dependent
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_repeated_column() {
        // Columns a, b, a + b.
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 0.0, 2.0]);
        let g = x.transpose() * &x;
        assert_eq!(dependent_columns(&g), vec![2]);
        let x2 = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!(dependent_columns(&(x2.transpose() * &x2)).is_empty());
    }
}
