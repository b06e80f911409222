//! Leave-one-out by explicit refits.

use nalgebra::DMatrix;

use super::OracleError;

pub const BRUTE_LOO_MAX: usize = 50;

/// Row `i` predicts example `i` from a ridge model fit on the other
/// `N - 1` examples, solved by LU.
pub fn brute_loo(
    k: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>, OracleError> {
    let n = k.nrows();
    if !k.is_square() || y.nrows() != n || n > BRUTE_LOO_MAX {
        return Err(OracleError::Invalid(format!(
            "brute-force LOO needs a square kernel with N <= {BRUTE_LOO_MAX} matching the labels"
        )));
    }
    let mut out = DMatrix::zeros(n, y.ncols());
    for i in 0..n {
        let keep: Vec<usize> = (0..n).filter(|&r| r != i).collect();
        let mut sub = k.select_rows(&keep).select_columns(&keep);
        for d in 0..keep.len() {
            sub[(d, d)] += lambda;
        }
        let rhs = y.select_rows(&keep);
        let alpha = sub
            .lu()
            .solve(&rhs)
            .ok_or(OracleError::Singular { left_out: i })?;
        let cross = k.select_rows(&[i]).select_columns(&keep);
        out.set_row(i, &(cross * alpha).row(0));
    }
    Ok(out)
}
