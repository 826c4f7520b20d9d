//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Logistic function, evaluated without overflow for large |x|.
#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Symmetrize in place: `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Result of projecting a symmetric matrix onto the PSD cone.
#[derive(Debug, Clone)]
pub struct PsdRepair {
    pub matrix: DMatrix<f64>,
    /// Sum of the absolute values of the clipped negative eigenvalues.
    pub clipped_mass: f64,
    pub trace: f64,
}

impl PsdRepair {
    pub fn was_repaired(&self) -> bool {
        self.clipped_mass > 0.0
    }

    /// Clipped eigenvalue mass relative to the trace of the input.
    pub fn relative_mass(&self) -> f64 {
        if self.trace.abs() > 0.0 {
            self.clipped_mass / self.trace.abs()
        } else {
            self.clipped_mass
        }
    }
}

/// Nearest PSD matrix in Frobenius norm by clipping negative eigenvalues at 0.
///
/// Eigenvalues above `-tol * max|λ|` are treated as rounding noise and set to
/// zero without being counted as a repair.
pub fn psd_repair(m: &DMatrix<f64>) -> PsdRepair {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let trace = sym.trace();
    if sym.nrows() == 0 {
        return PsdRepair { matrix: sym, clipped_mass: 0.0, trace };
    }
    let eig = SymmetricEigen::new(sym.clone());
    let scale = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let noise = 1e-12 * scale;
    let mut clipped = 0.0;
    let mut any_negative = false;
    let vals: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&v| {
            if v < -noise {
                clipped += -v;
                any_negative = true;
                0.0
            } else {
                v
            }
        })
        .collect();
    if !any_negative {
        return PsdRepair { matrix: sym, clipped_mass: 0.0, trace };
    }
    let d = DMatrix::from_diagonal(&DVector::from_vec(vals));
    let mut out = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    PsdRepair { matrix: out, clipped_mass: clipped, trace }
}

/// Moore–Penrose pseudo-inverse of a symmetric matrix, dropping eigenvalues
/// below `rel_tol * max|λ|`.
pub fn pinv_sym(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let cut = rel_tol * scale;
    let inv: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&v| if v.abs() > cut && v != 0.0 { 1.0 / v } else { 0.0 })
        .collect();
    let d = DMatrix::from_diagonal(&DVector::from_vec(inv));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Ratio of smallest to largest eigenvalue of a symmetric PSD matrix
/// (0 when the largest is 0).
pub fn sym_condition_ratio(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        0.0
    } else {
        min.max(0.0) / max
    }
}

/// Inverse of a symmetric positive definite matrix, `None` if Cholesky fails.
pub fn inverse_spd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let chol = sym.cholesky()?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Some(inv)
}

/// Singular values of `m` after scaling every column to unit Euclidean norm.
/// Zero columns stay zero.
pub fn standardized_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut scaled = m.clone();
    for mut col in scaled.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    let mut sv: Vec<f64> = scaled.singular_values().iter().cloned().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    sv
}

/// Quadratic form `vᵀ M v`.
pub fn quad_form(v: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    (v.transpose() * m * v)[(0, 0)]
}

/// Row-major nested vectors, for JSON reports.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

/// Inverse of [`to_rows`]; ragged input yields `None`.
pub fn from_rows(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != m) {
        return None;
    }
    Some(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expit_is_symmetric_and_stable() {
        assert!((expit(0.0) - 0.5).abs() < 1e-15);
        assert!((expit(2.0) + expit(-2.0) - 1.0).abs() < 1e-15);
        assert_eq!(expit(800.0), 1.0);
        assert_eq!(expit(-800.0), 0.0);
    }

    #[test]
    fn psd_repair_clips_negative_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let r = psd_repair(&m);
        assert!(r.was_repaired());
        assert!((r.clipped_mass - 1.0).abs() < 1e-12);
        let eig = SymmetricEigen::new(r.matrix.clone());
        assert!(eig.eigenvalues.iter().all(|&v| v > -1e-12));
        // the positive eigenpair (λ = 3 on (1,1)/√2) survives
        assert!((r.matrix[(0, 0)] - 1.5).abs() < 1e-12);
        assert!((r.matrix[(0, 1)] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn psd_repair_leaves_psd_untouched() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = psd_repair(&m);
        assert!(!r.was_repaired());
        assert_eq!(r.matrix, m);
    }

    #[test]
    fn pinv_of_singular_projector() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = pinv_sym(&m, 1e-12);
        let back = &m * &p * &m;
        assert!((back - &m).norm() < 1e-12);
    }

    #[test]
    fn standardized_singular_values_detect_collinearity() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 100.0, 2.0, 200.0, 3.0, 300.0]);
        let sv = standardized_singular_values(&m);
        assert!(sv[1] / sv[0] < 1e-12);
    }
}
