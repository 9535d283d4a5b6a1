//! Dense row-major `f64` matrices, the logistic function, and a
//! central-difference gradient checker.
//!
//! Layer weights are stored as `in_dim × out_dim` matrices so that a layer
//! computes `Wᵀx`; [`Matrix::t_matvec`] and [`Matrix::add_outer`] are the
//! forward and weight-gradient kernels used by the towers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major values, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(Error::Dimension {
                op: "from_vec",
                left: (rows, cols),
                right: (values.len(), 1),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric { index });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Dimension {
                op: "from_rows",
                left: (rows.len(), cols),
                right: (1, bad.len()),
            });
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Uniform initialization in `[-1/√fan_in, 1/√fan_in]` with `fan_in = rows`.
    pub fn uniform_init<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let values = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.values[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `out = selfᵀ x`; `x` has length `rows`, `out` has length `cols`.
    /// Zero entries of `x` are skipped, which makes binary association rows cheap.
    pub fn t_matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            let row = self.row(r);
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * xr;
            }
        }
    }

    /// `out = self g`; `g` has length `cols`, `out` has length `rows`.
    pub fn matvec(&self, g: &[f64], out: &mut [f64]) {
        debug_assert_eq!(g.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.row(r).iter().zip(g).map(|(w, v)| w * v).sum();
        }
    }

    /// `self += x gᵀ`, the weight gradient of a `Wᵀx` layer.
    pub fn add_outer(&mut self, x: &[f64], g: &[f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(g.len(), self.cols);
        let cols = self.cols;
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            let row = &mut self.values[r * cols..(r + 1) * cols];
            for (w, &gv) in row.iter_mut().zip(g) {
                *w += xr * gv;
            }
        }
    }

    /// Elementwise `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.values[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.values[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Overflow-safe logistic function.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Matrix) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        values: x.values.iter().map(|&v| logistic(v)).collect(),
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Central-difference gradient `(L(θ+εeᵢ) − L(θ−εeᵢ)) / 2ε` of a scalar loss.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let mut theta = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + eps;
        let plus = loss_fn(&theta);
        theta[i] = orig - eps;
        let minus = loss_fn(&theta);
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric { index: i });
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Largest relative discrepancy between two gradients, with denominators
/// floored at `floor` so coordinates whose true gradient is ~0 are judged
/// on absolute error instead.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(i, (a, n))| ((a - n).abs() / a.abs().max(n.abs()).max(floor), i))
        .fold((0.0, 0), |best, cur| if cur.0 > best.0 { cur } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
        assert_eq!(
            matmul(&a, &m(&[&[0.0], &[0.0]])).unwrap(),
            m(&[&[0.0], &[0.0]])
        );
        assert_eq!(
            matmul(&a, &m(&[&[5.0], &[6.0]])).unwrap(),
            m(&[&[17.0], &[39.0]])
        );
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("(2, 3)"), "{err}");
    }

    #[test]
    fn from_vec_rejects_nan_and_bad_length() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Numeric { index: 1 })
        ));
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(logistic(0.0), 0.5);
        assert!((logistic(500.0) - 1.0).abs() < 1e-12);
        // 1/(1+e^1.5), evaluated independently with mpmath at 30 digits.
        assert!((logistic(-1.5) - 0.182_425_523_806_356_3).abs() < 1e-15);
        for x in [1e6, -1e6, 709.0, -745.0, -800.0] {
            let s = logistic(x);
            assert!((0.0..=1.0).contains(&s), "{x} -> {s}");
        }
        assert!(logistic(-1e6) >= 0.0);
        let mat = sigmoid(&m(&[&[0.0, -1.5]]));
        assert_eq!(mat.get(0, 0), 0.5);
    }

    #[test]
    fn kernels_agree_with_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Matrix::uniform_init(5, 3, 5, &mut rng);
        let x: Vec<f64> = (0..5).map(|i| i as f64 - 2.0).collect();
        let mut out = vec![0.0; 3];
        w.t_matvec(&x, &mut out);
        let expected = matmul(&w.transpose(), &Matrix::from_vec(5, 1, x.clone()).unwrap()).unwrap();
        for (a, b) in out.iter().zip(expected.values()) {
            assert!((a - b).abs() < 1e-14);
        }
        let g = [1.0, -2.0, 0.5];
        let mut back = vec![0.0; 5];
        w.matvec(&g, &mut back);
        let expected = matmul(&w, &Matrix::from_vec(3, 1, g.to_vec()).unwrap()).unwrap();
        for (a, b) in back.iter().zip(expected.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|t| t[0] * t[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let err = finite_diff_grad(|t| if t[1] > 0.5 { f64::INFINITY } else { 0.0 }, &[0.0, 0.5], 1e-5);
        assert!(matches!(err, Err(Error::Numeric { index: 1 })));
        assert!(finite_diff_grad(|t| t[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn analytic_backward_matches_finite_differences() {
        // loss(W, x) = Σ σ(Wᵀx), gradient through t_matvec/add_outer
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let w = Matrix::from_vec(4, 3, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let loss = |flat: &[f64]| {
                let w = Matrix::from_vec(4, 3, flat.to_vec()).unwrap();
                let mut pre = vec![0.0; 3];
                w.t_matvec(&x, &mut pre);
                pre.iter().map(|&p| logistic(p)).sum::<f64>()
            };
            let mut pre = vec![0.0; 3];
            w.t_matvec(&x, &mut pre);
            let gpre: Vec<f64> = pre.iter().map(|&p| logistic(p) * (1.0 - logistic(p))).collect();
            let mut grad = Matrix::zeros(4, 3);
            grad.add_outer(&x, &gpre);
            let numeric = finite_diff_grad(loss, w.values(), 1e-5).unwrap();
            let (err, _) = max_relative_error(grad.values(), &numeric, 1e-6);
            assert!(err < 1e-4, "rel err {err}");
        }
    }

    fn arb_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(
            a in arb_matrix(3, 4),
            b in arb_matrix(4, 2),
            c in arb_matrix(2, 5),
        ) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (l, r) in left.values().iter().zip(right.values()) {
                prop_assert!((l - r).abs() <= 1e-9 * l.abs().max(r.abs()).max(1.0));
            }
        }

        #[test]
        fn sigmoid_strictly_inside_unit_interval(x in -36.0f64..36.0) {
            let s = logistic(x);
            prop_assert!(s > 0.0 && s < 1.0);
        }

        // Beyond |x| ≈ 37 the exact value rounds to 0 or 1 in f64; the
        // formulation must still never overflow.
        #[test]
        fn sigmoid_never_overflows(x in -1e6f64..1e6) {
            let s = logistic(x);
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}
