//! Dense f64 linear algebra and a small first-order optimizer.
//!
//! Everything here is deterministic: matmul uses a fixed accumulation
//! order, the solver is a plain Cholesky factorization, and the optimizer
//! is gradient descent with a constant step size. All editing-side math
//! runs through these routines in 64-bit floats.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        Matrix { rows, cols, data }
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(cols: &[Vector]) -> Self {
        let c = cols.len();
        let r = cols.first().map_or(0, Vector::dim);
        let mut m = Matrix::zeros(r, c);
        for (j, v) in cols.iter().enumerate() {
            assert_eq!(v.dim(), r, "ragged columns");
            for i in 0..r {
                m.data[i * c + j] = v[i];
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vector {
        Vector::from((0..self.rows).map(|i| self.get(i, j)).collect::<Vec<_>>())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimMismatch {
                op: "matrix add",
                detail: format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimMismatch {
                op: "matrix sub",
                detail: format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Max absolute asymmetry |A[i,j] - A[j,i]| over a square matrix.
    pub fn asymmetry(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// M·v for a vector v.
    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        if self.cols != v.dim() {
            return Err(Error::DimMismatch {
                op: "matvec",
                detail: format!("{}x{} times {}", self.rows, self.cols, v.dim()),
            });
        }
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(v.data()) {
                acc += a * b;
            }
            out[i] = acc;
        }
        Ok(Vector::from(out))
    }

    /// Mᵀ·v without materializing the transpose.
    pub fn matvec_t(&self, v: &Vector) -> Result<Vector> {
        if self.rows != v.dim() {
            return Err(Error::DimMismatch {
                op: "matvec_t",
                detail: format!("{}x{} transposed times {}", self.rows, self.cols, v.dim()),
            });
        }
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            let vi = v[i];
            for (o, a) in out.iter_mut().zip(row) {
                *o += vi * a;
            }
        }
        Ok(Vector::from(out))
    }
}

/// Dense f64 vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector {
            data: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dot of mismatched dims");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim(), "add of mismatched dims");
        Vector::from(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect::<Vec<_>>(),
        )
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim(), "sub of mismatched dims");
        Vector::from(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        )
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector::from(self.data.iter().map(|x| x * s).collect::<Vec<_>>())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Outer product self · otherᵀ.
    pub fn outer(&self, other: &Vector) -> Matrix {
        let mut m = Matrix::zeros(self.dim(), other.dim());
        for i in 0..self.dim() {
            for j in 0..other.dim() {
                m.data[i * other.dim() + j] = self.data[i] * other.data[j];
            }
        }
        m
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector { data }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

impl std::ops::Index<usize> for Matrix {
    type Output = [f64];
    fn index(&self, i: usize) -> &[f64] {
        self.row(i)
    }
}

/// Matrix product a·b with a fixed i-k-j accumulation order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimMismatch {
            op: "matmul",
            detail: format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let arow = &a.data[i * a.cols..(i + 1) * a.cols];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * n..(k + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor of an SPD matrix.
///
/// Fails with the index of the first non-positive pivot; the caller
/// decides whether that is a configuration error (it usually is: the
/// regularizer lambda was zero and the key matrix is rank deficient).
pub fn cholesky(m: &Matrix) -> Result<Matrix> {
    if m.rows != m.cols {
        return Err(Error::DimMismatch {
            op: "cholesky",
            detail: format!("{}x{} is not square", m.rows, m.cols),
        });
    }
    let n = m.rows;
    let sym_tol = 1e-9 * m.norm().max(1.0);
    if m.asymmetry() > sym_tol {
        return Err(Error::Validation(format!(
            "cholesky input not symmetric: max asymmetry {:.3e}",
            m.asymmetry()
        )));
    }
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::NotSpd {
                        pivot: i,
                        value: sum,
                        hint: " (hint: use lambda > 0 so C + K\u{0302}K\u{0302}\u{1d40} stays positive definite)".into(),
                    });
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solves m·X = b for SPD m via Cholesky, column by column.
///
/// The relative residual ‖m·X − b‖_F / ‖b‖_F is checked to stay within
/// 1e-9 for every accepted input.
pub fn solve_spd(m: &Matrix, b: &Matrix) -> Result<Matrix> {
    if m.rows != b.rows {
        return Err(Error::DimMismatch {
            op: "solve_spd",
            detail: format!("{}x{} vs rhs {}x{}", m.rows, m.cols, b.rows, b.cols),
        });
    }
    let l = cholesky(m)?;
    let n = m.rows;
    let mut x = Matrix::zeros(n, b.cols);
    let mut y = vec![0.0; n];
    for col in 0..b.cols {
        // forward: L y = b[:, col]
        for i in 0..n {
            let mut sum = b.get(i, col);
            for k in 0..i {
                sum -= l.get(i, k) * y[k];
            }
            y[i] = sum / l.get(i, i);
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in (i + 1)..n {
                sum -= l.get(k, i) * x.get(k, col);
            }
            x.set(i, col, sum / l.get(i, i));
        }
    }
    let residual = matmul(m, &x)?.sub(b)?.norm();
    let scale = b.norm();
    if scale > 0.0 && residual / scale > 1e-9 {
        return Err(Error::Validation(format!(
            "solve_spd residual {:.3e} exceeds 1e-9 (badly conditioned system)",
            residual / scale
        )));
    }
    Ok(x)
}

/// Gradient descent schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub step_count: usize,
    pub learning_rate: f64,
    /// Max allowed ratio ‖delta‖ / ‖reference hidden‖ when the clamp
    /// projection is installed.
    pub clamp_factor: f64,
    pub seed: u64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_count < 1 {
            return Err(Error::Validation("step_count must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Validation("learning_rate must be > 0".into()));
        }
        if !(self.clamp_factor > 0.0) {
            return Err(Error::Validation("clamp_factor must be > 0".into()));
        }
        Ok(())
    }
}

/// Plain gradient descent with a fixed step size.
///
/// The objective returns (loss, gradient); non-finite values abort with
/// the step index. `step_count = 0` returns the init unchanged.
pub fn descend<F>(objective: F, init: &Vector, cfg: &OptimizerConfig) -> Result<Vector>
where
    F: FnMut(&Vector) -> Result<(f64, Vector)>,
{
    descend_projected(objective, init, cfg, |_| {})
}

/// Gradient descent with a projection applied after every step.
///
/// The edit engine installs the norm clamp here, so the clamp constraint
/// holds at every iterate, not just the final one.
pub fn descend_projected<F, P>(
    mut objective: F,
    init: &Vector,
    cfg: &OptimizerConfig,
    project: P,
) -> Result<Vector>
where
    F: FnMut(&Vector) -> Result<(f64, Vector)>,
    P: Fn(&mut Vector),
{
    let mut x = init.clone();
    for step in 0..cfg.step_count {
        let (loss, grad) = objective(&x)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "loss", step });
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient",
                step,
            });
        }
        if grad.dim() != x.dim() {
            return Err(Error::DimMismatch {
                op: "descend",
                detail: format!("gradient dim {} vs point dim {}", grad.dim(), x.dim()),
            });
        }
        for (xi, gi) in x.data_mut().iter_mut().zip(grad.data()) {
            *xi -= cfg.learning_rate * gi;
        }
        project(&mut x);
    }
    Ok(x)
}

/// Central finite differences of a loss-only objective.
pub fn finite_diff_grad<F>(mut objective: F, point: &Vector, eps: f64) -> Result<Vector>
where
    F: FnMut(&Vector) -> Result<f64>,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut grad = Vector::zeros(point.dim());
    let mut probe = point.clone();
    for i in 0..point.dim() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = objective(&probe)?;
        probe[i] = orig - eps;
        let down = objective(&probe)?;
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent naive triple-loop product, deliberately in i-j-k order.
    fn matmul_oracle(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn matmul_identity() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let i2 = Matrix::identity(2);
        assert_eq!(matmul(&i2, &a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 8, 8);
        let b = random_matrix(&mut rng, 8, 8);
        let fast = matmul(&a, &b).unwrap();
        let slow = matmul_oracle(&a, &b);
        let max_diff = fast
            .data()
            .iter()
            .zip(slow.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn matmul_dim_mismatch_errors() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(
            matmul(&a, &b),
            Err(Error::DimMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_deterministic_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 6, 5);
        let b = random_matrix(&mut rng, 5, 4);
        let first = matmul(&a, &b).unwrap();
        for _ in 0..3 {
            assert_eq!(matmul(&a, &b).unwrap(), first);
        }
    }

    #[test]
    fn solve_identity() {
        let b = Matrix::from_rows(&[vec![3.0], vec![-1.0]]);
        let x = solve_spd(&Matrix::identity(2), &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn solve_diagonal() {
        let m = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![2.0], vec![8.0]]);
        let x = solve_spd(&m, &b).unwrap();
        assert!((x.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((x.get(1, 0) - 2.0).abs() < 1e-12);
    }

    /// 3x3 explicit inverse by adjugate, used as an independent oracle.
    fn inverse3_adjugate(m: &Matrix) -> Matrix {
        assert_eq!((m.rows(), m.cols()), (3, 3));
        let a = m.data();
        let det = a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
            + a[2] * (a[3] * a[7] - a[4] * a[6]);
        let adj = [
            a[4] * a[8] - a[5] * a[7],
            a[2] * a[7] - a[1] * a[8],
            a[1] * a[5] - a[2] * a[4],
            a[5] * a[6] - a[3] * a[8],
            a[0] * a[8] - a[2] * a[6],
            a[2] * a[3] - a[0] * a[5],
            a[3] * a[7] - a[4] * a[6],
            a[1] * a[6] - a[0] * a[7],
            a[0] * a[4] - a[1] * a[3],
        ];
        Matrix::from_vec(3, 3, adj.iter().map(|x| x / det).collect())
    }

    #[test]
    fn solve_spd_matches_adjugate_inverse_3x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 3, 3);
        // AᵀA + I is SPD.
        let m = matmul(&a.transpose(), &a)
            .unwrap()
            .add(&Matrix::identity(3))
            .unwrap();
        let b = random_matrix(&mut rng, 3, 1);
        let x = solve_spd(&m, &b).unwrap();
        let x_oracle = matmul(&inverse3_adjugate(&m), &b).unwrap();
        for (u, v) in x.data().iter().zip(x_oracle.data()) {
            assert!((u - v).abs() < 1e-10, "{u} vs {v}");
        }
    }

    #[test]
    fn solve_spd_random_6x6_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 6, 6);
        let m = matmul(&a.transpose(), &a)
            .unwrap()
            .add(&Matrix::identity(6))
            .unwrap();
        let b = random_matrix(&mut rng, 6, 3);
        let x = solve_spd(&m, &b).unwrap();
        let resid = matmul(&m, &x).unwrap().sub(&b).unwrap().norm() / b.norm();
        assert!(resid <= 1e-9, "relative residual {resid}");
    }

    #[test]
    fn solve_spd_rejects_indefinite_naming_pivot() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -2.0]]);
        match solve_spd(&m, &Matrix::identity(2)) {
            Err(Error::NotSpd { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected NotSpd, got {other:?}"),
        }
    }

    fn quad_cfg(steps: usize, lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            step_count: steps,
            learning_rate: lr,
            clamp_factor: 4.0,
            seed: 0,
        }
    }

    #[test]
    fn descend_norm_squared() {
        let obj = |x: &Vector| {
            let loss = x.data().iter().map(|v| v * v).sum();
            let grad = x.scale(2.0);
            Ok((loss, grad))
        };
        let out = descend(obj, &Vector::from(vec![1.0, 1.0]), &quad_cfg(100, 0.1)).unwrap();
        assert!(out.norm() <= 1e-3, "norm {}", out.norm());
    }

    #[test]
    fn descend_shifted_quadratic() {
        let c = Vector::from(vec![2.0, -3.0, 0.5]);
        let target = c.clone();
        let obj = move |x: &Vector| {
            let d = x.sub(&target);
            Ok((d.dot(&d), d.scale(2.0)))
        };
        let out = descend(obj, &Vector::zeros(3), &quad_cfg(200, 0.1)).unwrap();
        assert!(out.sub(&c).norm() <= 1e-3);
    }

    #[test]
    fn descend_rosenbrock_improves() {
        let rosen = |x: &Vector| {
            let (a, b) = (x[0], x[1]);
            let loss = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g0 = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            let g1 = 200.0 * (b - a * a);
            Ok((loss, Vector::from(vec![g0, g1])))
        };
        let init = Vector::from(vec![-1.2, 1.0]);
        let (loss0, _) = rosen(&init).unwrap();
        let out = descend(rosen, &init, &quad_cfg(500, 1e-3)).unwrap();
        let (loss1, _) = rosen(&out).unwrap();
        assert!(loss1 < loss0, "loss {loss1} not below {loss0}");
    }

    #[test]
    fn descend_zero_steps_returns_init() {
        let init = Vector::from(vec![1.0, 2.0]);
        let out = descend(
            |x: &Vector| Ok((x.dot(x), x.scale(2.0))),
            &init,
            &quad_cfg(0, 0.1),
        )
        .unwrap();
        assert_eq!(out, init);
    }

    #[test]
    fn descend_aborts_on_non_finite_with_step_index() {
        let obj = |_: &Vector| Ok((f64::NAN, Vector::zeros(2)));
        match descend(obj, &Vector::zeros(2), &quad_cfg(10, 0.1)) {
            Err(Error::NonFinite { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn descend_projection_caps_norm_every_step() {
        let max_norm = 0.5;
        let obj = |x: &Vector| Ok((-x[0], Vector::from(vec![-1.0, 0.0])));
        let out = descend_projected(obj, &Vector::zeros(2), &quad_cfg(50, 1.0), |x| {
            let n = x.norm();
            if n > max_norm {
                let s = max_norm / n;
                for v in x.data_mut() {
                    *v *= s;
                }
            }
        })
        .unwrap();
        assert!(out.norm() <= max_norm + 1e-12);
    }

    #[test]
    fn finite_diff_square() {
        let g = finite_diff_grad(
            |x: &Vector| Ok(x[0] * x[0]),
            &Vector::from(vec![3.0]),
            1e-5,
        )
        .unwrap();
        assert!((g[0] - 6.0).abs() <= 1e-4);
    }

    #[test]
    fn finite_diff_constant_is_zero() {
        let g = finite_diff_grad(|_: &Vector| Ok(7.0), &Vector::from(vec![1.0, 2.0]), 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn optimizer_config_validation() {
        let mut cfg = quad_cfg(25, 0.5);
        assert!(cfg.validate().is_ok());
        cfg.step_count = 0;
        assert!(cfg.validate().is_err());
        cfg.step_count = 1;
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
    }
}
