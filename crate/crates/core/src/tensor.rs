//! Dense row-major `f64` matrices.
//!
//! All operations return new matrices; inputs are never mutated.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            write!(f, "{:?}", self.row(r))?;
            if r + 1 < self.rows {
                write!(f, ", ")?;
            }
        }
        if self.rows > 6 {
            write!(f, "...")?;
        }
        write!(f, "]")
    }
}

/// Elementwise operations accepted by [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementOp {
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    /// 1 where x > 0, else 0 (including at x == 0).
    ReluGrad,
}

/// Second operand of [`elementwise`]. Unary ops ignore it.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Matrix(&'a Matrix),
    Scalar(f64),
    None,
}

fn shape_str(m: &Matrix) -> String {
    format!("({}, {})", m.rows, m.cols)
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "matrix dimensions must be positive, got ({rows}, {cols})"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not match shape ({rows}, {cols})",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape(format!(
                "ragged rows: expected {cols} columns, found {}",
                bad.len()
            )));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// New matrix made of the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Shape(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_vec(indices.len(), self.cols, data)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts
            .first()
            .ok_or_else(|| Error::Shape("vstack of zero matrices".into()))?
            .cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::Shape(format!(
                    "vstack column mismatch: {} vs {}",
                    shape_str(parts[0]),
                    shape_str(p)
                )));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Matrix::from_vec(rows, cols, data)
    }

    /// Adds a `(1, cols)` row vector to every row.
    pub fn add_row(&self, row: &Matrix) -> Result<Matrix> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::Shape(format!(
                "cannot broadcast {} over {}",
                shape_str(row),
                shape_str(self)
            )));
        }
        let mut out = self.clone();
        for chunk in out.data.chunks_exact_mut(self.cols) {
            for (x, b) in chunk.iter_mut().zip(&row.data) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// Column sums as a `(1, cols)` row.
    pub fn column_sums(&self) -> Matrix {
        let mut out = vec![0.0; self.cols];
        for chunk in self.data.chunks_exact(self.cols) {
            for (acc, x) in out.iter_mut().zip(chunk) {
                *acc += x;
            }
        }
        Matrix {
            rows: 1,
            cols: self.cols,
            data: out,
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        elementwise(ElementOp::Add, self, Operand::Matrix(other))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        elementwise(ElementOp::Sub, self, Operand::Matrix(other))
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        elementwise(ElementOp::Mul, self, Operand::Matrix(other))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn relu(&self) -> Matrix {
        self.map(|x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn relu_grad(&self) -> Matrix {
        self.map(|x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "elementwise operands differ: {} vs {}",
                shape_str(self),
                shape_str(other)
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Applies `op` elementwise. Binary ops need a matching matrix operand
/// (or, for `Scale`, a scalar).
pub fn elementwise(op: ElementOp, a: &Matrix, b: Operand<'_>) -> Result<Matrix> {
    match (op, b) {
        (ElementOp::Relu, _) => Ok(a.relu()),
        (ElementOp::ReluGrad, _) => Ok(a.relu_grad()),
        (ElementOp::Scale, Operand::Scalar(s)) => Ok(a.scale(s)),
        (ElementOp::Add, Operand::Scalar(s)) => Ok(a.map(|x| x + s)),
        (ElementOp::Sub, Operand::Scalar(s)) => Ok(a.map(|x| x - s)),
        (ElementOp::Mul, Operand::Scalar(s)) => Ok(a.scale(s)),
        (ElementOp::Add, Operand::Matrix(m)) => a.zip_with(m, |x, y| x + y),
        (ElementOp::Sub, Operand::Matrix(m)) => a.zip_with(m, |x, y| x - y),
        (ElementOp::Mul, Operand::Matrix(m)) => a.zip_with(m, |x, y| x * y),
        (ElementOp::Scale, Operand::Matrix(m)) => Err(Error::Shape(format!(
            "scale expects a scalar operand, got matrix {}",
            shape_str(m)
        ))),
        (op, Operand::None) => Err(Error::Shape(format!("{op:?} needs a second operand"))),
    }
}

/// `a × b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!("matmul {} x {}", shape_str(a), shape_str(b))));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// `aᵀ × b` without materialising the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!("matmul_tn {}ᵀ x {}", shape_str(a), shape_str(b))));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; k * m];
    for r in 0..n {
        let a_row = &a.data[r * k..(r + 1) * k];
        let b_row = &b.data[r * m..(r + 1) * m];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Matrix {
        rows: k,
        cols: m,
        data: out,
    })
}

/// `a × bᵀ` without materialising the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!("matmul_nt {} x {}ᵀ", shape_str(a), shape_str(b))));
    }
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let b_row = &b.data[j * k..(j + 1) * k];
            out[i * m + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &x).unwrap(), x);
    }

    #[test]
    fn row_times_column() {
        let r = matmul(&m(&[&[1.0, 2.0]]), &m(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(r, m(&[&[11.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(5);
        let a = rng.normal_matrix(5, 4, 0.0, 1.0);
        let b = rng.normal_matrix(4, 3, 0.0, 1.0);
        let got = matmul(&a, &b).unwrap();
        let want = naive(&a, &b);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = SeededRng::new(6);
        let a = rng.normal_matrix(7, 4, 0.0, 1.0);
        let b = rng.normal_matrix(7, 3, 0.0, 1.0);
        let c = rng.normal_matrix(5, 4, 0.0, 1.0);
        let tn = matmul_tn(&a, &b).unwrap();
        let tn_ref = naive(&a.transpose(), &b);
        let nt = matmul_nt(&a, &c).unwrap();
        let nt_ref = naive(&a, &c.transpose());
        for (x, y) in tn.data().iter().zip(tn_ref.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in nt.data().iter().zip(nt_ref.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn relu_and_grad() {
        let x = m(&[&[-1.0, 0.0, 2.0]]);
        let r = elementwise(ElementOp::Relu, &x, Operand::None).unwrap();
        assert_eq!(r, m(&[&[0.0, 0.0, 2.0]]));
        let g = elementwise(ElementOp::ReluGrad, &x, Operand::None).unwrap();
        assert_eq!(g, m(&[&[0.0, 0.0, 1.0]]));
    }

    #[test]
    fn add_scalars() {
        let r = elementwise(ElementOp::Add, &m(&[&[1.0]]), Operand::Matrix(&m(&[&[2.0]])));
        assert_eq!(r.unwrap(), m(&[&[3.0]]));
    }

    #[test]
    fn binary_shape_mismatch() {
        let r = Matrix::zeros(1, 2).add(&Matrix::zeros(2, 1));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn rejects_empty_and_bad_length() {
        assert!(Matrix::from_vec(0, 3, vec![]).is_err());
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn inputs_are_not_mutated() {
        let a = m(&[&[1.0, -2.0]]);
        let before = a.clone();
        let _ = a.relu();
        let _ = a.add(&a).unwrap();
        let _ = matmul(&a, &a.transpose()).unwrap();
        assert_eq!(a, before);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..6, k in 1usize..6, p in 1usize..6, q in 1usize..6) {
            let mut rng = SeededRng::new(seed);
            let a = rng.normal_matrix(n, k, 0.0, 1.0);
            let b = rng.normal_matrix(k, p, 0.0, 1.0);
            let c = rng.normal_matrix(p, q, 0.0, 1.0);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.frobenius_norm().max(1.0);
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() / scale < 1e-9);
            }
        }

        #[test]
        fn relu_is_idempotent(seed in any::<u64>(), r in 1usize..8, c in 1usize..8) {
            let x = SeededRng::new(seed).normal_matrix(r, c, 0.0, 3.0);
            prop_assert_eq!(x.relu().relu(), x.relu());
        }

        #[test]
        fn seeded_computation_is_bit_identical(seed in any::<u64>()) {
            let run = || {
                let mut rng = SeededRng::new(seed);
                let a = rng.normal_matrix(4, 3, 0.0, 1.0);
                let b = rng.normal_matrix(3, 2, 0.0, 1.0);
                matmul(&a, &b).unwrap().relu()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
