use super::{Float, Rng};
use crate::error::{shape_err, Error, Result};

/// Dense row-major array. Most operations treat it as a matrix
/// (`shape == [rows, cols]`); vectors are `1 × n` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err("new", format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, T::zero())
    }

    pub fn full(rows: usize, cols: usize, v: T) -> Self {
        Tensor {
            shape: vec![rows, cols],
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::full(1, 1, v)
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn row_vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    /// Entries drawn uniformly from [lo, hi).
    pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| T::of(rng.uniform_in(lo, hi))).collect();
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    /// Entries drawn from N(0, std²).
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| T::of(std * rng.gaussian())).collect();
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    /// Builds a matrix from `f64` literal rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("from_rows", "ragged rows");
        }
        let data = rows.iter().flat_map(|r| r.iter().map(|&x| T::of(x))).collect();
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Leading extent; 1 for a rank-0 tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of trailing extents.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    pub fn matmul(&self, b: &Self) -> Result<Self> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (b.rows(), b.cols());
        if k != k2 {
            return shape_err("matmul", format!("{m}x{k} · {k2}x{n}"));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(&self.data, &b.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(op, format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }
    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err("add_assign", format!("{:?} vs {:?}", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest elementwise absolute difference (as f64). Shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.rows() {
            return shape_err("slice_rows", format!("{start}+{len} > {}", self.rows()));
        }
        let c = self.cols();
        Self::matrix(len, c, self.data[start * c..(start + len) * c].to_vec())
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (m, c) = (self.rows(), self.cols());
        if start + len > c {
            return shape_err("slice_cols", format!("{start}+{len} > {c}"));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Self::matrix(m, len, data)
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let c = parts.first().map_or(0, |p| p.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return shape_err("concat_rows", format!("column counts {} vs {c}", p.cols()));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Self::matrix(rows, c, data)
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let m = parts.first().map_or(0, |p| p.rows());
        if parts.iter().any(|p| p.rows() != m) {
            return shape_err("concat_cols", "row counts differ");
        }
        let c: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(m * c);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Self::matrix(m, c, data)
    }
}

/// Below this many multiply-adds the plain loops beat the blocked kernel.
const SMALL_GEMM: usize = 4096;

fn st(x: usize) -> isize {
    x as isize
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    if m * k * n >= SMALL_GEMM {
        return T::gemm_acc(m, k, n, a, (st(k), 1), b, (st(n), 1), c, (st(n), 1));
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c += aᵀ · b` for `a: k×m`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_tn<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    if m * k * n >= SMALL_GEMM {
        return T::gemm_acc(m, k, n, a, (1, st(m)), b, (st(n), 1), c, (st(n), 1));
    }
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

/// `c += a · bᵀ` for `a: m×k`, `b: n×k`, `c: m×n`.
pub(crate) fn gemm_nt<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    if m * k * n >= SMALL_GEMM {
        return T::gemm_acc(m, k, n, a, (st(k), 1), b, (1, st(k)), c, (st(n), 1));
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// Row-wise softmax with an optional additive mask whose entries are finite
/// or `-inf`. Masked entries come out as exactly zero.
pub fn softmax_rows<T: Float>(x: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if let Some(m) = mask {
        if !m.same_shape(x) {
            return shape_err("softmax_rows", format!("mask {:?} vs logits {:?}", m.shape(), x.shape()));
        }
    }
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(rows * cols);
    let mut buf = vec![T::zero(); cols];
    for i in 0..rows {
        let xr = x.row(i);
        let mut mx = T::neg_infinity();
        for j in 0..cols {
            let v = match mask {
                Some(m) => xr[j] + m.row(i)[j],
                None => xr[j],
            };
            buf[j] = v;
            if v > mx {
                mx = v;
            }
        }
        if mx == T::neg_infinity() {
            return Err(Error::DegenerateRow { row: i });
        }
        let mut z = T::zero();
        for v in buf.iter_mut() {
            *v = if *v == T::neg_infinity() { T::zero() } else { (*v - mx).exp() };
            z += *v;
        }
        out.extend(buf.iter().map(|&v| v / z));
    }
    Tensor::matrix(rows, cols, out)
}

/// Row-wise log-softmax (no mask).
pub fn log_softmax_rows<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let r = x.row(i);
        let mx = r.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = mx + r.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
        out.extend(r.iter().map(|&v| v - lse));
    }
    Tensor {
        shape: vec![rows, cols],
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let b = Tensor::<f64>::from_rows(&[&[1., 2.], &[3., 4.]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&b).unwrap(), b);
        assert_eq!(b.matmul(&Tensor::eye(2)).unwrap(), b);
        let c = Tensor::<f64>::from_fn(3, 4, |i, j| (i * 4 + j) as f64);
        assert_eq!(Tensor::eye(3).matmul(&c).unwrap(), c);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor::<f32>::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn transposed_kernels_agree() {
        let a = Tensor::<f64>::from_fn(3, 4, |i, j| (i as f64) - 0.5 * j as f64);
        let b = Tensor::<f64>::from_fn(4, 2, |i, j| (i * j) as f64 + 0.25);
        let want = a.matmul(&b).unwrap();
        let at = a.transpose();
        let mut c = vec![0.0; 6];
        gemm_tn(at.data(), b.data(), &mut c, 3, 4, 2);
        assert_eq!(c, want.data());
        let bt = b.transpose();
        let mut c = vec![0.0; 6];
        gemm_nt(a.data(), bt.data(), &mut c, 3, 4, 2);
        assert_eq!(c, want.data());
    }

    #[test]
    fn softmax_edge_rows() {
        let ninf = f64::NEG_INFINITY;
        let x = Tensor::<f64>::from_rows(&[&[0.3, 0.3, 0.3], &[5.0, 1.0, 2.0]]).unwrap();
        let m = Tensor::from_rows(&[&[0., 0., 0.], &[ninf, 0., ninf]]).unwrap();
        let p = softmax_rows(&x, Some(&m)).unwrap();
        for j in 0..3 {
            assert!((p.at(0, j) - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(p.row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let x = Tensor::<f32>::zeros(2, 2);
        let m = Tensor::from_rows(&[&[0., 0.], &[f64::NEG_INFINITY, f64::NEG_INFINITY]]).unwrap();
        assert!(matches!(softmax_rows(&x, Some(&m)), Err(Error::DegenerateRow { row: 1 })));
    }

    #[test]
    fn concat_and_slice_invert() {
        let a = Tensor::<f32>::from_fn(3, 5, |i, j| (i * 5 + j) as f32);
        let l = a.slice_cols(0, 2).unwrap();
        let r = a.slice_cols(2, 3).unwrap();
        assert_eq!(Tensor::concat_cols(&[&l, &r]).unwrap(), a);
        let t = a.slice_rows(0, 1).unwrap();
        let b = a.slice_rows(1, 2).unwrap();
        assert_eq!(Tensor::concat_rows(&[&t, &b]).unwrap(), a);
    }
}
