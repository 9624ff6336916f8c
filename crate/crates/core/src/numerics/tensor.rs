use crate::error::{shape_err, Error, Result};

/// Dense row-major array of `f64`.
///
/// Gradients are not stored on the tensor itself; they live on the nodes of a
/// [`Graph`](super::Graph), which owns one same-shape buffer per node that
/// requires a gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// A `1 x n` row vector.
    pub fn row(values: &[f64]) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    /// Build a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_slice_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn require_matrix(&self, what: &str) -> Result<()> {
        if self.rank() != 2 {
            return shape_err(format!("{what} expects a matrix, got {:?}", self.shape));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        self.require_matrix("transpose")?;
        let (m, n) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(out)
    }

    /// `self · other`
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.require_matrix("matmul")?;
        other.require_matrix("matmul")?;
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return shape_err(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        self.require_matrix("matmul_nt")?;
        other.require_matrix("matmul_nt")?;
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (other.rows(), other.cols());
        if k != k2 {
            return shape_err(format!(
                "matmul_nt {:?} x {:?}ᵀ",
                self.shape, other.shape
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = dot(a, b);
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        self.require_matrix("matmul_tn")?;
        other.require_matrix("matmul_tn")?;
        let (k, m) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return shape_err(format!(
                "matmul_tn {:?}ᵀ x {:?}",
                self.shape, other.shape
            ));
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let arow = &self.data[p * m..(p + 1) * m];
            let brow = &other.data[p * n..(p + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return shape_err(format!(
                "softmax axis {axis} out of range for rank {}",
                self.rank()
            ));
        }
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n)
                    .map(|k| self.data[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (self.data[idx(k)] - max).exp();
                    out.data[idx(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out.data[idx(k)] /= z;
                }
            }
        }
        Ok(out)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }
}

/// Elementwise `log Σ exp` over a list of same-shape tensors.
///
/// A singleton list is returned unchanged.
pub fn logsumexp(xs: &[Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Domain("logsumexp of an empty list".into()))?;
    if xs.iter().any(|x| x.shape() != first.shape()) {
        return shape_err("logsumexp inputs differ in shape");
    }
    if xs.len() == 1 {
        return Ok(first.clone());
    }
    let mut out = first.clone();
    for (i, o) in out.data.iter_mut().enumerate() {
        let max = xs.iter().map(|x| x.data[i]).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = xs.iter().map(|x| (x.data[i] - max).exp()).sum();
        *o = max + s.ln();
    }
    Ok(out)
}

/// Largest `f64` below one.
const SIGMOID_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

/// Numerically stable logistic function, kept strictly inside `(0, 1)`.
///
/// Without the clamp `σ(x)` rounds to exactly `1.0` from `x ≈ 37` on.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, SIGMOID_CEIL)
}

/// `log σ(x)` without cancellation for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Complex vector stored as interleaved `(re, im)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVec {
    data: Vec<f64>,
}

impl ComplexVec {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.len() % 2 != 0 {
            return Err(Error::Domain(format!(
                "complex vector needs an even length, got {}",
                data.len()
            )));
        }
        Ok(ComplexVec { data })
    }

    pub fn pack(pairs: &[(f64, f64)]) -> Self {
        ComplexVec {
            data: pairs.iter().flat_map(|&(re, im)| [re, im]).collect(),
        }
    }

    pub fn unpack(&self) -> Vec<(f64, f64)> {
        self.data.chunks_exact(2).map(|c| (c[0], c[1])).collect()
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn hadamard(&self, other: &ComplexVec) -> Result<ComplexVec> {
        if self.dim() != other.dim() {
            return shape_err(format!("complex dims {} vs {}", self.dim(), other.dim()));
        }
        let mut out = vec![0.0; self.dim()];
        cmul_into(&self.data, &other.data, &mut out);
        Ok(ComplexVec { data: out })
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `out = a ∘ b` over interleaved complex coordinates.
pub(crate) fn cmul_into(a: &[f64], b: &[f64], out: &mut [f64]) {
    for ((x, y), o) in a
        .chunks_exact(2)
        .zip(b.chunks_exact(2))
        .zip(out.chunks_exact_mut(2))
    {
        o[0] = x[0] * y[0] - x[1] * y[1];
        o[1] = x[0] * y[1] + x[1] * y[0];
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::row(&[0.0, 0.0]).reshape(&[2]).unwrap().softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = Tensor::new(vec![2], vec![1f64.ln(), 3f64.ln()])
            .unwrap()
            .softmax(0)
            .unwrap();
        assert!(close(s.data()[0], 0.25, 1e-12));
        assert!(close(s.data()[1], 0.75, 1e-12));

        let s = Tensor::new(vec![3], vec![1000.0; 3]).unwrap().softmax(0).unwrap();
        for v in s.data() {
            assert!(close(*v, 1.0 / 3.0, 1e-12));
        }
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let t = Tensor::zeros(&[2, 3]);
        assert!(matches!(t.softmax(2), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_middle_axis_of_rank3() {
        let t = Tensor::new(vec![2, 3, 2], (0..12).map(|v| v as f64 * 0.3).collect()).unwrap();
        let s = t.softmax(1).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let total: f64 = (0..3).map(|k| s.data()[(o * 3 + k) * 2 + i]).sum();
                assert!(close(total, 1.0, 1e-12));
            }
        }
    }

    #[test]
    fn logsumexp_examples() {
        let one = Tensor::row(&[0.0, 0.0]);
        assert_eq!(logsumexp(&[one.clone()]).unwrap(), one);

        let z = Tensor::row(&[0.0]);
        let out = logsumexp(&[z.clone(), z]).unwrap();
        assert!(close(out.item(), 2f64.ln(), 1e-15));

        let big = Tensor::row(&[1000.0]);
        let out = logsumexp(&[big.clone(), big]).unwrap();
        assert!(out.is_finite());
        assert!(close(out.item(), 1000.0 + 2f64.ln(), 1e-9));

        assert!(matches!(logsumexp(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        let s = sigmoid(20.0);
        assert!(s < 1.0);
        assert!(close(s, 1.0 / (1.0 + (-20f64).exp()), 1e-16));
        assert!(close(s, 0.999_999_997_9, 1e-10));
        for x in [-3.0, -0.1, 0.7, 12.0] {
            assert!(close(sigmoid(-x), 1.0 - sigmoid(x), 1e-9));
        }
        assert!(sigmoid(-800.0) > 0.0);
        assert!(sigmoid(800.0) < 1.0);
    }

    #[test]
    fn log_sigmoid_matches_naive_in_safe_range() {
        for x in [-30.0, -2.0, 0.0, 3.0, 25.0] {
            assert!(close(log_sigmoid(x), sigmoid(x).ln(), 1e-12));
        }
        assert!(log_sigmoid(-1000.0).is_finite());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![1., 0., 0., 1., 1., 1.]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.data(), &[4., 5., 10., 11.]);
        assert_eq!(a.matmul_nt(&b.transpose().unwrap()).unwrap(), ab);
        assert_eq!(a.transpose().unwrap().matmul_tn(&b).unwrap(), ab);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn complex_vec_requires_even_dim() {
        assert!(ComplexVec::new(vec![1.0, 2.0, 3.0]).is_err());
        let c = ComplexVec::pack(&[(1.0, 0.0), (0.0, 1.0)]);
        let r = ComplexVec::pack(&[(0.0, 1.0), (1.0, 0.0)]);
        assert_eq!(c.hadamard(&r).unwrap().as_slice(), &[0.0, 1.0, 0.0, 1.0]);
    }
}
