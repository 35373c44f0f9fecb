use super::{Float, Tensor};
use crate::error::{shape_err, Error, Result};

/// Uniform symmetric quantizer: Q(x) = round(x/s), D(r) = s·r, with integers
/// confined to [−2^(p−1), 2^(p−1)−1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantSpec {
    step: f64,
    bits: u32,
}

/// Saturation counter; out-of-range inputs are clamped silently.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QuantStats {
    pub quantized: u64,
    pub saturated: u64,
}

impl QuantSpec {
    pub fn new(step: f64, bits: u32) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::Config(format!("quantization step must be positive, got {step}")));
        }
        if !(2..=32).contains(&bits) {
            return Err(Error::Config(format!("quantization bits must be in 2..=32, got {bits}")));
        }
        Ok(QuantSpec { step, bits })
    }

    /// Spreads the observed range evenly: s = max|x| / (2^(p−1) − 1).
    /// An all-zero input gets s = 1, under which every value maps to 0.
    pub fn calibrate<T: Float>(values: &[T], bits: u32) -> Result<Self> {
        let m = values.iter().fold(0.0f64, |m, x| m.max(x.as_f64().abs()));
        let step = if m > 0.0 { m / Self::max_int_for(bits) as f64 } else { 1.0 };
        Self::new(step, bits)
    }

    fn max_int_for(bits: u32) -> i64 {
        (1i64 << (bits - 1)) - 1
    }

    pub fn step(&self) -> f64 {
        self.step
    }
    pub fn bits(&self) -> u32 {
        self.bits
    }
    pub fn max_int(&self) -> i64 {
        Self::max_int_for(self.bits)
    }
    pub fn min_int(&self) -> i64 {
        -(1i64 << (self.bits - 1))
    }

    /// Round-half-to-even of x/s, saturated to the integer range.
    pub fn quantize(&self, x: f64) -> i64 {
        self.quantize_counted(x, &mut QuantStats::default())
    }

    pub fn quantize_counted(&self, x: f64, stats: &mut QuantStats) -> i64 {
        stats.quantized += 1;
        let r = (x / self.step).round_ties_even();
        if r > self.max_int() as f64 {
            stats.saturated += 1;
            self.max_int()
        } else if r < self.min_int() as f64 {
            stats.saturated += 1;
            self.min_int()
        } else {
            r as i64
        }
    }

    pub fn dequantize(&self, r: i64) -> f64 {
        self.step * r as f64
    }
}

/// Integer matrix with its quantization spec.
#[derive(Clone, Debug, PartialEq)]
pub struct QTensor {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<i64>,
    pub spec: QuantSpec,
}

impl QTensor {
    pub fn quantize<T: Float>(t: &Tensor<T>, spec: QuantSpec, stats: &mut QuantStats) -> Self {
        QTensor {
            rows: t.rows(),
            cols: t.cols(),
            values: t.data().iter().map(|x| spec.quantize_counted(x.as_f64(), stats)).collect(),
            spec,
        }
    }

    pub fn dequantize<T: Float>(&self) -> Tensor<T> {
        let data = self.values.iter().map(|&r| T::of(self.spec.dequantize(r))).collect();
        Tensor::matrix(self.rows, self.cols, data).expect("sized")
    }
}

/// Integer product of two quantized matrices, dequantized with s_a·s_b.
/// The accumulator is 64-bit and checked.
pub fn qmatmul<T: Float>(a: &QTensor, b: &QTensor) -> Result<Tensor<T>> {
    if a.cols != b.rows {
        return shape_err("quantized_matmul", format!("{}x{} · {}x{}", a.rows, a.cols, b.rows, b.cols));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut acc = vec![0i64; m * n];
    for i in 0..m {
        for p in 0..k {
            let x = a.values[i * k + p];
            if x == 0 {
                continue;
            }
            for j in 0..n {
                let prod = x.checked_mul(b.values[p * n + j]).ok_or(Error::Overflow)?;
                let c = &mut acc[i * n + j];
                *c = c.checked_add(prod).ok_or(Error::Overflow)?;
            }
        }
    }
    let s = a.spec.step * b.spec.step;
    let data = acc.into_iter().map(|v| T::of(v as f64 * s)).collect();
    Tensor::matrix(m, n, data)
}

/// D(Q(a)·Q(b)) with the given specs.
pub fn quantized_matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>, spec_a: QuantSpec, spec_b: QuantSpec) -> Result<Tensor<T>> {
    let mut stats = QuantStats::default();
    let qa = QTensor::quantize(a, spec_a, &mut stats);
    let qb = QTensor::quantize(b, spec_b, &mut stats);
    qmatmul(&qa, &qb)
}

/// Elementwise worst-case |D(Q(a)Q(b)) − ab| for in-range operands:
/// Σ_k |a_ik|·s_b/2 + (s_a/2)·|D(Q(b))_kj|.
pub fn rounding_bound<T: Float>(a: &Tensor<T>, b: &Tensor<T>, spec_a: QuantSpec, spec_b: QuantSpec) -> Result<Tensor<f64>> {
    if a.cols() != b.rows() {
        return shape_err("rounding_bound", "inner extents differ");
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let (ha, hb) = (spec_a.step / 2.0, spec_b.step / 2.0);
    let mut out = Tensor::<f64>::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                let bq = spec_b.dequantize(spec_b.quantize(b.at(p, j).as_f64()));
                s += a.at(i, p).as_f64().abs() * hb + ha * bq.abs();
            }
            out.set(i, j, s);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn worked_arithmetic() {
        let s = QuantSpec::new(0.5, 8).unwrap();
        assert_eq!(s.quantize(1.3), 3);
        assert_eq!(s.dequantize(3), 1.5);
        assert_eq!(s.quantize(0.0), 0);
        let one = QuantSpec::new(1.0, 8).unwrap();
        let a = Tensor::<f64>::scalar(2.4);
        let b = Tensor::<f64>::scalar(1.6);
        let c = quantized_matmul(&a, &b, one, one).unwrap();
        assert_eq!(c.data(), &[4.0]);
    }

    #[test]
    fn ties_go_to_even() {
        let s = QuantSpec::new(1.0, 8).unwrap();
        assert_eq!(s.quantize(2.5), 2);
        assert_eq!(s.quantize(3.5), 4);
        assert_eq!(s.quantize(-2.5), -2);
    }

    #[test]
    fn saturation_is_counted() {
        let s = QuantSpec::new(1.0, 4).unwrap();
        let mut st = QuantStats::default();
        assert_eq!(s.quantize_counted(100.0, &mut st), 7);
        assert_eq!(s.quantize_counted(-100.0, &mut st), -8);
        assert_eq!(s.quantize_counted(3.0, &mut st), 3);
        assert_eq!(st, QuantStats { quantized: 3, saturated: 2 });
    }

    #[test]
    fn sweep_round_trip_within_half_step() {
        let s = QuantSpec::new(2.0 / 255.0, 8).unwrap();
        let mut rng = Rng::new(11);
        for _ in 0..10_000 {
            let x = rng.uniform_in(-1.0, 1.0);
            assert!((s.dequantize(s.quantize(x)) - x).abs() <= s.step() / 2.0 + 1e-15);
        }
    }

    #[test]
    fn zero_matrix_calibrates_to_zero_output() {
        let z = Tensor::<f32>::zeros(3, 3);
        let s = QuantSpec::calibrate(z.data(), 8).unwrap();
        let c = quantized_matmul(&z, &z, s, s).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn accumulator_overflow_is_reported() {
        let s = QuantSpec::new(1.0, 32).unwrap();
        let big = Tensor::<f64>::full(1, 4, 2.0e9);
        let col = Tensor::<f64>::full(4, 1, 2.0e9);
        assert!(matches!(quantized_matmul(&big, &col, s, s), Err(Error::Overflow)));
    }

    #[test]
    fn bad_specs_rejected() {
        assert!(QuantSpec::new(0.0, 8).is_err());
        assert!(QuantSpec::new(1.0, 1).is_err());
    }
}
