use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Sparse attention patterns. Sizes count positions, so `Window { size: 1 }`
/// is self-only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FieldPattern {
    /// j within `size − 1` positions of i.
    Window { size: usize },
    /// i and j in the same block of `size` consecutive positions.
    Chunked { size: usize },
    /// j ≡ i (mod stride).
    Strided { stride: usize },
    /// j = i ± t·dilation for t < window.
    Dilated { window: usize, dilation: usize },
    /// Global positions see and are seen by every position.
    Global { positions: Vec<usize> },
    /// `k` positions per row drawn from a generator seeded by (seed, row).
    Random { k: usize, seed: u64 },
    /// Union of the component fields.
    Hybrid(Vec<FieldPattern>),
}

/// Per-row retained key positions π_i, each row sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionField {
    rows: Vec<Vec<usize>>,
}

impl AttentionField {
    pub fn from_rows(mut rows: Vec<Vec<usize>>) -> Self {
        for r in &mut rows {
            r.sort_unstable();
            r.dedup();
        }
        AttentionField { rows }
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// Retained positions for row i; empty beyond the field's extent.
    pub fn row(&self, i: usize) -> &[usize] {
        self.rows.get(i).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.row(i).binary_search(&j).is_ok()
    }

    pub fn retained(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Retained pairs over n².
    pub fn sparsity(&self) -> f64 {
        let n = self.n() as f64;
        self.retained() as f64 / (n * n)
    }

    pub fn union(&self, other: &Self) -> Self {
        let n = self.n().max(other.n());
        let rows = (0..n)
            .map(|i| self.row(i).iter().chain(other.row(i)).copied().collect::<BTreeSet<_>>().into_iter().collect())
            .collect();
        AttentionField { rows }
    }
}

fn validate(p: &FieldPattern) -> Result<()> {
    let bad = |what: &str| Err(Error::Config(format!("attention field {what} must be at least 1")));
    match p {
        FieldPattern::Window { size } | FieldPattern::Chunked { size } if *size == 0 => bad("size"),
        FieldPattern::Strided { stride } if *stride == 0 => bad("stride"),
        FieldPattern::Dilated { window, dilation } if *window == 0 || *dilation == 0 => bad("window and dilation"),
        FieldPattern::Random { k, .. } if *k == 0 => bad("random count"),
        FieldPattern::Hybrid(ps) => ps.iter().try_for_each(validate),
        _ => Ok(()),
    }
}

/// Builds the field for length `n`. With `causal`, every row is
/// intersected with {j ≤ i}; random draws are taken from the causal range.
pub fn make_attention_field(pattern: &FieldPattern, n: usize, causal: bool) -> Result<AttentionField> {
    validate(pattern)?;
    let mut rows = raw_rows(pattern, n, causal);
    if causal {
        for (i, r) in rows.iter_mut().enumerate() {
            r.retain(|&j| j <= i);
        }
    }
    Ok(AttentionField::from_rows(rows))
}

fn raw_rows(pattern: &FieldPattern, n: usize, causal: bool) -> Vec<Vec<usize>> {
    let each = |f: &dyn Fn(usize, usize) -> bool| -> Vec<Vec<usize>> { (0..n).map(|i| (0..n).filter(|&j| f(i, j)).collect()).collect() };
    match pattern {
        FieldPattern::Window { size } => each(&|i, j| i.abs_diff(j) < *size),
        FieldPattern::Chunked { size } => each(&|i, j| i / size == j / size),
        FieldPattern::Strided { stride } => each(&|i, j| i.abs_diff(j) % stride == 0),
        FieldPattern::Dilated { window, dilation } => {
            each(&|i, j| i.abs_diff(j) % dilation == 0 && i.abs_diff(j) / dilation < *window)
        }
        FieldPattern::Global { positions } => each(&|i, j| positions.contains(&i) || positions.contains(&j)),
        FieldPattern::Random { k, seed } => (0..n)
            .map(|i| {
                let hi = if causal { i + 1 } else { n };
                let mut rng = Rng::new(seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
                (0..*k).map(|_| rng.below(hi)).collect()
            })
            .collect(),
        FieldPattern::Hybrid(parts) => {
            let mut rows = vec![Vec::new(); n];
            for p in parts {
                for (acc, r) in rows.iter_mut().zip(raw_rows(p, n, causal)) {
                    acc.extend(r);
                }
            }
            rows
        }
    }
}

/// Multiply-add tallies for the instrumented kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WorkCounter {
    pub madds: u64,
}

/// Softmax attention evaluated only on retained pairs, counting
/// multiply-adds (score dot products plus value accumulation).
pub fn field_attention_counted(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    field: &AttentionField,
    counter: &mut WorkCounter,
) -> Result<Tensor<f64>> {
    let (n, d, dv) = (q.rows(), q.cols(), v.cols());
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Tensor::zeros(n, dv);
    for i in 0..n {
        let keys = field.row(i);
        if keys.is_empty() {
            return Err(Error::DegenerateRow { row: i });
        }
        let mut s: Vec<f64> = Vec::with_capacity(keys.len());
        for &j in keys {
            s.push(q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale);
            counter.madds += d as u64;
        }
        let mx = s.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
        let o = out.row_mut(i);
        for (&j, &sj) in keys.iter().zip(&s) {
            let w = (sj - mx).exp() / z;
            for (oc, &vc) in o.iter_mut().zip(v.row(j)) {
                *oc += w * vc;
            }
            counter.madds += dv as u64;
        }
    }
    Ok(out)
}

/// Dense counterpart of [`field_attention_counted`] over all n² pairs.
pub fn dense_attention_counted(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    counter: &mut WorkCounter,
) -> Result<Tensor<f64>> {
    let n = q.rows();
    let full = AttentionField::from_rows((0..n).map(|_| (0..k.rows()).collect()).collect());
    field_attention_counted(q, k, v, &full, counter)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_window_is_causal() {
        let f = make_attention_field(&FieldPattern::Window { size: 6 }, 6, true).unwrap();
        for i in 0..6 {
            assert_eq!(f.row(i), (0..=i).collect::<Vec<_>>().as_slice());
        }
    }

    #[test]
    fn unit_chunks_are_diagonal() {
        let f = make_attention_field(&FieldPattern::Chunked { size: 1 }, 5, false).unwrap();
        for i in 0..5 {
            assert_eq!(f.row(i), &[i]);
        }
        assert!((f.sparsity() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn dilated_and_strided_rows() {
        let f = make_attention_field(&FieldPattern::Dilated { window: 3, dilation: 2 }, 10, true).unwrap();
        assert_eq!(f.row(9), &[5, 7, 9]);
        let s = make_attention_field(&FieldPattern::Strided { stride: 3 }, 10, true).unwrap();
        assert_eq!(s.row(7), &[1, 4, 7]);
    }

    #[test]
    fn random_rows_are_reproducible() {
        let p = FieldPattern::Random { k: 3, seed: 42 };
        assert_eq!(make_attention_field(&p, 20, true).unwrap(), make_attention_field(&p, 20, true).unwrap());
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(make_attention_field(&FieldPattern::Window { size: 0 }, 4, true).is_err());
        assert!(make_attention_field(&FieldPattern::Hybrid(vec![FieldPattern::Strided { stride: 0 }]), 4, true).is_err());
    }
}
