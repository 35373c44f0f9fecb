use super::field::AttentionField;
use crate::error::{shape_err, Result};
use crate::tensor::{Float, Tensor};

/// Distance penalty G(i, j) for local priors.
#[derive(Clone, Debug, PartialEq)]
pub enum PriorKind {
    /// |i − j|
    Abs,
    /// (i − j)² / (2σ_i²); one σ for every row, or one per query row.
    Gaussian(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PriorMode {
    /// Add −γ·G to the logits.
    Additive,
    /// (1−β)·Softmax(s) + β·Softmax(−γ·G).
    Mixture { beta: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalPrior {
    pub kind: PriorKind,
    pub gamma: f64,
    pub mode: PriorMode,
}

impl LocalPrior {
    pub fn penalty(&self, i: usize, j: usize) -> f64 {
        let diff = i as f64 - j as f64;
        match &self.kind {
            PriorKind::Abs => diff.abs(),
            PriorKind::Gaussian(sig) => {
                let s = if sig.len() == 1 { sig[0] } else { sig[i.min(sig.len() - 1)] };
                diff * diff / (2.0 * s * s)
            }
        }
    }
}

/// What each query may attend to. All position-dependent parts are in
/// absolute coordinates, so a decoding step at position p reads row p.
/// Components combine: causal, field, key padding and additive penalties
/// all add (0 or −∞ or a finite penalty) to the logits; a multiplicative
/// mask scales logits before the softmax.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskSpec {
    pub causal: bool,
    pub field: Option<AttentionField>,
    pub additive: Option<Tensor<f64>>,
    pub multiplicative: Option<Tensor<f64>>,
    pub key_pad: Option<Vec<bool>>,
    pub prior: Option<LocalPrior>,
}

/// Unmasked attention.
pub fn no_mask() -> MaskSpec {
    MaskSpec::default()
}

/// 0 on and below the diagonal, −∞ above it.
pub fn causal_mask(_n: usize) -> MaskSpec {
    MaskSpec {
        causal: true,
        ..Default::default()
    }
}

/// Penalty prior −γ·G folded into the mask.
pub fn local_prior(kind: PriorKind, gamma: f64, mode: PriorMode) -> MaskSpec {
    MaskSpec {
        prior: Some(LocalPrior { kind, gamma, mode }),
        ..Default::default()
    }
}

impl MaskSpec {
    pub fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn with_field(mut self, field: AttentionField) -> Self {
        self.field = Some(field);
        self
    }

    pub fn with_key_pad(mut self, pad: Vec<bool>) -> Self {
        self.key_pad = if pad.iter().any(|&p| p) { Some(pad) } else { None };
        self
    }

    pub fn with_prior(mut self, prior: LocalPrior) -> Self {
        self.prior = Some(prior);
        self
    }

    pub fn with_additive(mut self, m: Tensor<f64>) -> Self {
        self.additive = Some(m);
        self
    }

    pub fn with_multiplicative(mut self, m: Tensor<f64>) -> Self {
        self.multiplicative = Some(m);
        self
    }

    fn mixture(&self) -> Option<(&LocalPrior, f64)> {
        match &self.prior {
            Some(p) => match p.mode {
                PriorMode::Mixture { beta } => Some((p, beta)),
                PriorMode::Additive => None,
            },
            None => None,
        }
    }

    /// Additive logit offsets for queries q0..q0+nq against keys k0..k0+nk,
    /// or `None` when nothing applies. Mixture priors are excluded.
    pub fn additive_matrix<T: Float>(&self, q0: usize, nq: usize, k0: usize, nk: usize) -> Result<Option<Tensor<T>>> {
        let additive_prior = self.prior.as_ref().filter(|p| p.mode == PriorMode::Additive);
        if !self.causal && self.field.is_none() && self.additive.is_none() && self.key_pad.is_none() && additive_prior.is_none() {
            return Ok(None);
        }
        if let Some(a) = &self.additive {
            if a.rows() < q0 + nq || a.cols() < k0 + nk {
                return shape_err("mask", format!("additive mask {:?} too small for {}x{}", a.shape(), q0 + nq, k0 + nk));
            }
        }
        let ninf = f64::NEG_INFINITY;
        let mut out = Tensor::<T>::zeros(nq, nk);
        for r in 0..nq {
            let i = q0 + r;
            let allowed = self.field.as_ref().map(|f| f.row(i));
            for c in 0..nk {
                let j = k0 + c;
                let mut v = 0.0;
                if self.causal && j > i {
                    v = ninf;
                }
                if let Some(a) = allowed {
                    if a.binary_search(&j).is_err() {
                        v = ninf;
                    }
                }
                if let Some(p) = &self.key_pad {
                    if p.get(j).copied().unwrap_or(false) {
                        v = ninf;
                    }
                }
                if v == 0.0 {
                    if let Some(a) = &self.additive {
                        v += a.at(i, j);
                    }
                    if let Some(p) = additive_prior {
                        v -= p.gamma * p.penalty(i, j);
                    }
                }
                out.set(r, c, T::of(v));
            }
        }
        Ok(Some(out))
    }

    pub fn multiplicative_matrix<T: Float>(&self, q0: usize, nq: usize, k0: usize, nk: usize) -> Result<Option<Tensor<T>>> {
        match &self.multiplicative {
            None => Ok(None),
            Some(m) => {
                if m.rows() < q0 + nq || m.cols() < k0 + nk {
                    return shape_err("mask", "multiplicative mask too small");
                }
                Ok(Some(Tensor::from_fn(nq, nk, |r, c| T::of(m.at(q0 + r, k0 + c)))))
            }
        }
    }

    /// Mixture weight β and the prior logits −γ·G, when in mixture mode.
    pub fn mixture_logits<T: Float>(&self, q0: usize, nq: usize, k0: usize, nk: usize) -> Option<(f64, Tensor<T>)> {
        let (p, beta) = self.mixture()?;
        let t = Tensor::from_fn(nq, nk, |r, c| T::of(-p.gamma * p.penalty(q0 + r, k0 + c)));
        Some((beta, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_matrix_shape() {
        let m = causal_mask(4).additive_matrix::<f64>(0, 4, 0, 4).unwrap().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if j > i { f64::NEG_INFINITY } else { 0.0 };
                assert_eq!(m.at(i, j), want);
            }
            assert_eq!(m.row(i).iter().filter(|&&x| x == 0.0).count(), i + 1);
        }
        let one = causal_mask(1).additive_matrix::<f64>(0, 1, 0, 1).unwrap().unwrap();
        assert_eq!(one.data(), &[0.0]);
    }

    #[test]
    fn offset_rows_read_absolute_positions() {
        let m = causal_mask(8).additive_matrix::<f64>(3, 1, 0, 5).unwrap().unwrap();
        assert_eq!(m.row(0)[..4], [0.0; 4]);
        assert_eq!(m.at(0, 4), f64::NEG_INFINITY);
    }

    #[test]
    fn penalties_vanish_on_diagonal() {
        for kind in [PriorKind::Abs, PriorKind::Gaussian(vec![0.7])] {
            let p = LocalPrior { kind, gamma: 1.0, mode: PriorMode::Additive };
            for i in 0..5 {
                assert_eq!(p.penalty(i, i), 0.0);
            }
        }
    }
}
