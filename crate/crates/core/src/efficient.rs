//! Linear-cost attention approximations: kernelized attention with
//! streaming accumulators, low-rank reductions along length and width, and
//! pooled memory compression.

use std::collections::VecDeque;

use crate::attention::{AttentionParams, MaskSpec, WorkCounter};
use crate::ctx::Ctx;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Float, ParamId, Tape, Tensor, Var};

/// Nonnegative feature map φ applied elementwise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FeatureMap {
    /// elu(x) + 1, strictly positive.
    #[default]
    EluPlusOne,
    Relu,
    /// max(x, 0): identity on the positive part.
    PositiveClip,
}

impl FeatureMap {
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            FeatureMap::EluPlusOne => {
                if x > 0.0 {
                    x + 1.0
                } else {
                    x.exp()
                }
            }
            FeatureMap::Relu | FeatureMap::PositiveClip => x.max(0.0),
        }
    }

    pub fn apply<T: Float>(self, tape: &Tape<T>, x: Var) -> Var {
        match self {
            FeatureMap::EluPlusOne => tape.elu_plus_one(x),
            FeatureMap::Relu | FeatureMap::PositiveClip => tape.relu(x),
        }
    }

    pub fn apply_row<T: Float>(self, x: &[T]) -> Vec<T> {
        x.iter().map(|v| T::of(self.apply_scalar(v.as_f64()))).collect()
    }
}

/// D⁻¹·(φ(Q)(φ(K)ᵀV)); the causal form uses prefix accumulators so row i
/// only sees keys j ≤ i.
pub fn kernelized_attention<T: Float>(tape: &Tape<T>, q: Var, k: Var, v: Var, phi: FeatureMap, causal: bool) -> Result<Var> {
    let qf = phi.apply(tape, q);
    let kf = phi.apply(tape, k);
    tape.linear_attention(qf, kf, v, causal)
}

/// Causal kernelized attention in 64-bit with a multiply-add tally:
/// n·(2·d'·d_v + 2·d') for the accumulator updates and readouts.
pub fn kernelized_attention_counted(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    phi: FeatureMap,
    counter: &mut WorkCounter,
) -> Result<Tensor<f64>> {
    let mut st = StreamState::new(q.cols(), v.cols());
    let mut out = Tensor::zeros(q.rows(), v.cols());
    for i in 0..q.rows() {
        let o = st.step_counted(k.row(i), v.row(i), q.row(i), phi, Some(counter))?;
        out.row_mut(i).copy_from_slice(&o);
    }
    Ok(out)
}

/// Streaming accumulators μ = Σ φ(k)ᵀv (d'×d) and ν = Σ φ(k) (d').
/// With a gate a, μ ← a·μ + (1−a)·φ(k)ᵀv and likewise for ν.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState<T = f64> {
    pub d_feat: usize,
    pub d_v: usize,
    pub mu: Vec<T>,
    pub nu: Vec<T>,
    pub gate: Option<f64>,
}

impl<T: Float> StreamState<T> {
    pub fn new(d_feat: usize, d_v: usize) -> Self {
        StreamState {
            d_feat,
            d_v,
            mu: vec![T::zero(); d_feat * d_v],
            nu: vec![T::zero(); d_feat],
            gate: None,
        }
    }

    pub fn with_gate(mut self, a: f64) -> Self {
        self.gate = Some(a);
        self
    }

    /// Absorbs (k_j, v_j) and returns the output for q_j.
    pub fn step(&mut self, k: &[T], v: &[T], q: &[T], phi: FeatureMap) -> Result<Vec<T>> {
        self.step_counted(k, v, q, phi, None)
    }

    fn step_counted(&mut self, k: &[T], v: &[T], q: &[T], phi: FeatureMap, counter: Option<&mut WorkCounter>) -> Result<Vec<T>> {
        let (dp, dv) = (self.d_feat, self.d_v);
        if k.len() != dp || q.len() != dp || v.len() != dv {
            return shape_err("stream_step", format!("k {} q {} v {} vs state {dp}x{dv}", k.len(), q.len(), v.len()));
        }
        let kf = phi.apply_row(k);
        let qf = phi.apply_row(q);
        let (keep, add) = match self.gate {
            Some(a) => (T::of(a), T::of(1.0 - a)),
            None => (T::one(), T::one()),
        };
        for a in 0..dp {
            let ka = add * kf[a];
            let row = &mut self.mu[a * dv..(a + 1) * dv];
            for (m, &vb) in row.iter_mut().zip(v) {
                *m = keep * *m + ka * vb;
            }
            self.nu[a] = keep * self.nu[a] + ka;
        }
        let den: T = qf.iter().zip(&self.nu).map(|(&x, &y)| x * y).sum();
        if !(den > T::zero()) {
            return Err(Error::DegenerateQuery { row: 0 });
        }
        let mut out = vec![T::zero(); dv];
        for a in 0..dp {
            let qa = qf[a];
            for (o, &m) in out.iter_mut().zip(&self.mu[a * dv..(a + 1) * dv]) {
                *o += qa * m;
            }
        }
        for o in &mut out {
            *o /= den;
        }
        if let Some(c) = counter {
            c.madds += (2 * dp * dv + 2 * dp) as u64;
        }
        Ok(out)
    }
}

/// Length reduction of keys and values to n' rows.
#[derive(Clone, Debug, PartialEq)]
pub enum LengthReduction {
    /// K' = U^k·K, V' = U^v·V with learnable n'×n_max maps; only the
    /// first n columns are used for a length-n input.
    Linear { uk: ParamId, uv: ParamId },
    /// Strided mean over windows of `size` rows.
    StridedMean { size: usize, stride: usize },
}

/// Averaging matrix whose row t is the mean over rows t·stride..t·stride+size.
pub fn strided_mean_matrix<T: Float>(n: usize, size: usize, stride: usize) -> Result<Tensor<T>> {
    if size == 0 || stride == 0 || size > n {
        return Err(Error::Config(format!("strided mean with size {size}, stride {stride} over {n} rows")));
    }
    let out_rows = (n - size) / stride + 1;
    let w = T::one() / T::of_usize(size);
    Ok(Tensor::from_fn(out_rows, n, |t, j| if j >= t * stride && j < t * stride + size { w } else { T::zero() }))
}

/// Reduces K and V along the sequence. Mixing across positions would leak
/// future tokens, so causal use is rejected.
pub fn reduce_length<T: Float>(ctx: &Ctx<T>, k: Var, v: Var, proj: &LengthReduction, causal: bool) -> Result<(Var, Var)> {
    if causal {
        return Err(Error::Config("length reduction cannot be combined with causal attention".into()));
    }
    let tape = ctx.tape;
    let n = tape.shape(k).0;
    match proj {
        LengthReduction::Linear { uk, uv } => {
            let take = |id: ParamId| -> Result<Var> {
                let u = ctx.p(id);
                let cols = tape.shape(u).1;
                if n > cols {
                    return shape_err("reduce_length", format!("sequence {n} longer than projection {cols}"));
                }
                if n == cols {
                    Ok(u)
                } else {
                    tape.slice_cols(u, 0, n)
                }
            };
            let (pk, pv) = (take(*uk)?, take(*uv)?);
            Ok((tape.matmul(pk, k)?, tape.matmul(pv, v)?))
        }
        LengthReduction::StridedMean { size, stride } => {
            let m = tape.constant(strided_mean_matrix(n, *size, *stride)?);
            Ok((tape.matmul(m, k)?, tape.matmul(m, v)?))
        }
    }
}

/// Width reduction Q' = Q·U^q, K' = K·U^k.
#[derive(Clone, Debug, PartialEq)]
pub struct WidthReduction {
    pub uq: ParamId,
    pub uk: ParamId,
    /// Scale logits by 1/√d' instead of 1/√d.
    pub scale_reduced: bool,
}

pub fn reduce_width<T: Float>(ctx: &Ctx<T>, q: Var, k: Var, proj: &WidthReduction) -> Result<(Var, Var)> {
    let tape = ctx.tape;
    Ok((tape.matmul(q, ctx.p(proj.uq))?, tape.matmul(k, ctx.p(proj.uk))?))
}

/// Q'K'ᵀ divided by √d (the pre-reduction width) or √d' when requested.
pub fn reduced_logits<T: Float>(ctx: &Ctx<T>, q: Var, k: Var, proj: &WidthReduction) -> Result<Var> {
    let tape = ctx.tape;
    let d = tape.shape(q).1;
    let (qr, kr) = reduce_width(ctx, q, k, proj)?;
    let width = if proj.scale_reduced { tape.shape(qr).1 } else { d };
    let raw = tape.matmul_nt(qr, kr)?;
    Ok(tape.scale(raw, T::one() / T::of_usize(width).sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub enum CompressionRule {
    Average,
    /// m_t = m_{t−1} + λ_t·(x_t − m_{t−1}), λ_t = w_t / Σ_{s≤t} w_s.
    /// `None` means uniform weights.
    RecursiveWeighted(Option<Vec<f64>>),
}

/// One (k̄, v̄) summary of a chunk.
pub fn compress_memory<T: Float>(keys: &Tensor<T>, values: &Tensor<T>, rule: &CompressionRule) -> Result<(Vec<T>, Vec<T>)> {
    let n = keys.rows();
    if n == 0 || values.rows() != n {
        return Err(Error::Contract(format!("memory chunk needs matching nonempty keys/values, got {n}/{}", values.rows())));
    }
    match rule {
        CompressionRule::Average => {
            let mean = |t: &Tensor<T>| -> Vec<T> {
                let mut m = vec![T::zero(); t.cols()];
                for i in 0..n {
                    for (a, &b) in m.iter_mut().zip(t.row(i)) {
                        *a += b;
                    }
                }
                m.iter().map(|&x| x / T::of_usize(n)).collect()
            };
            Ok((mean(keys), mean(values)))
        }
        CompressionRule::RecursiveWeighted(w) => {
            if let Some(w) = w {
                if w.len() != n {
                    return Err(Error::Config(format!("{} weights for a chunk of {n}", w.len())));
                }
            }
            let run = |t: &Tensor<T>| -> Vec<T> {
                let mut m = vec![T::zero(); t.cols()];
                let mut total = 0.0;
                for i in 0..n {
                    let wi = w.as_ref().map_or(1.0, |w| w[i]);
                    total += wi;
                    if total == 0.0 {
                        continue;
                    }
                    let lam = T::of(wi / total);
                    for (a, &b) in m.iter_mut().zip(t.row(i)) {
                        *a += lam * (b - *a);
                    }
                }
                m
            };
            Ok((run(keys), run(values)))
        }
    }
}

/// At most κ slots, each summarizing `chunk` consecutive positions; the
/// oldest slot is evicted when full.
#[derive(Clone, Debug)]
pub struct CompressedMemory<T = f64> {
    pub capacity: usize,
    pub chunk: usize,
    pub rule: CompressionRule,
    slots: VecDeque<(Vec<T>, Vec<T>)>,
}

impl<T: Float> CompressedMemory<T> {
    pub fn new(capacity: usize, chunk: usize, rule: CompressionRule) -> Self {
        CompressedMemory {
            capacity,
            chunk,
            rule,
            slots: VecDeque::new(),
        }
    }

    pub fn push_chunk(&mut self, keys: &Tensor<T>, values: &Tensor<T>) -> Result<()> {
        let slot = compress_memory(keys, values, &self.rule)?;
        if self.slots.len() == self.capacity {
            self.slots.pop_front();
        }
        self.slots.push_back(slot);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Longest history the memory can summarize: κ·n_c positions.
    pub fn span(&self) -> usize {
        self.capacity * self.chunk
    }

    /// Slot keys and values as κ'×d matrices.
    pub fn matrices(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let (dk, dv) = self.slots.front().map_or((0, 0), |(k, v)| (k.len(), v.len()));
        let ks = self.slots.iter().flat_map(|(k, _)| k.iter().copied()).collect();
        let vs = self.slots.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        Ok((Tensor::matrix(self.len(), dk, ks)?, Tensor::matrix(self.len(), dv, vs)?))
    }
}

fn heads_of<T: Float>(tape: &Tape<T>, p: &AttentionParams, q: Var, k: Var, v: Var, h: usize) -> Result<(Var, Var, Var)> {
    let dh = p.d_head;
    let split = |x: Var| if p.heads == 1 { Ok(x) } else { tape.slice_cols(x, h * dh, dh) };
    let qh = split(q)?;
    if p.multi_query {
        Ok((qh, k, v))
    } else {
        Ok((qh, split(k)?, split(v)?))
    }
}

fn keep_column<T: Float>(tape: &Tape<T>, keep: &[bool]) -> Var {
    tape.constant(Tensor::from_fn(keep.len(), 1, |i, _| if keep[i] { T::one() } else { T::zero() }))
}

/// Multi-head kernelized attention over projected Q, K, V followed by the
/// output map. Keys flagged false in `key_keep` get a zero feature row.
/// With `causal`, the last query is aligned with the last key; when there
/// are more keys than queries (cached history) each query sees the history
/// plus its own prefix.
pub fn linear_attend_projected<T: Float>(
    ctx: &Ctx<T>,
    p: &AttentionParams,
    q: Var,
    k: Var,
    v: Var,
    phi: FeatureMap,
    causal: bool,
    key_keep: Option<&[bool]>,
) -> Result<Var> {
    let tape = ctx.tape;
    let (nq, nk) = (tape.shape(q).0, tape.shape(k).0);
    if causal && nk < nq {
        return shape_err("linear attention", format!("{nq} causal queries over {nk} keys"));
    }
    let keep = key_keep.map(|kk| keep_column(tape, kk));
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = heads_of(tape, p, q, k, v, h)?;
        let qf = phi.apply(tape, qh);
        let mut kf = phi.apply(tape, kh);
        if let Some(c) = keep {
            kf = tape.mul_col(kf, c)?;
        }
        let oh = if !causal || nq == 1 && nk >= 1 {
            tape.linear_attention(qf, kf, vh, false)?
        } else if nq == nk {
            tape.linear_attention(qf, kf, vh, true)?
        } else {
            let off = nk - nq;
            let mut rows = Vec::with_capacity(nq);
            for i in 0..nq {
                let qi = tape.slice_rows(qf, i, 1)?;
                let ki = tape.slice_rows(kf, 0, off + i + 1)?;
                let vi = tape.slice_rows(vh, 0, off + i + 1)?;
                rows.push(tape.linear_attention(qi, ki, vi, false)?);
            }
            tape.concat_rows(&rows)?
        };
        heads.push(oh);
    }
    ctx.linear(tape.concat_cols(&heads)?, p.wc)
}

/// Multi-head attention against length-reduced keys and values. Keys
/// flagged false in `key_keep` are zeroed before the reduction.
pub fn length_attend_projected<T: Float>(
    ctx: &Ctx<T>,
    p: &AttentionParams,
    q: Var,
    k: Var,
    v: Var,
    proj: &LengthReduction,
    key_keep: Option<&[bool]>,
) -> Result<Var> {
    let tape = ctx.tape;
    let (k, v) = match key_keep {
        Some(kk) => {
            let c = keep_column(tape, kk);
            (tape.mul_col(k, c)?, tape.mul_col(v, c)?)
        }
        None => (k, v),
    };
    let (kr, vr) = reduce_length(ctx, k, v, proj, false)?;
    Ok(crate::attention::attend_projected(ctx, p, q, kr, vr, &MaskSpec::default(), 0, 0, None)?.out)
}

/// Multi-head attention whose logits come from width-reduced queries and
/// keys (one U^q, U^k pair of shape d_head×d' shared by the heads).
#[allow(clippy::too_many_arguments)]
pub fn width_attend_projected<T: Float>(
    ctx: &Ctx<T>,
    p: &AttentionParams,
    q: Var,
    k: Var,
    v: Var,
    proj: &WidthReduction,
    mask: &MaskSpec,
    q0: usize,
    k0: usize,
) -> Result<Var> {
    let tape = ctx.tape;
    let (nq, nk) = (tape.shape(q).0, tape.shape(k).0);
    let additive = mask.additive_matrix::<T>(q0, nq, k0, nk)?;
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = heads_of(tape, p, q, k, v, h)?;
        let logits = reduced_logits(ctx, qh, kh, proj)?;
        let w = tape.softmax_rows(logits, additive.as_ref())?;
        heads.push(tape.matmul(w, vh)?);
    }
    ctx.linear(tape.concat_cols(&heads)?, p.wc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Rng};

    #[test]
    fn single_pair_returns_value() {
        for phi in [FeatureMap::EluPlusOne, FeatureMap::Relu] {
            let t = Tape::<f64>::inference();
            let q = t.constant(Tensor::from_rows(&[&[0.5, 1.0]]).unwrap());
            let k = t.constant(Tensor::from_rows(&[&[1.0, 0.3]]).unwrap());
            let v = t.constant(Tensor::from_rows(&[&[4.0, -2.0, 1.0]]).unwrap());
            let o = kernelized_attention(&t, q, k, v, phi, true).unwrap();
            for (a, b) in t.value(o).data().iter().zip([4.0, -2.0, 1.0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_denominator_is_reported() {
        let t = Tape::<f64>::inference();
        let q = t.constant(Tensor::from_rows(&[&[-1.0, -1.0]]).unwrap());
        let k = t.constant(Tensor::from_rows(&[&[1.0, 1.0]]).unwrap());
        let v = t.constant(Tensor::from_rows(&[&[1.0]]).unwrap());
        assert!(matches!(kernelized_attention(&t, q, k, v, FeatureMap::Relu, false), Err(Error::DegenerateQuery { .. })));
    }

    #[test]
    fn gate_zero_is_memoryless() {
        let mut st = StreamState::<f64>::new(2, 2).with_gate(0.0);
        let mut rng = Rng::new(0);
        for _ in 0..5 {
            let k: Vec<f64> = (0..2).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let q: Vec<f64> = (0..2).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let v: Vec<f64> = (0..2).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let o = st.step(&k, &v, &q, FeatureMap::EluPlusOne).unwrap();
            for (a, b) in o.iter().zip(&v) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_one_freezes_state() {
        let mut st = StreamState::<f64>::new(2, 2);
        st.step(&[0.1, 0.2], &[1.0, 2.0], &[0.0, 0.0], FeatureMap::EluPlusOne).unwrap();
        st.step(&[0.4, -0.2], &[-1.0, 0.5], &[0.0, 0.0], FeatureMap::EluPlusOne).unwrap();
        let mut frozen = st.clone().with_gate(1.0);
        let before = frozen.clone();
        let a = frozen.step(&[9.0, 9.0], &[100.0, 100.0], &[0.3, 0.1], FeatureMap::EluPlusOne).unwrap();
        let b = frozen.step(&[-5.0, 3.0], &[-7.0, 8.0], &[0.3, 0.1], FeatureMap::EluPlusOne).unwrap();
        assert_eq!(a, b);
        assert_eq!(frozen.mu, before.mu);
    }

    #[test]
    fn identity_length_projection_is_vanilla() {
        let mut store = ParamStore::<f64>::new();
        let uk = store.add("uk", Tensor::eye(4));
        let uv = store.add("uv", Tensor::eye(4));
        let t = Tape::inference();
        let ctx = Ctx::new(&t, &store);
        let mut rng = Rng::new(1);
        let k = t.constant(Tensor::uniform(4, 3, -1.0, 1.0, &mut rng));
        let v = t.constant(Tensor::uniform(4, 3, -1.0, 1.0, &mut rng));
        let (k2, v2) = reduce_length(&ctx, k, v, &LengthReduction::Linear { uk, uv }, false).unwrap();
        assert_eq!(t.value(k2), t.value(k));
        assert_eq!(t.value(v2), t.value(v));
        assert!(reduce_length(&ctx, k, v, &LengthReduction::StridedMean { size: 2, stride: 2 }, true).is_err());
    }

    #[test]
    fn identical_chunk_compresses_to_itself() {
        let k = Tensor::<f64>::from_fn(5, 3, |_, j| j as f64 - 1.0);
        for rule in [CompressionRule::Average, CompressionRule::RecursiveWeighted(None)] {
            let (mk, mv) = compress_memory(&k, &k, &rule).unwrap();
            for (j, (a, b)) in mk.iter().zip(&mv).enumerate() {
                assert!((a - (j as f64 - 1.0)).abs() < 1e-12 && (b - (j as f64 - 1.0)).abs() < 1e-12);
            }
        }
        let empty = Tensor::<f64>::zeros(0, 3);
        assert!(matches!(compress_memory(&empty, &empty, &CompressionRule::Average), Err(Error::Contract(_))));
    }

    #[test]
    fn memory_span_and_eviction() {
        let mut m = CompressedMemory::<f64>::new(3, 4, CompressionRule::Average);
        assert_eq!(m.span(), 12);
        for c in 0..5 {
            let k = Tensor::full(4, 2, c as f64);
            m.push_chunk(&k, &k).unwrap();
        }
        assert_eq!(m.len(), 3);
        let (k, _) = m.matrices().unwrap();
        assert_eq!(k.at(0, 0), 2.0);
    }
}
