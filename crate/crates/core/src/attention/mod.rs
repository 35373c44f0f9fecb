//! Softmax attention: scaled dot-product core, multi-head self and cross
//! attention, masks and sparse fields, local priors, relative positions,
//! multi-query attention and cached incremental decoding.

mod cache;
mod field;
mod mask;

pub use cache::KVCache;
pub use field::{dense_attention_counted, field_attention_counted, make_attention_field, AttentionField, FieldPattern, WorkCounter};
pub use mask::{causal_mask, local_prior, no_mask, LocalPrior, MaskSpec, PriorKind, PriorMode};

use crate::ctx::Ctx;
use crate::embedding::{RprRole, RprTable};
use crate::error::{Error, Result};
use crate::tensor::{xavier_init, Float, HasParams, InitDist, ParamId, ParamStore, Rng, Tape, Var};

/// Projections of one attention sub-layer. The per-head maps W^q_h are the
/// column blocks of `wq` (and likewise for keys and values); in multi-query
/// mode `wk`/`wv` are a single d×d_head pair shared by every head.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub d: usize,
    pub heads: usize,
    pub d_head: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wc: ParamId,
    pub multi_query: bool,
    pub rpr: Option<RprTable>,
}

/// Construction options for [`AttentionParams`].
#[derive(Clone, Debug, Default)]
pub struct AttentionOptions {
    pub multi_query: bool,
    /// Clip radius and enabled roles for relative positions.
    pub rpr: Option<(usize, Vec<RprRole>)>,
    pub gain: Option<f64>,
}

impl AttentionParams {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        opts: &AttentionOptions,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("head count {heads} must divide width {d}")));
        }
        let d_head = d / heads;
        let kv = if opts.multi_query { d_head } else { d };
        let gain = opts.gain.unwrap_or(1.0);
        let mut w = |tag: &str, cols: usize| store.add(format!("{name}.{tag}"), xavier_init(d, cols, gain, InitDist::Uniform, rng));
        let wq = w("wq", d);
        let wk = w("wk", kv);
        let wv = w("wv", kv);
        let wc = w("wc", d);
        let rpr = opts
            .rpr
            .as_ref()
            .map(|(k, roles)| RprTable::new(store, &format!("{name}.rpr"), *k, d_head, roles, rng));
        Ok(AttentionParams {
            d,
            heads,
            d_head,
            wq,
            wk,
            wv,
            wc,
            multi_query: opts.multi_query,
            rpr,
        })
    }

    /// Width of each cached key/value row.
    pub fn kv_width(&self) -> usize {
        if self.multi_query {
            self.d_head
        } else {
            self.d
        }
    }
}

impl HasParams for AttentionParams {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        for id in [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wc] {
            f(id);
        }
        self.rpr.visit_params(f);
    }
}

/// Attention output and the per-head weight matrices that produced it.
pub struct AttnOut {
    pub out: Var,
    pub maps: Vec<Var>,
}

/// Softmax(QKᵀ/√d_h + M)·V for a single head, with M from `mask`
/// (queries and keys both start at position 0).
pub fn qkv_attention<T: Float>(tape: &Tape<T>, q: Var, k: Var, v: Var, mask: &MaskSpec) -> Result<Var> {
    let (nq, dh) = tape.shape(q);
    let nk = tape.shape(k).0;
    let w = attention_weights(tape, q, k, None, mask, 0, 0, nq, nk, dh)?;
    tape.matmul(w, v)
}

/// Attention weight matrix for one head.
#[allow(clippy::too_many_arguments)]
fn attention_weights<T: Float>(
    tape: &Tape<T>,
    q: Var,
    k: Var,
    rpr: Option<(&Ctx<T>, &RprTable)>,
    mask: &MaskSpec,
    q0: usize,
    k0: usize,
    nq: usize,
    nk: usize,
    dh: usize,
) -> Result<Var> {
    let scale = T::one() / T::of_usize(dh).sqrt();
    let raw = match rpr {
        Some((ctx, table)) if table.q.is_some() || table.key.is_some() => rpr_logits(ctx, table, q, k, q0, k0)?,
        _ => tape.matmul_nt(q, k)?,
    };
    let mut logits = tape.scale(raw, scale);
    if let Some(m) = mask.multiplicative_matrix::<T>(q0, nq, k0, nk)? {
        let m = tape.constant(m);
        logits = tape.mul(logits, m)?;
    }
    let additive = mask.additive_matrix::<T>(q0, nq, k0, nk)?;
    let probs = tape.softmax_rows(logits, additive.as_ref())?;
    match mask.mixture_logits::<T>(q0, nq, k0, nk) {
        None => Ok(probs),
        Some((beta, prior)) => {
            let prior = crate::tensor::softmax_rows(&prior, additive.as_ref())?;
            let prior = tape.constant(prior.scale(T::of(beta)));
            let kept = tape.scale(probs, T::of(1.0 - beta));
            tape.add(kept, prior)
        }
    }
}

/// (q_i + a^q_ij)·(k_j + a^k_ij) for every pair, where a^·_ij is the
/// relative-position row for offset j − i.
fn rpr_logits<T: Float>(ctx: &Ctx<T>, table: &RprTable, q: Var, k: Var, q0: usize, k0: usize) -> Result<Var> {
    let tape = ctx.tape;
    let (nq, nk) = (tape.shape(q).0, tape.shape(k).0);
    let mut qi = Vec::with_capacity(nq * nk);
    let mut kj = Vec::with_capacity(nq * nk);
    let mut buckets = Vec::with_capacity(nq * nk);
    for i in 0..nq {
        for j in 0..nk {
            qi.push(i);
            kj.push(j);
            buckets.push(table.bucket(q0 + i, k0 + j));
        }
    }
    let mut qr = tape.gather_rows(q, &qi)?;
    let mut kr = tape.gather_rows(k, &kj)?;
    if let Some(id) = table.q {
        let a = tape.gather_rows(ctx.p(id), &buckets)?;
        qr = tape.add(qr, a)?;
    }
    if let Some(id) = table.key {
        let a = tape.gather_rows(ctx.p(id), &buckets)?;
        kr = tape.add(kr, a)?;
    }
    let prod = tape.mul(qr, kr)?;
    let flat = tape.row_sum(prod);
    tape.reshape(flat, nq, nk)
}

/// Σ_j α_ij · a^v_ij, the value-side relative-position term.
fn rpr_values<T: Float>(ctx: &Ctx<T>, table: &RprTable, id: ParamId, weights: Var, q0: usize, k0: usize) -> Result<Var> {
    let tape = ctx.tape;
    let (nq, nk) = tape.shape(weights);
    let buckets: Vec<usize> = (0..nq).flat_map(|i| (0..nk).map(move |j| (i, j))).map(|(i, j)| table.bucket(q0 + i, k0 + j)).collect();
    let a = tape.gather_rows(ctx.p(id), &buckets)?;
    let w = tape.reshape(weights, nq * nk, 1)?;
    let weighted = tape.mul_col(a, w)?;
    tape.segment_sum_rows(weighted, nk)
}

/// Multi-head attention over already-projected queries (nq×d) and keys and
/// values (nk × kv_width). Query i sits at absolute position q0 + i and key
/// j at k0 + j. With `reuse`, the given per-head maps replace the softmax.
#[allow(clippy::too_many_arguments)]
pub fn attend_projected<T: Float>(
    ctx: &Ctx<T>,
    p: &AttentionParams,
    q: Var,
    k: Var,
    v: Var,
    mask: &MaskSpec,
    q0: usize,
    k0: usize,
    reuse: Option<&[Var]>,
) -> Result<AttnOut> {
    let tape = ctx.tape;
    let (nq, nk) = (tape.shape(q).0, tape.shape(k).0);
    let dh = p.d_head;
    let mut heads = Vec::with_capacity(p.heads);
    let mut maps = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let split = |x: Var| if p.heads == 1 { Ok(x) } else { tape.slice_cols(x, h * dh, dh) };
        let qh = split(q)?;
        let (kh, vh) = if p.multi_query { (k, v) } else { (split(k)?, split(v)?) };
        let w = match reuse {
            Some(m) => m[h],
            None => attention_weights(tape, qh, kh, p.rpr.as_ref().map(|t| (ctx, t)), mask, q0, k0, nq, nk, dh)?,
        };
        let mut oh = tape.matmul(w, vh)?;
        if let Some(t) = &p.rpr {
            if let Some(id) = t.v {
                let extra = rpr_values(ctx, t, id, w, q0, k0)?;
                oh = tape.add(oh, extra)?;
            }
        }
        heads.push(oh);
        maps.push(w);
    }
    let merged = tape.concat_cols(&heads)?;
    Ok(AttnOut {
        out: ctx.linear(merged, p.wc)?,
        maps,
    })
}

/// Self-attention of H (m×d) with the given mask, positions starting at 0.
pub fn multi_head_self<T: Float>(ctx: &Ctx<T>, h: Var, p: &AttentionParams, mask: &MaskSpec) -> Result<Var> {
    Ok(self_attention(ctx, h, p, mask, 0, None)?.out)
}

/// Self-attention with an explicit start position and optional map reuse.
pub fn self_attention<T: Float>(
    ctx: &Ctx<T>,
    h: Var,
    p: &AttentionParams,
    mask: &MaskSpec,
    pos0: usize,
    reuse: Option<&[Var]>,
) -> Result<AttnOut> {
    let q = ctx.linear(h, p.wq)?;
    // Reused maps make the keys dead; q stands in to keep the row count.
    let (k, v) = if reuse.is_some() && p.rpr.is_none() {
        (q, ctx.linear(h, p.wv)?)
    } else {
        (ctx.linear(h, p.wk)?, ctx.linear(h, p.wv)?)
    };
    attend_projected(ctx, p, q, k, v, mask, pos0, pos0, reuse)
}

/// Self-attention requiring relative-position tables.
pub fn rpr_attention<T: Float>(ctx: &Ctx<T>, h: Var, p: &AttentionParams, mask: &MaskSpec, pos0: usize) -> Result<Var> {
    if p.rpr.is_none() {
        return Err(Error::Config("relative-position attention needs an RPR table".into()));
    }
    Ok(self_attention(ctx, h, p, mask, pos0, None)?.out)
}

/// Self-attention with one key/value projection shared by all heads.
pub fn multi_query_attention<T: Float>(ctx: &Ctx<T>, h: Var, p: &AttentionParams, mask: &MaskSpec) -> Result<Var> {
    if !p.multi_query {
        return Err(Error::Config("parameters were not built for multi-query attention".into()));
    }
    multi_head_self(ctx, h, p, mask)
}

/// Projected encoder keys/values for cross-attention, computed once per
/// source sequence.
#[derive(Clone, Copy, Debug)]
pub struct CrossMemory {
    pub k: Var,
    pub v: Var,
    pub len: usize,
}

pub fn cross_memory<T: Float>(ctx: &Ctx<T>, h_enc: Var, p: &AttentionParams) -> Result<CrossMemory> {
    let len = ctx.tape.shape(h_enc).0;
    if len == 0 {
        return Err(Error::EmptySource);
    }
    Ok(CrossMemory {
        k: ctx.linear(h_enc, p.wk)?,
        v: ctx.linear(h_enc, p.wv)?,
        len,
    })
}

/// Queries from the decoder states, keys and values from the encoder
/// output; no causal mask. `src_pad` marks padded source positions.
pub fn cross_attention<T: Float>(ctx: &Ctx<T>, h_enc: Var, s_self: Var, p: &AttentionParams, src_pad: Option<&[bool]>) -> Result<Var> {
    let mem = cross_memory(ctx, h_enc, p)?;
    cross_attend(ctx, &mem, s_self, p, src_pad)
}

pub fn cross_attend<T: Float>(ctx: &Ctx<T>, mem: &CrossMemory, s_self: Var, p: &AttentionParams, src_pad: Option<&[bool]>) -> Result<Var> {
    let mask = match src_pad {
        Some(pad) => no_mask().with_key_pad(pad.to_vec()),
        None => no_mask(),
    };
    let q = ctx.linear(s_self, p.wq)?;
    Ok(attend_projected(ctx, p, q, mem.k, mem.v, &mask, 0, 0, None)?.out)
}

/// One decoding step at cache site `site`: projects the new row, appends
/// its key/value to the cache, and attends against the whole history.
pub fn attend_step_cached<T: Float>(
    ctx: &Ctx<T>,
    x: Var,
    cache: &mut KVCache<T>,
    p: &AttentionParams,
    site: usize,
    mask: &MaskSpec,
    reuse: Option<&[Var]>,
) -> Result<AttnOut> {
    let pos = cache.len(site)?;
    let q = ctx.linear(x, p.wq)?;
    let k = ctx.linear(x, p.wk)?;
    let v = ctx.linear(x, p.wv)?;
    cache.append(site, ctx.tape.value(k).data(), ctx.tape.value(v).data())?;
    let keys = ctx.tape.constant(cache.keys(site)?);
    let values = ctx.tape.constant(cache.values(site)?);
    attend_projected(ctx, p, q, keys, values, mask, pos, 0, reuse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Tensor};

    #[test]
    fn worked_masked_softmax() {
        let logits = Tensor::<f64>::from_rows(&[&[2., 0.1, 1., 1.], &[0., 0.9, 0.9, 0.9], &[0.2, 0.8, 0.7, 2.], &[0.3, 1., 0.3, 3.]]).unwrap();
        let m = causal_mask(4).additive_matrix::<f64>(0, 4, 0, 4).unwrap();
        let p = crate::tensor::softmax_rows(&logits, m.as_ref()).unwrap();
        let want = [[1., 0., 0., 0.], [0.3, 0.7, 0., 0.], [0.2, 0.4, 0.4, 0.], [0.05, 0.1, 0.05, 0.8]];
        for i in 0..4 {
            for j in 0..4 {
                assert!((p.at(i, j) - want[i][j]).abs() <= 0.05, "({i},{j}) {}", p.at(i, j));
            }
        }
    }

    #[test]
    fn single_key_returns_its_value() {
        let tape = Tape::<f64>::inference();
        let q = tape.constant(Tensor::from_rows(&[&[0.3, -1.0]]).unwrap());
        let k = tape.constant(Tensor::from_rows(&[&[2.0, 0.5]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[&[7.0, -3.0]]).unwrap());
        let o = qkv_attention(&tape, q, k, v, &no_mask()).unwrap();
        assert_eq!(tape.value(o).data(), &[7.0, -3.0]);
    }

    #[test]
    fn head_count_must_divide_width() {
        let mut store = ParamStore::<f32>::new();
        let e = AttentionParams::new(&mut store, "a", 6, 4, &AttentionOptions::default(), &mut Rng::new(0));
        assert!(matches!(e, Err(Error::Config(_))));
    }

    #[test]
    fn cache_grows_one_row_per_step() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(2);
        let p = AttentionParams::new(&mut store, "a", 4, 2, &AttentionOptions::default(), &mut rng).unwrap();
        let mut cache = KVCache::new(&[p.kv_width()]);
        for step in 0..5 {
            let tape = Tape::inference();
            let ctx = Ctx::new(&tape, &store);
            let x = tape.constant(Tensor::uniform(1, 4, -1.0, 1.0, &mut rng));
            attend_step_cached(&ctx, x, &mut cache, &p, 0, &causal_mask(8), None).unwrap();
            assert_eq!(cache.len(0).unwrap(), step + 1);
        }
        assert!(matches!(cache.len(3), Err(Error::Config(_))));
    }

    #[test]
    fn empty_source_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let p = AttentionParams::new(&mut store, "x", 4, 1, &AttentionOptions::default(), &mut Rng::new(0)).unwrap();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let enc = tape.constant(Tensor::zeros(0, 4));
        let s = tape.constant(Tensor::zeros(2, 4));
        assert!(matches!(cross_attention(&ctx, enc, s, &p, None), Err(Error::EmptySource)));
    }
}
