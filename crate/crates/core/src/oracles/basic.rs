//! Tensor, embedding, attention and efficient-attention families.

use std::collections::BTreeSet;

use super::reference::{self as r, M};
use super::{gradient_check, of_tensor, rmat, to_tensor, Outcome, Tolerances};
use crate::attention::{
    attend_step_cached, causal_mask, cross_attention, local_prior, make_attention_field, multi_head_self, multi_query_attention, no_mask,
    qkv_attention, rpr_attention, self_attention, AttentionOptions, AttentionParams, FieldPattern, KVCache, PriorKind, PriorMode,
};
use crate::blocks::{ffn, sublayer_apply, FFNParams, LNParams, Norm};
use crate::ctx::Ctx;
use crate::efficient::{compress_memory, kernelized_attention, reduce_length, reduced_logits, CompressionRule, FeatureMap, LengthReduction, StreamState, WidthReduction};
use crate::embedding::{embed_sequence, EmbeddingTable, RprRole, SinusoidalPE};
use crate::error::Result;
use crate::tensor::{quantized_matmul, rounding_bound, ParamId, ParamStore, QuantSpec, Rng, Tape, Tensor};

fn elu1(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

fn value(tape: &Tape<f64>, v: crate::tensor::Var) -> M {
    of_tensor(&tape.value(v))
}

pub fn matmul_loop(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let (a, b) = (rmat(rng, 7, 5, 1.0), rmat(rng, 5, 3, 1.0));
    let fast = to_tensor(&a).matmul(&to_tensor(&b))?;
    let mut worst = r::max_abs_diff(&of_tensor(&fast), &r::matmul(&a, &b));
    // Large enough to take the blocked kernel path.
    let (a, b) = (rmat(rng, 33, 40, 1.0), rmat(rng, 40, 17, 1.0));
    let fast = to_tensor(&a).matmul(&to_tensor(&b))?;
    worst = worst.max(r::max_abs_diff(&of_tensor(&fast), &r::matmul(&a, &b)));
    Ok(Outcome::new(worst, tol.tight, "7x5·5x3 and 33x40·40x17"))
}

pub fn sublayer_fd_gradient(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let d = 6;
    let mut store = ParamStore::<f64>::new();
    let ln = LNParams::new(&mut store, "ln", d, 1e-6)?;
    let p = FFNParams::new(&mut store, "ffn", d, 12, d, 1.0, rng)?;
    store.set(ln.gain, Tensor::uniform(1, d, 0.5, 1.5, rng));
    store.set(ln.bias, Tensor::uniform(1, d, -0.5, 0.5, rng));
    store.set(p.bh, Tensor::uniform(1, 12, -0.5, 0.5, rng));
    let x = Tensor::uniform(4, d, -1.0, 1.0, rng);
    let mut worst: f64 = 0.0;
    for norm in [Norm::Post, Norm::Pre] {
        let f = |ctx: &Ctx<f64>, v| sublayer_apply(ctx, v, &ln, norm, |z| ffn(ctx, z, &p));
        worst = worst.max(gradient_check(&store, &x, &f, rng)?);
    }
    Ok(Outcome::new(worst, tol.grad_rel, "post- and pre-norm FFN sub-layer"))
}

pub fn quant_roundtrip(rng: &mut Rng, _tol: &Tolerances) -> Result<Outcome> {
    let s = 2.0 / 255.0;
    let spec = QuantSpec::new(s, 8)?;
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let x = rng.uniform_in(-1.0, 1.0);
        worst = worst.max((spec.dequantize(spec.quantize(x)) - x).abs());
    }
    Ok(Outcome::new(worst, s / 2.0 * (1.0 + 1e-12), "10k draws in [-1, 1], s = 2/255"))
}

pub fn quant_matmul_bound(rng: &mut Rng, _tol: &Tolerances) -> Result<Outcome> {
    let (a, b) = (rmat(rng, 8, 8, 1.0), rmat(rng, 8, 8, 1.0));
    let (ta, tb) = (to_tensor(&a), to_tensor(&b));
    let (sa, sb) = (QuantSpec::calibrate(ta.data(), 8)?, QuantSpec::calibrate(tb.data(), 8)?);
    let exact = r::matmul(&a, &b);
    let q = of_tensor(&quantized_matmul(&ta, &tb, sa, sb)?);
    let frob = |m: &M| m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let diff: M = q.iter().zip(&exact).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect()).collect();
    let bound = of_tensor(&rounding_bound(&ta, &tb, sa, sb)?);
    let rel = frob(&diff) / frob(&exact);
    let rel_bound = frob(&bound) / frob(&exact);
    Ok(Outcome::new(rel / rel_bound, 1.0, format!("relative error {rel:.2e} vs bound {rel_bound:.2e}")))
}

pub fn pe_shift_direct(rng: &mut Rng, _tol: &Tolerances) -> Result<Outcome> {
    let pe = SinusoidalPE::standard(8)?;
    let direct = |pos: f64| -> Vec<f64> {
        (0..4)
            .flat_map(|k| {
                let w = 1.0 / 10000f64.powf(2.0 * k as f64 / 8.0);
                [(pos * w).sin(), (pos * w).cos()]
            })
            .collect()
    };
    let mut pairs = vec![(3.0, 5.0)];
    pairs.extend((0..50).map(|_| (rng.below(500) as f64, rng.below(500) as f64)));
    let mut worst: f64 = 0.0;
    for (i, mu) in pairs {
        let got = crate::embedding::pe_shift(&pe.encode(i), &pe.encode(mu));
        for (a, b) in got.iter().zip(direct(i + mu)) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(Outcome::new(worst, 1e-9, "i=3, mu=5, d=8 plus 50 random pairs"))
}

pub fn embed_elementwise(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let (v, d, start) = (11, 6, 4);
    let mut store = ParamStore::<f64>::new();
    let table = EmbeddingTable::new(&mut store, "emb", v, d, rng);
    let tokens: Vec<usize> = (0..7).map(|_| rng.below(v)).collect();
    let pe = SinusoidalPE::standard(d)?;
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store);
    let got = value(&tape, embed_sequence(&ctx, &table, &tokens, Some(&pe), start, false)?);
    let w = store.get(table.weight);
    let mut worst: f64 = 0.0;
    for (j, &t) in tokens.iter().enumerate() {
        for c in 0..d {
            let k = c / 2;
            let ang = (start + j) as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
            let pe_c = if c % 2 == 0 { ang.sin() } else { ang.cos() };
            worst = worst.max((got[j][c] - (w.at(t, c) + pe_c)).abs());
        }
    }
    Ok(Outcome::new(worst, tol.tight, "7 tokens from position 4"))
}

pub fn attention_loop(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for n in [6, 8] {
        let (q, k, v) = (rmat(rng, n, 4, 1.5), rmat(rng, n, 4, 1.5), rmat(rng, n, 3, 1.0));
        for causal in [false, true] {
            let tape = Tape::<f64>::inference();
            let out = qkv_attention(
                &tape,
                tape.constant(to_tensor(&q)),
                tape.constant(to_tensor(&k)),
                tape.constant(to_tensor(&v)),
                &no_mask().with_causal(causal),
            )?;
            let want = r::attention(&q, &k, &v, &|i, j| !causal || j <= i, &|_, _| 0.0);
            worst = worst.max(r::max_abs_diff(&value(&tape, out), &want));
        }
    }
    Ok(Outcome::new(worst, tol.tight, "n in {6, 8}, masked and unmasked"))
}

fn permute_blocks(t: &Tensor<f64>, perm: &[usize], block: usize, by_rows: bool) -> Tensor<f64> {
    Tensor::from_fn(t.rows(), t.cols(), |i, j| {
        if by_rows {
            t.at(perm[i / block] * block + i % block, j)
        } else {
            t.at(i, perm[j / block] * block + j % block)
        }
    })
}

pub fn head_permutation(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let (d, heads) = (8, 4);
    let mut store = ParamStore::<f64>::new();
    let p = AttentionParams::new(&mut store, "att", d, heads, &AttentionOptions::default(), rng)?;
    let x = Tensor::uniform(5, d, -1.0, 1.0, rng);
    let perm = [2, 0, 3, 1];
    let mut permuted = store.clone();
    for id in [p.wq, p.wk, p.wv] {
        permuted.set(id, permute_blocks(store.get(id), &perm, p.d_head, false));
    }
    permuted.set(p.wc, permute_blocks(store.get(p.wc), &perm, p.d_head, true));
    let run = |s: &ParamStore<f64>| -> Result<M> {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, s);
        let out = multi_head_self(&ctx, tape.constant(x.clone()), &p, &causal_mask(5))?;
        Ok(value(&tape, out))
    };
    Ok(Outcome::new(r::max_abs_diff(&run(&store)?, &run(&permuted)?), tol.tight, "4 heads, order 2-0-3-1"))
}

pub fn cross_composition(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let d = 8;
    let mut worst: f64 = 0.0;
    let (enc, dec) = (rmat(rng, 5, d, 1.0), rmat(rng, 3, d, 1.0));
    for heads in [1, 2] {
        let mut store = ParamStore::<f64>::new();
        let p = AttentionParams::new(&mut store, "x", d, heads, &AttentionOptions::default(), rng)?;
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let (he, hd) = (tape.constant(to_tensor(&enc)), tape.constant(to_tensor(&dec)));
        let got = value(&tape, cross_attention(&ctx, he, hd, &p, None)?);
        let w = |id: ParamId| of_tensor(store.get(id));
        if heads == 1 {
            let q = tape.matmul(hd, ctx.p(p.wq))?;
            let k = tape.matmul(he, ctx.p(p.wk))?;
            let v = tape.matmul(he, ctx.p(p.wv))?;
            let composed = tape.matmul(qkv_attention(&tape, q, k, v, &no_mask())?, ctx.p(p.wc))?;
            worst = worst.max(r::max_abs_diff(&got, &value(&tape, composed)));
        }
        let want = r::multi_head(&dec, &enc, &w(p.wq), &w(p.wk), &w(p.wv), &w(p.wc), heads, &|_, _| true);
        worst = worst.max(r::max_abs_diff(&got, &want));
    }
    Ok(Outcome::new(worst, tol.tight, "single-head composition and 2-head loop"))
}

pub fn prior_argmax(rng: &mut Rng, _tol: &Tolerances) -> Result<Outcome> {
    let (d, n) = (8, 10);
    let mut store = ParamStore::<f64>::new();
    let p = AttentionParams::new(&mut store, "att", d, 2, &AttentionOptions::default(), rng)?;
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store);
    let x = tape.constant(Tensor::uniform(n, d, -1.0, 1.0, rng));
    let mask = local_prior(PriorKind::Gaussian(vec![1.0]), 100.0, PriorMode::Additive).with_causal(true);
    let out = self_attention(&ctx, x, &p, &mask, 0, None)?;
    let mut misses = 0;
    for m in &out.maps {
        let a = value(&tape, *m);
        for (i, row) in a.iter().enumerate() {
            let best = (0..row.len()).max_by(|&x, &y| row[x].total_cmp(&row[y])).unwrap_or(0);
            misses += usize::from(best != i);
        }
    }
    Ok(Outcome::new(misses as f64, 0.0, "rows whose argmax is not the diagonal"))
}

pub fn rpr_loop(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let (d, clip) = (4, 2);
    let mut store = ParamStore::<f64>::new();
    let opts = AttentionOptions {
        rpr: Some((clip, vec![RprRole::Query, RprRole::Key, RprRole::Value])),
        ..Default::default()
    };
    let p = AttentionParams::new(&mut store, "rpr", d, 1, &opts, rng)?;
    let t = p.rpr.clone().expect("built with tables");
    let h = rmat(rng, 5, d, 1.0);
    let w = |id: ParamId| of_tensor(store.get(id));
    let (tq, tk, tv) = (w(t.q.expect("q")), w(t.key.expect("k")), w(t.v.expect("v")));
    let (q, k, v) = (r::matmul(&h, &w(p.wq)), r::matmul(&h, &w(p.wk)), r::matmul(&h, &w(p.wv)));
    let mut worst: f64 = 0.0;
    for causal in [false, true] {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let got = value(&tape, rpr_attention(&ctx, tape.constant(to_tensor(&h)), &p, &no_mask().with_causal(causal), 0)?);
        let want = r::matmul(&r::rpr_attention(&q, &k, &v, clip, Some(&tq), Some(&tk), Some(&tv), causal), &w(p.wc));
        worst = worst.max(r::max_abs_diff(&got, &want));
    }
    Ok(Outcome::new(worst, tol.tight, "5 tokens, clip 2, all roles"))
}

pub fn multi_query_copy(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let (d, heads) = (8, 4);
    let mut store = ParamStore::<f64>::new();
    let mq = AttentionParams::new(&mut store, "mq", d, heads, &AttentionOptions { multi_query: true, ..Default::default() }, rng)?;
    let full = AttentionParams::new(&mut store, "mh", d, heads, &AttentionOptions::default(), rng)?;
    let tile = |id: ParamId| -> Tensor<f64> {
        let t = store.get(id);
        Tensor::from_fn(d, d, |i, j| t.at(i, j % mq.d_head))
    };
    let (wk, wv) = (tile(mq.wk), tile(mq.wv));
    store.set(full.wk, wk);
    store.set(full.wv, wv);
    store.set(full.wq, store.get(mq.wq).clone());
    store.set(full.wc, store.get(mq.wc).clone());
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store);
    let x = tape.constant(Tensor::uniform(6, d, -1.0, 1.0, rng));
    let a = value(&tape, multi_query_attention(&ctx, x, &mq, &causal_mask(6))?);
    let b = value(&tape, multi_head_self(&ctx, x, &full, &causal_mask(6))?);
    Ok(Outcome::new(r::max_abs_diff(&a, &b), tol.tight, "4 heads sharing one key/value map"))
}

pub fn cached_attention_step(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let (d, n) = (8, 12);
    let mut store = ParamStore::<f64>::new();
    let p = AttentionParams::new(&mut store, "att", d, 2, &AttentionOptions::default(), rng)?;
    let x = Tensor::uniform(n, d, -1.0, 1.0, rng);
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store);
    let full = value(&tape, multi_head_self(&ctx, tape.constant(x.clone()), &p, &causal_mask(n))?);
    let mut cache = KVCache::new(&[p.kv_width()]);
    let mut worst: f64 = 0.0;
    for (i, want) in full.iter().enumerate() {
        let xi = tape.constant(x.slice_rows(i, 1)?);
        let out = attend_step_cached(&ctx, xi, &mut cache, &p, 0, &causal_mask(n), None)?.out;
        let got = value(&tape, out);
        worst = worst.max(r::max_abs_diff(&got, &vec![want.clone()]));
    }
    Ok(Outcome::new(worst, tol.tight, "12 incremental steps against full recompute"))
}

pub fn field_union(_rng: &mut Rng, _tol: &Tolerances) -> Result<Outcome> {
    let n = 16;
    let parts = vec![
        FieldPattern::Global { positions: vec![1] },
        FieldPattern::Window { size: 3 },
        FieldPattern::Random { k: 2, seed: 7 },
    ];
    let mut mismatched = 0;
    for causal in [false, true] {
        let hybrid = make_attention_field(&FieldPattern::Hybrid(parts.clone()), n, causal)?;
        let comps = parts.iter().map(|p| make_attention_field(p, n, causal)).collect::<Result<Vec<_>>>()?;
        for i in 0..n {
            let mut want = BTreeSet::new();
            for c in &comps {
                want.extend(c.row(i).iter().copied());
            }
            let got: BTreeSet<usize> = hybrid.row(i).iter().copied().collect();
            mismatched += usize::from(got != want);
        }
    }
    Ok(Outcome::new(mismatched as f64, 0.0, "rows differing from the set union, n = 16"))
}

pub fn kernel_loop(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let (q, k, v) = (rmat(rng, 8, 4, 1.0), rmat(rng, 8, 4, 1.0), rmat(rng, 8, 3, 1.0));
    let mut worst: f64 = 0.0;
    for causal in [true, false] {
        let tape = Tape::<f64>::inference();
        let out = kernelized_attention(
            &tape,
            tape.constant(to_tensor(&q)),
            tape.constant(to_tensor(&k)),
            tape.constant(to_tensor(&v)),
            FeatureMap::EluPlusOne,
            causal,
        )?;
        worst = worst.max(r::max_abs_diff(&value(&tape, out), &r::kernel_attention(&q, &k, &v, &elu1, causal)));
    }
    Ok(Outcome::new(worst, tol.tight, "8 tokens, elu+1, causal and full"))
}

pub fn stream_vs_batch(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let n = 16;
    let (q, k, v) = (rmat(rng, n, 4, 1.0), rmat(rng, n, 4, 1.0), rmat(rng, n, 3, 1.0));
    let tape = Tape::<f64>::inference();
    let batch = value(
        &tape,
        kernelized_attention(
            &tape,
            tape.constant(to_tensor(&q)),
            tape.constant(to_tensor(&k)),
            tape.constant(to_tensor(&v)),
            FeatureMap::EluPlusOne,
            true,
        )?,
    );
    let mut st = StreamState::<f64>::new(4, 3);
    let mut stream = Vec::with_capacity(n);
    for i in 0..n {
        stream.push(st.step(&k[i], &v[i], &q[i], FeatureMap::EluPlusOne)?);
    }
    Ok(Outcome::new(r::max_abs_diff(&stream, &batch), tol.tight, "16 streamed steps"))
}

pub fn strided_pairwise_mean(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let (k, v) = (rmat(rng, 8, 4, 1.0), rmat(rng, 8, 3, 1.0));
    let store = ParamStore::<f64>::new();
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store);
    let (kr, vr) = reduce_length(
        &ctx,
        tape.constant(to_tensor(&k)),
        tape.constant(to_tensor(&v)),
        &LengthReduction::StridedMean { size: 2, stride: 2 },
        false,
    )?;
    let pair = |m: &M| -> M { (0..m.len() / 2).map(|t| m[2 * t].iter().zip(&m[2 * t + 1]).map(|(a, b)| (a + b) / 2.0).collect()).collect() };
    let worst = r::max_abs_diff(&value(&tape, kr), &pair(&k)).max(r::max_abs_diff(&value(&tape, vr), &pair(&v)));
    Ok(Outcome::new(worst, tol.tight, "8 rows to 4 pairwise means"))
}

pub fn width_rank(rng: &mut Rng, _tol: &Tolerances) -> Result<Outcome> {
    let (n, d, dr) = (8, 6, 2);
    let mut store = ParamStore::<f64>::new();
    let uq = store.add("uq", Tensor::uniform(d, dr, -1.0, 1.0, rng));
    let uk = store.add("uk", Tensor::uniform(d, dr, -1.0, 1.0, rng));
    let proj = WidthReduction { uq, uk, scale_reduced: false };
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store);
    let q = tape.constant(Tensor::uniform(n, d, -1.0, 1.0, rng));
    let k = tape.constant(Tensor::uniform(n, d, -1.0, 1.0, rng));
    let logits = value(&tape, reduced_logits(&ctx, q, k, &proj)?);
    let rank = r::rank(&logits, 1e-9);
    Ok(Outcome::new(rank as f64, dr as f64, format!("8x8 logits from d' = {dr}, rank {rank}")))
}

pub fn recursive_mean(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let (k, v) = (rmat(rng, 7, 4, 1.0), rmat(rng, 7, 3, 1.0));
    let w: Vec<f64> = (0..7).map(|_| rng.uniform_in(0.1, 2.0)).collect();
    let mean = |m: &M, w: &[f64]| -> Vec<f64> {
        let total: f64 = w.iter().sum();
        (0..m[0].len()).map(|c| m.iter().zip(w).map(|(row, wi)| row[c] * wi).sum::<f64>() / total).collect()
    };
    let mut worst: f64 = 0.0;
    for weights in [None, Some(w.clone())] {
        let rule = CompressionRule::RecursiveWeighted(weights.clone());
        let (km, vm) = compress_memory(&to_tensor(&k), &to_tensor(&v), &rule)?;
        let ws = weights.unwrap_or_else(|| vec![1.0; 7]);
        worst = worst.max(r::max_abs_diff(&vec![km], &vec![mean(&k, &ws)]));
        worst = worst.max(r::max_abs_diff(&vec![vm], &vec![mean(&v, &ws)]));
    }
    Ok(Outcome::new(worst, tol.tight, "uniform and weighted running means over 7 rows"))
}
