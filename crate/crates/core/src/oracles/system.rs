//! Model, training and runtime families.

use std::collections::HashMap;

use super::reference::{self as r};
use super::{Outcome, Tolerances};
use crate::ctx::Ctx;
use crate::embedding::{Vocab, PAD, SOS};
use crate::error::Result;
use crate::model::{vector_similarity, Architecture, Metric, Model, ModelConfig, Pooling};
use crate::runtime::{beam_search, greedy_generate, logit_bound_check, quantized_infer, read_checkpoint, write_checkpoint, SearchConfig};
use crate::tensor::{ParamId, ParamStore, Rng, Tape, Tensor};
use crate::train::{adam_step, lr_schedule, AdamState, Batch};

/// Two layers, d = 8, two heads, d_ffn = 16.
pub(crate) fn small_model(arch: Architecture, vocab: usize, seed: u64, tweak: impl FnOnce(&mut ModelConfig)) -> Result<Model<f64>> {
    let mut cfg = ModelConfig::new(arch, 2, 8, 2, vocab);
    cfg.d_ffn = 16;
    tweak(&mut cfg);
    Model::new(cfg, seed)
}

fn tokens(rng: &mut Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| 5 + rng.below(vocab - 5)).collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
    row.iter().map(|x| (x - mx).exp() / z).collect()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn encode_pad_invariance(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let m = small_model(Architecture::EncoderOnly, 12, rng.next_u64(), |_| {})?;
    let x = tokens(rng, 6, 12);
    let mut padded = x.clone();
    padded.extend([PAD; 3]);
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &m.store);
    let a = rows(&tape.value(m.encode(&ctx, &x)?));
    let b = rows(&tape.value(m.encode(&ctx, &padded)?));
    Ok(Outcome::new(r::max_abs_diff(&a, &b[..x.len()].to_vec()), tol.tight, "6 tokens plus 3 PADs"))
}

pub fn cached_decode(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let m = small_model(Architecture::EncoderDecoder, 12, rng.next_u64(), |_| {})?;
    let src = tokens(rng, 5, 12);
    let mut prefix = vec![SOS];
    prefix.extend(tokens(rng, 9, 12));
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &m.store);
    let mut state = m.start_decode(&ctx, Some(&src))?;
    let mut worst: f64 = 0.0;
    for i in 1..=prefix.len() {
        let step = m.decode_step(&ctx, &mut state, &prefix[..i])?;
        let full = tape.value(m.decoder_logits(&ctx, Some(&[&src]), &[&prefix[..i]])?);
        let want = softmax(full.row(i - 1));
        worst = worst.max(r::max_abs_diff(&vec![step], &vec![want]));
    }
    Ok(Outcome::new(worst, tol.tight, "encoder-decoder, 10 steps"))
}

pub fn stepwise_logprob(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let m = small_model(Architecture::EncoderDecoder, 12, rng.next_u64(), |_| {})?;
    let src = tokens(rng, 4, 12);
    let y = tokens(rng, 6, 12);
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &m.store);
    let whole = m.sequence_logprob(&ctx, Some(&src), &y)?;
    let mut state = m.start_decode(&ctx, Some(&src))?;
    let mut prefix = vec![SOS];
    let mut sum = 0.0;
    for &t in &y {
        sum += m.decode_step(&ctx, &mut state, &prefix)?[t].ln();
        prefix.push(t);
    }
    Ok(Outcome::new((whole - sum).abs(), tol.tight, format!("log-likelihood {whole:.4}")))
}

pub fn pool_pad(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let m = small_model(Architecture::EncoderOnly, 12, rng.next_u64(), |_| {})?;
    let x = tokens(rng, 5, 12);
    let mut padded = x.clone();
    padded.extend([PAD; 4]);
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &m.store);
    let a = m.embed_text(&ctx, &x, Pooling::Mean)?;
    let b = m.embed_text(&ctx, &padded, Pooling::Mean)?;
    Ok(Outcome::new(r::max_abs_diff(&vec![a], &vec![b]), tol.tight, "mean pooling with 4 PADs"))
}

pub fn triangle_inequality(rng: &mut Rng, _tol: &Tolerances) -> Result<Outcome> {
    let m = small_model(Architecture::EncoderOnly, 12, rng.next_u64(), |_| {})?;
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &m.store);
    let mut violations = 0;
    for _ in 0..20 {
        let mut v = Vec::new();
        for _ in 0..3 {
            let n = 2 + rng.below(6);
            v.push(m.embed_text(&ctx, &tokens(rng, n, 12), Pooling::Mean)?);
        }
        let d = |a: usize, b: usize| vector_similarity(&v[a], &v[b], Metric::Euclidean);
        violations += usize::from(d(0, 2)? > d(0, 1)? + d(1, 2)? + 1e-12);
    }
    Ok(Outcome::new(violations as f64, 0.0, "20 random triples"))
}

pub fn lr_sweep(_rng: &mut Rng, _tol: &Tolerances) -> Result<Outcome> {
    let (lr0, warm) = (2.0, 50);
    let direct = |t: usize| lr0 * (t as f64).powf(-0.5).min(t as f64 * (warm as f64).powf(-1.5));
    let mut bad = 0;
    let mut worst_gap: f64 = 0.0;
    for t in 1..=1000 {
        let (now, next) = (lr_schedule(t, lr0, warm), lr_schedule(t + 1, lr0, warm));
        worst_gap = worst_gap.max((now - direct(t)).abs());
        if t < warm && next < now || t >= warm && next >= now {
            bad += 1;
        }
    }
    let peak = (lr_schedule(warm, lr0, warm) - lr0 / (warm as f64).sqrt()).abs();
    bad += usize::from(peak > 1e-15 || worst_gap > 1e-15);
    Ok(Outcome::new(bad as f64, 0.0, "steps 1..1000, warmup 50"))
}

pub fn batch_pad_invariance(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let m = small_model(Architecture::DecoderOnly, 12, rng.next_u64(), |_| {})?;
    let seqs: Vec<Vec<usize>> = [6, 2, 4].iter().map(|&n| tokens(rng, n, 12)).collect();
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let batch = Batch::from_sequences(&refs)?;
    let inputs = batch.inputs();
    let irefs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &m.store);
    let packed = tape.value(m.decoder_logits(&ctx, None, &irefs)?);
    let mut worst: f64 = 0.0;
    for (row, s) in seqs.iter().enumerate() {
        let alone = tape.value(m.decoder_logits(&ctx, None, &[&inputs[row][..s.len()]])?);
        for i in 0..s.len() {
            let a = packed.row(row * batch.width + i);
            worst = worst.max(a.iter().zip(alone.row(i)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
    }
    Ok(Outcome::new(worst, tol.tight, "lengths 6, 2, 4 padded to 6"))
}

fn scalar_store(w0: f64) -> (ParamStore<f64>, ParamId) {
    let mut s = ParamStore::new();
    let id = s.add("w", Tensor::full(1, 1, w0));
    (s, id)
}

pub fn adam_quadratic(_rng: &mut Rng, _tol: &Tolerances) -> Result<Outcome> {
    let (mut store, id) = scalar_store(0.0);
    let mut st = AdamState::new(0.9, 0.999, 1e-8);
    let steps = 2000;
    for t in 0..steps {
        let w = store.get(id).at(0, 0);
        let g = HashMap::from([(id, Tensor::full(1, 1, 2.0 * (w - 3.0)))]);
        let lr = 0.05 * (1.0 - t as f64 / steps as f64) + 1e-4;
        adam_step(&mut store, &g, &mut st, lr)?;
    }
    let w = store.get(id).at(0, 0);
    Ok(Outcome::new((w - 3.0).abs(), 1e-3, format!("w = {w:.6} after {steps} steps")))
}

pub fn adam_hand_trace(_rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.1);
    let (mut store, id) = scalar_store(0.0);
    let mut st = AdamState::new(b1, b2, eps);
    let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    let mut worst: f64 = 0.0;
    for t in 1..=2 {
        let g = 2.0 * (w - 3.0);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        w -= lr * mh / (vh.sqrt() + eps);
        let grads = HashMap::from([(id, Tensor::full(1, 1, 2.0 * (store.get(id).at(0, 0) - 3.0)))]);
        adam_step(&mut store, &grads, &mut st, lr)?;
        worst = worst.max((store.get(id).at(0, 0) - w).abs());
    }
    Ok(Outcome::new(worst, tol.tight, format!("w after two steps {w:.9}")))
}

const CHUNK: usize = 4;

fn chunk_setup(rng: &mut Rng) -> Result<(Model<f64>, Vec<usize>)> {
    let m = small_model(Architecture::DecoderOnly, 12, rng.next_u64(), |_| {})?;
    let mut x = vec![SOS];
    x.extend(tokens(rng, 2 * CHUNK - 1, 12));
    Ok((m, x))
}

pub fn chunk_manual(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let (m, x) = chunk_setup(rng)?;
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &m.store);
    let mut st = m.start_decode(&ctx, None)?;
    let first = rows(&tape.value(m.forward_cached(&ctx, &mut st, &x[..CHUNK])?));
    st.truncate(CHUNK)?;
    let second = rows(&tape.value(m.forward_cached(&ctx, &mut st, &x[CHUNK..])?));
    let full = rows(&tape.value(m.decoder_logits(&ctx, None, &[&x])?));
    let mut chunked = first;
    chunked.extend(second);
    Ok(Outcome::new(r::max_abs_diff(&chunked, &full), tol.tight, "two chunks of 4 against one full pass"))
}

/// The second chunk's loss, with the first chunk's keys and values computed
/// from `cache_store` and everything else from `store`.
fn second_chunk_loss(m: &Model<f64>, store: &ParamStore<f64>, cache_store: &ParamStore<f64>, x: &[usize], targets: &[usize]) -> Result<f64> {
    // Parameters bind once per tape, so the cache gets its own.
    let mut st = {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, cache_store);
        let mut st = m.start_decode(&ctx, None)?;
        m.forward_cached(&ctx, &mut st, &x[..CHUNK])?;
        st
    };
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, store);
    let logits = m.forward_cached(&ctx, &mut st, &x[CHUNK..])?;
    let loss = tape.cross_entropy(logits, targets, &vec![1.0; targets.len()])?;
    Ok(tape.value(loss).at(0, 0))
}

pub fn chunk_no_grad(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let (m, x) = chunk_setup(rng)?;
    let targets = tokens(rng, CHUNK, 12);
    let grads = {
        let frozen = Tape::inference();
        let mut st = m.start_decode(&Ctx::new(&frozen, &m.store), None)?;
        m.forward_cached(&Ctx::new(&frozen, &m.store), &mut st, &x[..CHUNK])?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &m.store);
        let logits = m.forward_cached(&ctx, &mut st, &x[CHUNK..])?;
        let loss = tape.cross_entropy(logits, &targets, &[1.0; CHUNK])?;
        tape.backward(loss)?.into_params()
    };
    let h = 1e-5;
    let (mut analytic, mut frozen_fd, mut live_fd) = (Vec::new(), Vec::new(), Vec::new());
    let mut probe = m.store.clone();
    let ids: Vec<ParamId> = m.store.ids().collect();
    for &id in ids.iter().filter(|id| m.store.name(**id).contains("dec.")).take(12) {
        let c = rng.below(m.store.get(id).len());
        analytic.push(grads.get(&id).map_or(0.0, |g| g.data()[c]));
        let x0 = probe.get(id).data()[c];
        let mut eval = |delta: f64| -> Result<(f64, f64)> {
            probe.get_mut(id).data_mut()[c] = x0 + delta;
            let frozen = second_chunk_loss(&m, &probe, &m.store, &x, &targets)?;
            let live = second_chunk_loss(&m, &probe, &probe, &x, &targets)?;
            probe.get_mut(id).data_mut()[c] = x0;
            Ok((frozen, live))
        };
        let (fu, lu) = eval(h)?;
        let (fdn, ldn) = eval(-h)?;
        frozen_fd.push((fu - fdn) / (2.0 * h));
        live_fd.push((lu - ldn) / (2.0 * h));
    }
    let err = r::rel_err(&analytic, &frozen_fd, 1e-8);
    let through_cache = r::rel_err(&live_fd, &frozen_fd, 1e-8);
    Ok(Outcome::new(
        err,
        tol.grad_rel,
        format!("{} coordinates; a gradient through the cache would differ by {through_cache:.1e}", analytic.len()),
    ))
}

pub fn beam1_greedy(rng: &mut Rng, _tol: &Tolerances) -> Result<Outcome> {
    let mut misses = 0;
    for arch in [Architecture::DecoderOnly, Architecture::EncoderDecoder] {
        let m = small_model(arch, 12, rng.next_u64(), |_| {})?;
        let src = tokens(rng, 4, 12);
        let src = (arch == Architecture::EncoderDecoder).then_some(src.as_slice());
        let prompt = tokens(rng, 2, 12);
        let cfg = SearchConfig {
            beam: 1,
            max_len: 12,
            ..Default::default()
        };
        let greedy = greedy_generate(&m, src, &prompt, &cfg)?;
        let beam = beam_search(&m, src, &prompt, &cfg)?;
        misses += usize::from(beam.first().map(|h| &h.tokens) != Some(&greedy));
    }
    Ok(Outcome::new(misses as f64, 0.0, "decoder-only and encoder-decoder"))
}

/// Best sequence of length 4 over a 5-token vocabulary by exhaustive
/// scoring, and the beam-search winner with beam 625.
pub fn exhaustive_vs_beam(seed: u64) -> Result<(Vec<usize>, f64, Vec<usize>, f64)> {
    let m = small_model(Architecture::DecoderOnly, 5, seed, |_| {})?;
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &m.store);
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for y in r::all_sequences(5, 4) {
        let lp = m.sequence_logprob(&ctx, None, &y)?;
        if lp > best.1 {
            best = (y, lp);
        }
    }
    let cfg = SearchConfig {
        beam: 625,
        max_len: 4,
        alpha: 0.0,
        stop_at_eos: false,
        use_cache: true,
    };
    let hyps = beam_search(&m, None, &[], &cfg)?;
    let top = hyps.first().map(|h| (h.tokens.clone(), h.score)).unwrap_or_default();
    Ok((best.0, best.1, top.0, top.1))
}

pub fn beam_exhaustive(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let (brute, brute_lp, beam, beam_lp) = exhaustive_vs_beam(rng.next_u64())?;
    if brute != beam {
        return Ok(Outcome::new(f64::INFINITY, 0.0, format!("beam {beam:?} vs exhaustive {brute:?}")));
    }
    Ok(Outcome::new((brute_lp - beam_lp).abs(), tol.tight, format!("{brute:?} with log-probability {brute_lp:.4}")))
}

pub fn beam_rescoring(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let m = small_model(Architecture::DecoderOnly, 12, rng.next_u64(), |_| {})?;
    let cfg = SearchConfig {
        beam: 4,
        max_len: 6,
        ..Default::default()
    };
    let hyps = beam_search(&m, None, &[], &cfg)?;
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &m.store);
    let mut worst: f64 = 0.0;
    for h in &hyps {
        worst = worst.max((h.score - m.sequence_logprob(&ctx, None, &h.tokens)?).abs());
    }
    Ok(Outcome::new(worst, tol.tight, format!("{} hypotheses", hyps.len())))
}

pub fn checkpoint_regeneration(rng: &mut Rng, _tol: &Tolerances) -> Result<Outcome> {
    let m = small_model(Architecture::DecoderOnly, 12, rng.next_u64(), |_| {})?.cast::<f32>();
    let vocab = Vocab::synthetic(12);
    let (loaded, _) = read_checkpoint(&write_checkpoint(&m, &vocab)?)?;
    let cfg = SearchConfig {
        max_len: 20,
        stop_at_eos: false,
        ..Default::default()
    };
    let prompt = tokens(rng, 3, 12);
    let a = greedy_generate(&m, None, &prompt, &cfg)?;
    let b = greedy_generate(&loaded, None, &prompt, &cfg)?;
    let diff = a.iter().zip(&b).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len());
    Ok(Outcome::new(diff as f64, 0.0, "20 greedy tokens before and after a save/load"))
}

/// Greedy tokens that differ between the float model and its `bits`-bit
/// quantized run over five 20-token probes.
pub fn quantized_disagreement(m: &Model<f32>, bits: u32, rng: &mut Rng) -> Result<(usize, usize)> {
    let cfg = SearchConfig {
        max_len: 20,
        stop_at_eos: false,
        ..Default::default()
    };
    let (mut diff, mut total) = (0, 0);
    for _ in 0..5 {
        let prompt = tokens(rng, 2, m.vocab());
        let a = greedy_generate(m, None, &prompt, &cfg)?;
        let b = quantized_infer(m, None, &prompt, bits, &cfg)?;
        diff += a.iter().zip(&b).filter(|(x, y)| x != y).count();
        total += a.len();
    }
    Ok((diff, total))
}

pub fn quant16_agreement(rng: &mut Rng, _tol: &Tolerances) -> Result<Outcome> {
    let m = small_model(Architecture::DecoderOnly, 12, rng.next_u64(), |c| c.d = 16)?.cast::<f32>();
    let (diff, total) = quantized_disagreement(&m, 16, rng)?;
    Ok(Outcome::new(diff as f64, 0.0, format!("{total} probe tokens")))
}

pub fn quant8_bound(rng: &mut Rng, _tol: &Tolerances) -> Result<Outcome> {
    let m = small_model(Architecture::DecoderOnly, 12, rng.next_u64(), |_| {})?;
    let mut prefix = vec![SOS];
    prefix.extend(tokens(rng, 5, 12));
    let rep = logit_bound_check(&m, None, &prefix, 8)?;
    Ok(Outcome::new(
        rep.violations as f64,
        0.0,
        format!("{} logits, max change {:.2e}, max bound {:.2e}", rep.entries, rep.max_delta, rep.max_bound),
    ))
}

pub fn cli_train_smoke(rng: &mut Rng, _tol: &Tolerances) -> Result<Outcome> {
    let dir = std::env::temp_dir().join(format!("xformer-smoke-{}-{}", std::process::id(), rng.next_u64()));
    std::fs::create_dir_all(&dir)?;
    let ckpt = dir.join("model.ckpt");
    let args = ["xformer", "train", "--out", ckpt.to_str().unwrap_or_default(), "--steps", "3"];
    let mut sink = Vec::new();
    let ran = crate::runtime::cli::run(args, &mut sink);
    let loaded = ran.and_then(|_| crate::runtime::load_checkpoint(&ckpt));
    let _ = std::fs::remove_dir_all(&dir);
    let (m, v) = loaded?;
    Ok(Outcome::new(0.0, 0.0, format!("3 steps, checkpoint reloaded with {} parameters over {} tokens", m.store.len(), v.len())))
}
