//! Randomized invariants.

use proptest::prelude::*;

use xformer::attention::{make_attention_field, no_mask, qkv_attention, rpr_attention, AttentionOptions, AttentionParams, FieldPattern};
use xformer::blocks::{ffn, sublayer_apply, top_k, FFNParams, LNParams, Norm};
use xformer::efficient::{compress_memory, CompressionRule};
use xformer::embedding::{pe_shift, RprRole, SinusoidalPE, Vocab};
use xformer::ssm::{discretize, random_continuous, scan_recurrent, Discretization, Mat, SsmConfig};
use xformer::tensor::{softmax_rows, NormDenom, QuantSpec};
use xformer::{Ctx, ParamStore, Rng, Tape, Tensor};

fn matrix(rows: usize, cols: usize, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::uniform(rows, cols, lo, hi, &mut Rng::new(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(n in 1usize..10, seed: u64) {
        let x = matrix(n, n, seed, -20.0, 20.0);
        let mask = Tensor::from_fn(n, n, |i, j| if j <= i { 0.0 } else { f64::NEG_INFINITY });
        let p = softmax_rows(&x, Some(&mask)).unwrap();
        for i in 0..n {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for j in i + 1..n {
                prop_assert_eq!(p.at(i, j), 0.0);
            }
        }
    }

    #[test]
    fn same_seed_same_draws(seed: u64) {
        let (mut a, mut b) = (Rng::new(seed), Rng::new(seed));
        for _ in 0..32 {
            prop_assert_eq!(a.gaussian().to_bits(), b.gaussian().to_bits());
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn quantizer_round_trip(bits in 2u32..=16, step in 1e-4f64..2.0, u in 0.0f64..1.0) {
        let spec = QuantSpec::new(step, bits).unwrap();
        let (lo, hi) = (spec.min_int() as f64 * step, spec.max_int() as f64 * step);
        let x = lo + u * (hi - lo);
        prop_assert!((spec.dequantize(spec.quantize(x)) - x).abs() <= step / 2.0 * (1.0 + 1e-12));
        prop_assert_eq!(spec.quantize(hi + 10.0 * step), spec.max_int());
        prop_assert_eq!(spec.quantize(lo - 10.0 * step), spec.min_int());
    }

    #[test]
    fn positional_encodings_are_bounded_and_shift(half in 1usize..33, i in 0u32..10_000, mu in 0u32..10_000) {
        let pe = SinusoidalPE::standard(2 * half).unwrap();
        let (a, b) = (pe.encode(i as f64), pe.encode(mu as f64));
        prop_assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)));
        let direct = pe.encode((i + mu) as f64);
        for (s, d) in pe_shift(&a, &b).iter().zip(&direct) {
            prop_assert!((s - d).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations(n in 1usize..8, m in 1usize..8, seed: u64) {
        let tape = Tape::<f64>::inference();
        let q = tape.constant(matrix(n, 4, seed, -2.0, 2.0));
        let k = tape.constant(matrix(m, 4, seed ^ 1, -2.0, 2.0));
        let vt = matrix(m, 3, seed ^ 2, -2.0, 2.0);
        let v = tape.constant(vt.clone());
        let out = tape.value(qkv_attention(&tape, q, k, v, &no_mask()).unwrap());
        for i in 0..n {
            for c in 0..3 {
                let col: Vec<f64> = (0..m).map(|j| vt.at(j, c)).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.at(i, c) >= lo - 1e-12 && out.at(i, c) <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn causal_fields_stay_causal(n in 1usize..24, w in 1usize..6, stride in 1usize..5, k in 1usize..4, seed in 0u64..1000) {
        let patterns = [
            FieldPattern::Window { size: w },
            FieldPattern::Chunked { size: w },
            FieldPattern::Strided { stride },
            FieldPattern::Dilated { window: w, dilation: stride },
            FieldPattern::Random { k, seed },
            FieldPattern::Hybrid(vec![FieldPattern::Global { positions: vec![0] }, FieldPattern::Window { size: w }]),
        ];
        for p in &patterns {
            let f = make_attention_field(p, n, true).unwrap();
            for i in 0..n {
                prop_assert!(f.row(i).iter().all(|&j| j <= i && j < n), "{:?} row {}", p, i);
            }
        }
    }

    #[test]
    fn rpr_attention_is_translation_invariant(n in 2usize..7, shift in 1usize..50, seed: u64) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::<f64>::new();
        let opts = AttentionOptions {
            rpr: Some((2, vec![RprRole::Query, RprRole::Key, RprRole::Value])),
            ..Default::default()
        };
        let p = AttentionParams::new(&mut store, "att", 8, 2, &opts, &mut rng).unwrap();
        let x = Tensor::uniform(n, 8, -1.0, 1.0, &mut rng);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let h = tape.constant(x);
        let a = tape.value(rpr_attention(&ctx, h, &p, &no_mask(), 0).unwrap());
        let b = tape.value(rpr_attention(&ctx, h, &p, &no_mask(), shift).unwrap());
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn average_compression_ignores_order(rows in 1usize..7, seed: u64) {
        let k = matrix(rows, 3, seed, -1.0, 1.0);
        let v = matrix(rows, 2, seed ^ 5, -1.0, 1.0);
        let mut order: Vec<usize> = (0..rows).collect();
        Rng::new(seed).shuffle(&mut order);
        let pk = Tensor::from_fn(rows, 3, |i, j| k.at(order[i], j));
        let pv = Tensor::from_fn(rows, 2, |i, j| v.at(order[i], j));
        let (a, b) = (compress_memory(&k, &v, &CompressionRule::Average).unwrap(), compress_memory(&pk, &pv, &CompressionRule::Average).unwrap());
        for (x, y) in a.0.iter().chain(&a.1).zip(b.0.iter().chain(&b.1)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn scan_is_linear_and_causal(n in 2usize..12, alpha in -2.0f64..2.0, beta in -2.0f64..2.0, seed: u64) {
        let mut rng = Rng::new(seed);
        let cfg = SsmConfig { d_state: 3, ..SsmConfig::default() };
        let ds = discretize(&random_continuous(2, &cfg, &mut rng).unwrap(), Discretization::Zoh).unwrap();
        let s = Mat::from_fn(n, 2, |_, _| rng.gaussian());
        let t = Mat::from_fn(n, 2, |_, _| rng.gaussian());
        let combo = scan_recurrent(&ds, &(&s * alpha + &t * beta));
        let parts = scan_recurrent(&ds, &s) * alpha + scan_recurrent(&ds, &t) * beta;
        prop_assert!((combo - parts).abs().max() < 1e-9);
        let cut = n / 2;
        let mut future = s.clone();
        for i in cut..n {
            future[(i, 0)] += 1.0;
        }
        let (a, b) = (scan_recurrent(&ds, &s), scan_recurrent(&ds, &future));
        for i in 0..cut {
            prop_assert_eq!(a.row(i), b.row(i));
        }
    }

    #[test]
    fn layer_norm_shift_and_scale(shift in -5.0f64..5.0, scale in 0.1f64..10.0, seed: u64) {
        let x = matrix(3, 6, seed, -1.0, 1.0);
        let norm = |t: Tensor<f64>| {
            let tape = Tape::<f64>::inference();
            let (g, b) = (tape.constant(Tensor::full(1, 6, 1.0)), tape.constant(Tensor::zeros(1, 6)));
            let x = tape.constant(t);
            (*tape.value(tape.layer_norm(x, g, b, 0.0, NormDenom::SigmaPlusEps).unwrap())).clone()
        };
        let base = norm(x.clone());
        let shifted = norm(Tensor::from_fn(3, 6, |i, j| x.at(i, j) + shift));
        let scaled = norm(x.scale(scale));
        prop_assert!(base.max_abs_diff(&shifted) < 1e-9);
        prop_assert!(base.max_abs_diff(&scaled) < 1e-9);
    }

    #[test]
    fn weighted_sublayer_is_continuous(beta in 0.0f64..1.0, gamma in 0.0f64..1.0, seed: u64) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::<f64>::new();
        let ln = LNParams::new(&mut store, "ln", 4, 1e-6).unwrap();
        let p = FFNParams::new(&mut store, "ffn", 4, 8, 4, 1.0, &mut rng).unwrap();
        let x = Tensor::uniform(3, 4, -1.0, 1.0, &mut rng);
        let run = |b: f64, g: f64| {
            let tape = Tape::inference();
            let ctx = Ctx::new(&tape, &store);
            let z = tape.constant(x.clone());
            (*tape.value(sublayer_apply(&ctx, z, &ln, Norm::Weighted { beta: b, gamma: g }, |v| ffn(&ctx, v, &p)).unwrap())).clone()
        };
        let delta = 1e-6;
        let gap = run(beta, gamma).max_abs_diff(&run(beta + delta, gamma + delta));
        prop_assert!(gap < 1e3 * delta, "gap {}", gap);
    }

    #[test]
    fn top_k_ignores_logit_shift(logits in prop::collection::vec(-5.0f64..5.0, 2..10), shift in -50.0f64..50.0, k in 1usize..10) {
        let k = k.min(logits.len());
        let soft = |l: &[f64]| {
            let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = l.iter().map(|x| (x - mx).exp()).sum();
            l.iter().map(|x| (x - mx).exp() / z).collect::<Vec<_>>()
        };
        let moved: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        prop_assert_eq!(top_k(&soft(&logits), k), top_k(&soft(&moved), k));
    }

    #[test]
    fn vocab_is_a_bijection(text in "[a-z .,]{1,60}") {
        let v = Vocab::from_chars(&text);
        for id in 0..v.len() {
            prop_assert_eq!(v.id(v.token(id).unwrap()), Some(id));
        }
        prop_assert_eq!(v.decode(&v.encode_chars(&text)), text);
    }
}
