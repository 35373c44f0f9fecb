//! Model, search, training and command-line behaviour end to end.

use xformer::attention::{dense_attention_counted, WorkCounter};
use xformer::blocks::Norm;
use xformer::efficient::{kernelized_attention_counted, FeatureMap};
use xformer::embedding::{EOS, PAD, SOS};
use xformer::model::{Architecture, Model, ModelConfig};
use xformer::runtime::{beam_search, cli, greedy_generate, SearchConfig};
use xformer::train::{corpus_sequences, make_batches, Batch, TrainConfig, Trainer};
use xformer::{Ctx, Rng, Tape, Tensor};

fn small(arch: Architecture, norm: Norm) -> ModelConfig {
    let mut c = ModelConfig::new(arch, 2, 8, 2, 12).with_norm(norm);
    c.d_ffn = 16;
    c
}

#[test]
fn decoder_only_is_encoder_decoder_without_cross_attention() {
    let dec = Model::<f64>::new(small(Architecture::DecoderOnly, Norm::Pre), 3).unwrap();
    let mut ed = Model::<f64>::new(small(Architecture::EncoderDecoder, Norm::Pre), 4).unwrap();
    for id in dec.store.ids() {
        let other = ed.store.find(dec.store.name(id)).unwrap();
        ed.store.set(other, dec.store.get(id).clone());
    }
    // A zero cross-attention output turns the pre-norm cross sub-layer into the identity.
    for l in 0..2 {
        let wc = ed.store.find(&format!("dec.{l}.cross.wc")).unwrap();
        let (r, c) = (ed.store.get(wc).rows(), ed.store.get(wc).cols());
        ed.store.set(wc, Tensor::zeros(r, c));
    }
    let x = [SOS, 6, 9, 7, 11, 5];
    let src = [8usize, 10, 6];
    let tape = Tape::inference();
    let a = tape.value(dec.decoder_logits(&Ctx::new(&tape, &dec.store), None, &[&x]).unwrap());
    let tape2 = Tape::inference();
    let b = tape2.value(ed.decoder_logits(&Ctx::new(&tape2, &ed.store), Some(&[&src]), &[&x]).unwrap());
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn cached_and_uncached_search_agree() {
    for arch in [Architecture::DecoderOnly, Architecture::EncoderDecoder] {
        let m = Model::<f64>::new(small(arch, Norm::Post), 5).unwrap();
        let src = [6usize, 7, 8];
        let src = (arch == Architecture::EncoderDecoder).then_some(&src[..]);
        let cached = SearchConfig {
            beam: 3,
            max_len: 10,
            ..SearchConfig::default()
        };
        let fresh = SearchConfig { use_cache: false, ..cached.clone() };
        assert_eq!(greedy_generate(&m, src, &[9], &cached).unwrap(), greedy_generate(&m, src, &[9], &fresh).unwrap());
        let a: Vec<Vec<usize>> = beam_search(&m, src, &[9], &cached).unwrap().into_iter().map(|h| h.tokens).collect();
        let b: Vec<Vec<usize>> = beam_search(&m, src, &[9], &fresh).unwrap().into_iter().map(|h| h.tokens).collect();
        assert_eq!(a, b);
    }
}

#[test]
fn step_distributions_and_prefix_scores() {
    let m = Model::<f64>::new(small(Architecture::DecoderOnly, Norm::Post), 6).unwrap();
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &m.store);
    let mut st = m.start_decode(&ctx, None).unwrap();
    let mut prefix = vec![SOS];
    for t in [5, 8, 11, 6, 7] {
        let p = m.decode_step(&ctx, &mut st, &prefix).unwrap();
        assert!(p.iter().all(|&x| x >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prefix.push(t);
    }
    let y = &prefix[1..];
    let scores: Vec<f64> = (1..=y.len()).map(|k| m.sequence_logprob(&ctx, None, &y[..k]).unwrap()).collect();
    assert!(scores[0] <= 0.0);
    assert!(scores.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn training_is_deterministic_and_starts_near_uniform() {
    let text = "call me ishmael. some years ago, never mind how long precisely, having little money in my purse.";
    let vocab = xformer::embedding::Vocab::from_chars(text);
    let run = || {
        let mut m = Model::<f32>::new(ModelConfig::new(Architecture::DecoderOnly, 1, 16, 2, vocab.len()), 1).unwrap();
        let tc = TrainConfig {
            batch_size: 4,
            seq_len: 16,
            max_steps: 6,
            warmup: 3,
            ..TrainConfig::default()
        };
        let seqs = corpus_sequences(&vocab.encode_chars(text), tc.seq_len);
        let mut batches = make_batches(&seqs, tc.batch_size, tc.sort_window, Rng::new(tc.seed)).unwrap();
        Trainer::new(tc).unwrap().run(&mut m, &mut batches, None).unwrap().losses
    };
    let (a, b) = (run(), run());
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    let ln_v = (vocab.len() as f64).ln();
    assert!((a[0] - ln_v).abs() < 0.05 * ln_v, "{} vs {ln_v}", a[0]);
}

#[test]
fn corpus_rows_end_with_eos_and_pads_carry_no_weight() {
    let seqs = corpus_sequences(&[5, 6, 7, 8, 9, 10, 11], 4);
    assert!(seqs.iter().all(|s| s.last() == Some(&EOS)));
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let b = Batch::from_sequences(&refs).unwrap();
    let (targets, w) = b.targets();
    for (t, w) in targets.iter().zip(&w) {
        assert_eq!(*t == PAD, *w == 0.0);
    }
}

#[test]
fn work_counters_follow_their_formulas() {
    let (d, dv) = (6usize, 4usize);
    let mut rng = Rng::new(2);
    for n in [16usize, 32, 64] {
        let q = Tensor::<f64>::uniform(n, d, -1.0, 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(n, d, -1.0, 1.0, &mut rng);
        let v = Tensor::<f64>::uniform(n, dv, -1.0, 1.0, &mut rng);
        let (mut lin, mut dense) = (WorkCounter::default(), WorkCounter::default());
        kernelized_attention_counted(&q, &k, &v, FeatureMap::EluPlusOne, &mut lin).unwrap();
        dense_attention_counted(&q, &k, &v, &mut dense).unwrap();
        let lin_formula = (n * (2 * d * dv + 2 * d)) as f64;
        let dense_formula = (n * n * (d + dv)) as f64;
        assert!((lin.madds as f64 / lin_formula - 1.0).abs() < 0.1);
        assert!((dense.madds as f64 / dense_formula - 1.0).abs() < 0.1);
    }
}

fn cli_out(args: &[&str]) -> String {
    let mut buf = Vec::new();
    cli::run(args.iter().copied(), &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn cli_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let metrics = dir.path().join("metrics.csv");
    let cfg = dir.path().join("model.cfg");
    std::fs::write(&cfg, "model.d: 16\nmodel.heads: 2\nmodel.layers: 1\ntrain.batch_size: 4\ntrain.log_every: 1\n").unwrap();
    let ck = ckpt.to_str().unwrap();
    let trained = cli_out(&["xformer", "train", "--config", cfg.to_str().unwrap(), "--out", ck, "--metrics", metrics.to_str().unwrap(), "--steps", "4"]);
    assert!(trained.contains("trained 4 steps"));
    assert_eq!(std::fs::read_to_string(&metrics).unwrap().lines().count(), 5);

    let text = cli_out(&["xformer", "generate", "--checkpoint", ck, "--prompt", "the ", "--max-len", "8"]);
    assert!(text.starts_with("the "));
    let beam = cli_out(&["xformer", "generate", "--checkpoint", ck, "--prompt", "a", "--max-len", "5", "--beam", "3"]);
    assert!(beam.starts_with('a'));
    let quant = cli_out(&["xformer", "generate", "--checkpoint", ck, "--prompt", "a", "--max-len", "5", "--quant-bits", "16"]);
    assert!(quant.starts_with('a'));
    assert_eq!(cli_out(&["xformer", "encode", "--checkpoint", ck, "--text", "whale"]).trim().split(',').count(), 16);
    assert!(cli_out(&["xformer", "score", "--checkpoint", ck, "--text", "whale"]).starts_with("logprob -"));
    let inspect = cli_out(&["xformer", "inspect", "--checkpoint", ck]);
    assert!(inspect.contains("model.d: 16"));
    let oracle = cli_out(&["xformer", "oracle", "--family", "matmul_loop"]);
    assert!(oracle.lines().nth(1).unwrap().starts_with("matmul_loop,"));
}

#[test]
fn cli_rejects_encoder_only_training_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "model.arch: encoder-only\n").unwrap();
    let out = dir.path().join("x.ckpt");
    let mut buf = Vec::new();
    let r = cli::run(["xformer", "train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--steps", "1"], &mut buf);
    assert!(matches!(r, Err(xformer::Error::Config(_))));
}
