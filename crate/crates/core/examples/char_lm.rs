//! Trains the small character language model on the bundled corpus and
//! prints the loss curve. Usage: char_lm [steps] [pre|post] [lr0]

use xformer::blocks::Norm;
use xformer::embedding::Vocab;
use xformer::model::{Architecture, Model, ModelConfig};
use xformer::train::{corpus_sequences, make_batches, TrainConfig, Trainer};
use xformer::Rng;

fn main() -> xformer::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let norm = if args.get(2).map(String::as_str) == Some("pre") { Norm::Pre } else { Norm::Post };
    let lr0 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.05);

    let text = include_str!("../data/moby_dick.txt");
    let vocab = Vocab::from_chars(text);
    let cfg = ModelConfig::new(Architecture::DecoderOnly, 2, 64, 4, vocab.len()).with_norm(norm);
    let mut model = Model::<f32>::new(cfg, 7)?;
    let tc = TrainConfig {
        lr0,
        max_steps: steps,
        ..TrainConfig::default()
    };
    let seqs = corpus_sequences(&vocab.encode_chars(text), tc.seq_len);
    let mut batches = make_batches(&seqs, tc.batch_size, tc.sort_window, Rng::new(tc.seed))?;
    let mut trainer = Trainer::new(tc)?;
    let report = trainer.run(&mut model, &mut batches, Some(&vocab))?;
    for m in &report.metrics {
        println!("step {:5}  lr {:.2e}  loss {:.4}  {:.0} tok/s", m.step, m.lr, m.loss, m.tokens_per_sec);
    }
    println!("ln|V| = {:.4}; last-50 mean loss {:.4}; {:.1}s", (vocab.len() as f64).ln(), report.tail_loss(50), report.seconds);
    Ok(())
}
