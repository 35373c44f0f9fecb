//! Beam search on a small untrained model next to greedy decoding, with
//! and without length normalization.

use xformer::model::{Architecture, Model, ModelConfig};
use xformer::runtime::{beam_search, greedy_generate, SearchConfig};

fn main() -> xformer::Result<()> {
    let model = Model::<f64>::new(ModelConfig::new(Architecture::DecoderOnly, 2, 16, 2, 12), 4)?;
    let prompt = [5, 6];
    let base = SearchConfig { max_len: 8, ..SearchConfig::default() };
    println!("greedy      {:?}", greedy_generate(&model, None, &prompt, &base)?);
    for (beam, alpha) in [(1, 0.0), (4, 0.0), (4, 0.6)] {
        let cfg = SearchConfig { beam, alpha, ..base.clone() };
        let hyps = beam_search(&model, None, &prompt, &cfg)?;
        let best = &hyps[0];
        println!("beam {beam} a={alpha} {:?} logprob {:.3}", best.tokens, best.score);
    }
    Ok(())
}
