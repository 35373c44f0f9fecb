//! Saves a model with its vocabulary and reloads it, confirming that the
//! reloaded copy scores text identically.

use xformer::embedding::Vocab;
use xformer::model::{Architecture, Model, ModelConfig};
use xformer::runtime::{read_checkpoint, write_checkpoint};
use xformer::{Ctx, Tape};

fn main() -> xformer::Result<()> {
    let text = "it is not down in any map; true places never are.";
    let vocab = Vocab::from_chars(text);
    let model = Model::<f32>::new(ModelConfig::new(Architecture::DecoderOnly, 2, 16, 2, vocab.len()), 6)?;
    let bytes = write_checkpoint(&model, &vocab)?;
    let (back, back_vocab) = read_checkpoint(&bytes)?;
    let ids = vocab.encode_chars("true places");
    let score = |m: &Model<f32>| {
        let tape = Tape::inference();
        m.sequence_logprob(&Ctx::new(&tape, &m.store), None, &ids)
    };
    println!("{} bytes, vocab {} -> {}", bytes.len(), vocab.len(), back_vocab.len());
    println!("logprob before {:.6} after {:.6}", score(&model)?, score(&back)?);
    Ok(())
}
