//! Pools encoder states into fixed-size sentence vectors and compares
//! sentences by cosine and Euclidean similarity.

use xformer::embedding::Vocab;
use xformer::model::{Architecture, Metric, Model, ModelConfig, Pooling};

fn main() -> xformer::Result<()> {
    let sentences = ["the whale rose", "the whale rose again", "a ship sank", "call me ishmael"];
    let vocab = Vocab::from_chars(&sentences.concat());
    let model = Model::<f64>::new(ModelConfig::new(Architecture::EncoderOnly, 2, 16, 2, vocab.len()), 8)?;
    let ids: Vec<Vec<usize>> = sentences.iter().map(|s| vocab.encode_chars(s)).collect();
    for (i, a) in ids.iter().enumerate() {
        for (j, b) in ids.iter().enumerate().skip(i + 1) {
            let cos = model.similarity(a, b, Pooling::Mean, Metric::Cosine)?;
            let euc = model.similarity(a, b, Pooling::Mean, Metric::Euclidean)?;
            println!("{:22} | {:22} cos {cos:.4} euclid {euc:.4}", sentences[i], sentences[j]);
        }
    }
    Ok(())
}
