//! Causal kernelized attention computed over the whole sequence and again
//! one token at a time from a constant-size running state.

use xformer::efficient::{kernelized_attention, FeatureMap, StreamState};
use xformer::{Rng, Tape, Tensor};

fn main() -> xformer::Result<()> {
    let (n, d, dv) = (10, 6, 4);
    let mut rng = Rng::new(3);
    let q = Tensor::<f64>::gaussian(n, d, 1.0, &mut rng);
    let k = Tensor::<f64>::gaussian(n, d, 1.0, &mut rng);
    let v = Tensor::<f64>::gaussian(n, dv, 1.0, &mut rng);

    let tape = Tape::inference();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let batch = tape.value(kernelized_attention(&tape, qv, kv, vv, FeatureMap::EluPlusOne, true)?);

    let mut state = StreamState::new(d, dv);
    let mut worst = 0.0f64;
    for i in 0..n {
        let out = state.step(k.row(i), v.row(i), q.row(i), FeatureMap::EluPlusOne)?;
        for (a, b) in out.iter().zip(batch.row(i)) {
            worst = worst.max((a - b).abs());
        }
    }
    println!("streamed {n} tokens with a {d}x{dv} state; max gap to batch output {worst:.2e}");
    Ok(())
}
