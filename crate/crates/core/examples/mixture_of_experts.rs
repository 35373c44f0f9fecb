//! Routes a handful of tokens through a top-2 mixture of experts and shows
//! which experts each token used.

use xformer::blocks::{moe_ffn, MoEParams, Routing};
use xformer::{Ctx, ParamStore, Rng, Tape, Tensor};

fn main() -> xformer::Result<()> {
    let mut rng = Rng::new(11);
    let mut store = ParamStore::<f64>::new();
    for routing in [Routing::SoftmaxTopK, Routing::TopKSoftmax] {
        let p = MoEParams::new(&mut store, &format!("moe.{routing:?}"), 8, 16, 4, 2, routing, &mut rng)?;
        let x = Tensor::uniform(5, 8, -1.0, 1.0, &mut rng);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let out = moe_ffn(&ctx, tape.constant(x), &p)?;
        let w = tape.value(out.weights);
        println!("{routing:?}");
        for (i, sel) in out.selected.iter().enumerate() {
            let gates: Vec<String> = sel.iter().map(|&e| format!("e{e}={:.3}", w.at(i, e))).collect();
            println!("  token {i}: {}", gates.join(" "));
        }
    }
    Ok(())
}
