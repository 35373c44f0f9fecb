//! Builds the sparse attention fields, prints their density and compares
//! multiply-add counts against dense attention as n grows.

use xformer::attention::{dense_attention_counted, field_attention_counted, make_attention_field, FieldPattern, WorkCounter};
use xformer::{Rng, Tensor};

fn main() -> xformer::Result<()> {
    let patterns = [
        ("window:4", FieldPattern::Window { size: 4 }),
        ("chunked:4", FieldPattern::Chunked { size: 4 }),
        ("strided:3", FieldPattern::Strided { stride: 3 }),
        ("dilated:3x2", FieldPattern::Dilated { window: 3, dilation: 2 }),
        ("random:2", FieldPattern::Random { k: 2, seed: 9 }),
    ];
    for (name, p) in &patterns {
        let f = make_attention_field(p, 12, true)?;
        println!("{name:12} retained {:3} of 144, row 11 -> {:?}", f.retained(), f.row(11));
    }

    let mut rng = Rng::new(1);
    let d = 16;
    println!("\n{:>6} {:>12} {:>12}", "n", "window:16", "dense");
    for n in [128, 256, 512, 1024] {
        let q = Tensor::<f64>::gaussian(n, d, 1.0, &mut rng);
        let k = Tensor::<f64>::gaussian(n, d, 1.0, &mut rng);
        let v = Tensor::<f64>::gaussian(n, d, 1.0, &mut rng);
        let field = make_attention_field(&FieldPattern::Window { size: 16 }, n, true)?;
        let (mut sparse, mut dense) = (WorkCounter::default(), WorkCounter::default());
        field_attention_counted(&q, &k, &v, &field, &mut sparse)?;
        dense_attention_counted(&q, &k, &v, &mut dense)?;
        println!("{n:>6} {:>12} {:>12}", sparse.madds, dense.madds);
    }
    Ok(())
}
