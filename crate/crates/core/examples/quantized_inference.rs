//! Runs greedy generation with fixed-point matrix products at several
//! widths and checks logit changes against the propagated rounding bounds.

use xformer::embedding::SOS;
use xformer::model::{Architecture, Model, ModelConfig};
use xformer::runtime::{greedy_generate, logit_bound_check, quantized_infer, SearchConfig};

fn main() -> xformer::Result<()> {
    let mut cfg = ModelConfig::new(Architecture::DecoderOnly, 2, 32, 4, 20);
    cfg.wo_gain = 1.0;
    let model = Model::<f32>::new(cfg, 2)?;
    let search = SearchConfig { beam: 1, max_len: 24, stop_at_eos: false, ..SearchConfig::default() };
    let reference = greedy_generate(&model, None, &[7], &search)?;
    println!("float  {reference:?}");
    for bits in [16, 10, 8, 6] {
        let q = quantized_infer(&model, None, &[7], bits, &search)?;
        let differ = q.iter().zip(&reference).filter(|(a, b)| a != b).count();
        let prefix: Vec<usize> = std::iter::once(SOS).chain([7]).chain(reference.iter().copied().take(8)).collect();
        let r = logit_bound_check(&model, None, &prefix, bits)?;
        println!(
            "{bits:2} bit {differ:2} tokens differ; max logit change {:.2e} under bound {:.2e}, {} of {} entries over",
            r.max_delta, r.max_bound, r.violations, r.entries
        );
    }
    Ok(())
}
