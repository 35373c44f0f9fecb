use super::search::{greedy_quantized, SearchConfig};
use crate::ctx::Ctx;
use crate::error::Result;
use crate::model::Model;
use crate::tensor::{Float, Tape};

/// Greedy decoding with every projection matmul run on `bits`-bit
/// integers. The logit head, norms and softmax stay in floats.
pub fn quantized_infer<T: Float>(model: &Model<T>, src: Option<&[usize]>, prompt: &[usize], bits: u32, cfg: &SearchConfig) -> Result<Vec<usize>> {
    greedy_quantized(model, src, prompt, cfg, bits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    /// max over positions and tokens of |quantized logit − float logit|.
    pub max_delta: f64,
    /// Largest propagated bound.
    pub max_bound: f64,
    /// Entries whose observed change exceeds their own bound.
    pub violations: usize,
    pub entries: usize,
}

/// Compares quantized against float logits along `prefix` (which starts
/// with SOS) and checks each change against the first-order propagation of
/// the per-matmul rounding bounds: Σ_probes Σ |∂logit/∂probe| · bound.
pub fn logit_bound_check<T: Float>(model: &Model<T>, src: Option<&[usize]>, prefix: &[usize], bits: u32) -> Result<BoundReport> {
    let srcs = src.map(|s| vec![s]);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store).probed(bits);
    let logits = model.decoder_logits(&ctx, srcs.as_deref(), &[prefix])?;
    let probes = ctx.take_probes();
    let float = tape.value(logits);

    let qtape = Tape::inference();
    let qctx = Ctx::new(&qtape, &model.store).quantized(bits);
    let quant = qtape.value(model.decoder_logits(&qctx, srcs.as_deref(), &[prefix])?);

    let mut report = BoundReport {
        max_delta: 0.0,
        max_bound: 0.0,
        violations: 0,
        entries: 0,
    };
    for i in 0..float.rows() {
        let row = tape.slice_rows(logits, i, 1)?;
        for j in 0..float.cols() {
            let cell = tape.slice_cols(row, j, 1)?;
            let g = tape.backward(cell)?;
            let mut bound = 0.0;
            for p in &probes {
                if let Some(gp) = g.wrt(p.var) {
                    bound += gp.data().iter().zip(p.bound.data()).map(|(a, b)| a.as_f64().abs() * b.as_f64()).sum::<f64>();
                }
            }
            let delta = (quant.at(i, j).as_f64() - float.at(i, j).as_f64()).abs();
            report.max_delta = report.max_delta.max(delta);
            report.max_bound = report.max_bound.max(bound);
            report.entries += 1;
            if delta > bound {
                report.violations += 1;
            }
        }
    }
    Ok(report)
}
