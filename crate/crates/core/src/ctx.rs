//! Forward-pass context shared by every layer: the tape, the parameter
//! store, and the optional quantization and training-mode state.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::Result;
use crate::tensor::{qmatmul, rounding_bound, Float, ParamId, ParamStore, QTensor, QuantSpec, QuantStats, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum QuantMode {
    Off,
    /// Projection matmuls run through the integer path.
    Quantize(u32),
    /// Float matmuls, each followed by a zero-valued probe so the
    /// sensitivity of outputs to rounding error can be read off by backward.
    Probe(u32),
}

/// A rounding-error injection point recorded in probe mode: the probe
/// variable and the elementwise worst-case rounding error at that point.
pub struct Probe<T: Float> {
    pub var: Var,
    pub bound: Tensor<T>,
}

pub struct Ctx<'a, T: Float = f32> {
    pub tape: &'a Tape<T>,
    pub store: &'a ParamStore<T>,
    quant: QuantMode,
    weights: RefCell<HashMap<ParamId, QTensor>>,
    probes: RefCell<Vec<Probe<T>>>,
    stats: RefCell<QuantStats>,
    rng: Option<RefCell<Rng>>,
}

impl<'a, T: Float> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>) -> Self {
        Ctx {
            tape,
            store,
            quant: QuantMode::Off,
            weights: RefCell::new(HashMap::new()),
            probes: RefCell::new(Vec::new()),
            stats: RefCell::new(QuantStats::default()),
            rng: None,
        }
    }

    /// Quantize projection matmuls to `bits`, calibrating each weight matrix
    /// and each activation by its max magnitude.
    pub fn quantized(mut self, bits: u32) -> Self {
        self.quant = QuantMode::Quantize(bits);
        self
    }

    /// Record probes for the first-order propagated rounding bound.
    pub fn probed(mut self, bits: u32) -> Self {
        self.quant = QuantMode::Probe(bits);
        self
    }

    /// Training mode: stochastic components (layer dropout) draw from `rng`.
    pub fn training(mut self, rng: Rng) -> Self {
        self.rng = Some(RefCell::new(rng));
        self
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Bernoulli draw in training mode; always `true` otherwise.
    pub fn keep(&self, p: f64) -> bool {
        match &self.rng {
            Some(r) => r.borrow_mut().bernoulli(p),
            None => true,
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn take_probes(&self) -> Vec<Probe<T>> {
        std::mem::take(&mut *self.probes.borrow_mut())
    }

    pub fn quant_stats(&self) -> QuantStats {
        *self.stats.borrow()
    }

    /// `x · W` for a projection weight. Under quantization this is the
    /// integer product; the output logit head should use `Tape::matmul`.
    pub fn linear(&self, x: Var, w: ParamId) -> Result<Var> {
        match self.quant {
            QuantMode::Off => self.tape.matmul(x, self.p(w)),
            QuantMode::Quantize(bits) => {
                let xv = self.tape.value(x);
                let mut stats = self.stats.borrow_mut();
                let qx = QTensor::quantize(&xv, QuantSpec::calibrate(xv.data(), bits)?, &mut stats);
                let mut cache = self.weights.borrow_mut();
                if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(w) {
                    let wv = self.store.get(w);
                    let q = QTensor::quantize(wv, QuantSpec::calibrate(wv.data(), bits)?, &mut stats);
                    e.insert(q);
                }
                let out = qmatmul::<T>(&qx, &cache[&w])?;
                Ok(self.tape.constant(out))
            }
            QuantMode::Probe(bits) => {
                let xv = self.tape.value(x);
                let wv = self.store.get(w);
                let sx = QuantSpec::calibrate(xv.data(), bits)?;
                let sw = QuantSpec::calibrate(wv.data(), bits)?;
                let bound = rounding_bound(&xv, wv, sx, sw)?.cast();
                let y = self.tape.matmul(x, self.p(w))?;
                let probe = self.tape.input(Tensor::zeros(xv.rows(), wv.cols()));
                self.probes.borrow_mut().push(Probe { var: probe, bound });
                self.tape.add(y, probe)
            }
        }
    }
}
