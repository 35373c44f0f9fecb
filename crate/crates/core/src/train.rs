//! Training: warmup schedule, padded batches, Adam, gradient clipping and
//! chunk-wise training against a frozen previous chunk.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use crate::ctx::Ctx;
use crate::embedding::{Vocab, EOS, PAD, SOS};
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::tensor::{Float, ParamId, ParamStore, Rng, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub warmup: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub clip: Option<f64>,
    /// Chunk length for chunk-wise training; `None` trains on whole rows.
    pub chunk: Option<usize>,
    /// Characters per training sequence, EOS included.
    pub seq_len: usize,
    /// Batches per sort window when bucketing by length.
    pub sort_window: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub log_every: usize,
    pub metrics: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.05,
            warmup: 200,
            batch_size: 16,
            max_steps: 2000,
            seed: 1,
            clip: Some(1.0),
            chunk: None,
            seq_len: 64,
            sort_window: 8,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            log_every: 50,
            metrics: None,
            checkpoint_every: 0,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup == 0 {
            return Err(Error::Config("warmup must be at least one step".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.batch_size == 0 || self.seq_len < 2 {
            return Err(Error::Config("batch size and sequence length must be positive".into()));
        }
        if self.chunk == Some(0) {
            return Err(Error::Config("chunk length must be positive".into()));
        }
        Ok(())
    }

    /// Reads `train.*` keys over the defaults.
    pub fn from_config(c: &crate::config::Config) -> Result<Self> {
        let d = TrainConfig::default();
        let clip: f64 = c.get_or("train.clip", d.clip.unwrap_or(0.0))?;
        let chunk: usize = c.get_or("train.chunk", 0)?;
        let t = TrainConfig {
            lr0: c.get_or("train.lr0", d.lr0)?,
            warmup: c.get_or("train.warmup", d.warmup)?,
            batch_size: c.get_or("train.batch_size", d.batch_size)?,
            max_steps: c.get_or("train.max_steps", d.max_steps)?,
            seed: c.get_or("train.seed", d.seed)?,
            clip: (clip > 0.0).then_some(clip),
            chunk: (chunk > 0).then_some(chunk),
            seq_len: c.get_or("train.seq_len", d.seq_len)?,
            sort_window: c.get_or("train.sort_window", d.sort_window)?,
            beta1: c.get_or("train.beta1", d.beta1)?,
            beta2: c.get_or("train.beta2", d.beta2)?,
            eps: c.get_or("train.eps", d.eps)?,
            log_every: c.get_or("train.log_every", d.log_every)?,
            checkpoint_every: c.get_or("train.checkpoint_every", d.checkpoint_every)?,
            ..d
        };
        t.validate()?;
        Ok(t)
    }
}

/// lr0 · min(step^−0.5, step · warmup^−1.5), for step ≥ 1.
pub fn lr_schedule(step: usize, lr0: f64, warmup: usize) -> f64 {
    let s = step.max(1) as f64;
    lr0 * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5))
}

/// Rows padded to the longest sequence in the batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub rows: usize,
    pub width: usize,
    /// rows×width, PAD-filled.
    pub tokens: Vec<usize>,
    pub pad: Vec<bool>,
}

impl Batch {
    pub fn from_sequences(seqs: &[&[usize]]) -> Result<Self> {
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(seqs.len() * width);
        for s in seqs {
            if s.contains(&PAD) {
                return Err(Error::Contract("sequences may not contain PAD".into()));
            }
            tokens.extend_from_slice(s);
            tokens.extend(std::iter::repeat_n(PAD, width - s.len()));
        }
        let pad = tokens.iter().map(|&t| t == PAD).collect();
        Ok(Batch {
            rows: seqs.len(),
            width,
            tokens,
            pad,
        })
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.width..(i + 1) * self.width]
    }

    pub fn pad_count(&self, i: usize) -> usize {
        self.pad[i * self.width..(i + 1) * self.width].iter().filter(|&&p| p).count()
    }

    /// Decoder inputs: SOS followed by the row shifted right by one.
    pub fn inputs(&self) -> Vec<Vec<usize>> {
        (0..self.rows)
            .map(|i| {
                let r = self.row(i);
                std::iter::once(SOS).chain(r[..r.len() - 1].iter().copied()).collect()
            })
            .collect()
    }

    /// Targets row-major; PAD positions get weight 0.
    pub fn targets(&self) -> (&[usize], Vec<f64>) {
        (&self.tokens, self.pad.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect())
    }

    pub fn real_tokens(&self) -> usize {
        self.pad.iter().filter(|&&p| !p).count()
    }
}

/// Endless deterministic batch stream: each epoch shuffles the sequences,
/// then sorts every window of `sort_window` batches by length before
/// cutting it into batches.
pub struct Batches<'a> {
    seqs: &'a [Vec<usize>],
    size: usize,
    window: usize,
    rng: Rng,
    queue: std::collections::VecDeque<Vec<usize>>,
}

pub fn make_batches(seqs: &[Vec<usize>], size: usize, sort_window: usize, rng: Rng) -> Result<Batches<'_>> {
    if seqs.is_empty() || size == 0 {
        return Err(Error::Contract("batching needs sequences and a positive batch size".into()));
    }
    Ok(Batches {
        seqs,
        size,
        window: sort_window.max(1),
        rng,
        queue: Default::default(),
    })
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.queue.is_empty() {
            let mut order: Vec<usize> = (0..self.seqs.len()).collect();
            self.rng.shuffle(&mut order);
            for win in order.chunks(self.size * self.window) {
                let mut w = win.to_vec();
                w.sort_by_key(|&i| self.seqs[i].len());
                for b in w.chunks(self.size) {
                    self.queue.push_back(b.to_vec());
                }
            }
            let mut cut: Vec<Vec<usize>> = self.queue.drain(..).collect();
            self.rng.shuffle(&mut cut);
            self.queue.extend(cut);
        }
        let idx = self.queue.pop_front()?;
        let rows: Vec<&[usize]> = idx.iter().map(|&i| self.seqs[i].as_slice()).collect();
        Batch::from_sequences(&rows).ok()
    }
}

/// Cuts encoded text into sequences of `seq_len − 1` tokens plus EOS.
pub fn corpus_sequences(ids: &[usize], seq_len: usize) -> Vec<Vec<usize>> {
    ids.chunks(seq_len - 1)
        .filter(|c| !c.is_empty())
        .map(|c| c.iter().copied().chain(std::iter::once(EOS)).collect())
        .collect()
}

/// Mean next-token loss of a decoder-only model over a batch.
pub fn batch_loss<T: Float>(ctx: &Ctx<T>, model: &Model<T>, batch: &Batch) -> Result<crate::tensor::Var> {
    if model.cfg.arch != Architecture::DecoderOnly {
        return Err(Error::Config("batch training expects a decoder-only model".into()));
    }
    let inputs = batch.inputs();
    let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
    let logits = model.decoder_logits(ctx, None, &refs)?;
    let (targets, w) = batch.targets();
    let w: Vec<T> = w.into_iter().map(T::of).collect();
    ctx.tape.cross_entropy(logits, targets, &w)
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: HashMap<ParamId, Tensor<T>>,
    pub v: HashMap<ParamId, Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Float> AdamState<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: HashMap::new(),
            v: HashMap::new(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step<T: Float>(store: &mut ParamStore<T>, grads: &HashMap<ParamId, Tensor<T>>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let mut ids: Vec<&ParamId> = grads.keys().collect();
    ids.sort();
    for &id in ids {
        let g = &grads[&id];
        let w = store.get_mut(id);
        if !w.same_shape(g) {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!("gradient {:?} for parameter {:?}", g.shape(), w.shape()),
            });
        }
        let m = state.m.entry(id).or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
        let v = state.v.entry(id).or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
        for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let gf = gi.as_f64();
            let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
            let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
            *mi = T::of(mf);
            *vi = T::of(vf);
            let upd = lr * (mf / c1) / ((vf / c2).sqrt() + state.eps);
            *wi = T::of(wi.as_f64() - upd);
        }
    }
    Ok(())
}

pub fn global_norm<T: Float>(grads: &HashMap<ParamId, Tensor<T>>) -> f64 {
    grads.values().flat_map(|g| g.data().iter()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

/// Rescales so the global norm is at most `max`; returns the norm before.
pub fn clip_gradients<T: Float>(grads: &mut HashMap<ParamId, Tensor<T>>, max: f64) -> f64 {
    let n = global_norm(grads);
    if n > max && n > 0.0 {
        let s = T::of(max / n);
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    n
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub tokens_per_sec: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub metrics: Vec<StepMetrics>,
    pub floor_hits: usize,
    pub seconds: f64,
}

impl TrainReport {
    /// Mean of the last `n` step losses.
    pub fn tail_loss(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len()).max(1);
        self.losses[self.losses.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
    }
}

pub struct Trainer<T: Float> {
    pub cfg: TrainConfig,
    pub adam: AdamState<T>,
    pub step: usize,
    rng: Rng,
}

impl<T: Float> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            adam: AdamState::new(cfg.beta1, cfg.beta2, cfg.eps),
            rng: Rng::new(cfg.seed ^ 0x5eed),
            step: 0,
            cfg,
        })
    }

    /// Forward, backward and update on one batch. Returns the loss.
    pub fn step(&mut self, model: &mut Model<T>, batch: &Batch) -> Result<(f64, usize)> {
        let tape = Tape::new();
        let (loss, mut grads) = {
            let ctx = Ctx::new(&tape, &model.store).training(self.rng.split());
            let loss = match self.cfg.chunk {
                Some(nc) => return self.chunked_step(model, batch, nc),
                None => batch_loss(&ctx, model, batch)?,
            };
            let l = tape.value(loss).at(0, 0).as_f64();
            (l, tape.backward(loss)?.into_params())
        };
        self.apply(model, &mut grads)?;
        Ok((loss, tape.floor_hits()))
    }

    fn apply(&mut self, model: &mut Model<T>, grads: &mut HashMap<ParamId, Tensor<T>>) -> Result<()> {
        self.step += 1;
        if let Some(c) = self.cfg.clip {
            clip_gradients(grads, c);
        }
        let lr = lr_schedule(self.step, self.cfg.lr0, self.cfg.warmup);
        adam_step(&mut model.store, grads, &mut self.adam, lr)
    }

    /// One update per chunk, left to right. Each chunk attends to the cached
    /// keys and values of the previous chunk, which carry no gradient.
    fn chunked_step(&mut self, model: &mut Model<T>, batch: &Batch, nc: usize) -> Result<(f64, usize)> {
        let inputs = batch.inputs();
        let (targets, weights) = batch.targets();
        let mut states = Vec::with_capacity(batch.rows);
        {
            let tape = Tape::<T>::inference();
            let ctx = Ctx::new(&tape, &model.store);
            for _ in 0..batch.rows {
                states.push(model.start_decode(&ctx, None)?);
            }
        }
        let (mut total, mut norm, mut hits) = (0.0, 0.0, 0);
        let mut start = 0;
        while start < batch.width {
            let len = nc.min(batch.width - start);
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &model.store).training(self.rng.split());
            let mut logits = Vec::with_capacity(batch.rows);
            let mut tg = Vec::new();
            let mut w = Vec::new();
            for (r, st) in states.iter_mut().enumerate() {
                st.truncate(nc)?;
                logits.push(model.forward_cached(&ctx, st, &inputs[r][start..start + len])?);
                tg.extend_from_slice(&targets[r * batch.width + start..r * batch.width + start + len]);
                w.extend(weights[r * batch.width + start..r * batch.width + start + len].iter().map(|&x| T::of(x)));
            }
            let all = tape.concat_rows(&logits)?;
            let loss = tape.cross_entropy(all, &tg, &w)?;
            let wsum: f64 = w.iter().map(|x| x.as_f64()).sum();
            total += tape.value(loss).at(0, 0).as_f64() * wsum;
            norm += wsum;
            hits += tape.floor_hits();
            let mut grads = tape.backward(loss)?.into_params();
            drop(ctx);
            self.apply(model, &mut grads)?;
            start += len;
        }
        Ok((if norm > 0.0 { total / norm } else { 0.0 }, hits))
    }

    /// Runs `cfg.max_steps` updates from `batches`, writing metrics and
    /// checkpoints when configured.
    pub fn run(&mut self, model: &mut Model<T>, batches: &mut dyn Iterator<Item = Batch>, vocab: Option<&Vocab>) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        let mut csv = match &self.cfg.metrics {
            Some(p) => {
                let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
                writeln!(f, "step,lr,loss,tokens_per_sec")?;
                Some(f)
            }
            None => None,
        };
        let t0 = Instant::now();
        let mut tick = Instant::now();
        let mut tokens = 0usize;
        for _ in 0..self.cfg.max_steps {
            let batch = batches.next().ok_or(Error::EmptySource)?;
            let (loss, hits) = self.step(model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Degenerate(format!("loss became {loss} at step {}", self.step)));
            }
            report.floor_hits += hits;
            report.losses.push(loss);
            tokens += batch.real_tokens();
            let every = self.cfg.log_every.max(1);
            if self.step.is_multiple_of(every) || self.step == 1 {
                let dt = tick.elapsed().as_secs_f64().max(1e-9);
                let m = StepMetrics {
                    step: self.step,
                    lr: lr_schedule(self.step, self.cfg.lr0, self.cfg.warmup),
                    loss,
                    tokens_per_sec: tokens as f64 / dt,
                };
                if let Some(f) = csv.as_mut() {
                    writeln!(f, "{},{:.6e},{:.6},{:.1}", m.step, m.lr, m.loss, m.tokens_per_sec)?;
                }
                report.metrics.push(m);
                tick = Instant::now();
                tokens = 0;
            }
            if let (Some(path), Some(v)) = (&self.cfg.checkpoint, vocab) {
                if self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every) {
                    crate::runtime::save_checkpoint(&model.cast::<f32>(), v, path)?;
                }
            }
        }
        if let Some(f) = csv.as_mut() {
            f.flush()?;
        }
        report.seconds = t0.elapsed().as_secs_f64();
        Ok(report)
    }
}

/// Trains a decoder-only model with chunk-wise updates.
pub fn train_chunked<T: Float>(model: &mut Model<T>, seqs: &[Vec<usize>], cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.chunk.is_none() {
        return Err(Error::Config("chunked training needs a chunk length".into()));
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut batches = make_batches(seqs, cfg.batch_size, cfg.sort_window, Rng::new(cfg.seed))?;
    trainer.run(model, &mut batches, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        let p = lr_schedule(4000, 1.0, 4000);
        assert!((p - 4000f64.powf(-0.5)).abs() < 1e-15);
        assert!((lr_schedule(1, 1.0, 4000) - 4000f64.powf(-1.5)).abs() < 1e-18);
        assert!(lr_schedule(3999, 1.0, 4000) < p && lr_schedule(4001, 1.0, 4000) < p);
    }

    #[test]
    fn padded_block_layout() {
        let s: Vec<Vec<usize>> = vec![vec![5, 6, 7, 8, 9, 10], vec![11, 12], vec![13, 14, 15], vec![16, 17, 18, 19]];
        let refs: Vec<&[usize]> = s.iter().map(Vec::as_slice).collect();
        let b = Batch::from_sequences(&refs).unwrap();
        assert_eq!((b.rows, b.width), (4, 6));
        assert_eq!((0..4).map(|i| b.pad_count(i)).collect::<Vec<_>>(), vec![0, 4, 3, 2]);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full(2, 2, 1.5));
        let mut st = AdamState::new(0.9, 0.98, 1e-9);
        let g = HashMap::from([(id, Tensor::zeros(2, 2))]);
        adam_step(&mut store, &g, &mut st, 0.1).unwrap();
        assert_eq!(store.get(id), &Tensor::full(2, 2, 1.5));
    }

    #[test]
    fn clip_hits_threshold() {
        let mut g = HashMap::from([(ParamId(0), Tensor::<f64>::full(3, 1, 2.0))]);
        clip_gradients(&mut g, 0.5);
        assert!((global_norm(&g) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn batches_are_deterministic() {
        let seqs: Vec<Vec<usize>> = (1..20).map(|n| vec![5; n]).collect();
        let a: Vec<Batch> = make_batches(&seqs, 4, 2, Rng::new(3)).unwrap().take(10).collect();
        let b: Vec<Batch> = make_batches(&seqs, 4, 2, Rng::new(3)).unwrap().take(10).collect();
        assert_eq!(a, b);
    }
}
