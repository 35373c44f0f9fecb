use crate::ctx::Ctx;
use crate::embedding::{EOS, SOS};
use crate::error::{Error, Result};
use crate::model::{DecodeState, Model};
use crate::tensor::{log_softmax_rows, Float, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub beam: usize,
    /// Maximum number of generated tokens.
    pub max_len: usize,
    /// Length-normalization exponent: hypotheses rank by score / len^α.
    pub alpha: f64,
    /// Retire hypotheses that emit EOS. Off, every hypothesis runs to max_len.
    pub stop_at_eos: bool,
    pub use_cache: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beam: 4,
            max_len: 64,
            alpha: 0.0,
            stop_at_eos: true,
            use_cache: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis<T: Float = f32> {
    /// Generated tokens after the prompt.
    pub tokens: Vec<usize>,
    /// Sum of the stepwise log-probabilities of `tokens`.
    pub score: f64,
    pub finished: bool,
    state: Option<DecodeState<T>>,
}

impl<T: Float> Hypothesis<T> {
    pub fn normalized(&self, alpha: f64) -> f64 {
        if alpha == 0.0 || self.tokens.is_empty() {
            self.score
        } else {
            self.score / (self.tokens.len() as f64).powf(alpha)
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Next-token log-probabilities after `prefix` (SOS + prompt + generated).
struct Stepper<'m, T: Float> {
    model: &'m Model<T>,
    src: Option<&'m [usize]>,
    quant: Option<u32>,
}

impl<T: Float> Stepper<'_, T> {
    fn ctx<'a>(&'a self, tape: &'a Tape<T>) -> Ctx<'a, T> {
        let c = Ctx::new(tape, &self.model.store);
        match self.quant {
            Some(b) => c.quantized(b),
            None => c,
        }
    }

    fn start(&self) -> Result<Option<DecodeState<T>>> {
        let tape = Tape::inference();
        Ok(Some(self.model.start_decode(&self.ctx(&tape), self.src)?))
    }

    fn logprobs(&self, state: &mut Option<DecodeState<T>>, prefix: &[usize]) -> Result<Vec<f64>> {
        let tape = Tape::inference();
        let ctx = self.ctx(&tape);
        let logits = match state {
            Some(st) => {
                let from = st.pos;
                let l = self.model.forward_cached(&ctx, st, &prefix[from..])?;
                let n = tape.shape(l).0;
                tape.slice_rows(l, n - 1, 1)?
            }
            None => {
                let srcs = self.src.map(|s| vec![s]);
                let l = self.model.decoder_logits(&ctx, srcs.as_deref(), &[prefix])?;
                tape.slice_rows(l, prefix.len() - 1, 1)?
            }
        };
        Ok(log_softmax_rows(&tape.value(logits)).data().iter().map(|x| x.as_f64()).collect())
    }
}

fn prefix_of(prompt: &[usize], generated: &[usize]) -> Vec<usize> {
    std::iter::once(SOS).chain(prompt.iter().copied()).chain(generated.iter().copied()).collect()
}

fn greedy_impl<T: Float>(st: &Stepper<'_, T>, prompt: &[usize], cfg: &SearchConfig) -> Result<Vec<usize>> {
    let mut state = if cfg.use_cache { st.start()? } else { None };
    let mut out = Vec::new();
    while out.len() < cfg.max_len {
        let lp = st.logprobs(&mut state, &prefix_of(prompt, &out))?;
        let t = argmax(&lp);
        out.push(t);
        if cfg.stop_at_eos && t == EOS {
            break;
        }
    }
    Ok(out)
}

/// Argmax decoding until EOS or `cfg.max_len` tokens. `src` is required
/// for encoder-decoder models; `prompt` continues after SOS.
pub fn greedy_generate<T: Float>(model: &Model<T>, src: Option<&[usize]>, prompt: &[usize], cfg: &SearchConfig) -> Result<Vec<usize>> {
    model.check_tokens(prompt)?;
    greedy_impl(&Stepper { model, src, quant: None }, prompt, cfg)
}

pub(crate) fn greedy_quantized<T: Float>(model: &Model<T>, src: Option<&[usize]>, prompt: &[usize], cfg: &SearchConfig, bits: u32) -> Result<Vec<usize>> {
    model.check_tokens(prompt)?;
    greedy_impl(&Stepper { model, src, quant: Some(bits) }, prompt, cfg)
}

/// Beam search. Returns finished hypotheses (and any still live at
/// `max_len`) best first by length-normalized score.
pub fn beam_search<T: Float>(model: &Model<T>, src: Option<&[usize]>, prompt: &[usize], cfg: &SearchConfig) -> Result<Vec<Hypothesis<T>>> {
    if cfg.beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    model.check_tokens(prompt)?;
    let st = Stepper { model, src, quant: None };
    let state = if cfg.use_cache { st.start()? } else { None };
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
        state,
    }];
    let mut done: Vec<Hypothesis<T>> = Vec::new();
    for _ in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let mut cands: Vec<(f64, usize, usize, f64)> = Vec::new();
        for (h, hyp) in live.iter_mut().enumerate() {
            let lp = st.logprobs(&mut hyp.state, &prefix_of(prompt, &hyp.tokens))?;
            for (tok, &l) in lp.iter().enumerate() {
                let score = hyp.score + l;
                let len = (hyp.tokens.len() + 1) as f64;
                let norm = if cfg.alpha == 0.0 { score } else { score / len.powf(cfg.alpha) };
                cands.push((norm, h, tok, score));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(cfg.beam);
        let mut next = Vec::with_capacity(cands.len());
        for (_, h, tok, score) in cands {
            let parent = &live[h];
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            let finished = cfg.stop_at_eos && tok == EOS;
            let hyp = Hypothesis {
                tokens,
                score,
                finished,
                state: if finished { None } else { parent.state.clone() },
            };
            if finished {
                done.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
    }
    for mut h in live {
        h.finished = true;
        h.state = None;
        done.push(h);
    }
    done.sort_by(|a, b| b.normalized(cfg.alpha).total_cmp(&a.normalized(cfg.alpha)).then_with(|| a.tokens.cmp(&b.tokens)));
    Ok(done)
}
