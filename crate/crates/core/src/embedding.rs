//! Vocabularies, token embeddings, sinusoidal positions and relative
//! position tables.

use std::collections::HashMap;

use crate::ctx::Ctx;
use crate::error::{Error, Result};
use crate::tensor::{Float, HasParams, ParamId, ParamStore, Rng, Tensor, Var};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const CLS: usize = 3;
pub const UNK: usize = 4;
pub const SPECIALS: [&str; 5] = ["<pad>", "<sos>", "<eos>", "<cls>", "<unk>"];

/// Bijection between token strings and ids. Ids 0..5 are the reserved
/// specials in the order of [`SPECIALS`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from an explicit list whose first entries are the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::Config("vocabulary must start with the reserved specials".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Character vocabulary over the distinct Unicode scalars of `text`,
    /// sorted by code point.
    pub fn from_chars(text: &str) -> Self {
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(chars.into_iter().map(String::from)).collect();
        Self::from_tokens(tokens).expect("specials are first and chars are distinct")
    }

    /// Vocabulary of `n` tokens: the specials plus synthetic fillers.
    pub fn synthetic(n: usize) -> Self {
        let tokens = (0..n.max(SPECIALS.len()))
            .map(|i| SPECIALS.get(i).map_or_else(|| format!("t{i}"), |s| s.to_string()))
            .collect();
        Self::from_tokens(tokens).expect("synthetic tokens are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn check(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.len()) {
            Some(&id) => Err(Error::Vocab { id, size: self.len() }),
            None => Ok(()),
        }
    }

    /// Character-level encoding; unknown characters map to UNK.
    pub fn encode_chars(&self, text: &str) -> Vec<usize> {
        let mut buf = [0u8; 4];
        text.chars().map(|c| self.id(c.encode_utf8(&mut buf)).unwrap_or(UNK)).collect()
    }

    /// Concatenates non-special tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIALS.len())
            .filter_map(|&i| self.token(i))
            .collect()
    }
}

/// Learnable |V|×d token embedding.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub weight: ParamId,
    pub vocab_size: usize,
    pub d: usize,
}

impl EmbeddingTable {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, vocab_size: usize, d: usize, rng: &mut Rng) -> Self {
        let w = Tensor::gaussian(vocab_size, d, 1.0, rng);
        EmbeddingTable {
            weight: store.add(name, w),
            vocab_size,
            d,
        }
    }
}

impl HasParams for EmbeddingTable {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        f(&mut self.weight);
    }
}

/// PE(i)_{2k} = sin(i·ω_k), PE(i)_{2k+1} = cos(i·ω_k), ω_k = base^(−2k/d).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinusoidalPE {
    pub d: usize,
    pub base: f64,
}

impl SinusoidalPE {
    pub fn new(d: usize, base: f64) -> Result<Self> {
        if d == 0 || d % 2 == 1 {
            return Err(Error::Config(format!("positional encoding width must be even, got {d}")));
        }
        Ok(SinusoidalPE { d, base })
    }

    pub fn standard(d: usize) -> Result<Self> {
        Self::new(d, 10000.0)
    }

    pub fn omega(&self, k: usize) -> f64 {
        self.base.powf(-((2 * k) as f64) / self.d as f64)
    }

    /// PE at a (possibly fractional) position, in 64-bit.
    pub fn encode(&self, i: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.d);
        for k in 0..self.d / 2 {
            let a = i * self.omega(k);
            out.push(a.sin());
            out.push(a.cos());
        }
        out
    }

    /// Rows PE(start)..PE(start+n−1).
    pub fn table<T: Float>(&self, start: usize, n: usize) -> Tensor<T> {
        let data = (start..start + n).flat_map(|i| self.encode(i as f64)).map(T::of).collect();
        Tensor::matrix(n, self.d, data).expect("sized")
    }
}

/// PE(i+μ) from PE(i) and PE(μ) by the angle-addition identities
/// sin(a+b) = sin a cos b + cos a sin b, cos(a+b) = cos a cos b − sin a sin b.
pub fn pe_shift(pe_i: &[f64], pe_mu: &[f64]) -> Vec<f64> {
    assert_eq!(pe_i.len(), pe_mu.len(), "pe_shift widths differ");
    let mut out = Vec::with_capacity(pe_i.len());
    for (a, b) in pe_i.chunks_exact(2).zip(pe_mu.chunks_exact(2)) {
        let (sa, ca, sb, cb) = (a[0], a[1], b[0], b[1]);
        out.push(sa * cb + ca * sb);
        out.push(ca * cb - sa * sb);
    }
    out
}

/// Base-`base` digits of `n`, least significant first. The positional
/// encoding generalizes this carrying system to continuous rotations.
pub fn digits(mut n: u64, base: u64) -> Vec<u64> {
    let mut out = Vec::new();
    loop {
        out.push(n % base);
        n /= base;
        if n == 0 {
            return out;
        }
    }
}

/// Rows `table[token_j] + pe[start + j]`, optionally scaling the token
/// embedding by sqrt(d) first.
pub fn embed_sequence<T: Float>(
    ctx: &Ctx<T>,
    table: &EmbeddingTable,
    tokens: &[usize],
    pe: Option<&SinusoidalPE>,
    start: usize,
    scale: bool,
) -> Result<Var> {
    if let Some(&id) = tokens.iter().find(|&&t| t >= table.vocab_size) {
        return Err(Error::Vocab { id, size: table.vocab_size });
    }
    let w = ctx.p(table.weight);
    let mut x = ctx.tape.gather_rows(w, tokens)?;
    if scale {
        x = ctx.tape.scale(x, T::of((table.d as f64).sqrt()));
    }
    match pe {
        Some(pe) => {
            let p = ctx.tape.constant(pe.table(start, tokens.len()));
            ctx.tape.add(x, p)
        }
        None => Ok(x),
    }
}

pub fn pad_flags(tokens: &[usize]) -> Vec<bool> {
    tokens.iter().map(|&t| t == PAD).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RprRole {
    Query,
    Key,
    Value,
}

/// Relative-position tables of (2k+1) rows; row r encodes offset r − k.
/// Any role may be disabled.
#[derive(Clone, Debug)]
pub struct RprTable {
    pub k: usize,
    pub d_head: usize,
    pub q: Option<ParamId>,
    pub key: Option<ParamId>,
    pub v: Option<ParamId>,
}

impl RprTable {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        k: usize,
        d_head: usize,
        roles: &[RprRole],
        rng: &mut Rng,
    ) -> Self {
        let mut mk = |role: RprRole, tag: &str| {
            roles
                .contains(&role)
                .then(|| store.add(format!("{name}.{tag}"), Tensor::gaussian(2 * k + 1, d_head, 0.1, rng)))
        };
        RprTable {
            k,
            d_head,
            q: mk(RprRole::Query, "q"),
            key: mk(RprRole::Key, "k"),
            v: mk(RprRole::Value, "v"),
        }
    }

    /// Row index for query position i and key position j.
    pub fn bucket(&self, i: usize, j: usize) -> usize {
        let k = self.k as i64;
        ((j as i64 - i as i64).clamp(-k, k) + k) as usize
    }

    pub fn role(&self, role: RprRole) -> Option<ParamId> {
        match role {
            RprRole::Query => self.q,
            RprRole::Key => self.key,
            RprRole::Value => self.v,
        }
    }
}

impl HasParams for RprTable {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        for id in [&mut self.q, &mut self.key, &mut self.v].into_iter().flatten() {
            f(id);
        }
    }
}

/// The table row used between positions i and j.
pub fn rpr_lookup<T: Float>(store: &ParamStore<T>, table: &RprTable, i: usize, j: usize, role: RprRole) -> Result<Vec<T>> {
    let id = table
        .role(role)
        .ok_or_else(|| Error::Config(format!("relative position role {role:?} is disabled")))?;
    Ok(store.get(id).row(table.bucket(i, j)).to_vec())
}
