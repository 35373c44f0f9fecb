//! Sub-layer plumbing: layer normalization, the position-wise FFN, residual
//! wrappers, Runge-Kutta sub-layers, layer fusion, layer dropout, mixture of
//! experts, and parameter sharing across a stack.

use std::collections::HashSet;

use crate::ctx::Ctx;
use crate::error::{Error, Result};
use crate::tensor::{xavier_init, Float, HasParams, InitDist, NormDenom, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Debug)]
pub struct LNParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
    pub denom: NormDenom,
}

impl LNParams {
    /// g = 1, b = 0, and the σ + ε denominator.
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer-norm epsilon {eps} must be positive")));
        }
        Ok(LNParams {
            gain: store.add(format!("{name}.g"), Tensor::full(1, d, T::one())),
            bias: store.add(format!("{name}.b"), Tensor::zeros(1, d)),
            eps,
            denom: NormDenom::SigmaPlusEps,
        })
    }

    pub fn with_denom(mut self, denom: NormDenom) -> Self {
        self.denom = denom;
        self
    }
}

impl HasParams for LNParams {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

/// g ⊙ (h − μ)/(σ + ε) + b per row, σ the population deviation.
pub fn layer_norm<T: Float>(ctx: &Ctx<T>, h: Var, p: &LNParams) -> Result<Var> {
    ctx.tape.layer_norm(h, ctx.p(p.gain), ctx.p(p.bias), T::of(p.eps), p.denom)
}

#[derive(Clone, Debug)]
pub struct FFNParams {
    pub wh: ParamId,
    pub bh: ParamId,
    pub wf: ParamId,
    pub bf: ParamId,
}

impl FFNParams {
    /// d_in → d_ffn → d_out with Xavier weights and zero biases.
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_ffn: usize, d_out: usize, gain: f64, rng: &mut Rng) -> Result<Self> {
        if d_ffn == 0 {
            return Err(Error::Config("FFN hidden width must be at least 1".into()));
        }
        Ok(FFNParams {
            wh: store.add(format!("{name}.wh"), xavier_init(d_in, d_ffn, gain, InitDist::Uniform, rng)),
            bh: store.add(format!("{name}.bh"), Tensor::zeros(1, d_ffn)),
            wf: store.add(format!("{name}.wf"), xavier_init(d_ffn, d_out, gain, InitDist::Uniform, rng)),
            bf: store.add(format!("{name}.bf"), Tensor::zeros(1, d_out)),
        })
    }
}

impl HasParams for FFNParams {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        for id in [&mut self.wh, &mut self.bh, &mut self.wf, &mut self.bf] {
            f(id);
        }
    }
}

/// ReLU(H·W_h + b_h)·W_f + b_f.
pub fn ffn<T: Float>(ctx: &Ctx<T>, h: Var, p: &FFNParams) -> Result<Var> {
    let t = ctx.tape;
    let hid = t.add_row(ctx.linear(h, p.wh)?, ctx.p(p.bh))?;
    t.add_row(ctx.linear(t.relu(hid), p.wf)?, ctx.p(p.bf))
}

/// Where the identity path enters relative to the layer norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Norm {
    Post,
    Pre,
    /// LNorm(F(z) + β·z) + γ·z.
    Weighted { beta: f64, gamma: f64 },
}

impl Norm {
    pub fn weights(self) -> (f64, f64) {
        match self {
            Norm::Post => (1.0, 0.0),
            Norm::Pre => (0.0, 1.0),
            Norm::Weighted { beta, gamma } => (beta, gamma),
        }
    }
}

fn axpy<T: Float>(ctx: &Ctx<T>, a: f64, x: Var, y: Var) -> Result<Var> {
    if a == 0.0 {
        return Ok(y);
    }
    let sx = if a == 1.0 { x } else { ctx.tape.scale(x, T::of(a)) };
    ctx.tape.add(y, sx)
}

/// LNorm(F(z) + β·z) + γ·z given F(z).
pub fn residual<T: Float>(ctx: &Ctx<T>, z: Var, fz: Var, ln: &LNParams, norm: Norm) -> Result<Var> {
    let (beta, gamma) = norm.weights();
    let inner = axpy(ctx, beta, z, fz)?;
    let normed = layer_norm(ctx, inner, ln)?;
    axpy(ctx, gamma, z, normed)
}

pub fn sublayer_apply<T: Float>(ctx: &Ctx<T>, z: Var, ln: &LNParams, norm: Norm, f: impl FnOnce(Var) -> Result<Var>) -> Result<Var> {
    let fz = f(z)?;
    residual(ctx, z, fz, ln, norm)
}

/// Explicit Runge-Kutta step z + Σγ_i·g_i with g_i = h·f(z + Σβ_ij·g_j).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Integrator {
    pub order: usize,
    pub h: f64,
}

impl Default for Integrator {
    fn default() -> Self {
        Integrator { order: 1, h: 1.0 }
    }
}

impl Integrator {
    pub fn new(order: usize, h: f64) -> Result<Self> {
        if ![1, 2, 4].contains(&order) {
            return Err(Error::Config(format!("integrator order {order} not in {{1, 2, 4}}")));
        }
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::Config(format!("integrator step {h} must be positive")));
        }
        Ok(Integrator { order, h })
    }

    pub fn stages(&self) -> usize {
        self.order
    }

    pub fn is_plain(&self) -> bool {
        self.order == 1 && self.h == 1.0
    }
}

/// `f` receives the stage index alongside its input so stateful callers
/// (KV caches) can keep one slot per stage. Order 2 is Heun's method.
pub fn rk_sublayer<T: Float>(ctx: &Ctx<T>, z: Var, order: usize, h: f64, mut f: impl FnMut(Var, usize) -> Result<Var>) -> Result<Var> {
    let t = ctx.tape;
    let hs = T::of(h);
    let mut g = |x: Var, s: usize| -> Result<Var> { Ok(t.scale(f(x, s)?, hs)) };
    match order {
        1 => {
            let g1 = g(z, 0)?;
            t.add(z, g1)
        }
        2 => {
            let g1 = g(z, 0)?;
            let g2 = g(t.add(z, g1)?, 1)?;
            let avg = t.scale(t.add(g1, g2)?, T::of(0.5));
            t.add(z, avg)
        }
        4 => {
            let half = T::of(0.5);
            let g1 = g(z, 0)?;
            let g2 = g(t.add(z, t.scale(g1, half))?, 1)?;
            let g3 = g(t.add(z, t.scale(g2, half))?, 2)?;
            let g4 = g(t.add(z, g3)?, 3)?;
            let mid = t.scale(t.add(g2, g3)?, T::of(2.0));
            let sum = t.add(t.add(g1, mid)?, g4)?;
            t.add(z, t.scale(sum, T::of(1.0 / 6.0)))
        }
        _ => Err(Error::Config(format!("integrator order {order} not in {{1, 2, 4}}"))),
    }
}

/// Per-sub-layer wiring: residual placement, integrator, and keep
/// probability ρ for layer dropout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SublayerConfig {
    pub norm: Norm,
    pub integrator: Integrator,
    pub rho: f64,
}

impl Default for SublayerConfig {
    fn default() -> Self {
        SublayerConfig {
            norm: Norm::Post,
            integrator: Integrator::default(),
            rho: 1.0,
        }
    }
}

impl SublayerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("layer keep probability {} outside [0, 1]", self.rho)));
        }
        if !self.integrator.is_plain() && self.norm != Norm::Pre {
            return Err(Error::Config("Runge-Kutta sub-layers need the pre-norm placement".into()));
        }
        Ok(())
    }
}

/// One sub-layer with residual wrapper, integrator and layer dropout.
/// The integrator path uses f = LNorm∘F. In training mode the sub-layer is
/// kept with probability ρ (skipped means identity); at inference the
/// branch is scaled: z + ρ·(S(z) − z).
pub fn run_sublayer<T: Float>(ctx: &Ctx<T>, z: Var, ln: &LNParams, cfg: &SublayerConfig, mut f: impl FnMut(Var, usize) -> Result<Var>) -> Result<Var> {
    if ctx.is_training() && cfg.rho < 1.0 && !ctx.keep(cfg.rho) {
        return Ok(z);
    }
    let out = if cfg.integrator.is_plain() {
        sublayer_apply(ctx, z, ln, cfg.norm, |x| f(x, 0))?
    } else {
        rk_sublayer(ctx, z, cfg.integrator.order, cfg.integrator.h, |x, s| layer_norm(ctx, f(x, s)?, ln))?
    };
    if ctx.is_training() || cfg.rho == 1.0 {
        return Ok(out);
    }
    let branch = ctx.tape.sub(out, z)?;
    axpy(ctx, cfg.rho, branch, z)
}

/// Layer-dropout over a stack of pre-norm sub-layers; see [`run_sublayer`]
/// for the train and inference forms.
pub fn layer_dropout<T: Float>(ctx: &Ctx<T>, z: Var, stack: &[(&LNParams, &dyn Fn(Var) -> Result<Var>)], rho: f64) -> Result<Var> {
    let cfg = SublayerConfig {
        norm: Norm::Pre,
        integrator: Integrator::default(),
        rho,
    };
    cfg.validate()?;
    let mut h = z;
    for (ln, f) in stack {
        h = run_sublayer(ctx, h, ln, &cfg, |x, _| f(x))?;
    }
    Ok(h)
}

#[derive(Clone, Debug)]
pub enum FusionKind {
    Average,
    /// Fixed weights, one per fused state.
    Weighted(Vec<f64>),
    /// FFN over the concatenated states.
    Ffn(FFNParams),
    /// Each state attends over the others at the same position, then an FFN
    /// reads the concatenation.
    SelfAttention(FFNParams),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionPlacement {
    /// LNorm(φ(F(z^{l−1}), z^1..z^{l−1})).
    Post,
    /// φ(LNorm(F(z^{l−1})), z^1..z^{l−1}).
    Pre,
}

#[derive(Clone, Debug)]
pub struct FusionSpec {
    pub kind: FusionKind,
    pub placement: FusionPlacement,
}

/// φ over a list of equally shaped states.
pub fn fuse<T: Float>(ctx: &Ctx<T>, states: &[Var], kind: &FusionKind) -> Result<Var> {
    let t = ctx.tape;
    let n = states.len();
    if n == 0 {
        return Err(Error::Config("fusion needs at least one state".into()));
    }
    match kind {
        FusionKind::Average => {
            let mut acc = states[0];
            for &s in &states[1..] {
                acc = t.add(acc, s)?;
            }
            Ok(t.scale(acc, T::one() / T::of_usize(n)))
        }
        FusionKind::Weighted(w) => {
            if w.len() != n {
                return Err(Error::Config(format!("{} fusion weights for {n} states", w.len())));
            }
            let mut acc = t.scale(states[0], T::of(w[0]));
            for (&s, &wk) in states[1..].iter().zip(&w[1..]) {
                acc = axpy(ctx, wk, s, acc)?;
            }
            Ok(acc)
        }
        FusionKind::Ffn(p) => ffn(ctx, t.concat_cols(states)?, p),
        FusionKind::SelfAttention(p) => {
            let d = t.shape(states[0]).1;
            let scale = T::one() / T::of_usize(d).sqrt();
            let mut outs = Vec::with_capacity(n);
            for &a in states {
                let scores: Vec<Var> = states.iter().map(|&b| t.row_sum(t.mul(a, b).expect("same shape"))).collect();
                let w = t.softmax_rows(t.scale(t.concat_cols(&scores)?, scale), None)?;
                let mut acc = None;
                for (j, &b) in states.iter().enumerate() {
                    let term = t.mul_col(b, t.slice_cols(w, j, 1)?)?;
                    acc = Some(match acc {
                        None => term,
                        Some(x) => t.add(x, term)?,
                    });
                }
                outs.push(acc.expect("nonempty"));
            }
            ffn(ctx, t.concat_cols(&outs)?, p)
        }
    }
}

/// Fuses the new branch F(z^{l−1}) with the history z^1..z^{l−1}.
pub fn fuse_layers<T: Float>(ctx: &Ctx<T>, history: &[Var], f_out: Var, ln: &LNParams, spec: &FusionSpec) -> Result<Var> {
    if history.is_empty() {
        return Err(Error::Config("layer fusion needs a nonempty history".into()));
    }
    let mut states = Vec::with_capacity(history.len() + 1);
    match spec.placement {
        FusionPlacement::Post => {
            states.push(f_out);
            states.extend_from_slice(history);
            layer_norm(ctx, fuse(ctx, &states, &spec.kind)?, ln)
        }
        FusionPlacement::Pre => {
            states.push(layer_norm(ctx, f_out, ln)?);
            states.extend_from_slice(history);
            fuse(ctx, &states, &spec.kind)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Routing {
    /// Softmax over all experts, keep the top k, renormalize.
    #[default]
    SoftmaxTopK,
    /// Keep the top k logits, softmax over those.
    TopKSoftmax,
}

#[derive(Clone, Debug)]
pub struct MoEParams {
    pub experts: Vec<FFNParams>,
    pub wg: ParamId,
    pub k: usize,
    pub routing: Routing,
}

impl MoEParams {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize, d_ffn: usize, m: usize, k: usize, routing: Routing, rng: &mut Rng) -> Result<Self> {
        if m == 0 || k == 0 || k > m {
            return Err(Error::Config(format!("top-{k} routing over {m} experts")));
        }
        let experts = (0..m)
            .map(|e| FFNParams::new(store, &format!("{name}.e{e}"), d, d_ffn, d, 1.0, rng))
            .collect::<Result<_>>()?;
        let wg = store.add(format!("{name}.wg"), xavier_init(d, m, 1.0, InitDist::Uniform, rng));
        Ok(MoEParams { experts, wg, k, routing })
    }
}

impl HasParams for MoEParams {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        self.experts.visit_params(f);
        f(&mut self.wg);
    }
}

/// Indices of the k largest weights, larger first, lower index on ties.
pub fn top_k(weights: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Routed experts and combination weights per row, plus the output.
pub struct MoEOut {
    pub out: Var,
    pub selected: Vec<Vec<usize>>,
    pub weights: Var,
}

/// Each row is sent to its top-k experts; expert e only runs on the rows
/// routed to it.
pub fn moe_ffn<T: Float>(ctx: &Ctx<T>, h: Var, p: &MoEParams) -> Result<MoEOut> {
    let t = ctx.tape;
    let (m, d) = t.shape(h);
    let n_exp = p.experts.len();
    let logits = t.matmul(h, ctx.p(p.wg))?;
    let gates = t.softmax_rows(logits, None)?;
    let gv = t.value(gates);
    let selected: Vec<Vec<usize>> = (0..m)
        .map(|i| top_k(&gv.row(i).iter().map(|x| x.as_f64()).collect::<Vec<_>>(), p.k))
        .collect();
    let mut keep = Tensor::<T>::zeros(m, n_exp);
    for (i, sel) in selected.iter().enumerate() {
        for &e in sel {
            keep.set(i, e, T::one());
        }
    }
    let weights = match p.routing {
        Routing::SoftmaxTopK => {
            let kept = t.mul(gates, t.constant(keep.clone()))?;
            t.div_col(kept, t.row_sum(kept))?
        }
        Routing::TopKSoftmax => {
            let mask = keep.map(|x| if x > T::zero() { T::zero() } else { T::neg_infinity() });
            t.softmax_rows(logits, Some(&mask))?
        }
    };
    // Expert outputs stacked by expert; slot (i, s) reads row base[e] + rank.
    let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); n_exp];
    let mut pos: Vec<Vec<usize>> = vec![vec![0; p.k]; m];
    for (i, sel) in selected.iter().enumerate() {
        for (s, &e) in sel.iter().enumerate() {
            pos[i][s] = rows_of[e].len();
            rows_of[e].push(i);
        }
    }
    let mut parts = Vec::new();
    let mut base = vec![0; n_exp];
    let mut offset = 0;
    for e in 0..n_exp {
        base[e] = offset;
        if rows_of[e].is_empty() {
            continue;
        }
        let x = t.gather_rows(h, &rows_of[e])?;
        parts.push(ffn(ctx, x, &p.experts[e])?);
        offset += rows_of[e].len();
    }
    let stacked = t.concat_rows(&parts)?;
    let mut out = None;
    for s in 0..p.k {
        let idx: Vec<usize> = (0..m).map(|i| base[selected[i][s]] + pos[i][s]).collect();
        let y = t.gather_rows(stacked, &idx)?;
        let mut pick = Tensor::<T>::zeros(m, n_exp);
        for i in 0..m {
            pick.set(i, selected[i][s], T::one());
        }
        let w = t.row_sum(t.mul(weights, t.constant(pick))?);
        let term = t.mul_col(y, w)?;
        out = Some(match out {
            None => term,
            Some(o) => t.add(o, term)?,
        });
    }
    let out = out.expect("k >= 1");
    debug_assert_eq!(t.shape(out), (m, d));
    Ok(MoEOut { out, selected, weights })
}

/// Points every member of `group` at the parameters of its first member.
/// Members must have the same parameter shapes.
pub fn share_group<T: Float, P: HasParams + Clone>(stack: &mut [P], group: &[usize], store: &ParamStore<T>) -> Result<()> {
    let Some(&lead) = group.first() else {
        return Ok(());
    };
    let n = stack.len();
    if let Some(&bad) = group.iter().find(|&&g| g >= n) {
        return Err(Error::Config(format!("share group member {bad} outside stack of {n}")));
    }
    let shapes = |p: &mut P| -> Vec<Vec<usize>> { p.param_ids().iter().map(|&id| store.get(id).shape().to_vec()).collect() };
    let want = shapes(&mut stack[lead]);
    for &g in &group[1..] {
        if shapes(&mut stack[g]) != want {
            return Err(Error::Config(format!("share group member {g} differs in shape from {lead}")));
        }
    }
    for &g in &group[1..] {
        stack[g] = stack[lead].clone();
    }
    Ok(())
}

/// Distinct parameter ids referenced by a stack.
pub fn unique_params<P: HasParams>(stack: &mut [P]) -> usize {
    let mut seen = HashSet::new();
    for p in stack {
        seen.extend(p.param_ids());
    }
    seen.len()
}
