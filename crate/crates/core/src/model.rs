//! Encoder, decoder and encoder-decoder assemblies with every variant
//! switch, the output head, sequence likelihood and sentence pooling.

use std::cell::RefCell;

use crate::attention::{
    attend_projected, make_attention_field, AttentionOptions, AttentionParams, CrossMemory, FieldPattern, KVCache, LocalPrior, MaskSpec, PriorKind,
    PriorMode,
};
use crate::blocks::{
    ffn, fuse_layers, layer_norm, moe_ffn, run_sublayer, share_group, FFNParams, FusionKind, FusionPlacement, FusionSpec, Integrator, LNParams, MoEParams,
    Norm, Routing, SublayerConfig,
};
use crate::config::Config;
use crate::ctx::Ctx;
use crate::efficient::{length_attend_projected, linear_attend_projected, width_attend_projected, FeatureMap, LengthReduction, WidthReduction};
use crate::embedding::{embed_sequence, EmbeddingTable, RprRole, SinusoidalPE, CLS, PAD, SOS};
use crate::error::{Error, Result};
use crate::ssm::{Discretization, SsmConfig, SsmInit, SsmLayer};
use crate::tensor::{depth_gain, xavier_init, Float, HasParams, InitDist, NormDenom, ParamId, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    EncoderOnly,
    DecoderOnly,
    EncoderDecoder,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionVariant {
    Dense,
    Linear(FeatureMap),
    /// Keys and values mapped to `reduced` rows by learned n'×n_max maps.
    LowRankLength { reduced: usize, n_max: usize },
    /// Queries and keys projected to `reduced` columns per head.
    LowRankWidth { reduced: usize, scale_reduced: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionChoice {
    Average,
    Ffn,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    Xavier,
    /// Xavier with gain a·L^b.
    DepthScaled { a: f64, b: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MoeConfig {
    pub experts: usize,
    pub k: usize,
    pub routing: Routing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub vocab: usize,
    /// Sinusoidal base, or `None` for no absolute positions.
    pub pe_base: Option<f64>,
    pub embed_scale: bool,
    pub tie_embeddings: bool,
    pub init: InitScheme,
    pub wo_gain: f64,
    pub sublayer: SublayerConfig,
    pub ln_eps: f64,
    pub ln_denom: NormDenom,
    pub attention: AttentionVariant,
    pub multi_query: bool,
    pub rpr: Option<(usize, Vec<RprRole>)>,
    pub field: Option<FieldPattern>,
    pub prior: Option<LocalPrior>,
    pub reuse_maps: bool,
    pub ssm: Option<SsmConfig>,
    pub moe: Option<MoeConfig>,
    pub fusion: Option<(FusionChoice, FusionPlacement)>,
    pub share: Vec<Vec<usize>>,
}

impl ModelConfig {
    /// Post-norm dense Transformer with d_ffn = 4d.
    pub fn new(arch: Architecture, layers: usize, d: usize, heads: usize, vocab: usize) -> Self {
        ModelConfig {
            arch,
            layers,
            d,
            heads,
            d_ffn: 4 * d,
            vocab,
            pe_base: Some(10000.0),
            embed_scale: false,
            tie_embeddings: false,
            init: InitScheme::Xavier,
            wo_gain: 0.1,
            sublayer: SublayerConfig::default(),
            ln_eps: 1e-6,
            ln_denom: NormDenom::SigmaPlusEps,
            attention: AttentionVariant::Dense,
            multi_query: false,
            rpr: None,
            field: None,
            prior: None,
            reuse_maps: false,
            ssm: None,
            moe: None,
            fusion: None,
            share: Vec::new(),
        }
    }

    pub fn with_norm(mut self, norm: Norm) -> Self {
        self.sublayer.norm = norm;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return bad("a model needs at least one layer".into());
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("head count {} must divide width {}", self.heads, self.d));
        }
        if self.vocab < crate::embedding::SPECIALS.len() {
            return bad(format!("vocabulary of {} cannot hold the special tokens", self.vocab));
        }
        if self.pe_base.is_some() && !self.d.is_multiple_of(2) {
            return bad("sinusoidal positions need an even width".into());
        }
        self.sublayer.validate()?;
        let dense = self.attention == AttentionVariant::Dense;
        if !dense && (self.rpr.is_some() || self.prior.is_some() || self.reuse_maps) {
            return bad("relative positions, priors and map reuse need dense attention".into());
        }
        if !dense && self.field.is_some() && !matches!(self.attention, AttentionVariant::LowRankWidth { .. }) {
            return bad("sparse fields combine only with dense or width-reduced attention".into());
        }
        if matches!(self.attention, AttentionVariant::LowRankLength { .. }) && self.arch != Architecture::EncoderOnly {
            return bad("length reduction mixes positions and cannot run in a causal decoder".into());
        }
        if let AttentionVariant::LowRankLength { reduced, n_max } = self.attention {
            if reduced == 0 || reduced > n_max {
                return bad(format!("length reduction to {reduced} of {n_max}"));
            }
        }
        if let AttentionVariant::LowRankWidth { reduced, .. } = self.attention {
            if reduced == 0 || reduced > self.d / self.heads {
                return bad(format!("width reduction to {reduced} of head width {}", self.d / self.heads));
            }
        }
        if self.ssm.is_some() && self.arch == Architecture::DecoderOnly {
            return bad("state-space sub-layers replace encoder self-attention only".into());
        }
        if let Some(m) = self.moe {
            if m.experts == 0 || m.k == 0 || m.k > m.experts {
                return bad(format!("top-{} routing over {} experts", m.k, m.experts));
            }
        }
        if self.fusion.is_some() && !self.sublayer.integrator.is_plain() {
            return bad("layer fusion needs the plain (order 1, h = 1) integrator".into());
        }
        for g in &self.share {
            if let Some(&l) = g.iter().find(|&&l| l >= self.layers) {
                return bad(format!("share group names layer {l} of {}", self.layers));
            }
        }
        if self.reuse_maps && self.rpr.is_some() {
            return bad("map reuse with relative positions is not supported".into());
        }
        Ok(())
    }

    pub fn from_config(c: &Config) -> Result<Self> {
        c.check_known(&[
            "model.*", "norm.*", "integrator.*", "dropout.*", "attention.*", "ssm.*", "moe.*", "fusion.*", "share.*", "init.*", "train.*", "search.*",
            "quant.*",
        ])?;
        let arch = match c.raw("model.arch").unwrap_or("decoder-only") {
            "encoder-only" => Architecture::EncoderOnly,
            "decoder-only" => Architecture::DecoderOnly,
            "encoder-decoder" => Architecture::EncoderDecoder,
            o => return Err(Error::Config(format!("unknown architecture '{o}'"))),
        };
        let d: usize = c.get_or("model.d", 64)?;
        let mut m = ModelConfig::new(arch, c.get_or("model.layers", 2)?, d, c.get_or("model.heads", 4)?, c.get_or("model.vocab", 0)?);
        m.d_ffn = c.get_or("model.d_ffn", 4 * d)?;
        m.pe_base = match c.raw("model.pos").unwrap_or("sinusoidal") {
            "sinusoidal" => Some(c.get_or("model.pe_base", 10000.0)?),
            "none" => None,
            o => return Err(Error::Config(format!("unknown position encoding '{o}'"))),
        };
        m.embed_scale = c.get_or("model.embed_scale", false)?;
        m.tie_embeddings = c.get_or("model.tie_embeddings", false)?;
        m.wo_gain = c.get_or("model.wo_gain", 0.1)?;
        m.init = match c.raw("init.scheme").unwrap_or("xavier") {
            "xavier" => InitScheme::Xavier,
            "depth" => InitScheme::DepthScaled {
                a: c.get_or("init.a", 1.0)?,
                b: c.get_or("init.b", -0.5)?,
            },
            o => return Err(Error::Config(format!("unknown init scheme '{o}'"))),
        };
        m.sublayer.norm = match c.raw("norm.placement").unwrap_or("post") {
            "post" => Norm::Post,
            "pre" => Norm::Pre,
            "weighted" => Norm::Weighted {
                beta: c.get_or("norm.beta", 1.0)?,
                gamma: c.get_or("norm.gamma", 0.0)?,
            },
            o => return Err(Error::Config(format!("unknown norm placement '{o}'"))),
        };
        m.ln_eps = c.get_or("norm.eps", 1e-6)?;
        m.ln_denom = match c.raw("norm.denom").unwrap_or("sigma") {
            "sigma" => NormDenom::SigmaPlusEps,
            "sqrt" => NormDenom::SqrtVarEps,
            o => return Err(Error::Config(format!("unknown norm denominator '{o}'"))),
        };
        m.sublayer.integrator = Integrator::new(c.get_or("integrator.order", 1)?, c.get_or("integrator.h", 1.0)?)?;
        m.sublayer.rho = c.get_or("dropout.layer_rho", 1.0)?;
        let phi = match c.raw("attention.feature_map").unwrap_or("elu") {
            "elu" => FeatureMap::EluPlusOne,
            "relu" => FeatureMap::Relu,
            "clip" => FeatureMap::PositiveClip,
            o => return Err(Error::Config(format!("unknown feature map '{o}'"))),
        };
        m.attention = match c.raw("attention.variant").unwrap_or("dense") {
            "dense" => AttentionVariant::Dense,
            "linear" => AttentionVariant::Linear(phi),
            "lowrank-n" => AttentionVariant::LowRankLength {
                reduced: c.get_or("attention.reduced", 16)?,
                n_max: c.get_or("attention.n_max", 256)?,
            },
            "lowrank-d" => AttentionVariant::LowRankWidth {
                reduced: c.get_or("attention.reduced", 8)?,
                scale_reduced: c.get_or("attention.scale_reduced", false)?,
            },
            o => return Err(Error::Config(format!("unknown attention variant '{o}'"))),
        };
        m.multi_query = c.get_or("attention.multi_query", false)?;
        let rpr_k: usize = c.get_or("attention.rpr_k", 0)?;
        if rpr_k > 0 {
            let roles = c
                .raw("attention.rpr_roles")
                .unwrap_or("key,value")
                .split(',')
                .map(|r| match r.trim() {
                    "query" => Ok(RprRole::Query),
                    "key" => Ok(RprRole::Key),
                    "value" => Ok(RprRole::Value),
                    o => Err(Error::Config(format!("unknown relative-position role '{o}'"))),
                })
                .collect::<Result<Vec<_>>>()?;
            m.rpr = Some((rpr_k, roles));
        }
        m.field = match c.raw("attention.field") {
            None | Some("none") => None,
            Some(s) => Some(parse_field(s)?),
        };
        m.prior = match c.raw("attention.prior").unwrap_or("none") {
            "none" => None,
            kind => {
                let kind = match kind {
                    "abs" => PriorKind::Abs,
                    "gaussian" => PriorKind::Gaussian(vec![c.get_or("attention.prior_sigma", 2.0)?]),
                    o => return Err(Error::Config(format!("unknown prior '{o}'"))),
                };
                let mode = match c.raw("attention.prior_mode").unwrap_or("additive") {
                    "additive" => PriorMode::Additive,
                    "mixture" => PriorMode::Mixture {
                        beta: c.get_or("attention.prior_beta", 0.5)?,
                    },
                    o => return Err(Error::Config(format!("unknown prior mode '{o}'"))),
                };
                Some(LocalPrior {
                    kind,
                    gamma: c.get_or("attention.prior_gamma", 1.0)?,
                    mode,
                })
            }
        };
        m.reuse_maps = c.get_or("attention.reuse_maps", false)?;
        if c.get_or("ssm.enabled", false)? {
            let method: Discretization = c.raw("ssm.method").unwrap_or("zoh").parse()?;
            let init: SsmInit = c.raw("ssm.init").unwrap_or("diag-uniform").parse()?;
            m.ssm = Some(SsmConfig {
                d_state: c.get_or("ssm.d_state", 16)?,
                dt: c.get_or("ssm.dt", 0.1)?,
                method,
                init,
            });
        }
        let experts: usize = c.get_or("moe.experts", 0)?;
        if experts > 0 {
            let routing = match c.raw("moe.mode").unwrap_or("softmax-topk") {
                "softmax-topk" => Routing::SoftmaxTopK,
                "topk-softmax" => Routing::TopKSoftmax,
                o => return Err(Error::Config(format!("unknown routing mode '{o}'"))),
            };
            m.moe = Some(MoeConfig {
                experts,
                k: c.get_or("moe.k", 2)?,
                routing,
            });
        }
        m.fusion = match c.raw("fusion.kind").unwrap_or("none") {
            "none" => None,
            kind => {
                let choice = match kind {
                    "average" => FusionChoice::Average,
                    "ffn" => FusionChoice::Ffn,
                    "attention" => FusionChoice::Attention,
                    o => return Err(Error::Config(format!("unknown fusion '{o}'"))),
                };
                let placement = match c.raw("fusion.placement").unwrap_or("pre") {
                    "pre" => FusionPlacement::Pre,
                    "post" => FusionPlacement::Post,
                    o => return Err(Error::Config(format!("unknown fusion placement '{o}'"))),
                };
                Some((choice, placement))
            }
        };
        if let Some(g) = c.raw("share.groups") {
            m.share = g
                .split(';')
                .filter(|s| !s.trim().is_empty())
                .map(|grp| grp.split(',').map(|x| x.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad share group '{grp}'")))).collect())
                .collect::<Result<_>>()?;
        }
        m.validate()?;
        Ok(m)
    }

    /// Inverse of [`ModelConfig::from_config`] for every field it reads.
    pub fn to_config(&self) -> Config {
        let mut c = Config::default();
        c.set(
            "model.arch",
            match self.arch {
                Architecture::EncoderOnly => "encoder-only",
                Architecture::DecoderOnly => "decoder-only",
                Architecture::EncoderDecoder => "encoder-decoder",
            },
        );
        c.set("model.layers", self.layers);
        c.set("model.d", self.d);
        c.set("model.heads", self.heads);
        c.set("model.d_ffn", self.d_ffn);
        c.set("model.vocab", self.vocab);
        match self.pe_base {
            Some(b) => {
                c.set("model.pos", "sinusoidal");
                c.set("model.pe_base", b);
            }
            None => c.set("model.pos", "none"),
        }
        c.set("model.embed_scale", self.embed_scale);
        c.set("model.tie_embeddings", self.tie_embeddings);
        c.set("model.wo_gain", self.wo_gain);
        match self.init {
            InitScheme::Xavier => c.set("init.scheme", "xavier"),
            InitScheme::DepthScaled { a, b } => {
                c.set("init.scheme", "depth");
                c.set("init.a", a);
                c.set("init.b", b);
            }
        }
        match self.sublayer.norm {
            Norm::Post => c.set("norm.placement", "post"),
            Norm::Pre => c.set("norm.placement", "pre"),
            Norm::Weighted { beta, gamma } => {
                c.set("norm.placement", "weighted");
                c.set("norm.beta", beta);
                c.set("norm.gamma", gamma);
            }
        }
        c.set("norm.eps", self.ln_eps);
        c.set(
            "norm.denom",
            match self.ln_denom {
                NormDenom::SigmaPlusEps => "sigma",
                NormDenom::SqrtVarEps => "sqrt",
            },
        );
        c.set("integrator.order", self.sublayer.integrator.order);
        c.set("integrator.h", self.sublayer.integrator.h);
        c.set("dropout.layer_rho", self.sublayer.rho);
        let phi_name = |phi: FeatureMap| match phi {
            FeatureMap::EluPlusOne => "elu",
            FeatureMap::Relu => "relu",
            FeatureMap::PositiveClip => "clip",
        };
        match self.attention {
            AttentionVariant::Dense => c.set("attention.variant", "dense"),
            AttentionVariant::Linear(phi) => {
                c.set("attention.variant", "linear");
                c.set("attention.feature_map", phi_name(phi));
            }
            AttentionVariant::LowRankLength { reduced, n_max } => {
                c.set("attention.variant", "lowrank-n");
                c.set("attention.reduced", reduced);
                c.set("attention.n_max", n_max);
            }
            AttentionVariant::LowRankWidth { reduced, scale_reduced } => {
                c.set("attention.variant", "lowrank-d");
                c.set("attention.reduced", reduced);
                c.set("attention.scale_reduced", scale_reduced);
            }
        }
        c.set("attention.multi_query", self.multi_query);
        if let Some((k, roles)) = &self.rpr {
            c.set("attention.rpr_k", k);
            let names: Vec<&str> = roles
                .iter()
                .map(|r| match r {
                    RprRole::Query => "query",
                    RprRole::Key => "key",
                    RprRole::Value => "value",
                })
                .collect();
            c.set("attention.rpr_roles", names.join(","));
        }
        if let Some(f) = &self.field {
            c.set("attention.field", field_text(f));
        }
        if let Some(p) = &self.prior {
            match &p.kind {
                PriorKind::Abs => c.set("attention.prior", "abs"),
                PriorKind::Gaussian(s) => {
                    c.set("attention.prior", "gaussian");
                    c.set("attention.prior_sigma", s[0]);
                }
            }
            c.set("attention.prior_gamma", p.gamma);
            match p.mode {
                PriorMode::Additive => c.set("attention.prior_mode", "additive"),
                PriorMode::Mixture { beta } => {
                    c.set("attention.prior_mode", "mixture");
                    c.set("attention.prior_beta", beta);
                }
            }
        }
        c.set("attention.reuse_maps", self.reuse_maps);
        if let Some(s) = &self.ssm {
            c.set("ssm.enabled", true);
            c.set("ssm.d_state", s.d_state);
            c.set("ssm.dt", s.dt);
            c.set(
                "ssm.method",
                match s.method {
                    Discretization::Euler => "euler",
                    Discretization::Bilinear => "bilinear",
                    Discretization::Zoh => "zoh",
                },
            );
            c.set(
                "ssm.init",
                match s.init {
                    SsmInit::DiagUniform => "diag-uniform",
                    SsmInit::Random => "random",
                },
            );
        }
        if let Some(m) = self.moe {
            c.set("moe.experts", m.experts);
            c.set("moe.k", m.k);
            c.set(
                "moe.mode",
                match m.routing {
                    Routing::SoftmaxTopK => "softmax-topk",
                    Routing::TopKSoftmax => "topk-softmax",
                },
            );
        }
        if let Some((choice, placement)) = self.fusion {
            c.set(
                "fusion.kind",
                match choice {
                    FusionChoice::Average => "average",
                    FusionChoice::Ffn => "ffn",
                    FusionChoice::Attention => "attention",
                },
            );
            c.set(
                "fusion.placement",
                match placement {
                    FusionPlacement::Pre => "pre",
                    FusionPlacement::Post => "post",
                },
            );
        }
        if !self.share.is_empty() {
            let groups: Vec<String> = self.share.iter().map(|g| g.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")).collect();
            c.set("share.groups", groups.join(";"));
        }
        c
    }
}

/// `window:4`, `chunked:8`, `strided:3`, `dilated:4:2`, `global:0,5`,
/// `random:3:seed`, and `+`-joined hybrids.
pub fn parse_field(s: &str) -> Result<FieldPattern> {
    let parts: Vec<&str> = s.split('+').collect();
    if parts.len() > 1 {
        return Ok(FieldPattern::Hybrid(parts.iter().map(|p| parse_field(p)).collect::<Result<_>>()?));
    }
    let bad = || Error::Config(format!("cannot parse attention field '{s}'"));
    let mut it = s.trim().split(':');
    let name = it.next().ok_or_else(bad)?;
    let args: Vec<&str> = it.collect();
    let num = |i: usize| -> Result<usize> { args.get(i).and_then(|a| a.trim().parse().ok()).ok_or_else(bad) };
    Ok(match name {
        "window" => FieldPattern::Window { size: num(0)? },
        "chunked" => FieldPattern::Chunked { size: num(0)? },
        "strided" => FieldPattern::Strided { stride: num(0)? },
        "dilated" => FieldPattern::Dilated {
            window: num(0)?,
            dilation: num(1)?,
        },
        "global" => FieldPattern::Global {
            positions: args
                .first()
                .ok_or_else(bad)?
                .split(',')
                .map(|x| x.trim().parse().map_err(|_| bad()))
                .collect::<Result<_>>()?,
        },
        "random" => FieldPattern::Random {
            k: num(0)?,
            seed: num(1)? as u64,
        },
        _ => return Err(bad()),
    })
}

pub fn field_text(f: &FieldPattern) -> String {
    match f {
        FieldPattern::Window { size } => format!("window:{size}"),
        FieldPattern::Chunked { size } => format!("chunked:{size}"),
        FieldPattern::Strided { stride } => format!("strided:{stride}"),
        FieldPattern::Dilated { window, dilation } => format!("dilated:{window}:{dilation}"),
        FieldPattern::Global { positions } => format!("global:{}", positions.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(",")),
        FieldPattern::Random { k, seed } => format!("random:{k}:{seed}"),
        FieldPattern::Hybrid(parts) => parts.iter().map(field_text).collect::<Vec<_>>().join("+"),
    }
}

#[derive(Clone, Debug)]
pub enum Reduction {
    Length(LengthReduction),
    Width(WidthReduction),
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Attn(AttentionParams, Option<Reduction>),
    Ssm(SsmLayer),
}

#[derive(Clone, Debug)]
pub enum FfnBlock {
    Dense(FFNParams),
    Moe(MoEParams),
}

/// A core function with its layer norm and optional fusion.
#[derive(Clone, Debug)]
pub struct Sub<P> {
    pub core: P,
    pub ln: LNParams,
    pub fusion: Option<FusionSpec>,
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub mix: Sub<Mixer>,
    pub cross: Option<Sub<AttentionParams>>,
    pub ff: Sub<FfnBlock>,
}

fn visit_fusion(f: &mut Option<FusionSpec>, v: &mut dyn FnMut(&mut ParamId)) {
    if let Some(FusionSpec {
        kind: FusionKind::Ffn(p) | FusionKind::SelfAttention(p),
        ..
    }) = f
    {
        p.visit_params(v);
    }
}

impl HasParams for Layer {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        match &mut self.mix.core {
            Mixer::Attn(p, red) => {
                p.visit_params(f);
                match red {
                    Some(Reduction::Length(LengthReduction::Linear { uk, uv })) => {
                        f(uk);
                        f(uv);
                    }
                    Some(Reduction::Width(w)) => {
                        f(&mut w.uq);
                        f(&mut w.uk);
                    }
                    _ => {}
                }
            }
            Mixer::Ssm(s) => s.visit_params(f),
        }
        self.mix.ln.visit_params(f);
        visit_fusion(&mut self.mix.fusion, f);
        if let Some(c) = &mut self.cross {
            c.core.visit_params(f);
            c.ln.visit_params(f);
            visit_fusion(&mut c.fusion, f);
        }
        match &mut self.ff.core {
            FfnBlock::Dense(p) => p.visit_params(f),
            FfnBlock::Moe(m) => m.visit_params(f),
        }
        self.ff.ln.visit_params(f);
        visit_fusion(&mut self.ff.fusion, f);
    }
}

#[derive(Clone, Debug)]
pub struct Stack {
    pub layers: Vec<Layer>,
    pub final_ln: Option<LNParams>,
    pub causal: bool,
}

impl Stack {
    pub fn sublayers_per_layer(&self) -> usize {
        if self.layers.first().is_some_and(|l| l.cross.is_some()) {
            3
        } else {
            2
        }
    }
}

/// One packed sequence: rows start..start+len of the stacked input, first
/// row at absolute position `pos0`.
#[derive(Clone, Debug)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub pos0: usize,
    pub pad: Vec<bool>,
}

/// Encoder output projected for one decoder layer's cross-attention, kept
/// as plain tensors so it outlives any one tape.
#[derive(Clone, Debug)]
pub struct SourceMemory<T> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
    pub pad: Vec<bool>,
}

/// Incremental decoding state for one hypothesis.
#[derive(Clone, Debug)]
pub struct DecodeState<T> {
    pub cache: KVCache<T>,
    pub source: Option<SourceMemory<T>>,
    /// Absolute position of the next token.
    pub pos: usize,
    /// Positions dropped from the front of the cache.
    pub dropped: usize,
}

impl<T: Float> DecodeState<T> {
    /// Keeps only the last `n` cached positions.
    pub fn truncate(&mut self, n: usize) -> Result<()> {
        let have = self.cache.uniform_len()?;
        if have > n {
            self.cache.retain_last(n);
            self.dropped += have - n;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Cls,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    Cosine,
}

#[derive(Clone, Debug)]
pub struct Model<T: Float = f32> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub src_embed: Option<EmbeddingTable>,
    pub tgt_embed: Option<EmbeddingTable>,
    pub encoder: Option<Stack>,
    pub decoder: Option<Stack>,
    pub wo: Option<ParamId>,
    pub pe: Option<SinusoidalPE>,
}

struct Builder<'a, T: Float> {
    cfg: &'a ModelConfig,
    store: &'a mut ParamStore<T>,
    rng: &'a mut Rng,
    gain: f64,
}

impl<T: Float> Builder<'_, T> {
    fn ln(&mut self, name: &str, d: usize) -> Result<LNParams> {
        Ok(LNParams::new(self.store, name, d, self.cfg.ln_eps)?.with_denom(self.cfg.ln_denom))
    }

    fn fusion(&mut self, name: &str, states: usize) -> Result<Option<FusionSpec>> {
        let Some((choice, placement)) = self.cfg.fusion else {
            return Ok(None);
        };
        let d = self.cfg.d;
        let kind = match choice {
            FusionChoice::Average => FusionKind::Average,
            FusionChoice::Ffn => FusionKind::Ffn(FFNParams::new(self.store, name, states * d, self.cfg.d_ffn, d, self.gain, self.rng)?),
            FusionChoice::Attention => FusionKind::SelfAttention(FFNParams::new(self.store, name, states * d, self.cfg.d_ffn, d, self.gain, self.rng)?),
        };
        Ok(Some(FusionSpec { kind, placement }))
    }

    fn attention(&mut self, name: &str) -> Result<AttentionParams> {
        let opts = AttentionOptions {
            multi_query: self.cfg.multi_query,
            rpr: self.cfg.rpr.clone(),
            gain: Some(self.gain),
        };
        AttentionParams::new(self.store, name, self.cfg.d, self.cfg.heads, &opts, self.rng)
    }

    fn mixer(&mut self, name: &str, encoder: bool) -> Result<Mixer> {
        let cfg = self.cfg;
        if encoder {
            if let Some(s) = &cfg.ssm {
                return Ok(Mixer::Ssm(SsmLayer::new(self.store, name, cfg.d, s, self.rng)?));
            }
        }
        let p = self.attention(name)?;
        let dh = cfg.d / cfg.heads;
        let red = match cfg.attention {
            AttentionVariant::LowRankLength { reduced, n_max } => {
                let mut u = |tag: &str| self.store.add(format!("{name}.{tag}"), xavier_init(reduced, n_max, 1.0, InitDist::Uniform, self.rng));
                Some(Reduction::Length(LengthReduction::Linear { uk: u("uk_len"), uv: u("uv_len") }))
            }
            AttentionVariant::LowRankWidth { reduced, scale_reduced } => {
                let mut u = |tag: &str| self.store.add(format!("{name}.{tag}"), xavier_init(dh, reduced, 1.0, InitDist::Uniform, self.rng));
                Some(Reduction::Width(WidthReduction {
                    uq: u("uq_w"),
                    uk: u("uk_w"),
                    scale_reduced,
                }))
            }
            _ => None,
        };
        Ok(Mixer::Attn(p, red))
    }

    fn ffn_block(&mut self, name: &str) -> Result<FfnBlock> {
        let cfg = self.cfg;
        Ok(match cfg.moe {
            Some(m) => FfnBlock::Moe(MoEParams::new(self.store, name, cfg.d, cfg.d_ffn, m.experts, m.k, m.routing, self.rng)?),
            None => FfnBlock::Dense(FFNParams::new(self.store, name, cfg.d, cfg.d_ffn, cfg.d, self.gain, self.rng)?),
        })
    }

    fn stack(&mut self, name: &str, encoder: bool, cross: bool) -> Result<Stack> {
        let per = if cross { 3 } else { 2 };
        let mut layers = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let base = l * per;
            let pre = format!("{name}.{l}");
            let mix = Sub {
                core: self.mixer(&format!("{pre}.self"), encoder)?,
                ln: self.ln(&format!("{pre}.ln_self"), self.cfg.d)?,
                fusion: self.fusion(&format!("{pre}.fuse_self"), base + 2)?,
            };
            let cross = if cross {
                Some(Sub {
                    core: self.attention(&format!("{pre}.cross"))?,
                    ln: self.ln(&format!("{pre}.ln_cross"), self.cfg.d)?,
                    fusion: self.fusion(&format!("{pre}.fuse_cross"), base + 3)?,
                })
            } else {
                None
            };
            let ff = Sub {
                core: self.ffn_block(&format!("{pre}.ffn"))?,
                ln: self.ln(&format!("{pre}.ln_ffn"), self.cfg.d)?,
                fusion: self.fusion(&format!("{pre}.fuse_ffn"), base + per + 1)?,
            };
            layers.push(Layer { mix, cross, ff });
        }
        for g in &self.cfg.share {
            share_group(&mut layers, g, self.store)?;
        }
        let final_ln = if self.cfg.sublayer.norm != Norm::Post {
            Some(self.ln(&format!("{name}.ln_final"), self.cfg.d)?)
        } else {
            None
        };
        Ok(Stack {
            layers,
            final_ln,
            causal: !encoder,
        })
    }
}

fn segments_of(seqs: &[&[usize]]) -> Vec<Segment> {
    let mut start = 0;
    seqs.iter()
        .map(|s| {
            let seg = Segment {
                start,
                len: s.len(),
                pos0: 0,
                pad: s.iter().map(|&t| t == PAD).collect(),
            };
            start += s.len();
            seg
        })
        .collect()
}

impl<T: Float> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let gain = match cfg.init {
            InitScheme::Xavier => 1.0,
            InitScheme::DepthScaled { a, b } => depth_gain(a, cfg.layers, b),
        };
        let (enc, dec, cross) = match cfg.arch {
            Architecture::EncoderOnly => (true, false, false),
            Architecture::DecoderOnly => (false, true, false),
            Architecture::EncoderDecoder => (true, true, true),
        };
        let src_embed = enc.then(|| EmbeddingTable::new(&mut store, "src_embed", cfg.vocab, cfg.d, &mut rng));
        let tgt_embed = dec.then(|| EmbeddingTable::new(&mut store, "tgt_embed", cfg.vocab, cfg.d, &mut rng));
        let mut b = Builder {
            cfg: &cfg,
            store: &mut store,
            rng: &mut rng,
            gain,
        };
        let encoder = if enc { Some(b.stack("enc", true, false)?) } else { None };
        let decoder = if dec { Some(b.stack("dec", false, cross)?) } else { None };
        let wo = (dec && !cfg.tie_embeddings).then(|| store.add("wo", xavier_init(cfg.d, cfg.vocab, cfg.wo_gain, InitDist::Uniform, &mut rng)));
        let pe = match cfg.pe_base {
            Some(base) => Some(SinusoidalPE::new(cfg.d, base)?),
            None => None,
        };
        Ok(Model {
            cfg,
            store,
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            wo,
            pe,
        })
    }

    /// Same structure with parameters converted to another float type.
    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            src_embed: self.src_embed.clone(),
            tgt_embed: self.tgt_embed.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            wo: self.wo,
            pe: self.pe,
        }
    }

    /// Ids of every parameter reachable from the forward pass.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut seen = std::collections::BTreeSet::new();
        let mut this = self.clone_structure();
        let mut add = |id: &mut ParamId| {
            seen.insert(id.index());
        };
        for e in [&mut this.0, &mut this.1].into_iter().flatten() {
            e.visit_params(&mut add);
        }
        for s in [&mut this.2, &mut this.3].into_iter().flatten() {
            for l in &mut s.layers {
                l.visit_params(&mut add);
            }
            s.final_ln.visit_params(&mut add);
        }
        if let Some(mut w) = self.wo {
            add(&mut w);
        }
        let all: Vec<ParamId> = self.store.ids().collect();
        seen.into_iter().map(|i| all[i]).collect()
    }

    fn clone_structure(&self) -> (Option<EmbeddingTable>, Option<EmbeddingTable>, Option<Stack>, Option<Stack>) {
        (self.src_embed.clone(), self.tgt_embed.clone(), self.encoder.clone(), self.decoder.clone())
    }

    pub fn vocab(&self) -> usize {
        self.cfg.vocab
    }

    pub fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&t| t >= self.cfg.vocab) {
            Some(&id) => Err(Error::Vocab { id, size: self.cfg.vocab }),
            None => Ok(()),
        }
    }

    fn embed(&self, ctx: &Ctx<T>, table: &EmbeddingTable, seqs: &[(&[usize], usize)]) -> Result<Var> {
        let mut parts = Vec::with_capacity(seqs.len());
        for &(toks, pos0) in seqs {
            parts.push(embed_sequence(ctx, table, toks, self.pe.as_ref(), pos0, self.cfg.embed_scale)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            ctx.tape.concat_rows(&parts)
        }
    }

    fn mask_for(&self, causal: bool, seg: &Segment, use_pad: bool) -> Result<MaskSpec> {
        let mut m = MaskSpec::default().with_causal(causal);
        if let Some(f) = &self.cfg.field {
            m = m.with_field(make_attention_field(f, seg.pos0 + seg.len, causal)?);
        }
        if let Some(p) = &self.cfg.prior {
            m = m.with_prior(p.clone());
        }
        if use_pad {
            m = m.with_key_pad(seg.pad.clone());
        }
        Ok(m)
    }

    /// Self-attention core for one stage over every segment. With a cache
    /// (single segment), earlier keys/values come from `site` and the new
    /// ones are appended.
    #[allow(clippy::too_many_arguments)]
    fn attn_core(
        &self,
        ctx: &Ctx<T>,
        p: &AttentionParams,
        red: Option<&Reduction>,
        x: Var,
        segs: &[Segment],
        causal: bool,
        cache: Option<(&RefCell<&mut KVCache<T>>, usize)>,
        maps: &RefCell<Vec<Vec<Var>>>,
        reuse: bool,
    ) -> Result<Var> {
        let t = ctx.tape;
        let q_all = ctx.linear(x, p.wq)?;
        let k_all = ctx.linear(x, p.wk)?;
        let v_all = ctx.linear(x, p.wv)?;
        let mut outs = Vec::with_capacity(segs.len());
        for (si, seg) in segs.iter().enumerate() {
            let pick = |a: Var| if segs.len() == 1 { Ok(a) } else { t.slice_rows(a, seg.start, seg.len) };
            let (q, mut k, mut v) = (pick(q_all)?, pick(k_all)?, pick(v_all)?);
            let mut k0 = seg.pos0;
            if let Some((c, site)) = cache {
                let mut c = c.borrow_mut();
                let prev = c.len(site)?;
                if prev > seg.pos0 {
                    return Err(Error::State(format!("cache holds {prev} positions but the input starts at {}", seg.pos0)));
                }
                if prev > 0 {
                    k = t.concat_rows(&[t.constant(c.keys(site)?), k])?;
                    v = t.concat_rows(&[t.constant(c.values(site)?), v])?;
                    k0 = seg.pos0 - prev;
                }
                c.append(site, t.value(pick(k_all)?).data(), t.value(pick(v_all)?).data())?;
            }
            let use_pad = !causal;
            let keep: Option<Vec<bool>> = (use_pad && seg.pad.iter().any(|&b| b)).then(|| seg.pad.iter().map(|&b| !b).collect());
            let out = match (&self.cfg.attention, red) {
                (AttentionVariant::Linear(phi), _) => linear_attend_projected(ctx, p, q, k, v, *phi, causal, keep.as_deref())?,
                (AttentionVariant::LowRankLength { .. }, Some(Reduction::Length(r))) => length_attend_projected(ctx, p, q, k, v, r, keep.as_deref())?,
                (AttentionVariant::LowRankWidth { .. }, Some(Reduction::Width(r))) => {
                    let mask = self.mask_for(causal, seg, use_pad)?;
                    width_attend_projected(ctx, p, q, k, v, r, &mask, seg.pos0, k0)?
                }
                _ => {
                    let mask = self.mask_for(causal, seg, use_pad)?;
                    if reuse {
                        let m = maps.borrow();
                        let given = m.get(si).ok_or_else(|| Error::State("no attention maps to reuse".into()))?;
                        attend_projected(ctx, p, q, k, v, &mask, seg.pos0, k0, Some(given))?.out
                    } else {
                        let o = attend_projected(ctx, p, q, k, v, &mask, seg.pos0, k0, None)?;
                        let mut m = maps.borrow_mut();
                        if m.len() <= si {
                            m.resize(si + 1, Vec::new());
                        }
                        m[si] = o.maps;
                        o.out
                    }
                }
            };
            outs.push(out);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            t.concat_rows(&outs)
        }
    }

    fn ssm_core(&self, ctx: &Ctx<T>, s: &SsmLayer, x: Var, segs: &[Segment]) -> Result<Var> {
        if segs.len() == 1 {
            return s.forward(ctx, x);
        }
        let mut outs = Vec::with_capacity(segs.len());
        for seg in segs {
            outs.push(s.forward(ctx, ctx.tape.slice_rows(x, seg.start, seg.len)?)?);
        }
        ctx.tape.concat_rows(&outs)
    }

    fn cross_core(&self, ctx: &Ctx<T>, p: &AttentionParams, x: Var, segs: &[Segment], mem: &[(CrossMemory, Vec<bool>)]) -> Result<Var> {
        let t = ctx.tape;
        let q_all = ctx.linear(x, p.wq)?;
        let mut outs = Vec::with_capacity(segs.len());
        for (seg, (m, pad)) in segs.iter().zip(mem) {
            let q = if segs.len() == 1 { q_all } else { t.slice_rows(q_all, seg.start, seg.len)? };
            let mask = MaskSpec::default().with_key_pad(pad.clone());
            outs.push(attend_projected(ctx, p, q, m.k, m.v, &mask, 0, 0, None)?.out);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            t.concat_rows(&outs)
        }
    }

    fn ffn_core(&self, ctx: &Ctx<T>, b: &FfnBlock, x: Var) -> Result<Var> {
        match b {
            FfnBlock::Dense(p) => ffn(ctx, x, p),
            FfnBlock::Moe(m) => Ok(moe_ffn(ctx, x, m)?.out),
        }
    }

    fn wrap(&self, ctx: &Ctx<T>, z: Var, ln: &LNParams, fusion: Option<&FusionSpec>, history: &[Var], mut f: impl FnMut(Var, usize) -> Result<Var>) -> Result<Var> {
        let cfg = &self.cfg.sublayer;
        match fusion {
            None => run_sublayer(ctx, z, ln, cfg, f),
            Some(spec) => {
                if ctx.is_training() && cfg.rho < 1.0 && !ctx.keep(cfg.rho) {
                    return Ok(z);
                }
                let out = fuse_layers(ctx, history, f(z, 0)?, ln, spec)?;
                if ctx.is_training() || cfg.rho == 1.0 {
                    return Ok(out);
                }
                let branch = ctx.tape.sub(out, z)?;
                ctx.tape.add(z, ctx.tape.scale(branch, T::of(cfg.rho)))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_stack(
        &self,
        ctx: &Ctx<T>,
        stack: &Stack,
        x: Var,
        segs: &[Segment],
        cross: Option<&[Vec<(CrossMemory, Vec<bool>)>]>,
        cache: Option<&mut KVCache<T>>,
    ) -> Result<Var> {
        let stages = self.cfg.sublayer.integrator.stages();
        let cache = cache.map(RefCell::new);
        let first_maps: Vec<RefCell<Vec<Vec<Var>>>> = (0..stages).map(|_| RefCell::new(Vec::new())).collect();
        let mut history = vec![x];
        let mut z = x;
        for (l, layer) in stack.layers.iter().enumerate() {
            let reuse = self.cfg.reuse_maps && l > 0;
            z = self.wrap(ctx, z, &layer.mix.ln, layer.mix.fusion.as_ref(), &history, |h, s| match &layer.mix.core {
                Mixer::Attn(p, red) => {
                    let site = cache.as_ref().map(|c| (c, l * stages + s));
                    self.attn_core(ctx, p, red.as_ref(), h, segs, stack.causal, site, &first_maps[s], reuse)
                }
                Mixer::Ssm(sl) => self.ssm_core(ctx, sl, h, segs),
            })?;
            history.push(z);
            if let (Some(c), Some(mem)) = (&layer.cross, cross) {
                let per_seg: Vec<(CrossMemory, Vec<bool>)> = mem.iter().map(|m| m[l].clone()).collect();
                z = self.wrap(ctx, z, &c.ln, c.fusion.as_ref(), &history, |h, _| self.cross_core(ctx, &c.core, h, segs, &per_seg))?;
                history.push(z);
            }
            z = self.wrap(ctx, z, &layer.ff.ln, layer.ff.fusion.as_ref(), &history, |h, _| self.ffn_core(ctx, &layer.ff.core, h))?;
            history.push(z);
        }
        match &stack.final_ln {
            Some(ln) => layer_norm(ctx, z, ln),
            None => Ok(z),
        }
    }

    /// Encoder output for several sequences packed row-wise.
    pub fn encode_batch(&self, ctx: &Ctx<T>, seqs: &[&[usize]]) -> Result<(Var, Vec<Segment>)> {
        let (Some(stack), Some(table)) = (&self.encoder, &self.src_embed) else {
            return Err(Error::Config("model has no encoder".into()));
        };
        if seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Contract("cannot encode an empty sequence".into()));
        }
        let segs = segments_of(seqs);
        let x = self.embed(ctx, table, &seqs.iter().map(|s| (*s, 0)).collect::<Vec<_>>())?;
        Ok((self.run_stack(ctx, stack, x, &segs, None, None)?, segs))
    }

    /// H^L (m×d) for one source sequence.
    pub fn encode(&self, ctx: &Ctx<T>, tokens: &[usize]) -> Result<Var> {
        Ok(self.encode_batch(ctx, &[tokens])?.0)
    }

    fn cross_memories(&self, ctx: &Ctx<T>, h_enc: Var, segs: &[Segment]) -> Result<Vec<Vec<(CrossMemory, Vec<bool>)>>> {
        let stack = self.decoder.as_ref().expect("decoder present");
        let mut out = Vec::with_capacity(segs.len());
        for seg in segs {
            let h = if segs.len() == 1 { h_enc } else { ctx.tape.slice_rows(h_enc, seg.start, seg.len)? };
            let mut per_layer = Vec::with_capacity(stack.layers.len());
            for layer in &stack.layers {
                let c = layer.cross.as_ref().expect("cross sub-layer");
                let m = crate::attention::cross_memory(ctx, h, &c.core)?;
                per_layer.push((m, seg.pad.clone()));
            }
            out.push(per_layer);
        }
        Ok(out)
    }

    /// Logits H·W_o (or H·Eᵀ with tied embeddings).
    pub fn head(&self, ctx: &Ctx<T>, h: Var) -> Result<Var> {
        let w = match self.wo {
            Some(w) => ctx.p(w),
            None => ctx.tape.transpose(ctx.p(self.tgt_embed.as_ref().expect("decoder").weight)),
        };
        ctx.tape.matmul(h, w)
    }

    /// Packed logits for decoder inputs (each starting with SOS); `src`
    /// supplies one source per target in encoder-decoder models.
    pub fn decoder_logits(&self, ctx: &Ctx<T>, src: Option<&[&[usize]]>, inputs: &[&[usize]]) -> Result<Var> {
        let (Some(stack), Some(table)) = (&self.decoder, &self.tgt_embed) else {
            return Err(Error::Config("model has no decoder".into()));
        };
        if inputs.iter().any(|s| s.is_empty()) {
            return Err(Error::Contract("decoder input must start with SOS".into()));
        }
        let cross = match (self.cfg.arch, src) {
            (Architecture::EncoderDecoder, Some(src)) => {
                if src.len() != inputs.len() {
                    return Err(Error::Contract(format!("{} sources for {} targets", src.len(), inputs.len())));
                }
                if src.iter().any(|s| s.is_empty()) {
                    return Err(Error::EmptySource);
                }
                let (h, segs) = self.encode_batch(ctx, src)?;
                Some(self.cross_memories(ctx, h, &segs)?)
            }
            (Architecture::EncoderDecoder, None) => return Err(Error::Contract("encoder-decoder model needs a source".into())),
            (_, Some(_)) => return Err(Error::Contract("decoder-only model takes no source".into())),
            (_, None) => None,
        };
        let segs = segments_of(inputs);
        let x = self.embed(ctx, table, &inputs.iter().map(|s| (*s, 0)).collect::<Vec<_>>())?;
        let h = self.run_stack(ctx, stack, x, &segs, cross.as_deref(), None)?;
        self.head(ctx, h)
    }

    /// Sequence representation for pooling: the encoder output, or for a
    /// decoder-only model the final (causal) decoder states over `tokens`.
    pub fn hidden(&self, ctx: &Ctx<T>, tokens: &[usize]) -> Result<Var> {
        if self.encoder.is_some() {
            return self.encode(ctx, tokens);
        }
        let (Some(stack), Some(table)) = (&self.decoder, &self.tgt_embed) else {
            return Err(Error::Config("model has neither encoder nor decoder".into()));
        };
        if tokens.is_empty() {
            return Err(Error::Contract("cannot encode an empty sequence".into()));
        }
        let segs = segments_of(&[tokens]);
        let x = self.embed(ctx, table, &[(tokens, 0)])?;
        self.run_stack(ctx, stack, x, &segs, None, None)
    }

    pub fn cache_widths(&self) -> Vec<usize> {
        let Some(stack) = &self.decoder else {
            return Vec::new();
        };
        let stages = self.cfg.sublayer.integrator.stages();
        let mut w = Vec::new();
        for layer in &stack.layers {
            let width = match &layer.mix.core {
                Mixer::Attn(p, _) => p.kv_width(),
                Mixer::Ssm(_) => 0,
            };
            w.extend(std::iter::repeat_n(width, stages));
        }
        w
    }

    /// Runs the encoder (if any) and returns an empty decoding state.
    pub fn start_decode(&self, ctx: &Ctx<T>, src: Option<&[usize]>) -> Result<DecodeState<T>> {
        let source = match (self.cfg.arch, src) {
            (Architecture::EncoderDecoder, Some(src)) => {
                if src.is_empty() {
                    return Err(Error::EmptySource);
                }
                let (h, segs) = self.encode_batch(ctx, &[src])?;
                let mems = self.cross_memories(ctx, h, &segs)?;
                Some(SourceMemory {
                    layers: mems[0]
                        .iter()
                        .map(|(m, _)| ((*ctx.tape.value(m.k)).clone(), (*ctx.tape.value(m.v)).clone()))
                        .collect(),
                    pad: segs[0].pad.clone(),
                })
            }
            (Architecture::EncoderDecoder, None) => return Err(Error::Contract("encoder-decoder model needs a source".into())),
            (Architecture::EncoderOnly, _) => return Err(Error::Config("model has no decoder".into())),
            (_, Some(_)) => return Err(Error::Contract("decoder-only model takes no source".into())),
            (_, None) => None,
        };
        Ok(DecodeState {
            cache: KVCache::new(&self.cache_widths()),
            source,
            pos: 0,
            dropped: 0,
        })
    }

    /// Feeds `tokens` at positions state.pos.. against the cached history,
    /// appending their keys and values. Returns logits, one row per token.
    pub fn forward_cached(&self, ctx: &Ctx<T>, state: &mut DecodeState<T>, tokens: &[usize]) -> Result<Var> {
        let (Some(stack), Some(table)) = (&self.decoder, &self.tgt_embed) else {
            return Err(Error::Config("model has no decoder".into()));
        };
        if tokens.is_empty() {
            return Err(Error::Contract("no tokens to decode".into()));
        }
        let have = state.cache.uniform_len()? + state.dropped;
        if have != state.pos {
            return Err(Error::State(format!("cache holds {have} positions, state is at {}", state.pos)));
        }
        let seg = Segment {
            start: 0,
            len: tokens.len(),
            pos0: state.pos,
            pad: vec![false; tokens.len()],
        };
        let cross = state.source.as_ref().map(|s| {
            vec![s
                .layers
                .iter()
                .map(|(k, v)| {
                    (
                        CrossMemory {
                            k: ctx.tape.constant(k.clone()),
                            v: ctx.tape.constant(v.clone()),
                            len: k.rows(),
                        },
                        s.pad.clone(),
                    )
                })
                .collect::<Vec<_>>()]
        });
        let x = self.embed(ctx, table, &[(tokens, state.pos)])?;
        let h = self.run_stack(ctx, stack, x, std::slice::from_ref(&seg), cross.as_deref(), Some(&mut state.cache))?;
        state.pos += tokens.len();
        self.head(ctx, h)
    }

    /// Next-token distribution given the full prefix (starting with SOS);
    /// the cache must already hold every prefix position but the last.
    pub fn decode_step(&self, ctx: &Ctx<T>, state: &mut DecodeState<T>, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.is_empty() || state.pos + 1 != prefix.len() {
            return Err(Error::State(format!("prefix of {} tokens with {} cached", prefix.len(), state.pos)));
        }
        let logits = self.forward_cached(ctx, state, &prefix[prefix.len() - 1..])?;
        let p = crate::tensor::softmax_rows(&ctx.tape.value(logits), None)?;
        Ok(p.data().iter().map(|x| x.as_f64()).collect())
    }

    /// Σ_i log Pr(y_i | SOS, y_<i, x).
    pub fn sequence_logprob(&self, ctx: &Ctx<T>, x: Option<&[usize]>, y: &[usize]) -> Result<f64> {
        if let Some(&id) = y.iter().chain(x.unwrap_or(&[])).find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::Vocab { id, size: self.cfg.vocab });
        }
        if y.is_empty() {
            return Ok(0.0);
        }
        let mut input = Vec::with_capacity(y.len());
        input.push(SOS);
        input.extend_from_slice(&y[..y.len() - 1]);
        let src = x.map(|s| vec![s]);
        let logits = self.decoder_logits(ctx, src.as_deref(), &[&input])?;
        let lp = crate::tensor::log_softmax_rows(&ctx.tape.value(logits));
        Ok(y.iter().enumerate().map(|(i, &t)| lp.at(i, t).as_f64()).sum())
    }

    /// Sentence vector from encoder output: row 0 (requires CLS first) or
    /// the mean of non-PAD rows.
    pub fn pool(&self, ctx: &Ctx<T>, h: Var, tokens: &[usize], mode: Pooling) -> Result<Var> {
        let t = ctx.tape;
        match mode {
            Pooling::Cls => {
                if tokens.first() != Some(&CLS) {
                    return Err(Error::Contract("CLS pooling needs the CLS token first".into()));
                }
                t.slice_rows(h, 0, 1)
            }
            Pooling::Mean => {
                let n = tokens.iter().filter(|&&x| x != PAD).count();
                if n == 0 {
                    return Err(Error::Contract("mean pooling over an all-PAD sequence".into()));
                }
                let w = Tensor::from_fn(1, tokens.len(), |_, j| if tokens[j] != PAD { T::one() / T::of_usize(n) } else { T::zero() });
                t.matmul(t.constant(w), h)
            }
        }
    }

    pub fn embed_text(&self, ctx: &Ctx<T>, tokens: &[usize], mode: Pooling) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let h = self.hidden(ctx, tokens)?;
        let v = self.pool(ctx, h, tokens, mode)?;
        Ok(ctx.tape.value(v).data().iter().map(|x| x.as_f64()).collect())
    }

    pub fn similarity(&self, a: &[usize], b: &[usize], mode: Pooling, metric: Metric) -> Result<f64> {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &self.store);
        let va = self.embed_text(&ctx, a, mode)?;
        let vb = self.embed_text(&ctx, b, mode)?;
        vector_similarity(&va, &vb, metric)
    }
}

pub fn vector_similarity(a: &[f64], b: &[f64], metric: Metric) -> Result<f64> {
    match metric {
        Metric::Euclidean => Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()),
        Metric::Cosine => {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            Ok((dot / (na * nb)).clamp(-1.0, 1.0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EOS;

    fn small(arch: Architecture) -> ModelConfig {
        let mut c = ModelConfig::new(arch, 2, 8, 2, 12);
        c.d_ffn = 16;
        c
    }

    #[test]
    fn rejects_zero_layers() {
        let mut c = small(Architecture::DecoderOnly);
        c.layers = 0;
        assert!(matches!(Model::<f64>::new(c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_head_gives_uniform() {
        let mut m = Model::<f64>::new(small(Architecture::DecoderOnly), 1).unwrap();
        let wo = m.wo.unwrap();
        m.store.set(wo, Tensor::zeros(8, 12));
        let t = Tape::inference();
        let ctx = Ctx::new(&t, &m.store);
        let mut st = m.start_decode(&ctx, None).unwrap();
        let p = m.decode_step(&ctx, &mut st, &[SOS]).unwrap();
        for x in p {
            assert!((x - 1.0 / 12.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cached_matches_full() {
        for arch in [Architecture::DecoderOnly, Architecture::EncoderDecoder] {
            let m = Model::<f64>::new(small(arch), 2).unwrap();
            let t = Tape::inference();
            let ctx = Ctx::new(&t, &m.store);
            let src = [5, 6, 7, EOS];
            let y = [SOS, 8, 9, 10, 6, 5];
            let srcs = [&src[..]];
            let full = m.decoder_logits(&ctx, (arch == Architecture::EncoderDecoder).then_some(&srcs[..]), &[&y]).unwrap();
            let mut st = m.start_decode(&ctx, (arch == Architecture::EncoderDecoder).then_some(&src[..])).unwrap();
            for i in 0..y.len() {
                let row = m.forward_cached(&ctx, &mut st, &y[i..=i]).unwrap();
                let want = t.value(full);
                for (a, b) in t.value(row).data().iter().zip(want.row(i)) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
            let mut bad = st.clone();
            bad.pos += 1;
            assert!(matches!(m.forward_cached(&ctx, &mut bad, &[5]), Err(Error::State(_))));
        }
    }

    #[test]
    fn config_round_trip() {
        let mut c = small(Architecture::EncoderDecoder).with_norm(Norm::Pre);
        c.field = Some(FieldPattern::Hybrid(vec![FieldPattern::Window { size: 3 }, FieldPattern::Global { positions: vec![0, 4] }]));
        c.moe = Some(MoeConfig {
            experts: 4,
            k: 2,
            routing: Routing::TopKSoftmax,
        });
        c.share = vec![vec![0, 1]];
        c.rpr = Some((3, vec![RprRole::Key]));
        let back = ModelConfig::from_config(&Config::parse(&c.to_config().to_text()).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn pooling_contracts() {
        let m = Model::<f64>::new(small(Architecture::EncoderOnly), 3).unwrap();
        let t = Tape::inference();
        let ctx = Ctx::new(&t, &m.store);
        let toks = [6, 7, 8];
        let h = m.encode(&ctx, &toks).unwrap();
        assert!(matches!(m.pool(&ctx, h, &toks, Pooling::Cls), Err(Error::Contract(_))));
        assert!(matches!(m.encode(&ctx, &[]), Err(Error::Contract(_))));
        let s = m.similarity(&toks, &toks, Pooling::Mean, Metric::Cosine).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
