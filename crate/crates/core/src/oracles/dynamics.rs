//! State-space, normalization, integrator, dropout, mixture-of-experts and
//! parameter-sharing families.

use std::collections::HashMap;

use super::reference::{self as r, M};
use super::system::small_model;
use super::{rmat, Outcome, Tolerances};
use crate::blocks::{layer_dropout, layer_norm, moe_ffn, rk_sublayer, top_k, LNParams, MoEParams, Routing};
use crate::ctx::Ctx;
use crate::error::Result;
use crate::model::{Architecture, Model};
use crate::ssm::{apply_kernel, build_kernel, diagonalize, discretize, random_continuous, scan_recurrent, ContinuousSSM, Discretization, DiscreteSSM, Mat, SsmConfig, SsmInit};
use crate::tensor::{HasParams, ParamId, ParamStore, Rng, Tape, Tensor, Var};

fn m_of(x: &Mat) -> M {
    (0..x.nrows()).map(|i| (0..x.ncols()).map(|j| x[(i, j)]).collect()).collect()
}

fn mat(m: &M) -> Mat {
    Mat::from_fn(m.len(), m[0].len(), |i, j| m[i][j])
}

fn unrolled(ds: &DiscreteSSM, s: &M) -> M {
    r::ssm_unrolled(&m_of(ds.a()), &m_of(ds.b()), &m_of(ds.c()), &m_of(ds.d()), s)
}

fn random_discrete(rng: &mut Rng, init: SsmInit) -> Result<DiscreteSSM> {
    let cfg = SsmConfig {
        d_state: 3,
        dt: 0.1,
        method: Discretization::Zoh,
        init,
    };
    discretize(&random_continuous(2, &cfg, rng)?, Discretization::Zoh)
}

pub fn bilinear_sweep(_rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let gap = |dt: f64| -> Result<f64> {
        let one = || Mat::from_element(1, 1, 1.0);
        let c = ContinuousSSM::new(Mat::from_element(1, 1, -1.0), one(), one(), one(), dt)?;
        let b = discretize(&c, Discretization::Bilinear)?.a()[(0, 0)];
        let z = discretize(&c, Discretization::Zoh)?.a()[(0, 0)];
        Ok((b - z).abs())
    };
    let ratio = gap(0.1)? / gap(0.05)?;
    // At least second-order agreement: the gap must shrink by 4x or more.
    let floor = 4.0 * (1.0 - tol.ratio);
    Ok(Outcome::new(floor / ratio, 1.0, format!("gap ratio {ratio:.2} on halving dt (>= {floor:.1} required)")))
}

pub fn ssm_closed_form(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let ds = random_discrete(rng, SsmInit::Random)?;
    let s16 = rmat(rng, 16, 2, 1.0);
    let mut worst = r::max_abs_diff(&m_of(&scan_recurrent(&ds, &mat(&s16))), &unrolled(&ds, &s16));
    let s32 = rmat(rng, 32, 2, 1.0);
    let conv = apply_kernel(&build_kernel(&ds, 32), ds.d(), &mat(&s32))?;
    worst = worst.max(r::max_abs_diff(&m_of(&conv), &unrolled(&ds, &s32)));
    Ok(Outcome::new(worst, tol.tight, "scan at n = 16, convolution at n = 32"))
}

pub fn ssm_conv_vs_scan(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let ds = random_discrete(rng, SsmInit::Random)?;
    let s = mat(&rmat(rng, 32, 2, 1.0));
    let conv = apply_kernel(&build_kernel(&ds, 32), ds.d(), &s)?;
    let scan = scan_recurrent(&ds, &s);
    Ok(Outcome::new(m_of(&(conv - scan)).iter().flatten().fold(0.0f64, |m, x| m.max(x.abs())), tol.tight, "n = 32"))
}

pub fn ssm_diagonal_powers(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let ds = random_discrete(rng, SsmInit::DiagUniform)?;
    if !ds.is_diagonal() {
        return Ok(Outcome::new(f64::INFINITY, 0.0, "zero-order hold of a diagonal system was not diagonal"));
    }
    let kernel = build_kernel(&ds, 12);
    let (a, b, c) = (m_of(ds.a()), m_of(ds.b()), m_of(ds.c()));
    let mut worst: f64 = 0.0;
    for t in 0..12 {
        let want = r::matmul(&r::matmul(&b, &r::power(&a, t)), &c);
        worst = worst.max(r::max_abs_diff(&m_of(kernel.lag(t)), &want));
    }
    Ok(Outcome::new(worst, tol.tight, "lags 0..12"))
}

/// Ā = I + A for a random symmetric A (Euler with Δt = 1), so the spectrum
/// is real.
fn symmetric_discrete(rng: &mut Rng) -> Result<DiscreteSSM> {
    let n = 4;
    let g = rmat(rng, n, n, 0.3);
    let a = Mat::from_fn(n, n, |i, j| g[i][j] + g[j][i] - if i == j { 0.5 } else { 0.0 });
    let b = mat(&rmat(rng, 2, n, 1.0));
    let c = mat(&rmat(rng, n, 2, 1.0));
    let d = mat(&rmat(rng, 2, 2, 1.0));
    discretize(&ContinuousSSM::new(a, b, c, d, 1.0)?, Discretization::Euler)
}

pub fn ssm_diagonalized(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let ds = symmetric_discrete(rng)?;
    let diag = diagonalize(&ds)?;
    let s = rmat(rng, 16, 2, 1.0);
    let got = m_of(&scan_recurrent(&diag.ssm, &mat(&s)));
    Ok(Outcome::new(r::max_abs_diff(&got, &unrolled(&ds, &s)), tol.diag, "16 steps, symmetric 4x4 transition"))
}

pub fn ssm_eigen_residual(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let ds = symmetric_discrete(rng)?;
    let diag = diagonalize(&ds)?;
    let recon = r::matmul(&r::matmul(&m_of(&diag.p_inv), &m_of(diag.ssm.a())), &m_of(&diag.p));
    Ok(Outcome::new(r::max_abs_diff(&recon, &m_of(ds.a())), tol.tight, "max |P^-1 L P - A|"))
}

pub fn ln_moments(rng: &mut Rng, _tol: &Tolerances) -> Result<Outcome> {
    let d = 64;
    let mut store = ParamStore::<f64>::new();
    let ln = LNParams::new(&mut store, "ln", d, 1e-12)?;
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store);
    let shift = rng.uniform_in(-5.0, 5.0);
    let cells: Vec<f64> = (0..d).map(|_| shift + rng.uniform_in(-3.0, 3.0)).collect();
    let x = Tensor::matrix(1, d, cells)?;
    let y = tape.value(layer_norm(&ctx, tape.constant(x), &ln)?);
    let v = y.data();
    let mean = v.iter().sum::<f64>() / d as f64;
    let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64).sqrt();
    let score = (mean.abs() / 1e-6).max((std - 1.0).abs() / 1e-3);
    Ok(Outcome::new(score, 1.0, format!("mean {mean:.1e}, std {std:.6}")))
}

pub fn rk_order_ratio(_rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let ratios = rk_error_ratios(-0.3, 0.5)?;
    let worst = ratios.iter().map(|&(p, ratio)| (ratio / 2f64.powi(p as i32 + 1) - 1.0).abs()).fold(0.0, f64::max);
    let detail = ratios.iter().map(|(p, ratio)| format!("order {p}: {ratio:.2}")).collect::<Vec<_>>().join(", ");
    Ok(Outcome::new(worst, tol.ratio, detail))
}

/// Local error |RK_p(z=1, h) − e^{λh}| at h and h/2 through the tape
/// integrator, for p ∈ {1, 4}. Returns (p, error ratio).
pub fn rk_error_ratios(lambda: f64, h: f64) -> Result<Vec<(usize, f64)>> {
    let store = ParamStore::<f64>::new();
    let err = |order: usize, h: f64| -> Result<f64> {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let z = tape.constant(Tensor::full(1, 1, 1.0));
        let out = rk_sublayer(&ctx, z, order, h, |x, _| Ok(tape.scale(x, lambda)))?;
        let got = tape.value(out).at(0, 0);
        debug_assert!((got - r::rk_scalar(lambda, 1.0, h, order)).abs() < 1e-12);
        Ok((got - (lambda * h).exp()).abs())
    };
    [1, 4].into_iter().map(|p| Ok((p, err(p, h)? / err(p, h / 2.0)?))).collect()
}

pub fn layer_dropout_mc(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let d = 4;
    let rho = 0.7;
    let mut store = ParamStore::<f64>::new();
    let ln = LNParams::new(&mut store, "ln", d, 1e-6)?;
    let w = store.add("w", Tensor::uniform(d, d, -1.0, 1.0, rng));
    let x = Tensor::uniform(3, d, -1.0, 1.0, rng);
    let samples = 10_000;
    let run = |ctx: &Ctx<f64>| -> Result<Tensor<f64>> {
        let f = |v: Var| ctx.linear(v, w);
        let z = ctx.tape.constant(x.clone());
        Ok((*ctx.tape.value(layer_dropout(ctx, z, &[(&ln, &f)], rho)?)).clone())
    };
    let infer = {
        let tape = Tape::inference();
        run(&Ctx::new(&tape, &store))?
    };
    let mut mean = Tensor::<f64>::zeros(3, d);
    let mut kept = Rng::new(rng.next_u64());
    for _ in 0..samples {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store).training(kept.split());
        mean.add_assign(&run(&ctx)?)?;
    }
    let mean = mean.scale(1.0 / samples as f64);
    let rel = mean.sub(&infer)?.norm() / infer.norm();
    Ok(Outcome::new(rel, tol.mc, format!("{samples} train-mode samples, keep 0.7")))
}

pub fn moe_sort(rng: &mut Rng, _tol: &Tolerances) -> Result<Outcome> {
    let (d, m, k, rows) = (6, 8, 2, 10);
    let mut store = ParamStore::<f64>::new();
    let p = MoEParams::new(&mut store, "moe", d, 8, m, k, Routing::SoftmaxTopK, rng)?;
    let h = rmat(rng, rows, d, 2.0);
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store);
    let out = moe_ffn(&ctx, tape.constant(super::to_tensor(&h)), &p)?;
    let logits = r::matmul(&h, &super::of_tensor(store.get(p.wg)));
    let brute = |w: &[f64]| -> Vec<usize> {
        let mut pairs: Vec<(f64, usize)> = w.iter().copied().zip(0..).collect();
        // Bubble sort keeps the oracle free of library comparators.
        for i in 0..pairs.len() {
            for j in 0..pairs.len() - 1 - i {
                let (a, b) = (pairs[j], pairs[j + 1]);
                if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                    pairs.swap(j, j + 1);
                }
            }
        }
        pairs.iter().take(k).map(|p| p.1).collect()
    };
    let mut misses = 0;
    for (i, row) in logits.iter().enumerate() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
        let gates: Vec<f64> = row.iter().map(|x| (x - mx).exp() / z).collect();
        misses += usize::from(out.selected[i] != brute(&gates));
    }
    for ties in [vec![0.2, 0.5, 0.5, 0.1], vec![0.25; 4], vec![0.1, 0.3, 0.3, 0.3]] {
        misses += usize::from(top_k(&ties, 2) != brute(&ties));
    }
    Ok(Outcome::new(misses as f64, 0.0, "10 routed rows plus 3 tie cases"))
}

/// Tied model with layers {0, 1} shared, and an untied model holding
/// copies of the shared weights in both layers.
fn tied_pair(seed: u64) -> Result<(Model<f64>, Model<f64>, Vec<ParamId>, Vec<ParamId>)> {
    let mut tied = small_model(Architecture::DecoderOnly, 12, seed, |c| c.share = vec![vec![0, 1]])?;
    let mut untied = small_model(Architecture::DecoderOnly, 12, seed, |_| {})?;
    for id in untied.store.ids().collect::<Vec<_>>() {
        if let Some(src) = tied.store.find(untied.store.name(id)) {
            untied.store.set(id, tied.store.get(src).clone());
        }
    }
    let tied_ids = tied.decoder.as_mut().expect("decoder").layers[0].param_ids();
    let dec = untied.decoder.as_mut().expect("decoder");
    let (l0, l1) = (dec.layers[0].param_ids(), dec.layers[1].param_ids());
    for ((&t, &a), &b) in tied_ids.iter().zip(&l0).zip(&l1) {
        let v = tied.store.get(t).clone();
        untied.store.set(a, v.clone());
        untied.store.set(b, v);
    }
    Ok((tied, untied, l0, l1))
}

const TIED_INPUT: [usize; 6] = [1, 7, 9, 5, 11, 6];

fn logits_of(model: &Model<f64>) -> Result<Tensor<f64>> {
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &model.store);
    Ok((*tape.value(model.decoder_logits(&ctx, None, &[&TIED_INPUT])?)).clone())
}

pub fn tied_stack_forward(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let (tied, untied, _, _) = tied_pair(rng.next_u64())?;
    Ok(Outcome::new(logits_of(&tied)?.max_abs_diff(&logits_of(&untied)?), tol.tight, "2-layer decoder, layers 0 and 1 tied"))
}

pub fn tied_gradient_sum(rng: &mut Rng, tol: &Tolerances) -> Result<Outcome> {
    let (tied, untied, l0, l1) = tied_pair(rng.next_u64())?;
    let mut tied_clone = tied.clone();
    let shared = tied_clone.decoder.as_mut().expect("decoder").layers[0].param_ids();
    let shape = logits_of(&tied)?;
    let w = Tensor::<f64>::uniform(shape.rows(), shape.cols(), -1.0, 1.0, rng);
    let grads = |m: &Model<f64>| -> Result<HashMap<ParamId, Tensor<f64>>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &m.store);
        let l = m.decoder_logits(&ctx, None, &[&TIED_INPUT])?;
        let loss = tape.sum(tape.mul(l, tape.constant(w.clone()))?);
        Ok(tape.backward(loss)?.into_params())
    };
    let loss = |m: &Model<f64>| -> Result<f64> { Ok(logits_of(m)?.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()) };
    let (gt, gu) = (grads(&tied)?, grads(&untied)?);
    let zero = |id: ParamId, m: &Model<f64>| Tensor::zeros(m.store.get(id).rows(), m.store.get(id).cols());
    let (mut summed, mut direct, mut fd) = (Vec::new(), Vec::new(), Vec::new());
    let mut probe = tied.clone();
    for (i, &t) in shared.iter().enumerate() {
        let a = gu.get(&l0[i]).cloned().unwrap_or_else(|| zero(l0[i], &untied));
        let b = gu.get(&l1[i]).cloned().unwrap_or_else(|| zero(l1[i], &untied));
        let g = gt.get(&t).cloned().unwrap_or_else(|| zero(t, &tied));
        let n = g.len();
        for _ in 0..3 {
            let c = rng.below(n);
            summed.push(a.data()[c] + b.data()[c]);
            direct.push(g.data()[c]);
            let h = 1e-5;
            let x0 = probe.store.get(t).data()[c];
            probe.store.get_mut(t).data_mut()[c] = x0 + h;
            let up = loss(&probe)?;
            probe.store.get_mut(t).data_mut()[c] = x0 - h;
            let dn = loss(&probe)?;
            probe.store.get_mut(t).data_mut()[c] = x0;
            fd.push((up - dn) / (2.0 * h));
        }
    }
    let worst = r::rel_err(&summed, &fd, 1e-8).max(r::rel_err(&direct, &summed, 1e-8));
    Ok(Outcome::new(worst, tol.grad_rel, format!("{} coordinates over {} shared tensors", fd.len(), shared.len())))
}
