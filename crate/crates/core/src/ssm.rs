//! Linear state-space layers: z' = zA + sB, o = zC + sD over row-vector
//! states, discretized three ways and run either as a recurrence or as a
//! causal convolution.

use nalgebra::DMatrix;

use crate::ctx::Ctx;
use crate::error::{Error, Result};
use crate::tensor::{xavier_init, Float, HasParams, InitDist, ParamId, ParamStore, Rng, Tensor, Var};

pub type Mat = DMatrix<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Discretization {
    Euler,
    Bilinear,
    Zoh,
}

impl std::str::FromStr for Discretization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Discretization::Euler),
            "bilinear" => Ok(Discretization::Bilinear),
            "zoh" => Ok(Discretization::Zoh),
            _ => Err(Error::Config(format!("unknown discretization '{s}'"))),
        }
    }
}

/// A: d_z×d_z, B: d×d_z, C: d_z×d, D: d×d.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousSSM {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
    pub dt: f64,
}

impl ContinuousSSM {
    pub fn new(a: Mat, b: Mat, c: Mat, d: Mat, dt: f64) -> Result<Self> {
        let (dz, dm) = (a.nrows(), d.nrows());
        let ok = a.is_square()
            && b.shape() == (dm, dz)
            && c.shape() == (dz, dm)
            && d.is_square();
        if !ok {
            return Err(Error::Shape {
                op: "ssm",
                detail: format!("A {:?} B {:?} C {:?} D {:?}", a.shape(), b.shape(), c.shape(), d.shape()),
            });
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Config(format!("ssm step {dt} must be finite and positive")));
        }
        Ok(ContinuousSSM { a, b, c, d, dt })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn model_dim(&self) -> usize {
        self.d.nrows()
    }
}

/// Discrete parameters; only [`discretize`] and [`diagonalize`] build these.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSSM {
    a: Mat,
    b: Mat,
    c: Mat,
    d: Mat,
    method: Discretization,
}

impl DiscreteSSM {
    pub fn a(&self) -> &Mat {
        &self.a
    }
    pub fn b(&self) -> &Mat {
        &self.b
    }
    pub fn c(&self) -> &Mat {
        &self.c
    }
    pub fn d(&self) -> &Mat {
        &self.d
    }
    pub fn method(&self) -> Discretization {
        self.method
    }

    pub fn is_diagonal(&self) -> bool {
        let n = self.a.nrows();
        (0..n).all(|i| (0..n).all(|j| i == j || self.a[(i, j)] == 0.0))
    }
}

fn inverse(m: Mat, what: &str) -> Result<Mat> {
    m.try_inverse().ok_or_else(|| Error::Singular(what.into()))
}

/// (e^X − I)X⁻¹ for X = Δt·A, falling back to I + X/2 + X²/6 when ‖X‖ is tiny.
fn phi1(x: &Mat) -> Result<Mat> {
    let n = x.nrows();
    let eye = Mat::identity(n, n);
    if x.norm() < 1e-6 {
        return Ok(&eye + x * 0.5 + x * x / 6.0);
    }
    let e = x.clone().exp();
    Ok((e - &eye) * inverse(x.clone(), "Δt·A in zero-order hold")?)
}

pub fn discretize(ssm: &ContinuousSSM, method: Discretization) -> Result<DiscreteSSM> {
    let n = ssm.state_dim();
    let eye = Mat::identity(n, n);
    let x = &ssm.a * ssm.dt;
    let (a, b) = match method {
        Discretization::Euler => (&eye + &x, &ssm.b * ssm.dt),
        Discretization::Bilinear => {
            let inv = inverse(&eye - &x * 0.5, "I − Δt/2·A in bilinear transform")?;
            ((&eye + &x * 0.5) * &inv, &ssm.b * ssm.dt * inv)
        }
        Discretization::Zoh => (x.clone().exp(), &ssm.b * ssm.dt * phi1(&x)?),
    };
    Ok(DiscreteSSM { a, b, c: ssm.c.clone(), d: ssm.d.clone(), method })
}

/// Rows of `inputs` are s_0..s_n; returns o_0..o_n with zero initial state.
pub fn scan_recurrent(dssm: &DiscreteSSM, inputs: &Mat) -> Mat {
    let n = inputs.nrows();
    let mut z = Mat::zeros(1, dssm.a.nrows());
    let mut out = Mat::zeros(n, dssm.d.ncols());
    for t in 0..n {
        let s = inputs.rows(t, 1);
        z = &z * &dssm.a + s * &dssm.b;
        out.set_row(t, &(&z * &dssm.c + s * &dssm.d).row(0));
    }
    out
}

/// W_t = B̄·Āᵗ·C̄ for t = 0..n_max−1, stored by lag t.
#[derive(Clone, Debug, PartialEq)]
pub struct SSMKernel {
    weights: Vec<Mat>,
}

impl SSMKernel {
    pub fn n_max(&self) -> usize {
        self.weights.len()
    }

    pub fn lag(&self, t: usize) -> &Mat {
        &self.weights[t]
    }

    /// Filter taps in convolution order, longest lag first.
    pub fn taps(&self) -> impl Iterator<Item = &Mat> {
        self.weights.iter().rev()
    }
}

/// Powers of a diagonal Ā are taken elementwise; otherwise by repeated
/// multiplication.
pub fn build_kernel(dssm: &DiscreteSSM, n_max: usize) -> SSMKernel {
    let dz = dssm.a.nrows();
    let mut weights = Vec::with_capacity(n_max);
    if dssm.is_diagonal() {
        let diag: Vec<f64> = (0..dz).map(|i| dssm.a[(i, i)]).collect();
        for t in 0..n_max {
            let mut bt = dssm.b.clone();
            for (j, lam) in diag.iter().enumerate() {
                let p = lam.powi(t as i32);
                bt.column_mut(j).scale_mut(p);
            }
            weights.push(bt * &dssm.c);
        }
    } else {
        let mut ba = dssm.b.clone();
        for _ in 0..n_max {
            weights.push(&ba * &dssm.c);
            ba *= &dssm.a;
        }
    }
    SSMKernel { weights }
}

/// o_t = Σ_{i≤t} s_i·W_{t−i} + s_t·D̄.
pub fn apply_kernel(kernel: &SSMKernel, d: &Mat, inputs: &Mat) -> Result<Mat> {
    let n = inputs.nrows();
    if n > kernel.n_max() {
        return Err(Error::Capacity { len: n, cap: kernel.n_max() });
    }
    let mut out = inputs * d;
    for t in 0..n {
        let mut acc = out.row(t).into_owned();
        for i in 0..=t {
            acc += inputs.row(i) * &kernel.weights[t - i];
        }
        out.set_row(t, &acc);
    }
    Ok(out)
}

/// Result of [`diagonalize`]: Λ in place of Ā, with B̄P⁻¹ and PC̄, plus the
/// change of basis P (rows are left eigenvectors of Ā).
pub struct Diagonalized {
    pub ssm: DiscreteSSM,
    pub p: Mat,
    pub p_inv: Mat,
}

/// Real eigendecomposition Ā = P⁻¹ΛP. Complex spectra and defective
/// matrices are rejected.
pub fn diagonalize(dssm: &DiscreteSSM) -> Result<Diagonalized> {
    let n = dssm.a.nrows();
    let scale = dssm.a.amax().max(1.0);
    let mut eig: Vec<f64> = dssm
        .a
        .clone()
        .schur()
        .eigenvalues()
        .ok_or_else(|| Error::Diagonalization("complex eigenvalues".into()))?
        .iter()
        .copied()
        .collect();
    eig.sort_by(|a, b| a.total_cmp(b));
    let tol = 1e-8 * scale;
    let at = dssm.a.transpose();
    let mut p = Mat::zeros(n, n);
    let mut row = 0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && (eig[j] - eig[i]).abs() < 1e-6 * scale {
            j += 1;
        }
        let mult = j - i;
        let lam = eig[i..j].iter().sum::<f64>() / mult as f64;
        let shifted = &at - Mat::identity(n, n) * lam;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.ok_or_else(|| Error::Diagonalization("svd failed".into()))?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
        for &k in order.iter().take(mult) {
            if svd.singular_values[k] > tol.sqrt() {
                return Err(Error::Diagonalization(format!("eigenvalue {lam} is defective")));
            }
            p.set_row(row, &v_t.row(k));
            row += 1;
        }
        i = j;
    }
    let p_inv = inverse(p.clone(), "eigenvectors").map_err(|_| Error::Diagonalization("eigenvectors are dependent".into()))?;
    let recon = &p_inv * Mat::from_diagonal(&nalgebra::DVector::from_vec(eig.clone())) * &p;
    if (&recon - &dssm.a).amax() > 1e-6 * scale {
        return Err(Error::Diagonalization("eigenbasis does not reconstruct the matrix".into()));
    }
    let ssm = DiscreteSSM {
        a: Mat::from_diagonal(&nalgebra::DVector::from_vec(eig)),
        b: &dssm.b * &p_inv,
        c: &p * &dssm.c,
        d: dssm.d.clone(),
        method: dssm.method,
    };
    Ok(Diagonalized { ssm, p, p_inv })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SsmInit {
    /// A = −diag(u), u ~ U(0.5, 1.5).
    #[default]
    DiagUniform,
    /// A = G/√d_z − I with Gaussian G.
    Random,
}

impl std::str::FromStr for SsmInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diag-uniform" => Ok(SsmInit::DiagUniform),
            "random" => Ok(SsmInit::Random),
            _ => Err(Error::Config(format!("unknown ssm init '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsmConfig {
    pub d_state: usize,
    pub dt: f64,
    pub method: Discretization,
    pub init: SsmInit,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            d_state: 16,
            dt: 0.1,
            method: Discretization::Zoh,
            init: SsmInit::DiagUniform,
        }
    }
}

pub fn random_continuous(d: usize, cfg: &SsmConfig, rng: &mut Rng) -> Result<ContinuousSSM> {
    let dz = cfg.d_state;
    let a = match cfg.init {
        SsmInit::DiagUniform => Mat::from_diagonal(&nalgebra::DVector::from_fn(dz, |_, _| -rng.uniform_in(0.5, 1.5))),
        SsmInit::Random => {
            let s = 1.0 / (dz as f64).sqrt();
            Mat::from_fn(dz, dz, |i, j| rng.gaussian() * s - if i == j { 1.0 } else { 0.0 })
        }
    };
    let mut take = |r: usize, c: usize| {
        let t: Tensor<f64> = xavier_init(r, c, 1.0, InitDist::Uniform, rng);
        Mat::from_row_slice(r, c, t.data())
    };
    let b = take(d, dz);
    let c = take(dz, d);
    let dm = take(d, d);
    ContinuousSSM::new(a, b, c, dm, cfg.dt)
}

/// Sub-layer replacing the self-attention core: learnable Ā, B̄, C̄, D̄
/// initialized by discretizing a continuous model.
#[derive(Clone, Debug)]
pub struct SsmLayer {
    pub a: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    pub d: ParamId,
}

fn to_tensor<T: Float>(m: &Mat) -> Tensor<T> {
    Tensor::from_fn(m.nrows(), m.ncols(), |i, j| T::of(m[(i, j)]))
}

pub fn mat_of<T: Float>(t: &Tensor<T>) -> Mat {
    Mat::from_fn(t.rows(), t.cols(), |i, j| t.at(i, j).as_f64())
}

impl SsmLayer {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize, cfg: &SsmConfig, rng: &mut Rng) -> Result<Self> {
        let ds = discretize(&random_continuous(d, cfg, rng)?, cfg.method)?;
        Ok(Self::from_discrete(store, name, &ds))
    }

    pub fn from_discrete<T: Float>(store: &mut ParamStore<T>, name: &str, ds: &DiscreteSSM) -> Self {
        SsmLayer {
            a: store.add(format!("{name}.a"), to_tensor(&ds.a)),
            b: store.add(format!("{name}.b"), to_tensor(&ds.b)),
            c: store.add(format!("{name}.c"), to_tensor(&ds.c)),
            d: store.add(format!("{name}.d"), to_tensor(&ds.d)),
        }
    }

    /// Current parameters as a 64-bit discrete model.
    pub fn discrete<T: Float>(&self, store: &ParamStore<T>, method: Discretization) -> DiscreteSSM {
        DiscreteSSM {
            a: mat_of(store.get(self.a)),
            b: mat_of(store.get(self.b)),
            c: mat_of(store.get(self.c)),
            d: mat_of(store.get(self.d)),
            method,
        }
    }

    /// Rows of `s` are positions; O = scan(S·B̄, Ā)·C̄ + S·D̄.
    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, s: Var) -> Result<Var> {
        let tape = ctx.tape;
        let u = ctx.linear(s, self.b)?;
        let z = tape.linear_scan(u, ctx.p(self.a))?;
        let o = ctx.linear(z, self.c)?;
        let skip = ctx.linear(s, self.d)?;
        tape.add(o, skip)
    }
}

impl HasParams for SsmLayer {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        f(&mut self.a);
        f(&mut self.b);
        f(&mut self.c);
        f(&mut self.d);
    }
}
