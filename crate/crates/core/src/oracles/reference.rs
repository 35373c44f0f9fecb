//! Scalar-loop, 64-bit reference implementations. Nothing here calls into
//! the tensor engine; inputs and outputs are plain nested vectors.

pub type M = Vec<Vec<f64>>;

pub fn zeros(r: usize, c: usize) -> M {
    vec![vec![0.0; c]; r]
}

pub fn random(r: usize, c: usize, scale: f64, next: &mut impl FnMut() -> f64) -> M {
    (0..r).map(|_| (0..c).map(|_| scale * (2.0 * next() - 1.0)).collect()).collect()
}

pub fn matmul(a: &M, b: &M) -> M {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut c = zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            c[i][j] = s;
        }
    }
    c
}

pub fn transpose(a: &M) -> M {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn cols(a: &M, start: usize, len: usize) -> M {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

pub fn hcat(parts: &[M]) -> M {
    (0..parts[0].len()).map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect()).collect()
}

pub fn max_abs_diff(a: &M, b: &M) -> f64 {
    let mut m: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(y) {
            m = m.max((p - q).abs());
        }
    }
    m
}

pub fn max_abs(a: &M) -> f64 {
    a.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// α_ij = exp(s_ij) / Σ_j' exp(s_ij'), out_i = Σ_j α_ij v_j, where
/// s_ij = q_i·k_j/√d + bias(i, j) and `allowed(i, j)` removes pairs.
pub fn attention(q: &M, k: &M, v: &M, allowed: &dyn Fn(usize, usize) -> bool, bias: &dyn Fn(usize, usize) -> f64) -> M {
    let d = q[0].len() as f64;
    let mut out = zeros(q.len(), v[0].len());
    for i in 0..q.len() {
        let mut s = vec![f64::NEG_INFINITY; k.len()];
        for j in 0..k.len() {
            if allowed(i, j) {
                let mut dot = 0.0;
                for c in 0..q[i].len() {
                    dot += q[i][c] * k[j][c];
                }
                s[j] = dot / d.sqrt() + bias(i, j);
            }
        }
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &x in &s {
            if x > f64::NEG_INFINITY {
                z += (x - mx).exp();
            }
        }
        for j in 0..k.len() {
            if s[j] > f64::NEG_INFINITY {
                let a = (s[j] - mx).exp() / z;
                for c in 0..v[0].len() {
                    out[i][c] += a * v[j][c];
                }
            }
        }
    }
    out
}

/// Multi-head attention from raw inputs: per-head projections, loop
/// attention, concatenation and output projection.
#[allow(clippy::too_many_arguments)]
pub fn multi_head(x_q: &M, x_kv: &M, wq: &M, wk: &M, wv: &M, wc: &M, heads: usize, allowed: &dyn Fn(usize, usize) -> bool) -> M {
    let (q, k, v) = (matmul(x_q, wq), matmul(x_kv, wk), matmul(x_kv, wv));
    let dh = q[0].len() / heads;
    let shared = k[0].len() == dh;
    let parts: Vec<M> = (0..heads)
        .map(|h| {
            let kh = if shared { k.clone() } else { cols(&k, h * dh, dh) };
            let vh = if shared { v.clone() } else { cols(&v, h * dh, dh) };
            attention(&cols(&q, h * dh, dh), &kh, &vh, allowed, &|_, _| 0.0)
        })
        .collect();
    matmul(&hcat(&parts), wc)
}

/// Relative-position attention for one head: logits (q_i + a^q_ij)·(k_j +
/// a^k_ij)/√d, outputs Σ_j α_ij (v_j + a^v_ij), with a^·_ij the table row
/// for the offset j − i clipped to ±clip.
pub fn rpr_attention(q: &M, k: &M, v: &M, clip: usize, tq: Option<&M>, tk: Option<&M>, tv: Option<&M>, causal: bool) -> M {
    let d = q[0].len() as f64;
    let row = |t: Option<&M>, i: usize, j: usize| -> Vec<f64> {
        match t {
            None => vec![0.0; q[0].len()],
            Some(t) => {
                let off = (j as i64 - i as i64).clamp(-(clip as i64), clip as i64) + clip as i64;
                t[off as usize].clone()
            }
        }
    };
    let mut out = zeros(q.len(), v[0].len());
    for i in 0..q.len() {
        let keys: Vec<usize> = (0..k.len()).filter(|&j| !causal || j <= i).collect();
        let mut s = Vec::new();
        for &j in &keys {
            let (aq, ak) = (row(tq, i, j), row(tk, i, j));
            let mut dot = 0.0;
            for c in 0..q[0].len() {
                dot += (q[i][c] + aq[c]) * (k[j][c] + ak[c]);
            }
            s.push(dot / d.sqrt());
        }
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
        for (n, &j) in keys.iter().enumerate() {
            let a = (s[n] - mx).exp() / z;
            let av = row(tv, i, j);
            for c in 0..v[0].len() {
                out[i][c] += a * (v[j][c] + av[c]);
            }
        }
    }
    out
}

/// Causal kernelized attention by its definition:
/// out_i = Σ_{j≤i} φ(q_i)·φ(k_j) v_j / Σ_{j≤i} φ(q_i)·φ(k_j).
pub fn kernel_attention(q: &M, k: &M, v: &M, phi: &dyn Fn(f64) -> f64, causal: bool) -> M {
    let mut out = zeros(q.len(), v[0].len());
    for i in 0..q.len() {
        let mut num = vec![0.0; v[0].len()];
        let mut den = 0.0;
        for j in 0..k.len() {
            if causal && j > i {
                break;
            }
            let mut w = 0.0;
            for c in 0..q[0].len() {
                w += phi(q[i][c]) * phi(k[j][c]);
            }
            den += w;
            for c in 0..v[0].len() {
                num[c] += w * v[j][c];
            }
        }
        for c in 0..v[0].len() {
            out[i][c] = num[c] / den;
        }
    }
    out
}

pub fn layer_norm(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sigma = var.sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| g * (v - mu) / (sigma + eps) + b).collect()
}

/// P^t by repeated multiplication.
pub fn power(a: &M, t: usize) -> M {
    let n = a.len();
    let mut p: M = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..t {
        p = matmul(&p, a);
    }
    p
}

/// o_t = Σ_{i≤t} s_i B Aᵗ⁻ⁱ C + s_t D, written out term by term.
pub fn ssm_unrolled(a: &M, b: &M, c: &M, d: &M, s: &M) -> M {
    let mut out = Vec::with_capacity(s.len());
    for t in 0..s.len() {
        let mut o = matmul(&[s[t].clone()].to_vec(), d);
        for i in 0..=t {
            let term = matmul(&matmul(&matmul(&[s[i].clone()].to_vec(), b), &power(a, t - i)), c);
            o = add(&o, &term);
        }
        out.push(o.remove(0));
    }
    out
}

/// Central differences of `f` at `x` with step `h`.
pub fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let dn = f(&xp);
            xp[i] = x[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// Norm-wise relative error ‖a − b‖ / max(‖a‖, ‖b‖, floor).
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Numerical rank by Gaussian elimination with partial pivoting.
pub fn rank(a: &M, tol: f64) -> usize {
    let mut m = a.clone();
    let (rows, cols) = (m.len(), m[0].len());
    let mut r = 0;
    for c in 0..cols {
        if r == rows {
            break;
        }
        let piv = (r..rows).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).expect("rows left");
        if m[piv][c].abs() <= tol {
            continue;
        }
        m.swap(r, piv);
        for i in r + 1..rows {
            let f = m[i][c] / m[r][c];
            for j in c..cols {
                m[i][j] -= f * m[r][j];
            }
        }
        r += 1;
    }
    r
}

/// Every length-`len` sequence over `0..vocab`, in lexicographic order.
pub fn all_sequences(vocab: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|s| {
                (0..vocab).map(move |t| {
                    let mut s2 = s.clone();
                    s2.push(t);
                    s2
                })
            })
            .collect();
    }
    out
}

/// One explicit RK step of z' = λz.
pub fn rk_scalar(lambda: f64, z: f64, h: f64, order: usize) -> f64 {
    let f = |x: f64| lambda * x;
    match order {
        1 => z + h * f(z),
        _ => {
            let k1 = f(z);
            let k2 = f(z + h / 2.0 * k1);
            let k3 = f(z + h / 2.0 * k2);
            let k4 = f(z + h * k3);
            z + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        }
    }
}
