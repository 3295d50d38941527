//! Sequential scan kernels along the sample axis and their differentiable
//! wrappers.
//!
//! Every kernel takes a `[N, T, ...]` layout and runs an independent scan
//! over the `N` axis for each of the `T` columns.

use std::sync::Arc;

use crate::error::{FeatError, Result};
use crate::numerics::autograd::{CustomOp, Var};
use crate::numerics::tensor::Tensor;

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [n, c, s] => Ok((n, c, s)),
        _ => Err(FeatError::Dimension(format!(
            "{what} must be [N, T, width], got {:?}",
            t.shape()
        ))),
    }
}

// ── selective state-space scan ──────────────────────────────────────────

/// `h_i = exp(Δ_i·a) ⊙ h_{i−1} + Δ_i·u_i` with `h_0 = 0`, run over the first
/// axis for every column; `reverse` scans from the last row to the first.
///
/// `u` is `[N, T, S]`, `delta` is `[N, T]`, `a` is the continuous diagonal
/// decay of length `S`.
pub fn selective_scan(
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    (n, t, s): (usize, usize, usize),
    reverse: bool,
) -> Vec<f64> {
    debug_assert_eq!(u.len(), n * t * s);
    debug_assert_eq!(delta.len(), n * t);
    debug_assert_eq!(a.len(), s);
    let mut h = vec![0.0; n * t * s];
    let mut state = vec![0.0; t * s];
    for step in 0..n {
        let i = if reverse { n - 1 - step } else { step };
        for c in 0..t {
            let dt = delta[i * t + c];
            let base = (i * t + c) * s;
            let st = &mut state[c * s..(c + 1) * s];
            for k in 0..s {
                st[k] = (dt * a[k]).exp() * st[k] + dt * u[base + k];
                h[base + k] = st[k];
            }
        }
    }
    h
}

struct SelectiveScanOp {
    u: Arc<Tensor>,
    delta: Arc<Tensor>,
    a: Arc<Tensor>,
    h: Arc<Tensor>,
    reverse: bool,
}

impl CustomOp for SelectiveScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (n, t, s) = dims3(&self.u, "scan input")?;
        let (u, delta, a, h, g) = (self.u.data(), self.delta.data(), self.a.data(), self.h.data(), grad.data());
        let mut du = vec![0.0; n * t * s];
        let mut ddelta = vec![0.0; n * t];
        let mut da = vec![0.0; s];
        // carry = ā_{next} ⊙ λ_{next}, in scan order
        let mut carry = vec![0.0; t * s];
        let row_at = |step: usize| if self.reverse { n - 1 - step } else { step };
        for step in (0..n).rev() {
            let i = row_at(step);
            let prev = (step > 0).then(|| row_at(step - 1));
            for c in 0..t {
                let dt = delta[i * t + c];
                let base = (i * t + c) * s;
                let mut dd = 0.0;
                for k in 0..s {
                    let lambda = g[base + k] + carry[c * s + k];
                    let abar = (dt * a[k]).exp();
                    let hp = prev.map_or(0.0, |p| h[(p * t + c) * s + k]);
                    du[base + k] = lambda * dt;
                    dd += lambda * (a[k] * abar * hp + u[base + k]);
                    da[k] += lambda * dt * abar * hp;
                    carry[c * s + k] = abar * lambda;
                }
                ddelta[i * t + c] = dd;
            }
        }
        Ok(vec![
            Some(Tensor::new(self.u.shape().to_vec(), du)?),
            Some(Tensor::new(self.delta.shape().to_vec(), ddelta)?),
            Some(Tensor::new(vec![s], da)?),
        ])
    }
}

/// Differentiable [`selective_scan`]: `u` `[N,T,S]`, `delta` `[N,T]`, `a` `[S]`.
pub fn selective_scan_var(u: &Var, delta: &Var, a: &Var, reverse: bool) -> Result<Var> {
    let (n, t, s) = dims3(u.value(), "scan input")?;
    if delta.shape() != [n, t] || a.shape() != [s] {
        return Err(FeatError::Dimension(format!(
            "scan with u {:?}, delta {:?}, a {:?}",
            u.shape(),
            delta.shape(),
            a.shape()
        )));
    }
    let h = selective_scan(u.value().data(), delta.value().data(), a.value().data(), (n, t, s), reverse);
    let h = Tensor::new(vec![n, t, s], h)?;
    let saved = Arc::new(h.clone());
    Var::custom(&[u, delta, a], h, || {
        Box::new(SelectiveScanOp {
            u: u.tensor(),
            delta: delta.tensor(),
            a: a.tensor(),
            h: saved,
            reverse,
        })
    })
}

// ── depthwise convolution along the sample axis ─────────────────────────

/// Source row for tap `m` of a centered window of width `k` around row `i`,
/// clamped to the sequence (replicate padding).
fn tap_row(i: usize, m: usize, k: usize, n: usize) -> usize {
    let offset = i as isize + m as isize - (k / 2) as isize;
    offset.clamp(0, n as isize - 1) as usize
}

/// `y[i,t,c] = Σ_m w[c,m]·x[clamp(i + m − K/2), t, c]` for `x` `[N,T,d]`
/// and per-channel weights `w` `[d,K]`.
pub fn depthwise_conv(x: &[f64], w: &[f64], (n, t, d): (usize, usize, usize), k: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), n * t * d);
    debug_assert_eq!(w.len(), d * k);
    let mut y = vec![0.0; n * t * d];
    for i in 0..n {
        for m in 0..k {
            let src = tap_row(i, m, k, n);
            for c in 0..t {
                let xo = (src * t + c) * d;
                let yo = (i * t + c) * d;
                for ch in 0..d {
                    y[yo + ch] += w[ch * k + m] * x[xo + ch];
                }
            }
        }
    }
    y
}

struct ConvOp {
    x: Arc<Tensor>,
    w: Arc<Tensor>,
}

impl CustomOp for ConvOp {
    fn name(&self) -> &'static str {
        "depthwise_conv"
    }

    fn backward(&self, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (n, t, d) = dims3(&self.x, "conv input")?;
        let k = self.w.shape()[1];
        let (x, w, g) = (self.x.data(), self.w.data(), grad.data());
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        for i in 0..n {
            for m in 0..k {
                let src = tap_row(i, m, k, n);
                for c in 0..t {
                    let xo = (src * t + c) * d;
                    let go = (i * t + c) * d;
                    for ch in 0..d {
                        dx[xo + ch] += w[ch * k + m] * g[go + ch];
                        dw[ch * k + m] += x[xo + ch] * g[go + ch];
                    }
                }
            }
        }
        Ok(vec![
            Some(Tensor::new(self.x.shape().to_vec(), dx)?),
            Some(Tensor::new(self.w.shape().to_vec(), dw)?),
        ])
    }
}

/// Differentiable [`depthwise_conv`].
pub fn depthwise_conv_var(x: &Var, w: &Var) -> Result<Var> {
    let (n, t, d) = dims3(x.value(), "conv input")?;
    let k = match *w.shape() {
        [wd, k] if wd == d && k >= 1 => k,
        _ => {
            return Err(FeatError::Dimension(format!(
                "conv weights {:?} for {d} channels",
                w.shape()
            )))
        }
    };
    let y = depthwise_conv(x.value().data(), w.value().data(), (n, t, d), k);
    let y = Tensor::new(vec![n, t, d], y)?;
    Var::custom(&[x, w], y, || Box::new(ConvOp { x: x.tensor(), w: w.tensor() }))
}

// ── gated linear attention ──────────────────────────────────────────────

/// Covariance memory of one column: `S = Σ_i φ(k_i)(g_i ⊙ v_i)ᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlaMemory {
    pub dim: usize,
    pub steps: usize,
    /// Row-major `dim × dim`.
    pub s: Vec<f64>,
}

impl GlaMemory {
    pub fn new(dim: usize) -> Self {
        GlaMemory {
            dim,
            steps: 0,
            s: vec![0.0; dim * dim],
        }
    }

    /// `S ← S + key·valueᵀ`.
    pub fn accumulate(&mut self, key: &[f64], value: &[f64]) {
        let d = self.dim;
        for (a, &ka) in key.iter().enumerate() {
            let row = &mut self.s[a * d..(a + 1) * d];
            for (r, &v) in row.iter_mut().zip(value) {
                *r += ka * v;
            }
        }
        self.steps += 1;
    }

    /// `out = Sᵀ·query`.
    pub fn read(&self, query: &[f64], out: &mut [f64]) {
        let d = self.dim;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (a, &qa) in query.iter().enumerate() {
            let row = &self.s[a * d..(a + 1) * d];
            for (o, &r) in out.iter_mut().zip(row) {
                *o += qa * r;
            }
        }
    }
}

/// GLA scan over `[N,T,d]` mapped keys, gated values and mapped queries:
/// `S_i = S_{i−1} + k_i v_iᵀ`, `o_i = S_iᵀ q_i`. Returns the readouts and
/// the final memory of every column.
pub fn gla_scan(
    keys: &[f64],
    values: &[f64],
    queries: &[f64],
    (n, t, d): (usize, usize, usize),
) -> (Vec<f64>, Vec<GlaMemory>) {
    let mut out = vec![0.0; n * t * d];
    let mut mem: Vec<GlaMemory> = (0..t).map(|_| GlaMemory::new(d)).collect();
    for i in 0..n {
        for (c, m) in mem.iter_mut().enumerate() {
            let o = (i * t + c) * d;
            m.accumulate(&keys[o..o + d], &values[o..o + d]);
            m.read(&queries[o..o + d], &mut out[o..o + d]);
        }
    }
    (out, mem)
}

struct GlaOp {
    keys: Arc<Tensor>,
    values: Arc<Tensor>,
    queries: Arc<Tensor>,
}

impl CustomOp for GlaOp {
    fn name(&self) -> &'static str {
        "gla_scan"
    }

    fn backward(&self, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (n, t, d) = dims3(&self.keys, "gla keys")?;
        let (k, v, q, g) = (self.keys.data(), self.values.data(), self.queries.data(), grad.data());
        let mut dk = vec![0.0; k.len()];
        let mut dv = vec![0.0; v.len()];
        let mut dq = vec![0.0; q.len()];
        // dq_i = S_i·go_i, recomputing S forward
        let mut mem: Vec<GlaMemory> = (0..t).map(|_| GlaMemory::new(d)).collect();
        for i in 0..n {
            for (c, m) in mem.iter_mut().enumerate() {
                let o = (i * t + c) * d;
                m.accumulate(&k[o..o + d], &v[o..o + d]);
                for a in 0..d {
                    let row = &m.s[a * d..(a + 1) * d];
                    dq[o + a] = row.iter().zip(&g[o..o + d]).map(|(x, y)| x * y).sum();
                }
            }
        }
        // Λ_i = Σ_{m≥i} q_m go_mᵀ; dk_i = Λ_i v_i, dv_i = Λ_iᵀ k_i
        let mut lam: Vec<GlaMemory> = (0..t).map(|_| GlaMemory::new(d)).collect();
        for i in (0..n).rev() {
            for (c, l) in lam.iter_mut().enumerate() {
                let o = (i * t + c) * d;
                l.accumulate(&q[o..o + d], &g[o..o + d]);
                for a in 0..d {
                    let row = &l.s[a * d..(a + 1) * d];
                    dk[o + a] = row.iter().zip(&v[o..o + d]).map(|(x, y)| x * y).sum();
                }
                l.read(&k[o..o + d], &mut dv[o..o + d]);
            }
        }
        let shape = self.keys.shape().to_vec();
        Ok(vec![
            Some(Tensor::new(shape.clone(), dk)?),
            Some(Tensor::new(shape.clone(), dv)?),
            Some(Tensor::new(shape, dq)?),
        ])
    }
}

/// Differentiable [`gla_scan`] readout.
pub fn gla_scan_var(keys: &Var, values: &Var, queries: &Var) -> Result<Var> {
    let dims = dims3(keys.value(), "gla keys")?;
    if values.shape() != keys.shape() || queries.shape() != keys.shape() {
        return Err(FeatError::Dimension(format!(
            "gla with keys {:?}, values {:?}, queries {:?}",
            keys.shape(),
            values.shape(),
            queries.shape()
        )));
    }
    let (out, _) = gla_scan(keys.value().data(), values.value().data(), queries.value().data(), dims);
    let out = Tensor::new(keys.shape().to_vec(), out)?;
    Var::custom(&[keys, values, queries], out, || {
        Box::new(GlaOp {
            keys: keys.tensor(),
            values: values.tensor(),
            queries: queries.tensor(),
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;
    use crate::numerics::random::RngStream;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut RngStream::new(seed, 9))
    }

    #[test]
    fn single_step_scan_is_the_input_term() {
        let h = selective_scan(&[2.0, -1.0], &[0.5], &[-1.0, -2.0], (1, 1, 2), false);
        assert_eq!(h, vec![1.0, -0.5]);
    }

    #[test]
    fn infinite_decay_makes_the_scan_memoryless() {
        let u = [1.0, 2.0, 3.0];
        let h = selective_scan(&u, &[0.5, 0.5, 0.5], &[f64::NEG_INFINITY], (3, 1, 1), false);
        assert_eq!(h, vec![0.5, 1.0, 1.5]);
    }

    #[test]
    fn reverse_scan_is_the_scan_of_the_reversed_sequence() {
        let u = randn(&[7, 2, 3], 1);
        let delta = randn(&[7, 2], 2).map(|v| v.abs());
        let a = [-0.3, -1.0, -0.05];
        let h = selective_scan(u.data(), delta.data(), &a, (7, 2, 3), true);
        let ur = index_rows_rev(u.data(), 7, 6);
        let dr = index_rows_rev(delta.data(), 7, 2);
        let hr = selective_scan(&ur, &dr, &a, (7, 2, 3), false);
        assert_eq!(index_rows_rev(&hr, 7, 6), h);
    }

    fn index_rows_rev(x: &[f64], n: usize, w: usize) -> Vec<f64> {
        (0..n).rev().flat_map(|i| x[i * w..(i + 1) * w].to_vec()).collect()
    }

    #[test]
    fn conv_preserves_constants_and_k1_is_identity() {
        let x = vec![3.25; 5 * 2 * 3];
        let w = vec![0.2, 0.5, 0.3, 0.1, 0.1, 0.8, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        let y = depthwise_conv(&x, &w, (5, 2, 3), 3);
        for v in y {
            assert!((v - 3.25).abs() < 1e-15);
        }
        let x = randn(&[4, 1, 2], 3);
        assert_eq!(depthwise_conv(x.data(), &[1.0, 1.0], (4, 1, 2), 1), x.data());
    }

    #[test]
    fn single_outer_product_memory() {
        let mut m = GlaMemory::new(3);
        m.accumulate(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]);
        assert_eq!(m.s, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn closed_gate_keeps_memory_zero() {
        let k = randn(&[6, 1, 4], 4).map(f64::exp);
        let v = Tensor::zeros(&[6, 1, 4]);
        let q = randn(&[6, 1, 4], 5);
        let (o, mem) = gla_scan(k.data(), v.data(), q.data(), (6, 1, 4));
        assert!(o.iter().all(|x| *x == 0.0));
        assert!(mem[0].s.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn kernel_gradients_match_finite_differences() {
        let scan = |rev: bool| {
            move |v: &[Var]| -> Result<Var> {
                let delta = v[1].softplus()?;
                let a = v[2].exp()?.neg()?;
                selective_scan_var(&v[0], &delta, &a, rev)?.mul(&v[3])?.sum()
            }
        };
        for rev in [false, true] {
            let inputs = [randn(&[5, 2, 3], 10), randn(&[5, 2], 11), randn(&[3], 12), randn(&[5, 2, 3], 13)];
            let r = check_gradients(scan(rev), &inputs, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-6, "scan rev={rev}: {r:?}");
        }

        let conv = |v: &[Var]| depthwise_conv_var(&v[0], &v[1].softmax()?)?.mul(&v[2])?.sum();
        let inputs = [randn(&[6, 2, 3], 20), randn(&[3, 5], 21), randn(&[6, 2, 3], 22)];
        let r = check_gradients(conv, &inputs, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "conv: {r:?}");

        let gla = |v: &[Var]| gla_scan_var(&v[0].phi()?, &v[1], &v[2].phi()?)?.mul(&v[3])?.sum();
        let inputs = [randn(&[5, 2, 4], 30), randn(&[5, 2, 4], 31), randn(&[5, 2, 4], 32), randn(&[5, 2, 4], 33)];
        let r = check_gradients(gla, &inputs, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "gla: {r:?}");
    }
}
