//! Reproducible random streams and the samplers built on them.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{FeatError, Result};
use crate::numerics::tensor::Tensor;

/// A counter-based random stream.
///
/// The key is derived from `seed`, `stream_id` selects an independent ChaCha
/// stream under that key, and the word counter records the position, so a
/// stream can be re-created at any point without replaying it.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            inner,
        }
    }

    /// Re-create a stream positioned at `counter` words.
    pub fn at_counter(seed: u64, stream_id: u64, counter: u128) -> Self {
        let mut s = Self::new(seed, stream_id);
        s.inner.set_word_pos(counter);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Independent sibling stream under the same seed.
    pub fn fork(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    pub fn normal(&mut self) -> f64 {
        self.sample(StandardNormal)
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u: f64 = self.random();
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Log-uniform draw on `[lo, hi]`, both positive.
    pub fn log_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let (a, b) = (lo.ln(), hi.ln());
        (a + (b - a) * self.random::<f64>()).exp()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Draw from a Dirichlet distribution via normalized Gamma variates.
///
/// Gamma(α) is sampled in log space as `ln Gamma(α+1) + ln(U)/α`, which keeps
/// very small concentrations from underflowing every component to zero.
pub fn sample_dirichlet(alpha: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return Err(FeatError::Parameter("Dirichlet needs at least one component".into()));
    }
    if let Some(a) = alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(FeatError::Parameter(format!(
            "Dirichlet concentration must be positive, got {a}"
        )));
    }
    let mut logs = Vec::with_capacity(alpha.len());
    for &a in alpha {
        let g = Gamma::new(a + 1.0, 1.0)
            .map_err(|e| FeatError::Parameter(format!("gamma({a}): {e}")))?;
        let base: f64 = g.sample(rng);
        logs.push(base.ln() + rng.uniform_open().ln() / a);
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// Inverse CDF of the Kumaraswamy(a, b) distribution.
pub fn sample_kumaraswamy_icdf(u: f64, a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(FeatError::Parameter(format!("u must lie in [0,1], got {u}")));
    }
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(FeatError::Parameter(format!(
            "Kumaraswamy shapes must be positive, got a={a}, b={b}"
        )));
    }
    // 1 - (1-u)^(1/b), written with ln_1p/exp_m1 so small u keeps precision
    let inner = -((-u).ln_1p() / b).exp_m1();
    Ok(inner.powf(1.0 / a))
}

/// `rows` orthonormal vectors of length `cols`, from Gram–Schmidt on a
/// Gaussian draw. Requires `rows <= cols`.
pub fn orthonormal_rows(rows: usize, cols: usize, rng: &mut RngStream) -> Result<Tensor> {
    if rows > cols {
        return Err(FeatError::Rank { rows, cols });
    }
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while q.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| rng.normal()).collect();
        // two passes of modified Gram–Schmidt keep the Gram error near ulp
        for _ in 0..2 {
            for u in &q {
                let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
    }
    Tensor::new(vec![rows, cols], q.concat())
}

/// Unit-norm Gaussian rows; near-orthogonal only when `cols` is large.
pub fn normalized_gaussian_rows(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let v: Vec<f64> = (0..cols).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        data.extend(v.iter().map(|x| x / norm));
    }
    Tensor::new(vec![rows, cols], data).expect("row data matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram_error(q: &Tensor) -> f64 {
        let g = q.matmul(&q.transpose().unwrap()).unwrap();
        g.max_abs_diff(&Tensor::eye(q.shape()[0]))
    }

    #[test]
    fn identical_streams_reproduce() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        let xa: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_eq!(xa, xb);
        let mut c = RngStream::new(7, 4);
        assert_ne!(xa[0], c.next_u64());
    }

    #[test]
    fn counter_reconstructs_position() {
        let mut a = RngStream::new(11, 0);
        for _ in 0..5 {
            a.next_u64();
        }
        let mut b = RngStream::at_counter(11, 0, a.counter());
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn dirichlet_is_on_simplex() {
        let mut rng = RngStream::new(1, 0);
        for alpha in [vec![1.0; 5], vec![0.01; 4], vec![0.5, 3.0, 20.0]] {
            for _ in 0..200 {
                let w = sample_dirichlet(&alpha, &mut rng).unwrap();
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(w.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn dirichlet_rejects_bad_alpha() {
        let mut rng = RngStream::new(1, 0);
        assert!(sample_dirichlet(&[1.0, 0.0], &mut rng).is_err());
        assert!(sample_dirichlet(&[], &mut rng).is_err());
    }

    #[test]
    fn kumaraswamy_special_cases() {
        for &u in &[0.0, 0.1, 0.25, 0.9, 1.0] {
            assert!((sample_kumaraswamy_icdf(u, 1.0, 1.0).unwrap() - u).abs() < 1e-15);
        }
        // b = 1 gives x = u^(1/a)
        assert!((sample_kumaraswamy_icdf(0.25, 2.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(sample_kumaraswamy_icdf(1.5, 1.0, 1.0).is_err());
        assert!(sample_kumaraswamy_icdf(0.5, 0.0, 1.0).is_err());
    }

    #[test]
    fn orthonormal_rows_have_identity_gram() {
        let mut rng = RngStream::new(5, 1);
        let one = orthonormal_rows(1, 6, &mut rng).unwrap();
        assert!((one.norm() - 1.0).abs() < 1e-12);
        let full = orthonormal_rows(8, 8, &mut rng).unwrap();
        assert!(gram_error(&full) < 1e-10);
        let q = orthonormal_rows(4, 16, &mut rng).unwrap();
        let g = q.matmul(&q.transpose().unwrap()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(g.get(&[i, j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn orthonormal_rows_rank_error() {
        let mut rng = RngStream::new(5, 1);
        assert!(matches!(
            orthonormal_rows(5, 4, &mut rng),
            Err(FeatError::Rank { rows: 5, cols: 4 })
        ));
    }
}
