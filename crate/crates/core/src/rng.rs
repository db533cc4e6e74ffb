//! Seeded random streams.
//!
//! Every stochastic operation in the crate draws from an [`Rng`]. Streams are
//! reproducible from their seed, and [`Rng::split`] derives child streams that
//! are independent of each other and of any later draws from the parent.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives a child stream. The child seed is taken from the parent stream,
    /// so the sequence of children is itself reproducible.
    pub fn split(&mut self) -> Rng {
        let seed = self.inner.next_u64();
        Rng::new(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_scalar(&mut self, lo: f64, hi: f64) -> Result<f64> {
        if !(lo < hi) {
            return Err(Error::invalid(format!("uniform requires lo < hi, got [{lo}, {hi})")));
        }
        Ok(lo + (hi - lo) * self.unit())
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> Result<usize> {
        if lo > hi {
            return Err(Error::invalid(format!("empty integer range [{lo}, {hi}]")));
        }
        Ok(self.inner.random_range(lo..=hi))
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> Result<bool> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("bernoulli probability {p} outside [0, 1]")));
        }
        // Always consume one draw so that the stream position does not depend on p.
        Ok(self.unit() < p)
    }

    pub fn beta(&mut self, alpha: f64) -> Result<f64> {
        let dist = Beta::new(alpha, alpha).map_err(|e| Error::invalid(format!("beta({alpha}, {alpha}): {e}")))?;
        Ok(dist.sample(&mut self.inner))
    }

    /// Uniformly random permutation of `0..n` (Fisher-Yates).
    pub fn permutation(&mut self, n: usize) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(Error::invalid("permutation of an empty set"));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.random_range(0..=i);
            perm.swap(i, j);
        }
        Ok(perm)
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(self.standard_normal())).collect();
        Tensor::from_vec(shape, data).expect("shape and data length agree")
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<T>> {
        if !(lo < hi) {
            return Err(Error::invalid(format!("uniform requires lo < hi, got [{lo}, {hi})")));
        }
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(lo + (hi - lo) * self.unit())).collect();
        Tensor::from_vec(shape, data)
    }
}
