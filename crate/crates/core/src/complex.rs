//! Complex d-vectors stored in concatenated-real form.
//!
//! A vector of `d` complex coordinates is laid out as `2d` reals: the first
//! `d` entries are the real parts, the last `d` the imaginary parts. This is
//! the same concatenation the embedding tables and the linear heads operate
//! on, so moving between "complex" and "2d-real" views is free.
//!
//! Gradients flow through coordinate-wise complex products by multiplying
//! with the conjugate of the other factor: if `c = a ⊙ b` and `g` is the
//! upstream gradient on `c` (itself in complex form), then the gradient on
//! `a` is `g ⊙ conj(b)`. The `add_mul_conj`/`add_conj_scaled` helpers encode
//! exactly that rule.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Complex vector in `[re_0..re_{d-1}, im_0..im_{d-1}]` layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVec(Vec<f64>);

impl CVec {
    /// All-zero vector of `d` complex coordinates.
    pub fn zeros(d: usize) -> Self {
        CVec(vec![0.0; 2 * d])
    }

    /// The multiplicative identity `(1 + 0i)^d`.
    pub fn ones(d: usize) -> Self {
        let mut v = vec![0.0; 2 * d];
        v[..d].fill(1.0);
        CVec(v)
    }

    /// Wrap a concatenated-real vector of even length.
    pub fn from_real(data: Vec<f64>) -> Self {
        assert!(data.len() % 2 == 0, "concatenated-real length must be even");
        CVec(data)
    }

    /// i.i.d. Gaussian entries (per real component) of the given std.
    pub fn gaussian<R: Rng>(d: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        CVec((0..2 * d).map(|_| normal.sample(rng)).collect())
    }

    /// Number of complex coordinates.
    pub fn dim(&self) -> usize {
        self.0.len() / 2
    }

    pub fn re(&self) -> &[f64] {
        &self.0[..self.dim()]
    }

    pub fn im(&self) -> &[f64] {
        &self.0[self.dim()..]
    }

    /// The concatenated-real view `[Re(v), Im(v)]`.
    pub fn as_real(&self) -> &[f64] {
        &self.0
    }

    pub fn as_real_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_real(self) -> Vec<f64> {
        self.0
    }

    /// Coordinate-wise complex product `self ⊙ other`.
    pub fn hadamard(&self, other: &CVec) -> CVec {
        let d = self.dim();
        assert_eq!(d, other.dim(), "hadamard dimension mismatch");
        let mut out = vec![0.0; 2 * d];
        let (ar, ai) = (self.re(), self.im());
        let (br, bi) = (other.re(), other.im());
        for k in 0..d {
            out[k] = ar[k] * br[k] - ai[k] * bi[k];
            out[d + k] = ar[k] * bi[k] + ai[k] * br[k];
        }
        CVec(out)
    }

    /// Coordinate-wise triple product `a ⊙ b ⊙ c`.
    pub fn triple(a: &CVec, b: &CVec, c: &CVec) -> CVec {
        a.hadamard(b).hadamard(c)
    }

    /// `Re(Σ_k self_k · other_k)` — the real part of the bilinear
    /// (conjugate-free) inner product.
    pub fn re_inner(&self, other: &CVec) -> f64 {
        let d = self.dim();
        assert_eq!(d, other.dim(), "re_inner dimension mismatch");
        let (ar, ai) = (self.re(), self.im());
        let (br, bi) = (other.re(), other.im());
        let mut acc = 0.0;
        for k in 0..d {
            acc += ar[k] * br[k] - ai[k] * bi[k];
        }
        acc
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &CVec, scale: f64) {
        assert_eq!(self.0.len(), other.0.len());
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            *a += scale * b;
        }
    }

    /// `self += scale · conj(other)`: the gradient of `re_inner(x, other)`
    /// with respect to `x`, scaled by the upstream scalar.
    pub fn add_conj_scaled(&mut self, other: &CVec, scale: f64) {
        let d = self.dim();
        assert_eq!(d, other.dim());
        let (br, bi) = (other.re(), other.im());
        for k in 0..d {
            self.0[k] += scale * br[k];
            self.0[d + k] -= scale * bi[k];
        }
    }

    /// `self += scale · g ⊙ conj(other)`: the gradient of a coordinate-wise
    /// product through one factor, given the upstream complex gradient `g`.
    pub fn add_mul_conj(&mut self, g: &CVec, other: &CVec, scale: f64) {
        let d = self.dim();
        assert_eq!(d, g.dim());
        assert_eq!(d, other.dim());
        let (gr, gi) = (g.re(), g.im());
        let (br, bi) = (other.re(), other.im());
        for k in 0..d {
            self.0[k] += scale * (gr[k] * br[k] + gi[k] * bi[k]);
            self.0[d + k] += scale * (gi[k] * br[k] - gr[k] * bi[k]);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// `Re(Σ_k a_k · b_k · c_k · e_k)` — the 4-way multilinear product used by
/// the quad scoring function, evaluated without allocating intermediates.
pub fn re_multilinear4(a: &CVec, b: &CVec, c: &CVec, e: &CVec) -> f64 {
    let d = a.dim();
    assert!(d == b.dim() && d == c.dim() && d == e.dim());
    let (ar, ai) = (a.re(), a.im());
    let (br, bi) = (b.re(), b.im());
    let (cr, ci) = (c.re(), c.im());
    let (er, ei) = (e.re(), e.im());
    let mut acc = 0.0;
    for k in 0..d {
        let pr = ar[k] * br[k] - ai[k] * bi[k];
        let pi = ar[k] * bi[k] + ai[k] * br[k];
        let qr = cr[k] * er[k] - ci[k] * ei[k];
        let qi = cr[k] * ei[k] + ci[k] * er[k];
        acc += pr * qr - pi * qi;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cv(re: &[f64], im: &[f64]) -> CVec {
        let mut v = re.to_vec();
        v.extend_from_slice(im);
        CVec::from_real(v)
    }

    #[test]
    fn hadamard_matches_scalar_complex_multiplication() {
        // (1+2i)(3-1i) = 5+5i ; (0+1i)(0+1i) = -1+0i
        let a = cv(&[1.0, 0.0], &[2.0, 1.0]);
        let b = cv(&[3.0, 0.0], &[-1.0, 1.0]);
        let c = a.hadamard(&b);
        assert_eq!(c.re(), &[5.0, -1.0]);
        assert_eq!(c.im(), &[5.0, 0.0]);
    }

    #[test]
    fn ones_is_multiplicative_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = CVec::gaussian(5, 1.0, &mut rng);
        let one = CVec::ones(5);
        assert_eq!(a.hadamard(&one), a);
    }

    #[test]
    fn multilinear4_matches_naive_per_coordinate_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let a = CVec::gaussian(4, 1.0, &mut rng);
            let b = CVec::gaussian(4, 1.0, &mut rng);
            let c = CVec::gaussian(4, 1.0, &mut rng);
            let e = CVec::gaussian(4, 1.0, &mut rng);
            let fused = re_multilinear4(&a, &b, &c, &e);
            // Naive route: expand every coordinate with scalar complex ops.
            let mut want = 0.0;
            for k in 0..4 {
                let mut pr = 1.0;
                let mut pi = 0.0;
                for v in [&a, &b, &c, &e] {
                    let (vr, vi) = (v.re()[k], v.im()[k]);
                    let nr = pr * vr - pi * vi;
                    let ni = pr * vi + pi * vr;
                    pr = nr;
                    pi = ni;
                }
                want += pr;
            }
            assert!((fused - want).abs() < 1e-12, "fused={fused} naive={want}");
        }
    }

    #[test]
    fn conj_gradient_helpers_match_definitions() {
        let g = cv(&[2.0], &[3.0]);
        let b = cv(&[5.0], &[-4.0]);
        // g ⊙ conj(b) = (2+3i)(5+4i) = -2 + 23i
        let mut acc = CVec::zeros(1);
        acc.add_mul_conj(&g, &b, 1.0);
        assert_eq!(acc.re(), &[-2.0]);
        assert_eq!(acc.im(), &[23.0]);

        let mut acc2 = CVec::zeros(1);
        acc2.add_conj_scaled(&b, 2.0);
        assert_eq!(acc2.re(), &[10.0]);
        assert_eq!(acc2.im(), &[8.0]);
    }
}
