use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Axis;

use super::{Denoiser, Prompt};
use crate::error::{Error, Result};
use crate::Latent;

/// Exact posterior mean `E[x | x + sigma n = z]` for `x ~ N(mu, Sigma)`:
/// `mu + Sigma (Sigma + sigma^2 I)^-1 (z - mu)`.
///
/// Works on any latent whose last axis has length `d`; the LQ latent and the
/// prompts are ignored.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianDenoiser {
    mu: DVector<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl AnalyticGaussianDenoiser {
    pub fn new(mu: Vec<f64>, sigma: Vec<Vec<f64>>) -> Result<Self> {
        let d = mu.len();
        if d == 0 || sigma.len() != d || sigma.iter().any(|row| row.len() != d) {
            return Err(Error::ShapeMismatch {
                expected: vec![d, d],
                actual: vec![sigma.len(), sigma.first().map_or(0, Vec::len)],
            });
        }
        let m = DMatrix::from_fn(d, d, |i, j| sigma[i][j]);
        let asym = (&m - m.transpose()).abs().max();
        if asym > 1e-12 * (1.0 + m.abs().max()) {
            return Err(Error::InvalidParameter("covariance must be symmetric".into()));
        }
        let eig = SymmetricEigen::new(m);
        if eig.eigenvalues.iter().any(|&l| l < -1e-12) {
            return Err(Error::InvalidParameter(
                "covariance must be positive semidefinite".into(),
            ));
        }
        Ok(Self {
            mu: DVector::from_vec(mu),
            eigenvalues: eig.eigenvalues.map(|l| l.max(0.0)),
            eigenvectors: eig.eigenvectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// The linear shrinkage `Sigma (Sigma + sigma^2 I)^-1`.
    pub fn shrinkage(&self, sigma: f64) -> DMatrix<f64> {
        let s2 = sigma * sigma;
        let diag = self.eigenvalues.map(|l| if l + s2 > 0.0 { l / (l + s2) } else { 1.0 });
        &self.eigenvectors * DMatrix::from_diagonal(&diag) * self.eigenvectors.transpose()
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn denoise(&self, z: &Latent, _z_lq: &Latent, sigma: f64, _prompts: &[Prompt]) -> Result<Latent> {
        let d = self.dim();
        if z.ndim() == 0 || z.shape()[z.ndim() - 1] != d {
            return Err(Error::ShapeMismatch {
                expected: vec![d],
                actual: z.shape().to_vec(),
            });
        }
        let gain = self.shrinkage(sigma);
        let mut out = z.clone();
        let last = Axis(z.ndim() - 1);
        for mut lane in out.lanes_mut(last) {
            let centered = DVector::from_iterator(d, lane.iter().zip(self.mu.iter()).map(|(v, m)| v - m));
            let mapped = &gain * centered + &self.mu;
            for (dst, src) in lane.iter_mut().zip(mapped.iter()) {
                *dst = *src;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, IxDyn};

    fn lq() -> Latent {
        Latent::zeros(IxDyn(&[1]))
    }

    #[test]
    fn scalar_formula() {
        let den = AnalyticGaussianDenoiser::new(vec![0.0], vec![vec![1.0]]).unwrap();
        let out = den.denoise(&array![2.0].into_dyn(), &lq(), 1.0, &[]).unwrap();
        assert!((out[[0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn limits() {
        let den = AnalyticGaussianDenoiser::new(vec![1.0, -2.0], vec![vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let z = array![[0.3, 0.9]].into_dyn();
        let small = den.denoise(&z, &lq(), 1e-6, &[]).unwrap();
        for (a, b) in small.iter().zip(z.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        let large = den.denoise(&z, &lq(), 1e6, &[]).unwrap();
        assert!((large[[0, 0]] - 1.0).abs() < 1e-9 && (large[[0, 1]] + 2.0).abs() < 1e-9);
    }

    #[test]
    fn matches_numerical_posterior_mean_1d() {
        // Brute-force E[x | z] on a grid: prior N(mu, s2) times likelihood N(z; x, sigma^2).
        let (mu, s2) = (0.7, 2.25);
        let den = AnalyticGaussianDenoiser::new(vec![mu], vec![vec![s2]]).unwrap();
        for &(z, sigma) in &[(1.5, 0.5), (-3.0, 2.0), (0.0, 0.1), (4.0, 5.0)] {
            let (lo, hi, n) = (-40.0, 40.0, 400_000);
            let dx = (hi - lo) / n as f64;
            let (mut num, mut den_sum) = (0.0, 0.0);
            for i in 0..=n {
                let x = lo + i as f64 * dx;
                let w = (-(x - mu) * (x - mu) / (2.0 * s2) - (z - x) * (z - x) / (2.0 * sigma * sigma)).exp();
                let trap = if i == 0 || i == n { 0.5 } else { 1.0 };
                num += trap * w * x;
                den_sum += trap * w;
            }
            let oracle = num / den_sum;
            let got = den.denoise(&array![z].into_dyn(), &lq(), sigma, &[]).unwrap()[[0]];
            assert!((got - oracle).abs() < 1e-6, "z={z} sigma={sigma}: {got} vs {oracle}");
        }
    }

    #[test]
    fn rejects_bad_covariance_and_shapes() {
        assert!(AnalyticGaussianDenoiser::new(vec![0.0, 0.0], vec![vec![1.0, 0.2], vec![0.3, 1.0]]).is_err());
        assert!(AnalyticGaussianDenoiser::new(vec![0.0, 0.0], vec![vec![1.0, 2.0], vec![2.0, 1.0]]).is_err());
        let den = AnalyticGaussianDenoiser::new(vec![0.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(den.denoise(&array![[1.0, 2.0, 3.0]].into_dyn(), &lq(), 1.0, &[]).is_err());
    }
}
