//! Axis-aligned Gaussians over the latent space.
//!
//! Distributions live on a [`Graph`] so that sampling, densities and KL terms
//! stay differentiable with respect to the network heads that produce them.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Plain-value Gaussian parameters, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::shape(format!(
                "gaussian mean has {} dims, log_var {}",
                mean.len(),
                log_var.len()
            )));
        }
        Ok(GaussianParams { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianParams {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `mean + exp(log_var / 2) * eps`
    pub fn reparam(&self, eps: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect()
    }

    pub fn log_prob(&self, z: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(z)
            .map(|((m, lv), x)| -HALF_LOG_2PI - 0.5 * lv - 0.5 * (x - m) * (x - m) / lv.exp())
            .sum()
    }

    pub fn kl(&self, p: &GaussianParams) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim() {
            let (mq, lq, mp, lp) = (self.mean[i], self.log_var[i], p.mean[i], p.log_var[i]);
            acc += 0.5 * ((lq - lp).exp() + (mq - mp) * (mq - mp) / lp.exp() - 1.0 + lp - lq);
        }
        acc
    }
}

/// Graph-resident diagonal Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian {
    pub mean: Var,
    pub log_var: Var,
}

/// A reparameterized draw: the sample, its base log-density and the noise.
#[derive(Clone, Debug)]
pub struct LatentSample {
    pub value: Var,
    pub log_q0: Var,
    pub source_eps: Tensor,
}

impl DiagGaussian {
    pub fn new(g: &Graph, mean: Var, log_var: Var) -> Result<Self> {
        let (ms, ls) = (g.shape(mean), g.shape(log_var));
        if ms.len() != 1 || ms != ls {
            return Err(Error::shape(format!(
                "gaussian parameters must be equal-length vectors, got {:?} and {:?}",
                ms, ls
            )));
        }
        Ok(DiagGaussian { mean, log_var })
    }

    pub fn constant(g: &mut Graph, p: &GaussianParams) -> Self {
        let mean = g.constant(Tensor::vector(p.mean.clone()));
        let log_var = g.constant(Tensor::vector(p.log_var.clone()));
        DiagGaussian { mean, log_var }
    }

    pub fn dim(&self, g: &Graph) -> usize {
        g.shape(self.mean)[0]
    }

    pub fn params(&self, g: &Graph) -> GaussianParams {
        GaussianParams {
            mean: g.value(self.mean).data().to_vec(),
            log_var: g.value(self.log_var).data().to_vec(),
        }
    }

    fn check_len(&self, g: &Graph, n: usize, what: &str) -> Result<()> {
        let l = self.dim(g);
        if n != l {
            return Err(Error::shape(format!(
                "{} has length {}, distribution has dimension {}",
                what, n, l
            )));
        }
        Ok(())
    }

    pub fn sample_reparam(&self, g: &mut Graph, eps: &Tensor) -> Result<LatentSample> {
        self.check_len(g, eps.numel(), "eps")?;
        let e = g.constant(eps.clone());
        let half = g.scale(self.log_var, 0.5);
        let sigma = g.exp(half);
        let scaled = g.mul(sigma, e)?;
        let value = g.add(self.mean, scaled)?;
        let log_q0 = self.log_prob(g, value)?;
        Ok(LatentSample {
            value,
            log_q0,
            source_eps: eps.clone(),
        })
    }

    pub fn log_prob(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.check_len(g, g.value(z).numel(), "z")?;
        let l = self.dim(g) as f64;
        let diff = g.sub(z, self.mean)?;
        let sq = g.square(diff);
        let var = g.exp(self.log_var);
        let maha = g.div(sq, var)?;
        let inner = g.add(maha, self.log_var)?;
        let s = g.sum(inner);
        Ok(g.linear(s, -0.5, -HALF_LOG_2PI * l))
    }

    /// Closed-form `KL(self || p)`.
    pub fn kl_diag(&self, g: &mut Graph, p: &DiagGaussian) -> Result<Var> {
        let (lq, lp) = (self.dim(g), p.dim(g));
        if lq != lp {
            return Err(Error::shape(format!(
                "kl_diag between dimensions {} and {}",
                lq, lp
            )));
        }
        let d = g.sub(self.log_var, p.log_var)?;
        let ratio = g.exp(d);
        let diff = g.sub(self.mean, p.mean)?;
        let sq = g.square(diff);
        let var_p = g.exp(p.log_var);
        let maha = g.div(sq, var_p)?;
        let a = g.add(ratio, maha)?;
        let b = g.sub(a, d)?;
        let s = g.sum(b);
        Ok(g.linear(s, 0.5, -0.5 * lq as f64))
    }
}
