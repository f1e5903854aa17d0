//! Planar and radial normalizing-flow steps with closed-form log-determinants.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{softplus_inverse, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Planar,
    Radial,
}

impl FlowKind {
    pub fn name(self) -> &'static str {
        match self {
            FlowKind::Planar => "planar",
            FlowKind::Radial => "radial",
        }
    }
}

/// `z' = z + û·tanh(wᵀz + b)`
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarParams {
    pub u: Tensor,
    pub w: Tensor,
    pub b: f64,
}

/// `z' = z + β̂·h(r)·(z − z_ref)` with `h = 1/(α + r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialParams {
    pub z_ref: Tensor,
    pub alpha_raw: f64,
    pub beta_raw: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FlowParams {
    Planar(PlanarParams),
    Radial(RadialParams),
}

impl PlanarParams {
    /// Small random `u`, `w` (standard deviation 0.1) and `b = 0`.
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let n = Normal::new(0.0, 0.1).expect("valid normal");
        PlanarParams {
            u: Tensor::vector((0..dim).map(|_| n.sample(rng)).collect()),
            w: Tensor::vector((0..dim).map(|_| n.sample(rng)).collect()),
            b: 0.0,
        }
    }

    pub fn identity(dim: usize) -> Self {
        PlanarParams {
            u: Tensor::zeros(&[dim]),
            w: Tensor::zeros(&[dim]),
            b: 0.0,
        }
    }
}

impl RadialParams {
    /// Reference at the origin, `α = 1`, `β̂ = 0`: the exact identity map.
    pub fn init(dim: usize) -> Self {
        RadialParams {
            z_ref: Tensor::zeros(&[dim]),
            alpha_raw: softplus_inverse(1.0),
            beta_raw: softplus_inverse(1.0),
        }
    }

    pub fn alpha(&self) -> f64 {
        softplus(self.alpha_raw)
    }

    pub fn beta_hat(&self) -> f64 {
        -self.alpha() + softplus(self.beta_raw)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl FlowParams {
    pub fn kind(&self) -> FlowKind {
        match self {
            FlowParams::Planar(_) => FlowKind::Planar,
            FlowParams::Radial(_) => FlowKind::Radial,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FlowParams::Planar(p) => p.u.numel(),
            FlowParams::Radial(p) => p.z_ref.numel(),
        }
    }

    pub fn bind_constant(&self, g: &mut Graph) -> FlowStep {
        match self {
            FlowParams::Planar(p) => FlowStep::Planar {
                u: g.constant(p.u.clone()),
                w: g.constant(p.w.clone()),
                b: g.constant(Tensor::scalar(p.b)),
            },
            FlowParams::Radial(p) => FlowStep::Radial {
                z_ref: g.constant(p.z_ref.clone()),
                alpha_raw: g.constant(Tensor::scalar(p.alpha_raw)),
                beta_raw: g.constant(Tensor::scalar(p.beta_raw)),
            },
        }
    }

    /// Apply the step to plain values, returning `(z', logdet)`.
    pub fn forward_values(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut g = Graph::new();
        let step = self.bind_constant(&mut g);
        let zv = g.constant(Tensor::vector(z.to_vec()));
        let (out, ld) = step.apply(&mut g, zv)?;
        Ok((g.value(out).data().to_vec(), g.value(ld).item()))
    }
}

/// A flow step whose parameters are graph nodes.
#[derive(Clone, Copy, Debug)]
pub enum FlowStep {
    Planar { u: Var, w: Var, b: Var },
    Radial { z_ref: Var, alpha_raw: Var, beta_raw: Var },
}

impl FlowStep {
    pub fn kind(&self) -> FlowKind {
        match self {
            FlowStep::Planar { .. } => FlowKind::Planar,
            FlowStep::Radial { .. } => FlowKind::Radial,
        }
    }

    pub fn apply(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
        match *self {
            FlowStep::Planar { u, w, b } => planar_step(g, u, w, b, z),
            FlowStep::Radial {
                z_ref,
                alpha_raw,
                beta_raw,
            } => radial_step(g, z_ref, alpha_raw, beta_raw, z),
        }
    }
}

/// Offset that makes `softplus(a + c) − 1` vanish at `a = 0`, so `u = 0`
/// stays the identity.
pub const PLANAR_SHIFT: f64 = 0.541_324_854_612_918_1;

/// The invertibility-constrained planar direction:
/// `û = u + (m(wᵀu) − wᵀu)·w/‖w‖²` with `m(a) = softplus(a + c) − 1`, or `u`
/// itself when `w = 0`.
pub fn constrained_u(g: &mut Graph, u: Var, w: Var) -> Result<Var> {
    let wn2 = g.dot(w, w)?;
    if g.value(wn2).item() == 0.0 {
        return Ok(u);
    }
    let wu = g.dot(w, u)?;
    let shifted = g.linear(wu, 1.0, PLANAR_SHIFT);
    let sp = g.softplus(shifted);
    let m = g.linear(sp, 1.0, -1.0);
    let gap = g.sub(m, wu)?;
    let coef = g.div(gap, wn2)?;
    let shift = g.mul(w, coef)?;
    g.add(u, shift)
}

pub fn planar_step(g: &mut Graph, u: Var, w: Var, b: Var, z: Var) -> Result<(Var, Var)> {
    let l = g.shape(z).to_vec();
    if g.shape(u) != l.as_slice() || g.shape(w) != l.as_slice() || g.value(b).numel() != 1 {
        return Err(Error::shape(format!(
            "planar step: u {:?}, w {:?}, b {:?} against z {:?}",
            g.shape(u),
            g.shape(w),
            g.shape(b),
            l
        )));
    }
    let u_hat = constrained_u(g, u, w)?;
    let wz = g.dot(w, z)?;
    let pre = g.add(wz, b)?;
    let h = g.tanh(pre);
    let shift = g.mul(u_hat, h)?;
    let out = g.add(z, shift)?;

    let h2 = g.square(h);
    let dh = g.linear(h2, -1.0, 1.0);
    let uw = g.dot(u_hat, w)?;
    let t = g.mul(dh, uw)?;
    let det = g.linear(t, 1.0, 1.0);
    let ad = g.abs(det);
    let logdet = g.ln(ad);
    Ok((out, logdet))
}

pub fn radial_step(
    g: &mut Graph,
    z_ref: Var,
    alpha_raw: Var,
    beta_raw: Var,
    z: Var,
) -> Result<(Var, Var)> {
    let l = g.shape(z).to_vec();
    if g.shape(z_ref) != l.as_slice()
        || g.value(alpha_raw).numel() != 1
        || g.value(beta_raw).numel() != 1
    {
        return Err(Error::shape(format!(
            "radial step: reference {:?} against z {:?}",
            g.shape(z_ref),
            l
        )));
    }
    let dim = l[0] as f64;
    let alpha = g.softplus(alpha_raw);
    let sb = g.softplus(beta_raw);
    let beta = g.sub(sb, alpha)?;

    let diff = g.sub(z, z_ref)?;
    let r = g.norm(diff);
    let ar = g.add(alpha, r)?;
    let h = g.recip(ar);
    let bh = g.mul(beta, h)?;
    let shift = g.mul(diff, bh)?;
    let out = g.add(z, shift)?;

    // (L−1)·log(1 + β̂h) + log(1 + β̂h − β̂·r·h²)
    let one_bh = g.linear(bh, 1.0, 1.0);
    let log_a = g.ln(one_bh);
    let h2 = g.square(h);
    let rh2 = g.mul(r, h2)?;
    let brh2 = g.mul(beta, rh2)?;
    let second = g.sub(one_bh, brh2)?;
    let log_b = g.ln(second);
    let scaled = g.scale(log_a, dim - 1.0);
    let logdet = g.add(scaled, log_b)?;
    Ok((out, logdet))
}

/// An ordered chain of flow steps of one kind.
#[derive(Clone, Debug, Default)]
pub struct FlowChain {
    pub steps: Vec<FlowStep>,
}

impl FlowChain {
    pub fn new(steps: Vec<FlowStep>) -> Result<Self> {
        if let Some(first) = steps.first() {
            if steps.iter().any(|s| s.kind() != first.kind()) {
                return Err(Error::usage("flow chain mixes planar and radial steps"));
            }
        }
        Ok(FlowChain { steps })
    }

    pub fn identity() -> Self {
        FlowChain { steps: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `(z_K, Σ log|det|)`
    pub fn apply(&self, g: &mut Graph, z0: Var) -> Result<(Var, Var)> {
        let mut z = z0;
        let mut total = g.constant(Tensor::scalar(0.0));
        for step in &self.steps {
            let (next, ld) = step.apply(g, z)?;
            total = g.add(total, ld)?;
            z = next;
        }
        Ok((z, total))
    }
}

/// Apply a chain of value-level steps to plain values.
pub fn chain_forward_values(steps: &[FlowParams], z0: &[f64]) -> Result<(Vec<f64>, f64)> {
    let mut g = Graph::new();
    let bound: Vec<FlowStep> = steps.iter().map(|s| s.bind_constant(&mut g)).collect();
    let chain = FlowChain::new(bound)?;
    let z = g.constant(Tensor::vector(z0.to_vec()));
    let (zk, ld) = chain.apply(&mut g, z)?;
    Ok((g.value(zk).data().to_vec(), g.value(ld).item()))
}

pub const NUMERIC_JACOBIAN_STEP: f64 = 1e-6;

/// `log|det J|` of `f` at `z`, with `J` from central differences and the
/// determinant from an LU factorization with partial pivoting. A singular
/// numeric Jacobian yields `-inf`.
pub fn numeric_logdet_oracle<F>(f: F, z: &[f64]) -> f64
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = z.len();
    let h = NUMERIC_JACOBIAN_STEP;
    let mut jac = vec![0.0; n * n];
    let mut work = z.to_vec();
    for j in 0..n {
        work[j] = z[j] + h;
        let fp = f(&work);
        work[j] = z[j] - h;
        let fm = f(&work);
        work[j] = z[j];
        for i in 0..n {
            jac[i * n + j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    log_abs_det(&mut jac, n)
}

fn log_abs_det(a: &mut [f64], n: usize) -> f64 {
    let mut acc = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))
            .unwrap_or(col);
        let pv = a[pivot * n + col];
        if pv == 0.0 || !pv.is_finite() {
            return f64::NEG_INFINITY;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
        }
        acc += pv.abs().ln();
        for row in col + 1..n {
            let factor = a[row * n + col] / pv;
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
        }
    }
    acc
}
