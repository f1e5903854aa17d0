//! The 3D U-Net, prior and posterior latent encoders, the posterior flow and
//! the feature-combination head, plus test-time sampling.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Grid, Mask, Volume3D};
use crate::distributions::{DiagGaussian, GaussianParams, LatentSample};
use crate::error::{Error, Result};
use crate::flows::{FlowChain, FlowKind, FlowParams, FlowStep, PlanarParams, RadialParams};
use crate::tensor::{Graph, RescaleDirection, Tensor, Var};

/// Paper configuration of the latent space.
pub const DEFAULT_LATENT_DIM: usize = 6;
/// Paper configuration of the posterior flow depth.
pub const DEFAULT_FLOW_STEPS: usize = 2;
/// Samples drawn per case at evaluation time.
pub const DEFAULT_SAMPLES: usize = 16;
/// Initial output bias: lesions cover a few percent of a crop, so training
/// starts near that foreground rate instead of at 0.5.
pub const FOREGROUND_LOGIT_INIT: f64 = -4.0;
/// Log-variances beyond this magnitude are clamped.
pub const LOG_VAR_LIMIT: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "unet3d")]
    UNet3D,
    #[serde(rename = "punet3d")]
    PUNet3D,
    #[serde(rename = "punet3d-planar")]
    PUNet3DPlanar,
    #[serde(rename = "punet3d-radial")]
    PUNet3DRadial,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [
        ModelVariant::UNet3D,
        ModelVariant::PUNet3D,
        ModelVariant::PUNet3DPlanar,
        ModelVariant::PUNet3DRadial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::UNet3D => "unet3d",
            ModelVariant::PUNet3D => "punet3d",
            ModelVariant::PUNet3DPlanar => "punet3d-planar",
            ModelVariant::PUNet3DRadial => "punet3d-radial",
        }
    }

    pub fn flow_kind(self) -> Option<FlowKind> {
        match self {
            ModelVariant::PUNet3DPlanar => Some(FlowKind::Planar),
            ModelVariant::PUNet3DRadial => Some(FlowKind::Radial),
            _ => None,
        }
    }

    pub fn is_probabilistic(self) -> bool {
        self != ModelVariant::UNet3D
    }

    fn code(self) -> u8 {
        match self {
            ModelVariant::UNet3D => 0,
            ModelVariant::PUNet3D => 1,
            ModelVariant::PUNet3DPlanar => 2,
            ModelVariant::PUNet3DRadial => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        ModelVariant::ALL.into_iter().find(|v| v.code() == c)
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown model variant '{}'; valid variants: {}",
                    s,
                    ModelVariant::ALL.map(|v| v.name()).join(", ")
                ))
            })
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNet3DConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub feature_channels: usize,
}

impl Default for UNet3DConfig {
    fn default() -> Self {
        UNet3DConfig {
            levels: 3,
            base_channels: 8,
            in_channels: 1,
            feature_channels: 8,
        }
    }
}

impl UNet3DConfig {
    pub fn check_grid(&self, grid: Grid) -> Result<()> {
        let div = 1usize << (self.levels - 1);
        for (axis, (&e, name)) in grid.iter().zip(["depth", "height", "width"]).enumerate() {
            if e % div != 0 {
                return Err(Error::shape(format!(
                    "{} axis (axis {}) extent {} is not divisible by 2^(levels-1) = {}",
                    name, axis, e, div
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub unet: UNet3DConfig,
    /// Zero for the deterministic baseline.
    pub latent_dim: usize,
    pub flow_steps: usize,
}

impl ModelConfig {
    pub fn new(variant: ModelVariant, unet: UNet3DConfig, latent_dim: usize) -> Self {
        let (latent_dim, flow_steps) = match variant {
            ModelVariant::UNet3D => (0, 0),
            ModelVariant::PUNet3D => (latent_dim, 0),
            _ => (latent_dim, DEFAULT_FLOW_STEPS),
        };
        ModelConfig {
            variant,
            unet,
            latent_dim,
            flow_steps,
        }
    }

    pub fn flow_kind(&self) -> Option<FlowKind> {
        if self.flow_steps == 0 {
            None
        } else {
            self.variant.flow_kind()
        }
    }

    fn validate(&self) -> Result<()> {
        let u = &self.unet;
        if u.levels == 0 || u.base_channels == 0 || u.in_channels == 0 || u.feature_channels == 0 {
            return Err(Error::Config(format!("invalid U-Net configuration {:?}", u)));
        }
        if self.variant.is_probabilistic() && self.latent_dim == 0 {
            return Err(Error::Config("probabilistic variants need latent_dim >= 1".into()));
        }
        if !self.variant.is_probabilistic() && (self.latent_dim != 0 || self.flow_steps != 0) {
            return Err(Error::Config("unet3d has no latent space".into()));
        }
        if self.flow_steps > 0 && self.variant.flow_kind().is_none() {
            return Err(Error::Config(format!(
                "variant {} has no flow, but flow_steps = {}",
                self.variant, self.flow_steps
            )));
        }
        Ok(())
    }
}

/// Named parameter tensors in declaration order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    kernel: usize,
    bias: usize,
    padding: usize,
}

impl Conv {
    fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        g.conv3d(x, p[self.kernel], p[self.bias], 1, self.padding)
    }
}

#[derive(Clone, Debug)]
struct Block {
    a: Conv,
    b: Conv,
}

impl Block {
    fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let h = self.a.apply(g, p, x)?;
        let h = g.relu(h);
        let h = self.b.apply(g, p, h)?;
        Ok(g.relu(h))
    }
}

#[derive(Clone, Debug)]
struct UNetLayout {
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    head: Conv,
}

#[derive(Clone, Debug)]
struct EncoderLayout {
    blocks: Vec<Block>,
    mean_w: usize,
    mean_b: usize,
    log_var_w: usize,
    log_var_b: usize,
}

#[derive(Clone, Debug)]
enum FlowLayout {
    Planar { u: usize, w: usize, b: usize },
    Radial { z_ref: usize, alpha_raw: usize, beta_raw: usize },
}

#[derive(Clone, Debug)]
struct Layout {
    unet: UNetLayout,
    prior: Option<EncoderLayout>,
    posterior: Option<EncoderLayout>,
    flows: Vec<FlowLayout>,
    fcomb: [Conv; 3],
}

/// Parameter initializer; `None` registers zeros (used on load).
struct Builder<'a> {
    store: ParamStore,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Builder<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let n: usize = shape.iter().product();
        let data = match self.rng.as_deref_mut() {
            Some(rng) => (0..n)
                .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect::<Vec<f64>>(),
            None => vec![0.0; n],
        };
        self.store.push(name, Tensor::new(shape.to_vec(), data).expect("consistent shape"))
    }

    fn value(&mut self, name: String, t: Tensor) -> usize {
        self.store.push(name, t)
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Conv {
        let std = (2.0 / (c_in * k * k * k) as f64).sqrt();
        let kernel = self.normal(format!("{name}.weight"), &[c_out, c_in, k, k, k], std);
        let bias = self.value(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Conv {
            kernel,
            bias,
            padding: k / 2,
        }
    }

    fn block(&mut self, name: &str, c_in: usize, c_out: usize) -> Block {
        Block {
            a: self.conv(&format!("{name}.conv1"), c_in, c_out, 3),
            b: self.conv(&format!("{name}.conv2"), c_out, c_out, 3),
        }
    }

    fn encoder(&mut self, name: &str, cfg: &UNet3DConfig, in_channels: usize, latent: usize) -> EncoderLayout {
        let base = (cfg.base_channels / 2).max(1);
        let mut blocks = Vec::new();
        let mut c_in = in_channels;
        for l in 0..cfg.levels {
            let c = base << l;
            blocks.push(self.block(&format!("{name}.enc{l}"), c_in, c));
            c_in = c;
        }
        let mean_w = self.normal(format!("{name}.mean.weight"), &[latent, c_in], 0.1 / (c_in as f64).sqrt());
        let mean_b = self.value(format!("{name}.mean.bias"), Tensor::zeros(&[latent]));
        let log_var_w = self.normal(format!("{name}.log_var.weight"), &[latent, c_in], 0.1 / (c_in as f64).sqrt());
        let log_var_b = self.value(format!("{name}.log_var.bias"), Tensor::zeros(&[latent]));
        EncoderLayout {
            blocks,
            mean_w,
            mean_b,
            log_var_w,
            log_var_b,
        }
    }
}

fn build_layout(cfg: &ModelConfig, rng: Option<&mut ChaCha8Rng>) -> (Layout, ParamStore) {
    let mut b = Builder {
        store: ParamStore::default(),
        rng,
    };
    let u = &cfg.unet;
    let mut encoder = Vec::new();
    let mut c_in = u.in_channels;
    for l in 0..u.levels {
        let c = u.base_channels << l;
        encoder.push(b.block(&format!("unet.enc{l}"), c_in, c));
        c_in = c;
    }
    let mut decoder = Vec::new();
    for l in (0..u.levels.saturating_sub(1)).rev() {
        let c = u.base_channels << l;
        decoder.push(b.block(&format!("unet.dec{l}"), c + c_in, c));
        c_in = c;
    }
    let head = b.conv("unet.head", c_in, u.feature_channels, 1);
    let unet = UNetLayout {
        encoder,
        decoder,
        head,
    };
    let l = cfg.latent_dim;
    let (prior, posterior) = if cfg.variant.is_probabilistic() {
        (
            Some(b.encoder("prior", u, u.in_channels, l)),
            Some(b.encoder("posterior", u, u.in_channels + 1, l)),
        )
    } else {
        (None, None)
    };
    let mut flows = Vec::new();
    if let Some(kind) = cfg.flow_kind() {
        for k in 0..cfg.flow_steps {
            let name = format!("flow{k}");
            flows.push(match kind {
                FlowKind::Planar => {
                    let init = match b.rng.as_deref_mut() {
                        Some(rng) => PlanarParams::init(l, rng),
                        None => PlanarParams::identity(l),
                    };
                    FlowLayout::Planar {
                        u: b.value(format!("{name}.u"), init.u),
                        w: b.value(format!("{name}.w"), init.w),
                        b: b.value(format!("{name}.b"), Tensor::scalar(init.b)),
                    }
                }
                FlowKind::Radial => {
                    let init = RadialParams::init(l);
                    FlowLayout::Radial {
                        z_ref: b.value(format!("{name}.z_ref"), init.z_ref),
                        alpha_raw: b.value(format!("{name}.alpha_raw"), Tensor::scalar(init.alpha_raw)),
                        beta_raw: b.value(format!("{name}.beta_raw"), Tensor::scalar(init.beta_raw)),
                    }
                }
            });
        }
    }
    let f = u.feature_channels;
    let fcomb = [
        b.conv("fcomb.conv1", f + l, f, 1),
        b.conv("fcomb.conv2", f, f, 1),
        b.conv("fcomb.conv3", f, 1, 1),
    ];
    if let Some(t) = b.store.tensors.get_mut(fcomb[2].bias) {
        t.data_mut().fill(FOREGROUND_LOGIT_INIT);
    }
    (
        Layout {
            unet,
            prior,
            posterior,
            flows,
            fcomb,
        },
        b.store,
    )
}

/// Forward-pass counters, one per sub-network.
#[derive(Debug, Default)]
pub struct ForwardCounters {
    pub unet: AtomicUsize,
    pub prior: AtomicUsize,
    pub posterior: AtomicUsize,
    pub fcomb: AtomicUsize,
    /// Log-variance entries clamped into `[-LOG_VAR_LIMIT, LOG_VAR_LIMIT]`.
    pub log_var_clamps: AtomicUsize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub unet: usize,
    pub prior: usize,
    pub posterior: usize,
    pub fcomb: usize,
    pub log_var_clamps: usize,
}

impl ForwardCounters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            unet: self.unet.load(Ordering::Relaxed),
            prior: self.prior.load(Ordering::Relaxed),
            posterior: self.posterior.load(Ordering::Relaxed),
            fcomb: self.fcomb.load(Ordering::Relaxed),
            log_var_clamps: self.log_var_clamps.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        for c in [&self.unet, &self.prior, &self.posterior, &self.fcomb, &self.log_var_clamps] {
            c.store(0, Ordering::Relaxed);
        }
    }
}

/// The posterior path of one training example.
#[derive(Clone, Debug)]
pub struct PosteriorOutput {
    pub base: DiagGaussian,
    pub sample: LatentSample,
    /// Flowed sample `z_K`.
    pub z_k: Var,
    pub sum_logdet: Var,
}

/// `N` sampled segmentations of one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub grid: Grid,
    /// Post-sigmoid activations per sample, clamped strictly inside `(0, 1)`.
    pub activations: Vec<Vec<f64>>,
    /// Activations above 0.5.
    pub masks: Vec<Mask>,
}

impl PredictionSet {
    pub fn from_activations(grid: Grid, activations: Vec<Vec<f64>>) -> Result<Self> {
        let n = grid.iter().product::<usize>();
        if activations.iter().any(|a| a.len() != n) {
            return Err(Error::shape("activation map does not match grid"));
        }
        let activations: Vec<Vec<f64>> = activations
            .into_iter()
            .map(|a| {
                a.into_iter()
                    .map(|v| v.clamp(f64::EPSILON, 1.0 - f64::EPSILON))
                    .collect()
            })
            .collect();
        let masks = activations
            .iter()
            .map(|a| Mask {
                grid,
                voxels: a.iter().map(|&v| v > 0.5).collect(),
            })
            .collect();
        Ok(PredictionSet {
            grid,
            activations,
            masks,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.activations.len()
    }
}

/// Voxelwise population standard deviation of the activations.
pub fn uncertainty_map(p: &PredictionSet) -> Result<Vec<f64>> {
    let n = p.n_samples();
    if n < 2 {
        return Err(Error::usage(format!(
            "uncertainty map needs at least 2 samples, got {}",
            n
        )));
    }
    let v = p.activations[0].len();
    let mut out = vec![0.0; v];
    for (i, o) in out.iter_mut().enumerate() {
        // shifted by the first sample so identical samples give exactly zero
        let a0 = p.activations[0][i];
        let mean = p.activations.iter().map(|a| a[i] - a0).sum::<f64>() / n as f64;
        let var = p
            .activations
            .iter()
            .map(|a| (a[i] - a0 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        *o = var.sqrt();
    }
    Ok(out)
}

/// Voxelwise mean activation, thresholded at 0.5.
pub fn mean_prediction(p: &PredictionSet) -> Result<Mask> {
    let n = p.n_samples();
    if n == 0 {
        return Err(Error::usage("mean prediction of an empty set"));
    }
    let v = p.activations[0].len();
    let voxels = (0..v)
        .map(|i| p.activations.iter().map(|a| a[i]).sum::<f64>() / n as f64 > 0.5)
        .collect();
    Ok(Mask {
        grid: p.grid,
        voxels,
    })
}

pub fn volume_tensor(v: &Volume3D) -> Tensor {
    let [d, h, w] = v.grid;
    Tensor::new(
        vec![1, d, h, w],
        v.intensities.iter().map(|&x| x as f64).collect(),
    )
    .expect("volume payload matches grid")
}

pub fn mask_tensor(m: &Mask) -> Tensor {
    let [d, h, w] = m.grid;
    Tensor::new(
        vec![1, d, h, w],
        m.voxels.iter().map(|&b| b as u8 as f64).collect(),
    )
    .expect("mask payload matches grid")
}

#[derive(Debug)]
pub struct ProbUNet {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    pub counters: ForwardCounters,
}

impl Clone for ProbUNet {
    fn clone(&self) -> Self {
        ProbUNet {
            config: self.config,
            params: self.params.clone(),
            layout: self.layout.clone(),
            counters: ForwardCounters::default(),
        }
    }
}

impl ProbUNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, params) = build_layout(&config, Some(&mut rng));
        Ok(ProbUNet {
            config,
            params,
            layout,
            counters: ForwardCounters::default(),
        })
    }

    /// Rebuild a model from a configuration and stored parameters, checking
    /// names and shapes against the architecture.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let (layout, expected) = build_layout(&config, None);
        if expected.names != params.names {
            return Err(Error::Config(
                "parameter names do not match the configured architecture".into(),
            ));
        }
        for (name, (a, b)) in expected
            .names
            .iter()
            .zip(expected.tensors.iter().zip(&params.tensors))
        {
            if a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, architecture expects {:?}",
                    name,
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(ProbUNet {
            config,
            params,
            layout,
            counters: ForwardCounters::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Put every parameter on `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Graph-resident flow steps of the posterior.
    pub fn flow_chain(&self, p: &[Var]) -> Result<FlowChain> {
        let steps = self
            .layout
            .flows
            .iter()
            .map(|f| match *f {
                FlowLayout::Planar { u, w, b } => FlowStep::Planar {
                    u: p[u],
                    w: p[w],
                    b: p[b],
                },
                FlowLayout::Radial {
                    z_ref,
                    alpha_raw,
                    beta_raw,
                } => FlowStep::Radial {
                    z_ref: p[z_ref],
                    alpha_raw: p[alpha_raw],
                    beta_raw: p[beta_raw],
                },
            })
            .collect();
        FlowChain::new(steps)
    }

    /// Value-level flow parameters, in chain order.
    pub fn flow_params(&self) -> Vec<FlowParams> {
        let t = &self.params.tensors;
        self.layout
            .flows
            .iter()
            .map(|f| match *f {
                FlowLayout::Planar { u, w, b } => FlowParams::Planar(PlanarParams {
                    u: t[u].clone(),
                    w: t[w].clone(),
                    b: t[b].item(),
                }),
                FlowLayout::Radial {
                    z_ref,
                    alpha_raw,
                    beta_raw,
                } => FlowParams::Radial(RadialParams {
                    z_ref: t[z_ref].clone(),
                    alpha_raw: t[alpha_raw].item(),
                    beta_raw: t[beta_raw].item(),
                }),
            })
            .collect()
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<Grid> {
        let s = g.shape(x);
        if s.len() != 4 || s[0] != self.config.unet.in_channels {
            return Err(Error::shape(format!(
                "network input must be [{}, D, H, W], got {:?}",
                self.config.unet.in_channels, s
            )));
        }
        let grid = [s[1], s[2], s[3]];
        self.config.unet.check_grid(grid)?;
        Ok(grid)
    }

    pub fn unet_forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        self.counters.unet.fetch_add(1, Ordering::Relaxed);
        let lay = &self.layout.unet;
        let mut skips = Vec::new();
        let mut h = x;
        for (l, block) in lay.encoder.iter().enumerate() {
            h = block.apply(g, p, h)?;
            if l + 1 < lay.encoder.len() {
                skips.push(h);
                h = g.rescale_spatial(h, RescaleDirection::Down, 2)?;
            }
        }
        for block in &lay.decoder {
            let up = g.rescale_spatial(h, RescaleDirection::Up, 2)?;
            let skip = skips.pop().expect("one skip per decoder level");
            let cat = g.concat_channels(skip, up)?;
            h = block.apply(g, p, cat)?;
        }
        lay.head.apply(g, p, h)
    }

    fn encode(&self, g: &mut Graph, p: &[Var], enc: &EncoderLayout, x: Var) -> Result<DiagGaussian> {
        let mut h = x;
        for (l, block) in enc.blocks.iter().enumerate() {
            h = block.apply(g, p, h)?;
            if l + 1 < enc.blocks.len() {
                h = g.rescale_spatial(h, RescaleDirection::Down, 2)?;
            }
        }
        let pooled = g.global_avg_pool(h)?;
        let mean = g.affine(pooled, p[enc.mean_w], p[enc.mean_b])?;
        let raw = g.affine(pooled, p[enc.log_var_w], p[enc.log_var_b])?;
        let clamped = g
            .value(raw)
            .data()
            .iter()
            .filter(|v| v.abs() > LOG_VAR_LIMIT)
            .count();
        let log_var = if clamped > 0 {
            self.counters
                .log_var_clamps
                .fetch_add(clamped, Ordering::Relaxed);
            g.clamp(raw, -LOG_VAR_LIMIT, LOG_VAR_LIMIT)
        } else {
            raw
        };
        DiagGaussian::new(g, mean, log_var)
    }

    pub fn prior_forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<DiagGaussian> {
        self.check_input(g, x)?;
        let enc = self
            .layout
            .prior
            .as_ref()
            .ok_or_else(|| Error::usage(format!("variant {} has no prior network", self.config.variant)))?;
        self.counters.prior.fetch_add(1, Ordering::Relaxed);
        self.encode(g, p, enc, x)
    }

    /// Encode `(x, y)`, draw `z₀` with the given noise and push it through the
    /// flow chain.
    pub fn posterior_forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        x: Var,
        y: Var,
        eps: &Tensor,
    ) -> Result<PosteriorOutput> {
        self.check_input(g, x)?;
        if g.shape(y).len() != 4 || g.shape(y)[0] != 1 || g.shape(y)[1..] != g.shape(x)[1..] {
            return Err(Error::shape(format!(
                "segmentation {:?} is not on the input grid {:?}",
                g.shape(y),
                g.shape(x)
            )));
        }
        let enc = self.layout.posterior.as_ref().ok_or_else(|| {
            Error::usage(format!("variant {} has no posterior network", self.config.variant))
        })?;
        self.counters.posterior.fetch_add(1, Ordering::Relaxed);
        let xy = g.concat_channels(x, y)?;
        let base = self.encode(g, p, enc, xy)?;
        let sample = base.sample_reparam(g, eps)?;
        let chain = self.flow_chain(p)?;
        let (z_k, sum_logdet) = chain.apply(g, sample.value)?;
        Ok(PosteriorOutput {
            base,
            sample,
            z_k,
            sum_logdet,
        })
    }

    /// Logits `[1, D, H, W]` from features and a latent sample (an empty
    /// vector for the deterministic baseline).
    pub fn fcomb_forward(&self, g: &mut Graph, p: &[Var], features: Var, z: Var) -> Result<Var> {
        let fs = g.shape(features).to_vec();
        if fs.len() != 4 || fs[0] != self.config.unet.feature_channels {
            return Err(Error::shape(format!(
                "fcomb expects [{}, D, H, W] features, got {:?}",
                self.config.unet.feature_channels, fs
            )));
        }
        if g.shape(z) != [self.config.latent_dim] {
            return Err(Error::shape(format!(
                "fcomb expects a latent of length {}, got {:?}",
                self.config.latent_dim,
                g.shape(z)
            )));
        }
        self.counters.fcomb.fetch_add(1, Ordering::Relaxed);
        let tiled = g.broadcast_latent(z, [fs[1], fs[2], fs[3]])?;
        let h = g.concat_channels(features, tiled)?;
        let [c1, c2, c3] = &self.layout.fcomb;
        let h = c1.apply(g, p, h)?;
        let h = g.relu(h);
        let h = c2.apply(g, p, h)?;
        let h = g.relu(h);
        c3.apply(g, p, h)
    }

    /// Image features and prior of one volume, computed once per volume.
    pub fn encode_volume(&self, x: &Volume3D) -> Result<(Tensor, Option<GaussianParams>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(volume_tensor(x));
        let feats = self.unet_forward(&mut g, &p, xv)?;
        let prior = if self.config.variant.is_probabilistic() {
            Some(self.prior_forward(&mut g, &p, xv)?.params(&g))
        } else {
            None
        };
        Ok((g.value(feats).clone(), prior))
    }

    /// Sigmoid activations for one latent sample over precomputed features.
    pub fn decode_sample(&self, features: &Tensor, z: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let f = g.constant(features.clone());
        let zv = g.constant(Tensor::vector(z.to_vec()));
        let logits = self.fcomb_forward(&mut g, &p, f, zv)?;
        let act = g.sigmoid(logits);
        Ok(g.value(act).data().to_vec())
    }

    /// Draw the standard-normal noise for `n` prior samples.
    pub fn sample_noise(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                (0..self.config.latent_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect()
    }

    /// One U-Net pass, one prior pass, then `n` prior samples decoded by the
    /// feature-combination head.
    pub fn predict_n(&self, x: &Volume3D, n: usize, seed: u64) -> Result<PredictionSet> {
        if n == 0 {
            return Err(Error::usage("predict_n needs n >= 1"));
        }
        let (features, prior) = self.encode_volume(x)?;
        let latents: Vec<Vec<f64>> = match &prior {
            Some(prior) => self
                .sample_noise(n, seed)
                .iter()
                .map(|eps| prior.reparam(eps))
                .collect(),
            None => vec![Vec::new(); n],
        };
        let activations = latents
            .iter()
            .map(|z| self.decode_sample(&features, z))
            .collect::<Result<Vec<_>>>()?;
        PredictionSet::from_activations(x.grid, activations)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PUN3";
pub const CHECKPOINT_VERSION: u32 = 1;

fn flow_code(k: Option<FlowKind>) -> u8 {
    match k {
        None => 0,
        Some(FlowKind::Planar) => 1,
        Some(FlowKind::Radial) => 2,
    }
}

/// Little-endian checkpoint:
///
/// ```text
/// "PUN3" | version u32 | variant u8 | levels base in feat latent u32
/// | flow kind u8 | flow steps u32 | param count u32
/// | per tensor: name len u32, name, ndim u32, dims u32…, f64 data
/// ```
pub fn encode_checkpoint(model: &ProbUNet) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::with_capacity(64 + model.params().numel() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(c.variant.code());
    for v in [
        c.unet.levels,
        c.unet.base_channels,
        c.unet.in_channels,
        c.unet.feature_channels,
        c.latent_dim,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(flow_code(c.flow_kind()));
    out.extend_from_slice(&(c.flow_steps as u32).to_le_bytes());
    let p = model.params();
    out.extend_from_slice(&(p.len() as u32).to_le_bytes());
    for (name, t) in p.names.iter().zip(&p.tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated {}: need {} bytes, {} remain", what, n, self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ProbUNet> {
    let mut r = Cursor { buf, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"PUN3\""));
    }
    let at = r.pos;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::format(at, format!("unsupported checkpoint version {}", version)));
    }
    let at = r.pos;
    let code = r.u8("variant")?;
    let variant = ModelVariant::from_code(code)
        .ok_or_else(|| Error::format(at, format!("unknown variant code {}", code)))?;
    let unet = UNet3DConfig {
        levels: r.u32("levels")?,
        base_channels: r.u32("base channels")?,
        in_channels: r.u32("input channels")?,
        feature_channels: r.u32("feature channels")?,
    };
    let latent_dim = r.u32("latent dim")?;
    let at = r.pos;
    let fk = r.u8("flow kind")?;
    let flow_steps = r.u32("flow steps")?;
    let config = ModelConfig {
        variant,
        unet,
        latent_dim,
        flow_steps,
    };
    if fk > 2 || (flow_steps > 0 && fk != flow_code(config.flow_kind())) {
        return Err(Error::format(at, format!("flow kind {} inconsistent with variant {}", fk, variant)));
    }
    let count = r.u32("parameter count")?;
    let mut params = ParamStore::default();
    for _ in 0..count {
        let n = r.u32("name length")?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(n, "parameter name")?)
            .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?
            .to_string();
        let ndim = r.u32("rank")?;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u32("dimension")?);
        }
        let at = r.pos;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::format(at, "tensor size overflow"))?;
        let data = r
            .take(numel, "tensor payload")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(name, Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::format(r.pos, format!("{} trailing bytes", buf.len() - r.pos)));
    }
    ProbUNet::from_params(config, params)
}

pub fn save_checkpoint(path: &std::path::Path, model: &ProbUNet) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<ProbUNet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Spacing;
    use crate::tensor::grad_check_many;

    fn toy_config(variant: ModelVariant, latent: usize) -> ModelConfig {
        ModelConfig::new(
            variant,
            UNet3DConfig {
                levels: 2,
                base_channels: 2,
                in_channels: 1,
                feature_channels: 3,
            },
            latent,
        )
    }

    fn toy_volume(grid: Grid, seed: u64) -> Volume3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.iter().product();
        let data = (0..n)
            .map(|_| StandardNormal.sample(&mut rng))
            .map(|v: f64| v as f32)
            .collect();
        Volume3D::new(grid, Spacing::new(1.0, 0.5, 0.5), data).unwrap()
    }

    fn zero_param(model: &mut ProbUNet, prefix: &str) {
        let params = model.params_mut();
        for (name, t) in params.names.iter().zip(params.tensors.iter_mut()) {
            if name.starts_with(prefix) {
                t.data_mut().fill(0.0);
            }
        }
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("punet3d-radial".parse::<ModelVariant>().unwrap(), ModelVariant::PUNet3DRadial);
        let err = "punet2d".parse::<ModelVariant>().unwrap_err();
        assert!(err.to_string().contains("unet3d, punet3d, punet3d-planar, punet3d-radial"));
    }

    #[test]
    fn unet_is_deterministic_and_shaped() {
        let model = ProbUNet::new(toy_config(ModelVariant::PUNet3D, 2), 1).unwrap();
        let x = toy_volume([4, 4, 6], 2);
        let (a, _) = model.encode_volume(&x).unwrap();
        let (b, _) = model.encode_volume(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 4, 4, 6]);
    }

    #[test]
    fn indivisible_grid_names_axis() {
        let model = ProbUNet::new(toy_config(ModelVariant::PUNet3D, 2), 1).unwrap();
        let err = model.encode_volume(&toy_volume([4, 5, 4], 0)).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    #[test]
    fn zero_head_gives_zero_features() {
        let mut model = ProbUNet::new(toy_config(ModelVariant::PUNet3D, 2), 1).unwrap();
        zero_param(&mut model, "unet.head");
        let (f, _) = model.encode_volume(&toy_volume([2, 4, 4], 3)).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prior_dimension_and_zero_heads() {
        let cfg = ModelConfig::new(ModelVariant::PUNet3D, toy_config(ModelVariant::PUNet3D, 2).unet, DEFAULT_LATENT_DIM);
        let mut model = ProbUNet::new(cfg, 4).unwrap();
        let x = toy_volume([2, 4, 4], 5);
        let (_, prior) = model.encode_volume(&x).unwrap();
        assert_eq!(prior.unwrap().dim(), 6);
        zero_param(&mut model, "prior.mean");
        zero_param(&mut model, "prior.log_var");
        let (_, prior) = model.encode_volume(&x).unwrap();
        assert_eq!(prior.unwrap(), GaussianParams::standard(6));
    }

    #[test]
    fn posterior_without_flow_and_with_flow() {
        let x = toy_volume([2, 4, 4], 6);
        let y = Mask::from_fn([2, 4, 4], |z, _, _| z == 0);
        let eps = Tensor::vector(vec![0.3, -0.8]);
        for variant in [ModelVariant::PUNet3D, ModelVariant::PUNet3DPlanar, ModelVariant::PUNet3DRadial] {
            let model = ProbUNet::new(toy_config(variant, 2), 7).unwrap();
            let run = || {
                let mut g = Graph::new();
                let p = model.bind(&mut g, false);
                let xv = g.constant(volume_tensor(&x));
                let yv = g.constant(mask_tensor(&y));
                let out = model.posterior_forward(&mut g, &p, xv, yv, &eps).unwrap();
                (
                    g.value(out.sample.value).clone(),
                    g.value(out.z_k).clone(),
                    g.value(out.sum_logdet).item(),
                )
            };
            let (z0, zk, ld) = run();
            assert_eq!(run(), (z0.clone(), zk.clone(), ld));
            let (chain_z, chain_ld) =
                crate::flows::chain_forward_values(&model.flow_params(), z0.data()).unwrap();
            assert_eq!(chain_z, zk.data());
            assert_eq!(chain_ld, ld);
            if variant == ModelVariant::PUNet3D {
                assert_eq!(z0, zk);
                assert_eq!(ld, 0.0);
            }
        }
    }

    #[test]
    fn posterior_grid_mismatch() {
        let model = ProbUNet::new(toy_config(ModelVariant::PUNet3D, 2), 7).unwrap();
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let xv = g.constant(volume_tensor(&toy_volume([2, 4, 4], 1)));
        let yv = g.constant(mask_tensor(&Mask::empty([2, 4, 2])));
        assert!(matches!(
            model.posterior_forward(&mut g, &p, xv, yv, &Tensor::vector(vec![0.0, 0.0])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn fcomb_determinism_and_zero_output() {
        let mut model = ProbUNet::new(toy_config(ModelVariant::PUNet3D, 2), 8).unwrap();
        let (f, _) = model.encode_volume(&toy_volume([2, 4, 4], 9)).unwrap();
        let a = model.decode_sample(&f, &[0.1, 0.2]).unwrap();
        let b = model.decode_sample(&f, &[0.1, 0.2]).unwrap();
        let c = model.decode_sample(&f, &[-2.0, 3.0]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        zero_param(&mut model, "fcomb.conv3");
        let z = model.decode_sample(&f, &[-2.0, 3.0]).unwrap();
        assert!(z.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn fcomb_gradient_wrt_latent() {
        let model = ProbUNet::new(toy_config(ModelVariant::PUNet3D, 2), 8).unwrap();
        let (f, _) = model.encode_volume(&toy_volume([2, 4, 4], 9)).unwrap();
        let report = grad_check_many(
            |g, v| {
                let p = model.bind(g, false);
                let fv = g.constant(f.clone());
                let logits = model.fcomb_forward(g, &p, fv, v[0])?;
                Ok(g.mean(logits))
            },
            &[Tensor::vector(vec![0.4, -0.7])],
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{:?}", report);
    }

    #[test]
    fn predict_counts_passes_and_is_seeded() {
        let model = ProbUNet::new(toy_config(ModelVariant::PUNet3DRadial, 2), 10).unwrap();
        let x = toy_volume([2, 4, 4], 11);
        let a = model.predict_n(&x, 5, 3).unwrap();
        let c = model.counters.snapshot();
        assert_eq!((c.unet, c.prior, c.fcomb, c.posterior), (1, 1, 5, 0));
        let b = model.predict_n(&x, 5, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_samples(), 5);
        assert!(a.activations.iter().flatten().all(|&v| v > 0.0 && v < 1.0));
        assert!(matches!(model.predict_n(&x, 0, 3), Err(Error::Usage(_))));
    }

    #[test]
    fn collapsed_prior_gives_identical_samples() {
        let mut model = ProbUNet::new(toy_config(ModelVariant::PUNet3D, 2), 12).unwrap();
        let i = model.params().index_of("prior.log_var.bias").unwrap();
        model.params_mut().tensors[i].data_mut().fill(-1e6);
        let x = toy_volume([2, 4, 4], 13);
        let p = model.predict_n(&x, 4, 1).unwrap();
        assert!(model.counters.snapshot().log_var_clamps > 0);
        for s in &p.activations[1..] {
            for (a, b) in s.iter().zip(&p.activations[0]) {
                assert!((a - b).abs() < 1e-3);
            }
        }
        assert!(p.masks.iter().all(|m| m == &p.masks[0]));
    }

    #[test]
    fn deterministic_baseline_has_no_latent_networks() {
        let model = ProbUNet::new(toy_config(ModelVariant::UNet3D, 0), 1).unwrap();
        assert!(model.params().names.iter().all(|n| !n.starts_with("prior") && !n.starts_with("posterior")));
        let x = toy_volume([2, 4, 4], 2);
        let p = model.predict_n(&x, 4, 0).unwrap();
        assert!(p.activations.iter().all(|a| a == &p.activations[0]));
    }

    #[test]
    fn uncertainty_map_cases() {
        let grid = [1, 1, 3];
        let same = PredictionSet::from_activations(grid, vec![vec![0.2, 0.7, 0.9]; 3]).unwrap();
        assert!(uncertainty_map(&same).unwrap().iter().all(|&v| v == 0.0));
        let split = PredictionSet::from_activations(grid, vec![vec![0.0, 0.5, 1.0], vec![1.0, 0.5, 0.0]]).unwrap();
        let u = uncertainty_map(&split).unwrap();
        assert!((u[0] - 0.5).abs() < 1e-12 && u[1] == 0.0);
        let one = PredictionSet::from_activations(grid, vec![vec![0.2, 0.7, 0.9]]).unwrap();
        assert!(uncertainty_map(&one).is_err());
    }

    #[test]
    fn uncertainty_map_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let acts: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..10).map(|_| rand::Rng::random_range(&mut rng, 0.01..0.99)).collect())
            .collect();
        let p = PredictionSet::from_activations([1, 2, 5], acts.clone()).unwrap();
        let u = uncertainty_map(&p).unwrap();
        for v in 0..10 {
            let col: Vec<f64> = acts.iter().map(|a| a[v]).collect();
            let mean = col.iter().sum::<f64>() / 7.0;
            let sd = (col.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / 7.0).sqrt();
            assert!((u[v] - sd).abs() < 1e-14);
        }
    }

    #[test]
    fn mean_prediction_majority() {
        let grid = [1, 1, 4];
        let empty = PredictionSet::from_activations(grid, vec![vec![0.1; 4]; 3]).unwrap();
        assert!(mean_prediction(&empty).unwrap().is_empty());
        // every voxel pattern of 3 near-binary samples where two agree
        let s = [
            vec![0.95, 0.95, 0.05, 0.05],
            vec![0.95, 0.05, 0.95, 0.05],
            vec![0.05, 0.95, 0.95, 0.05],
        ];
        let p = PredictionSet::from_activations(grid, s.to_vec()).unwrap();
        assert_eq!(mean_prediction(&p).unwrap().voxels, vec![true, true, true, false]);
        let fixed = Mask::from_fn(grid, |_, _, x| x % 2 == 0);
        let acts: Vec<f64> = fixed.voxels.iter().map(|&b| if b { 0.9 } else { 0.1 }).collect();
        let p = PredictionSet::from_activations(grid, vec![acts; 3]).unwrap();
        assert_eq!(mean_prediction(&p).unwrap(), fixed);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        for variant in ModelVariant::ALL {
            let model = ProbUNet::new(toy_config(variant, 2), 3).unwrap();
            let bytes = encode_checkpoint(&model);
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back.params(), model.params());
            assert_eq!(back.config(), model.config());
            assert_eq!(encode_checkpoint(&back), bytes);
        }
    }

    #[test]
    fn checkpoint_records_flow() {
        let model = ProbUNet::new(toy_config(ModelVariant::PUNet3DRadial, 2), 3).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&model)).unwrap();
        assert_eq!(back.config().flow_kind(), Some(FlowKind::Radial));
        assert_eq!(back.config().flow_steps, 2);
    }

    #[test]
    fn checkpoint_corruption_detected() {
        let model = ProbUNet::new(toy_config(ModelVariant::PUNet3D, 2), 3).unwrap();
        let bytes = encode_checkpoint(&model);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        let mut long = bytes.clone();
        long.push(1);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Format { offset, .. }) if offset == bytes.len()));
        let mut bad_variant = bytes;
        bad_variant[8] = 9;
        assert!(matches!(decode_checkpoint(&bad_variant), Err(Error::Format { offset: 8, .. })));
    }

}
