//! Synthetic ambiguous lesions: a smooth background with one ellipsoidal
//! lesion, annotated by four raters who each draw either the tight boundary
//! or a dilated one, or miss the lesion entirely.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{grid_len, Grid, LesionCase, Mask, Volume3D, ANNOTATIONS_PER_CASE};
use super::preprocess::{pad_annotations_to4, TARGET_SPACING};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotatorMode {
    Tight,
    Dilated,
    Missed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_cases: usize,
    pub grid: Grid,
    pub seed: u64,
    /// Probability that an individual annotator emits an empty mask.
    pub p_miss: f64,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_cases: 200,
            grid: [16, 32, 32],
            seed: 0,
            p_miss: 0.1,
            noise_std: 0.05,
        }
    }
}

/// Everything needed to re-render one case bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseParams {
    pub case_id: String,
    pub grid: Grid,
    pub noise_seed: u64,
    pub noise_std: f64,
    /// Lesion centre in voxel coordinates `(z, y, x)`.
    pub center: [f64; 3],
    /// Ellipsoid semi-axes in voxels.
    pub radii: [f64; 3],
    pub contrast: f64,
    pub background_phase: [f64; 3],
    /// Dilation radius of the wide annotation mode, in voxels.
    pub dilation: u32,
    /// Draw of each of the four annotators, in annotator order.
    pub annotators: [AnnotatorMode; ANNOTATIONS_PER_CASE],
}

impl CaseParams {
    /// Modes of the stored annotation slots: real annotations in annotator
    /// order, then `Missed` for the padded slots.
    pub fn slot_modes(&self) -> Vec<AnnotatorMode> {
        let mut modes: Vec<AnnotatorMode> = self
            .annotators
            .iter()
            .copied()
            .filter(|&m| m != AnnotatorMode::Missed)
            .collect();
        modes.resize(ANNOTATIONS_PER_CASE, AnnotatorMode::Missed);
        modes
    }

    pub fn n_real(&self) -> usize {
        self.annotators
            .iter()
            .filter(|&&m| m != AnnotatorMode::Missed)
            .count()
    }

    /// Whether the real annotations contain both the tight and dilated mode.
    pub fn is_two_mode(&self) -> bool {
        self.annotators.contains(&AnnotatorMode::Tight)
            && self.annotators.contains(&AnnotatorMode::Dilated)
    }

    fn normalized_radius(&self, z: usize, y: usize, x: usize) -> f64 {
        let p = [z as f64, y as f64, x as f64];
        (0..3)
            .map(|k| ((p[k] - self.center[k]) / self.radii[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn tight_mask(&self) -> Mask {
        Mask::from_fn(self.grid, |z, y, x| self.normalized_radius(z, y, x) <= 1.0)
    }

    /// Tight mask dilated by a Euclidean ball of radius `dilation` voxels.
    pub fn dilated_mask(&self) -> Mask {
        let tight = self.tight_mask();
        let d = self.dilation as isize;
        let mut out = tight.clone();
        for [z, y, x] in tight.coords() {
            for dz in -d..=d {
                for dy in -d..=d {
                    for dx in -d..=d {
                        if dz * dz + dy * dy + dx * dx > d * d {
                            continue;
                        }
                        let (a, b, c) = (z as isize + dz, y as isize + dy, x as isize + dx);
                        if a < 0 || b < 0 || c < 0 {
                            continue;
                        }
                        let (a, b, c) = (a as usize, b as usize, c as usize);
                        if a < self.grid[0] && b < self.grid[1] && c < self.grid[2] {
                            out.set(a, b, c, true);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn mode_mask(&self, mode: AnnotatorMode) -> Mask {
        match mode {
            AnnotatorMode::Tight => self.tight_mask(),
            AnnotatorMode::Dilated => self.dilated_mask(),
            AnnotatorMode::Missed => Mask::empty(self.grid),
        }
    }

    fn render_volume(&self) -> Volume3D {
        let [d, h, w] = self.grid;
        let noise = Normal::new(0.0, self.noise_std.max(0.0)).expect("valid noise std");
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let tau = std::f64::consts::TAU;
        let ph = self.background_phase;
        let mut out = Vec::with_capacity(grid_len(self.grid));
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let bg = 0.1 * (tau * z as f64 / d as f64 + ph[0]).sin()
                        + 0.1 * (tau * y as f64 / h as f64 + ph[1]).sin()
                            * (tau * x as f64 / w as f64 + ph[2]).cos();
                    let rho = self.normalized_radius(z, y, x);
                    let lesion = self.contrast / (1.0 + (6.0 * (rho - 1.0)).exp());
                    let n = if self.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    out.push((bg + lesion + n) as f32);
                }
            }
        }
        Volume3D {
            grid: self.grid,
            spacing: TARGET_SPACING,
            intensities: out,
        }
    }
}

/// Draw the parameters of one case from `rng`.
pub fn sample_case_params<R: Rng>(
    rng: &mut R,
    case_id: String,
    cfg: &SynthConfig,
) -> CaseParams {
    let grid = cfg.grid;
    let radii = [
        rng.random_range(1.5..3.0),
        rng.random_range(3.0..5.5),
        rng.random_range(3.0..5.5),
    ];
    let dilation = rng.random_range(1..=2u32);
    let center: [f64; 3] = std::array::from_fn(|k| {
        let margin = radii[k] + dilation as f64 + 1.0;
        let lo = margin;
        let hi = grid[k] as f64 - 1.0 - margin;
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            (grid[k] as f64 - 1.0) / 2.0
        }
    });
    let contrast = rng.random_range(0.8..1.2);
    let background_phase = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let annotators = loop {
        let draw: [AnnotatorMode; ANNOTATIONS_PER_CASE] = std::array::from_fn(|_| {
            if rng.random_bool(cfg.p_miss.clamp(0.0, 1.0)) {
                AnnotatorMode::Missed
            } else if rng.random_bool(0.5) {
                AnnotatorMode::Tight
            } else {
                AnnotatorMode::Dilated
            }
        });
        if draw.iter().any(|&m| m != AnnotatorMode::Missed) {
            break draw;
        }
    };
    CaseParams {
        case_id,
        grid,
        noise_seed: rng.next_u64(),
        noise_std: cfg.noise_std,
        center,
        radii,
        contrast,
        background_phase,
        dilation,
        annotators,
    }
}

pub fn render_case(p: &CaseParams) -> Result<LesionCase> {
    let volume = p.render_volume();
    let real: Vec<Mask> = p
        .annotators
        .iter()
        .filter(|&&m| m != AnnotatorMode::Missed)
        .map(|&m| p.mode_mask(m))
        .collect();
    let (annotations, n_real) = pad_annotations_to4(real)?;
    LesionCase::new(p.case_id.clone(), volume, annotations, n_real)
}

/// Generate `cfg.n_cases` cases together with their generator parameters.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<(LesionCase, CaseParams)>> {
    if cfg.n_cases == 0 {
        return Err(Error::usage("synth_generate needs n_cases >= 1"));
    }
    if cfg.grid.iter().any(|&e| e == 0) {
        return Err(Error::usage(format!("invalid grid {:?}", cfg.grid)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_cases)
        .map(|i| {
            let params = sample_case_params(&mut rng, format!("case_{:04}", i), cfg);
            let case = render_case(&params)?;
            Ok((case, params))
        })
        .collect()
}
