//! Volumes, annotation masks, preprocessing, synthetic cases and the case
//! file format.

mod io;
mod preprocess;
mod split;
mod synth;

pub use io::{decode_case, encode_case, load_case, save_case, CASE_MAGIC, CASE_VERSION};
pub use preprocess::{
    cluster_annotations, crop_center, pad_annotations_to4, resample, resample_mask,
    center_of_mass, TARGET_SPACING,
};
pub use split::{split_dataset, DatasetSplit, SplitName, DEFAULT_FRACTIONS};
pub use synth::{
    render_case, sample_case_params, synth_generate, AnnotatorMode, CaseParams, SynthConfig,
};

use crate::error::{Error, Result};

/// `(D, H, W)` extents, i.e. `(z, y, x)`.
pub type Grid = [usize; 3];

pub fn grid_len(grid: Grid) -> usize {
    grid.iter().product()
}

/// Physical voxel size in millimetres.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Spacing {
    pub z: f32,
    pub x: f32,
    pub y: f32,
}

impl Spacing {
    pub const fn new(z: f32, x: f32, y: f32) -> Self {
        Spacing { z, x, y }
    }

    /// Spacing per array axis `(D, H, W)` = `(z, y, x)`.
    pub fn per_axis(&self) -> [f64; 3] {
        [self.z as f64, self.y as f64, self.x as f64]
    }

    pub fn max(&self) -> f64 {
        self.per_axis().into_iter().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    pub grid: Grid,
    pub spacing: Spacing,
    /// Row-major `z, y, x`.
    pub intensities: Vec<f32>,
}

impl Volume3D {
    pub fn new(grid: Grid, spacing: Spacing, intensities: Vec<f32>) -> Result<Self> {
        if grid.iter().any(|&e| e == 0) {
            return Err(Error::shape(format!("volume extents must be >= 1, got {:?}", grid)));
        }
        if spacing.per_axis().iter().any(|&s| !(s > 0.0)) {
            return Err(Error::shape(format!("spacing must be positive, got {:?}", spacing)));
        }
        if intensities.len() != grid_len(grid) {
            return Err(Error::shape(format!(
                "volume {:?} needs {} intensities, got {}",
                grid,
                grid_len(grid),
                intensities.len()
            )));
        }
        Ok(Volume3D {
            grid,
            spacing,
            intensities,
        })
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.grid[1] + y) * self.grid[2] + x
    }

    pub fn min_intensity(&self) -> f32 {
        self.intensities.iter().copied().fold(f32::INFINITY, f32::min)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    pub grid: Grid,
    pub voxels: Vec<bool>,
}

impl Mask {
    pub fn empty(grid: Grid) -> Self {
        Mask {
            grid,
            voxels: vec![false; grid_len(grid)],
        }
    }

    pub fn new(grid: Grid, voxels: Vec<bool>) -> Result<Self> {
        if voxels.len() != grid_len(grid) {
            return Err(Error::shape(format!(
                "mask {:?} needs {} voxels, got {}",
                grid,
                grid_len(grid),
                voxels.len()
            )));
        }
        Ok(Mask { grid, voxels })
    }

    pub fn from_fn<F: Fn(usize, usize, usize) -> bool>(grid: Grid, f: F) -> Self {
        let mut voxels = Vec::with_capacity(grid_len(grid));
        for z in 0..grid[0] {
            for y in 0..grid[1] {
                for x in 0..grid[2] {
                    voxels.push(f(z, y, x));
                }
            }
        }
        Mask { grid, voxels }
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.grid[1] + y) * self.grid[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.voxels[self.index(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: bool) {
        let i = self.index(z, y, x);
        self.voxels[i] = v;
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.voxels.iter().any(|&v| v)
    }

    /// Coordinates of the set voxels in row-major order.
    pub fn coords(&self) -> Vec<[usize; 3]> {
        let [_, h, w] = self.grid;
        self.voxels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(i, _)| [i / (h * w), (i / w) % h, i % w])
            .collect()
    }

    /// Axial slice `z` as a `(1, H, W)` mask.
    pub fn axial_slice(&self, z: usize) -> Mask {
        let n = self.grid[1] * self.grid[2];
        Mask {
            grid: [1, self.grid[1], self.grid[2]],
            voxels: self.voxels[z * n..(z + 1) * n].to_vec(),
        }
    }
}

/// One lesion with exactly four annotation slots.
#[derive(Clone, Debug, PartialEq)]
pub struct LesionCase {
    pub case_id: String,
    pub volume: Volume3D,
    pub annotations: Vec<Mask>,
    pub n_real_annotations: u8,
}

pub const ANNOTATIONS_PER_CASE: usize = 4;

impl LesionCase {
    pub fn new(
        case_id: impl Into<String>,
        volume: Volume3D,
        annotations: Vec<Mask>,
        n_real_annotations: u8,
    ) -> Result<Self> {
        let case_id = case_id.into();
        if annotations.len() != ANNOTATIONS_PER_CASE {
            return Err(Error::shape(format!(
                "case {} has {} annotations, expected {}",
                case_id,
                annotations.len(),
                ANNOTATIONS_PER_CASE
            )));
        }
        if let Some(m) = annotations.iter().find(|m| m.grid != volume.grid) {
            return Err(Error::shape(format!(
                "case {}: annotation grid {:?} differs from volume grid {:?}",
                case_id, m.grid, volume.grid
            )));
        }
        let n = n_real_annotations as usize;
        if !(1..=ANNOTATIONS_PER_CASE).contains(&n) {
            return Err(Error::usage(format!(
                "case {}: n_real_annotations must be in 1..=4, got {}",
                case_id, n
            )));
        }
        if annotations[n..].iter().any(|m| !m.is_empty()) {
            return Err(Error::usage(format!(
                "case {}: padded annotation slots must be empty",
                case_id
            )));
        }
        if annotations.iter().all(Mask::is_empty) {
            return Err(Error::usage(format!(
                "case {}: needs at least one nonempty annotation",
                case_id
            )));
        }
        Ok(LesionCase {
            case_id,
            volume,
            annotations,
            n_real_annotations,
        })
    }
}
