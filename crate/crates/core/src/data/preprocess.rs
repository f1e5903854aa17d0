use std::collections::VecDeque;

use super::{grid_len, Grid, Mask, Spacing, Volume3D, ANNOTATIONS_PER_CASE};
use crate::error::{Error, Result};

/// Target voxel size: 1 mm axially, 0.5 mm in-plane.
pub const TARGET_SPACING: Spacing = Spacing::new(1.0, 0.5, 0.5);

/// Group annotations into nodules. Two annotations link when the smallest
/// physical distance between any of their voxels is at most the coarsest
/// voxel spacing; groups are the connected components of that relation.
/// Each group lists annotation indices in ascending order, and groups are
/// ordered by their first member.
pub fn cluster_annotations(annotations: &[Mask], spacing: Spacing) -> Result<Vec<Vec<usize>>> {
    if let Some(first) = annotations.first() {
        if let Some(m) = annotations.iter().find(|m| m.grid != first.grid) {
            return Err(Error::shape(format!(
                "annotation grids differ: {:?} vs {:?}",
                first.grid, m.grid
            )));
        }
    }
    let n = annotations.len();
    let threshold = spacing.max();
    let mut adjacent = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if within_distance(&annotations[i], &annotations[j], spacing, threshold) {
                adjacent[i].push(j);
                adjacent[j].push(i);
            }
        }
    }
    let mut seen = vec![false; n];
    let mut groups = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut group = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(a) = queue.pop_front() {
            for &b in &adjacent[a] {
                if !seen[b] {
                    seen[b] = true;
                    group.push(b);
                    queue.push_back(b);
                }
            }
        }
        group.sort_unstable();
        groups.push(group);
    }
    Ok(groups)
}

/// Whether some voxel of `a` lies within `threshold` mm of some voxel of `b`,
/// scanning only the neighbourhood box the threshold can reach.
fn within_distance(a: &Mask, b: &Mask, spacing: Spacing, threshold: f64) -> bool {
    let sp = spacing.per_axis();
    let reach: [isize; 3] = std::array::from_fn(|k| (threshold / sp[k]).floor() as isize);
    let grid = a.grid;
    let t2 = threshold * threshold + 1e-9;
    for [z, y, x] in a.coords() {
        for dz in -reach[0]..=reach[0] {
            let bz = z as isize + dz;
            if bz < 0 || bz >= grid[0] as isize {
                continue;
            }
            for dy in -reach[1]..=reach[1] {
                let by = y as isize + dy;
                if by < 0 || by >= grid[1] as isize {
                    continue;
                }
                for dx in -reach[2]..=reach[2] {
                    let bx = x as isize + dx;
                    if bx < 0 || bx >= grid[2] as isize {
                        continue;
                    }
                    let d2 = (dz as f64 * sp[0]).powi(2)
                        + (dy as f64 * sp[1]).powi(2)
                        + (dx as f64 * sp[2]).powi(2);
                    if d2 <= t2 && b.get(bz as usize, by as usize, bx as usize) {
                        return true;
                    }
                }
            }
        }
    }
    false
}

fn resampled_grid(grid: Grid, from: Spacing, to: Spacing) -> Result<Grid> {
    let (fs, ts) = (from.per_axis(), to.per_axis());
    if fs.iter().chain(&ts).any(|&s| !(s > 0.0)) {
        return Err(Error::usage(format!(
            "resample needs positive spacings, got {:?} -> {:?}",
            from, to
        )));
    }
    Ok(std::array::from_fn(|k| {
        ((grid[k] as f64 * fs[k] / ts[k]).round() as usize).max(1)
    }))
}

/// Source coordinate for output index `i`, clamped to the input extent.
fn source_coord(i: usize, from: f64, to: f64, extent: usize) -> f64 {
    (i as f64 * to / from).clamp(0.0, (extent - 1) as f64)
}

/// Trilinear resampling onto `target` spacing. Voxel centres are aligned at
/// index 0 and sample positions outside the input are clamped to its border.
pub fn resample(v: &Volume3D, target: Spacing) -> Result<Volume3D> {
    let out_grid = resampled_grid(v.grid, v.spacing, target)?;
    let (fs, ts) = (v.spacing.per_axis(), target.per_axis());
    let axis_taps = |k: usize| -> Vec<(usize, usize, f64)> {
        (0..out_grid[k])
            .map(|i| {
                let c = source_coord(i, fs[k], ts[k], v.grid[k]);
                let lo = c.floor() as usize;
                let hi = (lo + 1).min(v.grid[k] - 1);
                (lo, hi, c - lo as f64)
            })
            .collect()
    };
    let (tz, ty, tx) = (axis_taps(0), axis_taps(1), axis_taps(2));
    let at = |z: usize, y: usize, x: usize| v.intensities[v.index(z, y, x)] as f64;
    let mut out = Vec::with_capacity(grid_len(out_grid));
    for &(z0, z1, fz) in &tz {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                let c0 = lerp(c00, c01, fy);
                let c1 = lerp(c10, c11, fy);
                out.push(lerp(c0, c1, fz) as f32);
            }
        }
    }
    Volume3D::new(out_grid, target, out)
}

/// Nearest-neighbour resampling of a mask sampled with spacing `from`.
pub fn resample_mask(m: &Mask, from: Spacing, target: Spacing) -> Result<Mask> {
    let out_grid = resampled_grid(m.grid, from, target)?;
    let (fs, ts) = (from.per_axis(), target.per_axis());
    let nearest = |k: usize| -> Vec<usize> {
        (0..out_grid[k])
            .map(|i| (source_coord(i, fs[k], ts[k], m.grid[k]) + 0.5).floor() as usize)
            .map(|i| i.min(m.grid[k] - 1))
            .collect()
    };
    let (nz, ny, nx) = (nearest(0), nearest(1), nearest(2));
    Ok(Mask::from_fn(out_grid, |z, y, x| m.get(nz[z], ny[y], nx[x])))
}

/// Integer centre of mass, each axis rounded half toward the lower index.
pub fn center_of_mass(m: &Mask) -> Result<[usize; 3]> {
    let coords = m.coords();
    if coords.is_empty() {
        return Err(Error::usage(
            "center of mass of an empty mask: the case has no annotated lesion",
        ));
    }
    let n = coords.len() as f64;
    Ok(std::array::from_fn(|k| {
        let mean = coords.iter().map(|c| c[k] as f64).sum::<f64>() / n;
        (mean - 0.5).ceil().max(0.0) as usize
    }))
}

/// Crop a `size` window centred on the first mask's centre of mass. Voxels
/// outside the source take the volume minimum (intensities) or 0 (masks).
pub fn crop_center(v: &Volume3D, masks: &[Mask], size: Grid) -> Result<(Volume3D, Vec<Mask>)> {
    let first = masks
        .first()
        .ok_or_else(|| Error::usage("crop_center needs at least one mask"))?;
    if let Some(m) = masks.iter().find(|m| m.grid != v.grid) {
        return Err(Error::shape(format!(
            "mask grid {:?} differs from volume grid {:?}",
            m.grid, v.grid
        )));
    }
    if size.iter().any(|&e| e == 0) {
        return Err(Error::usage(format!("crop size must be positive, got {:?}", size)));
    }
    let center = center_of_mass(first)?;
    let start: [isize; 3] = std::array::from_fn(|k| center[k] as isize - (size[k] / 2) as isize);
    let src = |k: usize, i: usize| -> Option<usize> {
        let s = start[k] + i as isize;
        (s >= 0 && (s as usize) < v.grid[k]).then_some(s as usize)
    };
    let pad = v.min_intensity();
    let mut out = Vec::with_capacity(grid_len(size));
    for z in 0..size[0] {
        for y in 0..size[1] {
            for x in 0..size[2] {
                out.push(match (src(0, z), src(1, y), src(2, x)) {
                    (Some(a), Some(b), Some(c)) => v.intensities[v.index(a, b, c)],
                    _ => pad,
                });
            }
        }
    }
    let volume = Volume3D::new(size, v.spacing, out)?;
    let cropped = masks
        .iter()
        .map(|m| {
            Mask::from_fn(size, |z, y, x| match (src(0, z), src(1, y), src(2, x)) {
                (Some(a), Some(b), Some(c)) => m.get(a, b, c),
                _ => false,
            })
        })
        .collect();
    Ok((volume, cropped))
}

/// Append empty masks up to four slots. Returns the padded set and the
/// number of real annotations.
pub fn pad_annotations_to4(mut masks: Vec<Mask>) -> Result<(Vec<Mask>, u8)> {
    let n = masks.len();
    if !(1..=ANNOTATIONS_PER_CASE).contains(&n) {
        return Err(Error::usage(format!(
            "expected 1 to 4 annotations, got {}",
            n
        )));
    }
    let grid = masks[0].grid;
    masks.resize(ANNOTATIONS_PER_CASE, Mask::empty(grid));
    Ok((masks, n as u8))
}
