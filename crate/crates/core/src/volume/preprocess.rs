use super::{
    DiscIndices, Dims, LabelVolume, Modality, RescaleScope, Result, Rounding, ScalarVolume, VolumeError,
    VoxelSpacing,
};

pub const CT_WINDOW_HU: (f64, f64) = (-30.0, 150.0);
pub const MRI_PERCENTILES: (f64, f64) = (0.5, 99.5);

/// Percentile `p` (0..=100) of ascending `sorted` values, interpolating
/// linearly between closest ranks.
pub fn percentile_linear(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    // multiply before dividing so integral ranks stay exact
    let h = p * (sorted.len() - 1) as f64 / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Modality-specific intensity clip: per-volume 0.5th/99.5th percentiles for
/// MRI, the fixed [-30, 150] HU window for CT.
pub fn clip_intensity(vol: &ScalarVolume) -> Result<ScalarVolume> {
    if vol.data().is_empty() {
        return Err(VolumeError::EmptyVolume);
    }
    let (lo, hi) = match vol.modality() {
        Modality::Ct => CT_WINDOW_HU,
        _ => {
            let mut sorted = vol.data().to_vec();
            sorted.sort_by(f64::total_cmp);
            (
                percentile_linear(&sorted, MRI_PERCENTILES.0),
                percentile_linear(&sorted, MRI_PERCENTILES.1),
            )
        }
    };
    let data = vol.data().iter().map(|&v| v.clamp(lo, hi)).collect();
    ScalarVolume::new(vol.dims(), vol.spacing(), vol.modality(), data)
}

/// Volumes that can be decimated along the head-foot axis.
pub trait AxialDecimate: Sized {
    fn decimate(&self, factor: usize) -> Result<Self>;
}

fn decimate_data<T: Copy>(data: &[T], dims: Dims, factor: usize) -> Result<(Vec<T>, Dims)> {
    if factor == 0 {
        return Err(VolumeError::InvariantViolation("downsample factor must be >= 1".into()));
    }
    // factor == nz still keeps slice 0
    if factor > dims.nz {
        return Err(VolumeError::FactorExceedsDepth { factor, nz: dims.nz });
    }
    let n = dims.slice_len();
    let kept: Vec<usize> = (0..dims.nz).step_by(factor).collect();
    let mut out = Vec::with_capacity(kept.len() * n);
    for &z in &kept {
        out.extend_from_slice(&data[z * n..(z + 1) * n]);
    }
    Ok((out, dims.with_nz(kept.len())))
}

fn scaled_dz(spacing: VoxelSpacing, factor: usize) -> Result<VoxelSpacing> {
    VoxelSpacing::new(spacing.dx, spacing.dy, spacing.dz * factor as f64)
}

impl AxialDecimate for ScalarVolume {
    fn decimate(&self, factor: usize) -> Result<Self> {
        let (data, dims) = decimate_data(self.data(), self.dims(), factor)?;
        ScalarVolume::new(dims, scaled_dz(self.spacing(), factor)?, self.modality(), data)
    }
}

impl AxialDecimate for LabelVolume {
    fn decimate(&self, factor: usize) -> Result<Self> {
        let (data, dims) = decimate_data(self.data(), self.dims(), factor)?;
        LabelVolume::new(dims, scaled_dz(self.spacing(), factor)?, data)
    }
}

/// Keep slices 0, f, 2f, ... and multiply `dz` by `f`.
pub fn downsample_axial<V: AxialDecimate>(vol: &V, factor: usize) -> Result<V> {
    vol.decimate(factor)
}

/// Map disc indices onto the nearest retained slice after decimation by
/// `factor` (ties go to the superior slice). Neighbouring levels may
/// collapse onto the same slice when the factor is large.
pub fn remap_disc_indices(disc: DiscIndices, factor: usize, new_nz: usize) -> Result<DiscIndices> {
    if factor == 0 || new_nz == 0 {
        return Err(VolumeError::InvariantViolation("invalid decimation".into()));
    }
    let map = |i: usize| {
        let (q, r) = (i / factor, i % factor);
        let j = if 2 * r > factor { q + 1 } else { q };
        j.min(new_nz - 1)
    };
    Ok(DiscIndices { l3l4: map(disc.l3l4), l4l5: map(disc.l4l5), l5s1: map(disc.l5s1) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StandardizeOptions {
    pub target_size: usize,
    pub scope: RescaleScope,
    pub rounding: Rounding,
}

impl Default for StandardizeOptions {
    fn default() -> Self {
        Self { target_size: 256, scope: RescaleScope::PerVolume, rounding: Rounding::Integer }
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn rescale_to_byte_range(values: &mut [f64], lo: f64, hi: f64) {
    if hi > lo {
        let scale = 255.0 / (hi - lo);
        values.iter_mut().for_each(|v| *v = (*v - lo) * scale);
    } else {
        // degenerate range: everything maps to 0
        values.iter_mut().for_each(|v| *v = 0.0);
    }
}

fn bilinear_resize(src: &[f64], nx: usize, ny: usize, tx: usize, ty: usize) -> Vec<f64> {
    if nx == tx && ny == ty {
        return src.to_vec();
    }
    let coord = |o: usize, n: usize, t: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n as f64 / t as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..tx).map(|o| coord(o, nx, tx)).collect();
    let mut out = Vec::with_capacity(tx * ty);
    for oy in 0..ty {
        let (y0, y1, fy) = coord(oy, ny, ty);
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * nx + x0] * (1.0 - fx) + src[y0 * nx + x1] * fx;
            let bottom = src[y1 * nx + x0] * (1.0 - fx) + src[y1 * nx + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Nearest-neighbour resize of one label slice from `nx x ny` to `tx x ty`.
pub fn resize_labels_nearest(src: &[u8], nx: usize, ny: usize, tx: usize, ty: usize) -> Vec<u8> {
    if nx == tx && ny == ty {
        return src.to_vec();
    }
    let pick = |o: usize, n: usize, t: usize| (((o as f64 + 0.5) * n as f64 / t as f64).floor() as usize).min(n - 1);
    let xs: Vec<usize> = (0..tx).map(|o| pick(o, nx, tx)).collect();
    let mut out = Vec::with_capacity(tx * ty);
    for oy in 0..ty {
        let sy = pick(oy, ny, ty);
        out.extend(xs.iter().map(|&sx| src[sy * nx + sx]));
    }
    out
}

fn resized_spacing(spacing: VoxelSpacing, dims: Dims, target: usize) -> Result<VoxelSpacing> {
    VoxelSpacing::new(
        spacing.dx * dims.nx as f64 / target as f64,
        spacing.dy * dims.ny as f64 / target as f64,
        spacing.dz,
    )
}

/// Min-max rescale onto [0, 255] followed by a bilinear in-plane resize to
/// `target_size` squared. In-plane spacing is rescaled so the physical extent
/// is unchanged. A constant input maps to all zeros.
pub fn standardize_slices(vol: &ScalarVolume, opts: StandardizeOptions) -> Result<ScalarVolume> {
    if vol.data().is_empty() {
        return Err(VolumeError::EmptyVolume);
    }
    let dims = vol.dims();
    let t = opts.target_size;
    let mut rescaled = vol.data().to_vec();
    match opts.scope {
        RescaleScope::PerVolume => {
            let (lo, hi) = min_max(&rescaled);
            rescale_to_byte_range(&mut rescaled, lo, hi);
        }
        RescaleScope::PerSlice => {
            for chunk in rescaled.chunks_mut(dims.slice_len()) {
                let (lo, hi) = min_max(chunk);
                rescale_to_byte_range(chunk, lo, hi);
            }
        }
    }
    let mut data = Vec::with_capacity(t * t * dims.nz);
    for slice in rescaled.chunks(dims.slice_len()) {
        data.extend(bilinear_resize(slice, dims.nx, dims.ny, t, t));
    }
    if opts.rounding == Rounding::Integer {
        // round half up
        data.iter_mut().for_each(|v| *v = (*v + 0.5).floor().clamp(0.0, 255.0));
    } else {
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 255.0));
    }
    let out_dims = Dims::new(t, t, dims.nz)?;
    ScalarVolume::new(out_dims, resized_spacing(vol.spacing(), dims, t)?, vol.modality(), data)
}

/// Companion resize of a label volume onto the standardized grid.
pub fn standardize_labels(vol: &LabelVolume, target_size: usize) -> Result<LabelVolume> {
    let dims = vol.dims();
    let mut data = Vec::with_capacity(target_size * target_size * dims.nz);
    for z in 0..dims.nz {
        data.extend(resize_labels_nearest(vol.slice(z), dims.nx, dims.ny, target_size, target_size));
    }
    LabelVolume::new(
        Dims::new(target_size, target_size, dims.nz)?,
        resized_spacing(vol.spacing(), dims, target_size)?,
        data,
    )
}
