//! Overlapping patch grids: planning, extraction, and fusion of per-patch
//! probabilities back into a whole-volume map.

use std::collections::BTreeMap;

use hdan_tensor::Tensor;

use crate::error::{Error, Result};
use crate::network::ProbabilityMap;
use crate::volume_io::{LabelMap, MultiModalVolume, Spacing};

pub type Origin = [usize; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PatchSpec {
    pub patch_size: [usize; 3],
    pub stride: [usize; 3],
}

impl PatchSpec {
    pub fn new(patch_size: [usize; 3], stride: [usize; 3]) -> Result<Self> {
        let spec = Self { patch_size, stride };
        spec.validate()?;
        Ok(spec)
    }

    /// Cubic patches with a uniform stride.
    pub fn cubic(patch: usize, stride: usize) -> Result<Self> {
        Self::new([patch; 3], [stride; 3])
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            let (p, s) = (self.patch_size[axis], self.stride[axis]);
            if p == 0 || s == 0 || s > p {
                return Err(Error::InvalidPatchSpec(format!(
                    "axis {axis}: need 1 <= stride ({s}) <= patch ({p})"
                )));
            }
        }
        Ok(())
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch_size.iter().product()
    }
}

impl Default for PatchSpec {
    /// 64^3 patches with 50% overlap.
    fn default() -> Self {
        Self {
            patch_size: [64; 3],
            stride: [32; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    /// Lexicographically ordered corners.
    pub origins: Vec<Origin>,
    pub volume_dims: [usize; 3],
    pub spec: PatchSpec,
}

fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = dim - patch;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().expect("origin 0 always present") != last {
        out.push(last);
    }
    out
}

/// Origins at `0, s, 2s, ...` per axis with a final origin clamped to
/// `dim - patch`; the Cartesian product covers every voxel.
pub fn plan_patches(dims: [usize; 3], spec: PatchSpec) -> Result<PatchGrid> {
    spec.validate()?;
    if (0..3).any(|i| dims[i] < spec.patch_size[i]) {
        return Err(Error::PatchLargerThanVolume {
            patch: spec.patch_size,
            dims,
        });
    }
    let per_axis: Vec<Vec<usize>> = (0..3)
        .map(|i| axis_origins(dims[i], spec.patch_size[i], spec.stride[i]))
        .collect();
    let mut origins = Vec::with_capacity(per_axis.iter().map(Vec::len).product());
    for &z in &per_axis[0] {
        for &y in &per_axis[1] {
            for &x in &per_axis[2] {
                origins.push([z, y, x]);
            }
        }
    }
    Ok(PatchGrid {
        origins,
        volume_dims: dims,
        spec,
    })
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Number of patches covering each voxel.
    pub fn coverage(&self) -> Vec<u32> {
        let [d, h, w] = self.volume_dims;
        let [pd, ph, pw] = self.spec.patch_size;
        let mut count = vec![0u32; d * h * w];
        for o in &self.origins {
            for z in o[0]..o[0] + pd {
                for y in o[1]..o[1] + ph {
                    let row = (z * h + y) * w;
                    count[row + o[2]..row + o[2] + pw]
                        .iter_mut()
                        .for_each(|c| *c += 1);
                }
            }
        }
        count
    }
}

fn check_origin(origin: Origin, patch: [usize; 3], dims: [usize; 3]) -> Result<()> {
    if (0..3).any(|i| origin[i] + patch[i] > dims[i]) {
        return Err(Error::OriginOutOfBounds {
            origin,
            patch,
            dims,
        });
    }
    Ok(())
}

/// Copy a `patch`-sized block out of a `[channels, dims]` buffer.
pub(crate) fn copy_block<T: Copy>(
    data: &[T],
    channels: usize,
    dims: [usize; 3],
    origin: Origin,
    patch: [usize; 3],
) -> Vec<T> {
    let [_, h, w] = dims;
    let per = dims.iter().product::<usize>();
    let mut out = Vec::with_capacity(channels * patch.iter().product::<usize>());
    for c in 0..channels {
        let plane = &data[c * per..(c + 1) * per];
        for z in origin[0]..origin[0] + patch[0] {
            for y in origin[1]..origin[1] + patch[1] {
                let row = (z * h + y) * w + origin[2];
                out.extend_from_slice(&plane[row..row + patch[2]]);
            }
        }
    }
    out
}

/// `[M, patch]` intensities at `origin`.
pub fn extract_volume(vol: &MultiModalVolume, origin: Origin, patch: [usize; 3]) -> Result<Tensor> {
    let dims = vol.dims();
    check_origin(origin, patch, dims)?;
    let m = vol.modalities();
    let data = copy_block(vol.data.data(), m, dims, origin, patch);
    Ok(Tensor::from_vec(&[m, patch[0], patch[1], patch[2]], data)?)
}

/// Labels of the block at `origin`.
pub fn extract_labels(lm: &LabelMap, origin: Origin, patch: [usize; 3]) -> Result<LabelMap> {
    check_origin(origin, patch, lm.dims)?;
    let labels = copy_block(&lm.labels, 1, lm.dims, origin, patch);
    LabelMap::new(labels, patch, lm.class_names.clone(), lm.spacing)
}

/// Streaming form of [`fuse`]. Patches may be added in any order; each is
/// folded into the running mean once every lexicographically earlier patch
/// has been folded, so the result never depends on arrival order.
#[derive(Debug)]
pub struct Fuser<'g> {
    grid: &'g PatchGrid,
    channels: usize,
    spacing: Spacing,
    /// Grid indices sorted by origin.
    order: Vec<usize>,
    /// Position of each grid index in `order`.
    rank: Vec<usize>,
    next: usize,
    pending: BTreeMap<usize, Tensor>,
    mean: Vec<f64>,
    count: Vec<u32>,
}

impl<'g> Fuser<'g> {
    pub fn new(grid: &'g PatchGrid, channels: usize, spacing: Spacing) -> Self {
        let mut order: Vec<usize> = (0..grid.len()).collect();
        order.sort_by_key(|&i| grid.origins[i]);
        let mut rank = vec![0; grid.len()];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        let per: usize = grid.volume_dims.iter().product();
        Self {
            grid,
            channels,
            spacing,
            order,
            rank,
            next: 0,
            pending: BTreeMap::new(),
            mean: vec![0.0; channels * per],
            count: vec![0; per],
        }
    }

    /// Add the `[channels, patch]` map for grid entry `index`.
    pub fn add(&mut self, index: usize, patch: Tensor) -> Result<()> {
        let [pd, ph, pw] = self.grid.spec.patch_size;
        let expected = [self.channels, pd, ph, pw];
        if patch.shape() != expected {
            return Err(Error::GridMismatch(format!(
                "patch shape {:?}, expected {:?}",
                patch.shape(),
                expected
            )));
        }
        let r = *self.rank.get(index).ok_or_else(|| {
            Error::GridMismatch(format!(
                "patch index {index} outside a grid of {}",
                self.grid.len()
            ))
        })?;
        if r < self.next || self.pending.insert(r, patch).is_some() {
            return Err(Error::GridMismatch(format!("patch {index} added twice")));
        }
        while let Some(t) = self.pending.remove(&self.next) {
            self.accumulate(self.order[self.next], &t);
            self.next += 1;
        }
        Ok(())
    }

    fn accumulate(&mut self, index: usize, patch: &Tensor) {
        let [_, h, w] = self.grid.volume_dims;
        let [pd, ph, pw] = self.grid.spec.patch_size;
        let per = self.count.len();
        let patch_len = pd * ph * pw;
        let o = self.grid.origins[index];
        let src = patch.data();
        for z in 0..pd {
            for y in 0..ph {
                let row = ((o[0] + z) * h + o[1] + y) * w + o[2];
                let local = (z * ph + y) * pw;
                for x in 0..pw {
                    let v = row + x;
                    self.count[v] += 1;
                    let k = self.count[v] as f64;
                    for c in 0..self.channels {
                        let m = &mut self.mean[c * per + v];
                        *m += (src[c * patch_len + local + x] - *m) / k;
                    }
                }
            }
        }
    }

    /// The fused `[channels, D, H, W]` map.
    pub fn finish_tensor(self) -> Result<Tensor> {
        if self.next != self.grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} of {} patches added",
                self.next + self.pending.len(),
                self.grid.len()
            )));
        }
        if self.count.contains(&0) {
            return Err(Error::GridMismatch("grid leaves voxels uncovered".into()));
        }
        let [d, h, w] = self.grid.volume_dims;
        Ok(Tensor::from_vec(&[self.channels, d, h, w], self.mean)?)
    }

    pub fn finish(self) -> Result<ProbabilityMap> {
        let spacing = self.spacing;
        ProbabilityMap::new(self.finish_tensor()?, spacing)
    }
}

/// Per-voxel running mean of all covering patches' distributions.
///
/// Patches are accumulated in lexicographic origin order whatever order
/// `patch_probs` was produced in, so the result is order independent. The
/// running-mean update leaves a constant input exactly unchanged.
pub fn fuse(grid: &PatchGrid, patch_probs: &[Tensor], spacing: Spacing) -> Result<ProbabilityMap> {
    if patch_probs.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "{} probability patches for {} origins",
            patch_probs.len(),
            grid.len()
        )));
    }
    let classes = patch_probs
        .first()
        .map(|t| t.shape().first().copied().unwrap_or(0))
        .unwrap_or(0);
    let mut fuser = Fuser::new(grid, classes, spacing);
    for (i, t) in patch_probs.iter().enumerate() {
        fuser.add(i, t.clone())?;
    }
    fuser.finish()
}
