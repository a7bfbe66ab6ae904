use crate::error::{Error, Result};
use crate::scalar::Real;

use super::Grid;

/// Axis-aligned block of voxels `[start, start + extent)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Patch {
    pub start: [usize; 3],
    pub extent: [usize; 3],
}

impl Patch {
    pub fn len(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, ijk: [usize; 3]) -> bool {
        (0..3).all(|a| ijk[a] >= self.start[a] && ijk[a] < self.start[a] + self.extent[a])
    }

    /// Flat grid indices of the patch voxels, x-fastest.
    pub fn voxel_indices<T: Real>(&self, grid: &Grid<T>) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        for k in self.start[2]..self.start[2] + self.extent[2] {
            for j in self.start[1]..self.start[1] + self.extent[1] {
                for i in self.start[0]..self.start[0] + self.extent[0] {
                    out.push(grid.index(i, j, k));
                }
            }
        }
        out
    }
}

/// Disjoint tiling of the voxel grid into patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPartition {
    pub patch_edge: usize,
    pub dims: [usize; 3],
    pub patches: Vec<Patch>,
}

impl PatchPartition {
    pub fn count(&self) -> usize {
        self.patches.len()
    }

    /// Patch index for each voxel.
    pub fn owner_map(&self) -> Vec<usize> {
        let [nx, ny, _] = self.dims;
        let mut owner = vec![usize::MAX; self.dims.iter().product()];
        for (p, patch) in self.patches.iter().enumerate() {
            for k in patch.start[2]..patch.start[2] + patch.extent[2] {
                for j in patch.start[1]..patch.start[1] + patch.extent[1] {
                    for i in patch.start[0]..patch.start[0] + patch.extent[0] {
                        owner[i + nx * (j + ny * k)] = p;
                    }
                }
            }
        }
        owner
    }
}

/// Tiles `dims` with cubes of edge `patch_edge`, truncated at the far faces.
/// Patches are ordered z-major, then y, then x.
pub fn make_partition(dims: [usize; 3], patch_edge: usize) -> Result<PatchPartition> {
    if patch_edge == 0 {
        return Err(Error::InvalidInput("patch edge must be at least 1".into()));
    }
    let mut patches = Vec::new();
    for z in (0..dims[2]).step_by(patch_edge) {
        for y in (0..dims[1]).step_by(patch_edge) {
            for x in (0..dims[0]).step_by(patch_edge) {
                let start = [x, y, z];
                let extent = [0, 1, 2].map(|a| patch_edge.min(dims[a] - start[a]));
                patches.push(Patch { start, extent });
            }
        }
    }
    Ok(PatchPartition { patch_edge, dims, patches })
}
