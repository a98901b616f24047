//! Non-overlapping 3D patch tokenization and exact-count random masking.
//!
//! Patches are ordered lexicographically over (h-block, w-block, d-block) and
//! voxels within a patch keep the H-major, W, D order of the source grid.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::views::View;
use crate::volume::{numel, Shape3};

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    /// Row-major `[P, patch_voxels]`.
    pub patches: Vec<f32>,
    pub grid_dims: Shape3,
    pub patch_size: Shape3,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        numel(self.grid_dims)
    }

    pub fn patch_voxels(&self) -> usize {
        numel(self.patch_size)
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let pv = self.patch_voxels();
        &self.patches[i * pv..(i + 1) * pv]
    }

    pub fn view_size(&self) -> Shape3 {
        [0, 1, 2].map(|i| self.grid_dims[i] * self.patch_size[i])
    }
}

pub fn grid_dims_for(size: Shape3, patch_size: Shape3) -> Result<Shape3> {
    let mut dims = [0; 3];
    for axis in 0..3 {
        if patch_size[axis] == 0 || size[axis] % patch_size[axis] != 0 || size[axis] == 0 {
            return Err(Error::Tokenization { axis, size: size[axis], patch: patch_size[axis] });
        }
        dims[axis] = size[axis] / patch_size[axis];
    }
    Ok(dims)
}

/// Calls `f(patch_index, offset_in_patch, voxel_index)` for every voxel.
fn for_each_mapping(grid: Shape3, patch: Shape3, mut f: impl FnMut(usize, usize, usize)) {
    let size = [0, 1, 2].map(|i| grid[i] * patch[i]);
    let pv = numel(patch);
    for gh in 0..grid[0] {
        for gw in 0..grid[1] {
            for gd in 0..grid[2] {
                let p = (gh * grid[1] + gw) * grid[2] + gd;
                for ph in 0..patch[0] {
                    for pw in 0..patch[1] {
                        let h = gh * patch[0] + ph;
                        let w = gw * patch[1] + pw;
                        let row = (h * size[1] + w) * size[2] + gd * patch[2];
                        let off = (ph * patch[1] + pw) * patch[2];
                        for pd in 0..patch[2] {
                            f(p, off + pd, row + pd);
                        }
                    }
                }
                debug_assert!(pv > 0);
            }
        }
    }
}

pub fn patchify_grid(data: &[f32], size: Shape3, patch_size: Shape3) -> Result<PatchGrid> {
    let grid_dims = grid_dims_for(size, patch_size)?;
    if data.len() != numel(size) {
        return Err(Error::ShapeMismatch(format!("{} voxels for view size {size:?}", data.len())));
    }
    let pv = numel(patch_size);
    let mut patches = vec![0.0; data.len()];
    for_each_mapping(grid_dims, patch_size, |p, off, v| patches[p * pv + off] = data[v]);
    Ok(PatchGrid { patches, grid_dims, patch_size })
}

pub fn patchify(view: &View, patch_size: Shape3) -> Result<PatchGrid> {
    patchify_grid(&view.data, view.size, patch_size)
}

pub fn unpatchify(patches: &[f32], grid_dims: Shape3, patch_size: Shape3) -> Result<Vec<f32>> {
    let pv = numel(patch_size);
    let expected = numel(grid_dims) * pv;
    if patches.len() != expected || pv == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} patch values for grid {grid_dims:?} of {patch_size:?} patches",
            patches.len()
        )));
    }
    let mut out = vec![0.0; expected];
    for_each_mapping(grid_dims, patch_size, |p, off, v| out[v] = patches[p * pv + off]);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedView {
    pub grid: PatchGrid,
    /// `true` marks a masked (hidden) patch.
    pub mask: Vec<bool>,
    pub visible_index: Vec<usize>,
}

impl MaskedView {
    /// All patches visible.
    pub fn unmasked(grid: PatchGrid) -> Self {
        let p = grid.num_patches();
        Self { grid, mask: vec![false; p], visible_index: (0..p).collect() }
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Visible patch values, row-major `[V, patch_voxels]`.
    pub fn visible_patches(&self) -> Vec<f32> {
        self.visible_index.iter().flat_map(|&i| self.grid.patch(i).iter().copied()).collect()
    }
}

/// Number of patches hidden for `ratio` over `num_patches`:
/// `floor(ratio * P + 0.5)`, capped so one patch stays visible.
pub fn masked_count(ratio: f64, num_patches: usize) -> usize {
    ((ratio * num_patches as f64 + 0.5).floor() as usize).min(num_patches.saturating_sub(1))
}

/// Uniformly random mask with an exact masked count.
pub fn sample_mask<R: Rng>(num_patches: usize, ratio: f64, rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidMaskRatio(ratio));
    }
    if num_patches == 0 {
        return Err(Error::Empty("patch grid"));
    }
    let mut order: Vec<usize> = (0..num_patches).collect();
    order.shuffle(rng);
    let mut mask = vec![false; num_patches];
    for &i in &order[..masked_count(ratio, num_patches)] {
        mask[i] = true;
    }
    Ok(mask)
}

pub fn visible_index(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| !m).map(|(i, _)| i).collect()
}

pub fn mask_patches<R: Rng>(grid: PatchGrid, ratio: f64, rng: &mut R) -> Result<MaskedView> {
    let mask = sample_mask(grid.num_patches(), ratio, rng)?;
    let visible_index = visible_index(&mask);
    Ok(MaskedView { grid, mask, visible_index })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn seq(n: usize) -> Vec<f32> {
        (0..n).map(|i| i as f32).collect()
    }

    #[test]
    fn token_counts() {
        let g = patchify_grid(&vec![0.0; 96 * 96 * 96], [96; 3], [16; 3]).unwrap();
        assert_eq!((g.num_patches(), g.patch_voxels()), (216, 4096));
        assert_eq!(grid_dims_for([160; 3], [16; 3]).unwrap(), [10; 3]);
    }

    #[test]
    fn patch_layout_is_block_lexicographic() {
        // 4x2x2 view, 2x2x2 patches -> two patches stacked along h
        let g = patchify_grid(&seq(16), [4, 2, 2], [2, 2, 2]).unwrap();
        assert_eq!(g.grid_dims, [2, 1, 1]);
        assert_eq!(g.patch(0), &[0., 1., 2., 3., 4., 5., 6., 7.]);
        assert_eq!(g.patch(1), &[8., 9., 10., 11., 12., 13., 14., 15.]);
        // 2x2x4 view -> patches split along d
        let g = patchify_grid(&seq(16), [2, 2, 4], [2, 2, 2]).unwrap();
        assert_eq!(g.patch(0), &[0., 1., 4., 5., 8., 9., 12., 13.]);
    }

    #[test]
    fn non_divisible_size_names_axis() {
        match patchify_grid(&vec![0.0; 16 * 16 * 12], [16, 16, 12], [8, 8, 8]) {
            Err(Error::Tokenization { axis, .. }) => assert_eq!(axis, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unpatchify_edge_cases() {
        assert_eq!(unpatchify(&vec![0.0; 64], [2, 2, 2], [2, 2, 2]).unwrap(), vec![0.0; 64]);
        let single = seq(27);
        assert_eq!(unpatchify(&single, [1, 1, 1], [3, 3, 3]).unwrap(), single);
        assert!(unpatchify(&seq(10), [1, 1, 1], [3, 3, 3]).is_err());
    }

    #[test]
    fn mask_counts_follow_rounding_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(masked_count(0.6, 216), 130);
        assert_eq!(masked_count(0.75, 8), 6);
        let g = patchify_grid(&vec![0.0; 64], [4, 4, 4], [1, 1, 1]).unwrap();
        let mv = mask_patches(g.clone(), 0.0, &mut rng).unwrap();
        assert_eq!(mv.masked_count(), 0);
        assert_eq!(mv.visible_index, (0..64).collect::<Vec<_>>());
        assert!(matches!(mask_patches(g.clone(), 1.0, &mut rng), Err(Error::InvalidMaskRatio(_))));
        assert!(mask_patches(g, -0.1, &mut rng).is_err());
        // 0.99 of 8 rounds to 8 but one patch must stay visible
        assert_eq!(masked_count(0.99, 8), 7);
    }

    #[test]
    fn masked_view_partitions_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = patchify_grid(&seq(512), [8, 8, 8], [2, 2, 2]).unwrap();
        let mv = mask_patches(g, 0.6, &mut rng).unwrap();
        assert_eq!(mv.masked_count(), 38);
        assert_eq!(mv.visible_index.len(), 64 - 38);
        for (i, &m) in mv.mask.iter().enumerate() {
            assert_eq!(mv.visible_index.contains(&i), !m);
        }
        assert!(mv.visible_index.windows(2).all(|w| w[0] < w[1]));
    }
}
