//! Patch decomposition tied to the backbone downsampling factor.
//!
//! A patch of side `f` (the backbone stride) covers exactly the receptive block
//! of one feature-map cell, so patch `p` and encoder token `p` refer to the
//! same image region. Patches are indexed row-major.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Axis, Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchGrid {
    image_height: usize,
    image_width: usize,
    patch_size: usize,
    rows: usize,
    cols: usize,
}

impl PatchGrid {
    pub fn new(image_height: usize, image_width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::ZeroPatchSize);
        }
        for (axis, size) in [(Axis::Height, image_height), (Axis::Width, image_width)] {
            if size == 0 || size % patch_size != 0 {
                return Err(Error::Dimension {
                    axis,
                    size,
                    patch_size,
                });
            }
        }
        Ok(Self {
            image_height,
            image_width,
            patch_size,
            rows: image_height / patch_size,
            cols: image_width / patch_size,
        })
    }

    #[inline]
    pub fn image_height(&self) -> usize {
        self.image_height
    }

    #[inline]
    pub fn image_width(&self) -> usize {
        self.image_width
    }

    #[inline]
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    /// `(row, col)` of patch `index`.
    #[inline]
    pub fn position(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.height() != self.image_height || image.width() != self.image_width {
            return Err(Error::Shape(format!(
                "image is {}x{} but grid expects {}x{}",
                image.height(),
                image.width(),
                self.image_height,
                self.image_width
            )));
        }
        Ok(())
    }
}

/// Convenience constructor mirroring [`PatchGrid::new`].
pub fn compute_grid(
    image_height: usize,
    image_width: usize,
    downsampling_factor: usize,
) -> Result<PatchGrid> {
    PatchGrid::new(image_height, image_width, downsampling_factor)
}

/// A stack of square patches, `count x C x f x f`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    count: usize,
    channels: usize,
    size: usize,
    data: Vec<f32>,
}

impl Patches {
    pub fn new(count: usize, channels: usize, size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != count * channels * size * size {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot hold {count} patches of {channels}x{size}x{size}",
                data.len()
            )));
        }
        Ok(Self {
            count,
            channels,
            size,
            data,
        })
    }

    #[inline]
    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn patch_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn patch(&self, index: usize) -> &[f32] {
        let n = self.patch_len();
        &self.data[index * n..(index + 1) * n]
    }

    pub fn patch_mut(&mut self, index: usize) -> &mut [f32] {
        let n = self.patch_len();
        &mut self.data[index * n..(index + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Copies the listed patches into a new stack, in list order.
    pub fn select(&self, indices: &[usize]) -> Patches {
        let mut data = Vec::with_capacity(indices.len() * self.patch_len());
        for &i in indices {
            data.extend_from_slice(self.patch(i));
        }
        Patches {
            count: indices.len(),
            channels: self.channels,
            size: self.size,
            data,
        }
    }
}

pub fn extract_patches(image: &Image, grid: &PatchGrid) -> Result<Patches> {
    grid.check_image(image)?;
    let f = grid.patch_size;
    let channels = image.channels();
    let mut data = Vec::with_capacity(image.data().len());
    for p in 0..grid.num_patches() {
        let (row, col) = grid.position(p);
        for c in 0..channels {
            for dy in 0..f {
                let y = row * f + dy;
                let start = (c * grid.image_height + y) * grid.image_width + col * f;
                data.extend_from_slice(&image.data()[start..start + f]);
            }
        }
    }
    Patches::new(grid.num_patches(), channels, f, data)
}

pub fn reassemble_patches(patches: &Patches, grid: &PatchGrid) -> Result<Image> {
    let f = grid.patch_size;
    if patches.count != grid.num_patches() || patches.size != f {
        return Err(Error::Shape(format!(
            "{} patches of side {} do not tile a {}x{} grid of side {f}",
            patches.count, patches.size, grid.rows, grid.cols
        )));
    }
    let channels = patches.channels;
    let mut out = Image::zeros(channels, grid.image_height, grid.image_width);
    for p in 0..grid.num_patches() {
        let (row, col) = grid.position(p);
        let src = patches.patch(p);
        for c in 0..channels {
            for dy in 0..f {
                let y = row * f + dy;
                let dst = (c * grid.image_height + y) * grid.image_width + col * f;
                let s = (c * f + dy) * f;
                out.data_mut()[dst..dst + f].copy_from_slice(&src[s..s + f]);
            }
        }
    }
    Ok(out)
}

/// Number of patches selected for `ratio`, rounding half up.
pub fn selection_count(num_patches: usize, ratio: f64) -> usize {
    libm::floor(ratio * num_patches as f64 + 0.5) as usize
}

pub(crate) fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Range {
            name: "ratio",
            value: ratio,
        });
    }
    Ok(())
}

/// A set of distinct patch indices, stored in ascending order. Position `i`
/// in `indices` is called slot `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSelection {
    grid: PatchGrid,
    indices: Vec<usize>,
    ratio: f64,
}

impl PatchSelection {
    /// Builds a selection from explicit indices; they are sorted and must be
    /// distinct and in range.
    pub fn from_indices(grid: PatchGrid, mut indices: Vec<usize>, ratio: f64) -> Result<Self> {
        check_ratio(ratio)?;
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("selection indices must be distinct".into()));
        }
        if let Some(&last) = indices.last() {
            if last >= grid.num_patches() {
                return Err(Error::Contract(format!(
                    "patch index {last} out of range for {} patches",
                    grid.num_patches()
                )));
            }
        }
        Ok(Self {
            grid,
            indices,
            ratio,
        })
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Per-patch membership flags over the whole grid.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.grid.num_patches()];
        for &i in &self.indices {
            mask[i] = true;
        }
        mask
    }
}

/// Draws `round(ratio * num_patches)` distinct patches uniformly without
/// replacement.
pub fn sample_selection<R: Rng + ?Sized>(
    grid: &PatchGrid,
    ratio: f64,
    rng: &mut R,
) -> Result<PatchSelection> {
    check_ratio(ratio)?;
    let n = grid.num_patches();
    let k = selection_count(n, ratio).min(n);
    let mut pool: Vec<usize> = (0..n).collect();
    // partial Fisher-Yates: the first k entries are a uniform k-subset
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    PatchSelection::from_indices(*grid, pool, ratio)
}

/// A bijection over the slots of a selection: `mapping[i]` is the slot the
/// patch from slot `i` is moved to.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPermutation {
    selection: PatchSelection,
    mapping: Vec<usize>,
}

impl PatchPermutation {
    pub fn new(selection: PatchSelection, mapping: Vec<usize>) -> Result<Self> {
        if mapping.len() != selection.len() {
            return Err(Error::Contract(format!(
                "mapping has {} entries for a selection of {}",
                mapping.len(),
                selection.len()
            )));
        }
        let mut seen = vec![false; mapping.len()];
        for &m in &mapping {
            if m >= mapping.len() || seen[m] {
                return Err(Error::Contract("mapping is not a bijection".into()));
            }
            seen[m] = true;
        }
        Ok(Self { selection, mapping })
    }

    pub fn identity(selection: PatchSelection) -> Self {
        let mapping = (0..selection.len()).collect();
        Self { selection, mapping }
    }

    pub fn selection(&self) -> &PatchSelection {
        &self.selection
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn inverse(&self) -> PatchPermutation {
        let mut inv = vec![0; self.mapping.len()];
        for (src, &dst) in self.mapping.iter().enumerate() {
            inv[dst] = src;
        }
        PatchPermutation {
            selection: self.selection.clone(),
            mapping: inv,
        }
    }

    /// Grid index the patch now sitting at each slot originally came from.
    pub fn source_indices(&self) -> Vec<usize> {
        let idx = self.selection.indices();
        self.inverse().mapping.iter().map(|&src| idx[src]).collect()
    }

    /// Moves the patch at grid index `indices[i]` to `indices[mapping[i]]`;
    /// unselected patches are untouched.
    pub fn apply(&self, patches: &Patches) -> Result<Patches> {
        if patches.count() != self.selection.grid().num_patches() {
            return Err(Error::Shape(format!(
                "{} patches for a grid of {}",
                patches.count(),
                self.selection.grid().num_patches()
            )));
        }
        let mut out = patches.clone();
        let idx = self.selection.indices();
        for (src, &dst) in self.mapping.iter().enumerate() {
            out.patch_mut(idx[dst]).copy_from_slice(patches.patch(idx[src]));
        }
        Ok(out)
    }

    pub fn apply_to_image(&self, image: &Image) -> Result<Image> {
        let grid = self.selection.grid();
        let patches = extract_patches(image, grid)?;
        reassemble_patches(&self.apply(&patches)?, grid)
    }
}

/// Uniform random bijection over the selection's slots, resampled until it is
/// not the identity whenever at least two slots exist.
pub fn sample_permutation<R: Rng + ?Sized>(
    selection: &PatchSelection,
    rng: &mut R,
) -> PatchPermutation {
    let k = selection.len();
    let mut mapping: Vec<usize> = (0..k).collect();
    loop {
        for i in (1..k).rev() {
            let j = rng.random_range(0..=i);
            mapping.swap(i, j);
        }
        if k < 2 || mapping.iter().enumerate().any(|(i, &m)| i != m) {
            break;
        }
    }
    PatchPermutation {
        selection: selection.clone(),
        mapping,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Image {
        let data = (0..c * h * w).map(|_| rng.random::<f32>()).collect();
        Image::new(c, h, w, data).unwrap()
    }

    #[test]
    fn grid_from_backbone_factor() {
        let g = compute_grid(512, 512, 32).unwrap();
        assert_eq!((g.rows(), g.cols(), g.num_patches()), (16, 16, 256));
        let g = compute_grid(32, 32, 32).unwrap();
        assert_eq!((g.rows(), g.cols(), g.num_patches()), (1, 1, 1));
    }

    #[test]
    fn non_divisible_width_is_rejected() {
        let err = compute_grid(512, 500, 32).unwrap_err();
        assert_eq!(
            err,
            Error::Dimension {
                axis: Axis::Width,
                size: 500,
                patch_size: 32
            }
        );
        assert!(matches!(
            compute_grid(100, 64, 32),
            Err(Error::Dimension { axis: Axis::Height, .. })
        ));
        assert_eq!(compute_grid(32, 32, 0), Err(Error::ZeroPatchSize));
    }

    #[test]
    fn index_position_bijection() {
        let g = compute_grid(96, 64, 16).unwrap();
        for p in 0..g.num_patches() {
            let (r, c) = g.position(p);
            assert!(r < g.rows() && c < g.cols());
            assert_eq!(g.index(r, c), p);
        }
    }

    #[test]
    fn constant_image_gives_constant_patches() {
        let g = compute_grid(64, 64, 16).unwrap();
        let p = extract_patches(&Image::filled(3, 64, 64, 0.5), &g).unwrap();
        assert_eq!(p.count(), 16);
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn patches_are_row_major() {
        let g = compute_grid(4, 4, 2).unwrap();
        let mut img = Image::zeros(1, 4, 4);
        let values = [1.0, 2.0, 3.0, 4.0];
        for y in 0..4 {
            for x in 0..4 {
                img.set(0, y, x, values[(y / 2) * 2 + x / 2]);
            }
        }
        let p = extract_patches(&img, &g).unwrap();
        for (i, v) in values.iter().enumerate() {
            assert!(p.patch(i).iter().all(|x| x == v));
        }
    }

    #[test]
    fn single_patch_grid_round_trips_to_the_patch() {
        let g = compute_grid(8, 8, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 3, 8, 8);
        let p = extract_patches(&img, &g).unwrap();
        assert_eq!(p.data(), img.data());
        assert_eq!(reassemble_patches(&p, &g).unwrap(), img);
    }

    #[test]
    fn shape_errors() {
        let g = compute_grid(32, 32, 16).unwrap();
        assert!(matches!(
            extract_patches(&Image::zeros(3, 32, 16), &g),
            Err(Error::Shape(_))
        ));
        let p = Patches::new(3, 3, 16, vec![0.0; 3 * 3 * 256]).unwrap();
        assert!(matches!(reassemble_patches(&p, &g), Err(Error::Shape(_))));
    }

    #[test]
    fn selection_counts() {
        let g = compute_grid(512, 512, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_selection(&g, 0.5, &mut rng).unwrap().len(), 128);
        assert!(sample_selection(&g, 0.0, &mut rng).unwrap().is_empty());
        let all = sample_selection(&g, 1.0, &mut rng).unwrap();
        assert_eq!(all.indices(), (0..256).collect::<Vec<_>>().as_slice());
        assert_eq!(sample_selection(&g, 0.25, &mut rng).unwrap().len(), 64);
        // half-up rounding: 0.5 * 5 = 2.5 -> 3
        let g5 = compute_grid(4, 20, 4).unwrap();
        assert_eq!(sample_selection(&g5, 0.5, &mut rng).unwrap().len(), 3);
    }

    #[test]
    fn ratio_outside_unit_interval_is_rejected() {
        let g = compute_grid(64, 64, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for r in [-0.1, 1.5, f64::NAN] {
            assert!(matches!(
                sample_selection(&g, r, &mut rng),
                Err(Error::Range { .. })
            ));
        }
    }

    #[test]
    fn small_permutations() {
        let g = compute_grid(64, 64, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let one = PatchSelection::from_indices(g, vec![5], 0.0625).unwrap();
        assert_eq!(sample_permutation(&one, &mut rng).mapping(), &[0]);
        let two = PatchSelection::from_indices(g, vec![1, 7], 0.125).unwrap();
        for _ in 0..20 {
            assert_eq!(sample_permutation(&two, &mut rng).mapping(), &[1, 0]);
        }
        let four = PatchSelection::from_indices(g, vec![0, 3, 8, 15], 0.25).unwrap();
        let perm = sample_permutation(&four, &mut rng);
        let inv = perm.inverse();
        for i in 0..4 {
            assert_eq!(inv.mapping()[perm.mapping()[i]], i);
        }
        assert!(!perm.is_identity());
    }

    #[test]
    fn permutation_rejects_non_bijection() {
        let g = compute_grid(64, 64, 32).unwrap();
        let sel = PatchSelection::from_indices(g, vec![0, 1], 0.5).unwrap();
        assert!(PatchPermutation::new(sel.clone(), vec![0, 0]).is_err());
        assert!(PatchPermutation::new(sel, vec![0]).is_err());
    }

    #[test]
    fn permute_then_inverse_restores_image() {
        let g = compute_grid(64, 64, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = random_image(&mut rng, 3, 64, 64);
        let sel = sample_selection(&g, 0.5, &mut rng).unwrap();
        let perm = sample_permutation(&sel, &mut rng);
        let shuffled = perm.apply_to_image(&img).unwrap();
        assert_ne!(shuffled, img);
        assert_eq!(perm.inverse().apply_to_image(&shuffled).unwrap(), img);
    }

    proptest! {
        #[test]
        fn extract_reassemble_round_trip(
            seed in any::<u64>(),
            rows in 1usize..5,
            cols in 1usize..5,
            f in 1usize..6,
            c in 1usize..4,
        ) {
            let g = compute_grid(rows * f, cols * f, f).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(&mut rng, c, rows * f, cols * f);
            let back = reassemble_patches(&extract_patches(&img, &g).unwrap(), &g).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn selections_and_permutations_are_valid_and_seeded(
            seed in any::<u64>(),
            ratio in 0.0f64..=1.0,
        ) {
            let g = compute_grid(48, 64, 8).unwrap();
            let draw = |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let sel = sample_selection(&g, ratio, &mut rng).unwrap();
                let perm = sample_permutation(&sel, &mut rng);
                (sel, perm)
            };
            let (sel, perm) = draw(seed);
            prop_assert_eq!(sel.len(), selection_count(48, ratio));
            prop_assert!(sel.indices().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(sel.indices().iter().all(|&i| i < 48));
            let mut sorted = perm.mapping().to_vec();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..sel.len()).collect::<Vec<_>>());
            if sel.len() >= 2 {
                prop_assert!(!perm.is_identity());
            }
            prop_assert_eq!(draw(seed), (sel, perm));
        }
    }
}
