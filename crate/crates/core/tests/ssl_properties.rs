use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssldetr_core::patchgrid::{extract_patches, selection_count};
use ssldetr_core::ssl::{make_jigsaw_continuous, make_jigsaw_discrete, make_mim_continuous, SslTarget};
use ssldetr_core::{Image, PatchGrid};

/// Grid shape, patch size, ratio, image seed and transform seed.
fn case() -> impl Strategy<Value = (usize, usize, usize, f64, u64, u64)> {
    (1usize..6, 1usize..6, prop::sample::select(vec![1usize, 2, 4, 8]), 0.0f64..=1.0, any::<u64>(), any::<u64>())
}

fn image(rows: usize, cols: usize, p: usize, seed: u64) -> (Image, PatchGrid) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rows * p, cols * p);
    let data = (0..3 * h * w).map(|_| rng.random::<f32>()).collect();
    (Image::new(3, h, w, data).unwrap(), PatchGrid::new(h, w, p).unwrap())
}

/// Pixel coordinates of grid patch `i`.
fn pixels_of(grid: &PatchGrid, i: usize) -> impl Iterator<Item = (usize, usize)> {
    let p = grid.patch_size();
    let (r, c) = (i / grid.cols(), i % grid.cols());
    (r * p..(r + 1) * p).flat_map(move |y| (c * p..(c + 1) * p).map(move |x| (y, x)))
}

fn unselected_bits_equal(a: &Image, b: &Image, grid: &PatchGrid, selected: &[usize]) -> bool {
    (0..grid.num_patches())
        .filter(|i| !selected.contains(i))
        .all(|i| pixels_of(grid, i).all(|(y, x)| (0..3).all(|c| a.get(c, y, x).to_bits() == b.get(c, y, x).to_bits())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mim_keeps_unselected_pixels_and_fills_with_channel_mean((rows, cols, p, ratio, s1, s2) in case()) {
        let (img, grid) = image(rows, cols, p, s1);
        let s = make_mim_continuous(&img, &grid, ratio, &mut ChaCha8Rng::seed_from_u64(s2)).unwrap();
        prop_assert_eq!(s.loss_indices.len(), selection_count(grid.num_patches(), ratio));
        prop_assert!(s.loss_indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(unselected_bits_equal(&img, &s.input_image, &grid, &s.loss_indices));
        let plane = img.height() * img.width();
        for c in 0..3 {
            let mean = img.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            for &i in &s.loss_indices {
                for (y, x) in pixels_of(&grid, i) {
                    prop_assert!((s.input_image.get(c, y, x) as f64 - mean).abs() < 1e-6);
                }
            }
        }
        prop_assert_eq!(s.target, SslTarget::Pixels(img));
    }

    #[test]
    fn jigsaw_moves_only_selected_patches_and_inverts_exactly((rows, cols, p, ratio, s1, s2) in case()) {
        let (img, grid) = image(rows, cols, p, s1);
        let s = make_jigsaw_continuous(&img, &grid, ratio, &mut ChaCha8Rng::seed_from_u64(s2)).unwrap();
        prop_assert_eq!(s.loss_indices.len(), selection_count(grid.num_patches(), ratio));
        prop_assert!(unselected_bits_equal(&img, &s.input_image, &grid, &s.loss_indices));
        let perm = s.permutation.as_ref().unwrap();
        prop_assert_eq!(perm.inverse().apply_to_image(&s.input_image).unwrap(), img.clone());
        let mut sorted = perm.source_indices();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, s.loss_indices.clone());
    }

    #[test]
    fn jigsaw_labels_name_where_each_patch_came_from((rows, cols, p, ratio, s1, s2) in case()) {
        let (img, grid) = image(rows, cols, p, s1);
        let s = make_jigsaw_discrete(&img, &grid, ratio, &mut ChaCha8Rng::seed_from_u64(s2)).unwrap();
        let SslTarget::Labels { labels, num_classes } = &s.target else { panic!("labels expected") };
        prop_assert_eq!(*num_classes, grid.num_patches());
        prop_assert_eq!(labels.len(), s.loss_indices.len());
        let before = extract_patches(&img, &grid).unwrap();
        let after = extract_patches(&s.input_image, &grid).unwrap();
        for (&slot, &source) in s.loss_indices.iter().zip(labels) {
            prop_assert_eq!(after.patch(slot), before.patch(source));
        }
    }
}
