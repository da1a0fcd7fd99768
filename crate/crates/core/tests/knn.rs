use la2former::geometry::{knn_indices, knn_indices_accelerated, squared_distance, PointSet};
use la2former::tensor::Tensor;
use proptest::prelude::*;

fn cloud(max_points: usize, dim: usize) -> impl Strategy<Value = PointSet> {
    (2..=max_points).prop_flat_map(move |m| {
        // Coordinates on a 1/8 lattice so exact ties and duplicates show up.
        prop::collection::vec(-16i32..16, m * dim).prop_map(move |v| {
            let data = v.into_iter().map(|x| x as f64 / 8.0).collect();
            PointSet::new(Tensor::new(&[m, dim], data).unwrap()).unwrap()
        })
    })
}

fn transformed(pts: &PointSet, scale: f64, shift: f64) -> PointSet {
    let c = pts.coords();
    PointSet::new(Tensor::from_fn(c.shape(), |i| c.data()[i] * scale + shift)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rows_start_at_self_and_are_sorted((pts, k) in cloud(60, 2).prop_flat_map(|p| {
        let m = p.len();
        (Just(p), 1..=m)
    })) {
        let knn = knn_indices_accelerated(&pts, k).unwrap();
        prop_assert_eq!(knn.k(), k);
        for a in 0..pts.len() {
            let row = knn.row(a);
            prop_assert_eq!(row[0], a);
            let mut seen = std::collections::HashSet::new();
            prop_assert!(row.iter().all(|&j| seen.insert(j)));
            let keys: Vec<(f64, usize)> = row[1..]
                .iter()
                .map(|&j| (squared_distance(pts.point(a), pts.point(j)), j))
                .collect();
            prop_assert!(keys.windows(2).all(|w| w[0] < w[1]));
            // Nothing outside the row is strictly closer than the last neighbor.
            if let Some(&(worst, _)) = keys.last() {
                for j in (0..pts.len()).filter(|j| !row.contains(j)) {
                    let key = (squared_distance(pts.point(a), pts.point(j)), j);
                    prop_assert!(key > (worst, row[k - 1]));
                }
            }
        }
    }

    #[test]
    fn accelerated_matches_brute_force(pts in cloud(120, 3), k_frac in 0.0f64..1.0) {
        let k = 1 + (k_frac * (pts.len() - 1) as f64) as usize;
        prop_assert_eq!(knn_indices(&pts, k).unwrap(), knn_indices_accelerated(&pts, k).unwrap());
    }

    #[test]
    fn invariant_to_translation_and_power_of_two_scaling(
        pts in cloud(50, 2),
        exp in -3i32..4,
        shift in -8i32..8,
    ) {
        let k = pts.len().min(6);
        let moved = transformed(&pts, 2f64.powi(exp), shift as f64);
        prop_assert_eq!(knn_indices(&pts, k).unwrap(), knn_indices(&moved, k).unwrap());
    }
}

#[test]
fn grid_neighbors_are_the_four_adjacent_nodes() {
    let g = 5;
    let grid = PointSet::unit_grid(g).unwrap();
    let knn = knn_indices_accelerated(&grid, 5).unwrap();
    let center = 2 * g + 2;
    let mut row = knn.row(center).to_vec();
    row.sort_unstable();
    assert_eq!(row, vec![center - g, center - 1, center, center + 1, center + g]);
}

#[test]
fn rejects_bad_patch_sizes() {
    let grid = PointSet::unit_grid(3).unwrap();
    assert!(knn_indices(&grid, 0).is_err());
    assert!(knn_indices_accelerated(&grid, 10).is_err());
}
