use kuda::tracing::{sliding_window_search, WindowConfig};
use proptest::prelude::*;

fn scores(n: usize, top: &[usize]) -> Vec<f64> {
    (0..n)
        .map(|l| {
            if top.contains(&l) {
                0.5 + 0.01 * l as f64
            } else {
                0.01
            }
        })
        .collect()
}

#[test]
fn contiguous_block_picks_median_window() {
    let ce = scores(24, &(2..12).collect::<Vec<_>>());
    let sel = sliding_window_search(
        &ce,
        &WindowConfig {
            n_candidates: 10,
            window: 4,
        },
    )
    .unwrap();
    assert_eq!(sel.candidates, (2..12).collect::<Vec<_>>());
    assert_eq!(sel.center, 7);
    assert_eq!(sel.layers, vec![6, 7, 8, 9]);
    assert_eq!(sel.hit_ratio, 1.0);
    assert!(!sel.fallback && !sel.clamped);
}

#[test]
fn single_candidate_window() {
    let mut ce = vec![0.0; 6];
    ce[4] = 0.9;
    let sel = sliding_window_search(
        &ce,
        &WindowConfig {
            n_candidates: 1,
            window: 1,
        },
    )
    .unwrap();
    assert_eq!(sel.layers, vec![4]);
    assert_eq!(sel.hit_ratio, 1.0);
    assert!(!sel.fallback);
}

#[test]
fn scattered_candidates_fall_back_to_median_center() {
    // top = {0, 5, 10, 15}; windows around 10 and 15 each hold one candidate
    let ce = scores(20, &[0, 5, 10, 15]);
    let sel = sliding_window_search(
        &ce,
        &WindowConfig {
            n_candidates: 4,
            window: 4,
        },
    )
    .unwrap();
    assert!(sel.fallback);
    assert_eq!(sel.center, 10);
    assert_eq!(sel.layers, vec![9, 10, 11, 12]);
    assert_eq!(sel.hit_ratio, 0.25);
}

#[test]
fn later_center_wins_when_median_window_misses() {
    // top = {1, 8, 9, 10, 11}: center 9 (i = 3) covers {8,9,10,11}
    let ce = scores(16, &[1, 8, 9, 10, 11]);
    let sel = sliding_window_search(
        &ce,
        &WindowConfig {
            n_candidates: 5,
            window: 4,
        },
    )
    .unwrap();
    assert_eq!(sel.center, 9);
    assert_eq!(sel.layers, vec![8, 9, 10, 11]);
    assert!(!sel.fallback);
}

#[test]
fn window_near_the_top_is_clamped() {
    let ce = scores(8, &[4, 5, 6, 7]);
    let sel = sliding_window_search(
        &ce,
        &WindowConfig {
            n_candidates: 4,
            window: 4,
        },
    )
    .unwrap();
    assert_eq!(sel.layers, vec![4, 5, 6, 7]);
    assert!(sel.clamped);
}

#[test]
fn too_many_candidates_is_rejected() {
    let ce = vec![0.1; 6];
    let err = sliding_window_search(
        &ce,
        &WindowConfig {
            n_candidates: 7,
            window: 4,
        },
    )
    .unwrap_err();
    assert_eq!(err.code(), "invalid_argument");
}

proptest! {
    #[test]
    fn output_is_consecutive_and_deterministic(
        ce in prop::collection::vec(-1.0f64..1.0, 4..30),
        n in 1usize..10,
        s in 1usize..6,
    ) {
        prop_assume!(s <= n && n <= ce.len());
        let cfg = WindowConfig { n_candidates: n, window: s };
        let a = sliding_window_search(&ce, &cfg).unwrap();
        let b = sliding_window_search(&ce, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.layers.len(), s);
        prop_assert!(a.layers.windows(2).all(|w| w[1] == w[0] + 1));
        prop_assert!(*a.layers.last().unwrap() < ce.len());
    }
}
