mod common;

use common::*;
use fusionrec::baselines::{svd_train, ItemCf, RatingsMatrix, SvdConfig, UserCf};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid(users: usize, items: usize, holes: f64, seed: u64) -> Grid {
    random_grid(&mut ChaCha8Rng::seed_from_u64(seed), users, items, holes)
}

fn same_sim(got: f64, want: Option<f64>) -> bool {
    match want {
        None => got.is_nan(),
        Some(w) => (got - w).abs() <= 1e-12,
    }
}

#[test]
fn five_by_five_toy_matches_oracle() {
    let g: Grid = [
        [5, 3, 4, 4, 1],
        [3, 1, 2, 3, 3],
        [4, 3, 4, 3, 5],
        [3, 3, 1, 5, 4],
        [1, 5, 5, 2, 1],
    ]
    .iter()
    .map(|row| row.iter().map(|&r| Some(r as f64)).collect())
    .collect();
    assert!(cf_oracle_gap(&g, 2, 2) <= 1e-10);
    assert!(cf_oracle_gap(&g, 40, 2) <= 1e-10);
}

#[test]
fn rank_one_matrix_is_recovered() {
    let (u, v) = ([1u8, 2, 1, 2], [1u8, 2, 2, 1]);
    let records: Vec<_> = (0..4)
        .flat_map(|a| (0..4).map(move |b| (a, b)))
        .map(|(a, b)| fusionrec::data::RatingRecord {
            user_id: a as u32 + 1,
            movie_id: b as u32 + 1,
            rating: u[a] * v[b],
            timestamp: 0,
        })
        .collect();
    let m = RatingsMatrix::from_records(&records).unwrap();
    let cfg = SvdConfig {
        k: 1,
        lr: 0.01,
        reg: 0.0,
        epochs: 2000,
        ..SvdConfig::default()
    };
    let mut first_below = None;
    let model = svd_train(&m, &cfg, |epoch, f| {
        if first_below.is_none() && f.train_rmse(&m) < 0.05 {
            first_below = Some(epoch);
        }
    })
    .unwrap();
    assert!(first_below.is_some(), "final train RMSE {}", model.train_rmse(&m));
}

#[test]
fn small_step_objective_never_increases() {
    let g = grid(6, 6, 0.2, 3);
    let m = RatingsMatrix::from_records(&grid_records(&g)).unwrap();
    let cfg = SvdConfig {
        k: 3,
        lr: 0.001,
        reg: 0.02,
        epochs: 300,
        ..SvdConfig::default()
    };
    let mut objectives = Vec::new();
    svd_train(&m, &cfg, |_, f| objectives.push(f.objective(&m, cfg.reg))).unwrap();
    for w in objectives.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
    }
    assert!(objectives.last().unwrap() < &objectives[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dense_cf_matches_brute_force(
        users in 2usize..=6,
        items in 2usize..=6,
        k in 1usize..=6,
        min_overlap in 1usize..=3,
        seed in any::<u64>(),
    ) {
        let g = grid(users, items, 0.0, seed);
        prop_assert!(cf_oracle_gap(&g, k, min_overlap) <= 1e-10);
    }

    #[test]
    fn sparse_cf_matches_brute_force(
        users in 2usize..=6,
        items in 2usize..=6,
        k in 1usize..=6,
        seed in any::<u64>(),
    ) {
        let g = grid(users, items, 0.35, seed);
        prop_assert!(cf_oracle_gap(&g, k, 2) <= 1e-10);
    }

    #[test]
    fn similarities_are_symmetric_and_match_oracle(
        users in 2usize..=6,
        items in 2usize..=6,
        seed in any::<u64>(),
    ) {
        let g = grid(users, items, 0.25, seed);
        let m = RatingsMatrix::from_records(&grid_records(&g)).unwrap();
        let ucf = UserCf::fit(&m, 40, 2);
        let icf = ItemCf::fit(&m, 40, 2);
        for a in 0..users {
            for b in 0..users {
                let s = ucf.similarity(a, b);
                prop_assert!(s.to_bits() == ucf.similarity(b, a).to_bits());
                if a != b {
                    prop_assert!(same_sim(s, oracle_user_sim(&g, a, b, 2)));
                    prop_assert!(s.is_nan() || (-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
                }
            }
        }
        for a in 0..items {
            for b in 0..items {
                let s = icf.similarity(a, b);
                prop_assert!(s.to_bits() == icf.similarity(b, a).to_bits());
                if a != b {
                    prop_assert!(same_sim(s, oracle_item_sim(&g, a, b, 2)));
                }
            }
        }
    }

    #[test]
    fn predictions_stay_in_rating_range(
        users in 2usize..=6,
        items in 2usize..=6,
        seed in any::<u64>(),
    ) {
        let g = grid(users, items, 0.3, seed);
        let m = RatingsMatrix::from_records(&grid_records(&g)).unwrap();
        let ucf = UserCf::fit(&m, 3, 1);
        let icf = ItemCf::fit(&m, 3, 1);
        for u in 1..=users as u32 + 1 {
            for i in 1..=items as u32 + 1 {
                for p in [ucf.predict(&m, u, i), icf.predict(&m, u, i)] {
                    prop_assert!((1.0..=5.0).contains(&p));
                }
            }
        }
    }
}
