use std::collections::BTreeSet;

use anomography::admm::{admm_solve_weighted, AdmmWorkspace};
use anomography::hankel::{frontal_slice, slice_count, LinkSeriesBuffer};
use anomography::io;
use anomography::metrics::{roc, ScoreGrid};
use anomography::pipeline::{Checkpoint, Tracker};
use anomography::traffic::{inject, make_link_matrix, Labels};
use anomography::{AnomalyEvent, AnomalyStructure, Hyperparams, Mask, RoutingMatrix};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn routing_from_seed(seed: u64, links: usize, flows: usize) -> RoutingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = (0..flows)
        .map(|_| {
            let mut c: Vec<usize> = (0..links).filter(|_| rng.random_bool(0.35)).collect();
            if c.is_empty() {
                c.push(rng.random_range(0..links));
            }
            c
        })
        .collect();
    RoutingMatrix::new(links, cols).unwrap()
}

fn mask_from_seed(seed: u64, rows: usize, cols: usize, p: f64) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mask::from_fn(rows, cols, |_, _| rng.random_bool(p))
}

fn stream_from_seed(seed: u64, links: usize, total: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(links, total, |l, s| {
        2.0 + (0.26 * s as f64 + l as f64).sin() + 0.1 * rng.random::<f64>()
    })
}

fn small_hp() -> Hyperparams {
    Hyperparams {
        rank: 3,
        window: 6,
        ..Hyperparams::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn buffered_slices_match_batch_slices(seed in any::<u64>(), links in 1usize..6, window in 2usize..7, extra in 0usize..10) {
        let total = window + extra;
        let y = stream_from_seed(seed, links, total);
        let mask = mask_from_seed(seed ^ 1, links, total, 0.6);
        let mut buf = LinkSeriesBuffer::new(links, window).unwrap();
        let mut k = 0;
        for s in 0..total {
            let vals: Vec<f64> = y.column(s).iter().copied().collect();
            let obs: Vec<bool> = mask.column(s).iter().copied().collect();
            if let Some(slice) = buf.push(&vals, &obs).unwrap() {
                k += 1;
                let batch = frontal_slice(&y, &mask, window, k).unwrap();
                prop_assert_eq!(slice, batch);
            }
        }
        prop_assert_eq!(k, slice_count(total, window));
    }

    #[test]
    fn streaming_tracker_matches_batch_run(seed in 0u64..1000) {
        let routing = routing_from_seed(seed, 5, 8);
        let hp = small_hp();
        let total = 20;
        let y = stream_from_seed(seed, 5, total);
        let mask = mask_from_seed(seed ^ 7, 5, total, 0.7);

        let mut batch = Tracker::new(routing.clone(), hp.clone(), seed).unwrap();
        let slices: Vec<_> = (1..=slice_count(total, hp.window))
            .map(|t| frontal_slice(&y, &mask, hp.window, t).unwrap())
            .collect();
        let expected = batch.run(&slices).unwrap();

        let mut online = Tracker::new(routing, hp.clone(), seed).unwrap();
        let mut buf = LinkSeriesBuffer::new(5, hp.window).unwrap();
        let mut got = Vec::new();
        for s in 0..total {
            let vals: Vec<f64> = y.column(s).iter().copied().collect();
            let obs: Vec<bool> = mask.column(s).iter().copied().collect();
            if let Some(slice) = buf.push(&vals, &obs).unwrap() {
                got.push(online.step(&slice).unwrap());
            }
        }
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn checkpoint_json_round_trip_resumes_identically(seed in 0u64..1000, cut in 1usize..10) {
        let routing = routing_from_seed(seed, 4, 6);
        let hp = small_hp();
        let total = 16;
        let y = stream_from_seed(seed, 4, total);
        let mask = mask_from_seed(seed ^ 3, 4, total, 0.8);
        let slices: Vec<_> = (1..=slice_count(total, hp.window))
            .map(|t| frontal_slice(&y, &mask, hp.window, t).unwrap())
            .collect();
        let mut a = Tracker::new(routing.clone(), hp.clone(), seed).unwrap();
        let full = a.run(&slices).unwrap();

        let mut b = Tracker::new(routing.clone(), hp, seed).unwrap();
        b.run(&slices[..cut]).unwrap();
        let text = serde_json::to_string(&b.checkpoint()).unwrap();
        let ckpt: Checkpoint = serde_json::from_str(&text).unwrap();
        let mut c = Tracker::from_checkpoint(routing, ckpt).unwrap();
        let rest = c.run(&slices[cut..]).unwrap();
        prop_assert_eq!(&rest[..], &full[cut..]);
    }

    #[test]
    fn routing_dense_and_sparse_views_agree(seed in any::<u64>(), links in 1usize..8, flows in 1usize..12) {
        let r = routing_from_seed(seed, links, flows);
        let dense = r.to_dense();
        prop_assert_eq!(RoutingMatrix::from_dense(&dense).unwrap(), r.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
        let x: Vec<f64> = (0..flows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..links).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rx = &dense * DVector::from_vec(x.clone());
        let rty = dense.transpose() * DVector::from_vec(y.clone());
        for (a, b) in r.apply(&x).iter().zip(rx.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in r.apply_transpose(&y).iter().zip(rty.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert_eq!(r.nnz(), dense.iter().filter(|&&v| v != 0.0).count());
    }

    #[test]
    fn link_matrix_matches_dense_product(seed in any::<u64>(), links in 1usize..8, flows in 1usize..12, total in 1usize..9) {
        let r = routing_from_seed(seed, links, flows);
        let x = stream_from_seed(seed ^ 9, flows, total);
        let got = make_link_matrix(&r, &x).unwrap();
        let want = r.to_dense() * &x;
        prop_assert!((got - want).amax() < 1e-12);
    }

    #[test]
    fn dense_csv_round_trip(rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 1..6), 1..5)) {
        let cols = rows[0].len();
        prop_assume!(rows.iter().all(|r| r.len() == cols));
        let m = DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]);
        let mut buf = Vec::new();
        io::write_dense(&mut buf, &m).unwrap();
        prop_assert_eq!(io::read_dense(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn mask_and_labels_round_trip(seed in any::<u64>(), links in 1usize..6, total in 1usize..9) {
        let mask = mask_from_seed(seed, links, total, 0.5);
        let mut buf = Vec::new();
        io::write_mask(&mut buf, &mask).unwrap();
        prop_assert_eq!(io::read_mask(buf.as_slice(), links, total).unwrap(), mask.clone());

        let labels: Labels = (0..links)
            .flat_map(|l| (0..total).map(move |s| (l, s + 1)))
            .filter(|&(l, t)| mask[(l, t - 1)])
            .collect();
        let mut buf = Vec::new();
        io::write_labels(&mut buf, &labels).unwrap();
        prop_assert_eq!(io::read_labels(buf.as_slice()).unwrap(), labels);
    }

    #[test]
    fn hyperparams_and_events_json_round_trip(lambda in 0.01f64..1.0, mu in 1e-6f64..1.0, start in 1usize..50, dur in 1usize..20, ratio in 0.0f64..3.0) {
        let hp = Hyperparams { forgetting: lambda, mu_r: mu, mu_h: mu / 3.0, ..Hyperparams::default() };
        let back: Hyperparams = serde_json::from_str(&serde_json::to_string(&hp).unwrap()).unwrap();
        prop_assert_eq!(back, hp);
        let e = AnomalyEvent {
            flows: BTreeSet::from([1, 4]),
            start,
            duration: dur,
            ratio,
            rise: 0.2,
            fall: 0.3,
            structure: AnomalyStructure::NToOne { n: 2 },
        };
        let back: AnomalyEvent = serde_json::from_str(&serde_json::to_string(&e).unwrap()).unwrap();
        prop_assert_eq!(back, e);
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms(scores in prop::collection::vec(-5.0f64..5.0, 4..40), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut truth: Vec<bool> = scores.iter().map(|_| rng.random_bool(0.4)).collect();
        truth[0] = true;
        truth[1] = false;
        let base = roc(&scores, &truth).unwrap().auc;
        let warped: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() + 3.0).collect();
        let affine: Vec<f64> = scores.iter().map(|s| 4.0 * s - 1.0).collect();
        prop_assert!((roc(&warped, &truth).unwrap().auc - base).abs() < 1e-12);
        prop_assert!((roc(&affine, &truth).unwrap().auc - base).abs() < 1e-12);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((roc(&flipped, &truth).unwrap().auc - (1.0 - base)).abs() < 1e-9);
    }

    #[test]
    fn admm_solution_satisfies_kkt(seed in 0u64..10_000) {
        let (links, flows) = (6, 10);
        let routing = routing_from_seed(seed, links, flows);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 11);
        let mut mask_col: Vec<bool> = (0..links).map(|_| rng.random_bool(0.8)).collect();
        mask_col[0] = true;
        let q = DVector::from_fn(links, |_, _| rng.random_range(-2.0..2.0));
        let weight = 0.05 * q.amax();
        let hp = Hyperparams { max_iters: 50_000, eps_abs: 1e-11, eps_rel: 1e-10, ..Hyperparams::default() };
        let out = admm_solve_weighted(&q, &routing, &mask_col, weight, &hp, None, &mut AdmmWorkspace::new()).unwrap();
        prop_assert!(out.converged);
        let x = &out.estimate.z;
        let rx = routing.apply(x.as_slice());
        let resid: Vec<f64> = (0..links).map(|l| if mask_col[l] { q[l] - rx[l] } else { 0.0 }).collect();
        let g = routing.apply_transpose(&resid);
        let tol = 1e-6 * (1.0 + weight);
        for i in 0..flows {
            if x[i] != 0.0 {
                prop_assert!((g[i] - weight * x[i].signum()).abs() < tol, "flow {}: {} vs {}", i, g[i], weight);
            } else {
                prop_assert!(g[i].abs() <= weight + tol, "flow {}: |{}| > {}", i, g[i], weight);
            }
        }
    }

    #[test]
    fn injection_changes_only_the_path_links(seed in any::<u64>(), flow in 0usize..10, start in 1usize..10, dur in 1usize..8, ratio in prop_oneof![Just(0.0), 1.5f64..3.0]) {
        let (links, flows, total) = (7, 10, 20);
        let routing = routing_from_seed(seed, links, flows);
        let clean = stream_from_seed(seed ^ 2, flows, total);
        let mut dirty = clean.clone();
        let event = AnomalyEvent {
            flows: BTreeSet::from([flow]),
            start,
            duration: dur,
            ratio,
            rise: 0.25,
            fall: 0.25,
            structure: AnomalyStructure::OneToOne,
        };
        let labels = inject(&mut dirty, &[event]).unwrap();
        prop_assert_eq!(labels.len(), dur);
        let diff = make_link_matrix(&routing, &dirty).unwrap() - make_link_matrix(&routing, &clean).unwrap();
        let path: BTreeSet<usize> = routing.flow_links(flow).iter().copied().collect();
        for l in 0..links {
            for s in 0..total {
                let inside = s + 1 >= start && s + 1 < start + dur;
                let changed = diff[(l, s)].abs() > 1e-12;
                prop_assert_eq!(changed, inside && path.contains(&l), "link {} time {}", l, s + 1);
            }
        }
    }

    #[test]
    fn swept_thresholds_reproduce_detector_flags(seed in 0u64..500) {
        let routing = routing_from_seed(seed, 5, 8);
        let hp = Hyperparams { sparsity_scale: 1e-3, ..small_hp() };
        let total = 18;
        let mut y = stream_from_seed(seed, 5, total);
        for l in routing.flow_links(3) {
            for s in 12..15 {
                y[(*l, s)] += 4.0;
            }
        }
        let mask = Mask::from_element(5, total, true);
        let mut tracker = Tracker::new(routing, hp.clone(), seed).unwrap();
        let steps: Vec<_> = (1..=slice_count(total, hp.window))
            .map(|t| tracker.step(&frontal_slice(&y, &mask, hp.window, t).unwrap()).unwrap())
            .collect();
        let grid = ScoreGrid::from_steps(&steps).unwrap();
        let flagged = grid.flagged(hp.threshold);
        for (set, step) in flagged.iter().zip(&steps) {
            let want: BTreeSet<usize> = step.flagged.iter().copied().collect();
            prop_assert_eq!(set, &want);
        }

        let truth: Labels = (13..=15).map(|t| (3, t)).collect();
        let curve = grid.roc(&truth).unwrap();
        let (scores, labels) = grid.flatten(&truth);
        let pos = labels.iter().filter(|&&b| b).count() as f64;
        let neg = labels.len() as f64 - pos;
        for p in &curve.points {
            let sets = grid.flagged(p.threshold);
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (j, set) in sets.iter().enumerate() {
                for &f in set {
                    if truth.contains(&(f, grid.first_time + j)) { tp += 1.0 } else { fp += 1.0 }
                }
            }
            prop_assert!((tp / pos - p.tpr).abs() < 1e-12);
            prop_assert!((fp / neg - p.fpr).abs() < 1e-12);
        }
        prop_assert_eq!(scores.len(), 8 * steps.len());
    }
}
