use lbe_core::classifiers::{
    fit_forest, fit_gbm, fit_knn, grid_search, load_model, save_model, Classifier, ClassifierHyper, ClassifierKind,
    EmbeddingTable, ForestHyper, ForestKind, GbmHyper, GridSpec,
};
use lbe_core::metrics::auroc;
use lbe_core::numerics::RngStream;

fn table(features: Vec<Vec<f64>>, targets: Vec<Vec<bool>>) -> EmbeddingTable {
    let k = targets[0].len();
    let ids = (0..features.len()).map(|i| format!("r{i}")).collect();
    let names = (0..k).map(|c| format!("c{c}")).collect();
    EmbeddingTable::new(ids, &features, names, &targets).unwrap()
}

/// Two noisy classes: class 0 depends on feature 0, class 1 on features 1+2.
fn toy(n: usize, dim: usize, seed: u64) -> EmbeddingTable {
    let mut rng = RngStream::new(seed, 0);
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let y0 = x[0] + 0.5 * rng.normal() > 0.3;
        let y1 = x[1] - x[2] + 0.5 * rng.normal() > 0.0;
        features.push(x);
        targets.push(vec![y0, y1]);
    }
    table(features, targets)
}

fn column(rows: &[Vec<f64>], c: usize) -> Vec<f64> {
    rows.iter().map(|r| r[c]).collect()
}

/// One unpruned tree on the full sample.
fn memorizing() -> ForestHyper {
    ForestHyper {
        n_estimators: 1,
        max_depth: None,
        min_samples_split: 2,
        min_samples_leaf: 1,
        max_features: Some(6),
        bootstrap: false,
    }
}

#[test]
fn full_size_forest_settings() {
    let rf = ForestHyper::rf_full();
    assert_eq!((rf.n_estimators, rf.max_depth, rf.min_samples_split, rf.min_samples_leaf), (2000, Some(10), 2, 2));
    let xrt = ForestHyper::xrt_full();
    assert_eq!((xrt.n_estimators, xrt.max_depth, xrt.min_samples_split, xrt.min_samples_leaf), (2000, Some(10), 5, 1));
    assert!(rf.bootstrap && !xrt.bootstrap);
    assert_eq!(ForestHyper::desk(ForestKind::Rf).n_estimators, 200);
    let gb = GbmHyper::default();
    assert_eq!((gb.n_estimators, gb.max_depth, gb.learning_rate), (1000, 3, 0.1));
    assert_eq!(rf.features_per_split(16), 4);
    assert_eq!(rf.features_per_split(17), 5);
}

#[test]
fn single_sample_gives_single_leaves() {
    let t = table(vec![vec![0.3, 0.7]], vec![vec![true, false]]);
    for kind in [ForestKind::Rf, ForestKind::Xrt] {
        let m = fit_forest(&t, kind, &ForestHyper { n_estimators: 7, ..ForestHyper::desk(kind) }, 1).unwrap();
        for trees in &m.classes {
            assert_eq!(trees.len(), 7);
            assert!(trees.iter().all(|tr| tr.nodes.len() == 1));
        }
        assert_eq!(m.predict_proba(&[vec![5.0, -5.0]]).unwrap(), vec![vec![1.0, 0.0]]);
        assert_eq!(m.constant, vec![true, true]);
    }
}

#[test]
fn forests_are_deterministic_and_respect_depth() {
    let t = toy(150, 6, 2);
    let probe = toy(40, 6, 3).feature_rows();
    for kind in [ForestKind::Rf, ForestKind::Xrt] {
        let h = ForestHyper {
            n_estimators: 25,
            max_depth: Some(4),
            ..ForestHyper::desk(kind)
        };
        let a = fit_forest(&t, kind, &h, 9).unwrap();
        let b = fit_forest(&t, kind, &h, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.predict_proba(&probe).unwrap(), b.predict_proba(&probe).unwrap());
        let c = fit_forest(&t, kind, &h, 10).unwrap();
        assert_ne!(a.predict_proba(&probe).unwrap(), c.predict_proba(&probe).unwrap());
        for trees in &a.classes {
            assert_eq!(trees.len(), 25);
            assert!(trees.iter().all(|tr| tr.depth() <= 4));
        }
        for row in a.predict_proba(&probe).unwrap() {
            assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}

#[test]
fn min_leaf_is_respected() {
    let t = toy(120, 4, 4);
    let h = ForestHyper {
        n_estimators: 10,
        max_depth: None,
        min_samples_split: 2,
        min_samples_leaf: 7,
        max_features: None,
        bootstrap: false,
    };
    for kind in [ForestKind::Rf, ForestKind::Xrt] {
        let m = fit_forest(&t, kind, &h, 3).unwrap();
        for tree in m.classes.iter().flatten() {
            for node in &tree.nodes {
                if let lbe_core::classifiers::tree::Node::Leaf { count, .. } = node {
                    assert!(*count >= 7);
                }
            }
        }
    }
}

#[test]
fn one_deep_tree_memorizes_training_data() {
    let t = toy(200, 6, 5);
    let x = t.feature_rows();
    for kind in [ForestKind::Rf, ForestKind::Xrt] {
        let m = fit_forest(&t, kind, &memorizing(), 1).unwrap();
        let p = m.predict_proba(&x).unwrap();
        for c in 0..2 {
            assert_eq!(auroc(&column(&p, c), &t.class_targets(c)).unwrap(), 1.0);
        }
    }
}

#[test]
fn forests_learn_signal() {
    let train = toy(400, 6, 6);
    let test = toy(300, 6, 7);
    for kind in [ForestKind::Rf, ForestKind::Xrt] {
        let m = fit_forest(&train, kind, &ForestHyper { n_estimators: 60, ..ForestHyper::desk(kind) }, 2).unwrap();
        let p = m.predict_proba(&test.feature_rows()).unwrap();
        for c in 0..2 {
            let a = auroc(&column(&p, c), &test.class_targets(c)).unwrap();
            assert!(a > 0.8, "{kind:?} class {c}: {a}");
        }
    }
}

#[test]
fn all_positive_class_predicts_one() {
    let mut rng = RngStream::new(8, 0);
    let features: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.normal(), rng.normal()]).collect();
    let targets: Vec<Vec<bool>> = (0..30).map(|i| vec![true, i % 2 == 0]).collect();
    let t = table(features, targets);
    let m = fit_forest(&t, ForestKind::Rf, &ForestHyper { n_estimators: 10, ..ForestHyper::rf_full() }, 1).unwrap();
    let p = m.predict_proba(&[vec![0.0, 0.0], vec![9.0, -9.0]]).unwrap();
    assert!(p.iter().all(|r| r[0] == 1.0));
    assert_eq!(m.constant, vec![true, false]);
}

#[test]
fn gbm_initialization() {
    let t = toy(100, 3, 9);
    let h = GbmHyper {
        n_estimators: 0,
        ..Default::default()
    };
    let m = fit_gbm(&t, &h).unwrap();
    let p = m.predict_proba(&[vec![0.0; 3]]).unwrap();
    for c in 0..2 {
        let y = t.class_targets(c);
        let rate = y.iter().filter(|&&v| v).count() as f64 / y.len() as f64;
        assert!((p[0][c] - rate).abs() < 1e-12);
    }
    let balanced = table(
        (0..10).map(|i| vec![i as f64]).collect(),
        (0..10).map(|i| vec![i % 2 == 0]).collect(),
    );
    let m = fit_gbm(&balanced, &h).unwrap();
    assert_eq!(m.classes[0].init, 0.0);
    assert_eq!(m.predict_proba(&[vec![3.0]]).unwrap(), vec![vec![0.5]]);
}

#[test]
fn gbm_separates_one_dimensional_data() {
    let t = table(
        (0..40).map(|i| vec![i as f64 * 0.1]).collect(),
        (0..40).map(|i| vec![i >= 23]).collect(),
    );
    let m = fit_gbm(
        &t,
        &GbmHyper {
            n_estimators: 50,
            ..Default::default()
        },
    )
    .unwrap();
    let p = m.predict_proba(&t.feature_rows()).unwrap();
    assert_eq!(auroc(&column(&p, 0), &t.class_targets(0)).unwrap(), 1.0);
    assert!(p.iter().all(|r| r[0] > 0.0 && r[0] < 1.0));
}

#[test]
fn gbm_deviance_never_increases() {
    let t = toy(150, 4, 10);
    let m = fit_gbm(
        &t,
        &GbmHyper {
            n_estimators: 60,
            ..Default::default()
        },
    )
    .unwrap();
    for c in 0..2 {
        let staged = m.staged_deviance(&t, c);
        assert_eq!(staged.len(), 61);
        for w in staged.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
        assert!(staged[60] < staged[0]);
    }
}

#[test]
fn gbm_constant_class() {
    let t = table(
        (0..6).map(|i| vec![i as f64]).collect(),
        (0..6).map(|i| vec![false, i < 3]).collect(),
    );
    let m = fit_gbm(&t, &GbmHyper { n_estimators: 5, ..Default::default() }).unwrap();
    assert!(m.classes[0].constant && !m.classes[1].constant);
    assert_eq!(m.predict_proba(&[vec![2.0]]).unwrap()[0][0], 0.0);
}

#[test]
fn knn_examples() {
    let t = toy(50, 3, 11);
    let x = t.feature_rows();
    let one = fit_knn(&t, 1).unwrap();
    let p = one.predict_proba(&x[..5]).unwrap();
    for i in 0..5 {
        for c in 0..2 {
            assert_eq!(p[i][c], if t.target(i, c) { 1.0 } else { 0.0 });
        }
    }
    let all = fit_knn(&t, 50).unwrap();
    let p = all.predict_proba(&[vec![100.0, 0.0, 0.0]]).unwrap();
    for c in 0..2 {
        let rate = t.class_targets(c).iter().filter(|&&v| v).count() as f64 / 50.0;
        assert_eq!(p[0][c], rate);
    }
    assert!(fit_knn(&t, 51).is_err());
    assert!(fit_knn(&t, 0).is_err());
    assert!(all.predict_proba(&[vec![0.0; 2]]).is_err());
}

#[test]
fn knn_fraction_and_ties() {
    // ten points at distance 1..10 on a line, the first seven positive
    let features: Vec<Vec<f64>> = (1..=12).map(|i| vec![i as f64]).collect();
    let targets: Vec<Vec<bool>> = (1..=12).map(|i| vec![i <= 7]).collect();
    let m = fit_knn(&table(features, targets), 10).unwrap();
    assert_eq!(m.predict_proba(&[vec![0.0]]).unwrap(), vec![vec![0.7]]);
    // equidistant rows: the lower index wins
    let t = table(vec![vec![1.0], vec![-1.0], vec![1.0]], vec![vec![true], vec![false], vec![false]]);
    let m = fit_knn(&t, 1).unwrap();
    assert_eq!(m.neighbors(&[0.0]), vec![0]);
}

#[test]
fn knn_is_order_free() {
    let t = toy(60, 4, 12);
    let probe = toy(20, 4, 13).feature_rows();
    let mut order: Vec<usize> = (0..60).collect();
    RngStream::new(1, 1).shuffle(&mut order);
    let permuted = t.subset(&order).unwrap();
    let a = fit_knn(&t, 10).unwrap().predict_proba(&probe).unwrap();
    let b = fit_knn(&permuted, 10).unwrap().predict_proba(&probe).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dimension_mismatch_is_an_error() {
    let t = toy(30, 3, 14);
    for kind in ClassifierKind::ALL {
        let mut h = kind.desk_hyper();
        if let ClassifierHyper::Forest(f) = &mut h {
            f.n_estimators = 3;
        }
        if let ClassifierHyper::Gbm(g) = &mut h {
            g.n_estimators = 3;
        }
        let m = Classifier::fit(kind, &t, &h, 0).unwrap();
        assert!(m.predict_proba(&[vec![0.0; 4]]).is_err());
    }
    assert!(Classifier::fit(ClassifierKind::Rf, &t, &ClassifierHyper::Knn { k: 3 }, 0).is_err());
}

fn forest_base() -> ClassifierHyper {
    ClassifierHyper::Forest(ForestHyper {
        n_estimators: 20,
        ..ForestHyper::desk(ForestKind::Xrt)
    })
}

#[test]
fn grid_of_one_returns_it() {
    let (fit, held) = toy(200, 4, 15).split_holdout(0.2, 1).unwrap();
    let grid = GridSpec {
        max_depth: vec![Some(3)],
        ..Default::default()
    };
    let r = grid_search(&fit, &held, &grid, ClassifierKind::Xrt, &forest_base(), 4).unwrap();
    assert_eq!(r.table.len(), 1);
    match r.best {
        ClassifierHyper::Forest(h) => assert_eq!((h.max_depth, h.n_estimators), (Some(3), 20)),
        _ => panic!("wrong family"),
    }
}

#[test]
fn grid_duplicates_do_not_matter() {
    let (fit, held) = toy(200, 4, 16).split_holdout(0.2, 1).unwrap();
    let plain = GridSpec {
        max_depth: vec![Some(2), Some(6)],
        min_samples_leaf: vec![1, 3],
        ..Default::default()
    };
    let dup = GridSpec {
        max_depth: vec![Some(6), Some(2), Some(6)],
        min_samples_leaf: vec![3, 1, 1],
        ..Default::default()
    };
    let a = grid_search(&fit, &held, &plain, ClassifierKind::Xrt, &forest_base(), 4).unwrap();
    let b = grid_search(&fit, &held, &dup, ClassifierKind::Xrt, &forest_base(), 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.table.len(), 4);
    let best = a.table.iter().map(|r| r.mean_auroc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(a.best_score, best);
}

#[test]
fn grid_ties_prefer_smaller_models() {
    // separable at 19.5 on feature 0: every candidate scores 1.0
    let make = |n: usize, step: f64, off: f64| {
        let xs: Vec<f64> = (0..n).map(|i| i as f64 * step + off).collect();
        table(
            xs.iter().enumerate().map(|(i, &x)| vec![x, ((i * 7) % 5) as f64]).collect(),
            xs.iter().map(|&x| vec![x > 19.5]).collect(),
        )
    };
    let fit = make(40, 1.0, 0.0);
    let held = make(20, 2.0, 0.25);
    let base = ClassifierHyper::Forest(ForestHyper {
        max_features: Some(2),
        bootstrap: false,
        ..ForestHyper::desk(ForestKind::Rf)
    });
    let grid = GridSpec {
        n_estimators: vec![30, 10],
        max_depth: vec![None, Some(5), Some(3)],
        ..Default::default()
    };
    let r = grid_search(&fit, &held, &grid, ClassifierKind::Rf, &base, 2).unwrap();
    assert!(r.table.iter().all(|row| row.mean_auroc == 1.0));
    match r.best {
        ClassifierHyper::Forest(h) => assert_eq!((h.n_estimators, h.max_depth), (10, Some(3))),
        _ => panic!("wrong family"),
    }
}

#[test]
fn knn_grid_search() {
    let (fit, held) = toy(200, 4, 17).split_holdout(0.25, 2).unwrap();
    let grid = GridSpec {
        k: vec![1, 10, 25],
        ..Default::default()
    };
    let r = grid_search(&fit, &held, &grid, ClassifierKind::Knn, &ClassifierHyper::Knn { k: 10 }, 0).unwrap();
    assert_eq!(r.table.len(), 3);
    assert_ne!(r.best, ClassifierHyper::Knn { k: 1 });
}

#[test]
fn model_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let t = toy(80, 3, 18);
    let probe = toy(10, 3, 19).feature_rows();
    let names = t.class_names().to_vec();
    for kind in ClassifierKind::ALL {
        let mut h = kind.desk_hyper();
        if let ClassifierHyper::Forest(f) = &mut h {
            f.n_estimators = 5;
        }
        if let ClassifierHyper::Gbm(g) = &mut h {
            g.n_estimators = 5;
        }
        let m = Classifier::fit(kind, &t, &h, 3).unwrap();
        let path = dir.path().join(format!("{kind}.lbm"));
        save_model(&path, &m, &names, 3, Some("abc")).unwrap();
        let (back, back_names) = load_model(&path, |digest| {
            assert_eq!(digest, "abc");
            Ok(t.clone())
        })
        .unwrap();
        assert_eq!(back_names, names);
        assert_eq!(back.predict_proba(&probe).unwrap(), m.predict_proba(&probe).unwrap());
        assert_eq!(back, m);
    }
    let bad = dir.path().join("bad.lbm");
    std::fs::write(&bad, b"LBM1garbage").unwrap();
    assert!(load_model(&bad, |_| Ok(t.clone())).is_err());
}
