use mmvm_core::eval::{
    auroc, cap_rows, label_subsample, rf_predict, rf_train, DecisionTree, RandomForest, RfConfig, TreeNode,
};
use mmvm_core::seed::rng;
use mmvm_core::{Error, Matrix};
use proptest::prelude::*;
use rand::Rng;

fn pairwise_auroc(s: &[f64], y: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| y[i] == 1) {
        for j in (0..s.len()).filter(|&j| y[j] == 0) {
            pairs += 1.0;
            wins += if s[i] > s[j] {
                1.0
            } else if s[i] == s[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

#[test]
fn rank_formula_matches_pair_enumeration() {
    let mut r = rng(1);
    for case in 0..200 {
        let n = r.random_range(2..80);
        // Coarse scores force ties.
        let levels = if case % 2 == 0 { 5 } else { 1000 };
        let s: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
        let mut y: Vec<u8> = (0..n).map(|_| u8::from(r.random::<f64>() < 0.4)).collect();
        y[0] = 0;
        y[1] = 1;
        let got = auroc(&s, &y).unwrap().value;
        assert!((got - pairwise_auroc(&s, &y)).abs() < 1e-12, "case {case}");
    }
}

proptest! {
    #[test]
    fn auroc_invariant_under_increasing_transform(
        s in prop::collection::vec(-3.0f64..3.0, 10..50),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let mut y: Vec<u8> = s.iter().map(|_| r.random_range(0..2)).collect();
        y[0] = 0;
        y[1] = 1;
        let t: Vec<f64> = s.iter().map(|v| (2.0 * v).exp() + v.powi(3)).collect();
        prop_assert_eq!(auroc(&s, &y).unwrap().value, auroc(&t, &y).unwrap().value);
    }
}

#[test]
fn auroc_degenerate_inputs() {
    assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::Degenerate(_))));
    assert!(auroc(&[0.1], &[0, 1]).is_err());
    assert!(auroc(&[0.1, 0.2], &[0, 2]).is_err());
}

fn random_matrix(r: &mut impl Rng, n: usize, d: usize) -> Matrix {
    Matrix::new(n, d, (0..n * d).map(|_| r.random::<f64>()).collect()).unwrap()
}

#[test]
fn random_labels_give_chance_auroc() {
    let mut r = rng(2);
    let cfg = RfConfig { n_estimators: 30, max_depth: 6 };
    let mut total = 0.0;
    for rep in 0..20 {
        let x = random_matrix(&mut r, 300, 4);
        let y: Vec<u8> = (0..300).map(|_| r.random_range(0..2)).collect();
        let xt = random_matrix(&mut r, 300, 4);
        let yt: Vec<u8> = (0..300).map(|_| r.random_range(0..2)).collect();
        let f = rf_train(&x, &y, &cfg, rep).unwrap();
        let a = auroc(&rf_predict(&f, &xt).unwrap(), &yt).unwrap().value;
        assert!((0.4..=0.6).contains(&a), "resample {rep}: {a}");
        total += a;
    }
    assert!((total / 20.0 - 0.5).abs() < 0.03);
}

#[test]
fn training_auroc_grows_with_depth() {
    let mut r = rng(3);
    let x = random_matrix(&mut r, 400, 3);
    let y: Vec<u8> = (0..400).map(|i| u8::from(x.get(i, 0) + x.get(i, 1) > 1.0)).collect();
    let mut last = 0.0;
    for depth in 1..=3 {
        let f = rf_train(&x, &y, &RfConfig { n_estimators: 20, max_depth: depth }, 7).unwrap();
        let a = auroc(&rf_predict(&f, &x).unwrap(), &y).unwrap().value;
        assert!(a >= last, "depth {depth}: {a} < {last}");
        assert!(f.trees.iter().all(|t| t.depth() <= depth));
        last = a;
    }
    assert!(last > 0.9);
}

#[test]
fn forest_contracts() {
    let mut r = rng(4);
    let x = random_matrix(&mut r, 100, 5);
    let y: Vec<u8> = (0..100).map(|i| u8::from(x.get(i, 2) > 0.5)).collect();
    let cfg = RfConfig { n_estimators: 7, max_depth: 4 };
    let f = rf_train(&x, &y, &cfg, 11).unwrap();
    assert_eq!(f, rf_train(&x, &y, &cfg, 11).unwrap());
    assert_ne!(f, rf_train(&x, &y, &cfg, 12).unwrap());

    let scores = rf_predict(&f, &x).unwrap();
    for (i, s) in scores.iter().enumerate() {
        let brute = f.trees.iter().map(|t| t.predict_row(x.row(i))).sum::<f64>() / f.trees.len() as f64;
        assert_eq!(*s, brute);
        assert!((0.0..=1.0).contains(s));
    }
    let twin = RandomForest { trees: vec![f.trees[0].clone(); 3], ..f.clone() };
    let single = RandomForest { trees: vec![f.trees[0].clone()], ..f.clone() };
    assert_eq!(rf_predict(&twin, &x).unwrap(), rf_predict(&single, &x).unwrap());
    assert!(rf_predict(&f, &random_matrix(&mut r, 3, 4)).is_err());
    assert!(rf_train(&x, &[1; 100], &cfg, 0).is_err());
}

#[test]
fn leaf_tree_prediction() {
    let tree = DecisionTree { nodes: vec![TreeNode::Leaf { fraction: 0.3 }] };
    assert_eq!(tree.predict_row(&[5.0, -1.0]), 0.3);
}

#[test]
fn nested_subsets() {
    let a5 = label_subsample(100, 5, 9).unwrap();
    assert_eq!(a5, label_subsample(100, 5, 9).unwrap());
    let a10 = label_subsample(100, 10, 9).unwrap();
    assert!(a5.iter().all(|i| a10.contains(i)));
    assert_eq!(label_subsample(100, 100, 9).unwrap(), (0..100).collect::<Vec<_>>());
    assert!(label_subsample(10, 11, 9).is_err());
    let capped = cap_rows(1000, 50, 1);
    assert_eq!(capped.len(), 50);
    assert!(capped.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(cap_rows(10, 50, 1), (0..10).collect::<Vec<_>>());
}
