use nalgebra::DMatrix;
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surconfort::diffusion::*;

const TOL: f64 = 1e-6;

fn solver() -> SolverConfig {
    SolverConfig { tolerance: 1e-10, max_iterations: 10_000 }
}

fn dense(aff: &AffinityMatrix) -> DMatrix<f64> {
    let n = aff.len();
    DMatrix::from_fn(n, n, |i, j| aff.matrix.get(i, j))
}

fn one_hot(labels: &[Option<u8>]) -> DMatrix<f64> {
    DMatrix::from_fn(labels.len(), 4, |i, c| if labels[i] == Some(c as u8) { 1.0 } else { 0.0 })
}

/// `(I - delta D^-1/2 A D^-1/2)^-1 Y` by dense LU.
fn closed_form(aff: &AffinityMatrix, labels: &[Option<u8>], delta: f64) -> DMatrix<f64> {
    let a = dense(aff);
    let n = a.nrows();
    let d: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    let s = DMatrix::from_fn(n, n, |i, j| {
        if d[i] > 0.0 && d[j] > 0.0 {
            a[(i, j)] / (d[i] * d[j]).sqrt()
        } else {
            0.0
        }
    });
    let m = DMatrix::identity(n, n) - s * delta;
    m.lu().solve(&one_hot(labels)).unwrap()
}

/// Harmonic solution with labeled rows clamped: `Z_U = (D_UU - A_UU)^-1 A_UL Y_L`.
fn harmonic(aff: &AffinityMatrix, labels: &[Option<u8>]) -> DMatrix<f64> {
    let a = dense(aff);
    let n = a.nrows();
    let lab: Vec<usize> = (0..n).filter(|&i| labels[i].is_some()).collect();
    let unl: Vec<usize> = (0..n).filter(|&i| labels[i].is_none()).collect();
    let y = one_hot(labels);
    let mut z = y.clone();
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    let luu = DMatrix::from_fn(unl.len(), unl.len(), |p, q| {
        let (i, j) = (unl[p], unl[q]);
        if i == j { deg[i] - a[(i, i)] } else { -a[(i, j)] }
    });
    let rhs = DMatrix::from_fn(unl.len(), 4, |p, c| lab.iter().map(|&j| a[(unl[p], j)] * y[(j, c)]).sum());
    let zu = luu.lu().solve(&rhs).unwrap();
    for (p, &i) in unl.iter().enumerate() {
        for c in 0..4 {
            z[(i, c)] = zu[(p, c)];
        }
    }
    z
}

fn assert_close(got: &Array2<f64>, want: &DMatrix<f64>, scale: f64) {
    assert_eq!(got.dim(), (want.nrows(), want.ncols()));
    for i in 0..want.nrows() {
        for c in 0..want.ncols() {
            let diff = (got[[i, c]] * scale - want[(i, c)]).abs();
            assert!(diff <= TOL, "({i}, {c}): {} vs {}", got[[i, c]] * scale, want[(i, c)]);
        }
    }
}

fn path5() -> (AffinityMatrix, Vec<Option<u8>>) {
    let aff = AffinityMatrix::from_edges(5, (0..4).map(|i| (i, i + 1, 1.0))).unwrap();
    (aff, vec![Some(0), None, None, None, Some(3)])
}

fn random_graph(n: usize, seed: u64) -> (AffinityMatrix, Vec<Option<u8>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges: Vec<(usize, usize, f64)> = (0..n - 1).map(|i| (i, i + 1, rng.random_range(0.1..1.0))).collect();
    for i in 0..n {
        for j in (i + 2)..n {
            if rng.random_bool(0.3) {
                edges.push((i, j, rng.random_range(0.1..1.0)));
            }
        }
    }
    let labels = (0..n)
        .map(|i| (i % 3 == 0).then(|| rng.random_range(0..4u8)))
        .collect();
    (AffinityMatrix::from_edges(n, edges).unwrap(), labels)
}

#[test]
fn diffuse_on_path_matches_dense_inverse() {
    let (aff, labels) = path5();
    let z = diffuse(&aff, &labels, 0.9, &solver()).unwrap();
    assert_close(&z.scores, &closed_form(&aff, &labels, 0.9), 1.0);
}

#[test]
fn diffuse_on_random_graphs_matches_dense_inverse() {
    for seed in 0..20 {
        let n = 4 + (seed as usize % 7);
        let (aff, labels) = random_graph(n, seed);
        for delta in [0.1, 0.5, 0.9, 0.99] {
            let z = diffuse(&aff, &labels, delta, &solver()).unwrap();
            assert_close(&z.scores, &closed_form(&aff, &labels, delta), 1.0);
        }
    }
}

#[test]
fn default_solver_tolerance_is_enough_for_the_oracle() {
    for seed in 0..10 {
        let (aff, labels) = random_graph(10, seed + 100);
        let z = diffuse(&aff, &labels, 0.9, &SolverConfig::default()).unwrap();
        assert_close(&z.scores, &closed_form(&aff, &labels, 0.9), 1.0);
        let s = label_spreading(&aff, &labels, 0.9, &SolverConfig::default()).unwrap();
        assert_close(&s.scores, &(closed_form(&aff, &labels, 0.9) * 0.1), 1.0);
    }
}

#[test]
fn spreading_fixed_point_matches_closed_form() {
    let (aff, labels) = path5();
    let z = label_spreading(&aff, &labels, 0.9, &solver()).unwrap();
    assert_close(&z.scores, &(closed_form(&aff, &labels, 0.9) * 0.1), 1.0);
    for seed in 0..10 {
        let (aff, labels) = random_graph(8, seed);
        let z = label_spreading(&aff, &labels, 0.7, &solver()).unwrap();
        assert_close(&z.scores, &(closed_form(&aff, &labels, 0.7) * 0.3), 1.0);
    }
}

#[test]
fn propagation_on_star_matches_harmonic_solution() {
    // hub 0 with leaves 1..3; leaves 1 and 2 labeled
    let aff = AffinityMatrix::from_edges(4, [(0, 1, 1.0), (0, 2, 0.5), (0, 3, 0.25)]).unwrap();
    let labels = vec![None, Some(1), Some(2), None];
    let z = label_propagation(&aff, &labels, &solver()).unwrap();
    assert_close(&z.scores, &harmonic(&aff, &labels), 1.0);
    assert_eq!(z.predictions, vec![1, 1, 2, 1]);
}

#[test]
fn propagation_on_random_graphs_matches_harmonic_solution() {
    for seed in 0..20 {
        let (aff, labels) = random_graph(4 + (seed as usize % 7), seed + 50);
        let z = label_propagation(&aff, &labels, &solver()).unwrap();
        assert_close(&z.scores, &harmonic(&aff, &labels), 1.0);
    }
}

#[test]
fn propagation_keeps_labeled_rows_clamped() {
    let (aff, labels) = random_graph(9, 3);
    let z = label_propagation(&aff, &labels, &SolverConfig::default()).unwrap();
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            assert_eq!(z.predictions[i], *c);
            for k in 0..4 {
                assert_eq!(z.scores[[i, k]], if k == *c as usize { 1.0 } else { 0.0 });
            }
        }
    }
}

#[test]
fn node_linked_only_to_one_class_takes_it() {
    let aff = AffinityMatrix::from_edges(3, [(0, 2, 1.0), (1, 2, 0.3)]).unwrap();
    let labels = vec![Some(1), Some(1), None];
    assert_eq!(label_propagation(&aff, &labels, &solver()).unwrap().predictions[2], 1);
}

#[test]
fn single_edge_carries_the_label() {
    let aff = AffinityMatrix::from_edges(2, [(0, 1, 1.0)]).unwrap();
    let z = diffuse(&aff, &[Some(2), None], 0.9, &solver()).unwrap();
    assert_eq!(z.predictions, vec![2, 2]);
}

#[test]
fn small_delta_leaves_only_the_labels() {
    let (aff, labels) = random_graph(8, 9);
    let z = diffuse(&aff, &labels, 1e-9, &solver()).unwrap();
    let y = one_hot(&labels);
    for i in 0..8 {
        for c in 0..4 {
            assert!((z.scores[[i, c]] - y[(i, c)]).abs() < 1e-8);
        }
    }
}

#[test]
fn spreading_without_edges_returns_the_labels() {
    let aff = AffinityMatrix::from_edges(4, []).unwrap();
    let labels = vec![Some(3), None, Some(1), None];
    let z = label_spreading(&aff, &labels, 0.9, &solver()).unwrap();
    assert_eq!(z.predictions[0], 3);
    assert_eq!(z.predictions[2], 1);
    assert!(z.unreached[1] && z.unreached[3]);
}

#[test]
fn symmetric_tie_goes_to_lower_class() {
    let aff = AffinityMatrix::from_edges(3, [(0, 2, 1.0), (1, 2, 1.0)]).unwrap();
    let labels = vec![Some(1), Some(0), None];
    let z = label_spreading(&aff, &labels, 0.5, &solver()).unwrap();
    assert_eq!(z.scores[[2, 0]], z.scores[[2, 1]]);
    assert_eq!(z.predictions[2], 0);
}

#[test]
fn unreached_component_falls_back_to_majority() {
    let aff = AffinityMatrix::from_edges(5, [(0, 1, 1.0), (3, 4, 1.0)]).unwrap();
    let labels = vec![Some(2), Some(2), Some(0), None, None];
    let z = diffuse(&aff, &labels, 0.9, &solver()).unwrap();
    assert_eq!(z.unreached, vec![false, false, false, true, true]);
    assert_eq!(z.predictions[3], 2);
    assert_eq!(z.predictions[4], 2);
}

#[test]
fn diffusion_needs_a_label_and_valid_delta() {
    let (aff, _) = path5();
    assert!(diffuse(&aff, &[None; 5], 0.9, &solver()).is_err());
    let (aff, labels) = path5();
    assert!(diffuse(&aff, &labels, 1.0, &solver()).is_err());
    assert!(label_spreading(&aff, &labels, 0.0, &solver()).is_err());
}

#[test]
fn natural_knn_of_three_one_hot_points() {
    let x = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let aff = natural_affinity(&x, 1).unwrap();
    // all pairs sit at distance sqrt(2), so every node picks its lowest-index
    // neighbour: 0 -> 1, 1 -> 0, 2 -> 0; sigma = sqrt(2) gives exp(-1/2)
    let w = (-0.5f64).exp();
    let want = [[0.0, w, w], [w, 0.0, 0.0], [w, 0.0, 0.0]];
    for i in 0..3 {
        for j in 0..3 {
            assert!((aff.matrix.get(i, j) - want[i][j]).abs() < 1e-15, "({i}, {j})");
        }
    }
}

#[test]
fn natural_affinity_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Array2::from_shape_simple_fn((40, 5), || rng.random_range(-1.0..1.0));
    let aff = natural_affinity(&x, 4).unwrap();
    assert!(aff.matrix.is_symmetric(0.0));
    for (i, j, w) in aff.matrix.entries() {
        assert_ne!(i, j);
        assert!(w > 0.0 && w <= 1.0);
    }
    for i in 0..40 {
        assert!(aff.matrix.row(i).count() >= 4);
    }
    assert!(natural_affinity(&x.slice(ndarray::s![..4, ..]).to_owned(), 4).is_err());
}

#[test]
fn duplicate_points_get_unit_weight() {
    let x = array![[0.0, 1.0], [0.0, 1.0], [3.0, 0.0], [2.0, 2.0]];
    let aff = natural_affinity(&x, 1).unwrap();
    assert_eq!(aff.matrix.get(0, 1), 1.0);
}

#[test]
fn descriptor_affinity_entries() {
    let v = array![[1.0, 0.0], [0.5, 0.5], [-1.0, 0.0], [0.0, 1.0]];
    let aff = descriptor_affinity(&v, 3, 3.0).unwrap();
    assert!(aff.matrix.is_symmetric(0.0));
    for i in 0..4 {
        assert_eq!(aff.matrix.get(i, i), 0.0);
    }
    // 0 and 1 pick each other, so both directions add up
    assert_eq!(aff.matrix.get(0, 1), 2.0 * 0.125);
    assert_eq!(aff.matrix.get(0, 2), 0.0);
    assert_eq!(aff.matrix.get(0, 3), 0.0);
}
