use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surconfort::nn::*;

/// Labels from a random linear map, so a linear classifier can fit them.
/// Points whose top two scores are closer than `margin` are redrawn.
fn separable(n: usize, d: usize, seed: u64, margin: f64) -> DenseSource {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Array2::from_shape_simple_fn((d, 4), || rng.random_range(-1.0..1.0));
    let mut x = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        loop {
            let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut scores: Vec<f64> = (0..4).map(|c| (0..d).map(|k| row[k] * w[[k, c]]).sum()).collect();
            let best = argmax(&scores);
            let top = scores[best];
            scores[best] = f64::NEG_INFINITY;
            if top - scores[argmax(&scores)] >= margin {
                x.row_mut(i).assign(&ndarray::Array1::from(row));
                labels.push(Some(best as u8));
                break;
            }
        }
    }
    DenseSource::new(x, labels)
}

fn small_cfg() -> TrainConfig {
    TrainConfig { hidden: [32, 32, 16], ..Default::default() }
}

#[test]
fn separable_toy_set_is_fit_exactly() {
    let src = separable(1000, 6, 1, 0.25);
    let ids: Vec<usize> = (0..src.len()).collect();
    let cfg = TrainConfig { patience: 200, ..small_cfg() };
    let model = MlpModel::new(6, cfg.hidden, 4, 0).unwrap();
    let (model, log) = fit(model, &src, &ids, &[], &cfg, |m, b| supervised_step(m, &src, b)).unwrap();
    assert_eq!(accuracy(&model, &src, &ids).unwrap(), 1.0);
    assert!(log.train_loss.len() <= 200);
}

#[test]
fn returned_model_has_the_best_logged_validation_accuracy() {
    let src = separable(300, 6, 2, 0.0);
    let ids: Vec<usize> = (0..src.len()).collect();
    let cfg = TrainConfig { max_epochs: 40, patience: 5, seed: 3, ..small_cfg() };
    let (train, val) = holdout_validation(&ids, cfg.validation_fraction, cfg.seed);
    assert_eq!(val.len(), 30);
    let model = MlpModel::new(6, cfg.hidden, 4, cfg.seed).unwrap();
    let (model, log) = fit(model, &src, &train, &val, &cfg, |m, b| supervised_step(m, &src, b)).unwrap();
    let max = log.val_accuracy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(log.best_val_accuracy(), max);
    assert_eq!(accuracy(&model, &src, &val).unwrap(), max);
    assert_eq!(log.val_accuracy.len(), log.train_loss.len());
    if log.stop_reason == StopReason::Patience {
        assert_eq!(log.val_accuracy.len(), log.best_epoch + 1 + cfg.patience);
    }
}

#[test]
fn seeded_training_is_reproducible() {
    let src = separable(100, 5, 4, 0.0);
    let ids: Vec<usize> = (0..src.len()).collect();
    let cfg = TrainConfig { max_epochs: 10, seed: 7, ..small_cfg() };
    let run = || {
        let model = MlpModel::new(5, cfg.hidden, 4, cfg.seed).unwrap();
        fit(model, &src, &ids, &[], &cfg, |m, b| supervised_step(m, &src, b)).unwrap()
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn duplicate_rows_get_equal_input_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut x = Array2::from_shape_simple_fn((5, 8), || rng.random_range(-1.0..1.0));
    let dup = x.row(1).to_owned();
    x.row_mut(3).assign(&dup);
    let mut model = MlpModel::new(8, [16, 16, 8], 4, 2).unwrap();
    let (out, cache) = model.forward_train(&x).unwrap();
    let targets: Vec<Target> = [0, 1, 2, 1, 3]
        .iter()
        .enumerate()
        .map(|(row, &class)| Target { row, class, weight: 1.0 })
        .collect();
    let (_, grad) = cross_entropy_term(&out, &targets, 0.2).unwrap();
    let g = model.backward(&cache, &grad, None, true).unwrap();
    let gi = g.input.unwrap();
    assert_eq!(gi.row(1), gi.row(3));
    assert_eq!(out.probs.row(1), out.probs.row(3));
    assert_eq!(out.descriptors.row(1), out.descriptors.row(3));
}

#[test]
fn predictions_are_argmax_of_inference_probabilities() {
    let src = separable(50, 7, 6, 0.0);
    let ids: Vec<usize> = (0..50).collect();
    for seed in 0..5 {
        let model = MlpModel::new(7, [16, 16, 8], 4, seed).unwrap();
        let p = predict_proba(&model, &src, &ids).unwrap();
        let pred = predict(&model, &src, &ids).unwrap();
        for (r, &c) in p.rows().into_iter().zip(&pred) {
            assert!((r.sum() - 1.0).abs() <= 1e-12);
            assert!(r.iter().all(|&v| v >= 0.0));
            assert_eq!(c as usize, argmax(r.as_slice().unwrap()));
        }
    }
}

#[test]
fn argmax_examples() {
    assert_eq!(argmax(&[0.1, 0.6, 0.2, 0.1]), 1);
    assert_eq!(argmax(&[0.25; 4]), 0);
    assert!((cross_entropy(&[0.25; 4], 2) - 4f64.ln()).abs() < 1e-15);
    assert_eq!(cross_entropy(&[0.0, 1.0, 0.0, 0.0], 1), 0.0);
    assert!((cross_entropy(&[0.0, 1.0, 0.0, 0.0], 0) - 27.631021115928547).abs() < 1e-9);
}

#[test]
fn first_adam_step_moves_each_coordinate_by_the_learning_rate() {
    let mut adam = AdamState::new(AdamConfig::default());
    let mut p = vec![1.0, -2.0, 0.5];
    let g = vec![3.0, -0.001, 1e-3];
    adam.step(vec![&mut p], vec![&g]).unwrap();
    let moved: Vec<f64> = [1.0 - p[0], -2.0 - p[1], 0.5 - p[2]].to_vec();
    assert!((moved[0] - 1e-4).abs() < 1e-9);
    assert!((moved[1] + 1e-4).abs() < 1e-8);
    assert!((moved[2] - 1e-4).abs() < 1e-7);
}

#[test]
fn empty_labeled_set_is_an_error() {
    let src = separable(10, 3, 0, 0.0);
    let model = MlpModel::new(3, [4, 4, 4], 4, 0).unwrap();
    assert!(fit(model, &src, &[], &[], &small_cfg(), |m, b| supervised_step(m, &src, b)).is_err());
}
