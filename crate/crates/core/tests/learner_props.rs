mod common;

use fedsim_core::learner::{
    dataset_loss, deserialize_model, evaluate, generate_dataset, init_model, loss_and_gradient,
    param_count, partition_even, serialize_model, train_local, train_local_observed, Dataset, LearnerError,
    ModelState, TrainConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arch_strategy() -> impl Strategy<Value = Vec<usize>> {
    (1..6usize, prop::collection::vec(1..6usize, 0..3), 2..5usize).prop_map(|(i, h, o)| {
        let mut a = vec![i];
        a.extend(h);
        a.push(o);
        a
    })
}

fn random_batch(arch: &[usize], n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = (0..n)
        .map(|_| (0..arch[0]).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let ys = (0..n).map(|_| rng.gen_range(0..*arch.last().unwrap())).collect();
    (xs, ys)
}

fn to_dataset(xs: &[Vec<f64>], ys: &[usize], classes: usize) -> Dataset {
    Dataset::new(xs.concat(), xs[0].len(), ys.to_vec(), classes).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn analytic_gradient_matches_finite_differences(
        arch in arch_strategy(),
        seed in any::<u64>(),
        n in 1..6usize,
    ) {
        // Random biases keep pre-activations off the ReLU kink at zero.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..param_count(&arch)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let model = ModelState::from_parts(arch.clone(), params).unwrap();
        let (xs, ys) = random_batch(&arch, n, seed ^ 0x5eed);
        let data = to_dataset(&xs, &ys, *arch.last().unwrap());
        let idx: Vec<usize> = (0..n).collect();
        let (loss, grad) = loss_and_gradient(&model, &data, &idx).unwrap();
        prop_assert!((loss - common::naive_loss(&arch, model.params(), &xs, &ys)).abs() < 1e-12);
        let numeric = common::numeric_gradient(&arch, model.params(), &xs, &ys, 1e-5);
        let err = common::relative_error(&grad, &numeric);
        prop_assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn codec_round_trip(arch in arch_strategy(), seed in any::<u64>()) {
        let model = init_model(&arch, seed).unwrap();
        let bytes = serialize_model(&model);
        prop_assert_eq!(deserialize_model(&bytes).unwrap(), model);
        prop_assert!(deserialize_model(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn partition_is_even_and_complete(n in 10..200usize, workers in 1..10usize, seed in any::<u64>()) {
        prop_assume!(workers <= n);
        let data = generate_dataset(seed, n, 3, 2, 0.5).unwrap();
        let shards = partition_even(&data, workers, seed).unwrap();
        let sizes: Vec<usize> = shards.iter().map(Dataset::len).collect();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}

#[test]
fn training_is_deterministic() {
    let data = generate_dataset(3, 200, 8, 4, 0.4).unwrap();
    let model = init_model(&[8, 6, 4], 3).unwrap();
    let cfg = TrainConfig {
        seed: 11,
        ..TrainConfig::default()
    };
    let a = train_local(&model, &data, &cfg).unwrap();
    let b = train_local(&model, &data, &cfg).unwrap();
    assert_eq!(serialize_model(&a), serialize_model(&b));
    let other = train_local(&model, &data, &TrainConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a, other);
}

#[test]
fn four_point_problem_is_learned_perfectly() {
    let xs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]];
    let data = to_dataset(&xs, &[0, 1, 2, 3], 4);
    let model = init_model(&[2, 8, 4], 1).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.5,
        epochs: 300,
        batch_size: 4,
        seed: 1,
    };
    let trained = train_local(&model, &data, &cfg).unwrap();
    assert_eq!(evaluate(&trained, &data).unwrap().accuracy, 1.0);
}

#[test]
fn full_batch_loss_decreases_on_noiseless_data() {
    let data = generate_dataset(5, 100, 6, 3, 0.0).unwrap();
    let model = init_model(&[6, 5, 3], 5).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.05,
        epochs: 40,
        batch_size: data.len(),
        seed: 0,
    };
    let mut losses = vec![dataset_loss(&model, &data).unwrap()];
    train_local_observed(&model, &data, &cfg, |r| {
        losses.push(dataset_loss(r.model, &data).unwrap());
    })
    .unwrap();
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "loss rose from {} to {}", w[0], w[1]);
    }
}

#[test]
fn divergent_training_is_reported() {
    let data = generate_dataset(1, 50, 4, 2, 0.3).unwrap();
    let model = ModelState::from_parts(vec![4, 2], vec![f64::MAX / 2.0; 10]).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train_local(&model, &data, &cfg),
        Err(LearnerError::NonFiniteLoss { epoch: 0 })
    ));
}
