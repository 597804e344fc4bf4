use phantom_parallel::reference::dense_forward;
use phantom_parallel::rng::{gaussian_matrix, Stream};
use phantom_parallel::training::{Dataset, LossReduction, Optimizer};
use phantom_parallel::{
    gen_dataset, train, Activation, CommCostModel, DenseFFN, EnergyRates, Error, Mode, PhantomConfig, PhantomModel,
    TrainConfig,
};

fn run(config: &TrainConfig, data: &Dataset) -> phantom_parallel::Result<phantom_parallel::TrainResult> {
    train(config, data, &CommCostModel::frontier(), &EnergyRates::frontier())
}

/// Targets produced by a phantom network of the same shape as the student.
fn phantom_teacher(config: PhantomConfig, samples: usize, seed: u64) -> Dataset {
    let teacher = PhantomModel::init(config, seed).unwrap();
    let dense = DenseFFN::from_phantom(&teacher).unwrap();
    let x = gaussian_matrix(config.n, samples, seed, Stream::Inputs);
    let (y, _) = dense_forward(&dense, &x).unwrap();
    Dataset {
        x,
        y,
        teacher: dense.layers[0].weight.clone(),
        seed,
    }
}

#[test]
fn identity_student_recovers_phantom_teacher() {
    let config = TrainConfig {
        mode: Mode::Pp,
        n: 64,
        p: 4,
        k: 8,
        layers: 1,
        activation: Activation::Identity,
        samples: 128,
        batch: 128,
        optimizer: Optimizer::Sgd,
        learning_rate: 0.1,
        loss_reduction: LossReduction::Mean,
        target_loss: Some(1e-6),
        max_epochs: 2000,
        seed: 1,
        ..TrainConfig::default()
    };
    let data = phantom_teacher(config.phantom(), config.samples, 99);
    let result = run(&config, &data).unwrap();
    assert!(
        result.converged,
        "final loss {} after {} epochs",
        result.final_loss, result.epochs_run
    );
}

#[test]
fn small_step_gives_monotone_loss() {
    for mode in [Mode::Pp, Mode::Tp] {
        let config = TrainConfig {
            mode,
            n: 32,
            p: 4,
            k: 2,
            samples: 64,
            batch: 64,
            learning_rate: 1e-4,
            loss_reduction: LossReduction::Mean,
            max_epochs: 40,
            ..TrainConfig::default()
        };
        let data = gen_dataset(32, 64, 0).unwrap();
        let losses: Vec<f64> = run(&config, &data).unwrap().loss_history.iter().map(|h| h.global_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{mode}: {losses:?}");
    }
}

#[test]
fn infinite_target_stops_after_one_epoch() {
    for mode in [Mode::Pp, Mode::Tp] {
        let config = TrainConfig {
            mode,
            target_loss: Some(f64::INFINITY),
            ..TrainConfig::default()
        };
        let data = gen_dataset(config.n, config.samples, 0).unwrap();
        let r = run(&config, &data).unwrap();
        assert_eq!((r.epochs_run, r.converged), (1, true));
    }
}

#[test]
fn default_config_trains_without_diverging() {
    let config = TrainConfig {
        max_epochs: 20,
        ..TrainConfig::default()
    };
    let data = gen_dataset(config.n, config.samples, 0).unwrap();
    let r = run(&config, &data).unwrap();
    let first = r.loss_history[0].global_loss;
    assert!(r.final_loss.is_finite() && r.final_loss < first);
}

#[test]
fn exploding_step_is_a_training_error() {
    let config = TrainConfig {
        activation: Activation::Identity,
        learning_rate: 1e6,
        max_epochs: 50,
        ..TrainConfig::default()
    };
    let data = gen_dataset(config.n, config.samples, 0).unwrap();
    assert!(matches!(run(&config, &data), Err(Error::Training { .. })));
}

#[test]
fn invalid_k_is_rejected_before_training() {
    let config = TrainConfig {
        k: 16,
        ..TrainConfig::default()
    };
    let data = gen_dataset(config.n, config.samples, 0).unwrap();
    assert!(matches!(run(&config, &data), Err(Error::Config { .. })));
}
