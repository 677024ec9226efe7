use detention::datagen::{generate_dataset, GenSpec, SplitFractions};
use detention::dsrae::{
    detention_score, loss_dsr, score_samples, total_loss, train_epoch, Architecture, Hyper, Mode, ModelParams,
    Sample,
};
use detention::numerics::{matvec_transposed, Tensor};
use detention::schema::{fit_on_train, Split};
use detention::ModelParams64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn data(n: usize, rate: f64, delta: f64, seed: u64) -> (Vec<Sample<f64>>, Vec<Sample<f64>>) {
    let records = generate_dataset(&GenSpec {
        n_total: n,
        detention_rate: rate,
        separability: delta,
        seed,
        split_fractions: SplitFractions::default(),
    })
    .unwrap();
    let stats = fit_on_train(&records).unwrap();
    let all = Sample::from_records(&records, &stats).unwrap();
    let (train, rest): (Vec<_>, Vec<_>) = all.into_iter().zip(&records).partition(|(_, r)| r.split == Split::Train);
    (train.into_iter().map(|x| x.0).collect(), rest.into_iter().map(|x| x.0).collect())
}

fn params(mode: Mode, seed: u64) -> ModelParams64 {
    ModelParams::init(&Architecture::default(), &Hyper::default(), mode, seed).unwrap()
}

#[test]
fn zero_lr_leaves_params_bit_identical() {
    let (train, _) = data(600, 0.1, 1.0, 1);
    let mut p = params(Mode::Dsr, 2);
    let before: Vec<u64> = p.flat_values().iter().map(|v| v.to_bits()).collect();
    train_epoch(&mut p, &train, 0.0, 64, 5).unwrap();
    let after: Vec<u64> = p.flat_values().iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after);
}

#[test]
fn same_seed_same_epoch() {
    let (train, _) = data(600, 0.1, 1.0, 1);
    let mut a = params(Mode::Dsr, 2);
    let mut b = a.clone();
    let sa = train_epoch(&mut a, &train, 1e-3, 64, 5).unwrap();
    let sb = train_epoch(&mut b, &train, 1e-3, 64, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    let mut c = params(Mode::Dsr, 2);
    train_epoch(&mut c, &train, 1e-3, 64, 6).unwrap();
    assert_ne!(a, c);
}

#[test]
fn small_step_decreases_batch_loss() {
    let (train, _) = data(400, 0.1, 1.0, 3);
    for mode in [Mode::Dsr, Mode::Rsr] {
        let p = params(mode, 4);
        let batch: Vec<Sample<f64>> = train.iter().take(64).cloned().collect();
        let before = total_loss(&p, &batch, 11).unwrap();
        let mut q = p.clone();
        q.add_scaled(-1e-6, &before.grads);
        let after = total_loss(&q, &batch, 11).unwrap();
        assert!(after.value < before.value, "{mode:?}: {} !< {}", after.value, before.value);
    }
}

#[test]
fn non_finite_input_aborts_without_update() {
    let (mut train, _) = data(300, 0.1, 1.0, 3);
    train[5].grid.data_mut()[2] = f64::NAN;
    let mut p = params(Mode::Dsr, 4);
    let before = p.clone();
    assert!(train_epoch(&mut p, &train, 1e-3, 64, 0).is_err());
    assert_eq!(p, before);
}

#[test]
fn diverging_training_is_reported() {
    let (train, _) = data(300, 0.1, 1.0, 3);
    let mut p = params(Mode::Dsr, 4);
    let err = train_epoch(&mut p, &train, 1e30, 64, 0).unwrap_err();
    assert!(err.to_string().contains("diverged"), "{err}");
}

#[test]
fn scores_are_per_sample() {
    let (train, _) = data(300, 0.1, 1.0, 3);
    let p = params(Mode::Dsr, 4);
    let all = score_samples(&p, &train).unwrap();
    let mut reversed: Vec<Sample<f64>> = train.clone();
    reversed.reverse();
    let mut back = score_samples(&p, &reversed).unwrap();
    back.reverse();
    assert_eq!(all, back);
    for (s, x) in all.iter().zip(&train).step_by(37) {
        assert_eq!(&detention_score(&p, x).unwrap(), s);
        assert!((0.0..=1.0).contains(&s.score));
    }
}

#[test]
fn trained_model_separates_classes() {
    let (train, test) = data(3000, 0.2, 2.0, 5);
    let mut p = params(Mode::Dsr, 6);
    for e in 0..8 {
        train_epoch(&mut p, &train, 1e-4, 64, e).unwrap();
    }
    let scores = score_samples(&p, &test).unwrap();
    let mean = |det: bool| {
        let v: Vec<f64> = scores.iter().zip(&test).filter(|(_, s)| s.detained == det).map(|(x, _)| x.score).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(true) - mean(false) > 0.0, "gap {}", mean(true) - mean(false));
}

#[test]
fn orthogonality_defect_shrinks() {
    let (train, _) = data(1500, 0.2, 2.0, 7);
    let mut p = params(Mode::Dsr, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for v in p.regular.projection.data_mut() {
        *v = *v * 1.3 + rng.random_range(-0.1..0.1);
    }
    let defect = |p: &ModelParams64| ModelParams64::orthogonality_defect(&p.regular.projection);
    let mut history = vec![defect(&p)];
    for e in 0..30 {
        train_epoch(&mut p, &train, 1e-4, 64, e).unwrap();
        history.push(defect(&p));
    }
    let rises = history.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(history[30] <= history[0], "{history:?}");
    assert!(rises <= 2, "{history:?}");
}

#[test]
fn projection_algebra() {
    let p = params(Mode::Dsr, 9);
    let a = &p.regular.projection;
    assert!(ModelParams64::orthogonality_defect(a) < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let latents: Vec<Tensor<f64>> = (0..5)
        .map(|_| {
            let coeffs = Tensor::vector(&(0..8).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>()).unwrap();
            matvec_transposed(a, &coeffs).unwrap()
        })
        .collect();
    let mask = [true; 5];
    assert!(loss_dsr(a, &latents, 1.0, 1.0, 0.0, &mask).unwrap() < 1e-12);
    assert!(loss_dsr(a, &latents, 1.0, 0.0, 1.0, &mask).unwrap() < 1e-12);
    let zero = Tensor::zeros(&[8, 32]);
    let mut unit = vec![0.0; 32];
    unit[7] = 1.0;
    let value = loss_dsr(&zero, &[Tensor::vector(&unit).unwrap()], 1.0, 1.0, 1.0, &[true]).unwrap();
    assert_eq!(value, 9.0);
}
