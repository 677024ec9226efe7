use std::fs;
use std::path::Path;

use detention::datagen::{downsample_regular, generate_dataset, regular_count_for, resample_to_prevalence, GenSpec, SplitFractions};
use detention::dsrae::{load_checkpoint, score_samples, train_epoch, Architecture, Hyper, Mode, Sample};
use detention::metrics::roc_auc;
use detention::progressive::{
    build_schedule, cap_detained, run_all, run_phase, PhaseSchedule, ScheduleOverrides, TrainConfig, DEFAULT_LRS,
    DEFAULT_RHOS,
};
use detention::schema::{fit_on_train, Split};
use detention::ModelParams64;

fn data(n: usize, rate: f64, seed: u64) -> (Vec<Sample<f64>>, Vec<Sample<f64>>) {
    let records = generate_dataset(&GenSpec {
        n_total: n,
        detention_rate: rate,
        separability: 2.0,
        seed,
        split_fractions: SplitFractions::default(),
    })
    .unwrap();
    let stats = fit_on_train(&records).unwrap();
    let pick = |split: Split| {
        let subset: Vec<_> = records.iter().filter(|r| r.split == split).cloned().collect();
        Sample::from_records(&subset, &stats).unwrap()
    };
    (pick(Split::Train), pick(Split::Val))
}

/// Exactly `n_det` detained and `n_reg` regulars drawn from a generated set.
fn exact_counts(n_det: usize, n_reg: usize, seed: u64) -> Vec<Sample<f64>> {
    let n = 1.6 * (n_reg as f64 / 0.7 + n_det as f64 / 0.3);
    let (train, _) = data(n as usize, 0.3, seed);
    let det = train.iter().filter(|s| s.detained).take(n_det);
    let reg = train.iter().filter(|s| !s.detained).take(n_reg);
    let out: Vec<_> = det.chain(reg).cloned().collect();
    assert_eq!(out.len(), n_det + n_reg);
    out
}

fn schedule(seed: u64) -> PhaseSchedule {
    build_schedule(&ScheduleOverrides {
        seed: Some(seed),
        ..Default::default()
    })
    .unwrap()
}

fn file_bytes(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap()
}

#[test]
fn last_phase_balances_classes() {
    let train = exact_counts(100, 500, 1);
    let params = ModelParams64::init(&Architecture::default(), &Hyper::default(), Mode::Dsr, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let phase = &schedule(3).phases[5];
    let (_, result) = run_phase(&params, &train, &[], phase, 64, &dir.path().join("p6.ckpt")).unwrap();
    assert_eq!((result.n_detained, result.n_regular), (100, 100));
    assert_eq!(result.epochs.len(), 5);
    assert!(result.epochs.iter().all(|e| e.val_auc.is_none()));
}

#[test]
fn phase_datasets_follow_proportions() {
    let train = exact_counts(100, 5600, 2);
    let s = schedule(4);
    let expected = [5487, 1692, 708, 310, 172, 100];
    for (phase, want) in s.phases.iter().zip(expected) {
        let d = downsample_regular(&train, phase.rho, phase.seed).unwrap();
        let det = d.iter().filter(|x| x.detained).count();
        assert_eq!((det, d.len() - det), (100, want));
        assert_eq!(want, regular_count_for(100, phase.rho));
    }
    // detained are capped so the first phase is reachable
    let capped = cap_detained(&exact_counts(120, 5600, 2), &s, 9);
    let det = capped.iter().filter(|x| x.detained).count();
    assert_eq!(det, 102);
    assert!(regular_count_for(det, DEFAULT_RHOS[0]) <= 5600);
    assert!(regular_count_for(det + 1, DEFAULT_RHOS[0]) > 5600);
}

#[test]
fn run_all_chains_deterministically() {
    let (train, val) = data(2500, 0.1, 3);
    let config = TrainConfig {
        seed: 5,
        schedule: ScheduleOverrides {
            seed: Some(5),
            lr: Some(vec![1e-3, 1e-3, 1e-3, 1e-4, 1e-4, 1e-5]),
            ..Default::default()
        },
        ..Default::default()
    };
    let s = build_schedule(&config.schedule).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (final_a, results) = run_all(&train, &val, &s, &config, None, a.path()).unwrap();
    let (final_b, _) = run_all(&train, &val, &s, &config, None, b.path()).unwrap();
    assert_eq!(final_a, final_b);
    assert_eq!(results.len(), 6);

    let mut seen = Vec::new();
    for r in &results {
        let bytes = file_bytes(&r.checkpoint);
        assert_eq!(bytes, file_bytes(&b.path().join(format!("phase{}.ckpt", r.index))));
        assert!(!seen.contains(&bytes), "phase {} repeats an earlier checkpoint", r.index);
        seen.push(bytes);
        assert_eq!(r.n_detained, results[0].n_detained);
        assert_eq!(r.n_regular, regular_count_for(r.n_detained, r.rho));
        assert!(r.final_val_auc().is_some());
    }
    assert!(results.windows(2).all(|w| w[1].n_regular < w[0].n_regular));
    let capped = cap_detained(&train, &s, config.seed);
    assert_eq!(capped.iter().filter(|x| x.detained).count(), results[0].n_detained);

    // rerunning phase k+1 from the phase-k file reproduces the phase k+1 file
    for k in 1..6 {
        let start: ModelParams64 = load_checkpoint(&results[k - 1].checkpoint).unwrap();
        let out = a.path().join(format!("again{}.ckpt", k + 1));
        run_phase(&start, &capped, &val, &s.phases[k], 64, &out).unwrap();
        assert_eq!(file_bytes(&out), file_bytes(&results[k].checkpoint));
    }
    assert_eq!(load_checkpoint::<f64>(&results[5].checkpoint).unwrap(), final_a);

    let csv = fs::read_to_string(a.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("phase,epoch,loss,val_ap,val_auc"));
    assert_eq!(lines.count(), 30);
}

#[test]
fn validation_data_never_changes_training() {
    let (train, val) = data(1500, 0.1, 6);
    let config = TrainConfig {
        seed: 1,
        ..Default::default()
    };
    let s = schedule(1);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (with_val, _) = run_all(&train, &val, &s, &config, None, a.path()).unwrap();
    let other: Vec<_> = val.iter().rev().take(40).cloned().collect();
    let (with_other, _) = run_all(&train, &other, &s, &config, None, b.path()).unwrap();
    assert_eq!(with_val, with_other);
}

#[test]
fn failed_phase_keeps_previous_checkpoint() {
    let train = exact_counts(100, 5600, 7);
    let dir = tempfile::tempdir().unwrap();
    let s = schedule(2);
    let params = ModelParams64::init(&Architecture::default(), &Hyper::default(), Mode::Dsr, 0).unwrap();
    let first = dir.path().join("phase1.ckpt");
    let (after1, _) = run_phase(&params, &train, &[], &s.phases[0], 64, &first).unwrap();
    let saved = file_bytes(&first);

    let mut bad = s.phases[1].clone();
    bad.lr = 1e30;
    assert!(run_phase(&after1, &train, &[], &bad, 64, &first).is_err());
    assert_eq!(file_bytes(&first), saved);
    let second = dir.path().join("phase2.ckpt");
    assert!(run_phase(&after1, &train, &[], &bad, 64, &second).is_err());
    assert!(!second.exists());

    let too_few = exact_counts(100, 1000, 7);
    let err = run_phase(&after1, &too_few, &[], &s.phases[0], 64, &second).unwrap_err();
    assert!(err.is_data_error());
}

// The staged model should hold up on a validation set whose prevalence
// varies as widely as the schedule does, compared with models trained at a
// single prevalence for the same number of epochs.
#[test]
fn staged_model_is_robust_across_prevalences() {
    let (train, val) = data(6000, 0.1, 8);
    let s = schedule(8);
    let chunk = val.len() / 6;
    let mut mixed = Vec::new();
    for (k, phase) in s.phases.iter().enumerate() {
        let part = &val[k * chunk..(k + 1) * chunk];
        mixed.extend(resample_to_prevalence(part, phase.rho, 100 + k as u64).unwrap());
    }
    let labels: Vec<bool> = mixed.iter().map(|x| x.detained).collect();
    let auc = |p: &ModelParams64| {
        let scores: Vec<f64> = score_samples(p, &mixed).unwrap().into_iter().map(|x| x.score).collect();
        roc_auc(&scores, &labels).unwrap()
    };

    let config = TrainConfig {
        seed: 8,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (staged, _) = run_all(&train, &val, &s, &config, None, dir.path()).unwrap();
    let staged_auc = auc(&staged);

    let capped = cap_detained(&train, &s, 8);
    let mut best = f64::NEG_INFINITY;
    for phase in &s.phases {
        let d = downsample_regular(&capped, phase.rho, phase.seed).unwrap();
        let mut p = ModelParams64::init(&config.arch, &config.hyper, Mode::Dsr, 8).unwrap();
        for e in 0..30 {
            train_epoch(&mut p, &d, DEFAULT_LRS[e / 5], 64, e as u64).unwrap();
        }
        best = best.max(auc(&p));
    }
    assert!(staged_auc >= best - 0.02, "staged {staged_auc} vs best single {best}");
}
