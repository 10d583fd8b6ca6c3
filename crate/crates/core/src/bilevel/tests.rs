use super::*;
use crate::data::{build_dataset, Dataset};
use crate::gates::sigmoid;
use crate::net::{NetConfig, TwoStreamNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn schedule_points() {
    let lr = |e| lr_schedule(e, 0.1);
    assert!((lr(0) - 0.01).abs() < 1e-15);
    assert!((lr(9) - 0.1).abs() < 1e-15);
    assert_eq!(lr(10), 0.1);
    assert_eq!(lr(15), 0.1);
    assert!((lr(16) - 0.01).abs() < 1e-15);
    assert!((lr(49) - 0.01).abs() < 1e-15);
    assert!((lr(50) - 0.001).abs() < 1e-15);
    assert!((0..9).all(|e| lr(e) < lr(e + 1)));
}

fn dataset(images: u32) -> Dataset {
    Dataset::render(build_dataset(4, 2, images, 13).unwrap())
}

#[test]
fn split_sizes_and_determinism() {
    for (images, train, val) in [(10usize, 8usize, 2usize), (2, 1, 1), (20, 16, 4)] {
        let ds = dataset(images as u32);
        let split = split_search_sets(&ds, &ds.manifest.train_indices(), 3).unwrap();
        assert_eq!(split.search_train.len(), 4 * 2 * train);
        assert_eq!(split.search_val.len(), 4 * 2 * val);
        let mut all: Vec<usize> = split.search_train.iter().chain(&split.search_val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, ds.manifest.train_indices());
        let pool = crate::data::SamplePool::new(&ds, &split.search_val);
        assert_eq!(pool.identity_count(), 4);
    }
    let ds = dataset(10);
    let idx = ds.manifest.train_indices();
    assert_eq!(split_search_sets(&ds, &idx, 3).unwrap(), split_search_sets(&ds, &idx, 3).unwrap());
    assert_ne!(
        split_search_sets(&ds, &idx, 3).unwrap().search_val,
        split_search_sets(&ds, &idx, 4).unwrap().search_val
    );
    let single = dataset(1);
    assert!(matches!(
        split_search_sets(&single, &single.manifest.train_indices(), 0),
        Err(NfsError::Insufficient(_))
    ));
}

#[test]
fn momentum_matches_hand_computation() {
    let mut opt = SgdMomentum::new(0.9, 0.1);
    let mut w = vec![1.0];
    opt.step(&mut w, &[0.5], 0.1);
    // v = 0.5 + 0.1 * 1 = 0.6
    assert!((w[0] - 0.94).abs() < 1e-15);
    opt.step(&mut w, &[0.5], 0.1);
    // v = 0.9 * 0.6 + 0.5 + 0.094
    assert!((w[0] - (0.94 - 0.1 * (0.54 + 0.5 + 0.094))).abs() < 1e-15);
}

/// Instrumented problem: weights see a fixed training gradient, gates the
/// gradient of `(sigmoid(p) - target)^2`. Records every call.
#[derive(Default)]
struct Mock {
    w: Vec<f64>,
    p: Vec<f64>,
    train_grad: Vec<f64>,
    target: f64,
    calls: Vec<(&'static str, Vec<f64>)>,
}

impl BilevelProblem for Mock {
    type Batch = ();

    fn weights(&self) -> Vec<f64> {
        self.w.clone()
    }
    fn set_weights(&mut self, w: &[f64]) {
        self.w = w.to_vec();
    }
    fn gates(&self) -> Vec<f64> {
        self.p.clone()
    }
    fn set_gates(&mut self, p: &[f64]) {
        self.p = p.to_vec();
    }
    fn train_grad<R: Rng + ?Sized>(&mut self, _: &(), _: bool, _: &mut R) -> Result<(LossParts, Vec<f64>)> {
        self.calls.push(("train", self.w.clone()));
        Ok((LossParts::default(), self.train_grad.clone()))
    }
    fn val_grad<R: Rng + ?Sized>(&mut self, _: &(), _: &mut R) -> Result<(LossParts, Vec<f64>)> {
        self.calls.push(("val", self.w.clone()));
        let grad = self
            .p
            .iter()
            .map(|&p| {
                let s = sigmoid(p);
                2.0 * (s - self.target) * s * (1.0 - s)
            })
            .collect();
        let loss = self.p.iter().map(|&p| (sigmoid(p) - self.target).powi(2)).sum();
        Ok((
            LossParts {
                total: loss,
                ..LossParts::default()
            },
            grad,
        ))
    }
}

fn no_decay() -> BilevelConfig {
    BilevelConfig {
        weight_decay: 0.0,
        ..BilevelConfig::default()
    }
}

#[test]
fn quadratic_surrogate_follows_closed_form() {
    let cfg = no_decay();
    let mut mock = Mock {
        w: vec![0.0],
        p: vec![0.0],
        train_grad: vec![0.0],
        target: 0.9,
        ..Mock::default()
    };
    let mut opt = SgdMomentum::new(cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = 0.0f64;
    let mut prev = sigmoid(p);
    for _ in 0..100 {
        search_step(&mut mock, &mut opt, &(), &(), 0.1, &cfg, &mut rng).unwrap();
        let s = 1.0 / (1.0 + (-p).exp());
        p -= 0.01 * 2.0 * (s - 0.9) * s * (1.0 - s);
        assert!((mock.p[0] - p).abs() < 1e-12);
        let now = sigmoid(mock.p[0]);
        assert!(now > prev && now < 0.9);
        prev = now;
    }
}

#[test]
fn update_channels_stay_separate() {
    let cfg = no_decay();
    let mut mock = Mock {
        w: vec![1.0, 2.0],
        p: vec![0.3],
        train_grad: vec![0.5, -0.25],
        target: 0.1,
        ..Mock::default()
    };
    let mut opt = SgdMomentum::new(cfg.momentum, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    search_step(&mut mock, &mut opt, &(), &(), 0.2, &cfg, &mut rng).unwrap();
    // weights moved by the training gradient only
    assert_eq!(mock.w, vec![1.0 - 0.2 * 0.5, 2.0 + 0.2 * 0.25]);
    // gates moved by the validation gradient only
    let s = sigmoid(0.3);
    assert!((mock.p[0] - (0.3 - 0.01 * 2.0 * (s - 0.1) * s * (1.0 - s))).abs() < 1e-15);
    // the validation pass saw the freshly updated weights
    assert_eq!(mock.calls.iter().map(|c| c.0).collect::<Vec<_>>(), vec!["train", "val"]);
    assert_eq!(mock.calls[1].1, mock.w);
}

#[test]
fn second_order_uses_lookahead_weights() {
    let cfg = BilevelConfig {
        order: SearchOrder::Second,
        xi: Some(0.5),
        ..no_decay()
    };
    let mut mock = Mock {
        w: vec![1.0],
        p: vec![0.0],
        train_grad: vec![0.4],
        target: 0.9,
        ..Mock::default()
    };
    let mut opt = SgdMomentum::new(0.0, 0.0);
    search_step(&mut mock, &mut opt, &(), &(), 0.1, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let updated = 1.0 - 0.1 * 0.4;
    assert_eq!(mock.calls[2], ("val", vec![updated - 0.5 * 0.4]));
    assert_eq!(mock.w, vec![updated]);
}

#[test]
fn orders_agree_when_training_gradient_vanishes() {
    let run = |order| {
        let cfg = BilevelConfig { order, ..no_decay() };
        let mut mock = Mock {
            w: vec![0.7, -0.2],
            p: vec![0.1, -0.4],
            train_grad: vec![0.0, 0.0],
            target: 0.6,
            ..Mock::default()
        };
        let mut opt = SgdMomentum::new(cfg.momentum, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            search_step(&mut mock, &mut opt, &(), &(), 0.1, &cfg, &mut rng).unwrap();
        }
        (mock.w, mock.p)
    };
    assert_eq!(run(SearchOrder::First), run(SearchOrder::Second));
}

fn tiny_net(searched: Vec<usize>, seed: u64) -> TwoStreamNet<f64> {
    let cfg = NetConfig {
        stem_width: 4,
        stage_widths: vec![4, 8, 8],
        searched_stages: searched,
        num_identities: 4,
        ..NetConfig::default()
    };
    TwoStreamNet::init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn tiny_cfg(search_epochs: usize, retrain_epochs: usize) -> BilevelConfig {
    BilevelConfig {
        search_epochs,
        retrain_epochs,
        p: 2,
        k: 2,
        ..BilevelConfig::default()
    }
}

#[test]
fn zero_rates_leave_parameters_unchanged() {
    let ds = dataset(5);
    let mut net = tiny_net(vec![1, 2], 1);
    let split = split_search_sets(&ds, &ds.manifest.train_indices(), 0).unwrap();
    let cfg = BilevelConfig {
        base_lr: 0.0,
        gate_lr: 0.0,
        ..tiny_cfg(1, 0)
    };
    let mut problem = NetProblem::new(&mut net, ObjectiveConfig::default(), crate::net::ForwardMode::Search);
    let (w0, p0) = (problem.weights(), problem.gates());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pool_t = crate::data::SamplePool::new(&ds, &split.search_train);
    let pool_v = crate::data::SamplePool::new(&ds, &split.search_val);
    let tb = ds.batch(&pool_t.sample_batch(2, 2, &mut rng).unwrap()).unwrap();
    let vb = ds.batch(&pool_v.sample_batch(2, 1, &mut rng).unwrap()).unwrap();
    let mut opt = SgdMomentum::new(0.9, 5e-4);
    let (lt, lv) = search_step(&mut problem, &mut opt, &tb, &vb, 0.0, &cfg, &mut rng).unwrap();
    assert!(lt.total > 0.0 && lv.total > 0.0);
    assert_eq!(problem.weights(), w0);
    assert_eq!(problem.gates(), p0);
}

#[test]
fn zero_search_epochs_keep_every_gate() {
    let ds = dataset(5);
    let mut net = tiny_net(vec![1, 2, 3], 2);
    let split = split_search_sets(&ds, &ds.manifest.train_indices(), 0).unwrap();
    let out = run_search(
        &mut net,
        &ds,
        &split,
        &ObjectiveConfig::default(),
        &tiny_cfg(0, 0),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    assert!(out.epochs.is_empty());
    assert_eq!(out.derived.cells.len(), 12);
    assert!(out.derived.cells.values().all(|(_, g)| g.iter().all(|&v| v == 1.0)));
}

#[test]
fn search_is_reproducible_and_logs_fractions() {
    let ds = dataset(5);
    let split = split_search_sets(&ds, &ds.manifest.train_indices(), 1).unwrap();
    let run = || {
        let mut net = tiny_net(vec![1, 2], 3);
        let out = run_search(
            &mut net,
            &ds,
            &split,
            &ObjectiveConfig::default(),
            &tiny_cfg(2, 0),
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        (out, crate::tensor::encode_checkpoint(&net.to_checkpoint()))
    };
    let (a, bytes_a) = run();
    let (b, bytes_b) = run();
    assert_eq!(bytes_a, bytes_b);
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.epochs.len(), 2);
    for e in &a.epochs {
        assert_eq!(e.stage_activation.len(), 2);
        assert!(e.stage_activation.values().chain(e.gate_keep.values()).all(|f| (0.0..=1.0).contains(f)));
    }
    // two identities per batch over four identities
    assert_eq!(a.steps.len(), 2 * 2 * 2);
}

#[test]
fn unit_gates_retrain_like_the_baseline() {
    let ds = dataset(4);
    let idx = ds.manifest.train_indices();
    let cfg = tiny_cfg(0, 2);
    let objective = ObjectiveConfig::default();
    let mut gated = tiny_net(vec![1, 2], 4);
    for cell in gated.search_cells_mut() {
        let n = cell.param().numel();
        cell.set_derived(vec![1.0; n]).unwrap();
    }
    let mut plain = tiny_net(vec![], 4);
    let a = retrain(&mut gated, &ds, &idx, &objective, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = retrain(&mut plain, &ds, &idx, &objective, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a.steps, b.steps);
    let weights = |net: &TwoStreamNet<f64>| {
        net.to_checkpoint()
            .into_iter()
            .filter(|e| !e.name.ends_with(".logits") && !e.name.ends_with(".derived"))
            .collect::<Vec<_>>()
    };
    assert_eq!(weights(&gated), weights(&plain));
}

#[test]
fn retrain_requires_derived_gates() {
    let ds = dataset(4);
    let mut net = tiny_net(vec![1], 0);
    let err = retrain(
        &mut net,
        &ds,
        &ds.manifest.train_indices(),
        &ObjectiveConfig::default(),
        &tiny_cfg(0, 1),
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    assert!(matches!(err, Err(NfsError::Config(_))));
}

#[test]
fn loss_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("logs/loss.csv");
    let rec = StepRecord {
        phase: "retrain".into(),
        epoch: 1,
        step: 2,
        lr: 0.1,
        loss: LossParts {
            l_id: 1.0,
            l_tri: 0.5,
            l_c: 2.0,
            total: 1.58,
        },
    };
    write_loss_csv(&path, &[rec]).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text, "phase,epoch,step,l_id,l_tri,l_c,total,lr\nretrain,1,2,1,0.5,2,1.58,0.1\n");
}
