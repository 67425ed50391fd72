use citrus_core::trainer::{metrics_csv, train, METRICS_HEADER};
use citrus_core::{LossKind, RunConfig};

fn toy(kind: LossKind, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.size = 60;
    cfg.dataset.test_size = 20;
    cfg.arch = citrus_core::Arch(vec![2, 8, 2]);
    cfg.train.loss_kind = kind;
    cfg.train.epochs = epochs;
    cfg.train.warmup_epochs = 1;
    cfg.train.ramp_epochs = 2;
    cfg
}

#[test]
fn same_seed_reproduces_metrics_bitwise() {
    let cfg = toy(LossKind::Citrus, 4);
    let (train_set, _) = cfg.datasets().unwrap();
    let a = train(&cfg.train, &cfg.arch, &train_set, None).unwrap();
    let b = train(&cfg.train, &cfg.arch, &train_set, None).unwrap();
    assert_eq!(a.network, b.network);
    for (x, y) in a.metrics.iter().zip(&b.metrics) {
        let strip = |r: &citrus_core::trainer::MetricsRecord| {
            let mut r = r.clone();
            r.wall_s = 0.0;
            r
        };
        assert_eq!(strip(x), strip(y));
    }
    let other = train(&cfg.clone().with_seed(1).train, &cfg.arch, &train_set, None).unwrap();
    assert_ne!(other.network, a.network);
}

#[test]
fn echoed_config_reruns_identically() {
    let cfg = toy(LossKind::Sabr, 3);
    let echoed = RunConfig::from_json(&cfg.to_json()).unwrap();
    let (d1, _) = cfg.datasets().unwrap();
    let (d2, _) = echoed.datasets().unwrap();
    assert_eq!(d1, d2);
    let a = train(&cfg.train, &cfg.arch, &d1, None).unwrap();
    let b = train(&echoed.train, &echoed.arch, &d2, None).unwrap();
    assert_eq!(a.network, b.network);
}

#[test]
fn every_objective_trains_and_logs() {
    for kind in LossKind::ALL {
        let cfg = toy(kind, 3);
        let (train_set, _) = cfg.datasets().unwrap();
        let out = train(&cfg.train, &cfg.arch, &train_set, None).unwrap();
        let csv = metrics_csv(&out.metrics);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        assert_eq!(lines.clone().count(), 3, "{kind}");
        for line in lines {
            assert_eq!(line.split(',').count(), 9);
        }
        let cross = out.metrics.last().unwrap().ci_loss_mean;
        assert_eq!(cross.is_some(), matches!(kind, LossKind::Citrus | LossKind::CitrusSi), "{kind}");
    }
}
