use fgasl_core::config::Config;
use fgasl_core::domainsim::{make_task, TaskConfig};
use fgasl_core::dualteacher::{local_train_round, LocalHyper, LocalPlan, PseudoLabeling, ThresholdState};
use fgasl_core::orchestrator::{prepare, Strategy};

fn small_task() -> TaskConfig {
    let mut t = TaskConfig::desk_scale();
    for d in &mut t.domains {
        d.n_labeled = 4;
        d.n_unlabeled = 8;
        d.image_size = 16;
    }
    t.eval_size = 4;
    t
}

#[test]
fn zero_loss_weights_reduce_to_supervised_training() {
    let task = make_task(&small_task(), 3, 2).unwrap();
    let mut cfg = Config::default().training;
    cfg.lr = 3e-3;
    let fgasl = Strategy::by_name("fgasl").unwrap();
    let fed = prepare(&task, &fgasl, &cfg).unwrap();
    let global = fed.arch.init(1);
    let thr = ThresholdState::from_config(&cfg, 4);

    let mut hyper = LocalHyper::from_config(&cfg, 4);
    hyper.lambda1 = 0.0;
    hyper.lambda2 = 0.0;
    let full = local_train_round(&fed.arch, &global, &fed.clients[0], &hyper, fgasl.local_plan(&cfg), &thr, 7).unwrap();
    let supervised = LocalPlan {
        pseudo: PseudoLabeling::Off,
        use_pia: false,
    };
    let sup = local_train_round(&fed.arch, &global, &fed.clients[0], &hyper, supervised, &thr, 7).unwrap();

    for (a, b) in full.updated_params.values().iter().zip(sup.updated_params.values()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    for (a, b) in full.loss_trace.iter().zip(&sup.loss_trace) {
        assert_eq!(a.supervised.to_bits(), b.supervised.to_bits());
    }
}

#[test]
fn rounds_are_reproducible() {
    let task = make_task(&small_task(), 3, 4).unwrap();
    let cfg = Config::default().training;
    let fgasl = Strategy::by_name("fgasl").unwrap();
    let fed = prepare(&task, &fgasl, &cfg).unwrap();
    let global = fed.arch.init(3);
    let hyper = LocalHyper::from_config(&cfg, 3);
    let thr = ThresholdState::from_config(&cfg, 3);
    let run = |s| local_train_round(&fed.arch, &global, &fed.clients[1], &hyper, fgasl.local_plan(&cfg), &thr, s).unwrap();
    let (a, b, c) = (run(5), run(5), run(6));
    assert_eq!(a.updated_params.fingerprint(), b.updated_params.fingerprint());
    assert_eq!(a.gap.to_bits(), b.gap.to_bits());
    assert_ne!(a.updated_params.fingerprint(), c.updated_params.fingerprint());
}
