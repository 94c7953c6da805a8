use std::panic::{catch_unwind, AssertUnwindSafe};

use stld_core::domain::{split_dataset, Dataset, Pathway, Sample, TrainingScope};
use stld_core::losses::Curriculum;
use stld_core::selftrain::{pseudo_pretrain, run_strategy, train_supervised, EngineConfig, PretrainInit, Strategy};
use stld_core::synth::{generate_task, TaskConfig};
use stld_core::{Landmarks, Model};

fn dataset(seed: u64) -> Dataset {
    let task = generate_task(&TaskConfig::new(12, 3), 40, 10, seed).unwrap();
    split_dataset(task.train, task.test, 0.25, seed, 0.0).unwrap()
}

fn engine(pathway: Pathway) -> EngineConfig {
    let mut cfg = EngineConfig::for_pathway(pathway);
    cfg.hidden = 16;
    cfg.stage.epochs = 4;
    cfg.rounds = 3;
    let mut c = Curriculum::default_for(pathway);
    c.values = vec![c.values[0], c.standard];
    c.rounds = 3;
    cfg.curriculum = c;
    cfg
}

/// Same images and visible labels; unlabeled hidden truth replaced by junk.
fn with_scrambled_truth(d: &Dataset) -> Dataset {
    let mut out = d.clone();
    out.unlabeled = d
        .unlabeled
        .iter()
        .map(|s| {
            let junk = Landmarks::new(vec![[1.0, 2.0]; 3]).unwrap();
            Sample::new(s.id, s.image.clone(), None, Some(junk), s.pose)
        })
        .collect();
    out
}

#[test]
fn hidden_truth_panics_inside_a_training_scope() {
    let d = dataset(3);
    let s = &d.unlabeled[0];
    assert!(s.hidden_gt().is_some());
    let r = catch_unwind(AssertUnwindSafe(|| {
        let _scope = TrainingScope::enter();
        s.hidden_gt().cloned()
    }));
    assert!(r.is_err());
    assert!(!TrainingScope::active());
}

#[test]
fn training_entry_points_leave_no_scope_behind() {
    let d = dataset(4);
    let cfg = engine(Pathway::Coordinate);
    let spec = cfg.model_spec(d.image_size(), 3);
    let init = Model::init(spec, 1).unwrap();
    let (warm, _) = train_supervised(&d.labeled, &init, &cfg.stage, 2).unwrap();
    assert!(!TrainingScope::active());
    let pseudo = stld_core::domain::PseudoStore::for_ids(d.unlabeled_ids())
        .update(stld_core::selftrain::estimate(&warm, &d.unlabeled).unwrap(), 0)
        .unwrap();
    pseudo_pretrain(&d.unlabeled, &pseudo, PretrainInit::Fresh { seed: 1 }, &spec, &cfg.stage, 3).unwrap();
    assert!(!TrainingScope::active());
}

#[test]
fn training_never_sees_unlabeled_truth() {
    for pathway in [Pathway::Coordinate, Pathway::Heatmap] {
        let d = dataset(5);
        let junk = with_scrambled_truth(&d);
        let cfg = engine(pathway);
        for strategy in [Strategy::stld(), Strategy::Naive] {
            let a = run_strategy(&d, &strategy, &cfg, 9).unwrap();
            let b = run_strategy(&junk, &strategy, &cfg, 9).unwrap();
            assert_eq!(a.final_model().params_flat(), b.final_model().params_flat(), "{pathway} {}", strategy.name());
            for (x, y) in a.logs.iter().zip(&b.logs) {
                assert_eq!(x.stage2_loss, y.stage2_loss);
                assert_eq!(x.test_nme, y.test_nme);
                // only the measurement against hidden truth moves
                assert_ne!(x.pseudo_noise_mean, y.pseudo_noise_mean);
            }
        }
    }
}
