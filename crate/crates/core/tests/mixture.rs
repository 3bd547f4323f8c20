use dan_core::dataset::{make_dataset, PairSet};
use dan_core::expert::{Expert, ExpertConfig, TaskTag};
use dan_core::gating::DanNet;
use dan_core::synth::{DegradationSpec, Mode};
use dan_core::train::{train_gate, Adam, TrainConfig};

fn mixture() -> DanNet<f32> {
    let h = Expert::build(ExpertConfig::with_channels(8), TaskTag::Dehaze, 1).unwrap();
    let s = Expert::build(ExpertConfig::with_channels(8), TaskTag::Desnow, 2).unwrap();
    DanNet::new(h, s, 3).unwrap()
}

fn mixed_set(count: usize) -> (tempfile::TempDir, PairSet<f32>) {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(&DegradationSpec::new(Mode::Mixed, 9, 32), count, dir.path()).unwrap();
    let set = PairSet::load(dir.path()).unwrap();
    (dir, set)
}

#[test]
fn forced_gates_select_or_average_the_experts() {
    let (_dir, set) = mixed_set(2);
    let mut dan = mixture();
    let x = &set.train[0].degraded;
    let jh = dan.dehaze.infer(x).unwrap();
    let js = dan.desnow.infer(x).unwrap();

    dan.forced_gates = Some((1.0, 0.0));
    assert!(dan.infer(x).unwrap().0.max_abs_diff(&jh) <= 1e-6);
    dan.forced_gates = Some((0.0, 1.0));
    assert!(dan.infer(x).unwrap().0.max_abs_diff(&js) <= 1e-6);
    dan.forced_gates = Some((0.5, 0.5));
    let avg = jh.zip_map(&js, |a, b| 0.5 * a + 0.5 * b).unwrap();
    assert!(dan.infer(x).unwrap().0.max_abs_diff(&avg) <= 1e-6);
}

#[test]
fn gate_training_moves_only_the_gate() {
    let (_dir, set) = mixed_set(8);
    let mut dan = mixture();
    let experts = (dan.dehaze.params.checksum(), dan.desnow.params.checksum());
    let gate = dan.gate_params.checksum();
    let cfg = TrainConfig {
        batch_size: 2,
        val_every: 0,
        ..TrainConfig::for_iterations(3)
    };
    let mut adam = Adam::new(&dan.gate_params, cfg.adam());
    let r = train_gate(&mut dan, &mut adam, &set, &cfg).unwrap();
    assert_eq!(r.log.len(), 3);
    assert_eq!((dan.dehaze.params.checksum(), dan.desnow.params.checksum()), experts);
    assert_ne!(dan.gate_params.checksum(), gate);
}

#[test]
fn untrained_gate_mixes_evenly() {
    let (_dir, set) = mixed_set(3);
    let dan = mixture();
    for p in set.train.iter().chain(&set.val) {
        let (_, wh, ws) = dan.infer(&p.degraded).unwrap();
        assert_eq!(wh.shape(), &[1, 1, 32, 32]);
        assert!(wh.data().iter().chain(ws.data()).all(|&w| w == 0.5));
    }
}

#[test]
fn trained_gates_stay_in_the_unit_interval() {
    let (_dir, set) = mixed_set(6);
    let mut dan = mixture();
    let cfg = TrainConfig {
        batch_size: 2,
        val_every: 0,
        base_lr: 1e-2,
        max_lr: 1e-2,
        ..TrainConfig::for_iterations(4)
    };
    let mut adam = Adam::new(&dan.gate_params, cfg.adam());
    train_gate(&mut dan, &mut adam, &set, &cfg).unwrap();
    let (_, wh, ws) = dan.infer(&set.val[0].degraded).unwrap();
    assert!(wh.data().iter().chain(ws.data()).all(|&w| (0.0..=1.0).contains(&w)));
    assert!(wh.data().iter().any(|&w| w != 0.5));
}
