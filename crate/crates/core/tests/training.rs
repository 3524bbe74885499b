mod common;

use uld_core::checkpoint::load_checkpoint;
use uld_core::heads::DESCRIPTOR_PREFIX;
use uld_core::pipeline::Pipeline;
use uld_core::pose_proxy::{DECODER_PREFIX, ENCODER_PREFIX};
use uld_core::selftrain::Stage;
use uld_core::UldError;

use common::{decile_medians, small_config};

#[test]
fn bootstrap_loss_trends_down() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config("trend");
    c.bootstrap.iterations = 200;
    c.bootstrap.checkpoint_every = 200;
    let p = Pipeline::new(&c, dir.path()).unwrap();
    let out = p.run_stage(Stage::Bootstrap).unwrap();
    let series = out.losses.series(Stage::Bootstrap, "total");
    assert_eq!(series.len(), 200);
    let (first, last) = decile_medians(&series);
    assert!(last < first, "median loss {first} -> {last}");
}

#[test]
fn duld_with_fixed_targets_trends_down() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config("fixed");
    c.duld.schedule.total_iterations = 200;
    c.duld.schedule.recluster_every = None;
    let p = Pipeline::new(&c, dir.path()).unwrap();
    p.run_stage(Stage::Bootstrap).unwrap();
    let out = p.run_stage(Stage::Duld).unwrap();
    assert_eq!(out.losses.reclusters.len(), 1, "only the initial clustering");
    let (first, last) = decile_medians(&out.losses.series(Stage::Duld, "total"));
    assert!(last < first, "median loss {first} -> {last}");
}

#[test]
fn frozen_parts_stay_fixed_and_targets_stay_current() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(&small_config("frozen"), dir.path()).unwrap();
    p.run_stage(Stage::Bootstrap).unwrap();

    let mut epochs = Vec::new();
    let duld = p
        .run_stage_with(Stage::Duld, &mut |s| {
            if let Some(set) = s.training_set {
                epochs.push((s.iteration, set.epoch));
            }
            Ok(())
        })
        .unwrap();
    let events: Vec<(usize, u64)> = duld.losses.reclusters.iter().map(|e| (e.iteration, e.epoch)).collect();
    assert_eq!(events.iter().map(|e| e.0).collect::<Vec<_>>(), vec![0, 20]);
    assert!(events.windows(2).all(|w| w[1].1 > w[0].1));
    // every re-clustered set handed out matches the event logged with it
    for e in &events {
        assert!(epochs.contains(e));
    }
    let final_epoch = duld.checkpoint.training_set.as_ref().unwrap().epoch;
    assert_eq!(final_epoch, events.last().unwrap().1);

    let desc = duld.checkpoint.model.heads.store.checksum(DESCRIPTOR_PREFIX);
    let proxy = p.run_stage(Stage::Proxy).unwrap();
    assert_eq!(proxy.checkpoint.model, duld.checkpoint.model);
    let vae = proxy.checkpoint.vae.as_ref().unwrap();
    let decoder = vae.store.checksum(DECODER_PREFIX);
    let encoder = vae.store.checksum(ENCODER_PREFIX);

    let duldpp = p.run_stage(Stage::Duldpp).unwrap();
    let ck = &duldpp.checkpoint;
    assert_eq!(ck.model.heads.store.checksum(DESCRIPTOR_PREFIX), desc);
    let vae2 = ck.vae.as_ref().unwrap();
    assert_eq!(vae2.store.checksum(DECODER_PREFIX), decoder);
    assert_ne!(vae2.store.checksum(ENCODER_PREFIX), encoder);
    let adam = ck.optim.vae.as_ref().unwrap();
    let mut encoder_updates = 0;
    for (i, (name, _)) in vae2.store.iter().enumerate() {
        if name.starts_with(DECODER_PREFIX) {
            assert_eq!(adam.updates[i], 0, "{name} was updated");
        } else {
            encoder_updates += adam.updates[i];
        }
    }
    assert!(encoder_updates > 0);
}

#[test]
fn divergence_stops_with_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config("diverge");
    c.bootstrap.learning_rate = 1e200;
    let p = Pipeline::new(&c, dir.path()).unwrap();
    let err = p.run_stage(Stage::Bootstrap).unwrap_err();
    let UldError::Diverged { iteration, .. } = err else {
        panic!("expected divergence, got {err}");
    };
    let ck = load_checkpoint(&p.run.checkpoint(Stage::Bootstrap), None, false).unwrap();
    assert!(!ck.complete);
    assert_eq!(ck.iteration, iteration);
    assert!(ck.model.heads.store.is_finite());
}
