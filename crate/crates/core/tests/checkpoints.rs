//! Checkpoint files written to disk by a tuning run.

use std::fs;

use stylepro::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use stylepro::train::TuneState;
use stylepro::verify::{tiny_task, tiny_tune_config};

#[test]
fn tuned_state_round_trips_through_a_file() {
    let (backbone, ds, split) = tiny_task(3).unwrap();
    let mut state = TuneState::new(&tiny_tune_config(3), &backbone, &ds, &split).unwrap();
    state.run(&ds, &split, None, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/model.ck");
    state.to_checkpoint(serde_json::json!({ "seed": 3 })).unwrap().save(&path).unwrap();

    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.header.provenance["seed"], 3);
    let back = TuneState::from_checkpoint(&ck).unwrap();
    assert_eq!(back.config, state.config);
    assert_eq!(back.records, state.records);
    assert_eq!(back.model.prompts, state.model.prompts);
    assert_eq!(back.model.bank, state.model.bank);
    assert_eq!(back.model.backbone.checksum(), backbone.checksum());
    assert!(back.is_finished());
    // A finished run has nothing left to do.
    let mut again = back;
    assert_eq!(again.run(&ds, &split, None, |_| {}).unwrap(), 0);
}

#[test]
fn damaged_files_are_rejected() {
    let (backbone, ds, split) = tiny_task(4).unwrap();
    let state = TuneState::new(&tiny_tune_config(4), &backbone, &ds, &split).unwrap();
    let bytes = state.to_checkpoint(serde_json::Value::Null).unwrap().to_bytes().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ck");

    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap_err().category(), "integrity");

    let mut flipped = bytes.clone();
    let last = flipped.len() - 3;
    flipped[last] ^= 0x40;
    fs::write(&path, &flipped).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap_err().category(), "integrity");

    let mut magic = bytes.clone();
    magic[0] = b'X';
    fs::write(&path, &magic).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap_err().category(), "integrity");

    let future = state.to_checkpoint(serde_json::Value::Null).unwrap().to_bytes_with_version(CHECKPOINT_VERSION + 1).unwrap();
    fs::write(&path, &future).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap_err().category(), "compatibility");

    assert_eq!(Checkpoint::load(&dir.path().join("absent.ck")).unwrap_err().category(), "missing-prerequisite");
}
