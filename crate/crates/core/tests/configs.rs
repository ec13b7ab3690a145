use std::path::PathBuf;

use avfd::harness::{read_config_file, RunConfig};
use avfd::model::Profile;
use avfd::train::OptimizerKind;

fn shipped(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::from_pairs(&read_config_file(&path).unwrap()).unwrap()
}

#[test]
fn paper_config_pins_batch_and_rate() {
    let cfg = shipped("paper.conf");
    assert_eq!(cfg.profile, Profile::Paper);
    assert_eq!(cfg.batch_size, 8);
    assert_eq!(cfg.lr, 1e-6);
    assert_eq!(cfg.epochs, 20);
    assert_eq!(cfg.optimizer, OptimizerKind::Sgd);
    cfg.validate().unwrap();
    let preset = RunConfig::paper();
    assert_eq!((preset.batch_size, preset.lr), (8, 1e-6));
}

#[test]
fn desk_config_matches_the_preset() {
    let cfg = shipped("desk.conf");
    let preset = RunConfig::desk();
    assert_eq!(
        (cfg.profile, cfg.epochs, cfg.batch_size, cfg.lr, cfg.optimizer, cfg.mode),
        (preset.profile, preset.epochs, preset.batch_size, preset.lr, preset.optimizer, preset.mode)
    );
    assert!(cfg.epochs <= 20);
}
