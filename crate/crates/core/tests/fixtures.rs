use std::path::Path;

use marlab_core::envs::{self, FIXTURE_NAMES};
use marlab_core::MarkovGame;

fn fixture_path(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(format!("{name}.json"))
}

#[test]
fn shipped_files_match_builtins() {
    for name in FIXTURE_NAMES {
        let from_file = MarkovGame::load(&fixture_path(name)).unwrap();
        assert_eq!(from_file, envs::fixture(name).unwrap(), "{name}");
        let via_spec = envs::load_env(fixture_path(name).to_str().unwrap()).unwrap();
        assert_eq!(via_spec, from_file);
    }
}

#[test]
fn short_ids_resolve() {
    for (id, name) in [
        ("G1", "matching_pennies"),
        ("G2", "coop_climb"),
        ("G3", "coop_cts"),
        ("M1", "two_step_coop"),
        ("E1", "signal_relay"),
    ] {
        assert_eq!(envs::fixture(id).unwrap(), envs::fixture(name).unwrap());
    }
    assert!(envs::fixture("G9").is_err());
}
