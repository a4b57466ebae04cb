//! Pins the on-disk checkpoint format against drift. The committed fixture
//! was produced by `regenerate_fixture`; if an intentional format or
//! init-stream change breaks these tests, rerun that test with `--ignored`
//! and commit the new bytes alongside the change.

use std::path::PathBuf;

use segforge_core::checkpoint::{checkpoint_bytes, load_checkpoint_bytes, peek_dtype};
use segforge_core::element::Dtype;
use segforge_core::model::{Arch, Model, ModelConfig};

fn fixture_config() -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        filters: [2, 2, 2, 2, 2],
        se_reduction: 1,
        aspp_rates: vec![1, 6],
        input_size: 8,
        arch: Arch::Resunetpp,
    }
}

const FIXTURE_SEED: u64 = 5;

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny-f32.ckpt")
}

#[test]
fn committed_fixture_matches_a_fresh_build() {
    let fixture = std::fs::read(fixture_path()).expect("fixture file is committed");
    let model = Model::<f32>::build(fixture_config(), FIXTURE_SEED).unwrap();
    assert_eq!(
        checkpoint_bytes(&model),
        fixture,
        "serialized bytes drifted from the committed fixture"
    );
}

#[test]
fn committed_fixture_round_trips() {
    let fixture = std::fs::read(fixture_path()).expect("fixture file is committed");
    assert_eq!(peek_dtype(&fixture).unwrap(), Dtype::F32);
    let model = load_checkpoint_bytes::<f32>(&fixture).unwrap();
    assert_eq!(checkpoint_bytes(&model), fixture);
}

#[test]
#[ignore = "writes the fixture; run manually after an intentional format change"]
fn regenerate_fixture() {
    let model = Model::<f32>::build(fixture_config(), FIXTURE_SEED).unwrap();
    std::fs::create_dir_all(fixture_path().parent().unwrap()).unwrap();
    std::fs::write(fixture_path(), checkpoint_bytes(&model)).unwrap();
}
