use ghost::bitsearch::{build_bit_plan, SearchSettings};
use ghost::io::{load_checkpoint, save_checkpoint, Checkpoint};
use ghost::net::NetworkSpec;
use ghost::scm::GateParams;
use ghost::train::{GateEpoch, GateTelemetry, ModelParams};
use ghost::{CheckpointError, Error};

fn searched_student() -> Checkpoint {
    let spec = NetworkSpec::tiny_detector(3);
    let params = ModelParams::init(&spec, 12).unwrap();
    let settings = SearchSettings {
        b_min: 2,
        restarts: 2,
        seed: 12,
        exempt_first_layer: true,
    };
    let plan = build_bit_plan(&spec, &params.weights, 1e-3, settings).unwrap();
    let gate = GateParams::init(&spec.tap_channels(), 16, 1.0, 0.0, 3).unwrap();
    let telemetry = GateTelemetry {
        epochs: vec![GateEpoch {
            epoch: 1,
            alpha_soft: vec![0.25, 0.5, 0.75],
            alpha_hard: vec![0.0, 0.5, 1.0],
        }],
    };
    Checkpoint {
        spec,
        params,
        bitplan: Some(plan),
        gate: Some(gate),
        telemetry: Some(telemetry),
    }
}

#[test]
fn file_round_trip_keeps_every_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("student.ckpt");
    let c = searched_student();
    save_checkpoint(&path, &c).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.bitplan, c.bitplan);
    assert_eq!(back.gate, c.gate);
    assert_eq!(back.telemetry, c.telemetry);
    for (a, b) in back.params.weights.iter().zip(&c.params.weights) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(std::fs::read(&path).unwrap(), c.to_bytes().unwrap());
}

#[test]
fn damaged_files_give_structured_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.ckpt");
    let c = searched_student();
    save_checkpoint(&path, &c).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::Checkpoint(CheckpointError::TruncatedPayload { .. }))
    ));

    let mut huge = bytes.clone();
    huge[..4].copy_from_slice(&u32::MAX.to_le_bytes());
    std::fs::write(&path, &huge).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::Checkpoint(CheckpointError::TruncatedHeader { .. }))
    ));

    assert!(matches!(
        load_checkpoint(&dir.path().join("absent.ckpt")),
        Err(Error::MissingInput(_))
    ));
}

#[test]
fn digest_tracks_weights_only_through_content() {
    let c = searched_student();
    let mut d = c.clone();
    assert_eq!(c.digest().unwrap(), d.digest().unwrap());
    d.params.weights[2].data_mut()[0] += 1e-3;
    assert_ne!(c.digest().unwrap(), d.digest().unwrap());
}
