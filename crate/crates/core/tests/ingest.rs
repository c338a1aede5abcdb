use std::fs;
use std::path::Path;

use mstdim_core::envsim::{collect_trajectories, Category, EnvConfig, Split, TrajectoryDataset};
use mstdim_core::Error;

fn env_json(h: usize, w: usize) -> String {
    format!(
        r#"{{"name":"fixture","height":{h},"width":{w},"agent_speed":2,"ball_speed":2,"ball_size":2,"enemy_width":6,"enemy_height":4,"enemy_speed":1,"episode_cap":512}}"#
    )
}

/// Three 2x3 frames, two variables, episodes of length 2 and 1.
fn write_fixture(dir: &Path, declared_h: usize) {
    fs::create_dir_all(dir).unwrap();
    let manifest = format!(
        r#"{{
  "format": "mstdim-trajectories-v1",
  "env": {env},
  "seed": 11,
  "split": "probe_test",
  "channels": 1,
  "height": {declared_h},
  "width": 3,
  "frames": 3,
  "episodes": 2,
  "variables": [
    {{"name": "paddle_x", "category": "agent_loc"}},
    {{"name": "lives", "category": "score_clock_lives_display"}}
  ],
  "byte_order": "little"
}}"#,
        env = env_json(declared_h, 3)
    );
    fs::write(dir.join("manifest.json"), manifest).unwrap();
    let frames: Vec<u8> = (0..18).map(|i| i * 10).collect();
    fs::write(dir.join("frames.bin"), frames).unwrap();
    // Frame-major, one byte per variable.
    fs::write(dir.join("labels.bin"), [5u8, 3, 7, 3, 9, 2]).unwrap();
    fs::write(
        dir.join("episodes.json"),
        r#"[{"episode":0,"start":0,"len":2},{"episode":1,"start":2,"len":1}]"#,
    )
    .unwrap();
}

#[test]
fn collected_datasets_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = collect_trajectories(&EnvConfig::desk(), 3, 700, Split::ProbeTrain).unwrap();
    data.save(dir.path()).unwrap();
    let back = TrajectoryDataset::ingest(dir.path()).unwrap();
    assert_eq!(back, data);
    assert_eq!(back.episodes().len(), 2);
}

#[test]
fn hand_written_fixture_loads_exact_labels() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 2);
    let d = TrajectoryDataset::ingest(dir.path()).unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!(d.split, Split::ProbeTest);
    assert_eq!(d.variables[1].category, Category::ScoreClockLivesDisplay);
    assert_eq!(d.frame_labels(0), &[5, 3]);
    assert_eq!(d.frame_labels(1), &[7, 3]);
    assert_eq!(d.frame_labels(2), &[9, 2]);
    assert_eq!(d.frame(1), &[60, 70, 80, 90, 100, 110]);
    assert_eq!(d.consecutive_pairs(), vec![(0, 1)]);
    let obs = d.observation::<f32>(2);
    assert_eq!((obs.episode, obs.step), (1, 0));
    assert!((obs.image.data()[0] - 120.0 / 255.0).abs() < 1e-6);
}

#[test]
fn declared_height_larger_than_payload_is_a_shape_error() {
    let dir = tempfile::tempdir().unwrap();
    // 64x32 frames declared, only 32-row payloads written.
    let data = collect_trajectories(&EnvConfig::desk(), 1, 10, Split::Pretrain).unwrap();
    data.save(dir.path()).unwrap();
    let frames = fs::read(dir.path().join("frames.bin")).unwrap();
    let half: Vec<u8> = frames.chunks(64 * 64).flat_map(|f| f[..32 * 64].to_vec()).collect();
    fs::write(dir.path().join("frames.bin"), half).unwrap();
    match TrajectoryDataset::ingest(dir.path()) {
        Err(Error::Ingest { file, field, .. }) => {
            assert!(file.ends_with("frames.bin"));
            assert_eq!(field, "height");
        }
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn malformed_inputs_name_file_and_field() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 2);
    let m = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    fs::write(dir.path().join("manifest.json"), m.replace("agent_loc", "weather")).unwrap();
    match TrajectoryDataset::ingest(dir.path()) {
        Err(Error::Ingest { file, field, reason }) => {
            assert!(file.ends_with("manifest.json"));
            assert_eq!(field, "variables.category");
            assert!(reason.contains("weather"));
        }
        other => panic!("expected a category error, got {other:?}"),
    }

    write_fixture(dir.path(), 2);
    fs::write(dir.path().join("labels.bin"), [1u8, 2, 3]).unwrap();
    assert!(matches!(
        TrajectoryDataset::ingest(dir.path()),
        Err(Error::Ingest { field, .. }) if field == "variables"
    ));

    write_fixture(dir.path(), 2);
    fs::write(dir.path().join("episodes.json"), r#"[{"episode":0,"start":0,"len":3},{"episode":1,"start":3,"len":1}]"#).unwrap();
    assert!(matches!(TrajectoryDataset::ingest(dir.path()), Err(Error::Ingest { .. })));

    write_fixture(dir.path(), 2);
    fs::remove_file(dir.path().join("labels.bin")).unwrap();
    assert!(matches!(TrajectoryDataset::ingest(dir.path()), Err(Error::Io { .. })));
}
