use std::fs;
use std::path::Path;

use pour_monitor::eval::{evaluate_fold, make_folds, Scheme};
use pour_monitor::model::ModelConfig;
use pour_monitor::persist::{self, CHECKPOINT_VERSION};
use pour_monitor::simulator::{synth_dataset, Dataset, SimConfig};
use pour_monitor::train::{train_run, TrainConfig, TrainedModel, Variant};

fn small_sim() -> SimConfig {
    SimConfig { frames: 6, d_img: 8, imu_samples: 4, users: 2, trials: 1, ..SimConfig::default() }
}

fn small_train(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        model: ModelConfig {
            d_img: 8,
            imu_samples: 4,
            hidden_img: 6,
            hidden_pos: 3,
            hidden_rot: 3,
            hidden_fuse: 6,
            generator_width: 5,
            discriminator_width: 5,
            monitor_width: 6,
            ..ModelConfig::desk_scale()
        },
        epochs: 2,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    }
}

fn trained(ds: &Dataset) -> TrainedModel {
    let folds = make_folds(ds, Scheme::CrossUser).unwrap();
    train_run(&small_train(Variant::Full), ds, &folds[0]).unwrap()
}

#[test]
fn dataset_round_trip_preserves_metadata_and_quantizes_payload() {
    let ds = synth_dataset(&small_sim()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    persist::save_dataset(&ds, dir.path()).unwrap();
    let back = persist::load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), ds.len());
    for (a, b) in ds.sequences.iter().zip(&back.sequences) {
        assert_eq!(a.id(), b.id());
        assert_eq!((a.outcome, a.state, a.user, a.trial, a.spill_onset), (b.outcome, b.state, b.user, b.trial, b.spill_onset));
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            for (x, y) in fa.feature.iter().zip(&fb.feature) {
                assert_eq!(*x as f32, *y as f32);
            }
            for (sa, sb) in fa.imu.samples.iter().zip(&fb.imu.samples) {
                for (x, y) in sa.iter().zip(sb) {
                    assert_eq!(*x as f32, *y as f32);
                }
            }
            for (x, y) in fa.pose.position.iter().zip(&fb.pose.position) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }
}

#[test]
fn same_seed_gives_byte_identical_directories() {
    let ds = synth_dataset(&small_sim()).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    persist::save_dataset(&ds, a.path()).unwrap();
    persist::save_dataset(&synth_dataset(&small_sim()).unwrap(), b.path()).unwrap();
    let manifest = fs::read(a.path().join("manifest.tsv")).unwrap();
    assert_eq!(manifest, fs::read(b.path().join("manifest.tsv")).unwrap());
    for seq in &ds.sequences {
        let rel = format!("sequences/{}.bin", seq.id());
        assert_eq!(fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap());
    }
}

#[test]
fn corrupt_and_inconsistent_files_are_rejected_by_name() {
    let ds = synth_dataset(&small_sim()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    persist::save_dataset(&ds, dir.path()).unwrap();
    let victim = dir.path().join(format!("sequences/{}.bin", ds.sequences[3].id()));
    let good = fs::read(&victim).unwrap();

    let mut bad = good.clone();
    bad[..5].copy_from_slice(b"POUR9");
    fs::write(&victim, &bad).unwrap();
    let e = persist::load_dataset(dir.path()).unwrap_err().to_string();
    assert!(e.contains(&ds.sequences[3].id()) && e.contains("magic"), "{e}");

    fs::write(&victim, &good[..good.len() - 10]).unwrap();
    let e = persist::load_dataset(dir.path()).unwrap_err().to_string();
    assert!(e.contains(&ds.sequences[3].id()), "{e}");

    fs::write(&victim, &good).unwrap();
    let manifest = dir.path().join("manifest.tsv");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replacen("\t6\t", "\t7\t", 1)).unwrap();
    let e = persist::load_dataset(dir.path()).unwrap_err().to_string();
    assert!(e.contains("T=7"), "{e}");

    fs::write(&manifest, text.replacen("success", "failure", 1)).unwrap();
    let e = persist::load_dataset(dir.path()).unwrap_err().to_string();
    assert!(e.contains("manifest.tsv") && e.contains("disagrees"), "{e}");
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let ds = synth_dataset(&small_sim()).unwrap();
    let folds = make_folds(&ds, Scheme::CrossUser).unwrap();
    let tm = trained(&ds);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    persist::save_checkpoint(&tm, &path).unwrap();
    let back = persist::load_checkpoint(&path).unwrap();
    assert_eq!(back.config, tm.config);
    assert_eq!(back.fold, tm.fold);
    assert_eq!(back.model.params, tm.model.params);
    assert_eq!(back.model.normalizer, tm.model.normalizer);
    let before = evaluate_fold(&tm, &ds, &folds[0]).unwrap();
    let after = evaluate_fold(&back, &ds, &folds[0]).unwrap();
    assert_eq!(before, after);
    let frames = &ds.sequences[0].frames;
    let (p, q) = (tm.model.predict(frames, true).unwrap(), back.model.predict(frames, true).unwrap());
    for (a, b) in p.steps.iter().zip(&q.steps) {
        assert_eq!(a.success.to_bits(), b.success.to_bits());
        assert_eq!(a.score.to_bits(), b.score.to_bits());
    }
    // Saving the loaded model reproduces the file.
    persist::save_checkpoint(&back, &dir.path().join("again.ckpt")).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(dir.path().join("again.ckpt")).unwrap());
}

fn echo_text(bytes: &[u8]) -> (usize, String) {
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    (len, String::from_utf8(bytes[16..16 + len].to_vec()).unwrap())
}

#[test]
fn checkpoint_rejects_newer_version_and_shape_mismatch() {
    let ds = synth_dataset(&small_sim()).unwrap();
    let bytes = persist::encode_checkpoint(&trained(&ds));
    let (_, echo) = echo_text(&bytes);
    assert!(echo.contains("lambda=1.0") && echo.contains("variant=full"), "{echo}");

    let mut newer = bytes.clone();
    newer[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    let e = persist::decode_checkpoint(Path::new("new.ckpt"), &newer).unwrap_err().to_string();
    assert!(e.contains("new.ckpt") && e.contains("version 2"), "{e}");

    // Same-length edit to the echo: the tensors no longer fit the configuration.
    let tampered = echo.replace("hidden_fuse=6", "hidden_fuse=7");
    assert_eq!(tampered.len(), echo.len());
    let mut bad = bytes.clone();
    bad[16..16 + echo.len()].copy_from_slice(tampered.as_bytes());
    let e = persist::decode_checkpoint(Path::new("bad.ckpt"), &bad).unwrap_err().to_string();
    assert!(e.contains("shape"), "{e}");

    let e = persist::decode_checkpoint(Path::new("short.ckpt"), &bytes[..bytes.len() - 1]).unwrap_err().to_string();
    assert!(e.contains("short.ckpt"), "{e}");
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let ds = synth_dataset(&small_sim()).unwrap();
    let a = persist::encode_checkpoint(&trained(&ds));
    let b = persist::encode_checkpoint(&trained(&ds));
    assert_eq!(a, b);
}
