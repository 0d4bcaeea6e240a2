use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pourmon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pourmon")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL: &str = "frames=5\nd_img=6\nimu_samples=3\nusers=2\ntrials=1\n";
const TINY_MODEL: &str = "hidden_img=5\nhidden_pos=3\nhidden_rot=3\nhidden_fuse=5\ngenerator_width=4\n\
discriminator_width=4\nmonitor_width=5\nepochs=2\nlearning_rate=0.001\n";

#[test]
fn gen_counts_match_combinatorics() {
    let dir = tempfile::tempdir().unwrap();
    let one = write_config(dir.path(), "one.cfg", "trials=1\nframes=3\nd_img=4\nimu_samples=2\n");
    let out = pourmon(&["gen", "--config", &one, "--out", dir.path().join("a").to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "360 sequences written");
    let full = write_config(dir.path(), "full.cfg", "frames=3\nd_img=4\nimu_samples=2\n");
    let out = pourmon(&["gen", "--config", &full, "--out", dir.path().join("b").to_str().unwrap()]);
    assert_eq!(stdout(&out).trim(), "1800 sequences written");
}

#[test]
fn gen_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s.cfg", SMALL);
    for name in ["a", "b"] {
        let o = pourmon(&["gen", "--config", &cfg, "--seed", "5", "--out", dir.path().join(name).to_str().unwrap()]);
        assert!(o.status.success());
    }
    let a = fs::read(dir.path().join("a/manifest.tsv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/manifest.tsv")).unwrap());
    let first = String::from_utf8(a).unwrap().lines().nth(1).unwrap().split('\t').last().unwrap().to_string();
    assert_eq!(fs::read(dir.path().join("a").join(&first)).unwrap(), fs::read(dir.path().join("b").join(&first)).unwrap());
}

#[test]
fn unknown_config_key_and_bad_variant_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", "trials=1\nflavour=sweet\n");
    let o = pourmon(&["gen", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("flavour"));
    let o = pourmon(&["train", "--data", "nowhere", "--variant", "sideways", "--scheme", "cross-user", "--out", "x"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("sideways"));
}

#[test]
fn train_eval_monitor_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_string_lossy().into_owned();
    let sim = write_config(dir.path(), "s.cfg", SMALL);
    let model = write_config(dir.path(), "m.cfg", TINY_MODEL);
    assert!(pourmon(&["gen", "--config", &sim, "--out", &d("data")]).status.success());

    for variant in ["vanilla", "full"] {
        let o = pourmon(&[
            "train", "--data", &d("data"), "--variant", variant, "--scheme", "cross-user", "--config", &model, "--out", &d("ck"),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let log = fs::read_to_string(d("ck/vanilla-hier-cross-user-0.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch\tL_reg\tL_adv\tL_Gen\tL_Dis\tL_cls\tL_mon");
    assert_eq!(lines.len(), 3);
    let cols: Vec<&str> = lines[1].split('\t').collect();
    assert!(cols[1..6].iter().all(|c| c.parse::<f64>().unwrap() == 0.0), "{}", lines[1]);

    let o = pourmon(&["eval", "--checkpoint", &d("ck"), "--data", &d("data"), "--scheme", "cross-user", "--out", &d("rep")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.contains("Succ./Fail. Acc.") && table.contains("full/hier") && table.contains("vanilla/hier"));
    let csv = fs::read_to_string(d("rep/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert_eq!(fs::read_to_string(d("rep/report.txt")).unwrap(), table);
    let again = pourmon(&["eval", "--checkpoint", &d("ck"), "--data", &d("data"), "--scheme", "cross-user"]);
    assert_eq!(stdout(&again), table);

    let o = pourmon(&["eval", "--checkpoint", &d("ck"), "--data", &d("data"), "--scheme", "cross-trial"]);
    assert!(!o.status.success());

    let manifest = fs::read_to_string(d("data/manifest.tsv")).unwrap();
    let seq = manifest.lines().nth(2).unwrap().split('\t').last().unwrap().to_string();
    let seq_path = dir.path().join("data").join(&seq).to_string_lossy().into_owned();
    let o = pourmon(&["monitor", "--checkpoint", &d("ck/vanilla-hier-cross-user-0.ckpt"), "--sequence", &seq_path]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 1 + 4 + 1);
    assert!(lines[1..5].iter().all(|l| l.ends_with("\t0.500000")));
    assert!(lines[5].starts_with("verdict\t"));

    let o = pourmon(&["monitor", "--checkpoint", &d("ck/missing.ckpt"), "--sequence", &seq_path]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing.ckpt"));
}

#[test]
fn cross_container_trains_nine_classes() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_string_lossy().into_owned();
    let sim = write_config(dir.path(), "s.cfg", "frames=4\nd_img=6\nimu_samples=3\nusers=1\ntrials=1\n");
    let model = write_config(dir.path(), "m.cfg", TINY_MODEL);
    assert!(pourmon(&["gen", "--config", &sim, "--out", &d("data")]).status.success());
    let o = pourmon(&[
        "train", "--data", &d("data"), "--variant", "iosc", "--scheme", "cross-container", "--holdout", "d", "--config", &model,
        "--epochs", "1", "--out", &d("ck"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = pourmon(&["eval", "--checkpoint", &d("ck/iosc-hier-cross-container-d.ckpt"), "--data", &d("data"), "--scheme", "cross-container"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("iosc/hier"));
}

#[test]
fn gradcheck_passes_and_reports_injected_fault() {
    let o = pourmon(&["gradcheck", "--seed", "2"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1 + 17);
    assert!(out.contains("loss_mon") && out.contains("fusion"));

    let o = pourmon(&["gradcheck", "--inject-fault", "tanh"]);
    assert!(!o.status.success());
    let out = stdout(&o);
    let failed: Vec<&str> = out.lines().filter(|l| l.ends_with("FAIL")).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert!(failed.contains(&"lstm_img") && failed.contains(&"generator"), "{out}");
}
