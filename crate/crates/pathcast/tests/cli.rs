use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pathcast::report::NmseReport;

const SCHEDULE: &str = r#"
image_hw = 16
grid_n = 8

[[rows]]
scenario = "crossroad"
altitude_m = 70.0
frequency_hz = 1.6e9
snapshots = 10

[[rows]]
scenario = "crossroad"
altitude_m = 70.0
frequency_hz = 15e9
snapshots = 10

[[rows]]
scenario = "crossroad"
altitude_m = 70.0
frequency_hz = 28e9
snapshots = 10
"#;

const SENSORY: &str = r#"
stage = "codec_sensory"
epochs = 1

[codec]
modality = "sensory"
input_hw = 16
channels = [4, 4]
res_blocks = [0, 0]
mid_blocks = 0
n_z = 4
codebook_size = 8
disc_channels = [4]
"#;

const CHANNEL: &str = r#"
stage = "codec_channel"
epochs = 1

[codec]
modality = "channel"
input_hw = 8
channels = [4]
res_blocks = [0]
mid_blocks = 0
n_z = 4
codebook_size = 8
disc_channels = [4]
"#;

const MAPPER: &str = r#"
stage = "mapper"
epochs = 2
filter = [
  { scenario = "crossroad", altitude_m = 70.0, frequency_hz = 1.6e9 },
  { scenario = "crossroad", altitude_m = 70.0, frequency_hz = 28e9 },
]

[mapper]
n_blocks = 1
n_heads = 1
d_model = 8
d_ff = 8
freq_dim = 4
"#;

const FINETUNE: &str = r#"
stage = "finetune"
epochs = 1
"#;

fn pathcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathcast"))
        .args(args)
        .env_remove("PATHCAST_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pathcast(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let data = d.join("data");
    let schedule = write(d, "schedule.toml", SCHEDULE);
    ok(&["gen-data", "--schedule", s(&schedule), "--seed", "3", "--out", s(&data)]);
    assert!(data.join("manifest.json").exists());

    let (cs, cc, m) = (d.join("s.ckpt"), d.join("c.ckpt"), d.join("m.ckpt"));
    let sensory = write(d, "sensory.toml", SENSORY);
    let channel = write(d, "channel.toml", CHANNEL);
    let mapper = write(d, "mapper.toml", MAPPER);
    ok(&["train-codec", "--modality", "sensory", "--data", s(&data), "--config", s(&sensory), "--out", s(&cs)]);
    ok(&["train-codec", "--modality", "channel", "--data", s(&data), "--config", s(&channel), "--out", s(&cc)]);
    ok(&["train-mapper", "--data", s(&data), "--codec-s", s(&cs), "--codec-c", s(&cc), "--config", s(&mapper), "--out", s(&m)]);

    let seen = ["--condition", "crossroad/70m/1.6GHz", "--condition", "crossroad/70m/28GHz"];
    let report = d.join("eval.csv");
    let mut args = vec!["eval", "--data", s(&data), "--codec-s", s(&cs), "--codec-c", s(&cc), "--mapper", s(&m), "--out", s(&report)];
    args.extend(seen);
    ok(&args);
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 3);

    // the unseen band needs --zero-shot
    let unseen = ["eval", "--data", s(&data), "--codec-s", s(&cs), "--codec-c", s(&cc), "--mapper", s(&m), "--condition", "crossroad/70m/15GHz"];
    assert_eq!(pathcast(&unseen).status.code(), Some(2));
    let zs = d.join("zs.json");
    let mut args = unseen.to_vec();
    args.extend(["--zero-shot", "--out", s(&zs)]);
    ok(&args);

    let tuned = d.join("t.ckpt");
    let finetune = write(d, "finetune.toml", FINETUNE);
    ok(&[
        "finetune", "--data", s(&data), "--codec-s", s(&cs), "--codec-c", s(&cc), "--mapper", s(&m),
        "--target", "crossroad/70m/15GHz", "--fraction", "0.5", "--config", s(&finetune), "--out", s(&tuned),
    ]);
    let fs_report = d.join("fs.json");
    ok(&["eval", "--data", s(&data), "--codec-s", s(&cs), "--codec-c", s(&cc), "--mapper", s(&tuned), "--condition", "crossroad/70m/15GHz", "--out", s(&fs_report)]);

    let merged = d.join("merged.json");
    ok(&["report", s(&zs), s(&fs_report), "--out", s(&merged)]);
    assert_eq!(NmseReport::load(&merged).unwrap().rows.len(), 2);

    // a mapper checkpoint refuses codecs it was not trained against
    let other = d.join("s2.ckpt");
    ok(&["train-codec", "--modality", "sensory", "--data", s(&data), "--config", s(&sensory), "--seed", "9", "--out", s(&other)]);
    let stale = pathcast(&["eval", "--data", s(&data), "--codec-s", s(&other), "--codec-c", s(&cc), "--mapper", s(&m)]);
    assert_eq!(stale.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&stale.stderr).contains("trained against"));

    // swapped codecs are a contract violation
    let swapped = pathcast(&["eval", "--data", s(&data), "--codec-s", s(&cc), "--codec-c", s(&cs), "--mapper", s(&m)]);
    assert_eq!(swapped.status.code(), Some(2));
}

#[test]
fn training_is_reproducible_and_seeded_from_env() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let data = d.join("data");
    let schedule = write(d, "schedule.toml", SCHEDULE);
    ok(&["gen-data", "--schedule", s(&schedule), "--out", s(&data)]);
    let channel = write(d, "channel.toml", CHANNEL);
    let run = |name: &str, seed: Option<&str>| {
        let out = d.join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_pathcast"));
        cmd.args(["train-codec", "--modality", "channel", "--data", s(&data), "--config", s(&channel), "--out", s(&out)]);
        match seed {
            Some(v) => cmd.env("PATHCAST_SEED", v),
            None => cmd.env_remove("PATHCAST_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        fs::read(out).unwrap()
    };
    let a = run("a.ckpt", None);
    assert_eq!(a, run("b.ckpt", None));
    assert_ne!(a, run("c.ckpt", Some("17")));
}

#[test]
fn contract_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let bad = write(d, "bad.toml", "image_hw = 16\ngrid_n = 8\nrows = []\n");
    assert_eq!(pathcast(&["gen-data", "--schedule", s(&bad), "--out", s(&d.join("x"))]).status.code(), Some(2));

    let data = d.join("data");
    let schedule = write(d, "schedule.toml", SCHEDULE);
    ok(&["gen-data", "--schedule", s(&schedule), "--out", s(&data)]);
    let zero_lr = write(d, "lr.toml", "stage = \"codec_channel\"\nepochs = 1\n[optimizer]\nlr = 0.0\n");
    let out = pathcast(&["train-codec", "--modality", "channel", "--data", s(&data), "--config", s(&zero_lr), "--out", s(&d.join("c"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.join("c").exists());

    let wrong_stage = write(d, "stage.toml", "stage = \"mapper\"\nepochs = 1\n");
    let out = pathcast(&["train-codec", "--modality", "channel", "--data", s(&data), "--config", s(&wrong_stage), "--out", s(&d.join("c"))]);
    assert_eq!(out.status.code(), Some(2));

    let missing = pathcast(&["eval", "--data", s(&d.join("nowhere")), "--baseline", "b.ckpt"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn baseline_and_plan_verbs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let data = d.join("data");
    let schedule = write(d, "schedule.toml", SCHEDULE);
    ok(&["gen-data", "--schedule", s(&schedule), "--out", s(&data)]);
    let cfg = write(d, "b.toml", "stage = \"mapper\"\nepochs = 1\n");
    let b = d.join("b.ckpt");
    ok(&["train-baseline", "--data", s(&data), "--config", s(&cfg), "--out", s(&b)]);
    let out = ok(&["eval", "--data", s(&data), "--baseline", s(&b)]);
    assert_eq!(out.lines().filter(|l| l.starts_with("baseline")).count(), 3);

    let spec = write(
        d,
        "spec.toml",
        &format!(
            "{}\n{}\n{}\n",
            "[sensory]\ninput_hw = 16\nchannels = [4, 4]\nres_blocks = [0, 0]\nmid_blocks = 0\nn_z = 4\ncodebook_size = 8\ndisc_channels = [4]",
            "[channel]\nmodality = \"channel\"\ninput_hw = 8\nchannels = [4]\nres_blocks = [0]\nmid_blocks = 0\nn_z = 4\ncodebook_size = 8\ndisc_channels = [4]",
            "[mapper]\nn_blocks = 1\nn_heads = 1\nd_model = 8\nd_ff = 8\nfreq_dim = 4\n[codec_train]\nstage = \"codec_sensory\"\nepochs = 1\n[mapper_train]\nstage = \"mapper\"\nepochs = 1\n[finetune_train]\nstage = \"finetune\"\nepochs = 1\n[baseline_train]\nstage = \"mapper\"\nepochs = 1\n[baseline]\nimage_hw = 16\ngrid_n = 8\nwidth = 4\nres_blocks = 0",
        ),
    );
    let plan = write(
        d,
        "plan.toml",
        r#"
name = "zs"
mode = "few_shot"
seed = 2
fewshot_fractions = [0.5]
train_conditions = [
  { scenario = "crossroad", altitude_m = 70.0, frequency_hz = 1.6e9 },
  { scenario = "crossroad", altitude_m = 70.0, frequency_hz = 28e9 },
]
test_conditions = [{ scenario = "crossroad", altitude_m = 70.0, frequency_hz = 15e9 }]
"#,
    );
    let report = d.join("plan.csv");
    ok(&["run-plan", "--plan", s(&plan), "--data", s(&data), "--config", s(&spec), "--out", s(&report)]);
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("zero_shot") && text.contains("few_shot"));

    let abl = d.join("abl.json");
    ok(&["ablate", "--data", s(&data), "--config", s(&spec), "--out", s(&abl)]);
    let modes: Vec<String> = NmseReport::load(&abl).unwrap().rows.into_iter().map(|r| r.mode).collect();
    assert_eq!(modes.len(), 9);
    assert!(modes.iter().any(|m| m == "no_srmoe"));
}
