use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sound2img_core::audio::write_wav;
use sound2img_core::eval::MetricReport;
use sound2img_core::AudioClip;

fn sound2img(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sound2img"))
        .args(args)
        .env_remove("SOUND2IMG_CONFIG")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn clip(dir: &Path, name: &str, freq: f32) -> PathBuf {
    let path = dir.join(name);
    let c = AudioClip::new(
        (0..8000).map(|i| 0.5 * (i as f32 * freq).sin()).collect(),
        8000,
    )
    .unwrap();
    write_wav(&c, &path).unwrap();
    path
}

fn manifest(o: &Output) -> Value {
    let path = stdout(o).lines().next().unwrap().to_string();
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let a = clip(dir.path(), "a.wav", 0.05);
    let out = dir.path().join("out");

    let o = sound2img(&[
        "generate",
        "--audio",
        p(&a),
        "--out",
        p(&out),
        "--dso-steps",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let o = sound2img(&[
        "generate",
        "--audio",
        p(&a),
        "--out",
        p(&out),
        "--amplify",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("amplify"));

    let o = sound2img(&[
        "generate",
        "--audio",
        p(&a),
        "--out",
        p(&out),
        "--ablate",
        "no-everything",
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = sound2img(&[
        "generate",
        "--audio",
        p(&a),
        "--out",
        p(&out),
        "--backend-set",
        "real",
    ]);
    assert_eq!(o.status.code(), Some(3));

    let missing = dir.path().join("missing.wav");
    let o = sound2img(&["generate", "--audio", p(&missing), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(4));

    let garbage = dir.path().join("garbage.wav");
    std::fs::write(&garbage, b"RIFF....not audio").unwrap();
    let o = sound2img(&["generate", "--audio", p(&garbage), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = sound2img(&["generate", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablation_flags_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let a = clip(dir.path(), "a.wav", 0.05);
    let out = dir.path().join("out");
    let o = sound2img(&[
        "generate",
        "--audio",
        p(&a),
        "--out",
        p(&out),
        "--ablate",
        "no-dso,no-s-attn",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = manifest(&o);
    assert_eq!(
        m["config"]["ablation"],
        serde_json::json!(["no-s-attn", "no-dso"])
    );
    assert!(m["trace"].as_array().unwrap().is_empty());
    assert_eq!(m["w_init"], m["w_final"]);
    assert_eq!(m["run_id"], "a-s0-no-s-attn+no-dso");
}

#[test]
fn eval_table_matches_report() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    for (i, f) in [0.03f32, 0.09, 0.2].iter().enumerate() {
        let a = clip(dir.path(), &format!("c{i}.wav"), *f);
        let o = sound2img(&[
            "generate",
            "--audio",
            p(&a),
            "--out",
            p(&runs),
            "--dso-steps",
            "2",
            "--gt-caption",
            "a dog barks",
            "--expect",
            "dog",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let report = dir.path().join("report.json");
    let o = sound2img(&["eval", "--runs", p(&runs), "--report", p(&report)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = MetricReport::from_json(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r.sample_count, 3);
    assert_eq!(stdout(&o), r.render_table());
}

fn esc50(root: &Path) {
    for class in ["dog", "cat", "rain"] {
        std::fs::create_dir_all(root.join(class)).unwrap();
        for k in 0..3 {
            clip(
                &root.join(class),
                &format!("{class}{k}.wav"),
                0.02 + 0.01 * k as f32,
            );
        }
    }
}

#[test]
fn build_dataset_from_pair_file() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("esc50");
    esc50(&root);
    let pairs = dir.path().join("pairs.json");
    std::fs::write(
        &pairs,
        r#"{"pairs": [{"class_a": "dog", "class_b": "cat", "count": 4},
                      {"class_a": "dog", "class_b": "rain", "count": 2}],
            "expected_objects": {"dog": ["dog"], "cat": ["cat"]}}"#,
    )
    .unwrap();
    let mut outputs = Vec::new();
    for name in ["x", "y"] {
        let out = dir.path().join(name);
        let o = sound2img(&[
            "build-dataset",
            "--esc50-root",
            p(&root),
            "--pairs",
            p(&pairs),
            "--out",
            p(&out),
            "--seed",
            "1",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).trim_end().ends_with(": 6 files"));
        outputs.push(std::fs::read(out.join("dataset.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);

    let runs = dir.path().join("runs");
    let dataset = dir.path().join("x").join("dataset.json");
    let o = sound2img(&[
        "generate",
        "--dataset",
        p(&dataset),
        "--out",
        p(&runs),
        "--dso-steps",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 6);
    let m = manifest(&o);
    assert_eq!(
        m["annotations"]["expected_classes"],
        serde_json::json!(["cat", "dog"])
    );
}

#[test]
fn build_dataset_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("esc50");
    esc50(&root);
    let pairs = dir.path().join("pairs.json");
    std::fs::write(&pairs, r#"{"pairs": [], "expected_objects": {}}"#).unwrap();
    let out = dir.path().join("out");
    let o = sound2img(&[
        "build-dataset",
        "--esc50-root",
        p(&root),
        "--pairs",
        p(&pairs),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no pairs"));

    let o = sound2img(&[
        "build-dataset",
        "--esc50-root",
        p(&root),
        "--pairs",
        "default",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!out.join("dataset.json").exists());
}

#[test]
fn config_file_and_environment() {
    let dir = tempfile::tempdir().unwrap();
    let a = clip(dir.path(), "a.wav", 0.05);
    let cfg = dir.path().join("run.conf");
    std::fs::write(
        &cfg,
        "# shared settings\nseed = 7\ndso_steps = 2\nesc50_root = /nowhere\n",
    )
    .unwrap();

    let out = dir.path().join("flag");
    let o = sound2img(&[
        "generate",
        "--config",
        p(&cfg),
        "--audio",
        p(&a),
        "--out",
        p(&out),
        "--seed",
        "8",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = manifest(&o);
    assert_eq!(m["seed"], 8);
    assert_eq!(m["trace"].as_array().unwrap().len(), 2);

    let out = dir.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_sound2img"))
        .args(["generate", "--audio", p(&a), "--out", p(&out)])
        .env("SOUND2IMG_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(manifest(&o)["seed"], 7);

    std::fs::write(&cfg, "seeed = 7\n").unwrap();
    let o = sound2img(&[
        "generate",
        "--config",
        p(&cfg),
        "--audio",
        p(&a),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"));
}

#[test]
fn ablate_shares_initial_image() {
    let dir = tempfile::tempdir().unwrap();
    let a = clip(dir.path(), "a.wav", 0.05);
    let out = dir.path().join("abl");
    let o = sound2img(&[
        "ablate",
        "--audio",
        p(&a),
        "--out",
        p(&out),
        "--dso-steps",
        "2",
        "--jobs",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 7);
    let read = |v: &str, f: &str| std::fs::read(out.join("a-s0").join(v).join(f)).unwrap();
    assert_eq!(read("full", "i_init.png"), read("wo-opt", "i_init.png"));
    assert_eq!(read("wo-opt", "i_init.png"), read("wo-opt", "image.png"));
    let rows: Vec<Value> =
        serde_json::from_slice(&std::fs::read(out.join("ablation.json")).unwrap()).unwrap();
    let variants: Vec<&str> = rows
        .iter()
        .map(|r| r["variant"].as_str().unwrap())
        .collect();
    assert_eq!(
        variants,
        [
            "full",
            "wo-all",
            "wo-attns",
            "wo-a-attn",
            "wo-s-attn",
            "wo-opt"
        ]
    );
}
