use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[run]
seed = 2
precision = "f64"

[corpus]
n_records = 60

[model]
d_model = 8
n_layers = 1
n_heads = 2
ffn_mult = 2
patch_size = 8
sk_max_len = 16

[pretrain]
steps = 3
batch_size = 4
itc_queue = 8
report_queue = 8
warmup_steps = 1

[finetune.retrieval]
steps = 2
batch_size = 4
rerank_top_m = 3

[finetune.vqa]
steps = 2
batch_size = 4
"#;

fn kemp(dir: &Path, env: &[(&str, &str)], args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kemp"));
    cmd.current_dir(dir).args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("MOTOR_") {
            cmd.env_remove(k);
        }
    }
    cmd.envs(env.iter().copied());
    cmd.output().expect("spawn kemp")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn bad_config_key_exits_2() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.toml"), "[pretrain]\nstepz = 3\n").unwrap();
    let o = kemp(dir.path(), &[], &["--config", "bad.toml", "pretrain"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("stepz"));
}

#[test]
fn bad_env_override_exits_2() {
    let dir = setup();
    for (k, v) in [("MOTOR_PRETRAIN_STEPS", "\"many\""), ("MOTOR_PRETRAIN_NOPE", "1"), ("MOTOR_PRETRAIN_LR", "-1.0")] {
        let o = kemp(dir.path(), &[(k, v)], &["--config", "small.toml", "gradcheck"]);
        assert_eq!(o.status.code(), Some(2), "{k}={v}: {}", text(&o.stderr));
    }
}

#[test]
fn missing_checkpoint_is_a_plain_failure() {
    let dir = setup();
    let o = kemp(dir.path(), &[], &["--config", "small.toml", "gen-corpus"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let o = kemp(dir.path(), &[], &["--config", "small.toml", "eval", "retrieval", "--checkpoint", "nope.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_writes_report() {
    let dir = setup();
    let o = kemp(dir.path(), &[], &["--out", "gc", "gradcheck", "--dims", "tiny"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("gradcheck passed"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gc/gradcheck.json")).unwrap()).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() <= report["tolerance"].as_f64().unwrap());
}

#[test]
fn divergent_learning_rate_exits_3() {
    let dir = setup();
    let c = ["--config", "small.toml"];
    assert!(kemp(dir.path(), &[], &[&c[..], &["gen-corpus"]].concat()).status.success());
    let o = kemp(dir.path(), &[("MOTOR_PRETRAIN_LR", "1e30")], &[&c[..], &["pretrain"]].concat());
    assert_eq!(o.status.code(), Some(3), "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("non-finite"));
}

#[test]
fn end_to_end_small_run() {
    let dir = setup();
    let d = dir.path();
    let c = ["--config", "small.toml"];
    let run = |env: &[(&str, &str)], args: &[&str]| {
        let o = kemp(d, env, &[&c[..], args].concat());
        assert!(o.status.success(), "{args:?}: {}", text(&o.stderr));
        o
    };
    run(&[], &["gen-corpus"]);
    assert!(d.join("data/corpus/corpus.jsonl").exists() && d.join("data/corpus/vqa.jsonl").exists());

    let o = run(&[("MOTOR_PRETRAIN_LR", "0.002")], &["--out", "r", "pretrain"]);
    let echoed = text(&o.stderr);
    assert!(echoed.contains("lr = 0.002") && echoed.contains("d_model = 8"));
    let resolved = std::fs::read_to_string(d.join("r/config.resolved.toml")).unwrap();
    assert!(resolved.contains("lr = 0.002"));
    let losses = std::fs::read_to_string(d.join("r/pretrain_losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 4);

    run(&[], &["--out", "r", "finetune", "retrieval", "--checkpoint", "r/pretrain.ckpt"]);
    let o = run(&[], &["--out", "r", "eval", "retrieval", "--checkpoint", "r/finetune-retrieval.ckpt"]);
    let table = text(&o.stdout);
    assert!(table.contains("RR (i2t)") && table.contains("IR (t2i)") && table.contains("rerank 3"));
    let ranked = std::fs::read_to_string(d.join("r/predictions-retrieval-test.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(ranked.lines().next().unwrap()).unwrap();
    let gallery = ranked.lines().count();
    assert_eq!(first["i2t"].as_array().unwrap().len(), gallery);

    run(&[], &["--out", "r", "finetune", "vqa", "--checkpoint", "r/pretrain.ckpt"]);
    run(&[], &["--out", "r", "eval", "vqa", "--checkpoint", "r/finetune-vqa.ckpt"]);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("r/eval-vqa-test.json")).unwrap()).unwrap();
    assert!(metrics["metrics"]["closed_accuracy"].is_number());

    let o = kemp(d, &[], &[&c[..], &["--out", "r", "eval", "vqa", "--checkpoint", "r/pretrain.ckpt"]].concat());
    assert_eq!(o.status.code(), Some(1));

    run(&[], &["--out", "r", "export-attention", "--checkpoint", "r/pretrain.ckpt", "--limit", "2"]);
    let index = std::fs::read_to_string(d.join("r/attention/index.jsonl")).unwrap();
    assert_eq!(index.lines().count(), 2);
    let rec: serde_json::Value = serde_json::from_str(index.lines().next().unwrap()).unwrap();
    let gk = std::fs::read_to_string(d.join("r/attention").join(rec["attn_gk"].as_str().unwrap())).unwrap();
    let mut lines = gk.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    assert!(header.contains(&"effusion") && header.contains(&"lung"));
    for line in lines {
        let row: Vec<f64> = line.split('\t').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row.len(), header.len());
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-4);
    }
    let sk = std::fs::read_to_string(d.join("r/attention").join(rec["attn_sk"].as_str().unwrap())).unwrap();
    assert!(sk.lines().count() > 1);
}
