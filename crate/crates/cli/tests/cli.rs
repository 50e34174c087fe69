// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::Command;

use latentscope::container::TensorFile;
use latentscope::{Edit, HookPoint, Model, ResidualActivations, SaeModel, TokenSequence};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_latentscope");

const SMALL_CORPUS: &str = "seed = 11\nn_docs = 200\n[fixture]\nd_model = 16\nn_layers = 2\n";
const SMALL_SAE: &str = "seed = 12\nwidth = 16\nsteps = 300\nbatch_size = 32\n";

fn run(dir: &Path, config: Option<&str>, args: &[&str]) -> std::process::Output {
    let mut cmd = Command::new(BIN);
    cmd.arg("--out-dir").arg(dir).env_remove("SOURCE_DATE_EPOCH");
    if let Some(text) = config {
        let path = dir.with_extension(format!("{}.toml", args.last().unwrap()));
        std::fs::write(&path, text).unwrap();
        cmd.arg("--config").arg(path);
    }
    cmd.args(args).output().unwrap()
}

fn ok(dir: &Path, config: Option<&str>, args: &[&str]) {
    let out = run(dir, config, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn small_pipeline(dir: &Path) {
    ok(dir, Some(SMALL_CORPUS), &["gen-corpus"]);
    ok(dir, Some(SMALL_SAE), &["train-sae"]);
}

fn artifact_names(manifest: &Value) -> Vec<String> {
    manifest["artifacts"].as_array().unwrap().iter().map(|a| a["name"].as_str().unwrap().to_string()).collect()
}

#[test]
fn gen_corpus_writes_listed_files_and_echoes_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out");
    let out = run(&dir, Some(SMALL_CORPUS), &["--seed", "99", "gen-corpus"]);
    assert!(out.status.success());
    let manifest = json(dir.join("gen-corpus.manifest.json"));
    let names = artifact_names(&manifest);
    for name in ["corpus.jsonl", "vocab.json", "model.lsc", "fixture.json", "corpus_summary.json"] {
        assert!(names.iter().any(|n| n == name), "{name} missing from manifest");
        assert!(dir.join(name).exists());
    }
    assert_eq!(manifest["config"]["seed"], 99);
    assert_eq!(manifest["config"]["n_docs"], 200);
    assert_eq!(manifest["config"]["fixture"]["d_model"], 16);
    assert_eq!(manifest["command"], "gen-corpus");
    let printed = String::from_utf8(out.stdout).unwrap();
    assert_eq!(printed.lines().count(), names.len() + 1);
}

#[test]
fn rerun_is_byte_identical_and_seed_changes_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for d in [&a, &b] {
        small_pipeline(d);
    }
    ok(&c, Some(SMALL_CORPUS), &["--seed", "5", "gen-corpus"]);
    for name in ["corpus.jsonl", "model.lsc", "sae.lsc", "sae_training.csv", "train-sae.manifest.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert_ne!(std::fs::read(a.join("corpus.jsonl")).unwrap(), std::fs::read(c.join("corpus.jsonl")).unwrap());
}

#[test]
fn invalid_config_fails_without_partial_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out");
    for bad in ["n_docs = 0\n", "doc_length_min = 30\ndoc_length_max = 10\n", "correlation = 2.0\n", "no_such_key = 1\n"] {
        let out = run(&dir, Some(bad), &["gen-corpus"]);
        assert!(!out.status.success(), "accepted {bad:?}");
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(stderr.starts_with("error: "), "{stderr}");
        assert!(!dir.exists() || std::fs::read_dir(&dir).unwrap().next().is_none(), "files left after {bad:?}");
    }
}

#[test]
fn missing_inputs_name_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out");
    let out = run(&dir, None, &["train-sae"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.lsc"));
    assert!(!dir.exists());
}

#[test]
fn manifests_chain_by_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out");
    small_pipeline(&dir);
    let gen = json(dir.join("gen-corpus.manifest.json"));
    let train = json(dir.join("train-sae.manifest.json"));
    for input in train["inputs"].as_array().unwrap() {
        let produced = gen["artifacts"].as_array().unwrap().iter().find(|a| a["name"] == input["name"]).unwrap();
        assert_eq!(produced["sha256"], input["sha256"]);
    }
    for artifact in train["artifacts"].as_array().unwrap() {
        let bytes = std::fs::read(dir.join(artifact["name"].as_str().unwrap())).unwrap();
        assert_eq!(artifact["sha256"], latentscope_cli::manifest::sha256_hex(&bytes));
    }
}

#[test]
fn worker_count_does_not_change_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out");
    small_pipeline(&dir);
    let effect = "n_inputs = 6\ncontext_len = 6\n";
    let (one, many) = (tmp.path().join("one"), tmp.path().join("many"));
    for (out, jobs) in [(&one, "1"), (&many, "4")] {
        let cfg = tmp.path().join("effect.toml");
        std::fs::write(&cfg, effect).unwrap();
        let status = Command::new(BIN)
            .args(["--jobs", jobs, "--in-dir"])
            .arg(&dir)
            .arg("--out-dir")
            .arg(out)
            .arg("--config")
            .arg(&cfg)
            .arg("effect")
            .status()
            .unwrap();
        assert!(status.success());
    }
    for name in ["latent_effects.csv", "latent_effects.svg", "effect_report.json"] {
        assert_eq!(std::fs::read(one.join(name)).unwrap(), std::fs::read(many.join(name)).unwrap(), "{name}");
    }
}

fn load<T>(dir: &Path, name: &str, f: impl Fn(TensorFile) -> latentscope::Result<T>) -> T {
    f(TensorFile::from_bytes(&std::fs::read(dir.join(name)).unwrap()).unwrap()).unwrap()
}

#[test]
fn effect_matches_brute_force_oracle_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out");
    small_pipeline(&dir);
    ok(&dir, Some("n_inputs = 5\ncontext_len = 5\nslot = \"group_b\"\n"), &["effect"]);

    let model = load(&dir, "model.lsc", Model::from_container);
    let sae = load(&dir, "sae.lsc", SaeModel::from_container);
    assert_eq!(sae.width(), 16);
    let fixture = json(dir.join("fixture.json"));
    let (yes, no) = (fixture["answer"]["yes"].as_u64().unwrap() as usize, fixture["answer"]["no"].as_u64().unwrap() as usize);
    let inputs: Vec<TokenSequence> = json(dir.join("effect_inputs.json"))
        .as_array()
        .unwrap()
        .iter()
        .map(|i| TokenSequence(i["tokens"].as_array().unwrap().iter().map(|t| t.as_u64().unwrap() as u32).collect()))
        .collect();
    assert!(inputs.iter().all(|x| x.len() <= 6));
    let hook = HookPoint::pre(1);
    let metric = |l: &latentscope::Matrix| l.get(l.rows() - 1, yes) - l.get(l.rows() - 1, no);

    // brute force: zero one latent at one position by subtracting its decoded contribution
    let mut oracle = String::from("latent_id,E\n");
    for j in 0..sae.width() {
        let col = sae.decoder_column(j);
        let mut total = 0.0;
        for x in &inputs {
            let clean = metric(&model.forward(x).unwrap());
            let h = model.capture(x, hook).unwrap();
            for t in 0..x.len() {
                let code = sae.encode(h.row(t)).unwrap().values()[j];
                let col = &col;
                let edit = move |a: &ResidualActivations| -> latentscope::Result<ResidualActivations> {
                    let mut out = a.clone();
                    out.row_mut(t).iter_mut().zip(col).for_each(|(o, c)| *o -= code * c);
                    Ok(out)
                };
                total += metric(&model.forward_with_intervention(x, &[Edit::new(hook, &edit)]).unwrap()) - clean;
            }
        }
        oracle.push_str(&format!("{j},{}\n", total / inputs.len() as f64));
    }
    let oracle_path = tmp.path().join("oracle.csv");
    std::fs::write(&oracle_path, &oracle).unwrap();

    let parse = |text: &str, cols: usize| -> Vec<(usize, f64)> {
        text.lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                assert!(f.len() >= cols);
                (f[0].parse().unwrap(), f[1].parse().unwrap())
            })
            .collect()
    };
    let got = parse(&std::fs::read_to_string(dir.join("latent_effects.csv")).unwrap(), 4);
    let want = parse(&std::fs::read_to_string(&oracle_path).unwrap(), 2);
    assert_eq!(got.len(), 16);
    for ((gj, ge), (wj, we)) in got.iter().zip(&want) {
        assert_eq!(gj, wj);
        assert!((ge - we).abs() < 1e-9, "latent {gj}: {ge} vs {we}");
    }
}

#[test]
fn strict_turns_degenerate_statistics_into_exit_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out");
    small_pipeline(&dir);
    ok(&dir, None, &["probe"]);
    let audit = "n_pairs = 1\ncontext_len = 6\n";
    let plain = run(&dir, Some(audit), &["audit"]);
    assert!(plain.status.success());
    let report = json(dir.join("report.json"));
    assert!(!report["degeneracy_flags"].as_array().unwrap().is_empty());

    let strict = run(&dir, Some(audit), &["--strict", "audit"]);
    assert_eq!(strict.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&strict.stderr).contains("degenerate"));
    // artifacts are still written so the flags can be inspected
    assert!(dir.join("report.json").exists());
}

#[test]
fn precision_flag_is_recorded_and_applied() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_pipeline(&a);
    let effect = "n_inputs = 3\ncontext_len = 4\nlatents = [0, 1, 2]\n";
    ok(&a, Some(effect), &["effect"]);
    let cfg = tmp.path().join("e.toml");
    std::fs::write(&cfg, effect).unwrap();
    let status = Command::new(BIN)
        .args(["--precision", "fp32", "--in-dir"])
        .arg(&a)
        .arg("--out-dir")
        .arg(&b)
        .arg("--config")
        .arg(&cfg)
        .arg("effect")
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(json(b.join("effect.manifest.json"))["precision"], "fp32");
    assert_eq!(json(a.join("effect.manifest.json"))["precision"], Value::Null);
    let read = |d: &Path| std::fs::read_to_string(d.join("latent_effects.csv")).unwrap();
    assert_ne!(read(&a), read(&b));
}
