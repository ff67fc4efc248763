use std::fs;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_desklm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn ctxwin_prints_exact_fractions() {
    let o = bin(&["ctxwin", "--len", "1024", "--k", "64"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "959/1024 0.936523");
    let o = bin(&["ctxwin", "--len", "128", "--k", "64", "--inclusive"]);
    assert_eq!(stdout(&o).trim(), "64/128 0.500000");
}

#[test]
fn dims_of_presets() {
    let o = bin(&["dims", "short-cached", "cached"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("cached,512x1024,"));
    let o = bin(&["dims", "long-context", "nonoverlapping"]);
    assert!(stdout(&o).contains("nonoverlapping,3072x3072,"));
}

#[test]
fn usage_errors_exit_nonzero() {
    assert!(!bin(&["ctxwin", "--len", "0", "--k", "1"]).status.success());
    assert!(!bin(&["dims", "no-such-config", "cached"]).status.success());
    assert!(!bin(&["dims", "desk", "sideways"]).status.success());
    assert!(!bin(&["frobnicate"]).status.success());

    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let o = bin(&["recipe", "length-sweep", "--corpus", empty.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty"));
    let o = bin(&["recipe", "no-such-recipe", "--corpus", empty.to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn train_eval_generate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let text = "to be or not to be that is the question. ".repeat(80);
    fs::write(dir.path().join("text.txt"), &text).unwrap();
    fs::write(
        dir.path().join("run.cfg"),
        "# tiny cached model\ncorpus = text.txt\nvariant = pia\nuse_cache = true\nL = 16\n\
         d_model = 16\nn_heads = 2\nd_ff = 32\nstages = 8:1,16:1\ntokens_per_batch = 128\n\
         lr = 0.003\nout = run\n",
    )
    .unwrap();
    let cfg = dir.path().join("run.cfg");
    let o = bin(&["train", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.starts_with("epoch,stage,L,train_loss,dev_ppl,wall_seconds,attention_dot_products"));

    let ckpt = dir.path().join("run/model.ckpt");
    let data = dir.path().join("text.txt");
    let (ckpt, data) = (ckpt.to_str().unwrap(), data.to_str().unwrap());
    for mode in [vec!["cached"], vec!["nonoverlapping"], vec!["sliding", "--stride", "4"]] {
        let mut args = vec!["eval", ckpt];
        args.extend(mode);
        args.extend(["--data", data]);
        let o = bin(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(stdout(&o).lines().count(), 2);
    }
    assert!(!bin(&["eval", ckpt, "sliding", "--data", data]).status.success());

    let o = bin(&["generate", ckpt, "--n", "20", "--prompt", "to be "]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = bin(&["generate", ckpt, "--n", "20", "--data", data, "--teacher-forced"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("teacher-forced ppl"));
    assert!(!bin(&["generate", ckpt, "--n", "5", "--prompt", "to", "--teacher-forced"]).status.success());

    // resuming a finished run does nothing and succeeds
    let state = dir.path().join("run/state.bin");
    let o = bin(&["train", cfg.to_str().unwrap(), "--resume", state.to_str().unwrap()]);
    assert!(o.status.success());
}
