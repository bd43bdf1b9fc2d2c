use std::path::Path;
use std::process::Command;

fn fbseg(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fbseg")).args(args).output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    fbseg(args).status.code().unwrap()
}

fn tiny_train(out: &Path, variant: &str) {
    let out = out.to_str().unwrap();
    let o = fbseg(&["train", "--variant", variant, "--epochs", "2", "--synth-images", "14", "--seed", "3", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn exit_codes() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["train", "--variant", "bogus"]), 2);
    assert_eq!(code(&["train", "--tap", "three-conv"]), 2);
    assert_eq!(code(&["train", "--epochs", "0"]), 2);
    assert_eq!(code(&["train", "--seed", "1", "--seeds", "2"]), 2);
    assert_eq!(code(&["train", "--dataset", "/no/such/dir"]), 3);
    assert_eq!(code(&["eval", "--run", "/no/such/run"]), 3);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny\nepochs = 1\nsynth-images = 14\nvariant = st\nout = ignored\n").unwrap();
    let out = dir.path().join("run");
    let o = fbseg(&["train", "--config", cfg.to_str().unwrap(), "--variant", "unet", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(text.contains("epochs = 1\n") && text.contains("variant = unet\n"), "{text}");
    assert!(out.join("checkpoints/unet-f0-s0/model.bin").is_file());
}

#[test]
fn eval_reproduces_test_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    tiny_train(&run, "st,unet");
    assert_eq!(code(&["eval", "--run", run.to_str().unwrap()]), 0);
    let train = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let eval = std::fs::read_to_string(run.join("eval_test.csv")).unwrap();
    assert_eq!(train, eval);
    assert_eq!(train.lines().count(), 1 + 4);
    for name in ["summary.csv", "history.csv", "index.csv", "seeds.txt"] {
        assert!(run.join(name).is_file(), "{name}");
    }
}

#[test]
fn export_attention_writes_maps() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    tiny_train(&run, "self,unet");
    let data = dir.path().join("syn");
    assert_eq!(code(&["synth", "--out", data.to_str().unwrap(), "--images", "1", "--size", "32"]), 0);
    let image = data.join("images/synth0000.png");
    let out = dir.path().join("att");
    let ckpt = run.join("checkpoints/self-f0-s3");
    let args = |ckpt: &Path, q: &str| {
        vec![
            "export-attention".to_string(),
            "--checkpoint".into(),
            ckpt.to_str().unwrap().into(),
            "--image".into(),
            image.to_str().unwrap().into(),
            "--query".into(),
            q.into(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ]
    };
    let a = args(&ckpt, "5,9");
    assert_eq!(code(&a.iter().map(String::as_str).collect::<Vec<_>>()), 0);
    let map = image::open(out.join("attention_y5_x9.png")).unwrap().to_luma8();
    assert_eq!(map.dimensions(), (32, 32));
    assert_eq!(map.pixels().map(|p| p.0[0]).max(), Some(255));
    let pred = image::open(out.join("prediction.png")).unwrap().to_luma8();
    assert!(pred.pixels().all(|p| p.0[0] < 4));

    let a = args(&ckpt, "32,0");
    assert_eq!(code(&a.iter().map(String::as_str).collect::<Vec<_>>()), 2);
    let a = args(&run.join("checkpoints/unet-f0-s3"), "1,1");
    assert_eq!(code(&a.iter().map(String::as_str).collect::<Vec<_>>()), 2);
}
