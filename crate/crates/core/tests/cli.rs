use std::path::Path;

use infomask::cli::run;
use infomask::pgm;

const TINY: [&str; 11] = [
    "n_train=64",
    "n_val=32",
    "n_test=32",
    "synth.image_size=32",
    "width_divisor=16",
    "epochs=2",
    "n_checkpoints=2",
    "reg_delay=4",
    "reg_ramp=4",
    "eval_batch=32",
    "methods=infomask,gradcam",
];

fn infomask(args: &[&str]) -> i32 {
    let mut argv = vec!["infomask".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    run(argv)
}

fn with_tiny<'a>(mut args: Vec<&'a str>) -> Vec<&'a str> {
    for s in TINY {
        args.push("--set");
        args.push(s);
    }
    args
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_command_sequence() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (data, train, eval, loc, cmp, rep) =
        (root.join("data"), root.join("train"), root.join("eval"), root.join("loc"), root.join("cmp"), root.join("rep"));

    assert_eq!(infomask(&with_tiny(vec!["gen-data", "--out", p(&data)])), 0);
    for f in ["train.csv", "val.csv", "test.csv", "config.txt"] {
        assert!(data.join(f).is_file(), "{f}");
    }

    assert_eq!(infomask(&with_tiny(vec!["train", "--data", p(&data), "--out", p(&train)])), 0);
    for f in ["best.ckpt", "selection.txt", "train_log.csv", "epoch_log.csv", "config.txt"] {
        assert!(train.join(f).is_file(), "{f}");
    }

    assert_eq!(infomask(&["eval", "--run", p(&train), "--data", p(&data), "--out", p(&eval)]), 0);
    let scores = std::fs::read_to_string(eval.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 33);
    assert!(std::fs::read_to_string(eval.join("summary.txt")).unwrap().contains("infomask"));

    assert_eq!(infomask(&["localize", "--run", p(&train), "--data", p(&data), "--out", p(&loc)]), 0);
    let overlay = pgm::decode(&std::fs::read(loc.join("overlays/00001_overlay.pgm")).unwrap()).unwrap();
    assert_eq!((overlay.width, overlay.height), (32, 32));
    assert!(loc.join("masks/00031_mask.pgm").is_file());

    assert_eq!(infomask(&["report", "--scores", p(&eval.join("scores.csv")), "--out", p(&rep)]), 0);
    let kde = std::fs::read_dir(&rep).unwrap().count();
    assert_eq!(kde, 1);

    assert_eq!(infomask(&with_tiny(vec!["compare", "--data", p(&data), "--out", p(&cmp)])), 0);
    let summary = std::fs::read_to_string(cmp.join("summary.txt")).unwrap();
    assert!(summary.contains("infomask") && summary.contains("gradcam"));
    assert!(cmp.join("gradcam/scores.csv").is_file());
}

#[test]
fn emitted_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    assert_eq!(infomask(&with_tiny(vec!["gen-data", "--out", p(&data)])), 0);
    let first = root.join("first");
    assert_eq!(infomask(&with_tiny(vec!["train", "--data", p(&data), "--out", p(&first)])), 0);
    let second = root.join("second");
    let cfg = first.join("config.txt");
    assert_eq!(infomask(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&second)]), 0);
    for f in ["config.txt", "train_log.csv", "epoch_log.csv", "best.ckpt", "selection.txt"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(infomask(&["gen-data", "--set", "alhpa=1", "--out", p(&out)]), 1);
    assert_eq!(infomask(&["train", "--data", p(&tmp.path().join("missing")), "--out", p(&out)]), 1);
    assert_eq!(infomask(&["gen-data", "--set", "n_val=0", "--out", p(&out)]), 1);
    assert_eq!(infomask(&["no-such-command"]), 2);
}
