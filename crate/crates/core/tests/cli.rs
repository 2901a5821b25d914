use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn stdet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stdet"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Every file under `root` with its contents.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

/// Asserts that running `args` only adds or changes files under `allowed`.
fn writes_only_under(dir: &Path, args: &[&str], allowed: &[&str]) -> Output {
    let before = snapshot(dir);
    let o = stdet(dir, args);
    let after = snapshot(dir);
    for (path, bytes) in &after {
        if before.get(path) != Some(bytes) {
            assert!(
                allowed.iter().any(|a| path.starts_with(a)),
                "{args:?} wrote {}",
                path.display()
            );
        }
    }
    assert!(before.keys().all(|k| after.contains_key(k)));
    o
}

#[test]
fn iou_of_identical_boxes() {
    let t = TempDir::new().unwrap();
    let o = stdet(t.path(), &["iou", "--a", "0,0,2,2,0", "--b", "0,0,2,2,0"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "1.000000000\n");
    assert!(o.stderr.is_empty());
    let o = stdet(
        t.path(),
        &["iou", "--a", "0,0,1,1", "--b", "0,0,1,1,0.7853981633974483"],
    );
    assert_eq!(stdout(&o), format!("{:.9}\n", 1.0 / 2f64.sqrt()));
}

#[test]
fn affine_check_passes() {
    let t = TempDir::new().unwrap();
    let o = stdet(t.path(), &["affine-check", "--n", "1000"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let last = text.lines().last().unwrap();
    let diff: f64 = last.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(last.starts_with("pairs 1000 ") && diff < 1e-9, "{text}");
    assert!(text.starts_with("closed_form m=[["));
    let o = stdet(
        t.path(),
        &[
            "affine-check",
            "--proposal",
            "-3,4,10,20",
            "--delta",
            "0.1,-0.2,0.3,-0.4,1.2",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().any(|l| l.starts_with("pairs 1 ")));
}

#[test]
fn zero_delta_mask_is_all_white() {
    let t = TempDir::new().unwrap();
    let o = writes_only_under(
        t.path(),
        &[
            "mask-dump",
            "--proposal",
            "50,50,20,10",
            "--delta",
            "0,0,0,0,0",
            "--grid",
            "7",
            "--out",
            "m.pgm",
        ],
        &["m.pgm"],
    );
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "active 49/49\n");
    let pgm = fs::read_to_string(t.path().join("m.pgm")).unwrap();
    let mut tok = pgm.split_whitespace();
    assert_eq!(tok.next(), Some("P2"));
    let dims: Vec<&str> = tok.by_ref().take(3).collect();
    assert_eq!(dims, ["7", "7", "255"]);
    let cells: Vec<&str> = tok.collect();
    assert_eq!(cells.len(), 49);
    assert!(cells.iter().all(|c| *c == "255"));
}

#[test]
fn usage_errors_exit_one() {
    let t = TempDir::new().unwrap();
    for args in [
        &["frobnicate"][..],
        &["iou", "--a", "0,0,1,1"],
        &["iou", "--a", "0,0,1,1", "--b", "0,0,1,1", "--bogus"],
        &[],
    ] {
        let o = stdet(t.path(), args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(o.stdout.is_empty());
        assert!(
            String::from_utf8_lossy(&o.stderr).contains("Usage"),
            "{args:?}"
        );
    }
    let o = stdet(t.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("gen-data"));
}

#[test]
fn runtime_errors_exit_two() {
    let t = TempDir::new().unwrap();
    let cases: [&[&str]; 5] = [
        &["eval", "--ckpt", "missing.ckpt", "--data", "missing.json"],
        &["train", "--config", "missing.cfg", "--out", "run"],
        &["iou", "--a", "0,0,1", "--b", "0,0,1,1"],
        &["iou", "--a", "0,0,-1,1", "--b", "0,0,1,1"],
        &[
            "mask-dump",
            "--proposal",
            "0,0,1,1",
            "--delta",
            "0,0,0,0,nan",
            "--out",
            "m.pgm",
        ],
    ];
    for args in cases {
        let o = writes_only_under(t.path(), args, &[]);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(o.stdout.is_empty());
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
    }
}

const CONFIG: &str = "stdet-config 1
train_data = train.json
val_data = val.json
epochs = 2
batch_size = 8
d_model = 16
heads = 2
seed = 3
";

#[test]
fn pipeline_is_byte_deterministic_and_contained() {
    let t = TempDir::new().unwrap();
    let dir = t.path();
    fs::write(dir.join("run.cfg"), CONFIG).unwrap();
    let mut prints = Vec::new();
    for round in 0..2 {
        let data = |name: &str| format!("{name}{round}");
        let train = data("train");
        let val = data("val");
        fs::create_dir_all(dir.join(&train)).unwrap();
        fs::create_dir_all(dir.join(&val)).unwrap();
        let g1 = writes_only_under(
            dir,
            &[
                "gen-data",
                "--seed",
                "1",
                "--scenes",
                "6",
                "--out",
                "train.json",
            ],
            &["train.json"],
        );
        let g2 = writes_only_under(
            dir,
            &[
                "gen-data", "--seed", "2", "--scenes", "3", "--out", "val.json",
            ],
            &["val.json"],
        );
        assert_eq!(g1.status.code(), Some(0));
        assert_eq!(g2.status.code(), Some(0));
        let run = format!("run{round}");
        let tr = writes_only_under(
            dir,
            &["train", "--config", "run.cfg", "--out", &run],
            &[&run],
        );
        assert_eq!(
            tr.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&tr.stderr)
        );
        let ckpt = format!("{run}/model.ckpt");
        let ev = writes_only_under(dir, &["eval", "--ckpt", &ckpt, "--data", "val.json"], &[]);
        assert_eq!(ev.status.code(), Some(0));
        fs::rename(dir.join("train.json"), dir.join(&train).join("d.json")).unwrap();
        fs::rename(dir.join("val.json"), dir.join(&val).join("d.json")).unwrap();
        prints.push((
            g1.stdout,
            fs::read(dir.join(&train).join("d.json")).unwrap(),
            fs::read(dir.join(&val).join("d.json")).unwrap(),
            tr.stdout,
            snapshot(&dir.join(&run)),
            ev.stdout,
        ));
    }
    assert_eq!(prints[0], prints[1]);
    let metrics = String::from_utf8(prints[0].3.clone()).unwrap();
    assert!(
        metrics.starts_with("epoch,loss_xy,loss_alpha,loss_wh,loss_cls,total,val_mAP\n"),
        "{metrics}"
    );
    assert_eq!(metrics.lines().count(), 3);
    assert!(String::from_utf8(prints[0].5.clone())
        .unwrap()
        .contains("mAP"));
}

#[test]
fn ablation_writes_one_row_per_cell() {
    let t = TempDir::new().unwrap();
    let dir = t.path();
    assert!(stdet(
        dir,
        &[
            "gen-data",
            "--seed",
            "1",
            "--scenes",
            "4",
            "--out",
            "train.json"
        ]
    )
    .status
    .success());
    assert!(stdet(
        dir,
        &["gen-data", "--seed", "2", "--scenes", "2", "--out", "val.json"]
    )
    .status
    .success());
    let grid = CONFIG
        .replace("stdet-config 1", "stdet-grid 1")
        .replace("epochs = 2", "epochs = 1")
        + "seeds = 0,1,2\ngrid.cam = true|false\n";
    fs::write(dir.join("grid.cfg"), grid).unwrap();
    let o = writes_only_under(
        dir,
        &["ablate", "--grid", "grid.cfg", "--out", "abl"],
        &["abl"],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = stdout(&o);
    assert_eq!(
        csv,
        fs::read_to_string(dir.join("abl/ablation.csv")).unwrap()
    );
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(
        lines[0],
        "cam,mAP_seed0,mAP_seed1,mAP_seed2,mean_mAP,sd_mAP"
    );
}
