use std::path::Path;
use std::process::{Command, Output};

fn f2bev(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_f2bev")).args(args).current_dir(cwd).env("F2BEV_THREADS", "2").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn render_train_eval_infer() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = f2bev(&["render", "--seed", "7", "--frames", "16", "--out", "d", "--grid", "8", "--cell", "1.0"], dir);
    assert!(o.status.success(), "{o:?}");
    let seq = dir.join("d/seq_000");
    for f in ["meta.txt", "calib/cam3.txt", "calib/cam0_mask.pgm", "frame_00015/cam2.ppm", "frame_00015/cam2_seg.pgm", "frame_00000/bev_seg.pgm", "frame_00000/bev_height.pgm", "frame_00000/ego.txt"] {
        assert!(seq.join(f).exists(), "{f}");
    }

    let o = f2bev(&["calib-check", "--calib", "d/seq_000/calib/cam0.txt", "--samples", "10000"], dir);
    assert!(o.status.success());
    let text = stdout(&o);
    let err: f64 = text.lines().find_map(|l| l.strip_prefix("max pixel error ")).unwrap().parse().unwrap();
    assert!(err < 1e-6, "{text}");

    let o = f2bev(&["refpoints", "--calib-dir", "d/seq_000/calib", "--grid", "8", "--cell", "1.0", "--anchors", "0,1.5"], dir);
    let csv = stdout(&o);
    assert_eq!(csv.lines().next(), Some("cell_x,cell_y,anchor_index,camera_index,u,v,valid"));
    assert_eq!(csv.lines().count(), 1 + 64 * 2 * 4);

    let train = [
        "train", "--data", "d", "--out", "run", "--grid", "8", "--cell", "1.0", "--d", "16", "--blocks", "1", "--task", "multitask", "--head", "attn", "--ce-steps", "4", "--focal-steps", "2",
        "--split", "all",
    ];
    let o = f2bev(&train, dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.join("run/model.ckpt").exists() && dir.join("run/loss.csv").exists() && dir.join("run/config.txt").exists());

    let o = f2bev(&["eval", "--data", "d", "--run", "run", "--ablate-history"], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["eval_height.csv", "eval_segmentation.csv", "eval_height_no_history.csv", "eval_segmentation_no_history.csv"] {
        assert!(dir.join("run").join(f).exists(), "{f}");
    }
    let o = f2bev(&["eval", "--data", "d", "--run", "run", "--oracle"], dir);
    assert!(stdout(&o).contains("oracle height: mean IoU 1.0000"));

    let o = f2bev(&["infer", "--data", "d/seq_000", "--run", "run", "--out", "inf"], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.join("inf/seq_000/frame_00015_collage.ppm").exists());
    assert!(dir.join("inf/seq_000/frame_00015_segmentation.pgm").exists());

    let o = f2bev(&["eval", "--data", "d", "--run", "missing"], dir);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn gradcheck_double_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = f2bev(&["gradcheck", "--precision", "double"], tmp.path());
    assert!(o.status.success());
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn unknown_flags_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let o = f2bev(&["render", "--bogus"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = f2bev(&["train", "--help"], tmp.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("--focal-steps"));
}
