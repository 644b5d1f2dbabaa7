use std::fs;
use std::path::Path;

use spinometry::dataset::{load_record, save_record, SplitManifest};
use spinometry::geometry::View;
use spinometry::synth::{synth_cohort, SynthOptions};
use spinometry_cli::{run_from, Console, EXIT_IO, EXIT_OK, EXIT_ROW_FAILURES, EXIT_USAGE};

fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("spinometry").chain(args.iter().copied());
    let code = run_from(argv, &mut Console { out: &mut out, err: &mut err });
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// GT and MODEL whole-spine annotations in two flat directories.
fn cohort_dirs(n: usize) -> (tempfile::TempDir, std::path::PathBuf, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cohort = synth_cohort(&SynthOptions { n_studies: n, seed: 3, ..SynthOptions::default() });
    let (gt, pred) = (dir.path().join("gt"), dir.path().join("pred"));
    fs::create_dir_all(&gt).unwrap();
    fs::create_dir_all(&pred).unwrap();
    for (g, p) in cohort.gt.iter().zip(&cohort.pred) {
        save_record(g, gt.join(format!("{}.ann", g.study_id))).unwrap();
        save_record(p, pred.join(format!("{}.ann", p.study_id))).unwrap();
    }
    (dir, gt, pred)
}

#[test]
fn compute_csv_and_doc() {
    let (_dir, gt, _) = cohort_dirs(3);
    let (code, out, _) = cli(&["compute", s(&gt)]);
    assert_eq!(code, EXIT_OK);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "path,study_id,rater_id,view,SVA,PT,SS,PI,LL,T1PA,L1PA,error");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].contains(",SYN0001,GT,WHOLE_SPINE,"));
    assert!(lines[1].ends_with(','));

    let (code, out, _) = cli(&["compute", "--format", "doc", s(&gt.join("SYN0002.ann"))]);
    assert_eq!(code, EXIT_OK);
    let doc: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(doc[0]["study_id"], "SYN0002");
    assert!(doc[0]["parameters"]["pi_deg"].is_number());
}

#[test]
fn compute_reports_bad_rows_and_missing_paths() {
    let (dir, gt, _) = cohort_dirs(2);
    fs::write(gt.join("broken.ann"), "{not json").unwrap();
    let (code, out, err) = cli(&["compute", s(&gt)]);
    assert_eq!(code, EXIT_ROW_FAILURES);
    assert!(out.lines().any(|l| l.contains("broken.ann") && l.contains("ParseError")));
    assert!(err.contains("1 row(s) failed"));

    let (code, _, _) = cli(&["compute", s(&dir.path().join("nope"))]);
    assert_eq!(code, EXIT_IO);
    let (code, _, _) = cli(&["compute"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn evaluate_directories_writes_all_files() {
    let (dir, gt, pred) = cohort_dirs(12);
    let out = dir.path().join("report");
    let (code, stdout, err) =
        cli(&["evaluate", s(&pred), s(&gt), "--out", s(&out), "--thresholds", "2,5"]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(stdout.starts_with("section,parameter,unit,n,"));
    for f in ["report.json", "errors.csv", "pck.csv", "icc.csv", "radar.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["metadata"]["thresholds_mm"], serde_json::json!([2.0, 5.0]));
    assert_eq!(report["pred_label"], "MODEL");
}

#[test]
fn evaluate_flags_unmatched_and_bad_input() {
    let (dir, gt, pred) = cohort_dirs(5);
    fs::remove_file(pred.join("SYN0003.ann")).unwrap();
    let out = dir.path().join("r");
    let (code, _, err) = cli(&["evaluate", s(&pred), s(&gt), "--out", s(&out)]);
    assert_eq!(code, EXIT_ROW_FAILURES);
    assert!(err.contains("SYN0003"));
    assert!(out.join("report.json").is_file());

    let (code, _, _) = cli(&["evaluate", s(&pred), s(&gt), "--thresholds", "5,2"]);
    assert_eq!(code, EXIT_USAGE);
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let (code, _, _) = cli(&["evaluate", s(&empty), s(&empty), "--out", s(&out)]);
    assert_eq!(code, EXIT_ROW_FAILURES);
    let (code, _, _) = cli(&["evaluate", "MODEL", "GT", "--raters"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn synth_layout_feeds_rater_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let (code, _, _) = cli(&["synth", "--out", s(&data), "--n", "6", "--images"]);
    assert_eq!(code, EXIT_OK);
    let study = data.join("studies/SYN0001");
    for f in ["GT.ann", "MODEL.ann", "GT.ls.ann", "MODEL.ls.ann"] {
        assert!(study.join(f).is_file(), "{f}");
    }
    assert!(data.join("images/SYN0001.png").is_file());
    assert_eq!(load_record(study.join("GT.ls.ann")).unwrap().view(), View::Lumbosacral);

    let out = dir.path().join("r");
    let (code, _, err) =
        cli(&["evaluate", "MODEL", "GT", "--raters", "--data-dir", s(&data), "--out", s(&out), "--format", "doc"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let (code, _, _) = cli(&["synth", "--out", s(&data), "--sigma", "-1"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn crop_writes_siblings_and_refuses_lumbosacral_input() {
    let (_dir, gt, _) = cohort_dirs(3);
    let (code, out, _) = cli(&["crop", s(&gt), "--margin", "0.2"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out.lines().count(), 3);
    let ls = load_record(gt.join("SYN0001.ls.ann")).unwrap();
    assert_eq!(ls.view(), View::Lumbosacral);
    assert!(ls.image.crop.is_some());

    // Re-running skips the siblings found in the directory.
    let (code, out, _) = cli(&["crop", s(&gt)]);
    assert_eq!((code, out.lines().count()), (EXIT_OK, 3));
    let (code, _, err) = cli(&["crop", s(&gt.join("SYN0001.ls.ann"))]);
    assert_eq!(code, EXIT_ROW_FAILURES);
    assert!(err.contains("already lumbosacral"));
    let (code, _, _) = cli(&["crop", s(&gt), "--margin", "-0.1"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn split_is_seeded_and_honours_test_ids() {
    let dir = tempfile::tempdir().unwrap();
    let ids = dir.path().join("ids.txt");
    let test = dir.path().join("test.txt");
    fs::write(&ids, (0..20).map(|i| format!("S{i:02}\n")).collect::<String>()).unwrap();
    fs::write(&test, "S03\n# held out\nS07\n").unwrap();
    let run = || cli(&["split", s(&ids), "--test-ids", s(&test), "--seed", "9"]);
    let (code, out, _) = run();
    assert_eq!(code, EXIT_OK);
    assert_eq!(run().1, out);
    let m: SplitManifest = serde_json::from_str(&out).unwrap();
    assert_eq!(m.test_ids, ["S03", "S07"]);
    assert_eq!(m.train_ids.len() + m.val_ids.len(), 18);
    assert_eq!(m.train_ids.len(), 14);

    let (code, _, _) = cli(&["split", s(&ids), "--train", "1.5"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn compare_two_sources() {
    let (dir, gt, pred) = cohort_dirs(6);
    let out = dir.path().join("radar.csv");
    let (code, _, err) = cli(&["compare", s(&pred), s(&gt), s(&gt), "--label-b", "SELF", "--out", s(&out)]);
    assert_eq!(code, EXIT_OK, "{err}");
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "source,parameter,median_error");
    assert_eq!(lines.len(), 1 + 14);
    assert!(lines[1].starts_with("MODEL,SVA,"));
    assert!(lines[8].starts_with("SELF,SVA,0.0000"));
}

#[test]
fn aggregate_needs_spacing() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.json");
    let (code, _, _) = cli(&["aggregate", "--l1", s(&p), "--s1", s(&p), "--out", s(&p)]);
    assert_eq!(code, EXIT_USAGE);
    let (code, _, _) = cli(&["aggregate", "--l1", s(&p), "--s1", s(&p), "--spacing", "3", "--out", s(&p)]);
    assert_eq!(code, EXIT_IO);
}

#[test]
fn serve_requires_a_data_dir() {
    if std::env::var_os(spinometry_cli::DATA_DIR_ENV).is_none() {
        let (code, _, err) = cli(&["serve"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("--data-dir"));
    }
    let (code, _, _) = cli(&["serve", "--bind", "not-an-address"]);
    assert_eq!(code, EXIT_USAGE);
}
