use std::collections::BTreeSet;
use std::fs;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spinometry::aggregator::{aggregate, outputs_from_keypoints, Region};
use spinometry::dataset::{
    crop_lumbosacral, decode_record, encode_record, find_annotation_files, import_keypoint_table,
    load_record, lumbosacral_sibling, make_split, make_split_with_test, save_record, ColumnMap,
    DatasetError,
};
use spinometry::geometry::{Landmark, View};
use spinometry::synth::{synth_cohort, synth_study, SynthOptions};
use spinometry::compute_parameters;

proptest! {
    #[test]
    fn split_partitions_the_pool(n in 0usize..80, frac in 0.05..0.95f64, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("S{i:03}")).collect();
        let m = make_split(&ids, frac, seed).unwrap();
        let train: BTreeSet<_> = m.train_ids.iter().collect();
        let val: BTreeSet<_> = m.val_ids.iter().collect();
        prop_assert!(train.is_disjoint(&val));
        prop_assert_eq!(train.len() + val.len(), n);
        prop_assert_eq!(m.train_ids.len(), (frac * n as f64).round() as usize);
        prop_assert_eq!(&m, &make_split(&ids, frac, seed).unwrap());
        let mut reversed = ids.clone();
        reversed.reverse();
        prop_assert_eq!(&m, &make_split(&reversed, frac, seed).unwrap());
    }

    #[test]
    fn records_round_trip_through_json(seed in any::<u64>(), revision in proptest::option::of(1u64..1000)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rec = synth_study(&mut rng, "RT1", &SynthOptions::default());
        let text = encode_record(&rec, revision);
        let (back, rev) = decode_record(&text, "mem".as_ref()).unwrap();
        prop_assert_eq!(&back, &rec);
        prop_assert_eq!(rev, revision);
        prop_assert_eq!(encode_record(&back, revision), text);
    }

    #[test]
    fn crop_preserves_slope_and_lordosis(seed in any::<u64>(), margin in 0.0..0.5f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rec = synth_study(&mut rng, "C1", &SynthOptions::default());
        let cropped = crop_lumbosacral(&rec, margin).unwrap();
        cropped.validate().unwrap();
        prop_assert_eq!(cropped.view(), View::Lumbosacral);
        let a = compute_parameters(&rec.keypoints).unwrap();
        let b = compute_parameters(&cropped.keypoints).unwrap();
        prop_assert!((a.ss_deg.unwrap() - b.ss_deg.unwrap()).abs() < 1e-9);
        prop_assert!((a.ll_deg.unwrap() - b.ll_deg.unwrap()).abs() < 1e-9);
        prop_assert_eq!(b.present().count(), 2);
    }
}

#[test]
fn split_keeps_the_fixed_test_set_apart() {
    let pool: Vec<String> = (0..10).map(|i| format!("P{i}")).collect();
    let test = vec!["T1".to_string(), "T0".to_string()];
    let m = make_split_with_test(&pool, &test, 0.8, 7).unwrap();
    assert_eq!(m.test_ids, ["T0", "T1"]);
    assert_eq!(m.train_ids.len(), 8);
    let overlap = vec!["P1".to_string()];
    assert!(matches!(
        make_split_with_test(&pool, &overlap, 0.8, 7),
        Err(DatasetError::DuplicateIds(_))
    ));
    assert!(matches!(make_split(&pool, 1.0, 7), Err(DatasetError::InvalidFraction(_))));
}

#[test]
fn lumbosacral_cohort_via_region_detectors_only() {
    let cohort = synth_cohort(&SynthOptions { n_studies: 20, seed: 4, ..SynthOptions::default() });
    for gt in &cohort.gt {
        let cropped = crop_lumbosacral(gt, 0.1).unwrap();
        let [l1, s1, _global] = outputs_from_keypoints(&gt.study_id, &cropped.keypoints, 10.0);
        assert_eq!((l1.region, s1.region), (Region::L1, Region::S1));
        let ks = aggregate(Some(&l1), Some(&s1), None, cropped.keypoints.pixel_spacing(), View::Lumbosacral)
            .unwrap();
        let a = compute_parameters(&gt.keypoints).unwrap();
        let b = compute_parameters(&ks).unwrap();
        assert!((a.ss_deg.unwrap() - b.ss_deg.unwrap()).abs() < 1e-9);
        assert!((a.ll_deg.unwrap() - b.ll_deg.unwrap()).abs() < 1e-9);
    }
}

#[test]
fn files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = synth_cohort(&SynthOptions { n_studies: 3, ..SynthOptions::default() });
    for rec in &cohort.gt {
        let path = dir.path().join(&rec.study_id).join("GT.ann");
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        save_record(rec, &path).unwrap();
        save_record(&crop_lumbosacral(rec, 0.1).unwrap(), lumbosacral_sibling(&path)).unwrap();
    }
    let files = find_annotation_files(dir.path()).unwrap();
    assert_eq!(files.len(), 6);
    assert!(files[0].ends_with("SYN0001/GT.ann"));
    assert!(files[1].ends_with("SYN0001/GT.ls.ann"));
    assert_eq!(load_record(&files[0]).unwrap(), cohort.gt[0]);

    fs::write(dir.path().join("bad.ann"), "{\"schema_version\": \"2\"}").unwrap();
    assert!(matches!(
        load_record(dir.path().join("bad.ann")),
        Err(DatasetError::SchemaVersion { .. })
    ));
    assert!(matches!(load_record(dir.path().join("none.ann")), Err(DatasetError::Io { .. })));
}

#[test]
fn keypoint_table_import() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kp.csv");
    let mut text = String::from("study_id,rater_id,landmark,x,y,width_px,height_px,pixel_spacing_px_per_mm\n");
    let pts = [
        ("C7", 130, 10), ("T1", 108, 20), ("L1_ANT", 105, 30), ("L1_POST", 88, 32), ("L1_MID", 97, 38),
        ("S1_ANT", 110, 95), ("S1_POST", 90, 85), ("FEM_L", 120, 150), ("FEM_R", 124, 154),
    ];
    for (name, x, y) in pts {
        text.push_str(&format!("S001,R1,{name},{x},{y},200,200,3.730\n"));
    }
    fs::write(&path, &text).unwrap();
    let records = import_keypoint_table(&path, &ColumnMap::default()).unwrap();
    assert_eq!(records.len(), 1);
    let rec = &records[0];
    assert_eq!((rec.study_id.as_str(), rec.rater_id.as_str()), ("S001", "R1"));
    assert!(rec.keypoints.is_complete());
    assert_eq!(rec.keypoints.visible(Landmark::C7).unwrap().x, 130.0);

    fs::write(&path, text.replace("FEM_R", "FEM_X")).unwrap();
    assert!(matches!(
        import_keypoint_table(&path, &ColumnMap::default()),
        Err(DatasetError::UnknownLandmark { .. })
    ));
}
