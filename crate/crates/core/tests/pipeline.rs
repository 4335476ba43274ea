mod common;

use petgrid_core::pipeline::{read_jsonl, run_pipeline, LesionOutcome, Stage, Status};
use petgrid_core::report::LesionRecord;

#[test]
fn empty_report_directory() {
    let dir = tempfile::tempdir().unwrap();
    let reports = dir.path().join("reports");
    std::fs::create_dir(&reports).unwrap();
    let cfg = common::small_pipeline_config(&reports, &dir.path().join("out"), 1);
    let run = run_pipeline(&cfg).unwrap();
    assert_eq!(run.summary.exams, 0);
    assert_eq!(run.summary.records, 0);
    assert!(run.outcomes.is_empty());
    assert!(dir.path().join("out/summary.json").is_file());
    assert_eq!(std::fs::read_to_string(dir.path().join("out/records.jsonl")).unwrap(), "");
}

#[test]
fn phantom_exams_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let phantoms = common::write_phantom_exams(&data);
    let out = dir.path().join("out");
    let run = run_pipeline(&common::small_pipeline_config(&data, &out, 2)).unwrap();
    let s = &run.summary;
    assert_eq!(s.exams, 2);
    assert_eq!(s.records, 6);
    assert_eq!(s.skipped_prior, 1);
    assert_eq!(s.failed, 0, "{:?}", s.failures);
    assert_eq!((s.segmented, s.cropped, s.encoded), (5, 5, 5));
    assert_eq!(s.skipped[0].exam_id, "exam_b");
    assert_eq!(s.skipped[0].lesion_index, 1);

    let records: Vec<LesionRecord> = read_jsonl(&out.join("records.jsonl")).unwrap();
    assert_eq!(records.len(), 6);
    let outcomes: Vec<LesionOutcome> = read_jsonl(&out.join("segments.jsonl")).unwrap();
    assert_eq!(outcomes, run.outcomes);
    for o in outcomes.iter().filter(|o| o.status == Status::Ok) {
        assert!((o.achieved_suv_max.unwrap() - o.reported_suv_max).abs() <= 0.1);
        assert_eq!(o.token_shape, Some([64, 32]));
        assert_eq!(o.pooled_shape, Some([8, 32]));
        assert_eq!(o.artifacts.len(), 7);
        for a in &o.artifacts {
            assert!(out.join(a).is_file(), "{a}");
        }
    }
    // exam_a lesions line up with the phantom truth
    let a: Vec<&LesionOutcome> = outcomes.iter().filter(|o| o.exam_id == "exam_a").collect();
    assert_eq!(a.len(), 3);
    for (o, l) in a.iter().zip(&phantoms[0].lesions) {
        assert_eq!(o.grid_slice, Some(l.max_depth));
        let (m, _) = petgrid_core::nifti::load_mask(out.join(&o.artifacts[0])).unwrap();
        assert!(m.intersection_count(&l.truth) > 0);
    }
}

#[test]
fn parallel_and_resumed_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    common::write_phantom_exams(&data);
    let one = dir.path().join("one");
    let eight = dir.path().join("eight");
    run_pipeline(&common::small_pipeline_config(&data, &one, 1)).unwrap();
    run_pipeline(&common::small_pipeline_config(&data, &eight, 8)).unwrap();
    let first = common::tree(&one);
    common::assert_same_tree(&first, &common::tree(&eight));

    let again = run_pipeline(&common::small_pipeline_config(&data, &one, 4)).unwrap();
    assert_eq!(again.cached, 5);
    common::assert_same_tree(&first, &common::tree(&one));
}

#[test]
fn missing_volume_is_a_soft_failure() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    common::write_phantom_exams(&data);
    std::fs::remove_file(data.join("exam_a_ct.nii.gz")).unwrap();
    let run = run_pipeline(&common::small_pipeline_config(&data, &dir.path().join("out"), 1)).unwrap();
    assert_eq!(run.summary.failed, 3);
    assert_eq!(run.summary.failures_by_stage["load"], 3);
    assert!(run.summary.failures.iter().all(|f| f.stage == Some(Stage::Load) && f.reason.contains("CT")));
    assert_eq!(run.summary.encoded, 2);
}
