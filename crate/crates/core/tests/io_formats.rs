use std::fs;

use hamr::io::{load_dataset, load_model, read_obj, read_pgm, save_dataset, save_model, write_obj, write_pgm};
use hamr::model::{build_toy_model, lbs_forward, ToyConfig};
use hamr::raster::Mask;
use hamr::synth::{synth_dataset, SynthConfig};
use hamr::HamrError;

#[test]
fn dataset_round_trip_with_masks_and_hidden_points() {
    let dir = tempfile::tempdir().unwrap();
    let model = build_toy_model(&ToyConfig::default()).unwrap();
    let mut samples: Vec<_> = synth_dataset(&model, 3, 1, &SynthConfig::default()).unwrap().into_iter().map(|d| d.sample).collect();
    samples[1].keypoints2d.as_mut().unwrap().visible[4] = false;
    samples[1].joints3d.as_mut().unwrap().visible[20] = false;
    samples[2].mask = None;
    let path = dir.path().join("data.jsonl");
    save_dataset(&path, &samples).unwrap();

    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().contains("null"));
    assert!(dir.path().join("masks/synth-0000.pgm").exists());

    let back = load_dataset(&path).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in back.iter().zip(&samples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.keypoints2d.as_ref().unwrap().visible, b.keypoints2d.as_ref().unwrap().visible);
        let vis = &b.keypoints2d.as_ref().unwrap().visible;
        for (i, v) in vis.iter().enumerate() {
            if *v {
                assert_eq!(a.keypoints2d.as_ref().unwrap().points[i], b.keypoints2d.as_ref().unwrap().points[i]);
            }
        }
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.gt_cam, b.gt_cam);
    }
}

#[test]
fn dataset_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let good = r#"{"id":"a","image_size":{"height":8,"width":8},"keypoints2d":[[1.0,2.0]]}"#;
    fs::write(&path, format!("{good}\n\n{{\"id\": 3}}\n")).unwrap();
    match load_dataset(&path) {
        Err(HamrError::Dataset { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a dataset error, got {other:?}"),
    }

    fs::write(&path, r#"{"id":"a","image_size":{"height":8,"width":8}}"#).unwrap();
    assert!(matches!(load_dataset(&path), Err(HamrError::Dataset { line: 1, .. })));

    fs::write(&path, r#"{"id":"a","image_size":{"height":8,"width":8},"mask_path":"nope.pgm"}"#).unwrap();
    assert!(matches!(load_dataset(&path), Err(HamrError::MissingFile { .. })));
}

#[test]
fn model_and_mesh_files() {
    let dir = tempfile::tempdir().unwrap();
    let model = build_toy_model(&ToyConfig::default()).unwrap();
    let mpath = dir.path().join("model.json");
    save_model(&mpath, &model).unwrap();
    assert_eq!(load_model(&mpath).unwrap(), model);

    let mesh = lbs_forward(&model, &hamr::ShapeParams::zeros(), &model.rest_pose_params()).unwrap();
    let opath = dir.path().join("nested/mesh.obj");
    write_obj(&opath, &mesh).unwrap();
    assert_eq!(read_obj(&opath).unwrap(), mesh);

    let mut mask = Mask::filled(5, 7, 0.0);
    mask.data[10] = 1.0;
    let ppath = dir.path().join("m.pgm");
    write_pgm(&ppath, &mask).unwrap();
    assert_eq!(read_pgm(&ppath).unwrap(), mask);
    assert!(matches!(read_pgm(&dir.path().join("none.pgm")), Err(HamrError::Io { .. })));
}
