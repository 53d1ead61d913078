use hamr::fitter::{fit_from, ParamGroup, Stage, StageLoss, Termination};
use hamr::model::{build_toy_model, lbs_forward, ToyConfig};
use hamr::pose::regress_joints;
use hamr::raster::{mask_iou, rasterize_mask};
use hamr::synth::{synth_dataset, SynthConfig};
use hamr::{fit, init_params, loss_and_grad, LossWeights, Sample, Schedule};

fn model() -> hamr::HandModel {
    build_toy_model(&ToyConfig::default()).unwrap()
}

#[test]
fn keypoints_only_fit_reduces_loss() {
    let model = model();
    let cfg = SynthConfig { with_joints3d: false, with_mask: false, ..SynthConfig::default() };
    let d = synth_dataset(&model, 1, 21, &cfg).unwrap().remove(0);
    let sample = Sample { gt_cam: None, ..d.sample };
    let init = init_params(&model, &sample).unwrap();
    let before = loss_and_grad(&model, &init, &sample, &LossWeights::default(), &Schedule::default()).unwrap();
    let res = fit(&model, &sample, &LossWeights::default(), &Schedule::default()).unwrap();
    let after = res.trace.last().unwrap();
    assert!(after.breakdown.terms.l2d < 1e-2 * before.breakdown.terms.l2d.max(1e-12), "{} -> {}", before.breakdown.terms.l2d, after.breakdown.terms.l2d);
    assert!(res.state.cam.s > 0.0);
    assert!(res.state.to_vec().iter().all(|v| v.is_finite()));
}

#[test]
fn mask_only_fit_improves_overlap() {
    let model = model();
    let cfg = SynthConfig { with_joints3d: false, with_keypoints2d: false, perturb: 0.15, ..SynthConfig::default() };
    let d = synth_dataset(&model, 1, 2, &cfg).unwrap().remove(0);
    let gt = d.sample.mask.clone().unwrap();
    // start from the true camera: a silhouette alone does not fix translation well from afar
    let mut start = init_params(&model, &d.sample).unwrap();
    start.cam = d.truth.cam;
    let iou = |s: &hamr::ParamState| {
        let mesh = lbs_forward(&model, &s.beta, &s.theta).unwrap();
        mask_iou(&rasterize_mask(&mesh, &s.cam, gt.size()).unwrap(), &gt).unwrap()
    };
    let res = fit_from(&model, &d.sample, &LossWeights::default(), &Schedule::default(), &start).unwrap();
    assert!(iou(&res.state) >= iou(&start), "{} < {}", iou(&res.state), iou(&start));
    assert!(iou(&res.state) > 0.9);
}

#[test]
fn shape_stays_in_bounds_and_stages_report() {
    let model = model();
    let d = synth_dataset(&model, 1, 4, &SynthConfig::default()).unwrap().remove(0);
    let mut start = d.truth.clone();
    start.beta.beta[2] = 9.0;
    let schedule = Schedule {
        stages: vec![Stage { name: "only".into(), params: ParamGroup::All, loss: StageLoss::Full, max_iters: 3 }],
        ..Schedule::default()
    };
    let res = fit_from(&model, &d.sample, &LossWeights::default(), &schedule, &start).unwrap();
    assert!(res.state.beta.beta.iter().all(|b| b.abs() <= 5.0));
    assert_eq!(res.stages.len(), 1);
    assert!(res.stages[0].iterations <= 3);
    if res.stages[0].iterations == 3 {
        assert_eq!(res.stages[0].termination, Termination::IterationCap);
        assert!(!res.converged);
    }
}

#[test]
fn camera_stage_moves_only_camera_and_root() {
    let model = model();
    let d = synth_dataset(&model, 1, 6, &SynthConfig::default()).unwrap().remove(0);
    let schedule = Schedule {
        stages: vec![Stage { name: "camera".into(), params: ParamGroup::CameraAndRoot, loss: StageLoss::Keypoints2d, max_iters: 50 }],
        ..Schedule::default()
    };
    let init = init_params(&model, &d.sample).unwrap();
    let res = fit(&model, &d.sample, &LossWeights::default(), &schedule).unwrap();
    assert_eq!(res.state.beta, init.beta);
    assert_eq!(&res.state.theta.theta[1..], &init.theta.theta[1..]);
    assert!(res.trace.iter().all(|t| t.breakdown.terms.l3d == 0.0 && t.breakdown.terms.seg == 0.0));
}

#[test]
fn fitted_joints_match_returned_mesh() {
    let model = model();
    let d = synth_dataset(&model, 1, 8, &SynthConfig { with_mask: false, ..SynthConfig::default() }).unwrap().remove(0);
    let res = fit(&model, &d.sample, &LossWeights::default(), &Schedule::default()).unwrap();
    let mesh = lbs_forward(&model, &res.state.beta, &res.state.theta).unwrap();
    assert_eq!(mesh.vertices, res.mesh.vertices);
    let j = regress_joints(&model, &mesh).unwrap();
    assert_eq!(j.len(), 21);
}
