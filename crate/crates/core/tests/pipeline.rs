use repexit::experiment::{classify_exit, run_plan, BudgetRule, ExperimentPlan};
use repexit::flow::{psi_auto, FlowSettings};
use repexit::predict::PredictSettings;
use repexit::sde::{simulate_exits, ExitSample, SimConfig};
use repexit::{Domain, Execution, FaceRect, FaceSide, Interval, Model, SystemSpec, Target, TargetSet};

fn plan(model: Model, targets: Vec<Target>, epsilons: Vec<f64>, n: u64) -> ExperimentPlan {
    ExperimentPlan {
        name: "it".into(),
        model,
        targets,
        epsilons,
        budget: BudgetRule::Fixed { n },
        seed: 17,
        dt: None,
        max_time: None,
        predict: PredictSettings::default(),
        config_hash: "0".into(),
    }
}

fn unit_box(lambdas: &[f64]) -> Model {
    Model::new(SystemSpec::linear_identity(lambdas), Domain::Box { half_width: 1.0 }, 1.0).unwrap()
}

#[test]
fn whole_boundary_is_always_hit() {
    let target = Target {
        name: "all".into(),
        set: TargetSet::Face(FaceRect::new(0, FaceSide::Both, vec![]).unwrap()),
    };
    let r = run_plan(&plan(unit_box(&[1.0]), vec![target], vec![0.2, 0.1, 0.01], 500), Execution::Parallel).unwrap();
    for c in &r.cells {
        assert_eq!(c.non_exits, 0);
        assert_eq!(c.targets[0].hits, c.trials);
    }
}

#[test]
fn top_bottom_fraction_tracks_prediction() {
    let target = Target {
        name: "top-bottom".into(),
        set: TargetSet::Face(FaceRect::full_face(2, 1, FaceSide::Both, 1.0)),
    };
    let r = run_plan(&plan(unit_box(&[2.0, 1.0]), vec![target], vec![0.2, 0.1, 0.05], 20_000), Execution::Parallel).unwrap();
    let mu = (2.0 / std::f64::consts::PI).sqrt();
    for c in &r.cells {
        let ratio = c.targets[0].p_hat / (mu * c.epsilon);
        assert!((ratio - 1.0).abs() < 0.3, "ε = {}: ratio {ratio}", c.epsilon);
        assert!((c.targets[0].predicted - mu * c.epsilon).abs() < 1e-9);
    }
}

#[test]
fn preimage_classification_agrees_with_forward_map() {
    let model = Model::new(
        SystemSpec::linear_identity(&[2.0, 1.0]),
        Domain::Ellipsoid {
            semi_axes: vec![1.0, 0.8],
        },
        0.3,
    )
    .unwrap();
    let flow = FlowSettings::default();
    let rect = FaceRect::new(1, FaceSide::Plus, vec![Interval::closed(-0.1, 0.2)]).unwrap();
    let target = TargetSet::Preimage(rect);
    for k in 0..40 {
        let u = -0.29 + 0.58 * (k as f64 + 0.5) / 40.0;
        for sign in [1.0, -1.0] {
            let x = psi_auto(&[u, sign * 0.3], &model, &flow).unwrap();
            assert!(model.domain().level(&x).abs() < 1e-9);
            let sample = ExitSample {
                trajectory_id: k,
                epsilon: 0.1,
                time: 1.0,
                location: x,
                face: None,
            };
            let expected = sign > 0.0 && (-0.1..=0.2).contains(&u);
            assert_eq!(classify_exit(&sample, &target, &model, &flow).unwrap(), expected, "u = {u}, sign = {sign}");
        }
    }
}

#[test]
fn exit_points_lie_on_the_boundary() {
    let domains = [
        Domain::Box { half_width: 1.0 },
        Domain::Ellipsoid {
            semi_axes: vec![1.0, 0.7, 0.5],
        },
    ];
    for domain in domains {
        let model = Model::new(SystemSpec::linear_identity(&[1.5, 1.0, 0.8]), domain, 0.2).unwrap();
        let out = simulate_exits(&model, &SimConfig::new(0.2, 2000, 5), Execution::Parallel).unwrap();
        assert_eq!(out.samples.len(), 2000);
        for s in &out.samples {
            assert!(model.domain().level(&s.location).abs() <= 1e-9, "{:?}", s.location);
            assert!(s.time <= out.max_time);
        }
    }
}

#[test]
fn halving_dt_keeps_face_probabilities() {
    let model = unit_box(&[2.0, 1.0]);
    let n = 100_000;
    let top_fraction = |dt: f64, seed: u64| {
        let cfg = SimConfig {
            dt: Some(dt),
            ..SimConfig::new(0.3, n, seed)
        };
        let out = simulate_exits(&model, &cfg, Execution::Parallel).unwrap();
        out.samples
            .iter()
            .filter(|s| s.face.is_some_and(|f| f.axis == 1))
            .count() as f64
            / n as f64
    };
    let a = top_fraction(1e-3, 1);
    let b = top_fraction(5e-4, 2);
    let se = (a * (1.0 - a) / n as f64 + b * (1.0 - b) / n as f64).sqrt();
    assert!((a - b).abs() < 2.0 * se, "{a} vs {b} (se {se})");
}
