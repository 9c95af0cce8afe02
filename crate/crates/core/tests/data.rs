use std::fs;

use gazecast::config::ModalityId;
use gazecast::data::{
    crop_head, dataset_digest, generate_dataset, generate_scene, generate_scene_with_layout, read_dataset,
    read_dataset_modalities, total_reads, train_test_split, write_dataset, Scenario, SceneLayout, SceneSpec,
    TargetRule, MANIFEST,
};
use gazecast::geometry::Point;
use gazecast::GazeError;

/// Target recomputed from the object list: the nearest candidate whose disc
/// the subject's gaze ray crosses, among same-layer objects and other heads.
fn oracle_target(l: &SceneLayout) -> Option<Point> {
    let s = &l.people[l.subject];
    let mut best: Option<(f64, Point)> = None;
    let mut consider = |c: Point, r: f64| {
        // |e + t·g − c|² = r² has a real root iff the ray line passes within r
        let (dx, dy) = (s.head[0] - c[0], s.head[1] - c[1]);
        let b = s.gaze[0] * dx + s.gaze[1] * dy;
        let disc = b * b - (dx * dx + dy * dy - r * r);
        let along = -b;
        if disc >= -1e-12 && along > 0.0 && best.is_none_or(|(t, _)| along < t) {
            best = Some((along, c));
        }
    };
    for o in l.objects.iter().filter(|o| o.layer == s.layer) {
        consider(o.center, o.radius);
    }
    for (i, p) in l.people.iter().enumerate() {
        if i != l.subject {
            consider(p.head, p.radius);
        }
    }
    best.map(|b| b.1)
}

fn spec(seed: u64) -> SceneSpec {
    SceneSpec {
        rng_seed: seed,
        ..SceneSpec::default()
    }
}

#[test]
fn generator_self_check_over_ten_thousand_samples() {
    let s = SceneSpec {
        inout: true,
        ..spec(17)
    };
    let (samples, check) = generate_dataset(&s, 10_000).unwrap();
    assert!(check.passed(), "{check:?}");
    assert_eq!(check.samples, 10_000);
    let mut kinds = [0usize; 4];
    for x in &samples {
        kinds[x.scenario as usize] += 1;
        if x.in_frame {
            let g = x.oracle_gaze_dir.0;
            let p = x.gaze_points[0];
            assert!(g[0] * (p[0] - x.eye.x) + g[1] * (p[1] - x.eye.y) > 0.0);
        }
    }
    assert!(kinds.iter().all(|&k| k > 0), "{kinds:?}");
    let out = samples.iter().filter(|x| !x.in_frame).count() as f64 / 10_000.0;
    assert!((out - 0.1).abs() < 0.02, "{out}");
}

#[test]
fn annotations_match_independent_target_rule() {
    for id in 0..2000 {
        let (s, layout) = generate_scene_with_layout(&spec(3), id).unwrap();
        let want = oracle_target(&layout);
        assert_eq!(s.gaze_points, want.into_iter().collect::<Vec<_>>(), "sample {id}");
        assert!(s.head_box.contains(s.eye.point()));
        match s.scenario {
            Scenario::Person => {
                let t = s.gaze_points[0];
                assert!(layout.people.iter().any(|p| p.head == t));
            }
            Scenario::DepthDistractor => {
                let subj = &layout.people[layout.subject];
                let t = s.gaze_points[0];
                let target = layout.objects.iter().find(|o| o.center == t).unwrap();
                assert_eq!(target.layer, subj.layer);
                assert!(layout.objects.iter().any(|o| o.layer != subj.layer));
            }
            _ => {}
        }
    }
}

#[test]
fn single_object_scene_targets_that_object() {
    let s = SceneSpec {
        n_objects: 1,
        n_people: 1,
        target_rule: TargetRule::Object,
        ..spec(4)
    };
    for id in 0..50 {
        let (x, layout) = generate_scene_with_layout(&s, id).unwrap();
        assert_eq!(x.gaze_points, vec![layout.objects[0].center]);
    }
}

#[test]
fn generation_is_deterministic() {
    for id in [0, 7, 123] {
        let a = generate_scene(&spec(9), id).unwrap();
        let b = generate_scene(&spec(9), id).unwrap();
        assert_eq!(a, b);
        let ma = a.modality(ModalityId::Raw).unwrap();
        let mb = b.modality(ModalityId::Raw).unwrap();
        assert_eq!(
            ma.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            mb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
    assert_ne!(generate_scene(&spec(9), 1).unwrap(), generate_scene(&spec(10), 1).unwrap());
}

#[test]
fn infeasible_specs_are_rejected() {
    assert!(SceneSpec::from_toml_str("n_people = 0").is_err());
    assert!(SceneSpec::from_toml_str("resolution = 16").is_err());
    assert!(SceneSpec::from_toml_str("bogus = 1").is_err());
    let s = SceneSpec {
        n_objects: 0,
        n_people: 1,
        target_rule: TargetRule::Object,
        ..spec(0)
    };
    assert!(generate_scene(&s, 0).is_err());
}

#[test]
fn modalities_carry_only_their_own_cues() {
    for id in 0..200 {
        let (s, layout) = generate_scene_with_layout(&spec(5), id).unwrap();
        let res = s.resolution();
        let plane = res * res;

        let depth = s.modality(ModalityId::Depth).unwrap().data();
        let mut levels: Vec<f32> = (0..layout.depth_layers).map(|l| layout.depth_of(l)).collect();
        levels.push(0.1);
        for i in 0..plane {
            assert!(depth[i] == depth[plane + i] && depth[i] == depth[2 * plane + i]);
            assert!(levels.contains(&depth[i]), "depth value {}", depth[i]);
        }

        // every lit pose pixel lies near some person's head or body
        let pose = s.modality(ModalityId::Pose).unwrap().data();
        for i in 0..plane {
            if (0..3).all(|c| pose[c * plane + i] == 0.0) {
                continue;
            }
            let p = [((i % res) as f64 + 0.5) / res as f64, ((i / res) as f64 + 0.5) / res as f64];
            let near = layout.people.iter().any(|q| {
                let top = q.head[1] + q.radius;
                let in_head = (p[0] - q.head[0]).hypot(p[1] - q.head[1]) <= q.radius + 0.05;
                let in_body = (p[0] - q.head[0]).abs() <= 0.12 && p[1] >= top - 0.05 && p[1] <= top + 0.31;
                in_head || in_body
            });
            assert!(near, "sample {id}: pose pixel {p:?} away from every person");
        }
    }
}

#[test]
fn dataset_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (samples, _) = generate_dataset(
        &SceneSpec {
            inout: true,
            ..spec(21)
        },
        100,
    )
    .unwrap();
    write_dataset(&samples, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert!(back == samples);
    for (a, b) in back.iter().zip(&samples) {
        for m in ModalityId::ALL {
            let (x, y) = (a.modality(m).unwrap(), b.modality(m).unwrap());
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    let again = tempfile::tempdir().unwrap();
    write_dataset(&back, again.path()).unwrap();
    assert_eq!(dataset_digest(dir.path()).unwrap(), dataset_digest(again.path()).unwrap());
}

#[test]
fn empty_dataset_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&[], dir.path()).unwrap();
    assert!(read_dataset(dir.path()).unwrap().is_empty());
    let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
    assert_eq!(manifest.lines().count(), 1);
}

#[test]
fn partial_loads_never_touch_other_modalities() {
    let dir = tempfile::tempdir().unwrap();
    let (samples, _) = generate_dataset(&spec(2), 5).unwrap();
    write_dataset(&samples, dir.path()).unwrap();
    fs::remove_file(dir.path().join("raw.gzt")).unwrap();
    let loaded = read_dataset_modalities(dir.path(), &[ModalityId::Depth, ModalityId::Pose]).unwrap();
    assert!(!loaded[0].has_modality(ModalityId::Raw));
    assert!(matches!(loaded[0].modality(ModalityId::Raw), Err(GazeError::Data(_))));
    assert_eq!(total_reads(&loaded, ModalityId::Raw), 0);
    assert!(read_dataset(dir.path()).is_err());
}

fn written(n: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let (samples, _) = generate_dataset(&spec(8), n).unwrap();
    write_dataset(&samples, dir.path()).unwrap();
    dir
}

fn is_typed(e: &GazeError) -> bool {
    matches!(e, GazeError::Data(_) | GazeError::Tensor(_) | GazeError::Io(_))
}

#[test]
fn corrupted_files_yield_typed_errors() {
    let dir = written(4);
    let path = dir.path().join("depth.gzt");
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&path, &bytes).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(is_typed(&err), "{err:?}");

    let dir = written(4);
    let path = dir.path().join("raw.gzt");
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(GazeError::Data(_))));

    let dir = written(4);
    let path = dir.path().join("pose.gzt");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(is_typed(&err), "{err:?}");

    let dir = written(4);
    let path = dir.path().join(MANIFEST);
    let text = fs::read_to_string(&path).unwrap();
    let fewer: Vec<&str> = text.lines().take(3).collect();
    fs::write(&path, fewer.join("\n")).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(GazeError::Data(_))));

    let dir = written(2);
    fs::write(dir.path().join(MANIFEST), "{\"format\":\"other\"}\n").unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(GazeError::Data(_))));

    let dir = written(2);
    fs::write(dir.path().join(MANIFEST), b"\x00\x01garbage").unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(GazeError::Data(_))));

    let missing = tempfile::tempdir().unwrap();
    assert!(matches!(read_dataset(missing.path()), Err(GazeError::Data(_))));
}

#[test]
fn split_contract() {
    let (samples, _) = generate_dataset(&spec(1), 10).unwrap();
    let (train, test) = train_test_split(samples.clone(), 0.5, 3).unwrap();
    assert_eq!((train.len(), test.len()), (5, 5));
    let mut ids: Vec<u64> = train.iter().chain(&test).map(|s| s.sample_id).collect();
    ids.sort();
    assert_eq!(ids, (0..10).collect::<Vec<_>>());
    let (train2, test2) = train_test_split(samples.clone(), 0.5, 3).unwrap();
    assert_eq!((train, test), (train2, test2));
    assert!(train_test_split(samples.clone(), 0.0, 3).is_err());
    assert!(train_test_split(samples.clone(), 1.0, 3).is_err());
    assert!(train_test_split(samples, 0.01, 3).is_err());
}

#[test]
fn head_crops() {
    let s = generate_scene(&spec(6), 0).unwrap();
    let a = crop_head(&s, ModalityId::Pose, 16).unwrap();
    assert_eq!(a.shape(), &[3, 16, 16]);
    assert_eq!(a, crop_head(&s, ModalityId::Pose, 16).unwrap());
    assert_eq!(s.reads().get(ModalityId::Raw), 0);
    assert_eq!(s.reads().get(ModalityId::Pose), 2);

    let full = gazecast::data::SceneSample::new(
        s.modality(ModalityId::Raw).unwrap().clone(),
        s.modality(ModalityId::Depth).unwrap().clone(),
        s.modality(ModalityId::Pose).unwrap().clone(),
        gazecast::geometry::HeadBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
        s.eye,
        s.gaze_points.clone(),
        s.in_frame,
        s.oracle_gaze_dir,
        s.sample_id,
        s.scenario,
    )
    .unwrap();
    let img = full.modality(ModalityId::Depth).unwrap().clone();
    let res = img.shape()[1];
    let c = crop_head(&full, ModalityId::Depth, res).unwrap();
    assert_eq!(c, img);
}
