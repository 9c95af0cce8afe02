use std::collections::BTreeSet;

use gazecast::config::{ModalityId, Variant};
use gazecast::fusion::{
    apply_dropout, fuse, late_fuse_inject, noise_image, sample_dropout_plan, AttentionFusion, DropoutPlan, EmbedNet,
};
use gazecast::heads::loss_att;
use gazecast_tensor::{ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ModalityId::{Depth, Pose, Raw};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn module(store: &mut ParamStore<f64>, d_m: usize, d: usize) -> AttentionFusion {
    AttentionFusion::new(store, &[Raw, Depth, Pose], d_m, d, 6, 7)
}

fn set(store: &mut ParamStore<f64>, name: &str, f: impl Fn(usize) -> f64) {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    for (i, v) in store.get_mut(id).data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

#[test]
fn identity_transform_passes_features_through() {
    let mut store = ParamStore::new();
    let fusion = module(&mut store, 4, 4);
    set(&mut store, "fusion.transform.depth.weight", |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let mut tape = Tape::new();
    let x = random(&[2, 4, 16, 16], 1);
    let f = tape.constant(x.clone());
    let t = fusion.transform_modality(&mut tape, &store, f, Depth).unwrap();
    assert_eq!(tape.value(t).data(), x.data());
}

#[test]
fn transform_shapes_and_disjoint_weights() {
    let mut store = ParamStore::new();
    let fusion = module(&mut store, 6, 4);
    let x = random(&[1, 6, 16, 16], 2);
    let run = |store: &ParamStore<f64>, m| {
        let mut tape = Tape::new();
        let f = tape.constant(x.clone());
        let t = fusion.transform_modality(&mut tape, store, f, m).unwrap();
        (tape.shape(t).to_vec(), tape.value(t).data().to_vec())
    };
    let (shape, pose_before) = run(&store, Pose);
    assert_eq!(shape, vec![1, 4, 16, 16]);
    set(&mut store, "fusion.transform.raw.weight", |_| 0.5);
    assert_eq!(run(&store, Pose).1, pose_before);

    let mut store = ParamStore::new();
    let privacy = AttentionFusion::new(&mut store, &[Depth, Pose], 6, 4, 6, 1);
    let mut tape = Tape::new();
    let f = tape.constant(x.clone());
    assert!(privacy.transform_modality(&mut tape, &store, f, Raw).is_err());
}

#[test]
fn embedding_shapes_zero_input_and_sensitivity() {
    let mut store = ParamStore::<f64>::new();
    let net = EmbedNet::new(&mut store, "probe", 4, 6, 3);
    let mut tape = Tape::new();
    let zero = tape.constant(Tensor::zeros([1, 4, 16, 16]));
    let e = net.forward(&mut tape, &store, zero).unwrap();
    assert_eq!(tape.shape(e), &[1, 6]);
    assert!(tape.value(e).data().iter().all(|&v| v == 0.0));

    let small = tape.constant(Tensor::zeros([1, 4, 4, 16]));
    assert!(net.forward(&mut tape, &store, small).is_err());

    let base = random(&[1, 4, 16, 16], 4);
    let embed = |x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let e = net.forward(&mut tape, &store, v).unwrap();
        tape.value(e).data().to_vec()
    };
    let e0 = embed(&base);
    let mut changed = 0;
    for cell in [0, 17, 100, 135, 200, 255] {
        let mut x = base.clone();
        for c in 0..4 {
            x.data_mut()[c * 256 + cell] += 5.0;
        }
        if embed(&x) != e0 {
            changed += 1;
        }
    }
    assert!(changed > 0);
}

#[test]
fn attention_weight_examples() {
    let mut store = ParamStore::new();
    let fusion = module(&mut store, 4, 4);
    set(&mut store, "fusion.attention.weight", |_| 0.0);
    let mut tape = Tape::new();
    let embs: Vec<Var> = (0..3).map(|k| tape.constant(random(&[2, 6], 10 + k))).collect();
    let w = fusion.attention_weights(&mut tape, &store, &embs).unwrap();
    for &v in tape.value(w).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!(fusion.attention_weights(&mut tape, &store, &embs[..2]).is_err());

    let logits = tape.constant(Tensor::new([1, 3], vec![40.0, -40.0, -40.0]).unwrap());
    let s = tape.softmax(logits, 1).unwrap();
    let v = tape.value(s).data().to_vec();
    assert!(v[0] > 1.0 - 1e-12 && v[1] < 1e-12 && v[2] < 1e-12);

    let a = tape.constant(Tensor::new([1, 3], vec![0.3, -1.2, 2.0]).unwrap());
    let b = tape.constant(Tensor::new([1, 3], vec![7.3, 5.8, 9.0]).unwrap());
    let (sa, sb) = (tape.softmax(a, 1).unwrap(), tape.softmax(b, 1).unwrap());
    for (x, y) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

/// Scalar loop over Σ_m w_m T_m.
fn fuse_oracle(maps: &[Tensor<f64>], w: &[f64], n: usize) -> Vec<f64> {
    let per = maps[0].numel() / n;
    let mut out = vec![0.0; maps[0].numel()];
    for (k, o) in out.iter_mut().enumerate() {
        let s = k / per;
        for (m, t) in maps.iter().enumerate() {
            *o += w[s * maps.len() + m] * t.data()[k];
        }
    }
    out
}

fn run_fuse(maps: &[Tensor<f64>], w: &[f64], n: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = maps.iter().map(|t| tape.constant(t.clone())).collect();
    let wv = tape.constant(Tensor::new([n, maps.len()], w.to_vec()).unwrap());
    let f = fuse(&mut tape, &vars, wv).unwrap();
    tape.value(f).data().to_vec()
}

#[test]
fn fuse_examples() {
    let maps: Vec<Tensor<f64>> = (0..3).map(|k| random(&[1, 4, 8, 8], 20 + k)).collect();
    assert_eq!(run_fuse(&maps, &[1.0, 0.0, 0.0], 1), maps[0].data());
    assert_eq!(run_fuse(&maps, &[0.0, 0.0, 1.0], 1), maps[2].data());

    let same = vec![maps[1].clone(); 3];
    let third = 1.0 / 3.0;
    for (a, b) in run_fuse(&same, &[third; 3], 1).iter().zip(maps[1].data()) {
        assert!((a - b).abs() < 1e-15);
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = maps.iter().map(|t| tape.constant(t.clone())).collect();
    let wv = tape.constant(Tensor::new([1, 2], vec![0.5, 0.5]).unwrap());
    assert!(fuse(&mut tape, &vars, wv).is_err());
}

#[test]
fn fuse_gradient_wrt_weights_is_the_map() {
    let maps: Vec<Tensor<f64>> = (0..2).map(|k| random(&[1, 2, 4, 4], 30 + k)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = maps.iter().map(|t| tape.constant(t.clone())).collect();
    let w = tape.leaf(Tensor::new([1, 2], vec![0.3, 0.7]).unwrap().with_requires_grad(true));
    let f = fuse(&mut tape, &vars, w).unwrap();
    let s = tape.sum(f);
    let grads = tape.backward(s).unwrap();
    let g = grads.get(w).unwrap();
    for m in 0..2 {
        assert!((g[m] - maps[m].sum()).abs() < 1e-12);
    }
}

#[test]
fn fusion_output_is_weighted_sum_of_transforms() {
    let mut store = ParamStore::new();
    let fusion = module(&mut store, 4, 4);
    let mut tape = Tape::new();
    let feats: Vec<Var> = (0..3).map(|k| tape.constant(random(&[2, 4, 16, 16], 40 + k))).collect();
    let out = fusion.forward(&mut tape, &store, &feats).unwrap();
    let ts: Vec<Tensor<f64>> = out.transformed.iter().map(|&t| tape.value(t).clone()).collect();
    let w = tape.value(out.weights).data().to_vec();
    let fused = tape.value(out.fused).data().to_vec();
    assert_eq!(tape.shape(out.fused), &[2, 4, 16, 16]);
    assert_eq!(fused, run_fuse(&ts, &w, 2));
    for (a, b) in fused.iter().zip(fuse_oracle(&ts, &w, 2)) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(fusion.forward(&mut tape, &store, &feats[..2]).is_err());
}

#[test]
fn sampler_contract() {
    let all = [Raw, Depth, Pose];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        assert!(sample_dropout_plan(&all, 0.0, &mut rng).unwrap().is_empty());
    }
    let mut nonempty = 0;
    let mut subsets = BTreeSet::new();
    for _ in 0..10_000 {
        let plan = sample_dropout_plan(&all, 0.3, &mut rng).unwrap();
        assert!(plan.dropped.len() < 3);
        if !plan.is_empty() {
            nonempty += 1;
            subsets.insert(plan.dropped.iter().copied().collect::<Vec<_>>());
        }
    }
    assert!((nonempty as f64 / 10_000.0 - 0.3).abs() < 0.02, "{nonempty}");
    assert_eq!(subsets.len(), 6);
    assert!(sample_dropout_plan(&[Pose], 0.3, &mut rng).is_err());
    assert!(sample_dropout_plan(&[Pose], 0.0, &mut rng).unwrap().is_empty());
}

#[test]
fn dropout_substitution() {
    let img: Tensor<f64> = random(&[2, 3, 8, 8], 50);
    let plan = DropoutPlan::dropping(&[Depth], 99);
    assert_eq!(apply_dropout(&img, &plan, Raw), img);
    let noise = apply_dropout(&img, &plan, Depth);
    assert_eq!(noise.shape(), img.shape());
    assert!(noise.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    assert_eq!(noise, apply_dropout(&img, &plan, Depth));
    assert_ne!(noise, noise_image::<f64>(&[2, 3, 8, 8], 99, Pose));
    assert_ne!(noise, noise_image::<f64>(&[2, 3, 8, 8], 98, Depth));
}

#[test]
fn late_fusion_injection() {
    let mut tape = Tape::<f64>::new();
    let f = tape.constant(random(&[1, 32, 16, 16], 60));
    let cone = tape.constant(Tensor::full([1, 1, 64, 64], 0.25));
    let mask = tape.constant(random(&[1, 1, 64, 64], 61));
    let out = late_fuse_inject(&mut tape, Variant::LateFusion, f, cone, mask).unwrap();
    assert_eq!(tape.shape(out), &[1, 34, 16, 16]);
    let v = tape.value(out).data();
    assert!(v[32 * 256..33 * 256].iter().all(|&x| (x - 0.25).abs() < 1e-15));
    assert!(late_fuse_inject(&mut tape, Variant::Multimodal, f, cone, mask).is_err());
}

#[test]
fn empty_plan_gives_zero_attention_loss() {
    let mut tape = Tape::<f64>::new();
    let w = tape.constant(Tensor::new([2, 3], vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1]).unwrap());
    let plan = DropoutPlan::none();
    let cols: Vec<usize> = plan.dropped.iter().map(|m| m.index()).collect();
    let l = loss_att(&mut tape, w, &cols).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_stay_on_the_simplex(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut store = ParamStore::new();
        let fusion = AttentionFusion::new(&mut store, &[Raw, Depth, Pose], 4, 4, 6, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let feats: Vec<Var> = (0..3)
            .map(|_| tape.constant(Tensor::from_fn([2, 4, 8, 8], |_| scale * rng.gen_range(-1.0..1.0))))
            .collect();
        let out = fusion.forward(&mut tape, &store, &feats).unwrap();
        for row in tape.value(out.weights).data().chunks(3) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&w| w > 0.0 && w < 1.0));
        }
    }

    #[test]
    fn fuse_is_linear_in_each_map(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let maps: Vec<Tensor<f64>> = (0..3).map(|k| random(&[2, 2, 4, 4], seed.wrapping_add(k))).collect();
        let extra = random(&[2, 2, 4, 4], seed.wrapping_add(7));
        let w = vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3];
        let mut mixed = maps.clone();
        mixed[1] = Tensor::from_fn([2, 2, 4, 4], |i| a * maps[1].data()[i] + b * extra.data()[i]);
        let lhs = run_fuse(&mixed, &w, 2);
        let mut only_extra = vec![Tensor::zeros([2, 2, 4, 4]); 3];
        only_extra[1] = extra.clone();
        let mut scaled = maps.clone();
        scaled[1] = Tensor::from_fn([2, 2, 4, 4], |i| a * maps[1].data()[i]);
        let base = run_fuse(&scaled, &w, 2);
        let e = run_fuse(&only_extra, &w, 2);
        for k in 0..lhs.len() {
            prop_assert!((lhs[k] - (base[k] + b * e[k])).abs() < 1e-9);
        }
    }

    #[test]
    fn fuse_matches_scalar_oracle(seed in any::<u64>(), raw in prop::collection::vec(0.01f64..1.0, 6)) {
        let maps: Vec<Tensor<f64>> = (0..3).map(|k| random(&[2, 3, 4, 4], seed.wrapping_add(k))).collect();
        let mut w = raw.clone();
        for row in w.chunks_mut(3) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let got = run_fuse(&maps, &w, 2);
        for (a, b) in got.iter().zip(fuse_oracle(&maps, &w, 2)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn plans_never_drop_everything(seed in any::<u64>(), p in 0.0f64..1.0, two in any::<bool>()) {
        let active: Vec<ModalityId> = if two { vec![Depth, Pose] } else { vec![Raw, Depth, Pose] };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let plan = sample_dropout_plan(&active, p, &mut rng).unwrap();
            prop_assert!(plan.dropped.len() < active.len());
            prop_assert!(plan.dropped.iter().all(|m| active.contains(m)));
        }
    }
}
