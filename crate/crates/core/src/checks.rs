//! Self-verification suites run by `gazecast check`.
//!
//! The gradient suite compares autodiff with central differences; the oracle
//! suite compares cones, heatmaps and metrics with brute-force scalar
//! re-computations.

use std::f64::consts::PI;
use std::time::Instant;

use gazecast_tensor::gradcheck::{check_inputs, check_params, GradCheck};
use gazecast_tensor::{ParamId, ParamStore, Result as TResult, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Precision, RunConfig, Variant};
use crate::data::{generate_scene, SceneSample, SceneSpec};
use crate::error::{GazeError, Result};
use crate::fusion::DropoutPlan;
use crate::geometry::{
    cone_on_tape, containing_pixel, generate_cone, make_gt_heatmap, pixel_center, EyePoint, EyeSource, GazeVector2D, Point,
};
use crate::metrics::{average_precision, roc_auc};
use crate::model::{Batch, GazeModel};

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const PIPELINE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_error < self.tolerance
    }

    fn from_grad(name: &str, g: GradCheck, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            max_error: g.max_rel_error,
            tolerance,
            checked: g.checked,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.results.iter().filter(|r| !r.passed()).collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Magnitudes in `[0.05, 1)` so no ReLU kink lies within the step.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn as_tensor_error(e: GazeError) -> TensorError {
    match e {
        GazeError::Tensor(t) => t,
        other => TensorError::Domain {
            op: "check",
            detail: other.to_string(),
        },
    }
}

fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> TResult<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let r = tape.constant(uniform(&mut rng, &shape));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

type OpCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> TResult<Var>>);

fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772);
    let mut cases: Vec<OpCase> = Vec::new();
    cases.push((
        "conv2d",
        vec![uniform(&mut rng, &[2, 3, 7, 6]), uniform(&mut rng, &[4, 3, 3, 3]), uniform(&mut rng, &[4])],
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            project(t, y, 1)
        }),
    ));
    cases.push((
        "global_max_pool",
        vec![uniform(&mut rng, &[2, 3, 5, 5])],
        Box::new(|t, v| {
            let y = t.global_max_pool(v[0])?;
            project(t, y, 2)
        }),
    ));
    cases.push((
        "upsample_nearest",
        vec![uniform(&mut rng, &[1, 2, 3, 4])],
        Box::new(|t, v| {
            let y = t.upsample_nearest(v[0], 3)?;
            project(t, y, 3)
        }),
    ));
    cases.push((
        "upsample_bilinear",
        vec![uniform(&mut rng, &[1, 2, 3, 4])],
        Box::new(|t, v| {
            let y = t.upsample_bilinear(v[0], 2)?;
            project(t, y, 4)
        }),
    ));
    cases.push((
        "avg_pool",
        vec![uniform(&mut rng, &[1, 2, 4, 6])],
        Box::new(|t, v| {
            let y = t.avg_pool(v[0], 2)?;
            project(t, y, 5)
        }),
    ));
    cases.push((
        "elementwise",
        vec![off_zero(&mut rng, &[3, 4]), uniform(&mut rng, &[3, 4]), uniform(&mut rng, &[3, 4])],
        Box::new(|t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(v[0], v[1])?;
            let m = t.mul(s, d)?;
            let n = t.add_n(&[m, v[2], v[0]])?;
            let r = t.relu(v[0]);
            let sg = t.sigmoid(n);
            let sc = t.scale(sg, -1.7);
            let sh = t.add_scalar(sc, 0.3);
            let both = t.add(sh, r)?;
            let sm1 = t.softmax(both, 1)?;
            let sm0 = t.softmax(both, 0)?;
            let cat = t.concat(&[sm1, sm0, v[1]], 1)?;
            let sl = t.slice(cat, 1, 2, 7)?;
            let rs = t.reshape(sl, &[7, 3])?;
            let y = project(t, rs, 6)?;
            let mn = t.mean(v[0]);
            let sm = t.sum(v[2]);
            let z = t.add(y, mn)?;
            t.add(z, sm)
        }),
    ));
    cases.push((
        "linear_rows",
        vec![
            uniform(&mut rng, &[4, 5]),
            uniform(&mut rng, &[3, 5]),
            uniform(&mut rng, &[3]),
            uniform(&mut rng, &[4, 3]),
            uniform(&mut rng, &[4]),
        ],
        Box::new(|t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            let c = t.cosine_similarity(y, v[3])?;
            let n = t.normalize_rows(y)?;
            let ne = t.normalize_rows_eps(v[3], 0.3)?;
            let n = t.add(n, ne)?;
            let s = t.scale_rows(n, v[4])?;
            let a = project(t, s, 7)?;
            let b = project(t, c, 8)?;
            t.add(a, b)
        }),
    ));
    let p = Tensor::from_fn([5], |_| rng.gen_range(0.05..0.95));
    cases.push((
        "losses",
        vec![uniform(&mut rng, &[3, 2, 2]), uniform(&mut rng, &[3, 2, 2]), p],
        Box::new(|t, v| {
            let m = t.weighted_mse(v[0], v[1], &[1.0, 0.0, 2.0])?;
            let u = t.mse(v[0], v[1])?;
            let l = t.bce(v[2], &[1.0, 0.0, 1.0, 1.0, 0.0], 1e-7)?;
            let a = t.add(m, l)?;
            t.add(a, u)
        }),
    ));
    cases
}

/// Random gaze configurations for the cone gradient check. The gaze is kept
/// away from directions that put a pixel exactly on the aperture boundary.
fn cone_grad_case(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (9, 11);
    let n = 3;
    let g = Tensor::from_fn([n, 2], |_| {
        let v: f64 = rng.gen_range(0.3..1.5);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let eyes: Vec<Point> = (0..n)
        .map(|_| pixel_center(rng.gen_range(1..h - 1), rng.gen_range(1..w - 1), h, w))
        .collect();
    let aperture = rng.gen_range(0.8..2.6);
    check_inputs(
        &[g],
        move |t, v| {
            let c = cone_on_tape(t, v[0], &eyes, h, w, aperture).map_err(as_tensor_error)?;
            project(t, c, seed ^ 0xc0)
        },
        FD_STEP,
        None,
    )
    .map_err(Into::into)
}

/// Smallest configuration that exercises every module in f64.
pub fn tiny_config(variant: Variant) -> RunConfig {
    let mut c = RunConfig::for_variant(variant);
    c.dtype = Precision::F64;
    c.model.input_resolution = 32;
    c.model.heatmap_resolution = 32;
    c.model.widths = vec![4, 8, 8];
    c.model.feature_channels = 4;
    c.model.fused_channels = 4;
    c.model.embedding_size = 6;
    c.model.crop_resolution = 8;
    c.model.gaze_widths = vec![4, 4];
    c.model.inout_head = true;
    c
}

pub fn tiny_samples(n: usize, seed: u64) -> Result<Vec<SceneSample>> {
    let spec = SceneSpec {
        resolution: 32,
        rng_seed: seed,
        inout: true,
        p_out: 0.3,
        ..SceneSpec::default()
    };
    (0..n as u64).map(|i| generate_scene(&spec, i)).collect()
}

/// Parameters probed by the pipeline check: one per module plus random ones.
pub fn pipeline_picks(model: &GazeModel<f64>, extra: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let named = [
        "gaze.stage0.weight",
        "gaze.direction.weight",
        "scene.raw.enc.stage0.weight",
        "scene.depth.fpn.smooth.weight",
        "fusion.transform.pose.weight",
        "fusion.embed.raw.proj.weight",
        "fusion.attention.weight",
        "heatmap.conv1.weight",
        "inout.fc1.weight",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<(ParamId, usize)> = named
        .iter()
        .filter_map(|n| model.store.id(n))
        .map(|id| (id, rng.gen_range(0..model.store.get(id).numel())))
        .collect();
    let ids: Vec<ParamId> = model.store.ids().collect();
    for _ in 0..extra {
        let id = ids[rng.gen_range(0..ids.len())];
        picks.push((id, rng.gen_range(0..model.store.get(id).numel())));
    }
    picks
}

/// End-to-end loss of the tiny multimodal model, with a dropout plan so all
/// four loss terms are live.
pub fn pipeline_check(seed: u64) -> Result<GradCheck> {
    let cfg = tiny_config(Variant::Multimodal);
    let mut model = GazeModel::<f64>::new(&cfg)?;
    // zero biases on blank pose pixels leave pre-activations exactly on the
    // relu kink, where central differences are meaningless
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for id in model.store.ids().collect::<Vec<_>>() {
        if model.store.name(id).ends_with(".bias") {
            model.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
        }
    }
    let samples = tiny_samples(3, seed)?;
    let refs: Vec<&SceneSample> = samples.iter().collect();
    let batch = Batch::<f64>::from_samples(&refs, &cfg)?;
    let plan = DropoutPlan::dropping(&[crate::config::ModalityId::Depth], seed);
    let picks = pipeline_picks(&model, 6, seed);
    let run = |tape: &mut Tape<f64>, store: &ParamStore<f64>| -> TResult<Var> {
        let mut m = model.clone();
        m.store = store.clone();
        let (_, loss, _) = m.forward_loss(tape, &batch, &plan).map_err(as_tensor_error)?;
        Ok(loss)
    };
    Ok(check_params(&model.store, run, &picks, FD_STEP)?)
}

pub fn grad_suite() -> Result<SuiteReport> {
    let start = Instant::now();
    let mut results = Vec::new();
    for (name, inputs, f) in op_cases() {
        let g = check_inputs(&inputs, f, FD_STEP, None)?;
        results.push(CheckResult::from_grad(name, g, OP_TOLERANCE));
    }
    let mut cone = cone_grad_case(1)?;
    for s in 2..6 {
        cone.merge(&cone_grad_case(s)?);
    }
    results.push(CheckResult::from_grad("gaze_cone", cone, OP_TOLERANCE));
    results.push(CheckResult::from_grad("pipeline", pipeline_check(7)?, PIPELINE_TOLERANCE));
    Ok(SuiteReport {
        results,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn scalar_cone(g: [f64; 2], eye: Point, h: usize, w: usize, aperture: f64) -> Vec<f64> {
    let (er, ec) = containing_pixel(eye, h, w);
    let gn = g[0].hypot(g[1]);
    let thr = if aperture >= 2.0 * PI { -1.0 } else { (aperture / 2.0).cos() };
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            if (r, c) == (er, ec) {
                out[r * w + c] = 1.0;
                continue;
            }
            let p = pixel_center(r, c, h, w);
            let v = [p[0] - eye[0], p[1] - eye[1]];
            let vn = v[0].hypot(v[1]);
            let cos = if vn == 0.0 { 1.0 } else { (g[0] * v[0] + g[1] * v[1]) / (gn * vn) };
            out[r * w + c] = if cos > 0.0 && cos >= thr { cos } else { 0.0 };
        }
    }
    out
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            den += 1.0;
            num += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

fn exhaustive_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count();
    let mut sum = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        // rank of i under a stable descending sort
        let above: Vec<usize> = (0..scores.len())
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i))
            .collect();
        let tp = above.iter().filter(|&&j| labels[j]).count();
        sum += tp as f64 / above.len() as f64;
    }
    sum / pos as f64
}

pub fn oracle_suite() -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0ac1e);
    let mut results = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(2..24), rng.gen_range(2..24));
        let ang: f64 = rng.gen_range(0.0..2.0 * PI);
        let g = [ang.cos() * rng.gen_range(0.2..3.0), ang.sin() * rng.gen_range(0.2..3.0)];
        let eye = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let aperture = rng.gen_range(0.2..2.0 * PI);
        let e = EyePoint {
            x: eye[0],
            y: eye[1],
            source: EyeSource::Annotated,
        };
        let cone = generate_cone(&GazeVector2D(g), &e, h, w, aperture)?;
        let want = scalar_cone(g, eye, h, w, aperture);
        for (a, b) in cone.image.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    results.push(CheckResult {
        name: "cone_scalar".into(),
        max_error: worst,
        tolerance: 1e-12,
        checked: 100,
    });

    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(6..40);
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        worst = worst.max((roc_auc(&scores, &labels)? - pairwise_auc(&scores, &labels)).abs());
    }
    results.push(CheckResult {
        name: "auc_pairwise".into(),
        max_error: worst,
        tolerance: 1e-9,
        checked: 50,
    });

    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(2..30);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        worst = worst.max((average_precision(&scores, &labels)? - exhaustive_ap(&scores, &labels)).abs());
    }
    results.push(CheckResult {
        name: "ap_exhaustive".into(),
        max_error: worst,
        tolerance: 1e-12,
        checked: 50,
    });

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(4..20), rng.gen_range(4..20));
        let k = rng.gen_range(1..4);
        let pts: Vec<Point> = (0..k).map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
        let sigma = rng.gen_range(0.5..4.0);
        let hm = make_gt_heatmap(&pts, h, w, sigma)?;
        for r in 0..h {
            for c in 0..w {
                let want = pts
                    .iter()
                    .map(|p| {
                        let (pr, pc) = containing_pixel(*p, h, w);
                        let d2 = (r as f64 - pr as f64).powi(2) + (c as f64 - pc as f64).powi(2);
                        (-d2 / (2.0 * sigma * sigma)).exp()
                    })
                    .fold(0.0, f64::max);
                worst = worst.max((hm.map.data()[r * w + c] - want).abs());
            }
        }
    }
    results.push(CheckResult {
        name: "gt_heatmap".into(),
        max_error: worst,
        tolerance: 1e-12,
        checked: 20,
    });

    Ok(SuiteReport {
        results,
        seconds: start.elapsed().as_secs_f64(),
    })
}
