//! Synthetic scenes where the gaze target is known by construction.
//!
//! A scene holds colored objects and stick-figure people on depth layers.
//! The subject (person 0) looks along a ray that passes through exactly one
//! valid target: the nearest object on the subject's own depth layer, or
//! another person's head. Everything else is kept off the ray, except the
//! depth distractor, which sits on the ray on a deeper layer.

use std::f64::consts::PI;

use gazecast_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::{hsv, Canvas, Rgb};
use super::SceneSample;
use crate::error::{GazeError, Result};
use crate::geometry::{EyePoint, EyeSource, GazeVector2D, HeadBox, Point};

const HEAD_RADIUS: f64 = 0.07;
const OBJECT_RADIUS: (f64, f64) = (0.045, 0.07);
const TARGET_DISTANCE: (f64, f64) = (0.2, 0.55);
/// Angular clearance between the gaze ray and any non-target item.
const RAY_CLEARANCE: f64 = 20.0 * PI / 180.0;
/// Minimum along-ray gap between target and distractor.
const DISTRACTOR_GAP: f64 = 0.18;
const SEPARATION: f64 = 0.02;
const MAX_ATTEMPTS: usize = 100;
const PLACEMENT_TRIES: usize = 40;
const BACKGROUND_DEPTH: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Object,
    Person,
    DepthDistractor,
    OutOfFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    Object,
    Person,
    DepthDistractor,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub n_objects: usize,
    pub n_people: usize,
    pub depth_layers: usize,
    pub resolution: usize,
    pub rng_seed: u64,
    pub target_rule: TargetRule,
    /// Enables out-of-frame targets.
    pub inout: bool,
    pub p_out: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_objects: 3,
            n_people: 2,
            depth_layers: 3,
            resolution: 64,
            rng_seed: 0,
            target_rule: TargetRule::Mixed,
            inout: false,
            p_out: 0.1,
        }
    }
}

impl SceneSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: SceneSpec = toml::from_str(s).map_err(|e| GazeError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_people == 0 {
            return Err(GazeError::Config("a scene needs at least one person".into()));
        }
        if self.resolution < 32 {
            return Err(GazeError::Config("scene resolution must be at least 32".into()));
        }
        if self.depth_layers == 0 {
            return Err(GazeError::Config("a scene needs at least one depth layer".into()));
        }
        if !(0.0..=1.0).contains(&self.p_out) {
            return Err(GazeError::Config("p_out must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn feasible(&self, s: Scenario) -> bool {
        match s {
            Scenario::Object => self.n_objects >= 1,
            Scenario::Person => self.n_people >= 2,
            Scenario::DepthDistractor => self.n_objects >= 2 && self.depth_layers >= 2,
            Scenario::OutOfFrame => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub center: Point,
    pub radius: f64,
    pub layer: usize,
    pub color: Rgb,
    pub square: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Person {
    pub head: Point,
    pub radius: f64,
    pub layer: usize,
    /// Unit gaze direction.
    pub gaze: [f64; 2],
    pub skin: Rgb,
    pub shirt: Rgb,
}

impl Person {
    fn body(&self) -> [f64; 4] {
        let top = self.head[1] + self.radius;
        [self.head[0] - 0.06, top, self.head[0] + 0.06, top + 0.26]
    }
}

/// Object list of a generated scene. `people[subject]` is the gazer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub objects: Vec<SceneObject>,
    pub people: Vec<Person>,
    pub subject: usize,
    pub depth_layers: usize,
}

impl SceneLayout {
    pub fn depth_of(&self, layer: usize) -> f32 {
        if self.depth_layers <= 1 {
            1.0
        } else {
            (1.0 - 0.7 * layer as f64 / (self.depth_layers - 1) as f64) as f32
        }
    }
}

/// Independent target rule: among objects on the subject's layer and other
/// people's heads, the nearest one the gaze ray passes through.
pub fn resolve_target(layout: &SceneLayout) -> Option<Point> {
    let s = &layout.people[layout.subject];
    let (e, g) = (s.head, s.gaze);
    let hit = |c: Point, r: f64| -> Option<f64> {
        let v = [c[0] - e[0], c[1] - e[1]];
        let t = v[0] * g[0] + v[1] * g[1];
        let perp = (v[0] * g[1] - v[1] * g[0]).abs();
        (t > 0.0 && perp <= r).then_some(t)
    };
    let objects = layout
        .objects
        .iter()
        .filter(|o| o.layer == s.layer)
        .filter_map(|o| hit(o.center, o.radius).map(|t| (t, o.center)));
    let heads = layout
        .people
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != layout.subject)
        .filter_map(|(_, p)| hit(p.head, p.radius).map(|t| (t, p.head)));
    objects
        .chain(heads)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c)
}

fn sample_rng(seed: u64, sample_id: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"scene");
    h.update(seed.to_le_bytes());
    h.update(sample_id.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

enum Footprint {
    Disc(Point, f64),
    Rect([f64; 4]),
}

fn rect_distance(c: Point, r: [f64; 4]) -> f64 {
    let dx = (r[0] - c[0]).max(c[0] - r[2]).max(0.0);
    let dy = (r[1] - c[1]).max(c[1] - r[3]).max(0.0);
    dx.hypot(dy)
}

fn collides(a: &Footprint, b: &Footprint) -> bool {
    match (a, b) {
        (Footprint::Disc(c1, r1), Footprint::Disc(c2, r2)) => {
            (c1[0] - c2[0]).hypot(c1[1] - c2[1]) < r1 + r2 + SEPARATION
        }
        (Footprint::Disc(c, r), Footprint::Rect(q)) | (Footprint::Rect(q), Footprint::Disc(c, r)) => {
            rect_distance(*c, *q) < r + SEPARATION
        }
        (Footprint::Rect(p), Footprint::Rect(q)) => {
            !(p[2] + SEPARATION <= q[0]
                || q[2] + SEPARATION <= p[0]
                || p[3] + SEPARATION <= q[1]
                || q[3] + SEPARATION <= p[1])
        }
    }
}

/// True when the whole disc stays at least `RAY_CLEARANCE` off the ray.
fn off_ray(eye: Point, g: [f64; 2], c: Point, r: f64) -> bool {
    let v = [c[0] - eye[0], c[1] - eye[1]];
    let d = v[0].hypot(v[1]);
    if d <= r + SEPARATION {
        return false;
    }
    let cos = ((v[0] * g[0] + v[1] * g[1]) / d).clamp(-1.0, 1.0);
    cos.acos() >= RAY_CLEARANCE + ((r + SEPARATION) / d).asin()
}

struct Builder<'a> {
    spec: &'a SceneSpec,
    rng: ChaCha8Rng,
    objects: Vec<SceneObject>,
    people: Vec<Person>,
    footprints: Vec<Footprint>,
}

impl Builder<'_> {
    fn random_object(&mut self, center: Point, layer: usize) -> SceneObject {
        let radius = self.rng.gen_range(OBJECT_RADIUS.0..OBJECT_RADIUS.1);
        let color = hsv(self.rng.gen(), self.rng.gen_range(0.75..0.95), self.rng.gen_range(0.8..0.95));
        SceneObject {
            center,
            radius,
            layer,
            color,
            square: self.rng.gen_bool(0.5),
        }
    }

    fn random_person(&mut self, head: Point, layer: usize) -> Person {
        let a = self.rng.gen_range(0.0..2.0 * PI);
        let tone = self.rng.gen_range(-0.08..0.08) as f32;
        Person {
            head,
            radius: HEAD_RADIUS,
            layer,
            gaze: [a.cos(), a.sin()],
            skin: [0.86 + tone, 0.70 + tone, 0.56 + tone],
            shirt: hsv(self.rng.gen(), 0.35, 0.45),
        }
    }

    fn fits_object(&self, o: &SceneObject) -> bool {
        let m = o.radius + SEPARATION;
        let inside = (m..=1.0 - m).contains(&o.center[0]) && (m..=1.0 - m).contains(&o.center[1]);
        inside
            && !self
                .footprints
                .iter()
                .any(|f| collides(f, &Footprint::Disc(o.center, o.radius)))
    }

    fn fits_person(&self, p: &Person) -> bool {
        let inside = (0.1..=0.9).contains(&p.head[0]) && (0.1..=0.65).contains(&p.head[1]);
        inside
            && !self.footprints.iter().any(|f| {
                collides(f, &Footprint::Disc(p.head, p.radius)) || collides(f, &Footprint::Rect(p.body()))
            })
    }

    fn push_object(&mut self, o: SceneObject) {
        self.footprints.push(Footprint::Disc(o.center, o.radius));
        self.objects.push(o);
    }

    fn push_person(&mut self, p: Person) {
        self.footprints.push(Footprint::Disc(p.head, p.radius));
        self.footprints.push(Footprint::Rect(p.body()));
        self.people.push(p);
    }

    /// Places the remaining items anywhere off the subject's gaze ray.
    fn fill_off_ray(&mut self, eye: Point, g: [f64; 2]) -> bool {
        let layers = self.spec.depth_layers;
        while self.objects.len() < self.spec.n_objects {
            let placed = (0..PLACEMENT_TRIES).find_map(|_| {
                let c = [self.rng.gen(), self.rng.gen()];
                let layer = self.rng.gen_range(0..layers);
                let o = self.random_object(c, layer);
                (self.fits_object(&o) && off_ray(eye, g, o.center, o.radius)).then_some(o)
            });
            match placed {
                Some(o) => self.push_object(o),
                None => return false,
            }
        }
        while self.people.len() < self.spec.n_people {
            let placed = (0..PLACEMENT_TRIES).find_map(|_| {
                let c = [self.rng.gen_range(0.1..0.9), self.rng.gen_range(0.1..0.65)];
                let layer = self.rng.gen_range(0..layers);
                let p = self.random_person(c, layer);
                (self.fits_person(&p) && off_ray(eye, g, p.head, p.radius)).then_some(p)
            });
            match placed {
                Some(p) => self.push_person(p),
                None => return false,
            }
        }
        true
    }
}

fn pick_scenario(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Scenario> {
    if spec.inout && rng.gen::<f64>() < spec.p_out {
        return Ok(Scenario::OutOfFrame);
    }
    let wanted: &[(Scenario, f64)] = match spec.target_rule {
        TargetRule::Object => &[(Scenario::Object, 1.0)],
        TargetRule::Person => &[(Scenario::Person, 1.0)],
        TargetRule::DepthDistractor => &[(Scenario::DepthDistractor, 1.0)],
        TargetRule::Mixed => &[
            (Scenario::Object, 0.3),
            (Scenario::Person, 0.3),
            (Scenario::DepthDistractor, 0.4),
        ],
    };
    let options: Vec<(Scenario, f64)> = wanted.iter().copied().filter(|(s, _)| spec.feasible(*s)).collect();
    if options.is_empty() {
        return Err(GazeError::Data(format!(
            "no feasible target placement for rule {:?} with {} objects, {} people, {} layers",
            spec.target_rule, spec.n_objects, spec.n_people, spec.depth_layers
        )));
    }
    let total: f64 = options.iter().map(|o| o.1).sum();
    let mut u = rng.gen::<f64>() * total;
    for &(s, w) in &options {
        if u < w {
            return Ok(s);
        }
        u -= w;
    }
    Ok(options[options.len() - 1].0)
}

/// One attempt at laying out a scene; `None` asks for a retry.
fn try_layout(spec: &SceneSpec, scenario: Scenario, rng: ChaCha8Rng) -> (Option<(SceneLayout, Option<Point>)>, ChaCha8Rng) {
    let mut b = Builder {
        spec,
        rng,
        objects: Vec::new(),
        people: Vec::new(),
        footprints: Vec::new(),
    };
    let layers = spec.depth_layers;
    let subject_layer = match scenario {
        Scenario::DepthDistractor => b.rng.gen_range(0..layers - 1),
        _ => b.rng.gen_range(0..layers),
    };
    let eye = [b.rng.gen_range(0.1..0.9), b.rng.gen_range(0.1..0.65)];
    let mut subject = b.random_person(eye, subject_layer);
    if !b.fits_person(&subject) {
        return (None, b.rng);
    }
    let angle = b.rng.gen_range(0.0..2.0 * PI);
    let g = [angle.cos(), angle.sin()];
    let dist = b.rng.gen_range(TARGET_DISTANCE.0..TARGET_DISTANCE.1);
    let aim = [eye[0] + dist * g[0], eye[1] + dist * g[1]];

    // gaze direction is recomputed from the target so it passes exactly
    // through its center
    let mut target = None;
    let mut ok = true;
    match scenario {
        Scenario::Object | Scenario::DepthDistractor => {
            let o = b.random_object(aim, subject_layer);
            subject.gaze = unit([aim[0] - eye[0], aim[1] - eye[1]]);
            b.push_person(subject.clone());
            ok &= b.fits_object(&o);
            if ok {
                target = Some(o.center);
                b.push_object(o);
            }
            if ok && scenario == Scenario::DepthDistractor {
                let further = b.rng.gen_bool(0.5);
                let gap = b.rng.gen_range(DISTRACTOR_GAP..DISTRACTOR_GAP + 0.15);
                let t = if further { dist + gap } else { dist - gap };
                let layer = b.rng.gen_range(subject_layer + 1..layers);
                let c = [eye[0] + t * g[0], eye[1] + t * g[1]];
                let d = b.random_object(c, layer);
                ok &= t > HEAD_RADIUS + d.radius + SEPARATION && b.fits_object(&d);
                if ok {
                    b.push_object(d);
                }
            }
        }
        Scenario::Person => {
            subject.gaze = unit([aim[0] - eye[0], aim[1] - eye[1]]);
            b.push_person(subject.clone());
            let layer = b.rng.gen_range(0..layers);
            let p = b.random_person(aim, layer);
            ok &= b.fits_person(&p);
            if ok {
                target = Some(p.head);
                b.push_person(p);
            }
        }
        Scenario::OutOfFrame => {
            let far = b.rng.gen_range(0.4..1.0);
            let off = [eye[0] + far * g[0], eye[1] + far * g[1]];
            ok &= !((0.0..=1.0).contains(&off[0]) && (0.0..=1.0).contains(&off[1]));
            subject.gaze = g;
            b.push_person(subject.clone());
        }
    }
    if !ok || !b.fill_off_ray(eye, subject.gaze) {
        return (None, b.rng);
    }
    let layout = SceneLayout {
        objects: b.objects,
        people: b.people,
        subject: 0,
        depth_layers: layers,
    };
    (Some((layout, target)), b.rng)
}

fn unit(v: [f64; 2]) -> [f64; 2] {
    let n = v[0].hypot(v[1]);
    [v[0] / n, v[1] / n]
}

fn render_raw(layout: &SceneLayout, res: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let base = hsv(rng.gen(), 0.15, 0.45);
    let (fx, fy, phase) = (rng.gen_range(2.0..6.0), rng.gen_range(2.0..6.0), rng.gen_range(0.0..2.0 * PI));
    let noise: Vec<f32> = (0..res * res).map(|_| rng.gen_range(-0.03..0.03)).collect();
    let mut c = Canvas::from_fn(res, |idx, p| {
        let t = (0.05 * (2.0 * PI * (fx * p[0] + fy * p[1]) + phase).sin()) as f32 + noise[idx];
        [base[0] + t, base[1] + t, base[2] + t]
    });
    for o in &layout.objects {
        if o.square {
            let h = o.radius * 0.85;
            c.rect([o.center[0] - h, o.center[1] - h, o.center[0] + h, o.center[1] + h], 3, o.color);
        } else {
            c.disc(o.center, o.radius, 3, o.color);
        }
    }
    for p in &layout.people {
        c.rect(p.body(), 3, p.shirt);
        c.disc(p.head, p.radius, 3, p.skin);
        let m = [p.head[0] + 0.55 * p.radius * p.gaze[0], p.head[1] + 0.55 * p.radius * p.gaze[1]];
        c.disc(m, 0.3 * p.radius, 3, [0.12, 0.08, 0.06]);
    }
    c.into_tensor()
}

fn render_depth(layout: &SceneLayout, res: usize) -> Tensor<f32> {
    let g = BACKGROUND_DEPTH;
    let mut c = Canvas::new(res, [g, g, g]);
    for o in &layout.objects {
        let v = layout.depth_of(o.layer);
        if o.square {
            let h = o.radius * 0.85;
            c.rect([o.center[0] - h, o.center[1] - h, o.center[0] + h, o.center[1] + h], 1, [v; 3]);
        } else {
            c.disc(o.center, o.radius, 1, [v; 3]);
        }
    }
    for p in &layout.people {
        let v = layout.depth_of(p.layer);
        c.rect(p.body(), 1, [v; 3]);
        c.disc(p.head, p.radius, 1, [v; 3]);
    }
    c.into_tensor()
}

const LIMB_COLORS: [Rgb; 8] = [
    [1.0, 0.85, 0.0],
    [1.0, 0.45, 0.0],
    [0.0, 0.8, 0.2],
    [0.0, 0.55, 1.0],
    [0.7, 0.2, 1.0],
    [1.0, 0.2, 0.6],
    [0.2, 1.0, 0.9],
    [0.6, 0.6, 1.0],
];

fn render_pose(layout: &SceneLayout, res: usize) -> Tensor<f32> {
    let mut c = Canvas::new(res, [0.0; 3]);
    let th = 0.02;
    for p in &layout.people {
        let [hx, hy] = p.head;
        let top = hy + p.radius;
        let neck = [hx, top + 0.03];
        let hip = [hx, top + 0.14];
        let limbs: [(Point, Point); 8] = [
            ([hx, top], neck),
            ([hx - 0.05, neck[1]], [hx + 0.05, neck[1]]),
            ([hx - 0.05, neck[1]], [hx - 0.07, top + 0.12]),
            ([hx + 0.05, neck[1]], [hx + 0.07, top + 0.12]),
            (neck, hip),
            (hip, [hx - 0.04, top + 0.26]),
            (hip, [hx + 0.04, top + 0.26]),
            ([hx - 0.03, hip[1]], [hx + 0.03, hip[1]]),
        ];
        for (k, (a, b)) in limbs.iter().enumerate() {
            c.segment(*a, *b, th, 3, LIMB_COLORS[k]);
        }
        c.ring(p.head, p.radius, th, 3, [0.9, 0.9, 0.9]);
        let (g, r) = (p.gaze, p.radius);
        let perp = [-g[1], g[0]];
        let nose = [hx + 0.6 * r * g[0], hy + 0.6 * r * g[1]];
        c.disc(nose, 0.015, 3, [1.0, 1.0, 1.0]);
        for (s, col) in [(1.0, [1.0, 0.1, 0.1]), (-1.0, [0.1, 0.3, 1.0])] {
            let e = [
                hx + 0.25 * r * g[0] + s * 0.35 * r * perp[0],
                hy + 0.25 * r * g[1] + s * 0.35 * r * perp[1],
            ];
            c.disc(e, 0.013, 3, col);
        }
    }
    c.into_tensor()
}

fn head_box(p: &Person) -> Result<HeadBox> {
    let m = 1.2 * p.radius;
    HeadBox::new(
        (p.head[0] - m).max(0.0),
        (p.head[1] - m).max(0.0),
        (p.head[0] + m).min(1.0),
        (p.head[1] + m).min(1.0),
    )
}

/// Generates sample `sample_id` of the stream defined by `spec`, together
/// with its object list.
pub fn generate_scene_with_layout(spec: &SceneSpec, sample_id: u64) -> Result<(SceneSample, SceneLayout)> {
    spec.validate()?;
    let mut rng = sample_rng(spec.rng_seed, sample_id);
    let scenario = pick_scenario(spec, &mut rng)?;
    for _ in 0..MAX_ATTEMPTS {
        let (laid, back) = try_layout(spec, scenario, rng);
        rng = back;
        let Some((layout, target)) = laid else { continue };
        if resolve_target(&layout) != target {
            continue;
        }
        let subject = &layout.people[layout.subject];
        let raw = render_raw(&layout, spec.resolution, &mut rng);
        let depth = render_depth(&layout, spec.resolution);
        let pose = render_pose(&layout, spec.resolution);
        let eye = EyePoint {
            x: subject.head[0],
            y: subject.head[1],
            source: EyeSource::PoseMidpoint,
        };
        let sample = SceneSample::new(
            raw,
            depth,
            pose,
            head_box(subject)?,
            eye,
            target.into_iter().collect(),
            target.is_some(),
            GazeVector2D::normalized(subject.gaze)?,
            sample_id,
            scenario,
        )?;
        return Ok((sample, layout));
    }
    Err(GazeError::Data(format!(
        "no feasible {scenario:?} placement for sample {sample_id} after {MAX_ATTEMPTS} attempts"
    )))
}

pub fn generate_scene(spec: &SceneSpec, sample_id: u64) -> Result<SceneSample> {
    generate_scene_with_layout(spec, sample_id).map(|(s, _)| s)
}

/// Generator self-check tallies.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelfCheck {
    pub samples: usize,
    pub in_frame: usize,
    /// In-frame targets with `cos(oracle_dir, target − eye) ≤ 0`.
    pub outside_cone: usize,
    /// Samples whose annotation differs from `resolve_target`.
    pub checker_mismatch: usize,
}

impl SelfCheck {
    pub fn passed(&self) -> bool {
        self.outside_cone == 0 && self.checker_mismatch == 0
    }

    fn record(&mut self, s: &SceneSample, layout: &SceneLayout) {
        self.samples += 1;
        let resolved = resolve_target(layout);
        if resolved.map(|p| vec![p]).unwrap_or_default() != s.gaze_points || resolved.is_some() != s.in_frame {
            self.checker_mismatch += 1;
        }
        if s.in_frame {
            self.in_frame += 1;
            let g = s.oracle_gaze_dir.0;
            let inside = s.gaze_points.iter().all(|p| {
                let v = [p[0] - s.eye.x, p[1] - s.eye.y];
                g[0] * v[0] + g[1] * v[1] > 0.0
            });
            if !inside {
                self.outside_cone += 1;
            }
        }
    }
}

/// Samples `0..count` of the stream, generated in parallel, with the
/// self-check run against the independent target rule.
pub fn generate_dataset(spec: &SceneSpec, count: usize) -> Result<(Vec<SceneSample>, SelfCheck)> {
    let pairs: Vec<(SceneSample, SceneLayout)> = (0..count as u64)
        .into_par_iter()
        .map(|id| generate_scene_with_layout(spec, id))
        .collect::<Result<_>>()?;
    let mut check = SelfCheck::default();
    let samples = pairs
        .into_iter()
        .map(|(s, l)| {
            check.record(&s, &l);
            s
        })
        .collect();
    Ok((samples, check))
}

/// Self-check of already generated samples.
pub fn self_check(pairs: &[(SceneSample, SceneLayout)]) -> SelfCheck {
    let mut check = SelfCheck::default();
    for (s, l) in pairs {
        check.record(s, l);
    }
    check
}
