//! Procedural hand/object scenes. Hands are capsules entering from the bottom
//! edge; objects are discs painted over them. An object's label follows from
//! which hands its visible pixels touch, so ground truth can never contain an
//! object without its hand.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{write_labels, RawSample};
use crate::domain::{Class, LabelMap, MaskSet, NUM_CLASSES};
use crate::error::{Error, Result};

pub const MIN_SIZE: usize = 32;

const LEFT_COLOR: [f32; 3] = [214.0, 150.0, 102.0];
const RIGHT_COLOR: [f32; 3] = [168.0, 104.0, 152.0];
const OBJECT_COLORS: [[f32; 3]; 6] = [
    [60.0, 110.0, 210.0],
    [70.0, 180.0, 90.0],
    [225.0, 210.0, 70.0],
    [60.0, 190.0, 200.0],
    [150.0, 150.0, 150.0],
    [200.0, 70.0, 60.0],
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub p_left: f64,
    pub p_right: f64,
    /// Chance that a present hand holds something.
    pub p_hold: f64,
    /// Chance that, with both hands present, they share one object.
    pub p_two_hand: f64,
    pub max_distractors: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 2000,
            size: 64,
            p_left: 0.7,
            p_right: 0.7,
            p_hold: 0.7,
            p_two_hand: 0.3,
            max_distractors: 2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("synth count must be positive".into()));
        }
        if self.size < MIN_SIZE {
            return Err(Error::Config(format!(
                "synth size {} is too small to place shapes (minimum {MIN_SIZE})",
                self.size
            )));
        }
        for (name, p) in [
            ("p_left", self.p_left),
            ("p_right", self.p_right),
            ("p_hold", self.p_hold),
            ("p_two_hand", self.p_two_hand),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct SynthSummary {
    pub count: usize,
    /// Number of samples containing each class.
    pub class_samples: [usize; NUM_CLASSES],
    pub distractors: usize,
}

#[derive(Debug, Clone, Copy)]
struct Capsule {
    base: (f32, f32),
    tip: (f32, f32),
    arm: f32,
    palm: f32,
}

impl Capsule {
    fn contains(&self, y: f32, x: f32) -> bool {
        let (by, bx) = self.base;
        let (ty, tx) = self.tip;
        let (dy, dx) = (ty - by, tx - bx);
        let len2 = dy * dy + dx * dx;
        let t = (((y - by) * dy + (x - bx) * dx) / len2).clamp(0.0, 1.0);
        let (py, px) = (by + t * dy, bx + t * dx);
        let d2 = (y - py).powi(2) + (x - px).powi(2);
        d2 <= self.arm * self.arm || (y - ty).powi(2) + (x - tx).powi(2) <= self.palm * self.palm
    }
}

#[derive(Debug, Clone, Copy)]
struct Disc {
    center: (f32, f32),
    radius: f32,
    color: usize,
}

impl Disc {
    fn contains(&self, y: f32, x: f32) -> bool {
        (y - self.center.0).powi(2) + (x - self.center.1).powi(2) <= self.radius * self.radius
    }
}

/// Instance ids: 0 background, 1 left hand, 2 right hand, 3.. objects.
struct Scene {
    size: usize,
    ids: Vec<u8>,
}

const LEFT_ID: u8 = 1;
const RIGHT_ID: u8 = 2;

impl Scene {
    fn new(size: usize) -> Self {
        Self {
            size,
            ids: vec![0; size * size],
        }
    }

    fn paint_capsule(&mut self, c: &Capsule, id: u8) {
        self.paint(id, |y, x| c.contains(y, x));
    }

    fn paint(&mut self, id: u8, inside: impl Fn(f32, f32) -> bool) {
        for y in 0..self.size {
            for x in 0..self.size {
                if inside(y as f32 + 0.5, x as f32 + 0.5) {
                    self.ids[y * self.size + x] = id;
                }
            }
        }
    }

    fn count(&self, id: u8) -> usize {
        self.ids.iter().filter(|&&v| v == id).count()
    }

    /// True if the disc's pixels would touch (8-neighbourhood) any painted
    /// object or fall off the image.
    fn disc_clear(&self, d: &Disc, reserved_for_hands: bool) -> bool {
        let n = self.size as isize;
        let mut any = false;
        for y in 0..n {
            for x in 0..n {
                if !d.contains(y as f32 + 0.5, x as f32 + 0.5) {
                    continue;
                }
                any = true;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy < 0 || xx < 0 || yy >= n || xx >= n {
                            continue;
                        }
                        let v = self.ids[(yy * n + xx) as usize];
                        if v > RIGHT_ID || (reserved_for_hands && v != 0) {
                            return false;
                        }
                    }
                }
            }
        }
        any
    }

    /// Which hands the visible pixels of instance `id` touch (4-neighbourhood).
    fn contacts(&self, id: u8) -> (bool, bool) {
        let n = self.size;
        let (mut left, mut right) = (false, false);
        for y in 0..n {
            for x in 0..n {
                if self.ids[y * n + x] != id {
                    continue;
                }
                let mut check = |yy: usize, xx: usize| match self.ids[yy * n + xx] {
                    LEFT_ID => left = true,
                    RIGHT_ID => right = true,
                    _ => {}
                };
                if y > 0 {
                    check(y - 1, x);
                }
                if y + 1 < n {
                    check(y + 1, x);
                }
                if x > 0 {
                    check(y, x - 1);
                }
                if x + 1 < n {
                    check(y, x + 1);
                }
            }
        }
        (left, right)
    }
}

fn contact_label(left: bool, right: bool) -> u8 {
    match (left, right) {
        (true, true) => Class::TwoHandObject.label(),
        (true, false) => Class::LeftObject.label(),
        (false, true) => Class::RightObject.label(),
        (false, false) => 0,
    }
}

fn hand<R: Rng>(rng: &mut R, size: f32, left: bool, tip_x: Option<f32>, tip_y: Option<f32>) -> Capsule {
    let half = size / 2.0;
    let tip_x = tip_x.unwrap_or_else(|| {
        let lo = if left { 0.18 } else { 0.55 } * size;
        lo + rng.random::<f32>() * 0.27 * size
    });
    let tip_y = tip_y.unwrap_or_else(|| size * (0.38 + rng.random::<f32>() * 0.22));
    let lean = (rng.random::<f32>() - 0.5) * 0.25 * size;
    let base_x = if left {
        (tip_x - 0.12 * size + lean).clamp(2.0, half)
    } else {
        (tip_x + 0.12 * size + lean).clamp(half, size - 2.0)
    };
    Capsule {
        base: (size + 2.0, base_x),
        tip: (tip_y, tip_x),
        arm: size * (0.065 + rng.random::<f32>() * 0.02),
        palm: size * (0.095 + rng.random::<f32>() * 0.025),
    }
}

fn held_disc<R: Rng>(rng: &mut R, size: f32, c: &Capsule) -> Disc {
    let radius = size * (0.06 + rng.random::<f32>() * 0.04);
    let angle = -std::f32::consts::FRAC_PI_2 + (rng.random::<f32>() - 0.5) * 1.6;
    let d = c.palm + radius - 1.5;
    Disc {
        center: (c.tip.0 + d * angle.sin(), c.tip.1 + d * angle.cos()),
        radius,
        color: rng.random_range(0..OBJECT_COLORS.len()),
    }
}

/// One rendered scene and the number of distractors it contains.
fn render_one(spec: &SynthSpec, index: usize) -> (RawSample, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let size = spec.size;
    let s = size as f32;
    loop {
        let mut scene = Scene::new(size);
        let has_left = rng.random::<f64>() < spec.p_left;
        let has_right = rng.random::<f64>() < spec.p_right;
        let two_hand = has_left && has_right && rng.random::<f64>() < spec.p_two_hand;

        let mut hands: Vec<(Capsule, u8)> = Vec::new();
        let mut discs: Vec<Disc> = Vec::new();
        if two_hand {
            let radius = s * (0.08 + rng.random::<f32>() * 0.04);
            let cx = s * (0.4 + rng.random::<f32>() * 0.2);
            let cy = s * (0.35 + rng.random::<f32>() * 0.2);
            let mut l = hand(&mut rng, s, true, Some(cx), Some(cy));
            let mut r = hand(&mut rng, s, false, Some(cx), Some(cy));
            l.tip.1 = cx - (l.palm + radius - 1.5);
            r.tip.1 = cx + (r.palm + radius - 1.5);
            l.base.1 = l.base.1.min(l.tip.1);
            r.base.1 = r.base.1.max(r.tip.1);
            hands.push((l, LEFT_ID));
            hands.push((r, RIGHT_ID));
            discs.push(Disc {
                center: (cy, cx),
                radius,
                color: rng.random_range(0..OBJECT_COLORS.len()),
            });
        } else {
            if has_left {
                hands.push((hand(&mut rng, s, true, None, None), LEFT_ID));
            }
            if has_right {
                hands.push((hand(&mut rng, s, false, None, None), RIGHT_ID));
            }
            for (c, _) in hands.clone() {
                if rng.random::<f64>() < spec.p_hold {
                    discs.push(held_disc(&mut rng, s, &c));
                }
            }
        }
        for (c, id) in &hands {
            scene.paint_capsule(c, *id);
        }
        let mut next_id = RIGHT_ID + 1;
        for d in &discs {
            if scene.disc_clear(d, false) {
                scene.paint(next_id, |y, x| d.contains(y, x));
                next_id += 1;
            }
        }
        let distractors = rng.random_range(0..=spec.max_distractors);
        let mut placed = 0;
        for _ in 0..distractors {
            for _attempt in 0..20 {
                let d = Disc {
                    center: (rng.random::<f32>() * s, rng.random::<f32>() * s),
                    radius: s * (0.05 + rng.random::<f32>() * 0.05),
                    color: rng.random_range(0..OBJECT_COLORS.len()),
                };
                if scene.disc_clear(&d, true) {
                    scene.paint(next_id, |y, x| d.contains(y, x));
                    discs.push(d);
                    next_id += 1;
                    placed += 1;
                    break;
                }
            }
        }
        // hands that are mostly hidden would make presence ambiguous
        let visible_ok = hands.iter().all(|(_, id)| scene.count(*id) >= size * size / 80);
        if !visible_ok {
            continue;
        }

        let mut id_label = vec![0u8; next_id as usize];
        id_label[LEFT_ID as usize] = Class::LeftHand.label();
        id_label[RIGHT_ID as usize] = Class::RightHand.label();
        for id in RIGHT_ID + 1..next_id {
            let (l, r) = scene.contacts(id);
            id_label[id as usize] = contact_label(l, r);
        }
        let labels = LabelMap::from_shape_fn((size, size), |(y, x)| id_label[scene.ids[y * size + x] as usize]);

        let image = paint_image(&mut rng, &scene, &discs, size);
        return (
            RawSample {
                id: format!("{index:05}"),
                image,
                labels,
            },
            placed,
        );
    }
}

fn paint_image<R: Rng>(rng: &mut R, scene: &Scene, discs: &[Disc], size: usize) -> RgbImage {
    let noise = Normal::new(0.0f32, 6.0).expect("valid std");
    let bg0: [f32; 3] = std::array::from_fn(|_| 70.0 + rng.random::<f32>() * 90.0);
    let bg1: [f32; 3] = std::array::from_fn(|_| 70.0 + rng.random::<f32>() * 90.0);
    let shade = 0.9 + rng.random::<f32>() * 0.2;
    let left_color = LEFT_COLOR.map(|v| v * shade);
    let right_color = RIGHT_COLOR.map(|v| v * shade);
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let id = scene.ids[y * size + x];
            let base = match id {
                0 => {
                    let t = (x + y) as f32 / (2 * size) as f32;
                    std::array::from_fn(|c| bg0[c] * (1.0 - t) + bg1[c] * t)
                }
                LEFT_ID => left_color,
                RIGHT_ID => right_color,
                other => OBJECT_COLORS[discs[(other - RIGHT_ID - 1) as usize].color],
            };
            let px: [u8; 3] = std::array::from_fn(|c| (base[c] + noise.sample(rng)).round().clamp(0.0, 255.0) as u8);
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

/// Generate all scenes in memory.
pub fn synth_samples(spec: &SynthSpec) -> Result<(Vec<RawSample>, SynthSummary)> {
    spec.validate()?;
    let mut summary = SynthSummary {
        count: spec.count,
        ..Default::default()
    };
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let (raw, distractors) = render_one(spec, i);
        summary.distractors += distractors;
        for (k, n) in summary.class_samples.iter_mut().enumerate() {
            let label = k as u8 + 1;
            *n += raw.labels.iter().any(|&v| v == label) as usize;
        }
        out.push(raw);
    }
    Ok((out, summary))
}

/// Write scenes as `<out>/images/*.png` and `<out>/labels/*.png`.
pub fn synth_generate(spec: &SynthSpec, out: &Path) -> Result<SynthSummary> {
    let (samples, summary) = synth_samples(spec)?;
    let images = out.join("images");
    let labels = out.join("labels");
    for dir in [&images, &labels] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for s in &samples {
        let path = images.join(format!("{}.png", s.id));
        s.image.save(&path).map_err(|source| Error::Image { path, source })?;
        write_labels(&labels.join(format!("{}.png", s.id)), &s.labels)?;
    }
    Ok(summary)
}

/// For every 4-connected component of object pixels, the object class
/// implied by which hand classes it borders. Used to check label/geometry
/// consistency.
pub fn contact_classes(masks: &MaskSet) -> Vec<(Class, Option<Class>)> {
    let (h, w) = (masks.height(), masks.width());
    let labels = crate::domain::masks_to_labels(masks).expect("disjoint masks");
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        let l = labels[[start / w, start % w]];
        if seen[start] || l <= Class::RightHand.label() {
            continue;
        }
        let (mut left, mut right) = (false, false);
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut nbrs = Vec::with_capacity(4);
            if y > 0 {
                nbrs.push(p - w);
            }
            if y + 1 < h {
                nbrs.push(p + w);
            }
            if x > 0 {
                nbrs.push(p - 1);
            }
            if x + 1 < w {
                nbrs.push(p + 1);
            }
            for q in nbrs {
                let v = labels[[q / w, q % w]];
                if v == Class::LeftHand.label() {
                    left = true;
                } else if v == Class::RightHand.label() {
                    right = true;
                } else if v == l && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        let implied = match contact_label(left, right) {
            0 => None,
            v => Class::from_index(v as usize - 1),
        };
        out.push((Class::from_index(l as usize - 1).expect("object label"), implied));
    }
    out
}
