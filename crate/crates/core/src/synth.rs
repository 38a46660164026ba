//! Procedural driving-like scenes: a ground ramp receding towards a horizon,
//! sky without depth return, and box/ellipse objects standing on the ground.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, mismatch, Result};
use crate::tensor::Tensor;

/// Farthest depth the generator emits, in meters.
pub const MAX_DEPTH: f32 = 80.0;
/// Depth of the bottom image row, in meters.
const NEAR_DEPTH: f32 = 3.0;
/// Fraction of the image height above the horizon.
const HORIZON: f32 = 0.4;
const MIN_VISIBLE_PIXELS: usize = 12;
pub const MAX_OBJECTS: usize = 32;
pub const MIN_EXTENT: usize = 32;

/// One scene: RGB, dense ground truth and per-instance masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// 3×H×W in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// 1×H×W meters; 0 marks pixels without a depth return.
    pub depth_gt: Tensor<f32>,
    /// 1×H×W binary masks, pairwise disjoint.
    pub instances: Vec<Tensor<f32>>,
    pub scene_id: String,
    pub condition: String,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.depth_gt.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.depth_gt.shape()[2]
    }

    pub fn n_valid(&self) -> usize {
        self.depth_gt.data().iter().filter(|&&d| d > 0.0).count()
    }

    /// Checks the structural invariants (shared extents, binary non-empty
    /// masks, non-negative depth).
    pub fn validate(&self) -> Result<()> {
        let (h, w) = match *self.depth_gt.shape() {
            [1, h, w] => (h, w),
            _ => return Err(invalid("sample", format!("depth must be 1×H×W, got {:?}", self.depth_gt.shape()))),
        };
        if self.rgb.shape() != [3, h, w] {
            return Err(mismatch("sample", self.rgb.shape(), &[3, h, w]));
        }
        if self.depth_gt.data().iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(invalid("sample", "depth must be finite and non-negative"));
        }
        for (i, m) in self.instances.iter().enumerate() {
            if m.shape() != [1, h, w] {
                return Err(mismatch("sample", m.shape(), &[1, h, w]));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(invalid("sample", format!("instance {i} is not binary")));
            }
            if !m.data().iter().any(|&v| v == 1.0) {
                return Err(invalid("sample", format!("instance {i} is empty")));
            }
        }
        Ok(())
    }
}

/// Sparse depth observation drawn from a [`Sample`].
#[derive(Clone, Debug, PartialEq)]
pub struct SparseInput {
    /// 1×H×W meters, zero where not observed.
    pub depth_sparse: Tensor<f32>,
    /// 1×H×W in {0, 1}.
    pub validity: Tensor<f32>,
}

impl SparseInput {
    pub fn kept(&self) -> usize {
        self.validity.data().iter().filter(|&&v| v > 0.0).count()
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Clone, Debug)]
struct Object {
    shape: Shape,
    cx: f32,
    cy: f32,
    half_w: f32,
    half_h: f32,
    depth: f32,
    /// Depth change per pixel to the right of the center (0 for flat faces).
    slope_x: f32,
    color: [f32; 3],
}

impl Object {
    /// Depth at pixel `(y, x)` if the object covers it.
    fn depth_at(&self, y: usize, x: usize) -> Option<f32> {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        let (dx, dy) = ((px - self.cx) / self.half_w, (py - self.cy) / self.half_h);
        let inside = match self.shape {
            Shape::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            Shape::Ellipse => dx * dx + dy * dy <= 1.0,
        };
        inside.then(|| self.depth + self.slope_x * (px - self.cx))
    }

    fn bbox(&self, h: usize, w: usize) -> (Range<usize>, Range<usize>) {
        let clampi = |v: f32, hi: usize| (v.max(0.0) as usize).min(hi);
        (
            clampi(self.cy - self.half_h - 1.0, h)..clampi(self.cy + self.half_h + 1.0, h),
            clampi(self.cx - self.half_w - 1.0, w)..clampi(self.cx + self.half_w + 1.0, w),
        )
    }
}

fn horizon_row(h: usize) -> usize {
    Float::round(h as f32 * HORIZON) as usize
}

/// Ground depth at row `y`, or `None` above the horizon (sky).
fn ground_depth(y: usize, h: usize) -> Option<f32> {
    let hz = horizon_row(h);
    if y < hz {
        return None;
    }
    let d = NEAR_DEPTH * (h - hz) as f32 / (y - hz + 1) as f32;
    Some(d.min(MAX_DEPTH))
}

/// Row at which the ground is at depth `d` (where an object of depth `d`
/// touches the ground).
fn contact_row(d: f32, h: usize) -> f32 {
    let hz = horizon_row(h) as f32;
    hz - 1.0 + NEAR_DEPTH * (h as f32 - hz) / d
}

fn focal(w: usize) -> f32 {
    0.8 * w as f32
}

const PALETTE: [[f32; 3]; 8] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.45, 0.85],
    [0.95, 0.80, 0.25],
    [0.30, 0.75, 0.35],
    [0.70, 0.35, 0.80],
    [0.95, 0.55, 0.15],
    [0.25, 0.80, 0.80],
    [0.75, 0.75, 0.75],
];

fn random_object(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Object {
    let depth: f32 = rng.random_range(5.0..40.0);
    let f = focal(w);
    let width_m: f32 = rng.random_range(1.5..4.5);
    let height_m: f32 = rng.random_range(1.2..3.5);
    let half_w = (0.5 * width_m * f / depth).max(2.0);
    let half_h = (0.5 * height_m * f / depth).max(2.0);
    let bottom = contact_row(depth, h).min(h as f32 - 1.0);
    let cx = rng.random_range(0.0..w as f32);
    let shape = if rng.random_bool(0.5) { Shape::Rect } else { Shape::Ellipse };
    let slope_x = if rng.random_bool(0.5) {
        0.0
    } else {
        rng.random_range(-1.0f32..1.0) / half_w
    };
    let color = PALETTE[rng.random_range(0..PALETTE.len())];
    Object {
        shape,
        cx,
        cy: bottom - half_h,
        half_w,
        half_h,
        depth,
        slope_x,
        color,
    }
}

/// Per-pixel owner (object index) under depth ordering, plus the z-buffer.
fn render_owners(objects: &[Object], h: usize, w: usize) -> (Vec<Option<usize>>, Vec<f32>) {
    let mut zbuf: Vec<f32> = (0..h * w)
        .map(|i| ground_depth(i / w, h).unwrap_or(f32::INFINITY))
        .collect();
    let mut owner = vec![None; h * w];
    for (k, o) in objects.iter().enumerate() {
        let (ys, xs) = o.bbox(h, w);
        for y in ys {
            for x in xs.clone() {
                if let Some(d) = o.depth_at(y, x) {
                    let i = y * w + x;
                    if d < zbuf[i] {
                        zbuf[i] = d;
                        owner[i] = Some(k);
                    }
                }
            }
        }
    }
    (owner, zbuf)
}

fn visible_counts(owner: &[Option<usize>], n: usize) -> Vec<usize> {
    let mut c = vec![0; n];
    for k in owner.iter().flatten() {
        c[*k] += 1;
    }
    c
}

/// Deterministically generates a scene from `seed`.
///
/// Objects whose placement would leave any instance with fewer than a dozen
/// visible pixels are rejected; after a bounded number of retries the scene
/// simply has fewer objects.
pub fn generate_scene(seed: u64, h: usize, w: usize, n_objects: usize) -> Result<Sample> {
    if !(1..=MAX_OBJECTS).contains(&n_objects) {
        return Err(invalid("generate_scene", format!("n_objects must be in [1, {MAX_OBJECTS}], got {n_objects}")));
    }
    if h < MIN_EXTENT || w < MIN_EXTENT {
        return Err(invalid("generate_scene", format!("extents must be ≥ {MIN_EXTENT}, got {h}×{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects: Vec<Object> = Vec::with_capacity(n_objects);
    let mut attempts = 0;
    while objects.len() < n_objects && attempts < 20 * n_objects {
        attempts += 1;
        objects.push(random_object(&mut rng, h, w));
        let (owner, _) = render_owners(&objects, h, w);
        if visible_counts(&owner, objects.len()).iter().any(|&c| c < MIN_VISIBLE_PIXELS) {
            objects.pop();
        }
    }

    let (owner, zbuf) = render_owners(&objects, h, w);
    let hw = h * w;
    let mut depth = vec![0.0f32; hw];
    let mut rgb = vec![0.0f32; 3 * hw];
    let hz = horizon_row(h);
    let f = focal(w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let z = zbuf[i];
            let color = match owner[i] {
                Some(k) => {
                    depth[i] = z;
                    let shade = 0.45 + 0.55 * (1.0 - z / MAX_DEPTH).clamp(0.0, 1.0);
                    objects[k].color.map(|c| c * shade)
                }
                None if z.is_finite() => {
                    depth[i] = z;
                    // Ground: checker pattern in world coordinates, darker far away.
                    let lateral = (x as f32 + 0.5 - 0.5 * w as f32) * z / f;
                    let cell = Float::floor(lateral / 2.0) as i64 + Float::floor(z / 4.0) as i64;
                    let tex = if cell.rem_euclid(2) == 0 { 0.06 } else { -0.06 };
                    let shade = 0.5 + 0.5 * (1.0 - z / MAX_DEPTH);
                    [0.38 + tex, 0.40 + tex, 0.33 + tex].map(|c| (c * shade).clamp(0.0, 1.0))
                }
                None => {
                    let t = y as f32 / hz.max(1) as f32;
                    [0.45 + 0.35 * t, 0.65 + 0.2 * t, 0.95]
                }
            };
            for c in 0..3 {
                rgb[c * hw + i] = color[c].clamp(0.0, 1.0);
            }
        }
    }
    let instances = (0..objects.len())
        .map(|k| {
            let m = owner.iter().map(|o| if *o == Some(k) { 1.0 } else { 0.0 }).collect();
            Tensor::new(&[1, h, w], m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sample {
        rgb: Tensor::new(&[3, h, w], rgb)?,
        depth_gt: Tensor::new(&[1, h, w], depth)?,
        instances,
        scene_id: format!("scene_{seed:05}"),
        condition: String::from("synthetic"),
    })
}

/// Keeps each pixel with positive ground-truth depth independently with
/// probability `keep_prob`.
pub fn sparsify(sample: &Sample, keep_prob: f64, seed: u64) -> Result<SparseInput> {
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(invalid("sparsify", format!("keep_prob must be in [0, 1], got {keep_prob}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = sample.depth_gt.data();
    let mut validity = vec![0.0f32; gt.len()];
    let mut sparse = vec![0.0f32; gt.len()];
    for (i, &d) in gt.iter().enumerate() {
        if d > 0.0 && rng.random::<f64>() < keep_prob {
            validity[i] = 1.0;
            sparse[i] = d;
        }
    }
    let shape = sample.depth_gt.shape();
    Ok(SparseInput {
        depth_sparse: Tensor::new(shape, sparse)?,
        validity: Tensor::new(shape, validity)?,
    })
}

/// 80/20 partition of `n` consecutive seeds: `[0, ⌈0.8n⌉)` train, the rest
/// validation.
pub fn split(n: usize) -> (Range<usize>, Range<usize>) {
    let n_train = (4 * n).div_ceil(5);
    (0..n_train, n_train..n)
}

/// SplitMix64 mix, used to derive independent per-sample seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
