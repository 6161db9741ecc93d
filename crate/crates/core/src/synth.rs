//! Deterministic synthetic scenes: three base shapes and one elongated
//! task shape on a noisy background.
//!
//! Every scene is a pure function of `(seed, mix, index)`. Objects are drawn
//! in order, later ones on top, and each keeps at least `min_visible` of its
//! own mask after occlusion.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fusion::{iou, BBox};
use crate::metrics::{write_ground_truth, GroundTruth};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CIRCLE: usize = 0;
pub const SQUARE: usize = 1;
pub const TRIANGLE: usize = 2;
pub const ROUNDED_BAR: usize = 3;
pub const BASE_CLASSES: [usize; 3] = [CIRCLE, SQUARE, TRIANGLE];
pub const TASK_CLASSES: [usize; 1] = [ROUNDED_BAR];
pub const CLASS_NAMES: [&str; 4] = ["circle", "square", "triangle", "rounded-bar"];

/// Fill value per class on a `[0, 1]` intensity scale.
const FILL: [f64; 4] = [0.9, 0.7, 0.8, 0.45];

pub fn class_name(class_id: usize) -> String {
    CLASS_NAMES
        .get(class_id)
        .map_or_else(|| format!("class{class_id}"), |s| s.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClassMix {
    BaseOnly,
    TaskOnly,
    Mixed,
}

impl ClassMix {
    fn tag(self) -> u64 {
        match self {
            ClassMix::BaseOnly => 0x6261_7365,
            ClassMix::TaskOnly => 0x7461_736b,
            ClassMix::Mixed => 0x6d69_7865,
        }
    }

    /// Classes that can appear under this mix.
    pub fn classes(self) -> Vec<usize> {
        match self {
            ClassMix::BaseOnly => BASE_CLASSES.to_vec(),
            ClassMix::TaskOnly => TASK_CLASSES.to_vec(),
            ClassMix::Mixed => BASE_CLASSES.iter().chain(&TASK_CLASSES).copied().collect(),
        }
    }
}

impl fmt::Display for ClassMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassMix::BaseOnly => "base",
            ClassMix::TaskOnly => "task",
            ClassMix::Mixed => "mixed",
        })
    }
}

impl FromStr for ClassMix {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(ClassMix::BaseOnly),
            "task" => Ok(ClassMix::TaskOnly),
            "mixed" => Ok(ClassMix::Mixed),
            other => Err(Error::Parse(format!("unknown class mix `{other}` (base|task|mixed)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Extent range of base shapes, in pixels.
    pub size_range: (f64, f64),
    pub bar_long: (f64, f64),
    pub bar_short: (f64, f64),
    pub background: f64,
    pub noise_sigma: f64,
    pub margin: f64,
    pub max_overlap_iou: f64,
    pub min_visible: f64,
    pub placement_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_objects: 1,
            max_objects: 4,
            size_range: (8.0, 24.0),
            bar_long: (14.0, 24.0),
            bar_short: (6.0, 9.0),
            background: 0.2,
            noise_sigma: 0.05,
            margin: 2.0,
            max_overlap_iou: 0.3,
            min_visible: 0.6,
            placement_attempts: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub size: usize,
    /// Row-major grayscale intensities.
    pub pixels: Vec<f64>,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn ground_truth(&self, image_id: usize) -> Vec<GroundTruth> {
        self.objects
            .iter()
            .map(|o| GroundTruth {
                image_id,
                class_id: o.class_id,
                bbox: o.bbox,
            })
            .collect()
    }
}

/// A scene together with the per-pixel owner map: 0 is background, `i + 1`
/// is the topmost object `i`.
#[derive(Clone, Debug)]
pub struct RenderedScene {
    pub scene: Scene,
    pub owner: Vec<u8>,
    /// Unoccluded mask pixel count per object.
    pub mask_area: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Circle {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Square {
        cx: f64,
        cy: f64,
        half: f64,
    },
    /// Upright isosceles triangle with base `w` and height `h`.
    Triangle {
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
    },
    Bar {
        cx: f64,
        cy: f64,
        hw: f64,
        hh: f64,
        r: f64,
    },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Square { cx, cy, half } => (x - cx).abs() <= half && (y - cy).abs() <= half,
            Shape::Triangle { cx, cy, w, h } => {
                let top = cy - h / 2.0;
                let t = (y - top) / h;
                (0.0..=1.0).contains(&t) && (x - cx).abs() <= t * w / 2.0
            }
            Shape::Bar { cx, cy, hw, hh, r } => {
                let dx = ((x - cx).abs() - (hw - r)).max(0.0);
                let dy = ((y - cy).abs() - (hh - r)).max(0.0);
                (x - cx).abs() <= hw && (y - cy).abs() <= hh && dx * dx + dy * dy <= r * r
            }
        }
    }

    /// Pixel-centre mask; the tight box covers whole pixels.
    fn rasterize(&self, size: usize) -> (Vec<usize>, Option<BBox>) {
        let mut pixels = Vec::new();
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..size {
            for x in 0..size {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    pixels.push(y * size + x);
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        let bbox = (!pixels.is_empty())
            .then(|| BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64).ok())
            .flatten();
        (pixels, bbox)
    }
}

fn sample_shape(spec: &SceneSpec, class_id: usize, rng: &mut ChaCha8Rng) -> Shape {
    let s = spec.image_size as f64;
    let (w, h, kind) = if class_id == ROUNDED_BAR {
        let long = rng.gen_range(spec.bar_long.0..=spec.bar_long.1);
        let short = rng.gen_range(spec.bar_short.0..=spec.bar_short.1);
        if rng.gen_bool(0.5) {
            (long, short, class_id)
        } else {
            (short, long, class_id)
        }
    } else {
        let e = rng.gen_range(spec.size_range.0..=spec.size_range.1);
        (e, e, class_id)
    };
    let lo_x = spec.margin + w / 2.0;
    let lo_y = spec.margin + h / 2.0;
    let cx = rng.gen_range(lo_x..=s - lo_x);
    let cy = rng.gen_range(lo_y..=s - lo_y);
    match kind {
        CIRCLE => Shape::Circle { cx, cy, r: w / 2.0 },
        SQUARE => Shape::Square { cx, cy, half: w / 2.0 },
        TRIANGLE => Shape::Triangle { cx, cy, w, h },
        _ => Shape::Bar {
            cx,
            cy,
            hw: w / 2.0,
            hh: h / 2.0,
            r: 0.3 * w.min(h),
        },
    }
}

fn object_classes(spec: &SceneSpec, mix: ClassMix, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let pool = mix.classes();
    let min = if mix == ClassMix::Mixed {
        spec.min_objects.max(2)
    } else {
        spec.min_objects
    };
    let n = rng.gen_range(min..=spec.max_objects.max(min));
    let mut classes = Vec::with_capacity(n);
    if mix == ClassMix::Mixed {
        classes.push(BASE_CLASSES[rng.gen_range(0..BASE_CLASSES.len())]);
        classes.push(TASK_CLASSES[rng.gen_range(0..TASK_CLASSES.len())]);
    }
    while classes.len() < n {
        classes.push(pool[rng.gen_range(0..pool.len())]);
    }
    classes
}

/// Render scene `index` of the `(seed, mix)` stream.
pub fn render(spec: &SceneSpec, seed: u64, mix: ClassMix, index: usize) -> RenderedScene {
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ mix.tag().rotate_left(32));
    rng.set_stream(index as u64);

    let mut owner = vec![0u8; size * size];
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut mask_area = Vec::new();
    for class_id in object_classes(spec, mix, &mut rng) {
        for _ in 0..spec.placement_attempts {
            let shape = sample_shape(spec, class_id, &mut rng);
            let (pixels, Some(bbox)) = shape.rasterize(size) else {
                continue;
            };
            if objects.iter().any(|o| iou(&o.bbox, &bbox) > spec.max_overlap_iou) {
                continue;
            }
            let mut visible: Vec<usize> = (0..objects.len())
                .map(|i| owner.iter().filter(|&&o| o as usize == i + 1).count())
                .collect();
            for &p in &pixels {
                if owner[p] != 0 {
                    visible[owner[p] as usize - 1] -= 1;
                }
            }
            let occludes = visible
                .iter()
                .zip(&mask_area)
                .any(|(&v, &a)| (v as f64) < spec.min_visible * a as f64);
            if occludes {
                continue;
            }
            let id = objects.len() as u8 + 1;
            for &p in &pixels {
                owner[p] = id;
            }
            mask_area.push(pixels.len());
            objects.push(SceneObject { class_id, bbox });
            break;
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
    let pixels = owner
        .iter()
        .map(|&o| {
            let base = if o == 0 {
                spec.background
            } else {
                FILL[objects[o as usize - 1].class_id]
            };
            base + noise.sample(&mut rng)
        })
        .collect();
    RenderedScene {
        scene: Scene { size, pixels, objects },
        owner,
        mask_area,
    }
}

pub fn generate(spec: &SceneSpec, seed: u64, count: usize, mix: ClassMix) -> Result<Vec<Scene>> {
    if count == 0 {
        return Err(Error::Config("scene count must be at least 1".into()));
    }
    Ok((0..count).map(|i| render(spec, seed, mix, i).scene).collect())
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
    pub val: Vec<Scene>,
}

/// 80/10/10 train/test/validation split by index: of every ten consecutive
/// scenes, eight train, one test, one validation.
pub fn split(scenes: Vec<Scene>) -> Split {
    let mut out = Split::default();
    for (i, s) in scenes.into_iter().enumerate() {
        match i % 10 {
            8 => out.test.push(s),
            9 => out.val.push(s),
            _ => out.train.push(s),
        }
    }
    out
}

/// Stack scenes into an `N x 3 x S x S` tensor with replicated channels.
pub fn batch_tensor<T: Scalar>(scenes: &[&Scene]) -> Result<Tensor<T>> {
    let Some(first) = scenes.first() else {
        return Err(Error::Config("empty batch".into()));
    };
    let s = first.size;
    let mut values = Vec::with_capacity(scenes.len() * 3 * s * s);
    for scene in scenes {
        if scene.size != s {
            return Err(Error::Config("scenes of different sizes in one batch".into()));
        }
        for _ in 0..3 {
            values.extend(scene.pixels.iter().map(|&v| T::lit(v)));
        }
    }
    Tensor::new(vec![scenes.len(), 3, s, s], values)
}

/// Write scenes as 8-bit PGM files plus a `labels.tsv` ground-truth file.
pub fn dump(scenes: &[Scene], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut gts = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("scene_{i:05}.pgm")))?);
        write!(f, "P5\n{} {}\n255\n", scene.size, scene.size)?;
        let bytes: Vec<u8> = scene
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        f.write_all(&bytes)?;
        f.flush()?;
        gts.extend(scene.ground_truth(i));
    }
    write_ground_truth(std::fs::File::create(dir.join("labels.tsv"))?, &gts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec::default()
    }

    #[test]
    fn same_seed_and_index_is_bit_identical() {
        let a = render(&spec(), 7, ClassMix::Mixed, 13);
        let b = render(&spec(), 7, ClassMix::Mixed, 13);
        assert_eq!(a.scene, b.scene);
        let c = render(&spec(), 7, ClassMix::Mixed, 14);
        assert_ne!(a.scene.pixels, c.scene.pixels);
    }

    #[test]
    fn mix_contracts() {
        for s in generate(&spec(), 1, 100, ClassMix::BaseOnly).unwrap() {
            assert!(!s.objects.is_empty());
            assert!(s.objects.iter().all(|o| o.class_id != ROUNDED_BAR));
        }
        for s in generate(&spec(), 1, 100, ClassMix::TaskOnly).unwrap() {
            assert!(s.objects.iter().all(|o| o.class_id == ROUNDED_BAR));
        }
        for s in generate(&spec(), 1, 100, ClassMix::Mixed).unwrap() {
            assert!(s.objects.iter().any(|o| o.class_id == ROUNDED_BAR));
            assert!(s.objects.iter().any(|o| o.class_id != ROUNDED_BAR));
        }
        assert!(generate(&spec(), 1, 0, ClassMix::Mixed).is_err());
    }

    #[test]
    fn boxes_are_tight_to_thresholded_pixels_for_single_objects() {
        // Recover the box from the noisy image itself: fills are >= 0.7,
        // background 0.2, noise sigma 0.05.
        let sp = SceneSpec {
            max_objects: 1,
            ..spec()
        };
        for mix in [ClassMix::BaseOnly, ClassMix::TaskOnly] {
            for s in generate(&sp, 3, 60, mix).unwrap() {
                let n = s.size;
                let (mut x0, mut y0, mut x1, mut y1) = (n, n, 0, 0);
                for (p, &v) in s.pixels.iter().enumerate() {
                    if v > 0.45 {
                        x0 = x0.min(p % n);
                        y0 = y0.min(p / n);
                        x1 = x1.max(p % n + 1);
                        y1 = y1.max(p / n + 1);
                    }
                }
                let [bx0, by0, bx1, by1] = s.objects[0].bbox.corners();
                for (a, b) in [(x0, bx0), (y0, by0), (x1, bx1), (y1, by1)] {
                    assert!(
                        (a as f64 - b).abs() <= 1.0,
                        "{:?} vs {:?}",
                        (x0, y0, x1, y1),
                        s.objects[0].bbox
                    );
                }
            }
        }
    }

    #[test]
    fn label_pixel_consistency_and_extent() {
        let sp = spec();
        for mix in [ClassMix::BaseOnly, ClassMix::TaskOnly, ClassMix::Mixed] {
            for i in 0..200 {
                let r = render(&sp, 11, mix, i);
                for (k, o) in r.scene.objects.iter().enumerate() {
                    let visible = r.owner.iter().filter(|&&v| v as usize == k + 1).count();
                    assert!(visible as f64 >= 0.6 * r.mask_area[k] as f64);
                    assert!(o.bbox.width() >= 6.0 && o.bbox.height() >= 6.0);
                    assert!(o.bbox.x1() >= 0.0 && o.bbox.x2() <= 64.0);
                    assert!(o.bbox.y1() >= 0.0 && o.bbox.y2() <= 64.0);
                }
                for (a, oa) in r.scene.objects.iter().enumerate() {
                    for ob in &r.scene.objects[a + 1..] {
                        assert!(iou(&oa.bbox, &ob.bbox) <= 0.3);
                    }
                }
            }
        }
    }

    #[test]
    fn base_class_balance() {
        let mut counts = [0usize; 3];
        for s in generate(&spec(), 5, 1000, ClassMix::BaseOnly).unwrap() {
            for o in &s.objects {
                counts[o.class_id] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for c in counts {
            let frac = c as f64 / total as f64;
            assert!((frac - 1.0 / 3.0).abs() <= 0.1 / 3.0, "{counts:?}");
        }
    }

    #[test]
    fn split_and_batch_shapes() {
        let scenes = generate(&spec(), 2, 20, ClassMix::BaseOnly).unwrap();
        let sp = split(scenes);
        assert_eq!((sp.train.len(), sp.test.len(), sp.val.len()), (16, 2, 2));
        let refs: Vec<&Scene> = sp.train.iter().take(4).collect();
        let t: Tensor<f32> = batch_tensor(&refs).unwrap();
        assert_eq!(t.shape(), &[4, 3, 64, 64]);
        assert_eq!(t.values()[0], t.values()[64 * 64]);
    }

    #[test]
    fn dump_writes_pgm_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate(&spec(), 2, 3, ClassMix::Mixed).unwrap();
        dump(&scenes, dir.path()).unwrap();
        let pgm = std::fs::read(dir.path().join("scene_00000.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n64 64\n255\n"));
        assert_eq!(pgm.len(), 13 + 64 * 64);
        let labels = std::fs::read_to_string(dir.path().join("labels.tsv")).unwrap();
        let n: usize = scenes.iter().map(|s| s.objects.len()).sum();
        assert_eq!(labels.lines().count(), n);
    }
}
