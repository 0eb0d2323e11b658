//! "Relational shapes": a synthetic detection dataset whose triangle labels
//! can only be resolved from context elsewhere in the image.
//!
//! Classes: square, circle, triangle-A (a circle exists somewhere in the
//! image) and triangle-B (no circle). Every circle sits at Chebyshev
//! distance of at least [`RELATION_MIN_CELLS`] finest-scale cells from every
//! triangle, so a local receptive field cannot settle a triangle's class.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const N_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; N_CLASSES] = ["square", "circle", "triangle-A", "triangle-B"];
pub const SQUARE: usize = 0;
pub const CIRCLE: usize = 1;
pub const TRIANGLE_A: usize = 2;
pub const TRIANGLE_B: usize = 3;

/// Minimum Chebyshev distance, in finest-scale cells, between any circle
/// and any triangle.
pub const RELATION_MIN_CELLS: usize = 3;

const MAGIC: &[u8; 4] = b"GRSD";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn flag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub bbox: BBox,
    pub class_id: usize,
}

/// One rendered image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// `[3, S, S]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub objects: Vec<Object>,
    pub seed: u64,
    pub split: Split,
}

impl Scenario {
    pub fn image_size(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub split: Split,
    /// Stride of the finest detection scale; defines the cell grid used by
    /// the placement constraints.
    pub finest_stride: usize,
    pub min_object_size: usize,
    pub max_object_size: usize,
    pub max_objects: usize,
    pub noise_sigma: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            image_size: 64,
            split: Split::Train,
            finest_stride: 8,
            min_object_size: 10,
            max_object_size: 30,
            max_objects: 5,
            noise_sigma: 0.02,
        }
    }
}

impl DatasetSpec {
    pub fn with_split(self, split: Split) -> Self {
        DatasetSpec { split, ..self }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.image_size > 0
            && self.finest_stride > 0
            && self.image_size.is_multiple_of(self.finest_stride)
            && self.min_object_size >= 3
            && self.min_object_size <= self.max_object_size
            && self.max_object_size < self.image_size
            && (2..=5).contains(&self.max_objects)
            && self.noise_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid dataset spec {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Square,
    Circle,
    Triangle,
}

/// Seed of scene `index` within a dataset.
pub fn scene_seed(seed: u64, split: Split, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"scene");
    h.update(seed.to_le_bytes());
    h.update([split.flag()]);
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Generates `n` scenes; the result depends only on `(seed, n, spec)`.
pub fn generate(seed: u64, n: usize, spec: &DatasetSpec) -> Result<Vec<Scenario>> {
    if n == 0 {
        return Err(Error::Usage("dataset size must be positive".into()));
    }
    spec.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| generate_scene(scene_seed(seed, spec.split, i), spec))
        .collect()
}

/// Renders the scene determined by `scene_seed` alone.
pub fn generate_scene(scene_seed: u64, spec: &DatasetSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let has_triangle = rng.random_bool(0.75);
    let has_circle = rng.random_bool(0.5);
    let required = has_triangle as usize + has_circle as usize;
    let n = rng.random_range(1..=spec.max_objects).max(required);

    let mut shapes = Vec::with_capacity(n);
    if has_triangle {
        shapes.push(Shape::Triangle);
    }
    if has_circle {
        shapes.push(Shape::Circle);
    }
    let mut pool = vec![(Shape::Square, 0.5)];
    if has_triangle {
        pool.push((Shape::Triangle, if has_circle { 2.0 } else { 1.0 }));
    }
    if has_circle {
        pool.push((Shape::Circle, 1.0));
    }
    let total: f64 = pool.iter().map(|(_, w)| w).sum();
    while shapes.len() < n {
        let mut r = rng.random_range(0.0..total);
        let mut pick = pool[0].0;
        for &(s, w) in &pool {
            if r < w {
                pick = s;
                break;
            }
            r -= w;
        }
        shapes.push(pick);
    }

    let placed = place(&shapes, spec, &mut rng).ok_or_else(|| {
        Error::Data(format!("generation: could not place {n} objects for scene seed {scene_seed}"))
    })?;

    let objects: Vec<Object> = placed
        .iter()
        .map(|&(shape, bbox)| Object {
            bbox,
            class_id: match shape {
                Shape::Square => SQUARE,
                Shape::Circle => CIRCLE,
                Shape::Triangle if has_circle => TRIANGLE_A,
                Shape::Triangle => TRIANGLE_B,
            },
        })
        .collect();
    let image = render(&placed, spec, &mut rng);
    Ok(Scenario {
        image,
        objects,
        seed: scene_seed,
        split: spec.split,
    })
}

fn cell_of(b: &BBox, stride: usize) -> (i64, i64) {
    let (cx, cy) = b.center();
    ((cx / stride as f64).floor() as i64, (cy / stride as f64).floor() as i64)
}

fn place(shapes: &[Shape], spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Option<Vec<(Shape, BBox)>> {
    const SCENE_RESTARTS: usize = 50;
    const OBJECT_ATTEMPTS: usize = 200;
    let s = spec.image_size;
    'scene: for _ in 0..SCENE_RESTARTS {
        let mut placed: Vec<(Shape, BBox)> = Vec::with_capacity(shapes.len());
        for &shape in shapes {
            let mut ok = None;
            for _ in 0..OBJECT_ATTEMPTS {
                let size = rng.random_range(spec.min_object_size..=spec.max_object_size);
                let x0 = rng.random_range(0..=s - size) as f64;
                let y0 = rng.random_range(0..=s - size) as f64;
                let cand = BBox::new(x0, y0, x0 + size as f64, y0 + size as f64);
                if placed.iter().all(|&(other, b)| compatible(shape, &cand, other, &b, spec.finest_stride)) {
                    ok = Some(cand);
                    break;
                }
            }
            match ok {
                Some(b) => placed.push((shape, b)),
                None => continue 'scene,
            }
        }
        return Some(placed);
    }
    None
}

fn compatible(shape: Shape, a: &BBox, other: Shape, b: &BBox, stride: usize) -> bool {
    // one pixel of clear space between objects
    let separated = a.x_min > b.x_max || b.x_min > a.x_max || a.y_min > b.y_max || b.y_min > a.y_max;
    if !separated {
        return false;
    }
    let (ca, cb) = (cell_of(a, stride), cell_of(b, stride));
    if ca == cb {
        return false;
    }
    let relational = matches!(
        (shape, other),
        (Shape::Triangle, Shape::Circle) | (Shape::Circle, Shape::Triangle)
    );
    if relational {
        let cheb = (ca.0 - cb.0).abs().max((ca.1 - cb.1).abs());
        if cheb < RELATION_MIN_CELLS as i64 {
            return false;
        }
    }
    true
}

fn inside(shape: Shape, b: &BBox, px: f64, py: f64) -> bool {
    if px < b.x_min || px > b.x_max || py < b.y_min || py > b.y_max {
        return false;
    }
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let (cx, cy) = b.center();
            let r = b.width() / 2.0;
            (px - cx).powi(2) + (py - cy).powi(2) <= r * r
        }
        Shape::Triangle => {
            // apex at top centre, base along the bottom edge
            let apex = ((b.x_min + b.x_max) / 2.0, b.y_min);
            let left = (b.x_min, b.y_max);
            let right = (b.x_max, b.y_max);
            let edge = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (py - p.1) - (q.1 - p.1) * (px - p.0);
            let (e1, e2, e3) = (edge(apex, right), edge(right, left), edge(left, apex));
            (e1 >= 0.0 && e2 >= 0.0 && e3 >= 0.0) || (e1 <= 0.0 && e2 <= 0.0 && e3 <= 0.0)
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn render(objects: &[(Shape, BBox)], spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let s = spec.image_size;
    let background = random_color(rng);
    let colors: Vec<[f64; 3]> = objects
        .iter()
        .map(|_| loop {
            let c = random_color(rng);
            let contrast = c.iter().zip(&background).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if contrast >= 0.3 {
                break c;
            }
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated non-negative");
    let mut data = vec![0f32; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut color = background;
            for ((shape, b), c) in objects.iter().zip(&colors) {
                if inside(*shape, b, px, py) {
                    color = *c;
                }
            }
            for ch in 0..3 {
                let v = color[ch] + noise.sample(rng);
                data[(ch * s + y) * s + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(&[3, s, s], data).expect("length matches")
}

/// Writes scenes in the `GRSD` binary format.
pub fn save_dataset(path: &Path, scenes: &[Scenario]) -> Result<()> {
    let bytes = encode_dataset(scenes)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Layout (all little-endian): magic `GRSD`, `u32` version, `u32` scene
/// count, `u32` image size `S`; per scene: `u64` seed, `u8` split flag,
/// `u32` object count, per object `u32` class id and four `f32` box
/// coordinates, then `3·S·S` `f32` pixels in channel-major order.
pub fn encode_dataset(scenes: &[Scenario]) -> Result<Vec<u8>> {
    let size = scenes.first().map(|s| s.image_size()).unwrap_or(0);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(scenes.len() as u32).to_le_bytes());
    out.extend_from_slice(&(size as u32).to_le_bytes());
    for sc in scenes {
        if sc.image.shape() != [3, size, size] {
            return Err(Error::Data(format!(
                "scene {} has image shape {:?}, expected [3, {size}, {size}]",
                sc.seed,
                sc.image.shape()
            )));
        }
        out.extend_from_slice(&sc.seed.to_le_bytes());
        out.push(sc.split.flag());
        out.extend_from_slice(&(sc.objects.len() as u32).to_le_bytes());
        for o in &sc.objects {
            out.extend_from_slice(&(o.class_id as u32).to_le_bytes());
            for v in [o.bbox.x_min, o.bbox.y_min, o.bbox.x_max, o.bbox.y_max] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        for v in sc.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Scenario>> {
    decode_dataset(&fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what} ({n} bytes needed, {} left)", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Scenario>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected GRSD"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}, expected {FORMAT_VERSION}")));
    }
    let count = r.u32("scene count")? as usize;
    let size_at = r.pos;
    let size = r.u32("image size")? as usize;
    if count > 0 && size == 0 {
        return Err(Error::format(size_at as u64, "zero image size"));
    }
    let mut scenes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let seed = r.u64("scene seed")?;
        let flag_at = r.pos;
        let split = match r.u8("split flag")? {
            0 => Split::Train,
            1 => Split::Val,
            f => return Err(Error::format(flag_at as u64, format!("invalid split flag {f}"))),
        };
        let n_at = r.pos;
        let n_obj = r.u32("object count")? as usize;
        if n_obj > 64 {
            return Err(Error::format(n_at as u64, format!("implausible object count {n_obj}")));
        }
        let mut objects = Vec::with_capacity(n_obj);
        for _ in 0..n_obj {
            let class_at = r.pos;
            let class_id = r.u32("class id")? as usize;
            if class_id >= N_CLASSES {
                return Err(Error::format(class_at as u64, format!("class id {class_id} out of range")));
            }
            let mut c = [0f64; 4];
            for v in &mut c {
                *v = r.f32("box coordinate")? as f64;
            }
            objects.push(Object {
                bbox: BBox::new(c[0], c[1], c[2], c[3]),
                class_id,
            });
        }
        let px = r.take(3 * size * size * 4, "image payload")?;
        let data = px
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        scenes.push(Scenario {
            image: Tensor::new(&[3, size, size], data)?,
            objects,
            seed,
            split,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last scene"));
    }
    Ok(scenes)
}

/// Object counts per class.
pub fn class_histogram(scenes: &[Scenario]) -> [usize; N_CLASSES] {
    let mut h = [0; N_CLASSES];
    for s in scenes {
        for o in &s.objects {
            h[o.class_id] += 1;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, n: usize) -> Vec<Scenario> {
        generate(seed, n, &DatasetSpec::default()).unwrap()
    }

    #[test]
    fn same_seed_is_bit_identical() {
        assert_eq!(small(5, 12), small(5, 12));
        assert_ne!(small(5, 4), small(6, 4));
    }

    #[test]
    fn splits_differ() {
        let spec = DatasetSpec::default();
        let a = generate(1, 3, &spec).unwrap();
        let b = generate(1, 3, &spec.with_split(Split::Val)).unwrap();
        assert_ne!(a[0].image, b[0].image);
        assert!(b.iter().all(|s| s.split == Split::Val));
    }

    #[test]
    fn scenes_satisfy_invariants() {
        for sc in small(11, 200) {
            assert!((1..=5).contains(&sc.objects.len()));
            assert!(sc.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let mut cells = std::collections::HashSet::new();
            let has_circle = sc.objects.iter().any(|o| o.class_id == CIRCLE);
            for o in &sc.objects {
                let b = o.bbox;
                assert!(b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= 64.0 && b.y_max <= 64.0);
                assert!(cells.insert(cell_of(&b, 8)), "two centres share a cell");
                match o.class_id {
                    TRIANGLE_A => assert!(has_circle),
                    TRIANGLE_B => assert!(!has_circle),
                    _ => {}
                }
            }
            for t in sc.objects.iter().filter(|o| o.class_id >= TRIANGLE_A) {
                for c in sc.objects.iter().filter(|o| o.class_id == CIRCLE) {
                    let (a, b) = (cell_of(&t.bbox, 8), cell_of(&c.bbox, 8));
                    assert!((a.0 - b.0).abs().max((a.1 - b.1).abs()) >= 3);
                }
            }
        }
    }

    #[test]
    fn scene_is_reproducible_from_its_seed() {
        let scenes = small(3, 5);
        for sc in &scenes {
            assert_eq!(&generate_scene(sc.seed, &DatasetSpec::default()).unwrap(), sc);
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let bytes = encode_dataset(&[]).unwrap();
        assert!(decode_dataset(&bytes).unwrap().is_empty());
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = encode_dataset(&small(2, 2)).unwrap();
        let cut = &bytes[..bytes.len() - 7];
        match decode_dataset(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 16),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(decode_dataset(b"GRS"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_dataset(b"XXXX\x01\0\0\0"), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn triangle_and_circle_rendering_cover_expected_pixels() {
        let b = BBox::new(10.0, 10.0, 30.0, 30.0);
        assert!(inside(Shape::Triangle, &b, 20.0, 29.0));
        assert!(!inside(Shape::Triangle, &b, 11.0, 11.0));
        assert!(inside(Shape::Circle, &b, 20.0, 20.0));
        assert!(!inside(Shape::Circle, &b, 10.5, 10.5));
        assert!(inside(Shape::Square, &b, 10.5, 10.5));
    }
}
