//! Seeded synthetic detection scenes: colored shapes on a noise background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{iou, BBox};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// One labeled object in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxLabel {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxLabel {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3, S, S]`, every value a multiple of 1/255.
    pub image: Tensor,
    pub boxes: Vec<BoxLabel>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetParams {
    pub n_scenes: usize,
    pub classes: usize,
    pub seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
    /// Cells per image side; object centers never share a cell.
    #[serde(default = "default_grid")]
    pub grid: usize,
}

fn default_image_size() -> usize {
    32
}
fn default_max_objects() -> usize {
    3
}
fn default_grid() -> usize {
    8
}

impl DatasetParams {
    pub fn new(n_scenes: usize, classes: usize, seed: u64) -> Self {
        Self {
            n_scenes,
            classes,
            seed,
            image_size: default_image_size(),
            max_objects: default_max_objects(),
            grid: default_grid(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return invalid(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.n_scenes == 0 {
            return invalid("need at least one scene");
        }
        if self.grid == 0 || self.image_size % self.grid != 0 {
            return invalid(format!(
                "grid {} must divide image size {}",
                self.grid, self.image_size
            ));
        }
        if self.image_size < MAX_SIDE {
            return invalid(format!("image size must be at least {MAX_SIDE}"));
        }
        if self.max_objects == 0 || self.max_objects > self.grid * self.grid {
            return invalid("max_objects must be in [1, grid²]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub params: DatasetParams,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    /// Scenes `[0, ⌈0.8·n⌉)` train, the rest validate.
    pub fn train_len(&self) -> usize {
        (self.scenes.len() * 4).div_ceil(5)
    }

    pub fn train(&self) -> &[Scene] {
        &self.scenes[..self.train_len()]
    }

    pub fn val(&self) -> &[Scene] {
        &self.scenes[self.train_len()..]
    }
}

const MIN_SIDE: usize = 6;
const MAX_SIDE: usize = 12;
const MAX_PAIR_IOU: f64 = 0.2;
const PLACEMENT_TRIES: usize = 50;
const NOISE_LEVEL: f64 = 0.35;

const PALETTE: [[f64; 3]; 8] = [
    [0.95, 0.25, 0.2],
    [0.2, 0.85, 0.3],
    [0.25, 0.4, 0.95],
    [0.95, 0.9, 0.2],
    [0.9, 0.3, 0.9],
    [0.2, 0.9, 0.9],
    [1.0, 0.6, 0.15],
    [0.95, 0.95, 0.95],
];

#[derive(Clone, Copy)]
enum Shape {
    Block,
    Disk,
    Frame,
    Cross,
}

fn shape_of(class: usize) -> Shape {
    match class % 4 {
        0 => Shape::Block,
        1 => Shape::Disk,
        2 => Shape::Frame,
        _ => Shape::Cross,
    }
}

/// Whether pixel `(dx, dy)` of a `w×h` box is painted.
fn covers(shape: Shape, dx: usize, dy: usize, w: usize, h: usize) -> bool {
    match shape {
        Shape::Block => true,
        Shape::Disk => {
            let u = (dx as f64 + 0.5 - w as f64 / 2.0) / (w as f64 / 2.0);
            let v = (dy as f64 + 0.5 - h as f64 / 2.0) / (h as f64 / 2.0);
            u * u + v * v <= 1.0
        }
        Shape::Frame => dx < 2 || dy < 2 || dx + 2 >= w || dy + 2 >= h,
        Shape::Cross => {
            let bar_w = (w / 3).max(2);
            let bar_h = (h / 3).max(2);
            let x0 = (w - bar_w) / 2;
            let y0 = (h - bar_h) / 2;
            (x0..x0 + bar_w).contains(&dx) || (y0..y0 + bar_h).contains(&dy)
        }
    }
}

fn on_byte_grid(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn gen_scene(p: &DatasetParams, rng: &mut ChaCha8Rng) -> Scene {
    let s = p.image_size;
    let plane = s * s;
    let mut pixels: Vec<f64> = (0..3 * plane).map(|_| rng.random::<f64>() * NOISE_LEVEL).collect();
    let cell_px = (s / p.grid) as f64;
    let n_objects = rng.random_range(1..=p.max_objects);
    let mut used_cells = Vec::new();
    let mut boxes: Vec<BoxLabel> = Vec::new();
    for _ in 0..n_objects {
        for _ in 0..PLACEMENT_TRIES {
            let class = rng.random_range(0..p.classes);
            let w = rng.random_range(MIN_SIDE..=MAX_SIDE);
            let h = rng.random_range(MIN_SIDE..=MAX_SIDE);
            let cx_px: f64 = rng.random_range(0.0..s as f64);
            let cy_px: f64 = rng.random_range(0.0..s as f64);
            let x0 = ((cx_px - w as f64 / 2.0).round().max(0.0) as usize).min(s - w);
            let y0 = ((cy_px - h as f64 / 2.0).round().max(0.0) as usize).min(s - h);
            let label = BoxLabel {
                class,
                cx: (x0 as f64 + w as f64 / 2.0) / s as f64,
                cy: (y0 as f64 + h as f64 / 2.0) / s as f64,
                w: w as f64 / s as f64,
                h: h as f64 / s as f64,
            };
            let cell = (
                ((x0 as f64 + w as f64 / 2.0) / cell_px) as usize,
                ((y0 as f64 + h as f64 / 2.0) / cell_px) as usize,
            );
            let crowded = boxes
                .iter()
                .any(|b| iou(&b.bbox(), &label.bbox()).expect("boxes are non-degenerate") > MAX_PAIR_IOU);
            if used_cells.contains(&cell) || crowded {
                continue;
            }
            let shade = 0.85 + 0.15 * rng.random::<f64>();
            let color = PALETTE[class % PALETTE.len()];
            let shape = shape_of(class);
            for dy in 0..h {
                for dx in 0..w {
                    if covers(shape, dx, dy, w, h) {
                        let idx = (y0 + dy) * s + x0 + dx;
                        for (ch, c) in color.iter().enumerate() {
                            pixels[ch * plane + idx] = c * shade;
                        }
                    }
                }
            }
            used_cells.push(cell);
            boxes.push(label);
            break;
        }
    }
    let data = pixels.into_iter().map(on_byte_grid).collect();
    Scene {
        image: Tensor::new(&[3, s, s], data).expect("shape matches pixel count"),
        boxes,
    }
}

/// Deterministic synthetic detection dataset; see [`Dataset::train`] for the split.
pub fn gen_synthetic_dataset(params: DatasetParams) -> Result<Dataset> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let scenes = (0..params.n_scenes).map(|_| gen_scene(&params, &mut rng)).collect();
    Ok(Dataset { params, scenes })
}

/// Dense per-cell regression targets for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GridTargets {
    pub grid: usize,
    /// `1.0` for cells holding an object center.
    pub objectness: Vec<f32>,
    /// `(tx, ty, tw, th)` per cell: center offset inside the cell, size in cell units.
    pub boxes: Vec<[f32; 4]>,
    pub class: Vec<Option<usize>>,
}

impl GridTargets {
    pub fn encode(boxes: &[BoxLabel], grid: usize) -> Self {
        let cells = grid * grid;
        let mut t = Self {
            grid,
            objectness: vec![0.0; cells],
            boxes: vec![[0.0; 4]; cells],
            class: vec![None; cells],
        };
        let g = grid as f64;
        for b in boxes {
            let gx = ((b.cx * g) as usize).min(grid - 1);
            let gy = ((b.cy * g) as usize).min(grid - 1);
            let cell = gy * grid + gx;
            t.objectness[cell] = 1.0;
            t.boxes[cell] = [
                (b.cx * g - gx as f64) as f32,
                (b.cy * g - gy as f64) as f32,
                (b.w * g) as f32,
                (b.h * g) as f32,
            ];
            t.class[cell] = Some(b.class);
        }
        t
    }

    pub fn positives(&self) -> usize {
        self.class.iter().filter(|c| c.is_some()).count()
    }
}

/// Stacks scene images into an `[N, 3, S, S]` batch.
pub fn stack_images(scenes: &[&Scene]) -> Result<Tensor> {
    let Some(first) = scenes.first() else {
        return invalid("cannot stack an empty batch");
    };
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(scenes.len() * first.image.numel());
    for s in scenes {
        if s.image.shape() != shape.as_slice() {
            return invalid("scenes in a batch must share one image shape");
        }
        data.extend_from_slice(s.image.data());
    }
    let mut full = vec![scenes.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let p = DatasetParams::new(20, 3, 5);
        assert_eq!(gen_synthetic_dataset(p).unwrap(), gen_synthetic_dataset(p).unwrap());
        let other = gen_synthetic_dataset(DatasetParams::new(20, 3, 6)).unwrap();
        assert_ne!(gen_synthetic_dataset(p).unwrap(), other);
    }

    #[test]
    fn split_is_eighty_twenty() {
        let d = gen_synthetic_dataset(DatasetParams::new(500, 2, 1)).unwrap();
        assert_eq!(d.train().len(), 400);
        assert_eq!(d.val().len(), 100);
    }

    #[test]
    fn boxes_are_inside_and_cells_distinct() {
        let d = gen_synthetic_dataset(DatasetParams::new(200, 4, 2)).unwrap();
        for s in &d.scenes {
            assert!(!s.boxes.is_empty() && s.boxes.len() <= 3);
            let t = GridTargets::encode(&s.boxes, 8);
            assert_eq!(t.positives(), s.boxes.len());
            for b in &s.boxes {
                let bb = b.bbox();
                assert!(b.w > 0.0 && b.h > 0.0);
                assert!(bb.x1 >= 0.0 && bb.y1 >= 0.0 && bb.x2 <= 1.0 && bb.y2 <= 1.0);
            }
            assert!(s.image.data().iter().all(|&v| {
                let k = v * 255.0;
                (0.0..=1.0).contains(&v) && (k - k.round()).abs() < 1e-3
            }));
        }
    }

    #[test]
    fn targets_decode_back_to_labels() {
        let b = BoxLabel {
            class: 1,
            cx: 0.40625,
            cy: 0.5,
            w: 0.25,
            h: 0.1875,
        };
        let t = GridTargets::encode(&[b], 8);
        let cell = 4 * 8 + 3;
        assert_eq!(t.class[cell], Some(1));
        let [tx, ty, tw, th] = t.boxes[cell];
        assert_eq!((3.0 + tx) / 8.0, 0.40625);
        assert_eq!((4.0 + ty) / 8.0, 0.5);
        assert_eq!((tw / 8.0, th / 8.0), (0.25, 0.1875));
    }

    #[test]
    fn rejects_bad_params() {
        assert!(gen_synthetic_dataset(DatasetParams::new(10, 1, 0)).is_err());
        assert!(gen_synthetic_dataset(DatasetParams::new(0, 2, 0)).is_err());
    }
}
