//! Synthetic scenes with known ground truth.
//!
//! A [`SceneSpec`] is rasterized into a ground-truth mask and into an
//! attention container whose statistics mimic a diffusion run: cross-attention
//! puts its mass on the tokens of the class under each cell, self-attention
//! links cells that belong to the same region. Both carry seeded noise and
//! are emitted for several layers and timesteps.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::SegMask;
use crate::prompt::ClassVocabulary;
use crate::store::{
    write_container, AttentionKind, AttentionRecord, ClassEntry, Container, Grid, ImageSize,
    RecordDescriptor, RunManifest, TokenSpan,
};
use crate::{ClassId, BACKGROUND, UNCERTAIN};

/// Token axis length of the text encoder being imitated.
pub const DEFAULT_TOKENS: u32 = 77;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

/// Pixel bounding box `[x0, x1) × [y0, y1)`; ellipses are inscribed in it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneShape {
    pub class_id: ClassId,
    pub kind: ShapeKind,
    pub bbox: BoundingBox,
    pub z_order: i32,
}

impl SceneShape {
    fn covers(&self, x: u32, y: u32) -> bool {
        let b = self.bbox;
        if x < b.x0 || x >= b.x1 || y < b.y0 || y >= b.y1 {
            return false;
        }
        match self.kind {
            ShapeKind::Rect => true,
            ShapeKind::Ellipse => {
                let (cx, cy) = (f64::from(b.x0 + b.x1) / 2.0, f64::from(b.y0 + b.y1) / 2.0);
                let (rx, ry) = (f64::from(b.x1 - b.x0) / 2.0, f64::from(b.y1 - b.y0) / 2.0);
                let dx = (f64::from(x) + 0.5 - cx) / rx;
                let dy = (f64::from(y) + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

fn default_tokens() -> u32 {
    DEFAULT_TOKENS
}

fn default_copies() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_id: String,
    pub seed: u64,
    pub canvas: ImageSize,
    pub shapes: Vec<SceneShape>,
    /// Fraction of attention mass replaced by uniform noise, in `[0, 1)`.
    pub noise_level: f32,
    /// Every grid gets both self and cross records.
    pub grids: Vec<Grid>,
    #[serde(default = "default_copies")]
    pub layers: u32,
    #[serde(default = "default_copies")]
    pub timesteps: u32,
    #[serde(default = "default_tokens")]
    pub token_count: u32,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("scene {}: {msg}", self.image_id)));
        if self.canvas.width == 0 || self.canvas.height == 0 {
            return bad("empty canvas".into());
        }
        if !(0.0..1.0).contains(&self.noise_level) {
            return bad(format!("noise level {} outside [0, 1)", self.noise_level));
        }
        if self.grids.is_empty() || self.grids.iter().any(|g| g.cells() == 0) {
            return bad("needs at least one non-empty grid".into());
        }
        if self.layers == 0 || self.timesteps == 0 {
            return bad("needs at least one layer and timestep".into());
        }
        let mut z: Vec<i32> = self.shapes.iter().map(|s| s.z_order).collect();
        z.sort_unstable();
        if z.windows(2).any(|w| w[0] == w[1]) {
            return bad("z orders must be distinct".into());
        }
        for s in &self.shapes {
            let b = s.bbox;
            if b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 > self.canvas.width || b.y1 > self.canvas.height {
                return bad(format!("shape of class {} leaves the canvas or is empty", s.class_id));
            }
            if s.class_id == BACKGROUND || s.class_id == UNCERTAIN {
                return bad(format!("reserved class id {}", s.class_id));
            }
        }
        let needed: u32 = 2 + self
            .classes()
            .iter()
            .map(|&c| class_name(c).split_whitespace().count() as u32)
            .sum::<u32>();
        if self.token_count < needed {
            return bad(format!("{} tokens cannot hold the class prompt", self.token_count));
        }
        Ok(())
    }

    /// Distinct shape classes, ascending.
    pub fn classes(&self) -> Vec<ClassId> {
        let mut ids: Vec<_> = self.shapes.iter().map(|s| s.class_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// VOC name for ids 1..=20, `class<id>` otherwise.
pub fn class_name(id: ClassId) -> String {
    ClassVocabulary::pascal_voc()
        .name(id)
        .map(str::to_string)
        .unwrap_or_else(|_| format!("class{id}"))
}

/// Painter's algorithm: shapes by ascending z order over background 0.
pub fn render_gt(spec: &SceneSpec) -> SegMask {
    let (w, h) = (spec.canvas.width, spec.canvas.height);
    let mut data = vec![BACKGROUND; w as usize * h as usize];
    let mut order: Vec<&SceneShape> = spec.shapes.iter().collect();
    order.sort_by_key(|s| s.z_order);
    for shape in order {
        let b = shape.bbox;
        for y in b.y0..b.y1.min(h) {
            for x in b.x0..b.x1.min(w) {
                if shape.covers(x, y) {
                    data[(y * w + x) as usize] = shape.class_id;
                }
            }
        }
    }
    SegMask::from_labels(w, h, data).expect("canvas-sized buffer")
}

/// Ground-truth label under every grid cell, using the same corner-aligned
/// correspondence as the resize: cell `i` of `g` sits at pixel
/// `i·(W−1)/(g−1)`, rounded.
pub fn cell_labels(gt: &SegMask, grid: Grid) -> Vec<ClassId> {
    fn position(i: u32, cells: u32, pixels: u32) -> u32 {
        if cells <= 1 {
            return (pixels - 1) / 2;
        }
        ((2 * i * (pixels - 1) + (cells - 1)) / (2 * (cells - 1))).min(pixels - 1)
    }
    let (gh, gw) = (u32::from(grid.h), u32::from(grid.w));
    let mut out = Vec::with_capacity(grid.cells());
    for i in 0..gh {
        let y = position(i, gh, gt.height());
        for j in 0..gw {
            out.push(gt.get(position(j, gw, gt.width()), y));
        }
    }
    out
}

/// Manifest classes with token spans: token 0 is the start token, then the
/// words of each class name in ascending id order.
pub fn scene_classes(spec: &SceneSpec) -> Vec<ClassEntry> {
    let mut next = 1;
    spec.classes()
        .into_iter()
        .map(|id| {
            let name = class_name(id);
            let words = name.split_whitespace().count() as u32;
            let entry = ClassEntry {
                class_id: id,
                class_name: name,
                token_span: TokenSpan::new(next, next + words),
            };
            next += words;
            entry
        })
        .collect()
}

fn record_order(spec: &SceneSpec) -> Vec<(AttentionKind, Grid, u32, u32)> {
    let mut out = Vec::new();
    for &grid in &spec.grids {
        for kind in [AttentionKind::SelfAttention, AttentionKind::CrossAttention] {
            for t in 0..spec.timesteps {
                for layer in 0..spec.layers {
                    out.push((kind, grid, layer, t));
                }
            }
        }
    }
    out
}

pub fn scene_manifest(spec: &SceneSpec) -> RunManifest {
    let classes = scene_classes(spec);
    let class_prompt = classes
        .iter()
        .map(|c| c.class_name.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    let records = record_order(spec)
        .into_iter()
        .map(|(kind, grid, layer, timestep)| RecordDescriptor {
            kind,
            layer,
            timestep,
            grid,
            cols: match kind {
                AttentionKind::SelfAttention => grid.cells() as u32,
                AttentionKind::CrossAttention => spec.token_count,
            },
            file: String::new(),
            offset: 0,
            length: 0,
        })
        .collect();
    RunManifest {
        image_id: spec.image_id.clone(),
        prompt: format!("a synthetic scene; {class_prompt}"),
        class_prompt,
        classes,
        num_layers: spec.layers,
        num_timesteps: spec.timesteps,
        image_size: spec.canvas,
        records,
        seed: spec.seed,
    }
}

fn normalize_row(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= sum);
}

fn cross_record(spec: &SceneSpec, labels: &[ClassId], grid: Grid, layer: u32, t: u32, rng: &mut ChaCha8Rng) -> AttentionRecord {
    let noise = f64::from(spec.noise_level);
    let tokens = spec.token_count as usize;
    let mut owner = vec![None; tokens];
    owner[0] = Some(BACKGROUND);
    for c in scene_classes(spec) {
        for tok in c.token_span.start..c.token_span.end {
            owner[tok as usize] = Some(c.class_id);
        }
    }
    let mut data = Vec::with_capacity(labels.len() * tokens);
    let mut row = vec![0f64; tokens];
    for &label in labels {
        for (v, own) in row.iter_mut().zip(&owner) {
            let signal = if *own == Some(label) { 1.0 } else { 0.0 };
            *v = (1.0 - noise) * signal + noise * rng.gen::<f64>();
        }
        normalize_row(&mut row);
        data.extend(row.iter().map(|&v| v as f32));
    }
    AttentionRecord::new_cross(layer, t, grid, spec.token_count, data)
}

fn self_record(spec: &SceneSpec, labels: &[ClassId], grid: Grid, layer: u32, t: u32, rng: &mut ChaCha8Rng) -> AttentionRecord {
    let noise = f64::from(spec.noise_level);
    let n = labels.len();
    let mut region_size = [0usize; 256];
    for &l in labels {
        region_size[usize::from(l)] += 1;
    }
    let mut data = Vec::with_capacity(n * n);
    let mut row = vec![0f64; n];
    for &li in labels {
        let share = (1.0 - noise) / region_size[usize::from(li)] as f64;
        for (v, &lj) in row.iter_mut().zip(labels) {
            let signal = if lj == li { share } else { 0.0 };
            *v = signal + noise * 2.0 * rng.gen::<f64>() / n as f64;
        }
        normalize_row(&mut row);
        data.extend(row.iter().map(|&v| v as f32));
    }
    AttentionRecord::new_self(layer, t, grid, data)
}

/// Lazily fabricates every record in manifest order.
pub fn scene_records(spec: &SceneSpec) -> impl Iterator<Item = AttentionRecord> + '_ {
    let gt = render_gt(spec);
    record_order(spec)
        .into_iter()
        .enumerate()
        .map(move |(index, (kind, grid, layer, t))| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(index as u64);
            let labels = cell_labels(&gt, grid);
            match kind {
                AttentionKind::SelfAttention => self_record(spec, &labels, grid, layer, t, &mut rng),
                AttentionKind::CrossAttention => cross_record(spec, &labels, grid, layer, t, &mut rng),
            }
        })
}

/// Writes the scene's attention container into `dir`.
pub fn fabricate_container(spec: &SceneSpec, dir: impl AsRef<Path>) -> Result<Container> {
    spec.validate()?;
    write_container(&scene_manifest(spec), scene_records(spec), dir)
}

/// Parameters for drawing random scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomScenes {
    pub count: usize,
    pub base_seed: u64,
    pub noise_level: f32,
    #[serde(default = "RandomScenes::default_canvas")]
    pub canvas: ImageSize,
    #[serde(default = "RandomScenes::default_grids")]
    pub grids: Vec<Grid>,
    #[serde(default = "default_copies")]
    pub layers: u32,
    #[serde(default = "default_copies")]
    pub timesteps: u32,
}

impl RandomScenes {
    fn default_canvas() -> ImageSize {
        ImageSize::new(64, 64)
    }

    fn default_grids() -> Vec<Grid> {
        vec![Grid::square(16), Grid::square(32)]
    }

    pub fn new(count: usize, base_seed: u64, noise_level: f32) -> Self {
        Self {
            count,
            base_seed,
            noise_level,
            canvas: Self::default_canvas(),
            grids: Self::default_grids(),
            layers: default_copies(),
            timesteps: default_copies(),
        }
    }

    pub fn scenes(&self) -> Vec<SceneSpec> {
        (0..self.count)
            .map(|i| self.scene(self.base_seed.wrapping_add(i as u64)))
            .collect()
    }

    /// Two to four shapes of distinct VOC classes. Each class must stay
    /// visible over a sizeable area on the coarsest grid after occlusion.
    pub fn scene(&self, seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coarsest = *self.grids.iter().min_by_key(|g| g.cells()).expect("at least one grid");
        let (w, h) = (self.canvas.width, self.canvas.height);
        loop {
            let count = rng.gen_range(2..=4);
            let mut classes: Vec<ClassId> = Vec::new();
            while classes.len() < count {
                let c = rng.gen_range(1..=20);
                if !classes.contains(&c) {
                    classes.push(c);
                }
            }
            let shapes: Vec<SceneShape> = classes
                .iter()
                .enumerate()
                .map(|(z, &class_id)| {
                    let sw = rng.gen_range(w / 4..=w * 3 / 5);
                    let sh = rng.gen_range(h / 4..=h * 3 / 5);
                    let x0 = rng.gen_range(0..=w - sw);
                    let y0 = rng.gen_range(0..=h - sh);
                    SceneShape {
                        class_id,
                        kind: if rng.gen_bool(0.5) { ShapeKind::Rect } else { ShapeKind::Ellipse },
                        bbox: BoundingBox { x0, y0, x1: x0 + sw, y1: y0 + sh },
                        z_order: z as i32,
                    }
                })
                .collect();
            let spec = SceneSpec {
                image_id: format!("scene_{seed:06}"),
                seed,
                canvas: self.canvas,
                shapes,
                noise_level: self.noise_level,
                grids: self.grids.clone(),
                layers: self.layers,
                timesteps: self.timesteps,
                token_count: DEFAULT_TOKENS,
            };
            let cells = cell_labels(&render_gt(&spec), coarsest);
            let min_cells = coarsest.cells() / 32;
            let visible = classes
                .iter()
                .all(|&c| cells.iter().filter(|&&l| l == c).count() >= min_cells.max(1));
            let background = cells.iter().filter(|&&l| l == BACKGROUND).count() >= min_cells.max(1);
            if visible && background {
                return spec;
            }
        }
    }
}

/// A fixture set file: explicit scenes and/or randomly drawn ones.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FixtureSet {
    #[serde(default)]
    pub scenes: Vec<SceneSpec>,
    #[serde(default)]
    pub random: Option<RandomScenes>,
}

impl FixtureSet {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn all_scenes(&self) -> Vec<SceneSpec> {
        let mut out = self.scenes.clone();
        if let Some(r) = &self.random {
            out.extend(r.scenes());
        }
        out
    }
}
