//! Deterministic generator of paired image-caption examples.
//!
//! A scene is one to four colored primitives (square, circle, triangle,
//! cross) on a 4x4 cell grid, rendered to a 3x32x32 image in [0, 1] on a
//! black background. Its caption lists the objects in canonical row-major
//! cell order, three tokens each (color, shape, position), padded to a fixed
//! length of 12 — so captions determine images exactly and an ideal model can
//! reach Recall@1 = 1 on unseen pairs.
//!
//! Generation, the 80/10/10 split and train-subset selection are pure
//! functions of their seeds. Subsets are nested: a smaller fraction is always
//! contained in a larger one under the same seed.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result, Tensor};

pub const GRID: usize = 4;
pub const CELL_PX: usize = 8;
pub const IMAGE_SIZE: usize = GRID * CELL_PX;
pub const CHANNELS: usize = 3;
pub const MAX_OBJECTS: usize = 4;
pub const TOKENS_PER_OBJECT: usize = 3;
/// Fixed caption length: up to four objects at three tokens each.
pub const CAPTION_LEN: usize = MAX_OBJECTS * TOKENS_PER_OBJECT;

pub const PAD_TOKEN: u32 = 0;
/// Reserved id, never emitted in captions (the CLS slot is a learned
/// embedding, not a vocabulary token).
pub const CLS_RESERVED_TOKEN: u32 = 1;
const SHAPE_BASE: u32 = 2;
const COLOR_BASE: u32 = SHAPE_BASE + 4;
const POSITION_BASE: u32 = COLOR_BASE + 8;
/// pad + cls-reserved + 4 shapes + 8 colors + 16 positions.
pub const VOCAB_SIZE: usize = (POSITION_BASE as usize) + GRID * GRID;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectShape {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl ObjectShape {
    pub const ALL: [ObjectShape; 4] = [
        ObjectShape::Square,
        ObjectShape::Circle,
        ObjectShape::Triangle,
        ObjectShape::Cross,
    ];

    fn token(self) -> u32 {
        SHAPE_BASE
            + match self {
                ObjectShape::Square => 0,
                ObjectShape::Circle => 1,
                ObjectShape::Triangle => 2,
                ObjectShape::Cross => 3,
            }
    }
}

/// Eight flat colors, all distinct from the black background.
pub const PALETTE: [[f32; 3]; 8] = [
    [1.0, 0.0, 0.0], // red
    [0.0, 1.0, 0.0], // green
    [0.0, 0.0, 1.0], // blue
    [1.0, 1.0, 0.0], // yellow
    [1.0, 0.0, 1.0], // magenta
    [0.0, 1.0, 1.0], // cyan
    [1.0, 1.0, 1.0], // white
    [1.0, 0.5, 0.0], // orange
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: ObjectShape,
    /// Index into [`PALETTE`].
    pub color: u8,
    /// (row, col) cell on the grid.
    pub cell: (u8, u8),
}

impl SceneObject {
    fn position_token(&self) -> u32 {
        POSITION_BASE + (self.cell.0 as u32) * GRID as u32 + self.cell.1 as u32
    }
}

/// One to four objects, no two sharing a cell, kept in canonical row-major
/// cell order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    objects: Vec<SceneObject>,
}

impl Scene {
    pub fn new(mut objects: Vec<SceneObject>) -> Result<Self> {
        if objects.is_empty() || objects.len() > MAX_OBJECTS {
            return Err(Error::Input(format!(
                "scene must hold 1..={MAX_OBJECTS} objects, got {}",
                objects.len()
            )));
        }
        objects.sort_by_key(|o| (o.cell.0, o.cell.1));
        for pair in objects.windows(2) {
            if pair[0].cell == pair[1].cell {
                return Err(Error::Input(format!(
                    "two objects share cell {:?}",
                    pair[0].cell
                )));
            }
        }
        for o in &objects {
            if o.cell.0 as usize >= GRID || o.cell.1 as usize >= GRID {
                return Err(Error::Input(format!("cell {:?} outside the grid", o.cell)));
            }
            if o.color as usize >= PALETTE.len() {
                return Err(Error::Input(format!(
                    "color index {} out of palette",
                    o.color
                )));
            }
        }
        Ok(Self { objects })
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    /// Fixed-length caption: per object color, shape, position; then padding.
    pub fn caption(&self) -> Vec<u32> {
        let mut tokens = Vec::with_capacity(CAPTION_LEN);
        for o in &self.objects {
            tokens.push(COLOR_BASE + o.color as u32);
            tokens.push(o.shape.token());
            tokens.push(o.position_token());
        }
        tokens.resize(CAPTION_LEN, PAD_TOKEN);
        tokens
    }

    /// Render to a `3 x 32 x 32` tensor, flat colors on black.
    pub fn render(&self) -> Tensor {
        let mut data = vec![0.0f32; CHANNELS * IMAGE_SIZE * IMAGE_SIZE];
        for o in &self.objects {
            let color = PALETTE[o.color as usize];
            let base_y = o.cell.0 as usize * CELL_PX;
            let base_x = o.cell.1 as usize * CELL_PX;
            for (y, x) in shape_pixels(o.shape) {
                let (py, px) = (base_y + y, base_x + x);
                for ch in 0..CHANNELS {
                    data[ch * IMAGE_SIZE * IMAGE_SIZE + py * IMAGE_SIZE + px] = color[ch];
                }
            }
        }
        Tensor::new(vec![CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data).expect("fixed shape")
    }
}

/// Lit pixels of a primitive within its 8x8 cell, local coordinates.
fn shape_pixels(shape: ObjectShape) -> Vec<(usize, usize)> {
    let mut px = Vec::new();
    match shape {
        ObjectShape::Square => {
            for y in 1..7 {
                for x in 1..7 {
                    px.push((y, x));
                }
            }
        }
        ObjectShape::Circle => {
            for y in 0..CELL_PX {
                for x in 0..CELL_PX {
                    let dy = y as f32 - 3.5;
                    let dx = x as f32 - 3.5;
                    if dy * dy + dx * dx <= 3.2 * 3.2 {
                        px.push((y, x));
                    }
                }
            }
        }
        ObjectShape::Triangle => {
            // apex at the top, widening one pixel per side every other row
            for y in 1..7 {
                let half = (y - 1) / 2 + 1;
                for x in (4 - half)..(4 + half) {
                    px.push((y, x));
                }
            }
        }
        ObjectShape::Cross => {
            for y in 3..5 {
                for x in 1..7 {
                    px.push((y, x));
                }
            }
            for y in 1..7 {
                for x in 3..5 {
                    if !(3..5).contains(&y) {
                        px.push((y, x));
                    }
                }
            }
        }
    }
    px
}

/// A rendered scene with its caption and stable id.
#[derive(Debug, Clone)]
pub struct PairedExample {
    pub pair_id: u64,
    pub scene: Scene,
    pub image: Tensor,
    pub caption: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!(
                "unknown split {other:?} (expected train | val | test)"
            ))),
        }
    }
}

/// Generated corpus with disjoint train/val/test index sets.
#[derive(Debug, Clone)]
pub struct Dataset {
    examples: Arc<Vec<PairedExample>>,
    train_ids: Vec<u64>,
    val_ids: Vec<u64>,
    test_ids: Vec<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn example(&self, pair_id: u64) -> &PairedExample {
        &self.examples[pair_id as usize]
    }

    pub fn split_ids(&self, split: Split) -> &[u64] {
        match split {
            Split::Train => &self.train_ids,
            Split::Val => &self.val_ids,
            Split::Test => &self.test_ids,
        }
    }

    pub fn split_examples(&self, split: Split) -> Vec<&PairedExample> {
        self.split_ids(split)
            .iter()
            .map(|&id| self.example(id))
            .collect()
    }
}

/// Generate `n` unique scenes deterministically from `seed` and assign
/// 80/10/10 train/val/test splits by pair-id hash.
pub fn generate_dataset(n: usize, seed: u64) -> Result<Dataset> {
    if n < 1 {
        return Err(Error::Input(format!("dataset size must be >= 1, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut examples = Vec::with_capacity(n);
    let cells: Vec<(u8, u8)> = (0..GRID as u8)
        .flat_map(|r| (0..GRID as u8).map(move |c| (r, c)))
        .collect();
    while examples.len() < n {
        let k = rng.random_range(1..=MAX_OBJECTS);
        let mut chosen = cells.clone();
        chosen.shuffle(&mut rng);
        chosen.truncate(k);
        let objects: Vec<SceneObject> = chosen
            .into_iter()
            .map(|cell| SceneObject {
                shape: ObjectShape::ALL[rng.random_range(0..ObjectShape::ALL.len())],
                color: rng.random_range(0..PALETTE.len()) as u8,
                cell,
            })
            .collect();
        let scene = Scene::new(objects)?;
        let caption = scene.caption();
        if !seen.insert(caption.clone()) {
            continue; // duplicate scene; captions must stay unique
        }
        let pair_id = examples.len() as u64;
        let image = scene.render();
        examples.push(PairedExample {
            pair_id,
            scene,
            image,
            caption,
        });
    }

    // Split by hash order: deterministic, disjoint, exact decile sizes.
    let mut order: Vec<u64> = (0..n as u64).collect();
    order.sort_by_key(|&id| (splitmix64(seed ^ id.wrapping_mul(0x9e3779b97f4a7c15)), id));
    let val_n = n / 10;
    let test_n = n / 10;
    let train_n = n - val_n - test_n;
    let mut train_ids: Vec<u64> = order[..train_n].to_vec();
    let mut val_ids: Vec<u64> = order[train_n..train_n + val_n].to_vec();
    let mut test_ids: Vec<u64> = order[train_n + val_n..].to_vec();
    train_ids.sort_unstable();
    val_ids.sort_unstable();
    test_ids.sort_unstable();

    Ok(Dataset {
        examples: Arc::new(examples),
        train_ids,
        val_ids,
        test_ids,
    })
}

/// Keep a deterministic `ceil(f * n)`-sized subset of the training split.
/// Subsets nest: for equal seeds, `subsample(f2)` is contained in
/// `subsample(f1)` whenever `f2 <= f1`. Val and test are untouched.
pub fn subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Input(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let n = dataset.train_ids.len();
    let keep = (fraction * n as f64).ceil() as usize;
    let mut order = dataset.train_ids.clone();
    order.sort_by_key(|&id| (splitmix64(seed ^ id.wrapping_mul(0xbf58476d1ce4e5b9)), id));
    order.truncate(keep);
    let mut train_ids = order;
    train_ids.sort_unstable();
    Ok(Dataset {
        examples: dataset.examples.clone(),
        train_ids,
        val_ids: dataset.val_ids.clone(),
        test_ids: dataset.test_ids.clone(),
    })
}

/// Stable 64-bit mix, used for split and subset ordering so results never
/// depend on the standard library's hasher.
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Debug export: one raw little-endian f32 image file per example plus a
/// line-oriented caption index `captions.txt` with `pair_id<TAB>t0,t1,...`.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = std::fs::File::create(dir.join("captions.txt"))?;
    for ex in dataset.examples.iter() {
        let mut bytes = Vec::with_capacity(ex.image.numel() * 4);
        for v in ex.image.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join(format!("pair_{:06}.f32", ex.pair_id)), bytes)?;
        let tokens: Vec<String> = ex.caption.iter().map(|t| t.to_string()).collect();
        writeln!(index, "{}\t{}", ex.pair_id, tokens.join(","))?;
    }
    Ok(())
}
