//! Deterministic synthetic panoptic-caption scenes and their on-disk store.
//!
//! Every scene is one or two amorphous "stuff" regions with 1–5 colored
//! shapes ("things") painted on top. Thing classes are shape × color pairs, so
//! several classes share a shape or a color. Captions follow a fixed template
//!
//! ```text
//! START a scene with <count> <thing> (and <count> <thing>)* over <stuff> (and <stuff>)* END
//! ```
//!
//! with either clause optional, which keeps caption parsing exact.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class id reserved for the unknown background.
pub const BACKGROUND: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassKind {
    Thing,
    Stuff,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub id: u32,
    pub name: String,
    pub kind: ClassKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub classes: Vec<ClassDef>,
}

const COLORS: [(&str, [f32; 3]); 5] = [
    ("red", [0.90, 0.15, 0.15]),
    ("green", [0.15, 0.80, 0.20]),
    ("blue", [0.20, 0.30, 0.95]),
    ("yellow", [0.95, 0.90, 0.15]),
    ("purple", [0.70, 0.20, 0.85]),
];

const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];

const STUFF: [(&str, [f32; 3]); 5] = [
    ("grass", [0.35, 0.50, 0.30]),
    ("water", [0.25, 0.38, 0.55]),
    ("sand", [0.72, 0.62, 0.45]),
    ("rock", [0.45, 0.42, 0.40]),
    ("snow", [0.88, 0.88, 0.90]),
];

impl Taxonomy {
    /// `things` shape×color classes (ids `1..=things`) then `stuff` stuff classes.
    pub fn synthetic(things: usize, stuff: usize) -> Self {
        let mut classes = Vec::with_capacity(things + stuff);
        for j in 0..things {
            let color = COLORS[(j / SHAPES.len()) % COLORS.len()].0;
            let shape = SHAPES[j % SHAPES.len()];
            let tier = j / (SHAPES.len() * COLORS.len());
            let name = if tier == 0 { format!("{color}{shape}") } else { format!("{color}{shape}{tier}") };
            classes.push(ClassDef { id: j as u32 + 1, name, kind: ClassKind::Thing });
        }
        for s in 0..stuff {
            let base = STUFF[s % STUFF.len()].0;
            let tier = s / STUFF.len();
            let name = if tier == 0 { base.to_string() } else { format!("{base}{tier}") };
            classes.push(ClassDef { id: (things + s) as u32 + 1, name, kind: ClassKind::Stuff });
        }
        Self { classes }
    }

    /// 20 thing classes and 3 stuff classes.
    pub fn default_synthetic() -> Self {
        Self::synthetic(20, 3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("empty taxonomy".into()));
        }
        let mut names = BTreeSet::new();
        for (i, c) in self.classes.iter().enumerate() {
            if c.id != i as u32 + 1 {
                return Err(Error::Config(format!("class ids must be contiguous from 1; found {} at position {i}", c.id)));
            }
            if c.name.is_empty() || c.name.chars().any(|ch| !ch.is_ascii_lowercase() && !ch.is_ascii_digit()) {
                return Err(Error::Config(format!("class name {:?} must be one lowercase word", c.name)));
            }
            if !names.insert(c.name.clone()) || TEMPLATE_WORDS.contains(&c.name.as_str()) {
                return Err(Error::Config(format!("duplicate class name {:?}", c.name)));
            }
        }
        Ok(())
    }

    pub fn things(&self) -> impl Iterator<Item = &ClassDef> {
        self.classes.iter().filter(|c| c.kind == ClassKind::Thing)
    }

    pub fn stuff(&self) -> impl Iterator<Item = &ClassDef> {
        self.classes.iter().filter(|c| c.kind == ClassKind::Stuff)
    }

    pub fn get(&self, id: u32) -> Option<&ClassDef> {
        id.checked_sub(1).and_then(|i| self.classes.get(i as usize))
    }

    pub fn kind(&self, id: u32) -> Option<ClassKind> {
        self.get(id).map(|c| c.kind)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

const START: &str = "START";
const END: &str = "END";
const COUNT_WORDS: [&str; 5] = ["one", "two", "three", "four", "five"];
const TEMPLATE_WORDS: [&str; 5] = ["a", "scene", "with", "and", "over"];

/// Token table: control tokens, template words, numerals, then class names in id order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
    lookup: HashMap<String, u32>,
    class_offset: u32,
}

impl Vocabulary {
    pub fn for_taxonomy(tax: &Taxonomy) -> Self {
        let mut tokens: Vec<String> = vec![START.into(), END.into()];
        tokens.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        tokens.extend(COUNT_WORDS.iter().map(|s| s.to_string()));
        tokens.extend(tax.classes.iter().map(|c| c.name.clone()));
        Self::from_tokens(tokens).expect("taxonomy-derived vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut lookup = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if lookup.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let class_offset = (2 + TEMPLATE_WORDS.len() + COUNT_WORDS.len()) as u32;
        if tokens.len() < class_offset as usize || tokens[0] != START || tokens[1] != END {
            return Err(Error::Config("vocabulary must begin with START, END and the template words".into()));
        }
        Ok(Self { tokens, lookup, class_offset })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn start(&self) -> u32 {
        0
    }

    pub fn end(&self) -> u32 {
        1
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.lookup.get(word).copied()
    }

    fn word(&self, w: &str) -> u32 {
        self.lookup[w]
    }

    pub fn class_token(&self, class_id: u32) -> u32 {
        self.class_offset + class_id - 1
    }

    pub fn token_class(&self, tok: u32) -> Option<u32> {
        (tok >= self.class_offset && (tok as usize) < self.tokens.len()).then(|| tok - self.class_offset + 1)
    }

    pub fn count_token(&self, n: usize) -> u32 {
        assert!((1..=COUNT_WORDS.len()).contains(&n), "count {n} outside numeral range");
        self.word(COUNT_WORDS[n - 1])
    }

    pub fn token_count(&self, tok: u32) -> Option<usize> {
        let w = self.tokens.get(tok as usize)?;
        COUNT_WORDS.iter().position(|c| c == w).map(|i| i + 1)
    }

    pub fn render(&self, toks: &[u32]) -> String {
        toks.iter().map(|&t| self.tokens.get(t as usize).map_or("<?>", String::as_str)).collect::<Vec<_>>().join(" ")
    }

    /// Class ids named anywhere in a token sequence.
    pub fn mentioned_classes(&self, toks: &[u32]) -> BTreeSet<u32> {
        toks.iter().filter_map(|&t| self.token_class(t)).collect()
    }
}

/// Structured content of a template caption.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CaptionParts {
    /// `(count, thing class id)` fragments in sentence order.
    pub things: Vec<(usize, u32)>,
    pub stuff: Vec<u32>,
}

impl CaptionParts {
    pub fn render(&self, vocab: &Vocabulary) -> Vec<u32> {
        let mut out = vec![vocab.start()];
        if !self.things.is_empty() {
            out.extend([vocab.word("a"), vocab.word("scene"), vocab.word("with")]);
            for (i, &(n, c)) in self.things.iter().enumerate() {
                if i > 0 {
                    out.push(vocab.word("and"));
                }
                out.push(vocab.count_token(n.clamp(1, COUNT_WORDS.len())));
                out.push(vocab.class_token(c));
            }
        } else if !self.stuff.is_empty() {
            out.extend([vocab.word("a"), vocab.word("scene")]);
        }
        if !self.stuff.is_empty() {
            out.push(vocab.word("over"));
            for (i, &c) in self.stuff.iter().enumerate() {
                if i > 0 {
                    out.push(vocab.word("and"));
                }
                out.push(vocab.class_token(c));
            }
        }
        out.push(vocab.end());
        out
    }

    /// Parses a template sentence; anything off-grammar is an error.
    pub fn parse(toks: &[u32], vocab: &Vocabulary, tax: &Taxonomy) -> Result<Self> {
        let bad = |why: &str| Error::Caption(format!("{why}: {}", vocab.render(toks)));
        if toks.len() < 2 || toks[0] != vocab.start() || *toks.last().unwrap() != vocab.end() {
            return Err(bad("must start with START and end with END"));
        }
        let body = &toks[1..toks.len() - 1];
        let mut parts = CaptionParts::default();
        if body.is_empty() {
            return Ok(parts);
        }
        let mut i = 0;
        let expect = |i: &mut usize, w: &str| -> Result<()> {
            if body.get(*i) == Some(&vocab.word(w)) {
                *i += 1;
                Ok(())
            } else {
                Err(bad(&format!("expected {w:?} at position {}", *i + 1)))
            }
        };
        expect(&mut i, "a")?;
        expect(&mut i, "scene")?;
        if body.get(i) == Some(&vocab.word("with")) {
            i += 1;
            loop {
                let n = body.get(i).and_then(|&t| vocab.token_count(t)).ok_or_else(|| bad("expected a count"))?;
                let c = body.get(i + 1).and_then(|&t| vocab.token_class(t)).ok_or_else(|| bad("expected a class"))?;
                if tax.kind(c) != Some(ClassKind::Thing) {
                    return Err(bad("counted class must be a thing"));
                }
                parts.things.push((n, c));
                i += 2;
                if body.get(i) == Some(&vocab.word("and")) {
                    i += 1;
                } else {
                    break;
                }
            }
        }
        if body.get(i) == Some(&vocab.word("over")) {
            i += 1;
            loop {
                let c = body.get(i).and_then(|&t| vocab.token_class(t)).ok_or_else(|| bad("expected a stuff class"))?;
                if tax.kind(c) != Some(ClassKind::Stuff) {
                    return Err(bad("over-clause class must be stuff"));
                }
                parts.stuff.push(c);
                i += 1;
                if body.get(i) == Some(&vocab.word("and")) {
                    i += 1;
                } else {
                    break;
                }
            }
        }
        if i != body.len() {
            return Err(bad("trailing tokens"));
        }
        if parts.things.is_empty() && parts.stuff.is_empty() {
            return Err(bad("empty clause"));
        }
        Ok(parts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub id: u32,
    pub class_id: u32,
    pub kind: ClassKind,
}

/// One image with per-pixel panoptic annotation and a caption.
#[derive(Clone, Debug, PartialEq)]
pub struct PanopticSample {
    pub size: usize,
    /// `[3, size, size]`, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// `[size, size]` segment ids.
    pub segment_map: Vec<u32>,
    pub segments: Vec<SegmentInfo>,
    pub caption: Vec<u32>,
}

pub const CHANNELS: usize = 3;

impl PanopticSample {
    pub fn class_map(&self) -> Vec<u32> {
        let lut: HashMap<u32, u32> = self.segments.iter().map(|s| (s.id, s.class_id)).collect();
        self.segment_map.iter().map(|s| lut.get(s).copied().unwrap_or(BACKGROUND)).collect()
    }

    pub fn classes(&self) -> BTreeSet<u32> {
        self.segments.iter().map(|s| s.class_id).collect()
    }

    pub fn thing_classes(&self) -> BTreeSet<u32> {
        self.segments.iter().filter(|s| s.kind == ClassKind::Thing).map(|s| s.class_id).collect()
    }

    /// Binary mask of one segment.
    pub fn segment_mask(&self, seg_id: u32) -> Vec<bool> {
        self.segment_map.iter().map(|&s| s == seg_id).collect()
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

fn inside(shape: Shape, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        Shape::Triangle => (-r..=0.8 * r).contains(&dy) && dx.abs() <= 0.9 * r * (dy + r) / (1.8 * r),
        Shape::Cross => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
    }
}

fn thing_style(thing_index: usize) -> (Shape, [f32; 3]) {
    let shape = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross][thing_index % 4];
    let mut color = COLORS[(thing_index / 4) % COLORS.len()].1;
    let tier = thing_index / 20;
    if tier > 0 {
        for c in &mut color {
            *c = (*c * (1.0 - 0.25 * tier as f32)).clamp(0.0, 1.0);
        }
    }
    (shape, color)
}

/// Per-shape shading: each shape has its own brightness, and all but the
/// circle carry a fine stripe or checker texture.
fn thing_pattern(shape: Shape, x: usize, y: usize) -> f32 {
    let (level, on) = match shape {
        Shape::Circle => (1.0, false),
        Shape::Square => (0.72, y % 2 == 0),
        Shape::Triangle => (0.5, x % 2 == 0),
        Shape::Cross => (0.3, (x + y) % 2 == 0),
    };
    if on { 0.8 * level } else { level }
}

fn stuff_texture(stuff_index: usize, x: usize, y: usize, size: usize) -> f32 {
    let (xf, yf) = (x as f32 / size as f32, y as f32 / size as f32);
    match stuff_index % 3 {
        0 => 0.06 * ((yf * 40.0).sin()),
        1 => 0.06 * ((xf * 25.0 + yf * 10.0).sin()),
        _ => 0.05 * ((xf * 60.0).sin() * (yf * 60.0).sin()),
    }
}

fn generate_one(rng: &mut ChaCha8Rng, tax: &Taxonomy, vocab: &Vocabulary, size: usize) -> PanopticSample {
    let hw = size * size;
    let things: Vec<&ClassDef> = tax.things().collect();
    let stuffs: Vec<&ClassDef> = tax.stuff().collect();
    let mut class_at = vec![0u32; hw];
    let mut inst_at = vec![0u32; hw];
    let mut image = vec![0f32; CHANNELS * hw];

    // Stuff layout: one region, or two split by a horizontal or vertical line.
    let n_stuff = if stuffs.len() > 1 && rng.random_bool(0.6) { 2 } else { 1 };
    let first = rng.random_range(0..stuffs.len());
    let mut second = first;
    if n_stuff == 2 {
        second = (first + rng.random_range(1..stuffs.len())) % stuffs.len();
    }
    let vertical = rng.random_bool(0.5);
    let cut = (size as f32 * rng.random_range(0.3..0.7)) as usize;
    for y in 0..size {
        for x in 0..size {
            let pos = if vertical { x } else { y };
            let si = if n_stuff == 2 && pos >= cut { second } else { first };
            let p = y * size + x;
            class_at[p] = stuffs[si].id;
            let base = STUFF[si % STUFF.len()].1;
            let tex = stuff_texture(si, x, y, size);
            for ch in 0..CHANNELS {
                let noise = rng.random_range(-0.03..0.03);
                image[ch * hw + p] = (base[ch] + tex + noise).clamp(0.0, 1.0);
            }
        }
    }

    // Things: non-overlapping shapes painted over the stuff.
    let n_things = rng.random_range(1..=5usize);
    let s = size as f32;
    let mut placed: Vec<(f32, f32, f32)> = Vec::new();
    let mut inst_class: Vec<u32> = Vec::new();
    for _ in 0..n_things {
        let ti = rng.random_range(0..things.len());
        let (shape, color) = thing_style(ti);
        let r = s * rng.random_range(0.09..0.16);
        let mut spot = None;
        for _ in 0..60 {
            let cx = rng.random_range(r + 1.0..s - r - 1.0);
            let cy = rng.random_range(r + 1.0..s - r - 1.0);
            if placed.iter().all(|&(px, py, pr)| ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() > pr + r + 1.0) {
                spot = Some((cx, cy));
                break;
            }
        }
        let Some((cx, cy)) = spot else { continue };
        let jitter = rng.random_range(-0.06..0.06);
        let inst = placed.len() as u32 + 1;
        let mut area = 0;
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                if inside(shape, dx, dy, r) {
                    let p = y * size + x;
                    class_at[p] = things[ti].id;
                    inst_at[p] = inst;
                    area += 1;
                    let pattern = thing_pattern(shape, x, y);
                    for ch in 0..CHANNELS {
                        let noise = rng.random_range(-0.04..0.04);
                        image[ch * hw + p] = ((color[ch] + jitter) * pattern + noise).clamp(0.0, 1.0);
                    }
                }
            }
        }
        debug_assert!(area > 0);
        placed.push((cx, cy, r));
        inst_class.push(things[ti].id);
    }

    // Segment ids: stuff regions by class id, then thing instances in placement order.
    let mut segments = Vec::new();
    let mut segment_map = vec![0u32; hw];
    let present_stuff: BTreeSet<u32> =
        (0..hw).filter(|&p| inst_at[p] == 0).map(|p| class_at[p]).collect();
    let mut stuff_seg = HashMap::new();
    for &c in &present_stuff {
        let id = segments.len() as u32 + 1;
        segments.push(SegmentInfo { id, class_id: c, kind: ClassKind::Stuff });
        stuff_seg.insert(c, id);
    }
    let thing_base = segments.len() as u32;
    for (i, &c) in inst_class.iter().enumerate() {
        segments.push(SegmentInfo { id: thing_base + i as u32 + 1, class_id: c, kind: ClassKind::Thing });
    }
    for p in 0..hw {
        segment_map[p] = if inst_at[p] > 0 { thing_base + inst_at[p] } else { stuff_seg[&class_at[p]] };
    }

    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &c in &inst_class {
        *counts.entry(c).or_default() += 1;
    }
    let parts = CaptionParts {
        things: counts.into_iter().map(|(c, n)| (n, c)).collect(),
        stuff: present_stuff.into_iter().collect(),
    };
    let caption = parts.render(vocab);
    PanopticSample { size, image, segment_map, segments, caption }
}

/// Generates `n_images` scenes; sample `i` depends only on `(seed, i, taxonomy, image_size)`.
pub fn generate_dataset(seed: u64, n_images: usize, tax: &Taxonomy, image_size: usize) -> Result<Vec<PanopticSample>> {
    if n_images < 1 {
        return Err(Error::Config("n_images must be at least 1".into()));
    }
    if image_size < 32 {
        return Err(Error::Config(format!("image_size must be at least 32, got {image_size}")));
    }
    tax.validate()?;
    if tax.things().count() < 2 || tax.stuff().count() < 1 {
        return Err(Error::Config("taxonomy needs at least 2 thing classes and 1 stuff class".into()));
    }
    let vocab = Vocabulary::for_taxonomy(tax);
    Ok((0..n_images)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_one(&mut rng, tax, &vocab, image_size)
        })
        .collect())
}

pub const MANIFEST: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayFormat {
    pub container: String,
    pub image_dtype: String,
    pub segment_dtype: String,
    pub layout: String,
}

impl Default for ArrayFormat {
    fn default() -> Self {
        Self {
            container: "npy-1.0".into(),
            image_dtype: "<f4".into(),
            segment_dtype: "<u4".into(),
            layout: "C-order; image [channels, height, width]; segments [height, width]".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub count: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: Option<u64>,
    pub array_format: ArrayFormat,
    pub taxonomy: Taxonomy,
    pub vocabulary: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    segments: Vec<SegmentInfo>,
    caption: Vec<u32>,
}

fn write_npy<T: npyz::Serialize + npyz::AutoSerialize + Copy>(path: &Path, shape: &[u64], data: &[T]) -> Result<()> {
    use npyz::WriterBuilder;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = npyz::WriteOptions::new()
        .default_dtype()
        .shape(shape)
        .writer(std::io::BufWriter::new(file))
        .begin_nd()
        .map_err(|e| Error::io(path, e))?;
    w.extend(data.iter().copied()).map_err(|e| Error::io(path, e))?;
    w.finish().map_err(|e| Error::io(path, e))
}

fn read_npy<T: npyz::Deserialize>(path: &Path, shape: &[u64]) -> Result<Vec<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let npy = npyz::NpyFile::new(&bytes[..]).map_err(|e| Error::io(path, e))?;
    if npy.shape() != shape {
        return Err(Error::io(path, format!("expected shape {shape:?}, found {:?}", npy.shape())));
    }
    npy.into_vec::<T>().map_err(|e| Error::io(path, e))
}

/// Writes samples plus `manifest.json` into `dir` (created if missing).
pub fn save_dataset(samples: &[PanopticSample], tax: &Taxonomy, seed: Option<u64>, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let size = samples.first().map_or(0, |s| s.size);
    if samples.iter().any(|s| s.size != size) {
        return Err(Error::Invalid("all samples must share one image size".into()));
    }
    for (i, s) in samples.iter().enumerate() {
        let (c, n) = (CHANNELS as u64, size as u64);
        write_npy(&dir.join(format!("{i:05}.img.npy")), &[c, n, n], &s.image)?;
        write_npy(&dir.join(format!("{i:05}.seg.npy")), &[n, n], &s.segment_map)?;
        let meta = SampleMeta { segments: s.segments.clone(), caption: s.caption.clone() };
        let path = dir.join(format!("{i:05}.meta.json"));
        fs::write(&path, serde_json::to_vec(&meta).expect("meta serializes")).map_err(|e| Error::io(&path, e))?;
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        count: samples.len(),
        image_size: size,
        channels: CHANNELS,
        seed,
        array_format: ArrayFormat::default(),
        taxonomy: tax.clone(),
        vocabulary: Vocabulary::for_taxonomy(tax).tokens,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest).expect("manifest serializes")).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::io(&path, e))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::io(&path, format!("unsupported schema version {}", m.schema_version)));
    }
    if m.array_format != ArrayFormat::default() {
        return Err(Error::io(&path, "unsupported array format"));
    }
    Ok(m)
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<PanopticSample>)> {
    let m = load_manifest(dir)?;
    let n = m.image_size as u64;
    let mut out = Vec::with_capacity(m.count);
    for i in 0..m.count {
        let image = read_npy::<f32>(&dir.join(format!("{i:05}.img.npy")), &[m.channels as u64, n, n])?;
        let segment_map = read_npy::<u32>(&dir.join(format!("{i:05}.seg.npy")), &[n, n])?;
        let path = dir.join(format!("{i:05}.meta.json"));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: SampleMeta = serde_json::from_slice(&bytes).map_err(|e| Error::io(&path, e))?;
        out.push(PanopticSample {
            size: m.image_size,
            image,
            segment_map,
            segments: meta.segments,
            caption: meta.caption,
        });
    }
    Ok((m, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_tax() -> Taxonomy {
        Taxonomy::synthetic(2, 1)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(7, 1, &small_tax(), 64).unwrap();
        let b = generate_dataset(7, 1, &small_tax(), 64).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(8, 1, &small_tax(), 64).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sample_is_prefix_stable() {
        let tax = Taxonomy::default_synthetic();
        let a = generate_dataset(3, 4, &tax, 32).unwrap();
        let b = generate_dataset(3, 9, &tax, 32).unwrap();
        assert_eq!(a[..], b[..4]);
    }

    #[test]
    fn rejects_bad_configuration() {
        let tax = small_tax();
        assert!(matches!(generate_dataset(1, 0, &tax, 64), Err(Error::Config(_))));
        assert!(matches!(generate_dataset(1, 1, &tax, 16), Err(Error::Config(_))));
        assert!(matches!(generate_dataset(1, 1, &Taxonomy { classes: vec![] }, 64), Err(Error::Config(_))));
        assert!(matches!(generate_dataset(1, 1, &Taxonomy::synthetic(1, 1), 64), Err(Error::Config(_))));
        assert!(matches!(generate_dataset(1, 1, &Taxonomy::synthetic(3, 0), 64), Err(Error::Config(_))));
    }

    #[test]
    fn annotations_are_complete_and_closed() {
        let tax = Taxonomy::default_synthetic();
        let vocab = Vocabulary::for_taxonomy(&tax);
        for s in generate_dataset(11, 50, &tax, 48).unwrap() {
            let ids: BTreeSet<u32> = s.segment_map.iter().copied().collect();
            let listed: Vec<u32> = s.segments.iter().map(|x| x.id).collect();
            assert_eq!(ids.iter().copied().collect::<Vec<_>>(), listed);
            for seg in &s.segments {
                assert_eq!(tax.kind(seg.class_id), Some(seg.kind));
            }
            let stuff: Vec<u32> = s.segments.iter().filter(|x| x.kind == ClassKind::Stuff).map(|x| x.class_id).collect();
            let unique: BTreeSet<u32> = stuff.iter().copied().collect();
            assert_eq!(stuff.len(), unique.len());
            let n_things = s.segments.iter().filter(|x| x.kind == ClassKind::Thing).count();
            assert!((1..=5).contains(&n_things));
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.class_map().iter().all(|&c| c != BACKGROUND));
            let parts = CaptionParts::parse(&s.caption, &vocab, &tax).unwrap();
            assert_eq!(parts.render(&vocab), s.caption);
        }
    }

    #[test]
    fn vocabulary_maps_classes_bijectively() {
        let tax = Taxonomy::default_synthetic();
        let v = Vocabulary::for_taxonomy(&tax);
        assert_ne!(v.start(), v.end());
        for c in &tax.classes {
            let t = v.class_token(c.id);
            assert_eq!(v.tokens[t as usize], c.name);
            assert_eq!(v.token_class(t), Some(c.id));
        }
        assert_eq!(v.token_class(v.start()), None);
        assert_eq!(v.token_count(v.count_token(3)), Some(3));
    }

    #[test]
    fn caption_parser_rejects_off_grammar_sequences() {
        let tax = Taxonomy::default_synthetic();
        let v = Vocabulary::for_taxonomy(&tax);
        let a = v.id("a").unwrap();
        assert!(CaptionParts::parse(&[v.start(), a, v.end()], &v, &tax).is_err());
        assert!(CaptionParts::parse(&[a, v.end()], &v, &tax).is_err());
        assert_eq!(CaptionParts::parse(&[v.start(), v.end()], &v, &tax).unwrap(), CaptionParts::default());
    }

    #[test]
    fn save_load_round_trip_and_failures() {
        let tax = small_tax();
        let samples = generate_dataset(7, 3, &tax, 32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&samples, &tax, Some(7), dir.path()).unwrap();
        let (m, loaded) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, samples);
        assert_eq!(m.taxonomy, tax);

        let empty = tempfile::tempdir().unwrap();
        let err = load_dataset(empty.path()).unwrap_err().to_string();
        assert!(err.contains(MANIFEST), "{err}");

        fs::remove_file(dir.path().join("00002.img.npy")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("00002.img.npy"), "{err}");
    }
}
