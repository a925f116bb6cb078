//! Procedural scenes with exact symbolic ground truth.
//!
//! Every scene is one shape on a white 16×16 canvas. The same module holds
//! the analytic attribute oracle that later scores generated images, so the
//! renderer and the oracle are kept side by side.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::ToyImage;
use crate::error::{Error, Result};

pub const CANVAS: usize = 16;

macro_rules! word_enum {
    ($name:ident { $($var:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($var),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$var => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$var),)+ _ => None }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

word_enum!(Shape { Square => "square", Circle => "circle", Triangle => "triangle" });
word_enum!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow" });
word_enum!(Position {
    TopLeft => "top-left",
    TopRight => "top-right",
    BottomLeft => "bottom-left",
    BottomRight => "bottom-right",
    Center => "center",
});
word_enum!(Size { Small => "small", Large => "large" });

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

impl Position {
    /// Top-left corner of the 8×8 region the position names.
    fn region_origin(self) -> (usize, usize) {
        match self {
            Position::TopLeft => (0, 0),
            Position::TopRight => (0, 8),
            Position::BottomLeft => (8, 0),
            Position::BottomRight => (8, 8),
            Position::Center => (4, 4),
        }
    }

    /// Centre of the region in continuous pixel coordinates.
    fn anchor(self) -> (f64, f64) {
        let (r, c) = self.region_origin();
        (r as f64 + 4.0, c as f64 + 4.0)
    }
}

impl Size {
    pub fn side(self) -> usize {
        match self {
            Size::Small => 4,
            Size::Large => 8,
        }
    }
}

/// Symbolic description of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub position: Position,
    pub size: Size,
}

impl SceneSpec {
    /// All 120 scenes in a fixed order.
    pub fn all() -> Vec<SceneSpec> {
        let mut out = Vec::with_capacity(120);
        for &shape in Shape::ALL {
            for &color in Color::ALL {
                for &position in Position::ALL {
                    for &size in Size::ALL {
                        out.push(SceneSpec {
                            shape,
                            color,
                            position,
                            size,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn caption(&self) -> String {
        format!("a {} {} {} at {}", self.size, self.color, self.shape, self.position)
    }

    /// Inverse of [`SceneSpec::caption`].
    pub fn parse_caption(text: &str) -> Result<Self> {
        let bad = || Error::UnparseablePrompt(text.to_string());
        let w: Vec<&str> = text.split_whitespace().collect();
        if w.len() != 6 || w[0] != "a" || w[4] != "at" {
            return Err(bad());
        }
        Ok(SceneSpec {
            size: Size::from_word(w[1]).ok_or_else(bad)?,
            color: Color::from_word(w[2]).ok_or_else(bad)?,
            shape: Shape::from_word(w[3]).ok_or_else(bad)?,
            position: Position::from_word(w[5]).ok_or_else(bad)?,
        })
    }

    pub fn to_record_line(&self) -> String {
        format!(
            "shape={} color={} position={} size={}",
            self.shape, self.color, self.position, self.size
        )
    }
}

pub const COLOR_QUESTION: &str = "what color is the shape";
pub const SHAPE_QUESTION: &str = "what shape is it";
pub const WHERE_QUESTION: &str = "where is the shape";
pub const SIZE_QUESTION: &str = "how big is the shape";
pub const CAPTION_QUESTION: &str = "describe the image";

pub fn make_caption(spec: &SceneSpec) -> String {
    spec.caption()
}

/// Four single-word-answer questions per scene.
pub fn make_qa(spec: &SceneSpec) -> Vec<(String, String)> {
    vec![
        (COLOR_QUESTION.into(), spec.color.word().into()),
        (SHAPE_QUESTION.into(), spec.shape.word().into()),
        (WHERE_QUESTION.into(), spec.position.word().into()),
        (SIZE_QUESTION.into(), spec.size.word().into()),
    ]
}

/// `side × side` occupancy mask of a shape, row major.
fn shape_mask(shape: Shape, side: usize) -> Vec<bool> {
    let mut m = vec![false; side * side];
    let half = side as f64 / 2.0;
    for r in 0..side {
        for c in 0..side {
            m[r * side + c] = match shape {
                Shape::Square => true,
                Shape::Circle => {
                    let (dy, dx) = (r as f64 + 0.5 - half, c as f64 + 0.5 - half);
                    dy * dy + dx * dx <= half * half
                }
                Shape::Triangle => {
                    let width = 2 * (r / 2 + 1);
                    let left = (side - width) / 2;
                    c >= left && c < left + width
                }
            };
        }
    }
    m
}

/// Deterministic rasterization, no anti-aliasing.
pub fn render(spec: &SceneSpec) -> ToyImage {
    let mut img = ToyImage::filled(CANVAS, CANVAS, [1.0; 3]);
    let side = spec.size.side();
    let (r0, c0) = spec.position.region_origin();
    let off = (8 - side) / 2;
    let mask = shape_mask(spec.shape, side);
    for r in 0..side {
        for c in 0..side {
            if mask[r * side + c] {
                img.set(r0 + off + r, c0 + off + c, spec.color.rgb());
            }
        }
    }
    img
}

/// Scene attributes recovered from pixels alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attributes {
    pub shape: Shape,
    pub color: Color,
    pub position: Position,
    pub size: Size,
}

impl Attributes {
    pub fn matches(&self, spec: &SceneSpec) -> [bool; 4] {
        [
            self.color == spec.color,
            self.shape == spec.shape,
            self.position == spec.position,
            self.size == spec.size,
        ]
    }
}

/// "Ink" of a pixel: 0 on white, 1 on any saturated primary.
fn ink(rgb: [f64; 3]) -> f64 {
    1.0 - rgb[0].min(rgb[1]).min(rgb[2])
}

const INK_THRESHOLD: f64 = 0.5;
const SIZE_THRESHOLD: f64 = 28.0;

/// Analytic attribute oracle.
///
/// Colour is the nearest palette entry to the mean colour of inked pixels,
/// position the nearest region anchor to the ink centroid, size a threshold
/// on total ink, and shape the best block-averaged ink-map match among the three
/// prototypes rendered at the detected position and size. A blank image
/// still yields some answer; it will simply be wrong.
pub fn extract_attributes(img: &ToyImage) -> Attributes {
    let (mut total, mut cy, mut cx) = (0.0, 0.0, 0.0);
    let mut mean_rgb = [0.0; 3];
    let mut inked = 0usize;
    let mut inks = Vec::with_capacity(img.height * img.width);
    for r in 0..img.height {
        for c in 0..img.width {
            let px = img.get(r, c);
            let k = ink(px);
            inks.push(k);
            total += k;
            cy += k * (r as f64 + 0.5);
            cx += k * (c as f64 + 0.5);
            if k > INK_THRESHOLD {
                inked += 1;
                for ch in 0..3 {
                    mean_rgb[ch] += px[ch];
                }
            }
        }
    }
    if inked > 0 {
        mean_rgb.iter_mut().for_each(|v| *v /= inked as f64);
    }
    let color = *Color::ALL
        .iter()
        .min_by(|a, b| sq_dist(&a.rgb(), &mean_rgb).total_cmp(&sq_dist(&b.rgb(), &mean_rgb)))
        .unwrap();
    let (cy, cx) = if total > 0.0 {
        (cy / total, cx / total)
    } else {
        (8.0, 8.0)
    };
    let position = *Position::ALL
        .iter()
        .min_by(|a, b| {
            let (ay, ax) = a.anchor();
            let (by, bx) = b.anchor();
            let da = (ay - cy).powi(2) + (ax - cx).powi(2);
            let db = (by - cy).powi(2) + (bx - cx).powi(2);
            da.total_cmp(&db)
        })
        .unwrap();
    let size = if total < SIZE_THRESHOLD {
        Size::Small
    } else {
        Size::Large
    };
    let shape = *Shape::ALL
        .iter()
        .min_by(|a, b| {
            let ea = template_error(&inks, **a, position, size);
            let eb = template_error(&inks, **b, position, size);
            ea.total_cmp(&eb)
        })
        .unwrap();
    Attributes {
        shape,
        color,
        position,
        size,
    }
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Ink map averaged over non-overlapping 2×2 blocks, which makes template
/// matching insensitive to the blur of the latent codec.
fn block_ink(inks: &[f64]) -> Vec<f64> {
    let half = CANVAS / 2;
    let mut out = vec![0.0; half * half];
    for r in 0..CANVAS {
        for c in 0..CANVAS {
            out[(r / 2) * half + c / 2] += 0.25 * inks[r * CANVAS + c];
        }
    }
    out
}

fn template_error(inks: &[f64], shape: Shape, position: Position, size: Size) -> f64 {
    let proto = render(&SceneSpec {
        shape,
        color: Color::Red,
        position,
        size,
    });
    let proto_ink: Vec<f64> = proto.pixels.chunks_exact(3).map(|px| ink([px[0], px[1], px[2]])).collect();
    block_ink(&proto_ink)
        .iter()
        .zip(block_ink(inks))
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    pub fn word(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub spec: SceneSpec,
    pub image: ToyImage,
    pub caption: String,
    pub qa: Vec<(String, String)>,
    pub split: Split,
}

impl Example {
    pub fn new(spec: SceneSpec, image: ToyImage, split: Split) -> Self {
        Self {
            spec,
            image,
            caption: make_caption(&spec),
            qa: make_qa(&spec),
            split,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusOptions {
    pub holdout_frac: f64,
    /// Hold out whole colour–shape pairs instead of individual scenes.
    pub compositional_holdout: bool,
    /// Noisy copies emitted per training scene.
    pub train_copies: usize,
    pub noise_sigma: f64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            holdout_frac: 0.1,
            compositional_holdout: false,
            train_copies: 4,
            noise_sigma: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn train(&self) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(|e| e.split == Split::Train)
    }

    pub fn heldout(&self) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(|e| e.split == Split::Heldout)
    }

    /// Distinct scenes of one split, in corpus order.
    pub fn specs(&self, split: Split) -> Vec<SceneSpec> {
        let mut out: Vec<SceneSpec> = Vec::new();
        for e in self.examples.iter().filter(|e| e.split == split) {
            if out.last() != Some(&e.spec) && !out.contains(&e.spec) {
                out.push(e.spec);
            }
        }
        out
    }
}

/// Enumerates all scenes, splits them by a seeded draw, and adds pixel noise
/// to training copies. A pure function of `(seed, options)`.
pub fn build_corpus(seed: u64, opts: &CorpusOptions) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all = SceneSpec::all();
    let heldout: Vec<SceneSpec> = if opts.compositional_holdout {
        let mut pairs: Vec<(Shape, Color)> = Shape::ALL
            .iter()
            .flat_map(|&s| Color::ALL.iter().map(move |&c| (s, c)))
            .collect();
        pairs.shuffle(&mut rng);
        let k = ((opts.holdout_frac * pairs.len() as f64).round() as usize).max(1);
        let chosen = &pairs[..k.min(pairs.len())];
        all.iter()
            .copied()
            .filter(|s| chosen.contains(&(s.shape, s.color)))
            .collect()
    } else {
        let mut shuffled = all.clone();
        shuffled.shuffle(&mut rng);
        let k = (opts.holdout_frac * all.len() as f64).round() as usize;
        shuffled.truncate(k);
        shuffled
    };
    let noise = Normal::new(0.0, opts.noise_sigma.max(0.0)).unwrap();
    let mut examples = Vec::new();
    for spec in all {
        let clean = render(&spec);
        if heldout.contains(&spec) {
            examples.push(Example::new(spec, clean, Split::Heldout));
            continue;
        }
        for _ in 0..opts.train_copies {
            let mut img = clean.clone();
            if opts.noise_sigma > 0.0 {
                for p in img.pixels.iter_mut() {
                    *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            examples.push(Example::new(spec, img, Split::Train));
        }
    }
    Corpus { examples }
}
