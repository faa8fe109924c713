//! Procedural multi-attribute images with an exact rule-based oracle.
//!
//! A render is a tinted background, optional horizontal stripes over the
//! interior, and one centred shape on top. Labels control the background
//! polarity, the shape, the stripes and (optionally) the shape colour; the
//! per-sample [`StyleParams`] jitter everything else.
//!
//! The oracle classifies pixels by their channel mean `m`: background pixels
//! share the sign of the border mean and have `|m| >= 0.32`, stripe pixels
//! have the opposite sign, and shape pixels sit near zero (`|m| < 0.32`).

use std::fmt;

use gradtape::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::attrs::{AttributeVector, ExclusiveGroups};
use crate::error::{Error, Result};

pub const MIN_IMAGE_SIZE: usize = 32;
const BORDER: usize = 2;
const STRIPE_MARGIN: usize = 3;
const STRIPE_PERIOD: usize = 6;
const SHAPE_LEVEL: f64 = 0.32;
const BG_ABSTAIN: f64 = 0.15;
const MIN_SHAPE_PIXELS: usize = 20;
const SQUARE_FILL: f64 = 0.9;
const STRIPE_FRACTION: f64 = 0.25;
const COLOUR_MARGIN: f64 = 0.66;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttributeKind {
    BrightBackground,
    SquareShape,
    Stripes,
    RedShape,
    BlueShape,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 5] =
        [Self::BrightBackground, Self::SquareShape, Self::Stripes, Self::RedShape, Self::BlueShape];

    pub fn name(self) -> &'static str {
        match self {
            Self::BrightBackground => "bright_background",
            Self::SquareShape => "square_shape",
            Self::Stripes => "stripes",
            Self::RedShape => "red_shape",
            Self::BlueShape => "blue_shape",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    size: usize,
    kinds: Vec<AttributeKind>,
    groups: ExclusiveGroups,
}

impl SynthSpec {
    pub fn new(size: usize, kinds: Vec<AttributeKind>, groups: Vec<Vec<usize>>) -> Result<Self> {
        if size < MIN_IMAGE_SIZE {
            return Err(Error::Config(format!("synthetic images need size >= {MIN_IMAGE_SIZE}, got {size}")));
        }
        if kinds.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one attribute".into()));
        }
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(Error::Config(format!("attribute {k} listed twice")));
            }
        }
        let groups = ExclusiveGroups::new(groups, kinds.len())?;
        Ok(Self { size, kinds, groups })
    }

    /// Background, shape and stripes at the given size.
    pub fn standard(size: usize) -> Self {
        use AttributeKind::*;
        Self::new(size, vec![BrightBackground, SquareShape, Stripes], Vec::new()).expect("valid")
    }

    /// Adds a mutually exclusive red/blue shape colour pair.
    pub fn with_colours(size: usize) -> Self {
        use AttributeKind::*;
        Self::new(size, vec![BrightBackground, SquareShape, RedShape, BlueShape], vec![vec![2, 3]]).expect("valid")
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn n_attrs(&self) -> usize {
        self.kinds.len()
    }

    pub fn kinds(&self) -> &[AttributeKind] {
        &self.kinds
    }

    pub fn groups(&self) -> &ExclusiveGroups {
        &self.groups
    }

    fn position(&self, kind: AttributeKind) -> Option<usize> {
        self.kinds.iter().position(|&k| k == kind)
    }

    fn has_colours(&self) -> bool {
        self.position(AttributeKind::RedShape).is_some() || self.position(AttributeKind::BlueShape).is_some()
    }
}

/// Nuisance parameters: everything about a render the label does not fix.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleParams {
    pub bg_level: f64,
    pub bg_tint: [f64; 3],
    pub offset: (i32, i32),
    pub radius: u32,
    pub shape_gray: f64,
    pub shape_chroma: [f64; 3],
    pub stripe_phase: usize,
    pub stripe_level: f64,
}

fn zero_mean_triplet<R: Rng + ?Sized>(rng: &mut R, amp: f64) -> [f64; 3] {
    let a = rng.random_range(-amp..=amp);
    let b = rng.random_range(-amp..=amp);
    let c = rng.random_range(-amp..=amp);
    let m = (a + b + c) / 3.0;
    [a - m, b - m, c - m]
}

impl StyleParams {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            bg_level: rng.random_range(0.45..=0.75),
            bg_tint: zero_mean_triplet(rng, 0.06),
            offset: (rng.random_range(-3..=3), rng.random_range(-3..=3)),
            radius: rng.random_range(7..=10),
            shape_gray: rng.random_range(-0.15..=0.15),
            shape_chroma: zero_mean_triplet(rng, 0.3),
            stripe_phase: rng.random_range(0..STRIPE_PERIOD),
            stripe_level: rng.random_range(0.7..=0.9),
        }
    }

    /// Short stable digest of the parameters, for manifests.
    pub fn digest(&self) -> String {
        let text = format!("{self:?}");
        let hash = Sha256::digest(text.as_bytes());
        hash[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Channel-major `[3, H, W]` image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * size * size {
            return Err(Error::Dimension(format!("{} values for a {size}x{size} RGB image", data.len())));
        }
        Ok(Self { size, data })
    }

    pub fn filled(size: usize, v: f32) -> Self {
        Self { size, data: vec![v; 3 * size * size] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.size + y) * self.size + x]
    }

    fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.size + y) * self.size + x] = v.clamp(-1.0, 1.0) as f32;
    }

    fn channel_mean(&self, y: usize, x: usize) -> f64 {
        (0..3).map(|c| f64::from(self.get(c, y, x))).sum::<f64>() / 3.0
    }

    /// Mean absolute difference per element.
    pub fn mean_l1(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| f64::from((a - b).abs())).sum::<f64>() / self.data.len() as f64
    }

    /// Stacks images into a `[B, 3, H, W]` tensor.
    pub fn batch<T: Real>(images: &[&Image]) -> Tensor<T> {
        let size = images.first().map_or(0, |i| i.size);
        let mut data = Vec::with_capacity(images.len() * 3 * size * size);
        for im in images {
            assert_eq!(im.size, size, "mixed image sizes in batch");
            data.extend(im.data.iter().map(|&v| T::lit(f64::from(v))));
        }
        Tensor::from_vec(&[images.len(), 3, size, size], data)
    }

    /// Splits a `[B, 3, H, W]` tensor back into images.
    pub fn unbatch<T: Real>(t: &Tensor<T>) -> Vec<Image> {
        let [b, 3, h, w] = t.shape() else { panic!("expected [B,3,H,W], got {:?}", t.shape()) };
        assert_eq!(h, w, "images must be square");
        let per = 3 * h * w;
        (0..*b)
            .map(|i| Image {
                size: *h,
                data: t.data()[i * per..(i + 1) * per].iter().map(|v| v.to_f64().unwrap_or(0.0) as f32).collect(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub id: u64,
    pub image: Image,
    pub label: AttributeVector,
    pub style: StyleParams,
}

fn shape_colour(spec: &SynthSpec, label: &AttributeVector, style: &StyleParams) -> [f64; 3] {
    let on = |k| spec.position(k).is_some_and(|i| label.get(i) == 1);
    let base = if on(AttributeKind::RedShape) {
        Some([0.7, -0.35, -0.35])
    } else if on(AttributeKind::BlueShape) {
        Some([-0.35, -0.35, 0.7])
    } else {
        None
    };
    match base {
        Some(b) => std::array::from_fn(|c| b[c] + style.shape_gray + 0.3 * style.shape_chroma[c]),
        None if spec.has_colours() => {
            // keep neutral shapes far from both colour decisions
            std::array::from_fn(|c| style.shape_gray + 0.5 * style.shape_chroma[c])
        }
        None => std::array::from_fn(|c| style.shape_gray + style.shape_chroma[c]),
    }
}

fn in_shape(square: bool, radius: f64, cx: f64, cy: f64, x: usize, y: usize) -> bool {
    let dx = x as f64 + 0.5 - cx;
    let dy = y as f64 + 0.5 - cy;
    if square {
        let half = (0.85 * radius).round();
        dx.abs() <= half && dy.abs() <= half
    } else {
        dx * dx + dy * dy <= radius * radius
    }
}

/// Deterministic in `(label, style)`.
pub fn render(spec: &SynthSpec, label: &AttributeVector, style: &StyleParams, id: u64) -> Result<SynthSample> {
    if label.len() != spec.n_attrs() {
        return Err(Error::Dimension(format!("label has {} attributes, spec has {}", label.len(), spec.n_attrs())));
    }
    if !spec.groups.is_valid(label) {
        return Err(Error::Argument(format!("label {} violates an exclusive group", label.to_bit_string())));
    }
    let on = |k| spec.position(k).is_some_and(|i| label.get(i) == 1);
    let s = spec.size;
    let bg = if on(AttributeKind::BrightBackground) { style.bg_level } else { -style.bg_level };
    let stripes = on(AttributeKind::Stripes);
    let stripe = -bg.signum() * style.stripe_level;
    let square = on(AttributeKind::SquareShape);
    let colour = shape_colour(spec, label, style);
    let cx = (s / 2) as f64 + f64::from(style.offset.0);
    let cy = (s / 2) as f64 + f64::from(style.offset.1);
    let radius = f64::from(style.radius);

    let mut image = Image::filled(s, 0.0);
    for y in 0..s {
        for x in 0..s {
            let inner =
                (STRIPE_MARGIN..s - STRIPE_MARGIN).contains(&y) && (STRIPE_MARGIN..s - STRIPE_MARGIN).contains(&x);
            for c in 0..3 {
                let v = if in_shape(square, radius, cx, cy, x, y) {
                    colour[c]
                } else if stripes && inner && (y + style.stripe_phase) % STRIPE_PERIOD < STRIPE_PERIOD / 2 {
                    stripe + 0.5 * style.bg_tint[c]
                } else {
                    bg + style.bg_tint[c]
                };
                image.set(c, y, x, v);
            }
        }
    }
    Ok(SynthSample { id, image, label: label.clone(), style: style.clone() })
}

/// Per-attribute decisions; `None` marks an abstention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleDecision(pub Vec<Option<u8>>);

impl OracleDecision {
    pub fn get(&self, i: usize) -> Option<u8> {
        self.0[i]
    }

    /// The full label, if no attribute abstained.
    pub fn label(&self) -> Option<AttributeVector> {
        self.0.iter().copied().collect::<Option<Vec<u8>>>().and_then(|v| AttributeVector::new(v).ok())
    }
}

pub fn oracle_classify(spec: &SynthSpec, image: &Image) -> Result<OracleDecision> {
    let s = spec.size;
    if image.size != s {
        return Err(Error::Dimension(format!("image is {}x{0}, spec expects {s}x{s}", image.size)));
    }
    let border = |y: usize, x: usize| y < BORDER || x < BORDER || y >= s - BORDER || x >= s - BORDER;
    let mut border_sum = 0.0;
    let mut border_n = 0usize;
    let mut shape = Vec::new();
    for y in 0..s {
        for x in 0..s {
            let m = image.channel_mean(y, x);
            if border(y, x) {
                border_sum += m;
                border_n += 1;
            }
            if m.abs() < SHAPE_LEVEL {
                shape.push((y, x));
            }
        }
    }
    let bg_mean = border_sum / border_n as f64;
    let bg_sign = (bg_mean.abs() >= BG_ABSTAIN).then(|| bg_mean.signum());

    let shape_ok = shape.len() >= MIN_SHAPE_PIXELS && !shape.iter().any(|&(y, x)| border(y, x));
    let fill = if shape_ok {
        let (y0, y1) = shape.iter().fold((s, 0), |(a, b), &(y, _)| (a.min(y), b.max(y)));
        let (x0, x1) = shape.iter().fold((s, 0), |(a, b), &(_, x)| (a.min(x), b.max(x)));
        Some(shape.len() as f64 / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64)
    } else {
        None
    };
    let colour_margin = |main: usize| {
        let total: f64 = shape
            .iter()
            .map(|&(y, x)| {
                let p: [f64; 3] = std::array::from_fn(|c| f64::from(image.get(c, y, x)));
                let others = (0..3).filter(|&c| c != main).map(|c| p[c]).fold(f64::NEG_INFINITY, f64::max);
                p[main] - others
            })
            .sum();
        total / shape.len() as f64
    };

    let stripes = bg_sign.map(|sign| {
        let mut stripe_px = 0usize;
        let mut open_px = 0usize;
        for y in STRIPE_MARGIN..s - STRIPE_MARGIN {
            for x in STRIPE_MARGIN..s - STRIPE_MARGIN {
                let m = image.channel_mean(y, x);
                if m.abs() < SHAPE_LEVEL {
                    continue;
                }
                open_px += 1;
                if m.signum() != sign {
                    stripe_px += 1;
                }
            }
        }
        u8::from(open_px > 0 && stripe_px as f64 / open_px as f64 > STRIPE_FRACTION)
    });

    let decisions = spec
        .kinds
        .iter()
        .map(|kind| match kind {
            AttributeKind::BrightBackground => bg_sign.map(|sign| u8::from(sign > 0.0)),
            AttributeKind::SquareShape => fill.map(|f| u8::from(f > SQUARE_FILL)),
            AttributeKind::Stripes => stripes,
            AttributeKind::RedShape => shape_ok.then(|| u8::from(colour_margin(0) > COLOUR_MARGIN)),
            AttributeKind::BlueShape => shape_ok.then(|| u8::from(colour_margin(2) > COLOUR_MARGIN)),
        })
        .collect();
    Ok(OracleDecision(decisions))
}

/// Per-sample generator for styles, reproducible from `(seed, id)`.
pub fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub train: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
}

/// Labels are balanced over all valid combinations, then shuffled. Train
/// ids are `0..n_train`, test ids follow.
pub fn build_dataset(spec: &SynthSpec, n_train: usize, n_test: usize, seed: u64) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Argument("dataset splits must be non-empty".into()));
    }
    let valid = spec.groups.valid_labels(spec.n_attrs());
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = |count: usize, first_id: u64| -> Result<Vec<SynthSample>> {
        let mut labels: Vec<&AttributeVector> = (0..count).map(|i| &valid[i % valid.len()]).collect();
        labels.shuffle(&mut order_rng);
        labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| {
                let id = first_id + i as u64;
                let style = StyleParams::sample(&mut sample_rng(seed, id));
                render(spec, label, &style, id)
            })
            .collect()
    };
    let train = split(n_train, 0)?;
    let test = split(n_test, n_train as u64)?;
    Ok(Dataset { spec: spec.clone(), train, test })
}

impl Dataset {
    /// One line per sample: `id<TAB>label-bits<TAB>style-hash`.
    pub fn manifest(&self) -> String {
        self.train
            .iter()
            .chain(&self.test)
            .map(|s| format!("{}\t{}\t{}\n", s.id, s.label.to_bit_string(), s.style.digest()))
            .collect()
    }
}
