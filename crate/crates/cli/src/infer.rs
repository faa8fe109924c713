//! The six inference modes.

use std::fmt;
use std::str::FromStr;

use attrbridge::attrs::{attribute_diff, AttributeDiff, AttributeVector, ExclusiveGroups};
use attrbridge::codec::{
    average_reference_codes, combine, even_bands, interpolate_codes, lem, mix_reference_codes, reference_branch, rem,
    source_code,
};
use attrbridge::imageio::ImageGrid;
use attrbridge::nets::{NetworkBundle, StyleCode};
use attrbridge::synthdata::Image;
use attrbridge::{Error, Result};
use gradtape::{no_grad, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Label,
    Reference,
    Interp,
    MultirefAvg,
    MultirefMix,
    Reconstruct,
}

impl Mode {
    pub const ALL: [Mode; 6] =
        [Mode::Label, Mode::Reference, Mode::Interp, Mode::MultirefAvg, Mode::MultirefMix, Mode::Reconstruct];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Label => "label",
            Mode::Reference => "reference",
            Mode::Interp => "interp",
            Mode::MultirefAvg => "multiref-avg",
            Mode::MultirefMix => "multiref-mix",
            Mode::Reconstruct => "reconstruct",
        }
    }

    pub fn needs_reference(self) -> bool {
        matches!(self, Mode::Reference | Mode::Interp | Mode::MultirefAvg | Mode::MultirefMix)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Mode::ALL.iter().map(|m| m.name()).collect();
            format!("unknown mode {s:?}; expected one of {}", names.join(", "))
        })
    }
}

/// `count` rates evenly spaced over [0, 1], both endpoints included.
pub fn uniform_alphas(count: usize) -> Result<Vec<f64>> {
    if count < 2 {
        return Err(Error::Argument(format!("an alpha grid needs at least 2 points, got {count}")));
    }
    Ok((0..count).map(|i| i as f64 / (count - 1) as f64).collect())
}

pub fn check_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() {
        return Err(Error::Argument("empty alpha list".into()));
    }
    match alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        Some(a) => Err(Error::Argument(format!("interpolation rate {a} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Applies `name=value` edits to `source`.
pub fn apply_edits(attributes: &[String], source: &AttributeVector, edits: &[(String, u8)]) -> Result<AttributeVector> {
    let mut values = source.values().to_vec();
    for (name, v) in edits {
        let i = attributes
            .iter()
            .position(|a| a == name)
            .ok_or_else(|| Error::Argument(format!("unknown attribute {name:?} in edit list")))?;
        values[i] = *v;
    }
    AttributeVector::new(values)
}

/// `name=0|1` pairs separated by commas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditList(pub Vec<(String, u8)>);

impl FromStr for EditList {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        parse_edits(s).map(EditList)
    }
}

pub fn parse_edits(s: &str) -> std::result::Result<Vec<(String, u8)>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (name, v) = p.split_once('=').ok_or_else(|| format!("edit {p:?} is not name=value"))?;
            match v.trim() {
                "0" => Ok((name.trim().to_string(), 0)),
                "1" => Ok((name.trim().to_string(), 1)),
                other => Err(format!("edit value {other:?} for {name:?} must be 0 or 1")),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct InferRequest {
    pub mode: Mode,
    pub source: (Image, AttributeVector),
    pub references: Vec<(Image, AttributeVector)>,
    /// Explicit target label; reference modes default to the first
    /// reference's label.
    pub target: Option<AttributeVector>,
    pub alphas: Vec<f64>,
    pub noise_seed: u64,
    /// Label-mode samples, each with its own noise draw.
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct InferOutput {
    pub grid: ImageGrid,
    /// Generated images in column order.
    pub outputs: Vec<Image>,
    /// Scalar results such as reconstruction errors.
    pub notes: Vec<(String, f64)>,
}

fn single<T: Real>(image: &Image) -> Var<T> {
    Var::constant(Image::batch::<T>(&[image]))
}

/// Noise rows drawn in order from one stream seeded by `seed`.
pub fn noise_rows<T: Real>(seed: u64, rows: usize, dim: usize) -> Vec<Var<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| {
            let data = (0..dim).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
            Var::constant(Tensor::from_vec(&[1, dim], data))
        })
        .collect()
}

fn to_image<T: Real>(v: &Var<T>) -> Image {
    Image::unbatch(v.value()).remove(0)
}

/// Runs one mode; every output is generated from a batch of one.
pub fn run_inference<T: Real>(
    net: &NetworkBundle<T>,
    groups: &ExclusiveGroups,
    req: &InferRequest,
) -> Result<InferOutput> {
    let frozen = net.frozen();
    no_grad(|| infer_inner(&frozen, groups, req))
}

fn infer_inner<T: Real>(net: &NetworkBundle<T>, groups: &ExclusiveGroups, req: &InferRequest) -> Result<InferOutput> {
    let (src_img, src_label) = &req.source;
    let x_s = single::<T>(src_img);
    let mode = req.mode;
    if mode.needs_reference() && req.references.is_empty() {
        return Err(Error::Argument(format!("mode {mode} needs at least one reference")));
    }
    if matches!(mode, Mode::Reference | Mode::Interp) && req.references.len() > 1 {
        return Err(Error::Argument(format!("mode {mode} takes exactly one reference")));
    }
    if !mode.needs_reference() && !req.references.is_empty() {
        return Err(Error::Argument(format!("mode {mode} takes no reference")));
    }
    let target = match (mode, &req.target) {
        (Mode::Reconstruct, Some(_)) => return Err(Error::Argument("reconstruct mode takes no edits".into())),
        (Mode::Reconstruct, None) => src_label.clone(),
        (_, Some(t)) => t.clone(),
        (Mode::Label, None) => return Err(Error::Argument("label mode needs an edit list".into())),
        (_, None) => req.references[0].1.clone(),
    };
    if !groups.is_valid(&target) {
        return Err(Error::Argument(format!("target {} violates the exclusivity groups", target.to_bit_string())));
    }
    let diff = vec![attribute_diff(src_label, &target)?];
    let refs: Vec<Var<T>> = req.references.iter().map(|(img, _)| single::<T>(img)).collect();
    let ref_imgs: Vec<Image> = req.references.iter().map(|(img, _)| img.clone()).collect();
    let d = net.arch.noise_dim;
    let gen = |code: &StyleCode<T>| -> Result<Image> { Ok(to_image(&net.generate(&x_s, code)?)) };
    let edit = format!("{} -> {}", src_label.to_bit_string(), target.to_bit_string());
    let mut grid = ImageGrid::new();
    let mut notes = Vec::new();
    let (caption, lead, outputs): (String, Vec<Image>, Vec<Image>) = match mode {
        Mode::Label => {
            if req.samples == 0 {
                return Err(Error::Argument("label mode needs at least one sample".into()));
            }
            let outputs = noise_rows::<T>(req.noise_seed, req.samples, d)
                .iter()
                .map(|r| gen(&lem(net, &x_s, r, &diff)?))
                .collect::<Result<Vec<_>>>()?;
            grid.col_captions = std::iter::once("source".to_string())
                .chain((0..req.samples).map(|i| format!("label sample {i}")))
                .collect();
            (format!("label {edit}"), vec![], outputs)
        }
        Mode::Reference => {
            let out = gen(&rem(net, &x_s, &refs[0], &diff)?)?;
            grid.col_captions = vec!["source".into(), "reference".into(), "reference-based".into()];
            (format!("reference {edit}"), ref_imgs, vec![out])
        }
        Mode::Interp => {
            check_alphas(&req.alphas)?;
            let noise = noise_rows::<T>(req.noise_seed, 1, d).remove(0);
            let s_rand = lem(net, &x_s, &noise, &diff)?;
            let s_ref = rem(net, &x_s, &refs[0], &diff)?;
            let outputs =
                req.alphas.iter().map(|&a| gen(&interpolate_codes(&s_rand, &s_ref, a)?)).collect::<Result<Vec<_>>>()?;
            grid.col_captions = ["source".to_string(), "reference".to_string()]
                .into_iter()
                .chain(req.alphas.iter().map(|a| format!("alpha {a}")))
                .collect();
            (format!("interp {edit}"), ref_imgs, outputs)
        }
        Mode::MultirefAvg | Mode::MultirefMix => {
            let s_s = source_code(net, &x_s, &diff)?;
            let branches = refs.iter().map(|x_r| reference_branch(net, x_r, &diff)).collect::<Result<Vec<_>>>()?;
            let mixed = if mode == Mode::MultirefAvg {
                average_reference_codes(&branches)?
            } else {
                let bands = even_bands(branches[0].shape()[2], branches.len())?;
                mix_reference_codes(&branches, &bands)?
            };
            let out = gen(&combine(&s_s, &mixed)?)?;
            grid.col_captions = std::iter::once("source".to_string())
                .chain((0..refs.len()).map(|i| format!("reference {i}")))
                .chain(std::iter::once(mode.name().to_string()))
                .collect();
            (format!("{mode} {edit}"), ref_imgs, vec![out])
        }
        Mode::Reconstruct => {
            let zero = vec![AttributeDiff::zeros(src_label.len())];
            let noise = noise_rows::<T>(req.noise_seed, 1, d).remove(0);
            let by_label = gen(&lem(net, &x_s, &noise, &zero)?)?;
            let by_ref = gen(&rem(net, &x_s, &x_s, &zero)?)?;
            notes.push(("recon_l1_label".to_string(), src_img.mean_l1(&by_label)));
            notes.push(("recon_l1_reference".to_string(), src_img.mean_l1(&by_ref)));
            grid.col_captions = vec!["source".into(), "label-based recon".into(), "reference-based recon".into()];
            ("reconstruct".to_string(), vec![], vec![by_label, by_ref])
        }
    };
    let row: Vec<Image> = std::iter::once(src_img.clone()).chain(lead).chain(outputs.iter().cloned()).collect();
    grid.push_row(caption, row)?;
    Ok(InferOutput { grid, outputs, notes })
}
