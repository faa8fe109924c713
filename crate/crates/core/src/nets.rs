//! The five parameterized networks: mapping network `M`, shared conditioned
//! encoder `E`, SPADE-modulated autoencoding generator `G`, and the critic
//! `D` whose trunk also feeds the attribute classifier `C`.
//!
//! All parameters live in one [`ParamStore`] under dotted names
//! (`E.down1.weight`, `G.dec0.spade_a.gamma.bias`, ...). Every forward pass is
//! recorded on the autodiff tape, so any scalar built from these outputs can
//! be differentiated with respect to any parameter or input.

use std::collections::HashMap;

use gradtape::{concat, ConvGeom, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const LRELU_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub image_size: usize,
    pub n_attrs: usize,
    pub noise_dim: usize,
    /// `k`: style codes are `image_size / k` on a side.
    pub code_downsample: usize,
    pub code_channels: usize,
    /// E widths: stem, then one entry per stride-2 stage.
    pub enc_channels: Vec<usize>,
    pub map_hidden: usize,
    pub map_channels: usize,
    /// G widths from full resolution down to the bottleneck.
    pub gen_channels: Vec<usize>,
    pub spade_hidden: usize,
    /// D widths: stem, then one entry per stride-2 stage down to 4x4.
    pub disc_channels: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            n_attrs: 3,
            noise_dim: 16,
            code_downsample: 4,
            code_channels: 64,
            enc_channels: vec![16, 32, 64],
            map_hidden: 64,
            map_channels: 32,
            gen_channels: vec![16, 32, 64],
            spade_hidden: 32,
            disc_channels: vec![16, 32, 64, 64],
        }
    }
}

fn log2_exact(x: usize) -> Option<usize> {
    (x.is_power_of_two()).then(|| x.trailing_zeros() as usize)
}

impl ArchConfig {
    /// The configuration used for finite-difference gradient checks.
    pub fn tiny(n_attrs: usize) -> Self {
        Self {
            image_size: 8,
            n_attrs,
            noise_dim: 4,
            code_downsample: 4,
            code_channels: 4,
            enc_channels: vec![2, 3, 3],
            map_hidden: 5,
            map_channels: 3,
            gen_channels: vec![2, 3, 3],
            spade_hidden: 2,
            disc_channels: vec![2, 3],
        }
    }

    pub fn code_size(&self) -> usize {
        self.image_size / self.code_downsample
    }

    fn down_stages(&self) -> usize {
        log2_exact(self.code_downsample).unwrap_or(0)
    }

    fn disc_stages(&self) -> usize {
        log2_exact(self.image_size / 4).unwrap_or(0)
    }

    fn map_base(&self) -> usize {
        self.code_size().min(2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if log2_exact(self.image_size).is_none() || self.image_size < 4 {
            return bad(format!("`image_size` must be a power of two >= 4, got {}", self.image_size));
        }
        match log2_exact(self.code_downsample) {
            Some(_) if self.code_downsample <= self.image_size => {}
            _ => return bad("`code_downsample` must be a power of two no larger than image_size".into()),
        }
        let stages = self.down_stages() + 1;
        if self.enc_channels.len() != stages {
            return bad(format!("`enc_channels` needs {stages} entries for code_downsample {}", self.code_downsample));
        }
        if self.gen_channels.len() != stages {
            return bad(format!("`gen_channels` needs {stages} entries for code_downsample {}", self.code_downsample));
        }
        let dstages = self.disc_stages() + 1;
        if self.disc_channels.len() != dstages {
            return bad(format!("`disc_channels` needs {dstages} entries for image_size {}", self.image_size));
        }
        let all = self.enc_channels.iter().chain(&self.gen_channels).chain(&self.disc_channels);
        if all
            .copied()
            .chain([self.code_channels, self.map_hidden, self.map_channels, self.spade_hidden, self.noise_dim])
            .any(|c| c == 0)
        {
            return bad("channel counts and noise_dim must be positive".into());
        }
        if self.n_attrs == 0 {
            return bad("need at least one attribute".into());
        }
        Ok(())
    }
}

/// Named parameter tensors; each is a leaf on the autodiff tape.
#[derive(Clone)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    vars: Vec<Var<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), vars: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub(crate) fn add(&mut self, name: String, value: Tensor<T>) -> usize {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let i = self.vars.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.vars.push(Var::leaf(value));
        i
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn var(&self, i: usize) -> &Var<T> {
        &self.vars[i]
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }

    pub fn value(&self, i: usize) -> &Tensor<T> {
        self.vars[i].value()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn set_value(&mut self, i: usize, value: Tensor<T>) {
        assert_eq!(value.shape(), self.vars[i].shape(), "shape change for {}", self.names[i]);
        self.vars[i] = Var::leaf(value);
    }

    /// Replaces every variable, e.g. with fresh leaves for a gradient check.
    pub fn set_vars(&mut self, vars: Vec<Var<T>>) {
        assert_eq!(vars.len(), self.vars.len());
        for (i, v) in vars.iter().enumerate() {
            assert_eq!(v.shape(), self.vars[i].shape(), "shape change for {}", self.names[i]);
        }
        self.vars = vars;
    }

    /// Indices of parameters belonging to any of the named networks.
    pub fn group(&self, nets: &[Net]) -> Vec<usize> {
        (0..self.len()).filter(|&i| nets.iter().any(|n| self.names[i].starts_with(n.prefix()))).collect()
    }

    /// Copy in which only the named networks carry gradients.
    pub fn trainable_only(&self, nets: &[Net]) -> Self {
        let keep = self.group(nets);
        let mut out = self.clone();
        for i in 0..out.len() {
            if !keep.contains(&i) {
                out.vars[i] = out.vars[i].detach();
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.iter().map(|v| v.value().len()).sum()
    }
}

/// The network a parameter belongs to, by name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Net {
    M,
    E,
    G,
    D,
    C,
}

impl Net {
    pub fn prefix(self) -> &'static str {
        match self {
            Net::M => "M.",
            Net::E => "E.",
            Net::G => "G.",
            Net::D => "D.",
            Net::C => "C.",
        }
    }
}

pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub(crate) fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                T::lit(z * std)
            })
            .collect();
        Tensor::from_vec(shape, data)
    }
}

fn lrelu_gain() -> f64 {
    (2.0 / (1.0 + LRELU_SLOPE * LRELU_SLOPE)).sqrt()
}

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    w: usize,
    b: usize,
    geom: ConvGeom,
}

impl Conv {
    pub(crate) fn new<T: Real>(
        ps: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let w =
            ps.add(format!("{name}.weight"), init.normal(&[cout, cin, kernel, kernel], lrelu_gain() / fan_in.sqrt()));
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(&[1, cout, 1, 1]));
        Self { w, b, geom: ConvGeom { stride, pad: kernel / 2 } }
    }

    pub(crate) fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Var<T>) -> Var<T> {
        x.conv2d(ps.var(self.w), self.geom).add(ps.var(self.b))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub(crate) fn new<T: Real>(ps: &mut ParamStore<T>, init: &mut Init, name: &str, fin: usize, fout: usize) -> Self {
        let w = ps.add(format!("{name}.weight"), init.normal(&[fout, fin], lrelu_gain() / (fin as f64).sqrt()));
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(&[1, fout]));
        Self { w, b }
    }

    pub(crate) fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Var<T>) -> Var<T> {
        x.matmul_t(ps.var(self.w), false, true).add(ps.var(self.b))
    }
}

pub(crate) fn lrelu<T: Real>(x: &Var<T>) -> Var<T> {
    x.leaky_relu(T::lit(LRELU_SLOPE))
}

/// Parameter-free per-sample, per-channel normalization over the spatial axes.
fn instance_norm<T: Real>(x: &Var<T>) -> Var<T> {
    let mean = x.mean_axes(&[2, 3]);
    let centered = x.sub(&mean);
    let std = centered.square().mean_axes(&[2, 3]).add_scalar(T::lit(NORM_EPS)).sqrt();
    centered.div(&std)
}

/// Spatial latent of shape `[B, C_s, H/k, W/k]`.
#[derive(Debug, Clone)]
pub struct StyleCode<T: Real>(pub Var<T>);

impl<T: Real> StyleCode<T> {
    pub fn var(&self) -> &Var<T> {
        &self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    pub fn value(&self) -> &Tensor<T> {
        self.0.value()
    }

    pub fn detach(&self) -> Self {
        Self(self.0.detach())
    }
}

/// Builds a `[B, n]` conditioning matrix from per-sample rows.
pub fn cond_matrix<T: Real>(rows: &[Vec<f64>]) -> Tensor<T> {
    let n = rows.first().map_or(0, Vec::len);
    assert!(rows.iter().all(|r| r.len() == n), "ragged conditioning rows");
    Tensor::from_f64(&[rows.len(), n], &rows.concat())
}

#[derive(Clone)]
struct Encoder {
    stem: Conv,
    downs: Vec<Conv>,
    out: Conv,
}

#[derive(Clone)]
struct Mapper {
    fc0: Linear,
    fc1: Linear,
    ups: Vec<Conv>,
    out: Conv,
}

#[derive(Clone)]
struct Spade {
    shared: Conv,
    gamma: Conv,
    beta: Conv,
}

impl Spade {
    fn new<T: Real>(ps: &mut ParamStore<T>, init: &mut Init, name: &str, arch: &ArchConfig, ch: usize) -> Self {
        Self {
            shared: Conv::new(ps, init, &format!("{name}.shared"), arch.code_channels, arch.spade_hidden, 3, 1),
            gamma: Conv::new(ps, init, &format!("{name}.gamma"), arch.spade_hidden, ch, 3, 1),
            beta: Conv::new(ps, init, &format!("{name}.beta"), arch.spade_hidden, ch, 3, 1),
        }
    }

    /// Modulation maps are computed at code resolution, then
    /// nearest-upsampled to the feature map's resolution.
    fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Var<T>, code: &Var<T>) -> Var<T> {
        let factor = x.shape()[2] / code.shape()[2];
        let h = self.shared.forward(ps, code).relu();
        let gamma = self.gamma.forward(ps, &h).upsample_nearest(factor);
        let beta = self.beta.forward(ps, &h).upsample_nearest(factor);
        instance_norm(x).mul(&gamma.add_scalar(T::one())).add(&beta)
    }
}

#[derive(Clone)]
struct SpadeBlock {
    spade_a: Spade,
    conv_a: Conv,
    spade_b: Spade,
    conv_b: Conv,
    skip: Option<Conv>,
}

impl SpadeBlock {
    fn new<T: Real>(
        ps: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        arch: &ArchConfig,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self {
            spade_a: Spade::new(ps, init, &format!("{name}.spade_a"), arch, cin),
            conv_a: Conv::new(ps, init, &format!("{name}.conv_a"), cin, cout, 3, 1),
            spade_b: Spade::new(ps, init, &format!("{name}.spade_b"), arch, cout),
            conv_b: Conv::new(ps, init, &format!("{name}.conv_b"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv::new(ps, init, &format!("{name}.skip"), cin, cout, 1, 1)),
        }
    }

    fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Var<T>, code: &Var<T>) -> Var<T> {
        let h = self.conv_a.forward(ps, &lrelu(&self.spade_a.forward(ps, x, code)));
        let h = self.conv_b.forward(ps, &lrelu(&self.spade_b.forward(ps, &h, code)));
        let shortcut = match &self.skip {
            Some(c) => c.forward(ps, x),
            None => x.clone(),
        };
        shortcut.add(&h)
    }
}

#[derive(Clone)]
struct Generator {
    stem: Conv,
    downs: Vec<Conv>,
    /// `blocks[0]` runs at the bottleneck; each later block follows a 2x upsample.
    blocks: Vec<SpadeBlock>,
    out: Conv,
}

#[derive(Clone)]
struct Critic {
    stem: Conv,
    downs: Vec<Conv>,
    adv: Linear,
    cls: Linear,
}

/// `M`, `E`, `G`, `D` and `C` together with their parameters.
#[derive(Clone)]
pub struct NetworkBundle<T: Real> {
    pub arch: ArchConfig,
    pub params: ParamStore<T>,
    enc: Encoder,
    map: Mapper,
    gen: Generator,
    critic: Critic,
}

fn check_finite<T: Real>(what: &str, v: &Var<T>) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite output from {what}")))
    }
}

impl<T: Real> NetworkBundle<T> {
    pub fn new(arch: &ArchConfig, seed: u64) -> Self {
        arch.validate().expect("architecture must be validated before building networks");
        let mut ps = ParamStore::default();
        let mut init = Init::new(seed);
        let n = arch.n_attrs;
        let stages = arch.down_stages();

        let ec = &arch.enc_channels;
        let enc = Encoder {
            stem: Conv::new(&mut ps, &mut init, "E.stem", 3 + n, ec[0], 3, 1),
            downs: (0..stages)
                .map(|i| Conv::new(&mut ps, &mut init, &format!("E.down{i}"), ec[i], ec[i + 1], 3, 2))
                .collect(),
            out: Conv::new(&mut ps, &mut init, "E.out", ec[stages], arch.code_channels, 1, 1),
        };

        let base = arch.map_base();
        let mc = arch.map_channels;
        let ups = log2_exact(arch.code_size() / base).unwrap_or(0);
        let map = Mapper {
            fc0: Linear::new(&mut ps, &mut init, "M.fc0", arch.noise_dim + n, arch.map_hidden),
            fc1: Linear::new(&mut ps, &mut init, "M.fc1", arch.map_hidden, mc * base * base),
            ups: (0..ups).map(|i| Conv::new(&mut ps, &mut init, &format!("M.up{i}"), mc, mc, 3, 1)).collect(),
            out: Conv::new(&mut ps, &mut init, "M.out", mc, arch.code_channels, 1, 1),
        };

        let gc = &arch.gen_channels;
        let gen = Generator {
            stem: Conv::new(&mut ps, &mut init, "G.stem", 3, gc[0], 3, 1),
            downs: (0..stages)
                .map(|i| Conv::new(&mut ps, &mut init, &format!("G.down{i}"), gc[i], gc[i + 1], 3, 2))
                .collect(),
            blocks: (0..=stages)
                .map(|j| {
                    let cin = gc[(stages + 1 - j).min(stages)];
                    let cout = gc[stages - j];
                    SpadeBlock::new(&mut ps, &mut init, &format!("G.dec{j}"), arch, cin, cout)
                })
                .collect(),
            out: Conv::new(&mut ps, &mut init, "G.out", gc[0], 3, 3, 1),
        };

        let dc = &arch.disc_channels;
        let dstages = arch.disc_stages();
        let flat = dc[dstages] * 16;
        let critic = Critic {
            stem: Conv::new(&mut ps, &mut init, "D.stem", 3, dc[0], 3, 1),
            downs: (0..dstages)
                .map(|i| Conv::new(&mut ps, &mut init, &format!("D.down{i}"), dc[i], dc[i + 1], 3, 2))
                .collect(),
            adv: Linear::new(&mut ps, &mut init, "D.adv", flat, 1),
            cls: Linear::new(&mut ps, &mut init, "C.cls", flat, n),
        };

        Self { arch: arch.clone(), params: ps, enc, map, gen, critic }
    }

    /// Same networks evaluated with a different parameter store.
    pub fn with_params(&self, params: ParamStore<T>) -> Self {
        assert_eq!(params.names(), self.params.names());
        let mut out = self.clone();
        out.params = params;
        out
    }

    /// A copy whose parameters are all constants (no gradients recorded).
    pub fn frozen(&self) -> Self {
        self.with_params(self.params.trainable_only(&[]))
    }

    pub fn code_shape(&self, batch: usize) -> [usize; 4] {
        let s = self.arch.code_size();
        [batch, self.arch.code_channels, s, s]
    }

    fn check_images(&self, x: &Var<T>) -> Result<usize> {
        let s = self.arch.image_size;
        match x.shape() {
            [b, 3, h, w] if *h == s && *w == s => Ok(*b),
            other => Err(Error::Dimension(format!("expected images [B,3,{s},{s}], got {other:?}"))),
        }
    }

    fn check_cond(&self, cond: &Tensor<T>, batch: usize) -> Result<()> {
        if cond.shape() != [batch, self.arch.n_attrs] {
            return Err(Error::Dimension(format!(
                "conditioning must be [{batch},{}], got {:?}",
                self.arch.n_attrs,
                cond.shape()
            )));
        }
        Ok(())
    }

    /// `E(x, cond)`: the conditioning vector is broadcast to constant
    /// channels and concatenated with the image.
    pub fn encode(&self, x: &Var<T>, cond: &Tensor<T>) -> Result<StyleCode<T>> {
        let b = self.check_images(x)?;
        self.check_cond(cond, b)?;
        let ps = &self.params;
        let s = self.arch.image_size;
        let n = self.arch.n_attrs;
        let planes = Var::constant(gradtape::tensor::broadcast_to(&cond.reshape(&[b, n, 1, 1]), &[b, n, s, s]));
        let mut h = lrelu(&self.enc.stem.forward(ps, &concat(&[x.clone(), planes], 1)));
        for d in &self.enc.downs {
            h = lrelu(&d.forward(ps, &h));
        }
        let code = self.enc.out.forward(ps, &h);
        check_finite("E", &code)?;
        Ok(StyleCode(code))
    }

    /// `M(R, cond)` on the concatenation `[R, cond]`, grown to code size.
    pub fn map_noise(&self, noise: &Var<T>, cond: &Tensor<T>) -> Result<StyleCode<T>> {
        let d = self.arch.noise_dim;
        let b = match noise.shape() {
            [b, dd] if *dd == d => *b,
            other => return Err(Error::Dimension(format!("noise must be [B,{d}], got {other:?}"))),
        };
        self.check_cond(cond, b)?;
        let ps = &self.params;
        let input = concat(&[noise.clone(), Var::constant(cond.clone())], 1);
        let h = lrelu(&self.map.fc0.forward(ps, &input));
        let base = self.arch.map_base();
        let mut h = lrelu(&self.map.fc1.forward(ps, &h)).reshape(&[b, self.arch.map_channels, base, base]);
        for up in &self.map.ups {
            h = lrelu(&up.forward(ps, &h.upsample_nearest(2)));
        }
        let code = self.map.out.forward(ps, &h);
        check_finite("M", &code)?;
        Ok(StyleCode(code))
    }

    /// `G(x, S)`: encode `x` to the bottleneck, decode with SPADE blocks
    /// modulated by `S`, squash to `[-1, 1]`.
    pub fn generate(&self, x: &Var<T>, code: &StyleCode<T>) -> Result<Var<T>> {
        let b = self.check_images(x)?;
        let expected = self.code_shape(b);
        if code.shape() != expected {
            return Err(Error::Dimension(format!("style code must be {expected:?}, got {:?}", code.shape())));
        }
        let ps = &self.params;
        let mut h = lrelu(&self.gen.stem.forward(ps, x));
        for d in &self.gen.downs {
            h = lrelu(&d.forward(ps, &h));
        }
        for (j, block) in self.gen.blocks.iter().enumerate() {
            if j > 0 {
                h = h.upsample_nearest(2);
            }
            h = block.forward(ps, &h, code.var());
        }
        let out = self.gen.out.forward(ps, &lrelu(&h)).tanh();
        check_finite("G", &out)?;
        Ok(out)
    }

    /// Critic scores `[B]` and classifier logits `[B, n]` from the shared trunk.
    pub fn critic(&self, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let b = self.check_images(x)?;
        let ps = &self.params;
        let mut h = lrelu(&self.critic.stem.forward(ps, x));
        for d in &self.critic.downs {
            h = lrelu(&d.forward(ps, &h));
        }
        let flat = h.flatten();
        let score = self.critic.adv.forward(ps, &flat).reshape(&[b]);
        let logits = self.critic.cls.forward(ps, &flat);
        check_finite("D", &score)?;
        check_finite("C", &logits)?;
        Ok((score, logits))
    }

    pub fn discriminate(&self, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.critic(x)?.0)
    }

    /// Independent per-attribute probabilities `[B, n]`.
    pub fn classify(&self, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.critic(x)?.1.sigmoid())
    }
}
