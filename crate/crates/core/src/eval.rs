//! Desk-scale metric suite: a Fréchet distance on feature statistics, oracle
//! attribute accuracy and keep-rate, and a feature-space diversity score.
//!
//! Features come from a small convolutional encoder trained on the
//! synthetic attribute-classification task and then frozen.

use gradtape::{grad, no_grad, AdamConfig, AdamState, Real, Tensor, Var};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attrs::{attribute_diff, AttributeDiff, AttributeVector, TargetSampler};
use crate::codec::{lem, rem};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::losses::bce_mean;
use crate::nets::{lrelu, Conv, Init, Linear, NetworkBundle, ParamStore};
use crate::synthdata::{oracle_classify, Image, OracleDecision, SynthSample, SynthSpec};

/// Eigenvalues above this negative threshold are treated as zero.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Gaussian fit of a set of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    count: usize,
}

impl FeatureStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        let f = mean.len();
        if cov.shape() != (f, f) {
            return Err(Error::Dimension(format!("covariance {:?} for {f} features", cov.shape())));
        }
        if count < 2 {
            return Err(Error::Argument(format!("feature statistics need at least 2 samples, got {count}")));
        }
        if !mean.iter().chain(cov.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite feature statistics".into()));
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Argument("covariance is not symmetric".into()));
        }
        let min_eig = SymmetricEigen::new(cov.clone()).eigenvalues.min();
        if min_eig < -PSD_TOLERANCE * scale {
            return Err(Error::Argument(format!("covariance has eigenvalue {min_eig:e}")));
        }
        Ok(Self { mean, cov, count })
    }

    /// Sample mean and unbiased covariance.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let count = features.len();
        if count < 2 {
            return Err(Error::Argument(format!("feature statistics need at least 2 samples, got {count}")));
        }
        let f = features[0].len();
        if features.iter().any(|v| v.len() != f) {
            return Err(Error::Dimension("feature vectors differ in length".into()));
        }
        let x = DMatrix::from_fn(count, f, |i, j| features[i][j]);
        let mean = DVector::from_fn(f, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(count, f, |i, j| x[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (count - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        Self::new(mean, cov, count)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Square root of a symmetric positive semidefinite matrix, clipping
/// negative eigenvalues to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of `(S_a S_b)^(1/2)` is taken as the trace of the square root
/// of the symmetric product `S_a^(1/2) S_b S_a^(1/2)`, which has the same
/// eigenvalues.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("feature dims differ: {} vs {}", a.dim(), b.dim())));
    }
    let dmu = (&a.mean - &b.mean).norm_squared();
    let ra = sqrt_psd(&a.cov);
    let inner = &ra * &b.cov * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = dmu + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::Numerical("non-finite Fréchet distance".into()));
    }
    Ok(d.max(0.0))
}

/// A note when either set has fewer than `F + 1` samples.
pub fn sample_size_warning(a: &FeatureStats, b: &FeatureStats) -> Option<String> {
    let need = a.dim() + 1;
    (a.count < need || b.count < need).then(|| {
        format!("Fréchet distance from {} and {} samples for {} features is unreliable", a.count, b.count, a.dim())
    })
}

/// Frozen convolutional embedder producing unit-norm feature vectors.
#[derive(Clone)]
pub struct FeatureNet {
    params: ParamStore<f32>,
    convs: Vec<Conv>,
    embed: Linear,
    head: Linear,
    image_size: usize,
    dim: usize,
    n_attrs: usize,
}

const FEATURE_WIDTHS: [usize; 4] = [16, 32, 64, 64];
const FEATURE_BATCH: usize = 32;
const FEATURE_LR: f64 = 1e-3;

impl FeatureNet {
    /// `image_size` must be a power of two of at least 8.
    pub fn new(image_size: usize, n_attrs: usize, dim: usize, seed: u64) -> Result<Self> {
        if image_size < 8 || !image_size.is_power_of_two() {
            return Err(Error::Argument(format!("feature net needs a power-of-two image size >= 8, got {image_size}")));
        }
        if dim == 0 || n_attrs == 0 {
            return Err(Error::Argument("feature net needs a positive feature dim and attribute count".into()));
        }
        let downs = (image_size / 4).trailing_zeros() as usize;
        let width = |i: usize| FEATURE_WIDTHS[i.min(FEATURE_WIDTHS.len() - 1)];
        let mut ps = ParamStore::default();
        let mut init = Init::new(seed);
        let mut convs = vec![Conv::new(&mut ps, &mut init, "F.stem", 3, width(0), 3, 1)];
        for i in 0..downs {
            convs.push(Conv::new(&mut ps, &mut init, &format!("F.down{i}"), width(i), width(i + 1), 3, 2));
        }
        let embed = Linear::new(&mut ps, &mut init, "F.embed", width(downs) * 16, dim);
        let head = Linear::new(&mut ps, &mut init, "F.head", dim, n_attrs);
        Ok(Self { params: ps, convs, embed, head, image_size, dim, n_attrs })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check(&self, x: &Var<f32>) -> Result<()> {
        let s = self.image_size;
        match x.shape() {
            [_, 3, h, w] if *h == s && *w == s => Ok(()),
            other => Err(Error::Dimension(format!("feature net expects [B,3,{s},{s}], got {other:?}"))),
        }
    }

    fn embed(&self, x: &Var<f32>) -> Var<f32> {
        let ps = &self.params;
        let mut h = x.clone();
        for c in &self.convs {
            h = lrelu(&c.forward(ps, &h));
        }
        let e = self.embed.forward(ps, &h.flatten());
        let norm = e.square().sum_axes(&[1]).add_scalar(1e-12).sqrt();
        e.div(&norm)
    }

    fn logits(&self, features: &Var<f32>) -> Var<f32> {
        self.head.forward(&self.params, features)
    }

    /// Supervised attribute classification with Adam; returns the mean
    /// loss over the final tenth of the steps.
    pub fn pretrain(&mut self, samples: &[SynthSample], steps: usize, seed: u64) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Argument("feature pretraining needs samples".into()));
        }
        if samples.iter().any(|s| s.label.len() != self.n_attrs) {
            return Err(Error::Dimension("sample labels do not match the feature net".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adam: Vec<AdamState<f32>> = self.params.vars().iter().map(|v| AdamState::new(v.shape())).collect();
        let cfg = AdamConfig { lr: FEATURE_LR, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let tail = (steps / 10).max(1);
        let mut tail_loss = 0.0;
        for step in 0..steps {
            let picks: Vec<&SynthSample> =
                (0..FEATURE_BATCH.min(samples.len())).map(|_| &samples[rng.random_range(0..samples.len())]).collect();
            let x = Var::constant(Image::batch::<f32>(&picks.iter().map(|s| &s.image).collect::<Vec<_>>()));
            let labels = label_tensor(&picks.iter().map(|s| &s.label).collect::<Vec<_>>());
            self.check(&x)?;
            let loss = bce_mean(&self.logits(&self.embed(&x)).sigmoid(), &labels)?;
            let value = f64::from(loss.item());
            if !value.is_finite() {
                return Err(Error::Numerical(format!("feature pretraining loss diverged at step {step}")));
            }
            if step + tail >= steps {
                tail_loss += value / tail as f64;
            }
            let grads = grad(&loss, self.params.vars(), false);
            for (i, g) in grads.iter().enumerate() {
                let mut v = self.params.value(i).clone();
                adam[i].step(&mut v, g.value(), &cfg);
                self.params.set_value(i, v);
            }
        }
        self.params = self.params.trainable_only(&[]);
        Ok(tail_loss)
    }

    /// Unit-norm features, one vector per image.
    pub fn extract(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = Var::constant(Image::batch::<f32>(&chunk.iter().collect::<Vec<_>>()));
            self.check(&x)?;
            let f = no_grad(|| self.embed(&x));
            out.extend(f.value().data().chunks(self.dim).map(|r| r.iter().map(|&v| f64::from(v)).collect()));
        }
        Ok(out)
    }

    /// Per-attribute probabilities from the pretraining head.
    pub fn predict(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = Var::constant(Image::batch::<f32>(&chunk.iter().collect::<Vec<_>>()));
            self.check(&x)?;
            let p = no_grad(|| self.logits(&self.embed(&x)).sigmoid());
            out.extend(p.value().data().chunks(self.n_attrs).map(|r| r.iter().map(|&v| f64::from(v)).collect()));
        }
        Ok(out)
    }
}

/// Feature net pretrained on `train` with the config's feature settings.
/// Seeded from the dataset so every run over one dataset shares it.
pub fn pretrained_feature_net(config: &ExperimentConfig, train: &[SynthSample]) -> Result<FeatureNet> {
    let seed = config.dataset.as_ref().map_or(config.seed, |d| d.seed) ^ FEATURE_SEED;
    let mut net = FeatureNet::new(config.arch.image_size, config.n_attrs(), config.feature_dim, seed)?;
    net.pretrain(train, config.feature_steps, seed)?;
    Ok(net)
}

const FEATURE_SEED: u64 = 0x6665_6174;

/// Fréchet distance between the first and second halves of a real image set.
pub fn split_half_fid(features: &FeatureNet, images: &[Image]) -> Result<f64> {
    let half = images.len() / 2;
    let a = FeatureStats::from_features(&features.extract(&images[..half])?)?;
    let b = FeatureStats::from_features(&features.extract(&images[half..2 * half])?)?;
    frechet_distance(&a, &b)
}

fn label_tensor<T: Real>(labels: &[&AttributeVector]) -> Tensor<T> {
    let n = labels.first().map_or(0, |l| l.len());
    let data = labels.iter().flat_map(|l| l.values().iter().map(|&v| T::lit(f64::from(v)))).collect();
    Tensor::from_vec(&[labels.len(), n], data)
}

/// Source of per-attribute decisions for generated images.
pub trait AttributeOracle {
    fn decide(&self, images: &[Image]) -> Result<Vec<OracleDecision>>;
}

/// The exact procedural oracle of the synthetic dataset.
pub struct SynthOracle<'a>(pub &'a SynthSpec);

impl AttributeOracle for SynthOracle<'_> {
    fn decide(&self, images: &[Image]) -> Result<Vec<OracleDecision>> {
        images.iter().map(|i| oracle_classify(self.0, i)).collect()
    }
}

/// The classifier head `C`, thresholded at 0.5; never abstains.
pub struct ClassifierOracle<'a, T: Real>(pub &'a NetworkBundle<T>);

impl<T: Real> AttributeOracle for ClassifierOracle<'_, T> {
    fn decide(&self, images: &[Image]) -> Result<Vec<OracleDecision>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = Var::constant(Image::batch::<T>(&chunk.iter().collect::<Vec<_>>()));
            let p = no_grad(|| self.0.classify(&x))?;
            let n = self.0.arch.n_attrs;
            for row in p.value().data().chunks(n) {
                out.push(OracleDecision(row.iter().map(|v| Some(u8::from(*v > T::lit(0.5)))).collect()));
            }
        }
        Ok(out)
    }
}

/// Per-attribute hit counts over the selected (sample, attribute) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccuracyReport {
    pub correct: Vec<usize>,
    pub counted: Vec<usize>,
    /// Samples dropped because the oracle abstained on a selected attribute.
    pub excluded: usize,
}

impl AccuracyReport {
    pub fn per_attribute(&self) -> Vec<Option<f64>> {
        self.correct.iter().zip(&self.counted).map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64)).collect()
    }

    /// Average of the per-attribute fractions that have any samples; 0 when none do.
    pub fn mean(&self) -> f64 {
        let fr: Vec<f64> = self.per_attribute().into_iter().flatten().collect();
        if fr.is_empty() {
            0.0
        } else {
            fr.iter().sum::<f64>() / fr.len() as f64
        }
    }

    pub fn total_counted(&self) -> usize {
        self.counted.iter().sum()
    }
}

/// Compares decisions with targets on the attributes where `selected` is set.
pub fn attribute_accuracy(
    decisions: &[OracleDecision],
    targets: &[AttributeVector],
    selected: &[Vec<bool>],
) -> Result<AccuracyReport> {
    if decisions.len() != targets.len() || targets.len() != selected.len() {
        return Err(Error::Dimension(format!(
            "{} decisions, {} targets, {} selections",
            decisions.len(),
            targets.len(),
            selected.len()
        )));
    }
    let n = targets.first().map_or(0, AttributeVector::len);
    let mut report = AccuracyReport { correct: vec![0; n], counted: vec![0; n], excluded: 0 };
    for ((d, t), sel) in decisions.iter().zip(targets).zip(selected) {
        if t.len() != n || sel.len() != n || d.0.len() != n {
            return Err(Error::Dimension("attribute counts differ across samples".into()));
        }
        if (0..n).any(|a| sel[a] && d.get(a).is_none()) {
            report.excluded += 1;
            continue;
        }
        for a in (0..n).filter(|&a| sel[a]) {
            report.counted[a] += 1;
            if d.get(a) == Some(t.get(a)) {
                report.correct[a] += 1;
            }
        }
    }
    Ok(report)
}

fn edited_mask(diff: &AttributeDiff) -> Vec<bool> {
    diff.values().iter().map(|&v| v != 0).collect()
}

fn kept_mask(diff: &AttributeDiff) -> Vec<bool> {
    diff.values().iter().map(|&v| v == 0).collect()
}

/// Mean pairwise L1 distance between feature vectors of the same source,
/// averaged over all same-source pairs.
pub fn diversity_score(groups: &[Vec<Vec<f64>>]) -> Result<f64> {
    let (mut total, mut pairs) = (0.0, 0usize);
    for g in groups {
        if g.len() < 2 {
            return Err(Error::Argument(format!("diversity needs at least 2 samples per source, got {}", g.len())));
        }
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                if g[i].len() != g[j].len() {
                    return Err(Error::Dimension("feature vectors differ in length".into()));
                }
                total += g[i].iter().zip(&g[j]).map(|(a, b)| (a - b).abs()).sum::<f64>();
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Argument("diversity needs at least one source".into()));
    }
    Ok(total / pairs as f64)
}

/// Which test pairs are translated and how.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalProtocol {
    /// Leading test samples used as sources.
    pub sources: usize,
    /// Leading sources sampled repeatedly for the diversity score.
    pub diversity_sources: usize,
    pub samples_per_source: usize,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { sources: 512, diversity_sources: 64, samples_per_source: 4, seed: 0 }
    }
}

/// One source with its label-based target and its reference.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub source: usize,
    pub label_target: AttributeVector,
    pub reference: usize,
    pub reference_target: AttributeVector,
}

/// Deterministic in `(test, sampler, protocol)`.
pub fn protocol_cases(test: &[SynthSample], sampler: &TargetSampler, protocol: &EvalProtocol) -> Result<Vec<EvalCase>> {
    let n = protocol.sources.min(test.len());
    if n == 0 {
        return Err(Error::Argument("evaluation protocol has no samples".into()));
    }
    if protocol.samples_per_source < 2 && protocol.diversity_sources > 0 {
        return Err(Error::Argument("diversity needs at least 2 samples per source".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    (0..n)
        .map(|i| {
            let src = &test[i].label;
            let label_target = sampler.sample_target(src, &mut rng);
            let candidates: Vec<usize> = (0..test.len()).filter(|&j| test[j].label != *src).collect();
            if candidates.is_empty() {
                return Err(Error::Argument("test set has a single label; no references available".into()));
            }
            let reference = candidates[rng.random_range(0..candidates.len())];
            let reference_target =
                sampler.reference_target(src, &test[reference].label, &mut rng).expect("labels differ");
            Ok(EvalCase { source: i, label_target, reference, reference_target })
        })
        .collect()
}

/// Outputs of one protocol pass.
#[derive(Debug, Clone)]
pub struct Translations {
    pub label: Vec<Image>,
    pub reference: Vec<Image>,
    pub recon_label: Vec<Image>,
    pub recon_reference: Vec<Image>,
    /// `diversity_sources` groups of `samples_per_source` label-based outputs.
    pub diversity: Vec<Vec<Image>>,
}

const EVAL_CHUNK: usize = 64;
const NOISE_STREAM: u64 = 0x6576616c;

fn images_tensor<T: Real>(test: &[SynthSample], idx: &[usize]) -> Var<T> {
    Var::constant(Image::batch::<T>(&idx.iter().map(|&i| &test[i].image).collect::<Vec<_>>()))
}

fn noise_tensor<T: Real>(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Var<T> {
    let data = (0..rows * dim).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    Var::constant(Tensor::from_vec(&[rows, dim], data))
}

/// Runs both synthesis types and the two diff-0 reconstructions over `cases`.
pub fn translate<T: Real>(
    net: &NetworkBundle<T>,
    test: &[SynthSample],
    cases: &[EvalCase],
    protocol: &EvalProtocol,
) -> Result<Translations> {
    let frozen = net.frozen();
    let net = &frozen;
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    rng.set_stream(NOISE_STREAM);
    let d = net.arch.noise_dim;
    let mut out = Translations {
        label: vec![],
        reference: vec![],
        recon_label: vec![],
        recon_reference: vec![],
        diversity: vec![],
    };
    for chunk in cases.chunks(EVAL_CHUNK) {
        let src: Vec<usize> = chunk.iter().map(|c| c.source).collect();
        let refs: Vec<usize> = chunk.iter().map(|c| c.reference).collect();
        let x_s = images_tensor::<T>(test, &src);
        let x_r = images_tensor::<T>(test, &refs);
        let label_diffs =
            chunk.iter().map(|c| attribute_diff(&test[c.source].label, &c.label_target)).collect::<Result<Vec<_>>>()?;
        let ref_diffs = chunk
            .iter()
            .map(|c| attribute_diff(&test[c.source].label, &c.reference_target))
            .collect::<Result<Vec<_>>>()?;
        let zero = vec![AttributeDiff::zeros(net.arch.n_attrs); chunk.len()];
        let noise = noise_tensor::<T>(&mut rng, chunk.len(), d);
        let (xl, xr, rl, rr) = no_grad(|| -> Result<_> {
            let xl = net.generate(&x_s, &lem(net, &x_s, &noise, &label_diffs)?)?;
            let xr = net.generate(&x_s, &rem(net, &x_s, &x_r, &ref_diffs)?)?;
            let rl = net.generate(&x_s, &lem(net, &x_s, &noise, &zero)?)?;
            let rr = net.generate(&x_s, &rem(net, &x_s, &x_s, &zero)?)?;
            Ok((xl, xr, rl, rr))
        })?;
        out.label.extend(Image::unbatch(xl.value()));
        out.reference.extend(Image::unbatch(xr.value()));
        out.recon_label.extend(Image::unbatch(rl.value()));
        out.recon_reference.extend(Image::unbatch(rr.value()));
    }
    let k = protocol.samples_per_source;
    let div_cases = &cases[..protocol.diversity_sources.min(cases.len())];
    let per_chunk = (EVAL_CHUNK / k.max(1)).max(1);
    for chunk in div_cases.chunks(per_chunk) {
        let src: Vec<usize> = chunk.iter().flat_map(|c| std::iter::repeat_n(c.source, k)).collect();
        let x_s = images_tensor::<T>(test, &src);
        let diffs = chunk
            .iter()
            .map(|c| attribute_diff(&test[c.source].label, &c.label_target).map(|d| vec![d; k]))
            .collect::<Result<Vec<_>>>()?
            .concat();
        let noise = noise_tensor::<T>(&mut rng, src.len(), d);
        let xl = no_grad(|| -> Result<_> { net.generate(&x_s, &lem(net, &x_s, &noise, &diffs)?) })?;
        let imgs = Image::unbatch(xl.value());
        out.diversity.extend(imgs.chunks(k).map(<[Image]>::to_vec));
    }
    Ok(out)
}

/// Everything one evaluation pass reports.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub attributes: Vec<String>,
    pub cases: usize,
    pub fid_label: f64,
    pub fid_reference: f64,
    pub accuracy_label: AccuracyReport,
    pub accuracy_reference: AccuracyReport,
    pub keep_label: AccuracyReport,
    pub keep_reference: AccuracyReport,
    pub diversity: f64,
    pub recon_l1_label: f64,
    pub recon_l1_reference: f64,
    /// Distance between two halves of the real test set, a floor for the FIDs.
    pub fid_real_split: f64,
}

impl MetricReport {
    /// `FID(label)|FID(ref)  Acc(label)|Acc(ref)  LPIPS`, accuracies in percent.
    pub fn table_row(&self) -> String {
        format!(
            "{:.3}|{:.3}  {:.1}|{:.1}  {:.4}",
            self.fid_label,
            self.fid_reference,
            100.0 * self.accuracy_label.mean(),
            100.0 * self.accuracy_reference.mean(),
            self.diversity
        )
    }

    pub fn table_header() -> &'static str {
        "FID(label)|FID(ref)  Acc(label)|Acc(ref)  LPIPS"
    }

    pub fn all_finite(&self) -> bool {
        [
            self.fid_label,
            self.fid_reference,
            self.diversity,
            self.recon_l1_label,
            self.recon_l1_reference,
            self.fid_real_split,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Flat `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            ("cases".to_string(), self.cases.to_string()),
            ("fid_label".into(), format!("{:.6}", self.fid_label)),
            ("fid_reference".into(), format!("{:.6}", self.fid_reference)),
            ("fid_real_split".into(), format!("{:.6}", self.fid_real_split)),
            ("diversity".into(), format!("{:.6}", self.diversity)),
            ("recon_l1_label".into(), format!("{:.6}", self.recon_l1_label)),
            ("recon_l1_reference".into(), format!("{:.6}", self.recon_l1_reference)),
        ];
        for (key, acc) in [
            ("accuracy_label", &self.accuracy_label),
            ("accuracy_reference", &self.accuracy_reference),
            ("keep_label", &self.keep_label),
            ("keep_reference", &self.keep_reference),
        ] {
            lines.push((key.into(), format!("{:.6}", acc.mean())));
            lines.push((format!("{key}.excluded"), acc.excluded.to_string()));
            for (i, name) in self.attributes.iter().enumerate() {
                let v = acc.per_attribute().get(i).copied().flatten();
                lines.push((format!("{key}.{name}"), v.map_or("none".into(), |v| format!("{v:.6}"))));
                lines.push((format!("{key}.{name}.count"), acc.counted.get(i).copied().unwrap_or(0).to_string()));
            }
        }
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn mean_l1(a: &[Image], b: &[&Image]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.mean_l1(y)).sum::<f64>() / a.len().max(1) as f64
}

/// Scores `translations` of `cases` against the test split.
pub fn score(
    attributes: &[String],
    test: &[SynthSample],
    cases: &[EvalCase],
    translations: &Translations,
    features: &FeatureNet,
    oracle: &dyn AttributeOracle,
) -> Result<MetricReport> {
    let real_images: Vec<Image> = test.iter().map(|s| s.image.clone()).collect();
    let real = FeatureStats::from_features(&features.extract(&real_images)?)?;
    let fid = |imgs: &[Image]| -> Result<f64> {
        frechet_distance(&FeatureStats::from_features(&features.extract(imgs)?)?, &real)
    };
    let label_diffs =
        cases.iter().map(|c| attribute_diff(&test[c.source].label, &c.label_target)).collect::<Result<Vec<_>>>()?;
    let ref_diffs =
        cases.iter().map(|c| attribute_diff(&test[c.source].label, &c.reference_target)).collect::<Result<Vec<_>>>()?;
    let sources: Vec<AttributeVector> = cases.iter().map(|c| test[c.source].label.clone()).collect();
    let label_dec = oracle.decide(&translations.label)?;
    let ref_dec = oracle.decide(&translations.reference)?;
    let targets_l: Vec<AttributeVector> = cases.iter().map(|c| c.label_target.clone()).collect();
    let targets_r: Vec<AttributeVector> = cases.iter().map(|c| c.reference_target.clone()).collect();
    let edited = |d: &[AttributeDiff]| d.iter().map(edited_mask).collect::<Vec<_>>();
    let kept = |d: &[AttributeDiff]| d.iter().map(kept_mask).collect::<Vec<_>>();
    let src_images: Vec<&Image> = cases.iter().map(|c| &test[c.source].image).collect();
    let diversity = if translations.diversity.is_empty() {
        0.0
    } else {
        let groups = translations.diversity.iter().map(|g| features.extract(g)).collect::<Result<Vec<_>>>()?;
        diversity_score(&groups)?
    };
    let report = MetricReport {
        attributes: attributes.to_vec(),
        cases: cases.len(),
        fid_label: fid(&translations.label)?,
        fid_reference: fid(&translations.reference)?,
        accuracy_label: attribute_accuracy(&label_dec, &targets_l, &edited(&label_diffs))?,
        accuracy_reference: attribute_accuracy(&ref_dec, &targets_r, &edited(&ref_diffs))?,
        keep_label: attribute_accuracy(&label_dec, &sources, &kept(&label_diffs))?,
        keep_reference: attribute_accuracy(&ref_dec, &sources, &kept(&ref_diffs))?,
        diversity,
        recon_l1_label: mean_l1(&translations.recon_label, &src_images),
        recon_l1_reference: mean_l1(&translations.recon_reference, &src_images),
        fid_real_split: split_half_fid(features, &real_images)?,
    };
    if !report.all_finite() {
        return Err(Error::Numerical("non-finite metric".into()));
    }
    Ok(report)
}

/// Full protocol: build cases, translate, score with the synthetic oracle.
pub fn evaluate<T: Real>(
    net: &NetworkBundle<T>,
    attributes: &[String],
    spec: &SynthSpec,
    test: &[SynthSample],
    sampler: &TargetSampler,
    features: &FeatureNet,
    protocol: &EvalProtocol,
) -> Result<MetricReport> {
    let cases = protocol_cases(test, sampler, protocol)?;
    let translations = translate(net, test, &cases, protocol)?;
    score(attributes, test, &cases, &translations, features, &SynthOracle(spec))
}
