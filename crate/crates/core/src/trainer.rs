//! Training loop: noise refinement, then critic/classifier, then
//! generator and encoder/mapper updates, all on one sampled batch.

use std::collections::BTreeMap;

use gradtape::{concat, grad, no_grad, AdamConfig, AdamState, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attrs::{
    attribute_diff, attribute_keep_mask, AttributeDiff, AttributeKeepMask, AttributeVector, TargetSampler,
};
use crate::codec::{combine, diff_matrix, interpolate_batch, label_branch, rem, source_code};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_gap, bce_mean, check_finite_terms, critic_objective, generator_objectives, gradient_penalty, l1_mean,
    mode_seeking_ratio, LossReport, LossTerms, Objectives,
};
use crate::nets::{Net, NetworkBundle, StyleCode};
use crate::synthdata::{Image, SynthSample};

/// Images and labels addressed by index; the index is the sample id.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub images: Vec<Image>,
    pub labels: Vec<AttributeVector>,
}

impl TrainingSet {
    pub fn new(images: Vec<Image>, labels: Vec<AttributeVector>) -> Result<Self> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::Argument(format!("{} images with {} labels", images.len(), labels.len())));
        }
        let first = &labels[0];
        if labels.iter().all(|l| l == first) {
            return Err(Error::Argument("training set needs at least two distinct labels".into()));
        }
        Ok(Self { images, labels })
    }

    pub fn from_samples(samples: &[SynthSample]) -> Result<Self> {
        Self::new(samples.iter().map(|s| s.image.clone()).collect(), samples.iter().map(|s| s.label.clone()).collect())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Per-reference-sample noise vectors with their own optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBank<T: Real> {
    dim: usize,
    seed: u64,
    entries: BTreeMap<u64, NoiseEntry<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEntry<T: Real> {
    pub r: Tensor<T>,
    pub adam: AdamState<T>,
}

const NOISE_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

impl<T: Real> NoiseBank<T> {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed, entries: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The value a fresh entry for `id` starts from.
    pub fn initial(&self, id: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ NOISE_SEED_SALT);
        rng.set_stream(id);
        let data = (0..self.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::lit(z)
            })
            .collect();
        Tensor::from_vec(&[self.dim], data)
    }

    pub fn entry(&mut self, id: u64) -> &mut NoiseEntry<T> {
        if !self.entries.contains_key(&id) {
            let r = self.initial(id);
            self.entries.insert(id, NoiseEntry { r, adam: AdamState::new(&[self.dim]) });
        }
        self.entries.get_mut(&id).expect("just inserted")
    }

    pub fn get(&self, id: u64) -> Option<&NoiseEntry<T>> {
        self.entries.get(&id)
    }

    pub fn entries(&self) -> &BTreeMap<u64, NoiseEntry<T>> {
        &self.entries
    }

    pub fn insert(&mut self, id: u64, entry: NoiseEntry<T>) -> Result<()> {
        if entry.r.shape() != [self.dim] {
            return Err(Error::Dimension(format!("noise entry {id} has shape {:?}", entry.r.shape())));
        }
        self.entries.insert(id, entry);
        Ok(())
    }

    /// `[B, d]` matrix of the entries for `ids`, creating missing ones.
    pub fn stack(&mut self, ids: &[u64]) -> Tensor<T> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            data.extend_from_slice(self.entry(id).r.data());
        }
        Tensor::from_vec(&[ids.len(), self.dim], data)
    }
}

/// One training batch: sources, paired references and derived targets.
#[derive(Debug, Clone)]
pub struct Batch<T: Real> {
    pub source_ids: Vec<u64>,
    pub reference_ids: Vec<u64>,
    pub x_s: Tensor<T>,
    pub x_r: Tensor<T>,
    pub y_s: Vec<AttributeVector>,
    pub y_r: Vec<AttributeVector>,
    pub y_t: Vec<AttributeVector>,
    pub diffs: Vec<AttributeDiff>,
    pub keep: Vec<AttributeKeepMask>,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }

    pub fn build(
        data: &TrainingSet,
        source_ids: Vec<u64>,
        reference_ids: Vec<u64>,
        y_t: Vec<AttributeVector>,
    ) -> Result<Self> {
        let pick = |ids: &[u64]| -> Result<Vec<usize>> {
            ids.iter()
                .map(|&i| {
                    let i = i as usize;
                    (i < data.len()).then_some(i).ok_or_else(|| Error::Argument(format!("sample id {i} out of range")))
                })
                .collect()
        };
        let src = pick(&source_ids)?;
        let refs = pick(&reference_ids)?;
        if src.len() != refs.len() || src.len() != y_t.len() || src.is_empty() {
            return Err(Error::Argument("batch components differ in length".into()));
        }
        let y_s: Vec<_> = src.iter().map(|&i| data.labels[i].clone()).collect();
        let y_r: Vec<_> = refs.iter().map(|&i| data.labels[i].clone()).collect();
        let diffs = y_s.iter().zip(&y_t).map(|(s, t)| attribute_diff(s, t)).collect::<Result<Vec<_>>>()?;
        let keep = y_s.iter().zip(&diffs).map(|(s, d)| attribute_keep_mask(s, d)).collect::<Result<Vec<_>>>()?;
        let x_s = Image::batch(&src.iter().map(|&i| &data.images[i]).collect::<Vec<_>>());
        let x_r = Image::batch(&refs.iter().map(|&i| &data.images[i]).collect::<Vec<_>>());
        Ok(Self { source_ids, reference_ids, x_s, x_r, y_s, y_r, y_t, diffs, keep })
    }
}

fn label_matrix<T: Real>(labels: &[AttributeVector]) -> Tensor<T> {
    let n = labels.first().map_or(0, AttributeVector::len);
    let data: Vec<f64> = labels.iter().flat_map(|l| l.values().iter().map(|&v| f64::from(v))).collect();
    Tensor::from_f64(&[labels.len(), n], &data)
}

fn keep_matrix<T: Real>(masks: &[AttributeKeepMask]) -> Tensor<T> {
    let n = masks.first().map_or(0, AttributeKeepMask::len);
    let data: Vec<f64> = masks.iter().flat_map(|m| m.as_f64()).collect();
    Tensor::from_f64(&[masks.len(), n], &data)
}

fn normal_tensor<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z)
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Splits a batched var into `parts` equal chunks along axis 0.
fn chunks<T: Real>(v: &Var<T>, parts: usize) -> Vec<Var<T>> {
    let b = v.shape()[0] / parts;
    (0..parts).map(|i| v.narrow(0, i * b, b)).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefinementOutcome {
    pub updated: Vec<u64>,
    pub skipped: Vec<u64>,
    /// Per-sample style loss before the update.
    pub sty_before: Vec<f64>,
}

/// Everything the generator-side update needs from the forward pass.
pub struct Forward<T: Real> {
    pub x_s: Var<T>,
    pub s_s: StyleCode<T>,
    pub s_rand: StyleCode<T>,
    pub s_ref: StyleCode<T>,
    pub alphas: Vec<f64>,
    pub x_g_l: Var<T>,
    pub x_g_r: Var<T>,
    pub x_g_i: Var<T>,
    pub rec_lem: Var<T>,
    pub rec_rem: Var<T>,
    pub x_g_prime: Var<T>,
    pub noise: Var<T>,
    pub noise_prime: Var<T>,
    /// `E(X_s, keep_mask)`, shared by the attribute-keeping terms.
    pub keep_code_s: Var<T>,
}

impl<T: Real> Forward<T> {
    /// The three synthesis types pooled along the batch axis.
    pub fn fakes(&self) -> Var<T> {
        concat(&[self.x_g_l.clone(), self.x_g_r.clone(), self.x_g_i.clone()], 0)
    }
}

pub struct CriticStep<T: Real> {
    pub adv: Var<T>,
    pub cls_real: Var<T>,
    pub gp: Var<T>,
    pub total_dc: Var<T>,
}

pub struct GeneratorStep<T: Real> {
    pub terms_adv_g: Var<T>,
    pub cls: Var<T>,
    pub rec: Var<T>,
    pub sty: Var<T>,
    pub ms: Var<T>,
    pub ak: Var<T>,
    pub cyc: Var<T>,
    pub total_g: Var<T>,
    pub total_me: Var<T>,
}

/// Complete mutable training state.
#[derive(Clone)]
pub struct TrainState<T: Real> {
    pub config: ExperimentConfig,
    pub net: NetworkBundle<T>,
    /// One optimizer state per parameter, aligned with `net.params`.
    pub adam: Vec<AdamState<T>>,
    pub bank: NoiseBank<T>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    sampler: TargetSampler,
}

pub const MAX_CONSECUTIVE_ABORTS: usize = 10;

impl<T: Real> TrainState<T> {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let net = NetworkBundle::new(&config.arch, config.seed);
        let adam = net.params.vars().iter().map(|v| AdamState::new(v.shape())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config: config.clone(),
            bank: NoiseBank::new(config.arch.noise_dim, config.seed),
            net,
            adam,
            step: 0,
            rng,
            sampler: config.target_sampler(),
        })
    }

    fn adam_config(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.config.beta1, beta2: self.config.beta2, eps: 1e-8 }
    }

    /// Sources uniform over the training set; each reference is drawn
    /// uniformly until its label differs from the source's, and the target
    /// copies a nonempty subset of the differing attributes from it.
    pub fn sample_batch(&mut self, data: &TrainingSet) -> Result<Batch<T>> {
        let b = self.config.batch_size;
        let mut src = Vec::with_capacity(b);
        let mut refs = Vec::with_capacity(b);
        let mut y_t = Vec::with_capacity(b);
        for _ in 0..b {
            let s = self.rng.random_range(0..data.len());
            let r = loop {
                let r = self.rng.random_range(0..data.len());
                if data.labels[r] != data.labels[s] {
                    break r;
                }
            };
            let t =
                self.sampler.reference_target(&data.labels[s], &data.labels[r], &mut self.rng).expect("labels differ");
            src.push(s as u64);
            refs.push(r as u64);
            y_t.push(t);
        }
        Batch::build(data, src, refs, y_t)
    }

    /// One Adam step on the batch's noise entries against the style loss,
    /// with every network parameter frozen.
    pub fn noise_refinement_step(&mut self, batch: &Batch<T>) -> Result<RefinementOutcome> {
        let frozen = self.net.frozen();
        let x_s = Var::constant(batch.x_s.clone());
        let x_r = Var::constant(batch.x_r.clone());
        let (s_s, s_ref) = no_grad(|| -> Result<_> {
            Ok((source_code(&frozen, &x_s, &batch.diffs)?, rem(&frozen, &x_s, &x_r, &batch.diffs)?))
        })?;
        let r = Var::leaf(self.bank.stack(&batch.reference_ids));
        let s_rand = combine(&s_s, &label_branch(&frozen, &r, &batch.diffs)?)?;
        let per_sample = s_rand.var().sub(s_ref.var()).abs().mean_axes(&[1, 2, 3]).flatten();
        let g = grad(&per_sample.sum_all(), std::slice::from_ref(&r), false).remove(0);
        let cfg = self.adam_config(self.config.lr_noise);
        let d = self.bank.dim();
        let mut out = RefinementOutcome { sty_before: per_sample.value().to_f64_vec(), ..Default::default() };
        for (i, &id) in batch.reference_ids.iter().enumerate() {
            let row = Tensor::from_vec(&[d], g.value().data()[i * d..(i + 1) * d].to_vec());
            if !row.all_finite() {
                out.skipped.push(id);
                continue;
            }
            let entry = self.bank.entry(id);
            let mut value = entry.r.clone();
            entry.adam.step(&mut value, &row, &cfg);
            entry.r = value;
            out.updated.push(id);
        }
        Ok(out)
    }

    /// Builds codes and translations with the current parameters, batching
    /// the encoder, mapper and generator calls along the batch axis.
    pub fn forward(&mut self, batch: &Batch<T>) -> Result<Forward<T>> {
        let net = &self.net;
        let b = batch.len();
        let n = net.arch.n_attrs;
        let x_s = Var::constant(batch.x_s.clone());
        let x_r = Var::constant(batch.x_r.clone());
        let noise = Var::constant(self.bank.stack(&batch.reference_ids));
        let noise_prime = Var::constant(normal_tensor(&mut self.rng, &[b, net.arch.noise_dim]));
        let alphas: Vec<f64> = (0..b).map(|_| self.rng.random::<f64>()).collect();

        let fwd = diff_matrix::<T>(&batch.diffs, false);
        let back = diff_matrix::<T>(&batch.diffs, true);
        let zero = Tensor::<T>::zeros(&[b, n]);
        let keep = keep_matrix::<T>(&batch.keep);

        let enc_in = concat(&[x_s.clone(), x_r.clone(), x_s.clone(), x_s.clone()], 0);
        let enc_cond = gradtape::tensor::concat(&[&fwd, &back, &zero, &keep], 0);
        let enc = chunks(net.encode(&enc_in, &enc_cond)?.var(), 4);
        let (s_s, s_r_ref, s_zero, keep_code_s) =
            (StyleCode(enc[0].clone()), StyleCode(enc[1].clone()), &enc[2], enc[3].clone());

        let map_in = concat(&[noise.clone(), noise_prime.clone(), noise.clone()], 0);
        let map_cond = gradtape::tensor::concat(&[&back, &back, &zero], 0);
        let maps = chunks(net.map_noise(&map_in, &map_cond)?.var(), 3);

        let s_rand = combine(&s_s, &StyleCode(maps[0].clone()))?;
        let s_ref = combine(&s_s, &s_r_ref)?;
        let s_int = interpolate_batch(&s_rand, &s_ref, &alphas)?;
        let s_rand_prime = combine(&s_s, &StyleCode(maps[1].clone()))?;
        let s_rec_lem = s_zero.add(&maps[2]);
        let s_rec_rem = s_zero.add(s_zero);

        let gen_in = concat(&vec![x_s.clone(); 6], 0);
        let codes = concat(
            &[
                s_rand.var().clone(),
                s_ref.var().clone(),
                s_int.var().clone(),
                s_rec_lem,
                s_rec_rem,
                s_rand_prime.var().clone(),
            ],
            0,
        );
        let out = chunks(&net.generate(&gen_in, &StyleCode(codes))?, 6);
        Ok(Forward {
            x_s,
            s_s,
            s_rand,
            s_ref,
            alphas,
            x_g_l: out[0].clone(),
            x_g_r: out[1].clone(),
            x_g_i: out[2].clone(),
            rec_lem: out[3].clone(),
            rec_rem: out[4].clone(),
            x_g_prime: out[5].clone(),
            noise,
            noise_prime,
            keep_code_s,
        })
    }

    fn apply_grads(&mut self, indices: &[usize], grads: &[Var<T>], lr: f64) {
        let cfg = self.adam_config(lr);
        for (&i, g) in indices.iter().zip(grads) {
            let mut value = self.net.params.value(i).clone();
            self.adam[i].step(&mut value, g.value(), &cfg);
            self.net.params.set_value(i, value);
        }
    }

    /// Critic/classifier update on real sources and the detached pool of
    /// all three synthesis types.
    pub fn critic_update(&mut self, batch: &Batch<T>, fwd: &Forward<T>) -> Result<CriticStep<T>> {
        let b = batch.len();
        let fakes = fwd.fakes().detach();
        let (scores, logits) = self.net.critic(&concat(&[fwd.x_s.clone(), fakes.clone()], 0))?;
        let real_scores = scores.narrow(0, 0, b);
        let fake_scores = scores.narrow(0, b, 3 * b);
        let adv = adversarial_gap(&real_scores, &fake_scores);
        let cls_real = bce_mean(&logits.narrow(0, 0, b).sigmoid(), &label_matrix(&batch.y_s))?;
        // each real sample is paired with one fake, cycling through the three types
        let paired: Vec<Var<T>> = (0..b).map(|i| fakes.narrow(0, (i % 3) * b + i, 1)).collect();
        let eps: Vec<f64> = (0..b).map(|_| self.rng.random::<f64>()).collect();
        let gp = gradient_penalty(&self.net, &fwd.x_s, &concat(&paired, 0), &eps)?;
        check_finite_terms(&[("adv", &adv), ("cls_real", &cls_real), ("gp", &gp)])?;
        let total_dc = critic_objective(&adv, &cls_real, &gp, &self.config.weights);
        let group = self.net.params.group(&[Net::D, Net::C]);
        let wrt: Vec<Var<T>> = group.iter().map(|&i| self.net.params.var(i).clone()).collect();
        let grads = grad(&total_dc, &wrt, false);
        if grads.iter().any(|g| !g.value().all_finite()) {
            return Err(Error::Numerical("non-finite critic gradient".into()));
        }
        self.apply_grads(&group, &grads, self.config.lr_net);
        Ok(CriticStep { adv, cls_real, gp, total_dc })
    }

    /// Generator and encoder/mapper updates from one backward pass of
    /// `total_ME`: the cycle term cannot reach G (its generated inputs are
    /// detached), so G receives exactly the gradient of `total_G`.
    pub fn generator_update(&mut self, batch: &Batch<T>, fwd: &Forward<T>) -> Result<GeneratorStep<T>> {
        let b = batch.len();
        let net = &self.net;
        let w = &self.config.weights;
        let (scores, logits) = net.critic(&fwd.fakes())?;
        let adv_g = scores.mean_all().neg();
        let y_t = label_matrix::<T>(&batch.y_t);
        let y_t3 = gradtape::tensor::concat(&[&y_t, &y_t, &y_t], 0);
        let cls = bce_mean(&logits.sigmoid(), &y_t3)?;
        let rec = l1_mean(&fwd.rec_lem, &fwd.x_s)?.add(&l1_mean(&fwd.rec_rem, &fwd.x_s)?).scale(T::lit(0.5));
        let sty = l1_mean(fwd.s_rand.var(), fwd.s_ref.var())?;
        let ms = mode_seeking_ratio(&fwd.noise, &fwd.noise_prime, &fwd.x_g_l, &fwd.x_g_prime)?;

        let keep = keep_matrix::<T>(&batch.keep);
        let back = diff_matrix::<T>(&batch.diffs, true);
        let mut parts = vec![fwd.x_g_l.clone(), fwd.x_g_l.detach(), fwd.x_g_r.detach()];
        let mut conds = vec![&keep, &back, &back];
        if self.config.ak_on_reference {
            parts.push(fwd.x_g_r.clone());
            conds.push(&keep);
        }
        let enc = chunks(net.encode(&concat(&parts, 0), &gradtape::tensor::concat(&conds, 0))?.var(), parts.len());
        let mut ak = l1_mean(&fwd.keep_code_s, &enc[0])?;
        if self.config.ak_on_reference {
            ak = ak.add(&l1_mean(&fwd.keep_code_s, &enc[3])?);
        }
        let cyc_rand = fwd.s_s.var().add(&enc[1]);
        let cyc_ref = fwd.s_s.var().add(&enc[2]);
        let cyc = l1_mean(fwd.s_rand.var(), &cyc_rand)?.add(&l1_mean(fwd.s_ref.var(), &cyc_ref)?);
        debug_assert_eq!(enc[0].shape()[0], b);

        let terms = LossTerms {
            adv: Var::scalar(T::zero()),
            adv_g,
            cls_real: Var::scalar(T::zero()),
            cls,
            rec,
            sty,
            ms,
            ak,
            cyc,
            gp: Var::scalar(T::zero()),
        };
        check_finite_terms(&terms.named())?;
        let (total_g, total_me) = generator_objectives(&terms, w);
        let group = self.net.params.group(&[Net::G, Net::M, Net::E]);
        let wrt: Vec<Var<T>> = group.iter().map(|&i| self.net.params.var(i).clone()).collect();
        let grads = grad(&total_me, &wrt, false);
        if grads.iter().any(|g| !g.value().all_finite()) {
            return Err(Error::Numerical("non-finite generator gradient".into()));
        }
        self.apply_grads(&group, &grads, self.config.lr_net);
        let LossTerms { adv_g, cls, rec, sty, ms, ak, cyc, .. } = terms;
        Ok(GeneratorStep { terms_adv_g: adv_g, cls, rec, sty, ms, ak, cyc, total_g, total_me })
    }

    /// Runs one full step on `batch`. On any numerical fault every piece of
    /// state is restored and the error is returned.
    pub fn train_on_batch(&mut self, batch: &Batch<T>) -> Result<LossReport> {
        let snapshot = self.clone();
        let result = self.train_on_batch_inner(batch);
        match result {
            Ok(report) => {
                self.step += 1;
                Ok(report)
            }
            Err(e) => {
                // keep the advanced rng so the next attempt sees a fresh batch
                let rng = self.rng.clone();
                *self = snapshot;
                self.rng = rng;
                Err(e)
            }
        }
    }

    fn train_on_batch_inner(&mut self, batch: &Batch<T>) -> Result<LossReport> {
        let refinement = self.noise_refinement_step(batch)?;
        let fwd = self.forward(batch)?;
        let critic = self.critic_update(batch, &fwd)?;
        let gen = self.generator_update(batch, &fwd)?;
        let terms = LossTerms {
            adv: critic.adv,
            adv_g: gen.terms_adv_g,
            cls_real: critic.cls_real,
            cls: gen.cls,
            rec: gen.rec,
            sty: gen.sty.clone(),
            ms: gen.ms,
            ak: gen.ak,
            cyc: gen.cyc,
            gp: critic.gp,
        };
        let objectives = Objectives {
            total_g: gen.total_g,
            total_me: gen.total_me,
            total_dc: critic.total_dc,
            total_r: gen.sty.scale(T::lit(self.config.weights.sty)),
        };
        let mut report = LossReport::new(&terms, &objectives);
        report.push("alpha", fwd.alphas.iter().sum::<f64>() / fwd.alphas.len() as f64);
        report.push("refine_skipped", refinement.skipped.len() as f64);
        if !report.all_finite() {
            return Err(Error::Numerical("non-finite loss report".into()));
        }
        Ok(report)
    }

    /// Samples a batch and trains on it.
    pub fn train_step(&mut self, data: &TrainingSet) -> Result<LossReport> {
        let batch = self.sample_batch(data)?;
        self.train_on_batch(&batch)
    }

    /// Like `train_step`, but a numerical fault is retried on a fresh batch
    /// up to `MAX_CONSECUTIVE_ABORTS` times. Returns the report and the
    /// number of aborted attempts.
    pub fn train_step_with_retries(&mut self, data: &TrainingSet) -> Result<(LossReport, usize)> {
        let mut aborted = 0;
        loop {
            match self.train_step(data) {
                Ok(report) => return Ok((report, aborted)),
                Err(Error::Numerical(msg)) => {
                    aborted += 1;
                    if aborted >= MAX_CONSECUTIVE_ABORTS {
                        return Err(Error::Numerical(format!(
                            "{aborted} consecutive aborted steps at step {}; last fault: {msg}",
                            self.step
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::nets::ArchConfig;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        let mut c = ExperimentConfig {
            attributes: vec!["bright_background".into(), "square_shape".into()],
            arch: ArchConfig::tiny(2),
            batch_size: 4,
            dataset: None,
            ..Default::default()
        };
        c.arch.n_attrs = 2;
        c
    }

    pub(crate) fn tiny_data(n: usize, seed: u64) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..n)
            .map(|_| Image::new(8, (0..192).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap())
            .collect();
        let labels = (0..n).map(|i| AttributeVector::from_bits(i as u64 % 4, 2)).collect();
        TrainingSet::new(images, labels).unwrap()
    }

    #[test]
    fn noise_bank_is_reproducible() {
        let mut a = NoiseBank::<f64>::new(4, 3);
        let mut b = NoiseBank::<f64>::new(4, 3);
        assert_eq!(a.stack(&[5, 1]), b.stack(&[5, 1]));
        assert_ne!(a.initial(5), a.initial(6));
        assert_ne!(a.initial(5), NoiseBank::<f64>::new(4, 4).initial(5));
    }

    #[test]
    fn batches_pair_references_with_targets() {
        let data = tiny_data(16, 0);
        let mut st = TrainState::<f64>::new(&tiny_config()).unwrap();
        let batch = st.sample_batch(&data).unwrap();
        for i in 0..batch.len() {
            assert_ne!(batch.y_s[i], batch.y_r[i]);
            assert!(!batch.diffs[i].is_identity());
            for j in batch.diffs[i].edited() {
                assert_eq!(batch.y_t[i].get(j), batch.y_r[i].get(j));
            }
        }
    }

    #[test]
    fn zero_noise_lr_leaves_bank_unchanged() {
        let data = tiny_data(16, 0);
        let mut cfg = tiny_config();
        cfg.lr_noise = 0.0;
        let mut st = TrainState::<f64>::new(&cfg).unwrap();
        let batch = st.sample_batch(&data).unwrap();
        let before = st.bank.clone().stack(&batch.reference_ids);
        st.noise_refinement_step(&batch).unwrap();
        assert_eq!(st.bank.stack(&batch.reference_ids), before);
    }

    #[test]
    fn steps_produce_finite_reports() {
        let data = tiny_data(16, 1);
        let mut st = TrainState::<f32>::new(&tiny_config()).unwrap();
        for _ in 0..3 {
            let r = st.train_step(&data).unwrap();
            assert!(r.all_finite());
            let alpha = r.get("alpha").unwrap();
            assert!((0.0..1.0).contains(&alpha));
        }
        assert_eq!(st.step, 3);
    }

    #[test]
    fn zero_learning_rates_change_nothing() {
        let data = tiny_data(16, 2);
        let mut cfg = tiny_config();
        cfg.lr_net = 0.0;
        cfg.lr_noise = 0.0;
        let mut st = TrainState::<f64>::new(&cfg).unwrap();
        let before: Vec<_> = st.net.params.vars().iter().map(|v| v.value().clone()).collect();
        st.train_step(&data).unwrap();
        let after: Vec<_> = st.net.params.vars().iter().map(|v| v.value().clone()).collect();
        assert_eq!(before, after);
    }
}
