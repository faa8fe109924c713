//! Loss terms and the aggregate objectives for the four parameter groups.
//!
//! Every L1 term uses mean reduction over elements. The functions return
//! recorded scalars so the trainer can differentiate them; detaching where a
//! gradient must not flow (generated images entering the cycle loss, fakes
//! entering the critic update) is done here or by the caller as documented.

use gradtape::{grad, Real, Tensor, Var};

use crate::attrs::{AttributeDiff, AttributeKeepMask};
use crate::codec::{lem, rem};
use crate::error::{Error, Result};
use crate::nets::{NetworkBundle, StyleCode};

pub const CLS_EPS: f64 = 1e-7;
pub const MS_EPS: f64 = 1e-5;
const GP_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub rec: f64,
    pub sty: f64,
    pub ms: f64,
    pub ak: f64,
    pub cyc: f64,
    pub gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.0, rec: 10.0, sty: 1.0, ms: 1.0, ak: 1.0, cyc: 1.0, gp: 10.0 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { cls: 0.0, rec: 0.0, sty: 0.0, ms: 0.0, ak: 0.0, cyc: 0.0, gp: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_cls", self.cls),
            ("lambda_rec", self.rec),
            ("lambda_sty", self.sty),
            ("lambda_ms", self.ms),
            ("lambda_ak", self.ak),
            ("lambda_cyc", self.cyc),
            ("lambda_gp", self.gp),
        ];
        for (k, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("`{k}` must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean absolute elementwise difference.
pub fn l1_mean<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("L1 operands differ in shape: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.sub(b).abs().mean_all())
}

pub fn loss_sty<T: Real>(s_rand: &StyleCode<T>, s_ref: &StyleCode<T>) -> Result<Var<T>> {
    l1_mean(s_rand.var(), s_ref.var())
}

/// `E[D(real)] - E[D(fake)]` from critic scores; the critic maximizes it.
pub fn adversarial_gap<T: Real>(real_scores: &Var<T>, fake_scores: &Var<T>) -> Var<T> {
    real_scores.mean_all().sub(&fake_scores.mean_all())
}

/// Critic-side adversarial value; `fakes` should pool all three synthesis
/// types and be detached from the generator by the caller.
pub fn loss_adv_d<T: Real>(net: &NetworkBundle<T>, real: &Var<T>, fakes: &Var<T>) -> Result<Var<T>> {
    Ok(adversarial_gap(&net.discriminate(real)?, &net.discriminate(fakes)?))
}

/// Generator-side adversarial loss `-E[D(fake)]`.
pub fn loss_adv_g<T: Real>(net: &NetworkBundle<T>, fakes: &Var<T>) -> Result<Var<T>> {
    Ok(net.discriminate(fakes)?.mean_all().neg())
}

/// Mean over the batch of `(||grad_x D(x_hat)||_2 - 1)^2` where
/// `x_hat = eps * real + (1 - eps) * fake` with one `eps` per sample.
pub fn gradient_penalty_with<T: Real>(
    critic: &dyn Fn(&Var<T>) -> Result<Var<T>>,
    real: &Var<T>,
    fake: &Var<T>,
    eps: &[f64],
) -> Result<Var<T>> {
    if real.shape() != fake.shape() {
        return Err(Error::Dimension(format!("real {:?} and fake {:?} batches differ", real.shape(), fake.shape())));
    }
    let b = real.shape()[0];
    if eps.len() != b {
        return Err(Error::Dimension(format!("{} interpolation weights for a batch of {b}", eps.len())));
    }
    let mut wshape = vec![1; real.shape().len()];
    wshape[0] = b;
    let w = Var::constant(Tensor::from_f64(&wshape, eps));
    let w_fake = Var::constant(Tensor::from_f64(&wshape, &eps.iter().map(|e| 1.0 - e).collect::<Vec<_>>()));
    let mut x_hat = real.mul(&w).add(&fake.mul(&w_fake));
    if !x_hat.requires_grad() {
        x_hat = Var::leaf(x_hat.value().clone());
    }
    let scores = critic(&x_hat)?;
    let g = grad(&scores.sum_all(), std::slice::from_ref(&x_hat), true).remove(0);
    let axes: Vec<usize> = (1..g.shape().len()).collect();
    let norms = g.square().sum_axes(&axes).add_scalar(T::lit(GP_NORM_EPS)).sqrt();
    let gp = norms.add_scalar(-T::one()).square().mean_all();
    if !gp.value().all_finite() {
        return Err(Error::Numerical("non-finite gradient penalty".into()));
    }
    Ok(gp)
}

pub fn gradient_penalty<T: Real>(net: &NetworkBundle<T>, real: &Var<T>, fake: &Var<T>, eps: &[f64]) -> Result<Var<T>> {
    gradient_penalty_with(&|x| net.discriminate(x), real, fake, eps)
}

/// Binary cross-entropy averaged over batch and attributes, with
/// probabilities clamped to `[CLS_EPS, 1 - CLS_EPS]`.
pub fn bce_mean<T: Real>(probs: &Var<T>, labels: &Tensor<T>) -> Result<Var<T>> {
    if probs.shape() != labels.shape() {
        return Err(Error::Dimension(format!("probabilities {:?} vs labels {:?}", probs.shape(), labels.shape())));
    }
    let p = probs.clamp(T::lit(CLS_EPS), T::lit(1.0 - CLS_EPS));
    let y = Var::constant(labels.clone());
    let not_y = Var::constant(labels.map(|v| T::one() - v));
    let ll = y.mul(&p.ln()).add(&not_y.mul(&p.neg().add_scalar(T::one()).ln()));
    Ok(ll.mean_all().neg())
}

pub fn loss_cls<T: Real>(net: &NetworkBundle<T>, x: &Var<T>, labels: &Tensor<T>) -> Result<Var<T>> {
    bce_mean(&net.classify(x)?, labels)
}

/// Mean of the two diff-0 reconstruction errors, through LEM and REM.
pub fn loss_rec<T: Real>(net: &NetworkBundle<T>, x_s: &Var<T>, noise: &Var<T>) -> Result<Var<T>> {
    let zero = vec![AttributeDiff::zeros(net.arch.n_attrs); x_s.shape()[0]];
    let via_lem = net.generate(x_s, &lem(net, x_s, noise, &zero)?)?;
    let via_rem = net.generate(x_s, &rem(net, x_s, x_s, &zero)?)?;
    Ok(l1_mean(&via_lem, x_s)?.add(&l1_mean(&via_rem, x_s)?).scale(T::lit(0.5)))
}

/// Latent cycle loss. The generated images are detached, so this term
/// reaches E and M but never G.
pub fn loss_cyc<T: Real>(
    net: &NetworkBundle<T>,
    x_s: &Var<T>,
    x_g_l: &Var<T>,
    x_g_r: &Var<T>,
    diffs: &[AttributeDiff],
    s_rand: &StyleCode<T>,
    s_ref: &StyleCode<T>,
) -> Result<Var<T>> {
    let cyc_rand = rem(net, x_s, &x_g_l.detach(), diffs)?;
    let cyc_ref = rem(net, x_s, &x_g_r.detach(), diffs)?;
    Ok(loss_sty(s_rand, &cyc_rand)?.add(&loss_sty(s_ref, &cyc_ref)?))
}

/// Mode-seeking ratio computed per sample (mean-reduced L1 on both sides)
/// and averaged over the batch.
pub fn mode_seeking_ratio<T: Real>(r: &Var<T>, r_prime: &Var<T>, g: &Var<T>, g_prime: &Var<T>) -> Result<Var<T>> {
    if r.shape() != r_prime.shape() || g.shape() != g_prime.shape() || r.shape()[0] != g.shape()[0] {
        return Err(Error::Dimension(format!(
            "mode-seeking operands: noise {:?}/{:?}, images {:?}/{:?}",
            r.shape(),
            r_prime.shape(),
            g.shape(),
            g_prime.shape()
        )));
    }
    let per_sample = |a: &Var<T>, b: &Var<T>| {
        let axes: Vec<usize> = (1..a.shape().len()).collect();
        a.sub(b).abs().mean_axes(&axes).flatten()
    };
    let num = per_sample(r, r_prime);
    let den = per_sample(g, g_prime).add_scalar(T::lit(MS_EPS));
    Ok(num.div(&den).mean_all())
}

pub fn loss_ms<T: Real>(
    net: &NetworkBundle<T>,
    x_s: &Var<T>,
    r: &Var<T>,
    r_prime: &Var<T>,
    diffs: &[AttributeDiff],
) -> Result<Var<T>> {
    let g = net.generate(x_s, &lem(net, x_s, r, diffs)?)?;
    let g_prime = net.generate(x_s, &lem(net, x_s, r_prime, diffs)?)?;
    mode_seeking_ratio(r, r_prime, &g, &g_prime)
}

/// Features of the unedited attributes must survive translation.
pub fn loss_ak<T: Real>(
    net: &NetworkBundle<T>,
    x_s: &Var<T>,
    x_g: &Var<T>,
    masks: &[AttributeKeepMask],
) -> Result<Var<T>> {
    let n = net.arch.n_attrs;
    if masks.len() != x_s.shape()[0] {
        return Err(Error::Dimension(format!("{} keep masks for a batch of {}", masks.len(), x_s.shape()[0])));
    }
    let rows: Vec<f64> = masks.iter().flat_map(|m| m.as_f64()).collect();
    let cond = Tensor::from_f64(&[masks.len(), n], &rows);
    l1_mean(net.encode(x_s, &cond)?.var(), net.encode(x_g, &cond)?.var())
}

/// Per-step loss components.
#[derive(Debug, Clone)]
pub struct LossTerms<T: Real> {
    /// `E[D(real)] - E[D(fake)]` as seen by the critic update.
    pub adv: Var<T>,
    /// `-E[D(fake)]` as seen by the generator update.
    pub adv_g: Var<T>,
    pub cls_real: Var<T>,
    /// Classification of generated images against their target labels.
    pub cls: Var<T>,
    pub rec: Var<T>,
    pub sty: Var<T>,
    pub ms: Var<T>,
    pub ak: Var<T>,
    pub cyc: Var<T>,
    pub gp: Var<T>,
}

pub struct Objectives<T: Real> {
    pub total_g: Var<T>,
    pub total_me: Var<T>,
    pub total_dc: Var<T>,
    pub total_r: Var<T>,
}

fn weighted<T: Real>(base: Var<T>, parts: &[(f64, &Var<T>)]) -> Var<T> {
    // zero-weight terms are left out of the graph entirely
    parts.iter().filter(|(w, _)| *w != 0.0).fold(base, |acc, (w, v)| acc.add(&v.scale(T::lit(*w))))
}

/// `total_DC = -adv + lambda_cls * cls_real + lambda_gp * gp`.
pub fn critic_objective<T: Real>(adv: &Var<T>, cls_real: &Var<T>, gp: &Var<T>, w: &LossWeights) -> Var<T> {
    weighted(adv.neg(), &[(w.cls, cls_real), (w.gp, gp)])
}

/// `(total_G, total_ME)`; they differ only by `lambda_cyc * cyc`.
pub fn generator_objectives<T: Real>(terms: &LossTerms<T>, w: &LossWeights) -> (Var<T>, Var<T>) {
    let total_g = weighted(
        terms.adv_g.clone(),
        &[(w.cls, &terms.cls), (w.rec, &terms.rec), (w.sty, &terms.sty), (w.ms, &terms.ms), (w.ak, &terms.ak)],
    );
    let total_me = weighted(total_g.clone(), &[(w.cyc, &terms.cyc)]);
    (total_g, total_me)
}

pub fn check_finite_terms<T: Real>(named: &[(&str, &Var<T>)]) -> Result<()> {
    for (name, v) in named {
        if !v.value().all_finite() {
            return Err(Error::Numerical(format!("non-finite loss component `{name}`")));
        }
    }
    Ok(())
}

pub fn aggregate_objectives<T: Real>(terms: &LossTerms<T>, w: &LossWeights) -> Result<Objectives<T>> {
    check_finite_terms(&terms.named())?;
    let (total_g, total_me) = generator_objectives(terms, w);
    let total_dc = critic_objective(&terms.adv, &terms.cls_real, &terms.gp, w);
    let total_r = terms.sty.scale(T::lit(w.sty));
    Ok(Objectives { total_g, total_me, total_dc, total_r })
}

impl<T: Real> LossTerms<T> {
    pub fn named(&self) -> [(&'static str, &Var<T>); 10] {
        [
            ("adv", &self.adv),
            ("adv_g", &self.adv_g),
            ("cls_real", &self.cls_real),
            ("cls", &self.cls),
            ("rec", &self.rec),
            ("sty", &self.sty),
            ("ms", &self.ms),
            ("ak", &self.ak),
            ("cyc", &self.cyc),
            ("gp", &self.gp),
        ]
    }
}

/// Named scalars for one step, in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    entries: Vec<(String, f64)>,
}

impl LossReport {
    pub fn new(terms: &LossTerms<impl Real>, objectives: &Objectives<impl Real>) -> Self {
        let mut r = Self::default();
        for (name, v) in terms.named() {
            r.push(name, v.item().to_f64().unwrap_or(f64::NAN));
        }
        for (name, v) in [
            ("total_G", &objectives.total_g),
            ("total_ME", &objectives.total_me),
            ("total_DC", &objectives.total_dc),
            ("total_r", &objectives.total_r),
        ] {
            r.push(name, v.item().to_f64().unwrap_or(f64::NAN));
        }
        r
    }

    pub fn push(&mut self, name: &str, value: f64) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(e) => e.1 = value,
            None => self.entries.push((name.to_string(), value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|e| e.1)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, v)| v.is_finite())
    }

    /// Log lines `step<TAB>name<TAB>value`, values in round-trippable form.
    pub fn log_lines(&self, step: u64) -> String {
        self.entries.iter().map(|(n, v)| format!("{step}\t{n}\t{v:e}\n")).collect()
    }
}
