//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Criteria can be selected by number on the command line, for example
//! `cargo test -p attrbridge-cli --test acceptance -- 1 4 6`. The two
//! training-scale criteria (7 and 8) take hours on one core; they run when
//! selected explicitly or when `ATTRBRIDGE_ACCEPTANCE_LONG=1` is set, and
//! are reported as skipped otherwise.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use attrbridge::attrs::{attribute_diff, attribute_keep_mask, AttributeDiff, AttributeVector, ExclusiveGroups};
use attrbridge::checkpoint::load_checkpoint;
use attrbridge::codec::{interpolate_batch, interpolate_codes, lem, rem};
use attrbridge::config::ExperimentConfig;
use attrbridge::eval::{frechet_distance, FeatureStats};
use attrbridge::imageio::{read_image, write_image};
use attrbridge::losses::{
    gradient_penalty, loss_adv_d, loss_adv_g, loss_ak, loss_cls, loss_cyc, loss_ms, loss_rec, loss_sty,
};
use attrbridge::nets::{ArchConfig, Net, NetworkBundle, StyleCode};
use attrbridge::synthdata::{build_dataset, Image};
use attrbridge::trainer::{Batch, NoiseBank, TrainState, TrainingSet};
use attrbridge_cli::infer::{run_inference, InferRequest, Mode};
use gradtape::{check_gradients, concat, grad, no_grad, GradCheckTolerance, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const LONG_CRITERIA: [u32; 2] = [7, 8];
const LONG_ENV: &str = "ATTRBRIDGE_ACCEPTANCE_LONG";

const CRITERIA: [Criterion; 9] = [
    (1, "attribute algebra matches the case-analysis oracle", c1_attribute_algebra),
    (2, "analytic gradients match central differences", c2_gradient_fidelity),
    (3, "gradient-flow and update-isolation rules", c3_gradient_flow),
    (4, "interpolation endpoints are bitwise label/reference outputs", c4_endpoints),
    (5, "noise refinement lowers the style loss", c5_noise_refinement),
    (6, "Frechet distance closed forms", c6_frechet),
    (7, "desk-scale end-to-end run", c7_end_to_end),
    (8, "ablation directions for mode seeking and attribute keeping", c8_ablations),
    (9, "determinism, resume and pixmap round trip", c9_determinism),
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let long = std::env::var(LONG_ENV).is_ok_and(|v| v == "1");
    let mut failed = 0;
    for (n, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        if selected.is_empty() && !long && LONG_CRITERIA.contains(&n) {
            println!("criterion {n} [SKIP] {name}: training-scale run; set {LONG_ENV}=1 or select it by number");
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        if !outcome.pass {
            failed += 1;
        }
        println!("criterion {n} [{verdict}] {name}: {} ({:.1}s)", outcome.detail, start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// shared fixtures

fn tiny_config(n_attrs: usize) -> ExperimentConfig {
    let names = ["bright_background", "square_shape", "stripes", "red_shape"];
    ExperimentConfig {
        attributes: names[..n_attrs].iter().map(|s| s.to_string()).collect(),
        arch: ArchConfig::tiny(n_attrs),
        dataset: None,
        batch_size: 2,
        ..ExperimentConfig::default()
    }
}

/// Uniform random images with every label combination represented.
fn random_training_set(count: usize, size: usize, n_attrs: usize, seed: u64) -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..count)
        .map(|_| Image::new(size, (0..3 * size * size).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap())
        .collect();
    let labels = (0..count).map(|i| AttributeVector::from_bits((i % (1 << n_attrs)) as u64, n_attrs)).collect();
    TrainingSet::new(images, labels).unwrap()
}

fn tiny_state(seed: u64) -> (TrainState<f64>, TrainingSet, Batch<f64>) {
    let mut config = tiny_config(2);
    config.seed = seed;
    let mut state = TrainState::<f64>::new(&config).unwrap();
    let data = random_training_set(16, 8, 2, seed ^ 0x5eed);
    let batch = state.sample_batch(&data).unwrap();
    (state, data, batch)
}

fn bits_equal(a: &Tensor<f64>, b: &Tensor<f64>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn images_bitwise(a: &Image, b: &Image) -> bool {
    a.size() == b.size() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn labels_tensor(labels: &[AttributeVector]) -> Tensor<f64> {
    let n = labels[0].len();
    let data: Vec<f64> = labels.iter().flat_map(|l| l.values().iter().map(|&v| f64::from(v))).collect();
    Tensor::from_f64(&[labels.len(), n], &data)
}

// ---------------------------------------------------------------------------
// criterion 1

fn oracle_diff(ys: u8, yt: u8) -> i8 {
    match (ys, yt) {
        (0, 1) => 1,
        (1, 0) => -1,
        _ => 0,
    }
}

fn oracle_keep(ys: u8, yt: u8) -> i8 {
    match (ys, yt) {
        (0, 0) => 1,
        (1, 1) => -1,
        _ => 0,
    }
}

fn c1_attribute_algebra() -> Outcome {
    let start = Instant::now();
    let mut pairs = 0usize;
    let mut mismatches = 0usize;
    for n in 1..=4usize {
        for s in 0..(1u64 << n) {
            for t in 0..(1u64 << n) {
                let ys = AttributeVector::from_bits(s, n);
                let yt = AttributeVector::from_bits(t, n);
                let diff = attribute_diff(&ys, &yt).unwrap();
                let keep = attribute_keep_mask(&ys, &diff).unwrap();
                let want_diff: Vec<i8> = (0..n).map(|i| oracle_diff(ys.get(i), yt.get(i))).collect();
                let want_keep: Vec<i8> = (0..n).map(|i| oracle_keep(ys.get(i), yt.get(i))).collect();
                pairs += 1;
                if diff.values() != want_diff.as_slice() || keep.values() != want_keep.as_slice() {
                    mismatches += 1;
                }
            }
        }
    }
    let ys = AttributeVector::new(vec![1, 0, 1, 0]).unwrap();
    let yt = AttributeVector::new(vec![1, 1, 0, 0]).unwrap();
    let diff = attribute_diff(&ys, &yt).unwrap();
    let keep = attribute_keep_mask(&ys, &diff).unwrap();
    let golden = diff.values() == [0, 1, -1, 0] && keep.values() == [-1, 0, 0, 1];
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        mismatches == 0 && golden && secs < 1.0,
        format!("{pairs} pairs for n<=4, {mismatches} mismatches, worked example {golden}, {secs:.3}s < 1s"),
    )
}

// ---------------------------------------------------------------------------
// criterion 2

/// Everything a loss term needs besides the parameters and `R`.
struct GradFixture {
    net: NetworkBundle<f64>,
    x_s: Var<f64>,
    x_r: Var<f64>,
    diffs: Vec<AttributeDiff>,
    batch: Batch<f64>,
    r: Tensor<f64>,
    r_prime: Var<f64>,
    alphas: Vec<f64>,
    eps: Vec<f64>,
    /// Detached translations from the starting parameters.
    fakes: Var<f64>,
    x_g_l: Var<f64>,
    x_g_r: Var<f64>,
}

const TERMS: [&str; 10] = ["adv", "gp", "cls_real", "adv_g", "cls", "rec", "sty", "ms", "ak", "cyc"];

impl GradFixture {
    fn new() -> Self {
        let (mut state, _, batch) = tiny_state(3);
        let net = state.net.clone();
        let x_s = Var::constant(batch.x_s.clone());
        let x_r = Var::constant(batch.x_r.clone());
        let r = state.bank.stack(&batch.reference_ids);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = batch.len();
        let d = net.arch.noise_dim;
        let r_prime = Var::constant(Tensor::from_f64(
            &[b, d],
            &(0..b * d).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>(),
        ));
        let alphas: Vec<f64> = (0..b).map(|_| rng.random_range(0.1..0.9)).collect();
        let eps: Vec<f64> = (0..b).map(|_| rng.random_range(0.1..0.9)).collect();
        let diffs = batch.diffs.clone();
        let mut fx = Self {
            net,
            x_s,
            x_r,
            diffs,
            batch,
            r,
            r_prime,
            alphas,
            eps,
            fakes: Var::constant(Tensor::zeros(&[1])),
            x_g_l: Var::constant(Tensor::zeros(&[1])),
            x_g_r: Var::constant(Tensor::zeros(&[1])),
        };
        let (fakes, x_g_l, x_g_r) = no_grad(|| fx.translations(&fx.net, &Var::constant(fx.r.clone())));
        fx.fakes = fakes.detach();
        fx.x_g_l = x_g_l.detach();
        fx.x_g_r = x_g_r.detach();
        state.step = 0;
        fx
    }

    fn codes(&self, net: &NetworkBundle<f64>, r: &Var<f64>) -> (StyleCode<f64>, StyleCode<f64>) {
        (lem(net, &self.x_s, r, &self.diffs).unwrap(), rem(net, &self.x_s, &self.x_r, &self.diffs).unwrap())
    }

    /// Pooled `[X_g^l, X_g^r, X_g^i]` plus the first two separately.
    fn translations(&self, net: &NetworkBundle<f64>, r: &Var<f64>) -> (Var<f64>, Var<f64>, Var<f64>) {
        let (s_rand, s_ref) = self.codes(net, r);
        let s_int = interpolate_batch(&s_rand, &s_ref, &self.alphas).unwrap();
        let g_l = net.generate(&self.x_s, &s_rand).unwrap();
        let g_r = net.generate(&self.x_s, &s_ref).unwrap();
        let g_i = net.generate(&self.x_s, &s_int).unwrap();
        (concat(&[g_l.clone(), g_r.clone(), g_i], 0), g_l, g_r)
    }

    fn term(&self, name: &str, leaves: &[Var<f64>]) -> Var<f64> {
        let p = self.net.params.len();
        let mut ps = self.net.params.clone();
        ps.set_vars(leaves[..p].to_vec());
        let net = self.net.with_params(ps);
        let r = &leaves[p];
        let b = self.batch.len();
        let y_t = labels_tensor(&self.batch.y_t);
        match name {
            "adv" => loss_adv_d(&net, &self.x_s, &self.fakes).unwrap(),
            "gp" => {
                let paired: Vec<Var<f64>> = (0..b).map(|i| self.fakes.narrow(0, (i % 3) * b + i, 1)).collect();
                gradient_penalty(&net, &self.x_s, &concat(&paired, 0), &self.eps).unwrap()
            }
            "cls_real" => loss_cls(&net, &self.x_s, &labels_tensor(&self.batch.y_s)).unwrap(),
            "adv_g" => loss_adv_g(&net, &self.translations(&net, r).0).unwrap(),
            "cls" => {
                let y3 = gradtape::tensor::concat(&[&y_t, &y_t, &y_t], 0);
                loss_cls(&net, &self.translations(&net, r).0, &y3).unwrap()
            }
            "rec" => loss_rec(&net, &self.x_s, r).unwrap(),
            "sty" => {
                let (s_rand, s_ref) = self.codes(&net, r);
                loss_sty(&s_rand, &s_ref).unwrap()
            }
            "ms" => loss_ms(&net, &self.x_s, r, &self.r_prime, &self.diffs).unwrap(),
            "ak" => {
                let (_, g_l, _) = self.translations(&net, r);
                loss_ak(&net, &self.x_s, &g_l, &self.batch.keep).unwrap()
            }
            "cyc" => {
                let (s_rand, s_ref) = self.codes(&net, r);
                loss_cyc(&net, &self.x_s, &self.x_g_l, &self.x_g_r, &self.diffs, &s_rand, &s_ref).unwrap()
            }
            other => panic!("unknown term {other}"),
        }
    }

    fn inputs(&self) -> Vec<(String, Tensor<f64>)> {
        let ps = &self.net.params;
        (0..ps.len())
            .map(|i| (ps.name(i).to_string(), ps.value(i).clone()))
            .chain(std::iter::once(("R".to_string(), self.r.clone())))
            .collect()
    }
}

fn c2_gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let fx = GradFixture::new();
    let inputs = fx.inputs();
    let tol = GradCheckTolerance { step: 1e-7, rtol: 1e-3, atol: 1e-4 };
    let mut checked = 0;
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for name in TERMS {
        let report = check_gradients(&|leaves| fx.term(name, leaves), &inputs, tol, None);
        checked += report.checked;
        worst = worst.max(report.max_abs_err);
        if !report.passed() {
            failures.push(format!("{name}: {} bad, first {}", report.failures.len(), report.failures[0]));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let params = fx.net.params.parameter_count();
    Outcome::new(
        failures.is_empty() && secs < 120.0,
        format!(
            "{} terms x ({params} parameters + R) = {checked} entries, max abs err {worst:.2e}, {secs:.0}s < 120s{}",
            TERMS.len(),
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// criterion 3

fn param_values(net: &NetworkBundle<f64>) -> Vec<Tensor<f64>> {
    (0..net.params.len()).map(|i| net.params.value(i).clone()).collect()
}

/// Names of parameters whose value changed, and whether any changed
/// parameter lies outside `allowed`.
fn changed(before: &[Tensor<f64>], net: &NetworkBundle<f64>, allowed: &[Net]) -> (usize, Vec<String>) {
    let allowed_idx = net.params.group(allowed);
    let mut n_changed = 0;
    let mut outside = Vec::new();
    for (i, b) in before.iter().enumerate() {
        if !bits_equal(b, net.params.value(i)) {
            n_changed += 1;
            if !allowed_idx.contains(&i) {
                outside.push(net.params.name(i).to_string());
            }
        }
    }
    (n_changed, outside)
}

fn c3_gradient_flow() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    // cycle loss never reaches G
    let fx = GradFixture::new();
    let leaves: Vec<Var<f64>> = fx.inputs().into_iter().map(|(_, t)| Var::leaf(t)).collect();
    let p = fx.net.params.len();
    let mut ps = fx.net.params.clone();
    ps.set_vars(leaves[..p].to_vec());
    let net = fx.net.with_params(ps);
    let (s_rand, s_ref) = fx.codes(&net, &leaves[p]);
    let (_, live_l, live_r) = fx.translations(&net, &leaves[p]);
    let cyc = loss_cyc(&net, &fx.x_s, &live_l, &live_r, &fx.diffs, &s_rand, &s_ref).unwrap();
    let grads = grad(&cyc, &leaves, false);
    let g_idx = fx.net.params.group(&[Net::G]);
    let g_nonzero: usize = g_idx.iter().map(|&i| grads[i].value().data().iter().filter(|v| **v != 0.0).count()).sum();
    let me_nonzero: usize = fx
        .net
        .params
        .group(&[Net::M, Net::E])
        .iter()
        .map(|&i| grads[i].value().data().iter().filter(|v| **v != 0.0).count())
        .sum();
    ok &= g_nonzero == 0 && me_nonzero > 0;
    notes.push(format!("L_cyc: {g_nonzero} nonzero G grads, {me_nonzero} nonzero M/E grads"));

    // refinement touches only the bank
    let (mut state, _, batch) = tiny_state(5);
    let before = param_values(&state.net);
    let bank_before = state.bank.clone();
    let adam_before: Vec<_> = state.adam.iter().map(|a| (a.m.clone(), a.v.clone(), a.t)).collect();
    let outcome = state.noise_refinement_step(&batch).unwrap();
    let (n_params, _) = changed(&before, &state.net, &[]);
    let adam_same = state
        .adam
        .iter()
        .zip(&adam_before)
        .all(|(a, (m, v, t))| bits_equal(&a.m, m) && bits_equal(&a.v, v) && a.t == *t);
    let refs: Vec<u64> = batch.reference_ids.clone();
    let bank_moved = refs.iter().all(|id| {
        let after = &state.bank.get(*id).expect("refined entry").r;
        !bits_equal(after, &bank_before.initial(*id))
    });
    let others_same = state.bank.entries().keys().all(|id| refs.contains(id) || bank_before.get(*id).is_some());
    ok &= n_params == 0 && adam_same && bank_moved && others_same && outcome.skipped.is_empty();
    notes.push(format!(
        "refinement: {n_params} parameters changed, optimizer state unchanged {adam_same}, {} bank entries moved",
        outcome.updated.len()
    ));

    // critic update touches only D/C; generator update only G/M/E
    let fwd = state.forward(&batch).unwrap();
    let before = param_values(&state.net);
    state.critic_update(&batch, &fwd).unwrap();
    let (n_dc, outside_dc) = changed(&before, &state.net, &[Net::D, Net::C]);
    let fwd = state.forward(&batch).unwrap();
    let before = param_values(&state.net);
    state.generator_update(&batch, &fwd).unwrap();
    let (n_g, outside_g) = changed(&before, &state.net, &[Net::G, Net::M, Net::E]);
    ok &= n_dc > 0 && outside_dc.is_empty() && n_g > 0 && outside_g.is_empty();
    notes.push(format!(
        "critic update changed {n_dc} tensors ({} outside D/C), generator update changed {n_g} ({} outside G/M/E)",
        outside_dc.len(),
        outside_g.len()
    ));
    Outcome::new(ok, notes.join("; "))
}

// ---------------------------------------------------------------------------
// criterion 4

fn small_dataset_config(out: &Path) -> String {
    format!(
        "attributes = bright_background,square_shape,stripes\n\
         code_channels = 4\nenc_channels = 4,4,4\nmap_hidden = 8\nmap_channels = 4\n\
         gen_channels = 4,4,4\nspade_hidden = 4\ndisc_channels = 4,4,4,4\nbatch_size = 2\n\
         dataset = synthetic\nn_train = 64\nn_test = 32\nfeature_steps = 20\n\
         log_every = 1\ncheckpoint_every = 3\nsample_every = 5\noutput_dir = {}\n",
        out.display()
    )
}

fn c4_endpoints() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();

    // codec level, f64 tiny net
    let fx = GradFixture::new();
    let r = Var::constant(fx.r.clone());
    let (s_rand, s_ref) = fx.codes(&fx.net, &r);
    let gen = |s: &StyleCode<f64>| fx.net.generate(&fx.x_s, s).unwrap().value().clone();
    let at1 = bits_equal(&gen(&interpolate_codes(&s_rand, &s_ref, 1.0).unwrap()), &gen(&s_rand));
    let at0 = bits_equal(&gen(&interpolate_codes(&s_rand, &s_ref, 0.0).unwrap()), &gen(&s_ref));
    ok &= at1 && at0;
    notes.push(format!("codec alpha=1 {at1}, alpha=0 {at0}"));

    // inference level, f32 net on rendered 32x32 samples
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig::parse(&small_dataset_config(dir.path())).unwrap();
    let state = TrainState::<f32>::new(&config).unwrap();
    let ds = build_dataset(&config.synth_spec().unwrap(), 8, 4, 2).unwrap();
    let groups = ExclusiveGroups::new(vec![], 3).unwrap();
    let src = (ds.test[0].image.clone(), ds.test[0].label.clone());
    let reference =
        ds.test.iter().find(|s| s.label != ds.test[0].label).map(|s| (s.image.clone(), s.label.clone())).unwrap();
    let target = Some(reference.1.clone());
    let request = |mode, references: Vec<(Image, AttributeVector)>, alphas: Vec<f64>| InferRequest {
        mode,
        source: src.clone(),
        references,
        target: target.clone(),
        alphas,
        noise_seed: 9,
        samples: 1,
    };
    let run = |req: InferRequest| run_inference(&state.net, &groups, &req).unwrap().outputs;
    let label = run(request(Mode::Label, vec![], vec![]));
    let reference_out = run(request(Mode::Reference, vec![reference.clone()], vec![]));
    let interp = run(request(Mode::Interp, vec![reference.clone()], vec![1.0, 0.0]));
    let avg = run(request(Mode::MultirefAvg, vec![reference.clone()], vec![]));
    let i1 = images_bitwise(&interp[0], &label[0]);
    let i0 = images_bitwise(&interp[1], &reference_out[0]);
    let a1 = images_bitwise(&avg[0], &reference_out[0]);
    ok &= i1 && i0 && a1;
    notes.push(format!("infer interp[1.0]==label {i1}, interp[0.0]==reference {i0}, multiref-avg(1)==reference {a1}"));
    Outcome::new(ok, notes.join("; "))
}

// ---------------------------------------------------------------------------
// criterion 5

fn c5_noise_refinement() -> Outcome {
    let (base, _, batch) = tiny_state(21);
    let frozen = base.net.frozen();
    let x_s = Var::constant(batch.x_s.clone());
    let x_r = Var::constant(batch.x_r.clone());
    let s_ref = no_grad(|| rem(&frozen, &x_s, &x_r, &batch.diffs).unwrap());
    let sty = |bank: &mut NoiseBank<f64>| -> f64 {
        let r = Var::constant(bank.stack(&batch.reference_ids));
        no_grad(|| loss_sty(&lem(&frozen, &x_s, &r, &batch.diffs).unwrap(), &s_ref).unwrap().item())
    };
    let trials = 100;
    let mut improved = 0;
    for trial in 0..trials {
        let mut state = base.clone();
        state.config.lr_noise = 1e-3;
        state.bank = NoiseBank::new(state.net.arch.noise_dim, 1000 + trial);
        let before = sty(&mut state.bank);
        state.noise_refinement_step(&batch).unwrap();
        let after = sty(&mut state.bank);
        if after <= before {
            improved += 1;
        }
    }
    let frac = improved as f64 / trials as f64;
    Outcome::new(
        frac >= 0.95,
        format!("L_sty did not increase in {improved}/{trials} trials ({:.0}% >= 95%)", 100.0 * frac),
    )
}

// ---------------------------------------------------------------------------
// criterion 6

/// Diagonal-covariance Fréchet distance in closed form.
fn diagonal_frechet(mu_a: &[f64], var_a: &[f64], mu_b: &[f64], var_b: &[f64]) -> f64 {
    (0..mu_a.len()).map(|i| (mu_a[i] - mu_b[i]).powi(2) + (var_a[i].sqrt() - var_b[i].sqrt()).powi(2)).sum()
}

fn stats(mu: &[f64], var: &[f64]) -> FeatureStats {
    FeatureStats::new(DVector::from_column_slice(mu), DMatrix::from_diagonal(&DVector::from_column_slice(var)), 100)
        .unwrap()
}

fn c6_frechet() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let features: Vec<Vec<f64>> = (0..200).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let other: Vec<Vec<f64>> = (0..150).map(|_| (0..8).map(|_| rng.random_range(-0.5..1.5)).collect()).collect();
    let a = FeatureStats::from_features(&features).unwrap();
    let b = FeatureStats::from_features(&other).unwrap();
    let self_d = frechet_distance(&a, &a).unwrap();
    let scalar = frechet_distance(&stats(&[0.0], &[1.0]), &stats(&[1.0], &[4.0])).unwrap();
    let ab = frechet_distance(&a, &b).unwrap();
    let ba = frechet_distance(&b, &a).unwrap();
    let (mu_a, var_a) = ([0.3, -1.0, 2.0], [0.5, 2.0, 1.5]);
    let (mu_b, var_b) = ([0.0, 1.0, 2.5], [1.0, 0.25, 3.0]);
    let diag = frechet_distance(&stats(&mu_a, &var_a), &stats(&mu_b, &var_b)).unwrap();
    let diag_want = diagonal_frechet(&mu_a, &var_a, &mu_b, &var_b);
    let ok =
        self_d < 1e-6 && (scalar - 2.0).abs() <= 1e-6 && (ab - ba).abs() <= 1e-6 && (diag - diag_want).abs() <= 1e-9;
    Outcome::new(
        ok,
        format!(
            "d(a,a)={self_d:.2e}, 1-D case {scalar:.9} (want 2), |d(a,b)-d(b,a)|={:.2e}, diagonal case err {:.2e}",
            (ab - ba).abs(),
            (diag - diag_want).abs()
        ),
    )
}

// ---------------------------------------------------------------------------
// CLI helpers

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_attrbridge")
}

/// Runs the CLI with the output directory override, panicking on failure.
fn cli(args: &[&str], out: &Path) -> String {
    let result = Command::new(binary()).args(args).env("ATTRBRIDGE_OUTPUT_DIR", out).output().unwrap();
    assert!(
        result.status.success(),
        "attrbridge {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&result.stderr).trim()
    );
    String::from_utf8(result.stdout).unwrap()
}

fn read_metrics(path: &Path) -> BTreeMap<String, String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

fn metric(m: &BTreeMap<String, String>, key: &str) -> f64 {
    m.get(key).unwrap_or_else(|| panic!("metric {key} missing")).parse().unwrap()
}

fn checkpoint_file(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:08}.ckpt"))
}

fn evaluate_checkpoint(ckpt: &Path, out: &Path, name: &str) -> BTreeMap<String, String> {
    let path = out.join(name);
    cli(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--output", path.to_str().unwrap()], out);
    read_metrics(&path)
}

// ---------------------------------------------------------------------------
// criteria 7 and 8

/// Desk-scale training recipe: 32x32 images, three attributes,
/// 4096/512 split.
const E2E_CONFIG: &str = "\
image_size = 32
attributes = bright_background,square_shape,stripes
code_channels = 16
enc_channels = 8,16,32
map_hidden = 64
map_channels = 16
gen_channels = 8,16,32
spade_hidden = 16
disc_channels = 8,16,32,32
batch_size = 8
lr_net = 0.0003
lambda_cls = 5
dataset = synthetic
n_train = 4096
n_test = 512
dataset_seed = 1
log_every = 50
sample_every = 5000
";

const E2E_STEPS: u64 = 20_000;
const TREND_EVERY: u64 = 5_000;
const ABLATION_STEPS: u64 = 5_000;

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("{E2E_CONFIG}{extra}")).unwrap();
    path
}

/// Spearman rank correlation (no ties expected among distinct steps).
fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(xs), rank(ys));
    let n = xs.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mean) * (b - mean)).sum();
    let sx: f64 = rx.iter().map(|a| (a - mean).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = ry.iter().map(|b| (b - mean).powi(2)).sum::<f64>().sqrt();
    cov / (sx * sy)
}

fn c7_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &format!("checkpoint_every = {TREND_EVERY}\n"));
    let start = Instant::now();
    cli(&["train", "--config", cfg.to_str().unwrap(), "--steps", &E2E_STEPS.to_string()], &out);
    let train_secs = start.elapsed().as_secs_f64();

    let mut steps = Vec::new();
    let mut accs = Vec::new();
    let mut reports = Vec::new();
    for step in (0..=E2E_STEPS).step_by(TREND_EVERY as usize) {
        let m = evaluate_checkpoint(&checkpoint_file(&out, step), &out, &format!("metrics_{step}.txt"));
        steps.push(step as f64);
        accs.push(metric(&m, "accuracy_label"));
        reports.push(m);
    }
    let untrained = &reports[0];
    let trained = reports.last().unwrap();
    let acc_l = metric(trained, "accuracy_label");
    let keep_l = metric(trained, "keep_label");
    let rec_l = metric(trained, "recon_l1_label");
    let rec_r = metric(trained, "recon_l1_reference");
    let fid0 = metric(untrained, "fid_label");
    let fid = metric(trained, "fid_label");
    let acc_r = metric(trained, "accuracy_reference");
    let rho = spearman(&steps, &accs);
    let checks = [
        (
            "a",
            acc_l >= 0.90,
            format!("label acc {:.1}% >= 90% (excluded {})", 100.0 * acc_l, trained["accuracy_label.excluded"]),
        ),
        (
            "b",
            keep_l >= 0.95,
            format!("keep {:.1}% >= 95% (excluded {})", 100.0 * keep_l, trained["keep_label.excluded"]),
        ),
        ("c", rec_l.max(rec_r) <= 0.08, format!("recon L1 {rec_l:.4}/{rec_r:.4} <= 0.08")),
        ("d", fid <= 0.5 * fid0, format!("FID {fid:.3} <= 0.5 x untrained {fid0:.3}")),
        (
            "e",
            acc_r >= 0.80,
            format!("reference acc {:.1}% >= 80% (excluded {})", 100.0 * acc_r, trained["accuracy_reference.excluded"]),
        ),
        ("trend", rho > 0.0, format!("label acc over checkpoints {accs:.3?}, Spearman rho {rho:.2} > 0")),
    ];
    let ok = checks.iter().all(|c| c.1);
    let detail = checks
        .iter()
        .map(|(k, pass, msg)| format!("({k}) {} {msg}", if *pass { "ok" } else { "FAILED" }))
        .collect::<Vec<_>>()
        .join("; ");
    Outcome::new(ok, format!("{E2E_STEPS} steps trained in {:.0} min; {detail}", train_secs / 60.0))
}

fn ablation_run(dir: &Path, name: &str, extra: &str) -> BTreeMap<String, String> {
    let run_dir = dir.join(name);
    fs::create_dir_all(&run_dir).unwrap();
    let cfg = write_config(&run_dir, &format!("checkpoint_every = {ABLATION_STEPS}\n{extra}"));
    let out = run_dir.join("out");
    cli(&["train", "--config", cfg.to_str().unwrap(), "--steps", &ABLATION_STEPS.to_string()], &out);
    evaluate_checkpoint(&checkpoint_file(&out, ABLATION_STEPS), &out, "metrics.txt")
}

fn c8_ablations() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let full = ablation_run(dir.path(), "full", "lambda_ms = 1\nlambda_ak = 1\n");
    let no_ms = ablation_run(dir.path(), "no_ms", "lambda_ms = 0\nlambda_ak = 1\n");
    let no_ak = ablation_run(dir.path(), "no_ak", "lambda_ms = 1\nlambda_ak = 0\n");
    let div1 = metric(&full, "diversity");
    let div0 = metric(&no_ms, "diversity");
    let keep1 = metric(&full, "keep_label");
    let keep0 = metric(&no_ak, "keep_label");
    let ms_ok = div1 >= 1.2 * div0;
    let ak_ok = keep1 > keep0;
    Outcome::new(
        ms_ok && ak_ok,
        format!(
            "{ABLATION_STEPS} steps per run; diversity {div1:.4} (ms=1) vs {div0:.4} (ms=0), ratio {:.2} >= 1.2 {}; \
             keep {:.2}% (ak=1) vs {:.2}% (ak=0) {}",
            div1 / div0,
            if ms_ok { "ok" } else { "FAILED" },
            100.0 * keep1,
            100.0 * keep0,
            if ak_ok { "ok" } else { "FAILED" }
        ),
    )
}

// ---------------------------------------------------------------------------
// criterion 9

fn c9_determinism() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, small_dataset_config(&dir.path().join("unused"))).unwrap();
    let cfg_s = cfg.to_str().unwrap();

    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    cli(&["train", "--config", cfg_s, "--steps", "10", "--seed", "7"], &run_a);
    cli(&["train", "--config", cfg_s, "--steps", "10", "--seed", "7"], &run_b);
    let log_a = fs::read_to_string(run_a.join("train_log.tsv")).unwrap();
    let log_b = fs::read_to_string(run_b.join("train_log.tsv")).unwrap();
    let logged_steps =
        log_a.lines().filter_map(|l| l.split('\t').next()).collect::<std::collections::BTreeSet<_>>().len();
    let same_logs = log_a == log_b && logged_steps >= 10;
    ok &= same_logs;
    notes.push(format!("two runs of {logged_steps} steps give identical logs {same_logs}"));

    // resume from step 3 and compare step 4 onwards with the uninterrupted run
    let run_c = dir.path().join("c");
    let ckpt3 = checkpoint_file(&run_a, 3);
    fs::create_dir_all(&run_c).unwrap();
    cli(&["train", "--config", cfg_s, "--steps", "10", "--seed", "7", "--resume", ckpt3.to_str().unwrap()], &run_c);
    let log_c = fs::read_to_string(run_c.join("train_log.tsv")).unwrap();
    let after3 = |log: &str| {
        log.lines().filter(|l| l.split('\t').next().unwrap().parse::<u64>().unwrap() > 3).collect::<Vec<_>>().join("\n")
    };
    let step4 = |log: &str| log.lines().filter(|l| l.starts_with("4\t")).collect::<Vec<_>>().join("\n");
    let resumed_step = !step4(&log_c).is_empty() && step4(&log_c) == step4(&log_a);
    let resumed_rest = after3(&log_c) == after3(&log_a);
    let final_a = fs::read(checkpoint_file(&run_a, 10)).unwrap();
    let final_c = fs::read(checkpoint_file(&run_c, 10)).unwrap();
    let same_ckpt = final_a == final_c;
    let loaded: TrainState<f32> = load_checkpoint(&checkpoint_file(&run_a, 10), None).unwrap();
    ok &= resumed_step && resumed_rest && same_ckpt && loaded.step == 10;
    notes.push(format!(
        "resume at step 3: step-4 losses bitwise equal {resumed_step}, steps 4-10 equal {resumed_rest}, final checkpoints identical {same_ckpt}"
    ));

    // pixmap round trip
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let image = Image::new(32, (0..3 * 32 * 32).map(|_| rng.random_range(-1.0f32..=1.0)).collect()).unwrap();
    let path = dir.path().join("img.ppm");
    write_image(&path, &image).unwrap();
    let back = read_image(&path).unwrap();
    let max_err = image.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    let bound = 1.0 / 255.0 + 1e-6;
    let rt_ok = max_err <= bound;
    ok &= rt_ok;
    notes.push(format!("P6 round trip max error {max_err:.6} <= 1/255"));
    Outcome::new(ok, notes.join("; "))
}
