//! Style-code composition: the label-based (LEM) and reference-based (REM)
//! encoding modules, interpolation between them, and the multi-reference
//! averaging and row-band mixing used at inference time.

use std::ops::Range;

use gradtape::{concat, Real, Tensor, Var};

use crate::attrs::AttributeDiff;
use crate::error::{Error, Result};
use crate::nets::{NetworkBundle, StyleCode};

/// `[B, n]` matrix of attribute diffs, optionally negated.
pub fn diff_matrix<T: Real>(diffs: &[AttributeDiff], negate: bool) -> Tensor<T> {
    let sign = if negate { -1.0 } else { 1.0 };
    let n = diffs.first().map_or(0, AttributeDiff::len);
    let mut data = Vec::with_capacity(diffs.len() * n);
    for d in diffs {
        assert_eq!(d.len(), n, "diffs of mixed length");
        data.extend(d.values().iter().map(|&v| sign * f64::from(v)));
    }
    Tensor::from_f64(&[diffs.len(), n], &data)
}

/// Label- and reference-based codes for one batch; either may be absent.
#[derive(Debug, Clone)]
pub struct CodePair<T: Real> {
    pub s_rand: Option<StyleCode<T>>,
    pub s_ref: Option<StyleCode<T>>,
}

impl<T: Real> CodePair<T> {
    pub fn new(s_rand: Option<StyleCode<T>>, s_ref: Option<StyleCode<T>>) -> Result<Self> {
        if let (Some(a), Some(b)) = (&s_rand, &s_ref) {
            check_same_shape(a, b)?;
        }
        Ok(Self { s_rand, s_ref })
    }
}

fn check_same_shape<T: Real>(a: &StyleCode<T>, b: &StyleCode<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("style code shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_batch(what: &str, batch: usize, diffs: &[AttributeDiff]) -> Result<()> {
    if batch != diffs.len() {
        return Err(Error::Dimension(format!("{what} has batch {batch} but {} diffs were given", diffs.len())));
    }
    Ok(())
}

/// `S_s = E(X_s, diff)`.
pub fn source_code<T: Real>(net: &NetworkBundle<T>, x_s: &Var<T>, diffs: &[AttributeDiff]) -> Result<StyleCode<T>> {
    check_batch("source batch", x_s.shape()[0], diffs)?;
    net.encode(x_s, &diff_matrix(diffs, false))
}

/// `S_r^l = M(R, -diff)`.
pub fn label_branch<T: Real>(net: &NetworkBundle<T>, noise: &Var<T>, diffs: &[AttributeDiff]) -> Result<StyleCode<T>> {
    check_batch("noise batch", noise.shape()[0], diffs)?;
    net.map_noise(noise, &diff_matrix(diffs, true))
}

/// `S_r^r = E(X_r, -diff)`.
pub fn reference_branch<T: Real>(
    net: &NetworkBundle<T>,
    x_r: &Var<T>,
    diffs: &[AttributeDiff],
) -> Result<StyleCode<T>> {
    check_batch("reference batch", x_r.shape()[0], diffs)?;
    net.encode(x_r, &diff_matrix(diffs, true))
}

/// Adds a source-branch code to a target-branch code.
pub fn combine<T: Real>(s_s: &StyleCode<T>, branch: &StyleCode<T>) -> Result<StyleCode<T>> {
    check_same_shape(s_s, branch)?;
    Ok(StyleCode(s_s.var().add(branch.var())))
}

/// `S_rand = E(X_s, diff) + M(R, -diff)`.
pub fn lem<T: Real>(
    net: &NetworkBundle<T>,
    x_s: &Var<T>,
    noise: &Var<T>,
    diffs: &[AttributeDiff],
) -> Result<StyleCode<T>> {
    combine(&source_code(net, x_s, diffs)?, &label_branch(net, noise, diffs)?)
}

/// `S_ref = E(X_s, diff) + E(X_r, -diff)`.
pub fn rem<T: Real>(
    net: &NetworkBundle<T>,
    x_s: &Var<T>,
    x_r: &Var<T>,
    diffs: &[AttributeDiff],
) -> Result<StyleCode<T>> {
    if x_s.shape() != x_r.shape() {
        return Err(Error::Dimension(format!(
            "source {:?} and reference {:?} batches differ",
            x_s.shape(),
            x_r.shape()
        )));
    }
    combine(&source_code(net, x_s, diffs)?, &reference_branch(net, x_r, diffs)?)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("interpolation rate {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `alpha * S_rand + (1 - alpha) * S_ref`; the endpoints return the
/// corresponding input unchanged.
pub fn interpolate_codes<T: Real>(s_rand: &StyleCode<T>, s_ref: &StyleCode<T>, alpha: f64) -> Result<StyleCode<T>> {
    check_same_shape(s_rand, s_ref)?;
    check_alpha(alpha)?;
    if alpha == 1.0 {
        return Ok(s_rand.clone());
    }
    if alpha == 0.0 {
        return Ok(s_ref.clone());
    }
    let a = s_rand.var().scale(T::lit(alpha));
    let b = s_ref.var().scale(T::lit(1.0 - alpha));
    Ok(StyleCode(a.add(&b)))
}

/// Per-sample interpolation with one rate per batch element.
pub fn interpolate_batch<T: Real>(s_rand: &StyleCode<T>, s_ref: &StyleCode<T>, alphas: &[f64]) -> Result<StyleCode<T>> {
    check_same_shape(s_rand, s_ref)?;
    let b = s_rand.shape()[0];
    if alphas.len() != b {
        return Err(Error::Dimension(format!("{} rates for a batch of {b}", alphas.len())));
    }
    for &a in alphas {
        check_alpha(a)?;
    }
    let w = Var::constant(Tensor::from_f64(&[b, 1, 1, 1], alphas));
    let one_minus: Vec<f64> = alphas.iter().map(|a| 1.0 - a).collect();
    let w_ref = Var::constant(Tensor::from_f64(&[b, 1, 1, 1], &one_minus));
    Ok(StyleCode(s_rand.var().mul(&w).add(&s_ref.var().mul(&w_ref))))
}

/// Elementwise mean of reference-branch codes.
pub fn average_reference_codes<T: Real>(codes: &[StyleCode<T>]) -> Result<StyleCode<T>> {
    let (first, rest) = codes.split_first().ok_or_else(|| Error::Argument("no reference codes to average".into()))?;
    if rest.is_empty() {
        return Ok(first.clone());
    }
    let mut sum = first.var().clone();
    for c in rest {
        check_same_shape(first, c)?;
        sum = sum.add(c.var());
    }
    Ok(StyleCode(sum.scale(T::lit(1.0 / codes.len() as f64))))
}

/// Splits `rows` code rows into `parts` contiguous, near-equal bands.
pub fn even_bands(rows: usize, parts: usize) -> Result<Vec<Range<usize>>> {
    if parts == 0 || parts > rows {
        return Err(Error::Argument(format!("cannot split {rows} rows into {parts} bands")));
    }
    Ok((0..parts).map(|i| (i * rows / parts)..((i + 1) * rows / parts)).collect())
}

/// Row band `b` of the output is copied from `codes[b]`.
pub fn mix_reference_codes<T: Real>(codes: &[StyleCode<T>], bands: &[Range<usize>]) -> Result<StyleCode<T>> {
    let first = codes.first().ok_or_else(|| Error::Argument("no reference codes to mix".into()))?;
    if codes.len() != bands.len() {
        return Err(Error::Argument(format!("{} codes but {} bands", codes.len(), bands.len())));
    }
    for c in codes {
        check_same_shape(first, c)?;
    }
    let rows = first.shape()[2];
    let mut order: Vec<usize> = (0..bands.len()).collect();
    order.sort_by_key(|&i| bands[i].start);
    let mut next = 0;
    for &i in &order {
        let band = &bands[i];
        if band.start != next || band.end <= band.start {
            return Err(Error::Argument(format!("bands {bands:?} do not partition rows 0..{rows}")));
        }
        next = band.end;
    }
    if next != rows {
        return Err(Error::Argument(format!("bands {bands:?} do not partition rows 0..{rows}")));
    }
    let parts: Vec<Var<T>> = order.iter().map(|&i| codes[i].var().narrow(2, bands[i].start, bands[i].len())).collect();
    Ok(StyleCode(if parts.len() == 1 { parts[0].clone() } else { concat(&parts, 2) }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ArchConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_code(shape: &[usize], seed: u64) -> StyleCode<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        StyleCode(Var::constant(Tensor::from_f64(shape, &data)))
    }

    fn images(b: usize, seed: u64) -> Var<f64> {
        random_code(&[b, 3, 8, 8], seed).0
    }

    fn diffs() -> Vec<AttributeDiff> {
        vec![AttributeDiff::new(vec![1, 0]).unwrap(), AttributeDiff::new(vec![-1, 1]).unwrap()]
    }

    #[test]
    fn lem_is_sum_of_branches() {
        let net = NetworkBundle::<f64>::new(&ArchConfig::tiny(2), 1);
        let x = images(2, 1);
        let r = Var::constant(Tensor::from_f64(&[2, 4], &[0.1, -0.3, 0.5, 1.0, -1.0, 0.2, 0.0, 0.7]));
        let d = diffs();
        let s = lem(&net, &x, &r, &d).unwrap();
        let e = net.encode(&x, &Tensor::from_f64(&[2, 2], &[1.0, 0.0, -1.0, 1.0])).unwrap();
        let m = net.map_noise(&r, &Tensor::from_f64(&[2, 2], &[-1.0, 0.0, 1.0, -1.0])).unwrap();
        let expected = e.value().zip_same(m.value(), |a, b| a + b);
        assert_eq!(s.value(), &expected);
    }

    #[test]
    fn rem_with_zero_diff_doubles_source_code() {
        let net = NetworkBundle::<f64>::new(&ArchConfig::tiny(2), 2);
        let x = images(2, 3);
        let zero = vec![AttributeDiff::zeros(2); 2];
        let s = rem(&net, &x, &x, &zero).unwrap();
        let e = source_code(&net, &x, &zero).unwrap();
        assert_eq!(s.value(), &e.value().map(|v| v + v));
        assert_eq!(s.shape(), lem(&net, &x, &Var::constant(Tensor::zeros(&[2, 4])), &zero).unwrap().shape());
    }

    #[test]
    fn rem_is_sum_of_encoder_passes() {
        let net = NetworkBundle::<f64>::new(&ArchConfig::tiny(2), 4);
        let (xs, xr) = (images(2, 5), images(2, 6));
        let d = diffs();
        let s = rem(&net, &xs, &xr, &d).unwrap();
        let a = net.encode(&xs, &diff_matrix(&d, false)).unwrap();
        let b = net.encode(&xr, &diff_matrix(&d, true)).unwrap();
        assert!(s.value().max_abs_diff(&a.value().zip_same(b.value(), |p, q| p + q)) == 0.0);
    }

    #[test]
    fn interpolation_endpoints_and_linearity() {
        let a = random_code(&[2, 4, 2, 2], 1);
        let b = random_code(&[2, 4, 2, 2], 2);
        assert_eq!(interpolate_codes(&a, &b, 1.0).unwrap().value(), a.value());
        assert_eq!(interpolate_codes(&a, &b, 0.0).unwrap().value(), b.value());
        let mid = interpolate_codes(&a, &b, 0.5).unwrap();
        let oracle = a.value().zip_same(b.value(), |p, q| (p + q) / 2.0);
        assert!(mid.value().max_abs_diff(&oracle) < 1e-15);
        for alpha in [0.1, 0.37, 0.8] {
            let p = interpolate_codes(&a, &b, alpha).unwrap();
            let q = interpolate_codes(&a, &b, 1.0 - alpha).unwrap();
            let sum = p.value().zip_same(q.value(), |x, y| x + y);
            let ab = a.value().zip_same(b.value(), |x, y| x + y);
            assert!(sum.max_abs_diff(&ab) < 1e-12);
        }
        assert_eq!(interpolate_codes(&a, &a, 0.5).unwrap().value().max_abs_diff(a.value()), 0.0);
        assert!(matches!(interpolate_codes(&a, &b, 1.5), Err(Error::Argument(_))));
        assert!(matches!(interpolate_codes(&a, &b, -0.1), Err(Error::Argument(_))));
        let c = random_code(&[2, 4, 1, 2], 3);
        assert!(matches!(interpolate_codes(&a, &c, 0.5), Err(Error::Dimension(_))));
    }

    #[test]
    fn batch_interpolation_matches_scalar() {
        let a = random_code(&[2, 4, 2, 2], 1);
        let b = random_code(&[2, 4, 2, 2], 2);
        let mixed = interpolate_batch(&a, &b, &[0.25, 0.75]).unwrap();
        for (i, alpha) in [0.25, 0.75].into_iter().enumerate() {
            let single = interpolate_codes(&a, &b, alpha).unwrap();
            let lhs = gradtape::tensor::narrow(mixed.value(), 0, i, 1);
            let rhs = gradtape::tensor::narrow(single.value(), 0, i, 1);
            assert!(lhs.max_abs_diff(&rhs) < 1e-15);
        }
    }

    #[test]
    fn averaging() {
        let a = random_code(&[1, 4, 2, 2], 1);
        assert_eq!(average_reference_codes(&[a.clone()]).unwrap().value(), a.value());
        assert_eq!(average_reference_codes(&[a.clone(), a.clone()]).unwrap().value(), a.value());
        let codes: Vec<_> = (0..5).map(|s| random_code(&[1, 4, 2, 2], s + 10)).collect();
        let avg = average_reference_codes(&codes).unwrap();
        for i in 0..avg.value().len() {
            let sum: f64 = codes.iter().map(|c| c.value().data()[i]).sum();
            assert!((avg.value().data()[i] - sum / 5.0).abs() < 1e-15);
        }
        assert!(matches!(average_reference_codes::<f64>(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn mixing_copies_row_bands() {
        let a = random_code(&[1, 3, 4, 4], 1);
        let b = random_code(&[1, 3, 4, 4], 2);
        assert_eq!(mix_reference_codes(&[a.clone()], &[0..4]).unwrap().value(), a.value());
        let mixed = mix_reference_codes(&[a.clone(), b.clone()], &[0..2, 2..4]).unwrap();
        let (m, av, bv) = (mixed.value().data(), a.value().data(), b.value().data());
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let i = (c * 4 + y) * 4 + x;
                    assert_eq!(m[i], if y < 2 { av[i] } else { bv[i] });
                }
            }
        }
        let swapped = mix_reference_codes(&[b.clone(), a.clone()], &[2..4, 0..2]).unwrap();
        assert_eq!(swapped.value(), mixed.value());
        assert!(mix_reference_codes(&[a.clone(), b.clone()], &[0..2, 3..4]).is_err());
        assert!(mix_reference_codes(&[a.clone(), b.clone()], &[0..3, 2..4]).is_err());
        assert!(mix_reference_codes(&[a.clone()], &[0..2, 2..4]).is_err());
        assert_eq!(even_bands(8, 3).unwrap(), vec![0..2, 2..5, 5..8]);
    }
}
