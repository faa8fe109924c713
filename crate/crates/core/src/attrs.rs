//! Integer algebra over binary multi-attribute labels.
//!
//! A label `Y` lives in `{0,1}^n`. The edit direction from a source to a
//! target is `Y_t - Y_s` in `{-1,0,1}^n`, and the keep mask marks the
//! attributes an edit leaves alone, signed by the source value.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttributeVector(Vec<u8>);

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AttributeDiff(Vec<i8>);

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AttributeKeepMask(Vec<i8>);

impl AttributeVector {
    pub fn new(values: Vec<u8>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Argument("attribute vector must have n >= 1".into()));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Argument(format!("attribute value {v} is not binary")));
        }
        Ok(Self(values))
    }

    /// Label whose bit `i` is bit `i` of `bits` (least significant first).
    pub fn from_bits(bits: u64, n: usize) -> Self {
        Self((0..n).map(|i| ((bits >> i) & 1) as u8).collect())
    }

    pub fn bits(&self) -> u64 {
        self.0.iter().enumerate().fold(0, |acc, (i, &v)| acc | ((v as u64) << i))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[u8] {
        &self.0
    }

    pub fn get(&self, i: usize) -> u8 {
        self.0[i]
    }

    /// `0101`-style rendering, attribute 0 first.
    pub fn to_bit_string(&self) -> String {
        self.0.iter().map(|&v| if v == 1 { '1' } else { '0' }).collect()
    }

    pub fn parse_bit_string(s: &str) -> Result<Self> {
        let values = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::Format(format!("bad label character {other:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(values)
    }

    /// `self + diff`, failing if any entry leaves `{0,1}`.
    pub fn apply(&self, diff: &AttributeDiff) -> Result<Self> {
        check_len(self.len(), diff.len())?;
        let values = self
            .0
            .iter()
            .zip(&diff.0)
            .map(|(&y, &d)| {
                let v = y as i8 + d;
                if (0..=1).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::Argument(format!("diff entry {d} invalid for label value {y}")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(Self(values))
    }
}

impl AttributeDiff {
    pub fn new(values: Vec<i8>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(-1..=1).contains(*v)) {
            return Err(Error::Argument(format!("diff entry {v} outside {{-1,0,1}}")));
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The opposite direction, `Y_t -> Y_s`.
    pub fn reversed(&self) -> Self {
        Self(self.0.iter().map(|&d| -d).collect())
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().all(|&d| d == 0)
    }

    pub fn edited(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &d)| d != 0).map(|(i, _)| i)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&d| d as f64).collect()
    }
}

impl AttributeKeepMask {
    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&d| d as f64).collect()
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("attribute count mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Edit direction `target - source`.
pub fn attribute_diff(source: &AttributeVector, target: &AttributeVector) -> Result<AttributeDiff> {
    check_len(source.len(), target.len())?;
    Ok(AttributeDiff(source.0.iter().zip(&target.0).map(|(&s, &t)| t as i8 - s as i8).collect()))
}

/// `(1 - 2*Y_s) * (1 - |diff|)` elementwise.
pub fn attribute_keep_mask(source: &AttributeVector, diff: &AttributeDiff) -> Result<AttributeKeepMask> {
    check_len(source.len(), diff.len())?;
    Ok(AttributeKeepMask(source.0.iter().zip(&diff.0).map(|(&s, &d)| (1 - 2 * s as i8) * (1 - d.abs())).collect()))
}

/// Index sets of attributes that may not be active together.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExclusiveGroups(Vec<Vec<usize>>);

impl ExclusiveGroups {
    pub fn new(groups: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for g in &groups {
            if g.len() < 2 {
                return Err(Error::Config(format!("exclusive group {g:?} needs at least two members")));
            }
            for &i in g {
                if i >= n {
                    return Err(Error::Config(format!("exclusive group index {i} out of range for n={n}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Config(format!("attribute {i} appears in more than one group")));
                }
            }
        }
        Ok(Self(groups))
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.0
    }

    pub fn is_valid(&self, label: &AttributeVector) -> bool {
        self.0.iter().all(|g| g.iter().filter(|&&i| label.0[i] == 1).count() <= 1)
    }

    /// Every label in `{0,1}^n` that respects the groups, in bit order.
    pub fn valid_labels(&self, n: usize) -> Vec<AttributeVector> {
        assert!(n < 32, "label enumeration limited to n < 32");
        (0..1u64 << n).map(|b| AttributeVector::from_bits(b, n)).filter(|l| self.is_valid(l)).collect()
    }
}

/// Training/inference target sampling around a source label.
#[derive(Debug, Clone)]
pub struct TargetSampler {
    pub p_flip: f64,
    pub groups: ExclusiveGroups,
    pub single_attribute: bool,
}

impl TargetSampler {
    pub fn new(p_flip: f64, groups: ExclusiveGroups, single_attribute: bool) -> Self {
        Self { p_flip, groups, single_attribute }
    }

    /// Keeps one active member per violated group, chosen uniformly; `keep`
    /// wins if it is active in that group.
    fn repair<R: Rng + ?Sized>(&self, values: &mut [u8], keep: Option<usize>, rng: &mut R) {
        for g in &self.groups.0 {
            let active: Vec<usize> = g.iter().copied().filter(|&i| values[i] == 1).collect();
            if active.len() <= 1 {
                continue;
            }
            let winner = match keep {
                Some(k) if active.contains(&k) => k,
                _ => active[rng.random_range(0..active.len())],
            };
            for i in active {
                if i != winner {
                    values[i] = 0;
                }
            }
        }
    }

    /// A valid label differing from `source` in at least one attribute.
    pub fn sample_target<R: Rng + ?Sized>(&self, source: &AttributeVector, rng: &mut R) -> AttributeVector {
        let n = source.len();
        loop {
            let mut values = source.0.clone();
            let mut keep = None;
            if self.single_attribute {
                let i = rng.random_range(0..n);
                values[i] = 1 - values[i];
                keep = Some(i);
            } else {
                for v in values.iter_mut() {
                    if rng.random_bool(self.p_flip) {
                        *v = 1 - *v;
                    }
                }
            }
            self.repair(&mut values, keep, rng);
            if values != source.0 {
                return AttributeVector(values);
            }
        }
    }

    /// Target taking a nonempty subset of the attributes where `reference`
    /// differs from `source` from the reference. `None` when the labels agree.
    pub fn reference_target<R: Rng + ?Sized>(
        &self,
        source: &AttributeVector,
        reference: &AttributeVector,
        rng: &mut R,
    ) -> Option<AttributeVector> {
        let candidates: Vec<usize> = (0..source.len()).filter(|&i| source.0[i] != reference.0[i]).collect();
        if candidates.is_empty() {
            return None;
        }
        let mut chosen: Vec<usize> = if self.single_attribute {
            vec![candidates[rng.random_range(0..candidates.len())]]
        } else {
            candidates.iter().copied().filter(|_| rng.random_bool(self.p_flip)).collect()
        };
        if chosen.is_empty() {
            chosen.push(candidates[rng.random_range(0..candidates.len())]);
        }
        let mut values = source.0.clone();
        for &i in &chosen {
            values[i] = reference.0[i];
        }
        // A partially copied group can collide with the source's active
        // member; copying the whole group from the (valid) reference fixes it.
        for g in &self.groups.0 {
            if g.iter().filter(|&&i| values[i] == 1).count() > 1 {
                for &i in g {
                    values[i] = reference.0[i];
                }
            }
        }
        Some(AttributeVector(values))
    }
}
