//! Exact information-theoretic quantities over finite joint distributions.
//!
//! Everything is measured in nats. A [`JointTable`] is a dense probability
//! tensor over two to four finite alphabets; axes are addressed by their
//! position in the table. Marginals are obtained by summing out the axes
//! that are not requested, and every mutual-information quantity is reduced
//! to entropies of marginals:
//!
//! | Quantity | Identity |
//! |----------|----------|
//! | `H(A|B)` | `H(A,B) - H(B)` |
//! | `I(A;B)` | `H(A) + H(B) - H(A,B)` |
//! | `I(A;B|C)` | `H(A,C) + H(B,C) - H(A,B,C) - H(C)` |
//! | `I(A;B;C)` | `I(A;B) - I(A;B|C)` |
//!
//! The Bayes error of predicting a label axis from a set of feature axes is
//! `1 - Σ_z max_t P(t, z)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Tolerance on the total mass of a table.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Negative information values above `-CLAMP_TOL` are rounding noise and
/// are clamped to zero.
pub const CLAMP_TOL: f64 = 1e-12;

const MAX_AXES: usize = 4;
const MIN_AXES: usize = 2;

/// A named finite sample space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    pub name: String,
    pub size: usize,
}

impl Alphabet {
    pub fn new(name: impl Into<String>, size: usize) -> Result<Self> {
        if size == 0 {
            return invalid("alphabet size must be at least 1");
        }
        Ok(Self {
            name: name.into(),
            size,
        })
    }
}

/// Dense joint probability table, row-major with the last axis fastest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointTable {
    axes: Vec<Alphabet>,
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTable {
    axes: Vec<Alphabet>,
    probs: Vec<f64>,
}

impl<'de> Deserialize<'de> for JointTable {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let raw = RawTable::deserialize(de)?;
        JointTable::new(raw.axes, raw.probs).map_err(serde::de::Error::custom)
    }
}

impl JointTable {
    /// Builds a table from explicit probabilities, validating shape and mass.
    pub fn new(axes: Vec<Alphabet>, probs: Vec<f64>) -> Result<Self> {
        Self::check_axes(&axes)?;
        let cells: usize = axes.iter().map(|a| a.size).product();
        if probs.len() != cells {
            return invalid(format!(
                "expected {cells} probabilities for the given axes, got {}",
                probs.len()
            ));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return invalid(format!("probabilities must be finite and nonnegative, found {p}"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return invalid(format!("probabilities sum to {total}, expected 1"));
        }
        Ok(Self { axes, probs })
    }

    /// Builds a table from nonnegative integer weights, normalizing by their sum.
    pub fn from_weights(axes: Vec<Alphabet>, weights: &[u64]) -> Result<Self> {
        let total: u64 = weights.iter().sum();
        if total == 0 {
            return invalid("weights sum to zero");
        }
        let probs = weights.iter().map(|&w| w as f64 / total as f64).collect();
        Self::new(axes, probs)
    }

    fn check_axes(axes: &[Alphabet]) -> Result<()> {
        if axes.len() < MIN_AXES || axes.len() > MAX_AXES {
            return invalid(format!(
                "a joint table has {MIN_AXES} to {MAX_AXES} axes, got {}",
                axes.len()
            ));
        }
        if axes.iter().any(|a| a.size == 0) {
            return invalid("alphabet size must be at least 1");
        }
        Ok(())
    }

    pub fn axes(&self) -> &[Alphabet] {
        &self.axes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn rank(&self) -> usize {
        self.axes.len()
    }

    pub fn size(&self, axis: usize) -> usize {
        self.axes[axis].size
    }

    /// Position of the axis with the given name.
    pub fn axis(&self, name: &str) -> Option<usize> {
        self.axes.iter().position(|a| a.name == name)
    }

    /// Like [`JointTable::axis`] but reports a missing name as an error.
    pub fn require_axis(&self, name: &str) -> Result<usize> {
        self.axis(name)
            .ok_or_else(|| Error::InvalidArgument(format!("table has no axis named {name:?}")))
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.rank()];
        for k in (0..self.rank().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.axes[k + 1].size;
        }
        strides
    }

    /// Probability at one cell, given one symbol per axis.
    pub fn get(&self, index: &[usize]) -> f64 {
        let offset: usize = index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum();
        self.probs[offset]
    }

    fn check_subset(&self, axes: &[usize]) -> Result<()> {
        for (k, &a) in axes.iter().enumerate() {
            if a >= self.rank() {
                return invalid(format!("axis {a} out of range for a rank-{} table", self.rank()));
            }
            if axes[..k].contains(&a) {
                return invalid(format!("axis {a} listed twice"));
            }
        }
        Ok(())
    }

    /// Marginal over `axes` (in ascending axis order), flattened row-major.
    ///
    /// Returns the sorted axis list alongside the marginal.
    pub fn marginal(&self, axes: &[usize]) -> Result<(Vec<usize>, Vec<f64>)> {
        self.check_subset(axes)?;
        let mut keep: Vec<usize> = axes.to_vec();
        keep.sort_unstable();
        let size: usize = keep.iter().map(|&a| self.axes[a].size).product();
        let mut out = vec![0.0; size];
        if keep.is_empty() {
            out[0] = self.probs.iter().sum();
            return Ok((keep, out));
        }
        // Stride of each table axis inside the marginal (0 when summed out).
        let mut mstride = vec![0usize; self.rank()];
        let mut acc = 1;
        for &a in keep.iter().rev() {
            mstride[a] = acc;
            acc *= self.axes[a].size;
        }
        let mut coord = vec![0usize; self.rank()];
        let mut target = 0usize;
        for &p in &self.probs {
            out[target] += p;
            // Odometer increment, last axis fastest.
            for k in (0..self.rank()).rev() {
                coord[k] += 1;
                target += mstride[k];
                if coord[k] < self.axes[k].size {
                    break;
                }
                target -= mstride[k] * coord[k];
                coord[k] = 0;
            }
        }
        Ok((keep, out))
    }

    /// Serializes to the `{"axes": [...], "probs": [...]}` format.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// `-Σ p ln p` with `0 ln 0 = 0`.
pub fn shannon(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

fn joint_entropy(table: &JointTable, axes: &[usize]) -> Result<f64> {
    if axes.is_empty() {
        return Ok(0.0);
    }
    let (_, m) = table.marginal(axes)?;
    Ok(shannon(&m))
}

fn union(sets: &[&[usize]]) -> Vec<usize> {
    sets.iter().flat_map(|s| s.iter().copied()).collect()
}

fn disjoint(sets: &[&[usize]]) -> Result<()> {
    for (i, a) in sets.iter().enumerate() {
        for b in &sets[i + 1..] {
            if let Some(x) = a.iter().find(|x| b.contains(x)) {
                return invalid(format!("axis {x} appears in more than one argument"));
            }
        }
    }
    Ok(())
}

fn nonempty(axes: &[usize], what: &str) -> Result<()> {
    if axes.is_empty() {
        return invalid(format!("{what} axis set must be non-empty"));
    }
    Ok(())
}

fn clamp_nonnegative(value: f64, what: &str) -> Result<f64> {
    if value >= 0.0 {
        Ok(value)
    } else if value >= -CLAMP_TOL {
        Ok(0.0)
    } else {
        Err(Error::Consistency(format!("{what} evaluated to {value:e} < 0")))
    }
}

/// Entropy of the marginal on `axes`.
pub fn entropy(table: &JointTable, axes: &[usize]) -> Result<f64> {
    nonempty(axes, "entropy")?;
    joint_entropy(table, axes)
}

/// `H(target | given)`.
pub fn conditional_entropy(table: &JointTable, target: &[usize], given: &[usize]) -> Result<f64> {
    nonempty(target, "target")?;
    disjoint(&[target, given])?;
    let h = joint_entropy(table, &union(&[target, given]))? - joint_entropy(table, given)?;
    clamp_nonnegative(h, "conditional entropy")
}

/// `I(a; b)`.
pub fn mutual_info(table: &JointTable, a: &[usize], b: &[usize]) -> Result<f64> {
    conditional_mutual_info(table, a, b, &[])
}

/// `I(a; b | given)`.
pub fn conditional_mutual_info(
    table: &JointTable,
    a: &[usize],
    b: &[usize],
    given: &[usize],
) -> Result<f64> {
    nonempty(a, "first")?;
    nonempty(b, "second")?;
    disjoint(&[a, b, given])?;
    let i = joint_entropy(table, &union(&[a, given]))?
        + joint_entropy(table, &union(&[b, given]))?
        - joint_entropy(table, &union(&[a, b, given]))?
        - joint_entropy(table, given)?;
    clamp_nonnegative(i, "mutual information")
}

/// Interaction information `I(a;b;c) = I(a;b) - I(a;b|c)`; may be negative.
pub fn interaction_info(table: &JointTable, a: &[usize], b: &[usize], c: &[usize]) -> Result<f64> {
    nonempty(c, "third")?;
    disjoint(&[a, b, c])?;
    Ok(mutual_info(table, a, b)? - conditional_mutual_info(table, a, b, c)?)
}

/// Bayes error of predicting `label` from `features`: `1 - Σ_z max_t P(t, z)`.
///
/// Feature configurations with zero mass contribute nothing.
pub fn bayes_error(table: &JointTable, label: usize, features: &[usize]) -> Result<f64> {
    disjoint(&[&[label], features])?;
    let mut axes = vec![label];
    axes.extend_from_slice(features);
    let (order, joint) = table.marginal(&axes)?;
    if joint.iter().sum::<f64>() <= 0.0 {
        return invalid("table carries no probability mass");
    }
    let t_size = table.size(label);
    let rest = joint.len() / t_size;
    // Position of the label axis inside the sorted marginal decides strides.
    let lpos = order.iter().position(|&a| a == label).unwrap();
    let inner: usize = order[lpos + 1..].iter().map(|&a| table.size(a)).product();
    let mut correct = 0.0;
    for z in 0..rest {
        let (outer, low) = (z / inner, z % inner);
        let base = outer * t_size * inner + low;
        let best = (0..t_size)
            .map(|t| joint[base + t * inner])
            .fold(0.0_f64, f64::max);
        correct += best;
    }
    let pe = 1.0 - correct;
    let ceiling = 1.0 - 1.0 / t_size as f64;
    if pe < -CLAMP_TOL || pe > ceiling + CLAMP_TOL {
        return Err(Error::Consistency(format!(
            "Bayes error {pe} outside [0, {ceiling}]"
        )));
    }
    Ok(pe.clamp(0.0, ceiling))
}

/// Named information quantities for one table, with the axes they came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InfoReport {
    pub table: String,
    pub quantities: BTreeMap<String, f64>,
    pub provenance: BTreeMap<String, String>,
}

impl InfoReport {
    pub fn new(table: impl Into<String>) -> Self {
        Self {
            table: table.into(),
            ..Self::default()
        }
    }

    pub fn record(&mut self, name: &str, value: f64, axes: &str) {
        self.quantities.insert(name.to_string(), value);
        self.provenance.insert(name.to_string(), axes.to_string());
    }

    /// Summary of a `(T, X, S)` table: entropies, pairwise and conditional
    /// information, interaction information and the Bayes error of T from X.
    pub fn for_txs(name: &str, table: &JointTable) -> Result<Self> {
        let (t, x, s) = txs_axes(table)?;
        let mut r = Self::new(name);
        r.record("H(T)", entropy(table, &[t])?, "T");
        r.record("H(X)", entropy(table, &[x])?, "X");
        r.record("H(S)", entropy(table, &[s])?, "S");
        r.record("I(X;T)", mutual_info(table, &[x], &[t])?, "X;T");
        r.record("I(X;S)", mutual_info(table, &[x], &[s])?, "X;S");
        r.record("I(X;T|S)", conditional_mutual_info(table, &[x], &[t], &[s])?, "X;T|S");
        r.record("I(X;S|T)", conditional_mutual_info(table, &[x], &[s], &[t])?, "X;S|T");
        r.record("I(X;S;T)", interaction_info(table, &[x], &[s], &[t])?, "X;S;T");
        r.record("P_e(T|X)", bayes_error(table, t, &[x])?, "T|X");
        Ok(r)
    }
}

/// Positions of the `T`, `X` and `S` axes of a table.
pub fn txs_axes(table: &JointTable) -> Result<(usize, usize, usize)> {
    Ok((
        table.require_axis("T")?,
        table.require_axis("X")?,
        table.require_axis("S")?,
    ))
}
