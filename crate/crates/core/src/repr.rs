//! Exhaustive search over deterministic encodings `Z = F(X)`.
//!
//! For a `(T, X, S)` table every map `𝒳 → 𝒵` is scored by `I(Z;T)`,
//! `I(Z;S)`, `H(Z|T)` and `H(Z|S)`. The four optimal sets are
//!
//! * `sup`: maximizers of `I(Z;T)`, and `sup_min` ⊆ `sup` minimizing `H(Z|T)`;
//! * `ssl`: maximizers of `I(Z;S)`, and `ssl_min` ⊆ `ssl` minimizing `H(Z|S)`.
//!
//! Ties are resolved with [`TIE_TOL`]; every set is kept in lexicographic
//! order of the image array, so its first element is the representative no
//! matter how the enumeration was split across threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::info::{
    conditional_entropy, conditional_mutual_info, mutual_info, shannon, txs_axes, Alphabet,
    JointTable,
};

/// Largest number of maps the enumerator will produce.
pub const ENUMERATION_LIMIT: u128 = 10_000_000;

/// Values within this distance of an optimum are ties.
pub const TIE_TOL: f64 = 1e-9;

/// Pass threshold for theorem checks.
pub const CHECK_TOL: f64 = 1e-9;

/// A deterministic encoding of `0..source_size` into `0..z_size`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeterministicMap {
    image: Vec<usize>,
    z_size: usize,
}

impl DeterministicMap {
    pub fn new(image: Vec<usize>, z_size: usize) -> Result<Self> {
        if image.is_empty() {
            return invalid("a map needs a non-empty source alphabet");
        }
        if let Some(z) = image.iter().find(|&&z| z >= z_size) {
            return invalid(format!("image entry {z} is not below z_size {z_size}"));
        }
        Ok(Self { image, z_size })
    }

    pub fn identity(size: usize) -> Self {
        Self {
            image: (0..size).collect(),
            z_size: size,
        }
    }

    pub fn constant(source_size: usize, z_size: usize) -> Self {
        Self {
            image: vec![0; source_size],
            z_size,
        }
    }

    pub fn image(&self) -> &[usize] {
        &self.image
    }

    pub fn source_size(&self) -> usize {
        self.image.len()
    }

    pub fn z_size(&self) -> usize {
        self.z_size
    }

    pub fn apply(&self, x: usize) -> usize {
        self.image[x]
    }

    /// Composes with a permutation of the codomain.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.z_size {
            return invalid("permutation length must equal z_size");
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return invalid("relabeling is not a permutation");
            }
        }
        Ok(Self {
            image: self.image.iter().map(|&z| perm[z]).collect(),
            z_size: self.z_size,
        })
    }
}

/// Number of maps `z_size^x_size`, checked against [`ENUMERATION_LIMIT`].
pub fn map_count(x_size: usize, z_size: usize) -> Result<u64> {
    if x_size == 0 || z_size == 0 {
        return invalid("alphabet sizes must be positive");
    }
    let mut count: u128 = 1;
    for _ in 0..x_size {
        count = count.saturating_mul(z_size as u128);
        if count > ENUMERATION_LIMIT {
            return Err(Error::Capacity {
                count: (z_size as u128).checked_pow(x_size as u32).unwrap_or(u128::MAX),
                limit: ENUMERATION_LIMIT,
            });
        }
    }
    Ok(count as u64)
}

/// The map at position `index` of the lexicographic enumeration.
pub fn map_at(index: u64, x_size: usize, z_size: usize) -> DeterministicMap {
    let mut image = vec![0; x_size];
    let mut rem = index;
    for slot in image.iter_mut().rev() {
        *slot = (rem % z_size as u64) as usize;
        rem /= z_size as u64;
    }
    DeterministicMap { image, z_size }
}

/// Lexicographic stream over all maps.
#[derive(Debug, Clone)]
pub struct MapIter {
    next: u64,
    count: u64,
    x_size: usize,
    z_size: usize,
}

impl Iterator for MapIter {
    type Item = DeterministicMap;

    fn next(&mut self) -> Option<DeterministicMap> {
        if self.next >= self.count {
            return None;
        }
        let m = map_at(self.next, self.x_size, self.z_size);
        self.next += 1;
        Some(m)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.count - self.next) as usize;
        (left, Some(left))
    }
}

impl ExactSizeIterator for MapIter {}

pub fn enumerate_maps(x_size: usize, z_size: usize) -> Result<MapIter> {
    Ok(MapIter {
        next: 0,
        count: map_count(x_size, z_size)?,
        x_size,
        z_size,
    })
}

/// Appends the axis `Z = map(X)` to a `(T, X, S)` table.
pub fn pushforward(table: &JointTable, map: &DeterministicMap) -> Result<JointTable> {
    let (_, x_axis, _) = txs_axes(table)?;
    if table.rank() != 3 {
        return invalid("pushforward expects a table over exactly (T, X, S)");
    }
    if map.source_size() != table.size(x_axis) {
        return invalid(format!(
            "map source size {} differs from |X| = {}",
            map.source_size(),
            table.size(x_axis)
        ));
    }
    let mut axes = table.axes().to_vec();
    axes.push(Alphabet::new("Z", map.z_size())?);
    let inner: usize = axes[x_axis + 1..3].iter().map(|a| a.size).product();
    let zs = map.z_size();
    let mut probs = vec![0.0; table.probs().len() * zs];
    for (cell, &p) in table.probs().iter().enumerate() {
        let x = (cell / inner) % table.size(x_axis);
        probs[cell * zs + map.apply(x)] = p;
    }
    JointTable::new(axes, probs)
}

/// `(I(Z;T|X), I(Z;S|X))` of the pushforward; both vanish for any map.
pub fn determinism_residuals(table: &JointTable, map: &DeterministicMap) -> Result<(f64, f64)> {
    let pushed = pushforward(table, map)?;
    let (t, x, s) = txs_axes(&pushed)?;
    Ok((
        conditional_mutual_info(&pushed, &[3], &[t], &[x])?,
        conditional_mutual_info(&pushed, &[3], &[s], &[x])?,
    ))
}

/// Scores of one map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapScores {
    pub i_zt: f64,
    pub i_zs: f64,
    pub h_z_given_t: f64,
    pub h_z_given_s: f64,
}

/// Pairwise marginals `P(T, X)` and `P(S, X)` used to score maps quickly.
struct Scorer {
    x_size: usize,
    t_size: usize,
    s_size: usize,
    tx: Vec<f64>,
    sx: Vec<f64>,
    h_t: f64,
    h_s: f64,
}

impl Scorer {
    fn new(table: &JointTable) -> Result<Self> {
        let (t, x, s) = txs_axes(table)?;
        if table.rank() != 3 {
            return invalid("representation search expects a table over exactly (T, X, S)");
        }
        let pair = |a: usize| -> Result<Vec<f64>> {
            // Marginal comes back in ascending axis order; reorder to (a, X).
            let (order, m) = table.marginal(&[a, x])?;
            if order[0] == a {
                Ok(m)
            } else {
                let (na, nx) = (table.size(a), table.size(x));
                let mut out = vec![0.0; na * nx];
                for xi in 0..nx {
                    for ai in 0..na {
                        out[ai * nx + xi] = m[xi * na + ai];
                    }
                }
                Ok(out)
            }
        };
        let tx = pair(t)?;
        let sx = pair(s)?;
        let (t_size, s_size, x_size) = (table.size(t), table.size(s), table.size(x));
        let h_t = shannon(&row_sums(&tx, t_size, x_size));
        let h_s = shannon(&row_sums(&sx, s_size, x_size));
        Ok(Self {
            x_size,
            t_size,
            s_size,
            tx,
            sx,
            h_t,
            h_s,
        })
    }

    fn score(&self, map: &DeterministicMap) -> MapScores {
        let zs = map.z_size();
        let push = |joint: &[f64], n: usize| {
            let mut out = vec![0.0; n * zs];
            for a in 0..n {
                for x in 0..self.x_size {
                    out[a * zs + map.apply(x)] += joint[a * self.x_size + x];
                }
            }
            out
        };
        let tz = push(&self.tx, self.t_size);
        let sz = push(&self.sx, self.s_size);
        let mut pz = vec![0.0; zs];
        for (k, p) in tz.iter().enumerate() {
            pz[k % zs] += p;
        }
        let h_z = shannon(&pz);
        let (h_tz, h_sz) = (shannon(&tz), shannon(&sz));
        MapScores {
            i_zt: (self.h_t + h_z - h_tz).max(0.0),
            i_zs: (self.h_s + h_z - h_sz).max(0.0),
            h_z_given_t: (h_tz - self.h_t).max(0.0),
            h_z_given_s: (h_sz - self.h_s).max(0.0),
        }
    }
}

fn row_sums(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows).map(|r| m[r * cols..(r + 1) * cols].iter().sum()).collect()
}

/// Scores of a single map, computed from pairwise marginals.
pub fn score_map(table: &JointTable, map: &DeterministicMap) -> Result<MapScores> {
    let scorer = Scorer::new(table)?;
    if map.source_size() != scorer.x_size {
        return invalid("map source size differs from |X|");
    }
    Ok(scorer.score(map))
}

/// One optimal set, in lexicographic order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprSet {
    pub members: Vec<DeterministicMap>,
    /// Scores of the representative (first member).
    pub achieved: MapScores,
}

impl ReprSet {
    pub fn representative(&self) -> &DeterministicMap {
        &self.members[0]
    }

    pub fn contains(&self, map: &DeterministicMap) -> bool {
        self.members.binary_search(map).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalReprs {
    pub x_size: usize,
    pub z_size: usize,
    pub sup: ReprSet,
    pub sup_min: ReprSet,
    pub ssl: ReprSet,
    pub ssl_min: ReprSet,
}

impl OptimalReprs {
    /// Whether the maxima are guaranteed attainable (`|Z| ≥ |X|`).
    pub fn attainable(&self) -> bool {
        self.z_size >= self.x_size
    }
}

/// Enumerates every map `𝒳 → 𝒵` and extracts the four optimal sets.
pub fn find_optimal_reprs(table: &JointTable, z_size: usize) -> Result<OptimalReprs> {
    let scorer = Scorer::new(table)?;
    let x_size = scorer.x_size;
    let count = map_count(x_size, z_size)?;

    let maxima = (0..count)
        .into_par_iter()
        .map(|i| {
            let s = scorer.score(&map_at(i, x_size, z_size));
            (s.i_zt, s.i_zs)
        })
        .reduce(
            || (f64::NEG_INFINITY, f64::NEG_INFINITY),
            |a, b| (a.0.max(b.0), a.1.max(b.1)),
        );

    // Indexed collection preserves lexicographic order.
    let near_max = |pick: fn(&MapScores) -> f64, best: f64| -> Vec<(DeterministicMap, MapScores)> {
        (0..count)
            .into_par_iter()
            .filter_map(|i| {
                let m = map_at(i, x_size, z_size);
                let s = scorer.score(&m);
                (pick(&s) >= best - TIE_TOL).then_some((m, s))
            })
            .collect()
    };
    let sup = near_max(|s| s.i_zt, maxima.0);
    let ssl = near_max(|s| s.i_zs, maxima.1);

    let minimal = |set: &[(DeterministicMap, MapScores)], pick: fn(&MapScores) -> f64| {
        let best = set.iter().map(|(_, s)| pick(s)).fold(f64::INFINITY, f64::min);
        set.iter()
            .filter(|(_, s)| pick(s) <= best + TIE_TOL)
            .cloned()
            .collect::<Vec<_>>()
    };
    let sup_min = minimal(&sup, |s| s.h_z_given_t);
    let ssl_min = minimal(&ssl, |s| s.h_z_given_s);

    let pack = |set: Vec<(DeterministicMap, MapScores)>| ReprSet {
        achieved: set[0].1,
        members: set.into_iter().map(|(m, _)| m).collect(),
    };
    Ok(OptimalReprs {
        x_size,
        z_size,
        sup: pack(sup),
        sup_min: pack(sup_min),
        ssl: pack(ssl),
        ssl_min: pack(ssl_min),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// `value` is an absolute residual.
    Equality,
    /// `value` is the slack `lhs - rhs`.
    Inequality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub kind: CheckKind,
    pub value: f64,
    pub pass: bool,
    /// Number of set members the check ranged over.
    pub members: usize,
}

impl Check {
    fn equality(name: &str, residual: f64, members: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: CheckKind::Equality,
            value: residual,
            pass: residual <= CHECK_TOL,
            members,
        }
    }

    fn inequality(name: &str, slack: f64, members: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: CheckKind::Inequality,
            value: slack,
            pass: slack >= -CHECK_TOL,
            members,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub theorem: String,
    pub epsilon_info: f64,
    pub checks: Vec<Check>,
    pub pass: bool,
    pub skipped: Option<String>,
}

impl TheoremReport {
    fn finish(theorem: &str, epsilon_info: f64, checks: Vec<Check>) -> Self {
        Self {
            theorem: theorem.to_string(),
            epsilon_info,
            pass: checks.iter().all(|c| c.pass),
            checks,
            skipped: None,
        }
    }

    fn skip(theorem: &str, reprs: &OptimalReprs) -> Self {
        Self {
            theorem: theorem.to_string(),
            epsilon_info: f64::NAN,
            checks: Vec::new(),
            pass: true,
            skipped: Some(format!(
                "|Z| = {} < |X| = {}: maxima may be unattainable",
                reprs.z_size, reprs.x_size
            )),
        }
    }

    pub fn failed(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

/// Exact quantities of a set of representations, each via its pushforward.
fn over<F>(table: &JointTable, set: &ReprSet, f: F) -> Result<Vec<f64>>
where
    F: Fn(&JointTable) -> Result<f64> + Sync,
{
    set.members
        .par_iter()
        .map(|m| f(&pushforward(table, m)?))
        .collect()
}

fn lo(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn hi(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Largest `|a - b|` over all pairs drawn from the two lists.
fn spread(a: &[f64], b: &[f64]) -> f64 {
    (hi(a) - lo(b)).abs().max((hi(b) - lo(a)).abs())
}

fn max_dev(v: &[f64], target: f64) -> f64 {
    v.iter().map(|x| (x - target).abs()).fold(0.0, f64::max)
}

// Axis positions of a pushforward table.
const T: usize = 0;
const X: usize = 1;
const S: usize = 2;
const Z: usize = 3;

fn canonical(table: &JointTable) -> Result<()> {
    if txs_axes(table)? != (T, X, S) || table.rank() != 3 {
        return invalid("theorem checks expect a table with axes ordered (T, X, S)");
    }
    Ok(())
}

/// Task-relevant information chain:
/// `I(X;T) = I(Z^sup;T) = I(Z^sup_min;T) ≥ I(Z^ssl;T) ≥ I(Z^ssl_min;T) ≥ I(X;T) - ε_info`.
pub fn verify_theorem1(table: &JointTable, reprs: &OptimalReprs) -> Result<TheoremReport> {
    const NAME: &str = "task_relevant_information";
    canonical(table)?;
    if !reprs.attainable() {
        return Ok(TheoremReport::skip(NAME, reprs));
    }
    let i_xt = mutual_info(table, &[X], &[T])?;
    let eps = conditional_mutual_info(table, &[X], &[T], &[S])?;
    let i_zt = |p: &JointTable| mutual_info(p, &[Z], &[T]);
    let sup = over(table, &reprs.sup, i_zt)?;
    let sup_min = over(table, &reprs.sup_min, i_zt)?;
    let ssl = over(table, &reprs.ssl, i_zt)?;
    let ssl_min = over(table, &reprs.ssl_min, i_zt)?;
    let checks = vec![
        Check::equality("I(X;T) = I(Z^sup;T)", max_dev(&sup, i_xt), sup.len()),
        Check::equality(
            "I(Z^sup;T) = I(Z^sup_min;T)",
            spread(&sup, &sup_min),
            sup.len() + sup_min.len(),
        ),
        Check::inequality(
            "I(Z^sup_min;T) >= I(Z^ssl;T)",
            lo(&sup_min) - hi(&ssl),
            sup_min.len() + ssl.len(),
        ),
        Check::inequality(
            "I(Z^ssl;T) >= I(Z^ssl_min;T)",
            lo(&ssl) - hi(&ssl_min),
            ssl.len() + ssl_min.len(),
        ),
        Check::inequality(
            "I(Z^ssl_min;T) >= I(X;T) - eps_info",
            lo(&ssl_min) - (i_xt - eps),
            ssl_min.len(),
        ),
    ];
    Ok(TheoremReport::finish(NAME, eps, checks))
}

/// Task-irrelevant information chain:
/// `I(Z^ssl;X|T) = I(X;S|T) + I(Z^ssl;X|S,T) ≥ I(Z^ssl_min;X|T) = I(X;S|T) ≥ I(Z^sup_min;X|T) = 0`.
pub fn verify_theorem2(table: &JointTable, reprs: &OptimalReprs) -> Result<TheoremReport> {
    const NAME: &str = "compression_gap";
    canonical(table)?;
    if !reprs.attainable() {
        return Ok(TheoremReport::skip(NAME, reprs));
    }
    let eps = conditional_mutual_info(table, &[X], &[T], &[S])?;
    let gap = conditional_mutual_info(table, &[X], &[S], &[T])?;
    let i_zx_t = |p: &JointTable| conditional_mutual_info(p, &[Z], &[X], &[T]);
    let split = over(table, &reprs.ssl, |p| {
        let lhs = conditional_mutual_info(p, &[Z], &[X], &[T])?;
        let superfluous = conditional_mutual_info(p, &[Z], &[X], &[S, T])?;
        Ok((lhs - (gap + superfluous)).abs())
    })?;
    let ssl = over(table, &reprs.ssl, i_zx_t)?;
    let ssl_min = over(table, &reprs.ssl_min, i_zx_t)?;
    let sup_min = over(table, &reprs.sup_min, i_zx_t)?;
    let checks = vec![
        Check::equality(
            "I(Z^ssl;X|T) = I(X;S|T) + I(Z^ssl;X|S,T)",
            hi(&split),
            split.len(),
        ),
        Check::inequality(
            "I(Z^ssl;X|T) >= I(Z^ssl_min;X|T)",
            lo(&ssl) - hi(&ssl_min),
            ssl.len() + ssl_min.len(),
        ),
        Check::equality("I(Z^ssl_min;X|T) = I(X;S|T)", max_dev(&ssl_min, gap), ssl_min.len()),
        Check::inequality("I(X;S|T) >= I(Z^sup_min;X|T)", gap - hi(&sup_min), sup_min.len()),
        Check::equality("I(Z^sup_min;X|T) = 0", max_dev(&sup_min, 0.0), sup_min.len()),
    ];
    Ok(TheoremReport::finish(NAME, eps, checks))
}

/// Among the maximizers of `I(Z;T)`, minimizing `H(Z|T)` and minimizing
/// `I(Z;X)` select the same maps.
pub fn verify_interchangeability(
    table: &JointTable,
    reprs: &OptimalReprs,
) -> Result<TheoremReport> {
    const NAME: &str = "minimality_interchangeable";
    canonical(table)?;
    if !reprs.attainable() {
        return Ok(TheoremReport::skip(NAME, reprs));
    }
    let eps = conditional_mutual_info(table, &[X], &[T], &[S])?;
    let pairs = reprs
        .sup
        .members
        .par_iter()
        .map(|m| {
            let p = pushforward(table, m)?;
            Ok((conditional_entropy(&p, &[Z], &[T])?, mutual_info(&p, &[Z], &[X])?))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let select = |pick: fn(&(f64, f64)) -> f64| {
        let best = pairs.iter().map(pick).fold(f64::INFINITY, f64::min);
        pairs
            .iter()
            .map(|p| pick(p) <= best + TIE_TOL)
            .collect::<Vec<bool>>()
    };
    let by_entropy = select(|p| p.0);
    let by_info = select(|p| p.1);
    let mismatched = by_entropy.iter().zip(&by_info).filter(|(a, b)| a != b).count();
    let offsets: Vec<f64> = pairs.iter().map(|(h, i)| h - i).collect();
    let checks = vec![
        Check::equality(
            "argmin H(Z|T) = argmin I(Z;X) over I(Z;T) maximizers",
            mismatched as f64,
            pairs.len(),
        ),
        Check::equality(
            "H(Z|T) - I(Z;X) constant over I(Z;T) maximizers",
            hi(&offsets) - lo(&offsets),
            pairs.len(),
        ),
    ];
    Ok(TheoremReport::finish(NAME, eps, checks))
}
