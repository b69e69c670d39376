//! Exhaustive verification suites over families of small discrete tables.

use std::collections::BTreeMap;

use mvinfo_core::bounds::{h_minus, h_plus, thm3_upper, BoundInputs, BoundsReport};
use mvinfo_core::datagen::{gen_discrete, random_table, DiscreteSpec};
use mvinfo_core::info::{bayes_error, conditional_entropy, conditional_mutual_info, entropy, mutual_info};
use mvinfo_core::repr::{
    determinism_residuals, enumerate_maps, find_optimal_reprs, pushforward, verify_interchangeability,
    verify_theorem1, verify_theorem2, CheckKind, DeterministicMap, CHECK_TOL,
};
use mvinfo_core::{rng, JointTable, Result};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Every cell weight uniform in `1..=max_weight`.
    Random,
    /// Content/style factor tables from [`gen_discrete`].
    Structured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableFamily {
    pub family: Family,
    pub tables: usize,
    pub max_t: usize,
    pub max_x: usize,
    pub max_s: usize,
    pub max_weight: u64,
}

impl Default for TableFamily {
    fn default() -> Self {
        Self {
            family: Family::Random,
            tables: 500,
            max_t: 3,
            max_x: 5,
            max_s: 5,
            max_weight: 9,
        }
    }
}

impl TableFamily {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.tables == 0 {
            return Err("tables must be positive".into());
        }
        if self.max_t < 2 || self.max_x < 2 || self.max_s < 2 {
            return Err("alphabet size limits must be at least 2".into());
        }
        if self.max_weight == 0 {
            return Err("max_weight must be positive".into());
        }
        Ok(())
    }

    /// Table `index` of the family drawn for `seed`.
    pub fn table(&self, seed: u64, index: usize) -> Result<JointTable> {
        let mut r = rng::derived(seed, &[index as u64]);
        match self.family {
            Family::Random => {
                let t = r.gen_range(2..=self.max_t);
                let x = r.gen_range(2..=self.max_x);
                let s = r.gen_range(2..=self.max_s);
                Ok(random_table(&mut r, t, x, s, self.max_weight)?.0)
            }
            Family::Structured => {
                let t_cap = self.max_t.min(self.max_x).min(self.max_s);
                let t = r.gen_range(2..=t_cap);
                let shared = r.gen_range(1..=(self.max_x / t).min(self.max_s / t));
                let x_style = r.gen_range(1..=self.max_x / (t * shared));
                let s_style = r.gen_range(1..=self.max_s / (t * shared));
                let resolution = 8;
                let spec = DiscreteSpec {
                    t_size: t,
                    shared_style: shared,
                    x_style,
                    s_style,
                    corruption: r.gen_range(0..=resolution) as f64 / resolution as f64,
                    resolution,
                    seed: r.gen(),
                };
                gen_discrete(&spec)
            }
        }
    }
}

/// Aggregate of one named check over a whole suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckTally {
    pub name: String,
    pub kind: CheckKind,
    /// Smallest slack for inequalities, largest residual for equalities.
    pub worst: f64,
    pub evaluations: usize,
    pub failures: usize,
    pub first_failure: Option<usize>,
}

impl CheckTally {
    pub fn pass(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Default)]
struct Tallies(BTreeMap<String, CheckTally>);

impl Tallies {
    fn record(&mut self, name: &str, kind: CheckKind, value: f64, pass: bool, table: usize) {
        let e = self.0.entry(name.to_string()).or_insert_with(|| CheckTally {
            name: name.to_string(),
            kind,
            worst: match kind {
                CheckKind::Equality => 0.0,
                CheckKind::Inequality => f64::INFINITY,
            },
            evaluations: 0,
            failures: 0,
            first_failure: None,
        });
        e.worst = match kind {
            CheckKind::Equality => e.worst.max(value),
            CheckKind::Inequality => e.worst.min(value),
        };
        e.evaluations += 1;
        if !pass {
            e.failures += 1;
            e.first_failure = Some(e.first_failure.map_or(table, |f| f.min(table)));
        }
    }

    fn slack(&mut self, name: &str, slack: f64, table: usize) {
        self.record(name, CheckKind::Inequality, slack, slack >= -CHECK_TOL, table);
    }

    fn residual(&mut self, name: &str, residual: f64, tol: f64, table: usize) {
        self.record(name, CheckKind::Equality, residual, residual <= tol, table);
    }

    fn merge(mut self, other: Tallies) -> Self {
        for (_, t) in other.0 {
            match self.0.get_mut(&t.name) {
                None => {
                    self.0.insert(t.name.clone(), t);
                }
                Some(e) => {
                    e.worst = match e.kind {
                        CheckKind::Equality => e.worst.max(t.worst),
                        CheckKind::Inequality => e.worst.min(t.worst),
                    };
                    e.evaluations += t.evaluations;
                    e.failures += t.failures;
                    e.first_failure = match (e.first_failure, t.first_failure) {
                        (Some(a), Some(b)) => Some(a.min(b)),
                        (a, b) => a.or(b),
                    };
                }
            }
        }
        self
    }
}

/// Per-group result of a suite run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub pass: bool,
    pub checks: Vec<CheckTally>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub family: TableFamily,
    pub groups: Vec<GroupReport>,
    pub skipped_tables: usize,
    pub pass: bool,
}

impl SuiteReport {
    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.group == name)
    }
}

/// Residual tolerance for the encoder-sees-only-X identities.
pub const DETERMINISM_TOL: f64 = 1e-10;

fn finish(seed: u64, family: &TableFamily, groups: BTreeMap<String, Tallies>, skipped: usize) -> SuiteReport {
    let groups: Vec<GroupReport> = groups
        .into_iter()
        .map(|(group, t)| {
            let checks: Vec<CheckTally> = t.0.into_values().collect();
            GroupReport {
                pass: checks.iter().all(CheckTally::pass),
                group,
                checks,
            }
        })
        .collect();
    SuiteReport {
        seed,
        family: family.clone(),
        pass: groups.iter().all(|g| g.pass),
        groups,
        skipped_tables: skipped,
    }
}

type GroupTallies = BTreeMap<String, Tallies>;

fn merge_groups(mut a: GroupTallies, b: GroupTallies) -> GroupTallies {
    for (k, v) in b {
        let cur = a.remove(&k).unwrap_or_default();
        a.insert(k, cur.merge(v));
    }
    a
}

/// Theorem chains, interchangeability and the determinism identities.
pub fn theorem_suite(family: &TableFamily, seed: u64) -> Result<SuiteReport> {
    let per_table = (0..family.tables)
        .into_par_iter()
        .map(|i| -> Result<(GroupTallies, usize)> {
            let table = family.table(seed, i)?;
            let x = table.size(1);
            let reprs = find_optimal_reprs(&table, x)?;
            let mut groups = GroupTallies::new();
            let mut skipped = 0;
            for report in [
                verify_theorem1(&table, &reprs)?,
                verify_theorem2(&table, &reprs)?,
                verify_interchangeability(&table, &reprs)?,
            ] {
                if report.skipped.is_some() {
                    skipped = 1;
                    continue;
                }
                let g = groups.entry(report.theorem.clone()).or_default();
                for c in &report.checks {
                    g.record(&c.name, c.kind, c.value, c.pass, i);
                }
            }
            let mut r = rng::derived(seed, &[i as u64, 1]);
            let map = DeterministicMap::new((0..x).map(|_| r.gen_range(0..x)).collect(), x)?;
            let (zt, zs) = determinism_residuals(&table, &map)?;
            let g = groups.entry("encoder_sees_only_x".into()).or_default();
            g.residual("I(Z;T|X) = 0", zt, DETERMINISM_TOL, i);
            g.residual("I(Z;S|X) = 0", zs, DETERMINISM_TOL, i);
            Ok((groups, skipped))
        })
        .collect::<Result<Vec<_>>>()?;
    let skipped = per_table.iter().map(|p| p.1).sum();
    let groups = per_table
        .into_iter()
        .map(|p| p.0)
        .fold(GroupTallies::new(), merge_groups);
    Ok(finish(seed, family, groups, skipped))
}

/// One row of the bounds table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsRow {
    pub table_id: String,
    pub exact_pe: f64,
    pub loose_lower: f64,
    pub tight_lower: f64,
    pub tight_upper: f64,
    pub loose_upper: f64,
}

pub const BOUNDS_CSV_HEADER: &str = "table_id,exact_pe,loose_lower,tight_lower,tight_upper,loose_upper";

impl BoundsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.table_id, self.exact_pe, self.loose_lower, self.tight_lower, self.tight_upper, self.loose_upper
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsSuiteReport {
    pub suite: SuiteReport,
    pub rows: Vec<BoundsRow>,
}

const T: usize = 0;
const X: usize = 1;
const S: usize = 2;
const Z: usize = 3;

/// Fano links and both Bayes-error bounds on every representation.
pub fn bounds_suite(family: &TableFamily, seed: u64) -> Result<BoundsSuiteReport> {
    let per_table = (0..family.tables)
        .into_par_iter()
        .map(|i| -> Result<(GroupTallies, Vec<BoundsRow>)> {
            let table = family.table(seed, i)?;
            let (t_n, x_n) = (table.size(T), table.size(X));
            let h_t = entropy(&table, &[T])?;
            let i_xs_t = conditional_mutual_info(&table, &[X], &[S], &[T])?;
            let eps = conditional_mutual_info(&table, &[X], &[T], &[S])?;
            let pe_sup = bayes_error(&table, T, &[X])?;
            let ln_t = (t_n as f64).ln();
            let mut groups = GroupTallies::new();

            let fano = groups.entry("fano_sandwich".into()).or_default();
            let mut any = Tallies::default();
            for map in enumerate_maps(x_n, x_n)? {
                let p = pushforward(&table, &map)?;
                let pe = bayes_error(&p, T, &[Z])?;
                let h = conditional_entropy(&p, &[T], &[Z])?;
                let (lo, hi) = (h_minus(pe, t_n)?, h_plus(pe, t_n)?);
                fano.slack("-ln(1-P_e) <= H-(P_e)", lo + (1.0 - pe).ln(), i);
                fano.slack("H-(P_e) <= H(T|Z)", h - lo, i);
                fano.slack("H(T|Z) <= H+(P_e)", hi - h, i);
                fano.slack("H+(P_e) <= ln 2 + P_e ln|T|", 2f64.ln() + pe * ln_t - hi, i);
                fano.slack("-ln(1-P_e) <= H(T|Z)", h + (1.0 - pe).ln(), i);
                let mi = mutual_info(&p, &[Z], &[S])?;
                let i_zx_st = conditional_mutual_info(&p, &[Z], &[X], &[S, T])?;
                let upper = thm3_upper(h_t, i_xs_t, i_zx_st, mi, 0.0, t_n)?;
                any.slack("P_e <= upper(H(T), I(X;S|T), I(Z;X|S,T), I(Z;S))", upper - pe, i);
            }
            groups.insert("any_representation_upper".into(), any);

            let reprs = find_optimal_reprs(&table, x_n)?;
            let report = BoundsReport::compute(BoundInputs {
                h_t,
                i_xs_given_t: i_xs_t,
                i_zx_given_st: 0.0,
                mi: 0.0,
                slack: 0.0,
                t_size: t_n,
                eps_info: eps,
                p_e_sup: pe_sup,
            })?;
            let (loose, tight) = (report.loose, report.tight);
            let ssl = groups.entry("ssl_interval".into()).or_default();
            ssl.slack("tight lower >= loose lower", tight.lower - loose.lower, i);
            ssl.slack("tight upper <= loose upper", loose.upper - tight.upper, i);
            let mut rows = Vec::new();
            for (set_name, set) in [("ssl", &reprs.ssl), ("ssl_min", &reprs.ssl_min)] {
                for m in &set.members {
                    let pe = bayes_error(&pushforward(&table, m)?, T, &[Z])?;
                    ssl.slack(&format!("{set_name}: loose lower <= P_e"), pe - loose.lower, i);
                    ssl.slack(&format!("{set_name}: P_e <= loose upper"), loose.upper - pe, i);
                    ssl.slack(&format!("{set_name}: tight lower <= P_e"), pe - tight.lower, i);
                    ssl.slack(&format!("{set_name}: P_e <= tight upper"), tight.upper - pe, i);
                }
                if set_name == "ssl_min" {
                    let pe = bayes_error(&pushforward(&table, set.representative())?, T, &[Z])?;
                    rows.push(BoundsRow {
                        table_id: format!("{seed}-{i}"),
                        exact_pe: pe,
                        loose_lower: loose.lower,
                        tight_lower: tight.lower,
                        tight_upper: tight.upper,
                        loose_upper: loose.upper,
                    });
                }
            }
            Ok((groups, rows))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut groups = GroupTallies::new();
    for (g, r) in per_table {
        groups = merge_groups(groups, g);
        rows.extend(r);
    }
    Ok(BoundsSuiteReport {
        suite: finish(seed, family, groups, 0),
        rows,
    })
}
