//! Selective subgroup sampling.
//!
//! Each class `i` has `G` candidate subgroups of `K` generated samples. Every
//! subgroup is summarized by the unit-normalized mean of its features
//! (`c[i][g]`), and each class by the unit-normalized mean of `K_i` real
//! features (`r[i]`). One subgroup per class is chosen by minimizing
//!
//! ```text
//! L(g) = α Σ_i log(1 - cos(c[i][g_i], r[i]))
//!      - β / ((C-1) G) Σ_i Σ_{j≠i} Σ_{h=1..G} log(1 - cos(c[i][g_i], c[j][h]))
//! ```
//!
//! with every `1 - cos` clamped to `[floor, 2]`. The repulsion sum runs over
//! *all* candidates of the other classes, so `L` splits into independent
//! per-class terms and the per-class argmin is the global minimum.
//!
//! Subgroup indices are 0-based throughout.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::FeatureExtractor;
use crate::denoiser::DenoiserParams;
use crate::diffusion::{sample, DiffusionError};
use crate::math::{cosine_similarity, mean_vector, norm, MathError, Rng};
use crate::schedule::NoiseSchedule;

/// Mean-feature norms at or below this cannot be normalized.
pub const DEGENERATE_NORM: f64 = 1e-10;
pub const DEFAULT_CLAMP_FLOOR: f64 = 1e-9;
/// Largest `G^C` the exhaustive search accepts.
pub const BRUTEFORCE_LIMIT: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("degenerate centroid: mean feature norm {norm:e}")]
    DegenerateCentroid { norm: f64 },
    #[error("requested {requested} samples but only {available} available")]
    NotEnoughSamples { requested: usize, available: usize },
    #[error("search space G^C = {groups}^{classes} exceeds {BRUTEFORCE_LIMIT}")]
    SearchSpaceTooLarge { groups: usize, classes: usize },
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),
    #[error("invalid selection parameters: {0}")]
    InvalidParams(String),
    #[error("invalid pool: {0}")]
    InvalidPool(String),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Csv(#[from] crate::io::CsvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionParams {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "default_floor")]
    pub clamp_floor: f64,
}

fn default_floor() -> f64 {
    DEFAULT_CLAMP_FLOOR
}

impl SelectionParams {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            clamp_floor: DEFAULT_CLAMP_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<(), SelectionError> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(SelectionError::InvalidParams(format!(
                "alpha and beta must be > 0 (got {}, {})",
                self.alpha, self.beta
            )));
        }
        if !(self.clamp_floor > 0.0 && self.clamp_floor < 2.0) {
            return Err(SelectionError::InvalidParams(format!(
                "clamp floor must lie in (0, 2), got {}",
                self.clamp_floor
            )));
        }
        Ok(())
    }
}

/// Unit-normalized mean of equally sized feature vectors.
fn normalized_mean(features: &[Vec<f64>]) -> Result<Vec<f64>, SelectionError> {
    if features.is_empty() {
        return Err(SelectionError::NotEnoughSamples {
            requested: 1,
            available: 0,
        });
    }
    let mean = mean_vector(features);
    let n = norm(&mean);
    if !(n > DEGENERATE_NORM) {
        return Err(SelectionError::DegenerateCentroid { norm: n });
    }
    Ok(mean.iter().map(|v| v / n).collect())
}

/// Reference centroid from `k_real` features drawn uniformly without replacement.
pub fn real_centroid(
    features: &[Vec<f64>],
    k_real: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>, SelectionError> {
    if k_real == 0 || k_real > features.len() {
        return Err(SelectionError::NotEnoughSamples {
            requested: k_real,
            available: features.len(),
        });
    }
    let chosen: Vec<Vec<f64>> = rng
        .sample_indices(features.len(), k_real)
        .into_iter()
        .map(|i| features[i].clone())
        .collect();
    normalized_mean(&chosen)
}

pub fn subgroup_centroid(subgroup: &[Vec<f64>]) -> Result<Vec<f64>, SelectionError> {
    normalized_mean(subgroup)
}

/// One candidate subgroup: its member features and, when generated here,
/// the member latents.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Subgroup {
    pub features: Vec<Vec<f64>>,
    pub latents: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    real_centroids: Vec<Vec<f64>>,
    centroids: Vec<Vec<Vec<f64>>>,
    subgroups: Vec<Vec<Subgroup>>,
}

fn check_unit(v: &[f64], what: &str) -> Result<(), SelectionError> {
    if (norm(v) - 1.0).abs() > 1e-10 {
        return Err(SelectionError::InvalidPool(format!("{what} is not unit norm")));
    }
    Ok(())
}

impl CandidatePool {
    /// Pool from precomputed unit centroids, `centroids[class][group]`.
    pub fn from_centroids(
        real_centroids: Vec<Vec<f64>>,
        centroids: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self, SelectionError> {
        let subgroups = centroids
            .iter()
            .map(|row| vec![Subgroup::default(); row.len()])
            .collect();
        let pool = Self {
            real_centroids,
            centroids,
            subgroups,
        };
        pool.validate()?;
        Ok(pool)
    }

    /// Pool whose candidate centroids are computed from member features.
    pub fn from_subgroups(
        real_centroids: Vec<Vec<f64>>,
        subgroups: Vec<Vec<Subgroup>>,
    ) -> Result<Self, SelectionError> {
        let centroids = subgroups
            .iter()
            .map(|row| row.iter().map(|s| subgroup_centroid(&s.features)).collect())
            .collect::<Result<Vec<Vec<_>>, _>>()?;
        let pool = Self {
            real_centroids,
            centroids,
            subgroups,
        };
        pool.validate()?;
        Ok(pool)
    }

    fn validate(&self) -> Result<(), SelectionError> {
        let c = self.real_centroids.len();
        if c == 0 || self.centroids.len() != c {
            return Err(SelectionError::InvalidPool(format!(
                "{} reference centroids for {} candidate classes",
                c,
                self.centroids.len()
            )));
        }
        let g = self.centroids[0].len();
        if g == 0 || self.centroids.iter().any(|row| row.len() != g) {
            return Err(SelectionError::InvalidPool(
                "every class needs the same number G >= 1 of subgroups".into(),
            ));
        }
        let dim = self.real_centroids[0].len();
        for (i, r) in self.real_centroids.iter().enumerate() {
            if r.len() != dim {
                return Err(SelectionError::InvalidPool("centroid dimensions differ".into()));
            }
            check_unit(r, &format!("reference centroid {i}"))?;
        }
        for (i, row) in self.centroids.iter().enumerate() {
            for (h, cent) in row.iter().enumerate() {
                if cent.len() != dim {
                    return Err(SelectionError::InvalidPool("centroid dimensions differ".into()));
                }
                check_unit(cent, &format!("candidate centroid ({i}, {h})"))?;
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.real_centroids.len()
    }

    pub fn n_groups(&self) -> usize {
        self.centroids[0].len()
    }

    pub fn dim(&self) -> usize {
        self.real_centroids[0].len()
    }

    pub fn real_centroids(&self) -> &[Vec<f64>] {
        &self.real_centroids
    }

    pub fn centroid(&self, class_id: usize, group: usize) -> &[f64] {
        &self.centroids[class_id][group]
    }

    pub fn subgroup(&self, class_id: usize, group: usize) -> &Subgroup {
        &self.subgroups[class_id][group]
    }

    /// Same candidates, new reference centroids.
    pub fn with_real_centroids(&self, real_centroids: Vec<Vec<f64>>) -> Result<Self, SelectionError> {
        let pool = Self {
            real_centroids,
            centroids: self.centroids.clone(),
            subgroups: self.subgroups.clone(),
        };
        pool.validate()?;
        Ok(pool)
    }

    /// Only the first `n_groups` candidates of every class.
    pub fn truncated(&self, n_groups: usize) -> Result<Self, SelectionError> {
        if n_groups == 0 || n_groups > self.n_groups() {
            return Err(SelectionError::InvalidPool(format!(
                "cannot keep {n_groups} of {} groups",
                self.n_groups()
            )));
        }
        Ok(Self {
            real_centroids: self.real_centroids.clone(),
            centroids: self.centroids.iter().map(|r| r[..n_groups].to_vec()).collect(),
            subgroups: self.subgroups.iter().map(|r| r[..n_groups].to_vec()).collect(),
        })
    }

    /// Member latents of the chosen subgroup for every class.
    pub fn selected_latents(&self, assignment: &[usize]) -> Vec<Vec<Vec<f64>>> {
        assignment
            .iter()
            .enumerate()
            .map(|(i, &g)| self.subgroups[i][g].latents.clone())
            .collect()
    }

    /// CSV `kind,class,subgroup,c_1..c_D`; `kind` is `real` (empty subgroup)
    /// or `candidate`.
    pub fn write_centroids_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(out);
        write!(out, "kind,class,subgroup")?;
        for k in 1..=self.dim() {
            write!(out, ",c_{k}")?;
        }
        writeln!(out)?;
        for (i, r) in self.real_centroids.iter().enumerate() {
            write!(out, "real,{i},")?;
            write_values(&mut out, r)?;
        }
        for (i, row) in self.centroids.iter().enumerate() {
            for (h, c) in row.iter().enumerate() {
                write!(out, "candidate,{i},{h}")?;
                write_values(&mut out, c)?;
            }
        }
        out.flush()
    }

    /// CSV `class,subgroup,member,f_1..f_D,z_1..z_d`.
    pub fn write_members_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(out);
        let first = &self.subgroups[0][0];
        let fdim = first.features.first().map_or(0, Vec::len);
        let zdim = first.latents.first().map_or(0, Vec::len);
        write!(out, "class,subgroup,member")?;
        for k in 1..=fdim {
            write!(out, ",f_{k}")?;
        }
        for k in 1..=zdim {
            write!(out, ",z_{k}")?;
        }
        writeln!(out)?;
        for (i, row) in self.subgroups.iter().enumerate() {
            for (h, s) in row.iter().enumerate() {
                for (m, f) in s.features.iter().enumerate() {
                    write!(out, "{i},{h},{m}")?;
                    for v in f.iter().chain(s.latents.get(m).into_iter().flatten()) {
                        write!(out, ",{v}")?;
                    }
                    writeln!(out)?;
                }
            }
        }
        out.flush()
    }

    /// Rebuilds a pool from [`Self::write_centroids_csv`] and
    /// [`Self::write_members_csv`] output. Candidate centroids are recomputed
    /// from member features and must agree with the stored ones to 1e-12.
    pub fn read_csv<R1: BufRead, R2: BufRead>(centroids: R1, members: R2) -> Result<Self, SelectionError> {
        let mut reader = csv::Reader::from_reader(centroids);
        let mut real: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut stored: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(crate::io::CsvError::from)?;
            let class = parse_usize(rec.get(1), line)?;
            let values = parse_floats(rec.iter().skip(3), line)?;
            match rec.get(0) {
                Some("real") => {
                    real.insert(class, values);
                }
                Some("candidate") => {
                    stored.insert((class, parse_usize(rec.get(2), line)?), values);
                }
                other => {
                    return Err(SelectionError::InvalidPool(format!(
                        "line {}: unknown kind {other:?}",
                        line + 2
                    )))
                }
            }
        }

        let mut reader = csv::Reader::from_reader(members);
        let headers = reader.headers().map_err(crate::io::CsvError::from)?.clone();
        let fdim = headers.iter().filter(|h| h.starts_with("f_")).count();
        let mut groups: BTreeMap<(usize, usize), Subgroup> = BTreeMap::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(crate::io::CsvError::from)?;
            let key = (parse_usize(rec.get(0), line)?, parse_usize(rec.get(1), line)?);
            let values = parse_floats(rec.iter().skip(3), line)?;
            let entry = groups.entry(key).or_default();
            entry.features.push(values[..fdim].to_vec());
            if values.len() > fdim {
                entry.latents.push(values[fdim..].to_vec());
            }
        }

        let n_classes = real.len();
        let n_groups = stored.keys().filter(|(c, _)| *c == 0).count();
        let mut subgroups = Vec::with_capacity(n_classes);
        for i in 0..n_classes {
            let mut row = Vec::with_capacity(n_groups);
            for h in 0..n_groups {
                row.push(groups.remove(&(i, h)).ok_or_else(|| {
                    SelectionError::InvalidPool(format!("missing members for ({i}, {h})"))
                })?);
            }
            subgroups.push(row);
        }
        let real_centroids = (0..n_classes)
            .map(|i| {
                real.remove(&i)
                    .ok_or_else(|| SelectionError::InvalidPool(format!("missing reference centroid {i}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let pool = Self::from_subgroups(real_centroids, subgroups)?;
        for ((i, h), c) in &stored {
            let recomputed = pool.centroids.get(*i).and_then(|r| r.get(*h)).ok_or_else(|| {
                SelectionError::InvalidPool(format!("centroid ({i}, {h}) has no members"))
            })?;
            if recomputed.iter().zip(c).any(|(a, b)| (a - b).abs() > 1e-12) {
                return Err(SelectionError::InvalidPool(format!(
                    "stored centroid ({i}, {h}) disagrees with its members"
                )));
            }
        }
        Ok(pool)
    }
}

fn write_values<W: Write>(out: &mut W, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        write!(out, ",{v}")?;
    }
    writeln!(out)
}

fn parse_usize(field: Option<&str>, line: usize) -> Result<usize, SelectionError> {
    field
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| SelectionError::InvalidPool(format!("line {}: bad index", line + 2)))
}

fn parse_floats<'a, I: Iterator<Item = &'a str>>(fields: I, line: usize) -> Result<Vec<f64>, SelectionError> {
    fields
        .map(|f| {
            f.parse::<f64>()
                .map_err(|_| SelectionError::InvalidPool(format!("line {}: bad value {f:?}", line + 2)))
        })
        .collect()
}

/// `log(clamp(1 - cos(a, b), floor, 2))`
fn log_gap(a: &[f64], b: &[f64], floor: f64) -> Result<f64, SelectionError> {
    Ok((1.0 - cosine_similarity(a, b)?).clamp(floor, 2.0).ln())
}

/// The additive contribution of class `i` choosing subgroup `g`.
pub fn class_contribution(
    pool: &CandidatePool,
    class_id: usize,
    group: usize,
    params: &SelectionParams,
) -> Result<f64, SelectionError> {
    let c = pool.centroid(class_id, group);
    let attract = params.alpha * log_gap(c, &pool.real_centroids[class_id], params.clamp_floor)?;
    let n_classes = pool.n_classes();
    if n_classes == 1 {
        return Ok(attract);
    }
    let mut repel = 0.0;
    for j in (0..n_classes).filter(|&j| j != class_id) {
        for other in &pool.centroids[j] {
            repel += log_gap(c, other, params.clamp_floor)?;
        }
    }
    let weight = params.beta / ((n_classes - 1) * pool.n_groups()) as f64;
    Ok(attract - weight * repel)
}

fn check_assignment(pool: &CandidatePool, assignment: &[usize]) -> Result<(), SelectionError> {
    if assignment.len() != pool.n_classes() {
        return Err(SelectionError::InvalidAssignment(format!(
            "{} indices for {} classes",
            assignment.len(),
            pool.n_classes()
        )));
    }
    if let Some(&g) = assignment.iter().find(|&&g| g >= pool.n_groups()) {
        return Err(SelectionError::InvalidAssignment(format!(
            "index {g} out of range for G = {}",
            pool.n_groups()
        )));
    }
    Ok(())
}

pub fn selection_objective(
    pool: &CandidatePool,
    assignment: &[usize],
    params: &SelectionParams,
) -> Result<f64, SelectionError> {
    params.validate()?;
    check_assignment(pool, assignment)?;
    assignment
        .iter()
        .enumerate()
        .map(|(i, &g)| class_contribution(pool, i, g, params))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionAssignment {
    /// Chosen subgroup per class (0-based).
    pub groups: Vec<usize>,
    pub objective_value: f64,
}

impl SelectionAssignment {
    pub fn new(pool: &CandidatePool, groups: Vec<usize>, params: &SelectionParams) -> Result<Self, SelectionError> {
        let objective_value = selection_objective(pool, &groups, params)?;
        Ok(Self {
            groups,
            objective_value,
        })
    }

    /// JSON `{"chosen": {"<class>": <subgroup>, ...}, "objective": <value>}`.
    pub fn to_json(&self) -> serde_json::Value {
        let chosen: BTreeMap<String, usize> = self
            .groups
            .iter()
            .enumerate()
            .map(|(i, &g)| (i.to_string(), g))
            .collect();
        serde_json::json!({ "chosen": chosen, "objective": self.objective_value })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self, SelectionError> {
        let bad = |m: &str| SelectionError::InvalidAssignment(m.to_string());
        let chosen = value
            .get("chosen")
            .and_then(|c| c.as_object())
            .ok_or_else(|| bad("missing \"chosen\" object"))?;
        let mut groups = vec![usize::MAX; chosen.len()];
        for (k, v) in chosen {
            let i: usize = k.parse().map_err(|_| bad("non-integer class key"))?;
            let g = v.as_u64().ok_or_else(|| bad("non-integer subgroup"))? as usize;
            *groups.get_mut(i).ok_or_else(|| bad("class keys are not 0..C"))? = g;
        }
        let objective_value = value
            .get("objective")
            .and_then(|o| o.as_f64())
            .ok_or_else(|| bad("missing objective"))?;
        Ok(Self {
            groups,
            objective_value,
        })
    }
}

/// Per-class argmin (exact, by separability). Ties keep the smallest index.
pub fn select_greedy(pool: &CandidatePool, params: &SelectionParams) -> Result<SelectionAssignment, SelectionError> {
    params.validate()?;
    let mut groups = Vec::with_capacity(pool.n_classes());
    for i in 0..pool.n_classes() {
        let mut best = (0, f64::INFINITY);
        for g in 0..pool.n_groups() {
            let v = class_contribution(pool, i, g, params)?;
            if v < best.1 {
                best = (g, v);
            }
        }
        groups.push(best.0);
    }
    SelectionAssignment::new(pool, groups, params)
}

/// Exhaustive search over all `G^C` assignments in lexicographic order;
/// ties keep the lexicographically smallest assignment.
pub fn select_bruteforce(pool: &CandidatePool, params: &SelectionParams) -> Result<SelectionAssignment, SelectionError> {
    params.validate()?;
    let (c, g) = (pool.n_classes(), pool.n_groups());
    let too_large = SelectionError::SearchSpaceTooLarge {
        groups: g,
        classes: c,
    };
    match (g as u64).checked_pow(c as u32) {
        Some(n) if n <= BRUTEFORCE_LIMIT => {}
        _ => return Err(too_large),
    }
    let mut current = vec![0usize; c];
    let mut best = (current.clone(), selection_objective(pool, &current, params)?);
    loop {
        // Odometer increment, last class fastest.
        let mut k = c;
        loop {
            if k == 0 {
                return Ok(SelectionAssignment {
                    groups: best.0,
                    objective_value: best.1,
                });
            }
            k -= 1;
            current[k] += 1;
            if current[k] < g {
                break;
            }
            current[k] = 0;
        }
        let v = selection_objective(pool, &current, params)?;
        if v < best.1 {
            best = (current.clone(), v);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolConfig {
    pub n_groups: usize,
    /// Samples per subgroup (equals IPC).
    pub group_size: usize,
    /// Real samples per reference centroid.
    pub k_real: usize,
    pub sample_steps: usize,
}

/// Stream used for the reference-centroid subsets of a pool built with `rng`.
/// Kept apart from the sampling stream so `K_i` can change without changing
/// the candidates.
pub fn reference_rng(rng: &Rng) -> Rng {
    rng.derive("reference-centroids")
}

/// Generates `G · K` samples per class, embeds them with φ and computes every
/// centroid. `real_features_by_class[i]` are φ-features of class `i`'s real
/// training samples.
pub fn build_pool(
    schedule: &NoiseSchedule,
    params: &DenoiserParams,
    real_features_by_class: &[Vec<Vec<f64>>],
    extractor: &FeatureExtractor,
    cfg: &PoolConfig,
    rng: &mut Rng,
) -> Result<CandidatePool, SelectionError> {
    let real_centroids = real_centroids(real_features_by_class, cfg.k_real, &mut reference_rng(rng))?;
    let mut subgroups = Vec::with_capacity(real_features_by_class.len());
    for class_id in 0..real_features_by_class.len() {
        let mut row = Vec::with_capacity(cfg.n_groups);
        for _ in 0..cfg.n_groups {
            let latents = (0..cfg.group_size)
                .map(|_| sample(schedule, params, rng, class_id, cfg.sample_steps))
                .collect::<Result<Vec<_>, _>>()?;
            let features = extractor.features_batch(&latents)?;
            row.push(Subgroup { features, latents });
        }
        subgroups.push(row);
    }
    CandidatePool::from_subgroups(real_centroids, subgroups)
}

/// Reference centroids only (used when sweeping `K_i` over a fixed pool).
pub fn real_centroids(
    real_features_by_class: &[Vec<Vec<f64>>],
    k_real: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>, SelectionError> {
    real_features_by_class
        .iter()
        .map(|f| real_centroid(f, k_real, rng))
        .collect()
}
