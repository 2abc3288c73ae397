//! Metrics and cross-validation splits.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Ranks starting at 1, tied values sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = alloc::vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input"));
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!("spearman: lengths {} and {} differ", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two samples"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue { what: "spearman input".into() });
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::invalid(format!(
            "mae: need equal non-empty lengths, got {} and {}",
            predictions.len(),
            targets.len()
        )));
    }
    Ok(predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / predictions.len() as f64)
}

/// `tanh(mean(atanh(rho_i)))`.
pub fn fisher_z_average(rhos: &[f64]) -> Result<f64> {
    if rhos.is_empty() {
        return Err(Error::invalid("fisher_z_average of nothing"));
    }
    if let Some(r) = rhos.iter().find(|r| !(r.abs() < 1.0)) {
        return Err(Error::invalid(format!("fisher z undefined for |rho| >= 1 (got {r})")));
    }
    let mean = rhos.iter().map(|&r| libm::atanh(r)).sum::<f64>() / rhos.len() as f64;
    Ok(libm::tanh(mean))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Loso,
    Louo,
    KFold(usize),
}

impl SplitKind {
    /// Parses `loso`, `louo` or `kfold:<k>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "loso" => Ok(SplitKind::Loso),
            "louo" => Ok(SplitKind::Louo),
            _ => s
                .strip_prefix("kfold:")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k >= 2)
                .map(SplitKind::KFold)
                .ok_or_else(|| Error::invalid(format!("unknown split scheme {s:?}"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            SplitKind::Loso => "loso".into(),
            SplitKind::Louo => "louo".into(),
            SplitKind::KFold(k) => format!("kfold:{k}"),
        }
    }
}

/// Split-relevant metadata of one manifest entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct EpisodeMeta {
    pub user_id: Option<u32>,
    pub supertrial_id: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitScheme {
    pub kind: SplitKind,
    /// Fold index of every episode.
    pub assignment: Vec<usize>,
    pub folds: usize,
}

impl SplitScheme {
    /// Indices held out in `fold`.
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != fold).collect()
    }
}

fn group_by(ids: Vec<Option<u32>>, field: &'static str) -> Result<(Vec<usize>, usize)> {
    let ids = ids
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| Error::invalid(format!("episode {i} has no {field}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut distinct = ids.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let assignment = ids
        .iter()
        .map(|id| distinct.binary_search(id).unwrap_or_default())
        .collect();
    Ok((assignment, distinct.len()))
}

/// LOUO and LOSO give one fold per distinct id in ascending id order; k-fold
/// shuffles with `seed` and cuts contiguous folds whose sizes differ by at
/// most one.
pub fn make_splits(manifest: &[EpisodeMeta], kind: SplitKind, seed: u64) -> Result<SplitScheme> {
    let (assignment, folds) = match kind {
        SplitKind::Louo => group_by(manifest.iter().map(|m| m.user_id).collect(), "user_id")?,
        SplitKind::Loso => group_by(manifest.iter().map(|m| m.supertrial_id).collect(), "supertrial_id")?,
        SplitKind::KFold(k) => {
            let n = manifest.len();
            if k < 2 || n < k {
                return Err(Error::invalid(format!("{k}-fold split needs k >= 2 and at least k episodes, got {n}")));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut assignment = alloc::vec![0; n];
            let (base, extra) = (n / k, n % k);
            let mut pos = 0;
            for fold in 0..k {
                let size = base + usize::from(fold < extra);
                for &idx in &order[pos..pos + size] {
                    assignment[idx] = fold;
                }
                pos += size;
            }
            (assignment, k)
        }
    };
    if folds < 2 {
        return Err(Error::invalid(format!("{} split yields a single fold", kind.name())));
    }
    Ok(SplitScheme { kind, assignment, folds })
}
