use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Below this magnitude both values count as zero.
pub const SMAPE_ZERO: f64 = 1e-12;
/// Largest batch searched exhaustively when matching.
pub const MAX_EXHAUSTIVE_BATCH: usize = 8;

fn check(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(op, format!("lengths {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// Symmetric mean absolute percentage error, in `[0, 2]`.
pub fn smape(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check("smape", truth, pred)?;
    let total: f64 = truth
        .iter()
        .zip(pred)
        .map(|(&s, &p)| {
            if s.abs() < SMAPE_ZERO && p.abs() < SMAPE_ZERO {
                0.0
            } else {
                2.0 * (s - p).abs() / (s.abs() + p.abs())
            }
        })
        .sum();
    Ok(total / truth.len() as f64)
}

pub fn mae(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check("mae", truth, pred)?;
    Ok(truth.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / truth.len() as f64)
}

pub fn mse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check("mse", truth, pred)?;
    Ok(truth.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    /// Index of the true sample.
    pub truth: usize,
    /// Index of the reconstruction assigned to it.
    pub recon: usize,
    pub smape_obs: f64,
    pub smape_tar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub smape_obs: f64,
    pub smape_tar: f64,
    pub mae_obs: f64,
    pub mae_tar: f64,
    pub mse_obs: f64,
    pub mse_tar: f64,
    pub per_sample: Vec<SampleMetrics>,
    /// `permutation[i]` is the reconstruction matched to true sample `i`.
    pub permutation: Vec<usize>,
    /// True when the batch was too large for exhaustive search.
    pub greedy: bool,
    pub identity_smape_obs: f64,
    pub identity_smape_tar: f64,
}

fn rows(t: &Tensor) -> Result<Vec<&[f64]>> {
    let b = *t.shape().first().ok_or_else(|| Error::shape("match_batch", "scalar batch"))?;
    if b == 0 {
        return Err(Error::shape("match_batch", "empty batch"));
    }
    let n = t.numel() / b;
    Ok(t.data().chunks(n).collect())
}

/// Cost of matching every true sample to every reconstruction.
fn cost_matrix(to: &[&[f64]], tt: &[&[f64]], ro: &[&[f64]], rt: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let mut c = vec![vec![0.0; ro.len()]; to.len()];
    for i in 0..to.len() {
        for j in 0..ro.len() {
            let n_o = to[i].len() as f64;
            let n_t = tt[i].len() as f64;
            c[i][j] = (smape(to[i], ro[j])? * n_o + smape(tt[i], rt[j])? * n_t) / (n_o + n_t);
        }
    }
    Ok(c)
}

fn best_permutation(cost: &[Vec<f64>]) -> Vec<usize> {
    fn search(cost: &[Vec<f64>], row: usize, used: &mut [bool], cur: &mut Vec<usize>, acc: f64, best: &mut (f64, Vec<usize>)) {
        if acc >= best.0 {
            return;
        }
        if row == cost.len() {
            *best = (acc, cur.clone());
            return;
        }
        for j in 0..cost.len() {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                search(cost, row + 1, used, cur, acc + cost[row][j], best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let n = cost.len();
    let identity: Vec<usize> = (0..n).collect();
    let id_cost = (0..n).map(|i| cost[i][i]).sum::<f64>();
    // Ties keep the identity, so strict improvement is needed to move.
    let mut best = (id_cost, identity);
    search(cost, 0, &mut vec![false; n], &mut Vec::with_capacity(n), 0.0, &mut best);
    best.1
}

fn greedy_permutation(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    pairs.sort_by(|a, b| cost[a.0][a.1].total_cmp(&cost[b.0][b.1]));
    let mut perm = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for (i, j) in pairs {
        if perm[i] == usize::MAX && !used[j] {
            perm[i] = j;
            used[j] = true;
        }
    }
    perm
}

/// Assigns reconstructions to true samples minimizing mean sMAPE over
/// `obs ‖ tar`, and reports metrics under that assignment.
pub fn match_batch(recon_obs: &Tensor, recon_tar: &Tensor, true_obs: &Tensor, true_tar: &Tensor) -> Result<MetricReport> {
    if recon_obs.shape() != true_obs.shape() || recon_tar.shape() != true_tar.shape() {
        return Err(Error::shape(
            "match_batch",
            format!(
                "recon {:?}/{:?} vs truth {:?}/{:?}",
                recon_obs.shape(),
                recon_tar.shape(),
                true_obs.shape(),
                true_tar.shape()
            ),
        ));
    }
    let (ro, rt, to, tt) = (rows(recon_obs)?, rows(recon_tar)?, rows(true_obs)?, rows(true_tar)?);
    let b = to.len();
    let cost = cost_matrix(&to, &tt, &ro, &rt)?;
    let greedy = b > MAX_EXHAUSTIVE_BATCH;
    let perm = if greedy { greedy_permutation(&cost) } else { best_permutation(&cost) };

    let gather = |rs: &[&[f64]], p: &[usize]| -> Vec<f64> { p.iter().flat_map(|&j| rs[j].iter().copied()).collect() };
    let identity: Vec<usize> = (0..b).collect();
    let (po, pt) = (gather(&ro, &perm), gather(&rt, &perm));
    let per_sample = (0..b)
        .map(|i| {
            Ok(SampleMetrics {
                truth: i,
                recon: perm[i],
                smape_obs: smape(to[i], ro[perm[i]])?,
                smape_tar: smape(tt[i], rt[perm[i]])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        smape_obs: smape(true_obs.data(), &po)?,
        smape_tar: smape(true_tar.data(), &pt)?,
        mae_obs: mae(true_obs.data(), &po)?,
        mae_tar: mae(true_tar.data(), &pt)?,
        mse_obs: mse(true_obs.data(), &po)?,
        mse_tar: mse(true_tar.data(), &pt)?,
        per_sample,
        greedy,
        identity_smape_obs: smape(true_obs.data(), &gather(&ro, &identity))?,
        identity_smape_tar: smape(true_tar.data(), &gather(&rt, &identity))?,
        permutation: perm,
    })
}
