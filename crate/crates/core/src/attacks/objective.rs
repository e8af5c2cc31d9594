//! Gradient distances and time-series priors as graph expressions.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    L2,
    Cosine,
    /// Cosine with total variation; the TV weights come from the config.
    CosineTv,
    L1,
    CosineL1,
    CosineL2,
}

impl Distance {
    pub const ALL: [Distance; 6] = [
        Distance::L2,
        Distance::Cosine,
        Distance::CosineTv,
        Distance::L1,
        Distance::CosineL1,
        Distance::CosineL2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Distance::L2 => "l2",
            Distance::Cosine => "cosine",
            Distance::CosineTv => "cosine_tv",
            Distance::L1 => "l1",
            Distance::CosineL1 => "cosine_l1",
            Distance::CosineL2 => "cosine_l2",
        }
    }

    fn parts(self) -> (bool, bool, bool) {
        // (cosine, l1, l2)
        match self {
            Distance::L2 => (false, false, true),
            Distance::Cosine | Distance::CosineTv => (true, false, false),
            Distance::L1 => (false, true, false),
            Distance::CosineL1 => (true, true, false),
            Distance::CosineL2 => (true, false, true),
        }
    }
}

impl std::str::FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Distance::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown distance '{s}'")))
    }
}

fn sum_scalars(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// `D(dummy, target)` over per-tensor gradient pieces, treated as one flat vector.
pub fn gradient_distance(g: &mut Graph, kind: Distance, dummy: &[Var], target: &[Tensor]) -> Result<Var> {
    if dummy.len() != target.len() || dummy.is_empty() {
        return Err(Error::shape(
            "gradient_distance",
            format!("{} dummy tensors vs {} target tensors", dummy.len(), target.len()),
        ));
    }
    for (&d, t) in dummy.iter().zip(target) {
        if g.shape(d) != t.shape() {
            return Err(Error::shape("gradient_distance", format!("{:?} vs {:?}", g.shape(d), t.shape())));
        }
    }
    let (cos, l1, l2) = kind.parts();
    let targets: Vec<Var> = target.iter().map(|t| g.constant(t.clone())).collect();
    let mut terms = Vec::new();
    if cos {
        let tnorm = target
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if tnorm == 0.0 {
            return Err(Error::CaptureMismatch("captured gradient has zero norm; cosine undefined".into()));
        }
        let mut dots = Vec::new();
        let mut sqs = Vec::new();
        for (&d, &t) in dummy.iter().zip(&targets) {
            let p = g.mul(d, t)?;
            dots.push(g.sum(p)?);
            let s = g.square(d)?;
            sqs.push(g.sum(s)?);
        }
        let dot = sum_scalars(g, &dots)?;
        let sq = sum_scalars(g, &sqs)?;
        let dnorm = g.sqrt(sq)?;
        let inv = g.recip_safe(dnorm)?;
        let c = g.mul(dot, inv)?;
        let c = g.scale(c, -1.0 / tnorm)?;
        terms.push(g.shift(c, 1.0)?);
    }
    if l1 || l2 {
        let mut abs_terms = Vec::new();
        let mut sq_terms = Vec::new();
        for (&d, &t) in dummy.iter().zip(&targets) {
            let diff = g.sub(d, t)?;
            if l1 {
                let a = g.abs(diff)?;
                abs_terms.push(g.sum(a)?);
            }
            if l2 {
                let s = g.square(diff)?;
                sq_terms.push(g.sum(s)?);
            }
        }
        if l1 {
            terms.push(sum_scalars(g, &abs_terms)?);
        }
        if l2 {
            let s = sum_scalars(g, &sq_terms)?;
            terms.push(g.sqrt(s)?);
        }
    }
    sum_scalars(g, &terms)
}

fn check_seq(g: &Graph, op: &'static str, s: Var) -> Result<(usize, usize)> {
    match *g.shape(s) {
        [b, t, 1] => Ok((b, t)),
        ref other => Err(Error::shape(op, format!("expected (B, T, 1), got {other:?}"))),
    }
}

/// `sum_t |S_{t+1} - S_t|`, averaged over the batch.
pub fn total_variation(g: &mut Graph, s: Var) -> Result<Var> {
    let (b, t) = check_seq(g, "total_variation", s)?;
    if t < 2 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let a = g.slice(s, 1, 1, t)?;
    let c = g.slice(s, 1, 0, t - 1)?;
    let d = g.sub(a, c)?;
    let d = g.abs(d)?;
    let total = g.sum(d)?;
    g.scale(total, 1.0 / b as f64)
}

/// Mean absolute difference between points one period apart.
pub fn periodicity(g: &mut Graph, s: Var, period: usize) -> Result<Var> {
    let (_, t) = check_seq(g, "periodicity", s)?;
    if period == 0 || period >= t {
        return Err(Error::Config(format!("period {period} must be in 1..{t}")));
    }
    let a = g.slice(s, 1, 0, t - period)?;
    let c = g.slice(s, 1, period, t)?;
    let d = g.sub(a, c)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// L1 deviation from each sequence's least-squares line, averaged over the batch.
pub fn trend(g: &mut Graph, s: Var) -> Result<Var> {
    let (b, t) = check_seq(g, "trend", s)?;
    if t < 2 {
        return Err(Error::Config("trend needs at least two timesteps".into()));
    }
    let mid = (t - 1) as f64 / 2.0;
    let centered: Vec<f64> = (0..t).map(|i| i as f64 - mid).collect();
    let ss: f64 = centered.iter().map(|c| c * c).sum();
    let c = g.constant(Tensor::new(vec![1, t, 1], centered)?);
    let sc = g.mul(s, c)?;
    let beta = g.sum_to(sc, &[b, 1, 1])?;
    let beta = g.scale(beta, 1.0 / ss)?;
    let mean = g.sum_to(s, &[b, 1, 1])?;
    let mean = g.scale(mean, 1.0 / t as f64)?;
    let line = g.mul(beta, c)?;
    let line = g.add(line, mean)?;
    let r = g.sub(s, line)?;
    let r = g.abs(r)?;
    let total = g.sum(r)?;
    g.scale(total, 1.0 / b as f64)
}

/// One-sided hinge outside each `(lower, upper)` band, summed over
/// timesteps and pairs, averaged over the batch. Bands have shape `(T, 1)`.
pub fn quantile_violation(g: &mut Graph, s: Var, bands: &[(Tensor, Tensor)]) -> Result<Var> {
    let (b, t) = check_seq(g, "quantile_violation", s)?;
    let mut terms = Vec::with_capacity(bands.len() * 2);
    for (lo, hi) in bands {
        if lo.shape() != [t, 1] || hi.shape() != [t, 1] {
            return Err(Error::shape("quantile_violation", format!("band {:?} for T = {t}", lo.shape())));
        }
        let lo = g.constant(lo.clone());
        let hi = g.constant(hi.clone());
        let over = g.sub(s, hi)?;
        let over = g.relu(over)?;
        terms.push(g.sum(over)?);
        let under = g.sub(lo, s)?;
        let under = g.relu(under)?;
        terms.push(g.sum(under)?);
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let total = sum_scalars(g, &terms)?;
    g.scale(total, 1.0 / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    fn seq(g: &mut Graph, rows: &[&[f64]]) -> Var {
        let t = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        g.constant(Tensor::new(vec![rows.len(), t, 1], data).unwrap())
    }

    fn dist(kind: Distance, a: &[f64], b: &[f64]) -> f64 {
        eval(|g| {
            let d = g.constant(Tensor::vector(a.to_vec()));
            gradient_distance(g, kind, &[d], &[Tensor::vector(b.to_vec())])
        })
    }

    #[test]
    fn distance_examples() {
        assert_eq!(dist(Distance::L2, &[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(dist(Distance::L2, &[3.0, 4.0], &[0.0, 0.0]), 5.0);
        assert!(dist(Distance::Cosine, &[2.0, 4.0], &[1.0, 2.0]).abs() < 1e-15);
        assert!((dist(Distance::Cosine, &[-1.0, -2.0], &[1.0, 2.0]) - 2.0).abs() < 1e-15);
        assert_eq!(dist(Distance::L1, &[1.0, -2.0, 3.0], &[0.0; 3]), 6.0);
        let (a, b) = ([0.5, -1.0, 2.0], [1.0, 1.0, 1.0]);
        let c = dist(Distance::Cosine, &a, &b);
        assert!((dist(Distance::CosineL1, &a, &b) - c - dist(Distance::L1, &a, &b)).abs() < 1e-14);
        assert!((dist(Distance::CosineL2, &a, &b) - c - dist(Distance::L2, &a, &b)).abs() < 1e-14);
    }

    #[test]
    fn cosine_rejects_zero_target() {
        let mut g = Graph::new();
        let d = g.constant(Tensor::vector(vec![1.0]));
        assert!(gradient_distance(&mut g, Distance::Cosine, &[d], &[Tensor::vector(vec![0.0])]).is_err());
        assert!(gradient_distance(&mut g, Distance::L1, &[d], &[Tensor::vector(vec![0.0, 1.0])]).is_err());
    }

    proptest! {
        #[test]
        fn distances_match_direct_formulas(
            pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..30)
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let l2 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let l1: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
            prop_assert!((dist(Distance::L2, &a, &b) - l2).abs() < 1e-12);
            prop_assert!((dist(Distance::L1, &a, &b) - l1).abs() < 1e-12);
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assume!(nb > 1e-6 && na > 1e-6);
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            prop_assert!((dist(Distance::Cosine, &a, &b) - (1.0 - dot / (na * nb))).abs() < 1e-12);
        }

        #[test]
        fn regularizers_ignore_batch_order(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 2..5)
        ) {
            let refs: Vec<&[f64]> = rows.iter().map(|r| &r[..]).collect();
            let mut rev = refs.clone();
            rev.reverse();
            let both = |rs: &[&[f64]]| {
                let p = eval(|g| { let s = seq(g, rs); periodicity(g, s, 2) });
                let t = eval(|g| { let s = seq(g, rs); trend(g, s) });
                let v = eval(|g| { let s = seq(g, rs); total_variation(g, s) });
                (p, t, v)
            };
            let (x, y) = (both(&refs), both(&rev));
            prop_assert!((x.0 - y.0).abs() < 1e-12 && (x.1 - y.1).abs() < 1e-12 && (x.2 - y.2).abs() < 1e-12);
        }

        #[test]
        fn trend_ignores_constant_shift(row in prop::collection::vec(-1.0f64..1.0, 3..12), c in -5.0f64..5.0) {
            let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
            let a = eval(|g| { let s = seq(g, &[&row]); trend(g, s) });
            let b = eval(|g| { let s = seq(g, &[&shifted]); trend(g, s) });
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn quantile_hinge_is_monotone(d1 in 0.0f64..2.0, d2 in 0.0f64..2.0) {
            let (near, far) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            let band = (Tensor::new(vec![1, 1], vec![0.2]).unwrap(), Tensor::new(vec![1, 1], vec![0.8]).unwrap());
            let at = |x: f64| eval(|g| { let s = seq(g, &[&[x]]); quantile_violation(g, s, std::slice::from_ref(&band)) });
            prop_assert!(at(0.8 + near) <= at(0.8 + far));
            prop_assert!(at(0.2 - near) <= at(0.2 - far));
        }
    }

    #[test]
    fn regularizer_examples() {
        assert_eq!(eval(|g| { let s = seq(g, &[&[1.0, 2.0, 1.0, 2.0]]); periodicity(g, s, 2) }), 0.0);
        assert_eq!(eval(|g| { let s = seq(g, &[&[0.0, 0.0, 1.0, 0.0]]); periodicity(g, s, 2) }), 0.5);
        let tr = eval(|g| { let s = seq(g, &[&[0.0, 1.0, 0.0]]); trend(g, s) });
        assert!((tr - 4.0 / 3.0).abs() < 1e-15);
        assert!(eval(|g| { let s = seq(g, &[&[0.1, 0.35, 0.6, 0.85]]); trend(g, s) }) < 1e-15);
        assert_eq!(eval(|g| { let s = seq(g, &[&[0.4, 0.4, 0.4]]); total_variation(g, s) }), 0.0);
        let mut g = Graph::new();
        let s = seq(&mut g, &[&[1.0, 2.0, 3.0]]);
        assert!(periodicity(&mut g, s, 3).is_err());
    }

    #[test]
    fn quantile_examples() {
        let lo = Tensor::new(vec![3, 1], vec![0.0, 0.0, 0.0]).unwrap();
        let hi = Tensor::new(vec![3, 1], vec![1.0, 1.0, 1.0]).unwrap();
        let bands = [(lo, hi)];
        assert_eq!(eval(|g| { let s = seq(g, &[&[0.2, 0.5, 0.9]]); quantile_violation(g, s, &bands) }), 0.0);
        assert_eq!(eval(|g| { let s = seq(g, &[&[0.2, 1.5, 0.9]]); quantile_violation(g, s, &bands) }), 0.5);
    }
}
