//! Series ingestion, normalization, rolling windows and dataset splits.

mod csv_input;
mod pack;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use csv_input::read_csv;
pub use pack::{prepare, read_pack, write_pack, DataManifest, PreparedData, SplitRanges, WindowSet};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    pub name: String,
    /// Free-form label such as `15min`; metadata only.
    pub sampling_period: String,
    pub values: Vec<f64>,
}

/// Constants of a min-max normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: f64,
    pub max: f64,
}

impl Normalization {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * (self.max - self.min) + self.min
    }
}

pub fn minmax_normalize(series: &RawSeries) -> Result<(RawSeries, Normalization)> {
    let (min, max) = series
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if series.values.is_empty() || !(max > min) {
        return Err(Error::Data(format!(
            "series '{}' is constant or empty; cannot min-max normalize",
            series.name
        )));
    }
    let norm = Normalization { min, max };
    let values = series.values.iter().map(|&v| norm.apply(v).clamp(0.0, 1.0)).collect();
    Ok((
        RawSeries {
            values,
            ..series.clone()
        },
        norm,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowingSpec {
    pub obs_len: usize,
    pub horizon: usize,
    pub step_attack: usize,
    pub step_aux: usize,
}

impl WindowingSpec {
    pub fn new(obs_len: usize, horizon: usize, step_attack: usize, step_aux: usize) -> Result<Self> {
        if obs_len == 0 || horizon == 0 || step_attack == 0 || step_aux == 0 {
            return Err(Error::Config("H, F and both steps must be at least 1".into()));
        }
        Ok(WindowingSpec {
            obs_len,
            horizon,
            step_attack,
            step_aux,
        })
    }

    /// Window size `W = H + F`.
    pub fn window(&self) -> usize {
        self.obs_len + self.horizon
    }
}

/// One (observation, target) pair cut from a series.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesWindow {
    pub obs: Vec<f64>,
    pub tar: Vec<f64>,
    pub origin: usize,
}

impl SeriesWindow {
    /// `obs` followed by `tar`.
    pub fn joined(&self) -> Vec<f64> {
        let mut v = self.obs.clone();
        v.extend_from_slice(&self.tar);
        v
    }
}

/// Windows `[i*step, i*step + W)` for `i = 0..=(len - W) / step`.
pub fn rolling_windows(values: &[f64], spec: &WindowingSpec, step: usize) -> Result<Vec<SeriesWindow>> {
    let w = spec.window();
    if step == 0 {
        return Err(Error::Config("window step must be at least 1".into()));
    }
    if values.len() < w {
        return Err(Error::Data(format!(
            "series of length {} is shorter than the window size {w}",
            values.len()
        )));
    }
    let count = (values.len() - w) / step + 1;
    Ok((0..count)
        .map(|i| {
            let start = i * step;
            SeriesWindow {
                obs: values[start..start + spec.obs_len].to_vec(),
                tar: values[start + spec.obs_len..start + w].to_vec(),
                origin: start,
            }
        })
        .collect())
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Chronological 64/16/20 split: the last 20 % becomes test, then the last
/// 20 % of the remainder becomes validation.
pub fn split_counts(n: usize) -> Result<(usize, usize, usize)> {
    if n < 5 {
        return Err(Error::Data(format!("need at least 5 windows to split, got {n}")));
    }
    let test = round_half_up(0.2 * n as f64);
    let val = round_half_up(0.2 * (n - test) as f64);
    Ok((n - test - val, val, test))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

pub fn split_dataset<T: Clone>(windows: &[T]) -> Result<Splits<T>> {
    let (train, val, _) = split_counts(windows.len())?;
    Ok(Splits {
        train: windows[..train].to_vec(),
        val: windows[train..train + val].to_vec(),
        test: windows[train + val..].to_vec(),
    })
}

/// Parameters of the synthetic seasonal series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub length: usize,
    pub period: usize,
    pub trend_slope: f64,
    pub noise_std: f64,
    /// Amplitude of the fundamental.
    pub amplitude: f64,
    /// Amplitude of the first harmonic.
    pub harmonic: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, length: usize, period: usize) -> Self {
        SynthConfig {
            seed,
            length,
            period,
            trend_slope: 0.0,
            noise_std: 0.0,
            amplitude: 0.3,
            harmonic: 0.12,
        }
    }
}

/// `0.5 + a1 sin(2 pi t / p) + a2 sin(4 pi t / p + phi) + slope t + noise`,
/// min-max normalized. The phase `phi` is drawn from the seed.
pub fn synth_series(cfg: &SynthConfig) -> Result<RawSeries> {
    if cfg.period == 0 || cfg.length < 2 * cfg.period {
        return Err(Error::Config(format!(
            "synthetic series needs length >= 2 * period (got {} and {})",
            cfg.length, cfg.period
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let phase = rng.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let p = cfg.period as f64;
    let values = (0..cfg.length)
        .map(|t| {
            // Reduce t modulo the period first so exact periodicity survives rounding.
            let tp = (t % cfg.period) as f64;
            let eps = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            0.5 + cfg.amplitude * (2.0 * PI * tp / p).sin()
                + cfg.harmonic * (4.0 * PI * tp / p + phase).sin()
                + cfg.trend_slope * t as f64
                + eps
        })
        .collect();
    let raw = RawSeries {
        name: format!("synthetic-{}", cfg.seed),
        sampling_period: format!("1/{}", cfg.period),
        values,
    };
    Ok(minmax_normalize(&raw)?.0)
}

/// A batch of windows as model-ready tensors `(B, H, 1)` and `(B, F, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientBatch {
    pub obs: Tensor,
    pub tar: Tensor,
}

impl ClientBatch {
    pub fn from_windows(windows: &[SeriesWindow]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Data("empty batch".into()))?;
        let (h, f) = (first.obs.len(), first.tar.len());
        if windows.iter().any(|w| w.obs.len() != h || w.tar.len() != f) {
            return Err(Error::Data("windows in a batch must share H and F".into()));
        }
        let b = windows.len();
        let obs = windows.iter().flat_map(|w| w.obs.iter().copied()).collect();
        let tar = windows.iter().flat_map(|w| w.tar.iter().copied()).collect();
        Ok(ClientBatch {
            obs: Tensor::new(vec![b, h, 1], obs)?,
            tar: Tensor::new(vec![b, f, 1], tar)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.obs.shape()[0]
    }

    pub fn obs_len(&self) -> usize {
        self.obs.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.tar.shape()[1]
    }

    /// Sample `i` as a window.
    pub fn window(&self, i: usize) -> SeriesWindow {
        let (h, f) = (self.obs_len(), self.horizon());
        SeriesWindow {
            obs: self.obs.data()[i * h..(i + 1) * h].to_vec(),
            tar: self.tar.data()[i * f..(i + 1) * f].to_vec(),
            origin: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(values: Vec<f64>) -> RawSeries {
        RawSeries {
            name: "t".into(),
            sampling_period: "1h".into(),
            values,
        }
    }

    #[test]
    fn normalize_examples() {
        let (s, n) = minmax_normalize(&series(vec![0.0, 5.0, 10.0])).unwrap();
        assert_eq!(s.values, vec![0.0, 0.5, 1.0]);
        assert_eq!(n, Normalization { min: 0.0, max: 10.0 });
        let unit = series(vec![0.0, 0.25, 1.0]);
        assert_eq!(minmax_normalize(&unit).unwrap().0.values, unit.values);
        assert!(minmax_normalize(&series(vec![3.0, 3.0])).is_err());
    }

    proptest! {
        #[test]
        fn normalize_round_trip(values in prop::collection::vec(-1e3f64..1e3, 2..50)) {
            prop_assume!(values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                > values.iter().cloned().fold(f64::INFINITY, f64::min));
            let (s, n) = minmax_normalize(&series(values.clone())).unwrap();
            for (a, b) in s.values.iter().zip(&values) {
                prop_assert!((0.0..=1.0).contains(a));
                prop_assert!((n.invert(*a) - b).abs() <= 1e-12 * (1.0 + b.abs()) * 1e3);
            }
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |m, (i, x)| if *x > v[m] { i } else { m });
            prop_assert_eq!(argmax(&s.values), argmax(&values));
        }

        #[test]
        fn windows_are_contiguous_slices(len in 10usize..200, h in 1usize..8, f in 1usize..8, step in 1usize..10) {
            let values: Vec<f64> = (0..len).map(|i| i as f64).collect();
            let spec = WindowingSpec::new(h, f, step, 1).unwrap();
            prop_assume!(len >= h + f);
            let ws = rolling_windows(&values, &spec, step).unwrap();
            prop_assert_eq!(ws.len(), (len - h - f) / step + 1);
            for (i, w) in ws.iter().enumerate() {
                prop_assert_eq!(w.origin, i * step);
                prop_assert_eq!(&w.joined()[..], &values[w.origin..w.origin + h + f]);
            }
        }
    }

    #[test]
    fn window_counts() {
        let spec = WindowingSpec::new(96, 96, 96, 4).unwrap();
        let v = vec![0.0; 192];
        assert_eq!(rolling_windows(&v, &spec, 96).unwrap().len(), 1);
        let v = vec![0.0; 384];
        let ws = rolling_windows(&v, &spec, 96).unwrap();
        assert_eq!(ws.iter().map(|w| w.origin).collect::<Vec<_>>(), vec![0, 96, 192]);
        assert!(rolling_windows(&vec![0.0; 100], &spec, 96).is_err());
    }

    #[test]
    fn non_overlapping_windows_tile_prefix() {
        let spec = WindowingSpec::new(3, 2, 5, 1).unwrap();
        let v: Vec<f64> = (0..23).map(f64::from).collect();
        let ws = rolling_windows(&v, &spec, spec.window()).unwrap();
        let tiled: Vec<f64> = ws.iter().flat_map(|w| w.joined()).collect();
        assert_eq!(tiled, v[..20].to_vec());
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_counts(100).unwrap(), (64, 16, 20));
        assert_eq!(split_counts(5).unwrap(), (3, 1, 1));
        assert!(split_counts(4).is_err());
        let items: Vec<usize> = (0..37).collect();
        let s = split_dataset(&items).unwrap();
        let all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        assert_eq!(all, items);
    }

    #[test]
    fn synthetic_series_is_deterministic_and_periodic() {
        let cfg = SynthConfig::new(4, 24 * 10, 24);
        let a = synth_series(&cfg).unwrap();
        assert_eq!(a, synth_series(&cfg).unwrap());
        assert!(a.values.iter().all(|v| (0.0..=1.0).contains(v)));
        for t in 0..a.values.len() - 24 {
            assert!((a.values[t] - a.values[t + 24]).abs() < 1e-12);
        }
        assert!(synth_series(&SynthConfig::new(4, 30, 24)).is_err());
    }

    #[test]
    fn client_batch_layout() {
        let ws = vec![
            SeriesWindow { obs: vec![1.0, 2.0], tar: vec![3.0], origin: 0 },
            SeriesWindow { obs: vec![4.0, 5.0], tar: vec![6.0], origin: 3 },
        ];
        let b = ClientBatch::from_windows(&ws).unwrap();
        assert_eq!(b.obs.shape(), &[2, 2, 1]);
        assert_eq!(b.tar.data(), &[3.0, 6.0]);
        assert_eq!(b.window(1).obs, vec![4.0, 5.0]);
    }
}
