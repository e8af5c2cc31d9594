use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    minmax_normalize, rolling_windows, split_counts, Normalization, RawSeries, SeriesWindow,
    WindowingSpec,
};
use crate::error::{Error, Result};
use crate::io;

/// Windows cut with a single step; window `i` starts at `i * step`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub obs_len: usize,
    pub horizon: usize,
    pub windows: Vec<SeriesWindow>,
}

/// Half-open index ranges of the chronological split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

impl SplitRanges {
    pub fn for_count(n: usize) -> Result<Self> {
        let (tr, va, _) = split_counts(n)?;
        Ok(SplitRanges {
            train: (0, tr),
            val: (tr, tr + va),
            test: (tr + va, n),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub series: String,
    pub sampling_period: String,
    pub series_len: usize,
    pub normalization: Normalization,
    pub windowing: WindowingSpec,
    pub attack_pack: String,
    pub attack_splits: SplitRanges,
    pub aux_pack: String,
    pub aux_splits: SplitRanges,
}

/// A prepared dataset: the attack pool and the auxiliary set.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub manifest: DataManifest,
    pub attack: WindowSet,
    pub aux: WindowSet,
}

impl PreparedData {
    /// Training windows of the attack-step cut; client batches are drawn here.
    pub fn attack_pool(&self) -> &[SeriesWindow] {
        let (a, b) = self.manifest.attack_splits.train;
        &self.attack.windows[a..b]
    }

    /// Validation windows of the aux-step cut.
    pub fn aux_set(&self) -> &[SeriesWindow] {
        let (a, b) = self.manifest.aux_splits.val;
        &self.aux.windows[a..b]
    }

    pub fn build(series: &RawSeries, spec: WindowingSpec) -> Result<Self> {
        let (norm_series, normalization) = minmax_normalize(series)?;
        let attack = rolling_windows(&norm_series.values, &spec, spec.step_attack)?;
        let aux = rolling_windows(&norm_series.values, &spec, spec.step_aux)?;
        let manifest = DataManifest {
            series: series.name.clone(),
            sampling_period: series.sampling_period.clone(),
            series_len: series.values.len(),
            normalization,
            windowing: spec,
            attack_pack: "attack.pack".into(),
            attack_splits: SplitRanges::for_count(attack.len())?,
            aux_pack: "aux.pack".into(),
            aux_splits: SplitRanges::for_count(aux.len())?,
        };
        let set = |windows| WindowSet {
            obs_len: spec.obs_len,
            horizon: spec.horizon,
            windows,
        };
        Ok(PreparedData {
            manifest,
            attack: set(attack),
            aux: set(aux),
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DataManifest = io::read_json(&dir.join("manifest.json"))?;
        let w = manifest.windowing;
        let attack = read_pack(&dir.join(&manifest.attack_pack), w.step_attack)?;
        let aux = read_pack(&dir.join(&manifest.aux_pack), w.step_aux)?;
        for (set, splits) in [(&attack, manifest.attack_splits), (&aux, manifest.aux_splits)] {
            if set.obs_len != w.obs_len || set.horizon != w.horizon || splits.test.1 != set.windows.len() {
                return Err(Error::Data(format!(
                    "{}: pack contents disagree with manifest",
                    dir.display()
                )));
            }
        }
        Ok(PreparedData {
            manifest,
            attack,
            aux,
        })
    }
}

/// Normalizes, windows and splits `series`, writing packs and `manifest.json` into `dir`.
pub fn prepare(series: &RawSeries, spec: WindowingSpec, dir: &Path) -> Result<PreparedData> {
    let data = PreparedData::build(series, spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pack(&dir.join(&data.manifest.attack_pack), &data.attack)?;
    write_pack(&dir.join(&data.manifest.aux_pack), &data.aux)?;
    io::write_json(&dir.join("manifest.json"), &data.manifest)?;
    Ok(data)
}

/// Header of three little-endian `u64` (H, F, count), then one `f64` row of
/// `obs ‖ tar` per window.
pub fn write_pack(path: &Path, set: &WindowSet) -> Result<()> {
    let w = set.obs_len + set.horizon;
    let mut bytes = Vec::with_capacity(24 + set.windows.len() * w * 8);
    for h in [set.obs_len, set.horizon, set.windows.len()] {
        bytes.extend_from_slice(&(h as u64).to_le_bytes());
    }
    for win in &set.windows {
        if win.obs.len() != set.obs_len || win.tar.len() != set.horizon {
            return Err(Error::Data("window length disagrees with pack header".into()));
        }
        for v in win.obs.iter().chain(&win.tar) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    io::ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pack(path: &Path, step: usize) -> Result<WindowSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Data(format!("{}: {why}", pack_name(path).display()));
    if bytes.len() < 24 {
        return Err(bad("truncated header"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().expect("8 bytes")) as usize;
    let (h, f, count) = (word(0), word(1), word(2));
    let w = h + f;
    if bytes.len() != 24 + count * w * 8 {
        return Err(bad("body length disagrees with header"));
    }
    let values: Vec<f64> = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let windows = (0..count)
        .map(|i| {
            let row = &values[i * w..(i + 1) * w];
            SeriesWindow {
                obs: row[..h].to_vec(),
                tar: row[h..].to_vec(),
                origin: i * step,
            }
        })
        .collect();
    Ok(WindowSet {
        obs_len: h,
        horizon: f,
        windows,
    })
}

fn pack_name(path: &Path) -> PathBuf {
    path.file_name().map(PathBuf::from).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_series, SynthConfig};

    #[test]
    fn prepare_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let series = synth_series(&SynthConfig::new(3, 400, 24)).unwrap();
        let spec = WindowingSpec::new(24, 24, 48, 4).unwrap();
        let data = prepare(&series, spec, dir.path()).unwrap();
        let loaded = PreparedData::load(dir.path()).unwrap();
        assert_eq!(loaded.manifest, data.manifest);
        assert_eq!(loaded.attack, data.attack);
        assert_eq!(loaded.aux, data.aux);
        assert_eq!(data.attack.windows.len(), (400 - 48) / 48 + 1);
        assert_eq!(data.aux.windows.len(), (400 - 48) / 4 + 1);
        let (a, b) = data.manifest.aux_splits.val;
        assert_eq!(loaded.aux_set().len(), b - a);
        for w in &loaded.attack.windows {
            assert_eq!(&w.joined()[..], &series.values[w.origin..w.origin + 48]);
        }
    }

    #[test]
    fn corrupt_pack_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pack");
        let set = WindowSet {
            obs_len: 2,
            horizon: 1,
            windows: vec![SeriesWindow { obs: vec![0.1, 0.2], tar: vec![0.3], origin: 0 }],
        };
        write_pack(&p, &set).unwrap();
        assert_eq!(read_pack(&p, 1).unwrap(), set);
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_pack(&p, 1), Err(Error::Data(_))));
    }
}
