use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{match_batch, MetricReport};
use crate::attacks::{run_attack, AttackConfig, AttackMethod, AttackResult, Distance, Optimizer};
use crate::data::PreparedData;
use crate::error::{Error, Result};
use crate::federation::{capture_round, sample_batch, ClientTruth, Defense, GradientCapture};
use crate::inversion::{train_finv, train_lti, InvNetSpec, TrainedNet, DEFAULT_HIDDEN, DEFAULT_LEVELS};
use crate::io;
use crate::models::Checkpoint;

pub const DEFAULT_SEEDS: [u64; 5] = [10, 43, 28, 80, 71];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    /// Directory written by `data prepare`.
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    pub checkpoint: PathBuf,
}

/// One attack row: a method preset plus optional per-field overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackEntry {
    /// Row label; defaults to the method name.
    #[serde(default)]
    pub label: Option<String>,
    pub method: AttackMethod,
    #[serde(default)]
    pub distance: Option<Distance>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub optimizer: Option<Optimizer>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub lambda_tv_obs: Option<f64>,
    #[serde(default)]
    pub lambda_tv_tar: Option<f64>,
    #[serde(default)]
    pub lambda_p: Option<f64>,
    #[serde(default)]
    pub period: Option<usize>,
    #[serde(default)]
    pub lambda_t: Option<f64>,
    #[serde(default)]
    pub lambda_q_obs: Option<f64>,
    #[serde(default)]
    pub lambda_q_tar: Option<f64>,
    #[serde(default)]
    pub one_shot_targets: Option<bool>,
    #[serde(default)]
    pub dia_masks: Option<bool>,
    #[serde(default)]
    pub clamp01: Option<bool>,
}

impl AttackEntry {
    pub fn new(method: AttackMethod) -> Self {
        AttackEntry {
            label: None,
            method,
            distance: None,
            steps: None,
            optimizer: None,
            learning_rate: None,
            lambda_tv_obs: None,
            lambda_tv_tar: None,
            lambda_p: None,
            period: None,
            lambda_t: None,
            lambda_q_obs: None,
            lambda_q_tar: None,
            one_shot_targets: None,
            dia_masks: None,
            clamp01: None,
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.method.name().to_string())
    }

    /// Preset for `ckpt`'s architecture with the overrides applied.
    pub fn config(&self, ckpt: &Checkpoint, seed: u64) -> Result<AttackConfig> {
        let mut c = AttackConfig::preset(self.method, ckpt.model.spec().architecture)?;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(distance, steps, optimizer, learning_rate, lambda_tv_obs, lambda_tv_tar, lambda_p, period, lambda_t, lambda_q_obs, lambda_q_tar, one_shot_targets, dia_masks, clamp01);
        c.seed = seed;
        Ok(c)
    }

    fn needs_bounds(&self) -> bool {
        self.lambda_q_obs.unwrap_or(0.0) > 0.0 || self.lambda_q_tar.unwrap_or(0.0) > 0.0
    }

    fn net_kind(&self) -> Option<NetRole> {
        if self.method == AttackMethod::Lti {
            Some(NetRole::Lti)
        } else if self.needs_bounds() {
            Some(NetRole::Finv)
        } else {
            None
        }
    }
}

/// Training settings for the learned components a grid needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetSettings {
    pub finv_epochs: usize,
    pub lti_epochs: usize,
    pub hidden: Vec<usize>,
    pub levels: Vec<f64>,
    /// Gradient samples per epoch; defaults to the auxiliary set size.
    pub samples_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for NetSettings {
    fn default() -> Self {
        NetSettings {
            finv_epochs: 75,
            lti_epochs: 250,
            hidden: DEFAULT_HIDDEN.to_vec(),
            levels: DEFAULT_LEVELS.to_vec(),
            samples_per_epoch: None,
            seed: 0,
        }
    }
}

impl NetSettings {
    fn spec(&self, role: NetRole, ckpt: &Checkpoint, b: usize) -> InvNetSpec {
        let ms = ckpt.model.spec();
        let m = ckpt.model.param_count();
        let mut s = match role {
            NetRole::Finv => {
                let mut s = InvNetSpec::quantile(m, ms.obs_len, ms.horizon, b, self.levels.clone());
                s.epochs = self.finv_epochs;
                s
            }
            NetRole::Lti => {
                let mut s = InvNetSpec::direct(m, ms.obs_len, ms.horizon, b);
                s.epochs = self.lti_epochs;
                s
            }
        };
        s.hidden = self.hidden.clone();
        s.samples_per_epoch = self.samples_per_epoch;
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NetRole {
    Finv,
    Lti,
}

impl NetRole {
    fn tag(self) -> &'static str {
        match self {
            NetRole::Finv => "finv",
            NetRole::Lti => "lti",
        }
    }
}

fn default_defenses() -> Vec<Defense> {
    vec![Defense::None]
}

fn default_batch_sizes() -> Vec<usize> {
    vec![1]
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

/// Cartesian experiment over datasets, models, attacks, defenses, batch sizes and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    pub out_dir: PathBuf,
    pub datasets: Vec<DatasetEntry>,
    pub models: Vec<ModelEntry>,
    pub attacks: Vec<AttackEntry>,
    #[serde(default = "default_defenses")]
    pub defenses: Vec<Defense>,
    #[serde(default = "default_batch_sizes")]
    pub batch_sizes: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub nets: NetSettings,
    /// Worker threads; 0 lets the pool decide.
    #[serde(default)]
    pub workers: usize,
}

/// One fully specified grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub dataset: usize,
    pub model: usize,
    pub attack: usize,
    pub defense: Defense,
    pub batch_size: usize,
    pub seed: u64,
}

/// Short filesystem-safe defense tag including its strength.
pub fn defense_label(d: &Defense) -> String {
    match d {
        Defense::None => "none".into(),
        Defense::Gauss { noise_std } => format!("gauss-{noise_std}"),
        Defense::Prune { prune_ratio } => format!("prune-{prune_ratio}"),
        Defense::Sign => "sign".into(),
    }
}

impl ExperimentGrid {
    /// Reads a grid file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut g: ExperimentGrid = io::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut g.out_dir);
        g.datasets.iter_mut().for_each(|d| fix(&mut d.dir));
        g.models.iter_mut().for_each(|m| fix(&mut m.checkpoint));
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("datasets", self.datasets.is_empty()),
            ("models", self.models.is_empty()),
            ("attacks", self.attacks.is_empty()),
            ("defenses", self.defenses.is_empty()),
            ("batch_sizes", self.batch_sizes.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("grid has no {name}")));
        }
        if self.batch_sizes.contains(&0) {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        for d in &self.defenses {
            d.validate()?;
        }
        let unique = |names: Vec<String>, what: &str| -> Result<()> {
            let mut seen = std::collections::BTreeSet::new();
            for n in names {
                if n.is_empty() || n.contains(['/', '\\']) || !seen.insert(n.clone()) {
                    return Err(Error::Config(format!("{what} name '{n}' is empty, duplicated or contains a path separator")));
                }
            }
            Ok(())
        };
        unique(self.datasets.iter().map(|d| d.name.clone()).collect(), "dataset")?;
        unique(self.models.iter().map(|m| m.name.clone()).collect(), "model")?;
        unique(self.attacks.iter().map(AttackEntry::label).collect(), "attack")?;
        Ok(())
    }

    /// Cells in a fixed nesting order, seeds innermost.
    pub fn expand(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for dataset in 0..self.datasets.len() {
            for model in 0..self.models.len() {
                for attack in 0..self.attacks.len() {
                    for &defense in &self.defenses {
                        for &batch_size in &self.batch_sizes {
                            for &seed in &self.seeds {
                                out.push(GridCell {
                                    dataset,
                                    model,
                                    attack,
                                    defense,
                                    batch_size,
                                    seed,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn group_key(&self, c: &GridCell) -> String {
        format!(
            "{}__{}__{}__{}__b{}",
            self.datasets[c.dataset].name,
            self.models[c.model].name,
            self.attacks[c.attack].label(),
            defense_label(&c.defense),
            c.batch_size
        )
    }

    pub fn cell_id(&self, c: &GridCell) -> String {
        format!("{}__s{}", self.group_key(c), c.seed)
    }
}

/// Everything one attack run produced, plus its score.
#[derive(Clone, Debug)]
pub struct ScenarioOutcome {
    pub capture: GradientCapture,
    pub truth: ClientTruth,
    pub result: AttackResult,
    pub report: MetricReport,
}

/// Samples a client batch with `seed`, captures its gradient and attacks it.
///
/// `net` must be a trained quantile net when the attack uses bounds, or the
/// direct net for the learned baseline.
pub fn run_scenario(
    data: &PreparedData,
    ckpt: &Checkpoint,
    attack: &AttackEntry,
    defense: Defense,
    batch_size: usize,
    seed: u64,
    net: Option<&TrainedNet>,
) -> Result<ScenarioOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = sample_batch(data.attack_pool(), batch_size, &mut rng)?;
    let (capture, truth) = capture_round(ckpt, batch, defense, seed)?;
    let result = if attack.method == AttackMethod::Lti {
        net.ok_or_else(|| Error::Config("lti needs a trained net".into()))?.lti_attack(&capture)?
    } else {
        let mut cfg = attack.config(ckpt, seed)?;
        if cfg.lambda_q_obs > 0.0 || cfg.lambda_q_tar > 0.0 {
            let net = net.ok_or_else(|| Error::Config("quantile regularization needs a trained bounds net".into()))?;
            cfg.bounds = Some(net.predict_bounds(&capture)?);
        }
        run_attack(&capture, ckpt, &cfg)?
    };
    let report = match_batch(&result.recon_obs, &result.recon_tar, &truth.batch.obs, &truth.batch.tar)?;
    Ok(ScenarioOutcome {
        capture,
        truth,
        result,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellRecord {
    Done { metrics: Box<MetricReport> },
    Failed { error: String },
}

/// On-disk record of finished cells, keyed by cell id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridManifest {
    pub cells: BTreeMap<String, CellRecord>,
}

impl GridManifest {
    fn path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = Self::path(dir);
        if p.exists() {
            io::read_json(&p)
        } else {
            Ok(GridManifest::default())
        }
    }

    fn store(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join("manifest.json.tmp");
        io::write_json(&tmp, self)?;
        let p = Self::path(dir);
        fs::rename(&tmp, &p).map_err(|e| Error::io(p, e))
    }
}

/// Aggregated row: mean and population std over the seeds that finished.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub dataset: String,
    pub model: String,
    pub attack: String,
    pub defense: String,
    pub batch_size: usize,
    pub runs: usize,
    pub failed: usize,
    pub smape_obs_mean: f64,
    pub smape_obs_std: f64,
    pub smape_tar_mean: f64,
    pub smape_tar_std: f64,
    pub mae_obs_mean: f64,
    pub mae_obs_std: f64,
    pub mae_tar_mean: f64,
    pub mae_tar_std: f64,
    pub identity_smape_obs_mean: f64,
    pub identity_smape_tar_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    pub computed: usize,
    pub skipped: usize,
    pub failed: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(dir: &Path) -> Result<Self> {
        let p = dir.join(".grid.lock");
        OpenOptions::new().write(true).create_new(true).open(&p).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Config(format!("{} exists; another grid run owns this directory (delete it if stale)", p.display()))
            } else {
                Error::io(&p, e)
            }
        })?;
        Ok(LockGuard(p))
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Runs every pending cell in parallel, then writes `results.csv`.
///
/// Cells already marked done in `manifest.json` are skipped; failed cells are retried.
pub fn run_grid(grid: &ExperimentGrid) -> Result<GridReport> {
    grid.validate()?;
    fs::create_dir_all(&grid.out_dir).map_err(|e| Error::io(&grid.out_dir, e))?;
    let _lock = LockGuard::acquire(&grid.out_dir)?;

    let data: Vec<PreparedData> = grid.datasets.iter().map(|d| PreparedData::load(&d.dir)).collect::<Result<_>>()?;
    let ckpts: Vec<Checkpoint> = grid.models.iter().map(|m| Checkpoint::load(&m.checkpoint)).collect::<Result<_>>()?;
    let manifest = GridManifest::load(&grid.out_dir)?;

    let cells = grid.expand();
    let pending: Vec<&GridCell> = cells
        .iter()
        .filter(|c| !matches!(manifest.cells.get(&grid.cell_id(c)), Some(CellRecord::Done { .. })))
        .collect();
    let skipped = cells.len() - pending.len();

    // Learned components are trained once per (dataset, model, defense, B) and cached.
    let mut nets: BTreeMap<String, TrainedNet> = BTreeMap::new();
    for c in &pending {
        let Some(role) = grid.attacks[c.attack].net_kind() else { continue };
        let key = net_key(grid, c, role);
        if nets.contains_key(&key) {
            continue;
        }
        let path = grid.out_dir.join("nets").join(format!("{key}.bin"));
        let net = if path.exists() {
            TrainedNet::load(&path)?
        } else {
            let spec = grid.nets.spec(role, &ckpts[c.model], c.batch_size);
            let aux = data[c.dataset].aux_set();
            let net = match role {
                NetRole::Finv => train_finv(aux, &ckpts[c.model], c.defense, spec, grid.nets.seed)?,
                NetRole::Lti => train_lti(aux, &ckpts[c.model], c.defense, spec, grid.nets.seed)?,
            };
            net.save(&path)?;
            net
        };
        nets.insert(key, net);
    }

    let shared = Mutex::new(manifest);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(grid.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let outcomes: Vec<Result<bool>> = pool.install(|| {
        pending
            .par_iter()
            .map(|c| {
                let id = grid.cell_id(c);
                let net = grid.attacks[c.attack].net_kind().and_then(|r| nets.get(&net_key(grid, c, r)));
                let record = match run_cell(grid, c, &data[c.dataset], &ckpts[c.model], net, &id) {
                    Ok(report) => CellRecord::Done {
                        metrics: Box::new(report),
                    },
                    Err(e) => CellRecord::Failed { error: e.to_string() },
                };
                let ok = matches!(record, CellRecord::Done { .. });
                let mut m = shared.lock().expect("manifest lock poisoned");
                m.cells.insert(id, record);
                m.store(&grid.out_dir)?;
                Ok(ok)
            })
            .collect()
    });
    let mut failed = 0;
    for o in outcomes {
        if !o? {
            failed += 1;
        }
    }
    let manifest = shared.into_inner().expect("manifest lock poisoned");
    let rows = aggregate(grid, &cells, &manifest);
    write_csv(&grid.out_dir.join("results.csv"), &rows)?;
    Ok(GridReport {
        rows,
        computed: pending.len(),
        skipped,
        failed,
    })
}

fn net_key(grid: &ExperimentGrid, c: &GridCell, role: NetRole) -> String {
    format!(
        "{}__{}__{}__b{}__{}",
        grid.datasets[c.dataset].name,
        grid.models[c.model].name,
        defense_label(&c.defense),
        c.batch_size,
        role.tag()
    )
}

fn run_cell(
    grid: &ExperimentGrid,
    c: &GridCell,
    data: &PreparedData,
    ckpt: &Checkpoint,
    net: Option<&TrainedNet>,
    id: &str,
) -> Result<MetricReport> {
    let out = run_scenario(data, ckpt, &grid.attacks[c.attack], c.defense, c.batch_size, c.seed, net)?;
    let dir = grid.out_dir.join("cells").join(id);
    let cap_path = dir.join("capture.json");
    out.capture.save(&cap_path)?;
    out.truth.save(&io::sidecar(&cap_path, ".truth"))?;
    let mut result = out.result;
    result.capture = Some("capture.json".into());
    result.save(&dir.join("result.json"))?;
    io::write_json(&dir.join("metrics.json"), &out.report)?;
    Ok(out.report)
}

fn aggregate(grid: &ExperimentGrid, cells: &[GridCell], manifest: &GridManifest) -> Vec<GridRow> {
    let mut groups: Vec<(String, &GridCell, Vec<&MetricReport>, usize)> = Vec::new();
    for c in cells {
        let key = grid.group_key(c);
        if groups.last().map(|g| g.0 != key).unwrap_or(true) {
            groups.push((key, c, Vec::new(), 0));
        }
        let g = groups.last_mut().expect("group pushed above");
        match manifest.cells.get(&grid.cell_id(c)) {
            Some(CellRecord::Done { metrics }) => g.2.push(metrics),
            Some(CellRecord::Failed { .. }) => g.3 += 1,
            None => {}
        }
    }
    groups
        .into_iter()
        .map(|(_, c, ms, failed)| {
            let col = |f: fn(&MetricReport) -> f64| mean_std(&ms.iter().map(|m| f(m)).collect::<Vec<_>>());
            let (so, so_s) = col(|m| m.smape_obs);
            let (st, st_s) = col(|m| m.smape_tar);
            let (mo, mo_s) = col(|m| m.mae_obs);
            let (mt, mt_s) = col(|m| m.mae_tar);
            GridRow {
                dataset: grid.datasets[c.dataset].name.clone(),
                model: grid.models[c.model].name.clone(),
                attack: grid.attacks[c.attack].label(),
                defense: defense_label(&c.defense),
                batch_size: c.batch_size,
                runs: ms.len(),
                failed,
                smape_obs_mean: so,
                smape_obs_std: so_s,
                smape_tar_mean: st,
                smape_tar_std: st_s,
                mae_obs_mean: mo,
                mae_obs_std: mo_s,
                mae_tar_mean: mt,
                mae_tar_std: mt_s,
                identity_smape_obs_mean: col(|m| m.identity_smape_obs).0,
                identity_smape_tar_mean: col(|m| m.identity_smape_tar).0,
            }
        })
        .collect()
}

fn write_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    io::ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
