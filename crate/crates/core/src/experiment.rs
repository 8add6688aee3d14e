//! Experiment plumbing: flat `key = value` configs, binary checkpoints, the
//! result CSV, reconstruction image grids, and the four commands the CLI
//! exposes (`train`, `attack`, `evaluate`, `report`).
//!
//! Determinism is the organizing principle. A config names every seed
//! explicitly (there are no wall-clock defaults), commands derive their
//! random streams from those seeds alone, and the CSV emitter writes
//! `wall_time_s = 0` unless timing is explicitly requested — so rerunning a
//! config reproduces its result files byte for byte.
//!
//! ## Config keys
//!
//! ```text
//! # data
//! dataset = digits              # display name; "synth" selects the built-in blobs
//! images = path/to/images-idx   # IDX image file (omit for synth)
//! labels = path/to/labels-idx   # IDX label file
//! synth_classes = 3             # synth fixture shape
//! synth_per_class = 20
//! synth_image_size = 8
//! split_fraction = 0.7
//! train_limit = 5000            # cap on training images after the split
//!
//! # cell
//! defense = sca(0.5)            # see the defense id grammar
//! threat_model = end_to_end     # or split
//! seed = 1                      # master seed, required
//! seed_model = ...              # optional per-stream overrides
//! seed_attack = ...
//! seed_split = ...
//!
//! # defense training
//! epochs = 10
//! batch = 32
//! learning_rate = 0.01
//! dict_eta = 0.01               # reconstruction-update rate for dictionaries
//! lca_tau = 50                  # sparse-solver clock at experiment scale
//! lca_iterations = 500
//!
//! # attack
//! attack_epochs = 30
//! attack_batch = 16
//! attack_learning_rate = 0.3
//! surrogate_hidden = 512,512
//! attacker_data = holdout       # or train_fraction(0.25)
//!
//! # output
//! out_dir = runs
//! checkpoint = runs/model.ckpt  # defaults to a name derived from the cell
//! record_wall_time = false
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::attacks::{
    self, AttackConfig, AttackerData, ReportContext, Seeds, ThreatModel,
};
use crate::data::{self, Dataset};
use crate::defenses::{self, DefenseKind, DefenseSpec, LeakTransform, ThreatArch};
use crate::error::{Error, Result};
use crate::lca::Dictionary;
use crate::metrics::FeatureExtractor;
use crate::nn::{self, Layer, LayerKind, Model, ModelSpec, TrainConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Seed and epoch count for the frozen reference classifier whose
/// penultimate layer defines the feature space of the distributional
/// metric. Pinned so every run of a dataset shares one feature space.
const FX_SEED: u64 = 9000;
const FX_EPOCHS: usize = 10;

/// Everything one experiment cell needs, fully resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: Option<String>,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_image_size: usize,
    pub split_fraction: f64,
    pub train_limit: Option<usize>,

    pub defense: DefenseKind,
    pub threat_arch: ThreatArch,
    pub seeds: Seeds,

    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub dict_eta: f64,
    pub lca_tau: f64,
    pub lca_iterations: usize,

    pub attack: AttackConfig,

    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub record_wall_time: bool,
}

/// Raw `key = value` lines with their line numbers, consumed field by field
/// so leftovers can be reported as unknown keys.
struct Fields(HashMap<String, (String, usize)>);

impl Fields {
    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.0.remove(key)
    }

    fn num<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => v.parse::<T>().map_err(|_| Error::Config {
                line,
                message: format!("bad value `{v}` for `{key}`"),
            }),
        }
    }

    fn flag(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => match v.as_str() {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config {
                    line,
                    message: format!("`{key}` must be true or false, got `{v}`"),
                }),
            },
        }
    }
}

/// Parse the flat config format: one `key = value` per line, `#` comments,
/// blank lines ignored. Errors carry 1-based line numbers.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut map: HashMap<String, (String, usize)> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let Some((k, v)) = t.split_once('=') else {
            return Err(Error::Config {
                line,
                message: format!("expected `key = value`, got `{t}`"),
            });
        };
        let key = k.trim().to_string();
        let value = v.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config {
                line,
                message: "missing key before `=`".into(),
            });
        }
        if let Some((_, first)) = map.insert(key.clone(), (value, line)) {
            return Err(Error::Config {
                line,
                message: format!("duplicate key `{key}` (first set on line {first})"),
            });
        }
    }
    let mut f = Fields(map);

    let defense = match f.take("defense") {
        None => {
            return Err(Error::Parameter("config must set `defense`".into()));
        }
        Some((v, line)) => DefenseKind::parse(&v).map_err(|e| match e {
            // Reserved ids stay loudly out of scope; everything else gets
            // the line number attached.
            Error::OutOfScope(s) => Error::OutOfScope(s),
            other => Error::Config {
                line,
                message: other.to_string(),
            },
        })?,
    };

    let threat_arch = match f.take("threat_model") {
        None => ThreatArch::EndToEnd,
        Some((v, line)) => ThreatArch::parse(&v).map_err(|e| Error::Config {
            line,
            message: e.to_string(),
        })?,
    };

    let master = match f.take("seed") {
        None => {
            return Err(Error::Parameter(
                "config must set `seed` explicitly — there is no default".into(),
            ));
        }
        Some((v, line)) => v.parse::<u64>().map_err(|_| Error::Config {
            line,
            message: format!("bad value `{v}` for `seed`"),
        })?,
    };
    let mut seeds = Seeds::from_master(master);
    seeds.model = f.num("seed_model", seeds.model)?;
    seeds.attack = f.num("seed_attack", seeds.attack)?;
    seeds.split = f.num("seed_split", seeds.split)?;

    let attacker_data = match f.take("attacker_data") {
        None => AttackerData::Holdout,
        Some((v, line)) => {
            if v == "holdout" {
                AttackerData::Holdout
            } else if let Some(inner) = v
                .strip_prefix("train_fraction(")
                .and_then(|s| s.strip_suffix(')'))
            {
                let frac = inner.parse::<f64>().map_err(|_| Error::Config {
                    line,
                    message: format!("bad fraction `{inner}` in attacker_data"),
                })?;
                AttackerData::TrainFraction(frac)
            } else {
                return Err(Error::Config {
                    line,
                    message: format!(
                        "attacker_data must be holdout or train_fraction(F), got `{v}`"
                    ),
                });
            }
        }
    };

    let surrogate_hidden = match f.take("surrogate_hidden") {
        None => AttackConfig::default().surrogate_hidden,
        Some((v, line)) => v
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config {
                line,
                message: format!("bad width list `{v}` for surrogate_hidden"),
            })?,
    };

    let attack_defaults = AttackConfig::default();
    let attack = AttackConfig {
        surrogate_hidden,
        epochs: f.num("attack_epochs", attack_defaults.epochs)?,
        batch_size: f.num("attack_batch", attack_defaults.batch_size)?,
        learning_rate: f.num("attack_learning_rate", attack_defaults.learning_rate)?,
        attacker_data,
    };
    attack.validate()?;

    let train_defaults = TrainConfig::default();
    let cfg = ExperimentConfig {
        dataset: f.take("dataset").map(|(v, _)| v),
        images: f.take("images").map(|(v, _)| PathBuf::from(v)),
        labels: f.take("labels").map(|(v, _)| PathBuf::from(v)),
        synth_classes: f.num("synth_classes", 3)?,
        synth_per_class: f.num("synth_per_class", 20)?,
        synth_image_size: f.num("synth_image_size", 8)?,
        split_fraction: f.num("split_fraction", 0.7)?,
        train_limit: match f.take("train_limit") {
            None => None,
            Some((v, line)) => Some(v.parse::<usize>().map_err(|_| Error::Config {
                line,
                message: format!("bad value `{v}` for `train_limit`"),
            })?),
        },
        defense,
        threat_arch,
        seeds,
        epochs: f.num("epochs", train_defaults.epochs)?,
        batch: f.num("batch", train_defaults.batch_size)?,
        learning_rate: f.num("learning_rate", train_defaults.learning_rate)?,
        dict_eta: f.num("dict_eta", train_defaults.dict_eta)?,
        // At the reference solver clock (tau = 1000), 500 iterations only
        // integrate half a time constant. Experiments shrink tau instead of
        // multiplying iterations, so the code still settles.
        lca_tau: f.num("lca_tau", 50.0)?,
        lca_iterations: f.num("lca_iterations", 500)?,
        attack,
        out_dir: f
            .take("out_dir")
            .map(|(v, _)| PathBuf::from(v))
            .unwrap_or_else(|| PathBuf::from("runs")),
        checkpoint: f.take("checkpoint").map(|(v, _)| PathBuf::from(v)),
        record_wall_time: f.flag("record_wall_time", false)?,
    };

    if let Some((key, (_, line))) = f
        .0
        .iter()
        .min_by_key(|(_, (_, line))| *line)
        .map(|(k, v)| (k.clone(), v.clone()))
    {
        return Err(Error::Config {
            line,
            message: format!("unknown key `{key}`"),
        });
    }
    if !(cfg.split_fraction > 0.0 && cfg.split_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "split_fraction must be in (0, 1), got {}",
            cfg.split_fraction
        )));
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}

impl ExperimentConfig {
    /// Filesystem-safe tag for this cell: defense id with punctuation
    /// flattened, plus the threat model and the master seed.
    pub fn cell_tag(&self) -> String {
        let mut slug = String::new();
        for ch in self.defense.id().chars() {
            if ch.is_ascii_alphanumeric() || ch == '.' || ch == '_' {
                slug.push(ch);
            } else if !slug.ends_with('_') {
                slug.push('_');
            }
        }
        let slug = slug.trim_end_matches('_');
        format!("{slug}-{}-seed{}", self.threat_arch, self.seeds.master)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join(format!("model-{}.ckpt", self.cell_tag())))
    }

    pub fn results_path(&self) -> PathBuf {
        self.out_dir.join("results.csv")
    }

    fn dataset_name(&self, loaded: &str) -> String {
        self.dataset.clone().unwrap_or_else(|| loaded.to_string())
    }
}

/// Load the configured dataset: IDX files when paths are given, the
/// deterministic synthetic blobs otherwise.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let mut ds = match (&cfg.images, &cfg.labels) {
        (Some(images), Some(labels)) => data::load_idx(images, labels)?,
        (None, None) => data::synth_gaussian_blobs(
            cfg.synth_classes,
            cfg.synth_per_class,
            cfg.synth_image_size,
            cfg.seeds.split,
        )?,
        _ => {
            return Err(Error::Parameter(
                "set both `images` and `labels`, or neither for synthetic data".into(),
            ));
        }
    };
    ds.meta.name = cfg.dataset_name(&ds.meta.name);
    Ok(ds)
}

/// First `k` records of a dataset as an owned copy.
fn take_prefix(ds: &Dataset, k: usize) -> Result<Dataset> {
    let k = k.min(ds.len());
    let indices: Vec<usize> = (0..k).collect();
    let (images, labels) = ds.batch(&indices);
    Dataset::new(images, labels, ds.meta.clone())
}

/// The 70/30 split with the train-side cap applied.
fn split_dataset(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(Dataset, Dataset)> {
    let (train, test) = data::split(ds, cfg.split_fraction, cfg.seeds.split)?;
    let train = match cfg.train_limit {
        Some(limit) => take_prefix(&train, limit)?,
        None => train,
    };
    Ok((train, test))
}

/// Build the model spec, training config, and leak transform for this cell,
/// with the config's seed and solver overrides applied.
pub fn build_cell(
    cfg: &ExperimentConfig,
    meta: &crate::data::DatasetMeta,
) -> Result<(ModelSpec, TrainConfig, LeakTransform)> {
    let (mut spec, mut train, transform) = defenses::build(
        &DefenseSpec {
            kind: cfg.defense,
            threat_arch: cfg.threat_arch,
        },
        meta,
    )?;
    spec.seed = cfg.seeds.model;
    train.epochs = cfg.epochs;
    train.batch_size = cfg.batch;
    train.learning_rate = cfg.learning_rate;
    train.dict_eta = cfg.dict_eta;
    for layer in &mut spec.layers {
        if let LayerKind::Scl { lca, .. } = &mut layer.kind {
            lca.tau = cfg.lca_tau;
            lca.iterations = cfg.lca_iterations;
        }
    }
    Ok((spec, train, transform))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"SCA1";

fn ckpt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::FileFormat {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Named tensors a checkpoint stores for a model: trainable parameters,
/// batch-norm running statistics, and dictionary atoms.
fn named_tensors(model: &Model) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::Linear { w, b } => {
                out.push((format!("layer{i}.w"), w));
                out.push((format!("layer{i}.b"), b));
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                out.push((format!("layer{i}.gamma"), gamma));
                out.push((format!("layer{i}.beta"), beta));
                out.push((format!("layer{i}.running_mean"), running_mean));
                out.push((format!("layer{i}.running_var"), running_var));
            }
            Layer::Scl { dict, .. } => {
                out.push((format!("layer{i}.dict"), dict.atoms()));
            }
            Layer::Relu | Layer::Sigmoid | Layer::Flatten => {}
        }
    }
    out
}

/// Write a model's tensors: magic, record count, then little-endian records
/// of (name length, name bytes, rank, extents, 64-bit-real payload).
pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let records = named_tensors(model);
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, tensor) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &extent in tensor.shape() {
            buf.extend_from_slice(&(extent as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct CkptReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> CkptReader<'a> {
    fn chunk(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ckpt_err(
                self.path,
                format!(
                    "truncated: wanted {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.chunk(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.chunk(8)?.try_into().unwrap()))
    }
}

/// Read every record of a checkpoint into name → tensor.
fn read_records(path: &Path) -> Result<HashMap<String, Tensor>> {
    let bytes = fs::read(path)?;
    let mut r = CkptReader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let magic = r.chunk(4)?;
    if magic != CKPT_MAGIC {
        return Err(ckpt_err(
            path,
            format!("bad magic {magic:?}, expected {CKPT_MAGIC:?}"),
        ));
    }
    let count = r.u32()? as usize;
    let mut records = HashMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.chunk(name_len)?)
            .map_err(|_| ckpt_err(path, "record name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(ckpt_err(path, format!("implausible rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let payload = r.chunk(len * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(&shape, data)
            .map_err(|e| ckpt_err(path, format!("record `{name}`: {e}")))?;
        if records.insert(name.clone(), tensor).is_some() {
            return Err(ckpt_err(path, format!("duplicate record `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(ckpt_err(
            path,
            format!("{} trailing bytes after the last record", bytes.len() - r.pos),
        ));
    }
    Ok(records)
}

/// Rebuild a model from its spec and a checkpoint's tensors. Every expected
/// tensor must be present with the right shape, and no extras may remain —
/// a checkpoint from a different architecture fails loudly.
pub fn load_checkpoint(path: &Path, spec: ModelSpec) -> Result<Model> {
    let mut records = read_records(path)?;
    let mut model = Model::init(spec)?;
    for (i, layer) in model.layers.iter_mut().enumerate() {
        let mut fill = |name: String, slot: &mut Tensor| -> Result<()> {
            let tensor = records
                .remove(&name)
                .ok_or_else(|| ckpt_err(path, format!("missing record `{name}`")))?;
            if tensor.shape() != slot.shape() {
                return Err(ckpt_err(
                    path,
                    format!(
                        "record `{name}` has shape {:?}, model wants {:?}",
                        tensor.shape(),
                        slot.shape()
                    ),
                ));
            }
            *slot = tensor;
            Ok(())
        };
        match layer {
            Layer::Linear { w, b } => {
                fill(format!("layer{i}.w"), w)?;
                fill(format!("layer{i}.b"), b)?;
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                fill(format!("layer{i}.gamma"), gamma)?;
                fill(format!("layer{i}.beta"), beta)?;
                fill(format!("layer{i}.running_mean"), running_mean)?;
                fill(format!("layer{i}.running_var"), running_var)?;
            }
            Layer::Scl { dict, .. } => {
                let name = format!("layer{i}.dict");
                let atoms = records
                    .remove(&name)
                    .ok_or_else(|| ckpt_err(path, format!("missing record `{name}`")))?;
                if atoms.shape() != dict.atoms().shape() {
                    return Err(ckpt_err(
                        path,
                        format!(
                            "record `{name}` has shape {:?}, model wants {:?}",
                            atoms.shape(),
                            dict.atoms().shape()
                        ),
                    ));
                }
                *dict = Dictionary::from_normalized(atoms, dict.stride())
                    .map_err(|e| ckpt_err(path, format!("record `{name}`: {e}")))?;
            }
            Layer::Relu | Layer::Sigmoid | Layer::Flatten => {}
        }
    }
    if let Some(name) = records.keys().next() {
        return Err(ckpt_err(
            path,
            format!("unexpected record `{name}` — checkpoint does not match the model"),
        ));
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// The frozen feature space
// ---------------------------------------------------------------------------

fn fx_path(cfg: &ExperimentConfig, dataset: &str) -> PathBuf {
    cfg.out_dir.join(format!("features-{dataset}.ckpt"))
}

fn fx_spec(meta: &crate::data::DatasetMeta) -> Result<ModelSpec> {
    let (mut spec, _, _) = defenses::build(
        &DefenseSpec {
            kind: DefenseKind::None,
            threat_arch: ThreatArch::EndToEnd,
        },
        meta,
    )?;
    spec.seed = FX_SEED;
    Ok(spec)
}

fn fx_provenance(dataset: &str) -> String {
    format!("{dataset} reference classifier, seed {FX_SEED}, {FX_EPOCHS} epochs")
}

/// Train the reference classifier if its checkpoint is absent, then load it.
/// The classifier is a plain end-to-end stack trained with pinned seeds, so
/// every cell of a dataset scores distributions in the same feature space.
fn ensure_feature_extractor(cfg: &ExperimentConfig, train: &Dataset) -> Result<FeatureExtractor> {
    let path = fx_path(cfg, &train.meta.name);
    if !path.exists() {
        log::info!("training reference feature classifier → {}", path.display());
        let spec = fx_spec(&train.meta)?;
        let mut model = Model::init(spec)?;
        let train_cfg = TrainConfig {
            epochs: FX_EPOCHS,
            ..TrainConfig::default()
        };
        let mut rng = Rng::new(FX_SEED).split(1);
        for _ in 0..FX_EPOCHS {
            nn::train_epoch(&mut model, train, &train_cfg, &mut rng)?;
        }
        save_checkpoint(&path, &model)?;
    }
    let model = load_checkpoint(&path, fx_spec(&train.meta)?)?;
    FeatureExtractor::new(model, defenses::TAP_LAST_HIDDEN, &fx_provenance(&train.meta.name))
}

// ---------------------------------------------------------------------------
// Result rows
// ---------------------------------------------------------------------------

pub const CSV_HEADER: &str = "dataset,defense,threat_model,psnr,ssim,fid,accuracy,seed,wall_time_s";

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub dataset: String,
    pub defense: String,
    pub threat_model: String,
    pub psnr: f64,
    pub ssim: f64,
    pub fid: f64,
    pub accuracy: f64,
    pub seed: u64,
    pub wall_time_s: f64,
}

/// Quote a CSV field only when it needs it (commas or quotes — defense ids
/// like `dp_sgd(1,0.5)` do).
fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Split one CSV line honoring double-quoted fields.
fn csv_split(line: &str) -> Result<Vec<String>> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(ch) = chars.next() {
        match ch {
            '"' if quoted => {
                if chars.peek() == Some(&'"') {
                    chars.next();
                    cur.push('"');
                } else {
                    quoted = false;
                }
            }
            '"' if cur.is_empty() => quoted = true,
            ',' if !quoted => {
                fields.push(std::mem::take(&mut cur));
            }
            _ => cur.push(ch),
        }
    }
    if quoted {
        return Err(Error::Parameter(format!("unterminated quote in `{line}`")));
    }
    fields.push(cur);
    Ok(fields)
}

impl ResultRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            csv_field(&self.dataset),
            csv_field(&self.defense),
            csv_field(&self.threat_model),
            self.psnr,
            self.ssim,
            self.fid,
            self.accuracy,
            self.seed,
            self.wall_time_s
        )
    }

    pub fn from_csv(line: &str) -> Result<ResultRow> {
        let fields = csv_split(line)?;
        if fields.len() != 9 {
            return Err(Error::Parameter(format!(
                "result row has {} fields, expected 9: `{line}`",
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| Error::Parameter(format!("bad number `{}` in `{line}`", fields[i])))
        };
        Ok(ResultRow {
            dataset: fields[0].clone(),
            defense: fields[1].clone(),
            threat_model: fields[2].clone(),
            psnr: num(3)?,
            ssim: num(4)?,
            fid: num(5)?,
            accuracy: num(6)?,
            seed: fields[7]
                .parse::<u64>()
                .map_err(|_| Error::Parameter(format!("bad seed `{}` in `{line}`", fields[7])))?,
            wall_time_s: num(8)?,
        })
    }
}

/// Append a row to the results CSV, writing the header first when the file
/// is new.
pub fn append_result(path: &Path, row: &ResultRow) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let new = !path.exists();
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if new {
        writeln!(file, "{CSV_HEADER}")?;
    }
    writeln!(file, "{}", row.to_csv())?;
    Ok(())
}

/// Read result rows from CSV files, skipping header lines.
pub fn load_rows(paths: &[PathBuf]) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for path in paths {
        let text = fs::read_to_string(path)?;
        for line in text.lines() {
            let t = line.trim();
            if t.is_empty() || t == CSV_HEADER {
                continue;
            }
            rows.push(ResultRow::from_csv(t)?);
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Image grids
// ---------------------------------------------------------------------------

/// Encode an image tensor as binary PGM (1 channel) or PPM (3 channels),
/// row-major, 255 max value. Values are clamped to [0,1] then scaled.
pub fn encode_image(image: &Tensor) -> Result<Vec<u8>> {
    if image.rank() != 3 {
        return Err(Error::dims("encode_image", image.shape(), &[3]));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let byte = |v: f64| -> u8 { (v.clamp(0.0, 1.0) * 255.0).round() as u8 };
    let mut out = Vec::new();
    match c {
        1 => {
            out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
            out.extend(image.data().iter().map(|&v| byte(v)));
        }
        3 => {
            out.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
            let plane = h * w;
            for i in 0..plane {
                for ch in 0..3 {
                    out.push(byte(image.data()[ch * plane + i]));
                }
            }
        }
        _ => {
            return Err(Error::Parameter(format!(
                "image export supports 1 or 3 channels, got {c}"
            )));
        }
    }
    Ok(out)
}

/// Tile originals (top row) above reconstructions (bottom row), up to
/// `count` columns.
pub fn pair_grid(originals: &Tensor, recons: &Tensor, count: usize) -> Result<Tensor> {
    if originals.shape() != recons.shape() || originals.rank() != 4 {
        return Err(Error::dims("pair_grid", originals.shape(), recons.shape()));
    }
    let (n, c, h, w) = (
        originals.shape()[0],
        originals.shape()[1],
        originals.shape()[2],
        originals.shape()[3],
    );
    let cols = count.min(n).max(1);
    let mut grid = Tensor::zeros(&[c, 2 * h, cols * w]);
    let gw = cols * w;
    for col in 0..cols {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let src = ((col * c + ch) * h + y) * w + x;
                    grid.data_mut()[(ch * 2 * h + y) * gw + col * w + x] = originals.data()[src];
                    grid.data_mut()[(ch * 2 * h + h + y) * gw + col * w + x] = recons.data()[src];
                }
            }
        }
    }
    Ok(grid)
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, encode_image(image)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Train the cell's defense model, making sure the dataset's reference
/// feature classifier exists, and write the model checkpoint. Returns the
/// checkpoint path.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)?;
    let ds = load_dataset(cfg)?;
    let (train, test) = split_dataset(cfg, &ds)?;
    ensure_feature_extractor(cfg, &train)?;

    let (spec, train_cfg, _) = build_cell(cfg, &train.meta)?;
    let mut model = Model::init(spec)?;
    let mut rng = Rng::new(cfg.seeds.model).split(1);
    let warm: Vec<usize> = (0..train.len().min(train_cfg.batch_size.max(32))).collect();
    let (warm_batch, _) = train.batch(&warm);
    model.warm_start_dictionaries(&warm_batch, &mut rng)?;
    for epoch in 0..train_cfg.epochs {
        let loss = nn::train_epoch(&mut model, &train, &train_cfg, &mut rng)?;
        log::info!("epoch {epoch}: train loss {loss:.6}");
    }
    let train_acc = nn::evaluate(&model, &train)?;
    let test_acc = nn::evaluate(&model, &test)?;
    println!(
        "trained {} [{}]: train accuracy {train_acc:.4}, test accuracy {test_acc:.4}",
        cfg.defense.id(),
        cfg.threat_arch
    );
    let path = cfg.checkpoint_path();
    save_checkpoint(&path, &model)?;
    Ok(path)
}

/// Report the checkpoint's accuracy on the train and test splits.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<(f64, f64)> {
    let ds = load_dataset(cfg)?;
    let (train, test) = split_dataset(cfg, &ds)?;
    let (spec, _, _) = build_cell(cfg, &train.meta)?;
    let model = load_checkpoint(&cfg.checkpoint_path(), spec)?;
    let train_acc = nn::evaluate(&model, &train)?;
    let test_acc = nn::evaluate(&model, &test)?;
    println!(
        "{} [{}]: train accuracy {train_acc:.4}, test accuracy {test_acc:.4}",
        cfg.defense.id(),
        cfg.threat_arch
    );
    Ok((train_acc, test_acc))
}

/// Run the inversion attack against the cell's checkpoint: harvest leaks,
/// train the inverter, reconstruct the training split, append the result
/// row, and write a side-by-side reconstruction grid.
pub fn cmd_attack(cfg: &ExperimentConfig) -> Result<ResultRow> {
    fs::create_dir_all(&cfg.out_dir)?;
    let ds = load_dataset(cfg)?;
    let (train, test) = split_dataset(cfg, &ds)?;
    let fx = ensure_feature_extractor(cfg, &train)?;
    let (spec, _, transform) = build_cell(cfg, &train.meta)?;
    let target = load_checkpoint(&cfg.checkpoint_path(), spec)?;
    let tm = ThreatModel::new(cfg.threat_arch);

    let started = Instant::now();
    let mut rng = Rng::new(cfg.seeds.attack);
    let queries_owned;
    let queries: &Dataset = match cfg.attack.attacker_data {
        AttackerData::Holdout => &test,
        AttackerData::TrainFraction(frac) => {
            let k = ((train.len() as f64 * frac).ceil() as usize).max(1);
            queries_owned = take_prefix(&train, k)?;
            &queries_owned
        }
    };
    let pairs = attacks::harvest(&target, &transform, &tm, queries, &mut rng)?;
    let inverter = attacks::train_inverter(&pairs, &cfg.attack, &mut rng)?;
    let report = attacks::reconstruct(
        &inverter,
        &target,
        &transform,
        &tm,
        &train,
        &ReportContext {
            features: &fx,
            defense: cfg.defense.id(),
            seeds: cfg.seeds,
        },
        &mut rng,
    )?;
    let wall_time_s = if cfg.record_wall_time {
        started.elapsed().as_secs_f64()
    } else {
        0.0
    };

    let row = ResultRow {
        dataset: report.dataset.clone(),
        defense: report.defense.clone(),
        threat_model: report.threat_model.clone(),
        psnr: report.mean_psnr,
        ssim: report.mean_ssim,
        fid: report.fid,
        accuracy: report.accuracy,
        seed: cfg.seeds.master,
        wall_time_s,
    };
    append_result(&cfg.results_path(), &row)?;

    let grid = pair_grid(train.images(), &report.reconstructions, 8)?;
    let ext = if train.meta.dims[0] == 3 { "ppm" } else { "pgm" };
    write_image(
        &cfg.out_dir.join(format!("recon-{}.{ext}", cfg.cell_tag())),
        &grid,
    )?;
    println!(
        "attack on {} [{}]: psnr {:.2}, ssim {:.4}, fid {:.3}, accuracy {:.4}",
        row.defense, row.threat_model, row.psnr, row.ssim, row.fid, row.accuracy
    );
    Ok(row)
}

/// Render rows as a Markdown table per dataset, strongest defense last
/// (sorted by descending PSNR — lower rows resisted the attack better).
/// Ties break lexicographically by defense id, then threat model and seed.
pub fn cmd_report(rows: &[ResultRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Parameter("report needs at least one result row".into()));
    }
    let mut groups: BTreeMap<&str, Vec<&ResultRow>> = BTreeMap::new();
    for row in rows {
        groups.entry(&row.dataset).or_default().push(row);
    }
    let mut out = String::new();
    for (dataset, mut group) in groups {
        group.sort_by(|a, b| {
            b.psnr
                .partial_cmp(&a.psnr)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.defense.cmp(&b.defense))
                .then_with(|| a.threat_model.cmp(&b.threat_model))
                .then_with(|| a.seed.cmp(&b.seed))
        });
        out.push_str(&format!("## {dataset}\n\n"));
        out.push_str("lower rows = better defense\n\n");
        out.push_str("| Defense | Threat model | PSNR ⇊ | SSIM ⇊ | FID ⇈ | Accuracy | Seed |\n");
        out.push_str("|---|---|---|---|---|---|---|\n");
        for row in group {
            out.push_str(&format!(
                "| {} | {} | {:.2} | {:.4} | {:.3} | {:.4} | {} |\n",
                row.defense, row.threat_model, row.psnr, row.ssim, row.fid, row.accuracy, row.seed
            ));
        }
        out.push('\n');
    }
    Ok(out)
}
