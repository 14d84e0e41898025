//! Samples, manifest loading, the synthetic generator, splits and PK batch
//! sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kv::{KeyValues, KvError};
use crate::numerics::Tensor;
use crate::smiles::{builtin_pool, canonicalize_str, SmilesError};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const FRAMES_DIR: &str = "frames";
pub const MANIFEST_HEADER: &str = "sample_id,drug_id,smiles,drug_label,moa_label,frames_path";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("manifest line {line}: {reason}")]
    Schema { line: usize, reason: String },
    #[error("drug {0} has inconsistent SMILES or labels")]
    InconsistentDrug(String),
    #[error("manifest line {line}: {detail}")]
    Smiles { line: usize, detail: SmilesError },
    #[error("missing frame feature file {0}")]
    MissingFeatureFile(PathBuf),
    #[error("malformed frame feature file {path}: {reason}")]
    BadFeatureFile { path: PathBuf, reason: String },
    #[error("manifest line {line}: frames have {got} features, dataset has {expected}")]
    FrameDimMismatch { line: usize, expected: usize, got: usize },
    #[error("synthetic spec needs {needed} SMILES, pool has {available}")]
    PoolExhausted { needed: usize, available: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("no samples to split")]
    EmptyInput,
    #[error("split ratio {0} outside (0, 1)")]
    InvalidRatio(f64),
    #[error("{kind} class {label} has a single test sample")]
    SingletonClass { kind: LabelKind, label: usize },
    #[error("batch needs {needed} classes with enough samples, found {available}")]
    InsufficientClasses { needed: usize, available: usize },
    #[error("class {class} has {available} samples, batch needs {needed}")]
    InsufficientSamples { class: usize, needed: usize, available: usize },
}

fn io_err(path: &Path, e: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Drug,
    Moa,
}

impl LabelKind {
    pub fn of(self, s: &Sample) -> usize {
        match self {
            LabelKind::Drug => s.drug_label,
            LabelKind::Moa => s.moa_label,
        }
    }
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelKind::Drug => "drug",
            LabelKind::Moa => "moa",
        })
    }
}

impl FromStr for LabelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "drug" => Ok(LabelKind::Drug),
            "moa" => Ok(LabelKind::Moa),
            other => Err(format!("unknown label kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub drug_id: String,
    /// Canonical SMILES of the drug.
    pub smiles: String,
    pub drug_label: usize,
    pub moa_label: usize,
    /// `[T, f]` per-frame features.
    pub frames: Tensor,
}

/// Checks that every drug has one SMILES string, one drug label and one MoA,
/// and that each drug label maps to a single MoA.
pub fn check_drug_consistency(samples: &[Sample]) -> Result<(), DataError> {
    let mut by_drug: BTreeMap<&str, (&str, usize, usize)> = BTreeMap::new();
    let mut moa_of_label: BTreeMap<usize, (usize, &str)> = BTreeMap::new();
    for s in samples {
        let key = (s.smiles.as_str(), s.drug_label, s.moa_label);
        if *by_drug.entry(&s.drug_id).or_insert(key) != key {
            return Err(DataError::InconsistentDrug(s.drug_id.clone()));
        }
        let (moa, _) = *moa_of_label.entry(s.drug_label).or_insert((s.moa_label, &s.drug_id));
        if moa != s.moa_label {
            return Err(DataError::InconsistentDrug(s.drug_id.clone()));
        }
    }
    Ok(())
}

pub fn write_frames(path: &Path, frames: &Tensor) -> Result<(), DataError> {
    let (t, f) = frames.dims2().ok_or_else(|| DataError::BadFeatureFile {
        path: path.to_path_buf(),
        reason: "frames must be a matrix".into(),
    })?;
    let mut bytes = Vec::with_capacity(8 + 8 * frames.len());
    bytes.extend_from_slice(&(t as u32).to_le_bytes());
    bytes.extend_from_slice(&(f as u32).to_le_bytes());
    for v in frames.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn read_frames(path: &Path) -> Result<Tensor, DataError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(DataError::MissingFeatureFile(path.to_path_buf()))
        }
        Err(e) => return Err(io_err(path, e)),
    };
    let bad = |reason: &str| DataError::BadFeatureFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 {
        return Err(bad("truncated header"));
    }
    let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if t == 0 || f == 0 {
        return Err(bad("empty frame matrix"));
    }
    if bytes.len() != 8 + 8 * t * f {
        return Err(bad("payload length does not match header"));
    }
    let data: Vec<f64> = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite feature value"));
    }
    Ok(Tensor::new(vec![t, f], data).expect("length checked"))
}

/// Outcome of a lenient manifest load.
#[derive(Debug, Clone)]
pub struct LoadReport {
    pub samples: Vec<Sample>,
    /// 1-based line numbers of records skipped for unsupported SMILES.
    pub skipped: Vec<usize>,
}

/// Loads `manifest.csv` (or the given manifest file) with strict SMILES
/// handling.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>, DataError> {
    load_manifest_with(path, false).map(|r| r.samples)
}

/// Like [`load_manifest`]; with `skip_unsupported`, records whose SMILES use
/// stereo or isotope notation are skipped instead of failing the load.
pub fn load_manifest_with(path: &Path, skip_unsupported: bool) -> Result<LoadReport, DataError> {
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    let mut ids = BTreeSet::new();
    let mut frame_dim = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let record = raw.trim();
        if record.is_empty() || (line == 1 && record == MANIFEST_HEADER) {
            continue;
        }
        let schema = |reason: String| DataError::Schema { line, reason };
        let fields: Vec<&str> = record.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(schema(format!("expected 6 fields, found {}", fields.len())));
        }
        for (name, v) in ["sample_id", "drug_id", "smiles"].iter().zip(&fields) {
            if v.is_empty() {
                return Err(schema(format!("empty {name}")));
            }
        }
        if !ids.insert(fields[0].to_string()) {
            return Err(schema(format!("duplicate sample_id {}", fields[0])));
        }
        let drug_label: usize = fields[3]
            .parse()
            .map_err(|_| schema(format!("drug_label {:?} is not a non-negative integer", fields[3])))?;
        let moa_label: usize = fields[4]
            .parse()
            .map_err(|_| schema(format!("moa_label {:?} is not a non-negative integer", fields[4])))?;
        let smiles = match canonicalize_str(fields[2]) {
            Ok(s) => s,
            Err(SmilesError::StereoUnsupported { .. }) if skip_unsupported => {
                skipped.push(line);
                continue;
            }
            Err(detail) => return Err(DataError::Smiles { line, detail }),
        };
        let frames = read_frames(&base.join(fields[5]))?;
        let f = frames.shape()[1];
        match frame_dim {
            None => frame_dim = Some(f),
            Some(expected) if expected != f => {
                return Err(DataError::FrameDimMismatch { line, expected, got: f })
            }
            _ => {}
        }
        samples.push(Sample {
            sample_id: fields[0].to_string(),
            drug_id: fields[1].to_string(),
            smiles,
            drug_label,
            moa_label,
            frames,
        });
    }
    check_drug_consistency(&samples)?;
    Ok(LoadReport { samples, skipped })
}

/// Writes `manifest.csv` and one frame file per sample under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<(), DataError> {
    let frames_dir = dir.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir).map_err(|e| io_err(&frames_dir, e))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for s in samples {
        let rel = format!("{FRAMES_DIR}/{}.bin", s.sample_id);
        write_frames(&dir.join(&rel), &s.frames)?;
        manifest.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.sample_id, s.drug_id, s.smiles, s.drug_label, s.moa_label, rel
        ));
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| io_err(&path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_moas: usize,
    pub drugs_per_moa: usize,
    pub samples_per_drug: usize,
    /// Frames per sequence.
    pub frames: usize,
    /// Features per frame.
    pub frame_dim: usize,
    pub seed: u64,
    /// Length of the drug direction in units of the per-frame noise.
    pub separability: f64,
    /// 0 keeps the full drug offsets, 1 collapses every drug onto its MoA.
    pub confounding: f64,
    /// Norm of the unconfounded drug offset relative to the unit MoA
    /// direction.
    pub offset_scale: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_moas: 4,
            drugs_per_moa: 3,
            samples_per_drug: 40,
            frames: 16,
            frame_dim: 32,
            seed: 7,
            separability: 2.5,
            confounding: 0.2,
            offset_scale: DEFAULT_OFFSET_SCALE,
        }
    }
}

pub const DEFAULT_OFFSET_SCALE: f64 = 0.35;

const SPEC_KEYS: &[&str] = &[
    "num_moas",
    "drugs_per_moa",
    "samples_per_drug",
    "frames",
    "frame_dim",
    "seed",
    "separability",
    "confounding",
    "offset_scale",
];

impl SyntheticSpec {
    pub fn num_drugs(&self) -> usize {
        self.num_moas * self.drugs_per_moa
    }

    pub fn num_samples(&self) -> usize {
        self.num_drugs() * self.samples_per_drug
    }

    /// Reads a key=value spec file; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let kv = KeyValues::parse(text)?;
        kv.reject_unknown(SPEC_KEYS)?;
        let mut s = SyntheticSpec::default();
        kv.set("num_moas", &mut s.num_moas)?;
        kv.set("drugs_per_moa", &mut s.drugs_per_moa)?;
        kv.set("samples_per_drug", &mut s.samples_per_drug)?;
        kv.set("frames", &mut s.frames)?;
        kv.set("frame_dim", &mut s.frame_dim)?;
        kv.set("seed", &mut s.seed)?;
        kv.set("separability", &mut s.separability)?;
        kv.set("confounding", &mut s.confounding)?;
        kv.set("offset_scale", &mut s.offset_scale)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.num_moas == 0 || self.drugs_per_moa == 0 || self.samples_per_drug == 0 {
            return bad("counts must be positive");
        }
        if self.frames == 0 || self.frame_dim == 0 {
            return bad("frame shape must be positive");
        }
        if !(self.separability >= 0.0 && self.separability.is_finite()) {
            return bad("separability must be a finite value >= 0");
        }
        if !(0.0..=1.0).contains(&self.confounding) {
            return bad("confounding must lie in [0, 1]");
        }
        if !(self.offset_scale >= 0.0 && self.offset_scale.is_finite()) {
            return bad("offset_scale must be a finite value >= 0");
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Drug `k` of MoA `m` gets drug label `m * drugs_per_moa + k`; samples are
/// ordered by drug.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>, DataError> {
    spec.validate()?;
    let pool = builtin_pool();
    let num_drugs = spec.num_drugs();
    if num_drugs > pool.len() {
        return Err(DataError::PoolExhausted {
            needed: num_drugs,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let picks = index::sample(&mut rng, pool.len(), num_drugs).into_vec();
    let f = spec.frame_dim;
    let offset = (1.0 - spec.confounding) * spec.offset_scale;
    let mut samples = Vec::with_capacity(spec.num_samples());
    for m in 0..spec.num_moas {
        let moa_dir = unit_vector(&mut rng, f);
        for k in 0..spec.drugs_per_moa {
            let drug = m * spec.drugs_per_moa + k;
            let jitter = unit_vector(&mut rng, f);
            let center: Vec<f64> = moa_dir
                .iter()
                .zip(&jitter)
                .map(|(a, b)| (a + offset * b) * spec.separability)
                .collect();
            for s in 0..spec.samples_per_drug {
                let mut data = Vec::with_capacity(spec.frames * f);
                for _ in 0..spec.frames {
                    for c in &center {
                        let noise: f64 = rng.sample(StandardNormal);
                        data.push(c + noise);
                    }
                }
                samples.push(Sample {
                    sample_id: format!("d{drug:03}_s{s:03}"),
                    drug_id: format!("drug{drug:03}"),
                    smiles: pool[picks[drug]].to_string(),
                    drug_label: drug,
                    moa_label: m,
                    frames: Tensor::new(vec![spec.frames, f], data).expect("shape matches"),
                });
            }
        }
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Each drug contributes samples to both sides.
    #[default]
    WithinDrug,
    /// Whole drugs go to one side.
    DrugDisjoint,
}

impl FromStr for SplitMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "within_drug" => Ok(SplitMode::WithinDrug),
            "drug_disjoint" => Ok(SplitMode::DrugDisjoint),
            other => Err(format!("unknown split mode {other:?}")),
        }
    }
}

fn train_count(n: usize, ratio: f64) -> usize {
    let k = (ratio * n as f64).round() as usize;
    if n >= 2 {
        k.clamp(1, n - 1)
    } else {
        k.min(n)
    }
}

fn group_by_drug(samples: &[Sample]) -> Vec<Vec<usize>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let g = groups.entry(&s.drug_id).or_default();
        if g.is_empty() {
            order.push(&s.drug_id);
        }
        g.push(i);
    }
    order.into_iter().map(|d| groups.remove(d).unwrap()).collect()
}

/// Stratified train/test split. Both sides keep the input order.
pub fn split_train_test(
    samples: &[Sample],
    ratio: f64,
    seed: u64,
    mode: SplitMode,
) -> Result<(Vec<Sample>, Vec<Sample>), DataError> {
    if samples.is_empty() {
        return Err(DataError::EmptyInput);
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::InvalidRatio(ratio));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = group_by_drug(samples);
    let mut in_train = vec![false; samples.len()];
    match mode {
        SplitMode::WithinDrug => {
            for mut g in groups {
                g.shuffle(&mut rng);
                for &i in &g[..train_count(g.len(), ratio)] {
                    in_train[i] = true;
                }
            }
        }
        SplitMode::DrugDisjoint => {
            let mut g = groups;
            g.shuffle(&mut rng);
            let k = train_count(g.len(), ratio);
            for &i in g[..k].iter().flatten() {
                in_train[i] = true;
            }
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, t) in samples.iter().zip(in_train) {
        if t { train.push(s.clone()) } else { test.push(s.clone()) }
    }
    Ok((train, test))
}

/// Picks one query per class of `kind` uniformly at random; the rest of the
/// test set is the gallery. Both sides keep the input order.
pub fn split_query_gallery(
    test: &[Sample],
    kind: LabelKind,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>), DataError> {
    if test.is_empty() {
        return Err(DataError::EmptyInput);
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in test.iter().enumerate() {
        by_class.entry(kind.of(s)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_query = vec![false; test.len()];
    for (&label, members) in &by_class {
        if members.len() < 2 {
            return Err(DataError::SingletonClass { kind, label });
        }
        is_query[members[rng.random_range(0..members.len())]] = true;
    }
    let (mut query, mut gallery) = (Vec::new(), Vec::new());
    for (s, q) in test.iter().zip(is_query) {
        if q { query.push(s.clone()) } else { gallery.push(s.clone()) }
    }
    Ok((query, gallery))
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

impl DatasetSplit {
    /// Train/test split followed by a query/gallery split of the test set
    /// over classes of `query_kind`.
    pub fn new(
        samples: &[Sample],
        ratio: f64,
        mode: SplitMode,
        query_kind: LabelKind,
        seed: u64,
    ) -> Result<Self, DataError> {
        let (train, test) = split_train_test(samples, ratio, seed, mode)?;
        let (query, gallery) = split_query_gallery(&test, query_kind, seed.wrapping_add(1))?;
        Ok(DatasetSplit {
            train,
            test,
            query,
            gallery,
        })
    }
}

/// Indices of a `p * k` batch: `p` distinct classes of `kind` with `k`
/// distinct samples each, grouped by class. A pure function of
/// `(samples, seed, step)`.
pub fn pk_sample(
    samples: &[Sample],
    p: usize,
    k: usize,
    kind: LabelKind,
    seed: u64,
    step: u64,
) -> Result<Vec<usize>, DataError> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(kind.of(s)).or_default().push(i);
    }
    if by_class.len() < p {
        return Err(DataError::InsufficientClasses {
            needed: p,
            available: by_class.len(),
        });
    }
    let eligible: Vec<&Vec<usize>> = by_class.values().filter(|m| m.len() >= k).collect();
    if eligible.len() < p {
        let (&class, members) = by_class.iter().find(|(_, m)| m.len() < k).expect("some class is short");
        return Err(DataError::InsufficientSamples {
            class,
            needed: k,
            available: members.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let mut batch = Vec::with_capacity(p * k);
    for c in index::sample(&mut rng, eligible.len(), p) {
        let members = eligible[c];
        batch.extend(index::sample(&mut rng, members.len(), k).into_iter().map(|j| members[j]));
    }
    Ok(batch)
}

/// Sorted distinct labels of `kind`.
pub fn class_labels(samples: &[Sample], kind: LabelKind) -> Vec<usize> {
    samples
        .iter()
        .map(|s| kind.of(s))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}
