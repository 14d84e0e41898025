use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{class_labels, split_query_gallery, split_train_test, DatasetSplit, LabelKind, Sample, SplitMode};
use crate::losses::{
    build_supervision, center_loss, classification_ce, hard_triplet_loss, msc_loss, similarity_scaled, total_loss,
    CenterState, LossComponents, LossReport, LOSS_LOG_HEADER,
};
use crate::metrics::{accuracy, evaluate_retrieval};
use crate::model::{pool_frames, Model, ModelDims, HEAD_PREFIX, INV_TEMPERATURE, MOL_PREFIX, SEQ_PREFIX};
use crate::numerics::{Graph, Tensor};
use crate::smiles::{build_vocabulary, encode_tokens, Vocabulary};

use super::config::{ClassMatrixLabels, TrainConfig};
use super::optim::sgd_step;
use super::{io_err, HarnessError};

pub const CHECKPOINT_FORMAT: &str = "molclip-checkpoint-v1";
pub const METRICS_HEADER: &str = "epoch,accuracy,rank1,rank5,rank10,map";

/// Derives an independent seed for one consumer of randomness.
pub fn sub_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SALT_SPLIT: u64 = 1;
const SALT_QUERY: u64 = 2;
const SALT_MODEL: u64 = 3;
const SALT_BATCH: u64 = 4;
const SALT_CENTERS: u64 = 5;

/// Query and gallery positions within the test set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

/// A split dataset with pooled frame features precomputed.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub frame_dim: usize,
    pub drug_eval: EvalSet,
    pub moa_eval: EvalSet,
    train_pooled: Vec<Vec<f64>>,
    test_pooled: Tensor,
    all_smiles: Vec<String>,
    num_drugs: usize,
    num_moas: usize,
}

fn eval_set(test: &[Sample], kind: LabelKind, seed: u64) -> Result<EvalSet, HarnessError> {
    let (query, _) = split_query_gallery(test, kind, seed)?;
    let is_query: Vec<bool> = test
        .iter()
        .map(|s| query.iter().any(|q| q.sample_id == s.sample_id))
        .collect();
    Ok(EvalSet {
        query: (0..test.len()).filter(|&i| is_query[i]).collect(),
        gallery: (0..test.len()).filter(|&i| !is_query[i]).collect(),
    })
}

impl PreparedData {
    /// Train/test split by `ratio` plus one query set per label kind, all
    /// derived from `seed`.
    pub fn new(samples: &[Sample], ratio: f64, mode: SplitMode, seed: u64) -> Result<Self, HarnessError> {
        let (train, test) = split_train_test(samples, ratio, sub_seed(seed, SALT_SPLIT), mode)?;
        let q_seed = sub_seed(seed, SALT_QUERY);
        let drug_eval = eval_set(&test, LabelKind::Drug, q_seed)?;
        let moa_eval = eval_set(&test, LabelKind::Moa, q_seed)?;
        let frame_dim = samples[0].frames.shape()[1];
        let train_pooled = train
            .iter()
            .map(|s| pool_frames(&s.frames, frame_dim))
            .collect::<Result<Vec<_>, _>>()?;
        let test_rows = test
            .iter()
            .map(|s| pool_frames(&s.frames, frame_dim))
            .collect::<Result<Vec<_>, _>>()?;
        let mut all_smiles: Vec<String> = samples.iter().map(|s| s.smiles.clone()).collect();
        all_smiles.sort();
        all_smiles.dedup();
        let max_label = |kind: LabelKind| class_labels(samples, kind).last().map_or(0, |&l| l + 1);
        Ok(PreparedData {
            num_drugs: max_label(LabelKind::Drug),
            num_moas: max_label(LabelKind::Moa),
            test_pooled: Tensor::from_rows(&test_rows),
            train,
            test,
            frame_dim,
            drug_eval,
            moa_eval,
            train_pooled,
            all_smiles,
        })
    }

    pub fn from_config(samples: &[Sample], config: &TrainConfig) -> Result<Self, HarnessError> {
        Self::new(samples, config.split_ratio, config.split_mode, config.seed)
    }

    pub fn eval_set(&self, kind: LabelKind) -> &EvalSet {
        match kind {
            LabelKind::Drug => &self.drug_eval,
            LabelKind::Moa => &self.moa_eval,
        }
    }

    /// Number of classes of `kind` (largest label plus one).
    pub fn num_classes(&self, kind: LabelKind) -> usize {
        match kind {
            LabelKind::Drug => self.num_drugs,
            LabelKind::Moa => self.num_moas,
        }
    }

    /// The split as sample lists for the query protocol of `kind`.
    pub fn split(&self, kind: LabelKind) -> DatasetSplit {
        let e = self.eval_set(kind);
        DatasetSplit {
            train: self.train.clone(),
            test: self.test.clone(),
            query: e.query.iter().map(|&i| self.test[i].clone()).collect(),
            gallery: e.gallery.iter().map(|&i| self.test[i].clone()).collect(),
        }
    }

    pub fn test_pooled(&self) -> &Tensor {
        &self.test_pooled
    }
}

/// Metrics of one evaluation on the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub accuracy: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub cmc: Vec<f64>,
}

impl EvalRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.accuracy, self.rank1, self.rank5, self.rank10, self.map
        )
    }
}

/// Classification accuracy on the whole test set plus retrieval metrics on
/// the query/gallery split of `kind`, all from sequence embeddings.
pub fn evaluate(model: &Model, data: &PreparedData, kind: LabelKind, config: &TrainConfig) -> Result<EvalRecord, HarnessError> {
    let emb = model.embed_pooled(data.test_pooled())?;
    let labels: Vec<usize> = data.test.iter().map(|s| kind.of(s)).collect();
    let acc = accuracy(&model.classify(&emb)?, &labels)?;
    let set = data.eval_set(kind);
    let pick = |idx: &[usize]| Tensor::from_rows(&idx.iter().map(|&i| emb.row(i)).collect::<Vec<_>>());
    let ql: Vec<usize> = set.query.iter().map(|&i| labels[i]).collect();
    let gl: Vec<usize> = set.gallery.iter().map(|&i| labels[i]).collect();
    let r = evaluate_retrieval(
        &pick(&set.query),
        &ql,
        &pick(&set.gallery),
        &gl,
        set.gallery.len().min(20),
        config.similarity,
    )?;
    Ok(EvalRecord {
        epoch: 0,
        accuracy: acc,
        rank1: r.rank1,
        rank5: r.rank5,
        rank10: r.rank10,
        map: r.map,
        cmc: r.cmc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: TrainConfig,
    pub model: Model,
    pub centers: CenterState,
    pub vocab: Vocabulary,
    /// Optimizer steps taken in the stage that wrote the checkpoint.
    pub steps: u64,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| HarnessError::CheckpointParse(e.to_string()))?;
        let found = value.get("format").and_then(|f| f.as_str()).unwrap_or("").to_string();
        if found != CHECKPOINT_FORMAT {
            return Err(HarnessError::CheckpointFormat { found });
        }
        let mut ck: Checkpoint =
            serde_json::from_value(value).map_err(|e| HarnessError::CheckpointParse(e.to_string()))?;
        ck.vocab = ck.vocab.reindexed();
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        fs::write(path, self.to_json()).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json(&text)
    }
}

/// Step-by-step training of one stage.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: Model,
    pub centers: CenterState,
    pub vocab: Vocabulary,
    pub losses: Vec<LossReport>,
    data: &'a PreparedData,
    tokens: Vec<Vec<usize>>,
    kind: LabelKind,
    step: u64,
}

struct Forward {
    graph: Graph,
    total: crate::numerics::Var,
    features: crate::numerics::Var,
    vars: crate::model::Bound,
    labels: Vec<usize>,
    report: LossReport,
}

impl<'a> Trainer<'a> {
    /// Fresh model, or encoders (and, for the same label kind, head and
    /// centers) taken from `init`.
    pub fn new(config: &TrainConfig, data: &'a PreparedData, init: Option<&Checkpoint>) -> Result<Self, HarnessError> {
        config.validate()?;
        let kind = config.stage.label_kind();
        let vocab = match init {
            Some(ck) => ck.vocab.clone(),
            None => build_vocabulary(&data.all_smiles)?,
        };
        let num_classes = data.num_classes(kind);
        let dims = ModelDims {
            vocab_size: vocab.len(),
            token_dim: config.token_dim,
            mol_hidden: config.mol_hidden,
            frame_dim: data.frame_dim,
            seq_hidden: config.seq_hidden,
            embed_dim: config.embed_dim,
            num_classes,
        };
        let mut model = Model::new(dims, config.temperature, sub_seed(config.seed, SALT_MODEL));
        let mut centers = CenterState::random(
            num_classes,
            config.embed_dim,
            config.center_alpha,
            sub_seed(config.seed, SALT_CENTERS),
        );
        if let Some(ck) = init {
            model.copy_params_from(&ck.model, MOL_PREFIX)?;
            model.copy_params_from(&ck.model, SEQ_PREFIX)?;
            model.copy_params_from(&ck.model, INV_TEMPERATURE)?;
            let same_task = ck.config.stage.label_kind() == kind && ck.model.dims.num_classes == num_classes;
            if same_task {
                model.copy_params_from(&ck.model, HEAD_PREFIX)?;
                centers.centers = ck.centers.centers.clone();
            }
        }
        model.params.reset_velocity();
        let train_mol = config.alignment && !config.freeze_molecule_encoder;
        model.params.set_trainable(MOL_PREFIX, train_mol)?;
        model
            .params
            .set_trainable(INV_TEMPERATURE, config.alignment && config.learn_temperature)?;
        let tokens = data
            .train
            .iter()
            .map(|s| encode_tokens(&s.smiles, &vocab, config.max_len))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Trainer {
            config: config.clone(),
            model,
            centers,
            vocab,
            losses: Vec::new(),
            data,
            tokens,
            kind,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        let batch = self.config.batch_p * self.config.batch_k;
        self.data.train.len().div_ceil(batch).max(1)
    }

    /// Train-set indices of the batch used at `step`.
    pub fn batch(&self, step: u64) -> Result<Vec<usize>, HarnessError> {
        Ok(crate::data::pk_sample(
            &self.data.train,
            self.config.batch_p,
            self.config.batch_k,
            self.kind,
            sub_seed(self.config.seed, SALT_BATCH),
            step,
        )?)
    }

    fn forward(&self, step: u64) -> Result<Forward, HarnessError> {
        let batch = self.batch(step)?;
        let data = self.data;
        let labels: Vec<usize> = batch.iter().map(|&i| self.kind.of(&data.train[i])).collect();
        let mut g = Graph::new();
        let vars = self.model.bind(&mut g)?;
        let pooled = Tensor::from_rows(&batch.iter().map(|&i| data.train_pooled[i].as_slice()).collect::<Vec<_>>());
        let v = self.model.sequence_embeddings(&mut g, &vars, &pooled)?;

        let msc = if self.config.alignment {
            let toks: Vec<Vec<usize>> = batch.iter().map(|&i| self.tokens[i].clone()).collect();
            let s = self.model.molecule_embeddings(&mut g, &vars, &toks)?;
            let sv = similarity_scaled(&mut g, s, v, vars.var(INV_TEMPERATURE))?;
            let class_labels = match self.config.class_matrix_labels {
                ClassMatrixLabels::Stage => labels.clone(),
                ClassMatrixLabels::Moa => batch.iter().map(|&i| data.train[i].moa_label).collect(),
            };
            let sup = build_supervision(&class_labels);
            Some(msc_loss(&mut g, sv, &sup, self.config.msc_direction)?)
        } else {
            None
        };
        let w = self.config.weights;
        let triplet = hard_triplet_loss(&mut g, v, &labels, w.margin)?;
        let center = center_loss(&mut g, v, &labels, &self.centers)?;
        let logits = self.model.logits(&mut g, &vars, v)?;
        let cls = classification_ce(&mut g, logits, &labels)?;
        let parts = LossComponents {
            msc,
            triplet,
            center,
            cls,
        };
        let (total, report) = total_loss(&mut g, &parts, &w)?;
        Ok(Forward {
            graph: g,
            total,
            features: v,
            vars,
            labels,
            report,
        })
    }

    /// Loss components at `step` for the current state, without updating.
    pub fn loss_at(&self, step: u64) -> Result<LossReport, HarnessError> {
        Ok(self.forward(step)?.report)
    }

    /// One optimizer step followed by the center update.
    pub fn step(&mut self) -> Result<LossReport, HarnessError> {
        let Forward {
            mut graph,
            total,
            features,
            vars,
            labels,
            report,
        } = self.forward(self.step)?;
        let mut grads = graph.backward(total)?;
        let mut named = BTreeMap::new();
        for (name, &var) in vars.iter() {
            if let Some(t) = grads.take(var) {
                named.insert(name.clone(), t);
            }
        }
        sgd_step(
            &mut self.model.params,
            &named,
            self.config.learning_rate,
            self.config.momentum,
        )?;
        self.centers.update(graph.value(features), &labels)?;
        self.step += 1;
        self.losses.push(report);
        Ok(report)
    }

    pub fn evaluate(&self) -> Result<EvalRecord, HarnessError> {
        evaluate(&self.model, self.data, self.kind, &self.config)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            model: self.model.clone(),
            centers: self.centers.clone(),
            vocab: self.vocab.clone(),
            steps: self.step,
        }
    }
}

/// Result of one training stage.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EvalRecord>,
    pub losses: Vec<LossReport>,
}

impl StageOutcome {
    pub fn final_metrics(&self) -> &EvalRecord {
        self.history.last().expect("at least one evaluation")
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.history {
            let _ = writeln!(s, "{}", r.csv_line());
        }
        s
    }

    pub fn losses_csv(&self) -> String {
        let mut s = format!("{LOSS_LOG_HEADER}\n");
        for (i, r) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "{}", r.csv_line(i));
        }
        s
    }

    /// Writes `checkpoint.json`, `metrics.csv`, `losses.csv` and `cmc.csv`.
    pub fn write_to(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        self.checkpoint.save(&dir.join("checkpoint.json"))?;
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| io_err(&p, e))
        };
        write("metrics.csv", self.metrics_csv())?;
        write("losses.csv", self.losses_csv())?;
        let mut cmc = String::from("rank,cmc\n");
        for (k, v) in self.final_metrics().cmc.iter().enumerate() {
            let _ = writeln!(cmc, "{},{v}", k + 1);
        }
        write("cmc.csv", cmc)
    }
}

/// Trains one stage for `config.epochs` epochs, evaluating every
/// `eval_every` epochs and after the last.
pub fn run_stage(config: &TrainConfig, data: &PreparedData, init: Option<&Checkpoint>) -> Result<StageOutcome, HarnessError> {
    let mut trainer = Trainer::new(config, data, init)?;
    let spe = trainer.steps_per_epoch();
    let mut history = Vec::new();
    for epoch in 1..=config.epochs {
        for _ in 0..spe {
            trainer.step()?;
        }
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let mut r = trainer.evaluate()?;
            r.epoch = epoch;
            history.push(r);
        }
    }
    Ok(StageOutcome {
        checkpoint: trainer.checkpoint(),
        history,
        losses: trainer.losses,
    })
}
