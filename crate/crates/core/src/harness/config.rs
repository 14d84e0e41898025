use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{LabelKind, SplitMode};
use crate::kv::KeyValues;
use crate::losses::{CeDirection, LossWeights};
use crate::metrics::Similarity;

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Supervised by drug labels, nothing frozen.
    PretrainDrug,
    /// Supervised by MoA labels, molecule encoder frozen by default.
    FinetuneMoa,
}

impl Stage {
    pub fn label_kind(self) -> LabelKind {
        match self {
            Stage::PretrainDrug => LabelKind::Drug,
            Stage::FinetuneMoa => LabelKind::Moa,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Stage::PretrainDrug => "pretrain_drug",
            Stage::FinetuneMoa => "finetune_moa",
        }
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pretrain_drug" => Ok(Stage::PretrainDrug),
            "finetune_moa" => Ok(Stage::FinetuneMoa),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

/// Labels that define the same-class target of the alignment loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassMatrixLabels {
    /// The labels supervising the current stage.
    #[default]
    Stage,
    /// MoA labels in every stage.
    Moa,
}

impl FromStr for ClassMatrixLabels {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stage" => Ok(ClassMatrixLabels::Stage),
            "moa" => Ok(ClassMatrixLabels::Moa),
            other => Err(format!("unknown class matrix labels {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_p: usize,
    pub batch_k: usize,
    /// Batch shape of MoA fine-tuning when derived with [`TrainConfig::for_stage`].
    pub finetune_batch_p: usize,
    pub finetune_batch_k: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weights: LossWeights,
    pub temperature: f64,
    pub learn_temperature: bool,
    pub token_dim: usize,
    pub mol_hidden: usize,
    pub seq_hidden: usize,
    pub embed_dim: usize,
    pub max_len: usize,
    pub seed: u64,
    pub stage: Stage,
    pub freeze_molecule_encoder: bool,
    /// Train the molecule encoder and the alignment loss.
    pub alignment: bool,
    /// Evaluate every this many epochs (and after the last one).
    pub eval_every: usize,
    pub center_alpha: f64,
    pub msc_direction: CeDirection,
    pub class_matrix_labels: ClassMatrixLabels,
    pub similarity: Similarity,
    pub split_ratio: f64,
    pub split_mode: SplitMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_p: 16,
            batch_k: 4,
            finetune_batch_p: 16,
            finetune_batch_k: 4,
            learning_rate: 0.001,
            momentum: 0.9,
            weights: LossWeights::default(),
            temperature: 0.07,
            learn_temperature: false,
            token_dim: 32,
            mol_hidden: 64,
            seq_hidden: 128,
            embed_dim: 64,
            max_len: 64,
            seed: 0,
            stage: Stage::PretrainDrug,
            freeze_molecule_encoder: false,
            alignment: true,
            eval_every: 50,
            center_alpha: 0.5,
            msc_direction: CeDirection::Both,
            class_matrix_labels: ClassMatrixLabels::Stage,
            similarity: Similarity::Cosine,
            split_ratio: 0.8,
            split_mode: SplitMode::WithinDrug,
        }
    }
}

const KEYS: &[&str] = &[
    "epochs",
    "batch_p",
    "batch_k",
    "finetune_batch_p",
    "finetune_batch_k",
    "learning_rate",
    "momentum",
    "w_msc",
    "w_triplet",
    "w_center",
    "w_cls",
    "margin",
    "temperature",
    "learn_temperature",
    "token_dim",
    "mol_hidden",
    "seq_hidden",
    "embed_dim",
    "max_len",
    "seed",
    "stage",
    "freeze_molecule_encoder",
    "alignment",
    "eval_every",
    "center_alpha",
    "msc_direction",
    "class_matrix_labels",
    "similarity",
    "split_ratio",
    "split_mode",
];

fn direction_str(d: CeDirection) -> &'static str {
    match d {
        CeDirection::Both => "both",
        CeDirection::Rows => "rows",
        CeDirection::Columns => "columns",
    }
}

fn parse_direction(s: &str) -> Result<CeDirection, String> {
    match s {
        "both" => Ok(CeDirection::Both),
        "rows" => Ok(CeDirection::Rows),
        "columns" => Ok(CeDirection::Columns),
        other => Err(format!("unknown direction {other:?}")),
    }
}

impl TrainConfig {
    /// Parses a key=value config. Missing keys keep their defaults, except
    /// that `freeze_molecule_encoder` defaults to true for the MoA stage.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let kv = KeyValues::parse(text)?;
        kv.reject_unknown(KEYS)?;
        let mut c = TrainConfig::default();
        kv.set("epochs", &mut c.epochs)?;
        kv.set("batch_p", &mut c.batch_p)?;
        kv.set("batch_k", &mut c.batch_k)?;
        kv.set("finetune_batch_p", &mut c.finetune_batch_p)?;
        kv.set("finetune_batch_k", &mut c.finetune_batch_k)?;
        kv.set("learning_rate", &mut c.learning_rate)?;
        kv.set("momentum", &mut c.momentum)?;
        kv.set("w_msc", &mut c.weights.w_msc)?;
        kv.set("w_triplet", &mut c.weights.w_triplet)?;
        kv.set("w_center", &mut c.weights.w_center)?;
        kv.set("w_cls", &mut c.weights.w_cls)?;
        kv.set("margin", &mut c.weights.margin)?;
        kv.set("temperature", &mut c.temperature)?;
        kv.set("learn_temperature", &mut c.learn_temperature)?;
        kv.set("token_dim", &mut c.token_dim)?;
        kv.set("mol_hidden", &mut c.mol_hidden)?;
        kv.set("seq_hidden", &mut c.seq_hidden)?;
        kv.set("embed_dim", &mut c.embed_dim)?;
        kv.set("max_len", &mut c.max_len)?;
        kv.set("seed", &mut c.seed)?;
        kv.set("stage", &mut c.stage)?;
        c.freeze_molecule_encoder = c.stage == Stage::FinetuneMoa;
        kv.set("freeze_molecule_encoder", &mut c.freeze_molecule_encoder)?;
        kv.set("alignment", &mut c.alignment)?;
        kv.set("eval_every", &mut c.eval_every)?;
        kv.set("center_alpha", &mut c.center_alpha)?;
        if let Some(raw) = kv.raw("msc_direction") {
            c.msc_direction = parse_direction(raw).map_err(|_| kv.invalid("msc_direction"))?;
        }
        kv.set("class_matrix_labels", &mut c.class_matrix_labels)?;
        kv.set("similarity", &mut c.similarity)?;
        kv.set("split_ratio", &mut c.split_ratio)?;
        kv.set("split_mode", &mut c.split_mode)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if [self.batch_p, self.batch_k, self.finetune_batch_p, self.finetune_batch_k].iter().any(|&n| n < 2) {
            return bad("batch dimensions must be at least 2");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        let w = &self.weights;
        if [w.w_msc, w.w_triplet, w.w_center, w.w_cls, w.margin]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return bad("loss weights and margin must be finite and non-negative");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if [self.token_dim, self.mol_hidden, self.seq_hidden, self.embed_dim, self.max_len].contains(&0) {
            return bad("dimensions must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if !(self.center_alpha > 0.0 && self.center_alpha <= 1.0) {
            return bad("center_alpha must lie in (0, 1]");
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad("split_ratio must lie in (0, 1)");
        }
        Ok(())
    }

    /// The config as key=value text accepted by [`TrainConfig::parse`].
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let w = &self.weights;
        let split_mode = match self.split_mode {
            SplitMode::WithinDrug => "within_drug",
            SplitMode::DrugDisjoint => "drug_disjoint",
        };
        let similarity = match self.similarity {
            Similarity::Cosine => "cosine",
            Similarity::Euclidean => "euclidean",
        };
        let class_labels = match self.class_matrix_labels {
            ClassMatrixLabels::Stage => "stage",
            ClassMatrixLabels::Moa => "moa",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("epochs", self.epochs.to_string()),
            ("batch_p", self.batch_p.to_string()),
            ("batch_k", self.batch_k.to_string()),
            ("finetune_batch_p", self.finetune_batch_p.to_string()),
            ("finetune_batch_k", self.finetune_batch_k.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("momentum", format!("{:?}", self.momentum)),
            ("w_msc", format!("{:?}", w.w_msc)),
            ("w_triplet", format!("{:?}", w.w_triplet)),
            ("w_center", format!("{:?}", w.w_center)),
            ("w_cls", format!("{:?}", w.w_cls)),
            ("margin", format!("{:?}", w.margin)),
            ("temperature", format!("{:?}", self.temperature)),
            ("learn_temperature", self.learn_temperature.to_string()),
            ("token_dim", self.token_dim.to_string()),
            ("mol_hidden", self.mol_hidden.to_string()),
            ("seq_hidden", self.seq_hidden.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("max_len", self.max_len.to_string()),
            ("seed", self.seed.to_string()),
            ("stage", self.stage.as_str().to_string()),
            ("freeze_molecule_encoder", self.freeze_molecule_encoder.to_string()),
            ("alignment", self.alignment.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("center_alpha", format!("{:?}", self.center_alpha)),
            ("msc_direction", direction_str(self.msc_direction).to_string()),
            ("class_matrix_labels", class_labels.to_string()),
            ("similarity", similarity.to_string()),
            ("split_ratio", format!("{:?}", self.split_ratio)),
            ("split_mode", split_mode.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// The same config for another stage, with that stage's default freezing.
    /// Moving to the MoA stage also switches to the fine-tuning batch shape.
    pub fn for_stage(&self, stage: Stage) -> Self {
        let mut c = TrainConfig {
            stage,
            freeze_molecule_encoder: stage == Stage::FinetuneMoa,
            ..self.clone()
        };
        if stage == Stage::FinetuneMoa && self.stage != Stage::FinetuneMoa {
            c.batch_p = self.finetune_batch_p;
            c.batch_k = self.finetune_batch_k;
        }
        c
    }
}
