use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use super::config::{Stage, TrainConfig};
use super::train::{run_stage, Checkpoint, EvalRecord, PreparedData, StageOutcome};
use super::HarnessError;

/// Pretraining strategies for drug recognition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyId {
    /// Sequence encoder with the metric and classification losses only.
    S1SeqOnly,
    /// Full model from a fresh initialization.
    S2MolClipFreshSeq,
    /// Full model starting from the S1 sequence encoder.
    S3MolClipPretrainedSeq,
}

impl StrategyId {
    pub const ALL: [StrategyId; 3] = [
        StrategyId::S1SeqOnly,
        StrategyId::S2MolClipFreshSeq,
        StrategyId::S3MolClipPretrainedSeq,
    ];

    pub fn short(self) -> &'static str {
        match self {
            StrategyId::S1SeqOnly => "S1",
            StrategyId::S2MolClipFreshSeq => "S2",
            StrategyId::S3MolClipPretrainedSeq => "S3",
        }
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for StrategyId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "S1" | "s1" => Ok(StrategyId::S1SeqOnly),
            "S2" | "s2" => Ok(StrategyId::S2MolClipFreshSeq),
            "S3" | "s3" => Ok(StrategyId::S3MolClipPretrainedSeq),
            other => Err(format!("unknown strategy {other:?}, expected S1, S2 or S3")),
        }
    }
}

/// The drug-stage configs a strategy runs, in order. Each stage after the
/// first starts from the previous stage's checkpoint.
pub fn strategy_stages(id: StrategyId, base: &TrainConfig) -> Vec<TrainConfig> {
    let drug = base.for_stage(Stage::PretrainDrug);
    let seq_only = TrainConfig {
        alignment: false,
        ..drug.clone()
    };
    let full = TrainConfig {
        alignment: true,
        ..drug
    };
    match id {
        StrategyId::S1SeqOnly => vec![seq_only],
        StrategyId::S2MolClipFreshSeq => vec![full],
        StrategyId::S3MolClipPretrainedSeq => vec![seq_only, full],
    }
}

#[derive(Debug, Clone)]
pub struct StrategyReport {
    pub id: StrategyId,
    pub stages: Vec<StageOutcome>,
}

impl StrategyReport {
    /// Drug-recognition metrics after the last stage.
    pub fn drug_metrics(&self) -> &EvalRecord {
        self.stages.last().expect("strategy has stages").final_metrics()
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.stages.last().expect("strategy has stages").checkpoint
    }
}

fn run_chain(configs: &[TrainConfig], data: &PreparedData, mut init: Option<StageOutcome>) -> Result<Vec<StageOutcome>, HarnessError> {
    let mut out: Vec<StageOutcome> = init.take().into_iter().collect();
    for c in configs {
        let prev = out.last().map(|s| &s.checkpoint);
        let stage = run_stage(c, data, prev)?;
        out.push(stage);
    }
    Ok(out)
}

pub fn run_strategy(id: StrategyId, base: &TrainConfig, data: &PreparedData) -> Result<StrategyReport, HarnessError> {
    Ok(StrategyReport {
        id,
        stages: run_chain(&strategy_stages(id, base), data, None)?,
    })
}

/// All three strategies; S3 reuses the S1 run instead of repeating it.
pub fn run_table1(base: &TrainConfig, data: &PreparedData) -> Result<Vec<StrategyReport>, HarnessError> {
    let s1 = run_strategy(StrategyId::S1SeqOnly, base, data)?;
    let s2 = run_strategy(StrategyId::S2MolClipFreshSeq, base, data)?;
    let s3_tail = &strategy_stages(StrategyId::S3MolClipPretrainedSeq, base)[1..];
    let s3 = StrategyReport {
        id: StrategyId::S3MolClipPretrainedSeq,
        stages: run_chain(s3_tail, data, Some(s1.stages[0].clone()))?,
    };
    Ok(vec![s1, s2, s3])
}

/// A strategy's drug stages followed by MoA fine-tuning.
#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub strategy: StrategyReport,
    pub finetune: StageOutcome,
}

impl PipelineReport {
    pub fn moa_metrics(&self) -> &EvalRecord {
        self.finetune.final_metrics()
    }
}

pub fn run_pipeline(id: StrategyId, base: &TrainConfig, data: &PreparedData) -> Result<PipelineReport, HarnessError> {
    let strategy = run_strategy(id, base, data)?;
    let finetune = run_stage(&base.for_stage(Stage::FinetuneMoa), data, Some(strategy.checkpoint()))?;
    Ok(PipelineReport { strategy, finetune })
}

/// Center-loss weights 0.01, then 0.02 to 0.1 in steps of 0.02, then 0.3 to
/// 0.9 in steps of 0.2.
pub const DEFAULT_SWEEP_WEIGHTS: [f64; 10] = [0.01, 0.02, 0.04, 0.06, 0.08, 0.1, 0.3, 0.5, 0.7, 0.9];

pub const SWEEP_HEADER: &str = "w_center,drug_rank1,drug_map,drug_accuracy,moa_rank1,moa_map,moa_accuracy";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub weight: f64,
    pub drug: EvalRecord,
    pub moa: EvalRecord,
}

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.weight, self.drug.rank1, self.drug.map, self.drug.accuracy, self.moa.rank1, self.moa.map, self.moa.accuracy
        )
    }
}

impl fmt::Display for SweepRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.csv_line())
    }
}

/// One S2-style pipeline (full model from scratch on drugs, then MoA
/// fine-tuning) per center-loss weight, everything else fixed.
pub fn sweep_center_weight(base: &TrainConfig, weights: &[f64], data: &PreparedData) -> Result<Vec<SweepRow>, HarnessError> {
    if weights.is_empty() {
        return Err(HarnessError::EmptySweep);
    }
    if let Some(&w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(HarnessError::InvalidWeight(w));
    }
    let mut rows = Vec::with_capacity(weights.len());
    for &w in weights {
        let mut cfg = base.clone();
        cfg.weights.w_center = w;
        let p = run_pipeline(StrategyId::S2MolClipFreshSeq, &cfg, data)?;
        rows.push(SweepRow {
            weight: w,
            drug: p.strategy.drug_metrics().clone(),
            moa: p.moa_metrics().clone(),
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}
