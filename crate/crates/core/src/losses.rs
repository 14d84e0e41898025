//! Training objectives: the self/class-aware alignment loss over the
//! molecule-sequence similarity matrix, batch-hard triplet loss, center loss
//! with its center update, classification cross-entropy, and their weighted
//! sum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Graph, NumericsError, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("label {label} has no in-batch positive or no negative")]
    DegenerateBatch { label: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("loss component {name} is not finite")]
    NonFiniteComponent { name: &'static str },
    #[error("batch of {features} features with {labels} labels")]
    LabelCount { features: usize, labels: usize },
}

/// Target matrices for the alignment loss: the identity (each sequence
/// matches its own molecule) and the same-class indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionPair {
    pub m_self: Tensor,
    pub m_class: Tensor,
}

pub fn build_supervision(labels: &[usize]) -> SupervisionPair {
    let b = labels.len();
    let mut m_class = Tensor::zeros(&[b, b]);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == lj {
                m_class.data_mut()[i * b + j] = 1.0;
            }
        }
    }
    SupervisionPair {
        m_self: Tensor::identity(b),
        m_class,
    }
}

/// Which softmax directions the soft-target cross-entropy uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CeDirection {
    /// Molecule-to-sequence rows and sequence-to-molecule columns, averaged.
    #[default]
    Both,
    Rows,
    Columns,
}

/// `(S_n . V_n) / tau` over L2-normalized rows of `s` and `v`, giving `[B, B]`
/// with entry `(m, n)` for molecule `m` against sequence `n`.
pub fn similarity(g: &mut Graph, s: Var, v: Var, tau: f64) -> Result<Var, LossError> {
    assert!(tau > 0.0, "temperature must be positive");
    let raw = cosine_matrix(g, s, v)?;
    Ok(g.scale(raw, 1.0 / tau)?)
}

/// Like [`similarity`] with the inverse temperature held in a scalar node,
/// so it can be trained.
pub fn similarity_scaled(g: &mut Graph, s: Var, v: Var, inv_tau: Var) -> Result<Var, LossError> {
    let raw = cosine_matrix(g, s, v)?;
    Ok(g.mul(raw, inv_tau)?)
}

fn cosine_matrix(g: &mut Graph, s: Var, v: Var) -> Result<Var, LossError> {
    if g.shape(s) != g.shape(v) {
        return Err(NumericsError::ShapeMismatch {
            op: "similarity",
            shapes: vec![g.shape(s).to_vec(), g.shape(v).to_vec()],
        }
        .into());
    }
    let sn = g.l2_normalize_rows(s)?;
    let vn = g.l2_normalize_rows(v)?;
    let vt = g.transpose(vn)?;
    Ok(g.matmul(sn, vt)?)
}

/// Cross-entropy of a score matrix against a 0/1 target matrix. Each target
/// row (column) is normalized to a distribution and compared with the row
/// (column) softmax of the scores; the result is the mean over rows
/// (columns). `Both` averages the two directions.
pub fn soft_target_ce(g: &mut Graph, scores: Var, target: &Tensor, direction: CeDirection) -> Result<Var, LossError> {
    let rows = |g: &mut Graph, scores: Var, target: &Tensor| -> Result<Var, LossError> {
        let (m, n) = target.dims2().expect("rank-2 target");
        let mut p = target.clone();
        for i in 0..m {
            let z: f64 = target.row(i).iter().sum();
            for j in 0..n {
                p.data_mut()[i * n + j] /= z;
            }
        }
        let ls = g.log_softmax(scores)?;
        let pv = g.constant(p)?;
        let prod = g.mul(pv, ls)?;
        let total = g.sum(prod)?;
        Ok(g.scale(total, -1.0 / m as f64)?)
    };
    let cols = |g: &mut Graph, scores: Var, target: &Tensor| -> Result<Var, LossError> {
        let st = g.transpose(scores)?;
        rows(g, st, &target.transpose()?)
    };
    match direction {
        CeDirection::Rows => rows(g, scores, target),
        CeDirection::Columns => cols(g, scores, target),
        CeDirection::Both => {
            let r = rows(g, scores, target)?;
            let c = cols(g, scores, target)?;
            let s = g.add(r, c)?;
            Ok(g.scale(s, 0.5)?)
        }
    }
}

/// `CE(SV, M_self) + CE(SV, M_class)`.
pub fn msc_loss(g: &mut Graph, sv: Var, sup: &SupervisionPair, direction: CeDirection) -> Result<Var, LossError> {
    if g.shape(sv) != sup.m_self.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "msc_loss",
            shapes: vec![g.shape(sv).to_vec(), sup.m_self.shape().to_vec()],
        }
        .into());
    }
    let a = soft_target_ce(g, sv, &sup.m_self, direction)?;
    let b = soft_target_ce(g, sv, &sup.m_class, direction)?;
    Ok(g.add(a, b)?)
}

/// Hardest positive (farthest same-label) and hardest negative (nearest
/// other-label) for every anchor. Ties resolve to the lowest index.
pub fn mine_batch_hard(dists: &Tensor, labels: &[usize]) -> Result<Vec<(usize, usize)>, LossError> {
    let b = labels.len();
    (0..b)
        .map(|a| {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..b {
                if j == a {
                    continue;
                }
                let d = dists.at(a, j);
                if labels[j] == labels[a] {
                    if pos.is_none_or(|p| d > dists.at(a, p)) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|n| d < dists.at(a, n)) {
                    neg = Some(j);
                }
            }
            match (pos, neg) {
                (Some(p), Some(n)) => Ok((p, n)),
                _ => Err(LossError::DegenerateBatch { label: labels[a] }),
            }
        })
        .collect()
}

/// Batch-hard triplet loss with squared Euclidean distances, averaged over
/// anchors.
pub fn hard_triplet_loss(g: &mut Graph, features: Var, labels: &[usize], margin: f64) -> Result<Var, LossError> {
    let b = check_batch(g, features, labels)?;
    let d = g.pairwise_sq_dists(features, features)?;
    let triplets = mine_batch_hard(g.value(d), labels)?;
    let mut pos_mask = Tensor::zeros(&[b, b]);
    let mut neg_mask = Tensor::zeros(&[b, b]);
    for (a, &(p, n)) in triplets.iter().enumerate() {
        pos_mask.data_mut()[a * b + p] = 1.0;
        neg_mask.data_mut()[a * b + n] = 1.0;
    }
    let pm = g.constant(pos_mask)?;
    let nm = g.constant(neg_mask)?;
    let dp = g.mul(d, pm)?;
    let dp = g.sum_axis(dp, 1)?;
    let dn = g.mul(d, nm)?;
    let dn = g.sum_axis(dn, 1)?;
    let gap = g.sub(dp, dn)?;
    let m = g.constant(Tensor::scalar(margin))?;
    let shifted = g.add(gap, m)?;
    let hinge = g.relu(shifted)?;
    Ok(g.mean(hinge)?)
}

/// Per-class feature centers, updated outside of gradient descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterState {
    pub centers: Tensor,
    pub alpha: f64,
}

impl CenterState {
    pub fn zeros(num_classes: usize, dim: usize, alpha: f64) -> Self {
        assert!(alpha > 0.0 && alpha <= 1.0, "center update rate must lie in (0, 1]");
        CenterState {
            centers: Tensor::zeros(&[num_classes, dim]),
            alpha,
        }
    }

    /// Centers with independent standard normal coordinates.
    pub fn random(num_classes: usize, dim: usize, alpha: f64, seed: u64) -> Self {
        let mut state = Self::zeros(num_classes, dim, alpha);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in state.centers.data_mut() {
            *v = rng.sample(StandardNormal);
        }
        state
    }

    pub fn num_classes(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    fn check_labels(&self, labels: &[usize]) -> Result<(), LossError> {
        let k = self.num_classes();
        match labels.iter().find(|&&l| l >= k) {
            Some(&label) => Err(LossError::LabelOutOfRange { label, num_classes: k }),
            None => Ok(()),
        }
    }

    /// Moves each class center present in the batch towards its samples:
    /// `C_c -= alpha * sum_i (C_c - V_i) / (1 + n_c)`.
    pub fn update(&mut self, features: &Tensor, labels: &[usize]) -> Result<(), LossError> {
        self.check_labels(labels)?;
        let (b, d) = features.dims2().expect("rank-2 features");
        if b != labels.len() {
            return Err(LossError::LabelCount { features: b, labels: labels.len() });
        }
        let k = self.num_classes();
        let mut delta = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for j in 0..d {
                delta[c * d + j] += self.centers.at(c, j) - features.at(i, j);
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let denom = 1.0 + counts[c] as f64;
            for j in 0..d {
                self.centers.data_mut()[c * d + j] -= self.alpha * delta[c * d + j] / denom;
            }
        }
        Ok(())
    }
}

/// `0.5 * sum_i |V_i - C_{y_i}|^2` (a sum over the batch, not a mean).
pub fn center_loss(g: &mut Graph, features: Var, labels: &[usize], state: &CenterState) -> Result<Var, LossError> {
    check_batch(g, features, labels)?;
    state.check_labels(labels)?;
    let gathered: Vec<&[f64]> = labels.iter().map(|&l| state.centers.row(l)).collect();
    let c = g.constant(Tensor::from_rows(&gathered))?;
    let diff = g.sub(features, c)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq)?;
    Ok(g.scale(s, 0.5)?)
}

/// Mean negative log-likelihood of the labels under row softmax of `logits`.
pub fn classification_ce(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var, LossError> {
    let b = check_batch(g, logits, labels)?;
    let k = g.shape(logits)[1];
    let mut onehot = Tensor::zeros(&[b, k]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(LossError::LabelOutOfRange { label: l, num_classes: k });
        }
        onehot.data_mut()[i * k + l] = 1.0;
    }
    let ls = g.log_softmax(logits)?;
    let mask = g.constant(onehot)?;
    let picked = g.mul(ls, mask)?;
    let s = g.sum(picked)?;
    Ok(g.scale(s, -1.0 / b as f64)?)
}

fn check_batch(g: &Graph, x: Var, labels: &[usize]) -> Result<usize, LossError> {
    let (b, _) = g.value(x).dims2().ok_or_else(|| NumericsError::ShapeMismatch {
        op: "loss",
        shapes: vec![g.shape(x).to_vec()],
    })?;
    if b != labels.len() {
        return Err(LossError::LabelCount { features: b, labels: labels.len() });
    }
    Ok(b)
}

/// Weights of the four objectives plus the triplet margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_msc: f64,
    pub w_triplet: f64,
    pub w_center: f64,
    pub w_cls: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_msc: 1.0,
            w_triplet: 1.0,
            w_center: 0.1,
            w_cls: 1.0,
            margin: 0.3,
        }
    }
}

/// Unweighted component values. `msc` is absent when the alignment branch is
/// disabled.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub msc: Option<f64>,
    pub triplet: f64,
    pub center: f64,
    pub cls: f64,
    pub total: f64,
}

impl LossReport {
    /// `step,msc,triplet,center,cls,total`; a missing alignment term is empty.
    pub fn csv_line(&self, step: usize) -> String {
        let msc = self.msc.map(|v| format!("{v}")).unwrap_or_default();
        format!("{step},{msc},{},{},{},{}", self.triplet, self.center, self.cls, self.total)
    }
}

pub const LOSS_LOG_HEADER: &str = "step,l_msc,l_triplet,l_center,l_cls,total";

/// Graph nodes of the individual objectives.
#[derive(Debug, Clone, Copy)]
pub struct LossComponents {
    pub msc: Option<Var>,
    pub triplet: Var,
    pub center: Var,
    pub cls: Var,
}

/// Weighted sum of the components as a graph node, plus the report of
/// unweighted values.
pub fn total_loss(g: &mut Graph, parts: &LossComponents, w: &LossWeights) -> Result<(Var, LossReport), LossError> {
    let value = |g: &Graph, v: Var, name: &'static str| -> Result<f64, LossError> {
        let x = g.value(v).item();
        if x.is_finite() {
            Ok(x)
        } else {
            Err(LossError::NonFiniteComponent { name })
        }
    };
    let msc = parts.msc.map(|v| value(g, v, "msc")).transpose()?;
    let triplet = value(g, parts.triplet, "triplet")?;
    let center = value(g, parts.center, "center")?;
    let cls = value(g, parts.cls, "cls")?;

    let mut terms = vec![
        g.scale(parts.triplet, w.w_triplet)?,
        g.scale(parts.center, w.w_center)?,
        g.scale(parts.cls, w.w_cls)?,
    ];
    if let Some(m) = parts.msc {
        terms.insert(0, g.scale(m, w.w_msc)?);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    let total = g.value(acc).item();
    Ok((
        acc,
        LossReport {
            msc,
            triplet,
            center,
            cls,
            total,
        },
    ))
}

/// The weighted sum computed on plain numbers.
pub fn weighted_total(report: &LossReport, w: &LossWeights) -> Result<f64, LossError> {
    for (name, v) in [
        ("msc", report.msc.unwrap_or(0.0)),
        ("triplet", report.triplet),
        ("center", report.center),
        ("cls", report.cls),
    ] {
        if !v.is_finite() {
            return Err(LossError::NonFiniteComponent { name });
        }
    }
    Ok(w.w_msc * report.msc.unwrap_or(0.0) + w.w_triplet * report.triplet + w.w_center * report.center + w.w_cls * report.cls)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(f: impl FnOnce(&mut Graph) -> Result<Var, LossError>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    #[test]
    fn supervision_example() {
        let sup = build_supervision(&[0, 0, 1]);
        assert_eq!(sup.m_class.to_rows(), vec![vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(sup.m_self, Tensor::identity(3));
        assert_eq!(build_supervision(&[3, 1, 2]).m_class, Tensor::identity(3));
        assert_eq!(build_supervision(&[5, 5]).m_class, Tensor::full(&[2, 2], 1.0));
    }

    #[test]
    fn similarity_basis_and_temperature() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]])).unwrap();
        let sv = similarity(&mut g, s, s, 1.0).unwrap();
        assert_eq!(g.value(sv).data(), &[1.0, 0.0, 0.0, 1.0]);

        let a = g.constant(Tensor::from_rows(&[[0.3, -1.2, 2.0], [1.0, 0.5, 0.1]])).unwrap();
        let b = g.constant(Tensor::from_rows(&[[0.7, 0.2, -0.4], [-0.3, 0.9, 1.1]])).unwrap();
        let one = similarity(&mut g, a, b, 1.0).unwrap();
        let half = similarity(&mut g, a, b, 0.5).unwrap();
        for (x, y) in g.value(one).data().iter().zip(g.value(half).data()) {
            assert!((2.0 * x - y).abs() < 1e-15);
        }
        let c = g.constant(Tensor::zeros(&[2, 2])).unwrap();
        assert!(similarity(&mut g, a, c, 1.0).is_err());
    }

    #[test]
    fn msc_saturated_and_uniform() {
        let sup = build_supervision(&[0, 1]);
        let sat = eval(|g| {
            let sv = g.constant(Tensor::from_rows(&[[10.0, -10.0], [-10.0, 10.0]]))?;
            msc_loss(g, sv, &sup, CeDirection::Both)
        });
        assert!(sat <= 1e-8, "{sat}");
        let uni = eval(|g| {
            let sv = g.constant(Tensor::zeros(&[2, 2]))?;
            msc_loss(g, sv, &sup, CeDirection::Both)
        });
        assert!((uni - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn msc_single_directions() {
        // a non-symmetric score matrix distinguishes rows from columns
        let sup = build_supervision(&[0, 1]);
        let sv = Tensor::from_rows(&[[2.0, 0.0], [1.0, 0.0]]);
        let get = |d| {
            eval(|g| {
                let v = g.constant(sv.clone())?;
                msc_loss(g, v, &sup, d)
            })
        };
        let (r, c, b) = (get(CeDirection::Rows), get(CeDirection::Columns), get(CeDirection::Both));
        assert!((r - c).abs() > 1e-3);
        assert!((b - 0.5 * (r + c)).abs() < 1e-12);
    }

    #[test]
    fn triplet_examples() {
        // anchor 0 with one positive and one negative; a distant fourth sample
        // gives the negative its own positive
        let anchor_hinge = |p: f64, n: f64| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_rows(&[[0.0], [p], [n], [100.0]])).unwrap();
            let d = g.pairwise_sq_dists(x, x).unwrap();
            let dv = g.value(d).clone();
            let trip = mine_batch_hard(&dv, &[0, 0, 1, 1]).unwrap();
            assert_eq!(trip[0], (1, 2));
            (dv.at(0, 1) - dv.at(0, 2) + 0.3).max(0.0)
        };
        assert_eq!(anchor_hinge(0.1, 1.0), 0.0);
        let v = anchor_hinge(0.5f64.sqrt(), 0.4f64.sqrt());
        assert!((v - 0.4).abs() < 1e-12, "{v}");
    }

    #[test]
    fn triplet_needs_positives_and_negatives() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[0.0], [1.0], [2.0]])).unwrap();
        assert_eq!(hard_triplet_loss(&mut g, x, &[0, 0, 1], 0.3).unwrap_err(), LossError::DegenerateBatch { label: 1 });
        assert!(matches!(hard_triplet_loss(&mut g, x, &[0, 0, 0], 0.3), Err(LossError::DegenerateBatch { .. })));
    }

    #[test]
    fn triplet_zero_when_margin_separated() {
        let l = eval(|g| {
            let x = g.constant(Tensor::from_rows(&[[0.0], [0.1], [5.0], [5.2]]))?;
            hard_triplet_loss(g, x, &[0, 0, 1, 1], 0.3)
        });
        assert_eq!(l, 0.0);
    }

    #[test]
    fn center_loss_examples() {
        let mut st = CenterState::zeros(2, 2, 0.5);
        st.centers = Tensor::from_rows(&[[0.0, 0.0], [1.0, -1.0]]);
        let at = eval(|g| {
            let x = g.constant(Tensor::from_rows(&[[1.0, -1.0], [0.0, 0.0]]))?;
            center_loss(g, x, &[1, 0], &st)
        });
        assert_eq!(at, 0.0);
        let one = eval(|g| {
            let x = g.constant(Tensor::from_rows(&[[1.0, 1.0]]))?;
            center_loss(g, x, &[0], &st)
        });
        assert_eq!(one, 1.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 1.0]])).unwrap();
        assert_eq!(
            center_loss(&mut g, x, &[2], &st).unwrap_err(),
            LossError::LabelOutOfRange { label: 2, num_classes: 2 }
        );
    }

    #[test]
    fn center_update_rules() {
        let mut st = CenterState::zeros(3, 2, 1.0);
        st.centers = Tensor::from_rows(&[[0.0, 0.0], [2.0, 2.0], [7.0, -7.0]]);
        let before = st.centers.clone();
        st.update(&Tensor::from_rows(&[[2.0, 2.0], [2.0, 2.0]]), &[1, 1]).unwrap();
        assert_eq!(st.centers, before);
        st.update(&Tensor::from_rows(&[[4.0, -2.0]]), &[0]).unwrap();
        assert_eq!(st.centers.row(0), &[2.0, -1.0]);
        assert_eq!(st.centers.row(2), before.row(2));
        assert!(st.update(&Tensor::from_rows(&[[0.0, 0.0]]), &[3]).is_err());
    }

    #[test]
    fn classification_examples() {
        let z = eval(|g| {
            let l = g.constant(Tensor::zeros(&[4, 3]))?;
            classification_ce(g, l, &[0, 1, 2, 0])
        });
        assert!((z - 3f64.ln()).abs() < 1e-12);
        let confident = eval(|g| {
            let l = g.constant(Tensor::from_rows(&[[500.0, 0.0], [0.0, 500.0]]))?;
            classification_ce(g, l, &[0, 1])
        });
        assert!(confident < 1e-200);
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 2])).unwrap();
        assert!(matches!(classification_ce(&mut g, l, &[2]), Err(LossError::LabelOutOfRange { .. })));
    }

    #[test]
    fn total_loss_examples() {
        let r = LossReport {
            msc: Some(1.0),
            triplet: 1.0,
            center: 10.0,
            cls: 1.0,
            total: 0.0,
        };
        assert_eq!(weighted_total(&r, &LossWeights::default()).unwrap(), 4.0);
        let zero = LossWeights {
            w_msc: 0.0,
            w_triplet: 0.0,
            w_center: 0.0,
            w_cls: 0.0,
            margin: 0.3,
        };
        assert_eq!(weighted_total(&r, &zero).unwrap(), 0.0);
        let doubled = LossWeights {
            w_center: 0.2,
            ..LossWeights::default()
        };
        assert!((weighted_total(&r, &doubled).unwrap() - 4.0 - 1.0).abs() < 1e-12);

        let mut g = Graph::new();
        let parts = LossComponents {
            msc: Some(g.constant(Tensor::scalar(1.0)).unwrap()),
            triplet: g.constant(Tensor::scalar(1.0)).unwrap(),
            center: g.constant(Tensor::scalar(10.0)).unwrap(),
            cls: g.constant(Tensor::scalar(1.0)).unwrap(),
        };
        let (v, rep) = total_loss(&mut g, &parts, &LossWeights::default()).unwrap();
        assert!((g.value(v).item() - 4.0).abs() < 1e-15);
        assert_eq!(rep.center, 10.0);
        assert_eq!(rep.csv_line(3), "3,1,1,10,1,4");

        let bad = LossReport { cls: f64::NAN, ..r };
        assert_eq!(weighted_total(&bad, &zero), Err(LossError::NonFiniteComponent { name: "cls" }));
    }
}
