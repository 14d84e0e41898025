use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::losses::{
    build_supervision, center_loss, classification_ce, hard_triplet_loss, msc_loss, similarity, similarity_scaled,
    CeDirection, CenterState,
};
use crate::model::{Bound, Model, ModelDims};
use crate::numerics::{finite_difference_check, Graph, Tensor, Var};

use super::HarnessError;

pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub name: &'static str,
    pub max_rel_error: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= SUITE_TOLERANCE
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape")
}

fn check<F>(name: &'static str, params: &[Tensor], f: F) -> Result<GradCase, HarnessError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, HarnessError>,
{
    let r = finite_difference_check(f, params, SUITE_EPS)?;
    Ok(GradCase {
        name,
        max_rel_error: r.max_rel_error,
    })
}

fn weighted_sum(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var, HarnessError> {
    let c = g.constant(w.clone())?;
    let p = g.mul(x, c)?;
    Ok(g.sum(p)?)
}

/// Central finite-difference checks of every objective and both encoders on
/// small fixed instances.
pub fn gradient_suite() -> Result<Vec<GradCase>, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cases = Vec::new();

    let labels = [0usize, 1, 0, 2, 1];
    let sup = build_supervision(&labels);
    let (s, v) = (random(&mut rng, &[5, 6], 1.0), random(&mut rng, &[5, 6], 1.0));
    for (name, dir) in [
        ("msc_loss", CeDirection::Both),
        ("msc_loss_rows", CeDirection::Rows),
        ("msc_loss_columns", CeDirection::Columns),
    ] {
        cases.push(check(name, &[s.clone(), v.clone()], |g, p| {
            let sv = similarity(g, p[0], p[1], 0.07)?;
            Ok(msc_loss(g, sv, &sup, dir)?)
        })?);
    }
    cases.push(check(
        "msc_loss_learned_temperature",
        &[s.clone(), v.clone(), Tensor::scalar(1.0 / 0.07)],
        |g, p| {
            let sv = similarity_scaled(g, p[0], p[1], p[2])?;
            Ok(msc_loss(g, sv, &sup, CeDirection::Both)?)
        },
    )?);

    // spread-out features keep the hardest positive and negative unambiguous
    let tri_labels = [0usize, 0, 1, 1, 2, 2];
    let feats = random(&mut rng, &[6, 4], 2.0);
    cases.push(check("hard_triplet_loss", &[feats], |g, p| {
        Ok(hard_triplet_loss(g, p[0], &tri_labels, 5.0)?)
    })?);

    let centers = CenterState {
        centers: random(&mut rng, &[3, 4], 1.0),
        alpha: 0.5,
    };
    cases.push(check("center_loss", &[random(&mut rng, &[5, 4], 1.0)], |g, p| {
        Ok(center_loss(g, p[0], &[0, 2, 1, 2, 0], &centers)?)
    })?);

    cases.push(check("classification_ce", &[random(&mut rng, &[5, 4], 2.0)], |g, p| {
        Ok(classification_ce(g, p[0], &[3, 0, 1, 1, 2])?)
    })?);

    let dims = ModelDims {
        vocab_size: 7,
        token_dim: 4,
        mol_hidden: 5,
        frame_dim: 3,
        seq_hidden: 6,
        embed_dim: 4,
        num_classes: 3,
    };
    let model = Model::new(dims, 0.07, 11);
    let tokens = vec![vec![2, 3, 4, 0, 0], vec![5, 2, 2, 6, 0], vec![1, 3, 0, 0, 0]];
    let pooled = random(&mut rng, &[3, 6], 2.0);
    let readout = random(&mut rng, &[3, 4], 1.0);

    let subset = |prefix: &str| -> (Vec<String>, Vec<Tensor>) {
        model
            .params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| (p.name.clone(), p.value.clone()))
            .unzip()
    };

    let (mol_names, mol_params) = subset("mol.");
    cases.push(check("molecule_encoder", &mol_params, |g, p| {
        let b = Bound::from_vars(&mol_names, p);
        let e = model.molecule_embeddings(g, &b, &tokens)?;
        weighted_sum(g, e, &readout)
    })?);

    let (seq_names, seq_params) = subset("seq.");
    cases.push(check("sequence_encoder", &seq_params, |g, p| {
        let b = Bound::from_vars(&seq_names, p);
        let e = model.sequence_embeddings(g, &b, &pooled)?;
        weighted_sum(g, e, &readout)
    })?);

    let (head_names, head_params) = subset("head.");
    let emb = random(&mut rng, &[3, 4], 1.0);
    cases.push(check("classification_head", &head_params, |g, p| {
        let b = Bound::from_vars(&head_names, p);
        let x = g.constant(emb.clone())?;
        let logits = model.logits(g, &b, x)?;
        Ok(classification_ce(g, logits, &[2, 0, 1])?)
    })?);

    Ok(cases)
}
