//! Small stand-in encoders for both modalities, the linear classification
//! head, and the named parameter store with per-parameter freezing.
//!
//! The molecule encoder averages token embeddings over non-PAD positions and
//! applies `affine -> tanh -> affine`. The sequence encoder concatenates the
//! per-feature mean and max over frames and applies `affine -> relu ->
//! affine`. Because of the pooling, the sequence encoder ignores frame order.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::smiles::PAD_ID;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("token sequence contains only padding")]
    AllPadding,
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    IdOutOfRange { id: usize, vocab_size: usize },
    #[error("frame sequence is empty")]
    EmptySequence,
    #[error("frames have {got} features, encoder expects {expected}")]
    FrameDimMismatch { expected: usize, got: usize },
    #[error("no parameter matches prefix {0:?}")]
    NoSuchParameter(String),
    #[error("parameter {name} expects shape {expected:?}, got {got:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub token_dim: usize,
    pub mol_hidden: usize,
    pub frame_dim: usize,
    pub seq_hidden: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    /// Momentum buffer of the optimizer.
    pub velocity: Tensor,
}

/// Named parameters in a fixed order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    params: Vec<Parameter>,
}

impl ParameterSet {
    pub fn insert(&mut self, name: &str, value: Tensor) {
        let velocity = Tensor::zeros(value.shape());
        let p = Parameter {
            name: name.to_string(),
            value,
            trainable: true,
            velocity,
        };
        match self.params.iter_mut().find(|q| q.name == name) {
            Some(slot) => *slot = p,
            None => self.params.push(p),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Sets the trainable flag of every parameter whose name starts with
    /// `prefix`; returns how many matched.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> Result<usize, ModelError> {
        let mut hits = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
            hits += 1;
        }
        if hits == 0 {
            return Err(ModelError::NoSuchParameter(prefix.to_string()));
        }
        Ok(hits)
    }

    /// Clears every momentum buffer.
    pub fn reset_velocity(&mut self) {
        for p in &mut self.params {
            p.velocity = Tensor::zeros(p.value.shape());
        }
    }
}

/// Parameter nodes of one forward pass, by name.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Pairs names with nodes created elsewhere (e.g. by a gradient checker).
    pub fn from_vars(names: &[String], vars: &[Var]) -> Self {
        Bound {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

pub const MOL_PREFIX: &str = "mol.";
pub const SEQ_PREFIX: &str = "seq.";
pub const HEAD_PREFIX: &str = "head.";
pub const INV_TEMPERATURE: &str = "clip.inv_tau";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub dims: ModelDims,
    pub params: ParameterSet,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl Model {
    /// Fresh model with `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and
    /// biases. Embedding rows use fan-in 1.
    pub fn new(dims: ModelDims, temperature: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims;
        let mut params = ParameterSet::default();
        params.insert("mol.embed", uniform(&mut rng, &[d.vocab_size, d.token_dim], 1));
        params.insert("mol.fc1.w", uniform(&mut rng, &[d.token_dim, d.mol_hidden], d.token_dim));
        params.insert("mol.fc1.b", uniform(&mut rng, &[d.mol_hidden], d.token_dim));
        params.insert("mol.fc2.w", uniform(&mut rng, &[d.mol_hidden, d.embed_dim], d.mol_hidden));
        params.insert("mol.fc2.b", uniform(&mut rng, &[d.embed_dim], d.mol_hidden));
        let pooled = 2 * d.frame_dim;
        params.insert("seq.fc1.w", uniform(&mut rng, &[pooled, d.seq_hidden], pooled));
        params.insert("seq.fc1.b", uniform(&mut rng, &[d.seq_hidden], pooled));
        params.insert("seq.fc2.w", uniform(&mut rng, &[d.seq_hidden, d.embed_dim], d.seq_hidden));
        params.insert("seq.fc2.b", uniform(&mut rng, &[d.embed_dim], d.seq_hidden));
        params.insert(INV_TEMPERATURE, Tensor::scalar(1.0 / temperature));
        params.set_trainable(INV_TEMPERATURE, false).expect("just inserted");
        let mut model = Model { dims, params };
        model.reset_head(d.num_classes, rng.random());
        model
    }

    /// Replaces the classification head with a freshly initialized one.
    pub fn reset_head(&mut self, num_classes: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.dims.embed_dim;
        self.params.insert("head.w", uniform(&mut rng, &[d, num_classes], d));
        self.params.insert("head.b", uniform(&mut rng, &[num_classes], d));
        self.dims.num_classes = num_classes;
    }

    /// Copies every parameter under `prefix` from `other`, checking shapes.
    pub fn copy_params_from(&mut self, other: &Model, prefix: &str) -> Result<usize, ModelError> {
        let mut hits = 0;
        for src in other.params.iter().filter(|p| p.name.starts_with(prefix)) {
            let dst = self
                .params
                .get_mut(&src.name)
                .ok_or_else(|| ModelError::NoSuchParameter(src.name.clone()))?;
            if dst.value.shape() != src.value.shape() {
                return Err(ModelError::ParameterShape {
                    name: src.name.clone(),
                    expected: dst.value.shape().to_vec(),
                    got: src.value.shape().to_vec(),
                });
            }
            dst.value = src.value.clone();
            hits += 1;
        }
        if hits == 0 {
            return Err(ModelError::NoSuchParameter(prefix.to_string()));
        }
        Ok(hits)
    }

    pub fn temperature(&self) -> f64 {
        1.0 / self.params.get(INV_TEMPERATURE).expect("temperature parameter").value.item()
    }

    /// Puts every parameter on the graph: trainable ones as tracked leaves,
    /// frozen ones as constants.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound, ModelError> {
        let mut vars = BTreeMap::new();
        for p in self.params.iter() {
            let v = if p.trainable {
                g.param(p.value.clone())?
            } else {
                g.constant(p.value.clone())?
            };
            vars.insert(p.name.clone(), v);
        }
        Ok(Bound { vars })
    }

    /// Validates token ids and builds the `[B, vocab]` masked-mean pooling
    /// matrix.
    pub fn token_pooling(&self, batch: &[Vec<usize>]) -> Result<Tensor, ModelError> {
        let v = self.dims.vocab_size;
        let mut pool = Tensor::zeros(&[batch.len(), v]);
        for (i, ids) in batch.iter().enumerate() {
            if let Some(&id) = ids.iter().find(|&&id| id >= v) {
                return Err(ModelError::IdOutOfRange { id, vocab_size: v });
            }
            let real: Vec<usize> = ids.iter().copied().filter(|&id| id != PAD_ID).collect();
            if real.is_empty() {
                return Err(ModelError::AllPadding);
            }
            let w = 1.0 / real.len() as f64;
            for id in real {
                pool.data_mut()[i * v + id] += w;
            }
        }
        Ok(pool)
    }

    /// `[B, d]` molecule embeddings.
    pub fn molecule_embeddings(&self, g: &mut Graph, b: &Bound, batch: &[Vec<usize>]) -> Result<Var, ModelError> {
        let pool = g.constant(self.token_pooling(batch)?)?;
        let pooled = g.matmul(pool, b.var("mol.embed"))?;
        let h = affine(g, pooled, b.var("mol.fc1.w"), b.var("mol.fc1.b"))?;
        let h = g.tanh(h)?;
        affine(g, h, b.var("mol.fc2.w"), b.var("mol.fc2.b"))
    }

    /// `[B, d]` sequence embeddings from `[B, 2f]` pooled frame features.
    pub fn sequence_embeddings(&self, g: &mut Graph, b: &Bound, pooled: &Tensor) -> Result<Var, ModelError> {
        let expected = 2 * self.dims.frame_dim;
        let got = pooled.dims2().map_or(0, |(_, c)| c);
        if got != expected {
            return Err(ModelError::FrameDimMismatch { expected, got });
        }
        let x = g.constant(pooled.clone())?;
        let h = affine(g, x, b.var("seq.fc1.w"), b.var("seq.fc1.b"))?;
        let h = g.relu(h)?;
        affine(g, h, b.var("seq.fc2.w"), b.var("seq.fc2.b"))
    }

    pub fn logits(&self, g: &mut Graph, b: &Bound, embeddings: Var) -> Result<Var, ModelError> {
        affine(g, embeddings, b.var("head.w"), b.var("head.b"))
    }

    /// Embedding of a single token sequence, shape `[d]`.
    pub fn encode_molecule(&self, token_ids: &[usize]) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g)?;
        let v = self.molecule_embeddings(&mut g, &b, &[token_ids.to_vec()])?;
        Ok(g.value(v).clone().reshape(vec![self.dims.embed_dim])?)
    }

    /// Embedding of one `[T, f]` frame sequence, shape `[d]`.
    pub fn encode_sequence(&self, frames: &Tensor) -> Result<Tensor, ModelError> {
        let pooled = pool_frames(frames, self.dims.frame_dim)?;
        let out = self.embed_pooled(&Tensor::from_rows(&[pooled]))?;
        Ok(out.reshape(vec![self.dims.embed_dim])?)
    }

    /// `[N, d]` sequence embeddings for pooled features, without gradients.
    pub fn embed_pooled(&self, pooled: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g)?;
        let v = self.sequence_embeddings(&mut g, &b, pooled)?;
        Ok(g.value(v).clone())
    }

    /// Logits for `[N, d]` (or a single `[d]`) embeddings.
    pub fn classify(&self, embeddings: &Tensor) -> Result<Tensor, ModelError> {
        let single = embeddings.rank() == 1;
        let e = if single {
            Tensor::from_rows(&[embeddings.data()])
        } else {
            embeddings.clone()
        };
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g)?;
        let x = g.constant(e)?;
        let l = self.logits(&mut g, &b, x)?;
        let out = g.value(l).clone();
        if single {
            Ok(out.reshape(vec![self.dims.num_classes])?)
        } else {
            Ok(out)
        }
    }

    fn bind_frozen(&self, g: &mut Graph) -> Result<Bound, ModelError> {
        let mut vars = BTreeMap::new();
        for p in self.params.iter() {
            vars.insert(p.name.clone(), g.constant(p.value.clone())?);
        }
        Ok(Bound { vars })
    }
}

/// `x W + b` with the bias broadcast over rows.
pub fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
    let xw = g.matmul(x, w)?;
    Ok(g.add(xw, b)?)
}

/// Concatenated per-feature mean and max over the frames of a `[T, f]`
/// sequence, length `2f`.
pub fn pool_frames(frames: &Tensor, frame_dim: usize) -> Result<Vec<f64>, ModelError> {
    let (t, f) = frames.dims2().ok_or(ModelError::EmptySequence)?;
    if t == 0 {
        return Err(ModelError::EmptySequence);
    }
    if f != frame_dim {
        return Err(ModelError::FrameDimMismatch { expected: frame_dim, got: f });
    }
    let mut mean = vec![0.0; f];
    let mut max = vec![f64::NEG_INFINITY; f];
    for i in 0..t {
        for (j, &v) in frames.row(i).iter().enumerate() {
            mean[j] += v;
            max[j] = max[j].max(v);
        }
    }
    for m in &mut mean {
        *m /= t as f64;
    }
    mean.extend(max);
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            vocab_size: 6,
            token_dim: 4,
            mol_hidden: 5,
            frame_dim: 3,
            seq_hidden: 5,
            embed_dim: 4,
            num_classes: 3,
        }
    }

    #[test]
    fn masked_mean_ignores_padding_and_repeats() {
        let m = Model::new(dims(), 0.07, 1);
        let one = m.encode_molecule(&[3]).unwrap();
        let many = m.encode_molecule(&[3, 3, 3, 3]).unwrap();
        assert!(one.max_abs_diff(&many) < 1e-15);
        let seq = m.encode_molecule(&[2, 4, 5]).unwrap();
        let padded = m.encode_molecule(&[2, 4, 5, PAD_ID, PAD_ID]).unwrap();
        assert_eq!(seq, padded);
        assert_eq!(seq.shape(), &[4]);
    }

    #[test]
    fn molecule_errors() {
        let m = Model::new(dims(), 0.07, 1);
        assert_eq!(m.encode_molecule(&[PAD_ID, PAD_ID]), Err(ModelError::AllPadding));
        assert_eq!(
            m.encode_molecule(&[2, 6]),
            Err(ModelError::IdOutOfRange { id: 6, vocab_size: 6 })
        );
    }

    #[test]
    fn sequence_pooling_properties() {
        let m = Model::new(dims(), 0.07, 2);
        let single = Tensor::from_rows(&[[0.5, -1.0, 2.0]]);
        let pooled = pool_frames(&single, 3).unwrap();
        assert_eq!(&pooled[..3], &pooled[3..]);

        let frames = Tensor::from_rows(&[[0.1, 0.2, 0.3], [-1.0, 2.0, 0.0], [0.7, 0.7, -0.2]]);
        let doubled = Tensor::from_rows(&[
            [0.1, 0.2, 0.3],
            [0.1, 0.2, 0.3],
            [-1.0, 2.0, 0.0],
            [-1.0, 2.0, 0.0],
            [0.7, 0.7, -0.2],
            [0.7, 0.7, -0.2],
        ]);
        let a = m.encode_sequence(&frames).unwrap();
        let b = m.encode_sequence(&doubled).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);

        assert_eq!(m.encode_sequence(&Tensor::zeros(&[0, 3])), Err(ModelError::EmptySequence));
        assert!(matches!(
            m.encode_sequence(&Tensor::zeros(&[2, 4])),
            Err(ModelError::FrameDimMismatch { expected: 3, got: 4 })
        ));
    }

    #[test]
    fn classify_examples() {
        let mut m = Model::new(
            ModelDims {
                num_classes: 4,
                ..dims()
            },
            0.07,
            3,
        );
        m.params.get_mut("head.w").unwrap().value = Tensor::zeros(&[4, 4]);
        m.params.get_mut("head.b").unwrap().value = Tensor::zeros(&[4]);
        let e = Tensor::vector(vec![0.3, -0.2, 1.0, 4.0]);
        assert_eq!(m.classify(&e).unwrap().data(), &[0.0; 4]);
        m.params.get_mut("head.w").unwrap().value = Tensor::identity(4);
        assert_eq!(m.classify(&e).unwrap(), e);
    }

    #[test]
    fn trainable_prefixes() {
        let mut m = Model::new(dims(), 0.07, 4);
        assert_eq!(m.params.set_trainable("mol.", false).unwrap(), 5);
        assert!(m.params.iter().filter(|p| p.name.starts_with("mol.")).all(|p| !p.trainable));
        assert!(m.params.get("seq.fc1.w").unwrap().trainable);
        assert_eq!(
            m.params.set_trainable("nope.", true),
            Err(ModelError::NoSuchParameter("nope.".into()))
        );
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = Model::new(dims(), 0.07, 9);
        let b = Model::new(dims(), 0.07, 9);
        let c = Model::new(dims(), 0.07, 10);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let w = &a.params.get("seq.fc1.w").unwrap().value;
        let bound = 1.0 / 6f64.sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!((a.temperature() - 0.07).abs() < 1e-15);
    }

    #[test]
    fn paper_scale_embedding_shape() {
        let m = Model::new(
            ModelDims {
                embed_dim: 2048,
                mol_hidden: 8,
                seq_hidden: 8,
                ..dims()
            },
            0.07,
            5,
        );
        assert_eq!(m.encode_molecule(&[2, 3]).unwrap().shape(), &[2048]);
        assert_eq!(m.encode_sequence(&Tensor::zeros(&[16, 3])).unwrap().shape(), &[2048]);
    }
}
