use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{HeadKind, ModelConfig, ModelError};
use crate::ndgrad::{Float, Tape, Tensor, Var};

/// Standard deviation of the normal initializer for weight matrices and
/// position embeddings.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Head,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "backbone" => Some(ParamGroup::Backbone),
            "head" => Some(ParamGroup::Head),
            _ => None,
        }
    }
}

/// Which parameter groups collect gradients when bound to a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    HeadOnly,
    Nothing,
}

impl Trainable {
    fn includes(self, group: ParamGroup) -> bool {
        match self {
            Trainable::All => true,
            Trainable::HeadOnly => group == ParamGroup::Head,
            Trainable::Nothing => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

/// Kind of initial values a parameter receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum InitKind {
    Normal,
    Zeros,
    Ones,
}

/// Name, group, shape and initializer of every parameter, in storage order.
pub(crate) fn layout(config: &ModelConfig) -> Vec<(String, ParamGroup, Vec<usize>, InitKind)> {
    use InitKind::*;
    use ParamGroup::*;
    let d = config.d_model;
    let mut out = vec![
        ("input_projection.weight".to_string(), Backbone, vec![config.n_channels, d], Normal),
        ("input_projection.bias".to_string(), Backbone, vec![d], Zeros),
        ("position_embeddings".to_string(), Backbone, vec![config.seq_len, d], Normal),
    ];
    for b in 0..config.n_blocks {
        for proj in ["query", "key", "value", "output"] {
            out.push((format!("blocks.{b}.attention.{proj}.weight"), Backbone, vec![d, d], Normal));
            out.push((format!("blocks.{b}.attention.{proj}.bias"), Backbone, vec![d], Zeros));
        }
        out.push((format!("blocks.{b}.norm.gamma"), Backbone, vec![d], Ones));
        out.push((format!("blocks.{b}.norm.beta"), Backbone, vec![d], Zeros));
    }
    out.extend(head_layout(config.d_model, config.head_kind));
    out
}

fn head_layout(d_model: usize, kind: HeadKind) -> Vec<(String, ParamGroup, Vec<usize>, InitKind)> {
    let outputs = kind.outputs();
    vec![
        ("head.weight".to_string(), ParamGroup::Head, vec![d_model, outputs], InitKind::Normal),
        ("head.bias".to_string(), ParamGroup::Head, vec![outputs], InitKind::Zeros),
    ]
}

pub(crate) const PARAMS_PER_BLOCK: usize = 10;
pub(crate) const STEM_PARAMS: usize = 3;

fn init_tensor<R: Rng + ?Sized>(shape: &[usize], kind: InitKind, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0f64, INIT_STD).unwrap();
    match kind {
        InitKind::Normal => {
            let numel = shape.iter().product();
            let data = (0..numel).map(|_| normal.sample(rng) as f32).collect();
            Tensor::new(shape, data).unwrap()
        }
        InitKind::Zeros => Tensor::zeros(shape),
        InitKind::Ones => Tensor::full(shape, 1.0),
    }
}

/// Named parameters of the model: a backbone plus a swappable head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    config: ModelConfig,
    params: Vec<Parameter<T>>,
}

impl ModelParams<f32> {
    /// Weights drawn from `Normal(0, 0.02^2)`, biases zero, `gamma = 1`, `beta = 0`.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let params = layout(&config)
            .into_iter()
            .map(|(name, group, shape, kind)| Parameter {
                name,
                group,
                tensor: init_tensor(&shape, kind, rng),
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Keeps the backbone bit-for-bit and attaches a freshly initialized head.
    pub fn swap_head<R: Rng + ?Sized>(&self, kind: HeadKind, rng: &mut R) -> Self {
        let mut config = self.config.clone();
        config.head_kind = kind;
        let mut params: Vec<Parameter> = self
            .params
            .iter()
            .filter(|p| p.group == ParamGroup::Backbone)
            .cloned()
            .collect();
        for (name, group, shape, init) in head_layout(config.d_model, kind) {
            params.push(Parameter {
                name,
                group,
                tensor: init_tensor(&shape, init, rng),
            });
        }
        Self { config, params }
    }
}

impl<T: Float> ModelParams<T> {
    /// Assembles parameters loaded from elsewhere, checking names, order,
    /// groups and shapes against `config`.
    pub fn from_parts(config: ModelConfig, params: Vec<Parameter<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(ModelError::Layout(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, group, shape, _), p) in expected.iter().zip(&params) {
            if *name != p.name || *group != p.group || shape.as_slice() != p.tensor.shape() {
                return Err(ModelError::Layout(format!(
                    "parameter {} ({}, {:?}) does not match expected {} ({}, {:?})",
                    p.name,
                    p.group.as_str(),
                    p.tensor.shape(),
                    name,
                    group.as_str(),
                    shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    group: p.group,
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }

    /// SHA-256 over the names, shapes and little-endian bytes of the backbone.
    pub fn backbone_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == ParamGroup::Backbone) {
            hasher.update(p.name.as_bytes());
            for &d in p.tensor.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &x in p.tensor.data() {
                hasher.update(x.as_f64().to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: Trainable) -> Result<BoundParams, ModelError> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let leaf = p.tensor.clone().with_requires_grad(trainable.includes(p.group));
                tape.leaf(leaf)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BoundParams {
            vars,
            n_blocks: self.config.n_blocks,
        })
    }
}

/// Tape handles of a bound [`ModelParams`], in storage order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    n_blocks: usize,
}

/// Tape handles of one transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub query: (Var, Var),
    pub key: (Var, Var),
    pub value: (Var, Var),
    pub output: (Var, Var),
    pub gamma: Var,
    pub beta: Var,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn input_projection(&self) -> (Var, Var) {
        (self.vars[0], self.vars[1])
    }

    pub fn position_embeddings(&self) -> Var {
        self.vars[2]
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn block(&self, index: usize) -> BlockVars {
        assert!(index < self.n_blocks);
        let v = &self.vars[STEM_PARAMS + index * PARAMS_PER_BLOCK..];
        BlockVars {
            query: (v[0], v[1]),
            key: (v[2], v[3]),
            value: (v[4], v[5]),
            output: (v[6], v[7]),
            gamma: v[8],
            beta: v[9],
        }
    }

    pub fn head(&self) -> (Var, Var) {
        let n = self.vars.len();
        (self.vars[n - 2], self.vars[n - 1])
    }
}
