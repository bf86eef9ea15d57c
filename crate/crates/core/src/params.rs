//! Learnable parameters, partitioned by owner group.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{Graph, Tensor, Var};

/// Owner of a parameter, used for freezing and accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Patch projection and position embedding.
    Embedder,
    /// Attention blocks and the final norm.
    Blocks,
    ClsToken,
    Prompts,
    /// Private widening projection of the single-prompt variant.
    PromptProjection,
    ClsHead,
    TaskHeads,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Embedder,
        ParamGroup::Blocks,
        ParamGroup::ClsToken,
        ParamGroup::Prompts,
        ParamGroup::PromptProjection,
        ParamGroup::ClsHead,
        ParamGroup::TaskHeads,
    ];

    /// Groups held fixed when the backbone is frozen.
    pub fn is_backbone(self) -> bool {
        matches!(self, ParamGroup::Embedder | ParamGroup::Blocks | ParamGroup::ClsToken)
    }

    /// Task heads only exist to supervise prompts during training.
    pub fn used_at_inference(self) -> bool {
        self != ParamGroup::TaskHeads
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embedder => "embedder",
            ParamGroup::Blocks => "blocks",
            ParamGroup::ClsToken => "cls_token",
            ParamGroup::Prompts => "prompts",
            ParamGroup::PromptProjection => "prompt_projection",
            ParamGroup::ClsHead => "cls_head",
            ParamGroup::TaskHeads => "task_heads",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// How a fresh parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Constant(f64),
}

/// Every learnable scalar of a model, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    seed: u64,
    params: Vec<Param>,
}

/// Per-group scalar counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Census {
    pub groups: BTreeMap<ParamGroup, usize>,
}

impl Census {
    pub fn total(&self) -> usize {
        self.groups.values().sum()
    }

    pub fn group(&self, group: ParamGroup) -> usize {
        self.groups.get(&group).copied().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CensusMode {
    Train,
    Inference,
}

/// Graph handles for every parameter of a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Independent seed for one named parameter, so a parameter's initial value
/// does not depend on which other parameters a model variant registers.
fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl ModelParams {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, shape: &[usize], init: Init) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter `{name}`"
        );
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Constant(c) => vec![c; n],
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(param_seed(self.seed, name));
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        self.params.push(Param {
            name: name.to_string(),
            group,
            value: Tensor::new(shape, data).expect("shape matches data"),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Registers every parameter on `graph`; parameters of groups for which
    /// `frozen` returns true are bound without gradient tracking.
    pub fn bind(&self, graph: &mut Graph, frozen: impl Fn(ParamGroup) -> bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| graph.leaf(p.value.clone(), !frozen(p.group)))
                .collect(),
        }
    }

    /// Binds parameters that were already placed on a graph (e.g. by a
    /// gradient checker) in registration order.
    pub fn bound_from_vars(&self, vars: &[Var]) -> Bound {
        assert_eq!(vars.len(), self.params.len());
        Bound { vars: vars.to_vec() }
    }

    pub fn census(&self, mode: CensusMode) -> Census {
        let mut census = Census::default();
        for p in &self.params {
            if mode == CensusMode::Inference && !p.group.used_at_inference() {
                continue;
            }
            *census.groups.entry(p.group).or_default() += p.value.numel();
        }
        census
    }

    /// Keeps the parameters matching `keep`. Returns the old-id → new-id map;
    /// callers holding ids must remap them.
    pub(crate) fn retain(&mut self, keep: impl Fn(&Param) -> bool) -> Vec<Option<ParamId>> {
        let mut remap = Vec::with_capacity(self.params.len());
        let mut kept = Vec::new();
        for p in self.params.drain(..) {
            if keep(&p) {
                remap.push(Some(ParamId(kept.len())));
                kept.push(p);
            } else {
                remap.push(None);
            }
        }
        self.params = kept;
        remap
    }
}
