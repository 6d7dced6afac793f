//! Named parameter blocks shared by every learnable component.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Vanilla,
    Proposal,
    Pose,
    Threshold,
    Color,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Vanilla, Group::Proposal, Group::Pose, Group::Threshold, Group::Color];

    pub fn name(self) -> &'static str {
        match self {
            Group::Vanilla => "vanilla",
            Group::Proposal => "proposal",
            Group::Pose => "pose",
            Group::Threshold => "threshold",
            Group::Color => "color",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
    /// Whether L2 weight decay applies to this block.
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub blocks: Vec<Block>,
}

/// Dense layer `y = x W + b` referring to two blocks of a store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, group: Group, value: Tensor, decay: bool) -> usize {
        self.blocks.push(Block { name: name.into(), group, value, decay });
        self.blocks.len() - 1
    }

    /// Dense layer with PyTorch-style uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init.
    pub fn dense(
        &mut self,
        name: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
        decay: bool,
        rng: &mut impl Rng,
    ) -> Dense {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<f64>>();
        let w = Tensor::from_vec(fan_in, fan_out, draw(fan_in * fan_out));
        let b = Tensor::from_vec(1, fan_out, draw(fan_out));
        Dense {
            w: self.push(format!("{name}.weight"), group, w, decay),
            b: self.push(format!("{name}.bias"), group, b, decay),
        }
    }

    /// Dense layer initialised to zero.
    pub fn dense_zero(&mut self, name: &str, group: Group, fan_in: usize, fan_out: usize, decay: bool) -> Dense {
        Dense {
            w: self.push(format!("{name}.weight"), group, Tensor::zeros(fan_in, fan_out), decay),
            b: self.push(format!("{name}.bias"), group, Tensor::zeros(1, fan_out), decay),
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn count(&self, group: Group) -> usize {
        self.blocks.iter().filter(|b| b.group == group).map(|b| b.value.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn check_finite(&self) -> Result<()> {
        for b in &self.blocks {
            if !b.value.is_finite() {
                return Err(Error::Numeric(format!("parameter block {} is not finite", b.name)));
            }
        }
        Ok(())
    }

    /// Records every block on `g`; blocks in `trainable` groups become
    /// gradient-tracked leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph, trainable: &[Group]) -> Bound {
        let vars = self
            .blocks
            .iter()
            .map(|b| {
                if trainable.contains(&b.group) {
                    g.param(b.value.clone())
                } else {
                    g.constant(b.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.blocks.iter().map(|b| Tensor::zeros(b.value.rows, b.value.cols)).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.value.data.iter().copied()).collect()
    }
}

/// Graph handles for every block of a store.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, block: usize) -> Var {
        self.vars[block]
    }

    /// Per-block gradients, zero where a block received none.
    pub fn gradients(&self, store: &ParamStore, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&store.blocks)
            .map(|(&v, b)| grads.get_or_zeros(v, b.value.shape()))
            .collect()
    }
}
