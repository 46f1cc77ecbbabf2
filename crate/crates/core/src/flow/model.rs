use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

use super::coupling::{BoundBlock, CouplingBlock};
use super::permutation::PermMode;
use super::positional::PosMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub blocks: usize,
    /// Subnet hidden width; `None` means `2 * max(d, 64)`.
    pub hidden: Option<usize>,
    pub clamp_alpha: f64,
    pub perm: PermMode,
    pub pos_dim: usize,
    pub pos_mode: PosMode,
    /// Fixed per-channel scale applied after each block.
    pub scale: f64,
    /// Zero-pad odd feature dims by one channel instead of failing.
    pub pad_odd: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            blocks: 12,
            hidden: None,
            clamp_alpha: 1.9,
            perm: PermMode::Hard,
            pos_dim: 256,
            pos_mode: PosMode::Auto,
            scale: 1.0,
            pad_odd: false,
        }
    }
}

impl FlowConfig {
    pub fn hidden_for(&self, dim: usize) -> usize {
        self.hidden.unwrap_or(2 * dim.max(64))
    }
}

/// Stack of coupling blocks for one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel<T> {
    pub level: usize,
    /// Feature dim as stored in the data.
    pub input_dim: usize,
    /// Dim the blocks operate on (`input_dim + 1` when padded).
    pub dim: usize,
    pub pos_dim: usize,
    pub blocks: Vec<CouplingBlock<T>>,
}

#[derive(Debug, Clone)]
pub struct BoundFlow {
    pub blocks: Vec<BoundBlock>,
}

impl BoundFlow {
    pub fn params(&self) -> Vec<Var> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }
}

impl<T: Scalar> FlowModel<T> {
    pub fn new(level: usize, input_dim: usize, cfg: &FlowConfig, seed: u64) -> Result<Self> {
        let dim = if input_dim % 2 == 1 {
            if !cfg.pad_odd {
                return Err(Error::Invalid(format!(
                    "level {level}: odd feature dim {input_dim} without pad_odd"
                )));
            }
            input_dim + 1
        } else {
            input_dim
        };
        let hidden = cfg.hidden_for(dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..cfg.blocks)
            .map(|_| {
                CouplingBlock::init(dim, hidden, cfg.pos_dim, cfg.clamp_alpha, cfg.perm, cfg.scale, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            level,
            input_dim,
            dim,
            pos_dim: cfg.pos_dim,
            blocks,
        })
    }

    pub fn padded(&self) -> bool {
        self.dim != self.input_dim
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundFlow {
        BoundFlow {
            blocks: self.blocks.iter().map(|b| b.bind(g)).collect(),
        }
    }

    /// Binds using `params` (five per block, in [`Self::params`] order).
    pub fn bind_params(&self, g: &mut Graph<T>, params: &[Var]) -> Result<BoundFlow> {
        if params.len() != 5 * self.blocks.len() {
            return Err(Error::shape(
                "bind_params",
                format!("{} handles for {} blocks", params.len(), self.blocks.len()),
            ));
        }
        let blocks = self
            .blocks
            .iter()
            .zip(params.chunks_exact(5))
            .map(|(b, p)| b.bind_params(g, [p[0], p[1], p[2], p[3], p[4]]))
            .collect();
        Ok(BoundFlow { blocks })
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }

    /// Appends the zero channel when the model pads odd inputs.
    pub fn prepare_input(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.input_dim {
            return Err(Error::shape(
                "flow_forward",
                format!("features have {} channels, model expects {}", x.cols(), self.input_dim),
            ));
        }
        if self.padded() {
            Tensor::concat_cols(&[x, &Tensor::zeros(x.rows(), 1)])
        } else {
            Ok(x.clone())
        }
    }

    /// Sequential forward through all blocks on the graph.
    /// `x` must already have `self.dim` channels.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &BoundFlow,
        x: Var,
        pos: Option<Var>,
    ) -> Result<(Var, Var)> {
        let rows = g.value(x).rows();
        let mut z = x;
        let mut logdet = g.constant(Tensor::zeros(rows, 1));
        for (block, b) in self.blocks.iter().zip(&bound.blocks) {
            let (next, ld) = block.forward(g, b, z, pos)?;
            z = next;
            logdet = g.add(logdet, ld)?;
        }
        Ok((z, logdet))
    }

    /// Convenience forward on plain tensors: `(z [B, dim], logdet [B])`.
    pub fn forward_tensor(&self, x: &Tensor<T>, pos: Option<&Tensor<T>>) -> Result<(Tensor<T>, Vec<T>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xin = g.constant(self.prepare_input(x)?);
        let pv = pos.map(|p| g.constant(p.clone()));
        let (z, ld) = self.forward(&mut g, &bound, xin, pv)?;
        Ok((g.value(z).clone(), g.value(ld).data().to_vec()))
    }

    /// Exact inverse; returns `[B, input_dim]` (padding channel dropped).
    pub fn inverse(&self, z: &Tensor<T>, pos: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut x = z.clone();
        for block in self.blocks.iter().rev() {
            x = block.inverse(&x, pos)?;
        }
        if self.padded() {
            x.slice_cols(0, self.input_dim)
        } else {
            Ok(x)
        }
    }
}
