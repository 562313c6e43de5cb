//! Flat parameter storage shared by every layer of a model.

use rand_distr::{Distribution, Normal};

use crate::rng::Rng;

pub type ParamId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub fan_in: usize,
    pub fan_out: usize,
    pub data: Vec<f32>,
}

impl ParamBlock {
    /// Variance of the Glorot-normal distribution for this block.
    pub fn glorot_variance(&self) -> f64 {
        2.0 / (self.fan_in + self.fan_out) as f64
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    pub blocks: Vec<ParamBlock>,
}

impl ParamStore {
    pub(crate) fn add_weight(&mut self, name: String, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> ParamId {
        let len = shape.iter().product();
        self.blocks.push(ParamBlock {
            name,
            shape,
            kind: ParamKind::Weight,
            fan_in,
            fan_out,
            data: vec![0.0; len],
        });
        self.blocks.len() - 1
    }

    pub(crate) fn add_bias(&mut self, name: String, len: usize) -> ParamId {
        self.blocks.push(ParamBlock {
            name,
            shape: vec![len],
            kind: ParamKind::Bias,
            fan_in: 0,
            fan_out: 0,
            data: vec![0.0; len],
        });
        self.blocks.len() - 1
    }

    /// Glorot-normal weights, zero biases. Blocks are filled in registration order.
    pub fn init_glorot(&mut self, rng: &mut Rng) {
        for block in &mut self.blocks {
            match block.kind {
                ParamKind::Bias => block.data.iter_mut().for_each(|v| *v = 0.0),
                ParamKind::Weight => {
                    let normal = Normal::new(0.0, block.glorot_variance().sqrt()).expect("finite std");
                    for v in &mut block.data {
                        *v = normal.sample(rng) as f32;
                    }
                }
            }
        }
    }

    pub fn data(&self, id: ParamId) -> &[f32] {
        &self.blocks[id].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.blocks[id].data
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub blocks: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            blocks: store.blocks.iter().map(|b| vec![0.0; b.data.len()]).collect(),
        }
    }

    pub fn data(&self, id: ParamId) -> &[f32] {
        &self.blocks[id]
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.blocks[id]
    }

    pub fn zero(&mut self) {
        for b in &mut self.blocks {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}
