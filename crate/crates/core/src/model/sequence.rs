use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numeric::Matrix;

/// `[vision 0..n) | instruction n..n+m) | generated n+m..n+m+g)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    vision: Matrix,
    instruction: Vec<u32>,
    generated: Vec<u32>,
}

pub(crate) enum Slot {
    Vision(usize),
    Token(u32),
}

impl TokenSequence {
    /// `vision` must already be in model width.
    pub fn new(vision: Matrix, instruction: Vec<u32>) -> Result<Self, ModelError> {
        if vision.rows() == 0 {
            return Err(ModelError::EmptyVision);
        }
        if instruction.is_empty() {
            return Err(ModelError::EmptyInstruction);
        }
        Ok(Self {
            vision,
            instruction,
            generated: Vec::new(),
        })
    }

    pub fn vision(&self) -> &Matrix {
        &self.vision
    }

    pub fn instruction(&self) -> &[u32] {
        &self.instruction
    }

    pub fn generated(&self) -> &[u32] {
        &self.generated
    }

    pub fn n_vision(&self) -> usize {
        self.vision.rows()
    }

    pub fn len(&self) -> usize {
        self.vision.rows() + self.instruction.len() + self.generated.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn vision_range(&self) -> Range<usize> {
        0..self.n_vision()
    }

    pub fn instruction_range(&self) -> Range<usize> {
        let n = self.n_vision();
        n..n + self.instruction.len()
    }

    pub fn generated_range(&self) -> Range<usize> {
        let s = self.n_vision() + self.instruction.len();
        s..s + self.generated.len()
    }

    pub fn push_generated(&mut self, token: u32) {
        self.generated.push(token);
    }

    /// Text tokens (instruction then generated) in position order.
    pub fn text_tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.instruction.iter().chain(&self.generated).copied()
    }

    pub(crate) fn token_at(&self, pos: usize) -> Slot {
        let n = self.n_vision();
        if pos < n {
            return Slot::Vision(pos);
        }
        let t = pos - n;
        if t < self.instruction.len() {
            Slot::Token(self.instruction[t])
        } else {
            Slot::Token(self.generated[t - self.instruction.len()])
        }
    }

    /// Copy with independent `N(0, sigma²)` noise added to every vision
    /// embedding entry.
    pub fn with_vision_noise<R: Rng>(&self, sigma: f32, rng: &mut R) -> Self {
        let mut out = self.clone();
        for v in out.vision.data_mut() {
            let z: f32 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
        out
    }

    /// Copy with `prefix` placed in front of the instruction.
    pub fn with_instruction_prefix(&self, prefix: &[u32]) -> Self {
        let mut out = self.clone();
        out.instruction = prefix.iter().chain(&self.instruction).copied().collect();
        out
    }
}
