//! Paired `(x, y)` examples shared by training, inference and the tasks.

use crate::flow::Preprocess;
use crate::tensor::Tensor;

/// One pair in raw units: `x` as generated, `y` as discrete labels or raw
/// continuous values.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x: Tensor,
    pub y: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    /// Maps raw `x` to the network input.
    pub input: Preprocess,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, input: Preprocess) -> Self {
        Self { examples, input }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn model_input(&self, i: usize) -> Tensor {
        self.input.normalize(&self.examples[i].x)
    }

    pub fn x_shape(&self) -> Option<[usize; 3]> {
        self.examples.first().and_then(|e| shape3(e.x.shape()))
    }

    pub fn y_shape(&self) -> Option<[usize; 3]> {
        self.examples.first().and_then(|e| shape3(e.y.shape()))
    }
}

pub(crate) fn shape3(s: &[usize]) -> Option<[usize; 3]> {
    <[usize; 3]>::try_from(s).ok()
}
