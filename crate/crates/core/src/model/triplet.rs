use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training or evaluation example: an image descriptor, a prompt and the
/// expected response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub id: u64,
    /// Row-major `[n_visual_tokens, d_descriptor]` descriptor matrix.
    pub image: Vec<f32>,
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
}

impl Triplet {
    pub fn layout(&self, n_visual: usize) -> TokenLayout {
        TokenLayout {
            n_visual,
            n_prompt: self.prompt.len(),
            n_response: self.response.len(),
        }
    }

    /// Prompt followed by response, the text part of the input sequence.
    pub fn text(&self) -> Vec<usize> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.response);
        t
    }
}

/// Position bookkeeping for `[visual | prompt | response]` sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub n_visual: usize,
    pub n_prompt: usize,
    pub n_response: usize,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.n_visual + self.n_prompt + self.n_response
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn response_start(&self) -> usize {
        self.n_visual + self.n_prompt
    }

    /// Positions whose logits predict the response tokens (teacher forcing:
    /// position `p` predicts the token at `p + 1`).
    pub fn loss_positions(&self) -> Vec<usize> {
        let start = self.response_start();
        (0..self.n_response).map(|j| start + j - 1).collect()
    }

    pub fn check(&self) -> Result<()> {
        if self.n_response == 0 {
            return Err(Error::Data("response must be nonempty".into()));
        }
        if self.response_start() == 0 {
            return Err(Error::Data("a response needs at least one preceding token".into()));
        }
        Ok(())
    }
}
