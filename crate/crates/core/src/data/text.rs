use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DataError, Result};
use crate::tensor::Tensor;

/// Frozen random token table, mean-pooled over a narration.
#[derive(Clone, Debug, PartialEq)]
pub struct NarrationEmbedder {
    table: Tensor,
}

impl NarrationEmbedder {
    pub fn new(vocab_size: usize, d_text: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..vocab_size * d_text)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let table = Tensor::new(vec![vocab_size, d_text], data)
            .map_err(|e| DataError::Shape(format!("narration table: {e}")))?;
        Ok(NarrationEmbedder { table })
    }

    pub fn from_table(table: Tensor) -> Result<Self> {
        if table.shape().len() != 2 {
            return Err(DataError::Shape(format!(
                "narration table must be a matrix, got {:?}",
                table.shape()
            )));
        }
        Ok(NarrationEmbedder { table })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn d_text(&self) -> usize {
        self.table.cols()
    }

    /// Mean of the tokens' table rows; an empty narration embeds to zeros.
    pub fn embed(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.d_text()];
        for &t in tokens {
            if t as usize >= self.vocab_size() {
                return Err(DataError::UnknownToken {
                    token: t,
                    vocab: self.vocab_size(),
                });
            }
            for (o, v) in out.iter_mut().zip(self.table.row(t as usize)) {
                *o += v;
            }
        }
        if !tokens.is_empty() {
            let n = tokens.len() as f64;
            out.iter_mut().for_each(|o| *o /= n);
        }
        Ok(out)
    }
}
