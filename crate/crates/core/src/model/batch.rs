use super::tensor::{log_sum_exp, Mat};
use crate::corpus::{special, Vocab};
use crate::error::{Error, Result};
use crate::prompt::PromptedExample;

/// A prompted example mapped to vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub id: usize,
    pub input: Vec<u32>,
    pub output: Vec<u32>,
    pub mask: Vec<u8>,
}

impl EncodedExample {
    pub fn from_prompted(ex: &PromptedExample, vocab: &Vocab) -> Self {
        EncodedExample {
            id: ex.id,
            input: vocab.encode(&ex.input_tokens),
            output: vocab.encode(&ex.output_tokens),
            mask: ex.loss_mask.clone(),
        }
    }

    /// Decoder input: `<bos>` followed by the output shifted right, so that
    /// position `j` predicts output token `j` from the tokens before it.
    pub fn decoder_input(&self) -> Vec<u32> {
        shift_right(&self.output)
    }
}

pub fn shift_right(output: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(output.len());
    v.push(special::BOS_ID);
    v.extend_from_slice(&output[..output.len().saturating_sub(1)]);
    v
}

/// Padded id matrices with validity masks, plus the loss mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub input_ids: Vec<Vec<u32>>,
    pub input_valid: Vec<Vec<bool>>,
    pub output_ids: Vec<Vec<u32>>,
    pub output_valid: Vec<Vec<bool>>,
    pub loss_mask: Vec<Vec<u8>>,
}

impl Batch {
    pub fn new(examples: &[EncodedExample]) -> Result<Self> {
        let in_len = examples.iter().map(|e| e.input.len()).max().unwrap_or(0);
        let out_len = examples.iter().map(|e| e.output.len()).max().unwrap_or(0);
        let mut b = Batch {
            ids: Vec::with_capacity(examples.len()),
            input_ids: Vec::with_capacity(examples.len()),
            input_valid: Vec::with_capacity(examples.len()),
            output_ids: Vec::with_capacity(examples.len()),
            output_valid: Vec::with_capacity(examples.len()),
            loss_mask: Vec::with_capacity(examples.len()),
        };
        for e in examples {
            if e.mask.len() != e.output.len() {
                return Err(Error::Shape(format!(
                    "example {}: mask has {} entries for {} output tokens",
                    e.id,
                    e.mask.len(),
                    e.output.len()
                )));
            }
            if e.input.is_empty() || e.output.is_empty() {
                return Err(Error::Shape(format!("example {}: empty sequence", e.id)));
            }
            b.ids.push(e.id);
            b.input_ids.push(pad(&e.input, in_len, special::PAD_ID));
            b.input_valid.push(validity(e.input.len(), in_len));
            b.output_ids.push(pad(&e.output, out_len, special::PAD_ID));
            b.output_valid.push(validity(e.output.len(), out_len));
            b.loss_mask.push(pad(&e.mask, out_len, 0));
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn input_len(&self, row: usize) -> usize {
        self.input_valid[row].iter().filter(|v| **v).count()
    }

    pub fn output_len(&self, row: usize) -> usize {
        self.output_valid[row].iter().filter(|v| **v).count()
    }

    /// Unpadded `(input, output, mask)` of one row.
    pub fn row(&self, row: usize) -> (&[u32], &[u32], &[u8]) {
        let n = self.input_len(row);
        let m = self.output_len(row);
        (
            &self.input_ids[row][..n],
            &self.output_ids[row][..m],
            &self.loss_mask[row][..m],
        )
    }
}

fn pad<T: Copy>(v: &[T], len: usize, fill: T) -> Vec<T> {
    let mut out = v.to_vec();
    out.resize(len, fill);
    out
}

fn validity(n: usize, len: usize) -> Vec<bool> {
    (0..len).map(|i| i < n).collect()
}

/// Masked negative log-likelihood of one example and its derivative with
/// respect to the logits.
pub fn example_nll(logits: &Mat, targets: &[u32], mask: &[u8]) -> Result<(f64, Mat)> {
    if logits.rows != targets.len() || mask.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.rows,
            targets.len(),
            mask.len()
        )));
    }
    if mask.iter().all(|&m| m == 0) {
        return Err(Error::invalid("loss mask selects no target tokens"));
    }
    let mut total = 0.0;
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    for (j, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m == 0 {
            continue;
        }
        let row = logits.row(j);
        let lse = log_sum_exp(row);
        total += lse - row[t as usize];
        let g = grad.row_mut(j);
        for (o, v) in g.iter_mut().zip(row) {
            *o = (v - lse).exp();
        }
        g[t as usize] -= 1.0;
    }
    Ok((total, grad))
}

/// Mean over examples of the masked NLL sum.
pub fn loss(logits: &[Mat], batch: &Batch) -> Result<f64> {
    if logits.len() != batch.len() {
        return Err(Error::Shape(format!(
            "{} logit matrices for {} examples",
            logits.len(),
            batch.len()
        )));
    }
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut sum = 0.0;
    for (i, l) in logits.iter().enumerate() {
        let (_, output, mask) = batch.row(i);
        sum += example_nll(l, output, mask)
            .map_err(|e| Error::Record {
                id: batch.ids[i],
                message: e.to_string(),
            })?
            .0;
    }
    Ok(sum / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: usize, input: Vec<u32>, output: Vec<u32>, mask: Vec<u8>) -> EncodedExample {
        EncodedExample {
            id,
            input,
            output,
            mask,
        }
    }

    #[test]
    fn batch_pads_and_masks() {
        let b = Batch::new(&[
            ex(0, vec![7, 9], vec![8, 10, 3], vec![0, 1, 1]),
            ex(1, vec![7, 9, 11, 12], vec![8, 3], vec![0, 1]),
        ])
        .unwrap();
        assert_eq!(b.input_ids[0], vec![7, 9, 0, 0]);
        assert_eq!(b.output_valid[1], vec![true, true, false]);
        assert_eq!(b.loss_mask[1], vec![0, 1, 0]);
        for r in 0..2 {
            for (m, v) in b.loss_mask[r].iter().zip(&b.output_valid[r]) {
                assert!(*m == 0 || *v);
            }
        }
        let (i, o, m) = b.row(1);
        assert_eq!((i, o, m), (&[7, 9, 11, 12][..], &[8, 3][..], &[0, 1][..]));
        assert!(Batch::new(&[ex(0, vec![1], vec![1, 2], vec![1])]).is_err());
    }

    #[test]
    fn shift_right_prepends_bos() {
        assert_eq!(shift_right(&[8, 10, 3]), vec![special::BOS_ID, 8, 10]);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Mat::zeros(1, 4);
        let (l, _) = example_nll(&logits, &[2], &[1]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!((l - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn all_zero_mask_is_an_error() {
        let logits = Mat::zeros(2, 4);
        assert!(example_nll(&logits, &[1, 2], &[0, 0]).is_err());
    }
}
