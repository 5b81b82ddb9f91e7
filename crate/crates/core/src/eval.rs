//! Cross-modal retrieval evaluation: Recall@k in both directions.

use serde::{Deserialize, Serialize};

use crate::data::PairedExample;
use crate::encoder::EncoderModel;
use crate::tape::Tape;
use crate::{Error, Result, Tensor};

/// Forward batch size used when embedding an evaluation split.
const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    I2T,
    T2I,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::I2T => "I2T",
            Direction::T2I => "T2I",
        }
    }
}

/// Recall@k values for one retrieval direction plus run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    /// `(k, recall)` pairs in ascending k.
    pub recall: Vec<(usize, f64)>,
    pub n_queries: usize,
    pub seed: u64,
    pub config_hash: String,
    pub train_fraction: f64,
}

/// Fraction of rows whose matched column ranks within the top `k` by
/// descending similarity. Ties break toward the ascending column index, so a
/// tied true column counts as ranked above later tied columns only.
pub fn recall_at_k(similarity: &Tensor, k: usize) -> Result<f64> {
    if similarity.rank() != 2 || similarity.rows() != similarity.cols() {
        return Err(Error::Dimension {
            op: "recall_at_k",
            lhs: similarity.shape().to_vec(),
            rhs: similarity.shape().to_vec(),
        });
    }
    let n = similarity.rows();
    if k < 1 || k > n {
        return Err(Error::Input(format!(
            "recall_at_k: k = {k} out of range 1..={n}"
        )));
    }
    let mut hits = 0usize;
    for i in 0..n {
        let own = similarity.at(i, i);
        // rank = 1 + columns strictly better + earlier tied columns
        let mut rank = 1usize;
        for j in 0..n {
            if j == i {
                continue;
            }
            let s = similarity.at(i, j);
            if s > own || (s == own && j < i) {
                rank += 1;
            }
        }
        if rank <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Metadata carried into the retrieval reports.
#[derive(Debug, Clone, Default)]
pub struct EvalContext {
    pub seed: u64,
    pub config_hash: String,
    pub train_fraction: f64,
}

/// Embed every image and caption of the split and report Recall@k both ways.
/// Requested `k` larger than the split is clamped for the computation and
/// reported as given (recall is 1 there by definition).
pub fn evaluate_retrieval(
    model: &EncoderModel,
    examples: &[&PairedExample],
    ks: &[usize],
    ctx: &EvalContext,
) -> Result<(RetrievalReport, RetrievalReport)> {
    if examples.is_empty() {
        return Err(Error::Input("evaluate_retrieval: empty split".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Input(format!(
            "evaluate_retrieval: invalid k list {ks:?}"
        )));
    }
    let n = examples.len();
    let z_images = embed_split(model, examples, true)?;
    let z_texts = embed_split(model, examples, false)?;
    // S[i][j] = <z_I^i, z_T^j>: I2T queries are rows. T2I uses the transpose.
    let d = model.config.proj_dim;
    let sim = Tensor::matrix(
        n,
        n,
        crate::tensor::matmul_raw(
            z_images.data(),
            crate::tensor::transpose_raw(z_texts.data(), n, d).as_slice(),
            n,
            d,
            n,
        ),
    )?;
    let sim_t = Tensor::matrix(n, n, crate::tensor::transpose_raw(sim.data(), n, n))?;

    let mut ks_sorted = ks.to_vec();
    ks_sorted.sort_unstable();
    ks_sorted.dedup();
    let report = |direction: Direction, s: &Tensor| -> Result<RetrievalReport> {
        let mut recall = Vec::with_capacity(ks_sorted.len());
        for &k in &ks_sorted {
            recall.push((k, recall_at_k(s, k.min(n))?));
        }
        Ok(RetrievalReport {
            direction,
            recall,
            n_queries: n,
            seed: ctx.seed,
            config_hash: ctx.config_hash.clone(),
            train_fraction: ctx.train_fraction,
        })
    };
    Ok((report(Direction::I2T, &sim)?, report(Direction::T2I, &sim_t)?))
}

/// Forward one modality of a split in fixed-size batches; rows align with
/// `examples`. No backward pass runs, the tapes are dropped per batch.
fn embed_split(model: &EncoderModel, examples: &[&PairedExample], images: bool) -> Result<Tensor> {
    let d = model.config.proj_dim;
    let mut data = Vec::with_capacity(examples.len() * d);
    for chunk in examples.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let z = if images {
            let batch: Vec<Tensor> = chunk.iter().map(|e| e.image.clone()).collect();
            bound.forward_images(&mut tape, &batch)?
        } else {
            let batch: Vec<&[u32]> = chunk.iter().map(|e| e.caption.as_slice()).collect();
            bound.forward_texts(&mut tape, &batch)?
        };
        data.extend_from_slice(tape.value(z).data());
    }
    Tensor::matrix(examples.len(), d, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_dominant_matrix_has_full_recall_at_one() {
        let s = Tensor::eye(4);
        assert_eq!(recall_at_k(&s, 1).unwrap(), 1.0);
    }

    #[test]
    fn recall_at_full_k_is_one() {
        let s = Tensor::matrix(3, 3, vec![0.0, 0.9, 0.8, 0.7, 0.1, 0.6, 0.5, 0.4, 0.0]).unwrap();
        assert_eq!(recall_at_k(&s, 3).unwrap(), 1.0);
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let s = Tensor::matrix(
            4,
            4,
            vec![
                0.1, 0.9, 0.0, 0.3, 0.2, 0.8, 0.7, 0.1, 0.5, 0.5, 0.5, 0.5, 0.0, 0.1, 0.2, 0.9,
            ],
        )
        .unwrap();
        let mut prev = 0.0;
        for k in 1..=4 {
            let r = recall_at_k(&s, k).unwrap();
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn hand_ranked_three_by_three() {
        // rows: query similarities; diagonal ranks are 1, 2, 1
        let s = Tensor::matrix(3, 3, vec![0.9, 0.1, 0.0, 0.8, 0.2, 0.1, 0.0, 0.1, 0.9]).unwrap();
        assert!((recall_at_k(&s, 1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(recall_at_k(&s, 2).unwrap(), 1.0);
    }

    #[test]
    fn ties_break_by_ascending_column() {
        // row 0: all equal; true column 0 wins the tie.
        // row 1: all equal; column 0 precedes true column 1, rank 2.
        let s = Tensor::matrix(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(recall_at_k(&s, 1).unwrap(), 0.5);
        assert_eq!(recall_at_k(&s, 2).unwrap(), 1.0);
    }

    #[test]
    fn out_of_range_k_is_input_error() {
        let s = Tensor::eye(3);
        assert!(recall_at_k(&s, 0).is_err());
        assert!(recall_at_k(&s, 4).is_err());
    }

    #[test]
    fn non_square_matrix_is_dimension_error() {
        let s = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(recall_at_k(&s, 1), Err(Error::Dimension { .. })));
    }
}
