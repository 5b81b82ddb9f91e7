//! Symmetric contrastive objective with learnable temperature.
//!
//! For a batch of N matched pairs with unit-norm embeddings `z_I`, `z_T` the
//! loss averages, over pairs, the image-to-text and text-to-image log
//! softmax terms of the similarity matrix scaled by `1/tau`. It is zero
//! exactly when each direction puts probability one on its matched pair.

use crate::tape::{NodeId, Tape};
use crate::{Error, Result, Tensor};

/// Row-norm slack accepted by the unit-norm precondition.
pub const UNIT_NORM_TOL: f32 = 1e-6;

/// Matched batch of unit-norm embeddings; row `i` of `z_images` pairs with
/// row `i` of `z_texts`.
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    z_images: Tensor,
    z_texts: Tensor,
}

impl BatchEmbeddings {
    pub fn new(z_images: Tensor, z_texts: Tensor) -> Result<Self> {
        if z_images.rank() != 2 || z_texts.rank() != 2 || z_images.shape() != z_texts.shape() {
            return Err(Error::Dimension {
                op: "BatchEmbeddings",
                lhs: z_images.shape().to_vec(),
                rhs: z_texts.shape().to_vec(),
            });
        }
        for (name, z) in [("z_images", &z_images), ("z_texts", &z_texts)] {
            check_unit_rows(name, z)?;
        }
        Ok(Self { z_images, z_texts })
    }

    pub fn len(&self) -> usize {
        self.z_images.rows()
    }

    pub fn z_images(&self) -> &Tensor {
        &self.z_images
    }

    pub fn z_texts(&self) -> &Tensor {
        &self.z_texts
    }
}

fn check_unit_rows(name: &str, z: &Tensor) -> Result<()> {
    let (rows, cols) = (z.rows(), z.cols());
    for r in 0..rows {
        let norm: f32 = (0..cols)
            .map(|c| z.at(r, c) * z.at(r, c))
            .sum::<f32>()
            .sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Domain {
                op: "contrastive_loss",
                msg: format!("{name} row {r} has norm {norm}, expected unit norm"),
            });
        }
    }
    Ok(())
}

/// Cosine-similarity matrix `S[i][j] = <z_I^i, z_T^j>` on the tape. Rows of
/// both inputs must be unit-norm, so this is the plain dot-product matrix.
pub fn similarity_matrix(tape: &mut Tape, z_images: NodeId, z_texts: NodeId) -> Result<NodeId> {
    let (zi, zt) = (tape.value(z_images), tape.value(z_texts));
    if zi.rank() != 2 || zt.rank() != 2 || zi.cols() != zt.cols() {
        return Err(Error::Dimension {
            op: "similarity_matrix",
            lhs: zi.shape().to_vec(),
            rhs: zt.shape().to_vec(),
        });
    }
    check_unit_rows("z_images", zi)?;
    check_unit_rows("z_texts", zt)?;
    let zt_t = tape.transpose(z_texts)?;
    tape.matmul(z_images, zt_t)
}

/// Build the symmetric contrastive loss on the tape. `log_tau` is a scalar
/// node; the temperature is `exp(log_tau)` so positivity is structural.
pub fn contrastive_loss_graph(
    tape: &mut Tape,
    z_images: NodeId,
    z_texts: NodeId,
    log_tau: NodeId,
) -> Result<NodeId> {
    let zi = tape.value(z_images);
    if zi.rows() != tape.value(z_texts).rows() {
        return Err(Error::Dimension {
            op: "contrastive_loss",
            lhs: zi.shape().to_vec(),
            rhs: tape.value(z_texts).shape().to_vec(),
        });
    }
    let n = zi.rows();
    let sim = similarity_matrix(tape, z_images, z_texts)?;
    let neg_log_tau = tape.scale(log_tau, -1.0);
    let inv_tau = tape.exp(neg_log_tau);
    let scaled = tape.scale_by(sim, inv_tau)?;
    let scaled_t = tape.transpose(scaled)?;
    let eye = tape.input(Tensor::eye(n));

    let lsm_i2t = tape.log_softmax(scaled)?;
    let lsm_t2i = tape.log_softmax(scaled_t)?;
    let diag_i2t = tape.mul(lsm_i2t, eye)?;
    let diag_t2i = tape.mul(lsm_t2i, eye)?;
    let sum_i2t = tape.sum(diag_i2t);
    let sum_t2i = tape.sum(diag_t2i);
    let total = tape.add(sum_i2t, sum_t2i)?;
    Ok(tape.scale(total, -1.0 / n as f32))
}

/// Evaluate the loss for a fixed batch and temperature, without gradients.
pub fn contrastive_loss(batch: &BatchEmbeddings, tau: f32) -> Result<f32> {
    if !(tau > 0.0) {
        return Err(Error::Domain {
            op: "contrastive_loss",
            msg: format!("temperature must be positive, got {tau}"),
        });
    }
    let mut tape = Tape::new();
    let zi = tape.input(batch.z_images().clone());
    let zt = tape.input(batch.z_texts().clone());
    let log_tau = tape.input(Tensor::scalar(tau.ln()));
    let loss = contrastive_loss_graph(&mut tape, zi, zt, log_tau)?;
    Ok(tape.value(loss).item())
}
