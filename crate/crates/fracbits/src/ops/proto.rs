//! Prototypical episode loss: class prototypes are support means, query
//! logits are negative squared Euclidean distances to each prototype, and the
//! loss is the softmax cross-entropy of the queries.
//!
//! Embedding rows are episode-ordered: the K*N support rows first (way-major:
//! way 0's K shots, then way 1's, ...), then the Q*N query rows in the same
//! way-major order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EpisodeShape {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
}

impl EpisodeShape {
    pub fn rows(&self) -> usize {
        self.n_way * (self.k_shot + self.n_query)
    }

    pub fn support_rows(&self) -> usize {
        self.n_way * self.k_shot
    }
}

fn check(embeddings: &Tensor, ep: EpisodeShape) -> Result<usize> {
    let s = embeddings.shape();
    if s.len() != 2 || s[0] != ep.rows() {
        return Err(Error::MisalignedEpisode {
            expected: ep.rows(),
            got: s.first().copied().unwrap_or(0),
        });
    }
    Ok(s[1])
}

/// Class prototypes: mean of each way's support embeddings, [n_way, D].
pub fn prototypes(embeddings: &Tensor, ep: EpisodeShape) -> Result<Tensor> {
    let d = check(embeddings, ep)?;
    let mut protos = Tensor::zeros(&[ep.n_way, d]);
    for way in 0..ep.n_way {
        for shot in 0..ep.k_shot {
            let row = &embeddings.data()[(way * ep.k_shot + shot) * d..][..d];
            for (p, &v) in protos.data_mut()[way * d..(way + 1) * d].iter_mut().zip(row) {
                *p += v;
            }
        }
    }
    for p in protos.data_mut() {
        *p /= ep.k_shot as f64;
    }
    Ok(protos)
}

/// Query logits: -||e_q - proto_c||^2, [n_way*n_query, n_way].
/// Query row q belongs to way q / n_query.
pub fn query_logits(embeddings: &Tensor, protos: &Tensor, ep: EpisodeShape) -> Result<Tensor> {
    let d = check(embeddings, ep)?;
    let nq = ep.n_way * ep.n_query;
    let base = ep.support_rows();
    let mut logits = Tensor::zeros(&[nq, ep.n_way]);
    for q in 0..nq {
        let e = &embeddings.data()[(base + q) * d..][..d];
        for c in 0..ep.n_way {
            let p = &protos.data()[c * d..(c + 1) * d];
            let dist: f64 = e.iter().zip(p).map(|(&a, &b)| (a - b) * (a - b)).sum();
            logits.data_mut()[q * ep.n_way + c] = -dist;
        }
    }
    Ok(logits)
}

/// Mean query cross-entropy and query accuracy for the episode.
pub fn prototypical_loss(embeddings: &Tensor, ep: EpisodeShape) -> Result<(Tensor, f64)> {
    let protos = prototypes(embeddings, ep)?;
    let logits = query_logits(embeddings, &protos, ep)?;
    let labels: Vec<usize> = (0..ep.n_way * ep.n_query)
        .map(|q| q / ep.n_query)
        .collect();
    let loss = super::loss::softmax_cross_entropy(&logits, &labels)?;
    let mut correct = 0usize;
    for (q, &label) in labels.iter().enumerate() {
        let row = &logits.data()[q * ep.n_way..(q + 1) * ep.n_way];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if argmax == label {
            correct += 1;
        }
    }
    Ok((loss, correct as f64 / labels.len() as f64))
}

/// Gradient of the episode loss w.r.t. all embedding rows.
pub fn prototypical_loss_backward(
    embeddings: &Tensor,
    ep: EpisodeShape,
    upstream: f64,
) -> Result<Tensor> {
    let d = check(embeddings, ep)?;
    let protos = prototypes(embeddings, ep)?;
    let logits = query_logits(embeddings, &protos, ep)?;
    let labels: Vec<usize> = (0..ep.n_way * ep.n_query)
        .map(|q| q / ep.n_query)
        .collect();
    let g_logits = super::loss::softmax_cross_entropy_backward(&logits, &labels, upstream)?;

    let base = ep.support_rows();
    let mut grad = Tensor::zeros(embeddings.shape());
    let mut g_protos = vec![0.0f64; ep.n_way * d];
    for q in 0..ep.n_way * ep.n_query {
        let e = &embeddings.data()[(base + q) * d..][..d];
        for c in 0..ep.n_way {
            let gl = g_logits.data()[q * ep.n_way + c];
            if gl == 0.0 {
                continue;
            }
            let p = &protos.data()[c * d..(c + 1) * d];
            // d(-||e-p||^2)/de = -2(e-p); d/dp = 2(e-p)
            for i in 0..d {
                let diff = e[i] - p[i];
                grad.data_mut()[(base + q) * d + i] += gl * (-2.0) * diff;
                g_protos[c * d + i] += gl * 2.0 * diff;
            }
        }
    }
    // Prototype gradient spreads evenly over that way's support rows.
    for way in 0..ep.n_way {
        for shot in 0..ep.k_shot {
            let row = (way * ep.k_shot + shot) * d;
            for i in 0..d {
                grad.data_mut()[row + i] += g_protos[way * d + i] / ep.k_shot as f64;
            }
        }
    }
    Ok(grad)
}
