//! Latent action space for caption steering.
//!
//! A codec maps embeddings into a `d`-dimensional code and back. Steering adds
//! a bounded action to the code before decoding: `e' = Dec(Enc(e) + s·u)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::CaptionEmbedding;
use crate::error::{check_finite, check_len, Error, Result};
use crate::vecops::{dot, mat_vec, norm};

pub const CODEC_FORMAT: &str = "reachsteer-codec";
pub const CODEC_VERSION: u32 = 1;

pub trait ActionCodec {
    fn embed_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn encode(&self, e: &[f64]) -> Result<Vec<f64>>;
    fn decode(&self, z: &[f64]) -> Result<Vec<f64>>;
    fn action_scale(&self) -> f64;

    fn steer(&self, e: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_len("action", self.action_dim(), u.len())?;
        check_finite("action", u)?;
        let s = self.action_scale();
        let z: Vec<f64> = self
            .encode(e)?
            .iter()
            .zip(u)
            .map(|(zi, ui)| zi + s * ui)
            .collect();
        self.decode(&z)
    }
}

/// Linear codec: `Enc(e) = E·e`, `Dec(z) = D·z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecParams {
    /// `d` rows of length `n_e`.
    pub encoder: Vec<Vec<f64>>,
    /// `n_e` rows of length `d`.
    pub decoder: Vec<Vec<f64>>,
    pub action_scale: f64,
}

#[derive(Serialize, Deserialize)]
struct CodecFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    params: CodecParams,
}

impl CodecParams {
    pub fn validate(&self) -> Result<()> {
        let d = self.encoder.len();
        if d == 0 {
            return Err(Error::Config("codec has an empty encoder".into()));
        }
        let n_e = self.encoder[0].len();
        for row in &self.encoder {
            check_len("encoder columns", n_e, row.len())?;
            check_finite("encoder", row)?;
        }
        check_len("decoder rows", n_e, self.decoder.len())?;
        for row in &self.decoder {
            check_len("decoder columns", d, row.len())?;
            check_finite("decoder", row)?;
        }
        if !(self.action_scale > 0.0 && self.action_scale.is_finite()) {
            return Err(Error::Config("action_scale must be positive".into()));
        }
        Ok(())
    }

    /// Cosine similarity between each caption and its round trip.
    pub fn reconstruction_cosines(&self, captions: &[CaptionEmbedding]) -> Result<Vec<f64>> {
        captions
            .iter()
            .map(|c| {
                let r = self.decode(&self.encode(&c.e)?)?;
                let denom = norm(&r) * norm(&c.e);
                Ok(if denom > 0.0 { dot(&r, &c.e) / denom } else { 0.0 })
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&CodecFile {
            format: CODEC_FORMAT.into(),
            version: CODEC_VERSION,
            params: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CodecFile = serde_json::from_str(text)?;
        if file.format != CODEC_FORMAT || file.version != CODEC_VERSION {
            return Err(Error::Checkpoint(format!(
                "expected {CODEC_FORMAT} v{CODEC_VERSION}, found {} v{}",
                file.format, file.version
            )));
        }
        file.params.validate()?;
        Ok(file.params)
    }
}

impl ActionCodec for CodecParams {
    fn embed_dim(&self) -> usize {
        self.decoder.len()
    }

    fn action_dim(&self) -> usize {
        self.encoder.len()
    }

    fn action_scale(&self) -> f64 {
        self.action_scale
    }

    fn encode(&self, e: &[f64]) -> Result<Vec<f64>> {
        check_len("embedding", self.embed_dim(), e.len())?;
        check_finite("embedding", e)?;
        Ok(mat_vec(&self.encoder, e))
    }

    fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len("code", self.action_dim(), z.len())?;
        check_finite("code", z)?;
        Ok(mat_vec(&self.decoder, z))
    }
}

/// Fits an orthogonal principal-subspace codec to a caption set.
///
/// The subspace is the span of the top `d` right singular vectors of the
/// (uncentered) caption matrix; encoding projects onto it and decoding is the
/// pseudo-inverse, i.e. the transpose. Each basis vector is signed so that its
/// largest-magnitude entry is positive, which makes the fit reproducible.
pub fn fit_codec(captions: &[CaptionEmbedding], d: usize, action_scale: f64) -> Result<CodecParams> {
    if d == 0 {
        return Err(Error::Config("codec dimension must be positive".into()));
    }
    if captions.len() < d {
        return Err(Error::RankDeficient(format!(
            "{} captions cannot span a {d}-dimensional code",
            captions.len()
        )));
    }
    let n_e = captions[0].e.len();
    if d > n_e {
        return Err(Error::Config(format!(
            "codec dimension {d} exceeds embedding dimension {n_e}"
        )));
    }
    for c in captions {
        check_len("caption embedding", n_e, c.e.len())?;
        check_finite("caption embedding", &c.e)?;
    }
    let data = DMatrix::from_fn(captions.len(), n_e, |i, j| captions[i].e[j]);
    // Work with the n_e × n_e Gram matrix so the SVD is cheap and always
    // provides a full set of right singular vectors.
    let gram = data.transpose() * &data;
    let svd = gram.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::RankDeficient("singular value decomposition failed".into()))?;
    let mut order: Vec<usize> = (0..n_e).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let top = svd.singular_values[order[0]];
    let kth = svd.singular_values[order[d - 1]];
    if !(top > 0.0) || kth <= top * 1e-18 {
        // Singular values of the Gram matrix are squared, hence the tight ratio.
        return Err(Error::RankDeficient(format!(
            "caption set spans fewer than {d} independent directions \
             (singular values {:?})",
            order
                .iter()
                .map(|&i| svd.singular_values[i].sqrt())
                .collect::<Vec<_>>()
        )));
    }

    let mut encoder = Vec::with_capacity(d);
    for &k in order.iter().take(d) {
        let mut row: Vec<f64> = (0..n_e).map(|j| v_t[(k, j)]).collect();
        let pivot = row
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(0.0);
        if pivot < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        encoder.push(row);
    }
    let decoder = (0..n_e)
        .map(|j| encoder.iter().map(|row| row[j]).collect())
        .collect();
    let params = CodecParams {
        encoder,
        decoder,
        action_scale,
    };
    params.validate()?;
    Ok(params)
}
