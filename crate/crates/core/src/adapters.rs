//! Image-prompt adapters: the frozen face encoder, the trainable token
//! projector and the per-layer image key/value projections.

use rand::Rng;

use crate::backbone::{Backbone, KeyValue};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::image::{single_image_dims, BBox, ImageTensor, RegionMask};
use crate::nn::{init_linear, linear, Binder, ParamStore};
use crate::tensor::{Real, Tensor};

/// Side of the square grid the face crop is averaged down to.
pub const FACE_GRID: usize = 4;
pub const FACE_DIM: usize = FACE_GRID * FACE_GRID * 3;

/// Area-averaged `4×4×3` summary of a face crop, in (row, column, channel)
/// order.
pub type FaceEmbedding = [f32; FACE_DIM];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AdapterRole {
    /// Identity-enhancing: full-strength injection, trained on the face region.
    Iea,
    /// Textual-consistency: softened injection, trained off the face region.
    Tca,
}

impl AdapterRole {
    pub const ALL: [AdapterRole; 2] = [AdapterRole::Iea, AdapterRole::Tca];

    pub fn prefix(self) -> &'static str {
        match self {
            AdapterRole::Iea => "iea",
            AdapterRole::Tca => "tca",
        }
    }

    pub fn default_alpha(self) -> f64 {
        match self {
            AdapterRole::Iea => 1.0,
            AdapterRole::Tca => 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    pub n_tokens: usize,
    pub hidden: usize,
    /// Must equal the backbone's text embedding width.
    pub token_dim: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            n_tokens: 4,
            hidden: 128,
            token_dim: 64,
        }
    }
}

fn encode_weighted(
    image: &ImageTensor,
    bbox: BBox,
    weight: impl Fn(usize, usize) -> f64,
) -> Result<FaceEmbedding> {
    let (h, w) = single_image_dims(image)?;
    bbox.check_within(w, h)?;
    let data = image.data();
    let plane = h * w;
    let cell_w = bbox.width() as f64 / FACE_GRID as f64;
    let cell_h = bbox.height() as f64 / FACE_GRID as f64;
    let overlap = |lo: f64, hi: f64, p: usize| (hi.min(p as f64 + 1.0) - lo.max(p as f64)).max(0.0);
    let mut out = [0f32; FACE_DIM];
    for gy in 0..FACE_GRID {
        let ylo = bbox.y0 as f64 + gy as f64 * cell_h;
        let yhi = ylo + cell_h;
        for gx in 0..FACE_GRID {
            let xlo = bbox.x0 as f64 + gx as f64 * cell_w;
            let xhi = xlo + cell_w;
            let mut acc = [0f64; 3];
            let mut total = 0.0;
            for y in (ylo.floor() as usize)..(yhi.ceil() as usize).min(h) {
                let wy = overlap(ylo, yhi, y);
                for x in (xlo.floor() as usize)..(xhi.ceil() as usize).min(w) {
                    let wt = wy * overlap(xlo, xhi, x) * weight(y, x);
                    if wt == 0.0 {
                        continue;
                    }
                    total += wt;
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += wt * data[c * plane + y * w + x] as f64;
                    }
                }
            }
            if total > 0.0 {
                for c in 0..3 {
                    out[(gy * FACE_GRID + gx) * 3 + c] = (acc[c] / total) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Crop `bbox` and area-average it down to a `4×4` RGB grid. Pixels
/// partially covered by a grid cell contribute in proportion to the overlap.
pub fn encode_face(image: &ImageTensor, bbox: BBox) -> Result<FaceEmbedding> {
    encode_weighted(image, bbox, |_, _| 1.0)
}

/// [`encode_face`] over the mask's bounding box, weighting pixels by the
/// mask so background corners of the box are ignored. Cells with no mask
/// coverage encode as zero.
pub fn encode_face_masked(image: &ImageTensor, mask: &RegionMask) -> Result<FaceEmbedding> {
    let (h, w) = single_image_dims(image)?;
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Structural(format!(
            "mask {}x{} for image {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    let bbox = mask
        .bbox()
        .ok_or_else(|| Error::Parameter("mask has no face pixels".into()))?;
    encode_weighted(image, bbox, |y, x| mask.get(y, x) as f64)
}

/// Embedding of the horizontally mirrored crop.
pub fn flip_embedding(e: &FaceEmbedding) -> FaceEmbedding {
    let mut out = [0f32; FACE_DIM];
    for gy in 0..FACE_GRID {
        for gx in 0..FACE_GRID {
            let src = (gy * FACE_GRID + (FACE_GRID - 1 - gx)) * 3;
            let dst = (gy * FACE_GRID + gx) * 3;
            out[dst..dst + 3].copy_from_slice(&e[src..src + 3]);
        }
    }
    out
}

/// Fresh projector weights plus per-layer image key/value projections.
/// Keys start as copies of the base text keys of the same layer; values
/// start at zero, so a new adapter leaves the base prediction unchanged.
pub fn init_adapter<S: Real, R: Rng>(
    backbone: &Backbone,
    cfg: &AdapterConfig,
    role: AdapterRole,
    base: &ParamStore<S>,
    rng: &mut R,
) -> Result<ParamStore<S>> {
    init_adapter_named(backbone, cfg, role.prefix(), base, rng)
}

pub(crate) fn init_adapter_named<S: Real, R: Rng>(
    backbone: &Backbone,
    cfg: &AdapterConfig,
    prefix: &str,
    base: &ParamStore<S>,
    rng: &mut R,
) -> Result<ParamStore<S>> {
    if cfg.token_dim != backbone.config().text_dim {
        return Err(Error::Parameter(format!(
            "adapter token width {} differs from text width {}",
            cfg.token_dim,
            backbone.config().text_dim
        )));
    }
    let mut p = ParamStore::new();
    init_linear(&mut p, rng, &format!("{prefix}.proj.l1"), FACE_DIM, cfg.hidden, true);
    init_linear(
        &mut p,
        rng,
        &format!("{prefix}.proj.l2"),
        cfg.hidden,
        cfg.n_tokens * cfg.token_dim,
        true,
    );
    for layer in backbone.config().attention_layers() {
        let k = base.get(&format!("base.{layer}.attn.k.w"))?;
        p.insert(format!("{prefix}.{layer}.k.w"), (**k).clone());
        p.insert(format!("{prefix}.{layer}.v.w"), Tensor::zeros(k.shape().to_vec()));
    }
    Ok(p)
}

/// Two-layer MLP from face embeddings `[B, 48]` to tokens `[B, n, d]`.
pub fn project_embedding<'g, S: Real>(
    b: &Binder<'g, S>,
    face: &Var<'g, S>,
    prefix: &str,
    n_tokens: usize,
    token_dim: usize,
) -> Result<Var<'g, S>> {
    let shape = face.shape();
    if shape.len() != 2 || shape[1] != FACE_DIM {
        return Err(Error::Structural(format!("face embeddings of shape {shape:?}")));
    }
    let h = linear(b, face, &format!("{prefix}.proj.l1"))?.relu();
    let out = linear(b, &h, &format!("{prefix}.proj.l2"))?;
    if out.shape()[1] != n_tokens * token_dim {
        return Err(Error::Structural(format!(
            "projector emits {} values, expected {n_tokens}x{token_dim}",
            out.shape()[1]
        )));
    }
    out.reshape([shape[0], n_tokens, token_dim])
}

/// Image keys and values of one attention layer.
pub fn adapter_kv<'g, S: Real>(
    b: &Binder<'g, S>,
    tokens: &Var<'g, S>,
    prefix: &str,
    layer: &str,
) -> Result<KeyValue<'g, S>> {
    Ok(KeyValue {
        keys: linear(b, tokens, &format!("{prefix}.{layer}.k"))?,
        values: linear(b, tokens, &format!("{prefix}.{layer}.v"))?,
    })
}

/// Stack embeddings into a `[B, 48]` tensor.
pub fn stack_embeddings<S: Real>(faces: &[FaceEmbedding]) -> crate::tensor::Tensor<S> {
    crate::tensor::Tensor::from_fn([faces.len(), FACE_DIM], |i| {
        S::lit(faces[i / FACE_DIM][i % FACE_DIM] as f64)
    })
}
