//! Two-pathway inference and fine-grained feature-level blending.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::{project_embedding, AdapterConfig};
use crate::backbone::{AttnRecord, Backbone, Conditioning, ImagePrompt, Taps};
use crate::error::{shape_err, Error, Result};
use crate::graph::Var;
use crate::image::RegionMask;
use crate::losses::fuse_noise;
use crate::nn::Binder;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Block features are blended at every tap.
    #[default]
    Blended,
    /// Two isolated forwards merged in noise space only.
    Independent,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Blended => "blended",
            FusionMode::Independent => "independent",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blended" => Ok(FusionMode::Blended),
            "independent" => Ok(FusionMode::Independent),
            _ => Err(Error::Parameter(format!("unknown fusion mode `{s}`"))),
        }
    }
}

/// One pathway: which adapter weights to inject and how strongly.
#[derive(Clone, Debug, PartialEq)]
pub struct PathwaySpec {
    /// Parameter prefix of the adapter.
    pub adapter: String,
    pub alpha: f64,
}

impl PathwaySpec {
    pub fn new(adapter: impl Into<String>, alpha: f64) -> Self {
        Self {
            adapter: adapter.into(),
            alpha,
        }
    }
}

/// Resample a `[B, 1, H, W]` mask to `size × size`: area averaging when
/// shrinking, nearest neighbour when growing.
pub fn resample_mask<S: Real>(mask: &Tensor<S>, size: (usize, usize)) -> Result<Tensor<S>> {
    let (b, c, h, w) = mask.dims4()?;
    let (oh, ow) = size;
    if c != 1 || oh == 0 || ow == 0 {
        return Err(shape_err("mask pyramid", mask.shape(), &[b, 1, oh, ow]));
    }
    let axis = |src: usize, dst: usize| -> Result<(bool, usize)> {
        if dst <= src && src.is_multiple_of(dst) {
            Ok((true, src / dst))
        } else if dst > src && dst.is_multiple_of(src) {
            Ok((false, dst / src))
        } else {
            Err(Error::Parameter(format!(
                "mask size {src} and level size {dst} do not divide each other"
            )))
        }
    };
    let (down_y, fy) = axis(h, oh)?;
    let (down_x, fx) = axis(w, ow)?;
    let d = mask.data();
    let mut out = Vec::with_capacity(b * oh * ow);
    for n in 0..b {
        let plane = &d[n * h * w..(n + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let ys = if down_y { y * fy..(y + 1) * fy } else { y / fy..y / fy + 1 };
                let xs = if down_x { x * fx..(x + 1) * fx } else { x / fx..x / fx + 1 };
                let count = S::lit((ys.len() * xs.len()) as f64);
                let mut acc = S::zero();
                for yy in ys {
                    for xx in xs.clone() {
                        acc += plane[yy * w + xx];
                    }
                }
                out.push(acc / count);
            }
        }
    }
    Tensor::new([b, 1, oh, ow], out)
}

/// Masks resampled to each requested resolution, keyed by `(h, w)`.
pub type MaskPyramid = BTreeMap<(usize, usize), RegionMask>;

pub fn build_mask_pyramid(m: &RegionMask, resolutions: &[(usize, usize)]) -> Result<MaskPyramid> {
    let t: Tensor<f64> = m.to_tensor();
    resolutions
        .iter()
        .map(|&(h, w)| {
            let r = resample_mask(&t, (h, w))?;
            let data = r.data().iter().map(|&v| v as f32).collect();
            Ok(((h, w), RegionMask::new(h, w, data)?))
        })
        .collect()
}

/// `m ⊙ f_iea + (1 − m) ⊙ f_tca` with the mask broadcast over channels.
pub fn blend_features<'g, S: Real>(
    f_iea: &Var<'g, S>,
    f_tca: &Var<'g, S>,
    mask_level: &Var<'g, S>,
) -> Result<Var<'g, S>> {
    let (fs, ms) = (f_iea.shape(), mask_level.shape());
    if fs.len() != 4 || ms.len() != 4 || ms[1] != 1 || fs[2..] != ms[2..] {
        return Err(shape_err("blend_features", &fs, &ms));
    }
    f_iea.blend(f_tca, mask_level)
}

pub struct DualPathOutput<'g, S: Real> {
    pub eps_a: Var<'g, S>,
    pub eps_b: Var<'g, S>,
    pub eps_fused: Var<'g, S>,
    pub attention_a: Vec<AttnRecord>,
    pub attention_b: Vec<AttnRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct DualPathOptions {
    pub mode: FusionMode,
    /// Let each pathway keep its own decoder stream and blend only the
    /// features entering the output head.
    pub private_streams: bool,
    pub taps: Taps,
}

/// Run pathway A (face side of the mask) and pathway B (text side) through
/// the shared backbone and merge them under `mask` (`[B | 1, 1, H, W]`).
///
/// In blended mode both pathways consume the same fused feature after every
/// tap, so a single decoder stream reaches the head and `eps_a`, `eps_b` and
/// `eps_fused` coincide.
#[allow(clippy::too_many_arguments)]
pub fn dual_path_forward<'g, S: Real>(
    backbone: &Backbone,
    b: &Binder<'g, S>,
    adapter_cfg: &AdapterConfig,
    x_t: &Var<'g, S>,
    t: &[usize],
    text: &Var<'g, S>,
    face: &Var<'g, S>,
    path_a: &PathwaySpec,
    path_b: &PathwaySpec,
    mask: &Var<'g, S>,
    opts: DualPathOptions,
) -> Result<DualPathOutput<'g, S>> {
    let tokens = |p: &PathwaySpec| {
        project_embedding(b, face, &p.adapter, adapter_cfg.n_tokens, adapter_cfg.token_dim)
    };
    let tok_a = tokens(path_a)?;
    let tok_b = if path_b.adapter == path_a.adapter {
        tok_a
    } else {
        tokens(path_b)?
    };
    let cond_a = Conditioning {
        text: *text,
        image: Some(ImagePrompt {
            tokens: tok_a,
            adapter: &path_a.adapter,
            alpha: path_a.alpha,
        }),
    };
    let cond_b = Conditioning {
        text: *text,
        image: Some(ImagePrompt {
            tokens: tok_b,
            adapter: &path_b.adapter,
            alpha: path_b.alpha,
        }),
    };
    let full = mask.value();
    let (_, _, mh, mw) = full.dims4()?;
    let xs = x_t.shape();
    if xs.len() != 4 || (mh, mw) != (xs[2], xs[3]) {
        return Err(shape_err("dual path mask", full.shape(), &xs));
    }
    match opts.mode {
        FusionMode::Independent => {
            let oa = backbone.forward(b, x_t, t, cond_a, opts.taps)?;
            let ob = backbone.forward(b, x_t, t, cond_b, opts.taps)?;
            let eps_fused = fuse_noise(&oa.eps, &ob.eps, mask)?;
            Ok(DualPathOutput {
                eps_a: oa.eps,
                eps_b: ob.eps,
                eps_fused,
                attention_a: oa.attention,
                attention_b: ob.attention,
            })
        }
        FusionMode::Blended => {
            let g = b.graph();
            let specs = backbone.config().taps();
            let level = |k: usize| -> Result<Var<'g, S>> {
                let r = specs[k].resolution;
                if r == mh && r == mw {
                    Ok(*mask)
                } else {
                    Ok(g.constant(resample_mask(&full, (r, r))?))
                }
            };
            let (mut sa, mut fa) = backbone.begin(b, x_t, t, cond_a, opts.taps)?;
            let (mut sb, mut fb) = backbone.begin(b, x_t, t, cond_b, opts.taps)?;
            let last = backbone.num_taps() - 1;
            for k in 0..=last {
                if k > 0 {
                    fa = backbone.stage(b, &mut sa, k, &fa)?;
                    fb = backbone.stage(b, &mut sb, k, &fb)?;
                }
                if !opts.private_streams || k == last {
                    let fused = blend_features(&fa, &fb, &level(k)?)?;
                    if !opts.private_streams {
                        fa = fused;
                        fb = fused;
                    } else {
                        let eps_a = backbone.head(b, &fa)?;
                        let eps_b = backbone.head(b, &fb)?;
                        let eps_fused = backbone.head(b, &fused)?;
                        return Ok(DualPathOutput {
                            eps_a,
                            eps_b,
                            eps_fused,
                            attention_a: sa.attention,
                            attention_b: sb.attention,
                        });
                    }
                }
            }
            let eps = backbone.head(b, &fa)?;
            let eps_fused = fuse_noise(&eps, &eps, mask)?;
            Ok(DualPathOutput {
                eps_a: eps,
                eps_b: eps,
                eps_fused,
                attention_a: sa.attention,
                attention_b: sb.attention,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrant_downsamples_to_single_cell() {
        let m = RegionMask::from_fn(4, 4, |y, x| (y < 2 && x < 2) as u8 as f32);
        let p = build_mask_pyramid(&m, &[(2, 2), (4, 4), (8, 8)]).unwrap();
        assert_eq!(p[&(2, 2)].data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(p[&(4, 4)], m);
        let up = &p[&(8, 8)];
        assert_eq!(up.get(3, 3), 1.0);
        assert_eq!(up.get(4, 3), 0.0);
    }

    #[test]
    fn nearest_upsample_of_corner() {
        let m = RegionMask::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let p = build_mask_pyramid(&m, &[(4, 4)]).unwrap();
        let want = RegionMask::from_fn(4, 4, |y, x| (y < 2 && x < 2) as u8 as f32);
        assert_eq!(p[&(4, 4)], want);
    }

    #[test]
    fn incompatible_level_rejected() {
        let m = RegionMask::ones(6, 6);
        assert!(matches!(build_mask_pyramid(&m, &[(4, 4)]), Err(Error::Parameter(_))));
    }

    #[test]
    fn ones_stay_ones() {
        let p = build_mask_pyramid(&RegionMask::ones(32, 32), &[(16, 16), (8, 8), (1, 1)]).unwrap();
        assert!(p.values().all(|m| m.data().iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("blended".parse::<FusionMode>().unwrap(), FusionMode::Blended);
        assert_eq!("independent".parse::<FusionMode>().unwrap(), FusionMode::Independent);
        assert!("noise".parse::<FusionMode>().is_err());
    }

    proptest::proptest! {
        #[test]
        fn area_average_conserves_mean(bits in proptest::collection::vec(proptest::bool::ANY, 64)) {
            let m = RegionMask::from_bools(8, 8, &bits).unwrap();
            for (_, level) in build_mask_pyramid(&m, &[(4, 4), (2, 2), (1, 1)]).unwrap() {
                proptest::prop_assert!((level.mean() - m.mean()).abs() < 1e-6);
            }
        }
    }
}
