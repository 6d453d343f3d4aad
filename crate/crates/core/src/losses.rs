//! Region-masked denoising losses.
//!
//! Every loss is a mean over all elements, so the masked terms are not
//! renormalized by mask area. Masks are `[B | 1, 1, H, W]` and broadcast
//! over channels.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// `mean((m ⊙ (noise − pred))²)`
pub fn masked_mse<'g, S: Real>(
    noise: &Var<'g, S>,
    pred: &Var<'g, S>,
    mask: &Var<'g, S>,
) -> Result<Var<'g, S>> {
    Ok(noise.sub(pred)?.mul(mask)?.sqr().mean_all())
}

pub fn mse<'g, S: Real>(a: &Var<'g, S>, b: &Var<'g, S>) -> Result<Var<'g, S>> {
    Ok(a.sub(b)?.sqr().mean_all())
}

/// Face-region loss of the identity-enhancing pathway.
pub fn loss_iea<'g, S: Real>(
    noise: &Var<'g, S>,
    pred: &Var<'g, S>,
    mask: &Var<'g, S>,
) -> Result<Var<'g, S>> {
    masked_mse(noise, pred, mask)
}

/// Complement-region loss of the text-consistency pathway.
pub fn loss_tca<'g, S: Real>(
    noise: &Var<'g, S>,
    pred: &Var<'g, S>,
    mask: &Var<'g, S>,
) -> Result<Var<'g, S>> {
    masked_mse(noise, pred, &mask.affine(-1.0, 1.0))
}

/// `m ⊙ pred_iea + (1 − m) ⊙ pred_tca`, exact at `m ∈ {0, 1}`.
pub fn fuse_noise<'g, S: Real>(
    pred_iea: &Var<'g, S>,
    pred_tca: &Var<'g, S>,
    mask: &Var<'g, S>,
) -> Result<Var<'g, S>> {
    pred_iea.blend(pred_tca, mask)
}

pub fn loss_fusion<'g, S: Real>(noise: &Var<'g, S>, fused: &Var<'g, S>) -> Result<Var<'g, S>> {
    mse(noise, fused)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub iea: f64,
    pub tca: f64,
    pub fusion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            iea: 1.0,
            tca: 1.0,
            fusion: 1.0,
        }
    }
}

/// Weighted sum of the three terms; unweighted with the default weights.
pub fn total_loss<'g, S: Real>(
    l_iea: &Var<'g, S>,
    l_tca: &Var<'g, S>,
    l_fusion: &Var<'g, S>,
    w: LossWeights,
) -> Result<Var<'g, S>> {
    l_iea.scale(w.iea).add(&l_tca.scale(w.tca))?.add(&l_fusion.scale(w.fusion))
}

fn eval<S: Real>(
    inputs: [&Tensor<S>; 3],
    f: impl for<'g> Fn(&Var<'g, S>, &Var<'g, S>, &Var<'g, S>) -> Result<Var<'g, S>>,
) -> Result<Tensor<S>> {
    let g = Graph::inference();
    let [a, b, c] = inputs.map(|t| g.constant(t.clone()));
    Ok((*f(&a, &b, &c)?.value()).clone())
}

/// Tensor-level convenience wrappers.
pub mod eager {
    use super::*;

    pub fn loss_iea<S: Real>(noise: &Tensor<S>, pred: &Tensor<S>, mask: &Tensor<S>) -> Result<S> {
        Ok(eval([noise, pred, mask], super::loss_iea)?.item())
    }

    pub fn loss_tca<S: Real>(noise: &Tensor<S>, pred: &Tensor<S>, mask: &Tensor<S>) -> Result<S> {
        Ok(eval([noise, pred, mask], super::loss_tca)?.item())
    }

    pub fn loss_fusion<S: Real>(noise: &Tensor<S>, fused: &Tensor<S>) -> Result<S> {
        Ok(eval([noise, fused, fused], |n, f, _| super::loss_fusion(n, f))?.item())
    }

    pub fn mse<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<S> {
        loss_fusion(a, b)
    }

    pub fn fuse_noise<S: Real>(
        pred_iea: &Tensor<S>,
        pred_tca: &Tensor<S>,
        mask: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        eval([pred_iea, pred_tca, mask], super::fuse_noise)
    }

    pub fn total_loss(l_iea: f64, l_tca: f64, l_fusion: f64, w: LossWeights) -> f64 {
        w.iea * l_iea + w.tca * l_tca + w.fusion * l_fusion
    }
}

#[cfg(test)]
mod tests {
    use super::eager::*;
    use super::{Graph, LossWeights, Tensor};
    use proptest::prelude::*;

    fn t(shape: [usize; 4], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn hand_computed_two_by_two() {
        let noise = t([1, 1, 2, 2], &[1.0; 4]);
        let pred = t([1, 1, 2, 2], &[0.0; 4]);
        let m = t([1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(loss_iea(&noise, &pred, &m).unwrap(), 0.5);
        assert_eq!(loss_tca(&noise, &pred, &m).unwrap(), 0.5);
    }

    #[test]
    fn fusion_loss_cases() {
        let n = Tensor::<f64>::from_fn([1, 3, 2, 2], |i| i as f64 * 0.3 - 1.0);
        assert_eq!(loss_fusion(&n, &n).unwrap(), 0.0);
        assert!((loss_fusion(&n, &n.map(|v| v + 1.0)).unwrap() - 1.0).abs() < 1e-15);
        let f = Tensor::from_fn([1, 3, 2, 2], |i| (i as f64).sin());
        let oracle: f64 = n.data().iter().zip(f.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 12.0;
        assert!((loss_fusion(&n, &f).unwrap() - oracle).abs() < 1e-15);
    }

    #[test]
    fn total_loss_sums() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, w), 0.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0, w), 6.0);
        let g = Graph::<f64>::inference();
        let [a, b, c] = [1.0, 2.0, 3.0].map(|v| g.constant(Tensor::scalar(v)));
        assert_eq!(crate::losses::total_loss(&a, &b, &c, w).unwrap().value().item(), 6.0);
    }

    #[test]
    fn half_mask_fuses_to_average() {
        let a = Tensor::<f64>::from_fn([1, 2, 2, 2], |i| i as f64);
        let b = Tensor::from_fn([1, 2, 2, 2], |i| -(i as f64));
        let m = Tensor::full([1, 1, 2, 2], 0.5);
        let f = fuse_noise(&a, &b, &m).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_structural() {
        let a = Tensor::<f64>::zeros([1, 3, 2, 2]);
        let b = Tensor::zeros([1, 3, 4, 4]);
        let m = Tensor::zeros([1, 1, 2, 2]);
        assert!(matches!(loss_iea(&a, &b, &m), Err(crate::Error::Structural(_))));
    }

    fn binary_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(-3.0f64..3.0, 24),
            prop::collection::vec(-3.0f64..3.0, 24),
            prop::collection::vec(prop::bool::ANY, 8),
        )
            .prop_map(|(n, p, m)| (n, p, m.into_iter().map(|b| b as u8 as f64).collect()))
    }

    proptest! {
        #[test]
        fn complementarity((n, p, m) in binary_case()) {
            let (n, p, m) = (t([1, 3, 2, 4], &n), t([1, 3, 2, 4], &p), t([1, 1, 2, 4], &m));
            let sum = loss_iea(&n, &p, &m).unwrap() + loss_tca(&n, &p, &m).unwrap();
            prop_assert!((sum - mse(&n, &p).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn fuse_is_convex(
            a in prop::collection::vec(-3.0f64..3.0, 12),
            b in prop::collection::vec(-3.0f64..3.0, 12),
            m in prop::collection::vec(0.0f64..=1.0, 4),
        ) {
            let (a, b, m) = (t([1, 3, 2, 2], &a), t([1, 3, 2, 2], &b), t([1, 1, 2, 2], &m));
            let f = fuse_noise(&a, &b, &m).unwrap();
            for ((&x, &y), &v) in a.data().iter().zip(b.data()).zip(f.data()) {
                prop_assert!(v >= x.min(y) - 1e-12 && v <= x.max(y) + 1e-12);
            }
        }

        #[test]
        fn losses_nonnegative_and_zero_on_exact((n, _, m) in binary_case()) {
            let (n, m) = (t([1, 3, 2, 4], &n), t([1, 1, 2, 4], &m));
            prop_assert_eq!(loss_iea(&n, &n, &m).unwrap(), 0.0);
            prop_assert_eq!(loss_tca(&n, &n, &m).unwrap(), 0.0);
            let p = n.map(|v| v + 0.25);
            prop_assert!(loss_iea(&n, &p, &m).unwrap() >= 0.0);
        }
    }
}
