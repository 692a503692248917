//! Gaze regression heads: a small MLP (kept at inference) and a
//! parameter-free masked max-pool head used only as a training signal.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::VarBuilder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::appearance::AppearanceFeature;
use crate::error::{GazeError, Result};
use crate::geometry::GazeDirection;
use crate::ops::{to_f64_vec, Mlp};

/// `C -> C -> 2` MLP with a GELU hidden layer.
#[derive(Debug, Clone)]
pub struct MlpHead {
    mlp: Mlp,
}

impl MlpHead {
    pub fn new(feature_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(&[feature_dim, feature_dim, 2], vb)?,
        })
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.out_dim() != 2 {
            return Err(GazeError::config(format!(
                "gaze head must output 2 values, got {}",
                mlp.out_dim()
            )));
        }
        Ok(Self { mlp })
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    /// `(B, C)` features to `(B, 2)` (pitch, yaw).
    pub fn forward(&self, feature: &AppearanceFeature) -> Result<Tensor> {
        if feature.dim() != self.feature_dim() {
            return Err(GazeError::shape(format!(
                "gaze head expects {} features, got {}",
                self.feature_dim(),
                feature.dim()
            )));
        }
        Ok(self.mlp.forward(&feature.values)?)
    }
}

/// Head outputs for one batch; the masked prediction exists only in training.
#[derive(Debug, Clone)]
pub struct RegressorOutput {
    pub mlp_gaze: Tensor,
    pub masked_gaze: Option<Tensor>,
}

/// Mean over rows of the L1 distance between `(N, 2)` predictions and targets.
pub fn gaze_loss(preds: &Tensor, truths: &Tensor) -> Result<Tensor> {
    let (n, k) = preds.dims2()?;
    if truths.dims() != preds.dims() || k != 2 {
        return Err(GazeError::shape(format!(
            "predictions {:?} and targets {:?} must both be (N, 2)",
            preds.dims(),
            truths.dims()
        )));
    }
    if n == 0 {
        return Err(GazeError::invalid("gaze loss needs at least one prediction"));
    }
    Ok((preds - truths)?.abs()?.sum(1)?.mean(0)?)
}

/// Same contract as [`gaze_loss`], applied to the masked head.
pub fn mask_loss(preds: &Tensor, truths: &Tensor) -> Result<Tensor> {
    gaze_loss(preds, truths)
}

/// Builds an `(N, 2)` tensor from gaze directions.
pub fn directions_to_tensor(dirs: &[GazeDirection], dtype: DType, device: &Device) -> Result<Tensor> {
    let flat: Vec<f64> = dirs.iter().flat_map(|g| [g.pitch, g.yaw]).collect();
    Ok(Tensor::from_vec(flat, (dirs.len(), 2), device)?.to_dtype(dtype)?)
}

pub fn tensor_to_directions(t: &Tensor) -> Result<Vec<GazeDirection>> {
    let (_, k) = t.dims2()?;
    if k != 2 {
        return Err(GazeError::shape(format!("expected (N, 2), got {:?}", t.dims())));
    }
    Ok(to_f64_vec(t)?
        .chunks(2)
        .map(|p| GazeDirection {
            pitch: p[0],
            yaw: p[1],
        })
        .collect())
}

/// A binary channel mask with an exact number of zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMask {
    pub bits: Vec<u8>,
    pub drop_ratio: f64,
}

impl FeatureMask {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn zeros(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 0).count()
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f64> = self.bits.iter().map(|&b| f64::from(b)).collect();
        Ok(Tensor::from_vec(v, (1, self.bits.len()), device)?.to_dtype(dtype)?)
    }
}

fn zero_count(c: usize, drop_ratio: f64) -> Result<usize> {
    if c == 0 {
        return Err(GazeError::invalid("mask length must be positive"));
    }
    if !(0.0..=1.0).contains(&drop_ratio) {
        return Err(GazeError::invalid(format!(
            "drop_ratio must lie in [0, 1], got {drop_ratio}"
        )));
    }
    Ok((drop_ratio * c as f64).round() as usize)
}

fn draw(rng: &mut ChaCha8Rng, c: usize, zeros: usize, drop_ratio: f64) -> FeatureMask {
    let mut bits = vec![1u8; c];
    for i in rand::seq::index::sample(rng, c, zeros) {
        bits[i] = 0;
    }
    FeatureMask { bits, drop_ratio }
}

/// A mask of length `c` with exactly `round(drop_ratio * c)` zeros at
/// positions drawn uniformly under `seed`.
pub fn make_mask(c: usize, drop_ratio: f64, seed: u64) -> Result<FeatureMask> {
    let zeros = zero_count(c, drop_ratio)?;
    Ok(draw(&mut ChaCha8Rng::seed_from_u64(seed), c, zeros, drop_ratio))
}

/// Seeded stream of fresh masks, one per sample per call.
#[derive(Debug, Clone)]
pub struct MaskSampler {
    rng: ChaCha8Rng,
    c: usize,
    zeros: usize,
    drop_ratio: f64,
}

impl MaskSampler {
    pub fn new(c: usize, drop_ratio: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            c,
            zeros: zero_count(c, drop_ratio)?,
            drop_ratio,
        })
    }

    pub fn next_mask(&mut self) -> FeatureMask {
        draw(&mut self.rng, self.c, self.zeros, self.drop_ratio)
    }

    /// `(batch, C)` tensor of independent masks.
    pub fn sample(&mut self, batch: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        let mut flat = Vec::with_capacity(batch * self.c);
        for _ in 0..batch {
            flat.extend(self.next_mask().bits.iter().map(|&b| f64::from(b)));
        }
        Ok(Tensor::from_vec(flat, (batch, self.c), device)?.to_dtype(dtype)?)
    }
}

/// Rejects odd feature widths, which the halves rule cannot split.
pub fn check_masked_head_dim(c: usize) -> Result<()> {
    if c == 0 || c % 2 != 0 {
        return Err(GazeError::config(format!(
            "masked head needs an even, positive feature_dim, got {c}"
        )));
    }
    Ok(())
}

/// `(max of first C/2, max of last C/2)` of `feature * mask`.
///
/// `masks` is `(B, C)` or a broadcastable `(1, C)`.
pub fn masked_head(feature: &AppearanceFeature, masks: &Tensor) -> Result<Tensor> {
    let c = feature.dim();
    check_masked_head_dim(c)?;
    let (mb, mc) = masks.dims2()?;
    let b = feature.values.dim(0)?;
    if mc != c || (mb != b && mb != 1) {
        return Err(GazeError::shape(format!(
            "mask {:?} does not fit features {:?}",
            masks.dims(),
            feature.values.dims()
        )));
    }
    let masked = feature.values.broadcast_mul(masks)?;
    let half = c / 2;
    let first = masked.narrow(1, 0, half)?.max_keepdim(D::Minus1)?;
    let second = masked.narrow(1, half, half)?.max_keepdim(D::Minus1)?;
    Ok(Tensor::cat(&[&first, &second], 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appearance::FeatureKind;
    use crate::ops::{scalar, ParamStore};
    use proptest::prelude::*;

    fn dev() -> Device {
        Device::Cpu
    }

    fn feat(rows: &[Vec<f64>]) -> AppearanceFeature {
        let c = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        AppearanceFeature::new(
            Tensor::from_vec(flat, (rows.len(), c), &dev()).unwrap(),
            FeatureKind::Enhanced,
        )
        .unwrap()
    }

    fn pairs(v: &[[f64; 2]]) -> Tensor {
        let flat: Vec<f64> = v.iter().flatten().copied().collect();
        Tensor::from_vec(flat, (v.len(), 2), &dev()).unwrap()
    }

    #[test]
    fn zero_feature_with_zero_bias_head_gives_zero_gaze() {
        let store = ParamStore::new(0);
        let head = MlpHead::new(8, store.builder(DType::F64, &dev())).unwrap();
        for (name, var) in store.named_vars() {
            if name.ends_with("bias") {
                store.set(&name, &var.zeros_like().unwrap()).unwrap();
            }
        }
        let out = head.forward(&feat(&[vec![0.0; 8]])).unwrap();
        assert_eq!(to_f64_vec(&out).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_layer_head_is_a_matrix_product() {
        let w = [[0.5, -1.0, 0.25, 2.0], [1.5, 0.0, -0.75, 0.1]];
        let flat: Vec<f64> = w.iter().flatten().copied().collect();
        let mlp = Mlp::from_weights(vec![(Tensor::from_vec(flat, (2, 4), &dev()).unwrap(), None)]);
        let head = MlpHead::from_mlp(mlp).unwrap();
        let x = [1.0, 2.0, -3.0, 0.5];
        let out = to_f64_vec(&head.forward(&feat(&[x.to_vec()])).unwrap()).unwrap();
        for i in 0..2 {
            let want: f64 = (0..4).map(|j| w[i][j] * x[j]).sum();
            assert!((out[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn head_outputs_two_values_and_checks_width() {
        let store = ParamStore::new(1);
        for c in [2, 6, 32] {
            let head = MlpHead::new(c, store.builder(DType::F64, &dev()).pp(format!("h{c}"))).unwrap();
            let out = head.forward(&feat(&[vec![0.3; c], vec![-0.1; c]])).unwrap();
            assert_eq!(out.dims(), &[2, 2]);
        }
        let head = MlpHead::new(4, store.builder(DType::F64, &dev()).pp("x")).unwrap();
        assert!(matches!(head.forward(&feat(&[vec![0.0; 5]])), Err(GazeError::Shape(_))));
    }

    #[test]
    fn gaze_loss_examples() {
        let a = pairs(&[[0.1, 0.2], [-0.3, 0.4]]);
        assert_eq!(scalar(&gaze_loss(&a, &a).unwrap()).unwrap(), 0.0);
        let l = gaze_loss(&pairs(&[[0.5, 0.0]]), &pairs(&[[0.0, 0.0]])).unwrap();
        assert!((scalar(&l).unwrap() - 0.5).abs() < 1e-15);
        let p = [[0.1, -0.2], [0.7, 0.3], [-0.4, 0.05]];
        let t = [[0.0, 0.1], [0.2, 0.2], [0.1, -0.3]];
        let want = ((0.1 + 0.3) + (0.5 + 0.1) + (0.5 + 0.35)) / 3.0;
        let l = scalar(&gaze_loss(&pairs(&p), &pairs(&t)).unwrap()).unwrap();
        assert!((l - want).abs() < 1e-12);
        let l = scalar(&mask_loss(&pairs(&p), &pairs(&t)).unwrap()).unwrap();
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn gaze_loss_rejects_empty_and_mismatched_inputs() {
        let empty = Tensor::zeros((0, 2), DType::F64, &dev()).unwrap();
        assert!(matches!(gaze_loss(&empty, &empty), Err(GazeError::InvalidArgument(_))));
        assert!(matches!(
            gaze_loss(&pairs(&[[0.0, 0.0]]), &pairs(&[[0.0, 0.0], [1.0, 1.0]])),
            Err(GazeError::Shape(_))
        ));
    }

    #[test]
    fn direction_round_trip() {
        let dirs = vec![GazeDirection { pitch: 0.1, yaw: -0.2 }, GazeDirection::zero()];
        let t = directions_to_tensor(&dirs, DType::F64, &dev()).unwrap();
        assert_eq!(tensor_to_directions(&t).unwrap(), dirs);
    }

    #[test]
    fn default_mask_has_five_zeros_out_of_thirty_two() {
        let m = make_mask(32, 5.0 / 32.0, 7).unwrap();
        assert_eq!(m.zeros(), 5);
        assert_eq!(m.len() - m.zeros(), 27);
        assert_eq!(m, make_mask(32, 5.0 / 32.0, 7).unwrap());
        assert!(make_mask(8, 0.0, 1).unwrap().bits.iter().all(|&b| b == 1));
        assert!(make_mask(8, 1.0, 1).unwrap().bits.iter().all(|&b| b == 0));
    }

    #[test]
    fn mask_ratio_is_validated() {
        assert!(matches!(make_mask(8, -0.1, 0), Err(GazeError::InvalidArgument(_))));
        assert!(matches!(make_mask(8, 1.5, 0), Err(GazeError::InvalidArgument(_))));
        assert!(make_mask(0, 0.5, 0).is_err());
    }

    #[test]
    fn sampler_draws_independent_masks_per_row() {
        let mut s = MaskSampler::new(32, 5.0 / 32.0, 3).unwrap();
        let m = s.sample(16, DType::F64, &dev()).unwrap();
        let rows = m.to_vec2::<f64>().unwrap();
        for r in &rows {
            assert_eq!(r.iter().filter(|&&v| v == 0.0).count(), 5);
        }
        assert!(rows.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn masked_head_examples() {
        let full = FeatureMask { bits: vec![1; 4], drop_ratio: 0.0 }
            .to_tensor(DType::F64, &dev())
            .unwrap();
        let f = feat(&[vec![1.0, 2.0, 3.0, 4.0]]);
        assert_eq!(to_f64_vec(&masked_head(&f, &full).unwrap()).unwrap(), vec![2.0, 4.0]);
        let m = FeatureMask { bits: vec![0, 1, 1, 0], drop_ratio: 0.5 }
            .to_tensor(DType::F64, &dev())
            .unwrap();
        assert_eq!(to_f64_vec(&masked_head(&f, &m).unwrap()).unwrap(), vec![2.0, 3.0]);
        let z = feat(&[vec![0.0; 4]]);
        assert_eq!(to_f64_vec(&masked_head(&z, &m).unwrap()).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn masked_head_rejects_odd_width() {
        let f = feat(&[vec![1.0, 2.0, 3.0]]);
        let m = Tensor::ones((1, 3), DType::F64, &dev()).unwrap();
        assert!(matches!(masked_head(&f, &m), Err(GazeError::Config(_))));
    }

    #[test]
    fn masked_head_gradient_flows_to_the_argmax() {
        use candle_core::Var;
        let x = Var::from_tensor(&Tensor::new(&[[0.3f64, -1.0, 0.9, 0.2, 0.1, 0.5]], &dev()).unwrap()).unwrap();
        let m = Tensor::new(&[[1.0f64, 1.0, 1.0, 1.0, 1.0, 0.0]], &dev()).unwrap();
        let f = AppearanceFeature::new(x.as_tensor().clone(), FeatureKind::Enhanced).unwrap();
        let out = masked_head(&f, &m).unwrap().sum_all().unwrap();
        let g = out.backward().unwrap();
        let grad = to_f64_vec(g.get(x.as_tensor()).unwrap()).unwrap();
        assert_eq!(grad, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn zero_count_is_exact(c in 2usize..=64, k in 0usize..=64, seed in any::<u64>()) {
            let k = k.min(c);
            let ratio = k as f64 / c as f64;
            let m = make_mask(c, ratio, seed).unwrap();
            prop_assert_eq!(m.zeros(), k);
            prop_assert_eq!(m.len(), c);
        }

        #[test]
        fn masked_output_is_bounded_by_the_kept_entries(
            v in proptest::collection::vec(-5.0f64..5.0, 8),
            seed in any::<u64>(),
        ) {
            let mask = make_mask(8, 0.25, seed).unwrap();
            let f = feat(&[v.clone()]);
            let out = to_f64_vec(&masked_head(&f, &mask.to_tensor(DType::F64, &dev()).unwrap()).unwrap()).unwrap();
            for (h, &o) in out.iter().enumerate() {
                let idx = h * 4..h * 4 + 4;
                let kept: Vec<f64> = idx.clone().filter(|&i| mask.bits[i] == 1).map(|i| v[i]).collect();
                let dropped = idx.clone().any(|i| mask.bits[i] == 0);
                let mut bound = v[idx].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if dropped {
                    // zeroed channels enter the max as 0
                    bound = bound.max(0.0);
                }
                prop_assert!(o <= bound);
                prop_assert!(kept.iter().all(|&k| k <= o));
            }
        }

        #[test]
        fn loss_is_symmetric_nonnegative_and_lipschitz(
            a in proptest::collection::vec(-3.0f64..3.0, 6),
            b in proptest::collection::vec(-3.0f64..3.0, 6),
            i in 0usize..6,
            d in -1.0f64..1.0,
        ) {
            let ta = Tensor::from_vec(a.clone(), (3, 2), &dev()).unwrap();
            let tb = Tensor::from_vec(b.clone(), (3, 2), &dev()).unwrap();
            let ab = scalar(&gaze_loss(&ta, &tb).unwrap()).unwrap();
            let ba = scalar(&gaze_loss(&tb, &ta).unwrap()).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
            let mut a2 = a.clone();
            a2[i] += d;
            let ta2 = Tensor::from_vec(a2, (3, 2), &dev()).unwrap();
            let ab2 = scalar(&gaze_loss(&ta2, &tb).unwrap()).unwrap();
            prop_assert!((ab2 - ab).abs() <= d.abs() / 3.0 + 1e-12);
        }
    }
}
