//! Tensor building blocks shared by the network modules.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Module, Shape, Tensor, Var, D};
use candle_nn::init::{FanInOut, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{GazeError, Result};

/// Norms below this are treated as zero by [`l2_normalize_rows`].
pub const NORM_FLOOR: f64 = 1e-12;

/// Derives a reproducible 64-bit seed from a base seed and a label.
pub fn derive_seed(seed: u64, label: &[u8]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label);
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

/// A named parameter store whose initial values depend only on
/// `(seed, parameter name)`, independent of construction order or process.
#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<HashMap<String, Var>>>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: Arc::new(Mutex::new(HashMap::new())),
            seed,
        }
    }

    pub fn builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    /// All parameters sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let map = self.vars.lock().expect("param store poisoned");
        let mut out: Vec<_> = map.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().expect("param store poisoned").get(name).cloned()
    }

    pub fn len(&self) -> usize {
        self.vars.lock().expect("param store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Overwrites an existing parameter in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| GazeError::invalid(format!("unknown parameter {name}")))?;
        if var.shape() != value.shape() {
            return Err(GazeError::shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                var.shape(),
                value.shape()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    /// Snapshot of all values, detached from the graph.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.named_vars()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().detach().copy()?)))
            .collect()
    }

    fn init_tensor(&self, shape: &Shape, name: &str, init: Init) -> Vec<f64> {
        let n = shape.elem_count();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, name.as_bytes()));
        let uniform = |rng: &mut ChaCha8Rng, lo: f64, up: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(lo..up)).collect()
        };
        let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> Vec<f64> {
            (0..n)
                .map(|_| mean + std * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform { lo, up } => uniform(&mut rng, lo, up),
            Init::Randn { mean, stdev } => normal(&mut rng, mean, stdev),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let fan = match fan {
                    FanInOut::FanIn => FanInOut::FanIn.for_shape(shape),
                    FanInOut::FanOut => FanInOut::FanOut.for_shape(shape),
                };
                let std = non_linearity.gain() / (fan.max(1) as f64).sqrt();
                match dist {
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        uniform(&mut rng, -bound, bound)
                    }
                    NormalOrUniform::Normal => normal(&mut rng, 0.0, std),
                }
            }
        }
    }
}

impl SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        init: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        if let Some(var) = ParamStore::get(self, name) {
            if var.shape() != &s {
                candle_core::bail!(
                    "parameter {name} requested with shape {s:?}, stored as {:?}",
                    var.shape()
                );
            }
            return Ok(var.as_tensor().clone());
        }
        let values = self.init_tensor(&s, name, init);
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars
            .lock()
            .expect("param store poisoned")
            .insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match ParamStore::get(self, name) {
            Some(v) => v.as_tensor().to_dtype(dtype),
            None => candle_core::bail!("parameter {name} not found"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        ParamStore::get(self, name).is_some()
    }
}

/// Layer normalization over the last dimension, composed from differentiable
/// primitives (works for every float dtype and supports backprop).
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Linear layer over the last dimension of a tensor of any rank.
pub fn linear(x: &Tensor, layer: &candle_nn::Linear) -> candle_core::Result<Tensor> {
    let dims = x.dims();
    if dims.len() <= 2 {
        return layer.forward(x);
    }
    let last = dims[dims.len() - 1];
    let lead: usize = dims[..dims.len() - 1].iter().product();
    let y = layer.forward(&x.reshape((lead, last))?)?;
    let mut out_dims = dims[..dims.len() - 1].to_vec();
    out_dims.push(y.dim(1)?);
    y.reshape(out_dims)
}

/// A stack of linear layers with GELU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<candle_nn::Linear>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`; a two-element slice is a single linear map.
    pub fn new(dims: &[usize], vb: VarBuilder) -> Result<Self> {
        if dims.len() < 2 {
            return Err(GazeError::config("an MLP needs at least input and output widths"));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| candle_nn::linear(w[0], w[1], vb.pp(i.to_string())))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// Builds an MLP from explicit `(weight[out, in], bias)` pairs.
    pub fn from_weights(layers: Vec<(Tensor, Option<Tensor>)>) -> Self {
        Self {
            layers: layers
                .into_iter()
                .map(|(w, b)| candle_nn::Linear::new(w, b))
                .collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight().dim(1).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.layers
            .last()
            .map(|l| l.weight().dim(0).unwrap_or(0))
            .unwrap_or(0)
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = linear(&h, layer)?;
            if i + 1 < self.layers.len() {
                h = h.gelu_erf()?;
            }
        }
        Ok(h)
    }
}

/// Normalizes each row of a `(n, d)` tensor to unit L2 norm.
///
/// Rows whose norm falls below [`NORM_FLOOR`] are replaced by the first basis
/// vector `e0` (carrying no gradient) and a warning is logged.
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let sq = x.sqr()?.sum_keepdim(1)?;
    let host = to_f64_vec(&sq)?;
    let degenerate: Vec<bool> = host.iter().map(|s| !(s.sqrt() >= NORM_FLOOR)).collect();
    if !degenerate.iter().any(|&d| d) {
        return Ok(x.broadcast_div(&sq.sqrt()?)?);
    }
    log::warn!(
        "{} of {n} rows have norm below {NORM_FLOOR:e}; substituting the first basis vector",
        degenerate.iter().filter(|&&d| d).count()
    );
    // Offset degenerate rows before the sqrt so the unused branch stays finite
    // under backprop.
    let offset: Vec<f64> = degenerate.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect();
    let offset = Tensor::from_vec(offset, (n, 1), x.device())?.to_dtype(x.dtype())?;
    let normalized = x.broadcast_div(&(sq + offset)?.sqrt()?)?;
    let keep: Vec<u8> = degenerate.iter().map(|&d| u8::from(!d)).collect();
    let keep = Tensor::from_vec(keep, (n, 1), x.device())?.broadcast_as((n, d))?;
    let mut basis = vec![0f64; d];
    basis[0] = 1.0;
    let basis = Tensor::from_vec(basis, (1, d), x.device())?
        .to_dtype(x.dtype())?
        .broadcast_as((n, d))?;
    Ok(keep.where_cond(&normalized, &basis)?)
}

/// Row-interpolation matrix `(out, in)` for 1-D bilinear resampling with
/// half-pixel centers (`align_corners = false`).
pub fn interpolation_matrix(out_len: usize, in_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    if in_len == 1 {
        for r in 0..out_len {
            m[r] = 1.0;
        }
        return m;
    }
    let scale = in_len as f64 / out_len as f64;
    for r in 0..out_len {
        let src = ((r as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        let t = src - lo as f64;
        m[r * in_len + lo] += 1.0 - t;
        m[r * in_len + hi] += t;
    }
    m
}

/// Bilinearly resizes token grids `(b, h*w, c)` laid out row-major to
/// `(b, out_h*out_w, c)`. Linear in the input, hence differentiable.
pub fn resize_tokens(
    tokens: &Tensor,
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Result<Tensor> {
    let (b, n, _) = tokens.dims3()?;
    if n != h * w {
        return Err(GazeError::shape(format!(
            "token count {n} does not match grid {h}x{w}"
        )));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(tokens.clone());
    }
    let rh = interpolation_matrix(out_h, h);
    let rw = interpolation_matrix(out_w, w);
    // Kronecker product: R[(i,j),(k,l)] = rh[i,k] * rw[j,l]
    let mut r = vec![0.0; out_h * out_w * h * w];
    for i in 0..out_h {
        for j in 0..out_w {
            for k in 0..h {
                for l in 0..w {
                    r[(i * out_w + j) * (h * w) + k * w + l] = rh[i * h + k] * rw[j * w + l];
                }
            }
        }
    }
    let r = Tensor::from_vec(r, (1, out_h * out_w, h * w), tokens.device())?
        .to_dtype(tokens.dtype())?
        .broadcast_as((b, out_h * out_w, h * w))?
        .contiguous()?;
    Ok(r.matmul(&tokens.contiguous()?)?)
}

/// 2x2 max pooling with stride 2 over `(B, C, H, W)`; a trailing odd row or
/// column is dropped.
///
/// Built from reshape + max so the backward pass is exact. candle's own
/// `max_pool2d` backward scales the gradient by the tie fraction instead of
/// dividing by it, which quarters every gradient through a 2x2 window.
pub fn max_pool_2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(GazeError::shape(format!("cannot 2x2-pool a {h}x{w} map")));
    }
    let x = x.narrow(2, 0, 2 * oh)?.narrow(3, 0, 2 * ow)?.contiguous()?;
    Ok(x.reshape((b, c, oh, 2, ow, 2))?.max(5)?.max(3)?)
}

/// Flattens a tensor to host `f64` values.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
}

/// Scalar tensor to host `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}
