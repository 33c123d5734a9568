//! Minimal layer toolkit on top of `candle_core`: a named parameter store,
//! seeded initialisation, bias-free convolutions, batch normalisation,
//! an LSTM cell and an Adam optimiser with serialisable moments.

use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels;
pub use crate::kernels::upsample_nearest2x;

/// Forward-pass mode. Batch normalisation uses batch statistics (and
/// updates its running estimates) only in `Train`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn device() -> Device {
    Device::Cpu
}

/// Named trainable parameters plus non-trainable buffers (running stats).
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.buffers.iter()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Parameters and buffers, for serialisation.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter and buffer from `map[prefix + name]`.
    pub fn load(&self, map: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            let key = format!("{prefix}{name}");
            let src = map
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// SHA-256 over parameter names and values (buffers excluded).
    pub fn digest(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.params {
            hasher.update(name.as_bytes());
            let values = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

/// Scoped, seeded parameter initialiser writing into a [`ParamStore`].
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, name: &str) -> Init<'_> {
        let prefix = self.key(name);
        Init {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    fn key(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn register(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let key = self.key(name);
        if self.store.params.contains_key(&key) || self.store.buffers.contains_key(&key) {
            return Err(Error::Shape(format!("parameter `{key}` registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &device())?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.store.params.insert(key, var.clone());
        Ok(var)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], mean: f64, std: f64) -> Result<Var> {
        let dist = Normal::new(mean, std).map_err(|e| Error::Shape(e.to_string()))?;
        let n = shape.iter().product();
        let values = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.register(name, values, shape)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> Result<Var> {
        let dist = Uniform::new(lo, hi).map_err(|e| Error::Shape(e.to_string()))?;
        let n = shape.iter().product();
        let values = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.register(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        self.register(name, vec![value; n], shape)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let key = self.key(name);
        let n: usize = shape.iter().product();
        let t = Tensor::from_vec(vec![value; n], shape, &device())?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.store.buffers.insert(key, var.clone());
        Ok(var)
    }
}

/// Bias-free 2-D convolution with "same" padding for odd kernels.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Var,
    stride: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let weight = init.pp(name).normal(
            "weight",
            &[out_channels, in_channels, kernel, kernel],
            0.0,
            (2.0 / fan_in).sqrt(),
        )?;
        Ok(Self {
            weight,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        crate::kernels::conv2d_same(x, self.weight.as_tensor(), self.stride)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        let mut s = init.pp(name);
        Ok(Self {
            gamma: s.constant("gamma", &[channels], 1.0)?,
            beta: s.constant("beta", &[channels], 0.0)?,
            running_mean: s.buffer("running_mean", &[channels], 0.0)?,
            running_var: s.buffer("running_var", &[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        match mode {
            Mode::Train => {
                let (y, mean, var) =
                    kernels::batch_norm_train(x, self.gamma.as_tensor(), self.beta.as_tensor(), self.eps)?;
                let n = (b * h * w) as f64;
                let correction = n / (n - 1.0).max(1.0);
                let blend = |running: &Var, batch: Vec<f64>| -> Result<()> {
                    let batch = Tensor::from_vec(batch, c, running.device())?.to_dtype(running.dtype())?;
                    running.set(&((running.as_tensor() * (1.0 - self.momentum))? + (batch * self.momentum)?)?)?;
                    Ok(())
                };
                blend(&self.running_mean, mean)?;
                blend(&self.running_var, var.into_iter().map(|v| v * correction).collect())?;
                Ok(y)
            }
            Mode::Eval => {
                let shape = (1, c, 1, 1);
                let inv_std = (self.running_var.as_tensor() + self.eps)?.sqrt()?.recip()?;
                let scale = (self.gamma.as_tensor() * inv_std)?;
                let shift = (self.beta.as_tensor() - (self.running_mean.as_tensor() * &scale)?)?;
                Ok(x.broadcast_mul(&scale.reshape(shape)?)?.broadcast_add(&shift.reshape(shape)?)?)
            }
        }
    }
}

/// `x Wᵀ` over the last axis of `x` for a 2-D `w`. Leading axes are folded
/// into one matrix product; the batched form re-reads the transposed weight
/// once per leading index and is far slower.
pub fn matmul_t(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let dims = x.dims();
    let (out, input) = w.dims2()?;
    let Some((&last, lead)) = dims.split_last() else {
        return Err(Error::Shape("matmul of a scalar".into()));
    };
    if last != input {
        return Err(Error::Shape(format!("cannot multiply {dims:?} by a {out}x{input} weight transposed")));
    }
    let rows = lead.iter().product::<usize>();
    let y = x.reshape((rows, input))?.matmul(&w.t()?)?;
    let mut shape = lead.to_vec();
    shape.push(out);
    Ok(y.reshape(shape)?)
}

/// Bias-free linear map, `y = x Wᵀ` with `W: out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Var,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, input: usize, output: usize, std: f64) -> Result<Self> {
        let weight = init.pp(name).normal("weight", &[output, input], 0.0, std)?;
        Ok(Self { weight })
    }

    pub fn weight(&self) -> &Tensor {
        self.weight.as_tensor()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        matmul_t(x, self.weight.as_tensor())
    }
}

/// One direction of an LSTM.
#[derive(Clone, Debug)]
pub struct LstmCell {
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    hidden: usize,
}

impl LstmCell {
    pub fn new(init: &mut Init, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let k = 1.0 / (hidden as f64).sqrt();
        let mut s = init.pp(name);
        Ok(Self {
            w_ih: s.uniform("w_ih", &[4 * hidden, input], -k, k)?,
            w_hh: s.uniform("w_hh", &[4 * hidden, hidden], -k, k)?,
            bias: s.uniform("bias", &[4 * hidden], -k, k)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Input contribution to the gates for every step: `(B, L, E) -> (B, L, 4H)`.
    pub fn input_gates(&self, xs: &Tensor) -> Result<Tensor> {
        Ok(matmul_t(xs, self.w_ih.as_tensor())?.broadcast_add(self.bias.as_tensor())?)
    }

    /// Masked hidden states `(B, L, H)` for a whole sequence of input
    /// gates; see [`kernels::lstm_sequence`].
    pub fn sequence(&self, gates_x: &Tensor, mask: &[bool], reverse: bool) -> Result<Tensor> {
        kernels::lstm_sequence(gates_x, self.w_hh.as_tensor(), mask, reverse)
    }

    /// One recurrence step given precomputed input gates `(B, 4H)`.
    pub fn step(&self, gates_x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let gates = (gates_x + h.matmul(&self.w_hh.as_tensor().t()?)?)?;
        let hs = self.hidden;
        let i = sigmoid(&gates.narrow(1, 0, hs)?)?;
        let f = sigmoid(&gates.narrow(1, hs, hs)?)?;
        let g = gates.narrow(1, 2 * hs, hs)?.tanh()?;
        let o = sigmoid(&gates.narrow(1, 3 * hs, hs)?)?;
        let c = ((f * c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok((h, c))
    }
}

/// Logistic function written through `tanh`, which keeps both the value
/// and its gradient finite for large-magnitude inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}



/// Additive mask: 0 where `mask` is 1, a large negative value where it is 0.
pub fn additive_mask(mask: &Tensor) -> Result<Tensor> {
    Ok(((mask - 1.0)? * 1e9)?)
}

/// Softmax along `dim` with max-subtraction; `additive` is broadcast-added
/// to the logits first.
pub fn softmax(logits: &Tensor, dim: usize, additive: Option<&Tensor>) -> Result<Tensor> {
    let x = match additive {
        Some(m) => logits.broadcast_add(m)?,
        None => logits.clone(),
    };
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Errors with `NumericalFailure` if any element is NaN or infinite.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = scalar(&t.sum_all()?)?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericalFailure(format!("non-finite values in {what}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct AdamSlot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Adam with bias correction. Moments are plain tensors so they can be
/// checkpointed and restored exactly.
pub struct Adam {
    config: AdamConfig,
    lr: f64,
    steps: u64,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, config: AdamConfig) -> Result<Self> {
        let slots = params
            .into_iter()
            .map(|(name, var)| {
                let m = var.as_tensor().zeros_like()?;
                let v = var.as_tensor().zeros_like()?;
                Ok(AdamSlot { name, var, m, v })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            lr: config.lr,
            steps: 0,
            slots,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Global L2 norm of the gradients this optimiser would apply.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for slot in &self.slots {
            if let Some(g) = grads.get(slot.var.as_tensor()) {
                total += scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        Ok(total.sqrt())
    }

    /// Applies one update with gradients multiplied by `scale`.
    pub fn step(&mut self, grads: &GradStore, scale: f64) -> Result<()> {
        self.steps += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            // gradients may still reference the graph; moments must not
            let g = if scale == 1.0 { g.detach() } else { (g.detach() * scale)? };
            slot.m = ((&slot.m * beta1)? + (&g * (1.0 - beta1))?)?;
            slot.v = ((&slot.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&slot.m / bc1)?;
            let v_hat = (&slot.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let next = (slot.var.as_tensor() - (update * self.lr)?)?;
            slot.var.set(&next)?;
        }
        Ok(())
    }

    pub fn state_tensors(&self, prefix: &str) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::with_capacity(2 * self.slots.len() + 1);
        for slot in &self.slots {
            out.push((format!("{prefix}{}.m", slot.name), slot.m.clone()));
            out.push((format!("{prefix}{}.v", slot.name), slot.v.clone()));
        }
        out.push((
            format!("{prefix}__steps"),
            Tensor::new(&[self.steps as f64], &device())?,
        ));
        Ok(out)
    }

    pub fn load_state(&mut self, map: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        let get = |key: String| {
            map.get(&key)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing optimiser tensor `{key}`")))
        };
        for slot in &mut self.slots {
            let dtype = slot.var.dtype();
            slot.m = get(format!("{prefix}{}.m", slot.name))?.to_dtype(dtype)?;
            slot.v = get(format!("{prefix}{}.v", slot.name))?.to_dtype(dtype)?;
        }
        let steps = get(format!("{prefix}__steps"))?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        self.steps = steps.first().copied().unwrap_or(0.0) as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn upsample_repeats_each_value_in_a_block() {
        let x = Tensor::new(&[[[[1f32, 2.], [3., 4.]]]], &device()).unwrap();
        let y = upsample_nearest2x(&x).unwrap();
        let got = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // index oracle: out[r][c] = in[r / 2][c / 2]
        let input = [[1f32, 2.], [3., 4.]];
        let mut expected = Vec::new();
        for r in 0..4 {
            for c in 0..4 {
                expected.push(input[r / 2][c / 2]);
            }
        }
        assert_eq!(got, expected);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_respect_mask() {
        let logits = Tensor::new(&[[1f64, 2., 3.], [0., 0., 0.]], &device()).unwrap();
        let mask = Tensor::new(&[[1f64, 1., 0.], [1., 1., 1.]], &device()).unwrap();
        let p = softmax(&logits, 1, Some(&additive_mask(&mask).unwrap())).unwrap();
        let p = p.to_vec2::<f64>().unwrap();
        assert!(p[0][2].abs() < 1e-300);
        assert!((p[0][0] + p[0][1] - 1.0).abs() < 1e-12);
        for v in &p[1] {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    /// Step-by-step composite recurrence used as the reference for the
    /// fused sequence op.
    fn stepwise(cell: &LstmCell, gates: &Tensor, mask: &[bool], reverse: bool) -> Tensor {
        let (b, l, _) = gates.dims3().unwrap();
        let h0 = Tensor::zeros((b, cell.hidden()), gates.dtype(), &device()).unwrap();
        let (mut h, mut c) = (h0.clone(), h0.clone());
        let mut outs = vec![h0; l];
        let order: Vec<usize> = if reverse { (0..l).rev().collect() } else { (0..l).collect() };
        for t in order {
            let m: Vec<f64> = (0..b).map(|i| if mask[i * l + t] { 1.0 } else { 0.0 }).collect();
            let m = Tensor::from_vec(m, (b, 1), &device()).unwrap().to_dtype(gates.dtype()).unwrap();
            let keep = (1.0 - &m).unwrap();
            let (hn, cn) = cell.step(&gates.narrow(1, t, 1).unwrap().squeeze(1).unwrap(), &h, &c).unwrap();
            h = (hn.broadcast_mul(&m).unwrap() + h.broadcast_mul(&keep).unwrap()).unwrap();
            c = (cn.broadcast_mul(&m).unwrap() + c.broadcast_mul(&keep).unwrap()).unwrap();
            outs[t] = h.broadcast_mul(&m).unwrap();
        }
        Tensor::stack(&outs, 1).unwrap()
    }

    #[test]
    fn fused_recurrence_matches_stepwise_cell() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cell = LstmCell::new(&mut Init::new(&mut store, &mut rng), "lstm", 3, 5).unwrap();
        let gates = Var::from_tensor(&Tensor::randn(0f64, 1.5, (3, 4, 20), &device()).unwrap()).unwrap();
        // lengths 4, 2, 1
        let mask = [true, true, true, true, true, true, false, false, true, false, false, false];
        let probe = Tensor::randn(0f64, 1.0, (3, 4, 5), &device()).unwrap();
        for reverse in [false, true] {
            let fused = cell.sequence(&gates, &mask, reverse).unwrap();
            let reference = stepwise(&cell, &gates, &mask, reverse);
            let diff = (&fused - &reference).unwrap().abs().unwrap().max_all().unwrap();
            assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
            let ga = (fused * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let gb = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [gates.as_tensor(), cell.w_hh.as_tensor()] {
                let d = (ga.get(v).unwrap() - gb.get(v).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
                assert!(d.to_scalar::<f64>().unwrap() < 1e-11);
            }
        }
    }

    #[test]
    fn sigmoid_is_finite_at_extremes() {
        let x = Tensor::new(&[-1e4f32, 0.0, 1e4], &device()).unwrap();
        let y = sigmoid(&x).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn batchnorm_eval_uses_running_statistics() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bn = BatchNorm2d::new(&mut Init::new(&mut store, &mut rng), "bn", 2).unwrap();
        let x = Tensor::new(&[[[[1f64]], [[3.]]], [[[3.]], [[5.]]]], &device()).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // per-channel standardisation of {1,3} and {3,5}
        for (a, b) in v.iter().zip([-1.0, -1.0, 1.0, 1.0]) {
            assert!((a - b).abs() < 1e-5);
        }
        let rm = store.buffers().find(|(k, _)| k.ends_with("running_mean")).unwrap().1;
        let rm = rm.as_tensor().to_vec1::<f64>().unwrap();
        assert!((rm[0] - 0.2).abs() < 1e-12 && (rm[1] - 0.4).abs() < 1e-12);
        let before = store.digest().unwrap();
        bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(before, store.digest().unwrap());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Init::new(&mut store, &mut rng).constant("w", &[2], 1.0).unwrap();
        let mut opt = Adam::new(store.trainable(), AdamConfig::default()).unwrap();
        let loss = (w.as_tensor() * 3.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        opt.step(&grads, 1.0).unwrap();
        let v = w.as_tensor().to_vec1::<f64>().unwrap();
        // bias-corrected first step is lr * g / (|g| + eps)
        for x in v {
            assert!((x - (1.0 - 2e-4)).abs() < 1e-10);
        }
    }
}
