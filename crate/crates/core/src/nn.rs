//! Minimal differentiable building blocks on top of candle.
//!
//! All parameters are created through [`ParamStore`], which owns the variable map used
//! for checkpoints and draws initial values from a seeded generator so that model
//! construction is reproducible.

use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::util::fnv1a;

#[derive(Clone)]
pub struct ParamStore {
    varmap: VarMap,
    rng: Arc<Mutex<ChaCha8Rng>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            varmap: VarMap::new(),
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers `values` (f64, row-major) as a named variable.
    pub fn insert(&self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let mut data = self.varmap.data().lock().unwrap();
        if data.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = {
            let mut rng = self.rng.lock().unwrap();
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        self.insert(name, shape, values)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![value; n])
    }

    /// Variables whose names start with any of `prefixes`, sorted by name.
    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().unwrap();
        let mut out: Vec<_> = data
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn all_vars(&self) -> Vec<(String, Var)> {
        self.vars_with_prefix(&[""])
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.varmap.data().lock().unwrap().get(name).cloned()
    }

    /// Order-independent digest of the bit patterns of the selected variables.
    pub fn checksum(&self, prefixes: &[&str]) -> Result<u64> {
        let mut h: u64 = 0;
        for (name, var) in self.vars_with_prefix(prefixes) {
            let values = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let mut bytes = name.into_bytes();
            for v in values {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            h = h.rotate_left(7) ^ fnv1a(&bytes);
        }
        Ok(h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.varmap.save(path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.varmap.load(path)?;
        Ok(())
    }

    /// Copies current values of `src_prefix*` variables into `dst_prefix*` ones.
    pub fn copy_prefix(&self, src_prefix: &str, dst_prefix: &str) -> Result<()> {
        for (name, var) in self.vars_with_prefix(&[src_prefix]) {
            let dst_name = format!("{dst_prefix}{}", &name[src_prefix.len()..]);
            let dst = self
                .get(&dst_name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {dst_name}")))?;
            dst.set(&var.as_tensor().detach())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Xavier-uniform weight, zero bias.
    pub fn new(ps: &ParamStore, name: &str, din: usize, dout: usize) -> Result<Self> {
        let bound = (6.0 / (din + dout) as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(&format!("{name}.weight"), &[dout, din], bound)?,
            bias: ps.constant(&format!("{name}.bias"), &[dout], 0.0)?,
        })
    }

    pub fn zeros(ps: &ParamStore, name: &str, din: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.constant(&format!("{name}.weight"), &[dout, din], 0.0)?,
            bias: ps.constant(&format!("{name}.bias"), &[dout], 0.0)?,
        })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(&format!("{name}.weight"), &[dim], 1.0)?,
            beta: ps.constant(&format!("{name}.bias"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // candle's fused layer norm has no backward pass
        Ok(candle_nn::ops::layer_norm_slow(x, &self.gamma, &self.beta, 1e-5)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// He-uniform weight, zero bias.
    pub fn new(
        ps: &ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = (6.0 / (cin * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(&format!("{name}.weight"), &[cout, cin, kernel, kernel], bound)?,
            bias: ps.constant(&format!("{name}.bias"), &[cout], 0.0)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// `Linear → ReLU → … → Linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(ps: &ParamStore, name: &str, dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Multi-head attention with separate q/k/v/out projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if !dim.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(ps, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(ps, &format!("{name}.v"), dim, dim)?,
            out: Linear::new(ps, &format!("{name}.out"), dim, dim)?,
            heads,
        })
    }

    /// `query` is `(B, Lq, D)`, `key`/`value` are `(B, Lk, D)`; `bias` is an additive
    /// logit mask broadcastable to `(B, heads, Lq, Lk)`. Returns the output and the
    /// attention weights.
    pub fn forward(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (b, lq, d) = query.dims3()?;
        let lk = key.dim(1)?;
        let dh = d / self.heads;
        let split = |x: Tensor, l: usize| -> Result<Tensor> {
            Ok(x.reshape((b, l, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(query)?, lq)?;
        let k = split(self.k.forward(key)?, lk)?;
        let v = split(self.v.forward(value)?, lk)?;
        let mut logits = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        if let Some(bias) = bias {
            logits = logits.broadcast_add(bias)?;
        }
        let weights = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let out = weights.matmul(&v)?.transpose(1, 2)?.reshape((b, lq, d))?;
        Ok((self.out.forward(&out)?, weights))
    }
}

/// Post-norm feed-forward block: `LN(x + W2 relu(W1 x))`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
    norm: LayerNorm,
}

impl FeedForward {
    pub fn new(ps: &ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim)?,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc2.forward(&self.fc1.forward(x)?.relu()?)?;
        self.norm.forward(&(x + h)?)
    }
}

/// Fixed 2-D sine positional encoding for an `h×w` grid, `(h*w, dim)` row-major.
pub fn sine_position_encoding(h: usize, w: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let two_pi = std::f64::consts::PI * 2.0;
    let mut out = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            let coords = [(y as f64 + 1.0) / h as f64 * two_pi, (x as f64 + 1.0) / w as f64 * two_pi];
            for &c in &coords {
                for i in 0..half {
                    let freq = 10000f64.powf(2.0 * (i / 2) as f64 / half as f64);
                    let a = c / freq;
                    out.push(if i % 2 == 0 { a.sin() } else { a.cos() });
                }
            }
            out.extend(std::iter::repeat_n(0.0, dim - 2 * half));
        }
    }
    out
}
