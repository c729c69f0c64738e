use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Gradients, Graph};
use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group. `Encoder` is the contextual token encoder standing in
/// for a pretrained backbone; everything else is `Rest`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Encoder,
    Rest,
}

impl Group {
    fn code(self) -> u8 {
        match self {
            Group::Encoder => 0,
            Group::Rest => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Group::Encoder),
            1 => Ok(Group::Rest),
            _ => Err(TensorError::Checkpoint(format!("unknown group code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    name: String,
    group: Group,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named parameters in registration order, with gradient buffers and
/// AdamW moments.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    seed: u64,
    rng: ChaCha8Rng,
    step: u64,
}

/// Equal when parameters, moments, seed and step agree. The initializer
/// stream is not compared.
impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params && self.seed == other.seed && self.step == other.step
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TCDACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn add_tensor(&mut self, name: &str, value: Tensor, group: Group) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let zeros = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            group,
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        Ok(ParamId(self.params.len() - 1))
    }

    /// Uniform `(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn add_xavier(&mut self, name: &str, fan_in: usize, fan_out: usize, group: Group) -> Result<ParamId> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.gen_range(-a..a)).collect();
        self.add_tensor(name, Tensor::matrix(fan_in, fan_out, data)?, group)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize], group: Group) -> Result<ParamId> {
        self.add_tensor(name, Tensor::zeros(shape), group)
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize], group: Group) -> Result<ParamId> {
        self.add_tensor(name, Tensor::full(shape, 1.0), group)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.params[id.0].group
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Adds `scale ·` the gradients of every parameter bound on `g`.
    pub fn accumulate(&mut self, g: &Graph, grads: &Gradients, scale: f64) {
        let mut bound: Vec<_> = g.bound_params().collect();
        bound.sort();
        for (id, var) in bound {
            if let Some(t) = grads.get(var) {
                for (acc, x) in self.params[id.0].grad.data_mut().iter_mut().zip(t.data()) {
                    *acc += scale * x;
                }
            }
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.is_finite())
    }

    pub(crate) fn bump_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// Serializes values, optimizer moments and the step counter together
    /// with free-form string metadata.
    pub fn to_bytes(&self, meta: &BTreeMap<String, String>) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            write_str(&mut out, &p.name);
            out.push(p.group.code());
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for t in [&p.value, &p.m, &p.v] {
                for x in t.data() {
                    out.extend_from_slice(&x.to_bits().to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        for (k, v) in meta {
            write_str(&mut out, k);
            write_str(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, BTreeMap<String, String>)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
        }
        let seed = r.u64()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut store = ParamStore::new(seed);
        store.step = step;
        for _ in 0..count {
            let name = r.string()?;
            let group = Group::from_code(r.take(1)?[0])?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut read = || -> Result<Tensor> {
                let data = (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
                Tensor::new(&shape, data)
            };
            let value = read()?;
            let m = read()?;
            let v = read()?;
            let id = store.add_tensor(&name, value, group)?;
            store.params[id.0].m = m;
            store.params[id.0].v = v;
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        if r.pos != bytes.len() {
            return Err(TensorError::Checkpoint("trailing bytes".into()));
        }
        Ok((store, meta))
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        std::fs::write(path, self.to_bytes(meta)).map_err(|e| TensorError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let bytes = std::fs::read(path).map_err(|e| TensorError::Io(e.to_string()))?;
        ParamStore::from_bytes(&bytes)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self.bytes.get(self.pos..end).ok_or_else(|| TensorError::Checkpoint("truncated".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| TensorError::Checkpoint(e.to_string()))
    }
}

/// Adam with decoupled weight decay and one learning rate per [`Group`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr_encoder: f64,
    pub lr_rest: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { lr_encoder: 1e-5, lr_rest: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamW {
    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&self, store: &mut ParamStore) {
        let t = store.bump_step() as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in &mut store.params {
            let lr = match p.group {
                Group::Encoder => self.lr_encoder,
                Group::Rest => self.lr_rest,
            };
            let n = p.value.len();
            let (value, grad, m, v) = (p.value.data_mut(), p.grad.data(), p.m.data_mut(), p.v.data_mut());
            for i in 0..n {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                value[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * value[i]);
            }
        }
        store.zero_grads();
    }
}
