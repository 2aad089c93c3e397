//! Named parameter storage, initialization, and the on-disk container.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::tensor::Tensor;

const CONTAINER_MAGIC: &str = "RAW2UD-PARAMS";
const CONTAINER_VERSION: u32 = 1;

/// Handle to a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

struct Parameter {
    name: String,
    value: Tensor,
    grad: Tensor,
    trainable: bool,
    // Adam first/second moment estimates.
    m: Tensor,
    v: Tensor,
}

/// A set of named parameters with gradients and optimizer state.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a trainable parameter. Names must be unique within a store.
    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.add_with(name, value, true)
    }

    /// Register a non-trainable (frozen) parameter.
    pub fn add_frozen(&mut self, name: &str, value: Tensor) -> ParamId {
        self.add_with(name, value, false)
    }

    fn add_with(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let shape = value.shape().to_vec();
        let p = Parameter {
            name: name.to_string(),
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
            trainable,
        };
        self.params.push(p);
        let id = ParamId(self.params.len() - 1);
        self.by_name.insert(name.to_string(), id.0);
        id
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
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

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) {
        let p = &mut self.params[id.0];
        assert_eq!(p.grad.shape(), grad.shape(), "grad shape mismatch for {}", p.name);
        for (g, d) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *g += d;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    pub(super) fn step(&self) -> u64 {
        self.step
    }

    pub(super) fn advance_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    pub(super) fn adam_state_mut(&mut self, id: ParamId) -> (&mut Tensor, &mut Tensor, &mut Tensor, bool) {
        let p = &mut self.params[id.0];
        (&mut p.value, &mut p.m, &mut p.v, p.trainable)
    }

    /// Snapshot all values (for best-on-dev checkpointing).
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Restore values from a snapshot taken on the same store layout.
    pub fn restore(&mut self, snap: &[(String, Tensor)]) {
        assert_eq!(snap.len(), self.params.len(), "snapshot layout mismatch");
        for (p, (name, value)) in self.params.iter_mut().zip(snap) {
            assert_eq!(&p.name, name, "snapshot layout mismatch at {}", p.name);
            p.value = value.clone();
        }
    }
}

/// Uniform Xavier/Glorot initialization: ±sqrt(6 / (fan_in + fan_out)).
pub fn init_xavier(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let (fan_in, fan_out) = match shape {
        [n] => (*n, *n),
        [r, c] => (*c, *r),
        [f, r, c] => (r * c, *f),
        _ => panic!("init_xavier: unsupported rank {:?}", shape),
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Random orthogonal n×n matrix via QR of a Gaussian matrix, with the sign
/// convention that makes the factorization unique.
pub fn init_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let normal = StandardNormal;
    let a = nalgebra::DMatrix::from_fn(n, n, |_, _| -> f64 { normal.sample(rng) });
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let data = (0..n * n).map(|k| q[(k / n, k % n)]).collect();
    Tensor::matrix(n, n, data)
}

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a parameter container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0} (expected {CONTAINER_VERSION})")]
    Version(u32),
    #[error("malformed container at line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// Write the store as a versioned text container: one header line, then per
/// parameter a descriptor line and a data line of shortest-roundtrip floats.
pub fn save_params<W: Write>(store: &ParamStore, mut w: W) -> Result<(), ContainerError> {
    writeln!(w, "{CONTAINER_MAGIC} v{CONTAINER_VERSION}")?;
    writeln!(w, "count {}", store.params.len())?;
    for p in &store.params {
        write!(w, "param {} {} {}", p.name, u8::from(p.trainable), p.value.shape().len())?;
        for d in p.value.shape() {
            write!(w, " {d}")?;
        }
        writeln!(w)?;
        let mut first = true;
        for v in p.value.data() {
            if !first {
                write!(w, " ")?;
            }
            write!(w, "{v}")?;
            first = false;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Read a container written by [`save_params`].
pub fn load_params<R: BufRead>(r: R) -> Result<ParamStore, ContainerError> {
    let mut lines = r.lines().enumerate();
    let mut next = |expect: &str| -> Result<(usize, String), ContainerError> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((i, Err(e))) => Err(ContainerError::Malformed {
                line: i + 1,
                message: e.to_string(),
            }),
            None => Err(ContainerError::Malformed {
                line: 0,
                message: format!("unexpected end of file, wanted {expect}"),
            }),
        }
    };

    let (_, header) = next("header")?;
    let mut hp = header.split_whitespace();
    if hp.next() != Some(CONTAINER_MAGIC) {
        return Err(ContainerError::BadMagic);
    }
    let ver: u32 = hp
        .next()
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse().ok())
        .ok_or(ContainerError::BadMagic)?;
    if ver != CONTAINER_VERSION {
        return Err(ContainerError::Version(ver));
    }

    let (cl, count_line) = next("count")?;
    let count: usize = count_line
        .strip_prefix("count ")
        .and_then(|c| c.parse().ok())
        .ok_or(ContainerError::Malformed {
            line: cl,
            message: "expected `count <n>`".into(),
        })?;

    let mut store = ParamStore::new();
    for _ in 0..count {
        let (dl, desc) = next("param descriptor")?;
        let mut parts = desc.split_whitespace();
        let malformed = |message: &str| ContainerError::Malformed {
            line: dl,
            message: message.to_string(),
        };
        if parts.next() != Some("param") {
            return Err(malformed("expected `param`"));
        }
        let name = parts.next().ok_or_else(|| malformed("missing name"))?.to_string();
        let trainable = match parts.next() {
            Some("1") => true,
            Some("0") => false,
            _ => return Err(malformed("bad trainable flag")),
        };
        let rank: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| malformed("bad rank"))?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(
                parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| malformed("bad dimension"))?,
            );
        }
        let expected: usize = shape.iter().product();
        let (vl, values) = next("param data")?;
        let data: Result<Vec<f64>, _> = values.split_whitespace().map(|v| v.parse::<f64>()).collect();
        let data = data.map_err(|e| ContainerError::Malformed {
            line: vl,
            message: e.to_string(),
        })?;
        if data.len() != expected {
            return Err(ContainerError::Malformed {
                line: vl,
                message: format!("expected {expected} values, found {}", data.len()),
            });
        }
        store.add_with(&name, Tensor::new(shape, data), trainable);
    }
    Ok(store)
}
