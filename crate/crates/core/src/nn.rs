//! A small tape-based reverse-mode autodiff over row-major matrices, with
//! the handful of layers the enhancement model needs and an Adam optimizer.
//!
//! Activations are `rows x features` matrices: one row per STFT frame, or a
//! single row for pooled embeddings. Parameters live in a [`ParamStore`]
//! outside the tape; a fresh [`Graph`] is recorded for every forward pass and
//! [`Graph::backward`] accumulates into the store's gradient buffers.

use std::collections::HashMap;

use ndarray::{Array2, Axis, NdFloat};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// A parameter with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    pub value: Array2<T>,
    pub grad: Array2<T>,
    pub requires_grad: bool,
}

impl<T: NdFloat> Tensor<T> {
    pub fn new(value: Array2<T>, requires_grad: bool) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self {
            value,
            grad,
            requires_grad,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }
}

/// Named parameter tensors, kept in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: NdFloat> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(Tensor::new(value, true));
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<T> {
        &self.tensors[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array2<T> {
        &self.tensors[id.0].grad
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        self.tensors[id.0].requires_grad = flag;
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(T::zero());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    /// Same structure, values converted to another float type.
    pub fn cast<U: NdFloat>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            let id = out.add(name, t.value.mapv(|v| U::from(v).expect("float cast")));
            out.set_requires_grad(id, t.requires_grad);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// U(-sqrt(6 / fan_in), +sqrt(6 / fan_in)), for layers feeding a ReLU.
    HeUniform,
    /// U(-sqrt(6 / (fan_in + fan_out)), ...), for the sigmoid head.
    GlorotUniform,
    Zeros,
}

/// `y = x W^T + b` with `W` stored as `out x in`.
#[derive(Debug, Clone, Copy)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn new<T: NdFloat, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let limit = match init {
            Init::HeUniform => (6.0 / in_dim as f64).sqrt(),
            Init::GlorotUniform => (6.0 / (in_dim + out_dim) as f64).sqrt(),
            Init::Zeros => 0.0,
        };
        let weight = Array2::from_shape_fn((out_dim, in_dim), |_| {
            let u = if limit > 0.0 {
                rng.random_range(-limit..limit)
            } else {
                0.0
            };
            T::from(u).expect("float cast")
        });
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Rebinds a layer to parameters already present in `store`.
    pub fn lookup<T: NdFloat>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        let find = |suffix: &str| {
            let full = format!("{name}.{suffix}");
            store
                .id(&full)
                .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter {full}")))
        };
        let weight = find("weight")?;
        let bias = find("bias")?;
        let (out_dim, in_dim) = store.value(weight).dim();
        if store.value(bias).dim() != (1, out_dim) {
            return Err(Error::ShapeMismatch(format!("bias of {name} does not match its weight")));
        }
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: NdFloat>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        g.dense(store, self, x)
    }
}

/// `out = h + fc2(relu(fc1(relu(u))))`, where `u = proj([h, cond])` when a
/// conditioning projection is present and `u = h` otherwise.
#[derive(Debug, Clone, Copy)]
pub struct ResidualBlock {
    pub cond_proj: Option<DenseLayer>,
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
}

impl ResidualBlock {
    pub fn new<T: NdFloat, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        cond_dim: usize,
        rng: &mut R,
    ) -> Self {
        let cond_proj = (cond_dim > 0).then(|| {
            DenseLayer::new(store, &format!("{name}.cond"), hidden + cond_dim, hidden, Init::HeUniform, rng)
        });
        let fc1 = DenseLayer::new(store, &format!("{name}.fc1"), hidden, hidden, Init::HeUniform, rng);
        let fc2 = DenseLayer::new(store, &format!("{name}.fc2"), hidden, hidden, Init::HeUniform, rng);
        Self { cond_proj, fc1, fc2 }
    }

    pub fn lookup<T: NdFloat>(store: &ParamStore<T>, name: &str, conditioned: bool) -> Result<Self> {
        let cond_proj = if conditioned {
            Some(DenseLayer::lookup(store, &format!("{name}.cond"))?)
        } else {
            None
        };
        Ok(Self {
            cond_proj,
            fc1: DenseLayer::lookup(store, &format!("{name}.fc1"))?,
            fc2: DenseLayer::lookup(store, &format!("{name}.fc2"))?,
        })
    }

    /// `cond` must be a single row; it is repeated for every row of `h`.
    pub fn forward<T: NdFloat>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: Var,
        cond: Option<Var>,
    ) -> Result<Var> {
        let u = match (&self.cond_proj, cond) {
            (Some(proj), Some(c)) => {
                let rows = g.value(h).nrows();
                let c = g.broadcast_rows(c, rows)?;
                let joined = g.concat(&[h, c])?;
                let p = proj.forward(g, store, joined)?;
                g.relu(p)
            }
            (None, None) => g.relu(h),
            (Some(_), None) => {
                return Err(Error::ShapeMismatch("conditioned block called without conditioning".into()))
            }
            (None, Some(_)) => {
                return Err(Error::ShapeMismatch("unconditioned block given a conditioning vector".into()))
            }
        };
        let a = self.fc1.forward(g, store, u)?;
        let a = g.relu(a);
        let b = self.fc2.forward(g, store, a)?;
        g.add(h, b)
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Dense { x: Var, weight: ParamId, bias: ParamId },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Array2<T>),
    Scale(Var, T),
    Concat(Vec<Var>),
    BroadcastRows(Var),
    MeanRows(Var),
    Sum(Var),
    Mse(Var, Array2<T>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recorded forward computation.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn same_shape<T>(a: &Array2<T>, b: &Array2<T>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

impl<T: NdFloat> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn dense(&mut self, store: &ParamStore<T>, layer: &DenseLayer, x: Var) -> Result<Var> {
        let w = store.value(layer.weight);
        let b = store.value(layer.bias);
        let xv = self.value(x);
        if xv.ncols() != w.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "dense input has {} features, layer expects {}",
                xv.ncols(),
                w.ncols()
            )));
        }
        let y = xv.dot(&w.t()) + b;
        let needs = self.needs(x)
            || store.tensor(layer.weight).requires_grad
            || store.tensor(layer.bias).requires_grad;
        Ok(self.push(
            y,
            Op::Dense {
                x,
                weight: layer.weight,
                bias: layer.bias,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(y, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| T::one() / (T::one() + (-v).exp()));
        let needs = self.needs(x);
        self.push(y, Op::Sigmoid(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let y = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let y = self.value(a) * self.value(b);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Mul(a, b), needs))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, x: Var, c: Array2<T>) -> Result<Var> {
        same_shape(self.value(x), &c, "mul_const")?;
        let y = self.value(x) * &c;
        let needs = self.needs(x);
        Ok(self.push(y, Op::MulConst(x, c), needs))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x) * s;
        let needs = self.needs(x);
        self.push(y, Op::Scale(x, s), needs)
    }

    /// Column-wise concatenation of equally tall matrices.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
        let rows = self.value(*first).nrows();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).nrows() != rows) {
            return Err(Error::ShapeMismatch(format!(
                "concat rows {} vs {}",
                rows,
                self.value(*bad).nrows()
            )));
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        let needs = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(y, Op::Concat(parts.to_vec()), needs))
    }

    /// Repeats a single row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.nrows() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "broadcast_rows expects one row, got {}",
                xv.nrows()
            )));
        }
        let y = xv
            .broadcast((rows, xv.ncols()))
            .expect("single row broadcasts")
            .to_owned();
        let needs = self.needs(x);
        Ok(self.push(y, Op::BroadcastRows(x), needs))
    }

    /// Mean over rows (frames), giving a single row.
    pub fn mean_pool_frames(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.nrows() == 0 {
            return Err(Error::ShapeMismatch("mean over zero frames".into()));
        }
        let inv = T::one() / T::from(xv.nrows()).expect("row count fits");
        let y = (xv.sum_axis(Axis(0)) * inv).insert_axis(Axis(0));
        let needs = self.needs(x);
        Ok(self.push(y, Op::MeanRows(x), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Array2::from_elem((1, 1), self.value(x).sum());
        let needs = self.needs(x);
        self.push(y, Op::Sum(x), needs)
    }

    /// Mean squared error against a constant target, as a 1x1 value.
    pub fn mse(&mut self, x: Var, target: Array2<T>) -> Result<Var> {
        same_shape(self.value(x), &target, "mse")?;
        let diff = self.value(x) - &target;
        let n = T::from(diff.len().max(1)).expect("float cast");
        let y = Array2::from_elem((1, 1), diff.mapv(|d| d * d).sum() / n);
        let needs = self.needs(x);
        Ok(self.push(y, Op::Mse(x, target), needs))
    }

    /// Back-propagates from a scalar, adding into the gradients of every
    /// trainable parameter in `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let (r, c) = self.value(loss).dim();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss(r, c));
        }
        let mut grads: Vec<Option<Array2<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn accumulate<T: NdFloat>(slot: &mut Option<Array2<T>>, g: Array2<T>) {
            match slot {
                Some(acc) => *acc += &g,
                None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Dense { x, weight, bias } => {
                    if store.tensor(*weight).requires_grad {
                        let dw = g.t().dot(self.value(*x));
                        store.tensor_mut(*weight).grad += &dw;
                    }
                    if store.tensor(*bias).requires_grad {
                        let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        store.tensor_mut(*bias).grad += &db;
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], g.dot(store.value(*weight)));
                    }
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    dx.zip_mut_with(self.value(*x), |d, &v| {
                        if v <= T::zero() {
                            *d = T::zero()
                        }
                    });
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = g;
                    dx.zip_mut_with(&node.value, |d, &y| *d = *d * y * (T::one() - y));
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], &g * self.value(*a));
                    }
                }
                Op::MulConst(x, c) => accumulate(&mut grads[x.0], g * c),
                Op::Scale(x, s) => accumulate(&mut grads[x.0], g * *s),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let width = self.value(*p).ncols();
                        if self.needs(*p) {
                            let piece = g.slice(ndarray::s![.., offset..offset + width]).to_owned();
                            accumulate(&mut grads[p.0], piece);
                        }
                        offset += width;
                    }
                }
                Op::BroadcastRows(x) => {
                    accumulate(&mut grads[x.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::MeanRows(x) => {
                    let rows = self.value(*x).nrows();
                    let scale = T::one() / T::from(rows).expect("float cast");
                    let dx = g
                        .broadcast(self.value(*x).raw_dim())
                        .expect("single row broadcasts")
                        .mapv(|v| v * scale);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Sum(x) => {
                    let dx = Array2::from_elem(self.value(*x).raw_dim(), g[[0, 0]]);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Mse(x, target) => {
                    let xv = self.value(*x);
                    let n = T::from(xv.len().max(1)).expect("float cast");
                    let k = g[[0, 0]] * (T::one() + T::one()) / n;
                    accumulate(&mut grads[x.0], (xv - target) * k);
                }
            }
        }
        Ok(())
    }
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Array2<T>>,
    pub second: Vec<Array2<T>>,
}

impl<T: NdFloat> AdamState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, t)| Array2::zeros(t.value.raw_dim())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Applies one bias-corrected Adam update to every trainable parameter,
    /// then clears all gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.first.len() != store.len()
            || self.second.len() != store.len()
            || store
                .iter()
                .zip(&self.first)
                .any(|((_, t), m)| t.value.dim() != m.dim())
        {
            return Err(Error::UninitializedOptimizer);
        }
        self.step += 1;
        let c = self.config;
        let cast = |v: f64| T::from(v).expect("float cast");
        let (b1, b2) = (cast(c.beta1), cast(c.beta2));
        let one = T::one();
        let bias1 = one - cast(c.beta1.powi(self.step as i32));
        let bias2 = one - cast(c.beta2.powi(self.step as i32));
        let lr = cast(c.lr);
        let eps = cast(c.eps);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let tensor = store.tensor_mut(id);
            if !tensor.requires_grad {
                continue;
            }
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            ndarray::Zip::from(&mut tensor.value)
                .and(&tensor.grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        store.zero_grad();
        Ok(())
    }
}

/// Largest disagreement between analytic and numeric gradients of one
/// parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Entries whose step-`h` difference crossed a kink but whose smaller
    /// steps agreed with the analytic gradient.
    pub kinks: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<ParamGradError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_error))
    }

    pub fn kinks(&self) -> usize {
        self.entries.iter().map(|e| e.kinks).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

/// Magnitude below which gradients are compared absolutely rather than
/// relatively.
pub const GRAD_CHECK_FLOOR: f64 = 1e-7;

fn compare(numeric: f64, exact: f64) -> (f64, f64) {
    let abs = (numeric - exact).abs();
    (abs, abs / numeric.abs().max(exact.abs()).max(GRAD_CHECK_FLOOR))
}

/// Compares back-propagated gradients with central differences of step `h`
/// for every entry of every trainable parameter. An entry that fails at `h`
/// is rechecked at `h/10` and `h/100` and counted as a kink if both agree.
/// Frozen parameters are left out of the report. `loss_fn` must be
/// deterministic.
pub fn gradient_check<T, F>(
    store: &mut ParamStore<T>,
    loss_fn: F,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    T: NdFloat,
    F: Fn(&ParamStore<T>) -> Result<(Graph<T>, Var)>,
{
    store.zero_grad();
    let (graph, loss) = loss_fn(store)?;
    graph.backward(loss, store)?;
    let analytic: Vec<Array2<T>> = store.iter().map(|(_, t)| t.grad.clone()).collect();
    store.zero_grad();

    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let (g, l) = loss_fn(s)?;
        Ok(g.value(l)[[0, 0]].to_f64().expect("finite loss"))
    };
    let step = T::from(h).expect("float cast");
    let mut entries = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        if !store.tensor(id).requires_grad {
            continue;
        }
        let (rows, cols) = store.tensor(id).shape();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut kinks = 0;
        for r in 0..rows {
            for c in 0..cols {
                let orig = store.value(id)[[r, c]];
                store.tensor_mut(id).value[[r, c]] = orig + step;
                let plus = eval(store)?;
                store.tensor_mut(id).value[[r, c]] = orig - step;
                let minus = eval(store)?;
                store.tensor_mut(id).value[[r, c]] = orig;
                let exact = analytic[id.0][[r, c]].to_f64().expect("finite grad");
                let (mut abs, mut rel) = compare((plus - minus) / (2.0 * h), exact);
                if rel > tolerance {
                    // a step that straddles a ReLU kink is not a valid oracle;
                    // accept the entry only if every smaller step agrees
                    let mut smooth = true;
                    for k in [10.0, 100.0] {
                        let small = h / k;
                        store.tensor_mut(id).value[[r, c]] = orig + T::from(small).expect("float cast");
                        let plus = eval(store)?;
                        store.tensor_mut(id).value[[r, c]] = orig - T::from(small).expect("float cast");
                        let minus = eval(store)?;
                        store.tensor_mut(id).value[[r, c]] = orig;
                        smooth &= compare((plus - minus) / (2.0 * small), exact).1 <= tolerance;
                    }
                    if smooth {
                        kinks += 1;
                        (abs, rel) = (0.0, 0.0);
                    }
                }
                max_abs = max_abs.max(abs);
                max_rel = max_rel.max(rel);
            }
        }
        entries.push(ParamGradError {
            name: store.name(id).to_string(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            checked: rows * cols,
            kinks,
        });
    }
    Ok(GradCheckReport { entries, tolerance })
}
