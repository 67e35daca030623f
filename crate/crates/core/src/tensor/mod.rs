//! A small reverse-mode autodiff engine over 2-D arrays.
//!
//! Every value is an `ndarray::Array2`; vectors are `1 × n` rows and scalars
//! are `1 × 1`. A [`Graph`] records operations eagerly (values are computed
//! as ops are added) and [`Graph::backward`] walks the tape in reverse.
//! Parameters live in a [`ParamStore`] that the graph only borrows.

pub mod kernels;

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array2, ArrayView2, Axis};
use num_traits::{Float as NumFloat, FromPrimitive, NumCast};

use crate::error::{Error, Result};
use crate::vocab::TaskFilter;
pub use kernels::AttnLayout;

/// Element type of the engine: `f32` for training, `f64` for gradient checks.
pub trait Float:
    NumFloat
    + FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// In-place `exp` over a slice.
    fn exp_slice(xs: &mut [Self]);
}

impl Float for f32 {
    fn exp_slice(xs: &mut [f32]) {
        for x in xs {
            *x = fast_exp_f32(*x);
        }
    }
}

impl Float for f64 {
    fn exp_slice(xs: &mut [f64]) {
        for x in xs {
            *x = x.exp();
        }
    }
}

/// Branch-free single-precision `exp` (Cephes polynomial, ~1 ulp on the
/// clamped range) that the compiler can vectorize.
#[inline(always)]
fn fast_exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    let x = x.max(-87.0).min(88.0);
    let t = x * LOG2E + ROUND;
    let n = t - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5e-1;
    let y = p * r * r + r + 1.0;
    // The low mantissa bits of `t` hold `n`.
    let ni = t.to_bits().wrapping_sub(ROUND.to_bits());
    let scale = f32::from_bits(ni.wrapping_add(127) << 23);
    y * scale
}

#[inline]
pub fn cast<T: Float>(x: f64) -> T {
    <T as NumCast>::from(x).expect("finite cast")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of parameter matrices.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<T>)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Element-type conversion (e.g. `f32` weights into an `f64` store).
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| cast::<U>(x.to_f64().unwrap_or(f64::NAN))))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One supervised row in a fused cross-entropy op.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeItem {
    /// Row of the logits matrix.
    pub row: usize,
    /// Target token id (must belong to the filter).
    pub target: u32,
    pub weight: f64,
}

enum Op<T> {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<T>, rstd: Vec<T> },
    Rows { src: Var, idx: Vec<usize> },
    Regroup { src: Var, map: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, layout: AttnLayout, probs: Vec<Array2<T>> },
    CrossEntropy { logits: Var, ids: Vec<u32>, items: Vec<(usize, usize, T)>, probs: Vec<Vec<T>> },
    Sum(Vec<Var>),
}

struct Node<T> {
    value: Option<Array2<T>>,
    op: Op<T>,
}

/// Recording tape. Values are computed as ops are added.
pub struct Graph<'p, T: Float> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    record: bool,
}

/// Parameter gradients produced by [`Graph::backward`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Array2<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Array2<T>> {
        self.grads[id.0].as_mut()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Global L2 norm over all present gradients.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| {
                let v = x.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        let f = cast::<T>(factor);
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * f);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

fn accumulate<T: Float>(slot: &mut Option<Array2<T>>, delta: Array2<T>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph { params, nodes: Vec::new(), param_vars: vec![None; params.len()], record: true }
    }

    /// A graph for forward-only use: attention maps are not retained and
    /// [`Graph::backward`] must not be called.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Graph { record: false, ..Graph::new(params) }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    /// The node for a parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id.0) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Looks a parameter up by name.
    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name).ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
        Ok(self.param(id))
    }

    /// Number of graph nodes that read parameter `id` directly (0 or 1).
    pub fn param_node_count(&self, id: ParamId) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Param(p) if p == id.0)).count()
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(x), _) => x,
            (None, Op::Param(p)) => self.params.get(ParamId(*p)),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]].to_f64().unwrap_or(f64::NAN)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(self.value(b));
        self.push(y, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let y = self.value(a) + self.value(row);
        self.push(y, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = cast::<T>(factor);
        let y = self.value(a).mapv(|x| x * f);
        self.push(y, Op::Scale(a, f))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut y = self.value(a).to_owned();
        kernels::gelu_inplace(y.as_slice_mut().expect("standard layout"));
        self.push(y, Op::Gelu(a))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (y, xhat, rstd) =
            kernels::layer_norm(self.value(x).view(), self.value(gamma).view(), self.value(beta).view());
        self.push(y, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Row gather: output row `i` is `src[idx[i]]`. Used for embeddings.
    pub fn rows(&mut self, src: Var, idx: Vec<usize>) -> Var {
        let s = self.value(src);
        let y = s.select(Axis(0), &idx);
        self.push(y, Op::Rows { src, idx })
    }

    /// Element regroup: flat output element `i` is flat source element
    /// `map[i]` (both row-major). Used for patch extraction.
    pub fn regroup(&mut self, src: Var, map: Vec<usize>, shape: (usize, usize)) -> Var {
        assert_eq!(map.len(), shape.0 * shape.1);
        let s = self.value(src);
        let flat: Vec<T> = {
            let std = s.as_standard_layout();
            let data = std.as_slice().expect("standard layout");
            map.iter().map(|&j| data[j]).collect()
        };
        let y = Array2::from_shape_vec(shape, flat).expect("regroup shape");
        self.push(y, Op::Regroup { src, map })
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Var {
        let (y, probs) =
            kernels::attention_forward(self.value(q).view(), self.value(k).view(), self.value(v).view(), &layout, self.record);
        self.push(y, Op::Attention { q, k, v, layout, probs })
    }

    /// Weighted sum over `items` of `-log softmax_filter(logits[row])[target]`,
    /// where the softmax runs over the filter's ids only.
    pub fn cross_entropy(&mut self, logits: Var, filter: &TaskFilter, items: &[CeItem]) -> Result<Var> {
        let z = self.value(logits);
        let ids = filter.ids().to_vec();
        let mut total = 0.0f64;
        let mut cached = Vec::with_capacity(items.len());
        let mut probs = Vec::with_capacity(items.len());
        for item in items {
            let local = filter.local_index(item.target).ok_or(Error::TargetOutsideFilter {
                token: item.target,
                task: filter.task().name(),
            })?;
            let row = z.row(item.row);
            let max = ids.iter().map(|&i| row[i as usize]).fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
            let mut p: Vec<T> = ids.iter().map(|&i| (row[i as usize] - max).exp()).collect();
            let sum: T = p.iter().copied().sum();
            for x in &mut p {
                *x /= sum;
            }
            let lse = max.to_f64().unwrap_or(f64::NAN) + sum.to_f64().unwrap_or(f64::NAN).ln();
            let zt = row[item.target as usize].to_f64().unwrap_or(f64::NAN);
            total += item.weight * (lse - zt);
            cached.push((item.row, local, cast::<T>(item.weight)));
            probs.push(p);
        }
        let y = Array2::from_elem((1, 1), cast::<T>(total));
        Ok(self.push(y, Op::CrossEntropy { logits, ids, items: cached, probs }))
    }

    /// Sum of `1 × 1` scalars.
    pub fn sum(&mut self, terms: &[Var]) -> Var {
        let mut acc = T::zero();
        for &t in terms {
            acc += self.value(t)[[0, 0]];
        }
        self.push(Array2::from_elem((1, 1), acc), Op::Sum(terms.to_vec()))
    }

    /// Reverse pass from a scalar node. Returns gradients for every
    /// parameter that the scalar depends on.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert!(self.record, "backward on an inference graph");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));
        let mut out = Gradients { grads: vec![None; self.params.len()] };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Param(p) => out.grads[*p] = Some(g),
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[row.0], dr);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    accumulate(&mut grads[a.0], g.mapv(|x| x * f));
                }
                Op::Gelu(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |d, &x| *d *= kernels::gelu_grad(x));
                    accumulate(&mut grads[a.0], d);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let (dx, dg, db) =
                        kernels::layer_norm_backward(g.view(), xhat.view(), rstd, self.value(*gamma).view());
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[gamma.0], dg);
                    accumulate(&mut grads[beta.0], db);
                }
                Op::Rows { src, idx } => {
                    let mut d = Array2::<T>::zeros(self.value(*src).raw_dim());
                    for (r, &j) in idx.iter().enumerate() {
                        let mut dst = d.row_mut(j);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads[src.0], d);
                }
                Op::Regroup { src, map } => {
                    let shape = self.value(*src).raw_dim();
                    let mut d = Array2::<T>::zeros(shape);
                    {
                        let data = d.as_slice_mut().expect("standard layout");
                        let gs = g.as_standard_layout();
                        for (gi, &j) in gs.iter().zip(map) {
                            data[j] += *gi;
                        }
                    }
                    accumulate(&mut grads[src.0], d);
                }
                Op::Attention { q, k, v, layout, probs } => {
                    let (dq, dk, dv) = kernels::attention_backward(
                        g.view(),
                        self.value(*q).view(),
                        self.value(*k).view(),
                        self.value(*v).view(),
                        probs,
                        layout,
                    );
                    accumulate(&mut grads[q.0], dq);
                    accumulate(&mut grads[k.0], dk);
                    accumulate(&mut grads[v.0], dv);
                }
                Op::CrossEntropy { logits, ids, items, probs } => {
                    let scale = g[[0, 0]];
                    let mut d = Array2::<T>::zeros(self.value(*logits).raw_dim());
                    for (&(row, local, w), p) in items.iter().zip(probs) {
                        let f = scale * w;
                        let mut drow = d.row_mut(row);
                        for (j, (&id, &pj)) in ids.iter().zip(p).enumerate() {
                            let delta = if j == local { pj - T::one() } else { pj };
                            drow[id as usize] += f * delta;
                        }
                    }
                    accumulate(&mut grads[logits.0], d);
                }
                Op::Sum(terms) => {
                    for t in terms {
                        accumulate(&mut grads[t.0], g.clone());
                    }
                }
            }
        }
        out
    }
}

/// Borrowing helper for eager code: the value of a named parameter.
pub fn param_view<'a, T: Float>(store: &'a ParamStore<T>, name: &str) -> Result<ArrayView2<'a, T>> {
    store.by_name(name).map(|a| a.view()).ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))
}
