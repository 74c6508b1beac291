//! Minimal reverse-mode autodiff over dense `f64` tensors.
//!
//! Tensors are immutable handles (`Rc`) onto row-major buffers. Operations
//! record their parents so `backward` can push gradients from a scalar loss
//! into every trainable leaf. Everything is single-threaded and evaluated in
//! a fixed order, so results are bitwise reproducible.
//!
//! Only the primitives the model needs are implemented: elementwise ops,
//! (batched) matmul, permute/reshape/concat, gathers (embedding lookup and
//! im2col index maps), softmax, layer norm and GELU.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run a closure with gradient recording disabled. Ops executed inside
/// produce plain leaves, so no graph is built (used for sampling and frozen
/// encoders).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

type BackFn = Box<dyn Fn(&Inner, &[f64])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    trainable: Cell<bool>,
    parents: Vec<Tensor>,
    backward: Option<BackFn>,
    requires: bool,
}

/// Handle onto a tensor value (cloning is cheap and aliases the storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("trainable", &self.inner.trainable.get())
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(data: Vec<f64>, shape: Vec<usize>, trainable: bool) -> Tensor {
        assert_eq!(data.len(), numel_of(&shape), "data/shape mismatch");
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                trainable: Cell::new(trainable),
                parents: Vec::new(),
                backward: None,
                requires: false,
            }),
        }
    }

    /// Non-trainable leaf tensor.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::leaf(data, shape.to_vec(), false)
    }

    /// Trainable leaf (parameter).
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::leaf(data, shape.to_vec(), true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(vec![0.0; numel_of(shape)], shape)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::new(vec![value; numel_of(shape)], shape)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(vec![value], &[])
    }

    fn op(data: Vec<f64>, shape: Vec<usize>, parents: Vec<Tensor>, back: BackFn) -> Tensor {
        let enabled = GRAD_ENABLED.with(|g| g.get());
        let requires = enabled && parents.iter().any(|p| p.requires_grad());
        if !requires {
            return Tensor::leaf(data, shape, false);
        }
        assert_eq!(data.len(), numel_of(&shape), "data/shape mismatch");
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                trainable: Cell::new(false),
                parents,
                backward: Some(back),
                requires: true,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.parents.is_empty()
    }

    pub fn is_trainable(&self) -> bool {
        self.inner.trainable.get()
    }

    pub fn set_trainable(&self, trainable: bool) {
        assert!(self.is_leaf(), "only leaves can be marked trainable");
        self.inner.trainable.set(trainable);
    }

    pub fn requires_grad(&self) -> bool {
        if self.is_leaf() {
            self.inner.trainable.get()
        } else {
            self.inner.requires
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on non-scalar");
        d[0]
    }

    /// Read access to the raw buffer.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.data.borrow())
    }

    /// Mutate a leaf's buffer in place (parameter updates).
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        assert!(self.is_leaf(), "cannot mutate an op output in place");
        f(&mut self.inner.data.borrow_mut())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Fresh leaf with a copy of this tensor's values.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.to_vec(), &self.inner.shape.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    fn accum(&self, g: &[f64]) {
        if !self.requires_grad() {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Backpropagate from a scalar node into every trainable leaf reachable
    /// through gradient-requiring edges.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() requires a scalar");
        assert!(self.requires_grad(), "backward() on a graph without trainable leaves");

        // Topological order over the requires-grad subgraph.
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.inner.id) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.inner.parents {
                if p.requires_grad() && !seen.contains(&p.inner.id) {
                    stack.push((p.clone(), false));
                }
            }
        }

        self.accum(&[1.0]);
        for node in order.iter().rev() {
            let grad = node.inner.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            if let Some(back) = &node.inner.backward {
                back(&node.inner, &grad);
                // Intermediate grads are no longer needed once pushed down.
                *node.inner.grad.borrow_mut() = None;
            }
        }
    }

    // ----- elementwise -----

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let a = self.inner.data.borrow();
        let b = other.inner.data.borrow();
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        drop(a);
        drop(b);
        let shape = self.inner.shape.clone();
        Tensor::op(
            out,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(|node, g| {
                node.parents[0].accum(g);
                node.parents[1].accum(g);
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let a = self.inner.data.borrow();
        let b = other.inner.data.borrow();
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
        drop(a);
        drop(b);
        let shape = self.inner.shape.clone();
        Tensor::op(
            out,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(|node, g| {
                node.parents[0].accum(g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                node.parents[1].accum(&neg);
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let a = self.inner.data.borrow();
        let b = other.inner.data.borrow();
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        drop(a);
        drop(b);
        let shape = self.inner.shape.clone();
        Tensor::op(
            out,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(|node, g| {
                let a = node.parents[0].inner.data.borrow();
                let b = node.parents[1].inner.data.borrow();
                let ga: Vec<f64> = g.iter().zip(b.iter()).map(|(gi, y)| gi * y).collect();
                let gb: Vec<f64> = g.iter().zip(a.iter()).map(|(gi, x)| gi * x).collect();
                drop(a);
                drop(b);
                node.parents[0].accum(&ga);
                node.parents[1].accum(&gb);
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.inner.data.borrow().iter().map(|x| x * c).collect();
        let shape = self.inner.shape.clone();
        Tensor::op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |node, g| {
                let gs: Vec<f64> = g.iter().map(|v| v * c).collect();
                node.parents[0].accum(&gs);
            }),
        )
    }

    /// Add `other` broadcast against `self`. `other` must have the same rank
    /// with each dimension equal to self's or 1.
    pub fn add_bc(&self, other: &Tensor) -> Tensor {
        let sa = self.shape().to_vec();
        let sb = other.shape().to_vec();
        assert_eq!(sa.len(), sb.len(), "add_bc: rank mismatch");
        for (da, db) in sa.iter().zip(sb.iter()) {
            assert!(db == da || *db == 1, "add_bc: dim {db} not broadcastable to {da}");
        }
        let b_strides = broadcast_strides(&sa, &sb);
        let a = self.inner.data.borrow();
        let b = other.inner.data.borrow();
        let mut out = vec![0.0; a.len()];
        let mut idx = vec![0usize; sa.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let mut bo = 0usize;
            for (d, s) in idx.iter().zip(&b_strides) {
                bo += d * s;
            }
            *o = a[i] + b[bo];
            bump_index(&mut idx, &sa);
        }
        drop(a);
        drop(b);
        let shape = sa.clone();
        Tensor::op(
            out,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(move |node, g| {
                node.parents[0].accum(g);
                if node.parents[1].requires_grad() {
                    let mut gb = vec![0.0; node.parents[1].numel()];
                    let mut idx = vec![0usize; sa.len()];
                    for gi in g {
                        let mut bo = 0usize;
                        for (d, s) in idx.iter().zip(&b_strides) {
                            bo += d * s;
                        }
                        gb[bo] += gi;
                        bump_index(&mut idx, &sa);
                    }
                    node.parents[1].accum(&gb);
                }
            }),
        )
    }

    pub fn gelu(&self) -> Tensor {
        let out: Vec<f64> = self.inner.data.borrow().iter().map(|&x| gelu_exact(x)).collect();
        let shape = self.inner.shape.clone();
        Tensor::op(
            out,
            shape,
            vec![self.clone()],
            Box::new(|node, g| {
                let x = node.parents[0].inner.data.borrow();
                let gx: Vec<f64> = g.iter().zip(x.iter()).map(|(gi, &xi)| gi * gelu_grad(xi)).collect();
                drop(x);
                node.parents[0].accum(&gx);
            }),
        )
    }

    // ----- reductions -----

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.inner.data.borrow().iter().sum();
        Tensor::op(
            vec![s],
            vec![],
            vec![self.clone()],
            Box::new(|node, g| {
                let gi = g[0];
                let gs = vec![gi; node.parents[0].numel()];
                node.parents[0].accum(&gs);
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        let s: f64 = self.inner.data.borrow().iter().sum();
        Tensor::op(
            vec![s / n],
            vec![],
            vec![self.clone()],
            Box::new(move |node, g| {
                let gi = g[0] / n;
                let gs = vec![gi; node.parents[0].numel()];
                node.parents[0].accum(&gs);
            }),
        )
    }

    // ----- shape manipulation -----

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(numel_of(shape), self.numel(), "reshape: element count mismatch");
        let out = self.to_vec();
        Tensor::op(
            out,
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|node, g| node.parents[0].accum(g)),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let shape = self.shape().to_vec();
        assert_eq!(axes.len(), shape.len(), "permute: axes rank mismatch");
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = self.inner.data.borrow();
        let out = permute_kernel(&data, &shape, axes);
        drop(data);
        let axes_owned = axes.to_vec();
        Tensor::op(
            out,
            out_shape.clone(),
            vec![self.clone()],
            Box::new(move |node, g| {
                let inv = inverse_axes(&axes_owned);
                let gp = permute_kernel(g, &out_shape, &inv);
                node.parents[0].accum(&gp);
            }),
        )
    }

    pub fn concat(axis: usize, parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let rank = parts[0].shape().len();
        assert!(axis < rank);
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        for p in parts {
            assert_eq!(p.shape().len(), rank, "concat: rank mismatch");
            for (d, (a, b)) in p.shape().iter().zip(out_shape.iter()).enumerate() {
                assert!(d == axis || a == b, "concat: non-axis dims must match");
            }
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total_axis = out_shape[axis];
        let mut out = vec![0.0; outer * total_axis * inner];
        let mut offset = 0usize;
        for p in parts {
            let pa = p.shape()[axis];
            let data = p.inner.data.borrow();
            for o in 0..outer {
                let src = &data[o * pa * inner..(o + 1) * pa * inner];
                let dst_start = o * total_axis * inner + offset * inner;
                out[dst_start..dst_start + pa * inner].copy_from_slice(src);
            }
            offset += pa;
        }
        let parents: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let part_sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Tensor::op(
            out,
            out_shape,
            parents,
            Box::new(move |node, g| {
                let mut offset = 0usize;
                for (pi, &pa) in part_sizes.iter().enumerate() {
                    let mut gp = vec![0.0; outer * pa * inner];
                    for o in 0..outer {
                        let src_start = o * total_axis * inner + offset * inner;
                        gp[o * pa * inner..(o + 1) * pa * inner]
                            .copy_from_slice(&g[src_start..src_start + pa * inner]);
                    }
                    node.parents[pi].accum(&gp);
                    offset += pa;
                }
            }),
        )
    }

    // ----- gathers -----

    /// Row lookup into a `(rows, dim)` table (embedding lookup). Gradients
    /// scatter-add back into the looked-up rows.
    pub fn gather_rows(&self, ids: &[usize]) -> Tensor {
        assert_eq!(self.shape().len(), 2, "gather_rows: table must be 2-D");
        let rows = self.shape()[0];
        let dim = self.shape()[1];
        for &id in ids {
            assert!(id < rows, "gather_rows: id {id} out of range {rows}");
        }
        let table = self.inner.data.borrow();
        let mut out = vec![0.0; ids.len() * dim];
        for (i, &id) in ids.iter().enumerate() {
            out[i * dim..(i + 1) * dim].copy_from_slice(&table[id * dim..(id + 1) * dim]);
        }
        drop(table);
        let ids_owned: Vec<usize> = ids.to_vec();
        let n = ids_owned.len();
        Tensor::op(
            out,
            vec![n, dim],
            vec![self.clone()],
            Box::new(move |node, g| {
                let mut gt = vec![0.0; rows * dim];
                for (i, &id) in ids_owned.iter().enumerate() {
                    for d in 0..dim {
                        gt[id * dim + d] += g[i * dim + d];
                    }
                }
                node.parents[0].accum(&gt);
            }),
        )
    }

    /// Generic gather through a precomputed index map: `out[i] = x[map[i]]`,
    /// with `-1` producing zero (used for padded im2col). Backward
    /// scatter-adds.
    pub fn gather_map(&self, map: Rc<Vec<i64>>, out_shape: &[usize]) -> Tensor {
        assert_eq!(map.len(), numel_of(out_shape), "gather_map: map/shape mismatch");
        let x = self.inner.data.borrow();
        let out: Vec<f64> = map.iter().map(|&m| if m >= 0 { x[m as usize] } else { 0.0 }).collect();
        drop(x);
        let in_len = self.numel();
        let map_b = Rc::clone(&map);
        Tensor::op(
            out,
            out_shape.to_vec(),
            vec![self.clone()],
            Box::new(move |node, g| {
                let mut gx = vec![0.0; in_len];
                for (gi, &m) in g.iter().zip(map_b.iter()) {
                    if m >= 0 {
                        gx[m as usize] += gi;
                    }
                }
                node.parents[0].accum(&gx);
            }),
        )
    }

    // ----- linear algebra -----

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 2, "matmul: lhs must be 2-D");
        assert_eq!(rhs.shape().len(), 2, "matmul: rhs must be 2-D");
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (rhs.shape()[0], rhs.shape()[1]);
        assert_eq!(k, k2, "matmul: inner dims differ");
        let a = self.inner.data.borrow();
        let b = rhs.inner.data.borrow();
        let out = mm_nn(&a, &b, m, k, n);
        drop(a);
        drop(b);
        Tensor::op(
            out,
            vec![m, n],
            vec![self.clone(), rhs.clone()],
            Box::new(move |node, g| {
                if node.parents[0].requires_grad() {
                    let b = node.parents[1].inner.data.borrow();
                    let ga = mm_nt(g, &b, m, n, k);
                    drop(b);
                    node.parents[0].accum(&ga);
                }
                if node.parents[1].requires_grad() {
                    let a = node.parents[0].inner.data.borrow();
                    let gb = mm_tn(&a, g, m, k, n);
                    drop(a);
                    node.parents[1].accum(&gb);
                }
            }),
        )
    }

    /// Batched matmul: `(b, m, k) x (b, k, n) -> (b, m, n)`.
    pub fn bmm(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 3, "bmm: lhs must be 3-D");
        assert_eq!(rhs.shape().len(), 3, "bmm: rhs must be 3-D");
        let (bsz, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (b2, k2, n) = (rhs.shape()[0], rhs.shape()[1], rhs.shape()[2]);
        assert_eq!(bsz, b2, "bmm: batch dims differ");
        assert_eq!(k, k2, "bmm: inner dims differ");
        let a = self.inner.data.borrow();
        let b = rhs.inner.data.borrow();
        let mut out = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            let o = mm_nn(&a[i * m * k..(i + 1) * m * k], &b[i * k * n..(i + 1) * k * n], m, k, n);
            out[i * m * n..(i + 1) * m * n].copy_from_slice(&o);
        }
        drop(a);
        drop(b);
        Tensor::op(
            out,
            vec![bsz, m, n],
            vec![self.clone(), rhs.clone()],
            Box::new(move |node, g| {
                if node.parents[0].requires_grad() {
                    let b = node.parents[1].inner.data.borrow();
                    let mut ga = vec![0.0; bsz * m * k];
                    for i in 0..bsz {
                        let gi = mm_nt(&g[i * m * n..(i + 1) * m * n], &b[i * k * n..(i + 1) * k * n], m, n, k);
                        ga[i * m * k..(i + 1) * m * k].copy_from_slice(&gi);
                    }
                    drop(b);
                    node.parents[0].accum(&ga);
                }
                if node.parents[1].requires_grad() {
                    let a = node.parents[0].inner.data.borrow();
                    let mut gb = vec![0.0; bsz * k * n];
                    for i in 0..bsz {
                        let gi = mm_tn(&a[i * m * k..(i + 1) * m * k], &g[i * m * n..(i + 1) * m * n], m, k, n);
                        gb[i * k * n..(i + 1) * k * n].copy_from_slice(&gi);
                    }
                    drop(a);
                    node.parents[1].accum(&gb);
                }
            }),
        )
    }

    // ----- normalization and attention pieces -----

    pub fn softmax_last(&self) -> Tensor {
        let shape = self.shape().to_vec();
        let cols = *shape.last().expect("softmax_last: rank >= 1");
        let rows = self.numel() / cols;
        let x = self.inner.data.borrow();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mx).exp();
                sum += *o;
            }
            for o in out[r * cols..(r + 1) * cols].iter_mut() {
                *o /= sum;
            }
        }
        drop(x);
        Tensor::op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |node, g| {
                let y = node.data.borrow();
                let mut gx = vec![0.0; y.len()];
                for r in 0..rows {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(gs).map(|(yi, gi)| yi * gi).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = ys[c] * (gs[c] - dot);
                    }
                }
                drop(y);
                node.parents[0].accum(&gx);
            }),
        )
    }

    /// Layer norm over the last dimension with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let shape = self.shape().to_vec();
        let cols = *shape.last().expect("layer_norm: rank >= 1");
        assert_eq!(gamma.shape(), &[cols], "layer_norm: gamma shape");
        assert_eq!(beta.shape(), &[cols], "layer_norm: beta shape");
        let rows = self.numel() / cols;
        let x = self.inner.data.borrow();
        let gm = gamma.inner.data.borrow();
        let bt = beta.inner.data.borrow();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * inv * gm[c] + bt[c];
            }
        }
        drop(x);
        drop(gm);
        drop(bt);
        Tensor::op(
            out,
            shape,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |node, g| {
                let x = node.parents[0].inner.data.borrow();
                let gm = node.parents[1].inner.data.borrow();
                let mut gx = vec![0.0; x.len()];
                let mut ggamma = vec![0.0; cols];
                let mut gbeta = vec![0.0; cols];
                let n = cols as f64;
                for r in 0..rows {
                    let row = &x[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * inv;
                        let dxhat = gs[c] * gm[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        ggamma[c] += gs[c] * xhat;
                        gbeta[c] += gs[c];
                    }
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * inv;
                        let dxhat = gs[c] * gm[c];
                        gx[r * cols + c] = inv * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
                drop(x);
                drop(gm);
                node.parents[0].accum(&gx);
                node.parents[1].accum(&ggamma);
                node.parents[2].accum(&gbeta);
            }),
        )
    }
}

/// GELU with the exact Gaussian CDF: `x * Phi(x)`.
pub fn gelu_exact(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// d/dx of exact GELU: `Phi(x) + x * phi(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF via erf.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn bump_index(idx: &mut [usize], shape: &[usize]) {
    for d in (0..idx.len()).rev() {
        idx[d] += 1;
        if idx[d] < shape[d] {
            return;
        }
        idx[d] = 0;
    }
}

fn broadcast_strides(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; in_shape.len()];
    let mut acc = 1usize;
    for d in (0..in_shape.len()).rev() {
        strides[d] = if in_shape[d] == 1 { 0 } else { acc };
        acc *= in_shape[d];
    }
    let _ = out_shape;
    strides
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn permute_kernel(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut src = 0usize;
        for (d, &ax) in axes.iter().enumerate() {
            src += idx[d] * in_strides[ax];
        }
        *o = data[src];
        bump_index(&mut idx, &out_shape);
    }
    out
}

fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m, n) x b^T` where `b` is `(k, n)` -> `(m, k)`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + j] = acc;
        }
    }
    out
}

/// `a^T (m, k) x b (m, n)` -> `(k, n)`.
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
