//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! 2-D arrays; scalars are `1 × 1`. Sequence-shaped ops (attention, GRU,
//! temporal convolution) work on *packed* rows: several sequences stored
//! back to back, each described by a [`Seq`] of `(start_row, len)`, so no
//! padded row ever takes part in a computation.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::params::ParamId;
use crate::real::Real;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// `(start_row, len)` of one packed sequence.
pub type Seq = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PoolMode {
    #[default]
    Max,
    Mean,
}

enum Op<T> {
    Input,
    Param,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        row: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Act(Var, Activation),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<T>,
        inv_std: Array1<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seqs: Vec<Seq>,
        heads: usize,
        probs: Vec<Array2<T>>,
    },
    Gru(Box<GruNode<T>>),
    Unfold3 {
        a: Var,
        seqs: Vec<Seq>,
    },
    SegmentPool {
        a: Var,
        spans: Vec<(usize, usize)>,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    GroupMax {
        a: Var,
        groups: Vec<Seq>,
        argmax: Vec<usize>,
    },
    Sum(Var),
    /// Scalar produced by a fused loss; `local` holds d(out)/d(input).
    Loss {
        input: Var,
        local: Array2<T>,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct GruNode<T> {
    x: Var,
    u: Var,
    bu: Var,
    seqs: Vec<Seq>,
    reverse: bool,
    hidden: usize,
    // Per-row caches, indexed like the output rows.
    r: Array2<T>,
    z: Array2<T>,
    n: Array2<T>,
    hu_n: Array2<T>,
    h_prev: Array2<T>,
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Array2<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        self.nodes[v.0].as_ref()
    }

    /// Gradient per parameter id; a parameter used several times on the
    /// tape gets the sum over its uses.
    pub fn params(&self, count: usize) -> Vec<Option<Array2<T>>> {
        let mut out: Vec<Option<Array2<T>>> = vec![None; count];
        for &(id, var) in &self.params {
            if let Some(g) = &self.nodes[var.0] {
                match &mut out[id.index()] {
                    Some(acc) => *acc += g,
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
}

fn matmul<T: Real>(a: ArrayView2<T>, ta: bool, b: ArrayView2<T>, tb: bool) -> Array2<T> {
    let a = if ta { a.reversed_axes() } else { a };
    let b = if tb { b.reversed_axes() } else { b };
    a.dot(&b)
}

fn softmax_rows_in_place<T: Real>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.fold(T::neg_infinity(), |acc, &x| acc.max(x));
        let mut total = T::zero();
        row.mapv_inplace(|x| {
            let e = (x - max).exp();
            total += e;
            e
        });
        row /= total;
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked unless `track` is set.
    pub fn input(&mut self, value: Array2<T>, track: bool) -> Var {
        self.push(value, Op::Input, track)
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.input(value, false)
    }

    pub fn param(&mut self, id: ParamId, value: &Array2<T>) -> Var {
        let v = self.push(value.clone(), Op::Param, true);
        self.params.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = matmul(self.value(a).view(), ta, self.value(b).view(), tb);
        let rg = self.requires(a) || self.requires(b);
        self.push(value, Op::MatMul { a, b, ta, tb }, rg)
    }

    /// Adds a `1 × C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let rg = self.requires(a) || self.requires(row);
        self.push(value, Op::AddRow { a, row }, rg)
    }

    /// `x · w + b` with `b` a `1 × C` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut value = bv.broadcast((xv.nrows(), wv.ncols())).expect("bias width").to_owned();
        general_mat_mul(T::one(), xv, wv, T::one(), &mut value);
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(value, Op::Affine { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.requires(a) || self.requires(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.requires(a) || self.requires(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.requires(a) || self.requires(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a) * k;
        let rg = self.requires(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn act(&mut self, a: Var, f: Activation) -> Var {
        let x = self.value(a);
        let value = match f {
            Activation::Relu => x.mapv(|v| if v < T::zero() { T::zero() } else { v }),
            Activation::Sigmoid => x.mapv(Real::sigmoid),
            Activation::Tanh => x.mapv(Real::fast_tanh),
            Activation::Softplus => x.mapv(Real::softplus),
        };
        let rg = self.requires(a);
        self.push(value, Op::Act(a, f), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.act(a, Activation::Relu)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.requires(a);
        self.push(value, Op::SliceRows { a, start }, rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), idx);
        let rg = self.requires(a);
        self.push(
            value,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.requires(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        softmax_rows_in_place(&mut value);
        let rg = self.requires(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Softmax down each column.
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let t = self.transpose(a);
        let sm = self.softmax_rows(t);
        self.transpose(sm)
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        let eps = T::lit(1e-5);
        let x = self.value(a);
        let cols = T::from_usize(x.ncols()).unwrap();
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / cols;
            row -= mean;
            let var = row.iter().map(|&v| v * v).sum::<T>() / cols;
            *is = T::one() / (var + eps).sqrt();
            row *= *is;
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        let rg = self.requires(a) || self.requires(gain) || self.requires(bias);
        self.push(
            value,
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention inside each packed sequence.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seqs: &[Seq], heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let c = qv.ncols();
        assert!(c % heads == 0, "width {c} not divisible by {heads} heads");
        let dh = c / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut out = Array2::zeros(qv.raw_dim());
        let mut probs = Vec::with_capacity(seqs.len() * heads);
        for &(start, len) in seqs {
            for h in 0..heads {
                let rows = start..start + len;
                let cols = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![rows.clone(), cols.clone()]);
                let ks = kv.slice(s![rows.clone(), cols.clone()]);
                let vs = vv.slice(s![rows.clone(), cols.clone()]);
                let mut p = qs.dot(&ks.t()) * scale;
                softmax_rows_in_place(&mut p);
                out.slice_mut(s![rows, cols]).assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seqs: seqs.to_vec(),
                heads,
                probs,
            },
            rg,
        )
    }

    /// One direction of a GRU over packed sequences.
    ///
    /// `x` holds the input projections `[R × 3h]` with gate blocks ordered
    /// reset, update, candidate; `u` is `[h × 3h]` and `bu` is `[1 × 3h]`.
    pub fn gru(&mut self, x: Var, u: Var, bu: Var, seqs: &[Seq], reverse: bool) -> Var {
        let xv = self.value(x).as_standard_layout();
        let uv = self.value(u);
        let buv = self.value(bu);
        let rows = xv.nrows();
        let hidden = uv.nrows();
        let h3 = 3 * hidden;
        assert_eq!(xv.ncols(), h3);
        assert_eq!(uv.ncols(), h3);

        let mut out = Array2::zeros((rows, hidden));
        let mut r_c = Array2::zeros((rows, hidden));
        let mut z_c = Array2::zeros((rows, hidden));
        let mut n_c = Array2::zeros((rows, hidden));
        let mut hun_c = Array2::zeros((rows, hidden));
        let mut hp_c = Array2::zeros((rows, hidden));
        let xs = xv.as_slice().expect("standard layout");

        let max_len = seqs.iter().map(|s| s.1).max().unwrap_or(0);
        let mut state = Array2::<T>::zeros((seqs.len(), hidden));
        let mut h_prev = Array2::<T>::zeros((seqs.len(), hidden));
        let mut hu = Array2::<T>::zeros((seqs.len(), h3));
        let mut rows_of = Vec::with_capacity(seqs.len());
        for step in 0..max_len {
            rows_of.clear();
            for (i, &(start, len)) in seqs.iter().enumerate() {
                if step < len {
                    rows_of.push((i, if reverse { start + len - 1 - step } else { start + step }));
                }
            }
            let m = rows_of.len();
            for (j, &(i, _)) in rows_of.iter().enumerate() {
                h_prev.row_mut(j).assign(&state.row(i));
                hu.row_mut(j).assign(&buv.row(0));
            }
            let mut hu_m = hu.slice_mut(s![..m, ..]);
            general_mat_mul(T::one(), &h_prev.slice(s![..m, ..]), uv, T::one(), &mut hu_m);
            let hus = hu.as_slice().expect("owned");
            let hps = h_prev.as_slice().expect("owned");
            let sts = state.as_slice_mut().expect("owned");
            for (j, &(i, row)) in rows_of.iter().enumerate() {
                let xr = &xs[row * h3..(row + 1) * h3];
                let hur = &hus[j * h3..(j + 1) * h3];
                let hpr = &hps[j * hidden..(j + 1) * hidden];
                let span = row * hidden..(row + 1) * hidden;
                let rr = &mut r_c.as_slice_mut().expect("owned")[span.clone()];
                let zr = &mut z_c.as_slice_mut().expect("owned")[span.clone()];
                let nr = &mut n_c.as_slice_mut().expect("owned")[span.clone()];
                let unr = &mut hun_c.as_slice_mut().expect("owned")[span.clone()];
                let pr = &mut hp_c.as_slice_mut().expect("owned")[span.clone()];
                let or = &mut out.as_slice_mut().expect("owned")[span];
                let st = &mut sts[i * hidden..(i + 1) * hidden];
                for c in 0..hidden {
                    let r = (xr[c] + hur[c]).sigmoid();
                    let z = (xr[hidden + c] + hur[hidden + c]).sigmoid();
                    let hun = hur[2 * hidden + c];
                    let n = (xr[2 * hidden + c] + r * hun).fast_tanh();
                    let hp = hpr[c];
                    let h = (T::one() - z) * n + z * hp;
                    rr[c] = r;
                    zr[c] = z;
                    nr[c] = n;
                    unr[c] = hun;
                    pr[c] = hp;
                    or[c] = h;
                    st[c] = h;
                }
            }
        }
        let rg = self.requires(x) || self.requires(u) || self.requires(bu);
        self.push(
            out,
            Op::Gru(Box::new(GruNode {
                x,
                u,
                bu,
                seqs: seqs.to_vec(),
                reverse,
                hidden,
                r: r_c,
                z: z_c,
                n: n_c,
                hu_n: hun_c,
                h_prev: hp_c,
            })),
            rg,
        )
    }

    /// Kernel-3 temporal neighbourhood: row `t` becomes
    /// `[a[t-1]; a[t]; a[t+1]]`, zero outside each sequence.
    pub fn unfold3(&mut self, a: Var, seqs: &[Seq]) -> Var {
        let av = self.value(a);
        let c = av.ncols();
        let mut out = Array2::zeros((av.nrows(), 3 * c));
        for &(start, len) in seqs {
            for t in 0..len {
                let row = start + t;
                if t > 0 {
                    out.slice_mut(s![row, 0..c]).assign(&av.row(row - 1));
                }
                out.slice_mut(s![row, c..2 * c]).assign(&av.row(row));
                if t + 1 < len {
                    out.slice_mut(s![row, 2 * c..3 * c]).assign(&av.row(row + 1));
                }
            }
        }
        let rg = self.requires(a);
        self.push(
            out,
            Op::Unfold3 {
                a,
                seqs: seqs.to_vec(),
            },
            rg,
        )
    }

    /// Channel-wise pooling over inclusive row spans `(lo, hi)`.
    pub fn segment_pool(&mut self, a: Var, spans: &[(usize, usize)], mode: PoolMode) -> Var {
        let av = self.value(a);
        let c = av.ncols();
        let mut out = Array2::zeros((spans.len(), c));
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Max => {
                argmax.reserve(spans.len() * c);
                for (m, &(lo, hi)) in spans.iter().enumerate() {
                    for ch in 0..c {
                        let mut best = lo;
                        for r in lo + 1..=hi {
                            if av[[r, ch]] > av[[best, ch]] {
                                best = r;
                            }
                        }
                        out[[m, ch]] = av[[best, ch]];
                        argmax.push(best);
                    }
                }
            }
            PoolMode::Mean => {
                for (m, &(lo, hi)) in spans.iter().enumerate() {
                    let n = T::from_usize(hi - lo + 1).unwrap();
                    let mean = av.slice(s![lo..=hi, ..]).sum_axis(Axis(0)) / n;
                    out.row_mut(m).assign(&mean);
                }
            }
        }
        let rg = self.requires(a);
        self.push(
            out,
            Op::SegmentPool {
                a,
                spans: spans.to_vec(),
                mode,
                argmax,
            },
            rg,
        )
    }

    /// Every row is replaced by the channel-wise max over its group.
    pub fn group_max(&mut self, a: Var, groups: &[Seq]) -> Var {
        let av = self.value(a);
        let c = av.ncols();
        let mut out = Array2::zeros(av.raw_dim());
        let mut argmax = Vec::with_capacity(groups.len() * c);
        for &(start, len) in groups {
            for ch in 0..c {
                let mut best = start;
                for r in start + 1..start + len {
                    if av[[r, ch]] > av[[best, ch]] {
                        best = r;
                    }
                }
                let m = av[[best, ch]];
                out.slice_mut(s![start..start + len, ch]).fill(m);
                argmax.push(best);
            }
        }
        let rg = self.requires(a);
        self.push(
            out,
            Op::GroupMax {
                a,
                groups: groups.to_vec(),
                argmax,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.requires(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Records a scalar computed outside the tape whose derivative with
    /// respect to `input` is `local`.
    pub fn loss(&mut self, input: Var, value: T, local: Array2<T>) -> Var {
        debug_assert_eq!(local.raw_dim(), self.value(input).raw_dim());
        let rg = self.requires(input);
        self.push(
            Array2::from_elem((1, 1), value),
            Op::Loss { input, local },
            rg,
        )
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let total = terms
            .iter()
            .fold(T::zero(), |acc, &(v, w)| acc + w * self.scalar(v));
        let rg = terms.iter().any(|&(v, _)| self.requires(v));
        self.push(
            Array2::from_elem((1, 1), total),
            Op::WeightedSum(terms.to_vec()),
            rg,
        )
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Array2<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Array2::ones(self.value(root).raw_dim()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backward_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients {
            nodes: grads,
            params: self.params.clone(),
        }
    }

    fn acc(&self, grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
        if !self.requires(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    /// Accumulates `op(a) · op(b)` into the gradient slot of `v`.
    fn acc_matmul(&self, grads: &mut [Option<Array2<T>>], v: Var, a: ArrayView2<T>, ta: bool, b: ArrayView2<T>, tb: bool) {
        if !self.requires(v) {
            return;
        }
        let a = if ta { a.reversed_axes() } else { a };
        let b = if tb { b.reversed_axes() } else { b };
        match &mut grads[v.0] {
            Some(existing) => general_mat_mul(T::one(), &a, &b, T::one(), existing),
            slot => *slot = Some(a.dot(&b)),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul { a, b, ta, tb } => {
                let av = self.value(*a).view();
                let bv = self.value(*b).view();
                if *ta {
                    self.acc_matmul(grads, *a, bv, *tb, g.view(), true);
                } else {
                    self.acc_matmul(grads, *a, g.view(), false, bv, !*tb);
                }
                if *tb {
                    self.acc_matmul(grads, *b, g.view(), true, av, *ta);
                } else {
                    self.acc_matmul(grads, *b, av, !*ta, g.view(), false);
                }
            }
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x).view(), self.value(*w).view());
                self.acc_matmul(grads, *x, g.view(), false, wv, true);
                self.acc_matmul(grads, *w, xv, true, g.view(), false);
                if self.requires(*b) {
                    self.acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::AddRow { a, row } => {
                self.acc(grads, *a, g.clone());
                if self.requires(*row) {
                    self.acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.requires(*b) {
                    self.acc(grads, *b, g.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.requires(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, k) => self.acc(grads, *a, g * *k),
            Op::Act(a, f) => {
                let y = &node.value;
                let mut d = g.clone();
                match f {
                    Activation::Relu => Zip::from(&mut d).and(y).for_each(|d, &y| {
                        if y <= T::zero() {
                            *d = T::zero();
                        }
                    }),
                    Activation::Sigmoid => Zip::from(&mut d)
                        .and(y)
                        .for_each(|d, &y| *d *= y * (T::one() - y)),
                    Activation::Tanh => Zip::from(&mut d)
                        .and(y)
                        .for_each(|d, &y| *d *= T::one() - y * y),
                    Activation::Softplus => Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= x.sigmoid()),
                }
                self.acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.requires(p) {
                        self.acc(grads, p, g.slice(s![.., col..col + w]).to_owned());
                    }
                    col += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    if self.requires(p) {
                        self.acc(grads, p, g.slice(s![row..row + h, ..]).to_owned());
                    }
                    row += h;
                }
            }
            Op::SliceRows { a, start } => {
                let mut d = Array2::zeros(self.value(*a).raw_dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.acc(grads, *a, d);
            }
            Op::GatherRows { a, idx } => {
                let mut d = Array2::zeros(self.value(*a).raw_dim());
                for (i, &r) in idx.iter().enumerate() {
                    let mut row = d.row_mut(r);
                    row += &g.row(i);
                }
                self.acc(grads, *a, d);
            }
            Op::Transpose(a) => self.acc(grads, *a, g.t().to_owned()),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d -= y * dot);
                }
                self.acc(grads, *a, d);
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.requires(*gain) {
                    self.acc(
                        grads,
                        *gain,
                        (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                }
                if self.requires(*bias) {
                    self.acc(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.requires(*a) {
                    let cols = T::from_usize(g.ncols()).unwrap();
                    let mut dx = g * self.value(*gain);
                    for ((mut row, xh), &is) in
                        dx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                    {
                        let mean_d = row.sum() / cols;
                        let mean_dx = row.iter().zip(xh).map(|(&d, &x)| d * x).sum::<T>() / cols;
                        Zip::from(&mut row)
                            .and(&xh)
                            .for_each(|d, &x| *d = (*d - mean_d - x * mean_dx) * is);
                    }
                    self.acc(grads, *a, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seqs,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, seqs, *heads, probs, grads),
            Op::Gru(n) => self.gru_backward(g, n, grads),
            Op::Unfold3 { a, seqs } => {
                let mut d = Array2::zeros(self.value(*a).raw_dim());
                let c = d.ncols();
                for &(start, len) in seqs {
                    for t in 0..len {
                        let row = start + t;
                        if t > 0 {
                            let mut dst = d.row_mut(row - 1);
                            dst += &g.slice(s![row, 0..c]);
                        }
                        let mut dst = d.row_mut(row);
                        dst += &g.slice(s![row, c..2 * c]);
                        if t + 1 < len {
                            let mut dst = d.row_mut(row + 1);
                            dst += &g.slice(s![row, 2 * c..3 * c]);
                        }
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::SegmentPool {
                a,
                spans,
                mode,
                argmax,
            } => {
                let mut d = Array2::zeros(self.value(*a).raw_dim());
                let c = d.ncols();
                match mode {
                    PoolMode::Max => {
                        for m in 0..spans.len() {
                            for ch in 0..c {
                                d[[argmax[m * c + ch], ch]] += g[[m, ch]];
                            }
                        }
                    }
                    PoolMode::Mean => {
                        for (m, &(lo, hi)) in spans.iter().enumerate() {
                            let n = T::from_usize(hi - lo + 1).unwrap();
                            let share = g.row(m).mapv(|x| x / n);
                            for r in lo..=hi {
                                let mut dst = d.row_mut(r);
                                dst += &share;
                            }
                        }
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::GroupMax { a, groups, argmax } => {
                let mut d = Array2::zeros(self.value(*a).raw_dim());
                let c = d.ncols();
                for (gi, &(start, len)) in groups.iter().enumerate() {
                    let col_sums = g.slice(s![start..start + len, ..]).sum_axis(Axis(0));
                    for ch in 0..c {
                        d[[argmax[gi * c + ch], ch]] += col_sums[ch];
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Sum(a) => {
                let k = g[[0, 0]];
                self.acc(grads, *a, Array2::from_elem(self.value(*a).raw_dim(), k));
            }
            Op::Loss { input, local } => self.acc(grads, *input, local * g[[0, 0]]),
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.acc(grads, v, Array2::from_elem((1, 1), w * g[[0, 0]]));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Array2<T>,
        q: Var,
        k: Var,
        v: Var,
        seqs: &[Seq],
        heads: usize,
        probs: &[Array2<T>],
        grads: &mut [Option<Array2<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let c = qv.ncols();
        let dh = c / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut dq = Array2::zeros(qv.raw_dim());
        let mut dk = Array2::zeros(kv.raw_dim());
        let mut dv = Array2::zeros(vv.raw_dim());
        let mut pi = probs.iter();
        for &(start, len) in seqs {
            for h in 0..heads {
                let p = pi.next().expect("one probability matrix per head");
                let rows = start..start + len;
                let cols = h * dh..(h + 1) * dh;
                let go = g.slice(s![rows.clone(), cols.clone()]);
                let qs = qv.slice(s![rows.clone(), cols.clone()]);
                let ks = kv.slice(s![rows.clone(), cols.clone()]);
                let vs = vv.slice(s![rows.clone(), cols.clone()]);
                dv.slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&p.t().dot(&go));
                let dp = go.dot(&vs.t());
                let mut ds = &dp * p;
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot = row.sum();
                    Zip::from(&mut row).and(&prow).for_each(|d, &y| *d -= y * dot);
                }
                ds *= scale;
                dq.slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&ds.dot(&ks));
                dk.slice_mut(s![rows, cols]).assign(&ds.t().dot(&qs));
            }
        }
        self.acc(grads, q, dq);
        self.acc(grads, k, dk);
        self.acc(grads, v, dv);
    }

    fn gru_backward(&self, g: &Array2<T>, n: &GruNode<T>, grads: &mut [Option<Array2<T>>]) {
        let hidden = n.hidden;
        let h3 = 3 * hidden;
        let uv = self.value(n.u);
        let g = g.as_standard_layout();
        let gs = g.as_slice().expect("standard layout");
        let rows = g.nrows();
        let mut dx = Array2::<T>::zeros((rows, h3));
        // Gradient reaching `h_prev · U + b_u`, kept per row so `dU` is one product.
        let mut dhu_all = Array2::<T>::zeros((rows, h3));
        let mut carry = Array2::<T>::zeros((n.seqs.len(), hidden));
        let mut dhu = Array2::<T>::zeros((n.seqs.len(), h3));
        let mut dh_prev = Array2::<T>::zeros((n.seqs.len(), hidden));
        let (rs, zs, ns, uns, hps) = (
            n.r.as_slice().expect("owned"),
            n.z.as_slice().expect("owned"),
            n.n.as_slice().expect("owned"),
            n.hu_n.as_slice().expect("owned"),
            n.h_prev.as_slice().expect("owned"),
        );
        let max_len = n.seqs.iter().map(|s| s.1).max().unwrap_or(0);
        let mut rows_of = Vec::new();
        for step in (0..max_len).rev() {
            rows_of.clear();
            for (i, &(start, len)) in n.seqs.iter().enumerate() {
                if step < len {
                    rows_of.push((i, if n.reverse { start + len - 1 - step } else { start + step }));
                }
            }
            let m = rows_of.len();
            {
                let cs = carry.as_slice().expect("owned");
                let dxs = dx.as_slice_mut().expect("owned");
                let das = dhu_all.as_slice_mut().expect("owned");
                let dus = dhu.as_slice_mut().expect("owned");
                let dps = dh_prev.as_slice_mut().expect("owned");
                for (j, &(i, row)) in rows_of.iter().enumerate() {
                    let base = row * hidden;
                    let dxr = &mut dxs[row * h3..(row + 1) * h3];
                    let dar = &mut das[row * h3..(row + 1) * h3];
                    let dur = &mut dus[j * h3..(j + 1) * h3];
                    let dpr = &mut dps[j * hidden..(j + 1) * hidden];
                    for c in 0..hidden {
                        let k = base + c;
                        let dh = gs[k] + cs[i * hidden + c];
                        let (r, z, nn) = (rs[k], zs[k], ns[k]);
                        let dz = dh * (hps[k] - nn);
                        let dn_pre = dh * (T::one() - z) * (T::one() - nn * nn);
                        let dr_pre = dn_pre * uns[k] * r * (T::one() - r);
                        let dz_pre = dz * z * (T::one() - z);
                        dxr[c] = dr_pre;
                        dxr[hidden + c] = dz_pre;
                        dxr[2 * hidden + c] = dn_pre;
                        dur[c] = dr_pre;
                        dur[hidden + c] = dz_pre;
                        dur[2 * hidden + c] = dn_pre * r;
                        dar[c] = dr_pre;
                        dar[hidden + c] = dz_pre;
                        dar[2 * hidden + c] = dn_pre * r;
                        dpr[c] = dh * z;
                    }
                }
            }
            let mut dp = dh_prev.slice_mut(s![..m, ..]);
            general_mat_mul(T::one(), &dhu.slice(s![..m, ..]), &uv.t(), T::one(), &mut dp);
            for (j, &(i, _)) in rows_of.iter().enumerate() {
                carry.row_mut(i).assign(&dh_prev.row(j));
            }
        }
        let dbu = dhu_all.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.acc_matmul(grads, n.u, n.h_prev.view(), true, dhu_all.view(), false);
        self.acc(grads, n.x, dx);
        self.acc(grads, n.bu, dbu);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    /// Central differences on every input entry against the tape gradient.
    fn check<F>(inputs: Vec<Array2<f64>>, build: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let eval = |vals: &[Array2<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| tape.input(v.clone(), true)).collect();
            let out = build(&mut tape, &vars);
            let root = tape.sum(out);
            (tape, vars, root)
        };
        let (tape, vars, root) = eval(&inputs);
        let grads = tape.backward(root);
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads
                .wrt(vars[k])
                .map(|g| g.as_standard_layout().to_owned())
                .unwrap_or_else(|| Array2::zeros(input.raw_dim()));
            for idx in 0..input.len() {
                let mut plus = inputs.clone();
                plus[k].as_slice_mut().unwrap()[idx] += h;
                let mut minus = inputs.clone();
                minus[k].as_slice_mut().unwrap()[idx] -= h;
                let (tp, _, rp) = eval(&plus);
                let (tm, _, rm) = eval(&minus);
                let numeric = (tp.scalar(rp) - tm.scalar(rm)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(err < 1e-5, "input {k} entry {idx}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn matmul_all_transpose_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { random(4, 3, &mut rng) } else { random(3, 4, &mut rng) };
            let b = if tb { random(2, 4, &mut rng) } else { random(4, 2, &mut rng) };
            let w = random(3, 2, &mut rng);
            check(vec![a, b], |t, v| {
                let c = t.matmul_t(v[0], ta, v[1], tb);
                let wv = t.constant(w.clone());
                t.mul(c, wv)
            });
        }
    }

    #[test]
    fn elementwise_and_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(3, 4, &mut rng);
        let b = random(3, 4, &mut rng);
        let r = random(1, 4, &mut rng);
        check(vec![a, b, r], |t, v| {
            let x = t.mul(v[0], v[1]);
            let x = t.add_row(x, v[2]);
            let s = t.act(x, Activation::Sigmoid);
            let th = t.act(v[0], Activation::Tanh);
            let sp = t.act(v[1], Activation::Softplus);
            let y = t.sub(s, th);
            let y = t.add(y, sp);
            t.scale(y, 0.7)
        });
    }

    #[test]
    fn relu_away_from_kink() {
        let a = Array2::from_shape_vec((2, 2), vec![-0.5, 0.3, 0.8, -0.1]).unwrap();
        check(vec![a], |t, v| {
            let r = t.relu(v[0]);
            t.mul(r, r)
        });
    }

    #[test]
    fn concat_slice_gather_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(4, 3, &mut rng);
        let b = random(4, 2, &mut rng);
        let w = random(5, 5, &mut rng);
        check(vec![a, b], |t, v| {
            let c = t.concat_cols(&[v[0], v[1]]);
            let s = t.slice_rows(c, 1, 2);
            let g = t.gather_rows(c, &[0, 3, 3]);
            let r = t.concat_rows(&[s, g]);
            let tr = t.transpose(r);
            let wv = t.constant(w.clone());
            let y = t.matmul(tr, wv);
            t.mul(y, y)
        });
    }

    #[test]
    fn softmax_rows_and_cols() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(3, 5, &mut rng);
        let w = random(3, 5, &mut rng);
        check(vec![a], |t, v| {
            let r = t.softmax_rows(v[0]);
            let c = t.softmax_cols(v[0]);
            let y = t.add(r, c);
            let wv = t.constant(w.clone());
            t.mul(y, wv)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(3, 6, &mut rng);
        let g = random(1, 6, &mut rng);
        let b = random(1, 6, &mut rng);
        let w = random(3, 6, &mut rng);
        check(vec![a, g, b], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            let wv = t.constant(w.clone());
            t.mul(y, wv)
        });
    }

    #[test]
    fn attention_gradients_over_packed_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random(7, 4, &mut rng);
        let k = random(7, 4, &mut rng);
        let v = random(7, 4, &mut rng);
        let w = random(7, 4, &mut rng);
        check(vec![q, k, v], |t, vars| {
            let y = t.attention(vars[0], vars[1], vars[2], &[(0, 3), (3, 4)], 2);
            let wv = t.constant(w.clone());
            t.mul(y, wv)
        });
    }

    #[test]
    fn gru_gradients_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = 3;
        let x = random(7, 3 * h, &mut rng);
        let u = random(h, 3 * h, &mut rng);
        let bu = random(1, 3 * h, &mut rng);
        let w = random(7, h, &mut rng);
        for reverse in [false, true] {
            check(vec![x.clone(), u.clone(), bu.clone()], |t, v| {
                let y = t.gru(v[0], v[1], v[2], &[(0, 4), (4, 3)], reverse);
                let wv = t.constant(w.clone());
                t.mul(y, wv)
            });
        }
    }

    #[test]
    fn gru_sequences_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(6, 6, &mut rng);
        let u = random(2, 6, &mut rng);
        let bu = random(1, 6, &mut rng);
        let mut tape = Tape::new();
        let (xv, uv, bv) = (tape.constant(x.clone()), tape.constant(u.clone()), tape.constant(bu.clone()));
        let joint = tape.gru(xv, uv, bv, &[(0, 2), (2, 4)], true);
        let xs = tape.constant(x.slice(s![2..6, ..]).to_owned());
        let alone = tape.gru(xs, uv, bv, &[(0, 4)], true);
        let a = tape.value(joint).slice(s![2..6, ..]).to_owned();
        assert_eq!(&a, tape.value(alone));
    }

    #[test]
    fn unfold_pool_and_group_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(6, 3, &mut rng);
        let w = random(6, 9, &mut rng);
        check(vec![a.clone()], |t, v| {
            let u = t.unfold3(v[0], &[(0, 2), (2, 4)]);
            let wv = t.constant(w.clone());
            t.mul(u, wv)
        });
        for mode in [PoolMode::Max, PoolMode::Mean] {
            check(vec![a.clone()], |t, v| {
                let p = t.segment_pool(v[0], &[(0, 2), (1, 1), (3, 5)], mode);
                t.mul(p, p)
            });
        }
        check(vec![a], |t, v| {
            let g = t.group_max(v[0], &[(0, 2), (2, 4)]);
            t.mul(g, v[0])
        });
    }

    #[test]
    fn unfold_zero_pads_sequence_edges() {
        let a = Array2::from_shape_vec((3, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(a);
        let u = tape.unfold3(v, &[(0, 1), (1, 2)]);
        let want = Array2::from_shape_vec((3, 3), vec![0., 1., 0., 0., 2., 3., 2., 3., 0.]).unwrap();
        assert_eq!(tape.value(u), &want);
    }

    #[test]
    fn parameter_gradients_accumulate_over_uses() {
        use crate::params::ParamStore;
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Array2::from_elem((1, 1), 3.0));
        let mut tape = Tape::new();
        let a = tape.param(id, store.get(id));
        let b = tape.param(id, store.get(id));
        let y = tape.mul(a, b);
        let root = tape.sum(y);
        let g = tape.backward(root).params(1);
        assert_eq!(g[0].as_ref().unwrap()[[0, 0]], 6.0);
    }
}
