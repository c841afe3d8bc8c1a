//! Layer building blocks on top of the tape.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Seq, Tape, Var};
use crate::params::{glorot, orthogonal_gates, zeros, ParamId, ParamStore};
use crate::real::Real;

/// A forward pass in progress: the tape plus the parameters it reads.
pub struct Ctx<'a, T> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    leaves: HashMap<ParamId, Var>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            leaves: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    /// Tape leaf for a parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let v = self.tape.param(id, self.store.get(id));
        self.leaves.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        self.tape.value(v)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.insert(format!("{name}.w"), glorot(fan_in, fan_out, rng));
        let b = bias.then(|| store.insert(format!("{name}.b"), zeros(1, fan_out)));
        Linear { w, b }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = ctx.p(self.w);
        match self.b {
            Some(b) => {
                let b = ctx.p(b);
                ctx.tape.affine(x, w, b)
            }
            None => ctx.tape.matmul(x, w),
        }
    }
}

/// Affine layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{}", i + 1), w[0], w[1], true, rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, mut x: Var) -> Var {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(ctx, x);
            if i + 1 < self.layers.len() {
                x = ctx.tape.relu(x);
            }
        }
        x
    }
}

/// One self-attention layer with a residual connection and layer norm.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_gain: ParamId,
    ln_bias: ParamId,
    heads: usize,
}

impl SelfAttention {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        SelfAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            ln_gain: store.insert(format!("{name}.ln.g"), Array2::ones((1, dim))),
            ln_bias: store.insert(format!("{name}.ln.b"), zeros(1, dim)),
            heads,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, seqs: &[Seq]) -> Var {
        let q = self.q.forward(ctx, x);
        let k = self.k.forward(ctx, x);
        let v = self.v.forward(ctx, x);
        let a = ctx.tape.attention(q, k, v, seqs, self.heads);
        let o = self.o.forward(ctx, a);
        let res = ctx.tape.add(x, o);
        let (g, b) = (ctx.p(self.ln_gain), ctx.p(self.ln_bias));
        ctx.tape.layer_norm(res, g, b)
    }
}

#[derive(Clone, Debug)]
struct GruDirection {
    input: Linear,
    u: ParamId,
    bu: ParamId,
}

/// Bidirectional GRU; output width is twice the per-direction hidden size.
#[derive(Clone, Debug)]
pub struct BiGru {
    fwd: GruDirection,
    bwd: GruDirection,
}

impl BiGru {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut dir = |d: &str, rng: &mut R| GruDirection {
            input: Linear::new(store, &format!("{name}.{d}.in"), input, 3 * hidden, true, rng),
            u: store.insert(format!("{name}.{d}.u"), orthogonal_gates(hidden, rng)),
            bu: store.insert(format!("{name}.{d}.bu"), zeros(1, 3 * hidden)),
        };
        let fwd = dir("fwd", rng);
        let bwd = dir("bwd", rng);
        BiGru { fwd, bwd }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, seqs: &[Seq]) -> Var {
        let f = self.fwd.input.forward(ctx, x);
        let b = self.bwd.input.forward(ctx, x);
        self.forward_projected(ctx, [f, b], seqs)
    }

    /// Forward and backward input layers, for callers that build the
    /// projected inputs themselves.
    pub fn input_layers(&self) -> [&Linear; 2] {
        [&self.fwd.input, &self.bwd.input]
    }

    /// Recurrences over inputs already passed through [`Self::input_layers`].
    pub fn forward_projected<T: Real>(&self, ctx: &mut Ctx<'_, T>, xp: [Var; 2], seqs: &[Seq]) -> Var {
        let mut run = |d: &GruDirection, xp: Var, reverse: bool| {
            let (u, bu) = (ctx.p(d.u), ctx.p(d.bu));
            ctx.tape.gru(xp, u, bu, seqs, reverse)
        };
        let f = run(&self.fwd, xp[0], false);
        let b = run(&self.bwd, xp[1], true);
        ctx.tape.concat_cols(&[f, b])
    }
}

/// Temporal convolution, kernel 3, zero padding 1, within each sequence.
#[derive(Clone, Debug)]
pub struct Conv1d {
    lin: Linear,
}

impl Conv1d {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Conv1d {
            lin: Linear::new(store, name, 3 * cin, cout, true, rng),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, seqs: &[Seq]) -> Var {
        let cols = ctx.tape.unfold3(x, seqs);
        self.lin.forward(ctx, cols)
    }
}
