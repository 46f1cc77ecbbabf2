use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Axis, Graph, Scalar, Tensor, Var};

use super::permutation::{mixing_matrix, PermMode};

pub const OUTPUT_INIT_GAIN: f64 = 0.1;

/// One affine coupling step followed by a fixed channel mixing and a fixed
/// per-channel scale.
///
/// Channels `[0, split)` pass through and condition a two-layer tanh MLP
/// whose output is split into a log-scale half and a shift half for the
/// remaining `dim - split` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock<T> {
    pub dim: usize,
    pub split: usize,
    pub hidden: usize,
    pub pos_dim: usize,
    pub clamp_alpha: T,
    /// `[split, hidden]`
    pub w1x: Tensor<T>,
    /// `[pos_dim, hidden]`
    pub w1p: Tensor<T>,
    /// `[1, hidden]`
    pub b1: Tensor<T>,
    /// `[hidden, 2 * (dim - split)]`
    pub w2: Tensor<T>,
    /// `[1, 2 * (dim - split)]`
    pub b2: Tensor<T>,
    /// `[dim, dim]`, orthogonal.
    pub mixing: Tensor<T>,
    /// `[1, dim]`, strictly positive.
    pub scale: Tensor<T>,
}

/// Graph handles for one block's trainable tensors plus its constants.
#[derive(Debug, Clone, Copy)]
pub struct BoundBlock {
    pub w1x: Var,
    pub w1p: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    mixing: Var,
    scale: Var,
    log_scale_sum: Var,
}

impl BoundBlock {
    pub fn params(&self) -> [Var; 5] {
        [self.w1x, self.w1p, self.b1, self.w2, self.b2]
    }
}

impl<T: Scalar> CouplingBlock<T> {
    /// Uniform init `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for the first subnet
    /// layer; the output layer's bound is further scaled by
    /// [`OUTPUT_INIT_GAIN`] so a fresh block stays close to the identity.
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        hidden: usize,
        pos_dim: usize,
        clamp_alpha: f64,
        perm: PermMode,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Invalid(format!("coupling needs dim >= 2, got {dim}")));
        }
        if dim % 2 != 0 {
            return Err(Error::Invalid(format!(
                "coupling needs an even feature dim, got {dim} (enable pad_odd to zero-pad)"
            )));
        }
        if clamp_alpha <= 0.0 || scale <= 0.0 {
            return Err(Error::Invalid("clamp_alpha and scale must be positive".into()));
        }
        let split = dim / 2;
        let out = 2 * (dim - split);
        let fan1 = (split + pos_dim) as f64;
        let b1 = 1.0 / fan1.sqrt();
        let b2 = OUTPUT_INIT_GAIN / (hidden as f64).sqrt();
        let mut uniform = |rows: usize, cols: usize, bound: f64| {
            Tensor::from_fn(rows, cols, |_, _| T::of(rng.random_range(-bound..bound)))
        };
        let w1x = uniform(split, hidden, b1);
        let w1p = uniform(pos_dim, hidden, b1);
        let bias1 = uniform(1, hidden, b1);
        let w2 = uniform(hidden, out, b2);
        let bias2 = uniform(1, out, b2);
        let mixing = mixing_matrix(dim, perm, rng);
        Ok(Self {
            dim,
            split,
            hidden,
            pos_dim,
            clamp_alpha: T::of(clamp_alpha),
            w1x,
            w1p,
            b1: bias1,
            w2,
            b2: bias2,
            mixing,
            scale: Tensor::full(1, dim, T::of(scale)),
        })
    }

    /// Sets every subnet weight and bias to zero, making the coupling itself
    /// the identity.
    pub fn zero_subnet(&mut self) {
        for t in self.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn params(&self) -> [&Tensor<T>; 5] {
        [&self.w1x, &self.w1p, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 5] {
        [&mut self.w1x, &mut self.w1p, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Log-determinant contribution of the constant scale.
    pub fn log_scale_sum(&self) -> T {
        self.scale.data().iter().map(|s| s.ln()).sum()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundBlock {
        let params = self.params().map(|t| g.param(t.clone()));
        self.bind_params(g, params)
    }

    /// Binds with caller-owned handles for the five trainable tensors, in
    /// [`Self::params`] order. Their values must match this block's shapes.
    pub fn bind_params(&self, g: &mut Graph<T>, params: [Var; 5]) -> BoundBlock {
        let [w1x, w1p, b1, w2, b2] = params;
        BoundBlock {
            w1x,
            w1p,
            b1,
            w2,
            b2,
            mixing: g.constant(self.mixing.clone()),
            scale: g.constant(self.scale.clone()),
            log_scale_sum: g.scalar(self.log_scale_sum()),
        }
    }

    /// Forward pass on the graph. `x` is `[B, dim]`, `pos` is `[B, pos_dim]`
    /// or `None` for all-zero embeddings. Returns `(z [B, dim], logdet [B, 1])`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        b: &BoundBlock,
        x: Var,
        pos: Option<Var>,
    ) -> Result<(Var, Var)> {
        let width = g.value(x).cols();
        if width != self.dim {
            return Err(Error::shape(
                "coupling_forward",
                format!("input has {width} channels, block expects {}", self.dim),
            ));
        }
        let rest = self.dim - self.split;
        let x1 = g.split(x, 0, self.split)?;
        let x2 = g.split(x, self.split, rest)?;

        let mut pre = g.matmul(x1, b.w1x)?;
        if let Some(p) = pos {
            let pw = g.matmul(p, b.w1p)?;
            pre = g.add(pre, pw)?;
        }
        let pre = g.add(pre, b.b1)?;
        let act = g.tanh(pre)?;
        let out = g.matmul(act, b.w2)?;
        let out = g.add(out, b.b2)?;

        let s_raw = g.split(out, 0, rest)?;
        let shift = g.split(out, rest, rest)?;
        let s_hat = self.soft_clamp(g, s_raw)?;

        let e = g.exp(s_hat)?;
        let z2 = g.mul(x2, e)?;
        let z2 = g.add(z2, shift)?;
        let z = g.concat(&[x1, z2])?;
        let z = g.matmul(z, b.mixing)?;
        let z = g.mul(z, b.scale)?;

        let ld = g.sum(s_hat, Axis::Cols)?;
        let logdet = g.add(ld, b.log_scale_sum)?;
        Ok((z, logdet))
    }

    /// `alpha * tanh(s / alpha)`, so `|ŝ| < alpha`.
    fn soft_clamp(&self, g: &mut Graph<T>, s: Var) -> Result<Var> {
        let inner = g.scale(s, T::one() / self.clamp_alpha)?;
        let th = g.tanh(inner)?;
        g.scale(th, self.clamp_alpha)
    }

    /// Subnet evaluation without a graph: returns `(ŝ, t)`.
    fn coefficients(&self, x1: &Tensor<T>, pos: Option<&Tensor<T>>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut pre = x1.matmul(&self.w1x)?;
        if let Some(p) = pos {
            let pw = p.matmul(&self.w1p)?;
            pre.data_mut().iter_mut().zip(pw.data()).for_each(|(a, b)| *a = *a + *b);
        }
        let h = self.hidden;
        for (i, v) in pre.data_mut().iter_mut().enumerate() {
            *v = (*v + self.b1.data()[i % h]).tanh();
        }
        let mut out = pre.matmul(&self.w2)?;
        let w = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + self.b2.data()[i % w];
        }
        let rest = self.dim - self.split;
        // same operation order as `soft_clamp`, so both passes agree bitwise
        let (alpha, inv_alpha) = (self.clamp_alpha, T::one() / self.clamp_alpha);
        let s_hat = out.slice_cols(0, rest)?.map(|s| (s * inv_alpha).tanh() * alpha);
        let shift = out.slice_cols(rest, rest)?;
        Ok((s_hat.ensure_finite("coupling subnet")?, shift.ensure_finite("coupling subnet")?))
    }

    /// Exact inverse of [`forward`](Self::forward).
    pub fn inverse(&self, z: &Tensor<T>, pos: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if z.cols() != self.dim {
            return Err(Error::shape(
                "coupling_inverse",
                format!("input has {} channels, block expects {}", z.cols(), self.dim),
            ));
        }
        let d = self.dim;
        let mut unscaled = z.clone();
        for (i, v) in unscaled.data_mut().iter_mut().enumerate() {
            *v = *v / self.scale.data()[i % d];
        }
        let unmixed = unscaled.matmul(&self.mixing.transpose())?;
        let x1 = unmixed.slice_cols(0, self.split)?;
        let z2 = unmixed.slice_cols(self.split, d - self.split)?;
        let (s_hat, shift) = self.coefficients(&x1, pos)?;
        let mut x2 = z2;
        for ((v, s), t) in x2.data_mut().iter_mut().zip(s_hat.data()).zip(shift.data()) {
            *v = (*v - *t) * (-*s).exp();
        }
        Tensor::concat_cols(&[&x1, &x2])?.ensure_finite("coupling_inverse")
    }
}
