//! Operation tape for reverse-mode differentiation.
//!
//! Ops are recorded in execution order; [`Tape::backward`] replays them in
//! exact reverse order, accumulating each node's gradient as the sum of all
//! downstream contributions. Nodes that cannot influence any trainable leaf
//! never allocate a gradient buffer.

use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Batch-norm epsilon (paper leaves it unspecified).
pub const BN_EPSILON: f64 = 1e-3;
/// Moving-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.99;

/// Fresh batch statistics produced by a training-mode batch-norm call; the
/// caller folds them into the stored moving statistics.
#[derive(Debug, Clone)]
pub struct BnUpdate<S: Scalar> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> BnUpdate<S> {
    /// moving <- momentum * moving + (1 - momentum) * batch
    pub fn apply(&self, moving_mean: &mut Tensor<S>, moving_var: &mut Tensor<S>) {
        let m = S::from_f64(BN_MOMENTUM);
        let one_m = S::one() - m;
        for (mv, &bv) in moving_mean.data.iter_mut().zip(self.mean.iter()) {
            *mv = m * *mv + one_m * bv;
        }
        for (mv, &bv) in moving_var.data.iter_mut().zip(self.var.iter()) {
            *mv = m * *mv + one_m * bv;
        }
    }
}

enum OpRecord<S: Scalar> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dilation: usize,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        training: bool,
        mean: Vec<S>,
        var: Vec<S>,
    },
    Relu {
        x: Var,
    },
    AvgPool {
        x: Var,
    },
    SpatialMean {
        x: Var,
    },
    ConcatLast {
        xs: Vec<Var>,
        widths: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: S,
    },
    Reshape {
        x: Var,
    },
    L2Normalize {
        x: Var,
        norms: Vec<S>,
    },
    CosineBand {
        x: Var,
        radius: usize,
    },
    SigmoidXent {
        logits: Var,
        targets: Tensor<S>,
        pos_weight: S,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: OpRecord<S>,
    needs_grad: bool,
}

/// Records operations and owns every intermediate tensor of a forward pass.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    ran_backward: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            ran_backward: false,
        }
    }

    /// Inserts an input tensor. Gradients are tracked only for trainable
    /// leaves and values computed from them.
    pub fn leaf(&mut self, value: Tensor<S>, trainable: bool) -> Var {
        self.push(value, OpRecord::Leaf, trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of the last backward target w.r.t. `v`, if tracked.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn push(&mut self, value: Tensor<S>, op: OpRecord<S>, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite tensor recorded on tape");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    // -- ops ---------------------------------------------------------------

    /// 2D spatial convolution per frame. x: [B,T,H,W,Cin], w: [k,k,Cin,Cout],
    /// b: [Cout]. Cross-correlation, zero same-padding, stride 1, odd k.
    pub fn conv2d_spatial(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        const OP: &str = "conv2d_spatial";
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        self.value(x).expect_rank(OP, 5)?;
        self.value(w).expect_rank(OP, 4)?;
        if ws[0] != ws[1] || ws[0] % 2 == 0 {
            return Err(Error::dim(
                OP,
                format!("kernel must be square with odd size, got {}x{}", ws[0], ws[1]),
            ));
        }
        if ws[2] != xs[4] {
            return Err(Error::dim(
                OP,
                format!("kernel input channels {} != x channels {}", ws[2], xs[4]),
            ));
        }
        if bs != [ws[3]] {
            return Err(Error::dim(
                OP,
                format!("bias shape {:?} != [{}]", bs, ws[3]),
            ));
        }
        let (bt, h, wd, cin, k, cout) = (xs[0] * xs[1], xs[2], xs[3], xs[4], ws[0], ws[3]);
        let mut out = Tensor::zeros(&[xs[0], xs[1], h, wd, cout]);
        kernels::conv2d_forward(
            &self.value(x).data,
            bt,
            h,
            wd,
            cin,
            &self.value(w).data,
            k,
            cout,
            &self.value(b).data,
            &mut out.data,
        );
        let ng = self.any_needs_grad(&[x, w, b]);
        Ok(self.push(out, OpRecord::Conv2d { x, w, b }, ng))
    }

    /// Dilated 1D temporal convolution. x: [B,T,H,W,Cin], w: [3,Cin,Cout],
    /// b: [Cout]. Tap offsets {-d, 0, +d} with zero padding along T.
    pub fn conv1d_temporal(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        const OP: &str = "conv1d_temporal";
        if dilation < 1 {
            return Err(Error::param(OP, "dilation must be >= 1"));
        }
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        self.value(x).expect_rank(OP, 5)?;
        self.value(w).expect_rank(OP, 3)?;
        if ws[0] != 3 {
            return Err(Error::dim(OP, format!("kernel size must be 3, got {}", ws[0])));
        }
        if ws[1] != xs[4] {
            return Err(Error::dim(
                OP,
                format!("kernel input channels {} != x channels {}", ws[1], xs[4]),
            ));
        }
        if self.shape(b) != [ws[2]] {
            return Err(Error::dim(
                OP,
                format!("bias shape {:?} != [{}]", self.shape(b), ws[2]),
            ));
        }
        let (bsz, t, p, cin, cout) = (xs[0], xs[1], xs[2] * xs[3], xs[4], ws[2]);
        let mut out = Tensor::zeros(&[xs[0], xs[1], xs[2], xs[3], cout]);
        kernels::conv1d_forward(
            &self.value(x).data,
            bsz,
            t,
            p,
            cin,
            &self.value(w).data,
            cout,
            dilation,
            &self.value(b).data,
            &mut out.data,
        );
        let ng = self.any_needs_grad(&[x, w, b]);
        Ok(self.push(out, OpRecord::Conv1d { x, w, b, dilation }, ng))
    }

    /// Affine map over the last axis. x: [..., Cin], w: [Cin, Cout], b: [Cout].
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        const OP: &str = "dense";
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        self.value(w).expect_rank(OP, 2)?;
        if xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(Error::dim(
                OP,
                format!("x last axis {:?} != w input axis {}", xs.last(), ws[0]),
            ));
        }
        if self.shape(b) != [ws[1]] {
            return Err(Error::dim(
                OP,
                format!("bias shape {:?} != [{}]", self.shape(b), ws[1]),
            ));
        }
        let (cin, cout) = (ws[0], ws[1]);
        let rows = self.value(x).numel() / cin;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = cout;
        let mut out = Tensor::zeros(&out_shape);
        kernels::dense_forward(
            &self.value(x).data,
            rows,
            cin,
            &self.value(w).data,
            cout,
            &self.value(b).data,
            &mut out.data,
        );
        let ng = self.any_needs_grad(&[x, w, b]);
        Ok(self.push(out, OpRecord::Dense { x, w, b }, ng))
    }

    /// Batch norm over all axes except the last (channel) axis.
    ///
    /// Training mode normalizes with batch statistics and returns them so the
    /// caller can fold them into the stored moving statistics; inference mode
    /// is a pure function of the inputs and the stored statistics.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        moving_mean: &Tensor<S>,
        moving_var: &Tensor<S>,
        training: bool,
    ) -> Result<(Var, Option<BnUpdate<S>>)> {
        const OP: &str = "batchnorm";
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| Error::dim(OP, "x must have rank >= 1"))?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::dim(
                    OP,
                    format!("{name} shape {:?} != [{}]", self.shape(v), c),
                ));
            }
        }
        for (name, t) in [("moving_mean", moving_mean), ("moving_var", moving_var)] {
            if t.shape != [c] {
                return Err(Error::dim(OP, format!("{name} shape {:?} != [{}]", t.shape, c)));
            }
        }
        let (mean, var) = if training {
            kernels::channel_moments(&self.value(x).data, c)
        } else {
            (moving_mean.data.clone(), moving_var.data.clone())
        };
        let mut out = Tensor::zeros(&xs);
        kernels::batchnorm_forward(
            &self.value(x).data,
            c,
            &mean,
            &var,
            &self.value(gamma).data,
            &self.value(beta).data,
            S::from_f64(BN_EPSILON),
            &mut out.data,
        );
        let update = training.then(|| BnUpdate {
            mean: mean.clone(),
            var: var.clone(),
        });
        let ng = self.any_needs_grad(&[x, gamma, beta]);
        let v = self.push(
            out,
            OpRecord::BatchNorm {
                x,
                gamma,
                beta,
                training,
                mean,
                var,
            },
            ng,
        );
        Ok((v, update))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data.iter_mut() {
            if *v < S::zero() {
                *v = S::zero();
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(out, OpRecord::Relu { x }, ng)
    }

    /// 2x2 non-overlapping spatial mean. Odd spatial dims are allowed only
    /// with `crop_odd`, which drops the last row/column first.
    pub fn avgpool_spatial(&mut self, x: Var, crop_odd: bool) -> Result<Var> {
        const OP: &str = "avgpool_spatial";
        let xs = self.shape(x).to_vec();
        self.value(x).expect_rank(OP, 5)?;
        let (h, w, c) = (xs[2], xs[3], xs[4]);
        if !crop_odd && (h % 2 != 0 || w % 2 != 0) {
            return Err(Error::dim(
                OP,
                format!("spatial dims {h}x{w} must be even without a crop policy"),
            ));
        }
        let (ch, cw) = (h - h % 2, w - w % 2);
        if ch < 2 || cw < 2 {
            return Err(Error::dim(
                OP,
                format!("spatial dims {h}x{w} too small to pool"),
            ));
        }
        let (oh, ow) = (ch / 2, cw / 2);
        let mut out = Tensor::zeros(&[xs[0], xs[1], oh, ow, c]);
        let quarter = S::from_f64(0.25);
        let in_slab = h * w * c;
        let out_slab = oh * ow * c;
        for (s, o) in out.data.chunks_mut(out_slab).enumerate() {
            let xsl = &self.nodes[x.0].value.data[s * in_slab..(s + 1) * in_slab];
            for r in 0..oh {
                for q in 0..ow {
                    let orow = &mut o[(r * ow + q) * c..(r * ow + q + 1) * c];
                    for ci in 0..c {
                        let a = xsl[((2 * r) * w + 2 * q) * c + ci];
                        let b = xsl[((2 * r) * w + 2 * q + 1) * c + ci];
                        let d = xsl[((2 * r + 1) * w + 2 * q) * c + ci];
                        let e = xsl[((2 * r + 1) * w + 2 * q + 1) * c + ci];
                        orow[ci] = (a + b + d + e) * quarter;
                    }
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(out, OpRecord::AvgPool { x }, ng))
    }

    /// Mean over the spatial axes: [B,T,H,W,C] -> [B,T,C].
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "spatial_mean";
        let xs = self.shape(x).to_vec();
        self.value(x).expect_rank(OP, 5)?;
        let (h, w, c) = (xs[2], xs[3], xs[4]);
        let inv = S::one() / S::from_f64((h * w) as f64);
        let mut out = Tensor::zeros(&[xs[0], xs[1], c]);
        let in_slab = h * w * c;
        for (s, orow) in out.data.chunks_mut(c).enumerate() {
            let xsl = &self.nodes[x.0].value.data[s * in_slab..(s + 1) * in_slab];
            for row in xsl.chunks(c) {
                for (o, &v) in orow.iter_mut().zip(row.iter()) {
                    *o += v;
                }
            }
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(out, OpRecord::SpatialMean { x }, ng))
    }

    /// Concatenation along the last axis; all leading axes must match.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        if xs.is_empty() {
            return Err(Error::param(OP, "empty input list"));
        }
        let lead = self.shape(xs[0])[..self.shape(xs[0]).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::dim(
                    OP,
                    format!("leading axes differ: {:?} vs {:?}", &s, lead),
                ));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut shape = lead;
        shape.push(total);
        let mut out = Tensor::zeros(&shape);
        for r in 0..rows {
            let orow = &mut out.data[r * total..(r + 1) * total];
            let mut off = 0;
            for (&v, &wd) in xs.iter().zip(widths.iter()) {
                orow[off..off + wd]
                    .copy_from_slice(&self.nodes[v.0].value.data[r * wd..(r + 1) * wd]);
                off += wd;
            }
        }
        let ng = self.any_needs_grad(xs);
        Ok(self.push(
            out,
            OpRecord::ConcatLast {
                xs: xs.to_vec(),
                widths,
            },
            ng,
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "add",
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data.iter_mut().zip(self.nodes[b.0].value.data.iter()) {
            *o += v;
        }
        let ng = self.any_needs_grad(&[a, b]);
        Ok(self.push(out, OpRecord::Add { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let mut out = self.value(x).clone();
        for o in out.data.iter_mut() {
            *o *= c;
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(out, OpRecord::Scale { x, c }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::dim(
                "reshape",
                format!("cannot reshape {:?} to {:?}", self.shape(x), shape),
            ));
        }
        let mut out = self.value(x).clone();
        out.shape = shape.to_vec();
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(out, OpRecord::Reshape { x }, ng))
    }

    /// L2-normalizes the last axis; all-zero rows stay zero.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs
            .last()
            .ok_or_else(|| Error::dim("l2_normalize", "x must have rank >= 1"))?;
        let mut out = Tensor::zeros(&xs);
        let mut norms = Vec::with_capacity(out.numel() / c);
        kernels::l2_normalize_forward(&self.value(x).data, c, &mut out.data, &mut norms);
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(out, OpRecord::L2Normalize { x, norms }, ng))
    }

    /// Diagonal band of the frame-pairwise cosine matrix: [B,T,C] -> [B,T,2R+1]
    /// with zeros where the partner frame is out of range. Rows must already
    /// be L2-normalized for the output to be true cosines.
    pub fn cosine_band(&mut self, x: Var, radius: usize) -> Result<Var> {
        const OP: &str = "cosine_band";
        let xs = self.shape(x).to_vec();
        self.value(x).expect_rank(OP, 3)?;
        let (b, t, c) = (xs[0], xs[1], xs[2]);
        let mut out = Tensor::zeros(&[b, t, 2 * radius + 1]);
        kernels::cosine_band_forward(&self.value(x).data, b, t, c, radius, &mut out.data);
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(out, OpRecord::CosineBand { x, radius }, ng))
    }

    /// Mean weighted binary cross-entropy on logits; returns a scalar node.
    /// Targets must be exactly 0 or 1.
    pub fn sigmoid_xent_loss(
        &mut self,
        logits: Var,
        targets: &Tensor<S>,
        pos_weight: S,
    ) -> Result<Var> {
        const OP: &str = "sigmoid_xent_loss";
        if self.shape(logits) != targets.shape {
            return Err(Error::dim(
                OP,
                format!(
                    "logits shape {:?} != targets shape {:?}",
                    self.shape(logits),
                    targets.shape
                ),
            ));
        }
        if targets
            .data
            .iter()
            .any(|&y| y != S::zero() && y != S::one())
        {
            return Err(Error::Input("targets must be binary (0 or 1)".into()));
        }
        if pos_weight <= S::zero() {
            return Err(Error::param(OP, "pos_weight must be positive"));
        }
        let loss =
            kernels::sigmoid_xent_forward(&self.value(logits).data, &targets.data, pos_weight);
        let ng = self.nodes[logits.0].needs_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            OpRecord::SigmoidXent {
                logits,
                targets: targets.clone(),
                pos_weight,
            },
            ng,
        ))
    }

    // -- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss node. Gradients of trainable leaves
    /// are retained and readable via [`Tape::grad`]; intermediate gradient
    /// buffers are freed as soon as they have been propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("loss var does not belong to this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.ran_backward = true;
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![S::one()]);

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            // Leaves keep their accumulated gradient.
            if matches!(self.nodes[i].op, OpRecord::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.dispatch(i, &g);
        }
        Ok(())
    }

    pub fn ran_backward(&self) -> bool {
        self.ran_backward
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulates `f`'s output into the gradient buffer of `v`, creating it
    /// zeroed on first touch. Take/put-back keeps aliased inputs correct.
    fn accum(&mut self, v: Var, f: impl FnOnce(&Tensor<S>, &mut [S])) {
        let mut buf = self.grads[v.0]
            .take()
            .unwrap_or_else(|| vec![S::zero(); self.nodes[v.0].value.numel()]);
        f(&self.nodes[v.0].value, &mut buf);
        self.grads[v.0] = Some(buf);
    }

    fn dispatch(&mut self, i: usize, g: &[S]) {
        // Values are read-only during backward; move the op record out to
        // satisfy the borrow checker, then restore it.
        let op = std::mem::replace(&mut self.nodes[i].op, OpRecord::Leaf);
        match &op {
            OpRecord::Leaf => unreachable!("leaf dispatched"),
            OpRecord::Conv2d { x, w, b } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (bt, h, wd, cin, k, cout) =
                    (xs[0] * xs[1], xs[2], xs[3], xs[4], ws[0], ws[3]);
                if self.needs(*x) {
                    let wk = self.nodes[w.0].value.data.clone();
                    self.accum(*x, |_, dx| {
                        kernels::conv2d_backward_x(g, bt, h, wd, cin, &wk, k, cout, dx);
                    });
                }
                if self.needs(*w) || self.needs(*b) {
                    let xv = &self.nodes[x.0].value.data;
                    let mut dw = vec![S::zero(); self.nodes[w.0].value.numel()];
                    let mut db = vec![S::zero(); cout];
                    kernels::conv2d_backward_w(xv, g, bt, h, wd, cin, k, cout, &mut dw, &mut db);
                    if self.needs(*w) {
                        self.accum(*w, |_, acc| {
                            for (a, d) in acc.iter_mut().zip(dw.iter()) {
                                *a += *d;
                            }
                        });
                    }
                    if self.needs(*b) {
                        self.accum(*b, |_, acc| {
                            for (a, d) in acc.iter_mut().zip(db.iter()) {
                                *a += *d;
                            }
                        });
                    }
                }
            }
            OpRecord::Conv1d { x, w, b, dilation } => {
                let xs = self.shape(*x).to_vec();
                let cout = self.shape(*w)[2];
                let (bsz, t, p, cin) = (xs[0], xs[1], xs[2] * xs[3], xs[4]);
                if self.needs(*x) {
                    let wk = self.nodes[w.0].value.data.clone();
                    self.accum(*x, |_, dx| {
                        kernels::conv1d_backward_x(g, bsz, t, p, cin, &wk, cout, *dilation, dx);
                    });
                }
                if self.needs(*w) || self.needs(*b) {
                    let xv = &self.nodes[x.0].value.data;
                    let mut dw = vec![S::zero(); self.nodes[w.0].value.numel()];
                    let mut db = vec![S::zero(); cout];
                    kernels::conv1d_backward_w(
                        xv, g, bsz, t, p, cin, cout, *dilation, &mut dw, &mut db,
                    );
                    if self.needs(*w) {
                        self.accum(*w, |_, acc| {
                            for (a, d) in acc.iter_mut().zip(dw.iter()) {
                                *a += *d;
                            }
                        });
                    }
                    if self.needs(*b) {
                        self.accum(*b, |_, acc| {
                            for (a, d) in acc.iter_mut().zip(db.iter()) {
                                *a += *d;
                            }
                        });
                    }
                }
            }
            OpRecord::Dense { x, w, b } => {
                let ws = self.shape(*w).to_vec();
                let (cin, cout) = (ws[0], ws[1]);
                let rows = self.nodes[x.0].value.numel() / cin;
                if self.needs(*x) {
                    let wk = self.nodes[w.0].value.data.clone();
                    self.accum(*x, |_, dx| {
                        kernels::dense_backward_x(g, &wk, cin, cout, dx);
                    });
                }
                if self.needs(*w) || self.needs(*b) {
                    let xv = &self.nodes[x.0].value.data;
                    let mut dw = vec![S::zero(); cin * cout];
                    let mut db = vec![S::zero(); cout];
                    kernels::dense_backward_w(xv, g, rows, cin, cout, &mut dw, &mut db);
                    if self.needs(*w) {
                        self.accum(*w, |_, acc| {
                            for (a, d) in acc.iter_mut().zip(dw.iter()) {
                                *a += *d;
                            }
                        });
                    }
                    if self.needs(*b) {
                        self.accum(*b, |_, acc| {
                            for (a, d) in acc.iter_mut().zip(db.iter()) {
                                *a += *d;
                            }
                        });
                    }
                }
            }
            OpRecord::BatchNorm {
                x,
                gamma,
                beta,
                training,
                mean,
                var,
            } => {
                let c = *self.shape(*x).last().unwrap();
                let xv = self.nodes[x.0].value.data.clone();
                let gv = self.nodes[gamma.0].value.data.clone();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                let mut dx_buf = self.needs(*x).then(|| vec![S::zero(); xv.len()]);
                let eps = S::from_f64(BN_EPSILON);
                if *training {
                    kernels::batchnorm_backward_train(
                        &xv,
                        g,
                        c,
                        mean,
                        var,
                        &gv,
                        eps,
                        dx_buf.as_deref_mut(),
                        &mut dgamma,
                        &mut dbeta,
                    );
                } else {
                    kernels::batchnorm_backward_infer(
                        &xv,
                        g,
                        c,
                        mean,
                        var,
                        &gv,
                        eps,
                        dx_buf.as_deref_mut(),
                        &mut dgamma,
                        &mut dbeta,
                    );
                }
                if let Some(dx) = dx_buf {
                    self.accum(*x, |_, acc| {
                        for (a, d) in acc.iter_mut().zip(dx.iter()) {
                            *a += *d;
                        }
                    });
                }
                if self.needs(*gamma) {
                    self.accum(*gamma, |_, acc| {
                        for (a, d) in acc.iter_mut().zip(dgamma.iter()) {
                            *a += *d;
                        }
                    });
                }
                if self.needs(*beta) {
                    self.accum(*beta, |_, acc| {
                        for (a, d) in acc.iter_mut().zip(dbeta.iter()) {
                            *a += *d;
                        }
                    });
                }
            }
            OpRecord::Relu { x } => {
                if self.needs(*x) {
                    let yv = self.nodes[i].value.data.clone();
                    self.accum(*x, |_, dx| {
                        for ((d, &gv), &y) in dx.iter_mut().zip(g.iter()).zip(yv.iter()) {
                            if y > S::zero() {
                                *d += gv;
                            }
                        }
                    });
                }
            }
            OpRecord::AvgPool { x } => {
                if self.needs(*x) {
                    let xs = self.shape(*x).to_vec();
                    let os = self.nodes[i].value.shape.clone();
                    let (h, w, c) = (xs[2], xs[3], xs[4]);
                    let (oh, ow) = (os[2], os[3]);
                    let quarter = S::from_f64(0.25);
                    let in_slab = h * w * c;
                    let out_slab = oh * ow * c;
                    self.accum(*x, |_, dx| {
                        for (s, go) in g.chunks(out_slab).enumerate() {
                            let dxs = &mut dx[s * in_slab..(s + 1) * in_slab];
                            for r in 0..oh {
                                for q in 0..ow {
                                    for ci in 0..c {
                                        let gv = go[(r * ow + q) * c + ci] * quarter;
                                        dxs[((2 * r) * w + 2 * q) * c + ci] += gv;
                                        dxs[((2 * r) * w + 2 * q + 1) * c + ci] += gv;
                                        dxs[((2 * r + 1) * w + 2 * q) * c + ci] += gv;
                                        dxs[((2 * r + 1) * w + 2 * q + 1) * c + ci] += gv;
                                    }
                                }
                            }
                        }
                    });
                }
            }
            OpRecord::SpatialMean { x } => {
                if self.needs(*x) {
                    let xs = self.shape(*x).to_vec();
                    let (h, w, c) = (xs[2], xs[3], xs[4]);
                    let inv = S::one() / S::from_f64((h * w) as f64);
                    let in_slab = h * w * c;
                    self.accum(*x, |_, dx| {
                        for (s, grow) in g.chunks(c).enumerate() {
                            let dxs = &mut dx[s * in_slab..(s + 1) * in_slab];
                            for row in dxs.chunks_mut(c) {
                                for (d, &gv) in row.iter_mut().zip(grow.iter()) {
                                    *d += gv * inv;
                                }
                            }
                        }
                    });
                }
            }
            OpRecord::ConcatLast { xs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = self.nodes[i].value.numel() / total;
                let mut off = 0;
                for (&v, &wd) in xs.iter().zip(widths.iter()) {
                    if self.needs(v) {
                        let start = off;
                        self.accum(v, |_, dx| {
                            for r in 0..rows {
                                let grow = &g[r * total + start..r * total + start + wd];
                                for (d, &gv) in
                                    dx[r * wd..(r + 1) * wd].iter_mut().zip(grow.iter())
                                {
                                    *d += gv;
                                }
                            }
                        });
                    }
                    off += wd;
                }
            }
            OpRecord::Add { a, b } => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        self.accum(v, |_, dx| {
                            for (d, &gv) in dx.iter_mut().zip(g.iter()) {
                                *d += gv;
                            }
                        });
                    }
                }
            }
            OpRecord::Scale { x, c } => {
                if self.needs(*x) {
                    let c = *c;
                    self.accum(*x, |_, dx| {
                        for (d, &gv) in dx.iter_mut().zip(g.iter()) {
                            *d += c * gv;
                        }
                    });
                }
            }
            OpRecord::Reshape { x } => {
                if self.needs(*x) {
                    self.accum(*x, |_, dx| {
                        for (d, &gv) in dx.iter_mut().zip(g.iter()) {
                            *d += gv;
                        }
                    });
                }
            }
            OpRecord::L2Normalize { x, norms } => {
                if self.needs(*x) {
                    let c = *self.shape(*x).last().unwrap();
                    self.accum(*x, |xv, dx| {
                        kernels::l2_normalize_backward(&xv.data, g, c, norms, dx);
                    });
                }
            }
            OpRecord::CosineBand { x, radius } => {
                if self.needs(*x) {
                    let xs = self.shape(*x).to_vec();
                    let (b, t, c) = (xs[0], xs[1], xs[2]);
                    self.accum(*x, |xv, dx| {
                        kernels::cosine_band_backward(&xv.data, g, b, t, c, *radius, dx);
                    });
                }
            }
            OpRecord::SigmoidXent {
                logits,
                targets,
                pos_weight,
            } => {
                if self.needs(*logits) {
                    let gout = g[0];
                    self.accum(*logits, |lv, dx| {
                        kernels::sigmoid_xent_backward(
                            &lv.data,
                            &targets.data,
                            *pos_weight,
                            gout,
                            dx,
                        );
                    });
                }
            }
        }
        self.nodes[i].op = op;
    }
}
