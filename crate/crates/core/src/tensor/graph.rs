use super::conv::{col2im_add_ld, conv_output_extent, im2col_ld};
use super::{expect_rank, matmul, MatRef, Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        /// Unfolded input, kept only when the weight needs a gradient.
        cols: Option<Vec<T>>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Reshape {
        input: Var,
    },
    Relu {
        input: Var,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    AddScalar {
        input: Var,
    },
    Square {
        input: Var,
    },
    PixelShuffle {
        input: Var,
        r: usize,
    },
    PixelUnshuffle {
        input: Var,
        r: usize,
    },
    Couple {
        reference: Var,
        tuned: Var,
        alpha: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    MeanAbsError {
        pred: Var,
        target: Var,
    },
    MeanSquaredError {
        pred: Var,
        target: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single forward pass recorded for differentiation.
///
/// Nodes are appended in execution order and never mutated, so the node list
/// is a topological order of the computation.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    differentiated: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the leaves of a graph.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf created with `requires_grad`. Leaves that did not
    /// participate in the loss report zeros.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch { op, detail: format!("{a:?} vs {b:?}") });
    }
    Ok(())
}

/// `[C, N, P]` to `[N, C, P]`.
fn batch_major<T: Scalar>(wide: &[T], c: usize, n: usize, plane: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(wide.len());
    for b in 0..n {
        for ch in 0..c {
            let start = (ch * n + b) * plane;
            out.extend_from_slice(&wide[start..start + plane]);
        }
    }
    out
}

/// `[N, C, P]` to `[C, N, P]`.
fn channel_major<T: Scalar>(data: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for ch in 0..c {
        for b in 0..n {
            let start = (b * c + ch) * plane;
            out.extend_from_slice(&data[start..start + plane]);
        }
    }
    out
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e = *e + *d),
        None => *slot = Some(delta),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), differentiated: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Whether gradients will flow into `v` during [`Graph::backward`].
    pub fn needs_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Records an input value. Only leaves with `requires_grad` receive
    /// gradients from [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// 2-D convolution with zero padding over an `[N, Cin, H, W]` input and a
    /// `[Cout, Cin, k, k]` weight.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        expect_rank(OP, self.shape(input), 4)?;
        expect_rank(OP, self.shape(weight), 4)?;
        let [n, cin, h, w] = <[usize; 4]>::try_from(self.shape(input)).unwrap();
        let [cout, wcin, kh, kw] = <[usize; 4]>::try_from(self.shape(weight)).unwrap();
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                detail: format!("input has {cin} channels, weight expects {wcin}"),
            });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                detail: format!("kernel {kh}x{kw} must be square and odd"),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument { op: OP, detail: "stride must be positive".into() });
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    detail: format!("bias shape {:?}, expected [{cout}]", self.shape(b)),
                });
            }
        }
        let k = kh;
        let (oh, ow) = match (conv_output_extent(h, k, stride, pad), conv_output_extent(w, k, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: OP,
                    detail: format!("input {h}x{w} with pad {pad} smaller than kernel {k}"),
                })
            }
        };
        let plane = oh * ow;
        let ckk = cin * k * k;
        let ld = n * plane;
        // Columns of all batch items side by side: [C*k*k, N*Ho*Wo].
        let mut cols = vec![T::zero(); ckk * ld];
        let mut wide = vec![T::zero(); cout * ld];
        {
            let x = self.data(input);
            for b in 0..n {
                let img = &x[b * cin * h * w..(b + 1) * cin * h * w];
                im2col_ld(img, cin, h, w, k, stride, pad, &mut cols[b * plane..], ld);
            }
            if let Some(bv) = bias {
                for (row, &bias_v) in wide.chunks_mut(ld).zip(self.data(bv)) {
                    row.iter_mut().for_each(|v| *v = bias_v);
                }
            }
            matmul(MatRef::new(self.data(weight), cout, ckk), MatRef::new(&cols, ckk, ld), &mut wide, bias.is_some());
        }
        let out = batch_major(&wide, cout, n, plane);
        let keep_cols = self.needs(weight);
        finite(OP, &out)?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        let value = Tensor::new(vec![n, cout, oh, ow], out)?;
        let cols = keep_cols.then_some(cols);
        Ok(self.push(value, Op::Conv2d { input, weight, bias, stride, pad, cols }, needs))
    }

    /// `input [N, Din] x weight[Dout, Din]^T (+ bias[Dout])`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        expect_rank(OP, self.shape(input), 2)?;
        expect_rank(OP, self.shape(weight), 2)?;
        let (n, din) = (self.shape(input)[0], self.shape(input)[1]);
        let (dout, wdin) = (self.shape(weight)[0], self.shape(weight)[1]);
        if din != wdin {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                detail: format!("input width {din}, weight expects {wdin}"),
            });
        }
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    detail: format!("bias shape {:?}, expected [{dout}]", self.shape(b)),
                });
            }
            let bv = self.data(b);
            out.chunks_mut(dout).for_each(|row| row.copy_from_slice(bv));
        }
        matmul(
            MatRef::new(self.data(input), n, din),
            MatRef::new(self.data(weight), dout, din).t(),
            &mut out,
            bias.is_some(),
        );
        finite(OP, &out)?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(vec![n, dout], out)?, Op::Linear { input, weight, bias }, needs))
    }

    fn unary(&mut self, input: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = &self.nodes[input.0].value;
        let data = v.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(input);
        self.push(value, op, needs)
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = Tensor::new(shape, self.data(input).to_vec())?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Reshape { input }, needs))
    }

    /// `max(0, x)`; the subgradient at zero is zero.
    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, Op::Relu { input }, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Var {
        self.unary(input, Op::LeakyRelu { input, slope }, move |x| if x > T::zero() { x } else { x * slope })
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let v = self.unary(input, Op::Scale { input, factor }, move |x| x * factor);
        finite("scale", self.data(v))?;
        Ok(v)
    }

    pub fn add_scalar(&mut self, input: Var, c: T) -> Result<Var> {
        let v = self.unary(input, Op::AddScalar { input }, move |x| x + c);
        finite("add_scalar", self.data(v))?;
        Ok(v)
    }

    pub fn square(&mut self, input: Var) -> Result<Var> {
        let v = self.unary(input, Op::Square { input }, |x| x * x);
        finite("square", self.data(v))?;
        Ok(v)
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        same_shape(op_name, self.shape(a), self.shape(b))?;
        let data: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        finite(op_name, &data)?;
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    /// Depth-to-space: `[N, C*r*r, H, W] -> [N, C, r*H, r*W]` with
    /// `out[n, c, r*h+i, r*w+j] = in[n, c*r*r + i*r + j, h, w]`.
    pub fn pixel_shuffle(&mut self, input: Var, r: usize) -> Result<Var> {
        const OP: &str = "pixel_shuffle";
        expect_rank(OP, self.shape(input), 4)?;
        let [n, crr, h, w] = <[usize; 4]>::try_from(self.shape(input)).unwrap();
        if r == 0 || crr % (r * r) != 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                detail: format!("{crr} channels not divisible by r^2 = {}", r * r),
            });
        }
        let c = crr / (r * r);
        let mut out = vec![T::zero(); n * crr * h * w];
        shuffle_indices(n, c, h, w, r, |src, dst| out[dst] = self.data(input)[src]);
        let needs = self.needs(input);
        Ok(self.push(Tensor::new(vec![n, c, h * r, w * r], out)?, Op::PixelShuffle { input, r }, needs))
    }

    /// Space-to-depth, the inverse of [`Graph::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, input: Var, r: usize) -> Result<Var> {
        const OP: &str = "pixel_unshuffle";
        expect_rank(OP, self.shape(input), 4)?;
        let [n, c, hr, wr] = <[usize; 4]>::try_from(self.shape(input)).unwrap();
        if r == 0 || hr % r != 0 || wr % r != 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                detail: format!("spatial {hr}x{wr} not divisible by {r}"),
            });
        }
        let (h, w) = (hr / r, wr / r);
        let mut out = vec![T::zero(); n * c * hr * wr];
        shuffle_indices(n, c, h, w, r, |src, dst| out[src] = self.data(input)[dst]);
        let needs = self.needs(input);
        Ok(self.push(Tensor::new(vec![n, c * r * r, h, w], out)?, Op::PixelUnshuffle { input, r }, needs))
    }

    /// Per-channel affine coupling `(1 - a_c) * reference + a_c * tuned` of two
    /// `[N, C, H, W]` feature maps with a `[C]` coefficient vector. Channels
    /// with `a_c == 0` or `a_c == 1` copy the corresponding input exactly.
    pub fn couple(&mut self, reference: Var, tuned: Var, alpha: Var) -> Result<Var> {
        const OP: &str = "couple";
        expect_rank(OP, self.shape(reference), 4)?;
        same_shape(OP, self.shape(reference), self.shape(tuned))?;
        let c = self.shape(reference)[1];
        if self.shape(alpha) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                detail: format!("coefficients {:?} for {c} channels", self.shape(alpha)),
            });
        }
        let plane = self.shape(reference)[2] * self.shape(reference)[3];
        let r = self.data(reference);
        let t = self.data(tuned);
        let a = self.data(alpha);
        let mut out = Vec::with_capacity(r.len());
        for ((rc, tc), i) in r.chunks(plane).zip(t.chunks(plane)).zip(0..) {
            let ac = a[i % c];
            if ac == T::zero() {
                out.extend_from_slice(rc);
            } else if ac == T::one() {
                out.extend_from_slice(tc);
            } else {
                let keep = T::one() - ac;
                out.extend(rc.iter().zip(tc).map(|(&x, &y)| keep * x + ac * y));
            }
        }
        finite(OP, &out)?;
        let needs = self.needs(reference) || self.needs(tuned) || self.needs(alpha);
        let value = Tensor::new(self.shape(reference).to_vec(), out)?;
        Ok(self.push(value, Op::Couple { reference, tuned, alpha }, needs))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        expect_rank("global_avg_pool", self.shape(input), 4)?;
        let [n, c, h, w] = <[usize; 4]>::try_from(self.shape(input)).unwrap();
        let inv = T::one() / T::from_usize(h * w).unwrap();
        let data = self.data(input).chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let needs = self.needs(input);
        Ok(self.push(Tensor::new(vec![n, c], data)?, Op::GlobalAvgPool { input }, needs))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.data(input).iter().copied().sum();
        let needs = self.needs(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, needs)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let d = self.data(input);
        let s = d.iter().copied().sum::<T>() / T::from_usize(d.len().max(1)).unwrap();
        let needs = self.needs(input);
        self.push(Tensor::scalar(s), Op::Mean { input }, needs)
    }

    pub fn mean_abs_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_shape("mean_abs_error", self.shape(pred), self.shape(target))?;
        let d = self.data(pred);
        let n = T::from_usize(d.len().max(1)).unwrap();
        let s = d.iter().zip(self.data(target)).map(|(&p, &t)| (p - t).abs()).sum::<T>() / n;
        finite("mean_abs_error", &[s])?;
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(s), Op::MeanAbsError { pred, target }, needs))
    }

    pub fn mean_squared_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_shape("mean_squared_error", self.shape(pred), self.shape(target))?;
        let d = self.data(pred);
        let n = T::from_usize(d.len().max(1)).unwrap();
        let s = d.iter().zip(self.data(target)).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() / n;
        finite("mean_squared_error", &[s])?;
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(s), Op::MeanSquaredError { pred, target }, needs))
    }

    /// Reverse sweep from a scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.differentiated {
            return Err(TensorError::AlreadyDifferentiated);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.needs(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                if grads[id].is_none() {
                    grads[id] = Some(vec![T::zero(); node.value.len()]);
                }
            } else {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let mut send = |v: Var, delta: Vec<T>| {
            if self.needs(v) {
                accumulate(&mut grads[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, stride, pad, cols } => {
                let [n, cin, h, w] = <[usize; 4]>::try_from(self.shape(*input)).unwrap();
                let [cout, _, k, _] = <[usize; 4]>::try_from(self.shape(*weight)).unwrap();
                let [_, _, oh, ow] = <[usize; 4]>::try_from(node.value.shape()).unwrap();
                let plane = oh * ow;
                let ckk = cin * k * k;
                let ld = n * plane;
                // Upstream gradient as [Cout, N*Ho*Wo], matching the column layout.
                let gw = channel_major(g, n, cout, plane);
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    send(b, gw.chunks(ld).map(|row| row.iter().copied().sum::<T>()).collect());
                }
                if self.needs(*weight) {
                    let cols = cols.as_ref().expect("columns saved when weight needs grad");
                    let mut dw = vec![T::zero(); cout * ckk];
                    matmul(MatRef::new(&gw, cout, ld), MatRef::new(cols, ckk, ld).t(), &mut dw, false);
                    send(*weight, dw);
                }
                if self.needs(*input) {
                    let mut dcols = vec![T::zero(); ckk * ld];
                    matmul(
                        MatRef::new(self.data(*weight), cout, ckk).t(),
                        MatRef::new(&gw, cout, ld),
                        &mut dcols,
                        false,
                    );
                    let mut dx = vec![T::zero(); n * cin * h * w];
                    for (b, dst) in dx.chunks_mut(cin * h * w).enumerate() {
                        col2im_add_ld(&dcols[b * plane..], cin, h, w, k, *stride, *pad, dst, ld);
                    }
                    send(*input, dx);
                }
            }
            Op::Linear { input, weight, bias } => {
                let (n, din) = (self.shape(*input)[0], self.shape(*input)[1]);
                let dout = self.shape(*weight)[0];
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    let mut db = vec![T::zero(); dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    send(b, db);
                }
                if self.needs(*weight) {
                    let mut dw = vec![T::zero(); dout * din];
                    matmul(MatRef::new(g, n, dout).t(), MatRef::new(self.data(*input), n, din), &mut dw, false);
                    send(*weight, dw);
                }
                if self.needs(*input) {
                    let mut dx = vec![T::zero(); n * din];
                    matmul(MatRef::new(g, n, dout), MatRef::new(self.data(*weight), dout, din), &mut dx, false);
                    send(*input, dx);
                }
            }
            Op::Reshape { input } => send(*input, g.to_vec()),
            Op::Relu { input } => {
                let x = self.data(*input);
                send(*input, g.iter().zip(x).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect());
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.data(*input);
                send(*input, g.iter().zip(x).map(|(&g, &x)| if x > T::zero() { g } else { g * *slope }).collect());
            }
            Op::Add { a, b } => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub { a, b } => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Scale { input, factor } => send(*input, g.iter().map(|&v| v * *factor).collect()),
            Op::AddScalar { input } => send(*input, g.to_vec()),
            Op::Square { input } => {
                let two = T::one() + T::one();
                send(*input, g.iter().zip(self.data(*input)).map(|(&g, &x)| two * x * g).collect());
            }
            Op::PixelShuffle { input, r } => {
                let [n, c, hr, wr] = <[usize; 4]>::try_from(node.value.shape()).unwrap();
                let mut dx = vec![T::zero(); g.len()];
                shuffle_indices(n, c, hr / r, wr / r, *r, |src, dst| dx[src] = g[dst]);
                send(*input, dx);
            }
            Op::PixelUnshuffle { input, r } => {
                let [n, c, hr, wr] = <[usize; 4]>::try_from(self.shape(*input)).unwrap();
                let mut dx = vec![T::zero(); g.len()];
                shuffle_indices(n, c, hr / r, wr / r, *r, |src, dst| dx[dst] = g[src]);
                send(*input, dx);
            }
            Op::Couple { reference, tuned, alpha } => {
                let shape = self.shape(*reference);
                let c = shape[1];
                let plane = shape[2] * shape[3];
                let a = self.data(*alpha);
                if self.needs(*reference) {
                    let mut dr = Vec::with_capacity(g.len());
                    for (gc, i) in g.chunks(plane).zip(0..) {
                        let keep = T::one() - a[i % c];
                        dr.extend(gc.iter().map(|&v| keep * v));
                    }
                    send(*reference, dr);
                }
                if self.needs(*tuned) {
                    let mut dt = Vec::with_capacity(g.len());
                    for (gc, i) in g.chunks(plane).zip(0..) {
                        let ac = a[i % c];
                        dt.extend(gc.iter().map(|&v| ac * v));
                    }
                    send(*tuned, dt);
                }
                if self.needs(*alpha) {
                    let r = self.data(*reference);
                    let t = self.data(*tuned);
                    let mut da = vec![T::zero(); c];
                    for (i, ((gc, rc), tc)) in g.chunks(plane).zip(r.chunks(plane)).zip(t.chunks(plane)).enumerate() {
                        let s: T = gc.iter().zip(rc).zip(tc).map(|((&g, &r), &t)| g * (t - r)).sum();
                        da[i % c] = da[i % c] + s;
                    }
                    send(*alpha, da);
                }
            }
            Op::GlobalAvgPool { input } => {
                let [_, _, h, w] = <[usize; 4]>::try_from(self.shape(*input)).unwrap();
                let inv = T::one() / T::from_usize(h * w).unwrap();
                let mut dx = Vec::with_capacity(self.value(*input).len());
                for &v in g {
                    dx.extend(std::iter::repeat_n(v * inv, h * w));
                }
                send(*input, dx);
            }
            Op::Sum { input } => send(*input, vec![g[0]; self.value(*input).len()]),
            Op::Mean { input } => {
                let n = self.value(*input).len();
                send(*input, vec![g[0] / T::from_usize(n.max(1)).unwrap(); n]);
            }
            Op::MeanAbsError { pred, target } => {
                let p = self.data(*pred);
                let t = self.data(*target);
                let scale = g[0] / T::from_usize(p.len().max(1)).unwrap();
                let d: Vec<T> = p.iter().zip(t).map(|(&p, &t)| sign(p - t) * scale).collect();
                if self.needs(*target) {
                    send(*target, d.iter().map(|&v| -v).collect());
                }
                send(*pred, d);
            }
            Op::MeanSquaredError { pred, target } => {
                let p = self.data(*pred);
                let t = self.data(*target);
                let two = T::one() + T::one();
                let scale = two * g[0] / T::from_usize(p.len().max(1)).unwrap();
                let d: Vec<T> = p.iter().zip(t).map(|(&p, &t)| (p - t) * scale).collect();
                if self.needs(*target) {
                    send(*target, d.iter().map(|&v| -v).collect());
                }
                send(*pred, d);
            }
        }
        Ok(())
    }
}

/// Subgradient of `|x|`, zero at the kink.
fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Visits every `(packed index, shuffled index)` pair of a depth-to-space
/// rearrangement with `c` output channels on an `h x w` low-resolution grid.
fn shuffle_indices(n: usize, c: usize, h: usize, w: usize, r: usize, mut f: impl FnMut(usize, usize)) {
    let (hr, wr) = (h * r, w * r);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src_c = ch * r * r + i * r + j;
                    for y in 0..h {
                        for x in 0..w {
                            let src = ((b * c * r * r + src_c) * h + y) * w + x;
                            let dst = ((b * c + ch) * hr + y * r + i) * wr + x * r + j;
                            f(src, dst);
                        }
                    }
                }
            }
        }
    }
}
