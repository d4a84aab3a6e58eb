//! Reverse-mode differentiation over an explicit operation tape.
//!
//! A forward pass records one node per executed operation; `backward`
//! replays the tape in reverse, accumulating gradients into every node.
//! Parameters enter as leaves tagged with their `Param` id so gradients
//! can be routed back to the owning module after the pass.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels;
use crate::param::Param;
use crate::tensor::{Shape4, Tensor4};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone, Copy)]
enum Half {
    First,
    Second,
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, groups: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    PRelu { x: Var, alpha: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Concat { a: Var, b: Var },
    SliceChannels { x: Var, start: usize },
    PairedSoftmax { a: Var, b: Var, half: Half },
    AvgPool2 { x: Var },
    UpNearest2 { x: Var },
    SumAll { x: Var },
    /// value = sqrt(mean(x^2)); the per-level term of the multi-scale loss.
    Rms { x: Var },
}

struct Node {
    value: Tensor4,
    grad: Option<Tensor4>,
    op: Op,
    param_id: Option<u64>,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor4, op: Op, param_id: Option<u64>) -> Var {
        self.nodes.push(Node { value, grad: None, op, param_id });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape("variable does not belong to this tape".into()));
        }
        Ok(())
    }

    /// Record a constant input; gradients flow to it but are discarded.
    pub fn leaf(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Leaf, None)
    }

    /// Record a parameter leaf. The value is copied onto the tape.
    pub fn param(&mut self, p: &Param) -> Var {
        self.push(p.value.clone(), Op::Leaf, Some(p.id()))
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.index].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor4> {
        self.nodes[v.index].grad.as_ref()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, groups: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let out = kernels::conv2d_raw(
            &self.nodes[x.index].value,
            &self.nodes[w.index].value,
            &self.nodes[b.index].value,
            groups,
        )?;
        Ok(self.push(out, Op::Conv2d { x, w, b, groups }, None))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let out = kernels::layer_norm(
            &self.nodes[x.index].value,
            &self.nodes[gamma.index].value,
            &self.nodes[beta.index].value,
        )?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta }, None))
    }

    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        self.check(x)?;
        self.check(alpha)?;
        let out = kernels::prelu(&self.nodes[x.index].value, &self.nodes[alpha.index].value)?;
        Ok(self.push(out, Op::PRelu { x, alpha }, None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.nodes[a.index].value.ew_add(&self.nodes[b.index].value)?;
        Ok(self.push(out, Op::Add { a, b }, None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.nodes[a.index].value.ew_sub(&self.nodes[b.index].value)?;
        Ok(self.push(out, Op::Sub { a, b }, None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.nodes[a.index].value.ew_mul(&self.nodes[b.index].value)?;
        Ok(self.push(out, Op::Mul { a, b }, None))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.nodes[x.index].value.scale(c);
        Ok(self.push(out, Op::Scale { x, c }, None))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = kernels::channel_concat(&self.nodes[a.index].value, &self.nodes[b.index].value)?;
        Ok(self.push(out, Op::Concat { a, b }, None))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let out = kernels::slice_channels(&self.nodes[x.index].value, start, len)?;
        Ok(self.push(out, Op::SliceChannels { x, start }, None))
    }

    pub fn split(&mut self, x: Var, c: usize) -> Result<(Var, Var)> {
        let total = self.value(x).shape().channels;
        if c == 0 || c >= total {
            return Err(Error::invalid(format!(
                "split point {} invalid for {} channels",
                c, total
            )));
        }
        let first = self.slice_channels(x, 0, c)?;
        let second = self.slice_channels(x, c, total - c)?;
        Ok((first, second))
    }

    pub fn paired_softmax(&mut self, a: Var, b: Var) -> Result<(Var, Var)> {
        self.check(a)?;
        self.check(b)?;
        let (oa, ob) =
            kernels::paired_softmax(&self.nodes[a.index].value, &self.nodes[b.index].value)?;
        let va = self.push(oa, Op::PairedSoftmax { a, b, half: Half::First }, None);
        let vb = self.push(ob, Op::PairedSoftmax { a, b, half: Half::Second }, None);
        Ok((va, vb))
    }

    pub fn downsample2x(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = kernels::downsample2x(&self.nodes[x.index].value)?;
        Ok(self.push(out, Op::AvgPool2 { x }, None))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = kernels::upsample_nearest2x(&self.nodes[x.index].value);
        Ok(self.push(out, Op::UpNearest2 { x }, None))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.nodes[x.index].value.sum();
        let out = Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![s]).unwrap();
        Ok(self.push(out, Op::SumAll { x }, None))
    }

    pub fn rms(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = &self.nodes[x.index].value;
        let ms = t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
        let out = Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![ms.sqrt()]).unwrap();
        Ok(self.push(out, Op::Rms { x }, None))
    }

    fn accumulate(&mut self, v: Var, g: Tensor4) {
        match &mut self.nodes[v.index].grad {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Run reverse accumulation from a scalar output. Consumes the tape's
    /// gradient state: a second call without a fresh forward is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.consumed {
            return Err(Error::Tape("backward already called on this tape".into()));
        }
        self.consumed = true;
        let ls = self.nodes[loss.index].value.shape();
        if ls.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward requires a scalar (1,1,1,1) output, got {:?}",
                ls.as_array()
            )));
        }
        self.nodes[loss.index].grad = Some(Tensor4::full(ls, 1.0));

        for i in (0..self.nodes.len()).rev() {
            let gout = match self.nodes[i].grad.clone() {
                Some(g) => g,
                None => continue,
            };
            // Split borrow: read inputs immutably, then accumulate.
            match &self.nodes[i].op {
                Op::Leaf => {}
                &Op::Conv2d { x, w, b, groups } => {
                    let (gx, gw, gb) = kernels::conv2d_backward(
                        &self.nodes[x.index].value,
                        &self.nodes[w.index].value,
                        groups,
                        &gout,
                    );
                    self.accumulate(x, gx);
                    self.accumulate(w, gw);
                    self.accumulate(b, gb);
                }
                &Op::LayerNorm { x, gamma, beta } => {
                    let (gx, gg, gb) = kernels::layer_norm_backward(
                        &self.nodes[x.index].value,
                        &self.nodes[gamma.index].value,
                        &gout,
                    );
                    self.accumulate(x, gx);
                    self.accumulate(gamma, gg);
                    self.accumulate(beta, gb);
                }
                &Op::PRelu { x, alpha } => {
                    let (gx, ga) = kernels::prelu_backward(
                        &self.nodes[x.index].value,
                        &self.nodes[alpha.index].value,
                        &gout,
                    );
                    self.accumulate(x, gx);
                    self.accumulate(alpha, ga);
                }
                &Op::Add { a, b } => {
                    self.accumulate(a, gout.clone());
                    self.accumulate(b, gout);
                }
                &Op::Sub { a, b } => {
                    self.accumulate(a, gout.clone());
                    self.accumulate(b, gout.scale(-1.0));
                }
                &Op::Mul { a, b } => {
                    let ga = gout.ew_mul(&self.nodes[b.index].value).unwrap();
                    let gb = gout.ew_mul(&self.nodes[a.index].value).unwrap();
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                &Op::Scale { x, c } => {
                    self.accumulate(x, gout.scale(c));
                }
                &Op::Concat { a, b } => {
                    let ca = self.nodes[a.index].value.shape().channels;
                    let cb = self.nodes[b.index].value.shape().channels;
                    let ga = kernels::slice_channels(&gout, 0, ca).unwrap();
                    let gb = kernels::slice_channels(&gout, ca, cb).unwrap();
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                &Op::SliceChannels { x, start } => {
                    let xs = self.nodes[x.index].value.shape();
                    let gs = gout.shape();
                    let mut gx = Tensor4::zeros(xs);
                    for bi in 0..gs.batch {
                        for ci in 0..gs.channels {
                            for y in 0..gs.height {
                                for xc in 0..gs.width {
                                    gx.set(bi, start + ci, y, xc, gout.at(bi, ci, y, xc));
                                }
                            }
                        }
                    }
                    self.accumulate(x, gx);
                }
                &Op::PairedSoftmax { a, b, half } => {
                    // d out/d own_logit = v(1-v); d out/d other = -v(1-v)
                    let v = &self.nodes[i].value;
                    let mut gown = Tensor4::zeros(v.shape());
                    for j in 0..v.numel() {
                        let s = v.data()[j];
                        gown.data_mut()[j] = gout.data()[j] * s * (1.0 - s);
                    }
                    let gother = gown.scale(-1.0);
                    match half {
                        Half::First => {
                            self.accumulate(a, gown);
                            self.accumulate(b, gother);
                        }
                        Half::Second => {
                            self.accumulate(b, gown);
                            self.accumulate(a, gother);
                        }
                    }
                }
                &Op::AvgPool2 { x } => {
                    let xs = self.nodes[x.index].value.shape();
                    let mut gx = Tensor4::zeros(xs);
                    let gs = gout.shape();
                    for bi in 0..gs.batch {
                        for ci in 0..gs.channels {
                            for y in 0..gs.height {
                                for xc in 0..gs.width {
                                    let g = gout.at(bi, ci, y, xc) / 4.0;
                                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                        let idx = gx.idx(bi, ci, 2 * y + dy, 2 * xc + dx);
                                        gx.data_mut()[idx] += g;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(x, gx);
                }
                &Op::UpNearest2 { x } => {
                    let xs = self.nodes[x.index].value.shape();
                    let mut gx = Tensor4::zeros(xs);
                    let gs = gout.shape();
                    for bi in 0..gs.batch {
                        for ci in 0..gs.channels {
                            for y in 0..gs.height {
                                for xc in 0..gs.width {
                                    let idx = gx.idx(bi, ci, y / 2, xc / 2);
                                    gx.data_mut()[idx] += gout.at(bi, ci, y, xc);
                                }
                            }
                        }
                    }
                    self.accumulate(x, gx);
                }
                &Op::SumAll { x } => {
                    let g = gout.data()[0];
                    let gx = Tensor4::full(self.nodes[x.index].value.shape(), g);
                    self.accumulate(x, gx);
                }
                &Op::Rms { x } => {
                    // d rms/d x_j = x_j / (n * rms); subgradient 0 at rms == 0
                    let g = gout.data()[0];
                    let xv = &self.nodes[x.index].value;
                    let n = xv.numel() as f64;
                    let rms = self.nodes[i].value.data()[0];
                    let gx = if rms == 0.0 {
                        Tensor4::zeros(xv.shape())
                    } else {
                        xv.scale(g / (n * rms))
                    };
                    self.accumulate(x, gx);
                }
            }
        }
        Ok(())
    }

    /// Gradient of each parameter leaf, summed over all uses. Parameters
    /// registered on the tape but unreachable from the loss get zeros.
    pub fn param_grads(&self) -> HashMap<u64, Tensor4> {
        let mut grads: HashMap<u64, Tensor4> = HashMap::new();
        for node in &self.nodes {
            if let Some(pid) = node.param_id {
                let g = node
                    .grad
                    .clone()
                    .unwrap_or_else(|| Tensor4::zeros(node.value.shape()));
                match grads.get_mut(&pid) {
                    Some(existing) => existing.add_assign(&g),
                    None => {
                        grads.insert(pid, g);
                    }
                }
            }
        }
        grads
    }

    /// Add this tape's parameter gradients into the owning params.
    pub fn accumulate_param_grads(&self, params: &mut [&mut Param]) {
        let grads = self.param_grads();
        for p in params.iter_mut() {
            if let Some(g) = grads.get(&p.id()) {
                p.grad.add_assign(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // loss = sum(a ⊙ a) → grad(a) = 2a
        let a = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut tape = Tape::new();
        let va = tape.leaf(a.clone());
        let sq = tape.mul(va, va).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(va).unwrap();
        assert!(g.max_abs_diff(&a.scale(2.0)) < 1e-14);
    }

    #[test]
    fn double_backward_rejected() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor4::full(Shape4::new(1, 1, 1, 1), 2.0));
        let loss = tape.sum_all(v).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn foreign_var_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let v1 = t1.leaf(Tensor4::full(Shape4::new(1, 1, 1, 1), 1.0));
        assert!(t2.backward(v1).is_err());
        assert!(t2.sum_all(v1).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor4::zeros(Shape4::new(1, 1, 2, 2)));
        assert!(tape.backward(v).is_err());
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let used = Param::new("used", Tensor4::full(Shape4::new(1, 1, 1, 1), 1.0));
        let unused = Param::new("unused", Tensor4::full(Shape4::new(1, 1, 1, 1), 1.0));
        let mut tape = Tape::new();
        let vu = tape.param(&used);
        let _vn = tape.param(&unused);
        let loss = tape.sum_all(vu).unwrap();
        tape.backward(loss).unwrap();
        let grads = tape.param_grads();
        assert_eq!(grads[&used.id()].data(), &[1.0]);
        assert_eq!(grads[&unused.id()].data(), &[0.0]);
    }

    #[test]
    fn concat_routes_gradients() {
        let a = Tensor4::full(Shape4::new(1, 1, 2, 2), 1.0);
        let b = Tensor4::full(Shape4::new(1, 2, 2, 2), 2.0);
        let mut tape = Tape::new();
        let va = tape.leaf(a);
        let vb = tape.leaf(b);
        let cat = tape.concat(va, vb).unwrap();
        // weight channel 0 by 1, channels 1-2 by 3 through a mul mask
        let mut mask = Tensor4::full(Shape4::new(1, 3, 2, 2), 3.0);
        for i in 0..4 {
            mask.data_mut()[i] = 1.0;
        }
        let vm = tape.leaf(mask);
        let prod = tape.mul(cat, vm).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(va).unwrap().data().iter().all(|&g| g == 1.0));
        assert!(tape.grad(vb).unwrap().data().iter().all(|&g| g == 3.0));
    }
}
