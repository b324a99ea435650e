use super::{GradError, Graph, NodeId, Tensor};

/// Boolean attention mask, `true` = attend. Row-major `n_q × n_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allow = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self { rows, cols, allow }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self { rows, cols, allow: vec![true; rows * cols] }
    }

    /// Query `i` sees keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_full(&self) -> bool {
        self.allow.iter().all(|&a| a)
    }

    /// `log(mask)`: 0 where allowed, `-inf` elsewhere.
    fn log_tensor(&self) -> Tensor {
        let data = self
            .allow
            .iter()
            .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        Tensor::from_parts(vec![self.rows, self.cols], data)
    }
}

/// `softmax(q·kᵀ/√d + log(mask))·v`. Fully masked rows produce zeros.
pub fn attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: &Mask,
) -> Result<NodeId, GradError> {
    let (nq, d) = g.value(q).dims2()?;
    let (nk, dk) = g.value(k).dims2()?;
    let (nv, dv) = g.value(v).dims2()?;
    if d != dk || d != dv || nk != nv {
        return Err(GradError::shape(
            "attention",
            format!("q [{nq}x{d}], k [{nk}x{dk}], v [{nv}x{dv}]"),
        ));
    }
    if mask.dims() != (nq, nk) {
        return Err(GradError::shape(
            "attention",
            format!("mask {:?} for scores [{nq}x{nk}]", mask.dims()),
        ));
    }
    let kt = g.transpose(k)?;
    let raw = g.matmul(q, kt)?;
    let mut scores = g.scale(raw, 1.0 / (d as f64).sqrt());
    if !mask.is_full() {
        let m = g.constant(mask.log_tensor());
        scores = g.add(scores, m)?;
    }
    let p = g.softmax_lastdim(scores);
    g.matmul(p, v)
}

/// Splits the model width into `heads` column groups and attends per group.
pub fn multi_head_attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    mask: &Mask,
) -> Result<NodeId, GradError> {
    let (_, d) = g.value(q).dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(GradError::shape("attention", format!("width {d} over {heads} heads")));
    }
    if heads == 1 {
        return attention(g, q, k, v, mask);
    }
    let hd = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * hd, hd)?;
        let kh = g.slice(k, 1, h * hd, hd)?;
        let vh = g.slice(v, 1, h * hd, hd)?;
        outs.push(attention(g, qh, kh, vh, mask)?);
    }
    g.concat(&outs, 1)
}
