#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vla_core::grad::{grad_check, GradError, Graph, NodeId, Primitive, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `sum(node ⊙ R)` for a fixed random `R`, so every output entry matters.
pub fn probe(g: &mut Graph, node: NodeId, seed: u64) -> Result<NodeId, GradError> {
    let shape = g.shape(node).to_vec();
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng(seed)));
    let m = g.mul(node, w)?;
    Ok(g.sum(m))
}

pub fn positive(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(0.5..2.0)).collect()).unwrap()
}

/// Runs one finite-difference check of `prim` on random shapes drawn from `r`.
pub fn check_primitive(prim: Primitive, r: &mut ChaCha8Rng, seed: u64) -> f64 {
    let m = r.gen_range(1..5);
    let n = r.gen_range(1..6);
    let k = r.gen_range(1..5);
    let eps = 1e-5;
    let res = match prim {
        Primitive::MatMul => grad_check(
            |g, x| {
                let y = g.matmul(x[0], x[1])?;
                probe(g, y, seed)
            },
            &[Tensor::randn(&[m, k], 1.0, r), Tensor::randn(&[k, n], 1.0, r)],
            eps,
        ),
        Primitive::Add => grad_check(
            |g, x| {
                let y = g.add(x[0], x[1])?;
                probe(g, y, seed)
            },
            &[Tensor::randn(&[m, n], 1.0, r), Tensor::randn(&[n], 1.0, r)],
            eps,
        ),
        Primitive::Mul => grad_check(
            |g, x| {
                let y = g.mul(x[0], x[1])?;
                probe(g, y, seed)
            },
            &[Tensor::randn(&[m, n], 1.0, r), Tensor::randn(&[m, 1], 1.0, r)],
            eps,
        ),
        Primitive::Scale => grad_check(
            |g, x| {
                let y = g.scale(x[0], -1.7);
                probe(g, y, seed)
            },
            &[Tensor::randn(&[m, n], 1.0, r)],
            eps,
        ),
        Primitive::Sum => grad_check(|g, x| Ok(g.sum(x[0])), &[Tensor::randn(&[m, n], 1.0, r)], eps),
        Primitive::Mean => {
            grad_check(|g, x| Ok(g.mean(x[0])), &[Tensor::randn(&[m, n], 1.0, r)], eps)
        }
        Primitive::Transpose => grad_check(
            |g, x| {
                let y = g.transpose(x[0])?;
                probe(g, y, seed)
            },
            &[Tensor::randn(&[m, n], 1.0, r)],
            eps,
        ),
        Primitive::Reshape => grad_check(
            |g, x| {
                let y = g.reshape(x[0], &[n * m])?;
                probe(g, y, seed)
            },
            &[Tensor::randn(&[m, n], 1.0, r)],
            eps,
        ),
        Primitive::Concat => {
            let axis = r.gen_range(0..2);
            let b = if axis == 0 { [k, n] } else { [m, k] };
            grad_check(
                |g, x| {
                    let y = g.concat(&[x[0], x[1]], axis)?;
                    probe(g, y, seed)
                },
                &[Tensor::randn(&[m, n], 1.0, r), Tensor::randn(&b, 1.0, r)],
                eps,
            )
        }
        Primitive::Slice => {
            let cols = n + 2;
            let start = r.gen_range(0..cols - 1);
            let len = r.gen_range(1..=cols - start);
            grad_check(
                |g, x| {
                    let y = g.slice(x[0], 1, start, len)?;
                    probe(g, y, seed)
                },
                &[Tensor::randn(&[m, cols], 1.0, r)],
                eps,
            )
        }
        Primitive::Relu => grad_check(
            |g, x| {
                let y = g.relu(x[0]);
                probe(g, y, seed)
            },
            &[Tensor::randn(&[m, n], 1.0, r)],
            eps,
        ),
        Primitive::Gelu => grad_check(
            |g, x| {
                let y = g.gelu(x[0]);
                probe(g, y, seed)
            },
            &[Tensor::randn(&[m, n], 1.5, r)],
            eps,
        ),
        Primitive::SoftmaxLastdim => grad_check(
            |g, x| {
                let y = g.softmax_lastdim(x[0]);
                probe(g, y, seed)
            },
            &[Tensor::randn(&[m, n + 1], 1.0, r)],
            eps,
        ),
        Primitive::LayerNorm => grad_check(
            |g, x| {
                let y = g.layer_norm(x[0], 1e-5);
                probe(g, y, seed)
            },
            &[Tensor::randn(&[m, n + 2], 1.0, r)],
            eps,
        ),
        Primitive::EmbeddingLookup => {
            let ids: Vec<usize> = (0..n + 1).map(|_| r.gen_range(0..m + 1)).collect();
            grad_check(
                |g, x| {
                    let y = g.embedding_lookup(x[0], &ids)?;
                    probe(g, y, seed)
                },
                &[Tensor::randn(&[m + 1, k], 1.0, r)],
                eps,
            )
        }
        Primitive::CrossEntropyLogits => {
            let targets: Vec<usize> = (0..m).map(|_| r.gen_range(0..n + 1)).collect();
            grad_check(
                |g, x| g.cross_entropy_logits(x[0], &targets),
                &[Tensor::randn(&[m, n + 1], 2.0, r)],
                eps,
            )
        }
        Primitive::Mse => grad_check(
            |g, x| g.mse(x[0], x[1]),
            &[Tensor::randn(&[m, n], 1.0, r), Tensor::randn(&[m, n], 1.0, r)],
            eps,
        ),
        Primitive::Sqrt => grad_check(
            |g, x| {
                let y = g.sqrt(x[0]);
                probe(g, y, seed)
            },
            &[positive(&[m, n], r)],
            eps,
        ),
        Primitive::L2Norm => grad_check(
            |g, x| {
                let y = g.l2_norm(x[0]);
                probe(g, y, seed)
            },
            &[Tensor::randn(&[m, n + 1], 1.0, r)],
            eps,
        ),
    };
    res.unwrap_or_else(|e| panic!("{} failed: {e}", prim.name()))
}

