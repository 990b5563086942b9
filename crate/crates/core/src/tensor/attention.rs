use super::{Graph, Result, Tensor, TensorError, Var};

/// Projection weights of one attention layer; matrices are `[d, d]` in
/// `[out, in]` layout.
///
/// A key bias only shifts every score of a query by the same amount, so it
/// never changes the output and receives an exactly zero gradient.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Option<Var>,
    pub wk: Var,
    pub bk: Option<Var>,
    pub wv: Var,
    pub bv: Option<Var>,
    pub wo: Var,
    pub bo: Option<Var>,
}

/// Scaled dot-product attention split across `heads`.
///
/// `q` is `[B, Nq, d]` (or `[Nq, d]`), `k` and `v` are `[B, Nk, d]`.
/// The output has the shape of `q`.
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    w: &AttentionWeights,
) -> Result<Var> {
    let unbatched = g.shape(q).len() == 2;
    let (q, k, v) = if unbatched {
        let lift = |g: &mut Graph, x: Var| {
            let s = g.shape(x).to_vec();
            g.reshape(x, &[1, s[0], s[1]])
        };
        (lift(g, q)?, lift(g, k)?, lift(g, v)?)
    } else {
        (q, k, v)
    };
    let sq = g.shape(q).to_vec();
    let sk = g.shape(k).to_vec();
    if sq.len() != 3 || sk.len() != 3 || g.shape(v) != sk.as_slice() || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(TensorError::Shape(format!(
            "attention q {sq:?} k {sk:?} v {:?}",
            g.shape(v)
        )));
    }
    let (batch, nq, d) = (sq[0], sq[1], sq[2]);
    let nk = sk[1];
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Heads { dim: d, heads });
    }
    let dh = d / heads;

    let split = |g: &mut Graph, x: Var, n: usize| -> Result<Var> {
        let x = g.reshape(x, &[batch, n, heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[batch * heads, n, dh])
    };
    let qp = g.linear(q, w.wq, w.bq)?;
    let kp = g.linear(k, w.wk, w.bk)?;
    let vp = g.linear(v, w.wv, w.bv)?;
    let qh = split(g, qp, nq)?;
    let kh = split(g, kp, nk)?;
    let vh = split(g, vp, nk)?;

    let scores = g.bmm(qh, kh, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = g.softmax(scores, 2)?;
    let ctx = g.bmm(attn, vh, false)?;
    let ctx = g.reshape(ctx, &[batch, heads, nq, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[batch, nq, d])?;
    let out = g.linear(ctx, w.wo, w.bo)?;
    if unbatched {
        g.reshape(out, &[nq, d])
    } else {
        Ok(out)
    }
}

/// Value-only attention over plain tensors with bias-free projections
/// `[wq, wk, wv, wo]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, weights: [&Tensor; 4]) -> Result<Tensor> {
    let mut g = Graph::frozen();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let [wq, wk, wv, wo] = weights.map(|t| g.constant(t.clone()));
    let w = AttentionWeights {
        wq,
        bq: None,
        wk,
        bk: None,
        wv,
        bv: None,
        wo,
        bo: None,
    };
    let out = multi_head_attention(&mut g, q, k, v, heads, &w)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(d: usize) -> Tensor {
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            t.set(&[i, i], 1.0);
        }
        t
    }

    #[test]
    fn identical_keys_average_values() {
        let d = 4;
        let q = Tensor::from_rows(&[vec![1.0, -2.0, 0.5, 3.0], vec![0.1, 0.2, 0.3, 0.4]]).unwrap();
        let k = Tensor::from_rows(&vec![vec![0.3, 0.3, -1.0, 2.0]; 3]).unwrap();
        let v = Tensor::from_rows(&[
            vec![1.0, 2.0, 3.0, 4.0],
            vec![-1.0, 0.0, 1.0, 2.0],
            vec![3.0, 1.0, -4.0, 0.0],
        ])
        .unwrap();
        let i = eye(d);
        let out = attention(&q, &k, &v, 1, [&i, &i, &i, &i]).unwrap();
        assert_eq!(out.shape(), &[2, 4]);
        for r in 0..2 {
            for c in 0..4 {
                let mean = (v.get(&[0, c]) + v.get(&[1, c]) + v.get(&[2, c])) / 3.0;
                assert!((out.get(&[r, c]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_returns_its_value() {
        let x = Tensor::from_rows(&[vec![0.5, -1.5, 2.0, 7.0]]).unwrap();
        let i = eye(4);
        let out = attention(&x, &x, &x, 2, [&i, &i, &i, &i]).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn shape_contract_and_head_divisibility() {
        let x = Tensor::full(&[17, 64], 0.1);
        let i = eye(64);
        let out = attention(&x, &x, &x, 4, [&i, &i, &i, &i]).unwrap();
        assert_eq!(out.shape(), &[17, 64]);
        assert!(matches!(
            attention(&x, &x, &x, 3, [&i, &i, &i, &i]),
            Err(TensorError::Heads { dim: 64, heads: 3 })
        ));
    }
}
