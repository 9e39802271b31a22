//! Single-device oracle layers. Every distributed scheme in this crate is
//! checked against these.

use crate::config::AttentionConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Rng, Tensor};

/// Projection weights of one multi-head attention block (no biases).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    /// `[H, Z*A]`
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    /// `[Z*A, H]`
    pub wo: Tensor<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn random(cfg: &AttentionConfig, rng: &mut Rng) -> Result<Self> {
        let za = cfg.heads * cfg.head_dim;
        Ok(Self {
            wq: rng.tensor(&[cfg.hidden, za])?,
            wk: rng.tensor(&[cfg.hidden, za])?,
            wv: rng.tensor(&[cfg.hidden, za])?,
            wo: rng.tensor(&[za, cfg.hidden])?,
        })
    }

    pub fn identity(cfg: &AttentionConfig) -> Result<Self> {
        let eye = Tensor::eye(cfg.hidden)?;
        Ok(Self {
            wq: eye.clone(),
            wk: eye.clone(),
            wv: eye.clone(),
            wo: eye,
        })
    }

    pub fn validate(&self, cfg: &AttentionConfig) -> Result<()> {
        let za = cfg.heads * cfg.head_dim;
        let proj = [cfg.hidden, za];
        for (name, w) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)] {
            if w.shape() != proj {
                return Err(Error::Shape(format!(
                    "{name} must be {proj:?}, got {:?}",
                    w.shape()
                )));
            }
        }
        if self.wo.shape() != [za, cfg.hidden] {
            return Err(Error::Shape(format!(
                "wo must be {:?}, got {:?}",
                [za, cfg.hidden],
                self.wo.shape()
            )));
        }
        let all_finite = [&self.wq, &self.wk, &self.wv, &self.wo]
            .iter()
            .all(|w| w.all_finite());
        if !all_finite {
            return Err(Error::NonFinite("attention weights"));
        }
        Ok(())
    }
}

/// Two-layer MLP weights, `a: [H, 4H]` and `b: [4H, H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> MlpWeights<T> {
    pub fn new(a: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        let w = Self { a, b };
        w.hidden()?;
        Ok(w)
    }

    pub fn random(hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            a: rng.tensor(&[hidden, 4 * hidden])?,
            b: rng.tensor(&[4 * hidden, hidden])?,
        })
    }

    /// Hidden size `H`, after checking the `4H` inner dimension.
    pub fn hidden(&self) -> Result<usize> {
        let (sa, sb) = (self.a.shape(), self.b.shape());
        let ok = sa.len() == 2 && sb.len() == 2 && sa[1] == 4 * sa[0] && sb == [sa[1], sa[0]];
        if !ok {
            return Err(Error::Shape(format!(
                "MLP weights must be [H, 4H] and [4H, H], got {sa:?} and {sb:?}"
            )));
        }
        Ok(sa[0])
    }
}

/// Low-rank key/value projections, each `[K, L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseWeights<T> {
    pub e_proj: Tensor<T>,
    pub f_proj: Tensor<T>,
}

impl<T: Scalar> SparseWeights<T> {
    pub fn random(k_proj: usize, seq_len: usize, rng: &mut Rng) -> Result<Self> {
        let w = Self {
            e_proj: rng.tensor(&[k_proj, seq_len])?,
            f_proj: rng.tensor(&[k_proj, seq_len])?,
        };
        w.validate(seq_len)?;
        Ok(w)
    }

    pub fn identity(seq_len: usize) -> Result<Self> {
        let eye = Tensor::eye(seq_len)?;
        Ok(Self {
            e_proj: eye.clone(),
            f_proj: eye,
        })
    }

    pub fn k_proj(&self) -> usize {
        self.e_proj.dim(0)
    }

    pub fn validate(&self, seq_len: usize) -> Result<()> {
        let e = self.e_proj.shape();
        if e.len() != 2 || e[1] != seq_len || e[0] > seq_len || self.f_proj.shape() != e {
            return Err(Error::Shape(format!(
                "projections must be [K, {seq_len}] with K <= {seq_len}, got {e:?} and {:?}",
                self.f_proj.shape()
            )));
        }
        if !self.e_proj.all_finite() || !self.f_proj.all_finite() {
            return Err(Error::NonFinite("projection weights"));
        }
        Ok(())
    }
}

fn sqrt_dim<T: Scalar>(t: &Tensor<T>) -> T {
    T::from_usize(*t.shape().last().expect("rank >= 1"))
        .expect("dimension fits the scalar type")
        .sqrt()
}

/// `q · kᵀ / √A` over the last two axes.
pub fn scaled_scores<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    if q.shape().last() != k.shape().last() {
        return Err(Error::dim("scaled_scores", q.shape(), k.shape()));
    }
    Ok(q.matmul(&k.transpose_last2()?)?.div_scalar(sqrt_dim(q)))
}

/// `softmax(q kᵀ / √A) v`, batched over any leading axes.
pub fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    if q.rank() < 2 || q.shape() != k.shape() || k.shape() != v.shape() {
        return Err(Error::dim("attention_forward", q.shape(), k.shape()));
    }
    scaled_scores(q, k)?.softmax_rows()?.matmul(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads<T> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
}

/// Softmax Jacobian applied to an upstream score gradient:
/// `P ⊙ (dP − rowsum(dP ⊙ P))`.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, d_probs: &Tensor<T>) -> Result<Tensor<T>> {
    let row_dot = d_probs.mul(probs)?.row_sums();
    probs.mul(&d_probs.sub_rows(&row_dot)?)
}

/// Analytic gradients of [`attention_forward`] for the cotangent `grad_out`.
pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<AttentionGrads<T>> {
    if grad_out.shape() != q.shape() {
        return Err(Error::dim(
            "attention_backward",
            q.shape(),
            grad_out.shape(),
        ));
    }
    let probs = scaled_scores(q, k)?.softmax_rows()?;
    let scale = sqrt_dim(q);
    let dv = probs.transpose_last2()?.matmul(grad_out)?;
    let d_probs = grad_out.matmul(&v.transpose_last2()?)?;
    let d_scores = softmax_backward(&probs, &d_probs)?;
    let dq = d_scores.matmul(k)?.div_scalar(scale);
    let dk = d_scores.transpose_last2()?.matmul(q)?.div_scalar(scale);
    Ok(AttentionGrads { dq, dk, dv })
}

fn check_input<T: Scalar>(x: &Tensor<T>, cfg: &AttentionConfig) -> Result<()> {
    cfg.validate_shape()?;
    let s = x.shape();
    if s.len() != 3 || s[0] != cfg.batch || s[2] != cfg.hidden {
        return Err(Error::Shape(format!(
            "input must be [B={}, L, H={}], got {s:?}",
            cfg.batch, cfg.hidden
        )));
    }
    Ok(())
}

/// Per-head Q/K/V in `[B, Z, S, A]` layout.
pub(crate) fn project_heads<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    Ok((
        x.matmul(&w.wq)?.split_heads(heads)?,
        x.matmul(&w.wk)?.split_heads(heads)?,
        x.matmul(&w.wv)?.split_heads(heads)?,
    ))
}

/// `Concat(head_1, ..., head_Z) · wo` with `head_z = attention(x wq_z, x wk_z, x wv_z)`.
pub fn multi_head_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    cfg: &AttentionConfig,
) -> Result<Tensor<T>> {
    check_input(x, cfg)?;
    w.validate(cfg)?;
    let (q, k, v) = project_heads(x, w, cfg.heads)?;
    attention_forward(&q, &k, &v)?.merge_heads()?.matmul(&w.wo)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadGrads<T> {
    pub grad_x: Tensor<T>,
    pub grad_w: AttentionWeights<T>,
    /// Gradients at the attention-core boundary, `[B, Z, L, A]`.
    pub core: AttentionGrads<T>,
}

/// Exact gradients of [`multi_head_forward`].
pub fn multi_head_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    cfg: &AttentionConfig,
    grad_out: &Tensor<T>,
) -> Result<MultiHeadGrads<T>> {
    check_input(x, cfg)?;
    w.validate(cfg)?;
    if grad_out.shape() != x.shape() {
        return Err(Error::dim(
            "multi_head_backward",
            x.shape(),
            grad_out.shape(),
        ));
    }
    let (q, k, v) = project_heads(x, w, cfg.heads)?;
    let merged = attention_forward(&q, &k, &v)?.merge_heads()?;

    let dy = grad_out.flatten_rows();
    let grad_wo = merged.flatten_rows().transpose_last2()?.matmul(&dy)?;
    let d_merged = grad_out.matmul(&w.wo.transpose_last2()?)?;
    let core = attention_backward(&q, &k, &v, &d_merged.split_heads(cfg.heads)?)?;

    let x_rows_t = x.flatten_rows().transpose_last2()?;
    let dq = core.dq.merge_heads()?;
    let dk = core.dk.merge_heads()?;
    let dv = core.dv.merge_heads()?;
    let grad_wq = x_rows_t.matmul(&dq.flatten_rows())?;
    let grad_wk = x_rows_t.matmul(&dk.flatten_rows())?;
    let grad_wv = x_rows_t.matmul(&dv.flatten_rows())?;
    let grad_x = dq
        .matmul(&w.wq.transpose_last2()?)?
        .add(&dk.matmul(&w.wk.transpose_last2()?)?)?
        .add(&dv.matmul(&w.wv.transpose_last2()?)?)?;

    Ok(MultiHeadGrads {
        grad_x,
        grad_w: AttentionWeights {
            wq: grad_wq,
            wk: grad_wk,
            wv: grad_wv,
            wo: grad_wo,
        },
        core,
    })
}

/// `gelu(x · a) · b`
pub fn mlp_forward<T: Scalar>(x: &Tensor<T>, w: &MlpWeights<T>) -> Result<Tensor<T>> {
    let hidden = w.hidden()?;
    if x.shape().last() != Some(&hidden) {
        return Err(Error::dim("mlp_forward", x.shape(), w.a.shape()));
    }
    x.matmul(&w.a)?.gelu().matmul(&w.b)
}

/// Linformer attention: keys and values are projected from length `L` to `K`
/// before the softmax. Batched over leading axes; projections are shared by
/// all heads.
pub fn linformer_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    sw: &SparseWeights<T>,
) -> Result<Tensor<T>> {
    if q.rank() < 2 || q.shape() != k.shape() || k.shape() != v.shape() {
        return Err(Error::dim("linformer_forward", q.shape(), k.shape()));
    }
    sw.validate(q.dim(q.rank() - 2))?;
    let k_proj = sw.e_proj.matmul(k)?;
    let v_proj = sw.f_proj.matmul(v)?;
    scaled_scores(q, &k_proj)?.softmax_rows()?.matmul(&v_proj)
}

#[cfg(test)]
mod tests {
    use super::*;

    type T64 = Tensor<f64>;

    fn t(shape: &[usize], data: &[f64]) -> T64 {
        T64::from_f64(shape, data).unwrap()
    }

    /// Scalar-loop attention for one `[S, A]` head.
    fn loop_attention(q: &[f64], k: &[f64], v: &[f64], s: usize, a: usize) -> Vec<f64> {
        let mut out = vec![0.0; s * a];
        for i in 0..s {
            let scores: Vec<f64> = (0..s)
                .map(|j| {
                    (0..a).map(|c| q[i * a + c] * k[j * a + c]).sum::<f64>() / (a as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..s {
                for c in 0..a {
                    out[i * a + c] += e[j] / z * v[j * a + c];
                }
            }
        }
        out
    }

    /// Multi-head forward written with explicit per-head column loops.
    fn per_head_oracle(x: &T64, w: &AttentionWeights<f64>, cfg: &AttentionConfig) -> T64 {
        let (b, l, h, z, a) = (cfg.batch, cfg.seq_len, cfg.hidden, cfg.heads, cfg.head_dim);
        let za = z * a;
        let proj = |wm: &T64, bi: usize, head: usize| -> Vec<f64> {
            let mut out = vec![0.0; l * a];
            for s in 0..l {
                for c in 0..a {
                    out[s * a + c] = (0..h)
                        .map(|p| x.data()[(bi * l + s) * h + p] * wm.data()[p * za + head * a + c])
                        .sum();
                }
            }
            out
        };
        let mut y = vec![0.0; b * l * h];
        for bi in 0..b {
            let mut concat = vec![0.0; l * za];
            for head in 0..z {
                let o = loop_attention(
                    &proj(&w.wq, bi, head),
                    &proj(&w.wk, bi, head),
                    &proj(&w.wv, bi, head),
                    l,
                    a,
                );
                for s in 0..l {
                    for c in 0..a {
                        concat[s * za + head * a + c] = o[s * a + c];
                    }
                }
            }
            for s in 0..l {
                for j in 0..h {
                    y[(bi * l + s) * h + j] = (0..za)
                        .map(|p| concat[s * za + p] * w.wo.data()[p * h + j])
                        .sum();
                }
            }
        }
        T64::new(vec![b, l, h], y).unwrap()
    }

    #[test]
    fn attention_single_token() {
        let one = t(&[1, 1], &[1.0]);
        assert_eq!(attention_forward(&one, &one, &one).unwrap().data(), &[1.0]);
    }

    #[test]
    fn attention_uniform_scores_average_values() {
        let q = t(&[2, 1], &[0., 0.]);
        let v = t(&[2, 1], &[2., 4.]);
        assert_eq!(attention_forward(&q, &q, &v).unwrap().data(), &[3., 3.]);

        let mut rng = Rng::new(4);
        let q: T64 = rng.tensor(&[3, 2]).unwrap();
        let k = t(&[3, 2], &[0.5, -1., 0.5, -1., 0.5, -1.]);
        let v: T64 = rng.tensor(&[3, 2]).unwrap();
        let out = attention_forward(&q, &k, &v).unwrap();
        for c in 0..2 {
            let mean = (0..3).map(|r| v.data()[r * 2 + c]).sum::<f64>() / 3.0;
            for r in 0..3 {
                assert!((out.data()[r * 2 + c] - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_rejects_mismatch() {
        let a = T64::zeros(&[2, 2]).unwrap();
        let b = T64::zeros(&[3, 2]).unwrap();
        assert!(matches!(
            attention_forward(&a, &b, &b),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut rng = Rng::new(8);
        let (q, k, v): (T64, T64, T64) = (
            rng.tensor(&[5, 3]).unwrap(),
            rng.tensor(&[5, 3]).unwrap(),
            rng.tensor(&[5, 3]).unwrap(),
        );
        let got = attention_forward(&q, &k, &v).unwrap();
        let want = loop_attention(q.data(), k.data(), v.data(), 5, 3);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-14);
        }
    }

    #[test]
    fn multi_head_matches_per_head_oracle_seed11() {
        let cfg = AttentionConfig::new(2, 8, 2, 4, 1);
        let mut rng = Rng::new(11);
        let x: T64 = rng.tensor(&cfg.hidden_shape()).unwrap();
        let w = AttentionWeights::random(&cfg, &mut rng).unwrap();
        let got = multi_head_forward(&x, &w, &cfg).unwrap();
        let want = per_head_oracle(&x, &w, &cfg);
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn multi_head_identity_weights_single_head() {
        let cfg = AttentionConfig::new(1, 5, 1, 3, 1);
        let x: T64 = Rng::new(12).tensor(&cfg.hidden_shape()).unwrap();
        let w = AttentionWeights::identity(&cfg).unwrap();
        let got = multi_head_forward(&x, &w, &cfg).unwrap();
        let x2 = x.reshape(&[5, 3]).unwrap();
        let want = attention_forward(&x2, &x2, &x2).unwrap();
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn multi_head_single_head_is_composition() {
        let cfg = AttentionConfig::new(1, 4, 1, 3, 1);
        let mut rng = Rng::new(13);
        let x: T64 = rng.tensor(&cfg.hidden_shape()).unwrap();
        let w = AttentionWeights::random(&cfg, &mut rng).unwrap();
        let q = x.matmul(&w.wq).unwrap();
        let k = x.matmul(&w.wk).unwrap();
        let v = x.matmul(&w.wv).unwrap();
        let want = attention_forward(&q, &k, &v)
            .unwrap()
            .matmul(&w.wo)
            .unwrap();
        assert_eq!(multi_head_forward(&x, &w, &cfg).unwrap(), want);
    }

    #[test]
    fn multi_head_rejects_bad_weights() {
        let cfg = AttentionConfig::new(1, 4, 2, 2, 1);
        let mut rng = Rng::new(1);
        let x: T64 = rng.tensor(&cfg.hidden_shape()).unwrap();
        let mut w = AttentionWeights::random(&cfg, &mut rng).unwrap();
        w.wo = T64::zeros(&[3, 4]).unwrap();
        assert!(matches!(
            multi_head_forward(&x, &w, &cfg),
            Err(Error::Shape(_))
        ));
    }

    fn loss(x: &T64, w: &AttentionWeights<f64>, cfg: &AttentionConfig, g: &T64) -> f64 {
        let y = multi_head_forward(x, w, cfg).unwrap();
        y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn multi_head_backward_matches_finite_differences_seed3() {
        let cfg = AttentionConfig::new(1, 4, 2, 2, 1);
        let mut rng = Rng::new(3);
        let x: T64 = rng.tensor(&cfg.hidden_shape()).unwrap();
        let w = AttentionWeights::random(&cfg, &mut rng).unwrap();
        let g: T64 = rng.tensor(&cfg.hidden_shape()).unwrap();
        let grads = multi_head_backward(&x, &w, &cfg, &g).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;

        for i in 0..x.len() {
            let mut xp = x.clone().into_data();
            let mut xm = xp.clone();
            xp[i] += h;
            xm[i] -= h;
            let xp = T64::new(x.shape().to_vec(), xp).unwrap();
            let xm = T64::new(x.shape().to_vec(), xm).unwrap();
            let fd = (loss(&xp, &w, &cfg, &g) - loss(&xm, &w, &cfg, &g)) / (2.0 * h);
            worst = worst.max(rel_err(fd, grads.grad_x.data()[i]));
        }
        type Pick = fn(&mut AttentionWeights<f64>) -> &mut T64;
        let params: [(Pick, &T64); 4] = [
            (|w| &mut w.wq, &grads.grad_w.wq),
            (|w| &mut w.wk, &grads.grad_w.wk),
            (|w| &mut w.wv, &grads.grad_w.wv),
            (|w| &mut w.wo, &grads.grad_w.wo),
        ];
        for (pick, analytic) in params {
            for i in 0..analytic.len() {
                let bump = |delta: f64| {
                    let mut wp = w.clone();
                    let p = pick(&mut wp);
                    let mut d = p.clone().into_data();
                    d[i] += delta;
                    *p = T64::new(p.shape().to_vec(), d).unwrap();
                    loss(&x, &wp, &cfg, &g)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                worst = worst.max(rel_err(fd, analytic.data()[i]));
            }
        }
        assert!(worst <= 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn multi_head_backward_zero_cotangent() {
        let cfg = AttentionConfig::new(1, 4, 2, 2, 1);
        let mut rng = Rng::new(5);
        let x: T64 = rng.tensor(&cfg.hidden_shape()).unwrap();
        let w = AttentionWeights::random(&cfg, &mut rng).unwrap();
        let g = T64::zeros(&cfg.hidden_shape()).unwrap();
        let grads = multi_head_backward(&x, &w, &cfg, &g).unwrap();
        for t in [
            &grads.grad_x,
            &grads.grad_w.wq,
            &grads.grad_w.wk,
            &grads.grad_w.wv,
            &grads.grad_w.wo,
        ] {
            assert_eq!(t.max_abs(), 0.0);
        }
    }

    #[test]
    fn single_token_value_gradient_is_linear_chain() {
        // With L = 1 the softmax weight is exactly 1, so y = x wv wo and
        // dL/dwv = xᵀ (g woᵀ), dL/dwo = (x wv)ᵀ g.
        let cfg = AttentionConfig::new(1, 1, 1, 2, 1);
        let x = t(&[1, 1, 2], &[0.5, -2.0]);
        let w = AttentionWeights {
            wq: t(&[2, 2], &[1., 2., 3., 4.]),
            wk: t(&[2, 2], &[-1., 0., 0.5, 1.]),
            wv: t(&[2, 2], &[2., -1., 1., 3.]),
            wo: t(&[2, 2], &[1., 1., -1., 2.]),
        };
        let g = t(&[1, 1, 2], &[1.0, 3.0]);
        let grads = multi_head_backward(&x, &w, &cfg, &g).unwrap();
        // x wv = [0.5*2 - 2*1, 0.5*-1 - 2*3] = [-1, -6.5]
        // g woᵀ = [1+3, -1+6] = [4, 5]
        assert_eq!(grads.grad_w.wv.data(), &[2.0, 2.5, -8.0, -10.0]);
        assert_eq!(grads.grad_w.wo.data(), &[-1.0, -3.0, -6.5, -19.5]);
        assert_eq!(grads.grad_w.wq.max_abs(), 0.0);
        assert_eq!(grads.grad_w.wk.max_abs(), 0.0);
    }

    #[test]
    fn mlp_examples() {
        let x = t(&[1, 1, 1], &[1.0]);
        let w = MlpWeights::new(t(&[1, 4], &[1.; 4]), t(&[4, 1], &[1.; 4])).unwrap();
        let y = mlp_forward(&x, &w).unwrap();
        assert!((y.data()[0] - 3.365380).abs() < 1e-5);

        let mut rng = Rng::new(6);
        let w = MlpWeights::<f64>::random(3, &mut rng).unwrap();
        let zero = T64::zeros(&[2, 4, 3]).unwrap();
        assert_eq!(mlp_forward(&zero, &w).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn mlp_matches_two_step_loop_seed5() {
        let mut rng = Rng::new(5);
        let x: T64 = rng.tensor(&[1, 2, 2]).unwrap();
        let w = MlpWeights::<f64>::random(2, &mut rng).unwrap();
        let (l, h, f) = (2, 2, 8);
        let mut want = vec![0.0; l * h];
        for s in 0..l {
            let mut hidden = vec![0.0; f];
            for (j, hj) in hidden.iter_mut().enumerate() {
                let mut acc = 0.0;
                for p in 0..h {
                    acc += x.data()[s * h + p] * w.a.data()[p * f + j];
                }
                *hj = acc * 0.5 * (1.0 + libm::erf(acc / std::f64::consts::SQRT_2));
            }
            for j in 0..h {
                let mut acc = 0.0;
                for (p, hp) in hidden.iter().enumerate() {
                    acc += hp * w.b.data()[p * h + j];
                }
                want[s * h + j] = acc;
            }
        }
        assert_eq!(mlp_forward(&x, &w).unwrap().data(), &want[..]);
    }

    #[test]
    fn mlp_rejects_bad_shapes() {
        assert!(
            MlpWeights::new(T64::zeros(&[2, 6]).unwrap(), T64::zeros(&[6, 2]).unwrap()).is_err()
        );
        let w = MlpWeights::<f64>::random(2, &mut Rng::new(0)).unwrap();
        assert!(mlp_forward(&T64::zeros(&[1, 2, 3]).unwrap(), &w).is_err());
    }

    #[test]
    fn linformer_identity_projection_is_dense_attention() {
        let mut rng = Rng::new(14);
        let (q, k, v): (T64, T64, T64) = (
            rng.tensor(&[2, 6, 3]).unwrap(),
            rng.tensor(&[2, 6, 3]).unwrap(),
            rng.tensor(&[2, 6, 3]).unwrap(),
        );
        let sw = SparseWeights::identity(6).unwrap();
        let got = linformer_forward(&q, &k, &v, &sw).unwrap();
        let want = attention_forward(&q, &k, &v).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn linformer_zero_key_projection_averages_projected_values() {
        let mut rng = Rng::new(15);
        let (q, k, v): (T64, T64, T64) = (
            rng.tensor(&[8, 2]).unwrap(),
            rng.tensor(&[8, 2]).unwrap(),
            rng.tensor(&[8, 2]).unwrap(),
        );
        let mut sw = SparseWeights::random(4, 8, &mut rng).unwrap();
        sw.e_proj = T64::zeros(&[4, 8]).unwrap();
        let out = linformer_forward(&q, &k, &v, &sw).unwrap();
        let vp = sw.f_proj.matmul(&v).unwrap();
        for c in 0..2 {
            let mean = (0..4).map(|r| vp.data()[r * 2 + c]).sum::<f64>() / 4.0;
            for r in 0..8 {
                assert!((out.data()[r * 2 + c] - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn linformer_matches_step_by_step_seed13() {
        let (l, a, kp) = (8, 2, 4);
        let mut rng = Rng::new(13);
        let (q, k, v): (T64, T64, T64) = (
            rng.tensor(&[l, a]).unwrap(),
            rng.tensor(&[l, a]).unwrap(),
            rng.tensor(&[l, a]).unwrap(),
        );
        let sw = SparseWeights::random(kp, l, &mut rng).unwrap();
        let project = |m: &T64, x: &T64| -> Vec<f64> {
            let mut out = vec![0.0; kp * a];
            for r in 0..kp {
                for c in 0..a {
                    out[r * a + c] = (0..l)
                        .map(|s| m.data()[r * l + s] * x.data()[s * a + c])
                        .sum();
                }
            }
            out
        };
        let kp_ = project(&sw.e_proj, &k);
        let vp_ = project(&sw.f_proj, &v);
        let mut want = vec![0.0; l * a];
        for i in 0..l {
            let sc: Vec<f64> = (0..kp)
                .map(|j| {
                    (0..a)
                        .map(|c| q.data()[i * a + c] * kp_[j * a + c])
                        .sum::<f64>()
                        / (a as f64).sqrt()
                })
                .collect();
            let m = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = sc.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..kp {
                for c in 0..a {
                    want[i * a + c] += e[j] / z * vp_[j * a + c];
                }
            }
        }
        let got = linformer_forward(&q, &k, &v, &sw).unwrap();
        let want = T64::new(vec![l, a], want).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn linformer_rejects_wrong_length() {
        let q = T64::zeros(&[8, 2]).unwrap();
        let sw = SparseWeights::<f64>::random(4, 6, &mut Rng::new(0)).unwrap();
        assert!(matches!(
            linformer_forward(&q, &q, &q, &sw),
            Err(Error::Shape(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, proptest};

        proptest! {
            #[test]
            fn output_is_convex_combination_of_values(seed in any::<u64>(), s in 1usize..7, a in 1usize..4) {
                let mut rng = Rng::new(seed);
                let (q, k, v): (T64, T64, T64) = (
                    rng.tensor(&[s, a]).unwrap().scale(3.0),
                    rng.tensor(&[s, a]).unwrap().scale(3.0),
                    rng.tensor(&[s, a]).unwrap(),
                );
                let out = attention_forward(&q, &k, &v).unwrap();
                for c in 0..a {
                    let col: Vec<f64> = (0..s).map(|r| v.data()[r * a + c]).collect();
                    let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    for r in 0..s {
                        let o = out.data()[r * a + c];
                        prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
                    }
                }
            }
        }
    }
}
