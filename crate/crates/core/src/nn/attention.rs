use rand::Rng;

use super::layers::{Dropout, LayerNorm, Linear, Relu};
use super::real::Real;
use super::{Mode, Module, Param};
use crate::error::{Error, Result};

/// Multi-head scaled dot-product self-attention over `batch` sequences of
/// length `seq`. Q, K and V projections carry no bias; the output projection
/// does.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub num_heads: usize,
    pub dim: usize,
    pub causal: bool,
    /// Attention probabilities of the last forward, `batch x heads x seq x seq`.
    pub probs: Vec<T>,
    cache: Option<AttnTrace<T>>,
}

#[derive(Clone, Debug)]
struct AttnTrace<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    batch: usize,
    seq: usize,
}

impl<T: Real> MultiHeadAttention<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, num_heads: usize, causal: bool, std: f64, rng: &mut R) -> Self {
        Self {
            wq: Linear::new(&format!("{name}.w_q"), dim, dim, false, std, rng),
            wk: Linear::new(&format!("{name}.w_k"), dim, dim, false, std, rng),
            wv: Linear::new(&format!("{name}.w_v"), dim, dim, false, std, rng),
            wo: Linear::new(&format!("{name}.w_o"), dim, dim, true, std, rng),
            num_heads,
            dim,
            causal,
            probs: Vec::new(),
            cache: None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    pub fn forward(&mut self, x: &[T], batch: usize, seq: usize, mode: Mode) -> Vec<T> {
        let rows = batch * seq;
        let (d, nh, dh) = (self.dim, self.num_heads, self.head_dim());
        let q = self.wq.forward(x, rows, mode);
        let k = self.wk.forward(x, rows, mode);
        let v = self.wv.forward(x, rows, mode);
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut probs = vec![T::zero(); batch * nh * seq * seq];
        let mut out = vec![T::zero(); rows * d];
        for b in 0..batch {
            for h in 0..nh {
                let a = &mut probs[((b * nh + h) * seq) * seq..((b * nh + h + 1) * seq) * seq];
                for i in 0..seq {
                    let qi = &q[(b * seq + i) * d + h * dh..][..dh];
                    let limit = if self.causal { i + 1 } else { seq };
                    let row = &mut a[i * seq..(i + 1) * seq];
                    let mut mx = T::neg_infinity();
                    for j in 0..limit {
                        let kj = &k[(b * seq + j) * d + h * dh..][..dh];
                        let s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * scale;
                        row[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = T::zero();
                    for r in row.iter_mut().take(limit) {
                        *r = (*r - mx).exp();
                        z += *r;
                    }
                    for r in row.iter_mut().take(limit) {
                        *r /= z;
                    }
                    let oi = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..limit {
                        let vj = &v[(b * seq + j) * d + h * dh..][..dh];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o += row[j] * vv;
                        }
                    }
                }
            }
        }
        let y = self.wo.forward(&out, rows, mode);
        self.probs = probs;
        self.cache = (mode == Mode::Train).then_some(AttnTrace { q, k, v, batch, seq });
        y
    }

    pub fn backward(&mut self, dy: &[T]) -> Result<Vec<T>> {
        let AttnTrace { q, k, v, batch, seq } = self.cache.take().ok_or(Error::MissingTrace)?;
        let (d, nh, dh) = (self.dim, self.num_heads, self.head_dim());
        let scale = T::one() / T::of(dh as f64).sqrt();
        let dout = self.wo.backward(dy)?;
        let mut dq = vec![T::zero(); q.len()];
        let mut dk = vec![T::zero(); k.len()];
        let mut dv = vec![T::zero(); v.len()];
        let mut da = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..nh {
                let a = &self.probs[((b * nh + h) * seq) * seq..((b * nh + h + 1) * seq) * seq];
                for i in 0..seq {
                    let limit = if self.causal { i + 1 } else { seq };
                    let doi = &dout[(b * seq + i) * d + h * dh..][..dh];
                    let row = &a[i * seq..(i + 1) * seq];
                    let mut dot = T::zero();
                    for j in 0..limit {
                        let vj = &v[(b * seq + j) * d + h * dh..][..dh];
                        da[j] = doi.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                        dot += row[j] * da[j];
                        let dvj = &mut dv[(b * seq + j) * d + h * dh..][..dh];
                        for (g, &x) in dvj.iter_mut().zip(doi) {
                            *g += row[j] * x;
                        }
                    }
                    for j in 0..limit {
                        let ds = row[j] * (da[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let (qo, ko) = ((b * seq + i) * d + h * dh, (b * seq + j) * d + h * dh);
                        for t in 0..dh {
                            dq[qo + t] += ds * k[ko + t];
                            dk[ko + t] += ds * q[qo + t];
                        }
                    }
                }
            }
        }
        let mut dx = self.wq.backward(&dq)?;
        for (a, b) in dx.iter_mut().zip(self.wk.backward(&dk)?) {
            *a += b;
        }
        for (a, b) in dx.iter_mut().zip(self.wv.backward(&dv)?) {
            *a += b;
        }
        Ok(dx)
    }
}

impl<T: Real> Module<T> for MultiHeadAttention<T> {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        self.wq.visit_params(f);
        self.wk.visit_params(f);
        self.wv.visit_params(f);
        self.wo.visit_params(f);
    }
}

/// Pre-norm decoder block:
/// `h = z + MHA(LN1(z))`, `out = h + FFN(LN2(h))`, `FFN(x) = ReLU(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug)]
pub struct TransformerBlock<T> {
    pub ln1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    relu: Relu,
    drop1: Dropout<T>,
    drop2: Dropout<T>,
    rows: usize,
}

impl<T: Real> TransformerBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        dim: usize,
        num_heads: usize,
        ffn_dim: usize,
        dropout: f64,
        causal: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(&format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), dim, num_heads, causal, std, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), dim),
            fc1: Linear::new(&format!("{name}.ffn.w1"), dim, ffn_dim, true, std, rng),
            fc2: Linear::new(&format!("{name}.ffn.w2"), ffn_dim, dim, true, std, rng),
            relu: Relu::new(),
            drop1: Dropout::new(dropout),
            drop2: Dropout::new(dropout),
            rows: 0,
        }
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, z: &[T], batch: usize, seq: usize, mode: Mode, rng: &mut R) -> Vec<T> {
        let rows = batch * seq;
        self.rows = rows;
        let a = self.ln1.forward(z, mode);
        let a = self.attn.forward(&a, batch, seq, mode);
        let a = self.drop1.forward(a, mode, rng);
        let h: Vec<T> = z.iter().zip(&a).map(|(&x, &y)| x + y).collect();
        let c = self.ln2.forward(&h, mode);
        let c = self.fc1.forward(&c, rows, mode);
        let c = self.relu.forward(c, mode);
        let c = self.fc2.forward(&c, rows, mode);
        let c = self.drop2.forward(c, mode, rng);
        h.iter().zip(&c).map(|(&x, &y)| x + y).collect()
    }

    pub fn backward(&mut self, dout: &[T]) -> Result<Vec<T>> {
        let g = self.drop2.backward(dout.to_vec())?;
        let g = self.fc2.backward(&g)?;
        let g = self.relu.backward(g)?;
        let g = self.fc1.backward(&g)?;
        let g = self.ln2.backward(&g)?;
        let dh: Vec<T> = dout.iter().zip(&g).map(|(&a, &b)| a + b).collect();
        let g = self.drop1.backward(dh.clone())?;
        let g = self.attn.backward(&g)?;
        let g = self.ln1.backward(&g)?;
        Ok(dh.iter().zip(&g).map(|(&a, &b)| a + b).collect())
    }
}

impl<T: Real> Module<T> for TransformerBlock<T> {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        self.ln1.visit_params(f);
        self.attn.visit_params(f);
        self.ln2.visit_params(f);
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(rows: usize, d: usize) -> Vec<f64> {
        (0..rows * d).map(|i| ((i * 7 % 13) as f64 * 0.31).sin()).collect()
    }

    #[test]
    fn single_position_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mha = MultiHeadAttention::<f64>::new("a", 8, 2, true, 0.5, &mut rng);
        mha.wo.b.as_mut().unwrap().value = (0..8).map(|i| i as f64 * 0.1).collect();
        let x = input(1, 8);
        let y = mha.forward(&x, 1, 1, Mode::Eval);
        assert!(mha.probs.iter().all(|&p| p == 1.0));
        let v = mha.wv.forward(&x, 1, Mode::Eval);
        let expected = mha.wo.forward(&v, 1, Mode::Eval);
        for (a, b) in y.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_are_causal_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mha = MultiHeadAttention::<f64>::new("a", 8, 4, true, 0.5, &mut rng);
        let (b, p) = (3, 5);
        mha.forward(&input(b * p, 8), b, p, Mode::Eval);
        for m in mha.probs.chunks(p * p) {
            for i in 0..p {
                let row = &m[i * p..(i + 1) * p];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row[i + 1..].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn bidirectional_attends_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mha = MultiHeadAttention::<f64>::new("a", 8, 2, false, 0.5, &mut rng);
        mha.forward(&input(4, 8), 1, 4, Mode::Eval);
        assert!(mha.probs.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn zero_output_projections_make_identity_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut blk = TransformerBlock::<f64>::new("b", 8, 2, 16, 0.0, true, 0.3, &mut rng);
        blk.attn.wo.w.value.iter_mut().for_each(|v| *v = 0.0);
        blk.fc2.w.value.iter_mut().for_each(|v| *v = 0.0);
        let x = input(6, 8);
        assert_eq!(blk.forward(&x, 2, 3, Mode::Train, &mut rng), x);
    }
}
