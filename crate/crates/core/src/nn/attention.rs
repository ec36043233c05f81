//! Multi-head attention and pre-norm transformer blocks, with an incremental
//! key/value cache for causal use.

use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::tape::{Segment, Tape, Var};
use super::{Init, ParamId, ParameterSet};
use crate::error::{contract, Result};

/// Keys and values of every row seen so far, `[len × d]` each.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
    len: usize,
}

impl KvCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Context vector (before output projection) for one query row over the
/// first `n_keys` rows of `keys`/`values`.
pub fn attend_row(q: &[f32], keys: &[f32], values: &[f32], n_keys: usize, heads: usize, out: &mut [f32]) {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut scores = vec![0.0f32; n_keys];
    out.fill(0.0);
    for h in 0..heads {
        let c0 = h * dh;
        let qh = &q[c0..c0 + dh];
        for (j, s) in scores.iter_mut().enumerate() {
            *s = kernels::dot(qh, &keys[j * d + c0..j * d + c0 + dh]) * scale;
        }
        kernels::softmax_in_place(&mut scores);
        let orow = &mut out[c0..c0 + dh];
        for (j, &p) in scores.iter().enumerate() {
            for (o, &x) in orow.iter_mut().zip(&values[j * d + c0..j * d + c0 + dh]) {
                *o += p * x;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParameterSet, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: ps.add(&format!("{name}.w"), vec![d_in, d_out], Init::Uniform, rng),
            b: Some(ps.add(&format!("{name}.b"), vec![d_out], Init::Zeros, rng)),
            d_in,
            d_out,
        }
    }

    pub fn without_bias(ps: &mut ParameterSet, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear { w: ps.add(&format!("{name}.w"), vec![d_in, d_out], Init::Uniform, rng), b: None, d_in, d_out }
    }

    pub fn forward(&self, ps: &ParameterSet, x: &[f32]) -> Vec<f32> {
        let rows = x.len() / self.d_in;
        let mut y = kernels::matmul(x, ps.data(self.w), rows, self.d_in, self.d_out);
        if let Some(b) = self.b {
            kernels::add_row_bias(&mut y, ps.data(b));
        }
        y
    }

    pub fn tape(&self, tape: &mut Tape, ps: &ParameterSet, x: Var) -> Var {
        let w = tape.param(ps, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(ps, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParameterSet, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        LayerNorm {
            gain: ps.add(&format!("{name}.gain"), vec![d], Init::Ones, rng),
            bias: ps.add(&format!("{name}.bias"), vec![d], Init::Zeros, rng),
        }
    }

    pub fn forward(&self, ps: &ParameterSet, x: &[f32]) -> Vec<f32> {
        let (g, b) = (ps.data(self.gain), ps.data(self.bias));
        let d = g.len();
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
            kernels::layer_norm_row(row, g, b, o);
        }
        out
    }

    pub fn tape(&self, tape: &mut Tape, ps: &ParameterSet, x: Var) -> Var {
        let g = tape.param(ps, self.gain);
        let b = tape.param(ps, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Query, key, value and output projections over `heads` heads.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParameterSet, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(contract(format!("d_model {d} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(ps, &format!("{name}.q"), d, d, rng),
            // A key bias only shifts each score row by a constant, which softmax ignores.
            wk: Linear::without_bias(ps, &format!("{name}.k"), d, d, rng),
            wv: Linear::new(ps, &format!("{name}.v"), d, d, rng),
            wo: Linear::new(ps, &format!("{name}.o"), d, d, rng),
            heads,
            d,
        })
    }

    /// Attention over the rows of `x` (`[T×d]`).
    ///
    /// With a cache, `x` holds rows that follow the cached ones; their keys
    /// and values are appended and each new row attends to every row up to
    /// and including itself. A cache is only meaningful for causal attention.
    pub fn forward(&self, ps: &ParameterSet, x: &[f32], causal: bool, cache: Option<&mut KvCache>) -> Result<Vec<f32>> {
        if x.len() % self.d != 0 {
            return Err(contract("attention input width differs from d_model"));
        }
        let q = self.wq.forward(ps, x);
        let k = self.wk.forward(ps, x);
        self.forward_with_qk(ps, x, q, k, causal, cache)
    }

    /// As [`forward`](Self::forward) with query/key projections supplied by the caller.
    pub fn forward_with_qk(
        &self,
        ps: &ParameterSet,
        x: &[f32],
        q: Vec<f32>,
        k: Vec<f32>,
        causal: bool,
        cache: Option<&mut KvCache>,
    ) -> Result<Vec<f32>> {
        let d = self.d;
        let t = x.len() / d;
        if q.len() != x.len() || k.len() != x.len() {
            return Err(contract("query/key rows do not match input rows"));
        }
        let v = self.wv.forward(ps, x);
        let mut ctx = vec![0.0; t * d];
        match cache {
            Some(cache) => {
                if !causal {
                    return Err(contract("a key/value cache requires causal attention"));
                }
                let base = cache.len;
                cache.keys.extend_from_slice(&k);
                cache.values.extend_from_slice(&v);
                cache.len += t;
                for i in 0..t {
                    attend_row(&q[i * d..(i + 1) * d], &cache.keys, &cache.values, base + i + 1, self.heads, &mut ctx[i * d..(i + 1) * d]);
                }
            }
            None => {
                for i in 0..t {
                    let n = if causal { i + 1 } else { t };
                    attend_row(&q[i * d..(i + 1) * d], &k, &v, n, self.heads, &mut ctx[i * d..(i + 1) * d]);
                }
            }
        }
        Ok(self.wo.forward(ps, &ctx))
    }

    pub fn tape(&self, tape: &mut Tape, ps: &ParameterSet, x: Var, causal: bool, segments: &[Segment]) -> Var {
        let q = self.wq.tape(tape, ps, x);
        let k = self.wk.tape(tape, ps, x);
        self.tape_with_qk(tape, ps, x, q, k, causal, segments)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn tape_with_qk(&self, tape: &mut Tape, ps: &ParameterSet, x: Var, q: Var, k: Var, causal: bool, segments: &[Segment]) -> Var {
        let v = self.wv.tape(tape, ps, x);
        let ctx = tape.attention(q, k, v, self.heads, causal, segments);
        self.wo.tape(tape, ps, ctx)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`
/// with a GELU feed-forward sublayer.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerBlock {
    pub fn new(ps: &mut ParameterSet, name: &str, d: usize, heads: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d, rng),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), d, heads, rng)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d, rng),
            ff1: Linear::new(ps, &format!("{name}.ff1"), d, ffn, rng),
            ff2: Linear::new(ps, &format!("{name}.ff2"), ffn, d, rng),
        })
    }

    /// Query and key rows of the attention sublayer for inputs `x`.
    pub fn query_key(&self, ps: &ParameterSet, x: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let h = self.ln1.forward(ps, x);
        (self.attn.wq.forward(ps, &h), self.attn.wk.forward(ps, &h))
    }

    pub fn forward(&self, ps: &ParameterSet, x: &[f32], causal: bool, cache: Option<&mut KvCache>) -> Result<Vec<f32>> {
        let h = self.ln1.forward(ps, x);
        let a = self.attn.forward(ps, &h, causal, cache)?;
        Ok(self.finish(ps, x, a))
    }

    /// Forward pass reusing precomputed query/key rows (from [`query_key`](Self::query_key)).
    pub fn forward_with_qk(&self, ps: &ParameterSet, x: &[f32], q: Vec<f32>, k: Vec<f32>, causal: bool) -> Result<Vec<f32>> {
        let h = self.ln1.forward(ps, x);
        let a = self.attn.forward_with_qk(ps, &h, q, k, causal, None)?;
        Ok(self.finish(ps, x, a))
    }

    fn finish(&self, ps: &ParameterSet, x: &[f32], a: Vec<f32>) -> Vec<f32> {
        let mut x1: Vec<f32> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
        let h = self.ln2.forward(ps, &x1);
        let mut f = self.ff1.forward(ps, &h);
        for v in &mut f {
            *v = kernels::gelu(*v);
        }
        let f = self.ff2.forward(ps, &f);
        for (o, v) in x1.iter_mut().zip(&f) {
            *o += v;
        }
        x1
    }

    pub fn tape(&self, tape: &mut Tape, ps: &ParameterSet, x: Var, causal: bool, segments: &[Segment]) -> Var {
        let h = self.ln1.tape(tape, ps, x);
        let a = self.attn.tape(tape, ps, h, causal, segments);
        let x1 = tape.add(x, a);
        let h = self.ln2.tape(tape, ps, x1);
        let f = self.ff1.tape(tape, ps, h);
        let f = tape.gelu(f);
        let f = self.ff2.tape(tape, ps, f);
        tape.add(x1, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::rng;
    use rand::Rng;

    fn block(seed: u64) -> (ParameterSet, TransformerBlock) {
        let mut ps = ParameterSet::new();
        let mut r = rng(seed);
        let b = TransformerBlock::new(&mut ps, "blk", 8, 2, 16, &mut r).unwrap();
        (ps, b)
    }

    fn input(t: usize, d: usize, seed: u64) -> Vec<f32> {
        let mut r = rng(seed);
        (0..t * d).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn single_token_is_value_then_output_projection() {
        let mut ps = ParameterSet::new();
        let mha = MultiHeadAttention::new(&mut ps, "a", 8, 4, &mut rng(1)).unwrap();
        let x = input(1, 8, 2);
        let got = mha.forward(&ps, &x, false, None).unwrap();
        let want = mha.wo.forward(&ps, &mha.wv.forward(&ps, &x));
        assert_eq!(got, want);
    }

    #[test]
    fn causal_outputs_ignore_later_tokens() {
        let (ps, b) = block(3);
        let x = input(6, 8, 4);
        let mut y = x.clone();
        for v in &mut y[4 * 8..] {
            *v += 1.5;
        }
        let a = b.forward(&ps, &x, true, None).unwrap();
        let c = b.forward(&ps, &y, true, None).unwrap();
        assert_eq!(a[..4 * 8], c[..4 * 8]);
        assert_ne!(a[4 * 8..], c[4 * 8..]);
    }

    #[test]
    fn cached_incremental_matches_one_shot() {
        let (ps, b) = block(5);
        let x = input(7, 8, 6);
        let full = b.forward(&ps, &x, true, None).unwrap();
        let mut cache = KvCache::new();
        for t in 0..7 {
            let row = b.forward(&ps, &x[t * 8..(t + 1) * 8], true, Some(&mut cache)).unwrap();
            for (a, c) in row.iter().zip(&full[t * 8..(t + 1) * 8]) {
                assert!((a - c).abs() <= 1e-5);
            }
        }
        assert_eq!(cache.len(), 7);
    }

    #[test]
    fn cache_rejected_for_bidirectional() {
        let (ps, b) = block(7);
        let x = input(2, 8, 8);
        assert!(b.forward(&ps, &x, false, Some(&mut KvCache::new())).is_err());
    }

    #[test]
    fn tape_block_matches_plain_forward() {
        let (ps, b) = block(9);
        let x = input(5, 8, 10);
        for causal in [false, true] {
            let plain = b.forward(&ps, &x, causal, None).unwrap();
            let mut tape = Tape::new();
            let xv = tape.constant(5, 8, x.clone());
            let y = b.tape(&mut tape, &ps, xv, causal, &[(0, 5)]);
            assert_eq!(tape.value(y), &plain[..]);
        }
    }

    #[test]
    fn segments_do_not_attend_across() {
        let (ps, b) = block(11);
        let x = input(7, 8, 12);
        let mut tape = Tape::new();
        let xv = tape.constant(7, 8, x.clone());
        let y = b.tape(&mut tape, &ps, xv, false, &[(0, 3), (3, 4)]);
        let first = b.forward(&ps, &x[..24], false, None).unwrap();
        let second = b.forward(&ps, &x[24..], false, None).unwrap();
        assert_eq!(&tape.value(y)[..24], &first[..]);
        assert_eq!(&tape.value(y)[24..], &second[..]);
    }
}
