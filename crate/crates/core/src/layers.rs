//! Building blocks shared by the encoder, decoder and summarizer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// `x · W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), inp, out, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, out));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.bind(g, self.weight);
        let b = store.bind(g, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).rows()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(1, dim, 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = store.bind(g, self.gain);
        let bias = store.bind(g, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        hidden: usize,
        out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        FeedForward {
            hidden: Linear::new(store, &format!("{name}.hidden"), inp, hidden, rng),
            output: Linear::new(store, &format!("{name}.output"), hidden, out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h);
        self.output.forward(g, store, h)
    }
}

/// Result of a multi-head attention read.
#[derive(Clone, Debug)]
pub struct Attended {
    /// `queries × d` concatenation of the per-head outputs.
    pub output: Var,
    /// Per-head `queries × keys` attention weights.
    pub weights: Vec<Var>,
}

/// `softmax(Q_h K_hᵀ / √d_h) V_h` for each head `h`, heads concatenated
/// along the feature axis. Inputs are already projected.
pub fn multi_head_attention(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    values: Var,
    heads: usize,
) -> Result<Attended> {
    let [_, d] = g.shape(queries);
    let [nk, dk] = g.shape(keys);
    let [nv, dv] = g.shape(values);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "model width {d} not divisible by {heads} heads"
        )));
    }
    if nk != nv || dk != d || dv != d {
        return Err(Error::contract(
            "multi_head_attention",
            format!("queries ·x{d}, keys {nk}x{dk}, values {nv}x{dv}"),
        ));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (q, k, v) = if heads == 1 {
            (queries, keys, values)
        } else {
            (
                g.slice_cols(queries, h * dh, dh)?,
                g.slice_cols(keys, h * dh, dh)?,
                g.slice_cols(values, h * dh, dh)?,
            )
        };
        let scores = g.matmul_bt(q, k)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        outs.push(g.matmul(attn, v)?);
        weights.push(attn);
    }
    let mut output = outs[0];
    for &o in &outs[1..] {
        output = g.concat_cols(output, o)?;
    }
    Ok(Attended { output, weights })
}

/// Projected multi-head attention block.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q_in: Var, kv_in: Var) -> Result<Attended> {
        let q = self.query.forward(g, store, q_in)?;
        let k = self.key.forward(g, store, kv_in)?;
        let v = self.value.forward(g, store, kv_in)?;
        self.attend_projected(g, store, q, k, v)
    }

    pub fn attend_projected(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<Attended> {
        let att = multi_head_attention(g, q, k, v, self.heads)?;
        let output = self.out.forward(g, store, att.output)?;
        Ok(Attended {
            output,
            weights: att.weights,
        })
    }
}

/// Gated recurrent unit weights (reset, update, candidate blocks packed).
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Gru {
            w_ih: store.add_glorot(format!("{name}.w_ih"), inp, 3 * hidden, rng),
            w_hh: store.add_glorot(format!("{name}.w_hh"), hidden, 3 * hidden, rng),
            b_ih: store.add(format!("{name}.b_ih"), Tensor::zeros(1, 3 * hidden)),
            b_hh: store.add(format!("{name}.b_hh"), Tensor::zeros(1, 3 * hidden)),
            hidden,
        }
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let w_ih = store.bind(g, self.w_ih);
        let w_hh = store.bind(g, self.w_hh);
        let b_ih = store.bind(g, self.b_ih);
        let b_hh = store.bind(g, self.b_hh);
        g.gru_cell(x, h, w_ih, w_hh, b_ih, b_hh)
    }

    /// Runs over the rows of `seq` from an all-zero state; returns the final state.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, seq: Var) -> Result<Var> {
        let [len, _] = g.shape(seq);
        let mut h = g.constant(Tensor::zeros(1, self.hidden));
        for t in 0..len {
            let x = g.slice_rows(seq, t, 1)?;
            h = self.step(g, store, x, h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::row(vec![0.3, -0.2, 0.9, 0.1]));
        let v = g.constant(Tensor::row(vec![1.0, 2.0, 3.0, 4.0]));
        let att = multi_head_attention(&mut g, q, q, v, 1).unwrap();
        assert_eq!(g.value(att.output).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn identical_keys_split_evenly() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::row(vec![0.5, -1.0]));
        let k = g.constant(Tensor::from_rows(&[vec![0.2, 0.4], vec![0.2, 0.4]]).unwrap());
        let v = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let att = multi_head_attention(&mut g, q, k, v, 1).unwrap();
        assert_eq!(g.value(att.weights[0]).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (d, heads) = (6, 2);
        let q = rand_t(&mut rng, 3, d);
        let k = rand_t(&mut rng, 4, d);
        let v = rand_t(&mut rng, 4, d);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let att = multi_head_attention(&mut g, qv, kv, vv, heads).unwrap();
        let got = g.value(att.output);
        let dh = d / heads;
        for h in 0..heads {
            for i in 0..3 {
                let logits: Vec<f64> = (0..4)
                    .map(|j| {
                        (0..dh).map(|c| q.get(i, h * dh + c) * k.get(j, h * dh + c)).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for c in 0..dh {
                    let want: f64 = (0..4).map(|j| logits[j].exp() / z * v.get(j, h * dh + c)).sum();
                    assert!((got.get(i, h * dh + c) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn indivisible_width_is_config_error() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(1, 5));
        assert!(matches!(
            multi_head_attention(&mut g, q, q, q, 2),
            Err(Error::Config(_))
        ));
    }
}
