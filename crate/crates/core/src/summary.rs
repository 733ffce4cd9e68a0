//! Recurrent video/text summarizer trained for cross-modal retrieval, then
//! frozen and reused to score how well soft-selected keyframes preserve the
//! semantics of the whole clip sequence.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Gru, Linear};
use crate::model::ModelConfig;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Prefix shared by every video-side summarizer parameter.
pub const VIDEO_SIDE: &str = "summary.video";

#[derive(Clone, Debug)]
pub struct Summarizer {
    pub video_gru: Gru,
    pub video_proj: Linear,
    pub text_embedding: ParamId,
    pub text_gru: Gru,
    pub text_proj: Linear,
}

impl Summarizer {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let h = cfg.summary_hidden;
        Summarizer {
            video_gru: Gru::new(store, "summary.video.gru", cfg.feature_dim, h, rng),
            video_proj: Linear::new(store, "summary.video.proj", h, cfg.joint_dim, rng),
            text_embedding: store.add_glorot("summary.text.embedding", cfg.vocab_size, h, rng),
            text_gru: Gru::new(store, "summary.text.gru", h, h, rng),
            text_proj: Linear::new(store, "summary.text.proj", h, cfg.joint_dim, rng),
        }
    }

    /// Stops all further updates to the video-side weights.
    pub fn freeze(store: &mut ParamStore) {
        store.set_trainable_prefix(VIDEO_SIDE, false);
    }

    pub fn is_frozen(store: &ParamStore) -> bool {
        store.none_trainable_with_prefix(VIDEO_SIDE)
    }

    /// Final recurrent state over the clip rows (before projection).
    pub fn video_state(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.shape(x)[0] == 0 {
            return Err(Error::contract("summarize_video", "empty clip sequence"));
        }
        self.video_gru.run(g, store, x)
    }

    pub fn summarize_video(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.video_state(g, store, x)?;
        let p = self.video_proj.forward(g, store, h)?;
        Ok(l2_normalize(g, p))
    }

    pub fn summarize_text(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::contract("summarize_text", "empty paragraph"));
        }
        let table = store.bind(g, self.text_embedding);
        let emb = g.gather(table, tokens)?;
        let h = self.text_gru.run(g, store, emb)?;
        let p = self.text_proj.forward(g, store, h)?;
        Ok(l2_normalize(g, p))
    }

    /// `‖GRUᵛ(X ⊙ s) − GRUᵛ(X)‖₂` on raw final states; requires a frozen summarizer.
    pub fn reconstruction_loss(&self, g: &mut Graph, store: &ParamStore, x0: Var, scores: Var) -> Result<Var> {
        if !Self::is_frozen(store) {
            return Err(Error::contract(
                "reconstruction_loss",
                "video summarizer must be frozen before use",
            ));
        }
        let masked = g.mul(x0, scores)?;
        let key = self.video_state(g, store, masked)?;
        let full = self.video_state(g, store, x0)?;
        g.l2_distance(key, full)
    }
}

fn recip(x: f64) -> f64 {
    1.0 / x
}

fn d_recip(x: f64, _: f64) -> f64 {
    -1.0 / (x * x)
}

/// Unit-norm rows-vector. A zero vector maps to the first basis vector.
pub fn l2_normalize(g: &mut Graph, v: Var) -> Var {
    let [r, c] = g.shape(v);
    let norm = g.value(v).data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        let mut e = Tensor::zeros(r, c);
        e.data_mut()[0] = 1.0;
        return g.constant(e);
    }
    let zero = g.constant(Tensor::zeros(r, c));
    let n = g.l2_distance(v, zero).expect("same shape");
    let inv = g.map(n, recip, d_recip);
    g.mul(v, inv).expect("scalar broadcast")
}

/// Max-violation triplet loss over an in-batch similarity matrix.
///
/// `video` and `text` are `B × d_j` unit rows; row `i` of each forms a
/// positive pair. Every other row in the batch is a negative, and only the
/// hardest one per direction contributes:
/// `Σᵢ [m − s(vᵢ,tᵢ) + maxⱼ s(vᵢ,tⱼ)]₊ + [m − s(vᵢ,tᵢ) + maxⱼ s(vⱼ,tᵢ)]₊`.
pub fn triplet_retrieval_loss(g: &mut Graph, video: Var, text: Var, margin: f64) -> Result<Var> {
    let [b, d] = g.shape(video);
    if g.shape(text) != [b, d] {
        return Err(Error::contract(
            "triplet_retrieval_loss",
            format!("video {:?} vs text {:?}", g.shape(video), g.shape(text)),
        ));
    }
    if b < 2 {
        return Err(Error::contract(
            "triplet_retrieval_loss",
            "batch needs at least two pairs to have negatives",
        ));
    }
    let sim = g.matmul_bt(video, text)?;
    let s = g.value(sim).clone();
    let hardest = |i: usize, by_row: bool| -> usize {
        (0..b)
            .filter(|&j| j != i)
            .max_by(|&x, &y| {
                let (sx, sy) = if by_row {
                    (s.get(i, x), s.get(i, y))
                } else {
                    (s.get(x, i), s.get(y, i))
                };
                // ties resolve to the lower index
                sx.total_cmp(&sy).then(y.cmp(&x))
            })
            .expect("b >= 2")
    };
    let pos_idx: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    let neg_text: Vec<(usize, usize)> = (0..b).map(|i| (i, hardest(i, true))).collect();
    let neg_video: Vec<(usize, usize)> = (0..b).map(|i| (hardest(i, false), i)).collect();
    let pos = g.gather_elements(sim, &pos_idx)?;
    let nt = g.gather_elements(sim, &neg_text)?;
    let nv = g.gather_elements(sim, &neg_video)?;
    let mut total = None;
    for neg in [nt, nv] {
        let diff = g.sub(neg, pos)?;
        let hinge = g.affine(diff, 1.0, margin);
        let hinge = g.relu(hinge);
        let s = g.sum(hinge);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok(total.expect("two directions"))
}

/// `|mean(s) − δ|`.
pub fn sparsity_loss(g: &mut Graph, scores: Var, delta: f64) -> Var {
    let m = g.mean(scores);
    let d = g.affine(m, 1.0, -delta);
    g.abs(d)
}

/// Fraction of videos whose own paragraph is the nearest text (video→text R@1).
pub fn recall_at_1(video: &Tensor, text: &Tensor) -> f64 {
    let b = video.rows();
    let sim = video.matmul(&text.transpose());
    let hits = (0..b)
        .filter(|&i| {
            let row = sim.row_slice(i);
            let best = (0..b)
                .max_by(|&x, &y| row[x].total_cmp(&row[y]).then(y.cmp(&x)))
                .expect("nonempty");
            best == i
        })
        .count();
    hits as f64 / b as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            feature_dim: 4,
            hidden: 8,
            heads: 2,
            layers: 1,
            ffn_dim: 8,
            vocab_size: 9,
            max_clips: 10,
            max_len: 10,
            summary_hidden: 5,
            joint_dim: 3,
            ..ModelConfig::default()
        }
    }

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn setup() -> (Summarizer, ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        let s = Summarizer::new(&mut store, &cfg(), &mut rng);
        (s, store, rng)
    }

    #[test]
    fn zero_state_maps_to_first_basis_vector() {
        let (s, mut store, _) = setup();
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).shape();
            *store.get_mut(id) = Tensor::zeros(shape[0], shape[1]);
        }
        for len in [1, 4] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::zeros(len, 4));
            let e = s.summarize_video(&mut g, &store, x).unwrap();
            assert_eq!(g.value(e).data(), &[1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn embeddings_have_unit_norm() {
        let (s, store, mut rng) = setup();
        let mut g = Graph::new();
        let x = g.constant(rand_t(&mut rng, 6, 4));
        let e = s.summarize_video(&mut g, &store, x).unwrap();
        let n: f64 = g.value(e).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        let t = s.summarize_text(&mut g, &store, &[3, 1, 4]).unwrap();
        let n: f64 = g.value(t).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_clip_is_one_gru_step() {
        let (s, store, mut rng) = setup();
        let x = rand_t(&mut rng, 1, 4);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let state = s.video_state(&mut g, &store, xv).unwrap();
        let h0 = g.constant(Tensor::zeros(1, 5));
        let one = s.video_gru.step(&mut g, &store, xv, h0).unwrap();
        assert_eq!(g.value(state), g.value(one));
    }

    #[test]
    fn unit_gating_is_identity() {
        let (s, store, mut rng) = setup();
        let x = rand_t(&mut rng, 5, 4);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let ones = g.constant(Tensor::full(5, 1, 1.0));
        let gated = g.mul(xv, ones).unwrap();
        let a = s.summarize_video(&mut g, &store, xv).unwrap();
        let b = s.summarize_video(&mut g, &store, gated).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn text_rules() {
        let (s, store, _) = setup();
        let mut g = Graph::new();
        assert!(s.summarize_text(&mut g, &store, &[]).is_err());
        let a = s.summarize_text(&mut g, &store, &[2, 5, 5]).unwrap();
        let b = s.summarize_text(&mut g, &store, &[2, 5, 5]).unwrap();
        assert_eq!(g.value(a), g.value(b));
        let single = s.summarize_text(&mut g, &store, &[7]).unwrap();
        let table = store.bind(&mut g, s.text_embedding);
        let emb = g.gather(table, &[7]).unwrap();
        let h0 = g.constant(Tensor::zeros(1, 5));
        let h = s.text_gru.step(&mut g, &store, emb, h0).unwrap();
        let p = s.text_proj.forward(&mut g, &store, h).unwrap();
        let p = l2_normalize(&mut g, p);
        assert_eq!(g.value(single), g.value(p));
    }

    fn unit_rows(rows: &[Vec<f64>]) -> Tensor {
        let normed: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / n).collect()
            })
            .collect();
        Tensor::from_rows(&normed).unwrap()
    }

    #[test]
    fn triplet_inactive_when_well_separated() {
        let v = unit_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let mut g = Graph::new();
        let vv = g.constant(v.clone());
        let tv = g.constant(v);
        let loss = triplet_retrieval_loss(&mut g, vv, tv, 0.2).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn triplet_equals_margin_at_tie() {
        // every pair (positive or negative) has similarity 0.5
        let v = unit_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let t = unit_rows(&[
            vec![0.5, (0.75f64).sqrt()],
            vec![0.5, -(0.75f64).sqrt()],
        ]);
        let mut g = Graph::new();
        let (vv, tv) = (g.constant(v), g.constant(t));
        let loss = triplet_retrieval_loss(&mut g, vv, tv, 0.2).unwrap();
        assert!((g.value(loss).item() - 0.8).abs() < 1e-12, "0.4 per pair, two pairs");
    }

    #[test]
    fn triplet_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let b = 5;
            let vrows: Vec<Vec<f64>> = (0..b).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let trows: Vec<Vec<f64>> = (0..b).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let v = unit_rows(&vrows);
            let t = unit_rows(&trows);
            let sim = |i: usize, j: usize| -> f64 { (0..3).map(|c| v.get(i, c) * t.get(j, c)).sum() };
            let mut want = 0.0;
            for i in 0..b {
                let mut worst_t = f64::NEG_INFINITY;
                let mut worst_v = f64::NEG_INFINITY;
                for j in 0..b {
                    if j != i {
                        worst_t = worst_t.max(sim(i, j));
                        worst_v = worst_v.max(sim(j, i));
                    }
                }
                want += (0.2 - sim(i, i) + worst_t).max(0.0) + (0.2 - sim(i, i) + worst_v).max(0.0);
            }
            let mut g = Graph::new();
            let (vv, tv) = (g.constant(v.clone()), g.constant(t.clone()));
            let loss = triplet_retrieval_loss(&mut g, vv, tv, 0.2).unwrap();
            assert!((g.value(loss).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn triplet_needs_two_pairs() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::row(vec![1.0, 0.0]));
        assert!(matches!(
            triplet_retrieval_loss(&mut g, v, v, 0.2),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn reconstruction_rules() {
        let (s, mut store, mut rng) = setup();
        let x = rand_t(&mut rng, 6, 4);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let ones = g.constant(Tensor::full(6, 1, 1.0));
        let res = s.reconstruction_loss(&mut g, &store, xv, ones);
        assert!(res.is_err(), "unfrozen");
        Summarizer::freeze(&mut store);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let ones = g.constant(Tensor::full(6, 1, 1.0));
        let same = s.reconstruction_loss(&mut g, &store, xv, ones).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let zeros = g.constant(Tensor::zeros(6, 1));
        let off = s.reconstruction_loss(&mut g, &store, xv, zeros).unwrap();
        assert!(g.value(off).item() > 0.0);
    }

    #[test]
    fn reconstruction_matches_cloned_gru() {
        let (s, mut store, mut rng) = setup();
        Summarizer::freeze(&mut store);
        let x = rand_t(&mut rng, 5, 4);
        let scores: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let sv = g.leaf(Tensor::column(scores.clone()));
        let loss = s.reconstruction_loss(&mut g, &store, xv, sv).unwrap();
        let loss = g.value(loss).item();

        // Independent scalar GRU on the raw weights.
        let w_ih = store.get(s.video_gru.w_ih).clone();
        let w_hh = store.get(s.video_gru.w_hh).clone();
        let b_ih = store.get(s.video_gru.b_ih).clone();
        let b_hh = store.get(s.video_gru.b_hh).clone();
        let hsz = 5;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let run = |rows: &[Vec<f64>]| -> Vec<f64> {
            let mut h = vec![0.0; hsz];
            for x in rows {
                let lin = |w: &Tensor, b: &Tensor, v: &[f64], col: usize| -> f64 {
                    v.iter().enumerate().map(|(i, xi)| xi * w.get(i, col)).sum::<f64>() + b.get(0, col)
                };
                let mut next = vec![0.0; hsz];
                for j in 0..hsz {
                    let r = sig(lin(&w_ih, &b_ih, x, j) + lin(&w_hh, &b_hh, &h, j));
                    let z = sig(lin(&w_ih, &b_ih, x, hsz + j) + lin(&w_hh, &b_hh, &h, hsz + j));
                    let n = (lin(&w_ih, &b_ih, x, 2 * hsz + j) + r * lin(&w_hh, &b_hh, &h, 2 * hsz + j)).tanh();
                    next[j] = (1.0 - z) * n + z * h[j];
                }
                h = next;
            }
            h
        };
        let raw: Vec<Vec<f64>> = (0..5).map(|r| x.row_slice(r).to_vec()).collect();
        let masked: Vec<Vec<f64>> = raw
            .iter()
            .zip(&scores)
            .map(|(r, s)| r.iter().map(|v| v * s).collect())
            .collect();
        let (a, b) = (run(&masked), run(&raw));
        let want = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn frozen_video_side_gets_no_gradient() {
        let (s, mut store, mut rng) = setup();
        Summarizer::freeze(&mut store);
        let mut g = Graph::new();
        let xv = g.constant(rand_t(&mut rng, 4, 4));
        let sv = g.leaf(Tensor::column(vec![0.2, 0.9, 0.5, 0.4]));
        let loss = s.reconstruction_loss(&mut g, &store, xv, sv).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(sv).is_some());
        let grads = store.collect_grads(&g);
        for (id, name, _) in store.iter() {
            if name.starts_with(VIDEO_SIDE) {
                assert!(grads[id.index()].data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn sparsity_values() {
        let mut g = Graph::new();
        for (scores, want) in [
            (vec![0.5, 0.5], 0.0),
            (vec![0.8, 0.8], 0.3),
            (vec![0.2, 0.2], 0.3),
            (vec![0.9, 0.1, 0.5], 0.0),
        ] {
            let s = g.constant(Tensor::column(scores));
            let l = sparsity_loss(&mut g, s, 0.5);
            assert!((g.value(l).item() - want).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn sparsity_ignores_order(mut s in proptest::collection::vec(0.01f64..0.99, 1..20), delta in 0.05f64..1.0) {
            let mut g = Graph::new();
            let a = g.constant(Tensor::column(s.clone()));
            let la = sparsity_loss(&mut g, a, delta);
            let la = g.value(la).item();
            s.reverse();
            let b = g.constant(Tensor::column(s));
            let lb = sparsity_loss(&mut g, b, delta);
            let lb = g.value(lb).item();
            proptest::prop_assert!((la - lb).abs() < 1e-12);
        }
    }
}
