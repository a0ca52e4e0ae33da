//! Seeded causal transformer text encoder.
//!
//! Stands in for a frozen contrastive text encoder: strictly causal
//! self-attention, pre-norm blocks, learned positional embeddings, final
//! layer norm. The forward pass is the same tape graph used by training, so
//! encoding is bit-identical between the two.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::embedding::EmbeddingSequence;
use crate::error::{Result, SdgError};
use crate::mat::Mat;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape, Tn};
use crate::vocab::{TokenSequence, SEQ_LEN};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub const MAX_LEN: usize = SEQ_LEN;

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return Err(SdgError::Config("encoder dims must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(SdgError::IndivisibleDim {
                dim: self.embed_dim,
                heads: self.num_heads,
            });
        }
        if self.vocab_size == 0 || self.ff_dim == 0 {
            return Err(SdgError::Config("vocab and ff dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer<S> {
    pub ln1_g: Tn<S>,
    pub ln1_b: Tn<S>,
    pub wq: Tn<S>,
    pub wk: Tn<S>,
    pub wv: Tn<S>,
    pub wo: Tn<S>,
    pub ln2_g: Tn<S>,
    pub ln2_b: Tn<S>,
    pub w1: Tn<S>,
    pub b1: Tn<S>,
    pub w2: Tn<S>,
    pub b2: Tn<S>,
}

#[derive(Debug, Clone)]
pub struct EncoderWeights<S> {
    pub config: EncoderConfig,
    pub token_embed: Tn<S>,
    pub pos_embed: Tn<S>,
    pub layers: Vec<EncoderLayer<S>>,
    pub lnf_g: Tn<S>,
    pub lnf_b: Tn<S>,
}

/// Seeded dense init helper shared with the denoiser: normal draws sampled
/// in f64 in a fixed order, then converted.
pub(crate) fn init_tensor<S: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    std: f64,
) -> Tn<S> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::of(dist.sample(rng))).collect();
    Tn::from_vec(shape, data)
}

fn ones<S: Scalar>(n: usize) -> Tn<S> {
    Tn::from_vec(&[n], vec![S::one(); n])
}

pub fn init_encoder<S: Scalar>(config: &EncoderConfig) -> Result<EncoderWeights<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.embed_dim;
    let std = 1.0 / (c as f64).sqrt();
    let token_embed = init_tensor(&mut rng, &[config.vocab_size, c], std);
    let pos_embed = init_tensor(&mut rng, &[EncoderConfig::MAX_LEN, c], std);
    let layers = (0..config.num_layers)
        .map(|_| EncoderLayer {
            ln1_g: ones(c),
            ln1_b: Tn::zeros(&[c]),
            wq: init_tensor(&mut rng, &[c, c], std),
            wk: init_tensor(&mut rng, &[c, c], std),
            wv: init_tensor(&mut rng, &[c, c], std),
            wo: init_tensor(&mut rng, &[c, c], std),
            ln2_g: ones(c),
            ln2_b: Tn::zeros(&[c]),
            w1: init_tensor(&mut rng, &[c, config.ff_dim], std),
            b1: Tn::zeros(&[config.ff_dim]),
            w2: init_tensor(&mut rng, &[config.ff_dim, c], 1.0 / (config.ff_dim as f64).sqrt()),
            b2: Tn::zeros(&[c]),
        })
        .collect();
    Ok(EncoderWeights {
        config: config.clone(),
        token_embed,
        pos_embed,
        layers,
        lnf_g: ones(c),
        lnf_b: Tn::zeros(&[c]),
    })
}

/// Tape node ids for every encoder parameter, in checkpoint order.
pub struct EncoderNodes {
    pub token_embed: NodeId,
    pub pos_embed: NodeId,
    pub layers: Vec<[NodeId; 12]>,
    pub lnf_g: NodeId,
    pub lnf_b: NodeId,
}

impl EncoderNodes {
    /// Every parameter node, in `tensors` order.
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.token_embed, self.pos_embed];
        for l in &self.layers {
            out.extend_from_slice(l);
        }
        out.push(self.lnf_g);
        out.push(self.lnf_b);
        out
    }
}

impl<S: Scalar> EncoderWeights<S> {
    /// Parameter tensors in a fixed, documented order (used for checkpoints
    /// and optimizer state).
    pub fn tensors(&self) -> Vec<(String, &Tn<S>)> {
        let mut out = vec![
            ("token_embed".to_string(), &self.token_embed),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("lnf_g".to_string(), &self.lnf_g));
        out.push(("lnf_b".to_string(), &self.lnf_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tn<S>)> {
        let mut out = vec![
            ("token_embed".to_string(), &mut self.token_embed),
            ("pos_embed".to_string(), &mut self.pos_embed),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, t) in [
                ("ln1_g", &mut l.ln1_g),
                ("ln1_b", &mut l.ln1_b),
                ("wq", &mut l.wq),
                ("wk", &mut l.wk),
                ("wv", &mut l.wv),
                ("wo", &mut l.wo),
                ("ln2_g", &mut l.ln2_g),
                ("ln2_b", &mut l.ln2_b),
                ("w1", &mut l.w1),
                ("b1", &mut l.b1),
                ("w2", &mut l.w2),
                ("b2", &mut l.b2),
            ] {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("lnf_g".to_string(), &mut self.lnf_g));
        out.push(("lnf_b".to_string(), &mut self.lnf_b));
        out
    }

    /// Registers every parameter as a tape leaf.
    pub fn leaves(&self, tape: &mut Tape<S>) -> EncoderNodes {
        EncoderNodes {
            token_embed: tape.leaf(self.token_embed.clone()),
            pos_embed: tape.leaf(self.pos_embed.clone()),
            layers: self
                .layers
                .iter()
                .map(|l| {
                    [
                        tape.leaf(l.ln1_g.clone()),
                        tape.leaf(l.ln1_b.clone()),
                        tape.leaf(l.wq.clone()),
                        tape.leaf(l.wk.clone()),
                        tape.leaf(l.wv.clone()),
                        tape.leaf(l.wo.clone()),
                        tape.leaf(l.ln2_g.clone()),
                        tape.leaf(l.ln2_b.clone()),
                        tape.leaf(l.w1.clone()),
                        tape.leaf(l.b1.clone()),
                        tape.leaf(l.w2.clone()),
                        tape.leaf(l.b2.clone()),
                    ]
                })
                .collect(),
            lnf_g: tape.leaf(self.lnf_g.clone()),
            lnf_b: tape.leaf(self.lnf_b.clone()),
        }
    }

    /// Forward pass on an existing tape. Returns the [77, c] output node.
    pub fn forward(&self, tape: &mut Tape<S>, nodes: &EncoderNodes, ids: &[usize]) -> NodeId {
        assert_eq!(ids.len(), EncoderConfig::MAX_LEN);
        let emb = tape.embedding(nodes.token_embed, ids);
        let mut x = tape.add(emb, nodes.pos_embed);
        for l in &nodes.layers {
            let [ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2] = *l;
            let n1 = tape.layer_norm(x, ln1_g, ln1_b);
            let att = tape.self_attention(n1, wq, wk, wv, wo, self.config.num_heads);
            x = tape.add(x, att);
            let n2 = tape.layer_norm(x, ln2_g, ln2_b);
            let h = tape.matmul(n2, w1);
            let h = tape.add_row(h, b1);
            let h = tape.silu(h);
            let h = tape.matmul(h, w2);
            let h = tape.add_row(h, b2);
            x = tape.add(x, h);
        }
        tape.layer_norm(x, nodes.lnf_g, nodes.lnf_b)
    }

    /// Plain encoding for inference. Runs the same graph as training, so
    /// outputs match training-time activations bit for bit.
    pub fn encode(&self, tokens: &TokenSequence) -> Result<EmbeddingSequence<S>> {
        let ids: Vec<usize> = tokens.ids().iter().map(|&i| i as usize).collect();
        if let Some(&bad) = tokens.ids().iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(SdgError::Config(format!(
                "token id {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        let mut tape = Tape::new();
        let nodes = self.leaves(&mut tape);
        let out = self.forward(&mut tape, &nodes, &ids);
        let v = tape.value(out);
        let mat = Mat::from_vec(EncoderConfig::MAX_LEN, self.config.embed_dim, v.data.clone());
        EmbeddingSequence::new(mat, tokens.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{test_vocab, tokenize};

    fn small_config(seed: u64) -> EncoderConfig {
        EncoderConfig {
            vocab_size: test_vocab().len(),
            embed_dim: 16,
            num_layers: 2,
            num_heads: 4,
            ff_dim: 32,
            seed,
        }
    }

    #[test]
    fn indivisible_dim_rejected() {
        let cfg = EncoderConfig { embed_dim: 63, num_heads: 4, ..small_config(0) };
        assert!(matches!(
            cfg.validate(),
            Err(SdgError::IndivisibleDim { dim: 63, heads: 4 })
        ));
    }

    #[test]
    fn same_seed_identical_weights() {
        let a = init_encoder::<f32>(&small_config(0)).unwrap();
        let b = init_encoder::<f32>(&small_config(0)).unwrap();
        for ((_, ta), (_, tb)) in a.tensors().iter().zip(b.tensors().iter()) {
            assert_eq!(ta.data, tb.data);
        }
        let c = init_encoder::<f32>(&small_config(1)).unwrap();
        assert_ne!(a.token_embed.data, c.token_embed.data);
    }

    #[test]
    fn prefix_invariance_is_bitwise() {
        let v = test_vocab();
        let w = init_encoder::<f32>(&small_config(7)).unwrap();
        let a = w.encode(&tokenize("a red apple and a dog", &v).unwrap()).unwrap();
        let b = w.encode(&tokenize("a red banana", &v).unwrap()).unwrap();
        // bos + "a" + "red" share positions 0..=2
        for r in 0..3 {
            assert_eq!(a.data().row(r), b.data().row(r), "row {r}");
        }
        assert_ne!(a.data().row(3), b.data().row(3));
    }

    #[test]
    fn contextualization_blends_later_tokens() {
        let v = test_vocab();
        let w = init_encoder::<f32>(&small_config(7)).unwrap();
        let short = w.encode(&tokenize("a red apple", &v).unwrap()).unwrap();
        let long = w
            .encode(&tokenize("a green bag and a red apple", &v).unwrap())
            .unwrap();
        // "red" sits at content position 1 (row 2) in the short prompt and
        // content position 5 (row 6) in the long one.
        assert_ne!(short.data().row(2), long.data().row(6));
    }

    #[test]
    fn pad_tail_rows_are_contextualized() {
        let v = test_vocab();
        let w = init_encoder::<f32>(&small_config(7)).unwrap();
        let a = w.encode(&tokenize("a red apple", &v).unwrap()).unwrap();
        let b = w.encode(&tokenize("a red apple and a dog", &v).unwrap()).unwrap();
        // Row 70 is padding in both prompts but sits after different content.
        assert_ne!(a.data().row(70), b.data().row(70));
    }

    #[test]
    fn encode_matches_training_forward() {
        let v = test_vocab();
        let w = init_encoder::<f32>(&small_config(3)).unwrap();
        let toks = tokenize("a white sheep and a red car", &v).unwrap();
        let enc = w.encode(&toks).unwrap();
        let ids: Vec<usize> = toks.ids().iter().map(|&i| i as usize).collect();
        let mut tape = Tape::new();
        let nodes = w.leaves(&mut tape);
        let out = w.forward(&mut tape, &nodes, &ids);
        assert_eq!(tape.value(out).data, enc.data().data());
    }

    #[test]
    fn rejects_out_of_vocab_ids() {
        let v = test_vocab();
        let mut cfg = small_config(0);
        cfg.vocab_size = 3; // only specials
        let w = init_encoder::<f32>(&cfg).unwrap();
        assert!(w.encode(&tokenize("a red apple", &v).unwrap()).is_err());
    }
}
