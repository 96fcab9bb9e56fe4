//! Transformer building blocks: pre-norm encoder stacks, the bar-patch and
//! text embedders and the causal character decoder.

use std::rc::Rc;

use rand::Rng;

use super::graph::{Graph, SeqLayout, Var};
use super::params::ParamStore;
use super::{ModelConfig, NnError};
use crate::patch::{PatchSequence, PatchTokens, PATCH_LEN, VOCAB_SIZE};
use crate::text::TextTokens;

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    fn register(store: &mut ParamStore, name: &str, shape: (usize, usize), std: f64, rng: &mut impl Rng) {
        store.normal(&format!("{name}.w"), shape, std, rng);
        store.zeros(&format!("{name}.b"), (1, shape.1));
    }

    fn bind(store: &ParamStore, name: &str) -> Result<Self, NnError> {
        Ok(Self {
            w: store.id(&format!("{name}.w"))?,
            b: store.id(&format!("{name}.b"))?,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        let b = g.param(self.b);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

impl Norm {
    fn register(store: &mut ParamStore, name: &str, dim: usize) {
        store.ones(&format!("{name}.g"), (1, dim));
        store.zeros(&format!("{name}.b"), (1, dim));
    }

    fn bind(store: &ParamStore, name: &str) -> Result<Self, NnError> {
        Ok(Self {
            gamma: store.id(&format!("{name}.g"))?,
            beta: store.id(&format!("{name}.b"))?,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

/// Stack of pre-norm transformer blocks followed by a final layer norm.
/// With zero blocks the stack is the identity.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    blocks: Vec<Block>,
    final_norm: Option<Norm>,
    heads: usize,
    causal: bool,
}

impl TransformerStack {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        layers: usize,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) {
        let d = cfg.hidden_dim;
        let ff = d * cfg.ffn_mult;
        for i in 0..layers {
            let p = format!("{prefix}.layers.{i}");
            Norm::register(store, &format!("{p}.ln1"), d);
            for name in ["q", "k", "v", "o"] {
                Linear::register(store, &format!("{p}.attn.{name}"), (d, d), cfg.init_std, rng);
            }
            Norm::register(store, &format!("{p}.ln2"), d);
            Linear::register(store, &format!("{p}.ff1"), (d, ff), cfg.init_std, rng);
            Linear::register(store, &format!("{p}.ff2"), (ff, d), cfg.init_std, rng);
        }
        if layers > 0 {
            Norm::register(store, &format!("{prefix}.ln_f"), d);
        }
    }

    pub fn bind(
        store: &ParamStore,
        prefix: &str,
        layers: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Self, NnError> {
        let blocks = (0..layers)
            .map(|i| {
                let p = format!("{prefix}.layers.{i}");
                Ok(Block {
                    ln1: Norm::bind(store, &format!("{p}.ln1"))?,
                    q: Linear::bind(store, &format!("{p}.attn.q"))?,
                    k: Linear::bind(store, &format!("{p}.attn.k"))?,
                    v: Linear::bind(store, &format!("{p}.attn.v"))?,
                    o: Linear::bind(store, &format!("{p}.attn.o"))?,
                    ln2: Norm::bind(store, &format!("{p}.ln2"))?,
                    ff1: Linear::bind(store, &format!("{p}.ff1"))?,
                    ff2: Linear::bind(store, &format!("{p}.ff2"))?,
                })
            })
            .collect::<Result<Vec<_>, NnError>>()?;
        let final_norm = if layers > 0 {
            Some(Norm::bind(store, &format!("{prefix}.ln_f"))?)
        } else {
            None
        };
        Ok(Self {
            blocks,
            final_norm,
            heads,
            causal,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var, layout: &Rc<SeqLayout>, dropout: f64) -> Var {
        for block in &self.blocks {
            let h = block.ln1.forward(g, x);
            let q = block.q.forward(g, h);
            let k = block.k.forward(g, h);
            let v = block.v.forward(g, h);
            let a = g.attention(q, k, v, Rc::clone(layout), self.heads, self.causal);
            let a = block.o.forward(g, a);
            let a = g.dropout(a, dropout);
            x = g.add(x, a);

            let h = block.ln2.forward(g, x);
            let h = block.ff1.forward(g, h);
            let h = g.gelu(h);
            let h = block.ff2.forward(g, h);
            let h = g.dropout(h, dropout);
            x = g.add(x, h);
        }
        match &self.final_norm {
            Some(norm) => norm.forward(g, x),
            None => x,
        }
    }
}

/// Result of running an encoder over a batch of sequences.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Last hidden states, all sequences row-stacked.
    pub hidden: Var,
    /// Masked mean of `hidden` per sequence.
    pub pooled: Var,
    pub layout: Rc<SeqLayout>,
}

impl EncoderOutput {
    /// Pooled features scaled to unit L2 norm.
    pub fn normalized(&self, g: &mut Graph) -> Var {
        g.l2_normalize(self.pooled)
    }
}

fn encode_layout<'a>(lengths: &[usize], masks: impl Iterator<Item = &'a [bool]>) -> Rc<SeqLayout> {
    let mask: Vec<bool> = masks.flat_map(|m| m.iter().copied()).collect();
    Rc::new(SeqLayout::with_mask(lengths, mask))
}

/// Music encoder: each 64×98 one-hot patch is flattened and linearly
/// projected, a learned position embedding is added per patch index, and the
/// result runs through a transformer stack.
#[derive(Debug, Clone)]
pub struct MusicEncoder {
    proj: Linear,
    pos: usize,
    max_patches: usize,
    stack: TransformerStack,
    dropout: f64,
}

impl MusicEncoder {
    pub const PREFIX: &'static str = "music";

    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
        let d = cfg.hidden_dim;
        Linear::register(store, "music.patch", (PATCH_LEN * VOCAB_SIZE, d), cfg.init_std, rng);
        store.normal("music.pos", (cfg.max_patches, d), cfg.init_std, rng);
        TransformerStack::register(store, "music.encoder", cfg.encoder_layers, cfg, rng);
    }

    pub fn bind(store: &ParamStore, cfg: &ModelConfig) -> Result<Self, NnError> {
        Ok(Self {
            proj: Linear::bind(store, "music.patch")?,
            pos: store.id("music.pos")?,
            max_patches: cfg.max_patches,
            stack: TransformerStack::bind(store, "music.encoder", cfg.encoder_layers, cfg.heads, false)?,
            dropout: cfg.dropout,
        })
    }

    /// Flattened one-hot indices of a patch: slot `p` holding token `t` lights
    /// input unit `p * 98 + t`.
    pub fn one_hot_indices(patch: &PatchTokens) -> Vec<usize> {
        patch
            .ids()
            .iter()
            .enumerate()
            .map(|(p, &t)| p * VOCAB_SIZE + t as usize)
            .collect()
    }

    /// Patch projection plus position embedding, sequences row-stacked.
    pub fn embed(&self, g: &mut Graph, seqs: &[&PatchSequence]) -> Result<(Var, Rc<SeqLayout>), NnError> {
        let mut rows = Vec::new();
        let mut positions = Vec::new();
        let mut lengths = Vec::with_capacity(seqs.len());
        for seq in seqs {
            if seq.len() > self.max_patches {
                return Err(NnError::SequenceTooLong {
                    len: seq.len(),
                    max: self.max_patches,
                });
            }
            lengths.push(seq.len());
            for (i, patch) in seq.patches.iter().enumerate() {
                rows.push(Self::one_hot_indices(patch));
                positions.push(vec![i]);
            }
        }
        let w = g.param(self.proj.w);
        let x = g.gather_sum(w, Rc::new(rows));
        let b = g.param(self.proj.b);
        let x = g.add_row(x, b);
        let pos_table = g.param(self.pos);
        let pos = g.gather_sum(pos_table, Rc::new(positions));
        let x = g.add(x, pos);
        let layout = encode_layout(&lengths, seqs.iter().map(|s| s.mask.as_slice()));
        Ok((x, layout))
    }

    pub fn forward(&self, g: &mut Graph, seqs: &[&PatchSequence]) -> Result<EncoderOutput, NnError> {
        let (x, layout) = self.embed(g, seqs)?;
        let x = g.dropout(x, self.dropout);
        let hidden = self.stack.forward(g, x, &layout, self.dropout);
        let pooled = g.mean_pool(hidden, Rc::clone(&layout))?;
        Ok(EncoderOutput {
            hidden,
            pooled,
            layout,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    tok: usize,
    pos: usize,
    max_len: usize,
    stack: TransformerStack,
    dropout: f64,
}

impl TextEncoder {
    pub const PREFIX: &'static str = "text";

    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, vocab_size: usize, rng: &mut impl Rng) {
        let d = cfg.hidden_dim;
        store.normal("text.tok", (vocab_size, d), cfg.init_std, rng);
        store.normal("text.pos", (cfg.max_text_len, d), cfg.init_std, rng);
        TransformerStack::register(store, "text.encoder", cfg.text_layers, cfg, rng);
    }

    pub fn bind(store: &ParamStore, cfg: &ModelConfig) -> Result<Self, NnError> {
        Ok(Self {
            tok: store.id("text.tok")?,
            pos: store.id("text.pos")?,
            max_len: cfg.max_text_len,
            stack: TransformerStack::bind(store, "text.encoder", cfg.text_layers, cfg.heads, false)?,
            dropout: cfg.dropout,
        })
    }

    pub fn forward(&self, g: &mut Graph, texts: &[&TextTokens]) -> Result<EncoderOutput, NnError> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut lengths = Vec::with_capacity(texts.len());
        for t in texts {
            if t.len() > self.max_len {
                return Err(NnError::SequenceTooLong {
                    len: t.len(),
                    max: self.max_len,
                });
            }
            lengths.push(t.len());
            for (i, &id) in t.ids.iter().enumerate() {
                ids.push(vec![id as usize]);
                positions.push(vec![i]);
            }
        }
        let tok = g.param(self.tok);
        let x = g.gather_sum(tok, Rc::new(ids));
        let pos_table = g.param(self.pos);
        let pos = g.gather_sum(pos_table, Rc::new(positions));
        let x = g.add(x, pos);
        let x = g.dropout(x, self.dropout);
        let layout = encode_layout(&lengths, texts.iter().map(|t| t.mask.as_slice()));
        let hidden = self.stack.forward(g, x, &layout, self.dropout);
        let pooled = g.mean_pool(hidden, Rc::clone(&layout))?;
        Ok(EncoderOutput {
            hidden,
            pooled,
            layout,
        })
    }
}

/// Lightweight autoregressive decoder reconstructing a patch's characters
/// from one contextual patch feature. The input sequence is the feature
/// followed by the target characters shifted right by one.
#[derive(Debug, Clone)]
pub struct CharDecoder {
    chars: usize,
    pos: usize,
    stack: TransformerStack,
    out: Linear,
    dropout: f64,
}

impl CharDecoder {
    pub const PREFIX: &'static str = "decoder";

    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
        let d = cfg.hidden_dim;
        store.normal("decoder.chars", (VOCAB_SIZE, d), cfg.init_std, rng);
        store.normal("decoder.pos", (PATCH_LEN, d), cfg.init_std, rng);
        TransformerStack::register(store, "decoder.stack", cfg.decoder_layers, cfg, rng);
        Linear::register(store, "decoder.out", (d, VOCAB_SIZE), cfg.init_std, rng);
    }

    pub fn bind(store: &ParamStore, cfg: &ModelConfig) -> Result<Self, NnError> {
        Ok(Self {
            chars: store.id("decoder.chars")?,
            pos: store.id("decoder.pos")?,
            stack: TransformerStack::bind(store, "decoder.stack", cfg.decoder_layers, cfg.heads, true)?,
            out: Linear::bind(store, "decoder.out")?,
            dropout: cfg.dropout,
        })
    }

    /// Logits for the first `len` positions of every target patch, row-stacked
    /// (`targets.len() * len` rows of 98). Causality makes these identical to
    /// the first `len` rows of a full 64-position pass.
    pub fn forward(
        &self,
        g: &mut Graph,
        features: Var,
        targets: &[PatchTokens],
        len: usize,
    ) -> Var {
        assert!((1..=PATCH_LEN).contains(&len), "decoder length {len}");
        let shifted: Vec<Vec<usize>> = targets
            .iter()
            .flat_map(|t| t.ids()[..len - 1].iter().map(|&c| vec![c as usize]))
            .collect();
        let table = g.param(self.chars);
        let chars = g.gather_sum(table, Rc::new(shifted));
        let mut map = Vec::with_capacity(targets.len() * len);
        for s in 0..targets.len() {
            map.push((0, s));
            map.extend((0..len - 1).map(|t| (1, s * (len - 1) + t)));
        }
        let x = g.rows(vec![features, chars], map);
        let positions: Vec<Vec<usize>> = (0..targets.len())
            .flat_map(|_| (0..len).map(|t| vec![t]))
            .collect();
        let pos_table = g.param(self.pos);
        let pos = g.gather_sum(pos_table, Rc::new(positions));
        let x = g.add(x, pos);
        let x = g.dropout(x, self.dropout);
        let layout = Rc::new(SeqLayout::from_lengths(&vec![len; targets.len()]));
        let h = self.stack.forward(g, x, &layout, self.dropout);
        self.out.forward(g, h)
    }
}
