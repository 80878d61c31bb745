//! Pair decoder: feature head, pair self-attention, spatially guided
//! cross-attention and the action classifier.

mod cross;
mod feature_head;
mod featuremap;

pub use cross::{CrossAttention, HeadTerms, PeMode};
pub use feature_head::{window_partition, FeatureHead};
pub use featuremap::{FeatureMap, PVFM_MAGIC, PVFM_VERSION};

use crate::attention::SelfAttention;
use crate::error::{Error, Result};
use crate::numcore::layers::{Activation, Init, LayerNorm, Linear, Mlp2};
use crate::numcore::{Graph, NodeId, ParamStore, Tensor};
use crate::posembed::{key_grid_pe, SinusoidConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub window: usize,
    pub ffn_hidden: usize,
    pub sinusoid: SinusoidConfig,
    pub pe_mode: PeMode,
    pub self_attn: bool,
    pub cross_attn: bool,
    pub ffn: bool,
    pub feature_head: bool,
    pub activation: Activation,
    pub n_actions: usize,
}

impl DecoderConfig {
    pub fn new(d_model: usize, n_actions: usize) -> Self {
        Self {
            d_model,
            n_layers: 2,
            n_heads: 8,
            window: 8,
            ffn_hidden: 4 * d_model,
            sinusoid: SinusoidConfig { d: d_model / 2, tau: 20.0 },
            pe_mode: PeMode::ConcatModulated,
            self_attn: true,
            cross_attn: true,
            ffn: true,
            feature_head: true,
            activation: Activation::Relu,
            n_actions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sinusoid.validate()?;
        if self.d_model == 0 || self.d_model % 4 != 0 {
            return Err(Error::Invalid(format!("d_model {} must be a positive multiple of 4", self.d_model)));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Invalid(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        if self.window == 0 {
            return Err(Error::Invalid("window must be at least 1".into()));
        }
        if self.feature_head && 2 * self.sinusoid.d != self.d_model {
            return Err(Error::Invalid(format!(
                "the feature head needs 2 * sinusoid_d == d_model, got {} and {}",
                self.sinusoid.d, self.d_model
            )));
        }
        if self.n_actions == 0 {
            return Err(Error::Invalid("at least one action class is required".into()));
        }
        Ok(())
    }
}

/// One decoder layer: optional pair self-attention, cross-attention and FFN
/// sub-layers, each pre-normalised and residual.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: Option<(LayerNorm, SelfAttention)>,
    pub cross: Option<(LayerNorm, CrossAttention)>,
    pub ffn: Option<(LayerNorm, Mlp2)>,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &DecoderConfig, init: &mut Init) -> Result<Self> {
        let d = cfg.d_model;
        let self_attn = if cfg.self_attn {
            Some((
                LayerNorm::new(store, &format!("{name}.self_ln"), d)?,
                SelfAttention::new(store, &format!("{name}.self"), d, cfg.n_heads, init)?,
            ))
        } else {
            None
        };
        let cross = if cfg.cross_attn {
            let s = cfg.sinusoid.d;
            Some((
                LayerNorm::new(store, &format!("{name}.cross_ln"), d)?,
                CrossAttention::new(store, &format!("{name}.cross"), d, cfg.n_heads, 4 * s, 2 * s, cfg.pe_mode, init)?,
            ))
        } else {
            None
        };
        let ffn = if cfg.ffn {
            Some((
                LayerNorm::new(store, &format!("{name}.ffn_ln"), d)?,
                Mlp2::new(store, &format!("{name}.ffn"), d, cfg.ffn_hidden, d, cfg.activation, init)?,
            ))
        } else {
            None
        };
        Ok(Self { self_attn, cross, ffn })
    }
}

/// Memory tokens with their key embeddings.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    /// `[H*W, d_model]`.
    pub tokens: NodeId,
    /// `[H*W, 2d]`.
    pub key_pe: NodeId,
    pub height: usize,
    pub width: usize,
}

/// Recorded logit terms of every cross-attention layer and head.
#[derive(Clone, Debug)]
pub struct AttnRecord {
    pub height: usize,
    pub width: usize,
    pub mode: PeMode,
    /// `layers[l][h]`.
    pub layers: Vec<Vec<HeadTerms>>,
}

/// The five logit maps of one pair at one layer and head, each `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnTerms {
    pub content: Tensor,
    pub positional: Tensor,
    pub cross_kc_qp: Tensor,
    pub cross_kp_qc: Tensor,
    pub combined: Tensor,
}

impl AttnTerms {
    pub const NAMES: [&'static str; 5] = ["content", "positional", "cross_kc_qp", "cross_kp_qc", "combined"];

    pub fn maps(&self) -> [(&'static str, &Tensor); 5] {
        [
            (Self::NAMES[0], &self.content),
            (Self::NAMES[1], &self.positional),
            (Self::NAMES[2], &self.cross_kc_qp),
            (Self::NAMES[3], &self.cross_kp_qc),
            (Self::NAMES[4], &self.combined),
        ]
    }

    /// Softmax over all cells of a map.
    pub fn normalised(map: &Tensor) -> Tensor {
        let flat = map.clone().reshape(&[1, map.len()]).expect("flatten");
        flat.softmax(1).expect("softmax").reshape(map.shape()).expect("restore")
    }
}

impl AttnRecord {
    pub fn attention_terms(&self, pair: usize, layer: usize, head: usize) -> Result<AttnTerms> {
        let heads = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Invalid(format!("layer {layer} of {}", self.layers.len())))?;
        let t = heads.get(head).ok_or_else(|| Error::Invalid(format!("head {head} of {}", heads.len())))?;
        if pair >= t.content.rows() {
            return Err(Error::Invalid(format!("pair {pair} of {}", t.content.rows())));
        }
        let shape = vec![self.height, self.width];
        let pick = |m: &Tensor| Tensor::new(shape.clone(), m.row(pair).to_vec());
        Ok(AttnTerms {
            content: pick(&t.content)?,
            positional: pick(&t.positional)?,
            cross_kc_qp: pick(&t.cross_kc_qp)?,
            cross_kp_qc: pick(&t.cross_kp_qc)?,
            combined: pick(&t.combined)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `[n_pairs, n_actions]`.
    pub logits: NodeId,
    /// Cross-attention weights `[n_pairs, H*W]` per layer and head.
    pub cross_weights: Vec<Vec<NodeId>>,
    pub record: Option<AttnRecord>,
}

impl DecoderOutput {
    pub fn attention_terms(&self, pair: usize, layer: usize, head: usize) -> Result<AttnTerms> {
        self.record.as_ref().ok_or(Error::NotRecorded)?.attention_terms(pair, layer, head)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub memory_ln: Option<LayerNorm>,
    pub layers: Vec<DecoderLayer>,
    pub classifier: Linear,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &DecoderConfig, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let uses_memory = cfg.cross_attn && cfg.n_layers > 0;
        let memory_ln = if uses_memory { Some(LayerNorm::new(store, &format!("{name}.memory_ln"), cfg.d_model)?) } else { None };
        let layers = (0..cfg.n_layers)
            .map(|l| DecoderLayer::new(store, &format!("{name}.layer{l}"), cfg, init))
            .collect::<Result<Vec<_>>>()?;
        let classifier = Linear::new(store, &format!("{name}.classifier"), cfg.d_model, cfg.n_actions, init)?;
        Ok(Self { cfg: cfg.clone(), memory_ln, layers, classifier })
    }

    /// Memory node pair for `[H*W, d_model]` tokens.
    pub fn memory(&self, g: &mut Graph, tokens: NodeId, height: usize, width: usize) -> Result<Memory> {
        let pe = key_grid_pe(height, width, &self.cfg.sinusoid)?;
        let key_pe = g.constant(pe.reshape(&[height * width, 2 * self.cfg.sinusoid.d])?)?;
        Ok(Memory { tokens, key_pe, height, width })
    }

    /// Runs every layer and the classifier over pair contents `[n, d_model]`
    /// with pair embeddings `[n, 4d]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        content: NodeId,
        pair_pe: NodeId,
        memory: Option<&Memory>,
        record: bool,
    ) -> Result<DecoderOutput> {
        let mut x = content;
        let mut cross_weights = Vec::new();
        let mut recorded = Vec::new();
        let mem_tokens = match (&self.memory_ln, memory) {
            (Some(ln), Some(m)) => Some(ln.forward(g, store, m.tokens)?),
            (Some(_), None) => return Err(Error::Invalid("cross-attention needs a memory".into())),
            _ => None,
        };
        for layer in &self.layers {
            if let Some((ln, sa)) = &layer.self_attn {
                let xn = ln.forward(g, store, x)?;
                let (a, _) = sa.forward(g, store, xn, None)?;
                x = g.add(x, a)?;
            }
            if let (Some((ln, ca)), Some(m), Some(tokens)) = (&layer.cross, memory, mem_tokens) {
                let xn = ln.forward(g, store, x)?;
                let (a, w, terms) = ca.forward(g, store, xn, pair_pe, tokens, m.key_pe, record)?;
                x = g.add(x, a)?;
                cross_weights.push(w);
                if let Some(t) = terms {
                    recorded.push(t);
                }
            }
            if let Some((ln, ffn)) = &layer.ffn {
                let xn = ln.forward(g, store, x)?;
                let f = ffn.forward(g, store, xn)?;
                x = g.add(x, f)?;
            }
        }
        let logits = self.classifier.forward(g, store, x)?;
        let record = match (record, memory) {
            (true, Some(m)) if !recorded.is_empty() => Some(AttnRecord {
                height: m.height,
                width: m.width,
                mode: self.cfg.pe_mode,
                layers: recorded,
            }),
            _ => None,
        };
        Ok(DecoderOutput { logits, cross_weights, record })
    }
}

/// Vanilla multi-head self-attention with residual over pair contents; no
/// positional embedding is involved.
pub fn pair_self_attention(
    g: &mut Graph,
    store: &ParamStore,
    attn: &SelfAttention,
    contents: NodeId,
) -> Result<(NodeId, Vec<NodeId>)> {
    let (a, w) = attn.forward(g, store, contents, None)?;
    Ok((g.add(contents, a)?, w))
}
