use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numcore::layers::{Init, Linear};
use crate::numcore::{Graph, NodeId, ParamStore, Tensor};

/// How positional embeddings enter the cross-attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeMode {
    /// Content only.
    None,
    /// PE added to content before a shared dot product, keeping both cross terms.
    Additive,
    /// Content and PE dot products summed separately.
    Concat,
    /// As `Concat`, with the box-pair embedding modulated by reference scales.
    ConcatModulated,
}

impl PeMode {
    pub fn uses_pe(self) -> bool {
        self != PeMode::None
    }
    pub fn modulated(self) -> bool {
        self == PeMode::ConcatModulated
    }
}

impl fmt::Display for PeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeMode::None => "none",
            PeMode::Additive => "additive",
            PeMode::Concat => "concat",
            PeMode::ConcatModulated => "concat_modulated",
        })
    }
}

impl FromStr for PeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => PeMode::None,
            "additive" => PeMode::Additive,
            "concat" => PeMode::Concat,
            "concat_modulated" => PeMode::ConcatModulated,
            _ => return Err(Error::Invalid(format!("unknown pe mode `{s}`"))),
        })
    }
}

/// Pre-softmax logit terms of one layer and head, each `[n_pairs, H*W]`, all
/// carrying the same logit scale.
#[derive(Clone, Debug)]
pub struct HeadTerms {
    pub content: Tensor,
    pub positional: Tensor,
    pub cross_kc_qp: Tensor,
    pub cross_kp_qc: Tensor,
    pub combined: Tensor,
}

/// Cross-attention between pair queries and the memory tokens.
///
/// Content and positional parts of queries and keys have their own
/// projections. Values are projected from memory content only.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q_c: Linear,
    pub k_c: Linear,
    pub q_p: Option<Linear>,
    pub k_p: Option<Linear>,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub mode: PeMode,
    /// Record the two cross terms even when `mode` does not use them, as a
    /// diagnostic of what additive combination would contribute.
    pub diagnose_cross: bool,
}

impl CrossAttention {
    /// `query_pe` and `key_pe` are the widths of the pair and key-cell embeddings.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        query_pe: usize,
        key_pe: usize,
        mode: PeMode,
        init: &mut Init,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Invalid(format!("width {d} not divisible into {heads} heads")));
        }
        let (q_p, k_p) = if mode.uses_pe() {
            (
                Some(Linear::new(store, &format!("{name}.q_p"), query_pe, d, init)?),
                Some(Linear::new(store, &format!("{name}.k_p"), key_pe, d, init)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            q_c: Linear::new(store, &format!("{name}.q_c"), d, d, init)?,
            k_c: Linear::new(store, &format!("{name}.k_c"), d, d, init)?,
            q_p,
            k_p,
            v: Linear::new(store, &format!("{name}.v"), d, d, init)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, init)?,
            heads,
            mode,
            diagnose_cross: false,
        })
    }

    /// Logit scale per head: the content and PE halves together span
    /// `2 * d_head` dimensions whenever PE is used.
    pub fn logit_scale(&self, d_head: usize) -> f64 {
        let width = if self.mode.uses_pe() { 2 * d_head } else { d_head };
        1.0 / (width as f64).sqrt()
    }

    /// Attends `queries [n, d]` (with pair embeddings `[n, query_pe]`) over
    /// `memory [m, d]` (with key embeddings `[m, key_pe]`). Returns the
    /// projected `[n, d]` update, the per-head attention weights and, when
    /// `record` is set, the logit terms of every head.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: NodeId,
        query_pe: NodeId,
        memory: NodeId,
        key_pe: NodeId,
        record: bool,
    ) -> Result<(NodeId, Vec<NodeId>, Option<Vec<HeadTerms>>)> {
        let d = g.shape(queries)[1];
        let dh = d / self.heads;
        let scale = self.logit_scale(dh);
        let qc = self.q_c.forward(g, store, queries)?;
        let kc = self.k_c.forward(g, store, memory)?;
        let v = self.v.forward(g, store, memory)?;
        let pe = match (&self.q_p, &self.k_p) {
            (Some(qp), Some(kp)) => {
                if g.shape(query_pe)[1] != store.get(qp.weight).shape()[0]
                    || g.shape(key_pe)[1] != store.get(kp.weight).shape()[0]
                {
                    return Err(Error::Shape {
                        op: "cross_attention",
                        detail: format!(
                            "embedding widths {:?}/{:?} do not fit the PE projections",
                            g.shape(query_pe),
                            g.shape(key_pe)
                        ),
                    });
                }
                Some((qp.forward(g, store, query_pe)?, kp.forward(g, store, key_pe)?))
            }
            _ => None,
        };

        let split = |g: &mut Graph, x: NodeId, h: usize| -> Result<NodeId> {
            if self.heads == 1 {
                Ok(x)
            } else {
                g.slice_cols(x, h * dh, dh)
            }
        };
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        let mut terms = record.then(Vec::new);
        for h in 0..self.heads {
            let qch = split(g, qc, h)?;
            let kch = split(g, kc, h)?;
            let vh = split(g, v, h)?;
            let content = g.matmul_nt(qch, kch)?;
            let (logits, parts) = match pe {
                None => (content, None),
                Some((qp, kp)) => {
                    let qph = split(g, qp, h)?;
                    let kph = split(g, kp, h)?;
                    let positional = g.matmul_nt(qph, kph)?;
                    let logits = if self.mode == PeMode::Additive {
                        let q = g.add(qch, qph)?;
                        let k = g.add(kch, kph)?;
                        g.matmul_nt(q, k)?
                    } else {
                        g.add(content, positional)?
                    };
                    (logits, Some((qph, kph, positional)))
                }
            };
            let logits = g.scale(logits, scale)?;
            let a = g.softmax(logits)?;
            outs.push(g.matmul(a, vh)?);
            weights.push(a);

            if let Some(terms) = terms.as_mut() {
                let content_v = g.value(content).map(|x| x * scale);
                let combined = g.value(logits).clone();
                let zeros = Tensor::zeros(content_v.shape());
                let (positional, kc_qp, kp_qc) = match parts {
                    None => (zeros.clone(), zeros.clone(), zeros),
                    Some((qph, kph, positional)) => {
                        let pos = g.value(positional).map(|x| x * scale);
                        if self.mode == PeMode::Additive || self.diagnose_cross {
                            let a = g.value(qph).matmul(&g.value(kch).transpose()?)?.map(|x| x * scale);
                            let b = g.value(qch).matmul(&g.value(kph).transpose()?)?.map(|x| x * scale);
                            (pos, a, b)
                        } else {
                            (pos, zeros.clone(), zeros)
                        }
                    }
                };
                terms.push(HeadTerms { content: content_v, positional, cross_kc_qp: kc_qp, cross_kp_qc: kp_qc, combined });
            }
        }
        let o = if self.heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        Ok((self.out.forward(g, store, o)?, weights, terms))
    }
}
