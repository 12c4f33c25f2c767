//! Causal transformer text encoder with end-token pooling.
//!
//! Sequences are embedded as token + learned absolute position vectors, run
//! through the shared trunk with causal and PAD-key masking, and pooled at
//! the EOS position before a linear projection into the shared space.
//! Returned embeddings are unnormalized; callers normalize at the point of
//! comparison.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::blocks::{init_matrix, TrunkParams};
use crate::optim::NamedParam;
use crate::rng::Rng;
use crate::tensor::{AttnMeta, Result, Tensor, TensorError};
use crate::vocab::{TokenSequence, Vocabulary, PAD};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TextEncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
    pub d_out: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig { layers: 2, heads: 2, d_model: 32, mlp_ratio: 4, max_len: 32, d_out: 32 }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_out == 0 {
            return Err("text encoder dimensions must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return Err(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.max_len < 4 {
            return Err(format!("max_len {} cannot hold BOS, prefix, content and EOS", self.max_len));
        }
        Ok(())
    }
}

/// Attention weights captured from one encoder pass, one entry per layer,
/// each laid out `[batch, heads, len, len]` over the trimmed length.
pub struct AttentionTrace {
    pub layers: Vec<Rc<Vec<f64>>>,
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    pub valid: Vec<usize>,
}

pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    pub vocab_size: usize,
    token_table: Tensor,
    pos_table: Tensor,
    trunk: TrunkParams,
    proj: Tensor,
}

impl TextEncoder {
    pub fn init(cfg: TextEncoderConfig, vocab_size: usize, rng: &Rng) -> TextEncoder {
        let trunk = TrunkParams::init(rng, "text", cfg.layers, cfg.d_model, cfg.d_model * cfg.mlp_ratio);
        let token_table = init_matrix(rng, "text.token_table", vocab_size, cfg.d_model);
        // prefix rows start at zero so conditioning opens as a no-op; they
        // sit in every sequence and a random start destabilizes early steps
        token_table.modify_data(|data| {
            for row in [crate::vocab::PREFIX_PROMPT, crate::vocab::PREFIX_CAPTION] {
                data[row * cfg.d_model..(row + 1) * cfg.d_model].fill(0.0);
            }
        });
        TextEncoder {
            token_table,
            pos_table: init_matrix(rng, "text.pos_table", cfg.max_len, cfg.d_model),
            proj: init_matrix(rng, "text.proj", cfg.d_model, cfg.d_out),
            trunk,
            cfg,
            vocab_size,
        }
    }

    pub fn params(&self) -> Vec<NamedParam> {
        let mut out = vec![
            NamedParam { name: "text.token_table".into(), tensor: self.token_table.clone(), decay: true },
            NamedParam { name: "text.pos_table".into(), tensor: self.pos_table.clone(), decay: true },
        ];
        self.trunk.params("text", &mut out);
        out.push(NamedParam { name: "text.proj".into(), tensor: self.proj.clone(), decay: true });
        out
    }

    /// The embedding rows for the two prefix ids, for gradient inspection.
    pub fn token_table(&self) -> &Tensor {
        &self.token_table
    }

    fn forward(
        &self,
        seqs: &[TokenSequence],
        capture: bool,
    ) -> Result<(Tensor, Option<AttentionTrace>)> {
        if seqs.is_empty() {
            return Err(TensorError::Invalid { op: "encode_text", msg: "empty batch".into() });
        }
        for s in seqs {
            if s.max_len() != self.cfg.max_len {
                return Err(TensorError::Invalid {
                    op: "encode_text",
                    msg: format!("sequence length {} != configured max_len {}", s.max_len(), self.cfg.max_len),
                });
            }
        }
        let b = seqs.len();
        // trim the batch to its longest valid prefix; PAD-key masking makes
        // the result identical to running at full max_len
        let len = seqs.iter().map(|s| s.valid).max().unwrap();
        let mut ids = Vec::with_capacity(b * len);
        let mut pos = Vec::with_capacity(b * len);
        for s in seqs {
            for i in 0..len {
                ids.push(if i < s.valid { s.ids[i] } else { PAD });
                pos.push(i);
            }
        }
        let x = self.token_table.embed(&ids)?.add(&self.pos_table.embed(&pos)?)?;
        let meta = AttnMeta {
            batch: b,
            len,
            heads: self.cfg.heads,
            causal: true,
            valid: seqs.iter().map(|s| s.valid).collect(),
        };
        let mut weights = Vec::new();
        let h = self.trunk.forward(x, &meta, capture.then_some(&mut weights))?;
        let eos_rows: Vec<usize> = seqs.iter().enumerate().map(|(i, s)| i * len + s.eos_pos()).collect();
        let emb = h.gather_rows(&eos_rows)?.matmul(&self.proj)?;
        let trace = capture.then(|| AttentionTrace {
            layers: weights,
            batch: b,
            len,
            heads: self.cfg.heads,
            valid: meta.valid.clone(),
        });
        Ok((emb, trace))
    }

    /// Embeds a batch of sequences; rows follow input order.
    pub fn encode(&self, seqs: &[TokenSequence]) -> Result<Tensor> {
        Ok(self.forward(seqs, false)?.0)
    }

    pub fn encode_traced(&self, seqs: &[TokenSequence]) -> Result<(Tensor, AttentionTrace)> {
        let (emb, trace) = self.forward(seqs, true)?;
        Ok((emb, trace.expect("trace requested")))
    }
}

/// Attention mass the end token assigns to each real token of one sequence,
/// averaged over heads at one layer, with PAD columns dropped and the rest
/// renormalized to sum to one. Pairs are `(token label, weight)`.
pub fn end_token_attention(
    trace: &AttentionTrace,
    seqs: &[TokenSequence],
    sample: usize,
    layer: usize,
    vocab: &Vocabulary,
) -> Result<Vec<(String, f64)>> {
    if sample >= trace.batch || layer >= trace.layers.len() {
        return Err(TensorError::Invalid {
            op: "end_token_attention",
            msg: format!(
                "sample {sample} / layer {layer} out of range for batch {} with {} layers",
                trace.batch,
                trace.layers.len()
            ),
        });
    }
    let seq = &seqs[sample];
    let (l, h) = (trace.len, trace.heads);
    let valid = trace.valid[sample];
    let eos = seq.eos_pos();
    let w = &trace.layers[layer];
    let mut row = vec![0.0; valid];
    for head in 0..h {
        let base = ((sample * h + head) * l + eos) * l;
        for (j, r) in row.iter_mut().enumerate() {
            *r += w[base + j];
        }
    }
    let sum: f64 = row.iter().sum();
    if sum <= 0.0 {
        return Err(TensorError::Invalid { op: "end_token_attention", msg: "empty attention row".into() });
    }
    Ok(row
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let label = vocab.word_of(seq.ids[j]).unwrap_or("<unk>").to_string();
            (label, v / sum)
        })
        .collect())
}
