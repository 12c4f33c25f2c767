//! Pre-norm transformer trunk shared by the text and image encoders.
//!
//! Layout per block: `x + Wo(attn(ln1(x)))` then `x + mlp(ln2(x))`, with a
//! final layer norm after the last block. Rows of the `[rows, d_model]`
//! activation matrix are token (or patch) positions, batch-major.

use std::rc::Rc;

use crate::optim::NamedParam;
use crate::rng::Rng;
use crate::tensor::{attention, AttnMeta, Result, Tensor};

pub(crate) struct BlockParams {
    ln1_g: Tensor,
    ln1_b: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

pub(crate) struct TrunkParams {
    pub blocks: Vec<BlockParams>,
    lnf_g: Tensor,
    lnf_b: Tensor,
}

/// Matrix filled from the init stream named after the parameter, so layout
/// and construction order never change the draw.
pub(crate) fn init_matrix(rng: &Rng, name: &str, rows: usize, cols: usize) -> Tensor {
    let mut stream = rng.child(&format!("init/{name}"));
    let data: Vec<f64> = (0..rows * cols).map(|_| stream.trunc_normal(0.02)).collect();
    Tensor::param(&[rows, cols], data).expect("init values are finite")
}

fn zeros_param(n: usize) -> Tensor {
    Tensor::param(&[n], vec![0.0; n]).expect("zeros are finite")
}

fn ones_param(n: usize) -> Tensor {
    Tensor::param(&[n], vec![1.0; n]).expect("ones are finite")
}

impl BlockParams {
    fn init(rng: &Rng, scope: &str, d_model: usize, mlp: usize) -> BlockParams {
        BlockParams {
            ln1_g: ones_param(d_model),
            ln1_b: zeros_param(d_model),
            wq: init_matrix(rng, &format!("{scope}.wq"), d_model, d_model),
            bq: zeros_param(d_model),
            wk: init_matrix(rng, &format!("{scope}.wk"), d_model, d_model),
            bk: zeros_param(d_model),
            wv: init_matrix(rng, &format!("{scope}.wv"), d_model, d_model),
            bv: zeros_param(d_model),
            wo: init_matrix(rng, &format!("{scope}.wo"), d_model, d_model),
            bo: zeros_param(d_model),
            ln2_g: ones_param(d_model),
            ln2_b: zeros_param(d_model),
            w1: init_matrix(rng, &format!("{scope}.w1"), d_model, mlp),
            b1: zeros_param(mlp),
            w2: init_matrix(rng, &format!("{scope}.w2"), mlp, d_model),
            b2: zeros_param(d_model),
        }
    }

    fn params(&self, scope: &str, out: &mut Vec<NamedParam>) {
        let push = |out: &mut Vec<NamedParam>, field: &str, t: &Tensor, decay: bool| {
            out.push(NamedParam { name: format!("{scope}.{field}"), tensor: t.clone(), decay });
        };
        push(out, "ln1_g", &self.ln1_g, false);
        push(out, "ln1_b", &self.ln1_b, false);
        push(out, "wq", &self.wq, true);
        push(out, "bq", &self.bq, false);
        push(out, "wk", &self.wk, true);
        push(out, "bk", &self.bk, false);
        push(out, "wv", &self.wv, true);
        push(out, "bv", &self.bv, false);
        push(out, "wo", &self.wo, true);
        push(out, "bo", &self.bo, false);
        push(out, "ln2_g", &self.ln2_g, false);
        push(out, "ln2_b", &self.ln2_b, false);
        push(out, "w1", &self.w1, true);
        push(out, "b1", &self.b1, false);
        push(out, "w2", &self.w2, true);
        push(out, "b2", &self.b2, false);
    }
}

impl TrunkParams {
    pub(crate) fn init(rng: &Rng, scope: &str, layers: usize, d_model: usize, mlp: usize) -> TrunkParams {
        TrunkParams {
            blocks: (0..layers)
                .map(|i| BlockParams::init(rng, &format!("{scope}.b{i}"), d_model, mlp))
                .collect(),
            lnf_g: ones_param(d_model),
            lnf_b: zeros_param(d_model),
        }
    }

    pub(crate) fn params(&self, scope: &str, out: &mut Vec<NamedParam>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&format!("{scope}.b{i}"), out);
        }
        out.push(NamedParam { name: format!("{scope}.lnf_g"), tensor: self.lnf_g.clone(), decay: false });
        out.push(NamedParam { name: format!("{scope}.lnf_b"), tensor: self.lnf_b.clone(), decay: false });
    }

    /// Runs the stack; when `capture` is given, each layer's attention
    /// weights `[batch, heads, len, len]` are appended to it.
    pub(crate) fn forward(
        &self,
        mut x: Tensor,
        meta: &AttnMeta,
        mut capture: Option<&mut Vec<Rc<Vec<f64>>>>,
    ) -> Result<Tensor> {
        for b in &self.blocks {
            let h = x.layer_norm(&b.ln1_g, &b.ln1_b)?;
            let q = h.matmul(&b.wq)?.add(&b.bq)?;
            let k = h.matmul(&b.wk)?.add(&b.bk)?;
            let v = h.matmul(&b.wv)?.add(&b.bv)?;
            let (att, weights) = attention(&q, &k, &v, meta)?;
            if let Some(cap) = capture.as_deref_mut() {
                cap.push(weights);
            }
            x = x.add(&att.matmul(&b.wo)?.add(&b.bo)?)?;
            let h2 = x.layer_norm(&b.ln2_g, &b.ln2_b)?;
            let m = h2.matmul(&b.w1)?.add(&b.b1)?.gelu()?;
            x = x.add(&m.matmul(&b.w2)?.add(&b.b2)?)?;
        }
        x.layer_norm(&self.lnf_g, &self.lnf_b)
    }
}
