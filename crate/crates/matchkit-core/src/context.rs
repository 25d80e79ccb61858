//! Support-conditional embeddings.
//!
//! Plain matching embeds every example independently. The context stage
//! re-embeds each support item with a bidirectional LSTM over the support
//! sequence (summed with a skip connection to the raw embedding), and
//! re-embeds the query with a fixed number of attention-read LSTM steps
//! over the encoded support set.
//!
//! The LSTM follows the classic formulation: four gates computed from the
//! concatenation of the step input and the recurrent input, cell update
//! `c' = f.c + i.g`, output `h' = o.tanh(c')`.

use alloc::vec::Vec;

use crate::encoder::BoundParams;
use crate::error::{shape_err, Error, Result};
use crate::graph::{concat, Graph, Var};
use crate::tensor::Tensor;

/// Configuration for the context stage. The recurrent hidden width always
/// equals the embedding width so skip connections stay well-shaped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FceConfig {
    /// Number of attention-read steps applied to each query.
    pub steps: usize,
}

impl Default for FceConfig {
    fn default() -> Self {
        // depth/cost balance; configurable per run
        Self { steps: 5 }
    }
}

/// One LSTM cell's gate weights bound to a graph.
pub struct LstmCell {
    wi: Var,
    wf: Var,
    wo: Var,
    wc: Var,
    bi: Var,
    bf: Var,
    bo: Var,
    bc: Var,
}

impl LstmCell {
    pub fn bind(bound: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(Self {
            wi: bound.var(&alloc::format!("{prefix}.wi"))?,
            wf: bound.var(&alloc::format!("{prefix}.wf"))?,
            wo: bound.var(&alloc::format!("{prefix}.wo"))?,
            wc: bound.var(&alloc::format!("{prefix}.wc"))?,
            bi: bound.var(&alloc::format!("{prefix}.bi"))?,
            bf: bound.var(&alloc::format!("{prefix}.bf"))?,
            bo: bound.var(&alloc::format!("{prefix}.bo"))?,
            bc: bound.var(&alloc::format!("{prefix}.bc"))?,
        })
    }

    fn gate(&self, w: &Var, b: &Var, cat: &Var) -> Result<Var> {
        let d_cat = cat.numel();
        let d_h = b.numel();
        w.matmul(&cat.reshape(alloc::vec![d_cat, 1])?)?
            .reshape(alloc::vec![d_h])?
            .add(b)
    }

    /// One step: `x` is the step input, `h_rec` the recurrent input
    /// (concatenated with `x` before the gates), `c` the cell state.
    /// Returns `(h', c')`.
    pub fn step(&self, x: &Var, h_rec: &Var, c: &Var) -> Result<(Var, Var)> {
        let cat = concat(&[x.clone(), h_rec.clone()])?;
        let i = self.gate(&self.wi, &self.bi, &cat)?.sigmoid();
        let f = self.gate(&self.wf, &self.bf, &cat)?.sigmoid();
        let o = self.gate(&self.wo, &self.bo, &cat)?.sigmoid();
        let g = self.gate(&self.wc, &self.bc, &cat)?.tanh();
        let c_next = f.mul(c)?.add(&i.mul(&g)?)?;
        let h_next = o.mul(&c_next.tanh())?;
        Ok((h_next, c_next))
    }
}

/// Encodes the support sequence with forward and backward recurrences and a
/// skip connection: `out_i = h_fwd_i + h_bwd_i + raw_i`.
pub fn embed_support_fce(
    graph: &Graph,
    bound: &BoundParams,
    raw: &[Var],
) -> Result<Vec<Var>> {
    if raw.is_empty() {
        return Err(Error::EmptySupport);
    }
    let d = raw[0].numel();
    let fwd = LstmCell::bind(bound, "ctx.fwd")?;
    let bwd = LstmCell::bind(bound, "ctx.bwd")?;
    let zero = graph.constant(&Tensor::zeros(alloc::vec![d]));

    let mut h_fwd = Vec::with_capacity(raw.len());
    let (mut h, mut c) = (zero.clone(), zero.clone());
    for x in raw {
        let (h2, c2) = fwd.step(x, &h, &c)?;
        h_fwd.push(h2.clone());
        h = h2;
        c = c2;
    }
    let mut h_bwd = alloc::vec![zero.clone(); raw.len()];
    let (mut h, mut c) = (zero.clone(), zero);
    for (i, x) in raw.iter().enumerate().rev() {
        let (h2, c2) = bwd.step(x, &h, &c)?;
        h_bwd[i] = h2.clone();
        h = h2;
        c = c2;
    }
    raw.iter()
        .zip(h_fwd.iter().zip(&h_bwd))
        .map(|(skip, (f, b))| f.add(b)?.add(skip))
        .collect()
}

/// Re-embeds a query by `steps` attention reads over the encoded supports.
///
/// The state starts at the raw query embedding; each step attends over the
/// supports with dot-product logits, reads out their weighted sum, feeds
/// `[state, readout]` as the recurrent input of an LSTM whose step input is
/// the raw query embedding, and skip-connects the raw embedding back onto
/// the new state. With zero steps the raw embedding is returned unchanged.
pub fn embed_query_fce(
    graph: &Graph,
    bound: &BoundParams,
    query: &Var,
    encoded_support: &[Var],
    steps: usize,
) -> Result<Var> {
    let (h, _reads) = embed_query_fce_traced(graph, bound, query, encoded_support, steps)?;
    Ok(h)
}

/// Like [`embed_query_fce`] but also returns each step's attention vector,
/// so tests can check the per-step normalization.
pub fn embed_query_fce_traced(
    graph: &Graph,
    bound: &BoundParams,
    query: &Var,
    encoded_support: &[Var],
    steps: usize,
) -> Result<(Var, Vec<Var>)> {
    if encoded_support.is_empty() {
        return Err(Error::EmptySupport);
    }
    let d = query.numel();
    for g in encoded_support {
        if g.numel() != d {
            return Err(shape_err(
                "attention read",
                alloc::format!("query dim {d} vs support dim {}", g.numel()),
            ));
        }
    }
    if steps == 0 {
        return Ok((query.clone(), Vec::new()));
    }
    let cell = LstmCell::bind(bound, "read")?;
    let k = encoded_support.len();
    // [k,d] matrix of encoded supports, shared across steps
    let g_mat = concat(encoded_support)?.reshape(alloc::vec![k, d])?;
    let mut attentions = Vec::with_capacity(steps);
    let mut h = query.clone();
    let mut c = graph.constant(&Tensor::zeros(alloc::vec![d]));
    for _ in 0..steps {
        let logits = encoded_support
            .iter()
            .map(|g| h.dot(g))
            .collect::<Result<Vec<_>>>()?;
        let attn = concat(&logits)?.softmax()?;
        let readout = attn
            .reshape(alloc::vec![1, k])?
            .matmul(&g_mat)?
            .reshape(alloc::vec![d])?;
        attentions.push(attn);
        let rec = concat(&[h.clone(), readout])?;
        let (h_hat, c2) = cell.step(query, &rec, &c)?;
        h = h_hat.add(query)?;
        c = c2;
    }
    Ok((h, attentions))
}
