//! Scaled dot-product attention under an explicit attend/blocked mask.
//!
//! Blocked entries are set to `-inf` before the softmax, so every weight row
//! stays a probability distribution and blocked weights are exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::positional::{apply_rope, RotaryParams};
use crate::tensor::{matmul, matmul_transposed, softmax_in_place, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRegime {
    Causal,
    Global,
    Custom,
}

/// Square attend/blocked table. Rows are query positions, columns are key
/// positions. Every row has at least one attended column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    len: usize,
    attend: Vec<bool>,
    regime: MaskRegime,
    modified_rows: Vec<usize>,
}

impl MaskMatrix {
    /// Lower-triangular mask: row `i` attends to columns `0..=i`.
    pub fn causal(len: usize) -> Result<Self> {
        Self::check_len(len)?;
        let attend = (0..len * len).map(|idx| idx % len <= idx / len).collect();
        Ok(Self {
            len,
            attend,
            regime: MaskRegime::Causal,
            modified_rows: Vec::new(),
        })
    }

    pub fn global(len: usize) -> Result<Self> {
        Self::check_len(len)?;
        Ok(Self {
            len,
            attend: vec![true; len * len],
            regime: MaskRegime::Global,
            modified_rows: Vec::new(),
        })
    }

    /// Arbitrary row-major table. Fails if any row blocks every column.
    pub fn custom(len: usize, attend: Vec<bool>) -> Result<Self> {
        Self::check_len(len)?;
        if attend.len() != len * len {
            return Err(Error::Dimension {
                op: "MaskMatrix::custom",
                lhs: vec![len, len],
                rhs: vec![attend.len()],
            });
        }
        if let Some(row) = attend.chunks(len).position(|r| !r.contains(&true)) {
            return Err(Error::DegenerateRow { row });
        }
        Ok(Self {
            len,
            attend,
            regime: MaskRegime::Custom,
            modified_rows: Vec::new(),
        })
    }

    fn check_len(len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::Config("mask length must be at least 1".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn regime(&self) -> MaskRegime {
        self.regime
    }

    pub fn attends(&self, query: usize, key: usize) -> bool {
        self.attend[query * self.len + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.attend[query * self.len..(query + 1) * self.len]
    }

    /// Rows rewritten to self-only attention, in the order they were applied.
    pub fn modified_rows(&self) -> &[usize] {
        &self.modified_rows
    }

    /// Restrict row `k` to attend only to column `k`, leaving every other
    /// row untouched. The result is tagged [`MaskRegime::Custom`].
    pub fn with_self_only_row(&self, k: usize) -> Result<Self> {
        if k >= self.len {
            return Err(Error::Index {
                index: k,
                len: self.len,
            });
        }
        let mut out = self.clone();
        for j in 0..self.len {
            out.attend[k * self.len + j] = j == k;
        }
        out.regime = MaskRegime::Custom;
        out.modified_rows.push(k);
        Ok(out)
    }

    /// Pretty form used in tests and logs: `A` attend, `B` blocked.
    pub fn render(&self) -> String {
        self.attend
            .chunks(self.len)
            .map(|r| {
                r.iter()
                    .map(|&a| if a { 'A' } else { 'B' })
                    .collect::<String>()
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Per-head intermediates of one attention evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeadOutput {
    /// Queries after any positional rotation, `[L, head_dim]`.
    pub q: Tensor,
    /// Keys after any positional rotation, `[L, head_dim]`.
    pub k: Tensor,
    /// `scale * q kᵀ` before masking, `[L, L]`.
    pub scores: Tensor,
    /// Post-softmax weights, `[L, L]`; rows sum to one.
    pub weights: Tensor,
    pub v: Tensor,
    /// `weights · v`, `[L, head_dim]`.
    pub out: Tensor,
}

pub fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &MaskMatrix,
    scale: f32,
) -> Result<AttentionHeadOutput> {
    let len = mask.len();
    for t in [q, k, v] {
        if t.rank() != 2 || t.rows() != len {
            return Err(Error::Dimension {
                op: "attend",
                lhs: t.shape().to_vec(),
                rhs: vec![len, len],
            });
        }
    }
    if q.cols() != k.cols() {
        return Err(Error::Dimension {
            op: "attend",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let scores = matmul_transposed(q, k)?.scale(scale)?;
    let mut weights = scores.data().to_vec();
    for (i, row) in weights.chunks_mut(len).enumerate() {
        for (j, w) in row.iter_mut().enumerate() {
            if !mask.attends(i, j) {
                *w = f32::NEG_INFINITY;
            }
        }
        softmax_in_place(row).map_err(|e| match e {
            Error::DegenerateRow { .. } => Error::DegenerateRow { row: i },
            other => other,
        })?;
    }
    let weights = Tensor::new(vec![len, len], weights)?;
    let out = matmul(&weights, v)?;
    Ok(AttentionHeadOutput {
        q: q.clone(),
        k: k.clone(),
        scores,
        weights,
        v: v.clone(),
        out,
    })
}

/// Query, key, value and output projections, each `[d_model, d_model]`,
/// applied to row vectors (`x · W`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProjections {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl AttentionProjections {
    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }

    fn check(&self, d_model: usize) -> Result<()> {
        for w in [&self.wq, &self.wk, &self.wv, &self.wo] {
            if w.shape() != [d_model, d_model] {
                return Err(Error::Dimension {
                    op: "multi_head_attend",
                    lhs: w.shape().to_vec(),
                    rhs: vec![d_model, d_model],
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadOutput {
    /// Concatenated head outputs projected through `W_O`, `[L, d_model]`.
    pub out: Tensor,
    pub heads: Vec<AttentionHeadOutput>,
}

/// Multi-head attention over `x` (`[L, d_model]`). Rotary encoding, when
/// given, rotates queries and keys; values are never rotated.
pub fn multi_head_attend(
    x: &Tensor,
    proj: &AttentionProjections,
    num_heads: usize,
    mask: &MaskMatrix,
    rope: Option<&RotaryParams>,
) -> Result<MultiHeadOutput> {
    if x.rank() != 2 {
        return Err(Error::Dimension {
            op: "multi_head_attend",
            lhs: x.shape().to_vec(),
            rhs: vec![mask.len(), proj.d_model()],
        });
    }
    let d_model = x.cols();
    proj.check(d_model)?;
    if num_heads == 0 || !d_model.is_multiple_of(num_heads) {
        return Err(Error::Config(format!(
            "d_model {d_model} is not divisible by {num_heads} heads"
        )));
    }
    let head_dim = d_model / num_heads;
    if let Some(r) = rope {
        if r.head_dim() != head_dim {
            return Err(Error::Config(format!(
                "rotary head_dim {} does not match head_dim {head_dim}",
                r.head_dim()
            )));
        }
    }
    let q_all = matmul(x, &proj.wq)?;
    let k_all = matmul(x, &proj.wk)?;
    let v_all = matmul(x, &proj.wv)?;
    let positions: Vec<usize> = (0..x.rows()).collect();
    let scale = 1.0 / (head_dim as f32).sqrt();

    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let mut q = q_all.slice_cols(lo, hi)?;
        let mut k = k_all.slice_cols(lo, hi)?;
        let v = v_all.slice_cols(lo, hi)?;
        if let Some(r) = rope {
            q = apply_rope(&q, &positions, r)?;
            k = apply_rope(&k, &positions, r)?;
        }
        heads.push(attend(&q, &k, &v, mask, scale)?);
    }
    let concat = Tensor::concat_cols(&heads.iter().map(|h| h.out.clone()).collect::<Vec<_>>())?;
    let out = matmul(&concat, &proj.wo)?;
    Ok(MultiHeadOutput { out, heads })
}
