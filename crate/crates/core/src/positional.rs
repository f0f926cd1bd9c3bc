//! Positional encodings: rotary (applied to queries and keys only) and the
//! learnable additive table, plus the row-replacement intervention on that
//! table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{l2_norm, Tensor};

pub const DEFAULT_ROPE_BASE: f32 = 10_000.0;

/// Dimension `k` is rotated together with `k + head_dim / 2`.
pub const ROPE_PAIRING: &str = "half_split";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotaryParams {
    head_dim: usize,
    base: f32,
}

impl RotaryParams {
    pub fn new(head_dim: usize, base: f32) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary head_dim must be even and positive, got {head_dim}"
            )));
        }
        if !(base > 1.0 && base.is_finite()) {
            return Err(Error::Config(format!(
                "rotary base must exceed 1, got {base}"
            )));
        }
        Ok(Self { head_dim, base })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f32 {
        self.base
    }

    /// Rotation angle for pair `k` at `position`: `position * base^(-2k / head_dim)`.
    pub fn angle(&self, position: usize, pair: usize) -> f64 {
        let exponent = -2.0 * pair as f64 / self.head_dim as f64;
        position as f64 * (self.base as f64).powf(exponent)
    }
}

/// Rotate each row of `x` (shape `[L, head_dim]`) by its position.
pub fn apply_rope(x: &Tensor, positions: &[usize], params: &RotaryParams) -> Result<Tensor> {
    if x.rank() != 2 || x.cols() != params.head_dim {
        return Err(Error::Dimension {
            op: "apply_rope",
            lhs: x.shape().to_vec(),
            rhs: vec![positions.len(), params.head_dim],
        });
    }
    if positions.len() != x.rows() {
        return Err(Error::Dimension {
            op: "apply_rope",
            lhs: x.shape().to_vec(),
            rhs: vec![positions.len(), params.head_dim],
        });
    }
    let half = params.head_dim / 2;
    let mut out = Vec::with_capacity(x.len());
    for (i, &pos) in positions.iter().enumerate() {
        let row = x.row(i);
        let mut rotated = vec![0.0f32; params.head_dim];
        for k in 0..half {
            let (sin, cos) = params.angle(pos, k).sin_cos();
            let a = row[k] as f64;
            let b = row[k + half] as f64;
            rotated[k] = (a * cos - b * sin) as f32;
            rotated[k + half] = (a * sin + b * cos) as f32;
        }
        out.extend(rotated);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// A learned per-position embedding table with a log of the row
/// replacements applied to it.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnablePE {
    table: Tensor,
    swaps: Vec<(usize, usize)>,
}

impl LearnablePE {
    pub fn new(table: Tensor) -> Result<Self> {
        if table.rank() != 2 {
            return Err(Error::Config(format!(
                "positional table must be rank 2, got shape {:?}",
                table.shape()
            )));
        }
        Ok(Self {
            table,
            swaps: Vec::new(),
        })
    }

    pub(crate) fn with_log(table: Tensor, swaps: Vec<(usize, usize)>) -> Result<Self> {
        let mut pe = Self::new(table)?;
        pe.swaps = swaps;
        Ok(pe)
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn max_len(&self) -> usize {
        self.table.rows()
    }

    pub fn d_model(&self) -> usize {
        self.table.cols()
    }

    /// `(target, source)` pairs, oldest first.
    pub fn swap_log(&self) -> &[(usize, usize)] {
        &self.swaps
    }

    pub(crate) fn table_mut(&mut self) -> &mut Tensor {
        &mut self.table
    }
}

/// `out[i] = token_emb[i] + type_emb[i] + pe.table[i]`.
pub fn add_learnable_pe(token_emb: &Tensor, type_emb: &Tensor, pe: &LearnablePE) -> Result<Tensor> {
    if token_emb.shape() != type_emb.shape() || token_emb.rank() != 2 {
        return Err(Error::Dimension {
            op: "add_learnable_pe",
            lhs: token_emb.shape().to_vec(),
            rhs: type_emb.shape().to_vec(),
        });
    }
    let len = token_emb.rows();
    if len > pe.max_len() {
        return Err(Error::SequenceTooLong {
            len,
            max_len: pe.max_len(),
        });
    }
    if token_emb.cols() != pe.d_model() {
        return Err(Error::Dimension {
            op: "add_learnable_pe",
            lhs: token_emb.shape().to_vec(),
            rhs: pe.table.shape().to_vec(),
        });
    }
    let width = pe.d_model();
    let prefix = &pe.table.data()[..len * width];
    let data = token_emb
        .data()
        .iter()
        .zip(type_emb.data())
        .zip(prefix)
        .map(|((t, ty), p)| t + ty + p)
        .collect();
    Tensor::new(token_emb.shape().to_vec(), data)
}

pub fn pe_norm_profile(pe: &LearnablePE) -> Vec<(usize, f32)> {
    (0..pe.max_len())
        .map(|i| (i, l2_norm(pe.table.row(i))))
        .collect()
}

/// Copy row `source` over row `target`. The source row is left intact.
pub fn swap_pe_row(pe: &LearnablePE, target: usize, source: usize) -> Result<LearnablePE> {
    let len = pe.max_len();
    for index in [target, source] {
        if index >= len {
            return Err(Error::Index { index, len });
        }
    }
    let mut out = pe.clone();
    let src = pe.table.row(source).to_vec();
    out.table.set_row(target, &src)?;
    out.swaps.push((target, source));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(
            vec![r, c],
            (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn rope() -> RotaryParams {
        RotaryParams::new(16, DEFAULT_ROPE_BASE).unwrap()
    }

    fn rotated_dot(q: &Tensor, k: &Tensor, m: usize, n: usize, p: &RotaryParams) -> f32 {
        let rq = apply_rope(q, &[m], p).unwrap();
        let rk = apply_rope(k, &[n], p).unwrap();
        dot(rq.row(0), rk.row(0))
    }

    #[test]
    fn odd_head_dim_is_a_config_error() {
        assert!(matches!(
            RotaryParams::new(7, 10_000.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(RotaryParams::new(8, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn position_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&mut rng, 3, 16);
        let y = apply_rope(&x, &[0, 0, 0], &rope()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rotation_preserves_row_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 8, 16);
        let positions: Vec<usize> = (0..8).map(|i| i * 37).collect();
        let y = apply_rope(&x, &positions, &rope()).unwrap();
        for i in 0..8 {
            assert!((l2_norm(x.row(i)) - l2_norm(y.row(i))).abs() < 1e-6);
        }
    }

    #[test]
    fn pairs_are_half_split() {
        // A unit vector on dim 0 rotates into dim 8 (= 0 + 16/2) only.
        let mut row = vec![0.0f32; 16];
        row[0] = 1.0;
        let x = Tensor::new(vec![1, 16], row).unwrap();
        let y = apply_rope(&x, &[1], &rope()).unwrap();
        for (d, &v) in y.row(0).iter().enumerate() {
            if d != 0 && d != 8 {
                assert_eq!(v, 0.0);
            }
        }
        assert!((y.row(0)[0] - 1.0f32.cos()).abs() < 1e-7);
        assert!((y.row(0)[8] - 1.0f32.sin()).abs() < 1e-7);
    }

    #[test]
    fn dot_products_depend_on_offset_only() {
        let p = rope();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random(&mut rng, 1, 16);
        let k = random(&mut rng, 1, 16);
        let a = rotated_dot(&q, &k, 3, 11, &p);
        let b = rotated_dot(&q, &k, 10, 18, &p);
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }

    #[test]
    fn mismatched_width_is_rejected() {
        let x = Tensor::zeros(&[2, 8]);
        assert!(matches!(
            apply_rope(&x, &[0, 1], &rope()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn add_pe_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pe = LearnablePE::new(random(&mut rng, 10, 4)).unwrap();
        let zeros = Tensor::zeros(&[6, 4]);
        let out = add_learnable_pe(&zeros, &zeros, &pe).unwrap();
        assert_eq!(out.data(), &pe.table().data()[..24]);

        let tok = random(&mut rng, 6, 4);
        let ty = random(&mut rng, 6, 4);
        let zero_pe = LearnablePE::new(Tensor::zeros(&[10, 4])).unwrap();
        let out = add_learnable_pe(&tok, &ty, &zero_pe).unwrap();
        let expected: Vec<f32> = tok
            .data()
            .iter()
            .zip(ty.data())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(out.data(), expected.as_slice());
    }

    #[test]
    fn add_pe_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pe = LearnablePE::new(random(&mut rng, 8, 5)).unwrap();
        let tok = random(&mut rng, 7, 5);
        let ty = random(&mut rng, 7, 5);
        let out = add_learnable_pe(&tok, &ty, &pe).unwrap();
        for i in 0..7 {
            for j in 0..5 {
                assert_eq!(
                    out.at(i, j),
                    tok.at(i, j) + ty.at(i, j) + pe.table().at(i, j)
                );
            }
        }
    }

    #[test]
    fn too_long_sequence() {
        let pe = LearnablePE::new(Tensor::zeros(&[4, 2])).unwrap();
        let x = Tensor::zeros(&[5, 2]);
        assert!(matches!(
            add_learnable_pe(&x, &x, &pe),
            Err(Error::SequenceTooLong { len: 5, max_len: 4 })
        ));
    }

    #[test]
    fn norm_profiles() {
        let pe = LearnablePE::new(Tensor::zeros(&[5, 3])).unwrap();
        assert!(pe_norm_profile(&pe).iter().all(|&(_, n)| n == 0.0));

        let mut rows = vec![vec![10.0, 0.0, 0.0]];
        for i in 1..5 {
            let mut r = vec![0.0; 3];
            r[i % 3] = 1.0;
            rows.push(r);
        }
        let pe = LearnablePE::new(Tensor::from_rows(&rows).unwrap()).unwrap();
        let profile: Vec<f32> = pe_norm_profile(&pe).into_iter().map(|(_, n)| n).collect();
        assert_eq!(profile, vec![10.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn swap_copies_source_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pe = LearnablePE::new(random(&mut rng, 512, 8)).unwrap();
        for source in [0usize, 511] {
            let swapped = swap_pe_row(&pe, 383, source).unwrap();
            assert_eq!(swapped.table().row(383), pe.table().row(source));
            assert_eq!(swapped.table().row(source), pe.table().row(source));
            assert_eq!(swapped.swap_log(), &[(383, source)]);
        }
        let same = swap_pe_row(&pe, 17, 17).unwrap();
        assert_eq!(same.table(), pe.table());
        assert!(matches!(swap_pe_row(&pe, 512, 0), Err(Error::Index { .. })));
        assert!(matches!(swap_pe_row(&pe, 0, 600), Err(Error::Index { .. })));
    }

    proptest! {
        #[test]
        fn relative_position_invariance(seed in any::<u64>(), m in 0usize..64, n in 0usize..64, off in 0usize..=32) {
            let p = rope();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random(&mut rng, 1, 16);
            let k = random(&mut rng, 1, 16);
            let a = rotated_dot(&q, &k, m, n, &p);
            let b = rotated_dot(&q, &k, m + off, n + off, &p);
            prop_assert!((a - b).abs() < 1e-5);
        }

        #[test]
        fn swap_changes_exactly_one_row(seed in any::<u64>(), target in 0usize..16, source in 0usize..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pe = LearnablePE::new(random(&mut rng, 16, 4)).unwrap();
            let out = swap_pe_row(&pe, target, source).unwrap();
            for i in 0..16 {
                if i == target {
                    prop_assert_eq!(out.table().row(i), pe.table().row(source));
                } else {
                    prop_assert_eq!(out.table().row(i), pe.table().row(i));
                }
            }
        }
    }
}
