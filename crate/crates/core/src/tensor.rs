//! Dense row-major `f32` tensors and the handful of kernels the attention
//! lab needs: matmul, row softmax, norms.
//!
//! Every public constructor rejects non-finite values, so NaN and infinities
//! cannot escape into stored tensors. The only place `-inf` is accepted is
//! [`softmax_in_place`], where it acts as the mask sentinel. Reductions
//! accumulate in `f64` in a fixed left-to-right order.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::ShapeData {
                expected: shape.iter().product(),
                shape,
                actual: data.len(),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeData {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                value: data[index],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "tensor extents must be positive"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        let len = data.len();
        Self::new(vec![len], data)
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Dimension {
                op: "from_rows",
                lhs: vec![cols],
                rhs: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    fn require_rank2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Dimension {
                op,
                lhs: other.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }

    /// Row count of a rank-2 tensor (panics on other ranks).
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() on rank-{} tensor", self.rank());
        self.shape[0]
    }

    /// Column count of a rank-2 tensor (panics on other ranks).
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() on rank-{} tensor", self.rank());
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.require_rank2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scale(&self, s: f32) -> Result<Tensor> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|v| v * s).collect(),
        )
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.require_rank2("slice_cols")?;
        if start >= end || end > c {
            return Err(Error::Index { index: end, len: c });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Ok(Tensor {
            shape: vec![r, w],
            data,
        })
    }

    /// Horizontal concatenation of rank-2 tensors with equal row counts.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Dimension {
            op: "concat_cols",
            lhs: vec![],
            rhs: vec![],
        })?;
        let (r, _) = first.require_rank2("concat_cols")?;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.require_rank2("concat_cols")?;
            if pr != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Tensor {
            shape: vec![r, total],
            data,
        })
    }

    /// Replace row `i` of a rank-2 tensor.
    pub fn set_row(&mut self, i: usize, values: &[f32]) -> Result<()> {
        let (r, c) = self.require_rank2("set_row")?;
        if i >= r {
            return Err(Error::Index { index: i, len: r });
        }
        if values.len() != c {
            return Err(Error::Dimension {
                op: "set_row",
                lhs: vec![c],
                rhs: vec![values.len()],
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                value: values[index],
            });
        }
        self.data[i * c..(i + 1) * c].copy_from_slice(values);
        Ok(())
    }

    /// Apply `f` to each element, rejecting non-finite results.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || Error::Dimension {
        op: "matmul",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    let (m, k) = a.require_rank2("matmul").map_err(|_| mismatch())?;
    let (k2, n) = b.require_rank2("matmul").map_err(|_| mismatch())?;
    if k != k2 {
        return Err(mismatch());
    }
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &b.data[p * n..(p + 1) * n];
            for (slot, &bv) in acc.iter_mut().zip(brow) {
                *slot += av * bv as f64;
            }
        }
        for (o, &s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = s as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || Error::Dimension {
        op: "matmul_transposed",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    let (m, k) = a
        .require_rank2("matmul_transposed")
        .map_err(|_| mismatch())?;
    let (n, k2) = b
        .require_rank2("matmul_transposed")
        .map_err(|_| mismatch())?;
    if k != k2 {
        return Err(mismatch());
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out.push(dot(arow, b.row(j)));
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Numerically stable softmax over one row. `-inf` entries are treated as
/// masked and come out as exactly zero.
pub fn softmax_in_place(row: &mut [f32]) -> Result<()> {
    if let Some(index) = row.iter().position(|v| v.is_nan() || *v == f32::INFINITY) {
        return Err(Error::NonFinite {
            index,
            value: row[index],
        });
    }
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return Err(Error::DegenerateRow { row: 0 });
    }
    let mut sum = 0.0f64;
    let exps: Vec<f64> = row
        .iter()
        .map(|&v| {
            let e = if v == f32::NEG_INFINITY {
                0.0
            } else {
                ((v - max) as f64).exp()
            };
            sum += e;
            e
        })
        .collect();
    for (slot, e) in row.iter_mut().zip(exps) {
        *slot = (e / sum) as f32;
    }
    Ok(())
}

/// Softmax along the last axis of a finite tensor.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let width = *logits.shape.last().expect("rank >= 1");
    let mut data = logits.data.clone();
    for (r, chunk) in data.chunks_mut(width).enumerate() {
        softmax_in_place(chunk).map_err(|e| match e {
            Error::DegenerateRow { .. } => Error::DegenerateRow { row: r },
            other => other,
        })?;
    }
    Tensor::new(logits.shape.clone(), data)
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum::<f64>() as f32
}

pub fn l1_norm(v: &[f32]) -> f32 {
    v.iter().map(|&x| (x as f64).abs()).sum::<f64>() as f32
}

pub fn l2_norm(v: &[f32]) -> f32 {
    v.iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt() as f32
}

#[cfg(test)]
mod tests {
    use super::*;
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

    #[test]
    fn identity_times_m_is_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(&mut rng, 3, 5);
        assert_eq!(matmul(&Tensor::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn small_matmul_by_hand() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn zeros_annihilate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random(&mut rng, 3, 4);
        let c = matmul(&Tensor::zeros(&[2, 3]), &m).unwrap();
        assert_eq!(c, Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_transposed_agrees_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 4, 6);
        let b = random(&mut rng, 5, 6);
        let direct = matmul(&a, &b.transpose().unwrap()).unwrap();
        let fused = matmul_transposed(&a, &b).unwrap();
        for (x, y) in direct.data().iter().zip(fused.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn constructor_rejects_non_finite_and_bad_shapes() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f32::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn softmax_uniform_logits() {
        let t = Tensor::vector(vec![0.0; 4]).unwrap();
        let s = softmax_rows(&t).unwrap();
        for &v in s.data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_against_exp_sum_oracle() {
        // exp(0) / (exp(0) + exp(ln 3)) = 1 / 4
        let t = Tensor::vector(vec![0.0, 3.0f32.ln()]).unwrap();
        let s = softmax_rows(&t).unwrap();
        let e0 = 1.0f64;
        let e1 = (3.0f32.ln() as f64).exp();
        assert!((s.data()[0] as f64 - e0 / (e0 + e1)).abs() < 1e-7);
        assert!((s.data()[0] - 0.25).abs() < 1e-6);
        assert!((s.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_single_surviving_entry() {
        let mut row = [5.0, f32::NEG_INFINITY];
        softmax_in_place(&mut row).unwrap();
        assert_eq!(row, [1.0, 0.0]);
    }

    #[test]
    fn fully_masked_row_is_degenerate() {
        let mut row = [f32::NEG_INFINITY; 3];
        assert!(matches!(
            softmax_in_place(&mut row),
            Err(Error::DegenerateRow { .. })
        ));
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let t = Tensor::vector(vec![1e30, 1e30, -1e30]).unwrap();
        let s = softmax_rows(&t).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn norms_by_hand() {
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
        assert_eq!(l1_norm(&[3.0, -4.0]), 7.0);
        assert_eq!(l2_norm(&[0.0; 8]), 0.0);
        assert_eq!(l1_norm(&[0.0; 8]), 0.0);
    }

    #[test]
    fn norms_match_elementwise_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let v: Vec<f32> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut l1 = 0.0f64;
        let mut sq = 0.0f64;
        for &x in &v {
            l1 += if x < 0.0 { -(x as f64) } else { x as f64 };
            sq += (x as f64) * (x as f64);
        }
        assert!((l1_norm(&v) as f64 - l1).abs() < 1e-6);
        assert!((l2_norm(&v) as f64 - sq.sqrt()).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            logits in prop::collection::vec(-50.0f32..50.0, 1..64),
            masked in prop::collection::vec(any::<bool>(), 64),
        ) {
            let mut row = logits.clone();
            for (v, &m) in row.iter_mut().zip(&masked).skip(1) {
                if m { *v = f32::NEG_INFINITY; }
            }
            softmax_in_place(&mut row).unwrap();
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            for (i, &m) in masked.iter().enumerate().take(row.len()).skip(1) {
                if m { prop_assert_eq!(row[i], 0.0); }
            }
        }

        #[test]
        fn l2_scales_with_nonnegative_scalar(
            v in prop::collection::vec(-10.0f32..10.0, 1..32),
            s in 0.0f32..10.0,
        ) {
            let scaled: Vec<f32> = v.iter().map(|x| s * x).collect();
            let lhs = l2_norm(&scaled) as f64;
            let rhs = s as f64 * l2_norm(&v) as f64;
            prop_assert!((lhs - rhs).abs() <= 1e-6 * (1.0 + rhs));
        }

        #[test]
        fn l1_dominates_l2(v in prop::collection::vec(-10.0f32..10.0, 1..32)) {
            let l1 = l1_norm(&v);
            let l2 = l2_norm(&v);
            prop_assert!(l1 >= l2 * (1.0 - 1e-6));
            let nonzero = v.iter().filter(|x| **x != 0.0).count();
            if nonzero <= 1 {
                prop_assert!((l1 - l2).abs() <= 1e-6 * l1.max(1.0));
            }
        }

        #[test]
        fn matmul_is_associative(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, m, k);
            let b = random(&mut rng, k, n);
            let c = random(&mut rng, n, p);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                let scale = x.abs().max(y.abs()).max(1.0);
                prop_assert!((x - y).abs() <= 1e-4 * scale);
            }
        }
    }
}
