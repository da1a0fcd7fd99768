//! One-sided broadcasting: the right operand expands into the left operand's shape.
//!
//! Shapes are right-aligned; every right-hand dimension must either match the
//! corresponding left-hand dimension or be 1. This covers scalar operands,
//! trailing-axis operands (bias `[C]` onto `[M, C]`), and keep-dim reductions
//! (`[M, 1]` onto `[M, C]`).

use super::TensorError;

#[derive(Debug, Clone)]
pub(crate) enum Broadcast {
    Same,
    Scalar,
    /// rhs repeats with period `n` (rhs shape is a suffix of lhs shape)
    Suffix(usize),
    /// explicit rhs index for each lhs element
    General(Vec<usize>),
}

impl Broadcast {
    pub(crate) fn new(
        op: &'static str,
        lhs: &[usize],
        rhs: &[usize],
    ) -> Result<Self, TensorError> {
        let err = || TensorError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        };
        if lhs == rhs {
            return Ok(Broadcast::Same);
        }
        let rhs_n: usize = rhs.iter().product();
        if rhs_n == 1 {
            return Ok(Broadcast::Scalar);
        }
        if rhs.len() > lhs.len() {
            return Err(err());
        }
        let offset = lhs.len() - rhs.len();
        for (i, &r) in rhs.iter().enumerate() {
            if r != 1 && r != lhs[offset + i] {
                return Err(err());
            }
        }
        if lhs[offset..] == *rhs {
            return Ok(Broadcast::Suffix(rhs_n));
        }
        // rhs strides, zero on broadcast axes, aligned to lhs axes
        let mut strides = vec![0usize; lhs.len()];
        let mut s = 1;
        for i in (0..rhs.len()).rev() {
            if rhs[i] != 1 {
                strides[offset + i] = s;
            }
            s *= rhs[i];
        }
        let total: usize = lhs.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut counter = vec![0usize; lhs.len()];
        let mut idx = 0usize;
        for _ in 0..total {
            map.push(idx);
            for ax in (0..lhs.len()).rev() {
                counter[ax] += 1;
                idx += strides[ax];
                if counter[ax] < lhs[ax] {
                    break;
                }
                idx -= strides[ax] * lhs[ax];
                counter[ax] = 0;
            }
        }
        Ok(Broadcast::General(map))
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Suffix(n) => i % n,
            Broadcast::General(map) => map[i],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_and_keepdim_patterns() {
        let b = Broadcast::new("t", &[2, 3], &[3]).unwrap();
        assert!(matches!(b, Broadcast::Suffix(3)));
        assert_eq!(b.index(4), 1);

        let b = Broadcast::new("t", &[2, 3], &[2, 1]).unwrap();
        let got: Vec<usize> = (0..6).map(|i| b.index(i)).collect();
        assert_eq!(got, vec![0, 0, 0, 1, 1, 1]);

        let b = Broadcast::new("t", &[2, 3, 2], &[3, 1]).unwrap();
        let got: Vec<usize> = (0..12).map(|i| b.index(i)).collect();
        assert_eq!(got, vec![0, 0, 1, 1, 2, 2, 0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn rejects_incompatible() {
        assert!(Broadcast::new("t", &[2, 3], &[2]).is_err());
        assert!(Broadcast::new("t", &[3], &[2, 3]).is_err());
    }
}
