//! Shape arithmetic and the trailing-dimension broadcasting rule.
//!
//! Two shapes broadcast when, aligned at their last dimension, every pair of
//! extents is equal or one of them is 1. Missing leading dimensions count as 1.

use alloc::vec;
use alloc::vec::Vec;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Strides of `in_shape` viewed through `out_shape`; broadcast axes get 0.
pub(crate) fn broadcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let base = contiguous_strides(in_shape);
    let lead = out_shape.len() - in_shape.len();
    (0..out_shape.len())
        .map(|i| if i < lead || in_shape[i - lead] == 1 { 0 } else { base[i - lead] })
        .collect()
}

/// Visits every element of `out_shape` in row-major order, passing the flat
/// output index and the matching offsets into two strided inputs.
#[inline]
pub(crate) fn for_each2(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let nd = out_shape.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let inner = out_shape[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let outer = total / inner;
    let mut idx = vec![0usize; nd - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut i = 0;
    for _ in 0..outer {
        for j in 0..inner {
            f(i, oa + j * ia, ob + j * ib);
            i += 1;
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Brute-force restatement of the rule for the exhaustive table.
    fn rule(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
        let nd = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; nd - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        pa.iter()
            .zip(&pb)
            .map(|(&x, &y)| if x == y || y == 1 { Some(x) } else if x == 1 { Some(y) } else { None })
            .collect()
    }

    #[test]
    fn exhaustive_small_shape_table() {
        let mut shapes: Vec<Vec<usize>> = vec![vec![]];
        for rank in 1..=3 {
            let mut next = Vec::new();
            for s in shapes.iter().filter(|s| s.len() == rank - 1) {
                for e in 1..=3 {
                    let mut t = s.clone();
                    t.push(e);
                    next.push(t);
                }
            }
            shapes.extend(next);
        }
        for a in &shapes {
            for b in &shapes {
                assert_eq!(broadcast_shapes(a, b), rule(a, b), "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn strides_zero_on_broadcast_axes() {
        assert_eq!(broadcast_strides(&[3, 1], &[2, 3, 4]), vec![0, 1, 0]);
        assert_eq!(broadcast_strides(&[2, 3, 4], &[2, 3, 4]), vec![12, 4, 1]);
    }

    #[test]
    fn odometer_matches_flat_index() {
        let out = [2, 3, 4];
        let s = contiguous_strides(&out);
        let mut seen = Vec::new();
        for_each2(&out, &s, &[0, 0, 0], |i, oa, ob| {
            assert_eq!(i, oa);
            assert_eq!(ob, 0);
            seen.push(i);
        });
        assert_eq!(seen, (0..24).collect::<Vec<_>>());
    }
}
