//! Shape arithmetic shared by the tape ops: row-major strides, NumPy-style
//! right-aligned broadcasting, and an odometer walk over broadcast offsets.

/// Row-major contiguous strides for `shape`.
pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut s = 1usize;
    for i in (0..shape.len()).rev() {
        strides[i] = s;
        s *= shape[i];
    }
    strides
}

/// Broadcast `a` and `b` right-aligned; `None` if incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed through an output of rank `out_rank`,
/// with stride 0 on broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let mut strides = vec![0usize; out_rank];
    let offset = out_rank - shape.len();
    for i in 0..shape.len() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    strides
}

/// Visit every flat index of `out_shape` together with the offsets into two
/// broadcast operands. Offsets are maintained incrementally so the walk is
/// O(1) per element.
pub(crate) fn zip_broadcast(
    out_shape: &[usize],
    stride_a: &[usize],
    stride_b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    for flat in 0..n {
        f(flat, off_a, off_b);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off_a += stride_a[ax];
            off_b += stride_b[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off_a -= stride_a[ax] * out_shape[ax];
            off_b -= stride_b[ax] * out_shape[ax];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(contiguous_strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(contiguous_strides(&[]), Vec::<usize>::new());
    }

    #[test]
    fn broadcast_basic() {
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[5], &[2, 5]), Some(vec![2, 5]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn zip_covers_all_pairs() {
        // [2,3] * [3] -> offsets of b repeat per row
        let out = [2usize, 3];
        let sa = broadcast_strides(&[2, 3], 2);
        let sb = broadcast_strides(&[3], 2);
        let mut seen = Vec::new();
        zip_broadcast(&out, &sa, &sb, |flat, oa, ob| seen.push((flat, oa, ob)));
        assert_eq!(
            seen,
            vec![(0, 0, 0), (1, 1, 1), (2, 2, 2), (3, 3, 0), (4, 4, 1), (5, 5, 2)]
        );
    }
}
