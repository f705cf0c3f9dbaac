//! Row-major index arithmetic shared by extraction, the chunk store and stitching.

pub(crate) fn volume(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for axis in (0..shape.len().saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * shape[axis + 1];
    }
    strides
}

pub(crate) fn offset(strides: &[usize], index: &[usize]) -> usize {
    strides.iter().zip(index).map(|(s, i)| s * i).sum()
}

/// Calls `f` once for every index tuple of `shape`, last axis fastest.
pub(crate) fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    if shape.contains(&0) {
        return;
    }
    let mut index = vec![0; shape.len()];
    loop {
        f(&index);
        let mut axis = shape.len();
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            index[axis] += 1;
            if index[axis] < shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
}

/// Calls `f(src_offset, dst_offset, run)` for every contiguous row of a box of
/// `extent` placed at `src_start` in `src_shape` and `dst_start` in `dst_shape`.
pub(crate) fn for_each_row(
    src_shape: &[usize],
    src_start: &[usize],
    dst_shape: &[usize],
    dst_start: &[usize],
    extent: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = extent.len();
    debug_assert_eq!(src_shape.len(), rank);
    debug_assert_eq!(dst_shape.len(), rank);
    if rank == 0 {
        f(0, 0, 1);
        return;
    }
    if extent.contains(&0) {
        return;
    }
    let src_strides = strides(src_shape);
    let dst_strides = strides(dst_shape);
    let run = extent[rank - 1];
    let mut src_index = src_start.to_vec();
    let mut dst_index = dst_start.to_vec();
    for_each_index(&extent[..rank - 1], |outer| {
        for axis in 0..rank - 1 {
            src_index[axis] = src_start[axis] + outer[axis];
            dst_index[axis] = dst_start[axis] + outer[axis];
        }
        f(
            offset(&src_strides, &src_index),
            offset(&dst_strides, &dst_index),
            run,
        );
    });
}

/// Copies a box between two row-major buffers.
pub(crate) fn copy_box(
    src: &[f32],
    src_shape: &[usize],
    src_start: &[usize],
    dst: &mut [f32],
    dst_shape: &[usize],
    dst_start: &[usize],
    extent: &[usize],
) {
    for_each_row(
        src_shape,
        src_start,
        dst_shape,
        dst_start,
        extent,
        |s, d, n| {
            dst[d..d + n].copy_from_slice(&src[s..s + n]);
        },
    );
}
