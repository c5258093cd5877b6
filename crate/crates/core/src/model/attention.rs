use crate::autograd::Var;
use crate::scalar::Scalar;

/// Scaled dot-product attention for one head.
///
/// `allowed` is a row-major `[queries × keys]` permission matrix; masked
/// entries get zero weight and a row with nothing allowed outputs zeros.
pub fn attention<'t, T: Scalar>(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>, allowed: Option<&[bool]>) -> Var<'t, T> {
    let dk = q.shape().1;
    let scores = q.matmul_bt(k).scale(T::lit(1.0 / (dk as f64).sqrt()));
    scores.masked_softmax(allowed).matmul(v)
}

/// Heads split the model width into equal contiguous column groups.
pub fn multi_head_attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    heads: usize,
    allowed: Option<&[bool]>,
) -> Var<'t, T> {
    let width = q.shape().1;
    assert_eq!(width % heads, 0, "width must divide into heads");
    let dh = width / heads;
    let outs: Vec<_> = (0..heads)
        .map(|h| attention(q.slice_cols(h * dh, dh), k.slice_cols(h * dh, dh), v.slice_cols(h * dh, dh), allowed))
        .collect();
    if heads == 1 {
        outs[0]
    } else {
        Var::concat_cols(&outs)
    }
}
