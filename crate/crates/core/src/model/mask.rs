/// Chunk-blockwise attention permission: token `a` may attend to token `b`
/// iff `block(chunk(a), chunk(b))`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub chunks: usize,
    pub chunk_tokens: usize,
    blocks: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(chunks: usize, chunk_tokens: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let blocks = (0..chunks * chunks).map(|k| f(k / chunks, k % chunks)).collect();
        Self { chunks, chunk_tokens, blocks }
    }

    /// Every token sees every token.
    pub fn full(chunks: usize, chunk_tokens: usize) -> Self {
        Self::from_fn(chunks, chunk_tokens, |_, _| true)
    }

    pub fn block(&self, i: usize, j: usize) -> bool {
        self.blocks[i * self.chunks + j]
    }

    pub fn allowed(&self, a: usize, b: usize) -> bool {
        self.block(a / self.chunk_tokens, b / self.chunk_tokens)
    }

    pub fn tokens(&self) -> usize {
        self.chunks * self.chunk_tokens
    }

    /// Row-major token-level matrix for the softmax.
    pub fn dense(&self) -> Vec<bool> {
        let n = self.tokens();
        (0..n * n).map(|k| self.allowed(k / n, k % n)).collect()
    }

    pub fn count_true_blocks(&self) -> usize {
        self.blocks.iter().filter(|&&b| b).count()
    }

    /// True when no chunk sees a later chunk.
    pub fn is_causal(&self) -> bool {
        (0..self.chunks).all(|i| (i + 1..self.chunks).all(|j| !self.block(i, j)))
    }
}

/// Chunk `i` attends to chunks `j ≤ i`.
pub fn build_block_causal_mask(chunks: usize, chunk_tokens: usize) -> AttentionMask {
    AttentionMask::from_fn(chunks, chunk_tokens, |i, j| j <= i)
}

/// Block-causal with a history window: chunk `i` sees `j` with `i - window ≤ j ≤ i`.
/// Matches streaming with a rolling cache of `window` past chunks.
pub fn build_windowed_mask(chunks: usize, chunk_tokens: usize, window: Option<usize>) -> AttentionMask {
    AttentionMask::from_fn(chunks, chunk_tokens, |i, j| j <= i && window.map_or(true, |w| i - j <= w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(build_block_causal_mask(1, 5), AttentionMask::full(1, 5));
        let m = build_block_causal_mask(2, 2);
        let d = m.dense();
        assert_eq!(&d[0..4], &[true, true, false, false]);
        assert_eq!(&d[8..12], &[true, true, true, true]);
        assert_eq!(build_block_causal_mask(3, 1).count_true_blocks(), 6);
        assert!(m.is_causal() && !AttentionMask::full(2, 1).is_causal());
        let w = build_windowed_mask(4, 1, Some(1));
        assert!(w.block(3, 2) && !w.block(3, 1));
    }
}
