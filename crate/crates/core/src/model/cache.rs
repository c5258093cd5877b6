//! Rolling per-layer key/value history for streaming generation.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Keys and values of one layer, rows aligned with tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv<T> {
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

/// One chunk's keys and values across all layers.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry<T> {
    pub index: usize,
    pub layers: Vec<LayerKv<T>>,
}

/// Whole chunks are appended in index order and evicted oldest-first once
/// more than `capacity` are held. `None` capacity never evicts.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    pub capacity: Option<usize>,
    pub depth: usize,
    pub chunk_tokens: usize,
    pub width: usize,
    entries: VecDeque<CacheEntry<T>>,
    evicted: Vec<usize>,
    next_index: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(depth: usize, chunk_tokens: usize, width: usize, capacity: Option<usize>) -> Self {
        Self { capacity, depth, chunk_tokens, width, entries: VecDeque::new(), evicted: Vec::new(), next_index: 0 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index the next appended chunk must carry.
    pub fn next_index(&self) -> usize {
        self.next_index
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }

    /// Chunk indices dropped so far, strictly increasing.
    pub fn evicted(&self) -> &[usize] {
        &self.evicted
    }

    pub fn stored_tokens(&self) -> usize {
        self.entries.len() * self.chunk_tokens
    }

    pub fn append(&mut self, entry: CacheEntry<T>) -> Result<()> {
        if entry.index != self.next_index {
            return Err(Error::Cache(format!("expected chunk {}, got {}", self.next_index, entry.index)));
        }
        if entry.layers.len() != self.depth {
            return Err(Error::Cache(format!("expected {} layers, got {}", self.depth, entry.layers.len())));
        }
        for kv in &entry.layers {
            let want = (self.chunk_tokens, self.width);
            if kv.k.shape() != want || kv.v.shape() != want {
                return Err(Error::Cache(format!("layer shape {:?} does not match {:?}", kv.k.shape(), want)));
            }
        }
        self.entries.push_back(entry);
        self.next_index += 1;
        if let Some(cap) = self.capacity {
            while self.entries.len() > cap {
                let old = self.entries.pop_front().expect("non-empty");
                self.evicted.push(old.index);
            }
        }
        Ok(())
    }

    /// Concatenated history of every layer, oldest chunk first.
    pub fn layers(&self) -> Vec<LayerKv<T>> {
        (0..self.depth)
            .map(|l| {
                let ks: Vec<&Tensor<T>> = self.entries.iter().map(|e| &e.layers[l].k).collect();
                let vs: Vec<&Tensor<T>> = self.entries.iter().map(|e| &e.layers[l].v).collect();
                if ks.is_empty() {
                    LayerKv { k: Tensor::zeros(0, self.width), v: Tensor::zeros(0, self.width) }
                } else {
                    LayerKv { k: Tensor::concat_rows(&ks), v: Tensor::concat_rows(&vs) }
                }
            })
            .collect()
    }

    /// Advance the expected index without storing anything.
    pub fn skip_index(&mut self) {
        self.next_index += 1;
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.evicted.clear();
        self.next_index = 0;
    }
}
