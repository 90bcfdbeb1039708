//! Log-depth inclusive scans.
//!
//! Layer `i` combines every element at index `≥ 2^i` with the element `2^i`
//! positions before it. After `⌈log2 N⌉` layers entry `k` holds
//! `seq[0] ∘ seq[1] ∘ … ∘ seq[k]`. Updates within a layer only read the
//! previous layer, so they are independent and are split across threads once
//! a layer is large enough. Output does not depend on the thread count.

use rayon::prelude::*;

use crate::{Mat9, Rotation, Vec3};

/// Layers touching fewer elements than this run sequentially.
pub const PARALLEL_THRESHOLD: usize = 256;
const CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScanStats {
    /// Number of layers that performed at least one update.
    pub layers: usize,
}

/// Inclusive scan under an associative `op`, where `op(a, b)` means "a then b".
pub fn inclusive_scan<T, F>(seq: &[T], op: F) -> Vec<T>
where
    T: Clone + Send + Sync,
    F: Fn(&T, &T) -> T + Sync,
{
    inclusive_scan_with_stats(seq, op).0
}

pub fn inclusive_scan_with_stats<T, F>(seq: &[T], op: F) -> (Vec<T>, ScanStats)
where
    T: Clone + Send + Sync,
    F: Fn(&T, &T) -> T + Sync,
{
    let n = seq.len();
    let mut stats = ScanStats::default();
    if n <= 1 {
        return (seq.to_vec(), stats);
    }
    let mut cur = seq.to_vec();
    let mut next = cur.clone();
    let mut offset = 1;
    while offset < n {
        next[..offset].clone_from_slice(&cur[..offset]);
        let src = &cur;
        let dst = &mut next[offset..];
        if n - offset >= PARALLEL_THRESHOLD {
            dst.par_chunks_mut(CHUNK)
                .enumerate()
                .for_each(|(c, chunk)| {
                    let base = offset + c * CHUNK;
                    for (j, out) in chunk.iter_mut().enumerate() {
                        let idx = base + j;
                        *out = op(&src[idx - offset], &src[idx]);
                    }
                });
        } else {
            for (j, out) in dst.iter_mut().enumerate() {
                let idx = offset + j;
                *out = op(&src[idx - offset], &src[idx]);
            }
        }
        std::mem::swap(&mut cur, &mut next);
        stats.layers += 1;
        offset <<= 1;
    }
    (cur, stats)
}

/// `out[k] = seq[0] ⊗ seq[1] ⊗ … ⊗ seq[k]`.
pub fn cumprod_so3(seq: &[Rotation]) -> Vec<Rotation> {
    inclusive_scan(seq, |a, b| a.compose(b))
}

pub fn cumsum_vec3(seq: &[Vec3]) -> Vec<Vec3> {
    inclusive_scan(seq, |a, b| a + b)
}

/// Multiplication order for [`cummatmul9`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProductOrder {
    /// `out[k] = M_0 · M_1 ⋯ M_k`, new factors on the right.
    LeftFold,
    /// `out[k] = M_k ⋯ M_1 · M_0`, new factors on the left. This is the order
    /// of stacked state-transition products.
    Suffix,
}

pub fn cummatmul9(seq: &[Mat9], order: ProductOrder) -> Vec<Mat9> {
    match order {
        ProductOrder::LeftFold => inclusive_scan(seq, |a, b| a * b),
        ProductOrder::Suffix => inclusive_scan(seq, |a, b| b * a),
    }
}
