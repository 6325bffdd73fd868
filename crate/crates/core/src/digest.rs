//! Content digests of parameter sets and datasets.

use alloc::string::String;
use core::fmt::Write;

use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

/// SHA-256 over shapes and little-endian value bits, in iteration order.
pub fn digest_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        h.update((t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    let mut out = String::with_capacity(64);
    for b in h.finalize() {
        let _ = write!(out, "{b:02x}");
    }
    out
}
