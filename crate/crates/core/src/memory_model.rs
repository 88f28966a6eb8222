//! Closed-form working-set accounting for the dense and factored norm paths.
//!
//! Counts are logical allocations in bytes. Allocator rounding, caching and
//! fragmentation are not modeled. Factored-path buffers are always fp32; the
//! dense baseline allocates in the weight's storage dtype.

use crate::linalg::ChunkPlan;
use crate::numerics::DType;
use serde::Serialize;

/// `(d_out, d_in, rank)` shapes used for the norm-memory comparison.
pub const REFERENCE_NORM_SHAPES: [(usize, usize, usize); 8] = [
    (4096, 4096, 64),
    (4096, 4096, 384),
    (4096, 4096, 512),
    (8192, 8192, 384),
    (8192, 8192, 512),
    (8192, 8192, 768),
    (4096, 11008, 384),
    (8192, 28672, 384),
];

const F32: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Allocation {
    pub name: &'static str,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryEstimate {
    pub persistent_bytes: u64,
    pub transient_bytes: u64,
    pub identity_bytes: u64,
    pub reduction_ratio_vs_dense: f64,
    pub allocations: Vec<Allocation>,
}

impl MemoryEstimate {
    fn from_allocations(allocations: Vec<Allocation>, reduction_ratio_vs_dense: f64) -> Self {
        let identity_bytes = allocations
            .iter()
            .filter(|a| a.name == "identity")
            .map(|a| a.bytes)
            .sum();
        Self {
            persistent_bytes: 0,
            transient_bytes: allocations.iter().map(|a| a.bytes).sum(),
            identity_bytes,
            reduction_ratio_vs_dense,
            allocations,
        }
    }

    pub fn bytes_of(&self, name: &str) -> u64 {
        self.allocations.iter().filter(|a| a.name == name).map(|a| a.bytes).sum()
    }
}

/// Dense `B·A` elements over `U + G` elements: `d_out·d_in / (d_out·r + r²)`.
pub fn theoretical_reduction(d_out: usize, d_in: usize, rank: usize) -> f64 {
    let (d_out, d_in, r) = (d_out as f64, d_in as f64, rank as f64);
    (d_out * d_in) / (d_out * r + r * r)
}

/// Working set of one factored-norm call.
///
/// The chunk loop holds: the widened fp32 copy of the weight chunk (only if
/// the weight is not already fp32), the elementwise square of that chunk
/// feeding the base-norm row sum, the fp32 `A` chunk, the running `U [d_out, r]`,
/// the Gram matrix `[r, r]`, and three `[d_out]` accumulators. With `s = 0`
/// nothing rank-dependent is allocated. Nothing outlives the call.
pub fn factored_transient_bytes(
    plan: &ChunkPlan,
    d_out: usize,
    rank: usize,
    s_zero: bool,
    weights_need_widening: bool,
) -> MemoryEstimate {
    let (d_out_b, cs, r) = (d_out as u64, plan.chunk_size as u64, rank as u64);
    let mut allocations = Vec::new();
    if weights_need_widening {
        allocations.push(Allocation {
            name: "chunk_buffer",
            bytes: d_out_b * cs * F32,
        });
    }
    allocations.push(Allocation {
        name: "square_buffer",
        bytes: d_out_b * cs * F32,
    });
    if !s_zero {
        allocations.extend([
            Allocation {
                name: "a_chunk",
                bytes: r * cs * F32,
            },
            Allocation {
                name: "u_buffer",
                bytes: d_out_b * r * F32,
            },
            Allocation {
                name: "gram",
                bytes: r * r * F32,
            },
        ]);
    }
    allocations.push(Allocation {
        name: "accumulators",
        bytes: 3 * d_out_b * F32,
    });
    MemoryEstimate::from_allocations(allocations, theoretical_reduction(d_out, plan.d_in, rank))
}

/// Working set of the dense baselines: optional `[d_in, d_in]` identity,
/// the dense `[d_out, d_in]` product, and the composed-weight copy, all in the
/// storage dtype.
pub fn dense_baseline_bytes(d_out: usize, d_in: usize, dtype: DType, with_identity: bool) -> MemoryEstimate {
    let e = dtype.storage_bytes();
    let (d_out, d_in) = (d_out as u64, d_in as u64);
    let mut allocations = Vec::new();
    if with_identity {
        allocations.push(Allocation {
            name: "identity",
            bytes: d_in * d_in * e,
        });
    }
    allocations.extend([
        Allocation {
            name: "dense_product",
            bytes: d_out * d_in * e,
        },
        Allocation {
            name: "composed_weight",
            bytes: d_out * d_in * e,
        },
    ]);
    MemoryEstimate::from_allocations(allocations, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryRow {
    pub d_out: usize,
    pub d_in: usize,
    pub rank: usize,
    pub theory_ratio: f64,
    /// fp32 bytes of the dense `B·A` product.
    pub dense_product_bytes: u64,
    /// fp32 bytes of `U` plus `G`.
    pub factored_bytes: u64,
}

pub fn emit_theory_table(shapes: &[(usize, usize, usize)]) -> Vec<TheoryRow> {
    shapes
        .iter()
        .map(|&(d_out, d_in, rank)| TheoryRow {
            d_out,
            d_in,
            rank,
            theory_ratio: theoretical_reduction(d_out, d_in, rank),
            dense_product_bytes: (d_out * d_in) as u64 * F32,
            factored_bytes: (d_out * rank + rank * rank) as u64 * F32,
        })
        .collect()
}
