//! Offset arithmetic for striped files.
//!
//! Three address spaces meet here:
//!
//! * **view space**: the sequential offsets a process sees through its [`View`],
//! * **file space**: logical byte offsets of the shared file,
//! * **physical space**: `(iod, sub-file offset)` pairs chosen by the file's
//!   [`Distribution`].
//!
//! Everything in this module is a pure function over immutable inputs.

mod coalesce;
mod distribution;
mod view;

pub use coalesce::{coalesce, Coalesced};
pub use distribution::{
    logical_to_physical, physical_to_logical, Distribution, IrregularLayout, StripeSpec, DEFAULT_STRIPE_SIZE,
};
pub use view::{view_to_file, View};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of an I/O daemon within a file's daemon list.
pub type IodIndex = u32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutError {
    #[error("invalid stripe specification: {0}")]
    InvalidStripe(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid view: {0}")]
    InvalidView(String),
    #[error("no logical byte maps to iod {iod} sub-offset {sub_offset}")]
    NoMapping { iod: IodIndex, sub_offset: u64 },
    #[error("range [{offset}, {offset}+{length}) lies outside a view of {size} bytes")]
    OutOfView { offset: u64, length: u64, size: u64 },
    #[error("offset arithmetic overflowed 64 bits")]
    Overflow,
}

/// A contiguous byte range, either in file space (`iod == None`) or inside
/// the sub-file of one daemon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Extent {
    pub iod: Option<IodIndex>,
    pub offset: u64,
    pub length: u64,
}

impl Extent {
    pub fn file(offset: u64, length: u64) -> Self {
        Extent { iod: None, offset, length }
    }

    pub fn on(iod: IodIndex, offset: u64, length: u64) -> Self {
        Extent { iod: Some(iod), offset, length }
    }

    pub fn end(&self) -> u64 {
        self.offset + self.length
    }
}

/// One piece of a logical range after placement on a daemon.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhysExtent {
    pub iod: IodIndex,
    pub sub_offset: u64,
    pub length: u64,
    /// File-space offset of the first byte of this piece.
    pub logical_offset: u64,
}

impl PhysExtent {
    pub fn extent(&self) -> Extent {
        Extent::on(self.iod, self.sub_offset, self.length)
    }
}

/// Result of [`match_layout`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conformance {
    Conforming,
    /// The contiguous view run starting at `view_offset` spans more than one
    /// physical extent.
    NonConforming {
        view_offset: u64,
    },
}

impl Conformance {
    pub fn is_conforming(&self) -> bool {
        matches!(self, Conformance::Conforming)
    }
}

/// Checks whether every maximal contiguous run of `view` over its first
/// `span` view bytes lands inside a single physical extent of `dist`.
///
/// Unbounded views need the `span` to make the question finite; bounded
/// views are clipped to their own size.
pub fn match_layout(view: &View, dist: &Distribution, span: u64) -> Result<Conformance, LayoutError> {
    let span = match view.len() {
        Some(size) => span.min(size),
        None => span,
    };
    let mut view_pos = 0u64;
    for run in view_to_file(view, 0, span)? {
        if logical_to_physical(run.offset, run.length, dist).len() > 1 {
            return Ok(Conformance::NonConforming { view_offset: view_pos });
        }
        view_pos += run.length;
    }
    Ok(Conformance::Conforming)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rr(stripe: u64, n: u32) -> Distribution {
        Distribution::RoundRobin(StripeSpec::new(stripe, n).unwrap())
    }

    #[test]
    fn full_view_aligned_run_conforms() {
        let d = rr(65536, 4);
        assert!(match_layout(&View::Full, &d, 65536).unwrap().is_conforming());
        assert_eq!(match_layout(&View::Full, &d, 65537).unwrap(), Conformance::NonConforming { view_offset: 0 });
    }

    #[test]
    fn small_block_cyclic_view_inside_one_stripe_conforms() {
        let v = View::block_cyclic(4, 4, 16).unwrap();
        // 1000 view bytes reach file offset < 4 + 250 * 16, well inside stripe 0.
        assert!(match_layout(&v, &rr(65536, 4), 1000).unwrap().is_conforming());
    }

    #[test]
    fn straddling_block_is_non_conforming() {
        // block 8 starting 4 bytes before the first stripe boundary
        let v = View::block_cyclic(65532, 8, 32).unwrap();
        assert_eq!(match_layout(&v, &rr(65536, 4), 64).unwrap(), Conformance::NonConforming { view_offset: 0 });
        // the byte oracle agrees: the first block touches two daemons
        let iods: std::collections::BTreeSet<_> = (65532..65540u64).map(|b| rr(65536, 4).locate(b).0).collect();
        assert_eq!(iods.len(), 2);
    }
}
