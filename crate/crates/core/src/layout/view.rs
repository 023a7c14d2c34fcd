use serde::{Deserialize, Serialize};

use super::{Extent, LayoutError};

/// A sequential window onto a possibly non-contiguous subset of a file.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum View {
    /// Identity: view offset equals file offset.
    #[default]
    Full,
    /// `block` bytes every `stride` bytes, starting at `first_offset`.
    BlockCyclic { first_offset: u64, block: u64, stride: u64 },
    /// Explicit `(file_offset, length)` pieces, strictly increasing.
    ExtentList(Vec<(u64, u64)>),
}

impl View {
    pub fn block_cyclic(first_offset: u64, block: u64, stride: u64) -> Result<Self, LayoutError> {
        let v = View::BlockCyclic { first_offset, block, stride };
        v.validate()?;
        Ok(v)
    }

    pub fn extent_list(extents: Vec<(u64, u64)>) -> Result<Self, LayoutError> {
        let v = View::ExtentList(extents);
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<(), LayoutError> {
        match self {
            View::Full => Ok(()),
            View::BlockCyclic { block, stride, .. } => {
                if *block == 0 {
                    Err(LayoutError::InvalidView("block must be positive".into()))
                } else if block > stride {
                    Err(LayoutError::InvalidView(format!("block {block} exceeds stride {stride}")))
                } else {
                    Ok(())
                }
            }
            View::ExtentList(list) => {
                let mut prev_end: Option<u64> = None;
                for (i, &(off, len)) in list.iter().enumerate() {
                    if len == 0 {
                        return Err(LayoutError::InvalidView(format!("extent {i} has zero length")));
                    }
                    if prev_end.is_some_and(|e| off < e) {
                        return Err(LayoutError::InvalidView(format!(
                            "extent {i} at {off} overlaps or precedes its predecessor"
                        )));
                    }
                    prev_end = Some(off.checked_add(len).ok_or(LayoutError::Overflow)?);
                }
                Ok(())
            }
        }
    }

    /// Total size for bounded views; `None` for views without an end.
    pub fn len(&self) -> Option<u64> {
        match self {
            View::ExtentList(list) => Some(list.iter().map(|&(_, l)| l).sum()),
            _ => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }

    /// Number of view bytes whose file offset is below `file_size`.
    pub fn size_within_file(&self, file_size: u64) -> u64 {
        match self {
            View::Full => file_size,
            View::BlockCyclic { first_offset, block, stride } => {
                if file_size <= *first_offset {
                    return 0;
                }
                let rel = file_size - first_offset;
                (rel / stride) * block + (rel % stride).min(*block)
            }
            View::ExtentList(list) => list.iter().map(|&(off, len)| len.min(file_size.saturating_sub(off))).sum(),
        }
    }

    /// File offset of view byte `v`.
    pub fn file_offset(&self, v: u64) -> Option<u64> {
        match self {
            View::Full => Some(v),
            View::BlockCyclic { first_offset, block, stride } => {
                (v / block).checked_mul(*stride)?.checked_add(v % block)?.checked_add(*first_offset)
            }
            View::ExtentList(list) => {
                let mut start = 0u64;
                for &(off, len) in list {
                    if v < start + len {
                        return Some(off + (v - start));
                    }
                    start += len;
                }
                None
            }
        }
    }
}

/// Translates the view range `[view_offset, view_offset + length)` into
/// file extents, in view order, merging pieces that touch in file space.
pub fn view_to_file(view: &View, view_offset: u64, length: u64) -> Result<Vec<Extent>, LayoutError> {
    let end = view_offset.checked_add(length).ok_or(LayoutError::Overflow)?;
    let mut out: Vec<Extent> = Vec::new();
    let mut push = |off: u64, len: u64| match out.last_mut() {
        Some(last) if last.end() == off => last.length += len,
        _ => out.push(Extent::file(off, len)),
    };
    if length == 0 {
        return Ok(Vec::new());
    }
    match view {
        View::Full => push(view_offset, length),
        View::BlockCyclic { first_offset, block, stride } => {
            let mut v = view_offset;
            while v < end {
                let within = v % block;
                let take = (block - within).min(end - v);
                let file = (v / block)
                    .checked_mul(*stride)
                    .and_then(|x| x.checked_add(within))
                    .and_then(|x| x.checked_add(*first_offset))
                    .ok_or(LayoutError::Overflow)?;
                file.checked_add(take).ok_or(LayoutError::Overflow)?;
                push(file, take);
                v += take;
            }
        }
        View::ExtentList(list) => {
            let size: u64 = list.iter().map(|&(_, l)| l).sum();
            if end > size {
                return Err(LayoutError::OutOfView { offset: view_offset, length, size });
            }
            let mut start = 0u64;
            for &(off, len) in list {
                let lo = view_offset.max(start);
                let hi = end.min(start + len);
                if lo < hi {
                    push(off + (lo - start), hi - lo);
                }
                start += len;
                if start >= end {
                    break;
                }
            }
        }
    }
    Ok(out)
}
