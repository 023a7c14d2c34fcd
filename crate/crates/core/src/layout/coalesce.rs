use super::Extent;

/// Output of [`coalesce`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Coalesced {
    /// Merged extents, sorted by `(iod, offset)`.
    pub extents: Vec<Extent>,
    /// Byte ranges covered by more than one input extent.
    pub overlaps: Vec<Extent>,
}

/// Sorts extents per daemon and merges the ones that touch or overlap.
///
/// The covered byte set is unchanged. Overlapping inputs are merged too, but
/// each doubly-covered range is listed in [`Coalesced::overlaps`] so callers
/// can apply their own write policy.
pub fn coalesce(input: &[Extent]) -> Coalesced {
    let mut sorted: Vec<Extent> = input.iter().copied().filter(|e| e.length > 0).collect();
    sorted.sort_unstable();
    let mut out = Coalesced::default();
    for e in sorted {
        match out.extents.last_mut() {
            Some(cur) if cur.iod == e.iod && e.offset <= cur.end() => {
                if e.offset < cur.end() {
                    let hi = cur.end().min(e.end());
                    match out.overlaps.last_mut() {
                        Some(o) if o.iod == e.iod && e.offset <= o.end() => {
                            let new_end = o.end().max(hi);
                            o.length = new_end - o.offset;
                        }
                        _ => out.overlaps.push(Extent { iod: e.iod, offset: e.offset, length: hi - e.offset }),
                    }
                }
                let end = cur.end().max(e.end());
                cur.length = end - cur.offset;
            }
            _ => out.extents.push(e),
        }
    }
    out
}
