use serde::{Deserialize, Serialize};

use super::{IodIndex, LayoutError, PhysExtent};

/// Default stripe size of 64 KiB.
pub const DEFAULT_STRIPE_SIZE: u64 = 64 * 1024;

/// Round-robin striping parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StripeSpec {
    pub stripe_size: u64,
    pub n_iods: u32,
    /// Daemon that receives stripe 0.
    pub base_iod: u32,
}

impl StripeSpec {
    pub fn new(stripe_size: u64, n_iods: u32) -> Result<Self, LayoutError> {
        Self::with_base(stripe_size, n_iods, 0)
    }

    pub fn with_base(stripe_size: u64, n_iods: u32, base_iod: u32) -> Result<Self, LayoutError> {
        if stripe_size == 0 {
            return Err(LayoutError::InvalidStripe("stripe size must be positive".into()));
        }
        if n_iods == 0 {
            return Err(LayoutError::InvalidStripe("at least one iod is required".into()));
        }
        if base_iod >= n_iods {
            return Err(LayoutError::InvalidStripe(format!("base iod {base_iod} not below iod count {n_iods}")));
        }
        Ok(StripeSpec { stripe_size, n_iods, base_iod })
    }
}

/// An explicit, validated list of `(iod, length)` extents.
///
/// The list describes one period of the file; bytes beyond it repeat the
/// same pattern, so every logical offset has a home.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(u32, u64)>", into = "Vec<(u32, u64)>")]
pub struct IrregularLayout {
    extents: Vec<(IodIndex, u64)>,
    /// logical start of extent j within the period
    starts: Vec<u64>,
    /// bytes of the same iod preceding extent j within the period
    iod_before: Vec<u64>,
    /// per iod: bytes stored per period
    iod_period: Vec<u64>,
    /// per iod: indices of its extents in order
    iod_extents: Vec<Vec<usize>>,
    period: u64,
}

impl IrregularLayout {
    pub fn new(extents: Vec<(IodIndex, u64)>) -> Result<Self, LayoutError> {
        if extents.is_empty() {
            return Err(LayoutError::InvalidDistribution("irregular layout needs at least one extent".into()));
        }
        if let Some(i) = extents.iter().position(|&(_, len)| len == 0) {
            return Err(LayoutError::InvalidDistribution(format!("extent {i} has zero length")));
        }
        let n_iods = extents.iter().map(|&(iod, _)| iod).max().unwrap_or(0) as usize + 1;
        let mut starts = Vec::with_capacity(extents.len());
        let mut iod_before = Vec::with_capacity(extents.len());
        let mut iod_period = vec![0u64; n_iods];
        let mut iod_extents = vec![Vec::new(); n_iods];
        let mut pos = 0u64;
        for (j, &(iod, len)) in extents.iter().enumerate() {
            starts.push(pos);
            iod_before.push(iod_period[iod as usize]);
            iod_period[iod as usize] = iod_period[iod as usize].checked_add(len).ok_or(LayoutError::Overflow)?;
            iod_extents[iod as usize].push(j);
            pos = pos.checked_add(len).ok_or(LayoutError::Overflow)?;
        }
        Ok(IrregularLayout { extents, starts, iod_before, iod_period, iod_extents, period: pos })
    }

    pub fn extents(&self) -> &[(IodIndex, u64)] {
        &self.extents
    }

    pub fn n_iods(&self) -> u32 {
        self.iod_period.len() as u32
    }

    /// Logical bytes covered by one repetition of the pattern.
    pub fn period(&self) -> u64 {
        self.period
    }
}

impl TryFrom<Vec<(u32, u64)>> for IrregularLayout {
    type Error = LayoutError;
    fn try_from(v: Vec<(u32, u64)>) -> Result<Self, Self::Error> {
        IrregularLayout::new(v)
    }
}

impl From<IrregularLayout> for Vec<(u32, u64)> {
    fn from(l: IrregularLayout) -> Self {
        l.extents
    }
}

/// Physical partitioning rule of a file over its daemons.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Distribution {
    RoundRobin(StripeSpec),
    BlockCyclic { block: u64, n_iods: u32 },
    Irregular(IrregularLayout),
}

impl Distribution {
    pub fn round_robin(stripe_size: u64, n_iods: u32) -> Result<Self, LayoutError> {
        Ok(Distribution::RoundRobin(StripeSpec::new(stripe_size, n_iods)?))
    }

    pub fn block_cyclic(block: u64, n_iods: u32) -> Result<Self, LayoutError> {
        StripeSpec::new(block, n_iods)?;
        Ok(Distribution::BlockCyclic { block, n_iods })
    }

    pub fn irregular(extents: Vec<(IodIndex, u64)>) -> Result<Self, LayoutError> {
        Ok(Distribution::Irregular(IrregularLayout::new(extents)?))
    }

    /// Re-checks invariants of a value built by hand or deserialized.
    pub fn validate(&self) -> Result<(), LayoutError> {
        match self {
            Distribution::RoundRobin(s) => StripeSpec::with_base(s.stripe_size, s.n_iods, s.base_iod).map(|_| ()),
            Distribution::BlockCyclic { block, n_iods } => StripeSpec::new(*block, *n_iods).map(|_| ()),
            Distribution::Irregular(_) => Ok(()),
        }
    }

    pub fn n_iods(&self) -> u32 {
        match self {
            Distribution::RoundRobin(s) => s.n_iods,
            Distribution::BlockCyclic { n_iods, .. } => *n_iods,
            Distribution::Irregular(l) => l.n_iods(),
        }
    }

    /// Regular stripe unit, if the distribution has one.
    pub fn stripe_unit(&self) -> Option<u64> {
        match self {
            Distribution::RoundRobin(s) => Some(s.stripe_size),
            Distribution::BlockCyclic { block, .. } => Some(*block),
            Distribution::Irregular(_) => None,
        }
    }

    fn as_stripe(&self) -> Option<StripeSpec> {
        match self {
            Distribution::RoundRobin(s) => Some(*s),
            Distribution::BlockCyclic { block, n_iods } => {
                Some(StripeSpec { stripe_size: *block, n_iods: *n_iods, base_iod: 0 })
            }
            Distribution::Irregular(_) => None,
        }
    }

    /// Places a single logical byte.
    pub fn locate(&self, offset: u64) -> (IodIndex, u64) {
        let (iod, sub, _) = self.run_at(offset);
        (iod, sub)
    }

    /// Places `offset` and reports how many bytes from there on stay in the
    /// same physical extent.
    pub fn run_at(&self, offset: u64) -> (IodIndex, u64, u64) {
        if let Some(s) = self.as_stripe() {
            let stripe = offset / s.stripe_size;
            let within = offset % s.stripe_size;
            let n = u64::from(s.n_iods);
            let iod = ((stripe % n + u64::from(s.base_iod)) % n) as IodIndex;
            let sub = (stripe / n) * s.stripe_size + within;
            return (iod, sub, s.stripe_size - within);
        }
        let Distribution::Irregular(l) = self else { unreachable!() };
        let cycle = offset / l.period;
        let r = offset % l.period;
        let j = l.starts.partition_point(|&s| s <= r) - 1;
        let (iod, len) = l.extents[j];
        let into = r - l.starts[j];
        let sub = cycle * l.iod_period[iod as usize] + l.iod_before[j] + into;
        (iod, sub, len - into)
    }
}

/// Splits the logical range `[offset, offset + length)` into maximal
/// physical pieces, in logical order.
pub fn logical_to_physical(offset: u64, length: u64, dist: &Distribution) -> Vec<PhysExtent> {
    let mut out: Vec<PhysExtent> = Vec::new();
    let end = offset.saturating_add(length);
    let mut pos = offset;
    while pos < end {
        let (iod, sub, run) = dist.run_at(pos);
        let take = run.min(end - pos);
        match out.last_mut() {
            Some(last) if last.iod == iod && last.sub_offset + last.length == sub => last.length += take,
            _ => out.push(PhysExtent { iod, sub_offset: sub, length: take, logical_offset: pos }),
        }
        pos += take;
    }
    out
}

/// Inverse of [`Distribution::locate`].
pub fn physical_to_logical(iod: IodIndex, sub_offset: u64, dist: &Distribution) -> Result<u64, LayoutError> {
    let no_mapping = LayoutError::NoMapping { iod, sub_offset };
    if let Some(s) = dist.as_stripe() {
        if iod >= s.n_iods {
            return Err(no_mapping);
        }
        let n = u64::from(s.n_iods);
        let slot = (u64::from(iod) + n - u64::from(s.base_iod)) % n;
        let row = sub_offset / s.stripe_size;
        let within = sub_offset % s.stripe_size;
        return row
            .checked_mul(n)
            .and_then(|x| x.checked_add(slot))
            .and_then(|x| x.checked_mul(s.stripe_size))
            .and_then(|x| x.checked_add(within))
            .ok_or(LayoutError::Overflow);
    }
    let Distribution::Irregular(l) = dist else { unreachable!() };
    let per = match l.iod_period.get(iod as usize) {
        Some(&p) if p > 0 => p,
        _ => return Err(no_mapping),
    };
    let cycle = sub_offset / per;
    let r = sub_offset % per;
    let owned = &l.iod_extents[iod as usize];
    let k = owned.partition_point(|&j| l.iod_before[j] <= r) - 1;
    let j = owned[k];
    cycle
        .checked_mul(l.period)
        .and_then(|x| x.checked_add(l.starts[j] + (r - l.iod_before[j])))
        .ok_or(LayoutError::Overflow)
}
