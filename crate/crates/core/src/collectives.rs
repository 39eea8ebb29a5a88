//! Linear (star) collectives built on point-to-point send/recv.
//!
//! Collective traffic uses reserved tags at the top of the tag space so it
//! never matches application receives that filter on small tags.

use crate::error::{CommError, Result};
use crate::runtime::Tag;
use crate::transport::World;
use crate::wire::{Payload, PayloadKind};

pub const TAG_BROADCAST: u32 = 0xFFFF_0001;
pub const TAG_REDUCE: u32 = 0xFFFF_0002;
pub const TAG_GATHER: u32 = 0xFFFF_0003;

/// A scalar contributed to [`World::reduce_sum`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scalar {
    U64(u64),
    F64(f64),
}

impl Scalar {
    fn kind(self) -> PayloadKind {
        match self {
            Scalar::U64(_) => PayloadKind::U64Array,
            Scalar::F64(_) => PayloadKind::F64Array,
        }
    }

    fn into_payload(self) -> Payload {
        match self {
            Scalar::U64(v) => Payload::U64(vec![v]),
            Scalar::F64(v) => Payload::F64(vec![v]),
        }
    }

    fn from_payload(p: &Payload) -> Option<Scalar> {
        match p {
            Payload::U64(v) if v.len() == 1 => Some(Scalar::U64(v[0])),
            Payload::F64(v) if v.len() == 1 => Some(Scalar::F64(v[0])),
            _ => None,
        }
    }

    /// `u64` sums wrap on overflow, matching fixed-width arithmetic in
    /// every other component.
    fn add(self, other: Scalar) -> Scalar {
        match (self, other) {
            (Scalar::U64(a), Scalar::U64(b)) => Scalar::U64(a.wrapping_add(b)),
            (Scalar::F64(a), Scalar::F64(b)) => Scalar::F64(a + b),
            _ => unreachable!("kinds checked by caller"),
        }
    }
}

impl World {
    /// Every rank returns the root's payload. Non-root arguments are ignored.
    pub fn broadcast(&mut self, root: u32, payload: Payload) -> Result<Payload> {
        self.check_rank(root)?;
        if self.rank == root {
            for r in (0..self.size).filter(|&r| r != root) {
                self.send(r, TAG_BROADCAST, payload.clone())?;
            }
            Ok(payload)
        } else {
            Ok(self.recv(root, Tag::Value(TAG_BROADCAST))?.payload)
        }
    }

    /// Sum of every rank's `value`, returned at `root` only. The root folds
    /// contributions left to right in ascending rank order, so float results
    /// are bit-identical to a sequential loop over ranks.
    pub fn reduce_sum(&mut self, root: u32, value: Scalar) -> Result<Option<Scalar>> {
        self.check_rank(root)?;
        if self.rank != root {
            self.send(root, TAG_REDUCE, value.into_payload())?;
            return Ok(None);
        }
        let mut acc: Option<Scalar> = None;
        for r in 0..self.size {
            let v = if r == root {
                value
            } else {
                let env = self.recv(r, Tag::Value(TAG_REDUCE))?;
                Scalar::from_payload(&env.payload)
                    .filter(|s| s.kind() == value.kind())
                    .ok_or(CommError::KindMismatch {
                        expected: value.kind(),
                        found: env.payload.kind(),
                    })?
            };
            acc = Some(match acc {
                None => v,
                Some(a) => a.add(v),
            });
        }
        Ok(acc)
    }

    /// Collects one payload per rank at `root`, indexed by source rank
    /// regardless of arrival order.
    pub fn gather(&mut self, root: u32, payload: Payload) -> Result<Option<Vec<Payload>>> {
        self.check_rank(root)?;
        if self.rank != root {
            self.send(root, TAG_GATHER, payload)?;
            return Ok(None);
        }
        let mut own = Some(payload);
        let mut out = Vec::with_capacity(self.size as usize);
        for r in 0..self.size {
            if r == root {
                out.push(own.take().unwrap());
            } else {
                out.push(self.recv(r, Tag::Value(TAG_GATHER))?.payload);
            }
        }
        Ok(Some(out))
    }
}
