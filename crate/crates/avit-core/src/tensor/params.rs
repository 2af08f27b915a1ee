//! Named parameter storage with gradient buffers and trainable flags.
//!
//! Parameters live outside the autodiff tape and survive across iterations;
//! each forward pass stages them onto a fresh tape as leaves. `backward`
//! accumulates into the `grad` buffers here, and the optimizer consumes them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index into a [`ParamStore`]. Stable for the lifetime of the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Freeze/report grouping of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Backbone,
    Adapters,
    Fwt,
    Head,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Adapters => "adapters",
            ParamGroup::Fwt => "fwt",
            ParamGroup::Head => "head",
        }
    }

    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Backbone,
        ParamGroup::Adapters,
        ParamGroup::Fwt,
        ParamGroup::Head,
    ];
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    /// Allocated on first backward touch; `None` means "no grad yet".
    pub grad: Option<Vec<T>>,
    pub trainable: bool,
    pub group: ParamGroup,
}

impl<T: Scalar> Param<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// All parameters of one model, in registration order.
///
/// Registration order is the canonical parameter order: checkpoints,
/// optimizer state, and trainable masks all follow it.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        values: Vec<T>,
        group: ParamGroup,
    ) -> ParamId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "parameter {name}: shape/value length mismatch"
        );
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len() as u32);
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape,
            values,
            grad: None,
            trainable: true,
            group,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.index()]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i as u32), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len() as u32).map(ParamId)
    }

    /// Adds `delta` into the grad buffer, allocating it zeroed on first use.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[T]) {
        let param = &mut self.params[id.index()];
        debug_assert_eq!(param.values.len(), delta.len());
        let grad = param
            .grad
            .get_or_insert_with(|| vec![T::zero(); param.values.len()]);
        for (g, &d) in grad.iter_mut().zip(delta.iter()) {
            *g += d;
        }
    }

    /// Drops all grad buffers.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Marks every parameter's trainable flag via the predicate.
    pub fn set_trainable_where(&mut self, mut pred: impl FnMut(&Param<T>) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(p);
        }
    }

    pub fn trainable_count(&self) -> u64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.len() as u64)
            .sum()
    }

    pub fn total_count(&self) -> u64 {
        self.params.iter().map(|p| p.len() as u64).sum()
    }

    pub fn group_count(&self, group: ParamGroup) -> u64 {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.len() as u64)
            .sum()
    }

    /// FNV-1a over the little-endian bytes of every value in `group`, in
    /// registration order. Used by tests to prove a stage left a group
    /// bit-identical.
    pub fn group_checksum(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut buf = Vec::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            buf.clear();
            for &v in &p.values {
                v.write_le(&mut buf);
            }
            for &b in &buf {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Grad slice for a trainable parameter, or a usage error naming it.
    pub fn require_grad(&self, id: ParamId) -> Result<&[T]> {
        let p = self.get(id);
        p.grad.as_deref().ok_or_else(|| {
            Error::usage(format!("parameter {} is trainable but has no grad", p.name))
        })
    }
}
