//! Named, element-tagged model parameters.
//!
//! Every trainable tensor in the system lives in a [`ParamStore`] under a
//! dot-separated name (`encoder.layer0.attn.q.weight`, `prompt.embed`, …)
//! and carries exactly one [`ElementKind`] tag. The tag drives parameter
//! partitioning: upstream/downstream trainers pick which kinds they may
//! update, snapshot/restore element subsets around inner loops, and verify
//! that nothing outside the chosen subset ever moves.

use std::collections::HashMap;

use crate::elements::{ElementKind, ElementSet};
use crate::error::{ensure_contract, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub kind: ElementKind,
    pub value: Tensor,
}

/// Insertion-ordered collection of parameters with name lookup.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

/// Bitwise copy of a parameter subset, used to restore inner-loop adaptation.
#[derive(Debug, Clone)]
pub struct ParamSnapshot {
    entries: Vec<(String, Vec<f64>)>,
}

impl ParamSnapshot {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, kind: ElementKind, value: Tensor) -> Result<()> {
        let name = name.into();
        ensure_contract!(
            !self.index.contains_key(&name),
            "parameter {name:?} registered twice"
        );
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, kind, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i])
    }

    /// Parameters in insertion order (the canonical order everywhere:
    /// checkpoints, checksums, optimizer traversal).
    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Scalar count per element kind.
    pub fn census(&self) -> Vec<(ElementKind, usize)> {
        let mut by_kind: Vec<(ElementKind, usize)> = Vec::new();
        for kind in ElementKind::ALL {
            let n: usize = self
                .params
                .iter()
                .filter(|p| p.kind == kind)
                .map(|p| p.value.numel())
                .sum();
            if n > 0 {
                by_kind.push((kind, n));
            }
        }
        by_kind
    }

    /// Names of all parameters whose kind is in `set`, in insertion order.
    pub fn names_in(&self, set: &ElementSet) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| set.contains(p.kind))
            .map(|p| p.name.clone())
            .collect()
    }

    /// Kinds that have at least one parameter attached.
    pub fn attached_kinds(&self) -> ElementSet {
        let mut set = ElementSet::empty();
        for p in &self.params {
            set.insert(p.kind);
        }
        set
    }

    /// Bitwise copy of every parameter whose kind is in `set`.
    pub fn snapshot(&self, set: &ElementSet) -> ParamSnapshot {
        ParamSnapshot {
            entries: self
                .params
                .iter()
                .filter(|p| set.contains(p.kind))
                .map(|p| (p.name.clone(), p.value.data().to_vec()))
                .collect(),
        }
    }

    /// Restores values captured by [`ParamStore::snapshot`]. Gradients are
    /// left untouched.
    pub fn restore(&mut self, snapshot: &ParamSnapshot) -> Result<()> {
        for (name, data) in &snapshot.entries {
            let param = self
                .get_mut(name)
                .ok_or_else(|| crate::error::Error::contract(format!(
                    "snapshot names parameter {name:?} that is no longer in the store"
                )))?;
            param.value.set_data(data)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.value.clear_grad();
        }
    }

    /// FNV-1a fingerprint of one parameter's exact bit pattern.
    pub fn fingerprint(&self, name: &str) -> Option<u64> {
        self.get(name).map(|p| bits_fingerprint(p.value.data()))
    }

    /// `(name, fingerprint)` for every parameter — the bitwise-diff probe
    /// used by confinement tests.
    pub fn fingerprints(&self) -> Vec<(String, u64)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), bits_fingerprint(p.value.data())))
            .collect()
    }
}

/// FNV-1a over the exact f64 bit patterns.
pub fn bits_fingerprint(data: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in data {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(names: &[(&str, ElementKind, usize)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, (name, kind, n)) in names.iter().enumerate() {
            s.add(*name, *kind, Tensor::new(vec![*n], vec![i as f64; *n], false).unwrap())
                .unwrap();
        }
        s
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.add("w", ElementKind::Plm, Tensor::zeros(vec![2], false)).unwrap();
        assert!(s.add("w", ElementKind::Plm, Tensor::zeros(vec![2], false)).is_err());
    }

    #[test]
    fn snapshot_restore_round_trips_bitwise() {
        let mut s = store_with(&[
            ("a", ElementKind::Plm, 3),
            ("b", ElementKind::Prompt, 2),
        ]);
        let set = ElementSet::from_kinds(&[ElementKind::Prompt]);
        let before = s.fingerprint("b").unwrap();
        let snap = s.snapshot(&set);
        s.get_mut("b").unwrap().value.data_mut()[0] = 42.0;
        assert_ne!(s.fingerprint("b").unwrap(), before);
        s.restore(&snap).unwrap();
        assert_eq!(s.fingerprint("b").unwrap(), before);
    }

    #[test]
    fn census_counts_scalars_by_kind() {
        let s = store_with(&[
            ("a", ElementKind::Plm, 3),
            ("b", ElementKind::Prompt, 2),
            ("c", ElementKind::Plm, 5),
        ]);
        assert_eq!(
            s.census(),
            vec![(ElementKind::Plm, 8), (ElementKind::Prompt, 2)]
        );
        assert_eq!(s.total_values(), 10);
    }
}
