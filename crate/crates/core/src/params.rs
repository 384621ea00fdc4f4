//! Named parameter containers: the ordered store backing a model and the
//! flat snapshots exchanged between sites and server.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Aggregation class of one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamTag {
    Global,
    Personalized,
}

pub struct ParamEntry {
    pub name: String,
    pub tag: ParamTag,
    pub tensor: Tensor,
}

/// Ordered, named parameter tensors. Iteration order is fixed at
/// construction and identical across sites, which the cross-site
/// aggregation relies on.
#[derive(Default)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tag: ParamTag, tensor: Tensor) -> Tensor {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tag,
            tensor: tensor.clone(),
        });
        tensor
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    /// Lookup restricted to one tag subset.
    pub fn get_tagged(&self, name: &str, tag: ParamTag) -> Option<&ParamEntry> {
        self.get(name).filter(|e| e.tag == tag)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_tagged(&self, tag: ParamTag) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(move |e| e.tag == tag)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for e in &self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Copy out the values of one tag subset, in store order.
    pub fn flatten(&self, tag: ParamTag) -> FlatParams {
        FlatParams {
            entries: self
                .iter_tagged(tag)
                .map(|e| (e.name.clone(), e.tensor.to_vec()))
                .collect(),
        }
    }

    /// Copy out every parameter, in store order.
    pub fn flatten_all(&self) -> FlatParams {
        FlatParams {
            entries: self
                .entries
                .iter()
                .map(|e| (e.name.clone(), e.tensor.to_vec()))
                .collect(),
        }
    }

    /// Overwrite one tag subset bitwise from a flat snapshot.
    pub fn unflatten(&self, tag: ParamTag, flat: &FlatParams) -> Result<()> {
        let targets: Vec<&ParamEntry> = self.iter_tagged(tag).collect();
        if targets.len() != flat.entries.len() {
            return Err(Error::Layout(format!(
                "expected {} tensors for {:?}, got {}",
                targets.len(),
                tag,
                flat.entries.len()
            )));
        }
        for (e, (name, values)) in targets.iter().zip(&flat.entries) {
            if &e.name != name || e.tensor.numel() != values.len() {
                return Err(Error::Layout(format!(
                    "tensor {} ({} values) does not match incoming {} ({})",
                    e.name,
                    e.tensor.numel(),
                    name,
                    values.len()
                )));
            }
            e.tensor.set_data(values);
        }
        Ok(())
    }

    /// Collect accumulated leaf gradients of one tag subset (zeros where a
    /// parameter received no gradient).
    pub fn grads(&self, tag: ParamTag) -> FlatParams {
        FlatParams {
            entries: self
                .iter_tagged(tag)
                .map(|e| {
                    let g = e
                        .tensor
                        .grad()
                        .unwrap_or_else(|| vec![0.0; e.tensor.numel()]);
                    (e.name.clone(), g)
                })
                .collect(),
        }
    }
}

/// Ordered named flat vectors: the wire format for uploads, downloads,
/// deltas and sensitivities.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatParams {
    pub entries: Vec<(String, Vec<f32>)>,
}

impl FlatParams {
    pub fn layout_matches(&self, other: &FlatParams) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((an, av), (bn, bv))| an == bn && av.len() == bv.len())
    }

    pub fn check_layout(&self, other: &FlatParams) -> Result<()> {
        if self.layout_matches(other) {
            Ok(())
        } else {
            Err(Error::Layout("flat parameter layouts differ".into()))
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn is_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &FlatParams) -> Result<FlatParams> {
        self.check_layout(other)?;
        Ok(FlatParams {
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|((n, a), (_, b))| {
                    (n.clone(), a.iter().zip(b).map(|(x, y)| x - y).collect())
                })
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &FlatParams) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .flat_map(|((_, a), (_, b))| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs())
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(names: &[(&str, ParamTag, usize)]) -> ParameterStore {
        let mut s = ParameterStore::new();
        for (i, (n, t, len)) in names.iter().enumerate() {
            let data: Vec<f32> = (0..*len).map(|j| (i * 10 + j) as f32).collect();
            s.add(n, *t, Tensor::from_vec(vec![*len], data, true).unwrap());
        }
        s
    }

    #[test]
    fn flatten_unflatten_is_identity() {
        let s = store_with(&[
            ("a", ParamTag::Global, 3),
            ("b", ParamTag::Personalized, 2),
            ("c", ParamTag::Global, 4),
        ]);
        for tag in [ParamTag::Global, ParamTag::Personalized] {
            let flat = s.flatten(tag);
            s.unflatten(tag, &flat).unwrap();
            assert_eq!(s.flatten(tag), flat);
        }
    }

    #[test]
    fn unflatten_rejects_wrong_layout() {
        let s = store_with(&[("a", ParamTag::Global, 3)]);
        let bad = FlatParams {
            entries: vec![("z".into(), vec![0.0; 3])],
        };
        assert!(matches!(
            s.unflatten(ParamTag::Global, &bad).unwrap_err(),
            Error::Layout(_)
        ));
    }

    #[test]
    fn partition_covers_everything_once() {
        let s = store_with(&[
            ("a", ParamTag::Global, 3),
            ("b", ParamTag::Personalized, 2),
        ]);
        let g = s.flatten(ParamTag::Global);
        let p = s.flatten(ParamTag::Personalized);
        assert_eq!(g.scalar_count() + p.scalar_count(), s.scalar_count());
    }
}
