//! Learnable parameters, partitioned into three independently freezable
//! groups: backbone (`theta_m`), test-time layer (`theta_s`) and
//! experts plus prediction head (`theta_e`).

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "theta_m")]
    Backbone,
    #[serde(rename = "theta_s")]
    Tta,
    #[serde(rename = "theta_e")]
    Experts,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Backbone, Group::Tta, Group::Experts];

    pub fn name(self) -> &'static str {
        match self {
            Group::Backbone => "theta_m",
            Group::Tta => "theta_s",
            Group::Experts => "theta_e",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theta_m" | "backbone" => Ok(Group::Backbone),
            "theta_s" | "tta" => Ok(Group::Tta),
            "theta_e" | "experts" | "moe" => Ok(Group::Experts),
            other => Err(Error::Contract(format!("unknown parameter group '{other}'"))),
        }
    }
}

/// Index of a parameter inside a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub group: Group,
    pub value: Array2<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: Vec<Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Array2<f64>) -> ParamId {
        self.entries.push(Parameter {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Adds a `rows x cols` weight drawn from `uniform(-1/sqrt(rows), 1/sqrt(rows))`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: Group,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound));
        self.add(name, group, value)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &Parameter {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.entries.len()).map(ParamId).collect()
    }

    pub fn group_ids(&self, group: Group) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    /// Number of scalar parameters in `group`.
    pub fn count(&self, group: Group) -> usize {
        self.entries
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Little-endian bytes of every value in `group`, in store order.
    pub fn group_bytes(&self, group: Group) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.entries.iter().filter(|p| p.group == group) {
            for v in p.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Copies the current values of `group`.
    pub fn snapshot(&self, group: Group) -> GroupSnapshot {
        let ids = self.group_ids(group);
        let values = ids.iter().map(|&id| self.get(id).clone()).collect();
        GroupSnapshot { ids, values }
    }

    pub fn restore(&mut self, snapshot: &GroupSnapshot) {
        for (id, v) in snapshot.ids.iter().zip(&snapshot.values) {
            *self.get_mut(*id) = v.clone();
        }
    }
}

/// Detached copy of one parameter group, e.g. the online test-time weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSnapshot {
    pub ids: Vec<ParamId>,
    pub values: Vec<Array2<f64>>,
}

impl GroupSnapshot {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.ids.iter().position(|&i| i == id).map(|pos| &self.values[pos])
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Array2<f64>> {
        self.ids
            .iter()
            .position(|&i| i == id)
            .map(move |pos| &mut self.values[pos])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.values
            .iter()
            .flat_map(|v| v.iter().flat_map(|x| x.to_le_bytes()))
            .collect()
    }

    /// Largest absolute elementwise difference to `other`.
    pub fn max_abs_diff(&self, other: &GroupSnapshot) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Anything that can resolve a [`ParamId`] to its current value.
pub trait ParamSource {
    fn param(&self, id: ParamId) -> &Array2<f64>;
}

impl ParamSource for ParameterStore {
    fn param(&self, id: ParamId) -> &Array2<f64> {
        self.get(id)
    }
}

impl ParamSource for GroupSnapshot {
    fn param(&self, id: ParamId) -> &Array2<f64> {
        self.get(id)
            .unwrap_or_else(|| panic!("parameter {id:?} missing from group snapshot"))
    }
}

impl ParamSource for ParamView<'_> {
    fn param(&self, id: ParamId) -> &Array2<f64> {
        self.get(id)
    }
}

/// Parameter lookup with an optional override for the test-time group.
#[derive(Clone, Copy)]
pub struct ParamView<'a> {
    store: &'a ParameterStore,
    tta: Option<&'a GroupSnapshot>,
}

impl<'a> ParamView<'a> {
    pub fn new(store: &'a ParameterStore) -> Self {
        Self { store, tta: None }
    }

    pub fn with_tta(store: &'a ParameterStore, tta: &'a GroupSnapshot) -> Self {
        Self {
            store,
            tta: Some(tta),
        }
    }

    pub fn get(&self, id: ParamId) -> &'a Array2<f64> {
        if let Some(v) = self.tta.and_then(|t| t.get(id)) {
            return v;
        }
        self.store.get(id)
    }

    pub fn store(&self) -> &'a ParameterStore {
        self.store
    }
}
