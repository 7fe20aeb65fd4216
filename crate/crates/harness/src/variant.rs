//! Named method variants: the reference methods plus the ablation cells.

use std::fmt;
use std::str::FromStr;

use ostta_core::adaptation::{FilterSet, Hyperparams, Method};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Variant {
    pub method: Method,
    pub filters: FilterSet,
    pub kip: bool,
    pub soft_min: bool,
    pub hard_max: bool,
}

const NAMES: &[(&str, Variant)] = &[
    ("source", Variant::baseline(Method::Source)),
    ("tent", Variant::baseline(Method::Tent)),
    ("adapt-filter", Variant::baseline(Method::AdaptFilter)),
    ("ema-filter", Variant::baseline(Method::EmaFilter)),
    ("paf", Variant::paf(FilterSet::Both, false, true, true)),
    ("paf-kip", Variant::paf(FilterSet::Both, true, true, true)),
    ("paf-pr-only", Variant::paf(FilterSet::PrimaryOnly, false, true, true)),
    ("paf-aux-only", Variant::paf(FilterSet::AuxiliaryOnly, false, true, true)),
    ("paf-hardmin-hardmax", Variant::paf(FilterSet::Both, false, false, true)),
    ("paf-softmin-softmax", Variant::paf(FilterSet::Both, false, true, false)),
    ("paf-hardmin-softmax", Variant::paf(FilterSet::Both, false, false, false)),
];

impl Variant {
    pub const fn baseline(method: Method) -> Self {
        Self { method, filters: FilterSet::Both, kip: false, soft_min: true, hard_max: true }
    }

    pub const fn paf(filters: FilterSet, kip: bool, soft_min: bool, hard_max: bool) -> Self {
        Self { method: Method::Paf, filters, kip, soft_min, hard_max }
    }

    pub fn all() -> impl Iterator<Item = (&'static str, Variant)> {
        NAMES.iter().copied()
    }

    pub fn name(&self) -> String {
        if let Some((n, _)) = NAMES.iter().find(|(_, v)| v == self) {
            return (*n).to_string();
        }
        // variants outside the table, e.g. KIP on an ablation cell
        let base = Variant { kip: false, ..*self };
        let n = NAMES.iter().find(|(_, v)| *v == base).map_or("custom", |(n, _)| *n);
        format!("{n}+kip")
    }

    /// `base` with this variant's method and switches applied.
    pub fn apply(&self, base: &Hyperparams) -> Hyperparams {
        Hyperparams {
            method: self.method,
            filters: self.filters,
            kip_enabled: self.kip,
            soft_min: self.soft_min,
            hard_max: self.hard_max,
            ..base.clone()
        }
    }
}

impl FromStr for Variant {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (base, kip) = match s.strip_suffix("+kip") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let v = NAMES
            .iter()
            .find(|(n, _)| *n == base)
            .map(|(_, v)| *v)
            .ok_or_else(|| HarnessError::Config(format!("unknown method variant '{s}'")))?;
        Ok(if kip { Variant { kip: true, ..v } } else { v })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl Serialize for Variant {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
