//! The eight proxy tap points inside a DiT block.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::de::Error as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;
use crate::tensor::Matrix;

/// Where in the first block a proxy tensor is captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TapId {
    /// Block input, before the first norm.
    BlockIn,
    /// Self-attention input after norm and modulation.
    AttnIn,
    /// Self-attention output before the gated residual add.
    AttnOut,
    /// Cross-attention input after norm.
    CrossAttnIn,
    /// Cross-attention output before the residual add.
    CrossAttnOut,
    /// MLP input after norm and modulation.
    MlpIn,
    /// MLP output before the gated residual add.
    MlpOut,
    /// Block output.
    BlockOut,
}

impl TapId {
    pub const ALL: [TapId; 8] = [
        TapId::BlockIn,
        TapId::AttnIn,
        TapId::AttnOut,
        TapId::CrossAttnIn,
        TapId::CrossAttnOut,
        TapId::MlpIn,
        TapId::MlpOut,
        TapId::BlockOut,
    ];

    /// Zero-based position, also the tie-break order for selection.
    pub fn index(self) -> usize {
        self as usize
    }

    /// One-based label as drawn on the block diagram (1..=8).
    pub fn number(self) -> usize {
        self.index() + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            TapId::BlockIn => "block_in",
            TapId::AttnIn => "attn_in",
            TapId::AttnOut => "attn_out",
            TapId::CrossAttnIn => "cross_attn_in",
            TapId::CrossAttnOut => "cross_attn_out",
            TapId::MlpIn => "mlp_in",
            TapId::MlpOut => "mlp_out",
            TapId::BlockOut => "block_out",
        }
    }
}

impl fmt::Display for TapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TapId {
    type Err = Error;

    /// Accepts the snake-case name or the 1-based tap number.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Ok(n) = s.parse::<usize>() {
            if (1..=8).contains(&n) {
                return Ok(TapId::ALL[n - 1]);
            }
        }
        TapId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown tap id {s:?}")))
    }
}

impl Serialize for TapId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for TapId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// One value per tap, serialized as a map keyed by tap name in tap order.
#[derive(Debug, Clone, PartialEq)]
pub struct TapMap<T>(pub [T; 8]);

impl<T> TapMap<T> {
    pub fn from_fn(f: impl FnMut(usize) -> T) -> Self {
        TapMap(std::array::from_fn(f))
    }

    pub fn get(&self, tap: TapId) -> &T {
        &self.0[tap.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (TapId, &T)> {
        TapId::ALL.into_iter().zip(self.0.iter())
    }
}

impl<T: Serialize> Serialize for TapMap<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(8))?;
        for (tap, v) in self.iter() {
            map.serialize_entry(tap.name(), v)?;
        }
        map.end()
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for TapMap<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let mut raw: BTreeMap<String, T> = BTreeMap::deserialize(d)?;
        if raw.len() != 8 {
            return Err(D::Error::custom(format!(
                "expected all 8 tap ids, found {}",
                raw.len()
            )));
        }
        let mut values = Vec::with_capacity(8);
        for tap in TapId::ALL {
            let v = raw
                .remove(tap.name())
                .ok_or_else(|| D::Error::custom(format!("missing tap {}", tap.name())))?;
            values.push(v);
        }
        let arr: [T; 8] = values
            .try_into()
            .map_err(|_| D::Error::custom("tap count"))?;
        Ok(TapMap(arr))
    }
}

/// The eight intermediate tensors captured from one block forward.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyTapSet {
    pub taps: TapMap<Matrix>,
}

impl ProxyTapSet {
    pub fn get(&self, tap: TapId) -> &Matrix {
        self.taps.get(tap)
    }

    pub fn into_tap(self, tap: TapId) -> Matrix {
        let TapMap(arr) = self.taps;
        arr.into_iter().nth(tap.index()).expect("eight taps")
    }
}
