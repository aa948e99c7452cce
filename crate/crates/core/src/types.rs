//! Shared domain types: token amounts, epochs, exact rationals, resource
//! typing, capacity vectors, and the id newtypes used across the protocol.
//!
//! All quantities are integers (tokens in base units, KPI values in
//! milli-units, capacity in canonical units) and all fractional protocol
//! parameters are exact rationals, so every computation is reproducible
//! bit-for-bit across runs and machines.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::{One, Zero};
use serde::de::Error as DeError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Token quantity in base units. No fractional representation exists;
/// anything that would produce a fraction is floored at the call site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TokenAmount(pub u128);

impl TokenAmount {
    pub const ZERO: TokenAmount = TokenAmount(0);

    pub fn checked_add(self, other: TokenAmount) -> Option<TokenAmount> {
        self.0.checked_add(other.0).map(TokenAmount)
    }

    pub fn checked_sub(self, other: TokenAmount) -> Option<TokenAmount> {
        self.0.checked_sub(other.0).map(TokenAmount)
    }

    pub fn checked_mul(self, factor: u128) -> Option<TokenAmount> {
        self.0.checked_mul(factor).map(TokenAmount)
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for TokenAmount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

// Serialized as a decimal string so snapshots survive JSON tooling that
// parses numbers as 64-bit floats.
impl Serialize for TokenAmount {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for TokenAmount {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct Visitor;
        impl serde::de::Visitor<'_> for Visitor {
            type Value = TokenAmount;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a token amount as a decimal string or non-negative integer")
            }
            fn visit_str<E: DeError>(self, v: &str) -> Result<TokenAmount, E> {
                v.parse::<u128>()
                    .map(TokenAmount)
                    .map_err(|_| E::custom(format!("invalid token amount {v:?}")))
            }
            fn visit_u64<E: DeError>(self, v: u64) -> Result<TokenAmount, E> {
                Ok(TokenAmount(v as u128))
            }
            fn visit_i64<E: DeError>(self, v: i64) -> Result<TokenAmount, E> {
                u128::try_from(v)
                    .map(TokenAmount)
                    .map_err(|_| E::custom("token amount cannot be negative"))
            }
        }
        deserializer.deserialize_any(Visitor)
    }
}

/// Protocol time step. All durations and lock horizons are epoch counts.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Epoch(pub u64);

impl Epoch {
    pub fn next(self) -> Epoch {
        Epoch(self.0 + 1)
    }

    pub fn saturating_add(self, epochs: u64) -> Epoch {
        Epoch(self.0.saturating_add(epochs))
    }
}

impl fmt::Display for Epoch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Exact non-negative rational. Used for severities, reward shares, scoring
/// weights, elastic bounds, and the NFT decay multiplier; keeps the ledger
/// conservation identity free of float drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rational(Ratio<u128>);

impl Rational {
    pub fn zero() -> Rational {
        Rational(Ratio::zero())
    }

    pub fn one() -> Rational {
        Rational(Ratio::one())
    }

    /// Panics if `den` is zero.
    pub fn new(num: u128, den: u128) -> Rational {
        Rational(Ratio::new(num, den))
    }

    pub fn from_integer(n: u128) -> Rational {
        Rational(Ratio::from_integer(n))
    }

    pub fn numer(&self) -> u128 {
        *self.0.numer()
    }

    pub fn denom(&self) -> u128 {
        *self.0.denom()
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn in_unit_interval(&self) -> bool {
        self.0 <= Ratio::one()
    }

    pub fn checked_add(&self, other: &Rational) -> Option<Rational> {
        let num = self
            .numer()
            .checked_mul(other.denom())?
            .checked_add(other.numer().checked_mul(self.denom())?)?;
        let den = self.denom().checked_mul(other.denom())?;
        Some(Rational(Ratio::new(num, den)))
    }

    pub fn checked_mul(&self, other: &Rational) -> Option<Rational> {
        // Cross-reduce before multiplying so only genuinely huge reduced
        // results can overflow.
        let a = Ratio::new(self.numer(), other.denom());
        let b = Ratio::new(other.numer(), self.denom());
        let num = a.numer().checked_mul(*b.numer())?;
        let den = a.denom().checked_mul(*b.denom())?;
        Some(Rational(Ratio::new(num, den)))
    }

    /// `floor(self * x)`, or `None` on overflow.
    pub fn mul_floor(&self, x: u128) -> Option<u128> {
        let g = gcd(x, self.denom());
        let reduced_x = x / g;
        let reduced_den = self.denom() / g;
        Some(self.numer().checked_mul(reduced_x)? / reduced_den)
    }

    /// Whether `q >= self * base`, computed exactly.
    pub fn le_scaled(&self, base: u128, q: u128) -> bool {
        // self * base <= q  <=>  num * base <= q * den
        match (self.numer().checked_mul(base), q.checked_mul(self.denom())) {
            (Some(lhs), Some(rhs)) => lhs <= rhs,
            // Fall back to 256-bit-free comparison via floor; exact enough
            // because both sides are integers.
            _ => self.mul_floor(base).map(|f| f <= q).unwrap_or(false),
        }
    }

    /// Whether `q <= self * base`, computed exactly.
    pub fn ge_scaled(&self, base: u128, q: u128) -> bool {
        match (self.numer().checked_mul(base), q.checked_mul(self.denom())) {
            (Some(lhs), Some(rhs)) => rhs <= lhs,
            _ => self.mul_floor(base).map(|f| q <= f).unwrap_or(false),
        }
    }

    /// Parses `"p/q"`, a decimal string such as `"0.85"`, or a plain integer.
    pub fn parse(s: &str) -> Result<Rational, String> {
        let s = s.trim();
        if let Some((p, q)) = s.split_once('/') {
            let num: u128 = p.trim().parse().map_err(|_| format!("bad numerator {p:?}"))?;
            let den: u128 = q.trim().parse().map_err(|_| format!("bad denominator {q:?}"))?;
            if den == 0 {
                return Err("zero denominator".into());
            }
            return Ok(Rational::new(num, den));
        }
        if let Some((int_part, frac_part)) = s.split_once('.') {
            if frac_part.is_empty() || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
                return Err(format!("invalid rational {s:?}"));
            }
            let int: u128 = if int_part.is_empty() {
                0
            } else {
                int_part.parse().map_err(|_| format!("invalid rational {s:?}"))?
            };
            let frac: u128 = frac_part.parse().map_err(|_| format!("invalid rational {s:?}"))?;
            let scale = 10u128
                .checked_pow(frac_part.len() as u32)
                .ok_or_else(|| format!("rational {s:?} has too many digits"))?;
            let num = int
                .checked_mul(scale)
                .and_then(|v| v.checked_add(frac))
                .ok_or_else(|| format!("rational {s:?} out of range"))?;
            return Ok(Rational::new(num, scale));
        }
        let n: u128 = s.parse().map_err(|_| format!("invalid rational {s:?}"))?;
        Ok(Rational::from_integer(n))
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denom() == 1 {
            write!(f, "{}", self.numer())
        } else {
            write!(f, "{}/{}", self.numer(), self.denom())
        }
    }
}

impl Serialize for Rational {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Rational {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct Visitor;
        impl serde::de::Visitor<'_> for Visitor {
            type Value = Rational;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a rational as \"p/q\", a decimal string, or an integer")
            }
            fn visit_str<E: DeError>(self, v: &str) -> Result<Rational, E> {
                Rational::parse(v).map_err(E::custom)
            }
            fn visit_u64<E: DeError>(self, v: u64) -> Result<Rational, E> {
                Ok(Rational::from_integer(v as u128))
            }
        }
        deserializer.deserialize_any(Visitor)
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    if a == 0 {
        1
    } else {
        a
    }
}

/// The four fundamental resource kinds nodes decompose into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ResourceKind {
    /// GiB
    Storage,
    /// vCPU
    Compute,
    /// GiB
    Memory,
    /// Mbps
    Networking,
}

impl ResourceKind {
    pub const ALL: [ResourceKind; 4] = [
        ResourceKind::Storage,
        ResourceKind::Compute,
        ResourceKind::Memory,
        ResourceKind::Networking,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ResourceKind::Storage => "storage",
            ResourceKind::Compute => "compute",
            ResourceKind::Memory => "memory",
            ResourceKind::Networking => "networking",
        }
    }
}

impl FromStr for ResourceKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "storage" => Ok(ResourceKind::Storage),
            "compute" => Ok(ResourceKind::Compute),
            "memory" => Ok(ResourceKind::Memory),
            "networking" => Ok(ResourceKind::Networking),
            other => Err(format!("unknown resource kind {other:?}")),
        }
    }
}

/// Typed resource, optionally refined by a subclass tag ("storage:fast").
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ResourceType {
    pub kind: ResourceKind,
    pub subclass: Option<String>,
}

impl ResourceType {
    pub fn new(kind: ResourceKind) -> ResourceType {
        ResourceType { kind, subclass: None }
    }

    pub fn with_subclass(kind: ResourceKind, subclass: &str) -> ResourceType {
        ResourceType { kind, subclass: Some(subclass.to_string()) }
    }
}

impl fmt::Display for ResourceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.subclass {
            Some(sub) => write!(f, "{}:{}", self.kind.as_str(), sub),
            None => f.write_str(self.kind.as_str()),
        }
    }
}

impl FromStr for ResourceType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some((kind, sub)) => {
                if sub.is_empty() {
                    return Err(format!("empty subclass in {s:?}"));
                }
                Ok(ResourceType { kind: kind.parse()?, subclass: Some(sub.to_string()) })
            }
            None => Ok(ResourceType { kind: s.parse()?, subclass: None }),
        }
    }
}

impl Serialize for ResourceType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ResourceType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// Quantities per resource type in canonical units
/// (storage GiB, compute vCPU, memory GiB, networking Mbps).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CapacityVector(pub BTreeMap<ResourceType, u64>);

impl CapacityVector {
    pub fn new() -> CapacityVector {
        CapacityVector(BTreeMap::new())
    }

    pub fn get(&self, rtype: &ResourceType) -> u64 {
        self.0.get(rtype).copied().unwrap_or(0)
    }

    pub fn set(&mut self, rtype: ResourceType, quantity: u64) {
        self.0.insert(rtype, quantity);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ResourceType, &u64)> {
        self.0.iter()
    }

    pub fn is_all_zero(&self) -> bool {
        self.0.values().all(|&q| q == 0)
    }

    pub fn add(&mut self, other: &CapacityVector) {
        for (t, q) in &other.0 {
            *self.0.entry(t.clone()).or_insert(0) += q;
        }
    }

    pub fn add_entry(&mut self, rtype: &ResourceType, quantity: u64) {
        *self.0.entry(rtype.clone()).or_insert(0) += quantity;
    }

    /// Subtracts entrywise, saturating at zero.
    pub fn saturating_sub_entry(&mut self, rtype: &ResourceType, quantity: u64) {
        let slot = self.0.entry(rtype.clone()).or_insert(0);
        *slot = slot.saturating_sub(quantity);
    }
}

impl FromIterator<(ResourceType, u64)> for CapacityVector {
    fn from_iter<I: IntoIterator<Item = (ResourceType, u64)>>(iter: I) -> Self {
        CapacityVector(iter.into_iter().collect())
    }
}

/// 32-byte digest, hex-encoded in all serialized forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Hash32(pub [u8; 32]);

impl fmt::Display for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl Serialize for Hash32 {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Hash32 {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        let bytes = hex::decode(&s).map_err(D::Error::custom)?;
        let arr: [u8; 32] =
            bytes.try_into().map_err(|_| D::Error::custom("digest must be 32 bytes"))?;
        Ok(Hash32(arr))
    }
}

macro_rules! id_newtype {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(
            Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    };
}

id_newtype!(
    /// Ledger account.
    AccountId
);
id_newtype!(
    /// Registered ScalerNode.
    NodeId
);
id_newtype!(
    /// Economic region.
    RegionId
);
id_newtype!(
    /// Hardware class template.
    ClassId
);
id_newtype!(
    /// Performance-enforcement validator.
    HyperNodeId
);
id_newtype!(
    /// Stakeable NFT pass.
    NftId
);
id_newtype!(
    /// Composed execution instance.
    InstanceId
);
id_newtype!(
    /// Named compositional configuration.
    BlueprintId
);
id_newtype!(
    /// Challenge kind.
    ChallengeKindId
);
id_newtype!(
    /// Integrated service block.
    ServiceId
);
id_newtype!(
    /// Challenge subject: a ScalerNode id or a service id.
    SubjectId
);

impl From<&NodeId> for SubjectId {
    fn from(n: &NodeId) -> SubjectId {
        SubjectId(n.0.clone())
    }
}

impl From<&ServiceId> for SubjectId {
    fn from(s: &ServiceId) -> SubjectId {
        SubjectId(s.0.clone())
    }
}
