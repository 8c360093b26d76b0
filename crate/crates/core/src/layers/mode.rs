use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::tensor::Reducer;

/// Reduction over the `k x k` window of `input + kernel` sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InnerOp {
    MinPlus,
    MaxPlus,
}

/// Reduction across input channels of the window results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OuterOp {
    Sum,
    Max,
    Min,
}

/// One of the six tropical convolution layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TropicalMode {
    pub inner: InnerOp,
    pub outer: OuterOp,
}

impl TropicalMode {
    pub const MIN_P_S: TropicalMode = TropicalMode::new(InnerOp::MinPlus, OuterOp::Sum);
    pub const MAX_P_S: TropicalMode = TropicalMode::new(InnerOp::MaxPlus, OuterOp::Sum);
    pub const MIN_P_MAX: TropicalMode = TropicalMode::new(InnerOp::MinPlus, OuterOp::Max);
    pub const MAX_P_MAX: TropicalMode = TropicalMode::new(InnerOp::MaxPlus, OuterOp::Max);
    pub const MIN_P_MIN: TropicalMode = TropicalMode::new(InnerOp::MinPlus, OuterOp::Min);
    pub const MAX_P_MIN: TropicalMode = TropicalMode::new(InnerOp::MaxPlus, OuterOp::Min);

    pub const ALL: [TropicalMode; 6] = [
        Self::MIN_P_S,
        Self::MAX_P_S,
        Self::MIN_P_MAX,
        Self::MAX_P_MAX,
        Self::MIN_P_MIN,
        Self::MAX_P_MIN,
    ];

    pub const fn new(inner: InnerOp, outer: OuterOp) -> Self {
        TropicalMode { inner, outer }
    }

    pub fn name(&self) -> &'static str {
        match (self.inner, self.outer) {
            (InnerOp::MinPlus, OuterOp::Sum) => "MinP-S",
            (InnerOp::MaxPlus, OuterOp::Sum) => "MaxP-S",
            (InnerOp::MinPlus, OuterOp::Max) => "MinP-Max",
            (InnerOp::MaxPlus, OuterOp::Max) => "MaxP-Max",
            (InnerOp::MinPlus, OuterOp::Min) => "MinP-Min",
            (InnerOp::MaxPlus, OuterOp::Min) => "MaxP-Min",
        }
    }

    pub fn inner_reducer(&self) -> Reducer {
        match self.inner {
            InnerOp::MinPlus => Reducer::Min,
            InnerOp::MaxPlus => Reducer::Max,
        }
    }

    pub fn outer_reducer(&self) -> Reducer {
        match self.outer {
            OuterOp::Sum => Reducer::Sum,
            OuterOp::Max => Reducer::Max,
            OuterOp::Min => Reducer::Min,
        }
    }
}

impl fmt::Display for TropicalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Accepts the layer names case-insensitively, with or without the dash
/// (`MinP-S`, `minps`, `maxp-max`, ...).
impl FromStr for TropicalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| *c != '-' && *c != '_').collect::<String>().to_ascii_lowercase();
        TropicalMode::ALL
            .into_iter()
            .find(|m| m.name().replace('-', "").to_ascii_lowercase() == key)
            .ok_or_else(|| Error::invalid(format!("unknown tropical mode {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn six_distinct_modes() {
        let names: HashSet<_> = TropicalMode::ALL.iter().map(|m| m.name()).collect();
        assert_eq!(names.len(), 6);
        let pairs: HashSet<_> = TropicalMode::ALL.iter().map(|m| (m.inner, m.outer)).collect();
        assert_eq!(pairs.len(), 6);
    }

    #[test]
    fn names_round_trip() {
        for mode in TropicalMode::ALL {
            assert_eq!(mode.name().parse::<TropicalMode>().unwrap(), mode);
        }
        assert_eq!("minps".parse::<TropicalMode>().unwrap(), TropicalMode::MIN_P_S);
        assert_eq!("MAXP-MIN".parse::<TropicalMode>().unwrap(), TropicalMode::MAX_P_MIN);
        assert!("minp-sum".parse::<TropicalMode>().is_err());
    }
}
