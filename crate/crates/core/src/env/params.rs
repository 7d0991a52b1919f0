use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EnvId;
use crate::error::{Error, Result};

/// Declared parameter: name, inclusive bounds, nominal value.
#[derive(Clone, Copy, Debug)]
pub struct ParamSpec {
    pub name: &'static str,
    pub lo: f64,
    pub hi: f64,
    /// Lower bound is exclusive (strictly positive quantities).
    pub lo_open: bool,
    pub nominal: f64,
}

impl ParamSpec {
    fn admits(&self, v: f64) -> bool {
        v.is_finite() && v <= self.hi && if self.lo_open { v > self.lo } else { v >= self.lo }
    }
}

/// Named dynamics parameters `theta` for one environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr", into = "ParamsRepr")]
pub struct DynamicsParams {
    env: EnvId,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsRepr {
    env: EnvId,
    params: BTreeMap<String, f64>,
}

impl DynamicsParams {
    pub fn nominal(env: EnvId) -> Self {
        DynamicsParams { env, values: env.param_specs().iter().map(|p| p.nominal).collect() }
    }

    pub fn env(&self) -> EnvId {
        self.env
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.env
            .param_specs()
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::UnknownParameter { env: self.env.to_string(), name: name.to_string() })
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        Ok(self.values[self.index(name)?])
    }

    /// Checks a value against the declared bounds without storing it.
    pub fn check(&self, name: &str, value: f64) -> Result<()> {
        let spec = &self.env.param_specs()[self.index(name)?];
        if spec.admits(value) {
            Ok(())
        } else {
            Err(Error::ParameterDomain { name: name.to_string(), value, lo: spec.lo, hi: spec.hi })
        }
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        self.check(name, value)?;
        let i = self.index(name)?;
        self.values[i] = value;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (spec, &v) in self.env.param_specs().iter().zip(&self.values) {
            if !spec.admits(v) {
                return Err(Error::ParameterDomain { name: spec.name.to_string(), value: v, lo: spec.lo, hi: spec.hi });
            }
        }
        Ok(())
    }

    /// `(name, value)` pairs in declaration order.
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        self.env.param_specs().iter().map(|p| p.name).zip(self.values.iter().copied())
    }

    pub(crate) fn raw(&self) -> &[f64] {
        &self.values
    }
}

impl From<DynamicsParams> for ParamsRepr {
    fn from(p: DynamicsParams) -> Self {
        ParamsRepr { env: p.env, params: p.iter().map(|(k, v)| (k.to_string(), v)).collect() }
    }
}

impl TryFrom<ParamsRepr> for DynamicsParams {
    type Error = Error;

    fn try_from(r: ParamsRepr) -> Result<Self> {
        let mut p = DynamicsParams::nominal(r.env);
        for (k, v) in r.params {
            p.set(&k, v)?;
        }
        Ok(p)
    }
}
