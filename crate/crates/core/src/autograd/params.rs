//! Parameter storage with per-parameter freeze flags.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BnId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

impl ParamRole {
    pub fn is_bn(self) -> bool {
        matches!(self, ParamRole::BnScale | ParamRole::BnShift)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            ParamRole::Weight => 0,
            ParamRole::Bias => 1,
            ParamRole::BnScale => 2,
            ParamRole::BnShift => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ParamRole::Weight,
            1 => ParamRole::Bias,
            2 => ParamRole::BnScale,
            3 => ParamRole::BnShift,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Frozen parameters never receive gradients.
    pub frozen: bool,
}

/// Batch-normalization state: affine parameters live in the store as
/// ordinary params; running statistics live here.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BnState {
    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Read-only view of one BN layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<'a> {
    pub gamma: &'a [f64],
    pub beta: &'a [f64],
    pub eps: f64,
    pub running_mean: &'a [f64],
    pub running_var: &'a [f64],
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    bns: Vec<BnState>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        role: ParamRole,
        shape: Vec<usize>,
        data: Vec<f64>,
        frozen: bool,
    ) -> Result<ParamId> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "param shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        self.params.push(Param {
            name: name.into(),
            role,
            shape,
            data,
            frozen,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Adds a BN layer with `gamma = 1`, `beta = 0`, running mean 0 and
    /// running variance 1.
    pub fn add_bn(&mut self, name: impl Into<String>, channels: usize, trainable: bool) -> BnId {
        let name = name.into();
        let gamma = self
            .add(
                format!("{name}.gamma"),
                ParamRole::BnScale,
                vec![channels],
                vec![1.0; channels],
                !trainable,
            )
            .expect("shape matches by construction");
        let beta = self
            .add(
                format!("{name}.beta"),
                ParamRole::BnShift,
                vec![channels],
                vec![0.0; channels],
                !trainable,
            )
            .expect("shape matches by construction");
        self.bns.push(BnState {
            name,
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        });
        BnId(self.bns.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn bn(&self, id: BnId) -> &BnState {
        &self.bns[id.0]
    }

    pub fn bn_mut(&mut self, id: BnId) -> &mut BnState {
        &mut self.bns[id.0]
    }

    pub fn bns(&self) -> impl Iterator<Item = (BnId, &BnState)> {
        self.bns.iter().enumerate().map(|(i, b)| (BnId(i), b))
    }

    pub fn bn_params(&self, id: BnId) -> BnParams<'_> {
        let bn = self.bn(id);
        BnParams {
            gamma: &self.param(bn.gamma).data,
            beta: &self.param(bn.beta).data,
            eps: bn.eps,
            running_mean: &bn.running_mean,
            running_var: &bn.running_var,
            trainable: !self.param(bn.gamma).frozen || !self.param(bn.beta).frozen,
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.params[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn set_bn_trainable(&mut self, id: BnId, trainable: bool) {
        let (g, b) = (self.bns[id.0].gamma, self.bns[id.0].beta);
        self.set_frozen(g, !trainable);
        self.set_frozen(b, !trainable);
    }

    pub fn unfreeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = false;
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params()
            .filter(|(_, p)| !p.frozen)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn find_bn(&self, name: &str) -> Option<BnId> {
        self.bns.iter().position(|b| b.name == name).map(BnId)
    }

    /// SHA-256 over names and little-endian bytes of every frozen parameter.
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.frozen) {
            h.update(p.name.as_bytes());
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

/// Gradients keyed by parameter, plus gradients for tape inputs that
/// requested them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub(crate) params: BTreeMap<ParamId, Vec<f64>>,
    pub(crate) inputs: BTreeMap<usize, Tensor4>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn input(&self, var: super::Var) -> Option<&Tensor4> {
        self.inputs.get(&var.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.params {
            match self.params.get_mut(id) {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                None => {
                    self.params.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn retain(&mut self, mut keep: impl FnMut(ParamId) -> bool) {
        self.params.retain(|id, _| keep(*id));
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.params.values_mut() {
            for v in g {
                *v *= s;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.params
            .values()
            .flat_map(|g| g.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bn_defaults() {
        let mut s = ParamStore::new();
        let id = s.add_bn("ind", 3, true);
        let p = s.bn_params(id);
        assert_eq!(p.gamma, &[1.0; 3]);
        assert_eq!(p.beta, &[0.0; 3]);
        assert!(p.trainable);
        assert!(p.eps > 0.0);
    }

    #[test]
    fn digest_ignores_trainable_params() {
        let mut s = ParamStore::new();
        let w = s
            .add("w", ParamRole::Weight, vec![2], vec![1.0, 2.0], true)
            .unwrap();
        let bn = s.add_bn("bn", 2, true);
        let d0 = s.frozen_digest();
        let g = s.bn(bn).gamma;
        s.param_mut(g).data[0] = 5.0;
        assert_eq!(d0, s.frozen_digest());
        s.param_mut(w).data[0] = 1.5;
        assert_ne!(d0, s.frozen_digest());
    }
}
