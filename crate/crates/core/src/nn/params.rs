use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named parameter groups. Every parameter belongs to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    PoseExtractor,
    FgEncoderSpatialAttention,
    FgEncoderFrozen,
    BackgroundEncoder,
    IdentityEmbedder,
    DenoiserInputFusion,
    DenoiserConv,
    DenoiserSelfAttention,
    DenoiserCrossAttention,
    DenoiserTemporal,
    CodecEncoder,
    CodecDecoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 12] = [
        ParamGroup::PoseExtractor,
        ParamGroup::FgEncoderSpatialAttention,
        ParamGroup::FgEncoderFrozen,
        ParamGroup::BackgroundEncoder,
        ParamGroup::IdentityEmbedder,
        ParamGroup::DenoiserInputFusion,
        ParamGroup::DenoiserConv,
        ParamGroup::DenoiserSelfAttention,
        ParamGroup::DenoiserCrossAttention,
        ParamGroup::DenoiserTemporal,
        ParamGroup::CodecEncoder,
        ParamGroup::CodecDecoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::PoseExtractor => "pose_extractor",
            ParamGroup::FgEncoderSpatialAttention => "fg_encoder.spatial_attention",
            ParamGroup::FgEncoderFrozen => "fg_encoder.frozen",
            ParamGroup::BackgroundEncoder => "background_encoder",
            ParamGroup::IdentityEmbedder => "identity_embedder",
            ParamGroup::DenoiserInputFusion => "denoiser.input_fusion",
            ParamGroup::DenoiserConv => "denoiser.conv",
            ParamGroup::DenoiserSelfAttention => "denoiser.self_attention",
            ParamGroup::DenoiserCrossAttention => "denoiser.cross_attention",
            ParamGroup::DenoiserTemporal => "denoiser.temporal",
            ParamGroup::CodecEncoder => "codec.encoder",
            ParamGroup::CodecDecoder => "codec.decoder",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which groups receive gradients and updates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezePlan {
    trainable: Vec<ParamGroup>,
}

impl FreezePlan {
    pub fn new(trainable: impl IntoIterator<Item = ParamGroup>) -> Self {
        let mut trainable: Vec<_> = trainable.into_iter().collect();
        trainable.sort();
        trainable.dedup();
        Self { trainable }
    }

    /// Spatial phase: pose extractor, foreground-encoder spatial attention,
    /// denoiser cross-attention and background encoder.
    pub fn phase1() -> Self {
        Self::new([
            ParamGroup::PoseExtractor,
            ParamGroup::FgEncoderSpatialAttention,
            ParamGroup::DenoiserCrossAttention,
            ParamGroup::BackgroundEncoder,
        ])
    }

    /// Temporal phase: only the temporal attention layers.
    pub fn phase2() -> Self {
        Self::new([ParamGroup::DenoiserTemporal])
    }

    pub fn all() -> Self {
        Self::new(ParamGroup::ALL)
    }

    pub fn is_trainable(&self, g: ParamGroup) -> bool {
        self.trainable.contains(&g)
    }

    pub fn trainable(&self) -> &[ParamGroup] {
        &self.trainable
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    group: ParamGroup,
    value: Tensor<T>,
}

/// Weight initialization.
#[derive(Debug, Clone, Copy)]
pub enum ParamInit {
    Zeros,
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn init<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        init: ParamInit,
        rng: &mut R,
    ) -> ParamId {
        let value = match init {
            ParamInit::Zeros => Tensor::zeros(shape),
            ParamInit::FanIn { fan_in, gain } => {
                let std = T::c(gain / (fan_in.max(1) as f64).sqrt());
                Tensor::<T>::randn(shape, rng).scale(std)
            }
        };
        self.push(name, group, value)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g: Vec<_> = self.entries.iter().map(|e| e.group).collect();
        g.sort();
        g.dedup();
        g
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Replaces a value; shape must match.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = &mut self.entries[id.0].value;
        if cur.shape() != value.shape() {
            return Err(Error::shape("parameter assignment", cur.shape(), value.shape()));
        }
        *cur = value;
        Ok(())
    }

    /// Copies every parameter named `{from}{suffix}` onto `{to}{suffix}` when
    /// the target exists. Returns the number copied.
    pub fn copy_prefix(&mut self, from: &str, to: &str) -> Result<usize> {
        let mut copied = 0;
        for i in 0..self.entries.len() {
            let Some(suffix) = self.entries[i].name.strip_prefix(from) else { continue };
            let target = format!("{to}{suffix}");
            if let Some(j) = self.find(&target) {
                let v = self.entries[i].value.clone();
                self.set(j, v)?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// SHA-256 over the raw values of a group (empty string for an empty
    /// group).
    pub fn group_checksum(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        let mut any = false;
        for e in self.entries.iter().filter(|e| e.group == group) {
            any = true;
            h.update(e.name.as_bytes());
            for v in e.value.data() {
                h.update(v.f64().to_le_bytes());
            }
        }
        if !any {
            return String::new();
        }
        checksum_hex(&h.finalize())
    }

    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.groups()
            .into_iter()
            .map(|g| (g.name().to_string(), self.group_checksum(g)))
            .collect()
    }

    /// Checksum over every parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for v in e.value.data() {
                h.update(v.f64().to_le_bytes());
            }
        }
        checksum_hex(&h.finalize())
    }

    pub(crate) fn entries(&self) -> impl Iterator<Item = (&str, ParamGroup, &Tensor<T>)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), e.group, &e.value))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    group: e.group,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }
}

pub fn checksum_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A graph bound to a parameter store, with an optional freeze plan
/// deciding which parameters are differentiable leaves.
pub struct Ctx<'a, T> {
    graph: Graph<T>,
    store: &'a ParamStore<T>,
    plan: Option<&'a FreezePlan>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self {
            graph: Graph::new(),
            store,
            plan: None,
        }
    }

    pub fn training(store: &'a ParamStore<T>, plan: &'a FreezePlan) -> Self {
        Self {
            graph: Graph::new(),
            store,
            plan: Some(plan),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.plan.is_some()
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        let trainable = self
            .plan
            .is_some_and(|plan| plan.is_trainable(self.store.group(id)));
        self.graph.param(id.0, self.store.get(id), trainable)
    }

    /// Backpropagates `loss` and returns gradients of the trainable
    /// parameters that were reached.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<(ParamId, Tensor<T>)>> {
        let mut grads = self.graph.backward(loss)?;
        let mut out: Vec<(ParamId, Tensor<T>)> = self
            .graph
            .bound_params()
            .filter_map(|(k, v)| grads.take(v).map(|g| (ParamId(k), g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

impl<T> Deref for Ctx<'_, T> {
    type Target = Graph<T>;
    fn deref(&self) -> &Graph<T> {
        &self.graph
    }
}

impl<T> DerefMut for Ctx<'_, T> {
    fn deref_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_names_round_trip() {
        for g in ParamGroup::ALL {
            assert_eq!(ParamGroup::from_name(g.name()), Some(g));
        }
    }

    #[test]
    fn checksum_tracks_group_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f32>::new();
        let a = s.init("a", ParamGroup::PoseExtractor, &[3], ParamInit::FanIn { fan_in: 3, gain: 1.0 }, &mut rng);
        s.init("b", ParamGroup::DenoiserConv, &[3], ParamInit::Zeros, &mut rng);
        let before = s.checksums();
        s.get_mut(a).data_mut()[0] += 1.0;
        let after = s.checksums();
        assert_ne!(before["pose_extractor"], after["pose_extractor"]);
        assert_eq!(before["denoiser.conv"], after["denoiser.conv"]);
    }

    #[test]
    fn frozen_params_are_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f64>::new();
        let a = s.init("a", ParamGroup::PoseExtractor, &[2], ParamInit::FanIn { fan_in: 1, gain: 1.0 }, &mut rng);
        let b = s.init("b", ParamGroup::DenoiserConv, &[2], ParamInit::FanIn { fan_in: 1, gain: 1.0 }, &mut rng);
        let plan = FreezePlan::phase1();
        let mut ctx = Ctx::training(&s, &plan);
        let va = ctx.p(a);
        let vb = ctx.p(b);
        let y = ctx.mul(va, vb).unwrap();
        let z = ctx.constant(Tensor::zeros(&[2]));
        let l = ctx.mse(y, z).unwrap();
        let grads = ctx.param_grads(l).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, a);
    }
}
