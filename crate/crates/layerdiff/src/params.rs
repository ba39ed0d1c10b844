//! Named parameter registry shared by the model, optimizer, and
//! checkpointing.
//!
//! Slots are append-only and ordered, so enumeration order (and therefore
//! optimizer updates and checkpoint layout) is identical across runs.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone)]
pub struct Slot {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
    /// Optional projection applied after every optimizer update.
    pub clamp: Option<(f64, f64)>,
}

#[derive(Default, Clone)]
pub struct ParamStore {
    slots: Vec<Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name `{}`",
            name
        );
        self.slots.push(Slot { name, value, frozen: false, clamp: None });
        ParamId(self.slots.len() - 1)
    }

    pub fn add_clamped(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        lo: f64,
        hi: f64,
    ) -> ParamId {
        let id = self.add(name, value);
        self.slots[id.0].clamp = Some((lo, hi));
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.slots[id.0].value.shape(),
            value.shape(),
            "parameter `{}` shape change",
            self.slots[id.0].name
        );
        self.slots[id.0].value = value;
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot(&self, id: ParamId) -> &Slot {
        &self.slots[id.0]
    }

    pub fn slots(&self) -> impl Iterator<Item = (ParamId, &Slot)> {
        self.slots.iter().enumerate().map(|(i, s)| (ParamId(i), s))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.slots[id.0].frozen = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.slots[id.0].frozen
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.slots.iter().map(|s| s.value.numel()).sum()
    }
}
